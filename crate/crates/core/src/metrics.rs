//! Agreement between labelings: contingency tables, NMI and switch counts.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Counts `|A_i ∩ B_j|`. Rows follow the sorted distinct labels of `a`,
/// columns those of `b`.
pub fn contingency(a: &[usize], b: &[usize]) -> Result<Vec<Vec<usize>>> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!(
            "label sequences of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    let index = |xs: &[usize]| -> BTreeMap<usize, usize> {
        let mut m = BTreeMap::new();
        for &x in xs {
            m.entry(x).or_insert(0);
        }
        for (i, v) in m.values_mut().enumerate() {
            *v = i;
        }
        m
    };
    let ia = index(a);
    let ib = index(b);
    let mut table = vec![vec![0; ib.len()]; ia.len()];
    for (x, y) in a.iter().zip(b) {
        table[ia[x]][ib[y]] += 1;
    }
    Ok(table)
}

/// Normalized mutual information `2 I(A; B) / (H(A) + H(B))`, natural log.
///
/// Two single-cluster partitions score 1; a single-cluster partition against
/// a non-trivial one scores 0.
pub fn nmi(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.is_empty() {
        return Err(Error::InvalidInput("empty label sequence".into()));
    }
    let table = contingency(a, b)?;
    let n = a.len() as f64;
    let rows: Vec<f64> = table
        .iter()
        .map(|r| r.iter().sum::<usize>() as f64)
        .collect();
    let cols: Vec<f64> = (0..table[0].len())
        .map(|j| table.iter().map(|r| r[j]).sum::<usize>() as f64)
        .collect();
    let entropy = |xs: &[f64]| -> f64 { -xs.iter().map(|&c| (c / n) * (c / n).ln()).sum::<f64>() };
    let (ha, hb) = (entropy(&rows), entropy(&cols));
    if rows.len() == 1 || cols.len() == 1 {
        return Ok(if rows.len() == cols.len() { 1.0 } else { 0.0 });
    }
    // summed in sorted order so that swapping the arguments is bit-exact
    let mut terms = Vec::new();
    for (i, row) in table.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            if c > 0 {
                let c = c as f64;
                terms.push((c / n) * (n * c / (rows[i] * cols[j])).ln());
            }
        }
    }
    terms.sort_by(f64::total_cmp);
    let mi: f64 = terms.iter().sum();
    Ok((2.0 * mi / (ha + hb)).clamp(0.0, 1.0))
}

/// Number of positions where the label differs from its predecessor.
pub fn switch_count(seq: &[usize]) -> usize {
    seq.windows(2).filter(|w| w[0] != w[1]).count()
}
