//! Seeded k-means, used to start the Gaussian HMM and the switching model.

use nalgebra::DVector;
use rand::Rng;

/// Lloyd iterations from a k-means++ start. Returns the centers and the
/// assignment of every point; ties go to the lowest center index and an
/// emptied cluster keeps its previous center.
pub fn kmeans<R: Rng>(
    points: &[DVector<f64>],
    k: usize,
    max_iters: usize,
    rng: &mut R,
) -> (Vec<DVector<f64>>, Vec<usize>) {
    assert!(
        !points.is_empty() && k > 0,
        "k-means needs points and at least one cluster"
    );
    let n = points.len();
    let mut centers = vec![points[rng.random_range(0..n)].clone()];
    let mut dist: Vec<f64> = points
        .iter()
        .map(|p| (p - &centers[0]).norm_squared())
        .collect();
    while centers.len() < k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            dist.iter()
                .position(|&d| {
                    u -= d;
                    u < 0.0
                })
                .unwrap_or(n - 1)
        } else {
            rng.random_range(0..n)
        };
        let c = points[pick].clone();
        for (d, p) in dist.iter_mut().zip(points) {
            *d = d.min((p - &c).norm_squared());
        }
        centers.push(c);
    }
    let mut assign = vec![usize::MAX; n];
    for _ in 0..max_iters {
        let mut changed = false;
        for (a, p) in assign.iter_mut().zip(points) {
            let best = nearest(p, &centers);
            if *a != best {
                *a = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        for (j, c) in centers.iter_mut().enumerate() {
            let members: Vec<&DVector<f64>> = points
                .iter()
                .zip(&assign)
                .filter(|(_, &a)| a == j)
                .map(|(p, _)| p)
                .collect();
            if !members.is_empty() {
                *c = members.iter().fold(DVector::zeros(c.len()), |s, p| s + *p)
                    / members.len() as f64;
            }
        }
    }
    (centers, assign)
}

fn nearest(p: &DVector<f64>, centers: &[DVector<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, c) in centers.iter().enumerate() {
        let d = (p - c).norm_squared();
        if d < best_d {
            best_d = d;
            best = j;
        }
    }
    best
}
