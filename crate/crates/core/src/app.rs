//! Command drivers behind the CLI: `fit`, `synth`, `eval` and `baseline`.
//!
//! Every driver returns a typed error; [`exit_code`] maps it onto the stable
//! process status (2 for bad input, 3 for numerical failure).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use log::info;
use serde::Serialize;

use crate::baseline::{em_fit, viterbi_decode, GaussianHmm};
use crate::config::{load_config, ConfigEcho, RunConfig};
use crate::error::{Error, Result};
use crate::io::{load_labels, load_observations, write_csv, write_labels, write_trace};
use crate::metrics::{nmi, switch_count};
use crate::model::ObservationSet;
use crate::synth::{sample_slds, SynthSpec};
use crate::vbem::{fit, ElboTerms, FitResult};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

pub fn exit_code(e: &Error) -> i32 {
    if e.is_numerical() {
        EXIT_NUMERICAL
    } else {
        EXIT_INPUT
    }
}

/// Inputs shared by `fit` and `baseline`, with command-line overrides.
#[derive(Debug, Clone, Default)]
pub struct RunArgs {
    pub config: Option<PathBuf>,
    pub data: Vec<PathBuf>,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub restarts: Option<usize>,
    pub max_iters: Option<usize>,
}

fn timestamp() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

fn prepare(args: &RunArgs) -> Result<(RunConfig, ObservationSet)> {
    let raw = load_observations(&args.data)?;
    let mut cfg = match &args.config {
        Some(p) => load_config(p, raw.dim())?,
        None => RunConfig::defaults(raw.dim()),
    };
    if let Some(s) = args.seed {
        cfg.fit.seed = s;
    }
    if let Some(r) = args.restarts {
        cfg.fit.restarts = r;
    }
    if let Some(m) = args.max_iters {
        cfg.fit.max_iters = m;
    }
    cfg.fit.validate()?;
    let obs = match &cfg.rescale {
        Some(mode) => raw.rescale(mode)?,
        None => raw,
    };
    Ok((cfg, obs))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Error::InvalidInput(format!("cannot create {}: {e}", dir.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Contents of `result.json` for a `fit` run.
#[derive(Debug, Serialize)]
pub struct FitReport<'a> {
    pub seed: u64,
    pub restarts: usize,
    pub best_restart: usize,
    pub iterations: usize,
    pub converged: bool,
    pub elbo: f64,
    pub elbo_terms: ElboTerms,
    pub restart_elbos: &'a [Option<f64>],
    pub channel_scales: &'a [f64],
    pub sample_rate_hz: Option<f64>,
    pub map_modes: &'a [usize],
    /// `unary[t][i] = Q(s_t = i)`.
    pub unary: &'a [Vec<f64>],
    pub config: ConfigEcho<'a>,
    pub timestamp: u64,
}

/// Fits the model and writes `result.json`, `elbo_trace.csv` and `modes.csv`.
pub fn run_fit(args: &RunArgs) -> Result<FitResult> {
    let (cfg, obs) = prepare(args)?;
    info!(
        "fitting {} sequence(s) of length {} with K = {}, {} restart(s)",
        obs.n_seq(),
        obs.len(),
        cfg.hp.trunc_k,
        cfg.fit.restarts
    );
    let res = fit(&obs, &cfg.hp, &cfg.fit)?;
    info!(
        "best restart {} with bound {:.6}",
        res.best.restart,
        res.elbo()
    );
    create_dir(&args.out)?;
    let report = FitReport {
        seed: res.seed,
        restarts: cfg.fit.restarts,
        best_restart: res.best.restart,
        iterations: res.best.iterations,
        converged: res.best.converged,
        elbo: res.elbo(),
        elbo_terms: res.best.elbo_terms,
        restart_elbos: &res.restart_elbos,
        channel_scales: &obs.channel_scales,
        sample_rate_hz: obs.sample_rate_hz,
        map_modes: res.map_modes(),
        unary: &res.best.marginals.unary,
        config: cfg.echo(),
        timestamp: timestamp(),
    };
    write_json(&args.out.join("result.json"), &report)?;
    write_trace(&args.out.join("elbo_trace.csv"), &res.best.elbo_trace)?;
    write_labels(&args.out.join("modes.csv"), "map_mode", res.map_modes())?;
    Ok(res)
}

/// Contents of `result.json` for a `baseline` run.
#[derive(Debug, Serialize)]
pub struct BaselineReport<'a> {
    pub seed: u64,
    pub n_states: usize,
    pub iterations: usize,
    pub converged: bool,
    pub log_likelihood: &'a [f64],
    pub model: &'a GaussianHmm,
    pub map_modes: &'a [usize],
    pub config: ConfigEcho<'a>,
    pub timestamp: u64,
}

/// Gaussian-HMM baseline on a single sequence; writes the same `modes.csv`
/// schema as `fit`.
pub fn run_baseline(args: &RunArgs) -> Result<Vec<usize>> {
    let (cfg, obs) = prepare(args)?;
    if obs.n_seq() != 1 {
        return Err(Error::InvalidInput(
            "the baseline trains on a single sequence".into(),
        ));
    }
    let z = &obs.sequences[0];
    let em = em_fit(
        z,
        cfg.baseline_states,
        cfg.fit.seed,
        cfg.baseline_max_iters,
        cfg.baseline_tol,
    )?;
    let modes = viterbi_decode(&em.model, z)?;
    create_dir(&args.out)?;
    let report = BaselineReport {
        seed: cfg.fit.seed,
        n_states: cfg.baseline_states,
        iterations: em.iterations,
        converged: em.converged,
        log_likelihood: &em.log_likelihood,
        model: &em.model,
        map_modes: &modes,
        config: cfg.echo(),
        timestamp: timestamp(),
    };
    write_json(&args.out.join("result.json"), &report)?;
    write_labels(&args.out.join("modes.csv"), "map_mode", &modes)?;
    Ok(modes)
}

/// Parses a `key = value` synthetic-data spec. Keys: `t_len`, `dim`,
/// `dwell_mean`, `seed`, `n_seq`, `n_modes` (1 to 3, taken from the
/// benchmark's dynamics in order).
pub fn parse_synth_spec(text: &str) -> Result<SynthSpec> {
    let mut kv: BTreeMap<&str, (usize, &str)> = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            line: idx + 1,
            message,
        };
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
        let k = k.trim();
        if !["t_len", "dim", "dwell_mean", "seed", "n_seq", "n_modes"].contains(&k) {
            return Err(err(format!("unknown key `{k}`")));
        }
        if kv.insert(k, (idx + 1, v.trim())).is_some() {
            return Err(err(format!("duplicate key `{k}`")));
        }
    }
    fn get<T: std::str::FromStr>(
        kv: &BTreeMap<&str, (usize, &str)>,
        key: &str,
        default: T,
    ) -> Result<T> {
        match kv.get(key) {
            None => Ok(default),
            Some(&(line, v)) => v.parse().map_err(|_| Error::Parse {
                line,
                message: format!("`{key}` has invalid value `{v}`"),
            }),
        }
    }
    let t_len = get(&kv, "t_len", 600usize)?;
    let dim = get(&kv, "dim", 3usize)?;
    let dwell = get(&kv, "dwell_mean", 50.0f64)?;
    let n_modes = get(&kv, "n_modes", 3usize)?;
    if !(1..=3).contains(&n_modes) {
        return Err(Error::InvalidParameter {
            field: "n_modes".into(),
            requirement: "between 1 and 3",
            value: n_modes as f64,
        });
    }
    if dim == 0 {
        return Err(Error::positive("dim", 0.0));
    }
    let mut spec = SynthSpec::benchmark(t_len, dim, dwell, get(&kv, "seed", 0u64)?);
    spec.n_seq = get(&kv, "n_seq", 1usize)?;
    spec.n_modes = n_modes;
    spec.dynamics.truncate(n_modes);
    spec.emissions.truncate(n_modes);
    spec.obs_cov.truncate(n_modes);
    spec.init_mean.truncate(n_modes);
    spec.init_cov.truncate(n_modes);
    spec.validate()?;
    Ok(spec)
}

/// Samples a dataset; writes `data.csv` (or `data_<n>.csv` for several
/// sequences) and `labels.csv`. Returns the data file paths.
pub fn run_synth(spec_path: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let text = std::fs::read_to_string(spec_path)
        .map_err(|e| Error::InvalidInput(format!("cannot read {}: {e}", spec_path.display())))?;
    let spec = parse_synth_spec(&text)?;
    let data = sample_slds(&spec)?;
    create_dir(out)?;
    let t: Vec<f64> = (0..spec.t_len).map(|i| i as f64).collect();
    let mut paths = Vec::new();
    for (n, z) in data.obs.sequences.iter().enumerate() {
        let name = if spec.n_seq == 1 {
            "data.csv".to_string()
        } else {
            format!("data_{n}.csv")
        };
        let p = out.join(name);
        write_csv(&p, &t, z)?;
        paths.push(p);
    }
    write_labels(&out.join("labels.csv"), "label", &data.modes)?;
    Ok(paths)
}

/// Agreement of one predicted sequence with the labels.
#[derive(Debug, Clone, Serialize)]
pub struct EvalRun {
    pub name: String,
    pub nmi: f64,
    pub switches_pred: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub length: usize,
    pub switches_labels: usize,
    pub runs: Vec<EvalRun>,
    pub nmi_mean: f64,
    pub nmi_median: f64,
}

fn eval_one(name: String, pred: &[usize], labels: &[usize]) -> Result<EvalRun> {
    if pred.len() != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{name} has {} predictions for {} labels",
            pred.len(),
            labels.len()
        )));
    }
    Ok(EvalRun {
        name,
        nmi: nmi(pred, labels)?,
        switches_pred: switch_count(pred),
    })
}

/// Scores a prediction file, or every run under a directory, against the
/// labels. Runs are the subdirectories holding a `modes.csv`; without any,
/// every `.csv` directly inside the directory is taken as a prediction.
pub fn run_eval(pred: &Path, labels_path: &Path) -> Result<EvalReport> {
    let labels = load_labels(labels_path)?;
    let mut files: Vec<(String, PathBuf)> = Vec::new();
    if pred.is_dir() {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(pred)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        entries.sort();
        let name = |p: &Path| {
            p.file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default()
        };
        for p in &entries {
            if p.is_dir() && p.join("modes.csv").is_file() {
                files.push((name(p), p.join("modes.csv")));
            }
        }
        if files.is_empty() {
            for p in &entries {
                if p.is_file()
                    && p.extension().is_some_and(|e| e == "csv")
                    && p.as_path() != labels_path
                {
                    files.push((name(p), p.clone()));
                }
            }
        }
        if files.is_empty() {
            return Err(Error::InvalidInput(format!(
                "no predictions found under {}",
                pred.display()
            )));
        }
    } else {
        files.push((pred.display().to_string(), pred.to_path_buf()));
    }
    let runs = files
        .into_iter()
        .map(|(name, p)| eval_one(name, &load_labels(&p)?, &labels))
        .collect::<Result<Vec<_>>>()?;
    let mut scores: Vec<f64> = runs.iter().map(|r| r.nmi).collect();
    scores.sort_by(f64::total_cmp);
    let m = scores.len();
    let median = if m % 2 == 1 {
        scores[m / 2]
    } else {
        0.5 * (scores[m / 2 - 1] + scores[m / 2])
    };
    Ok(EvalReport {
        length: labels.len(),
        switches_labels: switch_count(&labels),
        nmi_mean: scores.iter().sum::<f64>() / m as f64,
        nmi_median: median,
        runs,
    })
}
