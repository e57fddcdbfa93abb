//! Flat `key = value` run configuration.
//!
//! Scalars broadcast over modes and latent dimensions; per-mode fields also
//! accept `K` comma-separated values, and `K × d_x` fields accept `d_x`
//! values (shared by every mode) or `K` rows separated by `;`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{Hyperparameters, Rescale};
use crate::vbem::{FitOptions, InitMethod};

/// Everything a `fit` or `baseline` run needs besides the data.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub hp: Hyperparameters,
    pub fit: FitOptions,
    /// `None` leaves the observations unscaled.
    pub rescale: Option<Rescale>,
    pub baseline_states: usize,
    pub baseline_max_iters: usize,
    pub baseline_tol: f64,
    /// The parsed `key = value` pairs, echoed into results.
    pub entries: BTreeMap<String, String>,
}

/// Keys that carry model hyperparameters.
const MODEL_KEYS: &[&str] = &[
    "gamma",
    "alpha0",
    "alpha",
    "kappa",
    "zeta",
    "eta",
    "a_sigma",
    "b_sigma",
    "b_mu",
    "a_obs",
    "b_obs",
    "trunc_k",
    "dim_x",
    "dim_z",
    "a_alpha_prior",
    "b_alpha_prior",
    "u_kappa_prior",
    "v_kappa_prior",
    "update_concentrations",
];

const RUN_KEYS: &[&str] = &[
    "max_iters",
    "elbo_rel_tol",
    "restarts",
    "seed",
    "elbo_decrease_tolerance",
    "track_trace",
    "freeze_phi",
    "init",
    "init_clusters",
    "init_window",
    "init_concentration",
    "rescale",
    "baseline_states",
    "baseline_max_iters",
    "baseline_tol",
];

/// A printable summary of the config, for echoing into results.
#[derive(Debug, Clone, Serialize)]
pub struct ConfigEcho<'a> {
    pub hyperparameters: &'a Hyperparameters,
    pub entries: &'a BTreeMap<String, String>,
}

impl RunConfig {
    /// Defaults for `dim_z` observed channels.
    pub fn defaults(dim_z: usize) -> Self {
        parse_config("", dim_z).expect("empty config is valid")
    }

    pub fn echo(&self) -> ConfigEcho<'_> {
        ConfigEcho {
            hyperparameters: &self.hp,
            entries: &self.entries,
        }
    }
}

pub fn load_config(path: &Path, dim_z: usize) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::InvalidInput(format!("cannot read config {}: {e}", path.display())))?;
    parse_config(&text, dim_z)
}

/// Parses a config; `dim_z` is the channel count of the data and is used
/// unless the file sets it explicitly.
pub fn parse_config(text: &str, dim_z: usize) -> Result<RunConfig> {
    let mut entries: BTreeMap<String, (usize, String)> = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: line_no,
            message: format!("expected `key = value`, got `{line}`"),
        })?;
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if !MODEL_KEYS.contains(&key.as_str()) && !RUN_KEYS.contains(&key.as_str()) {
            return Err(Error::Parse {
                line: line_no,
                message: format!("unknown key `{key}`"),
            });
        }
        if value.is_empty() {
            return Err(Error::Parse {
                line: line_no,
                message: format!("key `{key}` has no value"),
            });
        }
        if entries.insert(key.clone(), (line_no, value)).is_some() {
            return Err(Error::Parse {
                line: line_no,
                message: format!("key `{key}` given twice"),
            });
        }
    }
    let cx = Ctx { entries: &entries };

    let dim_z = cx.usize_or("dim_z", dim_z)?;
    let dim_x = cx.usize_or("dim_x", dim_z)?;
    let k = cx.usize_or("trunc_k", 20)?;
    let mut hp = Hyperparameters::new(k, dim_x, dim_z);
    hp.gamma = cx.f64_or("gamma", hp.gamma)?;
    hp.alpha0 = cx.f64_or("alpha0", hp.alpha0)?;
    hp.alpha = cx.f64_or("alpha", hp.alpha)?;
    hp.kappa = cx.f64_or("kappa", hp.kappa)?;
    if !(hp.kappa >= 0.0 && hp.kappa.is_finite()) {
        // checked before the priors below are derived from it
        return Err(Error::InvalidParameter {
            field: "kappa".into(),
            requirement: "nonnegative",
            value: hp.kappa,
        });
    }
    // the concentration priors centre on the configured α and κ unless given
    hp.a_alpha_prior = cx.f64_or("a_alpha_prior", hp.alpha + hp.kappa)?;
    hp.b_alpha_prior = cx.f64_or("b_alpha_prior", 1.0)?;
    hp.u_kappa_prior = cx.f64_or("u_kappa_prior", if hp.kappa > 0.0 { hp.kappa } else { 1.0 })?;
    hp.v_kappa_prior = cx.f64_or("v_kappa_prior", hp.alpha)?;
    hp.update_concentrations = cx.bool_or("update_concentrations", false)?;
    if let Some(v) = cx.per_mode("a_sigma", k)? {
        hp.a_sigma = v;
    }
    if let Some(v) = cx.per_mode("b_mu", k)? {
        hp.b_mu = v;
    }
    if let Some(v) = cx.per_mode("a_obs", k)? {
        hp.a_obs = v;
    }
    if let Some(v) = cx.per_mode("b_obs", k)? {
        hp.b_obs = v;
    }
    if let Some(v) = cx.table("zeta", k, dim_x)? {
        hp.zeta = v;
    }
    if let Some(v) = cx.table("eta", k, dim_x)? {
        hp.eta = v;
    }
    if let Some(v) = cx.table("b_sigma", k, dim_x)? {
        hp.b_sigma = v;
    }
    hp.validate()?;

    let d = FitOptions::default();
    let init = match cx.get("init") {
        None => d.init.clone(),
        Some((line, v)) => match v {
            "jitter" => InitMethod::Jitter,
            "dynamics" => InitMethod::default_dynamics(),
            other => {
                return Err(Error::Parse {
                    line,
                    message: format!("`init` must be `jitter` or `dynamics`, got `{other}`"),
                })
            }
        },
    };
    let init = match init {
        InitMethod::LocalDynamics {
            max_clusters,
            half_window,
        } => InitMethod::LocalDynamics {
            max_clusters: cx.usize_or("init_clusters", max_clusters)?,
            half_window: cx.usize_or("init_window", half_window)?,
        },
        InitMethod::Jitter => InitMethod::Jitter,
    };
    let fit = FitOptions {
        max_iters: cx.usize_or("max_iters", d.max_iters)?,
        elbo_rel_tol: cx.f64_or("elbo_rel_tol", d.elbo_rel_tol)?,
        restarts: cx.usize_or("restarts", d.restarts)?,
        seed: cx.u64_or("seed", d.seed)?,
        elbo_decrease_tolerance: cx.f64_or("elbo_decrease_tolerance", d.elbo_decrease_tolerance)?,
        track_trace: cx.bool_or("track_trace", d.track_trace)?,
        freeze_phi: cx.bool_or("freeze_phi", d.freeze_phi)?,
        init,
        init_concentration: cx.f64_or("init_concentration", d.init_concentration)?,
    };
    fit.validate()?;

    let rescale = match cx.get("rescale") {
        None | Some((_, "unit")) => Some(Rescale::UnitVariance),
        Some((_, "none")) => None,
        Some((line, v)) => {
            let scales = parse_list(v, line, "rescale")?;
            if scales.len() != dim_z {
                return Err(Error::Parse {
                    line,
                    message: format!(
                        "`rescale` lists {} scales for {dim_z} channels",
                        scales.len()
                    ),
                });
            }
            Some(Rescale::Explicit(scales))
        }
    };

    let baseline_tol = cx.f64_or("baseline_tol", 1e-6)?;
    if !(baseline_tol > 0.0) {
        return Err(Error::positive("baseline_tol", baseline_tol));
    }
    Ok(RunConfig {
        hp,
        fit,
        rescale,
        baseline_states: cx.usize_or("baseline_states", 3)?,
        baseline_max_iters: cx.usize_or("baseline_max_iters", 200)?,
        baseline_tol,
        entries: entries.into_iter().map(|(k, (_, v))| (k, v)).collect(),
    })
}

struct Ctx<'a> {
    entries: &'a BTreeMap<String, (usize, String)>,
}

impl Ctx<'_> {
    fn get(&self, key: &str) -> Option<(usize, &str)> {
        self.entries.get(key).map(|(l, v)| (*l, v.as_str()))
    }

    fn parse<T: std::str::FromStr>(&self, key: &str, what: &str) -> Result<Option<T>> {
        match self.get(key) {
            None => Ok(None),
            Some((line, v)) => v.parse().map(Some).map_err(|_| Error::Parse {
                line,
                message: format!("`{key}` must be {what}, got `{v}`"),
            }),
        }
    }

    fn f64_or(&self, key: &str, default: f64) -> Result<f64> {
        Ok(self.parse(key, "a number")?.unwrap_or(default))
    }

    fn usize_or(&self, key: &str, default: usize) -> Result<usize> {
        Ok(self.parse(key, "a nonnegative integer")?.unwrap_or(default))
    }

    fn u64_or(&self, key: &str, default: u64) -> Result<u64> {
        Ok(self.parse(key, "a nonnegative integer")?.unwrap_or(default))
    }

    fn bool_or(&self, key: &str, default: bool) -> Result<bool> {
        Ok(self.parse(key, "`true` or `false`")?.unwrap_or(default))
    }

    fn per_mode(&self, key: &str, k: usize) -> Result<Option<Vec<f64>>> {
        let Some((line, v)) = self.get(key) else {
            return Ok(None);
        };
        let vals = parse_list(v, line, key)?;
        match vals.len() {
            1 => Ok(Some(vec![vals[0]; k])),
            n if n == k => Ok(Some(vals)),
            n => Err(Error::Parse {
                line,
                message: format!("`{key}` needs 1 or {k} values, got {n}"),
            }),
        }
    }

    fn table(&self, key: &str, k: usize, dx: usize) -> Result<Option<Vec<Vec<f64>>>> {
        let Some((line, v)) = self.get(key) else {
            return Ok(None);
        };
        let rows: Vec<Vec<f64>> = v
            .split(';')
            .map(|r| parse_list(r, line, key))
            .collect::<Result<_>>()?;
        let widen = |row: &Vec<f64>| -> Result<Vec<f64>> {
            match row.len() {
                1 => Ok(vec![row[0]; dx]),
                n if n == dx => Ok(row.clone()),
                n => Err(Error::Parse {
                    line,
                    message: format!("`{key}` rows need 1 or {dx} values, got {n}"),
                }),
            }
        };
        match rows.len() {
            1 => Ok(Some(vec![widen(&rows[0])?; k])),
            n if n == k => Ok(Some(rows.iter().map(widen).collect::<Result<_>>()?)),
            n => Err(Error::Parse {
                line,
                message: format!("`{key}` needs 1 or {k} rows, got {n}"),
            }),
        }
    }
}

fn parse_list(v: &str, line: usize, key: &str) -> Result<Vec<f64>> {
    v.split(',')
        .map(|s| {
            let s = s.trim();
            s.parse::<f64>().map_err(|_| Error::Parse {
                line,
                message: format!("`{key}` has a non-numeric entry `{s}`"),
            })
        })
        .collect()
}
