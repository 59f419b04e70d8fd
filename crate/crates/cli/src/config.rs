//! Experiment configuration files.
//!
//! The file is TOML with three sections. Every key is optional and falls back
//! to the default experiment:
//!
//! ```toml
//! [truth]
//! q = 0.09
//! r = 200.0
//! period = 1.0
//! turn_rates_deg = [-4.0, 0.0, 4.0]
//! horizon = 100
//! x0 = [0.0, 10.0, 0.0, 10.0]
//! initial_mode = 1          # zero-based index into turn_rates_deg
//! stay_prob = 0.8
//!
//! [filters]
//! variants = ["KL", "MM", "KNOWN_R"]
//! nc = 2
//! forgetting = 1.0
//! nu0 = 20.0
//! sigma0 = [[50.0, 0.0], [0.0, 50.0]]
//! # known_r = [[200.0, 10.0], [10.0, 200.0]]   # defaults to the true R
//! mm_degree_rule = "average"                     # or "match_spread"
//! prob_floor = 0.0
//!
//! [experiment]
//! n_runs = 1000
//! seed = 2014
//! r_sweep = [50.0, 100.0, 200.0, 400.0]
//! initial_cov = [100.0, 10.0, 100.0, 10.0]
//! # window = [50, 100]      # zero-based, half-open; default is the final half
//! ```
//!
//! Overrides use the dotted form `section.key=value`, where `value` is any
//! TOML value (`truth.r=20`, `filters.variants=["KL"]`).

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use toml::{Table, Value};

use immrm::dist::DegreeRule;
use immrm::imm::{FilterConfig, Variant};
use immrm::model::TruthConfig;
use immrm::sim::ExperimentConfig;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TruthSection {
    pub q: f64,
    pub r: f64,
    pub period: f64,
    pub turn_rates_deg: Vec<f64>,
    pub horizon: usize,
    pub x0: Vec<f64>,
    pub initial_mode: usize,
    pub stay_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FilterSection {
    pub variants: Vec<String>,
    pub nc: usize,
    pub forgetting: f64,
    pub nu0: f64,
    pub sigma0: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub known_r: Option<Vec<Vec<f64>>>,
    pub mm_degree_rule: String,
    pub prob_floor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentSection {
    pub n_runs: usize,
    pub seed: u64,
    pub r_sweep: Vec<f64>,
    pub initial_cov: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub window: Option<Vec<usize>>,
}

/// Configuration exactly as written in a file, before conversion.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FileConfig {
    pub truth: TruthSection,
    pub filters: FilterSection,
    pub experiment: ExperimentSection,
}

impl Default for FileConfig {
    fn default() -> Self {
        Self {
            truth: TruthSection {
                q: 0.09,
                r: 200.0,
                period: 1.0,
                turn_rates_deg: vec![-4.0, 0.0, 4.0],
                horizon: 100,
                x0: vec![0.0, 10.0, 0.0, 10.0],
                initial_mode: 1,
                stay_prob: 0.8,
            },
            filters: FilterSection {
                variants: Variant::ALL.iter().map(|v| v.label().to_string()).collect(),
                nc: 2,
                forgetting: 1.0,
                nu0: 20.0,
                sigma0: vec![vec![50.0, 0.0], vec![0.0, 50.0]],
                known_r: None,
                mm_degree_rule: "average".into(),
                prob_floor: 0.0,
            },
            experiment: ExperimentSection {
                n_runs: 1000,
                seed: 2014,
                r_sweep: vec![50.0, 100.0, 200.0, 400.0],
                initial_cov: vec![100.0, 10.0, 100.0, 10.0],
                window: None,
            },
        }
    }
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

fn kind(v: &Value) -> &'static str {
    v.type_str()
}

fn as_f64(key: &str, v: &Value) -> Result<f64, CliError> {
    match v {
        Value::Float(f) => Ok(*f),
        Value::Integer(i) => Ok(*i as f64),
        other => Err(config_err(format!(
            "{key}: expected a number, found {}",
            kind(other)
        ))),
    }
}

fn as_u64(key: &str, v: &Value) -> Result<u64, CliError> {
    match v {
        Value::Integer(i) if *i >= 0 => Ok(*i as u64),
        Value::Integer(i) => Err(config_err(format!(
            "{key}: expected a non-negative integer, found {i}"
        ))),
        other => Err(config_err(format!(
            "{key}: expected an integer, found {}",
            kind(other)
        ))),
    }
}

fn as_usize(key: &str, v: &Value) -> Result<usize, CliError> {
    as_u64(key, v).map(|n| n as usize)
}

fn as_str(key: &str, v: &Value) -> Result<String, CliError> {
    match v {
        Value::String(s) => Ok(s.clone()),
        other => Err(config_err(format!(
            "{key}: expected a string, found {}",
            kind(other)
        ))),
    }
}

fn as_array<'a>(key: &str, v: &'a Value) -> Result<&'a [Value], CliError> {
    match v {
        Value::Array(a) => Ok(a),
        other => Err(config_err(format!(
            "{key}: expected an array, found {}",
            kind(other)
        ))),
    }
}

fn as_f64_vec(key: &str, v: &Value) -> Result<Vec<f64>, CliError> {
    as_array(key, v)?.iter().map(|x| as_f64(key, x)).collect()
}

fn as_matrix(key: &str, v: &Value) -> Result<Vec<Vec<f64>>, CliError> {
    let rows = as_array(key, v)?
        .iter()
        .map(|row| as_f64_vec(key, row))
        .collect::<Result<Vec<_>, _>>()?;
    if rows.is_empty() || rows.iter().any(|r| r.len() != rows.len()) {
        return Err(config_err(format!(
            "{key}: expected a square matrix as an array of rows"
        )));
    }
    Ok(rows)
}

fn to_dmatrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), rows.len(), |i, j| rows[i][j])
}

fn section<'a>(name: &str, v: &'a Value) -> Result<&'a Table, CliError> {
    v.as_table()
        .ok_or_else(|| config_err(format!("{name}: expected a section, found {}", kind(v))))
}

fn unknown(key: String) -> CliError {
    config_err(format!("{key}: unknown key"))
}

impl FileConfig {
    /// Reads a parsed TOML document; absent keys keep their defaults.
    pub fn from_table(table: &Table) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        for (name, value) in table {
            let sec = section(name, value)?;
            match name.as_str() {
                "truth" => cfg.read_truth(sec)?,
                "filters" => cfg.read_filters(sec)?,
                "experiment" => cfg.read_experiment(sec)?,
                _ => return Err(unknown(name.clone())),
            }
        }
        Ok(cfg)
    }

    fn read_truth(&mut self, sec: &Table) -> Result<(), CliError> {
        let t = &mut self.truth;
        for (k, v) in sec {
            let key = format!("truth.{k}");
            match k.as_str() {
                "q" => t.q = as_f64(&key, v)?,
                "r" => t.r = as_f64(&key, v)?,
                "period" => t.period = as_f64(&key, v)?,
                "turn_rates_deg" => t.turn_rates_deg = as_f64_vec(&key, v)?,
                "horizon" => t.horizon = as_usize(&key, v)?,
                "x0" => t.x0 = as_f64_vec(&key, v)?,
                "initial_mode" => t.initial_mode = as_usize(&key, v)?,
                "stay_prob" => t.stay_prob = as_f64(&key, v)?,
                _ => return Err(unknown(key)),
            }
        }
        Ok(())
    }

    fn read_filters(&mut self, sec: &Table) -> Result<(), CliError> {
        let f = &mut self.filters;
        for (k, v) in sec {
            let key = format!("filters.{k}");
            match k.as_str() {
                "variants" => {
                    f.variants = as_array(&key, v)?
                        .iter()
                        .map(|x| as_str(&key, x))
                        .collect::<Result<_, _>>()?
                }
                "nc" => f.nc = as_usize(&key, v)?,
                "forgetting" => f.forgetting = as_f64(&key, v)?,
                "nu0" => f.nu0 = as_f64(&key, v)?,
                "sigma0" => f.sigma0 = as_matrix(&key, v)?,
                "known_r" => f.known_r = Some(as_matrix(&key, v)?),
                "mm_degree_rule" => f.mm_degree_rule = as_str(&key, v)?,
                "prob_floor" => f.prob_floor = as_f64(&key, v)?,
                _ => return Err(unknown(key)),
            }
        }
        Ok(())
    }

    fn read_experiment(&mut self, sec: &Table) -> Result<(), CliError> {
        let e = &mut self.experiment;
        for (k, v) in sec {
            let key = format!("experiment.{k}");
            match k.as_str() {
                "n_runs" => e.n_runs = as_usize(&key, v)?,
                "seed" => e.seed = as_u64(&key, v)?,
                "r_sweep" => e.r_sweep = as_f64_vec(&key, v)?,
                "initial_cov" => e.initial_cov = as_f64_vec(&key, v)?,
                "window" => {
                    let w = as_array(&key, v)?
                        .iter()
                        .map(|x| as_usize(&key, x))
                        .collect::<Result<Vec<_>, _>>()?;
                    if w.len() != 2 {
                        return Err(config_err(format!("{key}: expected [start, end]")));
                    }
                    e.window = Some(w);
                }
                _ => return Err(unknown(key)),
            }
        }
        Ok(())
    }

    /// Converts to the library configuration and validates it.
    pub fn to_experiment(&self) -> Result<ExperimentConfig, CliError> {
        let t = &self.truth;
        if t.x0.len() != 4 {
            return Err(config_err("truth.x0 must have 4 entries"));
        }
        let truth = TruthConfig {
            q: t.q,
            r: t.r,
            period: t.period,
            turn_rates: t.turn_rates_deg.iter().map(|d| d.to_radians()).collect(),
            horizon: t.horizon,
            x0: DVector::from_column_slice(&t.x0),
            initial_mode: t.initial_mode,
            stay_prob: t.stay_prob,
        };

        let f = &self.filters;
        let degree_rule = match f.mm_degree_rule.as_str() {
            "average" => DegreeRule::Average,
            "match_spread" => DegreeRule::MatchSpread,
            other => {
                return Err(config_err(format!(
                    "filters.mm_degree_rule: unknown rule `{other}` (expected `average` or `match_spread`)"
                )))
            }
        };
        let filters = f
            .variants
            .iter()
            .map(|name| {
                let variant: Variant = name.parse().map_err(|_| {
                    config_err(format!("filters.variants: unknown variant `{name}`"))
                })?;
                let mut fc = FilterConfig::new(variant);
                fc.vb_iterations = f.nc;
                fc.forgetting = f.forgetting;
                fc.prior_degree = f.nu0;
                fc.prior_scale = to_dmatrix(&f.sigma0);
                fc.known_r = f.known_r.as_deref().map(to_dmatrix);
                fc.degree_rule = degree_rule;
                fc.prob_floor = f.prob_floor;
                Ok(fc)
            })
            .collect::<Result<Vec<_>, CliError>>()?;

        let e = &self.experiment;
        let cfg = ExperimentConfig {
            truth,
            filters,
            n_runs: e.n_runs,
            base_seed: e.seed,
            r_sweep: e.r_sweep.clone(),
            steady_state_window: e.window.as_ref().map(|w| w[0]..w[1]),
            initial_cov_diag: e.initial_cov.clone(),
        };
        cfg.validate().map_err(|err| config_err(err.to_string()))?;
        Ok(cfg)
    }

    /// TOML text that parses back to this configuration.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration is always representable as TOML")
    }
}

/// Applies one `section.key=value` override to a parsed document.
pub fn apply_override(table: &mut Table, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment.split_once('=').ok_or_else(|| {
        config_err(format!(
            "override `{assignment}` is not of the form key=value"
        ))
    })?;
    let key = key.trim();
    let (sec, name) = key
        .split_once('.')
        .ok_or_else(|| config_err(format!("{key}: override keys have the form section.key")))?;
    let value = parse_value(raw.trim());
    let entry = table
        .entry(sec.to_string())
        .or_insert_with(|| Value::Table(Table::new()));
    let sec_table = entry
        .as_table_mut()
        .ok_or_else(|| config_err(format!("{sec}: expected a section")))?;
    sec_table.insert(name.to_string(), value);
    Ok(())
}

/// A TOML value if `raw` is one, otherwise the raw text as a string.
fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Loads an optional file and applies overrides in order.
pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<FileConfig, CliError> {
    let mut table = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Io {
                path: p.to_path_buf(),
                source: e,
            })?;
            text.parse::<Table>()
                .map_err(|e| config_err(format!("{}: {e}", p.display())))?
        }
        None => Table::new(),
    };
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    FileConfig::from_table(&table)
}

/// Reads a configuration file with overrides and returns the validated
/// experiment.
pub fn parse_config(
    path: Option<&Path>,
    overrides: &[String],
) -> Result<ExperimentConfig, CliError> {
    load(path, overrides)?.to_experiment()
}
