//! Experiment orchestration for the permeadiff simulator: declarative
//! configs, a hashed run manifest and figure-ready CSV tables.

pub mod config;
pub mod manifest;
pub mod pipeline;
pub mod stats;

use std::io::Write;

use permeadiff::models::{
    cexi_signal, exchange_time, sandi_signal, verdict_signal, CexiParams, SandiParams, VerdictParams,
};
use permeadiff::sequence::Protocol;
use thiserror::Error;

pub use config::ExperimentConfig;
pub use pipeline::{Pipeline, RunSummary, Stage};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("stage {stage} failed: {message}")]
    Stage { stage: String, message: String },
}

impl CliError {
    /// Process exit code: 1 for configuration problems, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Stage { .. } => 2,
        }
    }
}

/// Model curves available to `model eval`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalModel {
    Cexi,
    Sandi,
    Verdict,
}

fn lookup(pairs: &[(String, f64)], key: &str, default: Option<f64>) -> Result<f64, CliError> {
    pairs
        .iter()
        .rev()
        .find(|(k, _)| k == key)
        .map(|(_, v)| *v)
        .or(default)
        .ok_or_else(|| CliError::Config(format!("missing model parameter `{key}`")))
}

pub fn parse_pairs(items: &[String]) -> Result<Vec<(String, f64)>, CliError> {
    items
        .iter()
        .map(|s| {
            let (k, v) = s.split_once('=').ok_or_else(|| CliError::Config(format!("expected key=value, got {s:?}")))?;
            let v: f64 = v.trim().parse().map_err(|_| CliError::Config(format!("bad number in {s:?}")))?;
            Ok((k.trim().to_string(), v))
        })
        .collect()
}

/// Writes the model signal for every measurement of `protocol` as CSV.
///
/// Keys: CEXI `f_i r_um d_i d_e` and `tau_ex_ms` or `kappa_um_per_s`;
/// SANDI `f_ex f_n f_s r_um d_is d_n d_ex`; VERDICT `f_i r_um d_is d_ex`
/// plus optional `f_v pseudo_d phi rho`.
pub fn model_eval<W: Write>(model: EvalModel, pairs: &[(String, f64)], protocol: &Protocol, w: W) -> Result<(), CliError> {
    let get = |k: &str| lookup(pairs, k, None);
    let eval: Box<dyn Fn(&permeadiff::sequence::PgseMeasurement) -> f64> = match model {
        EvalModel::Cexi => {
            let (f_i, r_s) = (get("f_i")?, get("r_um")?);
            let tau_ex = match lookup(pairs, "tau_ex_ms", None) {
                Ok(t) => t,
                Err(_) => exchange_time(r_s, f_i, get("kappa_um_per_s")?).map_err(|e| CliError::Config(e.to_string()))?,
            };
            let p = CexiParams { f_i, r_s, d_is: get("d_i")?, d_ex: get("d_e")?, tau_ex };
            Box::new(move |m| cexi_signal(&p, m.b, m.delta_big, m.delta_small))
        }
        EvalModel::Sandi => {
            let p = SandiParams {
                f_ex: get("f_ex")?,
                f_n: get("f_n")?,
                f_s: get("f_s")?,
                r_s: get("r_um")?,
                d_is: get("d_is")?,
                d_n: get("d_n")?,
                d_ex: get("d_ex")?,
            };
            Box::new(move |m| sandi_signal(&p, m.b, m.delta_small, m.delta_big))
        }
        EvalModel::Verdict => {
            let f_i = get("f_i")?;
            let f_v = lookup(pairs, "f_v", Some(0.0))?;
            let p = VerdictParams {
                f_i,
                f_v,
                f_ex: 1.0 - f_i - f_v,
                r_s: get("r_um")?,
                d_is: get("d_is")?,
                d_ex: get("d_ex")?,
                pseudo_d: lookup(pairs, "pseudo_d", Some(0.0))?,
                orientation: (lookup(pairs, "phi", Some(0.0))?, lookup(pairs, "rho", Some(0.0))?),
            };
            Box::new(move |m| verdict_signal(&p, m.b, &m.direction, m.delta_small, m.delta_big))
        }
    };
    let runtime = |e: csv::Error| CliError::Stage { stage: "model eval".into(), message: e.to_string() };
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["delta_ms", "Delta_ms", "b", "dir_x", "dir_y", "dir_z", "S"]).map_err(runtime)?;
    for m in &protocol.measurements {
        out.serialize((m.delta_small, m.delta_big, m.b, m.direction.x, m.direction.y, m.direction.z, eval(m)))
            .map_err(runtime)?;
    }
    out.flush().map_err(|e| runtime(e.into()))
}
