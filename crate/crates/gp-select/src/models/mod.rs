//! The four generative models with truncated E-steps over per-point state
//! sets, closed-form M-steps, and free-energy evaluation for monitoring.

pub mod bsc;
pub mod gmm;
pub mod nlss;
pub mod ss;

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub use bsc::BscParams;
pub use gmm::GmmParams;
pub use nlss::NlssParams;
pub use ss::SsParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Bsc,
    Ss,
    Nlss,
    Gmm,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ModelKind::Bsc => "bsc",
            ModelKind::Ss => "ss",
            ModelKind::Nlss => "nlss",
            ModelKind::Gmm => "gmm",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for ModelKind {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bsc" => Ok(ModelKind::Bsc),
            "ss" => Ok(ModelKind::Ss),
            "nlss" => Ok(ModelKind::Nlss),
            "gmm" => Ok(ModelKind::Gmm),
            other => Err(invalid(format!(
                "unknown model kind '{other}' (expected bsc, ss, nlss, or gmm)"
            ))),
        }
    }
}

/// Parameters of one of the four generative models, tagged for the JSON
/// checkpoint schema.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelParams {
    Bsc(BscParams),
    Ss(SsParams),
    Nlss(NlssParams),
    Gmm(GmmParams),
}

impl ModelParams {
    pub fn kind(&self) -> ModelKind {
        match self {
            ModelParams::Bsc(_) => ModelKind::Bsc,
            ModelParams::Ss(_) => ModelKind::Ss,
            ModelParams::Nlss(_) => ModelKind::Nlss,
            ModelParams::Gmm(_) => ModelKind::Gmm,
        }
    }

    /// Latent dimension: H for the sparse models, C for the mixture.
    pub fn latent_dim(&self) -> usize {
        match self {
            ModelParams::Bsc(p) => p.w.ncols(),
            ModelParams::Ss(p) => p.w.ncols(),
            ModelParams::Nlss(p) => p.w.ncols(),
            ModelParams::Gmm(p) => p.means.nrows(),
        }
    }

    /// Dictionary (D x H) for the sparse models, transposed means (D x C)
    /// for the mixture; the weight view used by the cosine affinity.
    pub fn weight_view(&self) -> Mat<f64> {
        match self {
            ModelParams::Bsc(p) => p.w.clone(),
            ModelParams::Ss(p) => p.w.clone(),
            ModelParams::Nlss(p) => p.w.clone(),
            ModelParams::Gmm(p) => p.means.transpose().to_owned(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ModelParams::Bsc(p) => p.validate(),
            ModelParams::Ss(p) => p.validate(),
            ModelParams::Nlss(p) => p.validate(),
            ModelParams::Gmm(p) => p.validate(),
        }
    }
}

/// Truncated posterior over one data point's state set. `states` are
/// H-bit masks, `probs` sum to 1, `log_norm` is the log normalizer
/// (the point's contribution to the truncated free energy).
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorRow {
    pub states: Vec<u64>,
    pub probs: Vec<f64>,
    pub log_norm: f64,
}

/// Truncated responsibilities over one data point's selected clusters.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmPosteriorRow {
    pub clusters: Vec<usize>,
    pub resp: Vec<f64>,
    pub log_norm: f64,
}

/// Truncated posteriors for a whole dataset.
#[derive(Debug, Clone)]
pub enum TruncatedPosterior {
    Binary(Vec<PosteriorRow>),
    Gmm(Vec<GmmPosteriorRow>),
}

pub(crate) fn log_sum_exp(vals: &[f64]) -> f64 {
    let m = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + vals.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub(crate) fn entropy(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .filter(|&&q| q > 0.0)
        .map(|&q| q * q.ln())
        .sum::<f64>()
}

/// Variational free energy `sum_n E_q[log p(y, s | theta)] + H(q_n)` of
/// exact truncated posteriors. Equals the truncated log marginal
/// likelihood when `posteriors` came from an E-step at these parameters.
///
/// The nonlinear spike-and-slab model has no closed-form state marginal;
/// its Monte-Carlo free energy is produced by the Gibbs E-step instead.
pub fn free_energy(
    params: &ModelParams,
    data: &Mat<f64>,
    posteriors: &TruncatedPosterior,
) -> Result<f64> {
    params.validate()?;
    let n = data.nrows();
    match (params, posteriors) {
        (ModelParams::Bsc(p), TruncatedPosterior::Binary(rows)) => {
            check_rows(rows.len(), n)?;
            let mut total = 0.0;
            for (i, row) in rows.iter().enumerate() {
                validate_row(row)?;
                let y: Vec<f64> = (0..data.ncols()).map(|j| data[(i, j)]).collect();
                let mut expected = 0.0;
                for (&state, &q) in row.states.iter().zip(&row.probs) {
                    if q > 0.0 {
                        expected += q * bsc::log_joint(p, &y, state);
                    }
                }
                total += expected + entropy(&row.probs);
            }
            Ok(total)
        }
        (ModelParams::Ss(p), TruncatedPosterior::Binary(rows)) => {
            check_rows(rows.len(), n)?;
            let masks: std::collections::HashSet<u64> = rows
                .iter()
                .flat_map(|r| r.states.iter().copied())
                .collect();
            let cache = ss::SsCache::build(p, &masks)?;
            let mut total = 0.0;
            for (i, row) in rows.iter().enumerate() {
                validate_row(row)?;
                let y: Vec<f64> = (0..data.ncols()).map(|j| data[(i, j)]).collect();
                let point = ss::PointProjection::new(p, &y);
                let mut expected = 0.0;
                for (&state, &q) in row.states.iter().zip(&row.probs) {
                    if q > 0.0 {
                        expected += q * cache.collapsed_log_marginal(&point, state);
                    }
                }
                total += expected + entropy(&row.probs);
            }
            Ok(total)
        }
        (ModelParams::Gmm(p), TruncatedPosterior::Gmm(rows)) => {
            check_rows(rows.len(), n)?;
            let mut total = 0.0;
            for (i, row) in rows.iter().enumerate() {
                let y: Vec<f64> = (0..data.ncols()).map(|j| data[(i, j)]).collect();
                let mut expected = 0.0;
                for (&c, &q) in row.clusters.iter().zip(&row.resp) {
                    if q > 0.0 {
                        expected += q * gmm::log_joint(p, &y, c);
                    }
                }
                total += expected + entropy(&row.resp);
            }
            Ok(total)
        }
        (ModelParams::Nlss(_), _) => Err(invalid(
            "free energy for the nonlinear spike-and-slab model is the \
             Monte-Carlo estimate produced by the Gibbs E-step",
        )),
        _ => Err(invalid("posterior kind does not match model kind")),
    }
}

fn check_rows(rows: usize, n: usize) -> Result<()> {
    if rows != n {
        return Err(invalid(format!("{rows} posterior rows for {n} data points")));
    }
    Ok(())
}

fn validate_row(row: &PosteriorRow) -> Result<()> {
    let sum: f64 = row.probs.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || row.probs.iter().any(|&q| q < 0.0) {
        return Err(invalid(format!(
            "posterior row not normalized (sum {sum})"
        )));
    }
    Ok(())
}
