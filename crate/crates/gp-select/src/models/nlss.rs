//! Nonlinear spike-and-slab sparse coding: the observation mean takes,
//! per observed dimension, the maximum over `s_h z_h W_dh` (zero counts
//! as a candidate whenever some latent is inactive). The max breaks
//! conjugacy, so the truncated E-step draws Gibbs samples: the binary
//! state is resampled by enumerating the state set given the current
//! slab values, and each active slab is resampled with a
//! Metropolis-within-Gibbs random-walk step.

use faer::Mat;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::models::log_sum_exp;
use crate::selection::StateSetRow;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NlssParams {
    /// D x H dictionary.
    #[serde(with = "crate::matio")]
    pub w: Mat<f64>,
    pub sigma2: f64,
    pub pi: f64,
    pub mu: Vec<f64>,
    pub psi: Vec<f64>,
}

impl NlssParams {
    pub fn validate(&self) -> Result<()> {
        let h = self.w.ncols();
        if !(self.sigma2.is_finite() && self.sigma2 > 0.0) {
            return Err(invalid(format!("sigma2 must be > 0, got {}", self.sigma2)));
        }
        if !(self.pi > 0.0 && self.pi < 1.0) {
            return Err(invalid(format!("pi must be in (0, 1), got {}", self.pi)));
        }
        if self.mu.len() != h || self.psi.len() != h {
            return Err(invalid("mu/psi length does not match dictionary columns"));
        }
        if self.psi.iter().any(|&p| !(p.is_finite() && p > 0.0)) {
            return Err(invalid("psi entries must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GibbsConfig {
    pub n_samples: usize,
    pub burn_in: usize,
}

impl Default for GibbsConfig {
    fn default() -> Self {
        Self {
            n_samples: 50,
            burn_in: 20,
        }
    }
}

/// Persistent per-point chain state; EM iterations warm-start from it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChainState {
    pub z: Vec<f64>,
    pub mask: u64,
    pub scales: Vec<f64>,
}

pub fn init_chain(params: &NlssParams, rng: &mut impl Rng) -> ChainState {
    let h = params.w.ncols();
    let z = (0..h)
        .map(|i| {
            params.mu[i] + params.psi[i].sqrt() * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
        })
        .collect();
    let scales = params.psi.iter().map(|p| 0.3 * p.sqrt()).collect();
    ChainState {
        z,
        mask: 0,
        scales,
    }
}

/// Pointwise-max observation mean for `state` given slab values, plus
/// the credited (winning) latent per dimension. The implicit zero from
/// inactive latents wins when every active product is negative.
pub fn max_mean(
    params: &NlssParams,
    z: &[f64],
    state: u64,
    mean: &mut [f64],
    winners: Option<&mut Vec<Option<usize>>>,
) {
    let d = params.w.nrows();
    let h = params.w.ncols();
    let all_active = state.count_ones() as usize == h;
    let mut win_buf = winners;
    for dim in 0..d {
        let mut best = f64::NEG_INFINITY;
        let mut who = None;
        let mut bits = state;
        while bits != 0 {
            let lat = bits.trailing_zeros() as usize;
            bits &= bits - 1;
            let v = z[lat] * params.w[(dim, lat)];
            if v > best {
                best = v;
                who = Some(lat);
            }
        }
        if !all_active && best < 0.0 {
            best = 0.0;
            who = None;
        }
        if state == 0 {
            best = 0.0;
            who = None;
        }
        mean[dim] = best;
        if let Some(w) = win_buf.as_mut() {
            w[dim] = who;
        }
    }
}

fn log_lik(y: &[f64], mean: &[f64], sigma2: f64) -> f64 {
    let d = y.len();
    let resid2: f64 = y.iter().zip(mean).map(|(a, b)| (a - b) * (a - b)).sum();
    -0.5 * d as f64 * (2.0 * std::f64::consts::PI * sigma2).ln() - resid2 / (2.0 * sigma2)
}

/// Monte-Carlo accumulators. Per-point quantities are sample averages,
/// then summed over points, so everything is normalized by N only.
#[derive(Debug, Clone)]
pub struct NlssStats {
    pub sum_s: Vec<f64>,
    pub sum_sz: Vec<f64>,
    pub sum_sz2: Vec<f64>,
    pub wta_yz: Mat<f64>,
    pub wta_zz: Mat<f64>,
    pub resid: f64,
    pub fe_sum: f64,
    /// Sum over points of squared per-point standard errors (batch means).
    pub fe_se2: f64,
    pub accepts: u64,
    pub proposals: u64,
    pub n: usize,
    pub d: usize,
}

impl NlssStats {
    pub fn zeros(d: usize, h: usize) -> Self {
        Self {
            sum_s: vec![0.0; h],
            sum_sz: vec![0.0; h],
            sum_sz2: vec![0.0; h],
            wta_yz: Mat::zeros(d, h),
            wta_zz: Mat::zeros(d, h),
            resid: 0.0,
            fe_sum: 0.0,
            fe_se2: 0.0,
            accepts: 0,
            proposals: 0,
            n: 0,
            d,
        }
    }

    pub fn merge(&mut self, other: &NlssStats) {
        let h = self.sum_s.len();
        for a in 0..h {
            self.sum_s[a] += other.sum_s[a];
            self.sum_sz[a] += other.sum_sz[a];
            self.sum_sz2[a] += other.sum_sz2[a];
        }
        for i in 0..self.d {
            for j in 0..h {
                self.wta_yz[(i, j)] += other.wta_yz[(i, j)];
                self.wta_zz[(i, j)] += other.wta_zz[(i, j)];
            }
        }
        self.resid += other.resid;
        self.fe_sum += other.fe_sum;
        self.fe_se2 += other.fe_se2;
        self.accepts += other.accepts;
        self.proposals += other.proposals;
        self.n += other.n;
    }

    pub fn acceptance_rate(&self) -> f64 {
        if self.proposals == 0 {
            return f64::NAN;
        }
        self.accepts as f64 / self.proposals as f64
    }
}

pub struct NlssPointResult {
    /// Sample frequency of each latent being active.
    pub s_mean: Vec<f64>,
    /// Visit frequency of each state in the row's enumeration order.
    pub state_probs: Vec<f64>,
}

/// Gibbs-sampled truncated E-step for one data point. The chain is
/// projected onto the current state set, burned in, and the retained
/// sweeps contribute Monte-Carlo moments to `stats`.
pub fn gibbs_point(
    params: &NlssParams,
    cfg: &GibbsConfig,
    y: &[f64],
    row: &StateSetRow,
    chain: &mut ChainState,
    rng: &mut impl Rng,
    stats: &mut NlssStats,
) -> Result<NlssPointResult> {
    if row.states.is_empty() {
        return Err(invalid("empty truncated state set"));
    }
    if cfg.n_samples < 1 {
        return Err(invalid("n_samples must be >= 1"));
    }
    let d = params.w.nrows();
    let h = params.w.ncols();
    let ln_pi = params.pi.ln();
    let ln_1mpi = (1.0 - params.pi).ln();
    let prior_s = |state: u64| {
        let k = state.count_ones() as f64;
        k * ln_pi + (h as f64 - k) * ln_1mpi
    };

    let support: u64 = row.states.iter().fold(0, |acc, s| acc | s);
    chain.mask &= support;
    if !row.states.contains(&chain.mask) {
        chain.mask = 0;
    }

    let mut mean = vec![0.0; d];
    let mut mean_trial = vec![0.0; d];
    let mut winners: Vec<Option<usize>> = vec![None; d];
    let mut log_w = vec![0.0; row.states.len()];

    let mut s_count = vec![0.0; h];
    let mut state_count = vec![0.0; row.states.len()];
    let n_batches = 10.min(cfg.n_samples);
    let mut batch_fe = vec![0.0; n_batches];
    let mut batch_len = vec![0usize; n_batches];

    let normal = Normal::new(0.0, 1.0).unwrap();
    let total = cfg.burn_in + cfg.n_samples;
    for sweep in 0..total {
        let burning = sweep < cfg.burn_in;

        // state step: enumerate the truncated set given current z
        for (idx, &state) in row.states.iter().enumerate() {
            max_mean(params, &chain.z, state, &mut mean_trial, None);
            log_w[idx] = prior_s(state) + log_lik(y, &mean_trial, params.sigma2);
        }
        let norm = log_sum_exp(&log_w);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = row.states.len() - 1;
        for (idx, &lw) in log_w.iter().enumerate() {
            acc += (lw - norm).exp();
            if u < acc {
                pick = idx;
                break;
            }
        }
        chain.mask = row.states[pick];

        // slab step over the selected latents, ascending for determinism
        max_mean(params, &chain.z, chain.mask, &mut mean, None);
        let mut cur_lik = log_lik(y, &mean, params.sigma2);
        for &lat in &row.selected {
            if chain.mask >> lat & 1 == 1 {
                let old = chain.z[lat];
                let prop = old + chain.scales[lat] * normal.sample(rng);
                chain.z[lat] = prop;
                max_mean(params, &chain.z, chain.mask, &mut mean_trial, None);
                let trial_lik = log_lik(y, &mean_trial, params.sigma2);
                let dprior = -((prop - params.mu[lat]).powi(2)
                    - (old - params.mu[lat]).powi(2))
                    / (2.0 * params.psi[lat]);
                let accept = (trial_lik - cur_lik + dprior) > rng.random::<f64>().ln();
                if accept {
                    cur_lik = trial_lik;
                    mean.copy_from_slice(&mean_trial);
                } else {
                    chain.z[lat] = old;
                }
                if !burning {
                    stats.proposals += 1;
                    stats.accepts += accept as u64;
                }
                if burning {
                    // steer toward 0.44 acceptance
                    let step: f64 = if accept { 0.1 * 0.56 } else { -0.1 * 0.44 };
                    chain.scales[lat] =
                        (chain.scales[lat] * step.exp()).clamp(1e-6, 1e6);
                }
            } else {
                chain.z[lat] = params.mu[lat]
                    + params.psi[lat].sqrt() * normal.sample(rng);
            }
        }

        if burning {
            continue;
        }
        let sample = sweep - cfg.burn_in;

        // accumulate moments
        state_count[pick] += 1.0;
        max_mean(params, &chain.z, chain.mask, &mut mean, Some(&mut winners));
        let inv_s = 1.0 / cfg.n_samples as f64;
        let mut log_joint = prior_s(chain.mask) + log_lik(y, &mean, params.sigma2);
        let mut bits = chain.mask;
        while bits != 0 {
            let lat = bits.trailing_zeros() as usize;
            bits &= bits - 1;
            let zv = chain.z[lat];
            s_count[lat] += 1.0;
            stats.sum_sz[lat] += zv * inv_s;
            stats.sum_sz2[lat] += zv * zv * inv_s;
            log_joint += -0.5 * (2.0 * std::f64::consts::PI * params.psi[lat]).ln()
                - (zv - params.mu[lat]).powi(2) / (2.0 * params.psi[lat]);
        }
        for dim in 0..d {
            if let Some(lat) = winners[dim] {
                let zv = chain.z[lat];
                stats.wta_yz[(dim, lat)] += y[dim] * zv * inv_s;
                stats.wta_zz[(dim, lat)] += zv * zv * inv_s;
            }
            let r = y[dim] - mean[dim];
            stats.resid += r * r * inv_s;
        }
        let b = sample * n_batches / cfg.n_samples;
        batch_fe[b] += log_joint;
        batch_len[b] += 1;
    }

    let inv_s = 1.0 / cfg.n_samples as f64;
    for lat in 0..h {
        stats.sum_s[lat] += s_count[lat] * inv_s;
    }
    let batch_means: Vec<f64> = batch_fe
        .iter()
        .zip(&batch_len)
        .filter(|(_, &l)| l > 0)
        .map(|(&s, &l)| s / l as f64)
        .collect();
    let fe_point = batch_fe.iter().sum::<f64>() * inv_s;
    stats.fe_sum += fe_point;
    if batch_means.len() > 1 {
        let m = batch_means.iter().sum::<f64>() / batch_means.len() as f64;
        let var = batch_means.iter().map(|b| (b - m) * (b - m)).sum::<f64>()
            / (batch_means.len() - 1) as f64;
        stats.fe_se2 += var / batch_means.len() as f64;
    }
    stats.n += 1;

    Ok(NlssPointResult {
        s_mean: s_count.iter().map(|c| c * inv_s).collect(),
        state_probs: state_count.iter().map(|c| c * inv_s).collect(),
    })
}

/// Winner-take-all M-step: each observed dimension credits only the
/// latent that attained its max. Dictionary entries with no support keep
/// their previous value, as do slab parameters of latents that never
/// activated.
pub fn mstep(stats: &NlssStats, prev: &NlssParams) -> Result<(NlssParams, Vec<String>)> {
    if stats.n == 0 {
        return Err(invalid("M-step needs at least one data point"));
    }
    let h = stats.sum_s.len();
    let d = stats.d;
    let mut warnings = Vec::new();

    let mut w = prev.w.clone();
    for dim in 0..d {
        for lat in 0..h {
            if stats.wta_zz[(dim, lat)] > 1e-12 {
                w[(dim, lat)] = stats.wta_yz[(dim, lat)] / stats.wta_zz[(dim, lat)];
            }
        }
    }

    let mut mu = prev.mu.clone();
    let mut psi = prev.psi.clone();
    for lat in 0..h {
        if stats.sum_s[lat] < 1e-8 {
            warnings.push(format!(
                "nlss m-step: latent {lat} never activated; slab parameters kept"
            ));
            continue;
        }
        mu[lat] = stats.sum_sz[lat] / stats.sum_s[lat];
        psi[lat] = (stats.sum_sz2[lat] / stats.sum_s[lat] - mu[lat] * mu[lat]).max(1e-6);
    }

    let pi = (stats.sum_s.iter().sum::<f64>() / (stats.n as f64 * h as f64))
        .clamp(1e-4, 1.0 - 1e-4);
    let sigma2 = (stats.resid / (stats.n as f64 * d as f64)).max(1e-6);

    Ok((
        NlssParams {
            w,
            sigma2,
            pi,
            mu,
            psi,
        },
        warnings,
    ))
}
