//! Spike-and-slab sparse coding: `s = b . z` with `b ~ Bern(pi)`,
//! `z_h ~ N(mu_h, psi_h)`, `y ~ N(W s, sigma^2 I)`. The slab is
//! integrated out analytically, so the truncated E-step works with
//! collapsed state marginals and per-state Gaussian slab moments.

use std::collections::{HashMap, HashSet};

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, numerical, Result};
use crate::models::{log_sum_exp, PosteriorRow};
use crate::selection::StateSetRow;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SsParams {
    /// D x H dictionary.
    #[serde(with = "crate::matio")]
    pub w: Mat<f64>,
    pub sigma2: f64,
    pub pi: f64,
    /// Slab means, one per latent.
    pub mu: Vec<f64>,
    /// Diagonal slab variances, one per latent.
    pub psi: Vec<f64>,
}

impl SsParams {
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

// Row-major lower-triangular Cholesky for the tiny per-state precision
// matrices (k <= H').
fn chol_small(a: &mut [f64], k: usize) -> Result<()> {
    for i in 0..k {
        for j in 0..=i {
            let mut s = a[i * k + j];
            for p in 0..j {
                s -= a[i * k + p] * a[j * k + p];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return Err(numerical(format!("slab precision not PD (pivot {s})")));
                }
                a[i * k + j] = s.sqrt();
            } else {
                a[i * k + j] = s / a[j * k + j];
            }
        }
        for j in (i + 1)..k {
            a[i * k + j] = 0.0;
        }
    }
    Ok(())
}

fn chol_inverse(l: &[f64], k: usize) -> Vec<f64> {
    // A^-1 = L^-T L^-1 column by column
    let mut inv = vec![0.0; k * k];
    for col in 0..k {
        let mut e = vec![0.0; k];
        e[col] = 1.0;
        // forward: L v = e
        for i in 0..k {
            let mut s = e[i];
            for p in 0..i {
                s -= l[i * k + p] * e[p];
            }
            e[i] = s / l[i * k + i];
        }
        // backward: L^T x = v
        for i in (0..k).rev() {
            let mut s = e[i];
            for p in (i + 1)..k {
                s -= l[p * k + i] * e[p];
            }
            e[i] = s / l[i * k + i];
        }
        for row in 0..k {
            inv[row * k + col] = e[row];
        }
    }
    inv
}

fn matvec_small(a: &[f64], v: &[f64], k: usize, out: &mut [f64]) {
    for i in 0..k {
        let mut s = 0.0;
        for j in 0..k {
            s += a[i * k + j] * v[j];
        }
        out[i] = s;
    }
}

/// Per-point projections reused across all states: `||y||^2` and `W^T y`.
pub struct PointProjection {
    pub yy: f64,
    pub wty: Vec<f64>,
}

impl PointProjection {
    pub fn new(params: &SsParams, y: &[f64]) -> Self {
        let d = params.w.nrows();
        let h = params.w.ncols();
        let wty = (0..h)
            .map(|col| (0..d).map(|row| params.w[(row, col)] * y[row]).sum())
            .collect();
        Self {
            yy: y.iter().map(|v| v * v).sum(),
            wty,
        }
    }
}

/// Data-independent per-state quantities: the conditional slab precision
/// factor, collapsed log-determinant, prior weight, and projections of
/// the slab mean through the dictionary Gram.
struct StateCache {
    active: Vec<usize>,
    lambda_inv: Vec<f64>,
    log_det_sy: f64,
    prior: f64,
    w_mu: Vec<f64>,
    mu_w_mu: f64,
    psi_inv_mu: Vec<f64>,
    mu_wty_coeff: Vec<f64>,
}

/// Per-iteration cache over every state mask in use.
pub struct SsCache {
    states: HashMap<u64, StateCache>,
    lik_const: f64,
    sigma2: f64,
    d: usize,
    h: usize,
}

impl SsCache {
    pub fn build(params: &SsParams, masks: &HashSet<u64>) -> Result<Self> {
        params.validate()?;
        let d = params.w.nrows();
        let h = params.w.ncols();
        let wtw = params.w.transpose() * &params.w;
        let s2 = params.sigma2;
        let ln_pi = params.pi.ln();
        let ln_1mpi = (1.0 - params.pi).ln();

        let mut states = HashMap::with_capacity(masks.len());
        for &mask in masks {
            let active: Vec<usize> = (0..h).filter(|&i| mask >> i & 1 == 1).collect();
            let k = active.len();
            let prior = k as f64 * ln_pi + (h - k) as f64 * ln_1mpi;
            if k == 0 {
                states.insert(
                    mask,
                    StateCache {
                        active,
                        lambda_inv: Vec::new(),
                        log_det_sy: d as f64 * s2.ln(),
                        prior,
                        w_mu: Vec::new(),
                        mu_w_mu: 0.0,
                        psi_inv_mu: Vec::new(),
                        mu_wty_coeff: Vec::new(),
                    },
                );
                continue;
            }
            let mut lam = vec![0.0; k * k];
            for (a, &ia) in active.iter().enumerate() {
                for (b, &ib) in active.iter().enumerate() {
                    lam[a * k + b] = wtw[(ia, ib)] / s2;
                }
                lam[a * k + a] += 1.0 / params.psi[ia];
            }
            let mut l = lam;
            chol_small(&mut l, k)?;
            let log_det_lam = 2.0 * (0..k).map(|i| l[i * k + i].ln()).sum::<f64>();
            let lambda_inv = chol_inverse(&l, k);
            let log_det_sy = d as f64 * s2.ln()
                + log_det_lam
                + active.iter().map(|&i| params.psi[i].ln()).sum::<f64>();
            let mut w_mu = vec![0.0; k];
            for (a, &ia) in active.iter().enumerate() {
                w_mu[a] = active
                    .iter()
                    .map(|&ib| wtw[(ia, ib)] * params.mu[ib])
                    .sum();
            }
            let mu_w_mu = active
                .iter()
                .enumerate()
                .map(|(a, &ia)| params.mu[ia] * w_mu[a])
                .sum();
            let psi_inv_mu = active.iter().map(|&i| params.mu[i] / params.psi[i]).collect();
            let mu_wty_coeff = active.iter().map(|&i| params.mu[i]).collect();
            states.insert(
                mask,
                StateCache {
                    active,
                    lambda_inv,
                    log_det_sy,
                    prior,
                    w_mu,
                    mu_w_mu,
                    psi_inv_mu,
                    mu_wty_coeff,
                },
            );
        }
        Ok(Self {
            states,
            lik_const: -0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln(),
            sigma2: s2,
            d,
            h,
        })
    }

    /// Collapsed `log p(y, s)` with the slab integrated out.
    pub fn collapsed_log_marginal(&self, point: &PointProjection, mask: u64) -> f64 {
        let sc = &self.states[&mask];
        let k = sc.active.len();
        if k == 0 {
            return sc.prior + self.lik_const
                - 0.5 * sc.log_det_sy
                - 0.5 * point.yy / self.sigma2;
        }
        let mut wtr = vec![0.0; k];
        let mut mu_wty = 0.0;
        for (a, &ia) in sc.active.iter().enumerate() {
            wtr[a] = point.wty[ia] - sc.w_mu[a];
            mu_wty += sc.mu_wty_coeff[a] * point.wty[ia];
        }
        let r2 = point.yy - 2.0 * mu_wty + sc.mu_w_mu;
        let mut lam_wtr = vec![0.0; k];
        matvec_small(&sc.lambda_inv, &wtr, k, &mut lam_wtr);
        let correction: f64 = wtr.iter().zip(&lam_wtr).map(|(a, b)| a * b).sum();
        let qf = (r2 - correction / self.sigma2) / self.sigma2;
        sc.prior + self.lik_const - 0.5 * sc.log_det_sy - 0.5 * qf
    }

    /// Conditional slab mean `Lambda^-1 (W_A^T y / sigma^2 + mu_A / psi_A)`
    /// for the active entries of `mask`.
    fn slab_mean(&self, point: &PointProjection, mask: u64, out: &mut Vec<f64>) {
        let sc = &self.states[&mask];
        let k = sc.active.len();
        out.clear();
        out.resize(k, 0.0);
        if k == 0 {
            return;
        }
        let rhs: Vec<f64> = sc
            .active
            .iter()
            .enumerate()
            .map(|(a, &ia)| point.wty[ia] / self.sigma2 + sc.psi_inv_mu[a])
            .collect();
        matvec_small(&sc.lambda_inv, &rhs, k, out);
    }
}

/// Gaussian moments of the slab conditioned on `(y, s)`, over the active
/// entries of the state.
#[derive(Debug, Clone)]
pub struct SlabMoments {
    pub active: Vec<usize>,
    /// k x k row-major precision `Lambda = W_A^T W_A / sigma^2 + Psi_A^-1`.
    pub precision: Vec<f64>,
    /// `Lambda^-1 (W_A^T y / sigma^2 + Psi_A^-1 mu_A)`.
    pub mean: Vec<f64>,
}

/// Collapsed log marginal `log p(y, s)` plus the conditional slab
/// moments, for a single state.
pub fn collapsed_log_marginal(
    params: &SsParams,
    y: &[f64],
    mask: u64,
) -> Result<(f64, SlabMoments)> {
    params.validate()?;
    if y.len() != params.w.nrows() {
        return Err(invalid("data dimension does not match dictionary rows"));
    }
    let mut masks = HashSet::new();
    masks.insert(mask);
    let cache = SsCache::build(params, &masks)?;
    let point = PointProjection::new(params, y);
    let value = cache.collapsed_log_marginal(&point, mask);
    let sc = &cache.states[&mask];
    let k = sc.active.len();
    let mut mean = Vec::new();
    cache.slab_mean(&point, mask, &mut mean);
    let mut precision = vec![0.0; k * k];
    let wtw = params.w.transpose() * &params.w;
    for (a, &ia) in sc.active.iter().enumerate() {
        for (b, &ib) in sc.active.iter().enumerate() {
            precision[a * k + b] = wtw[(ia, ib)] / params.sigma2;
        }
        precision[a * k + a] += 1.0 / params.psi[ia];
    }
    Ok((
        value,
        SlabMoments {
            active: sc.active.clone(),
            precision,
            mean,
        },
    ))
}

pub struct SsPointResult {
    pub posterior: PosteriorRow,
    pub s_mean: Vec<f64>,
    pub sz_mean: Vec<f64>,
}

/// Accumulated expectations for the M-step.
#[derive(Debug, Clone)]
pub struct SsStats {
    pub sum_s: Vec<f64>,
    pub sum_ysz: Mat<f64>,
    pub sum_szsz: Mat<f64>,
    pub sum_sz: Vec<f64>,
    pub sum_sz2: Vec<f64>,
    pub sum_yy: f64,
    pub n: usize,
    pub d: usize,
}

impl SsStats {
    pub fn zeros(d: usize, h: usize) -> Self {
        Self {
            sum_s: vec![0.0; h],
            sum_ysz: Mat::zeros(d, h),
            sum_szsz: Mat::zeros(h, h),
            sum_sz: vec![0.0; h],
            sum_sz2: vec![0.0; h],
            sum_yy: 0.0,
            n: 0,
            d,
        }
    }

    pub fn merge(&mut self, other: &SsStats) {
        let h = self.sum_s.len();
        for a in 0..h {
            self.sum_s[a] += other.sum_s[a];
            self.sum_sz[a] += other.sum_sz[a];
            self.sum_sz2[a] += other.sum_sz2[a];
        }
        for i in 0..self.sum_ysz.nrows() {
            for j in 0..h {
                self.sum_ysz[(i, j)] += other.sum_ysz[(i, j)];
            }
        }
        for i in 0..h {
            for j in 0..h {
                self.sum_szsz[(i, j)] += other.sum_szsz[(i, j)];
            }
        }
        self.sum_yy += other.sum_yy;
        self.n += other.n;
    }
}

/// Exact truncated E-step for one data point: state probabilities from
/// the collapsed marginals, slab moments mixed across states by state
/// probability, accumulated straight into `stats`.
pub fn estep_point(
    params: &SsParams,
    cache: &SsCache,
    y: &[f64],
    row: &StateSetRow,
    stats: &mut SsStats,
) -> Result<SsPointResult> {
    if row.states.is_empty() {
        return Err(invalid("empty truncated state set"));
    }
    let h = cache.h;
    let point = PointProjection::new(params, y);

    let log_w: Vec<f64> = row
        .states
        .iter()
        .map(|&mask| cache.collapsed_log_marginal(&point, mask))
        .collect();
    let log_norm = log_sum_exp(&log_w);
    let probs: Vec<f64> = log_w.iter().map(|lw| (lw - log_norm).exp()).collect();

    let mut s_mean = vec![0.0; h];
    let mut sz_mean = vec![0.0; h];
    let mut mean_buf = Vec::new();

    for (&mask, &q) in row.states.iter().zip(&probs) {
        if q == 0.0 {
            continue;
        }
        let sc = &cache.states[&mask];
        let k = sc.active.len();
        if k == 0 {
            continue;
        }
        cache.slab_mean(&point, mask, &mut mean_buf);
        for (a, &ia) in sc.active.iter().enumerate() {
            s_mean[ia] += q;
            let m = mean_buf[a];
            sz_mean[ia] += q * m;
            stats.sum_sz2[ia] += q * (m * m + sc.lambda_inv[a * k + a]);
            for (b, &ib) in sc.active.iter().enumerate() {
                stats.sum_szsz[(ia, ib)] +=
                    q * (m * mean_buf[b] + sc.lambda_inv[a * k + b]);
            }
        }
    }
    for v in &mut s_mean {
        *v = v.clamp(0.0, 1.0);
    }

    for a in 0..h {
        stats.sum_s[a] += s_mean[a];
        stats.sum_sz[a] += sz_mean[a];
        for (r, &yv) in y.iter().enumerate() {
            stats.sum_ysz[(r, a)] += yv * sz_mean[a];
        }
    }
    stats.sum_yy += point.yy;
    stats.n += 1;

    Ok(SsPointResult {
        posterior: PosteriorRow {
            states: row.states.clone(),
            probs,
            log_norm,
        },
        s_mean,
        sz_mean,
    })
}

/// Closed-form M-step; latents with negligible activation mass keep
/// their previous slab parameters.
pub fn mstep(stats: &SsStats, prev: &SsParams) -> Result<(SsParams, Vec<String>)> {
    if stats.n == 0 {
        return Err(invalid("M-step needs at least one data point"));
    }
    let mut warnings = Vec::new();
    let (w, reg) = super::bsc::solve_regularized(&stats.sum_szsz, &stats.sum_ysz)?;
    if reg > 0.0 {
        warnings.push(format!("ss m-step: moment matrix regularized by {reg:.1e}"));
    }

    let h = stats.sum_s.len();
    let mut mu = prev.mu.clone();
    let mut psi = prev.psi.clone();
    for a in 0..h {
        if stats.sum_s[a] < 1e-8 {
            warnings.push(format!(
                "ss m-step: latent {a} has no activation mass; slab parameters kept"
            ));
            continue;
        }
        mu[a] = stats.sum_sz[a] / stats.sum_s[a];
        psi[a] = (stats.sum_sz2[a] / stats.sum_s[a] - mu[a] * mu[a]).max(1e-6);
    }

    let nd = (stats.n * stats.d) as f64;
    let wtw = w.transpose() * &w;
    let mut cross = 0.0;
    let mut quad = 0.0;
    for i in 0..stats.sum_ysz.nrows() {
        for j in 0..h {
            cross += w[(i, j)] * stats.sum_ysz[(i, j)];
        }
    }
    for i in 0..h {
        for j in 0..h {
            quad += wtw[(i, j)] * stats.sum_szsz[(i, j)];
        }
    }
    let sigma2 = ((stats.sum_yy - 2.0 * cross + quad) / nd).max(1e-6);
    let pi = (stats.sum_s.iter().sum::<f64>() / (stats.n as f64 * h as f64))
        .clamp(1e-4, 1.0 - 1e-4);

    Ok((
        SsParams {
            w,
            sigma2,
            pi,
            mu,
            psi,
        },
        warnings,
    ))
}
