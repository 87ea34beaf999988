//! Binary sparse coding: `s ~ Bern(pi)` per latent,
//! `y ~ N(W s, sigma^2 I)`. Exact truncated E-step, closed-form M-step.

use faer::{Mat, Side};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::models::{log_sum_exp, PosteriorRow};
use crate::selection::StateSetRow;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BscParams {
    /// D x H dictionary.
    #[serde(with = "crate::matio")]
    pub w: Mat<f64>,
    pub sigma2: f64,
    pub pi: f64,
}

impl BscParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma2.is_finite() && self.sigma2 > 0.0) {
            return Err(invalid(format!("sigma2 must be > 0, got {}", self.sigma2)));
        }
        if !(self.pi > 0.0 && self.pi < 1.0) {
            return Err(invalid(format!("pi must be in (0, 1), got {}", self.pi)));
        }
        Ok(())
    }
}

/// Log joint `log p(y, s | theta)` for a single binary state (bitmask).
pub fn log_joint(params: &BscParams, y: &[f64], state: u64) -> f64 {
    let d = params.w.nrows();
    let h = params.w.ncols();
    let k = state.count_ones() as f64;
    let prior = k * params.pi.ln() + (h as f64 - k) * (1.0 - params.pi).ln();
    let mut resid2 = 0.0;
    for row in 0..d {
        let mut mean = 0.0;
        for col in 0..h {
            if state >> col & 1 == 1 {
                mean += params.w[(row, col)];
            }
        }
        let r = y[row] - mean;
        resid2 += r * r;
    }
    let lik = -0.5 * d as f64 * (2.0 * std::f64::consts::PI * params.sigma2).ln()
        - resid2 / (2.0 * params.sigma2);
    prior + lik
}

/// Per-iteration quantities that do not depend on the data point.
pub struct BscCache {
    wtw: Mat<f64>,
    ln_lik_const: f64,
}

impl BscCache {
    pub fn new(params: &BscParams) -> Self {
        let d = params.w.nrows();
        Self {
            wtw: params.w.transpose() * &params.w,
            ln_lik_const: -0.5 * d as f64 * (2.0 * std::f64::consts::PI * params.sigma2).ln(),
        }
    }
}

pub struct BscPointResult {
    pub posterior: PosteriorRow,
    /// Dense H-vector of marginal activation probabilities.
    pub s_mean: Vec<f64>,
}

/// Exact truncated posterior of one data point over its state set, with
/// the expectations the M-step and the next GP fit need.
pub fn estep_point(
    params: &BscParams,
    cache: &BscCache,
    y: &[f64],
    row: &StateSetRow,
) -> Result<BscPointResult> {
    if row.states.is_empty() {
        return Err(invalid("empty truncated state set"));
    }
    let d = params.w.nrows();
    let h = params.w.ncols();
    let yy: f64 = y.iter().map(|v| v * v).sum();
    let wty: Vec<f64> = (0..h)
        .map(|col| (0..d).map(|row_| params.w[(row_, col)] * y[row_]).sum())
        .collect();
    let ln_pi = params.pi.ln();
    let ln_1mpi = (1.0 - params.pi).ln();

    let mut log_w = Vec::with_capacity(row.states.len());
    for &state in &row.states {
        let mut swty = 0.0;
        let mut swws = 0.0;
        let mut k = 0.0;
        let mut bits = state;
        while bits != 0 {
            let a = bits.trailing_zeros() as usize;
            bits &= bits - 1;
            k += 1.0;
            swty += wty[a];
            let mut inner = state;
            while inner != 0 {
                let b = inner.trailing_zeros() as usize;
                inner &= inner - 1;
                swws += cache.wtw[(a, b)];
            }
        }
        let resid2 = yy - 2.0 * swty + swws;
        let prior = k * ln_pi + (h as f64 - k) * ln_1mpi;
        log_w.push(prior + cache.ln_lik_const - resid2 / (2.0 * params.sigma2));
    }

    let log_norm = log_sum_exp(&log_w);
    let probs: Vec<f64> = log_w.iter().map(|lw| (lw - log_norm).exp()).collect();

    let mut s_mean = vec![0.0; h];
    for (&state, &q) in row.states.iter().zip(&probs) {
        let mut bits = state;
        while bits != 0 {
            let a = bits.trailing_zeros() as usize;
            bits &= bits - 1;
            s_mean[a] += q;
        }
    }
    for v in &mut s_mean {
        *v = v.clamp(0.0, 1.0);
    }

    Ok(BscPointResult {
        posterior: PosteriorRow {
            states: row.states.clone(),
            probs,
            log_norm,
        },
        s_mean,
    })
}

/// Accumulated expectations for the M-step.
#[derive(Debug, Clone)]
pub struct BscStats {
    pub sum_s: Vec<f64>,
    pub sum_ys: Mat<f64>,
    pub sum_ss: Mat<f64>,
    pub sum_yy: f64,
    pub n: usize,
    pub d: usize,
}

impl BscStats {
    pub fn zeros(d: usize, h: usize) -> Self {
        Self {
            sum_s: vec![0.0; h],
            sum_ys: Mat::zeros(d, h),
            sum_ss: Mat::zeros(h, h),
            sum_yy: 0.0,
            n: 0,
            d,
        }
    }

    pub fn accumulate(&mut self, y: &[f64], point: &BscPointResult) {
        let h = self.sum_s.len();
        for a in 0..h {
            self.sum_s[a] += point.s_mean[a];
            for (row, &yv) in y.iter().enumerate() {
                self.sum_ys[(row, a)] += yv * point.s_mean[a];
            }
        }
        for (&state, &q) in point.posterior.states.iter().zip(&point.posterior.probs) {
            let mut bits = state;
            while bits != 0 {
                let a = bits.trailing_zeros() as usize;
                bits &= bits - 1;
                let mut inner = state;
                while inner != 0 {
                    let b = inner.trailing_zeros() as usize;
                    inner &= inner - 1;
                    self.sum_ss[(a, b)] += q;
                }
            }
        }
        self.sum_yy += y.iter().map(|v| v * v).sum::<f64>();
        self.n += 1;
    }

    pub fn merge(&mut self, other: &BscStats) {
        for (a, v) in other.sum_s.iter().enumerate() {
            self.sum_s[a] += v;
        }
        for i in 0..self.sum_ys.nrows() {
            for j in 0..self.sum_ys.ncols() {
                self.sum_ys[(i, j)] += other.sum_ys[(i, j)];
            }
        }
        for i in 0..self.sum_ss.nrows() {
            for j in 0..self.sum_ss.ncols() {
                self.sum_ss[(i, j)] += other.sum_ss[(i, j)];
            }
        }
        self.sum_yy += other.sum_yy;
        self.n += other.n;
    }
}

/// Solve `A X^T = B^T` for X (= B A^-1) with escalating ridge
/// regularization on Cholesky failure. Returns the solution and the
/// ridge that was needed (0 in the healthy case).
pub(crate) fn solve_regularized(a: &Mat<f64>, b: &Mat<f64>) -> Result<(Mat<f64>, f64)> {
    use faer::linalg::solvers::Solve;
    let h = a.nrows();
    let mut reg = 0.0;
    loop {
        let mut m = a.clone();
        for i in 0..h {
            m[(i, i)] += reg;
        }
        if let Ok(llt) = m.llt(Side::Lower) {
            let xt = llt.solve(b.transpose());
            return Ok((xt.transpose().to_owned(), reg));
        }
        reg = if reg == 0.0 { 1e-8 } else { reg * 10.0 };
        if reg > 1e-2 {
            return Err(crate::error::numerical(
                "moment matrix not invertible even after ridge escalation",
            ));
        }
    }
}

/// Closed-form M-step. Returns updated parameters plus any degeneracy
/// warnings for the trace.
pub fn mstep(stats: &BscStats) -> Result<(BscParams, Vec<String>)> {
    if stats.n == 0 {
        return Err(invalid("M-step needs at least one data point"));
    }
    let mut warnings = Vec::new();
    let (w, reg) = solve_regularized(&stats.sum_ss, &stats.sum_ys)?;
    if reg > 0.0 {
        warnings.push(format!("bsc m-step: moment matrix regularized by {reg:.1e}"));
    }

    let h = stats.sum_s.len();
    let nd = (stats.n * stats.d) as f64;
    let wtw = w.transpose() * &w;
    let mut cross = 0.0;
    let mut quad = 0.0;
    for i in 0..stats.sum_ys.nrows() {
        for j in 0..h {
            cross += w[(i, j)] * stats.sum_ys[(i, j)];
        }
    }
    for i in 0..h {
        for j in 0..h {
            quad += wtw[(i, j)] * stats.sum_ss[(i, j)];
        }
    }
    let sigma2 = ((stats.sum_yy - 2.0 * cross + quad) / nd).max(1e-6);
    let pi = (stats.sum_s.iter().sum::<f64>() / (stats.n as f64 * h as f64))
        .clamp(1e-4, 1.0 - 1e-4);

    Ok((BscParams { w, sigma2, pi }, warnings))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::selection::build_state_set;

    fn simple_params() -> BscParams {
        BscParams {
            w: Mat::from_fn(2, 2, |i, j| [[1.0, 0.5], [0.0, 1.0]][i][j]),
            sigma2: 0.5,
            pi: 0.3,
        }
    }

    #[test]
    fn log_joint_zero_state_plugin() {
        // s = 0, y = 0, sigma2 = 1, D = 1, H = 1, pi = 0.5
        let params = BscParams {
            w: Mat::from_fn(1, 1, |_, _| 3.0),
            sigma2: 1.0,
            pi: 0.5,
        };
        let v = log_joint(&params, &[0.0], 0);
        let want = 0.5_f64.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((v - want).abs() < 1e-12);
    }

    #[test]
    fn log_joint_decreases_with_residual() {
        let params = simple_params();
        let a = log_joint(&params, &[1.0, 0.0], 0b01);
        let b = log_joint(&params, &[2.0, 0.0], 0b01);
        let c = log_joint(&params, &[3.0, 0.0], 0b01);
        assert!(a > b && b > c);
    }

    // Density oracle: independent direct evaluation of the Gaussian
    // density plus Bernoulli prior.
    #[test]
    fn log_joint_matches_direct_density() {
        let params = simple_params();
        let y = [0.7, -0.2];
        let state = 0b11u64;
        let mean = [1.5_f64, 1.0]; // w col0 + col1
        let resid2: f64 = (y[0] - mean[0]).powi(2) + (y[1] - mean[1]).powi(2);
        let want = 2.0 * 0.3_f64.ln()
            - (2.0 * std::f64::consts::PI * 0.5).ln()
            - resid2 / 1.0;
        assert!((log_joint(&params, &y, state) - want).abs() < 1e-12);
    }

    #[test]
    fn single_state_posterior_is_deterministic() {
        let params = simple_params();
        let cache = BscCache::new(&params);
        let row = StateSetRow {
            selected: vec![1],
            states: vec![0b10],
        };
        let res = estep_point(&params, &cache, &[0.5, 1.0], &row).unwrap();
        assert_eq!(res.posterior.probs, vec![1.0]);
        assert_eq!(res.s_mean, vec![0.0, 1.0]);
    }

    #[test]
    fn empty_state_set_rejected() {
        let params = simple_params();
        let cache = BscCache::new(&params);
        let row = StateSetRow {
            selected: vec![],
            states: vec![],
        };
        assert!(estep_point(&params, &cache, &[0.0, 0.0], &row).is_err());
    }

    // Brute-force oracle: over the full state set the truncated posterior
    // equals the exact posterior.
    #[test]
    fn full_state_set_matches_brute_force() {
        let params = simple_params();
        let cache = BscCache::new(&params);
        let row = build_state_set(&[0, 1], 2).unwrap();
        let y = [0.9, 0.4];
        let res = estep_point(&params, &cache, &y, &row).unwrap();
        let joints: Vec<f64> = row.states.iter().map(|&s| log_joint(&params, &y, s)).collect();
        let norm = log_sum_exp(&joints);
        for (i, &lw) in joints.iter().enumerate() {
            assert!((res.posterior.probs[i] - (lw - norm).exp()).abs() < 1e-12);
        }
        assert!((res.posterior.log_norm - norm).abs() < 1e-10);
    }

    #[test]
    fn zero_dictionary_posterior_reduces_to_prior() {
        let params = BscParams {
            w: Mat::zeros(2, 2),
            sigma2: 1.0,
            pi: 0.2,
        };
        let cache = BscCache::new(&params);
        let row = build_state_set(&[0, 1], 2).unwrap();
        let res = estep_point(&params, &cache, &[0.3, -0.8], &row).unwrap();
        for (&state, &q) in res.posterior.states.iter().zip(&res.posterior.probs) {
            let k = state.count_ones() as f64;
            let prior = 0.2_f64.powf(k) * 0.8_f64.powf(2.0 - k);
            assert!((q - prior).abs() < 1e-12, "state {state:b}: {q} vs {prior}");
        }
    }

    #[test]
    fn mstep_recovers_interpolating_dictionary() {
        // one-hot posteriors at the true states, noiseless data
        let w_true = Mat::from_fn(3, 2, |i, j| [[1.0, 0.0], [0.0, 2.0], [1.0, 1.0]][i][j]);
        let states = [0b01u64, 0b10, 0b11, 0b01, 0b10, 0b11];
        let mut stats = BscStats::zeros(3, 2);
        for &state in &states {
            let y: Vec<f64> = (0..3)
                .map(|r| {
                    (0..2)
                        .filter(|c| state >> c & 1 == 1)
                        .map(|c| w_true[(r, c)])
                        .sum()
                })
                .collect();
            let point = BscPointResult {
                posterior: PosteriorRow {
                    states: vec![state],
                    probs: vec![1.0],
                    log_norm: 0.0,
                },
                s_mean: (0..2).map(|c| (state >> c & 1) as f64).collect(),
            };
            stats.accumulate(&y, &point);
        }
        let (params, warnings) = mstep(&stats).unwrap();
        assert!(warnings.is_empty());
        for i in 0..3 {
            for j in 0..2 {
                assert!((params.w[(i, j)] - w_true[(i, j)]).abs() < 1e-9);
            }
        }
        // exact interpolation: residual variance at the floor
        assert!(params.sigma2 <= 1e-6 + 1e-12);
        // pi equals the mean activation
        let want_pi = states.iter().map(|s| s.count_ones() as f64).sum::<f64>() / 12.0;
        assert!((params.pi - want_pi).abs() < 1e-12);
    }

    // Least-squares oracle on hand-sized stats.
    #[test]
    fn mstep_matches_independent_least_squares() {
        let mut stats = BscStats::zeros(2, 2);
        stats.n = 3;
        stats.sum_s = vec![1.5, 1.2];
        stats.sum_yy = 7.0;
        stats.sum_ys = Mat::from_fn(2, 2, |i, j| [[2.0, 1.0], [0.5, 1.5]][i][j]);
        stats.sum_ss = Mat::from_fn(2, 2, |i, j| [[1.5, 0.4], [0.4, 1.2]][i][j]);
        let (params, _) = mstep(&stats).unwrap();
        // explicit 2x2 inverse
        let det = 1.5 * 1.2 - 0.4 * 0.4;
        let inv = [[1.2 / det, -0.4 / det], [-0.4 / det, 1.5 / det]];
        for i in 0..2 {
            for j in 0..2 {
                let want: f64 = (0..2).map(|k| stats.sum_ys[(i, k)] * inv[k][j]).sum();
                assert!((params.w[(i, j)] - want).abs() < 1e-10);
            }
        }
    }
}
