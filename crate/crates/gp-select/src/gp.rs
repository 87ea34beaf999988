//! Shared-kernel multi-output GP regression on latent-expectation targets:
//! one Gram factorization serves all H outputs, leave-one-out means come
//! from the closed form, and kernel hyperparameters are fit by gradient
//! ascent on the summed log marginal likelihood.

use std::sync::atomic::{AtomicU64, Ordering};

use faer::linalg::solvers::{DenseSolveCore, Llt, Solve};
use faer::{Mat, Side};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, numerical, Result};
use crate::kernel::{KernelCache, KernelHyperparams, LowRankFactor, NOISE_FLOOR};

static FACTORIZATIONS: AtomicU64 = AtomicU64::new(0);

/// Number of successful Gram factorizations performed so far in this
/// process. Lets tests assert the one-factorization-per-fit economy.
pub fn factorization_count() -> u64 {
    FACTORIZATIONS.load(Ordering::Relaxed)
}

#[derive(Debug, Clone)]
enum FitSolver {
    /// Exact dense inverse of the noisy Gram.
    Dense { inverse: Mat<f64> },
    /// Woodbury form for (G G^T + noise I)^-1 with Y = L_M^-1 G^T,
    /// where M = noise I + G^T G = L_M L_M^T. The inverse is
    /// (I - Y^T Y) / noise.
    LowRank { y: Mat<f64>, noise: f64 },
}

/// Fitted GP state shared across all H latent targets.
#[derive(Debug, Clone)]
pub struct GpFit {
    targets: Mat<f64>,
    alpha: Mat<f64>,
    inv_diag: Vec<f64>,
    log_det: f64,
    hp: KernelHyperparams,
    solver: FitSolver,
    lowrank_residual: Option<f64>,
    jitter_added: f64,
    target_checksum: u64,
}

/// Flat diagnostics record for the EM trace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GpDiagnostics {
    pub evidence: f64,
    pub hp: KernelHyperparams,
    pub loo_mean_abs_error: f64,
}

/// Outcome of an evidence-ascent run.
#[derive(Debug, Clone)]
pub struct HyperoptReport {
    pub hp: KernelHyperparams,
    pub initial_evidence: f64,
    pub final_evidence: f64,
    /// Evidence after each accepted step, non-decreasing.
    pub accepted_evidence: Vec<f64>,
    /// Initial evidence was non-finite and hp0 was replaced by defaults.
    pub reset_to_default: bool,
}

/// Whether fits run against the exact Gram or its incomplete-Cholesky
/// approximation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum FitMode {
    Full,
    LowRank { max_rank: usize, tol: f64 },
}

impl GpFit {
    pub fn targets(&self) -> &Mat<f64> {
        &self.targets
    }

    pub fn hyperparams(&self) -> &KernelHyperparams {
        &self.hp
    }

    pub fn len(&self) -> usize {
        self.targets.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.nrows() == 0
    }

    pub fn output_dim(&self) -> usize {
        self.targets.ncols()
    }

    /// Jitter added to the diagonal beyond `noise_variance` to make the
    /// factorization succeed; 0 in the usual case.
    pub fn jitter_added(&self) -> f64 {
        self.jitter_added
    }

    /// Checksum of the exact target matrix this fit was trained on.
    pub fn target_checksum(&self) -> u64 {
        self.target_checksum
    }

    /// residual trace of the low-rank factor, if one was used.
    pub fn lowrank_residual(&self) -> Option<f64> {
        self.lowrank_residual
    }

    pub fn diagnostics(&self) -> Result<GpDiagnostics> {
        let loo = loo_means(self)?;
        let (n, h) = (self.targets.nrows(), self.targets.ncols());
        let mut mae = 0.0;
        for j in 0..h {
            for i in 0..n {
                mae += (loo[(i, j)] - self.targets[(i, j)]).abs();
            }
        }
        Ok(GpDiagnostics {
            evidence: log_marginal_likelihood(self),
            hp: self.hp,
            loo_mean_abs_error: mae / (n as f64 * h as f64),
        })
    }

    /// Dense N x N inverse of the (possibly approximated) noisy Gram.
    fn inverse_matrix(&self) -> Mat<f64> {
        match &self.solver {
            FitSolver::Dense { inverse } => inverse.clone(),
            FitSolver::LowRank { y, noise } => {
                let n = self.targets.nrows();
                let yty = y.transpose() * y;
                Mat::from_fn(n, n, |i, j| {
                    let id = if i == j { 1.0 } else { 0.0 };
                    (id - yty[(i, j)]) / noise
                })
            }
        }
    }
}

fn checksum_mat(m: &Mat<f64>) -> u64 {
    crate::rng::checksum_f64s((0..m.nrows()).flat_map(|i| (0..m.ncols()).map(move |j| m[(i, j)])))
}

fn validate_targets(t: &Mat<f64>, n: usize) -> Result<()> {
    if t.nrows() != n {
        return Err(invalid(format!(
            "targets have {} rows but inputs have {n}",
            t.nrows()
        )));
    }
    if t.ncols() == 0 {
        return Err(invalid("targets need at least one column"));
    }
    for i in 0..t.nrows() {
        for j in 0..t.ncols() {
            let v = t[(i, j)];
            if !(0.0..=1.0).contains(&v) {
                return Err(invalid(format!(
                    "target ({i}, {j}) = {v} outside [0, 1]"
                )));
            }
        }
    }
    Ok(())
}

/// Cholesky of the noisy Gram with jitter escalation up to 1e-4.
fn factorize_noisy(
    cache: &KernelCache,
    hp: &KernelHyperparams,
) -> Result<(Llt<f64>, Mat<f64>, f64)> {
    let gram = cache.gram(hp, true)?;
    let n = cache.len();
    let mut jitter = 0.0;
    loop {
        let mut k = gram.values.clone();
        if jitter > 0.0 {
            for i in 0..n {
                k[(i, i)] += jitter;
            }
        }
        match k.llt(Side::Lower) {
            Ok(llt) => {
                FACTORIZATIONS.fetch_add(1, Ordering::Relaxed);
                return Ok((llt, k, jitter));
            }
            Err(_) => {
                jitter = if jitter == 0.0 { NOISE_FLOOR } else { jitter * 10.0 };
                if jitter > 1e-4 {
                    return Err(numerical(format!(
                        "Cholesky failed after jitter escalation to 1e-4; hp = {hp:?}"
                    )));
                }
            }
        }
    }
}

fn log_det_from_llt(llt: &Llt<f64>) -> f64 {
    let l = llt.L();
    (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>() * 2.0
}

/// Fit the shared-kernel GP exactly. One factorization serves all H
/// target columns.
pub fn fit(hp: &KernelHyperparams, x: &Mat<f64>, t: &Mat<f64>) -> Result<GpFit> {
    fit_prepared(hp, &KernelCache::new(x)?, t)
}

/// [`fit`] against a prebuilt [`KernelCache`] (inputs are fixed across an
/// EM run, so pairwise products are computed once).
pub fn fit_prepared(hp: &KernelHyperparams, cache: &KernelCache, t: &Mat<f64>) -> Result<GpFit> {
    hp.validate()?;
    validate_targets(t, cache.len())?;
    let (llt, _k, jitter) = factorize_noisy(cache, hp)?;
    let alpha = llt.solve(t.as_ref());
    let inverse = llt.inverse();
    let n = cache.len();
    let mut inv_diag = Vec::with_capacity(n);
    for i in 0..n {
        let v = inverse[(i, i)];
        if v <= 0.0 || !v.is_finite() {
            return Err(numerical(format!(
                "non-positive inverse Gram diagonal {v} at index {i}; hp = {hp:?}"
            )));
        }
        inv_diag.push(v);
    }
    Ok(GpFit {
        target_checksum: checksum_mat(t),
        targets: t.clone(),
        alpha,
        inv_diag,
        log_det: log_det_from_llt(&llt),
        hp: *hp,
        solver: FitSolver::Dense { inverse },
        lowrank_residual: None,
        jitter_added: jitter,
    })
}

/// Fit with the inverse applied through the Woodbury identity on an
/// incomplete-Cholesky factor of the noiseless kernel. Cost O(N Q^2).
pub fn fit_lowrank(
    hp: &KernelHyperparams,
    x: &Mat<f64>,
    t: &Mat<f64>,
    factor: &LowRankFactor,
) -> Result<GpFit> {
    hp.validate()?;
    let n = x.nrows();
    validate_targets(t, n)?;
    if factor.factor.nrows() != n {
        return Err(invalid(format!(
            "low-rank factor has {} rows but inputs have {n}",
            factor.factor.nrows()
        )));
    }
    let q = factor.rank();
    let noise = hp.noise_variance;

    if q == 0 {
        // zero-trace kernel: the noisy Gram is noise * I
        let alpha = Mat::from_fn(t.nrows(), t.ncols(), |i, j| t[(i, j)] / noise);
        return Ok(GpFit {
            target_checksum: checksum_mat(t),
            targets: t.clone(),
            alpha,
            inv_diag: vec![1.0 / noise; n],
            log_det: n as f64 * noise.ln(),
            hp: *hp,
            solver: FitSolver::LowRank {
                y: Mat::zeros(0, n),
                noise,
            },
            lowrank_residual: Some(factor.residual_trace),
            jitter_added: 0.0,
        });
    }

    let g = &factor.factor;
    // M = noise I_Q + G^T G
    let mut m = g.transpose() * g;
    for i in 0..q {
        m[(i, i)] += noise;
    }
    let llt = m
        .llt(Side::Lower)
        .map_err(|_| numerical(format!("low-rank core factorization failed; hp = {hp:?}")))?;
    FACTORIZATIONS.fetch_add(1, Ordering::Relaxed);
    let l = llt.L();

    // Y = L^-1 G^T by forward substitution, so G M^-1 G^T = Y^T Y.
    let mut y = Mat::zeros(q, n);
    for col in 0..n {
        for i in 0..q {
            let mut v = g[(col, i)];
            for k in 0..i {
                v -= l[(i, k)] * y[(k, col)];
            }
            y[(i, col)] = v / l[(i, i)];
        }
    }

    // alpha = (T - Y^T (Y T)) / noise
    let yt = &y * t;
    let ytyt = y.transpose() * &yt;
    let alpha = Mat::from_fn(n, t.ncols(), |i, j| (t[(i, j)] - ytyt[(i, j)]) / noise);

    let mut inv_diag = Vec::with_capacity(n);
    for i in 0..n {
        let mut s = 0.0;
        for k in 0..q {
            s += y[(k, i)] * y[(k, i)];
        }
        let v = ((1.0 - s) / noise).max(f64::MIN_POSITIVE);
        inv_diag.push(v);
    }

    let log_det =
        (n - q) as f64 * noise.ln() + 2.0 * (0..q).map(|i| l[(i, i)].ln()).sum::<f64>();

    Ok(GpFit {
        target_checksum: checksum_mat(t),
        targets: t.clone(),
        alpha,
        inv_diag,
        log_det,
        hp: *hp,
        solver: FitSolver::LowRank { y, noise },
        lowrank_residual: Some(factor.residual_trace),
        jitter_added: 0.0,
    })
}

/// Closed-form leave-one-out posterior means for every point and output:
/// `loo[n][h] = t[n][h] - alpha[n][h] / inv_diag[n]`, no refits.
pub fn loo_means(fit: &GpFit) -> Result<Mat<f64>> {
    let n = fit.targets.nrows();
    if n < 2 {
        return Err(invalid(
            "leave-one-out prediction needs at least 2 points",
        ));
    }
    let h = fit.targets.ncols();
    Ok(Mat::from_fn(n, h, |i, j| {
        fit.targets[(i, j)] - fit.alpha[(i, j)] / fit.inv_diag[i]
    }))
}

/// Summed GP evidence over the H output columns sharing one Gram:
/// `sum_h [ -T_h' alpha_h / 2 ] - H [ log det K / 2 + N ln(2 pi) / 2 ]`.
pub fn log_marginal_likelihood(fit: &GpFit) -> f64 {
    let (n, h) = (fit.targets.nrows(), fit.targets.ncols());
    let mut data_fit = 0.0;
    for j in 0..h {
        for i in 0..n {
            data_fit += fit.targets[(i, j)] * fit.alpha[(i, j)];
        }
    }
    -0.5 * data_fit
        - h as f64 * (0.5 * fit.log_det + 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln())
}

/// Evidence gradient w.r.t. the log hyperparameters:
/// `g_p = tr((sum_h alpha_h alpha_h' - H K^-1) dK/dlog theta_p) / 2`,
/// evaluated in a single pass over the cached pairwise products.
fn evidence_gradient(fit: &GpFit, cache: &KernelCache) -> [f64; 5] {
    let n = fit.targets.nrows();
    let h = fit.targets.ncols() as f64;
    let inv = fit.inverse_matrix();
    let aat = &fit.alpha * fit.alpha.transpose();
    let hp = &fit.hp;
    let ell2 = hp.rbf_lengthscale * hp.rbf_lengthscale;
    let mut grad = [0.0; 5];
    for i in 0..n {
        for j in 0..n {
            let w = aat[(i, j)] - h * inv[(i, j)];
            let d2 = cache.dist2[(i, j)];
            let rbf = hp.rbf_variance * (-d2 / (2.0 * ell2)).exp();
            grad[0] += w * rbf;
            grad[1] += w * rbf * d2 / ell2;
            grad[2] += w * hp.linear_variance * cache.dots[(i, j)];
            grad[3] += w * hp.bias_variance;
            if i == j {
                grad[4] += w * hp.noise_variance;
            }
        }
    }
    for g in &mut grad {
        *g *= 0.5;
    }
    grad
}

fn fit_in_mode(
    hp: &KernelHyperparams,
    x: &Mat<f64>,
    cache: &KernelCache,
    t: &Mat<f64>,
    mode: FitMode,
) -> Result<GpFit> {
    match mode {
        FitMode::Full => fit_prepared(hp, cache, t),
        FitMode::LowRank { max_rank, tol } => {
            let factor = crate::kernel::incomplete_cholesky(hp, x, max_rank, tol)?;
            fit_lowrank(hp, x, t, &factor)
        }
    }
}

/// Gradient ascent on the log hyperparameters maximizing the evidence,
/// with per-step backtracking halving (up to 10) on evidence decrease.
/// Returns the best iterate seen, so the result is never worse than hp0.
pub fn optimize_hyperparams(
    hp0: &KernelHyperparams,
    x: &Mat<f64>,
    t: &Mat<f64>,
    max_steps: usize,
    mode: FitMode,
) -> Result<HyperoptReport> {
    if max_steps < 1 {
        return Err(invalid("max_steps must be >= 1"));
    }
    let cache = KernelCache::new(x)?;
    let mut reset = false;
    let mut hp = *hp0;
    let mut current = fit_in_mode(&hp, x, &cache, t, mode)?;
    let mut evidence = log_marginal_likelihood(&current);
    if !evidence.is_finite() {
        hp = KernelHyperparams::default();
        reset = true;
        current = fit_in_mode(&hp, x, &cache, t, mode)?;
        evidence = log_marginal_likelihood(&current);
        if !evidence.is_finite() {
            return Err(numerical(
                "evidence non-finite even at default hyperparameters",
            ));
        }
    }
    let initial_evidence = evidence;
    let mut best = (hp, evidence);
    let mut accepted_evidence = Vec::new();

    for _ in 0..max_steps {
        let grad = evidence_gradient(&current, &cache);
        let gmax = grad.iter().fold(0.0_f64, |m, g| m.max(g.abs()));
        if gmax == 0.0 || !gmax.is_finite() {
            break;
        }
        // first trial moves at most 0.1 in log space
        let base = 0.1 / gmax.max(1.0);
        let log_cur = hp.to_log();
        let mut accepted = false;
        for halving in 0..=10 {
            let scale = base / f64::powi(2.0, halving);
            let mut log_trial = log_cur;
            for (lt, g) in log_trial.iter_mut().zip(&grad) {
                *lt += scale * g;
            }
            let hp_trial = KernelHyperparams::from_log(&log_trial);
            let Ok(fit_trial) = fit_in_mode(&hp_trial, x, &cache, t, mode) else {
                continue;
            };
            let ev_trial = log_marginal_likelihood(&fit_trial);
            if ev_trial.is_finite() && ev_trial > evidence {
                hp = hp_trial;
                current = fit_trial;
                evidence = ev_trial;
                accepted = true;
                break;
            }
        }
        if !accepted {
            break;
        }
        accepted_evidence.push(evidence);
        if evidence > best.1 {
            best = (hp, evidence);
        }
    }

    Ok(HyperoptReport {
        hp: best.0,
        initial_evidence,
        final_evidence: best.1,
        accepted_evidence,
        reset_to_default: reset,
    })
}
