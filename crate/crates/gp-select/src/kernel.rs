//! Composition covariance kernel (RBF + linear + bias, white noise on the
//! Gram diagonal), its log-scale hyperparameter gradients, and a greedy
//! pivoted incomplete Cholesky for low-rank Gram approximation.

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Smallest admissible noise variance. Keeps the noisy Gram strictly
/// positive definite when evidence optimization drives noise toward zero.
pub const NOISE_FLOOR: f64 = 1e-8;

/// Variance at which a kernel component is considered disabled.
///
/// Components pinned here stay negligible under log-scale gradient ascent
/// (the gradient w.r.t. `log v` scales with `v`), which is how pure-linear
/// or pure-RBF kernels are expressed without a separate masking mechanism.
pub const DISABLED_VARIANCE: f64 = 1e-12;

/// Positive hyperparameters of the composition kernel.
///
/// `k(x, x') = rbf_variance * exp(-||x - x'||^2 / (2 * rbf_lengthscale^2))
///           + linear_variance * <x, x'> + bias_variance`,
/// with `noise_variance` added only on the Gram diagonal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelHyperparams {
    pub rbf_variance: f64,
    pub rbf_lengthscale: f64,
    pub linear_variance: f64,
    pub bias_variance: f64,
    pub noise_variance: f64,
}

impl Default for KernelHyperparams {
    fn default() -> Self {
        Self {
            rbf_variance: 1.0,
            rbf_lengthscale: 1.0,
            linear_variance: 1.0,
            bias_variance: 1.0,
            noise_variance: 0.1,
        }
    }
}

impl KernelHyperparams {
    pub fn new(
        rbf_variance: f64,
        rbf_lengthscale: f64,
        linear_variance: f64,
        bias_variance: f64,
        noise_variance: f64,
    ) -> Result<Self> {
        let hp = Self {
            rbf_variance,
            rbf_lengthscale,
            linear_variance,
            bias_variance,
            noise_variance: noise_variance.max(NOISE_FLOOR),
        };
        hp.validate()?;
        Ok(hp)
    }

    /// Composition kernel with all components active.
    pub fn composition() -> Self {
        Self::default()
    }

    /// RBF + noise only; linear and bias pinned at [`DISABLED_VARIANCE`].
    pub fn rbf_only(lengthscale: f64) -> Self {
        Self {
            rbf_variance: 1.0,
            rbf_lengthscale: lengthscale,
            linear_variance: DISABLED_VARIANCE,
            bias_variance: DISABLED_VARIANCE,
            noise_variance: 0.1,
        }
    }

    /// Linear + noise only; RBF and bias pinned at [`DISABLED_VARIANCE`].
    pub fn linear_only() -> Self {
        Self {
            rbf_variance: DISABLED_VARIANCE,
            rbf_lengthscale: 1.0,
            linear_variance: 1.0,
            bias_variance: DISABLED_VARIANCE,
            noise_variance: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("rbf_variance", self.rbf_variance),
            ("rbf_lengthscale", self.rbf_lengthscale),
            ("linear_variance", self.linear_variance),
            ("bias_variance", self.bias_variance),
            ("noise_variance", self.noise_variance),
        ];
        for (name, v) in fields {
            if !v.is_finite() || v <= 0.0 {
                return Err(invalid(format!(
                    "kernel hyperparameter {name} must be finite and > 0, got {v}"
                )));
            }
        }
        if self.noise_variance < NOISE_FLOOR {
            return Err(invalid(format!(
                "noise_variance {} below jitter floor {NOISE_FLOOR}",
                self.noise_variance
            )));
        }
        Ok(())
    }

    /// Log-scale view, the parameterization used for unconstrained
    /// evidence optimization. Order: rbf_variance, rbf_lengthscale,
    /// linear_variance, bias_variance, noise_variance.
    pub fn to_log(&self) -> [f64; 5] {
        [
            self.rbf_variance.ln(),
            self.rbf_lengthscale.ln(),
            self.linear_variance.ln(),
            self.bias_variance.ln(),
            self.noise_variance.ln(),
        ]
    }

    /// Inverse of [`to_log`](Self::to_log); re-applies the noise floor.
    pub fn from_log(log: &[f64; 5]) -> Self {
        Self {
            rbf_variance: log[0].exp(),
            rbf_lengthscale: log[1].exp(),
            linear_variance: log[2].exp(),
            bias_variance: log[3].exp(),
            noise_variance: log[4].exp().max(NOISE_FLOOR),
        }
    }

    /// Fraction of the summed signal variance (rbf + linear + bias)
    /// carried by the dominant component, with its name.
    pub fn dominant_signal_component(&self) -> (&'static str, f64) {
        let total = self.rbf_variance + self.linear_variance + self.bias_variance;
        let parts = [
            ("rbf", self.rbf_variance),
            ("linear", self.linear_variance),
            ("bias", self.bias_variance),
        ];
        let (name, v) = parts
            .into_iter()
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap();
        (name, v / total)
    }

    fn eval_parts(&self, dist2: f64, dot: f64) -> f64 {
        self.rbf_variance * (-dist2 / (2.0 * self.rbf_lengthscale * self.rbf_lengthscale)).exp()
            + self.linear_variance * dot
            + self.bias_variance
    }
}

/// N x N kernel matrix. `includes_noise` tells whether
/// `noise_variance * I` was added on the diagonal.
#[derive(Debug, Clone)]
pub struct GramMatrix {
    pub values: Mat<f64>,
    pub includes_noise: bool,
}

/// Low-rank factor G from incomplete Cholesky of the noiseless kernel,
/// with `G G^T ~= K_noiseless`.
#[derive(Debug, Clone)]
pub struct LowRankFactor {
    /// N x Q factor.
    pub factor: Mat<f64>,
    /// Data indices picked by greedy diagonal pivoting, in pick order.
    pub pivots: Vec<usize>,
    /// trace(K_noiseless - G G^T), non-increasing in Q.
    pub residual_trace: f64,
}

impl LowRankFactor {
    pub fn rank(&self) -> usize {
        self.pivots.len()
    }
}

/// Noiseless kernel value between two points.
pub fn eval_kernel(hp: &KernelHyperparams, x: &[f64], x_other: &[f64]) -> Result<f64> {
    hp.validate()?;
    if x.len() != x_other.len() {
        return Err(invalid(format!(
            "kernel input dimension mismatch: {} vs {}",
            x.len(),
            x_other.len()
        )));
    }
    let mut dist2 = 0.0;
    let mut dot = 0.0;
    for (a, b) in x.iter().zip(x_other) {
        let d = a - b;
        dist2 += d * d;
        dot += a * b;
    }
    Ok(hp.eval_parts(dist2, dot))
}

/// Pairwise squared distances and inner products of the rows of `x`,
/// computed once and reused across Gram builds with varying
/// hyperparameters (the inputs never change within an EM run).
#[derive(Debug, Clone)]
pub struct KernelCache {
    pub dist2: Mat<f64>,
    pub dots: Mat<f64>,
    n: usize,
}

impl KernelCache {
    pub fn new(x: &Mat<f64>) -> Result<Self> {
        let n = x.nrows();
        let d = x.ncols();
        if n == 0 {
            return Err(invalid("kernel cache needs at least one point"));
        }
        for i in 0..n {
            for j in 0..d {
                if !x[(i, j)].is_finite() {
                    return Err(invalid(format!("non-finite input entry at ({i}, {j})")));
                }
            }
        }
        let mut dist2 = Mat::zeros(n, n);
        let mut dots = Mat::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let mut s = 0.0;
                let mut p = 0.0;
                for q in 0..d {
                    let (a, b) = (x[(i, q)], x[(j, q)]);
                    let diff = a - b;
                    s += diff * diff;
                    p += a * b;
                }
                dist2[(i, j)] = s;
                dist2[(j, i)] = s;
                dots[(i, j)] = p;
                dots[(j, i)] = p;
            }
        }
        Ok(Self { dist2, dots, n })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Gram matrix for `hp` from the cached pairwise products.
    pub fn gram(&self, hp: &KernelHyperparams, with_noise: bool) -> Result<GramMatrix> {
        hp.validate()?;
        let n = self.n;
        let mut values = Mat::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let mut v = hp.eval_parts(self.dist2[(i, j)], self.dots[(i, j)]);
                if with_noise && i == j {
                    v += hp.noise_variance;
                }
                values[(i, j)] = v;
                values[(j, i)] = v;
            }
        }
        Ok(GramMatrix {
            values,
            includes_noise: with_noise,
        })
    }

    /// One gradient matrix d K / d log(theta) per hyperparameter, in
    /// [`KernelHyperparams::to_log`] order. The Gram here is the noisy one,
    /// so the noise gradient is `noise_variance * I`.
    pub fn gradients(&self, hp: &KernelHyperparams) -> Result<[Mat<f64>; 5]> {
        hp.validate()?;
        let n = self.n;
        let ell2 = hp.rbf_lengthscale * hp.rbf_lengthscale;
        let mut g_rbf = Mat::zeros(n, n);
        let mut g_ell = Mat::zeros(n, n);
        let mut g_lin = Mat::zeros(n, n);
        let mut g_bias = Mat::zeros(n, n);
        let mut g_noise = Mat::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let d2 = self.dist2[(i, j)];
                let rbf = hp.rbf_variance * (-d2 / (2.0 * ell2)).exp();
                let ell = rbf * d2 / ell2;
                let lin = hp.linear_variance * self.dots[(i, j)];
                g_rbf[(i, j)] = rbf;
                g_rbf[(j, i)] = rbf;
                g_ell[(i, j)] = ell;
                g_ell[(j, i)] = ell;
                g_lin[(i, j)] = lin;
                g_lin[(j, i)] = lin;
                g_bias[(i, j)] = hp.bias_variance;
                g_bias[(j, i)] = hp.bias_variance;
            }
            g_noise[(i, i)] = hp.noise_variance;
        }
        Ok([g_rbf, g_ell, g_lin, g_bias, g_noise])
    }
}

/// Full Gram matrix of the row set of `x`.
pub fn gram_matrix(hp: &KernelHyperparams, x: &Mat<f64>, with_noise: bool) -> Result<GramMatrix> {
    KernelCache::new(x)?.gram(hp, with_noise)
}

/// Gradient matrices of the noisy Gram w.r.t. the log hyperparameters.
pub fn kernel_gradients(hp: &KernelHyperparams, x: &Mat<f64>) -> Result<[Mat<f64>; 5]> {
    KernelCache::new(x)?.gradients(hp)
}

/// Greedy diagonal-pivoting incomplete Cholesky of the noiseless kernel.
///
/// Stops at `max_rank` columns, when the residual trace drops to `tol`,
/// or when the best remaining pivot falls below the numerical floor
/// (1e-12 of the initial trace). Ties on the pivot break to the lowest
/// index. Cost is O(N Q^2 + N Q D); the full Gram is never formed.
pub fn incomplete_cholesky(
    hp: &KernelHyperparams,
    x: &Mat<f64>,
    max_rank: usize,
    tol: f64,
) -> Result<LowRankFactor> {
    hp.validate()?;
    let n = x.nrows();
    let d = x.ncols();
    if n == 0 {
        return Err(invalid("incomplete_cholesky needs at least one point"));
    }
    if max_rank < 1 || max_rank > n {
        return Err(invalid(format!(
            "max_rank must be in [1, {n}], got {max_rank}"
        )));
    }
    if !tol.is_finite() || tol < 0.0 {
        return Err(invalid(format!("tol must be finite and >= 0, got {tol}")));
    }
    for i in 0..n {
        for j in 0..d {
            if !x[(i, j)].is_finite() {
                return Err(invalid(format!("non-finite input entry at ({i}, {j})")));
            }
        }
    }

    let row = |i: usize| (0..d).map(move |q| x[(i, q)]);
    let diag_value = |i: usize| {
        let dot: f64 = row(i).map(|v| v * v).sum();
        hp.eval_parts(0.0, dot)
    };

    let mut diag: Vec<f64> = (0..n).map(diag_value).collect();
    let mut residual_trace: f64 = diag.iter().sum();
    let initial_trace = residual_trace;
    let pivot_floor = 1e-12 * initial_trace.max(f64::MIN_POSITIVE);

    let mut columns: Vec<Vec<f64>> = Vec::new();
    let mut pivots: Vec<usize> = Vec::new();

    while pivots.len() < max_rank && residual_trace > tol {
        let (pivot, best) = diag
            .iter()
            .copied()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
            .unwrap();
        if best <= pivot_floor {
            break;
        }
        let scale = best.sqrt();
        let mut col = vec![0.0; n];
        let xp: Vec<f64> = row(pivot).collect();
        for i in 0..n {
            if i == pivot {
                col[i] = scale;
                continue;
            }
            let mut dist2 = 0.0;
            let mut dot = 0.0;
            for q in 0..d {
                let (a, b) = (x[(i, q)], xp[q]);
                let diff = a - b;
                dist2 += diff * diff;
                dot += a * b;
            }
            let mut v = hp.eval_parts(dist2, dot);
            for prev in &columns {
                v -= prev[i] * prev[pivot];
            }
            col[i] = v / scale;
        }
        for i in 0..n {
            diag[i] = (diag[i] - col[i] * col[i]).max(0.0);
        }
        diag[pivot] = 0.0;
        residual_trace = diag.iter().sum();
        columns.push(col);
        pivots.push(pivot);
    }

    let q = columns.len();
    let factor = Mat::from_fn(n, q, |i, j| columns[j][i]);
    Ok(LowRankFactor {
        factor,
        pivots,
        residual_trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat_from_rows(rows: &[&[f64]]) -> Mat<f64> {
        Mat::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j])
    }

    #[test]
    fn rbf_at_identical_points_is_variance() {
        let hp = KernelHyperparams::new(1.0, 1.0, DISABLED_VARIANCE, DISABLED_VARIANCE, 0.1)
            .unwrap();
        let x = [0.3, -1.2];
        let v = eval_kernel(&hp, &x, &x).unwrap();
        assert!((v - 1.0).abs() < 1e-9);
    }

    #[test]
    fn linear_kernel_is_dot_product() {
        let hp = KernelHyperparams {
            rbf_variance: DISABLED_VARIANCE,
            rbf_lengthscale: 1.0,
            linear_variance: 1.0,
            bias_variance: DISABLED_VARIANCE,
            noise_variance: 0.1,
        };
        let v = eval_kernel(&hp, &[1.0, 2.0], &[3.0, 4.0]).unwrap();
        assert!((v - 11.0).abs() < 1e-9);
    }

    // Formula oracle: direct one-line evaluation of the composition kernel.
    #[test]
    fn composition_matches_direct_formula() {
        let hp = KernelHyperparams::new(2.0, 2.0, 0.5, 0.25, 0.1).unwrap();
        let x = [1.0, 0.0];
        let y = [0.0, 1.0];
        let expected = 2.0 * (-2.0_f64 / 8.0).exp() + 0.5 * 0.0 + 0.25;
        let v = eval_kernel(&hp, &x, &y).unwrap();
        assert!((v - expected).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let hp = KernelHyperparams::default();
        assert!(eval_kernel(&hp, &[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn single_point_gram_with_noise() {
        let hp =
            KernelHyperparams::new(1.0, 1.0, DISABLED_VARIANCE, DISABLED_VARIANCE, 0.1).unwrap();
        let x = mat_from_rows(&[&[0.0]]);
        let g = gram_matrix(&hp, &x, true).unwrap();
        assert!((g.values[(0, 0)] - 1.1).abs() < 1e-9);
    }

    // Loop oracle: Gram entries match per-pair kernel evaluation.
    #[test]
    fn gram_matches_entrywise_loop_and_is_symmetric() {
        let hp = KernelHyperparams::new(1.3, 0.7, 0.4, 0.2, 0.05).unwrap();
        let x = mat_from_rows(&[&[0.1, -0.3], &[1.0, 0.5], &[-0.7, 0.2]]);
        let g = gram_matrix(&hp, &x, true).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let xi: Vec<f64> = (0..2).map(|q| x[(i, q)]).collect();
                let xj: Vec<f64> = (0..2).map(|q| x[(j, q)]).collect();
                let mut want = eval_kernel(&hp, &xi, &xj).unwrap();
                if i == j {
                    want += hp.noise_variance;
                }
                assert!((g.values[(i, j)] - want).abs() < 1e-12);
                assert!((g.values[(i, j)] - g.values[(j, i)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn non_finite_input_rejected() {
        let hp = KernelHyperparams::default();
        let x = mat_from_rows(&[&[f64::NAN]]);
        assert!(gram_matrix(&hp, &x, true).is_err());
    }

    #[test]
    fn noise_gradient_is_scaled_identity() {
        let hp = KernelHyperparams::new(1.0, 1.0, 1.0, 1.0, 0.3).unwrap();
        let x = mat_from_rows(&[&[0.0, 1.0], &[1.0, 0.0]]);
        let grads = kernel_gradients(&hp, &x).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let want = if i == j { 0.3 } else { 0.0 };
                assert!((grads[4][(i, j)] - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn rbf_variance_gradient_equals_rbf_component() {
        let hp = KernelHyperparams::new(1.7, 0.9, 1.0, 1.0, 0.1).unwrap();
        let x = mat_from_rows(&[&[0.0, 1.0], &[1.0, 0.5], &[0.2, -0.4]]);
        let grads = kernel_gradients(&hp, &x).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let d2: f64 = (0..2).map(|q| (x[(i, q)] - x[(j, q)]).powi(2)).sum();
                let rbf = hp.rbf_variance * (-d2 / (2.0 * 0.9 * 0.9)).exp();
                assert!((grads[0][(i, j)] - rbf).abs() < 1e-12);
            }
        }
    }

    // Finite-difference oracle for all five log-scale gradients.
    #[test]
    fn gradients_match_central_finite_differences() {
        let hp = KernelHyperparams::new(1.2, 0.8, 0.6, 0.3, 0.2).unwrap();
        let x = mat_from_rows(&[
            &[0.1, -0.3, 0.9],
            &[1.0, 0.5, -0.2],
            &[-0.7, 0.2, 0.4],
            &[0.3, 0.3, 0.3],
            &[-0.1, 0.8, -0.6],
        ]);
        let grads = kernel_gradients(&hp, &x).unwrap();
        let log0 = hp.to_log();
        let h = 1e-6;
        for p in 0..5 {
            let mut lp = log0;
            lp[p] += h;
            let mut lm = log0;
            lm[p] -= h;
            let gp = gram_matrix(&KernelHyperparams::from_log(&lp), &x, true).unwrap();
            let gm = gram_matrix(&KernelHyperparams::from_log(&lm), &x, true).unwrap();
            let mut max_err: f64 = 0.0;
            for i in 0..5 {
                for j in 0..5 {
                    let fd = (gp.values[(i, j)] - gm.values[(i, j)]) / (2.0 * h);
                    max_err = max_err.max((fd - grads[p][(i, j)]).abs());
                }
            }
            assert!(max_err < 1e-6, "param {p}: max fd error {max_err}");
        }
    }

    #[test]
    fn ichol_full_rank_is_exact() {
        let hp = KernelHyperparams::new(1.0, 1.0, 0.5, 0.2, 0.1).unwrap();
        let x = mat_from_rows(&[
            &[0.1, -0.3],
            &[1.0, 0.5],
            &[-0.7, 0.2],
            &[0.3, 0.9],
            &[0.5, -0.5],
        ]);
        let f = incomplete_cholesky(&hp, &x, 5, 0.0).unwrap();
        let k = gram_matrix(&hp, &x, false).unwrap().values;
        let approx = &f.factor * f.factor.transpose();
        let mut frob = 0.0;
        for i in 0..5 {
            for j in 0..5 {
                frob += (k[(i, j)] - approx[(i, j)]).powi(2);
            }
        }
        assert!(frob.sqrt() < 1e-8, "frobenius residual {}", frob.sqrt());
    }

    #[test]
    fn ichol_rank_one_data_stops_at_one_column() {
        let hp = KernelHyperparams {
            rbf_variance: DISABLED_VARIANCE,
            rbf_lengthscale: 1.0,
            linear_variance: 1.0,
            bias_variance: DISABLED_VARIANCE,
            noise_variance: 0.1,
        };
        // all rows identical -> linear kernel has rank 1
        let x = mat_from_rows(&[&[1.0, 2.0], &[1.0, 2.0], &[1.0, 2.0], &[1.0, 2.0]]);
        let f = incomplete_cholesky(&hp, &x, 4, 0.0).unwrap();
        assert_eq!(f.rank(), 1);
    }

    #[test]
    fn ichol_residual_monotone_and_bounded_by_trailing_eigenvalues() {
        let hp = KernelHyperparams::new(1.0, 0.6, 0.3, 0.1, 0.1).unwrap();
        let n = 50;
        let mut rng = crate::rng::derive_rng(42, crate::rng::stream::DATA_GEN, 0, 0);
        use rand::Rng;
        let x = Mat::from_fn(n, 3, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let mut prev = f64::INFINITY;
        for q in 1..=12 {
            let f = incomplete_cholesky(&hp, &x, q, 0.0).unwrap();
            assert!(f.residual_trace <= prev + 1e-12);
            prev = f.residual_trace;
        }

        // Eigendecomposition oracle: the greedy residual can never beat the
        // optimal rank-Q approximation, whose residual is the trailing
        // eigenvalue sum.
        let q = 10;
        let f = incomplete_cholesky(&hp, &x, q, 0.0).unwrap();
        let k = gram_matrix(&hp, &x, false).unwrap().values;
        let mut eigs = k
            .self_adjoint_eigenvalues(faer::Side::Lower)
            .expect("eigendecomposition");
        eigs.sort_by(|a, b| b.total_cmp(a));
        let trailing: f64 = eigs[q..].iter().sum();
        assert!(
            f.residual_trace >= trailing - 1e-8,
            "residual {} < trailing eigensum {}",
            f.residual_trace,
            trailing
        );
        // and it should still be a sane approximation
        let trace: f64 = (0..n).map(|i| k[(i, i)]).sum();
        assert!(f.residual_trace < trace);
    }

    #[test]
    fn ichol_invalid_rank_rejected() {
        let hp = KernelHyperparams::default();
        let x = mat_from_rows(&[&[0.0], &[1.0]]);
        assert!(incomplete_cholesky(&hp, &x, 0, 0.0).is_err());
        assert!(incomplete_cholesky(&hp, &x, 3, 0.0).is_err());
    }

    #[test]
    fn hyperparams_log_roundtrip_applies_noise_floor() {
        let hp = KernelHyperparams::new(1.0, 2.0, 3.0, 4.0, 0.5).unwrap();
        let back = KernelHyperparams::from_log(&hp.to_log());
        assert!((back.rbf_lengthscale - 2.0).abs() < 1e-12);
        let mut log = hp.to_log();
        log[4] = -100.0;
        let floored = KernelHyperparams::from_log(&log);
        assert_eq!(floored.noise_variance, NOISE_FLOOR);
    }

    #[test]
    fn serde_field_names_are_stable() {
        let hp = KernelHyperparams::default();
        let json = serde_json::to_string(&hp).unwrap();
        for key in [
            "rbf_variance",
            "rbf_lengthscale",
            "linear_variance",
            "bias_variance",
            "noise_variance",
        ] {
            assert!(json.contains(key), "missing {key} in {json}");
        }
    }
}
