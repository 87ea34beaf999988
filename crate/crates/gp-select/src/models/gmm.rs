//! Isotropic Gaussian mixture with per-point cluster preselection:
//! responsibilities are computed over the C' selected clusters only.

use faer::Mat;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::models::{log_sum_exp, GmmPosteriorRow};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GmmParams {
    /// C x D cluster means.
    #[serde(with = "crate::matio")]
    pub means: Mat<f64>,
    /// Isotropic variance per cluster.
    pub variances: Vec<f64>,
    /// Mixing weights on the C-simplex.
    pub weights: Vec<f64>,
}

impl GmmParams {
    pub fn validate(&self) -> Result<()> {
        let c = self.means.nrows();
        if self.variances.len() != c || self.weights.len() != c {
            return Err(invalid("variances/weights length does not match means rows"));
        }
        if self.variances.iter().any(|&v| !(v.is_finite() && v > 0.0)) {
            return Err(invalid("variances must be > 0"));
        }
        if self.weights.iter().any(|&w| !(w.is_finite() && w > 0.0)) {
            return Err(invalid("weights must be > 0"));
        }
        let sum: f64 = self.weights.iter().sum();
        if (sum - 1.0).abs() > 1e-10 {
            return Err(invalid(format!("weights sum to {sum}, expected 1")));
        }
        Ok(())
    }
}

/// `log(pi_c) + log N(y; mu_c, sigma_c^2 I)`.
pub fn log_joint(params: &GmmParams, y: &[f64], c: usize) -> f64 {
    let d = params.means.ncols();
    let var = params.variances[c];
    let mut dist2 = 0.0;
    for j in 0..d {
        let r = y[j] - params.means[(c, j)];
        dist2 += r * r;
    }
    params.weights[c].ln()
        - 0.5 * d as f64 * (2.0 * std::f64::consts::PI * var).ln()
        - dist2 / (2.0 * var)
}

/// Truncated responsibilities of one point over its selected clusters.
/// If every selected density underflows, the row falls back to uniform
/// and the flag is set.
pub fn estep_point(
    params: &GmmParams,
    y: &[f64],
    selected: &[usize],
) -> Result<(GmmPosteriorRow, bool)> {
    let c = params.means.nrows();
    if selected.is_empty() || selected.len() > c {
        return Err(invalid(format!(
            "selected cluster count must be in [1, {c}]"
        )));
    }
    if selected.iter().any(|&s| s >= c) {
        return Err(invalid("selected cluster index out of range"));
    }
    let log_w: Vec<f64> = selected.iter().map(|&s| log_joint(params, y, s)).collect();
    let log_norm = log_sum_exp(&log_w);
    if !log_norm.is_finite() {
        let u = 1.0 / selected.len() as f64;
        return Ok((
            GmmPosteriorRow {
                clusters: selected.to_vec(),
                resp: vec![u; selected.len()],
                log_norm,
            },
            true,
        ));
    }
    let resp = log_w.iter().map(|lw| (lw - log_norm).exp()).collect();
    Ok((
        GmmPosteriorRow {
            clusters: selected.to_vec(),
            resp,
            log_norm,
        },
        false,
    ))
}

#[derive(Debug, Clone)]
pub struct GmmStats {
    pub r_sum: Vec<f64>,
    pub ry_sum: Mat<f64>,
    pub r_yy: Vec<f64>,
    pub n: usize,
}

impl GmmStats {
    pub fn zeros(c: usize, d: usize) -> Self {
        Self {
            r_sum: vec![0.0; c],
            ry_sum: Mat::zeros(c, d),
            r_yy: vec![0.0; c],
            n: 0,
        }
    }

    pub fn accumulate(&mut self, y: &[f64], row: &GmmPosteriorRow) {
        let yy: f64 = y.iter().map(|v| v * v).sum();
        for (&c, &r) in row.clusters.iter().zip(&row.resp) {
            self.r_sum[c] += r;
            self.r_yy[c] += r * yy;
            for (j, &yv) in y.iter().enumerate() {
                self.ry_sum[(c, j)] += r * yv;
            }
        }
        self.n += 1;
    }

    pub fn merge(&mut self, other: &GmmStats) {
        for c in 0..self.r_sum.len() {
            self.r_sum[c] += other.r_sum[c];
            self.r_yy[c] += other.r_yy[c];
            for j in 0..self.ry_sum.ncols() {
                self.ry_sum[(c, j)] += other.ry_sum[(c, j)];
            }
        }
        self.n += other.n;
    }
}

/// Weighted-mean / variance / mixing updates. Clusters whose total
/// responsibility collapsed are re-seeded at a random data point.
pub fn mstep(
    stats: &GmmStats,
    data: &Mat<f64>,
    rng: &mut impl Rng,
) -> Result<(GmmParams, Vec<String>)> {
    if stats.n == 0 {
        return Err(invalid("M-step needs at least one data point"));
    }
    let c = stats.r_sum.len();
    let d = stats.ry_sum.ncols();
    let n = data.nrows();
    let mut warnings = Vec::new();

    let pooled_var = {
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for j in 0..d {
                mean[j] += data[(i, j)];
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut var = 0.0;
        for i in 0..n {
            for j in 0..d {
                var += (data[(i, j)] - mean[j]).powi(2);
            }
        }
        (var / (n * d) as f64).max(1e-6)
    };

    let mut means = Mat::zeros(c, d);
    let mut variances = vec![0.0; c];
    let mut weights = vec![0.0; c];
    for k in 0..c {
        let mass = stats.r_sum[k];
        if mass < 1e-8 {
            let pick = rng.random_range(0..n);
            for j in 0..d {
                means[(k, j)] = data[(pick, j)];
            }
            variances[k] = pooled_var;
            warnings.push(format!(
                "gmm m-step: cluster {k} lost all responsibility; re-seeded at data point {pick}"
            ));
        } else {
            let mut mu_norm2 = 0.0;
            let mut cross = 0.0;
            for j in 0..d {
                let m = stats.ry_sum[(k, j)] / mass;
                means[(k, j)] = m;
                mu_norm2 += m * m;
                cross += m * stats.ry_sum[(k, j)];
            }
            variances[k] =
                ((stats.r_yy[k] - 2.0 * cross + mu_norm2 * mass) / (d as f64 * mass)).max(1e-6);
        }
        weights[k] = stats.r_sum[k].max(1e-8);
    }
    let wsum: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= wsum;
    }

    Ok((
        GmmParams {
            means,
            variances,
            weights,
        },
        warnings,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{derive_rng, stream};

    fn params_3() -> GmmParams {
        GmmParams {
            means: Mat::from_fn(3, 2, |i, j| [[0.0, 0.0], [4.0, 0.0], [0.0, 4.0]][i][j]),
            variances: vec![1.0, 1.0, 1.0],
            weights: vec![0.5, 0.25, 0.25],
        }
    }

    #[test]
    fn single_cluster_gets_full_responsibility() {
        let params = GmmParams {
            means: Mat::from_fn(1, 2, |_, j| [1.0, 2.0][j]),
            variances: vec![0.5],
            weights: vec![1.0],
        };
        let (row, warn) = estep_point(&params, &[0.3, 0.3], &[0]).unwrap();
        assert_eq!(row.resp, vec![1.0]);
        assert!(!warn);
    }

    #[test]
    fn equidistant_clusters_split_evenly() {
        let params = GmmParams {
            means: Mat::from_fn(2, 2, |i, j| [[1.0, 0.0], [-1.0, 0.0]][i][j]),
            variances: vec![1.0, 1.0],
            weights: vec![0.5, 0.5],
        };
        let (row, _) = estep_point(&params, &[0.0, 0.7], &[0, 1]).unwrap();
        assert!((row.resp[0] - 0.5).abs() < 1e-12);
        assert!((row.resp[1] - 0.5).abs() < 1e-12);
    }

    // Direct-formula oracle: full selection matches the mixture
    // normalization computed naively.
    #[test]
    fn full_selection_matches_direct_normalization() {
        let params = params_3();
        let y = [1.2, 0.7];
        let (row, _) = estep_point(&params, &y, &[0, 1, 2]).unwrap();
        let dens: Vec<f64> = (0..3)
            .map(|c| {
                let var = params.variances[c];
                let dist2: f64 = (0..2)
                    .map(|j| (y[j] - params.means[(c, j)]).powi(2))
                    .sum();
                params.weights[c] * (-dist2 / (2.0 * var)).exp()
                    / (2.0 * std::f64::consts::PI * var)
            })
            .collect();
        let total: f64 = dens.iter().sum();
        for c in 0..3 {
            assert!((row.resp[c] - dens[c] / total).abs() < 1e-12);
        }
    }

    #[test]
    fn weight_rescaling_does_not_change_responsibilities() {
        let params = params_3();
        let y = [0.4, 2.5];
        let (row_a, _) = estep_point(&params, &y, &[0, 2]).unwrap();
        // scaling all weights by a positive constant leaves the selected-set
        // normalization unchanged (weights only enter as ratios)
        let scaled = GmmParams {
            means: params.means.clone(),
            variances: params.variances.clone(),
            weights: vec![1.5, 0.75, 0.75],
        };
        let (row_b, _) = estep_point(&scaled, &y, &[0, 2]).unwrap();
        for i in 0..2 {
            assert!((row_a.resp[i] - row_b.resp[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn one_hot_responsibilities_recover_class_means() {
        let data = Mat::from_fn(4, 2, |i, j| {
            [[0.0, 0.0], [2.0, 2.0], [10.0, 0.0], [12.0, 2.0]][i][j]
        });
        let mut stats = GmmStats::zeros(2, 2);
        for i in 0..4 {
            let y: Vec<f64> = (0..2).map(|j| data[(i, j)]).collect();
            let row = GmmPosteriorRow {
                clusters: vec![i / 2],
                resp: vec![1.0],
                log_norm: 0.0,
            };
            stats.accumulate(&y, &row);
        }
        let mut rng = derive_rng(0, stream::MSTEP_REINIT, 0, 0);
        let (params, warnings) = mstep(&stats, &data, &mut rng).unwrap();
        assert!(warnings.is_empty());
        assert!((params.means[(0, 0)] - 1.0).abs() < 1e-12);
        assert!((params.means[(1, 0)] - 11.0).abs() < 1e-12);
        assert!((params.weights[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn uniform_responsibilities_collapse_to_global_mean() {
        let data = Mat::from_fn(4, 2, |i, j| (i * 2 + j) as f64);
        let mut stats = GmmStats::zeros(2, 2);
        for i in 0..4 {
            let y: Vec<f64> = (0..2).map(|j| data[(i, j)]).collect();
            let row = GmmPosteriorRow {
                clusters: vec![0, 1],
                resp: vec![0.5, 0.5],
                log_norm: 0.0,
            };
            stats.accumulate(&y, &row);
        }
        let mut rng = derive_rng(0, stream::MSTEP_REINIT, 0, 1);
        let (params, _) = mstep(&stats, &data, &mut rng).unwrap();
        let gmean = [3.0, 4.0];
        for c in 0..2 {
            for j in 0..2 {
                assert!((params.means[(c, j)] - gmean[j]).abs() < 1e-12);
            }
        }
    }

    // Weighted-average oracle with random soft responsibilities.
    #[test]
    fn soft_responsibilities_match_weighted_average() {
        use rand::Rng as _;
        let mut r = derive_rng(5, stream::DATA_GEN, 0, 2);
        let n = 20;
        let data = Mat::from_fn(n, 2, |_, _| r.random::<f64>() * 4.0 - 2.0);
        let mut stats = GmmStats::zeros(2, 2);
        let mut resp_all = Vec::new();
        for i in 0..n {
            let a: f64 = r.random();
            let y: Vec<f64> = (0..2).map(|j| data[(i, j)]).collect();
            let row = GmmPosteriorRow {
                clusters: vec![0, 1],
                resp: vec![a, 1.0 - a],
                log_norm: 0.0,
            };
            stats.accumulate(&y, &row);
            resp_all.push(a);
        }
        let mut rng = derive_rng(0, stream::MSTEP_REINIT, 0, 3);
        let (params, _) = mstep(&stats, &data, &mut rng).unwrap();
        for j in 0..2 {
            let num: f64 = (0..n).map(|i| resp_all[i] * data[(i, j)]).sum();
            let den: f64 = resp_all.iter().sum();
            assert!((params.means[(0, j)] - num / den).abs() < 1e-10);
        }
    }

    #[test]
    fn dead_cluster_is_reseeded() {
        let data = Mat::from_fn(5, 2, |i, j| (i + j) as f64);
        let mut stats = GmmStats::zeros(2, 2);
        for i in 0..5 {
            let y: Vec<f64> = (0..2).map(|j| data[(i, j)]).collect();
            let row = GmmPosteriorRow {
                clusters: vec![0],
                resp: vec![1.0],
                log_norm: 0.0,
            };
            stats.accumulate(&y, &row);
        }
        let mut rng = derive_rng(0, stream::MSTEP_REINIT, 0, 4);
        let (params, warnings) = mstep(&stats, &data, &mut rng).unwrap();
        assert_eq!(warnings.len(), 1);
        assert!(warnings[0].contains("cluster 1"));
        params.validate().unwrap();
    }
}
