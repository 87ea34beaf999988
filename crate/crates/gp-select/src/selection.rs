//! Turn per-variable affinities into per-data-point truncated state sets:
//! rank the affinities, keep the top H' (with a random exploration quota),
//! and enumerate all binary configurations over the selected indices.

use faer::Mat;
use rand::Rng;

use crate::error::{invalid, Result};
use crate::gp::{loo_means, GpFit};
use crate::models::ss::SsParams;

/// Per-data-point truncated state set: the selected variable indices and
/// every binary configuration over them, embedded in H dimensions as
/// bitmasks (bit h set means latent h active). The all-zero state is
/// always present and enumeration follows binary counting over the
/// selected indices sorted ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSetRow {
    pub selected: Vec<usize>,
    pub states: Vec<u64>,
}

/// Keep the top `h_prime - r` indices by affinity (descending, ties to
/// the lower index) and fill the remaining `r = ceil(random_fraction *
/// h_prime)` slots uniformly without replacement from the rest.
pub fn rank_and_truncate(
    affinity_row: &[f64],
    h_prime: usize,
    random_fraction: f64,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    let h = affinity_row.len();
    if h_prime < 1 || h_prime > h {
        return Err(invalid(format!(
            "h_prime must be in [1, {h}], got {h_prime}"
        )));
    }
    if !(0.0..1.0).contains(&random_fraction) {
        return Err(invalid(format!(
            "random_fraction must be in [0, 1), got {random_fraction}"
        )));
    }
    if affinity_row.iter().any(|v| v.is_nan()) {
        return Err(invalid("affinity row contains NaN"));
    }

    let r = (random_fraction * h_prime as f64).ceil() as usize;
    let top = h_prime - r;

    let mut order: Vec<usize> = (0..h).collect();
    order.sort_by(|&a, &b| affinity_row[b].total_cmp(&affinity_row[a]).then(a.cmp(&b)));

    let mut picked: Vec<usize> = order[..top].to_vec();
    if r > 0 {
        // uniform draws without replacement from the non-top remainder,
        // iterated in ascending index order for reproducibility
        let mut pool: Vec<usize> = order[top..].to_vec();
        pool.sort_unstable();
        for _ in 0..r {
            let k = rng.random_range(0..pool.len());
            picked.push(pool.swap_remove(k));
        }
    }
    Ok(picked)
}

/// All `2^|selected|` binary configurations over the selected indices.
pub fn build_state_set(selected: &[usize], h: usize) -> Result<StateSetRow> {
    if h == 0 || h > 64 {
        return Err(invalid(format!("latent dimension must be in [1, 64], got {h}")));
    }
    if selected.is_empty() || selected.len() > 63 {
        return Err(invalid(format!(
            "selected index count must be in [1, 63], got {}",
            selected.len()
        )));
    }
    let mut sorted = selected.to_vec();
    sorted.sort_unstable();
    for w in sorted.windows(2) {
        if w[0] == w[1] {
            return Err(invalid(format!("duplicate selected index {}", w[0])));
        }
    }
    if *sorted.last().unwrap() >= h {
        return Err(invalid(format!(
            "selected index {} out of range for H = {h}",
            sorted.last().unwrap()
        )));
    }
    let k = sorted.len();
    let mut states = Vec::with_capacity(1usize << k);
    for code in 0..(1u64 << k) {
        let mut mask = 0u64;
        for (j, &idx) in sorted.iter().enumerate() {
            if code >> j & 1 == 1 {
                mask |= 1u64 << idx;
            }
        }
        states.push(mask);
    }
    Ok(StateSetRow {
        selected: selected.to_vec(),
        states,
    })
}

/// Append the H one-hot singleton states to a state set (the original
/// expectation-truncation construction). States already present are not
/// duplicated. Off by default in the engine.
pub fn append_singleton_states(row: &mut StateSetRow, h: usize) {
    for idx in 0..h {
        let mask = 1u64 << idx;
        if !row.states.contains(&mask) {
            row.states.push(mask);
        }
    }
}

/// GP affinity: the leave-one-out means of a fit trained on the previous
/// iteration's latent expectations.
pub fn gp_affinity(fit: &GpFit) -> Result<Mat<f64>> {
    loo_means(fit)
}

/// Cosine affinity between dictionary columns and data points:
/// `a[n][h] = <w_h, y_n> / ||w_h||`. Zero-norm columns rank last.
pub fn cosine_affinity(w: &Mat<f64>, y: &Mat<f64>) -> Result<Mat<f64>> {
    let d = w.nrows();
    let h = w.ncols();
    if y.ncols() != d {
        return Err(invalid(format!(
            "data dimension {} does not match dictionary rows {d}",
            y.ncols()
        )));
    }
    let norms: Vec<f64> = (0..h)
        .map(|j| (0..d).map(|i| w[(i, j)] * w[(i, j)]).sum::<f64>().sqrt())
        .collect();
    let n = y.nrows();
    Ok(Mat::from_fn(n, h, |row, col| {
        if norms[col] == 0.0 {
            return f64::NEG_INFINITY;
        }
        let mut dot = 0.0;
        for i in 0..d {
            dot += w[(i, col)] * y[(row, i)];
        }
        dot / norms[col]
    }))
}

/// Singleton-likelihood affinity for the spike-and-slab model: the log
/// marginal likelihood of each data point under the state with only
/// latent h active, slab integrated out analytically.
pub fn singleton_affinity(params: &SsParams, y: &Mat<f64>) -> Result<Mat<f64>> {
    params.validate()?;
    let d = params.w.nrows();
    let h = params.w.ncols();
    if y.ncols() != d {
        return Err(invalid(format!(
            "data dimension {} does not match dictionary rows {d}",
            y.ncols()
        )));
    }
    let n = y.nrows();
    let s2 = params.sigma2;
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();

    // N(y; mu_h w_h, s2 I + psi_h w_h w_h^T) via the rank-1 Woodbury and
    // determinant-lemma identities.
    let mut out = Mat::zeros(n, h);
    for col in 0..h {
        let psi = params.psi[col];
        let mu = params.mu[col];
        let wnorm2: f64 = (0..d).map(|i| params.w[(i, col)] * params.w[(i, col)]).sum();
        let denom = s2 + psi * wnorm2;
        let log_det = d as f64 * s2.ln() + (denom / s2).ln();
        for row in 0..n {
            let mut r2 = 0.0;
            let mut wr = 0.0;
            for i in 0..d {
                let r = y[(row, i)] - mu * params.w[(i, col)];
                r2 += r * r;
                wr += params.w[(i, col)] * r;
            }
            let quad = (r2 - psi * wr * wr / denom) / s2;
            out[(row, col)] = -0.5 * (d as f64 * ln_2pi + log_det + quad);
        }
    }
    Ok(out)
}
