//! Ground-truth generators: overlapping-bars image data for the sparse
//! coding models and planted Gaussian mixtures, with the generating
//! parameters kept for recovery scoring.

use faer::Mat;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::models::{GmmParams, ModelKind};

/// Generating parameters and per-point truth for a bars dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BarsGroundTruth {
    /// D x H dictionary: one column per horizontal and vertical bar.
    #[serde(with = "crate::matio")]
    pub w_true: Mat<f64>,
    pub pi_true: f64,
    pub sigma2_true: f64,
    /// Slab mean/variance used for the spike-and-slab variants.
    pub slab_mu: f64,
    pub slab_psi: f64,
    pub model_kind: ModelKind,
    /// True binary latent state per data point, as H-bit masks.
    pub states: Vec<u64>,
}

/// Ground truth for a planted mixture.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GmmGroundTruth {
    pub params: GmmParams,
    pub labels: Vec<usize>,
    pub layout: GmmLayout,
    pub separation: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GmmLayout {
    Random,
    Collinear,
}

impl std::str::FromStr for GmmLayout {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(GmmLayout::Random),
            "collinear" => Ok(GmmLayout::Collinear),
            other => Err(invalid(format!(
                "unknown gmm layout '{other}' (expected random or collinear)"
            ))),
        }
    }
}

/// The unit-amplitude bars dictionary on a `grid_side x grid_side` pixel
/// grid: `grid_side` horizontal bars followed by `grid_side` vertical
/// ones, D = grid_side^2 pixels, H = 2 grid_side.
pub fn bars_dictionary(grid_side: usize) -> Mat<f64> {
    let d = grid_side * grid_side;
    let h = 2 * grid_side;
    Mat::from_fn(d, h, |pix, bar| {
        let (row, col) = (pix / grid_side, pix % grid_side);
        let hit = if bar < grid_side {
            row == bar
        } else {
            col == bar - grid_side
        };
        if hit {
            1.0
        } else {
            0.0
        }
    })
}

/// Generate an overlapping-bars dataset under one of the three sparse
/// models. Latents are Bernoulli(pi); intensities come from the slab for
/// the spike-and-slab variants; observation noise is N(0, sigma2 I).
#[allow(clippy::too_many_arguments)]
pub fn gen_bars(
    model_kind: ModelKind,
    n: usize,
    grid_side: usize,
    pi: f64,
    sigma2: f64,
    slab_mu: f64,
    slab_psi: f64,
    rng: &mut impl Rng,
) -> Result<(Mat<f64>, BarsGroundTruth)> {
    if model_kind == ModelKind::Gmm {
        return Err(invalid("bars data is generated for the sparse models"));
    }
    let h = 2 * grid_side;
    let d = grid_side * grid_side;
    if grid_side == 0 || h > n {
        return Err(invalid(format!(
            "need H = 2 * grid_side <= N, got grid_side {grid_side}, N {n}"
        )));
    }
    if !(pi > 0.0 && pi < 1.0) {
        return Err(invalid(format!("pi must be in (0, 1), got {pi}")));
    }
    if sigma2 < 0.0 || slab_psi <= 0.0 {
        return Err(invalid("sigma2 must be >= 0 and slab_psi > 0"));
    }

    let w = bars_dictionary(grid_side);
    let noise_std = sigma2.sqrt();
    let mut states = Vec::with_capacity(n);
    let mut data = Mat::zeros(n, d);

    for i in 0..n {
        let mut mask = 0u64;
        for bar in 0..h {
            if rng.random::<f64>() < pi {
                mask |= 1 << bar;
            }
        }
        states.push(mask);
        let z: Vec<f64> = (0..h)
            .map(|_| {
                slab_mu
                    + slab_psi.sqrt()
                        * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
            })
            .collect();
        for pix in 0..d {
            let mean = match model_kind {
                ModelKind::Bsc => {
                    let mut s = 0.0;
                    for bar in 0..h {
                        if mask >> bar & 1 == 1 {
                            s += w[(pix, bar)];
                        }
                    }
                    s
                }
                ModelKind::Ss => {
                    let mut s = 0.0;
                    for bar in 0..h {
                        if mask >> bar & 1 == 1 {
                            s += z[bar] * w[(pix, bar)];
                        }
                    }
                    s
                }
                ModelKind::Nlss => {
                    let mut best = f64::NEG_INFINITY;
                    for bar in 0..h {
                        if mask >> bar & 1 == 1 {
                            best = best.max(z[bar] * w[(pix, bar)]);
                        }
                    }
                    // inactive latents contribute zero candidates
                    if mask.count_ones() as usize == h {
                        best
                    } else {
                        best.max(0.0)
                    }
                }
                ModelKind::Gmm => unreachable!(),
            };
            let mean = if mean.is_finite() { mean } else { 0.0 };
            data[(i, pix)] = mean
                + noise_std
                    * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng);
        }
    }

    Ok((
        data,
        BarsGroundTruth {
            w_true: w,
            pi_true: pi,
            sigma2_true: sigma2,
            slab_mu,
            slab_psi,
            model_kind,
            states,
        },
    ))
}

/// Generate 2-D mixture data from C planted clusters with unit-variance
/// components. `separation` is the guaranteed minimum distance between
/// cluster means in the random layout and the spacing along the line in
/// the collinear one.
pub fn gen_gmm(
    n: usize,
    c: usize,
    layout: GmmLayout,
    separation: f64,
    rng: &mut impl Rng,
) -> Result<(Mat<f64>, GmmGroundTruth)> {
    if c < 1 || n < c {
        return Err(invalid(format!("need 1 <= C <= N, got C {c}, N {n}")));
    }
    if !(separation.is_finite() && separation > 0.0) {
        return Err(invalid(format!("separation must be > 0, got {separation}")));
    }
    let d = 2;

    let means: Vec<[f64; 2]> = match layout {
        GmmLayout::Random => {
            // rejection-sample means in a box until pairwise distances
            // reach the requested separation; keep the best attempt
            let side = separation * (c as f64).sqrt().max(2.0) * 1.5;
            let mut best: (f64, Vec<[f64; 2]>) = (f64::NEG_INFINITY, Vec::new());
            for _ in 0..1000 {
                let cand: Vec<[f64; 2]> = (0..c)
                    .map(|_| [rng.random::<f64>() * side, rng.random::<f64>() * side])
                    .collect();
                let mut min_dist = f64::INFINITY;
                for i in 0..c {
                    for j in (i + 1)..c {
                        let dx = cand[i][0] - cand[j][0];
                        let dy = cand[i][1] - cand[j][1];
                        min_dist = min_dist.min((dx * dx + dy * dy).sqrt());
                    }
                }
                if c == 1 {
                    min_dist = f64::INFINITY;
                }
                if min_dist > best.0 {
                    best = (min_dist, cand);
                }
                if best.0 >= separation {
                    break;
                }
            }
            best.1
        }
        GmmLayout::Collinear => {
            let theta = rng.random::<f64>() * std::f64::consts::PI;
            let dir = [theta.cos(), theta.sin()];
            let perp = [-dir[1], dir[0]];
            let jitter_std = 0.02 * separation;
            (0..c)
                .map(|i| {
                    let along = (i as f64 - (c as f64 - 1.0) / 2.0) * separation;
                    let off = jitter_std
                        * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng);
                    [
                        along * dir[0] + off * perp[0],
                        along * dir[1] + off * perp[1],
                    ]
                })
                .collect()
        }
    };

    let params = GmmParams {
        means: Mat::from_fn(c, d, |i, j| means[i][j]),
        variances: vec![1.0; c],
        weights: vec![1.0 / c as f64; c],
    };

    let mut labels = Vec::with_capacity(n);
    let mut data = Mat::zeros(n, d);
    for i in 0..n {
        let label = rng.random_range(0..c);
        labels.push(label);
        for j in 0..d {
            data[(i, j)] = means[label][j]
                + <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng);
        }
    }

    Ok((
        data,
        GmmGroundTruth {
            params,
            labels,
            layout,
            separation,
        },
    ))
}
