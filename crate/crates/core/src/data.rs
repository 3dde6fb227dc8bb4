//! Gene-panel selection, count normalization and synthetic slides drawn
//! from a known spot covariance.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use nalgebra::{Cholesky, DMatrix};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FlagError, Result};
use crate::sde::standard_normal;
use crate::spatial::SlideSample;
use crate::tensor::Tensor;

/// Genes kept for modelling together with the statistics that chose them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenePanel {
    pub names: Vec<String>,
    /// Column indices into the source matrix, ascending.
    pub indices: Vec<usize>,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    pub k_search: usize,
    /// Set when the mean/std intersection never reached the target and the
    /// panel was completed from the mean ranking.
    pub fallback: bool,
}

/// Descending by value, ties by name.
fn ranking(values: &[f64], names: &[String], keep: impl Fn(usize) -> bool) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).filter(|&i| keep(i)).collect();
    idx.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap_or(Ordering::Equal).then_with(|| names[a].cmp(&names[b])));
    idx
}

/// Highly-expressed, highly-variable genes: the smallest `K` such that the
/// top-`K` genes by mean and the top-`K` by standard deviation share at
/// least `target` genes. An overshooting intersection keeps the genes with
/// the highest means. Genes with zero variance never enter the std list.
pub fn hmhvg_select(train_expr: &Tensor, names: &[String], target: usize) -> Result<GenePanel> {
    if train_expr.ndim() != 2 {
        return Err(FlagError::Contract(format!("expression must be [S, G], got {:?}", train_expr.shape())));
    }
    let (s, g) = (train_expr.shape()[0], train_expr.shape()[1]);
    if names.len() != g {
        return Err(FlagError::Contract(format!("{} names for {g} genes", names.len())));
    }
    if s == 0 {
        return Err(FlagError::Contract("no training spots".into()));
    }
    if target == 0 || target > g {
        return Err(FlagError::Contract(format!("target panel size {target} outside 1..={g}")));
    }
    let d = train_expr.data();
    let mut means = vec![0.0; g];
    for row in d.chunks(g) {
        for (m, v) in means.iter_mut().zip(row) {
            *m += v;
        }
    }
    means.iter_mut().for_each(|m| *m /= s as f64);
    let mut stds = vec![0.0; g];
    for row in d.chunks(g) {
        for ((sd, v), m) in stds.iter_mut().zip(row).zip(&means) {
            *sd += (v - m) * (v - m);
        }
    }
    let denom = (s.max(2) - 1) as f64;
    stds.iter_mut().for_each(|v| *v = (*v / denom).sqrt());

    let by_mean = ranking(&means, names, |_| true);
    let by_std = ranking(&stds, names, |i| stds[i] > 0.0);
    let pick = |k: usize| -> Vec<usize> {
        let top_std: BTreeSet<usize> = by_std.iter().take(k).copied().collect();
        by_mean.iter().take(k).copied().filter(|i| top_std.contains(i)).collect()
    };
    let mut chosen = None;
    for k in target..=g {
        let inter = pick(k);
        if inter.len() >= target {
            chosen = Some((k, inter, false));
            break;
        }
    }
    let (k_search, mut genes, fallback) = chosen.unwrap_or_else(|| {
        let mut inter = pick(g);
        let extra: Vec<usize> = by_mean.iter().copied().filter(|i| !inter.contains(i)).collect();
        inter.extend(extra);
        (g, inter, true)
    });
    genes.truncate(target);
    genes.sort_unstable();
    Ok(GenePanel {
        names: genes.iter().map(|&i| names[i].clone()).collect(),
        means: genes.iter().map(|&i| means[i]).collect(),
        stds: genes.iter().map(|&i| stds[i]).collect(),
        indices: genes,
        k_search,
        fallback,
    })
}

/// Elementwise `ln(1 + x)` of raw counts.
pub fn log1p_normalize(raw: &Tensor) -> Result<Tensor> {
    if let Some(v) = raw.data().iter().find(|v| !(**v >= 0.0)) {
        return Err(FlagError::Contract(format!("raw counts must be nonnegative, found {v}")));
    }
    Ok(raw.map(f64::ln_1p))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovKind {
    Identity,
    /// `exp(−d²/2ℓ²)` over grid coordinates.
    SpatialRbf,
    /// Contiguous spot blocks with constant within-block correlation.
    Block,
}

/// Seed of the visual mixing matrix; shared by every synthetic slide so that
/// slides generated with different seeds share one image model.
pub const VISUAL_MIXING_SEED: u64 = 0x5eed_a11e;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n: usize,
    pub g: usize,
    pub cov_kind: CovKind,
    /// RBF length scale in coordinate units.
    pub length_scale: f64,
    pub seed: u64,
    /// Grid pitch in pixels.
    pub spacing: f64,
    pub visual_dim: usize,
    pub visual_noise: f64,
    pub blocks: usize,
    pub block_corr: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n: 64,
            g: 50,
            cov_kind: CovKind::SpatialRbf,
            length_scale: 150.0,
            seed: 0,
            spacing: 100.0,
            visual_dim: 16,
            visual_noise: 0.1,
            blocks: 4,
            block_corr: 0.8,
        }
    }
}

/// `n` spots on the smallest square grid that holds them, row-major.
pub fn grid_coords(n: usize, spacing: f64) -> Tensor {
    let side = (n as f64).sqrt().ceil().max(1.0) as usize;
    let data = (0..n).flat_map(|i| [(i % side) as f64 * spacing, (i / side) as f64 * spacing]).collect();
    Tensor::from_parts(vec![n, 2], data)
}

/// Ground-truth spot covariance before jitter.
pub fn spot_covariance(spec: &SyntheticSpec, coords: &Tensor) -> Result<Tensor> {
    let n = spec.n;
    let mut a = vec![0.0; n * n];
    match spec.cov_kind {
        CovKind::Identity => (0..n).for_each(|i| a[i * n + i] = 1.0),
        CovKind::SpatialRbf => {
            if !(spec.length_scale > 0.0) {
                return Err(FlagError::Contract("length_scale must be positive".into()));
            }
            let c = coords.data();
            let l2 = 2.0 * spec.length_scale * spec.length_scale;
            for i in 0..n {
                for j in 0..n {
                    let (dx, dy) = (c[2 * i] - c[2 * j], c[2 * i + 1] - c[2 * j + 1]);
                    a[i * n + j] = (-(dx * dx + dy * dy) / l2).exp();
                }
            }
        }
        CovKind::Block => {
            if spec.blocks == 0 || !(-1.0..=1.0).contains(&spec.block_corr) {
                return Err(FlagError::Contract("block covariance needs blocks >= 1 and |block_corr| <= 1".into()));
            }
            let size = n.div_ceil(spec.blocks);
            for i in 0..n {
                for j in 0..n {
                    a[i * n + j] = if i == j {
                        1.0
                    } else if i / size == j / size {
                        spec.block_corr
                    } else {
                        0.0
                    };
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, n], a))
}

/// Cholesky factor of `a + jitter·I`, trying `1e-6` then `1e-4`. Returns
/// the lower factor and the jittered matrix.
pub fn jittered_cholesky(a: &Tensor) -> Result<(DMatrix<f64>, Tensor)> {
    let n = a.shape()[0];
    for jitter in [1e-6, 1e-4] {
        let m = DMatrix::from_fn(n, n, |i, j| a.data()[i * n + j] + if i == j { jitter } else { 0.0 });
        if let Some(ch) = Cholesky::new(m.clone()) {
            let data = (0..n * n).map(|k| m[(k / n, k % n)]).collect();
            return Ok((ch.l(), Tensor::from_parts(vec![n, n], data)));
        }
    }
    Err(FlagError::Construction("covariance is not positive definite after jitter".into()))
}

/// Fixed `[d_v, G]` mixing matrix with `N(0, 1/G)` entries.
pub fn visual_mixing(visual_dim: usize, g: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(VISUAL_MIXING_SEED ^ ((visual_dim as u64) << 32) ^ g as u64);
    standard_normal(&mut rng, &[visual_dim, g]).map(|v| v / (g as f64).sqrt())
}

/// Draws `X₀ = [y_1 … y_G]` with `y_g ~ N(0, A*)` i.i.d., visual features
/// `v_s = M x_s + η`, and returns the slide together with `A*`.
pub fn synth_slide(spec: &SyntheticSpec) -> Result<(SlideSample, Tensor)> {
    if spec.n < 2 || spec.g == 0 || spec.visual_dim == 0 {
        return Err(FlagError::Contract(format!(
            "synthetic slide needs N >= 2, G >= 1 and d_v >= 1, got N={}, G={}, d_v={}",
            spec.n, spec.g, spec.visual_dim
        )));
    }
    let (n, g) = (spec.n, spec.g);
    let coords = grid_coords(n, spec.spacing);
    let (l, a_star) = jittered_cholesky(&spot_covariance(spec, &coords)?)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let z = standard_normal(&mut rng, &[n, g]);
    let zm = DMatrix::from_row_slice(n, g, z.data());
    let y = &l * zm;
    let expr = Tensor::from_parts(vec![n, g], (0..n * g).map(|k| y[(k / g, k % g)]).collect());
    let m = visual_mixing(spec.visual_dim, g);
    let noise = standard_normal(&mut rng, &[n, spec.visual_dim]);
    let dv = spec.visual_dim;
    let mut vis: Vec<f64> = noise.data().iter().map(|e| spec.visual_noise * e).collect();
    crate::tensor::gemm(n, g, dv, expr.data(), false, m.data(), true, &mut vis, 1.0);
    let visual = Tensor::from_parts(vec![n, dv], vis);
    let names = (0..g).map(|i| format!("gene{i:05}")).collect();
    let slide = SlideSample::new(coords, visual, expr, names, format!("synth-{}", spec.seed))?;
    Ok((slide, a_star))
}
