//! Evaluation metrics: gene-wise accuracy (PCC, MSE), gene–gene structure
//! (GSC), spatial structure (Moran's I, SSC) and marker-gene recovery
//! (DEG overlap).

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{FlagError, Result};
use crate::spatial::{build_knn_graph, SpatialWeightGraph, DEFAULT_KNN_K};
use crate::tensor::Tensor;

/// Columns with standard deviation at or below this are treated as constant.
pub const VARIANCE_GUARD: f64 = 1e-12;

fn check_pair(pred: &Tensor, gt: &Tensor) -> Result<(usize, usize)> {
    if pred.shape() != gt.shape() || pred.ndim() != 2 {
        return Err(FlagError::Contract(format!(
            "prediction {:?} and ground truth {:?} must be equal [N, G] matrices",
            pred.shape(),
            gt.shape()
        )));
    }
    let (n, g) = (gt.shape()[0], gt.shape()[1]);
    if n < 2 {
        return Err(FlagError::Contract(format!("need at least 2 spots, got {n}")));
    }
    Ok((n, g))
}

fn column(x: &Tensor, j: usize) -> Vec<f64> {
    let g = x.shape()[1];
    x.data().iter().skip(j).step_by(g).copied().collect()
}

/// Pearson correlation; `None` when either side is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    let guard = VARIANCE_GUARD * VARIANCE_GUARD * n;
    (saa > guard && sbb > guard).then(|| (sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Per-gene Pearson across spots and elementwise MSE.
#[derive(Clone, Debug, PartialEq)]
pub struct PccMse {
    /// Mean over genes with defined correlation.
    pub pcc: f64,
    pub mse: f64,
    /// `NaN` where either column is constant.
    pub per_gene: Vec<f64>,
    pub excluded: Vec<usize>,
}

pub fn pcc_mse(pred: &Tensor, gt: &Tensor) -> Result<PccMse> {
    let (_, g) = check_pair(pred, gt)?;
    let per_gene: Vec<f64> =
        (0..g).map(|j| pearson(&column(pred, j), &column(gt, j)).unwrap_or(f64::NAN)).collect();
    let defined: Vec<f64> = per_gene.iter().copied().filter(|v| !v.is_nan()).collect();
    if defined.is_empty() {
        return Err(FlagError::Undefined("every gene has zero variance; PCC is undefined".into()));
    }
    let mse = pred.data().iter().zip(gt.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / gt.len() as f64;
    Ok(PccMse {
        pcc: defined.iter().sum::<f64>() / defined.len() as f64,
        mse,
        excluded: (0..g).filter(|&j| per_gene[j].is_nan()).collect(),
        per_gene,
    })
}

/// Per-spot Pearson across genes, averaged over spots with defined values.
pub fn per_spot_pcc(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    let (_, g) = check_pair(pred, gt)?;
    let vals: Vec<f64> =
        pred.data().chunks(g).zip(gt.data().chunks(g)).filter_map(|(a, b)| pearson(a, b)).collect();
    if vals.is_empty() {
        return Err(FlagError::Undefined("every spot is constant across genes".into()));
    }
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

/// `C = X̃ᵀX̃/(N−1)` with columns standardized by their sample standard
/// deviation; constant columns standardize to zero.
pub fn gene_corr_matrix(x: &Tensor) -> Result<Tensor> {
    if x.ndim() != 2 || x.shape()[0] < 2 {
        return Err(FlagError::Contract(format!("need [N >= 2, G], got {:?}", x.shape())));
    }
    let (n, g) = (x.shape()[0], x.shape()[1]);
    let mut z = x.data().to_vec();
    for j in 0..g {
        let col = column(x, j);
        let m = col.iter().sum::<f64>() / n as f64;
        let sd = (col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64).sqrt();
        for i in 0..n {
            z[i * g + j] = if sd > VARIANCE_GUARD { (col[i] - m) / sd } else { 0.0 };
        }
    }
    let mut c = vec![0.0; g * g];
    crate::tensor::gemm(g, n, g, &z, true, &z, false, &mut c, 0.0);
    c.iter_mut().for_each(|v| *v /= (n - 1) as f64);
    Ok(Tensor::from_parts(vec![g, g], c))
}

fn upper_triangle(c: &Tensor) -> Vec<f64> {
    let g = c.shape()[0];
    (0..g).flat_map(|i| (i + 1..g).map(move |j| (i, j))).map(|(i, j)| c.data()[i * g + j]).collect()
}

/// Gene structure consistency: Pearson between the off-diagonal upper
/// triangles of the predicted and true gene–gene correlation matrices.
pub fn gsc(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    let (_, g) = check_pair(pred, gt)?;
    if g < 3 {
        return Err(FlagError::Contract(format!("GSC needs at least 3 genes, got {g}")));
    }
    let (a, b) = (upper_triangle(&gene_corr_matrix(pred)?), upper_triangle(&gene_corr_matrix(gt)?));
    pearson(&a, &b).ok_or_else(|| FlagError::Undefined("gene-correlation triangle has zero variance".into()))
}

/// Global Moran's I, `(N/S₀) · zᵀWz / zᵀz` with `z = x − x̄`.
pub fn morans_i(x: &[f64], w: &SpatialWeightGraph) -> Result<f64> {
    let n = w.n();
    if x.len() != n {
        return Err(FlagError::Contract(format!("{} values for a graph of {n} spots", x.len())));
    }
    let s0 = w.total_weight();
    if !(s0 > 0.0) {
        return Err(FlagError::Contract("weight graph has no edges".into()));
    }
    let m = x.iter().sum::<f64>() / n as f64;
    let z: Vec<f64> = x.iter().map(|v| v - m).collect();
    let zz: f64 = z.iter().map(|v| v * v).sum();
    if zz <= VARIANCE_GUARD * VARIANCE_GUARD * n as f64 {
        return Err(FlagError::Undefined("Moran's I of a constant vector".into()));
    }
    let mut wz = vec![0.0; n];
    crate::tensor::gemm(n, n, 1, w.w.data(), false, &z, false, &mut wz, 0.0);
    let zwz: f64 = z.iter().zip(&wz).map(|(a, b)| a * b).sum();
    Ok(n as f64 / s0 * zwz / zz)
}

/// Moran's I per gene; `None` for constant genes.
pub fn morans_per_gene(x: &Tensor, w: &SpatialWeightGraph) -> Result<Vec<Option<f64>>> {
    (0..x.shape()[1])
        .map(|j| match morans_i(&column(x, j), w) {
            Ok(v) => Ok(Some(v)),
            Err(FlagError::Undefined(_)) => Ok(None),
            Err(e) => Err(e),
        })
        .collect()
}

/// Spatial structure consistency: Pearson between the per-gene Moran's I
/// of prediction and ground truth on the symmetric k-NN graph.
pub fn ssc(pred: &Tensor, gt: &Tensor, coords: &Tensor, k: usize) -> Result<f64> {
    check_pair(pred, gt)?;
    let w = build_knn_graph(coords, k)?;
    ssc_on_graph(pred, gt, &w)
}

pub fn ssc_on_graph(pred: &Tensor, gt: &Tensor, w: &SpatialWeightGraph) -> Result<f64> {
    check_pair(pred, gt)?;
    let (ip, ig) = (morans_per_gene(pred, w)?, morans_per_gene(gt, w)?);
    let (a, b): (Vec<f64>, Vec<f64>) = ip.iter().zip(&ig).filter_map(|(p, g)| Some(((*p)?, (*g)?))).unzip();
    if a.len() < 3 {
        return Err(FlagError::Contract(format!("SSC needs at least 3 genes with defined Moran's I, got {}", a.len())));
    }
    pearson(&a, &b).ok_or_else(|| FlagError::Undefined("Moran's I vector has zero variance".into()))
}

/// Midranks (1-based) of the pooled sample.
fn midranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        idx[i..=j].iter().for_each(|&k| ranks[k] = r);
        i = j + 1;
    }
    ranks
}

/// One-sided Wilcoxon rank-sum test of `a` against `b` (large `a` is
/// "up").
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RankSum {
    /// Mann–Whitney `U = R_a − n_a(n_a+1)/2`.
    pub u: f64,
    /// Tie-corrected standardized `U`.
    pub z: f64,
    /// Exact `P(U ≥ u)` under the permutation null, for small groups.
    pub p_exact: Option<f64>,
}

/// Groups smaller than this use the exact null distribution.
pub const EXACT_RANK_SUM_BELOW: usize = 8;

pub fn rank_sum(a: &[f64], b: &[f64]) -> RankSum {
    let (na, nb) = (a.len(), b.len());
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let ranks = midranks(&pooled);
    let ra: f64 = ranks[..na].iter().sum();
    let u = ra - (na * (na + 1)) as f64 / 2.0;
    let n = (na + nb) as f64;
    let mut ties = 0.0;
    let mut sorted = pooled.clone();
    sorted.sort_by(f64::total_cmp);
    for run in sorted.chunk_by(|x, y| x == y) {
        let t = run.len() as f64;
        ties += t * t * t - t;
    }
    let mean = (na * nb) as f64 / 2.0;
    let var = (na * nb) as f64 / 12.0 * ((n + 1.0) - ties / (n * (n - 1.0)));
    let z = if var > 0.0 { (u - mean) / var.sqrt() } else { 0.0 };
    let p_exact = (na.min(nb) < EXACT_RANK_SUM_BELOW).then(|| exact_upper_tail(&ranks, na, ra));
    RankSum { u, z, p_exact }
}

/// `P(R ≥ r_obs)` where `R` is the rank sum of a uniformly random
/// `k`-subset of `ranks`, by dynamic programming over doubled midranks.
fn exact_upper_tail(ranks: &[f64], k: usize, r_obs: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let max_sum: usize = {
        let mut d = doubled.clone();
        d.sort_unstable_by(|a, b| b.cmp(a));
        d.iter().take(k).sum()
    };
    // counts[j][s]: subsets of size j with doubled sum s.
    let mut counts = vec![vec![0.0f64; max_sum + 1]; k + 1];
    counts[0][0] = 1.0;
    for &r in &doubled {
        for j in (1..=k).rev() {
            let (lo, hi) = counts.split_at_mut(j);
            let (prev, cur) = (&lo[j - 1], &mut hi[0]);
            for s in (r..=max_sum).rev() {
                cur[s] += prev[s - r];
            }
        }
    }
    let target = (2.0 * r_obs).round() as usize;
    let total: f64 = counts[k].iter().sum();
    counts[k].iter().skip(target).sum::<f64>() / total
}

/// Genes ordered from most to least up-regulated in `in_domain` spots
/// versus the rest.
pub fn rank_markers(x: &Tensor, in_domain: &[bool]) -> Vec<usize> {
    let g = x.shape()[1];
    let tests: Vec<RankSum> = (0..g)
        .map(|j| {
            let col = column(x, j);
            let a: Vec<f64> = col.iter().zip(in_domain).filter(|(_, &d)| d).map(|(v, _)| *v).collect();
            let b: Vec<f64> = col.iter().zip(in_domain).filter(|(_, &d)| !d).map(|(v, _)| *v).collect();
            rank_sum(&a, &b)
        })
        .collect();
    let mut order: Vec<usize> = (0..g).collect();
    order.sort_by(|&i, &j| {
        let (a, b) = (&tests[i], &tests[j]);
        let by_p = match (a.p_exact, b.p_exact) {
            (Some(pa), Some(pb)) => pa.total_cmp(&pb),
            _ => std::cmp::Ordering::Equal,
        };
        by_p.then(b.z.total_cmp(&a.z)).then(i.cmp(&j))
    });
    order
}

/// Mean over domains of `|top_k(gt) ∩ top_k(pred)| / k`, with markers
/// ranked by a one-vs-rest rank-sum test.
pub fn deg_overlap(pred: &Tensor, gt: &Tensor, labels: &[usize], top_k: usize) -> Result<f64> {
    let (n, g) = check_pair(pred, gt)?;
    if labels.len() != n {
        return Err(FlagError::Contract(format!("{} domain labels for {n} spots", labels.len())));
    }
    if top_k == 0 || top_k > g {
        return Err(FlagError::Contract(format!("top_k must lie in 1..={g}, got {top_k}")));
    }
    let mut sizes: BTreeMap<usize, usize> = BTreeMap::new();
    labels.iter().for_each(|&l| *sizes.entry(l).or_default() += 1);
    if sizes.len() < 2 || sizes.values().any(|&c| c < 2 || n - c < 2) {
        return Err(FlagError::Contract(format!("need >= 2 domains with >= 2 spots each, got sizes {sizes:?}")));
    }
    let mut total = 0.0;
    for &d in sizes.keys() {
        let mask: Vec<bool> = labels.iter().map(|&l| l == d).collect();
        let top_gt: std::collections::HashSet<usize> = rank_markers(gt, &mask).into_iter().take(top_k).collect();
        let hits = rank_markers(pred, &mask).into_iter().take(top_k).filter(|j| top_gt.contains(j)).count();
        total += hits as f64 / top_k as f64;
    }
    Ok(total / sizes.len() as f64)
}

/// Everything `evaluate` reports for one slide.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub pcc: f64,
    pub mse: f64,
    pub gsc: f64,
    pub ssc: f64,
    pub per_spot_pcc: f64,
    pub per_gene_pcc: Vec<f64>,
    pub morans_gt: Vec<f64>,
    pub morans_pred: Vec<f64>,
    /// Genes with zero variance in prediction or ground truth.
    pub excluded_genes: Vec<usize>,
    pub deg_overlap: BTreeMap<usize, f64>,
}

/// Options for [`evaluate`].
#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub knn_k: usize,
    /// Per-spot domain labels; DEG overlap is computed when present.
    pub domains: Option<Vec<usize>>,
    pub deg_top_k: Vec<usize>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { knn_k: DEFAULT_KNN_K, domains: None, deg_top_k: vec![20, 50] }
    }
}

/// Undefined statistics are reported as `NaN` rather than failing the report.
fn or_nan(r: Result<f64>) -> Result<f64> {
    match r {
        Ok(v) => Ok(v),
        Err(FlagError::Undefined(_)) | Err(FlagError::Contract(_)) => Ok(f64::NAN),
        Err(e) => Err(e),
    }
}

pub fn evaluate(pred: &Tensor, gt: &Tensor, coords: &Tensor, opts: &EvalOptions) -> Result<MetricsReport> {
    let (n, g) = check_pair(pred, gt)?;
    let base = pcc_mse(pred, gt)?;
    let w = build_knn_graph(coords, opts.knn_k.min(n - 1))?;
    let nan = |v: Vec<Option<f64>>| v.into_iter().map(|x| x.unwrap_or(f64::NAN)).collect();
    let mut deg = BTreeMap::new();
    if let Some(labels) = &opts.domains {
        for &k in opts.deg_top_k.iter().filter(|&&k| k <= g) {
            deg.insert(k, deg_overlap(pred, gt, labels, k)?);
        }
    }
    Ok(MetricsReport {
        pcc: base.pcc,
        mse: base.mse,
        gsc: or_nan(gsc(pred, gt))?,
        ssc: or_nan(ssc_on_graph(pred, gt, &w))?,
        per_spot_pcc: or_nan(per_spot_pcc(pred, gt))?,
        per_gene_pcc: base.per_gene,
        morans_gt: nan(morans_per_gene(gt, &w)?),
        morans_pred: nan(morans_per_gene(pred, &w)?),
        excluded_genes: base.excluded,
        deg_overlap: deg,
    })
}

impl MetricsReport {
    /// `key: value` lines; arrays as JSON.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let num = |v: f64| if v.is_finite() { format!("{v}") } else { "null".to_string() };
        let arr = |v: &[f64]| format!("[{}]", v.iter().map(|x| num(*x)).collect::<Vec<_>>().join(", "));
        for (k, v) in [("pcc", self.pcc), ("mse", self.mse), ("gsc", self.gsc), ("ssc", self.ssc), ("per_spot_pcc", self.per_spot_pcc)] {
            let _ = writeln!(out, "{k}: {}", num(v));
        }
        for (top, r) in &self.deg_overlap {
            let _ = writeln!(out, "deg_overlap_top{top}: {}", num(*r));
        }
        let _ = writeln!(out, "excluded_genes: {:?}", self.excluded_genes);
        let _ = writeln!(out, "per_gene_pcc: {}", arr(&self.per_gene_pcc));
        let _ = writeln!(out, "morans_gt: {}", arr(&self.morans_gt));
        let _ = writeln!(out, "morans_pred: {}", arr(&self.morans_pred));
        out
    }
}
