//! Tissue slides and the graphs built from their spot layout.

use std::collections::HashSet;

use crate::error::{FlagError, Result};
use crate::tensor::Tensor;

/// RBF length scale in pixels for the distance edge channel.
pub const DEFAULT_EDGE_SIGMA: f64 = 224.0;
pub const DEFAULT_KNN_K: usize = 8;

/// One tissue section: spot coordinates `[N, 2]`, visual features `[N, d_v]`
/// and expression `[N, G]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SlideSample {
    pub coords: Tensor,
    pub visual: Tensor,
    pub expr: Tensor,
    pub gene_names: Vec<String>,
    pub slide_id: String,
}

impl SlideSample {
    pub fn new(coords: Tensor, visual: Tensor, expr: Tensor, gene_names: Vec<String>, slide_id: String) -> Result<Self> {
        let s = Self { coords, visual, expr, gene_names, slide_id };
        s.validate()?;
        Ok(s)
    }

    pub fn n_spots(&self) -> usize {
        self.coords.shape()[0]
    }

    pub fn n_genes(&self) -> usize {
        self.expr.shape()[1]
    }

    pub fn visual_dim(&self) -> usize {
        self.visual.shape()[1]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FlagError::Contract(m));
        if self.coords.ndim() != 2 || self.coords.shape()[1] != 2 {
            return bad(format!("coords must be [N, 2], got {:?}", self.coords.shape()));
        }
        let n = self.coords.shape()[0];
        if n < 2 {
            return bad(format!("a slide needs at least 2 spots, got {n}"));
        }
        if self.visual.ndim() != 2 || self.visual.shape()[0] != n {
            return bad(format!("visual must be [{n}, d_v], got {:?}", self.visual.shape()));
        }
        if self.expr.ndim() != 2 || self.expr.shape()[0] != n {
            return bad(format!("expr must be [{n}, G], got {:?}", self.expr.shape()));
        }
        if self.gene_names.len() != self.expr.shape()[1] {
            return bad(format!("{} gene names for {} expression columns", self.gene_names.len(), self.expr.shape()[1]));
        }
        let mut seen = HashSet::new();
        for g in &self.gene_names {
            if !seen.insert(g) {
                return bad(format!("duplicate gene name `{g}`"));
            }
        }
        for (what, t) in [("coords", &self.coords), ("visual", &self.visual), ("expr", &self.expr)] {
            if !t.is_finite() {
                return bad(format!("{what} contains non-finite values"));
            }
        }
        let c = self.coords.data();
        for i in 0..n {
            for j in 0..i {
                if (c[2 * i] - c[2 * j]).abs() <= 1e-9 && (c[2 * i + 1] - c[2 * j + 1]).abs() <= 1e-9 {
                    return bad(format!("spots {j} and {i} share coordinates"));
                }
            }
        }
        Ok(())
    }

    pub fn edge_condition(&self, sigma: f64) -> Result<EdgeCondition> {
        build_edge_condition(&self.coords, &self.visual, sigma)
    }

    pub fn knn_graph(&self, k: usize) -> Result<SpatialWeightGraph> {
        build_knn_graph(&self.coords, k)
    }

    /// Keeps only the listed gene columns, in the given order.
    pub fn select_genes(&self, idx: &[usize]) -> Result<Self> {
        let (n, g) = (self.n_spots(), self.n_genes());
        if let Some(&bad) = idx.iter().find(|&&i| i >= g) {
            return Err(FlagError::Contract(format!("gene index {bad} out of range for {g} genes")));
        }
        let src = self.expr.data();
        let data = (0..n).flat_map(|r| idx.iter().map(move |&c| src[r * g + c])).collect();
        Self::new(
            self.coords.clone(),
            self.visual.clone(),
            Tensor::new(vec![n, idx.len()], data)?,
            idx.iter().map(|&i| self.gene_names[i].clone()).collect(),
            self.slide_id.clone(),
        )
    }
}

/// `[N, N, 2]` observable topology: channel 0 is the RBF distance kernel,
/// channel 1 the cosine similarity of visual features.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeCondition {
    pub w: Tensor,
}

impl EdgeCondition {
    pub fn n(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn channel(&self, c: usize) -> Tensor {
        let n = self.n();
        Tensor::from_parts(vec![n, n], self.w.data().iter().skip(c).step_by(2).copied().collect())
    }

    /// Appends extra `[N, N]` channels (e.g. an oracle correlation map).
    pub fn with_channels(&self, extra: &[Tensor]) -> Result<Tensor> {
        let n = self.n();
        let mut parts = vec![self.w.clone()];
        for e in extra {
            if e.shape() != [n, n] {
                return Err(FlagError::Contract(format!("extra edge channel must be [{n}, {n}], got {:?}", e.shape())));
            }
            parts.push(e.reshape(&[n, n, 1])?);
        }
        Tensor::concat(&parts.iter().collect::<Vec<_>>(), 2)
    }
}

fn check_no_nan(t: &Tensor, what: &str) -> Result<()> {
    if t.data().iter().any(|x| x.is_nan()) {
        return Err(FlagError::Contract(format!("{what} contains NaN")));
    }
    Ok(())
}

pub fn build_edge_condition(coords: &Tensor, visual: &Tensor, sigma: f64) -> Result<EdgeCondition> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(FlagError::Contract(format!("edge length scale must be positive, got {sigma}")));
    }
    check_no_nan(coords, "coords")?;
    check_no_nan(visual, "visual features")?;
    let n = coords.shape()[0];
    if coords.shape() != [n, 2] || visual.ndim() != 2 || visual.shape()[0] != n {
        return Err(FlagError::Contract(format!(
            "coords {:?} and visual {:?} do not describe the same spots",
            coords.shape(),
            visual.shape()
        )));
    }
    let d = visual.shape()[1];
    let c = coords.data();
    let v = visual.data();
    let norms: Vec<f64> = (0..n).map(|i| v[i * d..(i + 1) * d].iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let mut w = vec![0.0; n * n * 2];
    let two_s2 = 2.0 * sigma * sigma;
    for i in 0..n {
        for j in i..n {
            let (dist, cos) = if i == j {
                (1.0, 1.0)
            } else {
                let d2 = (c[2 * i] - c[2 * j]).powi(2) + (c[2 * i + 1] - c[2 * j + 1]).powi(2);
                let dot: f64 = v[i * d..(i + 1) * d].iter().zip(&v[j * d..(j + 1) * d]).map(|(a, b)| a * b).sum();
                let denom = norms[i] * norms[j];
                let cos = if denom > 0.0 { (dot / denom).clamp(-1.0, 1.0) } else { 0.0 };
                ((-d2 / two_s2).exp(), cos)
            };
            for (a, b) in [(i, j), (j, i)] {
                w[(a * n + b) * 2] = dist;
                w[(a * n + b) * 2 + 1] = cos;
            }
        }
    }
    Ok(EdgeCondition { w: Tensor::from_parts(vec![n, n, 2], w) })
}

/// Symmetric 0/1 k-nearest-neighbour adjacency with zero diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialWeightGraph {
    pub w: Tensor,
    pub k: usize,
}

impl SpatialWeightGraph {
    pub fn n(&self) -> usize {
        self.w.shape()[0]
    }

    /// `S₀ = Σ W_ij`.
    pub fn total_weight(&self) -> f64 {
        self.w.sum()
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.w.data()[i * self.n() + j] != 0.0
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        let n = self.n();
        (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).filter(|&(i, j)| self.has_edge(i, j)).collect()
    }
}

/// Indices of the `k` nearest other spots, nearest first; equal distances
/// resolve to the lower index.
pub fn nearest_neighbors(coords: &Tensor, i: usize, k: usize) -> Vec<usize> {
    let n = coords.shape()[0];
    let c = coords.data();
    let mut others: Vec<(f64, usize)> = (0..n)
        .filter(|&j| j != i)
        .map(|j| ((c[2 * i] - c[2 * j]).powi(2) + (c[2 * i + 1] - c[2 * j + 1]).powi(2), j))
        .collect();
    others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    others.into_iter().take(k).map(|(_, j)| j).collect()
}

pub fn build_knn_graph(coords: &Tensor, k: usize) -> Result<SpatialWeightGraph> {
    if coords.ndim() != 2 || coords.shape()[1] != 2 {
        return Err(FlagError::Contract(format!("coords must be [N, 2], got {:?}", coords.shape())));
    }
    check_no_nan(coords, "coords")?;
    let n = coords.shape()[0];
    if k == 0 || k >= n {
        return Err(FlagError::Contract(format!("k-NN needs 0 < k < N, got k={k}, N={n}")));
    }
    let mut w = vec![0.0; n * n];
    for i in 0..n {
        for j in nearest_neighbors(coords, i, k) {
            w[i * n + j] = 1.0;
            w[j * n + i] = 1.0;
        }
    }
    Ok(SpatialWeightGraph { w: Tensor::from_parts(vec![n, n], w), k })
}
