//! The FLAG generator.
//!
//! A static graph transformer summarizes spot–spot structure once into
//! per-spot features `H_spatial`. A bottleneck MLP turns them into a per-spot
//! conditioning vector `C_cond = MLP(H_spatial) + t_emb`, and a diffusion
//! transformer whose tokens are the genes of one spot denoises that spot's
//! expression under AdaLN conditioning on `C_cond`. An intermediate DiT layer
//! is projected onto fixed per-gene foundation-model embeddings and aligned
//! by negative cosine similarity.

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{FlagError, Result};
use crate::graph_transformer::{merge_heads, split_heads, BackboneMode, GraphBackbone, GraphBackboneConfig};
use crate::joint::{output_to_score, precondition_input};
use crate::nn::{adaln, Activation, Linear, Mlp, ParamId, ParamStore, Session, TimestepEmbedding};
use crate::sde::{self, NoiseSchedule};
use crate::tensor::Tensor;
use crate::training::{stack, TrainExample};

pub const ALIGN_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiTConfig {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    /// Width of the scalar-to-token value embedding.
    pub gene_dim: usize,
    /// 1-based block whose output is aligned to the gene embeddings.
    pub align_layer: usize,
    /// Learned per-gene positional embedding on the gene tokens.
    pub gene_positions: bool,
    pub time_freq_dim: usize,
}

impl Default for DiTConfig {
    fn default() -> Self {
        Self {
            hidden: 384,
            layers: 12,
            heads: 6,
            mlp_ratio: 4.0,
            gene_dim: 512,
            align_layer: 8,
            gene_positions: true,
            time_freq_dim: 256,
        }
    }
}

impl DiTConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("hidden", self.hidden),
            ("layers", self.layers),
            ("heads", self.heads),
            ("gene_dim", self.gene_dim),
            ("time_freq_dim", self.time_freq_dim),
        ] {
            if v == 0 {
                return Err(FlagError::Config(format!("dit.{name} must be positive")));
            }
        }
        if self.hidden % self.heads != 0 {
            return Err(FlagError::Config(format!(
                "dit.hidden {} is not divisible by dit.heads {}",
                self.hidden, self.heads
            )));
        }
        if self.align_layer == 0 || self.align_layer > self.layers {
            return Err(FlagError::Config(format!(
                "dit.align_layer must lie in 1..={}, got {}",
                self.layers, self.align_layer
            )));
        }
        if !(self.mlp_ratio > 0.0) || self.time_freq_dim % 2 != 0 {
            return Err(FlagError::Config("dit.mlp_ratio must be positive and time_freq_dim even".into()));
        }
        Ok(())
    }

    fn mlp_width(&self) -> usize {
        ((self.hidden as f64 * self.mlp_ratio).round() as usize).max(1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlagConfig {
    pub backbone: GraphBackboneConfig,
    pub dit: DiTConfig,
    pub schedule: NoiseSchedule,
    pub lambda_align: f64,
    pub sigma_data: f64,
    /// Spots per slide that enter the DiT loss each step; all when unset.
    /// Spots are independent given `C_graph`, so this is an unbiased
    /// subsample of the per-spot loss.
    pub spot_batch: Option<usize>,
}

impl Default for FlagConfig {
    fn default() -> Self {
        Self {
            backbone: GraphBackboneConfig::default(),
            dit: DiTConfig::default(),
            schedule: NoiseSchedule::default(),
            lambda_align: 0.5,
            sigma_data: 1.0,
            spot_batch: None,
        }
    }
}

/// Fixed per-gene embeddings from a foundation model, `F [G, d_e]`. Rows
/// with `valid = false` are zero and excluded from alignment.
#[derive(Clone, Debug, PartialEq)]
pub struct GfmEmbeddings {
    pub f: Tensor,
    pub valid: Vec<bool>,
    pub gene_names: Vec<String>,
    pub source_tag: String,
}

impl GfmEmbeddings {
    pub fn new(f: Tensor, valid: Vec<bool>, gene_names: Vec<String>, source_tag: impl Into<String>) -> Result<Self> {
        if f.ndim() != 2 || f.shape()[1] == 0 {
            return Err(FlagError::Contract(format!("embeddings must be [G, d_e>0], got {:?}", f.shape())));
        }
        let (g, d) = (f.shape()[0], f.shape()[1]);
        if valid.len() != g || gene_names.len() != g {
            return Err(FlagError::Contract(format!(
                "{g} embedding rows but {} mask entries and {} names",
                valid.len(),
                gene_names.len()
            )));
        }
        for (i, &ok) in valid.iter().enumerate() {
            if !ok && f.data()[i * d..(i + 1) * d].iter().any(|&v| v != 0.0) {
                return Err(FlagError::Contract(format!("masked gene {} has a nonzero embedding", gene_names[i])));
            }
        }
        Ok(Self { f, valid, gene_names, source_tag: source_tag.into() })
    }

    /// Marks all-zero rows as masked.
    pub fn from_matrix(f: Tensor, gene_names: Vec<String>, source_tag: impl Into<String>) -> Result<Self> {
        if f.ndim() != 2 {
            return Err(FlagError::Contract(format!("embeddings must be [G, d_e], got {:?}", f.shape())));
        }
        let d = f.shape()[1];
        let valid = f.data().chunks(d.max(1)).map(|r| r.iter().any(|&v| v != 0.0)).collect();
        Self::new(f, valid, gene_names, source_tag)
    }

    pub fn n_genes(&self) -> usize {
        self.f.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.f.shape()[1]
    }

    pub fn n_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Keeps the rows in `idx`, in that order.
    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        let d = self.dim();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= self.n_genes() {
                return Err(FlagError::Contract(format!("gene index {i} out of range")));
            }
            data.extend_from_slice(&self.f.data()[i * d..(i + 1) * d]);
        }
        Ok(Self {
            f: Tensor::new(vec![idx.len(), d], data)?,
            valid: idx.iter().map(|&i| self.valid[i]).collect(),
            gene_names: idx.iter().map(|&i| self.gene_names[i].clone()).collect(),
            source_tag: self.source_tag.clone(),
        })
    }
}

/// Mean over rows and valid genes of `−cos(P_g, F_g)` with
/// `cos = ⟨p, f⟩ / (‖p‖‖f‖ + ε)`. `projected` is `[R, G, d_e]`.
pub fn align_loss<'t>(projected: Var<'t>, gfm: &GfmEmbeddings) -> Result<Var<'t>> {
    let ps = projected.shape();
    let (g, d) = (gfm.n_genes(), gfm.dim());
    if ps.len() != 3 || ps[1] != g || ps[2] != d {
        return Err(FlagError::Contract(format!("projections {ps:?} do not match embeddings [{g}, {d}]")));
    }
    let valid = gfm.n_valid();
    if valid == 0 {
        return Err(FlagError::Contract("alignment needs at least one unmasked gene".into()));
    }
    let tape = projected.tape();
    let f = tape.constant(gfm.f.reshape(&[1, g, d])?);
    let fnorm: Vec<f64> = gfm.f.data().chunks(d).map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let fnorm = tape.constant(Tensor::new(vec![1, g], fnorm)?);
    let mask = tape.constant(Tensor::new(vec![1, g], gfm.valid.iter().map(|&v| f64::from(u8::from(v))).collect())?);
    let dot = (projected * f).sum_axis(2, false);
    let pnorm = projected.square().sum_axis(2, false).sqrt();
    let cos = dot / (pnorm * fnorm).add_scalar(ALIGN_EPS);
    Ok((cos * mask).sum().scale(-1.0 / (ps[0] * valid) as f64))
}

/// adaLN-Zero transformer block over gene tokens.
#[derive(Clone, Debug)]
pub struct DiTBlock {
    /// `C_cond -> (shift, scale, gate)` for attention and MLP; zero at init.
    pub modulation: Linear,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub out: Linear,
    pub mlp: Mlp,
}

impl DiTBlock {
    fn forward<'t>(&self, s: &Session<'t, '_>, heads: usize, x: Var<'t>, c: Var<'t>) -> Var<'t> {
        let h = x.shape()[2];
        let m = self.modulation.forward(s, c.silu());
        let part = |k: usize| m.narrow(1, k * h, h);
        let gate = |k: usize| part(k).reshape(&[m.shape()[0], 1, h]);
        let a = adaln(x, part(1), part(0));
        let q = split_heads(self.wq.forward(s, a), heads);
        let k = split_heads(self.wk.forward(s, a), heads);
        let v = split_heads(self.wv.forward(s, a), heads);
        let dh = (h / heads) as f64;
        let attn = merge_heads(q.matmul_t(k).scale(1.0 / dh.sqrt()).softmax().matmul(v));
        let x = x + self.out.forward(s, attn) * gate(2);
        let b = adaln(x, part(4), part(3));
        x + self.mlp.forward(s, b) * gate(5)
    }
}

/// Diffusion transformer along the gene axis. Each batch row is one spot;
/// each token is one gene.
#[derive(Clone, Debug)]
pub struct GeneDiT {
    pub config: DiTConfig,
    pub genes: usize,
    pub value_in: Linear,
    pub value_out: Linear,
    pub positions: Option<ParamId>,
    pub blocks: Vec<DiTBlock>,
    pub final_modulation: Linear,
    pub head: Linear,
}

impl GeneDiT {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, prefix: &str, config: &DiTConfig, genes: usize) -> Result<Self> {
        config.validate()?;
        let h = config.hidden;
        let value_in = Linear::new(store, rng, &format!("{prefix}.value_in"), 1, config.gene_dim);
        let value_out = Linear::new(store, rng, &format!("{prefix}.value_out"), config.gene_dim, h);
        // Unit-normal like an embedding table; at 0.02 the token LayerNorm
        // all but erases gene identity against the value embedding.
        let positions = config
            .gene_positions
            .then(|| store.add(format!("{prefix}.positions"), sde::standard_normal(rng, &[genes, h])));
        let mut blocks = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let p = format!("{prefix}.blocks.{l}");
            let modulation = Linear::new(store, rng, &format!("{p}.modulation"), h, 6 * h);
            modulation.zero(store);
            blocks.push(DiTBlock {
                modulation,
                wq: Linear::new(store, rng, &format!("{p}.wq"), h, h),
                wk: Linear::new(store, rng, &format!("{p}.wk"), h, h),
                wv: Linear::new(store, rng, &format!("{p}.wv"), h, h),
                out: Linear::new(store, rng, &format!("{p}.out"), h, h),
                mlp: Mlp::new(store, rng, &format!("{p}.mlp"), (h, config.mlp_width(), h), Activation::Gelu),
            });
        }
        let final_modulation = Linear::new(store, rng, &format!("{prefix}.final_modulation"), h, 2 * h);
        final_modulation.zero(store);
        let head = Linear::new(store, rng, &format!("{prefix}.head"), h, 1);
        head.zero(store);
        Ok(Self { config: config.clone(), genes, value_in, value_out, positions, blocks, final_modulation, head })
    }

    /// Raw output `[R, G]` for inputs `x [R, G]` and conditioning `c [R, hidden]`,
    /// plus the hidden states `[R, G, hidden]` after block `return_layer`
    /// (1-based) when requested.
    pub fn forward<'t>(
        &self,
        s: &Session<'t, '_>,
        x: Var<'t>,
        c: Var<'t>,
        return_layer: Option<usize>,
    ) -> Result<(Var<'t>, Option<Var<'t>>)> {
        let (xs, cs) = (x.shape(), c.shape());
        let h = self.config.hidden;
        if xs.len() != 2 || xs[1] != self.genes || cs != [xs[0], h] {
            return Err(FlagError::Contract(format!(
                "DiT expects x [R, {}] and c [R, {h}], got {xs:?} and {cs:?}",
                self.genes
            )));
        }
        if let Some(k) = return_layer {
            if k == 0 || k > self.blocks.len() {
                return Err(FlagError::Contract(format!("return_layer {k} outside 1..={}", self.blocks.len())));
            }
        }
        let (r, g) = (xs[0], xs[1]);
        let mut tokens = self.value_out.forward(s, self.value_in.forward(s, x.reshape(&[r, g, 1])).silu());
        if let Some(p) = self.positions {
            tokens = tokens + s.param(p);
        }
        let mut inter = None;
        for (l, block) in self.blocks.iter().enumerate() {
            tokens = block.forward(s, self.config.heads, tokens, c);
            if return_layer == Some(l + 1) {
                inter = Some(tokens);
            }
        }
        let m = self.final_modulation.forward(s, c.silu());
        let out = adaln(tokens, m.narrow(1, h, h), m.narrow(1, 0, h));
        let out = self.head.forward(s, out).reshape(&[r, g]);
        Ok((out, inter))
    }
}

/// Loss terms of one training step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlagLossReport {
    pub l_diff: f64,
    pub l_align: f64,
    pub lambda_align: f64,
    pub total: f64,
}

/// Noise draws for one step: per-slide times, noise `[B, N, G]` and the
/// spots entering the DiT loss (flat indices into `B·N`).
#[derive(Clone, Debug)]
pub struct FlagNoise {
    pub t: Vec<f64>,
    pub z: Tensor,
    pub rows: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct FlagModel {
    pub config: FlagConfig,
    pub genes: usize,
    pub backbone: GraphBackbone,
    pub cond_gene: Linear,
    pub cond_hidden: Linear,
    pub time: TimestepEmbedding,
    pub dit: GeneDiT,
    /// Maps DiT tokens onto the embedding space; present when trained with
    /// gene embeddings of width `d_e`.
    pub projector: Option<Mlp>,
}

/// Conditioned model outputs at one noise level.
pub struct FlagForward<'t> {
    /// `[B, N, G]`.
    pub score: Var<'t>,
    /// Block-`align_layer` DiT states of the evaluated rows, `[R, G, hidden]`.
    pub inter: Option<Var<'t>>,
}

impl FlagModel {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        config: &FlagConfig,
        genes: usize,
        align_dim: Option<usize>,
    ) -> Result<Self> {
        config.schedule.validate()?;
        if !(config.lambda_align >= 0.0) {
            return Err(FlagError::Config("lambda_align must be nonnegative".into()));
        }
        if config.spot_batch == Some(0) {
            return Err(FlagError::Config("spot_batch must be positive".into()));
        }
        let backbone = GraphBackbone::new(store, rng, "flag.spatial", &config.backbone, genes, BackboneMode::Static)?;
        let d = &config.dit;
        let cond_gene = Linear::new(store, rng, "flag.cond.gene", config.backbone.hidden, d.gene_dim);
        let cond_hidden = Linear::new(store, rng, "flag.cond.hidden", d.gene_dim, d.hidden);
        let time = TimestepEmbedding::new(store, rng, "flag.time", d.time_freq_dim, d.hidden);
        let dit = GeneDiT::new(store, rng, "flag.dit", d, genes)?;
        let projector = match align_dim {
            Some(0) => return Err(FlagError::Config("embedding width must be positive".into())),
            Some(de) => Some(Mlp::new(store, rng, "flag.projector", (d.hidden, d.hidden, de), Activation::Gelu)),
            None => None,
        };
        Ok(Self { config: config.clone(), genes, backbone, cond_gene, cond_hidden, time, dit, projector })
    }

    /// `C_cond = Lin_hid(SiLU(Lin_gene(H_spatial))) + t_emb`, `[B, N, hidden]`.
    /// `xt` is the network-scaled state.
    pub fn spatial_condition<'t>(
        &self,
        s: &Session<'t, '_>,
        xt: Var<'t>,
        ce: &Tensor,
        cv: &Tensor,
        t: &[f64],
    ) -> Result<Var<'t>> {
        let hs = self.backbone.forward_static(s, xt, ce, cv, t)?;
        let c = self.cond_hidden.forward(s, self.cond_gene.forward(s, hs).silu());
        let temb = self.time.forward(s, t);
        let b = t.len();
        Ok(c + temb.reshape(&[b, 1, self.config.dit.hidden]))
    }

    /// Scores at `X_t [B, N, G]`. With `rows`, only those flattened spots run
    /// through the DiT and the score is `[R, G]`; otherwise `[B, N, G]`.
    pub fn forward<'t>(
        &self,
        s: &Session<'t, '_>,
        xt: Var<'t>,
        cv: &Tensor,
        ce: &Tensor,
        t: &[f64],
        rows: Option<&[usize]>,
        return_layer: Option<usize>,
    ) -> Result<FlagForward<'t>> {
        let shape = xt.shape();
        if shape.len() != 3 || shape[2] != self.genes || shape[0] != t.len() {
            return Err(FlagError::Contract(format!("Xt must be [{}, N, {}], got {shape:?}", t.len(), self.genes)));
        }
        let (b, n, g) = (shape[0], shape[1], shape[2]);
        let sigma = self.config.schedule.sigmas(t)?;
        let xin = precondition_input(xt, &sigma, self.config.sigma_data)?;
        let cond = self.spatial_condition(s, xin, ce, cv, t)?;
        let hd = self.config.dit.hidden;
        let flat_x = xin.reshape(&[b * n, g]);
        let flat_c = cond.reshape(&[b * n, hd]);
        let (x_rows, c_rows, row_sigma) = match rows {
            Some(idx) => {
                if let Some(&bad) = idx.iter().find(|&&r| r >= b * n) {
                    return Err(FlagError::Contract(format!("spot row {bad} out of range for {}", b * n)));
                }
                (flat_x.index_rows(idx), flat_c.index_rows(idx), idx.iter().map(|&r| sigma[r / n]).collect())
            }
            None => (flat_x, flat_c, (0..b * n).map(|r| sigma[r / n]).collect::<Vec<_>>()),
        };
        let (out, inter) = self.dit.forward(s, x_rows, c_rows, return_layer)?;
        let score = output_to_score(out, &row_sigma)?;
        let score = if rows.is_some() { score } else { score.reshape(&[b, n, g]) };
        Ok(FlagForward { score, inter })
    }

    /// Score function `[B, N, G] -> [B, N, G]` for samplers.
    pub fn score<'t>(&self, s: &Session<'t, '_>, xt: Var<'t>, cv: &Tensor, ce: &Tensor, t: &[f64]) -> Result<Var<'t>> {
        Ok(self.forward(s, xt, cv, ce, t, None, None)?.score)
    }

    pub fn draw_noise(&self, rng: &mut impl Rng, b: usize, n: usize) -> FlagNoise {
        let t = sde::sample_training_times(rng, b);
        let z = sde::standard_normal(rng, &[b, n, self.genes]);
        let rows = match self.config.spot_batch {
            Some(k) if k < n => (0..b)
                .flat_map(|bi| {
                    let mut pick = sample_indices(rng, n, k).into_vec();
                    pick.sort_unstable();
                    pick.into_iter().map(move |i| bi * n + i)
                })
                .collect(),
            _ => (0..b * n).collect(),
        };
        FlagNoise { t, z, rows }
    }

    /// `L_diff + λ_align L_align`, with `L_diff = mean ‖ε + σ S‖²` over the
    /// selected spots. The alignment term is skipped when `gfm` is `None`
    /// or `λ_align = 0`.
    pub fn loss<'t>(
        &self,
        s: &Session<'t, '_>,
        examples: &[&TrainExample],
        noise: &FlagNoise,
        gfm: Option<&GfmEmbeddings>,
    ) -> Result<(Var<'t>, FlagLossReport)> {
        let batch = stack(examples)?;
        let (b, n, g) = (batch.x0.shape()[0], batch.x0.shape()[1], batch.x0.shape()[2]);
        let sched = &self.config.schedule;
        let xt = sde::perturb(&batch.x0, &noise.t, &noise.z, sched)?;
        let lambda = self.config.lambda_align;
        let align = match gfm {
            Some(f) if lambda > 0.0 => {
                if f.n_genes() != g {
                    return Err(FlagError::Contract(format!("{} embedding rows for {g} genes", f.n_genes())));
                }
                let proj = self
                    .projector
                    .as_ref()
                    .ok_or_else(|| FlagError::Contract("model was built without an alignment projector".into()))?;
                Some((f, proj))
            }
            _ => None,
        };
        let return_layer = align.is_some().then_some(self.config.dit.align_layer);
        let fw = self.forward(s, s.constant(xt), &batch.cv, &batch.ce, &noise.t, Some(&noise.rows), return_layer)?;
        let sigma = sched.sigmas(&noise.t)?;
        let row_sigma: Vec<f64> = noise.rows.iter().map(|&r| sigma[r / n]).collect();
        let z_rows = noise.z.reshape(&[b * n, g])?.select_rows(&noise.rows)?;
        let l_diff = sde::epsilon_loss(fw.score, &z_rows, &row_sigma)?;
        let (total, l_align) = match (align, fw.inter) {
            (Some((f, proj)), Some(inter)) => {
                let la = align_loss(proj.forward(s, inter), f)?;
                (l_diff + la.scale(lambda), la.item())
            }
            _ => (l_diff, 0.0),
        };
        let report = FlagLossReport { l_diff: l_diff.item(), l_align, lambda_align: lambda, total: total.item() };
        Ok((total, report))
    }

    /// Heun PF-ODE from `N(0, σ_max² I)`, recomputing the spatial condition at
    /// every score evaluation, then a Tweedie projection. Returns `[N, G]`.
    pub fn sample(&self, store: &ParamStore, cv: &Tensor, ce: &Tensor, steps: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        if steps == 0 {
            return Err(FlagError::Contract("sampler needs at least one step".into()));
        }
        let n = cv.shape().first().copied().unwrap_or(0);
        let sched = self.config.schedule;
        let init = sde::standard_normal(rng, &[1, n, self.genes]).map(|v| v * sched.sigma_max);
        let score_fn = |x: &Tensor, t: f64| -> Result<Tensor> {
            let tape = Tape::inference();
            let s = Session::new(&tape, store);
            Ok((*self.score(&s, s.constant(x.clone()), cv, ce, &[t])?.value()).clone())
        };
        sde::heun_integrate(&init, score_fn, &sched, &sde::uniform_time_grid(steps))?.reshape(&[n, self.genes])
    }
}
