//! Joint node/edge diffusion: the spot expressions `X` and the spot–spot
//! correlation edges `A = corr(X)` are noised and denoised together by one
//! dynamic graph transformer, with an L1 consistency term tying the denoised
//! edges to the correlation of the denoised nodes.
//!
//! Also hosts the node-only baseline, which diffuses `X` alone through the
//! static backbone.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{FlagError, Result};
use crate::graph_transformer::{BackboneMode, GraphBackbone, GraphBackboneConfig};
use crate::nn::{AdaLnModulation, Linear, ParamStore, Session};
use crate::sde::{self, row_scalars, NoiseSchedule};
use crate::tensor::Tensor;
use crate::training::{stack, TrainExample};

pub const CORR_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JointConfig {
    pub backbone: GraphBackboneConfig,
    pub schedule: NoiseSchedule,
    pub lambda_c: f64,
    pub corr_eps: f64,
    /// Scale of clean data used to normalize network inputs.
    pub sigma_data: f64,
}

impl Default for JointConfig {
    fn default() -> Self {
        Self {
            backbone: GraphBackboneConfig::default(),
            schedule: NoiseSchedule::default(),
            lambda_c: 1.0,
            corr_eps: CORR_EPS,
            sigma_data: 1.0,
        }
    }
}

/// Per-row Pearson correlation between spots: `X [N, G] -> [N, N]`.
pub fn empirical_correlation(x: &Tensor, eps: f64) -> Result<Tensor> {
    if x.ndim() != 2 {
        return Err(FlagError::Contract(format!("expected [N, G], got {:?}", x.shape())));
    }
    let (n, g) = (x.shape()[0], x.shape()[1]);
    if g < 2 {
        return Err(FlagError::Contract(format!("correlation across genes needs G >= 2, got {g}")));
    }
    let tape = Tape::inference();
    let v = tape.constant(x.reshape(&[1, n, g])?);
    Ok(correlation_var(v, eps).value().reshape(&[n, n])?)
}

/// Differentiable batched version, `[B, N, G] -> [B, N, N]`:
/// `(X−μ)(X−μ)ᵀ / (σσᵀ + ε)` with `σ` the row norms of the centred rows.
pub fn correlation_var(x: Var<'_>, eps: f64) -> Var<'_> {
    let c = x - x.mean_axis(2, true);
    let cov = c.matmul_t(c);
    let norm = c.square().sum_axis(2, true).sqrt();
    cov / norm.matmul_t(norm).add_scalar(eps)
}

/// Mean absolute off-diagonal difference, `Σ_{i≠j} |A_ij − P_ij| / (B·N(N−1))`.
pub fn off_diagonal_l1<'t>(a: Var<'t>, p: Var<'t>) -> Result<Var<'t>> {
    let s = a.shape();
    let n = s[s.len() - 1];
    if n < 2 {
        return Err(FlagError::Contract("consistency needs at least two spots".into()));
    }
    let mask = Tensor::from_parts(vec![n, n], (0..n * n).map(|k| if k / n == k % n { 0.0 } else { 1.0 }).collect());
    let b = a.value().len() / (n * n);
    let mask = a.tape().constant(mask);
    Ok(((a - p).abs() * mask).sum().scale(1.0 / (b * n * (n - 1)) as f64))
}

/// Consistency between the Tweedie-denoised edges and the correlation of the
/// Tweedie-denoised nodes. Gradients flow through both branches.
pub fn consistency_loss<'t>(
    xt: Var<'t>,
    at: Var<'t>,
    score_x: Var<'t>,
    score_a: Var<'t>,
    sigma: &[f64],
    eps: f64,
) -> Result<Var<'t>> {
    let x0 = sde::tweedie_var(xt, score_x, sigma)?;
    let a0 = sde::tweedie_var(at, score_a, sigma)?;
    if x0.shape()[2] < 2 {
        return Err(FlagError::Contract("consistency needs G >= 2".into()));
    }
    off_diagonal_l1(a0, correlation_var(x0, eps))
}

/// How the per-stream score errors are weighted.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScoreWeighting {
    /// `mean ‖z + σ S‖²` (σ²-weighted DSM); the training objective.
    Epsilon,
    /// `mean ‖S − (−z/σ)‖²`, plain DSM.
    Unweighted,
}

fn stream_loss<'t>(score: Var<'t>, z: &Tensor, sigma: &[f64], w: ScoreWeighting) -> Result<Var<'t>> {
    match w {
        ScoreWeighting::Epsilon => sde::epsilon_loss(score, z, sigma),
        ScoreWeighting::Unweighted => {
            let tape = score.tape();
            let inv = sigma.iter().map(|s| 1.0 / s).collect::<Vec<_>>();
            let target = z.zip_with(&row_scalars(&inv, z.shape())?, |a, b| -a * b)?;
            Ok(score.try_sub(tape.constant(target))?.square().mean())
        }
    }
}

/// Sum of the node and edge denoising score-matching terms.
pub fn graph_score_loss<'t>(
    score_x: Var<'t>,
    score_a: Var<'t>,
    z_x: &Tensor,
    z_a: &Tensor,
    sigma: &[f64],
    weighting: ScoreWeighting,
) -> Result<Var<'t>> {
    for (what, s, z) in [("node", score_x, z_x), ("edge", score_a, z_a)] {
        if s.shape() != z.shape() {
            return Err(FlagError::Contract(format!("{what} score {:?} vs noise {:?}", s.shape(), z.shape())));
        }
        if !s.value().is_finite() {
            return Err(FlagError::Training { step: 0, detail: format!("{what} score is non-finite") });
        }
    }
    Ok(stream_loss(score_x, z_x, sigma, weighting)? + stream_loss(score_a, z_a, sigma, weighting)?)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JointLossReport {
    pub l_graph: f64,
    pub l_cons: f64,
    pub lambda_c: f64,
    pub total: f64,
}

/// Scales each batch row by `1/sqrt(σ² + σ_data²)` so network inputs stay
/// O(1) across noise levels.
pub(crate) fn precondition_input<'t>(x: Var<'t>, sigma: &[f64], sigma_data: f64) -> Result<Var<'t>> {
    let c: Vec<f64> = sigma.iter().map(|s| 1.0 / (s * s + sigma_data * sigma_data).sqrt()).collect();
    x.try_mul(x.tape().constant(row_scalars(&c, &x.shape())?))
}

/// Network output is a noise estimate; the score is `−ε̂/σ`, realized as
/// `out/σ` with the sign absorbed by the head.
pub(crate) fn output_to_score<'t>(out: Var<'t>, sigma: &[f64]) -> Result<Var<'t>> {
    let inv: Vec<f64> = sigma.iter().map(|s| 1.0 / s).collect();
    out.try_mul(out.tape().constant(row_scalars(&inv, &out.shape())?))
}

/// Noise draws for one joint training step.
#[derive(Clone, Debug)]
pub struct JointNoise {
    pub t: Vec<f64>,
    pub z_x: Tensor,
    pub z_a: Tensor,
}

#[derive(Clone, Debug)]
pub struct JointModel {
    pub config: JointConfig,
    pub backbone: GraphBackbone,
}

/// Output of [`JointModel::sample`].
#[derive(Clone, Debug, PartialEq)]
pub struct JointSample {
    pub x0: Tensor,
    /// Symmetrized edges with unit diagonal.
    pub a0: Tensor,
    /// Edges as produced by the sampler.
    pub a0_raw: Tensor,
    /// `‖Â − Âᵀ‖_F` before symmetrization.
    pub asymmetry: f64,
}

impl JointModel {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, config: &JointConfig, genes: usize) -> Result<Self> {
        config.schedule.validate()?;
        if config.lambda_c < 0.0 {
            return Err(FlagError::Config("lambda_c must be nonnegative".into()));
        }
        let backbone = GraphBackbone::new(store, rng, "joint", &config.backbone, genes, BackboneMode::Dynamic)?;
        Ok(Self { config: config.clone(), backbone })
    }

    /// Joint scores at `(X_t [B,N,G], A_t [B,N,N,1])`.
    pub fn scores<'t>(
        &self,
        s: &Session<'t, '_>,
        xt: Var<'t>,
        at: Var<'t>,
        cv: &Tensor,
        ce: &Tensor,
        t: &[f64],
    ) -> Result<(Var<'t>, Var<'t>)> {
        let sigma = self.config.schedule.sigmas(t)?;
        let xin = precondition_input(xt, &sigma, self.config.sigma_data)?;
        let ain = precondition_input(at, &sigma, self.config.sigma_data)?;
        let (ox, oa) = self.backbone.forward_dynamic(s, xin, ain, cv, ce, t)?;
        Ok((output_to_score(ox, &sigma)?, output_to_score(oa, &sigma)?))
    }

    pub fn draw_noise(&self, rng: &mut impl Rng, b: usize, n: usize, g: usize) -> JointNoise {
        JointNoise {
            t: sde::sample_training_times(rng, b),
            z_x: sde::standard_normal(rng, &[b, n, g]),
            z_a: sde::standard_normal(rng, &[b, n, n]),
        }
    }

    /// `L_graph + λ_c L_cons` on a batch of equally sized slides.
    pub fn loss<'t>(
        &self,
        s: &Session<'t, '_>,
        examples: &[&TrainExample],
        noise: &JointNoise,
    ) -> Result<(Var<'t>, JointLossReport)> {
        let batch = stack(examples)?;
        let (b, n, g) = (batch.x0.shape()[0], batch.x0.shape()[1], batch.x0.shape()[2]);
        let a0 = correlation_var(s.constant(batch.x0.clone()), self.config.corr_eps).value();
        let sched = &self.config.schedule;
        let xt = sde::perturb(&batch.x0, &noise.t, &noise.z_x, sched)?;
        let at = sde::perturb(&a0, &noise.t, &noise.z_a, sched)?.reshape(&[b, n, n, 1])?;
        let sigma = sched.sigmas(&noise.t)?;
        let (xt, at) = (s.constant(xt), s.constant(at));
        let (sx, sa) = self.scores(s, xt, at, &batch.cv, &batch.ce, &noise.t)?;
        let l_graph = graph_score_loss(sx, sa, &noise.z_x, &noise.z_a, &sigma, ScoreWeighting::Epsilon)?;
        let at3 = at.reshape(&[b, n, n]);
        let l_cons = if g >= 2 {
            consistency_loss(xt, at3, sx, sa, &sigma, self.config.corr_eps)?
        } else {
            s.constant(Tensor::scalar(0.0))
        };
        let lc = self.config.lambda_c;
        let total = if lc == 0.0 { l_graph } else { l_graph + l_cons.scale(lc) };
        let report = JointLossReport { l_graph: l_graph.item(), l_cons: l_cons.item(), lambda_c: lc, total: total.item() };
        Ok((total, report))
    }

    /// Consistency loss of the current model on fresh noise, without training.
    pub fn eval_consistency(&self, store: &ParamStore, ex: &TrainExample, noise: &JointNoise) -> Result<f64> {
        let tape = Tape::inference();
        let s = Session::new(&tape, store);
        Ok(self.loss(&s, &[ex], noise)?.1.l_cons)
    }

    /// Heun PF-ODE over both streams from `N(0, σ_max² I)` priors, then
    /// Tweedie projection and edge symmetrization.
    pub fn sample(&self, store: &ParamStore, cv: &Tensor, ce: &Tensor, steps: usize, rng: &mut ChaCha8Rng) -> Result<JointSample> {
        if steps == 0 {
            return Err(FlagError::Contract("sampler needs at least one step".into()));
        }
        let n = cv.shape()[0];
        let g = self.backbone.genes;
        let sched = self.config.schedule;
        let smax = sched.sigma_max;
        let init = sde::standard_normal(rng, &[1, n * g + n * n]).map(|v| v * smax);
        let score_fn = |state: &Tensor, t: f64| -> Result<Tensor> {
            let tape = Tape::inference();
            let s = Session::new(&tape, store);
            let x = state.narrow(1, 0, n * g)?.reshape(&[1, n, g])?;
            let a = state.narrow(1, n * g, n * n)?.reshape(&[1, n, n, 1])?;
            let (sx, sa) = self.scores(&s, s.constant(x), s.constant(a), cv, ce, &[t])?;
            let sx = sx.value().reshape(&[1, n * g])?;
            let sa = sa.value().reshape(&[1, n * n])?;
            Tensor::concat(&[&sx, &sa], 1)
        };
        let out = sde::heun_integrate(&init, score_fn, &sched, &sde::uniform_time_grid(steps))?;
        let x0 = out.narrow(1, 0, n * g)?.reshape(&[n, g])?;
        let a0_raw = out.narrow(1, n * g, n * n)?.reshape(&[n, n])?;
        let (a0, asymmetry) = symmetrize_unit_diagonal(&a0_raw);
        Ok(JointSample { x0, a0, a0_raw, asymmetry })
    }
}

/// `(A + Aᵀ)/2` with the diagonal reset to 1; also returns `‖A − Aᵀ‖_F`.
pub fn symmetrize_unit_diagonal(a: &Tensor) -> (Tensor, f64) {
    let n = a.shape()[0];
    let d = a.data();
    let mut out = vec![0.0; n * n];
    let mut asym = 0.0;
    for i in 0..n {
        for j in 0..n {
            let (x, y) = (d[i * n + j], d[j * n + i]);
            asym += (x - y) * (x - y);
            out[i * n + j] = if i == j { 1.0 } else { 0.5 * (x + y) };
        }
    }
    (Tensor::from_parts(vec![n, n], out), asym.sqrt())
}

/// Node-only diffusion: static backbone plus an AdaLN-modulated linear score
/// head; no edge stream and no consistency term.
#[derive(Clone, Debug)]
pub struct NodeOnlyModel {
    pub config: JointConfig,
    pub backbone: GraphBackbone,
    pub head_norm: AdaLnModulation,
    pub head: Linear,
}

impl NodeOnlyModel {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, config: &JointConfig, genes: usize) -> Result<Self> {
        config.schedule.validate()?;
        let backbone = GraphBackbone::new(store, rng, "node", &config.backbone, genes, BackboneMode::Static)?;
        let h = config.backbone.hidden;
        let head_norm = AdaLnModulation::new(store, rng, "node.head.norm", h, h);
        head_norm.proj.zero(store);
        let head = Linear::new(store, rng, "node.head.out", h, genes);
        head.zero(store);
        Ok(Self { config: config.clone(), backbone, head_norm, head })
    }

    pub fn score<'t>(&self, s: &Session<'t, '_>, xt: Var<'t>, cv: &Tensor, ce: &Tensor, t: &[f64]) -> Result<Var<'t>> {
        let sigma = self.config.schedule.sigmas(t)?;
        let xin = precondition_input(xt, &sigma, self.config.sigma_data)?;
        let (h, z) = self.backbone.forward_static_with_context(s, xin, ce, cv, t)?;
        output_to_score(self.head.forward(s, self.head_norm.forward(s, h, z)), &sigma)
    }

    pub fn loss<'t>(&self, s: &Session<'t, '_>, examples: &[&TrainExample], t: &[f64], z: &Tensor) -> Result<Var<'t>> {
        let batch = stack(examples)?;
        let xt = sde::perturb(&batch.x0, t, z, &self.config.schedule)?;
        let sigma = self.config.schedule.sigmas(t)?;
        let score = self.score(s, s.constant(xt), &batch.cv, &batch.ce, t)?;
        sde::epsilon_loss(score, z, &sigma)
    }

    pub fn sample(&self, store: &ParamStore, cv: &Tensor, ce: &Tensor, steps: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        if steps == 0 {
            return Err(FlagError::Contract("sampler needs at least one step".into()));
        }
        let n = cv.shape()[0];
        let g = self.backbone.genes;
        let sched = self.config.schedule;
        let init = sde::standard_normal(rng, &[1, n, g]).map(|v| v * sched.sigma_max);
        let score_fn = |x: &Tensor, t: f64| -> Result<Tensor> {
            let tape = Tape::inference();
            let s = Session::new(&tape, store);
            Ok((*self.score(&s, s.constant(x.clone()), cv, ce, &[t])?.value()).clone())
        };
        sde::heun_integrate(&init, score_fn, &sched, &sde::uniform_time_grid(steps))?.reshape(&[n, g])
    }
}
