//! Graph transformer backbone with edge-modulated attention.
//!
//! Every block normalizes both streams with AdaLN conditioned on a global
//! context `z`, computes per-head attention logits gated and biased by the
//! edge stream and the fixed edge condition, then updates nodes through the
//! softmax-weighted values and edges through the raw logits.
//!
//! In *dynamic* mode the noisy edge state is embedded into an edge stream that
//! evolves across blocks and feeds a score head. In *static* mode the edge
//! stream is absent and attention is modulated by the fixed condition only.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{FlagError, Result};
use crate::nn::{Activation, AdaLnModulation, GegluFfn, Linear, Mlp, ParamId, ParamStore, Session, TimestepEmbedding};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphBackboneConfig {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    /// Width of the per-spot visual condition.
    pub cond_dim: usize,
    /// Channels of the fixed edge condition.
    pub edge_dim: usize,
    pub alpha_init: f64,
    pub gamma_init: f64,
    /// GEGLU inner width as a multiple of `hidden`.
    pub ffn_mult: usize,
    pub time_freq_dim: usize,
}

impl Default for GraphBackboneConfig {
    fn default() -> Self {
        Self {
            hidden: 384,
            layers: 6,
            heads: 8,
            cond_dim: 1024,
            edge_dim: 2,
            alpha_init: 0.1,
            gamma_init: 0.1,
            ffn_mult: 2,
            time_freq_dim: 256,
        }
    }
}

impl GraphBackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("hidden", self.hidden),
            ("layers", self.layers),
            ("heads", self.heads),
            ("cond_dim", self.cond_dim),
            ("edge_dim", self.edge_dim),
            ("ffn_mult", self.ffn_mult),
            ("time_freq_dim", self.time_freq_dim),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(FlagError::Config(format!("backbone `{name}` must be positive")));
        }
        if self.hidden % self.heads != 0 {
            return Err(FlagError::Config(format!(
                "backbone hidden {} is not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if self.time_freq_dim % 2 != 0 {
            return Err(FlagError::Config("backbone time_freq_dim must be even".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneMode {
    Dynamic,
    Static,
}

/// Parameters of the edge stream inside one block (dynamic mode only).
#[derive(Clone, Debug)]
pub struct EdgeStream {
    pub norm_attn: AdaLnModulation,
    pub norm_ffn: AdaLnModulation,
    /// Per-head scalar map of the normalized edge state, shared by the gate
    /// and the bias.
    pub lin_he: Linear,
    /// Head logits to edge hidden channels.
    pub lin_edge: Linear,
    pub ffn: GegluFfn,
}

#[derive(Clone, Debug)]
pub struct GraphBlock {
    pub norm_attn: AdaLnModulation,
    pub norm_ffn: AdaLnModulation,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    /// Per-head scalar map of the fixed edge condition, shared by the gate and
    /// the bias.
    pub lin_ce: Linear,
    pub alpha: ParamId,
    pub gamma: ParamId,
    pub lin_out: Linear,
    pub ffn: GegluFfn,
    pub edge: Option<EdgeStream>,
}

#[derive(Clone, Debug)]
pub struct ScoreHeads {
    pub norm_x: AdaLnModulation,
    pub out_x: Linear,
    pub norm_e: AdaLnModulation,
    pub out_e: Linear,
}

#[derive(Clone, Debug)]
pub struct GraphBackbone {
    pub config: GraphBackboneConfig,
    pub mode: BackboneMode,
    pub genes: usize,
    pub time: TimestepEmbedding,
    pub fuse: Mlp,
    pub node_in: Linear,
    pub edge_in: Option<Linear>,
    pub blocks: Vec<GraphBlock>,
    pub heads: Option<ScoreHeads>,
}

/// Node and edge hidden states between blocks.
#[derive(Clone, Copy, Debug)]
pub struct BlockState<'t> {
    pub hx: Var<'t>,
    pub he: Option<Var<'t>>,
}

/// Condition tensors broadcast to the batch and lifted onto the tape.
struct Conditions<'t> {
    cv: Var<'t>,
    ce: Var<'t>,
    b: usize,
    n: usize,
}

impl GraphBackbone {
    /// Registers all parameters under `prefix`. AdaLN modulations start at
    /// zero (plain layer norm) and score heads start at zero output.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        prefix: &str,
        config: &GraphBackboneConfig,
        genes: usize,
        mode: BackboneMode,
    ) -> Result<Self> {
        config.validate()?;
        if genes == 0 {
            return Err(FlagError::Config("backbone needs at least one gene".into()));
        }
        let c = config;
        let h = c.hidden;
        let dynamic = mode == BackboneMode::Dynamic;
        let ada = |store: &mut ParamStore, rng: &mut _, name: String| {
            let m = AdaLnModulation::new(store, rng, &name, h, h);
            m.proj.zero(store);
            m
        };
        let time = TimestepEmbedding::new(store, rng, &format!("{prefix}.time"), c.time_freq_dim, h);
        let fuse = Mlp::new(store, rng, &format!("{prefix}.fuse"), (h + c.cond_dim + c.edge_dim, h, h), Activation::Silu);
        let node_in = Linear::new(store, rng, &format!("{prefix}.node_in"), genes + c.cond_dim, h);
        let edge_in = dynamic.then(|| Linear::new(store, rng, &format!("{prefix}.edge_in"), 1 + c.edge_dim, h));
        let mut blocks = Vec::with_capacity(c.layers);
        for l in 0..c.layers {
            let p = format!("{prefix}.blocks.{l}");
            let edge = dynamic.then(|| EdgeStream {
                norm_attn: ada(store, rng, format!("{p}.edge.norm_attn")),
                norm_ffn: ada(store, rng, format!("{p}.edge.norm_ffn")),
                lin_he: Linear::new(store, rng, &format!("{p}.edge.lin_he"), h, c.heads),
                lin_edge: Linear::new(store, rng, &format!("{p}.edge.lin_edge"), c.heads, h),
                ffn: GegluFfn::new(store, rng, &format!("{p}.edge.ffn"), h, c.ffn_mult * h),
            });
            blocks.push(GraphBlock {
                norm_attn: ada(store, rng, format!("{p}.norm_attn")),
                norm_ffn: ada(store, rng, format!("{p}.norm_ffn")),
                wq: Linear::new(store, rng, &format!("{p}.wq"), h, h),
                wk: Linear::new(store, rng, &format!("{p}.wk"), h, h),
                wv: Linear::new(store, rng, &format!("{p}.wv"), h, h),
                lin_ce: Linear::new(store, rng, &format!("{p}.lin_ce"), c.edge_dim, c.heads),
                alpha: store.add(format!("{p}.alpha"), Tensor::full(&[1], c.alpha_init)),
                gamma: store.add(format!("{p}.gamma"), Tensor::full(&[1], c.gamma_init)),
                lin_out: Linear::new(store, rng, &format!("{p}.lin_out"), h, h),
                ffn: GegluFfn::new(store, rng, &format!("{p}.ffn"), h, c.ffn_mult * h),
                edge,
            });
        }
        let heads = dynamic.then(|| {
            let heads = ScoreHeads {
                norm_x: ada(store, rng, format!("{prefix}.head_x.norm")),
                out_x: Linear::new(store, rng, &format!("{prefix}.head_x.out"), h, genes),
                norm_e: ada(store, rng, format!("{prefix}.head_e.norm")),
                out_e: Linear::new(store, rng, &format!("{prefix}.head_e.out"), h, 1),
            };
            heads.out_x.zero(store);
            heads.out_e.zero(store);
            heads
        });
        Ok(Self { config: c.clone(), mode, genes, time, fuse, node_in, edge_in, blocks, heads })
    }

    fn conditions<'t>(&self, s: &Session<'t, '_>, xt: Var<'t>, cv: &Tensor, ce: &Tensor) -> Result<Conditions<'t>> {
        let xs = xt.shape();
        if xs.len() != 3 || xs[2] != self.genes {
            return Err(FlagError::Contract(format!("Xt must be [B, N, {}], got {xs:?}", self.genes)));
        }
        let (b, n) = (xs[0], xs[1]);
        let cd = self.config.cond_dim;
        let cv = match cv.shape() {
            [nn, d] if *nn == n && *d == cd => cv.reshape(&[1, n, cd])?.broadcast_to(&[b, n, cd])?,
            [bb, nn, d] if (*bb == b || *bb == 1) && *nn == n && *d == cd => cv.broadcast_to(&[b, n, cd])?,
            other => return Err(FlagError::Contract(format!("Cv must be [B, {n}, {cd}], got {other:?}"))),
        };
        let ed = self.config.edge_dim;
        let ce = match ce.shape() {
            [n1, n2, e] if *n1 == n && *n2 == n && *e == ed => ce.reshape(&[1, n, n, ed])?,
            [bb, n1, n2, e] if (*bb == b || *bb == 1) && *n1 == n && *n2 == n && *e == ed => ce.clone(),
            other => return Err(FlagError::Contract(format!("Ce must be [B, {n}, {n}, {ed}], got {other:?}"))),
        };
        Ok(Conditions { cv: s.constant(cv), ce: s.constant(ce), b, n })
    }

    /// Global context `z = MLP_fuse([t_emb, mean(C_v), mean(C_e)])`, `[B, hidden]`.
    fn context<'t>(&self, s: &Session<'t, '_>, t: &[f64], c: &Conditions<'t>) -> Result<Var<'t>> {
        if t.len() != c.b {
            return Err(FlagError::Contract(format!("{} times for a batch of {}", t.len(), c.b)));
        }
        let temb = self.time.forward(s, t);
        let pv = c.cv.mean_axis(1, false);
        let ed = self.config.edge_dim;
        let pe = c.ce.reshape(&[c.ce.shape()[0], c.n * c.n, ed]).mean_axis(1, false);
        let pe = if pe.shape()[0] == c.b {
            pe
        } else {
            s.constant(pe.value().broadcast_to(&[c.b, ed])?)
        };
        Ok(self.fuse.forward(s, Var::concat(&[temb, pv, pe], 1)))
    }

    fn run_blocks<'t>(
        &self,
        s: &Session<'t, '_>,
        mut state: BlockState<'t>,
        c: &Conditions<'t>,
        z: Var<'t>,
    ) -> BlockState<'t> {
        for block in &self.blocks {
            state = block.forward(s, &self.config, state, c.ce, z);
        }
        state
    }

    /// Node and edge hidden states after the last block (dynamic mode).
    pub fn forward_dynamic_hidden<'t>(
        &self,
        s: &Session<'t, '_>,
        xt: Var<'t>,
        at: Var<'t>,
        cv: &Tensor,
        ce: &Tensor,
        t: &[f64],
    ) -> Result<(BlockState<'t>, Var<'t>)> {
        let edge_in = self
            .edge_in
            .as_ref()
            .ok_or_else(|| FlagError::Contract("backbone was built without an edge stream".into()))?;
        let c = self.conditions(s, xt, cv, ce)?;
        let (b, n) = (c.b, c.n);
        if at.shape() != [b, n, n, 1] {
            return Err(FlagError::Contract(format!("At must be [{b}, {n}, {n}, 1], got {:?}", at.shape())));
        }
        let z = self.context(s, t, &c)?;
        let hx = self.node_in.forward(s, Var::concat(&[xt, c.cv], 2));
        let ce_b = if c.ce.shape()[0] == b {
            c.ce
        } else {
            s.constant(c.ce.value().broadcast_to(&[b, n, n, self.config.edge_dim])?)
        };
        let he = edge_in.forward(s, Var::concat(&[at, ce_b], 3));
        Ok((self.run_blocks(s, BlockState { hx, he: Some(he) }, &c, z), z))
    }

    /// Joint scores `(score_X [B, N, G], score_A [B, N, N])`.
    pub fn forward_dynamic<'t>(
        &self,
        s: &Session<'t, '_>,
        xt: Var<'t>,
        at: Var<'t>,
        cv: &Tensor,
        ce: &Tensor,
        t: &[f64],
    ) -> Result<(Var<'t>, Var<'t>)> {
        let heads = self
            .heads
            .as_ref()
            .ok_or_else(|| FlagError::Contract("backbone was built without score heads".into()))?;
        let (state, z) = self.forward_dynamic_hidden(s, xt, at, cv, ce, t)?;
        let he = state.he.expect("dynamic blocks keep the edge stream");
        let sx = heads.out_x.forward(s, heads.norm_x.forward(s, state.hx, z));
        let sa = heads.out_e.forward(s, heads.norm_e.forward(s, he, z));
        let sh = sa.shape();
        Ok((sx, sa.reshape(&sh[..3])))
    }

    /// Spatial node features `[B, N, hidden]` with attention modulated by the
    /// fixed edge condition only. Works on either mode's parameters; a
    /// dynamic backbone's edge stream is simply not used.
    pub fn forward_static<'t>(
        &self,
        s: &Session<'t, '_>,
        xt: Var<'t>,
        ce: &Tensor,
        cv: &Tensor,
        t: &[f64],
    ) -> Result<Var<'t>> {
        Ok(self.forward_static_with_context(s, xt, ce, cv, t)?.0)
    }

    /// [`forward_static`](Self::forward_static) that also returns the global
    /// context `z` for downstream heads.
    pub fn forward_static_with_context<'t>(
        &self,
        s: &Session<'t, '_>,
        xt: Var<'t>,
        ce: &Tensor,
        cv: &Tensor,
        t: &[f64],
    ) -> Result<(Var<'t>, Var<'t>)> {
        let c = self.conditions(s, xt, cv, ce)?;
        let z = self.context(s, t, &c)?;
        let hx = self.node_in.forward(s, Var::concat(&[xt, c.cv], 2));
        Ok((self.run_blocks(s, BlockState { hx, he: None }, &c, z).hx, z))
    }
}

impl GraphBlock {
    /// Edge-modulated attention logits `[B, heads, N, N]`:
    /// `S = (q kᵀ/√d) ⊙ (1 + E + α C) + (E + γ C)` with `E = Lin(Ĥ_e)` (absent
    /// in static mode) and `C = Lin(C_e)`.
    pub fn attention_logits<'t>(
        &self,
        s: &Session<'t, '_>,
        config: &GraphBackboneConfig,
        hx_hat: Var<'t>,
        he_hat: Option<Var<'t>>,
        ce: Var<'t>,
    ) -> Var<'t> {
        let q = split_heads(self.wq.forward(s, hx_hat), config.heads);
        let k = split_heads(self.wk.forward(s, hx_hat), config.heads);
        let logits = q.matmul_t(k).scale(1.0 / (config.head_dim() as f64).sqrt());
        let c = self.lin_ce.forward(s, ce).permute(&[0, 3, 1, 2]);
        let (alpha, gamma) = (s.param(self.alpha), s.param(self.gamma));
        let ac = c * alpha;
        let gc = c * gamma;
        match (he_hat, &self.edge) {
            (Some(he), Some(edge)) => {
                let e = edge.lin_he.forward(s, he).permute(&[0, 3, 1, 2]);
                logits * (e + ac).add_scalar(1.0) + e + gc
            }
            _ => logits * ac.add_scalar(1.0) + gc,
        }
    }

    pub fn forward<'t>(
        &self,
        s: &Session<'t, '_>,
        config: &GraphBackboneConfig,
        state: BlockState<'t>,
        ce: Var<'t>,
        z: Var<'t>,
    ) -> BlockState<'t> {
        let hx_hat = self.norm_attn.forward(s, state.hx, z);
        let he_hat = match (state.he, &self.edge) {
            (Some(he), Some(edge)) => Some(edge.norm_attn.forward(s, he, z)),
            _ => None,
        };
        let logits = self.attention_logits(s, config, hx_hat, he_hat, ce);
        let v = split_heads(self.wv.forward(s, hx_hat), config.heads);
        let attn = merge_heads(logits.softmax().matmul(v));
        let hx = state.hx + self.lin_out.forward(s, attn);
        let hx = hx + self.ffn.forward(s, self.norm_ffn.forward(s, hx, z));
        let he = match (state.he, &self.edge) {
            (Some(he), Some(edge)) => {
                let he = he + edge.lin_edge.forward(s, logits.permute(&[0, 2, 3, 1]));
                Some(he + edge.ffn.forward(s, edge.norm_ffn.forward(s, he, z)))
            }
            _ => None,
        };
        BlockState { hx, he }
    }
}

/// `[B, N, H] -> [B, heads, N, H/heads]`.
pub(crate) fn split_heads(x: Var<'_>, heads: usize) -> Var<'_> {
    let s = x.shape();
    x.reshape(&[s[0], s[1], heads, s[2] / heads]).permute(&[0, 2, 1, 3])
}

/// `[B, heads, N, d] -> [B, N, heads·d]`.
pub(crate) fn merge_heads(x: Var<'_>) -> Var<'_> {
    let s = x.shape();
    x.permute(&[0, 2, 1, 3]).reshape(&[s[0], s[2], s[1] * s[3]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::nn::gradient_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny_config() -> GraphBackboneConfig {
        GraphBackboneConfig {
            hidden: 8,
            layers: 2,
            heads: 2,
            cond_dim: 3,
            edge_dim: 2,
            ffn_mult: 2,
            time_freq_dim: 4,
            ..Default::default()
        }
    }

    fn rand(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        crate::nn::uniform(rng, shape, 1.0)
    }

    #[test]
    fn config_validation() {
        assert!(GraphBackboneConfig::default().validate().is_ok());
        let bad = GraphBackboneConfig { heads: 5, ..Default::default() };
        assert!(matches!(bad.validate(), Err(FlagError::Config(_))));
    }

    #[test]
    fn logits_reduce_to_dot_product_without_modulation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = tiny_config();
        let mut store = ParamStore::new();
        let bb = GraphBackbone::new(&mut store, &mut rng, "g", &cfg, 3, BackboneMode::Dynamic).unwrap();
        let blk = &bb.blocks[0];
        store.get_mut(blk.alpha).data_mut()[0] = 0.0;
        store.get_mut(blk.gamma).data_mut()[0] = 0.0;
        blk.edge.as_ref().unwrap().lin_he.zero(&mut store);
        blk.lin_ce.zero(&mut store);
        let tape = Tape::inference();
        let s = Session::new(&tape, &store);
        let hx = tape.constant(rand(&mut rng, &[1, 4, 8]));
        let he = tape.constant(rand(&mut rng, &[1, 4, 4, 8]));
        let ce = tape.constant(rand(&mut rng, &[1, 4, 4, 2]));
        let got = blk.attention_logits(&s, &cfg, hx, Some(he), ce).value();
        let q = split_heads(blk.wq.forward(&s, hx), 2);
        let k = split_heads(blk.wk.forward(&s, hx), 2);
        let want = q.matmul_t(k).scale(0.5).value();
        assert!(got.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn attention_logits_gradcheck_wrt_edge_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = tiny_config();
        let mut store = ParamStore::new();
        GraphBackbone::new(&mut store, &mut rng, "g", &cfg, 3, BackboneMode::Dynamic).unwrap();
        let inputs = [rand(&mut rng, &[1, 3, 8]), rand(&mut rng, &[1, 3, 3, 8]), rand(&mut rng, &[1, 3, 3, 2])];
        let err = crate::autograd::gradcheck::check(
            &inputs,
            |v| {
                let mut st = ParamStore::new();
                let bb =
                    GraphBackbone::new(&mut st, &mut ChaCha8Rng::seed_from_u64(2), "g", &tiny_config(), 3, BackboneMode::Dynamic)
                        .unwrap();
                let s = Session::new(v[0].tape(), &st);
                bb.blocks[0].attention_logits(&s, &tiny_config(), v[0], Some(v[1]), v[2]).square().sum()
            },
            1e-6,
        );
        assert!(err < 1e-4, "attention gradcheck {err}");
    }

    #[test]
    fn dynamic_forward_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = tiny_config();
        let mut store = ParamStore::new();
        let bb = GraphBackbone::new(&mut store, &mut rng, "g", &cfg, 5, BackboneMode::Dynamic).unwrap();
        store.randomize(&mut rng, 0.4);
        let xt = rand(&mut rng, &[1, 4, 5]);
        let at = rand(&mut rng, &[1, 4, 4, 1]);
        let cv = rand(&mut rng, &[1, 4, 3]);
        let ce = rand(&mut rng, &[1, 4, 4, 2]);
        let err = gradient_check(
            &store,
            |s| {
                let (sx, sa) =
                    bb.forward_dynamic(s, s.constant(xt.clone()), s.constant(at.clone()), &cv, &ce, &[0.3])?;
                Ok(sx.square().mean() + sa.square().mean())
            },
            1e-6,
            6,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "backbone gradcheck {err}");
    }

    #[test]
    fn shapes_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = tiny_config();
        let mut store = ParamStore::new();
        let bb = GraphBackbone::new(&mut store, &mut rng, "g", &cfg, 5, BackboneMode::Dynamic).unwrap();
        let xt = rand(&mut rng, &[2, 4, 5]);
        let at = rand(&mut rng, &[2, 4, 4, 1]);
        let cv = rand(&mut rng, &[2, 4, 3]);
        let ce = rand(&mut rng, &[4, 4, 2]);
        let run = || {
            let tape = Tape::inference();
            let s = Session::new(&tape, &store);
            let (a, b) = bb.forward_dynamic(&s, tape.constant(xt.clone()), tape.constant(at.clone()), &cv, &ce, &[0.1, 0.9]).unwrap();
            let h = bb.forward_static(&s, tape.constant(xt.clone()), &ce, &cv, &[0.1, 0.9]).unwrap();
            ((*a.value()).clone(), (*b.value()).clone(), (*h.value()).clone())
        };
        let (sx, sa, h) = run();
        assert_eq!(sx.shape(), &[2, 4, 5]);
        assert_eq!(sa.shape(), &[2, 4, 4]);
        assert_eq!(h.shape(), &[2, 4, 8]);
        assert_eq!(run(), (sx, sa, h));
        let tape = Tape::inference();
        let s = Session::new(&tape, &store);
        let bad = bb.forward_dynamic(&s, tape.constant(xt.clone()), tape.constant(Tensor::zeros(&[2, 4, 4])), &cv, &ce, &[0.1, 0.9]);
        assert!(matches!(bad, Err(FlagError::Contract(_))));
    }
}
