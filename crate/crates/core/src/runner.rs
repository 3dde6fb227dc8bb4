//! One interface over the three generators so experiments and the command
//! line can train and sample any of them the same way.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{FlagError, Result};
use crate::flag::{FlagConfig, FlagModel, GfmEmbeddings};
use crate::joint::{JointConfig, JointModel, NodeOnlyModel};
use crate::nn::{ParamStore, Session};
use crate::sde;
use crate::tensor::Tensor;
use crate::training::{TrainExample, Trainer};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Flag,
    Joint,
    NodeOnly,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Joint, Method::NodeOnly, Method::Flag];

    pub fn name(self) -> &'static str {
        match self {
            Self::Flag => "flag",
            Self::Joint => "joint",
            Self::NodeOnly => "node_only",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = FlagError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flag" => Ok(Self::Flag),
            "joint" => Ok(Self::Joint),
            "node_only" | "node-only" => Ok(Self::NodeOnly),
            other => Err(FlagError::Config(format!("unknown mode `{other}` (expected flag, joint or node_only)"))),
        }
    }
}

#[derive(Clone, Debug)]
pub enum AnyModel {
    Flag(FlagModel),
    Joint(JointModel),
    NodeOnly(NodeOnlyModel),
}

/// Named loss terms of one step; `total` is what was optimized.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub total: f64,
    pub terms: Vec<(&'static str, f64)>,
}

impl AnyModel {
    /// Registers parameters for `method`. Joint and node-only models read
    /// `joint`; FLAG reads `flag`. `align_dim` sizes the FLAG projector.
    pub fn build(
        method: Method,
        joint: &JointConfig,
        flag: &FlagConfig,
        genes: usize,
        align_dim: Option<usize>,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(match method {
            Method::Flag => Self::Flag(FlagModel::new(store, rng, flag, genes, align_dim)?),
            Method::Joint => Self::Joint(JointModel::new(store, rng, joint, genes)?),
            Method::NodeOnly => Self::NodeOnly(NodeOnlyModel::new(store, rng, joint, genes)?),
        })
    }

    pub fn method(&self) -> Method {
        match self {
            Self::Flag(_) => Method::Flag,
            Self::Joint(_) => Method::Joint,
            Self::NodeOnly(_) => Method::NodeOnly,
        }
    }

    /// Draws fresh noise and builds the training loss on `examples`.
    pub fn loss<'t>(
        &self,
        s: &Session<'t, '_>,
        examples: &[&TrainExample],
        gfm: Option<&GfmEmbeddings>,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var<'t>, StepReport)> {
        let first = examples.first().ok_or_else(|| FlagError::Contract("empty batch".into()))?;
        let (b, n, g) = (examples.len(), first.n(), first.genes());
        match self {
            Self::Flag(m) => {
                let noise = m.draw_noise(rng, b, n);
                let (l, r) = m.loss(s, examples, &noise, gfm)?;
                Ok((l, StepReport { total: r.total, terms: vec![("l_diff", r.l_diff), ("l_align", r.l_align)] }))
            }
            Self::Joint(m) => {
                let noise = m.draw_noise(rng, b, n, g);
                let (l, r) = m.loss(s, examples, &noise)?;
                Ok((l, StepReport { total: r.total, terms: vec![("l_graph", r.l_graph), ("l_cons", r.l_cons)] }))
            }
            Self::NodeOnly(m) => {
                let t = sde::sample_training_times(rng, b);
                let z = sde::standard_normal(rng, &[b, n, g]);
                let l = m.loss(s, examples, &t, &z)?;
                let v = l.item();
                Ok((l, StepReport { total: v, terms: vec![("l_diff", v)] }))
            }
        }
    }

    /// Generates expression `[N, G]` for one slide's conditions.
    pub fn sample(&self, store: &ParamStore, cv: &Tensor, ce: &Tensor, steps: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        match self {
            Self::Flag(m) => m.sample(store, cv, ce, steps, rng),
            Self::Joint(m) => Ok(m.sample(store, cv, ce, steps, rng)?.x0),
            Self::NodeOnly(m) => m.sample(store, cv, ce, steps, rng),
        }
    }
}

/// Runs `steps` optimizer steps, each on one training slide drawn uniformly
/// with the trainer's generator. Returns the per-step reports.
pub fn train_steps(
    model: &AnyModel,
    trainer: &mut Trainer,
    examples: &[TrainExample],
    gfm: Option<&GfmEmbeddings>,
    steps: usize,
    mut on_step: impl FnMut(u64, &StepReport),
) -> Result<()> {
    if examples.is_empty() {
        return Err(FlagError::Contract("no training slides".into()));
    }
    for _ in 0..steps {
        let (report, _) = trainer.step(|s, rng| {
            let i = rng.random_range(0..examples.len());
            model.loss(s, &[&examples[i]], gfm, rng)
        })?;
        on_step(trainer.step_count(), &report);
    }
    Ok(())
}
