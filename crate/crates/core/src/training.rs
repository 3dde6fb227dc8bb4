//! Shared training plumbing: conditioned examples, batching and the
//! optimizer loop state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{FlagError, Result};
use crate::nn::{AdamW, AdamWConfig, ParamStore, Session, StepStats};
use crate::spatial::{EdgeCondition, SlideSample};
use crate::tensor::Tensor;

/// One slide as the models see it: clean expression `[N, G]`, visual
/// condition `[N, d_v]` and edge condition `[N, N, E]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainExample {
    pub x0: Tensor,
    pub cv: Tensor,
    pub ce: Tensor,
}

impl TrainExample {
    pub fn new(x0: Tensor, cv: Tensor, ce: Tensor) -> Result<Self> {
        let n = x0.shape().first().copied().unwrap_or(0);
        if x0.ndim() != 2 || cv.ndim() != 2 || cv.shape()[0] != n || ce.ndim() != 3 || ce.shape()[..2] != [n, n] {
            return Err(FlagError::Contract(format!(
                "inconsistent example shapes: x0 {:?}, cv {:?}, ce {:?}",
                x0.shape(),
                cv.shape(),
                ce.shape()
            )));
        }
        Ok(Self { x0, cv, ce })
    }

    pub fn from_slide(slide: &SlideSample, edges: &EdgeCondition) -> Result<Self> {
        Self::new(slide.expr.clone(), slide.visual.clone(), edges.w.clone())
    }

    pub fn n(&self) -> usize {
        self.x0.shape()[0]
    }

    pub fn genes(&self) -> usize {
        self.x0.shape()[1]
    }
}

/// Stacked examples, `[B, ..]` along a new leading axis.
#[derive(Clone, Debug)]
pub struct StackedBatch {
    pub x0: Tensor,
    pub cv: Tensor,
    pub ce: Tensor,
}

pub fn stack(examples: &[&TrainExample]) -> Result<StackedBatch> {
    if examples.is_empty() {
        return Err(FlagError::Contract("empty batch".into()));
    }
    let lift = |t: &Tensor| {
        let mut s = vec![1];
        s.extend_from_slice(t.shape());
        t.reshape(&s)
    };
    let cat = |f: &dyn Fn(&TrainExample) -> &Tensor| -> Result<Tensor> {
        let parts = examples.iter().map(|e| lift(f(e))).collect::<Result<Vec<_>>>()?;
        Tensor::concat(&parts.iter().collect::<Vec<_>>(), 0)
    };
    Ok(StackedBatch { x0: cat(&|e| &e.x0)?, cv: cat(&|e| &e.cv)?, ce: cat(&|e| &e.ce)? })
}

/// Parameters, optimizer state, step counter and the training RNG.
pub struct Trainer {
    pub store: ParamStore,
    pub opt: AdamW,
    pub rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(store: ParamStore, config: AdamWConfig, seed: u64) -> Self {
        let opt = AdamW::new(config, &store);
        Self { store, opt, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn step_count(&self) -> u64 {
        self.opt.step
    }

    /// Builds the loss on a fresh tape, backpropagates and applies one update.
    /// The closure also returns an auxiliary report passed through unchanged.
    pub fn step<R>(
        &mut self,
        loss: impl for<'t> FnOnce(&Session<'t, '_>, &mut ChaCha8Rng) -> Result<(Var<'t>, R)>,
    ) -> Result<(R, StepStats)> {
        // Failures carry the 1-based number of the step being attempted.
        let step = self.opt.step as usize + 1;
        let tape = Tape::new();
        let (report, grads) = {
            let s = Session::new(&tape, &self.store);
            let (l, report) = loss(&s, &mut self.rng).map_err(|e| match e {
                FlagError::Training { detail, .. } => FlagError::Training { step, detail },
                other => other,
            })?;
            let value = l.item();
            if !value.is_finite() {
                return Err(FlagError::Training { step, detail: format!("loss is {value}") });
            }
            let g = tape.backward(l)?;
            (report, s.param_grads(&g))
        };
        let stats = self.opt.step(&mut self.store, grads)?;
        Ok((report, stats))
    }
}
