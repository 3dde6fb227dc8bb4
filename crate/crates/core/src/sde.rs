//! Variance-exploding SDE: noise schedule, perturbation kernel, scores,
//! denoising losses and the Heun probability-flow sampler.
//!
//! Batched tensors carry the batch on axis 0; a time vector holds one entry
//! per batch row.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{FlagError, Result};
use crate::tensor::Tensor;

/// Lower end of the training-time distribution; keeps `σ(t)` away from the
/// stiff region right at `σ_min`.
pub const TRAIN_T_MIN: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSchedule {
    pub sigma_min: f64,
    pub sigma_max: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self { sigma_min: 0.01, sigma_max: 10.0 }
    }
}

fn check_t(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(FlagError::Domain(format!("diffusion time {t} outside [0, 1]")))
    }
}

impl NoiseSchedule {
    pub fn new(sigma_min: f64, sigma_max: f64) -> Result<Self> {
        let s = Self { sigma_min, sigma_max };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min > 0.0 && self.sigma_min < self.sigma_max && self.sigma_max.is_finite()) {
            return Err(FlagError::Contract(format!(
                "noise schedule needs 0 < sigma_min < sigma_max, got [{}, {}]",
                self.sigma_min, self.sigma_max
            )));
        }
        Ok(())
    }

    fn log_ratio(&self) -> f64 {
        (self.sigma_max / self.sigma_min).ln()
    }

    /// `σ(t) = σ_min (σ_max/σ_min)^t`.
    pub fn sigma(&self, t: f64) -> Result<f64> {
        check_t(t)?;
        Ok(self.sigma_min * (t * self.log_ratio()).exp())
    }

    /// `g(t)² = dσ²/dt = 2 ln(σ_max/σ_min) σ(t)²`.
    pub fn g_squared(&self, t: f64) -> Result<f64> {
        let s = self.sigma(t)?;
        Ok(2.0 * self.log_ratio() * s * s)
    }

    pub fn sigmas(&self, t: &[f64]) -> Result<Vec<f64>> {
        t.iter().map(|&ti| self.sigma(ti)).collect()
    }
}

/// Per-row scalars as a tensor broadcastable against `shape` (`[B, 1, .., 1]`).
pub fn row_scalars(values: &[f64], shape: &[usize]) -> Result<Tensor> {
    if shape.is_empty() || shape[0] != values.len() {
        return Err(FlagError::Contract(format!(
            "{} per-row values for a batch of shape {shape:?}",
            values.len()
        )));
    }
    let mut s = vec![1; shape.len()];
    s[0] = values.len();
    Tensor::new(s, values.to_vec())
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(FlagError::Contract(format!("{what}: shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    Ok(())
}

/// `x_t = x_0 + σ(t) z`, row by row.
pub fn perturb(x0: &Tensor, t: &[f64], z: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    same_shape(x0, z, "perturb")?;
    let sig = row_scalars(&schedule.sigmas(t)?, x0.shape())?;
    x0.zip_with(&z.zip_with(&sig, |a, b| a * b)?, |a, b| a + b)
}

/// Score of the perturbation kernel, `−(x_t − x_0)/σ(t)²`.
pub fn true_perturbation_score(xt: &Tensor, x0: &Tensor, t: &[f64], schedule: &NoiseSchedule) -> Result<Tensor> {
    same_shape(xt, x0, "true_perturbation_score")?;
    let var: Vec<f64> = schedule.sigmas(t)?.iter().map(|s| s * s).collect();
    let var = row_scalars(&var, xt.shape())?;
    xt.zip_with(x0, |a, b| b - a)?.zip_with(&var, |d, v| d / v)
}

/// `x̂_0 = x_t + σ(t)² · score`.
pub fn tweedie_denoise(xt: &Tensor, score: &Tensor, t: &[f64], schedule: &NoiseSchedule) -> Result<Tensor> {
    same_shape(xt, score, "tweedie_denoise")?;
    let var: Vec<f64> = schedule.sigmas(t)?.iter().map(|s| s * s).collect();
    let var = row_scalars(&var, xt.shape())?;
    xt.zip_with(&score.zip_with(&var, |s, v| s * v)?, |a, b| a + b)
}

/// Differentiable Tweedie estimate.
pub fn tweedie_var<'t>(xt: Var<'t>, score: Var<'t>, sigma: &[f64]) -> Result<Var<'t>> {
    let var: Vec<f64> = sigma.iter().map(|s| s * s).collect();
    let var = xt.tape().constant(row_scalars(&var, &xt.shape())?);
    xt.try_add(score.try_mul(var)?)
}

/// One draw of training data: clean rows, times, noise and perturbed rows.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionBatch {
    pub x0: Tensor,
    pub t: Vec<f64>,
    pub z: Tensor,
    pub xt: Tensor,
}

impl DiffusionBatch {
    pub fn new(x0: Tensor, t: Vec<f64>, z: Tensor, schedule: &NoiseSchedule) -> Result<Self> {
        let xt = perturb(&x0, &t, &z, schedule)?;
        Ok(Self { x0, t, z, xt })
    }

    /// Draws `t ~ U[TRAIN_T_MIN, 1]` per row and standard-normal noise.
    pub fn sample(x0: Tensor, schedule: &NoiseSchedule, rng: &mut impl Rng) -> Result<Self> {
        let b = x0.shape().first().copied().unwrap_or(0);
        let t = sample_training_times(rng, b);
        let z = standard_normal(rng, x0.shape());
        Self::new(x0, t, z, schedule)
    }

    pub fn sigmas(&self, schedule: &NoiseSchedule) -> Vec<f64> {
        schedule.sigmas(&self.t).expect("batch times are validated on construction")
    }
}

pub fn sample_training_times(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(TRAIN_T_MIN..=1.0)).collect()
}

pub fn standard_normal(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect())
}

fn check_finite_output(score: &Tensor, step: usize) -> Result<()> {
    if !score.is_finite() {
        let bad = score.data().iter().position(|x| !x.is_finite()).unwrap_or(0);
        return Err(FlagError::Training {
            step,
            detail: format!("model output is non-finite at flat index {bad} of shape {:?}", score.shape()),
        });
    }
    Ok(())
}

/// Mean squared error between the model score and the perturbation score.
pub fn dsm_loss(
    score_fn: impl FnOnce(&Tensor, &[f64]) -> Result<Tensor>,
    batch: &DiffusionBatch,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    let pred = score_fn(&batch.xt, &batch.t)?;
    same_shape(&pred, &batch.xt, "dsm_loss")?;
    check_finite_output(&pred, 0)?;
    let target = true_perturbation_score(&batch.xt, &batch.x0, &batch.t, schedule)?;
    Ok(pred.zip_with(&target, |a, b| (a - b) * (a - b))?.sum() / pred.len() as f64)
}

/// Noise-prediction form, `mean ‖z + σ(t) S‖²`; equals σ²-weighted DSM.
pub fn epsilon_loss<'t>(score: Var<'t>, z: &Tensor, sigma: &[f64]) -> Result<Var<'t>> {
    let tape = score.tape();
    let sig = tape.constant(row_scalars(sigma, &score.shape())?);
    let z = tape.constant(z.clone());
    Ok(z.try_add(score.try_mul(sig)?)?.square().mean())
}

/// `K + 1` equally spaced times from 1 down to 0.
pub fn uniform_time_grid(steps: usize) -> Vec<f64> {
    (0..=steps).map(|i| 1.0 - i as f64 / steps as f64).collect()
}

fn check_grid(t_grid: &[f64]) -> Result<()> {
    if t_grid.len() < 2 {
        return Err(FlagError::Contract("time grid needs at least two points".into()));
    }
    for &t in t_grid {
        check_t(t)?;
    }
    if let Some(i) = t_grid.windows(2).position(|w| w[1] >= w[0]) {
        return Err(FlagError::Contract(format!(
            "time grid must be strictly decreasing; t[{i}]={} then t[{}]={}",
            t_grid[i],
            i + 1,
            t_grid[i + 1]
        )));
    }
    Ok(())
}

/// Second-order Heun integration of `dX/dt = −½ g(t)² s(X, t)` along a
/// decreasing time grid, without the final denoising step.
pub fn heun_pf_ode(
    x_init: &Tensor,
    mut score_fn: impl FnMut(&Tensor, f64) -> Result<Tensor>,
    schedule: &NoiseSchedule,
    t_grid: &[f64],
) -> Result<Tensor> {
    check_grid(t_grid)?;
    let mut x = x_init.clone();
    for (step, w) in t_grid.windows(2).enumerate() {
        let (t, t_next) = (w[0], w[1]);
        let dt = t_next - t;
        let d1 = drift(&mut score_fn, &x, t, schedule, step)?;
        let x_euler = x.zip_with(&d1, |a, d| a + d * dt)?;
        let d2 = drift(&mut score_fn, &x_euler, t_next, schedule, step)?;
        let mut next = x.clone();
        for ((v, a), b) in next.data_mut().iter_mut().zip(d1.data()).zip(d2.data()) {
            *v += 0.5 * (a + b) * dt;
        }
        if !next.is_finite() {
            return Err(FlagError::SamplerDivergence { step, detail: format!("state became non-finite at t={t_next}") });
        }
        x = next;
    }
    Ok(x)
}

fn drift(
    score_fn: &mut impl FnMut(&Tensor, f64) -> Result<Tensor>,
    x: &Tensor,
    t: f64,
    schedule: &NoiseSchedule,
    step: usize,
) -> Result<Tensor> {
    let s = score_fn(x, t)?;
    same_shape(&s, x, "score function output")?;
    if !s.is_finite() {
        return Err(FlagError::SamplerDivergence { step, detail: format!("score is non-finite at t={t}") });
    }
    let c = -0.5 * schedule.g_squared(t)?;
    Ok(s.map(|v| c * v))
}

/// Heun PF-ODE sampling followed by a Tweedie projection at the last grid
/// time.
pub fn heun_integrate(
    x_init: &Tensor,
    mut score_fn: impl FnMut(&Tensor, f64) -> Result<Tensor>,
    schedule: &NoiseSchedule,
    t_grid: &[f64],
) -> Result<Tensor> {
    let x = heun_pf_ode(x_init, &mut score_fn, schedule, t_grid)?;
    let t_end = *t_grid.last().unwrap();
    let steps = t_grid.len() - 1;
    let s = score_fn(&x, t_end)?;
    if !s.is_finite() {
        return Err(FlagError::SamplerDivergence { step: steps, detail: "score non-finite at final projection".into() });
    }
    let b = x.shape()[0];
    tweedie_denoise(&x, &s, &vec![t_end; b], schedule)
}
