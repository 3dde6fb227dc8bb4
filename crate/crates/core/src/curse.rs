//! Experiments on how spot–spot correlation estimates concentrate as the
//! gene panel grows, and what that does to generators trained on them.
//!
//! With `X₀ = [y_1 … y_G]`, `y_g ~ N(0, A*)` i.i.d., the Gram estimate
//! `Â = X₀X₀ᵀ/G` has squared error `Θ(N²/G)` and covariance `Σ_A` whose
//! eigenvalues shrink like `1/G`, so the conditional law of the edges given
//! the nodes sharpens linearly in `G`.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::data::{jittered_cholesky, synth_slide, SyntheticSpec};
use crate::error::{FlagError, Result};
use crate::flag::FlagConfig;
use crate::graph_transformer::{BackboneMode, GraphBackbone, GraphBackboneConfig};
use crate::joint::{empirical_correlation, JointConfig, CORR_EPS};
use crate::metrics;
use crate::nn::{AdamWConfig, Linear, ParamStore, Session};
use crate::runner::{train_steps, AnyModel, Method};
use crate::sde::standard_normal;
use crate::spatial::{SlideSample, DEFAULT_EDGE_SIGMA, DEFAULT_KNN_K};
use crate::tensor::Tensor;
use crate::training::{TrainExample, Trainer};

/// A Monte-Carlo statistic across panel sizes with its log-log slope.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingResult {
    pub g_values: Vec<usize>,
    pub statistic: Vec<f64>,
    /// Standard error of each statistic (zero when not estimated).
    pub std_err: Vec<f64>,
    pub trials: usize,
    pub slope_loglog: f64,
    pub ci_95: (f64, f64),
}

/// Least-squares slope of `ln stat` on `ln G` with a delta-method 95%
/// interval from the per-point standard errors.
pub fn loglog_slope(g: &[usize], stat: &[f64], std_err: &[f64]) -> (f64, (f64, f64)) {
    let x: Vec<f64> = g.iter().map(|&v| (v as f64).ln()).collect();
    let y: Vec<f64> = stat.iter().map(|v| v.ln()).collect();
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    let slope = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / sxx;
    let var: f64 = x
        .iter()
        .zip(stat.iter().zip(std_err))
        .map(|(xi, (s, se))| ((xi - mx) / sxx).powi(2) * (se / s).powi(2))
        .sum();
    let half = 1.96 * var.sqrt();
    (slope, (slope - half, slope + half))
}

fn check_a_star(n: usize, a_star: &Tensor) -> Result<()> {
    if a_star.shape() != [n, n] {
        return Err(FlagError::Contract(format!("A* must be [{n}, {n}], got {:?}", a_star.shape())));
    }
    Ok(())
}

/// Draws `Â = X₀X₀ᵀ/G` for `X₀ = L Z`, `Z [N, G]` standard normal.
fn gram_draw(l: &DMatrix<f64>, n: usize, g: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let z = standard_normal(rng, &[n, g]);
    let x = l * DMatrix::from_row_slice(n, g, z.data());
    (&x * x.transpose()) / g as f64
}

/// One generator per panel size, so adding sizes never perturbs others.
fn rng_for(seed: u64, g: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(g as u64);
    rng
}

/// Monte-Carlo `E‖Â − A*‖_F²` per panel size.
pub fn gram_error_experiment(n: usize, g_values: &[usize], trials: usize, a_star: &Tensor, seed: u64) -> Result<ScalingResult> {
    if trials < 50 {
        return Err(FlagError::Contract(format!("gram experiment needs at least 50 trials, got {trials}")));
    }
    if g_values.is_empty() || g_values.contains(&0) {
        return Err(FlagError::Contract("panel sizes must be positive and non-empty".into()));
    }
    check_a_star(n, a_star)?;
    let (l, a) = jittered_cholesky(a_star)?;
    let a = DMatrix::from_row_slice(n, n, a.data());
    let mut statistic = Vec::with_capacity(g_values.len());
    let mut std_err = Vec::with_capacity(g_values.len());
    for &g in g_values {
        let mut rng = rng_for(seed, g);
        let errs: Vec<f64> = (0..trials).map(|_| (gram_draw(&l, n, g, &mut rng) - &a).norm_squared()).collect();
        let (m, se) = mean_se(&errs);
        statistic.push(m);
        std_err.push(se);
    }
    let (slope, ci) = loglog_slope(g_values, &statistic, &std_err);
    Ok(ScalingResult { g_values: g_values.to_vec(), statistic, std_err, trials, slope_loglog: slope, ci_95: ci })
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

/// `1/λ_min(Σ_A)` per panel size, where `Σ_A` is the empirical covariance of
/// the upper triangle (with diagonal) of `Â` across trials.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FisherResult {
    pub scaling: ScalingResult,
    pub max_eigenvalue: Vec<f64>,
    /// Eigenvalues of `Σ_A` per panel size, ascending.
    pub eigenvalues: Vec<Vec<f64>>,
}

pub fn fisher_scaling(n: usize, g_values: &[usize], trials: usize, a_star: &Tensor, seed: u64) -> Result<FisherResult> {
    if trials < 200 {
        return Err(FlagError::Contract(format!("Fisher scaling needs at least 200 trials per G, got {trials}")));
    }
    if g_values.is_empty() || g_values.contains(&0) {
        return Err(FlagError::Contract("panel sizes must be positive and non-empty".into()));
    }
    check_a_star(n, a_star)?;
    let dim = n * (n + 1) / 2;
    if trials <= dim {
        return Err(FlagError::Contract(format!(
            "{trials} trials cannot estimate a {dim}-dimensional covariance; use more than {dim} (ideally 10x)"
        )));
    }
    let (l, _) = jittered_cholesky(a_star)?;
    let mut statistic = Vec::new();
    let mut max_eigenvalue = Vec::new();
    let mut eigenvalues = Vec::new();
    for &g in g_values {
        let mut rng = rng_for(seed, g);
        let mut samples = DMatrix::<f64>::zeros(trials, dim);
        for t in 0..trials {
            let a = gram_draw(&l, n, g, &mut rng);
            let mut k = 0;
            for i in 0..n {
                for j in i..n {
                    samples[(t, k)] = a[(i, j)];
                    k += 1;
                }
            }
        }
        let cov = sample_covariance(&samples);
        let mut eig: Vec<f64> = SymmetricEigen::new(cov).eigenvalues.iter().copied().collect();
        eig.sort_by(f64::total_cmp);
        let (lo, hi) = (eig[0], eig[eig.len() - 1]);
        if !(lo > 0.0) {
            return Err(FlagError::Contract(format!(
                "Σ_A estimate is singular at G={g} (λ_min = {lo:e}); increase the number of trials"
            )));
        }
        statistic.push(1.0 / lo);
        max_eigenvalue.push(hi);
        eigenvalues.push(eig);
    }
    let zeros = vec![0.0; g_values.len()];
    let (slope, ci) = loglog_slope(g_values, &statistic, &zeros);
    Ok(FisherResult {
        scaling: ScalingResult { g_values: g_values.to_vec(), statistic, std_err: zeros, trials, slope_loglog: slope, ci_95: ci },
        max_eigenvalue,
        eigenvalues,
    })
}

/// Unbiased covariance of the rows of `samples`.
pub fn sample_covariance(samples: &DMatrix<f64>) -> DMatrix<f64> {
    let t = samples.nrows() as f64;
    let mean = samples.row_mean();
    let mut centred = samples.clone();
    for mut row in centred.row_iter_mut() {
        row -= &mean;
    }
    (centred.transpose() * &centred) / (t - 1.0)
}

/// Number of adjacent decreases in a sequence.
pub fn count_inversions(values: &[f64]) -> usize {
    values.windows(2).filter(|w| w[1] < w[0]).count()
}

/// Histogram of off-diagonal `Â` entries pooled over trials, on `bins`
/// equal-width bins spanning `[lo, hi]`; values outside are clamped.
pub fn offdiag_histogram(
    n: usize,
    g: usize,
    trials: usize,
    a_star: &Tensor,
    seed: u64,
    (lo, hi, bins): (f64, f64, usize),
) -> Result<Vec<usize>> {
    check_a_star(n, a_star)?;
    if bins == 0 || !(hi > lo) {
        return Err(FlagError::Contract("histogram needs bins >= 1 and hi > lo".into()));
    }
    let (l, _) = jittered_cholesky(a_star)?;
    let mut rng = rng_for(seed, g);
    let mut counts = vec![0; bins];
    for _ in 0..trials {
        let a = gram_draw(&l, n, g, &mut rng);
        for i in 0..n {
            for j in i + 1..n {
                let pos = ((a[(i, j)] - lo) / (hi - lo) * bins as f64).floor();
                counts[(pos.max(0.0) as usize).min(bins - 1)] += 1;
            }
        }
    }
    Ok(counts)
}

/// Synthetic train/test slides sharing one spot layout and image model.
#[derive(Clone, Debug)]
pub struct SyntheticBenchmark {
    pub train: Vec<SlideSample>,
    pub test: Vec<SlideSample>,
}

impl SyntheticBenchmark {
    /// Slide `i` uses seed `base.seed + i`; the first `n_train` train.
    pub fn generate(base: &SyntheticSpec, n_train: usize, n_test: usize) -> Result<Self> {
        let mut slides = (0..n_train + n_test)
            .map(|i| Ok(synth_slide(&SyntheticSpec { seed: base.seed + i as u64, ..base.clone() })?.0))
            .collect::<Result<Vec<_>>>()?;
        let test = slides.split_off(n_train);
        Ok(Self { train: slides, test })
    }
}

fn examples(slides: &[SlideSample]) -> Result<Vec<TrainExample>> {
    slides.iter().map(|s| TrainExample::from_slide(s, &s.edge_condition(DEFAULT_EDGE_SIGMA)?)).collect()
}

/// Held-out scores of one sweep cell. Undefined statistics are `NaN`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub method: Method,
    pub genes: usize,
    pub pcc: f64,
    pub gsc: f64,
    pub ssc: f64,
    /// Mean training loss over the last tenth of the budget.
    pub final_loss: f64,
    /// Training or sampling produced non-finite values.
    pub collapsed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub g_values: Vec<usize>,
    pub methods: Vec<Method>,
    /// Template for every slide; `g` and `seed` are overridden per cell.
    pub synth: SyntheticSpec,
    pub train_slides: usize,
    pub test_slides: usize,
    /// Optimizer steps per cell.
    pub steps: usize,
    /// Sampler steps for held-out prediction.
    pub sample_steps: usize,
    pub optimizer: AdamWConfig,
    pub joint: JointConfig,
    pub flag: FlagConfig,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        let backbone = GraphBackboneConfig {
            hidden: 32,
            layers: 2,
            heads: 4,
            cond_dim: 16,
            edge_dim: 2,
            ffn_mult: 2,
            time_freq_dim: 32,
            ..Default::default()
        };
        let mut flag = FlagConfig { backbone: backbone.clone(), spot_batch: Some(8), ..Default::default() };
        flag.dit.hidden = 32;
        flag.dit.layers = 3;
        flag.dit.heads = 4;
        flag.dit.mlp_ratio = 2.0;
        flag.dit.gene_dim = 32;
        flag.dit.align_layer = 2;
        flag.dit.time_freq_dim = 32;
        Self {
            g_values: vec![10, 50, 100, 200],
            methods: Method::ALL.to_vec(),
            synth: SyntheticSpec::default(),
            train_slides: 32,
            test_slides: 2,
            steps: 2000,
            sample_steps: 10,
            optimizer: AdamWConfig { lr: 1e-3, ..Default::default() },
            joint: JointConfig { backbone, ..Default::default() },
            flag,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub cells: Vec<SweepCell>,
}

impl SweepResult {
    pub fn cell(&self, method: Method, genes: usize) -> Option<&SweepCell> {
        self.cells.iter().find(|c| c.method == method && c.genes == genes)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,genes,pcc,gsc,ssc,final_loss,collapsed\n");
        for c in &self.cells {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                c.method, c.genes, c.pcc, c.gsc, c.ssc, c.final_loss, c.collapsed
            ));
        }
        out
    }
}

/// Trains `method` on the benchmark and scores held-out samples. Divergence
/// is reported in the cell rather than returned as an error.
pub fn run_cell(cfg: &SweepConfig, method: Method, bench: &SyntheticBenchmark) -> Result<SweepCell> {
    let genes = bench.train[0].n_genes();
    let mut joint = cfg.joint.clone();
    let mut flag = cfg.flag.clone();
    joint.backbone.cond_dim = cfg.synth.visual_dim;
    flag.backbone.cond_dim = cfg.synth.visual_dim;
    let cell_seed = cfg.seed ^ ((genes as u64) << 20) ^ (method as u64);
    let mut init_rng = ChaCha8Rng::seed_from_u64(cell_seed);
    let mut store = ParamStore::new();
    let model = AnyModel::build(method, &joint, &flag, genes, None, &mut store, &mut init_rng)?;
    let train = examples(&bench.train)?;
    let mut trainer = Trainer::new(store, cfg.optimizer.clone(), cell_seed.wrapping_add(1));
    let tail = (cfg.steps / 10).max(1);
    let mut losses = Vec::with_capacity(cfg.steps);
    let nan_cell = |losses: &[f64]| SweepCell {
        method,
        genes,
        pcc: f64::NAN,
        gsc: f64::NAN,
        ssc: f64::NAN,
        final_loss: losses.last().copied().unwrap_or(f64::NAN),
        collapsed: true,
    };
    match train_steps(&model, &mut trainer, &train, None, cfg.steps, |_, r| losses.push(r.total)) {
        Ok(()) => {}
        Err(e) if e.is_numeric() => return Ok(nan_cell(&losses)),
        Err(e) => return Err(e),
    }
    let final_loss = losses[losses.len().saturating_sub(tail)..].iter().sum::<f64>() / tail.min(losses.len()).max(1) as f64;
    let (mut pcc, mut gsc, mut ssc) = (Vec::new(), Vec::new(), Vec::new());
    for (i, slide) in bench.test.iter().enumerate() {
        let ex = TrainExample::from_slide(slide, &slide.edge_condition(DEFAULT_EDGE_SIGMA)?)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cell_seed ^ 0xabcd ^ i as u64);
        let pred = match model.sample(&trainer.store, &ex.cv, &ex.ce, cfg.sample_steps, &mut rng) {
            Ok(p) if p.is_finite() => p,
            Ok(_) => return Ok(nan_cell(&losses)),
            Err(e) if e.is_numeric() => return Ok(nan_cell(&losses)),
            Err(e) => return Err(e),
        };
        pcc.push(metrics::pcc_mse(&pred, &slide.expr).map(|r| r.pcc).unwrap_or(f64::NAN));
        gsc.push(metrics::gsc(&pred, &slide.expr).unwrap_or(f64::NAN));
        let k = DEFAULT_KNN_K.min(slide.n_spots() - 1);
        ssc.push(metrics::ssc(&pred, &slide.expr, &slide.coords, k).unwrap_or(f64::NAN));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(SweepCell { method, genes, pcc: mean(&pcc), gsc: mean(&gsc), ssc: mean(&ssc), final_loss, collapsed: false })
}

/// Every configured method at every panel size under the same budget.
pub fn dimension_sweep(cfg: &SweepConfig, mut progress: impl FnMut(&SweepCell)) -> Result<SweepResult> {
    if cfg.g_values.is_empty() || cfg.methods.is_empty() || cfg.train_slides == 0 || cfg.test_slides == 0 {
        return Err(FlagError::Config("sweep needs panel sizes, methods, and train/test slides".into()));
    }
    let mut cells = Vec::new();
    for &g in &cfg.g_values {
        let spec = SyntheticSpec { g, seed: cfg.seed.wrapping_mul(1000), ..cfg.synth.clone() };
        let bench = SyntheticBenchmark::generate(&spec, cfg.train_slides, cfg.test_slides)?;
        for &m in &cfg.methods {
            let cell = run_cell(cfg, m, &bench)?;
            progress(&cell);
            cells.push(cell);
        }
    }
    Ok(SweepResult { cells })
}

/// Which edge channels the ablation regressor sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeSet {
    Img,
    ImgDist,
    ImgDistOracle,
}

impl EdgeSet {
    pub const ALL: [EdgeSet; 3] = [EdgeSet::Img, EdgeSet::ImgDist, EdgeSet::ImgDistOracle];

    pub fn name(self) -> &'static str {
        match self {
            Self::Img => "img",
            Self::ImgDist => "img+dist",
            Self::ImgDistOracle => "img+dist+oracle_corr",
        }
    }

    fn channels(self) -> usize {
        match self {
            Self::Img => 1,
            Self::ImgDist => 2,
            Self::ImgDistOracle => 3,
        }
    }

    /// Edge tensor `[N, N, E]`; the oracle channel is the spot–spot
    /// correlation of the true expression.
    pub fn edges(self, slide: &SlideSample) -> Result<Tensor> {
        let ec = slide.edge_condition(DEFAULT_EDGE_SIGMA)?;
        let n = slide.n_spots();
        match self {
            Self::Img => ec.channel(1).reshape(&[n, n, 1]),
            Self::ImgDist => {
                let img = ec.channel(1).reshape(&[n, n, 1])?;
                let dist = ec.channel(0).reshape(&[n, n, 1])?;
                Tensor::concat(&[&img, &dist], 2)
            }
            Self::ImgDistOracle => {
                let img = ec.channel(1).reshape(&[n, n, 1])?;
                let dist = ec.channel(0).reshape(&[n, n, 1])?;
                let oracle = empirical_correlation(&slide.expr, CORR_EPS)?.reshape(&[n, n, 1])?;
                Tensor::concat(&[&img, &dist, &oracle], 2)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub synth: SyntheticSpec,
    pub train_slides: usize,
    pub test_slides: usize,
    pub steps: usize,
    pub optimizer: AdamWConfig,
    pub backbone: GraphBackboneConfig,
    pub seed: u64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            synth: SyntheticSpec { g: 50, visual_noise: 1.0, ..Default::default() },
            train_slides: 64,
            test_slides: 2,
            steps: 1500,
            optimizer: AdamWConfig { lr: 1e-3, ..Default::default() },
            backbone: GraphBackboneConfig {
                hidden: 32,
                layers: 2,
                heads: 4,
                cond_dim: 16,
                ffn_mult: 2,
                time_freq_dim: 32,
                ..Default::default()
            },
            seed: 0,
        }
    }
}

/// Node-only graph regressor: the static backbone reads visual features and
/// edges (its expression input is held at zero) and a linear head predicts
/// expression directly under a squared-error loss.
pub struct GraphRegressor {
    pub backbone: GraphBackbone,
    pub head: Linear,
}

impl GraphRegressor {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, config: &GraphBackboneConfig, genes: usize) -> Result<Self> {
        let backbone = GraphBackbone::new(store, rng, "regressor", config, genes, BackboneMode::Static)?;
        let head = Linear::new(store, rng, "regressor.head", config.hidden, genes);
        Ok(Self { backbone, head })
    }

    pub fn predict<'t>(&self, s: &Session<'t, '_>, cv: &Tensor, ce: &Tensor) -> Result<Var<'t>> {
        let n = cv.shape()[0];
        let x = s.constant(Tensor::zeros(&[1, n, self.backbone.genes]));
        let h = self.backbone.forward_static(s, x, ce, cv, &[1.0])?;
        Ok(self.head.forward(s, h))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub pcc: Vec<(EdgeSet, f64)>,
}

impl AblationResult {
    pub fn get(&self, set: EdgeSet) -> f64 {
        self.pcc.iter().find(|(s, _)| *s == set).map(|p| p.1).unwrap_or(f64::NAN)
    }
}

/// Held-out PCC of the graph regressor under each edge set.
pub fn edge_ablation(cfg: &AblationConfig) -> Result<AblationResult> {
    let spec = SyntheticSpec { seed: cfg.seed.wrapping_mul(1000), ..cfg.synth.clone() };
    let bench = SyntheticBenchmark::generate(&spec, cfg.train_slides, cfg.test_slides)?;
    let genes = spec.g;
    let mut pcc = Vec::new();
    for set in EdgeSet::ALL {
        let backbone = GraphBackboneConfig { cond_dim: spec.visual_dim, edge_dim: set.channels(), ..cfg.backbone.clone() };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xab1a7e);
        let mut store = ParamStore::new();
        let model = GraphRegressor::new(&mut store, &mut rng, &backbone, genes)?;
        let train: Vec<(Tensor, Tensor, Tensor)> = bench
            .train
            .iter()
            .map(|s| Ok((s.visual.clone(), set.edges(s)?, s.expr.reshape(&[1, s.n_spots(), genes])?)))
            .collect::<Result<_>>()?;
        let mut trainer = Trainer::new(store, cfg.optimizer.clone(), cfg.seed.wrapping_add(7));
        for _ in 0..cfg.steps {
            trainer.step(|s, rng| {
                let (cv, ce, y) = &train[rand::Rng::random_range(rng, 0..train.len())];
                let err = model.predict(s, cv, ce)? - s.constant(y.clone());
                Ok((err.square().mean(), ()))
            })?;
        }
        let mut scores = Vec::new();
        for slide in &bench.test {
            let tape = Tape::inference();
            let s = Session::new(&tape, &trainer.store);
            let pred = model.predict(&s, &slide.visual, &set.edges(slide)?)?.value().reshape(&[slide.n_spots(), genes])?;
            scores.push(metrics::pcc_mse(&pred, &slide.expr)?.pcc);
        }
        pcc.push((set, scores.iter().sum::<f64>() / scores.len() as f64));
    }
    Ok(AblationResult { pcc })
}
