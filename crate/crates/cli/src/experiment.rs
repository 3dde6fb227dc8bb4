//! `flag experiment`: the gene-dimension experiments as CSV tables.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Subcommand, ValueEnum};
use flag_core::curse::{
    dimension_sweep, edge_ablation, fisher_scaling, gram_error_experiment, offdiag_histogram, AblationConfig, SweepConfig,
};
use flag_core::data::{grid_coords, spot_covariance, CovKind, SyntheticSpec};
use flag_core::Tensor;
use serde::Serialize;

use crate::config::{config_hash, parse_toml};
use crate::error::{write_file, CliResult, Failure};

#[derive(Subcommand, Debug)]
pub enum Experiment {
    /// Monte-Carlo error of the Gram estimate against panel size.
    Gram(ScalingArgs),
    /// Inverse smallest eigenvalue of the Gram-entry covariance against panel size.
    Fisher(ScalingArgs),
    /// Histogram of off-diagonal Gram entries at one panel size.
    Hist(HistArgs),
    /// Joint, node-only and FLAG trained across panel sizes.
    Sweep(TableArgs),
    /// Graph regressor under three edge sets.
    Ablation(TableArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Cov {
    Identity,
    Rbf,
    Block,
}

#[derive(Args, Debug, Serialize)]
pub struct CovArgs {
    /// Number of spots.
    #[arg(long = "N", visible_alias = "n")]
    pub n: usize,
    /// Ground-truth spot covariance.
    #[arg(long, value_enum, default_value_t = Cov::Identity)]
    pub cov: Cov,
    #[arg(long, default_value_t = 150.0)]
    pub length_scale: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl CovArgs {
    fn a_star(&self) -> CliResult<Tensor> {
        let kind = match self.cov {
            Cov::Identity => CovKind::Identity,
            Cov::Rbf => CovKind::SpatialRbf,
            Cov::Block => CovKind::Block,
        };
        let spec = SyntheticSpec { n: self.n, cov_kind: kind, length_scale: self.length_scale, ..Default::default() };
        Ok(spot_covariance(&spec, &grid_coords(spec.n, spec.spacing))?)
    }
}

#[derive(Args, Debug, Serialize)]
pub struct ScalingArgs {
    #[command(flatten)]
    pub cov: CovArgs,
    /// Panel sizes, comma separated.
    #[arg(long = "G", visible_alias = "g", value_delimiter = ',', required = true)]
    pub g: Vec<usize>,
    /// Monte-Carlo trials per panel size (default 10000 for gram, 2000 for fisher).
    #[arg(long)]
    pub trials: Option<usize>,
    /// CSV path; stdout when absent.
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct HistArgs {
    #[command(flatten)]
    pub cov: CovArgs,
    #[arg(long = "G", visible_alias = "g")]
    pub g: usize,
    #[arg(long, default_value_t = 1000)]
    pub trials: usize,
    #[arg(long, default_value_t = -1.0, allow_hyphen_values = true)]
    pub lo: f64,
    #[arg(long, default_value_t = 1.0)]
    pub hi: f64,
    #[arg(long, default_value_t = 40)]
    pub bins: usize,
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TableArgs {
    /// Experiment configuration (TOML); built-in defaults when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn emit(out: Option<&Path>, text: &str) -> CliResult<()> {
    match out {
        Some(p) => write_file(p, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn preamble<T: Serialize>(name: &str, cfg: &T, seed: u64) -> String {
    format!("# experiment: {name}\n# config_hash: {}\n# seed: {seed}\n", config_hash(cfg))
}

fn scaling(args: &ScalingArgs, fisher: bool) -> CliResult<()> {
    let a = args.cov.a_star()?;
    let n = args.cov.n;
    let mut text;
    if fisher {
        let trials = args.trials.unwrap_or(2000);
        let r = fisher_scaling(n, &args.g, trials, &a, args.cov.seed)?;
        text = preamble("fisher", args, args.cov.seed);
        let _ = writeln!(text, "# trials: {trials}");
        if args.g.len() > 1 {
            let _ = writeln!(text, "# slope_loglog: {}", r.scaling.slope_loglog);
        }
        text.push_str("g,inv_lambda_min,lambda_max\n");
        for ((g, s), m) in r.scaling.g_values.iter().zip(&r.scaling.statistic).zip(&r.max_eigenvalue) {
            let _ = writeln!(text, "{g},{s},{m}");
        }
    } else {
        let trials = args.trials.unwrap_or(10_000);
        let r = gram_error_experiment(n, &args.g, trials, &a, args.cov.seed)?;
        text = preamble("gram", args, args.cov.seed);
        let _ = writeln!(text, "# trials: {trials}");
        if args.g.len() > 1 {
            let _ = writeln!(text, "# slope_loglog: {}\n# ci_95: {},{}", r.slope_loglog, r.ci_95.0, r.ci_95.1);
        }
        text.push_str("g,mean_sq_error,std_err\n");
        for ((g, s), e) in r.g_values.iter().zip(&r.statistic).zip(&r.std_err) {
            let _ = writeln!(text, "{g},{s},{e}");
        }
    }
    emit(args.out.as_deref(), &text)
}

fn hist(args: &HistArgs) -> CliResult<()> {
    let a = args.cov.a_star()?;
    let counts = offdiag_histogram(args.cov.n, args.g, args.trials, &a, args.cov.seed, (args.lo, args.hi, args.bins))?;
    let mut text = preamble("hist", args, args.cov.seed);
    text.push_str("bin_lo,bin_hi,count\n");
    let w = (args.hi - args.lo) / args.bins as f64;
    for (i, c) in counts.iter().enumerate() {
        let _ = writeln!(text, "{},{},{c}", args.lo + i as f64 * w, args.lo + (i + 1) as f64 * w);
    }
    emit(args.out.as_deref(), &text)
}

fn load_or_default<T: Default + for<'de> serde::Deserialize<'de>>(path: Option<&Path>) -> CliResult<T> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Failure::Io(format!("{}: {e}", p.display())))?;
            parse_toml(&text, p)
        }
        None => Ok(T::default()),
    }
}

fn sweep(args: &TableArgs) -> CliResult<()> {
    let cfg: SweepConfig = load_or_default(args.config.as_deref())?;
    let r = dimension_sweep(&cfg, |c| eprintln!("{} G={} pcc={} collapsed={}", c.method, c.genes, c.pcc, c.collapsed))?;
    let mut text = preamble("sweep", &cfg, cfg.seed);
    text.push_str(&r.to_csv());
    emit(args.out.as_deref(), &text)
}

fn ablation(args: &TableArgs) -> CliResult<()> {
    let cfg: AblationConfig = load_or_default(args.config.as_deref())?;
    let r = edge_ablation(&cfg)?;
    let mut text = preamble("ablation", &cfg, cfg.seed);
    text.push_str("edges,pcc\n");
    for (set, v) in &r.pcc {
        let _ = writeln!(text, "{},{v}", set.name());
    }
    emit(args.out.as_deref(), &text)
}

pub fn run(e: &Experiment) -> CliResult<()> {
    match e {
        Experiment::Gram(a) => scaling(a, false),
        Experiment::Fisher(a) => scaling(a, true),
        Experiment::Hist(a) => hist(a),
        Experiment::Sweep(a) => sweep(a),
        Experiment::Ablation(a) => ablation(a),
    }
}
