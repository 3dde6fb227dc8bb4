//! `flag sample` and `flag evaluate`.

use std::fmt::Write as _;
use std::path::PathBuf;

use clap::Args;
use flag_core::checkpoint::Checkpoint;
use flag_core::io::{encode_predictions, load_predictions, load_slide, Predictions, Provenance};
use flag_core::metrics::{evaluate, EvalOptions};
use flag_core::spatial::DEFAULT_KNN_K;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{at_path, write_file, CliResult, Failure};
use crate::train::{build_model, CheckpointMeta};

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Slide supplying coordinates and visual features.
    #[arg(long)]
    pub slide: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Integration steps; defaults to `sample.steps` of the training config.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn sample(args: &SampleArgs) -> CliResult<()> {
    let ck = at_path(&args.checkpoint, Checkpoint::load(&args.checkpoint))?;
    let meta = CheckpointMeta::from_checkpoint(&ck, &args.checkpoint)?;
    let cfg = &meta.config;
    let (model, mut store) = build_model(cfg, meta.gene_names.len(), meta.align_dim)?;
    store.load_from(&ck.params)?;
    let slide = at_path(&args.slide, load_slide(&args.slide))?;
    if slide.visual_dim() != cfg.cond_dim() {
        return Err(Failure::Usage(format!(
            "{}: visual features have width {} but the model expects {}",
            args.slide.display(),
            slide.visual_dim(),
            cfg.cond_dim()
        )));
    }
    let ce = slide.edge_condition(cfg.data.edge_sigma)?;
    let steps = args.steps.unwrap_or(cfg.sample.steps);
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let expr = model.sample(&store, &slide.visual, &ce.w, steps, &mut rng)?;
    let p = Predictions {
        slide_id: slide.slide_id.clone(),
        gene_names: meta.gene_names,
        expr,
        provenance: Provenance { model: meta.method.to_string(), seed: args.seed, steps, config_hash: ck.config_hash },
    };
    write_file(&args.out, &encode_predictions(&p)?)
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Predictions written by `sample`.
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground-truth slide.
    #[arg(long)]
    pub gt: PathBuf,
    /// Neighbours per spot for Moran's I.
    #[arg(long, default_value_t = DEFAULT_KNN_K)]
    pub knn_k: usize,
    /// Whitespace-separated integer domain label per spot; enables DEG overlap.
    #[arg(long)]
    pub domains: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "20,50")]
    pub deg_top_k: Vec<usize>,
    /// Report path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run_evaluate(args: &EvaluateArgs) -> CliResult<()> {
    let p = at_path(&args.pred, load_predictions(&args.pred))?;
    let gt = at_path(&args.gt, load_slide(&args.gt))?;
    let idx = p
        .gene_names
        .iter()
        .map(|g| {
            gt.gene_names
                .iter()
                .position(|n| n == g)
                .ok_or_else(|| Failure::Usage(format!("{}: predicted gene `{g}` is missing", args.gt.display())))
        })
        .collect::<CliResult<Vec<_>>>()?;
    let gt_expr = gt.select_genes(&idx)?.expr;
    if gt_expr.shape()[0] != p.expr.shape()[0] {
        return Err(Failure::Usage(format!(
            "predictions cover {} spots but the slide has {}",
            p.expr.shape()[0],
            gt_expr.shape()[0]
        )));
    }
    let domains = match &args.domains {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
            let labels = text
                .split_whitespace()
                .map(|t| t.parse::<usize>().map_err(|_| Failure::Io(format!("{}: bad label `{t}`", path.display()))))
                .collect::<CliResult<Vec<_>>>()?;
            Some(labels)
        }
        None => None,
    };
    let opts = EvalOptions { knn_k: args.knn_k, domains, deg_top_k: args.deg_top_k.clone() };
    let report = evaluate(&p.expr, &gt_expr, &gt.coords, &opts)?;
    let mut text = String::new();
    let _ = writeln!(text, "slide_id: {}", p.slide_id);
    let _ = writeln!(text, "model: {}", p.provenance.model);
    let _ = writeln!(text, "seed: {}", p.provenance.seed);
    let _ = writeln!(text, "config_hash: {}", p.provenance.config_hash);
    text.push_str(&report.to_text());
    match &args.out {
        Some(path) => write_file(path, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}
