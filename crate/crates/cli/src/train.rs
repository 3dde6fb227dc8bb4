//! `flag train`: fits one model on the configured slides, writing a
//! per-step log and checkpoints.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::Args;
use flag_core::checkpoint::Checkpoint;
use flag_core::data::GenePanel;
use flag_core::io::{load_gfm, load_slide};
use flag_core::runner::train_steps;
use flag_core::{AnyModel, GfmEmbeddings, Method, ParamStore, SlideSample, StepReport, Tensor, TrainExample, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{commented_toml, config_hash, resolve, RunConfig};
use crate::error::{at_path, create_dir, write_file, CliResult, Failure};

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `method`.
    #[arg(long)]
    pub mode: Option<Method>,
    /// Overrides `train.steps`.
    #[arg(long)]
    pub steps: Option<u64>,
    /// Overrides `optimizer.lr`.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Overrides `seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for the log and checkpoints.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Resume even if the checkpoint was written under another config.
    #[arg(long)]
    pub force: bool,
}

/// What a checkpoint needs to rebuild its model.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub method: Method,
    pub gene_names: Vec<String>,
    pub align_dim: Option<usize>,
    pub config: RunConfig,
}

impl CheckpointMeta {
    pub fn from_checkpoint(ck: &Checkpoint, path: &Path) -> CliResult<Self> {
        serde_json::from_value(ck.meta.clone())
            .map_err(|e| Failure::Io(format!("{}: checkpoint metadata: {e}", path.display())))
    }
}

/// Model parameters initialized from the config seed.
pub fn build_model(cfg: &RunConfig, genes: usize, align_dim: Option<usize>) -> CliResult<(AnyModel, ParamStore)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    let model = AnyModel::build(cfg.method, &cfg.joint, &cfg.flag, genes, align_dim, &mut store, &mut rng)?;
    Ok((model, store))
}

pub fn checkpoint_name(step: u64) -> String {
    format!("ckpt-{step:06}.ckpt")
}

pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const TRAIN_LOG: &str = "train.log";

fn load_panel(path: &Path) -> CliResult<GenePanel> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
}

fn load_slides(cfg: &RunConfig, base: &Path) -> CliResult<Vec<SlideSample>> {
    let panel = cfg.data.panel.as_ref().map(|p| load_panel(&resolve(base, p))).transpose()?;
    let mut slides = Vec::new();
    for p in &cfg.data.train {
        let path = resolve(base, p);
        let mut slide = at_path(&path, load_slide(&path))?;
        if let Some(panel) = &panel {
            let idx = panel
                .names
                .iter()
                .map(|g| {
                    slide.gene_names.iter().position(|n| n == g).ok_or_else(|| {
                        Failure::Usage(format!("{}: panel gene `{g}` is missing", path.display()))
                    })
                })
                .collect::<CliResult<Vec<_>>>()?;
            slide = slide.select_genes(&idx)?;
        }
        if let Some(first) = slides.first() {
            let first: &SlideSample = first;
            if first.gene_names != slide.gene_names {
                return Err(Failure::Usage(format!("{}: gene names differ from the first slide", path.display())));
            }
        }
        if slide.visual_dim() != cfg.cond_dim() {
            return Err(Failure::Usage(format!(
                "{}: visual features have width {} but the backbone cond_dim is {}",
                path.display(),
                slide.visual_dim(),
                cfg.cond_dim()
            )));
        }
        slides.push(slide);
    }
    Ok(slides)
}

/// Embedding rows in slide gene order; genes the model lacks are masked.
fn load_embeddings(path: &Path, genes: &[String]) -> CliResult<GfmEmbeddings> {
    let all = at_path(path, load_gfm(path))?;
    let d = all.dim();
    let mut data = Vec::with_capacity(genes.len() * d);
    let mut valid = Vec::with_capacity(genes.len());
    for g in genes {
        match all.gene_names.iter().position(|n| n == g) {
            Some(i) => {
                data.extend_from_slice(&all.f.data()[i * d..(i + 1) * d]);
                valid.push(all.valid[i]);
            }
            None => {
                data.extend(std::iter::repeat(0.0).take(d));
                valid.push(false);
            }
        }
    }
    Ok(GfmEmbeddings::new(Tensor::new(vec![genes.len(), d], data)?, valid, genes.to_vec(), all.source_tag)?)
}

fn log_line(step: u64, r: &StepReport) -> String {
    let mut s = format!("step={step} total={}", r.total);
    for (k, v) in &r.terms {
        let _ = write!(s, " {k}={v}");
    }
    s
}

pub fn run(args: &TrainArgs) -> CliResult<()> {
    let (mut cfg, base) = RunConfig::load(&args.config)?;
    if let Some(m) = args.mode {
        cfg.method = m;
    }
    if let Some(s) = args.steps {
        cfg.train.steps = s;
    }
    if let Some(lr) = args.lr {
        cfg.optimizer.lr = lr;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let hash = config_hash(&cfg);

    let slides = load_slides(&cfg, &base)?;
    let genes = slides[0].gene_names.clone();
    let gfm = match (&cfg.data.gfm, cfg.method) {
        (Some(p), Method::Flag) => Some(load_embeddings(&resolve(&base, p), &genes)?),
        _ => None,
    };
    let align_dim = gfm.as_ref().map(GfmEmbeddings::dim);
    let examples = slides
        .iter()
        .map(|s| TrainExample::from_slide(s, &s.edge_condition(cfg.data.edge_sigma)?))
        .collect::<flag_core::Result<Vec<_>>>()?;

    let (model, store) = build_model(&cfg, genes.len(), align_dim)?;
    let mut trainer = Trainer::new(store, cfg.optimizer.clone(), cfg.seed.wrapping_add(1));
    let meta = CheckpointMeta { method: cfg.method, gene_names: genes.clone(), align_dim, config: cfg.clone() };
    let meta = serde_json::to_value(&meta).expect("metadata serializes");

    let mut log = String::new();
    let _ = writeln!(log, "# flag train");
    let _ = writeln!(log, "config_hash: {hash}");
    let _ = writeln!(log, "seed: {}", cfg.seed);
    let _ = writeln!(log, "method: {}", cfg.method);
    let _ = writeln!(log, "slides: {}", slides.len());
    let _ = writeln!(log, "genes: {}", genes.len());
    let _ = writeln!(log, "parameters: {}", trainer.store.num_scalars());
    if let Some(path) = &args.resume {
        let ck = at_path(path, Checkpoint::load(path))?;
        ck.check_config(&hash, args.force)?;
        let old = CheckpointMeta::from_checkpoint(&ck, path)?;
        if old.method != cfg.method || old.gene_names != genes || old.align_dim != align_dim {
            return Err(Failure::Usage(format!("{}: checkpoint holds a different model or gene panel", path.display())));
        }
        ck.restore_into(&mut trainer)?;
        let _ = writeln!(log, "resumed_from: {} at step {}", path.display(), ck.step);
    }
    let _ = writeln!(log, "# configuration");
    log.push_str(&commented_toml(&cfg));

    create_dir(&args.out)?;
    let save = |trainer: &Trainer, name: &str| -> CliResult<()> {
        let ck = Checkpoint::from_trainer(trainer, &hash, cfg.train.checkpoint_dtype, meta.clone());
        write_file(&args.out.join(name), &ck.encode())
    };
    let log_path = args.out.join(TRAIN_LOG);
    if trainer.step_count() == 0 {
        save(&trainer, &checkpoint_name(0))?;
    }
    let mut last: Option<(u64, f64)> = None;
    while trainer.step_count() < cfg.train.steps {
        let mut line = String::new();
        let r = train_steps(&model, &mut trainer, &examples, gfm.as_ref(), 1, |k, r| {
            line = log_line(k, r);
            last = Some((k, r.total));
        });
        if let Err(e) = r {
            let failure = Failure::from(e);
            if let Failure::Numeric(msg) = &failure {
                let detail = match last {
                    Some((k, v)) => format!("{msg}; last finite loss {v} at step {k}"),
                    None => format!("{msg}; no step completed"),
                };
                let _ = writeln!(log, "failed: {detail}");
                write_file(&log_path, log.as_bytes())?;
                return Err(Failure::Numeric(detail));
            }
            return Err(failure);
        }
        let step = trainer.step_count();
        log.push_str(&line);
        log.push('\n');
        if cfg.train.log_every > 0 && step % cfg.train.log_every == 0 {
            eprintln!("{line}");
        }
        if cfg.train.checkpoint_every > 0 && step % cfg.train.checkpoint_every == 0 {
            save(&trainer, &checkpoint_name(step))?;
        }
    }
    save(&trainer, LAST_CHECKPOINT)?;
    write_file(&log_path, log.as_bytes())
}
