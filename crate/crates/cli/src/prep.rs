//! `flag select-genes` and `flag synth`.

use std::fmt::Write as _;
use std::path::PathBuf;

use clap::Args;
use flag_core::data::{hmhvg_select, log1p_normalize, synth_slide, GenePanel, SyntheticSpec};
use flag_core::io::{encode_slide, load_slide};
use flag_core::Tensor;
use serde::Serialize;

use crate::config::{config_hash, parse_toml};
use crate::error::{at_path, create_dir, write_file, CliResult, Failure};
use crate::experiment::Cov;

#[derive(Args, Debug, Serialize)]
pub struct SelectGenesArgs {
    /// Training slides; their spots are pooled.
    #[arg(long, num_args = 1.., required = true)]
    pub slides: Vec<PathBuf>,
    /// Panel size.
    #[arg(long)]
    pub target: usize,
    /// Apply `log1p` to raw counts before ranking.
    #[arg(long)]
    pub log1p: bool,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Serialize)]
struct PanelFile<'a> {
    config_hash: String,
    #[serde(flatten)]
    panel: &'a GenePanel,
}

pub fn select_genes(args: &SelectGenesArgs) -> CliResult<()> {
    let mut names: Option<Vec<String>> = None;
    let mut rows = Vec::new();
    let mut n_rows = 0;
    for p in &args.slides {
        let s = at_path(p, load_slide(p))?;
        match &names {
            Some(n) if *n != s.gene_names => {
                return Err(Failure::Usage(format!("{}: gene names differ from the first slide", p.display())))
            }
            Some(_) => {}
            None => names = Some(s.gene_names.clone()),
        }
        n_rows += s.n_spots();
        rows.extend_from_slice(s.expr.data());
    }
    let names = names.expect("at least one slide");
    let mut x = Tensor::new(vec![n_rows, names.len()], rows)?;
    if args.log1p {
        x = log1p_normalize(&x)?;
    }
    let panel = hmhvg_select(&x, &names, args.target)?;
    let file = PanelFile { config_hash: config_hash(args), panel: &panel };
    let mut json = serde_json::to_string_pretty(&file).expect("panel serializes");
    json.push('\n');
    write_file(&args.out, json.as_bytes())
}

#[derive(Args, Debug, Serialize)]
pub struct SynthArgs {
    /// Full spec (TOML); the flags below are ignored when given.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "N", visible_alias = "n", default_value_t = 64)]
    pub n: usize,
    #[arg(long = "G", visible_alias = "g", default_value_t = 50)]
    pub g: usize,
    #[arg(long, value_enum, default_value_t = Cov::Rbf)]
    pub cov: Cov,
    #[arg(long, default_value_t = 150.0)]
    pub length_scale: f64,
    #[arg(long, default_value_t = 16)]
    pub visual_dim: usize,
    #[arg(long, default_value_t = 0.1)]
    pub visual_noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of slides; slide `i` uses seed `seed + i`.
    #[arg(long, default_value_t = 1)]
    pub slides: u64,
    /// Output directory.
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

pub fn synth(args: &SynthArgs) -> CliResult<()> {
    let spec = match &args.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Failure::Io(format!("{}: {e}", p.display())))?;
            parse_toml(&text, p)?
        }
        None => SyntheticSpec {
            n: args.n,
            g: args.g,
            cov_kind: match args.cov {
                Cov::Identity => flag_core::data::CovKind::Identity,
                Cov::Rbf => flag_core::data::CovKind::SpatialRbf,
                Cov::Block => flag_core::data::CovKind::Block,
            },
            length_scale: args.length_scale,
            seed: args.seed,
            visual_dim: args.visual_dim,
            visual_noise: args.visual_noise,
            ..Default::default()
        },
    };
    if args.slides == 0 {
        return Err(Failure::Usage("--slides must be at least 1".into()));
    }
    create_dir(&args.out)?;
    let hash = config_hash(&(&spec, args.slides));
    let mut a_star = None;
    for i in 0..args.slides {
        let s = SyntheticSpec { seed: spec.seed + i, ..spec.clone() };
        let (slide, a) = synth_slide(&s)?;
        write_file(&args.out.join(format!("synth-{i:03}.slide")), &encode_slide(&slide))?;
        a_star = Some(a);
    }
    let a = a_star.expect("at least one slide");
    let n = spec.n;
    let mut csv = format!("# config_hash: {hash}\n# seed: {}\n", spec.seed);
    for i in 0..n {
        let row: Vec<String> = a.data()[i * n..(i + 1) * n].iter().map(|v| v.to_string()).collect();
        let _ = writeln!(csv, "{}", row.join(","));
    }
    write_file(&args.out.join("a_star.csv"), csv.as_bytes())?;
    let manifest = serde_json::json!({ "config_hash": hash, "spec": spec, "slides": args.slides });
    let mut json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    json.push('\n');
    write_file(&args.out.join("synth.json"), json.as_bytes())
}
