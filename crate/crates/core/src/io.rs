//! On-disk formats for slides, predictions and gene embeddings.
//!
//! Slide and prediction files share one layout: UTF-8 header lines of the
//! form `key: <json value>`, a line `---`, then little-endian `f32` blocks in
//! a fixed order. Gene embeddings are a bare `f32` matrix with a JSON
//! sidecar next to it.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{FlagError, Result};
use crate::flag::GfmEmbeddings;
use crate::spatial::SlideSample;
use crate::tensor::Tensor;

pub const SLIDE_FORMAT: &str = "flag-slide/1";
pub const PREDICTION_FORMAT: &str = "flag-predictions/1";
pub(crate) const SEPARATOR: &[u8] = b"---\n";

/// Ordered `key: json` header.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Header {
    entries: BTreeMap<String, Value>,
}

impl Header {
    pub fn set(&mut self, key: &str, value: impl Serialize) {
        let v = serde_json::to_value(value).expect("header values serialize");
        self.entries.insert(key.to_string(), v);
    }

    pub fn get<T: DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self.entries.get(key).ok_or_else(|| FlagError::parse(key, "missing header field"))?;
        serde_json::from_value(v.clone()).map_err(|e| FlagError::parse(key, e.to_string()))
    }

    pub(crate) fn render(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}: {v}\n")).collect()
    }

    pub(crate) fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once(": ")
                .ok_or_else(|| FlagError::parse("header", format!("line {} is not `key: value`", lineno + 1)))?;
            let value: Value = serde_json::from_str(v).map_err(|e| FlagError::parse(k, e.to_string()))?;
            if entries.insert(k.to_string(), value).is_some() {
                return Err(FlagError::parse(k, "duplicate header field"));
            }
        }
        Ok(Self { entries })
    }
}

fn encode(header: &Header, blocks: &[&Tensor]) -> Vec<u8> {
    let mut out = header.render().into_bytes();
    out.extend_from_slice(SEPARATOR);
    for b in blocks {
        for &v in b.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

/// Splits a file into its header and binary payload.
pub(crate) fn decode(bytes: &[u8]) -> Result<(Header, &[u8])> {
    let split = bytes
        .windows(SEPARATOR.len())
        .enumerate()
        .find(|(i, w)| *w == SEPARATOR && (*i == 0 || bytes[i - 1] == b'\n'))
        .map(|(i, _)| i)
        .ok_or_else(|| FlagError::parse("header", "missing `---` separator"))?;
    let text = std::str::from_utf8(&bytes[..split]).map_err(|_| FlagError::parse("header", "not valid UTF-8"))?;
    Ok((Header::parse(text)?, &bytes[split + SEPARATOR.len()..]))
}

/// Reads consecutive `f32` blocks of the given shapes; names label errors.
fn read_blocks(mut payload: &[u8], blocks: &[(&str, Vec<usize>)]) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(blocks.len());
    for (name, shape) in blocks {
        let n: usize = shape.iter().product();
        let need = n * 4;
        if payload.len() < need {
            return Err(FlagError::parse(
                *name,
                format!("truncated payload: need {need} bytes, {} left", payload.len()),
            ));
        }
        let data = payload[..need]
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        out.push(Tensor::new(shape.clone(), data)?);
        payload = &payload[need..];
    }
    if !payload.is_empty() {
        return Err(FlagError::parse("payload", format!("{} trailing bytes", payload.len())));
    }
    Ok(out)
}

fn check_format(h: &Header, want: &str) -> Result<()> {
    let got: String = h.get("format")?;
    if got != want {
        return Err(FlagError::parse("format", format!("expected `{want}`, got `{got}`")));
    }
    Ok(())
}

fn positive(h: &Header, key: &str) -> Result<usize> {
    let v: usize = h.get(key)?;
    if v == 0 {
        return Err(FlagError::parse(key, "must be positive"));
    }
    Ok(v)
}

fn gene_names(h: &Header, n_genes: usize) -> Result<Vec<String>> {
    let names: Vec<String> = h.get("gene_names")?;
    if names.len() != n_genes {
        return Err(FlagError::parse("gene_names", format!("{} names but n_genes = {n_genes}", names.len())));
    }
    Ok(names)
}

pub fn encode_slide(slide: &SlideSample) -> Vec<u8> {
    let mut h = Header::default();
    h.set("format", SLIDE_FORMAT);
    h.set("slide_id", &slide.slide_id);
    h.set("n_spots", slide.n_spots());
    h.set("n_genes", slide.n_genes());
    h.set("visual_dim", slide.visual_dim());
    h.set("gene_names", &slide.gene_names);
    encode(&h, &[&slide.coords, &slide.visual, &slide.expr])
}

pub fn decode_slide(bytes: &[u8]) -> Result<SlideSample> {
    let (h, payload) = decode(bytes)?;
    check_format(&h, SLIDE_FORMAT)?;
    let n = positive(&h, "n_spots")?;
    let g = positive(&h, "n_genes")?;
    let dv = positive(&h, "visual_dim")?;
    let names = gene_names(&h, g)?;
    let slide_id: String = h.get("slide_id")?;
    let mut b = read_blocks(payload, &[("coords", vec![n, 2]), ("visual", vec![n, dv]), ("expr", vec![n, g])])?;
    let expr = b.pop().expect("three blocks");
    let visual = b.pop().expect("three blocks");
    let coords = b.pop().expect("three blocks");
    SlideSample::new(coords, visual, expr, names, slide_id).map_err(|e| FlagError::parse("slide", e.to_string()))
}

pub fn save_slide(path: &Path, slide: &SlideSample) -> Result<()> {
    write_atomic(path, &encode_slide(slide))
}

pub fn load_slide(path: &Path) -> Result<SlideSample> {
    decode_slide(&fs::read(path)?)
}

/// Where a prediction came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub model: String,
    pub seed: u64,
    pub steps: usize,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    pub slide_id: String,
    pub gene_names: Vec<String>,
    /// `[N, G]`.
    pub expr: Tensor,
    pub provenance: Provenance,
}

pub fn encode_predictions(p: &Predictions) -> Result<Vec<u8>> {
    if p.expr.ndim() != 2 || p.expr.shape()[1] != p.gene_names.len() {
        return Err(FlagError::Contract(format!(
            "predictions {:?} do not match {} gene names",
            p.expr.shape(),
            p.gene_names.len()
        )));
    }
    let mut h = Header::default();
    h.set("format", PREDICTION_FORMAT);
    h.set("slide_id", &p.slide_id);
    h.set("n_spots", p.expr.shape()[0]);
    h.set("n_genes", p.expr.shape()[1]);
    h.set("gene_names", &p.gene_names);
    h.set("model", &p.provenance.model);
    h.set("seed", p.provenance.seed);
    h.set("steps", p.provenance.steps);
    h.set("config_hash", &p.provenance.config_hash);
    Ok(encode(&h, &[&p.expr]))
}

pub fn decode_predictions(bytes: &[u8]) -> Result<Predictions> {
    let (h, payload) = decode(bytes)?;
    check_format(&h, PREDICTION_FORMAT)?;
    let n = positive(&h, "n_spots")?;
    let g = positive(&h, "n_genes")?;
    let gene_names = gene_names(&h, g)?;
    let expr = read_blocks(payload, &[("expr", vec![n, g])])?.pop().expect("one block");
    Ok(Predictions {
        slide_id: h.get("slide_id")?,
        gene_names,
        expr,
        provenance: Provenance {
            model: h.get("model")?,
            seed: h.get("seed")?,
            steps: h.get("steps")?,
            config_hash: h.get("config_hash")?,
        },
    })
}

pub fn save_predictions(path: &Path, p: &Predictions) -> Result<()> {
    write_atomic(path, &encode_predictions(p)?)
}

pub fn load_predictions(path: &Path) -> Result<Predictions> {
    decode_predictions(&fs::read(path)?)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GfmSidecar {
    n_genes: usize,
    d_e: usize,
    gene_names: Vec<String>,
    source_tag: String,
}

/// Sidecar path for an embedding matrix: `<path>.json`.
pub fn gfm_sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn save_gfm(path: &Path, e: &GfmEmbeddings) -> Result<()> {
    let side = GfmSidecar {
        n_genes: e.n_genes(),
        d_e: e.dim(),
        gene_names: e.gene_names.clone(),
        source_tag: e.source_tag.clone(),
    };
    let bytes: Vec<u8> = e.f.data().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    write_atomic(path, &bytes)?;
    let json = serde_json::to_string_pretty(&side).map_err(|e| FlagError::parse("sidecar", e.to_string()))?;
    write_atomic(&gfm_sidecar_path(path), json.as_bytes())
}

/// Loads an embedding matrix; all-zero rows are masked.
pub fn load_gfm(path: &Path) -> Result<GfmEmbeddings> {
    let text = fs::read_to_string(gfm_sidecar_path(path))?;
    let side: GfmSidecar = serde_json::from_str(&text).map_err(|e| FlagError::parse("sidecar", e.to_string()))?;
    if side.d_e == 0 {
        return Err(FlagError::parse("d_e", "must be positive"));
    }
    if side.gene_names.len() != side.n_genes {
        return Err(FlagError::parse(
            "gene_names",
            format!("{} names but n_genes = {}", side.gene_names.len(), side.n_genes),
        ));
    }
    let bytes = fs::read(path)?;
    let f = read_blocks(&bytes, &[("embeddings", vec![side.n_genes, side.d_e])])?.pop().expect("one block");
    GfmEmbeddings::from_matrix(f, side.gene_names, side.source_tag)
}

/// Writes via a temporary sibling and rename so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn slide() -> SlideSample {
        SlideSample::new(
            Tensor::new(vec![2, 2], vec![0.0, 0.0, 100.0, 0.5]).unwrap(),
            Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.25, 0.0]).unwrap(),
            Tensor::new(vec![2, 2], vec![0.5, 1.5, 2.5, 3.5]).unwrap(),
            vec!["A".into(), "B".into()],
            "s1".into(),
        )
        .unwrap()
    }

    fn parse_field(r: Result<SlideSample>) -> String {
        match r {
            Err(FlagError::Parse { field, .. }) => field,
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn slide_round_trip() {
        let s = slide();
        assert_eq!(decode_slide(&encode_slide(&s)).unwrap(), s);
    }

    #[test]
    fn slide_errors_name_the_field() {
        let bytes = encode_slide(&slide());
        let text = String::from_utf8_lossy(&bytes).to_string();
        let swap = |from: &str, to: &str| {
            let i = bytes.windows(from.len()).position(|w| w == from.as_bytes()).unwrap();
            let mut b = bytes[..i].to_vec();
            b.extend_from_slice(to.as_bytes());
            b.extend_from_slice(&bytes[i + from.len()..]);
            b
        };
        assert!(text.contains("n_genes: 2"));
        assert_eq!(parse_field(decode_slide(&swap("n_genes: 2", "n_genes: 3"))), "gene_names");
        assert_eq!(parse_field(decode_slide(&swap("n_spots: 2", "n_spots: 0"))), "n_spots");
        assert_eq!(parse_field(decode_slide(&bytes[..bytes.len() - 4])), "expr");
        assert_eq!(parse_field(decode_slide(&swap("visual_dim: 3\n", ""))), "visual_dim");
        assert_eq!(parse_field(decode_slide(b"format: \"flag-slide/1\"\n")), "header");
        let mut extra = bytes.clone();
        extra.push(0);
        assert_eq!(parse_field(decode_slide(&extra)), "payload");
    }

    #[test]
    fn predictions_round_trip() {
        let p = Predictions {
            slide_id: "s".into(),
            gene_names: vec!["a".into()],
            expr: Tensor::new(vec![3, 1], vec![1.0, -2.0, 0.125]).unwrap(),
            provenance: Provenance { model: "flag".into(), seed: 9, steps: 100, config_hash: "ab".into() },
        };
        assert_eq!(decode_predictions(&encode_predictions(&p).unwrap()).unwrap(), p);
    }
}
