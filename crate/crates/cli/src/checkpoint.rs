//! Text checkpoints for cluster and meta models.
//!
//! Parameters are written as decimal text with 17 significant digits, so the
//! read/write round trip is bit-exact in double precision. Writes go through
//! a temporary file in the same directory followed by a rename, leaving no
//! partially written checkpoint behind on interruption.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use umt_core::clustering::{Centroids, ClusterModel, PseudoLabels};
use umt_core::error::{Error, Result};
use umt_core::matrix::RealMatrix;
use umt_core::meta::MetaModel;
use umt_core::nn::{DenseLayer, EncoderParams, HeadParams};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Enough metadata to re-run the command that produced an artifact.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub revision: String,
    pub config_hash: String,
    pub seed: u64,
}

impl Provenance {
    pub fn new(config_hash: String, seed: u64) -> Provenance {
        Provenance {
            revision: env!("CARGO_PKG_VERSION").to_string(),
            config_hash,
            seed,
        }
    }
}

/// Writes `contents` atomically: temporary file in the target directory,
/// then rename over the destination.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("bad output path {}", path.display())))?;
    let mut tmp_name = file_name.to_owned();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn push_tensor(out: &mut String, name: &str, matrix: &RealMatrix) {
    let _ = writeln!(out, "tensor {name} {} {}", matrix.rows(), matrix.cols());
    for r in 0..matrix.rows() {
        let row = matrix
            .row(r)
            .iter()
            .map(|&v| format_f64(v))
            .collect::<Vec<_>>()
            .join(" ");
        out.push_str(&row);
        out.push('\n');
    }
}

fn push_vector(out: &mut String, name: &str, values: &[f64]) {
    let matrix = RealMatrix::new(1, values.len(), values.to_vec()).expect("vector shape");
    push_tensor(out, name, &matrix);
}

fn push_encoder(out: &mut String, encoder: &EncoderParams) {
    for (i, layer) in encoder.layers.iter().enumerate() {
        push_tensor(out, &format!("encoder.{i}.weight"), &layer.weight);
        push_vector(out, &format!("encoder.{i}.bias"), &layer.bias);
    }
}

fn push_head(out: &mut String, head: &HeadParams) {
    push_tensor(out, "head.weight", &head.weight);
    push_vector(out, "head.bias", &head.bias);
}

fn header(kind: &str, provenance: &Provenance) -> String {
    format!(
        "umt.checkpoint.v{CHECKPOINT_FORMAT_VERSION}\nkind = {kind}\nrevision = {}\nconfig_hash = {}\nseed = {}\n",
        provenance.revision, provenance.config_hash, provenance.seed
    )
}

/// Serializes a cluster model (encoder, head, centroids, pseudo-labels,
/// silhouette) with its provenance.
pub fn write_cluster_checkpoint(
    path: &Path,
    model: &ClusterModel,
    provenance: &Provenance,
) -> Result<()> {
    let mut out = header("cluster-model", provenance);
    let _ = writeln!(out, "k = {}", model.k);
    let _ = writeln!(out, "kappa = {}", format_f64(model.kappa));
    let labels = model
        .pseudo_labels
        .assignments()
        .iter()
        .map(|a| a.to_string())
        .collect::<Vec<_>>()
        .join(";");
    let _ = writeln!(out, "pseudo_labels = {labels}");
    push_tensor(&mut out, "centroids", model.centroids.matrix());
    push_encoder(&mut out, &model.theta);
    push_head(&mut out, &model.omega);
    write_atomic(path, &out)
}

/// Serializes a meta model (encoder plus two-way head) with its provenance.
pub fn write_meta_checkpoint(
    path: &Path,
    model: &MetaModel,
    provenance: &Provenance,
) -> Result<()> {
    let mut out = header("meta-model", provenance);
    push_encoder(&mut out, &model.encoder);
    push_head(&mut out, &model.head);
    write_atomic(path, &out)
}

struct ParsedCheckpoint {
    kind: String,
    provenance: Provenance,
    fields: BTreeMap<String, String>,
    tensors: BTreeMap<String, RealMatrix>,
}

fn parse_checkpoint(path: &Path) -> Result<ParsedCheckpoint> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate().peekable();

    let (_, magic) = lines
        .next()
        .ok_or_else(|| Error::parse(1, "empty checkpoint"))?;
    let version: u32 = magic
        .strip_prefix("umt.checkpoint.v")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::parse(1, format!("bad checkpoint header `{magic}`")))?;
    if version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::parse(
            1,
            format!("unsupported checkpoint version {version}"),
        ));
    }

    let mut fields = BTreeMap::new();
    let mut tensors = BTreeMap::new();
    while let Some((idx, line)) = lines.next() {
        let line_no = idx + 1;
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("tensor ") {
            let parts: Vec<&str> = rest.split_whitespace().collect();
            if parts.len() != 3 {
                return Err(Error::parse(line_no, "tensor header needs `name rows cols`"));
            }
            let name = parts[0].to_string();
            let rows: usize = parts[1]
                .parse()
                .map_err(|_| Error::parse(line_no, "bad tensor row count"))?;
            let cols: usize = parts[2]
                .parse()
                .map_err(|_| Error::parse(line_no, "bad tensor column count"))?;
            let mut values = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                let (ridx, row_line) = lines.next().ok_or_else(|| {
                    Error::parse(line_no, format!("tensor {name} truncated at row {r}"))
                })?;
                for token in row_line.split_whitespace() {
                    let v: f64 = token.parse().map_err(|_| {
                        Error::parse(ridx + 1, format!("bad tensor value `{token}`"))
                    })?;
                    values.push(v);
                }
            }
            if values.len() != rows * cols {
                return Err(Error::parse(
                    line_no,
                    format!(
                        "tensor {name} promised {} values, found {}",
                        rows * cols,
                        values.len()
                    ),
                ));
            }
            tensors.insert(name, RealMatrix::new(rows, cols, values)?);
        } else if let Some((key, value)) = line.split_once('=') {
            fields.insert(key.trim().to_string(), value.trim().to_string());
        } else {
            return Err(Error::parse(line_no, format!("unrecognized line `{line}`")));
        }
    }

    let take = |fields: &BTreeMap<String, String>, key: &str| -> Result<String> {
        fields
            .get(key)
            .cloned()
            .ok_or_else(|| Error::parse(1, format!("checkpoint missing `{key}`")))
    };
    let kind = take(&fields, "kind")?;
    let provenance = Provenance {
        revision: take(&fields, "revision")?,
        config_hash: take(&fields, "config_hash")?,
        seed: take(&fields, "seed")?
            .parse()
            .map_err(|_| Error::parse(1, "bad checkpoint seed"))?,
    };
    Ok(ParsedCheckpoint {
        kind,
        provenance,
        fields,
        tensors,
    })
}

fn take_tensor(tensors: &mut BTreeMap<String, RealMatrix>, name: &str) -> Result<RealMatrix> {
    tensors
        .remove(name)
        .ok_or_else(|| Error::parse(1, format!("checkpoint missing tensor `{name}`")))
}

fn read_encoder(tensors: &mut BTreeMap<String, RealMatrix>) -> Result<EncoderParams> {
    let mut layers = Vec::new();
    let mut i = 0;
    while tensors.contains_key(&format!("encoder.{i}.weight")) {
        let weight = take_tensor(tensors, &format!("encoder.{i}.weight"))?;
        let bias = take_tensor(tensors, &format!("encoder.{i}.bias"))?;
        layers.push(DenseLayer {
            weight,
            bias: bias.values().to_vec(),
        });
        i += 1;
    }
    Ok(EncoderParams { layers })
}

fn read_head(tensors: &mut BTreeMap<String, RealMatrix>) -> Result<HeadParams> {
    let weight = take_tensor(tensors, "head.weight")?;
    let bias = take_tensor(tensors, "head.bias")?;
    Ok(HeadParams {
        weight,
        bias: bias.values().to_vec(),
    })
}

/// Reads a checkpoint written by [`write_cluster_checkpoint`].
pub fn read_cluster_checkpoint(path: &Path) -> Result<(ClusterModel, Provenance)> {
    let mut parsed = parse_checkpoint(path)?;
    if parsed.kind != "cluster-model" {
        return Err(Error::parse(
            1,
            format!("expected a cluster-model checkpoint, found `{}`", parsed.kind),
        ));
    }
    let k: usize = parsed
        .fields
        .get("k")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::parse(1, "checkpoint missing k"))?;
    let kappa: f64 = parsed
        .fields
        .get("kappa")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::parse(1, "checkpoint missing kappa"))?;
    let labels: Vec<usize> = parsed
        .fields
        .get("pseudo_labels")
        .ok_or_else(|| Error::parse(1, "checkpoint missing pseudo_labels"))?
        .split(';')
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse()
                .map_err(|_| Error::parse(1, format!("bad pseudo-label `{s}`")))
        })
        .collect::<Result<_>>()?;

    let centroids = Centroids::new(take_tensor(&mut parsed.tensors, "centroids")?)?;
    let theta = read_encoder(&mut parsed.tensors)?;
    let omega = read_head(&mut parsed.tensors)?;
    Ok((
        ClusterModel {
            theta,
            omega,
            centroids,
            pseudo_labels: PseudoLabels::new(labels, k)?,
            kappa,
            k,
        },
        parsed.provenance,
    ))
}

/// Reads a checkpoint written by [`write_meta_checkpoint`].
pub fn read_meta_checkpoint(path: &Path) -> Result<(MetaModel, Provenance)> {
    let mut parsed = parse_checkpoint(path)?;
    if parsed.kind != "meta-model" {
        return Err(Error::parse(
            1,
            format!("expected a meta-model checkpoint, found `{}`", parsed.kind),
        ));
    }
    let encoder = read_encoder(&mut parsed.tensors)?;
    let head = read_head(&mut parsed.tensors)?;
    Ok((MetaModel::new(encoder, head)?, parsed.provenance))
}
