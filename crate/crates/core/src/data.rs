//! Synthetic dataset generation, downstream labelling, group-wise splitting,
//! and the text dataset format.
//!
//! Samples are Gaussian blobs standing in for per-subject feature vectors.
//! Each synthetic subject (group) contributes two samples, and splits are
//! assigned per group so no subject spans train/val/test. The generator
//! ground truth (`hidden_class`) is only reachable through an explicit
//! accessor; training code consumes feature matrices and never sees it.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::matrix::RealMatrix;

pub const DATASET_FORMAT_VERSION: u32 = 1;

/// Which partition a sample belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One data point: a feature vector plus bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    features: Vec<f64>,
    group_id: u32,
    hidden_class: usize,
    y: bool,
    split: Option<Split>,
}

impl Sample {
    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn group_id(&self) -> u32 {
        self.group_id
    }

    /// Generator ground truth. Evaluation harnesses and tests only; training
    /// operations take feature matrices and cannot reach this field.
    pub fn hidden_class(&self) -> usize {
        self.hidden_class
    }

    pub fn y(&self) -> bool {
        self.y
    }

    pub fn split(&self) -> Option<Split> {
        self.split
    }
}

/// Counts and parameters describing a dataset file.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub sample_count: usize,
    pub d_in: usize,
    pub hidden_class_count: usize,
    pub split_fractions: (f64, f64, f64),
    pub generator_seed: u64,
}

/// An in-memory dataset with its manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    manifest: DatasetManifest,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn d_in(&self) -> usize {
        self.manifest.d_in
    }

    /// Indices of all samples tagged with `split`, in dataset order.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.split == Some(split))
            .map(|(i, _)| i)
            .collect()
    }

    /// Feature rows for the given sample indices. This is the training-facing
    /// view of the data: labels and generator fields stay behind.
    pub fn feature_matrix(&self, indices: &[usize]) -> RealMatrix {
        let rows: Vec<Vec<f64>> = indices
            .iter()
            .map(|&i| self.samples[i].features.clone())
            .collect();
        RealMatrix::from_rows(&rows).expect("samples share d_in")
    }

    /// Downstream labels for the given sample indices.
    pub fn labels(&self, indices: &[usize]) -> Vec<bool> {
        indices.iter().map(|&i| self.samples[i].y).collect()
    }
}

/// Seeded standard-normal source (Box-Muller over the ChaCha stream).
pub(crate) struct NormalSource {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl NormalSource {
    pub(crate) fn new(rng: ChaCha8Rng) -> NormalSource {
        NormalSource { rng, spare: None }
    }

    pub(crate) fn next(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1: f64 = 1.0 - self.rng.gen::<f64>();
        let u2: f64 = self.rng.gen();
        let r = (-2.0 * u1.ln()).sqrt();
        let angle = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * angle.sin());
        r * angle.cos()
    }
}

/// Generates `G` Gaussian blobs of `per_class` samples each.
///
/// Class means are drawn from a standard normal and rescaled so the minimum
/// pairwise distance equals `separation`; samples add isotropic noise with
/// the given standard deviation. Group ids pair samples two by two (each
/// synthetic subject contributes two samples). Splits and downstream labels
/// start unassigned.
pub fn generate_blobs(
    g: usize,
    per_class: usize,
    d_in: usize,
    separation: f64,
    noise: f64,
    seed: u64,
) -> Result<Dataset> {
    if g < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 hidden classes, got {g}"
        )));
    }
    if per_class == 0 || d_in == 0 {
        return Err(Error::InvalidArgument(
            "per_class and d_in must be positive".into(),
        ));
    }
    if separation <= 0.0 || separation.is_nan() {
        return Err(Error::InvalidArgument(format!(
            "separation must be positive, got {separation}"
        )));
    }
    if noise < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "noise must be nonnegative, got {noise}"
        )));
    }

    let mut normals = NormalSource::new(ChaCha8Rng::seed_from_u64(seed));
    let mut means: Vec<Vec<f64>> = (0..g)
        .map(|_| (0..d_in).map(|_| normals.next()).collect())
        .collect();

    let mut min_dist = f64::INFINITY;
    for i in 0..g {
        for j in (i + 1)..g {
            min_dist = min_dist.min(RealMatrix::squared_distance(&means[i], &means[j]).sqrt());
        }
    }
    if min_dist <= 0.0 || min_dist.is_nan() {
        return Err(Error::InvalidArgument(
            "degenerate blob means: two classes coincide".into(),
        ));
    }
    let scale = separation / min_dist;
    for mean in &mut means {
        for v in mean.iter_mut() {
            *v *= scale;
        }
    }

    let n = g * per_class;
    let mut samples = Vec::with_capacity(n);
    for (class, mean) in means.iter().enumerate() {
        for _ in 0..per_class {
            let features = mean.iter().map(|&m| m + noise * normals.next()).collect();
            samples.push(Sample {
                features,
                group_id: 0,
                hidden_class: class,
                y: false,
                split: None,
            });
        }
    }

    // Pair samples into groups at random; pairs may cross hidden classes,
    // like a subject whose two scans carry different labels.
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    order.shuffle(&mut rng);
    for (pair, chunk) in order.chunks(2).enumerate() {
        for &idx in chunk {
            samples[idx].group_id = pair as u32;
        }
    }

    Ok(Dataset {
        samples,
        manifest: DatasetManifest {
            format_version: DATASET_FORMAT_VERSION,
            sample_count: n,
            d_in,
            hidden_class_count: g,
            split_fractions: (0.0, 0.0, 0.0),
            generator_seed: seed,
        },
    })
}

/// Marks samples positive when their hidden class is in `positive_classes`.
/// The set must be a nonempty proper subset of the hidden classes.
pub fn assign_downstream_labels(
    mut dataset: Dataset,
    positive_classes: &BTreeSet<usize>,
) -> Result<Dataset> {
    let g = dataset.manifest.hidden_class_count;
    if positive_classes.is_empty() {
        return Err(Error::InvalidArgument("positive class set is empty".into()));
    }
    if positive_classes.len() >= g {
        return Err(Error::InvalidArgument(
            "positive class set must be a proper subset of the hidden classes".into(),
        ));
    }
    if let Some(&bad) = positive_classes.iter().find(|&&c| c >= g) {
        return Err(Error::InvalidArgument(format!(
            "positive class {bad} out of range for {g} hidden classes"
        )));
    }
    for sample in &mut dataset.samples {
        sample.y = positive_classes.contains(&sample.hidden_class);
    }
    Ok(dataset)
}

/// Partitions groups (not samples) into train/val/test by the given
/// fractions, seeded. Every sample of a group lands in the same split.
pub fn split_groupwise(
    mut dataset: Dataset,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<Dataset> {
    let (ft, fv, fe) = fractions;
    let all_positive = ft > 0.0 && fv > 0.0 && fe > 0.0;
    if !all_positive {
        return Err(Error::InvalidArgument(format!(
            "split fractions must all be positive, got ({ft}, {fv}, {fe})"
        )));
    }
    if (ft + fv + fe - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split fractions must sum to 1, got {}",
            ft + fv + fe
        )));
    }

    let mut groups: Vec<u32> = Vec::new();
    for sample in &dataset.samples {
        if !groups.contains(&sample.group_id) {
            groups.push(sample.group_id);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    groups.shuffle(&mut rng);

    let counts = apportion(groups.len(), &[ft, fv, fe]);
    if counts.contains(&0) {
        return Err(Error::InvalidArgument(format!(
            "split of {} groups by ({ft}, {fv}, {fe}) leaves an empty split",
            groups.len()
        )));
    }

    let split_of = |gid: u32| -> Split {
        let pos = groups.iter().position(|&g| g == gid).expect("known group");
        if pos < counts[0] {
            Split::Train
        } else if pos < counts[0] + counts[1] {
            Split::Val
        } else {
            Split::Test
        }
    };
    for sample in &mut dataset.samples {
        sample.split = Some(split_of(sample.group_id));
    }
    dataset.manifest.split_fractions = fractions;
    Ok(dataset)
}

/// Largest-remainder apportionment of `total` into integer counts.
fn apportion(total: usize, fractions: &[f64]) -> Vec<usize> {
    let raw: Vec<f64> = fractions.iter().map(|f| f * total as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut remainders: Vec<(usize, f64)> = raw
        .iter()
        .enumerate()
        .map(|(i, r)| (i, r - r.floor()))
        .collect();
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let assigned: usize = counts.iter().sum();
    for k in 0..total.saturating_sub(assigned) {
        counts[remainders[k % remainders.len()].0] += 1;
    }
    counts
}

pub(crate) fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes the dataset as text: a versioned header, then one comma-separated
/// record per sample (`group_id,split,y,hidden_class,features...`) with
/// 17-significant-digit floats. The manifest goes to `<path>.manifest`.
pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!(
        "umt.dataset.v{} count={} d_in={}\n",
        dataset.manifest.format_version,
        dataset.samples.len(),
        dataset.manifest.d_in
    ));
    for (i, sample) in dataset.samples.iter().enumerate() {
        let split = sample.split.ok_or_else(|| {
            Error::InvalidArgument(format!("sample {i} has no split tag; split before writing"))
        })?;
        out.push_str(&format!(
            "{},{},{},{}",
            sample.group_id,
            split,
            u8::from(sample.y),
            sample.hidden_class
        ));
        for v in &sample.features {
            out.push(',');
            out.push_str(&format_f64(*v));
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;

    let m = &dataset.manifest;
    let sidecar = format!(
        "format_version = {}\nsample_count = {}\nd_in = {}\nhidden_class_count = {}\n\
         train_frac = {}\nval_frac = {}\ntest_frac = {}\ngenerator_seed = {}\n",
        m.format_version,
        m.sample_count,
        m.d_in,
        m.hidden_class_count,
        format_f64(m.split_fractions.0),
        format_f64(m.split_fractions.1),
        format_f64(m.split_fractions.2),
        m.generator_seed
    );
    std::fs::write(manifest_path(path), sidecar)?;
    Ok(())
}

fn manifest_path(path: &Path) -> std::path::PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".manifest");
    std::path::PathBuf::from(p)
}

/// Reads a dataset written by [`write_dataset`]. The round trip is exact.
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();

    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::parse(1, "empty dataset file"))?;
    let mut header_parts = header.split(' ');
    let magic = header_parts.next().unwrap_or("");
    let version: u32 = magic
        .strip_prefix("umt.dataset.v")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::parse(1, format!("bad header `{magic}`")))?;
    if version != DATASET_FORMAT_VERSION {
        return Err(Error::parse(
            1,
            format!("unsupported dataset format version {version}"),
        ));
    }
    let mut count: Option<usize> = None;
    let mut d_in: Option<usize> = None;
    for part in header_parts {
        if let Some(v) = part.strip_prefix("count=") {
            count = v.parse().ok();
        } else if let Some(v) = part.strip_prefix("d_in=") {
            d_in = v.parse().ok();
        }
    }
    let count = count.ok_or_else(|| Error::parse(1, "header missing count"))?;
    let d_in = d_in.ok_or_else(|| Error::parse(1, "header missing d_in"))?;

    let mut samples = Vec::with_capacity(count);
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 4 + d_in {
            return Err(Error::parse(
                line_no,
                format!("expected {} fields, got {}", 4 + d_in, parts.len()),
            ));
        }
        let group_id: u32 = parts[0]
            .parse()
            .map_err(|_| Error::parse(line_no, format!("bad group id `{}`", parts[0])))?;
        let split = Split::parse(parts[1])
            .ok_or_else(|| Error::parse(line_no, format!("bad split tag `{}`", parts[1])))?;
        let y = match parts[2] {
            "0" => false,
            "1" => true,
            other => return Err(Error::parse(line_no, format!("bad label `{other}`"))),
        };
        let hidden_class: usize = parts[3]
            .parse()
            .map_err(|_| Error::parse(line_no, format!("bad hidden class `{}`", parts[3])))?;
        let mut features = Vec::with_capacity(d_in);
        for raw in &parts[4..] {
            let v: f64 = raw
                .parse()
                .map_err(|_| Error::parse(line_no, format!("bad feature value `{raw}`")))?;
            features.push(v);
        }
        samples.push(Sample {
            features,
            group_id,
            hidden_class,
            y,
            split: Some(split),
        });
    }
    if samples.len() != count {
        return Err(Error::parse(
            text.lines().count(),
            format!("header promised {count} samples, file has {}", samples.len()),
        ));
    }

    let manifest = read_manifest(&manifest_path(path), count, d_in)?;
    Ok(Dataset { samples, manifest })
}

fn read_manifest(path: &Path, count: usize, d_in: usize) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path)?;
    let mut m = DatasetManifest {
        format_version: 0,
        sample_count: 0,
        d_in: 0,
        hidden_class_count: 0,
        split_fractions: (0.0, 0.0, 0.0),
        generator_seed: 0,
    };
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::parse(line_no, "manifest line is not key = value"));
        };
        let (key, value) = (key.trim(), value.trim());
        let bad = |what: &str| Error::parse(line_no, format!("bad {what} `{value}`"));
        match key {
            "format_version" => m.format_version = value.parse().map_err(|_| bad("version"))?,
            "sample_count" => m.sample_count = value.parse().map_err(|_| bad("count"))?,
            "d_in" => m.d_in = value.parse().map_err(|_| bad("d_in"))?,
            "hidden_class_count" => {
                m.hidden_class_count = value.parse().map_err(|_| bad("class count"))?
            }
            "train_frac" => m.split_fractions.0 = value.parse().map_err(|_| bad("fraction"))?,
            "val_frac" => m.split_fractions.1 = value.parse().map_err(|_| bad("fraction"))?,
            "test_frac" => m.split_fractions.2 = value.parse().map_err(|_| bad("fraction"))?,
            "generator_seed" => m.generator_seed = value.parse().map_err(|_| bad("seed"))?,
            other => {
                return Err(Error::parse(line_no, format!("unknown manifest key `{other}`")))
            }
        }
    }
    if m.sample_count != count || m.d_in != d_in {
        return Err(Error::parse(
            1,
            format!(
                "manifest ({} samples, d_in {}) disagrees with data file ({count}, {d_in})",
                m.sample_count, m.d_in
            ),
        ));
    }
    Ok(m)
}
