//! Downstream evaluation: AUC with a Wilcoxon-based standard error,
//! validation-selected fine-tuning, nearest-neighbour scoring, reconstruction
//! pretraining, and the baseline pipeline matrix.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::clustering::{deep_cluster, ClusterModel, DeepClusterConfig};
use crate::data::{format_f64, Dataset, Split};
use crate::error::{Error, Result};
use crate::matrix::RealMatrix;
use crate::meta::{run_meta_training, MetaConfig, SamplingStrategy};
use crate::nn::{
    backward, backward_features, cross_entropy, forward_features, forward_head, one_hot,
    reconstruction_loss, sgd_step, sgd_step_encoder, DenseLayer, EncoderParams, HeadParams,
    NetSpec,
};
use crate::tasks::enumerate_tasks;

/// Area under the ROC curve as the Mann-Whitney statistic, computed from
/// midranks: the fraction of (positive, negative) pairs where the positive
/// scores higher, ties counting one half.
pub fn auc(scores_pos: &[f64], scores_neg: &[f64]) -> Result<f64> {
    if scores_pos.is_empty() || scores_neg.is_empty() {
        return Err(Error::InvalidArgument(
            "AUC needs at least one score on each side".into(),
        ));
    }
    if scores_pos
        .iter()
        .chain(scores_neg)
        .any(|s| !s.is_finite())
    {
        return Err(Error::InvalidArgument("scores must be finite".into()));
    }

    let n_pos = scores_pos.len();
    let mut all: Vec<(f64, bool)> = scores_pos
        .iter()
        .map(|&s| (s, true))
        .chain(scores_neg.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite scores"));

    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // Tie group occupies ranks i+1 ..= j; every member gets the midrank.
        let midrank = (i + 1 + j) as f64 / 2.0;
        for item in &all[i..j] {
            if item.1 {
                rank_sum_pos += midrank;
            }
        }
        i = j;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * scores_neg.len()) as f64)
}

/// Standard error of the AUC estimate from the Wilcoxon-statistic moments:
/// `sqrt([t(1-t) + (n_pos-1)(Q1-t^2) + (n_neg-1)(Q2-t^2)] / (n_pos n_neg))`
/// with `Q1 = t/(2-t)` and `Q2 = 2t^2/(1+t)`.
pub fn auc_standard_error(theta: f64, n_pos: usize, n_neg: usize) -> Result<f64> {
    if !(0.0..=1.0).contains(&theta) {
        return Err(Error::InvalidArgument(format!(
            "AUC must lie in [0, 1], got {theta}"
        )));
    }
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InvalidArgument(
            "both class counts must be at least 1".into(),
        ));
    }
    let q1 = theta / (2.0 - theta);
    let q2 = 2.0 * theta * theta / (1.0 + theta);
    let variance = (theta * (1.0 - theta)
        + (n_pos - 1) as f64 * (q1 - theta * theta)
        + (n_neg - 1) as f64 * (q2 - theta * theta))
        / (n_pos * n_neg) as f64;
    Ok(variance.max(0.0).sqrt())
}

/// Probability of the positive class per input row.
pub fn predict_scores(
    theta: &EncoderParams,
    omega: &HeadParams,
    inputs: &RealMatrix,
) -> Result<Vec<f64>> {
    let probs = forward_head(omega, &forward_features(theta, inputs)?)?;
    Ok((0..probs.rows()).map(|r| probs.get(r, 1)).collect())
}

fn split_scores(scores: &[f64], labels: &[bool]) -> (Vec<f64>, Vec<f64>) {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (&s, &y) in scores.iter().zip(labels) {
        if y {
            pos.push(s);
        } else {
            neg.push(s);
        }
    }
    (pos, neg)
}

/// AUC of a model's positive-class scores against binary labels.
pub fn model_auc(
    theta: &EncoderParams,
    omega: &HeadParams,
    inputs: &RealMatrix,
    labels: &[bool],
) -> Result<f64> {
    let scores = predict_scores(theta, omega, inputs)?;
    let (pos, neg) = split_scores(&scores, labels);
    auc(&pos, &neg)
}

/// Fine-tuning knobs.
#[derive(Debug, Clone, PartialEq)]
pub struct FineTuneConfig {
    pub epochs: usize,
    pub lr: f64,
}

/// A fine-tuned model with its validation trace.
#[derive(Debug, Clone, PartialEq)]
pub struct FineTuned {
    pub theta: EncoderParams,
    pub omega: HeadParams,
    /// Validation AUC before training (index 0) and after every epoch.
    pub val_history: Vec<f64>,
    /// Index into `val_history` of the returned snapshot.
    pub selected_epoch: usize,
}

/// Full-batch gradient descent on the binary cross-entropy of the train set,
/// evaluating validation AUC after every epoch and returning the snapshot
/// with the highest validation AUC (latest on ties, so a plateaued AUC keeps
/// the most-trained model; the untrained model is snapshot 0, so zero epochs
/// return the initialization unchanged).
pub fn fine_tune(
    theta: &EncoderParams,
    omega: &HeadParams,
    train_x: &RealMatrix,
    train_y: &[bool],
    val_x: &RealMatrix,
    val_y: &[bool],
    config: &FineTuneConfig,
) -> Result<FineTuned> {
    for (name, labels) in [("train", train_y), ("validation", val_y)] {
        if !labels.iter().any(|&y| y) || !labels.iter().any(|&y| !y) {
            return Err(Error::InvalidArgument(format!(
                "{name} set must contain both classes"
            )));
        }
    }
    let train_targets = one_hot(
        &train_y.iter().map(|&y| usize::from(y)).collect::<Vec<_>>(),
        2,
    )?;

    let mut best = FineTuned {
        theta: theta.clone(),
        omega: omega.clone(),
        val_history: vec![model_auc(theta, omega, val_x, val_y)?],
        selected_epoch: 0,
    };
    let mut current_theta = theta.clone();
    let mut current_omega = omega.clone();
    let mut history = best.val_history.clone();

    for epoch in 0..config.epochs {
        let probs = forward_head(&current_omega, &forward_features(&current_theta, train_x)?)?;
        let (loss, grad_logits) = cross_entropy(&probs, &train_targets)?;
        if !loss.is_finite() {
            return Err(Error::Diverged(format!(
                "fine-tune loss became {loss} at epoch {epoch}"
            )));
        }
        let grad = backward(&current_theta, &current_omega, train_x, &grad_logits)?;
        let (t, o) = sgd_step(&current_theta, &current_omega, &grad, config.lr);
        current_theta = t;
        current_omega = o;

        let val_auc = model_auc(&current_theta, &current_omega, val_x, val_y)?;
        history.push(val_auc);
        if val_auc >= history[best.selected_epoch] {
            best.theta = current_theta.clone();
            best.omega = current_omega.clone();
            best.selected_epoch = epoch + 1;
        }
    }
    best.val_history = history;
    Ok(best)
}

/// Label of the nearest training feature by Euclidean distance, emitted as a
/// 0/1 score; distance ties resolve to the lowest index.
pub fn nearest_neighbour_classify(
    train_features: &RealMatrix,
    train_labels: &[bool],
    test_feature: &[f64],
) -> Result<f64> {
    if train_features.rows() == 0 {
        return Err(Error::InvalidArgument("empty reference set".into()));
    }
    if train_features.rows() != train_labels.len() {
        return Err(Error::Shape(format!(
            "{} features vs {} labels",
            train_features.rows(),
            train_labels.len()
        )));
    }
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for i in 0..train_features.rows() {
        let d = RealMatrix::squared_distance(train_features.row(i), test_feature);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    Ok(f64::from(u8::from(train_labels[best])))
}

/// Autoencoder pretraining knobs.
#[derive(Debug, Clone, PartialEq)]
pub struct AutoencoderConfig {
    pub epochs: usize,
    pub lr: f64,
}

/// Trains an encoder with a mirrored decoder on input reconstruction and
/// returns the encoder half plus the per-epoch loss trace (entry 0 is the
/// untrained loss).
pub fn pretrain_autoencoder(
    inputs: &RealMatrix,
    net: &NetSpec,
    config: &AutoencoderConfig,
    seed: u64,
) -> Result<(EncoderParams, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let encoder = net.init_encoder_with(&mut rng);

    let mut decoder_widths: Vec<usize> = net.hidden.clone();
    decoder_widths.reverse();
    let decoder_spec = NetSpec::new(net.feature_dim, decoder_widths, net.input_dim);
    let decoder = decoder_spec.init_encoder_with(&mut rng);

    let encoder_depth = encoder.layers.len();
    let mut stack = EncoderParams {
        layers: encoder
            .layers
            .into_iter()
            .chain(decoder.layers)
            .collect::<Vec<DenseLayer>>(),
    };

    let mut history = Vec::with_capacity(config.epochs + 1);
    history.push(reconstruction_loss(&forward_features(&stack, inputs)?, inputs)?.0);
    for epoch in 0..config.epochs {
        let output = forward_features(&stack, inputs)?;
        let (loss, grad_out) = reconstruction_loss(&output, inputs)?;
        if !loss.is_finite() {
            return Err(Error::Diverged(format!(
                "reconstruction loss became {loss} at epoch {epoch}"
            )));
        }
        let grad = backward_features(&stack, inputs, &grad_out)?;
        stack = sgd_step_encoder(&stack, &grad, config.lr);
        history.push(reconstruction_loss(&forward_features(&stack, inputs)?, inputs)?.0);
    }

    let encoder_half = EncoderParams {
        layers: stack.layers.into_iter().take(encoder_depth).collect(),
    };
    Ok((encoder_half, history))
}

/// The baseline training pipelines mirrored by the evaluation matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineMethod {
    /// Random init, fine-tuned on the low-shot task.
    FromScratch,
    /// Reconstruction-pretrained encoder, nearest-neighbour scoring.
    AeNn,
    /// Reconstruction-pretrained encoder, fine-tuned.
    AeFineTune,
    /// Deep-clustering encoder, nearest-neighbour scoring.
    DcNn,
    /// Deep-clustering encoder, fine-tuned.
    DcFineTune,
    /// Meta-trained over the unsupervised task catalog, fine-tuned.
    UmtFineTune,
}

impl BaselineMethod {
    pub const ALL: [BaselineMethod; 6] = [
        BaselineMethod::FromScratch,
        BaselineMethod::AeNn,
        BaselineMethod::AeFineTune,
        BaselineMethod::DcNn,
        BaselineMethod::DcFineTune,
        BaselineMethod::UmtFineTune,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            BaselineMethod::FromScratch => "from_scratch",
            BaselineMethod::AeNn => "ae_nn",
            BaselineMethod::AeFineTune => "ae_finetune",
            BaselineMethod::DcNn => "dc_nn",
            BaselineMethod::DcFineTune => "dc_finetune",
            BaselineMethod::UmtFineTune => "umt_finetune",
        }
    }

    /// Whether this pipeline involves the clustering stage (and hence K).
    pub fn uses_clustering(self) -> bool {
        matches!(
            self,
            BaselineMethod::DcNn | BaselineMethod::DcFineTune | BaselineMethod::UmtFineTune
        )
    }
}

impl fmt::Display for BaselineMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for BaselineMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<BaselineMethod> {
        BaselineMethod::ALL
            .into_iter()
            .find(|m| m.tag() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown baseline method `{s}`")))
    }
}

/// Aggregated evaluation of one method over the seed list.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub method: String,
    pub k: Option<usize>,
    pub strategy: Option<SamplingStrategy>,
    /// Mean test AUC over seeds.
    pub auc: f64,
    /// Wilcoxon-based standard error of the mean AUC at the test set size.
    pub standard_error: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    pub seeds: Vec<u64>,
    pub per_seed_auc: Vec<f64>,
}

fn strategy_tag(strategy: SamplingStrategy) -> &'static str {
    match strategy {
        SamplingStrategy::Random => "random",
        SamplingStrategy::Curriculum => "curriculum",
    }
}

fn parse_strategy(s: &str) -> Result<SamplingStrategy> {
    match s {
        "random" => Ok(SamplingStrategy::Random),
        "curriculum" => Ok(SamplingStrategy::Curriculum),
        other => Err(Error::InvalidArgument(format!(
            "unknown sampling strategy `{other}`"
        ))),
    }
}

impl EvalReport {
    /// One machine-readable record per report.
    pub fn to_line(&self) -> String {
        let k = self.k.map_or("-".to_string(), |k| k.to_string());
        let strategy = self.strategy.map_or("-", strategy_tag);
        let seeds = self
            .seeds
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()
            .join(";");
        let aucs = self
            .per_seed_auc
            .iter()
            .map(|a| format_f64(*a))
            .collect::<Vec<_>>()
            .join(";");
        format!(
            "method={} k={} strategy={} n_pos={} n_neg={} mean={} se={} seeds={} aucs={}",
            self.method,
            k,
            strategy,
            self.n_pos,
            self.n_neg,
            format_f64(self.auc),
            format_f64(self.standard_error),
            seeds,
            aucs
        )
    }

    /// Parses a [`to_line`](Self::to_line) record; the round trip is exact.
    pub fn from_line(line: &str) -> Result<EvalReport> {
        let mut fields = std::collections::BTreeMap::new();
        for part in line.split_whitespace() {
            let (key, value) = part.split_once('=').ok_or_else(|| {
                Error::InvalidArgument(format!("report field `{part}` is not key=value"))
            })?;
            fields.insert(key.to_string(), value.to_string());
        }
        let get = |key: &str| -> Result<String> {
            fields
                .get(key)
                .cloned()
                .ok_or_else(|| Error::InvalidArgument(format!("report line missing `{key}`")))
        };
        let bad = |key: &str, value: &str| {
            Error::InvalidArgument(format!("bad value `{value}` for report field `{key}`"))
        };
        let parse_f64 =
            |key: &str, v: &str| -> Result<f64> { v.parse().map_err(|_| bad(key, v)) };

        let k_raw = get("k")?;
        let strategy_raw = get("strategy")?;
        let seeds_raw = get("seeds")?;
        let aucs_raw = get("aucs")?;
        Ok(EvalReport {
            method: get("method")?,
            k: if k_raw == "-" {
                None
            } else {
                Some(k_raw.parse().map_err(|_| bad("k", &k_raw))?)
            },
            strategy: if strategy_raw == "-" {
                None
            } else {
                Some(parse_strategy(&strategy_raw)?)
            },
            auc: parse_f64("mean", &get("mean")?)?,
            standard_error: parse_f64("se", &get("se")?)?,
            n_pos: get("n_pos")?
                .parse()
                .map_err(|_| bad("n_pos", &get("n_pos").unwrap()))?,
            n_neg: get("n_neg")?
                .parse()
                .map_err(|_| bad("n_neg", &get("n_neg").unwrap()))?,
            seeds: seeds_raw
                .split(';')
                .filter(|s| !s.is_empty())
                .map(|s| s.parse().map_err(|_| bad("seeds", s)))
                .collect::<Result<_>>()?,
            per_seed_auc: aucs_raw
                .split(';')
                .filter(|s| !s.is_empty())
                .map(|s| parse_f64("aucs", s))
                .collect::<Result<_>>()?,
        })
    }
}

/// Everything a baseline pipeline run needs besides the dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub net: NetSpec,
    /// Cluster count for the clustering-based pipelines.
    pub k: usize,
    pub dc_rounds: usize,
    pub dc_epochs: usize,
    pub dc_lr: f64,
    /// Meta-training settings; the seed field is replaced per run.
    pub meta: MetaConfig,
    pub ae: AutoencoderConfig,
    pub fine_tune: FineTuneConfig,
    /// Labelled fine-tuning samples drawn per class from the train split.
    pub ft_per_class: usize,
    /// Start fine-tuning from a fresh head instead of the meta-trained one.
    pub reset_head: bool,
    pub seeds: Vec<u64>,
}

/// Positions (into `labels`) of a class-balanced low-shot subset.
pub fn low_shot_indices(
    labels: &[bool],
    per_class: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    let mut pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
    let mut neg: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i]).collect();
    if pos.len() < per_class || neg.len() < per_class {
        return Err(Error::InvalidArgument(format!(
            "need {per_class} labelled samples per class, have {} positive / {} negative",
            pos.len(),
            neg.len()
        )));
    }
    pos.shuffle(rng);
    neg.shuffle(rng);
    let mut picked: Vec<usize> = neg[..per_class]
        .iter()
        .chain(&pos[..per_class])
        .copied()
        .collect();
    picked.sort_unstable();
    Ok(picked)
}

struct SplitData {
    train_x: RealMatrix,
    train_y: Vec<bool>,
    val_x: RealMatrix,
    val_y: Vec<bool>,
    test_x: RealMatrix,
    test_y: Vec<bool>,
}

fn split_data(dataset: &Dataset) -> Result<SplitData> {
    let gather = |split: Split| -> Result<(RealMatrix, Vec<bool>)> {
        let idx = dataset.split_indices(split);
        if idx.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "dataset has no {split} samples; split it first"
            )));
        }
        Ok((dataset.feature_matrix(&idx), dataset.labels(&idx)))
    };
    let (train_x, train_y) = gather(Split::Train)?;
    let (val_x, val_y) = gather(Split::Val)?;
    let (test_x, test_y) = gather(Split::Test)?;
    Ok(SplitData {
        train_x,
        train_y,
        val_x,
        val_y,
        test_x,
        test_y,
    })
}

/// Scores the test set with 1-NN over encoder features of the low-shot set.
fn nn_scores(
    theta: &EncoderParams,
    reference_x: &RealMatrix,
    reference_y: &[bool],
    test_x: &RealMatrix,
) -> Result<Vec<f64>> {
    let reference_features = forward_features(theta, reference_x)?;
    let test_features = forward_features(theta, test_x)?;
    (0..test_features.rows())
        .map(|r| nearest_neighbour_classify(&reference_features, reference_y, test_features.row(r)))
        .collect()
}

/// Runs one baseline pipeline for one seed and returns its test AUC.
fn run_seed(
    method: BaselineMethod,
    data: &SplitData,
    config: &PipelineConfig,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let low_shot = low_shot_indices(&data.train_y, config.ft_per_class, &mut rng)?;
    let ft_x = data.train_x.select_rows(&low_shot);
    let ft_y: Vec<bool> = low_shot.iter().map(|&i| data.train_y[i]).collect();

    // Sub-seeds are drawn in a fixed order regardless of method so that the
    // shared stages (e.g. clustering) coincide across pipelines per seed.
    let init_seed: u64 = rng.gen();
    let pretrain_seed: u64 = rng.gen();
    let meta_seed: u64 = rng.gen();

    let finetuned_auc = |theta: &EncoderParams, omega: &HeadParams| -> Result<f64> {
        let tuned = fine_tune(
            theta,
            omega,
            &ft_x,
            &ft_y,
            &data.val_x,
            &data.val_y,
            &config.fine_tune,
        )?;
        model_auc(&tuned.theta, &tuned.omega, &data.test_x, &data.test_y)
    };
    let nn_auc = |theta: &EncoderParams| -> Result<f64> {
        let scores = nn_scores(theta, &ft_x, &ft_y, &data.test_x)?;
        let (pos, neg) = split_scores(&scores, &data.test_y);
        auc(&pos, &neg)
    };
    let fresh_head = |seed: u64| config.net.init_head(2, seed);

    match method {
        BaselineMethod::FromScratch => {
            let theta = config.net.init_encoder(init_seed);
            let omega = fresh_head(init_seed.wrapping_add(1))?;
            finetuned_auc(&theta, &omega)
        }
        BaselineMethod::AeNn => {
            let (theta, _) = pretrain_autoencoder(&data.train_x, &config.net, &config.ae, pretrain_seed)?;
            nn_auc(&theta)
        }
        BaselineMethod::AeFineTune => {
            let (theta, _) = pretrain_autoencoder(&data.train_x, &config.net, &config.ae, pretrain_seed)?;
            finetuned_auc(&theta, &fresh_head(init_seed)?)
        }
        BaselineMethod::DcNn => {
            let model = cluster_stage(&data.train_x, config, pretrain_seed)?;
            nn_auc(&model.theta)
        }
        BaselineMethod::DcFineTune => {
            let model = cluster_stage(&data.train_x, config, pretrain_seed)?;
            finetuned_auc(&model.theta, &fresh_head(init_seed)?)
        }
        BaselineMethod::UmtFineTune => {
            let model = cluster_stage(&data.train_x, config, pretrain_seed)?;
            let catalog = enumerate_tasks(config.k)?;
            let meta_config = MetaConfig {
                seed: meta_seed,
                ..config.meta.clone()
            };
            let (meta, _) =
                run_meta_training(&data.train_x, &model, &catalog, &config.net, &meta_config)?;
            let omega = if config.reset_head {
                fresh_head(init_seed)?
            } else {
                meta.head
            };
            finetuned_auc(&meta.encoder, &omega)
        }
    }
}

fn cluster_stage(train_x: &RealMatrix, config: &PipelineConfig, seed: u64) -> Result<ClusterModel> {
    let dc = DeepClusterConfig {
        net: config.net.clone(),
        lr: config.dc_lr,
    };
    deep_cluster(train_x, config.k, config.dc_rounds, config.dc_epochs, &dc, seed)
}

/// Executes one baseline pipeline over the configured seed list and
/// aggregates mean test AUC and its standard error.
pub fn run_baseline(
    method: BaselineMethod,
    dataset: &Dataset,
    config: &PipelineConfig,
) -> Result<EvalReport> {
    if config.seeds.is_empty() {
        return Err(Error::InvalidArgument("seed list is empty".into()));
    }
    let data = split_data(dataset)?;
    let n_pos = data.test_y.iter().filter(|&&y| y).count();
    let n_neg = data.test_y.len() - n_pos;

    let mut per_seed_auc = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        per_seed_auc.push(run_seed(method, &data, config, seed)?);
    }
    let mean = per_seed_auc.iter().sum::<f64>() / per_seed_auc.len() as f64;
    Ok(EvalReport {
        method: method.tag().to_string(),
        k: method.uses_clustering().then_some(config.k),
        strategy: matches!(method, BaselineMethod::UmtFineTune)
            .then_some(config.meta.strategy),
        auc: mean,
        standard_error: auc_standard_error(mean, n_pos, n_neg)?,
        n_pos,
        n_neg,
        seeds: config.seeds.clone(),
        per_seed_auc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{assign_downstream_labels, generate_blobs, split_groupwise};
    use std::collections::BTreeSet;

    /// Exhaustive pair-counting oracle for the Mann-Whitney statistic.
    fn auc_oracle(pos: &[f64], neg: &[f64]) -> f64 {
        let mut total = 0.0;
        for &p in pos {
            for &n in neg {
                if p > n {
                    total += 1.0;
                } else if p == n {
                    total += 0.5;
                }
            }
        }
        total / (pos.len() * neg.len()) as f64
    }

    #[test]
    fn auc_perfect_separation() {
        assert_eq!(auc(&[0.9, 0.8], &[0.2, 0.1]).unwrap(), 1.0);
    }

    #[test]
    fn auc_all_ties() {
        assert_eq!(auc(&[0.5, 0.5, 0.5], &[0.5, 0.5]).unwrap(), 0.5);
    }

    #[test]
    fn auc_pair_counting_fixture() {
        assert_eq!(auc(&[0.9, 0.4], &[0.5, 0.1]).unwrap(), 0.75);
    }

    #[test]
    fn auc_rejects_empty_and_non_finite() {
        assert!(auc(&[], &[0.1]).is_err());
        assert!(auc(&[0.1], &[]).is_err());
        assert!(auc(&[f64::NAN], &[0.1]).is_err());
    }

    #[test]
    fn auc_matches_oracle_exactly_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for round in 0..200 {
            let n_pos = rng.gen_range(1..40);
            let n_neg = rng.gen_range(1..40);
            // Coarse grid scores so ties actually happen.
            let draw = |rng: &mut ChaCha8Rng| (rng.gen_range(0..8) as f64) / 4.0;
            let pos: Vec<f64> = (0..n_pos).map(|_| draw(&mut rng)).collect();
            let neg: Vec<f64> = (0..n_neg).map(|_| draw(&mut rng)).collect();
            let fast = auc(&pos, &neg).unwrap();
            let slow = auc_oracle(&pos, &neg);
            assert_eq!(fast, slow, "round {round}");
        }
    }

    #[test]
    fn auc_invariant_under_increasing_transform() {
        let pos = vec![0.9, 0.4, 0.4, 0.7];
        let neg = vec![0.5, 0.1, 0.4];
        let transform = |v: f64| v.powi(3) + 2.0 * v;
        let tp: Vec<f64> = pos.iter().map(|&v| transform(v)).collect();
        let tn: Vec<f64> = neg.iter().map(|&v| transform(v)).collect();
        assert_eq!(auc(&pos, &neg).unwrap(), auc(&tp, &tn).unwrap());
    }

    #[test]
    fn auc_complement_identity_without_ties() {
        let pos = vec![0.91, 0.42, 0.77];
        let neg = vec![0.55, 0.13, 0.68, 0.2];
        let forward = auc(&pos, &neg).unwrap();
        let backward = auc(&neg, &pos).unwrap();
        assert_eq!(forward + backward, 1.0);
    }

    #[test]
    fn standard_error_fixtures() {
        assert_eq!(auc_standard_error(1.0, 5, 9).unwrap(), 0.0);
        let se = auc_standard_error(0.75, 2, 2).unwrap();
        assert!((se - 0.27629).abs() < 1e-5, "got {se}");
        assert_eq!(auc_standard_error(0.5, 1, 1).unwrap(), 0.5);
    }

    #[test]
    fn standard_error_symmetric_at_half() {
        let a = auc_standard_error(0.5, 3, 11).unwrap();
        let b = auc_standard_error(0.5, 11, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn standard_error_rejects_bad_inputs() {
        assert!(auc_standard_error(1.2, 2, 2).is_err());
        assert!(auc_standard_error(-0.1, 2, 2).is_err());
        assert!(auc_standard_error(0.5, 0, 2).is_err());
    }

    #[test]
    fn nearest_neighbour_rules() {
        let train = RealMatrix::new(2, 1, vec![0.0, 10.0]).unwrap();
        let labels = vec![false, true];
        assert_eq!(
            nearest_neighbour_classify(&train, &labels, &[0.0]).unwrap(),
            0.0
        );
        assert_eq!(
            nearest_neighbour_classify(&train, &labels, &[2.0]).unwrap(),
            0.0
        );
        assert_eq!(
            nearest_neighbour_classify(&train, &labels, &[9.0]).unwrap(),
            1.0
        );
        // Equidistant: lowest index wins.
        assert_eq!(
            nearest_neighbour_classify(&train, &labels, &[5.0]).unwrap(),
            0.0
        );
        assert!(nearest_neighbour_classify(&RealMatrix::zeros(0, 1), &[], &[1.0]).is_err());
    }

    /// Perceptron oracle: returns true when the labelled set is linearly
    /// separable (finds a separating hyperplane in a bounded pass count).
    fn perceptron_separable(x: &RealMatrix, y: &[bool]) -> bool {
        let d = x.cols();
        let mut w = vec![0.0f64; d + 1];
        for _ in 0..10_000 {
            let mut mistakes = 0;
            for (i, &label) in y.iter().enumerate() {
                let mut activation = w[d];
                for (j, &v) in x.row(i).iter().enumerate() {
                    activation += w[j] * v;
                }
                let target = if label { 1.0 } else { -1.0 };
                if activation * target <= 0.0 {
                    for (j, &v) in x.row(i).iter().enumerate() {
                        w[j] += target * v;
                    }
                    w[d] += target;
                    mistakes += 1;
                }
            }
            if mistakes == 0 {
                return true;
            }
        }
        false
    }

    fn separable_fixture() -> (RealMatrix, Vec<bool>) {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..10 {
            let t = i as f64 * 0.1;
            rows.push(vec![t, t + 2.0]);
            labels.push(true);
            rows.push(vec![t + 2.0, t]);
            labels.push(false);
        }
        (RealMatrix::from_rows(&rows).unwrap(), labels)
    }

    #[test]
    fn fine_tune_zero_epochs_returns_init() {
        let (x, y) = separable_fixture();
        let net = NetSpec::new(2, vec![], 2);
        let theta = net.init_encoder(3);
        let omega = net.init_head(2, 4).unwrap();
        let config = FineTuneConfig { epochs: 0, lr: 0.5 };
        let tuned = fine_tune(&theta, &omega, &x, &y, &x, &y, &config).unwrap();
        assert_eq!(tuned.theta, theta);
        assert_eq!(tuned.omega, omega);
        assert_eq!(tuned.val_history.len(), 1);
    }

    #[test]
    fn fine_tune_fits_separable_data() {
        let (x, y) = separable_fixture();
        assert!(perceptron_separable(&x, &y), "fixture must be separable");
        let net = NetSpec::new(2, vec![], 2);
        let theta = net.init_encoder(3);
        let omega = net.init_head(2, 4).unwrap();
        let config = FineTuneConfig {
            epochs: 200,
            lr: 0.5,
        };
        let tuned = fine_tune(&theta, &omega, &x, &y, &x, &y, &config).unwrap();
        let scores = predict_scores(&tuned.theta, &tuned.omega, &x).unwrap();
        let accuracy = scores
            .iter()
            .zip(&y)
            .filter(|&(s, &label)| (*s > 0.5) == label)
            .count() as f64
            / y.len() as f64;
        assert_eq!(accuracy, 1.0);
    }

    #[test]
    fn fine_tune_is_deterministic_and_selects_history_max() {
        let (x, y) = separable_fixture();
        let net = NetSpec::new(2, vec![3], 2);
        let theta = net.init_encoder(8);
        let omega = net.init_head(2, 9).unwrap();
        let config = FineTuneConfig {
            epochs: 40,
            lr: 0.3,
        };
        let a = fine_tune(&theta, &omega, &x, &y, &x, &y, &config).unwrap();
        let b = fine_tune(&theta, &omega, &x, &y, &x, &y, &config).unwrap();
        assert_eq!(a, b);

        let best = a
            .val_history
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(a.val_history[a.selected_epoch], best);
        let val_auc = model_auc(&a.theta, &a.omega, &x, &y).unwrap();
        assert_eq!(val_auc, best);
    }

    #[test]
    fn fine_tune_requires_both_classes() {
        let (x, _) = separable_fixture();
        let y = vec![true; x.rows()];
        let net = NetSpec::new(2, vec![], 2);
        let theta = net.init_encoder(0);
        let omega = net.init_head(2, 0).unwrap();
        let config = FineTuneConfig { epochs: 1, lr: 0.1 };
        assert!(fine_tune(&theta, &omega, &x, &y, &x, &y, &config).is_err());
    }

    #[test]
    fn autoencoder_zero_epochs_returns_init() {
        let ds = generate_blobs(3, 10, 4, 4.0, 1.0, 2).unwrap();
        let x = ds.feature_matrix(&(0..ds.len()).collect::<Vec<_>>());
        let net = NetSpec::new(4, vec![3], 2);
        let config = AutoencoderConfig { epochs: 0, lr: 0.01 };
        let (encoder, history) = pretrain_autoencoder(&x, &net, &config, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert_eq!(encoder, net.init_encoder_with(&mut rng));
        assert_eq!(history.len(), 1);
    }

    #[test]
    fn autoencoder_training_reduces_loss() {
        let ds = generate_blobs(3, 10, 4, 4.0, 1.0, 2).unwrap();
        let x = ds.feature_matrix(&(0..ds.len()).collect::<Vec<_>>());
        let net = NetSpec::new(4, vec![4], 3);
        let config = AutoencoderConfig {
            epochs: 100,
            lr: 0.02,
        };
        let (_, history) = pretrain_autoencoder(&x, &net, &config, 5).unwrap();
        assert_eq!(history.len(), 101);
        assert!(
            history[100] < history[0],
            "loss went {} -> {}",
            history[0],
            history[100]
        );

        let again = pretrain_autoencoder(&x, &net, &config, 5).unwrap();
        assert_eq!(again.1, history);
    }

    #[test]
    fn method_tags_round_trip() {
        for method in BaselineMethod::ALL {
            assert_eq!(method.tag().parse::<BaselineMethod>().unwrap(), method);
        }
        assert!("mystery".parse::<BaselineMethod>().is_err());
    }

    #[test]
    fn report_line_round_trip() {
        let report = EvalReport {
            method: "umt_finetune".into(),
            k: Some(5),
            strategy: Some(SamplingStrategy::Random),
            auc: 0.8712345678901234,
            standard_error: 0.0412345678901234,
            n_pos: 57,
            n_neg: 63,
            seeds: vec![0, 1, 2],
            per_seed_auc: vec![0.9012345678901234, 0.8412345678901235, 0.8712345678901233],
        };
        let parsed = EvalReport::from_line(&report.to_line()).unwrap();
        assert_eq!(parsed, report);

        let bare = EvalReport {
            method: "from_scratch".into(),
            k: None,
            strategy: None,
            ..report
        };
        assert_eq!(EvalReport::from_line(&bare.to_line()).unwrap(), bare);
    }

    #[test]
    fn collapsed_features_give_chance_auc() {
        // Zero encoder weights collapse every sample to the same feature
        // vector, so 1-NN emits one constant score and AUC is 0.5.
        let net = NetSpec::new(3, vec![], 2);
        let mut theta = net.init_encoder(0);
        for layer in &mut theta.layers {
            for v in layer.weight.values_mut() {
                *v = 0.0;
            }
        }
        let reference = RealMatrix::new(4, 3, vec![1.0; 12]).unwrap();
        let labels = vec![false, true, false, true];
        let test = RealMatrix::new(6, 3, vec![0.5; 18]).unwrap();
        let scores = nn_scores(&theta, &reference, &labels, &test).unwrap();
        assert!(scores.iter().all(|&s| s == scores[0]));
        let (pos, neg) = split_scores(&scores, &[true, false, true, false, true, false]);
        assert_eq!(auc(&pos, &neg).unwrap(), 0.5);
    }

    fn tiny_benchmark_dataset(separation: f64) -> Dataset {
        let ds = generate_blobs(4, 20, 6, separation, 1.0, 3).unwrap();
        let ds = assign_downstream_labels(ds, &BTreeSet::from([0, 2])).unwrap();
        split_groupwise(ds, (0.5, 0.2, 0.3), 3).unwrap()
    }

    fn tiny_pipeline_config() -> PipelineConfig {
        PipelineConfig {
            net: NetSpec::new(6, vec![8], 4),
            k: 3,
            dc_rounds: 3,
            dc_epochs: 3,
            dc_lr: 0.05,
            meta: MetaConfig {
                alpha: 0.01,
                outer_lr: 0.01,
                t: 4,
                iterations: 40,
                mode: crate::meta::MetaMode::FirstOrder,
                strategy: SamplingStrategy::Random,
                m: 4,
                n: 10,
                seed: 0,
            },
            ae: AutoencoderConfig {
                epochs: 60,
                lr: 0.02,
            },
            fine_tune: FineTuneConfig {
                epochs: 60,
                lr: 0.2,
            },
            ft_per_class: 5,
            reset_head: false,
            seeds: vec![0, 1],
        }
    }

    #[test]
    fn from_scratch_aces_widely_separated_task() {
        let ds = tiny_benchmark_dataset(10.0);
        let report = run_baseline(BaselineMethod::FromScratch, &ds, &tiny_pipeline_config()).unwrap();
        assert_eq!(report.auc, 1.0);
        assert_eq!(report.standard_error, 0.0);
        assert_eq!(report.k, None);
        assert_eq!(report.strategy, None);
    }

    #[test]
    fn every_pipeline_runs_and_is_deterministic() {
        let ds = tiny_benchmark_dataset(6.0);
        let config = tiny_pipeline_config();
        for method in BaselineMethod::ALL {
            let a = run_baseline(method, &ds, &config).unwrap();
            let b = run_baseline(method, &ds, &config).unwrap();
            assert_eq!(a, b, "method {method}");
            assert_eq!(a.per_seed_auc.len(), config.seeds.len());
            assert!((0.0..=1.0).contains(&a.auc), "method {method}: {}", a.auc);
            assert_eq!(a.k.is_some(), method.uses_clustering());
        }
    }

    #[test]
    fn low_shot_subset_is_balanced() {
        let labels: Vec<bool> = (0..40).map(|i| i % 4 == 0).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let picked = low_shot_indices(&labels, 5, &mut rng).unwrap();
        assert_eq!(picked.len(), 10);
        let positives = picked.iter().filter(|&&i| labels[i]).count();
        assert_eq!(positives, 5);
        assert!(low_shot_indices(&labels, 11, &mut rng).is_err());
    }
}
