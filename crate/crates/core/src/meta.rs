//! Episodic meta-training over the designed task catalog.
//!
//! The meta parameters are adapted to each sampled task with a single
//! truncated gradient-descent step on its support set, and the outer loop
//! ascends the summed query log-likelihood of the adapted parameters. The
//! outer gradient is first-order by default; exact mode pushes the query
//! gradient through a central-finite-difference Jacobian of the inner step
//! and is meant for verification-scale problems only.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::clustering::ClusterModel;
use crate::error::{Error, Result};
use crate::matrix::RealMatrix;
use crate::nn::{
    backward, cross_entropy, flatten_gradient, flatten_params, forward_features, forward_head,
    unflatten_like, EncoderParams, HeadParams, NetSpec,
};
use crate::tasks::{materialize_task, sample_episode, Episode, LabelledPool, TaskCatalog};

/// Step used for the finite-difference Jacobian in exact mode.
const FD_STEP: f64 = 1e-5;

/// Exact mode differentiates the inner step coordinate by coordinate, so it
/// is capped to small nets.
const EXACT_FD_MAX_PARAMS: usize = 200;

/// EMA decay for task statistics.
const STATS_DECAY: f64 = 0.9;

/// Softmax temperature of the curriculum sampler.
const CURRICULUM_TEMPERATURE: f64 = 0.1;

/// A task seen as losses over one flat parameter vector. Losses are negative
/// log-likelihoods summed over the set, so lower is better and zero is a
/// perfect fit.
pub trait AdaptationProblem {
    fn dim(&self) -> usize;
    fn support_loss_grad(&self, params: &[f64]) -> Result<(f64, Vec<f64>)>;
    fn query_loss_grad(&self, params: &[f64]) -> Result<(f64, Vec<f64>)>;
}

/// How the outer gradient treats the inner step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetaMode {
    /// Ignore the Jacobian of the inner step.
    FirstOrder,
    /// Apply the inner-step Jacobian via central finite differences.
    ExactFd,
}

/// Meta-batch task selection strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingStrategy {
    Random,
    Curriculum,
}

/// Meta-training knobs.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaConfig {
    /// Inner (task adaptation) learning rate.
    pub alpha: f64,
    /// Outer (meta) learning rate.
    pub outer_lr: f64,
    /// Tasks per meta-iteration.
    pub t: usize,
    pub iterations: usize,
    pub mode: MetaMode,
    pub strategy: SamplingStrategy,
    /// Support set size.
    pub m: usize,
    /// Query set size.
    pub n: usize,
    pub seed: u64,
}

impl Default for MetaConfig {
    fn default() -> MetaConfig {
        MetaConfig {
            alpha: 0.001,
            outer_lr: 0.001,
            t: 4,
            iterations: 100,
            mode: MetaMode::FirstOrder,
            strategy: SamplingStrategy::Random,
            m: 4,
            n: 16,
            seed: 0,
        }
    }
}

impl MetaConfig {
    /// Checks field ranges. `alpha` may be zero: that degenerate setting
    /// turns the inner step into the identity and is exercised by tests.
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || !self.alpha.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "alpha must be finite and nonnegative, got {}",
                self.alpha
            )));
        }
        if self.outer_lr <= 0.0 || !self.outer_lr.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "outer_lr must be positive, got {}",
                self.outer_lr
            )));
        }
        if self.t == 0 {
            return Err(Error::InvalidArgument("t must be at least 1".into()));
        }
        if self.m < 2 || self.n < 2 || self.m >= self.n {
            return Err(Error::InvalidArgument(format!(
                "episode sizes need 2 <= M < N, got M = {}, N = {}",
                self.m, self.n
            )));
        }
        Ok(())
    }
}

/// Meta parameters: an encoder plus a two-output head, adapted jointly.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaModel {
    pub encoder: EncoderParams,
    pub head: HeadParams,
}

impl MetaModel {
    pub fn new(encoder: EncoderParams, head: HeadParams) -> Result<MetaModel> {
        if head.num_classes() != 2 {
            return Err(Error::InvalidArgument(format!(
                "meta head must have 2 outputs, got {}",
                head.num_classes()
            )));
        }
        Ok(MetaModel { encoder, head })
    }

    pub fn param_count(&self) -> usize {
        self.encoder.param_count() + self.head.param_count()
    }
}

/// One task's running statistics: an accuracy EMA and an EMA of its absolute
/// change, which serves as the learning-progress score for the curriculum
/// sampler. Both start at the uninformed prior 0.5.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskStats {
    accuracy_ema: Vec<f64>,
    progress_ema: Vec<f64>,
    samples: Vec<u64>,
}

impl TaskStats {
    pub fn new(task_count: usize) -> TaskStats {
        TaskStats {
            accuracy_ema: vec![0.5; task_count],
            progress_ema: vec![0.5; task_count],
            samples: vec![0; task_count],
        }
    }

    pub fn len(&self) -> usize {
        self.accuracy_ema.len()
    }

    pub fn is_empty(&self) -> bool {
        self.accuracy_ema.is_empty()
    }

    pub fn accuracy_ema(&self, task: usize) -> f64 {
        self.accuracy_ema[task]
    }

    pub fn progress(&self, task: usize) -> f64 {
        self.progress_ema[task]
    }

    pub fn observations(&self, task: usize) -> u64 {
        self.samples[task]
    }

    /// Folds a fresh query accuracy into the task's EMAs.
    pub fn update(&mut self, task: usize, accuracy: f64) {
        let change = (accuracy - self.accuracy_ema[task]).abs();
        self.accuracy_ema[task] =
            STATS_DECAY * self.accuracy_ema[task] + (1.0 - STATS_DECAY) * accuracy;
        self.progress_ema[task] =
            STATS_DECAY * self.progress_ema[task] + (1.0 - STATS_DECAY) * change;
        self.samples[task] += 1;
    }
}

/// One truncated gradient-descent step on the support loss:
/// `phi* = psi - alpha * grad(support NLL at psi)`.
pub fn inner_adapt<P: AdaptationProblem>(
    problem: &P,
    psi: &[f64],
    alpha: f64,
) -> Result<Vec<f64>> {
    let (_, grad) = problem.support_loss_grad(psi)?;
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Diverged("non-finite support gradient".into()));
    }
    Ok(psi.iter().zip(&grad).map(|(p, g)| p - alpha * g).collect())
}

/// Summed query log-likelihood of the adapted parameters across episodes:
/// the maximized lower bound of the meta objective. Always <= 0; equals 0
/// only when every query prediction is perfect.
pub fn outer_objective<P: AdaptationProblem>(
    problems: &[P],
    psi: &[f64],
    alpha: f64,
) -> Result<f64> {
    if problems.is_empty() {
        return Err(Error::InvalidArgument("no episodes given".into()));
    }
    let mut total = 0.0;
    for problem in problems {
        let adapted = inner_adapt(problem, psi, alpha)?;
        let (loss, _) = problem.query_loss_grad(&adapted)?;
        total += -loss;
    }
    Ok(total)
}

/// Gradient of the summed query NLL with respect to the meta parameters.
/// First-order mode treats the adapted parameters as constants of `psi`;
/// exact mode multiplies each query gradient by the inner-step Jacobian,
/// estimated coordinate-wise with central finite differences.
pub fn meta_gradient<P: AdaptationProblem>(
    problems: &[P],
    psi: &[f64],
    alpha: f64,
    mode: MetaMode,
) -> Result<Vec<f64>> {
    if problems.is_empty() {
        return Err(Error::InvalidArgument("no episodes given".into()));
    }
    let dim = psi.len();
    if mode == MetaMode::ExactFd && dim > EXACT_FD_MAX_PARAMS {
        return Err(Error::Capability(format!(
            "exact mode differentiates the inner step per coordinate and is \
             limited to {EXACT_FD_MAX_PARAMS} parameters; got {dim}"
        )));
    }

    let mut total = vec![0.0; dim];
    for problem in problems {
        let adapted = inner_adapt(problem, psi, alpha)?;
        let (_, query_grad) = problem.query_loss_grad(&adapted)?;
        match mode {
            MetaMode::FirstOrder => {
                for (t, g) in total.iter_mut().zip(&query_grad) {
                    *t += g;
                }
            }
            MetaMode::ExactFd => {
                // (J^T g)_j is the directional derivative of <g, phi*(psi)>
                // along coordinate j.
                let mut shifted = psi.to_vec();
                for (j, slot) in total.iter_mut().enumerate() {
                    let original = shifted[j];
                    shifted[j] = original + FD_STEP;
                    let plus = inner_adapt(problem, &shifted, alpha)?;
                    shifted[j] = original - FD_STEP;
                    let minus = inner_adapt(problem, &shifted, alpha)?;
                    shifted[j] = original;
                    let dot: f64 = query_grad
                        .iter()
                        .zip(plus.iter().zip(&minus))
                        .map(|(g, (p, m))| g * (p - m))
                        .sum();
                    *slot += dot / (2.0 * FD_STEP);
                }
            }
        }
    }
    Ok(total)
}

/// Outcome of one meta-iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaStepOutcome {
    pub psi: Vec<f64>,
    /// Outer objective at the pre-update parameters.
    pub objective: f64,
    /// Adapted parameters per episode, for downstream scoring.
    pub adapted: Vec<Vec<f64>>,
}

/// Ascends the outer objective by one step over a meta-batch of exactly
/// `config.t` episodes.
pub fn meta_step<P: AdaptationProblem>(
    psi: &[f64],
    problems: &[P],
    config: &MetaConfig,
) -> Result<MetaStepOutcome> {
    config.validate()?;
    if problems.len() != config.t {
        return Err(Error::InvalidArgument(format!(
            "meta-batch holds {} episodes but T = {}",
            problems.len(),
            config.t
        )));
    }
    let mut objective = 0.0;
    let mut adapted = Vec::with_capacity(problems.len());
    for problem in problems {
        let phi = inner_adapt(problem, psi, config.alpha)?;
        let (loss, _) = problem.query_loss_grad(&phi)?;
        objective += -loss;
        adapted.push(phi);
    }
    if !objective.is_finite() {
        return Err(Error::Diverged(format!(
            "outer objective became {objective}"
        )));
    }
    let grad = meta_gradient(problems, psi, config.alpha, config.mode)?;
    let psi_next = psi
        .iter()
        .zip(&grad)
        .map(|(p, g)| p - config.outer_lr * g)
        .collect();
    Ok(MetaStepOutcome {
        psi: psi_next,
        objective,
        adapted,
    })
}

/// Samples `t` catalog indices with replacement: uniformly under the random
/// strategy, proportional to `softmax(progress / temperature)` under the
/// curriculum strategy.
pub fn sample_meta_batch(
    catalog: &TaskCatalog,
    stats: &TaskStats,
    strategy: SamplingStrategy,
    t: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    if catalog.is_empty() {
        return Err(Error::InvalidArgument("no eligible tasks to sample".into()));
    }
    if stats.len() != catalog.len() {
        return Err(Error::InvalidArgument(format!(
            "stats cover {} tasks, catalog has {}",
            stats.len(),
            catalog.len()
        )));
    }
    if t == 0 {
        return Err(Error::InvalidArgument("t must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = catalog.len();
    let picks = match strategy {
        SamplingStrategy::Random => (0..t).map(|_| rng.gen_range(0..len)).collect(),
        SamplingStrategy::Curriculum => {
            let max_progress = (0..len)
                .map(|i| stats.progress(i))
                .fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = (0..len)
                .map(|i| ((stats.progress(i) - max_progress) / CURRICULUM_TEMPERATURE).exp())
                .collect();
            let total: f64 = weights.iter().sum();
            (0..t)
                .map(|_| {
                    let mut target = rng.gen::<f64>() * total;
                    for (i, &w) in weights.iter().enumerate() {
                        if target < w {
                            return i;
                        }
                        target -= w;
                    }
                    len - 1
                })
                .collect()
        }
    };
    Ok(picks)
}

/// A materialized episode bound to the network shapes, exposing summed-NLL
/// losses over the flat parameter vector.
#[derive(Debug, Clone)]
pub struct EpisodeProblem {
    theta_template: EncoderParams,
    omega_template: HeadParams,
    support_x: RealMatrix,
    support_y: RealMatrix,
    query_x: RealMatrix,
    query_y: RealMatrix,
}

impl EpisodeProblem {
    pub fn new(
        inputs: &RealMatrix,
        episode: &Episode,
        theta_template: &EncoderParams,
        omega_template: &HeadParams,
    ) -> EpisodeProblem {
        let gather = |set: &[(usize, bool)]| {
            let indices: Vec<usize> = set.iter().map(|&(i, _)| i).collect();
            let x = inputs.select_rows(&indices);
            let mut y = RealMatrix::zeros(set.len(), 2);
            for (row, &(_, label)) in set.iter().enumerate() {
                y.set(row, usize::from(label), 1.0);
            }
            (x, y)
        };
        let (support_x, support_y) = gather(&episode.support);
        let (query_x, query_y) = gather(&episode.query);
        EpisodeProblem {
            theta_template: theta_template.clone(),
            omega_template: omega_template.clone(),
            support_x,
            support_y,
            query_x,
            query_y,
        }
    }

    /// Summed cross-entropy over the set and its flat parameter gradient.
    fn loss_grad(
        &self,
        params: &[f64],
        x: &RealMatrix,
        y: &RealMatrix,
    ) -> Result<(f64, Vec<f64>)> {
        let (theta, omega) = unflatten_like(&self.theta_template, &self.omega_template, params);
        let probs = forward_head(&omega, &forward_features(&theta, x)?)?;
        let (mean_loss, mean_grad) = cross_entropy(&probs, y)?;
        let batch = x.rows() as f64;
        let mut grad_logits = mean_grad;
        for v in grad_logits.values_mut() {
            *v *= batch;
        }
        let grad = backward(&theta, &omega, x, &grad_logits)?;
        Ok((mean_loss * batch, flatten_gradient(&grad)))
    }

    /// Fraction of query rows whose predicted class matches the label.
    pub fn query_accuracy(&self, params: &[f64]) -> Result<f64> {
        let (theta, omega) = unflatten_like(&self.theta_template, &self.omega_template, params);
        let probs = forward_head(&omega, &forward_features(&theta, &self.query_x)?)?;
        let mut correct = 0usize;
        for r in 0..probs.rows() {
            let predicted = usize::from(probs.get(r, 1) > probs.get(r, 0));
            let actual = usize::from(self.query_y.get(r, 1) > 0.5);
            if predicted == actual {
                correct += 1;
            }
        }
        Ok(correct as f64 / probs.rows() as f64)
    }
}

impl AdaptationProblem for EpisodeProblem {
    fn dim(&self) -> usize {
        self.theta_template.param_count() + self.omega_template.param_count()
    }

    fn support_loss_grad(&self, params: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.loss_grad(params, &self.support_x, &self.support_y)
    }

    fn query_loss_grad(&self, params: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.loss_grad(params, &self.query_x, &self.query_y)
    }
}

/// Per-iteration log record: the outer objective at the entering parameters
/// and the adapted query accuracy of each sampled task (by catalog index).
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub objective: f64,
    pub task_accuracy: Vec<(usize, f64)>,
}

/// Everything a meta-training run reports besides the model.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingLog {
    /// Catalog indices whose pools could not supply M + N samples.
    pub excluded_tasks: Vec<usize>,
    pub iterations: Vec<IterationRecord>,
}

/// Runs the full meta-training loop over the task catalog.
///
/// Tasks are materialized against the cluster model's pseudo-labels once;
/// tasks whose pools cannot supply `M + N` samples are excluded up front and
/// listed in the log. Each iteration samples `T` eligible tasks, draws a
/// fresh episode per task, takes one meta step, and refreshes the task
/// statistics with the adapted query accuracies. Fully deterministic given
/// the config seed; the first draws of the seeded generator initialize the
/// meta parameters.
pub fn run_meta_training(
    inputs: &RealMatrix,
    model: &ClusterModel,
    catalog: &TaskCatalog,
    net: &NetSpec,
    config: &MetaConfig,
) -> Result<(MetaModel, TrainingLog)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let theta = net.init_encoder_with(&mut rng);
    let head = net.init_head_with(2, &mut rng)?;
    let mut psi = flatten_params(&theta, &head);

    let mut eligible_indices: Vec<usize> = Vec::new();
    let mut pools: Vec<LabelledPool> = Vec::new();
    let mut excluded = Vec::new();
    for (idx, task) in catalog.tasks.iter().enumerate() {
        let pool = materialize_task(task, model)?;
        if pool.len() >= config.m + config.n {
            eligible_indices.push(idx);
            pools.push(pool);
        } else {
            excluded.push(idx);
        }
    }
    if eligible_indices.is_empty() {
        return Err(Error::InvalidArgument(
            "no catalog task can supply M + N samples".into(),
        ));
    }
    let eligible_catalog = TaskCatalog {
        k: catalog.k,
        tasks: eligible_indices
            .iter()
            .map(|&i| catalog.tasks[i].clone())
            .collect(),
    };

    let mut stats = TaskStats::new(eligible_catalog.len());
    let mut records = Vec::with_capacity(config.iterations);
    for iteration in 0..config.iterations {
        let batch = sample_meta_batch(
            &eligible_catalog,
            &stats,
            config.strategy,
            config.t,
            rng.gen(),
        )?;
        let problems: Vec<EpisodeProblem> = batch
            .iter()
            .map(|&pos| {
                let episode = sample_episode(&pools[pos], config.m, config.n, rng.gen())?;
                Ok(EpisodeProblem::new(inputs, &episode, &theta, &head))
            })
            .collect::<Result<_>>()?;

        let outcome = meta_step(&psi, &problems, config)?;
        let mut task_accuracy = Vec::with_capacity(batch.len());
        for (slot, &pos) in batch.iter().enumerate() {
            let accuracy = problems[slot].query_accuracy(&outcome.adapted[slot])?;
            stats.update(pos, accuracy);
            task_accuracy.push((eligible_indices[pos], accuracy));
        }
        records.push(IterationRecord {
            iteration,
            objective: outcome.objective,
            task_accuracy,
        });
        psi = outcome.psi;
    }

    let (encoder, head) = unflatten_like(&theta, &head, &psi);
    Ok((
        MetaModel::new(encoder, head)?,
        TrainingLog {
            excluded_tasks: excluded,
            iterations: records,
        },
    ))
}
