//! K-means with k-means++ seeding, exact silhouette scoring, and the
//! alternating deep-clustering loop with silhouette-based model selection.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::matrix::RealMatrix;
use crate::nn::{
    backward, cross_entropy, forward_features, forward_head, one_hot, sgd_step, EncoderParams,
    HeadParams, NetSpec,
};

const MAX_LLOYD_ITERATIONS: usize = 300;

/// Cluster centers, stored as a `D x K` matrix with one centroid per column.
#[derive(Debug, Clone, PartialEq)]
pub struct Centroids {
    matrix: RealMatrix,
}

impl Centroids {
    /// Wraps a `D x K` matrix whose columns are centroids.
    pub fn new(matrix: RealMatrix) -> Result<Centroids> {
        if matrix.cols() == 0 {
            return Err(Error::InvalidArgument("centroid matrix has no columns".into()));
        }
        Ok(Centroids { matrix })
    }

    fn from_rows(rows: &[Vec<f64>]) -> Centroids {
        let d = rows.first().map_or(0, Vec::len);
        let k = rows.len();
        let mut matrix = RealMatrix::zeros(d, k);
        for (col, row) in rows.iter().enumerate() {
            for (dim, &v) in row.iter().enumerate() {
                matrix.set(dim, col, v);
            }
        }
        Centroids { matrix }
    }

    pub fn matrix(&self) -> &RealMatrix {
        &self.matrix
    }

    pub fn k(&self) -> usize {
        self.matrix.cols()
    }

    pub fn dim(&self) -> usize {
        self.matrix.rows()
    }

    /// The centroid for cluster `k` as a dense vector.
    pub fn centroid(&self, k: usize) -> Vec<f64> {
        (0..self.matrix.rows()).map(|d| self.matrix.get(d, k)).collect()
    }
}

/// One cluster assignment per sample, each in `[0, K)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PseudoLabels {
    assignments: Vec<usize>,
    k: usize,
}

impl PseudoLabels {
    pub fn new(assignments: Vec<usize>, k: usize) -> Result<PseudoLabels> {
        if let Some(&bad) = assignments.iter().find(|&&a| a >= k) {
            return Err(Error::InvalidArgument(format!(
                "assignment {bad} out of range for K = {k}"
            )));
        }
        Ok(PseudoLabels { assignments, k })
    }

    pub fn assignments(&self) -> &[usize] {
        &self.assignments
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.assignments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }

    /// Number of samples assigned to each cluster.
    pub fn histogram(&self) -> Vec<usize> {
        let mut hist = vec![0usize; self.k];
        for &a in &self.assignments {
            hist[a] += 1;
        }
        hist
    }
}

/// Output of one k-means run.
#[derive(Debug, Clone, PartialEq)]
pub struct KmeansResult {
    pub centroids: Centroids,
    pub labels: PseudoLabels,
    /// Mean squared distance of each sample to its centroid.
    pub objective: f64,
    /// Objective after the initial assignment and after every Lloyd update.
    pub objective_history: Vec<f64>,
}

/// K-means with k-means++ seeding. Runs Lloyd iterations until assignments
/// stop changing (or 300 iterations), repairing empty clusters by reseeding
/// them on the farthest point of the largest cluster.
pub fn kmeans(features: &RealMatrix, k: usize, seed: u64) -> Result<KmeansResult> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("K must be at least 2, got {k}")));
    }
    kmeans_any_k(features, k, seed)
}

/// Internal entry that also allows K = 1 (used by degenerate fixtures).
pub(crate) fn kmeans_any_k(features: &RealMatrix, k: usize, seed: u64) -> Result<KmeansResult> {
    let n = features.rows();
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!(
            "K = {k} must be between 1 and the sample count {n}"
        )));
    }
    if !features.is_finite() {
        return Err(Error::InvalidArgument("features contain non-finite values".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let initial = kmeans_plus_plus(features, k, &mut rng);
    lloyd(features, initial)
}

/// k-means++ seeding: first center uniform, later centers sampled with
/// probability proportional to squared distance from the chosen set.
fn kmeans_plus_plus(features: &RealMatrix, k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = features.rows();
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    centers.push(features.row(rng.gen_range(0..n)).to_vec());

    let mut dist_sq = vec![0.0f64; n];
    while centers.len() < k {
        let latest = centers.last().expect("nonempty");
        for (i, d) in dist_sq.iter_mut().enumerate() {
            let to_latest = RealMatrix::squared_distance(features.row(i), latest);
            *d = if centers.len() == 1 { to_latest } else { d.min(to_latest) };
        }
        let total: f64 = dist_sq.iter().sum();
        let choice = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in dist_sq.iter().enumerate() {
                if target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            pick
        } else {
            // All points coincide with a chosen center; any point works.
            rng.gen_range(0..n)
        };
        centers.push(features.row(choice).to_vec());
    }
    centers
}

/// Lloyd iterations from explicit initial centers.
pub(crate) fn lloyd(features: &RealMatrix, mut centers: Vec<Vec<f64>>) -> Result<KmeansResult> {
    let k = centers.len();
    let mut labels = assign_nearest(features, &centers);
    let mut history = vec![mean_squared_objective(features, &centers, &labels)];

    for _ in 0..MAX_LLOYD_ITERATIONS {
        update_centers(features, &labels, &mut centers);
        repair_empty_clusters(features, &mut labels, &mut centers);
        let new_labels = assign_nearest(features, &centers);
        history.push(mean_squared_objective(features, &centers, &new_labels));
        if new_labels == labels {
            break;
        }
        labels = new_labels;
    }

    // Leave centers as exact means of their members and every cluster
    // inhabited; repair is a no-op when no cluster is empty.
    update_centers(features, &labels, &mut centers);
    repair_empty_clusters(features, &mut labels, &mut centers);
    update_centers(features, &labels, &mut centers);
    let objective = mean_squared_objective(features, &centers, &labels);

    Ok(KmeansResult {
        centroids: Centroids::from_rows(&centers),
        labels: PseudoLabels::new(labels, k)?,
        objective,
        objective_history: history,
    })
}

fn assign_nearest(features: &RealMatrix, centers: &[Vec<f64>]) -> Vec<usize> {
    (0..features.rows())
        .map(|i| {
            let row = features.row(i);
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (c, center) in centers.iter().enumerate() {
                let d = RealMatrix::squared_distance(row, center);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            best
        })
        .collect()
}

fn update_centers(features: &RealMatrix, labels: &[usize], centers: &mut [Vec<f64>]) {
    let dim = features.cols();
    let mut counts = vec![0usize; centers.len()];
    let mut sums = vec![vec![0.0f64; dim]; centers.len()];
    for (i, &label) in labels.iter().enumerate() {
        counts[label] += 1;
        for (d, &v) in features.row(i).iter().enumerate() {
            sums[label][d] += v;
        }
    }
    for (c, center) in centers.iter_mut().enumerate() {
        if counts[c] > 0 {
            for d in 0..dim {
                center[d] = sums[c][d] / counts[c] as f64;
            }
        }
        // Empty clusters keep their previous center until repaired.
    }
}

/// Re-seeds every empty cluster on the farthest member of the largest one.
fn repair_empty_clusters(features: &RealMatrix, labels: &mut [usize], centers: &mut [Vec<f64>]) {
    loop {
        let mut counts = vec![0usize; centers.len()];
        for &l in labels.iter() {
            counts[l] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let largest = counts
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(c, _)| c)
            .expect("at least one cluster");
        let farthest = labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == largest)
            .max_by(|(i, _), (j, _)| {
                let di = RealMatrix::squared_distance(features.row(*i), &centers[largest]);
                let dj = RealMatrix::squared_distance(features.row(*j), &centers[largest]);
                di.partial_cmp(&dj).unwrap().then(j.cmp(i))
            })
            .map(|(i, _)| i)
            .expect("largest cluster is nonempty");
        centers[empty] = features.row(farthest).to_vec();
        labels[farthest] = empty;
    }
}

fn mean_squared_objective(features: &RealMatrix, centers: &[Vec<f64>], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| RealMatrix::squared_distance(features.row(i), &centers[l]))
        .sum();
    total / labels.len() as f64
}

/// Mean silhouette over all samples: per point, `(b - a) / max(a, b)` where
/// `a` is the mean distance to same-cluster points and `b` the smallest mean
/// distance to any other cluster. Points in singleton clusters score 0.
pub fn silhouette(features: &RealMatrix, labels: &PseudoLabels) -> Result<f64> {
    let n = features.rows();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "silhouette needs at least 2 samples, got {n}"
        )));
    }
    if labels.len() != n {
        return Err(Error::Shape(format!(
            "{} labels for {n} samples",
            labels.len()
        )));
    }
    let hist = labels.histogram();
    let distinct = hist.iter().filter(|&&c| c > 0).count();
    if distinct < 2 {
        return Err(Error::InvalidArgument(
            "silhouette is undefined with a single cluster".into(),
        ));
    }

    let k = labels.k();
    let assignments = labels.assignments();
    let mut total = 0.0;
    for i in 0..n {
        let own = assignments[i];
        if hist[own] <= 1 {
            continue; // singleton convention: s = 0
        }
        let mut sums = vec![0.0f64; k];
        for j in 0..n {
            if i == j {
                continue;
            }
            let d = RealMatrix::squared_distance(features.row(i), features.row(j)).sqrt();
            sums[assignments[j]] += d;
        }
        let a = sums[own] / (hist[own] - 1) as f64;
        let mut b = f64::INFINITY;
        for c in 0..k {
            if c != own && hist[c] > 0 {
                b = b.min(sums[c] / hist[c] as f64);
            }
        }
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / n as f64)
}

/// Rows scaled to unit Euclidean norm; zero rows stay zero.
pub fn l2_normalize_rows(features: &RealMatrix) -> RealMatrix {
    let mut out = features.clone();
    for r in 0..out.rows() {
        let norm = out.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for c in 0..out.cols() {
                out.set(r, c, out.get(r, c) / norm);
            }
        }
    }
    out
}

/// Features the clustering stage sees: encoder output, rows normalized.
pub fn cluster_features(theta: &EncoderParams, inputs: &RealMatrix) -> Result<RealMatrix> {
    Ok(l2_normalize_rows(&forward_features(theta, inputs)?))
}

/// Encoder, head, and clustering state selected by silhouette.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub theta: EncoderParams,
    pub omega: HeadParams,
    pub centroids: Centroids,
    pub pseudo_labels: PseudoLabels,
    pub kappa: f64,
    pub k: usize,
}

/// Knobs for [`deep_cluster`].
#[derive(Debug, Clone, PartialEq)]
pub struct DeepClusterConfig {
    pub net: NetSpec,
    pub lr: f64,
}

/// Alternates k-means pseudo-labelling with pseudo-label training, scoring
/// each round by silhouette and returning the best round's snapshot.
///
/// Per round: (a) normalize the current encoder features and k-means them to
/// refresh centroids and pseudo-labels; (b) re-initialize the head (cluster
/// indices are arbitrary across rounds) and train encoder plus head with
/// full-batch gradient descent on cross-entropy against the pseudo-labels;
/// then score the round. The first draws of the seeded generator initialize
/// the encoder, so the run is fully reproducible from `seed`.
pub fn deep_cluster(
    inputs: &RealMatrix,
    k: usize,
    rounds: usize,
    epochs_per_round: usize,
    config: &DeepClusterConfig,
    seed: u64,
) -> Result<ClusterModel> {
    if rounds == 0 {
        return Err(Error::InvalidArgument("rounds must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut theta = config.net.init_encoder_with(&mut rng);

    let mut best: Option<ClusterModel> = None;
    for _round in 0..rounds {
        let feats = cluster_features(&theta, inputs)?;
        let km = kmeans(&feats, k, rng.gen())?;
        let targets = one_hot(km.labels.assignments(), k)?;

        // Pseudo-class indices are arbitrary across rounds; start the head
        // fresh after every reassignment.
        let mut omega = config.net.init_head_with(k, &mut rng)?;
        for _ in 0..epochs_per_round {
            let probs = forward_head(&omega, &forward_features(&theta, inputs)?)?;
            let (loss, grad_logits) = cross_entropy(&probs, &targets)?;
            if !loss.is_finite() {
                return Err(Error::Diverged(format!(
                    "pseudo-label loss became {loss}"
                )));
            }
            let grad = backward(&theta, &omega, inputs, &grad_logits)?;
            let (t, o) = sgd_step(&theta, &omega, &grad, config.lr);
            theta = t;
            omega = o;
        }

        let round_feats = cluster_features(&theta, inputs)?;
        let kappa = silhouette(&round_feats, &km.labels)?;
        let candidate = ClusterModel {
            theta: theta.clone(),
            omega: omega.clone(),
            centroids: km.centroids,
            pseudo_labels: km.labels,
            kappa,
            k,
        };
        if best.as_ref().is_none_or(|b| candidate.kappa > b.kappa) {
            best = Some(candidate);
        }
    }
    Ok(best.expect("rounds >= 1"))
}
