//! Binary task design over pseudo-classes: counting, exhaustive enumeration,
//! pool materialization, and support/query episode sampling.
//!
//! A task is an unordered pair of nonempty disjoint pseudo-class subsets;
//! swapping the two sides relabels the same problem, so the lexicographically
//! smaller subset is always class 0.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::clustering::ClusterModel;
use crate::error::{Error, Result};

/// One binary classification task: two disjoint nonempty sets of
/// pseudo-class indices, in canonical order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskSpec {
    class0: Vec<usize>,
    class1: Vec<usize>,
}

impl TaskSpec {
    /// Builds a task in canonical form (the lexicographically smaller sorted
    /// subset becomes class 0). The subsets must be nonempty and disjoint.
    pub fn new(a: &[usize], b: &[usize]) -> Result<TaskSpec> {
        let mut a = a.to_vec();
        let mut b = b.to_vec();
        a.sort_unstable();
        a.dedup();
        b.sort_unstable();
        b.dedup();
        if a.is_empty() || b.is_empty() {
            return Err(Error::InvalidArgument("task subsets must be nonempty".into()));
        }
        if a.iter().any(|x| b.binary_search(x).is_ok()) {
            return Err(Error::InvalidArgument("task subsets must be disjoint".into()));
        }
        if a <= b {
            Ok(TaskSpec { class0: a, class1: b })
        } else {
            Ok(TaskSpec { class0: b, class1: a })
        }
    }

    pub fn class0(&self) -> &[usize] {
        &self.class0
    }

    pub fn class1(&self) -> &[usize] {
        &self.class1
    }

    /// Text form used by the catalog listing: `0 2 | 1 4`.
    pub fn to_line(&self) -> String {
        let side = |s: &[usize]| {
            s.iter()
                .map(|i| i.to_string())
                .collect::<Vec<_>>()
                .join(" ")
        };
        format!("{} | {}", side(&self.class0), side(&self.class1))
    }

    /// Parses the [`to_line`](Self::to_line) form.
    pub fn from_line(line: &str) -> Result<TaskSpec> {
        let (left, right) = line
            .split_once('|')
            .ok_or_else(|| Error::InvalidArgument(format!("task line `{line}` has no `|`")))?;
        let parse_side = |s: &str| -> Result<Vec<usize>> {
            s.split_whitespace()
                .map(|t| {
                    t.parse::<usize>().map_err(|_| {
                        Error::InvalidArgument(format!("bad class index `{t}` in task line"))
                    })
                })
                .collect()
        };
        TaskSpec::new(&parse_side(left)?, &parse_side(right)?)
    }
}

/// Every designable task for a given K, in a deterministic order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskCatalog {
    pub k: usize,
    pub tasks: Vec<TaskSpec>,
}

impl TaskCatalog {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }
}

fn binomial(n: u64, k: u64) -> u64 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut result = 1u64;
    for i in 0..k {
        result = result * (n - i) / (i + 1);
    }
    result
}

/// Number of unordered pairs of nonempty disjoint subsets of `{0..K-1}`:
/// a double sum over the two subset sizes, halving the equal-size diagonal.
pub fn count_tasks(k: usize) -> Result<u64> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!(
            "task design needs at least 2 pseudo-classes, got {k}"
        )));
    }
    if k > 20 {
        return Err(Error::InvalidArgument(format!(
            "task count overflows for K = {k} (max 20)"
        )));
    }
    let n = k as u64;
    let mut total = 0u64;
    for i in 1..n {
        let upper = i.min(n - i);
        for j in 1..=upper {
            let ordered = binomial(n, i) * binomial(n - i, j);
            total += if i == j { ordered / 2 } else { ordered };
        }
    }
    Ok(total)
}

/// Lists every task exactly once, ordered by subset-size pair and then
/// lexicographically by the canonical subsets.
pub fn enumerate_tasks(k: usize) -> Result<TaskCatalog> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!(
            "task design needs at least 2 pseudo-classes, got {k}"
        )));
    }
    if k > 16 {
        return Err(Error::InvalidArgument(format!(
            "enumeration is intended for K <= 16, got {k}"
        )));
    }
    let masks = 1u32 << k;
    let to_set = |mask: u32| -> Vec<usize> { (0..k).filter(|&i| mask & (1 << i) != 0).collect() };

    let mut tasks = Vec::new();
    for a in 1..masks {
        let complement = (masks - 1) & !a;
        // Walk the nonempty submasks of the complement.
        let mut b = complement;
        while b != 0 {
            let set_a = to_set(a);
            let set_b = to_set(b);
            if set_a < set_b {
                tasks.push(TaskSpec {
                    class0: set_a,
                    class1: set_b,
                });
            }
            b = (b - 1) & complement;
        }
    }
    tasks.sort_by(|x, y| {
        (x.class0.len(), x.class1.len(), &x.class0, &x.class1).cmp(&(
            y.class0.len(),
            y.class1.len(),
            &y.class0,
            &y.class1,
        ))
    });
    Ok(TaskCatalog { k, tasks })
}

/// Renders a catalog as one task per line.
pub fn catalog_to_text(catalog: &TaskCatalog) -> String {
    let mut out = String::new();
    for task in &catalog.tasks {
        out.push_str(&task.to_line());
        out.push('\n');
    }
    out
}

/// Parses a catalog listing back into tasks over `k` pseudo-classes.
pub fn catalog_from_text(k: usize, text: &str) -> Result<TaskCatalog> {
    let mut tasks = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let task = TaskSpec::from_line(line).map_err(|e| Error::parse(idx + 1, e.to_string()))?;
        if task.class0.iter().chain(&task.class1).any(|&c| c >= k) {
            return Err(Error::parse(
                idx + 1,
                format!("class index out of range for K = {k}"),
            ));
        }
        tasks.push(task);
    }
    Ok(TaskCatalog { k, tasks })
}

/// All samples of one materialized task: dataset row index plus binary label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelledPool {
    pub members: Vec<(usize, bool)>,
}

impl LabelledPool {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    fn side(&self, label: bool) -> Vec<(usize, bool)> {
        self.members
            .iter()
            .copied()
            .filter(|&(_, y)| y == label)
            .collect()
    }
}

/// Labels every sample whose pseudo-class is in the task's class-0 subset as
/// 0 and class-1 subset as 1; samples in neither subset are excluded.
pub fn materialize_task(task: &TaskSpec, model: &ClusterModel) -> Result<LabelledPool> {
    if task
        .class0
        .iter()
        .chain(&task.class1)
        .any(|&c| c >= model.k)
    {
        return Err(Error::InvalidArgument(format!(
            "task references a pseudo-class outside [0, {})",
            model.k
        )));
    }
    let mut members = Vec::new();
    for (i, &cluster) in model.pseudo_labels.assignments().iter().enumerate() {
        if task.class0.contains(&cluster) {
            members.push((i, false));
        } else if task.class1.contains(&cluster) {
            members.push((i, true));
        }
    }
    let pool = LabelledPool { members };
    for (label, subset) in [(false, &task.class0), (true, &task.class1)] {
        if pool.side(label).is_empty() {
            return Err(Error::EmptyClass(format!(
                "pseudo-classes {subset:?} hold no samples"
            )));
        }
    }
    Ok(pool)
}

/// A sampled episode: a small labelled support set and a larger query set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    pub support: Vec<(usize, bool)>,
    pub query: Vec<(usize, bool)>,
}

/// Draws a support set of size `m` and a disjoint query set of size `n` from
/// the pool, uniformly without replacement, class-balanced per set whenever
/// each class has enough members (topping up from the other class when not).
pub fn sample_episode(pool: &LabelledPool, m: usize, n: usize, seed: u64) -> Result<Episode> {
    if m < 2 || n < 2 {
        return Err(Error::InvalidArgument(format!(
            "support and query sizes must be at least 2, got M = {m}, N = {n}"
        )));
    }
    if m >= n {
        return Err(Error::InvalidArgument(format!(
            "support must be smaller than query, got M = {m}, N = {n}"
        )));
    }
    if m + n > pool.len() {
        return Err(Error::InvalidArgument(format!(
            "pool of {} cannot supply M + N = {}",
            pool.len(),
            m + n
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut negatives = pool.side(false);
    let mut positives = pool.side(true);
    negatives.shuffle(&mut rng);
    positives.shuffle(&mut rng);

    let take_balanced =
        |want: usize, neg: &mut Vec<(usize, bool)>, pos: &mut Vec<(usize, bool)>| {
            let target_neg = want / 2;
            let target_pos = want - target_neg;
            let from_neg = target_neg.min(neg.len());
            let from_pos = target_pos.min(pos.len());
            let mut out: Vec<(usize, bool)> = neg.drain(..from_neg).collect();
            out.extend(pos.drain(..from_pos));
            // Top up from whichever class still has members.
            while out.len() < want {
                if let Some(s) = neg.pop() {
                    out.push(s);
                } else if let Some(s) = pos.pop() {
                    out.push(s);
                } else {
                    break;
                }
            }
            out
        };

    let support = take_balanced(m, &mut negatives, &mut positives);
    let query = take_balanced(n, &mut negatives, &mut positives);
    debug_assert_eq!(support.len(), m);
    debug_assert_eq!(query.len(), n);
    Ok(Episode { support, query })
}
