//! Acceptance suite: every release gate runs here at its stated tolerance and
//! prints one pass/fail line (visible with `cargo test -- --nocapture`).

use std::collections::BTreeSet;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use umt_cli::config::ExperimentConfig;
use umt_core::clustering::{kmeans, silhouette, PseudoLabels};
use umt_core::data::{assign_downstream_labels, generate_blobs, split_groupwise, Dataset};
use umt_core::eval::{auc, auc_standard_error, run_baseline, BaselineMethod};
use umt_core::matrix::RealMatrix;
use umt_core::meta::{
    meta_gradient, outer_objective, AdaptationProblem, EpisodeProblem, MetaMode, SamplingStrategy,
};
use umt_core::nn::{flatten_params, gradient_check, one_hot, CheckLoss, NetSpec};
use umt_core::tasks::{count_tasks, enumerate_tasks, sample_episode, LabelledPool};
use umt_core::Result;

fn verdict(criterion: &str, pass: bool, detail: String) {
    println!(
        "ACCEPTANCE {criterion}: {} ({detail})",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "{criterion}: {detail}");
}

fn within_budget(start: Instant, budget: Duration, criterion: &str) {
    let elapsed = start.elapsed();
    assert!(
        elapsed <= budget,
        "{criterion} exceeded its time budget: {elapsed:?} > {budget:?}"
    );
}

#[test]
fn c1_task_counting() {
    let start = Instant::now();

    let headline = count_tasks(3).unwrap() == 6
        && count_tasks(4).unwrap() == 25
        && count_tasks(5).unwrap() == 90;

    // Brute-force oracle: unordered pairs of disjoint nonempty bitmask sets.
    let mut all_match = headline;
    for k in 2..=8u32 {
        let masks = 1u32 << k;
        let mut brute = 0u64;
        for a in 1..masks {
            for b in (a + 1)..masks {
                if a & b == 0 {
                    brute += 1;
                }
            }
        }
        let closed = (3u64.pow(k) - 2u64.pow(k + 1)).div_ceil(2);
        let counted = count_tasks(k as usize).unwrap();
        let enumerated = enumerate_tasks(k as usize).unwrap().len() as u64;
        all_match &= counted == brute && counted == closed && enumerated == brute;
    }

    within_budget(start, Duration::from_secs(1), "C1");
    verdict(
        "C1 task-counting",
        all_match,
        format!(
            "K=3,4,5 -> {},{},{}; formula = enumeration = brute force for K in 2..=8",
            count_tasks(3).unwrap(),
            count_tasks(4).unwrap(),
            count_tasks(5).unwrap()
        ),
    );
}

#[test]
fn c2_gradient_fidelity() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let mut worst: f64 = 0.0;

    for net_index in 0..20 {
        let input_dim = rng.gen_range(2..8);
        let hidden = match rng.gen_range(0..3) {
            0 => vec![],
            1 => vec![rng.gen_range(3..12)],
            _ => vec![rng.gen_range(3..10), rng.gen_range(3..8)],
        };
        let feature_dim = rng.gen_range(2..8);
        let classes = rng.gen_range(2..5);
        let net = NetSpec::new(input_dim, hidden, feature_dim);
        let (theta, omega) = {
            let theta = net.init_encoder(rng.gen());
            let omega = net.init_head(classes, rng.gen()).unwrap();
            // Jitter every parameter: zero biases can park a rectifier row
            // exactly on its kink, where subgradient and central differences
            // legitimately disagree.
            let mut flat = flatten_params(&theta, &omega);
            for v in &mut flat {
                *v += rng.gen_range(-0.1..0.1);
            }
            umt_core::nn::unflatten_like(&theta, &omega, &flat)
        };
        let params = theta.param_count() + omega.param_count();
        assert!(params <= 1000, "net {net_index} has {params} parameters");

        let batch_size = rng.gen_range(2..6);
        let values: Vec<f64> = (0..batch_size * input_dim)
            .map(|_| rng.gen_range(-1.5..1.5))
            .collect();
        let batch = RealMatrix::new(batch_size, input_dim, values).unwrap();
        let labels: Vec<usize> = (0..batch_size).map(|_| rng.gen_range(0..classes)).collect();
        let targets = one_hot(&labels, classes).unwrap();

        let err = gradient_check(&theta, &omega, &batch, &targets, CheckLoss::CrossEntropy, 1e-6)
            .unwrap();
        worst = worst.max(err);
    }

    within_budget(start, Duration::from_secs(30), "C2");
    verdict(
        "C2 gradient-fidelity",
        worst < 1e-5,
        format!("worst relative error over 20 nets = {worst:.3e}"),
    );
}

struct Quadratic {
    support_center: f64,
    query_center: f64,
}

impl AdaptationProblem for Quadratic {
    fn dim(&self) -> usize {
        1
    }

    fn support_loss_grad(&self, params: &[f64]) -> Result<(f64, Vec<f64>)> {
        let d = params[0] - self.support_center;
        Ok((d * d / 2.0, vec![d]))
    }

    fn query_loss_grad(&self, params: &[f64]) -> Result<(f64, Vec<f64>)> {
        let d = params[0] - self.query_center;
        Ok((d * d / 2.0, vec![d]))
    }
}

#[test]
fn c3_maml_oracle() {
    let start = Instant::now();

    let fixture = Quadratic {
        support_center: 2.0,
        query_center: 4.0,
    };
    let first_order = meta_gradient(&[fixture], &[0.0], 0.1, MetaMode::FirstOrder).unwrap()[0];
    let fixture = Quadratic {
        support_center: 2.0,
        query_center: 4.0,
    };
    let exact = meta_gradient(&[fixture], &[0.0], 0.1, MetaMode::ExactFd).unwrap()[0];
    let fixture_ok = (first_order - (-3.8)).abs() < 1e-8 && (exact - (-3.42)).abs() < 1e-8;

    // Dual route on a tiny random net: exact mode against scalar central
    // finite differences of the outer objective over psi.
    let ds = generate_blobs(2, 12, 3, 6.0, 1.0, 3).unwrap();
    let inputs = ds.feature_matrix(&(0..ds.len()).collect::<Vec<_>>());
    let members = ds
        .samples()
        .iter()
        .enumerate()
        .map(|(i, s)| (i, s.hidden_class() == 1))
        .collect();
    let episode = sample_episode(&LabelledPool { members }, 4, 8, 3).unwrap();
    let net = NetSpec::new(3, vec![4], 2);
    let theta = net.init_encoder(3);
    let head = net.init_head(2, 4).unwrap();
    let problem = EpisodeProblem::new(&inputs, &episode, &theta, &head);
    let psi = flatten_params(&net.init_encoder(9), &net.init_head(2, 10).unwrap());
    let alpha = 0.05;
    let exact_grad = meta_gradient(
        std::slice::from_ref(&problem),
        &psi,
        alpha,
        MetaMode::ExactFd,
    )
    .unwrap();
    let h = 1e-5;
    let mut worst_rel: f64 = 0.0;
    for j in 0..psi.len() {
        let mut plus = psi.clone();
        plus[j] += h;
        let mut minus = psi.clone();
        minus[j] -= h;
        let op = outer_objective(std::slice::from_ref(&problem), &plus, alpha).unwrap();
        let om = outer_objective(std::slice::from_ref(&problem), &minus, alpha).unwrap();
        let numeric = -(op - om) / (2.0 * h);
        let denom = exact_grad[j].abs().max(numeric.abs()).max(1e-6);
        worst_rel = worst_rel.max(((exact_grad[j] - numeric) / denom).abs());
    }

    within_budget(start, Duration::from_secs(10), "C3");
    verdict(
        "C3 maml-oracle",
        fixture_ok && worst_rel < 1e-4,
        format!(
            "first-order {first_order:.10}, exact {exact:.10}, net-vs-FD rel {worst_rel:.3e}"
        ),
    );
}

/// Independent silhouette oracle: naive per-point distance lists.
fn silhouette_oracle(features: &RealMatrix, labels: &PseudoLabels) -> f64 {
    let n = features.rows();
    let a = labels.assignments();
    let mut total = 0.0;
    for i in 0..n {
        let mut per_cluster: Vec<Vec<f64>> = vec![vec![]; labels.k()];
        for j in 0..n {
            if i != j {
                per_cluster[a[j]]
                    .push(RealMatrix::squared_distance(features.row(i), features.row(j)).sqrt());
            }
        }
        let own = &per_cluster[a[i]];
        if own.is_empty() {
            continue;
        }
        let ai = own.iter().sum::<f64>() / own.len() as f64;
        let bi = per_cluster
            .iter()
            .enumerate()
            .filter(|(c, d)| *c != a[i] && !d.is_empty())
            .map(|(_, d)| d.iter().sum::<f64>() / d.len() as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = ai.max(bi);
        if denom > 0.0 {
            total += (bi - ai) / denom;
        }
    }
    total / n as f64
}

#[test]
fn c4_clustering_oracles() {
    let start = Instant::now();

    let mut monotone = true;
    for seed in 0..100u64 {
        let ds = generate_blobs(4, 12, 3, 3.0, 1.2, seed).unwrap();
        let features = ds.feature_matrix(&(0..ds.len()).collect::<Vec<_>>());
        let result = kmeans(&features, 4, seed).unwrap();
        for pair in result.objective_history.windows(2) {
            monotone &= pair[1] <= pair[0] + 1e-12;
        }
    }

    let mut silhouette_exact = true;
    for seed in 0..40u64 {
        let ds = generate_blobs(3, 7, 2, 2.5, 1.0, seed).unwrap();
        let features = ds.feature_matrix(&(0..ds.len()).collect::<Vec<_>>());
        assert!(features.rows() <= 64);
        let labels = kmeans(&features, 3, seed).unwrap().labels;
        let fast = silhouette(&features, &labels).unwrap();
        let slow = silhouette_oracle(&features, &labels);
        silhouette_exact &= (fast - slow).abs() < 1e-12;
    }

    let fixture = RealMatrix::new(4, 1, vec![0.0, 1.0, 10.0, 11.0]).unwrap();
    let fixture_labels = PseudoLabels::new(vec![0, 0, 1, 1], 2).unwrap();
    let kappa = silhouette(&fixture, &fixture_labels).unwrap();
    let fixture_ok = (kappa - 0.899749).abs() < 1e-6;

    within_budget(start, Duration::from_secs(30), "C4");
    verdict(
        "C4 clustering-oracles",
        monotone && silhouette_exact && fixture_ok,
        format!(
            "objective monotone on 100 instances = {monotone}, silhouette matches oracle = {silhouette_exact}, fixture kappa = {kappa:.6}"
        ),
    );
}

#[test]
fn c5_auc_oracles() {
    let start = Instant::now();

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut exact = true;
    for _ in 0..1000 {
        let n_pos = rng.gen_range(1..=100);
        let n_neg = rng.gen_range(1..=100);
        // Mix coarse grids (forcing ties) with continuous scores.
        let coarse = rng.gen_bool(0.5);
        let draw = |rng: &mut ChaCha8Rng| {
            if coarse {
                (rng.gen_range(0..10) as f64) / 5.0
            } else {
                rng.gen_range(-2.0..2.0)
            }
        };
        let pos: Vec<f64> = (0..n_pos).map(|_| draw(&mut rng)).collect();
        let neg: Vec<f64> = (0..n_neg).map(|_| draw(&mut rng)).collect();
        assert!(pos.len() + neg.len() <= 200);

        let fast = auc(&pos, &neg).unwrap();
        let mut slow = 0.0;
        for &p in &pos {
            for &q in &neg {
                if p > q {
                    slow += 1.0;
                } else if p == q {
                    slow += 0.5;
                }
            }
        }
        slow /= (pos.len() * neg.len()) as f64;
        exact &= fast == slow;
    }

    let se = auc_standard_error(0.75, 2, 2).unwrap();
    let se_ok = (se - 0.27629).abs() < 1e-5;

    within_budget(start, Duration::from_secs(10), "C5");
    verdict(
        "C5 auc-oracles",
        exact && se_ok,
        format!("pair counting exact on 1000 instances = {exact}, SE fixture = {se:.5}"),
    );
}

struct BenchmarkOutcome {
    scratch: f64,
    umt_k5: f64,
    umt_k3: f64,
    elapsed: Duration,
}

fn default_dataset(config: &ExperimentConfig) -> Dataset {
    let ds = generate_blobs(
        config.g,
        config.per_class,
        config.d_in,
        config.separation,
        config.noise,
        config.data_seed,
    )
    .unwrap();
    let positive: BTreeSet<usize> = config.positive_classes.iter().copied().collect();
    let ds = assign_downstream_labels(ds, &positive).unwrap();
    split_groupwise(
        ds,
        (config.train_frac, config.val_frac, config.test_frac),
        config.data_seed,
    )
    .unwrap()
}

/// Criteria 6 and 7 share one deterministic benchmark run.
fn benchmark() -> &'static BenchmarkOutcome {
    static OUTCOME: OnceLock<BenchmarkOutcome> = OnceLock::new();
    OUTCOME.get_or_init(|| {
        let config = ExperimentConfig::default();
        let dataset = default_dataset(&config);
        let start = Instant::now();
        let scratch = run_baseline(
            BaselineMethod::FromScratch,
            &dataset,
            &config.pipeline(config.k, SamplingStrategy::Random),
        )
        .unwrap();
        let umt_k5 = run_baseline(
            BaselineMethod::UmtFineTune,
            &dataset,
            &config.pipeline(5, SamplingStrategy::Random),
        )
        .unwrap();
        let umt_k3 = run_baseline(
            BaselineMethod::UmtFineTune,
            &dataset,
            &config.pipeline(3, SamplingStrategy::Random),
        )
        .unwrap();
        assert_eq!(scratch.seeds.len(), 10);
        BenchmarkOutcome {
            scratch: scratch.auc,
            umt_k5: umt_k5.auc,
            umt_k3: umt_k3.auc,
            elapsed: start.elapsed(),
        }
    })
}

#[test]
fn c6_end_to_end_gap() {
    let outcome = benchmark();
    let gap = outcome.umt_k5 - outcome.scratch;
    let pass = gap >= 0.03 && outcome.elapsed <= Duration::from_secs(600);
    verdict(
        "C6 end-to-end-gap",
        pass,
        format!(
            "umt_finetune {:.4} vs from_scratch {:.4} over 10 seeds: gap {gap:+.4} (needs >= 0.03), runtime {:.1?}",
            outcome.umt_k5, outcome.scratch, outcome.elapsed
        ),
    );
}

#[test]
fn c7_task_count_trend() {
    let outcome = benchmark();
    // Soft tolerance: more tasks (K = 5) should do at least about as well as
    // fewer (K = 3) under random sampling.
    let pass = outcome.umt_k5 >= outcome.umt_k3 - 0.02;
    verdict(
        "C7 task-count-trend",
        pass,
        format!(
            "K=5 {:.4} vs K=3 {:.4} (needs K5 >= K3 - 0.02)",
            outcome.umt_k5, outcome.umt_k3
        ),
    );
}

#[test]
fn c8_determinism() {
    // Library route: identical config + seeds reproduce metrics bit for bit.
    let mut config = ExperimentConfig::with_profile(umt_cli::config::Profile::Smoke);
    config.seeds = vec![0, 1];
    let dataset = default_dataset(&config);
    let first = run_baseline(
        BaselineMethod::UmtFineTune,
        &dataset,
        &config.pipeline(config.k, SamplingStrategy::Random),
    )
    .unwrap();
    let second = run_baseline(
        BaselineMethod::UmtFineTune,
        &dataset,
        &config.pipeline(config.k, SamplingStrategy::Random),
    )
    .unwrap();
    let reports_identical =
        first == second && first.to_line() == second.to_line();

    // Command route: the full evaluate command twice into fresh directories.
    let base = std::env::temp_dir().join(format!("umt-acceptance-{}", std::process::id()));
    let mut results = Vec::new();
    for run in 0..2 {
        let dir = base.join(format!("run{run}"));
        std::fs::create_dir_all(&dir).unwrap();
        let mut cfg = ExperimentConfig::with_profile(umt_cli::config::Profile::Smoke);
        cfg.out_dir = dir.clone();
        cfg.methods = vec![BaselineMethod::FromScratch, BaselineMethod::UmtFineTune];
        cfg.seeds = vec![0, 1];
        umt_cli::commands::cmd_generate(&cfg).unwrap();
        umt_cli::commands::cmd_evaluate(&cfg).unwrap();
        results.push(std::fs::read(dir.join("results.txt")).unwrap());
    }
    let commands_identical = results[0] == results[1];

    // Checkpoint round trips are exact.
    let dir = base.join("ckpt");
    std::fs::create_dir_all(&dir).unwrap();
    let mut cfg = ExperimentConfig::with_profile(umt_cli::config::Profile::Smoke);
    cfg.out_dir = dir.clone();
    umt_cli::commands::cmd_generate(&cfg).unwrap();
    umt_cli::commands::cmd_cluster(&cfg).unwrap();
    umt_cli::commands::cmd_meta_train(&cfg).unwrap();
    let cluster_path = dir.join(format!("cluster-k{}.ckpt", cfg.k));
    let meta_path = dir.join(format!("meta-k{}-random.ckpt", cfg.k));
    let (cluster_model, _) = umt_cli::checkpoint::read_cluster_checkpoint(&cluster_path).unwrap();
    umt_cli::checkpoint::write_cluster_checkpoint(
        &dir.join("cluster2.ckpt"),
        &cluster_model,
        &umt_cli::checkpoint::Provenance::new(cfg.hash(), cfg.seed),
    )
    .unwrap();
    let (cluster_again, _) =
        umt_cli::checkpoint::read_cluster_checkpoint(&dir.join("cluster2.ckpt")).unwrap();
    let (meta_model, _) = umt_cli::checkpoint::read_meta_checkpoint(&meta_path).unwrap();
    umt_cli::checkpoint::write_meta_checkpoint(
        &dir.join("meta2.ckpt"),
        &meta_model,
        &umt_cli::checkpoint::Provenance::new(cfg.hash(), cfg.seed),
    )
    .unwrap();
    let (meta_again, _) = umt_cli::checkpoint::read_meta_checkpoint(&dir.join("meta2.ckpt")).unwrap();
    let checkpoints_exact = cluster_again == cluster_model && meta_again == meta_model;

    verdict(
        "C8 determinism",
        reports_identical && commands_identical && checkpoints_exact,
        format!(
            "library reports identical = {reports_identical}, command outputs identical = {commands_identical}, checkpoint round trips exact = {checkpoints_exact}"
        ),
    );
}
