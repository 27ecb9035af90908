//! The CLI subcommands. Each one validates the config, reads its inputs from
//! the output directory, writes its artifacts atomically, and returns a
//! human-readable summary for stdout.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use umt_core::clustering::{deep_cluster, DeepClusterConfig};
use umt_core::data::{
    assign_downstream_labels, generate_blobs, read_dataset, split_groupwise, write_dataset,
    Dataset, Split,
};
use umt_core::error::Result;
use umt_core::eval::{
    fine_tune, low_shot_indices, model_auc, run_baseline, BaselineMethod, EvalReport,
};
use umt_core::meta::{run_meta_training, MetaModel, SamplingStrategy};
use umt_core::tasks::{catalog_from_text, catalog_to_text, count_tasks, enumerate_tasks};

use crate::checkpoint::{
    read_cluster_checkpoint, read_meta_checkpoint, write_atomic, write_cluster_checkpoint,
    write_meta_checkpoint, Provenance,
};
use crate::config::{strategy_tag, ExperimentConfig};
use crate::report::{render_table, results_to_text};

fn provenance(config: &ExperimentConfig) -> Provenance {
    Provenance::new(config.hash(), config.seed)
}

fn cluster_checkpoint_path(config: &ExperimentConfig, k: usize) -> PathBuf {
    config.out_dir.join(format!("cluster-k{k}.ckpt"))
}

fn tasks_path(config: &ExperimentConfig, k: usize) -> PathBuf {
    config.out_dir.join(format!("tasks-k{k}.txt"))
}

fn meta_checkpoint_path(
    config: &ExperimentConfig,
    k: usize,
    strategy: SamplingStrategy,
) -> PathBuf {
    config
        .out_dir
        .join(format!("meta-k{k}-{}.ckpt", strategy_tag(strategy)))
}

fn meta_log_path(config: &ExperimentConfig, k: usize, strategy: SamplingStrategy) -> PathBuf {
    config
        .out_dir
        .join(format!("meta-k{k}-{}.log", strategy_tag(strategy)))
}

fn load_dataset(config: &ExperimentConfig) -> Result<Dataset> {
    read_dataset(&config.dataset_path())
}

/// Generates, labels, splits, and writes the synthetic dataset.
pub fn cmd_generate(config: &ExperimentConfig) -> Result<String> {
    config.validate()?;
    std::fs::create_dir_all(&config.out_dir)?;
    let dataset = generate_blobs(
        config.g,
        config.per_class,
        config.d_in,
        config.separation,
        config.noise,
        config.data_seed,
    )?;
    let positive: BTreeSet<usize> = config.positive_classes.iter().copied().collect();
    let dataset = assign_downstream_labels(dataset, &positive)?;
    let dataset = split_groupwise(
        dataset,
        (config.train_frac, config.val_frac, config.test_frac),
        config.data_seed,
    )?;
    let path = config.dataset_path();
    write_dataset(&dataset, &path)?;

    let count = |split| dataset.split_indices(split).len();
    let positives = dataset.samples().iter().filter(|s| s.y()).count();
    Ok(format!(
        "wrote {} samples ({} classes, d_in {}) to {}\nsplits: train {} / val {} / test {}; positives {} / negatives {}",
        dataset.len(),
        config.g,
        config.d_in,
        path.display(),
        count(Split::Train),
        count(Split::Val),
        count(Split::Test),
        positives,
        dataset.len() - positives,
    ))
}

/// Deep-clusters the training split and writes the selected model.
pub fn cmd_cluster(config: &ExperimentConfig) -> Result<String> {
    config.validate()?;
    let dataset = load_dataset(config)?;
    let train = dataset.split_indices(Split::Train);
    let inputs = dataset.feature_matrix(&train);
    let dc = DeepClusterConfig {
        net: config.net(),
        lr: config.dc_lr,
    };
    let model = deep_cluster(
        &inputs,
        config.k,
        config.dc_rounds,
        config.dc_epochs,
        &dc,
        config.seed,
    )?;
    let path = cluster_checkpoint_path(config, config.k);
    write_cluster_checkpoint(&path, &model, &provenance(config))?;
    Ok(format!(
        "clustered {} train samples into K = {} pseudo-classes: kappa = {:.4}, sizes {:?}\nwrote {}",
        train.len(),
        config.k,
        model.kappa,
        model.pseudo_labels.histogram(),
        path.display(),
    ))
}

/// Enumerates the binary task catalog for the configured K.
pub fn cmd_design_tasks(config: &ExperimentConfig) -> Result<String> {
    config.validate()?;
    std::fs::create_dir_all(&config.out_dir)?;
    let catalog = enumerate_tasks(config.k)?;
    let expected = count_tasks(config.k)?;
    debug_assert_eq!(catalog.len() as u64, expected);
    let text = catalog_to_text(&catalog);
    let path = tasks_path(config, config.k);
    write_atomic(&path, &text)?;
    Ok(format!(
        "enumerated {} binary tasks over K = {} pseudo-classes (closed form {})\nwrote {}",
        catalog.len(),
        config.k,
        expected,
        path.display(),
    ))
}

/// Meta-trains over the task catalog of the stored cluster model.
pub fn cmd_meta_train(config: &ExperimentConfig) -> Result<String> {
    config.validate()?;
    let dataset = load_dataset(config)?;
    let (model, _) = read_cluster_checkpoint(&cluster_checkpoint_path(config, config.k))?;
    let train = dataset.split_indices(Split::Train);
    let inputs = dataset.feature_matrix(&train);

    // Prefer the audited task listing when present; it equals enumeration.
    let tasks_file = tasks_path(config, config.k);
    let catalog = if tasks_file.exists() {
        catalog_from_text(config.k, &std::fs::read_to_string(&tasks_file)?)?
    } else {
        enumerate_tasks(config.k)?
    };

    let meta_config = config.meta_config(config.strategy);
    let (meta, log) = run_meta_training(&inputs, &model, &catalog, &config.net(), &meta_config)?;

    let ckpt = meta_checkpoint_path(config, config.k, config.strategy);
    write_meta_checkpoint(&ckpt, &meta, &provenance(config))?;

    let prov = provenance(config);
    let mut log_text = format!(
        "# umt.metalog.v1 revision={} config_hash={} seed={}\n",
        prov.revision, prov.config_hash, prov.seed
    );
    let excluded = log
        .excluded_tasks
        .iter()
        .map(|i| i.to_string())
        .collect::<Vec<_>>()
        .join(";");
    let _ = writeln!(log_text, "# excluded_tasks={excluded}");
    for record in &log.iterations {
        let tasks = record
            .task_accuracy
            .iter()
            .map(|(idx, acc)| format!("{idx}:{acc}"))
            .collect::<Vec<_>>()
            .join(";");
        let _ = writeln!(
            log_text,
            "iter={} objective={:.16e} tasks={tasks}",
            record.iteration, record.objective
        );
    }
    let log_path = meta_log_path(config, config.k, config.strategy);
    write_atomic(&log_path, &log_text)?;

    let last_objective = log
        .iterations
        .last()
        .map_or("n/a".to_string(), |r| format!("{:.4}", r.objective));
    Ok(format!(
        "meta-trained K = {} ({}) for {} iterations: final objective {}, {} tasks excluded\nwrote {} and {}",
        config.k,
        strategy_tag(config.strategy),
        config.iterations,
        last_objective,
        log.excluded_tasks.len(),
        ckpt.display(),
        log_path.display(),
    ))
}

/// Fine-tunes the stored meta model on the low-shot downstream task and
/// reports test AUC.
pub fn cmd_finetune(config: &ExperimentConfig) -> Result<String> {
    config.validate()?;
    let dataset = load_dataset(config)?;
    let (meta, _) = read_meta_checkpoint(&meta_checkpoint_path(config, config.k, config.strategy))?;

    let train = dataset.split_indices(Split::Train);
    let train_x = dataset.feature_matrix(&train);
    let train_y = dataset.labels(&train);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let low_shot = low_shot_indices(&train_y, config.ft_per_class, &mut rng)?;
    let ft_x = train_x.select_rows(&low_shot);
    let ft_y: Vec<bool> = low_shot.iter().map(|&i| train_y[i]).collect();

    let val = dataset.split_indices(Split::Val);
    let test = dataset.split_indices(Split::Test);
    let val_x = dataset.feature_matrix(&val);
    let val_y = dataset.labels(&val);
    let test_x = dataset.feature_matrix(&test);
    let test_y = dataset.labels(&test);

    let head = if config.reset_head {
        config.net().init_head(2, config.seed)?
    } else {
        meta.head.clone()
    };
    let ft = config.pipeline(config.k, config.strategy).fine_tune;
    let tuned = fine_tune(&meta.encoder, &head, &ft_x, &ft_y, &val_x, &val_y, &ft)?;
    let test_auc = model_auc(&tuned.theta, &tuned.omega, &test_x, &test_y)?;

    let tuned_model = MetaModel::new(tuned.theta, tuned.omega)?;
    let path = config.out_dir.join(format!(
        "finetuned-k{}-{}.ckpt",
        config.k,
        strategy_tag(config.strategy)
    ));
    write_meta_checkpoint(&path, &tuned_model, &provenance(config))?;

    Ok(format!(
        "fine-tuned on {} labelled samples ({} per class): selected epoch {}, val AUC {:.4}, test AUC {:.4}\nwrote {}",
        ft_y.len(),
        config.ft_per_class,
        tuned.selected_epoch,
        tuned.val_history[tuned.selected_epoch],
        test_auc,
        path.display(),
    ))
}

/// Runs every configured baseline plus the K x strategy matrix of the
/// meta-trained pipeline, printing a table and writing machine records.
pub fn cmd_evaluate(config: &ExperimentConfig) -> Result<String> {
    config.validate()?;
    let dataset = load_dataset(config)?;

    // The matrix cells, keyed so the default cell is not run twice.
    let mut matrix: Vec<((usize, SamplingStrategy), EvalReport)> = Vec::new();
    if config.methods.contains(&BaselineMethod::UmtFineTune) {
        for &k in &config.k_list {
            for &strategy in &config.strategy_list {
                let report = run_baseline(
                    BaselineMethod::UmtFineTune,
                    &dataset,
                    &config.pipeline(k, strategy),
                )?;
                matrix.push(((k, strategy), report));
            }
        }
    }

    let mut reports = Vec::new();
    for &method in &config.methods {
        if method == BaselineMethod::UmtFineTune {
            let key = (config.k, config.strategy);
            let report = matrix
                .iter()
                .find(|(cell, _)| *cell == key)
                .map(|(_, r)| r.clone());
            reports.push(match report {
                Some(r) => r,
                None => run_baseline(method, &dataset, &config.pipeline(config.k, config.strategy))?,
            });
        } else {
            reports.push(run_baseline(
                method,
                &dataset,
                &config.pipeline(config.k, config.strategy),
            )?);
        }
    }
    // Remaining matrix cells follow the baseline rows.
    for ((k, strategy), report) in &matrix {
        if (*k, *strategy) != (config.k, config.strategy)
            || !config.methods.contains(&BaselineMethod::UmtFineTune)
        {
            let _ = (k, strategy);
            reports.push(report.clone());
        }
    }

    std::fs::create_dir_all(&config.out_dir)?;
    let results_path = config.out_dir.join("results.txt");
    write_atomic(&results_path, &results_to_text(&provenance(config), &reports))?;

    let mut out = render_table(&reports);
    let _ = write!(out, "wrote {}", results_path.display());
    Ok(out)
}

/// The whole pipeline end to end: generate, cluster, design, meta-train,
/// fine-tune, evaluate.
pub fn cmd_benchmark(config: &ExperimentConfig) -> Result<String> {
    config.validate()?;
    let mut out = String::new();
    for (stage, result) in [
        ("generate", cmd_generate(config)?),
        ("cluster", cmd_cluster(config)?),
        ("design-tasks", cmd_design_tasks(config)?),
        ("meta-train", cmd_meta_train(config)?),
        ("finetune", cmd_finetune(config)?),
        ("evaluate", cmd_evaluate(config)?),
    ] {
        let _ = writeln!(out, "== {stage} ==");
        out.push_str(&result);
        out.push('\n');
    }
    out.pop();
    Ok(out)
}
