//! End-to-end checks of the `umt` binary: exit codes, artifacts, and the
//! determinism of everything it writes.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use umt_cli::checkpoint::read_cluster_checkpoint;
use umt_cli::config::ExperimentConfig;
use umt_cli::report::parse_results;
use umt_core::data::read_dataset;
use umt_core::tasks::{catalog_from_text, enumerate_tasks};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_umt"))
}

fn temp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("umt-cli-{tag}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn run(args: &[&str], out: &Path) -> Output {
    bin()
        .args(["--profile", "smoke", "--out"])
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_success(output: &Output) {
    assert!(
        output.status.success(),
        "command failed: {}",
        String::from_utf8_lossy(&output.stderr)
    );
}

#[test]
fn generate_writes_consistent_files() {
    let dir = temp_dir("generate");
    assert_success(&run(&["generate"], &dir));

    let dataset = read_dataset(&dir.join("dataset.csv")).unwrap();
    let smoke = ExperimentConfig::with_profile(umt_cli::config::Profile::Smoke);
    assert_eq!(dataset.len(), smoke.g * smoke.per_class);
    assert_eq!(dataset.manifest().sample_count, dataset.len());
    assert_eq!(dataset.manifest().d_in, smoke.d_in);

    // Same seed, fresh directory: identical bytes.
    let again = temp_dir("generate-again");
    assert_success(&run(&["generate"], &again));
    assert_eq!(
        std::fs::read(dir.join("dataset.csv")).unwrap(),
        std::fs::read(again.join("dataset.csv")).unwrap()
    );
    assert_eq!(
        std::fs::read(dir.join("dataset.csv.manifest")).unwrap(),
        std::fs::read(again.join("dataset.csv.manifest")).unwrap()
    );
}

#[test]
fn invalid_fractions_exit_nonzero_with_diagnostic() {
    let dir = temp_dir("badfrac");
    let config = dir.join("config.txt");
    std::fs::write(&config, "train_frac = 0.9\nval_frac = 0.3\ntest_frac = 0.3\n").unwrap();
    let output = bin()
        .args(["--profile", "smoke", "--out"])
        .arg(&dir)
        .args(["--config"])
        .arg(&config)
        .arg("generate")
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&output.stderr);
    let diagnostic = stderr.lines().next().unwrap_or("");
    assert!(
        diagnostic.starts_with("umt: error["),
        "unexpected diagnostic `{diagnostic}`"
    );
}

#[test]
fn missing_dataset_is_an_io_error_with_exit_2() {
    let dir = temp_dir("nodata");
    let output = run(&["cluster"], &dir);
    assert_eq!(output.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&output.stderr).contains("error[io]"));
}

#[test]
fn unknown_config_key_reports_line() {
    let dir = temp_dir("badkey");
    let config = dir.join("config.txt");
    std::fs::write(&config, "k = 3\nwat = 7\n").unwrap();
    let output = bin()
        .args(["--profile", "smoke", "--config"])
        .arg(&config)
        .args(["--out"])
        .arg(&dir)
        .arg("generate")
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("line 2"), "stderr: {stderr}");
}

#[test]
fn design_tasks_writes_expected_catalog() {
    // K = 5 lists 90 tasks.
    let dir = temp_dir("tasks5");
    let config = dir.join("config.txt");
    std::fs::write(&config, "k = 5\nk_list = 3,5\n").unwrap();
    let output = bin()
        .args(["--profile", "smoke", "--config"])
        .arg(&config)
        .args(["--out"])
        .arg(&dir)
        .arg("design-tasks")
        .output()
        .unwrap();
    assert_success(&output);
    let listing = std::fs::read_to_string(dir.join("tasks-k5.txt")).unwrap();
    assert_eq!(listing.lines().count(), 90);
    let parsed = catalog_from_text(5, &listing).unwrap();
    assert_eq!(parsed, enumerate_tasks(5).unwrap());

    // K = 2 is the single-task catalog.
    let dir2 = temp_dir("tasks2");
    let config2 = dir2.join("config.txt");
    std::fs::write(&config2, "k = 2\nk_list = 2\n").unwrap();
    let output = bin()
        .args(["--profile", "smoke", "--config"])
        .arg(&config2)
        .args(["--out"])
        .arg(&dir2)
        .arg("design-tasks")
        .output()
        .unwrap();
    assert_success(&output);
    let listing = std::fs::read_to_string(dir2.join("tasks-k2.txt")).unwrap();
    assert_eq!(listing.trim_end(), "0 | 1");
}

#[test]
fn cluster_reports_high_silhouette_on_separated_blobs() {
    // Three blobs at ten sigma separation: the reported silhouette is high.
    let dir = temp_dir("blobs3");
    let config = dir.join("config.txt");
    std::fs::write(
        &config,
        "g = 3\nper_class = 20\nd_in = 4\nseparation = 10.0\npositive_classes = 0\n\
         hidden = 8\nfeature_dim = 3\nk = 3\nk_list = 3\ndc_rounds = 8\ndc_epochs = 5\n",
    )
    .unwrap();
    for cmd in ["generate", "cluster"] {
        let output = bin()
            .args(["--profile", "smoke", "--config"])
            .arg(&config)
            .args(["--out"])
            .arg(&dir)
            .arg(cmd)
            .output()
            .unwrap();
        assert_success(&output);
        if cmd == "cluster" {
            let stdout = String::from_utf8_lossy(&output.stdout);
            let kappa: f64 = stdout
                .split("kappa = ")
                .nth(1)
                .and_then(|s| s.split(',').next())
                .and_then(|s| s.trim().parse().ok())
                .unwrap_or_else(|| panic!("no kappa in `{stdout}`"));
            assert!(kappa >= 0.8, "kappa = {kappa}");
        }
    }
}

#[test]
fn full_pipeline_smoke_benchmark() {
    let dir = temp_dir("benchmark");
    let start = Instant::now();
    let output = run(&["benchmark"], &dir);
    assert_success(&output);
    assert!(
        start.elapsed().as_secs() < 60,
        "smoke benchmark took {:?}",
        start.elapsed()
    );

    // Every stage left its artifact behind.
    for file in [
        "dataset.csv",
        "dataset.csv.manifest",
        "cluster-k3.ckpt",
        "tasks-k3.txt",
        "meta-k3-random.ckpt",
        "meta-k3-random.log",
        "finetuned-k3-random.ckpt",
        "results.txt",
    ] {
        assert!(dir.join(file).exists(), "missing {file}");
    }

    // No partially written temporaries survive.
    let leftovers: Vec<_> = std::fs::read_dir(&dir)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().ends_with(".tmp"))
        .collect();
    assert!(leftovers.is_empty());

    // The meta log holds provenance comments plus one record per iteration.
    let smoke = ExperimentConfig::with_profile(umt_cli::config::Profile::Smoke);
    let log = std::fs::read_to_string(dir.join("meta-k3-random.log")).unwrap();
    let records = log.lines().filter(|l| !l.starts_with('#')).count();
    assert_eq!(records, smoke.iterations);

    // The stored cluster checkpoint reloads to an identical model on rewrite.
    let (model, provenance) = read_cluster_checkpoint(&dir.join("cluster-k3.ckpt")).unwrap();
    umt_cli::checkpoint::write_cluster_checkpoint(&dir.join("rewrite.ckpt"), &model, &provenance)
        .unwrap();
    let (again, _) = read_cluster_checkpoint(&dir.join("rewrite.ckpt")).unwrap();
    assert_eq!(again, model);

    // Results parse back to the same numbers the table reports.
    let results = std::fs::read_to_string(dir.join("results.txt")).unwrap();
    let reports = parse_results(&results).unwrap();
    assert!(!reports.is_empty());
    let stdout = String::from_utf8_lossy(&output.stdout);
    for report in &reports {
        assert!(stdout.contains(&report.method), "table missing {}", report.method);
    }
}

#[test]
fn meta_train_then_finetune_via_binary() {
    let dir = temp_dir("chain");
    assert_success(&run(&["generate"], &dir));
    assert_success(&run(&["cluster"], &dir));
    assert_success(&run(&["meta-train"], &dir));
    let output = run(&["finetune"], &dir);
    assert_success(&output);
    assert!(String::from_utf8_lossy(&output.stdout).contains("test AUC"));

    // Re-running meta-train with the same seed reproduces the checkpoint.
    let first = std::fs::read(dir.join("meta-k3-random.ckpt")).unwrap();
    assert_success(&run(&["meta-train"], &dir));
    let second = std::fs::read(dir.join("meta-k3-random.ckpt")).unwrap();
    assert_eq!(first, second);
}

#[test]
fn evaluate_emits_matrix_rows() {
    let dir = temp_dir("evaluate");
    let config = dir.join("config.txt");
    std::fs::write(
        &config,
        "methods = from_scratch,umt_finetune\nseeds = 0\nk_list = 3\nstrategy_list = random,curriculum\n",
    )
    .unwrap();
    let output = bin()
        .args(["--profile", "smoke", "--config"])
        .arg(&config)
        .args(["--out"])
        .arg(&dir)
        .arg("generate")
        .output()
        .unwrap();
    assert_success(&output);
    let output = bin()
        .args(["--profile", "smoke", "--config"])
        .arg(&config)
        .args(["--out"])
        .arg(&dir)
        .arg("evaluate")
        .output()
        .unwrap();
    assert_success(&output);

    let reports = parse_results(&std::fs::read_to_string(dir.join("results.txt")).unwrap()).unwrap();
    // One from_scratch row plus the K x strategy matrix (1 x 2 cells).
    assert_eq!(reports.len(), 3);
    let umt_cells = reports
        .iter()
        .filter(|r| r.method == "umt_finetune")
        .count();
    assert_eq!(umt_cells, 2);
}

#[test]
fn out_dir_env_variable_is_the_default() {
    let dir = temp_dir("envvar");
    let output = bin()
        .env("UMT_OUT_DIR", &dir)
        .args(["--profile", "smoke", "generate"])
        .output()
        .unwrap();
    assert_success(&output);
    assert!(dir.join("dataset.csv").exists());
}
