use std::path::{Path, PathBuf};
use std::process::Command;

use dpfnas_cli::commands::{self, NoiseSetting, SweepSpec};
use dpfnas_cli::{Checkpoint, ExperimentConfig};
use dpfnas_core::nas::discretize;
use dpfnas_core::{Aggregation, Generator, OpKind, SyntheticDatasetSpec};
use proptest::prelude::*;

fn small(out: &Path) -> ExperimentConfig {
    ExperimentConfig {
        parties: 2,
        iterations: 3,
        batch_size: 8.0,
        intermediate_nodes: 2,
        dataset: SyntheticDatasetSpec {
            dim: 4,
            classes: 3,
            per_class: 40,
            ..Default::default()
        },
        out_dir: out.to_path_buf(),
        augment_epochs: 3,
        ..Default::default()
    }
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dpfnas"))
}

fn key_values(text: &str) -> Vec<(String, String)> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

fn value(text: &str, key: &str) -> f64 {
    key_values(text)
        .into_iter()
        .find(|(k, _)| k == key)
        .unwrap_or_else(|| panic!("no `{key}` in\n{text}"))
        .1
        .parse()
        .unwrap()
}

fn config_strategy() -> impl Strategy<Value = ExperimentConfig> {
    let positive = || prop_oneof![0.001f64..1e3, Just(f64::INFINITY)];
    (
        (
            1usize..16,
            0u64..10_000,
            0.5f64..500.0,
            prop::option::of(0.0f64..=1.0),
        ),
        (0.0f64..10.0, 0.0f64..10.0, 1e-6f64..1.0, any::<bool>()),
        (positive(), positive(), 0.0f64..10.0, 0.0f64..10.0),
        (
            1usize..5,
            any::<u64>(),
            1usize..6,
            prop_oneof![Just(Aggregation::Sum), Just(Aggregation::Mean)],
        ),
        (
            any::<bool>(),
            2usize..32,
            3usize..500,
            -5.0f64..5.0,
            0.0f64..3.0,
            any::<u64>(),
        ),
        ("[a-z0-9_/]{1,12}", 0usize..50, 0.0f64..1.0, 1usize..256),
    )
        .prop_map(|(a, b, c, d, e, f)| {
            let (moons, dim, per_class, margin, noise, dseed) = e;
            let dataset = if moons {
                SyntheticDatasetSpec {
                    generator: Generator::Moons,
                    dim,
                    classes: 2,
                    per_class,
                    margin,
                    noise,
                    seed: dseed,
                }
            } else {
                SyntheticDatasetSpec {
                    generator: Generator::GaussianMixture,
                    dim,
                    classes: 2 + dseed as usize % (dim - 1),
                    per_class,
                    margin,
                    noise,
                    seed: dseed,
                }
            };
            ExperimentConfig {
                parties: a.0,
                iterations: a.1,
                batch_size: a.2,
                subsample_p: a.3,
                lr_w: b.0,
                lr_a: b.1,
                fd_epsilon_scale: b.2,
                second_order: b.3,
                clip_g: c.0,
                clip_h: c.1,
                sigma: c.2,
                tau: c.3,
                topk: d.0,
                warmup: d.1 % 200,
                seed: d.1,
                intermediate_nodes: d.2,
                aggregate: d.3,
                dataset,
                out_dir: PathBuf::from(f.0),
                augment_epochs: f.1,
                augment_lr: f.2,
                augment_batch_size: f.3,
            }
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn config_survives_its_file_format(cfg in config_strategy()) {
        cfg.validate().unwrap();
        prop_assert_eq!(ExperimentConfig::parse(&cfg.render()).unwrap(), cfg);
    }
}

#[test]
fn checkpoint_round_trips_and_detects_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    let (result, files) = commands::cmd_search(&cfg).unwrap();
    let path = dir.path().join(commands::CHECKPOINT_FILE);
    assert!(files.contains(&path));
    let ops = cfg.search_space().unwrap().ops;
    let ckpt = Checkpoint::load(&path, &ops).unwrap();
    assert_eq!(ckpt.arch, result.arch);
    assert_eq!(ckpt.weights, result.weights);
    assert_eq!(ckpt.discrete, result.discrete);
    assert_eq!(ckpt.to_bytes(), std::fs::read(&path).unwrap());

    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    let bad = dir.path().join("bad.bin");
    std::fs::write(&bad, &bytes).unwrap();
    let err = format!("{:#}", Checkpoint::load(&bad, &ops).unwrap_err());
    assert!(err.contains("CRC32"), "{err}");
    let err = format!("{:#}", commands::cmd_augment(&bad, &cfg).unwrap_err());
    assert!(err.contains("CRC32"), "{err}");
}

#[test]
fn zero_iterations_write_empty_metrics_and_zero_privacy_loss() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        iterations: 0,
        ..small(dir.path())
    };
    commands::cmd_search(&cfg).unwrap();
    let metrics = std::fs::read_to_string(dir.path().join(commands::METRICS_FILE)).unwrap();
    assert_eq!(metrics.lines().count(), 1);
    assert!(metrics.starts_with("iteration,phase,train_loss"));
    let privacy = std::fs::read_to_string(dir.path().join(commands::PRIVACY_FILE)).unwrap();
    assert_eq!(value(&privacy, "mu_W"), 0.0);
    assert_eq!(value(&privacy, "mu_A"), 0.0);
}

#[test]
fn identity_cell_learns_separable_data() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        dataset: SyntheticDatasetSpec {
            dim: 8,
            classes: 4,
            per_class: 200,
            margin: 6.0,
            noise: 0.5,
            seed: 2,
            ..Default::default()
        },
        augment_epochs: 10,
        ..small(dir.path())
    };
    let space = cfg.search_space().unwrap();
    let id = space.ops.index_of(OpKind::Identity).unwrap();
    let mut arch = space.init_arch();
    for (_, t) in arch.iter_mut() {
        t.data_mut()[id] = 1.0;
    }
    let discrete = discretize(&space, &arch, 1).unwrap();
    let splits = dpfnas_core::generate_dataset(&cfg.dataset).unwrap();
    let report = commands::augment(&discrete, &cfg, &splits).unwrap();
    assert!(report.test_error <= 0.01, "{report:?}");
}

#[test]
fn augment_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    commands::cmd_search(&cfg).unwrap();
    let ckpt = dir.path().join(commands::CHECKPOINT_FILE);
    let a = commands::cmd_augment(&ckpt, &cfg).unwrap();
    let b = commands::cmd_augment(&ckpt, &cfg).unwrap();
    assert_eq!(a.test_error.to_bits(), b.test_error.to_bits());
    assert_eq!(a.test_loss.to_bits(), b.test_loss.to_bits());
}

#[test]
fn sweep_reports_every_cell() {
    let dir = tempfile::tempdir().unwrap();
    let base = ExperimentConfig {
        iterations: 2,
        ..small(dir.path())
    };
    let spec = SweepSpec {
        parties: vec![1, 2],
        noise: vec![NoiseSetting::Free, NoiseSetting::Variance(1.0)],
        seeds: 2,
        noise_free_lr_w: 0.05,
        run_augment: false,
    };
    let (cells, path) = commands::cmd_sweep(&base, &spec).unwrap();
    assert_eq!(cells.len(), 4);
    assert!(cells
        .iter()
        .all(|c| c.runs.len() == 2 && c.failures.is_empty()));
    let csv = std::fs::read_to_string(path).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",ok")));

    let empty = SweepSpec {
        noise: vec![],
        ..spec
    };
    assert!(commands::sweep(&base, &empty).is_err());
}

#[test]
fn failed_sweep_cells_are_marked_and_the_rest_continue() {
    let dir = tempfile::tempdir().unwrap();
    let base = ExperimentConfig {
        iterations: 1,
        ..small(dir.path())
    };
    // Batch 8 per party over 60 training examples is fine for 2 parties
    // but exceeds what 8 parties hold.
    let spec = SweepSpec {
        parties: vec![2, 8],
        noise: vec![NoiseSetting::Variance(1.0)],
        seeds: 1,
        noise_free_lr_w: 0.05,
        run_augment: false,
    };
    let cells = commands::sweep(&base, &spec).unwrap();
    assert!(cells[0].failures.is_empty());
    assert_eq!(cells[1].failures.len(), 1);
    let csv = commands::sweep_csv(&cells).unwrap();
    assert!(csv.lines().nth(2).unwrap().contains("failed"));
}

#[test]
fn privacy_report_command() {
    let dir = tempfile::tempdir().unwrap();
    let run = |args: &[&str]| {
        let out = bin()
            .args(["privacy-report", "--out-dir"])
            .arg(dir.path())
            .args(args)
            .output()
            .unwrap();
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    };
    let base = ["--B", "100", "--N-tr", "25000", "--T", "10000"];
    let one = run(&[&base[..], &["--sigma", "1"]].concat());
    assert!((value(&one, "mu_W") - 0.524333).abs() < 1e-6);
    assert_eq!(value(&one, "mu_W"), value(&one, "mu_A"));
    let file = std::fs::read_to_string(dir.path().join(commands::PRIVACY_REPORT_FILE)).unwrap();
    assert_eq!(file, one);
    let two = run(&[&base[..], &["--sigma", "2"]].concat());
    assert!(value(&two, "mu_W") < value(&one, "mu_W"));
    assert!(value(&two, "mu_A") < value(&one, "mu_A"));
    let none = run(&["--B", "100", "--N-tr", "25000", "--T", "0", "--sigma", "1"]);
    assert_eq!((value(&none, "mu_W"), value(&none, "mu_A")), (0.0, 0.0));

    let bad = bin()
        .args([
            "privacy-report",
            "--B",
            "100",
            "--N-tr",
            "50",
            "--T",
            "10",
            "--sigma",
            "1",
            "--out-dir",
        ])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("batch size exceeds"));
}

#[test]
fn empty_sweep_grid_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["sweep", "--variance-grid", "", "--out-dir"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("sweep grid is empty"));
}

#[test]
fn config_file_and_flags_combine() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        iterations: 1,
        ..small(&dir.path().join("from-file"))
    };
    let file = dir.path().join("run.cfg");
    std::fs::write(&file, cfg.render()).unwrap();
    let flag_out = dir.path().join("from-flag");
    let out = bin()
        .args(["search", "--config"])
        .arg(&file)
        .args(["--sigma", "0.5", "--out-dir"])
        .arg(&flag_out)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let privacy = std::fs::read_to_string(flag_out.join(commands::PRIVACY_FILE)).unwrap();
    assert_eq!(value(&privacy, "sigma"), 0.5);
    assert_eq!(value(&privacy, "T"), 1.0);
    assert!(!dir.path().join("from-file").exists());
}

#[test]
fn gen_data_writes_three_splits() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args([
            "gen-data",
            "--dataset",
            "moons:dim=3,classes=2,per_class=20",
            "--out-dir",
        ])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let rows = |name: &str| {
        std::fs::read_to_string(dir.path().join(name))
            .unwrap()
            .lines()
            .count()
            - 1
    };
    assert_eq!(
        (rows("train.csv"), rows("val.csv"), rows("test.csv")),
        (20, 10, 10)
    );
}
