//! Subcommand implementations. Each returns its results and writes its files;
//! printing is left to the binary.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dpfnas_core::autodiff::{evaluate, loss_and_gradient};
use dpfnas_core::federation::{split_among_parties, MetricsRow};
use dpfnas_core::nas::materialize;
use dpfnas_core::privacy::party_privacy;
use dpfnas_core::{
    generate_dataset, Dataset, DatasetSplits, DiscreteArchitecture, ParamSelector, PartyDataset,
    PrivacyQuery, PrivacyReport, SearchResult,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;

pub const METRICS_FILE: &str = "metrics.csv";
pub const ARCH_FILE: &str = "arch.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const PRIVACY_FILE: &str = "privacy.txt";
pub const PRIVACY_CURVE_FILE: &str = "privacy_curve.csv";
pub const AUGMENT_FILE: &str = "augment.txt";
pub const PRIVACY_REPORT_FILE: &str = "privacy_report.txt";
pub const SWEEP_FILE: &str = "sweep.csv";

/// Points per curve in `privacy_curve.csv`.
pub const CURVE_POINTS: usize = 101;

/// The dataset of `cfg` and its split among the parties.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<(DatasetSplits, Vec<PartyDataset>)> {
    let splits = generate_dataset(&cfg.dataset)?;
    let parties = split_among_parties(&splits.train, &splits.val, cfg.parties, cfg.dataset.seed)?;
    Ok((splits, parties))
}

/// Runs the search without touching the filesystem.
pub fn search(cfg: &ExperimentConfig) -> Result<(SearchResult, DatasetSplits)> {
    cfg.validate()?;
    let (splits, parties) = prepare_data(cfg)?;
    let fed = cfg.federation(splits.train.len(), splits.val.len())?;
    let result = dpfnas_core::run_search(&cfg.search_space()?, &fed, parties)?;
    Ok((result, splits))
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

fn mu(v: Option<f64>) -> String {
    v.map_or_else(|| "inf".into(), |x| x.to_string())
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w =
        csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(MetricsRow::HEADER)?;
    for r in rows {
        w.write_record([
            r.iteration.to_string(),
            r.phase.to_string(),
            opt(r.train_loss),
            opt(r.val_loss),
            opt(r.val_error),
            opt(r.grad_norm_w),
            opt(r.grad_norm_a),
            mu(r.mu_w_so_far),
            mu(r.mu_a_so_far),
            format!("{:.3}", r.wall_ms),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn write(path: PathBuf, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

/// Runs the search and writes metrics, architecture, checkpoint and privacy
/// files into the output directory. Returns the written paths.
pub fn cmd_search(cfg: &ExperimentConfig) -> Result<(SearchResult, Vec<PathBuf>)> {
    let (result, _) = search(cfg)?;
    let dir = &cfg.out_dir;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let metrics = dir.join(METRICS_FILE);
    write_metrics(&metrics, &result.metrics)?;
    let mut files = vec![metrics];
    files.push(write(dir.join(ARCH_FILE), result.discrete.to_text())?);
    let ckpt = dir.join(CHECKPOINT_FILE);
    Checkpoint {
        arch: result.arch.clone(),
        weights: result.weights.clone(),
        discrete: result.discrete.clone(),
    }
    .save(&ckpt)?;
    files.push(ckpt);
    let mut privacy = result.privacy.to_text();
    let _ = writeln!(privacy, "plateau={}", result.plateau);
    files.push(write(dir.join(PRIVACY_FILE), privacy)?);
    files.push(write(
        dir.join(PRIVACY_CURVE_FILE),
        result.privacy.curve_csv(CURVE_POINTS)?,
    )?);
    Ok((result, files))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentReport {
    pub train_loss: f64,
    pub test_loss: f64,
    pub test_error: f64,
}

impl AugmentReport {
    pub fn to_text(&self) -> String {
        format!(
            "train_loss={}\ntest_loss={}\ntest_error={}\n",
            self.train_loss, self.test_loss, self.test_error
        )
    }
}

/// Trains the discrete network from fresh weights with minibatch SGD on the
/// training split and evaluates it on the test split.
pub fn augment(
    arch: &DiscreteArchitecture,
    cfg: &ExperimentConfig,
    splits: &DatasetSplits,
) -> Result<AugmentReport> {
    let mut net = materialize(arch, cfg.dataset.dim, cfg.dataset.classes, cfg.seed)?;
    let train: &Dataset = &splits.train;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.augment_epochs {
        let mut rng =
            ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9));
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.augment_batch_size) {
            let batch = train.batch(chunk)?;
            let (_, g) = loss_and_gradient(&net, &batch, &ParamSelector::All)?;
            net.weights.axpy(-cfg.augment_lr, &g)?;
        }
    }
    let tr = evaluate(&net, &train.to_batch()?)?;
    let te = evaluate(&net, &splits.test.to_batch()?)?;
    if !(tr.loss.is_finite() && te.loss.is_finite()) {
        bail!(
            "augment training diverged (loss {}); lower augment_lr",
            tr.loss
        );
    }
    Ok(AugmentReport {
        train_loss: tr.loss,
        test_loss: te.loss,
        test_error: te.error,
    })
}

/// Loads the checkpoint, trains its architecture and writes `augment.txt`.
pub fn cmd_augment(checkpoint: &Path, cfg: &ExperimentConfig) -> Result<AugmentReport> {
    cfg.validate()?;
    let space = cfg.search_space()?;
    let ckpt = Checkpoint::load(checkpoint, &space.ops)?;
    let splits = generate_dataset(&cfg.dataset)?;
    let report = augment(&ckpt.discrete, cfg, &splits)?;
    fs::create_dir_all(&cfg.out_dir)?;
    write(cfg.out_dir.join(AUGMENT_FILE), report.to_text())?;
    Ok(report)
}

/// Per-party privacy report for a single query; writes `privacy_report.txt`.
pub fn cmd_privacy_report(q: &PrivacyQuery, out_dir: &Path) -> Result<PrivacyReport> {
    let report = PrivacyReport {
        parties: vec![party_privacy(0, q)?],
    };
    fs::create_dir_all(out_dir)?;
    write(out_dir.join(PRIVACY_REPORT_FILE), report.to_text())?;
    Ok(report)
}

/// Noise level of a sweep cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseSetting {
    /// No clipping and no noise.
    Free,
    /// `sigma = tau = sqrt(variance)` with the configured clip bounds.
    Variance(f64),
}

impl NoiseSetting {
    pub fn label(self) -> String {
        match self {
            NoiseSetting::Free => "none".into(),
            NoiseSetting::Variance(v) => v.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub parties: Vec<usize>,
    pub noise: Vec<NoiseSetting>,
    pub seeds: u64,
    /// Weight step of noise-free cells, which train on unclipped gradients.
    pub noise_free_lr_w: f64,
    pub run_augment: bool,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.parties.is_empty() || self.noise.is_empty() {
            bail!("sweep grid is empty");
        }
        if self.seeds == 0 {
            bail!("sweep needs at least one seed");
        }
        for n in &self.noise {
            if let NoiseSetting::Variance(v) = n {
                if !(*v >= 0.0 && v.is_finite()) {
                    bail!("invalid variance {v}");
                }
            }
        }
        Ok(())
    }
}

/// Config of one sweep run.
pub fn cell_config(
    base: &ExperimentConfig,
    parties: usize,
    noise: NoiseSetting,
    noise_free_lr_w: f64,
    seed: u64,
) -> ExperimentConfig {
    let mut cfg = base.clone();
    cfg.parties = parties;
    cfg.seed = seed;
    match noise {
        NoiseSetting::Free => {
            cfg.sigma = 0.0;
            cfg.tau = 0.0;
            cfg.clip_g = f64::INFINITY;
            cfg.clip_h = f64::INFINITY;
            cfg.lr_w = noise_free_lr_w;
        }
        NoiseSetting::Variance(v) => {
            cfg.sigma = v.sqrt();
            cfg.tau = v.sqrt();
        }
    }
    cfg
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellRun {
    /// Supernet validation error at the end of the search.
    pub val_error: f64,
    /// Test error of the trained discrete network, if augmented.
    pub test_error: Option<f64>,
}

pub fn run_cell(cfg: &ExperimentConfig, run_augment: bool) -> Result<CellRun> {
    let (result, splits) = search(cfg)?;
    let val_error = result
        .metrics
        .iter()
        .rev()
        .find_map(|r| r.val_error)
        .context("search ran no iterations")?;
    let test_error = if run_augment {
        Some(augment(&result.discrete, cfg, &splits)?.test_error)
    } else {
        None
    };
    Ok(CellRun {
        val_error,
        test_error,
    })
}

/// Sample mean and standard deviation (n - 1 denominator; 0 for one value).
pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub parties: usize,
    pub noise: NoiseSetting,
    pub runs: Vec<CellRun>,
    pub failures: Vec<String>,
}

impl SweepCell {
    pub fn val_errors(&self) -> Vec<f64> {
        self.runs.iter().map(|r| r.val_error).collect()
    }

    pub fn test_errors(&self) -> Vec<f64> {
        self.runs.iter().filter_map(|r| r.test_error).collect()
    }
}

/// Runs every `(parties, noise)` cell for seeds `base.seed ..
/// base.seed + seeds`. A failing run is recorded and the sweep continues.
pub fn sweep(base: &ExperimentConfig, spec: &SweepSpec) -> Result<Vec<SweepCell>> {
    spec.validate()?;
    base.validate()?;
    let jobs: Vec<(usize, NoiseSetting, u64)> = spec
        .parties
        .iter()
        .flat_map(|&k| {
            spec.noise
                .iter()
                .flat_map(move |&n| (0..spec.seeds).map(move |s| (k, n, s)))
        })
        .collect();
    let outcomes: Vec<Result<CellRun>> = jobs
        .par_iter()
        .map(|&(k, n, s)| {
            let cfg = cell_config(base, k, n, spec.noise_free_lr_w, base.seed + s);
            run_cell(&cfg, spec.run_augment)
        })
        .collect();
    let mut cells: Vec<SweepCell> = Vec::new();
    for ((k, n, s), outcome) in jobs.into_iter().zip(outcomes) {
        if cells.last().is_none_or(|c| c.parties != k || c.noise != n) {
            cells.push(SweepCell {
                parties: k,
                noise: n,
                runs: Vec::new(),
                failures: Vec::new(),
            });
        }
        let cell = cells.last_mut().expect("just pushed");
        match outcome {
            Ok(run) => cell.runs.push(run),
            Err(e) => cell.failures.push(format!("seed {}: {e:#}", base.seed + s)),
        }
    }
    Ok(cells)
}

pub fn sweep_csv(cells: &[SweepCell]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "parties",
        "variance",
        "seeds_ok",
        "val_error_mean",
        "val_error_sd",
        "test_error_mean",
        "test_error_sd",
        "status",
    ])?;
    for c in cells {
        let (vm, vs) = mean_sd(&c.val_errors());
        let tests = c.test_errors();
        let (tm, ts) = if tests.is_empty() {
            (String::new(), String::new())
        } else {
            let (m, s) = mean_sd(&tests);
            (m.to_string(), s.to_string())
        };
        let ok = !c.runs.is_empty();
        w.write_record([
            c.parties.to_string(),
            c.noise.label(),
            c.runs.len().to_string(),
            if ok { vm.to_string() } else { String::new() },
            if ok { vs.to_string() } else { String::new() },
            tm,
            ts,
            if c.failures.is_empty() {
                "ok".into()
            } else {
                format!("failed: {}", c.failures.join("; "))
            },
        ])?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

pub fn cmd_sweep(base: &ExperimentConfig, spec: &SweepSpec) -> Result<(Vec<SweepCell>, PathBuf)> {
    let cells = sweep(base, spec)?;
    fs::create_dir_all(&base.out_dir)?;
    let path = write(base.out_dir.join(SWEEP_FILE), sweep_csv(&cells)?)?;
    Ok((cells, path))
}

fn dataset_csv(d: &Dataset) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = (0..d.dim()).map(|i| format!("x{i}")).collect();
    header.push("label".into());
    w.write_record(&header)?;
    for i in 0..d.len() {
        let mut rec: Vec<String> = d.row(i).iter().map(f64::to_string).collect();
        rec.push(d.labels()[i].to_string());
        w.write_record(&rec)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

/// Writes `train.csv`, `val.csv` and `test.csv`.
pub fn cmd_gen_data(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let splits = generate_dataset(&cfg.dataset)?;
    fs::create_dir_all(&cfg.out_dir)?;
    [
        ("train.csv", &splits.train),
        ("val.csv", &splits.val),
        ("test.csv", &splits.test),
    ]
    .into_iter()
    .map(|(name, d)| write(cfg.out_dir.join(name), dataset_csv(d)?))
    .collect()
}
