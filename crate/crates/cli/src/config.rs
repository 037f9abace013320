//! Experiment configuration and its flat `key = value` file format.
//!
//! Keys (one per line, `#` starts a comment):
//!
//! | key | meaning | default |
//! |---|---|---|
//! | `parties` | number of parties K | 4 |
//! | `iterations` | search iterations T | 100 |
//! | `batch_size` | expected per-party batch B | 32 |
//! | `subsample_p` | shared Poisson rate, overrides `batch_size` (`none` to unset) | none |
//! | `lr_w` | weight step xi | 10 |
//! | `lr_a` | architecture step eta | 0.05 |
//! | `fd_epsilon_scale` | finite-difference perturbation norm | 0.01 |
//! | `second_order` | unrolled architecture gradient | true |
//! | `clip_g`, `clip_h` | clip bounds R_G, R_H (`inf` disables) | 0.01, 0.1 |
//! | `sigma`, `tau` | noise multipliers | 1, 1 |
//! | `topk` | operations kept per edge | 1 |
//! | `warmup` | leading iterations with `A` held fixed | 50 |
//! | `seed` | run seed | 0 |
//! | `dataset` | `generator:key=value,...` | `gaussian-mixture:...` |
//! | `intermediate_nodes` | cell size | 4 |
//! | `aggregate` | `sum` or `mean` | sum |
//! | `out_dir` | output directory | out |
//! | `augment_epochs`, `augment_lr`, `augment_batch_size` | final training | 20, 0.1, 64 |

use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use dpfnas_core::federation::FederationConfig;
use dpfnas_core::{
    Aggregation, CandidateOpSet, CellGraph, ClipConfig, HyperParameters, NoiseConfig, SearchSpace,
    SubsampleConfig, SyntheticDatasetSpec,
};

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub parties: usize,
    pub iterations: u64,
    pub batch_size: f64,
    pub subsample_p: Option<f64>,
    pub lr_w: f64,
    pub lr_a: f64,
    pub fd_epsilon_scale: f64,
    pub second_order: bool,
    pub clip_g: f64,
    pub clip_h: f64,
    pub sigma: f64,
    pub tau: f64,
    pub topk: usize,
    pub warmup: u64,
    pub seed: u64,
    pub dataset: SyntheticDatasetSpec,
    pub intermediate_nodes: usize,
    pub aggregate: Aggregation,
    pub out_dir: PathBuf,
    pub augment_epochs: usize,
    pub augment_lr: f64,
    pub augment_batch_size: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            parties: 4,
            iterations: 100,
            batch_size: 32.0,
            subsample_p: None,
            lr_w: 10.0,
            lr_a: 0.05,
            fd_epsilon_scale: 0.01,
            second_order: true,
            clip_g: 0.01,
            clip_h: 0.1,
            sigma: 1.0,
            tau: 1.0,
            topk: 1,
            warmup: 50,
            seed: 0,
            dataset: SyntheticDatasetSpec::default(),
            intermediate_nodes: 4,
            aggregate: Aggregation::Sum,
            out_dir: PathBuf::from("out"),
            augment_epochs: 20,
            augment_lr: 0.1,
            augment_batch_size: 64,
        }
    }
}

fn parse_bool(v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => bail!("expected true or false, got `{v}`"),
    }
}

impl ExperimentConfig {
    pub fn search_space(&self) -> Result<SearchSpace> {
        Ok(SearchSpace::new(
            CellGraph::dense(self.intermediate_nodes)?,
            CandidateOpSet::standard(),
            self.dataset.dim,
            self.dataset.classes,
        )?)
    }

    /// Engine config for parties holding `n_tr` and `n_val` pooled examples
    /// in total.
    pub fn federation(&self, n_tr: usize, n_val: usize) -> Result<FederationConfig> {
        let sampling = match self.subsample_p {
            Some(p) => SubsampleConfig::shared(p),
            None => {
                let k = self.parties as f64;
                let rate = |n: usize| self.batch_size * k / n as f64;
                SubsampleConfig {
                    p_w: rate(n_tr),
                    p_a: rate(n_val),
                }
            }
        };
        if sampling.p_w > 1.0 || sampling.p_a > 1.0 {
            bail!(
                "batch size {} exceeds the per-party data (rates {} and {})",
                self.batch_size,
                sampling.p_w,
                sampling.p_a
            );
        }
        let cfg = FederationConfig {
            parties: self.parties,
            iterations: self.iterations,
            hyper: HyperParameters {
                xi: self.lr_w,
                eta: self.lr_a,
                fd_epsilon_scale: self.fd_epsilon_scale,
                second_order: self.second_order,
            },
            clip: ClipConfig {
                r_g: self.clip_g,
                r_h: self.clip_h,
            },
            noise: NoiseConfig {
                sigma: self.sigma,
                tau: self.tau,
            },
            sampling,
            aggregation: self.aggregate,
            topk: self.topk,
            warmup: self.warmup,
            seed: self.seed,
            ..Default::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.batch_size > 0.0) && self.subsample_p.is_none() {
            bail!("batch_size must be > 0");
        }
        if self.augment_batch_size == 0 || !(self.augment_lr >= 0.0) {
            bail!("augment settings must be positive");
        }
        self.dataset.validate()?;
        self.search_space()?;
        Ok(())
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("parties", self.parties.to_string());
        kv("iterations", self.iterations.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv(
            "subsample_p",
            self.subsample_p
                .map_or_else(|| "none".into(), |p| p.to_string()),
        );
        kv("lr_w", self.lr_w.to_string());
        kv("lr_a", self.lr_a.to_string());
        kv("fd_epsilon_scale", self.fd_epsilon_scale.to_string());
        kv("second_order", self.second_order.to_string());
        kv("clip_g", self.clip_g.to_string());
        kv("clip_h", self.clip_h.to_string());
        kv("sigma", self.sigma.to_string());
        kv("tau", self.tau.to_string());
        kv("topk", self.topk.to_string());
        kv("warmup", self.warmup.to_string());
        kv("seed", self.seed.to_string());
        kv("dataset", self.dataset.to_string());
        kv("intermediate_nodes", self.intermediate_nodes.to_string());
        kv("aggregate", self.aggregate.name().into());
        kv("out_dir", self.out_dir.display().to_string());
        kv("augment_epochs", self.augment_epochs.to_string());
        kv("augment_lr", self.augment_lr.to_string());
        kv("augment_batch_size", self.augment_batch_size.to_string());
        s
    }

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let ctx = || format!("invalid value `{v}` for `{key}`");
        match key.trim() {
            "parties" => self.parties = v.parse().with_context(ctx)?,
            "iterations" => self.iterations = v.parse().with_context(ctx)?,
            "batch_size" => self.batch_size = v.parse().with_context(ctx)?,
            "subsample_p" => {
                self.subsample_p = match v {
                    "none" | "" => None,
                    _ => Some(v.parse().with_context(ctx)?),
                }
            }
            "lr_w" => self.lr_w = v.parse().with_context(ctx)?,
            "lr_a" => self.lr_a = v.parse().with_context(ctx)?,
            "fd_epsilon_scale" => self.fd_epsilon_scale = v.parse().with_context(ctx)?,
            "second_order" => self.second_order = parse_bool(v).with_context(ctx)?,
            "clip_g" => self.clip_g = v.parse().with_context(ctx)?,
            "clip_h" => self.clip_h = v.parse().with_context(ctx)?,
            "sigma" => self.sigma = v.parse().with_context(ctx)?,
            "tau" => self.tau = v.parse().with_context(ctx)?,
            "topk" => self.topk = v.parse().with_context(ctx)?,
            "warmup" => self.warmup = v.parse().with_context(ctx)?,
            "seed" => self.seed = v.parse().with_context(ctx)?,
            "dataset" => self.dataset = v.parse().with_context(ctx)?,
            "intermediate_nodes" => self.intermediate_nodes = v.parse().with_context(ctx)?,
            "aggregate" => self.aggregate = v.parse().with_context(ctx)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            "augment_epochs" => self.augment_epochs = v.parse().with_context(ctx)?,
            "augment_lr" => self.augment_lr = v.parse().with_context(ctx)?,
            "augment_batch_size" => self.augment_batch_size = v.parse().with_context(ctx)?,
            other => bail!("unknown config key `{other}`"),
        }
        Ok(())
    }

    /// Parses the file format; keys not present keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .with_context(|| format!("line {}: expected `key = value`", lineno + 1))?;
            cfg.set(k, v)
                .with_context(|| format!("line {}", lineno + 1))?;
        }
        Ok(cfg)
    }
}
