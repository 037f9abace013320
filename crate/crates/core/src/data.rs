//! Labeled datasets, seeded synthetic generators and party splits.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::autodiff::Batch;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-major features with one class label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dim: usize,
    classes: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(dim: usize, classes: usize, features: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        if dim == 0 || features.len() != dim * labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} feature values for {} rows of dimension {dim}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dataset features".into()));
        }
        Ok(Self {
            dim,
            classes,
            features,
            labels,
        })
    }

    pub fn empty(dim: usize, classes: usize) -> Self {
        Self {
            dim,
            classes,
            features: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// Rows `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            features.extend_from_slice(self.row(i));
        }
        Dataset {
            dim: self.dim,
            classes: self.classes,
            features,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Concatenation in argument order.
    pub fn concat(parts: &[&Dataset]) -> Result<Dataset> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("nothing to concatenate".into()))?;
        let mut out = Dataset::empty(first.dim, first.classes);
        for p in parts {
            if p.dim != first.dim || p.classes != first.classes {
                return Err(Error::InvalidArgument(
                    "datasets have different shapes".into(),
                ));
            }
            out.features.extend_from_slice(&p.features);
            out.labels.extend_from_slice(&p.labels);
        }
        Ok(out)
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        self.subset(indices).to_batch()
    }

    pub fn to_batch(&self) -> Result<Batch> {
        let x = Tensor::new(vec![self.len(), self.dim], self.features.clone())?;
        Batch::new(x, self.labels.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Generator {
    /// Class `c` is `N(margin * e_c, noise^2 I)`.
    GaussianMixture,
    /// Two interleaved half circles in the first two coordinates, scaled by
    /// `margin`, plus isotropic noise in every coordinate.
    Moons,
}

impl Generator {
    pub fn name(self) -> &'static str {
        match self {
            Generator::GaussianMixture => "gaussian-mixture",
            Generator::Moons => "moons",
        }
    }
}

impl FromStr for Generator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian-mixture" => Ok(Generator::GaussianMixture),
            "moons" => Ok(Generator::Moons),
            other => Err(Error::InvalidArgument(format!(
                "unknown generator `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticDatasetSpec {
    pub generator: Generator,
    pub dim: usize,
    pub classes: usize,
    pub per_class: usize,
    pub margin: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticDatasetSpec {
    fn default() -> Self {
        Self {
            generator: Generator::GaussianMixture,
            dim: 16,
            classes: 4,
            per_class: 2000,
            margin: 2.0,
            noise: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 classes, got {}",
                self.classes
            )));
        }
        if self.per_class == 0 {
            return Err(Error::InvalidArgument(
                "per-class count must be at least 1".into(),
            ));
        }
        if self.dim == 0 {
            return Err(Error::InvalidArgument("dimension must be positive".into()));
        }
        match self.generator {
            Generator::GaussianMixture if self.classes > self.dim => {
                return Err(Error::InvalidArgument(format!(
                    "gaussian-mixture needs classes <= dim ({} > {})",
                    self.classes, self.dim
                )))
            }
            Generator::Moons if self.classes != 2 || self.dim < 2 => {
                return Err(Error::InvalidArgument(
                    "moons needs 2 classes and dim >= 2".into(),
                ))
            }
            _ => {}
        }
        if !(self.margin.is_finite() && self.noise.is_finite() && self.noise >= 0.0) {
            return Err(Error::InvalidArgument(
                "margin and noise must be finite, noise >= 0".into(),
            ));
        }
        Ok(())
    }

    /// Generates `per_class` examples of every class, classes in order.
    pub fn sample_all(&self) -> Result<Dataset> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let n = self.per_class * self.classes;
        let mut features = Vec::with_capacity(n * self.dim);
        let mut labels = Vec::with_capacity(n);
        for c in 0..self.classes {
            for _ in 0..self.per_class {
                let start = features.len();
                for _ in 0..self.dim {
                    let z: f64 = rng.sample(StandardNormal);
                    features.push(self.noise * z);
                }
                let row = &mut features[start..];
                match self.generator {
                    Generator::GaussianMixture => row[c] += self.margin,
                    Generator::Moons => {
                        let t = rng.random::<f64>() * std::f64::consts::PI;
                        let (x, y) = if c == 0 {
                            (t.cos(), t.sin())
                        } else {
                            (1.0 - t.cos(), 0.5 - t.sin())
                        };
                        row[0] += self.margin * x;
                        row[1] += self.margin * y;
                    }
                }
                labels.push(c);
            }
        }
        Dataset::new(self.dim, self.classes, features, labels)
    }
}

impl fmt::Display for SyntheticDatasetSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}:dim={},classes={},per_class={},margin={},noise={},seed={}",
            self.generator.name(),
            self.dim,
            self.classes,
            self.per_class,
            self.margin,
            self.noise,
            self.seed
        )
    }
}

impl FromStr for SyntheticDatasetSpec {
    type Err = Error;

    /// `generator[:key=value,...]`; missing keys take the defaults.
    fn from_str(s: &str) -> Result<Self> {
        let (gen, rest) = s.split_once(':').unwrap_or((s, ""));
        let mut spec = SyntheticDatasetSpec {
            generator: gen.trim().parse()?,
            ..Default::default()
        };
        for kv in rest.split(',').map(str::trim).filter(|kv| !kv.is_empty()) {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("expected key=value, got `{kv}`")))?;
            let bad = || Error::InvalidArgument(format!("bad value for `{k}`: `{v}`"));
            match k.trim() {
                "dim" => spec.dim = v.trim().parse().map_err(|_| bad())?,
                "classes" => spec.classes = v.trim().parse().map_err(|_| bad())?,
                "per_class" => spec.per_class = v.trim().parse().map_err(|_| bad())?,
                "seed" => spec.seed = v.trim().parse().map_err(|_| bad())?,
                "margin" => spec.margin = v.trim().parse().map_err(|_| bad())?,
                "noise" => spec.noise = v.trim().parse().map_err(|_| bad())?,
                other => {
                    return Err(Error::InvalidArgument(format!(
                        "unknown dataset key `{other}`"
                    )))
                }
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

/// Disjoint train, validation and test sets.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Samples the spec and splits every class 50/25/25 into train, validation
/// and test. Each split is shuffled.
pub fn generate_dataset(spec: &SyntheticDatasetSpec) -> Result<DatasetSplits> {
    let all = spec.sample_all()?;
    if spec.per_class < 3 {
        return Err(Error::InvalidArgument(
            "need at least 3 examples per class for a train/val/test split".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ SPLIT_STREAM);
    let (mut tr, mut va, mut te) = (Vec::new(), Vec::new(), Vec::new());
    for c in 0..spec.classes {
        let mut idx: Vec<usize> = (c * spec.per_class..(c + 1) * spec.per_class).collect();
        idx.shuffle(&mut rng);
        let n_tr = spec.per_class / 2;
        let n_va = spec.per_class / 4;
        tr.extend_from_slice(&idx[..n_tr]);
        va.extend_from_slice(&idx[n_tr..n_tr + n_va]);
        te.extend_from_slice(&idx[n_tr + n_va..]);
    }
    for part in [&mut tr, &mut va, &mut te] {
        part.shuffle(&mut rng);
    }
    Ok(DatasetSplits {
        train: all.subset(&tr),
        val: all.subset(&va),
        test: all.subset(&te),
    })
}

/// Keeps the split shuffle independent of the sampling stream.
const SPLIT_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

/// Seeded random split into `parties` parts whose sizes differ by at most one.
pub fn partition_iid(data: &Dataset, parties: usize, seed: u64) -> Result<Vec<Dataset>> {
    if parties == 0 {
        return Err(Error::InvalidArgument("need at least one party".into()));
    }
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(contiguous_chunks(&idx, parties)
        .into_iter()
        .map(|chunk| data.subset(chunk))
        .collect())
}

/// Contiguous split of `0..data.len()` in order, sizes differing by at most
/// one. Concatenating the parts gives back `data`.
pub fn partition_contiguous(data: &Dataset, parties: usize) -> Result<Vec<Dataset>> {
    if parties == 0 {
        return Err(Error::InvalidArgument("need at least one party".into()));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    Ok(contiguous_chunks(&idx, parties)
        .into_iter()
        .map(|chunk| data.subset(chunk))
        .collect())
}

fn contiguous_chunks(idx: &[usize], parts: usize) -> Vec<&[usize]> {
    let base = idx.len() / parts;
    let extra = idx.len() % parts;
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for k in 0..parts {
        let len = base + usize::from(k < extra);
        out.push(&idx[start..start + len]);
        start += len;
    }
    out
}

/// Label-skewed split: for every class, party shares are drawn from a
/// symmetric Dirichlet with the given concentration. Small concentrations
/// give each party few classes.
pub fn partition_dirichlet(
    data: &Dataset,
    parties: usize,
    concentration: f64,
    seed: u64,
) -> Result<Vec<Dataset>> {
    if parties == 0 {
        return Err(Error::InvalidArgument("need at least one party".into()));
    }
    if !(concentration > 0.0 && concentration.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "Dirichlet concentration must be > 0 (got {concentration})"
        )));
    }
    let gamma = Gamma::new(concentration, 1.0)
        .map_err(|e| Error::InvalidArgument(format!("Dirichlet concentration: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); parties];
    for c in 0..data.classes() {
        let mut idx: Vec<usize> = (0..data.len()).filter(|&i| data.labels[i] == c).collect();
        idx.shuffle(&mut rng);
        let draws: Vec<f64> = (0..parties).map(|_| gamma.sample(&mut rng)).collect();
        let total: f64 = draws.iter().sum();
        let mut start = 0;
        let mut acc = 0.0;
        for (k, d) in draws.iter().enumerate() {
            acc += d;
            let end = if k + 1 == parties {
                idx.len()
            } else {
                ((acc / total) * idx.len() as f64).round() as usize
            }
            .clamp(start, idx.len());
            assigned[k].extend_from_slice(&idx[start..end]);
            start = end;
        }
    }
    Ok(assigned
        .into_iter()
        .map(|mut ix| {
            ix.shuffle(&mut rng);
            data.subset(&ix)
        })
        .collect())
}
