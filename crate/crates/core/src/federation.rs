//! Synchronous parameter-server search across simulated parties.
//!
//! Each iteration has a W phase and an A phase. In the W phase every party
//! sends a privatized weight gradient, the server applies the summed step and
//! broadcasts the new weights, which each party stores as its look-ahead `W'`.
//! In the A phase every party sends a privatized architecture gradient taken
//! at `W'`, the server steps the architecture and broadcasts it, and each party
//! adopts the new architecture together with `W'`.
//!
//! Messages and broadcasts always pass through their byte encoding, even
//! though parties and server share a process.

use std::time::Instant;

use rayon::prelude::*;

use crate::autodiff::{
    evaluate, loss_and_gradient, per_sample_losses_and_gradients, Batch, ParamGroup, ParamSelector,
};
use crate::bilevel::{
    arch_gradient_second_order, arch_step, weight_step, FdEpsilon, HyperParameters,
    SupernetObjective,
};
use crate::data::Dataset;
use crate::dp::{
    add_gaussian_noise, clip, poisson_subsample, privatize, ClipConfig, NoiseConfig, Phase,
    Purpose, RngKey, SubsampleConfig,
};
use crate::error::{Error, Result};
use crate::nas::{
    discretize, ArchitectureVariables, DiscreteArchitecture, SearchSpace, Supernet,
    WeightParameters,
};
use crate::privacy::{clt_mu, party_privacy, PrivacyQuery, PrivacyReport};
use crate::tensor::{GradientVector, NamedTensors};
use crate::wire::{encode_tensors, Broadcast, GradientMessage};

/// How the server combines party gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Aggregation {
    /// `sum_k G_k`.
    #[default]
    Sum,
    /// `(1/K) sum_k G_k`.
    Mean,
}

impl Aggregation {
    pub fn name(self) -> &'static str {
        match self {
            Aggregation::Sum => "sum",
            Aggregation::Mean => "mean",
        }
    }
}

impl std::str::FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Aggregation::Sum),
            "mean" => Ok(Aggregation::Mean),
            other => Err(Error::InvalidArgument(format!(
                "unknown aggregation `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederationConfig {
    pub parties: usize,
    pub iterations: u64,
    pub hyper: HyperParameters,
    pub clip: ClipConfig,
    pub noise: NoiseConfig,
    pub sampling: SubsampleConfig,
    pub aggregation: Aggregation,
    pub topk: usize,
    pub seed: u64,
    /// Iterations at the start during which the server leaves `A` unchanged.
    /// Parties still answer the A phase, so the privacy cost is unaffected.
    pub warmup: u64,
    /// Keep `(A, W)` after every iteration in the result.
    pub record_trajectory: bool,
    /// Window of the moving-average plateau check.
    pub plateau_window: usize,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            parties: 4,
            iterations: 100,
            hyper: HyperParameters::default(),
            clip: ClipConfig {
                r_g: f64::INFINITY,
                r_h: f64::INFINITY,
            },
            noise: NoiseConfig {
                sigma: 0.0,
                tau: 0.0,
            },
            sampling: SubsampleConfig::shared(1.0),
            aggregation: Aggregation::Sum,
            topk: 1,
            seed: 0,
            warmup: 0,
            record_trajectory: false,
            plateau_window: 10,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.parties == 0 || self.parties > u32::MAX as usize {
            return Err(Error::InvalidArgument(format!(
                "invalid party count {}",
                self.parties
            )));
        }
        self.hyper.validate()?;
        self.clip.validate()?;
        self.noise.validate()?;
        self.sampling.validate()?;
        if self.sampling.p_w == 0.0 || self.sampling.p_a == 0.0 {
            return Err(Error::InvalidArgument("subsample rates must be > 0".into()));
        }
        if (self.clip.r_g.is_infinite() && self.noise.sigma > 0.0)
            || (self.clip.r_h.is_infinite() && self.noise.tau > 0.0)
        {
            return Err(Error::InvalidArgument(
                "noise needs a finite clip bound for the same phase".into(),
            ));
        }
        if self.plateau_window == 0 {
            return Err(Error::InvalidArgument(
                "plateau window must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One party's private data. The two sets are assumed disjoint.
#[derive(Debug, Clone, PartialEq)]
pub struct PartyDataset {
    pub train: Dataset,
    pub val: Dataset,
}

impl PartyDataset {
    pub fn new(train: Dataset, val: Dataset) -> Result<Self> {
        if train.dim() != val.dim() || train.classes() != val.classes() {
            return Err(Error::InvalidArgument(
                "train and validation shapes differ".into(),
            ));
        }
        if train.is_empty() || val.is_empty() {
            return Err(Error::InvalidArgument(
                "party needs training and validation data".into(),
            ));
        }
        Ok(Self { train, val })
    }
}

/// Splits pooled train and validation sets into `parties` equal random parts.
pub fn split_among_parties(
    train: &Dataset,
    val: &Dataset,
    parties: usize,
    seed: u64,
) -> Result<Vec<PartyDataset>> {
    let tr = crate::data::partition_iid(train, parties, seed)?;
    let va = crate::data::partition_iid(val, parties, seed.wrapping_add(1))?;
    tr.into_iter()
        .zip(va)
        .map(|(t, v)| PartyDataset::new(t, v))
        .collect()
}

/// Which weights a party used for one phase. Weight version `v` is the
/// global W after `v` server weight steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PhaseTrace {
    pub party: u32,
    pub iteration: u64,
    pub phase: Phase,
    pub w_version: u64,
}

/// Loss over the examples a party used in its last phase.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PhaseStats {
    pub loss_sum: f64,
    pub count: usize,
}

fn protocol(party: u32, phase: Phase, detail: impl Into<String>) -> Error {
    Error::Protocol {
        party,
        phase: phase.to_string(),
        detail: detail.into(),
    }
}

#[derive(Debug, Clone)]
pub struct PartyState {
    party_id: u32,
    space: SearchSpace,
    config: FederationConfig,
    arch: ArchitectureVariables,
    weights: WeightParameters,
    w_prime: Option<WeightParameters>,
    data: PartyDataset,
    iteration: u64,
    w_version: u64,
    train_subsample: Vec<usize>,
    last_stats: PhaseStats,
    last_trace: Option<PhaseTrace>,
}

impl PartyState {
    pub fn new(
        party_id: u32,
        space: &SearchSpace,
        config: &FederationConfig,
        data: PartyDataset,
        arch: ArchitectureVariables,
        weights: WeightParameters,
    ) -> Result<Self> {
        space.check_arch(&arch)?;
        space.check_weights(&weights)?;
        if data.train.dim() != space.dim || data.train.classes() != space.classes {
            return Err(Error::InvalidArgument(format!(
                "party {party_id} data does not match the search space"
            )));
        }
        Ok(Self {
            party_id,
            space: space.clone(),
            config: config.clone(),
            arch,
            weights,
            w_prime: None,
            data,
            iteration: 0,
            w_version: 0,
            train_subsample: Vec::new(),
            last_stats: PhaseStats::default(),
            last_trace: None,
        })
    }

    pub fn party_id(&self) -> u32 {
        self.party_id
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn arch(&self) -> &ArchitectureVariables {
        &self.arch
    }

    pub fn weights(&self) -> &WeightParameters {
        &self.weights
    }

    pub fn w_prime(&self) -> Option<&WeightParameters> {
        self.w_prime.as_ref()
    }

    pub fn data(&self) -> &PartyDataset {
        &self.data
    }

    pub fn last_stats(&self) -> PhaseStats {
        self.last_stats
    }

    pub fn last_trace(&self) -> Option<PhaseTrace> {
        self.last_trace
    }

    fn stream(&self, phase: Phase, purpose: Purpose) -> rand_chacha::ChaCha12Rng {
        RngKey {
            seed: self.config.seed,
            party: self.party_id,
            iteration: self.iteration,
            phase,
            purpose,
        }
        .stream()
    }

    fn check_iteration(&self, t: u64, phase: Phase) -> Result<()> {
        if t != self.iteration {
            return Err(protocol(
                self.party_id,
                phase,
                format!("party is at iteration {}, asked for {t}", self.iteration),
            ));
        }
        Ok(())
    }

    fn message(&self, phase: Phase, payload: Option<GradientVector>) -> GradientMessage {
        GradientMessage {
            party_id: self.party_id,
            iteration: self.iteration,
            phase,
            payload,
        }
    }

    /// Applies a decoded W broadcast: `W'_k <- W`.
    pub fn receive_weights(&mut self, b: &Broadcast) -> Result<()> {
        if b.phase != Phase::W || b.iteration != self.iteration {
            return Err(protocol(
                self.party_id,
                Phase::W,
                format!(
                    "unexpected broadcast ({} of iteration {})",
                    b.phase, b.iteration
                ),
            ));
        }
        self.space.check_weights(&b.values)?;
        self.w_prime = Some(b.values.clone());
        Ok(())
    }

    /// Applies a decoded A broadcast: `A_k <- A`, `W_k <- W'_k`.
    pub fn receive_arch(&mut self, b: &Broadcast) -> Result<()> {
        if b.phase != Phase::A || b.iteration != self.iteration {
            return Err(protocol(
                self.party_id,
                Phase::A,
                format!(
                    "unexpected broadcast ({} of iteration {})",
                    b.phase, b.iteration
                ),
            ));
        }
        self.space.check_arch(&b.values)?;
        let w_prime = self.w_prime.take().ok_or_else(|| {
            protocol(
                self.party_id,
                Phase::A,
                "architecture arrived before weights",
            )
        })?;
        self.arch = b.values.clone();
        self.weights = w_prime;
        self.w_version += 1;
        self.iteration += 1;
        Ok(())
    }
}

/// Mean gradient and loss sum over `batch`, clipped per example at `bound`.
/// With an infinite bound this is the plain batch gradient.
#[allow(clippy::too_many_arguments)]
fn clipped_mean_gradient(
    space: &SearchSpace,
    arch: &ArchitectureVariables,
    weights: &WeightParameters,
    batch: &Batch,
    group: ParamGroup,
    bound: f64,
    noise_multiplier: f64,
    rng: &mut rand_chacha::ChaCha12Rng,
) -> Result<(f64, GradientVector)> {
    let net = Supernet {
        space,
        arch,
        weights,
    };
    let sel = ParamSelector::Group(group);
    if bound.is_infinite() {
        if noise_multiplier > 0.0 {
            return Err(Error::InvalidArgument(
                "noise with an infinite clip bound has infinite variance".into(),
            ));
        }
        let (loss, g) = loss_and_gradient(&net, batch, &sel)?;
        return Ok((loss * batch.len() as f64, g));
    }
    let per_sample = per_sample_losses_and_gradients(&net, batch, &sel)?;
    let loss_sum = per_sample.iter().fold(0.0, |acc, (l, _)| acc + l);
    let grads: Vec<GradientVector> = per_sample.into_iter().map(|(_, g)| g).collect();
    Ok((loss_sum, privatize(&grads, bound, noise_multiplier, rng)?))
}

/// Weight phase of party `ps` for iteration `t`: the privatized mean of
/// per-example weight gradients over a Poisson subsample of its training set.
pub fn party_w_phase(ps: &mut PartyState, t: u64) -> Result<GradientMessage> {
    ps.check_iteration(t, Phase::W)?;
    let cfg = &ps.config;
    let idx = poisson_subsample(
        ps.data.train.len(),
        cfg.sampling.p_w,
        &mut ps.stream(Phase::W, Purpose::Subsample),
    )?;
    ps.last_trace = Some(PhaseTrace {
        party: ps.party_id,
        iteration: t,
        phase: Phase::W,
        w_version: ps.w_version,
    });
    ps.train_subsample = idx;
    if ps.train_subsample.is_empty() {
        ps.last_stats = PhaseStats::default();
        return Ok(ps.message(Phase::W, None));
    }
    let batch = ps.data.train.batch(&ps.train_subsample)?;
    let (loss_sum, g) = clipped_mean_gradient(
        &ps.space,
        &ps.arch,
        &ps.weights,
        &batch,
        ParamGroup::Weights,
        cfg.clip.r_g,
        cfg.noise.sigma,
        &mut ps.stream(Phase::W, Purpose::Noise),
    )?;
    ps.last_stats = PhaseStats {
        loss_sum,
        count: batch.len(),
    };
    Ok(ps.message(Phase::W, Some(g)))
}

/// Architecture phase of party `ps` for iteration `t`, taken at `W'_k`.
///
/// First order: the privatized mean of per-example architecture gradients on
/// a Poisson subsample of the validation set. Second order: the finite-
/// difference unrolled gradient on the validation subsample, corrected with
/// this iteration's training subsample, clipped as one vector and perturbed
/// with noise of standard deviation `R_H * tau`.
pub fn party_a_phase(ps: &mut PartyState, t: u64) -> Result<GradientMessage> {
    ps.check_iteration(t, Phase::A)?;
    let w_prime = ps
        .w_prime
        .as_ref()
        .ok_or_else(|| protocol(ps.party_id, Phase::A, format!("no W' for iteration {t}")))?;
    let cfg = &ps.config;
    let idx = poisson_subsample(
        ps.data.val.len(),
        cfg.sampling.p_a,
        &mut ps.stream(Phase::A, Purpose::Subsample),
    )?;
    ps.last_trace = Some(PhaseTrace {
        party: ps.party_id,
        iteration: t,
        phase: Phase::A,
        w_version: ps.w_version + 1,
    });
    let second_order = cfg.hyper.second_order;
    if idx.is_empty() || (second_order && ps.train_subsample.is_empty()) {
        ps.last_stats = PhaseStats::default();
        return Ok(ps.message(Phase::A, None));
    }
    let val = ps.data.val.batch(&idx)?;
    let mut noise_rng = ps.stream(Phase::A, Purpose::Noise);
    let payload = if second_order {
        let train = ps.data.train.batch(&ps.train_subsample)?;
        let obj = SupernetObjective { space: &ps.space };
        let h = arch_gradient_second_order(
            &obj,
            &val,
            &train,
            &ps.arch,
            &ps.weights,
            w_prime,
            cfg.hyper.xi,
            FdEpsilon::Relative(cfg.hyper.fd_epsilon_scale),
        )?
        .gradient;
        let mut h = clip(&h, cfg.clip.r_h)?;
        if cfg.noise.tau > 0.0 {
            add_gaussian_noise(&mut h, cfg.clip.r_h * cfg.noise.tau, &mut noise_rng);
        }
        let net = Supernet {
            space: &ps.space,
            arch: &ps.arch,
            weights: w_prime,
        };
        ps.last_stats = PhaseStats {
            loss_sum: evaluate(&net, &val)?.loss * val.len() as f64,
            count: val.len(),
        };
        h
    } else {
        let (loss_sum, g) = clipped_mean_gradient(
            &ps.space,
            &ps.arch,
            w_prime,
            &val,
            ParamGroup::Arch,
            cfg.clip.r_h,
            cfg.noise.tau,
            &mut noise_rng,
        )?;
        ps.last_stats = PhaseStats {
            loss_sum,
            count: val.len(),
        };
        g
    };
    Ok(ps.message(Phase::A, Some(payload)))
}

#[derive(Debug, Clone)]
pub struct ServerState {
    arch: ArchitectureVariables,
    weights: WeightParameters,
    iteration: u64,
    expecting: Phase,
    config: FederationConfig,
}

impl ServerState {
    pub fn new(
        config: &FederationConfig,
        arch: ArchitectureVariables,
        weights: WeightParameters,
    ) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            arch,
            weights,
            iteration: 0,
            expecting: Phase::W,
            config: config.clone(),
        })
    }

    pub fn arch(&self) -> &ArchitectureVariables {
        &self.arch
    }

    pub fn weights(&self) -> &WeightParameters {
        &self.weights
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    /// Checks that `msgs` hold exactly one well-formed message per party for
    /// the expected phase, and returns the aggregate in ascending party order.
    fn aggregate(
        &self,
        msgs: &[GradientMessage],
        phase: Phase,
        reference: &NamedTensors,
    ) -> Result<GradientVector> {
        if self.expecting != phase {
            let party = msgs.first().map_or(0, |m| m.party_id);
            return Err(protocol(
                party,
                phase,
                format!("server expects the {} phase", self.expecting),
            ));
        }
        let k = self.config.parties;
        let mut slots: Vec<Option<&GradientMessage>> = vec![None; k];
        for m in msgs {
            if m.phase != phase || m.iteration != self.iteration {
                return Err(protocol(
                    m.party_id,
                    phase,
                    format!(
                        "message for {} of iteration {} while at iteration {}",
                        m.phase, m.iteration, self.iteration
                    ),
                ));
            }
            let slot = slots
                .get_mut(m.party_id as usize)
                .ok_or_else(|| protocol(m.party_id, phase, "unknown party"))?;
            if slot.replace(m).is_some() {
                return Err(protocol(m.party_id, phase, "duplicate message"));
            }
            if let Some(p) = &m.payload {
                reference
                    .check_compatible(p)
                    .map_err(|e| protocol(m.party_id, phase, format!("bad payload: {e}")))?;
                if !p.all_finite() {
                    return Err(protocol(m.party_id, phase, "non-finite payload"));
                }
            }
        }
        if let Some(missing) = slots.iter().position(Option::is_none) {
            return Err(protocol(
                missing as u32,
                phase,
                format!("no message for iteration {}", self.iteration),
            ));
        }
        let mut total = reference.zeros_like();
        for m in slots.into_iter().flatten() {
            if let Some(p) = &m.payload {
                total.axpy(1.0, p)?;
            }
        }
        if self.config.aggregation == Aggregation::Mean {
            total.scale_in_place(1.0 / k as f64);
        }
        Ok(total)
    }
}

/// `W <- W - xi * sum_k G_k` and the broadcast of the new W.
pub fn server_w_step(
    ss: &mut ServerState,
    msgs: &[GradientMessage],
) -> Result<(Broadcast, GradientVector)> {
    let total = ss.aggregate(msgs, Phase::W, &ss.weights)?;
    ss.weights = weight_step(&ss.weights, &total, ss.config.hyper.xi)?;
    ss.expecting = Phase::A;
    Ok((
        Broadcast {
            iteration: ss.iteration,
            phase: Phase::W,
            values: ss.weights.clone(),
        },
        total,
    ))
}

/// `A <- A - eta * sum_k H_k` and the broadcast of the new A. Ends the
/// iteration.
pub fn server_a_step(
    ss: &mut ServerState,
    msgs: &[GradientMessage],
) -> Result<(Broadcast, GradientVector)> {
    let total = ss.aggregate(msgs, Phase::A, &ss.arch)?;
    if ss.iteration >= ss.config.warmup {
        ss.arch = arch_step(&ss.arch, &total, ss.config.hyper.eta)?;
    }
    let b = Broadcast {
        iteration: ss.iteration,
        phase: Phase::A,
        values: ss.arch.clone(),
    };
    ss.expecting = Phase::W;
    ss.iteration += 1;
    Ok((b, total))
}

/// In-process transport. Everything posted is bytes; receivers decode.
#[derive(Debug, Default)]
pub struct MessageBus {
    inbox: Vec<Vec<u8>>,
}

impl MessageBus {
    pub fn post(&mut self, bytes: Vec<u8>) {
        self.inbox.push(bytes);
    }

    pub fn drain(&mut self) -> Result<Vec<GradientMessage>> {
        self.inbox
            .drain(..)
            .map(|b| GradientMessage::decode(&b))
            .collect()
    }
}

/// One row per phase per iteration. Fields that a phase does not produce
/// are `None`; privacy levels are `None` when the mechanism adds no noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub iteration: u64,
    pub phase: Phase,
    pub train_loss: Option<f64>,
    pub val_loss: Option<f64>,
    pub val_error: Option<f64>,
    pub grad_norm_w: Option<f64>,
    pub grad_norm_a: Option<f64>,
    pub mu_w_so_far: Option<f64>,
    pub mu_a_so_far: Option<f64>,
    pub wall_ms: f64,
}

impl MetricsRow {
    pub const HEADER: [&'static str; 10] = [
        "iteration",
        "phase",
        "train_loss",
        "val_loss",
        "val_error",
        "grad_norm_w",
        "grad_norm_a",
        "mu_w_so_far",
        "mu_a_so_far",
        "wall_ms",
    ];
}

/// Composed privacy level after `count` applications of a phase mechanism.
pub fn mu_so_far(p: f64, count: u64, noise_multiplier: f64) -> Result<Option<f64>> {
    if count == 0 {
        return Ok(Some(0.0));
    }
    match clt_mu(p, count, noise_multiplier) {
        Ok(mu) => Ok(Some(mu.mu())),
        Err(Error::NoPrivacy) => Ok(None),
        Err(e) => Err(e),
    }
}

/// True once the moving average of the last `window` values moved by at most
/// `rel_tol` (relative) from the window before it.
pub fn plateau_reached(series: &[f64], window: usize, rel_tol: f64) -> bool {
    if window == 0 || series.len() < 2 * window {
        return false;
    }
    let n = series.len();
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let last = mean(&series[n - window..]);
    let prev = mean(&series[n - 2 * window..n - window]);
    (last - prev).abs() <= rel_tol * prev.abs().max(f64::MIN_POSITIVE)
}

pub const PLATEAU_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub arch: ArchitectureVariables,
    pub weights: WeightParameters,
    pub discrete: DiscreteArchitecture,
    pub metrics: Vec<MetricsRow>,
    pub privacy: PrivacyReport,
    pub trace: Vec<PhaseTrace>,
    pub plateau: bool,
    /// `(A, W)` after each iteration, when requested.
    pub trajectory: Vec<(ArchitectureVariables, WeightParameters)>,
}

impl SearchResult {
    /// Canonical bytes of everything the run computed. Wall-clock time is left
    /// out, since it is the only field not determined by config and seed.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        encode_tensors(&self.arch, &mut out);
        encode_tensors(&self.weights, &mut out);
        out.extend_from_slice(self.discrete.to_text().as_bytes());
        let opt = |v: Option<f64>| v.map_or(u64::MAX, f64::to_bits).to_le_bytes();
        for r in &self.metrics {
            out.extend_from_slice(&r.iteration.to_le_bytes());
            out.push(r.phase.code());
            for v in [
                r.train_loss,
                r.val_loss,
                r.val_error,
                r.grad_norm_w,
                r.grad_norm_a,
                r.mu_w_so_far,
                r.mu_a_so_far,
            ] {
                out.extend_from_slice(&opt(v));
            }
        }
        out.extend_from_slice(self.privacy.to_text().as_bytes());
        for t in &self.trace {
            out.extend_from_slice(&t.party.to_le_bytes());
            out.extend_from_slice(&t.iteration.to_le_bytes());
            out.push(t.phase.code());
            out.extend_from_slice(&t.w_version.to_le_bytes());
        }
        out.push(u8::from(self.plateau));
        for (a, w) in &self.trajectory {
            encode_tensors(a, &mut out);
            encode_tensors(w, &mut out);
        }
        out
    }
}

/// Per-party privacy levels for a run of `config` over `parties`.
pub fn privacy_report(
    config: &FederationConfig,
    parties: &[PartyDataset],
) -> Result<PrivacyReport> {
    let parties = parties
        .iter()
        .zip(0u32..)
        .map(|(d, k)| {
            let q = PrivacyQuery {
                batch: config.sampling.p_w * d.train.len() as f64,
                batch_val: config.sampling.p_a * d.val.len() as f64,
                n_tr: d.train.len(),
                n_val: d.val.len(),
                iterations: config.iterations,
                sigma: config.noise.sigma,
                tau: config.noise.tau,
            };
            party_privacy(k, &q)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PrivacyReport { parties })
}

/// Runs the search from zero architecture scores and weights drawn from the
/// config seed.
pub fn run_search(
    space: &SearchSpace,
    config: &FederationConfig,
    parties: Vec<PartyDataset>,
) -> Result<SearchResult> {
    run_search_from(
        space,
        config,
        parties,
        space.init_arch(),
        space.init_weights(config.seed),
    )
}

pub fn run_search_from(
    space: &SearchSpace,
    config: &FederationConfig,
    parties: Vec<PartyDataset>,
    arch: ArchitectureVariables,
    weights: WeightParameters,
) -> Result<SearchResult> {
    config.validate()?;
    if parties.len() != config.parties {
        return Err(Error::InvalidArgument(format!(
            "config has {} parties but {} datasets were given",
            config.parties,
            parties.len()
        )));
    }
    let privacy = privacy_report(config, &parties)?;
    let vals: Vec<&Dataset> = parties.iter().map(|p| &p.val).collect();
    let pooled_val = Dataset::concat(&vals)?.to_batch()?;

    let mut server = ServerState::new(config, arch.clone(), weights.clone())?;
    let mut states = parties
        .into_iter()
        .zip(0u32..)
        .map(|(d, k)| PartyState::new(k, space, config, d, arch.clone(), weights.clone()))
        .collect::<Result<Vec<_>>>()?;

    let start = Instant::now();
    let mut metrics = Vec::with_capacity(2 * config.iterations as usize);
    let mut trace = Vec::with_capacity(2 * config.iterations as usize * states.len());
    let mut trajectory = Vec::new();
    let mut val_losses = Vec::with_capacity(config.iterations as usize);
    let mut bus = MessageBus::default();
    let (p_w, p_a) = (config.sampling.p_w, config.sampling.p_a);
    let (sigma, tau) = (config.noise.sigma, config.noise.tau);

    for t in 0..config.iterations {
        // W phase.
        let encoded = states
            .par_iter_mut()
            .map(|ps| party_w_phase(ps, t).map(|m| m.encode()))
            .collect::<Result<Vec<_>>>()?;
        encoded.into_iter().for_each(|b| bus.post(b));
        let (w_broadcast, g_total) = server_w_step(&mut server, &bus.drain()?)?;
        let bytes = w_broadcast.encode();
        states
            .par_iter_mut()
            .try_for_each(|ps| ps.receive_weights(&Broadcast::decode(&bytes)?))?;
        let (loss_sum, count) = states.iter().fold((0.0, 0), |(l, c), ps| {
            (l + ps.last_stats().loss_sum, c + ps.last_stats().count)
        });
        trace.extend(states.iter().filter_map(PartyState::last_trace));
        metrics.push(MetricsRow {
            iteration: t,
            phase: Phase::W,
            train_loss: (count > 0).then(|| loss_sum / count as f64),
            val_loss: None,
            val_error: None,
            grad_norm_w: Some(g_total.l2_norm()),
            grad_norm_a: None,
            mu_w_so_far: mu_so_far(p_w, t + 1, sigma)?,
            mu_a_so_far: mu_so_far(p_a, t, tau)?,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });

        // A phase.
        let encoded = states
            .par_iter_mut()
            .map(|ps| party_a_phase(ps, t).map(|m| m.encode()))
            .collect::<Result<Vec<_>>>()?;
        encoded.into_iter().for_each(|b| bus.post(b));
        let (a_broadcast, h_total) = server_a_step(&mut server, &bus.drain()?)?;
        let bytes = a_broadcast.encode();
        trace.extend(states.iter().filter_map(PartyState::last_trace));
        states
            .par_iter_mut()
            .try_for_each(|ps| ps.receive_arch(&Broadcast::decode(&bytes)?))?;
        let eval = evaluate(
            &Supernet {
                space,
                arch: server.arch(),
                weights: server.weights(),
            },
            &pooled_val,
        )?;
        val_losses.push(eval.loss);
        metrics.push(MetricsRow {
            iteration: t,
            phase: Phase::A,
            train_loss: None,
            val_loss: Some(eval.loss),
            val_error: Some(eval.error),
            grad_norm_w: None,
            grad_norm_a: Some(h_total.l2_norm()),
            mu_w_so_far: mu_so_far(p_w, t + 1, sigma)?,
            mu_a_so_far: mu_so_far(p_a, t + 1, tau)?,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
        if config.record_trajectory {
            trajectory.push((server.arch().clone(), server.weights().clone()));
        }
    }

    Ok(SearchResult {
        discrete: discretize(space, server.arch(), config.topk)?,
        arch: server.arch,
        weights: server.weights,
        metrics,
        privacy,
        trace,
        plateau: plateau_reached(&val_losses, config.plateau_window, PLATEAU_TOLERANCE),
        trajectory,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, SyntheticDatasetSpec};
    use crate::nas::{CandidateOpSet, CellGraph};

    fn space() -> SearchSpace {
        SearchSpace::new(
            CellGraph::dense(2).unwrap(),
            CandidateOpSet::standard(),
            4,
            3,
        )
        .unwrap()
    }

    fn parties(k: usize) -> Vec<PartyDataset> {
        let spec = SyntheticDatasetSpec {
            dim: 4,
            classes: 3,
            per_class: 24,
            ..Default::default()
        };
        let s = generate_dataset(&spec).unwrap();
        split_among_parties(&s.train, &s.val, k, 5).unwrap()
    }

    fn config(k: usize, t: u64) -> FederationConfig {
        FederationConfig {
            parties: k,
            iterations: t,
            ..Default::default()
        }
    }

    #[test]
    fn zero_iterations_return_the_initial_state() {
        let sp = space();
        let r = run_search(&sp, &config(2, 0), parties(2)).unwrap();
        assert_eq!(r.arch, sp.init_arch());
        assert_eq!(r.weights, sp.init_weights(0));
        assert!(r.metrics.is_empty());
        for p in &r.privacy.parties {
            assert_eq!(p.mu_w.unwrap().mu(), 0.0);
            assert_eq!(p.mu_a.unwrap().mu(), 0.0);
        }
    }

    #[test]
    fn missing_message_names_party_and_phase() {
        let sp = space();
        let cfg = config(3, 1);
        let mut server = ServerState::new(&cfg, sp.init_arch(), sp.init_weights(0)).unwrap();
        let mut states: Vec<PartyState> = parties(3)
            .into_iter()
            .zip(0u32..)
            .map(|(d, k)| {
                PartyState::new(k, &sp, &cfg, d, sp.init_arch(), sp.init_weights(0)).unwrap()
            })
            .collect();
        let msgs: Vec<GradientMessage> = states
            .iter_mut()
            .filter(|ps| ps.party_id() != 1)
            .map(|ps| party_w_phase(ps, 0).unwrap())
            .collect();
        let before = server.weights().clone();
        let err = server_w_step(&mut server, &msgs).unwrap_err();
        assert_eq!(
            err,
            Error::Protocol {
                party: 1,
                phase: "W".into(),
                detail: "no message for iteration 0".into()
            }
        );
        assert_eq!(server.weights(), &before);
    }

    #[test]
    fn desynchronized_party_is_rejected() {
        let sp = space();
        let cfg = config(1, 1);
        let d = parties(1).remove(0);
        let mut ps = PartyState::new(0, &sp, &cfg, d, sp.init_arch(), sp.init_weights(0)).unwrap();
        assert!(matches!(
            party_w_phase(&mut ps, 3),
            Err(Error::Protocol { .. })
        ));
        assert!(matches!(
            party_a_phase(&mut ps, 0),
            Err(Error::Protocol { .. })
        ));
    }

    #[test]
    fn all_empty_messages_leave_weights_unchanged() {
        let sp = space();
        let cfg = config(2, 1);
        let mut server = ServerState::new(&cfg, sp.init_arch(), sp.init_weights(0)).unwrap();
        let msgs: Vec<GradientMessage> = (0..2)
            .map(|k| GradientMessage {
                party_id: k,
                iteration: 0,
                phase: Phase::W,
                payload: None,
            })
            .collect();
        let (b, _) = server_w_step(&mut server, &msgs).unwrap();
        assert_eq!(b.values, sp.init_weights(0));
    }

    #[test]
    fn payload_with_foreign_keys_is_rejected() {
        let sp = space();
        let cfg = config(1, 1);
        let mut server = ServerState::new(&cfg, sp.init_arch(), sp.init_weights(0)).unwrap();
        let mut payload = sp.init_weights(0).zeros_like();
        payload.insert("examples", crate::tensor::Tensor::vector(vec![1.0, 2.0]));
        let msg = GradientMessage {
            party_id: 0,
            iteration: 0,
            phase: Phase::W,
            payload: Some(payload),
        };
        assert!(matches!(
            server_w_step(&mut server, &[msg]),
            Err(Error::Protocol { party: 0, .. })
        ));
    }

    #[test]
    fn plateau_flag() {
        assert!(!plateau_reached(&[1.0; 5], 3, 1e-3));
        assert!(plateau_reached(&[1.0; 6], 3, 1e-3));
        assert!(!plateau_reached(&[3.0, 3.0, 3.0, 1.0, 1.0, 1.0], 3, 1e-3));
    }
}
