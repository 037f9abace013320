//! Per-sample clipping, Poisson subsampling and the Gaussian mechanism.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::GradientVector;

/// Which half of an iteration a draw belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Phase {
    W,
    A,
}

impl Phase {
    pub fn code(self) -> u8 {
        match self {
            Phase::W => 0,
            Phase::A => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Phase::W),
            1 => Ok(Phase::A),
            other => Err(Error::Decode(format!("unknown phase code {other}"))),
        }
    }
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::W => "W",
            Phase::A => "A",
        })
    }
}

/// What a stream of draws is used for. Separate purposes never share draws,
/// so the size of a subsample cannot shift the noise that follows it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    Subsample,
    Noise,
}

/// Coordinates of a random stream. The stream is a ChaCha keystream whose key
/// is derived from all coordinates, so draw `i` of a stream depends only on
/// the coordinates and `i`, never on execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngKey {
    pub seed: u64,
    pub party: u32,
    pub iteration: u64,
    pub phase: Phase,
    pub purpose: Purpose,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngKey {
    pub fn stream(&self) -> ChaCha12Rng {
        let words = [
            self.seed,
            self.party as u64,
            self.iteration,
            self.phase.code() as u64,
            match self.purpose {
                Purpose::Subsample => 0,
                Purpose::Noise => 1,
            },
        ];
        let mut key = [0u8; 32];
        let mut h = 0x6A09_E667_F3BC_C908u64;
        for (chunk, i) in key.chunks_mut(8).zip(0u64..) {
            for w in words {
                h = splitmix(h ^ w ^ i.rotate_left(17));
            }
            chunk.copy_from_slice(&h.to_le_bytes());
        }
        ChaCha12Rng::from_seed(key)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipConfig {
    /// Clip bound for weight gradients.
    pub r_g: f64,
    /// Clip bound for architecture gradients.
    pub r_h: f64,
}

impl ClipConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.r_g > 0.0 && self.r_h > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "clip bounds must be > 0 (r_g={}, r_h={})",
                self.r_g, self.r_h
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseConfig {
    /// Noise multiplier of the weight mechanism.
    pub sigma: f64,
    /// Noise multiplier of the architecture mechanism.
    pub tau: f64,
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.tau >= 0.0 && self.sigma.is_finite() && self.tau.is_finite())
        {
            return Err(Error::InvalidArgument(format!(
                "noise multipliers must be finite and >= 0 (sigma={}, tau={})",
                self.sigma, self.tau
            )));
        }
        Ok(())
    }
}

/// Poisson inclusion probabilities for the two phases.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubsampleConfig {
    pub p_w: f64,
    pub p_a: f64,
}

impl SubsampleConfig {
    pub fn shared(p: f64) -> Self {
        Self { p_w: p, p_a: p }
    }

    pub fn validate(&self) -> Result<()> {
        for p in [self.p_w, self.p_a] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidArgument(format!(
                    "subsample p = {p} not in [0, 1]"
                )));
            }
        }
        Ok(())
    }

    pub fn for_phase(&self, phase: Phase) -> f64 {
        match phase {
            Phase::W => self.p_w,
            Phase::A => self.p_a,
        }
    }
}

/// Includes each of `0..n` independently with probability `p`.
pub fn poisson_subsample<R: Rng + ?Sized>(n: usize, p: f64, rng: &mut R) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!(
            "subsample p = {p} not in [0, 1]"
        )));
    }
    Ok((0..n).filter(|_| rng.random::<f64>() < p).collect())
}

/// `g / max(1, ||g|| / bound)`.
pub fn clip(g: &GradientVector, bound: f64) -> Result<GradientVector> {
    if !(bound > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "clip bound {bound} must be > 0"
        )));
    }
    let norm = g.l2_norm();
    if !norm.is_finite() {
        return Err(Error::NonFinite("gradient norm".into()));
    }
    let factor = (norm / bound).max(1.0);
    if factor == 1.0 {
        return Ok(g.clone());
    }
    let mut out = g.scaled(1.0 / factor);
    // Rounding can leave the result a hair above the bound; the sensitivity
    // argument needs the bound to hold exactly.
    let n = out.l2_norm();
    if n > bound {
        out.scale_in_place(bound / n * (1.0 - f64::EPSILON));
    }
    Ok(out)
}

/// Sum of the clipped gradients, left to right.
pub fn clipped_sum(grads: &[GradientVector], bound: f64) -> Result<GradientVector> {
    let clipped = grads
        .iter()
        .map(|g| clip(g, bound))
        .collect::<Result<Vec<_>>>()?;
    GradientVector::sum(&clipped)
}

/// Adds `std * N(0, 1)` to every coordinate, in key order.
pub fn add_gaussian_noise<R: Rng + ?Sized>(g: &mut GradientVector, std: f64, rng: &mut R) {
    if std == 0.0 {
        return;
    }
    for (_, t) in g.iter_mut() {
        for v in t.data_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v += std * z;
        }
    }
}

/// `(sum_i clip(g_i, R) + R * noise_multiplier * N(0, I)) / n`.
///
/// An empty list returns [`Error::EmptyBatch`]; callers treat it as a skipped
/// contribution.
pub fn privatize<R: Rng + ?Sized>(
    per_sample: &[GradientVector],
    bound: f64,
    noise_multiplier: f64,
    rng: &mut R,
) -> Result<GradientVector> {
    if per_sample.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if !(noise_multiplier >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "noise multiplier {noise_multiplier} must be >= 0"
        )));
    }
    let mut sum = clipped_sum(per_sample, bound)?;
    let std = if bound.is_finite() {
        bound * noise_multiplier
    } else if noise_multiplier == 0.0 {
        0.0
    } else {
        return Err(Error::InvalidArgument(
            "noise with an infinite clip bound has infinite variance".into(),
        ));
    };
    add_gaussian_noise(&mut sum, std, rng);
    sum.scale_in_place(1.0 / per_sample.len() as f64);
    Ok(sum)
}

/// l2 distance between the clipped sum of `grads` and that of `grads` with
/// element `removed` dropped.
pub fn sensitivity_probe(grads: &[GradientVector], removed: usize, bound: f64) -> Result<f64> {
    if removed >= grads.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot remove element {removed} of {}",
            grads.len()
        )));
    }
    let full = clipped_sum(grads, bound)?;
    let rest: Vec<GradientVector> = grads
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != removed)
        .map(|(_, g)| g.clone())
        .collect();
    let mut diff = full;
    if !rest.is_empty() {
        diff.axpy(-1.0, &clipped_sum(&rest, bound)?)?;
    }
    Ok(diff.l2_norm())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{NamedTensors, Tensor};

    fn g(v: &[f64]) -> GradientVector {
        let mut n = NamedTensors::new();
        n.insert("x", Tensor::vector(v.to_vec()));
        n
    }

    fn key(seed: u64) -> RngKey {
        RngKey {
            seed,
            party: 0,
            iteration: 0,
            phase: Phase::W,
            purpose: Purpose::Subsample,
        }
    }

    #[test]
    fn subsample_extremes() {
        let mut rng = key(1).stream();
        assert!(poisson_subsample(100, 0.0, &mut rng).unwrap().is_empty());
        assert_eq!(
            poisson_subsample(100, 1.0, &mut rng).unwrap(),
            (0..100).collect::<Vec<_>>()
        );
        assert!(poisson_subsample(100, 1.5, &mut rng).is_err());
    }

    #[test]
    fn streams_are_keyed_by_every_coordinate() {
        let base = key(3);
        let draw = |k: RngKey| k.stream().random::<u64>();
        assert_eq!(draw(base), draw(base));
        let variants = [
            RngKey { seed: 4, ..base },
            RngKey { party: 1, ..base },
            RngKey {
                iteration: 1,
                ..base
            },
            RngKey {
                phase: Phase::A,
                ..base
            },
            RngKey {
                purpose: Purpose::Noise,
                ..base
            },
        ];
        for v in variants {
            assert_ne!(draw(v), draw(base));
        }
    }

    #[test]
    fn clip_examples() {
        assert_eq!(clip(&g(&[0.3, 0.4]), 1.0).unwrap(), g(&[0.3, 0.4]));
        let c = clip(&g(&[3.0, 4.0]), 1.0).unwrap();
        let v = c.get("x").unwrap().data();
        assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);
        let c = clip(&g(&[2.0, 0.0]), 1.0).unwrap();
        assert!((c.get("x").unwrap().data()[0] - 1.0).abs() < 1e-15);
        assert!(clip(&g(&[1.0]), 0.0).is_err());
        assert_eq!(
            clip(&g(&[1e300, 1e300]), 1.0),
            Err(Error::NonFinite("gradient norm".into()))
        );
        assert_eq!(clip(&g(&[5.0]), f64::INFINITY).unwrap(), g(&[5.0]));
    }

    #[test]
    fn privatize_without_noise_is_clipped_mean() {
        let mut rng = key(5).stream();
        let out = privatize(&[g(&[3.0, 4.0]), g(&[0.1, 0.0])], 1.0, 0.0, &mut rng).unwrap();
        let v = out.get("x").unwrap().data();
        assert!((v[0] - 0.35).abs() < 1e-15 && (v[1] - 0.4).abs() < 1e-15);
        let single = privatize(&[g(&[0.2, -0.1])], 1.0, 0.0, &mut rng).unwrap();
        assert_eq!(single, g(&[0.2, -0.1]));
        assert_eq!(privatize(&[], 1.0, 1.0, &mut rng), Err(Error::EmptyBatch));
    }

    #[test]
    fn privatize_replays_identically() {
        let grads = [g(&[0.5, -2.0, 1.0]), g(&[0.0, 0.1, 0.2])];
        let a = privatize(&grads, 1.0, 1.3, &mut key(9).stream()).unwrap();
        let b = privatize(&grads, 1.0, 1.3, &mut key(9).stream()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sensitivity_examples() {
        let grads = [g(&[1.0, 2.0]), g(&[0.0, 0.0])];
        assert_eq!(sensitivity_probe(&grads, 1, 1.0).unwrap(), 0.0);
        let grads = [g(&[0.3, 0.1]), g(&[6.0, 8.0])];
        assert!((sensitivity_probe(&grads, 1, 1.0).unwrap() - 1.0).abs() < 1e-15);
    }
}
