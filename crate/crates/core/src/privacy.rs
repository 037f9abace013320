//! f-DP / Gaussian-DP accounting.
//!
//! Trade-off curves are sampled on a uniform grid over the type-I error
//! `alpha in [0, 1]`. Subsampling amplification takes the convex envelope of
//! `min(f_p, f_p^-1)`; composition over many iterations goes through the
//! central-limit `mu = p sqrt(T) sqrt(e^{1/sigma^2} - 1)`.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Default number of grid points for trade-off curves.
pub const DEFAULT_GRID: usize = 10_001;

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Inverse of [`normal_cdf`], by safeguarded Newton iteration on the lower
/// tail (the upper tail is obtained by symmetry to keep relative accuracy).
pub fn normal_quantile(p: f64) -> f64 {
    if p.is_nan() || !(0.0..=1.0).contains(&p) {
        return f64::NAN;
    }
    if p == 0.0 {
        return f64::NEG_INFINITY;
    }
    if p == 1.0 {
        return f64::INFINITY;
    }
    if p > 0.5 {
        return -normal_quantile(1.0 - p);
    }
    let (mut lo, mut hi) = (-40.0_f64, 0.0_f64);
    // Tail-aware starting point.
    let mut x = if p < 1e-3 {
        -(-2.0 * p.ln()).sqrt()
    } else {
        -(0.5 - p) * 2.5
    };
    for _ in 0..200 {
        let f = normal_cdf(x) - p;
        if f > 0.0 {
            hi = x;
        } else {
            lo = x;
        }
        let step = f / normal_pdf(x);
        let mut next = x - step;
        if !(next > lo && next < hi) || !next.is_finite() {
            next = 0.5 * (lo + hi);
        }
        if (next - x).abs() <= 1e-15 * x.abs().max(1.0) {
            return next;
        }
        x = next;
    }
    x
}

/// `G_mu(alpha) = Phi(Phi^-1(1 - alpha) - mu)`, the trade-off between
/// `N(0, 1)` and `N(mu, 1)`.
pub fn eval_g_mu(mu: f64, alpha: f64) -> f64 {
    if alpha <= 0.0 {
        return 1.0;
    }
    if alpha >= 1.0 {
        return 0.0;
    }
    normal_cdf(-normal_quantile(alpha) - mu)
}

/// `max(0, 1 - delta - e^eps alpha, e^-eps (1 - delta - alpha))`.
pub fn eval_f_eps_delta(eps: f64, delta: f64, alpha: f64) -> f64 {
    let a = 1.0 - delta - eps.exp() * alpha;
    let b = (-eps).exp() * (1.0 - delta - alpha);
    0.0_f64.max(a).max(b)
}

/// `delta(eps)` of a mu-GDP mechanism.
pub fn gdp_delta(mu: f64, eps: f64) -> f64 {
    if mu == 0.0 {
        return 0.0;
    }
    normal_cdf(-eps / mu + mu / 2.0) - eps.exp() * normal_cdf(-eps / mu - mu / 2.0)
}

/// A trade-off curve `alpha -> beta` on a uniform grid over `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TradeoffFunction {
    alpha: Vec<f64>,
    beta: Vec<f64>,
}

fn uniform_grid(n: usize) -> Vec<f64> {
    let h = 1.0 / (n - 1) as f64;
    (0..n)
        .map(|i| if i == n - 1 { 1.0 } else { i as f64 * h })
        .collect()
}

impl TradeoffFunction {
    pub fn from_fn(n: usize, f: impl Fn(f64) -> f64) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidArgument(
                "trade-off grid needs >= 2 points".into(),
            ));
        }
        let alpha = uniform_grid(n);
        let beta = alpha.iter().map(|&a| f(a)).collect();
        Ok(Self { alpha, beta })
    }

    /// Wraps sampled values on the uniform grid of `beta.len()` points.
    pub fn from_values(beta: Vec<f64>) -> Result<Self> {
        if beta.len() < 2 {
            return Err(Error::InvalidArgument(
                "trade-off grid needs >= 2 points".into(),
            ));
        }
        Ok(Self {
            alpha: uniform_grid(beta.len()),
            beta,
        })
    }

    /// Perfect privacy, `beta = 1 - alpha`.
    pub fn identity(n: usize) -> Result<Self> {
        Self::from_fn(n, |a| 1.0 - a)
    }

    pub fn gaussian(mu: f64, n: usize) -> Result<Self> {
        if !(mu >= 0.0) {
            return Err(Error::InvalidArgument(format!("mu = {mu} must be >= 0")));
        }
        Self::from_fn(n, |a| eval_g_mu(mu, a))
    }

    pub fn eps_delta(eps: f64, delta: f64, n: usize) -> Result<Self> {
        Self::from_fn(n, |a| eval_f_eps_delta(eps, delta, a))
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    /// Linear interpolation between grid points.
    pub fn eval(&self, a: f64) -> f64 {
        let n = self.len();
        let pos = (a.clamp(0.0, 1.0) * (n - 1) as f64).min((n - 1) as f64);
        let i = (pos.floor() as usize).min(n - 2);
        let t = pos - i as f64;
        self.beta[i] * (1.0 - t) + self.beta[i + 1] * t
    }

    /// Checks the trade-off invariants: values in `[0, 1]`, below `1 - alpha`,
    /// non-increasing and convex (second differences `>= -1e-9`).
    pub fn validate(&self) -> Result<()> {
        const TOL: f64 = 1e-12;
        for (i, (&a, &b)) in self.alpha.iter().zip(&self.beta).enumerate() {
            if !(-TOL..=1.0 + TOL).contains(&b) || b > 1.0 - a + TOL {
                return Err(Error::InvalidArgument(format!(
                    "beta({a}) = {b} outside [0, 1 - alpha] at index {i}"
                )));
            }
        }
        for (i, w) in self.beta.windows(2).enumerate() {
            if w[1] > w[0] + TOL {
                return Err(Error::InvalidArgument(format!(
                    "beta increases at index {i}"
                )));
            }
        }
        for (i, w) in self.beta.windows(3).enumerate() {
            if w[0] - 2.0 * w[1] + w[2] < -1e-9 {
                return Err(Error::InvalidArgument(format!(
                    "beta not convex at index {}",
                    i + 1
                )));
            }
        }
        Ok(())
    }

    /// Pointwise `self >= other - tol` (at least as private).
    pub fn dominates(&self, other: &TradeoffFunction, tol: f64) -> bool {
        self.len() == other.len()
            && self
                .beta
                .iter()
                .zip(&other.beta)
                .all(|(a, b)| *a >= b - tol)
    }

    pub fn sup_distance(&self, other: &TradeoffFunction) -> f64 {
        self.beta
            .iter()
            .zip(&other.beta)
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Generalized inverse `inf{t : f(t) <= alpha}` of the piecewise-linear
    /// interpolant, resampled on the same grid.
    pub fn inverse(&self) -> TradeoffFunction {
        let n = self.len();
        let mut out = vec![0.0; n];
        // The first index with beta <= target moves right as target falls.
        let mut j = 0;
        for (slot, &target) in self.alpha.iter().enumerate().rev() {
            while j < n && self.beta[j] > target {
                j += 1;
            }
            let t = if j == 0 {
                0.0
            } else if j == n {
                1.0
            } else {
                let (b0, b1) = (self.beta[j - 1], self.beta[j]);
                let frac = (b0 - target) / (b0 - b1);
                self.alpha[j - 1] + frac * (self.alpha[j] - self.alpha[j - 1])
            };
            out[slot] = t;
        }
        TradeoffFunction {
            alpha: self.alpha.clone(),
            beta: out,
        }
    }
}

/// Indices of the lower convex hull of `(xs[i], ys[i])`, `xs` increasing.
/// Collinear interior points are not vertices.
pub fn lower_hull_vertices(xs: &[f64], ys: &[f64]) -> Vec<usize> {
    let mut hull: Vec<usize> = Vec::with_capacity(xs.len());
    for i in 0..xs.len() {
        while hull.len() >= 2 {
            let (a, b) = (hull[hull.len() - 2], hull[hull.len() - 1]);
            let cross = (xs[b] - xs[a]) * (ys[i] - ys[a]) - (ys[b] - ys[a]) * (xs[i] - xs[a]);
            if cross <= 0.0 {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(i);
    }
    hull
}

/// Convex envelope (double conjugate) of a curve sampled on `xs`, evaluated
/// back on `xs`.
pub fn double_conjugate(xs: &[f64], ys: &[f64]) -> Vec<f64> {
    let hull = lower_hull_vertices(xs, ys);
    let mut out = Vec::with_capacity(xs.len());
    for w in hull.windows(2) {
        let (a, b) = (w[0], w[1]);
        for i in a..b {
            let t = (xs[i] - xs[a]) / (xs[b] - xs[a]);
            out.push(ys[a] + t * (ys[b] - ys[a]));
        }
    }
    out.push(ys[*hull.last().expect("nonempty curve")]);
    out
}

/// Trade-off curve of a mechanism run on a Poisson subsample with rate `p`:
/// the convex envelope of `min(f_p, f_p^-1)` where `f_p = p f + (1 - p) Id`.
pub fn subsample_operator(f: &TradeoffFunction, p: f64) -> Result<TradeoffFunction> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!(
            "subsample p = {p} not in [0, 1]"
        )));
    }
    let fp = TradeoffFunction {
        alpha: f.alpha.clone(),
        beta: f
            .alpha
            .iter()
            .zip(&f.beta)
            .map(|(a, b)| p * b + (1.0 - p) * (1.0 - a))
            .collect(),
    };
    let inv = fp.inverse();
    let lower: Vec<f64> = fp
        .beta
        .iter()
        .zip(&inv.beta)
        .map(|(a, b)| a.min(*b))
        .collect();
    Ok(TradeoffFunction {
        beta: double_conjugate(&fp.alpha, &lower),
        alpha: fp.alpha,
    })
}

/// A Gaussian-DP level.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct GdpLevel(f64);

impl GdpLevel {
    pub fn new(mu: f64) -> Result<Self> {
        if !(mu >= 0.0 && mu.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "mu = {mu} must be finite and >= 0"
            )));
        }
        Ok(Self(mu))
    }

    pub fn mu(self) -> f64 {
        self.0
    }

    pub fn tradeoff(self, n: usize) -> Result<TradeoffFunction> {
        TradeoffFunction::gaussian(self.0, n)
    }
}

/// `mu = p sqrt(T) sqrt(e^{1/sigma^2} - 1)`.
pub fn clt_mu(p: f64, iterations: u64, noise_multiplier: f64) -> Result<GdpLevel> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!(
            "sampling rate {p} not in [0, 1]"
        )));
    }
    if noise_multiplier == 0.0 {
        return Err(Error::NoPrivacy);
    }
    if !(noise_multiplier > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "noise multiplier {noise_multiplier} must be > 0"
        )));
    }
    let growth = (1.0 / (noise_multiplier * noise_multiplier)).exp_m1();
    GdpLevel::new(p * (iterations as f64).sqrt() * growth.sqrt())
}

/// Composition of two Gaussian mechanisms: `sqrt(mu1^2 + mu2^2)`.
pub fn gdp_compose(a: GdpLevel, b: GdpLevel) -> GdpLevel {
    GdpLevel(a.0.hypot(b.0))
}

/// Inputs of the per-party bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrivacyQuery {
    /// Expected weight-phase batch size.
    pub batch: f64,
    /// Expected architecture-phase batch size.
    pub batch_val: f64,
    pub n_tr: usize,
    pub n_val: usize,
    pub iterations: u64,
    pub sigma: f64,
    pub tau: f64,
}

impl PrivacyQuery {
    /// Same expected batch size for both phases.
    pub fn new(
        batch: f64,
        n_tr: usize,
        n_val: usize,
        iterations: u64,
        sigma: f64,
        tau: f64,
    ) -> Self {
        Self {
            batch,
            batch_val: batch,
            n_tr,
            n_val,
            iterations,
            sigma,
            tau,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_tr == 0 || self.n_val == 0 {
            return Err(Error::InvalidArgument(
                "dataset sizes must be positive".into(),
            ));
        }
        if !(self.batch > 0.0 && self.batch_val > 0.0) {
            return Err(Error::InvalidArgument(
                "batch sizes must be positive".into(),
            ));
        }
        if self.batch > self.n_tr as f64 || self.batch_val > self.n_val as f64 {
            return Err(Error::InvalidArgument(format!(
                "batch size exceeds dataset size (B={}, B_val={}, N_tr={}, N_val={})",
                self.batch, self.batch_val, self.n_tr, self.n_val
            )));
        }
        if !(self.sigma >= 0.0 && self.tau >= 0.0) {
            return Err(Error::InvalidArgument(
                "noise multipliers must be >= 0".into(),
            ));
        }
        Ok(())
    }

    pub fn rate_w(&self) -> f64 {
        self.batch / self.n_tr as f64
    }

    pub fn rate_a(&self) -> f64 {
        self.batch_val / self.n_val as f64
    }
}

/// Per-party privacy levels. `None` means the mechanism adds no noise and
/// carries no guarantee.
#[derive(Debug, Clone, PartialEq)]
pub struct PartyPrivacy {
    pub party: u32,
    pub query: PrivacyQuery,
    pub mu_w: Option<GdpLevel>,
    pub mu_a: Option<GdpLevel>,
}

fn composed_level(p: f64, iterations: u64, noise: f64) -> Result<Option<GdpLevel>> {
    if iterations == 0 {
        return Ok(Some(GdpLevel(0.0)));
    }
    match clt_mu(p, iterations, noise) {
        Ok(mu) => Ok(Some(mu)),
        Err(Error::NoPrivacy) => Ok(None),
        Err(e) => Err(e),
    }
}

/// The weight and architecture compositions are accounted separately, since
/// they query disjoint training and validation data.
pub fn party_privacy(party: u32, q: &PrivacyQuery) -> Result<PartyPrivacy> {
    q.validate()?;
    Ok(PartyPrivacy {
        party,
        query: *q,
        mu_w: composed_level(q.rate_w(), q.iterations, q.sigma)?,
        mu_a: composed_level(q.rate_a(), q.iterations, q.tau)?,
    })
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PrivacyReport {
    pub parties: Vec<PartyPrivacy>,
}

fn fmt_mu(mu: Option<GdpLevel>) -> String {
    mu.map_or_else(|| "inf".to_string(), |m| format!("{}", m.mu()))
}

impl PrivacyReport {
    /// `key=value` lines, one block per party.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for p in &self.parties {
            let q = &p.query;
            let _ = writeln!(s, "party={}", p.party);
            let _ = writeln!(s, "mu_W={}", fmt_mu(p.mu_w));
            let _ = writeln!(s, "mu_A={}", fmt_mu(p.mu_a));
            let _ = writeln!(s, "B={}", q.batch);
            let _ = writeln!(s, "B_val={}", q.batch_val);
            let _ = writeln!(s, "N_tr={}", q.n_tr);
            let _ = writeln!(s, "N_val={}", q.n_val);
            let _ = writeln!(s, "T={}", q.iterations);
            let _ = writeln!(s, "sigma={}", q.sigma);
            let _ = writeln!(s, "tau={}", q.tau);
        }
        s
    }

    /// `mechanism,alpha,beta` rows of each party's `G_mu` curves.
    pub fn curve_csv(&self, points: usize) -> Result<String> {
        let mut s = String::from("party,mechanism,alpha,beta\n");
        for p in &self.parties {
            for (name, mu) in [("W", p.mu_w), ("A", p.mu_a)] {
                let Some(mu) = mu else { continue };
                let curve = mu.tradeoff(points)?;
                for (a, b) in curve.alpha().iter().zip(curve.beta()) {
                    let _ = writeln!(s, "{},{name},{a},{b}", p.party);
                }
            }
        }
        Ok(s)
    }
}
