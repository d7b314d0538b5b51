//! Transition kernels of bifurcating Markov chains.

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{BmcError, Result};
use crate::hermite::Observable;
use crate::rng::StreamRng;

/// `|2 a^2 - 1|` below this is classified as critical.
pub const CRITICAL_TOLERANCE: f64 = 1e-12;

/// Sampling interface of a kernel `P(x, dy, dz)` on the real line.
///
/// Only `sample_children` is required. Kernels that know their invariant law
/// can also seed a stationary root, and the Gaussian BAR kernel exposes its
/// analytic operators through [`BranchingKernel::as_bar`].
pub trait BranchingKernel: Sync {
    /// Draws the states `(Y, Z)` of the two children of a node in state `x`.
    fn sample_children(&self, x: f64, rng: &mut StreamRng) -> (f64, f64);

    /// One draw from the invariant law of `Q`, if known.
    fn sample_stationary(&self, _rng: &mut StreamRng) -> Option<f64> {
        None
    }

    fn as_bar(&self) -> Option<&BarKernel> {
        None
    }
}

/// Growth regime of the BMC, decided by `2 a^2` against 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Subcritical,
    Critical,
    Supercritical,
}

impl Regime {
    pub fn classify(a: f64) -> Regime {
        let d = 2.0 * a * a - 1.0;
        if d.abs() < CRITICAL_TOLERANCE {
            Regime::Critical
        } else if d < 0.0 {
            Regime::Subcritical
        } else {
            Regime::Supercritical
        }
    }

    pub fn short_label(self) -> &'static str {
        match self {
            Regime::Subcritical => "sub",
            Regime::Critical => "critical",
            Regime::Supercritical => "super",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::Subcritical => "subcritical",
            Regime::Critical => "critical",
            Regime::Supercritical => "supercritical",
        })
    }
}

impl FromStr for Regime {
    type Err = BmcError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sub" | "subcritical" | "sub-critical" => Ok(Regime::Subcritical),
            "crit" | "critical" => Ok(Regime::Critical),
            "super" | "supercritical" | "super-critical" => Ok(Regime::Supercritical),
            other => Err(BmcError::InvalidArgument(format!("unknown regime {other:?}"))),
        }
    }
}

/// A normal law `N(mean, variance)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian {
    pub mean: f64,
    pub variance: f64,
}

/// Symmetric Gaussian bifurcating autoregressive kernel:
/// each child is `a x + sigma * eps` with independent standard normal `eps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BarKernel {
    a: f64,
    sigma: f64,
    sigma_a: f64,
}

impl BarKernel {
    pub fn new(a: f64, sigma: f64) -> Result<Self> {
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(BmcError::InvalidKernel(format!(
                "sigma must be positive and finite, got {sigma}"
            )));
        }
        Self::build(a, sigma)
    }

    /// `a = sign / sqrt(2)`, rounded once from the exact value.
    pub fn critical(negative: bool, sigma: f64) -> Result<Self> {
        let a = std::f64::consts::FRAC_1_SQRT_2;
        Self::new(if negative { -a } else { a }, sigma)
    }

    /// Noise-free dynamics `x -> a x`, for deterministic diagnostics. It has
    /// no invariant law, so the analytic operators refuse it.
    pub fn noiseless(a: f64) -> Result<Self> {
        Self::build(a, 0.0)
    }

    fn build(a: f64, sigma: f64) -> Result<Self> {
        if !a.is_finite() || a == 0.0 || a.abs() >= 1.0 {
            return Err(BmcError::InvalidKernel(format!(
                "autoregression coefficient must satisfy 0 < |a| < 1, got {a}"
            )));
        }
        let sigma_a = sigma / (1.0 - a * a).sqrt();
        Ok(Self { a, sigma, sigma_a })
    }

    pub fn a(&self) -> f64 {
        self.a
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Standard deviation of the invariant law, `sigma / sqrt(1 - a^2)`.
    pub fn sigma_a(&self) -> f64 {
        self.sigma_a
    }

    /// Ergodicity rate `|a|`.
    pub fn alpha(&self) -> f64 {
        self.a.abs()
    }

    /// `sign(a)`.
    pub fn theta(&self) -> f64 {
        self.a.signum()
    }

    pub fn regime(&self) -> Regime {
        Regime::classify(self.a)
    }

    pub fn is_noiseless(&self) -> bool {
        self.sigma == 0.0
    }

    /// Scale of the Hermite basis, failing for the noiseless kernel.
    pub fn basis(&self) -> Result<f64> {
        if self.is_noiseless() {
            Err(BmcError::Degenerate(
                "the noiseless kernel has no invariant law or Hermite basis".into(),
            ))
        } else {
            Ok(self.sigma_a)
        }
    }

    pub fn invariant_measure(&self) -> Result<Gaussian> {
        let s = self.basis()?;
        Ok(Gaussian {
            mean: 0.0,
            variance: s * s,
        })
    }

    /// `Q^n f` as an observable.
    pub fn q_power(&self, f: &Observable, n: u32) -> Result<Observable> {
        f.check_kernel(self)?;
        Ok(f.apply_q(self.a, n))
    }

    /// `Q^n f(x)`.
    pub fn q_apply(&self, f: &Observable, x: f64, n: u32) -> Result<f64> {
        Ok(self.q_power(f, n)?.eval(x))
    }

    /// `P(g (x) h)(x) = Qg(x) Qh(x)` for this product kernel; the symmetrised
    /// tensor gives the same function.
    pub fn p_tensor(&self, g: &Observable, h: &Observable) -> Result<Observable> {
        self.q_power(g, 1)?.product(&self.q_power(h, 1)?)
    }
}

impl BranchingKernel for BarKernel {
    #[inline]
    fn sample_children(&self, x: f64, rng: &mut StreamRng) -> (f64, f64) {
        let mean = self.a * x;
        let e0: f64 = StandardNormal.sample(rng);
        let e1: f64 = StandardNormal.sample(rng);
        (mean + self.sigma * e0, mean + self.sigma * e1)
    }

    fn sample_stationary(&self, rng: &mut StreamRng) -> Option<f64> {
        if self.is_noiseless() {
            return None;
        }
        let e: f64 = StandardNormal.sample(rng);
        Some(self.sigma_a * e)
    }

    fn as_bar(&self) -> Option<&BarKernel> {
        Some(self)
    }
}
