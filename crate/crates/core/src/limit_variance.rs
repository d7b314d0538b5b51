//! Asymptotic variances of the central limit theorems for additive
//! functionals of the Gaussian bifurcating autoregression.
//!
//! Every `<mu, .>` pairing is a Gauss–Hermite quadrature, and the product
//! form `P(g (x) h) = Qg Qh` of the kernel turns the `P`-terms into
//! pairings of `Q`-iterates. Sub-critical series are truncated where a
//! geometric bound on the remainder drops below the requested tolerance;
//! that bound is reported alongside the value. Critical variances are
//! finite expressions or closed geometric sums.

use serde::Serialize;

use crate::error::{require_regime, BmcError, Result};
use crate::hermite::{Observable, ObservableSequence, SequenceTail};
use crate::kernels::{BarKernel, Regime};

/// Default bound on the neglected remainder of a series.
pub const DEFAULT_TOLERANCE: f64 = 1e-12;

/// Largest truncation index tried before giving up.
pub const MAX_TRUNCATION: usize = 1 << 22;

const SUB: &[Regime] = &[Regime::Subcritical];
const CRIT: &[Regime] = &[Regime::Critical];

/// First and second parts of a variance, `value = first + 2 second`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VarianceTerms {
    pub first: f64,
    pub second: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VarianceReport {
    pub value: f64,
    /// Number of terms kept in each truncated series; `0` when the value is
    /// a finite or closed-form expression.
    pub truncation_k: usize,
    /// Bound on the absolute error from truncation.
    pub tail_bound: f64,
    pub terms: VarianceTerms,
}

impl VarianceReport {
    fn exact(first: f64, second: f64) -> Self {
        Self {
            value: first + 2.0 * second,
            truncation_k: 0,
            tail_bound: 0.0,
            terms: VarianceTerms { first, second },
        }
    }
}

/// `<mu, g h>`.
fn pair(g: &Observable, h: &Observable) -> Result<f64> {
    g.inner(h)
}

fn check_tolerance(tol: f64) -> Result<()> {
    if tol > 0.0 && tol.is_finite() {
        Ok(())
    } else {
        Err(BmcError::InvalidArgument(format!("tolerance must be positive, got {tol}")))
    }
}

/// Smallest `K` with `bound(K) < tol`.
fn choose_truncation(tol: f64, bound: impl Fn(usize) -> f64) -> Result<usize> {
    let mut k = 1;
    while bound(k) >= tol {
        k *= 2;
        if k > MAX_TRUNCATION {
            return Err(BmcError::InvalidArgument(format!(
                "tolerance {tol} needs more than {MAX_TRUNCATION} terms"
            )));
        }
    }
    let (mut lo, mut hi) = (k / 2, k);
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if bound(mid) < tol {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(if bound(lo) < tol { lo } else { hi })
}

/// `sqrt(2) Q h`: one step of the scaled iterates `2^(k/2) Q^(k+1) g`,
/// which stay bounded where `2^k` alone would overflow.
fn step(h: &Observable, a: f64) -> Observable {
    h.apply_q(a, 1).scaled(std::f64::consts::SQRT_2)
}

/// `sum_{k < K} 2^k <mu, (Q^(k+1) g)^2>`, the `P`-series of a centred `g`.
fn p_series(g: &Observable, a: f64, k_max: usize) -> Result<f64> {
    let mut sum = 0.0;
    let mut q = g.apply_q(a, 1);
    for _ in 0..k_max {
        sum += pair(&q, &q)?;
        q = step(&q, a);
    }
    Ok(sum)
}

/// `<mu, g Q^d h> + sum_{r < K} 2^r <mu, Q^(r+1) g Q^(r+d+1) h>` for centred
/// `g`, `h`.
fn cross_series(g: &Observable, h: &Observable, d: usize, a: f64, k_max: usize) -> Result<f64> {
    let mut sum = pair(g, &h.apply_q(a, d as u32))?;
    let mut qg = g.apply_q(a, 1);
    let mut qh = h.apply_q(a, d as u32 + 1);
    for _ in 0..k_max {
        sum += pair(&qg, &qh)?;
        qg = step(&qg, a);
        qh = step(&qh, a);
    }
    Ok(sum)
}

/// `Sigma_G` for the generation functional: `<mu, f~^2> + sum_k 2^k <mu,
/// P(Q^k f~ (x) Q^k f~)>`.
pub fn sigma_sub_g(f: &Observable, kernel: &BarKernel, tol: f64) -> Result<VarianceReport> {
    check_tolerance(tol)?;
    require_regime(kernel.regime(), SUB)?;
    f.check_kernel(kernel)?;
    let norm = f.center().norm_sq();
    let k = choose_truncation(tol, |k| g_tail(norm, kernel.alpha(), k))?;
    sigma_sub_g_with_truncation(f, kernel, k)
}

fn g_tail(norm: f64, alpha: f64, k: usize) -> f64 {
    let q = 2.0 * alpha * alpha;
    alpha * alpha * norm * q.powi(k as i32) / (1.0 - q)
}

/// [`sigma_sub_g`] with exactly `k` terms of the series kept.
pub fn sigma_sub_g_with_truncation(f: &Observable, kernel: &BarKernel, k: usize) -> Result<VarianceReport> {
    require_regime(kernel.regime(), SUB)?;
    f.check_kernel(kernel)?;
    let ft = f.center();
    let value = pair(&ft, &ft)? + p_series(&ft, kernel.a(), k)?;
    Ok(VarianceReport {
        value,
        truncation_k: k,
        tail_bound: g_tail(ft.norm_sq(), kernel.alpha(), k),
        terms: VarianceTerms {
            first: value,
            second: 0.0,
        },
    })
}

/// `Sigma_T` for the tree functional: `Sigma_G + 2 (sum_{k>=1} <mu, f~
/// Q^k f~> + sum_{k>=1, r>=0} 2^r <mu, P(Q^r f~ (x) Q^(r+k) f~)>)`.
pub fn sigma_sub_t(f: &Observable, kernel: &BarKernel, tol: f64) -> Result<VarianceReport> {
    check_tolerance(tol)?;
    require_regime(kernel.regime(), SUB)?;
    f.check_kernel(kernel)?;
    let norm = f.center().norm_sq();
    let k = choose_truncation(tol, |k| t_tail(norm, kernel.alpha(), k))?;
    sigma_sub_t_with_truncation(f, kernel, k)
}

fn t_tail(norm: f64, alpha: f64, k: usize) -> f64 {
    let q = 2.0 * alpha * alpha;
    let single = norm * alpha.powi(k as i32 + 1) / (1.0 - alpha);
    let double = norm
        * alpha
        * alpha
        * (alpha.powi(k as i32 + 1) / ((1.0 - alpha) * (1.0 - q))
            + alpha / (1.0 - alpha) * q.powi(k as i32) / (1.0 - q));
    g_tail(norm, alpha, k) + 2.0 * (single + double)
}

/// [`sigma_sub_t`] with `k` terms kept in every index.
pub fn sigma_sub_t_with_truncation(f: &Observable, kernel: &BarKernel, k: usize) -> Result<VarianceReport> {
    let g = sigma_sub_g_with_truncation(f, kernel, k)?;
    let ft = f.center();
    let mut second = 0.0;
    for d in 1..=k {
        second += cross_series(&ft, &ft, d, kernel.a(), k)?;
    }
    Ok(VarianceReport {
        value: g.value + 2.0 * second,
        truncation_k: k,
        tail_bound: t_tail(ft.norm_sq(), kernel.alpha(), k),
        terms: VarianceTerms {
            first: g.value,
            second,
        },
    })
}

/// Distinct centred functions of a sequence with the weight `sum 2^-l`
/// over the indices `l` where each occurs.
struct SequenceLayout {
    functions: Vec<Observable>,
    /// Index of the function repeated forever, if any.
    tail: Option<usize>,
}

impl SequenceLayout {
    fn new(seq: &ObservableSequence) -> Self {
        let functions: Vec<Observable> = seq.entries().iter().map(Observable::center).collect();
        let tail = match seq.tail() {
            SequenceTail::Constant => Some(functions.len() - 1),
            SequenceTail::Zero => None,
        };
        Self { functions, tail }
    }

    fn weight(&self, i: usize) -> f64 {
        let w = 2f64.powi(-(i as i32));
        if Some(i) == self.tail {
            2.0 * w
        } else {
            w
        }
    }

    fn max_norm(&self) -> f64 {
        self.functions.iter().map(Observable::norm_sq).fold(0.0, f64::max)
    }
}

/// `Sigma(f)` for a sequence `(f_l)`: `S1 + 2 S2` with
/// `S1 = sum_l 2^-l <mu, f~_l^2> + sum_{l,k} 2^(k-l) <mu, P(Q^k f~_l (x) Q^k f~_l)>`,
/// `S2 = sum_{l<k} 2^-l <mu, f~_k Q^(k-l) f~_l>
///     + sum_{l<k, r} 2^(r-l) <mu, P(Q^r f~_k (x) Q^(r+k-l) f~_l)>`.
pub fn sigma_sub_sequence(seq: &ObservableSequence, kernel: &BarKernel, tol: f64) -> Result<VarianceReport> {
    check_tolerance(tol)?;
    require_regime(kernel.regime(), SUB)?;
    seq.check_kernel(kernel)?;
    let layout = SequenceLayout::new(seq);
    let b = layout.max_norm();
    let constant = layout.tail.is_some();
    let k = choose_truncation(tol, |k| sequence_tail(b, kernel.alpha(), k, constant))?;
    sigma_sub_sequence_with_truncation(seq, kernel, k)
}

fn sequence_tail(b: f64, alpha: f64, k: usize, constant_tail: bool) -> f64 {
    let q = 2.0 * alpha * alpha;
    let r_tail = alpha * alpha * q.powi(k as i32) / (1.0 - q);
    // S1: the l-weights sum to at most 2.
    let first = 2.0 * b * r_tail;
    // S2: sum_{l<k} 2^-l alpha^(k-l) <= 2 alpha / (1 - alpha).
    let pairs = 2.0 * alpha / (1.0 - alpha);
    let mut second = b * pairs * r_tail;
    if constant_tail {
        let kappa = (1.0 - alpha * alpha) / (1.0 - q);
        second += 2.0 * b * kappa * alpha.powi(k as i32 + 1) / (1.0 - alpha);
    }
    first + 2.0 * second
}

/// [`sigma_sub_sequence`] with `k` terms kept in the `k`/`r` series and,
/// for a constant tail, in the lag series.
pub fn sigma_sub_sequence_with_truncation(
    seq: &ObservableSequence,
    kernel: &BarKernel,
    k: usize,
) -> Result<VarianceReport> {
    require_regime(kernel.regime(), SUB)?;
    seq.check_kernel(kernel)?;
    let a = kernel.a();
    let layout = SequenceLayout::new(seq);
    let fs = &layout.functions;

    let mut first = 0.0;
    for (i, f) in fs.iter().enumerate() {
        first += layout.weight(i) * (pair(f, f)? + p_series(f, a, k)?);
    }

    let mut second = 0.0;
    for (l, fl) in fs.iter().enumerate() {
        let wl = 2f64.powi(-(l as i32));
        for (kk, fk) in fs.iter().enumerate().skip(l + 1) {
            if Some(kk) == layout.tail {
                // f_k = f_tail for every k >= kk: lags kk - l .. kk - l + K.
                for d in (kk - l)..=(kk - l + k) {
                    second += wl * cross_series(fk, fl, d, a, k)?;
                }
            } else {
                second += wl * cross_series(fk, fl, kk - l, a, k)?;
            }
        }
        if Some(l) == layout.tail {
            // Both indices in the tail: sum_{l' >= l} 2^-l' sum_{d >= 1}.
            for d in 1..=k {
                second += 2.0 * wl * cross_series(fl, fl, d, a, k)?;
            }
        }
    }

    Ok(VarianceReport {
        value: first + 2.0 * second,
        truncation_k: k,
        tail_bound: sequence_tail(layout.max_norm(), kernel.alpha(), k, layout.tail.is_some()),
        terms: VarianceTerms { first, second },
    })
}

/// Phase `theta` of the eigenvalue `a = theta / sqrt(2)` of modulus
/// `1/sqrt(2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EigenPhase {
    Positive,
    Negative,
    /// `theta = exp(i arg)` off the real axis; representable but not
    /// evaluated.
    Complex { arg: f64 },
}

impl EigenPhase {
    pub fn of(kernel: &BarKernel) -> Self {
        if kernel.theta() > 0.0 {
            Self::Positive
        } else {
            Self::Negative
        }
    }

    /// Real value of `theta`.
    pub fn real(self) -> Result<f64> {
        match self {
            Self::Positive => Ok(1.0),
            Self::Negative => Ok(-1.0),
            Self::Complex { arg } => Err(BmcError::Unsupported(format!(
                "critical variance for a complex eigenvalue phase (arg {arg}) is not evaluated; \
                 only theta = +1 or -1 is supported"
            ))),
        }
    }
}

/// `Sigma^crit_T = Sigma^crit_G (1 + 2 / (sqrt(2) theta - 1))`.
pub fn critical_tree_factor(phase: EigenPhase) -> Result<f64> {
    let theta = phase.real()?;
    Ok(1.0 / (std::f64::consts::SQRT_2 * theta - 1.0))
}

/// `<mu, P(Rf (x) Rf)> = <mu, (Q R f)^2>`.
fn crit_pair(g: &Observable, h: &Observable, kernel: &BarKernel) -> Result<f64> {
    let qg = g.project_r(kernel)?.apply_q(kernel.a(), 1);
    let qh = h.project_r(kernel)?.apply_q(kernel.a(), 1);
    pair(&qg, &qh)
}

/// `Sigma^crit_G(f) = <mu, P(Rf (x) Rf)>`.
pub fn sigma_crit_g(f: &Observable, kernel: &BarKernel) -> Result<VarianceReport> {
    require_regime(kernel.regime(), CRIT)?;
    Ok(VarianceReport::exact(crit_pair(f, f, kernel)?, 0.0))
}

/// `Sigma^crit_T(f) = Sigma^crit_G + 2 (sqrt(2) theta - 1)^-1 Sigma^crit_G`.
pub fn sigma_crit_t(f: &Observable, kernel: &BarKernel) -> Result<VarianceReport> {
    sigma_crit_t_with_phase(f, kernel, EigenPhase::of(kernel))
}

/// [`sigma_crit_t`] with an explicit eigenvalue phase.
pub fn sigma_crit_t_with_phase(f: &Observable, kernel: &BarKernel, phase: EigenPhase) -> Result<VarianceReport> {
    require_regime(kernel.regime(), CRIT)?;
    let factor = critical_tree_factor(phase)?;
    let g = crit_pair(f, f, kernel)?;
    Ok(VarianceReport::exact(g, factor * g))
}

/// `Sigma^crit(f) = S1 + 2 S2` with `S1 = sum_k 2^-k <mu, P(Rf_k (x) Rf_k)>`
/// and `S2 = sum_{l<k} 2^(-(k+l)/2) theta^(l-k) <mu, P(Rf_k (x) Rf_l)>`.
/// A constant tail is summed in closed form.
pub fn sigma_crit_sequence(seq: &ObservableSequence, kernel: &BarKernel) -> Result<VarianceReport> {
    require_regime(kernel.regime(), CRIT)?;
    seq.check_kernel(kernel)?;
    let theta = EigenPhase::of(kernel).real()?;
    let layout = SequenceLayout::new(seq);
    let fs = &layout.functions;
    // rho = theta / sqrt(2): the lag weight 2^(-d/2) theta^d.
    let rho = theta * std::f64::consts::FRAC_1_SQRT_2;

    let mut first = 0.0;
    for (i, f) in fs.iter().enumerate() {
        first += layout.weight(i) * crit_pair(f, f, kernel)?;
    }
    let mut second = 0.0;
    for (l, fl) in fs.iter().enumerate() {
        let wl = 2f64.powi(-(l as i32));
        for (kk, fk) in fs.iter().enumerate().skip(l + 1) {
            let d = (kk - l) as i32;
            let lag = if Some(kk) == layout.tail {
                rho.powi(d) / (1.0 - rho)
            } else {
                rho.powi(d)
            };
            second += wl * lag * crit_pair(fk, fl, kernel)?;
        }
        if Some(l) == layout.tail {
            second += 2.0 * wl * rho / (1.0 - rho) * crit_pair(fl, fl, kernel)?;
        }
    }
    Ok(VarianceReport::exact(first, second))
}
