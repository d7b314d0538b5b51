//! Hermite spectral representation of observables.
//!
//! The invariant law of the Gaussian BAR kernel is `mu = N(0, sigma_a^2)` and
//! its eigenfunctions are the normalised Hermite polynomials
//! `gbar_m(x) = He_m(x / sigma_a) / sqrt(m!)`, orthonormal in `L^2(mu)`.
//! Observables are stored as coefficient vectors in this basis, so the
//! kernel acts diagonally (`Q^n gbar_m = a^(n m) gbar_m`) and every
//! `<mu, .>` integral of a polynomial is exact under Gauss-Hermite
//! quadrature of sufficient order.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use crate::error::{BmcError, Result};
use crate::kernels::BarKernel;

/// Default cap on the degree of user-supplied observables.
pub const DEFAULT_MAX_DEGREE: usize = 32;

/// Hard cap for internally generated products.
pub const ABSOLUTE_MAX_DEGREE: usize = 256;

const SCALE_RTOL: f64 = 1e-12;

/// Quadrature order used for integrands built from degree-`degree`
/// polynomials.
pub fn default_order(degree: usize) -> usize {
    (2 * degree + 16).max(48)
}

/// Gauss-Hermite rule for the standard normal law: `E[f(Y)] ~ sum w_i f(y_i)`.
///
/// Exact for polynomials of degree `<= 2 * order - 1`.
#[derive(Debug, Clone)]
pub struct GaussHermite {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussHermite {
    /// Newton iteration on the orthonormal physicists' recurrence, started
    /// from the classical asymptotic guesses, then rescaled to the
    /// probabilists' weight `exp(-y^2/2) / sqrt(2 pi)`.
    pub fn new(order: usize) -> Result<Self> {
        if order == 0 || order > 4 * ABSOLUTE_MAX_DEGREE + 64 {
            return Err(BmcError::InvalidArgument(format!(
                "quadrature order {order} out of range"
            )));
        }
        const PI_M4: f64 = 0.751_125_544_464_942_5; // pi^(-1/4)
        let n = order;
        let nf = n as f64;
        let mut t = vec![0.0; n];
        let mut w = vec![0.0; n];
        let mut z = 0.0f64;
        for i in 0..n.div_ceil(2) {
            z = match i {
                0 => (2.0 * nf + 1.0).sqrt() - 1.855_75 * (2.0 * nf + 1.0).powf(-0.166_67),
                1 => z - 1.14 * nf.powf(0.426) / z,
                2 => 1.86 * z - 0.86 * t[0],
                3 => 1.91 * z - 0.91 * t[1],
                _ => 2.0 * z - t[i - 2],
            };
            let mut pp = 0.0;
            let mut converged = false;
            for _ in 0..100 {
                let mut p1 = PI_M4;
                let mut p2 = 0.0;
                for j in 0..n {
                    let p3 = p2;
                    p2 = p1;
                    let jf = j as f64;
                    p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
                }
                pp = (2.0 * nf).sqrt() * p2;
                let z1 = z;
                z = z1 - p1 / pp;
                if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                    converged = true;
                    break;
                }
            }
            if !converged {
                return Err(BmcError::InvalidArgument(format!(
                    "Gauss-Hermite node {i} of order {order} did not converge"
                )));
            }
            t[i] = z;
            t[n - 1 - i] = -z;
            w[i] = 2.0 / (pp * pp);
            w[n - 1 - i] = w[i];
        }
        let inv_sqrt_pi = 1.0 / std::f64::consts::PI.sqrt();
        let mut pairs: Vec<(f64, f64)> = t
            .iter()
            .zip(&w)
            .map(|(&ti, &wi)| (ti * std::f64::consts::SQRT_2, wi * inv_sqrt_pi))
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let (nodes, weights) = pairs.into_iter().unzip();
        Ok(Self { nodes, weights })
    }

    pub fn order(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `E[f(Y)]` for `Y ~ N(0, 1)`.
    pub fn expect(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&y, &w)| w * f(y))
            .sum()
    }
}

/// Shared, lazily built quadrature rule of the given order.
pub fn gauss_hermite(order: usize) -> Result<Arc<GaussHermite>> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<GaussHermite>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(rule) = cache.lock().expect("quadrature cache poisoned").get(&order) {
        return Ok(Arc::clone(rule));
    }
    let rule = Arc::new(GaussHermite::new(order)?);
    cache
        .lock()
        .expect("quadrature cache poisoned")
        .insert(order, Arc::clone(&rule));
    Ok(rule)
}

/// Fills `out[m] = He_m(y) / sqrt(m!)` for `m < out.len()`.
pub fn hermite_basis(y: f64, out: &mut [f64]) {
    if out.is_empty() {
        return;
    }
    out[0] = 1.0;
    if out.len() > 1 {
        out[1] = y;
    }
    for m in 1..out.len().saturating_sub(1) {
        let mf = m as f64;
        out[m + 1] = (y * out[m] - mf.sqrt() * out[m - 1]) / (mf + 1.0).sqrt();
    }
}

/// `sum_m coeffs[m] gbar_m(y)` at the standardised point `y`.
pub fn hermite_series(coeffs: &[f64], y: f64) -> f64 {
    let Some(&c0) = coeffs.first() else {
        return 0.0;
    };
    let mut acc = c0;
    if coeffs.len() == 1 {
        return acc;
    }
    let mut prev = 1.0;
    let mut cur = y;
    acc += coeffs[1] * cur;
    for (m, &c) in coeffs.iter().enumerate().skip(2) {
        let k = (m - 1) as f64;
        let next = (y * cur - k.sqrt() * prev) / (k + 1.0).sqrt();
        prev = cur;
        cur = next;
        acc += c * cur;
    }
    acc
}

fn scales_match(a: f64, b: f64) -> bool {
    (a - b).abs() <= SCALE_RTOL * a.abs().max(b.abs())
}

/// A real function `f = sum_m c_m gbar_m` in the orthonormal Hermite basis of
/// a particular invariant law.
#[derive(Debug, Clone, PartialEq)]
pub struct Observable {
    coeffs: Vec<f64>,
    scale: f64,
}

impl Observable {
    /// Observable in the basis with standard deviation `scale`. The degree is
    /// limited to [`DEFAULT_MAX_DEGREE`].
    pub fn new(scale: f64, coeffs: Vec<f64>) -> Result<Self> {
        Self::with_max_degree(scale, coeffs, DEFAULT_MAX_DEGREE)
    }

    /// Like [`Observable::new`] with an explicit degree limit.
    pub fn with_max_degree(scale: f64, coeffs: Vec<f64>, max_degree: usize) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(BmcError::InvalidArgument(format!(
                "basis scale must be positive and finite, got {scale}"
            )));
        }
        if let Some(c) = coeffs.iter().find(|c| !c.is_finite()) {
            return Err(BmcError::InvalidArgument(format!(
                "non-finite Hermite coefficient {c}"
            )));
        }
        let max = max_degree.min(ABSOLUTE_MAX_DEGREE);
        let obs = Self::raw(scale, coeffs);
        if obs.degree() > max {
            return Err(BmcError::DegreeTooHigh {
                degree: obs.degree(),
                max,
            });
        }
        Ok(obs)
    }

    fn raw(scale: f64, mut coeffs: Vec<f64>) -> Self {
        if coeffs.is_empty() {
            coeffs.push(0.0);
        }
        Self { coeffs, scale }
    }

    pub fn for_kernel(kernel: &BarKernel, coeffs: Vec<f64>) -> Result<Self> {
        Self::new(kernel.basis()?, coeffs)
    }

    pub fn zero(kernel: &BarKernel) -> Result<Self> {
        Self::for_kernel(kernel, vec![0.0])
    }

    pub fn constant(kernel: &BarKernel, c: f64) -> Result<Self> {
        Self::for_kernel(kernel, vec![c])
    }

    /// `f(x) = x`, i.e. `sigma_a * gbar_1`.
    pub fn identity(kernel: &BarKernel) -> Result<Self> {
        Self::for_kernel(kernel, vec![0.0, kernel.basis()?])
    }

    /// `f(x) = x^2 - sigma_a^2 = sqrt(2) sigma_a^2 gbar_2`.
    pub fn square_centered(kernel: &BarKernel) -> Result<Self> {
        let s = kernel.basis()?;
        Self::for_kernel(kernel, vec![0.0, 0.0, std::f64::consts::SQRT_2 * s * s])
    }

    /// The basis function `gbar_m`.
    pub fn basis_function(kernel: &BarKernel, m: usize) -> Result<Self> {
        let mut coeffs = vec![0.0; m + 1];
        coeffs[m] = 1.0;
        Self::for_kernel(kernel, coeffs)
    }

    /// Named presets: `identity`, `square-centered`, `hermite:<m>`,
    /// `constant:<c>`.
    pub fn preset(name: &str, kernel: &BarKernel) -> Result<Self> {
        match name.trim() {
            "identity" | "x" => Self::identity(kernel),
            "square-centered" => Self::square_centered(kernel),
            "zero" => Self::zero(kernel),
            other => {
                if let Some(m) = other.strip_prefix("hermite:") {
                    let m: usize = m.trim().parse().map_err(|_| {
                        BmcError::InvalidArgument(format!("bad Hermite index in {other:?}"))
                    })?;
                    Self::basis_function(kernel, m)
                } else if let Some(c) = other.strip_prefix("constant:") {
                    let c: f64 = c.trim().parse().map_err(|_| {
                        BmcError::InvalidArgument(format!("bad constant in {other:?}"))
                    })?;
                    Self::constant(kernel, c)
                } else {
                    Err(BmcError::InvalidArgument(format!(
                        "unknown observable preset {other:?}"
                    )))
                }
            }
        }
    }

    /// Projects a pointwise function on `gbar_0..=gbar_degree` by quadrature:
    /// `c_m = <mu, f gbar_m>`.
    pub fn decompose(
        f: impl Fn(f64) -> f64,
        degree: usize,
        kernel: &BarKernel,
    ) -> Result<Self> {
        let scale = kernel.basis()?;
        if degree > DEFAULT_MAX_DEGREE {
            return Err(BmcError::DegreeTooHigh {
                degree,
                max: DEFAULT_MAX_DEGREE,
            });
        }
        let rule = gauss_hermite(default_order(degree))?;
        let mut coeffs = vec![0.0; degree + 1];
        let mut basis = vec![0.0; degree + 1];
        for (&y, &w) in rule.nodes().iter().zip(rule.weights()) {
            let fy = w * f(scale * y);
            hermite_basis(y, &mut basis);
            for (c, b) in coeffs.iter_mut().zip(&basis) {
                *c += fy * b;
            }
        }
        Self::new(scale, coeffs)
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn coeff(&self, m: usize) -> f64 {
        self.coeffs.get(m).copied().unwrap_or(0.0)
    }

    /// Standard deviation of the invariant law whose basis this uses.
    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Highest index with a non-zero coefficient (0 for constants).
    pub fn degree(&self) -> usize {
        self.coeffs.iter().rposition(|&c| c != 0.0).unwrap_or(0)
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.iter().all(|&c| c == 0.0)
    }

    /// `<mu, f>`.
    pub fn mean(&self) -> f64 {
        self.coeffs[0]
    }

    pub fn eval(&self, x: f64) -> f64 {
        hermite_series(&self.coeffs, x / self.scale)
    }

    /// `<mu, f^2>` through Parseval.
    pub fn norm_sq(&self) -> f64 {
        self.coeffs.iter().map(|c| c * c).sum()
    }

    /// `<mu, f>` by quadrature of the pointwise values.
    pub fn mu_expectation(&self) -> Result<f64> {
        let rule = gauss_hermite(default_order(self.degree()))?;
        Ok(rule.expect(|y| hermite_series(&self.coeffs, y)))
    }

    /// `<mu, f g>` by quadrature.
    pub fn inner(&self, other: &Observable) -> Result<f64> {
        self.check_same_basis(other)?;
        let rule = gauss_hermite(default_order(self.degree().max(other.degree())))?;
        Ok(rule.expect(|y| hermite_series(&self.coeffs, y) * hermite_series(&other.coeffs, y)))
    }

    /// Pointwise product re-expanded in the basis. The degree of the result
    /// is the sum of the operand degrees and the quadrature order is chosen
    /// so that the expansion is exact.
    pub fn product(&self, other: &Observable) -> Result<Observable> {
        self.check_same_basis(other)?;
        let degree = self.degree() + other.degree();
        if degree > ABSOLUTE_MAX_DEGREE {
            return Err(BmcError::DegreeTooHigh {
                degree,
                max: ABSOLUTE_MAX_DEGREE,
            });
        }
        if self.degree() == 0 || other.degree() == 0 {
            let (c, f) = if self.degree() == 0 {
                (self.coeffs[0], other)
            } else {
                (other.coeffs[0], self)
            };
            return Ok(f.scaled(c).truncated(degree));
        }
        let rule = gauss_hermite(default_order(degree))?;
        let mut coeffs = vec![0.0; degree + 1];
        let mut basis = vec![0.0; degree + 1];
        for (&y, &w) in rule.nodes().iter().zip(rule.weights()) {
            let v = w * hermite_series(&self.coeffs, y) * hermite_series(&other.coeffs, y);
            hermite_basis(y, &mut basis);
            for (c, b) in coeffs.iter_mut().zip(&basis) {
                *c += v * b;
            }
        }
        Ok(Self::raw(self.scale, coeffs))
    }

    pub fn square(&self) -> Result<Observable> {
        self.product(self)
    }

    pub fn scaled(&self, factor: f64) -> Observable {
        Self::raw(self.scale, self.coeffs.iter().map(|c| c * factor).collect())
    }

    pub fn add(&self, other: &Observable) -> Result<Observable> {
        self.check_same_basis(other)?;
        let len = self.coeffs.len().max(other.coeffs.len());
        let coeffs = (0..len).map(|m| self.coeff(m) + other.coeff(m)).collect();
        Ok(Self::raw(self.scale, coeffs))
    }

    /// `f~ = f - <mu, f>`.
    pub fn center(&self) -> Observable {
        let mut out = self.clone();
        out.coeffs[0] = 0.0;
        out
    }

    /// Orthogonal projection on `span(gbar_1)`, the eigenspace of the
    /// eigenvalue `a`.
    pub fn project_r(&self, kernel: &BarKernel) -> Result<Observable> {
        self.check_kernel(kernel)?;
        Ok(Self::raw(self.scale, vec![0.0, self.coeff(1)]))
    }

    /// `f^ = f~ - R f`: removes the constant and first eigen-components.
    pub fn hat(&self, kernel: &BarKernel) -> Result<Observable> {
        self.check_kernel(kernel)?;
        let mut out = self.clone();
        out.coeffs[0] = 0.0;
        if out.coeffs.len() > 1 {
            out.coeffs[1] = 0.0;
        }
        Ok(out)
    }

    /// `Q^n` for the autoregression coefficient `a`, applied coefficient-wise.
    pub(crate) fn apply_q(&self, a: f64, n: u32) -> Observable {
        let an = a.powi(n as i32);
        let mut factor = 1.0;
        let coeffs = self
            .coeffs
            .iter()
            .map(|c| {
                let v = c * factor;
                factor *= an;
                v
            })
            .collect();
        Self::raw(self.scale, coeffs)
    }

    fn truncated(mut self, degree: usize) -> Observable {
        self.coeffs.truncate(degree + 1);
        self
    }

    pub fn check_kernel(&self, kernel: &BarKernel) -> Result<()> {
        let expected = kernel.basis()?;
        if scales_match(expected, self.scale) {
            Ok(())
        } else {
            Err(BmcError::BasisMismatch {
                expected,
                found: self.scale,
            })
        }
    }

    fn check_same_basis(&self, other: &Observable) -> Result<()> {
        if scales_match(self.scale, other.scale) {
            Ok(())
        } else {
            Err(BmcError::BasisMismatch {
                expected: self.scale,
                found: other.scale,
            })
        }
    }
}

/// What an [`ObservableSequence`] does beyond its explicit entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SequenceTail {
    /// `f_l = 0` for `l > L`.
    Zero,
    /// `f_l = f_L` for `l > L`.
    Constant,
}

/// A sequence `(f_l, l >= 0)` of observables with finite support or a
/// constant tail.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservableSequence {
    entries: Vec<Observable>,
    tail: SequenceTail,
    scale: f64,
}

impl ObservableSequence {
    pub fn new(entries: Vec<Observable>, tail: SequenceTail, kernel: &BarKernel) -> Result<Self> {
        let scale = kernel.basis()?;
        for e in &entries {
            e.check_kernel(kernel)?;
        }
        if tail == SequenceTail::Constant && entries.is_empty() {
            return Err(BmcError::InvalidArgument(
                "a constant-tail sequence needs at least one entry".into(),
            ));
        }
        Ok(Self {
            entries,
            tail,
            scale,
        })
    }

    /// `(f, 0, 0, ...)`.
    pub fn single(f: Observable, kernel: &BarKernel) -> Result<Self> {
        Self::new(vec![f], SequenceTail::Zero, kernel)
    }

    /// `(f, f, f, ...)`.
    pub fn constant(f: Observable, kernel: &BarKernel) -> Result<Self> {
        Self::new(vec![f], SequenceTail::Constant, kernel)
    }

    pub fn zero(kernel: &BarKernel) -> Result<Self> {
        Self::new(Vec::new(), SequenceTail::Zero, kernel)
    }

    pub fn entries(&self) -> &[Observable] {
        &self.entries
    }

    pub fn tail(&self) -> SequenceTail {
        self.tail
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Index into [`entries`](Self::entries) of `f_l`, or `None` when
    /// `f_l = 0`.
    pub fn entry_index(&self, l: usize) -> Option<usize> {
        if l < self.entries.len() {
            Some(l)
        } else {
            match self.tail {
                SequenceTail::Zero => None,
                SequenceTail::Constant => Some(self.entries.len() - 1),
            }
        }
    }

    pub fn get(&self, l: usize) -> Option<&Observable> {
        self.entry_index(l).map(|i| &self.entries[i])
    }

    /// Number of leading entries that may be non-zero, `None` for a
    /// constant tail.
    pub fn support_len(&self) -> Option<usize> {
        match self.tail {
            SequenceTail::Zero => Some(self.entries.len()),
            SequenceTail::Constant => None,
        }
    }

    pub fn check_kernel(&self, kernel: &BarKernel) -> Result<()> {
        let expected = kernel.basis()?;
        if scales_match(expected, self.scale) {
            Ok(())
        } else {
            Err(BmcError::BasisMismatch {
                expected,
                found: self.scale,
            })
        }
    }
}
