//! Exact first and second moments of generation sums for the BAR kernel.
//!
//! With `M_{G_n}(f) = sum over generation n of f(X_i)`, the many-to-one
//! formulas express every moment through powers of the one-node kernel `Q`
//! and the two-children operator `P(g (x) h) = Qg . Qh`:
//!
//! ```text
//! E_x[M_{G_n}(f)]            = 2^n Q^n f(x)
//! E_x[M_{G_n}(f)^2]          = 2^n Q^n(f^2)(x)
//!                              + sum_{k<n} 2^(n+k) Q^(n-k-1) P(Q^k f (x) Q^k f)(x)
//! E_x[M_{G_n}(f) M_{G_m}(g)] = 2^n Q^m(g Q^(n-m) f)(x)
//!                              + sum_{k<m} 2^(n+k) Q^(m-k-1) P(Q^k g (x)sym Q^(n-m+k) f)(x)
//! ```
//!
//! Each right-hand side is assembled as an [`Observable`] in `x`, so it can be
//! evaluated at a point or integrated against the invariant law. Empty sums
//! are zero.

use crate::error::{BmcError, Result};
use crate::hermite::Observable;
use crate::kernels::BarKernel;
use crate::simulator::InitialLaw;

fn pow2(k: u32) -> f64 {
    2f64.powi(k as i32)
}

/// `x -> E_x[M_{G_n}(f)]`.
pub fn mean_generation_fn(f: &Observable, n: u32, kernel: &BarKernel) -> Result<Observable> {
    Ok(kernel.q_power(f, n)?.scaled(pow2(n)))
}

/// `x -> E_x[M_{G_n}(f)^2]`.
pub fn second_moment_generation_fn(
    f: &Observable,
    n: u32,
    kernel: &BarKernel,
) -> Result<Observable> {
    let mut acc = kernel.q_power(&f.square()?, n)?.scaled(pow2(n));
    for k in 0..n {
        let qk = kernel.q_power(f, k)?;
        let term = kernel.q_power(&kernel.p_tensor(&qk, &qk)?, n - k - 1)?;
        acc = acc.add(&term.scaled(pow2(n + k)))?;
    }
    Ok(acc)
}

/// `x -> E_x[M_{G_n}(f) M_{G_m}(g)]` for `n >= m`.
pub fn cross_moment_fn(
    f: &Observable,
    g: &Observable,
    n: u32,
    m: u32,
    kernel: &BarKernel,
) -> Result<Observable> {
    if n < m {
        return Err(BmcError::InvalidArgument(format!(
            "cross moment needs n >= m, got n = {n}, m = {m}"
        )));
    }
    let shifted = kernel.q_power(f, n - m)?;
    let mut acc = kernel.q_power(&g.product(&shifted)?, m)?.scaled(pow2(n));
    for k in 0..m {
        let qg = kernel.q_power(g, k)?;
        let qf = kernel.q_power(f, n - m + k)?;
        let term = kernel.q_power(&kernel.p_tensor(&qg, &qf)?, m - k - 1)?;
        acc = acc.add(&term.scaled(pow2(n + k)))?;
    }
    Ok(acc)
}

pub fn mean_generation(f: &Observable, n: u32, x: f64, kernel: &BarKernel) -> Result<f64> {
    Ok(mean_generation_fn(f, n, kernel)?.eval(x))
}

pub fn second_moment_generation(
    f: &Observable,
    n: u32,
    x: f64,
    kernel: &BarKernel,
) -> Result<f64> {
    Ok(second_moment_generation_fn(f, n, kernel)?.eval(x))
}

pub fn cross_moment(
    f: &Observable,
    g: &Observable,
    n: u32,
    m: u32,
    x: f64,
    kernel: &BarKernel,
) -> Result<f64> {
    Ok(cross_moment_fn(f, g, n, m, kernel)?.eval(x))
}

/// Integrates a function of the root state against the initial law.
pub fn average(h: &Observable, law: InitialLaw) -> Result<f64> {
    match law {
        InitialLaw::Point(x) => Ok(h.eval(x)),
        InitialLaw::Stationary => h.mu_expectation(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MomentKind {
    MeanGeneration,
    SecondGeneration,
    CrossGeneration,
}

/// A single many-to-one evaluation.
#[derive(Debug, Clone)]
pub struct MomentRequest {
    pub kind: MomentKind,
    pub f: Observable,
    /// Second observable, used by [`MomentKind::CrossGeneration`].
    pub g: Option<Observable>,
    pub n: u32,
    pub m: u32,
    pub x: f64,
}

impl MomentRequest {
    pub fn evaluate(&self, kernel: &BarKernel) -> Result<f64> {
        match self.kind {
            MomentKind::MeanGeneration => mean_generation(&self.f, self.n, self.x, kernel),
            MomentKind::SecondGeneration => {
                second_moment_generation(&self.f, self.n, self.x, kernel)
            }
            MomentKind::CrossGeneration => {
                let g = self.g.as_ref().ok_or_else(|| {
                    BmcError::InvalidArgument("cross moment needs a second observable".into())
                })?;
                cross_moment(&self.f, g, self.n, self.m, self.x, kernel)
            }
        }
    }
}

/// First two moments of a functional under a given initial law.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Moments {
    pub mean: f64,
    pub second: f64,
}

impl Moments {
    pub fn variance(&self) -> f64 {
        self.second - self.mean * self.mean
    }
}

/// Moments of `M_{G_n}(f)`.
pub fn generation_moments(
    f: &Observable,
    n: u32,
    law: InitialLaw,
    kernel: &BarKernel,
) -> Result<Moments> {
    Ok(Moments {
        mean: average(&mean_generation_fn(f, n, kernel)?, law)?,
        second: average(&second_moment_generation_fn(f, n, kernel)?, law)?,
    })
}

/// Moments of `M_{T_n}(f) = sum_{j <= n} M_{G_j}(f)`, assembled from all
/// pairwise cross moments.
pub fn tree_moments(
    f: &Observable,
    n: u32,
    law: InitialLaw,
    kernel: &BarKernel,
) -> Result<Moments> {
    let mut mean = 0.0;
    let mut second = 0.0;
    for j in 0..=n {
        mean += average(&mean_generation_fn(f, j, kernel)?, law)?;
        second += average(&second_moment_generation_fn(f, j, kernel)?, law)?;
        for i in 0..j {
            second += 2.0 * average(&cross_moment_fn(f, f, j, i, kernel)?, law)?;
        }
    }
    Ok(Moments { mean, second })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn k05() -> BarKernel {
        BarKernel::new(0.5, 1.0).unwrap()
    }

    #[test]
    fn mean_examples() {
        let k = k05();
        let id = Observable::identity(&k).unwrap();
        assert_abs_diff_eq!(mean_generation(&id, 3, 1.0, &k).unwrap(), 1.0, epsilon = 1e-14);
        let one = Observable::constant(&k, 1.0).unwrap();
        assert_abs_diff_eq!(mean_generation(&one, 10, 0.3, &k).unwrap(), 1024.0);
        for n in [0, 4, 9] {
            assert_eq!(mean_generation(&id, n, 0.0, &k).unwrap(), 0.0);
        }
    }

    #[test]
    fn second_moment_examples() {
        let k = k05();
        let id = Observable::identity(&k).unwrap();
        // E[(e0 + e1)^2] = 2 with x = 0, n = 1
        assert_abs_diff_eq!(second_moment_generation(&id, 1, 0.0, &k).unwrap(), 2.0, epsilon = 1e-12);
        // n = 2: 8 a^2 + 4 = 6
        assert_abs_diff_eq!(second_moment_generation(&id, 2, 0.0, &k).unwrap(), 6.0, epsilon = 1e-12);
        let one = Observable::constant(&k, 1.0).unwrap();
        assert_abs_diff_eq!(second_moment_generation(&one, 3, 0.7, &k).unwrap(), 64.0, epsilon = 1e-10);
    }

    #[test]
    fn cross_moment_examples() {
        let k = k05();
        let id = Observable::identity(&k).unwrap();
        // 2 x Qx(x) = 2 a x^2 at x = 1
        assert_abs_diff_eq!(cross_moment(&id, &id, 1, 0, 1.0, &k).unwrap(), 1.0, epsilon = 1e-12);
        for (n, x) in [(3u32, 0.5), (5, -1.0)] {
            assert_abs_diff_eq!(
                cross_moment(&id, &id, n, n, x, &k).unwrap(),
                second_moment_generation(&id, n, x, &k).unwrap(),
                epsilon = 1e-9
            );
        }
        let one = Observable::constant(&k, 1.0).unwrap();
        let f = Observable::for_kernel(&k, vec![0.2, 1.0, -0.4]).unwrap();
        assert_abs_diff_eq!(
            cross_moment(&f, &one, 4, 0, 0.8, &k).unwrap(),
            mean_generation(&f, 4, 0.8, &k).unwrap(),
            epsilon = 1e-12
        );
        assert!(cross_moment(&f, &f, 1, 2, 0.0, &k).is_err());
    }

    /// Brute-force enumeration of the pairs of nodes: for `i` in `G_n`, `j` in
    /// `G_m` with last common ancestor at depth `d`, the states are jointly
    /// Gaussian given the root and `E[f(X_i) g(X_j)]` reduces to a 2-d
    /// Gaussian integral over the shared path.
    fn cross_by_genealogy(f: &Observable, g: &Observable, n: u32, m: u32, x: f64, k: &BarKernel) -> f64 {
        let a = k.a();
        let s2 = k.sigma() * k.sigma();
        let rule = crate::hermite::gauss_hermite(40).unwrap();
        // variance accumulated over `t` steps of the chain
        let var = |t: u32| s2 * (0..t).map(|i| a.powi(2 * i as i32)).sum::<f64>();
        let mut total = 0.0;
        for d in 0..=m {
            // number of (i, j) pairs whose last common ancestor is at depth d
            let pairs = if d == m {
                // j is an ancestor of i (or i == j when n == m)
                2f64.powi(n as i32)
            } else {
                // ancestor u in G_d, i and j in different child subtrees
                2f64.powi(d as i32) * 2.0 * 2f64.powi((n - d - 1) as i32) * 2f64.powi((m - d - 1) as i32)
            };
            // X_u = a^d x + sqrt(var(d)) G1; then independent continuations
            let vu = var(d).sqrt();
            let (vi, vj) = (var(n - d).sqrt(), var(m - d).sqrt());
            let e = rule.expect(|g1| {
                let xu = a.powi(d as i32) * x + vu * g1;
                if d == m {
                    let mi = a.powi((n - d) as i32) * xu;
                    g.eval(xu) * rule.expect(|g2| f.eval(mi + vi * g2))
                } else {
                    let mi = a.powi((n - d) as i32) * xu;
                    let mj = a.powi((m - d) as i32) * xu;
                    rule.expect(|g2| f.eval(mi + vi * g2)) * rule.expect(|g3| g.eval(mj + vj * g3))
                }
            });
            total += pairs * e;
        }
        total
    }

    #[test]
    fn many_to_one_matches_genealogical_enumeration() {
        for (a, sigma) in [(0.5, 1.0), (-0.7, 0.6), (0.85, 1.2)] {
            let k = BarKernel::new(a, sigma).unwrap();
            let f = Observable::for_kernel(&k, vec![0.1, 0.6, -0.3, 0.2]).unwrap();
            let g = Observable::for_kernel(&k, vec![-0.4, 0.0, 0.5]).unwrap();
            for (n, m) in [(0u32, 0u32), (1, 0), (2, 2), (4, 1), (5, 3)] {
                for x in [0.0, 1.3] {
                    let oracle = cross_by_genealogy(&f, &g, n, m, x, &k);
                    let got = cross_moment(&f, &g, n, m, x, &k).unwrap();
                    assert!(
                        (got - oracle).abs() < 1e-9 * oracle.abs().max(1.0),
                        "a={a} n={n} m={m} x={x}: {got} vs {oracle}"
                    );
                }
            }
        }
    }

    #[test]
    fn cauchy_schwarz_and_positive_variance() {
        for a in [0.3, 0.5, -0.6, 0.9] {
            let k = BarKernel::new(a, 1.0).unwrap();
            let f = Observable::for_kernel(&k, vec![0.5, 1.0, 0.3]).unwrap();
            let g = Observable::for_kernel(&k, vec![-0.2, 0.0, 0.0, 0.7]).unwrap();
            for n in 0..6u32 {
                for m in 0..=n {
                    for x in [-1.0, 0.0, 2.0] {
                        let c = cross_moment(&f, &g, n, m, x, &k).unwrap();
                        let sf = second_moment_generation(&f, n, x, &k).unwrap();
                        let sg = second_moment_generation(&g, m, x, &k).unwrap();
                        assert!(c * c <= sf * sg * (1.0 + 1e-10) + 1e-12);
                        let mf = mean_generation(&f, n, x, &k).unwrap();
                        assert!(sf - mf * mf >= -1e-9 * sf.abs().max(1.0));
                    }
                }
            }
        }
    }

    #[test]
    fn stationary_generation_variance_closed_form() {
        // For f = x under mu: Var M_{G_n} = 2^n sigma_a^2 (1 + a^2 sum_{k<n} (2a^2)^k)
        for a in [0.3, 0.5, std::f64::consts::FRAC_1_SQRT_2] {
            let k = BarKernel::new(a, 1.0).unwrap();
            let id = Observable::identity(&k).unwrap();
            let s2 = k.sigma_a().powi(2);
            for n in [1u32, 5, 10] {
                let geo: f64 = (0..n).map(|j| (2.0 * a * a).powi(j as i32)).sum();
                let exact = 2f64.powi(n as i32) * s2 * (1.0 + a * a * geo);
                let got = generation_moments(&id, n, InitialLaw::Stationary, &k).unwrap();
                assert_abs_diff_eq!(got.mean, 0.0, epsilon = 1e-10);
                assert!((got.variance() - exact).abs() < 1e-10 * exact);
            }
        }
    }

    #[test]
    fn tree_moments_match_generation_sum_for_depth_zero_and_one() {
        let k = k05();
        let f = Observable::for_kernel(&k, vec![0.3, 1.0, 0.5]).unwrap();
        let g0 = generation_moments(&f, 0, InitialLaw::Point(0.4), &k).unwrap();
        let t0 = tree_moments(&f, 0, InitialLaw::Point(0.4), &k).unwrap();
        assert_abs_diff_eq!(g0.second, t0.second, epsilon = 1e-12);
        // T_1 = f(X_root) + M_{G_1}: check against direct Gaussian integrals
        let x = 0.4;
        let rule = crate::hermite::gauss_hermite(40).unwrap();
        let qf = |x: f64| rule.expect(|e| f.eval(0.5 * x + e));
        let qf2 = |x: f64| rule.expect(|e| f.eval(0.5 * x + e).powi(2));
        let direct = f.eval(x).powi(2) + 4.0 * f.eval(x) * qf(x) + 2.0 * qf2(x) + 2.0 * qf(x).powi(2);
        let t1 = tree_moments(&f, 1, InitialLaw::Point(x), &k).unwrap();
        assert_abs_diff_eq!(t1.second, direct, epsilon = 1e-10);
    }
}
