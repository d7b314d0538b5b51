//! Diagnostics of the super-critical regime `2a^2 > 1`, where generation
//! sums grow like `(2|a|)^n` and are driven by the martingale
//! `M_n = (2a)^(-n) M_{G_n}(R f)`.

use serde::Serialize;

use crate::error::{require_regime, BmcError, Result};
use crate::hermite::{Observable, ObservableSequence};
use crate::kernels::{BarKernel, Regime};
use crate::moment_oracle::{average, second_moment_generation_fn};
use crate::simulator::{run_replicates, Ensemble, Functionals, InitialLaw, SimulationConfig};
use crate::stat_tests::{empirical_summary, interquartile_range, median, ols, quantile_sorted, Regression};

const SUPER: &[Regime] = &[Regime::Supercritical];

/// Relative floor on ratio denominators, in units of their ensemble
/// standard deviation.
pub const DENOMINATOR_FLOOR: f64 = 1e-3;

/// Martingale path of one replicate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MartingaleTrack {
    pub replicate: u64,
    /// `values[n] = M_n`.
    pub values: Vec<f64>,
}

impl MartingaleTrack {
    /// `M_n` at the deepest level, the estimate of `M_inf`.
    pub fn final_value(&self) -> f64 {
        *self.values.last().expect("tracks are never empty")
    }
}

fn require_super(kernel: &BarKernel) -> Result<()> {
    require_regime(kernel.regime(), SUPER)
}

fn require_positive(kernel: &BarKernel) -> Result<()> {
    if kernel.a() > 0.0 {
        Ok(())
    } else {
        Err(BmcError::InvalidArgument(format!(
            "this diagnostic needs a > 0, got a = {}",
            kernel.a()
        )))
    }
}

fn tracks_from(ensemble: &Ensemble, index: usize) -> Vec<MartingaleTrack> {
    ensemble
        .records()
        .iter()
        .map(|r| MartingaleTrack {
            replicate: r.replicate,
            values: r.martingale_track[index].clone(),
        })
        .collect()
}

/// Martingale tracks of `f` for every replicate.
pub fn track_martingale(config: &SimulationConfig, f: &Observable) -> Result<Vec<MartingaleTrack>> {
    require_super(&config.kernel)?;
    let funcs = Functionals {
        martingales: vec![f.project_r(&config.kernel)?],
        ..Functionals::default()
    };
    Ok(tracks_from(&run_replicates(config, &funcs)?, 0))
}

/// `M_n` across tracks.
pub fn values_at(tracks: &[MartingaleTrack], n: u32) -> Vec<f64> {
    tracks.iter().map(|t| t.values[n as usize]).collect()
}

/// Exact `E[M_n^2] = (2a)^(-2n) E[M_{G_n}(R f)^2]` under the initial law.
pub fn martingale_second_moment(f: &Observable, n: u32, law: InitialLaw, kernel: &BarKernel) -> Result<f64> {
    let rf = f.project_r(kernel)?;
    let second = average(&second_moment_generation_fn(&rf, n, kernel)?, law)?;
    Ok(second * (2.0 * kernel.a()).powi(-2 * n as i32))
}

/// Regression of `M_n` on `M_{n-1}` across replicates; the martingale
/// property makes the slope 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SlopeTest {
    pub n: u32,
    pub regression: Regression,
    pub pass: bool,
}

/// Passes when the slope is within `4` standard errors of `1`.
pub fn martingale_slope_test(tracks: &[MartingaleTrack], n: u32) -> Result<SlopeTest> {
    if n == 0 {
        return Err(BmcError::InvalidArgument("slope test needs n >= 1".into()));
    }
    let regression = ols(&values_at(tracks, n - 1), &values_at(tracks, n))?;
    Ok(SlopeTest {
        n,
        regression,
        pass: (regression.slope - 1.0).abs() <= 4.0 * regression.slope_stderr,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RatioSummary {
    pub median: f64,
    /// 10% and 90% quantiles.
    pub lower: f64,
    pub upper: f64,
    pub used: usize,
    pub excluded: usize,
    /// `2a / (2a - 1)`.
    pub target: f64,
    /// Per-replicate ratios in replicate order, `None` where excluded.
    pub ratios: Vec<Option<f64>>,
}

/// `2a / (2a - 1)`, the limit of `M_{T_n}(f~) / M_{G_n}(f~)`.
pub fn ratio_target(kernel: &BarKernel) -> f64 {
    let t = 2.0 * kernel.alpha();
    t / (t - 1.0)
}

/// Ratio `M_{T_n}(f~) / M_{G_n}(f~)` of observable `index` in an ensemble
/// simulated with the kernel `kernel`.
pub fn ratio_from_ensemble(ensemble: &Ensemble, index: usize, kernel: &BarKernel) -> Result<RatioSummary> {
    require_super(kernel)?;
    require_positive(kernel)?;
    let n = ensemble.depth();
    let den = ensemble.generation_values(index, n);
    let num = ensemble.tree_values(index);
    let spread = empirical_summary(&den)?.variance.sqrt();
    let floor = DENOMINATOR_FLOOR * spread;
    let ratios: Vec<Option<f64>> = num
        .iter()
        .zip(&den)
        .map(|(&t, &g)| (g.abs() > floor).then(|| t / g))
        .collect();
    let mut used: Vec<f64> = ratios.iter().flatten().copied().collect();
    if used.is_empty() {
        return Err(BmcError::Degenerate(
            "every replicate's denominator is below the floor".into(),
        ));
    }
    used.sort_by(f64::total_cmp);
    Ok(RatioSummary {
        median: quantile_sorted(&used, 0.5),
        lower: quantile_sorted(&used, 0.1),
        upper: quantile_sorted(&used, 0.9),
        used: used.len(),
        excluded: ratios.len() - used.len(),
        target: ratio_target(kernel),
        ratios,
    })
}

/// Simulates the ensemble and summarises the tree/generation ratio of `f`.
pub fn ratio_diagnostic(config: &SimulationConfig, f: &Observable) -> Result<RatioSummary> {
    require_super(&config.kernel)?;
    require_positive(&config.kernel)?;
    if f.project_r(&config.kernel)?.is_zero() {
        return Err(BmcError::Degenerate(
            "R f = 0: the ratio has no super-critical limit".into(),
        ));
    }
    let ensemble = run_replicates(config, &Functionals::observables(vec![f.clone()]))?;
    ratio_from_ensemble(&ensemble, 0, &config.kernel)
}

/// Everything needed for the super-critical sequence residual.
pub fn residual_functionals(seq: &ObservableSequence, kernel: &BarKernel) -> Result<Functionals> {
    Ok(Functionals {
        observables: Vec::new(),
        sequence: Some(seq.clone()),
        martingales: seq
            .entries()
            .iter()
            .map(|f| f.project_r(kernel))
            .collect::<Result<_>>()?,
    })
}

/// `(2a^2)^(-n/2) N_{n,root}(seq) - sum_{l<=n} (2a)^(-l) M_inf(f_l)` per
/// replicate, with the deepest tracked `M` standing in for `M_inf`. The
/// ensemble must come from [`residual_functionals`].
pub fn residuals_at(
    ensemble: &Ensemble,
    seq: &ObservableSequence,
    kernel: &BarKernel,
    n: u32,
) -> Result<Vec<f64>> {
    require_super(kernel)?;
    require_positive(kernel)?;
    if n > ensemble.depth() {
        return Err(BmcError::DepthOutOfRange {
            depth: n,
            max: ensemble.depth(),
        });
    }
    let growth = 2.0 * kernel.alpha();
    let norm = (2.0 * kernel.a() * kernel.a()).powf(-(n as f64) / 2.0);
    let deepest = ensemble.depth() as usize;
    Ok(ensemble
        .records()
        .iter()
        .map(|r| {
            let mut limit = 0.0;
            for l in 0..=n as usize {
                if let Some(e) = seq.entry_index(l) {
                    limit += growth.powi(-(l as i32)) * r.martingale_track[e][deepest];
                }
            }
            norm * r.n_functional[n as usize] - limit
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResidualSummary {
    pub n1: u32,
    pub n2: u32,
    pub iqr_n1: f64,
    pub iqr_n2: f64,
    pub median_abs_n1: f64,
    pub median_abs_n2: f64,
    pub residuals_n1: Vec<f64>,
    pub residuals_n2: Vec<f64>,
}

impl ResidualSummary {
    /// The spread at the deeper level is strictly smaller.
    pub fn shrinking(&self) -> bool {
        self.iqr_n2 < self.iqr_n1
    }
}

/// Residuals at depths `n1 < n2 <= config.depth`.
pub fn normalized_functional_residual(
    config: &SimulationConfig,
    seq: &ObservableSequence,
    n1: u32,
    n2: u32,
) -> Result<ResidualSummary> {
    require_super(&config.kernel)?;
    require_positive(&config.kernel)?;
    if !(n1 < n2 && n2 <= config.depth) {
        return Err(BmcError::InvalidArgument(format!(
            "residual depths must satisfy n1 < n2 <= {}, got {n1}, {n2}",
            config.depth
        )));
    }
    let ensemble = run_replicates(config, &residual_functionals(seq, &config.kernel)?)?;
    residual_summary(&ensemble, seq, &config.kernel, n1, n2)
}

pub fn residual_summary(
    ensemble: &Ensemble,
    seq: &ObservableSequence,
    kernel: &BarKernel,
    n1: u32,
    n2: u32,
) -> Result<ResidualSummary> {
    let r1 = residuals_at(ensemble, seq, kernel, n1)?;
    let r2 = residuals_at(ensemble, seq, kernel, n2)?;
    let abs_median = |v: &[f64]| median(&v.iter().map(|x| x.abs()).collect::<Vec<_>>());
    Ok(ResidualSummary {
        n1,
        n2,
        iqr_n1: interquartile_range(&r1),
        iqr_n2: interquartile_range(&r2),
        median_abs_n1: abs_median(&r1),
        median_abs_n2: abs_median(&r2),
        residuals_n1: r1,
        residuals_n2: r2,
    })
}

/// Median over replicates of `|(2a)^(-n) (M_{T_n}(f~) - 2a/(2a-1) M_{G_n}(f~))|`,
/// with `M_{T_n}` accumulated from the generation sums.
pub fn cesaro_gap(ensemble: &Ensemble, index: usize, kernel: &BarKernel, n: u32) -> Result<f64> {
    require_super(kernel)?;
    require_positive(kernel)?;
    let growth = 2.0 * kernel.alpha();
    let target = ratio_target(kernel);
    let gaps: Vec<f64> = ensemble
        .records()
        .iter()
        .map(|r| {
            let gens = &r.m_gen[index][..=n as usize];
            let tree: f64 = gens.iter().sum();
            (growth.powi(-(n as i32)) * (tree - target * gens[n as usize])).abs()
        })
        .collect();
    Ok(median(&gaps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn kernel() -> BarKernel {
        BarKernel::new(0.8, 1.0).unwrap()
    }

    #[test]
    fn ratio_targets() {
        assert_abs_diff_eq!(ratio_target(&kernel()), 8.0 / 3.0, epsilon = 1e-14);
        assert_abs_diff_eq!(ratio_target(&BarKernel::new(0.9, 1.0).unwrap()), 2.25, epsilon = 1e-14);
    }

    #[test]
    fn regime_and_sign_preconditions() {
        let sub = SimulationConfig::new(BarKernel::new(0.5, 1.0).unwrap(), 4, 10, InitialLaw::Point(1.0), 0);
        let f = Observable::identity(&sub.kernel).unwrap();
        assert!(matches!(track_martingale(&sub, &f), Err(BmcError::RegimeMismatch { .. })));

        let neg = SimulationConfig::new(BarKernel::new(-0.8, 1.0).unwrap(), 4, 10, InitialLaw::Point(1.0), 0);
        let fx = Observable::identity(&neg.kernel).unwrap();
        assert!(track_martingale(&neg, &fx).is_ok());
        assert!(ratio_diagnostic(&neg, &fx).is_err());
        let seq = ObservableSequence::single(fx, &neg.kernel).unwrap();
        assert!(normalized_functional_residual(&neg, &seq, 2, 4).is_err());
    }

    #[test]
    fn even_observables_are_degenerate() {
        let config = SimulationConfig::new(kernel(), 6, 20, InitialLaw::Point(1.0), 4);
        let even = Observable::square_centered(&config.kernel).unwrap();
        for t in track_martingale(&config, &even).unwrap() {
            assert!(t.values.iter().all(|&v| v == 0.0));
        }
        assert!(matches!(ratio_diagnostic(&config, &even), Err(BmcError::Degenerate(_))));
    }

    #[test]
    fn track_starts_at_root_projection() {
        let config = SimulationConfig::new(kernel(), 5, 8, InitialLaw::Point(1.3), 1);
        let f = Observable::for_kernel(&config.kernel, vec![2.0, 0.5, 1.0]).unwrap();
        let rf = f.project_r(&config.kernel).unwrap();
        for t in track_martingale(&config, &f).unwrap() {
            assert_abs_diff_eq!(t.values[0], rf.eval(1.3), epsilon = 1e-14);
            assert_eq!(t.values.len(), 6);
        }
    }

    #[test]
    fn second_moment_oracle_is_bounded() {
        let k = kernel();
        let x = Observable::identity(&k).unwrap();
        let m: Vec<f64> = (0..30)
            .map(|n| martingale_second_moment(&x, n, InitialLaw::Point(1.0), &k).unwrap())
            .collect();
        assert_abs_diff_eq!(m[0], 1.0, epsilon = 1e-14);
        assert!(m.windows(2).all(|w| w[1] >= w[0]));
        // sup_n E[M_n^2] = x^2 + sigma^2 sum_k (2 a^2)^-(k+1) / (1 - ...)
        // stays finite: increments decay geometrically.
        let inc: Vec<f64> = m.windows(2).map(|w| w[1] - w[0]).collect();
        assert!(inc[25] < inc[5] * 1e-2);
    }

    #[test]
    fn identity_residual_vanishes_at_full_depth() {
        let config = SimulationConfig::new(kernel(), 8, 30, InitialLaw::Point(1.0), 2);
        let seq = ObservableSequence::single(Observable::identity(&config.kernel).unwrap(), &config.kernel).unwrap();
        let s = normalized_functional_residual(&config, &seq, 4, 8).unwrap();
        for r in &s.residuals_n2 {
            assert!(r.abs() < 1e-10);
        }
        assert!(s.shrinking());
    }
}
