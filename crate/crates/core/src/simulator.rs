//! Generation-by-generation sampling of a bifurcating Markov chain and
//! accumulation of its additive functionals.
//!
//! A replicate never holds more than two generations: the current one is
//! evaluated against every configured functional, then replaced by its
//! children. Each replicate owns the random stream keyed by its index, so an
//! ensemble is bitwise identical whatever the number of worker threads.

use std::ops::Range;
use std::time::Instant;

use rayon::prelude::*;

use crate::error::{BmcError, Result};
use crate::hermite::{hermite_series, Observable, ObservableSequence};
use crate::kernels::{BarKernel, BranchingKernel, Regime};
use crate::rng::replicate_stream;
use crate::tree_index::{check_depth, generation_size};

/// Default estimate ceiling for [`SimulationConfig::memory_budget_bytes`].
pub const DEFAULT_MEMORY_BUDGET: u128 = 4 << 30;

/// Replicates simulated between two deadline checks.
const CHUNK: usize = 64;

/// Law of the root state `X_root`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitialLaw {
    /// Dirac mass at a point.
    Point(f64),
    /// The invariant law of `Q`.
    Stationary,
}

#[derive(Debug, Clone)]
pub struct SimulationConfig<K = BarKernel> {
    pub kernel: K,
    pub depth: u32,
    pub replicates: usize,
    pub initial: InitialLaw,
    pub master_seed: u64,
    pub memory_budget_bytes: u128,
}

impl<K> SimulationConfig<K> {
    pub fn new(kernel: K, depth: u32, replicates: usize, initial: InitialLaw, master_seed: u64) -> Self {
        Self {
            kernel,
            depth,
            replicates,
            initial,
            master_seed,
            memory_budget_bytes: DEFAULT_MEMORY_BUDGET,
        }
    }
}

impl SimulationConfig<BarKernel> {
    /// Desk-scale presets: sub-critical `a = 0.5, n = 14, R = 4000`,
    /// critical `a = 1/sqrt(2), n = 14, R = 4000`, super-critical
    /// `a = 0.8, n = 18, R = 512`; `sigma = 1`, stationary root.
    pub fn preset(regime: Regime, master_seed: u64) -> Self {
        let (kernel, depth, replicates) = match regime {
            Regime::Subcritical => (BarKernel::new(0.5, 1.0), 14, 4000),
            Regime::Critical => (BarKernel::critical(false, 1.0), 14, 4000),
            Regime::Supercritical => (BarKernel::new(0.8, 1.0), 18, 512),
        };
        let kernel = kernel.expect("preset kernel parameters are valid");
        Self::new(kernel, depth, replicates, InitialLaw::Stationary, master_seed)
    }
}

/// What to accumulate along each replicate.
#[derive(Debug, Clone, Default)]
pub struct Functionals {
    /// Observables `f` whose centred sums `M_{G_l}(f~)` and `M_{T_n}(f~)`
    /// are recorded.
    pub observables: Vec<Observable>,
    /// Sequence for `N_{d,root}`, recorded for every depth `d <= n`.
    pub sequence: Option<ObservableSequence>,
    /// Eigen-projected observables `R f` whose martingales
    /// `(2a)^(-l) M_{G_l}(R f)` are tracked.
    pub martingales: Vec<Observable>,
}

impl Functionals {
    pub fn observables(observables: Vec<Observable>) -> Self {
        Self {
            observables,
            ..Self::default()
        }
    }
}

/// Functionals of one replicate.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateStatistics {
    pub replicate: u64,
    /// State of the root.
    pub root: f64,
    /// `m_gen[o][l] = M_{G_l}(f~_o)`.
    pub m_gen: Vec<Vec<f64>>,
    /// `m_tree[o] = M_{T_n}(f~_o)`, summed node by node.
    pub m_tree: Vec<f64>,
    /// `n_functional[d] = N_{d,root}(sequence)` for `d = 0..=n`; empty
    /// without a sequence.
    pub n_functional: Vec<f64>,
    /// `martingale_track[j][l] = (2a)^(-l) M_{G_l}(R f_j)`.
    pub martingale_track: Vec<Vec<f64>>,
}

impl ReplicateStatistics {
    /// `N_{n,root}` at the simulated depth.
    pub fn n_functional_at_depth(&self) -> Option<f64> {
        self.n_functional.last().copied()
    }

    /// `|m_tree - sum_l m_gen[l]|` relative to the size of the summands.
    pub fn tree_consistency_error(&self, observable: usize) -> f64 {
        let gens = &self.m_gen[observable];
        let sum: f64 = gens.iter().sum();
        let size: f64 = gens.iter().map(|v| v.abs()).sum::<f64>().max(f64::MIN_POSITIVE);
        (self.m_tree[observable] - sum).abs() / size
    }
}

/// `|G_n|^(-1/2)`.
pub fn generation_scale(n: u32) -> f64 {
    1.0 / 2f64.powi(n as i32).sqrt()
}

/// Checks the identity `N_{n,root}((f, f, ...)) = sqrt(2 - 2^-n) |T_n|^(-1/2)
/// M_{T_n}(f~)` to `1e-12` relative. `observable` indexes the `f` inside
/// the replicate's observables; the replicate must have been run with the
/// constant sequence `(f, f, ...)`.
pub fn n_functional_identity_check(stats: &ReplicateStatistics, observable: usize, n: u32) -> bool {
    let Some(&lhs) = stats.n_functional.get(n as usize) else {
        return false;
    };
    let (Some(gens), Some(&tree)) = (stats.m_gen.get(observable), stats.m_tree.get(observable)) else {
        return false;
    };
    if gens.len() != n as usize + 1 {
        return false;
    }
    let tree_size = 2f64.powi(n as i32 + 1) - 1.0;
    let rhs = (2.0 - 2f64.powi(-(n as i32))).sqrt() / tree_size.sqrt() * tree;
    let size = generation_scale(n) * gens.iter().map(|v| v.abs()).sum::<f64>();
    (lhs - rhs).abs() <= 1e-12 * size.max(lhs.abs()).max(f64::MIN_POSITIVE)
}

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct KahanSum {
    sum: f64,
    compensation: f64,
}

impl KahanSum {
    #[inline]
    pub fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.compensation += (self.sum - t) + v;
        } else {
            self.compensation += (v - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.compensation
    }
}

/// Ordered collection of replicate records.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    depth: u32,
    records: Vec<ReplicateStatistics>,
}

impl Ensemble {
    pub fn depth(&self) -> u32 {
        self.depth
    }

    /// Records sorted by replicate index.
    pub fn records(&self) -> &[ReplicateStatistics] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Union of two partial ensembles of the same run. The result is sorted
    /// by replicate index, so any merge order gives the same ensemble.
    pub fn merge(mut self, other: Ensemble) -> Result<Ensemble> {
        if self.depth != other.depth {
            return Err(BmcError::InvalidArgument(format!(
                "cannot merge ensembles of depth {} and {}",
                self.depth, other.depth
            )));
        }
        self.records.extend(other.records);
        self.records.sort_by_key(|r| r.replicate);
        if self.records.windows(2).any(|w| w[0].replicate == w[1].replicate) {
            return Err(BmcError::InvalidArgument(
                "ensembles share a replicate index".into(),
            ));
        }
        Ok(self)
    }

    /// `M_{G_l}(f~_o)` across replicates.
    pub fn generation_values(&self, observable: usize, generation: u32) -> Vec<f64> {
        self.records
            .iter()
            .map(|r| r.m_gen[observable][generation as usize])
            .collect()
    }

    /// `M_{T_n}(f~_o)` across replicates.
    pub fn tree_values(&self, observable: usize) -> Vec<f64> {
        self.records.iter().map(|r| r.m_tree[observable]).collect()
    }

    pub fn n_functional_values(&self, depth: u32) -> Vec<f64> {
        self.records
            .iter()
            .map(|r| r.n_functional[depth as usize])
            .collect()
    }

    pub fn martingale_values(&self, index: usize, generation: u32) -> Vec<f64> {
        self.records
            .iter()
            .map(|r| r.martingale_track[index][generation as usize])
            .collect()
    }
}

/// Result of a run that may stop at a deadline.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub ensemble: Ensemble,
    pub complete: bool,
}

/// Pointwise evaluator prepared once per run.
struct Target {
    coeffs: Vec<f64>,
    inv_scale: f64,
}

impl Target {
    fn new(f: &Observable, centred: bool) -> Self {
        let mut coeffs = f.coeffs().to_vec();
        coeffs.truncate(f.degree() + 1);
        if centred {
            coeffs[0] = 0.0;
        }
        Self {
            coeffs,
            inv_scale: 1.0 / f.scale(),
        }
    }

    #[inline]
    fn eval(&self, x: f64) -> f64 {
        hermite_series(&self.coeffs, x * self.inv_scale)
    }
}

struct Plan {
    observables: Vec<Target>,
    sequence: Vec<Target>,
    sequence_map: Vec<Option<usize>>,
    martingales: Vec<Target>,
    growth: f64,
}

impl Plan {
    fn new<K: BranchingKernel>(config: &SimulationConfig<K>, functionals: &Functionals) -> Result<Self> {
        let bar = config.kernel.as_bar();
        let basis = bar.and_then(|k| k.basis().ok());
        if let Some(kernel) = bar.filter(|_| basis.is_some()) {
            for f in functionals.observables.iter().chain(&functionals.martingales) {
                f.check_kernel(kernel)?;
            }
            if let Some(seq) = &functionals.sequence {
                seq.check_kernel(kernel)?;
            }
        }
        let growth = if functionals.martingales.is_empty() {
            0.0
        } else {
            let kernel = bar.ok_or_else(|| {
                BmcError::Unsupported("martingale tracks need the analytic BAR kernel".into())
            })?;
            2.0 * kernel.a()
        };
        let n = config.depth as usize;
        let (sequence, sequence_map) = match &functionals.sequence {
            Some(seq) => (
                seq.entries().iter().map(|f| Target::new(f, true)).collect(),
                (0..=n).map(|l| seq.entry_index(l)).collect(),
            ),
            None => (Vec::new(), Vec::new()),
        };
        Ok(Self {
            observables: functionals.observables.iter().map(|f| Target::new(f, true)).collect(),
            sequence,
            sequence_map,
            martingales: functionals.martingales.iter().map(|f| Target::new(f, false)).collect(),
            growth,
        })
    }
}

fn validate<K: BranchingKernel>(config: &SimulationConfig<K>, functionals: &Functionals) -> Result<()> {
    check_depth(config.depth)?;
    if config.replicates == 0 {
        return Err(BmcError::InvalidArgument("at least one replicate is required".into()));
    }
    if config.initial == InitialLaw::Stationary
        && config
            .kernel
            .sample_stationary(&mut replicate_stream(0, 0))
            .is_none()
    {
        return Err(BmcError::InvalidArgument(
            "stationary start requested but the kernel has no known invariant law".into(),
        ));
    }
    let needed = estimate_memory(config, functionals, rayon::current_num_threads());
    if needed > config.memory_budget_bytes {
        return Err(BmcError::MemoryBudget {
            needed,
            budget: config.memory_budget_bytes,
        });
    }
    Ok(())
}

/// Upper estimate of resident bytes: two generation buffers per worker plus
/// the replicate records.
pub fn estimate_memory<K>(config: &SimulationConfig<K>, functionals: &Functionals, workers: usize) -> u128 {
    let levels = config.depth as u128 + 1;
    let buffers = 2 * (1u128 << config.depth.min(127)) * 8 * workers.max(1) as u128;
    let per_record = 8
        * (functionals.observables.len() as u128 * (levels + 1)
            + if functionals.sequence.is_some() { levels } else { 0 }
            + functionals.martingales.len() as u128 * levels)
        + 128;
    buffers + per_record * config.replicates as u128
}

fn simulate_one<K: BranchingKernel>(config: &SimulationConfig<K>, plan: &Plan, replicate: u64) -> ReplicateStatistics {
    let n = config.depth;
    let mut rng = replicate_stream(config.master_seed, replicate);
    let root = match config.initial {
        InitialLaw::Point(x) => x,
        InitialLaw::Stationary => config
            .kernel
            .sample_stationary(&mut rng)
            .expect("validated before the run"),
    };
    let width = generation_size(n).expect("validated depth") as usize;
    let mut current = Vec::with_capacity(width);
    let mut next = Vec::with_capacity(width);
    current.push(root);

    let levels = n as usize + 1;
    let mut m_gen = vec![vec![0.0; levels]; plan.observables.len()];
    let mut tree_sums = vec![KahanSum::default(); plan.observables.len()];
    let mut seq_sums = vec![vec![0.0; plan.sequence.len()]; levels];
    let mut mart = vec![vec![0.0; levels]; plan.martingales.len()];

    for gen in 0..levels {
        for (o, target) in plan.observables.iter().enumerate() {
            let mut level = KahanSum::default();
            let tree = &mut tree_sums[o];
            for &x in &current {
                let v = target.eval(x);
                level.add(v);
                tree.add(v);
            }
            m_gen[o][gen] = level.value();
        }
        for (e, target) in plan.sequence.iter().enumerate() {
            let mut level = KahanSum::default();
            for &x in &current {
                level.add(target.eval(x));
            }
            seq_sums[gen][e] = level.value();
        }
        for (j, target) in plan.martingales.iter().enumerate() {
            let mut level = KahanSum::default();
            for &x in &current {
                level.add(target.eval(x));
            }
            mart[j][gen] = level.value() * plan.growth.powi(-(gen as i32));
        }
        if gen + 1 < levels {
            next.clear();
            for &x in &current {
                let (y, z) = config.kernel.sample_children(x, &mut rng);
                next.push(y);
                next.push(z);
            }
            std::mem::swap(&mut current, &mut next);
        }
    }

    let n_functional = if plan.sequence_map.is_empty() {
        Vec::new()
    } else {
        (0..levels)
            .map(|d| {
                let mut acc = 0.0;
                for l in 0..=d {
                    if let Some(e) = plan.sequence_map[l] {
                        acc += seq_sums[d - l][e];
                    }
                }
                acc * generation_scale(d as u32)
            })
            .collect()
    };

    ReplicateStatistics {
        replicate,
        root,
        m_gen,
        m_tree: tree_sums.iter().map(KahanSum::value).collect(),
        n_functional,
        martingale_track: mart,
    }
}

/// Runs all configured replicates.
pub fn run_replicates<K: BranchingKernel>(
    config: &SimulationConfig<K>,
    functionals: &Functionals,
) -> Result<Ensemble> {
    Ok(run_until(config, functionals, None)?.ensemble)
}

/// Runs all replicates, stopping at the first chunk boundary after
/// `deadline`.
pub fn run_until<K: BranchingKernel>(
    config: &SimulationConfig<K>,
    functionals: &Functionals,
    deadline: Option<Instant>,
) -> Result<RunOutcome> {
    validate(config, functionals)?;
    let plan = Plan::new(config, functionals)?;
    let mut records = Vec::with_capacity(config.replicates);
    let mut start = 0;
    while start < config.replicates {
        if deadline.is_some_and(|d| Instant::now() >= d) {
            break;
        }
        let end = (start + CHUNK).min(config.replicates);
        let chunk: Vec<_> = (start..end)
            .into_par_iter()
            .map(|r| simulate_one(config, &plan, r as u64))
            .collect();
        records.extend(chunk);
        start = end;
    }
    let complete = records.len() == config.replicates;
    Ok(RunOutcome {
        ensemble: Ensemble {
            depth: config.depth,
            records,
        },
        complete,
    })
}

/// Runs the replicates with indices in `range` only; partial ensembles
/// combine through [`Ensemble::merge`].
pub fn run_replicate_range<K: BranchingKernel>(
    config: &SimulationConfig<K>,
    functionals: &Functionals,
    range: Range<u64>,
) -> Result<Ensemble> {
    validate(config, functionals)?;
    let plan = Plan::new(config, functionals)?;
    let records = range
        .into_par_iter()
        .map(|r| simulate_one(config, &plan, r))
        .collect();
    Ok(Ensemble {
        depth: config.depth,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hermite::ObservableSequence;
    use crate::rng::StreamRng;
    use approx::assert_abs_diff_eq;

    fn k05() -> BarKernel {
        BarKernel::new(0.5, 1.0).unwrap()
    }

    #[test]
    fn noiseless_dynamics_are_deterministic() {
        let kernel = BarKernel::noiseless(0.5).unwrap();
        let f = Observable::new(1.0, vec![0.0, 1.0]).unwrap();
        let config = SimulationConfig::new(kernel, 3, 5, InitialLaw::Point(1.0), 11);
        let ens = run_replicates(&config, &Functionals::observables(vec![f])).unwrap();
        for r in ens.records() {
            assert_eq!(r.m_gen[0], vec![1.0, 1.0, 1.0, 1.0]);
            assert_eq!(r.m_tree[0], 4.0);
        }
    }

    #[test]
    fn single_entry_sequence_is_bit_exact() {
        let k = k05();
        let f = Observable::for_kernel(&k, vec![0.3, 1.0, 0.4]).unwrap();
        let funcs = Functionals {
            observables: vec![f.clone()],
            sequence: Some(ObservableSequence::single(f, &k).unwrap()),
            martingales: vec![],
        };
        let config = SimulationConfig::new(k, 7, 20, InitialLaw::Stationary, 3);
        let ens = run_replicates(&config, &funcs).unwrap();
        for r in ens.records() {
            for d in 0..=7u32 {
                assert_eq!(
                    r.n_functional[d as usize].to_bits(),
                    (r.m_gen[0][d as usize] * generation_scale(d)).to_bits()
                );
            }
        }
    }

    #[test]
    fn constant_sequence_identity() {
        let k = k05();
        let f = Observable::for_kernel(&k, vec![1.0, 0.5, -0.2, 0.1]).unwrap();
        for n in [0u32, 4, 9] {
            let funcs = Functionals {
                observables: vec![f.clone()],
                sequence: Some(ObservableSequence::constant(f.clone(), &k).unwrap()),
                martingales: vec![],
            };
            let config = SimulationConfig::new(k, n, 100, InitialLaw::Point(0.7), 1000 + n as u64);
            let ens = run_replicates(&config, &funcs).unwrap();
            for r in ens.records() {
                assert!(n_functional_identity_check(r, 0, n));
                assert!(r.tree_consistency_error(0) < 1e-13);
            }
            if n == 0 {
                let r = &ens.records()[0];
                assert_abs_diff_eq!(r.n_functional[0], f.center().eval(0.7), epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn identity_check_detects_violation() {
        let k = k05();
        let f = Observable::identity(&k).unwrap();
        let funcs = Functionals {
            observables: vec![f.clone()],
            sequence: Some(ObservableSequence::constant(f, &k).unwrap()),
            martingales: vec![],
        };
        let config = SimulationConfig::new(k, 4, 1, InitialLaw::Point(1.0), 5);
        let mut r = run_replicates(&config, &funcs).unwrap().records()[0].clone();
        assert!(n_functional_identity_check(&r, 0, 4));
        r.m_tree[0] += 1.0;
        assert!(!n_functional_identity_check(&r, 0, 4));
    }

    #[test]
    fn merge_is_order_independent() {
        let k = k05();
        let f = Observable::identity(&k).unwrap();
        let funcs = Functionals::observables(vec![f]);
        let config = SimulationConfig::new(k, 5, 30, InitialLaw::Stationary, 8);
        let whole = run_replicates(&config, &funcs).unwrap();
        let a = run_replicate_range(&config, &funcs, 0..10).unwrap();
        let b = run_replicate_range(&config, &funcs, 10..22).unwrap();
        let c = run_replicate_range(&config, &funcs, 22..30).unwrap();
        let abc = a.clone().merge(b.clone()).unwrap().merge(c.clone()).unwrap();
        let cab = c.merge(a.clone()).unwrap().merge(b).unwrap();
        assert_eq!(abc, whole);
        assert_eq!(cab, whole);
        assert!(a.clone().merge(a).is_err());
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let k = k05();
        let funcs = Functionals::observables(vec![Observable::identity(&k).unwrap()]);
        let config = SimulationConfig::new(k, 6, 150, InitialLaw::Stationary, 77);
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| run_replicates(&config, &funcs).unwrap())
        };
        let one = run(1);
        assert_eq!(one, run(3));
        assert_eq!(one, run(8));
    }

    #[test]
    fn rejects_bad_configs() {
        let k = k05();
        let funcs = Functionals::observables(vec![Observable::identity(&k).unwrap()]);
        let deep = SimulationConfig::new(k, 61, 1, InitialLaw::Stationary, 0);
        assert!(matches!(run_replicates(&deep, &funcs), Err(BmcError::DepthOutOfRange { .. })));
        let none = SimulationConfig::new(k, 3, 0, InitialLaw::Stationary, 0);
        assert!(run_replicates(&none, &funcs).is_err());
        let big = SimulationConfig::new(k, 40, 10, InitialLaw::Stationary, 0);
        assert!(matches!(run_replicates(&big, &funcs), Err(BmcError::MemoryBudget { .. })));
        let other = BarKernel::new(0.3, 1.0).unwrap();
        let mismatched = SimulationConfig::new(other, 3, 1, InitialLaw::Stationary, 0);
        assert!(matches!(run_replicates(&mismatched, &funcs), Err(BmcError::BasisMismatch { .. })));
    }

    struct Walk;

    impl BranchingKernel for Walk {
        fn sample_children(&self, x: f64, _rng: &mut StreamRng) -> (f64, f64) {
            (x - 1.0, x + 1.0)
        }
    }

    #[test]
    fn generic_kernels_sample_without_analytics() {
        let f = Observable::new(1.0, vec![0.0, 1.0]).unwrap();
        let config = SimulationConfig::new(Walk, 3, 2, InitialLaw::Point(0.5), 0);
        let ens = run_replicates(&config, &Functionals::observables(vec![f.clone()])).unwrap();
        assert_eq!(ens.generation_values(0, 3), vec![4.0, 4.0]);
        let stationary = SimulationConfig::new(Walk, 3, 2, InitialLaw::Stationary, 0);
        assert!(run_replicates(&stationary, &Functionals::default()).is_err());
        let funcs = Functionals {
            martingales: vec![f],
            ..Functionals::default()
        };
        assert!(run_replicates(&config, &funcs).is_err());
    }

    #[test]
    fn deadline_in_the_past_yields_partial_run() {
        let k = k05();
        let funcs = Functionals::observables(vec![Observable::identity(&k).unwrap()]);
        let config = SimulationConfig::new(k, 4, 500, InitialLaw::Stationary, 1);
        let out = run_until(&config, &funcs, Some(Instant::now())).unwrap();
        assert!(!out.complete);
        assert!(out.ensemble.len() < 500);
    }

    #[test]
    fn compensated_sum_recovers_cancelled_terms() {
        let mut k = KahanSum::default();
        let mut naive = 0.0;
        for v in [1.0, 1e100, 1.0, -1e100] {
            k.add(v);
            naive += v;
        }
        assert_eq!(k.value(), 2.0);
        assert_eq!(naive, 0.0);
    }
}
