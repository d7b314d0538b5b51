//! Experiment configuration, orchestration and CSV output.
//!
//! An experiment is a TOML file describing the kernel, the simulation and
//! the observables. Each subcommand turns it into rows of a fixed CSV
//! schema; every row carries the experiment kind, a hash of the effective
//! configuration and the library version in its `experiment` column.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::error::{BmcError, Result};
use crate::hermite::{Observable, ObservableSequence, SequenceTail};
use crate::kernels::{BarKernel, Regime};
use crate::limit_variance::{
    sigma_crit_g, sigma_crit_sequence, sigma_crit_t, sigma_sub_g, sigma_sub_sequence, sigma_sub_t, VarianceReport,
};
use crate::moment_oracle::{
    average, cross_moment_fn, generation_moments, mean_generation_fn, second_moment_generation_fn, tree_moments,
};
use crate::simulator::{run_until, Ensemble, Functionals, InitialLaw, SimulationConfig};
use crate::stat_tests::{
    check_clt_regime, clt_report_from_ensemble, empirical_summary, median, CltVerdict, KS_CRITICAL_1PCT,
};
use crate::supercritical::{
    martingale_second_moment, martingale_slope_test, ratio_from_ensemble, residual_summary, residuals_at,
    MartingaleTrack,
};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "BMC_LAB_OUT";

pub const CSV_HEADER: &str =
    "experiment,a,sigma,n,R,seed,statistic,value,target_exact,target_asymptotic,tolerance,pass";

/// Default runtime budget per experiment.
pub const DEFAULT_BUDGET_SECONDS: f64 = 120.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subcommand {
    Simulate,
    Oracle,
    Variance,
    Clt,
    Supercritical,
    Regimes,
}

impl Subcommand {
    pub fn name(self) -> &'static str {
        match self {
            Self::Simulate => "simulate",
            Self::Oracle => "oracle",
            Self::Variance => "variance",
            Self::Clt => "clt",
            Self::Supercritical => "supercritical",
            Self::Regimes => "regimes",
        }
    }
}

/// `a` as a number or as `"critical"` / `"-critical"` for `+-1/sqrt(2)`.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum CoefficientSpec {
    Value(f64),
    Named(String),
}

impl CoefficientSpec {
    pub fn value(&self) -> Result<f64> {
        match self {
            Self::Value(a) => Ok(*a),
            Self::Named(s) => match s.trim() {
                "critical" | "+critical" => Ok(std::f64::consts::FRAC_1_SQRT_2),
                "-critical" => Ok(-std::f64::consts::FRAC_1_SQRT_2),
                other => other
                    .parse()
                    .map_err(|_| BmcError::Config(format!("cannot read a = {other:?}"))),
            },
        }
    }
}

/// A preset name (`identity`, `square-centered`, `hermite:m`,
/// `constant:c`, `zero`) or explicit normalised Hermite coefficients.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum ObservableSpec {
    Preset(String),
    Coefficients { coeffs: Vec<f64> },
}

impl ObservableSpec {
    pub fn build(&self, kernel: &BarKernel) -> Result<Observable> {
        match self {
            Self::Preset(name) => Observable::preset(name, kernel),
            Self::Coefficients { coeffs } => Observable::for_kernel(kernel, coeffs.clone()),
        }
    }

    pub fn label(&self) -> String {
        match self {
            Self::Preset(name) => name.clone(),
            Self::Coefficients { coeffs } => {
                let parts: Vec<String> = coeffs.iter().map(|c| c.to_string()).collect();
                format!("hermite[{}]", parts.join(" "))
            }
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum InitialSpec {
    Point(f64),
    Named(String),
}

impl InitialSpec {
    pub fn law(&self) -> Result<InitialLaw> {
        match self {
            Self::Point(x) => Ok(InitialLaw::Point(*x)),
            Self::Named(s) if s == "stationary" => Ok(InitialLaw::Stationary),
            Self::Named(s) => s
                .parse()
                .map(InitialLaw::Point)
                .map_err(|_| BmcError::Config(format!("unknown initial law {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSection {
    pub a: CoefficientSpec,
    #[serde(default = "one")]
    pub sigma: f64,
    /// `auto` or an explicit regime that must agree with `a`.
    #[serde(default)]
    pub regime: Option<String>,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationSection {
    pub depth: u32,
    pub replicates: usize,
    pub seed: u64,
    pub initial: InitialSpec,
    pub budget_seconds: f64,
    pub memory_budget_mb: Option<u64>,
}

impl Default for SimulationSection {
    fn default() -> Self {
        Self {
            depth: 10,
            replicates: 1000,
            seed: 0,
            initial: InitialSpec::Named("stationary".into()),
            budget_seconds: DEFAULT_BUDGET_SECONDS,
            memory_budget_mb: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceSection {
    pub entries: Vec<ObservableSpec>,
    /// `zero` or `constant`.
    #[serde(default = "zero_tail")]
    pub tail: String,
}

fn zero_tail() -> String {
    "zero".into()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleSection {
    pub n: u32,
    /// Second generation for the cross moment.
    pub m: Option<u32>,
    /// Root state; the simulation's initial law when absent.
    pub x: Option<f64>,
    pub g: Option<ObservableSpec>,
}

impl Default for OracleSection {
    fn default() -> Self {
        Self {
            n: 2,
            m: None,
            x: None,
            g: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VarianceSection {
    pub tolerance: f64,
}

impl Default for VarianceSection {
    fn default() -> Self {
        Self { tolerance: 1e-12 }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SupercriticalSection {
    pub n1: Option<u32>,
    pub n2: Option<u32>,
    /// Tolerance on the median tree/generation ratio.
    pub ratio_tolerance: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegimesSection {
    pub a: Vec<CoefficientSpec>,
    /// Depth `n` of the variance growth ratio `v(2n) / (2^n v(n))`.
    pub depth: u32,
    /// Distances `1 - 2a^2` of the sub-critical boundary curve.
    pub curve_gaps: Vec<f64>,
}

impl Default for RegimesSection {
    fn default() -> Self {
        Self {
            a: vec![
                CoefficientSpec::Value(0.3),
                CoefficientSpec::Value(0.5),
                CoefficientSpec::Named("critical".into()),
                CoefficientSpec::Value(0.8),
                CoefficientSpec::Value(0.9),
            ],
            depth: 16,
            curve_gaps: vec![0.1, 0.01, 0.001],
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kernel: KernelSection,
    #[serde(default)]
    pub simulation: SimulationSection,
    #[serde(default = "default_observables")]
    pub observables: Vec<ObservableSpec>,
    #[serde(default)]
    pub sequence: Option<SequenceSection>,
    #[serde(default)]
    pub oracle: OracleSection,
    #[serde(default)]
    pub variance: VarianceSection,
    #[serde(default)]
    pub supercritical: SupercriticalSection,
    #[serde(default)]
    pub regimes: RegimesSection,
    #[serde(default)]
    pub output: OutputSection,
    /// Source text, hashed into every row.
    #[serde(skip)]
    source: String,
}

fn default_observables() -> Vec<ObservableSpec> {
    vec![ObservableSpec::Preset("identity".into())]
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut config: Self = toml::from_str(text).map_err(|e| BmcError::Config(e.to_string()))?;
        config.source = text.to_owned();
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BmcError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Kernel after checking an explicit regime against the
    /// classification of `a`.
    pub fn kernel(&self) -> Result<BarKernel> {
        let a = self.kernel.a.value()?;
        let kernel = BarKernel::new(a, self.kernel.sigma).map_err(|e| match e {
            BmcError::InvalidKernel(msg) => BmcError::Config(msg),
            other => other,
        })?;
        match self.kernel.regime.as_deref() {
            None | Some("auto") => Ok(kernel),
            Some(label) => {
                let declared: Regime = label.parse().map_err(|_| BmcError::Config(format!("unknown regime {label:?}")))?;
                if declared == kernel.regime() {
                    Ok(kernel)
                } else {
                    Err(BmcError::RegimeMismatch {
                        expected: crate::error::RegimeSet(match declared {
                            Regime::Subcritical => &[Regime::Subcritical],
                            Regime::Critical => &[Regime::Critical],
                            Regime::Supercritical => &[Regime::Supercritical],
                        }),
                        actual: kernel.regime(),
                    })
                }
            }
        }
    }

    pub fn simulation_config(&self, seed: u64) -> Result<SimulationConfig> {
        let mut config = SimulationConfig::new(
            self.kernel()?,
            self.simulation.depth,
            self.simulation.replicates,
            self.simulation.initial.law()?,
            seed,
        );
        if let Some(mb) = self.simulation.memory_budget_mb {
            config.memory_budget_bytes = mb as u128 * (1 << 20);
        }
        Ok(config)
    }

    pub fn observables(&self, kernel: &BarKernel) -> Result<Vec<Observable>> {
        self.observables.iter().map(|s| s.build(kernel)).collect()
    }

    /// The configured sequence, or `(f, 0, 0, ...)` for the first
    /// observable.
    pub fn sequence(&self, kernel: &BarKernel) -> Result<ObservableSequence> {
        match &self.sequence {
            Some(section) => {
                let entries = section
                    .entries
                    .iter()
                    .map(|s| s.build(kernel))
                    .collect::<Result<Vec<_>>>()?;
                let tail = match section.tail.as_str() {
                    "zero" => SequenceTail::Zero,
                    "constant" => SequenceTail::Constant,
                    other => return Err(BmcError::Config(format!("unknown sequence tail {other:?}"))),
                };
                ObservableSequence::new(entries, tail, kernel)
            }
            None => {
                let f = self.first_observable(kernel)?;
                ObservableSequence::single(f, kernel)
            }
        }
    }

    fn first_observable(&self, kernel: &BarKernel) -> Result<Observable> {
        self.observables
            .first()
            .ok_or_else(|| BmcError::Config("at least one observable is required".into()))?
            .build(kernel)
    }

    /// First 16 hex digits of the SHA-256 of the source and the seed.
    pub fn hash(&self, seed: u64) -> String {
        let mut h = Sha256::new();
        h.update(self.source.as_bytes());
        h.update(format!("\nseed={seed}").as_bytes());
        h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn default_seed(&self) -> u64 {
        self.simulation.seed
    }

    pub fn budget(&self) -> Duration {
        Duration::from_secs_f64(self.simulation.budget_seconds.max(0.0))
    }

    pub fn output_dir(&self) -> Option<&Path> {
        self.output.dir.as_deref()
    }
}

/// One line of the CSV schema.
#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub a: f64,
    pub sigma: f64,
    pub n: u32,
    pub replicates: usize,
    pub statistic: String,
    pub value: f64,
    pub target_exact: Option<f64>,
    pub target_asymptotic: Option<f64>,
    pub tolerance: Option<f64>,
    pub pass: Option<bool>,
}

/// Rows of one subcommand plus auxiliary CSV files.
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub subcommand: Subcommand,
    pub tag: String,
    pub seed: u64,
    pub rows: Vec<Row>,
    /// `(file name, contents)`.
    pub files: Vec<(String, String)>,
    /// `false` when the runtime budget stopped the simulation early.
    pub complete: bool,
    pub completed_replicates: usize,
    pub requested_replicates: usize,
}

impl ExperimentOutput {
    pub fn csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                self.tag,
                r.a,
                r.sigma,
                r.n,
                r.replicates,
                self.seed,
                r.statistic,
                r.value,
                opt(r.target_exact),
                opt(r.target_asymptotic),
                opt(r.tolerance),
                r.pass.map(|p| p.to_string()).unwrap_or_default()
            );
        }
        out
    }

    /// Writes `<subcommand>.csv`, the auxiliary files and, for an
    /// incomplete run, a `<subcommand>.partial` marker.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        let main = dir.join(format!("{}.csv", self.subcommand.name()));
        std::fs::write(&main, self.csv())?;
        written.push(main);
        for (name, contents) in &self.files {
            let path = dir.join(name);
            std::fs::write(&path, contents)?;
            written.push(path);
        }
        let marker = dir.join(format!("{}.partial", self.subcommand.name()));
        if self.complete {
            if marker.exists() {
                std::fs::remove_file(&marker)?;
            }
        } else {
            std::fs::write(
                &marker,
                format!(
                    "runtime budget exceeded: {} of {} replicates completed\n",
                    self.completed_replicates, self.requested_replicates
                ),
            )?;
            written.push(marker);
        }
        Ok(written)
    }

    pub fn all_passed(&self) -> bool {
        self.rows.iter().all(|r| r.pass != Some(false))
    }
}

/// Process exit status for an error.
pub fn exit_code(err: &BmcError) -> i32 {
    match err {
        BmcError::Config(_) => 2,
        BmcError::RegimeMismatch { .. } => 3,
        BmcError::BudgetExceeded { .. } => 4,
        _ => 1,
    }
}

struct Context<'a> {
    config: &'a ExperimentConfig,
    kernel: BarKernel,
    sim: SimulationConfig,
    deadline: Instant,
}

impl Context<'_> {
    fn row(&self, n: u32, statistic: impl Into<String>, value: f64) -> Row {
        Row {
            a: self.kernel.a(),
            sigma: self.kernel.sigma(),
            n,
            replicates: self.sim.replicates,
            statistic: statistic.into(),
            value,
            target_exact: None,
            target_asymptotic: None,
            tolerance: None,
            pass: None,
        }
    }

    fn simulate(&self, funcs: &Functionals) -> Result<(Ensemble, bool)> {
        let out = run_until(&self.sim, funcs, Some(self.deadline))?;
        if out.ensemble.len() < 2 {
            return Err(BmcError::BudgetExceeded {
                completed: out.ensemble.len(),
                requested: self.sim.replicates,
            });
        }
        Ok((out.ensemble, out.complete))
    }
}

/// Runs a subcommand. A simulation cut short by the runtime budget still
/// produces rows, flagged through [`ExperimentOutput::complete`].
pub fn run_experiment(
    subcommand: Subcommand,
    config: &ExperimentConfig,
    seed_override: Option<u64>,
) -> Result<ExperimentOutput> {
    let start = Instant::now();
    let seed = seed_override.unwrap_or(config.default_seed());
    let tag = format!("{}:{}:v{}", subcommand.name(), config.hash(seed), VERSION);
    let mut output = ExperimentOutput {
        subcommand,
        tag,
        seed,
        rows: Vec::new(),
        files: Vec::new(),
        complete: true,
        completed_replicates: config.simulation.replicates,
        requested_replicates: config.simulation.replicates,
    };
    if subcommand == Subcommand::Regimes {
        output.rows = regimes(config)?;
        return Ok(output);
    }
    let kernel = config.kernel()?;
    let ctx = Context {
        config,
        kernel,
        sim: config.simulation_config(seed)?,
        deadline: start + config.budget(),
    };
    let (rows, files, done) = match subcommand {
        Subcommand::Simulate => simulate(&ctx)?,
        Subcommand::Oracle => (oracle(&ctx)?, Vec::new(), None),
        Subcommand::Variance => variance(&ctx)?,
        Subcommand::Clt => clt(&ctx)?,
        Subcommand::Supercritical => supercritical(&ctx)?,
        Subcommand::Regimes => unreachable!("handled above"),
    };
    output.rows = rows;
    output.files = files;
    if let Some(done) = done {
        output.completed_replicates = done;
        output.complete = done == config.simulation.replicates;
    }
    Ok(output)
}

type Produced = (Vec<Row>, Vec<(String, String)>, Option<usize>);

fn simulate(ctx: &Context) -> Result<Produced> {
    let observables = ctx.config.observables(&ctx.kernel)?;
    let (ensemble, _) = ctx.simulate(&Functionals::observables(observables.clone()))?;
    let n = ctx.sim.depth;
    let mut rows = Vec::new();
    for (i, (f, spec)) in observables.iter().zip(&ctx.config.observables).enumerate() {
        let label = spec.label();
        let ft = f.center();
        let targets = [
            ("generation", ensemble.generation_values(i, n), generation_moments(&ft, n, ctx.sim.initial, &ctx.kernel)?),
            ("tree", ensemble.tree_values(i), tree_moments(&ft, n, ctx.sim.initial, &ctx.kernel)?),
        ];
        for (name, values, exact) in targets {
            let s = empirical_summary(&values)?;
            let mean_tol = 4.0 * (s.variance / values.len() as f64).sqrt();
            let mut row = ctx.row(n, format!("{label}:{name}_mean"), s.mean);
            row.target_exact = Some(exact.mean);
            row.tolerance = Some(mean_tol);
            row.pass = Some((s.mean - exact.mean).abs() <= mean_tol);
            rows.push(row);
            let mut row = ctx.row(n, format!("{label}:{name}_variance"), s.variance);
            row.target_exact = Some(exact.variance());
            row.tolerance = Some(4.0 * s.variance_stderr);
            row.pass = Some((s.variance - exact.variance()).abs() <= 4.0 * s.variance_stderr);
            rows.push(row);
        }
    }
    let mut per_replicate = String::from("replicate,root");
    for spec in &ctx.config.observables {
        let label = spec.label();
        let _ = write!(per_replicate, ",{label}:generation,{label}:tree");
    }
    per_replicate.push('\n');
    for r in ensemble.records() {
        let _ = write!(per_replicate, "{},{}", r.replicate, r.root);
        for i in 0..observables.len() {
            let _ = write!(per_replicate, ",{},{}", r.m_gen[i][n as usize], r.m_tree[i]);
        }
        per_replicate.push('\n');
    }
    Ok((rows, vec![("simulate_replicates.csv".into(), per_replicate)], Some(ensemble.len())))
}

fn oracle(ctx: &Context) -> Result<Vec<Row>> {
    let section = &ctx.config.oracle;
    let law = section.x.map_or(ctx.sim.initial, InitialLaw::Point);
    let n = section.n;
    let observables = ctx.config.observables(&ctx.kernel)?;
    let mut rows = Vec::new();
    for (f, spec) in observables.iter().zip(&ctx.config.observables) {
        let label = spec.label();
        let mean = average(&mean_generation_fn(f, n, &ctx.kernel)?, law)?;
        let second = average(&second_moment_generation_fn(f, n, &ctx.kernel)?, law)?;
        rows.push(ctx.row(n, format!("{label}:mean"), mean));
        rows.push(ctx.row(n, format!("{label}:second_moment"), second));
        rows.push(ctx.row(n, format!("{label}:variance"), second - mean * mean));
        if let Some(m) = section.m {
            let (g, g_label) = match &section.g {
                Some(spec) => (spec.build(&ctx.kernel)?, spec.label()),
                None => (f.clone(), label.clone()),
            };
            let cross = average(&cross_moment_fn(f, &g, n, m, &ctx.kernel)?, law)?;
            rows.push(ctx.row(n, format!("{label}x{g_label}@{m}:cross_moment"), cross));
        }
    }
    for r in &mut rows {
        r.replicates = 0;
    }
    Ok(rows)
}

fn variance_row(ctx: &Context, statistic: String, report: &VarianceReport, tol: Option<f64>) -> Row {
    let mut row = ctx.row(ctx.sim.depth, statistic, report.value);
    row.target_asymptotic = Some(report.value);
    row.tolerance = tol;
    row.pass = tol.map(|t| report.tail_bound < t && report.value >= -1e-12);
    row.replicates = 0;
    row
}

fn variance(ctx: &Context) -> Result<Produced> {
    let tol = ctx.config.variance.tolerance;
    let observables = ctx.config.observables(&ctx.kernel)?;
    let seq = ctx.config.sequence(&ctx.kernel)?;
    let mut reports = Vec::new();
    for (f, spec) in observables.iter().zip(&ctx.config.observables) {
        let label = spec.label();
        let (g, t) = match ctx.kernel.regime() {
            Regime::Subcritical => (sigma_sub_g(f, &ctx.kernel, tol)?, sigma_sub_t(f, &ctx.kernel, tol)?),
            Regime::Critical => (sigma_crit_g(f, &ctx.kernel)?, sigma_crit_t(f, &ctx.kernel)?),
            Regime::Supercritical => return Err(super_has_no_variance()),
        };
        reports.push((format!("{label}:sigma_generation"), g));
        reports.push((format!("{label}:sigma_tree"), t));
    }
    let s = match ctx.kernel.regime() {
        Regime::Subcritical => sigma_sub_sequence(&seq, &ctx.kernel, tol)?,
        _ => sigma_crit_sequence(&seq, &ctx.kernel)?,
    };
    reports.push(("sequence:sigma".into(), s));
    let tol_column = (ctx.kernel.regime() == Regime::Subcritical).then_some(tol);
    let rows = reports
        .iter()
        .map(|(name, r)| variance_row(ctx, name.clone(), r, tol_column))
        .collect();
    let json = serde_json::to_string_pretty(
        &reports
            .iter()
            .map(|(name, r)| serde_json::json!({ "statistic": name, "report": r }))
            .collect::<Vec<_>>(),
    )
    .map_err(|e| BmcError::InvalidArgument(e.to_string()))?;
    Ok((rows, vec![("variance.json".into(), json + "\n")], None))
}

fn super_has_no_variance() -> BmcError {
    BmcError::RegimeMismatch {
        expected: crate::error::RegimeSet(&[Regime::Subcritical, Regime::Critical]),
        actual: Regime::Supercritical,
    }
}

fn verdict_rows(ctx: &Context, label: &str, v: &CltVerdict, rows: &mut Vec<Row>) {
    let n = ctx.sim.depth;
    let name = v.statistic.label();
    let mut exact = ctx.row(n, format!("{label}:{name}_variance_exact"), v.empirical_variance);
    exact.target_exact = Some(v.target_variance_exact_n);
    exact.target_asymptotic = Some(v.target_variance_asymptotic);
    exact.tolerance = Some(4.0 * v.variance_stderr);
    exact.pass = Some(v.pass_exact);
    rows.push(exact);
    let mut asym = ctx.row(n, format!("{label}:{name}_variance_asymptotic"), v.empirical_variance);
    asym.target_exact = Some(v.target_variance_exact_n);
    asym.target_asymptotic = Some(v.target_variance_asymptotic);
    asym.tolerance = Some(v.asymptotic_slack);
    asym.pass = Some(v.pass_asymptotic);
    rows.push(asym);
    let mut ks = ctx.row(n, format!("{label}:{name}_ks"), v.ks_statistic);
    ks.tolerance = Some(KS_CRITICAL_1PCT / (ctx.sim.replicates as f64).sqrt());
    ks.pass = Some(v.pass_normality);
    rows.push(ks);
}

fn clt(ctx: &Context) -> Result<Produced> {
    let regime = ctx.kernel.regime();
    if regime == Regime::Supercritical {
        return Err(super_has_no_variance());
    }
    check_clt_regime(&ctx.kernel, regime)?;
    let observables = ctx.config.observables(&ctx.kernel)?;
    let (ensemble, _) = ctx.simulate(&Functionals::observables(observables.clone()))?;
    let mut rows = Vec::new();
    for (i, (f, spec)) in observables.iter().zip(&ctx.config.observables).enumerate() {
        let report = clt_report_from_ensemble(&ensemble, i, &ctx.sim, f, regime)?;
        let label = spec.label();
        verdict_rows(ctx, &label, &report.generation, &mut rows);
        verdict_rows(ctx, &label, &report.tree, &mut rows);
    }
    for r in &mut rows {
        r.replicates = ensemble.len();
    }
    Ok((rows, Vec::new(), Some(ensemble.len())))
}

/// Floating-point allowance added to statistical tolerances, so that
/// deterministic quantities (zero spread) compare equal up to rounding.
fn rounding(target: f64) -> f64 {
    1e-12 * target.abs().max(1.0)
}

fn supercritical(ctx: &Context) -> Result<Produced> {
    let kernel = &ctx.kernel;
    if kernel.regime() != Regime::Supercritical {
        return Err(BmcError::RegimeMismatch {
            expected: crate::error::RegimeSet(&[Regime::Supercritical]),
            actual: kernel.regime(),
        });
    }
    let depth = ctx.sim.depth;
    let section = &ctx.config.supercritical;
    let n2 = section.n2.unwrap_or(depth);
    let n1 = section.n1.unwrap_or(n2 * 2 / 3);
    if !(n1 < n2 && n2 <= depth) {
        return Err(BmcError::Config(format!(
            "supercritical depths must satisfy n1 < n2 <= {depth}, got {n1}, {n2}"
        )));
    }
    let f = ctx.config.first_observable(kernel)?;
    let label = ctx.config.observables[0].label();
    let seq = ctx.config.sequence(kernel)?;
    let rf = f.project_r(kernel)?;
    let mut martingales: Vec<Observable> = seq
        .entries()
        .iter()
        .map(|e| e.project_r(kernel))
        .collect::<Result<_>>()?;
    let track_index = martingales.len();
    martingales.push(rf.clone());
    let funcs = Functionals {
        observables: vec![f.clone()],
        sequence: Some(seq.clone()),
        martingales,
    };
    let (ensemble, _) = ctx.simulate(&funcs)?;
    let r = ensemble.len();
    let tracks: Vec<MartingaleTrack> = ensemble
        .records()
        .iter()
        .map(|rec| MartingaleTrack {
            replicate: rec.replicate,
            values: rec.martingale_track[track_index].clone(),
        })
        .collect();

    let mut rows = Vec::new();
    let positive = kernel.a() > 0.0;
    let degenerate = rf.is_zero();
    let root_mean = average(&rf, ctx.sim.initial)?;
    for n in 0..=depth {
        let values: Vec<f64> = tracks.iter().map(|t| t.values[n as usize]).collect();
        let s = empirical_summary(&values)?;
        let tol = 4.0 * (s.variance / r as f64).sqrt() + rounding(root_mean);
        let mut row = ctx.row(n, format!("{label}:martingale_mean"), s.mean);
        row.target_exact = Some(root_mean);
        row.tolerance = Some(tol);
        row.pass = Some((s.mean - root_mean).abs() <= tol);
        rows.push(row);

        let squares: Vec<f64> = values.iter().map(|v| v * v).collect();
        let sq = empirical_summary(&squares)?;
        let exact = martingale_second_moment(&f, n, ctx.sim.initial, kernel)?;
        let tol = 4.0 * (sq.variance / r as f64).sqrt() + rounding(exact);
        let mut row = ctx.row(n, format!("{label}:martingale_second_moment"), sq.mean);
        row.target_exact = Some(exact);
        row.tolerance = Some(tol);
        row.pass = Some((sq.mean - exact).abs() <= tol);
        rows.push(row);

        if n >= 1 && !degenerate {
            // A deterministic M_(n-1) (point start, n = 1) leaves nothing to regress on.
            let slope = match martingale_slope_test(&tracks, n) {
                Err(BmcError::Degenerate(_)) => continue,
                other => other?,
            };
            let mut row = ctx.row(n, format!("{label}:martingale_slope"), slope.regression.slope);
            row.target_exact = Some(1.0);
            row.tolerance = Some(4.0 * slope.regression.slope_stderr);
            row.pass = Some(slope.pass);
            rows.push(row);
        }
    }

    let growth = 2.0 * kernel.alpha();
    let mut ratio_column = vec![vec![None; depth as usize + 1]; r];
    if positive && !degenerate {
        let ratio = ratio_from_ensemble(&ensemble, 0, kernel)?;
        let tol = section.ratio_tolerance.unwrap_or(0.1);
        let mut row = ctx.row(depth, format!("{label}:ratio_median"), ratio.median);
        row.target_asymptotic = Some(ratio.target);
        row.tolerance = Some(tol);
        row.pass = Some((ratio.median - ratio.target).abs() <= tol);
        rows.push(row);
        rows.push(ctx.row(depth, format!("{label}:ratio_q10"), ratio.lower));
        rows.push(ctx.row(depth, format!("{label}:ratio_q90"), ratio.upper));
        rows.push(ctx.row(depth, format!("{label}:ratio_excluded"), ratio.excluded as f64));
        for (i, rec) in ensemble.records().iter().enumerate() {
            let mut tree = 0.0;
            for (n, &g) in rec.m_gen[0].iter().enumerate() {
                tree += g;
                ratio_column[i][n] = (g != 0.0).then(|| tree / g);
            }
        }
    }
    if degenerate {
        // R f = 0: (2a)^-n M_{G_n}(f~) has no martingale limit and tends to 0.
        let at = |n: u32| -> f64 {
            let v: Vec<f64> = ensemble
                .generation_values(0, n)
                .iter()
                .map(|x| (growth.powi(-(n as i32)) * x).abs())
                .collect();
            median(&v)
        };
        let (m1, m2) = (at(n1), at(n2));
        rows.push(ctx.row(n1, format!("{label}:normalized_generation_abs_median"), m1));
        let mut row = ctx.row(n2, format!("{label}:normalized_generation_abs_median"), m2);
        row.target_asymptotic = Some(0.0);
        row.pass = Some(m2 < m1);
        rows.push(row);
    }
    let mut residual_column = vec![vec![None; depth as usize + 1]; r];
    if positive {
        let summary = residual_summary(&ensemble, &seq, kernel, n1, n2)?;
        rows.push(ctx.row(n1, "sequence:residual_iqr", summary.iqr_n1));
        let mut row = ctx.row(n2, "sequence:residual_iqr", summary.iqr_n2);
        row.target_asymptotic = Some(0.0);
        row.tolerance = Some(summary.iqr_n1);
        row.pass = Some(summary.shrinking());
        rows.push(row);
        for n in 0..=depth {
            for (i, v) in residuals_at(&ensemble, &seq, kernel, n)?.into_iter().enumerate() {
                residual_column[i][n as usize] = Some(v);
            }
        }
    }
    for row in &mut rows {
        row.replicates = r;
    }

    let mut track_csv = String::from("replicate,n,M_n,ratio,residual\n");
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for (i, t) in tracks.iter().enumerate() {
        for (n, m) in t.values.iter().enumerate() {
            let _ = writeln!(
                track_csv,
                "{},{},{},{},{}",
                t.replicate,
                n,
                m,
                opt(ratio_column[i][n]),
                opt(residual_column[i][n])
            );
        }
    }
    Ok((rows, vec![("supercritical_tracks.csv".into(), track_csv)], Some(r)))
}

/// Regime detected from exact variances: with `v(n) = Var M_{G_n}(f~)`
/// under the stationary start, `v(2n) / (2^n v(n))` tends to `1`
/// sub-critically, to `2` critically and grows like `(2a^2)^n`
/// super-critically.
pub fn detect_regime(kernel: &BarKernel, n: u32) -> Result<(Regime, f64, f64)> {
    let f = Observable::identity(kernel)?;
    let var = |m: u32| -> Result<f64> { Ok(generation_moments(&f, m, InitialLaw::Stationary, kernel)?.variance()) };
    let (v1, v2) = (var(n)?, var(2 * n)?);
    let growth_ratio = v2 / (2f64.powi(n as i32) * v1);
    // Per-generation log2 growth of the variance: 1 below, 1 + log2(2a^2) above.
    let exponent = (v2 / v1).log2() / n as f64;
    let regime = if growth_ratio < 1.4 {
        Regime::Subcritical
    } else if growth_ratio < 3.0 {
        Regime::Critical
    } else {
        Regime::Supercritical
    };
    Ok((regime, growth_ratio, exponent))
}

fn regimes(config: &ExperimentConfig) -> Result<Vec<Row>> {
    let sigma = config.kernel.sigma;
    let section = &config.regimes;
    let n = section.depth;
    let mut rows = Vec::new();
    for spec in &section.a {
        let a = spec.value()?;
        let kernel = BarKernel::new(a, sigma)?;
        let (detected, ratio, exponent) = detect_regime(&kernel, n)?;
        let classified = kernel.regime();
        let base = Row {
            a,
            sigma,
            n,
            replicates: 0,
            statistic: String::new(),
            value: 0.0,
            target_exact: None,
            target_asymptotic: None,
            tolerance: None,
            pass: None,
        };
        rows.push(Row {
            statistic: format!("regime={}", detected.short_label()),
            value: exponent,
            pass: Some(detected == classified),
            ..base.clone()
        });
        rows.push(Row {
            statistic: "variance_growth_ratio".into(),
            value: ratio,
            ..base
        });
    }
    for &gap in &section.curve_gaps {
        let a = ((1.0 - gap) / 2.0).sqrt();
        let kernel = BarKernel::new(a, sigma)?;
        let f = Observable::identity(&kernel)?;
        let v = sigma_sub_g(&f, &kernel, 1e-9)?.value;
        let scaled = v * (1.0 - 2.0 * a * a);
        let target = sigma * sigma;
        rows.push(Row {
            a,
            sigma,
            n: 0,
            replicates: 0,
            statistic: "sigma_generation_times_gap".into(),
            value: scaled,
            target_exact: None,
            target_asymptotic: Some(target),
            tolerance: Some(0.01),
            pass: Some((scaled - target).abs() <= 0.01 * target),
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    const ORACLE: &str = r#"
[kernel]
a = 0.5
sigma = 1.0

[simulation]
initial = 0.0

[oracle]
n = 2
x = 0.0
"#;

    #[test]
    fn oracle_row_contains_second_moment() {
        let config = ExperimentConfig::from_toml_str(ORACLE).unwrap();
        let out = run_experiment(Subcommand::Oracle, &config, None).unwrap();
        let second = out.rows.iter().find(|r| r.statistic == "identity:second_moment").unwrap();
        assert_abs_diff_eq!(second.value, 6.0, epsilon = 1e-12);
        let csv = out.csv();
        assert!(csv.starts_with(CSV_HEADER));
        assert!(!csv.contains('\r'));
    }

    #[test]
    fn critical_names_and_regime_conflicts() {
        let c = ExperimentConfig::from_toml_str("[kernel]\na = \"-critical\"\n").unwrap();
        assert_eq!(c.kernel().unwrap().regime(), Regime::Critical);
        assert!(c.kernel().unwrap().a() < 0.0);
        let c = ExperimentConfig::from_toml_str("[kernel]\na = 0.5\nregime = \"super\"\n").unwrap();
        let err = c.kernel().unwrap_err();
        assert_eq!(exit_code(&err), 3);
        let c = ExperimentConfig::from_toml_str("[kernel]\na = 0.9\nregime = \"auto\"\n").unwrap();
        assert_eq!(c.kernel().unwrap().regime(), Regime::Supercritical);
    }

    #[test]
    fn parse_errors_map_to_exit_two() {
        for bad in ["[kernel]\n", "kernel = 3", "[kernel]\na = 0.5\nbogus = 1\n", "[kernel]\na = \"sideways\"\n"] {
            let err = ExperimentConfig::from_toml_str(bad).and_then(|c| c.kernel().map(|_| ())).unwrap_err();
            assert_eq!(exit_code(&err), 2, "{bad}");
        }
    }

    #[test]
    fn regime_sweep_labels() {
        let config = ExperimentConfig::from_toml_str(
            "[kernel]\na = 0.5\n[regimes]\na = [0.3, \"critical\", 0.9]\ncurve_gaps = []\n",
        )
        .unwrap();
        let out = run_experiment(Subcommand::Regimes, &config, None).unwrap();
        let labels: Vec<&str> = out
            .rows
            .iter()
            .filter(|r| r.statistic.starts_with("regime="))
            .map(|r| r.statistic.as_str())
            .collect();
        assert_eq!(labels, ["regime=sub", "regime=critical", "regime=super"]);
        assert!(out.all_passed());
    }

    #[test]
    fn hash_depends_on_seed_and_text() {
        let c = ExperimentConfig::from_toml_str(ORACLE).unwrap();
        assert_ne!(c.hash(1), c.hash(2));
        let d = ExperimentConfig::from_toml_str(&format!("{ORACLE}\n")).unwrap();
        assert_ne!(c.hash(1), d.hash(1));
        assert_eq!(c.hash(1).len(), 16);
    }

    #[test]
    fn wrong_regime_subcommands() {
        let c = ExperimentConfig::from_toml_str("[kernel]\na = 0.9\n").unwrap();
        assert_eq!(exit_code(&run_experiment(Subcommand::Clt, &c, None).unwrap_err()), 3);
        let c = ExperimentConfig::from_toml_str("[kernel]\na = 0.5\n").unwrap();
        assert_eq!(exit_code(&run_experiment(Subcommand::Supercritical, &c, None).unwrap_err()), 3);
    }

    #[test]
    fn zero_budget_reports_partial_output() {
        let c = ExperimentConfig::from_toml_str(
            "[kernel]\na = 0.5\n[simulation]\ndepth = 8\nreplicates = 5000\nbudget_seconds = 0.0\n",
        )
        .unwrap();
        let err = run_experiment(Subcommand::Simulate, &c, None).unwrap_err();
        assert_eq!(exit_code(&err), 4);
    }
}
