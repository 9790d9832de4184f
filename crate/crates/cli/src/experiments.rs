//! The named experiments behind each subcommand. Every function writes its
//! files into `out` and returns the computed result.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use asif_core::design_maps::unique_balance_violation;
use asif_core::designs::logistic_propensity;
use asif_core::estimators::balance;
use asif_core::matching::{
    fixtures, pairmap_conditionality_check, valid_matching_design, valid_matching_map,
};
use asif_core::oracle::{stratified_fixed_coverage, stratified_sampling_distribution};
use asif_core::population::synthetic;
use asif_core::relevance::{
    adversarial_strategy, analytic_beta_curve, normal_quantile, AdversarialStrategy,
    AnalyticBernoulliModel, AnalyticCurve, BetaChoice,
};
use asif_core::rng::{self, stable_hash};
use asif_core::{
    coverage, coverage_profile, fuzzy_interval, is_conditional, oracle_quantiles, Admissibility,
    Assignment, ConditionalityVerdict, Covariates, CoverageMode, CoverageReport, Design, DesignMap,
    Estimator, FuzzyInterval, FuzzyMode, GreedyMatcher, Matcher, Population, Statistic,
};
use log::info;
use serde::Serialize;

use crate::config::{ModeTag, Scenario, StatisticSpec};
use crate::error::{config, CliError, CliResult};

const SAMPLE_TAG: u64 = 0x5a;

pub(crate) fn write_file(out: &Path, name: &str, bytes: &[u8]) -> CliResult<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join(name), bytes)?;
    Ok(())
}

pub(crate) fn write_json<T: Serialize>(out: &Path, name: &str, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.into()))?;
    text.push('\n');
    write_file(out, name, text.as_bytes())
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> asif_core::Result<()>) -> CliResult<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

fn require_enumerable(d: &Design) -> CliResult<()> {
    if d.is_enumerable() {
        Ok(())
    } else {
        Err(config(format!(
            "{} has about {:.3e} assignments, too many to enumerate",
            d.label(),
            d.raw_support_size()
        )))
    }
}

// ---------------------------------------------------------------- coverage

#[derive(Serialize)]
struct CoverageFile<'a> {
    scenario: &'a Scenario,
    total_coverage_residual: f64,
    min_cell_coverage: f64,
    report: &'a CoverageReport,
}

/// Marginal and per-cell coverage for a scenario; writes `<prefix>.csv` and `<prefix>.json`.
pub fn run_coverage(
    scenario: &Scenario,
    base_dir: Option<&Path>,
    out: &Path,
) -> CliResult<CoverageReport> {
    let b = scenario.build(base_dir)?;
    info!(
        "coverage of {} under {} ({:?})",
        b.map.name(),
        b.eta0.label(),
        b.mode
    );
    let report = coverage(
        &b.eta0,
        &b.map,
        &b.estimator,
        &b.population,
        b.alpha,
        b.cells.as_ref(),
        b.mode,
    )?;
    let prefix = &scenario.output.prefix;
    write_file(
        out,
        &format!("{prefix}.csv"),
        &csv_bytes(|w| report.write_csv(w))?,
    )?;
    let file = CoverageFile {
        scenario,
        total_coverage_residual: report.total_coverage_residual(),
        min_cell_coverage: report.min_cell_coverage(),
        report: &report,
    };
    write_json(out, &format!("{prefix}.json"), &file)?;
    Ok(report)
}

// ---------------------------------------------------------------- figure 1

#[derive(Clone, Debug, Serialize)]
pub struct Figure1Params {
    pub n: usize,
    pub pi: f64,
    pub alpha: f64,
    pub population_seed: u64,
    pub seed: u64,
    /// Draws per retained `k` for the coverage estimate.
    pub replicates: usize,
    /// Draws per retained `k` for the oracle quantiles.
    pub quantile_replicates: usize,
    /// Values of `k` with a smaller cell probability are not simulated.
    pub min_cell_prob: f64,
    /// Cell probability above which MC and analytic curves are compared.
    pub compare_above: f64,
}

impl Default for Figure1Params {
    fn default() -> Self {
        Self {
            n: 100,
            pi: 0.5,
            alpha: 0.025,
            population_seed: 1,
            seed: 1,
            replicates: 10_000,
            quantile_replicates: 10_000,
            min_cell_prob: 1e-8,
            compare_above: 1e-4,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Figure1Row {
    pub k: usize,
    pub proportion: f64,
    pub pmf: f64,
    pub retained: bool,
    pub mc_coverage: Option<f64>,
    pub mc_se: Option<f64>,
    pub beta_k: f64,
    pub in_k: bool,
    /// `|mc - beta_k| <= 4 se`, for cells above the comparison threshold.
    pub agrees: Option<bool>,
}

#[derive(Clone, Debug, Serialize)]
pub struct PopulationNote {
    pub generator: &'static str,
    pub y0: &'static str,
    pub y1: &'static str,
    pub tau: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct Figure1 {
    pub params: Figure1Params,
    pub population: PopulationNote,
    pub vstar: f64,
    pub marginal_variance: f64,
    pub z_multiplier: f64,
    pub quantile_l: f64,
    pub quantile_u: f64,
    pub marginal_mc_coverage: f64,
    pub pmf_sum: f64,
    pub k_set: Vec<usize>,
    pub rows: Vec<Figure1Row>,
    #[serde(skip)]
    pub curve: Option<AnalyticCurve>,
}

impl Figure1 {
    pub fn row(&self, k: usize) -> Option<&Figure1Row> {
        self.rows.iter().find(|r| r.k == k)
    }

    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> asif_core::Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "k",
            "proportion",
            "pmf",
            "mc_coverage",
            "mc_se",
            "beta_k",
            "in_K",
            "retained",
        ])?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                r.k.to_string(),
                format!("{}", r.proportion),
                format!("{}", r.pmf),
                opt(r.mc_coverage),
                opt(r.mc_se),
                format!("{}", r.beta_k),
                r.in_k.to_string(),
                r.retained.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Sample variance of `y` with the `n - 1` denominator.
fn sample_variance(y: &[f64]) -> f64 {
    let n = y.len() as f64;
    let m = y.iter().sum::<f64>() / n;
    y.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0)
}

/// Conditional coverage given the number treated for the constant-map oracle
/// under a truncated Bernoulli design, by Monte Carlo stratified on `k`, with
/// the normal-approximation curve alongside.
pub fn figure1(p: &Figure1Params) -> CliResult<Figure1> {
    if p.replicates == 0 || p.quantile_replicates == 0 {
        return Err(config("figure1 needs positive replicate counts"));
    }
    if p.n < 4 {
        return Err(config("figure1 needs n >= 4"));
    }
    let pop = synthetic::constant_effect(p.n, 0.0, p.population_seed)?;
    let vstar = sample_variance(pop.y0());
    let model = AnalyticBernoulliModel::new(p.n, p.pi, vstar).map_err(|e| config(e.to_string()))?;
    let z_multiplier = normal_quantile(1.0 - p.alpha);
    let curve = analytic_beta_curve(&model, z_multiplier);
    let pmf = model.pmf();
    let retained: Vec<usize> = (1..p.n).filter(|&k| pmf[k] >= p.min_cell_prob).collect();
    if retained.is_empty() {
        return Err(config("no value of k passes min_cell_prob"));
    }
    let designs: Vec<Design> = retained
        .iter()
        .map(|&k| Design::completely_randomized(p.n, k))
        .collect::<asif_core::Result<_>>()?;
    let strata: Vec<(Design, f64)> = designs
        .iter()
        .cloned()
        .zip(retained.iter().map(|&k| pmf[k]))
        .collect();
    let est = Estimator::DiffInMeans;
    info!(
        "figure1: {} strata, {} quantile draws each",
        strata.len(),
        p.quantile_replicates
    );
    let dist = stratified_sampling_distribution(
        &strata,
        &est,
        &pop,
        p.quantile_replicates,
        stable_hash(&[p.seed as i64, 1]),
    )?;
    let (l, u) = oracle_quantiles(&dist, p.alpha)?;
    info!(
        "figure1: quantiles ({l}, {u}); {} coverage draws per k",
        p.replicates
    );
    let cov = stratified_fixed_coverage(
        &designs,
        &est,
        &pop,
        (l, u),
        dist.tolerance(),
        p.replicates,
        stable_hash(&[p.seed as i64, 2]),
    )?;

    let mut rows = Vec::with_capacity(p.n - 1);
    let (mut mass, mut hit) = (0.0, 0.0);
    for a in &curve.rows {
        let pos = retained.iter().position(|&k| k == a.k);
        let (mc, se) = match pos {
            Some(i) => (Some(cov[i].0), Some(cov[i].1)),
            None => (None, None),
        };
        if let Some(c) = mc {
            mass += a.pmf;
            hit += a.pmf * c;
        }
        let agrees = match (mc, se) {
            (Some(c), Some(s)) if a.pmf > p.compare_above => Some((c - a.beta_k).abs() <= 4.0 * s),
            _ => None,
        };
        rows.push(Figure1Row {
            k: a.k,
            proportion: a.proportion,
            pmf: a.pmf,
            retained: pos.is_some(),
            mc_coverage: mc,
            mc_se: se,
            beta_k: a.beta_k,
            in_k: a.in_k,
            agrees,
        });
    }
    Ok(Figure1 {
        params: p.clone(),
        population: PopulationNote {
            generator: "constant_effect",
            y0: "iid standard normal from the population seed",
            y1: "y0 + tau",
            tau: 0.0,
            seed: p.population_seed,
        },
        vstar,
        marginal_variance: curve.v,
        z_multiplier,
        quantile_l: l,
        quantile_u: u,
        marginal_mc_coverage: hit / mass,
        pmf_sum: pmf.iter().sum(),
        k_set: curve.k_set(),
        rows,
        curve: Some(curve),
    })
}

/// Runs [`figure1`] and writes `figure1.csv`, `figure1_analytic.csv` and `figure1.json`.
pub fn run_figure1(p: &Figure1Params, out: &Path) -> CliResult<Figure1> {
    let f = figure1(p)?;
    write_file(out, "figure1.csv", &csv_bytes(|w| f.write_csv(w))?)?;
    if let Some(curve) = &f.curve {
        write_file(
            out,
            "figure1_analytic.csv",
            &csv_bytes(|w| curve.write_csv(w))?,
        )?;
    }
    write_json(out, "figure1.json", &f)?;
    Ok(f)
}

// ---------------------------------------------------------------- zero coverage

#[derive(Clone, Debug, Serialize)]
pub struct BallSummary {
    pub threshold: f64,
    /// Assignments whose inclusive ball holds at least `threshold` points.
    pub assignments: usize,
    /// How many of those the inclusive-ball interval covers.
    pub covered: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct ZeroCoverageRow {
    pub z: String,
    pub balance: f64,
    pub strict_ball: usize,
    pub strict_covered: Option<bool>,
    pub inclusive_ball: usize,
    pub inclusive_covered: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct ZeroCoverage {
    pub n: usize,
    pub seed: u64,
    pub alpha: f64,
    pub unique_balance: bool,
    pub unique_balance_violation: Option<(String, String)>,
    /// Assignments with an empty strict ball, left out of the strict-ball run.
    pub excluded: Vec<String>,
    pub excluded_mass: f64,
    pub strict_coverage: f64,
    pub inclusive_coverage: f64,
    pub two_over_gamma: BallSummary,
    pub two_over_one_minus_gamma: BallSummary,
    pub rows: Vec<ZeroCoverageRow>,
}

impl ZeroCoverage {
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> asif_core::Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "z",
            "balance",
            "strict_ball",
            "strict_covered",
            "inclusive_ball",
            "inclusive_covered",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.z.clone(),
                format!("{}", r.balance),
                r.strict_ball.to_string(),
                r.strict_covered.map(|b| b.to_string()).unwrap_or_default(),
                r.inclusive_ball.to_string(),
                r.inclusive_covered.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `y0 = y1 = x`, CRD(n, n/2) and the "at least as balanced" ball maps.
pub fn zero_coverage(n: usize, seed: u64, alpha: f64) -> CliResult<ZeroCoverage> {
    if n < 4 || !n.is_multiple_of(2) {
        return Err(config("zero-coverage needs an even n >= 4"));
    }
    let pop = synthetic::balance_identity(n, seed)?;
    let x = pop.covariates().expect("generator attaches x").column(0);
    let crd = Design::completely_randomized(n, n / 2)?;
    require_enumerable(&crd)?;
    let est = Estimator::DiffInMeans;
    let violation = unique_balance_violation(&crd, &x)?;

    let strict = DesignMap::balance_ball(crd.clone(), x.clone(), true)?;
    let inclusive = DesignMap::balance_ball(crd.clone(), x.clone(), false)?;
    let support = crd.enumerate()?;
    let strict_sizes: Vec<usize> = support
        .iter()
        .map(|(z, _)| Ok(strict.cache_key(z)?.0[0] as usize))
        .collect::<asif_core::Result<_>>()?;
    let excluded: Vec<String> = support
        .iter()
        .zip(&strict_sizes)
        .filter(|(_, &s)| s == 0)
        .map(|((z, _), _)| z.to_string())
        .collect();
    let excluded_mass: f64 = support
        .iter()
        .zip(&strict_sizes)
        .filter(|(_, &s)| s == 0)
        .map(|((_, p), _)| p)
        .sum();
    let eta_strict = crd.condition(|z| strict.cache_key(z).is_ok_and(|k| k.0[0] > 0))?;

    let strict_profile = coverage_profile(&eta_strict, &strict, &est, &pop, alpha)?;
    let inclusive_profile = coverage_profile(&crd, &inclusive, &est, &pop, alpha)?;
    let mut rows = Vec::with_capacity(support.len());
    let mut strict_iter = strict_profile.entries.iter().peekable();
    for ((z, _), (&s, inc)) in support
        .iter()
        .zip(strict_sizes.iter().zip(&inclusive_profile.entries))
    {
        let strict_covered = match strict_iter.peek() {
            Some(e) if e.z == *z => {
                let c = e.covered > 0.5;
                strict_iter.next();
                Some(c)
            }
            _ => None,
        };
        rows.push(ZeroCoverageRow {
            z: z.to_string(),
            balance: balance(z, &x)?,
            strict_ball: s,
            strict_covered,
            inclusive_ball: inc.design_key.as_ref().map_or(0, |k| k.0[0] as usize),
            inclusive_covered: inc.covered > 0.5,
        });
    }
    let gamma = 1.0 - 2.0 * alpha;
    let summary = |threshold: f64| {
        let big: Vec<&ZeroCoverageRow> = rows
            .iter()
            .filter(|r| r.inclusive_ball as f64 >= threshold)
            .collect();
        BallSummary {
            threshold,
            assignments: big.len(),
            covered: big.iter().filter(|r| r.inclusive_covered).count(),
        }
    };
    Ok(ZeroCoverage {
        n,
        seed,
        alpha,
        unique_balance: violation.is_none(),
        unique_balance_violation: violation.map(|(a, b)| (a.to_string(), b.to_string())),
        excluded,
        excluded_mass,
        strict_coverage: strict_profile.marginal(),
        inclusive_coverage: inclusive_profile.marginal(),
        two_over_gamma: summary(2.0 / gamma),
        two_over_one_minus_gamma: summary(2.0 / (1.0 - gamma)),
        rows,
    })
}

/// Runs [`zero_coverage`] and writes `zero_coverage.csv` and `zero_coverage.json`.
pub fn run_zero_coverage(n: usize, seed: u64, alpha: f64, out: &Path) -> CliResult<ZeroCoverage> {
    let z = zero_coverage(n, seed, alpha)?;
    write_file(out, "zero_coverage.csv", &csv_bytes(|w| z.write_csv(w))?)?;
    #[derive(Serialize)]
    struct Summary<'a> {
        n: usize,
        seed: u64,
        alpha: f64,
        unique_balance: bool,
        unique_balance_violation: &'a Option<(String, String)>,
        excluded: &'a [String],
        excluded_mass: f64,
        strict_coverage: f64,
        inclusive_coverage: f64,
        two_over_gamma: &'a BallSummary,
        two_over_one_minus_gamma: &'a BallSummary,
    }
    write_json(
        out,
        "zero_coverage.json",
        &Summary {
            n: z.n,
            seed: z.seed,
            alpha: z.alpha,
            unique_balance: z.unique_balance,
            unique_balance_violation: &z.unique_balance_violation,
            excluded: &z.excluded,
            excluded_mass: z.excluded_mass,
            strict_coverage: z.strict_coverage,
            inclusive_coverage: z.inclusive_coverage,
            two_over_gamma: &z.two_over_gamma,
            two_over_one_minus_gamma: &z.two_over_one_minus_gamma,
        },
    )?;
    Ok(z)
}

// ---------------------------------------------------------------- betting audit

/// Scenario used by `betting-audit` when no config is given.
pub const DEFAULT_AUDIT_SCENARIO: &str = r#"
alpha = 0.025

[population]
source = "synthetic"
generator = "constant_effect"
n = 12
tau = 1.0
seed = 11

[design]
family = "bernoulli_truncated"
n = 12
pi = 0.5

[map]
kind = "constant"
"#;

#[derive(Clone, Debug)]
pub struct AuditParams {
    pub w: StatisticSpec,
    pub beta: BetaChoice,
    pub tolerance: f64,
}

impl Default for AuditParams {
    fn default() -> Self {
        Self {
            w: StatisticSpec::Name("n_treated".into()),
            beta: BetaChoice::Nominal,
            tolerance: 1e-9,
        }
    }
}

/// Adversarial betting strategy against the scenario's procedure; writes
/// `betting_audit.csv` and `betting_audit.json`.
pub fn run_betting_audit(
    scenario: &Scenario,
    base_dir: Option<&Path>,
    params: &AuditParams,
    out: &Path,
) -> CliResult<AdversarialStrategy> {
    if scenario.mode != ModeTag::Exact {
        return Err(config("betting-audit runs by exact enumeration only"));
    }
    let b = scenario.build(base_dir)?;
    require_enumerable(&b.eta0)?;
    let w = params.w.build(&b.population)?;
    let audit = adversarial_strategy(
        &b.eta0,
        &b.map,
        &b.estimator,
        &b.population,
        b.alpha,
        &w,
        params.beta,
        params.tolerance,
    )?;
    write_file(
        out,
        "betting_audit.csv",
        &csv_bytes(|wr| audit.write_csv(wr))?,
    )?;
    #[derive(Serialize)]
    struct File<'a> {
        scenario: &'a Scenario,
        map: String,
        audit: &'a AdversarialStrategy,
    }
    write_json(
        out,
        "betting_audit.json",
        &File {
            scenario,
            map: b.map.name(),
            audit: &audit,
        },
    )?;
    Ok(audit)
}

// ---------------------------------------------------------------- matching

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Fixture {
    /// Six units where swapping within pairs changes the greedy matching.
    Rematching,
    /// Units in identical-covariate pairs, so matching is exact.
    Exact,
}

#[derive(Clone, Debug, Serialize)]
pub struct MatchingParams {
    pub n: usize,
    pub alpha0: f64,
    pub alpha1: f64,
    pub tau: f64,
    pub alpha: f64,
    pub seed: u64,
    pub fixture: Option<Fixture>,
}

impl Default for MatchingParams {
    fn default() -> Self {
        Self {
            n: 10,
            alpha0: 0.0,
            alpha1: 1.0,
            tau: 1.0,
            alpha: 0.025,
            seed: 1,
            fixture: None,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct MapSummary {
    pub map: String,
    pub marginal_coverage: f64,
    pub min_cell_coverage: f64,
    pub is_conditional: bool,
    pub distinct_designs: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct MatchingDemo {
    pub params: MatchingParams,
    pub propensity: Vec<f64>,
    pub z: String,
    pub pairs: Vec<(usize, usize)>,
    pub unmatched: Vec<usize>,
    pub check_passes: bool,
    pub witness: Option<String>,
    pub witness_pairs: Option<Vec<(usize, usize)>>,
    /// Whether the paired design and the corrected design agree at the observed `z`.
    pub observed_designs_agree: bool,
    pub corrected_support: usize,
    pub naive: MapSummary,
    pub corrected: MapSummary,
    #[serde(skip)]
    pub covariates: Option<Covariates>,
}

fn summarize(
    eta0: &Design,
    map: &DesignMap,
    cells: &Statistic,
    est: &Estimator,
    pop: &Population,
    alpha: f64,
) -> CliResult<MapSummary> {
    let report = coverage(eta0, map, est, pop, alpha, Some(cells), CoverageMode::Exact)?;
    let verdict: ConditionalityVerdict = is_conditional(map, eta0)?;
    Ok(MapSummary {
        map: map.name(),
        marginal_coverage: report.marginal,
        min_cell_coverage: report.min_cell_coverage(),
        is_conditional: verdict.is_conditional,
        distinct_designs: verdict.cells,
    })
}

/// Greedy matching after a propensity-score Bernoulli assignment, analyzed as
/// if pair-randomized and with the corrected conditional design.
pub fn matching_demo(p: &MatchingParams) -> CliResult<MatchingDemo> {
    let (pop, z) = match p.fixture {
        None => {
            if p.n < 2 {
                return Err(config("matching-demo needs n >= 2"));
            }
            (synthetic::covariate_linked(p.n, 1, p.tau, p.seed)?, None)
        }
        Some(f) => {
            let (x, z) = match f {
                Fixture::Rematching => fixtures::rematching_layout(),
                Fixture::Exact => fixtures::exact_layout(),
            };
            let noise = synthetic::constant_effect(x.n(), 0.0, p.seed)?;
            let y0: Vec<f64> = x
                .column(0)
                .iter()
                .zip(noise.y0())
                .map(|(a, e)| a + 0.5 * e)
                .collect();
            let y1 = y0.iter().map(|v| v + p.tau).collect();
            (Population::new(y0, y1)?.with_covariates(x)?, Some(z))
        }
    };
    let x = pop.covariates().expect("covariates attached").clone();
    let propensity = logistic_propensity(&x, p.alpha0, &[p.alpha1])?;
    let eta0 = Design::bernoulli_propensity(propensity.clone(), Admissibility::BothArms)?;
    require_enumerable(&eta0)?;
    let z = match z {
        Some(z) => z,
        None => eta0.sample(&mut rng::stream(p.seed, &[SAMPLE_TAG])),
    };
    let matcher: Arc<dyn Matcher> = Arc::new(GreedyMatcher);
    let check = pairmap_conditionality_check(&z, &x, matcher.as_ref())?;
    let corrected_design = valid_matching_design(&z, &eta0, &x, matcher.as_ref())?;
    let naive_map = DesignMap::pair_match(x.clone(), matcher.clone());
    let naive_design = naive_map.design_for(&z)?;
    let agree = corrected_design.same_distribution(&naive_design, 1e-12)?;
    let est = Estimator::DiffInMeans;
    let cells = Statistic::Matching {
        x: x.clone(),
        matcher: matcher.clone(),
    };
    let corrected_map = valid_matching_map(eta0.clone(), x.clone(), matcher.clone());
    let naive = summarize(&eta0, &naive_map, &cells, &est, &pop, p.alpha)?;
    let corrected = summarize(&eta0, &corrected_map, &cells, &est, &pop, p.alpha)?;
    Ok(MatchingDemo {
        params: p.clone(),
        propensity,
        z: z.to_string(),
        pairs: check.observed.unordered(),
        unmatched: check.observed.unmatched.clone(),
        check_passes: check.passes,
        witness: check.witness.clone(),
        witness_pairs: check.witness_matching.as_ref().map(|m| m.unordered()),
        observed_designs_agree: agree,
        corrected_support: corrected_design.support_len()?,
        naive,
        corrected,
        covariates: Some(x),
    })
}

/// Runs [`matching_demo`] and writes `matching_demo.json`, `matching_pairs.csv`
/// and `matching_coverage.csv`.
pub fn run_matching_demo(p: &MatchingParams, out: &Path) -> CliResult<MatchingDemo> {
    let d = matching_demo(p)?;
    let x = d.covariates.as_ref().expect("set by matching_demo");
    let z: Assignment = d.z.parse()?;
    let observed = GreedyMatcher.pairs(&z, x)?;
    write_file(
        out,
        "matching_pairs.csv",
        &csv_bytes(|w| observed.write_csv(x, w))?,
    )?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "map",
        "marginal_coverage",
        "min_cell_coverage",
        "is_conditional",
        "distinct_designs",
    ])
    .map_err(asif_core::Error::from)?;
    for s in [&d.naive, &d.corrected] {
        w.write_record([
            s.map.clone(),
            format!("{}", s.marginal_coverage),
            format!("{}", s.min_cell_coverage),
            s.is_conditional.to_string(),
            s.distinct_designs.to_string(),
        ])
        .map_err(asif_core::Error::from)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Io(e.into_error()))?;
    write_file(out, "matching_coverage.csv", &bytes)?;
    write_json(out, "matching_demo.json", &d)?;
    Ok(d)
}

// ---------------------------------------------------------------- fuzzy

#[derive(Clone, Debug, Serialize)]
pub struct FuzzyRun {
    pub z: String,
    pub tau_hat: f64,
    pub tau: f64,
    pub map: String,
    pub membership_at_tau: f64,
    pub fuzzy: FuzzyInterval,
}

/// Fuzzy interval at `z` (or at a draw from the design when `z` is absent);
/// writes `fuzzy.csv` and `fuzzy.json`.
pub fn run_fuzzy(
    scenario: &Scenario,
    base_dir: Option<&Path>,
    z: Option<&str>,
    out: &Path,
) -> CliResult<FuzzyRun> {
    let b = scenario.build(base_dir)?;
    let z: Assignment = match z {
        Some(s) => s
            .parse()
            .map_err(|e| config(format!("bad assignment {s:?}: {e}")))?,
        None => b
            .eta0
            .sample(&mut rng::stream(scenario.seed, &[SAMPLE_TAG])),
    };
    if z.len() != b.population.n() {
        return Err(config(format!(
            "assignment has {} units, population has {}",
            z.len(),
            b.population.n()
        )));
    }
    if !b.eta0.contains(&z)? {
        return Err(asif_core::Error::ZeroProbability(format!(
            "{z} is not in the support of {}",
            b.eta0.label()
        ))
        .into());
    }
    let mode = match scenario.mode {
        ModeTag::Exact => FuzzyMode::Exact,
        ModeTag::Mc => FuzzyMode::MonteCarlo {
            draws: scenario.replicates,
            seed: scenario.seed,
        },
    };
    let f = fuzzy_interval(&z, &b.map, &b.estimator, &b.population, b.alpha, None, mode)?;
    let run = FuzzyRun {
        z: z.to_string(),
        tau_hat: b.estimator.evaluate(&z, &b.population)?,
        tau: b.population.tau(),
        map: b.map.name(),
        membership_at_tau: f.membership_at(b.population.tau()),
        fuzzy: f,
    };
    write_file(out, "fuzzy.csv", &csv_bytes(|w| run.fuzzy.write_csv(w))?)?;
    write_json(out, "fuzzy.json", &run)?;
    Ok(run)
}
