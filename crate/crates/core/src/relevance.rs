//! The betting game on confidence procedures and the normal-approximation
//! coverage curve for Bernoulli designs analyzed as if completely randomized.
//!
//! Player 2 bets that the interval covers on `A+` and that it misses on
//! `A-`, against odds set by `beta`. The expected return is
//! `(beta+ - beta) P(A+) + (beta - beta-) P(A-)`, where `beta+-` are the
//! conditional coverages on the two sets.

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use serde::Serialize;
use statrs::function::erf::{erfc, erfc_inv};
use statrs::function::factorial::ln_binomial;

use crate::design_maps::{CellKey, DesignMap, Statistic};
use crate::designs::Design;
use crate::error::{Error, Result};
use crate::estimators::Estimator;
use crate::oracle::{coverage, coverage_profile, CoverageMode, CoverageProfile};
use crate::population::{Assignment, Population};

type EventFn = dyn Fn(&Assignment) -> bool + Send + Sync;

/// Bet for coverage on `plus`, against it on `minus`.
#[derive(Clone)]
pub struct BettingStrategy {
    pub name: String,
    plus: Arc<EventFn>,
    minus: Arc<EventFn>,
}

impl fmt::Debug for BettingStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BettingStrategy({})", self.name)
    }
}

impl BettingStrategy {
    pub fn new(
        name: impl Into<String>,
        plus: impl Fn(&Assignment) -> bool + Send + Sync + 'static,
        minus: impl Fn(&Assignment) -> bool + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            plus: Arc::new(plus),
            minus: Arc::new(minus),
        }
    }

    /// Never bets.
    pub fn empty() -> Self {
        Self::new("empty", |_| false, |_| false)
    }

    /// `S(A, A^c)`.
    pub fn split(
        name: impl Into<String>,
        a: impl Fn(&Assignment) -> bool + Send + Sync + 'static,
    ) -> Self {
        let a: Arc<EventFn> = Arc::new(a);
        let b = Arc::clone(&a);
        Self {
            name: name.into(),
            plus: a,
            minus: Arc::new(move |z| !b(z)),
        }
    }

    /// Bets on cells of `w`: for on `plus` keys, against on `minus` keys.
    pub fn on_cells(
        name: impl Into<String>,
        w: Statistic,
        plus: Vec<CellKey>,
        minus: Vec<CellKey>,
    ) -> Self {
        let w2 = w.clone();
        Self::new(
            name,
            move |z| w.evaluate(z).is_ok_and(|k| plus.contains(&k)),
            move |z| w2.evaluate(z).is_ok_and(|k| minus.contains(&k)),
        )
    }

    pub fn bets_for(&self, z: &Assignment) -> bool {
        (self.plus)(z)
    }

    pub fn bets_against(&self, z: &Assignment) -> bool {
        (self.minus)(z)
    }
}

/// Which `beta` sets the odds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaChoice {
    /// `1 - 2 alpha`.
    #[default]
    Nominal,
    /// The procedure's attained marginal coverage.
    AttainedMarginal,
}

#[derive(Clone, Debug, Serialize)]
pub struct ExpectedReturn {
    pub value: f64,
    pub beta: f64,
    pub beta_plus: Option<f64>,
    pub beta_minus: Option<f64>,
    pub p_plus: f64,
    pub p_minus: f64,
    pub se: Option<f64>,
}

fn beta_for(choice: BetaChoice, alpha: f64, marginal: f64) -> f64 {
    match choice {
        BetaChoice::Nominal => 1.0 - 2.0 * alpha,
        BetaChoice::AttainedMarginal => marginal,
    }
}

fn nan_to_none(v: f64) -> Option<f64> {
    (!v.is_nan()).then_some(v)
}

/// Expected return from a coverage profile via the `beta+-` formula.
pub fn expected_return_from_profile(
    strategy: &BettingStrategy,
    profile: &CoverageProfile,
    beta: f64,
) -> Result<ExpectedReturn> {
    if let Some(e) = profile
        .entries
        .iter()
        .find(|e| strategy.bets_for(&e.z) && strategy.bets_against(&e.z))
    {
        return Err(Error::Parameter(format!(
            "strategy {} bets both ways on {}",
            strategy.name, e.z
        )));
    }
    let (p_plus, beta_plus) = profile.conditional(|z| strategy.bets_for(z));
    let (p_minus, beta_minus) = profile.conditional(|z| strategy.bets_against(z));
    let mut value = 0.0;
    if p_plus > 0.0 {
        value += (beta_plus - beta) * p_plus;
    }
    if p_minus > 0.0 {
        value += (beta - beta_minus) * p_minus;
    }
    Ok(ExpectedReturn {
        value,
        beta,
        beta_plus: nan_to_none(beta_plus),
        beta_minus: nan_to_none(beta_minus),
        p_plus,
        p_minus,
        se: None,
    })
}

/// Expected return as the probability-weighted sum of per-assignment payoffs.
pub fn direct_payoff(strategy: &BettingStrategy, profile: &CoverageProfile, beta: f64) -> f64 {
    profile
        .entries
        .iter()
        .map(|e| {
            if strategy.bets_for(&e.z) {
                e.prob * (e.covered - beta)
            } else if strategy.bets_against(&e.z) {
                e.prob * (beta - e.covered)
            } else {
                0.0
            }
        })
        .sum()
}

/// Expected return of `strategy` against the procedure `z -> C(z; H(z))`.
#[allow(clippy::too_many_arguments)]
pub fn expected_return(
    strategy: &BettingStrategy,
    eta0: &Design,
    map: &DesignMap,
    est: &Estimator,
    pop: &Population,
    alpha: f64,
    beta: BetaChoice,
    mode: CoverageMode,
) -> Result<ExpectedReturn> {
    match mode {
        CoverageMode::Exact => {
            let profile = coverage_profile(eta0, map, est, pop, alpha)?;
            let b = beta_for(beta, alpha, profile.marginal());
            expected_return_from_profile(strategy, &profile, b)
        }
        CoverageMode::MonteCarlo { .. } => {
            let s = strategy.clone();
            let side = Statistic::custom("bet_side", move |z| {
                CellKey(vec![match (s.bets_for(z), s.bets_against(z)) {
                    (true, true) => 2,
                    (true, false) => 1,
                    (false, true) => -1,
                    (false, false) => 0,
                }])
            });
            let rep = coverage(eta0, map, est, pop, alpha, Some(&side), mode)?;
            if rep.cells.iter().any(|c| c.cell_id == "2") {
                return Err(Error::Parameter(format!(
                    "strategy {} bets both ways",
                    strategy.name
                )));
            }
            let b = beta_for(beta, alpha, rep.marginal);
            let find = |id: &str| rep.cells.iter().find(|c| c.cell_id == id);
            let (mut value, mut var) = (0.0, 0.0);
            let (mut bp, mut bm, mut pp, mut pm) = (None, None, 0.0, 0.0);
            if let Some(c) = find("1") {
                value += (c.coverage - b) * c.cell_prob;
                var += (c.cell_prob * c.se.unwrap_or(0.0)).powi(2);
                bp = Some(c.coverage);
                pp = c.cell_prob;
            }
            if let Some(c) = find("-1") {
                value += (b - c.coverage) * c.cell_prob;
                var += (c.cell_prob * c.se.unwrap_or(0.0)).powi(2);
                bm = Some(c.coverage);
                pm = c.cell_prob;
            }
            Ok(ExpectedReturn {
                value,
                beta: b,
                beta_plus: bp,
                beta_minus: bm,
                p_plus: pp,
                p_minus: pm,
                se: Some(var.sqrt()),
            })
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RelevanceVerdict {
    pub probability: f64,
    pub conditional_coverage: f64,
    pub beta: f64,
    pub gap: f64,
    /// True when the conditional coverage on `A` differs from `beta` by more
    /// than the tolerance.
    pub relevant: bool,
}

/// Compares the conditional coverage on `A` with `beta` (exact enumeration).
#[allow(clippy::too_many_arguments)]
pub fn relevant_set_check(
    a: impl Fn(&Assignment) -> bool,
    eta0: &Design,
    map: &DesignMap,
    est: &Estimator,
    pop: &Population,
    alpha: f64,
    beta: BetaChoice,
    tolerance: f64,
) -> Result<RelevanceVerdict> {
    let profile = coverage_profile(eta0, map, est, pop, alpha)?;
    let (probability, conditional_coverage) = profile.conditional(a);
    if probability <= 0.0 {
        return Err(Error::ZeroProbability(
            "the betting set has probability zero".into(),
        ));
    }
    let b = beta_for(beta, alpha, profile.marginal());
    let gap = conditional_coverage - b;
    Ok(RelevanceVerdict {
        probability,
        conditional_coverage,
        beta: b,
        gap,
        relevant: gap.abs() > tolerance,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BetDirection {
    For,
    Against,
    None,
}

impl fmt::Display for BetDirection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BetDirection::For => "for",
            BetDirection::Against => "against",
            BetDirection::None => "none",
        })
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AuditRow {
    pub cell: CellKey,
    pub prob: f64,
    pub coverage: f64,
    pub direction: BetDirection,
    pub contribution: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct AdversarialStrategy {
    pub statistic: String,
    pub beta: f64,
    pub rows: Vec<AuditRow>,
    /// Sum of the cell contributions.
    pub expected_return: f64,
    /// Expected return recomputed through the `beta+-` formula.
    pub expected_return_formula: f64,
    /// Expected return recomputed from per-assignment payoffs.
    pub expected_return_direct: f64,
    /// `E[attained level of H(Z)'s oracle] - beta`; present for deterministic maps.
    pub atom_slack: Option<f64>,
    #[serde(skip)]
    strategy: Option<BettingStrategy>,
}

impl AdversarialStrategy {
    pub fn strategy(&self) -> &BettingStrategy {
        self.strategy
            .as_ref()
            .expect("built by adversarial_strategy")
    }

    /// CSV with columns `cell, cell_prob, coverage, bet_direction, contribution`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "cell",
            "cell_prob",
            "coverage",
            "bet_direction",
            "contribution",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.cell.to_string(),
                format!("{}", r.prob),
                format!("{}", r.coverage),
                r.direction.to_string(),
                format!("{}", r.contribution),
            ])?;
        }
        w.write_record([
            "total".to_string(),
            "1".into(),
            String::new(),
            String::new(),
            format!("{}", self.expected_return),
        ])?;
        w.flush()?;
        Ok(())
    }
}

/// Bets for coverage on `w`-cells covering more than `beta + tolerance` and
/// against it on cells covering less than `beta - tolerance`.
#[allow(clippy::too_many_arguments)]
pub fn adversarial_strategy(
    eta0: &Design,
    map: &DesignMap,
    est: &Estimator,
    pop: &Population,
    alpha: f64,
    w: &Statistic,
    beta: BetaChoice,
    tolerance: f64,
) -> Result<AdversarialStrategy> {
    let profile = coverage_profile(eta0, map, est, pop, alpha)?;
    let b = beta_for(beta, alpha, profile.marginal());
    let keys: Vec<CellKey> = profile
        .entries
        .iter()
        .map(|e| w.evaluate(&e.z))
        .collect::<Result<_>>()?;
    let mut cells: std::collections::BTreeMap<CellKey, (f64, f64)> = Default::default();
    for (e, k) in profile.entries.iter().zip(&keys) {
        let c = cells.entry(k.clone()).or_default();
        c.0 += e.prob;
        c.1 += e.prob * e.covered;
    }
    let mut rows = Vec::with_capacity(cells.len());
    let (mut plus, mut minus) = (Vec::new(), Vec::new());
    for (cell, (prob, hit)) in cells {
        let cov = hit / prob;
        let (direction, contribution) = if cov > b + tolerance {
            plus.push(cell.clone());
            (BetDirection::For, (cov - b) * prob)
        } else if cov < b - tolerance {
            minus.push(cell.clone());
            (BetDirection::Against, (b - cov) * prob)
        } else {
            (BetDirection::None, 0.0)
        };
        rows.push(AuditRow {
            cell,
            prob,
            coverage: cov,
            direction,
            contribution,
        });
    }
    let strategy =
        BettingStrategy::on_cells(format!("adversarial[{}]", w.name()), w.clone(), plus, minus);
    let expected_return: f64 = rows.iter().map(|r| r.contribution).sum();
    let expected_return_formula = expected_return_from_profile(&strategy, &profile, b)?.value;
    let expected_return_direct = direct_payoff(&strategy, &profile, b);
    let atom_slack = profile
        .entries
        .iter()
        .map(|e| {
            e.design_key
                .as_ref()
                .map(|k| e.prob * (profile.quantiles[k].attained - b))
        })
        .sum::<Option<f64>>();
    Ok(AdversarialStrategy {
        statistic: w.name(),
        beta: b,
        rows,
        expected_return,
        expected_return_formula,
        expected_return_direct,
        atom_slack,
        strategy: Some(strategy),
    })
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal quantile, `p` in `(0, 1)`.
pub fn normal_quantile(p: f64) -> f64 {
    -std::f64::consts::SQRT_2 * erfc_inv(2.0 * p)
}

/// Bernoulli design with a constant additive effect, analyzed through the
/// completely randomized variance `v(k) = V* (1/k + 1/(n-k))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AnalyticBernoulliModel {
    pub n: usize,
    pub pi: f64,
    pub vstar: f64,
}

impl AnalyticBernoulliModel {
    pub fn new(n: usize, pi: f64, vstar: f64) -> Result<Self> {
        if n < 2 {
            return Err(Error::Parameter(format!(
                "analytic model needs n >= 2, got {n}"
            )));
        }
        if !(pi > 0.0 && pi < 1.0) {
            return Err(Error::Parameter(format!("pi must lie in (0, 1), got {pi}")));
        }
        if !(vstar.is_finite() && vstar > 0.0) {
            return Err(Error::Parameter(format!(
                "V* must be positive, got {vstar}"
            )));
        }
        Ok(Self { n, pi, vstar })
    }

    pub fn v_k(&self, k: usize) -> f64 {
        self.vstar * (1.0 / k as f64 + 1.0 / (self.n - k) as f64)
    }

    /// Probability of `k` treated under the truncated Binomial, `k = 0..=n`.
    pub fn pmf(&self) -> Vec<f64> {
        truncated_binomial_pmf(self.n, self.pi)
    }

    /// `V = V* E[1/N1 + 1/(n - N1)]`.
    pub fn marginal_variance(&self) -> f64 {
        self.pmf()
            .iter()
            .enumerate()
            .skip(1)
            .take(self.n - 1)
            .map(|(k, p)| p * self.v_k(k))
            .sum()
    }
}

/// Binomial(n, pi) probabilities with `k = 0` and `k = n` removed and the rest renormalized.
pub fn truncated_binomial_pmf(n: usize, pi: f64) -> Vec<f64> {
    let mut pmf: Vec<f64> = (0..=n)
        .map(|k| {
            if k == 0 || k == n {
                0.0
            } else {
                (ln_binomial(n as u64, k as u64)
                    + k as f64 * pi.ln()
                    + (n - k) as f64 * (1.0 - pi).ln())
                .exp()
            }
        })
        .collect();
    let total: f64 = pmf.iter().sum();
    for p in &mut pmf {
        *p /= total;
    }
    pmf
}

#[derive(Clone, Debug, Serialize)]
pub struct AnalyticRow {
    pub k: usize,
    pub proportion: f64,
    pub v_k: f64,
    pub beta_k: f64,
    pub in_k: bool,
    pub pmf: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct AnalyticCurve {
    pub model: AnalyticBernoulliModel,
    pub z_multiplier: f64,
    pub v: f64,
    pub rows: Vec<AnalyticRow>,
}

impl AnalyticCurve {
    /// The set of `k` with `v(k) < V`.
    pub fn k_set(&self) -> Vec<usize> {
        self.rows.iter().filter(|r| r.in_k).map(|r| r.k).collect()
    }

    /// CSV with columns `k, proportion, v_k, beta_k, in_K`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["k", "proportion", "v_k", "beta_k", "in_K"])?;
        for r in &self.rows {
            w.write_record([
                r.k.to_string(),
                format!("{}", r.proportion),
                format!("{}", r.v_k),
                format!("{}", r.beta_k),
                r.in_k.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Normal-approximation conditional coverage `beta_k = 1 - 2 Phi(-z sqrt(V / v(k)))`
/// for `k = 1..n-1`.
pub fn analytic_beta_curve(model: &AnalyticBernoulliModel, z_multiplier: f64) -> AnalyticCurve {
    let pmf = model.pmf();
    let v = model.marginal_variance();
    let rows = (1..model.n)
        .map(|k| {
            let v_k = model.v_k(k);
            AnalyticRow {
                k,
                proportion: k as f64 / model.n as f64,
                v_k,
                beta_k: 1.0 - 2.0 * normal_cdf(-z_multiplier * (v / v_k).sqrt()),
                in_k: v_k < v,
                pmf: pmf[k],
            }
        })
        .collect();
    AnalyticCurve {
        model: *model,
        z_multiplier,
        v,
        rows,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::population::synthetic;

    #[test]
    fn normal_quantile_inverts_cdf() {
        assert!((normal_quantile(0.975) - 1.959963984540054).abs() < 1e-9);
        for p in [0.01, 0.025, 0.3, 0.5, 0.8, 0.99] {
            assert!((normal_cdf(normal_quantile(p)) - p).abs() < 1e-10, "p={p}");
        }
    }

    #[test]
    fn normal_cdf_reference_values() {
        // reference values to 15 digits
        let cases = [
            (0.0, 0.5),
            (1.0, 0.841344746068543),
            (-1.96, 0.0249978951482204),
            (1.96, 0.97500210485178),
            (-3.0, 0.00134989803163009),
            (2.5, 0.993790334674224),
            (-6.0, 9.86587645037698e-10),
        ];
        for (x, p) in cases {
            assert!((normal_cdf(x) - p).abs() < 1e-10, "x={x}");
        }
    }

    #[test]
    fn pmf_sums_to_one() {
        for (n, pi) in [(10, 0.5), (100, 0.5), (37, 0.2)] {
            let pmf = truncated_binomial_pmf(n, pi);
            assert!((pmf.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert_eq!(pmf[0], 0.0);
            assert_eq!(pmf[n], 0.0);
        }
    }

    #[test]
    fn curve_shape() {
        let model = AnalyticBernoulliModel::new(100, 0.5, 1.0).unwrap();
        let curve = analytic_beta_curve(&model, 1.96);
        let best = curve
            .rows
            .iter()
            .max_by(|a, b| a.beta_k.total_cmp(&b.beta_k))
            .unwrap();
        assert_eq!(best.k, 50);
        for r in &curve.rows {
            if r.in_k {
                assert!(r.beta_k > 0.95, "k={}", r.k);
            } else {
                assert!(r.beta_k <= 0.95, "k={}", r.k);
            }
        }
        assert!(curve.rows[9].beta_k < 0.95);
        assert!(curve.rows[49].beta_k > 0.95);
        // monotone in v(k)
        let mut by_v: Vec<&AnalyticRow> = curve.rows.iter().collect();
        by_v.sort_by(|a, b| a.v_k.total_cmp(&b.v_k));
        assert!(by_v.windows(2).all(|w| w[0].beta_k >= w[1].beta_k));
    }

    #[test]
    fn k_set_ignores_scale() {
        for n in [10, 50, 100] {
            let base =
                analytic_beta_curve(&AnalyticBernoulliModel::new(n, 0.5, 1.0).unwrap(), 1.96);
            let scaled =
                analytic_beta_curve(&AnalyticBernoulliModel::new(n, 0.5, 10.0).unwrap(), 1.96);
            assert_eq!(base.k_set(), scaled.k_set());
            assert!(!base.k_set().is_empty());
        }
    }

    fn bernoulli12() -> (Design, Population) {
        (
            Design::bernoulli_truncated(12, 0.5).unwrap(),
            synthetic::constant_effect(12, 1.0, 31).unwrap(),
        )
    }

    #[test]
    fn trivial_strategies() {
        let (eta0, pop) = bernoulli12();
        let map = DesignMap::constant(eta0.clone());
        let est = Estimator::DiffInMeans;
        let none = expected_return(
            &BettingStrategy::empty(),
            &eta0,
            &map,
            &est,
            &pop,
            0.025,
            BetaChoice::Nominal,
            CoverageMode::Exact,
        )
        .unwrap();
        assert_eq!(none.value, 0.0);
        let all = BettingStrategy::new("all", |_| true, |_| false);
        let r = expected_return(
            &all,
            &eta0,
            &map,
            &est,
            &pop,
            0.025,
            BetaChoice::Nominal,
            CoverageMode::Exact,
        )
        .unwrap();
        let marginal = coverage_profile(&eta0, &map, &est, &pop, 0.025)
            .unwrap()
            .marginal();
        assert!((r.value - (marginal - 0.95)).abs() < 1e-12);
        let calibrated = expected_return(
            &all,
            &eta0,
            &map,
            &est,
            &pop,
            0.025,
            BetaChoice::AttainedMarginal,
            CoverageMode::Exact,
        )
        .unwrap();
        assert!(calibrated.value.abs() < 1e-12);
        let overlapping = BettingStrategy::new("both", |_| true, |_| true);
        assert!(expected_return(
            &overlapping,
            &eta0,
            &map,
            &est,
            &pop,
            0.025,
            BetaChoice::Nominal,
            CoverageMode::Exact
        )
        .is_err());
    }

    #[test]
    fn low_variance_cells_are_relevant() {
        let (eta0, pop) = bernoulli12();
        let map = DesignMap::constant(eta0.clone());
        let a = |z: &Assignment| (4..=8).contains(&z.n_treated());
        let s = BettingStrategy::split("middle", a);
        let r = expected_return(
            &s,
            &eta0,
            &map,
            &Estimator::DiffInMeans,
            &pop,
            0.025,
            BetaChoice::Nominal,
            CoverageMode::Exact,
        )
        .unwrap();
        assert!(r.value > 0.0);
        let mc = expected_return(
            &s,
            &eta0,
            &map,
            &Estimator::DiffInMeans,
            &pop,
            0.025,
            BetaChoice::Nominal,
            CoverageMode::MonteCarlo {
                outer: 20_000,
                inner: None,
                seed: 2,
            },
        )
        .unwrap();
        assert!((mc.value - r.value).abs() <= 4.0 * mc.se.unwrap() + 1e-3);
    }

    #[test]
    fn relevant_set_examples() {
        let (eta0, pop) = bernoulli12();
        let est = Estimator::DiffInMeans;
        let constant = DesignMap::constant(eta0.clone());
        let edge = relevant_set_check(
            |z| z.n_treated() == 1,
            &eta0,
            &constant,
            &est,
            &pop,
            0.025,
            BetaChoice::Nominal,
            1e-9,
        )
        .unwrap();
        assert!(edge.conditional_coverage < 0.95);
        assert!(edge.relevant);
        let all = relevant_set_check(
            |_| true,
            &eta0,
            &constant,
            &est,
            &pop,
            0.025,
            BetaChoice::Nominal,
            1e-9,
        )
        .unwrap();
        let slack = coverage_profile(&eta0, &constant, &est, &pop, 0.025)
            .unwrap()
            .marginal()
            - 0.95;
        assert!((all.gap - slack).abs() < 1e-12);

        let conditional = DesignMap::conditional(eta0.clone(), Statistic::TreatedCount);
        for set in [vec![1usize], vec![2, 10], vec![5, 6, 7]] {
            let v = relevant_set_check(
                move |z| set.contains(&z.n_treated()),
                &eta0,
                &conditional,
                &est,
                &pop,
                0.025,
                BetaChoice::Nominal,
                1e-9,
            )
            .unwrap();
            assert!(v.conditional_coverage >= 0.95 - 1e-12);
        }
        assert!(matches!(
            relevant_set_check(
                |_| false,
                &eta0,
                &constant,
                &est,
                &pop,
                0.025,
                BetaChoice::Nominal,
                1e-9
            ),
            Err(Error::ZeroProbability(_))
        ));
    }

    #[test]
    fn adversarial_three_routes_agree() {
        let (eta0, pop) = bernoulli12();
        let est = Estimator::DiffInMeans;
        let w = Statistic::TreatedCount;
        let constant = adversarial_strategy(
            &eta0,
            &DesignMap::constant(eta0.clone()),
            &est,
            &pop,
            0.025,
            &w,
            BetaChoice::Nominal,
            0.0,
        )
        .unwrap();
        assert!(constant.expected_return > 0.0);
        assert!((constant.expected_return - constant.expected_return_formula).abs() < 1e-12);
        assert!((constant.expected_return - constant.expected_return_direct).abs() < 1e-12);

        let conditional = adversarial_strategy(
            &eta0,
            &DesignMap::conditional(eta0.clone(), w.clone()),
            &est,
            &pop,
            0.025,
            &w,
            BetaChoice::Nominal,
            0.0,
        )
        .unwrap();
        let slack = conditional.atom_slack.unwrap();
        assert!(conditional.expected_return.abs() <= slack + 1e-12);
        assert!(conditional
            .rows
            .iter()
            .all(|r| r.direction != BetDirection::Against));
    }

    #[test]
    fn calibrated_procedure_gives_empty_strategy() {
        // degenerate outcomes: every interval is the point tau and covers
        let eta0 = Design::bernoulli_truncated(6, 0.5).unwrap();
        let pop = Population::new(vec![1.0; 6], vec![1.0; 6]).unwrap();
        let adv = adversarial_strategy(
            &eta0,
            &DesignMap::constant(eta0.clone()),
            &Estimator::DiffInMeans,
            &pop,
            0.025,
            &Statistic::TreatedCount,
            BetaChoice::AttainedMarginal,
            1e-12,
        )
        .unwrap();
        assert!(adv.rows.iter().all(|r| r.direction == BetDirection::None));
        assert_eq!(adv.expected_return, 0.0);
        let mut buf = Vec::new();
        adv.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf)
            .unwrap()
            .starts_with("cell,cell_prob,coverage,bet_direction,contribution"));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(16))]

            #[test]
            fn split_return_identity(seed in 0u64..200, mask in 1u32..(1 << 9)) {
                let eta0 = Design::bernoulli_truncated(10, 0.5).unwrap();
                let pop = synthetic::heterogeneous(10, 0.5, 1.0, seed).unwrap();
                let map = DesignMap::constant(eta0.clone());
                let profile = coverage_profile(&eta0, &map, &Estimator::DiffInMeans, &pop, 0.025).unwrap();
                let a = move |z: &Assignment| mask >> (z.n_treated() - 1) & 1 == 1;
                let s = BettingStrategy::split("mask", a);
                let formula = expected_return_from_profile(&s, &profile, 0.95).unwrap().value;
                // signed cell sum over N1 cells
                let mut signed = 0.0;
                for k in 1..10usize {
                    let (p, cov) = profile.conditional(|z| z.n_treated() == k);
                    let sign = if mask >> (k - 1) & 1 == 1 { 1.0 } else { -1.0 };
                    signed += sign * (cov - 0.95) * p;
                }
                prop_assert!((formula - signed).abs() < 1e-12);
                prop_assert!((formula - direct_payoff(&s, &profile, 0.95)).abs() < 1e-12);
            }
        }
    }
}
