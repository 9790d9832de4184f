//! Quick versions of the acceptance checks, run by the `selftest` command.

use std::path::Path;

use asif_core::oracle::variance_decomposition_check;
use asif_core::population::synthetic;
use asif_core::relevance::{
    adversarial_strategy, analytic_beta_curve, AnalyticBernoulliModel, BetaChoice,
};
use asif_core::rng::{self, stable_hash};
use asif_core::{
    coverage, oracle_quantiles, CoverageMode, Design, DesignMap, Estimator, SamplingDistribution,
    Statistic,
};
use rand::Rng;
use serde::Serialize;

use crate::error::{CliError, CliResult};
use crate::experiments::{self, write_file, Figure1Params, Fixture, MatchingParams};

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub threshold: String,
    pub pass: bool,
}

fn check(name: &str, value: f64, threshold: impl Into<String>, pass: bool) -> Check {
    Check {
        name: name.into(),
        value,
        threshold: threshold.into(),
        pass,
    }
}

/// Runs every check; `seed` drives the random populations and distributions.
pub fn checks(seed: u64) -> CliResult<Vec<Check>> {
    let alpha = 0.025;
    let est = Estimator::DiffInMeans;
    let mut out = Vec::new();

    let mut worst = f64::INFINITY;
    let mut residual = 0.0f64;
    for s in 0..5 {
        let pop = synthetic::heterogeneous(10, 1.0, 0.5, stable_hash(&[seed as i64, s]))?;
        let eta0 = Design::bernoulli_truncated(10, 0.5)?;
        let map = DesignMap::conditional(eta0.clone(), Statistic::TreatedCount);
        let r = coverage(&eta0, &map, &est, &pop, alpha, None, CoverageMode::Exact)?;
        worst = worst.min(r.min_cell_coverage()).min(r.marginal);
        residual = residual.max(r.total_coverage_residual());
    }
    out.push(check(
        "conditional_map_min_cell_coverage",
        worst,
        ">= 0.95",
        worst >= 0.95,
    ));

    let pop = synthetic::equal_blocks(synthetic::heterogeneous(8, 1.0, 0.5, seed)?, 2)?;
    let blocks = pop.blocks().expect("blocks").clone();
    let eta0 = Design::completely_randomized(8, 4)?
        .with_admissibility(asif_core::Admissibility::BothArmsPerBlock(blocks.clone()))?;
    let map = DesignMap::conditional(eta0.clone(), Statistic::BlockTreatedCounts(blocks.clone()));
    let r = coverage(
        &eta0,
        &map,
        &Estimator::PostStratified(blocks),
        &pop,
        alpha,
        None,
        CoverageMode::Exact,
    )?;
    residual = residual.max(r.total_coverage_residual());
    out.push(check(
        "post_stratified_min_cell_coverage",
        r.min_cell_coverage(),
        ">= 0.95",
        r.min_cell_coverage() >= 0.95,
    ));

    let z = experiments::zero_coverage(10, seed, alpha)?;
    out.push(check(
        "strict_ball_coverage",
        z.strict_coverage,
        "== 0",
        z.strict_coverage == 0.0,
    ));
    out.push(check(
        "unique_balance",
        f64::from(u8::from(z.unique_balance)),
        "== 1",
        z.unique_balance,
    ));

    let pop = synthetic::covariate_linked(8, 1, 0.7, seed)?;
    let x = pop.covariates().expect("covariates").column(0);
    let eta0 = Design::completely_randomized(8, 4)?;
    let map = DesignMap::stochastic_window(eta0.clone(), x, 0.3)?;
    let r = coverage(&eta0, &map, &est, &pop, alpha, None, CoverageMode::Exact)?;
    residual = residual.max(r.total_coverage_residual());
    out.push(check(
        "stochastic_window_coverage",
        r.marginal,
        ">= 0.95",
        r.marginal >= 0.95,
    ));

    out.push(check(
        "total_coverage_residual",
        residual,
        "<= 1e-12",
        residual <= 1e-12,
    ));

    let mut rel = 0.0f64;
    for s in 0..5 {
        let pop = synthetic::heterogeneous(8, 0.5, 0.7, stable_hash(&[seed as i64, 100 + s]))?;
        let d = variance_decomposition_check(
            &Design::bernoulli_truncated(8, 0.5)?,
            &est,
            &pop,
            &Statistic::TreatedCount,
        )?;
        rel = rel.max(d.relative_residual);
    }
    out.push(check(
        "variance_decomposition_residual",
        rel,
        "<= 1e-12",
        rel <= 1e-12,
    ));

    let pop = synthetic::constant_effect(12, 1.0, seed)?;
    let eta0 = Design::bernoulli_truncated(12, 0.5)?;
    let constant = adversarial_strategy(
        &eta0,
        &DesignMap::constant(eta0.clone()),
        &est,
        &pop,
        alpha,
        &Statistic::TreatedCount,
        BetaChoice::Nominal,
        1e-9,
    )?;
    out.push(check(
        "constant_map_expected_return",
        constant.expected_return,
        "> 0",
        constant.expected_return > 0.0,
    ));
    let cond = adversarial_strategy(
        &eta0,
        &DesignMap::conditional(eta0.clone(), Statistic::TreatedCount),
        &est,
        &pop,
        alpha,
        &Statistic::TreatedCount,
        BetaChoice::Nominal,
        1e-9,
    )?;
    let slack = cond.atom_slack.unwrap_or(0.0);
    out.push(check(
        "conditional_map_return_within_slack",
        cond.expected_return.abs() - slack,
        "<= 1e-12",
        cond.expected_return.abs() <= slack + 1e-12,
    ));

    let mut same = true;
    for n in [10, 50, 100] {
        let a = analytic_beta_curve(&AnalyticBernoulliModel::new(n, 0.5, 1.0)?, 1.96).k_set();
        let b = analytic_beta_curve(&AnalyticBernoulliModel::new(n, 0.5, 10.0)?, 1.96).k_set();
        same &= a == b;
    }
    out.push(check(
        "k_set_invariant_to_vstar",
        f64::from(u8::from(same)),
        "== 1",
        same,
    ));

    let m = experiments::matching_demo(&MatchingParams {
        fixture: Some(Fixture::Rematching),
        ..Default::default()
    })?;
    let witnessed = !m.check_passes && m.witness.is_some();
    out.push(check(
        "rematching_fixture_has_witness",
        f64::from(u8::from(witnessed)),
        "== 1",
        witnessed,
    ));
    let m = experiments::matching_demo(&MatchingParams {
        seed,
        ..Default::default()
    })?;
    out.push(check(
        "corrected_matching_coverage",
        m.corrected.marginal_coverage,
        ">= 0.95",
        m.corrected.marginal_coverage >= 0.95 && m.corrected.is_conditional,
    ));

    let mut violations = 0usize;
    let mut rng = rng::stream(seed, &[0x51]);
    for _ in 0..200 {
        let atoms: Vec<(f64, f64)> = (0..rng.random_range(1..30))
            .map(|_| (rng.random_range(-5..5) as f64, rng.random::<f64>()))
            .collect();
        let dist = SamplingDistribution::from_weighted(atoms, true, None)?;
        for a in [0.01, 0.025, 0.05] {
            let (l, u) = oracle_quantiles(&dist, a)?;
            if dist.mass_between(l, u) < 1.0 - 2.0 * a - 1e-12 {
                violations += 1;
            }
        }
    }
    out.push(check(
        "quantile_property_violations",
        violations as f64,
        "== 0",
        violations == 0,
    ));

    let f = experiments::figure1(&Figure1Params {
        seed,
        ..Default::default()
    })?;
    let tail_ok = [30, 70].iter().all(|&k| {
        f.row(k)
            .and_then(|r| r.mc_coverage)
            .is_some_and(|c| c < 0.95)
    });
    let worst_tail = [30, 70]
        .iter()
        .filter_map(|&k| f.row(k).and_then(|r| r.mc_coverage))
        .fold(0.0, f64::max);
    out.push(check(
        "figure1_tails_below_nominal",
        worst_tail,
        "< 0.95",
        tail_ok,
    ));
    let disagreements = f.rows.iter().filter(|r| r.agrees == Some(false)).count();
    out.push(check(
        "figure1_analytic_disagreements",
        disagreements as f64,
        "== 0",
        disagreements == 0,
    ));
    Ok(out)
}

/// Writes `selftest.csv` and fails with a threshold error if any check fails.
pub fn run_selftest(seed: u64, out: &Path) -> CliResult<Vec<Check>> {
    let all = checks(seed)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let row = |w: &mut csv::Writer<Vec<u8>>, r: [String; 4]| {
        w.write_record(r).map_err(asif_core::Error::from)
    };
    row(
        &mut w,
        [
            "check".into(),
            "value".into(),
            "threshold".into(),
            "pass".into(),
        ],
    )?;
    for c in &all {
        row(
            &mut w,
            [
                c.name.clone(),
                format!("{}", c.value),
                c.threshold.clone(),
                c.pass.to_string(),
            ],
        )?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Io(e.into_error()))?;
    write_file(out, "selftest.csv", &bytes)?;
    let failed: Vec<&str> = all
        .iter()
        .filter(|c| !c.pass)
        .map(|c| c.name.as_str())
        .collect();
    if failed.is_empty() {
        Ok(all)
    } else {
        Err(CliError::Threshold(failed.join(", ")))
    }
}
