//! Oracle intervals and their coverage.
//!
//! The oracle interval for `tau` under design `d` is
//! `[tau_hat(z) - U, tau_hat(z) - L]`, where `L` and `U` are lower and upper
//! `alpha` quantiles of `tau_hat(Z) - tau` with `Z ~ d`. It covers `tau`
//! exactly when `L <= tau_hat(z) - tau <= U`, which is how coverage is
//! evaluated here.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::design_maps::{CellKey, DesignMap, Statistic};
use crate::designs::Design;
use crate::error::{Error, Result};
use crate::estimators::Estimator;
use crate::population::{Assignment, Population};
use crate::rng;
use crate::PROB_TOL;

const OUTER_TAG: u64 = 0x6f75_7465;
const INNER_TAG: u64 = 0x696e_6e65;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DistributionMode {
    Exact,
    MonteCarlo { replicates: usize, seed: u64 },
}

/// Distribution of `tau_hat(Z) - tau`, as sorted atoms with merged equal values.
#[derive(Clone, Debug, Serialize)]
pub struct SamplingDistribution {
    atoms: Vec<(f64, f64)>,
    exact: bool,
    replicates: Option<usize>,
    tol: f64,
}

fn merge_tolerance(values: impl Iterator<Item = f64>) -> f64 {
    1e-10 * (1.0 + values.fold(0.0f64, |m, v| m.max(v.abs())))
}

impl SamplingDistribution {
    /// Builds from `(value, weight)` pairs, merging values equal up to a
    /// relative tolerance and normalizing the weights.
    pub fn from_weighted(
        mut pairs: Vec<(f64, f64)>,
        exact: bool,
        replicates: Option<usize>,
    ) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::DegenerateDesign(
                "sampling distribution with no atoms".into(),
            ));
        }
        if pairs
            .iter()
            .any(|(v, w)| !v.is_finite() || !(w.is_finite() && *w >= 0.0))
        {
            return Err(Error::Parameter(
                "atoms need finite values and non-negative weights".into(),
            ));
        }
        let tol = merge_tolerance(pairs.iter().map(|p| p.0));
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut atoms: Vec<(f64, f64)> = Vec::new();
        let mut anchor = f64::NEG_INFINITY;
        for (v, w) in pairs {
            match atoms.last_mut() {
                Some(last) if v - anchor <= tol => last.1 += w,
                _ => {
                    anchor = v;
                    atoms.push((v, w));
                }
            }
        }
        atoms.retain(|a| a.1 > 0.0);
        let total: f64 = atoms.iter().map(|a| a.1).sum();
        if total <= 0.0 {
            return Err(Error::DegenerateDesign(
                "sampling distribution with zero mass".into(),
            ));
        }
        for a in &mut atoms {
            a.1 /= total;
        }
        Ok(Self {
            atoms,
            exact,
            replicates,
            tol,
        })
    }

    pub fn atoms(&self) -> &[(f64, f64)] {
        &self.atoms
    }

    pub fn is_exact(&self) -> bool {
        self.exact
    }

    pub fn replicates(&self) -> Option<usize> {
        self.replicates
    }

    /// Tolerance used to merge values and to compare against atom boundaries.
    pub fn tolerance(&self) -> f64 {
        self.tol
    }

    pub fn mean(&self) -> f64 {
        self.atoms.iter().map(|(v, p)| v * p).sum()
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.atoms.iter().map(|(v, p)| p * (v - m) * (v - m)).sum()
    }

    /// `P(lo <= D <= hi)` using the atom tolerance on both ends.
    pub fn mass_between(&self, lo: f64, hi: f64) -> f64 {
        self.atoms
            .iter()
            .filter(|(v, _)| *v >= lo - self.tol && *v <= hi + self.tol)
            .map(|a| a.1)
            .sum()
    }
}

/// Distribution of `tau_hat(Z) - tau` under `d`.
pub fn sampling_distribution(
    d: &Design,
    est: &Estimator,
    pop: &Population,
    mode: DistributionMode,
) -> Result<SamplingDistribution> {
    let tau = pop.tau();
    match mode {
        DistributionMode::Exact => {
            let pairs: Vec<(f64, f64)> = d
                .enumerate()?
                .par_iter()
                .map(|(z, p)| Ok((est.evaluate(z, pop)? - tau, *p)))
                .collect::<Result<_>>()?;
            SamplingDistribution::from_weighted(pairs, true, None)
        }
        DistributionMode::MonteCarlo { replicates, seed } => {
            if replicates == 0 {
                return Err(Error::Parameter(
                    "Monte Carlo needs at least one replicate".into(),
                ));
            }
            let pairs: Vec<(f64, f64)> = (0..replicates as u64)
                .into_par_iter()
                .map(|r| {
                    let z = d.sample(&mut rng::stream(seed, &[r]));
                    Ok((est.evaluate(&z, pop)? - tau, 1.0))
                })
                .collect::<Result<_>>()?;
            SamplingDistribution::from_weighted(pairs, false, Some(replicates))
        }
    }
}

/// Distribution mixing several designs with the given weights, each
/// represented by `replicates` draws.
pub fn stratified_sampling_distribution(
    strata: &[(Design, f64)],
    est: &Estimator,
    pop: &Population,
    replicates: usize,
    seed: u64,
) -> Result<SamplingDistribution> {
    if replicates == 0 || strata.is_empty() {
        return Err(Error::Parameter(
            "stratified sampling needs strata and replicates".into(),
        ));
    }
    let tau = pop.tau();
    let per_stratum: Vec<Vec<(f64, f64)>> = strata
        .par_iter()
        .enumerate()
        .map(|(s, (design, weight))| {
            let w = weight / replicates as f64;
            (0..replicates as u64)
                .map(|r| {
                    let z = design.sample(&mut rng::stream(seed, &[s as u64, r]));
                    Ok((est.evaluate(&z, pop)? - tau, w))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    SamplingDistribution::from_weighted(
        per_stratum.concat(),
        false,
        Some(replicates * strata.len()),
    )
}

/// Oracle quantiles `(L, U)`: `U` is the smallest atom with `P(D > U) <= alpha`
/// and `L` the largest atom with `P(D < L) <= alpha`.
pub fn oracle_quantiles(dist: &SamplingDistribution, alpha: f64) -> Result<(f64, f64)> {
    check_alpha(alpha)?;
    let atoms = dist.atoms();
    let mut cum = 0.0;
    let mut upper = atoms[atoms.len() - 1].0;
    for &(v, p) in atoms {
        cum += p;
        if 1.0 - cum <= alpha + PROB_TOL {
            upper = v;
            break;
        }
    }
    let mut below = 0.0;
    let mut lower = atoms[0].0;
    for &(v, p) in atoms {
        if below <= alpha + PROB_TOL {
            lower = v;
        } else {
            break;
        }
        below += p;
    }
    Ok((lower, upper))
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 0.5 {
        Ok(())
    } else {
        Err(Error::Parameter(format!(
            "alpha must lie in (0, 0.5), got {alpha}"
        )))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct OracleInterval {
    pub lower: f64,
    pub upper: f64,
    pub l: f64,
    pub u: f64,
    pub center: f64,
}

impl OracleInterval {
    pub fn contains(&self, theta: f64) -> bool {
        theta >= self.lower && theta <= self.upper
    }

    pub fn length(&self) -> f64 {
        self.upper - self.lower
    }
}

/// `[tau_hat(z) - U, tau_hat(z) - L]` under design `d`.
///
/// Unless `allow_outside_support` is set, `z` must be in the support of `d`.
pub fn oracle_interval(
    z: &Assignment,
    d: &Design,
    est: &Estimator,
    pop: &Population,
    alpha: f64,
    allow_outside_support: bool,
) -> Result<OracleInterval> {
    if !allow_outside_support && !d.contains(z)? {
        return Err(Error::ZeroProbability(format!(
            "{z} is not in the support of {}",
            d.label()
        )));
    }
    let dist = sampling_distribution(d, est, pop, DistributionMode::Exact)?;
    let (l, u) = oracle_quantiles(&dist, alpha)?;
    Ok(interval_from(est.evaluate(z, pop)?, l, u))
}

fn interval_from(center: f64, l: f64, u: f64) -> OracleInterval {
    OracleInterval {
        lower: center - u,
        upper: center - l,
        l,
        u,
        center,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CoverageMode {
    Exact,
    /// `outer` draws of the observed assignment; analysis-design quantiles
    /// exact when `inner` is `None`, otherwise from `inner` draws.
    MonteCarlo {
        outer: usize,
        inner: Option<usize>,
        seed: u64,
    },
}

/// Oracle quantiles of one analysis design together with the level they attain.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct QuantileInfo {
    pub l: f64,
    pub u: f64,
    pub attained: f64,
    pub tol: f64,
}

impl QuantileInfo {
    pub fn covers(&self, deviation: f64) -> bool {
        deviation >= self.l - self.tol && deviation <= self.u + self.tol
    }

    pub fn interval(&self, center: f64) -> OracleInterval {
        interval_from(center, self.l, self.u)
    }
}

fn quantile_info(
    design: &Design,
    est: &Estimator,
    pop: &Population,
    alpha: f64,
    inner: Option<(usize, u64)>,
) -> Result<QuantileInfo> {
    let mode = match inner {
        None => DistributionMode::Exact,
        Some((replicates, seed)) => DistributionMode::MonteCarlo { replicates, seed },
    };
    let dist = sampling_distribution(design, est, pop, mode)?;
    let (l, u) = oracle_quantiles(&dist, alpha)?;
    Ok(QuantileInfo {
        l,
        u,
        attained: dist.mass_between(l, u),
        tol: dist.tolerance(),
    })
}

/// Per-assignment coverage of a procedure over the support of `eta0`.
#[derive(Clone, Debug)]
pub struct ProfileEntry {
    pub z: Assignment,
    pub prob: f64,
    /// Probability over the auxiliary draw that the interval covers; 0 or 1
    /// for deterministic maps.
    pub covered: f64,
    /// Cache key of the analysis design (deterministic maps only).
    pub design_key: Option<CellKey>,
    pub deviation: f64,
}

#[derive(Clone, Debug)]
pub struct CoverageProfile {
    pub entries: Vec<ProfileEntry>,
    pub quantiles: HashMap<CellKey, QuantileInfo>,
}

impl CoverageProfile {
    pub fn marginal(&self) -> f64 {
        self.entries.iter().map(|e| e.prob * e.covered).sum()
    }

    /// `(P(A), P(covered | A))` for an event `A` on assignments.
    pub fn conditional(&self, event: impl Fn(&Assignment) -> bool) -> (f64, f64) {
        let (mut mass, mut hit) = (0.0, 0.0);
        for e in self.entries.iter().filter(|e| event(&e.z)) {
            mass += e.prob;
            hit += e.prob * e.covered;
        }
        (mass, if mass > 0.0 { hit / mass } else { f64::NAN })
    }
}

/// Exact coverage of every assignment in the support of `eta0`.
pub fn coverage_profile(
    eta0: &Design,
    map: &DesignMap,
    est: &Estimator,
    pop: &Population,
    alpha: f64,
) -> Result<CoverageProfile> {
    check_alpha(alpha)?;
    let support = eta0.enumerate()?;
    let tau = pop.tau();
    let deviations: Vec<f64> = support
        .par_iter()
        .map(|(z, _)| Ok(est.evaluate(z, pop)? - tau))
        .collect::<Result<_>>()?;

    if map.is_stochastic() {
        let segments: Vec<Vec<(CellKey, f64)>> = support
            .par_iter()
            .map(|(z, _)| {
                Ok(map
                    .window_segments(z)?
                    .into_iter()
                    .map(|s| (CellKey(vec![s.first as i64, s.last as i64]), s.prob()))
                    .collect())
            })
            .collect::<Result<_>>()?;
        let mut distinct: Vec<&CellKey> = segments.iter().flatten().map(|(k, _)| k).collect();
        distinct.sort();
        distinct.dedup();
        let infos: Vec<QuantileInfo> = distinct
            .par_iter()
            .map(|k| {
                quantile_info(
                    &map.window_design(k.0[0] as usize, k.0[1] as usize)?,
                    est,
                    pop,
                    alpha,
                    None,
                )
            })
            .collect::<Result<_>>()?;
        let quantiles: HashMap<CellKey, QuantileInfo> =
            distinct.into_iter().cloned().zip(infos).collect();
        let entries = support
            .iter()
            .zip(&segments)
            .zip(&deviations)
            .map(|(((z, p), segs), &dev)| {
                let covered = segs
                    .iter()
                    .filter(|(k, _)| quantiles[k].covers(dev))
                    .map(|(_, w)| w)
                    .sum();
                ProfileEntry {
                    z: z.clone(),
                    prob: *p,
                    covered,
                    design_key: None,
                    deviation: dev,
                }
            })
            .collect();
        return Ok(CoverageProfile { entries, quantiles });
    }

    let keys: Vec<CellKey> = support
        .par_iter()
        .map(|(z, _)| map.cache_key(z))
        .collect::<Result<_>>()?;
    let quantiles = deterministic_quantiles(map, est, pop, alpha, &keys, |i| &support[i].0, None)?;
    let entries = support
        .iter()
        .zip(keys)
        .zip(&deviations)
        .map(|(((z, p), key), &dev)| ProfileEntry {
            z: z.clone(),
            prob: *p,
            covered: if quantiles[&key].covers(dev) {
                1.0
            } else {
                0.0
            },
            design_key: Some(key),
            deviation: dev,
        })
        .collect();
    Ok(CoverageProfile { entries, quantiles })
}

fn deterministic_quantiles<'a>(
    map: &DesignMap,
    est: &Estimator,
    pop: &Population,
    alpha: f64,
    keys: &[CellKey],
    assignment_at: impl Fn(usize) -> &'a Assignment + Sync,
    inner: Option<(usize, u64)>,
) -> Result<HashMap<CellKey, QuantileInfo>> {
    let mut first_of: BTreeMap<&CellKey, usize> = BTreeMap::new();
    for (i, k) in keys.iter().enumerate() {
        first_of.entry(k).or_insert(i);
    }
    let reps: Vec<(&CellKey, usize)> = first_of.into_iter().collect();
    let infos: Vec<QuantileInfo> = reps
        .par_iter()
        .map(|&(key, i)| {
            let design = map.design_for(assignment_at(i))?;
            let inner = inner.map(|(r, seed)| (r, rng::stable_hash(&key.0) ^ seed));
            quantile_info(&design, est, pop, alpha, inner)
        })
        .collect::<Result<_>>()?;
    Ok(reps
        .into_iter()
        .map(|(k, _)| k.clone())
        .zip(infos)
        .collect())
}

#[derive(Clone, Debug, Serialize)]
pub struct CellRow {
    pub cell_id: String,
    pub cell_prob: f64,
    pub coverage: f64,
    pub se: Option<f64>,
    /// Attained level of the analysis design's own oracle when the whole
    /// cell shares one analysis design.
    pub attained: Option<f64>,
    pub count: Option<usize>,
}

#[derive(Clone, Debug, Serialize)]
pub struct CoverageReport {
    pub map: String,
    pub alpha: f64,
    pub nominal: f64,
    pub exact: bool,
    pub marginal: f64,
    pub marginal_se: Option<f64>,
    pub replicates: Option<usize>,
    pub cells: Vec<CellRow>,
}

impl CoverageReport {
    /// `|marginal - sum(cell_prob * coverage)|`.
    pub fn total_coverage_residual(&self) -> f64 {
        let s: f64 = self.cells.iter().map(|c| c.cell_prob * c.coverage).sum();
        (self.marginal - s).abs()
    }

    pub fn min_cell_coverage(&self) -> f64 {
        self.cells
            .iter()
            .map(|c| c.coverage)
            .fold(f64::INFINITY, f64::min)
    }

    /// CSV with columns `cell_id, cell_prob, coverage, se` and a final
    /// `marginal` row; `se` is empty in exact mode.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["cell_id", "cell_prob", "coverage", "se"])?;
        let fmt_se = |se: Option<f64>| se.map(|s| format!("{s}")).unwrap_or_default();
        for c in &self.cells {
            w.write_record([
                c.cell_id.clone(),
                format!("{}", c.cell_prob),
                format!("{}", c.coverage),
                fmt_se(c.se),
            ])?;
        }
        w.write_record([
            "marginal".to_string(),
            "1".into(),
            format!("{}", self.marginal),
            fmt_se(self.marginal_se),
        ])?;
        w.flush()?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Parameter(e.to_string()))
    }
}

fn binomial_se(p: f64, n: usize) -> f64 {
    if n == 0 {
        f64::NAN
    } else {
        (p * (1.0 - p) / n as f64).sqrt()
    }
}

/// Marginal and per-cell coverage of the oracle procedure `z -> C(z; H(z))`
/// averaged over `Z ~ eta0`.
///
/// Cells come from `cells`, or from the map's own statistic for conditional
/// maps, or a single cell otherwise.
pub fn coverage(
    eta0: &Design,
    map: &DesignMap,
    est: &Estimator,
    pop: &Population,
    alpha: f64,
    cells: Option<&Statistic>,
    mode: CoverageMode,
) -> Result<CoverageReport> {
    check_alpha(alpha)?;
    let own;
    let statistic = match (cells, map) {
        (Some(s), _) => s,
        (None, DesignMap::Conditional(ctx)) => {
            own = ctx.statistic().clone();
            &own
        }
        (None, _) => &Statistic::Constant,
    };
    match mode {
        CoverageMode::Exact => exact_coverage(eta0, map, est, pop, alpha, statistic),
        CoverageMode::MonteCarlo { outer, inner, seed } => {
            mc_coverage(eta0, map, est, pop, alpha, statistic, outer, inner, seed)
        }
    }
}

fn exact_coverage(
    eta0: &Design,
    map: &DesignMap,
    est: &Estimator,
    pop: &Population,
    alpha: f64,
    statistic: &Statistic,
) -> Result<CoverageReport> {
    let profile = coverage_profile(eta0, map, est, pop, alpha)?;
    let cell_keys: Vec<CellKey> = profile
        .entries
        .par_iter()
        .map(|e| statistic.evaluate(&e.z))
        .collect::<Result<_>>()?;
    struct Acc {
        prob: f64,
        hit: f64,
        design: Option<Option<CellKey>>,
    }
    let mut acc: BTreeMap<CellKey, Acc> = BTreeMap::new();
    for (e, key) in profile.entries.iter().zip(cell_keys) {
        let a = acc.entry(key).or_insert(Acc {
            prob: 0.0,
            hit: 0.0,
            design: None,
        });
        a.prob += e.prob;
        a.hit += e.prob * e.covered;
        a.design = match a.design.take() {
            None => Some(e.design_key.clone()),
            Some(prev) if prev == e.design_key => Some(prev),
            Some(_) => Some(None),
        };
    }
    let marginal = profile.marginal();
    let rows = acc
        .into_iter()
        .map(|(key, a)| CellRow {
            cell_id: key.to_string(),
            cell_prob: a.prob,
            coverage: a.hit / a.prob,
            se: None,
            attained: a.design.flatten().map(|k| profile.quantiles[&k].attained),
            count: None,
        })
        .collect();
    Ok(CoverageReport {
        map: map.name(),
        alpha,
        nominal: 1.0 - 2.0 * alpha,
        exact: true,
        marginal,
        marginal_se: None,
        replicates: None,
        cells: rows,
    })
}

#[allow(clippy::too_many_arguments)]
fn mc_coverage(
    eta0: &Design,
    map: &DesignMap,
    est: &Estimator,
    pop: &Population,
    alpha: f64,
    statistic: &Statistic,
    outer: usize,
    inner: Option<usize>,
    seed: u64,
) -> Result<CoverageReport> {
    if outer == 0 {
        return Err(Error::Parameter(
            "Monte Carlo needs at least one outer replicate".into(),
        ));
    }
    let tau = pop.tau();
    struct Draw {
        z: Assignment,
        key: CellKey,
        dev: f64,
        cell: CellKey,
    }
    let draws: Vec<Draw> = (0..outer as u64)
        .into_par_iter()
        .map(|r| {
            let mut stream = rng::stream(seed, &[OUTER_TAG, r]);
            let z = eta0.sample(&mut stream);
            let key = if map.is_stochastic() {
                let u: f64 = rand::Rng::random(&mut stream);
                map.stochastic_key(&z, u)?
            } else {
                map.cache_key(&z)?
            };
            let dev = est.evaluate(&z, pop)? - tau;
            let cell = statistic.evaluate(&z)?;
            Ok(Draw { z, key, dev, cell })
        })
        .collect::<Result<_>>()?;
    let keys: Vec<CellKey> = draws.iter().map(|d| d.key.clone()).collect();
    let inner = inner.map(|r| (r, rng::stable_hash(&[seed as i64, INNER_TAG as i64])));
    let quantiles = if map.is_stochastic() {
        let mut distinct: Vec<&CellKey> = keys.iter().collect();
        distinct.sort();
        distinct.dedup();
        let infos: Vec<QuantileInfo> = distinct
            .par_iter()
            .map(|k| {
                let design = map.window_design(k.0[0] as usize, k.0[1] as usize)?;
                quantile_info(
                    &design,
                    est,
                    pop,
                    alpha,
                    inner.map(|(r, s)| (r, rng::stable_hash(&k.0) ^ s)),
                )
            })
            .collect::<Result<_>>()?;
        distinct.into_iter().cloned().zip(infos).collect()
    } else {
        deterministic_quantiles(map, est, pop, alpha, &keys, |i| &draws[i].z, inner)?
    };
    let mut acc: BTreeMap<CellKey, (usize, usize)> = BTreeMap::new();
    let mut hits = 0usize;
    for d in &draws {
        let covered = quantiles[&d.key].covers(d.dev);
        let a = acc.entry(d.cell.clone()).or_default();
        a.0 += 1;
        if covered {
            a.1 += 1;
            hits += 1;
        }
    }
    let marginal = hits as f64 / outer as f64;
    let rows = acc
        .into_iter()
        .map(|(key, (count, hit))| {
            let cov = hit as f64 / count as f64;
            CellRow {
                cell_id: key.to_string(),
                cell_prob: count as f64 / outer as f64,
                coverage: cov,
                se: Some(binomial_se(cov, count)),
                attained: None,
                count: Some(count),
            }
        })
        .collect();
    Ok(CoverageReport {
        map: map.name(),
        alpha,
        nominal: 1.0 - 2.0 * alpha,
        exact: false,
        marginal,
        marginal_se: Some(binomial_se(marginal, outer)),
        replicates: Some(outer),
        cells: rows,
    })
}

/// Coverage of fixed oracle quantiles `(L, U)` within each stratum design,
/// estimated from `replicates` draws per stratum. Returns `(coverage, se)`.
pub fn stratified_fixed_coverage(
    strata: &[Design],
    est: &Estimator,
    pop: &Population,
    quantiles: (f64, f64),
    tol: f64,
    replicates: usize,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    if replicates == 0 {
        return Err(Error::Parameter(
            "stratified coverage needs replicates".into(),
        ));
    }
    let tau = pop.tau();
    let (l, u) = quantiles;
    strata
        .par_iter()
        .enumerate()
        .map(|(s, design)| {
            let mut hits = 0usize;
            let mut stream = rng::stream(seed, &[OUTER_TAG, s as u64]);
            for _ in 0..replicates {
                let z = design.sample(&mut stream);
                let dev = est.evaluate(&z, pop)? - tau;
                if dev >= l - tol && dev <= u + tol {
                    hits += 1;
                }
            }
            let cov = hits as f64 / replicates as f64;
            Ok((cov, binomial_se(cov, replicates)))
        })
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct CellMoments {
    pub cell_id: String,
    pub prob: f64,
    pub mean: f64,
    pub variance: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct VarianceDecomposition {
    pub total: f64,
    pub within: f64,
    pub between: f64,
    pub residual: f64,
    pub relative_residual: f64,
    /// Whether `E[tau_hat | w] = tau` in every cell.
    pub conditionally_unbiased: bool,
    pub cells: Vec<CellMoments>,
}

/// `var(tau_hat) = E[var(tau_hat | w)] + var(E[tau_hat | w])` over `eta0`.
pub fn variance_decomposition_check(
    eta0: &Design,
    est: &Estimator,
    pop: &Population,
    w: &Statistic,
) -> Result<VarianceDecomposition> {
    let support = eta0.enumerate()?;
    let rows: Vec<(f64, CellKey)> = support
        .par_iter()
        .map(|(z, _)| Ok((est.evaluate(z, pop)?, w.evaluate(z)?)))
        .collect::<Result<_>>()?;
    let mean: f64 = support
        .iter()
        .zip(&rows)
        .map(|((_, p), (v, _))| p * v)
        .sum();
    let total: f64 = support
        .iter()
        .zip(&rows)
        .map(|((_, p), (v, _))| p * (v - mean) * (v - mean))
        .sum();

    let mut groups: BTreeMap<&CellKey, Vec<(f64, f64)>> = BTreeMap::new();
    for ((_, p), (v, key)) in support.iter().zip(&rows) {
        groups.entry(key).or_default().push((*v, *p));
    }
    let tau = pop.tau();
    let unbiased_tol =
        1e-10 * (1.0 + tau.abs() + rows.iter().fold(0.0f64, |m, r| m.max(r.0.abs())));
    let mut cells = Vec::with_capacity(groups.len());
    let (mut within, mut between) = (0.0, 0.0);
    let mut conditionally_unbiased = true;
    for (key, members) in groups {
        let prob: f64 = members.iter().map(|m| m.1).sum();
        let m: f64 = members.iter().map(|(v, p)| v * p).sum::<f64>() / prob;
        let var: f64 = members
            .iter()
            .map(|(v, p)| p * (v - m) * (v - m))
            .sum::<f64>()
            / prob;
        within += prob * var;
        between += prob * (m - mean) * (m - mean);
        conditionally_unbiased &= (m - tau).abs() <= unbiased_tol;
        cells.push(CellMoments {
            cell_id: key.to_string(),
            prob,
            mean: m,
            variance: var,
        });
    }
    let residual = total - within - between;
    let relative_residual = residual.abs() / total.abs().max(f64::MIN_POSITIVE);
    Ok(VarianceDecomposition {
        total,
        within,
        between,
        residual,
        relative_residual,
        conditionally_unbiased,
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::population::synthetic;

    fn a(s: &str) -> Assignment {
        s.parse().unwrap()
    }

    fn uniform(values: &[f64]) -> SamplingDistribution {
        SamplingDistribution::from_weighted(values.iter().map(|&v| (v, 1.0)).collect(), true, None)
            .unwrap()
    }

    /// Tail sums straight from the definition.
    fn quantiles_by_definition(dist: &SamplingDistribution, alpha: f64) -> (f64, f64) {
        let atoms = dist.atoms();
        let upper = atoms
            .iter()
            .find(|(u, _)| {
                atoms
                    .iter()
                    .filter(|(v, _)| v > u)
                    .map(|a| a.1)
                    .sum::<f64>()
                    <= alpha + 1e-12
            })
            .unwrap()
            .0;
        let lower = atoms
            .iter()
            .rev()
            .find(|(l, _)| {
                atoms
                    .iter()
                    .filter(|(v, _)| v < l)
                    .map(|a| a.1)
                    .sum::<f64>()
                    <= alpha + 1e-12
            })
            .unwrap()
            .0;
        (lower, upper)
    }

    #[test]
    fn quantile_examples() {
        let single = uniform(&[3.5]);
        for alpha in [0.01, 0.2, 0.49] {
            assert_eq!(oracle_quantiles(&single, alpha).unwrap(), (3.5, 3.5));
        }
        let hundred: Vec<f64> = (1..=100).map(f64::from).collect();
        let d = uniform(&hundred);
        let (l, u) = oracle_quantiles(&d, 0.025).unwrap();
        assert_eq!((l, u), (3.0, 98.0));
        assert!((d.mass_between(l, u) - 0.96).abs() < 1e-12);
        assert_eq!(oracle_quantiles(&d, 1e-9).unwrap(), (1.0, 100.0));
        assert!(oracle_quantiles(&d, 0.5).is_err());
        assert!(oracle_quantiles(&d, 0.0).is_err());
    }

    #[test]
    fn atoms_merge() {
        let d = SamplingDistribution::from_weighted(
            vec![(1.0, 1.0), (1.0 + 1e-14, 1.0), (2.0, 2.0)],
            true,
            None,
        )
        .unwrap();
        assert_eq!(d.atoms().len(), 2);
        assert!((d.atoms()[0].1 - 0.5).abs() < 1e-15);
    }

    #[test]
    fn hand_enumerated_crd() {
        let pop = Population::new(vec![0.0; 4], vec![4.0, 4.0, 0.0, 0.0]).unwrap();
        assert_eq!(pop.tau(), 2.0);
        let d = Design::completely_randomized(4, 2).unwrap();
        let dist =
            sampling_distribution(&d, &Estimator::DiffInMeans, &pop, DistributionMode::Exact)
                .unwrap();
        // 1100 -> 4, 0011 -> -0, mixed -> 2 ... minus tau
        let expect = [(-2.0, 1.0 / 6.0), (0.0, 4.0 / 6.0), (2.0, 1.0 / 6.0)];
        assert_eq!(dist.atoms().len(), 3);
        for ((v, p), (ev, ep)) in dist.atoms().iter().zip(expect) {
            assert!((v - ev).abs() < 1e-15 && (p - ep).abs() < 1e-15);
        }
    }

    #[test]
    fn symmetric_under_half_split() {
        let pop = synthetic::constant_effect(8, 1.0, 4).unwrap();
        let d = Design::completely_randomized(8, 4).unwrap();
        let dist =
            sampling_distribution(&d, &Estimator::DiffInMeans, &pop, DistributionMode::Exact)
                .unwrap();
        let atoms = dist.atoms();
        for (lo, hi) in atoms.iter().zip(atoms.iter().rev()) {
            assert!((lo.0 + hi.0).abs() < 1e-12);
            assert!((lo.1 - hi.1).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_population() {
        let pop = Population::new(vec![2.0; 6], vec![2.0; 6]).unwrap();
        let d = Design::completely_randomized(6, 2).unwrap();
        let dist =
            sampling_distribution(&d, &Estimator::DiffInMeans, &pop, DistributionMode::Exact)
                .unwrap();
        assert_eq!(dist.atoms(), &[(0.0, 1.0)]);
        let ci = oracle_interval(
            &a("110000"),
            &d,
            &Estimator::DiffInMeans,
            &pop,
            0.025,
            false,
        )
        .unwrap();
        assert_eq!((ci.lower, ci.upper), (0.0, 0.0));
        assert!(ci.contains(pop.tau()));
    }

    #[test]
    fn interval_outside_support_needs_flag() {
        let pop = synthetic::constant_effect(6, 0.0, 1).unwrap();
        let d = Design::completely_randomized(6, 3).unwrap();
        let z = a("110000");
        assert!(matches!(
            oracle_interval(&z, &d, &Estimator::DiffInMeans, &pop, 0.025, false),
            Err(Error::ZeroProbability(_))
        ));
        assert!(oracle_interval(&z, &d, &Estimator::DiffInMeans, &pop, 0.025, true).is_ok());
    }

    #[test]
    fn constant_map_interval_length_is_fixed() {
        let pop = synthetic::heterogeneous(8, 1.0, 0.5, 2).unwrap();
        let d = Design::bernoulli_truncated(8, 0.5).unwrap();
        let lengths: Vec<f64> = d
            .enumerate()
            .unwrap()
            .iter()
            .step_by(17)
            .map(|(z, _)| {
                oracle_interval(z, &d, &Estimator::DiffInMeans, &pop, 0.025, false)
                    .unwrap()
                    .length()
            })
            .collect();
        assert!(lengths.windows(2).all(|w| (w[0] - w[1]).abs() < 1e-12));
    }

    #[test]
    fn conditional_interval_lengths_by_cell() {
        let n = 12;
        let pop = synthetic::constant_effect(n, 1.0, 8).unwrap();
        let base = Design::bernoulli_truncated(n, 0.5).unwrap();
        let map = DesignMap::conditional(base, Statistic::TreatedCount);
        let mut lengths = Vec::new();
        for k in [1, n / 2] {
            let z = Assignment::from_bools(&(0..n).map(|i| i < k).collect::<Vec<_>>());
            let via_map = oracle_interval(
                &z,
                &map.design_for(&z).unwrap(),
                &Estimator::DiffInMeans,
                &pop,
                0.025,
                false,
            )
            .unwrap();
            let crd = Design::completely_randomized(n, k).unwrap();
            let dist =
                sampling_distribution(&crd, &Estimator::DiffInMeans, &pop, DistributionMode::Exact)
                    .unwrap();
            let (l, u) = quantiles_by_definition(&dist, 0.025);
            assert!((via_map.length() - (u - l)).abs() < 1e-12);
            lengths.push(via_map.length());
        }
        assert!(lengths[0] > lengths[1]);
    }

    #[test]
    fn constant_map_marginal_coverage() {
        let pop = synthetic::heterogeneous(10, 0.5, 1.0, 6).unwrap();
        let eta0 = Design::bernoulli_truncated(10, 0.5).unwrap();
        let rep = coverage(
            &eta0,
            &DesignMap::constant(eta0.clone()),
            &Estimator::DiffInMeans,
            &pop,
            0.025,
            Some(&Statistic::TreatedCount),
            CoverageMode::Exact,
        )
        .unwrap();
        assert!(rep.marginal >= 0.95);
        assert!(rep.total_coverage_residual() <= 1e-12);
        assert!(rep.min_cell_coverage() < 0.95);
    }

    #[test]
    fn conditional_map_cells_valid() {
        let pop = synthetic::heterogeneous(10, 0.5, 1.0, 7).unwrap();
        let eta0 = Design::bernoulli_truncated(10, 0.5).unwrap();
        let map = DesignMap::conditional(eta0.clone(), Statistic::TreatedCount);
        let rep = coverage(
            &eta0,
            &map,
            &Estimator::DiffInMeans,
            &pop,
            0.025,
            None,
            CoverageMode::Exact,
        )
        .unwrap();
        assert_eq!(rep.cells.len(), 9);
        for c in &rep.cells {
            assert!(c.coverage >= 0.95 - 1e-12);
            assert!((c.coverage - c.attained.unwrap()).abs() < 1e-12);
        }
        assert!(rep.total_coverage_residual() <= 1e-12);
    }

    #[test]
    fn strict_ball_zero_coverage() {
        let n = 10;
        let pop = synthetic::balance_identity(n, 77).unwrap();
        let x = pop.y0().to_vec();
        let base = Design::completely_randomized(n, n / 2).unwrap();
        let map = DesignMap::balance_ball(base.clone(), x.clone(), true).unwrap();
        let min_abs = base
            .enumerate()
            .unwrap()
            .iter()
            .map(|(z, _)| crate::estimators::balance(z, &x).unwrap().abs())
            .fold(f64::INFINITY, f64::min);
        let eta0 = base
            .condition(|z| crate::estimators::balance(z, &x).unwrap().abs() > min_abs + 1e-9)
            .unwrap();
        assert_eq!(eta0.support_len().unwrap(), base.support_len().unwrap() - 2);
        let rep = coverage(
            &eta0,
            &map,
            &Estimator::DiffInMeans,
            &pop,
            0.025,
            None,
            CoverageMode::Exact,
        )
        .unwrap();
        assert_eq!(rep.marginal, 0.0);
    }

    #[test]
    fn stochastic_window_exact_matches_mc() {
        let pop = synthetic::covariate_linked(8, 1, 0.5, 13).unwrap();
        let x = pop.covariates().unwrap().column(0);
        let eta0 = Design::completely_randomized(8, 4).unwrap();
        let map = DesignMap::stochastic_window(eta0.clone(), x, 0.5).unwrap();
        let exact = coverage(
            &eta0,
            &map,
            &Estimator::DiffInMeans,
            &pop,
            0.025,
            None,
            CoverageMode::Exact,
        )
        .unwrap();
        assert!(exact.marginal >= 0.95);
        let mc = coverage(
            &eta0,
            &map,
            &Estimator::DiffInMeans,
            &pop,
            0.025,
            None,
            CoverageMode::MonteCarlo {
                outer: 20_000,
                inner: None,
                seed: 3,
            },
        )
        .unwrap();
        assert!((mc.marginal - exact.marginal).abs() <= 4.0 * mc.marginal_se.unwrap().max(1e-3));
    }

    #[test]
    fn mc_agrees_with_exact() {
        let pop = synthetic::heterogeneous(10, 0.3, 1.0, 19).unwrap();
        let eta0 = Design::bernoulli_truncated(10, 0.5).unwrap();
        let map = DesignMap::constant(eta0.clone());
        let exact = coverage(
            &eta0,
            &map,
            &Estimator::DiffInMeans,
            &pop,
            0.025,
            Some(&Statistic::TreatedCount),
            CoverageMode::Exact,
        )
        .unwrap();
        let mc = coverage(
            &eta0,
            &map,
            &Estimator::DiffInMeans,
            &pop,
            0.025,
            Some(&Statistic::TreatedCount),
            CoverageMode::MonteCarlo {
                outer: 40_000,
                inner: None,
                seed: 5,
            },
        )
        .unwrap();
        assert!((mc.marginal - exact.marginal).abs() <= 4.0 * mc.marginal_se.unwrap());
        for row in mc.cells.iter().filter(|r| r.count.unwrap() >= 500) {
            let e = exact
                .cells
                .iter()
                .find(|c| c.cell_id == row.cell_id)
                .unwrap();
            let se = row
                .se
                .unwrap()
                .max(binomial_se(e.coverage, row.count.unwrap()));
            assert!(
                (row.coverage - e.coverage).abs() <= 4.0 * se.max(1e-9),
                "cell {}",
                row.cell_id
            );
        }
        assert!(mc.total_coverage_residual() < 1e-12);
    }

    #[test]
    fn nested_mc_is_deterministic() {
        let pop = synthetic::heterogeneous(8, 0.3, 1.0, 1).unwrap();
        let eta0 = Design::bernoulli_truncated(8, 0.5).unwrap();
        let map = DesignMap::conditional(eta0.clone(), Statistic::TreatedCount);
        let mode = CoverageMode::MonteCarlo {
            outer: 500,
            inner: Some(300),
            seed: 9,
        };
        let r1 = coverage(
            &eta0,
            &map,
            &Estimator::DiffInMeans,
            &pop,
            0.025,
            None,
            mode,
        )
        .unwrap();
        let r2 = coverage(
            &eta0,
            &map,
            &Estimator::DiffInMeans,
            &pop,
            0.025,
            None,
            mode,
        )
        .unwrap();
        let (mut c1, mut c2) = (Vec::new(), Vec::new());
        r1.write_csv(&mut c1).unwrap();
        r2.write_csv(&mut c2).unwrap();
        assert_eq!(c1, c2);
    }

    #[test]
    fn variance_decomposition_examples() {
        let pop = synthetic::constant_effect(10, 2.0, 12).unwrap();
        let eta0 = Design::bernoulli_truncated(10, 0.5).unwrap();
        let rep = variance_decomposition_check(
            &eta0,
            &Estimator::DiffInMeans,
            &pop,
            &Statistic::TreatedCount,
        )
        .unwrap();
        assert!(rep.relative_residual <= 1e-12);
        assert!(rep.conditionally_unbiased);
        let flat = variance_decomposition_check(
            &eta0,
            &Estimator::DiffInMeans,
            &pop,
            &Statistic::Constant,
        )
        .unwrap();
        assert!(flat.between.abs() < 1e-20);
        assert!((flat.within - flat.total).abs() <= 1e-12 * flat.total);
    }

    #[test]
    fn csv_layout() {
        let pop = synthetic::constant_effect(6, 0.0, 1).unwrap();
        let eta0 = Design::completely_randomized(6, 3).unwrap();
        let rep = coverage(
            &eta0,
            &DesignMap::constant(eta0.clone()),
            &Estimator::DiffInMeans,
            &pop,
            0.025,
            None,
            CoverageMode::Exact,
        )
        .unwrap();
        let mut buf = Vec::new();
        rep.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "cell_id,cell_prob,coverage,se");
        assert!(lines[2].starts_with("marginal,1,"));
        let json: serde_json::Value = serde_json::from_str(&rep.to_json().unwrap()).unwrap();
        assert_eq!(json["exact"], true);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn quantile_guarantee(
                atoms in proptest::collection::vec((-50i32..50, 1u32..100), 1..40),
                alpha in prop_oneof![Just(0.01), Just(0.025), Just(0.05), 0.001f64..0.49],
            ) {
                let pairs = atoms.iter().map(|&(v, w)| (v as f64 / 4.0, w as f64)).collect();
                let dist = SamplingDistribution::from_weighted(pairs, true, None).unwrap();
                let (l, u) = oracle_quantiles(&dist, alpha).unwrap();
                prop_assert!(l <= u);
                prop_assert!(dist.mass_between(l, u) >= 1.0 - 2.0 * alpha - 1e-12);
                prop_assert_eq!((l, u), quantiles_by_definition(&dist, alpha));
            }

            #[test]
            fn shift_equivariance(seed in 0u64..500, shift in -100.0f64..100.0) {
                let pop = synthetic::heterogeneous(8, 0.4, 1.0, seed).unwrap();
                let shifted = Population::new(
                    pop.y0().iter().map(|v| v + shift).collect(),
                    pop.y1().iter().map(|v| v + shift).collect(),
                ).unwrap();
                let eta0 = Design::bernoulli_truncated(8, 0.5).unwrap();
                let map = DesignMap::conditional(eta0.clone(), Statistic::TreatedCount);
                let r1 = coverage(&eta0, &map, &Estimator::DiffInMeans, &pop, 0.05, None, CoverageMode::Exact).unwrap();
                let r2 = coverage(&eta0, &map, &Estimator::DiffInMeans, &shifted, 0.05, None, CoverageMode::Exact).unwrap();
                prop_assert!((r1.marginal - r2.marginal).abs() < 1e-12);
                let d1 = sampling_distribution(&eta0, &Estimator::DiffInMeans, &pop, DistributionMode::Exact).unwrap();
                let d2 = sampling_distribution(&eta0, &Estimator::DiffInMeans, &shifted, DistributionMode::Exact).unwrap();
                let q1 = oracle_quantiles(&d1, 0.05).unwrap();
                let q2 = oracle_quantiles(&d2, 0.05).unwrap();
                prop_assert!((q1.0 - q2.0).abs() < 1e-8 && (q1.1 - q2.1).abs() < 1e-8);
            }

            #[test]
            fn total_coverage_law(seed in 0u64..500) {
                let pop = synthetic::heterogeneous(8, 0.4, 1.0, seed).unwrap();
                let eta0 = Design::bernoulli_truncated(8, 0.5).unwrap();
                let rep = coverage(
                    &eta0, &DesignMap::constant(eta0.clone()), &Estimator::DiffInMeans, &pop, 0.025,
                    Some(&Statistic::TreatedCount), CoverageMode::Exact,
                ).unwrap();
                prop_assert!(rep.total_coverage_residual() <= 1e-12);
                prop_assert!(rep.cells.iter().all(|c| (0.0..=1.0).contains(&c.coverage)));
            }
        }
    }
}
