//! Fuzzy confidence intervals: the probability over the auxiliary draw that
//! the realized interval of a stochastic design map contains `theta`.

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::design_maps::DesignMap;
use crate::error::{Error, Result};
use crate::estimators::Estimator;
use crate::oracle::{oracle_quantiles, sampling_distribution, DistributionMode, OracleInterval};
use crate::population::{Assignment, Population};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FuzzyMode {
    Exact,
    MonteCarlo { draws: usize, seed: u64 },
}

/// One realized interval and the probability of realizing it.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct RealizedInterval {
    pub interval: OracleInterval,
    pub weight: f64,
    tol: f64,
}

impl RealizedInterval {
    pub fn contains(&self, theta: f64) -> bool {
        let dev = self.interval.center - theta;
        dev >= self.interval.l - self.tol && dev <= self.interval.u + self.tol
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct FuzzyInterval {
    pub grid: Vec<f64>,
    pub membership: Vec<f64>,
    pub exact: bool,
    pub draws: Option<usize>,
    pub intervals: Vec<RealizedInterval>,
}

impl FuzzyInterval {
    /// Membership at an arbitrary point.
    pub fn membership_at(&self, theta: f64) -> f64 {
        self.intervals
            .iter()
            .filter(|r| r.contains(theta))
            .map(|r| r.weight)
            .sum::<f64>()
            .clamp(0.0, 1.0)
    }

    /// CSV with columns `theta, membership`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["theta", "membership"])?;
        for (t, m) in self.grid.iter().zip(&self.membership) {
            w.write_record([format!("{t}"), format!("{m}")])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Realized interval endpoints plus midpoints between consecutive endpoints.
pub fn default_grid(intervals: &[RealizedInterval]) -> Vec<f64> {
    let mut ends: Vec<f64> = intervals
        .iter()
        .flat_map(|r| [r.interval.lower, r.interval.upper])
        .collect();
    ends.sort_by(f64::total_cmp);
    ends.dedup();
    let mut grid = Vec::with_capacity(2 * ends.len());
    for (i, &e) in ends.iter().enumerate() {
        if i > 0 {
            grid.push(0.5 * (ends[i - 1] + e));
        }
        grid.push(e);
    }
    grid
}

fn realized(
    design: &crate::designs::Design,
    center: f64,
    est: &Estimator,
    pop: &Population,
    alpha: f64,
    weight: f64,
) -> Result<RealizedInterval> {
    let dist = sampling_distribution(design, est, pop, DistributionMode::Exact)?;
    let (l, u) = oracle_quantiles(&dist, alpha)?;
    Ok(RealizedInterval {
        interval: OracleInterval {
            lower: center - u,
            upper: center - l,
            l,
            u,
            center,
        },
        weight,
        tol: dist.tolerance(),
    })
}

/// Fuzzy interval `theta -> P_w(theta in C(z, w))` evaluated on `grid`
/// (default: `default_grid`).
pub fn fuzzy_interval(
    z: &Assignment,
    map: &DesignMap,
    est: &Estimator,
    pop: &Population,
    alpha: f64,
    grid: Option<&[f64]>,
    mode: FuzzyMode,
) -> Result<FuzzyInterval> {
    if let Some(g) = grid {
        if g.is_empty() || g.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Parameter("grid must be non-empty and sorted".into()));
        }
    }
    let center = est.evaluate(z, pop)?;
    let (intervals, exact, draws) = if !map.is_stochastic() {
        (
            vec![realized(&map.design_for(z)?, center, est, pop, alpha, 1.0)?],
            true,
            None,
        )
    } else {
        match mode {
            FuzzyMode::Exact => {
                let segments = map.window_segments(z)?;
                let intervals = segments
                    .par_iter()
                    .map(|s| {
                        realized(
                            &map.window_design(s.first, s.last)?,
                            center,
                            est,
                            pop,
                            alpha,
                            s.prob(),
                        )
                    })
                    .collect::<Result<Vec<_>>>()?;
                (intervals, true, None)
            }
            FuzzyMode::MonteCarlo { draws, seed } => {
                if draws == 0 {
                    return Err(Error::Parameter(
                        "fuzzy Monte Carlo needs at least one draw".into(),
                    ));
                }
                let mut keys: Vec<((usize, usize), usize)> = (0..draws as u64)
                    .map(|r| {
                        let u: f64 = rng::stream(seed, &[r]).random();
                        let k = map.stochastic_key(z, u)?;
                        Ok(((k.0[0] as usize, k.0[1] as usize), 1))
                    })
                    .collect::<Result<_>>()?;
                keys.sort_unstable();
                let mut grouped: Vec<((usize, usize), usize)> = Vec::new();
                for (k, c) in keys {
                    match grouped.last_mut() {
                        Some((g, n)) if *g == k => *n += c,
                        _ => grouped.push((k, c)),
                    }
                }
                let intervals = grouped
                    .par_iter()
                    .map(|&((first, last), count)| {
                        realized(
                            &map.window_design(first, last)?,
                            center,
                            est,
                            pop,
                            alpha,
                            count as f64 / draws as f64,
                        )
                    })
                    .collect::<Result<Vec<_>>>()?;
                (intervals, false, Some(draws))
            }
        }
    };
    let grid = grid
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| default_grid(&intervals));
    let mut fuzzy = FuzzyInterval {
        grid,
        membership: Vec::new(),
        exact,
        draws,
        intervals,
    };
    fuzzy.membership = fuzzy.grid.iter().map(|&t| fuzzy.membership_at(t)).collect();
    Ok(fuzzy)
}
