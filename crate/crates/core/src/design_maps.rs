//! Design maps: rules sending an observed assignment to the design used for analysis.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::{Arc, OnceLock};

use rayon::prelude::*;
use serde::Serialize;

use crate::designs::Design;
use crate::error::{Error, Result};
use crate::estimators::balance;
use crate::matching::{pairs_key, within_pair_permutations, Matcher};
use crate::population::{Assignment, Blocks, Covariates};
use crate::PROB_TOL;

/// Value of a statistic, used as a cell identifier.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct CellKey(pub Vec<i64>);

impl fmt::Display for CellKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(i64::to_string).collect();
        f.write_str(&parts.join(":"))
    }
}

impl From<Vec<i64>> for CellKey {
    fn from(v: Vec<i64>) -> Self {
        CellKey(v)
    }
}

type StatisticFn = dyn Fn(&Assignment) -> CellKey + Send + Sync;

/// A statistic `w(z)` fixed before the assignment is observed.
#[derive(Clone)]
pub enum Statistic {
    Constant,
    /// Number of treated units.
    TreatedCount,
    /// Treated count within each block.
    BlockTreatedCounts(Blocks),
    /// Occupancy of the four factorial cells.
    FactorialCellCounts,
    /// Index of the balance bin containing the covariate balance; bins are
    /// `(-inf, b1), [b1, b2), ..., [bm, inf)`.
    BalanceBin {
        x: Arc<Vec<f64>>,
        breakpoints: Vec<f64>,
    },
    /// The matched pair set produced by a deterministic matcher.
    Matching {
        x: Covariates,
        matcher: Arc<dyn Matcher>,
    },
    Custom {
        name: String,
        f: Arc<StatisticFn>,
    },
}

impl fmt::Debug for Statistic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl Statistic {
    pub fn custom(
        name: impl Into<String>,
        f: impl Fn(&Assignment) -> CellKey + Send + Sync + 'static,
    ) -> Self {
        Statistic::Custom {
            name: name.into(),
            f: Arc::new(f),
        }
    }

    pub fn balance_bin(x: Vec<f64>, breakpoints: Vec<f64>) -> Result<Self> {
        if breakpoints.windows(2).any(|w| !(w[0] < w[1]))
            || breakpoints.iter().any(|b| !b.is_finite())
        {
            return Err(Error::Parameter(
                "balance breakpoints must be finite and strictly increasing".into(),
            ));
        }
        Ok(Statistic::BalanceBin {
            x: Arc::new(x),
            breakpoints,
        })
    }

    pub fn name(&self) -> String {
        match self {
            Statistic::Constant => "constant".into(),
            Statistic::TreatedCount => "n_treated".into(),
            Statistic::BlockTreatedCounts(_) => "block_treated_counts".into(),
            Statistic::FactorialCellCounts => "factorial_cell_counts".into(),
            Statistic::BalanceBin { .. } => "balance_bin".into(),
            Statistic::Matching { matcher, .. } => format!("matching({})", matcher.name()),
            Statistic::Custom { name, .. } => name.clone(),
        }
    }

    pub fn evaluate(&self, z: &Assignment) -> Result<CellKey> {
        Ok(match self {
            Statistic::Constant => CellKey(vec![0]),
            Statistic::TreatedCount => CellKey(vec![z.n_treated() as i64]),
            Statistic::BlockTreatedCounts(blocks) => {
                if blocks.len() != z.len() {
                    return Err(Error::Dimension {
                        expected: blocks.len(),
                        actual: z.len(),
                    });
                }
                CellKey(
                    blocks
                        .treated_counts(z)
                        .into_iter()
                        .map(|c| c as i64)
                        .collect(),
                )
            }
            Statistic::FactorialCellCounts => {
                let counts = z.cell_counts().ok_or_else(|| {
                    Error::Parameter("cell counts need a two-factor assignment".into())
                })?;
                CellKey(counts.iter().map(|&c| c as i64).collect())
            }
            Statistic::BalanceBin { x, breakpoints } => {
                let d = balance(z, x)?;
                CellKey(vec![breakpoints.partition_point(|&b| b <= d) as i64])
            }
            Statistic::Matching { x, matcher } => pairs_key(&matcher.pairs(z, x)?),
            Statistic::Custom { f, .. } => f(z),
        })
    }
}

/// One cell of the partition induced by a statistic on a design's support.
#[derive(Clone, Debug)]
pub struct Cell {
    pub key: CellKey,
    /// Positions in the base design's enumerated support.
    pub indices: Vec<usize>,
    pub prob: f64,
}

/// Groups the support of `base` by the value of `w`, ordered by key.
pub fn partition_from_statistic(base: &Design, w: &Statistic) -> Result<Vec<Cell>> {
    let support = base.enumerate()?;
    let keys: Vec<CellKey> = support
        .par_iter()
        .map(|(z, _)| w.evaluate(z))
        .collect::<Result<_>>()?;
    let mut cells: BTreeMap<CellKey, (Vec<usize>, f64)> = BTreeMap::new();
    for (i, key) in keys.into_iter().enumerate() {
        let entry = cells.entry(key).or_default();
        entry.0.push(i);
        entry.1 += support[i].1;
    }
    Ok(cells
        .into_iter()
        .map(|(key, (indices, prob))| Cell { key, indices, prob })
        .collect())
}

/// Balances of the base support, sorted two ways for range lookups.
struct BalanceTable {
    sorted: Vec<f64>,
    by_value: Vec<usize>,
    sorted_abs: Vec<f64>,
    by_abs: Vec<usize>,
}

pub struct BalanceCtx {
    base: Design,
    x: Vec<f64>,
    tol: f64,
    table: OnceLock<BalanceTable>,
}

impl BalanceCtx {
    fn new(base: Design, x: Vec<f64>) -> Result<Self> {
        if x.len() != base.n() {
            return Err(Error::Dimension {
                expected: base.n(),
                actual: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parameter("covariate values must be finite".into()));
        }
        let scale = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        Ok(Self {
            base,
            x,
            tol: 1e-12 * (1.0 + scale),
            table: OnceLock::new(),
        })
    }

    fn table(&self) -> Result<&BalanceTable> {
        if let Some(t) = self.table.get() {
            return Ok(t);
        }
        let support = self.base.enumerate()?;
        let delta: Vec<f64> = support
            .par_iter()
            .map(|(z, _)| balance(z, &self.x))
            .collect::<Result<_>>()?;
        let mut by_value: Vec<usize> = (0..delta.len()).collect();
        by_value.sort_by(|&a, &b| delta[a].total_cmp(&delta[b]).then(a.cmp(&b)));
        let mut by_abs: Vec<usize> = (0..delta.len()).collect();
        by_abs.sort_by(|&a, &b| delta[a].abs().total_cmp(&delta[b].abs()).then(a.cmp(&b)));
        let table = BalanceTable {
            sorted: by_value.iter().map(|&i| delta[i]).collect(),
            sorted_abs: by_abs.iter().map(|&i| delta[i].abs()).collect(),
            by_value,
            by_abs,
        };
        Ok(self.table.get_or_init(|| table))
    }

    fn delta(&self, z: &Assignment) -> Result<f64> {
        balance(z, &self.x)
    }

    /// Number of support points in the ball around `|delta|`.
    fn ball_count(&self, d: f64, strict: bool) -> Result<usize> {
        let t = self.table()?;
        let r = d.abs();
        Ok(if strict {
            t.sorted_abs.partition_point(|&v| v < r - self.tol)
        } else {
            t.sorted_abs.partition_point(|&v| v <= r + self.tol)
        })
    }

    /// Half-open range `[first, last)` of sorted balances within `[lo, hi]`.
    fn range(&self, lo: f64, hi: f64) -> Result<(usize, usize)> {
        let t = self.table()?;
        let first = t.sorted.partition_point(|&v| v < lo - self.tol);
        let last = t.sorted.partition_point(|&v| v <= hi + self.tol);
        Ok((first, last.max(first)))
    }

    fn design_for_range(&self, first: usize, last: usize) -> Result<Design> {
        if first == last {
            return Err(Error::DegenerateDesign(
                "window contains no support point".into(),
            ));
        }
        let t = self.table()?;
        let mut idx = t.by_value[first..last].to_vec();
        idx.sort_unstable();
        self.base.condition_on_indices(&idx)
    }

    fn distinct_sorted(&self) -> Result<Vec<f64>> {
        let t = self.table()?;
        let mut out: Vec<f64> = Vec::new();
        for &v in &t.sorted {
            if out.last().is_none_or(|&l| v - l > self.tol) {
                out.push(v);
            }
        }
        Ok(out)
    }
}

pub struct ConditionalCtx {
    base: Design,
    w: Statistic,
    cells: OnceLock<HashMap<CellKey, Design>>,
}

impl ConditionalCtx {
    pub fn base(&self) -> &Design {
        &self.base
    }

    pub fn statistic(&self) -> &Statistic {
        &self.w
    }

    fn cells(&self) -> Result<&HashMap<CellKey, Design>> {
        if let Some(c) = self.cells.get() {
            return Ok(c);
        }
        let partition = partition_from_statistic(&self.base, &self.w)?;
        let designs: Vec<(CellKey, Design)> = partition
            .into_par_iter()
            .map(|cell| Ok((cell.key, self.base.condition_on_indices(&cell.indices)?)))
            .collect::<Result<_>>()?;
        Ok(self.cells.get_or_init(|| designs.into_iter().collect()))
    }
}

/// A rule `z -> H(z)` fixed before observing the assignment.
#[derive(Clone)]
pub enum DesignMap {
    /// The same design for every assignment.
    Constant(Design),
    /// The base design restricted to the observed cell of `w`.
    Conditional(Arc<ConditionalCtx>),
    /// The base design restricted to assignments at least as balanced as the
    /// observed one (strictly more balanced if `strict`).
    BalanceBall { ctx: Arc<BalanceCtx>, strict: bool },
    /// The base design restricted to balances within `c` of the observed balance.
    Window { ctx: Arc<BalanceCtx>, c: f64 },
    /// Uniform over within-pair treatment flips of the observed matching.
    PairMatch {
        x: Covariates,
        matcher: Arc<dyn Matcher>,
    },
    /// Window around an auxiliary point `w ~ Unif(delta(z) - c, delta(z) + c)`.
    StochasticWindow { ctx: Arc<BalanceCtx>, c: f64 },
}

impl fmt::Debug for DesignMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

/// A realized draw of a stochastic map.
#[derive(Clone, Debug)]
pub struct StochasticDraw {
    pub u: f64,
    pub w: f64,
    pub design: Design,
}

/// A range of auxiliary draws `u` that all produce the same window.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSegment {
    pub u_lo: f64,
    pub u_hi: f64,
    /// Positions `[first, last)` in the balance-sorted base support.
    pub first: usize,
    pub last: usize,
}

impl WindowSegment {
    pub fn prob(&self) -> f64 {
        self.u_hi - self.u_lo
    }
}

fn positive(c: f64) -> Result<()> {
    if c.is_finite() && c > 0.0 {
        Ok(())
    } else {
        Err(Error::Parameter(format!(
            "window half-width must be positive, got {c}"
        )))
    }
}

impl DesignMap {
    pub fn constant(eta: Design) -> Self {
        DesignMap::Constant(eta)
    }

    /// Analyzes a blocked design as if it were completely randomized with the same treated total.
    pub fn crd_of_blocked(n: usize, k: usize) -> Result<Self> {
        Ok(DesignMap::Constant(Design::completely_randomized(n, k)?))
    }

    pub fn conditional(base: Design, w: Statistic) -> Self {
        DesignMap::Conditional(Arc::new(ConditionalCtx {
            base,
            w,
            cells: OnceLock::new(),
        }))
    }

    pub fn balance_partition(base: Design, x: Vec<f64>, breakpoints: Vec<f64>) -> Result<Self> {
        if x.len() != base.n() {
            return Err(Error::Dimension {
                expected: base.n(),
                actual: x.len(),
            });
        }
        Ok(Self::conditional(
            base,
            Statistic::balance_bin(x, breakpoints)?,
        ))
    }

    pub fn balance_ball(base: Design, x: Vec<f64>, strict: bool) -> Result<Self> {
        Ok(DesignMap::BalanceBall {
            ctx: Arc::new(BalanceCtx::new(base, x)?),
            strict,
        })
    }

    pub fn window(base: Design, x: Vec<f64>, c: f64) -> Result<Self> {
        positive(c)?;
        Ok(DesignMap::Window {
            ctx: Arc::new(BalanceCtx::new(base, x)?),
            c,
        })
    }

    pub fn pair_match(x: Covariates, matcher: Arc<dyn Matcher>) -> Self {
        DesignMap::PairMatch { x, matcher }
    }

    pub fn stochastic_window(base: Design, x: Vec<f64>, c: f64) -> Result<Self> {
        positive(c)?;
        Ok(DesignMap::StochasticWindow {
            ctx: Arc::new(BalanceCtx::new(base, x)?),
            c,
        })
    }

    pub fn name(&self) -> String {
        match self {
            DesignMap::Constant(d) => format!("constant[{}]", d.label()),
            DesignMap::Conditional(ctx) => format!("conditional[{}]", ctx.w.name()),
            DesignMap::BalanceBall { strict, .. } => {
                if *strict {
                    "balance_ball_strict".into()
                } else {
                    "balance_ball".into()
                }
            }
            DesignMap::Window { c, .. } => format!("window[c={c}]"),
            DesignMap::PairMatch { matcher, .. } => format!("pair_match[{}]", matcher.name()),
            DesignMap::StochasticWindow { c, .. } => format!("stochastic_window[c={c}]"),
        }
    }

    pub fn is_stochastic(&self) -> bool {
        matches!(self, DesignMap::StochasticWindow { .. })
    }

    /// The design the map restricts, if any.
    pub fn base(&self) -> Option<&Design> {
        match self {
            DesignMap::Constant(_) | DesignMap::PairMatch { .. } => None,
            DesignMap::Conditional(ctx) => Some(&ctx.base),
            DesignMap::BalanceBall { ctx, .. }
            | DesignMap::Window { ctx, .. }
            | DesignMap::StochasticWindow { ctx, .. } => Some(&ctx.base),
        }
    }

    /// A key such that equal keys imply equal analysis designs.
    pub fn cache_key(&self, z: &Assignment) -> Result<CellKey> {
        match self {
            DesignMap::Constant(_) => Ok(CellKey(vec![0])),
            DesignMap::Conditional(ctx) => ctx.w.evaluate(z),
            DesignMap::BalanceBall { ctx, strict } => Ok(CellKey(vec![ctx
                .ball_count(ctx.delta(z)?, *strict)?
                as i64])),
            DesignMap::Window { ctx, c } => {
                let d = ctx.delta(z)?;
                let (first, last) = ctx.range(d - c, d + c)?;
                Ok(CellKey(vec![first as i64, last as i64]))
            }
            DesignMap::PairMatch { x, matcher } => {
                let m = matcher.pairs(z, x)?;
                let mut key = pairs_key(&m).0;
                key.push(-1);
                key.extend(m.unmatched.iter().map(|&i| i64::from(z.bits()[i])));
                Ok(CellKey(key))
            }
            DesignMap::StochasticWindow { .. } => Err(Error::Unsupported(
                "a stochastic map needs an auxiliary draw".into(),
            )),
        }
    }

    /// `H(z)` for a deterministic map.
    pub fn design_for(&self, z: &Assignment) -> Result<Design> {
        match self {
            DesignMap::Constant(d) => Ok(d.clone()),
            DesignMap::Conditional(ctx) => {
                let key = ctx.w.evaluate(z)?;
                match ctx.cells()?.get(&key) {
                    Some(d) => Ok(d.clone()),
                    None => ctx
                        .base
                        .condition(|zp| ctx.w.evaluate(zp).is_ok_and(|k| k == key)),
                }
            }
            DesignMap::BalanceBall { ctx, strict } => {
                let count = ctx.ball_count(ctx.delta(z)?, *strict)?;
                if count == 0 {
                    return Err(Error::DegenerateDesign(format!(
                        "strict balance ball around {z} is empty"
                    )));
                }
                let mut idx = ctx.table()?.by_abs[..count].to_vec();
                idx.sort_unstable();
                ctx.base.condition_on_indices(&idx)
            }
            DesignMap::Window { ctx, c } => {
                let d = ctx.delta(z)?;
                let (first, last) = ctx.range(d - c, d + c)?;
                ctx.design_for_range(first, last)
            }
            DesignMap::PairMatch { x, matcher } => {
                let m = matcher.pairs(z, x)?;
                Design::uniform("within_pair_permutations", within_pair_permutations(&m, z)?)
            }
            DesignMap::StochasticWindow { .. } => Err(Error::Unsupported(
                "a stochastic map needs an auxiliary draw; use stochastic_design_for".into(),
            )),
        }
    }

    /// `H(z, w)` for the stochastic window map with `w = delta(z) - c + 2cu`.
    pub fn stochastic_design_for(&self, z: &Assignment, u: f64) -> Result<StochasticDraw> {
        let DesignMap::StochasticWindow { ctx, c } = self else {
            return Ok(StochasticDraw {
                u,
                w: f64::NAN,
                design: self.design_for(z)?,
            });
        };
        if !(0.0..=1.0).contains(&u) {
            return Err(Error::Parameter(format!(
                "auxiliary draw must lie in [0, 1], got {u}"
            )));
        }
        let w = ctx.delta(z)? - c + 2.0 * c * u;
        let (first, last) = ctx.range(w - c, w + c)?;
        Ok(StochasticDraw {
            u,
            w,
            design: ctx.design_for_range(first, last)?,
        })
    }

    /// Key of the window selected by `(z, u)` for the stochastic map.
    pub fn stochastic_key(&self, z: &Assignment, u: f64) -> Result<CellKey> {
        let DesignMap::StochasticWindow { ctx, c } = self else {
            return self.cache_key(z);
        };
        let w = ctx.delta(z)? - c + 2.0 * c * u;
        let (first, last) = ctx.range(w - c, w + c)?;
        Ok(CellKey(vec![first as i64, last as i64]))
    }

    /// Design for a window key produced by `stochastic_key` or `window_segments`.
    pub fn window_design(&self, first: usize, last: usize) -> Result<Design> {
        match self {
            DesignMap::StochasticWindow { ctx, .. } | DesignMap::Window { ctx, .. } => {
                ctx.design_for_range(first, last)
            }
            _ => Err(Error::Unsupported("not a window map".into())),
        }
    }

    /// The distinct windows reachable from `z` as `u` ranges over `[0, 1]`,
    /// with the `u`-interval producing each.
    pub fn window_segments(&self, z: &Assignment) -> Result<Vec<WindowSegment>> {
        let DesignMap::StochasticWindow { ctx, c } = self else {
            return Err(Error::Unsupported(
                "window segments exist only for the stochastic window map".into(),
            ));
        };
        let c = *c;
        let d = ctx.delta(z)?;
        let (lo, hi) = (d - c, d + c);
        let mut cuts = vec![lo, hi];
        for v in ctx.distinct_sorted()? {
            for b in [v - c, v + c] {
                if b > lo && b < hi {
                    cuts.push(b);
                }
            }
        }
        cuts.sort_by(f64::total_cmp);
        cuts.dedup_by(|a, b| (*a - *b).abs() <= ctx.tol);
        let mut segments: Vec<WindowSegment> = Vec::new();
        for pair in cuts.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            let mid = 0.5 * (a + b);
            let (first, last) = ctx.range(mid - c, mid + c)?;
            let (u_lo, u_hi) = ((a - lo) / (2.0 * c), (b - lo) / (2.0 * c));
            match segments.last_mut() {
                Some(s) if s.first == first && s.last == last => s.u_hi = u_hi,
                _ => segments.push(WindowSegment {
                    u_lo,
                    u_hi,
                    first,
                    last,
                }),
            }
        }
        if let Some(s) = segments.first_mut() {
            s.u_lo = 0.0;
        }
        if let Some(s) = segments.last_mut() {
            s.u_hi = 1.0;
        }
        Ok(segments)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    /// `H(z)` puts mass outside the base support.
    OutsideBaseSupport,
    /// Some `z'` in the support of `H(z)` has a different analysis support.
    OverlappingCells,
    /// `H(z)` excludes `z` itself.
    MissingObserved,
    /// Supports partition, but `H(z)` is not the base restricted to its cell.
    ProbabilityMismatch,
    /// `H(z)` is empty.
    EmptyDesign,
}

#[derive(Clone, Debug, Serialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub z: String,
    pub z_prime: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ConditionalityVerdict {
    pub is_conditional: bool,
    /// Number of distinct analysis supports seen.
    pub cells: usize,
    pub violation: Option<Violation>,
}

impl ConditionalityVerdict {
    fn failed(
        cells: usize,
        kind: ViolationKind,
        z: &Assignment,
        z_prime: Option<&Assignment>,
    ) -> Self {
        Self {
            is_conditional: false,
            cells,
            violation: Some(Violation {
                kind,
                z: z.to_string(),
                z_prime: z_prime.map(Assignment::to_string),
            }),
        }
    }
}

/// Whether every `|delta(z)|` over the support of `base` is shared only by `z`
/// and its complement. Returns a pair breaking that rule if there is one.
pub fn unique_balance_violation(
    base: &Design,
    x: &[f64],
) -> Result<Option<(Assignment, Assignment)>> {
    let support = base.enumerate()?;
    let scale = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let tol = 1e-12 * (1.0 + scale);
    let mut by_abs: Vec<(f64, &Assignment)> = support
        .iter()
        .map(|(z, _)| Ok((balance(z, x)?.abs(), z)))
        .collect::<Result<_>>()?;
    by_abs.sort_by(|p, q| p.0.total_cmp(&q.0).then_with(|| p.1.bits().cmp(q.1.bits())));
    for group in by_abs.chunk_by(|p, q| q.0 - p.0 <= tol) {
        let z = group[0].1;
        if let Some((_, other)) = group
            .iter()
            .find(|(_, zp)| *zp != z && **zp != z.complement())
        {
            return Ok(Some((z.clone(), (*other).clone())));
        }
    }
    Ok(None)
}

/// Whether `{support(H(z))}` partitions the support of `base` with `H` equal
/// to the base restricted to each cell.
pub fn is_conditional(map: &DesignMap, base: &Design) -> Result<ConditionalityVerdict> {
    if map.is_stochastic() {
        return Err(Error::Unsupported(
            "conditionality is defined for deterministic maps".into(),
        ));
    }
    let support = base.enumerate()?;
    let keys: Vec<CellKey> = support
        .par_iter()
        .map(|(z, _)| map.cache_key(z))
        .collect::<Result<_>>()?;
    let mut first_of: BTreeMap<&CellKey, usize> = BTreeMap::new();
    for (i, k) in keys.iter().enumerate() {
        first_of.entry(k).or_insert(i);
    }
    let reps: Vec<(&CellKey, usize)> = first_of.into_iter().collect();
    let designs: Vec<std::result::Result<Design, Error>> = reps
        .par_iter()
        .map(|&(_, i)| map.design_for(&support[i].0))
        .collect();

    // analysis support per key as sorted base positions
    let mut sets: HashMap<&CellKey, (Vec<usize>, Design)> = HashMap::new();
    for (&(key, i), design) in reps.iter().zip(designs) {
        let design = match design {
            Ok(d) => d,
            Err(Error::DegenerateDesign(_)) => {
                return Ok(ConditionalityVerdict::failed(
                    reps.len(),
                    ViolationKind::EmptyDesign,
                    &support[i].0,
                    None,
                ));
            }
            Err(e) => return Err(e),
        };
        let mut positions = Vec::new();
        for (zp, _) in design.enumerate()? {
            match base.position(zp)? {
                Some(j) => positions.push(j),
                None => {
                    return Ok(ConditionalityVerdict::failed(
                        reps.len(),
                        ViolationKind::OutsideBaseSupport,
                        &support[i].0,
                        Some(zp),
                    ))
                }
            }
        }
        positions.sort_unstable();
        sets.insert(key, (positions, design));
    }

    let mut distinct: Vec<&Vec<usize>> = sets.values().map(|(s, _)| s).collect();
    distinct.sort();
    distinct.dedup();
    let cells = distinct.len();

    for (i, key) in keys.iter().enumerate() {
        let (set, _) = &sets[key];
        if set.binary_search(&i).is_err() {
            return Ok(ConditionalityVerdict::failed(
                cells,
                ViolationKind::MissingObserved,
                &support[i].0,
                None,
            ));
        }
        for &j in set {
            if sets[&keys[j]].0 != *set {
                return Ok(ConditionalityVerdict::failed(
                    cells,
                    ViolationKind::OverlappingCells,
                    &support[i].0,
                    Some(&support[j].0),
                ));
            }
        }
    }

    for (set, design) in sets.values() {
        let mass: f64 = set.iter().map(|&j| support[j].1).sum();
        for &j in set {
            let expect = support[j].1 / mass;
            let got = design.probability(&support[j].0)?;
            if (expect - got).abs() > PROB_TOL {
                return Ok(ConditionalityVerdict::failed(
                    cells,
                    ViolationKind::ProbabilityMismatch,
                    &support[j].0,
                    None,
                ));
            }
        }
    }
    Ok(ConditionalityVerdict {
        is_conditional: true,
        cells,
        violation: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::population::synthetic;

    fn a(s: &str) -> Assignment {
        s.parse().unwrap()
    }

    fn generic_x(n: usize, seed: u64) -> Vec<f64> {
        synthetic::balance_identity(n, seed).unwrap().y0().to_vec()
    }

    #[test]
    fn bernoulli_given_count_maps_to_crd() {
        let base = Design::bernoulli_truncated(10, 0.5).unwrap();
        let map = DesignMap::conditional(base, Statistic::TreatedCount);
        let h = map.design_for(&a("1110000000")).unwrap();
        assert!(h
            .same_distribution(&Design::completely_randomized(10, 3).unwrap(), 1e-14)
            .unwrap());
    }

    #[test]
    fn crd_given_block_counts_is_blocked() {
        let blocks = Blocks::from_labels(&["a", "a", "a", "a", "b", "b", "b", "b"]);
        let map = DesignMap::conditional(
            Design::completely_randomized(8, 4).unwrap(),
            Statistic::BlockTreatedCounts(blocks.clone()),
        );
        let h = map.design_for(&a("11101000")).unwrap();
        let expect = Design::block_randomized(&blocks, &[3, 1]).unwrap();
        assert!(h.same_distribution(&expect, 1e-14).unwrap());
    }

    #[test]
    fn factorial_marginal_given_cells_is_joint() {
        let base = Design::factorial_marginal(6, 3).unwrap();
        let map = DesignMap::conditional(base.clone(), Statistic::FactorialCellCounts);
        for (z, _) in base.enumerate().unwrap().iter().step_by(37) {
            let gamma = z.cell_counts().unwrap();
            let h = map.design_for(z).unwrap();
            assert!(h
                .same_distribution(&Design::factorial_joint(gamma).unwrap(), 1e-14)
                .unwrap());
        }
    }

    #[test]
    fn constant_map_basics() {
        let eta = Design::completely_randomized(6, 3).unwrap();
        let map = DesignMap::constant(eta.clone());
        let h1 = map.design_for(&a("111000")).unwrap();
        let h2 = map.design_for(&a("010101")).unwrap();
        assert!(h1.same_distribution(&h2, 0.0).unwrap());
        assert!(is_conditional(&map, &eta).unwrap().is_conditional);
    }

    #[test]
    fn blocked_analyzed_as_crd_is_not_conditional() {
        let blocks = Blocks::from_labels(&["a", "a", "a", "a", "b", "b", "b", "b"]);
        let base = Design::block_randomized(&blocks, &[2, 2]).unwrap();
        let map = DesignMap::crd_of_blocked(8, 4).unwrap();
        let verdict = is_conditional(&map, &base).unwrap();
        assert!(!verdict.is_conditional);
        assert_eq!(
            verdict.violation.unwrap().kind,
            ViolationKind::OutsideBaseSupport
        );
    }

    #[test]
    fn partition_counts() {
        let base = Design::bernoulli_truncated(4, 0.5).unwrap();
        let cells = partition_from_statistic(&base, &Statistic::TreatedCount).unwrap();
        let sizes: Vec<usize> = cells.iter().map(|c| c.indices.len()).collect();
        assert_eq!(sizes, vec![4, 6, 4]);
        let one = partition_from_statistic(&base, &Statistic::Constant).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].indices.len(), 14);
        assert!((one[0].prob - 1.0).abs() < 1e-15);
    }

    #[test]
    fn balance_bins_on_small_crd() {
        let base = Design::completely_randomized(4, 2).unwrap();
        let x = vec![1.0, 2.0, 3.0, 4.0];
        let w = Statistic::balance_bin(x.clone(), vec![0.0]).unwrap();
        // balances: 1100 -> -2, 1010 -> -1, 1001 -> 0, 0110 -> 0, 0101 -> 1, 0011 -> 2
        for (z, _) in base.enumerate().unwrap() {
            let d = balance(z, &x).unwrap();
            let bin = if d < 0.0 { 0 } else { 1 };
            assert_eq!(w.evaluate(z).unwrap(), CellKey(vec![bin]));
        }
        let cells = partition_from_statistic(&base, &w).unwrap();
        assert_eq!(
            cells.iter().map(|c| c.indices.len()).collect::<Vec<_>>(),
            vec![2, 4]
        );
        let map = DesignMap::balance_partition(base.clone(), x.clone(), vec![]).unwrap();
        assert!(map
            .design_for(&a("1100"))
            .unwrap()
            .same_distribution(&base, 1e-15)
            .unwrap());
        assert!(
            is_conditional(
                &DesignMap::balance_partition(base.clone(), x, vec![0.0]).unwrap(),
                &base
            )
            .unwrap()
            .is_conditional
        );
        assert!(Statistic::balance_bin(vec![0.0; 4], vec![1.0, 1.0]).is_err());
    }

    #[test]
    fn ball_maps_are_not_conditional() {
        let base = Design::completely_randomized(6, 3).unwrap();
        let x = generic_x(6, 11);
        let inclusive = DesignMap::balance_ball(base.clone(), x.clone(), false).unwrap();
        let verdict = is_conditional(&inclusive, &base).unwrap();
        assert!(!verdict.is_conditional);
        let v = verdict.violation.unwrap();
        assert_eq!(v.kind, ViolationKind::OverlappingCells);
        assert!(v.z_prime.is_some());

        // the most imbalanced assignment sees the whole support
        let worst = base
            .enumerate()
            .unwrap()
            .iter()
            .max_by(|p, q| {
                balance(&p.0, &x)
                    .unwrap()
                    .abs()
                    .total_cmp(&balance(&q.0, &x).unwrap().abs())
            })
            .unwrap()
            .0
            .clone();
        assert!(inclusive
            .design_for(&worst)
            .unwrap()
            .same_distribution(&base, 1e-15)
            .unwrap());

        let strict = DesignMap::balance_ball(base.clone(), x.clone(), true).unwrap();
        let best = base
            .enumerate()
            .unwrap()
            .iter()
            .min_by(|p, q| {
                balance(&p.0, &x)
                    .unwrap()
                    .abs()
                    .total_cmp(&balance(&q.0, &x).unwrap().abs())
            })
            .unwrap()
            .0
            .clone();
        assert!(matches!(
            strict.design_for(&best),
            Err(Error::DegenerateDesign(_))
        ));
        assert!(!strict.design_for(&worst).unwrap().contains(&worst).unwrap());
        assert!(!is_conditional(&strict, &base).unwrap().is_conditional);
    }

    #[test]
    fn window_map_properties() {
        let base = Design::completely_randomized(6, 3).unwrap();
        let x = generic_x(6, 5);
        let wide = DesignMap::window(base.clone(), x.clone(), 1e6).unwrap();
        assert!(wide
            .design_for(&a("101010"))
            .unwrap()
            .same_distribution(&base, 1e-15)
            .unwrap());
        let spread: Vec<f64> = base
            .enumerate()
            .unwrap()
            .iter()
            .map(|(z, _)| balance(z, &x).unwrap())
            .collect();
        let range = spread.iter().cloned().fold(f64::MIN, f64::max)
            - spread.iter().cloned().fold(f64::MAX, f64::min);
        let narrow = DesignMap::window(base.clone(), x, range / 5.0).unwrap();
        for (z, _) in base.enumerate().unwrap() {
            assert!(narrow.design_for(z).unwrap().contains(z).unwrap());
        }
        let verdict = is_conditional(&narrow, &base).unwrap();
        assert!(!verdict.is_conditional);
        assert_eq!(
            verdict.violation.unwrap().kind,
            ViolationKind::OverlappingCells
        );
        assert!(DesignMap::window(base, vec![0.0; 6], 0.0).is_err());
    }

    #[test]
    fn stochastic_window_draws() {
        let base = Design::completely_randomized(6, 3).unwrap();
        let x = generic_x(6, 9);
        let c = 0.4;
        let map = DesignMap::stochastic_window(base.clone(), x.clone(), c).unwrap();
        let z = a("110100");
        let d = balance(&z, &x).unwrap();
        let draw = map.stochastic_design_for(&z, 0.5).unwrap();
        assert!((draw.w - d).abs() < 1e-15);
        for u in [0.0, 0.1, 0.37, 0.5, 0.99, 1.0] {
            let draw = map.stochastic_design_for(&z, u).unwrap();
            assert!(draw.design.contains(&z).unwrap());
            // masses are base masses renormalized over the window
            let window: Vec<&(Assignment, f64)> = base
                .enumerate()
                .unwrap()
                .iter()
                .filter(|(zp, _)| (balance(zp, &x).unwrap() - draw.w).abs() <= c + 1e-12)
                .collect();
            let nu: f64 = window.iter().map(|(_, p)| p).sum();
            assert_eq!(draw.design.support_len().unwrap(), window.len());
            for (zp, p) in window {
                assert!((draw.design.probability(zp).unwrap() - p / nu).abs() < 1e-14);
            }
        }
        assert!(map.design_for(&z).is_err());
    }

    #[test]
    fn window_segments_cover_unit_interval() {
        let base = Design::completely_randomized(8, 4).unwrap();
        let x = generic_x(8, 21);
        let map = DesignMap::stochastic_window(base.clone(), x, 0.3).unwrap();
        for (z, _) in base.enumerate().unwrap().iter().step_by(7) {
            let segs = map.window_segments(z).unwrap();
            assert_eq!(segs[0].u_lo, 0.0);
            assert_eq!(segs.last().unwrap().u_hi, 1.0);
            let total: f64 = segs.iter().map(WindowSegment::prob).sum();
            assert!((total - 1.0).abs() < 1e-12);
            for s in &segs {
                let mid = 0.5 * (s.u_lo + s.u_hi);
                assert_eq!(
                    map.stochastic_key(z, mid).unwrap(),
                    CellKey(vec![s.first as i64, s.last as i64])
                );
            }
        }
    }

    #[test]
    fn unique_balance_lemma_at_desk_scale() {
        for seed in 0..3 {
            let n = 12;
            let x = generic_x(n, 100 + seed);
            let base = Design::completely_randomized(n, n / 2).unwrap();
            let mut by_abs: Vec<(f64, &Assignment)> = base
                .enumerate()
                .unwrap()
                .iter()
                .map(|(z, _)| (balance(z, &x).unwrap().abs(), z))
                .collect();
            by_abs.sort_by(|p, q| p.0.total_cmp(&q.0));
            for group in by_abs.chunk_by(|p, q| (p.0 - q.0).abs() <= 1e-12) {
                assert_eq!(group.len(), 2);
                assert_eq!(group[0].1.complement(), *group[1].1);
            }
            assert!(unique_balance_violation(&base, &x).unwrap().is_none());
        }
    }

    #[test]
    fn tied_balances_are_reported() {
        let x = vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0];
        let base = Design::completely_randomized(6, 3).unwrap();
        let (a, b) = unique_balance_violation(&base, &x)
            .unwrap()
            .expect("equally spaced x ties balances");
        assert_ne!(a, b);
        assert_ne!(a.complement(), b);
        assert!((balance(&a, &x).unwrap().abs() - balance(&b, &x).unwrap().abs()).abs() < 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]

            #[test]
            fn conditional_maps_contain_observed(n in 3usize..=8, modulus in 1i64..4) {
                let base = Design::bernoulli_truncated(n, 0.5).unwrap();
                let w = Statistic::custom("first_bits", move |z: &Assignment| {
                    CellKey(vec![(z.bits()[0] as i64 + 2 * z.bits()[1] as i64) % modulus, z.n_treated() as i64 % 2])
                });
                let map = DesignMap::conditional(base.clone(), w.clone());
                let cells = partition_from_statistic(&base, &w).unwrap();
                let total: f64 = cells.iter().map(|c| c.prob).sum();
                prop_assert!((total - 1.0).abs() < 1e-12);
                let mut seen = vec![0usize; base.support_len().unwrap()];
                for c in &cells {
                    for &i in &c.indices { seen[i] += 1; }
                }
                prop_assert!(seen.iter().all(|&s| s == 1));
                for (z, p) in base.enumerate().unwrap() {
                    let h = map.design_for(z).unwrap();
                    prop_assert!(h.probability(z).unwrap() >= *p);
                    for (zp, _) in h.enumerate().unwrap() {
                        prop_assert_eq!(w.evaluate(zp).unwrap(), w.evaluate(z).unwrap());
                        prop_assert!(map.design_for(zp).unwrap().same_distribution(&h, 1e-15).unwrap());
                    }
                }
                prop_assert!(is_conditional(&map, &base).unwrap().is_conditional);
            }
        }
    }
}
