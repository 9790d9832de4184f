//! Deterministic pair matching and the conditioning event it induces.

use std::io::Write;
use std::sync::Arc;

use serde::Serialize;

use crate::design_maps::{CellKey, DesignMap, Statistic};
use crate::designs::Design;
use crate::error::{Error, Result};
use crate::population::{Assignment, Covariates};

/// Largest pair count for which within-pair permutations are enumerated.
pub const MAX_PERMUTED_PAIRS: usize = 20;

/// Matched pairs `(treated, control)` and the units left over.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Matching {
    pub pairs: Vec<(usize, usize)>,
    pub unmatched: Vec<usize>,
}

impl Matching {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Pairs as sorted unordered `{i, j}` sets.
    pub fn unordered(&self) -> Vec<(usize, usize)> {
        let mut v: Vec<(usize, usize)> = self
            .pairs
            .iter()
            .map(|&(a, b)| (a.min(b), a.max(b)))
            .collect();
        v.sort_unstable();
        v
    }

    pub fn same_pairs(&self, other: &Matching) -> bool {
        self.unordered() == other.unordered()
    }

    /// CSV with columns `pair_id, treated_idx, control_idx, distance`.
    pub fn write_csv<W: Write>(&self, x: &Covariates, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["pair_id", "treated_idx", "control_idx", "distance"])?;
        for (id, &(t, c)) in self.pairs.iter().enumerate() {
            let d = x.squared_distance(t, c).sqrt();
            w.write_record([id.to_string(), t.to_string(), c.to_string(), format!("{d}")])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Order-insensitive key of a matching's pair set.
pub fn pairs_key(m: &Matching) -> CellKey {
    CellKey(
        m.unordered()
            .into_iter()
            .flat_map(|(a, b)| [a as i64, b as i64])
            .collect(),
    )
}

/// A deterministic matching algorithm.
pub trait Matcher: Send + Sync {
    fn name(&self) -> String;
    fn pairs(&self, z: &Assignment, x: &Covariates) -> Result<Matching>;
}

/// Treated units in increasing index order each take the nearest unmatched
/// control (Euclidean distance, lowest index on ties).
#[derive(Clone, Copy, Debug, Default)]
pub struct GreedyMatcher;

impl Matcher for GreedyMatcher {
    fn name(&self) -> String {
        "greedy".into()
    }

    fn pairs(&self, z: &Assignment, x: &Covariates) -> Result<Matching> {
        greedy_match(z, x)
    }
}

pub fn greedy_match(z: &Assignment, x: &Covariates) -> Result<Matching> {
    if z.len() != x.n() {
        return Err(Error::Dimension {
            expected: x.n(),
            actual: z.len(),
        });
    }
    let n = z.len();
    let mut used = vec![false; n];
    let mut pairs = Vec::new();
    for t in (0..n).filter(|&i| z.is_treated(i)) {
        let mut best: Option<(usize, f64)> = None;
        for c in (0..n).filter(|&j| !z.is_treated(j) && !used[j]) {
            let d = x.squared_distance(t, c);
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((c, d));
            }
        }
        if let Some((c, _)) = best {
            used[c] = true;
            used[t] = true;
            pairs.push((t, c));
        }
    }
    let unmatched = (0..n).filter(|&i| !used[i]).collect();
    Ok(Matching { pairs, unmatched })
}

/// All assignments obtained by keeping or swapping treatment within each pair.
pub fn within_pair_permutations(m: &Matching, z: &Assignment) -> Result<Vec<Assignment>> {
    let l = m.len();
    if l > MAX_PERMUTED_PAIRS {
        return Err(Error::TooManyPairs {
            pairs: l,
            max: MAX_PERMUTED_PAIRS,
        });
    }
    let mut out = Vec::with_capacity(1 << l);
    for mask in 0u32..(1u32 << l) {
        let mut bits = z.bits().to_vec();
        for (k, &(a, b)) in m.pairs.iter().enumerate() {
            if mask >> k & 1 == 1 {
                bits.swap(a, b);
            }
        }
        out.push(Assignment::new(bits)?);
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize)]
pub struct PairCheck {
    pub passes: bool,
    pub observed: Matching,
    /// A within-pair permutation that the matcher pairs differently.
    pub witness: Option<String>,
    pub witness_matching: Option<Matching>,
}

/// Whether the matcher returns the observed pairs for every within-pair permutation.
pub fn pairmap_conditionality_check(
    z: &Assignment,
    x: &Covariates,
    matcher: &dyn Matcher,
) -> Result<PairCheck> {
    let observed = matcher.pairs(z, x)?;
    for zs in within_pair_permutations(&observed, z)? {
        let m = matcher.pairs(&zs, x)?;
        if !m.same_pairs(&observed) {
            return Ok(PairCheck {
                passes: false,
                observed,
                witness: Some(zs.to_string()),
                witness_matching: Some(m),
            });
        }
    }
    Ok(PairCheck {
        passes: true,
        observed,
        witness: None,
        witness_matching: None,
    })
}

/// `eta0` restricted to the assignments the matcher maps to the observed pairs.
pub fn valid_matching_design(
    z: &Assignment,
    eta0: &Design,
    x: &Covariates,
    matcher: &dyn Matcher,
) -> Result<Design> {
    if x.n() != eta0.n() {
        return Err(Error::Dimension {
            expected: eta0.n(),
            actual: x.n(),
        });
    }
    let target = pairs_key(&matcher.pairs(z, x)?);
    eta0.condition(|zs| matcher.pairs(zs, x).is_ok_and(|m| pairs_key(&m) == target))
}

/// The conditional map `z -> eta0 | R(z') = R(z)`.
pub fn valid_matching_map(eta0: Design, x: Covariates, matcher: Arc<dyn Matcher>) -> DesignMap {
    DesignMap::conditional(eta0, Statistic::Matching { x, matcher })
}

/// Small layouts used in tests and demonstrations.
pub mod fixtures {
    use super::*;

    /// Six units on a line where swapping treatment within two of the
    /// greedy pairs makes the greedy matcher pair the units differently.
    pub fn rematching_layout() -> (Covariates, Assignment) {
        let x = Covariates::from_column(vec![0.0, 1.0, 1.8, 5.0, 10.0, 10.5]).expect("finite");
        let z: Assignment = "101010".parse().expect("bits");
        (x, z)
    }

    /// Pairs of units with identical covariates, so matching is exact.
    pub fn exact_layout() -> (Covariates, Assignment) {
        let x = Covariates::from_column(vec![0.0, 0.0, 3.0, 3.0, 7.0, 7.0, 12.0, 12.0])
            .expect("finite");
        let z: Assignment = "10011001".parse().expect("bits");
        (x, z)
    }
}
