//! Randomization designs: discrete distributions over assignment vectors.
//!
//! Parametric families enumerate their support lazily (subject to an
//! enumeration cap) and always sample with a direct sampler, so draws never
//! depend on whether the support happens to have been enumerated already.
//! Conditioning restricts an enumerable design to a predicate and
//! renormalizes, yielding an explicit design.

use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, OnceLock};

use itertools::Itertools;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::population::{Assignment, Blocks, Covariates, Population};
use crate::PROB_TOL;

/// Largest support that will be enumerated.
pub const DEFAULT_ENUMERATION_CAP: usize = 2_000_000;

type PredicateFn = dyn Fn(&Assignment) -> bool + Send + Sync;

/// Restriction of the support to assignments where the analysis is defined.
#[derive(Clone)]
pub enum Admissibility {
    Any,
    /// At least one treated and one control unit.
    BothArms,
    /// At least one treated and one control unit in every block.
    BothArmsPerBlock(Blocks),
    Custom {
        name: String,
        f: Arc<PredicateFn>,
    },
}

impl Admissibility {
    pub fn custom(
        name: impl Into<String>,
        f: impl Fn(&Assignment) -> bool + Send + Sync + 'static,
    ) -> Self {
        Admissibility::Custom {
            name: name.into(),
            f: Arc::new(f),
        }
    }

    pub fn admits(&self, z: &Assignment) -> bool {
        match self {
            Admissibility::Any => true,
            Admissibility::BothArms => {
                let t = z.n_treated();
                t > 0 && t < z.len()
            }
            Admissibility::BothArmsPerBlock(blocks) => blocks.both_arms_everywhere(z),
            Admissibility::Custom { f, .. } => f(z),
        }
    }

    pub fn name(&self) -> &str {
        match self {
            Admissibility::Any => "any",
            Admissibility::BothArms => "both_arms",
            Admissibility::BothArmsPerBlock(_) => "both_arms_per_block",
            Admissibility::Custom { name, .. } => name,
        }
    }
}

impl fmt::Debug for Admissibility {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug)]
enum Family {
    BernoulliTruncated { n: usize, pi: f64 },
    BernoulliPropensity { p: Vec<f64> },
    CompletelyRandomized { n: usize, k: usize },
    BlockRandomized { blocks: Blocks, kappa: Vec<usize> },
    FactorialMarginal { n: usize, n1: usize },
    FactorialJoint { gamma: [usize; 4] },
    Explicit { label: String },
}

struct Inner {
    family: Family,
    admissible: Admissibility,
    cap: usize,
    support: OnceLock<Vec<(Assignment, f64)>>,
    index: OnceLock<HashMap<Assignment, usize>>,
    cumulative: OnceLock<Vec<f64>>,
}

/// A probability distribution over assignment vectors. Cheap to clone.
#[derive(Clone)]
pub struct Design {
    inner: Arc<Inner>,
}

impl fmt::Debug for Design {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Design({})", self.label())
    }
}

pub(crate) fn choose(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    (0..k)
        .fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
        .round()
}

fn check_probability(p: f64, what: &str) -> Result<()> {
    if p.is_finite() && p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(Error::Parameter(format!(
            "{what} must lie strictly between 0 and 1, got {p}"
        )))
    }
}

impl Design {
    fn from_family(family: Family, admissible: Admissibility) -> Self {
        Self {
            inner: Arc::new(Inner {
                family,
                admissible,
                cap: DEFAULT_ENUMERATION_CAP,
                support: OnceLock::new(),
                index: OnceLock::new(),
                cumulative: OnceLock::new(),
            }),
        }
    }

    /// Independent `pi`-coin flips, excluding the all-treated and all-control assignments.
    pub fn bernoulli_truncated(n: usize, pi: f64) -> Result<Self> {
        if n < 2 {
            return Err(Error::Parameter(format!(
                "bernoulli design needs n >= 2, got {n}"
            )));
        }
        check_probability(pi, "pi")?;
        Ok(Self::from_family(
            Family::BernoulliTruncated { n, pi },
            Admissibility::BothArms,
        ))
    }

    /// Unit-specific treatment probabilities restricted to `admissible`.
    pub fn bernoulli_propensity(p: Vec<f64>, admissible: Admissibility) -> Result<Self> {
        if p.len() < 2 {
            return Err(Error::Parameter(format!(
                "propensity design needs n >= 2, got {}",
                p.len()
            )));
        }
        for &pi in &p {
            check_probability(pi, "propensity")?;
        }
        let design = Self::from_family(Family::BernoulliPropensity { p }, admissible);
        if design.is_enumerable() && design.enumerate()?.is_empty() {
            return Err(Error::DegenerateDesign("no admissible assignment".into()));
        }
        Ok(design)
    }

    /// Uniform over all assignments with exactly `k` of `n` units treated.
    pub fn completely_randomized(n: usize, k: usize) -> Result<Self> {
        if k == 0 || k >= n {
            return Err(Error::Parameter(format!(
                "complete randomization needs 0 < k < n, got k={k}, n={n}"
            )));
        }
        Ok(Self::from_family(
            Family::CompletelyRandomized { n, k },
            Admissibility::Any,
        ))
    }

    /// Complete randomization within each block with `kappa[j]` treated in block `j`.
    pub fn block_randomized(blocks: &Blocks, kappa: &[usize]) -> Result<Self> {
        if kappa.len() != blocks.n_blocks() {
            return Err(Error::Dimension {
                expected: blocks.n_blocks(),
                actual: kappa.len(),
            });
        }
        for (j, (&k, size)) in kappa.iter().zip(blocks.sizes()).enumerate() {
            if k == 0 || k >= size {
                return Err(Error::Parameter(format!(
                    "block {:?} has {size} units; treated count must be in 1..{size}, got {k}",
                    blocks.label(j)
                )));
            }
        }
        Ok(Self::from_family(
            Family::BlockRandomized {
                blocks: blocks.clone(),
                kappa: kappa.to_vec(),
            },
            Admissibility::Any,
        ))
    }

    /// Two factors, each completely randomized with `n1` active units,
    /// keeping only pairs where all four treatment combinations are occupied.
    pub fn factorial_marginal(n: usize, n1: usize) -> Result<Self> {
        if n1 == 0 || n1 >= n {
            return Err(Error::Parameter(format!(
                "factorial design needs 0 < n1 < n, got n1={n1}, n={n}"
            )));
        }
        let nonempty = Admissibility::custom("all_cells_nonempty", |z: &Assignment| {
            z.cell_counts().is_some_and(|c| c.iter().all(|&v| v > 0))
        });
        let design = Self::from_family(Family::FactorialMarginal { n, n1 }, nonempty);
        // every cell needs a unit and a factor level with n1 (or n-n1) units must hit two cells
        if n < 4 || n1 < 2 || n - n1 < 2 {
            return Err(Error::DegenerateDesign(format!(
                "no pair of factor assignments with n={n}, n1={n1} fills all four cells"
            )));
        }
        Ok(design)
    }

    /// Complete randomization over the four joint cells, indexed `2*z1 + z2`.
    pub fn factorial_joint(gamma: [usize; 4]) -> Result<Self> {
        if gamma.contains(&0) {
            return Err(Error::Parameter(format!(
                "every factorial cell needs a unit, got {gamma:?}"
            )));
        }
        Ok(Self::from_family(
            Family::FactorialJoint { gamma },
            Admissibility::Any,
        ))
    }

    /// An explicit design from `(assignment, weight)` pairs, normalized to sum to 1.
    ///
    /// Weights must be positive and assignments distinct.
    pub fn explicit(label: impl Into<String>, atoms: Vec<(Assignment, f64)>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::DegenerateDesign(
                "explicit design with empty support".into(),
            ));
        }
        if let Some((z, w)) = atoms.iter().find(|(_, w)| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::Parameter(format!(
                "weight {w} for {z} is not positive"
            )));
        }
        let total: f64 = atoms.iter().map(|(_, w)| w).sum();
        let atoms: Vec<_> = atoms.into_iter().map(|(z, w)| (z, w / total)).collect();
        let design = Self::explicit_normalized(label.into(), atoms);
        if design.index().len() != design.enumerate()?.len() {
            return Err(Error::Parameter(
                "explicit design lists an assignment twice".into(),
            ));
        }
        let n = design.enumerate()?[0].0.len();
        if design.enumerate()?.iter().any(|(z, _)| z.len() != n) {
            return Err(Error::Parameter(
                "explicit design mixes assignment lengths".into(),
            ));
        }
        Ok(design)
    }

    /// Uniform over `assignments`.
    pub fn uniform(label: impl Into<String>, assignments: Vec<Assignment>) -> Result<Self> {
        Self::explicit(label, assignments.into_iter().map(|z| (z, 1.0)).collect())
    }

    fn explicit_normalized(label: String, atoms: Vec<(Assignment, f64)>) -> Self {
        let design = Self::from_family(Family::Explicit { label }, Admissibility::Any);
        let _ = design.inner.support.set(atoms);
        design
    }

    /// Replaces the admissibility restriction.
    pub fn with_admissibility(&self, admissible: Admissibility) -> Result<Self> {
        if matches!(self.inner.family, Family::Explicit { .. }) {
            return self.condition(|z| admissible.admits(z));
        }
        let design = Self::from_family(self.inner.family.clone(), admissible);
        Ok(design.with_cap_inner(self.inner.cap))
    }

    /// Same design with a different enumeration cap.
    pub fn with_enumeration_cap(&self, cap: usize) -> Self {
        let design = Self::from_family(self.inner.family.clone(), self.inner.admissible.clone());
        if let Some(s) = self.inner.support.get() {
            if matches!(self.inner.family, Family::Explicit { .. }) {
                let _ = design.inner.support.set(s.clone());
            }
        }
        design.with_cap_inner(cap)
    }

    fn with_cap_inner(self, cap: usize) -> Self {
        let inner = Arc::try_unwrap(self.inner).unwrap_or_else(|arc| Inner {
            family: arc.family.clone(),
            admissible: arc.admissible.clone(),
            cap,
            support: OnceLock::new(),
            index: OnceLock::new(),
            cumulative: OnceLock::new(),
        });
        Self {
            inner: Arc::new(Inner { cap, ..inner }),
        }
    }

    pub fn n(&self) -> usize {
        match &self.inner.family {
            Family::BernoulliTruncated { n, .. }
            | Family::CompletelyRandomized { n, .. }
            | Family::FactorialMarginal { n, .. } => *n,
            Family::BernoulliPropensity { p } => p.len(),
            Family::BlockRandomized { blocks, .. } => blocks.len(),
            Family::FactorialJoint { gamma } => gamma.iter().sum(),
            Family::Explicit { .. } => self.inner.support.get().map_or(0, |s| s[0].0.len()),
        }
    }

    /// 2 for factorial designs (pairs of bit vectors), 1 otherwise.
    pub fn arity(&self) -> usize {
        match &self.inner.family {
            Family::FactorialMarginal { .. } | Family::FactorialJoint { .. } => 2,
            Family::Explicit { .. } => self.inner.support.get().map_or(1, |s| s[0].0.arity()),
            _ => 1,
        }
    }

    pub fn admissibility(&self) -> &Admissibility {
        &self.inner.admissible
    }

    pub fn label(&self) -> String {
        match &self.inner.family {
            Family::BernoulliTruncated { n, pi } => format!("bernoulli_truncated(n={n}, pi={pi})"),
            Family::BernoulliPropensity { p } => format!("bernoulli_propensity(n={})", p.len()),
            Family::CompletelyRandomized { n, k } => format!("completely_randomized(n={n}, k={k})"),
            Family::BlockRandomized { kappa, .. } => format!("block_randomized(kappa={kappa:?})"),
            Family::FactorialMarginal { n, n1 } => format!("factorial_marginal(n={n}, n1={n1})"),
            Family::FactorialJoint { gamma } => format!("factorial_joint(gamma={gamma:?})"),
            Family::Explicit { label } => label.clone(),
        }
    }

    /// Size of the unrestricted family support (before admissibility filtering).
    pub fn raw_support_size(&self) -> f64 {
        match &self.inner.family {
            Family::BernoulliTruncated { n, .. } => 2f64.powi(*n as i32),
            Family::BernoulliPropensity { p } => 2f64.powi(p.len() as i32),
            Family::CompletelyRandomized { n, k } => choose(*n, *k),
            Family::BlockRandomized { blocks, kappa } => blocks
                .sizes()
                .iter()
                .zip(kappa)
                .map(|(&s, &k)| choose(s, k))
                .product(),
            Family::FactorialMarginal { n, n1 } => choose(*n, *n1).powi(2),
            Family::FactorialJoint { gamma } => multinomial(gamma),
            Family::Explicit { .. } => self.inner.support.get().map_or(0, Vec::len) as f64,
        }
    }

    pub fn is_enumerable(&self) -> bool {
        self.raw_support_size() <= self.inner.cap as f64
    }

    /// The complete support with probabilities, computed once and cached.
    pub fn enumerate(&self) -> Result<&[(Assignment, f64)]> {
        if let Some(s) = self.inner.support.get() {
            return Ok(s);
        }
        if !self.is_enumerable() {
            return Err(Error::EnumerationTooLarge {
                size: self.raw_support_size(),
                cap: self.inner.cap,
            });
        }
        let raw = self.raw_support();
        let admissible: Vec<(Assignment, f64)> = raw
            .into_iter()
            .filter(|(z, _)| self.inner.admissible.admits(z))
            .collect();
        if admissible.is_empty() {
            return Err(Error::DegenerateDesign(format!(
                "{} has no admissible assignment",
                self.label()
            )));
        }
        let total: f64 = admissible.iter().map(|(_, w)| w).sum();
        let atoms = admissible
            .into_iter()
            .map(|(z, w)| (z, w / total))
            .collect();
        Ok(self.inner.support.get_or_init(|| atoms))
    }

    pub fn support_len(&self) -> Result<usize> {
        Ok(self.enumerate()?.len())
    }

    fn index(&self) -> &HashMap<Assignment, usize> {
        self.inner.index.get_or_init(|| {
            self.inner
                .support
                .get()
                .map(|s| {
                    s.iter()
                        .enumerate()
                        .map(|(i, (z, _))| (z.clone(), i))
                        .collect()
                })
                .unwrap_or_default()
        })
    }

    /// Position of `z` in `enumerate()`, if it is in the support.
    pub fn position(&self, z: &Assignment) -> Result<Option<usize>> {
        self.enumerate()?;
        Ok(self.index().get(z).copied())
    }

    pub fn contains(&self, z: &Assignment) -> Result<bool> {
        Ok(self.probability(z)? > 0.0)
    }

    /// Point mass `eta(z)`.
    ///
    /// Uses closed forms where the family has one, so it also works for
    /// designs too large to enumerate.
    pub fn probability(&self, z: &Assignment) -> Result<f64> {
        if z.len() != self.n() || z.arity() != self.arity() {
            return Ok(0.0);
        }
        if let Some(s) = self.inner.support.get() {
            return Ok(self.index().get(z).map_or(0.0, |&i| s[i].1));
        }
        if !self.inner.admissible.admits(z) {
            return Ok(0.0);
        }
        let default_adm = matches!(
            self.inner.admissible,
            Admissibility::Any | Admissibility::BothArms
        );
        match (&self.inner.family, default_adm) {
            (Family::BernoulliTruncated { n, pi }, true) => {
                let t = z.n_treated();
                let raw = pi.powi(t as i32) * (1.0 - pi).powi((n - t) as i32);
                Ok(raw / (1.0 - pi.powi(*n as i32) - (1.0 - pi).powi(*n as i32)))
            }
            (Family::BernoulliPropensity { p }, true)
                if matches!(self.inner.admissible, Admissibility::BothArms) =>
            {
                let all_c: f64 = p.iter().map(|pi| 1.0 - pi).product();
                let all_t: f64 = p.iter().product();
                Ok(bernoulli_mass(p, z) / (1.0 - all_c - all_t))
            }
            (Family::BernoulliPropensity { p }, true) => Ok(bernoulli_mass(p, z)),
            (Family::CompletelyRandomized { n, k }, true) => Ok(if z.n_treated() == *k {
                1.0 / choose(*n, *k)
            } else {
                0.0
            }),
            (Family::BlockRandomized { blocks, kappa }, true) => {
                let counts = blocks.treated_counts(z);
                if counts == *kappa {
                    Ok(1.0 / self.raw_support_size())
                } else {
                    Ok(0.0)
                }
            }
            (Family::FactorialJoint { gamma }, true) => Ok(if z.cell_counts() == Some(*gamma) {
                1.0 / multinomial(gamma)
            } else {
                0.0
            }),
            _ => {
                let i = self.position(z)?;
                Ok(i.map_or(0.0, |i| self.enumerate().map(|s| s[i].1).unwrap_or(0.0)))
            }
        }
    }

    fn raw_support(&self) -> Vec<(Assignment, f64)> {
        match &self.inner.family {
            Family::BernoulliTruncated { n, pi } => {
                let p = vec![*pi; *n];
                all_bit_vectors(*n)
                    .map(|z| {
                        let w = bernoulli_mass(&p, &z);
                        (z, w)
                    })
                    .collect()
            }
            Family::BernoulliPropensity { p } => all_bit_vectors(p.len())
                .map(|z| {
                    let w = bernoulli_mass(p, &z);
                    (z, w)
                })
                .collect(),
            Family::CompletelyRandomized { n, k } => combinations_of(*n, *k)
                .into_iter()
                .map(|z| (z, 1.0))
                .collect(),
            Family::BlockRandomized { blocks, kappa } => {
                let n = blocks.len();
                let per_block: Vec<Vec<Vec<usize>>> = blocks
                    .units()
                    .into_iter()
                    .zip(kappa)
                    .map(|(units, &k)| units.into_iter().combinations(k).collect())
                    .collect();
                per_block
                    .into_iter()
                    .multi_cartesian_product()
                    .map(|choice| {
                        let mut bits = vec![0u8; n];
                        for i in choice.into_iter().flatten() {
                            bits[i] = 1;
                        }
                        (Assignment::from_bits_unchecked(bits), 1.0)
                    })
                    .collect()
            }
            Family::FactorialMarginal { n, n1 } => {
                let single = combinations_of(*n, *n1);
                let mut out = Vec::with_capacity(single.len() * single.len());
                for a in &single {
                    for b in &single {
                        let z = Assignment::factorial(a.bits().to_vec(), b.bits().to_vec())
                            .expect("same length");
                        out.push((z, 1.0));
                    }
                }
                out
            }
            Family::FactorialJoint { gamma } => {
                let n: usize = gamma.iter().sum();
                let mut out = Vec::new();
                let mut labels = vec![0usize; n];
                let mut remaining = *gamma;
                fill_cells(0, &mut labels, &mut remaining, &mut out);
                out.into_iter().map(|z| (z, 1.0)).collect()
            }
            Family::Explicit { .. } => self.inner.support.get().cloned().unwrap_or_default(),
        }
    }

    /// One draw from the design.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Assignment {
        if let Family::Explicit { .. } = self.inner.family {
            return self.sample_explicit(rng);
        }
        loop {
            let z = self.sample_family(rng);
            if self.inner.admissible.admits(&z) {
                return z;
            }
        }
    }

    fn sample_explicit<R: Rng + ?Sized>(&self, rng: &mut R) -> Assignment {
        let support = self
            .inner
            .support
            .get()
            .expect("explicit designs store their support");
        let cumulative = self.inner.cumulative.get_or_init(|| {
            let mut acc = 0.0;
            support
                .iter()
                .map(|(_, p)| {
                    acc += p;
                    acc
                })
                .collect()
        });
        let u: f64 = rng.random::<f64>() * cumulative[cumulative.len() - 1];
        let i = cumulative
            .partition_point(|&c| c <= u)
            .min(support.len() - 1);
        support[i].0.clone()
    }

    fn sample_family<R: Rng + ?Sized>(&self, rng: &mut R) -> Assignment {
        match &self.inner.family {
            Family::BernoulliTruncated { n, pi } => Assignment::from_bits_unchecked(
                (0..*n)
                    .map(|_| u8::from(rng.random::<f64>() < *pi))
                    .collect(),
            ),
            Family::BernoulliPropensity { p } => Assignment::from_bits_unchecked(
                p.iter()
                    .map(|&pi| u8::from(rng.random::<f64>() < pi))
                    .collect(),
            ),
            Family::CompletelyRandomized { n, k } => {
                let mut bits = vec![0u8; *n];
                for i in choose_indices(*n, *k, rng) {
                    bits[i] = 1;
                }
                Assignment::from_bits_unchecked(bits)
            }
            Family::BlockRandomized { blocks, kappa } => {
                let mut bits = vec![0u8; blocks.len()];
                for (units, &k) in blocks.units().iter().zip(kappa) {
                    for j in choose_indices(units.len(), k, rng) {
                        bits[units[j]] = 1;
                    }
                }
                Assignment::from_bits_unchecked(bits)
            }
            Family::FactorialMarginal { n, n1 } => {
                let mut a = vec![0u8; *n];
                let mut b = vec![0u8; *n];
                for i in choose_indices(*n, *n1, rng) {
                    a[i] = 1;
                }
                for i in choose_indices(*n, *n1, rng) {
                    b[i] = 1;
                }
                Assignment::factorial(a, b).expect("same length")
            }
            Family::FactorialJoint { gamma } => {
                let mut labels: Vec<u8> = (0..4u8)
                    .flat_map(|c| std::iter::repeat_n(c, gamma[c as usize]))
                    .collect();
                let n = labels.len();
                for i in (1..n).rev() {
                    let j = rng.random_range(0..=i);
                    labels.swap(i, j);
                }
                let a = labels.iter().map(|c| c >> 1).collect();
                let b = labels.iter().map(|c| c & 1).collect();
                Assignment::factorial(a, b).expect("same length")
            }
            Family::Explicit { .. } => unreachable!("handled by sample_explicit"),
        }
    }

    /// Restriction to `predicate` with renormalized masses.
    pub fn condition(&self, predicate: impl Fn(&Assignment) -> bool) -> Result<Design> {
        let kept: Vec<(Assignment, f64)> = self
            .enumerate()?
            .iter()
            .filter(|(z, _)| predicate(z))
            .cloned()
            .collect();
        self.conditioned_from(kept)
    }

    /// Restriction to the support positions in `indices`.
    pub fn condition_on_indices(&self, indices: &[usize]) -> Result<Design> {
        let support = self.enumerate()?;
        let kept = indices.iter().map(|&i| support[i].clone()).collect();
        self.conditioned_from(kept)
    }

    fn conditioned_from(&self, kept: Vec<(Assignment, f64)>) -> Result<Design> {
        if kept.is_empty() {
            return Err(Error::DegenerateDesign(format!(
                "conditioning {} leaves an empty support",
                self.label()
            )));
        }
        let total: f64 = kept.iter().map(|(_, w)| w).sum();
        let atoms = kept.into_iter().map(|(z, w)| (z, w / total)).collect();
        Ok(Self::explicit_normalized(
            format!("{} | restricted", self.label()),
            atoms,
        ))
    }

    /// Compares two enumerable designs as distributions.
    pub fn same_distribution(&self, other: &Design, tol: f64) -> Result<bool> {
        let a = self.enumerate()?;
        let b = other.enumerate()?;
        if a.len() != b.len() {
            return Ok(false);
        }
        for (z, p) in a {
            let q = other.probability(z)?;
            if (p - q).abs() > tol {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// The structured descriptor of a parametric design; `None` for explicit
    /// designs and custom admissibility predicates.
    pub fn descriptor(&self) -> Option<DesignSpec> {
        let admissible = match &self.inner.admissible {
            Admissibility::Any => AdmissibleTag::Any,
            Admissibility::BothArms => AdmissibleTag::BothArms,
            Admissibility::BothArmsPerBlock(_) => AdmissibleTag::BothArmsPerBlock,
            Admissibility::Custom { .. } => {
                if !matches!(self.inner.family, Family::FactorialMarginal { .. }) {
                    return None;
                }
                AdmissibleTag::Any
            }
        };
        let blocks_of = |adm: &Admissibility| match adm {
            Admissibility::BothArmsPerBlock(b) => {
                Some(b.ids().iter().map(|&i| b.label(i).to_string()).collect())
            }
            _ => None,
        };
        Some(match &self.inner.family {
            Family::BernoulliTruncated { n, pi } => {
                DesignSpec::BernoulliTruncated { n: *n, pi: *pi }
            }
            Family::BernoulliPropensity { p } => DesignSpec::BernoulliPropensity {
                p: p.clone(),
                admissible,
                blocks: blocks_of(&self.inner.admissible),
            },
            Family::CompletelyRandomized { n, k } => DesignSpec::CompletelyRandomized {
                n: *n,
                k: *k,
                admissible,
                blocks: blocks_of(&self.inner.admissible),
            },
            Family::BlockRandomized { blocks, kappa } => DesignSpec::BlockRandomized {
                kappa: kappa.clone(),
                blocks: Some(
                    blocks
                        .ids()
                        .iter()
                        .map(|&i| blocks.label(i).to_string())
                        .collect(),
                ),
            },
            Family::FactorialMarginal { n, n1 } => DesignSpec::FactorialMarginal { n: *n, n1: *n1 },
            Family::FactorialJoint { gamma } => DesignSpec::FactorialJoint { gamma: *gamma },
            Family::Explicit { .. } => return None,
        })
    }
}

fn multinomial(gamma: &[usize; 4]) -> f64 {
    let mut remaining: usize = gamma.iter().sum();
    let mut acc = 1.0;
    for &g in gamma {
        acc *= choose(remaining, g);
        remaining -= g;
    }
    acc
}

fn bernoulli_mass(p: &[f64], z: &Assignment) -> f64 {
    p.iter()
        .zip(z.bits())
        .map(|(&pi, &b)| if b == 1 { pi } else { 1.0 - pi })
        .product()
}

fn all_bit_vectors(n: usize) -> impl Iterator<Item = Assignment> {
    (0u64..1u64 << n).map(move |mask| {
        Assignment::from_bits_unchecked((0..n).map(|i| ((mask >> i) & 1) as u8).collect())
    })
}

fn combinations_of(n: usize, k: usize) -> Vec<Assignment> {
    (0..n)
        .combinations(k)
        .map(|treated| {
            let mut bits = vec![0u8; n];
            for i in treated {
                bits[i] = 1;
            }
            Assignment::from_bits_unchecked(bits)
        })
        .collect()
}

fn fill_cells(
    pos: usize,
    labels: &mut [usize],
    remaining: &mut [usize; 4],
    out: &mut Vec<Assignment>,
) {
    if pos == labels.len() {
        let a = labels.iter().map(|&c| (c >> 1) as u8).collect();
        let b = labels.iter().map(|&c| (c & 1) as u8).collect();
        out.push(Assignment::factorial(a, b).expect("same length"));
        return;
    }
    for c in 0..4 {
        if remaining[c] > 0 {
            remaining[c] -= 1;
            labels[pos] = c;
            fill_cells(pos + 1, labels, remaining, out);
            remaining[c] += 1;
        }
    }
}

/// `k` distinct indices from `0..n` by a partial Fisher-Yates shuffle.
fn choose_indices<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.random_range(i..n);
        idx.swap(i, j);
    }
    idx.truncate(k);
    idx
}

/// Logistic propensities `p_i = 1 / (1 + exp(-(alpha0 + alpha1 . x_i)))`.
pub fn logistic_propensity(x: &Covariates, alpha0: f64, alpha1: &[f64]) -> Result<Vec<f64>> {
    if alpha1.len() != x.dim() {
        return Err(Error::Dimension {
            expected: x.dim(),
            actual: alpha1.len(),
        });
    }
    Ok((0..x.n())
        .map(|i| {
            let eta = alpha0 + x.row(i).iter().zip(alpha1).map(|(a, b)| a * b).sum::<f64>();
            1.0 / (1.0 + (-eta).exp())
        })
        .collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdmissibleTag {
    Any,
    #[default]
    BothArms,
    BothArmsPerBlock,
}

/// Text descriptor of a parametric design, as used in scenario files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum DesignSpec {
    BernoulliTruncated {
        n: usize,
        pi: f64,
    },
    BernoulliPropensity {
        p: Vec<f64>,
        #[serde(default)]
        admissible: AdmissibleTag,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        blocks: Option<Vec<String>>,
    },
    /// Propensities from the population's covariates through a logistic link.
    LogisticPropensity {
        alpha0: f64,
        alpha1: Vec<f64>,
        #[serde(default)]
        admissible: AdmissibleTag,
    },
    CompletelyRandomized {
        n: usize,
        k: usize,
        #[serde(default = "any_tag")]
        admissible: AdmissibleTag,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        blocks: Option<Vec<String>>,
    },
    BlockRandomized {
        kappa: Vec<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        blocks: Option<Vec<String>>,
    },
    FactorialMarginal {
        n: usize,
        n1: usize,
    },
    FactorialJoint {
        gamma: [usize; 4],
    },
}

fn any_tag() -> AdmissibleTag {
    AdmissibleTag::Any
}

impl DesignSpec {
    pub fn family(&self) -> &'static str {
        match self {
            DesignSpec::BernoulliTruncated { .. } => "bernoulli_truncated",
            DesignSpec::BernoulliPropensity { .. } => "bernoulli_propensity",
            DesignSpec::LogisticPropensity { .. } => "logistic_propensity",
            DesignSpec::CompletelyRandomized { .. } => "completely_randomized",
            DesignSpec::BlockRandomized { .. } => "block_randomized",
            DesignSpec::FactorialMarginal { .. } => "factorial_marginal",
            DesignSpec::FactorialJoint { .. } => "factorial_joint",
        }
    }

    /// Builds the design; block labels and covariates missing from the
    /// descriptor are taken from `context`.
    pub fn build(&self, context: Option<&Population>) -> Result<Design> {
        let resolve_blocks = |explicit: &Option<Vec<String>>| -> Result<Blocks> {
            match explicit {
                Some(labels) => Ok(Blocks::from_labels(labels)),
                None => context
                    .and_then(Population::blocks)
                    .cloned()
                    .ok_or_else(|| {
                        Error::Parameter("design needs block labels but none were given".into())
                    }),
            }
        };
        let admissibility =
            |tag: AdmissibleTag, blocks: &Option<Vec<String>>| -> Result<Admissibility> {
                Ok(match tag {
                    AdmissibleTag::Any => Admissibility::Any,
                    AdmissibleTag::BothArms => Admissibility::BothArms,
                    AdmissibleTag::BothArmsPerBlock => {
                        Admissibility::BothArmsPerBlock(resolve_blocks(blocks)?)
                    }
                })
            };
        match self {
            DesignSpec::BernoulliTruncated { n, pi } => Design::bernoulli_truncated(*n, *pi),
            DesignSpec::BernoulliPropensity {
                p,
                admissible,
                blocks,
            } => Design::bernoulli_propensity(p.clone(), admissibility(*admissible, blocks)?),
            DesignSpec::LogisticPropensity {
                alpha0,
                alpha1,
                admissible,
            } => {
                let x = context.and_then(Population::covariates).ok_or_else(|| {
                    Error::Parameter("logistic propensity needs covariates".into())
                })?;
                let alpha1 = if alpha1.len() == 1 && x.dim() > 1 {
                    vec![alpha1[0]; x.dim()]
                } else {
                    alpha1.clone()
                };
                let p = logistic_propensity(x, *alpha0, &alpha1)?;
                Design::bernoulli_propensity(p, admissibility(*admissible, &None)?)
            }
            DesignSpec::CompletelyRandomized {
                n,
                k,
                admissible,
                blocks,
            } => {
                let crd = Design::completely_randomized(*n, *k)?;
                match admissible {
                    AdmissibleTag::Any => Ok(crd),
                    tag => crd.with_admissibility(admissibility(*tag, blocks)?),
                }
            }
            DesignSpec::BlockRandomized { kappa, blocks } => {
                Design::block_randomized(&resolve_blocks(blocks)?, kappa)
            }
            DesignSpec::FactorialMarginal { n, n1 } => Design::factorial_marginal(*n, *n1),
            DesignSpec::FactorialJoint { gamma } => Design::factorial_joint(*gamma),
        }
    }
}

/// Checks that probabilities are positive and sum to one.
pub fn check_normalized(atoms: &[(Assignment, f64)]) -> bool {
    let total: f64 = atoms.iter().map(|(_, p)| p).sum();
    atoms.iter().all(|(_, p)| *p > 0.0) && (total - 1.0).abs() <= PROB_TOL
}
