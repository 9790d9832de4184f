//! The fixed finite population: potential outcomes, covariates and blocks.
//!
//! Randomization-based inference treats `y0` and `y1` as fixed; the only
//! randomness is the assignment vector. A [`Population`] is immutable after
//! construction and can be shared freely between worker threads.

use std::collections::HashMap;
use std::fmt;
use std::io::Read;
use std::path::Path;
use std::sync::Arc;

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng;

/// A treatment assignment vector.
///
/// Most designs produce a single bit vector. Factorial designs produce a pair
/// of bit vectors, one per factor; `bits()` always returns the first factor.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Assignment {
    bits: Vec<u8>,
    second: Option<Vec<u8>>,
}

fn check_bits(bits: &[u8]) -> Result<()> {
    if let Some(b) = bits.iter().find(|&&b| b > 1) {
        return Err(Error::Parameter(format!(
            "assignment entry {b} is not 0 or 1"
        )));
    }
    Ok(())
}

impl Assignment {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        check_bits(&bits)?;
        Ok(Self { bits, second: None })
    }

    /// Builds an assignment from bits already known to be 0/1.
    pub(crate) fn from_bits_unchecked(bits: Vec<u8>) -> Self {
        debug_assert!(bits.iter().all(|&b| b <= 1));
        Self { bits, second: None }
    }

    pub fn from_bools(bits: &[bool]) -> Self {
        Self::from_bits_unchecked(bits.iter().map(|&b| u8::from(b)).collect())
    }

    /// A two-factor assignment; both vectors must have the same length.
    pub fn factorial(first: Vec<u8>, second: Vec<u8>) -> Result<Self> {
        check_bits(&first)?;
        check_bits(&second)?;
        if first.len() != second.len() {
            return Err(Error::Dimension {
                expected: first.len(),
                actual: second.len(),
            });
        }
        Ok(Self {
            bits: first,
            second: Some(second),
        })
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn arity(&self) -> usize {
        if self.second.is_some() {
            2
        } else {
            1
        }
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    /// Bits of factor `k` (0-based); `None` for a factor the assignment lacks.
    pub fn factor(&self, k: usize) -> Option<&[u8]> {
        match k {
            0 => Some(&self.bits),
            1 => self.second.as_deref(),
            _ => None,
        }
    }

    pub fn is_treated(&self, i: usize) -> bool {
        self.bits[i] == 1
    }

    /// `N1(z)`, the number of treated units (first factor).
    pub fn n_treated(&self) -> usize {
        self.bits.iter().map(|&b| usize::from(b)).sum()
    }

    /// `1 - z`, flipping every factor.
    pub fn complement(&self) -> Self {
        Self {
            bits: self.bits.iter().map(|&b| 1 - b).collect(),
            second: self
                .second
                .as_ref()
                .map(|s| s.iter().map(|&b| 1 - b).collect()),
        }
    }

    /// Counts `n_{z1,z2}` indexed by `2*z1 + z2`; `None` for single-factor assignments.
    pub fn cell_counts(&self) -> Option<[usize; 4]> {
        let second = self.second.as_ref()?;
        let mut counts = [0usize; 4];
        for (&a, &b) in self.bits.iter().zip(second) {
            counts[usize::from(2 * a + b)] += 1;
        }
        Some(counts)
    }
}

impl fmt::Display for Assignment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.bits {
            write!(f, "{b}")?;
        }
        if let Some(second) = &self.second {
            write!(f, "|")?;
            for b in second {
                write!(f, "{b}")?;
            }
        }
        Ok(())
    }
}

impl std::str::FromStr for Assignment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parse = |part: &str| -> Result<Vec<u8>> {
            part.chars()
                .map(|c| match c {
                    '0' => Ok(0),
                    '1' => Ok(1),
                    other => Err(Error::Parameter(format!(
                        "invalid assignment character {other:?}"
                    ))),
                })
                .collect()
        };
        match s.split_once('|') {
            Some((a, b)) => Self::factorial(parse(a)?, parse(b)?),
            None => Self::new(parse(s)?),
        }
    }
}

/// Row-major `n x d` covariate matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Covariates {
    n: usize,
    dim: usize,
    data: Vec<f64>,
}

impl Covariates {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if dim == 0 {
            return Err(Error::Population("covariate rows must be non-empty".into()));
        }
        let mut data = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            if row.len() != dim {
                return Err(Error::Dimension {
                    expected: dim,
                    actual: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::from_parts(rows.len(), dim, data)
    }

    pub fn from_column(column: Vec<f64>) -> Result<Self> {
        Self::from_parts(column.len(), 1, column)
    }

    fn from_parts(n: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Population("covariates must be finite".into()));
        }
        Ok(Self { n, dim, data })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n).map(|i| self.data[i * self.dim + j]).collect()
    }

    pub fn squared_distance(&self, i: usize, j: usize) -> f64 {
        self.row(i)
            .iter()
            .zip(self.row(j))
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }
}

/// Categorical block labels, stored as dense block ids in order of first appearance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Blocks {
    ids: Vec<usize>,
    labels: Vec<String>,
}

impl Blocks {
    pub fn from_labels<S: AsRef<str>>(labels: &[S]) -> Self {
        let mut seen: HashMap<String, usize> = HashMap::new();
        let mut names = Vec::new();
        let ids = labels
            .iter()
            .map(|l| {
                let l = l.as_ref();
                *seen.entry(l.to_string()).or_insert_with(|| {
                    names.push(l.to_string());
                    names.len() - 1
                })
            })
            .collect();
        Self { ids, labels: names }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn n_blocks(&self) -> usize {
        self.labels.len()
    }

    pub fn id(&self, unit: usize) -> usize {
        self.ids[unit]
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn label(&self, block: usize) -> &str {
        &self.labels[block]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_blocks()];
        for &b in &self.ids {
            sizes[b] += 1;
        }
        sizes
    }

    /// Unit indices of each block, in increasing order.
    pub fn units(&self) -> Vec<Vec<usize>> {
        let mut units = vec![Vec::new(); self.n_blocks()];
        for (i, &b) in self.ids.iter().enumerate() {
            units[b].push(i);
        }
        units
    }

    /// Per-block treated counts `N_{1,block}(z)`.
    pub fn treated_counts(&self, z: &Assignment) -> Vec<usize> {
        let mut counts = vec![0; self.n_blocks()];
        for (i, &b) in self.ids.iter().enumerate() {
            counts[b] += usize::from(z.bits()[i]);
        }
        counts
    }

    /// True when every block has at least one treated and one control unit.
    pub fn both_arms_everywhere(&self, z: &Assignment) -> bool {
        self.treated_counts(z)
            .iter()
            .zip(self.sizes())
            .all(|(&t, s)| t > 0 && t < s)
    }
}

type EstimandFn = dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync;

/// The quantity `tau`, a function of the two potential-outcome vectors.
#[derive(Clone, Default)]
pub enum Estimand {
    /// Average treatment effect `mean(y1 - y0)`.
    #[default]
    Ate,
    Custom {
        name: String,
        f: Arc<EstimandFn>,
    },
}

impl Estimand {
    pub fn custom(
        name: impl Into<String>,
        f: impl Fn(&[f64], &[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Estimand::Custom {
            name: name.into(),
            f: Arc::new(f),
        }
    }

    pub fn name(&self) -> &str {
        match self {
            Estimand::Ate => "ate",
            Estimand::Custom { name, .. } => name,
        }
    }
}

impl fmt::Debug for Estimand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Estimand({})", self.name())
    }
}

#[derive(Clone, Debug)]
pub struct Population {
    y0: Vec<f64>,
    y1: Vec<f64>,
    x: Option<Covariates>,
    blocks: Option<Blocks>,
    estimand: Estimand,
}

impl Population {
    pub fn new(y0: Vec<f64>, y1: Vec<f64>) -> Result<Self> {
        if y0.len() != y1.len() {
            return Err(Error::Dimension {
                expected: y0.len(),
                actual: y1.len(),
            });
        }
        if y0.len() < 2 {
            return Err(Error::Population(format!(
                "need at least 2 units, got {}",
                y0.len()
            )));
        }
        if y0.iter().chain(&y1).any(|v| !v.is_finite()) {
            return Err(Error::Population(
                "potential outcomes must be finite".into(),
            ));
        }
        Ok(Self {
            y0,
            y1,
            x: None,
            blocks: None,
            estimand: Estimand::Ate,
        })
    }

    pub fn with_covariates(mut self, x: Covariates) -> Result<Self> {
        if x.n() != self.n() {
            return Err(Error::Dimension {
                expected: self.n(),
                actual: x.n(),
            });
        }
        self.x = Some(x);
        Ok(self)
    }

    pub fn with_blocks(mut self, blocks: Blocks) -> Result<Self> {
        if blocks.len() != self.n() {
            return Err(Error::Dimension {
                expected: self.n(),
                actual: blocks.len(),
            });
        }
        if let Some((b, _)) = blocks.sizes().iter().enumerate().find(|(_, &s)| s < 2) {
            return Err(Error::Population(format!(
                "block {:?} has fewer than 2 units",
                blocks.label(b)
            )));
        }
        self.blocks = Some(blocks);
        Ok(self)
    }

    pub fn with_estimand(mut self, estimand: Estimand) -> Self {
        self.estimand = estimand;
        self
    }

    pub fn n(&self) -> usize {
        self.y0.len()
    }

    pub fn y0(&self) -> &[f64] {
        &self.y0
    }

    pub fn y1(&self) -> &[f64] {
        &self.y1
    }

    pub fn covariates(&self) -> Option<&Covariates> {
        self.x.as_ref()
    }

    pub fn blocks(&self) -> Option<&Blocks> {
        self.blocks.as_ref()
    }

    pub fn estimand(&self) -> &Estimand {
        &self.estimand
    }

    pub fn ate(&self) -> f64 {
        let total: f64 = self.y1.iter().zip(&self.y0).map(|(a, b)| a - b).sum();
        total / self.n() as f64
    }

    /// The configured estimand (ATE unless a custom hook was installed).
    pub fn tau(&self) -> f64 {
        match &self.estimand {
            Estimand::Ate => self.ate(),
            Estimand::Custom { f, .. } => f(&self.y0, &self.y1),
        }
    }

    /// `Y_obs = z * y1 + (1 - z) * y0`, using the first factor of `z`.
    pub fn observe(&self, z: &Assignment) -> Result<Vec<f64>> {
        if z.len() != self.n() {
            return Err(Error::Dimension {
                expected: self.n(),
                actual: z.len(),
            });
        }
        Ok(z.bits()
            .iter()
            .zip(self.y0.iter().zip(&self.y1))
            .map(|(&b, (&c, &t))| if b == 1 { t } else { c })
            .collect())
    }

    /// Loads a population from CSV with header columns `y0`, `y1`, optional
    /// `x1..xd` and optional `block`.
    pub fn from_csv_path(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::from_csv_reader(file)
    }

    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(reader);
        let headers = rdr.headers()?.clone();
        let position = |name: &str| headers.iter().position(|h| h == name);
        let y0_col = position("y0").ok_or_else(|| Error::Population("missing column y0".into()))?;
        let y1_col = position("y1").ok_or_else(|| Error::Population("missing column y1".into()))?;
        let block_col = position("block");
        let mut x_cols = Vec::new();
        for d in 1.. {
            match position(&format!("x{d}")) {
                Some(c) => x_cols.push(c),
                None => break,
            }
        }

        let number = |record: &csv::StringRecord, col: usize, line: usize| -> Result<f64> {
            record[col].parse::<f64>().map_err(|e| {
                Error::Population(format!("row {line}, column {:?}: {e}", &headers[col]))
            })
        };
        let (mut y0, mut y1, mut rows, mut labels) =
            (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (line, record) in rdr.records().enumerate() {
            let record = record?;
            y0.push(number(&record, y0_col, line + 1)?);
            y1.push(number(&record, y1_col, line + 1)?);
            if !x_cols.is_empty() {
                rows.push(
                    x_cols
                        .iter()
                        .map(|&c| number(&record, c, line + 1))
                        .collect::<Result<Vec<_>>>()?,
                );
            }
            if let Some(c) = block_col {
                labels.push(record[c].to_string());
            }
        }
        let mut pop = Population::new(y0, y1)?;
        if !rows.is_empty() {
            pop = pop.with_covariates(Covariates::from_rows(&rows)?)?;
        }
        if !labels.is_empty() {
            pop = pop.with_blocks(Blocks::from_labels(&labels))?;
        }
        Ok(pop)
    }

    /// Writes the population in the same CSV layout `from_csv_reader` accepts.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let dim = self.x.as_ref().map_or(0, Covariates::dim);
        let mut header = vec!["y0".to_string(), "y1".to_string()];
        header.extend((1..=dim).map(|d| format!("x{d}")));
        if self.blocks.is_some() {
            header.push("block".into());
        }
        w.write_record(&header)?;
        for i in 0..self.n() {
            let mut row = vec![self.y0[i].to_string(), self.y1[i].to_string()];
            if let Some(x) = &self.x {
                row.extend(x.row(i).iter().map(f64::to_string));
            }
            if let Some(b) = &self.blocks {
                row.push(b.label(b.id(i)).to_string());
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Seeded synthetic populations.
pub mod synthetic {
    use super::*;

    fn normals(seed: u64, tag: u64, len: usize) -> Vec<f64> {
        let mut rng = rng::stream(seed, &[tag]);
        (0..len).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    /// `y0 ~ N(0,1)` iid and `y1 = y0 + tau`.
    pub fn constant_effect(n: usize, tau: f64, seed: u64) -> Result<Population> {
        let y0 = normals(seed, 0, n);
        let y1 = y0.iter().map(|v| v + tau).collect();
        Population::new(y0, y1)
    }

    /// `y0 ~ N(0,1)` and `y1 = y0 + tau + effect_sd * N(0,1)`.
    pub fn heterogeneous(n: usize, tau: f64, effect_sd: f64, seed: u64) -> Result<Population> {
        let y0 = normals(seed, 0, n);
        let noise = normals(seed, 1, n);
        let y1 = y0
            .iter()
            .zip(&noise)
            .map(|(v, e)| v + tau + effect_sd * e)
            .collect();
        Population::new(y0, y1)
    }

    /// `d` standard normal covariates; outcomes load on their sum.
    ///
    /// `y0 = sum(x) + 0.5 e0`, `y1 = y0 + tau + 0.3 e1`.
    pub fn covariate_linked(n: usize, dim: usize, tau: f64, seed: u64) -> Result<Population> {
        let xs = normals(seed, 2, n * dim.max(1));
        let rows: Vec<Vec<f64>> = xs.chunks(dim.max(1)).map(<[f64]>::to_vec).collect();
        let e0 = normals(seed, 3, n);
        let e1 = normals(seed, 4, n);
        let y0: Vec<f64> = rows
            .iter()
            .zip(&e0)
            .map(|(r, e)| r.iter().sum::<f64>() + 0.5 * e)
            .collect();
        let y1 = y0.iter().zip(&e1).map(|(v, e)| v + tau + 0.3 * e).collect();
        Population::new(y0, y1)?.with_covariates(Covariates::from_rows(&rows)?)
    }

    /// One continuous covariate with `y0 = y1 = x`, so `tau = 0` and `tau_hat` equals the balance.
    pub fn balance_identity(n: usize, seed: u64) -> Result<Population> {
        let x = normals(seed, 5, n);
        Population::new(x.clone(), x.clone())?.with_covariates(Covariates::from_column(x)?)
    }

    /// Equal-size blocks labelled `B1, B2, ...` added to `pop`.
    pub fn equal_blocks(pop: Population, n_blocks: usize) -> Result<Population> {
        let n = pop.n();
        if n_blocks == 0 || !n.is_multiple_of(n_blocks) {
            return Err(Error::Parameter(format!(
                "{n} units do not split into {n_blocks} equal blocks"
            )));
        }
        let size = n / n_blocks;
        let labels: Vec<String> = (0..n).map(|i| format!("B{}", i / size + 1)).collect();
        pop.with_blocks(Blocks::from_labels(&labels))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ate_of_identical_outcomes_is_zero() {
        let pop = Population::new(vec![1.5, -2.0, 3.0], vec![1.5, -2.0, 3.0]).unwrap();
        assert_eq!(pop.ate(), 0.0);
    }

    #[test]
    fn ate_is_mean_unit_effect() {
        let pop = Population::new(vec![0.0, 0.0], vec![1.0, 3.0]).unwrap();
        assert_eq!(pop.ate(), 2.0);
    }

    #[test]
    fn ate_matches_separate_loop() {
        let pop = synthetic::heterogeneous(10, 0.7, 1.0, 11).unwrap();
        let mut acc = 0.0;
        for i in 0..pop.n() {
            acc += pop.y1()[i];
            acc -= pop.y0()[i];
        }
        assert!((pop.ate() - acc / 10.0).abs() < 1e-12);
    }

    #[test]
    fn observe_substitutes_by_arm() {
        let pop = Population::new(vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]).unwrap();
        assert_eq!(pop.observe(&"111".parse().unwrap()).unwrap(), pop.y1());
        assert_eq!(pop.observe(&"000".parse().unwrap()).unwrap(), pop.y0());
        assert_eq!(
            pop.observe(&"101".parse().unwrap()).unwrap(),
            vec![4.0, 2.0, 6.0]
        );
    }

    #[test]
    fn observe_rejects_wrong_length() {
        let pop = Population::new(vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]).unwrap();
        let err = pop.observe(&"10".parse().unwrap()).unwrap_err();
        assert!(matches!(
            err,
            Error::Dimension {
                expected: 3,
                actual: 2
            }
        ));
    }

    #[test]
    fn invariants_are_enforced() {
        assert!(Population::new(vec![1.0], vec![1.0]).is_err());
        assert!(Population::new(vec![1.0, f64::NAN], vec![1.0, 2.0]).is_err());
        let pop = Population::new(vec![0.0; 3], vec![0.0; 3]).unwrap();
        assert!(pop
            .with_blocks(Blocks::from_labels(&["a", "a", "b"]))
            .is_err());
        assert!(Assignment::new(vec![0, 2]).is_err());
    }

    #[test]
    fn custom_estimand_hook() {
        let pop = Population::new(vec![0.0, 1.0], vec![2.0, 5.0])
            .unwrap()
            .with_estimand(Estimand::custom("mean_y1", |_, y1| {
                y1.iter().sum::<f64>() / y1.len() as f64
            }));
        assert_eq!(pop.tau(), 3.5);
        assert_eq!(pop.ate(), 3.0);
    }

    #[test]
    fn csv_round_trip() {
        let pop = synthetic::covariate_linked(6, 2, 1.0, 3).unwrap();
        let pop = synthetic::equal_blocks(pop, 2).unwrap();
        let mut buf = Vec::new();
        pop.write_csv(&mut buf).unwrap();
        let back = Population::from_csv_reader(buf.as_slice()).unwrap();
        assert_eq!(back.y0(), pop.y0());
        assert_eq!(back.y1(), pop.y1());
        assert_eq!(back.covariates(), pop.covariates());
        assert_eq!(back.blocks(), pop.blocks());
    }

    #[test]
    fn csv_missing_column() {
        let err = Population::from_csv_reader("y0,x1\n1,2\n3,4\n".as_bytes()).unwrap_err();
        assert!(err.to_string().contains("y1"));
    }

    #[test]
    fn assignment_text_form() {
        let z: Assignment = "0110".parse().unwrap();
        assert_eq!(z.to_string(), "0110");
        assert_eq!(z.n_treated(), 2);
        assert_eq!(z.complement().to_string(), "1001");
        let f: Assignment = "0011|0101".parse().unwrap();
        assert_eq!(f.arity(), 2);
        assert_eq!(f.cell_counts(), Some([1, 1, 1, 1]));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn observe_complement_sums(seed in 0u64..500, mask in 0u32..256) {
                let pop = synthetic::heterogeneous(8, 0.3, 1.0, seed).unwrap();
                let z = Assignment::from_bools(&(0..8).map(|i| mask >> i & 1 == 1).collect::<Vec<_>>());
                let a = pop.observe(&z).unwrap();
                let b = pop.observe(&z.complement()).unwrap();
                for i in 0..8 {
                    prop_assert!((a[i] + b[i] - pop.y0()[i] - pop.y1()[i]).abs() < 1e-12);
                }
            }

            #[test]
            fn ate_permutation_invariant(seed in 0u64..500, rot in 0usize..8) {
                let pop = synthetic::heterogeneous(8, 0.3, 1.0, seed).unwrap();
                let mut y0 = pop.y0().to_vec();
                let mut y1 = pop.y1().to_vec();
                y0.rotate_left(rot);
                y1.rotate_left(rot);
                let permuted = Population::new(y0, y1).unwrap();
                prop_assert!((permuted.ate() - pop.ate()).abs() < 1e-12);
            }
        }
    }
}
