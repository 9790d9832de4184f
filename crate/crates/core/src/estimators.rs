//! Point estimators and the scalar covariate balance statistic.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::population::{Assignment, Blocks, Population};

type EstimatorFn = dyn Fn(&Assignment, &[f64]) -> Result<f64> + Send + Sync;

/// An estimator `tau_hat(z)` computed from the assignment and observed outcomes.
#[derive(Clone)]
pub enum Estimator {
    DiffInMeans,
    PostStratified(Blocks),
    /// Difference of marginal means for one factor of a two-factor assignment.
    FactorialMainEffect {
        factor: usize,
    },
    Custom {
        name: String,
        f: Arc<EstimatorFn>,
    },
}

impl fmt::Debug for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl Estimator {
    pub fn custom(
        name: impl Into<String>,
        f: impl Fn(&Assignment, &[f64]) -> Result<f64> + Send + Sync + 'static,
    ) -> Self {
        Estimator::Custom {
            name: name.into(),
            f: Arc::new(f),
        }
    }

    pub fn name(&self) -> String {
        match self {
            Estimator::DiffInMeans => "diff_in_means".into(),
            Estimator::PostStratified(_) => "post_stratified".into(),
            Estimator::FactorialMainEffect { factor } => format!("factorial_main_effect_{factor}"),
            Estimator::Custom { name, .. } => name.clone(),
        }
    }

    /// Resolves a config tag. Post-stratification takes its blocks from `pop`.
    pub fn from_tag(tag: &str, pop: &Population) -> Result<Self> {
        match tag {
            "diff_in_means" => Ok(Estimator::DiffInMeans),
            "post_stratified" => pop
                .blocks()
                .cloned()
                .map(Estimator::PostStratified)
                .ok_or_else(|| {
                    Error::Parameter("post_stratified needs block labels in the population".into())
                }),
            "factorial_main_effect" | "factorial_main_effect_0" => {
                Ok(Estimator::FactorialMainEffect { factor: 0 })
            }
            "factorial_main_effect_1" => Ok(Estimator::FactorialMainEffect { factor: 1 }),
            other => Err(Error::Parameter(format!("unknown estimator tag {other:?}"))),
        }
    }

    pub fn estimate(&self, z: &Assignment, yobs: &[f64]) -> Result<f64> {
        match self {
            Estimator::DiffInMeans => diff_in_means(z, yobs),
            Estimator::PostStratified(blocks) => post_stratified(z, yobs, blocks),
            Estimator::FactorialMainEffect { factor } => factorial_main_effect(z, yobs, *factor),
            Estimator::Custom { f, .. } => f(z, yobs),
        }
    }

    /// Observes the outcomes under `z` and estimates.
    pub fn evaluate(&self, z: &Assignment, pop: &Population) -> Result<f64> {
        self.estimate(z, &pop.observe(z)?)
    }
}

fn check_len(z: &Assignment, v: &[f64]) -> Result<()> {
    if z.len() != v.len() {
        return Err(Error::Dimension {
            expected: z.len(),
            actual: v.len(),
        });
    }
    Ok(())
}

fn undefined(z: &Assignment, reason: impl Into<String>) -> Error {
    Error::UndefinedEstimator {
        assignment: z.to_string(),
        reason: reason.into(),
    }
}

/// Mean of treated outcomes minus mean of control outcomes.
pub fn diff_in_means(z: &Assignment, yobs: &[f64]) -> Result<f64> {
    check_len(z, yobs)?;
    let (mut s1, mut n1, mut s0, mut n0) = (0.0, 0usize, 0.0, 0usize);
    for (&b, &y) in z.bits().iter().zip(yobs) {
        if b == 1 {
            s1 += y;
            n1 += 1;
        } else {
            s0 += y;
            n0 += 1;
        }
    }
    if n1 == 0 || n0 == 0 {
        return Err(undefined(z, "an arm is empty"));
    }
    Ok(s1 / n1 as f64 - s0 / n0 as f64)
}

/// Block-size weighted average of within-block differences in means.
pub fn post_stratified(z: &Assignment, yobs: &[f64], blocks: &Blocks) -> Result<f64> {
    check_len(z, yobs)?;
    if blocks.len() != z.len() {
        return Err(Error::Dimension {
            expected: z.len(),
            actual: blocks.len(),
        });
    }
    let m = blocks.n_blocks();
    let mut sums = vec![[0.0f64; 2]; m];
    let mut counts = vec![[0usize; 2]; m];
    for i in 0..z.len() {
        let j = blocks.id(i);
        let arm = z.bits()[i] as usize;
        sums[j][arm] += yobs[i];
        counts[j][arm] += 1;
    }
    let n = z.len() as f64;
    let mut total = 0.0;
    for j in 0..m {
        let [c0, c1] = counts[j];
        if c0 == 0 || c1 == 0 {
            return Err(undefined(
                z,
                format!("block {:?} has an empty arm", blocks.label(j)),
            ));
        }
        let diff = sums[j][1] / c1 as f64 - sums[j][0] / c0 as f64;
        total += (c0 + c1) as f64 / n * diff;
    }
    Ok(total)
}

/// Mean outcome with factor `factor` active minus mean with it passive.
pub fn factorial_main_effect(z: &Assignment, yobs: &[f64], factor: usize) -> Result<f64> {
    check_len(z, yobs)?;
    let bits = z
        .factor(factor)
        .ok_or_else(|| Error::Parameter(format!("assignment {z} has no factor {factor}")))?;
    let (mut s1, mut n1, mut s0, mut n0) = (0.0, 0usize, 0.0, 0usize);
    for (&b, &y) in bits.iter().zip(yobs) {
        if b == 1 {
            s1 += y;
            n1 += 1;
        } else {
            s0 += y;
            n0 += 1;
        }
    }
    if n1 == 0 || n0 == 0 {
        return Err(undefined(z, format!("factor {factor} has an empty level")));
    }
    Ok(s1 / n1 as f64 - s0 / n0 as f64)
}

/// Covariate balance: mean of `x` among treated minus mean among controls.
pub fn balance(z: &Assignment, x: &[f64]) -> Result<f64> {
    check_len(z, x)?;
    let n1 = z.n_treated();
    let n0 = z.len() - n1;
    if n1 == 0 || n0 == 0 {
        return Err(undefined(z, "an arm is empty"));
    }
    let (w1, w0) = (1.0 / n1 as f64, 1.0 / n0 as f64);
    Ok(z.bits()
        .iter()
        .zip(x)
        .map(|(&b, &xi)| if b == 1 { w1 * xi } else { -w0 * xi })
        .sum())
}
