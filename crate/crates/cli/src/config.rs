//! Scenario files: one TOML document describing a population, a design, a
//! design map, an estimator and how to compute coverage.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use asif_core::matching::valid_matching_map;
use asif_core::population::synthetic;
use asif_core::{
    CoverageMode, Design, DesignMap, DesignSpec, Estimator, GreedyMatcher, Matcher, Population,
    Statistic,
};
use serde::{Deserialize, Serialize};

use crate::error::{building, config, CliResult};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_estimator")]
    pub estimator: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub mode: ModeTag,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    /// Draws per analysis design in mc mode; exact analysis quantiles when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inner_replicates: Option<usize>,
    /// Statistic defining the report cells; the map's own statistic when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cells: Option<StatisticSpec>,
    pub population: PopulationSpec,
    pub design: DesignSpec,
    #[serde(default)]
    pub map: MapSpec,
    #[serde(default)]
    pub output: OutputSpec,
}

fn default_alpha() -> f64 {
    0.025
}

fn default_estimator() -> String {
    "diff_in_means".into()
}

fn default_replicates() -> usize {
    10_000
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ModeTag {
    #[default]
    Exact,
    Mc,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum PopulationSpec {
    Synthetic {
        generator: Generator,
        n: usize,
        #[serde(default)]
        tau: f64,
        #[serde(default = "default_effect_sd")]
        effect_sd: f64,
        #[serde(default = "default_dim")]
        dim: usize,
        #[serde(default)]
        seed: u64,
        /// Number of equal-size blocks to attach.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        blocks: Option<usize>,
    },
    File {
        path: PathBuf,
    },
}

fn default_effect_sd() -> f64 {
    0.5
}

fn default_dim() -> usize {
    1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    ConstantEffect,
    Heterogeneous,
    CovariateLinked,
    BalanceIdentity,
}

impl PopulationSpec {
    /// Loads or generates the population; relative file paths resolve against `base_dir`.
    pub fn build(&self, base_dir: Option<&Path>) -> CliResult<Population> {
        let pop = match self {
            PopulationSpec::Synthetic {
                generator,
                n,
                tau,
                effect_sd,
                dim,
                seed,
                blocks,
            } => {
                let pop = match generator {
                    Generator::ConstantEffect => synthetic::constant_effect(*n, *tau, *seed),
                    Generator::Heterogeneous => {
                        synthetic::heterogeneous(*n, *tau, *effect_sd, *seed)
                    }
                    Generator::CovariateLinked => {
                        synthetic::covariate_linked(*n, *dim, *tau, *seed)
                    }
                    Generator::BalanceIdentity => synthetic::balance_identity(*n, *seed),
                }
                .map_err(building)?;
                match blocks {
                    Some(b) => synthetic::equal_blocks(pop, *b).map_err(building)?,
                    None => pop,
                }
            }
            PopulationSpec::File { path } => {
                let full = match base_dir {
                    Some(dir) if path.is_relative() => dir.join(path),
                    _ => path.clone(),
                };
                Population::from_csv_path(&full).map_err(|e| {
                    config(format!("cannot load population {}: {e}", full.display()))
                })?
            }
        };
        Ok(pop)
    }
}

/// A statistic by name, with parameters for the ones that need them.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StatisticSpec {
    Name(String),
    Table {
        name: String,
        #[serde(default)]
        breakpoints: Vec<f64>,
        #[serde(default)]
        covariate: usize,
    },
}

impl StatisticSpec {
    pub fn build(&self, pop: &Population) -> CliResult<Statistic> {
        let (name, breakpoints, covariate) = match self {
            StatisticSpec::Name(n) => (n.as_str(), &[][..], 0),
            StatisticSpec::Table {
                name,
                breakpoints,
                covariate,
            } => (name.as_str(), &breakpoints[..], *covariate),
        };
        Ok(match name {
            "constant" => Statistic::Constant,
            "n_treated" => Statistic::TreatedCount,
            "block_treated_counts" => Statistic::BlockTreatedCounts(
                pop.blocks()
                    .cloned()
                    .ok_or_else(|| config("block_treated_counts needs population blocks"))?,
            ),
            "factorial_cell_counts" => Statistic::FactorialCellCounts,
            "balance_bin" => {
                if breakpoints.is_empty() {
                    return Err(config("balance_bin needs breakpoints"));
                }
                Statistic::balance_bin(covariate_column(pop, covariate)?, breakpoints.to_vec())
                    .map_err(building)?
            }
            "matching" => Statistic::Matching {
                x: covariates(pop)?.clone(),
                matcher: greedy(),
            },
            other => return Err(config(format!("unknown statistic {other:?}"))),
        })
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MapSpec {
    /// Analyze with `design`, or with the experiment's own design when absent.
    #[default]
    Constant,
    ConstantDesign {
        design: DesignSpec,
    },
    Conditional {
        statistic: StatisticSpec,
    },
    BalancePartition {
        breakpoints: Vec<f64>,
        #[serde(default)]
        covariate: usize,
    },
    BalanceBall {
        #[serde(default)]
        strict: bool,
        #[serde(default)]
        covariate: usize,
    },
    Window {
        c: f64,
        #[serde(default)]
        covariate: usize,
    },
    StochasticWindow {
        c: f64,
        #[serde(default)]
        covariate: usize,
    },
    PairMatch,
    ValidMatching,
}

impl MapSpec {
    pub fn build(&self, eta0: &Design, pop: &Population) -> CliResult<DesignMap> {
        let base = eta0.clone();
        Ok(match self {
            MapSpec::Constant => DesignMap::constant(base),
            MapSpec::ConstantDesign { design } => {
                DesignMap::constant(design.build(Some(pop)).map_err(building)?)
            }
            MapSpec::Conditional { statistic } => {
                DesignMap::conditional(base, statistic.build(pop)?)
            }
            MapSpec::BalancePartition {
                breakpoints,
                covariate,
            } => DesignMap::balance_partition(
                base,
                covariate_column(pop, *covariate)?,
                breakpoints.clone(),
            )
            .map_err(building)?,
            MapSpec::BalanceBall { strict, covariate } => {
                DesignMap::balance_ball(base, covariate_column(pop, *covariate)?, *strict)
                    .map_err(building)?
            }
            MapSpec::Window { c, covariate } => {
                DesignMap::window(base, covariate_column(pop, *covariate)?, *c).map_err(building)?
            }
            MapSpec::StochasticWindow { c, covariate } => {
                DesignMap::stochastic_window(base, covariate_column(pop, *covariate)?, *c)
                    .map_err(building)?
            }
            MapSpec::PairMatch => DesignMap::pair_match(covariates(pop)?.clone(), greedy()),
            MapSpec::ValidMatching => valid_matching_map(base, covariates(pop)?.clone(), greedy()),
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default = "default_out_dir")]
    pub dir: PathBuf,
    #[serde(default = "default_prefix")]
    pub prefix: String,
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self {
            dir: default_out_dir(),
            prefix: default_prefix(),
        }
    }
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_prefix() -> String {
    "coverage".into()
}

fn greedy() -> Arc<dyn Matcher> {
    Arc::new(GreedyMatcher)
}

fn covariates(pop: &Population) -> CliResult<&asif_core::Covariates> {
    pop.covariates()
        .ok_or_else(|| config("this map needs covariates in the population"))
}

fn covariate_column(pop: &Population, j: usize) -> CliResult<Vec<f64>> {
    let x = covariates(pop)?;
    if j >= x.dim() {
        return Err(config(format!(
            "covariate index {j} out of range for {} columns",
            x.dim()
        )));
    }
    Ok(x.column(j))
}

/// Command-line values that take precedence over the scenario file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub mode: Option<ModeTag>,
    pub replicates: Option<usize>,
}

/// A scenario with every component resolved.
pub struct Built {
    pub population: Population,
    pub eta0: Design,
    pub map: DesignMap,
    pub estimator: Estimator,
    pub cells: Option<Statistic>,
    pub alpha: f64,
    pub mode: CoverageMode,
}

impl Scenario {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| config(format!("invalid scenario: {e}")))
    }

    pub fn from_path(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(m) = o.mode {
            self.mode = m;
        }
        if let Some(r) = o.replicates {
            self.replicates = r;
        }
    }

    pub fn build(&self, base_dir: Option<&Path>) -> CliResult<Built> {
        if !(self.alpha > 0.0 && self.alpha < 0.5) {
            return Err(config(format!(
                "alpha must lie in (0, 0.5), got {}",
                self.alpha
            )));
        }
        let population = self.population.build(base_dir)?;
        let eta0 = self.design.build(Some(&population)).map_err(building)?;
        if eta0.n() != population.n() {
            return Err(config(format!(
                "design has {} units but the population has {}",
                eta0.n(),
                population.n()
            )));
        }
        let map = self.map.build(&eta0, &population)?;
        let estimator = Estimator::from_tag(&self.estimator, &population).map_err(building)?;
        let cells = self
            .cells
            .as_ref()
            .map(|c| c.build(&population))
            .transpose()?;
        let mode = match self.mode {
            ModeTag::Exact => {
                if !eta0.is_enumerable() {
                    return Err(config(format!(
                        "exact mode needs an enumerable design; {} has about {:.3e} assignments",
                        eta0.label(),
                        eta0.raw_support_size()
                    )));
                }
                CoverageMode::Exact
            }
            ModeTag::Mc => {
                if self.replicates == 0 {
                    return Err(config("mc mode needs replicates > 0"));
                }
                if self.inner_replicates == Some(0) {
                    return Err(config("inner_replicates must be positive"));
                }
                CoverageMode::MonteCarlo {
                    outer: self.replicates,
                    inner: self.inner_replicates,
                    seed: self.seed,
                }
            }
        };
        Ok(Built {
            population,
            eta0,
            map,
            estimator,
            cells,
            alpha: self.alpha,
            mode,
        })
    }
}
