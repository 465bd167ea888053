//! Experiment spec files (TOML).

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use gaussvi::{
    load_csv, random_coefficients, synth_logistic, AdamParams, Algorithm, CsvSchema, Dataset,
    Geometry, LogisticModel, Order, QuadraticModel, RunConfig, SnngmParams, StepperKind, Vector,
};
use serde::Deserialize;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub model: ModelSpec,
    pub grid: GridSpec,
    /// Relative paths are taken from the spec file's directory.
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Keep every `trace_thin`-th iteration in trajectory files.
    #[serde(default = "default_thin")]
    pub trace_thin: usize,
    #[serde(default)]
    pub seed: u64,
    /// Explicit quadratic target for `variance`; otherwise the Laplace
    /// expansion of the logistic model is used.
    pub quadratic: Option<QuadraticSpec>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_thin() -> usize {
    10
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum DatasetSpec {
    Synthetic {
        n: usize,
        d: usize,
        #[serde(default)]
        intercept: bool,
        /// Standard deviation of the true coefficients.
        #[serde(default = "one")]
        theta_scale: f64,
        #[serde(default)]
        seed: u64,
    },
    Csv {
        path: PathBuf,
        #[serde(flatten)]
        schema: CsvSchema,
    },
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    #[serde(default = "default_sigma0_sq")]
    pub sigma0_sq: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            sigma0_sq: default_sigma0_sq(),
        }
    }
}

fn default_sigma0_sq() -> f64 {
    100.0
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum OrderSpec {
    Number(u8),
    Name(String),
}

impl OrderSpec {
    fn resolve(&self) -> anyhow::Result<Order> {
        match self {
            OrderSpec::Number(1) => Ok(Order::First),
            OrderSpec::Number(2) => Ok(Order::Second),
            OrderSpec::Name(s) => match s.as_str() {
                "1" | "first" => Ok(Order::First),
                "2" | "second" => Ok(Order::Second),
                _ => bail!("unknown order `{s}`"),
            },
            OrderSpec::Number(n) => bail!("unknown order {n} (expected 1 or 2)"),
        }
    }
}

/// Cross product of algorithms, orders and steppers. Snngm is only paired
/// with the natural-gradient algorithms; Euclidean cells skip it.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub algorithms: Vec<Algorithm>,
    pub orders: Vec<OrderSpec>,
    #[serde(default = "default_steppers")]
    pub steppers: Vec<StepperKind>,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default)]
    pub stop_tol: f64,
    /// Set to false to always run `max_iters` iterations.
    #[serde(default = "yes")]
    pub early_stop: bool,
    #[serde(default)]
    pub adam: AdamParams,
    #[serde(default)]
    pub snngm: SnngmParams,
    #[serde(default = "default_max_halvings")]
    pub max_halvings: usize,
}

fn default_steppers() -> Vec<StepperKind> {
    vec![StepperKind::Adam]
}

fn default_max_iters() -> usize {
    100_000
}

fn default_window() -> usize {
    1000
}

fn default_max_halvings() -> usize {
    10
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadraticSpec {
    pub mode: Vec<f64>,
    /// Rows of the precision matrix.
    pub precision: Vec<Vec<f64>>,
    #[serde(default)]
    pub ell0: f64,
}

impl QuadraticSpec {
    pub fn build(&self) -> anyhow::Result<QuadraticModel> {
        let d = self.mode.len();
        if self.precision.len() != d || self.precision.iter().any(|r| r.len() != d) {
            bail!("quadratic precision must be {d} x {d}");
        }
        let flat: Vec<f64> = self.precision.iter().flatten().copied().collect();
        let p = gaussvi::Matrix::from_row_slice(d, d, &flat);
        Ok(QuadraticModel::new(
            Vector::from_vec(self.mode.clone()),
            p,
            self.ell0,
        )?)
    }
}

/// A parsed spec plus the directory its relative paths refer to.
#[derive(Debug, Clone)]
pub struct LoadedSpec {
    pub spec: ExperimentSpec,
    pub base_dir: PathBuf,
}

impl LoadedSpec {
    pub fn read(path: &Path) -> anyhow::Result<Self> {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading spec {}", path.display()))?;
        let spec: ExperimentSpec =
            toml::from_str(&text).with_context(|| format!("parsing spec {}", path.display()))?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let loaded = Self { spec, base_dir };
        loaded.grid()?;
        if loaded.spec.trace_thin == 0 {
            bail!("trace_thin must be positive");
        }
        Ok(loaded)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.spec.output_dir)
    }

    pub fn dataset(&self) -> anyhow::Result<Dataset> {
        Ok(match &self.spec.dataset {
            DatasetSpec::Synthetic {
                n,
                d,
                intercept,
                theta_scale,
                seed,
            } => {
                let theta = random_coefficients(*d, *theta_scale, *seed);
                synth_logistic(*n, &theta, *intercept, *seed)
            }
            DatasetSpec::Csv { path, schema } => load_csv(self.resolve(path), schema)?,
        })
    }

    pub fn model(&self, data: &Dataset) -> anyhow::Result<LogisticModel> {
        Ok(LogisticModel::from_dataset(
            data,
            self.spec.model.sigma0_sq,
        )?)
    }

    /// Every cell of the grid, in algorithm, order, stepper order.
    pub fn grid(&self) -> anyhow::Result<Vec<RunConfig>> {
        let g = &self.spec.grid;
        let orders = g
            .orders
            .iter()
            .map(OrderSpec::resolve)
            .collect::<anyhow::Result<Vec<_>>>()?;
        let mut cells = Vec::new();
        for &alg in &g.algorithms {
            for &order in &orders {
                for &stepper in &g.steppers {
                    if stepper == StepperKind::Snngm && alg.geometry() != Geometry::Natural {
                        continue;
                    }
                    let mut cfg = RunConfig::new(alg, order, stepper);
                    cfg.max_iters = g.max_iters;
                    cfg.window = g.window;
                    cfg.stop_tol = g.early_stop.then_some(g.stop_tol);
                    cfg.seed = self.spec.seed;
                    cfg.adam = g.adam;
                    cfg.snngm = g.snngm;
                    cfg.max_halvings = g.max_halvings;
                    cfg.validate()?;
                    cells.push(cfg);
                }
            }
        }
        if cells.is_empty() {
            bail!("the grid has no cells");
        }
        Ok(cells)
    }
}
