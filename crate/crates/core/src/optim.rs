//! Step-size engines and the stochastic variational inference loop.
//!
//! One iteration: draw `z`, evaluate `h` (and its Hessian for second-order
//! runs), form the gradient estimate, turn it into an increment with Adam or
//! Snngm, and apply the increment to `(mu, factor)` jointly.
//!
//! An increment that would leave a non-positive (or non-finite) diagonal in
//! the factor is rejected and retried at half the size. After
//! `max_halvings` rejections in a row the run ends with
//! [`Termination::FactorFailure`].

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{estimate_from, Geometry, GradientEstimate, Order};
use crate::models::LogJoint;
use crate::trimat::{unvech_slice, vech_into};
use crate::variational::{GaussianVariational, Parametrization};

/// The four algorithm families: factor of the covariance (1) or precision (2),
/// Euclidean (E) or natural (N) gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Algorithm {
    #[serde(rename = "1E")]
    CovEuclidean,
    #[serde(rename = "1N")]
    CovNatural,
    #[serde(rename = "2E")]
    PrecEuclidean,
    #[serde(rename = "2N")]
    PrecNatural,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] = [
        Algorithm::CovEuclidean,
        Algorithm::CovNatural,
        Algorithm::PrecEuclidean,
        Algorithm::PrecNatural,
    ];

    pub fn parametrization(self) -> Parametrization {
        match self {
            Algorithm::CovEuclidean | Algorithm::CovNatural => Parametrization::Covariance,
            Algorithm::PrecEuclidean | Algorithm::PrecNatural => Parametrization::Precision,
        }
    }

    pub fn geometry(self) -> Geometry {
        match self {
            Algorithm::CovEuclidean | Algorithm::PrecEuclidean => Geometry::Euclidean,
            Algorithm::CovNatural | Algorithm::PrecNatural => Geometry::Natural,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Algorithm::CovEuclidean => "1E",
            Algorithm::CovNatural => "1N",
            Algorithm::PrecEuclidean => "2E",
            Algorithm::PrecNatural => "2N",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.label())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown algorithm `{s}` (expected 1E, 1N, 2E or 2N)"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepperKind {
    Adam,
    Snngm,
}

impl fmt::Display for StepperKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            StepperKind::Adam => "adam",
            StepperKind::Snngm => "snngm",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamParams {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            alpha: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    params: AdamParams,
}

impl AdamState {
    pub fn new(len: usize, params: AdamParams) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            params,
        }
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.v
    }

    /// Returns the parameter increment for ascent direction `g`.
    pub fn step(&mut self, g: &[f64]) -> Vec<f64> {
        assert_eq!(
            g.len(),
            self.m.len(),
            "gradient length changed between steps"
        );
        let AdamParams {
            alpha,
            beta1,
            beta2,
            eps,
        } = self.params;
        self.t += 1;
        let t = i32::try_from(self.t).unwrap_or(i32::MAX);
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        self.m
            .iter_mut()
            .zip(self.v.iter_mut())
            .zip(g)
            .map(|((m, v), &gi)| {
                *m = beta1 * *m + (1.0 - beta1) * gi;
                *v = beta2 * *v + (1.0 - beta2) * gi * gi;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                alpha * m_hat / (v_hat.sqrt() + eps)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SnngmParams {
    pub alpha: f64,
    pub beta: f64,
    pub norm_floor: f64,
    /// Normalize the mean block and the factor block separately.
    pub per_block: bool,
}

impl Default for SnngmParams {
    fn default() -> Self {
        Self {
            alpha: 0.001,
            beta: 0.9,
            norm_floor: 1e-12,
            per_block: false,
        }
    }
}

/// Normalized natural-gradient ascent with momentum.
///
/// `m <- beta m + (1 - beta) g`, increment `alpha m_hat / max(|m_hat|, floor)`
/// with `m_hat = m / (1 - beta^t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SnngmState {
    m: Vec<f64>,
    t: u64,
    params: SnngmParams,
    /// Length of the leading (mean) block, used when `per_block` is set.
    split: usize,
}

impl SnngmState {
    pub fn new(len: usize, split: usize, params: SnngmParams) -> Self {
        Self {
            m: vec![0.0; len],
            t: 0,
            params,
            split: split.min(len),
        }
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, g: &[f64]) -> Vec<f64> {
        assert_eq!(
            g.len(),
            self.m.len(),
            "gradient length changed between steps"
        );
        let SnngmParams {
            alpha,
            beta,
            norm_floor,
            per_block,
        } = self.params;
        self.t += 1;
        let correction = 1.0 - beta.powi(i32::try_from(self.t).unwrap_or(i32::MAX));
        for (m, &gi) in self.m.iter_mut().zip(g) {
            *m = beta * *m + (1.0 - beta) * gi;
        }
        let m_hat: Vec<f64> = self.m.iter().map(|m| m / correction).collect();
        let normalize = |block: &[f64]| -> Vec<f64> {
            let norm = block.iter().map(|x| x * x).sum::<f64>().sqrt();
            let scale = alpha / norm.max(norm_floor);
            block.iter().map(|x| x * scale).collect()
        };
        if per_block {
            let (head, tail) = m_hat.split_at(self.split);
            let mut out = normalize(head);
            out.extend(normalize(tail));
            out
        } else {
            normalize(&m_hat)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Stepper {
    Adam(AdamState),
    Snngm(SnngmState),
}

impl Stepper {
    pub fn step(&mut self, g: &[f64]) -> Vec<f64> {
        match self {
            Stepper::Adam(s) => s.step(g),
            Stepper::Snngm(s) => s.step(g),
        }
    }
}

/// Everything that determines a run, including its seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub algorithm: Algorithm,
    pub order: Order,
    pub stepper: StepperKind,
    pub max_iters: usize,
    /// Window length for the averaged lower bound and the stopping rule.
    pub window: usize,
    /// Stop once a window-averaged bound fails to beat the previous one by
    /// more than this; `None` always runs `max_iters` iterations.
    pub stop_tol: Option<f64>,
    pub seed: u64,
    #[serde(default)]
    pub adam: AdamParams,
    #[serde(default)]
    pub snngm: SnngmParams,
    #[serde(default = "default_max_halvings")]
    pub max_halvings: usize,
}

fn default_max_halvings() -> usize {
    10
}

impl RunConfig {
    pub fn new(algorithm: Algorithm, order: Order, stepper: StepperKind) -> Self {
        Self {
            algorithm,
            order,
            stepper,
            max_iters: 100_000,
            window: 1000,
            stop_tol: Some(0.0),
            seed: 0,
            adam: AdamParams::default(),
            snngm: SnngmParams::default(),
            max_halvings: default_max_halvings(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stepper == StepperKind::Snngm && self.algorithm.geometry() != Geometry::Natural {
            return Err(Error::Config(format!(
                "Snngm requires a natural-gradient algorithm, got {}",
                self.algorithm
            )));
        }
        if self.max_iters == 0 || self.window == 0 {
            return Err(Error::Config(
                "max_iters and window must be positive".into(),
            ));
        }
        if self.window > self.max_iters {
            return Err(Error::Config(format!(
                "window {} exceeds max_iters {}",
                self.window, self.max_iters
            )));
        }
        if let Some(tol) = self.stop_tol {
            if tol.is_nan() || tol < 0.0 {
                return Err(Error::Config(format!(
                    "stop_tol must be nonnegative, got {tol}"
                )));
            }
        }
        if self.max_halvings == 0 {
            return Err(Error::Config("max_halvings must be at least 1".into()));
        }
        Ok(())
    }

    /// `1E(2)/adam`-style label.
    pub fn label(&self) -> String {
        format!(
            "{}({})/{}",
            self.algorithm,
            self.order.number(),
            self.stepper
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Termination {
    Converged,
    MaxIters,
    FactorFailure,
}

impl fmt::Display for Termination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            Termination::Converged => "CONVERGED",
            Termination::MaxIters => "MAX_ITERS",
            Termination::FactorFailure => "FACTOR_FAILURE",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub iterations: usize,
    /// Single-draw `h(theta)` at every iteration.
    pub elbo_trace: Vec<f64>,
    /// Sliding `window` mean of `elbo_trace`; entry `k` covers iterations
    /// `k + 1 ..= k + window` (1-based).
    pub averaged_trace: Vec<f64>,
    pub window: usize,
    /// Mean of the last `window` single-draw bounds.
    pub final_elbo: f64,
    pub wall_time_s: f64,
    pub termination: Termination,
    /// Increments that were halved because they broke the factor diagonal.
    pub rejected_steps: usize,
    pub final_state: GaussianVariational,
    pub failure: Option<String>,
}

impl RunRecord {
    /// Sliding-window average at 1-based iteration `t`, if `t >= window`.
    pub fn averaged_at(&self, t: usize) -> Option<f64> {
        t.checked_sub(self.window)
            .and_then(|k| self.averaged_trace.get(k))
            .copied()
    }
}

fn sliding_mean(xs: &[f64], window: usize) -> Vec<f64> {
    if xs.len() < window {
        return Vec::new();
    }
    let mut sum: f64 = xs[..window].iter().sum();
    let mut out = Vec::with_capacity(xs.len() - window + 1);
    out.push(sum / window as f64);
    for i in window..xs.len() {
        sum += xs[i] - xs[i - window];
        out.push(sum / window as f64);
    }
    out
}

fn flatten(est: &GradientEstimate, buf: &mut Vec<f64>) {
    buf.clear();
    buf.extend(est.mu_dir.iter());
    vech_into(&est.factor_dir, buf);
}

/// Runs the configured algorithm from `state0`.
pub fn run<M: LogJoint + ?Sized>(
    model: &M,
    state0: &GaussianVariational,
    cfg: &RunConfig,
) -> Result<RunRecord> {
    run_with_observer(model, state0, cfg, |_, _| {})
}

/// As [`run`], calling `observe(t, state)` after every accepted update.
pub fn run_with_observer<M, F>(
    model: &M,
    state0: &GaussianVariational,
    cfg: &RunConfig,
    mut observe: F,
) -> Result<RunRecord>
where
    M: LogJoint + ?Sized,
    F: FnMut(usize, &GaussianVariational),
{
    cfg.validate()?;
    if state0.parametrization() != cfg.algorithm.parametrization() {
        return Err(Error::Config(format!(
            "algorithm {} needs a {:?} state, got {:?}",
            cfg.algorithm,
            cfg.algorithm.parametrization(),
            state0.parametrization()
        )));
    }
    if model.dim() != state0.dim() {
        return Err(Error::DimensionMismatch {
            context: "model dimension",
            expected: state0.dim(),
            found: model.dim(),
        });
    }

    let d = state0.dim();
    let n_params = d + d * (d + 1) / 2;
    let mut stepper = match cfg.stepper {
        StepperKind::Adam => Stepper::Adam(AdamState::new(n_params, cfg.adam)),
        StepperKind::Snngm => Stepper::Snngm(SnngmState::new(n_params, d, cfg.snngm)),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = state0.clone();
    let mut elbo_trace = Vec::with_capacity(cfg.max_iters.min(1 << 20));
    let mut flat = Vec::with_capacity(n_params);
    let mut termination = Termination::MaxIters;
    let mut rejected_steps = 0;
    let mut failure = None;
    let mut previous_block: Option<f64> = None;
    let want_hessian = cfg.order == Order::Second;
    let geometry = cfg.algorithm.geometry();

    let started = Instant::now();
    for t in 1..=cfg.max_iters {
        let ctx = state.draw(&mut rng)?;
        let hd = state.h_derivs(model, &ctx, want_hessian)?;
        elbo_trace.push(hd.value);
        let est = estimate_from(&state, &ctx, &hd, cfg.order, geometry)?;
        flatten(&est, &mut flat);
        let increment = stepper.step(&flat);

        let mut accepted = false;
        let mut scale = 1.0;
        for _ in 0..cfg.max_halvings {
            let delta_factor = unvech_slice(d, &increment[d..]);
            let mut factor = state.factor().clone();
            factor.axpy(scale, &delta_factor);
            let mu_ok = increment[..d].iter().all(|x| x.is_finite());
            if mu_ok && factor.has_positive_diagonal() {
                for (m, inc) in state.mu_mut().iter_mut().zip(&increment[..d]) {
                    *m += scale * inc;
                }
                *state.factor_mut() = factor;
                accepted = true;
                break;
            }
            rejected_steps += 1;
            scale *= 0.5;
        }
        if !accepted {
            termination = Termination::FactorFailure;
            failure = Some(format!(
                "iteration {t}: {} consecutive halved updates left a non-positive factor diagonal",
                cfg.max_halvings
            ));
            break;
        }
        observe(t, &state);

        if let Some(tol) = cfg.stop_tol {
            if t % cfg.window == 0 {
                let block = elbo_trace[t - cfg.window..].iter().sum::<f64>() / cfg.window as f64;
                if let Some(prev) = previous_block {
                    if block <= prev + tol {
                        termination = Termination::Converged;
                        break;
                    }
                }
                previous_block = Some(block);
            }
        }
    }
    let wall_time_s = started.elapsed().as_secs_f64();

    let iterations = elbo_trace.len();
    let averaged_trace = sliding_mean(&elbo_trace, cfg.window);
    let tail = iterations.min(cfg.window).max(1);
    let final_elbo = if iterations == 0 {
        f64::NAN
    } else {
        elbo_trace[iterations - tail..].iter().sum::<f64>() / tail as f64
    };
    Ok(RunRecord {
        iterations,
        elbo_trace,
        averaged_trace,
        window: cfg.window,
        final_elbo,
        wall_time_s,
        termination,
        rejected_steps,
        final_state: state,
        failure,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::QuadraticModel;
    use crate::trimat::{Matrix, Vector};
    use approx::assert_relative_eq;
    use rand::Rng;

    #[test]
    fn adam_first_step_is_sign_sized() {
        let p = AdamParams::default();
        for c in [3.0, -0.2, 1e-3] {
            let mut s = AdamState::new(4, p);
            let inc = s.step(&[c; 4]);
            for x in inc {
                assert_relative_eq!(x, p.alpha * c / (c.abs() + p.eps), max_relative = 1e-12);
                assert_relative_eq!(x, p.alpha * c.signum(), max_relative = 1e-4);
            }
        }
    }

    #[test]
    fn adam_zero_gradient_gives_zero_increment() {
        let mut s = AdamState::new(3, AdamParams::default());
        for _ in 0..10 {
            assert!(s.step(&[0.0; 3]).iter().all(|&x| x == 0.0));
        }
        assert_eq!(s.t(), 10);
    }

    #[test]
    fn adam_matches_scalar_reimplementation() {
        let p = AdamParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut s = AdamState::new(3, p);
        // per-coordinate scalar recursion with explicit bias corrections
        let mut m = [0.0f64; 3];
        let mut v = [0.0f64; 3];
        let mut b1t = 1.0;
        let mut b2t = 1.0;
        for _ in 0..100 {
            let g: Vec<f64> = (0..3).map(|_| rng.random_range(-5.0..5.0)).collect();
            let inc = s.step(&g);
            b1t *= p.beta1;
            b2t *= p.beta2;
            for k in 0..3 {
                m[k] = p.beta1 * m[k] + (1.0 - p.beta1) * g[k];
                v[k] = p.beta2 * v[k] + (1.0 - p.beta2) * g[k] * g[k];
                let expect = p.alpha * (m[k] / (1.0 - b1t)) / ((v[k] / (1.0 - b2t)).sqrt() + p.eps);
                assert!((inc[k] - expect).abs() <= 1e-12);
            }
            assert!(s.second_moment().iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn snngm_first_step_is_unit_normalized() {
        let p = SnngmParams::default();
        let mut s = SnngmState::new(3, 1, p);
        let g = [3.0, -4.0, 0.0];
        let inc = s.step(&g);
        assert_relative_eq!(inc[0], p.alpha * 0.6, max_relative = 1e-12);
        assert_relative_eq!(inc[1], -p.alpha * 0.8, max_relative = 1e-12);
        assert_eq!(inc[2], 0.0);
    }

    #[test]
    fn snngm_zero_gradient_gives_zero_increment() {
        let mut s = SnngmState::new(2, 1, SnngmParams::default());
        for _ in 0..5 {
            assert_eq!(s.step(&[0.0, 0.0]), vec![0.0, 0.0]);
        }
    }

    #[test]
    fn snngm_increment_norm_is_bounded() {
        let p = SnngmParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10_000 {
            let len = rng.random_range(1..8);
            let mut s = SnngmState::new(len, 1, p);
            for _ in 0..rng.random_range(1..6) {
                let scale = 10f64.powi(rng.random_range(-8..8));
                let g: Vec<f64> = (0..len)
                    .map(|_| scale * rng.random_range(-1.0..1.0))
                    .collect();
                let inc = s.step(&g);
                let norm = inc.iter().map(|x| x * x).sum::<f64>().sqrt();
                assert!(norm <= p.alpha + 1e-15, "norm {norm}");
            }
        }
    }

    #[test]
    fn snngm_per_block_normalizes_each_block() {
        let p = SnngmParams {
            per_block: true,
            ..SnngmParams::default()
        };
        let mut s = SnngmState::new(3, 1, p);
        let inc = s.step(&[5.0, 0.0, 2.0]);
        assert_relative_eq!(inc[0], p.alpha);
        assert_relative_eq!(inc[2], p.alpha);
    }

    #[test]
    fn config_validation() {
        let mut cfg = RunConfig::new(Algorithm::CovEuclidean, Order::First, StepperKind::Snngm);
        assert!(cfg.validate().is_err());
        cfg.stepper = StepperKind::Adam;
        assert!(cfg.validate().is_ok());
        cfg.window = cfg.max_iters + 1;
        assert!(cfg.validate().is_err());
        cfg.window = 10;
        cfg.stop_tol = Some(-1.0);
        assert!(cfg.validate().is_err());
        assert_eq!("2n".parse::<Algorithm>().unwrap(), Algorithm::PrecNatural);
        assert!("3E".parse::<Algorithm>().is_err());
    }

    #[test]
    fn rejects_mismatched_parametrization() {
        let model = QuadraticModel::new(Vector::zeros(2), Matrix::identity(2, 2), 0.0).unwrap();
        let cfg = RunConfig::new(Algorithm::PrecNatural, Order::First, StepperKind::Snngm);
        let state = GaussianVariational::standard(2, Parametrization::Covariance);
        assert!(matches!(run(&model, &state, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn zero_step_leaves_state_unchanged() {
        let model = QuadraticModel::new(
            Vector::from_vec(vec![1.0, 2.0]),
            Matrix::identity(2, 2) * 3.0,
            0.0,
        )
        .unwrap();
        for algorithm in Algorithm::ALL {
            for stepper in [StepperKind::Adam, StepperKind::Snngm] {
                let mut cfg = RunConfig::new(algorithm, Order::First, stepper);
                if cfg.validate().is_err() {
                    continue;
                }
                cfg.max_iters = 500;
                cfg.window = 100;
                cfg.stop_tol = None;
                cfg.adam.alpha = 0.0;
                cfg.snngm.alpha = 0.0;
                let state = GaussianVariational::standard(2, algorithm.parametrization());
                let rec = run(&model, &state, &cfg).unwrap();
                assert_eq!(rec.final_state, state);
                assert_eq!(rec.termination, Termination::MaxIters);
                assert_eq!(rec.iterations, 500);
                assert_eq!(rec.averaged_trace.len(), 401);
            }
        }
    }

    #[test]
    fn sliding_mean_matches_direct() {
        let xs: Vec<f64> = (0..20).map(|i| (i * i) as f64).collect();
        let got = sliding_mean(&xs, 5);
        assert_eq!(got.len(), 16);
        for (k, g) in got.iter().enumerate() {
            let direct: f64 = xs[k..k + 5].iter().sum::<f64>() / 5.0;
            assert_relative_eq!(*g, direct, epsilon = 1e-9);
        }
        assert!(sliding_mean(&xs, 21).is_empty());
    }

    #[test]
    fn huge_steps_end_in_factor_failure() {
        // A huge Euclidean step on the factor drives its diagonal negative.
        let model =
            QuadraticModel::new(Vector::zeros(1), Matrix::identity(1, 1) * 1e6, 0.0).unwrap();
        let mut cfg = RunConfig::new(Algorithm::CovEuclidean, Order::Second, StepperKind::Adam);
        cfg.adam.alpha = 1e6;
        cfg.max_iters = 10;
        cfg.window = 5;
        cfg.max_halvings = 3;
        let rec = run(
            &model,
            &GaussianVariational::standard(1, Parametrization::Covariance),
            &cfg,
        )
        .unwrap();
        assert_eq!(rec.termination, Termination::FactorFailure);
        assert_eq!(rec.iterations, 1);
        assert_eq!(rec.rejected_steps, 3);
        assert!(rec.final_state.factor().has_positive_diagonal());
    }
}
