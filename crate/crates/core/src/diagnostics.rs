//! Monte Carlo checks of the Gaussian expectation identities behind the
//! estimators, variance comparisons of first- and second-order factor
//! estimates, and ELBO estimation.
//!
//! Draws are generated in fixed-size blocks, each from its own ChaCha stream
//! (`seed`, block index). Blocks may run in parallel; their moments are merged
//! in block order, so results do not depend on the number of threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::synth_logistic;
use crate::error::{Error, Result};
use crate::estimators::{f1, f2, g1, g2};
use crate::models::{LogJoint, LogisticModel, ModelDerivatives, QuadraticModel};
use crate::trimat::{unvech_slice, vech_into, LowerTriangular, Matrix, Vector};
use crate::variational::{DrawContext, GaussianVariational, Parametrization};

const BLOCK: usize = 4096;

/// Welford running mean and sum of squared deviations, entrywise.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    n: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Moments {
    pub fn new(len: usize) -> Self {
        Self {
            n: 0,
            mean: vec![0.0; len],
            m2: vec![0.0; len],
        }
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn push(&mut self, x: &[f64]) {
        debug_assert_eq!(x.len(), self.mean.len());
        self.n += 1;
        let n = self.n as f64;
        for ((mean, m2), &xi) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(x) {
            let delta = xi - *mean;
            *mean += delta / n;
            *m2 += delta * (xi - *mean);
        }
    }

    /// Pairwise combination of two independent accumulations.
    pub fn merge(&mut self, other: &Moments) {
        if other.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = other.clone();
            return;
        }
        let (na, nb) = (self.n as f64, other.n as f64);
        let n = na + nb;
        for k in 0..self.mean.len() {
            let delta = other.mean[k] - self.mean[k];
            self.mean[k] += delta * nb / n;
            self.m2[k] += other.m2[k] + delta * delta * na * nb / n;
        }
        self.n += other.n;
    }

    /// Sample variance (n - 1 divisor); zero for fewer than two samples.
    pub fn variance(&self) -> Vec<f64> {
        if self.n < 2 {
            return vec![0.0; self.mean.len()];
        }
        self.m2.iter().map(|m2| m2 / (self.n - 1) as f64).collect()
    }

    pub fn std_error(&self) -> Vec<f64> {
        let n = self.n.max(1) as f64;
        self.variance().iter().map(|v| (v / n).sqrt()).collect()
    }
}

fn block_rng(seed: u64, block: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(block as u64);
    rng
}

/// Accumulates `per_draw` over `n` draws from `state`, `width` moments at a time.
fn accumulate<F>(
    state: &GaussianVariational,
    n: usize,
    seed: u64,
    widths: &[usize],
    per_draw: F,
) -> Result<Vec<Moments>>
where
    F: Fn(&DrawContext, &mut [Vec<f64>]) -> Result<()> + Sync,
{
    let blocks = n.div_ceil(BLOCK);
    let partial: Vec<Vec<Moments>> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut rng = block_rng(seed, b);
            let mut acc: Vec<Moments> = widths.iter().map(|&w| Moments::new(w)).collect();
            let mut bufs: Vec<Vec<f64>> = widths.iter().map(|&w| Vec::with_capacity(w)).collect();
            let count = BLOCK.min(n - b * BLOCK);
            for _ in 0..count {
                let ctx = state.draw(&mut rng)?;
                bufs.iter_mut().for_each(Vec::clear);
                per_draw(&ctx, &mut bufs)?;
                for (a, buf) in acc.iter_mut().zip(&bufs) {
                    a.push(buf);
                }
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut total: Vec<Moments> = widths.iter().map(|&w| Moments::new(w)).collect();
    for part in &partial {
        for (t, p) in total.iter_mut().zip(part) {
            t.merge(p);
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Identity {
    /// `E[Sigma^{-1}(theta - mu) f] = E[grad f]`.
    BonnetStein,
    /// `E[Sigma^{-1}(theta - mu) grad f^T] / 2 = E[hess f] / 2`.
    Price,
    /// `E[{Sigma^{-1}(theta - mu)(theta - mu)^T - I} f] = E[grad f (theta - mu)^T]`.
    Lemma1,
    /// `E[grad f (theta - mu)^T C^{-T}] = E[hess f C]`.
    Thm1a,
    /// `E[-(theta - mu) grad f^T T^{-T}] = E[-Sigma hess f T^{-T}]`.
    Thm1b,
}

impl Identity {
    pub const ALL: [Identity; 5] = [
        Identity::BonnetStein,
        Identity::Price,
        Identity::Lemma1,
        Identity::Thm1a,
        Identity::Thm1b,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Identity::BonnetStein => "BONNET_STEIN",
            Identity::Price => "PRICE",
            Identity::Lemma1 => "LEMMA1",
            Identity::Thm1a => "THM1A",
            Identity::Thm1b => "THM1B",
        }
    }

    fn needs_hessian(self) -> bool {
        matches!(self, Identity::Price | Identity::Thm1a | Identity::Thm1b)
    }

    fn parametrization(self) -> Option<Parametrization> {
        match self {
            Identity::Thm1a => Some(Parametrization::Covariance),
            Identity::Thm1b => Some(Parametrization::Precision),
            _ => None,
        }
    }
}

/// Fault injection for exercising the gates; never set outside tests.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Fault {
    /// Negate the left-hand side of every identity.
    pub flip_lhs_sign: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityReport {
    pub identity: Identity,
    pub n_samples: usize,
    /// Row-major; a vector identity is reported as a `d x 1` matrix.
    pub lhs_mean: Vec<Vec<f64>>,
    pub rhs_mean: Vec<Vec<f64>>,
    pub max_abs_gap: f64,
    /// Largest entrywise gap divided by the standard error of the paired difference.
    pub max_gap_in_se: f64,
}

impl IdentityReport {
    pub fn passes(&self, max_se: f64) -> bool {
        self.max_gap_in_se <= max_se
    }
}

fn push_matrix(out: &mut Vec<f64>, m: &Matrix) {
    // row-major
    for i in 0..m.nrows() {
        out.extend(m.row(i).iter());
    }
}

fn rows_of(flat: &[f64], cols: usize) -> Vec<Vec<f64>> {
    flat.chunks(cols).map(<[f64]>::to_vec).collect()
}

/// Checks `which` for `f = h = l - log q` of `model` under `state`.
pub fn check_identity<M: LogJoint + ?Sized>(
    which: Identity,
    state: &GaussianVariational,
    model: &M,
    n_samples: usize,
    seed: u64,
) -> Result<IdentityReport> {
    check_identity_with(
        which,
        state,
        n_samples,
        seed,
        Fault::default(),
        |s, ctx, hess| s.h_derivs(model, ctx, hess),
    )
}

/// Checks `which` for an arbitrary smooth `f`, evaluated directly.
pub fn check_function_identity<F: LogJoint + ?Sized>(
    which: Identity,
    state: &GaussianVariational,
    f: &F,
    n_samples: usize,
    seed: u64,
) -> Result<IdentityReport> {
    check_identity_with(
        which,
        state,
        n_samples,
        seed,
        Fault::default(),
        |_, ctx, hess| f.eval(&ctx.theta, hess),
    )
}

/// General form: `eval(state, ctx, want_hessian)` returns `f` and its derivatives at the draw.
pub fn check_identity_with<E>(
    which: Identity,
    state: &GaussianVariational,
    n_samples: usize,
    seed: u64,
    fault: Fault,
    eval: E,
) -> Result<IdentityReport>
where
    E: Fn(&GaussianVariational, &DrawContext, bool) -> Result<ModelDerivatives> + Sync,
{
    if n_samples < 2 {
        return Err(Error::Config(
            "identity checks need at least two samples".into(),
        ));
    }
    let state = match which.parametrization() {
        Some(p) => state.reparametrize(p)?,
        None => state.clone(),
    };
    let d = state.dim();
    let cols = if which == Identity::BonnetStein { 1 } else { d };
    let width = d * cols;
    let mu = state.mu();
    let sign = if fault.flip_lhs_sign { -1.0 } else { 1.0 };
    let hess_needed = which.needs_hessian();

    let moments = accumulate(
        &state,
        n_samples,
        seed,
        &[width, width, width],
        |ctx, bufs| {
            let fd = eval(&state, ctx, hess_needed)?;
            let score = state.precision_times_offset(ctx)?;
            let offset = &ctx.theta - &mu;
            let (lhs, rhs): (Matrix, Matrix) = match which {
                Identity::BonnetStein => (
                    Matrix::from_column_slice(d, 1, (&score * fd.value).as_slice()),
                    Matrix::from_column_slice(d, 1, fd.grad.as_slice()),
                ),
                Identity::Price => (&score * fd.grad.transpose() * 0.5, fd.hessian()? * 0.5),
                Identity::Lemma1 => (
                    (&score * offset.transpose() - Matrix::identity(d, d)) * fd.value,
                    &fd.grad * offset.transpose(),
                ),
                Identity::Thm1a => {
                    let c = state.factor().as_matrix();
                    // (theta - mu)^T C^{-T} = z^T
                    (&fd.grad * ctx.z.transpose(), fd.hessian()? * c)
                }
                Identity::Thm1b => {
                    let t = state.factor();
                    // grad^T T^{-T} = (T^{-1} grad)^T
                    let tg = t.solve(&fd.grad, crate::trimat::Transpose::No)?;
                    let lhs = -(&offset * tg.transpose());
                    // Sigma hess T^{-T}, via solves against T
                    let right = t
                        .solve_matrix(&fd.hessian()?.transpose(), crate::trimat::Transpose::No)?
                        .transpose();
                    let mid = t.solve_matrix(&right, crate::trimat::Transpose::No)?;
                    let rhs = -t.solve_matrix(&mid, crate::trimat::Transpose::Yes)?;
                    (lhs, rhs)
                }
            };
            let lhs = lhs * sign;
            push_matrix(&mut bufs[0], &lhs);
            push_matrix(&mut bufs[1], &rhs);
            push_matrix(&mut bufs[2], &(lhs - rhs));
            Ok(())
        },
    )?;

    let (lhs, rhs, diff) = (&moments[0], &moments[1], &moments[2]);
    let se = diff.std_error();
    let mut max_abs_gap: f64 = 0.0;
    let mut max_gap_in_se: f64 = 0.0;
    for ((l, r), se) in lhs.mean().iter().zip(rhs.mean()).zip(&se) {
        let gap = (l - r).abs();
        let in_se = if gap.is_nan() {
            // f64::max would silently drop a NaN
            f64::INFINITY
        } else if *se > 0.0 {
            gap / se
        } else if gap <= 1e-12 * (1.0 + r.abs()) {
            0.0
        } else {
            f64::INFINITY
        };
        max_abs_gap = max_abs_gap.max(if gap.is_nan() { f64::INFINITY } else { gap });
        max_gap_in_se = max_gap_in_se.max(in_se);
    }
    Ok(IdentityReport {
        identity: which,
        n_samples,
        lhs_mean: rows_of(lhs.mean(), cols),
        rhs_mean: rows_of(rhs.mean(), cols),
        max_abs_gap,
        max_gap_in_se,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EstimatorKind {
    G1,
    F1,
    G2,
    F2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub estimator: EstimatorKind,
    pub n_samples: usize,
    /// Sample variance of each lower-triangular entry of the masked estimate.
    pub entry_variances: LowerTriangular,
    pub max_entry_variance: f64,
}

/// Entrywise variances of the masked first- and second-order factor estimates
/// over shared draws: `(G1, F1)` for a covariance state, `(G2, F2)` for a precision state.
pub fn compare_variance<M: LogJoint + ?Sized>(
    state: &GaussianVariational,
    model: &M,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<VarianceReport>> {
    if n_samples < 2 {
        return Err(Error::Config(
            "variance comparison needs at least two samples".into(),
        ));
    }
    let d = state.dim();
    let width = d * (d + 1) / 2;
    let moments = accumulate(state, n_samples, seed, &[width, width], |ctx, bufs| {
        let hd = state.h_derivs(model, ctx, true)?;
        let (first, second) = match state.parametrization() {
            Parametrization::Covariance => {
                (g1(&hd.grad, &ctx.z), f1(hd.hessian()?, state.factor()))
            }
            Parametrization::Precision => (
                g2(&hd.grad, &ctx.z, state.factor())?,
                f2(hd.hessian()?, state.factor())?,
            ),
        };
        vech_into(&first, &mut bufs[0]);
        vech_into(&second, &mut bufs[1]);
        Ok(())
    })?;
    let kinds = match state.parametrization() {
        Parametrization::Covariance => [EstimatorKind::G1, EstimatorKind::F1],
        Parametrization::Precision => [EstimatorKind::G2, EstimatorKind::F2],
    };
    Ok(kinds
        .into_iter()
        .zip(&moments)
        .map(|(estimator, m)| {
            let var = m.variance();
            VarianceReport {
                estimator,
                n_samples,
                max_entry_variance: var.iter().copied().fold(0.0, f64::max),
                entry_variances: unvech_slice(d, &var),
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboEstimate {
    pub mean: f64,
    /// Standard error of the mean; NaN for a single sample.
    pub std_error: f64,
    pub n_samples: usize,
}

/// Monte Carlo mean of `h(theta)` under `state`.
pub fn elbo_estimate<M: LogJoint + ?Sized>(
    state: &GaussianVariational,
    model: &M,
    n_samples: usize,
    seed: u64,
) -> Result<ElboEstimate> {
    if n_samples == 0 {
        return Err(Error::Config(
            "ELBO estimate needs at least one sample".into(),
        ));
    }
    let m = accumulate(state, n_samples, seed, &[1], |ctx, bufs| {
        bufs[0].push(state.h_derivs(model, ctx, false)?.value);
        Ok(())
    })?;
    let std_error = if n_samples < 2 {
        f64::NAN
    } else {
        m[0].std_error()[0]
    };
    Ok(ElboEstimate {
        mean: m[0].mean()[0],
        std_error,
        n_samples,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckLevel {
    Quick,
    Full,
}

impl CheckLevel {
    pub fn n_samples(self) -> usize {
        match self {
            CheckLevel::Quick => 10_000,
            CheckLevel::Full => 1_000_000,
        }
    }

    pub fn dim(self) -> usize {
        match self {
            CheckLevel::Quick => 3,
            CheckLevel::Full => 5,
        }
    }
}

/// Gate thresholds applied by [`run_check_suite`].
pub const IDENTITY_GATE_SE: f64 = 5.0;
pub const ZERO_VARIANCE_GATE: f64 = 1e-24;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceCase {
    /// `optimum` or `offset`.
    pub at: String,
    pub parametrization: Parametrization,
    pub reports: Vec<VarianceReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckSuiteReport {
    pub level: CheckLevel,
    pub seed: u64,
    pub identities: Vec<IdentityReport>,
    pub variance: Vec<VarianceCase>,
    pub failures: Vec<String>,
}

impl CheckSuiteReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Random logistic target (`n = 50` synthetic rows) and a random valid state.
pub fn identity_fixture(d: usize, seed: u64) -> Result<(LogisticModel, GaussianVariational)> {
    use rand::Rng;
    use rand_distr::StandardNormal;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let theta_true = Vector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let data = synth_logistic(50, &theta_true, false, seed ^ 0x9e37_79b9_7f4a_7c15);
    let model = LogisticModel::from_dataset(&data, 10.0)?;
    let b = Matrix::from_fn(d, d, |_, _| rng.random_range(-0.3..0.3));
    let sigma = &b * b.transpose() + Matrix::identity(d, d) * 0.1;
    let mu = Vector::from_fn(d, |_, _| 0.5 * rng.sample::<f64, _>(StandardNormal));
    let state = GaussianVariational::from_moments(mu, &sigma, Parametrization::Covariance)?;
    Ok((model, state))
}

/// Quadratic target and the matched (`optimum`) and perturbed (`offset`) states.
pub fn variance_fixture(
    d: usize,
    seed: u64,
    parametrization: Parametrization,
) -> Result<(QuadraticModel, GaussianVariational, GaussianVariational)> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = Matrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
    let precision = &b * b.transpose() + Matrix::identity(d, d);
    let mode = Vector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
    let model = QuadraticModel::new(mode, precision, -10.0)?;
    let (optimum, offset) = matched_states(&model, parametrization)?;
    Ok((model, optimum, offset))
}

/// The exact fit `N(mode, P^{-1})` of a quadratic target, and the same state
/// with every mean coordinate shifted by 0.1 and the covariance scaled by 1.21.
pub fn matched_states(
    model: &QuadraticModel,
    parametrization: Parametrization,
) -> Result<(GaussianVariational, GaussianVariational)> {
    let sigma = model.posterior_covariance()?;
    let mode = model.theta_hat();
    let optimum = GaussianVariational::from_moments(mode.clone(), &sigma, parametrization)?;
    let offset =
        GaussianVariational::from_moments(mode.add_scalar(0.1), &(&sigma * 1.21), parametrization)?;
    Ok((optimum, offset))
}

/// All five identity checks on a logistic target plus the variance comparison
/// on a quadratic target, at preset sizes.
pub fn run_check_suite(level: CheckLevel, seed: u64, fault: Fault) -> Result<CheckSuiteReport> {
    let d = level.dim();
    let n = level.n_samples();
    let (model, state) = identity_fixture(d, seed)?;
    let mut failures = Vec::new();
    let mut identities = Vec::new();
    for which in Identity::ALL {
        let report = check_identity_with(which, &state, n, seed, fault, |s, ctx, hess| {
            s.h_derivs(&model, ctx, hess)
        })?;
        if !report.passes(IDENTITY_GATE_SE) {
            failures.push(format!(
                "{}: gap {:.3} standard errors exceeds {IDENTITY_GATE_SE}",
                which.name(),
                report.max_gap_in_se
            ));
        }
        identities.push(report);
    }

    let mut variance = Vec::new();
    let n_var = n.min(10_000);
    for p in [Parametrization::Covariance, Parametrization::Precision] {
        let (qmodel, optimum, offset) = variance_fixture(d, seed, p)?;
        for (at, state) in [("optimum", optimum), ("offset", offset)] {
            let reports = compare_variance(&state, &qmodel, n_var, seed)?;
            let (first, second) = (&reports[0], &reports[1]);
            if second.max_entry_variance > ZERO_VARIANCE_GATE {
                failures.push(format!(
                    "{:?} at {at}: max entry variance {:e} exceeds {ZERO_VARIANCE_GATE:e}",
                    second.estimator, second.max_entry_variance
                ));
            }
            if at == "offset"
                && (first.max_entry_variance.is_nan() || first.max_entry_variance <= 0.0)
            {
                failures.push(format!(
                    "{:?} at {at}: variance is not positive",
                    first.estimator
                ));
            }
            variance.push(VarianceCase {
                at: at.to_string(),
                parametrization: p,
                reports,
            });
        }
    }
    Ok(CheckSuiteReport {
        level,
        seed,
        identities,
        variance,
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn moments_merge_matches_single_pass() {
        let xs: Vec<f64> = (0..101)
            .map(|i| ((i * 37) % 17) as f64 * 0.3 - 2.0)
            .collect();
        let mut whole = Moments::new(1);
        xs.iter().for_each(|x| whole.push(&[*x]));
        let mut a = Moments::new(1);
        let mut b = Moments::new(1);
        xs[..40].iter().for_each(|x| a.push(&[*x]));
        xs[40..].iter().for_each(|x| b.push(&[*x]));
        a.merge(&b);
        assert_eq!(a.count(), 101);
        assert_relative_eq!(a.mean()[0], whole.mean()[0], epsilon = 1e-12);
        assert_relative_eq!(a.variance()[0], whole.variance()[0], epsilon = 1e-12);
        let mean = xs.iter().sum::<f64>() / 101.0;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 100.0;
        assert_relative_eq!(whole.variance()[0], var, epsilon = 1e-12);
    }

    #[test]
    fn constant_samples_have_exactly_zero_variance() {
        let mut m = Moments::new(2);
        for _ in 0..1000 {
            m.push(&[0.1, -3.7]);
        }
        let mut other = m.clone();
        other.merge(&m);
        assert_eq!(other.variance(), vec![0.0, 0.0]);
    }

    #[test]
    fn too_few_samples_rejected() {
        let (model, state) = identity_fixture(2, 1).unwrap();
        assert!(check_identity(Identity::Price, &state, &model, 1, 0).is_err());
        assert!(compare_variance(&state, &model, 1, 0).is_err());
        assert!(elbo_estimate(&state, &model, 0, 0).is_err());
    }

    #[test]
    fn elbo_single_sample_equals_h_at_draw() {
        let (model, state) = identity_fixture(3, 2).unwrap();
        let est = elbo_estimate(&state, &model, 1, 77).unwrap();
        let mut rng = block_rng(77, 0);
        let ctx = state.draw(&mut rng).unwrap();
        let h = state.h_derivs(&model, &ctx, false).unwrap().value;
        assert_eq!(est.mean, h);
        assert!(est.std_error.is_nan());
    }

    #[test]
    fn variance_with_two_samples_is_finite() {
        let (model, optimum, offset) = variance_fixture(3, 4, Parametrization::Precision).unwrap();
        for state in [optimum, offset] {
            for r in compare_variance(&state, &model, 2, 9).unwrap() {
                assert!(r.max_entry_variance.is_finite() && r.max_entry_variance >= 0.0);
            }
        }
    }

    #[test]
    fn results_do_not_depend_on_thread_count() {
        let (model, state) = identity_fixture(3, 5).unwrap();
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| {
                    check_identity(Identity::Thm1a, &state, &model, 3 * BLOCK + 17, 3).unwrap()
                })
        };
        assert_eq!(run(1), run(4));
    }
}
