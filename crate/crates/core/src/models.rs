//! Log joint densities `l(theta) = log p(y, theta)` with exact derivatives.

use std::f64::consts::PI;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::trimat::{cholesky, spd_inverse, Matrix, Transpose, Vector};

/// Value, gradient and (optionally) Hessian of a scalar function at a point.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelDerivatives {
    pub value: f64,
    pub grad: Vector,
    pub hess: Option<Matrix>,
}

impl ModelDerivatives {
    /// Hessian, or a configuration error when the caller skipped it.
    pub fn hessian(&self) -> Result<&Matrix> {
        self.hess
            .as_ref()
            .ok_or_else(|| Error::Config("Hessian requested but not evaluated".into()))
    }
}

/// A twice-differentiable log joint density over `R^d`.
///
/// `want_hessian = false` lets first-order algorithms skip the `O(n d^2)` Hessian.
pub trait LogJoint: Sync {
    fn dim(&self) -> usize;

    fn eval(&self, theta: &Vector, want_hessian: bool) -> Result<ModelDerivatives>;
}

impl<M: LogJoint + ?Sized> LogJoint for &M {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn eval(&self, theta: &Vector, want_hessian: bool) -> Result<ModelDerivatives> {
        (**self).eval(theta, want_hessian)
    }
}

fn check_len(context: &'static str, expected: usize, v: &Vector) -> Result<()> {
    if v.len() != expected {
        return Err(Error::DimensionMismatch {
            context,
            expected,
            found: v.len(),
        });
    }
    Ok(())
}

/// `log(1 + exp(u))` without overflow for large `|u|`.
pub fn softplus(u: f64) -> f64 {
    if u > 0.0 {
        u + (-u).exp().ln_1p()
    } else {
        u.exp().ln_1p()
    }
}

/// Logistic function `exp(u) / (1 + exp(u))`.
pub fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

/// Bayesian logistic regression with an isotropic `N(0, sigma0_sq I)` prior.
#[derive(Debug, Clone)]
pub struct LogisticModel {
    x: Matrix,
    y: Vector,
    sigma0_sq: f64,
}

impl LogisticModel {
    pub fn new(x: Matrix, y: Vector, sigma0_sq: f64) -> Result<Self> {
        if x.nrows() == 0 || x.ncols() == 0 {
            return Err(Error::Config(
                "design matrix must have n >= 1 and d >= 1".into(),
            ));
        }
        check_len("logistic labels", x.nrows(), &y)?;
        if let Some(bad) = y.iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::Config(format!("labels must be 0 or 1, found {bad}")));
        }
        if !(sigma0_sq > 0.0 && sigma0_sq.is_finite()) {
            return Err(Error::Config(format!(
                "prior variance must be positive, got {sigma0_sq}"
            )));
        }
        Ok(Self { x, y, sigma0_sq })
    }

    pub fn from_dataset(data: &Dataset, sigma0_sq: f64) -> Result<Self> {
        Self::new(data.x.clone(), data.y.clone(), sigma0_sq)
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn design(&self) -> &Matrix {
        &self.x
    }

    pub fn labels(&self) -> &Vector {
        &self.y
    }

    pub fn sigma0_sq(&self) -> f64 {
        self.sigma0_sq
    }

    /// Posterior mode by damped Newton iteration on the (strictly concave) log joint.
    pub fn mode(&self, max_iters: usize, tol: f64) -> Result<Vector> {
        let mut theta = Vector::zeros(self.dim());
        let mut current = self.eval(&theta, true)?;
        for _ in 0..max_iters {
            let c = cholesky(&-current.hessian()?.clone())?;
            let w = c.solve(&current.grad, Transpose::No)?;
            let step = c.solve(&w, Transpose::Yes)?;
            let mut scale = 1.0;
            loop {
                let candidate = &theta + &step * scale;
                let next = self.eval(&candidate, true)?;
                if next.value >= current.value || scale < 1e-8 {
                    theta = candidate;
                    current = next;
                    break;
                }
                scale *= 0.5;
            }
            if current.grad.amax() < tol {
                break;
            }
        }
        Ok(theta)
    }
}

impl LogJoint for LogisticModel {
    fn dim(&self) -> usize {
        self.x.ncols()
    }

    fn eval(&self, theta: &Vector, want_hessian: bool) -> Result<ModelDerivatives> {
        let d = self.dim();
        check_len("logistic parameter", d, theta)?;
        let u = &self.x * theta;
        let mut value = 0.0;
        let mut resid = Vector::zeros(self.n());
        let mut weights = Vector::zeros(self.n());
        for i in 0..self.n() {
            value += self.y[i] * u[i] - softplus(u[i]);
            let p = sigmoid(u[i]);
            resid[i] = self.y[i] - p;
            weights[i] = p * (1.0 - p);
        }
        value -= 0.5 * d as f64 * (2.0 * PI * self.sigma0_sq).ln();
        value -= theta.norm_squared() / (2.0 * self.sigma0_sq);

        let grad = self.x.tr_mul(&resid) - theta / self.sigma0_sq;

        let hess = want_hessian.then(|| {
            let mut wx = self.x.clone();
            for (i, mut row) in wx.row_iter_mut().enumerate() {
                row *= weights[i];
            }
            let mut h = -self.x.tr_mul(&wx);
            for j in 0..d {
                h[(j, j)] -= 1.0 / self.sigma0_sq;
            }
            h
        });
        Ok(ModelDerivatives { value, grad, hess })
    }
}

/// Exactly quadratic log joint `ell0 - (theta - mode)^T P (theta - mode) / 2`.
///
/// Its posterior is `N(mode, P^{-1})`, which makes it the exact-answer target
/// for every estimator and algorithm in the crate.
#[derive(Debug, Clone)]
pub struct QuadraticModel {
    theta_hat: Vector,
    precision: Matrix,
    ell0: f64,
}

impl QuadraticModel {
    pub fn new(theta_hat: Vector, precision: Matrix, ell0: f64) -> Result<Self> {
        if precision.nrows() != precision.ncols() {
            return Err(Error::NotSquare {
                rows: precision.nrows(),
                cols: precision.ncols(),
            });
        }
        check_len("quadratic mode", precision.nrows(), &theta_hat)?;
        cholesky(&precision)?;
        Ok(Self {
            theta_hat,
            precision,
            ell0,
        })
    }

    /// Second-order Taylor expansion of `model` about `mode`.
    pub fn laplace<M: LogJoint>(model: &M, mode: &Vector) -> Result<Self> {
        let at = model.eval(mode, true)?;
        let p = -at.hessian()?;
        let sym = (&p + p.transpose()) * 0.5;
        Self::new(mode.clone(), sym, at.value)
    }

    pub fn theta_hat(&self) -> &Vector {
        &self.theta_hat
    }

    pub fn precision(&self) -> &Matrix {
        &self.precision
    }

    pub fn ell0(&self) -> f64 {
        self.ell0
    }

    pub fn posterior_covariance(&self) -> Result<Matrix> {
        spd_inverse(&self.precision)
    }

    /// Log normalizing constant of `exp(l)`, which is also the maximal ELBO.
    pub fn log_evidence(&self) -> Result<f64> {
        let c = cholesky(&self.precision)?;
        let d = self.dim() as f64;
        Ok(self.ell0 + 0.5 * d * (2.0 * PI).ln() - c.log_abs_det())
    }
}

impl LogJoint for QuadraticModel {
    fn dim(&self) -> usize {
        self.theta_hat.len()
    }

    fn eval(&self, theta: &Vector, want_hessian: bool) -> Result<ModelDerivatives> {
        check_len("quadratic parameter", self.dim(), theta)?;
        let delta = theta - &self.theta_hat;
        let pd = &self.precision * &delta;
        Ok(ModelDerivatives {
            value: self.ell0 - 0.5 * delta.dot(&pd),
            grad: -pd,
            hess: want_hessian.then(|| -&self.precision),
        })
    }
}

/// Wraps a model and counts evaluations.
#[derive(Debug, Default)]
pub struct Counted<M> {
    inner: M,
    evals: AtomicUsize,
    hessians: AtomicUsize,
}

impl<M> Counted<M> {
    pub fn new(inner: M) -> Self {
        Self {
            inner,
            evals: AtomicUsize::new(0),
            hessians: AtomicUsize::new(0),
        }
    }

    pub fn evaluations(&self) -> usize {
        self.evals.load(Ordering::Relaxed)
    }

    pub fn hessian_evaluations(&self) -> usize {
        self.hessians.load(Ordering::Relaxed)
    }

    pub fn inner(&self) -> &M {
        &self.inner
    }
}

impl<M: LogJoint> LogJoint for Counted<M> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn eval(&self, theta: &Vector, want_hessian: bool) -> Result<ModelDerivatives> {
        self.evals.fetch_add(1, Ordering::Relaxed);
        if want_hessian {
            self.hessians.fetch_add(1, Ordering::Relaxed);
        }
        self.inner.eval(theta, want_hessian)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_logistic(rng: &mut ChaCha8Rng, n: usize, d: usize) -> LogisticModel {
        let x = Matrix::from_fn(n, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = Vector::from_fn(n, |_, _| if rng.random_bool(0.4) { 1.0 } else { 0.0 });
        LogisticModel::new(x, y, 2.5).unwrap()
    }

    fn fd_grad<M: LogJoint>(m: &M, theta: &Vector, h: f64) -> Vector {
        Vector::from_fn(theta.len(), |j, _| {
            let mut p = theta.clone();
            let mut q = theta.clone();
            p[j] += h;
            q[j] -= h;
            (m.eval(&p, false).unwrap().value - m.eval(&q, false).unwrap().value) / (2.0 * h)
        })
    }

    fn fd_hess<M: LogJoint>(m: &M, theta: &Vector, h: f64) -> Matrix {
        let d = theta.len();
        let mut out = Matrix::zeros(d, d);
        for j in 0..d {
            let mut p = theta.clone();
            let mut q = theta.clone();
            p[j] += h;
            q[j] -= h;
            let col =
                (m.eval(&p, false).unwrap().grad - m.eval(&q, false).unwrap().grad) / (2.0 * h);
            out.set_column(j, &col);
        }
        out
    }

    #[test]
    fn logistic_at_zero() {
        let x = Matrix::from_row_slice(3, 2, &[1., 2., -1., 0.5, 0.3, 0.3]);
        let y = Vector::from_vec(vec![1., 0., 1.]);
        let s2 = 4.0;
        let m = LogisticModel::new(x.clone(), y.clone(), s2).unwrap();
        let out = m.eval(&Vector::zeros(2), true).unwrap();
        let expect_value = -3.0 * 2f64.ln() - (2.0 * PI * s2).ln();
        assert_relative_eq!(out.value, expect_value, epsilon = 1e-12);
        let expect_grad = x.tr_mul(&y.map(|v| v - 0.5));
        assert_relative_eq!(out.grad, expect_grad, epsilon = 1e-12);
        let expect_hess = -x.tr_mul(&x) * 0.25 - Matrix::identity(2, 2) / s2;
        assert_relative_eq!(out.hess.unwrap(), expect_hess, epsilon = 1e-12);
    }

    #[test]
    fn logistic_scalar_substitution() {
        let m = LogisticModel::new(
            Matrix::from_element(1, 1, 1.0),
            Vector::from_element(1, 1.0),
            1.0,
        )
        .unwrap();
        let out = m.eval(&Vector::zeros(1), true).unwrap();
        assert_relative_eq!(
            out.value,
            -(2f64.ln()) - 0.5 * (2.0 * PI).ln(),
            epsilon = 1e-14
        );
        assert_relative_eq!(out.grad[0], 0.5, epsilon = 1e-14);
        assert_relative_eq!(out.hess.unwrap()[(0, 0)], -1.25, epsilon = 1e-14);
    }

    #[test]
    fn logistic_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let m = random_logistic(&mut rng, 50, 5);
            let theta = Vector::from_fn(5, |_, _| rng.random_range(-1.0..1.0));
            let out = m.eval(&theta, true).unwrap();
            let g = fd_grad(&m, &theta, 1e-5);
            assert!((&out.grad - &g).amax() <= 1e-5 * out.grad.amax().max(1.0));
            let h = fd_hess(&m, &theta, 1e-5);
            let hess = out.hess.unwrap();
            assert!((&hess - &h).amax() <= 1e-4 * hess.amax());
        }
    }

    #[test]
    fn logistic_hessian_negative_definite_and_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = random_logistic(&mut rng, 30, 4);
        let theta = Vector::from_fn(4, |_, _| rng.random_range(-3.0..3.0));
        let hess = m.eval(&theta, true).unwrap().hess.unwrap();
        assert!((&hess - hess.transpose()).amax() <= 1e-9 * hess.amax());
        assert!(cholesky(&-hess).is_ok());
    }

    #[test]
    fn logistic_skips_hessian_when_not_requested() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random_logistic(&mut rng, 5, 2);
        assert!(m.eval(&Vector::zeros(2), false).unwrap().hess.is_none());
    }

    #[test]
    fn logistic_is_overflow_safe() {
        let x = Matrix::from_row_slice(2, 1, &[1.0, -1.0]);
        let y = Vector::from_vec(vec![0.0, 1.0]);
        let m = LogisticModel::new(x, y, 100.0).unwrap();
        let out = m.eval(&Vector::from_element(1, 800.0), true).unwrap();
        assert!(out.value.is_finite());
        // both observations misfit by 800 nats
        let prior = -0.5 * (2.0 * PI * 100.0).ln() - 800.0 * 800.0 / 200.0;
        assert_relative_eq!(out.value, -1600.0 + prior, max_relative = 1e-12);
        assert!(out.grad.iter().all(|g| g.is_finite()));
        assert!(out.hess.unwrap().iter().all(|h| h.is_finite()));
    }

    #[test]
    fn logistic_rejects_bad_input() {
        let x = Matrix::from_element(2, 1, 1.0);
        assert!(LogisticModel::new(x.clone(), Vector::from_vec(vec![0., 2.]), 1.0).is_err());
        assert!(LogisticModel::new(x.clone(), Vector::from_vec(vec![0., 1.]), 0.0).is_err());
        assert!(LogisticModel::new(x.clone(), Vector::from_vec(vec![0.]), 1.0).is_err());
        let m = LogisticModel::new(x, Vector::from_vec(vec![0., 1.]), 1.0).unwrap();
        assert!(matches!(
            m.eval(&Vector::zeros(3), false),
            Err(Error::DimensionMismatch {
                expected: 1,
                found: 3,
                ..
            })
        ));
    }

    #[test]
    fn logistic_mode_has_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let m = random_logistic(&mut rng, 80, 3);
        let mode = m.mode(100, 1e-12).unwrap();
        assert!(m.eval(&mode, false).unwrap().grad.amax() < 1e-10);
    }

    #[test]
    fn quadratic_examples() {
        let m = QuadraticModel::new(
            Vector::from_vec(vec![1.0]),
            Matrix::from_element(1, 1, 2.0),
            0.0,
        )
        .unwrap();
        let out = m.eval(&Vector::from_vec(vec![3.0]), true).unwrap();
        assert_eq!(out.value, -4.0);
        assert_eq!(out.grad[0], -4.0);
        assert_eq!(out.hess.unwrap()[(0, 0)], -2.0);

        let at_mode = m.eval(&Vector::from_vec(vec![1.0]), false).unwrap();
        assert_eq!(at_mode.value, 0.0);
        assert_eq!(at_mode.grad[0], 0.0);
    }

    #[test]
    fn quadratic_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = Matrix::from_fn(4, 4, |_, _| rng.random_range(-1.0..1.0));
        let p = &b * b.transpose() + Matrix::identity(4, 4);
        let m = QuadraticModel::new(Vector::from_fn(4, |i, _| i as f64 * 0.3), p, 1.5).unwrap();
        for _ in 0..5 {
            let theta = Vector::from_fn(4, |_, _| rng.random_range(-2.0..2.0));
            let out = m.eval(&theta, true).unwrap();
            assert!(
                (fd_grad(&m, &theta, 1e-5) - &out.grad).amax() <= 1e-6 * out.grad.amax().max(1.0)
            );
            assert!((fd_hess(&m, &theta, 1e-5) - out.hess.unwrap()).amax() <= 1e-6);
        }
    }

    #[test]
    fn quadratic_rejects_indefinite_precision() {
        let p = Matrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(QuadraticModel::new(Vector::zeros(2), p, 0.0).is_err());
    }

    #[test]
    fn quadratic_log_evidence_matches_gaussian_normalizer() {
        let p = Matrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let m = QuadraticModel::new(Vector::zeros(2), p.clone(), -3.0).unwrap();
        let expect = -3.0 + (2.0 * PI).ln() - 0.5 * p.determinant().ln();
        assert_relative_eq!(m.log_evidence().unwrap(), expect, epsilon = 1e-12);
    }

    #[test]
    fn counted_wrapper_counts() {
        let m = Counted::new(
            QuadraticModel::new(Vector::zeros(1), Matrix::identity(1, 1), 0.0).unwrap(),
        );
        m.eval(&Vector::zeros(1), false).unwrap();
        m.eval(&Vector::zeros(1), true).unwrap();
        assert_eq!(m.evaluations(), 2);
        assert_eq!(m.hessian_evaluations(), 1);
    }
}
