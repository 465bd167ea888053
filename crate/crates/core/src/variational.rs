//! Gaussian variational family `q(theta) = N(mu, Sigma)` with a Cholesky-factor
//! parametrization, either of the covariance (`Sigma = C C^T`) or of the
//! precision (`Sigma^{-1} = T T^T`).

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{LogJoint, ModelDerivatives};
use crate::trimat::{cholesky, spd_inverse, LowerTriangular, Matrix, Transpose, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parametrization {
    /// `Sigma = C C^T`, sample `theta = mu + C z`.
    Covariance,
    /// `Sigma^{-1} = T T^T`, sample `theta = mu + T^{-T} z`.
    Precision,
}

/// Variational parameters `lambda = (mu, vech(factor))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianVariational {
    mu: Vec<f64>,
    factor: LowerTriangular,
    parametrization: Parametrization,
}

/// One reparametrized draw: `z ~ N(0, I)` and the sample `theta` it maps to.
#[derive(Debug, Clone, PartialEq)]
pub struct DrawContext {
    pub z: Vector,
    pub theta: Vector,
}

impl GaussianVariational {
    /// Rejects mismatched dimensions and factors without a strictly positive diagonal.
    pub fn new(
        mu: Vector,
        factor: LowerTriangular,
        parametrization: Parametrization,
    ) -> Result<Self> {
        if mu.len() != factor.dim() {
            return Err(Error::DimensionMismatch {
                context: "variational mean",
                expected: factor.dim(),
                found: mu.len(),
            });
        }
        if let Some((index, &value)) = factor
            .diagonal()
            .iter()
            .enumerate()
            .find(|(_, &v)| !(v > 0.0 && v.is_finite()))
        {
            return Err(Error::SingularFactor { index, value });
        }
        Ok(Self {
            mu: mu.as_slice().to_vec(),
            factor,
            parametrization,
        })
    }

    /// `mu = 0`, identity factor.
    pub fn standard(d: usize, parametrization: Parametrization) -> Self {
        Self {
            mu: vec![0.0; d],
            factor: LowerTriangular::identity(d),
            parametrization,
        }
    }

    /// Builds the state whose Gaussian is `N(mu, sigma)`.
    pub fn from_moments(
        mu: Vector,
        sigma: &Matrix,
        parametrization: Parametrization,
    ) -> Result<Self> {
        let factor = match parametrization {
            Parametrization::Covariance => cholesky(sigma)?,
            Parametrization::Precision => cholesky(&symmetrize(&spd_inverse(sigma)?))?,
        };
        Self::new(mu, factor, parametrization)
    }

    /// Same Gaussian expressed in the other parametrization.
    pub fn reparametrize(&self, parametrization: Parametrization) -> Result<Self> {
        if parametrization == self.parametrization {
            return Ok(self.clone());
        }
        Self::from_moments(self.mu(), &self.covariance()?, parametrization)
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> Vector {
        Vector::from_column_slice(&self.mu)
    }

    pub fn mu_slice(&self) -> &[f64] {
        &self.mu
    }

    pub fn factor(&self) -> &LowerTriangular {
        &self.factor
    }

    pub fn parametrization(&self) -> Parametrization {
        self.parametrization
    }

    pub(crate) fn mu_mut(&mut self) -> &mut [f64] {
        &mut self.mu
    }

    pub(crate) fn factor_mut(&mut self) -> &mut LowerTriangular {
        &mut self.factor
    }

    pub fn covariance(&self) -> Result<Matrix> {
        match self.parametrization {
            Parametrization::Covariance => Ok(self.factor.gram()),
            Parametrization::Precision => {
                let d = self.dim();
                let tinv = self
                    .factor
                    .solve_matrix(&Matrix::identity(d, d), Transpose::No)?;
                Ok(tinv.tr_mul(&tinv))
            }
        }
    }

    pub fn precision(&self) -> Result<Matrix> {
        match self.parametrization {
            Parametrization::Covariance => {
                let d = self.dim();
                let cinv = self
                    .factor
                    .solve_matrix(&Matrix::identity(d, d), Transpose::No)?;
                Ok(cinv.tr_mul(&cinv))
            }
            Parametrization::Precision => Ok(self.factor.gram()),
        }
    }

    /// `theta = mu + C z` or `theta = mu + T^{-T} z`.
    pub fn transform(&self, z: &Vector) -> Result<Vector> {
        self.check_len(z)?;
        let offset = match self.parametrization {
            Parametrization::Covariance => self.factor.mul_vec(z),
            Parametrization::Precision => self.factor.solve(z, Transpose::Yes)?,
        };
        Ok(offset + self.mu())
    }

    /// Inverse of [`transform`](Self::transform).
    pub fn standardize(&self, theta: &Vector) -> Result<Vector> {
        self.check_len(theta)?;
        let delta = theta - self.mu();
        match self.parametrization {
            Parametrization::Covariance => self.factor.solve(&delta, Transpose::No),
            Parametrization::Precision => Ok(self.factor.transpose_mul_vec(&delta)),
        }
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<DrawContext> {
        let z = Vector::from_fn(self.dim(), |_, _| rng.sample(StandardNormal));
        self.draw_from_z(z)
    }

    pub fn draw_from_z(&self, z: Vector) -> Result<DrawContext> {
        let theta = self.transform(&z)?;
        Ok(DrawContext { z, theta })
    }

    /// Context for an arbitrary point, recovering `z` from `theta`.
    pub fn context_at(&self, theta: Vector) -> Result<DrawContext> {
        let z = self.standardize(&theta)?;
        Ok(DrawContext { z, theta })
    }

    fn log_norm(&self) -> f64 {
        let half_log_2pi = 0.5 * self.dim() as f64 * (2.0 * PI).ln();
        match self.parametrization {
            Parametrization::Covariance => -half_log_2pi - self.factor.log_abs_det(),
            Parametrization::Precision => -half_log_2pi + self.factor.log_abs_det(),
        }
    }

    /// `log N(theta | mu, Sigma)`.
    pub fn log_q(&self, theta: &Vector) -> Result<f64> {
        let z = self.standardize(theta)?;
        Ok(self.log_norm() - 0.5 * z.norm_squared())
    }

    /// `Sigma^{-1} (theta - mu)` for the draw, which equals `C^{-T} z` or `T z`.
    pub fn precision_times_offset(&self, ctx: &DrawContext) -> Result<Vector> {
        match self.parametrization {
            Parametrization::Covariance => self.factor.solve(&ctx.z, Transpose::Yes),
            Parametrization::Precision => Ok(self.factor.mul_vec(&ctx.z)),
        }
    }

    /// `Sigma v`, without forming `Sigma`.
    pub fn covariance_times(&self, v: &Vector) -> Result<Vector> {
        self.check_len(v)?;
        match self.parametrization {
            Parametrization::Covariance => {
                Ok(self.factor.mul_vec(&self.factor.transpose_mul_vec(v)))
            }
            Parametrization::Precision => {
                let w = self.factor.solve(v, Transpose::No)?;
                self.factor.solve(&w, Transpose::Yes)
            }
        }
    }

    /// `h(theta) = l(theta) - log q(theta)` with gradient and optional Hessian.
    ///
    /// `ctx` must come from this state: the entropy terms are evaluated from `ctx.z`.
    pub fn h_derivs<M: LogJoint + ?Sized>(
        &self,
        model: &M,
        ctx: &DrawContext,
        want_hessian: bool,
    ) -> Result<ModelDerivatives> {
        self.check_len(&ctx.theta)?;
        self.check_len(&ctx.z)?;
        if model.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                context: "model dimension",
                expected: self.dim(),
                found: model.dim(),
            });
        }
        let ell = model.eval(&ctx.theta, want_hessian)?;
        let log_q = self.log_norm() - 0.5 * ctx.z.norm_squared();
        let grad = ell.grad + self.precision_times_offset(ctx)?;
        let hess = match ell.hess {
            Some(h) if want_hessian => Some(h + self.precision()?),
            _ => None,
        };
        Ok(ModelDerivatives {
            value: ell.value - log_q,
            grad,
            hess,
        })
    }

    fn check_len(&self, v: &Vector) -> Result<()> {
        if v.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                context: "variational parameter vector",
                expected: self.dim(),
                found: v.len(),
            });
        }
        Ok(())
    }
}

fn symmetrize(m: &Matrix) -> Matrix {
    (m + m.transpose()) * 0.5
}
