//! Single-draw stochastic gradient directions for `(mu, factor)`.
//!
//! First-order factor estimates use `grad h` only:
//!
//! * `G1 = grad h z^T`                          (covariance factor `C`)
//! * `G2 = -T^{-T} z grad h^T T^{-T}`           (precision factor `T`)
//!
//! Second-order estimates use `hess h` and have the same expectation:
//!
//! * `F1 = hess h C`
//! * `F2 = -T^{-T} T^{-1} hess h T^{-T}`
//!
//! Only the lower triangle of each is ever kept. Natural-gradient directions
//! rescale the masked Euclidean estimate `E` of a factor `L` as `L barbar(L^T E)`.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::models::{LogJoint, ModelDerivatives};
use crate::trimat::{barbar_unchecked, LowerTriangular, Matrix, Transpose, Vector};
use crate::variational::{DrawContext, GaussianVariational, Parametrization};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Order {
    /// Reparametrization-trick estimates from `grad h`.
    #[serde(rename = "1", alias = "first")]
    First,
    /// Stein's-lemma estimates from `hess h`.
    #[serde(rename = "2", alias = "second")]
    Second,
}

impl Order {
    pub fn number(self) -> u8 {
        match self {
            Order::First => 1,
            Order::Second => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Geometry {
    Euclidean,
    Natural,
}

/// Ascent directions for the mean and the factor from one draw.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientEstimate {
    pub mu_dir: Vector,
    pub factor_dir: LowerTriangular,
    pub order: Order,
    pub geometry: Geometry,
}

pub fn mean_dir_euclidean(gradh: &Vector) -> Vector {
    gradh.clone()
}

/// `Sigma grad h`: `C (C^T g)` or `T^{-T} (T^{-1} g)`.
pub fn mean_dir_natural(state: &GaussianVariational, gradh: &Vector) -> Result<Vector> {
    state.covariance_times(gradh)
}

fn masked_outer(a: &Vector, b: &Vector, scale: f64) -> LowerTriangular {
    assert_eq!(a.len(), b.len(), "outer product operands differ in length");
    let d = a.len();
    let mut m = Matrix::zeros(d, d);
    for j in 0..d {
        for i in j..d {
            m[(i, j)] = scale * a[i] * b[j];
        }
    }
    LowerTriangular::from_masked(m)
}

/// `bar(grad h z^T)`.
pub fn g1(gradh: &Vector, z: &Vector) -> LowerTriangular {
    masked_outer(gradh, z, 1.0)
}

/// `bar(hess h C)`.
pub fn f1(hessh: &Matrix, c: &LowerTriangular) -> LowerTriangular {
    assert_eq!(
        hessh.nrows(),
        c.dim(),
        "Hessian and factor differ in dimension"
    );
    LowerTriangular::from_masked((hessh * c.as_matrix()).lower_triangle())
}

/// `bar(-a b^T)` with `a = T^{-T} z` and `b = T^{-1} grad h`.
pub fn g2(gradh: &Vector, z: &Vector, t: &LowerTriangular) -> Result<LowerTriangular> {
    let a = t.solve(z, Transpose::Yes)?;
    let b = t.solve(gradh, Transpose::No)?;
    Ok(masked_outer(&a, &b, -1.0))
}

/// `bar(-T^{-T} T^{-1} hess h T^{-T})` using triangular solves only.
pub fn f2(hessh: &Matrix, t: &LowerTriangular) -> Result<LowerTriangular> {
    // hess T^{-T} = (T^{-1} hess^T)^T
    let right = t
        .solve_matrix(&hessh.transpose(), Transpose::No)?
        .transpose();
    let mid = t.solve_matrix(&right, Transpose::No)?;
    let full = t.solve_matrix(&mid, Transpose::Yes)?;
    Ok(LowerTriangular::from_masked((-full).lower_triangle()))
}

/// `L barbar(L^T E)` for a factor `L` and masked Euclidean direction `E`.
pub fn naturalize(factor: &LowerTriangular, euclid_bar: &LowerTriangular) -> LowerTriangular {
    assert_eq!(
        factor.dim(),
        euclid_bar.dim(),
        "factor and direction differ in dimension"
    );
    let inner = barbar_unchecked(&factor.as_matrix().tr_mul(euclid_bar.as_matrix()));
    LowerTriangular::from_masked((factor.as_matrix() * inner.as_matrix()).lower_triangle())
}

/// Assembles the estimate from derivatives of `h` already evaluated at `ctx`.
pub fn estimate_from(
    state: &GaussianVariational,
    ctx: &DrawContext,
    hd: &ModelDerivatives,
    order: Order,
    geometry: Geometry,
) -> Result<GradientEstimate> {
    let factor = state.factor();
    let euclid = match (state.parametrization(), order) {
        (Parametrization::Covariance, Order::First) => g1(&hd.grad, &ctx.z),
        (Parametrization::Covariance, Order::Second) => f1(hd.hessian()?, factor),
        (Parametrization::Precision, Order::First) => g2(&hd.grad, &ctx.z, factor)?,
        (Parametrization::Precision, Order::Second) => f2(hd.hessian()?, factor)?,
    };
    let (mu_dir, factor_dir) = match geometry {
        Geometry::Euclidean => (mean_dir_euclidean(&hd.grad), euclid),
        Geometry::Natural => (
            mean_dir_natural(state, &hd.grad)?,
            naturalize(factor, &euclid),
        ),
    };
    Ok(GradientEstimate {
        mu_dir,
        factor_dir,
        order,
        geometry,
    })
}

/// Evaluates `h` at the draw and returns the matching estimate.
pub fn estimate<M: LogJoint + ?Sized>(
    state: &GaussianVariational,
    model: &M,
    ctx: &DrawContext,
    order: Order,
    geometry: Geometry,
) -> Result<GradientEstimate> {
    let hd = state.h_derivs(model, ctx, order == Order::Second)?;
    estimate_from(state, ctx, &hd, order, geometry)
}
