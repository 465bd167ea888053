use gaussvi::diagnostics::{
    check_function_identity, check_identity, check_identity_with, compare_variance, elbo_estimate,
    identity_fixture, run_check_suite, variance_fixture, CheckLevel, EstimatorKind, Fault,
    Identity,
};
use gaussvi::trimat::Transpose;
use gaussvi::{
    GaussianVariational, LogJoint, Matrix, ModelDerivatives, Parametrization, QuadraticModel,
    Result, Vector,
};
use proptest::prelude::*;

/// `f(theta) = a^T theta`.
struct Linear(Vector);

impl LogJoint for Linear {
    fn dim(&self) -> usize {
        self.0.len()
    }
    fn eval(&self, theta: &Vector, want_hessian: bool) -> Result<ModelDerivatives> {
        let d = self.dim();
        Ok(ModelDerivatives {
            value: self.0.dot(theta),
            grad: self.0.clone(),
            hess: want_hessian.then(|| Matrix::zeros(d, d)),
        })
    }
}

/// `f(theta) = theta^T A theta / 2`.
struct HalfQuadratic(Matrix);

impl LogJoint for HalfQuadratic {
    fn dim(&self) -> usize {
        self.0.nrows()
    }
    fn eval(&self, theta: &Vector, want_hessian: bool) -> Result<ModelDerivatives> {
        let at = &self.0 * theta;
        Ok(ModelDerivatives {
            value: 0.5 * theta.dot(&at),
            grad: at,
            hess: want_hessian.then(|| self.0.clone()),
        })
    }
}

fn some_state(p: Parametrization) -> GaussianVariational {
    let sigma = Matrix::from_row_slice(3, 3, &[1.0, 0.3, -0.2, 0.3, 0.8, 0.1, -0.2, 0.1, 0.5]);
    GaussianVariational::from_moments(Vector::from_vec(vec![0.5, -1.0, 0.2]), &sigma, p).unwrap()
}

#[test]
fn bonnet_stein_linear_function() {
    let a = Vector::from_vec(vec![1.5, -2.0, 0.7]);
    let state = some_state(Parametrization::Covariance);
    let r = check_function_identity(
        Identity::BonnetStein,
        &state,
        &Linear(a.clone()),
        100_000,
        1,
    )
    .unwrap();
    for i in 0..3 {
        assert_eq!(r.rhs_mean[i][0], a[i]);
    }
    assert!(r.max_gap_in_se <= 4.0, "{r:?}");
    // the gap itself shrinks like n^{-1/2}
    assert!(r.max_abs_gap < 4.0 * 3.0 * a.amax() / (100_000f64).sqrt());
}

#[test]
fn price_quadratic_function() {
    let a = Matrix::from_row_slice(3, 3, &[2.0, -1.0, 0.5, -1.0, 3.0, 0.0, 0.5, 0.0, 1.0]);
    let state = some_state(Parametrization::Precision);
    let r = check_function_identity(
        Identity::Price,
        &state,
        &HalfQuadratic(a.clone()),
        100_000,
        2,
    )
    .unwrap();
    for i in 0..3 {
        for j in 0..3 {
            assert_eq!(r.rhs_mean[i][j], 0.5 * a[(i, j)]);
        }
    }
    assert!(r.max_gap_in_se <= 4.0, "{r:?}");
}

#[test]
fn factor_identity_on_logistic_model() {
    let (model, state) = identity_fixture(3, 31).unwrap();
    let r = check_identity(Identity::Thm1a, &state, &model, 100_000, 3).unwrap();
    assert!(r.max_gap_in_se <= 4.0, "{r:?}");
    assert_eq!(r.lhs_mean.len(), 3);
    assert_eq!(r.lhs_mean[0].len(), 3);
}

#[test]
fn precision_identity_on_logistic_model() {
    let (model, state) = identity_fixture(3, 32).unwrap();
    let r = check_identity(Identity::Thm1b, &state, &model, 100_000, 4).unwrap();
    assert!(r.max_gap_in_se <= 4.0, "{r:?}");
}

#[test]
fn flipped_sign_is_caught() {
    let (model, state) = identity_fixture(3, 33).unwrap();
    for which in Identity::ALL {
        let r = check_identity_with(
            which,
            &state,
            100_000,
            5,
            Fault {
                flip_lhs_sign: true,
            },
            |s, ctx, hess| s.h_derivs(&model, ctx, hess),
        )
        .unwrap();
        assert!(r.max_gap_in_se > 5.0, "{which:?}: {r:?}");
    }
    let report = run_check_suite(
        CheckLevel::Quick,
        0,
        Fault {
            flip_lhs_sign: true,
        },
    )
    .unwrap();
    assert!(!report.passed());
}

#[test]
fn quick_suite_passes() {
    let report = run_check_suite(CheckLevel::Quick, 0, Fault::default()).unwrap();
    assert!(report.passed(), "{:?}", report.failures);
    assert_eq!(report.identities.len(), 5);
    assert_eq!(report.variance.len(), 4);
}

#[test]
fn full_suite_passes_on_all_five_identities() {
    let report = run_check_suite(CheckLevel::Full, 7, Fault::default()).unwrap();
    assert!(report.passed(), "{:?}", report.failures);
    let names: Vec<_> = report
        .identities
        .iter()
        .map(|r| r.identity.name())
        .collect();
    assert_eq!(names, ["BONNET_STEIN", "PRICE", "LEMMA1", "THM1A", "THM1B"]);
    assert!(report
        .identities
        .iter()
        .all(|r| r.n_samples == 1_000_000 && r.lhs_mean.len() == 5));
}

/// `Var[(alpha^T z)(beta0 + beta^T z)]` for `z ~ N(0, I)`.
fn product_variance(alpha: &Vector, beta0: f64, beta: &Vector) -> f64 {
    beta0 * beta0 * alpha.norm_squared()
        + alpha.norm_squared() * beta.norm_squared()
        + alpha.dot(beta).powi(2)
}

/// Closed-form entry variances of the first-order estimate on a quadratic target,
/// where `grad h = c + B z` is affine in the standard draw.
fn first_order_theory(model: &QuadraticModel, state: &GaussianVariational) -> Matrix {
    let d = state.dim();
    let p = model.precision();
    let c = -(p * (state.mu() - model.theta_hat()));
    let mut out = Matrix::zeros(d, d);
    match state.parametrization() {
        Parametrization::Covariance => {
            // theta = mu + C z, grad h = c + (C^{-T} - P C) z; G1_ij = (grad h)_i z_j
            let cf = state.factor().as_matrix();
            let b = state
                .factor()
                .solve_matrix(&Matrix::identity(d, d), Transpose::Yes)
                .unwrap()
                - p * cf;
            for i in 0..d {
                for j in 0..=i {
                    let mut e = Vector::zeros(d);
                    e[j] = 1.0;
                    out[(i, j)] = product_variance(&e, c[i], &b.row(i).transpose());
                }
            }
        }
        Parametrization::Precision => {
            // theta = mu + T^{-T} z, grad h = c + (T - P T^{-T}) z; G2_ij = -(T^{-T} z)_i (T^{-1} grad h)_j
            let t = state.factor();
            let t_inv_t = t
                .solve_matrix(&Matrix::identity(d, d), Transpose::Yes)
                .unwrap();
            let b = t.as_matrix() - p * &t_inv_t;
            let c2 = t.solve(&c, Transpose::No).unwrap();
            let b2 = t.solve_matrix(&b, Transpose::No).unwrap();
            for i in 0..d {
                for j in 0..=i {
                    out[(i, j)] = product_variance(
                        &t_inv_t.row(i).transpose(),
                        c2[j],
                        &b2.row(j).transpose(),
                    );
                }
            }
        }
    }
    out
}

#[test]
fn first_order_variance_matches_theory_off_the_optimum() {
    for p in [Parametrization::Covariance, Parametrization::Precision] {
        let (model, _, offset) = variance_fixture(3, 12, p).unwrap();
        let theory = first_order_theory(&model, &offset);
        let reports = compare_variance(&offset, &model, 400_000, 8).unwrap();
        let measured = reports[0].entry_variances.as_matrix();
        for i in 0..3 {
            for j in 0..=i {
                let rel = (measured[(i, j)] - theory[(i, j)]).abs() / theory[(i, j)];
                assert!(
                    rel < 0.05,
                    "{p:?} ({i},{j}): {} vs {}",
                    measured[(i, j)],
                    theory[(i, j)]
                );
            }
        }
    }
}

#[test]
fn variance_at_optimum_and_offset() {
    for p in [Parametrization::Covariance, Parametrization::Precision] {
        let (model, optimum, offset) = variance_fixture(4, 3, p).unwrap();
        let at_opt = compare_variance(&optimum, &model, 2000, 1).unwrap();
        assert!(matches!(
            at_opt[0].estimator,
            EstimatorKind::G1 | EstimatorKind::G2
        ));
        assert!(at_opt[1].max_entry_variance <= 1e-24);
        // grad h vanishes identically at the exact fit, leaving only rounding
        assert!(at_opt[0].max_entry_variance > 0.0 && at_opt[0].max_entry_variance < 1e-20);

        let off = compare_variance(&offset, &model, 2000, 1).unwrap();
        assert!(off[0].max_entry_variance > 1e-3);
        // the Hessian of h is constant for a quadratic target, so F never varies
        assert!(off[1].max_entry_variance <= 1e-24);
        for r in off.iter().chain(&at_opt) {
            assert!(r
                .entry_variances
                .as_matrix()
                .iter()
                .all(|v| v.is_finite() && *v >= 0.0));
        }
    }
}

#[test]
fn elbo_of_matched_gaussian_is_log_evidence() {
    let (model, optimum, offset) = variance_fixture(3, 21, Parametrization::Covariance).unwrap();
    let evidence = model.log_evidence().unwrap();
    let matched = elbo_estimate(&optimum, &model, 10_000, 1).unwrap();
    assert!(
        (matched.mean - evidence).abs() <= 4.0 * matched.std_error + 1e-10,
        "{matched:?} vs {evidence}"
    );
    let mismatched = elbo_estimate(&offset, &model, 10_000, 1).unwrap();
    assert!(mismatched.mean <= matched.mean + 4.0 * (mismatched.std_error + matched.std_error));
    assert!(mismatched.mean < evidence);
}

#[test]
fn standard_error_shrinks_with_root_n() {
    let (model, _, offset) = variance_fixture(3, 5, Parametrization::Precision).unwrap();
    for seed in 0..5 {
        let small = elbo_estimate(&offset, &model, 20_000, seed).unwrap();
        let large = elbo_estimate(&offset, &model, 80_000, seed + 100).unwrap();
        let ratio = small.std_error / large.std_error;
        assert!((ratio - 2.0).abs() <= 0.4, "seed {seed}: ratio {ratio}");
    }
}

#[test]
fn reports_serialize() {
    let (model, state) = identity_fixture(2, 1).unwrap();
    let r = check_identity(Identity::Lemma1, &state, &model, 1000, 1).unwrap();
    let json = serde_json::to_string(&r).unwrap();
    assert!(json.contains("\"LEMMA1\""));
    let back: gaussvi::diagnostics::IdentityReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back, r);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn identities_hold_on_random_logistic_targets(d in 1usize..=5, seed in 0u64..1_000_000) {
        let (model, state) = identity_fixture(d, seed).unwrap();
        for which in Identity::ALL {
            let r = check_identity(which, &state, &model, 200_000, seed).unwrap();
            prop_assert!(r.max_gap_in_se <= 5.0, "{:?}", r);
        }
    }
}
