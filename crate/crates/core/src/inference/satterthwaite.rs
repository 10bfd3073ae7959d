//! Wald F-tests with Satterthwaite denominator degrees of freedom.
//!
//! The variance parameters are `φ = (θ, log σ)`. Their covariance is
//! `2 H⁻¹`, with `H` the finite-difference Hessian of the (restricted)
//! deviance at the estimate. For a contrast `l`, `ν = 2 (lᵀVl)² / (gᵀ A g)`
//! where `g` is the gradient of `lᵀ V(φ) l`.

use nalgebra::{DMatrix, DVector};

use super::{dist, AnovaSource, AnovaTable, FTestRow};
use crate::estimate::optim::{fd_derivatives, fd_step};
use crate::estimate::{Evaluator, LmmFit};

struct VarianceJacobian {
    /// Covariance of φ, `None` when the Hessian is not positive definite.
    cov_phi: Option<DMatrix<f64>>,
    /// dV/dφ_i
    jac: Vec<DMatrix<f64>>,
    vcov: DMatrix<f64>,
}

fn variance_jacobian(fit: &LmmFit) -> VarianceJacobian {
    let mats = &*fit.mats;
    let method = fit.method;
    let mut ev = Evaluator::new(mats);
    let nt = fit.theta.len();
    let mut phi = fit.theta.clone();
    phi.push(0.5 * fit.sigma2.ln());

    let dev = |ev: &mut Evaluator, x: &[f64]| -> f64 {
        match ev.solve(&x[..nt]) {
            Ok(sol) => ev.deviance_at(&sol, method, (2.0 * x[nt]).exp()),
            Err(_) => f64::INFINITY,
        }
    };
    let f0 = dev(&mut ev, &phi);
    let lower = vec![f64::NEG_INFINITY; phi.len()];
    let (_, hess) = {
        let mut f = |x: &[f64]| dev(&mut ev, x);
        fd_derivatives(&mut f, &phi, f0, &lower)
    };
    let cov_phi = if hess.iter().all(|v| v.is_finite()) {
        hess.clone()
            .cholesky()
            .map(|c| c.inverse() * 2.0)
    } else {
        None
    };

    let sigma2 = fit.sigma2;
    let vcov_at = |ev: &mut Evaluator, theta: &[f64]| -> Option<DMatrix<f64>> {
        ev.solve(theta).ok().map(|s| s.rx_inv * sigma2)
    };
    let mut jac = Vec::with_capacity(nt + 1);
    for i in 0..nt {
        let h = fd_step(fit.theta[i]);
        let mut tp = fit.theta.clone();
        tp[i] += h;
        let mut tm = fit.theta.clone();
        tm[i] -= h;
        let d = match (vcov_at(&mut ev, &tp), vcov_at(&mut ev, &tm)) {
            (Some(a), Some(b)) => (a - b) / (2.0 * h),
            _ => DMatrix::from_element(mats.p(), mats.p(), f64::NAN),
        };
        jac.push(d);
    }
    jac.push(&fit.vcov_beta * 2.0);
    VarianceJacobian {
        cov_phi,
        jac,
        vcov: fit.vcov_beta.clone(),
    }
}

fn contrast_df(vj: &VarianceJacobian, l: &DVector<f64>) -> Option<f64> {
    let a = vj.cov_phi.as_ref()?;
    let var = (l.transpose() * &vj.vcov * l)[(0, 0)];
    let g = DVector::from_iterator(
        vj.jac.len(),
        vj.jac.iter().map(|j| (l.transpose() * j * l)[(0, 0)]),
    );
    let denom = (g.transpose() * a * &g)[(0, 0)];
    let nu = 2.0 * var * var / denom;
    if nu.is_finite() && nu > 0.0 {
        Some(nu)
    } else if denom <= 0.0 && var > 0.0 {
        Some(f64::INFINITY)
    } else {
        None
    }
}

/// Combine per-contrast df into one denominator df for a multi-df test.
pub(crate) fn aggregate_df(nu: &[f64]) -> f64 {
    match nu.len() {
        0 => f64::NAN,
        1 => nu[0],
        _ => {
            let (lo, hi) = nu
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
            if hi - lo < 1e-8 {
                return nu.iter().sum::<f64>() / nu.len() as f64;
            }
            if nu.iter().any(|&v| v <= 2.0) {
                return 2.0;
            }
            let e: f64 = nu.iter().map(|&v| v / (v - 2.0)).sum();
            2.0 * e / (e - nu.len() as f64)
        }
    }
}

/// Result of testing `L β = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastTest {
    pub f_value: f64,
    pub df1: usize,
    pub df2: f64,
    pub p_value: f64,
    pub fallback: bool,
}

fn test_with(fit: &LmmFit, vj: &VarianceJacobian, l: &DMatrix<f64>) -> ContrastTest {
    let lvl = l * &vj.vcov * l.transpose();
    let eig = lvl.clone().symmetric_eigen();
    let max_ev = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
    let lb = l * &fit.beta;
    let mut f_sum = 0.0;
    let mut nus = Vec::new();
    let mut fallback = false;
    let mut q = 0;
    for (m, &d) in eig.eigenvalues.iter().enumerate() {
        if d <= 1e-10 * max_ev || d <= 0.0 {
            continue;
        }
        q += 1;
        let pm = eig.eigenvectors.column(m);
        let contrast = l.transpose() * pm;
        let est = pm.dot(&lb);
        f_sum += est * est / d;
        match contrast_df(vj, &contrast) {
            Some(nu) => nus.push(nu),
            None => fallback = true,
        }
    }
    let f_value = if q == 0 { f64::NAN } else { f_sum / q as f64 };
    let df2 = if fallback || nus.is_empty() {
        fallback = true;
        (fit.mats.n() - fit.mats.p()) as f64
    } else {
        aggregate_df(&nus)
    };
    ContrastTest {
        f_value,
        df1: q,
        df2,
        p_value: dist::f_sf(f_value, q as f64, df2),
        fallback,
    }
}

/// Wald F-test of `L β = 0` with Satterthwaite df.
pub fn contrast_test(fit: &LmmFit, l: &DMatrix<f64>) -> ContrastTest {
    let vj = variance_jacobian(fit);
    test_with(fit, &vj, l)
}

/// Type III table, one row per non-intercept fixed term.
pub fn anova_satterthwaite(fit: &LmmFit) -> AnovaTable {
    let hyps = &fit.mats.term_hypotheses;
    let mut rows = Vec::new();
    let mut any_fallback = false;
    if !hyps.is_empty() {
        let vj = variance_jacobian(fit);
        for h in hyps {
            let t = test_with(fit, &vj, &h.l);
            any_fallback |= t.fallback;
            rows.push(FTestRow {
                term: h.label.clone(),
                f_value: t.f_value,
                df1: t.df1,
                df2: t.df2,
                p_value: t.p_value,
            });
        }
    }
    AnovaTable {
        source: AnovaSource::MixedSatterthwaite,
        rows,
        hessian_fallback: any_fallback,
        singular_fit: fit.singular.singular,
    }
}
