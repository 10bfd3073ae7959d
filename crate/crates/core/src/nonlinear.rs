//! Negative exponential growth curves `y = α + δ·exp(λ·t)`.
//!
//! Each subject is fitted by Levenberg-Marquardt least squares. The
//! population summary is two-stage: fixed effects are the mean of the
//! converged subject estimates and the deviates are what is left over.
//! This is not a full nonlinear mixed model; subject estimates are not
//! shrunk toward the population.

use std::fmt;

use nalgebra::{Matrix3, Vector3};
use serde::Serialize;
use thiserror::Error;

use crate::dataframe::{DataError, Dataset};
use crate::report::{sig, table};

#[derive(Debug, Error)]
pub enum NonlinearError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("need at least 4 points to fit 3 parameters, found {0}")]
    TooFewPoints(usize),
    #[error("times are all equal; the rate is not identifiable")]
    ConstantTime,
    #[error("times and responses differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("non-finite value in the data")]
    NonFinite,
    #[error("only {0} subjects converged; need at least 2 for a population summary")]
    TooFewConverged(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NegExpParams {
    /// Asymptote.
    pub alpha: f64,
    /// Change from the asymptote at t = 0 (intercept is `alpha + delta`).
    pub delta: f64,
    /// Rate, negative for approach to the asymptote.
    pub lambda: f64,
}

impl NegExpParams {
    pub fn new(alpha: f64, delta: f64, lambda: f64) -> Self {
        Self {
            alpha,
            delta,
            lambda,
        }
    }

    fn to_vec(self) -> Vector3<f64> {
        Vector3::new(self.alpha, self.delta, self.lambda)
    }

    fn from_vec(v: &Vector3<f64>) -> Self {
        Self::new(v[0], v[1], v[2])
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.alpha, self.delta, self.lambda]
    }
}

impl Default for NegExpParams {
    fn default() -> Self {
        Self::new(80.0, -70.0, -1.0)
    }
}

pub fn negexp_predict(p: &NegExpParams, t: f64) -> f64 {
    p.alpha + p.delta * (p.lambda * t).exp()
}

/// Gradient of the prediction with respect to `(α, δ, λ)`.
pub fn negexp_jacobian(p: &NegExpParams, t: f64) -> [f64; 3] {
    let e = (p.lambda * t).exp();
    [1.0, e, p.delta * t * e]
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubjectFit {
    pub params: NegExpParams,
    pub sse: f64,
    pub n: usize,
    pub iterations: usize,
    pub converged: bool,
    /// The exponential part vanished or the Jacobian lost rank, so δ and λ
    /// are not identified.
    pub degenerate: bool,
}

const MAX_ITER: usize = 500;

fn sse_at(p: &NegExpParams, times: &[f64], y: &[f64]) -> f64 {
    times
        .iter()
        .zip(y)
        .map(|(&t, &v)| (v - negexp_predict(p, t)).powi(2))
        .sum()
}

fn normal_equations(p: &NegExpParams, times: &[f64], y: &[f64]) -> (Matrix3<f64>, Vector3<f64>) {
    let mut jtj = Matrix3::zeros();
    let mut jtr = Vector3::zeros();
    for (&t, &v) in times.iter().zip(y) {
        let j = Vector3::from(negexp_jacobian(p, t));
        let r = v - negexp_predict(p, t);
        jtj += j * j.transpose();
        jtr += j * r;
    }
    (jtj, jtr)
}

/// Least-squares fit of one subject's curve.
pub fn fit_negexp_subject(
    times: &[f64],
    y: &[f64],
    start: NegExpParams,
) -> Result<SubjectFit, NonlinearError> {
    if times.len() != y.len() {
        return Err(NonlinearError::LengthMismatch(times.len(), y.len()));
    }
    let n = y.len();
    if n < 4 {
        return Err(NonlinearError::TooFewPoints(n));
    }
    if times.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(NonlinearError::NonFinite);
    }
    if times.iter().all(|&t| t == times[0]) {
        return Err(NonlinearError::ConstantTime);
    }

    let mut p = start;
    let mut sse = sse_at(&p, times, y);
    let mut mu = 1e-3;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < MAX_ITER {
        iterations += 1;
        let (jtj, jtr) = normal_equations(&p, times, y);
        if jtr.norm() < 1e-8 {
            converged = true;
            break;
        }
        let mut stepped = false;
        while mu <= 1e10 {
            let mut a = jtj;
            for i in 0..3 {
                a[(i, i)] += mu * jtj[(i, i)].max(1e-12);
            }
            let Some(step) = a.cholesky().map(|c| c.solve(&jtr)) else {
                mu *= 10.0;
                continue;
            };
            let cand = NegExpParams::from_vec(&(p.to_vec() + step));
            let cand_sse = sse_at(&cand, times, y);
            if cand_sse.is_finite() && cand_sse <= sse {
                let rel = (sse - cand_sse) / sse.max(f64::MIN_POSITIVE);
                p = cand;
                sse = cand_sse;
                mu = (mu * 0.1).max(1e-12);
                stepped = true;
                if rel < 1e-10 {
                    converged = true;
                }
                break;
            }
            mu *= 10.0;
        }
        if !stepped || converged {
            break;
        }
    }

    let (jtj, _) = normal_equations(&p, times, y);
    let curve = times
        .iter()
        .map(|&t| (p.delta * (p.lambda * t).exp()).abs())
        .fold(0.0, f64::max);
    let eig = jtj.symmetric_eigen().eigenvalues;
    let (lo, hi) = eig
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(a, b), &v| (a.min(v), b.max(v)));
    let degenerate = curve < 1e-8 * p.alpha.abs().max(1.0) || lo <= 1e-14 * hi || !p.lambda.is_finite();
    Ok(SubjectFit {
        params: p,
        sse,
        n,
        iterations,
        converged: converged && !degenerate,
        degenerate,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubjectEstimate {
    pub subject: String,
    pub params: NegExpParams,
    /// `params - fixed`, stored so that `fixed + deviate` reproduces
    /// `params` exactly.
    pub deviate: [f64; 3],
    pub sse: f64,
    pub n: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExcludedSubject {
    pub subject: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NegExpPopulationFit {
    pub method: &'static str,
    pub fixed: NegExpParams,
    /// Standard error of each fixed effect (SD of estimates / sqrt(m)).
    pub fixed_se: [f64; 3],
    pub subjects: Vec<SubjectEstimate>,
    pub excluded: Vec<ExcludedSubject>,
    pub deviate_cov: [[f64; 3]; 3],
}

/// A value `d` with `fixed + d == target` in floating point.
fn exact_deviate(target: f64, fixed: f64) -> f64 {
    let d = target - fixed;
    if fixed + d == target {
        return d;
    }
    let bits = d.to_bits() as i64;
    for k in 1..64i64 {
        for s in [k, -k] {
            let c = f64::from_bits((bits + s) as u64);
            if fixed + c == target {
                return c;
            }
        }
    }
    d
}

/// Two-stage population fit over subjects.
pub fn fit_negexp_population(
    ds: &Dataset,
    dv: &str,
    time: &str,
    subject: &str,
    start: NegExpParams,
) -> Result<NegExpPopulationFit, NonlinearError> {
    let ycol = ds.column(dv)?;
    let tcol = ds.column(time)?;
    let scol = ds.factor(subject)?;
    let levels = scol.levels().unwrap_or(&[]).to_vec();
    let mut groups: Vec<(Vec<f64>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); levels.len()];
    for r in 0..ds.n_rows() {
        if let (Some(s), Some(t), Some(v)) = (scol.code(r), tcol.value(r), ycol.value(r)) {
            groups[s].0.push(t);
            groups[s].1.push(v);
        }
    }
    let mut fits = Vec::new();
    let mut excluded = Vec::new();
    for (name, (t, y)) in levels.iter().zip(&groups) {
        if t.is_empty() {
            continue;
        }
        match fit_negexp_subject(t, y, start) {
            Ok(f) if f.converged => fits.push((name.clone(), f)),
            Ok(f) => excluded.push(ExcludedSubject {
                subject: name.clone(),
                reason: if f.degenerate {
                    "degenerate fit: no exponential component".into()
                } else {
                    format!("did not converge in {} iterations", f.iterations)
                },
            }),
            Err(e) => excluded.push(ExcludedSubject {
                subject: name.clone(),
                reason: e.to_string(),
            }),
        }
    }
    let m = fits.len();
    if m < 2 {
        return Err(NonlinearError::TooFewConverged(m));
    }
    let mut mean = [0.0; 3];
    for (_, f) in &fits {
        for (acc, v) in mean.iter_mut().zip(f.params.as_array()) {
            *acc += v;
        }
    }
    for v in mean.iter_mut() {
        *v /= m as f64;
    }
    let subjects: Vec<SubjectEstimate> = fits
        .into_iter()
        .map(|(name, f)| {
            let a = f.params.as_array();
            SubjectEstimate {
                subject: name,
                params: f.params,
                deviate: [0, 1, 2].map(|i| exact_deviate(a[i], mean[i])),
                sse: f.sse,
                n: f.n,
                converged: f.converged,
            }
        })
        .collect();
    let mut cov = [[0.0; 3]; 3];
    for s in &subjects {
        let d = [0, 1, 2].map(|i| s.params.as_array()[i] - mean[i]);
        for i in 0..3 {
            for j in 0..3 {
                cov[i][j] += d[i] * d[j];
            }
        }
    }
    for row in cov.iter_mut() {
        for v in row.iter_mut() {
            *v /= (m - 1) as f64;
        }
    }
    let fixed_se = [0, 1, 2].map(|i| (cov[i][i] / m as f64).sqrt());
    Ok(NegExpPopulationFit {
        method: "two-stage",
        fixed: NegExpParams::new(mean[0], mean[1], mean[2]),
        fixed_se,
        subjects,
        excluded,
        deviate_cov: cov,
    })
}

impl fmt::Display for NegExpPopulationFit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Negative exponential model: y = alpha + delta * exp(lambda * t)")?;
        writeln!(
            f,
            "Two-stage estimate: each subject fitted separately, fixed effects are the mean \
             of {} converged subjects (no shrinkage).",
            self.subjects.len()
        )?;
        writeln!(f)?;
        writeln!(f, "Fixed effects:")?;
        let names = ["alpha", "delta", "lambda"];
        let fx = self.fixed.as_array();
        let rows: Vec<Vec<String>> = (0..3)
            .map(|i| vec![names[i].to_string(), sig(fx[i], 6), sig(self.fixed_se[i], 6)])
            .collect();
        f.write_str(&table(&["Parameter", "Estimate", "Std.Error"], &rows))?;
        writeln!(f)?;
        writeln!(f, "Deviate covariance:")?;
        let rows: Vec<Vec<String>> = (0..3)
            .map(|i| {
                let mut r = vec![names[i].to_string()];
                r.extend((0..3).map(|j| sig(self.deviate_cov[i][j], 6)));
                r
            })
            .collect();
        f.write_str(&table(&["", "alpha", "delta", "lambda"], &rows))?;
        writeln!(f)?;
        writeln!(f, "Subjects:")?;
        let rows: Vec<Vec<String>> = self
            .subjects
            .iter()
            .map(|s| {
                let p = s.params.as_array();
                let mut r = vec![s.subject.clone()];
                r.extend(p.iter().map(|v| sig(*v, 6)));
                r.extend(s.deviate.iter().map(|v| sig(*v, 6)));
                r.push(sig(s.sse, 6));
                r
            })
            .collect();
        f.write_str(&table(
            &["Subject", "alpha", "delta", "lambda", "g_alpha", "g_delta", "g_lambda", "SSE"],
            &rows,
        ))?;
        for e in &self.excluded {
            writeln!(f, "excluded {}: {}", e.subject, e.reason)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prediction_limits() {
        let p = NegExpParams::default();
        assert_eq!(negexp_predict(&p, 0.0), 10.0);
        assert!((negexp_predict(&p, 40.0) - 80.0).abs() < 1e-6);
    }

    #[test]
    fn recovers_noiseless_curve() {
        let truth = NegExpParams::new(70.0, -60.0, -0.5);
        let t: Vec<f64> = (0..12).map(|i| i as f64).collect();
        let y: Vec<f64> = t.iter().map(|&x| negexp_predict(&truth, x)).collect();
        let fit = fit_negexp_subject(&t, &y, NegExpParams::default()).unwrap();
        assert!(fit.converged);
        for (a, b) in fit.params.as_array().iter().zip(truth.as_array()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn flat_line_is_degenerate() {
        let t: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let y = vec![42.0; 10];
        let fit = fit_negexp_subject(&t, &y, NegExpParams::default()).unwrap();
        assert!(!fit.converged);
        assert!(fit.degenerate);
        assert!((fit.params.alpha + fit.params.delta - 42.0).abs() < 1e-4);
    }

    #[test]
    fn too_few_points() {
        assert!(matches!(
            fit_negexp_subject(&[0.0, 1.0, 2.0], &[1.0, 2.0, 3.0], NegExpParams::default()),
            Err(NonlinearError::TooFewPoints(3))
        ));
    }
}
