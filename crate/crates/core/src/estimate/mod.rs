//! ML/REML estimation of linear mixed models through the profiled deviance.
//!
//! Covariance parameters `theta` are the entries of per-term lower-triangular
//! relative factors `λ_t` with `Σ_t = σ² λ_t λ_tᵀ`. For each theta the fixed
//! effects, the conditional modes and `σ²` are available in closed form, so
//! only theta is optimized numerically.

mod deviance;
pub mod optim;
pub mod sparse;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use deviance::{Evaluator, PlsFailure, PlsSolution};

use crate::dataframe::Dataset;
use crate::design::{DesignError, ModelMatrices};
use crate::report::{sig, table};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "ML")]
    Ml,
    #[serde(rename = "REML")]
    Reml,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Ml => "ML",
            Method::Reml => "REML",
        })
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ml" => Ok(Method::Ml),
            "reml" => Ok(Method::Reml),
            _ => Err(format!("unknown method `{s}` (expected ML or REML)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub method: Method,
    pub max_evals: usize,
    /// Relative tolerance on the deviance for the simplex stage.
    pub rel_tol: f64,
    pub singular_tol: f64,
    /// Additional starting points for theta, tried after the default one.
    pub extra_starts: Vec<Vec<f64>>,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            method: Method::Reml,
            max_evals: 10_000,
            rel_tol: 1e-9,
            singular_tol: 1e-4,
            extra_starts: Vec::new(),
        }
    }
}

impl FitOptions {
    pub fn ml() -> Self {
        FitOptions {
            method: Method::Ml,
            ..Self::default()
        }
    }

    pub fn reml() -> Self {
        Self::default()
    }
}

#[derive(Debug, Error)]
pub enum FitError {
    #[error(
        "model is over-specified: term {term} has {n_effects} random effects for {n_obs} \
         observations; the random-effects parameters and the residual variance are \
         probably unidentifiable"
    )]
    OverSpecified {
        term: String,
        n_effects: usize,
        n_obs: usize,
    },
    #[error("{n} observations are too few for {p} fixed effects")]
    TooFewObservations { n: usize, p: usize },
    #[error("theta has length {got}, the model needs {expected}")]
    ThetaLength { expected: usize, got: usize },
    #[error("penalized system is not positive definite ({0})")]
    Numerical(String),
    #[error("optimizer did not converge after {evals} deviance evaluations")]
    NotConverged { evals: usize, best: Box<LmmFit> },
}

/// Estimated covariance of one random-effects term.
#[derive(Debug, Clone, PartialEq)]
pub struct TermCovariance {
    pub group: String,
    pub names: Vec<String>,
    pub cov: DMatrix<f64>,
    pub correlated: bool,
}

impl TermCovariance {
    pub fn variances(&self) -> Vec<f64> {
        self.cov.diagonal().iter().copied().collect()
    }

    pub fn sds(&self) -> Vec<f64> {
        self.variances().iter().map(|v| v.max(0.0).sqrt()).collect()
    }

    /// Correlation matrix; entries involving a zero variance are NaN.
    pub fn corr(&self) -> DMatrix<f64> {
        let sd = self.sds();
        let k = sd.len();
        DMatrix::from_fn(k, k, |i, j| {
            if i == j {
                1.0
            } else if sd[i] > 0.0 && sd[j] > 0.0 {
                self.cov[(i, j)] / (sd[i] * sd[j])
            } else {
                f64::NAN
            }
        })
    }
}

/// Conditional modes of one term, one row per grouping level.
#[derive(Debug, Clone, PartialEq)]
pub struct RanefTable {
    pub group: String,
    pub columns: Vec<String>,
    pub levels: Vec<String>,
    pub values: DMatrix<f64>,
}

impl RanefTable {
    pub fn get(&self, level: &str, column: &str) -> Option<f64> {
        let r = self.levels.iter().position(|l| l == level)?;
        let c = self.columns.iter().position(|l| l == column)?;
        Some(self.values[(r, c)])
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct SingularReport {
    pub singular: bool,
    /// (grouping, component) pairs; correlations appear as `a,b`.
    pub components: Vec<(String, String)>,
}

#[derive(Debug, Clone)]
pub struct LmmFit {
    pub method: Method,
    pub beta: DVector<f64>,
    pub beta_names: Vec<String>,
    /// Covariance of the fixed-effect estimates.
    pub vcov_beta: DMatrix<f64>,
    pub sigma2: f64,
    pub theta: Vec<f64>,
    pub cov_terms: Vec<TermCovariance>,
    pub ranef: Vec<RanefTable>,
    /// Spherical random effects.
    pub u: DVector<f64>,
    /// Random effects `Λ u` in block order.
    pub b: DVector<f64>,
    pub fitted: DVector<f64>,
    pub residuals: DVector<f64>,
    pub deviance: f64,
    pub converged: bool,
    pub evals: usize,
    pub singular: SingularReport,
    pub singular_tol: f64,
    pub mats: Arc<ModelMatrices>,
}

/// Profiled deviance (−2 log-likelihood, restricted for REML) at `theta`.
pub fn profiled_deviance(
    mats: &ModelMatrices,
    theta: &[f64],
    method: Method,
) -> Result<f64, FitError> {
    check_theta(mats, theta)?;
    let mut ev = Evaluator::new(mats);
    let sol = ev.solve(theta).map_err(|e| numerical(mats, &ev, e))?;
    Ok(ev.profiled(&sol, method))
}

fn check_theta(mats: &ModelMatrices, theta: &[f64]) -> Result<(), FitError> {
    if theta.len() != mats.n_theta() {
        return Err(FitError::ThetaLength {
            expected: mats.n_theta(),
            got: theta.len(),
        });
    }
    Ok(())
}

fn numerical(mats: &ModelMatrices, ev: &Evaluator, e: PlsFailure) -> FitError {
    match e {
        PlsFailure::FixedBlock => FitError::Numerical("fixed-effects block".into()),
        PlsFailure::RandomBlock { column } => {
            let term = ev
                .block_offset()
                .iter()
                .enumerate()
                .filter(|(_, &o)| o <= column)
                .max_by_key(|(_, &o)| o)
                .map(|(b, _)| mats.z_blocks[b].term_label())
                .unwrap_or_default();
            FitError::Numerical(format!("term {term}"))
        }
    }
}

/// Refuse terms whose coefficient count reaches the number of observations.
pub fn check_identifiable(mats: &ModelMatrices) -> Result<(), FitError> {
    let n = mats.n();
    for b in &mats.z_blocks {
        if b.n_effects() >= n {
            return Err(FitError::OverSpecified {
                term: b.term_label(),
                n_effects: b.n_effects(),
                n_obs: n,
            });
        }
    }
    Ok(())
}

/// Fit by minimizing the profiled deviance over theta.
pub fn fit_lmm(mats: &ModelMatrices, opts: &FitOptions) -> Result<LmmFit, FitError> {
    check_identifiable(mats)?;
    let n = mats.n();
    let p = mats.p();
    if n <= p {
        return Err(FitError::TooFewObservations { n, p });
    }
    let lower = mats.theta_lower();
    let mut ev = Evaluator::new(mats);
    let method = opts.method;

    let default_start: Vec<f64> = lower
        .iter()
        .map(|&lo| if lo == 0.0 { 0.5 } else { 0.0 })
        .collect();
    let mut starts = vec![default_start];
    for s in &opts.extra_starts {
        check_theta(mats, s)?;
        starts.push(s.clone());
    }
    let mut evals = 0;
    let mut best: Option<optim::OptResult> = None;
    for s in &starts {
        let budget = opts.max_evals.saturating_sub(evals).max(1);
        let mut obj = |t: &[f64]| ev.objective(t, method);
        let r = optim::nelder_mead(&mut obj, s, &lower, 0.5, opts.rel_tol, 1e-7, budget);
        evals += r.evals;
        if best.as_ref().is_none_or(|b| r.f < b.f) {
            best = Some(r);
        }
    }
    let mut nm = best.expect("at least one start");
    // restart from the optimum: a collapsed simplex can stall next to a
    // bound where the deviance is flat to first order
    for _ in 0..4 {
        if evals >= opts.max_evals {
            break;
        }
        let budget = opts.max_evals - evals;
        let mut obj = |t: &[f64]| ev.objective(t, method);
        let r = optim::nelder_mead(&mut obj, &nm.x, &lower, 0.5, opts.rel_tol, 1e-7, budget);
        evals += r.evals;
        let gain = nm.f - r.f;
        let converged = r.converged;
        if gain > 0.0 {
            nm = r;
        } else {
            nm.converged &= converged;
        }
        if gain <= 1e-6 * nm.f.abs().max(1.0) {
            break;
        }
    }
    let (theta, f_polished, pe) = {
        let mut obj = |t: &[f64]| ev.objective(t, method);
        optim::newton_polish(&mut obj, &nm.x, nm.f, &lower, 40)
    };
    evals += pe;
    // out of budget but at a point satisfying the first-order conditions
    let converged = nm.converged || {
        let mut obj = |t: &[f64]| ev.objective(t, method);
        let (g, _) = optim::fd_derivatives(&mut obj, &theta, f_polished, &lower);
        evals += 2 * theta.len() * theta.len();
        (0..theta.len()).all(|i| {
            let at_bound = theta[i] <= lower[i] && g[i] >= 0.0;
            at_bound || g[i].abs() < 2e-3
        })
    };

    let fit = assemble(mats, &mut ev, theta, method, converged, evals, opts.singular_tol)?;
    if !fit.converged {
        return Err(FitError::NotConverged {
            evals,
            best: Box::new(fit),
        });
    }
    Ok(fit)
}

fn assemble(
    mats: &ModelMatrices,
    ev: &mut Evaluator,
    theta: Vec<f64>,
    method: Method,
    converged: bool,
    evals: usize,
    singular_tol: f64,
) -> Result<LmmFit, FitError> {
    let sol = ev.solve(&theta).map_err(|e| numerical(mats, ev, e))?;
    let sigma2 = ev.sigma2(&sol, method);
    let deviance = ev.profiled(&sol, method);
    let mut cov_terms = Vec::new();
    let mut ranef = Vec::new();
    let mut off = 0;
    for (blk, tb) in mats.z_blocks.iter().zip(&mats.theta_layout) {
        let lam = tb.lambda(&theta);
        cov_terms.push(TermCovariance {
            group: blk.grouping.clone(),
            names: blk.inner_names.clone(),
            cov: &lam * lam.transpose() * sigma2,
            correlated: blk.correlated,
        });
        let k = blk.k();
        let values = DMatrix::from_fn(blk.n_levels(), k, |l, c| sol.b[off + l * k + c]);
        ranef.push(RanefTable {
            group: blk.grouping.clone(),
            columns: blk.inner_names.clone(),
            levels: blk.levels.clone(),
            values,
        });
        off += blk.n_effects();
    }
    let residuals = &mats.y - &sol.fitted;
    let mut fit = LmmFit {
        method,
        beta: sol.beta.clone(),
        beta_names: mats.x_names.clone(),
        vcov_beta: &sol.rx_inv * sigma2,
        sigma2,
        theta,
        cov_terms,
        ranef,
        u: sol.u.clone(),
        b: sol.b.clone(),
        fitted: sol.fitted.clone(),
        residuals,
        deviance,
        converged,
        evals,
        singular: SingularReport::default(),
        singular_tol,
        mats: Arc::new(mats.clone()),
    };
    fit.singular = is_singular(&fit, singular_tol);
    Ok(fit)
}

/// Boundary check: a relative-factor diagonal below `tol` (relative to the
/// largest diagonal, floored at 1) or a correlation within `tol` of ±1.
pub fn is_singular(fit: &LmmFit, tol: f64) -> SingularReport {
    let layout = &fit.mats.theta_layout;
    let max_diag = layout
        .iter()
        .flat_map(|tb| {
            tb.entries
                .iter()
                .enumerate()
                .filter(|(_, (i, j))| i == j)
                .map(move |(e, _)| fit.theta[tb.offset + e].abs())
        })
        .fold(0.0, f64::max);
    let thresh = tol * max_diag.max(1.0);
    let mut components = Vec::new();
    for (tb, ct) in layout.iter().zip(&fit.cov_terms) {
        let lam = tb.lambda(&fit.theta);
        for i in 0..tb.k {
            if lam[(i, i)].abs() < thresh {
                components.push((ct.group.clone(), ct.names[i].clone()));
            }
        }
        if tb.correlated && tb.k > 1 {
            let corr = ct.corr();
            for i in 0..tb.k {
                for j in 0..i {
                    let c = corr[(i, j)];
                    if c.is_finite() && c.abs() > 1.0 - tol {
                        components.push((
                            ct.group.clone(),
                            format!("{},{}", ct.names[j], ct.names[i]),
                        ));
                    }
                }
            }
        }
    }
    SingularReport {
        singular: !components.is_empty(),
        components,
    }
}

/// Conditional modes per term and grouping level.
pub fn ranef(fit: &LmmFit) -> &[RanefTable] {
    &fit.ranef
}

/// Predictions `Xβ̂ (+ Zγ̂)` for the rows of `ds`. A log response is not
/// back-transformed.
pub fn predict(fit: &LmmFit, ds: &Dataset, include_random: bool) -> Result<Vec<f64>, DesignError> {
    let mats = &fit.mats;
    let x = mats.fixed_rows(ds)?;
    let mut out: Vec<f64> = (&x * &fit.beta).iter().copied().collect();
    if include_random {
        for (bi, table) in fit.ranef.iter().enumerate() {
            let (inner, levels) = mats.random_rows(ds, bi)?;
            for (row, lvl) in levels.iter().enumerate() {
                let Some(l) = lvl else {
                    let factors = &mats.z_blocks[bi].factors;
                    let label = factors
                        .iter()
                        .map(|f| {
                            ds.column(f)
                                .ok()
                                .and_then(|c| c.label(row))
                                .unwrap_or_default()
                        })
                        .collect::<Vec<_>>()
                        .join(":");
                    return Err(DesignError::UnseenLevel {
                        column: table.group.clone(),
                        level: label,
                    });
                };
                for c in 0..inner.ncols() {
                    out[row] += inner[(row, c)] * table.values[(*l, c)];
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VarianceRow {
    pub group: String,
    pub name: String,
    pub variance: f64,
    pub sd: f64,
    /// Correlations with the preceding components of the same term.
    pub corr: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FixedRow {
    pub name: String,
    pub estimate: f64,
    pub std_error: f64,
    pub t_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupCount {
    pub group: String,
    pub levels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitSummary {
    pub formula: String,
    pub method: Method,
    pub deviance: f64,
    pub log_likelihood: f64,
    pub n_obs: usize,
    pub groups: Vec<GroupCount>,
    pub random: Vec<VarianceRow>,
    pub fixed: Vec<FixedRow>,
    pub converged: bool,
    pub singular: bool,
    pub singular_components: Vec<(String, String)>,
}

impl LmmFit {
    pub fn n_obs(&self) -> usize {
        self.mats.n()
    }

    /// Parameters counted for likelihood-ratio tests: fixed effects,
    /// covariance parameters and the residual variance.
    pub fn n_params(&self) -> usize {
        self.beta.len() + self.theta.len() + 1
    }

    pub fn std_errors(&self) -> Vec<f64> {
        self.vcov_beta.diagonal().iter().map(|v| v.sqrt()).collect()
    }

    pub fn summary(&self) -> FitSummary {
        let mut random = Vec::new();
        for ct in &self.cov_terms {
            let sd = ct.sds();
            let corr = ct.corr();
            for (i, name) in ct.names.iter().enumerate() {
                random.push(VarianceRow {
                    group: ct.group.clone(),
                    name: name.clone(),
                    variance: ct.cov[(i, i)],
                    sd: sd[i],
                    corr: if ct.correlated {
                        (0..i).map(|j| corr[(i, j)]).collect()
                    } else {
                        Vec::new()
                    },
                });
            }
        }
        random.push(VarianceRow {
            group: "Residual".into(),
            name: String::new(),
            variance: self.sigma2,
            sd: self.sigma2.sqrt(),
            corr: Vec::new(),
        });
        let se = self.std_errors();
        let fixed = self
            .beta_names
            .iter()
            .enumerate()
            .map(|(i, name)| FixedRow {
                name: name.clone(),
                estimate: self.beta[i],
                std_error: se[i],
                t_value: self.beta[i] / se[i],
            })
            .collect();
        FitSummary {
            formula: self.mats.spec.formula.to_string(),
            method: self.method,
            deviance: self.deviance,
            log_likelihood: -self.deviance / 2.0,
            n_obs: self.n_obs(),
            groups: self
                .mats
                .z_blocks
                .iter()
                .map(|b| GroupCount {
                    group: b.grouping.clone(),
                    levels: b.n_levels(),
                })
                .collect(),
            random,
            fixed,
            converged: self.converged,
            singular: self.singular.singular,
            singular_components: self.singular.components.clone(),
        }
    }
}

impl fmt::Display for FitSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Linear mixed model fit by {}", self.method)?;
        writeln!(f, "Formula: {}", self.formula)?;
        let crit = if self.method == Method::Reml {
            "REML criterion"
        } else {
            "deviance"
        };
        writeln!(f, "{crit}: {}", sig(self.deviance, 6))?;
        writeln!(f)?;
        writeln!(f, "Random effects:")?;
        let mut rows = Vec::new();
        let mut last = String::new();
        for r in &self.random {
            let group = if r.group == last { String::new() } else { r.group.clone() };
            last = r.group.clone();
            rows.push(vec![
                group,
                r.name.clone(),
                sig(r.variance, 6),
                sig(r.sd, 6),
                r.corr
                    .iter()
                    .map(|c| sig(*c, 3))
                    .collect::<Vec<_>>()
                    .join(" "),
            ]);
        }
        f.write_str(&table(&["Groups", "Name", "Variance", "Std.Dev.", "Corr"], &rows))?;
        let counts: Vec<String> = self
            .groups
            .iter()
            .map(|g| format!("{}, {}", g.group, g.levels))
            .collect();
        writeln!(f, "Number of obs: {}, groups: {}", self.n_obs, counts.join("; "))?;
        writeln!(f)?;
        writeln!(f, "Fixed effects:")?;
        let rows: Vec<Vec<String>> = self
            .fixed
            .iter()
            .map(|r| {
                vec![
                    r.name.clone(),
                    sig(r.estimate, 6),
                    sig(r.std_error, 6),
                    sig(r.t_value, 6),
                ]
            })
            .collect();
        f.write_str(&table(&["", "Estimate", "Std. Error", "t value"], &rows))?;
        if !self.converged {
            writeln!(f, "warning: optimizer did not converge")?;
        }
        if self.singular {
            let parts: Vec<String> = self
                .singular_components
                .iter()
                .map(|(g, c)| format!("{g} {c}"))
                .collect();
            writeln!(f, "boundary (singular) fit: {}", parts.join(", "))?;
        }
        Ok(())
    }
}
