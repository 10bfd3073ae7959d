//! F-tests for fixed-effect terms, a classical repeated-measures ANOVA and
//! likelihood-ratio model comparison.

pub mod dist;
mod rm_anova;
mod satterthwaite;

use std::fmt;

use serde::Serialize;
use thiserror::Error;

pub use rm_anova::classical_rm_anova;
pub use satterthwaite::{anova_satterthwaite, contrast_test, ContrastTest};

use crate::estimate::{LmmFit, Method};
use crate::report::{sig, table};

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error(transparent)]
    Data(#[from] crate::dataframe::DataError),
    #[error("need at least 2 subjects, found {0}")]
    TooFewSubjects(usize),
    #[error("design is not balanced: subject `{subject}` has {count} observations in cell {cell}")]
    Unbalanced {
        subject: String,
        cell: String,
        count: usize,
    },
    #[error("missing value in column `{0}`; the classical ANOVA needs complete data")]
    Missing(String),
    #[error("models were fitted to different responses or rows")]
    DifferentData,
    #[error(
        "REML fits with different fixed effects cannot be compared; refit both models \
         with ML"
    )]
    RemlFixedDiffer,
    #[error("models were fitted with different methods ({0} vs {1})")]
    MixedMethods(Method, Method),
    #[error("models are not nested: {0}")]
    NotNested(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum AnovaSource {
    MixedSatterthwaite,
    ClassicalRM,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FTestRow {
    pub term: String,
    /// NaN (JSON `null`) when undefined.
    #[serde(rename = "F")]
    pub f_value: f64,
    pub df1: usize,
    pub df2: f64,
    #[serde(rename = "p")]
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnovaTable {
    pub source: AnovaSource,
    pub rows: Vec<FTestRow>,
    /// Set when the deviance Hessian was not positive definite and the
    /// denominator df fell back to `n - p`.
    pub hessian_fallback: bool,
    /// Set when the underlying fit sits on the boundary.
    pub singular_fit: bool,
}

impl AnovaTable {
    pub fn row(&self, term: &str) -> Option<&FTestRow> {
        self.rows.iter().find(|r| r.term == term)
    }
}

impl fmt::Display for AnovaTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let title = match self.source {
            AnovaSource::MixedSatterthwaite => {
                "Type III F-tests with Satterthwaite denominator df"
            }
            AnovaSource::ClassicalRM => "Repeated-measures ANOVA, Type III sums of squares",
        };
        writeln!(f, "{title}")?;
        let num = |x: f64| {
            if x.is_nan() {
                "undefined".to_string()
            } else {
                sig(x, 6)
            }
        };
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.term.clone(),
                    num(r.f_value),
                    r.df1.to_string(),
                    num(r.df2),
                    num(r.p_value),
                ]
            })
            .collect();
        f.write_str(&table(&["Term", "F", "Df1", "Df2", "p"], &rows))?;
        if self.hessian_fallback {
            writeln!(
                f,
                "warning: deviance Hessian not positive definite; Df2 is the residual df"
            )?;
        }
        if self.singular_fit {
            writeln!(f, "warning: boundary (singular) fit")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LrtRecord {
    pub smaller: String,
    pub larger: String,
    pub method: Method,
    pub deviance_smaller: f64,
    pub deviance_larger: f64,
    pub params_smaller: usize,
    pub params_larger: usize,
    pub chisq: f64,
    pub df: usize,
    pub p_value: f64,
    /// A dropped parameter is a variance, whose null value lies on the
    /// boundary; the chi-square reference is then conservative.
    pub boundary_caveat: bool,
}

impl fmt::Display for LrtRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Likelihood-ratio test ({} fits)", self.method)?;
        let rows = vec![
            vec![
                self.smaller.clone(),
                self.params_smaller.to_string(),
                sig(self.deviance_smaller, 6),
                String::new(),
                String::new(),
                String::new(),
            ],
            vec![
                self.larger.clone(),
                self.params_larger.to_string(),
                sig(self.deviance_larger, 6),
                sig(self.chisq, 6),
                self.df.to_string(),
                sig(self.p_value, 6),
            ],
        ];
        f.write_str(&table(
            &["Model", "npar", "deviance", "Chisq", "Df", "p"],
            &rows,
        ))?;
        if self.boundary_caveat {
            writeln!(
                f,
                "note: variance parameters tested on the boundary; p-value is conservative"
            )?;
        }
        Ok(())
    }
}

/// Likelihood-ratio test between two nested fits (either order).
pub fn compare_models(a: &LmmFit, b: &LmmFit) -> Result<LrtRecord, InferenceError> {
    let (ma, mb) = (&a.mats, &b.mats);
    if ma.n() != mb.n()
        || ma
            .y
            .iter()
            .zip(mb.y.iter())
            .any(|(x, y)| (x - y).abs() > 1e-12 * x.abs().max(1.0))
    {
        return Err(InferenceError::DifferentData);
    }
    if a.method != b.method {
        return Err(InferenceError::MixedMethods(a.method, b.method));
    }
    let same_fixed = ma.x_names == mb.x_names
        && (&ma.x - &mb.x).amax() <= 1e-12 * ma.x.amax().max(1.0);
    if a.method == Method::Reml && !same_fixed {
        return Err(InferenceError::RemlFixedDiffer);
    }
    let (small, large) = if a.n_params() <= b.n_params() {
        (a, b)
    } else {
        (b, a)
    };
    check_nested(small, large)?;
    let df = large.n_params() - small.n_params();
    let chisq = (small.deviance - large.deviance).max(0.0);
    let p_value = if df == 0 { 1.0 } else { dist::chi2_sf(chisq, df as f64) };
    Ok(LrtRecord {
        smaller: small.mats.spec.formula.to_string(),
        larger: large.mats.spec.formula.to_string(),
        method: a.method,
        deviance_smaller: small.deviance,
        deviance_larger: large.deviance,
        params_smaller: small.n_params(),
        params_larger: large.n_params(),
        chisq,
        df,
        p_value,
        boundary_caveat: large.theta.len() > small.theta.len(),
    })
}

fn check_nested(small: &LmmFit, large: &LmmFit) -> Result<(), InferenceError> {
    let (s, l) = (&small.mats, &large.mats);
    for name in &s.x_names {
        if !l.x_names.contains(name) {
            return Err(InferenceError::NotNested(format!(
                "fixed effect `{name}` is missing from the larger model"
            )));
        }
    }
    for blk in &s.z_blocks {
        let found = l.z_blocks.iter().any(|lb| {
            lb.grouping == blk.grouping
                && blk.inner_names.iter().all(|n| lb.inner_names.contains(n))
                && (lb.correlated || !blk.correlated || blk.k() == 1)
        });
        if !found {
            return Err(InferenceError::NotNested(format!(
                "random term {} has no counterpart in the larger model",
                blk.term_label()
            )));
        }
    }
    Ok(())
}
