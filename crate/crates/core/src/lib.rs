//! Linear mixed-effects models with an lme4-style formula language.
//!
//! The crate is organised bottom-up:
//!
//! - [`dataframe`]: columnar datasets, CSV ingestion, cross-tabulation and
//!   nested/crossed factor classification.
//! - [`formula`]: parsing and canonical expansion of model formulas such as
//!   `y ~ 1 + a*b + (1 + time | subject) + (1 | site/subject)`.
//! - [`design`]: fixed-effect and block-sparse random-effect design matrices.
//! - [`estimate`]: ML/REML fitting through the profiled deviance.
//! - [`inference`]: Satterthwaite F-tests, classical repeated-measures ANOVA,
//!   likelihood-ratio comparisons.
//! - [`structlint`]: diagnosis of random-effects structures against the
//!   study design, with a recommended structure.
//! - [`nonlinear`]: negative exponential growth curves fitted per subject.
//! - [`simgen`]: seeded generators for longitudinal, factorial and crossed
//!   designs.

pub mod dataframe;
pub mod design;
pub mod estimate;
pub mod formula;
pub mod inference;
pub mod nonlinear;
pub mod report;
pub mod simgen;
pub mod structlint;

pub use dataframe::{Column, ColumnType, Dataset, FactorRelation, IncidenceMatrix};
pub use design::{build_matrices, CenteringPolicy, ContrastScheme, ModelMatrices};
pub use estimate::{fit_lmm, FitOptions, LmmFit, Method};
pub use formula::{expand_terms, parse_formula, FormulaAst};
