//! Fixed-effect design matrix `X` and block-sparse random-effect design `Z`.
//!
//! Each random-effect term becomes one [`RandomBlock`]: a grouping factor with
//! `l` levels and an inner design with `k` columns, i.e. an `n x (k*l)`
//! sparse matrix in which row `i` is non-zero only in the `k` columns of its
//! own level.

use std::collections::{BTreeMap, HashMap};

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::dataframe::{DataError, Dataset};
use crate::formula::{FixedTerm, FormulaAst, VarRef};

#[derive(Debug, Error)]
pub enum DesignError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("grouping variable `{0}` must be a factor")]
    GroupingNotFactor(String),
    #[error("grouping factor `{0}` has a single level")]
    SingleLevelGrouping(String),
    #[error("factor `{0}` has a single level and cannot be used as a predictor")]
    SingleLevelFactor(String),
    #[error("no rows left after dropping {dropped} rows with missing values")]
    NoRows { dropped: usize },
    #[error("fixed-effect design is rank deficient; dependent columns: {}", .0.join(", "))]
    RankDeficient(Vec<String>),
    #[error("log response requires positive values; row {row} has {value}")]
    NonPositiveLog { row: usize, value: f64 },
    #[error("power transforms need a numeric variable, `{0}` is a factor")]
    PowerOfFactor(String),
    #[error("column `{column}` has level `{level}` not seen when the model was built")]
    UnseenLevel { column: String, level: String },
}

pub type Result<T> = std::result::Result<T, DesignError>;

/// Coding of factor predictors.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum ContrastScheme {
    /// Dummy coding against a reference level; factors not listed use their
    /// first level.
    Treatment { reference: BTreeMap<String, String> },
    /// Sum-to-zero coding; the last level is coded -1 in every column.
    Sum,
}

impl Default for ContrastScheme {
    fn default() -> Self {
        ContrastScheme::Treatment {
            reference: BTreeMap::new(),
        }
    }
}

impl ContrastScheme {
    pub fn treatment() -> Self {
        Self::default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub enum Centering {
    #[default]
    None,
    /// Subtract the smallest observed value (time zero = first observation).
    AtFirstObservation,
    AtMean,
}

/// Per-variable centering, applied before power transforms.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct CenteringPolicy {
    pub per_var: BTreeMap<String, Centering>,
}

impl CenteringPolicy {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn with(mut self, var: &str, c: Centering) -> Self {
        self.per_var.insert(var.to_string(), c);
        self
    }

    fn get(&self, var: &str) -> Centering {
        self.per_var.get(var).copied().unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
enum VarKind {
    Numeric { center: f64 },
    Factor { levels: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
enum Coding {
    Numeric { center: f64, power: u32 },
    /// `matrix[level][col]`
    Factor {
        matrix: Vec<Vec<f64>>,
        names: Vec<String>,
    },
}

impl Coding {
    fn width(&self) -> usize {
        match self {
            Coding::Numeric { .. } => 1,
            Coding::Factor { names, .. } => names.len(),
        }
    }
}

/// How one model term turns data into columns.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TermEncoding {
    pub label: String,
    vars: Vec<(String, Coding)>,
    pub column_names: Vec<String>,
}

impl TermEncoding {
    fn intercept() -> Self {
        TermEncoding {
            label: "(Intercept)".into(),
            vars: Vec::new(),
            column_names: vec!["(Intercept)".into()],
        }
    }

    pub fn width(&self) -> usize {
        self.column_names.len()
    }
}

/// Everything needed to rebuild model rows from new data.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignSpec {
    pub formula: FormulaAst,
    var_kinds: BTreeMap<String, VarKind>,
    pub fixed: Vec<TermEncoding>,
    pub random: Vec<RandomSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RandomSpec {
    pub factors: Vec<String>,
    pub inner: Vec<TermEncoding>,
    pub levels: Vec<String>,
    pub correlated: bool,
}

/// One random-effect term's slice of `Z`.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomBlock {
    /// Grouping label, e.g. `subject:condition`.
    pub grouping: String,
    pub factors: Vec<String>,
    pub inner_names: Vec<String>,
    pub levels: Vec<String>,
    /// Grouping level of each retained row.
    pub row_level: Vec<usize>,
    /// Inner design, `n x k`.
    pub inner: DMatrix<f64>,
    pub correlated: bool,
}

impl RandomBlock {
    pub fn k(&self) -> usize {
        self.inner.ncols()
    }

    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }

    /// Number of random-effect coefficients contributed, `k * l`.
    pub fn n_effects(&self) -> usize {
        self.k() * self.n_levels()
    }

    /// Term as written in a formula, e.g. `(1 + time | subject)`.
    pub fn term_label(&self) -> String {
        let bar = if self.correlated { "|" } else { "||" };
        let inner = self
            .inner_names
            .iter()
            .map(|n| if n == "(Intercept)" { "1" } else { n.as_str() })
            .collect::<Vec<_>>()
            .join(" + ");
        format!("({inner} {bar} {})", self.grouping)
    }
}

/// Positions of one term's covariance parameters inside `theta`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThetaBlock {
    pub offset: usize,
    pub k: usize,
    pub correlated: bool,
    /// (row, col) of each parameter in the lower-triangular relative factor,
    /// column-major.
    pub entries: Vec<(usize, usize)>,
}

impl ThetaBlock {
    fn new(offset: usize, k: usize, correlated: bool) -> Self {
        let entries = if correlated {
            (0..k).flat_map(|j| (j..k).map(move |i| (i, j))).collect()
        } else {
            (0..k).map(|j| (j, j)).collect()
        };
        ThetaBlock {
            offset,
            k,
            correlated,
            entries,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Relative covariance factor built from this block's slice of theta.
    pub fn lambda(&self, theta: &[f64]) -> DMatrix<f64> {
        let mut l = DMatrix::zeros(self.k, self.k);
        for (idx, &(i, j)) in self.entries.iter().enumerate() {
            l[(i, j)] = theta[self.offset + idx];
        }
        l
    }
}

/// Type III hypothesis for one fixed term, expressed on the fitted
/// coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct TermHypothesis {
    pub label: String,
    /// Rows are contrasts on the coefficient vector.
    pub l: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct ModelMatrices {
    pub y: DVector<f64>,
    pub x: DMatrix<f64>,
    pub x_names: Vec<String>,
    /// Fixed term label and its column range in `x`.
    pub fixed_terms: Vec<(String, std::ops::Range<usize>)>,
    pub z_blocks: Vec<RandomBlock>,
    pub theta_layout: Vec<ThetaBlock>,
    /// Source row indices removed for missing values.
    pub dropped_rows: Vec<usize>,
    /// Source row index of each retained row.
    pub kept_rows: Vec<usize>,
    pub term_hypotheses: Vec<TermHypothesis>,
    pub spec: DesignSpec,
}

impl ModelMatrices {
    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn n_theta(&self) -> usize {
        self.theta_layout.iter().map(|b| b.len()).sum()
    }

    /// Lower bounds of theta: 0 on diagonals, unbounded off the diagonal.
    pub fn theta_lower(&self) -> Vec<f64> {
        self.theta_layout
            .iter()
            .flat_map(|b| {
                b.entries
                    .iter()
                    .map(|&(i, j)| if i == j { 0.0 } else { f64::NEG_INFINITY })
            })
            .collect()
    }

    /// Total number of random-effect columns of `Z`.
    pub fn q(&self) -> usize {
        self.z_blocks.iter().map(|b| b.n_effects()).sum()
    }

    /// `Z` as (row, column, value) triplets, blocks in term order.
    pub fn z_triplets(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        let mut offset = 0;
        for b in &self.z_blocks {
            let k = b.k();
            for (row, &lvl) in b.row_level.iter().enumerate() {
                for c in 0..k {
                    let v = b.inner[(row, c)];
                    if v != 0.0 {
                        out.push((row, offset + lvl * k + c, v));
                    }
                }
            }
            offset += b.n_effects();
        }
        out
    }

    pub fn z_dense(&self) -> DMatrix<f64> {
        let mut z = DMatrix::zeros(self.n(), self.q());
        for (r, c, v) in self.z_triplets() {
            z[(r, c)] = v;
        }
        z
    }

    pub fn z_column_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for b in &self.z_blocks {
            for lvl in &b.levels {
                for name in &b.inner_names {
                    out.push(format!("{}[{lvl}]:{name}", b.grouping));
                }
            }
        }
        out
    }

    /// Dense CSV dump of `X` (for inspection).
    pub fn x_csv(&self) -> String {
        dense_csv(&self.x_names, &self.x)
    }

    /// Dense CSV dump of `Z` (for inspection).
    pub fn z_csv(&self) -> String {
        dense_csv(&self.z_column_names(), &self.z_dense())
    }

    /// Fixed-effect rows for new data (no response needed).
    pub fn fixed_rows(&self, ds: &Dataset) -> Result<DMatrix<f64>> {
        let n = ds.n_rows();
        let mut x = DMatrix::zeros(n, self.p());
        let mut buf = Vec::new();
        for row in 0..n {
            buf.clear();
            for t in &self.spec.fixed {
                t.row_values_checked(ds, row, &self.spec.var_kinds, &mut buf)?;
            }
            for (j, v) in buf.iter().enumerate() {
                x[(row, j)] = *v;
            }
        }
        Ok(x)
    }

    /// Random-effect inner rows and grouping-level indices for new data.
    /// A level index of `None` marks a grouping level not seen in training.
    pub fn random_rows(
        &self,
        ds: &Dataset,
        block: usize,
    ) -> Result<(DMatrix<f64>, Vec<Option<usize>>)> {
        let spec = &self.spec.random[block];
        let n = ds.n_rows();
        let k = spec.inner.iter().map(|t| t.width()).sum();
        let mut inner = DMatrix::zeros(n, k);
        let mut levels = Vec::with_capacity(n);
        let index: HashMap<&str, usize> = spec
            .levels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.as_str(), i))
            .collect();
        let cols = spec
            .factors
            .iter()
            .map(|f| ds.column(f))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let mut buf = Vec::new();
        for row in 0..n {
            buf.clear();
            for t in &spec.inner {
                t.row_values_checked(ds, row, &self.spec.var_kinds, &mut buf)?;
            }
            for (j, v) in buf.iter().enumerate() {
                inner[(row, j)] = *v;
            }
            let label: Option<Vec<String>> = cols.iter().map(|c| c.label(row)).collect();
            levels.push(label.and_then(|l| index.get(l.join(":").as_str()).copied()));
        }
        Ok((inner, levels))
    }
}

impl TermEncoding {
    fn row_values_checked(
        &self,
        ds: &Dataset,
        row: usize,
        kinds: &BTreeMap<String, VarKind>,
        out: &mut Vec<f64>,
    ) -> Result<()> {
        let start = out.len();
        out.push(1.0);
        for (name, coding) in &self.vars {
            let col = ds.column(name)?;
            let vals: Vec<f64> = match coding {
                Coding::Numeric { center, power } => {
                    let x = col
                        .value(row)
                        .ok_or_else(|| DataError::NotNumeric(name.clone()))?;
                    vec![(x - center).powi(*power as i32)]
                }
                Coding::Factor { matrix, .. } => {
                    let Some(VarKind::Factor { levels }) = kinds.get(name) else {
                        return Err(DataError::NotFactor(name.clone()).into());
                    };
                    let label = col
                        .label(row)
                        .ok_or_else(|| DataError::NotFactor(name.clone()))?;
                    let idx = levels.iter().position(|l| *l == label).ok_or_else(|| {
                        DesignError::UnseenLevel {
                            column: name.clone(),
                            level: label.clone(),
                        }
                    })?;
                    matrix[idx].clone()
                }
            };
            let prev: Vec<f64> = out.drain(start..).collect();
            for v in &vals {
                for p in &prev {
                    out.push(p * v);
                }
            }
        }
        Ok(())
    }
}

fn dense_csv(names: &[String], m: &DMatrix<f64>) -> String {
    let mut s = names.join(",");
    s.push('\n');
    for r in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|c| format!("{}", m[(r, c)])).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

fn factor_coding(
    var: &str,
    levels: &[String],
    scheme: &ContrastScheme,
    contrasts: bool,
) -> Coding {
    let l = levels.len();
    if !contrasts {
        let matrix = (0..l)
            .map(|i| (0..l).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        let names = levels.iter().map(|lv| format!("{var}[{lv}]")).collect();
        return Coding::Factor { matrix, names };
    }
    match scheme {
        ContrastScheme::Treatment { reference } => {
            let r = reference
                .get(var)
                .and_then(|rl| levels.iter().position(|x| x == rl))
                .unwrap_or(0);
            let cols: Vec<usize> = (0..l).filter(|&j| j != r).collect();
            let matrix = (0..l)
                .map(|i| cols.iter().map(|&j| if i == j { 1.0 } else { 0.0 }).collect())
                .collect();
            let names = cols
                .iter()
                .map(|&j| format!("{var}[{}]", levels[j]))
                .collect();
            Coding::Factor { matrix, names }
        }
        ContrastScheme::Sum => {
            let matrix = (0..l)
                .map(|i| {
                    (0..l - 1)
                        .map(|j| {
                            if i == l - 1 {
                                -1.0
                            } else if i == j {
                                1.0
                            } else {
                                0.0
                            }
                        })
                        .collect()
                })
                .collect();
            let names = (0..l - 1)
                .map(|j| format!("{var}[S.{}]", levels[j]))
                .collect();
            Coding::Factor { matrix, names }
        }
    }
}

/// Encode a list of terms; a factor gets contrasts when the term without it
/// is also present (the intercept counts as the empty term), otherwise full
/// indicator coding.
fn encode_terms(
    terms: &[FixedTerm],
    intercept: bool,
    kinds: &BTreeMap<String, VarKind>,
    scheme: &ContrastScheme,
) -> Result<Vec<TermEncoding>> {
    let mut out = Vec::new();
    if intercept {
        out.push(TermEncoding::intercept());
    }
    for term in terms {
        let mut vars = Vec::new();
        for v in &term.vars {
            let kind = &kinds[&v.name];
            let coding = match kind {
                VarKind::Numeric { center } => Coding::Numeric {
                    center: *center,
                    power: v.power,
                },
                VarKind::Factor { levels } => {
                    if v.power != 1 {
                        return Err(DesignError::PowerOfFactor(v.name.clone()));
                    }
                    let rest: Vec<VarRef> =
                        term.vars.iter().filter(|w| *w != v).cloned().collect();
                    let margin_present = if rest.is_empty() {
                        intercept
                    } else {
                        let r = FixedTerm::new(rest);
                        terms.iter().any(|t| t.same_as(&r))
                    };
                    if levels.len() < 2 {
                        return Err(DesignError::SingleLevelFactor(v.name.clone()));
                    }
                    factor_coding(&v.name, levels, scheme, margin_present)
                }
            };
            vars.push((v.name.clone(), coding));
        }
        // column names: first variable varies fastest
        let mut names = vec![String::new()];
        for (_, coding) in &vars {
            let these: Vec<String> = match coding {
                Coding::Numeric { .. } => vec![String::new()],
                Coding::Factor { names, .. } => names.clone(),
            };
            let mut next = Vec::new();
            for (vi, t) in these.iter().enumerate() {
                for p in &names {
                    let _ = vi;
                    next.push((p.clone(), t.clone()));
                }
            }
            names = next
                .into_iter()
                .map(|(p, t)| if p.is_empty() { t } else { format!("{p}:{t}") })
                .collect();
        }
        // numeric variables contribute their label
        let names: Vec<String> = if vars.iter().all(|(_, c)| matches!(c, Coding::Factor { .. })) {
            names
        } else {
            numeric_aware_names(term, &vars)
        };
        debug_assert_eq!(names.len(), vars.iter().map(|(_, c)| c.width()).product::<usize>());
        out.push(TermEncoding {
            label: term.label(),
            vars,
            column_names: names,
        });
    }
    Ok(out)
}

fn numeric_aware_names(term: &FixedTerm, vars: &[(String, Coding)]) -> Vec<String> {
    let mut names = vec![String::new()];
    for (v, (_, coding)) in term.vars.iter().zip(vars) {
        let these: Vec<String> = match coding {
            Coding::Numeric { .. } => vec![v.to_string()],
            Coding::Factor { names, .. } => names.clone(),
        };
        let mut next = Vec::new();
        for t in &these {
            for p in &names {
                next.push(if p.is_empty() {
                    t.clone()
                } else {
                    format!("{p}:{t}")
                });
            }
        }
        names = next;
    }
    names
}

/// Build `y`, `X` and the `Z` blocks for an expanded formula.
///
/// Rows missing any referenced column are dropped. `X` must have full column
/// rank; dependent columns are reported by name.
pub fn build_matrices(
    ds: &Dataset,
    ast: &FormulaAst,
    contrasts: &ContrastScheme,
    centering: &CenteringPolicy,
) -> Result<ModelMatrices> {
    let referenced = ast.referenced_columns();
    let cols = referenced
        .iter()
        .map(|c| ds.column(c))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for row in 0..ds.n_rows() {
        if cols.iter().any(|c| c.is_missing(row)) {
            dropped.push(row);
        } else {
            kept.push(row);
        }
    }
    if kept.is_empty() {
        return Err(DesignError::NoRows {
            dropped: dropped.len(),
        });
    }
    let data = ds.take_rows(&kept);
    let n = kept.len();

    let resp = data.column(&ast.response.column)?;
    if resp.is_factor() {
        return Err(DataError::NotNumeric(ast.response.column.clone()).into());
    }
    let mut y = DVector::zeros(n);
    for i in 0..n {
        let v = resp.value(i).expect("no missing after dropping");
        y[i] = if ast.response.log {
            if v <= 0.0 {
                return Err(DesignError::NonPositiveLog {
                    row: kept[i],
                    value: v,
                });
            }
            v.ln()
        } else {
            v
        };
    }

    // variable kinds (levels / centering constants) from retained rows
    let mut kinds = BTreeMap::new();
    let fixed_terms = ast.fixed_terms();
    let mut predictor_vars: Vec<String> = Vec::new();
    for t in fixed_terms
        .iter()
        .chain(ast.random.iter().flat_map(|r| r.inner_terms()).collect::<Vec<_>>().iter())
    {
        for v in &t.vars {
            if !predictor_vars.contains(&v.name) {
                predictor_vars.push(v.name.clone());
            }
        }
    }
    for name in &predictor_vars {
        let col = data.column(name)?;
        let kind = match col.levels() {
            Some(_) => {
                // only levels present in the retained rows
                let mut seen = vec![false; col.levels().unwrap().len()];
                for i in 0..n {
                    seen[col.code(i).unwrap()] = true;
                }
                let levels = col
                    .levels()
                    .unwrap()
                    .iter()
                    .zip(seen)
                    .filter(|(_, s)| *s)
                    .map(|(l, _)| l.clone())
                    .collect();
                VarKind::Factor { levels }
            }
            None => {
                let vals: Vec<f64> = (0..n).map(|i| col.value(i).unwrap()).collect();
                let center = match centering.get(name) {
                    Centering::None => 0.0,
                    Centering::AtFirstObservation => {
                        vals.iter().copied().fold(f64::INFINITY, f64::min)
                    }
                    Centering::AtMean => vals.iter().sum::<f64>() / n as f64,
                };
                VarKind::Numeric { center }
            }
        };
        kinds.insert(name.clone(), kind);
    }

    let fixed_enc = encode_terms(&fixed_terms, ast.intercept, &kinds, contrasts)?;
    let p: usize = fixed_enc.iter().map(|t| t.width()).sum();
    let mut random_specs = Vec::new();
    for r in &ast.random {
        let factors = r.group_factors();
        for f in &factors {
            let c = data.column(f)?;
            if !c.is_factor() {
                return Err(DesignError::GroupingNotFactor(f.clone()));
            }
        }
        let fcols: Vec<_> = factors.iter().map(|f| data.column(f).unwrap()).collect();
        let mut levels: Vec<String> = (0..n)
            .map(|i| {
                fcols
                    .iter()
                    .map(|c| c.label(i).unwrap())
                    .collect::<Vec<_>>()
                    .join(":")
            })
            .collect();
        levels.sort();
        levels.dedup();
        let label = factors.join(":");
        if levels.len() < 2 {
            return Err(DesignError::SingleLevelGrouping(label));
        }
        let inner = encode_terms(&r.inner_terms(), r.intercept, &kinds, contrasts)?;
        random_specs.push(RandomSpec {
            factors,
            inner,
            levels,
            correlated: r.correlated,
        });
    }

    let spec = DesignSpec {
        formula: ast.clone(),
        var_kinds: kinds,
        fixed: fixed_enc,
        random: random_specs,
    };

    let mut mats = ModelMatrices {
        y,
        x: DMatrix::zeros(n, p),
        x_names: spec
            .fixed
            .iter()
            .flat_map(|t| t.column_names.iter().cloned())
            .collect(),
        fixed_terms: Vec::new(),
        z_blocks: Vec::new(),
        theta_layout: Vec::new(),
        dropped_rows: dropped,
        kept_rows: kept,
        term_hypotheses: Vec::new(),
        spec,
    };
    let mut start = 0;
    for t in &mats.spec.fixed {
        mats.fixed_terms.push((t.label.clone(), start..start + t.width()));
        start += t.width();
    }
    mats.x = mats.fixed_rows(&data)?;

    let mut offset = 0;
    for (bi, rs) in mats.spec.random.clone().iter().enumerate() {
        let (inner, lv) = mats.random_rows(&data, bi)?;
        let k = inner.ncols();
        mats.z_blocks.push(RandomBlock {
            grouping: rs.factors.join(":"),
            factors: rs.factors.clone(),
            inner_names: rs
                .inner
                .iter()
                .flat_map(|t| t.column_names.iter().cloned())
                .collect(),
            levels: rs.levels.clone(),
            row_level: lv.into_iter().map(|l| l.expect("training level")).collect(),
            inner,
            correlated: rs.correlated,
        });
        let tb = ThetaBlock::new(offset, k, rs.correlated);
        offset += tb.len();
        mats.theta_layout.push(tb);
    }

    let dependent = dependent_columns(&mats.x);
    if !dependent.is_empty() {
        return Err(DesignError::RankDeficient(
            dependent.iter().map(|&j| mats.x_names[j].clone()).collect(),
        ));
    }
    mats.term_hypotheses = type3_hypotheses(&data, &mats, contrasts)?;
    Ok(mats)
}

/// Columns that are (numerically) linear combinations of earlier columns.
pub fn dependent_columns(x: &DMatrix<f64>) -> Vec<usize> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut dependent = Vec::new();
    for j in 0..x.ncols() {
        let col = x.column(j).into_owned();
        let norm = col.norm();
        let mut r = col;
        // two passes of modified Gram-Schmidt for stability
        for _ in 0..2 {
            for b in &basis {
                let c = b.dot(&r);
                r -= b * c;
            }
        }
        let rn = r.norm();
        if norm == 0.0 || rn <= 1e-9 * norm.max(1.0) {
            dependent.push(j);
        } else {
            basis.push(r / rn);
        }
    }
    dependent
}

/// Hypothesis matrices that reproduce Type III tests for every
/// non-intercept term: the term's block under sum-to-zero coding, mapped back
/// onto the fitted parameterisation.
fn type3_hypotheses(
    data: &Dataset,
    mats: &ModelMatrices,
    contrasts: &ContrastScheme,
) -> Result<Vec<TermHypothesis>> {
    let p = mats.p();
    let selection = |range: &std::ops::Range<usize>| {
        let mut l = DMatrix::zeros(range.len(), p);
        for (r, c) in range.clone().enumerate() {
            l[(r, c)] = 1.0;
        }
        l
    };
    let terms: Vec<_> = mats
        .fixed_terms
        .iter()
        .filter(|(label, _)| label != "(Intercept)")
        .cloned()
        .collect();
    if matches!(contrasts, ContrastScheme::Sum) {
        return Ok(terms
            .iter()
            .map(|(label, range)| TermHypothesis {
                label: label.clone(),
                l: selection(range),
            })
            .collect());
    }
    let sum_enc = encode_terms(
        &mats.spec.formula.fixed_terms(),
        mats.spec.formula.intercept,
        &mats.spec.var_kinds,
        &ContrastScheme::Sum,
    )?;
    let n = data.n_rows();
    let ps: usize = sum_enc.iter().map(|t| t.width()).sum();
    let mut xs = DMatrix::zeros(n, ps);
    let mut buf = Vec::new();
    for row in 0..n {
        buf.clear();
        for t in &sum_enc {
            t.row_values_checked(data, row, &mats.spec.var_kinds, &mut buf)?;
        }
        for (j, v) in buf.iter().enumerate() {
            xs[(row, j)] = *v;
        }
    }
    // beta_sum = M beta_treatment with X_t = X_s M
    let mapping = if ps == p {
        let svd = xs.clone().svd(true, true);
        svd.solve(&mats.x, 1e-12).ok().filter(|m| {
            let resid = (&xs * m - &mats.x).norm();
            resid <= 1e-8 * mats.x.norm().max(1.0)
        })
    } else {
        None
    };
    let mut out = Vec::new();
    let mut start = 0;
    for enc in &sum_enc {
        let w = enc.width();
        let range = start..start + w;
        start += w;
        if enc.label == "(Intercept)" {
            continue;
        }
        let l = match &mapping {
            Some(m) => m.rows(range.start, w).into_owned(),
            None => {
                let own = &mats
                    .fixed_terms
                    .iter()
                    .find(|(l, _)| *l == enc.label)
                    .expect("same terms")
                    .1;
                selection(own)
            }
        };
        out.push(TermHypothesis {
            label: enc.label.clone(),
            l,
        });
    }
    Ok(out)
}

/// Total number of random-effect coefficients, summed over terms.
pub fn count_random_effects(mats: &ModelMatrices) -> usize {
    mats.z_blocks.iter().map(|b| b.n_effects()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataframe::Column;
    use crate::formula::parse_expanded;

    fn heart() -> Dataset {
        Dataset::from_columns(vec![
            ("subject", Column::from_labels(&["s1", "s1", "s2", "s2"])),
            ("condition", Column::from_labels(&["ctl", "ex", "ctl", "ex"])),
            ("heart_rate", Column::from_f64(&[60.0, 72.0, 42.0, 50.0])),
        ])
        .unwrap()
    }

    fn build(ds: &Dataset, f: &str) -> Result<ModelMatrices> {
        build_matrices(
            ds,
            &parse_expanded(f).unwrap(),
            &ContrastScheme::default(),
            &CenteringPolicy::none(),
        )
    }

    #[test]
    fn figure_two_matrices() {
        let m = build(&heart(), "heart_rate ~ 1 + condition + (1|subject)").unwrap();
        let x = DMatrix::from_row_slice(4, 2, &[1., 0., 1., 1., 1., 0., 1., 1.]);
        let z = DMatrix::from_row_slice(4, 2, &[1., 0., 1., 0., 0., 1., 0., 1.]);
        assert_eq!(m.x, x);
        assert_eq!(m.z_dense(), z);
        assert_eq!(m.x_names, ["(Intercept)", "condition[ex]"]);
        assert_eq!(count_random_effects(&m), 2);
        assert_eq!(m.n_theta(), 1);
    }

    #[test]
    fn three_level_treatment_and_sum() {
        let ds = Dataset::from_columns(vec![
            ("g", Column::from_labels(&["a", "b", "c", "a", "b", "c"])),
            ("y", Column::from_f64(&[1., 2., 3., 4., 5., 7.])),
        ])
        .unwrap();
        let m = build(&ds, "y ~ g").unwrap();
        assert_eq!(m.p(), 3);
        assert_eq!(m.x_names, ["(Intercept)", "g[b]", "g[c]"]);
        let s = build_matrices(
            &ds,
            &parse_expanded("y ~ g").unwrap(),
            &ContrastScheme::Sum,
            &CenteringPolicy::none(),
        )
        .unwrap();
        assert_eq!(s.x.row(2).iter().copied().collect::<Vec<_>>(), [1., -1., -1.]);
        // no intercept: full indicator coding
        let m = build(&ds, "y ~ 0 + g").unwrap();
        assert_eq!(m.p(), 3);
    }

    #[test]
    fn power_after_centering() {
        let ds = Dataset::from_columns(vec![
            ("t", Column::from_f64(&[1., 2., 3., 4.])),
            ("g", Column::from_labels(&["a", "a", "b", "b"])),
            ("y", Column::from_f64(&[1., 2., 3., 5.])),
        ])
        .unwrap();
        let m = build_matrices(
            &ds,
            &parse_expanded("y ~ t + I(t^2)").unwrap(),
            &ContrastScheme::default(),
            &CenteringPolicy::none().with("t", Centering::AtMean),
        )
        .unwrap();
        for i in 0..4 {
            let c = (i as f64 + 1.0) - 2.5;
            assert_eq!(m.x[(i, 1)], c);
            assert_eq!(m.x[(i, 2)], c * c);
        }
        let m = build_matrices(
            &ds,
            &parse_expanded("y ~ t + I(t^2)").unwrap(),
            &ContrastScheme::default(),
            &CenteringPolicy::none().with("t", Centering::AtFirstObservation),
        )
        .unwrap();
        assert_eq!(m.x[(0, 1)], 0.0);
        assert_eq!(m.x[(3, 2)], 9.0);
    }

    #[test]
    fn slopes_block_structure() {
        let ds = Dataset::from_columns(vec![
            ("t", Column::from_f64(&[0., 1., 2., 0., 1., 2.])),
            ("s", Column::from_labels(&["a", "a", "a", "b", "b", "b"])),
            ("y", Column::from_f64(&[1., 2., 3., 2., 3., 5.])),
        ])
        .unwrap();
        let m = build(&ds, "y ~ t + (1 + t | s)").unwrap();
        let b = &m.z_blocks[0];
        assert_eq!(b.k(), 2);
        assert_eq!(b.n_effects(), 4);
        assert_eq!(m.n_theta(), 3);
        let z = m.z_dense();
        for r in 0..6 {
            let lvl = b.row_level[r];
            for c in 0..4 {
                if c / 2 != lvl {
                    assert_eq!(z[(r, c)], 0.0);
                }
            }
            assert_eq!(z[(r, lvl * 2)], 1.0);
            assert_eq!(z[(r, lvl * 2 + 1)], ds.column("t").unwrap().value(r).unwrap());
        }
        assert_eq!(b.term_label(), "((Intercept) | s)".replace("(Intercept)", "1 + t"));
    }

    #[test]
    fn errors() {
        let ds = heart();
        assert!(matches!(
            build(&ds, "heart_rate ~ 1 + condition + (1|heart_rate)"),
            Err(DesignError::GroupingNotFactor(_))
        ));
        let ds2 = Dataset::from_columns(vec![
            ("g", Column::from_labels(&["a", "a"])),
            ("h", Column::from_labels(&["u", "v"])),
            ("y", Column::from_f64(&[1., 2.])),
        ])
        .unwrap();
        assert!(matches!(
            build(&ds2, "y ~ 1 + (1|g)"),
            Err(DesignError::SingleLevelGrouping(_))
        ));
        let mut ds3 = heart();
        ds3.push_column("dup", Column::from_labels(&["ctl", "ex", "ctl", "ex"]))
            .unwrap();
        match build(&ds3, "heart_rate ~ condition + dup") {
            Err(DesignError::RankDeficient(cols)) => assert_eq!(cols, ["dup[ex]"]),
            other => panic!("{other:?}"),
        }
        let ds4 = Dataset::from_columns(vec![
            ("x", Column::numeric(vec![None, None])),
            ("y", Column::from_f64(&[1., 2.])),
        ])
        .unwrap();
        assert!(matches!(build(&ds4, "y ~ x"), Err(DesignError::NoRows { dropped: 2 })));
    }

    #[test]
    fn drops_missing_rows() {
        let ds = Dataset::from_columns(vec![
            ("x", Column::numeric(vec![Some(1.0), None, Some(3.0), Some(4.0)])),
            ("y", Column::from_f64(&[1., 2., 3., 5.])),
            ("unused", Column::numeric(vec![None, None, None, None])),
        ])
        .unwrap();
        let m = build(&ds, "y ~ x").unwrap();
        assert_eq!(m.n(), 3);
        assert_eq!(m.dropped_rows, vec![1]);
    }

    #[test]
    fn type3_under_treatment_matches_sum_block() {
        let ds = Dataset::from_columns(vec![
            ("a", Column::from_labels(&["p", "p", "q", "q", "p", "q"])),
            ("b", Column::from_labels(&["u", "v", "u", "v", "u", "v"])),
            ("y", Column::from_f64(&[1., 2., 3., 5., 2., 4.])),
        ])
        .unwrap();
        let m = build(&ds, "y ~ a*b").unwrap();
        assert_eq!(m.term_hypotheses.len(), 3);
        // each hypothesis has one row for two-level factors
        assert!(m.term_hypotheses.iter().all(|h| h.l.nrows() == 1));
    }
}
