//! Diagnosis of a proposed random-effects structure against the study
//! design, and a recommended structure.
//!
//! The design is summarised once ([`infer_design`]); linting then only looks
//! at the formula and the summary, it never fits a model.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::dataframe::{classify_relation, cross_tabulate, DataError, Dataset, FactorRelation};
use crate::formula::{FixedTerm, FormulaAst, RandomTerm, VarRef};

#[derive(Debug, Error)]
pub enum LintError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("subject column `{0}` needs at least 2 levels")]
    TooFewSubjects(String),
    #[error("column `{0}` is constant across all rows")]
    Constant(String),
}

/// How a factor relates to the subjects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum FactorRole {
    /// Varies within subjects (a treatment or time factor).
    Within,
    /// Constant within each subject.
    Between,
    /// Crossed with subjects but sampled from a population, each subject
    /// meeting each level about once (stimuli, items).
    Sampling,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FactorInfo {
    pub role: FactorRole,
    pub numeric: bool,
    /// Distinct observed values.
    pub levels: usize,
    /// Fraction of subjects observed at two or more levels.
    pub within_fraction: f64,
    /// Largest number of observations in one subject x factor cell.
    pub subject_cell_max: usize,
    pub asserted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DesignDeclaration {
    pub subject: String,
    pub n_subjects: usize,
    pub n_obs: usize,
    /// Candidate factors in the order given.
    pub order: Vec<String>,
    pub factors: BTreeMap<String, FactorInfo>,
    /// Largest number of observations in one subject x within-cell (within
    /// factors that are categorical).
    pub replicates: usize,
    /// Pairwise relations among the within factors.
    pub relations: Vec<(String, String, FactorRelation)>,
    /// `(inner, outer, relation of inner vs outer)` for asserted nesting.
    pub asserted_nesting: Vec<(String, String, FactorRelation)>,
    /// For sorted factor sets: observed level combinations and the largest
    /// cell count.
    combos: BTreeMap<String, (usize, usize)>,
}

fn combo_key(names: &[String]) -> String {
    let mut v: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
    v.sort_unstable();
    v.dedup();
    v.join(":")
}

fn row_keys(ds: &Dataset, name: &str) -> Result<Vec<Option<String>>, DataError> {
    let c = ds.column(name)?;
    Ok((0..ds.n_rows())
        .map(|r| {
            if c.is_factor() {
                c.label(r)
            } else {
                c.value(r).map(|v| v.to_string())
            }
        })
        .collect())
}

/// Summarise how each candidate factor relates to `subject`.
///
/// A factor is Within when at least 90% of subjects are seen at two or more
/// of its levels, else Between. A Within factor whose subject cells hold at
/// most one observation while another Within factor repeats within subjects
/// is a Sampling factor (at least 5 levels).
pub fn infer_design(
    ds: &Dataset,
    subject: &str,
    candidates: &[&str],
) -> Result<DesignDeclaration, LintError> {
    let subj = ds.factor(subject)?;
    let n = ds.n_rows();
    let subj_codes: Vec<Option<usize>> = (0..n).map(|r| subj.code(r)).collect();
    let mut observed: BTreeSet<usize> = BTreeSet::new();
    for c in subj_codes.iter().flatten() {
        observed.insert(*c);
    }
    let n_subjects = observed.len();
    if n_subjects < 2 {
        return Err(LintError::TooFewSubjects(subject.to_string()));
    }
    let mut keys: HashMap<String, Vec<Option<String>>> = HashMap::new();
    keys.insert(subject.to_string(), row_keys(ds, subject)?);
    let mut factors = BTreeMap::new();
    for &name in candidates {
        let col = ds.column(name)?;
        let k = row_keys(ds, name)?;
        let mut per_subject: HashMap<usize, BTreeSet<&str>> = HashMap::new();
        let mut cells: HashMap<(usize, &str), usize> = HashMap::new();
        let mut all: BTreeSet<&str> = BTreeSet::new();
        for r in 0..n {
            if let (Some(s), Some(v)) = (subj_codes[r], k[r].as_deref()) {
                per_subject.entry(s).or_default().insert(v);
                *cells.entry((s, v)).or_default() += 1;
                all.insert(v);
            }
        }
        if all.len() < 2 {
            return Err(LintError::Constant(name.to_string()));
        }
        let multi = per_subject.values().filter(|s| s.len() >= 2).count();
        let frac = multi as f64 / n_subjects as f64;
        factors.insert(
            name.to_string(),
            FactorInfo {
                role: if frac >= 0.9 {
                    FactorRole::Within
                } else {
                    FactorRole::Between
                },
                numeric: !col.is_factor(),
                levels: all.len(),
                within_fraction: frac,
                subject_cell_max: cells.values().copied().max().unwrap_or(0),
                asserted: false,
            },
        );
        keys.insert(name.to_string(), k);
    }
    let within_reps: Vec<(String, usize)> = factors
        .iter()
        .filter(|(_, f)| f.role == FactorRole::Within && !f.numeric)
        .map(|(n, f)| (n.clone(), f.subject_cell_max))
        .collect();
    for (name, cell_max) in &within_reps {
        let info = &factors[name];
        let others_repeat = within_reps.iter().any(|(o, m)| o != name && *m > 1);
        if *cell_max <= 1 && info.levels >= 5 && others_repeat {
            factors.get_mut(name).unwrap().role = FactorRole::Sampling;
        }
    }
    let mut decl = DesignDeclaration {
        subject: subject.to_string(),
        n_subjects,
        n_obs: n,
        order: candidates.iter().map(|s| s.to_string()).collect(),
        factors,
        replicates: 0,
        relations: Vec::new(),
        asserted_nesting: Vec::new(),
        combos: BTreeMap::new(),
    };
    decl.refresh(ds, &keys)?;
    Ok(decl)
}

impl DesignDeclaration {
    /// Recompute role-dependent summaries.
    fn refresh(
        &mut self,
        ds: &Dataset,
        keys: &HashMap<String, Vec<Option<String>>>,
    ) -> Result<(), LintError> {
        let n = ds.n_rows();
        let within = self.within_factors();
        let count_cells = |names: &[String]| -> (usize, usize) {
            let mut cells: HashMap<Vec<&str>, usize> = HashMap::new();
            'rows: for r in 0..n {
                let mut key = Vec::with_capacity(names.len());
                for nm in names {
                    match keys[nm][r].as_deref() {
                        Some(v) => key.push(v),
                        None => continue 'rows,
                    }
                }
                *cells.entry(key).or_default() += 1;
            }
            (cells.len(), cells.values().copied().max().unwrap_or(0))
        };
        let mut full = vec![self.subject.clone()];
        full.extend(within.iter().cloned());
        self.replicates = count_cells(&full).1;

        // every subset of subject + candidates up to size 4
        let mut universe = vec![self.subject.clone()];
        universe.extend(self.order.iter().cloned());
        let m = universe.len();
        self.combos.clear();
        for mask in 1usize..(1 << m.min(16)) {
            if mask.count_ones() > 4 {
                continue;
            }
            let names: Vec<String> = (0..m)
                .filter(|i| mask >> i & 1 == 1)
                .map(|i| universe[i].clone())
                .collect();
            self.combos.insert(combo_key(&names), count_cells(&names));
        }

        self.relations.clear();
        for (i, a) in within.iter().enumerate() {
            for b in &within[i + 1..] {
                let rel = classify_relation(&cross_tabulate(ds, a, b)?)?;
                self.relations.push((a.clone(), b.clone(), rel));
            }
        }
        Ok(())
    }

    /// Override an inferred role (e.g. declare `stimulus` as Sampling).
    pub fn assert_role(&mut self, ds: &Dataset, name: &str, role: FactorRole) -> Result<(), LintError> {
        let info = self
            .factors
            .get_mut(name)
            .ok_or_else(|| DataError::UnknownColumn(name.to_string()))?;
        info.role = role;
        info.asserted = true;
        let mut keys = HashMap::new();
        keys.insert(self.subject.clone(), row_keys(ds, &self.subject)?);
        for f in &self.order {
            keys.insert(f.clone(), row_keys(ds, f)?);
        }
        self.refresh(ds, &keys)
    }

    /// Record that the study design nests `inner` within `outer`; the coded
    /// relation is checked by the linter.
    pub fn assert_nested(&mut self, ds: &Dataset, inner: &str, outer: &str) -> Result<(), LintError> {
        let rel = classify_relation(&cross_tabulate(ds, inner, outer)?)?;
        self.asserted_nesting
            .push((inner.to_string(), outer.to_string(), rel));
        Ok(())
    }

    pub fn role(&self, name: &str) -> Option<FactorRole> {
        self.factors.get(name).map(|f| f.role)
    }

    /// Categorical Within factors in candidate order.
    pub fn within_factors(&self) -> Vec<String> {
        self.order
            .iter()
            .filter(|n| {
                let f = &self.factors[*n];
                f.role == FactorRole::Within && !f.numeric
            })
            .cloned()
            .collect()
    }

    fn numeric_within(&self) -> Vec<String> {
        self.order
            .iter()
            .filter(|n| {
                let f = &self.factors[*n];
                f.role == FactorRole::Within && f.numeric
            })
            .cloned()
            .collect()
    }

    fn sampling_factors(&self) -> Vec<String> {
        self.order
            .iter()
            .filter(|n| self.factors[*n].role == FactorRole::Sampling)
            .cloned()
            .collect()
    }

    /// Observed levels and largest cell count for a set of factors.
    pub fn combo(&self, names: &[String]) -> Option<(usize, usize)> {
        self.combos.get(&combo_key(names)).copied()
    }

    fn levels_of(&self, name: &str) -> Option<usize> {
        if name == self.subject {
            return Some(self.n_subjects);
        }
        self.factors.get(name).map(|f| f.levels)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum Severity {
    Error,
    Warning,
    Info,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum FindingCode {
    UnderSpecified,
    MisSpecified,
    OverSpecified,
    AmbiguousNesting,
    SparseGroups,
    MissingRandomIntercept,
    ReplicatesUnused,
    BorderlineRole,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LintFinding {
    pub severity: Severity,
    pub code: FindingCode,
    pub columns: Vec<String>,
    pub message: String,
    pub suggestion: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Verdict {
    Pass,
    PassWithWarnings,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LintReport {
    pub verdict: Verdict,
    pub findings: Vec<LintFinding>,
    pub recommended: String,
}

impl LintReport {
    pub fn codes(&self) -> Vec<FindingCode> {
        self.findings.iter().map(|f| f.code).collect()
    }

    pub fn count(&self, code: FindingCode) -> usize {
        self.findings.iter().filter(|f| f.code == code).count()
    }
}

impl fmt::Display for LintReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = match self.verdict {
            Verdict::Pass => "PASS",
            Verdict::PassWithWarnings => "PASS (with warnings)",
            Verdict::Fail => "FAIL",
        };
        writeln!(f, "Verdict: {verdict}")?;
        for x in &self.findings {
            let sev = match x.severity {
                Severity::Error => "error",
                Severity::Warning => "warning",
                Severity::Info => "info",
            };
            writeln!(f, "{sev} [{:?}] {}", x.code, x.message)?;
            if !x.suggestion.is_empty() {
                writeln!(f, "    suggestion: {}", x.suggestion)?;
            }
        }
        writeln!(f, "Recommended random effects: {}", self.recommended)
    }
}

fn grouped_by_subject(term: &RandomTerm, design: &DesignDeclaration) -> bool {
    let g = term.group_factors();
    g.contains(&design.subject)
        && g.iter().all(|f| {
            *f == design.subject
                || matches!(design.role(f), Some(FactorRole::Between) | None)
        })
}

/// Number of inner columns of a random term, following the contrast rule
/// used when building the design.
fn inner_width(term: &RandomTerm, design: &DesignDeclaration) -> usize {
    let terms = term.inner_terms();
    let mut k = usize::from(term.intercept);
    for t in &terms {
        let mut w = 1;
        for v in &t.vars {
            let numeric = design.factors.get(&v.name).map(|f| f.numeric).unwrap_or(true);
            if numeric {
                continue;
            }
            let levels = design.levels_of(&v.name).unwrap_or(2);
            let rest: Vec<VarRef> = t.vars.iter().filter(|w| *w != v).cloned().collect();
            let margin = if rest.is_empty() {
                term.intercept
            } else {
                let r = FixedTerm::new(rest);
                terms.iter().any(|u| u.same_as(&r))
            };
            w *= if margin { levels - 1 } else { levels };
        }
        k += w;
    }
    k
}

/// Apply the structure rules to an expanded formula.
pub fn lint_structure(ast: &FormulaAst, design: &DesignDeclaration) -> LintReport {
    let mut findings = Vec::new();
    let subject = &design.subject;
    let recommended = recommend_structure(design);

    // R1
    if !ast.random.iter().any(|t| grouped_by_subject(t, design)) {
        findings.push(LintFinding {
            severity: Severity::Error,
            code: FindingCode::MissingRandomIntercept,
            columns: vec![subject.clone()],
            message: format!(
                "no random term is grouped by `{subject}`; repeated observations of the same \
                 subject are treated as independent"
            ),
            suggestion: format!("(1|{subject})"),
        });
    }

    // R2
    for w in design.within_factors() {
        let cell = design.factors[&w].subject_cell_max;
        if cell < 2 {
            continue;
        }
        let has_intercept = ast.random.iter().any(|t| {
            let g = t.group_factors();
            g.len() == 2 && g.contains(subject) && g.contains(&w)
        });
        let has_slope = ast
            .random
            .iter()
            .any(|t| grouped_by_subject(t, design) && t.has_slope_on(&w));
        if !has_intercept && !has_slope {
            findings.push(LintFinding {
                severity: Severity::Warning,
                code: FindingCode::UnderSpecified,
                columns: vec![w.clone(), subject.clone()],
                message: format!(
                    "within-subject factor `{w}` has up to {cell} observations per {subject} \
                     x {w} cell, but nothing models how its effect varies across subjects; \
                     the denominator degrees of freedom for `{w}` will be inflated"
                ),
                suggestion: format!("(1|{subject}:{w})"),
            });
        }
    }
    for name in &design.order {
        let info = &design.factors[name];
        if info.role == FactorRole::Within && info.numeric && info.subject_cell_max <= 1 {
            let has_slope = ast
                .random
                .iter()
                .any(|t| grouped_by_subject(t, design) && t.has_slope_on(name));
            if !has_slope {
                findings.push(LintFinding {
                    severity: Severity::Warning,
                    code: FindingCode::UnderSpecified,
                    columns: vec![name.clone(), subject.clone()],
                    message: format!(
                        "`{name}` varies within subjects but no random slope on `{name}` is \
                         grouped by `{subject}`"
                    ),
                    suggestion: format!("(1 + {name}|{subject})"),
                });
            }
        }
    }

    // R3
    let mut misspecified = BTreeSet::new();
    for t in &ast.random {
        let g = t.group_factors();
        if g.len() == 1 && design.role(&g[0]) == Some(FactorRole::Within) {
            let w = &g[0];
            misspecified.insert(w.clone());
            findings.push(LintFinding {
                severity: Severity::Warning,
                code: FindingCode::MisSpecified,
                columns: vec![w.clone()],
                message: format!(
                    "`(1|{w})` treats `{w}` as a sampled grouping factor, but `{w}` is only \
                     crossed with the outcome within each subject; its levels are fixed \
                     conditions, not a sample"
                ),
                suggestion: format!("(1|{subject}:{w})"),
            });
        }
    }

    // R4
    for t in &ast.random {
        let g = t.group_factors();
        let levels = design
            .combo(&g)
            .map(|(l, _)| l)
            .or_else(|| (g.len() == 1).then(|| design.levels_of(&g[0])).flatten());
        if let Some(l) = levels {
            let n_effects = inner_width(t, design) * l;
            if n_effects >= design.n_obs {
                findings.push(LintFinding {
                    severity: Severity::Error,
                    code: FindingCode::OverSpecified,
                    columns: g.clone(),
                    message: format!(
                        "number of observations ({}) <= number of random effects ({n_effects}) \
                         for term {}; the random-effects parameters and the residual variance \
                         are probably unidentifiable",
                        design.n_obs,
                        term_text(t)
                    ),
                    suggestion: recommended.clone(),
                });
            }
        }
    }

    // R5
    let mut seen = BTreeSet::new();
    for t in &ast.random {
        let g = t.group_factors();
        let label = g.join(":");
        if g.len() == 1 && misspecified.contains(&g[0]) || !seen.insert(label.clone()) {
            continue;
        }
        let levels = design
            .combo(&g)
            .map(|(l, _)| l)
            .or_else(|| (g.len() == 1).then(|| design.levels_of(&g[0])).flatten());
        if let Some(l) = levels {
            if l < 5 {
                findings.push(LintFinding {
                    severity: Severity::Warning,
                    code: FindingCode::SparseGroups,
                    columns: g.clone(),
                    message: format!(
                        "grouping factor `{label}` has only {l} levels, too few to estimate \
                         a variance reliably"
                    ),
                    suggestion: format!("consider `{label}` as a fixed effect"),
                });
            }
        }
    }

    // R6
    for (inner, outer, rel) in &design.asserted_nesting {
        let coded_nested = *rel == FactorRelation::NestedAinB;
        let uses_inner_alone = ast.random.iter().any(|t| {
            let g = t.group_factors();
            g.len() == 1 && g[0] == *inner
        });
        if !coded_nested && uses_inner_alone {
            findings.push(LintFinding {
                severity: Severity::Warning,
                code: FindingCode::AmbiguousNesting,
                columns: vec![inner.clone(), outer.clone()],
                message: format!(
                    "`{inner}` is declared nested within `{outer}` but its labels are reused \
                     across `{outer}` levels, so `(1|{inner})` pools different units"
                ),
                suggestion: format!("(1|{outer}/{inner})"),
            });
        }
    }

    // R7
    if design.replicates > 1 {
        for w in design.within_factors() {
            let has_slope = ast
                .random
                .iter()
                .any(|t| grouped_by_subject(t, design) && t.has_slope_on(&w));
            if !has_slope {
                findings.push(LintFinding {
                    severity: Severity::Info,
                    code: FindingCode::ReplicatesUnused,
                    columns: vec![w.clone()],
                    message: format!(
                        "there are up to {} observations per subject x within-cell; a random \
                         slope for `{w}` by `{subject}` is estimable",
                        design.replicates
                    ),
                    suggestion: format!("(1 + {w}|{subject})"),
                });
            }
        }
    }

    for name in &design.order {
        let info = &design.factors[name];
        if !info.asserted && info.within_fraction > 0.0 && info.within_fraction < 1.0 {
            findings.push(LintFinding {
                severity: Severity::Info,
                code: FindingCode::BorderlineRole,
                columns: vec![name.clone()],
                message: format!(
                    "{:.0}% of subjects are observed at two or more levels of `{name}`; \
                     classified as {:?}",
                    info.within_fraction * 100.0,
                    info.role
                ),
                suggestion: String::new(),
            });
        }
    }

    findings.sort_by_key(|f| f.severity);
    let verdict = if findings.iter().any(|f| f.severity == Severity::Error) {
        Verdict::Fail
    } else if findings.iter().any(|f| f.severity == Severity::Warning) {
        Verdict::PassWithWarnings
    } else {
        Verdict::Pass
    };
    LintReport {
        verdict,
        findings,
        recommended,
    }
}

fn term_text(t: &RandomTerm) -> String {
    let ast = FormulaAst {
        response: crate::formula::Response {
            column: "y".into(),
            log: false,
        },
        intercept: false,
        fixed: Vec::new(),
        random: vec![t.clone()],
    };
    let s = ast.to_string();
    s.split_once('~')
        .map(|(_, r)| r.trim().trim_start_matches("0 +").trim().to_string())
        .unwrap_or(s)
}

/// Random-effects part suited to the design.
///
/// One observation per within-cell: subject intercepts plus a
/// `(1|subject:W)` intercept per repeated within factor (and pairwise
/// interactions once there are three or more). Replicated cells: random
/// slopes by subject. Numeric within variables always get slopes, sampling
/// factors get their own intercept.
pub fn recommend_structure(design: &DesignDeclaration) -> String {
    let subject = &design.subject;
    let mut within = design.within_factors();
    within.sort();
    let mut slopes = design.numeric_within();
    slopes.sort();
    let mut terms = Vec::new();
    let mut extra = Vec::new();
    if design.replicates > 1 {
        slopes.extend(within.iter().cloned());
    } else {
        for w in &within {
            if design.factors[w].subject_cell_max >= 2 {
                extra.push(format!("(1|{subject}:{w})"));
            }
        }
        if within.len() >= 3 {
            for (i, a) in within.iter().enumerate() {
                for b in &within[i + 1..] {
                    let set = [subject.clone(), a.clone(), b.clone()];
                    if design.combo(&set).is_some_and(|(_, m)| m >= 2) {
                        extra.push(format!("(1|{subject}:{a}:{b})"));
                    }
                }
            }
        }
    }
    if slopes.is_empty() {
        terms.push(format!("(1|{subject})"));
    } else {
        terms.push(format!("(1+{}|{subject})", slopes.join("+")));
    }
    terms.extend(extra);
    let mut sampling = design.sampling_factors();
    sampling.sort();
    for s in sampling {
        terms.push(format!("(1|{s})"));
    }
    terms.join(" + ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataframe::Column;
    use crate::formula::parse_expanded;

    fn factorial(reps: usize) -> Dataset {
        let (mut s, mut a, mut c, mut y) = (vec![], vec![], vec![], vec![]);
        let mut v = 0.0;
        for i in 0..10 {
            for al in ["high", "low"] {
                for co in ["delay", "imm", "rest"] {
                    for _ in 0..reps {
                        s.push(format!("S{i:02}"));
                        a.push(al.to_string());
                        c.push(co.to_string());
                        v += 1.0;
                        y.push(v);
                    }
                }
            }
        }
        Dataset::from_columns(vec![
            ("subject", Column::from_labels(&s)),
            ("altitude", Column::from_labels(&a)),
            ("condition", Column::from_labels(&c)),
            ("hr", Column::from_f64(&y)),
        ])
        .unwrap()
    }

    #[test]
    fn roles_and_replicates() {
        let ds = factorial(1);
        let d = infer_design(&ds, "subject", &["altitude", "condition"]).unwrap();
        assert_eq!(d.role("altitude"), Some(FactorRole::Within));
        assert_eq!(d.role("condition"), Some(FactorRole::Within));
        assert_eq!(d.replicates, 1);
        assert_eq!(
            recommend_structure(&d),
            "(1|subject) + (1|subject:altitude) + (1|subject:condition)"
        );
        let d2 = infer_design(&factorial(2), "subject", &["altitude", "condition"]).unwrap();
        assert_eq!(d2.replicates, 2);
        assert_eq!(recommend_structure(&d2), "(1+altitude+condition|subject)");
    }

    #[test]
    fn option_e_width() {
        let ds = factorial(1);
        let d = infer_design(&ds, "subject", &["altitude", "condition"]).unwrap();
        let ast = parse_expanded("hr ~ condition*altitude + (1 + condition*altitude|subject)").unwrap();
        assert_eq!(inner_width(&ast.random[0], &d), 6);
        let r = lint_structure(&ast, &d);
        assert_eq!(r.verdict, Verdict::Fail);
        assert_eq!(r.codes(), vec![FindingCode::OverSpecified]);
    }
}
