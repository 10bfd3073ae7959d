//! Columnar datasets with numeric and factor columns.
//!
//! Missing cells are tracked by an explicit per-cell mask. Factor levels are
//! kept in ascending byte order, so the first level of a factor is the one a
//! treatment contrast uses as its reference.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
    #[error("line {line}: expected {expected} fields, found {found}")]
    Ragged {
        line: u64,
        expected: usize,
        found: usize,
    },
    #[error("duplicate column name `{0}` in header")]
    DuplicateColumn(String),
    #[error("unknown column `{0}`")]
    UnknownColumn(String),
    #[error("column `{0}` is not a factor")]
    NotFactor(String),
    #[error("column `{0}` is not numeric")]
    NotNumeric(String),
    #[error("column `{name}` has {found} entries, dataset has {expected} rows")]
    LengthMismatch {
        name: String,
        expected: usize,
        found: usize,
    },
    #[error("column `{column}` row {row}: value `{value}` is not a finite number")]
    BadNumber {
        column: String,
        row: usize,
        value: String,
    },
    #[error("cross-tabulation of `{0}` by `{1}` has no observations")]
    EmptyTable(String, String),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Type hint used to override inference in [`read_csv`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColumnType {
    Numeric,
    Factor,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ColumnData {
    Numeric(Vec<f64>),
    Factor { levels: Vec<String>, codes: Vec<u32> },
}

/// A single column plus its missing-value mask.
///
/// Missing numeric cells hold `0.0` and missing factor cells hold code `0`;
/// neither value is meaningful, only the mask is.
#[derive(Debug, Clone, PartialEq)]
pub struct Column {
    data: ColumnData,
    missing: Vec<bool>,
}

impl Column {
    /// Numeric column; `None` marks a missing cell. Non-finite values are
    /// treated as missing.
    pub fn numeric<I: IntoIterator<Item = Option<f64>>>(values: I) -> Self {
        let mut data = Vec::new();
        let mut missing = Vec::new();
        for v in values {
            match v {
                Some(x) if x.is_finite() => {
                    data.push(x);
                    missing.push(false);
                }
                _ => {
                    data.push(0.0);
                    missing.push(true);
                }
            }
        }
        Column {
            data: ColumnData::Numeric(data),
            missing,
        }
    }

    pub fn from_f64(values: &[f64]) -> Self {
        Self::numeric(values.iter().map(|&v| Some(v)))
    }

    /// Factor column from per-row labels. Levels are the distinct observed
    /// labels in ascending order.
    pub fn factor<S: AsRef<str>, I: IntoIterator<Item = Option<S>>>(labels: I) -> Self {
        let labels: Vec<Option<String>> = labels
            .into_iter()
            .map(|l| l.map(|s| s.as_ref().to_string()))
            .collect();
        let levels: Vec<String> = labels
            .iter()
            .flatten()
            .cloned()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        Self::factor_with_levels(labels, levels)
    }

    pub fn from_labels<S: AsRef<str>>(labels: &[S]) -> Self {
        Self::factor(labels.iter().map(|s| Some(s.as_ref())))
    }

    fn factor_with_levels(labels: Vec<Option<String>>, levels: Vec<String>) -> Self {
        let index: HashMap<&str, u32> = levels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.as_str(), i as u32))
            .collect();
        let mut codes = Vec::with_capacity(labels.len());
        let mut missing = Vec::with_capacity(labels.len());
        for l in &labels {
            match l {
                Some(s) => {
                    codes.push(index[s.as_str()]);
                    missing.push(false);
                }
                None => {
                    codes.push(0);
                    missing.push(true);
                }
            }
        }
        Column {
            data: ColumnData::Factor { levels, codes },
            missing,
        }
    }

    pub fn len(&self) -> usize {
        self.missing.len()
    }

    pub fn is_empty(&self) -> bool {
        self.missing.is_empty()
    }

    pub fn data(&self) -> &ColumnData {
        &self.data
    }

    pub fn is_missing(&self, row: usize) -> bool {
        self.missing[row]
    }

    pub fn missing_count(&self) -> usize {
        self.missing.iter().filter(|&&m| m).count()
    }

    pub fn is_factor(&self) -> bool {
        matches!(self.data, ColumnData::Factor { .. })
    }

    pub fn column_type(&self) -> ColumnType {
        if self.is_factor() {
            ColumnType::Factor
        } else {
            ColumnType::Numeric
        }
    }

    /// Factor levels, or `None` for numeric columns.
    pub fn levels(&self) -> Option<&[String]> {
        match &self.data {
            ColumnData::Factor { levels, .. } => Some(levels),
            ColumnData::Numeric(_) => None,
        }
    }

    /// Level index of a factor cell, `None` if missing or numeric.
    pub fn code(&self, row: usize) -> Option<usize> {
        match &self.data {
            ColumnData::Factor { codes, .. } if !self.missing[row] => Some(codes[row] as usize),
            _ => None,
        }
    }

    /// Numeric value, `None` if missing or a factor.
    pub fn value(&self, row: usize) -> Option<f64> {
        match &self.data {
            ColumnData::Numeric(v) if !self.missing[row] => Some(v[row]),
            _ => None,
        }
    }

    /// Cell rendered as text; `None` if missing.
    pub fn label(&self, row: usize) -> Option<String> {
        if self.missing[row] {
            return None;
        }
        Some(match &self.data {
            ColumnData::Numeric(v) => format_number(v[row]),
            ColumnData::Factor { levels, codes } => levels[codes[row] as usize].clone(),
        })
    }

    /// Reinterpret as a factor (numeric cells become their text labels).
    pub fn to_factor(&self) -> Column {
        match &self.data {
            ColumnData::Factor { .. } => self.clone(),
            ColumnData::Numeric(_) => Column::factor((0..self.len()).map(|i| self.label(i))),
        }
    }

    /// Subset of rows, in the given order. Factor level tables are kept.
    pub fn take(&self, rows: &[usize]) -> Column {
        let missing = rows.iter().map(|&r| self.missing[r]).collect();
        let data = match &self.data {
            ColumnData::Numeric(v) => ColumnData::Numeric(rows.iter().map(|&r| v[r]).collect()),
            ColumnData::Factor { levels, codes } => ColumnData::Factor {
                levels: levels.clone(),
                codes: rows.iter().map(|&r| codes[r]).collect(),
            },
        };
        Column { data, missing }
    }
}

fn format_number(x: f64) -> String {
    // Shortest representation that parses back to the same f64.
    format!("{x}")
}

/// Ordered collection of equally long named columns.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    names: Vec<String>,
    columns: Vec<Column>,
    n_rows: usize,
}

impl Dataset {
    /// Empty dataset with a fixed row count.
    pub fn with_rows(n_rows: usize) -> Self {
        Dataset {
            names: Vec::new(),
            columns: Vec::new(),
            n_rows,
        }
    }

    /// Build from (name, column) pairs. All columns must have the same length.
    pub fn from_columns<S: Into<String>>(cols: Vec<(S, Column)>) -> Result<Self> {
        let n = cols.first().map(|(_, c)| c.len()).unwrap_or(0);
        let mut ds = Dataset::with_rows(n);
        for (name, col) in cols {
            ds.push_column(name, col)?;
        }
        Ok(ds)
    }

    /// Append a column, replacing any existing column of the same name.
    pub fn push_column<S: Into<String>>(&mut self, name: S, col: Column) -> Result<()> {
        let name = name.into();
        if self.columns.is_empty() && self.n_rows == 0 {
            self.n_rows = col.len();
        }
        if col.len() != self.n_rows {
            return Err(DataError::LengthMismatch {
                name,
                expected: self.n_rows,
                found: col.len(),
            });
        }
        if let Some(i) = self.names.iter().position(|n| *n == name) {
            self.columns[i] = col;
        } else {
            self.names.push(name);
            self.columns.push(col);
        }
        Ok(())
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn has_column(&self, name: &str) -> bool {
        self.names.iter().any(|n| n == name)
    }

    pub fn column(&self, name: &str) -> Result<&Column> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.columns[i])
            .ok_or_else(|| DataError::UnknownColumn(name.to_string()))
    }

    pub fn factor(&self, name: &str) -> Result<&Column> {
        let c = self.column(name)?;
        if c.is_factor() {
            Ok(c)
        } else {
            Err(DataError::NotFactor(name.to_string()))
        }
    }

    pub fn columns(&self) -> impl Iterator<Item = (&str, &Column)> {
        self.names.iter().map(|s| s.as_str()).zip(self.columns.iter())
    }

    /// Row subset in the given order.
    pub fn take_rows(&self, rows: &[usize]) -> Dataset {
        Dataset {
            names: self.names.clone(),
            columns: self.columns.iter().map(|c| c.take(rows)).collect(),
            n_rows: rows.len(),
        }
    }

    /// Write as CSV with a header row; missing cells are empty.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(&self.names)?;
        for row in 0..self.n_rows {
            let rec: Vec<String> = self
                .columns
                .iter()
                .map(|c| c.label(row).unwrap_or_default())
                .collect();
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| DataError::Io {
            path: "<writer>".into(),
            source: e,
        })?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("CSV output is UTF-8")
    }
}

/// Per-read bookkeeping reported by [`read_csv`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReadSummary {
    pub n_rows: usize,
    /// Number of empty (missing) cells per column.
    pub missing_cells: BTreeMap<String, usize>,
}

/// Read a CSV file with a header row. Columns whose non-missing cells all
/// parse as finite numbers become numeric, everything else a factor, unless
/// `overrides` says otherwise. Empty cells and `NA` are missing.
pub fn read_csv<P: AsRef<Path>>(
    path: P,
    overrides: &HashMap<String, ColumnType>,
) -> Result<(Dataset, ReadSummary)> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    read_csv_from(file, overrides)
}

pub fn read_csv_str(text: &str, overrides: &HashMap<String, ColumnType>) -> Result<Dataset> {
    read_csv_from(text.as_bytes(), overrides).map(|(d, _)| d)
}

pub fn read_csv_from<R: Read>(
    reader: R,
    overrides: &HashMap<String, ColumnType>,
) -> Result<(Dataset, ReadSummary)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let header: Vec<String> = rdr
        .headers()?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let mut seen = BTreeSet::new();
    for h in &header {
        if !seen.insert(h.as_str()) {
            return Err(DataError::DuplicateColumn(h.clone()));
        }
    }
    for name in overrides.keys() {
        if !header.contains(name) {
            return Err(DataError::UnknownColumn(name.clone()));
        }
    }
    let mut cells: Vec<Vec<Option<String>>> = vec![Vec::new(); header.len()];
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() != header.len() {
            return Err(DataError::Ragged {
                line: rec.position().map(|p| p.line()).unwrap_or(0),
                expected: header.len(),
                found: rec.len(),
            });
        }
        for (j, field) in rec.iter().enumerate() {
            let f = field.trim();
            cells[j].push(if f.is_empty() || f == "NA" {
                None
            } else {
                Some(f.to_string())
            });
        }
    }
    let n_rows = cells.first().map(|c| c.len()).unwrap_or(0);
    let mut ds = Dataset::with_rows(n_rows);
    let mut missing_cells = BTreeMap::new();
    for (name, col_cells) in header.into_iter().zip(cells) {
        let parsed: Option<Vec<Option<f64>>> = col_cells
            .iter()
            .map(|c| match c {
                None => Some(None),
                Some(s) => s.parse::<f64>().ok().filter(|v| v.is_finite()).map(Some),
            })
            .collect();
        let kind = overrides.get(&name).copied().unwrap_or(if parsed.is_some() {
            ColumnType::Numeric
        } else {
            ColumnType::Factor
        });
        let col = match kind {
            ColumnType::Numeric => match parsed {
                Some(values) => Column::numeric(values),
                None => {
                    let (row, value) = col_cells
                        .iter()
                        .enumerate()
                        .find_map(|(i, c)| {
                            c.as_ref()
                                .filter(|s| !s.parse::<f64>().is_ok_and(|v| v.is_finite()))
                                .map(|s| (i, s.clone()))
                        })
                        .expect("a non-numeric cell exists");
                    return Err(DataError::BadNumber {
                        column: name,
                        row,
                        value,
                    });
                }
            },
            ColumnType::Factor => Column::factor(col_cells),
        };
        missing_cells.insert(name.clone(), col.missing_count());
        ds.push_column(name, col)?;
    }
    Ok((
        ds,
        ReadSummary {
            n_rows,
            missing_cells,
        },
    ))
}

/// Observation counts for every (row level, column level) pair of two factors.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IncidenceMatrix {
    pub row_factor: String,
    pub col_factor: String,
    pub row_levels: Vec<String>,
    pub col_levels: Vec<String>,
    /// `counts[i][j]` = rows with row level `i` and column level `j`.
    pub counts: Vec<Vec<usize>>,
}

impl IncidenceMatrix {
    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn transpose(&self) -> IncidenceMatrix {
        let counts = (0..self.col_levels.len())
            .map(|j| self.counts.iter().map(|r| r[j]).collect())
            .collect();
        IncidenceMatrix {
            row_factor: self.col_factor.clone(),
            col_factor: self.row_factor.clone(),
            row_levels: self.col_levels.clone(),
            col_levels: self.row_levels.clone(),
            counts,
        }
    }
}

impl fmt::Display for IncidenceMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self
            .col_levels
            .iter()
            .map(|l| l.len())
            .chain(self.counts.iter().flatten().map(|c| c.to_string().len()))
            .max()
            .unwrap_or(1);
        let lead = self
            .row_levels
            .iter()
            .map(|l| l.len())
            .chain(std::iter::once(self.row_factor.len()))
            .max()
            .unwrap_or(1);
        write!(f, "{:<lead$}", self.row_factor)?;
        for c in &self.col_levels {
            write!(f, " {c:>width$}")?;
        }
        writeln!(f)?;
        for (r, row) in self.row_levels.iter().zip(&self.counts) {
            write!(f, "{r:<lead$}")?;
            for c in row {
                write!(f, " {c:>width$}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Relationship between the row factor (A) and column factor (B) of an
/// incidence matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum FactorRelation {
    /// Every level of A occurs with exactly one level of B.
    NestedAinB,
    /// Every level of B occurs with exactly one level of A.
    NestedBinA,
    FullyCrossed,
    PartiallyCrossed,
}

impl FactorRelation {
    /// The same relation seen from the transposed table.
    pub fn flipped(self) -> Self {
        match self {
            FactorRelation::NestedAinB => FactorRelation::NestedBinA,
            FactorRelation::NestedBinA => FactorRelation::NestedAinB,
            other => other,
        }
    }

    /// Human-readable description, e.g. `Nested: student within classroom`.
    pub fn describe(self, a: &str, b: &str) -> String {
        match self {
            FactorRelation::NestedAinB => format!("Nested: {a} within {b}"),
            FactorRelation::NestedBinA => format!("Nested: {b} within {a}"),
            FactorRelation::FullyCrossed => format!("Fully crossed: {a} x {b}"),
            FactorRelation::PartiallyCrossed => format!("Partially crossed: {a} x {b}"),
        }
    }
}

/// Cross-tabulate two factors. Rows missing either value are skipped.
pub fn cross_tabulate(ds: &Dataset, a: &str, b: &str) -> Result<IncidenceMatrix> {
    let ca = ds.factor(a)?;
    let cb = ds.factor(b)?;
    let la = ca.levels().unwrap_or_default().to_vec();
    let lb = cb.levels().unwrap_or_default().to_vec();
    let mut counts = vec![vec![0usize; lb.len()]; la.len()];
    for row in 0..ds.n_rows() {
        if let (Some(i), Some(j)) = (ca.code(row), cb.code(row)) {
            counts[i][j] += 1;
        }
    }
    Ok(IncidenceMatrix {
        row_factor: a.to_string(),
        col_factor: b.to_string(),
        row_levels: la,
        col_levels: lb,
        counts,
    })
}

/// Classify the relation between the two factors of an incidence matrix.
///
/// Levels without any observation are ignored. When nesting holds in both
/// directions (a one-to-one relabelling) the result is `FullyCrossed`.
pub fn classify_relation(inc: &IncidenceMatrix) -> Result<FactorRelation> {
    if inc.total() == 0 {
        return Err(DataError::EmptyTable(
            inc.row_factor.clone(),
            inc.col_factor.clone(),
        ));
    }
    let nrow = inc.row_levels.len();
    let ncol = inc.col_levels.len();
    let row_nonzero: Vec<usize> = (0..nrow)
        .map(|i| inc.counts[i].iter().filter(|&&c| c > 0).count())
        .collect();
    let col_nonzero: Vec<usize> = (0..ncol)
        .map(|j| (0..nrow).filter(|&i| inc.counts[i][j] > 0).count())
        .collect();
    let a_in_b = row_nonzero.iter().filter(|&&c| c > 0).all(|&c| c == 1);
    let b_in_a = col_nonzero.iter().filter(|&&c| c > 0).all(|&c| c == 1);
    Ok(match (a_in_b, b_in_a) {
        (true, false) => FactorRelation::NestedAinB,
        (false, true) => FactorRelation::NestedBinA,
        (true, true) => FactorRelation::FullyCrossed,
        (false, false) => {
            let used_rows: Vec<usize> = (0..nrow).filter(|&i| row_nonzero[i] > 0).collect();
            let used_cols: Vec<usize> = (0..ncol).filter(|&j| col_nonzero[j] > 0).collect();
            let full = used_rows
                .iter()
                .all(|&i| used_cols.iter().all(|&j| inc.counts[i][j] > 0));
            if full {
                FactorRelation::FullyCrossed
            } else {
                FactorRelation::PartiallyCrossed
            }
        }
    })
}

/// Per-row concatenation of two factors' labels, e.g. `C1:S2`. Only observed
/// combinations become levels.
pub fn concat_factors(ds: &Dataset, a: &str, b: &str, sep: &str) -> Result<Column> {
    let names = [a, b];
    concat_many(ds, &names, sep)
}

/// Concatenation over any number of factors (the grouping factor of
/// `(1|a:b:c)`).
pub fn concat_many(ds: &Dataset, factors: &[&str], sep: &str) -> Result<Column> {
    let cols = factors
        .iter()
        .map(|f| ds.factor(f))
        .collect::<Result<Vec<_>>>()?;
    let labels = (0..ds.n_rows()).map(|row| {
        let mut parts = Vec::with_capacity(cols.len());
        for c in &cols {
            parts.push(c.label(row)?);
        }
        Some(parts.join(sep))
    });
    Ok(Column::factor(labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fig3(rows: &[(&str, &str)]) -> Dataset {
        let c: Vec<&str> = rows.iter().map(|r| r.0).collect();
        let s: Vec<&str> = rows.iter().map(|r| r.1).collect();
        Dataset::from_columns(vec![
            ("classroom", Column::from_labels(&c)),
            ("student", Column::from_labels(&s)),
        ])
        .unwrap()
    }

    #[test]
    fn heart_rate_file_types() {
        let text = "subject,condition,heart_rate\ns1,ctl,60\ns1,ex,72\ns2,ctl,42\ns2,ex,50\n";
        let ds = read_csv_str(text, &HashMap::new()).unwrap();
        assert_eq!(ds.n_rows(), 4);
        assert_eq!(ds.column("subject").unwrap().levels().unwrap(), ["s1", "s2"]);
        assert_eq!(ds.column("condition").unwrap().levels().unwrap(), ["ctl", "ex"]);
        let hr = ds.column("heart_rate").unwrap();
        assert!(!hr.is_factor());
        assert_eq!(hr.value(3), Some(50.0));
    }

    #[test]
    fn header_only_is_empty() {
        let ds = read_csv_str("a,b\n", &HashMap::new()).unwrap();
        assert_eq!(ds.n_rows(), 0);
        assert_eq!(ds.names(), ["a", "b"]);
    }

    #[test]
    fn numeric_days_and_missing() {
        let ds = read_csv_str("time,g\n0,a\n10,\n35,b\n", &HashMap::new()).unwrap();
        let t = ds.column("time").unwrap();
        assert_eq!((0..3).map(|i| t.value(i).unwrap()).collect::<Vec<_>>(), [0.0, 10.0, 35.0]);
        assert!(ds.column("g").unwrap().is_missing(1));
    }

    #[test]
    fn override_makes_factor() {
        let mut o = HashMap::new();
        o.insert("time".to_string(), ColumnType::Factor);
        let ds = read_csv_str("time\n0\n10\n", &o).unwrap();
        assert!(ds.column("time").unwrap().is_factor());
        o.insert("nope".to_string(), ColumnType::Factor);
        assert!(matches!(
            read_csv_str("time\n0\n", &o),
            Err(DataError::UnknownColumn(_))
        ));
    }

    #[test]
    fn csv_errors() {
        assert!(matches!(
            read_csv_str("a,a\n1,2\n", &HashMap::new()),
            Err(DataError::DuplicateColumn(_))
        ));
        assert!(matches!(
            read_csv_str("a,b\n1,2\n3\n", &HashMap::new()),
            Err(DataError::Ragged { .. })
        ));
        assert!(matches!(
            read_csv("/definitely/not/here.csv", &HashMap::new()),
            Err(DataError::Io { .. })
        ));
    }

    #[test]
    fn nested_unambiguous() {
        let ds = fig3(&[
            ("C1", "S1"),
            ("C1", "S2"),
            ("C2", "S3"),
            ("C2", "S4"),
            ("C3", "S5"),
            ("C3", "S6"),
        ]);
        let inc = cross_tabulate(&ds, "classroom", "student").unwrap();
        assert_eq!(inc.counts[0], vec![1, 1, 0, 0, 0, 0]);
        assert_eq!(inc.counts.len(), 3);
        for j in 0..6 {
            assert_eq!((0..3).filter(|&i| inc.counts[i][j] > 0).count(), 1);
        }
        assert_eq!(classify_relation(&inc).unwrap(), FactorRelation::NestedBinA);
        let t = cross_tabulate(&ds, "student", "classroom").unwrap();
        assert_eq!(classify_relation(&t).unwrap(), FactorRelation::NestedAinB);
        assert_eq!(
            FactorRelation::NestedAinB.describe("student", "classroom"),
            "Nested: student within classroom"
        );
    }

    #[test]
    fn ambiguous_coding_looks_crossed() {
        let ds = fig3(&[
            ("C1", "S1"),
            ("C1", "S2"),
            ("C2", "S1"),
            ("C2", "S2"),
            ("C3", "S1"),
            ("C3", "S2"),
        ]);
        let inc = cross_tabulate(&ds, "classroom", "student").unwrap();
        assert_eq!(classify_relation(&inc).unwrap(), FactorRelation::FullyCrossed);
        let cs = concat_factors(&ds, "classroom", "student", ":").unwrap();
        assert_eq!(cs.levels().unwrap().len(), 6);
        assert_eq!(cs.label(1).as_deref(), Some("C1:S2"));
        let mut ds2 = ds.clone();
        ds2.push_column("cs", cs).unwrap();
        let inc = cross_tabulate(&ds2, "cs", "classroom").unwrap();
        assert_eq!(classify_relation(&inc).unwrap(), FactorRelation::NestedAinB);
    }

    #[test]
    fn crossed_and_partial() {
        let full = fig3(&[
            ("C1", "S1"),
            ("C1", "S2"),
            ("C2", "S1"),
            ("C2", "S2"),
            ("C3", "S1"),
            ("C3", "S2"),
        ]);
        let inc = cross_tabulate(&full, "classroom", "student").unwrap();
        assert!(inc.counts.iter().flatten().all(|&c| c == 1));
        let partial = fig3(&[("C1", "S1"), ("C1", "S2"), ("C2", "S1"), ("C3", "S2")]);
        let inc = cross_tabulate(&partial, "classroom", "student").unwrap();
        assert_eq!(
            classify_relation(&inc).unwrap(),
            FactorRelation::PartiallyCrossed
        );
    }

    #[test]
    fn single_row_and_errors() {
        let ds = fig3(&[("C1", "S1")]);
        let inc = cross_tabulate(&ds, "classroom", "student").unwrap();
        assert_eq!(inc.counts, vec![vec![1]]);
        assert_eq!(classify_relation(&inc).unwrap(), FactorRelation::FullyCrossed);
        let mut ds = ds;
        ds.push_column("x", Column::from_f64(&[1.0])).unwrap();
        assert!(matches!(
            cross_tabulate(&ds, "x", "student"),
            Err(DataError::NotFactor(_))
        ));
        assert!(matches!(
            cross_tabulate(&ds, "zzz", "student"),
            Err(DataError::UnknownColumn(_))
        ));
        let empty = IncidenceMatrix {
            row_factor: "a".into(),
            col_factor: "b".into(),
            row_levels: vec!["x".into()],
            col_levels: vec!["y".into()],
            counts: vec![vec![0]],
        };
        assert!(classify_relation(&empty).is_err());
    }

    #[test]
    fn missing_excluded_pairwise() {
        let ds = Dataset::from_columns(vec![
            ("a", Column::factor(vec![Some("x"), None, Some("y")])),
            ("b", Column::factor(vec![Some("p"), Some("q"), None])),
        ])
        .unwrap();
        let inc = cross_tabulate(&ds, "a", "b").unwrap();
        assert_eq!(inc.total(), 1);
    }

    #[test]
    fn concat_with_itself() {
        let ds = fig3(&[("C1", "S1"), ("C2", "S1")]);
        let c = concat_factors(&ds, "classroom", "classroom", ":").unwrap();
        assert_eq!(c.levels().unwrap(), ["C1:C1", "C2:C2"]);
        assert!(concat_factors(&ds, "classroom", "nope", ":").is_err());
    }
}
