//! Fully within-subjects ANOVA by partitioning sums of squares.
//!
//! With every subject observed once per cell, the sum of squares of an
//! effect over a factor set `U` is the inclusion-exclusion sum of the
//! marginal-mean sums of squares over the subsets of `U`. Each within
//! effect `T` is tested against `T x subject`.

use std::collections::HashMap;

use super::{dist, AnovaSource, AnovaTable, FTestRow, InferenceError};
use crate::dataframe::Dataset;

pub fn classical_rm_anova(
    ds: &Dataset,
    dv: &str,
    subject: &str,
    within: &[&str],
) -> Result<AnovaTable, InferenceError> {
    let y_col = ds.column(dv)?;
    let s_col = ds.factor(subject)?;
    let w_cols = within
        .iter()
        .map(|w| ds.factor(w))
        .collect::<Result<Vec<_>, _>>()?;
    let n = ds.n_rows();
    for row in 0..n {
        if y_col.is_missing(row) {
            return Err(InferenceError::Missing(dv.to_string()));
        }
        if s_col.is_missing(row) {
            return Err(InferenceError::Missing(subject.to_string()));
        }
        for (w, c) in within.iter().zip(&w_cols) {
            if c.is_missing(row) {
                return Err(InferenceError::Missing(w.to_string()));
            }
        }
    }
    let y: Vec<f64> = (0..n)
        .map(|r| y_col.value(r).ok_or_else(|| crate::dataframe::DataError::NotNumeric(dv.into())))
        .collect::<Result<_, _>>()?;

    // factor 0 is the subject, 1.. are the within factors
    let mut codes: Vec<Vec<usize>> = vec![(0..n).map(|r| s_col.code(r).unwrap()).collect()];
    let mut nlev: Vec<usize> = vec![s_col.levels().unwrap().len()];
    for c in &w_cols {
        codes.push((0..n).map(|r| c.code(r).unwrap()).collect());
        nlev.push(c.levels().unwrap().len());
    }
    // restrict to observed levels
    for f in 0..codes.len() {
        let mut seen = vec![usize::MAX; nlev[f]];
        let mut next = 0;
        for v in codes[f].iter_mut() {
            if seen[*v] == usize::MAX {
                seen[*v] = next;
                next += 1;
            }
            *v = seen[*v];
        }
        nlev[f] = next;
    }
    let n_subj = nlev[0];
    if n_subj < 2 {
        return Err(InferenceError::TooFewSubjects(n_subj));
    }
    let nf = codes.len();
    let n_cells: usize = nlev.iter().product();
    let cell_of = |r: usize| {
        let mut idx = 0;
        for f in (0..nf).rev() {
            idx = idx * nlev[f] + codes[f][r];
        }
        idx
    };
    let mut count = vec![0usize; n_cells];
    for r in 0..n {
        count[cell_of(r)] += 1;
    }
    if let Some((cell, &c)) = count.iter().enumerate().find(|(_, &c)| c != 1) {
        let mut rest = cell;
        let mut parts = Vec::new();
        for f in 0..nf {
            parts.push(rest % nlev[f]);
            rest /= nlev[f];
        }
        let subj = s_col.levels().unwrap()[first_code(s_col, &codes[0], parts[0])].clone();
        let cell_label = within
            .iter()
            .enumerate()
            .map(|(i, w)| {
                let col = w_cols[i];
                format!(
                    "{w}={}",
                    col.levels().unwrap()[first_code(col, &codes[i + 1], parts[i + 1])]
                )
            })
            .collect::<Vec<_>>()
            .join(",");
        return Err(InferenceError::Unbalanced {
            subject: subj,
            cell: cell_label,
            count: c,
        });
    }

    // marginal-mean sum of squares for every subset (bitmask over factors)
    let n_sub = 1usize << nf;
    let mut msum = vec![0.0; n_sub];
    for mask in 0..n_sub {
        let mut sums: HashMap<Vec<usize>, (f64, usize)> = HashMap::new();
        for r in 0..n {
            let key: Vec<usize> = (0..nf).filter(|f| mask >> f & 1 == 1).map(|f| codes[f][r]).collect();
            let e = sums.entry(key).or_insert((0.0, 0));
            e.0 += y[r];
            e.1 += 1;
        }
        msum[mask] = sums.values().map(|(s, c)| s * s / *c as f64).sum();
    }
    let ss = |mask: usize| -> f64 {
        let mut total = 0.0;
        let bits = mask.count_ones();
        let mut sub = mask;
        loop {
            let sign = if (bits - sub.count_ones()) % 2 == 0 { 1.0 } else { -1.0 };
            total += sign * msum[sub];
            if sub == 0 {
                break;
            }
            sub = (sub - 1) & mask;
        }
        total
    };
    let df_of = |mask: usize| -> usize {
        (0..nf)
            .filter(|f| mask >> f & 1 == 1)
            .map(|f| nlev[f] - 1)
            .product()
    };

    // within terms in canonical order: by order, then by factor position
    let nw = within.len();
    let mut terms: Vec<usize> = (1..1usize << nw).collect();
    terms.sort_by_key(|&t| {
        let bits: Vec<usize> = (0..nw).filter(|i| t >> i & 1 == 1).collect();
        (bits.len(), bits)
    });
    let mut rows = Vec::new();
    for t in terms {
        let mask = t << 1;
        let err = mask | 1;
        let (ss_t, ss_e) = (ss(mask).max(0.0), ss(err).max(0.0));
        let (df1, df2) = (df_of(mask), df_of(err));
        let ms_t = ss_t / df1 as f64;
        let ms_e = ss_e / df2 as f64;
        let scale = msum[0].abs().max(1.0) * 1e-12;
        let f_value = if ss_e <= scale && ss_t <= scale {
            f64::NAN
        } else {
            ms_t / ms_e
        };
        let label = (0..nw)
            .filter(|i| t >> i & 1 == 1)
            .map(|i| within[i])
            .collect::<Vec<_>>()
            .join(":");
        rows.push(FTestRow {
            term: label,
            f_value,
            df1,
            df2: df2 as f64,
            p_value: dist::f_sf(f_value, df1 as f64, df2 as f64),
        });
    }
    Ok(AnovaTable {
        source: AnovaSource::ClassicalRM,
        rows,
        hessian_fallback: false,
        singular_fit: false,
    })
}

/// Original level index of the first row whose compacted code is `compact`.
fn first_code(col: &crate::dataframe::Column, compact: &[usize], code: usize) -> usize {
    let r = compact.iter().position(|&c| c == code).unwrap_or(0);
    col.code(r).unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataframe::Column;

    #[test]
    fn paired_t_equivalence() {
        let before = [10.0, 12.0, 9.0, 14.0, 11.0];
        let after = [12.0, 15.0, 9.5, 17.0, 11.0];
        let mut subj = Vec::new();
        let mut cond = Vec::new();
        let mut y = Vec::new();
        for i in 0..5 {
            for (c, v) in [("a", before[i]), ("b", after[i])] {
                subj.push(format!("s{i}"));
                cond.push(c.to_string());
                y.push(v);
            }
        }
        let ds = Dataset::from_columns(vec![
            ("s", Column::from_labels(&subj)),
            ("c", Column::from_labels(&cond)),
            ("y", Column::from_f64(&y)),
        ])
        .unwrap();
        let t = classical_rm_anova(&ds, "y", "s", &["c"]).unwrap();
        let d: Vec<f64> = (0..5).map(|i| after[i] - before[i]).collect();
        let m = d.iter().sum::<f64>() / 5.0;
        let sd = (d.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 4.0).sqrt();
        let tstat = m / (sd / 5f64.sqrt());
        assert!((t.rows[0].f_value - tstat * tstat).abs() < 1e-10);
        assert_eq!((t.rows[0].df1, t.rows[0].df2), (1, 4.0));
    }

    #[test]
    fn rejects_missing_cell() {
        let ds = Dataset::from_columns(vec![
            ("s", Column::from_labels(&["a", "a", "b"])),
            ("c", Column::from_labels(&["x", "y", "x"])),
            ("y", Column::from_f64(&[1.0, 2.0, 3.0])),
        ])
        .unwrap();
        assert!(matches!(
            classical_rm_anova(&ds, "y", "s", &["c"]),
            Err(InferenceError::Unbalanced { count: 0, .. })
        ));
    }
}
