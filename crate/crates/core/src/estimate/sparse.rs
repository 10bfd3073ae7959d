//! Up-looking sparse Cholesky with a symbolic phase computed once.
//!
//! The matrix is given by its upper triangle in compressed-column form. The
//! symbolic phase derives the elimination tree, the row patterns of `L` and
//! the position of every non-zero, so repeated numeric factorizations on the
//! same pattern only touch preallocated storage.

const NONE: usize = usize::MAX;

/// Upper triangle (diagonal included) of a symmetric matrix, CSC.
#[derive(Debug, Clone)]
pub struct UpperCsc {
    pub n: usize,
    pub colptr: Vec<usize>,
    pub rowidx: Vec<usize>,
    pub values: Vec<f64>,
}

impl UpperCsc {
    /// Build the pattern from (row, col) pairs with `row <= col`;
    /// duplicates are merged and values start at zero.
    pub fn from_pattern(n: usize, mut entries: Vec<(usize, usize)>) -> Self {
        entries.sort_unstable_by_key(|&(r, c)| (c, r));
        entries.dedup();
        let mut colptr = vec![0; n + 1];
        for &(_, c) in &entries {
            colptr[c + 1] += 1;
        }
        for j in 0..n {
            colptr[j + 1] += colptr[j];
        }
        let rowidx: Vec<usize> = entries.iter().map(|&(r, _)| r).collect();
        let values = vec![0.0; rowidx.len()];
        UpperCsc {
            n,
            colptr,
            rowidx,
            values,
        }
    }

    /// Storage position of entry (row, col), `row <= col`.
    pub fn position(&self, row: usize, col: usize) -> Option<usize> {
        let (a, b) = (self.colptr[col], self.colptr[col + 1]);
        self.rowidx[a..b].binary_search(&row).ok().map(|p| a + p)
    }
}

#[derive(Debug, Clone)]
pub struct Symbolic {
    n: usize,
    /// Column pointers of L.
    lp: Vec<usize>,
    /// Row indices of L, diagonal first in each column.
    li: Vec<usize>,
    /// For row k: columns j < k with L[k, j] != 0, in topological order,
    /// paired with the storage position of L[k, j].
    rows: Vec<Vec<(usize, usize)>>,
}

#[derive(Debug, Clone)]
pub struct Factor {
    sym: Symbolic,
    lx: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NotPositiveDefinite {
    pub column: usize,
}

impl Symbolic {
    pub fn analyze(a: &UpperCsc) -> Self {
        let n = a.n;
        let parent = etree(a);
        let mut rows: Vec<Vec<usize>> = Vec::with_capacity(n);
        let mut mark = vec![NONE; n];
        let mut stack = vec![0usize; n];
        let mut counts = vec![1usize; n];
        for k in 0..n {
            let top = ereach(a, k, &parent, &mut mark, &mut stack);
            let pat: Vec<usize> = stack[top..n].to_vec();
            for &j in &pat {
                counts[j] += 1;
            }
            rows.push(pat);
        }
        let mut lp = vec![0; n + 1];
        for j in 0..n {
            lp[j + 1] = lp[j] + counts[j];
        }
        let mut li = vec![0; lp[n]];
        let mut next: Vec<usize> = lp[..n].to_vec();
        for j in 0..n {
            li[next[j]] = j;
            next[j] += 1;
        }
        let mut rows_pos = Vec::with_capacity(n);
        for (k, pat) in rows.iter().enumerate() {
            let mut rp = Vec::with_capacity(pat.len());
            for &j in pat {
                li[next[j]] = k;
                rp.push((j, next[j]));
                next[j] += 1;
            }
            rows_pos.push(rp);
        }
        Symbolic {
            n,
            lp,
            li,
            rows: rows_pos,
        }
    }

    pub fn nnz(&self) -> usize {
        self.li.len()
    }
}

fn etree(a: &UpperCsc) -> Vec<usize> {
    let n = a.n;
    let mut parent = vec![NONE; n];
    let mut ancestor = vec![NONE; n];
    for k in 0..n {
        for p in a.colptr[k]..a.colptr[k + 1] {
            let mut i = a.rowidx[p];
            while i != NONE && i < k {
                let inext = ancestor[i];
                ancestor[i] = k;
                if inext == NONE {
                    parent[i] = k;
                }
                i = inext;
            }
        }
    }
    parent
}

/// Non-zero pattern of row k of L, written to `stack[top..n]`.
fn ereach(
    a: &UpperCsc,
    k: usize,
    parent: &[usize],
    mark: &mut [usize],
    stack: &mut [usize],
) -> usize {
    let n = a.n;
    let mut top = n;
    mark[k] = k;
    let mut path = Vec::new();
    for p in a.colptr[k]..a.colptr[k + 1] {
        let mut i = a.rowidx[p];
        if i > k {
            continue;
        }
        path.clear();
        while mark[i] != k {
            path.push(i);
            mark[i] = k;
            i = parent[i];
        }
        while let Some(v) = path.pop() {
            top -= 1;
            stack[top] = v;
        }
    }
    top
}

impl Factor {
    pub fn new(sym: Symbolic) -> Self {
        let nnz = sym.nnz();
        Factor {
            sym,
            lx: vec![0.0; nnz],
        }
    }

    pub fn n(&self) -> usize {
        self.sym.n
    }

    /// Numeric factorization of `a` (same pattern as the analyzed matrix).
    pub fn factorize(&mut self, a: &UpperCsc) -> Result<(), NotPositiveDefinite> {
        let n = self.sym.n;
        let lp = &self.sym.lp;
        let li = &self.sym.li;
        let lx = &mut self.lx;
        let mut x = vec![0.0; n];
        // fill pointer per column (entries below the diagonal written so far)
        let mut fill: Vec<usize> = (0..n).map(|j| lp[j] + 1).collect();
        for k in 0..n {
            for p in a.colptr[k]..a.colptr[k + 1] {
                x[a.rowidx[p]] = a.values[p];
            }
            let mut d = x[k];
            x[k] = 0.0;
            for &(j, pos) in &self.sym.rows[k] {
                let lkj = x[j] / lx[lp[j]];
                x[j] = 0.0;
                for p in lp[j] + 1..fill[j] {
                    x[li[p]] -= lx[p] * lkj;
                }
                d -= lkj * lkj;
                lx[pos] = lkj;
                fill[j] += 1;
            }
            if d <= 0.0 || !d.is_finite() {
                return Err(NotPositiveDefinite { column: k });
            }
            lx[lp[k]] = d.sqrt();
        }
        Ok(())
    }

    /// Solve `L x = b` in place.
    pub fn solve_l(&self, b: &mut [f64]) {
        let (lp, li, lx) = (&self.sym.lp, &self.sym.li, &self.lx);
        for j in 0..self.sym.n {
            b[j] /= lx[lp[j]];
            let bj = b[j];
            for p in lp[j] + 1..lp[j + 1] {
                b[li[p]] -= lx[p] * bj;
            }
        }
    }

    /// Solve `L' x = b` in place.
    pub fn solve_lt(&self, b: &mut [f64]) {
        let (lp, li, lx) = (&self.sym.lp, &self.sym.li, &self.lx);
        for j in (0..self.sym.n).rev() {
            let mut s = b[j];
            for p in lp[j] + 1..lp[j + 1] {
                s -= lx[p] * b[li[p]];
            }
            b[j] = s / lx[lp[j]];
        }
    }

    /// `log det(L L') = 2 sum log L[j, j]`.
    pub fn logdet(&self) -> f64 {
        (0..self.sym.n)
            .map(|j| self.lx[self.sym.lp[j]].ln())
            .sum::<f64>()
            * 2.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};

    fn random_spd(n: usize, density: f64, seed: u64) -> DMatrix<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut b = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                if rng.random::<f64>() < density {
                    b[(i, j)] = rng.random::<f64>() - 0.5;
                }
            }
        }
        &b * b.transpose() + DMatrix::identity(n, n)
    }

    fn to_upper(m: &DMatrix<f64>) -> UpperCsc {
        let n = m.nrows();
        let mut entries = Vec::new();
        for j in 0..n {
            for i in 0..=j {
                if m[(i, j)] != 0.0 || i == j {
                    entries.push((i, j));
                }
            }
        }
        let mut a = UpperCsc::from_pattern(n, entries);
        for j in 0..n {
            for p in a.colptr[j]..a.colptr[j + 1] {
                a.values[p] = m[(a.rowidx[p], j)];
            }
        }
        a
    }

    #[test]
    fn matches_dense_cholesky() {
        for seed in 0..8 {
            let m = random_spd(25, 0.08, seed);
            let a = to_upper(&m);
            let mut f = Factor::new(Symbolic::analyze(&a));
            f.factorize(&a).unwrap();
            let dense = m.clone().cholesky().unwrap();
            let logdet: f64 = dense.l().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
            assert!((f.logdet() - logdet).abs() < 1e-10);
            let b = DVector::from_fn(25, |i, _| (i as f64).sin());
            let mut x = b.as_slice().to_vec();
            f.solve_l(&mut x);
            f.solve_lt(&mut x);
            let want = dense.solve(&b);
            for i in 0..25 {
                assert!((x[i] - want[i]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn refactorize_same_pattern() {
        let m = random_spd(12, 0.2, 3);
        let mut a = to_upper(&m);
        let mut f = Factor::new(Symbolic::analyze(&a));
        f.factorize(&a).unwrap();
        for v in a.values.iter_mut() {
            *v *= 2.0;
        }
        f.factorize(&a).unwrap();
        let want = (m * 2.0).cholesky().unwrap();
        let logdet: f64 = want.l().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
        assert!((f.logdet() - logdet).abs() < 1e-10);
    }

    #[test]
    fn rejects_indefinite() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let a = to_upper(&m);
        let mut f = Factor::new(Symbolic::analyze(&a));
        assert_eq!(f.factorize(&a), Err(NotPositiveDefinite { column: 1 }));
    }
}
