//! Penalized least squares for fixed covariance parameters and the
//! (restricted) profiled deviance built on it.
//!
//! With relative factor `Λ(θ)` and spherical effects `u` (`b = Λ u`), the
//! system `[ΛᵀZᵀZΛ + I, ΛᵀZᵀX; XᵀZΛ, XᵀX]` is solved by a sparse Cholesky of
//! the random-effects block followed by a dense Cholesky of the Schur
//! complement for the fixed effects.

use nalgebra::{DMatrix, DVector};

use super::sparse::{Factor, Symbolic, UpperCsc};
use super::Method;
use crate::design::ModelMatrices;

/// Solution of the penalized least-squares problem at one theta.
#[derive(Debug, Clone)]
pub struct PlsSolution {
    pub beta: DVector<f64>,
    /// Spherical random effects, global (block) order.
    pub u: DVector<f64>,
    /// Random effects `Λ u`, global order.
    pub b: DVector<f64>,
    pub fitted: DVector<f64>,
    pub pwrss: f64,
    /// `log det(ΛᵀZᵀZΛ + I)`
    pub ldl2: f64,
    /// `log det(RXᵀRX)`
    pub ldrx2: f64,
    /// `(RXᵀRX)⁻¹`, the unscaled covariance of beta.
    pub rx_inv: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PlsFailure {
    RandomBlock { column: usize },
    FixedBlock,
}

pub struct Evaluator<'a> {
    mats: &'a ModelMatrices,
    q: usize,
    /// internal index -> global index
    perm: Vec<usize>,
    /// per block: internal offset
    block_offset: Vec<usize>,
    /// per row: internal index of the first column of each block's level
    row_starts: Vec<Vec<usize>>,
    /// per row: storage positions of the (a, b) products, a <= b in
    /// internal order, laid out row-major over the row's column list
    row_positions: Vec<Vec<usize>>,
    diag_positions: Vec<usize>,
    /// rows in a canonical order, so sums do not depend on input order
    rows: Vec<usize>,
    a: UpperCsc,
    factor: Factor,
    xtx: DMatrix<f64>,
    xty: DVector<f64>,
    pub var_floor: f64,
}

impl<'a> Evaluator<'a> {
    pub fn new(mats: &'a ModelMatrices) -> Self {
        let n = mats.n();
        let blocks = &mats.z_blocks;
        // blocks with more levels are eliminated first: nested (finer)
        // groupings then only fill in against their coarser parents
        let mut order: Vec<usize> = (0..blocks.len()).collect();
        order.sort_by_key(|&b| std::cmp::Reverse(blocks[b].n_levels()));
        let mut global_offset = vec![0; blocks.len()];
        let mut acc = 0;
        for (b, blk) in blocks.iter().enumerate() {
            global_offset[b] = acc;
            acc += blk.n_effects();
        }
        let q = acc;
        let mut block_offset = vec![0; blocks.len()];
        let mut perm = vec![0; q];
        let mut acc = 0;
        for &b in &order {
            block_offset[b] = acc;
            for j in 0..blocks[b].n_effects() {
                perm[acc + j] = global_offset[b] + j;
            }
            acc += blocks[b].n_effects();
        }

        let mut row_starts = Vec::with_capacity(n);
        let mut pattern = Vec::new();
        let mut cols = Vec::new();
        for i in 0..n {
            let starts: Vec<usize> = blocks
                .iter()
                .enumerate()
                .map(|(b, blk)| block_offset[b] + blk.row_level[i] * blk.k())
                .collect();
            cols.clear();
            for (b, blk) in blocks.iter().enumerate() {
                cols.extend(starts[b]..starts[b] + blk.k());
            }
            for (x, &ca) in cols.iter().enumerate() {
                for &cb in &cols[x..] {
                    pattern.push((ca.min(cb), ca.max(cb)));
                }
            }
            row_starts.push(starts);
        }
        for j in 0..q {
            pattern.push((j, j));
        }
        let a = UpperCsc::from_pattern(q, pattern);
        let mut row_positions = Vec::with_capacity(n);
        for starts in &row_starts {
            cols.clear();
            for (b, blk) in blocks.iter().enumerate() {
                cols.extend(starts[b]..starts[b] + blk.k());
            }
            let mut pos = Vec::new();
            for (x, &ca) in cols.iter().enumerate() {
                for &cb in &cols[x..] {
                    pos.push(a.position(ca.min(cb), ca.max(cb)).expect("in pattern"));
                }
            }
            row_positions.push(pos);
        }
        let diag_positions = (0..q).map(|j| a.position(j, j).unwrap()).collect();
        let factor = Factor::new(Symbolic::analyze(&a));
        let rows = canonical_rows(mats);
        let xs = DMatrix::from_fn(n, mats.p(), |i, j| mats.x[(rows[i], j)]);
        let ys = DVector::from_fn(n, |i, _| mats.y[rows[i]]);
        let xtx = xs.transpose() * &xs;
        let xty = xs.transpose() * &ys;
        let mean = ys.mean();
        let var = if n > 1 {
            ys.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        // a constant response has no scale of its own; fall back to its
        // magnitude so rounding noise in the residuals stays below the floor
        let scale = if var > 0.0 {
            var
        } else {
            (mats.y.norm_squared() / n.max(1) as f64).max(1.0)
        };
        let var_floor = 1e-10 * scale;
        Evaluator {
            mats,
            q,
            perm,
            block_offset,
            row_starts,
            row_positions,
            diag_positions,
            rows,
            a,
            factor,
            xtx,
            xty,
            var_floor,
        }
    }

    pub fn mats(&self) -> &ModelMatrices {
        self.mats
    }

    pub fn q(&self) -> usize {
        self.q
    }

    fn lambdas(&self, theta: &[f64]) -> Vec<DMatrix<f64>> {
        self.mats
            .theta_layout
            .iter()
            .map(|tb| tb.lambda(theta))
            .collect()
    }

    /// Solve the penalized least-squares problem at `theta`.
    pub fn solve(&mut self, theta: &[f64]) -> Result<PlsSolution, PlsFailure> {
        let mats = self.mats;
        let n = mats.n();
        let p = mats.p();
        let q = self.q;
        let lambdas = self.lambdas(theta);
        let blocks = &mats.z_blocks;

        for v in self.a.values.iter_mut() {
            *v = 0.0;
        }
        let mut lzy = vec![0.0; q];
        let mut lzx = DMatrix::zeros(q, p);
        let mut vals: Vec<f64> = Vec::new();
        let mut cols: Vec<usize> = Vec::new();
        for &i in &self.rows {
            vals.clear();
            cols.clear();
            for (b, blk) in blocks.iter().enumerate() {
                let k = blk.k();
                let lam = &lambdas[b];
                let start = self.row_starts[i][b];
                for c in 0..k {
                    let mut s = 0.0;
                    for r in c..k {
                        s += blk.inner[(i, r)] * lam[(r, c)];
                    }
                    vals.push(s);
                    cols.push(start + c);
                }
            }
            let pos = &self.row_positions[i];
            let mut t = 0;
            for x in 0..vals.len() {
                for yy in x..vals.len() {
                    self.a.values[pos[t]] += vals[x] * vals[yy];
                    t += 1;
                }
            }
            let yi = mats.y[i];
            for (x, &c) in cols.iter().enumerate() {
                lzy[c] += vals[x] * yi;
                for j in 0..p {
                    lzx[(c, j)] += vals[x] * mats.x[(i, j)];
                }
            }
        }
        for &d in &self.diag_positions {
            self.a.values[d] += 1.0;
        }
        self.factor
            .factorize(&self.a)
            .map_err(|e| PlsFailure::RandomBlock { column: e.column })?;
        let ldl2 = self.factor.logdet();

        let mut cu = lzy;
        self.factor.solve_l(&mut cu);
        let mut rzx = lzx;
        for j in 0..p {
            let mut col: Vec<f64> = rzx.column(j).iter().copied().collect();
            self.factor.solve_l(&mut col);
            rzx.set_column(j, &DVector::from_vec(col));
        }
        let cu_v = DVector::from_vec(cu);
        let rxtrx = &self.xtx - rzx.transpose() * &rzx;
        let chol = rxtrx.cholesky().ok_or(PlsFailure::FixedBlock)?;
        let ldrx2: f64 = chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
        if !ldrx2.is_finite() {
            return Err(PlsFailure::FixedBlock);
        }
        let rhs = &self.xty - rzx.transpose() * &cu_v;
        let beta = chol.solve(&rhs);
        let rx_inv = chol.inverse();

        let mut u_int: Vec<f64> = (&cu_v - &rzx * &beta).iter().copied().collect();
        self.factor.solve_lt(&mut u_int);

        let mut u = DVector::zeros(q);
        for (internal, &global) in self.perm.iter().enumerate() {
            u[global] = u_int[internal];
        }
        // b = Λ u per level, global order
        let mut b = DVector::zeros(q);
        let mut goff = 0;
        for (bi, blk) in blocks.iter().enumerate() {
            let k = blk.k();
            let lam = &lambdas[bi];
            for l in 0..blk.n_levels() {
                for r in 0..k {
                    let mut s = 0.0;
                    for c in 0..=r {
                        s += lam[(r, c)] * u[goff + l * k + c];
                    }
                    b[goff + l * k + r] = s;
                }
            }
            goff += blk.n_effects();
        }
        let mut fitted = &mats.x * &beta;
        let mut goff = 0;
        for blk in blocks {
            let k = blk.k();
            for i in 0..n {
                let base = goff + blk.row_level[i] * k;
                let mut s = 0.0;
                for c in 0..k {
                    s += blk.inner[(i, c)] * b[base + c];
                }
                fitted[i] += s;
            }
            goff += blk.n_effects();
        }
        let rss: f64 = self.rows.iter().map(|&i| (mats.y[i] - fitted[i]).powi(2)).sum();
        let pwrss = rss + u.norm_squared();
        Ok(PlsSolution {
            beta,
            u,
            b,
            fitted,
            pwrss,
            ldl2,
            ldrx2,
            rx_inv,
        })
    }

    fn dof(&self, method: Method) -> f64 {
        let n = self.mats.n() as f64;
        match method {
            Method::Ml => n,
            Method::Reml => n - self.mats.p() as f64,
        }
    }

    /// Profiled residual variance for a solution.
    pub fn sigma2(&self, sol: &PlsSolution, method: Method) -> f64 {
        (sol.pwrss / self.dof(method)).max(self.var_floor)
    }

    /// Deviance with the residual variance profiled out.
    pub fn profiled(&self, sol: &PlsSolution, method: Method) -> f64 {
        let s2 = self.sigma2(sol, method);
        self.deviance_at(sol, method, s2)
    }

    /// Deviance at an explicit residual variance.
    pub fn deviance_at(&self, sol: &PlsSolution, method: Method, sigma2: f64) -> f64 {
        let m = self.dof(method);
        let mut d = sol.ldl2 + m * (2.0 * std::f64::consts::PI * sigma2).ln() + sol.pwrss / sigma2;
        if method == Method::Reml {
            d += sol.ldrx2;
        }
        d
    }

    /// Profiled deviance at theta; failures map to +inf so optimizers steer
    /// away from them.
    pub fn objective(&mut self, theta: &[f64], method: Method) -> f64 {
        match self.solve(theta) {
            Ok(sol) => self.profiled(&sol, method),
            Err(_) => f64::INFINITY,
        }
    }

    pub fn block_offset(&self) -> &[usize] {
        &self.block_offset
    }
}

/// Row order determined by row content alone: grouping levels, then the
/// response, fixed and random-design values. Identical rows tie, and tied
/// rows contribute identically.
fn canonical_rows(mats: &ModelMatrices) -> Vec<usize> {
    let mut rows: Vec<usize> = (0..mats.n()).collect();
    let cmp_f = |a: f64, b: f64| a.total_cmp(&b);
    rows.sort_by(|&i, &j| {
        for blk in &mats.z_blocks {
            let o = blk.row_level[i].cmp(&blk.row_level[j]);
            if o.is_ne() {
                return o;
            }
        }
        let mut o = cmp_f(mats.y[i], mats.y[j]);
        for c in 0..mats.p() {
            o = o.then_with(|| cmp_f(mats.x[(i, c)], mats.x[(j, c)]));
        }
        for blk in &mats.z_blocks {
            for c in 0..blk.k() {
                o = o.then_with(|| cmp_f(blk.inner[(i, c)], blk.inner[(j, c)]));
            }
        }
        o
    });
    rows
}
