//! Bound-constrained minimization: Nelder-Mead with projection onto the
//! feasible box, followed by a projected Newton polish on finite-difference
//! derivatives.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone)]
pub struct OptResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub evals: usize,
    pub converged: bool,
}

fn project(x: &mut [f64], lower: &[f64]) {
    for (v, &lo) in x.iter_mut().zip(lower) {
        if *v < lo {
            *v = lo;
        }
    }
}

/// Nelder-Mead on `x >= lower`, stopping when the simplex's function values
/// agree to `rel_tol` (relative) and its vertices agree to `x_tol`.
pub fn nelder_mead<F: FnMut(&[f64]) -> f64>(
    f: &mut F,
    start: &[f64],
    lower: &[f64],
    step: f64,
    rel_tol: f64,
    x_tol: f64,
    max_evals: usize,
) -> OptResult {
    let n = start.len();
    let mut evals = 0;
    let mut eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };
    if n == 0 {
        let v = eval(start, &mut evals);
        return OptResult {
            x: vec![],
            f: v,
            evals,
            converged: true,
        };
    }
    let mut x0 = start.to_vec();
    project(&mut x0, lower);
    let mut simplex = vec![x0.clone()];
    for i in 0..n {
        let mut v = x0.clone();
        let h = if x0[i] != 0.0 { step * x0[i].abs().max(0.25) } else { step };
        v[i] += h;
        simplex.push(v);
    }
    let mut fv: Vec<f64> = simplex.iter().map(|x| eval(x, &mut evals)).collect();
    let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);
    let mut converged = false;
    while evals < max_evals {
        let mut idx: Vec<usize> = (0..=n).collect();
        idx.sort_by(|&a, &b| fv[a].total_cmp(&fv[b]));
        simplex = idx.iter().map(|&i| simplex[i].clone()).collect();
        fv = idx.iter().map(|&i| fv[i]).collect();

        let (best, worst) = (fv[0], fv[n]);
        let spread = (worst - best).abs();
        let size = simplex[1..]
            .iter()
            .flat_map(|v| v.iter().zip(&simplex[0]).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        if spread <= rel_tol * (best.abs() + rel_tol) && size <= x_tol {
            converged = true;
            break;
        }

        let mut centroid = vec![0.0; n];
        for v in &simplex[..n] {
            for j in 0..n {
                centroid[j] += v[j] / n as f64;
            }
        }
        let along = |t: f64| -> Vec<f64> {
            let mut p: Vec<f64> = (0..n)
                .map(|j| centroid[j] + t * (simplex[n][j] - centroid[j]))
                .collect();
            project(&mut p, lower);
            p
        };
        let xr = along(-alpha);
        let fr = eval(&xr, &mut evals);
        if fr < fv[0] {
            let xe = along(-alpha * gamma);
            let fe = eval(&xe, &mut evals);
            if fe < fr {
                simplex[n] = xe;
                fv[n] = fe;
            } else {
                simplex[n] = xr;
                fv[n] = fr;
            }
            continue;
        }
        if fr < fv[n - 1] {
            simplex[n] = xr;
            fv[n] = fr;
            continue;
        }
        let (xc, fc) = if fr < fv[n] {
            let xc = along(-alpha * rho);
            let fc = eval(&xc, &mut evals);
            (xc, fc)
        } else {
            let xc = along(rho);
            let fc = eval(&xc, &mut evals);
            (xc, fc)
        };
        if fc < fv[n].min(fr) {
            simplex[n] = xc;
            fv[n] = fc;
            continue;
        }
        for i in 1..=n {
            let mut v: Vec<f64> = (0..n)
                .map(|j| simplex[0][j] + sigma * (simplex[i][j] - simplex[0][j]))
                .collect();
            project(&mut v, lower);
            fv[i] = eval(&v, &mut evals);
            simplex[i] = v;
        }
    }
    let bi = (0..=n).min_by(|&a, &b| fv[a].total_cmp(&fv[b])).unwrap();
    OptResult {
        x: simplex[bi].clone(),
        f: fv[bi],
        evals,
        converged,
    }
}

/// Central-difference step for coordinate `x`.
pub fn fd_step(x: f64) -> f64 {
    1e-4 * x.abs().max(1.0)
}

/// Finite-difference gradient and Hessian. Coordinates sitting on their
/// lower bound use one-sided differences for the gradient.
pub fn fd_derivatives<F: FnMut(&[f64]) -> f64>(
    f: &mut F,
    x: &[f64],
    fx: f64,
    lower: &[f64],
) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.len();
    let h: Vec<f64> = x.iter().map(|&v| fd_step(v)).collect();
    let mut g = DVector::zeros(n);
    let mut hess = DMatrix::zeros(n, n);
    let mut xp = x.to_vec();
    let mut fplus = vec![0.0; n];
    let mut fminus = vec![0.0; n];
    for i in 0..n {
        xp[i] = x[i] + h[i];
        fplus[i] = f(&xp);
        xp[i] = x[i] - h[i];
        fminus[i] = f(&xp);
        xp[i] = x[i];
        g[i] = if x[i] <= lower[i] {
            (fplus[i] - fx) / h[i]
        } else {
            (fplus[i] - fminus[i]) / (2.0 * h[i])
        };
        hess[(i, i)] = (fplus[i] - 2.0 * fx + fminus[i]) / (h[i] * h[i]);
    }
    for i in 0..n {
        for j in 0..i {
            let mut s = 0.0;
            for (si, sj, w) in [(1.0, 1.0, 1.0), (1.0, -1.0, -1.0), (-1.0, 1.0, -1.0), (-1.0, -1.0, 1.0)] {
                xp[i] = x[i] + si * h[i];
                xp[j] = x[j] + sj * h[j];
                s += w * f(&xp);
            }
            xp[i] = x[i];
            xp[j] = x[j];
            let v = s / (4.0 * h[i] * h[j]);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    (g, hess)
}

/// Projected Newton refinement with backtracking. Coordinates on their
/// bound with a gradient pushing outward are held fixed.
pub fn newton_polish<F: FnMut(&[f64]) -> f64>(
    f: &mut F,
    start: &[f64],
    fstart: f64,
    lower: &[f64],
    max_iter: usize,
) -> (Vec<f64>, f64, usize) {
    let n = start.len();
    let mut x = start.to_vec();
    let mut fx = fstart;
    let mut evals = 0;
    if n == 0 {
        return (x, fx, 0);
    }
    let mut counted = |v: &[f64], evals: &mut usize| {
        *evals += 1;
        f(v)
    };
    for _ in 0..max_iter {
        // snap near-bound coordinates so bound activity is decided cleanly
        let (g, h) = {
            let mut ff = |v: &[f64]| counted(v, &mut evals);
            fd_derivatives(&mut ff, &x, fx, lower)
        };
        let free: Vec<usize> = (0..n)
            .filter(|&i| !(x[i] <= lower[i] && g[i] >= 0.0))
            .collect();
        if free.is_empty() {
            break;
        }
        let m = free.len();
        let gf = DVector::from_fn(m, |i, _| g[free[i]]);
        let hf = DMatrix::from_fn(m, m, |i, j| h[(free[i], free[j])]);
        // flip negative curvature so saddle-like regions near a bound are left quickly
        let scale = hf.diagonal().iter().map(|v| v.abs()).fold(1e-8, f64::max);
        let eig = hf.clone().symmetric_eigen();
        let indefinite = eig.eigenvalues.iter().any(|&l| l <= 1e-10 * scale);
        let dir = {
            let q = &eig.eigenvectors;
            let lam = eig.eigenvalues.map(|l| l.abs().max(1e-8 * scale));
            let qg = q.transpose() * &gf;
            -(q * qg.component_div(&lam))
        };
        if indefinite {
            // expand along the escape direction while it keeps paying off
            let mut t = 1.0;
            let mut best: Option<(Vec<f64>, f64)> = None;
            for _ in 0..20 {
                let mut xn = x.clone();
                for (k, &i) in free.iter().enumerate() {
                    xn[i] += t * dir[k];
                }
                project(&mut xn, lower);
                let fnew = counted(&xn, &mut evals);
                let cur = best.as_ref().map_or(fx, |b| b.1);
                if fnew < cur {
                    best = Some((xn, fnew));
                    t *= 2.0;
                } else {
                    break;
                }
            }
            if let Some((xn, fnew)) = best {
                let gain = fx - fnew;
                x = xn;
                fx = fnew;
                if gain > 1e-14 * fx.abs().max(1.0) {
                    continue;
                }
                break;
            }
        }
        let mut t = 1.0;
        let mut improved = false;
        for _ in 0..30 {
            let mut xn = x.clone();
            for (k, &i) in free.iter().enumerate() {
                xn[i] += t * dir[k];
            }
            project(&mut xn, lower);
            let fnew = counted(&xn, &mut evals);
            if fnew < fx {
                let moved = xn
                    .iter()
                    .zip(&x)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                x = xn;
                let gain = fx - fnew;
                fx = fnew;
                improved = moved > 1e-12 && gain > 1e-14 * fx.abs().max(1.0);
                break;
            }
            t *= 0.5;
        }
        if !improved {
            break;
        }
    }
    (x, fx, evals)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_interior_and_bound() {
        let mut f = |x: &[f64]| (x[0] - 1.5).powi(2) + 3.0 * (x[1] + 2.0).powi(2) + 0.5 * x[0] * x[1];
        let r = nelder_mead(&mut f, &[0.5, 0.5], &[0.0, 0.0], 0.5, 1e-12, 1e-8, 10_000);
        assert!(r.converged);
        // x1 is pushed to its bound; x0 minimises with x1 = 0
        assert!(r.x[1] < 1e-6);
        assert!((r.x[0] - 1.5).abs() < 1e-4);
        let (x, _, _) = newton_polish(&mut f, &r.x, r.f, &[0.0, 0.0], 20);
        assert_eq!(x[1], 0.0);
        assert!((x[0] - 1.5).abs() < 1e-7);
    }

    #[test]
    fn rosenbrock() {
        let mut f = |x: &[f64]| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
        let lo = [f64::NEG_INFINITY; 2];
        let r = nelder_mead(&mut f, &[-1.2, 1.0], &lo, 0.5, 1e-14, 1e-10, 10_000);
        let (x, _, _) = newton_polish(&mut f, &r.x, r.f, &lo, 50);
        assert!((x[0] - 1.0).abs() < 1e-5 && (x[1] - 1.0).abs() < 1e-5);
    }
}
