//! Dense symmetric solvers and one-dimensional minimization.

use crate::{Error, Result};

/// Square real matrix stored row-major; intended to hold symmetric data.
#[derive(Clone, Debug, PartialEq)]
pub struct SymMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SymMatrix {
    pub fn zeros(n: usize) -> Self {
        Self { n, data: vec![0.0; n * n] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_row_major(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::Dimension { expected: n * n, found: data.len() });
        }
        Ok(Self { n, data })
    }

    pub fn order(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
    }

    /// Sets both `(i, j)` and `(j, i)`.
    pub fn set_sym(&mut self, i: usize, j: usize, v: f64) {
        self.set(i, j, v);
        self.set(j, i, v);
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn trace(&self) -> f64 {
        (0..self.n).map(|i| self.get(i, i)).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self { n: self.n, data: self.data.iter().map(|x| c * x).collect() }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n).map(|i| dot(self.row(i), x)).collect()
    }

    /// Largest `|Q_ij - Q_ji|` relative to the largest entry.
    pub fn asymmetry(&self) -> f64 {
        let scale = self.max_abs().max(f64::MIN_POSITIVE);
        let mut worst: f64 = 0.0;
        for i in 0..self.n {
            for j in 0..i {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst / scale
    }

    pub fn is_symmetric(&self, rel_tol: f64) -> bool {
        self.asymmetry() <= rel_tol
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `‖Qx - r‖₂`.
pub fn residual_norm(q: &SymMatrix, x: &[f64], r: &[f64]) -> f64 {
    let qx = q.mul_vec(x);
    qx.iter().zip(r).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

#[derive(Clone, Debug)]
pub struct QrSolution {
    pub x: Vec<f64>,
    /// Numerical rank after truncation.
    pub rank: usize,
    /// `|R₀₀ / R_kk|` for the last retained pivot.
    pub condition_estimate: f64,
}

/// Relative pivot size below which columns are treated as dependent.
pub const QR_RANK_TOL: f64 = 1e-13;

/// Least-squares solution of `Qx = r` by Householder QR with column pivoting.
pub fn solve_qr(q: &SymMatrix, r: &[f64]) -> Result<Vec<f64>> {
    Ok(solve_qr_detailed(q, r)?.x)
}

/// Pivoted QR returning the basic least-squares solution and rank diagnostics.
pub fn solve_qr_detailed(q: &SymMatrix, r: &[f64]) -> Result<QrSolution> {
    let n = q.order();
    if r.len() != n {
        return Err(Error::Dimension { expected: n, found: r.len() });
    }
    if !q.is_finite() || r.iter().any(|x| !x.is_finite()) {
        return Err(Error::Solver("non-finite input".into()));
    }
    if n == 0 {
        return Ok(QrSolution { x: vec![], rank: 0, condition_estimate: 1.0 });
    }
    // Column-major working copy.
    let mut a: Vec<Vec<f64>> = (0..n).map(|j| (0..n).map(|i| q.get(i, j)).collect()).collect();
    let mut b = r.to_vec();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut diag = vec![0.0; n];
    let mut rank = 0;
    let mut r00 = 0.0;
    for k in 0..n {
        let (mut best, mut best_norm) = (k, -1.0);
        for (j, col) in a.iter().enumerate().skip(k) {
            let s: f64 = col[k..].iter().map(|x| x * x).sum();
            if s > best_norm {
                best = j;
                best_norm = s;
            }
        }
        a.swap(k, best);
        perm.swap(k, best);
        let nrm = best_norm.sqrt();
        if k == 0 {
            r00 = nrm;
        }
        if nrm == 0.0 || nrm <= QR_RANK_TOL * r00 {
            break;
        }
        let x0 = a[k][k];
        let alpha = if x0 >= 0.0 { -nrm } else { nrm };
        let mut v: Vec<f64> = a[k][k..].to_vec();
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        diag[k] = alpha;
        rank = k + 1;
        if vnorm2 == 0.0 {
            continue;
        }
        for col in a.iter_mut().skip(k + 1) {
            let s = 2.0 * dot(&v, &col[k..]) / vnorm2;
            for (c, vi) in col[k..].iter_mut().zip(&v) {
                *c -= s * vi;
            }
        }
        let s = 2.0 * dot(&v, &b[k..]) / vnorm2;
        for (c, vi) in b[k..].iter_mut().zip(&v) {
            *c -= s * vi;
        }
    }
    let mut z = vec![0.0; n];
    for i in (0..rank).rev() {
        let mut s = b[i];
        for j in i + 1..rank {
            s -= a[j][i] * z[j];
        }
        z[i] = s / diag[i];
    }
    let mut x = vec![0.0; n];
    for (k, &p) in perm.iter().enumerate() {
        x[p] = z[k];
    }
    let condition_estimate = if rank > 0 { (r00 / diag[rank - 1].abs()).max(1.0) } else { f64::INFINITY };
    Ok(QrSolution { x, rank, condition_estimate })
}

#[derive(Clone, Debug)]
pub struct CgResult {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Final `‖Qx - r‖ / ‖r‖`.
    pub relative_residual: f64,
}

/// Jacobi-preconditioned conjugate gradients for PSD `Q`.
pub fn solve_cg(q: &SymMatrix, r: &[f64], tol: f64, max_iter: usize) -> Result<CgResult> {
    let n = q.order();
    if r.len() != n {
        return Err(Error::Dimension { expected: n, found: r.len() });
    }
    let rnorm = norm(r);
    if rnorm == 0.0 {
        return Ok(CgResult { x: vec![0.0; n], iterations: 0, converged: true, relative_residual: 0.0 });
    }
    let pre: Vec<f64> = (0..n).map(|i| {
        let d = q.get(i, i);
        if d > 0.0 { 1.0 / d } else { 1.0 }
    }).collect();
    let mut x = vec![0.0; n];
    let mut res = r.to_vec();
    let mut z: Vec<f64> = res.iter().zip(&pre).map(|(a, b)| a * b).collect();
    let mut p = z.clone();
    let mut rz = dot(&res, &z);
    let mut it = 0;
    while it < max_iter {
        let qp = q.mul_vec(&p);
        let pqp = dot(&p, &qp);
        if !pqp.is_finite() || !rz.is_finite() {
            return Err(Error::Solver("conjugate gradients diverged".into()));
        }
        if pqp <= 0.0 {
            break;
        }
        let step = rz / pqp;
        for i in 0..n {
            x[i] += step * p[i];
            res[i] -= step * qp[i];
        }
        it += 1;
        let rel = norm(&res) / rnorm;
        if !rel.is_finite() {
            return Err(Error::Solver("conjugate gradients diverged".into()));
        }
        if rel <= tol {
            break;
        }
        z = res.iter().zip(&pre).map(|(a, b)| a * b).collect();
        let rz_new = dot(&res, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    let rel = residual_norm(q, &x, r) / rnorm;
    if !rel.is_finite() {
        return Err(Error::Solver("conjugate gradients diverged".into()));
    }
    Ok(CgResult { x, iterations: it, converged: rel <= tol, relative_residual: rel })
}

/// Newton iteration cap for [`minimize_scalar`].
pub const NEWTON_MAX_ITER: usize = 100;
/// Relative step tolerance for Newton convergence.
pub const NEWTON_TOL: f64 = 1e-10;
/// Grid points per sign scan of the derivative.
const SCAN_POINTS: usize = 400;
/// Bracket doublings before giving up.
const BRACKET_EXPANSIONS: usize = 8;

/// Local minimizer of `f` given its derivative `df`.
///
/// Newton's method on `df` runs first from `init`; it converges to the
/// minimizer of the basin containing `init`. If Newton stalls, leaves the
/// (expanded) bracket or lands on a maximum, the derivative is sign-scanned
/// over `bracket` and every `-` to `+` crossing is refined by bisection; the
/// crossing with the smallest `f` wins. The bracket is doubled about its
/// centre up to eight times when no crossing is found.
pub fn minimize_scalar<F, D>(f: F, df: D, init: f64, bracket: (f64, f64)) -> Result<f64>
where
    F: Fn(f64) -> f64,
    D: Fn(f64) -> f64,
{
    let (lo, hi) = if bracket.0 <= bracket.1 { bracket } else { (bracket.1, bracket.0) };
    let span = (hi - lo).max(f64::MIN_POSITIVE);
    let outer = (lo - 256.0 * span, hi + 256.0 * span);
    if let Some(x) = newton_min(&df, init, outer) {
        return Ok(x);
    }
    let (mut a, mut b) = (lo, hi);
    for _ in 0..=BRACKET_EXPANSIONS {
        let mut best: Option<(f64, f64)> = None;
        let h = (b - a) / SCAN_POINTS as f64;
        let mut x0 = a;
        let mut d0 = df(x0);
        for k in 1..=SCAN_POINTS {
            let x1 = a + k as f64 * h;
            let d1 = df(x1);
            if d0 < 0.0 && d1 >= 0.0 {
                let root = bisect(&df, x0, x1);
                let x = newton_min(&df, root, (x0, x1)).unwrap_or(root);
                let fx = f(x);
                if best.is_none_or(|(_, fb)| fx < fb) {
                    best = Some((x, fx));
                }
            }
            x0 = x1;
            d0 = d1;
        }
        if let Some((x, _)) = best {
            return Ok(x);
        }
        let (c, w) = (0.5 * (a + b), b - a);
        a = c - w;
        b = c + w;
    }
    Err(Error::OptimizationFailed(format!(
        "no minimum of the objective found in [{a:.6e}, {b:.6e}] after {BRACKET_EXPANSIONS} expansions"
    )))
}

fn newton_min<D: Fn(f64) -> f64>(df: &D, init: f64, window: (f64, f64)) -> Option<f64> {
    let mut x = init;
    for _ in 0..NEWTON_MAX_ITER {
        let d = df(x);
        if d == 0.0 {
            return (second_derivative(df, x) > 0.0).then_some(x);
        }
        let d2 = second_derivative(df, x);
        if !(d2 > 0.0) || !d.is_finite() {
            return None;
        }
        let step = -d / d2;
        let next = x + step;
        if !next.is_finite() || next < window.0 || next > window.1 {
            return None;
        }
        x = next;
        if step.abs() <= NEWTON_TOL * (1.0 + x.abs()) {
            return (second_derivative(df, x) > 0.0).then_some(x);
        }
    }
    None
}

fn second_derivative<D: Fn(f64) -> f64>(df: &D, x: f64) -> f64 {
    let h = 1e-5 * (1.0 + x.abs());
    (df(x + h) - df(x - h)) / (2.0 * h)
}

fn bisect<D: Fn(f64) -> f64>(df: &D, mut a: f64, mut b: f64) -> f64 {
    // Invariant: df(a) < 0 <= df(b).
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        if m <= a || m >= b {
            break;
        }
        if df(m) < 0.0 {
            a = m;
        } else {
            b = m;
        }
        if (b - a) <= 1e-15 * (1.0 + m.abs()) {
            break;
        }
    }
    0.5 * (a + b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn identity_system() {
        let r = vec![1.0, -2.0, 3.5];
        assert!(close(&solve_qr(&SymMatrix::identity(3), &r).unwrap(), &r, 1e-15));
    }

    #[test]
    fn two_by_two() {
        let q = SymMatrix::from_row_major(2, vec![2.0, 1.0, 1.0, 3.0]).unwrap();
        // Inverse is [[3,-1],[-1,2]] / 5.
        let x = solve_qr(&q, &[1.0, 2.0]).unwrap();
        assert!(close(&x, &[0.2, 0.6], 1e-12));
    }

    #[test]
    fn rank_deficient_consistent() {
        let v = [1.0, 2.0, -1.0, 0.5];
        let x0 = [0.3, -0.7, 1.1, 2.0];
        let mut q = SymMatrix::zeros(4);
        for i in 0..4 {
            for j in 0..4 {
                q.set(i, j, v[i] * v[j]);
            }
        }
        let vx = dot(&v, &x0);
        let r: Vec<f64> = v.iter().map(|vi| vi * vx).collect();
        let sol = solve_qr_detailed(&q, &r).unwrap();
        assert_eq!(sol.rank, 1);
        assert!(residual_norm(&q, &sol.x, &r) <= 1e-10);
    }

    #[test]
    fn non_finite_rejected() {
        let q = SymMatrix::from_row_major(1, vec![f64::NAN]).unwrap();
        assert!(solve_qr(&q, &[1.0]).is_err());
    }

    #[test]
    fn cg_diagonal_and_zero() {
        let mut q = SymMatrix::zeros(5);
        for i in 0..5 {
            q.set(i, i, (i + 1) as f64);
        }
        let r = vec![1.0, 1.0, 1.0, 1.0, 1.0];
        let res = solve_cg(&q, &r, 1e-12, 50).unwrap();
        assert!(res.iterations <= 5);
        assert!(close(&res.x, &[1.0, 0.5, 1.0 / 3.0, 0.25, 0.2], 1e-12));
        let res = solve_cg(&q, &[0.0; 5], 1e-12, 50).unwrap();
        assert_eq!(res.iterations, 0);
        assert!(res.x.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn minimize_quadratic() {
        let x = minimize_scalar(|e| (e - 3.0).powi(2), |e| 2.0 * (e - 3.0), 0.0, (-10.0, 10.0)).unwrap();
        assert!((x - 3.0).abs() < 1e-10);
    }

    #[test]
    fn minimize_quartic_basins() {
        // Minima at ±1, maximum at 0.
        let f = |x: f64| (x * x - 1.0).powi(2) + 0.1 * x;
        let df = |x: f64| 4.0 * x * (x * x - 1.0) + 0.1;
        let right = minimize_scalar(f, df, 0.9, (-3.0, 3.0)).unwrap();
        let left = minimize_scalar(f, df, -0.9, (-3.0, 3.0)).unwrap();
        // Grid oracle for both basins.
        let grid_min = |a: f64, b: f64| {
            (0..=200_000).map(|k| a + (b - a) * k as f64 / 200_000.0).fold((0.0, f64::INFINITY), |acc, x| if f(x) < acc.1 { (x, f(x)) } else { acc }).0
        };
        assert!((right - grid_min(0.1, 2.0)).abs() < 1e-4);
        assert!((left - grid_min(-2.0, -0.1)).abs() < 1e-4);
        assert!(right > 0.0 && left < 0.0);
    }

    #[test]
    fn minimize_falls_back_from_bad_start() {
        // Newton from the flat tail at -6 cannot proceed; the scan finds x = 2.
        let f = |x: f64| -(-(x - 2.0).powi(2)).exp();
        let df = |x: f64| 2.0 * (x - 2.0) * (-(x - 2.0).powi(2)).exp();
        let x = minimize_scalar(f, df, -6.0, (-1.0, 5.0)).unwrap();
        assert!((x - 2.0).abs() < 1e-8);
    }

    #[test]
    fn minimize_reports_failure() {
        let r = minimize_scalar(|x| x, |_| 1.0, 0.0, (-1.0, 1.0));
        assert!(matches!(r, Err(Error::OptimizationFailed(_))));
    }
}
