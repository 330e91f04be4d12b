//! Ground-state driving: energy shift, `(x - E)^K` polynomial and protocol tables.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::action::{assemble_at_lambda, build_quadratic_form, hamiltonian_powers, precompute_factorized, ActionPolynomial, FactorizedTraces, QuadraticForm};
use crate::linalg::{minimize_scalar, residual_norm, solve_cg, solve_qr_detailed, SymMatrix};
use crate::model::{Ansatz, FactorizedHamiltonian};
use crate::pauli::SparseOperator;
use crate::{Error, Result};

pub const PROTOCOL_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_GRID_POINTS: usize = 100;

/// Moments `ω_k = tr(H^k) / 2^N`, `k = 0..=2K-1`, at one λ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyShiftProblem {
    pub k: usize,
    pub omega: Vec<f64>,
    pub lambda: f64,
}

/// Moments of `H` from powers up to `H^K`; higher ones use `tr(H^K H^{k-K})`.
pub fn moments(h: &SparseOperator, k: usize, lambda: f64) -> Result<EnergyShiftProblem> {
    if k < 2 {
        return Err(Error::InvalidInput("energy shift needs K >= 2".into()));
    }
    let dummy = SparseOperator::zero(h.nspins());
    let pw = hamiltonian_powers(h, &dummy, k)?;
    let mut omega = vec![1.0];
    for j in 1..=k {
        omega.push(pw.powers[j - 1].trace_normalized().re);
    }
    for j in k + 1..2 * k {
        omega.push(pw.powers[k - 1].trace_product_normalized(&pw.powers[j - k - 1])?.re);
    }
    Ok(EnergyShiftProblem { k, omega, lambda })
}

/// Moments from cached factorized traces.
pub fn moments_factorized(ft: &FactorizedTraces, k: usize, lambda: f64) -> Result<EnergyShiftProblem> {
    if k < 2 {
        return Err(Error::InvalidInput("energy shift needs K >= 2".into()));
    }
    Ok(EnergyShiftProblem { k, omega: ft.moments(lambda, 2 * k - 1)?, lambda })
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

fn poly_eval(c: &[f64], x: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, a| acc * x + a)
}

fn poly_deriv(c: &[f64]) -> Vec<f64> {
    c.iter().enumerate().skip(1).map(|(i, a)| i as f64 * a).collect()
}

fn poly_mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

impl EnergyShiftProblem {
    /// Numerator and denominator of `Ω(E)` as polynomials in `E`.
    pub fn rational(&self) -> (Vec<f64>, Vec<f64>) {
        let n2 = 2 * self.k - 2;
        let mut num = Vec::with_capacity(n2 + 1);
        let mut den = Vec::with_capacity(n2 + 1);
        for j in 0..=n2 {
            let c = binomial(n2, j) * if j % 2 == 0 { 1.0 } else { -1.0 };
            num.push(c * self.omega[2 * self.k - 1 - j]);
            den.push(c * self.omega[2 * self.k - 2 - j]);
        }
        (num, den)
    }

    /// `Ω(E) = tr[(H-E)^{2K-2} H] / tr[(H-E)^{2K-2}]`.
    pub fn omega_at(&self, e: f64) -> f64 {
        let (n, d) = self.rational();
        poly_eval(&n, e) / poly_eval(&d, e)
    }

    /// Numerator of `dΩ/dE` (the denominator `D(E)^2` is positive).
    pub fn derivative_numerator(&self) -> Vec<f64> {
        let (n, d) = self.rational();
        let a = poly_mul(&poly_deriv(&n), &d);
        let b = poly_mul(&n, &poly_deriv(&d));
        let len = a.len().max(b.len());
        (0..len).map(|i| a.get(i).copied().unwrap_or(0.0) - b.get(i).copied().unwrap_or(0.0)).collect()
    }

    pub fn omega_derivative(&self, e: f64) -> f64 {
        let (_, d) = self.rational();
        let dv = poly_eval(&d, e);
        poly_eval(&self.derivative_numerator(), e) / (dv * dv)
    }

    pub fn spread(&self) -> f64 {
        (self.omega[2] - self.omega[1] * self.omega[1]).max(0.0).sqrt()
    }

    /// Larger critical point of `Ω` for the `K = 2` moments of this problem.
    pub fn quadratic_root(&self) -> Result<f64> {
        let sub = EnergyShiftProblem { k: 2, omega: self.omega[..4].to_vec(), lambda: self.lambda };
        let c = sub.derivative_numerator();
        let (a, b, c0) = (c.get(2).copied().unwrap_or(0.0), c[1], c[0]);
        let scale = c.iter().map(|x| x.abs()).fold(0.0, f64::max);
        if a.abs() <= 1e-14 * scale {
            if b == 0.0 {
                return Err(Error::OptimizationFailed(format!("dΩ/dE vanishes identically, omega = {:?}", self.omega)));
            }
            return Ok(-c0 / b);
        }
        let disc = b * b - 4.0 * a * c0;
        if disc < 0.0 {
            return Err(Error::OptimizationFailed(format!("no real critical point, discriminant {disc:.3e}, omega = {:?}", sub.omega)));
        }
        let q = -0.5 * (b + b.signum() * disc.sqrt());
        let r1 = q / a;
        let r2 = if q != 0.0 { c0 / q } else { r1 };
        Ok(r1.max(r2))
    }

    /// Number of interior local maxima and minima of `Ω` over `[lo, hi]`.
    pub fn count_extrema(&self, lo: f64, hi: f64, points: usize) -> (usize, usize) {
        let num = self.derivative_numerator();
        let signs: Vec<f64> = (0..=points).map(|i| poly_eval(&num, lo + (hi - lo) * i as f64 / points as f64)).collect();
        let (mut maxima, mut minima) = (0, 0);
        for w in signs.windows(2) {
            if w[0] > 0.0 && w[1] <= 0.0 {
                maxima += 1;
            } else if w[0] < 0.0 && w[1] >= 0.0 {
                minima += 1;
            }
        }
        (maxima, minima)
    }
}

/// Minimizer of `Ω(E)`.
pub fn energy_shift(prob: &EnergyShiftProblem) -> Result<f64> {
    if prob.k < 2 || prob.omega.len() < 2 * prob.k {
        return Err(Error::InvalidInput(format!("need 2K moments for K = {}", prob.k)));
    }
    let e2 = prob.quadratic_root();
    if prob.k == 2 {
        return e2;
    }
    let sigma = prob.spread();
    let w1 = prob.omega[1];
    let half = if sigma > 0.0 { 10.0 * sigma } else { 1.0 };
    let init = e2.unwrap_or(w1);
    minimize_scalar(|e| prob.omega_at(e), |e| prob.omega_derivative(e), init, (w1 - half, w1 + half))
        .map_err(|e| Error::OptimizationFailed(format!("{e}; lambda = {}, omega = {:?}", prob.lambda, prob.omega)))
}

/// `(x - E)^K` expanded; `K = 1` gives `x` since the constant is inert.
pub fn gs_polynomial(k: usize, e: f64) -> Result<ActionPolynomial> {
    if k < 1 {
        return Err(Error::InvalidInput("K must be at least 1".into()));
    }
    let coeffs = (0..=k).map(|j| binomial(k, j) * (-e).powi((k - j) as i32)).collect();
    ActionPolynomial::new(coeffs)
}

/// `[P(ε_m) - P(ε_n)]^2 / (ε_m - ε_n)^2` evaluated from its definition.
pub fn weight_pair_ratio(em: f64, en: f64, e: f64, k: usize) -> f64 {
    let p = |x: f64| (x - e).powi(k as i32);
    let v = (p(em) - p(en)) / (em - en);
    v * v
}

/// Closed-form pair weight `Σ_s (K - |s|) a^{K-1-s} b^{K-1+s}`, finite for `ε_m = ε_n`.
pub fn weight_pair(em: f64, en: f64, e: f64, k: usize) -> f64 {
    let (a, b) = (en - e, em - e);
    let km = k as i32 - 1;
    (-km..=km).map(|s| (k as i32 - s.abs()) as f64 * a.powi(km - s) * b.powi(km + s)).sum()
}

/// State weight `K^2 (ε - E)^{2K-2}`.
pub fn weight_state(eps: f64, e: f64, k: usize) -> f64 {
    (k * k) as f64 * (eps - e).powi(2 * k as i32 - 2)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// QR up to this many unknowns, CG above.
    pub qr_max: usize,
    pub cg_tol: f64,
    pub cg_max_iter_factor: usize,
    /// Accepted relative residual before the regularized retry.
    pub residual_tol: f64,
    pub tikhonov_eps: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { qr_max: 512, cg_tol: 1e-10, cg_max_iter_factor: 50, residual_tol: 1e-8, tikhonov_eps: 1e-12 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearSolution {
    pub alpha: Vec<f64>,
    pub residual: f64,
    pub iterations: usize,
    pub rank: usize,
    pub condition_estimate: f64,
    pub regularized: bool,
}

fn relative_residual(q: &SymMatrix, x: &[f64], r: &[f64]) -> f64 {
    let rn = crate::linalg::norm(r);
    let res = residual_norm(q, x, r);
    if rn > 0.0 {
        res / rn
    } else {
        res
    }
}

/// Solves `Q α = r`; retries with Tikhonov regularization when the residual is too large.
pub fn solve_linear(q: &SymMatrix, r: &[f64], cfg: &SolverConfig) -> Result<LinearSolution> {
    let m = q.order();
    let attempt = |mat: &SymMatrix| -> Result<LinearSolution> {
        if m <= cfg.qr_max {
            let s = solve_qr_detailed(mat, r)?;
            Ok(LinearSolution {
                residual: relative_residual(q, &s.x, r),
                alpha: s.x,
                iterations: 1,
                rank: s.rank,
                condition_estimate: s.condition_estimate,
                regularized: false,
            })
        } else {
            let s = solve_cg(mat, r, cfg.cg_tol, cfg.cg_max_iter_factor * m)?;
            Ok(LinearSolution {
                residual: relative_residual(q, &s.x, r),
                alpha: s.x,
                iterations: s.iterations,
                rank: m,
                condition_estimate: f64::NAN,
                regularized: false,
            })
        }
    };
    let first = attempt(q)?;
    let tol = if m <= cfg.qr_max { cfg.residual_tol } else { cfg.residual_tol.max(cfg.cg_tol) };
    if first.residual <= tol {
        return Ok(first);
    }
    let shift = cfg.tikhonov_eps * q.trace() / m as f64;
    let mut reg = q.clone();
    for i in 0..m {
        reg.set(i, i, q.get(i, i) + shift);
    }
    let mut second = attempt(&reg)?;
    second.regularized = true;
    Ok(if second.residual < first.residual { second } else { first })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SingleSolution {
    pub alpha: Vec<f64>,
    pub e_shift: Option<f64>,
    pub solve: LinearSolution,
}

/// One λ from scratch: moments, energy shift, `(H - E)^K` with its derivative, `(Q, r)`, solve.
pub fn solve_single(h: &SparseOperator, dh: &SparseOperator, ansatz: &Ansatz, k: usize, lambda: f64, cfg: &SolverConfig) -> Result<SingleSolution> {
    let (form, e_shift) = single_form(h, dh, ansatz, k, lambda)?;
    let solve = solve_linear(&form.q, &form.r, cfg)?;
    Ok(SingleSolution { alpha: solve.alpha.clone(), e_shift, solve })
}

/// The quadratic form `solve_single` solves, with the energy shift used.
pub fn single_form(h: &SparseOperator, dh: &SparseOperator, ansatz: &Ansatz, k: usize, lambda: f64) -> Result<(QuadraticForm, Option<f64>)> {
    if k < 1 {
        return Err(Error::InvalidInput("K must be at least 1".into()));
    }
    let e_shift = if k >= 2 { Some(energy_shift(&moments(h, k, lambda)?)?) } else { None };
    let shifted = match e_shift {
        Some(e) => h.sub(&SparseOperator::identity(h.nspins(), e))?,
        None => h.clone(),
    };
    let mut leading = vec![0.0; k + 1];
    leading[k] = 1.0;
    let form = build_quadratic_form(&shifted, dh, &ActionPolynomial::new(leading)?, ansatz, lambda)?;
    Ok((form, e_shift))
}

/// Metadata stored alongside a protocol table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolMeta {
    pub schema_version: u32,
    pub k: usize,
    pub ansatz_id: String,
    pub instance_hash: String,
    pub labels: Vec<String>,
    pub iterations: Vec<usize>,
    pub regularized: Vec<bool>,
    pub failures: Vec<Option<String>>,
    pub stage1_seconds: f64,
    pub stage2_seconds: f64,
}

/// `α^(K)(λ)` on a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ProtocolTable {
    pub grid: Vec<f64>,
    pub alpha: Vec<Vec<f64>>,
    pub e_shift: Vec<Option<f64>>,
    pub residual: Vec<f64>,
    pub meta: ProtocolMeta,
}

pub fn uniform_grid(points: usize) -> Result<Vec<f64>> {
    if points < 2 {
        return Err(Error::InvalidInput("grid needs at least two points".into()));
    }
    Ok((0..points).map(|i| i as f64 / (points - 1) as f64).collect())
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() || grid.iter().any(|x| !(0.0..=1.0).contains(x)) || grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidInput("grid must be strictly increasing within [0, 1]".into()));
    }
    Ok(())
}

struct RowResult {
    alpha: Vec<f64>,
    e_shift: Option<f64>,
    residual: f64,
    iterations: usize,
    regularized: bool,
}

fn stage_two(ft: &FactorizedTraces, k: usize, lambda: f64, cfg: &SolverConfig) -> Result<RowResult> {
    let (poly, e_shift) = if k == 1 {
        (ActionPolynomial::identity(), None)
    } else {
        let e = energy_shift(&moments_factorized(ft, k, lambda)?)?;
        (gs_polynomial(k, e)?, Some(e))
    };
    let form = assemble_at_lambda(ft, &poly, lambda)?;
    let s = solve_linear(&form.q, &form.r, cfg)?;
    if s.alpha.iter().any(|x| !x.is_finite()) {
        return Err(Error::Solver("non-finite coefficients".into()));
    }
    Ok(RowResult { alpha: s.alpha, e_shift, residual: s.residual, iterations: s.iterations, regularized: s.regularized })
}

/// Stage two over a grid from cached traces (which may have been built for a higher degree).
pub fn protocol_from_traces(ft: &FactorizedTraces, ansatz: &Ansatz, k: usize, grid: &[f64], instance_hash: &str, cfg: &SolverConfig) -> Result<ProtocolTable> {
    check_grid(grid)?;
    if k < 1 || k > ft.max_degree {
        return Err(Error::InvalidInput(format!("K = {k} not covered by cached degree {}", ft.max_degree)));
    }
    if ft.m != ansatz.len() {
        return Err(Error::Dimension { expected: ft.m, found: ansatz.len() });
    }
    let start = std::time::Instant::now();
    let rows: Vec<Result<RowResult>> = grid.par_iter().map(|&l| stage_two(ft, k, l, cfg)).collect();
    let m = ansatz.len();
    let mut table = ProtocolTable {
        grid: grid.to_vec(),
        alpha: Vec::new(),
        e_shift: Vec::new(),
        residual: Vec::new(),
        meta: ProtocolMeta {
            schema_version: PROTOCOL_SCHEMA_VERSION,
            k,
            ansatz_id: ansatz.id.clone(),
            instance_hash: instance_hash.to_string(),
            labels: ansatz.labels.clone(),
            iterations: Vec::new(),
            regularized: Vec::new(),
            failures: Vec::new(),
            stage1_seconds: ft.timings.total,
            stage2_seconds: 0.0,
        },
    };
    for row in rows {
        match row {
            Ok(r) => {
                table.alpha.push(r.alpha);
                table.e_shift.push(r.e_shift);
                table.residual.push(r.residual);
                table.meta.iterations.push(r.iterations);
                table.meta.regularized.push(r.regularized);
                table.meta.failures.push(None);
            }
            Err(e) => {
                table.alpha.push(vec![f64::NAN; m]);
                table.e_shift.push(None);
                table.residual.push(f64::NAN);
                table.meta.iterations.push(0);
                table.meta.regularized.push(false);
                table.meta.failures.push(Some(e.to_string()));
            }
        }
    }
    table.meta.stage2_seconds = start.elapsed().as_secs_f64();
    Ok(table)
}

/// Both stages: cached traces, then a per-λ contraction and solve.
pub fn solve_protocol(hf: &FactorizedHamiltonian, ansatz: &Ansatz, k: usize, grid: &[f64], instance_hash: &str, cfg: &SolverConfig) -> Result<ProtocolTable> {
    check_grid(grid)?;
    let ft = precompute_factorized(hf, k, ansatz)?;
    protocol_from_traces(&ft, ansatz, k, grid, instance_hash, cfg)
}

impl ProtocolTable {
    pub fn m(&self) -> usize {
        self.meta.labels.len()
    }

    pub fn failures(&self) -> usize {
        self.meta.failures.iter().filter(|f| f.is_some()).count()
    }

    /// Linear interpolation of `α(λ)`, clamped to the grid ends.
    pub fn alpha_at(&self, lambda: f64) -> Vec<f64> {
        let g = &self.grid;
        if lambda <= g[0] {
            return self.alpha[0].clone();
        }
        if lambda >= g[g.len() - 1] {
            return self.alpha[g.len() - 1].clone();
        }
        let i = g.partition_point(|&x| x <= lambda) - 1;
        let t = (lambda - g[i]) / (g[i + 1] - g[i]);
        self.alpha[i].iter().zip(&self.alpha[i + 1]).map(|(a, b)| a + t * (b - a)).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("lambda,E_shift");
        for i in 1..=self.m() {
            let _ = write!(s, ",alpha_{i}");
        }
        s.push_str(",residual\n");
        for (i, l) in self.grid.iter().enumerate() {
            let _ = write!(s, "{l:?},");
            if let Some(e) = self.e_shift[i] {
                let _ = write!(s, "{e:?}");
            }
            for a in &self.alpha[i] {
                let _ = write!(s, ",{a:?}");
            }
            let _ = writeln!(s, ",{:?}", self.residual[i]);
        }
        s
    }

    /// Parses the CSV body; metadata comes from the sidecar.
    pub fn from_csv(text: &str, meta: ProtocolMeta) -> Result<Self> {
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().ok_or_else(|| Error::Parse("empty table".into()))?.split(',').collect();
        let m = header.len().checked_sub(3).ok_or_else(|| Error::Parse("short header".into()))?;
        if header[0] != "lambda" || header[1] != "E_shift" || header[m + 2] != "residual" {
            return Err(Error::Parse("unexpected header".into()));
        }
        let num = |s: &str| s.trim().parse::<f64>().map_err(|e| Error::Parse(format!("{s:?}: {e}")));
        let mut t = ProtocolTable { grid: vec![], alpha: vec![], e_shift: vec![], residual: vec![], meta };
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != m + 3 {
                return Err(Error::Parse(format!("expected {} fields, found {}", m + 3, f.len())));
            }
            t.grid.push(num(f[0])?);
            t.e_shift.push(if f[1].trim().is_empty() { None } else { Some(num(f[1])?) });
            t.alpha.push(f[2..m + 2].iter().map(|s| num(s)).collect::<Result<_>>()?);
            t.residual.push(num(f[m + 2])?);
        }
        check_grid(&t.grid)?;
        Ok(t)
    }

    /// Writes `<stem>.csv` and `<stem>.json`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(format!("{stem}.csv")), self.to_csv())?;
        std::fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&self.meta)?)?;
        Ok(())
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let meta: ProtocolMeta = serde_json::from_str(&std::fs::read_to_string(dir.join(format!("{stem}.json")))?)?;
        Self::from_csv(&std::fs::read_to_string(dir.join(format!("{stem}.csv")))?, meta)
    }
}

/// `V = Σ α_μ A_μ` as a sparse operator at λ.
pub fn driving_operator(table: &ProtocolTable, ansatz: &Ansatz, lambda: f64) -> SparseOperator {
    ansatz.combine(&table.alpha_at(lambda))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pauli::Axis;

    #[test]
    fn polynomial_coefficients() {
        assert_eq!(gs_polynomial(2, 1.0).unwrap().coeffs, vec![1.0, -2.0, 1.0]);
        assert_eq!(gs_polynomial(1, 3.0).unwrap().coeffs, vec![-3.0, 1.0]);
        assert_eq!(gs_polynomial(3, 0.0).unwrap().coeffs, vec![0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn single_z_moments() {
        let h = SparseOperator::single(1, Axis::Z, 0, 1.0);
        let p = moments(&h, 3, 0.0).unwrap();
        assert_eq!(p.omega, vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn two_level_shift_matches_grid_scan() {
        let p = EnergyShiftProblem { k: 2, omega: vec![1.0, 0.0, 1.0, 0.0], lambda: 0.0 };
        let e = energy_shift(&p).unwrap();
        let mut best = (f64::INFINITY, 0.0);
        let mut x = -10.0;
        while x <= 10.0 {
            let v = p.omega_at(x);
            if v < best.0 {
                best = (v, x);
            }
            x += 1e-4;
        }
        assert!((e - best.1).abs() < 2e-4, "{e} vs {}", best.1);
    }

    #[test]
    fn weight_forms_agree() {
        for &(em, en, e) in &[(0.3, -1.2, -0.5), (2.0, 1.5, 0.1), (-3.0, 4.0, 1.0)] {
            for k in 1..=5 {
                let a = weight_pair(em, en, e, k);
                let b = weight_pair_ratio(em, en, e, k);
                assert!((a - b).abs() <= 1e-10 * b.abs().max(1e-300), "{a} {b}");
            }
        }
        assert_eq!(weight_pair(0.5, 0.5, 0.0, 3), weight_state(0.5, 0.0, 3));
    }

    #[test]
    fn grid_checks() {
        assert_eq!(uniform_grid(3).unwrap(), vec![0.0, 0.5, 1.0]);
        assert!(check_grid(&[0.0, 0.0]).is_err());
        assert!(check_grid(&[0.0, 1.5]).is_err());
    }

    #[test]
    fn tikhonov_retry_on_inconsistent_system() {
        let q = SymMatrix::from_row_major(2, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let s = solve_linear(&q, &[1.0, 1.0], &SolverConfig::default()).unwrap();
        assert!(s.residual > 1e-8);
        assert!(s.alpha.iter().all(|x| x.is_finite()));
    }
}
