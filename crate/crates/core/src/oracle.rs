//! Dense-matrix ground truth for small systems.
//!
//! Basis states are bit strings with site 0 as the most significant bit, so a
//! Pauli string maps to a Kronecker product whose leftmost factor acts on site 0.

use std::fmt::Write as _;
use std::sync::Mutex;

use nalgebra::{DMatrix, DVector};
use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

use crate::action::{precompute_factorized, ActionPolynomial};
use crate::model::{Ansatz, AnsatzKind, FactorizedHamiltonian, IsingInstance, ScalarPoly};
use crate::pauli::{PauliTerm, SparseOperator, C64};
use crate::protocol::{protocol_from_traces, weight_pair, weight_state, ProtocolTable, SolverConfig};
use crate::{Error, Result};

pub type CMatrix = DMatrix<C64>;
pub type CVector = DVector<C64>;

/// Largest spin count accepted for dense matrices.
pub const MAX_DENSE_SPINS: usize = 14;
/// Relative gap below which two levels count as degenerate.
pub const DEGENERACY_TOL: f64 = 1e-10;

fn i_pow(k: u32) -> C64 {
    match k % 4 {
        0 => C64::new(1.0, 0.0),
        1 => C64::new(0.0, 1.0),
        2 => C64::new(-1.0, 0.0),
        _ => C64::new(0.0, -1.0),
    }
}

/// `(flip, sign_mask, i^{#Y})` with `σ|b⟩ = i^{#Y} (-1)^{popcount(b & sign_mask)} |b ^ flip⟩`.
fn term_action(t: &PauliTerm, n: usize) -> (u64, u64, C64) {
    let (x, y, z) = t.masks();
    let rev = |m: u64| -> u64 {
        let mut out = 0u64;
        for s in 0..n {
            if m >> s & 1 == 1 {
                out |= 1 << (n - 1 - s);
            }
        }
        out
    };
    let (x, y, z) = (rev(x), rev(y), rev(z));
    (x | y, y | z, i_pow(y.count_ones()))
}

fn guard(n: usize, max: usize) -> Result<()> {
    if n > max {
        return Err(Error::ResourceGuard(format!("{n} spins exceed the dense limit of {max}")));
    }
    Ok(())
}

pub fn to_dense(a: &SparseOperator) -> Result<CMatrix> {
    to_dense_guarded(a, MAX_DENSE_SPINS)
}

pub fn to_dense_guarded(a: &SparseOperator, max_spins: usize) -> Result<CMatrix> {
    let n = a.nspins();
    guard(n, max_spins)?;
    let dim = 1usize << n;
    let mut m = CMatrix::zeros(dim, dim);
    for (t, c) in a.sorted_terms() {
        let (flip, sign, ph) = term_action(t, n);
        let base = c * ph;
        for b in 0..dim as u64 {
            let v = if (b & sign).count_ones() % 2 == 0 { base } else { -base };
            m[((b ^ flip) as usize, b as usize)] += v;
        }
    }
    Ok(m)
}

/// A sparse operator grouped by bit-flip pattern for fast state-vector products.
#[derive(Clone, Debug)]
pub struct CompiledOperator {
    dim: usize,
    groups: Vec<(u64, Vec<C64>)>,
}

impl CompiledOperator {
    pub fn new(a: &SparseOperator) -> Result<Self> {
        let n = a.nspins();
        guard(n, MAX_DENSE_SPINS)?;
        let dim = 1usize << n;
        let mut groups: Vec<(u64, Vec<C64>)> = Vec::new();
        for (t, c) in a.sorted_terms() {
            let (flip, sign, ph) = term_action(t, n);
            let base = c * ph;
            let slot = match groups.iter().position(|(f, _)| *f == flip) {
                Some(i) => i,
                None => {
                    groups.push((flip, vec![C64::default(); dim]));
                    groups.len() - 1
                }
            };
            for (b, v) in groups[slot].1.iter_mut().enumerate() {
                if (b as u64 & sign).count_ones() % 2 == 0 {
                    *v += base;
                } else {
                    *v -= base;
                }
            }
        }
        Ok(Self { dim, groups })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `out += s · A ψ`.
    pub fn apply_add(&self, s: C64, psi: &[C64], out: &mut [C64]) {
        for (flip, vals) in &self.groups {
            let f = *flip as usize;
            for b in 0..self.dim {
                out[b ^ f] += s * vals[b] * psi[b];
            }
        }
    }
}

/// Dense Hamiltonian with its ordered eigendecomposition.
#[derive(Clone, Debug)]
pub struct DenseSystem {
    pub h: CMatrix,
    pub eigenvalues: Vec<f64>,
    /// Columns are eigenvectors, each with its largest component real and positive.
    pub eigenvectors: CMatrix,
}

impl DenseSystem {
    pub fn new(h: CMatrix) -> Result<Self> {
        let dim = h.nrows();
        if h.ncols() != dim {
            return Err(Error::Dimension { expected: dim, found: h.ncols() });
        }
        let (vals, vecs) = if h.iter().all(|z| z.im == 0.0) {
            let re = h.map(|z| z.re);
            let e = re.symmetric_eigen();
            (e.eigenvalues.as_slice().to_vec(), e.eigenvectors.map(|x| C64::new(x, 0.0)))
        } else {
            let e = h.clone().symmetric_eigen();
            (e.eigenvalues.as_slice().to_vec(), e.eigenvectors)
        };
        let mut order: Vec<usize> = (0..dim).collect();
        order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
        let eigenvalues = order.iter().map(|&i| vals[i]).collect();
        let mut eigenvectors = CMatrix::zeros(dim, dim);
        for (j, &i) in order.iter().enumerate() {
            let col = vecs.column(i);
            let mut best = 0;
            for r in 0..dim {
                if col[r].norm() > col[best].norm() + 1e-12 {
                    best = r;
                }
            }
            let phase = col[best].conj() / col[best].norm();
            eigenvectors.set_column(j, &(col * phase));
        }
        Ok(Self { h, eigenvalues, eigenvectors })
    }

    pub fn from_operator(a: &SparseOperator) -> Result<Self> {
        Self::new(to_dense(a)?)
    }

    pub fn at(hf: &FactorizedHamiltonian, lambda: f64) -> Result<Self> {
        Self::from_operator(&hf.eval(lambda))
    }

    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn spectral_norm(&self) -> f64 {
        self.eigenvalues.iter().map(|e| e.abs()).fold(0.0, f64::max)
    }

    pub fn ground_state(&self) -> CVector {
        self.eigenvectors.column(0).into_owned()
    }

    /// `max_n ‖H φ_n - ε_n φ_n‖`.
    pub fn max_residual(&self) -> f64 {
        (0..self.dim())
            .map(|n| {
                let v = self.eigenvectors.column(n);
                (&self.h * v - v * C64::new(self.eigenvalues[n], 0.0)).norm()
            })
            .fold(0.0, f64::max)
    }

    /// `U† M U`.
    pub fn to_eigenbasis(&self, m: &CMatrix) -> CMatrix {
        self.eigenvectors.adjoint() * m * &self.eigenvectors
    }

    /// `U M U†`.
    pub fn from_eigenbasis(&self, m: &CMatrix) -> CMatrix {
        &self.eigenvectors * m * self.eigenvectors.adjoint()
    }

    fn degeneracy_gap(&self) -> f64 {
        DEGENERACY_TOL * self.spectral_norm().max(1e-300)
    }

    /// Number of levels degenerate with the ground state.
    pub fn ground_multiplicity(&self) -> usize {
        let g = self.degeneracy_gap();
        self.eigenvalues.iter().take_while(|&&e| e - self.eigenvalues[0] <= g).count()
    }

    /// Population of the ground eigenspace.
    pub fn ground_fidelity(&self, psi: &CVector) -> f64 {
        (0..self.ground_multiplicity()).map(|n| self.eigenvectors.column(n).dotc(psi).norm_sqr()).sum()
    }
}

/// What to do with degenerate levels coupled by `∂_λH`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DegeneracyPolicy {
    /// Any coupled degenerate pair is an error.
    Strict,
    /// Only pairs inside the ground-state block are errors; other coupled blocks are zeroed.
    GroundStateOnly,
}

/// `Φ` in the eigenbasis: `Φ_nm = i ⟨n|∂H|m⟩ / (ε_m - ε_n)`, zero on the diagonal.
pub fn exact_agp_eigenbasis(ds: &DenseSystem, dh: &CMatrix, policy: DegeneracyPolicy) -> Result<CMatrix> {
    let d = ds.to_eigenbasis(dh);
    let dim = ds.dim();
    let gap = ds.degeneracy_gap();
    let dnorm = dh.iter().map(|z| z.norm()).fold(0.0, f64::max).max(1e-300);
    let e0 = ds.eigenvalues[0];
    let mut phi = CMatrix::zeros(dim, dim);
    for n in 0..dim {
        for m in 0..dim {
            if n == m {
                continue;
            }
            let de = ds.eigenvalues[m] - ds.eigenvalues[n];
            if de.abs() > gap {
                phi[(n, m)] = C64::new(0.0, 1.0) * d[(n, m)] / de;
                continue;
            }
            let coupling = d[(n, m)].norm();
            if coupling <= DEGENERACY_TOL * dnorm {
                continue;
            }
            let in_ground = ds.eigenvalues[n] - e0 <= gap;
            if policy == DegeneracyPolicy::Strict || in_ground {
                return Err(Error::Degeneracy { n, m, coupling });
            }
        }
    }
    Ok(phi)
}

/// `Φ` in the computational basis, strict degeneracy policy.
pub fn exact_agp(ds: &DenseSystem, dh: &CMatrix) -> Result<CMatrix> {
    Ok(ds.from_eigenbasis(&exact_agp_eigenbasis(ds, dh, DegeneracyPolicy::Strict)?))
}

/// `Σ_{nm} [P(ε_m) - P(ε_n)]^2 |[V - Φ]_{mn}|^2` with `V`, `Φ` in the computational basis.
pub fn action_eigenbasis(ds: &DenseSystem, poly: &ActionPolynomial, v: &CMatrix, phi: &CMatrix) -> f64 {
    let diff = ds.to_eigenbasis(&(v - phi));
    let p: Vec<f64> = ds.eigenvalues.iter().map(|&e| poly.eval(e)).collect();
    let mut s = 0.0;
    for n in 0..ds.dim() {
        for m in 0..ds.dim() {
            let w = p[m] - p[n];
            s += w * w * diff[(m, n)].norm_sqr();
        }
    }
    s
}

/// Partial actions `T^(K,n)` and state weights `w_n` for `(x - E)^K`.
#[derive(Clone, Debug, PartialEq)]
pub struct PartialActions {
    pub t: Vec<f64>,
    pub w: Vec<f64>,
}

fn same_weight(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * a.abs().max(b.abs())
}

/// Terms `(m, c_m)` of `T^(K,n)` with `c_m = (ε_n - ε_m)^2 χ_mn w_mn / w_n`.
fn partial_weights(eps: &[f64], e: f64, k: usize, n: usize) -> Vec<(usize, f64)> {
    let w: Vec<f64> = eps.iter().map(|&x| weight_state(x, e, k)).collect();
    if w[n] == 0.0 {
        return Vec::new();
    }
    (0..eps.len())
        .filter(|&m| m != n && (w[m] <= w[n] || same_weight(w[m], w[n])))
        .map(|m| {
            let chi = if same_weight(w[m], w[n]) { 0.5 } else { 1.0 };
            let de = eps[n] - eps[m];
            (m, de * de * chi * weight_pair(eps[m], eps[n], e, k) / w[n])
        })
        .collect()
}

/// Partial actions with `V`, `Φ` in the computational basis.
pub fn partial_actions(ds: &DenseSystem, k: usize, e: f64, v: &CMatrix, phi: &CMatrix) -> PartialActions {
    let diff = ds.to_eigenbasis(&(v - phi));
    let eps = &ds.eigenvalues;
    let t = (0..ds.dim()).map(|n| partial_weights(eps, e, k, n).iter().map(|&(m, c)| c * diff[(m, n)].norm_sqr()).sum()).collect();
    let w = eps.iter().map(|&x| weight_state(x, e, k)).collect();
    PartialActions { t, w }
}

/// `2 Σ_{n≠1} |[V - Φ]_{1n}|^2`.
pub fn ideal_action(ds: &DenseSystem, v: &CMatrix, phi: &CMatrix) -> f64 {
    let diff = ds.to_eigenbasis(&(v - phi));
    2.0 * (1..ds.dim()).map(|n| diff[(0, n)].norm_sqr()).sum::<f64>()
}

/// Ansatz operators and `Φ` in the eigenbasis of one dense system.
pub struct EigenbasisAnsatz {
    pub ops: Vec<CMatrix>,
    pub phi: CMatrix,
}

impl EigenbasisAnsatz {
    pub fn new(ds: &DenseSystem, ansatz: &Ansatz, phi_eigen: CMatrix) -> Result<Self> {
        let ops = ansatz.operators.iter().map(|a| Ok(ds.to_eigenbasis(&to_dense(a)?))).collect::<Result<_>>()?;
        Ok(Self { ops, phi: phi_eigen })
    }

    /// Minimizes `Σ c |Σ_μ α_μ [A_μ]_{mn} - Φ_{mn}|^2` over the listed `(m, n, c)`.
    fn weighted_fit(&self, cells: &[(usize, usize, f64)]) -> Result<Vec<f64>> {
        let mm = self.ops.len();
        let mut g = vec![0.0; mm * mm];
        let mut b = vec![0.0; mm];
        for &(m, n, c) in cells {
            let a: Vec<C64> = self.ops.iter().map(|o| o[(m, n)]).collect();
            let p = self.phi[(m, n)];
            for mu in 0..mm {
                b[mu] += c * (a[mu].conj() * p).re;
                for nu in 0..mm {
                    g[mu * mm + nu] += c * (a[mu].conj() * a[nu]).re;
                }
            }
        }
        let q = crate::linalg::SymMatrix::from_row_major(mm, g)?;
        crate::linalg::solve_qr(&q, &b)
    }

    /// Minimizer of the ideal action.
    pub fn alpha_ideal(&self) -> Result<Vec<f64>> {
        let cells: Vec<_> = (1..self.phi.nrows()).map(|n| (0, n, 1.0)).collect();
        self.weighted_fit(&cells)
    }

    /// Minimizer of `T^(K,n)`.
    pub fn alpha_partial(&self, eps: &[f64], e: f64, k: usize, n: usize) -> Result<Vec<f64>> {
        let cells: Vec<_> = partial_weights(eps, e, k, n).into_iter().map(|(m, c)| (m, n, c)).collect();
        self.weighted_fit(&cells)
    }

    /// Minimizer of the full eigenbasis action for `(x - E)^K`.
    pub fn alpha_weighted(&self, eps: &[f64], e: f64, k: usize) -> Result<Vec<f64>> {
        let mut cells = Vec::new();
        for n in 0..eps.len() {
            for m in 0..eps.len() {
                if m != n {
                    let de = eps[m] - eps[n];
                    cells.push((m, n, de * de * weight_pair(eps[m], eps[n], e, k)));
                }
            }
        }
        self.weighted_fit(&cells)
    }
}

/// Counterdiabatic term used during evolution.
#[derive(Clone, Copy)]
pub enum Driving<'a> {
    Bare,
    Protocol { table: &'a ProtocolTable, ansatz: &'a Ansatz },
    ExactAgp,
}

impl Driving<'_> {
    pub fn label(&self) -> String {
        match self {
            Driving::Bare => "none".into(),
            Driving::Protocol { table, .. } => format!("K={}", table.meta.k),
            Driving::ExactAgp => "exact-agp".into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntegratorConfig {
    /// RK4 steps per λ interval in the first attempt.
    pub initial_steps: usize,
    /// λ intervals when no protocol grid is given.
    pub intervals: usize,
    /// Accepted change of the final fidelity between successive doublings.
    pub tol: f64,
    pub norm_tol: f64,
    pub max_doublings: usize,
    /// Record the instantaneous ground-state fidelity at every interval boundary.
    pub record: bool,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self { initial_steps: 1, intervals: 99, tol: 1e-6, norm_tol: 1e-8, max_doublings: 14, record: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvolutionSettings {
    pub t_d: f64,
    pub driving: String,
    pub steps_per_interval: usize,
    pub intervals: usize,
    pub last_delta: f64,
}

#[derive(Clone, Debug)]
pub struct EvolutionResult {
    pub times: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub fidelity: Vec<f64>,
    pub states: Vec<CVector>,
    pub final_fidelity: f64,
    pub max_norm_error: f64,
    pub settings: EvolutionSettings,
}

impl EvolutionResult {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,lambda,fidelity\n");
        for i in 0..self.times.len() {
            let _ = writeln!(s, "{:?},{:?},{:?}", self.times[i], self.lambdas[i], self.fidelity[i]);
        }
        s
    }

    pub fn summary_json(&self, gain: Option<f64>) -> Result<String> {
        #[derive(Serialize)]
        struct Summary<'a> {
            #[serde(rename = "F_f")]
            f_f: f64,
            #[serde(rename = "G_f")]
            g_f: Option<String>,
            max_norm_error: f64,
            settings: &'a EvolutionSettings,
        }
        let g_f = gain.map(|g| if g.is_finite() { format!("{g:?}") } else { "inf".into() });
        Ok(serde_json::to_string_pretty(&Summary { f_f: self.final_fidelity, g_f, max_norm_error: self.max_norm_error, settings: &self.settings })?)
    }
}

/// Reusable pieces of the evolution for one Hamiltonian.
pub struct Evolver {
    factors: Vec<(CompiledOperator, ScalarPoly)>,
    /// Sum of absolute Pauli coefficients per factor, a bound on its spectral norm.
    factor_norms: Vec<f64>,
    dense_factors: Vec<CMatrix>,
    initial: DenseSystem,
    terminal: DenseSystem,
    /// Ground eigenspace of `H(λ)` by the bits of λ.
    ground_cache: Mutex<FxHashMap<u64, CMatrix>>,
}

/// RK4 steps are sized so that `Δλ ‖t_d H + V‖` stays below this.
const STABLE_STEP: f64 = 2.0;

fn pauli_norm(op: &SparseOperator) -> f64 {
    op.terms().values().map(|c| c.norm()).sum()
}

impl Evolver {
    pub fn new(hf: &FactorizedHamiltonian) -> Result<Self> {
        let factors = hf.factors().iter().map(|(op, f)| Ok((CompiledOperator::new(op)?, f.clone()))).collect::<Result<Vec<_>>>()?;
        let dense_factors = hf.factors().iter().map(|(op, _)| to_dense(op)).collect::<Result<Vec<_>>>()?;
        let build = |l: f64| {
            let mut h = CMatrix::zeros(dense_factors[0].nrows(), dense_factors[0].ncols());
            for (m, (_, f)) in dense_factors.iter().zip(hf.factors()) {
                h += m * C64::new(f.value(l), 0.0);
            }
            DenseSystem::new(h)
        };
        let initial = build(0.0)?;
        if initial.ground_multiplicity() != 1 {
            return Err(Error::InvalidInput("initial ground state is degenerate".into()));
        }
        let terminal = build(1.0)?;
        let factor_norms = hf.factors().iter().map(|(op, _)| pauli_norm(op)).collect();
        Ok(Self { factors, factor_norms, dense_factors, initial, terminal, ground_cache: Mutex::new(FxHashMap::default()) })
    }

    pub fn dense_h(&self, lambda: f64) -> CMatrix {
        let mut h = CMatrix::zeros(self.dense_factors[0].nrows(), self.dense_factors[0].ncols());
        for (m, (_, f)) in self.dense_factors.iter().zip(&self.factors) {
            h += m * C64::new(f.value(lambda), 0.0);
        }
        h
    }

    pub fn dense_dh(&self, lambda: f64) -> CMatrix {
        let mut h = CMatrix::zeros(self.dense_factors[0].nrows(), self.dense_factors[0].ncols());
        for (m, (_, f)) in self.dense_factors.iter().zip(&self.factors) {
            h += m * C64::new(f.derivative(lambda), 0.0);
        }
        h
    }

    pub fn initial_state(&self) -> CVector {
        self.initial.ground_state()
    }

    pub fn terminal_system(&self) -> &DenseSystem {
        &self.terminal
    }

    /// Population of the ground eigenspace of `H(λ)`; eigenspaces are cached per λ.
    pub fn ground_fidelity_at(&self, lambda: f64, psi: &CVector) -> Result<f64> {
        let key = lambda.to_bits();
        let cached = self.ground_cache.lock().expect("cache lock").get(&key).cloned();
        let space = match cached {
            Some(g) => g,
            None => {
                let ds = DenseSystem::new(self.dense_h(lambda))?;
                let g = ds.eigenvectors.columns(0, ds.ground_multiplicity()).into_owned();
                self.ground_cache.lock().expect("cache lock").insert(key, g.clone());
                g
            }
        };
        Ok(space.column_iter().map(|c| c.dotc(psi).norm_sqr()).sum())
    }

    /// Step count per interval keeping `Δλ ‖t_d H + V‖` under [`STABLE_STEP`].
    fn stable_steps(&self, driving: &Driving<'_>, t_d: f64, knots: &[f64]) -> usize {
        let drive_norms: Vec<f64> = match driving {
            Driving::Protocol { ansatz, .. } => ansatz.operators.iter().map(pauli_norm).collect(),
            _ => Vec::new(),
        };
        let bound = |l: f64| -> f64 {
            let h: f64 = self.factors.iter().zip(&self.factor_norms).map(|((_, f), n)| (t_d * f.value(l)).abs() * n).sum();
            let v: f64 = match driving {
                Driving::Protocol { table, .. } => table.alpha_at(l).iter().zip(&drive_norms).map(|(a, n)| a.abs() * n).sum(),
                _ => 0.0,
            };
            h + v
        };
        let worst = knots.windows(2).map(|w| (w[1] - w[0]) * bound(w[0]).max(bound(w[1]))).fold(0.0, f64::max);
        (worst / STABLE_STEP).ceil().max(1.0) as usize
    }

    /// `dψ/dλ = -i (t_d H(λ) + V(λ)) ψ`.
    fn derivative(&self, driving: &Driving<'_>, drive_ops: &[CompiledOperator], t_d: f64, lambda: f64, psi: &[C64], out: &mut [C64]) -> Result<()> {
        out.iter_mut().for_each(|x| *x = C64::default());
        let mi = C64::new(0.0, -1.0);
        for (op, f) in &self.factors {
            op.apply_add(mi * t_d * f.value(lambda), psi, out);
        }
        match driving {
            Driving::Bare => {}
            Driving::Protocol { table, .. } => {
                for (op, a) in drive_ops.iter().zip(table.alpha_at(lambda)) {
                    op.apply_add(mi * a, psi, out);
                }
            }
            Driving::ExactAgp => {
                let ds = DenseSystem::new(self.dense_h(lambda))?;
                let phi = exact_agp_eigenbasis(&ds, &self.dense_dh(lambda), DegeneracyPolicy::GroundStateOnly)?;
                let v = CVector::from_column_slice(psi);
                let w = &ds.eigenvectors * (phi * (ds.eigenvectors.adjoint() * v));
                for (o, x) in out.iter_mut().zip(w.iter()) {
                    *o += mi * x;
                }
            }
        }
        Ok(())
    }

    /// One fixed-step pass; `None` if the state blew up.
    fn run_once(&self, driving: &Driving<'_>, drive_ops: &[CompiledOperator], t_d: f64, knots: &[f64], steps: usize, record: bool) -> Result<Option<(CVector, f64, Vec<f64>, Vec<CVector>)>> {
        let dim = self.initial.dim();
        let mut psi: Vec<C64> = self.initial.ground_state().as_slice().to_vec();
        let mut k1 = vec![C64::default(); dim];
        let mut k2 = k1.clone();
        let mut k3 = k1.clone();
        let mut k4 = k1.clone();
        let mut tmp = k1.clone();
        let mut fids = Vec::new();
        let mut states = Vec::new();
        let mut max_norm_err: f64 = 0.0;
        let store = |psi: &[C64], l: f64, fids: &mut Vec<f64>, states: &mut Vec<CVector>| -> Result<()> {
            if record {
                let v = CVector::from_column_slice(psi);
                fids.push(self.ground_fidelity_at(l, &v)?);
                states.push(v);
            }
            Ok(())
        };
        store(&psi, knots[0], &mut fids, &mut states)?;
        for w in knots.windows(2) {
            let h = (w[1] - w[0]) / steps as f64;
            for s in 0..steps {
                let l = w[0] + s as f64 * h;
                self.derivative(driving, drive_ops, t_d, l, &psi, &mut k1)?;
                for i in 0..dim {
                    tmp[i] = psi[i] + k1[i] * (0.5 * h);
                }
                self.derivative(driving, drive_ops, t_d, l + 0.5 * h, &tmp, &mut k2)?;
                for i in 0..dim {
                    tmp[i] = psi[i] + k2[i] * (0.5 * h);
                }
                self.derivative(driving, drive_ops, t_d, l + 0.5 * h, &tmp, &mut k3)?;
                for i in 0..dim {
                    tmp[i] = psi[i] + k3[i] * h;
                }
                self.derivative(driving, drive_ops, t_d, l + h, &tmp, &mut k4)?;
                for i in 0..dim {
                    psi[i] += (k1[i] + k2[i] * 2.0 + k3[i] * 2.0 + k4[i]) * (h / 6.0);
                }
            }
            let nrm = psi.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            if !nrm.is_finite() {
                return Ok(None);
            }
            max_norm_err = max_norm_err.max((nrm - 1.0).abs());
            store(&psi, w[1], &mut fids, &mut states)?;
        }
        Ok(Some((CVector::from_vec(psi), max_norm_err, fids, states)))
    }

    /// Integrates from the ground state of `H(0)` and doubles the step count until converged.
    pub fn run(&self, driving: Driving<'_>, t_d: f64, cfg: &IntegratorConfig) -> Result<EvolutionResult> {
        if !(t_d > 0.0) || !t_d.is_finite() {
            return Err(Error::InvalidInput(format!("duration must be positive, got {t_d}")));
        }
        let (knots, drive_ops) = match &driving {
            Driving::Protocol { table, ansatz } => {
                if table.grid[0] != 0.0 || table.grid[table.grid.len() - 1] != 1.0 {
                    return Err(Error::InvalidInput("protocol grid must span [0, 1]".into()));
                }
                if table.failures() > 0 || ansatz.len() != table.m() {
                    return Err(Error::InvalidInput("protocol table has gaps or does not match the ansatz".into()));
                }
                let ops = ansatz.operators.iter().map(CompiledOperator::new).collect::<Result<Vec<_>>>()?;
                (table.grid.clone(), ops)
            }
            _ => ((0..=cfg.intervals).map(|i| i as f64 / cfg.intervals as f64).collect(), Vec::new()),
        };
        let mut steps = cfg.initial_steps.max(1).max(self.stable_steps(&driving, t_d, &knots));
        let mut prev: Option<f64> = None;
        let mut last_delta = f64::NAN;
        for _ in 0..=cfg.max_doublings {
            let Some((psi, norm_err, _, _)) = self.run_once(&driving, &drive_ops, t_d, &knots, steps, false)? else {
                prev = None;
                steps *= 2;
                continue;
            };
            let f = self.terminal.ground_fidelity(&psi);
            if let Some(p) = prev {
                last_delta = (f - p).abs();
                if last_delta <= cfg.tol && norm_err <= cfg.norm_tol {
                    let (psi, norm_err, fids, states) = if cfg.record {
                        self.run_once(&driving, &drive_ops, t_d, &knots, steps, true)?.ok_or_else(|| Error::Integration("state diverged on the recorded pass".into()))?
                    } else {
                        (psi, norm_err, Vec::new(), Vec::new())
                    };
                    let final_fidelity = self.terminal.ground_fidelity(&psi);
                    let (times, lambdas) = if cfg.record { (knots.iter().map(|l| l * t_d).collect(), knots.clone()) } else { (vec![t_d], vec![1.0]) };
                    let fidelity = if cfg.record { fids } else { vec![final_fidelity] };
                    return Ok(EvolutionResult {
                        times,
                        lambdas,
                        fidelity,
                        states,
                        final_fidelity,
                        max_norm_error: norm_err,
                        settings: EvolutionSettings { t_d, driving: driving.label(), steps_per_interval: steps, intervals: knots.len() - 1, last_delta },
                    });
                }
            }
            prev = Some(f);
            steps *= 2;
        }
        Err(Error::Integration(format!("final fidelity still changed by {last_delta:.3e} at {} steps per interval", steps / 2)))
    }
}

pub fn evolve(hf: &FactorizedHamiltonian, driving: Driving<'_>, t_d: f64, cfg: &IntegratorConfig) -> Result<EvolutionResult> {
    Evolver::new(hf)?.run(driving, t_d, cfg)
}

/// `F_f^(K) / F_f^(1)`, with `+∞` when the reference fidelity is zero.
pub fn fidelity_gain(f: f64, f_reference: f64) -> f64 {
    if f_reference == 0.0 {
        f64::INFINITY
    } else {
        f / f_reference
    }
}

/// `sqrt(Σ_{n≠1} |[V - Φ]_{1n}|^2)` at one λ, with `V` in the computational basis.
pub fn speed_limit_integrand(ds: &DenseSystem, dh: &CMatrix, v: &CMatrix) -> Result<f64> {
    let phi = exact_agp_eigenbasis(ds, dh, DegeneracyPolicy::GroundStateOnly)?;
    let ve = ds.to_eigenbasis(v);
    Ok((1..ds.dim()).map(|n| (ve[(0, n)] - phi[(0, n)]).norm_sqr()).sum::<f64>().sqrt())
}

/// `∫_0^1 sqrt(Σ_{n≠1} |[V - Φ]_{1n}|^2) dλ` by composite Simpson quadrature.
///
/// `refine` subintervals (rounded up to even) per interval of the protocol grid,
/// or of a 100-interval grid without a protocol.
pub fn speed_limit_bound(hf: &FactorizedHamiltonian, protocol: Option<(&ProtocolTable, &Ansatz)>, refine: usize) -> Result<f64> {
    let knots: Vec<f64> = match protocol {
        Some((t, _)) => t.grid.clone(),
        None => (0..=100).map(|i| i as f64 / 100.0).collect(),
    };
    let sub = refine.max(2).next_multiple_of(2);
    let ev = Evolver::new(hf)?;
    let integrand = |l: f64| -> Result<f64> {
        let ds = DenseSystem::new(ev.dense_h(l))?;
        let v = match protocol {
            Some((t, a)) => to_dense(&a.combine(&t.alpha_at(l)))?,
            None => CMatrix::zeros(ds.dim(), ds.dim()),
        };
        speed_limit_integrand(&ds, &ev.dense_dh(l), &v)
    };
    let mut total = 0.0;
    for w in knots.windows(2) {
        let h = (w[1] - w[0]) / sub as f64;
        let mut s = integrand(w[0])? + integrand(w[1])?;
        for j in 1..sub {
            s += if j % 2 == 1 { 4.0 } else { 2.0 } * integrand(w[0] + j as f64 * h)?;
        }
        total += s * h / 3.0;
    }
    Ok(total)
}

/// `arccos |c_1(t_d)|` from a final fidelity.
pub fn fidelity_angle(final_fidelity: f64) -> f64 {
    final_fidelity.clamp(0.0, 1.0).sqrt().acos()
}

/// Response `δ ln|α_μ| / δ ln h_site` by a central difference with `ln h → ln h ± ln(1 + delta) / 2`.
pub fn response_function(inst: &IsingInstance, kind: AnsatzKind, k: usize, lambda: f64, site: usize, delta: f64, cfg: &SolverConfig) -> Result<Vec<f64>> {
    if site >= inst.nspins() || !(delta > 0.0) {
        return Err(Error::InvalidInput("bad site or step".into()));
    }
    let s = (1.0 + delta).ln();
    let h0 = inst.h[site];
    let alpha = |factor: f64| -> Result<Vec<f64>> {
        let perturbed = inst.with_field(site, h0 * factor);
        let hf = crate::model::ising_hamiltonian(&perturbed);
        let ansatz = kind.build(&perturbed);
        let ft = precompute_factorized(&hf, k, &ansatz)?;
        let t = protocol_from_traces(&ft, &ansatz, k, &[lambda], "", cfg)?;
        if let Some(Some(f)) = t.meta.failures.first() {
            return Err(Error::Solver(f.clone()));
        }
        Ok(t.alpha[0].clone())
    };
    let up = alpha((0.5 * s).exp())?;
    let down = alpha((-0.5 * s).exp())?;
    Ok(up.iter().zip(&down).map(|(a, b)| (a.abs().ln() - b.abs().ln()) / s).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pauli::Axis;

    fn c(re: f64) -> C64 {
        C64::new(re, 0.0)
    }

    #[test]
    fn identity_and_ordering() {
        let id = to_dense(&SparseOperator::identity(1, 1.0)).unwrap();
        assert_eq!(id, CMatrix::identity(2, 2));
        let x1 = to_dense(&SparseOperator::single(2, Axis::X, 0, 1.0)).unwrap();
        let mut expected = CMatrix::zeros(4, 4);
        for (r, col) in [(2, 0), (3, 1), (0, 2), (1, 3)] {
            expected[(r, col)] = c(1.0);
        }
        assert_eq!(x1, expected);
    }

    #[test]
    fn y_matrix() {
        let y = to_dense(&SparseOperator::single(1, Axis::Y, 0, 1.0)).unwrap();
        assert_eq!(y[(1, 0)], C64::new(0.0, 1.0));
        assert_eq!(y[(0, 1)], C64::new(0.0, -1.0));
    }

    #[test]
    fn guard_triggers() {
        assert!(to_dense_guarded(&SparseOperator::identity(5, 1.0), 4).is_err());
    }

    #[test]
    fn two_level_agp() {
        for &l in &[0.1, 0.37, 0.5, 0.8] {
            let h = SparseOperator::single(1, Axis::X, 0, 1.0 - l).add(&SparseOperator::single(1, Axis::Z, 0, l)).unwrap();
            let dh = SparseOperator::single(1, Axis::X, 0, -1.0).add(&SparseOperator::single(1, Axis::Z, 0, 1.0)).unwrap();
            let ds = DenseSystem::from_operator(&h).unwrap();
            let phi = exact_agp(&ds, &to_dense(&dh).unwrap()).unwrap();
            let coef = -1.0 / (2.0 * (1.0 - 2.0 * l + 2.0 * l * l));
            let expected = to_dense(&SparseOperator::single(1, Axis::Y, 0, coef)).unwrap();
            assert!((phi - expected).norm() < 1e-12);
        }
    }

    #[test]
    fn commuting_derivative_gives_zero_agp() {
        let h = SparseOperator::single(2, Axis::Z, 0, 1.0).add(&SparseOperator::single(2, Axis::Z, 1, 0.3)).unwrap();
        let dh = SparseOperator::single(2, Axis::Z, 0, 0.7);
        let ds = DenseSystem::from_operator(&h).unwrap();
        assert!(exact_agp(&ds, &to_dense(&dh).unwrap()).unwrap().norm() < 1e-14);
    }

    #[test]
    fn coupled_degeneracy_is_reported() {
        let h = SparseOperator::single(2, Axis::Z, 0, 1.0);
        let dh = SparseOperator::single(2, Axis::X, 1, 1.0);
        let ds = DenseSystem::from_operator(&h).unwrap();
        assert!(matches!(exact_agp(&ds, &to_dense(&dh).unwrap()), Err(Error::Degeneracy { .. })));
    }

    #[test]
    fn compiled_matches_dense() {
        let op = SparseOperator::from_terms(
            3,
            vec![
                (PauliTerm::new([(Axis::X, 0), (Axis::Y, 2)]).unwrap(), C64::new(0.4, 0.1)),
                (PauliTerm::new([(Axis::Z, 1)]).unwrap(), c(-1.3)),
                (PauliTerm::new([(Axis::Y, 0), (Axis::Y, 1)]).unwrap(), c(0.2)),
            ],
        )
        .unwrap();
        let dense = to_dense(&op).unwrap();
        let comp = CompiledOperator::new(&op).unwrap();
        let psi: Vec<C64> = (0..8).map(|i| C64::new(i as f64 * 0.1, 1.0 - i as f64 * 0.05)).collect();
        let mut out = vec![C64::default(); 8];
        comp.apply_add(c(1.0), &psi, &mut out);
        let expected = &dense * CVector::from_column_slice(&psi);
        for i in 0..8 {
            assert!((out[i] - expected[i]).norm() < 1e-14);
        }
    }

    #[test]
    fn gain_sentinel() {
        assert_eq!(fidelity_gain(0.3, 0.3), 1.0);
        assert_eq!(fidelity_gain(0.3, 0.0), f64::INFINITY);
    }
}
