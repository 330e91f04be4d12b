//! Weighted-action quadratic forms `Q α = r`.
//!
//! For a polynomial `P(x) = Σ p_k x^k` of the Hamiltonian,
//! `Q_μν = -tr([P, A_μ][P, A_ν])` and `r_μ = i tr(∂'P [P, A_μ])`, with all
//! traces divided by `2^N`. Two evaluation paths are offered: a direct one at a
//! single λ, and a factorized one that caches λ-independent traces once and
//! contracts them with scalar coefficients for every λ of a sweep.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::linalg::SymMatrix;
use crate::model::{Ansatz, FactorizedHamiltonian, ScalarPoly};
use crate::pauli::{batched_commutator, batched_commutator_indexed, shard_index, PauliTerm, Scatter, MAX_SHARDS, SiteIndex, SparseOperator, C64, DEFAULT_PRUNE_TOL};
use crate::{Error, Result};

pub const TRACE_CACHE_VERSION: u32 = 1;

/// Relative size of the imaginary part of `r` tolerated before it is dropped.
pub const R_IMAG_TOL: f64 = 1e-9;

/// Coefficients `p_0..p_K` of a polynomial at one λ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionPolynomial {
    pub coeffs: Vec<f64>,
}

impl ActionPolynomial {
    /// Requires a nonzero leading coefficient unless the polynomial is constant.
    pub fn new(coeffs: Vec<f64>) -> Result<Self> {
        match coeffs.last() {
            None => Err(Error::InvalidInput("empty polynomial".into())),
            Some(&l) if coeffs.len() > 1 && l == 0.0 => Err(Error::InvalidInput("leading coefficient is zero".into())),
            _ => Ok(Self { coeffs }),
        }
    }

    /// `P(x) = x`.
    pub fn identity() -> Self {
        Self { coeffs: vec![0.0, 1.0] }
    }

    pub fn degree(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.coeffs.iter().rev().fold(0.0, |acc, c| acc * x + c)
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self { coeffs: self.coeffs.iter().map(|p| c * p).collect() }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct FormMeta {
    pub k: usize,
    /// Term counts of the operators built along the way.
    pub term_counts: Vec<usize>,
    pub seconds: f64,
    /// Largest `|Im r_μ| / max|r|` before the imaginary part was dropped.
    pub r_imag_ratio: f64,
}

#[derive(Clone, Debug)]
pub struct QuadraticForm {
    pub q: SymMatrix,
    pub r: Vec<f64>,
    pub lambda: f64,
    pub meta: FormMeta,
}

impl QuadraticForm {
    /// `-2 r·α + αᵀ Q α`, the α-dependent part of the action.
    pub fn objective(&self, alpha: &[f64]) -> f64 {
        let qa = self.q.mul_vec(alpha);
        -2.0 * crate::linalg::dot(&self.r, alpha) + crate::linalg::dot(alpha, &qa)
    }
}

/// Powers `H^1..H^K` and their λ-derivatives.
#[derive(Clone, Debug)]
pub struct HamiltonianPowers {
    pub powers: Vec<SparseOperator>,
    pub derivs: Vec<SparseOperator>,
}

impl HamiltonianPowers {
    pub fn power(&self, k: usize) -> SparseOperator {
        if k == 0 {
            SparseOperator::identity(self.powers[0].nspins(), 1.0)
        } else {
            self.powers[k - 1].clone()
        }
    }

    pub fn term_counts(&self) -> Vec<usize> {
        self.powers.iter().chain(&self.derivs).map(|o| o.len()).collect()
    }
}

/// `H^k` and `∂_λ H^k = ∂_λ(H^{k-1}) H + H^{k-1} ∂_λ H` for `k = 1..K`.
pub fn hamiltonian_powers(h: &SparseOperator, dh: &SparseOperator, k: usize) -> Result<HamiltonianPowers> {
    if k < 1 {
        return Err(Error::InvalidInput("polynomial degree must be at least 1".into()));
    }
    if h.nspins() != dh.nspins() {
        return Err(Error::Dimension { expected: h.nspins(), found: dh.nspins() });
    }
    let mut powers = vec![h.clone()];
    let mut derivs = vec![dh.clone()];
    for j in 1..k {
        let next = powers[j - 1].multiply(h)?;
        let mut d = derivs[j - 1].multiply(h)?;
        d.axpy(C64::new(1.0, 0.0), &powers[j - 1].multiply(dh)?)?;
        d.prune_mut(DEFAULT_PRUNE_TOL);
        powers.push(next);
        derivs.push(d);
    }
    Ok(HamiltonianPowers { powers, derivs })
}

/// Direct single-λ assembly of `(Q, r)` for the polynomial `poly`.
///
/// `Q_μν` is evaluated as `tr(P [[P, A_μ], A_ν])`, filled for `μ ≥ ν` and mirrored.
pub fn build_quadratic_form(
    h: &SparseOperator,
    dh: &SparseOperator,
    poly: &ActionPolynomial,
    ansatz: &Ansatz,
    lambda: f64,
) -> Result<QuadraticForm> {
    let start = Instant::now();
    let n = h.nspins();
    if ansatz.nspins() != n {
        return Err(Error::Dimension { expected: n, found: ansatz.nspins() });
    }
    let k = poly.degree();
    let mut p_op = SparseOperator::identity(n, poly.coeffs[0]);
    let mut dp_op = SparseOperator::zero(n);
    let mut counts = Vec::new();
    if k >= 1 {
        let pw = hamiltonian_powers(h, dh, k)?;
        counts = pw.term_counts();
        for (j, c) in poly.coeffs.iter().enumerate().skip(1) {
            p_op.axpy(C64::new(*c, 0.0), &pw.powers[j - 1])?;
            dp_op.axpy(C64::new(*c, 0.0), &pw.derivs[j - 1])?;
        }
    }
    p_op.prune_mut(DEFAULT_PRUNE_TOL);
    dp_op.prune_mut(DEFAULT_PRUNE_TOL);
    let m = ansatz.len();
    let cs = batched_commutator(&p_op, &ansatz.operators)?;
    let mut r_c = Vec::with_capacity(m);
    for c in &cs {
        r_c.push(C64::new(0.0, 1.0) * dp_op.trace_product_normalized(c)?);
    }
    let r_scale = r_c.iter().map(|z| z.re.abs()).fold(0.0, f64::max);
    let r_imag = r_c.iter().map(|z| z.im.abs()).fold(0.0, f64::max);
    let r_imag_ratio = if r_scale > 0.0 { r_imag / r_scale } else if r_imag > 0.0 { f64::INFINITY } else { 0.0 };
    if r_imag_ratio > R_IMAG_TOL && r_imag > 1e-14 {
        return Err(Error::InvalidInput(format!("r has a relative imaginary part {r_imag_ratio:.3e}; inputs are not Hermitian")));
    }
    let rows: Vec<Vec<f64>> = (0..m)
        .into_par_iter()
        .map(|mu| {
            let idx = SiteIndex::new(&ansatz.operators[..=mu].iter().collect::<Vec<_>>())?;
            let nested = batched_commutator_indexed(&cs[mu], &idx, DEFAULT_PRUNE_TOL)?;
            nested.iter().map(|d| Ok(p_op.trace_product_normalized(d)?.re)).collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    let mut q = SymMatrix::zeros(m);
    for (mu, row) in rows.iter().enumerate() {
        for (nu, v) in row.iter().enumerate() {
            q.set_sym(mu, nu, *v);
        }
    }
    counts.push(p_op.len());
    counts.push(dp_op.len());
    Ok(QuadraticForm {
        q,
        r: r_c.iter().map(|z| z.re).collect(),
        lambda,
        meta: FormMeta { k, term_counts: counts, seconds: start.elapsed().as_secs_f64(), r_imag_ratio },
    })
}

/// Exponent vectors with total degree `<= k`: degree descending, then
/// lexicographically descending within a degree.
pub fn monomials(gamma: usize, k: usize) -> Vec<Vec<u32>> {
    fn rec(gamma: usize, left: u32, prefix: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if prefix.len() + 1 == gamma {
            prefix.push(left);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for e in (0..=left).rev() {
            prefix.push(e);
            rec(gamma, left - e, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    for d in (0..=k as u32).rev() {
        rec(gamma, d, &mut Vec::new(), &mut out);
    }
    out
}

fn monomial_value(exps: &[u32], f: &[f64]) -> f64 {
    exps.iter().zip(f).map(|(&e, &x)| x.powi(e as i32)).product()
}

fn monomial_deriv(exps: &[u32], f: &[f64], df: &[f64]) -> f64 {
    let mut total = 0.0;
    for (g, &e) in exps.iter().enumerate() {
        if e == 0 {
            continue;
        }
        let mut term = e as f64 * f[g].powi(e as i32 - 1) * df[g];
        for (h, &eh) in exps.iter().enumerate() {
            if h != g {
                term *= f[h].powi(eh as i32);
            }
        }
        total += term;
    }
    total
}

/// Operators `F̃_g` with `H(λ)^k = Σ_{d_g = k} f̃_g(λ) F̃_g`, in [`monomials`] order.
///
/// Built by `F̃_e = Σ_{γ: e_γ > 0} F̃_{e - 1_γ} F_γ`.
pub fn monomial_operators(hf: &FactorizedHamiltonian, k: usize) -> Result<(Vec<Vec<u32>>, Vec<SparseOperator>)> {
    let mons = monomials(hf.gamma(), k);
    let pos: FxHashMap<Vec<u32>, usize> = mons.iter().enumerate().map(|(i, e)| (e.clone(), i)).collect();
    let mut ops: Vec<Option<SparseOperator>> = vec![None; mons.len()];
    let mut order: Vec<usize> = (0..mons.len()).collect();
    order.sort_by_key(|&i| mons[i].iter().sum::<u32>());
    for i in order {
        let e = &mons[i];
        if e.iter().all(|&x| x == 0) {
            ops[i] = Some(SparseOperator::identity(hf.nspins(), 1.0));
            continue;
        }
        let mut pairs = Vec::new();
        for (g, &eg) in e.iter().enumerate() {
            if eg == 0 {
                continue;
            }
            let mut prev = e.clone();
            prev[g] -= 1;
            pairs.push((ops[pos[&prev]].as_ref().expect("lower degrees are built first"), hf.operator(g)));
        }
        ops[i] = Some(SparseOperator::sum_of_products(hf.nspins(), &pairs, DEFAULT_PRUNE_TOL)?);
    }
    Ok((mons, ops.into_iter().map(|o| o.expect("all built")).collect()))
}

/// `G × G` block of `Q̃_{μν,gg'} = tr([F̃_g, A_μ][F̃_g', A_ν]) / 2^N` for one `μ ≤ ν`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QBlock {
    pub mu: u32,
    pub nu: u32,
    pub vals: Vec<f64>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TraceTimings {
    pub operators: f64,
    pub commutators: f64,
    pub q_traces: f64,
    pub r_traces: f64,
    pub moments: f64,
    pub total: f64,
}

/// λ-independent traces for a factorized sweep.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FactorizedTraces {
    pub version: u32,
    pub nspins: usize,
    pub max_degree: usize,
    pub m: usize,
    /// The scalar functions `f_γ`.
    pub coefficient_fns: Vec<ScalarPoly>,
    pub monomials: Vec<Vec<u32>>,
    pub degrees: Vec<usize>,
    /// `tr(F̃_g) / 2^N`.
    pub omega_g: Vec<f64>,
    /// `tr(F̃_g F̃_g') / 2^N` for `d_g = max_degree`, row-major `G × G`; other rows are zero.
    pub omega_gg: Vec<f64>,
    /// Sparse `Q̃` blocks, only for pairs with a nonzero trace.
    pub q_blocks: Vec<QBlock>,
    /// `Re(i tr(F̃_g [F̃_g', A_μ])) / 2^N`, indexed `[(g * G + g') * M + μ]`.
    pub r_tilde: Vec<f64>,
    /// `|F̃_g|` per monomial.
    pub term_counts: Vec<usize>,
    pub timings: TraceTimings,
}

type ColEntry = (u32, C64);
// Most strings are reached from a single column.
type ColList = SmallVec<[ColEntry; 1]>;

/// Target operator terms per shard of the commutator table.
const SHARD_TERMS: usize = 4096;

/// Stage one of the sweep: all `F̃_g`, their commutators with the ansatz, and the cached traces.
pub fn precompute_factorized(hf: &FactorizedHamiltonian, k: usize, ansatz: &Ansatz) -> Result<FactorizedTraces> {
    if k < 1 {
        return Err(Error::InvalidInput("polynomial degree must be at least 1".into()));
    }
    if ansatz.nspins() != hf.nspins() {
        return Err(Error::Dimension { expected: hf.nspins(), found: ansatz.nspins() });
    }
    let t0 = Instant::now();
    let (mons, ops) = monomial_operators(hf, k)?;
    let t_ops = t0.elapsed().as_secs_f64();
    let g_count = mons.len();
    let m = ansatz.len();
    let degrees: Vec<usize> = mons.iter().map(|e| e.iter().sum::<u32>() as usize).collect();

    // Commutators [F̃_g, A_μ] keyed by string, with columns g * M + μ. Contributions are
    // scattered into hash shards first so that each shard's table stays cache-resident.
    let t1 = Instant::now();
    let refs: Vec<&SparseOperator> = ansatz.operators.iter().collect();
    let idx = SiteIndex::new(&refs)?;
    let total_terms: usize = ops.iter().map(|o| o.len()).sum();
    let shards = total_terms.div_ceil(SHARD_TERMS).clamp(1, MAX_SHARDS);
    let shard_of = |t: &PauliTerm| shard_index(t, shards);
    let mut scatter = Scatter::new(shards);
    for (g, f) in ops.iter().enumerate() {
        idx.for_each_commutator(f, |mu, t, z| scatter.push(shard_of(&t), (t, (g * m) as u32 + mu, z)));
    }
    let scattered = scatter.finish();
    let mut f_terms: Vec<Vec<(u32, &PauliTerm, C64)>> = vec![Vec::new(); shards];
    for (g, f) in ops.iter().enumerate() {
        for (t, &z) in f.iter() {
            f_terms[shard_of(t)].push((g as u32, t, z));
        }
    }
    let mut t_comm = t1.elapsed().as_secs_f64();

    let (mut t_q, mut t_r) = (0.0, 0.0);
    let mut q_acc = QAccumulator::new(g_count, m);
    let mut r_raw = vec![C64::default(); g_count * g_count * m];
    for (records, fs) in scattered.into_iter().zip(&f_terms) {
        let t = Instant::now();
        let mut table: FxHashMap<PauliTerm, ColList> = FxHashMap::default();
        table.reserve(records.len());
        for (key, col, z) in records {
            let list = table.entry(key).or_default();
            match list.iter_mut().rev().find(|e| e.0 == col) {
                Some(e) => e.1 += z,
                None => list.push((col, z)),
            }
        }
        table.retain(|_, list| {
            list.retain(|e| e.1.norm() > DEFAULT_PRUNE_TOL);
            !list.is_empty()
        });
        t_comm += t.elapsed().as_secs_f64();

        // Map iteration order is fixed for a fixed insertion sequence, so sums are reproducible.
        let t = Instant::now();
        for list in table.values() {
            q_acc.add(list);
        }
        t_q += t.elapsed().as_secs_f64();

        let t = Instant::now();
        for &(g, key, z) in fs {
            if let Some(list) = table.get(key) {
                for &(col, c) in list {
                    let (gp, mu) = (col as usize / m, col as usize % m);
                    r_raw[(g as usize * g_count + gp) * m + mu] += z * c;
                }
            }
        }
        t_r += t.elapsed().as_secs_f64();
    }
    let q_blocks = q_acc.finish();
    let r_tilde: Vec<f64> = r_raw.iter().map(|z| -z.im).collect();

    let t4 = Instant::now();
    let omega_g: Vec<f64> = ops.iter().map(|f| f.trace_normalized().re).collect();
    let mut omega_gg = vec![0.0; g_count * g_count];
    for g in (0..g_count).filter(|&g| degrees[g] == k) {
        for gp in 0..g_count {
            omega_gg[g * g_count + gp] = ops[g].trace_product_normalized(&ops[gp])?.re;
        }
    }
    let t_m = t4.elapsed().as_secs_f64();

    Ok(FactorizedTraces {
        version: TRACE_CACHE_VERSION,
        nspins: hf.nspins(),
        max_degree: k,
        m,
        coefficient_fns: hf.factors().iter().map(|(_, f)| f.clone()).collect(),
        monomials: mons,
        degrees,
        omega_g,
        omega_gg,
        q_blocks,
        r_tilde,
        term_counts: ops.iter().map(|o| o.len()).collect(),
        timings: TraceTimings {
            operators: t_ops,
            commutators: t_comm,
            q_traces: t_q,
            r_traces: t_r,
            moments: t_m,
            total: t0.elapsed().as_secs_f64(),
        },
    })
}

/// Sums `Re(c c')` over every pair of columns sharing a Pauli string.
struct QAccumulator {
    g_count: usize,
    m: usize,
    pos: Vec<usize>,
    blocks: Vec<QBlock>,
}

impl QAccumulator {
    fn new(g_count: usize, m: usize) -> Self {
        Self { g_count, m, pos: vec![usize::MAX; m * m], blocks: Vec::new() }
    }

    fn add(&mut self, list: &[ColEntry]) {
        let (g_count, m) = (self.g_count, self.m);
        for &(ca, za) in list {
            let (ga, mua) = (ca as usize / m, ca as usize % m);
            for &(cb, zb) in list {
                let (gb, mub) = (cb as usize / m, cb as usize % m);
                if mua > mub {
                    continue;
                }
                let slot = &mut self.pos[mua * m + mub];
                if *slot == usize::MAX {
                    self.blocks.push(QBlock { mu: mua as u32, nu: mub as u32, vals: vec![0.0; g_count * g_count] });
                    *slot = self.blocks.len() - 1;
                }
                self.blocks[*slot].vals[ga * g_count + gb] += (za * zb).re;
            }
        }
    }

    fn finish(mut self) -> Vec<QBlock> {
        self.blocks.retain(|b| b.vals.iter().any(|&v| v != 0.0));
        self.blocks.sort_by_key(|b| (b.mu, b.nu));
        self.blocks
    }
}

impl FactorizedTraces {
    pub fn n_monomials(&self) -> usize {
        self.monomials.len()
    }

    /// `(f̃_g(λ), ∂_λ f̃_g(λ))` for every monomial.
    pub fn monomial_values(&self, lambda: f64) -> (Vec<f64>, Vec<f64>) {
        let f: Vec<f64> = self.coefficient_fns.iter().map(|p| p.value(lambda)).collect();
        let df: Vec<f64> = self.coefficient_fns.iter().map(|p| p.derivative(lambda)).collect();
        let v = self.monomials.iter().map(|e| monomial_value(e, &f)).collect();
        let d = self.monomials.iter().map(|e| monomial_deriv(e, &f, &df)).collect();
        (v, d)
    }

    /// `tr(H(λ)^k) / 2^N` for `k = 0..=kmax`, with `kmax <= 2 * max_degree - 1`.
    pub fn moments(&self, lambda: f64, kmax: usize) -> Result<Vec<f64>> {
        let kc = self.max_degree;
        if kmax + 1 > 2 * kc {
            return Err(Error::InvalidInput(format!("moments up to {kmax} need cached degree {}", kmax.div_ceil(2) + 1)));
        }
        let (fv, _) = self.monomial_values(lambda);
        let g = self.n_monomials();
        let mut out = vec![0.0; kmax + 1];
        for (k, slot) in out.iter_mut().enumerate() {
            if k <= kc {
                *slot = (0..g).filter(|&i| self.degrees[i] == k).map(|i| fv[i] * self.omega_g[i]).sum();
            } else {
                let mut s = 0.0;
                for a in (0..g).filter(|&i| self.degrees[i] == kc) {
                    for b in (0..g).filter(|&i| self.degrees[i] == k - kc) {
                        s += fv[a] * fv[b] * self.omega_gg[a * g + b];
                    }
                }
                *slot = s;
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ft: Self = serde_json::from_slice(&std::fs::read(path)?)?;
        if ft.version != TRACE_CACHE_VERSION {
            return Err(Error::Parse(format!("unsupported trace cache version {}", ft.version)));
        }
        Ok(ft)
    }
}

/// Stage two at one λ: contracts the cached traces with `p_{d_g} f̃_g(λ)`.
pub fn assemble_at_lambda(ft: &FactorizedTraces, poly: &ActionPolynomial, lambda: f64) -> Result<QuadraticForm> {
    let start = Instant::now();
    let k = poly.degree();
    if k > ft.max_degree {
        return Err(Error::InvalidInput(format!("polynomial degree {k} exceeds cached degree {}", ft.max_degree)));
    }
    let g = ft.n_monomials();
    let m = ft.m;
    let (fv, dfv) = ft.monomial_values(lambda);
    let pd = |d: usize| if d <= k { poly.coeffs[d] } else { 0.0 };
    let a: Vec<f64> = (0..g).map(|i| pd(ft.degrees[i]) * fv[i]).collect();
    let b: Vec<f64> = (0..g).map(|i| pd(ft.degrees[i]) * dfv[i]).collect();
    let active: Vec<usize> = (0..g).filter(|&i| a[i] != 0.0).collect();
    let mut q = SymMatrix::zeros(m);
    for blk in &ft.q_blocks {
        let mut s = 0.0;
        for &i in &active {
            let row = &blk.vals[i * g..(i + 1) * g];
            let mut inner = 0.0;
            for &j in &active {
                inner += row[j] * a[j];
            }
            s += a[i] * inner;
        }
        q.set_sym(blk.mu as usize, blk.nu as usize, -s);
    }
    let mut r = vec![0.0; m];
    for i in (0..g).filter(|&i| b[i] != 0.0) {
        for &j in &active {
            let w = b[i] * a[j];
            let base = (i * g + j) * m;
            for (mu, rv) in r.iter_mut().enumerate() {
                *rv += w * ft.r_tilde[base + mu];
            }
        }
    }
    Ok(QuadraticForm {
        q,
        r,
        lambda,
        meta: FormMeta { k, term_counts: ft.term_counts.clone(), seconds: start.elapsed().as_secs_f64(), r_imag_ratio: 0.0 },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ising_hamiltonian, one_body_ansatz, sample_ising, IsingClass};
    use crate::pauli::Axis;

    #[test]
    fn monomial_order_for_two_factors() {
        let m = monomials(2, 2);
        assert_eq!(m, vec![vec![2, 0], vec![1, 1], vec![0, 2], vec![1, 0], vec![0, 1], vec![0, 0]]);
        let d: Vec<u32> = m.iter().map(|e| e.iter().sum()).collect();
        assert_eq!(d, vec![2, 2, 2, 1, 1, 0]);
        assert_eq!(monomials(3, 2).len(), 10);
    }

    #[test]
    fn mixed_monomial_is_anticommutator() {
        let inst = sample_ising(IsingClass::Ferro, 2, 2, 3).unwrap();
        let hf = ising_hamiltonian(&inst);
        let (_, ops) = monomial_operators(&hf, 2).unwrap();
        let f1 = hf.operator(0);
        let f2 = hf.operator(1);
        let expected = f1.multiply(f2).unwrap().add(&f2.multiply(f1).unwrap()).unwrap();
        assert!(ops[1].sub(&expected).unwrap().is_empty());
        assert!(ops[0].sub(&f1.multiply(f1).unwrap()).unwrap().is_empty());
        assert_eq!(ops[5], SparseOperator::identity(4, 1.0));
    }

    #[test]
    fn powers_base_case_and_commuting_square() {
        let h = SparseOperator::single(1, Axis::Z, 0, 1.0);
        let dh = SparseOperator::single(1, Axis::X, 0, 1.0);
        let p = hamiltonian_powers(&h, &dh, 1).unwrap();
        assert_eq!(p.powers[0], h);
        assert_eq!(p.derivs[0], dh);
        let p = hamiltonian_powers(&h, &dh, 2).unwrap();
        assert_eq!(p.powers[1], SparseOperator::identity(1, 1.0));
        assert!(p.derivs[1].is_empty());
        assert!(hamiltonian_powers(&h, &dh, 0).is_err());
    }

    #[test]
    fn constant_polynomial_gives_zero_form() {
        let inst = sample_ising(IsingClass::Ferro, 3, 1, 1).unwrap();
        let hf = ising_hamiltonian(&inst);
        let ansatz = one_body_ansatz(3);
        let ft = precompute_factorized(&hf, 2, &ansatz).unwrap();
        let form = assemble_at_lambda(&ft, &ActionPolynomial::new(vec![2.5]).unwrap(), 0.4).unwrap();
        assert!(form.q.data().iter().all(|&x| x == 0.0));
        assert!(form.r.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn hamiltonian_as_ansatz_gives_zero_row() {
        let inst = sample_ising(IsingClass::Antiferro, 2, 2, 8).unwrap();
        let hf = ising_hamiltonian(&inst);
        let h = hf.eval(0.3);
        let dh = hf.derivative(0.3);
        let mut ops = one_body_ansatz(4).operators;
        ops.push(h.clone());
        let labels = (0..ops.len()).map(|i| i.to_string()).collect();
        let ansatz = Ansatz::new("with-h", ops, labels).unwrap();
        let form = build_quadratic_form(&h, &dh, &ActionPolynomial::identity(), &ansatz, 0.3).unwrap();
        for j in 0..5 {
            assert!(form.q.get(4, j).abs() < 1e-12);
        }
        assert!(form.r[4].abs() < 1e-12);
    }

    #[test]
    fn polynomial_validation() {
        assert!(ActionPolynomial::new(vec![]).is_err());
        assert!(ActionPolynomial::new(vec![1.0, 0.0]).is_err());
        assert!(ActionPolynomial::new(vec![0.0]).is_ok());
        assert_eq!(ActionPolynomial::new(vec![1.0, -2.0, 1.0]).unwrap().eval(1.0), 0.0);
    }
}
