//! Sparse Pauli-string algebra.
//!
//! Operators are hash maps from canonical Pauli strings to complex
//! coefficients. Sites are 0-based in memory and 1-based in the text format.

use std::fmt;
use std::hash::BuildHasher;

use num_complex::Complex64;
use rayon::prelude::*;
use rustc_hash::{FxBuildHasher, FxHashMap};
use smallvec::SmallVec;

use crate::{Error, Result};

pub type C64 = Complex64;

/// Tolerance applied after add, multiply and commutator.
pub const DEFAULT_PRUNE_TOL: f64 = 1e-12;

const I: C64 = C64 { re: 0.0, im: 1.0 };

/// Powers of the imaginary unit, indexed by exponent mod 4.
const I_POW: [C64; 4] = [
    C64 { re: 1.0, im: 0.0 },
    C64 { re: 0.0, im: 1.0 },
    C64 { re: -1.0, im: 0.0 },
    C64 { re: 0.0, im: -1.0 },
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum Axis {
    X = 1,
    Y = 2,
    Z = 3,
}

impl Axis {
    fn from_bits(b: u32) -> Axis {
        match b & 3 {
            1 => Axis::X,
            2 => Axis::Y,
            3 => Axis::Z,
            _ => unreachable!("axis bits are never zero"),
        }
    }

    pub fn symbol(self) -> char {
        match self {
            Axis::X => 'X',
            Axis::Y => 'Y',
            Axis::Z => 'Z',
        }
    }
}

/// A tensor product of single-site Pauli matrices, sorted by site.
///
/// Each factor is packed as `(site << 2) | axis`; the empty list is the identity.
#[derive(Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PauliTerm {
    factors: SmallVec<[u32; INLINE_FACTORS]>,
}

const INLINE_FACTORS: usize = 8;

impl Clone for PauliTerm {
    #[inline]
    fn clone(&self) -> Self {
        let n = self.factors.len();
        if n <= INLINE_FACTORS {
            let mut buf = [0u32; INLINE_FACTORS];
            buf[..n].copy_from_slice(&self.factors);
            Self { factors: SmallVec::from_buf_and_len(buf, n) }
        } else {
            Self { factors: self.factors.clone() }
        }
    }
}

impl PauliTerm {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn single(axis: Axis, site: usize) -> Self {
        let mut factors = SmallVec::new();
        factors.push(pack(axis, site));
        Self { factors }
    }

    /// Builds a term from `(axis, site)` pairs in any order; repeated sites are rejected.
    pub fn new<I>(factors: I) -> Result<Self>
    where
        I: IntoIterator<Item = (Axis, usize)>,
    {
        let mut packed: SmallVec<[u32; 8]> = factors.into_iter().map(|(a, s)| pack(a, s)).collect();
        packed.sort_unstable();
        for w in packed.windows(2) {
            if w[0] >> 2 == w[1] >> 2 {
                return Err(Error::InvalidInput(format!(
                    "site {} appears twice in a Pauli term",
                    (w[0] >> 2) + 1
                )));
            }
        }
        Ok(Self { factors: packed })
    }

    pub fn is_identity(&self) -> bool {
        self.factors.is_empty()
    }

    /// Number of non-identity factors.
    pub fn weight(&self) -> usize {
        self.factors.len()
    }

    pub fn factors(&self) -> impl Iterator<Item = (Axis, usize)> + '_ {
        self.factors.iter().map(|&f| (Axis::from_bits(f), (f >> 2) as usize))
    }

    pub fn sites(&self) -> impl Iterator<Item = usize> + '_ {
        self.factors.iter().map(|&f| (f >> 2) as usize)
    }

    pub fn max_site(&self) -> Option<usize> {
        self.factors.last().map(|&f| (f >> 2) as usize)
    }

    pub fn axis_at(&self, site: usize) -> Option<Axis> {
        let key = (site as u32) << 2;
        self.factors
            .binary_search_by(|&f| (f & !3).cmp(&key))
            .ok()
            .map(|i| Axis::from_bits(self.factors[i]))
    }

    /// Bit masks `(x, y, z)` of the sites carrying each axis.
    pub fn masks(&self) -> (u64, u64, u64) {
        let (mut x, mut y, mut z) = (0u64, 0u64, 0u64);
        for (axis, site) in self.factors() {
            let bit = 1u64 << site;
            match axis {
                Axis::X => x |= bit,
                Axis::Y => y |= bit,
                Axis::Z => z |= bit,
            }
        }
        (x, y, z)
    }

    /// Product `self * other` as `(i^k, string)`.
    pub fn mul(&self, other: &PauliTerm) -> (C64, PauliTerm) {
        let (k, t) = mul_packed(&self.factors, &other.factors);
        (I_POW[k as usize], t)
    }

    pub fn anticommutes(&self, other: &PauliTerm) -> bool {
        let (a, b) = (&self.factors, &other.factors);
        let (mut i, mut j, mut odd) = (0, 0, false);
        while i < a.len() && j < b.len() {
            let (sa, sb) = (a[i] >> 2, b[j] >> 2);
            if sa < sb {
                i += 1;
            } else if sb < sa {
                j += 1;
            } else {
                if a[i] != b[j] {
                    odd = !odd;
                }
                i += 1;
                j += 1;
            }
        }
        odd
    }
}

impl fmt::Display for PauliTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_identity() {
            return write!(f, "I");
        }
        for (n, (axis, site)) in self.factors().enumerate() {
            if n > 0 {
                write!(f, " ")?;
            }
            write!(f, "{}{}", axis.symbol(), site + 1)?;
        }
        Ok(())
    }
}

#[inline]
fn pack(axis: Axis, site: usize) -> u32 {
    ((site as u32) << 2) | axis as u32
}

/// Site-by-site merge of two sorted factor lists into `out`; returns the power of `i` and the length.
#[inline]
fn merge_factors(a: &[u32], b: &[u32], out: &mut [u32]) -> (u8, usize) {
    let (mut i, mut j, mut n, mut k) = (0usize, 0usize, 0usize, 0u8);
    while i < a.len() && j < b.len() {
        let (x, y) = (a[i], b[j]);
        let (sx, sy) = (x >> 2, y >> 2);
        if sx < sy {
            out[n] = x;
            n += 1;
            i += 1;
        } else if sy < sx {
            out[n] = y;
            n += 1;
            j += 1;
        } else {
            let (ax, ay) = (x & 3, y & 3);
            if ax != ay {
                out[n] = (sx << 2) | (ax ^ ay);
                n += 1;
                // XY = iZ and cyclic; the reversed order picks up -i.
                k += if (ay + 3 - ax) % 3 == 1 { 1 } else { 3 };
            }
            i += 1;
            j += 1;
        }
    }
    for &x in &a[i..] {
        out[n] = x;
        n += 1;
    }
    for &y in &b[j..] {
        out[n] = y;
        n += 1;
    }
    (k & 3, n)
}

/// Target product count per partition in [`SparseOperator::sum_of_products`].
const PRODUCTS_PER_SHARD: usize = 1 << 16;
pub(crate) const MAX_SHARDS: usize = 1024;

/// Partition of `t` among `n` shards, taken from hash bits the maps do not probe with.
#[inline]
pub(crate) fn shard_index(t: &PauliTerm, n: usize) -> usize {
    (((FxBuildHasher.hash_one(t) >> 32) * n as u64) >> 32) as usize
}

/// Hash partitioning with a small staging buffer per shard, so that pushes touch
/// few distinct pages and shards are filled in bulk.
pub(crate) struct Scatter<T> {
    staged: Vec<Vec<T>>,
    shards: Vec<Vec<T>>,
}

const STAGE_LEN: usize = 16;

impl<T> Scatter<T> {
    pub(crate) fn new(n: usize) -> Self {
        Self {
            staged: (0..n).map(|_| Vec::with_capacity(STAGE_LEN)).collect(),
            shards: (0..n).map(|_| Vec::new()).collect(),
        }
    }

    #[inline]
    pub(crate) fn push(&mut self, shard: usize, item: T) {
        let stage = &mut self.staged[shard];
        stage.push(item);
        if stage.len() == STAGE_LEN {
            self.shards[shard].append(stage);
        }
    }

    pub(crate) fn finish(mut self) -> Vec<Vec<T>> {
        for (dst, stage) in self.shards.iter_mut().zip(&mut self.staged) {
            dst.append(stage);
        }
        self.shards
    }
}

/// Two strings anticommute iff they differ in axis on an odd number of shared sites.
#[inline]
fn anticommutes(a: &[u32], b: &[u32]) -> bool {
    let (mut i, mut j, mut odd) = (0usize, 0usize, false);
    while i < a.len() && j < b.len() {
        let (sx, sy) = (a[i] >> 2, b[j] >> 2);
        if sx < sy {
            i += 1;
        } else if sy < sx {
            j += 1;
        } else {
            odd ^= a[i] != b[j];
            i += 1;
            j += 1;
        }
    }
    odd
}

fn mul_packed(a: &[u32], b: &[u32]) -> (u8, PauliTerm) {
    if a.len() + b.len() <= INLINE_FACTORS {
        let mut buf = [0u32; INLINE_FACTORS];
        let (k, n) = merge_factors(a, b, &mut buf);
        return (k, PauliTerm { factors: SmallVec::from_buf_and_len(buf, n) });
    }
    let mut buf = vec![0u32; a.len() + b.len()];
    let (k, n) = merge_factors(a, b, &mut buf);
    buf.truncate(n);
    (k, PauliTerm { factors: SmallVec::from_vec(buf) })
}

pub type TermMap = FxHashMap<PauliTerm, C64>;

/// A linear combination of Pauli strings on `nspins` spins.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SparseOperator {
    nspins: usize,
    terms: TermMap,
}

impl SparseOperator {
    pub fn zero(nspins: usize) -> Self {
        Self { nspins, terms: TermMap::default() }
    }

    pub fn identity(nspins: usize, c: f64) -> Self {
        Self::from_term(nspins, PauliTerm::identity(), C64::new(c, 0.0))
    }

    pub fn from_term(nspins: usize, term: PauliTerm, c: C64) -> Self {
        let mut op = Self::zero(nspins);
        op.add_term(term, c);
        op
    }

    pub fn single(nspins: usize, axis: Axis, site: usize, c: f64) -> Self {
        Self::from_term(nspins, PauliTerm::single(axis, site), C64::new(c, 0.0))
    }

    /// Collects terms, merging repeats; sites must be below `nspins`.
    pub fn from_terms<I>(nspins: usize, terms: I) -> Result<Self>
    where
        I: IntoIterator<Item = (PauliTerm, C64)>,
    {
        let mut op = Self::zero(nspins);
        for (t, c) in terms {
            if let Some(s) = t.max_site() {
                if s >= nspins {
                    return Err(Error::InvalidInput(format!(
                        "site {} outside a {}-spin system",
                        s + 1,
                        nspins
                    )));
                }
            }
            op.add_term(t, c);
        }
        Ok(op)
    }

    pub fn nspins(&self) -> usize {
        self.nspins
    }

    /// Term count |A|.
    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&PauliTerm, &C64)> {
        self.terms.iter()
    }

    pub fn into_terms(self) -> TermMap {
        self.terms
    }

    pub fn terms(&self) -> &TermMap {
        &self.terms
    }

    pub fn coeff(&self, t: &PauliTerm) -> C64 {
        self.terms.get(t).copied().unwrap_or_default()
    }

    pub fn add_term(&mut self, t: PauliTerm, c: C64) {
        *self.terms.entry(t).or_default() += c;
    }

    /// Terms sorted by string, for deterministic output.
    pub fn sorted_terms(&self) -> Vec<(&PauliTerm, C64)> {
        let mut v: Vec<_> = self.terms.iter().map(|(t, c)| (t, *c)).collect();
        v.sort_unstable_by(|a, b| a.0.cmp(b.0));
        v
    }

    pub fn max_abs(&self) -> f64 {
        self.terms.values().map(|c| c.norm()).fold(0.0, f64::max)
    }

    /// True when every coefficient is real within `tol`.
    pub fn is_hermitian(&self, tol: f64) -> bool {
        self.terms.values().all(|c| c.im.abs() <= tol)
    }

    pub fn scale(&self, s: C64) -> Self {
        let mut out = self.clone();
        out.scale_mut(s);
        out
    }

    pub fn scale_mut(&mut self, s: C64) {
        for c in self.terms.values_mut() {
            *c *= s;
        }
    }

    fn check(&self, other: &Self) -> Result<()> {
        if self.nspins != other.nspins {
            return Err(Error::Dimension { expected: self.nspins, found: other.nspins });
        }
        Ok(())
    }

    /// `self += s * other` without pruning.
    pub fn axpy(&mut self, s: C64, other: &Self) -> Result<()> {
        self.check(other)?;
        self.terms.reserve(other.len());
        for (t, c) in &other.terms {
            *self.terms.entry(t.clone()).or_default() += s * c;
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.add_tol(other, DEFAULT_PRUNE_TOL)
    }

    pub fn add_tol(&self, other: &Self, tol: f64) -> Result<Self> {
        self.check(other)?;
        let (big, small) = if self.len() >= other.len() { (self, other) } else { (other, self) };
        let mut out = big.clone();
        out.axpy(C64::new(1.0, 0.0), small)?;
        out.prune_mut(tol);
        Ok(out)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        let mut out = self.clone();
        out.axpy(C64::new(-1.0, 0.0), other)?;
        out.prune_mut(DEFAULT_PRUNE_TOL);
        Ok(out)
    }

    pub fn multiply(&self, other: &Self) -> Result<Self> {
        self.multiply_tol(other, DEFAULT_PRUNE_TOL)
    }

    pub fn multiply_tol(&self, other: &Self, tol: f64) -> Result<Self> {
        let mut op = Self::zero(self.nspins);
        op.terms.reserve(self.len().max(other.len()));
        op.add_product(self, other)?;
        op.prune_mut(tol);
        Ok(op)
    }

    /// `Σ a_i b_i`, pruned at `tol`.
    ///
    /// Large sums are hash-partitioned so that each partial map stays cache-resident.
    pub fn sum_of_products(nspins: usize, pairs: &[(&Self, &Self)], tol: f64) -> Result<Self> {
        let mut op = Self::zero(nspins);
        for (a, b) in pairs {
            op.check(a)?;
            a.check(b)?;
        }
        let products: usize = pairs.iter().map(|(a, b)| a.len() * b.len()).sum();
        let shards = products.div_ceil(PRODUCTS_PER_SHARD).min(MAX_SHARDS);
        if shards <= 1 {
            for (a, b) in pairs {
                op.add_product(a, b)?;
            }
            op.prune_mut(tol);
            return Ok(op);
        }
        let mut scatter = Scatter::new(shards);
        for (a, b) in pairs {
            for (s, ca) in &a.terms {
                for (t, cb) in &b.terms {
                    let (k, p) = mul_packed(&s.factors, &t.factors);
                    scatter.push(shard_index(&p, shards), (p, I_POW[k as usize] * ca * cb));
                }
            }
        }
        let mut parts = Vec::with_capacity(shards);
        for records in scatter.finish() {
            let mut part = TermMap::default();
            for (p, z) in records {
                *part.entry(p).or_default() += z;
            }
            part.retain(|_, c| c.norm() > tol);
            parts.push(part);
        }
        op.terms.reserve(parts.iter().map(|p| p.len()).sum());
        for part in parts {
            op.terms.extend(part);
        }
        Ok(op)
    }

    /// `self += a b` without pruning.
    pub fn add_product(&mut self, a: &Self, b: &Self) -> Result<()> {
        self.check(a)?;
        a.check(b)?;
        for (s, ca) in &a.terms {
            for (t, cb) in &b.terms {
                let (k, p) = mul_packed(&s.factors, &t.factors);
                *self.terms.entry(p).or_default() += I_POW[k as usize] * ca * cb;
            }
        }
        Ok(())
    }

    /// `tr(AB) / 2^N`, iterating the smaller operator.
    pub fn trace_product_normalized(&self, other: &Self) -> Result<C64> {
        self.check(other)?;
        let (small, big) = if self.len() <= other.len() { (self, other) } else { (other, self) };
        let mut acc = C64::default();
        for (t, c) in &small.terms {
            if let Some(d) = big.terms.get(t) {
                acc += c * d;
            }
        }
        Ok(acc)
    }

    /// `tr(AB)`; overflows to infinity beyond roughly 1000 spins.
    pub fn trace_product(&self, other: &Self) -> Result<C64> {
        Ok(self.trace_product_normalized(other)? * 2f64.powi(self.nspins as i32))
    }

    /// `tr(A) / 2^N`.
    pub fn trace_normalized(&self) -> C64 {
        self.coeff(&PauliTerm::identity())
    }

    /// `[self, other]`, building a site index over `other`.
    pub fn commutator_with(&self, other: &Self) -> Result<Self> {
        let idx = SiteIndex::new(&[other])?;
        commutator(self, other, &idx)
    }

    pub fn prune(&self, tol: f64) -> Self {
        let mut out = self.clone();
        out.prune_mut(tol);
        out
    }

    /// Removes terms with `|c| <= tol`; `tol = 0` removes exact zeros only.
    pub fn prune_mut(&mut self, tol: f64) {
        self.terms.retain(|_, c| c.norm() > tol);
    }

    /// One term per line, `<re> <im> <axis><site> ...`, sorted by string.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (t, c) in self.sorted_terms() {
            s.push_str(&format!("{} {} {}\n", c.re, c.im, t));
        }
        s
    }

    pub fn from_text(text: &str, nspins: usize) -> Result<Self> {
        let mut op = Self::zero(nspins);
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |msg: &str| Error::Parse(format!("line {}: {}", lineno + 1, msg));
            let mut tok = line.split_whitespace();
            let re: f64 = tok.next().and_then(|x| x.parse().ok()).ok_or_else(|| bad("bad real part"))?;
            let im: f64 = tok.next().and_then(|x| x.parse().ok()).ok_or_else(|| bad("bad imaginary part"))?;
            let rest: Vec<&str> = tok.collect();
            if rest.is_empty() {
                return Err(bad("missing Pauli string"));
            }
            let term = if rest == ["I"] {
                PauliTerm::identity()
            } else {
                let mut factors = Vec::with_capacity(rest.len());
                for f in rest {
                    let mut chars = f.chars();
                    let axis = match chars.next() {
                        Some('X') => Axis::X,
                        Some('Y') => Axis::Y,
                        Some('Z') => Axis::Z,
                        _ => return Err(bad(&format!("bad factor '{f}'"))),
                    };
                    let site: usize = chars.as_str().parse().map_err(|_| bad(&format!("bad site in '{f}'")))?;
                    if site == 0 || site > nspins {
                        return Err(bad(&format!("site {site} outside 1..={nspins}")));
                    }
                    factors.push((axis, site - 1));
                }
                PauliTerm::new(factors).map_err(|e| bad(&e.to_string()))?
            };
            op.add_term(term, C64::new(re, im));
        }
        Ok(op)
    }
}

/// Per-site buckets Θ_i over the terms of one or more operators.
///
/// The index borrows the operators it was built from; `commutator` checks by
/// address that it is handed the same operator, so an index cannot silently go
/// stale.
pub struct SiteIndex<'a> {
    ops: Vec<&'a SparseOperator>,
    /// Flat term table: (operator id, string, coefficient).
    entries: Vec<(u32, &'a PauliTerm, C64)>,
    buckets: Vec<Vec<u32>>,
}

impl<'a> SiteIndex<'a> {
    pub fn new(ops: &[&'a SparseOperator]) -> Result<Self> {
        let nspins = ops.first().map(|o| o.nspins).unwrap_or(0);
        let mut entries = Vec::new();
        let mut buckets = vec![Vec::new(); nspins];
        for (k, op) in ops.iter().enumerate() {
            if op.nspins != nspins {
                return Err(Error::Dimension { expected: nspins, found: op.nspins });
            }
            for (t, c) in op.sorted_terms() {
                let id = entries.len() as u32;
                for s in t.sites() {
                    buckets[s].push(id);
                }
                entries.push((k as u32, t, c));
            }
        }
        Ok(Self { ops: ops.to_vec(), entries, buckets })
    }

    pub fn nspins(&self) -> usize {
        self.buckets.len()
    }

    pub fn n_ops(&self) -> usize {
        self.ops.len()
    }

    /// Flat ids of the terms acting on `site`.
    pub fn bucket(&self, site: usize) -> &[u32] {
        &self.buckets[site]
    }

    /// `(operator id, string)` of a flat id.
    pub fn entry(&self, id: u32) -> (usize, &PauliTerm) {
        let e = &self.entries[id as usize];
        (e.0 as usize, e.1)
    }

    fn is_over(&self, ops: &[&SparseOperator]) -> bool {
        self.ops.len() == ops.len() && self.ops.iter().zip(ops).all(|(a, b)| std::ptr::eq(*a, *b))
    }

    /// Accumulates `[b, A_k]` into `out[k]` for every indexed operator, one pass over `b`.
    fn commutators_into(&self, b: &SparseOperator, out: &mut [TermMap]) {
        self.for_each_commutator(b, |k, t, z| *out[k as usize].entry(t).or_default() += z);
    }

    /// Calls `f(k, string, coefficient)` for every nonzero product term of `[b, ops[k]]`.
    ///
    /// Contributions are not merged; the same string may be reported several times.
    pub fn for_each_commutator(&self, b: &SparseOperator, mut f: impl FnMut(u32, PauliTerm, C64)) {
        let mut stamp = vec![u32::MAX; self.entries.len()];
        for (gen, (sigma, cb)) in b.terms.iter().enumerate() {
            let gen = gen as u32;
            for site in sigma.sites() {
                for &id in &self.buckets[site] {
                    if stamp[id as usize] == gen {
                        continue;
                    }
                    stamp[id as usize] = gen;
                    let (k, tau, ca) = self.entries[id as usize];
                    if !anticommutes(&sigma.factors, &tau.factors) {
                        continue;
                    }
                    // Anticommuting strings: [s, t] = 2 s t.
                    let (p, t) = mul_packed(&sigma.factors, &tau.factors);
                    f(k, t, 2.0 * I_POW[p as usize] * cb * ca);
                }
            }
        }
    }
}

/// `[b, a]` using a site index built over `a`.
///
/// Only terms of `a` sharing a site with each term of `b` are visited.
pub fn commutator(b: &SparseOperator, a: &SparseOperator, idx: &SiteIndex<'_>) -> Result<SparseOperator> {
    commutator_tol(b, a, idx, DEFAULT_PRUNE_TOL)
}

pub fn commutator_tol(b: &SparseOperator, a: &SparseOperator, idx: &SiteIndex<'_>, tol: f64) -> Result<SparseOperator> {
    b.check(a)?;
    if !idx.is_over(&[a]) {
        return Err(Error::StaleIndex);
    }
    let mut out = vec![TermMap::default()];
    idx.commutators_into(b, &mut out);
    let mut op = SparseOperator { nspins: b.nspins, terms: out.pop().unwrap_or_default() };
    op.prune_mut(tol);
    Ok(op)
}

/// `[b, A_k]` for every operator of `ansatz` with a single pass over the terms of `b`.
pub fn batched_commutator(b: &SparseOperator, ansatz: &[SparseOperator]) -> Result<Vec<SparseOperator>> {
    let refs: Vec<&SparseOperator> = ansatz.iter().collect();
    let idx = SiteIndex::new(&refs)?;
    batched_commutator_indexed(b, &idx, DEFAULT_PRUNE_TOL)
}

/// Batched commutator against a prebuilt joint index.
pub fn batched_commutator_indexed(b: &SparseOperator, idx: &SiteIndex<'_>, tol: f64) -> Result<Vec<SparseOperator>> {
    if idx.n_ops() > 0 && idx.nspins() != b.nspins {
        return Err(Error::Dimension { expected: b.nspins, found: idx.nspins() });
    }
    let mut out = vec![TermMap::default(); idx.n_ops()];
    idx.commutators_into(b, &mut out);
    Ok(out
        .into_iter()
        .map(|terms| {
            let mut op = SparseOperator { nspins: b.nspins, terms };
            op.prune_mut(tol);
            op
        })
        .collect())
}

/// Batched commutators of several operators against one index, in parallel.
pub fn batched_commutators_many(bs: &[&SparseOperator], idx: &SiteIndex<'_>, tol: f64) -> Result<Vec<Vec<SparseOperator>>> {
    bs.par_iter().map(|b| batched_commutator_indexed(b, idx, tol)).collect()
}

impl fmt::Display for SparseOperator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

#[inline]
pub fn i_unit() -> C64 {
    I
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn term(s: &[(Axis, usize)]) -> PauliTerm {
        PauliTerm::new(s.iter().copied()).unwrap()
    }

    #[test]
    fn single_site_products() {
        use Axis::*;
        let cases = [(X, Y, c(0., 1.), Z), (Y, Z, c(0., 1.), X), (Z, X, c(0., 1.), Y), (Y, X, c(0., -1.), Z), (Z, Y, c(0., -1.), X), (X, Z, c(0., -1.), Y)];
        for (a, b, phase, prod) in cases {
            let (p, t) = PauliTerm::single(a, 0).mul(&PauliTerm::single(b, 0));
            assert_eq!(p, phase, "{a:?}{b:?}");
            assert_eq!(t, PauliTerm::single(prod, 0));
        }
        let (p, t) = PauliTerm::single(X, 3).mul(&PauliTerm::single(X, 3));
        assert_eq!((p, t), (c(1., 0.), PauliTerm::identity()));
    }

    #[test]
    fn add_examples() {
        let a = SparseOperator::from_term(6, term(&[(Axis::X, 0), (Axis::Z, 2)]), c(1.5, 0.));
        let b = SparseOperator::from_term(6, term(&[(Axis::X, 1), (Axis::Y, 2), (Axis::Y, 3)]), c(-0.3, 0.));
        let s = a.add(&b).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s.coeff(&term(&[(Axis::X, 0), (Axis::Z, 2)])), c(1.5, 0.));

        assert!(a.add(&a.scale(c(-1., 0.))).unwrap().is_empty());

        let z2 = SparseOperator::single(1, Axis::Z, 0, 2.0);
        let z3 = SparseOperator::single(1, Axis::Z, 0, 3.0);
        assert_eq!(z2.add(&z3).unwrap().coeff(&PauliTerm::single(Axis::Z, 0)), c(5., 0.));
    }

    #[test]
    fn partitioned_sum_of_products_matches_direct() {
        use Axis::*;
        let n = 18;
        let mut a = SparseOperator::zero(n);
        let mut b = SparseOperator::zero(n);
        for i in 0..n {
            for j in i + 1..n {
                let w = (i * n + j) as f64;
                a.add_term(term(&[(X, i), (Z, j)]), c(0.1 * w.sin(), 0.));
                a.add_term(term(&[(Y, i), (Y, j)]), c(0., 0.2 * w.cos()));
                b.add_term(term(&[(Z, i), (X, j)]), c(0.3 * (1.7 * w).cos(), 0.));
                b.add_term(term(&[(Y, i), (Z, j)]), c(0.05 * w, 0.));
            }
        }
        let products = 2 * a.len() * b.len();
        assert!(products > 2 * PRODUCTS_PER_SHARD, "{products}");
        let sharded = SparseOperator::sum_of_products(n, &[(&a, &b), (&b, &a)], DEFAULT_PRUNE_TOL).unwrap();
        let direct = a.multiply(&b).unwrap().add(&b.multiply(&a).unwrap()).unwrap();
        assert_eq!(sharded.len(), direct.len());
        for (t, z) in direct.iter() {
            assert!((sharded.coeff(t) - z).norm() < 1e-12, "{t}");
        }
    }

    #[test]
    fn mismatched_sizes_are_rejected() {
        let a = SparseOperator::identity(2, 1.0);
        let b = SparseOperator::identity(3, 1.0);
        assert!(matches!(a.add(&b), Err(Error::Dimension { .. })));
        assert!(matches!(a.multiply(&b), Err(Error::Dimension { .. })));
        assert!(matches!(a.trace_product(&b), Err(Error::Dimension { .. })));
        assert!(matches!(a.commutator_with(&b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn multiply_examples() {
        let x = SparseOperator::single(1, Axis::X, 0, 1.0);
        let y = SparseOperator::single(1, Axis::Y, 0, 1.0);
        assert_eq!(x.multiply(&y).unwrap().coeff(&PauliTerm::single(Axis::Z, 0)), c(0., 1.));
        let xx = x.multiply(&x).unwrap();
        assert_eq!(xx.len(), 1);
        assert_eq!(xx.trace_normalized(), c(1., 0.));
    }

    #[test]
    fn trace_examples() {
        let id = SparseOperator::identity(3, 1.0);
        assert_eq!(id.trace_product(&id).unwrap(), c(8., 0.));
        let x = SparseOperator::single(1, Axis::X, 0, 1.0);
        let y = SparseOperator::single(1, Axis::Y, 0, 1.0);
        assert_eq!(x.trace_product(&y).unwrap(), c(0., 0.));
    }

    #[test]
    fn commutator_examples() {
        let x = SparseOperator::single(1, Axis::X, 0, 1.0);
        let y = SparseOperator::single(1, Axis::Y, 0, 1.0);
        let cxy = x.commutator_with(&y).unwrap();
        assert_eq!(cxy.len(), 1);
        assert_eq!(cxy.coeff(&PauliTerm::single(Axis::Z, 0)), c(0., 2.));

        let a = SparseOperator::from_term(5, term(&[(Axis::X, 0), (Axis::Y, 1), (Axis::Z, 2)]), c(1., 0.));
        let b = SparseOperator::from_term(5, term(&[(Axis::X, 3), (Axis::Y, 4)]), c(1., 0.));
        assert!(a.commutator_with(&b).unwrap().is_empty());
    }

    #[test]
    fn stale_index_is_detected() {
        let a = SparseOperator::single(2, Axis::X, 0, 1.0);
        let other = SparseOperator::single(2, Axis::X, 0, 1.0);
        let b = SparseOperator::single(2, Axis::Z, 0, 1.0);
        let idx = SiteIndex::new(&[&other]).unwrap();
        assert!(matches!(commutator(&b, &a, &idx), Err(Error::StaleIndex)));
        let idx = SiteIndex::new(&[&a]).unwrap();
        assert!(commutator(&b, &a, &idx).is_ok());
    }

    #[test]
    fn site_index_buckets() {
        let a = SparseOperator::from_terms(
            4,
            [(term(&[(Axis::X, 0), (Axis::Z, 2)]), c(1., 0.)), (term(&[(Axis::Y, 2)]), c(1., 0.)), (PauliTerm::identity(), c(1., 0.))],
        )
        .unwrap();
        let idx = SiteIndex::new(&[&a]).unwrap();
        assert_eq!(idx.bucket(0).len(), 1);
        assert_eq!(idx.bucket(1).len(), 0);
        assert_eq!(idx.bucket(2).len(), 2);
        assert_eq!(idx.bucket(3).len(), 0);
        for site in 0..4 {
            for &id in idx.bucket(site) {
                assert!(idx.entry(id).1.sites().any(|s| s == site));
            }
        }
    }

    #[test]
    fn batched_identity_gives_zeros() {
        let ansatz = vec![SparseOperator::single(2, Axis::Y, 0, 1.0), SparseOperator::single(2, Axis::Y, 1, 1.0)];
        let out = batched_commutator(&SparseOperator::identity(2, 1.0), &ansatz).unwrap();
        assert_eq!(out.len(), 2);
        assert!(out.iter().all(|o| o.is_empty()));
    }

    #[test]
    fn prune_examples() {
        let tiny = SparseOperator::single(1, Axis::X, 0, 1e-18);
        assert!(tiny.prune(1e-12).is_empty());
        let half = SparseOperator::single(1, Axis::X, 0, 0.5);
        assert_eq!(half.prune(1e-12), half);
        let zero = SparseOperator::single(1, Axis::X, 0, 0.0);
        assert!(zero.prune(0.0).is_empty());
        assert_eq!(tiny.prune(0.0).len(), 1);
    }

    #[test]
    fn text_round_trip() {
        let a = SparseOperator::from_terms(
            6,
            [
                (term(&[(Axis::X, 0), (Axis::Z, 2)]), c(1.5, 0.)),
                (term(&[(Axis::X, 1), (Axis::Y, 2), (Axis::Y, 3)]), c(-0.3, 0.)),
                (term(&[(Axis::Z, 3), (Axis::Z, 4), (Axis::Z, 5)]), c(2.4, 0.)),
                (PauliTerm::identity(), c(0.25, -1.0)),
            ],
        )
        .unwrap();
        let text = a.to_text();
        assert!(text.contains("1.5 0 X1 Z3\n"));
        assert!(text.contains("0.25 -1 I\n"));
        assert_eq!(SparseOperator::from_text(&text, 6).unwrap(), a);
    }

    #[test]
    fn text_rejects_bad_input() {
        assert!(SparseOperator::from_text("1 0 X7", 6).is_err());
        assert!(SparseOperator::from_text("1 0 X1 Z1", 6).is_err());
        assert!(SparseOperator::from_text("1 0 Q1", 6).is_err());
        assert!(SparseOperator::from_text("1 X1", 6).is_err());
    }

    #[test]
    fn anticommutation_matches_phase_parity() {
        let a = term(&[(Axis::X, 0), (Axis::Z, 1)]);
        let b = term(&[(Axis::Z, 0), (Axis::X, 1)]);
        assert!(!a.anticommutes(&b));
        let b = term(&[(Axis::Z, 0), (Axis::Z, 1)]);
        assert!(a.anticommutes(&b));
    }
}
