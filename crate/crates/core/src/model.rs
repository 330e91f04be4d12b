//! Parameterized Hamiltonians, random Ising instances and driving ansätze.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::pauli::{Axis, PauliTerm, SparseOperator, C64, DEFAULT_PRUNE_TOL};
use crate::{Error, Result};

pub const INSTANCE_SCHEMA_VERSION: u32 = 1;

/// Gamma shape and scale giving mean 1.0 and standard deviation 0.5.
pub const GAMMA_SHAPE: f64 = 4.0;
pub const GAMMA_SCALE: f64 = 0.25;

/// Real polynomial in λ, lowest order first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalarPoly(pub Vec<f64>);

impl ScalarPoly {
    pub fn constant(c: f64) -> Self {
        Self(vec![c])
    }

    pub fn one_minus_lambda() -> Self {
        Self(vec![1.0, -1.0])
    }

    pub fn lambda() -> Self {
        Self(vec![0.0, 1.0])
    }

    pub fn value(&self, x: f64) -> f64 {
        self.0.iter().rev().fold(0.0, |acc, c| acc * x + c)
    }

    pub fn derivative(&self, x: f64) -> f64 {
        self.0
            .iter()
            .enumerate()
            .skip(1)
            .rev()
            .fold(0.0, |acc, (k, c)| acc * x + k as f64 * c)
    }
}

/// `H(λ) = Σ_γ f_γ(λ) F_γ` with λ-independent operators `F_γ`.
#[derive(Clone, Debug)]
pub struct FactorizedHamiltonian {
    nspins: usize,
    factors: Vec<(SparseOperator, ScalarPoly)>,
}

impl FactorizedHamiltonian {
    pub fn new(nspins: usize, factors: Vec<(SparseOperator, ScalarPoly)>) -> Result<Self> {
        if factors.is_empty() {
            return Err(Error::InvalidInput("a factorized Hamiltonian needs at least one factor".into()));
        }
        for (f, _) in &factors {
            if f.nspins() != nspins {
                return Err(Error::Dimension { expected: nspins, found: f.nspins() });
            }
        }
        Ok(Self { nspins, factors })
    }

    pub fn nspins(&self) -> usize {
        self.nspins
    }

    /// Number of factors Γ.
    pub fn gamma(&self) -> usize {
        self.factors.len()
    }

    pub fn factors(&self) -> &[(SparseOperator, ScalarPoly)] {
        &self.factors
    }

    pub fn operator(&self, g: usize) -> &SparseOperator {
        &self.factors[g].0
    }

    pub fn coeffs(&self, lambda: f64) -> Vec<f64> {
        self.factors.iter().map(|(_, f)| f.value(lambda)).collect()
    }

    pub fn coeff_derivs(&self, lambda: f64) -> Vec<f64> {
        self.factors.iter().map(|(_, f)| f.derivative(lambda)).collect()
    }

    fn combine(&self, weights: &[f64]) -> SparseOperator {
        let mut out = SparseOperator::zero(self.nspins);
        for ((op, _), w) in self.factors.iter().zip(weights) {
            out.axpy(C64::new(*w, 0.0), op).expect("factors share nspins");
        }
        out.prune_mut(DEFAULT_PRUNE_TOL);
        out
    }

    pub fn eval(&self, lambda: f64) -> SparseOperator {
        self.combine(&self.coeffs(lambda))
    }

    /// `∂_λ H(λ)`.
    pub fn derivative(&self, lambda: f64) -> SparseOperator {
        self.combine(&self.coeff_derivs(lambda))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum IsingClass {
    #[serde(rename = "ferro")]
    Ferro,
    #[serde(rename = "antiferro")]
    Antiferro,
    #[serde(rename = "spin-glass")]
    SpinGlass,
}

impl IsingClass {
    /// Sign in front of the coupling sum.
    pub fn coupling_sign(self) -> f64 {
        match self {
            IsingClass::Ferro => -1.0,
            IsingClass::Antiferro | IsingClass::SpinGlass => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            IsingClass::Ferro => "ferro",
            IsingClass::Antiferro => "antiferro",
            IsingClass::SpinGlass => "spin-glass",
        }
    }
}

impl fmt::Display for IsingClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for IsingClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ferro" | "ferromagnetic" => Ok(IsingClass::Ferro),
            "antiferro" | "antiferromagnetic" => Ok(IsingClass::Antiferro),
            "spin-glass" | "spinglass" | "glass" => Ok(IsingClass::SpinGlass),
            _ => Err(Error::InvalidInput(format!("unknown instance class '{s}'"))),
        }
    }
}

/// Nearest-neighbour edges of an open `width × height` lattice.
///
/// Site `(row, col)` has index `row * width + col`. Edges are listed in
/// row-major site order; at each site the horizontal edge to `(row, col+1)`
/// precedes the vertical edge to `(row+1, col)`.
pub fn lattice_edges(width: usize, height: usize) -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    for row in 0..height {
        for col in 0..width {
            let i = row * width + col;
            if col + 1 < width {
                edges.push((i, i + 1));
            }
            if row + 1 < height {
                edges.push((i, i + width));
            }
        }
    }
    edges
}

/// Random transverse-field Ising instance on an open square lattice.
#[derive(Clone, Debug, PartialEq)]
pub struct IsingInstance {
    pub class: IsingClass,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    /// Longitudinal fields, one per site.
    pub h: Vec<f64>,
    /// Couplings in [`lattice_edges`] order.
    pub j: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceFile {
    schema_version: u32,
    class: IsingClass,
    width: usize,
    height: usize,
    seed: u64,
    h: Vec<f64>,
    #[serde(rename = "J")]
    j: BTreeMap<String, f64>,
}

fn edge_key(i: usize, j: usize) -> String {
    format!("({},{})", i + 1, j + 1)
}

impl IsingInstance {
    pub fn nspins(&self) -> usize {
        self.width * self.height
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        lattice_edges(self.width, self.height)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidInput("lattice dimensions must be positive".into()));
        }
        if self.h.len() != self.nspins() {
            return Err(Error::InvalidInput(format!("expected {} fields, found {}", self.nspins(), self.h.len())));
        }
        let ne = self.edges().len();
        if self.j.len() != ne {
            return Err(Error::InvalidInput(format!("expected {} couplings, found {}", ne, self.j.len())));
        }
        if self.h.iter().chain(&self.j).any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("non-finite instance parameter".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let file = InstanceFile {
            schema_version: INSTANCE_SCHEMA_VERSION,
            class: self.class,
            width: self.width,
            height: self.height,
            seed: self.seed,
            h: self.h.clone(),
            j: self.edges().iter().zip(&self.j).map(|(&(a, b), &v)| (edge_key(a, b), v)).collect(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: InstanceFile = serde_json::from_str(s)?;
        if file.schema_version != INSTANCE_SCHEMA_VERSION {
            return Err(Error::Parse(format!("unsupported instance schema version {}", file.schema_version)));
        }
        let edges = lattice_edges(file.width, file.height);
        if file.j.len() != edges.len() {
            return Err(Error::Parse(format!("expected {} couplings, found {}", edges.len(), file.j.len())));
        }
        let j = edges
            .iter()
            .map(|&(a, b)| file.j.get(&edge_key(a, b)).copied().ok_or_else(|| Error::Parse(format!("missing coupling {}", edge_key(a, b)))))
            .collect::<Result<Vec<_>>>()?;
        let inst = Self { class: file.class, width: file.width, height: file.height, seed: file.seed, h: file.h, j };
        inst.validate()?;
        Ok(inst)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Stable 64-bit FNV-1a fingerprint of the serialized parameters.
    pub fn fingerprint(&self) -> u64 {
        fnv1a(self.to_json().unwrap_or_default().as_bytes())
    }

    /// Copy with the field on `site` replaced.
    pub fn with_field(&self, site: usize, value: f64) -> Self {
        let mut out = self.clone();
        out.h[site] = value;
        out
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Draws an instance with a ChaCha20 stream seeded from `seed`.
///
/// Fields are drawn first, then couplings in edge order. Gamma variates use
/// the Marsaglia–Tsang method as implemented by `rand_distr`.
pub fn sample_ising(class: IsingClass, width: usize, height: usize, seed: u64) -> Result<IsingInstance> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidInput("lattice dimensions must be positive".into()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let gamma = Gamma::new(GAMMA_SHAPE, GAMMA_SCALE).expect("valid gamma parameters");
    let n = width * height;
    let h: Vec<f64> = (0..n).map(|_| gamma.sample(&mut rng)).collect();
    let ne = lattice_edges(width, height).len();
    let j: Vec<f64> = match class {
        IsingClass::Ferro | IsingClass::Antiferro => (0..ne).map(|_| gamma.sample(&mut rng)).collect(),
        IsingClass::SpinGlass => {
            let normal = Normal::new(0.0, 1.0).expect("valid normal parameters");
            (0..ne).map(|_| normal.sample(&mut rng)).collect()
        }
    };
    Ok(IsingInstance { class, width, height, seed, h, j })
}

/// `F₁ = Σ X_i` with `f₁ = 1-λ`, `F₂ = Σ h_i Z_i ± Σ J_ij Z_i Z_j` with `f₂ = λ`.
pub fn ising_hamiltonian(inst: &IsingInstance) -> FactorizedHamiltonian {
    let n = inst.nspins();
    let mut f1 = SparseOperator::zero(n);
    let mut f2 = SparseOperator::zero(n);
    for i in 0..n {
        f1.add_term(PauliTerm::single(Axis::X, i), C64::new(1.0, 0.0));
        f2.add_term(PauliTerm::single(Axis::Z, i), C64::new(inst.h[i], 0.0));
    }
    let sign = inst.class.coupling_sign();
    for (&(a, b), &jv) in inst.edges().iter().zip(&inst.j) {
        let t = PauliTerm::new([(Axis::Z, a), (Axis::Z, b)]).expect("distinct sites");
        f2.add_term(t, C64::new(sign * jv, 0.0));
    }
    f2.prune_mut(0.0);
    FactorizedHamiltonian::new(n, vec![(f1, ScalarPoly::one_minus_lambda()), (f2, ScalarPoly::lambda())])
        .expect("factors share nspins")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AnsatzKind {
    #[serde(rename = "one-body")]
    OneBody,
    #[serde(rename = "two-body")]
    TwoBody,
}

impl AnsatzKind {
    pub fn name(self) -> &'static str {
        match self {
            AnsatzKind::OneBody => "one-body",
            AnsatzKind::TwoBody => "two-body",
        }
    }

    pub fn build(self, inst: &IsingInstance) -> Ansatz {
        match self {
            AnsatzKind::OneBody => one_body_ansatz(inst.nspins()),
            AnsatzKind::TwoBody => two_body_ansatz(inst),
        }
    }
}

impl FromStr for AnsatzKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "one-body" | "one" | "1" => Ok(AnsatzKind::OneBody),
            "two-body" | "two" | "2" => Ok(AnsatzKind::TwoBody),
            _ => Err(Error::InvalidInput(format!("unknown ansatz '{s}'"))),
        }
    }
}

/// Ordered list of Hermitian driving operators.
#[derive(Clone, Debug)]
pub struct Ansatz {
    pub id: String,
    pub operators: Vec<SparseOperator>,
    pub labels: Vec<String>,
}

impl Ansatz {
    pub fn new(id: impl Into<String>, operators: Vec<SparseOperator>, labels: Vec<String>) -> Result<Self> {
        if operators.is_empty() {
            return Err(Error::InvalidInput("an ansatz needs at least one operator".into()));
        }
        if labels.len() != operators.len() {
            return Err(Error::InvalidInput("one label per ansatz operator is required".into()));
        }
        let n = operators[0].nspins();
        for op in &operators {
            if op.nspins() != n {
                return Err(Error::Dimension { expected: n, found: op.nspins() });
            }
            if !op.is_hermitian(1e-12) {
                return Err(Error::InvalidInput("ansatz operators must be Hermitian".into()));
            }
        }
        Ok(Self { id: id.into(), operators, labels })
    }

    pub fn len(&self) -> usize {
        self.operators.len()
    }

    pub fn is_empty(&self) -> bool {
        self.operators.is_empty()
    }

    pub fn nspins(&self) -> usize {
        self.operators[0].nspins()
    }

    /// `V(α) = Σ α_μ A_μ`.
    pub fn combine(&self, alpha: &[f64]) -> SparseOperator {
        let mut v = SparseOperator::zero(self.nspins());
        for (op, a) in self.operators.iter().zip(alpha) {
            v.axpy(C64::new(*a, 0.0), op).expect("ansatz operators share nspins");
        }
        v.prune_mut(0.0);
        v
    }
}

/// `A_i = Y_i` for every site.
pub fn one_body_ansatz(n: usize) -> Ansatz {
    let ops = (0..n).map(|i| SparseOperator::single(n, Axis::Y, i, 1.0)).collect();
    let labels = (0..n).map(|i| format!("Y{}", i + 1)).collect();
    Ansatz::new(AnsatzKind::OneBody.name(), ops, labels).expect("valid one-body ansatz")
}

/// `Y_i` on every site, then `Y_i Z_j + Z_i Y_j` on every edge in lattice order.
pub fn two_body_ansatz(inst: &IsingInstance) -> Ansatz {
    let n = inst.nspins();
    let mut base = one_body_ansatz(n);
    for (a, b) in inst.edges() {
        let yz = PauliTerm::new([(Axis::Y, a), (Axis::Z, b)]).expect("distinct sites");
        let zy = PauliTerm::new([(Axis::Z, a), (Axis::Y, b)]).expect("distinct sites");
        let op = SparseOperator::from_terms(n, [(yz, C64::new(1.0, 0.0)), (zy, C64::new(1.0, 0.0))]).expect("sites in range");
        base.operators.push(op);
        base.labels.push(format!("Y{0}Z{1}+Z{0}Y{1}", a + 1, b + 1));
    }
    base.id = AnsatzKind::TwoBody.name().into();
    base
}

/// Every non-identity Pauli string on `n` spins; `4^n - 1` operators.
pub fn complete_ansatz(n: usize) -> Ansatz {
    let mut ops = Vec::new();
    let mut labels = Vec::new();
    for code in 1..(1usize << (2 * n)) {
        let factors = (0..n).filter_map(|s| {
            let a = (code >> (2 * s)) & 3;
            let axis = match a {
                1 => Axis::X,
                2 => Axis::Y,
                3 => Axis::Z,
                _ => return None,
            };
            Some((axis, s))
        });
        let t = PauliTerm::new(factors).expect("distinct sites");
        labels.push(t.to_string());
        ops.push(SparseOperator::from_term(n, t, C64::new(1.0, 0.0)));
    }
    Ansatz::new("complete", ops, labels).expect("valid complete ansatz")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn edge_counts() {
        assert_eq!(lattice_edges(3, 3).len(), 12);
        assert_eq!(lattice_edges(4, 3).len(), 17);
        assert_eq!(lattice_edges(5, 1).len(), 4);
        assert_eq!(lattice_edges(1, 1).len(), 0);
        assert_eq!(lattice_edges(2, 2), vec![(0, 1), (0, 2), (1, 3), (2, 3)]);
    }

    #[test]
    fn scalar_poly_derivative() {
        let p = ScalarPoly(vec![1.0, -2.0, 3.0]);
        assert_eq!(p.value(2.0), 1.0 - 4.0 + 12.0);
        assert_eq!(p.derivative(2.0), -2.0 + 12.0);
        assert_eq!(ScalarPoly::one_minus_lambda().derivative(0.3), -1.0);
        assert_eq!(ScalarPoly::lambda().derivative(0.3), 1.0);
        assert_eq!(ScalarPoly::constant(4.0).derivative(0.3), 0.0);
    }

    #[test]
    fn ansatz_sizes() {
        let a = one_body_ansatz(3);
        assert_eq!(a.len(), 3);
        assert_eq!(a.labels, vec!["Y1", "Y2", "Y3"]);
        let inst = sample_ising(IsingClass::Ferro, 2, 1, 0).unwrap();
        let b = two_body_ansatz(&inst);
        assert_eq!(b.len(), 3);
        assert_eq!(b.labels[2], "Y1Z2+Z1Y2");
        let inst = sample_ising(IsingClass::Ferro, 4, 3, 0).unwrap();
        assert_eq!(two_body_ansatz(&inst).len(), 29);
        assert_eq!(complete_ansatz(2).len(), 15);
    }

    #[test]
    fn sampling_is_deterministic_and_signed() {
        let a = sample_ising(IsingClass::Antiferro, 3, 3, 11).unwrap();
        let b = sample_ising(IsingClass::Antiferro, 3, 3, 11).unwrap();
        assert_eq!(a, b);
        assert!(a.h.iter().chain(&a.j).all(|&x| x >= 0.0));
        let c = sample_ising(IsingClass::Antiferro, 3, 3, 12).unwrap();
        assert_ne!(a, c);
        assert!(sample_ising(IsingClass::Ferro, 0, 3, 1).is_err());
        assert!("magnet".parse::<IsingClass>().is_err());
    }

    #[test]
    fn hamiltonian_endpoints() {
        let inst = sample_ising(IsingClass::Ferro, 2, 2, 5).unwrap();
        let hf = ising_hamiltonian(&inst);
        let h0 = hf.eval(0.0);
        assert_eq!(h0.len(), 4);
        assert!(h0.iter().all(|(t, c)| t.weight() == 1 && t.axis_at(t.max_site().unwrap()) == Some(Axis::X) && c.re == 1.0));
        let h1 = hf.eval(1.0);
        assert!(h1.iter().all(|(t, _)| t.factors().all(|(a, _)| a == Axis::Z)));
        let zz = PauliTerm::new([(Axis::Z, 0), (Axis::Z, 1)]).unwrap();
        assert_eq!(h1.coeff(&zz).re, -inst.j[0]);
    }

    #[test]
    fn instance_json_round_trip() {
        let inst = sample_ising(IsingClass::SpinGlass, 3, 2, 99).unwrap();
        let s = inst.to_json().unwrap();
        assert!(s.contains("\"(1,2)\""));
        assert!(s.contains("\"schema_version\": 1"));
        let back = IsingInstance::from_json(&s).unwrap();
        assert_eq!(back, inst);
        for (a, b) in back.h.iter().chain(&back.j).zip(inst.h.iter().chain(&inst.j)) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(back.fingerprint(), inst.fingerprint());
        let bad = s.replace("\"seed\"", "\"sede\"");
        assert!(IsingInstance::from_json(&bad).is_err());
    }
}
