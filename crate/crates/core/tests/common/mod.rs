#![allow(dead_code)]

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use weighted_cd::oracle::{to_dense, CMatrix};
use weighted_cd::{Axis, PauliTerm, SparseOperator, C64};

pub const AXES: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

pub fn term_from_codes(codes: &[u8]) -> PauliTerm {
    PauliTerm::new(codes.iter().enumerate().filter(|(_, &c)| c > 0).map(|(s, &c)| (AXES[c as usize - 1], s))).unwrap()
}

/// Strategy for an operator on `n` spins with up to `max_terms` random complex terms.
pub fn operator(n: usize, max_terms: usize) -> impl Strategy<Value = SparseOperator> {
    prop::collection::vec((prop::collection::vec(0u8..4, n), -2.0f64..2.0, -2.0f64..2.0), 0..=max_terms).prop_map(move |terms| {
        SparseOperator::from_terms(n, terms.into_iter().map(|(codes, re, im)| (term_from_codes(&codes), C64::new(re, im)))).unwrap()
    })
}

/// Same with real coefficients.
pub fn hermitian(n: usize, max_terms: usize) -> impl Strategy<Value = SparseOperator> {
    prop::collection::vec((prop::collection::vec(0u8..4, n), -2.0f64..2.0), 0..=max_terms).prop_map(move |terms| {
        SparseOperator::from_terms(n, terms.into_iter().map(|(codes, re)| (term_from_codes(&codes), C64::new(re, 0.0)))).unwrap()
    })
}

pub fn random_hermitian(rng: &mut ChaCha8Rng, n: usize, terms: usize, max_weight: usize) -> SparseOperator {
    let mut op = SparseOperator::zero(n);
    for _ in 0..terms {
        let mut codes = vec![0u8; n];
        for _ in 0..rng.random_range(1..=max_weight) {
            codes[rng.random_range(0..n)] = rng.random_range(1..4);
        }
        let t = term_from_codes(&codes);
        if !t.is_identity() {
            op.add_term(t, C64::new(rng.random_range(-1.0..1.0), 0.0));
        }
    }
    op
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn dense(a: &SparseOperator) -> CMatrix {
    to_dense(a).unwrap()
}

pub fn max_diff(a: &CMatrix, b: &CMatrix) -> f64 {
    (a - b).iter().map(|z| z.norm()).fold(0.0, f64::max)
}

pub fn dense_trace(a: &CMatrix) -> C64 {
    a.trace()
}

pub fn rel_close(a: f64, b: f64, scale: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * scale.max(1e-300)
}

pub fn max_abs(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).fold(0.0, f64::max)
}
