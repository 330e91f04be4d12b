mod common;

use common::*;
use nalgebra::DMatrix;
use weighted_cd::action::{assemble_at_lambda, build_quadratic_form, hamiltonian_powers, monomial_operators, precompute_factorized, ActionPolynomial};
use weighted_cd::linalg::solve_qr;
use weighted_cd::model::{ising_hamiltonian, one_body_ansatz, sample_ising, two_body_ansatz, FactorizedHamiltonian, IsingClass};
use weighted_cd::oracle::{action_eigenbasis, exact_agp, to_dense, CMatrix, DenseSystem};
use weighted_cd::protocol::gs_polynomial;
use weighted_cd::{SparseOperator, C64};

fn dense_poly(h: &CMatrix, dh: &CMatrix, p: &[f64]) -> (CMatrix, CMatrix) {
    let d = h.nrows();
    let mut pw = vec![CMatrix::identity(d, d)];
    for k in 1..p.len() {
        pw.push(&pw[k - 1] * h);
    }
    let mut pm = CMatrix::zeros(d, d);
    let mut dpm = CMatrix::zeros(d, d);
    for (k, c) in p.iter().enumerate() {
        pm += &pw[k] * C64::new(*c, 0.0);
        for l in 0..k {
            dpm += &pw[l] * dh * &pw[k - 1 - l] * C64::new(*c, 0.0);
        }
    }
    (pm, dpm)
}

/// `Q`, `r` from dense matrices with `C_μ = [P, A_μ]`.
fn dense_form(h: &CMatrix, dh: &CMatrix, p: &[f64], ops: &[CMatrix]) -> (DMatrix<f64>, Vec<f64>) {
    let (pm, dpm) = dense_poly(h, dh, p);
    let d = h.nrows() as f64;
    let cs: Vec<CMatrix> = ops.iter().map(|a| &pm * a - a * &pm).collect();
    let m = ops.len();
    let q = DMatrix::from_fn(m, m, |i, j| -(&cs[i] * &cs[j]).trace().re / d);
    let r = cs.iter().map(|c| (C64::new(0.0, 1.0) * (&dpm * c).trace()).re / d).collect();
    (q, r)
}

fn random_two_factor(seed: u64, n: usize) -> FactorizedHamiltonian {
    let mut g = rng(seed);
    let f1 = random_hermitian(&mut g, n, 6, 2);
    let f2 = random_hermitian(&mut g, n, 6, 3);
    FactorizedHamiltonian::new(n, vec![(f1, weighted_cd::model::ScalarPoly::one_minus_lambda()), (f2, weighted_cd::model::ScalarPoly(vec![0.2, 0.5, 0.3]))]).unwrap()
}

#[test]
fn form_matches_dense_oracle() {
    for seed in 0..4 {
        let hf = random_two_factor(seed, 4);
        let mut g = rng(seed + 50);
        let ops: Vec<SparseOperator> = (0..4).map(|_| random_hermitian(&mut g, 4, 3, 2)).collect();
        let ansatz = weighted_cd::model::Ansatz::new("random", ops, (0..4).map(|i| i.to_string()).collect()).unwrap();
        let lambda = 0.13 + 0.2 * seed as f64;
        let (h, dh) = (hf.eval(lambda), hf.derivative(lambda));
        let poly = ActionPolynomial::new(vec![0.4, -1.1, 0.7]).unwrap();
        let form = build_quadratic_form(&h, &dh, &poly, &ansatz, lambda).unwrap();
        let ops: Vec<CMatrix> = ansatz.operators.iter().map(dense).collect();
        let (q, r) = dense_form(&dense(&h), &dense(&dh), &poly.coeffs, &ops);
        let qs = q.iter().map(|x| x.abs()).fold(0.0, f64::max);
        assert!(max_abs(&r) > 1e-3 * qs);
        for i in 0..4 {
            assert!(rel_close(form.r[i], r[i], max_abs(&r), 1e-9), "r {i}: {} vs {}", form.r[i], r[i]);
            for j in 0..4 {
                assert!(rel_close(form.q.get(i, j), q[(i, j)], qs, 1e-9));
            }
        }
    }
}

#[test]
fn eigenbasis_action_differences() {
    for (seed, class) in [(1, IsingClass::Ferro), (2, IsingClass::Antiferro), (3, IsingClass::SpinGlass)] {
        let inst = sample_ising(class, 2, 2, seed).unwrap();
        let hf = ising_hamiltonian(&inst);
        let ansatz = two_body_ansatz(&inst);
        let lambda = 0.41;
        let (h, dh) = (hf.eval(lambda), hf.derivative(lambda));
        let ds = DenseSystem::from_operator(&h).unwrap();
        let phi = exact_agp(&ds, &dense(&dh)).unwrap();
        for poly in [ActionPolynomial::identity(), gs_polynomial(3, -1.3).unwrap()] {
            let form = build_quadratic_form(&h, &dh, &poly, &ansatz, lambda).unwrap();
            let mut g = rng(seed + 100);
            for _ in 0..5 {
                use rand::Rng;
                let a1: Vec<f64> = (0..ansatz.len()).map(|_| g.random_range(-1.0..1.0)).collect();
                let a2: Vec<f64> = (0..ansatz.len()).map(|_| g.random_range(-1.0..1.0)).collect();
                let s1 = action_eigenbasis(&ds, &poly, &dense(&ansatz.combine(&a1)), &phi);
                let s2 = action_eigenbasis(&ds, &poly, &dense(&ansatz.combine(&a2)), &phi);
                let dim = ds.dim() as f64;
                let expected = dim * (form.objective(&a1) - form.objective(&a2));
                assert!(rel_close(s1 - s2, expected, s1.abs().max(s2.abs()), 1e-8), "{} vs {expected}", s1 - s2);
            }
        }
    }
}

#[test]
fn exact_agp_minimizes_action() {
    let inst = sample_ising(IsingClass::Ferro, 2, 2, 9).unwrap();
    let hf = ising_hamiltonian(&inst);
    let ds = DenseSystem::from_operator(&hf.eval(0.6)).unwrap();
    let phi = exact_agp(&ds, &dense(&hf.derivative(0.6))).unwrap();
    assert!(action_eigenbasis(&ds, &gs_polynomial(2, 0.3).unwrap(), &phi, &phi).abs() < 1e-20);
}

#[test]
fn sweep_matches_single_lambda() {
    let inst = sample_ising(IsingClass::SpinGlass, 5, 1, 4).unwrap();
    let hf = ising_hamiltonian(&inst);
    let ansatz = two_body_ansatz(&inst);
    let ft = precompute_factorized(&hf, 3, &ansatz).unwrap();
    for (i, lambda) in [0.0, 0.17, 0.5, 0.77, 1.0].into_iter().enumerate() {
        let (h, dh) = (hf.eval(lambda), hf.derivative(lambda));
        for k in 1..=3 {
            let poly = gs_polynomial(k, -0.5 + 0.3 * i as f64).unwrap();
            let a = build_quadratic_form(&h, &dh, &poly, &ansatz, lambda).unwrap();
            let b = assemble_at_lambda(&ft, &poly, lambda).unwrap();
            let qs = a.q.max_abs();
            for x in 0..ansatz.len() {
                assert!(rel_close(a.r[x], b.r[x], max_abs(&a.r), 1e-9), "K={k} λ={lambda} r[{x}] {} {}", a.r[x], b.r[x]);
                for y in 0..ansatz.len() {
                    assert!(rel_close(a.q.get(x, y), b.q.get(x, y), qs, 1e-9));
                }
            }
        }
    }
    assert!(assemble_at_lambda(&ft, &gs_polynomial(4, 0.0).unwrap(), 0.5).is_err());
}

#[test]
fn monomial_operators_reproduce_powers() {
    let hf = random_two_factor(11, 4);
    let (mons, ops) = monomial_operators(&hf, 3).unwrap();
    for lambda in [0.23, 0.81] {
        let f: Vec<f64> = hf.coeffs(lambda);
        let h = hf.eval(lambda);
        let pw = hamiltonian_powers(&h, &hf.derivative(lambda), 3).unwrap();
        for k in 0..=3usize {
            let mut acc = SparseOperator::zero(4);
            for (e, op) in mons.iter().zip(&ops) {
                if e.iter().sum::<u32>() as usize == k {
                    let c: f64 = e.iter().zip(&f).map(|(&x, v)| v.powi(x as i32)).product();
                    acc.axpy(C64::new(c, 0.0), op).unwrap();
                }
            }
            assert!(acc.sub(&pw.power(k)).unwrap().max_abs() < 1e-10);
        }
    }
}

#[test]
fn q_is_positive_semidefinite() {
    for seed in 0..5 {
        let inst = sample_ising(IsingClass::SpinGlass, 3, 2, seed).unwrap();
        let hf = ising_hamiltonian(&inst);
        let ansatz = two_body_ansatz(&inst);
        let ft = precompute_factorized(&hf, 3, &ansatz).unwrap();
        let form = assemble_at_lambda(&ft, &gs_polynomial(3, -2.0).unwrap(), 0.3).unwrap();
        assert!(form.q.is_symmetric(1e-10));
        let m = ansatz.len();
        let eig = DMatrix::from_row_slice(m, m, form.q.data()).symmetric_eigen();
        let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(min >= -1e-9 * form.q.max_abs(), "min eigenvalue {min}");
    }
}

#[test]
fn scale_covariance_and_argmin_invariance() {
    let inst = sample_ising(IsingClass::Ferro, 3, 1, 2).unwrap();
    let hf = ising_hamiltonian(&inst);
    let ansatz = one_body_ansatz(3);
    let ft = precompute_factorized(&hf, 2, &ansatz).unwrap();
    let poly = gs_polynomial(2, -1.0).unwrap();
    let a = assemble_at_lambda(&ft, &poly, 0.4).unwrap();
    let b = assemble_at_lambda(&ft, &poly.scaled(2.0), 0.4).unwrap();
    for i in 0..3 {
        assert!((b.r[i] - 4.0 * a.r[i]).abs() < 1e-12 * max_abs(&a.r));
        for j in 0..3 {
            assert!((b.q.get(i, j) - 4.0 * a.q.get(i, j)).abs() < 1e-12 * a.q.max_abs());
        }
    }
    let xa = solve_qr(&a.q, &a.r).unwrap();
    let xb = solve_qr(&b.q, &b.r).unwrap();
    for i in 0..3 {
        assert!((xa[i] - xb[i]).abs() < 1e-12 * max_abs(&xa));
    }
}

/// Grid minimization of `‖∂H - i[H, V]‖²` for a two-spin system, refined by zooming.
#[test]
fn two_spin_conventional_alpha_from_grid() {
    let inst = sample_ising(IsingClass::Ferro, 2, 1, 5).unwrap();
    let hf = ising_hamiltonian(&inst);
    let ansatz = one_body_ansatz(2);
    let lambda = 0.35;
    let (h, dh) = (hf.eval(lambda), hf.derivative(lambda));
    let form = build_quadratic_form(&h, &dh, &ActionPolynomial::identity(), &ansatz, lambda).unwrap();
    let alpha = solve_qr(&form.q, &form.r).unwrap();
    let (hd, dhd) = (to_dense(&h).unwrap(), to_dense(&dh).unwrap());
    let ops: Vec<CMatrix> = ansatz.operators.iter().map(dense).collect();
    let action = |a: &[f64]| {
        let v = &ops[0] * C64::new(a[0], 0.0) + &ops[1] * C64::new(a[1], 0.0);
        let g = &dhd - (&hd * &v - &v * &hd) * C64::new(0.0, 1.0);
        g.iter().map(|z| z.norm_sqr()).sum::<f64>()
    };
    let (mut center, mut half) = ([0.0, 0.0], 4.0);
    for _ in 0..12 {
        let mut best = (f64::INFINITY, center);
        for i in 0..=40 {
            for j in 0..=40 {
                let p = [center[0] - half + half * i as f64 / 20.0, center[1] - half + half * j as f64 / 20.0];
                let v = action(&p);
                if v < best.0 {
                    best = (v, p);
                }
            }
        }
        center = best.1;
        half /= 8.0;
    }
    for i in 0..2 {
        assert!((alpha[i] - center[i]).abs() < 1e-8, "{alpha:?} vs {center:?}");
    }
}

#[test]
fn hamiltonian_power_growth() {
    for k in 1..=3usize {
        let counts: Vec<f64> = [8usize, 16, 32]
            .iter()
            .map(|&n| {
                let inst = sample_ising(IsingClass::Ferro, n, 1, 3).unwrap();
                let hf = ising_hamiltonian(&inst);
                hamiltonian_powers(&hf.eval(0.5), &hf.derivative(0.5), k).unwrap().powers[k - 1].len() as f64
            })
            .collect();
        let slope = (counts[2].ln() - counts[0].ln()) / (32f64.ln() - 8f64.ln());
        assert!((slope - k as f64).abs() <= 0.5, "k={k} slope {slope} counts {counts:?}");
    }
}

#[test]
fn trace_cache_round_trip() {
    let inst = sample_ising(IsingClass::Ferro, 2, 2, 1).unwrap();
    let hf = ising_hamiltonian(&inst);
    let ansatz = one_body_ansatz(4);
    let ft = precompute_factorized(&hf, 2, &ansatz).unwrap();
    let dir = std::env::temp_dir().join(format!("wcd-cache-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("traces.json");
    ft.save(&path).unwrap();
    let back = weighted_cd::action::FactorizedTraces::load(&path).unwrap();
    let p = gs_polynomial(2, 0.5).unwrap();
    let (a, b) = (assemble_at_lambda(&ft, &p, 0.3).unwrap(), assemble_at_lambda(&back, &p, 0.3).unwrap());
    assert_eq!(a.r, b.r);
    assert_eq!(a.q, b.q);
    std::fs::remove_dir_all(dir).ok();
}

