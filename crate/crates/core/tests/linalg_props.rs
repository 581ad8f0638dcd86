mod common;

use common::*;
use moe_laplace::linalg::{
    cholesky, cholesky_strict, kron, logdet_dense, rsvd_update, svd, FactorSketch, LowRankFactor, Matrix, SketchConfig,
};
use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;

fn gram_of(columns: &[Vec<f64>], dim: usize) -> DMatrix<f64> {
    let mut g = DMatrix::zeros(dim, dim);
    for c in columns {
        let v = nalgebra::DVector::from_column_slice(c);
        g += &v * v.transpose();
    }
    g
}

fn eig_desc(g: &DMatrix<f64>) -> Vec<f64> {
    let mut e: Vec<f64> = SymmetricEigen::new(g.clone()).eigenvalues.iter().copied().collect();
    e.sort_by(|a, b| b.total_cmp(a));
    e
}

fn spectral_norm_sym(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone()).eigenvalues.amax()
}

fn stream(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng(seed);
    (0..n).map(|_| gaussian(dim, 1, &mut r).into_data()).collect()
}

#[test]
fn cholesky_reconstructs_gram_plus_identity() {
    let mut r = rng(11);
    let a = gaussian(5, 5, &mut r);
    let spd = a.tmatmul(&a).unwrap().add(&Matrix::identity(5)).unwrap();
    let c = cholesky(&spd).unwrap();
    let l = to_na(&c.l);
    let s = to_na(&spd);
    assert!((&l * l.transpose() - &s).norm() <= 1e-10 * s.norm());
}

#[test]
fn logdet_matches_eigenvalue_product() {
    let mut r = rng(12);
    let a = gaussian(6, 6, &mut r);
    let spd = a.tmatmul(&a).unwrap().add(&Matrix::identity(6)).unwrap();
    let expected: f64 = eig_desc(&to_na(&spd)).iter().map(|v| v.ln()).sum();
    assert!((logdet_dense(&spd).unwrap() - expected).abs() < 1e-10);
}

#[test]
fn svd_of_rank_one_outer_product() {
    let u = [1.0, -2.0, 0.5, 3.0];
    let v = [0.3, 0.4, -1.2];
    let m = Matrix::from_fn(4, 3, |i, j| u[i] * v[j]);
    let d = svd(&m).unwrap();
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!((d.s[0] - nu * nv).abs() < 1e-12);
    assert!(d.s[1..].iter().all(|s| *s <= 1e-10));
}

#[test]
fn rsvd_recovers_low_rank_stream_exactly() {
    // Orthogonal columns scaled differently, fewer than the target rank.
    let dim = 12;
    let cfg = SketchConfig {
        target_rank: 4,
        oversampling: 5,
        seed: 3,
        block_columns: 64,
    };
    let cols: Vec<Vec<f64>> = (0..4)
        .map(|k| {
            (0..dim)
                .map(|i| if i == 2 * k { 1.0 + k as f64 } else { 0.0 })
                .collect()
        })
        .collect();
    let mut f = LowRankFactor::zeros(dim);
    for c in &cols {
        f = rsvd_update(&f, c, &cfg).unwrap();
    }
    let g = gram_of(&cols, dim);
    assert!((to_na(&f.outer()) - &g).norm() <= 1e-8);

    // A longer stream that lives in a rank-3 subspace, through the block sketch.
    let mut r = rng(5);
    let basis = gaussian(dim, 3, &mut r);
    let long: Vec<Vec<f64>> = (0..200)
        .map(|_| basis.matvec(&gaussian(3, 1, &mut r).into_data()))
        .collect();
    let mut sk = FactorSketch::new(
        dim,
        SketchConfig {
            block_columns: 16,
            ..cfg
        },
    );
    for c in &long {
        sk.push(c).unwrap();
    }
    let f = sk.finish().unwrap();
    let g = gram_of(&long, dim);
    assert!((to_na(&f.outer()) - &g).norm() <= 1e-8 * g.norm().max(1.0));
}

#[test]
fn rsvd_full_rank_stream_is_near_optimal() {
    let dim = 20;
    let cfg = SketchConfig {
        target_rank: 5,
        oversampling: 5,
        seed: 21,
        block_columns: 64,
    };
    for seed in [1u64, 2, 3] {
        let cols = stream(50, dim, seed);
        let g = gram_of(&cols, dim);
        let optimal = eig_desc(&g)[5];

        let mut f = LowRankFactor::zeros(dim);
        for c in &cols {
            f = rsvd_update(&f, c, &cfg).unwrap();
        }
        let err = spectral_norm_sym(&(to_na(&f.outer()) - &g));
        assert!(err <= 10.0 * optimal, "seed {seed}: {err} vs optimal {optimal}");

        let mut sk = FactorSketch::new(dim, cfg);
        for c in &cols {
            sk.push(c).unwrap();
        }
        let err = spectral_norm_sym(&(to_na(&sk.finish().unwrap().outer()) - &g));
        assert!(err <= 10.0 * optimal, "seed {seed} (block): {err} vs optimal {optimal}");
    }
}

fn small_matrix(max: usize) -> impl Strategy<Value = Matrix> {
    (1..=max, 1..=max, any::<u64>()).prop_map(|(r, c, s)| gaussian(r, c, &mut rng(s)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn kron_mixed_product(seed in any::<u64>(), m in 1usize..4, n in 1usize..4, p in 1usize..4, q in 1usize..4, k in 1usize..4, l in 1usize..4) {
        let mut r = rng(seed);
        let a = gaussian(m, n, &mut r);
        let b = gaussian(p, q, &mut r);
        let c = gaussian(n, k, &mut r);
        let d = gaussian(q, l, &mut r);
        let lhs = kron(&a, &b).unwrap().matmul(&kron(&c, &d).unwrap()).unwrap();
        let rhs = kron(&a.matmul(&c).unwrap(), &b.matmul(&d).unwrap()).unwrap();
        let scale = rhs.frobenius_norm().max(1.0);
        prop_assert!(lhs.sub(&rhs).unwrap().frobenius_norm() <= 1e-10 * scale);
    }

    #[test]
    fn kron_matches_dense_oracle(a in small_matrix(4), b in small_matrix(4)) {
        let ours = to_na(&kron(&a, &b).unwrap());
        let theirs = to_na(&a).kronecker(&to_na(&b));
        prop_assert_eq!(ours, theirs);
    }

    #[test]
    fn factor_outer_products_commute_with_kron(seed in any::<u64>(), da in 1usize..5, dg in 1usize..5, r in 1usize..4) {
        let mut g = rng(seed);
        let la = gaussian(da, r, &mut g);
        let lg = gaussian(dg, r, &mut g);
        let lhs = kron(&la.outer_product(), &lg.outer_product()).unwrap();
        let k = kron(&la, &lg).unwrap();
        let rhs = k.matmul(&k.transpose()).unwrap();
        prop_assert!(to_na(&lhs.sub(&rhs).unwrap()).amax() <= 1e-10 * to_na(&rhs).amax().max(1.0));
    }

    #[test]
    fn cholesky_is_exactly_lower_triangular(seed in any::<u64>(), n in 1usize..7) {
        let a = gaussian(n, n, &mut rng(seed));
        let spd = a.tmatmul(&a).unwrap().add(&Matrix::identity(n)).unwrap();
        let c = cholesky_strict(&spd).unwrap();
        for i in 0..n {
            for j in i + 1..n {
                prop_assert_eq!(c.l.get(i, j).to_bits(), 0u64);
            }
        }
    }

    #[test]
    fn svd_reconstructs_with_sorted_values(a in small_matrix(6)) {
        let d = svd(&a).unwrap();
        prop_assert!(d.s.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(d.s.iter().all(|s| *s >= 0.0));
        let us = Matrix::from_fn(d.u.rows(), d.s.len(), |i, j| d.u.get(i, j) * d.s[j]);
        let back = us.matmul(&d.v.transpose()).unwrap();
        prop_assert!(back.sub(&a).unwrap().frobenius_norm() <= 1e-9 * a.frobenius_norm().max(1e-300));
    }

    #[test]
    fn rsvd_never_beats_eckart_young(seed in any::<u64>(), n in 6usize..30, rank in 1usize..5) {
        let dim = 8;
        let cfg = SketchConfig { target_rank: rank, oversampling: 3, seed, block_columns: 7 };
        let cols = stream(n, dim, seed ^ 0x55);
        let g = gram_of(&cols, dim);
        let e = eig_desc(&g);
        let optimal: f64 = e[rank..].iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut sk = FactorSketch::new(dim, cfg);
        for c in &cols {
            sk.push(c).unwrap();
        }
        let f = sk.finish().unwrap();
        prop_assert!(f.rank() <= rank);
        let err = (to_na(&f.outer()) - &g).norm();
        prop_assert!(err >= optimal - 1e-12, "{} < {}", err, optimal);
    }

    #[test]
    fn rsvd_update_is_deterministic(seed in any::<u64>(), n in 1usize..20) {
        let cfg = SketchConfig { target_rank: 3, oversampling: 2, seed, block_columns: 64 };
        let cols = stream(n, 6, seed);
        let run = || {
            let mut f = LowRankFactor::zeros(6);
            for c in &cols {
                f = rsvd_update(&f, c, &cfg).unwrap();
            }
            f.factor.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        prop_assert_eq!(run(), run());
    }
}

trait OuterProduct {
    fn outer_product(&self) -> Matrix;
}

impl OuterProduct for Matrix {
    fn outer_product(&self) -> Matrix {
        self.matmul(&self.transpose()).unwrap()
    }
}
