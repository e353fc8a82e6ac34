use deepssm_core::shape::{read_correspondences, write_particles};
use deepssm_core::shape_stats::PcaSolver;
use deepssm_core::synthbench::{FamilyKind, SyntheticFamily};
use deepssm_core::{CorrespondenceSet, ShapeModel};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_population(n: usize, m: usize, seed: u64) -> Vec<CorrespondenceSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let pts = (0..m).map(|_| [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)]);
            CorrespondenceSet::new(format!("s{i}"), pts.collect()).unwrap()
        })
        .collect()
}

/// Cyclic Jacobi rotations on a dense symmetric matrix; returns (values, column vectors).
fn jacobi_eigen(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j].powi(2)).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j][j].total_cmp(&a[i][i]));
    let values = order.iter().map(|&i| a[i][i]).collect();
    let vectors = order.iter().map(|&i| (0..n).map(|k| v[k][i]).collect()).collect();
    (values, vectors)
}

fn covariance(pop: &[CorrespondenceSet]) -> Vec<Vec<f64>> {
    let flat: Vec<Vec<f64>> = pop.iter().map(CorrespondenceSet::flatten).collect();
    let (n, d) = (flat.len() as f64, flat[0].len());
    let mean: Vec<f64> = (0..d).map(|k| flat.iter().map(|f| f[k]).sum::<f64>() / n).collect();
    (0..d)
        .map(|i| (0..d).map(|j| flat.iter().map(|f| (f[i] - mean[i]) * (f[j] - mean[j])).sum::<f64>() / n).collect())
        .collect()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn gram_and_covariance_solvers_agree_with_jacobi_oracle() {
    for seed in 0..5 {
        let pop = random_population(10, 6, seed);
        let dual = ShapeModel::fit_with(&pop, 9, PcaSolver::Gram).unwrap();
        let direct = ShapeModel::fit_with(&pop, 9, PcaSolver::Covariance).unwrap();
        let (values, vectors) = jacobi_eigen(covariance(&pop));
        assert!(max_abs_diff(&dual.eigenvalues, &values[..9]) <= 1e-8);
        assert!(max_abs_diff(&direct.eigenvalues, &dual.eigenvalues) <= 1e-8);
        for k in 0..9 {
            let (a, b) = (dual.basis_column(k), direct.basis_column(k));
            assert!(max_abs_diff(a, b) <= 1e-8, "mode {k}");
            // the oracle's sign is arbitrary
            let o = &vectors[k];
            let dot: f64 = a.iter().zip(o).map(|(x, y)| x * y).sum();
            let signed: Vec<f64> = o.iter().map(|v| v * dot.signum()).collect();
            assert!(max_abs_diff(a, &signed) <= 1e-8, "mode {k} vs oracle");
        }
    }
}

#[test]
fn full_mode_roundtrip_and_orthonormality() {
    let pop = random_population(10, 8, 11);
    let model = ShapeModel::fit(&pop, 9).unwrap();
    let u = model.basis();
    let gram = u.transpose() * &u;
    let eye = nalgebra::DMatrix::<f64>::identity(9, 9);
    assert!((gram - eye).abs().max() <= 1e-10);
    for s in &pop {
        let back = model.reconstruct(&model.project(s).unwrap(), "r").unwrap();
        let rel = max_abs_diff(&back.flatten(), &s.flatten()) / s.flatten().iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(rel <= 1e-8);
    }
    assert!(model.eigenvalues.windows(2).all(|w| w[0] >= w[1]) && model.eigenvalues.iter().all(|&l| l >= 0.0));
    assert!((model.variance_explained(9).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn projection_of_mean_and_basis_offsets() {
    let pop = random_population(6, 5, 2);
    let model = ShapeModel::fit(&pop, 5).unwrap();
    let z = model.project(&model.mean_shape()).unwrap();
    assert!(z.iter().all(|v| v.abs() < 1e-12));
    let shifted: Vec<f64> = model.mean.iter().zip(model.basis_column(0)).map(|(m, u)| m + 2.0 * u).collect();
    let z = model.project_flat(&shifted).unwrap();
    assert!((z[0] - 2.0).abs() < 1e-12 && z[1..].iter().all(|v| v.abs() < 1e-12));
    assert!(model.project_flat(&shifted[3..]).is_err());
}

#[test]
fn reconstruct_matches_matrix_multiply_oracle() {
    let pop = random_population(7, 4, 5);
    let model = ShapeModel::fit(&pop, 4).unwrap();
    let z = [0.3, -1.2, 2.0, 0.7];
    let c = model.reconstruct_flat(&z).unwrap();
    for i in 0..model.dim() {
        let expected = model.mean[i] + (0..4).map(|k| model.basis_column(k)[i] * z[k]).sum::<f64>();
        assert!((c[i] - expected).abs() <= 1e-12);
    }
    assert!(model.reconstruct_flat(&z[..3]).is_err());
}

#[test]
fn constructed_spectrum_gives_known_variance_fraction() {
    // ±2 e1, ±sqrt(2) e2, ±1 e3 about a base shape: variances 4:2:1
    let base = [[1.0, 2.0, 3.0], [-1.0, 0.5, 2.0]];
    let mk = |axis: usize, a: f64| {
        let mut p = base;
        p[axis / 3][axis % 3] += a;
        CorrespondenceSet::new("c", p.to_vec()).unwrap()
    };
    let pop = vec![mk(0, 2.0), mk(0, -2.0), mk(1, 2f64.sqrt()), mk(1, -(2f64.sqrt())), mk(4, 1.0), mk(4, -1.0)];
    let model = ShapeModel::fit(&pop, 5).unwrap();
    assert!((model.variance_explained(2).unwrap() - 6.0 / 7.0).abs() < 1e-12);
    assert_eq!(model.modes_for_fraction(0.95).unwrap(), 3);
}

#[test]
fn mode_count_limits() {
    let pop = random_population(4, 3, 0);
    assert!(ShapeModel::fit(&pop, 4).is_err());
    assert!(ShapeModel::fit(&pop, 0).is_err());
    let mut bad = pop.clone();
    bad[1] = CorrespondenceSet::new("x", vec![[0.0; 3]; 2]).unwrap();
    assert!(ShapeModel::fit(&bad, 2).is_err());
    // more samples than coordinates: modes are capped by the dimension
    let wide = random_population(12, 2, 1);
    assert_eq!(ShapeModel::fit_full(&wide).unwrap().num_modes(), 6);
}

#[test]
fn linear_ellipsoid_family_has_six_nonzero_modes() {
    let fam = SyntheticFamily { kind: FamilyKind::EllipsoidLinear, num_particles: 64, ..Default::default() };
    let shapes: Vec<CorrespondenceSet> = (0..20).map(|i| fam.sample(i).unwrap().correspondences).collect();
    let model = ShapeModel::fit_full(&shapes).unwrap();
    let top = model.eigenvalues[0];
    assert!(model.eigenvalues[5] > 1e-6 * top);
    assert!(model.eigenvalues[6..].iter().all(|&l| l <= 1e-8 * top));
}

#[test]
fn particle_files_roundtrip_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("case_07.particles");
    let pts = vec![[0.1, -2.5e-10, 1.0 / 3.0], [f64::MAX, -0.0, 7.0]];
    write_particles(&path, &pts).unwrap();
    let back = read_correspondences(&path).unwrap();
    assert_eq!(back.sample_id, "case_07");
    for (a, b) in back.points.iter().zip(&pts) {
        assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    std::fs::write(&path, "1 2 3  \n4 5 6\n\n").unwrap();
    assert_eq!(read_correspondences(&path).unwrap().len(), 2);
    std::fs::write(&path, "1 2 3\n4 5\n").unwrap();
    let err = read_correspondences(&path).unwrap_err().to_string();
    assert!(err.contains('2'), "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn pca_is_invariant_to_sample_order(seed in 0u64..1000, rot in 1usize..7) {
        let pop = random_population(7, 3, seed);
        let mut shuffled = pop.clone();
        shuffled.rotate_left(rot);
        let a = ShapeModel::fit(&pop, 6).unwrap();
        let b = ShapeModel::fit(&shuffled, 6).unwrap();
        prop_assert!(max_abs_diff(&a.eigenvalues, &b.eigenvalues) < 1e-9);
        prop_assert!(max_abs_diff(&a.mean, &b.mean) < 1e-12);
        for k in 0..4 {
            prop_assert!(max_abs_diff(a.basis_column(k), b.basis_column(k)) < 1e-6);
        }
    }

    #[test]
    fn reconstruct_is_affine(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let model = ShapeModel::fit(&random_population(6, 4, seed), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 99);
        let z1: Vec<f64> = (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let z2: Vec<f64> = (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mix: Vec<f64> = z1.iter().zip(&z2).map(|(x, y)| a * x + b * y).collect();
        let lhs = model.reconstruct_flat(&mix).unwrap();
        let r1 = model.reconstruct_flat(&z1).unwrap();
        let r2 = model.reconstruct_flat(&z2).unwrap();
        for i in 0..lhs.len() {
            let rhs = a * r1[i] + b * r2[i] - (a + b - 1.0) * model.mean[i];
            prop_assert!((lhs[i] - rhs).abs() < 1e-9);
        }
        // project∘reconstruct is the identity on scores
        let back = model.project_flat(&r1).unwrap();
        prop_assert!(max_abs_diff(&back, &z1) < 1e-10);
    }
}
