use nalgebra::{Matrix3, Rotation3, Vector3};
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::geometry::{Environment, EulerZyx};
use crate::synthgen::{build_scene, make_registration_pair, sample_frame, EnvironmentPreset, EulerRanges, SceneSpec};

fn random_matrix(rng: &mut ChaCha8Rng, n: usize, m: usize, lo: f64, hi: f64) -> Array2<f64> {
    Array2::from_shape_fn((n, m), |_| rng.random_range(lo..hi))
}

fn frame(seed: u64, n: usize) -> PointCloud {
    let scene = build_scene(&SceneSpec::with_route_length(seed, 300.0)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pose = scene.sensor_pose(100.0);
    sample_frame(&scene, &pose, &EnvironmentPreset::clean(Environment::Sunny), n, &mut rng)
        .unwrap()
        .normalized(40.0)
        .unwrap()
}

fn cloud_of(m: &Array2<f64>) -> PointCloud {
    PointCloud::new(m.rows().into_iter().map(|r| Vector3::new(r[0], r[1], r[2])).collect()).unwrap()
}

#[test]
fn match_matrix_arithmetic() {
    let a = Array2::from_elem((1, 1), 3.0);
    let b = Array2::from_elem((1, 1), 7.0);
    assert_eq!(match_matrix(&a, &b, 1.0).unwrap().w[[0, 0]], 4.0);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let z = random_matrix(&mut rng, 10, 5, -1.0, 1.0);
    let w = match_matrix(&z, &z, 1.0).unwrap();
    for i in 0..10 {
        assert_eq!(w.w[[i, i]], 0.0);
    }
}

#[test]
fn match_matrix_matches_naive_loop_and_is_symmetric() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let zp = random_matrix(&mut rng, 32, 6, -1.0, 1.0);
    let zq = random_matrix(&mut rng, 48, 6, -1.0, 1.0);
    let w = match_matrix(&zp, &zq, 0.5).unwrap();
    let wt = match_matrix(&zq, &zp, 0.5).unwrap();
    for i in 0..32 {
        for j in 0..48 {
            let mut s = 0.0;
            for c in 0..6 {
                s += (zp[[i, c]] - zq[[j, c]]).powi(2);
            }
            assert!((w.w[[i, j]] - s.sqrt()).abs() < 1e-14);
            assert_eq!(w.w[[i, j]], wt.w[[j, i]]);
        }
    }
    assert!(match_matrix(&zp, &random_matrix(&mut rng, 3, 5, 0.0, 1.0), 1.0).is_err());
}

#[test]
fn epcor_hand_executed_three_by_three() {
    // row 2 is far from every column; τ = 1 so scores are -W
    let a = 2f64.ln();
    let b = 8f64.ln();
    let w = Array2::from_shape_vec((3, 3), vec![0.0, a, a, a, 0.0, a, b, b, b]).unwrap();
    let res = epcor(&MatchMatrix::new(w, 1.0).unwrap(), 2).unwrap();
    // row softmax: [1/2,1/4,1/4], [1/4,1/2,1/4], [1/3,1/3,1/3]
    let r = [13.0 / 12.0, 13.0 / 12.0, 10.0 / 12.0];
    for (x, y) in res.r.iter().zip(r) {
        assert!((x - y).abs() < 1e-15);
    }
    assert_eq!(res.k_q, vec![0, 1]);
    // column softmax row sums: 160/117, 160/117, 31/117
    assert_eq!(res.k, vec![0, 1]);
    assert_eq!(res.c, vec![0.5, 0.5, 0.0]);
    let expected = [[2.0 / 3.0, 1.0 / 3.0, 0.0], [1.0 / 3.0, 2.0 / 3.0, 0.0], [0.0, 0.0, 0.0]];
    for i in 0..3 {
        for j in 0..3 {
            assert!((res.w_tilde[[i, j]] - expected[i][j]).abs() < 1e-15, "{i},{j}");
        }
    }
}

#[test]
fn epcor_constant_matrix_is_uniform() {
    let res = epcor(&MatchMatrix::new(Array2::from_elem((5, 5), 0.7), 0.03).unwrap(), 5).unwrap();
    for v in res.w_tilde.iter() {
        assert!((v - 0.2).abs() < 1e-15);
    }
    for v in &res.c {
        assert!((v - 0.2).abs() < 1e-15);
    }
}

#[test]
fn epcor_diagonal_dominance_picks_the_diagonal() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut w = random_matrix(&mut rng, 8, 8, 0.5, 1.0);
    for i in 0..8 {
        w[[i, i]] = 0.01;
    }
    let res = epcor(&MatchMatrix::new(w, 0.03).unwrap(), 8).unwrap();
    for i in 0..8 {
        let row = res.w_tilde.row(i);
        let arg = (0..8).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
        assert_eq!(arg, i);
    }
}

#[test]
fn epcor_rejects_bad_k() {
    let m = MatchMatrix::new(Array2::zeros((3, 4)), 1.0).unwrap();
    assert!(epcor(&m, 0).is_err());
    assert!(epcor(&m, 4).is_err());
    assert!(MatchMatrix::new(Array2::zeros((2, 2)), 0.0).is_err());
}

#[test]
fn epcor_is_invariant_to_a_constant_shift() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let w = random_matrix(&mut rng, 20, 25, 0.0, 1.0);
    let a = epcor(&MatchMatrix::new(w.clone(), 0.1).unwrap(), 9).unwrap();
    let b = epcor(&MatchMatrix::new(w + 0.37, 0.1).unwrap(), 9).unwrap();
    assert_eq!(a.k, b.k);
    for (x, y) in a.w_tilde.iter().zip(b.w_tilde.iter()) {
        assert!((x - y).abs() < 1e-12);
    }
    for (x, y) in a.c.iter().zip(&b.c) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn epcor_without_masking_keeps_everything() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let w = random_matrix(&mut rng, 6, 7, 0.0, 1.0);
    let res = epcor_with(&MatchMatrix::new(w, 0.2).unwrap(), 1, false).unwrap();
    assert_eq!(res.k.len(), 6);
    assert!(res.invariant_error() < 1e-12);
    assert!(res.c.iter().all(|&c| (c - 1.0 / 6.0).abs() < 1e-15));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn epcor_invariants_hold(seed in any::<u64>(), n in 1usize..20, m in 1usize..20, tau in 0.001f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = random_matrix(&mut rng, n, m, 0.0, 3.0);
        let k = rng.random_range(1..=n.min(m));
        let res = epcor(&MatchMatrix::new(w, tau).unwrap(), k).unwrap();
        prop_assert!(res.invariant_error() < 1e-9);
        prop_assert_eq!(res.c.iter().filter(|&&v| v != 0.0).count(), k);
    }

    #[test]
    fn procrustes_output_is_proper(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(3..30);
        let source: Vec<Vector3<f64>> = (0..n).map(|_| Vector3::new(rng.random(), rng.random(), rng.random())).collect();
        let matched: Vec<Vector3<f64>> = (0..n).map(|_| Vector3::new(rng.random(), rng.random(), rng.random())).collect();
        let weights = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
        let corr = CorrespondenceSet { indices: (0..n).collect(), source, matched, weights };
        if let Ok(t) = weighted_procrustes(&corr) {
            prop_assert!(t.orthonormality_error() < 1e-9);
            prop_assert!((t.rotation.determinant() - 1.0).abs() < 1e-9);
        }
    }
}

fn hand_epcor(k: Vec<usize>, k_q: Vec<usize>, w_tilde: Array2<f64>, c: Vec<f64>) -> EpcorResult {
    let n = w_tilde.nrows();
    let m = w_tilde.ncols();
    // start from a real result to fill private fields, then overwrite
    let mut res = epcor(&MatchMatrix::new(Array2::zeros((n, m)), 1.0).unwrap(), k.len()).unwrap();
    res.k = k;
    res.k_q = k_q;
    res.w_tilde = w_tilde;
    res.c = c;
    res
}

#[test]
fn soft_correspondences_one_hot_uniform_and_naive() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let q = cloud_of(&random_matrix(&mut rng, 4, 3, -1.0, 1.0));
    let p = cloud_of(&random_matrix(&mut rng, 3, 3, -1.0, 1.0));
    let mut wt = Array2::zeros((3, 4));
    wt[[0, 2]] = 1.0;
    wt[[1, 0]] = 1.0;
    let res = hand_epcor(vec![0, 1], vec![0, 2], wt, vec![0.5, 0.5, 0.0]);
    let corr = soft_correspondences(&res, &q, &p).unwrap();
    assert_eq!(corr.matched, vec![q.points[2], q.points[0]]);
    assert_eq!(corr.source, vec![p.points[0], p.points[1]]);

    let mut wt = Array2::zeros((3, 4));
    wt[[2, 1]] = 0.5;
    wt[[2, 3]] = 0.5;
    let res = hand_epcor(vec![2], vec![1, 3], wt, vec![0.0, 0.0, 1.0]);
    let corr = soft_correspondences(&res, &q, &p).unwrap();
    assert!((corr.matched[0] - (q.points[1] + q.points[3]) / 2.0).norm() < 1e-15);

    let w = random_matrix(&mut rng, 3, 4, 0.0, 1.0);
    let res = epcor(&MatchMatrix::new(w, 0.3).unwrap(), 2).unwrap();
    let corr = soft_correspondences(&res, &q, &p).unwrap();
    for (pair, &i) in res.k.iter().enumerate() {
        let mut acc = Vector3::zeros();
        for j in 0..4 {
            acc += res.w_tilde[[i, j]] * q.points[j];
        }
        assert!((acc - corr.matched[pair]).norm() < 1e-14);
        assert_eq!(corr.weights[pair], res.c[i]);
    }
}

fn pts(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vector3<f64>> {
    (0..n)
        .map(|_| Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
        .collect()
}

#[test]
fn procrustes_identity_and_translation() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let p = pts(&mut rng, 20);
    let t = weighted_procrustes(&CorrespondenceSet::uniform(p.clone(), p.clone()).unwrap()).unwrap();
    assert!((t.rotation - Matrix3::identity()).abs().max() < 1e-12);
    assert!(t.translation.norm() < 1e-12);
    let shift = Vector3::new(1.0, 2.0, 3.0);
    let moved = p.iter().map(|x| x + shift).collect();
    let t = weighted_procrustes(&CorrespondenceSet::uniform(p, moved).unwrap()).unwrap();
    assert!((t.rotation - Matrix3::identity()).abs().max() < 1e-12);
    assert!((t.translation - shift).norm() < 1e-12);
}

#[test]
fn procrustes_recovers_a_known_motion() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let p = pts(&mut rng, 50);
    let truth = RigidTransform::new(
        Rotation3::from_axis_angle(&Vector3::z_axis(), 10f64.to_radians()).into_inner(),
        Vector3::new(1.0, 2.0, 3.0),
    );
    let q = p.iter().map(|x| truth.apply(x)).collect();
    let t = weighted_procrustes(&CorrespondenceSet::uniform(p, q).unwrap()).unwrap();
    assert!((t.rotation - truth.rotation).abs().max() < 1e-9);
    assert!((t.translation - truth.translation).norm() < 1e-9);
}

#[test]
fn zero_weight_outlier_is_ignored() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let p = pts(&mut rng, 12);
    let truth = RigidTransform::from_euler(EulerZyx::new(20.0, 3.0, -2.0), Vector3::new(0.1, 0.2, -0.3));
    let mut q: Vec<Vector3<f64>> = p.iter().map(|x| truth.apply(x)).collect();
    let mut weights: Vec<f64> = (0..12).map(|_| rng.random_range(0.1..1.0)).collect();
    let inliers = CorrespondenceSet {
        indices: (0..12).collect(),
        source: p.clone(),
        matched: q.clone(),
        weights: weights.clone(),
    };
    let mut with_outlier = inliers.clone();
    with_outlier.indices.push(12);
    with_outlier.source.push(Vector3::new(5.0, 5.0, 5.0));
    q.push(Vector3::new(-50.0, 3.0, 9.0));
    with_outlier.matched = q;
    weights.push(0.0);
    with_outlier.weights = weights;
    let a = weighted_procrustes(&inliers).unwrap();
    let b = weighted_procrustes(&with_outlier).unwrap();
    assert!((a.rotation - b.rotation).abs().max() < 1e-12);
    assert!((a.translation - b.translation).norm() < 1e-12);
}

#[test]
fn procrustes_is_invariant_to_weight_scale() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let corr = CorrespondenceSet {
        indices: (0..15).collect(),
        source: pts(&mut rng, 15),
        matched: pts(&mut rng, 15),
        weights: (0..15).map(|_| rng.random_range(0.0..1.0)).collect(),
    };
    let mut scaled = corr.clone();
    scaled.weights.iter_mut().for_each(|w| *w *= 4.0);
    let a = weighted_procrustes(&corr).unwrap();
    let b = weighted_procrustes(&scaled).unwrap();
    assert_eq!(a, b);
}

#[test]
fn procrustes_rejects_degenerate_input() {
    let line: Vec<Vector3<f64>> = (0..10).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect();
    let r = weighted_procrustes(&CorrespondenceSet::uniform(line.clone(), line).unwrap());
    assert!(matches!(r, Err(crate::Error::DegenerateGeometry(_))));
    let two = vec![Vector3::zeros(), Vector3::x()];
    assert!(weighted_procrustes(&CorrespondenceSet::uniform(two.clone(), two).unwrap()).is_err());
}

#[test]
fn registration_loss_cases() {
    let single = CorrespondenceSet::uniform(vec![Vector3::zeros()], vec![Vector3::x()]).unwrap();
    assert_eq!(registration_loss(&single, &RigidTransform::identity()).unwrap(), 1.0);

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let p = pts(&mut rng, 10);
    let aligned = CorrespondenceSet::uniform(p.clone(), p.clone()).unwrap();
    assert_eq!(registration_loss(&aligned, &RigidTransform::identity()).unwrap(), 0.0);

    let corr = CorrespondenceSet {
        indices: (0..10).collect(),
        source: p,
        matched: pts(&mut rng, 10),
        weights: (0..10).map(|_| rng.random_range(0.0..2.0)).collect(),
    };
    let est = RigidTransform::from_euler(EulerZyx::new(5.0, 1.0, 2.0), Vector3::new(0.1, 0.0, 0.2));
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..10 {
        let r = est.rotation * corr.source[i] + est.translation;
        num += corr.weights[i] * (corr.matched[i] - r).norm();
        den += corr.weights[i];
    }
    assert!((registration_loss(&corr, &est).unwrap() - num / den).abs() < 1e-14);

    let mut zero = corr.clone();
    zero.weights.iter_mut().for_each(|w| *w = 0.0);
    assert!(matches!(registration_loss(&zero, &est), Err(crate::Error::InvalidInput(_))));
}

#[test]
fn lam_residual_path_and_permutation() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let psi_p = random_matrix(&mut rng, 30, 8, -1.0, 1.0);
    let psi_q = random_matrix(&mut rng, 40, 8, -1.0, 1.0);
    let (zp, zq) = lam(&psi_p, &psi_q, &LamParams::zeros(8)).unwrap();
    assert_eq!(zp, psi_p);
    assert_eq!(zq, psi_q);

    let params = LamParams::new(8, &mut rng);
    let (zp, _) = lam(&psi_p, &psi_q, &params).unwrap();
    let perm: Vec<usize> = (0..40).rev().collect();
    let (zp2, _) = lam(&psi_p, &psi_q.select(ndarray::Axis(0), &perm), &params).unwrap();
    for (a, b) in zp.iter().zip(zp2.iter()) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!(lam(&psi_p, &random_matrix(&mut rng, 4, 7, 0.0, 1.0), &params).is_err());
}

fn central_difference(f: &dyn Fn(f64) -> f64, h: f64) -> f64 {
    (f(h) - f(-h)) / (2.0 * h)
}

fn assert_close(analytic: f64, numeric: f64, what: &str) {
    let scale = analytic.abs().max(numeric.abs()).max(1e-4);
    assert!((analytic - numeric).abs() <= 1e-4 * scale, "{what}: analytic {analytic} numeric {numeric}");
}

#[test]
fn lam_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let d = 5;
    let psi_p = random_matrix(&mut rng, 7, d, -1.0, 1.0);
    let psi_q = random_matrix(&mut rng, 9, d, -1.0, 1.0);
    let mut params = LamParams::new(d, &mut rng);
    params.fuse2.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.2..0.2));
    let up = random_matrix(&mut rng, 7, d, -1.0, 1.0);
    let uq = random_matrix(&mut rng, 9, d, -1.0, 1.0);
    let obj = |pp: &Array2<f64>, pq: &Array2<f64>, lp: &LamParams| {
        let (a, b) = lam(pp, pq, lp).unwrap();
        (&a * &up).sum() + (&b * &uq).sum()
    };
    let (_, _, cache) = lam_forward(&psi_p, &psi_q, &params).unwrap();
    let mut grad = params.zeros_like();
    let (dp, dq) = lam_backward(&params, &cache, &up, &uq, &mut grad);

    let flat = grad.flatten();
    for idx in 0..params.num_params() {
        let f = |h: f64| {
            let mut lp = params.clone();
            let mut off = 0;
            lp.visit_mut(&mut |_, v| {
                for x in v.iter_mut() {
                    if off == idx {
                        *x += h;
                    }
                    off += 1;
                }
            });
            obj(&psi_p, &psi_q, &lp)
        };
        assert_close(flat[idx], central_difference(&f, 1e-6), &format!("param {idx}"));
    }
    for i in 0..7 {
        for c in 0..d {
            let f = |h: f64| {
                let mut pp = psi_p.clone();
                pp[[i, c]] += h;
                obj(&pp, &psi_q, &params)
            };
            assert_close(dp[[i, c]], central_difference(&f, 1e-6), "dpsi_p");
        }
    }
    for j in 0..9 {
        for c in 0..d {
            let f = |h: f64| {
                let mut pq = psi_q.clone();
                pq[[j, c]] += h;
                obj(&psi_p, &pq, &params)
            };
            assert_close(dq[[j, c]], central_difference(&f, 1e-6), "dpsi_q");
        }
    }
}

#[test]
fn registration_loss_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let d = 4;
    let (n, m) = (12, 14);
    let p = cloud_of(&random_matrix(&mut rng, n, 3, -1.0, 1.0));
    let q = cloud_of(&random_matrix(&mut rng, m, 3, -1.0, 1.0));
    let psi_p = random_matrix(&mut rng, n, d, -1.0, 1.0);
    let psi_q = random_matrix(&mut rng, m, d, -1.0, 1.0);
    let lp = LamParams::new(d, &mut rng);
    let cfg = RegNetConfig {
        tau: 0.5,
        ..RegNetConfig::default()
    };
    let fixed = RigidTransform::from_euler(EulerZyx::new(10.0, 0.0, 0.0), Vector3::new(0.1, 0.0, 0.0));
    let trace = register_trace(&p, &q, &psi_p, &psi_q, Some(&lp), &cfg, Some(&fixed)).unwrap();
    let mut glam = lp.zeros_like();
    let (dp, dq) = register_backward(&trace, &q, Some(&lp), Some(&mut glam));
    let loss = |pp: &Array2<f64>, pq: &Array2<f64>, l: &LamParams| {
        let t = register_trace(&p, &q, pp, pq, Some(l), &cfg, Some(&fixed)).unwrap();
        assert_eq!(t.output.epcor.k, trace.output.epcor.k, "selection changed under perturbation");
        t.output.loss
    };
    for i in 0..n {
        for c in 0..d {
            let f = |h: f64| {
                let mut pp = psi_p.clone();
                pp[[i, c]] += h;
                loss(&pp, &psi_q, &lp)
            };
            assert_close(dp[[i, c]], central_difference(&f, 1e-6), "dpsi_p");
        }
    }
    for j in 0..m {
        for c in 0..d {
            let f = |h: f64| {
                let mut pq = psi_q.clone();
                pq[[j, c]] += h;
                loss(&psi_p, &pq, &lp)
            };
            assert_close(dq[[j, c]], central_difference(&f, 1e-6), "dpsi_q");
        }
    }
    let flat = glam.flatten();
    for idx in 0..lp.num_params() {
        let f = |h: f64| {
            let mut l = lp.clone();
            let mut off = 0;
            l.visit_mut(&mut |_, v| {
                for x in v.iter_mut() {
                    if off == idx {
                        *x += h;
                    }
                    off += 1;
                }
            });
            loss(&psi_p, &psi_q, &l)
        };
        assert_close(flat[idx], central_difference(&f, 1e-6), &format!("lam {idx}"));
    }
}

#[test]
fn self_registration_is_identity() {
    let p = frame(21, 256);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let fp = crate::features::FeatureParams::default_init(&mut rng);
    let lp = LamParams::new(64, &mut rng);
    let out = register(&p, &p, &fp, &lp, &RegNetConfig::default()).unwrap();
    assert!((out.transform.rotation - Matrix3::identity()).abs().max() < 1e-6);
    assert!(out.transform.translation.norm() < 1e-6);
}

#[test]
fn coordinate_mode_recovers_a_pair_exactly() {
    let f = frame(22, 512);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pair = make_registration_pair(&f, &EulerRanges::evaluation(), (-0.5, 0.5), &mut rng).unwrap();
    let cfg = RegNetConfig {
        tau: 1e-4,
        ..RegNetConfig::default()
    };
    let out = register_coordinates(&pair.source, &pair.target, &pair.target_in_source, &cfg).unwrap();
    let (rot_err, trans_err) = out.transform.difference(&pair.truth);
    assert!(rot_err.to_degrees() < 1e-3, "rotation error {rot_err}");
    assert!(trans_err < 1e-5, "translation error {trans_err}");
}

#[test]
fn epcor_rejects_outlier_columns() {
    let f = frame(23, 512);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let pair = make_registration_pair(&f, &EulerRanges::evaluation(), (-0.5, 0.5), &mut rng)
        .unwrap()
        .with_target_outliers(0.3, &mut rng)
        .unwrap();
    let outlier: Vec<bool> = (0..pair.target.len())
        .map(|j| pair.target_in_source[j] != pair.source.points[j])
        .collect();
    let cfg = RegNetConfig {
        tau: 1e-3,
        k_frac: 0.6,
        ..RegNetConfig::default()
    };
    let full = register_coordinates(&pair.source, &pair.target, &pair.target_in_source, &cfg).unwrap();
    let kept = full.epcor.k_q.iter().filter(|&&j| outlier[j]).count() as f64 / full.epcor.k_q.len() as f64;
    assert!(kept < 0.1, "outlier share among kept columns {kept}");
    let (angle, _) = full.transform.difference(&pair.truth);
    assert!(angle.to_degrees() < 2.0, "{angle}");
}

#[test]
fn quadratic_reference_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let a = random_matrix(&mut rng, 5, 3, -1.0, 1.0);
    let b = random_matrix(&mut rng, 6, 3, -1.0, 1.0);
    assert_eq!(quadratic_attention_reference(&a, &b).unwrap().dim(), (5, 3));
}

#[test]
fn tiled_lam_matches_cached_forward() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let params = LamParams::new(16, &mut rng);
    // 600 rows: two full tiles and a ragged one
    let psi_p = random_matrix(&mut rng, 600, 16, -1.0, 1.0);
    let psi_q = random_matrix(&mut rng, 37, 16, -1.0, 1.0);
    let (zp, zq) = lam(&psi_p, &psi_q, &params).unwrap();
    let (fp, fq, _) = lam_forward(&psi_p, &psi_q, &params).unwrap();
    assert!((&zp - &fp).iter().all(|v| v.abs() < 1e-12));
    assert!((&zq - &fq).iter().all(|v| v.abs() < 1e-12));
}
