use std::f64::consts::{PI, TAU};

use pnp_core::geometry::{angle_error, normalize_angle, CameraModel, PoseSE2, RotationSchedule, SymmetryOrder};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Mat = [[f64; 3]; 3];

fn matrix(p: &PoseSE2) -> Mat {
    let (s, c) = p.theta.sin_cos();
    [[c, -s, p.x], [s, c, p.y], [0.0, 0.0, 1.0]]
}

fn mul(a: &Mat, b: &Mat) -> Mat {
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    m
}

#[test]
fn pose_chain_matches_homogeneous_matrices() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        let poses: Vec<PoseSE2> = (0..5)
            .map(|_| {
                PoseSE2::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-PI..PI),
                )
            })
            .collect();
        let composed = poses.iter().skip(1).fold(poses[0], |acc, p| acc.compose(p));
        let m = poses
            .iter()
            .skip(1)
            .fold(matrix(&poses[0]), |acc, p| mul(&acc, &matrix(p)));
        assert!((composed.x - m[0][2]).abs() < 1e-9);
        assert!((composed.y - m[1][2]).abs() < 1e-9);
        assert!(normalize_angle(composed.theta - m[1][0].atan2(m[0][0])).abs() < 1e-9);
    }
}

#[test]
fn camera_round_trip_within_half_pixel() {
    let cam = CameraModel::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let half = 0.5 / cam.pixels_per_metre;
    for _ in 0..100 {
        let p = PoseSE2::new(
            rng.random_range(0.0..0.5),
            rng.random_range(0.0..0.5),
            rng.random_range(-PI..PI),
        );
        let px = cam.world_to_pixel(&p);
        assert!(px.in_frame);
        let back = cam.pixel_to_world(px.u, px.v, px.theta);
        assert!((back.x - p.x).abs() <= half + 1e-12 && (back.y - p.y).abs() <= half + 1e-12);
        assert_eq!(back.theta, p.theta);
    }
}

#[test]
fn schedule_steps_for_scaling_four() {
    let s = RotationSchedule::pick(3, 6, 4.0).unwrap();
    let steps: Vec<f64> = (0..3).map(|i| s.step(i).to_degrees()).collect();
    for (a, e) in steps.iter().zip([30.0, 7.5, 1.875]) {
        assert!((a - e).abs() < 1e-12);
    }
}

/// Brute force over the symmetry group (and the gripper flip).
fn angle_error_oracle(pred: f64, truth: f64, k: u32, gripper: bool) -> f64 {
    let mut best = f64::INFINITY;
    for j in 0..k {
        for flip in 0..if gripper { 2 } else { 1 } {
            let copy = truth + TAU * j as f64 / k as f64 + PI * flip as f64;
            best = best.min(normalize_angle(pred - copy).abs());
        }
    }
    best
}

fn any_k() -> impl Strategy<Value = u32> {
    prop_oneof![Just(1u32), Just(2u32), Just(4u32)]
}

proptest! {
    #[test]
    fn pose_group_axioms(x in -1.0..1.0f64, y in -1.0..1.0f64, t in -4.0..4.0f64,
                         x2 in -1.0..1.0f64, y2 in -1.0..1.0f64, t2 in -4.0..4.0f64) {
        let a = PoseSE2::new(x, y, t);
        let b = PoseSE2::new(x2, y2, t2);
        let e = a.compose(&a.inverse());
        prop_assert!(e.x.abs() < 1e-12 && e.y.abs() < 1e-12 && e.theta.abs() < 1e-12);
        let ab_inv = a.compose(&b).inverse();
        let expect = b.inverse().compose(&a.inverse());
        prop_assert!((ab_inv.x - expect.x).abs() < 1e-12 && (ab_inv.y - expect.y).abs() < 1e-12);
        prop_assert!(normalize_angle(ab_inv.theta - expect.theta).abs() < 1e-12);
        prop_assert!(a.theta > -PI && a.theta <= PI);
    }

    #[test]
    fn angle_error_matches_group_oracle(pred in -7.0..7.0f64, truth in -7.0..7.0f64, k in any_k(), gripper: bool) {
        let sym = SymmetryOrder::new(k).unwrap();
        let span = if gripper { PI } else { TAU };
        let e = angle_error(pred, truth, sym, span);
        prop_assert!((e - angle_error_oracle(pred, truth, k, gripper)).abs() < 1e-9);
        // Symmetric, bounded by half the effective period.
        prop_assert!((e - angle_error(truth, pred, sym, span)).abs() < 1e-9);
        let keff = if gripper { (k * 2) / if k % 2 == 0 { 2 } else { 1 } } else { k };
        prop_assert!(e <= PI / keff as f64 + 1e-12);
    }

    #[test]
    fn schedule_windows_cover_previous_step(iters in 2usize..5, count in 2usize..13, scale in 1.5..8.0f64, center in -3.0..3.0f64) {
        let s = RotationSchedule::pick(iters, count, scale).unwrap();
        for i in 1..iters {
            let angles = s.angles(i, center).unwrap();
            prop_assert_eq!(angles.len(), count);
            let step = s.step(i);
            for w in angles.windows(2) {
                prop_assert!((w[1] - w[0] - step).abs() < 1e-12);
            }
            let mean = angles.iter().sum::<f64>() / count as f64;
            prop_assert!((mean - center).abs() < 1e-9);
            if count % 2 == 1 {
                prop_assert!(angles.iter().any(|a| (a - center).abs() < 1e-12));
            }
        }
    }
}
