use std::f64::consts::{PI, TAU};

use pnp_core::geometry::{normalize_angle, PoseSE2};
use pnp_core::metrics::*;
use pnp_core::scene::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn scene_with(objects: &[(&str, PoseSE2)], targets: &[(&str, PoseSE2)]) -> Scene {
    let mut s = Scene::empty(Task::Kits, [0.0, 0.0, 0.5, 0.5]);
    for (n, p) in objects {
        s.objects.push(PlacedObject {
            shape: shape(n).unwrap(),
            pose: *p,
        });
    }
    for (n, p) in targets {
        s.targets.push(Target {
            shape: shape(n).unwrap(),
            pose: *p,
            accepts: vec![n.to_string()],
        });
    }
    s
}

#[test]
fn cube_rotation_error_folds_by_quarter_turn() {
    let s = scene_with(
        &[("cube", PoseSE2::new(0.2, 0.2, 0.0))],
        &[("cube", PoseSE2::new(0.3, 0.3, 0.0))],
    );
    let e = object_pose_error(&s, 0, &PoseSE2::new(0.3, 0.3, 95f64.to_radians())).unwrap();
    assert!((e.rotation - 5.0).abs() < 1e-9, "{e:?}");
    assert!(e.translation.abs() < 1e-12);
    assert!(is_success(true, &e));
    assert!(!is_success(false, &e));
}

#[test]
fn identical_objects_may_swap_slots() {
    let a = PoseSE2::new(0.1, 0.1, 0.3);
    let b = PoseSE2::new(0.4, 0.35, -1.2);
    let s = scene_with(
        &[
            ("cuboid", PoseSE2::new(0.25, 0.1, 0.0)),
            ("cuboid", PoseSE2::new(0.25, 0.4, 0.0)),
        ],
        &[("cuboid", a), ("cuboid", b)],
    );
    for object in 0..2 {
        for slot in [a, b] {
            let flipped = PoseSE2::new(slot.x, slot.y, slot.theta + PI);
            assert_eq!(object_pose_error(&s, object, &slot).unwrap(), ErrorPair::ZERO);
            let e = object_pose_error(&s, object, &flipped).unwrap();
            assert!(e.rotation < 1e-9 && e.translation < 1e-12);
        }
    }
}

#[test]
fn pick_on_any_segment_has_zero_attention_error() {
    for seed in 0..20 {
        let scene = sample_scene(&Task::Kits, seed).unwrap();
        for (pick, _) in oracle(&scene, seed).unwrap().into_iter().take(1) {
            let e = attention_error(&pick, &scene).unwrap();
            assert!(e.rotation < 1e-9 && e.translation < 1e-9, "{e:?}");
            let turned = PoseSE2::new(pick.x, pick.y, pick.theta + PI);
            assert!(attention_error(&turned, &scene).unwrap().rotation < 1e-9);
        }
    }
}

/// Enumerates every admissible place without reusing the metric's helpers.
fn place_oracle(pred: &PoseSE2, gt_pick: &PoseSE2, scene: &Scene, object: usize) -> (f64, f64) {
    let obj = &scene.objects[object];
    let k = obj.shape.symmetry.k();
    let mut cands = Vec::new();
    for t in scene.targets.iter().filter(|t| t.accepts(&obj.shape.name)) {
        for j in 0..k {
            // Object lands on t rotated by j/k of a turn; carry the grasp with it.
            let phi = t.pose.theta + TAU * j as f64 / k as f64;
            let rel = gt_pick.theta - obj.pose.theta;
            let (dx, dy) = (gt_pick.x - obj.pose.x, gt_pick.y - obj.pose.y);
            let (s, c) = (phi - obj.pose.theta).sin_cos();
            let gx = t.pose.x + c * dx - s * dy;
            let gy = t.pose.y + s * dx + c * dy;
            let rot = normalize_angle(pred.theta - (phi + rel)).abs();
            cands.push((rot.to_degrees(), (pred.x - gx).hypot(pred.y - gy) * 100.0));
        }
    }
    let inside: Vec<_> = cands.iter().filter(|c| c.1 < 1.0).collect();
    if let Some(best) = inside.iter().min_by(|a, b| a.0.total_cmp(&b.0)) {
        **best
    } else {
        let closest = cands.iter().map(|c| c.1).fold(f64::INFINITY, f64::min);
        *cands
            .iter()
            .filter(|c| c.1 <= closest + 1e-7)
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .unwrap()
    }
}

#[test]
fn transport_error_matches_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut inside = 0;
    for seed in 0..60 {
        let task = if seed % 2 == 0 {
            Task::Kits
        } else {
            "insertion:cross".parse().unwrap()
        };
        let scene = sample_scene(&task, seed).unwrap();
        let (pick, place) = oracle(&scene, seed).unwrap()[0];
        for _ in 0..10 {
            let near = rng.random_bool(0.5);
            let pred = if near {
                PoseSE2::new(
                    place.x + rng.random_range(-0.006..0.006),
                    place.y + rng.random_range(-0.006..0.006),
                    place.theta + rng.random_range(-0.5..0.5),
                )
            } else {
                PoseSE2::new(
                    rng.random_range(0.0..0.5),
                    rng.random_range(0.0..0.5),
                    rng.random_range(-PI..PI),
                )
            };
            let e = transport_error(&pred, &pick, &scene).unwrap();
            let (rot, tr) = place_oracle(&pred, &pick, &scene, 0);
            assert!(
                (e.rotation - rot).abs() < 1e-6 && (e.translation - tr).abs() < 1e-6,
                "{e:?} vs {rot} {tr}"
            );
            inside += (tr < 1.0) as usize;
        }
        assert!(transport_error(&place, &pick, &scene).unwrap().translation < 1e-9);
    }
    assert!(inside > 50);
}

#[test]
fn missed_grasp_uses_sentinel() {
    let s = ErrorPair::sentinel([0.0, 0.0, 0.5, 0.5]);
    assert_eq!(s.rotation, 90.0);
    assert!((s.translation - 50.0 * 2f64.sqrt()).abs() < 1e-9);
    assert!(!is_success(false, &s));
}
