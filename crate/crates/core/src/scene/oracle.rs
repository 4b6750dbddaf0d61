use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{render, sample_scene_in, Demonstration, Scene, Task};
use crate::error::{Error, Result};
use crate::geometry::{angle_error, gripper_angle, CameraModel, PoseSE2, SymmetryOrder};

/// How far a pick may stray from a grasp segment and still hold the object.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraspTolerance {
    /// Metres.
    pub translation: f64,
    /// Radians, modulo the gripper's half turn.
    pub rotation: f64,
}

impl Default for GraspTolerance {
    fn default() -> Self {
        Self {
            translation: 0.005,
            rotation: 10f64.to_radians(),
        }
    }
}

/// The closest grasp segment, over all objects, to a pick pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraspMatch {
    pub object: usize,
    pub segment: usize,
    pub distance: f64,
    pub angle_error: f64,
}

/// Best admissible grasp for `pick` under `tol`, preferring the nearest
/// segment.
pub fn find_grasp(scene: &Scene, pick: &PoseSE2, tol: &GraspTolerance) -> Option<GraspMatch> {
    let mut best: Option<GraspMatch> = None;
    for (i, obj) in scene.objects.iter().enumerate() {
        for (j, seg) in obj.shape.grasp_segments.iter().enumerate() {
            let (a, b) = (obj.pose.apply(seg.start), obj.pose.apply(seg.end));
            let distance = super::polygon::point_segment_distance([pick.x, pick.y], a, b);
            let err = angle_error(pick.theta, obj.pose.theta + seg.angle, SymmetryOrder::NONE, PI);
            if distance <= tol.translation && err <= tol.rotation && best.is_none_or(|m| distance < m.distance) {
                best = Some(GraspMatch {
                    object: i,
                    segment: j,
                    distance,
                    angle_error: err,
                });
            }
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExecOutcome {
    pub grasped: bool,
    pub object: Option<usize>,
    pub initial_pose: Option<PoseSE2>,
    pub final_pose: Option<PoseSE2>,
}

/// Carries the grasped object rigidly from `pick` to `place`:
/// `final = place ∘ pick⁻¹ ∘ initial`. A missed grasp leaves the scene as is.
pub fn kinematic_execute(scene: &mut Scene, pick: &PoseSE2, place: &PoseSE2) -> ExecOutcome {
    kinematic_execute_with(scene, pick, place, &GraspTolerance::default())
}

pub fn kinematic_execute_with(scene: &mut Scene, pick: &PoseSE2, place: &PoseSE2, tol: &GraspTolerance) -> ExecOutcome {
    let Some(m) = find_grasp(scene, pick, tol) else {
        return ExecOutcome {
            grasped: false,
            object: None,
            initial_pose: None,
            final_pose: None,
        };
    };
    let initial = scene.objects[m.object].pose;
    let final_pose = place.compose(&pick.inverse()).compose(&initial);
    scene.objects[m.object].pose = final_pose;
    ExecOutcome {
        grasped: true,
        object: Some(m.object),
        initial_pose: Some(initial),
        final_pose: Some(final_pose),
    }
}

/// Scripted expert: one `(pick, place)` pair per object, in object order.
///
/// The pick is uniform along a uniformly chosen grasp segment, heading in
/// `[0, π)`. The place puts the object on its slot, rotated by a uniformly
/// chosen symmetry copy, keeping the pick's offset in the object frame.
pub fn oracle(scene: &Scene, rng_seed: u64) -> Result<Vec<(PoseSE2, PoseSE2)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut used = vec![false; scene.targets.len()];
    let mut actions = Vec::with_capacity(scene.objects.len());
    for obj in &scene.objects {
        let slot = scene
            .targets
            .iter()
            .enumerate()
            .position(|(j, t)| !used[j] && t.accepts(&obj.shape.name))
            .ok_or_else(|| Error::Scene(format!("no free target accepts '{}'", obj.shape.name)))?;
        used[slot] = true;
        let segs = &obj.shape.grasp_segments;
        if segs.is_empty() {
            return Err(Error::Scene(format!("'{}' has no grasp segments", obj.shape.name)));
        }
        let seg = &segs[rng.random_range(0..segs.len())];
        let t: f64 = rng.random_range(0.0..=1.0);
        let local = seg.point_at(t);
        let world = obj.pose.apply(local);
        let pick = PoseSE2::new(world[0], world[1], gripper_angle(obj.pose.theta + seg.angle));
        let offset = obj.pose.inverse().compose(&pick);
        let k = obj.shape.symmetry.k();
        let j = rng.random_range(0..k);
        let turn = PoseSE2::rotation(TAU * j as f64 / k as f64);
        let place = scene.targets[slot].pose.compose(&turn).compose(&offset);
        actions.push((pick, place));
    }
    Ok(actions)
}

/// Samples a scene for `seed`, runs the oracle and records the observation
/// before each action. Kits yield five samples, insertion one.
pub fn demonstrations(task: &Task, seed: u64, cam: &CameraModel) -> Result<Vec<Demonstration>> {
    let mut scene = sample_scene_in(task, seed, cam.bounds())?;
    let actions = oracle(&scene, seed ^ 0x9e37_79b9_7f4a_7c15)?;
    let mut out = Vec::with_capacity(actions.len());
    for (pick, place) in actions {
        out.push(Demonstration {
            observation: render(&scene, cam),
            pick,
            place,
        });
        let outcome = kinematic_execute(&mut scene, &pick, &place);
        if !outcome.grasped {
            return Err(Error::Scene("oracle pick missed its object".into()));
        }
    }
    Ok(out)
}
