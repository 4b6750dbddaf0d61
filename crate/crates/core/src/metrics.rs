//! Pick, place and execution errors with symmetry and multi-slot handling.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{angle_error, PoseSE2, SymmetryOrder};
use crate::scene::{find_grasp, polygon, GraspTolerance, Scene};

/// Candidates farther than this are only used when nothing is closer.
pub const TRANSLATION_FILTER_M: f64 = 0.01;
/// Rotation bound of a successful execution, degrees.
pub const SUCCESS_ROTATION_DEG: f64 = 10.0;
/// Rotation error recorded for a missed grasp, degrees.
pub const SENTINEL_ROTATION_DEG: f64 = 90.0;
/// Translations closer than this count as equal when falling back.
const TIE_M: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorPair {
    /// Degrees.
    pub rotation: f64,
    /// Centimetres.
    pub translation: f64,
}

impl ErrorPair {
    pub const ZERO: Self = Self {
        rotation: 0.0,
        translation: 0.0,
    };

    fn from_si(rotation_rad: f64, translation_m: f64) -> Self {
        Self {
            rotation: rotation_rad.to_degrees(),
            translation: translation_m * 100.0,
        }
    }

    /// Error charged to a missed grasp: a right angle and the workspace
    /// diagonal.
    pub fn sentinel(workspace: [f64; 4]) -> Self {
        let diag = (workspace[2] - workspace[0]).hypot(workspace[3] - workspace[1]);
        Self::from_si(SENTINEL_ROTATION_DEG.to_radians(), diag)
    }
}

/// Among `(rotation, translation)` candidates within the translation
/// filter, the one with the least rotation error; with none inside the
/// filter, the one with the least translation error.
fn select(candidates: impl IntoIterator<Item = (f64, f64)>) -> Option<ErrorPair> {
    let mut best_in: Option<(f64, f64)> = None;
    let mut best_any: Option<(f64, f64)> = None;
    for (rot, tr) in candidates {
        if tr < TRANSLATION_FILTER_M && best_in.is_none_or(|b| rot < b.0 || (rot == b.0 && tr < b.1)) {
            best_in = Some((rot, tr));
        }
        if best_any.is_none_or(|b| tr < b.1 - TIE_M || (tr <= b.1 + TIE_M && rot < b.0)) {
            best_any = Some((rot, tr));
        }
    }
    best_in.or(best_any).map(|(r, t)| ErrorPair::from_si(r, t))
}

/// Error of a pick estimate against every grasp segment in the scene.
pub fn attention_error(pred: &PoseSE2, scene: &Scene) -> Result<ErrorPair> {
    let candidates = scene.objects.iter().flat_map(|obj| {
        obj.shape.grasp_segments.iter().map(move |seg| {
            let (a, b) = (obj.pose.apply(seg.start), obj.pose.apply(seg.end));
            let tr = polygon::point_segment_distance([pred.x, pred.y], a, b);
            let rot = angle_error(pred.theta, obj.pose.theta + seg.angle, obj.shape.symmetry, PI);
            (rot, tr)
        })
    });
    select(candidates).ok_or_else(|| Error::Scene("scene has no grasp segments".into()))
}

/// Gripper poses that would set the object held by `gt_pick` down on an
/// accepting target, over every target and symmetry copy.
pub fn admissible_places(gt_pick: &PoseSE2, scene: &Scene) -> Result<Vec<PoseSE2>> {
    let m = find_grasp(scene, gt_pick, &GraspTolerance::default())
        .ok_or_else(|| Error::Scene("ground-truth pick does not grasp any object".into()))?;
    let obj = &scene.objects[m.object];
    let offset = obj.pose.inverse().compose(gt_pick);
    let k = obj.shape.symmetry.k();
    let mut out = Vec::new();
    for t in scene.admissible_targets(m.object) {
        for j in 0..k {
            let turn = PoseSE2::rotation(TAU * j as f64 / k as f64);
            out.push(t.pose.compose(&turn).compose(&offset));
        }
    }
    Ok(out)
}

/// Error of a place estimate made with the ground-truth pick.
pub fn transport_error(pred_place: &PoseSE2, gt_pick: &PoseSE2, scene: &Scene) -> Result<ErrorPair> {
    let targets = admissible_places(gt_pick, scene)?;
    let candidates = targets.iter().map(|t| {
        (
            angle_error(pred_place.theta, t.theta, SymmetryOrder::NONE, TAU),
            pred_place.translation_to(t),
        )
    });
    select(candidates).ok_or_else(|| Error::Scene("no target accepts the grasped object".into()))
}

/// Pose error of object `object` at `pose` against its accepting targets.
pub fn object_pose_error(scene: &Scene, object: usize, pose: &PoseSE2) -> Result<ErrorPair> {
    let sym = scene.objects[object].shape.symmetry;
    let candidates = scene.admissible_targets(object).map(|t| {
        (
            angle_error(pose.theta, t.pose.theta, sym, TAU),
            pose.translation_to(&t.pose),
        )
    });
    select(candidates).ok_or_else(|| Error::Scene("no target accepts the object".into()))
}

/// Success rule for an executed action.
pub fn is_success(grasped: bool, err: &ErrorPair) -> bool {
    grasped && err.translation < TRANSLATION_FILTER_M * 100.0 && err.rotation < SUCCESS_ROTATION_DEG
}
