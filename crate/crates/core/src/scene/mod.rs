//! Synthetic planar task world: shape library, scene sampling, rendering,
//! scripted oracle, kinematic execution, augmentation and datasets.

mod augment;
mod dataset;
mod oracle;
pub mod polygon;
mod render;
mod shapes;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use augment::{augment, augment_with, warp_observation, Augmentation, MAX_SHIFT};
pub use dataset::{
    append_to_dataset, decode_observation, encode_observation, load_dataset, read_manifest, save_dataset,
    DatasetManifest, Demonstration, SampleEntry,
};
pub use oracle::{
    demonstrations, find_grasp, kinematic_execute, kinematic_execute_with, oracle, ExecOutcome, GraspMatch,
    GraspTolerance,
};
pub use render::{render, DEPTH_CHANNEL, FIXTURE_COLOR, OBS_CHANNELS};
pub use shapes::{
    shape, shape_library, GraspSegment, ShapeSpec, INSERTION_SHAPES, KITS_TEST_SHAPES, KITS_TRAIN_SHAPES,
};

use crate::error::{invalid, Error, Result};
use crate::geometry::{CameraModel, PoseSE2};
use polygon::Point;

/// Objects per kit.
pub const KIT_SIZE: usize = 5;
/// Clearance kept between sampled footprints, metres.
pub const SPAWN_GAP: f64 = 0.01;
const MAX_TRIES: usize = 2000;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Task {
    /// One object and its matching fixture.
    Insertion(String),
    /// Five objects drawn from the training shapes, one slot each.
    Kits,
    /// Five objects drawn from the held-out shapes.
    KitsTest,
}

impl Task {
    pub fn object_count(&self) -> usize {
        match self {
            Task::Insertion(_) => 1,
            Task::Kits | Task::KitsTest => KIT_SIZE,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Task::Insertion(s) => write!(f, "insertion:{s}"),
            Task::Kits => write!(f, "kits"),
            Task::KitsTest => write!(f, "kits:test"),
        }
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kits" | "kits:train" => Ok(Task::Kits),
            "kits:test" => Ok(Task::KitsTest),
            _ => match s.strip_prefix("insertion:") {
                Some(name) => {
                    shape(name)?;
                    Ok(Task::Insertion(name.to_string()))
                }
                None => Err(invalid!(
                    "unknown task '{s}' (expected insertion:<shape>, kits or kits:test)"
                )),
            },
        }
    }
}

impl TryFrom<String> for Task {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Task> for String {
    fn from(t: Task) -> String {
        t.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacedObject {
    pub shape: ShapeSpec,
    pub pose: PoseSE2,
}

impl PlacedObject {
    pub fn world_footprint(&self) -> Vec<Point> {
        polygon::transform(&self.shape.footprint, &self.pose)
    }
}

/// A fixture or kit slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub shape: ShapeSpec,
    pub pose: PoseSE2,
    /// Shape names this target accepts.
    pub accepts: Vec<String>,
}

impl Target {
    pub fn accepts(&self, name: &str) -> bool {
        self.accepts.iter().any(|a| a == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub task: Task,
    pub objects: Vec<PlacedObject>,
    pub targets: Vec<Target>,
    /// `[x_min, y_min, x_max, y_max]` in metres.
    pub workspace: [f64; 4],
}

impl Scene {
    pub fn empty(task: Task, workspace: [f64; 4]) -> Self {
        Self {
            task,
            objects: Vec::new(),
            targets: Vec::new(),
            workspace,
        }
    }

    /// Targets that accept object `i`.
    pub fn admissible_targets(&self, i: usize) -> impl Iterator<Item = &Target> {
        let name = self.objects[i].shape.name.clone();
        self.targets.iter().filter(move |t| t.accepts(&name))
    }

    pub fn contains_point(&self, p: [f64; 2]) -> bool {
        let w = self.workspace;
        p[0] >= w[0] && p[0] <= w[2] && p[1] >= w[1] && p[1] <= w[3]
    }
}

/// Samples a scene inside the default camera's workspace.
pub fn sample_scene(task: &Task, seed: u64) -> Result<Scene> {
    sample_scene_in(task, seed, CameraModel::default().bounds())
}

/// Rejection-samples non-overlapping objects and targets in `workspace`.
pub fn sample_scene_in(task: &Task, seed: u64, workspace: [f64; 4]) -> Result<Scene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = match task {
        Task::Insertion(name) => vec![name.clone()],
        Task::Kits => (0..KIT_SIZE)
            .map(|_| KITS_TRAIN_SHAPES[rng.random_range(0..KITS_TRAIN_SHAPES.len())].to_string())
            .collect(),
        Task::KitsTest => (0..KIT_SIZE)
            .map(|_| KITS_TEST_SHAPES[rng.random_range(0..KITS_TEST_SHAPES.len())].to_string())
            .collect(),
    };
    let mut scene = Scene::empty(task.clone(), workspace);
    let mut placed: Vec<Vec<Point>> = Vec::new();
    let mut spawn = |rng: &mut ChaCha8Rng, spec: &ShapeSpec| -> Result<PoseSE2> {
        let r = polygon::radius(&spec.footprint);
        let (x0, y0, x1, y1) = (
            workspace[0] + r + SPAWN_GAP,
            workspace[1] + r + SPAWN_GAP,
            workspace[2] - r - SPAWN_GAP,
            workspace[3] - r - SPAWN_GAP,
        );
        if x0 >= x1 || y0 >= y1 {
            return Err(Error::Scene(format!(
                "workspace {workspace:?} too small for '{}'",
                spec.name
            )));
        }
        for _ in 0..MAX_TRIES {
            let pose = PoseSE2::new(
                rng.random_range(x0..x1),
                rng.random_range(y0..y1),
                rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
            );
            let poly = polygon::transform(&spec.footprint, &pose);
            if placed
                .iter()
                .all(|other| polygon::polygon_distance(&poly, other) >= SPAWN_GAP)
            {
                placed.push(poly);
                return Ok(pose);
            }
        }
        Err(Error::Scene(format!(
            "could not place '{}' without overlap after {MAX_TRIES} tries; workspace too small",
            spec.name
        )))
    };
    for name in &names {
        let spec = shape(name)?;
        let pose = spawn(&mut rng, &spec)?;
        scene.objects.push(PlacedObject { shape: spec, pose });
    }
    for name in &names {
        let spec = shape(name)?;
        let pose = spawn(&mut rng, &spec)?;
        scene.targets.push(Target {
            shape: spec,
            pose,
            accepts: vec![name.clone()],
        });
    }
    Ok(scene)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn task_names_round_trip() {
        for s in ["insertion:cuboid", "kits", "kits:test"] {
            assert_eq!(s.parse::<Task>().unwrap().to_string(), s);
        }
        assert!("insertion:blob".parse::<Task>().is_err());
        assert!("stacking".parse::<Task>().is_err());
    }

    #[test]
    fn scene_counts() {
        let s = sample_scene(&"insertion:cuboid".parse().unwrap(), 3).unwrap();
        assert_eq!((s.objects.len(), s.targets.len()), (1, 1));
        let k = sample_scene(&Task::Kits, 3).unwrap();
        assert_eq!((k.objects.len(), k.targets.len()), (5, 5));
        assert!(sample_scene_in(&Task::Kits, 1, [0.0, 0.0, 0.1, 0.1]).is_err());
    }
}
