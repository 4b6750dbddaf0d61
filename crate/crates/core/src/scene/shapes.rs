//! The block library. Coordinates are metres in each shape's own frame,
//! whose origin is the centre of rotational symmetry.
//!
//! | shape          | footprint                         | k | grasp segments                         |
//! |----------------|-----------------------------------|---|----------------------------------------|
//! | cube           | 3 × 3 cm square                   | 4 | centre point at 0 and at 90°           |
//! | cuboid         | 6 × 3 cm                          | 2 | long midline, x ∈ [−1.5, 1.5] cm       |
//! | long-cuboid    | 9 × 3 cm                          | 2 | long midline, x ∈ [−3, 3] cm           |
//! | l-shape        | 6 × 6 cm, arms 2 cm wide          | 1 | one midline per arm                    |
//! | t-shape        | 6 × 6 cm, bar and stem 2 cm wide  | 1 | stem midline and bar midline           |
//! | double-l       | 2 cm stem with two opposite feet  | 2 | stem midline, y ∈ [−1, 1] cm           |
//! | cross          | 6 × 6 cm, arms 2 cm wide          | 4 | both arm midlines, ±2 cm               |
//! | u-shape        | 6 × 6 cm, walls 2 cm wide         | 1 | base midline                           |
//! | parallelogram  | 5 cm sides, 3 cm tall, 2 cm shear | 2 | horizontal midline, x ∈ [−1, 1] cm     |
//! | block-ring     | 6 cm square with 3 cm hole        | 4 | the four wall midlines                 |
//! | hexagon        | 7 × 4 cm elongated hexagon        | 2 | long midline, x ∈ [−1.5, 1.5] cm       |
//!
//! A grasp segment's angle is the gripper heading: the segment runs along
//! it and the jaws close across it. Every segment set is closed under the
//! shape's symmetry rotations.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use super::polygon::Point;
use crate::error::{invalid, Result};
use crate::geometry::SymmetryOrder;

/// Segment of valid grasp centres with the gripper heading used along it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraspSegment {
    pub start: Point,
    pub end: Point,
    pub angle: f64,
}

impl GraspSegment {
    pub fn point_at(&self, t: f64) -> Point {
        [
            self.start[0] + t * (self.end[0] - self.start[0]),
            self.start[1] + t * (self.end[1] - self.start[1]),
        ]
    }

    pub fn length(&self) -> f64 {
        (self.end[0] - self.start[0]).hypot(self.end[1] - self.start[1])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub name: String,
    /// Outer boundary, counter-clockwise.
    pub footprint: Vec<Point>,
    /// Holes cut from the footprint, each counter-clockwise.
    #[serde(default)]
    pub holes: Vec<Vec<Point>>,
    pub height: f64,
    pub symmetry: SymmetryOrder,
    pub grasp_segments: Vec<GraspSegment>,
    pub color: [f64; 3],
}

impl ShapeSpec {
    /// Inside the outer boundary and outside every hole.
    pub fn covers(&self, p: Point) -> bool {
        super::polygon::contains(&self.footprint, p) && !self.holes.iter().any(|h| super::polygon::contains(h, p))
    }
}

pub const INSERTION_SHAPES: [&str; 7] = [
    "l-shape",
    "t-shape",
    "cuboid",
    "long-cuboid",
    "double-l",
    "cube",
    "cross",
];
pub const KITS_TRAIN_SHAPES: [&str; 7] = [
    "cube",
    "long-cuboid",
    "t-shape",
    "cross",
    "u-shape",
    "double-l",
    "parallelogram",
];
pub const KITS_TEST_SHAPES: [&str; 4] = ["cuboid", "l-shape", "block-ring", "hexagon"];

fn seg(start: Point, end: Point, angle: f64) -> GraspSegment {
    GraspSegment { start, end, angle }
}

fn rect(hx: f64, hy: f64) -> Vec<Point> {
    vec![[-hx, -hy], [hx, -hy], [hx, hy], [-hx, hy]]
}

fn spec(
    name: &str,
    footprint: Vec<Point>,
    height: f64,
    k: u32,
    grasps: Vec<GraspSegment>,
    color: [f64; 3],
) -> ShapeSpec {
    ShapeSpec {
        name: name.to_string(),
        footprint,
        holes: Vec::new(),
        height,
        symmetry: SymmetryOrder::new(k).expect("positive order"),
        grasp_segments: grasps,
        color,
    }
}

/// Every shape, in a fixed order.
pub fn shape_library() -> Vec<ShapeSpec> {
    let q = FRAC_PI_2;
    let mut ring = spec(
        "block-ring",
        rect(0.03, 0.03),
        0.02,
        4,
        vec![
            seg([-0.015, -0.0225], [0.015, -0.0225], 0.0),
            seg([0.0225, -0.015], [0.0225, 0.015], q),
            seg([-0.015, 0.0225], [0.015, 0.0225], 0.0),
            seg([-0.0225, -0.015], [-0.0225, 0.015], q),
        ],
        [0.9, 0.6, 0.1],
    );
    ring.holes.push(rect(0.015, 0.015));
    vec![
        spec(
            "cube",
            rect(0.015, 0.015),
            0.03,
            4,
            vec![seg([0.0, 0.0], [0.0, 0.0], 0.0), seg([0.0, 0.0], [0.0, 0.0], q)],
            [0.9, 0.2, 0.2],
        ),
        spec(
            "cuboid",
            rect(0.03, 0.015),
            0.025,
            2,
            vec![seg([-0.015, 0.0], [0.015, 0.0], 0.0)],
            [0.2, 0.8, 0.3],
        ),
        spec(
            "long-cuboid",
            rect(0.045, 0.015),
            0.025,
            2,
            vec![seg([-0.03, 0.0], [0.03, 0.0], 0.0)],
            [0.2, 0.4, 0.9],
        ),
        spec(
            "l-shape",
            vec![
                [-0.03, -0.03],
                [0.03, -0.03],
                [0.03, -0.01],
                [-0.01, -0.01],
                [-0.01, 0.03],
                [-0.03, 0.03],
            ],
            0.02,
            1,
            vec![
                seg([0.0, -0.02], [0.02, -0.02], 0.0),
                seg([-0.02, 0.0], [-0.02, 0.02], q),
            ],
            [0.9, 0.9, 0.2],
        ),
        spec(
            "t-shape",
            vec![
                [-0.01, -0.03],
                [0.01, -0.03],
                [0.01, 0.01],
                [0.03, 0.01],
                [0.03, 0.03],
                [-0.03, 0.03],
                [-0.03, 0.01],
                [-0.01, 0.01],
            ],
            0.02,
            1,
            vec![
                seg([0.0, -0.025], [0.0, -0.005], q),
                seg([-0.02, 0.02], [0.02, 0.02], 0.0),
            ],
            [0.8, 0.3, 0.8],
        ),
        spec(
            "double-l",
            vec![
                [-0.01, -0.03],
                [0.03, -0.03],
                [0.03, -0.01],
                [0.01, -0.01],
                [0.01, 0.03],
                [-0.03, 0.03],
                [-0.03, 0.01],
                [-0.01, 0.01],
            ],
            0.02,
            2,
            vec![seg([0.0, -0.01], [0.0, 0.01], q)],
            [0.3, 0.9, 0.9],
        ),
        spec(
            "cross",
            vec![
                [-0.01, -0.03],
                [0.01, -0.03],
                [0.01, -0.01],
                [0.03, -0.01],
                [0.03, 0.01],
                [0.01, 0.01],
                [0.01, 0.03],
                [-0.01, 0.03],
                [-0.01, 0.01],
                [-0.03, 0.01],
                [-0.03, -0.01],
                [-0.01, -0.01],
            ],
            0.025,
            4,
            vec![seg([-0.02, 0.0], [0.02, 0.0], 0.0), seg([0.0, -0.02], [0.0, 0.02], q)],
            [0.95, 0.5, 0.6],
        ),
        spec(
            "u-shape",
            vec![
                [-0.03, -0.03],
                [0.03, -0.03],
                [0.03, 0.03],
                [0.01, 0.03],
                [0.01, -0.01],
                [-0.01, -0.01],
                [-0.01, 0.03],
                [-0.03, 0.03],
            ],
            0.02,
            1,
            vec![seg([-0.02, -0.02], [0.02, -0.02], 0.0)],
            [0.6, 0.4, 0.2],
        ),
        spec(
            "parallelogram",
            vec![[-0.035, -0.015], [0.015, -0.015], [0.035, 0.015], [-0.015, 0.015]],
            0.03,
            2,
            vec![seg([-0.01, 0.0], [0.01, 0.0], 0.0)],
            [0.5, 0.9, 0.5],
        ),
        ring,
        spec(
            "hexagon",
            vec![
                [-0.035, 0.0],
                [-0.015, -0.02],
                [0.015, -0.02],
                [0.035, 0.0],
                [0.015, 0.02],
                [-0.015, 0.02],
            ],
            0.03,
            2,
            vec![seg([-0.015, 0.0], [0.015, 0.0], 0.0)],
            [0.4, 0.3, 0.9],
        ),
    ]
}

pub fn shape(name: &str) -> Result<ShapeSpec> {
    shape_library()
        .into_iter()
        .find(|s| s.name == name)
        .ok_or_else(|| invalid!("unknown shape '{name}'"))
}
