//! Planar poses, the pixel/world camera map, symmetry-aware angular distance
//! and coarse-to-fine rotation schedules.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Maps an angle into `(−π, π]`.
pub fn normalize_angle(theta: f64) -> f64 {
    let mut t = theta.rem_euclid(TAU);
    if t > PI {
        t -= TAU;
    }
    t
}

/// Maps `x` into `(−period/2, period/2]`.
pub fn wrap(x: f64, period: f64) -> f64 {
    let mut t = x.rem_euclid(period);
    if t > period / 2.0 {
        t -= period;
    }
    t
}

/// Maps a gripper angle into `[0, π)`.
pub fn gripper_angle(theta: f64) -> f64 {
    let t = theta.rem_euclid(PI);
    if t >= PI {
        0.0
    } else {
        t
    }
}

/// Rigid planar pose in world metres and radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseSE2 {
    pub x: f64,
    pub y: f64,
    /// Always in `(−π, π]` when built through [`PoseSE2::new`].
    pub theta: f64,
}

impl Default for PoseSE2 {
    fn default() -> Self {
        Self::identity()
    }
}

impl PoseSE2 {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            theta: normalize_angle(theta),
        }
    }

    pub const fn identity() -> Self {
        Self {
            x: 0.0,
            y: 0.0,
            theta: 0.0,
        }
    }

    pub fn rotation(theta: f64) -> Self {
        Self::new(0.0, 0.0, theta)
    }

    /// `self ∘ other`: `other` expressed in the frame of `self`.
    pub fn compose(&self, other: &PoseSE2) -> PoseSE2 {
        let (s, c) = self.theta.sin_cos();
        PoseSE2::new(
            self.x + c * other.x - s * other.y,
            self.y + s * other.x + c * other.y,
            self.theta + other.theta,
        )
    }

    pub fn inverse(&self) -> PoseSE2 {
        let (s, c) = self.theta.sin_cos();
        PoseSE2::new(-(c * self.x + s * self.y), s * self.x - c * self.y, -self.theta)
    }

    /// Maps a point from this pose's frame to the parent frame.
    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.theta.sin_cos();
        [self.x + c * p[0] - s * p[1], self.y + s * p[0] + c * p[1]]
    }

    /// Maps a parent-frame point into this pose's frame.
    pub fn apply_inverse(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.theta.sin_cos();
        let (dx, dy) = (p[0] - self.x, p[1] - self.y);
        [c * dx + s * dy, -s * dx + c * dy]
    }

    pub fn translation_to(&self, other: &PoseSE2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Integer pixel location plus the pose's angle.
///
/// Pixel-space rotations use the same sign as world angles: the rotation
/// kernels already account for rows growing downward, so `theta` passes
/// through unchanged.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelPose {
    pub u: i64,
    pub v: i64,
    pub theta: f64,
    pub in_frame: bool,
}

/// Orthographic top-down camera.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub pixels_per_metre: f64,
    /// World coordinates of the centre of pixel `(0, 0)`, the top-left one.
    pub origin: [f64; 2],
    pub width: usize,
    pub height: usize,
}

impl Default for CameraModel {
    /// 0.5 m × 0.5 m workspace at 160 × 160 pixels (3.125 mm per pixel).
    fn default() -> Self {
        Self::square(0.5, 160)
    }
}

impl CameraModel {
    /// Square workspace `[0, side]²` imaged at `pixels × pixels`.
    pub fn square(side: f64, pixels: usize) -> Self {
        let ppm = pixels as f64 / side;
        let half = 0.5 / ppm;
        Self {
            pixels_per_metre: ppm,
            origin: [half, side - half],
            width: pixels,
            height: pixels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.pixels_per_metre > 0.0) || self.width == 0 || self.height == 0 {
            return Err(invalid!("degenerate camera model {self:?}"));
        }
        Ok(())
    }

    pub fn metres_per_pixel(&self) -> f64 {
        1.0 / self.pixels_per_metre
    }

    /// Workspace extent covered by the image, `(x_min, y_min, x_max, y_max)`.
    pub fn bounds(&self) -> [f64; 4] {
        let half = 0.5 / self.pixels_per_metre;
        let x0 = self.origin[0] - half;
        let y1 = self.origin[1] + half;
        [
            x0,
            y1 - self.height as f64 / self.pixels_per_metre,
            x0 + self.width as f64 / self.pixels_per_metre,
            y1,
        ]
    }

    /// Diagonal of the imaged workspace in metres.
    pub fn diagonal(&self) -> f64 {
        let b = self.bounds();
        (b[2] - b[0]).hypot(b[3] - b[1])
    }

    /// Continuous pixel coordinates `(row, col)` of a world point.
    pub fn world_to_pixel_f(&self, p: [f64; 2]) -> (f64, f64) {
        (
            (self.origin[1] - p[1]) * self.pixels_per_metre,
            (p[0] - self.origin[0]) * self.pixels_per_metre,
        )
    }

    pub fn world_to_pixel(&self, p: &PoseSE2) -> PixelPose {
        let (r, c) = self.world_to_pixel_f([p.x, p.y]);
        let (u, v) = (r.round() as i64, c.round() as i64);
        PixelPose {
            u,
            v,
            theta: p.theta,
            in_frame: self.contains_pixel(u, v),
        }
    }

    pub fn contains_pixel(&self, u: i64, v: i64) -> bool {
        u >= 0 && v >= 0 && (u as usize) < self.height && (v as usize) < self.width
    }

    pub fn pixel_centre(&self, u: f64, v: f64) -> [f64; 2] {
        [
            self.origin[0] + v / self.pixels_per_metre,
            self.origin[1] - u / self.pixels_per_metre,
        ]
    }

    pub fn pixel_to_world(&self, u: i64, v: i64, theta: f64) -> PoseSE2 {
        let [x, y] = self.pixel_centre(u as f64, v as f64);
        PoseSE2::new(x, y, theta)
    }

    /// Like [`world_to_pixel`](Self::world_to_pixel) but rejects poses
    /// outside the image.
    pub fn pixel_in_frame(&self, p: &PoseSE2) -> Result<(usize, usize)> {
        let px = self.world_to_pixel(p);
        if !px.in_frame {
            return Err(invalid!(
                "pose ({:.4}, {:.4}) maps to pixel ({}, {}) outside the {}×{} frame",
                p.x,
                p.y,
                px.u,
                px.v,
                self.height,
                self.width
            ));
        }
        Ok((px.u as usize, px.v as usize))
    }
}

/// Number of planar rotations mapping a shape onto itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub struct SymmetryOrder(u32);

impl SymmetryOrder {
    pub const NONE: Self = Self(1);

    pub fn new(k: u32) -> Result<Self> {
        if k == 0 {
            return Err(invalid!("symmetry order must be at least 1"));
        }
        Ok(Self(k))
    }

    pub fn k(&self) -> u32 {
        self.0
    }

    /// Angle between symmetry-equivalent orientations.
    pub fn period(&self) -> f64 {
        TAU / self.0 as f64
    }
}

impl TryFrom<u32> for SymmetryOrder {
    type Error = Error;

    fn try_from(k: u32) -> Result<Self> {
        Self::new(k)
    }
}

impl From<SymmetryOrder> for u32 {
    fn from(s: SymmetryOrder) -> u32 {
        s.0
    }
}

fn gcd(a: u32, b: u32) -> u32 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// True when `span` is the parallel-jaw gripper's half turn.
fn is_half_turn(span: f64) -> bool {
    (span - PI).abs() < 1e-9
}

/// Smallest angular distance between `pred` and any symmetry copy of
/// `truth`. With a half-turn `span` the gripper's own 2-fold symmetry is
/// folded in as well.
pub fn angle_error(pred: f64, truth: f64, sym: SymmetryOrder, span: f64) -> f64 {
    let k = sym.k();
    let k = if is_half_turn(span) { k * 2 / gcd(k, 2) } else { k };
    wrap(pred - truth, TAU / k as f64).abs()
}

/// Coarse-to-fine angle search parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RotationSchedule {
    pub iterations: usize,
    pub rotations_per_iteration: usize,
    pub step_scaling: f64,
    pub span: f64,
}

impl RotationSchedule {
    pub fn new(iterations: usize, rotations_per_iteration: usize, step_scaling: f64, span: f64) -> Result<Self> {
        let s = Self {
            iterations,
            rotations_per_iteration,
            step_scaling,
            span,
        };
        s.validate()?;
        Ok(s)
    }

    /// Schedule over the gripper's half turn.
    pub fn pick(iterations: usize, rotations: usize, scaling: f64) -> Result<Self> {
        Self::new(iterations, rotations, scaling, PI)
    }

    /// Schedule over the full turn.
    pub fn place(iterations: usize, rotations: usize, scaling: f64) -> Result<Self> {
        Self::new(iterations, rotations, scaling, TAU)
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.rotations_per_iteration == 0 {
            return Err(invalid!("schedule needs at least one iteration and one rotation"));
        }
        if !(self.step_scaling > 1.0) || !self.step_scaling.is_finite() {
            return Err(invalid!("step scaling must exceed 1, got {}", self.step_scaling));
        }
        if !(self.span > 0.0) || !self.span.is_finite() {
            return Err(invalid!("span must be positive, got {}", self.span));
        }
        Ok(())
    }

    /// Angular step at `iteration`.
    pub fn step(&self, iteration: usize) -> f64 {
        self.span / (self.rotations_per_iteration as f64 * self.step_scaling.powi(iteration as i32))
    }

    /// Candidate angles of one iteration. Iteration 0 tiles the span from
    /// 0; later ones bracket `center` symmetrically, including it when the
    /// count is odd.
    pub fn angles(&self, iteration: usize, center: f64) -> Result<Vec<f64>> {
        if iteration >= self.iterations {
            return Err(invalid!(
                "iteration {iteration} out of range for a {}-iteration schedule",
                self.iterations
            ));
        }
        let n = self.rotations_per_iteration;
        let step = self.step(iteration);
        if iteration == 0 {
            return Ok((0..n).map(|j| j as f64 * step).collect());
        }
        let mid = (n as f64 - 1.0) / 2.0;
        Ok((0..n).map(|j| center + (j as f64 - mid) * step).collect())
    }

    /// Runs the coarse-to-fine search. `eval` scores a batch of angles and
    /// returns the index of its best entry, that entry's score and any
    /// payload. The best result seen across all iterations is returned,
    /// and each refinement is centred on it.
    pub fn search<T>(&self, mut eval: impl FnMut(&[f64]) -> Result<(usize, f64, T)>) -> Result<SearchResult<T>> {
        self.validate()?;
        let mut best: Option<SearchResult<T>> = None;
        for it in 0..self.iterations {
            let center = best.as_ref().map_or(0.0, |b| b.angle);
            let angles = self.angles(it, center)?;
            let (idx, score, payload) = eval(&angles)?;
            let angle = *angles
                .get(idx)
                .ok_or_else(|| invalid!("scorer returned index {idx} for {} angles", angles.len()))?;
            if best.as_ref().is_none_or(|b| score > b.score) {
                best = Some(SearchResult { angle, score, payload });
            }
        }
        Ok(best.expect("at least one iteration"))
    }
}

/// Outcome of [`RotationSchedule::search`].
#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult<T> {
    pub angle: f64,
    pub score: f64,
    pub payload: T,
}
