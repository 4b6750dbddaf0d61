use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Demonstration;
use crate::geometry::{gripper_angle, CameraModel, PoseSE2};
use crate::numerics::{bilinear_taps, Grid};

const MAX_TRIES: usize = 20;
/// Largest sampled translation per axis, metres.
pub const MAX_SHIFT: f64 = 0.05;

/// Planar rigid transform of the workspace: rotate by `angle` about
/// `center`, then translate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Augmentation {
    pub angle: f64,
    pub translation: [f64; 2],
    pub center: [f64; 2],
}

impl Augmentation {
    pub fn identity(center: [f64; 2]) -> Self {
        Self {
            angle: 0.0,
            translation: [0.0, 0.0],
            center,
        }
    }

    fn as_pose(&self) -> PoseSE2 {
        let shift = PoseSE2::new(
            self.center[0] + self.translation[0],
            self.center[1] + self.translation[1],
            self.angle,
        );
        shift.compose(&PoseSE2::new(-self.center[0], -self.center[1], 0.0))
    }

    pub fn apply_pose(&self, p: &PoseSE2) -> PoseSE2 {
        self.as_pose().compose(p)
    }

    pub fn apply_point(&self, p: [f64; 2]) -> [f64; 2] {
        self.as_pose().apply(p)
    }

    pub fn invert_point(&self, p: [f64; 2]) -> [f64; 2] {
        self.as_pose().apply_inverse(p)
    }
}

fn snap(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() < 1e-9 {
        r
    } else {
        x
    }
}

/// Resamples an observation so world content moves by `aug`; pixels that
/// come from outside the frame read as zero.
pub fn warp_observation(obs: &Grid, cam: &CameraModel, aug: &Augmentation) -> Grid {
    let shape = obs.shape().to_vec();
    let (h, w, d) = (shape[0], shape[1], shape[2]);
    let src = obs.values();
    let mut out = vec![0.0; src.len()];
    for u in 0..h {
        for v in 0..w {
            let q = cam.pixel_centre(u as f64, v as f64);
            let (r, c) = cam.world_to_pixel_f(aug.invert_point(q));
            let taps = bilinear_taps(snap(r), snap(c), h, w);
            let o = (u * w + v) * d;
            for t in 0..taps.n as usize {
                let (i, wt) = (taps.idx[t] * d, taps.wt[t]);
                for ch in 0..d {
                    out[o + ch] += wt * src[i + ch];
                }
            }
        }
    }
    Grid::new(&shape, out).expect("same shape")
}

/// Applies one random rigid transform to the raster and both poses. Draws
/// again when a pose would leave the frame; after repeated failures the
/// sample is returned unchanged.
pub fn augment(sample: &Demonstration, cam: &CameraModel, rng_seed: u64) -> Demonstration {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    augment_with(sample, cam, &mut rng)
}

pub fn augment_with(sample: &Demonstration, cam: &CameraModel, rng: &mut impl Rng) -> Demonstration {
    let b = cam.bounds();
    let center = [(b[0] + b[2]) / 2.0, (b[1] + b[3]) / 2.0];
    for _ in 0..MAX_TRIES {
        let aug = Augmentation {
            angle: rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
            translation: [
                rng.random_range(-MAX_SHIFT..MAX_SHIFT),
                rng.random_range(-MAX_SHIFT..MAX_SHIFT),
            ],
            center,
        };
        if let Some(out) = apply(sample, cam, &aug) {
            return out;
        }
    }
    sample.clone()
}

/// The transformed sample, or `None` when a pose leaves the frame.
fn apply(sample: &Demonstration, cam: &CameraModel, aug: &Augmentation) -> Option<Demonstration> {
    let mut pick = aug.apply_pose(&sample.pick);
    pick.theta = gripper_angle(pick.theta);
    let place = aug.apply_pose(&sample.place);
    if !cam.world_to_pixel(&pick).in_frame || !cam.world_to_pixel(&place).in_frame {
        return None;
    }
    Some(Demonstration {
        observation: warp_observation(&sample.observation, cam, aug),
        pick,
        place,
    })
}
