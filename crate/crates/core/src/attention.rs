//! Pick-pose estimation.
//!
//! A fully convolutional network scores every pixel as a grasp centre. At
//! the chosen pixel a rotation head scores candidate gripper angles: the
//! patch around the pixel is rotated by `−θ` for each candidate `θ`, which
//! brings the correct candidate into the canonical grasp frame, and a single
//! linear unit whose receptive field is the whole patch scores each copy.
//! The input-cropped variant reads the patch from the observation, the
//! feature-cropped one from the position network's output map, so rotation
//! gradients also train the position network.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::geometry::{gripper_angle, CameraModel, PoseSE2, RotationSchedule};
use crate::nets::{self, serde_via_string, MethodString, Optimizer};
use crate::numerics::{argmax_flat, Grid, HourglassConfig, ParamSet, ParamVars, Tape, Var};
use crate::scene::{augment_with, Demonstration, OBS_CHANNELS};

const ROTATION_WEIGHT: &str = "rot.w";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AttentionVariant {
    #[serde(rename = "ic")]
    InputCropped,
    #[serde(rename = "fc")]
    FeatureCropped,
}

impl fmt::Display for AttentionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::InputCropped => "ic",
            Self::FeatureCropped => "fc",
        })
    }
}

impl FromStr for AttentionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ic" | "input-cropped" => Ok(Self::InputCropped),
            "fc" | "feature-cropped" => Ok(Self::FeatureCropped),
            _ => Err(invalid!("unknown attention variant '{s}' (expected ic or fc)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AttentionTrainMethod {
    /// Cross-entropy over equally spaced angle bins spanning half a turn.
    Discrete { bins: usize },
    /// One exactly canonicalised patch against randomly rotated ones.
    Exact { negatives: usize },
}

impl AttentionTrainMethod {
    pub const DISCRETE: Self = Self::Discrete { bins: 18 };
    pub const EXACT: Self = Self::Exact { negatives: 17 };

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Discrete { bins } if bins < 2 => Err(invalid!("discrete training needs ≥ 2 bins")),
            Self::Exact { negatives } if negatives < 1 => Err(invalid!("exact training needs ≥ 1 negative")),
            _ => Ok(()),
        }
    }
}

impl Default for AttentionTrainMethod {
    fn default() -> Self {
        Self::DISCRETE
    }
}

impl fmt::Display for AttentionTrainMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Discrete { bins } => write!(f, "discrete:{bins}"),
            Self::Exact { negatives } => write!(f, "exact:{negatives}"),
        }
    }
}

impl FromStr for AttentionTrainMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let m = match MethodString::parse(s)? {
            MethodString::Discrete(n) => Self::Discrete { bins: n.unwrap_or(18) },
            MethodString::Exact(n) => Self::Exact {
                negatives: n.unwrap_or(17),
            },
            MethodString::Iterative(_) => return Err(invalid!("'{s}' is an inference method")),
        };
        m.validate()?;
        Ok(m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AttentionInferMethod {
    Discrete { bins: usize },
    Iterative(RotationSchedule),
}

impl AttentionInferMethod {
    pub const DISCRETE: Self = Self::Discrete { bins: 18 };

    /// Coarse-to-fine search over half a turn.
    pub fn iterative(iterations: usize, rotations: usize, scaling: f64) -> Result<Self> {
        Ok(Self::Iterative(RotationSchedule::pick(iterations, rotations, scaling)?))
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Discrete { bins } if *bins < 1 => Err(invalid!("discrete inference needs ≥ 1 bin")),
            Self::Discrete { .. } => Ok(()),
            Self::Iterative(s) if (s.span - PI).abs() > 1e-12 => {
                Err(invalid!("attention schedules span half a turn, got {}", s.span))
            }
            Self::Iterative(s) => s.validate(),
        }
    }
}

impl fmt::Display for AttentionInferMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Discrete { bins } => write!(f, "discrete:{bins}"),
            Self::Iterative(s) => write!(
                f,
                "iter:{}:{}:{}",
                s.iterations, s.rotations_per_iteration, s.step_scaling
            ),
        }
    }
}

impl FromStr for AttentionInferMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let m = match MethodString::parse(s)? {
            MethodString::Discrete(n) => Self::Discrete { bins: n.unwrap_or(18) },
            MethodString::Iterative(p) => {
                let (i, r, k) = p.unwrap_or((3, 6, 4.0));
                Self::iterative(i, r, k)?
            }
            MethodString::Exact(_) => return Err(invalid!("'{s}' is a training method")),
        };
        m.validate()?;
        Ok(m)
    }
}

serde_via_string!(AttentionTrainMethod);
serde_via_string!(AttentionInferMethod);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub variant: AttentionVariant,
    /// Side of the rotation head's patch, pixels (odd).
    pub crop: usize,
    /// Position network; its channel counts are fixed to 4 in, 1 out.
    pub network: HourglassConfig,
    pub camera: CameraModel,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            variant: AttentionVariant::InputCropped,
            crop: 33,
            network: HourglassConfig {
                base_channels: 8,
                blocks: 0,
                ..HourglassConfig::default()
            }
            .with_channels(OBS_CHANNELS, 1),
            camera: CameraModel::default(),
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        self.camera.validate()?;
        if self.crop.is_multiple_of(2) || self.crop == 0 {
            return Err(invalid!("attention crop must be odd, got {}", self.crop));
        }
        if self.network.in_channels != OBS_CHANNELS || self.network.out_channels != 1 {
            return Err(invalid!("position network must map {OBS_CHANNELS} channels to 1"));
        }
        Ok(())
    }

    fn patch_channels(&self) -> usize {
        match self.variant {
            AttentionVariant::InputCropped => OBS_CHANNELS,
            AttentionVariant::FeatureCropped => 1,
        }
    }
}

/// Loss values of one update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionLosses {
    pub position: f64,
    pub rotation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionModel {
    pub config: AttentionConfig,
    pub position: ParamSet,
    pub rotation: ParamSet,
}

/// A recorded forward pass of the position network, ready for rotation
/// queries.
pub struct AttentionGraph {
    pub tape: Tape,
    pub position: ParamVars,
    pub rotation: ParamVars,
    /// Preprocessed observation.
    pub input: Var,
    /// `h × w × 1` position scores.
    pub heatmap: Var,
}

impl AttentionGraph {
    /// Scores of candidate gripper angles `thetas` at pixel `(u, v)`.
    pub fn rotation_logits(&mut self, config: &AttentionConfig, pos: (usize, usize), thetas: &[f64]) -> Result<Var> {
        if thetas.is_empty() {
            return Err(invalid!("rotation logits need at least one angle"));
        }
        let (h, w, _) = self.tape.value(self.input).hwc()?;
        if pos.0 >= h || pos.1 >= w {
            return Err(invalid!("pixel {pos:?} outside {h}×{w}"));
        }
        let source = match config.variant {
            AttentionVariant::InputCropped => self.input,
            AttentionVariant::FeatureCropped => self.heatmap,
        };
        let patch = self.tape.crop(source, (pos.0 as i64, pos.1 as i64), config.crop)?;
        let canonical: Vec<f64> = thetas.iter().map(|t| -t).collect();
        let stack = self.tape.rot_stack(patch, &canonical)?;
        self.tape.patch_dot(stack, self.rotation.get(ROTATION_WEIGHT)?)
    }
}

/// Angle bins `b·π/n`.
pub fn pick_bins(n: usize) -> Vec<f64> {
    (0..n).map(|b| b as f64 * PI / n as f64).collect()
}

/// Bin whose centre is nearest to gripper angle `theta`.
pub fn nearest_pick_bin(theta: f64, n: usize) -> usize {
    let step = PI / n as f64;
    (gripper_angle(theta) / step).round() as usize % n
}

/// Gripper angle in `[0, π)` chosen by `method`, where `score` maps
/// candidate angles to one score each.
pub fn select_pick_angle(
    method: &AttentionInferMethod,
    mut score: impl FnMut(&[f64]) -> Result<Vec<f64>>,
) -> Result<f64> {
    method.validate()?;
    let mut eval = |thetas: &[f64]| -> Result<(usize, f64, ())> {
        let scores = score(thetas)?;
        if scores.len() != thetas.len() {
            return Err(shape_err!("{} scores for {} angles", scores.len(), thetas.len()));
        }
        let (i, s) = argmax_flat(&scores)?;
        Ok((i, s, ()))
    };
    let theta = match method {
        AttentionInferMethod::Discrete { bins } => {
            let thetas = pick_bins(*bins);
            let (i, _, ()) = eval(&thetas)?;
            thetas[i]
        }
        AttentionInferMethod::Iterative(schedule) => schedule.search(eval)?.angle,
    };
    Ok(gripper_angle(theta))
}

impl AttentionModel {
    /// Random initialisation; the position head starts at zero so the
    /// initial heatmap is flat.
    pub fn new(config: AttentionConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut position = config.network.init(rng);
        HourglassConfig::zero_head(&mut position);
        let c = config.crop;
        let ch = config.patch_channels();
        let std = 1.0 / ((c * c * ch) as f64).sqrt();
        let mut rotation = ParamSet::new();
        rotation.insert(
            ROTATION_WEIGHT,
            Grid::from_fn(&[c, c, ch], |_| {
                let z: f64 = rng.sample(StandardNormal);
                z * std
            }),
        )?;
        Ok(Self {
            config,
            position,
            rotation,
        })
    }

    fn check_obs(&self, obs: &Grid) -> Result<()> {
        let cam = &self.config.camera;
        match obs.shape() {
            [h, w, c] if *h == cam.height && *w == cam.width && *c == OBS_CHANNELS => Ok(()),
            s => Err(shape_err!(
                "observation {:?} does not match the {}×{}×{} camera",
                s,
                cam.height,
                cam.width,
                OBS_CHANNELS
            )),
        }
    }

    /// Records the position network on a fresh tape.
    pub fn graph(&self, obs: &Grid, trainable: bool) -> Result<AttentionGraph> {
        self.check_obs(obs)?;
        let mut tape = Tape::new();
        let position = self.position.bind(&mut tape, trainable);
        let rotation = self.rotation.bind(&mut tape, trainable);
        let input = tape.constant(nets::preprocess(obs)?);
        let heatmap = nets::padded_forward(&self.config.network, &mut tape, &position, input)?;
        Ok(AttentionGraph {
            tape,
            position,
            rotation,
            input,
            heatmap,
        })
    }

    pub fn position_heatmap(&self, obs: &Grid) -> Result<Grid> {
        let g = self.graph(obs, false)?;
        Ok(g.tape.value(g.heatmap).clone())
    }

    pub fn rotation_logits(&self, obs: &Grid, pos: (usize, usize), thetas: &[f64]) -> Result<Vec<f64>> {
        let mut g = self.graph(obs, false)?;
        let l = g.rotation_logits(&self.config, pos, thetas)?;
        Ok(g.tape.value(l).values().to_vec())
    }

    /// Pick pose estimate: heatmap argmax, then the best-scoring gripper angle.
    pub fn infer(&self, obs: &Grid, method: &AttentionInferMethod) -> Result<PoseSE2> {
        method.validate()?;
        let mut g = self.graph(obs, false)?;
        let (_, w, _) = obs.hwc()?;
        let (flat, _) = argmax_flat(g.tape.value(g.heatmap).values())?;
        let pos = (flat / w, flat % w);
        let config = self.config;
        let theta = select_pick_angle(method, |thetas| {
            let l = g.rotation_logits(&config, pos, thetas)?;
            Ok(g.tape.value(l).values().to_vec())
        })?;
        Ok(self.config.camera.pixel_to_world(pos.0 as i64, pos.1 as i64, theta))
    }

    /// Candidate angles and target index for one training sample.
    pub fn rotation_targets(method: &AttentionTrainMethod, pick_theta: f64, rng: &mut impl Rng) -> (Vec<f64>, usize) {
        match *method {
            AttentionTrainMethod::Discrete { bins } => (pick_bins(bins), nearest_pick_bin(pick_theta, bins)),
            AttentionTrainMethod::Exact { negatives } => {
                let mut thetas = Vec::with_capacity(negatives + 1);
                thetas.push(pick_theta);
                for _ in 0..negatives {
                    let delta: f64 = rng.random_range(0.0..PI);
                    thetas.push(pick_theta - delta);
                }
                (thetas, 0)
            }
        }
    }

    /// Position and rotation losses for `sample` as given (no augmentation).
    pub fn losses(
        &self,
        sample: &Demonstration,
        thetas: &[f64],
        target: usize,
        trainable: bool,
    ) -> Result<(AttentionGraph, Var, Var)> {
        let (u, v) = self.config.camera.pixel_in_frame(&sample.pick)?;
        let mut g = self.graph(&sample.observation, trainable)?;
        let (h, w, _) = sample.observation.hwc()?;
        let flat = g.tape.reshape(g.heatmap, &[h * w])?;
        let position = g.tape.cross_entropy(flat, u * w + v)?;
        let logits = g.rotation_logits(&self.config, (u, v), thetas)?;
        let rotation = g.tape.cross_entropy(logits, target)?;
        Ok((g, position, rotation))
    }

    /// One update on a randomly augmented copy of `sample`.
    pub fn train_step(
        &mut self,
        opt: &mut Optimizer,
        sample: &Demonstration,
        method: &AttentionTrainMethod,
        rng: &mut impl Rng,
    ) -> Result<AttentionLosses> {
        let sample = augment_with(sample, &self.config.camera, rng);
        self.fit(opt, &sample, method, rng)
    }

    /// One update on `sample` exactly as given.
    pub fn fit(
        &mut self,
        opt: &mut Optimizer,
        sample: &Demonstration,
        method: &AttentionTrainMethod,
        rng: &mut impl Rng,
    ) -> Result<AttentionLosses> {
        method.validate()?;
        let (thetas, target) = Self::rotation_targets(method, sample.pick.theta, rng);
        self.fit_with(opt, sample, &thetas, target)
    }

    /// One update with explicit candidate angles and target index.
    pub fn fit_with(
        &mut self,
        opt: &mut Optimizer,
        sample: &Demonstration,
        thetas: &[f64],
        target: usize,
    ) -> Result<AttentionLosses> {
        let (mut g, pos, rot) = self.losses(sample, thetas, target, true)?;
        let losses = AttentionLosses {
            position: g.tape.value(pos).values()[0],
            rotation: g.tape.value(rot).values()[0],
        };
        if !losses.position.is_finite() || !losses.rotation.is_finite() {
            return Err(Error::Numeric(format!("attention loss diverged: {losses:?}")));
        }
        let total = g.tape.add(pos, rot)?;
        g.tape.backward(total)?;
        opt.apply(
            &g.tape,
            [(&mut self.position, &g.position), (&mut self.rotation, &g.rotation)],
        )?;
        Ok(losses)
    }

    pub fn save(&self, stem: &Path, train_method: Option<&AttentionTrainMethod>, steps: u64) -> Result<()> {
        nets::save_checkpoint(
            stem,
            "attention",
            &self.config,
            [("position", &self.position), ("rotation", &self.rotation)],
            train_method.map(|m| m.to_string()),
            steps,
        )
    }

    /// Loads a checkpoint and its sidecar.
    pub fn load(stem: &Path) -> Result<(Self, nets::Sidecar<AttentionConfig>)> {
        let (meta, [position, rotation]) =
            nets::load_checkpoint::<AttentionConfig>(stem, "attention", ["position", "rotation"])?;
        meta.config.validate()?;
        let model = Self {
            config: meta.config,
            position,
            rotation,
        };
        Ok((model, meta))
    }
}
