//! Place-pose estimation by correlating a query embedding of the picked
//! region with a key embedding of the whole scene.
//!
//! Slice `i` of a score volume belongs to relative rotation `angles[i]`: the
//! picked object turned by that angle about the pick point. The
//! crop-rotated variant rotates the image crop and runs the query network
//! once per angle; the query-rotated variant runs it once and rotates the
//! embedding.

use std::f64::consts::TAU;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::geometry::{normalize_angle, CameraModel, PoseSE2, RotationSchedule};
use crate::nets::{self, serde_via_string, MethodString, Optimizer};
use crate::numerics::{argmax3, Grid, HourglassConfig, ParamSet, ParamVars, ScoreVolume, Tape, Var, VolumeMax};
use crate::scene::{augment_with, Demonstration, OBS_CHANNELS};

/// Depth of the query and key embeddings.
pub const EMBEDDING_DEPTH: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TransportVariant {
    #[serde(rename = "cr")]
    CropRotated,
    #[serde(rename = "qr")]
    QueryRotated,
}

impl fmt::Display for TransportVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::CropRotated => "cr",
            Self::QueryRotated => "qr",
        })
    }
}

impl FromStr for TransportVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cr" | "crop-rotated" => Ok(Self::CropRotated),
            "qr" | "query-rotated" => Ok(Self::QueryRotated),
            _ => Err(invalid!("unknown transport variant '{s}' (expected cr or qr)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TransportTrainMethod {
    Discrete { bins: usize },
    Exact { negatives: usize },
}

impl TransportTrainMethod {
    pub const DISCRETE: Self = Self::Discrete { bins: 36 };
    pub const EXACT: Self = Self::Exact { negatives: 35 };

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Discrete { bins } if bins < 2 => Err(invalid!("discrete training needs ≥ 2 bins")),
            Self::Exact { negatives } if negatives < 1 => Err(invalid!("exact training needs ≥ 1 negative")),
            _ => Ok(()),
        }
    }
}

impl Default for TransportTrainMethod {
    fn default() -> Self {
        Self::DISCRETE
    }
}

impl fmt::Display for TransportTrainMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Discrete { bins } => write!(f, "discrete:{bins}"),
            Self::Exact { negatives } => write!(f, "exact:{negatives}"),
        }
    }
}

impl FromStr for TransportTrainMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let m = match MethodString::parse(s)? {
            MethodString::Discrete(n) => Self::Discrete { bins: n.unwrap_or(36) },
            MethodString::Exact(n) => Self::Exact {
                negatives: n.unwrap_or(35),
            },
            MethodString::Iterative(_) => return Err(invalid!("'{s}' is an inference method")),
        };
        m.validate()?;
        Ok(m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TransportInferMethod {
    Discrete { bins: usize },
    Iterative(RotationSchedule),
}

impl TransportInferMethod {
    pub const DISCRETE: Self = Self::Discrete { bins: 36 };

    /// Coarse-to-fine search over a full turn.
    pub fn iterative(iterations: usize, rotations: usize, scaling: f64) -> Result<Self> {
        Ok(Self::Iterative(RotationSchedule::place(
            iterations, rotations, scaling,
        )?))
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Discrete { bins } if *bins < 1 => Err(invalid!("discrete inference needs ≥ 1 bin")),
            Self::Discrete { .. } => Ok(()),
            Self::Iterative(s) if (s.span - TAU).abs() > 1e-12 => {
                Err(invalid!("transport schedules span a full turn, got {}", s.span))
            }
            Self::Iterative(s) => s.validate(),
        }
    }
}

impl fmt::Display for TransportInferMethod {
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

impl FromStr for TransportInferMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let m = match MethodString::parse(s)? {
            MethodString::Discrete(n) => Self::Discrete { bins: n.unwrap_or(36) },
            MethodString::Iterative(p) => {
                let (i, r, k) = p.unwrap_or((3, 12, 4.0));
                Self::iterative(i, r, k)?
            }
            MethodString::Exact(_) => return Err(invalid!("'{s}' is a training method")),
        };
        m.validate()?;
        Ok(m)
    }
}

serde_via_string!(TransportTrainMethod);
serde_via_string!(TransportInferMethod);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransportConfig {
    pub variant: TransportVariant,
    /// Side of the query crop, pixels (odd).
    pub crop: usize,
    /// Shared shape of the query and key networks (4 in, 3 out).
    pub network: HourglassConfig,
    pub camera: CameraModel,
}

impl Default for TransportConfig {
    fn default() -> Self {
        Self {
            variant: TransportVariant::QueryRotated,
            crop: 49,
            network: HourglassConfig {
                base_channels: 8,
                blocks: 0,
                ..HourglassConfig::default()
            }
            .with_channels(OBS_CHANNELS, EMBEDDING_DEPTH),
            camera: CameraModel::default(),
        }
    }
}

impl TransportConfig {
    pub fn validate(&self) -> Result<()> {
        self.camera.validate()?;
        if self.crop.is_multiple_of(2) || self.crop == 0 {
            return Err(invalid!("transport crop must be odd, got {}", self.crop));
        }
        if self.network.in_channels != OBS_CHANNELS || self.network.out_channels != EMBEDDING_DEPTH {
            return Err(invalid!(
                "embedding networks must map {OBS_CHANNELS} channels to {EMBEDDING_DEPTH}"
            ));
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct TransportModel {
    pub config: TransportConfig,
    pub query: ParamSet,
    pub key: ParamSet,
    query_calls: AtomicU64,
}

impl Clone for TransportModel {
    fn clone(&self) -> Self {
        Self {
            config: self.config,
            query: self.query.clone(),
            key: self.key.clone(),
            query_calls: AtomicU64::new(self.query_calls()),
        }
    }
}

impl PartialEq for TransportModel {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.query == other.query && self.key == other.key
    }
}

/// Relative rotations `2π·b/n`.
pub fn place_bins(n: usize) -> Vec<f64> {
    (0..n).map(|b| b as f64 * TAU / n as f64).collect()
}

/// Bin nearest to relative rotation `delta`.
pub fn nearest_place_bin(delta: f64, n: usize) -> usize {
    (delta.rem_euclid(TAU) / (TAU / n as f64)).round() as usize % n
}

/// A recorded key embedding and pick crop, ready for score volumes.
pub struct TransportGraph {
    pub tape: Tape,
    pub query: ParamVars,
    pub key: ParamVars,
    /// `h × w × 3` key embedding of the whole observation.
    pub key_embedding: Var,
    /// Preprocessed `c × c × 4` crop centred on the pick.
    pub crop: Var,
    /// Query embedding of the unrotated crop, computed on first use by the
    /// query-rotated variant.
    query_embedding: Option<Var>,
}

impl TransportGraph {
    fn embed_query(&mut self, model: &TransportModel, crop: Var) -> Result<Var> {
        model.query_calls.fetch_add(1, Ordering::Relaxed);
        nets::padded_forward(&model.config.network, &mut self.tape, &self.query, crop)
    }

    /// `n × c × c × 3` query embeddings, one per relative rotation.
    pub fn queries(&mut self, model: &TransportModel, angles: &[f64]) -> Result<Var> {
        if angles.is_empty() {
            return Err(invalid!("score volume needs at least one angle"));
        }
        match model.config.variant {
            TransportVariant::QueryRotated => {
                let q = match self.query_embedding {
                    Some(q) => q,
                    None => {
                        let q = self.embed_query(model, self.crop)?;
                        self.query_embedding = Some(q);
                        q
                    }
                };
                self.tape.rot_stack(q, angles)
            }
            TransportVariant::CropRotated => {
                let rotated = self.tape.rot_stack(self.crop, angles)?;
                let mut out = Vec::with_capacity(angles.len());
                for i in 0..angles.len() {
                    let patch = self.tape.slice(rotated, i)?;
                    out.push(self.embed_query(model, patch)?);
                }
                self.tape.stack(&out)
            }
        }
    }

    /// `h × w × n` scores for relative rotations `angles`.
    pub fn volume(&mut self, model: &TransportModel, angles: &[f64]) -> Result<Var> {
        let q = self.queries(model, angles)?;
        self.tape.cross_correlate(q, self.key_embedding)
    }
}

/// Relative rotation and volume maximum chosen by `method`, where `volume`
/// scores every position for a set of relative rotations. Iterative search
/// re-takes the argmax over position and rotation at every refinement.
pub fn select_place(
    method: &TransportInferMethod,
    mut volume: impl FnMut(&[f64]) -> Result<ScoreVolume>,
) -> Result<(f64, VolumeMax)> {
    method.validate()?;
    let mut eval = |angles: &[f64]| -> Result<(usize, f64, VolumeMax)> {
        let vol = volume(angles)?;
        if vol.dims().2 != angles.len() {
            return Err(shape_err!(
                "volume of depth {} for {} angles",
                vol.dims().2,
                angles.len()
            ));
        }
        let best = argmax3(&vol)?;
        Ok((best.r, best.score, best))
    };
    match method {
        TransportInferMethod::Discrete { bins } => {
            let angles = place_bins(*bins);
            let (r, _, best) = eval(&angles)?;
            Ok((angles[r], best))
        }
        TransportInferMethod::Iterative(schedule) => {
            let found = schedule.search(eval)?;
            Ok((found.angle, found.payload))
        }
    }
}

impl TransportModel {
    /// Random initialisation; the query head starts at zero so the first
    /// score volume is flat.
    pub fn new(config: TransportConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut query = config.network.init(rng);
        HourglassConfig::zero_head(&mut query);
        Ok(Self::from_parts(config, query, config.network.init(rng)))
    }

    pub fn from_parts(config: TransportConfig, query: ParamSet, key: ParamSet) -> Self {
        Self {
            config,
            query,
            key,
            query_calls: AtomicU64::new(0),
        }
    }

    /// Query-network evaluations since construction or the last reset.
    pub fn query_calls(&self) -> u64 {
        self.query_calls.load(Ordering::Relaxed)
    }

    pub fn reset_query_calls(&self) {
        self.query_calls.store(0, Ordering::Relaxed);
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

    /// Records the key network and the pick crop on a fresh tape.
    pub fn graph(&self, obs: &Grid, pick: &PoseSE2, trainable: bool) -> Result<TransportGraph> {
        self.check_obs(obs)?;
        let (u, v) = self.config.camera.pixel_in_frame(pick)?;
        let mut tape = Tape::new();
        let query = self.query.bind(&mut tape, trainable);
        let key = self.key.bind(&mut tape, trainable);
        let input = tape.constant(nets::preprocess(obs)?);
        let key_embedding = nets::padded_forward(&self.config.network, &mut tape, &key, input)?;
        let crop = tape.crop(input, (u as i64, v as i64), self.config.crop)?;
        Ok(TransportGraph {
            tape,
            query,
            key,
            key_embedding,
            crop,
            query_embedding: None,
        })
    }

    pub fn score_volume(&self, obs: &Grid, pick: &PoseSE2, angles: &[f64]) -> Result<ScoreVolume> {
        let mut g = self.graph(obs, pick, false)?;
        let vol = g.volume(self, angles)?;
        ScoreVolume::new(g.tape.value(vol).clone())
    }

    /// Place pose estimate for the object held at `pick`.
    pub fn infer(&self, obs: &Grid, pick: &PoseSE2, method: &TransportInferMethod) -> Result<PoseSE2> {
        let mut g = self.graph(obs, pick, false)?;
        let (delta, best) = select_place(method, |angles| {
            let vol = g.volume(self, angles)?;
            ScoreVolume::new(g.tape.value(vol).clone())
        })?;
        Ok(self
            .config
            .camera
            .pixel_to_world(best.u as i64, best.v as i64, normalize_angle(pick.theta + delta)))
    }

    /// Relative rotations and target slice for one training sample.
    pub fn rotation_targets(method: &TransportTrainMethod, delta: f64, rng: &mut impl Rng) -> (Vec<f64>, usize) {
        match *method {
            TransportTrainMethod::Discrete { bins } => (place_bins(bins), nearest_place_bin(delta, bins)),
            TransportTrainMethod::Exact { negatives } => {
                let mut angles = Vec::with_capacity(negatives + 1);
                angles.push(delta.rem_euclid(TAU));
                for _ in 0..negatives {
                    angles.push(rng.random_range(0.0..TAU));
                }
                (angles, 0)
            }
        }
    }

    /// Cross-entropy over the whole volume for `sample` as given.
    pub fn loss(
        &self,
        sample: &Demonstration,
        angles: &[f64],
        target: usize,
        trainable: bool,
    ) -> Result<(TransportGraph, Var)> {
        let (u, v) = self.config.camera.pixel_in_frame(&sample.place)?;
        let mut g = self.graph(&sample.observation, &sample.pick, trainable)?;
        let vol = g.volume(self, angles)?;
        let (_, w, n) = g.tape.value(vol).hwc()?;
        let loss = g.tape.cross_entropy(vol, (u * w + v) * n + target)?;
        Ok((g, loss))
    }

    /// One update on a randomly augmented copy of `sample`.
    pub fn train_step(
        &mut self,
        opt: &mut Optimizer,
        sample: &Demonstration,
        method: &TransportTrainMethod,
        rng: &mut impl Rng,
    ) -> Result<f64> {
        let sample = augment_with(sample, &self.config.camera, rng);
        self.fit(opt, &sample, method, rng)
    }

    /// One update on `sample` exactly as given.
    pub fn fit(
        &mut self,
        opt: &mut Optimizer,
        sample: &Demonstration,
        method: &TransportTrainMethod,
        rng: &mut impl Rng,
    ) -> Result<f64> {
        method.validate()?;
        let delta = sample.place.theta - sample.pick.theta;
        let (angles, target) = Self::rotation_targets(method, delta, rng);
        self.fit_with(opt, sample, &angles, target)
    }

    /// One update with explicit relative rotations and target slice.
    pub fn fit_with(
        &mut self,
        opt: &mut Optimizer,
        sample: &Demonstration,
        angles: &[f64],
        target: usize,
    ) -> Result<f64> {
        let (mut g, loss) = self.loss(sample, angles, target, true)?;
        let value = g.tape.value(loss).values()[0];
        if !value.is_finite() {
            return Err(Error::Numeric(format!("transport loss diverged: {value}")));
        }
        g.tape.backward(loss)?;
        opt.apply(&g.tape, [(&mut self.query, &g.query), (&mut self.key, &g.key)])?;
        Ok(value)
    }

    pub fn save(&self, stem: &Path, train_method: Option<&TransportTrainMethod>, steps: u64) -> Result<()> {
        nets::save_checkpoint(
            stem,
            "transport",
            &self.config,
            [("query", &self.query), ("key", &self.key)],
            train_method.map(|m| m.to_string()),
            steps,
        )
    }

    pub fn load(stem: &Path) -> Result<(Self, nets::Sidecar<TransportConfig>)> {
        let (meta, [query, key]) = nets::load_checkpoint::<TransportConfig>(stem, "transport", ["query", "key"])?;
        meta.config.validate()?;
        Ok((Self::from_parts(meta.config, query, key), meta))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bins_and_targets() {
        assert_eq!(nearest_place_bin(30f64.to_radians(), 36), 3);
        assert_eq!(nearest_place_bin(-10f64.to_radians(), 36), 35);
        assert_eq!(nearest_place_bin(358f64.to_radians(), 36), 0);
    }

    #[test]
    fn method_strings() {
        assert_eq!(
            "exact".parse::<TransportTrainMethod>().unwrap(),
            TransportTrainMethod::EXACT
        );
        let m: TransportInferMethod = "iter".parse().unwrap();
        assert_eq!(m.to_string(), "iter:3:12:4");
    }
}
