//! Plumbing shared by the attention and transport modules: input scaling,
//! padded network evaluation, optimiser state, checkpoint files and method
//! strings.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::numerics::{adam_step, Grid, HourglassConfig, OptState, ParamSet, ParamVars, Tape, Var};
use crate::scene::DEPTH_CHANNEL;

/// Depth is stored in metres; this brings object heights near the colour
/// channels' unit range before they reach a network.
pub const DEPTH_SCALE: f64 = 20.0;

/// Default learning rate of both modules.
pub const DEFAULT_LR: f64 = 1e-3;

/// Network input for an observation.
pub fn preprocess(obs: &Grid) -> Result<Grid> {
    let (_, _, c) = obs.hwc()?;
    if c <= DEPTH_CHANNEL {
        return Err(shape_err!("observation needs {} channels, got {c}", DEPTH_CHANNEL + 1));
    }
    let mut out = obs.clone();
    out.set_requires_grad(false);
    for px in out.values_mut().chunks_mut(c) {
        px[DEPTH_CHANNEL] *= DEPTH_SCALE;
    }
    Ok(out)
}

/// Runs an hourglass on inputs of any size by zero-padding up to its
/// downsampling factor and cutting the output back to the input's extent.
pub fn padded_forward(config: &HourglassConfig, tape: &mut Tape, params: &ParamVars, x: Var) -> Result<Var> {
    let (h, w, _) = tape.value(x).hwc()?;
    let f = config.downsampling();
    let (ph, pw) = (h.div_ceil(f) * f, w.div_ceil(f) * f);
    if (ph, pw) == (h, w) {
        return config.forward(tape, params, x);
    }
    let (top, left) = (((ph - h) / 2) as i64, ((pw - w) / 2) as i64);
    let padded = tape.window(x, (-top, -left), (ph, pw))?;
    let y = config.forward(tape, params, padded)?;
    tape.window(y, (top, left), (h, w))
}

/// Hourglass weights that copy the first `out_channels` input channels
/// through unchanged (for non-negative inputs).
pub fn identity_network(config: &HourglassConfig) -> Result<ParamSet> {
    if config.out_channels > config.in_channels || config.out_channels > config.base_channels {
        return Err(invalid!("identity needs out ≤ in and out ≤ base channels"));
    }
    let mut p = config.init(&mut ChaCha8Rng::seed_from_u64(0));
    for (_, g) in p.iter_mut() {
        g.values_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let stem = p.get_mut("stem.w").ok_or_else(|| invalid!("network has no stem"))?;
    let k = stem.shape()[0];
    for ch in 0..config.out_channels {
        stem.set(&[k / 2, k / 2, ch, ch], 1.0);
    }
    let head = p.get_mut("head.w").ok_or_else(|| invalid!("network has no head"))?;
    for ch in 0..config.out_channels {
        head.set(&[0, 0, ch, ch], 1.0);
    }
    Ok(p)
}

/// Adam state for a module's two parameter sets.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    first: OptState,
    second: OptState,
}

impl Optimizer {
    pub fn new(lr: f64) -> Self {
        Self {
            first: OptState::new(lr),
            second: OptState::new(lr),
        }
    }

    pub fn steps(&self) -> u64 {
        self.first.step()
    }

    /// Collects gradients from `tape` and updates both sets.
    pub(crate) fn apply(&mut self, tape: &Tape, nets: [(&mut ParamSet, &ParamVars); 2]) -> Result<()> {
        let [(a, av), (b, bv)] = nets;
        for (set, vars, opt) in [(a, av, &mut self.first), (b, bv, &mut self.second)] {
            set.zero_grads();
            set.accumulate_grads(tape, vars);
            adam_step(set, opt)?;
        }
        Ok(())
    }
}

impl Default for Optimizer {
    fn default() -> Self {
        Self::new(DEFAULT_LR)
    }
}

/// Contents of a checkpoint's JSON sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar<C> {
    pub module: String,
    pub config: C,
    pub train_method: Option<String>,
    pub steps: u64,
    pub checksum: u64,
}

/// Weight and sidecar paths of the checkpoint `stem`.
pub fn checkpoint_paths(stem: &Path) -> (PathBuf, PathBuf) {
    let s = stem.as_os_str().to_string_lossy();
    (PathBuf::from(format!("{s}.pnpw")), PathBuf::from(format!("{s}.json")))
}

pub(crate) fn save_checkpoint<C: Serialize>(
    stem: &Path,
    module: &str,
    config: &C,
    nets: [(&str, &ParamSet); 2],
    train_method: Option<String>,
    steps: u64,
) -> Result<()> {
    let mut all = ParamSet::new();
    for (prefix, set) in nets {
        for (name, g) in set.iter() {
            let mut g = g.clone();
            g.set_requires_grad(false);
            all.insert(format!("{prefix}/{name}"), g)?;
        }
    }
    all.quantize_f32();
    let (weights, sidecar) = checkpoint_paths(stem);
    if let Some(dir) = weights.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    all.save(&weights)?;
    let meta = Sidecar {
        module: module.to_string(),
        config,
        train_method,
        steps,
        checksum: all.checksum(),
    };
    fs::write(sidecar, serde_json::to_vec_pretty(&meta)?)?;
    Ok(())
}

pub(crate) fn load_checkpoint<C: DeserializeOwned>(
    stem: &Path,
    module: &str,
    prefixes: [&str; 2],
) -> Result<(Sidecar<C>, [ParamSet; 2])> {
    let (weights, sidecar) = checkpoint_paths(stem);
    let meta: Sidecar<C> = serde_json::from_slice(&fs::read(&sidecar)?)
        .map_err(|e| Error::Format(format!("{}: {e}", sidecar.display())))?;
    if meta.module != module {
        return Err(Error::Format(format!(
            "{} holds a {} checkpoint, expected {module}",
            sidecar.display(),
            meta.module
        )));
    }
    let all = ParamSet::load(&weights)?;
    if all.checksum() != meta.checksum {
        return Err(Error::Format(format!(
            "{} does not match the checksum in its sidecar",
            weights.display()
        )));
    }
    let mut out = [ParamSet::new(), ParamSet::new()];
    for (name, g) in all.iter() {
        let (prefix, rest) = name
            .split_once('/')
            .ok_or_else(|| Error::Format(format!("unprefixed parameter '{name}'")))?;
        let slot = prefixes
            .iter()
            .position(|p| *p == prefix)
            .ok_or_else(|| Error::Format(format!("unexpected parameter '{name}'")))?;
        out[slot].insert(rest, g.clone())?;
    }
    Ok((meta, out))
}

/// Method strings: `discrete[:n]`, `exact[:n]` and `iter[:iterations:rotations:scale]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum MethodString {
    Discrete(Option<usize>),
    Exact(Option<usize>),
    Iterative(Option<(usize, usize, f64)>),
}

impl MethodString {
    pub(crate) fn parse(s: &str) -> Result<Self> {
        let mut parts = s.split(':');
        let head = parts.next().unwrap_or_default();
        let rest: Vec<&str> = parts.collect();
        let count = |rest: &[&str]| -> Result<Option<usize>> {
            match rest {
                [] => Ok(None),
                [n] => n.parse().map(Some).map_err(|_| invalid!("bad count in method '{s}'")),
                _ => Err(invalid!("too many fields in method '{s}'")),
            }
        };
        match head {
            "discrete" => Ok(Self::Discrete(count(&rest)?)),
            "exact" => Ok(Self::Exact(count(&rest)?)),
            "iter" | "iterative" => match rest.as_slice() {
                [] => Ok(Self::Iterative(None)),
                [i, r, k] => {
                    let bad = || invalid!("method '{s}' should read iter:<iterations>:<rotations>:<scale>");
                    Ok(Self::Iterative(Some((
                        i.parse().map_err(|_| bad())?,
                        r.parse().map_err(|_| bad())?,
                        k.parse().map_err(|_| bad())?,
                    ))))
                }
                _ => Err(invalid!(
                    "method '{s}' should read iter:<iterations>:<rotations>:<scale>"
                )),
            },
            _ => Err(invalid!("unknown method '{s}'")),
        }
    }
}

/// Serialises a type through its `Display` and `FromStr` forms.
macro_rules! serde_via_string {
    ($t:ty) => {
        impl Serialize for $t {
            fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
                s.collect_str(self)
            }
        }

        impl<'de> Deserialize<'de> for $t {
            fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                s.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}
pub(crate) use serde_via_string;
