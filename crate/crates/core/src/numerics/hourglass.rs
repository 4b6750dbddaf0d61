//! Fully convolutional encoder–decoder with skip connections.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Grid, Padding, ParamSet, ParamVars, Tape, Var};
use crate::error::{shape_err, Result};

/// Shape of an hourglass network.
///
/// Each stage halves the resolution with a stride-2 convolution and doubles
/// the channel count; the decoder mirrors it with nearest upsampling, a
/// convolution and an additive skip from the matching encoder stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HourglassConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_channels: usize,
    pub stages: usize,
    /// Residual blocks per encoder stage and in the bottleneck.
    pub blocks: usize,
}

impl Default for HourglassConfig {
    fn default() -> Self {
        Self {
            in_channels: 4,
            out_channels: 1,
            base_channels: 32,
            stages: 2,
            blocks: 2,
        }
    }
}

fn he_kernel(rng: &mut impl Rng, k: usize, cin: usize, cout: usize) -> Grid {
    let std = (2.0 / (k * k * cin) as f64).sqrt();
    Grid::from_fn(&[k, k, cin, cout], |_| {
        let z: f64 = rng.sample(StandardNormal);
        z * std
    })
}

impl HourglassConfig {
    pub fn with_channels(self, in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            ..self
        }
    }

    /// Total spatial downsampling factor; inputs must be divisible by it.
    pub fn downsampling(&self) -> usize {
        1 << self.stages
    }

    fn width(&self, stage: usize) -> usize {
        self.base_channels << stage
    }

    /// He-initialised weights, zero biases.
    pub fn init(&self, rng: &mut impl Rng) -> ParamSet {
        let mut p = ParamSet::new();
        let mut conv = |p: &mut ParamSet, name: &str, k: usize, cin: usize, cout: usize| {
            p.insert(format!("{name}.w"), he_kernel(rng, k, cin, cout))
                .expect("unique names");
            p.insert(format!("{name}.b"), Grid::zeros(&[cout]))
                .expect("unique names");
        };
        conv(&mut p, "stem", 3, self.in_channels, self.base_channels);
        for s in 0..self.stages {
            let ch = self.width(s);
            for b in 0..self.blocks {
                conv(&mut p, &format!("enc{s}.res{b}.a"), 3, ch, ch);
                conv(&mut p, &format!("enc{s}.res{b}.b"), 3, ch, ch);
            }
            conv(&mut p, &format!("down{s}"), 3, ch, 2 * ch);
        }
        let deep = self.width(self.stages);
        for b in 0..self.blocks {
            conv(&mut p, &format!("mid.res{b}.a"), 3, deep, deep);
            conv(&mut p, &format!("mid.res{b}.b"), 3, deep, deep);
        }
        for s in (0..self.stages).rev() {
            conv(&mut p, &format!("up{s}"), 3, self.width(s + 1), self.width(s));
        }
        conv(&mut p, "head", 1, self.base_channels, self.out_channels);
        p
    }

    /// Zeroes the output layer so the network starts from an all-zero map.
    pub fn zero_head(params: &mut ParamSet) {
        for name in ["head.w", "head.b"] {
            if let Some(g) = params.get_mut(name) {
                g.values_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    fn conv(tape: &mut Tape, p: &ParamVars, name: &str, x: Var, stride: usize) -> Result<Var> {
        let y = tape.conv2d(x, p.get(&format!("{name}.w"))?, Padding::Same, stride)?;
        tape.add_bias(y, p.get(&format!("{name}.b"))?)
    }

    fn residual(tape: &mut Tape, p: &ParamVars, name: &str, x: Var) -> Result<Var> {
        let y = Self::conv(tape, p, &format!("{name}.a"), x, 1)?;
        let y = tape.relu(y);
        let y = Self::conv(tape, p, &format!("{name}.b"), y, 1)?;
        let y = tape.add(x, y)?;
        Ok(tape.relu(y))
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let f = self.downsampling();
        match *shape {
            [h, w, c] if c == self.in_channels && h % f == 0 && w % f == 0 && h > 0 && w > 0 => Ok(()),
            [_, _, c] if c != self.in_channels => Err(shape_err!(
                "hourglass expects {} input channels, got {:?}",
                self.in_channels,
                shape
            )),
            [h, w, _] => Err(shape_err!(
                "hourglass input {}×{} is not divisible by its downsampling factor {}",
                h,
                w,
                f
            )),
            _ => Err(shape_err!("hourglass input must be h×w×c, got {:?}", shape)),
        }
    }

    /// Records the network on `tape`; output is `h × w × out_channels`.
    pub fn forward(&self, tape: &mut Tape, params: &ParamVars, input: Var) -> Result<Var> {
        self.check_input(tape.value(input).shape())?;
        let x = Self::conv(tape, params, "stem", input, 1)?;
        let mut x = tape.relu(x);
        let mut skips = Vec::with_capacity(self.stages);
        for s in 0..self.stages {
            for b in 0..self.blocks {
                x = Self::residual(tape, params, &format!("enc{s}.res{b}"), x)?;
            }
            skips.push(x);
            x = Self::conv(tape, params, &format!("down{s}"), x, 2)?;
            x = tape.relu(x);
        }
        for b in 0..self.blocks {
            x = Self::residual(tape, params, &format!("mid.res{b}"), x)?;
        }
        for s in (0..self.stages).rev() {
            x = tape.upsample2(x)?;
            x = Self::conv(tape, params, &format!("up{s}"), x, 1)?;
            x = tape.add(x, skips[s])?;
            x = tape.relu(x);
        }
        let w = params.get("head.w")?;
        let y = tape.conv2d(x, w, Padding::Same, 1)?;
        tape.add_bias(y, params.get("head.b")?)
    }
}

/// Evaluates the network on `obs` without recording gradients.
pub fn hourglass_forward(config: &HourglassConfig, params: &ParamSet, obs: &Grid) -> Result<Grid> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, false);
    let x = tape.constant(obs.clone());
    let y = config.forward(&mut tape, &vars, x)?;
    Ok(tape.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> HourglassConfig {
        HourglassConfig {
            in_channels: 2,
            out_channels: 3,
            base_channels: 2,
            stages: 2,
            blocks: 1,
        }
    }

    #[test]
    fn output_aligned_with_input() {
        let cfg = small();
        let params = cfg.init(&mut ChaCha8Rng::seed_from_u64(1));
        let obs = Grid::from_fn(&[8, 12, 2], |i| (i as f64 * 0.37).sin());
        let out = hourglass_forward(&cfg, &params, &obs).unwrap();
        assert_eq!(out.shape(), &[8, 12, 3]);
        let again = hourglass_forward(&cfg, &params, &obs).unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn zero_head_gives_zero_map() {
        let cfg = small();
        let mut params = cfg.init(&mut ChaCha8Rng::seed_from_u64(2));
        HourglassConfig::zero_head(&mut params);
        let obs = Grid::from_fn(&[4, 4, 2], |i| i as f64);
        let out = hourglass_forward(&cfg, &params, &obs).unwrap();
        assert!(out.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_indivisible_extents() {
        let cfg = small();
        let params = cfg.init(&mut ChaCha8Rng::seed_from_u64(3));
        let obs = Grid::zeros(&[6, 8, 2]);
        assert!(hourglass_forward(&cfg, &params, &obs).is_err());
        let obs = Grid::zeros(&[8, 8, 3]);
        assert!(hourglass_forward(&cfg, &params, &obs).is_err());
    }
}
