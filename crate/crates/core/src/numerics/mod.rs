//! Minimal reverse-mode differentiable tensor engine.
//!
//! Everything the attention and transport modules train through lives here:
//! convolutions, zero-filled crops, bilinear patch rotation, windowed
//! cross-correlation, cross-entropy and an adaptive-moment optimizer. Values
//! are `f64` in memory; checkpoints store 32-bit floats.
//!
//! Grids are row-major and channel-last. Pixel `(u, v)` is (row, column) with
//! rows growing downward. A positive rotation angle turns content
//! counter-clockwise as displayed, which is counter-clockwise in the world
//! frame once the row flip is taken into account.

mod conv;
mod correlate;
mod grid;
mod hourglass;
mod optim;
mod params;
mod tape;
mod warp;

pub use conv::Padding;
pub use grid::Grid;
pub use hourglass::{hourglass_forward, HourglassConfig};
pub use optim::{adam_step, OptState};
pub use params::{ParamSet, ParamVars};
pub use tape::{Tape, Var};

pub(crate) use warp::bilinear_taps;

use crate::error::{invalid, shape_err, Error, Result};

/// Placement scores over position × rotation, `h × w × n`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVolume(Grid);

impl ScoreVolume {
    pub fn new(grid: Grid) -> Result<Self> {
        if grid.rank() != 3 || grid.is_empty() {
            return Err(shape_err!(
                "score volume must be a non-empty h×w×n grid, got {:?}",
                grid.shape()
            ));
        }
        Ok(Self(grid))
    }

    pub fn from_fn(h: usize, w: usize, n: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let grid = Grid::from_fn(&[h, w, n], |i| f(i / (w * n), (i / n) % w, i % n));
        Self(grid)
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.0.shape();
        (s[0], s[1], s[2])
    }

    pub fn at(&self, u: usize, v: usize, r: usize) -> f64 {
        self.0.at(&[u, v, r])
    }

    pub fn grid(&self) -> &Grid {
        &self.0
    }

    pub fn into_grid(self) -> Grid {
        self.0
    }
}

/// Location and value of the maximum of a score volume.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VolumeMax {
    pub u: usize,
    pub v: usize,
    pub r: usize,
    pub score: f64,
}

/// Global maximum; ties go to the smallest row-major `(u, v, r)` index.
pub fn argmax3(volume: &ScoreVolume) -> Result<VolumeMax> {
    let (_, w, n) = volume.dims();
    let (best, score) = argmax_flat(volume.grid().values())?;
    Ok(VolumeMax {
        u: best / (w * n),
        v: (best / n) % w,
        r: best % n,
        score,
    })
}

/// Index of the first maximal entry. NaNs are rejected.
pub fn argmax_flat(values: &[f64]) -> Result<(usize, f64)> {
    if values.is_empty() {
        return Err(invalid!("argmax of an empty set"));
    }
    let mut best = 0;
    let mut score = f64::NEG_INFINITY;
    for (i, &v) in values.iter().enumerate() {
        if v.is_nan() {
            return Err(Error::Numeric(format!("NaN score at flat index {i}")));
        }
        if v > score || i == 0 {
            best = i;
            score = v;
        }
    }
    Ok((best, score))
}

fn run_unary(input: &Grid, f: impl FnOnce(&mut Tape, Var) -> Result<Var>) -> Result<Grid> {
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let y = f(&mut tape, x)?;
    Ok(tape.value(y).clone())
}

/// Convolution of an `h × w × cin` input with a `k × k × cin × cout` kernel.
pub fn conv2d(input: &Grid, kernel: &Grid, padding: Padding) -> Result<Grid> {
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let k = tape.constant(kernel.clone());
    let y = tape.conv2d(x, k, padding, 1)?;
    Ok(tape.value(y).clone())
}

/// `size × size` window centred on pixel `(u, v)`; zero outside the image.
pub fn crop(image: &Grid, center: (i64, i64), size: usize) -> Result<Grid> {
    run_unary(image, |t, x| t.crop(x, center, size))
}

/// Bilinear rotation of a patch about its centre pixel.
pub fn rotate_patch(patch: &Grid, angle: f64) -> Result<Grid> {
    let shape = patch.shape().to_vec();
    let stacked = run_unary(patch, |t, x| t.rot_stack(x, &[angle]))?;
    stacked.reshaped(&shape)
}

/// `n` rotated copies of a patch, `n × c × c × d`.
pub fn rot_stack(patch: &Grid, angles: &[f64]) -> Result<Grid> {
    run_unary(patch, |t, x| t.rot_stack(x, angles))
}

/// Correlates each query slice with the zero-padded key at every position.
pub fn cross_correlate(query: &Grid, key: &Grid) -> Result<ScoreVolume> {
    let mut tape = Tape::new();
    let q = tape.constant(query.clone());
    let k = tape.constant(key.clone());
    let y = tape.cross_correlate(q, k)?;
    ScoreVolume::new(tape.value(y).clone())
}

/// Cross-entropy loss of `logits` against `target` and its gradient
/// (`softmax − one_hot`).
pub fn cross_entropy(logits: &Grid, target: usize) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let x = tape.leaf(logits.clone());
    let loss = tape.cross_entropy(x, target)?;
    tape.backward(loss)?;
    let grad = tape.grad(x).map(<[f64]>::to_vec).unwrap_or_default();
    Ok((tape.value(loss).values()[0], grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_pointwise_kernel() {
        let input = Grid::from_fn(&[4, 5, 3], |i| i as f64 * 0.5 - 3.0);
        let kernel = Grid::from_fn(&[1, 1, 3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let out = conv2d(&input, &kernel, Padding::Same).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn ones_kernel_counts_overlap() {
        let input = Grid::filled(&[5, 5, 1], 1.0);
        let kernel = Grid::filled(&[3, 3, 1, 1], 1.0);
        let out = conv2d(&input, &kernel, Padding::Same).unwrap();
        assert_eq!(out.at(&[2, 2, 0]), 9.0);
        assert_eq!(out.at(&[0, 0, 0]), 4.0);
        assert_eq!(out.at(&[4, 4, 0]), 4.0);
        assert_eq!(out.at(&[0, 2, 0]), 6.0);
        let valid = conv2d(&input, &kernel, Padding::Valid).unwrap();
        assert_eq!(valid.shape(), &[3, 3, 1]);
    }

    #[test]
    fn conv_shape_mismatch_reports_shapes() {
        let err = conv2d(&Grid::zeros(&[4, 4, 2]), &Grid::zeros(&[3, 3, 3, 1]), Padding::Same)
            .unwrap_err()
            .to_string();
        assert!(err.contains("[4, 4, 2]") && err.contains("[3, 3, 3, 1]"), "{err}");
    }

    #[test]
    fn crop_whole_image_and_corner() {
        let img = Grid::from_fn(&[5, 5, 2], |i| i as f64 + 1.0);
        assert_eq!(crop(&img, (2, 2), 5).unwrap(), img);
        let c = crop(&img, (0, 0), 3).unwrap();
        assert_eq!(c.shape(), &[3, 3, 2]);
        let zero_cells = (0..3)
            .flat_map(|a| (0..3).map(move |b| (a, b)))
            .filter(|&(a, b)| c.at(&[a, b, 0]) == 0.0 && c.at(&[a, b, 1]) == 0.0)
            .count();
        assert_eq!(zero_cells, 5);
        assert_eq!(c.at(&[1, 1, 0]), img.at(&[0, 0, 0]));
        assert!(crop(&img, (2, 2), 4).is_err());
    }

    #[test]
    fn rotation_zero_is_bit_exact_and_pi_is_involution() {
        let patch = Grid::from_fn(&[7, 7, 2], |i| ((i * 31) % 17) as f64 / 3.0 - 2.0);
        assert_eq!(rotate_patch(&patch, 0.0).unwrap(), patch);
        let twice = rotate_patch(
            &rotate_patch(&patch, std::f64::consts::PI).unwrap(),
            std::f64::consts::PI,
        )
        .unwrap();
        for a in 1..6 {
            for b in 1..6 {
                for ch in 0..2 {
                    assert!((twice.at(&[a, b, ch]) - patch.at(&[a, b, ch])).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn rot_stack_counts() {
        let patch = Grid::filled(&[5, 5, 1], 1.0);
        let angles: Vec<f64> = (0..36).map(|i| (i as f64 * 10.0).to_radians()).collect();
        assert_eq!(rot_stack(&patch, &angles).unwrap().shape(), &[36, 5, 5, 1]);
        let one = rot_stack(&patch, &[0.0]).unwrap();
        assert_eq!(one.values(), patch.values());
        assert!(rot_stack(&patch, &[]).is_err());
    }

    #[test]
    fn correlation_degenerate_windows() {
        let key = Grid::from_fn(&[4, 6, 3], |i| (i as f64).cos());
        let zero = Grid::zeros(&[1, 3, 3, 3]);
        assert!(cross_correlate(&zero, &key)
            .unwrap()
            .grid()
            .values()
            .iter()
            .all(|&v| v == 0.0));
        let ones = Grid::filled(&[1, 1, 1, 3], 1.0);
        let vol = cross_correlate(&ones, &key).unwrap();
        for u in 0..4 {
            for v in 0..6 {
                let s: f64 = (0..3).map(|c| key.at(&[u, v, c])).sum();
                assert!((vol.at(u, v, 0) - s).abs() < 1e-12);
            }
        }
        assert!(cross_correlate(&Grid::zeros(&[1, 3, 3, 2]), &key).is_err());
    }

    #[test]
    fn argmax_ties_and_nan() {
        let single = ScoreVolume::new(Grid::scalar(1.0).reshaped(&[1, 1, 1]).unwrap()).unwrap();
        let m = argmax3(&single).unwrap();
        assert_eq!((m.u, m.v, m.r), (0, 0, 0));
        let mut vol = Grid::zeros(&[4, 3, 2]);
        vol.set(&[1, 2, 0], 5.0);
        vol.set(&[3, 0, 1], 5.0);
        let m = argmax3(&ScoreVolume::new(vol.clone()).unwrap()).unwrap();
        assert_eq!((m.u, m.v, m.r), (1, 2, 0));
        vol.set(&[0, 0, 1], f64::NAN);
        assert!(argmax3(&ScoreVolume::new(vol).unwrap()).is_err());
    }

    #[test]
    fn cross_entropy_values() {
        let (loss, grad) = cross_entropy(&Grid::zeros(&[18]), 3).unwrap();
        assert!((loss - 18f64.ln()).abs() < 1e-12);
        assert!((loss - 2.8904).abs() < 1e-4);
        assert!((grad[3] - (1.0 / 18.0 - 1.0)).abs() < 1e-12);
        let mut l = Grid::zeros(&[5]);
        l.set(&[2], 1e3);
        let (loss, _) = cross_entropy(&l, 2).unwrap();
        assert!(loss < 1e-12);
        assert!(cross_entropy(&Grid::zeros(&[5]), 5).is_err());
    }
}
