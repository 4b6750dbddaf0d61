//! 2-D convolution kernels (channel-last, im2col + GEMM).

use crate::error::{invalid, shape_err, Result};

/// Spatial padding mode for [`conv2d`](super::Tape::conv2d).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero-pad by `k / 2` so stride-1 output keeps the input extent.
    Same,
    /// No padding; output shrinks by `k - 1`.
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub k: usize,
    pub cout: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], kernel: &[usize], padding: Padding, stride: usize) -> Result<Self> {
        let (h, w, cin) = match *input {
            [h, w, c] => (h, w, c),
            _ => return Err(shape_err!("conv2d input must be h×w×c, got {:?}", input)),
        };
        let (k, k2, kc, cout) = match *kernel {
            [a, b, c, d] => (a, b, c, d),
            _ => return Err(shape_err!("conv2d kernel must be k×k×cin×cout, got {:?}", kernel)),
        };
        if k != k2 || k % 2 == 0 {
            return Err(shape_err!(
                "conv2d kernel must be square with odd extent, got {:?}",
                kernel
            ));
        }
        if kc != cin {
            return Err(shape_err!(
                "conv2d channel mismatch: input {:?} has {} channels, kernel {:?} expects {}",
                input,
                cin,
                kernel,
                kc
            ));
        }
        if stride == 0 {
            return Err(invalid!("conv2d stride must be positive"));
        }
        let pad = match padding {
            Padding::Same => k / 2,
            Padding::Valid => 0,
        };
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(shape_err!("conv2d input {:?} smaller than kernel {:?}", input, kernel));
        }
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        Ok(Self {
            h,
            w,
            cin,
            k,
            cout,
            stride,
            pad,
            oh,
            ow,
        })
    }

    fn rows(&self) -> usize {
        self.oh * self.ow
    }

    fn depth(&self) -> usize {
        self.k * self.k * self.cin
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col(input: &[f64], g: &ConvGeom) -> Vec<f64> {
    let kk = g.depth();
    let mut cols = vec![0.0; g.rows() * kk];
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let row = &mut cols[(oy * g.ow + ox) * kk..(oy * g.ow + ox + 1) * kk];
            for ky in 0..g.k {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.k {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let src = (iy as usize * g.w + ix as usize) * g.cin;
                    let dst = (ky * g.k + kx) * g.cin;
                    row[dst..dst + g.cin].copy_from_slice(&input[src..src + g.cin]);
                }
            }
        }
    }
    cols
}

fn col2im_add(cols: &[f64], g: &ConvGeom, out: &mut [f64]) {
    let kk = g.depth();
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let row = &cols[(oy * g.ow + ox) * kk..(oy * g.ow + ox + 1) * kk];
            for ky in 0..g.k {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.k {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let dst = (iy as usize * g.w + ix as usize) * g.cin;
                    let src = (ky * g.k + kx) * g.cin;
                    for (o, v) in out[dst..dst + g.cin].iter_mut().zip(&row[src..src + g.cin]) {
                        *o += v;
                    }
                }
            }
        }
    }
}

/// `c (m×n) = alpha · a (m×k) · b (k×n) + beta · c` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    debug_assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    debug_assert!(c.len() >= m * n);
    // SAFETY: strides and extents are checked above against the slice lengths.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn conv2d_forward(input: &[f64], kernel: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (m, kk, n) = (g.rows(), g.depth(), g.cout);
    let mut out = vec![0.0; m * n];
    if g.is_pointwise() {
        gemm(m, kk, n, input, (kk, 1), kernel, (n, 1), 0.0, &mut out);
    } else {
        let cols = im2col(input, g);
        gemm(m, kk, n, &cols, (kk, 1), kernel, (n, 1), 0.0, &mut out);
    }
    out
}

/// Accumulates input and/or kernel gradients for upstream gradient `gout`.
pub(crate) fn conv2d_backward(
    input: &[f64],
    kernel: &[f64],
    g: &ConvGeom,
    gout: &[f64],
    gin: Option<&mut [f64]>,
    gk: Option<&mut [f64]>,
) {
    let (m, kk, n) = (g.rows(), g.depth(), g.cout);
    if let Some(gk) = gk {
        if g.is_pointwise() {
            gemm(kk, m, n, input, (1, kk), gout, (n, 1), 1.0, gk);
        } else {
            let cols = im2col(input, g);
            gemm(kk, m, n, &cols, (1, kk), gout, (n, 1), 1.0, gk);
        }
    }
    if let Some(gin) = gin {
        if g.is_pointwise() {
            gemm(m, n, kk, gout, (n, 1), kernel, (1, n), 1.0, gin);
        } else {
            let mut gcols = vec![0.0; m * kk];
            gemm(m, n, kk, gout, (n, 1), kernel, (1, n), 0.0, &mut gcols);
            col2im_add(&gcols, g, gin);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(input: &[f64], kernel: &[f64], g: &ConvGeom) -> Vec<f64> {
        let mut out = vec![0.0; g.oh * g.ow * g.cout];
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                for co in 0..g.cout {
                    let mut acc = 0.0;
                    for ky in 0..g.k {
                        for kx in 0..g.k {
                            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                continue;
                            }
                            for ci in 0..g.cin {
                                acc += input[(iy as usize * g.w + ix as usize) * g.cin + ci]
                                    * kernel[((ky * g.k + kx) * g.cin + ci) * g.cout + co];
                            }
                        }
                    }
                    out[(oy * g.ow + ox) * g.cout + co] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn matches_naive_loops_for_strides_and_paddings() {
        let input: Vec<f64> = (0..7 * 6 * 2).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let kernel: Vec<f64> = (0..3 * 3 * 2 * 3).map(|i| ((i * 13) % 7) as f64 * 0.5 - 1.0).collect();
        for (pad, stride) in [(Padding::Same, 1), (Padding::Valid, 1), (Padding::Same, 2)] {
            let g = ConvGeom::new(&[7, 6, 2], &[3, 3, 2, 3], pad, stride).unwrap();
            let fast = conv2d_forward(&input, &kernel, &g);
            assert_eq!(fast.len(), g.oh * g.ow * 3);
            let slow = naive(&input, &kernel, &g);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_even_or_mismatched_kernels() {
        assert!(ConvGeom::new(&[5, 5, 1], &[2, 2, 1, 1], Padding::Same, 1).is_err());
        assert!(ConvGeom::new(&[5, 5, 2], &[3, 3, 1, 1], Padding::Same, 1).is_err());
        assert!(ConvGeom::new(&[5, 5], &[3, 3, 1, 1], Padding::Same, 1).is_err());
    }
}
