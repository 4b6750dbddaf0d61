//! Cropping and bilinear patch rotation. Out-of-support reads are zero.

use crate::error::{shape_err, Result};

/// Copies the `size × size` window centred on `(row, col)`; zero outside the image.
pub(crate) fn crop_forward(
    image: &[f64],
    (h, w, d): (usize, usize, usize),
    (row, col): (i64, i64),
    size: usize,
) -> Vec<f64> {
    let half = (size / 2) as i64;
    let mut out = vec![0.0; size * size * d];
    for a in 0..size {
        let y = row - half + a as i64;
        if y < 0 || y >= h as i64 {
            continue;
        }
        for b in 0..size {
            let x = col - half + b as i64;
            if x < 0 || x >= w as i64 {
                continue;
            }
            let src = (y as usize * w + x as usize) * d;
            let dst = (a * size + b) * d;
            out[dst..dst + d].copy_from_slice(&image[src..src + d]);
        }
    }
    out
}

pub(crate) fn crop_backward(
    gout: &[f64],
    (h, w, d): (usize, usize, usize),
    (row, col): (i64, i64),
    size: usize,
    gin: &mut [f64],
) {
    let half = (size / 2) as i64;
    for a in 0..size {
        let y = row - half + a as i64;
        if y < 0 || y >= h as i64 {
            continue;
        }
        for b in 0..size {
            let x = col - half + b as i64;
            if x < 0 || x >= w as i64 {
                continue;
            }
            let dst = (y as usize * w + x as usize) * d;
            let src = (a * size + b) * d;
            for (g, v) in gin[dst..dst + d].iter_mut().zip(&gout[src..src + d]) {
                *g += v;
            }
        }
    }
}

/// One output pixel's bilinear footprint: up to four (source pixel, weight) taps.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct Taps {
    pub idx: [usize; 4],
    pub wt: [f64; 4],
    pub n: u8,
}

/// Bilinear taps at fractional pixel `(r, c)` of an `h × w` raster.
pub(crate) fn bilinear_taps(r: f64, c: f64, h: usize, w: usize) -> Taps {
    let r0 = r.floor();
    let c0 = c.floor();
    let fr = r - r0;
    let fc = c - c0;
    let (r0, c0) = (r0 as i64, c0 as i64);
    let mut t = Taps::default();
    for (dr, wr) in [(0i64, 1.0 - fr), (1, fr)] {
        for (dc, wc) in [(0i64, 1.0 - fc), (1, fc)] {
            let wt = wr * wc;
            let (y, x) = (r0 + dr, c0 + dc);
            if wt == 0.0 || y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
                continue;
            }
            t.idx[t.n as usize] = y as usize * w + x as usize;
            t.wt[t.n as usize] = wt;
            t.n += 1;
        }
    }
    t
}

/// Sampling table rotating an `h × w` raster counter-clockwise (as displayed,
/// rows growing downward) by `angle` about its centre pixel.
///
/// Output offset `(dc, dr)` from the centre reads the source at
/// `(dc·cos − dr·sin, dc·sin + dr·cos)`.
pub(crate) fn rotation_taps(h: usize, w: usize, angle: f64) -> Vec<Taps> {
    let (s, c) = angle.sin_cos();
    let (cr, cc) = ((h / 2) as f64, (w / 2) as f64);
    let mut taps = Vec::with_capacity(h * w);
    for r in 0..h {
        let dr = r as f64 - cr;
        for col in 0..w {
            let dc = col as f64 - cc;
            let sc = cc + dc * c - dr * s;
            let sr = cr + dc * s + dr * c;
            taps.push(bilinear_taps(sr, sc, h, w));
        }
    }
    taps
}

pub(crate) fn resample_forward(src: &[f64], d: usize, taps: &[Taps], out: &mut [f64]) {
    for (p, t) in taps.iter().enumerate() {
        let o = &mut out[p * d..(p + 1) * d];
        o.iter_mut().for_each(|v| *v = 0.0);
        for j in 0..t.n as usize {
            let s = &src[t.idx[j] * d..(t.idx[j] + 1) * d];
            let wt = t.wt[j];
            for (ov, sv) in o.iter_mut().zip(s) {
                *ov += wt * sv;
            }
        }
    }
}

pub(crate) fn resample_backward(gout: &[f64], d: usize, taps: &[Taps], gsrc: &mut [f64]) {
    for (p, t) in taps.iter().enumerate() {
        let g = &gout[p * d..(p + 1) * d];
        for j in 0..t.n as usize {
            let wt = t.wt[j];
            for (sv, gv) in gsrc[t.idx[j] * d..(t.idx[j] + 1) * d].iter_mut().zip(g) {
                *sv += wt * gv;
            }
        }
    }
}

/// Validates a patch shape for rotation, returning `(h, w, d)`.
pub(crate) fn patch_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [h, w, d] if h > 0 && w > 0 => Ok((h, w, d)),
        [h, w] if h > 0 && w > 0 => Ok((h, w, 1)),
        _ => Err(shape_err!("rotation expects an h×w×d patch, got {:?}", shape)),
    }
}
