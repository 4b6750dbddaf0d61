//! Windowed cross-correlation of a stack of query patches against a key map.
//!
//! `score[u, v, i] = Σ_{a, b, ch} query[i, a, b, ch] · key[u − r + a, v − r + b, ch]`
//! with `r = c / 2` and zero padding outside the key. Small problems use
//! direct loops; large ones go through 2-D FFTs, which pack pairs of real
//! transforms into one complex transform.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{shape_err, Result};

type C64 = Complex<f64>;

/// Multiply-accumulate count above which the FFT path is used.
const FFT_THRESHOLD: usize = 4_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct CorrGeom {
    pub n: usize,
    pub c: usize,
    pub d: usize,
    pub h: usize,
    pub w: usize,
}

impl CorrGeom {
    pub fn new(query: &[usize], key: &[usize]) -> Result<Self> {
        let (n, c, c2, d) = match *query {
            [n, a, b, d] => (n, a, b, d),
            [a, b, d] => (1, a, b, d),
            _ => return Err(shape_err!("query must be n×c×c×d, got {:?}", query)),
        };
        let (h, w, kd) = match *key {
            [h, w, d] => (h, w, d),
            _ => return Err(shape_err!("key must be h×w×d, got {:?}", key)),
        };
        if c != c2 || c % 2 == 0 {
            return Err(shape_err!("query window must be square and odd, got {:?}", query));
        }
        if d != kd {
            return Err(shape_err!(
                "channel mismatch: query {:?} has {} channels, key {:?} has {}",
                query,
                d,
                key,
                kd
            ));
        }
        if n == 0 {
            return Err(shape_err!("query stack is empty"));
        }
        Ok(Self { n, c, d, h, w })
    }

    pub fn out_len(&self) -> usize {
        self.h * self.w * self.n
    }

    fn work(&self) -> usize {
        self.n * self.h * self.w * self.c * self.c * self.d
    }

    pub fn prefers_fft(&self) -> bool {
        self.work() > FFT_THRESHOLD
    }
}

pub(crate) fn correlate_direct(query: &[f64], key: &[f64], g: &CorrGeom) -> Vec<f64> {
    let CorrGeom { n, c, d, h, w } = *g;
    let r = (c / 2) as isize;
    let mut out = vec![0.0; g.out_len()];
    for i in 0..n {
        for a in 0..c {
            for b in 0..c {
                let q = &query[((i * c + a) * c + b) * d..((i * c + a) * c + b + 1) * d];
                if q.iter().all(|&x| x == 0.0) {
                    continue;
                }
                for u in 0..h {
                    let y = u as isize - r + a as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    for v in 0..w {
                        let x = v as isize - r + b as isize;
                        if x < 0 || x >= w as isize {
                            continue;
                        }
                        let kv = &key[(y as usize * w + x as usize) * d..][..d];
                        let dot: f64 = q.iter().zip(kv).map(|(p, q)| p * q).sum();
                        out[(u * w + v) * n + i] += dot;
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn correlate_direct_backward(
    query: &[f64],
    key: &[f64],
    g: &CorrGeom,
    gout: &[f64],
    mut gq: Option<&mut [f64]>,
    mut gk: Option<&mut [f64]>,
) {
    let CorrGeom { n, c, d, h, w } = *g;
    let r = (c / 2) as isize;
    for i in 0..n {
        for a in 0..c {
            for b in 0..c {
                let qo = ((i * c + a) * c + b) * d;
                for u in 0..h {
                    let y = u as isize - r + a as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    for v in 0..w {
                        let x = v as isize - r + b as isize;
                        if x < 0 || x >= w as isize {
                            continue;
                        }
                        let go = gout[(u * w + v) * n + i];
                        if go == 0.0 {
                            continue;
                        }
                        let ko = (y as usize * w + x as usize) * d;
                        if let Some(gq) = gq.as_deref_mut() {
                            for ch in 0..d {
                                gq[qo + ch] += go * key[ko + ch];
                            }
                        }
                        if let Some(gk) = gk.as_deref_mut() {
                            for ch in 0..d {
                                gk[ko + ch] += go * query[qo + ch];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Smallest size ≥ `n` with no prime factor above 5.
fn smooth_size(n: usize) -> usize {
    let mut m = n.max(1);
    loop {
        let mut x = m;
        for p in [2, 3, 5] {
            while x.is_multiple_of(p) {
                x /= p;
            }
        }
        if x == 1 {
            return m;
        }
        m += 1;
    }
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
    static PLANS: RefCell<HashMap<(usize, usize), Fft2>> = RefCell::new(HashMap::new());
}

/// 2-D FFT over a `rows × cols` raster. Spectra are stored transposed
/// (`cols × rows`); every pointwise product happens in that layout.
struct Fft2 {
    rows: usize,
    cols: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
    scratch: Vec<C64>,
    raster: Vec<C64>,
}

impl Fft2 {
    fn new(rows: usize, cols: usize) -> Self {
        let (row_fwd, row_inv, col_fwd, col_inv) = PLANNER.with(|p| {
            let mut p = p.borrow_mut();
            (
                p.plan_fft_forward(cols),
                p.plan_fft_inverse(cols),
                p.plan_fft_forward(rows),
                p.plan_fft_inverse(rows),
            )
        });
        let scratch_len = [&row_fwd, &row_inv, &col_fwd, &col_inv]
            .iter()
            .map(|f| f.get_inplace_scratch_len())
            .max()
            .unwrap_or(0);
        Self {
            rows,
            cols,
            row_fwd,
            row_inv,
            col_fwd,
            col_inv,
            scratch: vec![C64::default(); scratch_len],
            raster: vec![C64::default(); rows * cols],
        }
    }

    /// Runs `f` with a cached transform of the given size.
    fn with<R>(rows: usize, cols: usize, f: impl FnOnce(&mut Fft2) -> R) -> R {
        let mut fft = PLANS
            .with(|p| p.borrow_mut().remove(&(rows, cols)))
            .unwrap_or_else(|| Fft2::new(rows, cols));
        let out = f(&mut fft);
        PLANS.with(|p| p.borrow_mut().insert((rows, cols), fft));
        out
    }

    fn len(&self) -> usize {
        self.rows * self.cols
    }

    /// Zeroes raster rows `lo..hi` ahead of a fill.
    fn clear_rows(&mut self, lo: usize, hi: usize) {
        self.raster[lo * self.cols..hi * self.cols].fill(C64::default());
    }

    /// Transforms the raster, whose rows outside `lo..hi` must be zero
    /// (they are never read), into `spec`.
    fn forward(&mut self, lo: usize, hi: usize, spec: &mut [C64]) {
        let (rows, cols) = (self.rows, self.cols);
        let active = &mut self.raster[lo * cols..hi * cols];
        self.row_fwd.process_with_scratch(active, &mut self.scratch);
        for x in 0..cols {
            let col = &mut spec[x * rows..(x + 1) * rows];
            col[..lo].fill(C64::default());
            col[hi..].fill(C64::default());
        }
        const B: usize = 16;
        for y0 in (lo..hi).step_by(B) {
            for x0 in (0..cols).step_by(B) {
                for y in y0..(y0 + B).min(hi) {
                    let src = &self.raster[y * cols..];
                    for x in x0..(x0 + B).min(cols) {
                        spec[x * rows + y] = src[x];
                    }
                }
            }
        }
        self.col_fwd.process_with_scratch(spec, &mut self.scratch);
    }

    /// Unnormalised inverse of `spec` (destroyed); only raster rows `lo..hi`
    /// are produced, in `self.raster`.
    fn inverse(&mut self, spec: &mut [C64], lo: usize, hi: usize) {
        let (rows, cols) = (self.rows, self.cols);
        self.col_inv.process_with_scratch(spec, &mut self.scratch);
        const B: usize = 16;
        for y0 in (lo..hi).step_by(B) {
            for x0 in (0..cols).step_by(B) {
                for y in y0..(y0 + B).min(hi) {
                    let dst = &mut self.raster[y * cols..];
                    for x in x0..(x0 + B).min(cols) {
                        dst[x] = spec[x * rows + y];
                    }
                }
            }
        }
        self.row_inv
            .process_with_scratch(&mut self.raster[lo * cols..hi * cols], &mut self.scratch);
    }

    /// Splits the spectrum of `a + i·b` (both real) into the spectra of `a`
    /// and `b`.
    fn unpack(&self, packed: &[C64], a: &mut [C64], b: &mut [C64]) {
        let (rows, cols) = (self.rows, self.cols);
        for kx in 0..cols {
            let mx = (cols - kx) % cols;
            for ky in 0..rows {
                let my = (rows - ky) % rows;
                let z = packed[kx * rows + ky];
                let zm = packed[mx * rows + my].conj();
                let s = (z + zm) * 0.5;
                let t = (z - zm) * 0.5;
                a[kx * rows + ky] = s;
                b[kx * rows + ky] = C64::new(t.im, -t.re);
            }
        }
    }
}

/// Key spectra cached by the forward pass for the backward pass.
pub(crate) struct FftCorrelation {
    geom: CorrGeom,
    rows: usize,
    cols: usize,
    key_spec: Vec<C64>,
}

impl std::fmt::Debug for FftCorrelation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FftCorrelation")
            .field("geom", &self.geom)
            .field("rows", &self.rows)
            .field("cols", &self.cols)
            .finish()
    }
}

// Buffer layout: the key sits at offset (r, r), queries and output-side
// gradients at (0, 0). Circular correlation at lag (u, v) is then exactly
// score[u, v], because the transform size leaves room for every window.

/// Fills the raster with query channel `ch` of slices `i` (real part) and
/// `i + 1` (imaginary part, when present).
fn fill_query(fft: &mut Fft2, query: &[f64], g: &CorrGeom, i: usize, ch: usize) {
    let CorrGeom { n, c, d, .. } = *g;
    let cols = fft.cols;
    fft.clear_rows(0, c);
    for a in 0..c {
        for b in 0..c {
            let base = (a * c + b) * d + ch;
            let re = query[i * c * c * d + base];
            let im = if i + 1 < n {
                query[(i + 1) * c * c * d + base]
            } else {
                0.0
            };
            fft.raster[a * cols + b] = C64::new(re, im);
        }
    }
}

/// Spectra of query channel `ch` for slices `i` and `i + 1`.
fn query_spectra(fft: &mut Fft2, query: &[f64], g: &CorrGeom, i: usize, ch: usize, bufs: &mut SpecBufs) {
    fill_query(fft, query, g, i, ch);
    fft.forward(0, g.c, &mut bufs.packed);
    fft.unpack(&bufs.packed, &mut bufs.a, &mut bufs.b);
}

struct SpecBufs {
    packed: Vec<C64>,
    a: Vec<C64>,
    b: Vec<C64>,
}

impl SpecBufs {
    fn new(len: usize) -> Self {
        Self {
            packed: vec![C64::default(); len],
            a: vec![C64::default(); len],
            b: vec![C64::default(); len],
        }
    }
}

impl FftCorrelation {
    pub fn forward(query: &[f64], key: &[f64], g: &CorrGeom) -> (Vec<f64>, Self) {
        let CorrGeom { n, c, d, h, w } = *g;
        let rows = smooth_size(h + c - 1);
        let cols = smooth_size(w + c - 1);
        let r = c / 2;
        let mut out = vec![0.0; g.out_len()];
        let key_spec = Fft2::with(rows, cols, |fft| {
            let len = fft.len();
            let mut key_spec = vec![C64::default(); d * len];
            let mut bufs = SpecBufs::new(len);
            for ch in (0..d).step_by(2) {
                fft.clear_rows(r, r + h);
                for y in 0..h {
                    for x in 0..w {
                        let re = key[(y * w + x) * d + ch];
                        let im = if ch + 1 < d { key[(y * w + x) * d + ch + 1] } else { 0.0 };
                        fft.raster[(y + r) * cols + x + r] = C64::new(re, im);
                    }
                }
                fft.forward(r, r + h, &mut bufs.packed);
                fft.unpack(&bufs.packed, &mut bufs.a, &mut bufs.b);
                key_spec[ch * len..(ch + 1) * len].copy_from_slice(&bufs.a);
                if ch + 1 < d {
                    key_spec[(ch + 1) * len..(ch + 2) * len].copy_from_slice(&bufs.b);
                }
            }
            let mut acc = vec![C64::default(); len];
            for i in (0..n).step_by(2) {
                acc.fill(C64::default());
                for ch in 0..d {
                    query_spectra(fft, query, g, i, ch, &mut bufs);
                    let ks = &key_spec[ch * len..(ch + 1) * len];
                    // acc = K·conj(Qa) + i·K·conj(Qb)
                    for (((z, k), qa), qb) in acc.iter_mut().zip(ks).zip(&bufs.a).zip(&bufs.b) {
                        let sa = k * qa.conj();
                        let sb = k * qb.conj();
                        *z += C64::new(sa.re - sb.im, sa.im + sb.re);
                    }
                }
                fft.inverse(&mut acc, 0, h);
                let scale = 1.0 / len as f64;
                for u in 0..h {
                    let row = &fft.raster[u * cols..u * cols + w];
                    for (v, z) in row.iter().enumerate() {
                        out[(u * w + v) * n + i] = z.re * scale;
                        if i + 1 < n {
                            out[(u * w + v) * n + i + 1] = z.im * scale;
                        }
                    }
                }
            }
            key_spec
        });
        (
            out,
            Self {
                geom: *g,
                rows,
                cols,
                key_spec,
            },
        )
    }

    pub fn backward(&self, query: &[f64], gout: &[f64], mut gq: Option<&mut [f64]>, gk: Option<&mut [f64]>) {
        let g = &self.geom;
        let CorrGeom { n, c, d, h, w } = *g;
        let (rows, cols) = (self.rows, self.cols);
        let r = c / 2;
        let want_k = gk.is_some();
        Fft2::with(rows, cols, |fft| {
            let len = fft.len();
            let scale = 1.0 / len as f64;
            let mut bufs = SpecBufs::new(len);
            let mut ga = vec![C64::default(); len];
            let mut gb = vec![C64::default(); len];
            let mut key_acc = if want_k {
                vec![C64::default(); d * len]
            } else {
                Vec::new()
            };
            let mut prod = vec![C64::default(); len];
            for i in (0..n).step_by(2) {
                let pair = i + 1 < n;
                fft.clear_rows(0, h);
                for u in 0..h {
                    for v in 0..w {
                        let re = gout[(u * w + v) * n + i];
                        let im = if pair { gout[(u * w + v) * n + i + 1] } else { 0.0 };
                        fft.raster[u * cols + v] = C64::new(re, im);
                    }
                }
                fft.forward(0, h, &mut bufs.packed);
                fft.unpack(&bufs.packed, &mut ga, &mut gb);
                for ch in 0..d {
                    let ks = &self.key_spec[ch * len..(ch + 1) * len];
                    if let Some(gq) = gq.as_deref_mut() {
                        // K·conj(Ga) + i·K·conj(Gb)
                        for (((z, k), a), b) in prod.iter_mut().zip(ks).zip(&ga).zip(&gb) {
                            let sa = k * a.conj();
                            let sb = k * b.conj();
                            *z = C64::new(sa.re - sb.im, sa.im + sb.re);
                        }
                        fft.inverse(&mut prod, 0, c);
                        for a in 0..c {
                            for b in 0..c {
                                let z = fft.raster[a * cols + b];
                                let base = (a * c + b) * d + ch;
                                gq[i * c * c * d + base] += z.re * scale;
                                if pair {
                                    gq[(i + 1) * c * c * d + base] += z.im * scale;
                                }
                            }
                        }
                    }
                    if want_k {
                        query_spectra(fft, query, g, i, ch, &mut bufs);
                        let acc = &mut key_acc[ch * len..(ch + 1) * len];
                        for ((((z, a), b), qa), qb) in acc.iter_mut().zip(&ga).zip(&gb).zip(&bufs.a).zip(&bufs.b) {
                            *z += a * qa + b * qb;
                        }
                    }
                }
            }
            if let Some(gk) = gk {
                for ch in (0..d).step_by(2) {
                    let pair = ch + 1 < d;
                    prod.copy_from_slice(&key_acc[ch * len..(ch + 1) * len]);
                    if pair {
                        for (z, o) in prod.iter_mut().zip(&key_acc[(ch + 1) * len..(ch + 2) * len]) {
                            *z += C64::new(-o.im, o.re);
                        }
                    }
                    fft.inverse(&mut prod, r, r + h);
                    for y in 0..h {
                        let row = &fft.raster[(y + r) * cols + r..];
                        for x in 0..w {
                            gk[(y * w + x) * d + ch] += row[x].re * scale;
                            if pair {
                                gk[(y * w + x) * d + ch + 1] += row[x].im * scale;
                            }
                        }
                    }
                }
            }
        });
    }
}
