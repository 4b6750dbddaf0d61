//! Reverse-mode differentiation over an eagerly evaluated operation tape.

use super::conv::{conv2d_backward, conv2d_forward, ConvGeom, Padding};
use super::correlate::{correlate_direct, correlate_direct_backward, CorrGeom, FftCorrelation};
use super::warp::{crop_backward, crop_forward, patch_dims, resample_backward, resample_forward, rotation_taps};
use super::Grid;
use crate::error::{invalid, shape_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeom,
    },
    AddBias {
        input: Var,
        bias: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Relu {
        input: Var,
    },
    Upsample2 {
        input: Var,
    },
    Crop {
        input: Var,
        center: (i64, i64),
        size: usize,
    },
    Window {
        input: Var,
        origin: (i64, i64),
        out_hw: (usize, usize),
    },
    RotStack {
        input: Var,
        angles: Vec<f64>,
    },
    Stack {
        inputs: Vec<Var>,
    },
    Slice {
        input: Var,
        index: usize,
    },
    Channels {
        input: Var,
        keep: usize,
    },
    Correlate {
        query: Var,
        key: Var,
        geom: CorrGeom,
        fft: Option<FftCorrelation>,
    },
    PatchDot {
        input: Var,
        kernel: Var,
    },
    Reshape {
        input: Var,
    },
    Sum {
        input: Var,
    },
    CrossEntropy {
        logits: Var,
        target: usize,
        softmax: Vec<f64>,
    },
}

/// Records operations as they are evaluated and replays them backwards.
///
/// A tape is single-use: build the forward graph, call [`backward`](Self::backward)
/// once on a scalar, read gradients, drop it.
#[derive(Debug, Default)]
pub struct Tape {
    values: Vec<Grid>,
    grads: Vec<Option<Vec<f64>>>,
    tracked: Vec<bool>,
    ops: Vec<Op>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Grid, tracked: bool, op: Op) -> Var {
        self.values.push(value);
        self.grads.push(None);
        self.tracked.push(tracked);
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    /// A value that never receives gradients.
    pub fn constant(&mut self, value: Grid) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// A leaf whose gradient is accumulated by [`backward`](Self::backward).
    pub fn leaf(&mut self, value: Grid) -> Var {
        self.push(value, true, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Grid {
        &self.values[v.0]
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.tracked[v.0]
    }

    /// Gradient of the last `backward` target w.r.t. `v`, if any reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn any_tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.tracked[v.0])
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, padding: Padding, stride: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.value(input).shape(), self.value(kernel).shape(), padding, stride)?;
        let out = conv2d_forward(self.value(input).values(), self.value(kernel).values(), &geom);
        let value = Grid::new(&[geom.oh, geom.ow, geom.cout], out)?;
        let tracked = self.any_tracked(&[input, kernel]);
        Ok(self.push(value, tracked, Op::Conv2d { input, kernel, geom }))
    }

    /// Adds a per-channel bias (length = last extent) to every position.
    pub fn add_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let x = self.value(input);
        let c = *x.shape().last().expect("grids are never rank 0");
        let b = self.value(bias);
        if b.len() != c {
            return Err(shape_err!("bias of length {} for {:?}", b.len(), x.shape()));
        }
        let mut out = x.clone().into_values();
        for chunk in out.chunks_mut(c) {
            for (o, bv) in chunk.iter_mut().zip(b.values()) {
                *o += bv;
            }
        }
        let value = Grid::new(x.shape(), out)?;
        let tracked = self.any_tracked(&[input, bias]);
        Ok(self.push(value, tracked, Op::AddBias { input, bias }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err!("add of {:?} and {:?}", x.shape(), y.shape()));
        }
        let out = x.values().iter().zip(y.values()).map(|(p, q)| p + q).collect();
        let value = Grid::new(x.shape(), out)?;
        let tracked = self.any_tracked(&[a, b]);
        Ok(self.push(value, tracked, Op::Add { a, b }))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let out = x.values().iter().map(|&v| v.max(0.0)).collect();
        let value = Grid::new(x.shape(), out).expect("same shape");
        let tracked = self.tracked[input.0];
        self.push(value, tracked, Op::Relu { input })
    }

    /// Nearest-neighbour 2× spatial upsampling of an `h × w × c` grid.
    pub fn upsample2(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let (h, w, c) = x.hwc()?;
        let mut out = vec![0.0; 4 * h * w * c];
        let xv = x.values();
        for y in 0..2 * h {
            for xx in 0..2 * w {
                let src = ((y / 2) * w + xx / 2) * c;
                let dst = (y * 2 * w + xx) * c;
                out[dst..dst + c].copy_from_slice(&xv[src..src + c]);
            }
        }
        let value = Grid::new(&[2 * h, 2 * w, c], out)?;
        let tracked = self.tracked[input.0];
        Ok(self.push(value, tracked, Op::Upsample2 { input }))
    }

    /// `size × size` window centred on pixel `(row, col)`, zero-filled outside.
    pub fn crop(&mut self, input: Var, center: (i64, i64), size: usize) -> Result<Var> {
        if size.is_multiple_of(2) {
            return Err(invalid!("crop size must be odd, got {size}"));
        }
        let x = self.value(input);
        let dims = x.hwc()?;
        let out = crop_forward(x.values(), dims, center, size);
        let value = Grid::new(&[size, size, dims.2], out)?;
        let tracked = self.tracked[input.0];
        Ok(self.push(value, tracked, Op::Crop { input, center, size }))
    }

    /// Rectangular `out_h × out_w` window whose top-left pixel is `origin`;
    /// zero-filled outside. Serves both zero-padding and cropping back.
    pub fn window(&mut self, input: Var, origin: (i64, i64), out_hw: (usize, usize)) -> Result<Var> {
        let x = self.value(input);
        let (h, w, d) = x.hwc()?;
        let (oh, ow) = out_hw;
        let mut out = vec![0.0; oh * ow * d];
        for a in 0..oh {
            let y = origin.0 + a as i64;
            if y < 0 || y >= h as i64 {
                continue;
            }
            for b in 0..ow {
                let xx = origin.1 + b as i64;
                if xx < 0 || xx >= w as i64 {
                    continue;
                }
                let src = (y as usize * w + xx as usize) * d;
                out[(a * ow + b) * d..(a * ow + b + 1) * d].copy_from_slice(&x.values()[src..src + d]);
            }
        }
        let value = Grid::new(&[oh, ow, d], out)?;
        let tracked = self.tracked[input.0];
        Ok(self.push(value, tracked, Op::Window { input, origin, out_hw }))
    }

    /// Rotated copies of an `h × w × d` patch, one per angle: `n × h × w × d`.
    pub fn rot_stack(&mut self, input: Var, angles: &[f64]) -> Result<Var> {
        if angles.is_empty() {
            return Err(invalid!("rot_stack needs at least one angle"));
        }
        let x = self.value(input);
        let (h, w, d) = patch_dims(x.shape())?;
        let plane = h * w * d;
        let mut out = vec![0.0; angles.len() * plane];
        for (i, &a) in angles.iter().enumerate() {
            let taps = rotation_taps(h, w, a);
            resample_forward(x.values(), d, &taps, &mut out[i * plane..(i + 1) * plane]);
        }
        let value = Grid::new(&[angles.len(), h, w, d], out)?;
        let tracked = self.tracked[input.0];
        Ok(self.push(
            value,
            tracked,
            Op::RotStack {
                input,
                angles: angles.to_vec(),
            },
        ))
    }

    /// Stacks equally shaped grids along a new leading axis.
    pub fn stack(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| invalid!("stack of nothing"))?;
        let shape = self.value(*first).shape().to_vec();
        if shape.len() >= 4 {
            return Err(shape_err!("cannot stack rank-4 grids"));
        }
        let mut out = Vec::with_capacity(inputs.len() * self.value(*first).len());
        for v in inputs {
            let g = self.value(*v);
            if g.shape() != shape.as_slice() {
                return Err(shape_err!("stack of {:?} and {:?}", shape, g.shape()));
            }
            out.extend_from_slice(g.values());
        }
        let mut full = vec![inputs.len()];
        full.extend_from_slice(&shape);
        let value = Grid::new(&full, out)?;
        let tracked = self.any_tracked(inputs);
        Ok(self.push(
            value,
            tracked,
            Op::Stack {
                inputs: inputs.to_vec(),
            },
        ))
    }

    /// Entry `index` along the leading axis.
    pub fn slice(&mut self, input: Var, index: usize) -> Result<Var> {
        let x = self.value(input);
        let shape = x.shape();
        if shape.len() < 2 || index >= shape[0] {
            return Err(shape_err!("slice {} of {:?}", index, shape));
        }
        let plane: usize = shape[1..].iter().product();
        let value = Grid::new(&shape[1..], x.values()[index * plane..(index + 1) * plane].to_vec())?;
        let tracked = self.tracked[input.0];
        Ok(self.push(value, tracked, Op::Slice { input, index }))
    }

    /// Keeps the first `keep` channels (last axis).
    pub fn channels(&mut self, input: Var, keep: usize) -> Result<Var> {
        let x = self.value(input);
        let c = *x.shape().last().expect("grids are never rank 0");
        if keep == 0 || keep > c {
            return Err(shape_err!("cannot keep {} of {} channels", keep, c));
        }
        let out: Vec<f64> = x.values().chunks(c).flat_map(|ch| ch[..keep].iter().copied()).collect();
        let mut shape = x.shape().to_vec();
        *shape.last_mut().expect("non-empty") = keep;
        let value = Grid::new(&shape, out)?;
        let tracked = self.tracked[input.0];
        Ok(self.push(value, tracked, Op::Channels { input, keep }))
    }

    /// Correlates an `n × c × c × d` query stack with an `h × w × d` key:
    /// returns the `h × w × n` score volume.
    pub fn cross_correlate(&mut self, query: Var, key: Var) -> Result<Var> {
        let geom = CorrGeom::new(self.value(query).shape(), self.value(key).shape())?;
        let tracked = self.any_tracked(&[query, key]);
        let (q, k) = (self.value(query).values(), self.value(key).values());
        let (out, fft) = if geom.prefers_fft() {
            let (out, cache) = FftCorrelation::forward(q, k, &geom);
            (out, tracked.then_some(cache))
        } else {
            (correlate_direct(q, k, &geom), None)
        };
        let value = Grid::new(&[geom.h, geom.w, geom.n], out)?;
        Ok(self.push(value, tracked, Op::Correlate { query, key, geom, fft }))
    }

    /// Dot product of every slice of an `n × …` stack with a kernel of the
    /// slice's shape: the valid convolution whose receptive field is the
    /// whole slice, one output each. Returns a length-`n` grid.
    pub fn patch_dot(&mut self, input: Var, kernel: Var) -> Result<Var> {
        let x = self.value(input);
        let k = self.value(kernel);
        let n = x.shape()[0];
        if x.shape().len() < 2 || x.len() != n * k.len() {
            return Err(shape_err!("patch_dot of {:?} with kernel {:?}", x.shape(), k.shape()));
        }
        let plane = k.len();
        let out = x
            .values()
            .chunks(plane)
            .map(|p| p.iter().zip(k.values()).map(|(a, b)| a * b).sum())
            .collect();
        let value = Grid::new(&[n], out)?;
        let tracked = self.any_tracked(&[input, kernel]);
        Ok(self.push(value, tracked, Op::PatchDot { input, kernel }))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).clone().reshaped(shape)?;
        let tracked = self.tracked[input.0];
        Ok(self.push(value, tracked, Op::Reshape { input }))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let value = Grid::scalar(self.value(input).sum());
        let tracked = self.tracked[input.0];
        self.push(value, tracked, Op::Sum { input })
    }

    /// `−log softmax(logits)[target]` over all entries of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let x = self.value(logits).values();
        if target >= x.len() {
            return Err(invalid!("target {} out of range for {} logits", target, x.len()));
        }
        if x.iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("NaN logits in cross-entropy".into()));
        }
        let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let loss = z.ln() + max - x[target];
        let softmax = exps.into_iter().map(|e| e / z).collect();
        let tracked = self.tracked[logits.0];
        Ok(self.push(
            Grid::scalar(loss),
            tracked,
            Op::CrossEntropy {
                logits,
                target,
                softmax,
            },
        ))
    }

    fn accumulate(&mut self, v: Var, f: impl FnOnce(&[Grid], &mut [f64])) {
        if !self.tracked[v.0] {
            return;
        }
        let len = self.values[v.0].len();
        let mut g = self.grads[v.0].take().unwrap_or_else(|| vec![0.0; len]);
        f(&self.values, &mut g);
        self.grads[v.0] = Some(g);
    }

    /// Backpropagates from a single-element `loss`, filling gradients of every
    /// tracked value it depends on.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.values[loss.0].len() != 1 {
            return Err(shape_err!(
                "backward needs a scalar, got {:?}",
                self.values[loss.0].shape()
            ));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        if !self.tracked[loss.0] {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(gout) = self.grads[idx].take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.ops[idx], Op::Leaf);
            self.backward_op(idx, &op, &gout);
            self.ops[idx] = op;
            self.grads[idx] = Some(gout);
        }
        Ok(())
    }

    fn backward_op(&mut self, idx: usize, op: &Op, gout: &[f64]) {
        match op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, geom } => {
                let (input, kernel, geom) = (*input, *kernel, *geom);
                let (ti, tk) = (self.tracked[input.0], self.tracked[kernel.0]);
                let len_i = self.values[input.0].len();
                let len_k = self.values[kernel.0].len();
                let mut gi = ti.then(|| self.grads[input.0].take().unwrap_or_else(|| vec![0.0; len_i]));
                let mut gk = tk.then(|| self.grads[kernel.0].take().unwrap_or_else(|| vec![0.0; len_k]));
                conv2d_backward(
                    self.values[input.0].values(),
                    self.values[kernel.0].values(),
                    &geom,
                    gout,
                    gi.as_deref_mut(),
                    gk.as_deref_mut(),
                );
                if let Some(g) = gi {
                    self.grads[input.0] = Some(g);
                }
                if let Some(g) = gk {
                    self.grads[kernel.0] = Some(g);
                }
            }
            Op::AddBias { input, bias } => {
                self.accumulate(*input, |_, g| add_into(g, gout));
                self.accumulate(*bias, |_, g| {
                    let c = g.len();
                    for chunk in gout.chunks(c) {
                        add_into(g, chunk);
                    }
                });
            }
            Op::Add { a, b } => {
                self.accumulate(*a, |_, g| add_into(g, gout));
                self.accumulate(*b, |_, g| add_into(g, gout));
            }
            Op::Relu { input } => {
                let out = self.values[idx].values().to_vec();
                self.accumulate(*input, |_, g| {
                    for ((gv, go), o) in g.iter_mut().zip(gout).zip(&out) {
                        if *o > 0.0 {
                            *gv += go;
                        }
                    }
                });
            }
            Op::Upsample2 { input } => {
                let (h, w, c) = self.values[input.0].hwc().expect("checked in forward");
                self.accumulate(*input, |_, g| {
                    for y in 0..2 * h {
                        for x in 0..2 * w {
                            let dst = ((y / 2) * w + x / 2) * c;
                            let src = (y * 2 * w + x) * c;
                            add_into(&mut g[dst..dst + c], &gout[src..src + c]);
                        }
                    }
                });
            }
            Op::Crop { input, center, size } => {
                let dims = self.values[input.0].hwc().expect("checked in forward");
                let (center, size) = (*center, *size);
                self.accumulate(*input, |_, g| crop_backward(gout, dims, center, size, g));
            }
            Op::Window { input, origin, out_hw } => {
                let (h, w, d) = self.values[input.0].hwc().expect("checked in forward");
                let (origin, (oh, ow)) = (*origin, *out_hw);
                self.accumulate(*input, |_, g| {
                    for a in 0..oh {
                        let y = origin.0 + a as i64;
                        if y < 0 || y >= h as i64 {
                            continue;
                        }
                        for b in 0..ow {
                            let x = origin.1 + b as i64;
                            if x < 0 || x >= w as i64 {
                                continue;
                            }
                            let dst = (y as usize * w + x as usize) * d;
                            let src = (a * ow + b) * d;
                            add_into(&mut g[dst..dst + d], &gout[src..src + d]);
                        }
                    }
                });
            }
            Op::RotStack { input, angles } => {
                let (h, w, d) = patch_dims(self.values[input.0].shape()).expect("checked in forward");
                let plane = h * w * d;
                self.accumulate(*input, |_, g| {
                    for (i, &a) in angles.iter().enumerate() {
                        let taps = rotation_taps(h, w, a);
                        resample_backward(&gout[i * plane..(i + 1) * plane], d, &taps, g);
                    }
                });
            }
            Op::Stack { inputs } => {
                let mut offset = 0;
                for v in inputs {
                    let len = self.values[v.0].len();
                    let part = &gout[offset..offset + len];
                    self.accumulate(*v, |_, g| add_into(g, part));
                    offset += len;
                }
            }
            Op::Slice { input, index } => {
                let plane = gout.len();
                let index = *index;
                self.accumulate(*input, |_, g| {
                    add_into(&mut g[index * plane..(index + 1) * plane], gout)
                });
            }
            Op::Channels { input, keep } => {
                let c = *self.values[input.0].shape().last().expect("non-empty");
                let keep = *keep;
                self.accumulate(*input, |_, g| {
                    for (dst, src) in g.chunks_mut(c).zip(gout.chunks(keep)) {
                        add_into(&mut dst[..keep], src);
                    }
                });
            }
            Op::Correlate { query, key, geom, fft } => {
                let (query, key) = (*query, *key);
                let (tq, tk) = (self.tracked[query.0], self.tracked[key.0]);
                let len_q = self.values[query.0].len();
                let len_k = self.values[key.0].len();
                let mut gq = tq.then(|| self.grads[query.0].take().unwrap_or_else(|| vec![0.0; len_q]));
                let mut gk = tk.then(|| self.grads[key.0].take().unwrap_or_else(|| vec![0.0; len_k]));
                match fft {
                    Some(cache) => cache.backward(
                        self.values[query.0].values(),
                        gout,
                        gq.as_deref_mut(),
                        gk.as_deref_mut(),
                    ),
                    None => correlate_direct_backward(
                        self.values[query.0].values(),
                        self.values[key.0].values(),
                        geom,
                        gout,
                        gq.as_deref_mut(),
                        gk.as_deref_mut(),
                    ),
                }
                if let Some(g) = gq {
                    self.grads[query.0] = Some(g);
                }
                if let Some(g) = gk {
                    self.grads[key.0] = Some(g);
                }
            }
            Op::PatchDot { input, kernel } => {
                let (input, kernel) = (*input, *kernel);
                self.accumulate(input, |vals, g| {
                    let k = vals[kernel.0].values();
                    for (chunk, go) in g.chunks_mut(k.len()).zip(gout) {
                        for (gv, kv) in chunk.iter_mut().zip(k) {
                            *gv += go * kv;
                        }
                    }
                });
                self.accumulate(kernel, |vals, g| {
                    let x = vals[input.0].values();
                    for (chunk, go) in x.chunks(g.len()).zip(gout) {
                        for (gv, xv) in g.iter_mut().zip(chunk) {
                            *gv += go * xv;
                        }
                    }
                });
            }
            Op::Reshape { input } => {
                self.accumulate(*input, |_, g| add_into(g, gout));
            }
            Op::Sum { input } => {
                let go = gout[0];
                self.accumulate(*input, |_, g| g.iter_mut().for_each(|v| *v += go));
            }
            Op::CrossEntropy {
                logits,
                target,
                softmax,
            } => {
                let go = gout[0];
                let target = *target;
                self.accumulate(*logits, |_, g| {
                    for (i, (gv, p)) in g.iter_mut().zip(softmax).enumerate() {
                        let onehot = if i == target { 1.0 } else { 0.0 };
                        *gv += go * (p - onehot);
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
