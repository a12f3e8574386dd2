//! Neural-network building blocks on top of the tape: named parameter sets,
//! linear/attention/conv layers, Adam, and float32 blob serialization.

use std::collections::HashMap;
use std::io::{Read, Write};

use ndarray::{Array1, Array2, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tape::{Arr, Tape, Var};

pub fn seeded_rng(seed: u64) -> ChaCha12Rng {
    use rand::SeedableRng;
    ChaCha12Rng::seed_from_u64(seed)
}

/// Ordered collection of named parameter tensors.
#[derive(Clone, Default)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Arr>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Arr) {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        self.index.insert(name.to_string(), self.values.len());
        self.names.push(name.to_string());
        self.values.push(value);
    }

    pub fn get(&self, name: &str) -> &Arr {
        let i = *self.index.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        &self.values[i]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Arr {
        let i = *self.index.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        &mut self.values[i]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn value_at(&self, i: usize) -> &Arr {
        &self.values[i]
    }

    /// SHA-256 over names and little-endian f64 contents, in insertion order.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, val) in self.names.iter().zip(&self.values) {
            h.update(name.as_bytes());
            for &x in val.iter() {
                h.update(x.to_le_bytes());
            }
        }
        hex_string(&h.finalize())
    }

    /// Manifest entries (name + shape) describing the blob layout.
    pub fn manifest_entries(&self) -> Vec<(String, Vec<usize>)> {
        self.names
            .iter()
            .zip(&self.values)
            .map(|(n, v)| (n.clone(), v.shape().to_vec()))
            .collect()
    }

    /// Write all tensors as little-endian f32, in insertion order.
    pub fn write_blob(&self, w: &mut impl Write) -> Result<()> {
        for val in &self.values {
            for &x in val.iter() {
                w.write_all(&(x as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Read tensors described by `entries` from a little-endian f32 blob.
    pub fn read_blob(entries: &[(String, Vec<usize>)], r: &mut impl Read) -> Result<Self> {
        let mut ps = ParamSet::new();
        for (name, shape) in entries {
            let n: usize = shape.iter().product();
            let mut buf = vec![0u8; n * 4];
            r.read_exact(&mut buf).map_err(|e| {
                Error::Format(format!("weight blob truncated at {name}: {e}"))
            })?;
            let data: Vec<f64> = buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            let arr = ArrayD::from_shape_vec(IxDyn(shape), data)
                .map_err(|e| Error::Format(format!("bad shape for {name}: {e}")))?;
            ps.insert(name, arr);
        }
        Ok(ps)
    }

    // -- layer registration helpers --

    pub fn add_linear(&mut self, rng: &mut ChaCha12Rng, prefix: &str, din: usize, dout: usize) {
        let limit = (6.0 / (din + dout) as f64).sqrt();
        let w = Arr::from_shape_fn(IxDyn(&[din, dout]), |_| rng.gen_range(-limit..limit));
        self.insert(&format!("{prefix}.w"), w);
        self.insert(&format!("{prefix}.b"), Arr::zeros(IxDyn(&[dout])));
    }

    pub fn add_layer_norm(&mut self, prefix: &str, d: usize) {
        self.insert(&format!("{prefix}.g"), Arr::ones(IxDyn(&[d])));
        self.insert(&format!("{prefix}.b"), Arr::zeros(IxDyn(&[d])));
    }

    pub fn add_attention(&mut self, rng: &mut ChaCha12Rng, prefix: &str, d: usize) {
        for part in ["q", "k", "v", "o"] {
            self.add_linear(rng, &format!("{prefix}.{part}"), d, d);
        }
    }

    pub fn add_conv(&mut self, rng: &mut ChaCha12Rng, prefix: &str, cin: usize, cout: usize, k: usize) {
        let fan_in = cin * k * k;
        let limit = (6.0 / (fan_in + cout * k * k) as f64).sqrt();
        let w = Arr::from_shape_fn(IxDyn(&[cout, cin, k, k]), |_| rng.gen_range(-limit..limit));
        self.insert(&format!("{prefix}.w"), w);
        self.insert(&format!("{prefix}.b"), Arr::zeros(IxDyn(&[cout])));
    }

    pub fn add_zeros(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, Arr::zeros(IxDyn(shape)));
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Parameter set bound onto a tape as gradient-tracking leaves.
pub struct Bound {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    pub fn new(tape: &mut Tape, ps: &ParamSet) -> Self {
        let vars = ps.values.iter().map(|v| tape.leaf(v.clone())).collect();
        Bound { vars, index: ps.index.clone() }
    }

    /// Bind without gradient tracking (inference).
    pub fn constants(tape: &mut Tape, ps: &ParamSet) -> Self {
        let vars = ps.values.iter().map(|v| tape.constant(v.clone())).collect();
        Bound { vars, index: ps.index.clone() }
    }

    pub fn var(&self, name: &str) -> Var {
        let i = *self.index.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.vars[i]
    }

    /// Collect gradients aligned with the parameter order (zeros where absent).
    pub fn grads(&self, ps: &ParamSet, grads: &mut crate::tape::Grads) -> Vec<Arr> {
        self.vars
            .iter()
            .zip(&ps.values)
            .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Arr::zeros(p.raw_dim())))
            .collect()
    }
}

// ---- layers ----

/// `x · W + b` over the last axis of a 2-D input `(T, din)`.
pub fn linear(t: &mut Tape, b: &Bound, prefix: &str, x: Var) -> Var {
    let w = b.var(&format!("{prefix}.w"));
    let bias = b.var(&format!("{prefix}.b"));
    let y = t.matmul(x, w);
    t.add(y, bias)
}

pub fn layer_norm(t: &mut Tape, b: &Bound, prefix: &str, x: Var) -> Var {
    let g = b.var(&format!("{prefix}.g"));
    let beta = b.var(&format!("{prefix}.b"));
    let last = t.shape(x).len() - 1;
    let mu = t.mean_axis(x, last);
    let centered = t.sub(x, mu);
    let sq = t.square(centered);
    let var = t.mean_axis(sq, last);
    let var_eps = t.add_scalar(var, 1e-5);
    let std = t.sqrt(var_eps);
    let normed = t.div(centered, std);
    let scaled = t.mul(normed, g);
    t.add(scaled, beta)
}

/// Row softmax with an optional 0/1 mask; masked entries are exactly zero.
pub fn softmax_masked(t: &mut Tape, scores: Var, mask: Option<&Array2<f64>>) -> Var {
    let m = t.max_axis_detached(scores, 1);
    let z = t.sub(scores, m);
    let e = t.exp(z);
    let e = match mask {
        Some(mk) => {
            let mk = t.constant(mk.clone().into_dyn());
            t.mul(e, mk)
        }
        None => e,
    };
    let s = t.sum_axis(e, 1);
    t.div(e, s)
}

/// Multi-head attention; returns the output and per-head attention weights.
pub fn attention(
    t: &mut Tape,
    b: &Bound,
    prefix: &str,
    q_in: Var,
    kv_in: Var,
    heads: usize,
    mask: Option<&Array2<f64>>,
) -> (Var, Vec<Var>) {
    let d = t.shape(q_in)[1];
    assert_eq!(d % heads, 0);
    let dh = d / heads;
    let q = linear(t, b, &format!("{prefix}.q"), q_in);
    let k = linear(t, b, &format!("{prefix}.k"), kv_in);
    let v = linear(t, b, &format!("{prefix}.v"), kv_in);
    let mut ctxs = Vec::with_capacity(heads);
    let mut probs_all = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = t.slice(q, 1, h * dh, dh);
        let kh = t.slice(k, 1, h * dh, dh);
        let vh = t.slice(v, 1, h * dh, dh);
        let scores = t.matmul_nt(qh, kh);
        let scores = t.scale(scores, 1.0 / (dh as f64).sqrt());
        let probs = softmax_masked(t, scores, mask);
        probs_all.push(probs);
        ctxs.push(t.matmul(probs, vh));
    }
    let ctx = t.concat(1, &ctxs);
    (linear(t, b, &format!("{prefix}.o"), ctx), probs_all)
}

/// Position-wise feed-forward with ReLU.
pub fn ffn(t: &mut Tape, b: &Bound, prefix: &str, x: Var) -> Var {
    let h = linear(t, b, &format!("{prefix}.0"), x);
    let h = t.relu(h);
    linear(t, b, &format!("{prefix}.1"), h)
}

/// Sinusoidal table `(len, dim)`.
pub fn sinusoid_table(len: usize, dim: usize) -> Array2<f64> {
    let mut out = Array2::zeros((len, dim));
    for t in 0..len {
        fill_sinusoid(t as f64, out.row_mut(t));
    }
    out
}

/// Sinusoidal embedding of a single (possibly fractional) position.
pub fn sinusoid_vec(pos: f64, dim: usize) -> Array1<f64> {
    let mut out = Array1::zeros(dim);
    fill_sinusoid(pos, out.view_mut());
    out
}

fn fill_sinusoid(pos: f64, mut row: ndarray::ArrayViewMut1<f64>) {
    let dim = row.len();
    for i in 0..dim / 2 {
        let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / dim as f64);
        row[2 * i] = (pos * freq).sin();
        if 2 * i + 1 < dim {
            row[2 * i + 1] = (pos * freq).cos();
        }
    }
}

// ---- convolution ----

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Pad {
    Zero,
    Edge,
}

fn pad_src(i: isize, n: usize, pad: Pad) -> Option<usize> {
    if i >= 0 && (i as usize) < n {
        return Some(i as usize);
    }
    match pad {
        Pad::Zero => None,
        Pad::Edge => Some(i.clamp(0, n as isize - 1) as usize),
    }
}

fn conv_out(h: usize, k: usize, stride: usize) -> usize {
    (h + 2 * (k / 2) - k) / stride + 1
}

fn im2col(x: &ArrayD<f64>, k: usize, stride: usize, pad: Pad) -> (Array2<f64>, usize, usize) {
    let (c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let p = (k / 2) as isize;
    let h_out = conv_out(h, k, stride);
    let w_out = conv_out(w, k, stride);
    let mut col = Array2::zeros((c_in * k * k, h_out * w_out));
    let xs = x.as_slice().expect("contiguous");
    let cs = col.as_slice_mut().unwrap();
    for c in 0..c_in {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst_base = row * h_out * w_out;
                let off_x = kj as isize - p;
                for oy in 0..h_out {
                    let dst = &mut cs[dst_base + oy * w_out..dst_base + (oy + 1) * w_out];
                    let sy = match pad_src(oy as isize * stride as isize + ki as isize - p, h, pad) {
                        Some(y) => y,
                        None => {
                            dst.fill(0.0);
                            continue;
                        }
                    };
                    let src = &xs[(c * h + sy) * w..(c * h + sy + 1) * w];
                    if stride == 1 {
                        // interior span copies contiguously; edges follow pad
                        let lo = (-off_x).max(0) as usize;
                        let hi = ((w as isize - off_x) as usize).min(w_out);
                        for d in dst.iter_mut().take(lo.min(w_out)) {
                            *d = match pad {
                                Pad::Zero => 0.0,
                                Pad::Edge => src[0],
                            };
                        }
                        if lo < hi {
                            dst[lo..hi].copy_from_slice(
                                &src[(lo as isize + off_x) as usize..(hi as isize + off_x) as usize],
                            );
                        }
                        for d in dst.iter_mut().skip(hi.max(lo)) {
                            *d = match pad {
                                Pad::Zero => 0.0,
                                Pad::Edge => src[w - 1],
                            };
                        }
                    } else {
                        for (ox, d) in dst.iter_mut().enumerate() {
                            *d = match pad_src(ox as isize * stride as isize + off_x, w, pad) {
                                Some(sx) => src[sx],
                                None => 0.0,
                            };
                        }
                    }
                }
            }
        }
    }
    (col, h_out, w_out)
}

fn col2im(
    dcol: &Array2<f64>,
    shape: &[usize],
    k: usize,
    stride: usize,
    pad: Pad,
    h_out: usize,
    w_out: usize,
) -> ArrayD<f64> {
    let (c_in, h, w) = (shape[0], shape[1], shape[2]);
    let p = (k / 2) as isize;
    let mut dx = ArrayD::zeros(IxDyn(shape));
    let ds = dx.as_slice_mut().unwrap();
    let dc = dcol.as_slice().expect("contiguous");
    for c in 0..c_in {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src_base = row * h_out * w_out;
                let off_x = kj as isize - p;
                for oy in 0..h_out {
                    let sy = match pad_src(oy as isize * stride as isize + ki as isize - p, h, pad) {
                        Some(y) => y,
                        None => continue,
                    };
                    let src = &dc[src_base + oy * w_out..src_base + (oy + 1) * w_out];
                    let drow = (c * h + sy) * w;
                    if stride == 1 {
                        let lo = (-off_x).max(0) as usize;
                        let hi = ((w as isize - off_x) as usize).min(w_out);
                        if matches!(pad, Pad::Edge) {
                            for (ox, &v) in src.iter().enumerate().take(lo.min(w_out)) {
                                let _ = ox;
                                ds[drow] += v;
                            }
                        }
                        for ox in lo..hi.max(lo) {
                            ds[drow + (ox as isize + off_x) as usize] += src[ox];
                        }
                        if matches!(pad, Pad::Edge) {
                            for &v in src.iter().skip(hi.max(lo)) {
                                ds[drow + w - 1] += v;
                            }
                        }
                    } else {
                        for (ox, &v) in src.iter().enumerate() {
                            if let Some(sx) = pad_src(ox as isize * stride as isize + off_x, w, pad) {
                                ds[drow + sx] += v;
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// 2-D convolution on a `(Cin, H, W)` image with weight `(Cout, Cin, k, k)`
/// and bias `(Cout)`. Same-padding for stride 1; halves resolution at stride 2.
pub fn conv2d(t: &mut Tape, x: Var, w: Var, bias: Var, stride: usize, pad: Pad) -> Var {
    let xv = t.value_owned(x);
    let wv = t.value_owned(w);
    let bv = t.value_owned(bias);
    let (c_out, c_in, k) = (wv.shape()[0], wv.shape()[1], wv.shape()[2]);
    assert_eq!(xv.shape()[0], c_in, "conv2d channel mismatch");
    let (col, h_out, w_out) = im2col(&xv, k, stride, pad);
    let w_mat = wv.view().into_shape_with_order((c_out, c_in * k * k)).unwrap().to_owned();
    let mut out = w_mat.dot(&col);
    for c in 0..c_out {
        out.row_mut(c).mapv_inplace(|v| v + bv[c]);
    }
    let out = out.into_shape_with_order(IxDyn(&[c_out, h_out, w_out])).unwrap();
    let ng = t.needs_grad(x) || t.needs_grad(w) || t.needs_grad(bias);
    let x_shape = xv.shape().to_vec();
    t.custom(
        out,
        ng,
        Box::new(move |g, acc| {
            let g_mat = g.view().into_shape_with_order((c_out, h_out * w_out)).unwrap().to_owned();
            // bias
            let db = g_mat.sum_axis(ndarray::Axis(1));
            acc(bias, db.into_dyn());
            // weight (col recomputed)
            let (col, _, _) = im2col(&xv, k, stride, pad);
            let dw = g_mat.dot(&col.t());
            acc(w, dw.into_shape_with_order(IxDyn(&[c_out, c_in, k, k])).unwrap());
            // input
            let w_mat = wv.view().into_shape_with_order((c_out, c_in * k * k)).unwrap().to_owned();
            let dcol = w_mat.t().dot(&g_mat);
            acc(x, col2im(&dcol, &x_shape, k, stride, pad, h_out, w_out));
        }),
    )
}

/// Nearest-neighbor 2x upsampling of a `(C, H, W)` image.
pub fn upsample2(t: &mut Tape, x: Var) -> Var {
    let xv = t.value_owned(x);
    let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
    let xs = xv.as_slice().expect("contiguous");
    let mut data = vec![0.0f64; c * 4 * h * w];
    for ci in 0..c {
        for y in 0..h {
            let src = &xs[(ci * h + y) * w..(ci * h + y + 1) * w];
            for half in 0..2 {
                let dst_row = (ci * 2 * h + 2 * y + half) * 2 * w;
                for (xj, &v) in src.iter().enumerate() {
                    data[dst_row + 2 * xj] = v;
                    data[dst_row + 2 * xj + 1] = v;
                }
            }
        }
    }
    let out = ArrayD::from_shape_vec(IxDyn(&[c, 2 * h, 2 * w]), data).unwrap();
    let ng = t.needs_grad(x);
    t.custom(
        out,
        ng,
        Box::new(move |g, acc| {
            let gsl = g.as_slice().expect("contiguous");
            let mut dx = vec![0.0f64; c * h * w];
            for ci in 0..c {
                for y in 0..2 * h {
                    let src = &gsl[(ci * 2 * h + y) * 2 * w..(ci * 2 * h + y + 1) * 2 * w];
                    let dst = &mut dx[(ci * h + y / 2) * w..(ci * h + y / 2 + 1) * w];
                    for xj in 0..w {
                        dst[xj] += src[2 * xj] + src[2 * xj + 1];
                    }
                }
            }
            acc(x, ArrayD::from_shape_vec(IxDyn(&[c, h, w]), dx).unwrap());
        }),
    )
}

// ---- optimizer ----

pub struct Adam {
    m: Vec<Arr>,
    v: Vec<Arr>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(ps: &ParamSet) -> Self {
        Adam {
            m: ps.values.iter().map(|p| Arr::zeros(p.raw_dim())).collect(),
            v: ps.values.iter().map(|p| Arr::zeros(p.raw_dim())).collect(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, ps: &mut ParamSet, grads: &[Arr], lr: f64) {
        assert_eq!(grads.len(), ps.values.len());
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..grads.len() {
            let g = &grads[i];
            self.m[i].zip_mut_with(g, |m, &gi| *m = self.beta1 * *m + (1.0 - self.beta1) * gi);
            self.v[i].zip_mut_with(g, |v, &gi| *v = self.beta2 * *v + (1.0 - self.beta2) * gi * gi);
            let p = &mut ps.values[i];
            ndarray::Zip::from(p)
                .and(&self.m[i])
                .and(&self.v[i])
                .for_each(|p, &m, &v| {
                    *p -= lr * (m / bc1) / ((v / bc2).sqrt() + self.eps);
                });
        }
    }
}

/// Learning-rate schedules addressed by id.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Linear warmup over the first 10% of iterations, then constant.
    Warmup,
    /// Exponential decay to 10% of the base rate at the final iteration.
    Decay,
    /// Cosine annealing from the base rate to zero.
    Cosine,
}

impl LrSchedule {
    pub fn lr(&self, base: f64, iter: usize, total: usize) -> f64 {
        let total = total.max(1);
        let frac = iter as f64 / total as f64;
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Warmup => {
                let ramp = (total as f64 * 0.1).max(1.0);
                base * ((iter as f64 + 1.0) / ramp).min(1.0)
            }
            LrSchedule::Decay => base * 0.1f64.powf(frac),
            LrSchedule::Cosine => base * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()),
        }
    }

    pub fn from_id(id: &str) -> Result<Self> {
        match id {
            "constant" => Ok(LrSchedule::Constant),
            "warmup" => Ok(LrSchedule::Warmup),
            "decay" => Ok(LrSchedule::Decay),
            "cosine" => Ok(LrSchedule::Cosine),
            other => Err(Error::Config(format!("unknown lr schedule id: {other}"))),
        }
    }
}
