//! Linear 3D morphable face model with a procedural desk-scale "mini-face"
//! generator. Decoding follows
//! `rotate_head(theta_h, rotate_jaw(theta_j, template + shape·beta + expr·psi))`
//! with jaw articulation as a weighted rotation about a pivot.

use std::path::Path;

use ndarray::{Array1, Array2, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{project_vertices, CameraPose, Projected};
use crate::error::{Error, Result};
use crate::nn::seeded_rng;
use crate::tape::{Arr, Tape, Var};

/// Rest distance between paired lip keypoints of the mini-face (meters).
pub const MINI_SLIT_GAP: f64 = 0.007;

#[derive(Clone, Debug, PartialEq)]
pub struct MorphableModel {
    /// Template vertices, meters, `(V, 3)`.
    pub template: Array2<f64>,
    /// Shape basis, `(V*3, S)` (per-vertex xyz major).
    pub shape_basis: Array2<f64>,
    /// Expression basis, `(V*3, E)`.
    pub expr_basis: Array2<f64>,
    /// Per-vertex jaw skinning weight in [0, 1].
    pub jaw_weights: Array1<f64>,
    /// Jaw rotation pivot, meters.
    pub jaw_pivot: [f64; 3],
    pub triangles: Vec<[usize; 3]>,
    pub lip_upper_idx: Vec<usize>,
    pub lip_lower_idx: Vec<usize>,
    pub lip_all_idx: Vec<usize>,
    pub upper_face_idx: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapeParams {
    pub beta: Array1<f64>,
}

impl ShapeParams {
    pub fn zeros(s: usize) -> Self {
        ShapeParams { beta: Array1::zeros(s) }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MotionFrame {
    pub psi: Array1<f64>,
    pub theta_j: [f64; 3],
    pub theta_h: [f64; 3],
}

impl MotionFrame {
    pub fn zeros(e: usize) -> Self {
        MotionFrame { psi: Array1::zeros(e), theta_j: [0.0; 3], theta_h: [0.0; 3] }
    }

    pub fn dim(&self) -> usize {
        self.psi.len() + 6
    }

    pub fn to_flat(&self) -> Array1<f64> {
        let e = self.psi.len();
        let mut out = Array1::zeros(e + 6);
        out.slice_mut(ndarray::s![0..e]).assign(&self.psi);
        for k in 0..3 {
            out[e + k] = self.theta_j[k];
            out[e + 3 + k] = self.theta_h[k];
        }
        out
    }

    pub fn from_flat(flat: &[f64], e: usize) -> Result<Self> {
        if flat.len() != e + 6 {
            return Err(Error::Argument(format!(
                "motion frame length {} does not match expression dim {} + 6",
                flat.len(),
                e
            )));
        }
        Ok(MotionFrame {
            psi: Array1::from_vec(flat[0..e].to_vec()),
            theta_j: [flat[e], flat[e + 1], flat[e + 2]],
            theta_h: [flat[e + 3], flat[e + 4], flat[e + 5]],
        })
    }

    /// Wrap both rotations to |angle| <= pi along the same axis.
    pub fn canonicalize(&mut self) {
        self.theta_j = canonicalize_axis_angle(self.theta_j);
        self.theta_h = canonicalize_axis_angle(self.theta_h);
    }
}

pub fn canonicalize_axis_angle(theta: [f64; 3]) -> [f64; 3] {
    let a = (theta[0] * theta[0] + theta[1] * theta[1] + theta[2] * theta[2]).sqrt();
    if a <= std::f64::consts::PI {
        return theta;
    }
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut a2 = a % two_pi;
    if a2 > std::f64::consts::PI {
        a2 -= two_pi;
    }
    let scale = a2 / a;
    [theta[0] * scale, theta[1] * scale, theta[2] * scale]
}

/// Per-frame motion vectors `(T, E+6)`: expression, jaw, head.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionSequence {
    pub data: Array2<f64>,
    pub expr_dim: usize,
}

impl MotionSequence {
    pub fn new(data: Array2<f64>, expr_dim: usize) -> Result<Self> {
        if data.ncols() != expr_dim + 6 {
            return Err(Error::Argument(format!(
                "motion width {} != expression dim {} + 6",
                data.ncols(),
                expr_dim
            )));
        }
        if !data.iter().all(|x| x.is_finite()) {
            return Err(Error::Argument("motion sequence contains non-finite values".into()));
        }
        Ok(MotionSequence { data, expr_dim })
    }

    pub fn zeros(t: usize, expr_dim: usize) -> Self {
        MotionSequence { data: Array2::zeros((t, expr_dim + 6)), expr_dim }
    }

    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.nrows() == 0
    }

    pub fn frame(&self, i: usize) -> MotionFrame {
        MotionFrame::from_flat(self.data.row(i).as_slice().unwrap(), self.expr_dim).unwrap()
    }

    /// Jaw columns `E..E+3`.
    pub fn jaw_cols(&self) -> std::ops::Range<usize> {
        self.expr_dim..self.expr_dim + 3
    }

    pub fn head_cols(&self) -> std::ops::Range<usize> {
        self.expr_dim + 3..self.expr_dim + 6
    }
}

// ---- smooth Rodrigues coefficients (functions of squared angle) ----

/// sin(a)/a as a smooth function of s = a².
pub(crate) fn rot_sinc(s: f64) -> f64 {
    if s < 1e-8 {
        1.0 - s / 6.0 + s * s / 120.0
    } else {
        let a = s.sqrt();
        a.sin() / a
    }
}

pub(crate) fn rot_sinc_ds(s: f64) -> f64 {
    if s < 1e-8 {
        -1.0 / 6.0 + s / 60.0
    } else {
        let a = s.sqrt();
        (a * a.cos() - a.sin()) / (2.0 * a * a * a)
    }
}

/// (1-cos(a))/a² as a smooth function of s = a².
pub(crate) fn rot_cos2(s: f64) -> f64 {
    if s < 1e-8 {
        0.5 - s / 24.0 + s * s / 720.0
    } else {
        (1.0 - s.sqrt().cos()) / s
    }
}

pub(crate) fn rot_cos2_ds(s: f64) -> f64 {
    if s < 1e-8 {
        -1.0 / 24.0 + s / 360.0
    } else {
        let a = s.sqrt();
        (a * a.sin() / 2.0 - (1.0 - a.cos())) / (s * s)
    }
}

/// Rodrigues rotation of a single point (exact for theta = 0).
pub fn rotate_axis_angle(theta: [f64; 3], p: [f64; 3]) -> [f64; 3] {
    let s = theta[0] * theta[0] + theta[1] * theta[1] + theta[2] * theta[2];
    let f = rot_sinc(s);
    let h = rot_cos2(s);
    let t1 = cross(theta, p);
    let t2 = cross(theta, t1);
    [
        p[0] + f * t1[0] + h * t2[0],
        p[1] + f * t1[1] + h * t2[1],
        p[2] + f * t1[2] + h * t2[2],
    ]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

impl MorphableModel {
    pub fn num_vertices(&self) -> usize {
        self.template.nrows()
    }

    pub fn shape_dim(&self) -> usize {
        self.shape_basis.ncols()
    }

    pub fn expr_dim(&self) -> usize {
        self.expr_basis.ncols()
    }

    pub fn motion_dim(&self) -> usize {
        self.expr_dim() + 6
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.num_vertices();
        if self.shape_basis.nrows() != v * 3 || self.expr_basis.nrows() != v * 3 {
            return Err(Error::Validation("basis row count must be V*3".into()));
        }
        if self.jaw_weights.len() != v {
            return Err(Error::Validation("jaw weight count must be V".into()));
        }
        if self.lip_upper_idx.len() != self.lip_lower_idx.len() {
            return Err(Error::Validation("lip keypoint lists must be paired".into()));
        }
        if self.lip_upper_idx.is_empty() || self.lip_all_idx.is_empty() {
            return Err(Error::Validation("lip index sets must be non-empty".into()));
        }
        let all_idx = self
            .lip_upper_idx
            .iter()
            .chain(&self.lip_lower_idx)
            .chain(&self.lip_all_idx)
            .chain(&self.upper_face_idx);
        for &i in all_idx {
            if i >= v {
                return Err(Error::Validation(format!("vertex index {i} out of range 0..{v}")));
            }
        }
        for t in &self.triangles {
            if t.iter().any(|&i| i >= v) {
                return Err(Error::Validation("triangle references invalid vertex".into()));
            }
        }
        if !self.jaw_weights.iter().all(|&w| (0.0..=1.0).contains(&w)) {
            return Err(Error::Validation("jaw weights must lie in [0,1]".into()));
        }
        let finite = self.template.iter().all(|x| x.is_finite())
            && self.shape_basis.iter().all(|x| x.is_finite())
            && self.expr_basis.iter().all(|x| x.is_finite());
        if !finite {
            return Err(Error::Validation("model contains non-finite values".into()));
        }
        Ok(())
    }

    pub fn mean_edge_length(&self) -> f64 {
        let mut total = 0.0;
        let mut count = 0usize;
        for t in &self.triangles {
            for (a, b) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
                let d: f64 = (0..3)
                    .map(|k| (self.template[[a, k]] - self.template[[b, k]]).powi(2))
                    .sum();
                total += d.sqrt();
                count += 1;
            }
        }
        total / count as f64
    }

    /// Template plus blendshape offsets, before any rotation. `(V, 3)`.
    fn blend(&self, beta: &ShapeParams, psi: &Array1<f64>) -> Result<Array2<f64>> {
        if beta.beta.len() != self.shape_dim() {
            return Err(Error::Argument(format!(
                "shape parameter length {} != S={}",
                beta.beta.len(),
                self.shape_dim()
            )));
        }
        if psi.len() != self.expr_dim() {
            return Err(Error::Argument(format!(
                "expression length {} != E={}",
                psi.len(),
                self.expr_dim()
            )));
        }
        let v = self.num_vertices();
        let offset = self.shape_basis.dot(&beta.beta) + self.expr_basis.dot(psi);
        let mut out = self.template.clone();
        for i in 0..v {
            for k in 0..3 {
                out[[i, k]] += offset[i * 3 + k];
            }
        }
        Ok(out)
    }

    fn apply_jaw(&self, verts: &mut Array2<f64>, theta_j: [f64; 3]) {
        let p = self.jaw_pivot;
        for i in 0..verts.nrows() {
            let w = self.jaw_weights[i];
            if w == 0.0 {
                continue;
            }
            let v = [verts[[i, 0]], verts[[i, 1]], verts[[i, 2]]];
            let rel = [v[0] - p[0], v[1] - p[1], v[2] - p[2]];
            let r = rotate_axis_angle(theta_j, rel);
            // displacement form keeps theta_j = 0 bit-exact
            for k in 0..3 {
                verts[[i, k]] = v[k] + w * (r[k] - rel[k]);
            }
        }
    }

    /// Decode one motion frame to vertices `(V, 3)`.
    pub fn decode(&self, beta: &ShapeParams, frame: &MotionFrame) -> Result<Array2<f64>> {
        let mut verts = self.blend(beta, &frame.psi)?;
        self.apply_jaw(&mut verts, frame.theta_j);
        let th = frame.theta_h;
        if th != [0.0; 3] {
            for i in 0..verts.nrows() {
                let r = rotate_axis_angle(th, [verts[[i, 0]], verts[[i, 1]], verts[[i, 2]]]);
                for k in 0..3 {
                    verts[[i, k]] = r[k];
                }
            }
        }
        Ok(verts)
    }

    /// Per-frame decode with the head rotation forced to zero (jaw retained).
    pub fn decode_zero_pose(&self, beta: &ShapeParams, motion: &MotionSequence) -> Result<Vec<Array2<f64>>> {
        self.decode_sequence(beta, motion, true)
    }

    pub fn decode_sequence(
        &self,
        beta: &ShapeParams,
        motion: &MotionSequence,
        zero_head: bool,
    ) -> Result<Vec<Array2<f64>>> {
        if motion.expr_dim != self.expr_dim() {
            return Err(Error::Argument("motion expression dim mismatch".into()));
        }
        (0..motion.len())
            .map(|i| {
                let mut f = motion.frame(i);
                if zero_head {
                    f.theta_h = [0.0; 3];
                }
                self.decode(beta, &f)
            })
            .collect()
    }

    /// Mean paired lip-keypoint distance, meters.
    pub fn lip_opening(&self, vertices: &Array2<f64>) -> Result<f64> {
        if vertices.nrows() != self.num_vertices() || vertices.ncols() != 3 {
            return Err(Error::Argument(format!(
                "vertex array shape {:?} does not match model (V={}, 3)",
                vertices.shape(),
                self.num_vertices()
            )));
        }
        let mut total = 0.0;
        for (&u, &l) in self.lip_upper_idx.iter().zip(&self.lip_lower_idx) {
            let d: f64 = (0..3).map(|k| (vertices[[u, k]] - vertices[[l, k]]).powi(2)).sum();
            total += d.sqrt();
        }
        Ok(total / self.lip_upper_idx.len() as f64)
    }

    /// Pinhole projection of a vertex array from this model.
    pub fn project(&self, vertices: &Array2<f64>, camera: &CameraPose) -> Result<Projected> {
        if vertices.nrows() != self.num_vertices() {
            return Err(Error::Argument("vertex count does not match model".into()));
        }
        project_vertices(vertices, camera)
    }
}

// ---- tape decoding (for losses and joint training) ----

/// Rotate `(T, V, 3)` points by per-frame axis-angle `(T, 3)` on the tape.
pub fn rotate_tape(t: &mut Tape, pts: Var, aa: Var) -> Var {
    let shape = t.shape(pts);
    let (frames, v) = (shape[0], shape[1]);
    let sq = t.square(aa);
    let s = t.sum_axis(sq, 1); // (T,1)
    let f = t.unary_fn(s, rot_sinc, |x, _| rot_sinc_ds(x));
    let h = t.unary_fn(s, rot_cos2, |x, _| rot_cos2_ds(x));
    let aa3 = t.reshape(aa, &[frames, 1, 3]);
    let aab = t.broadcast_to(aa3, &[frames, v, 3]);
    let t1 = t.cross3(aab, pts);
    let t2 = t.cross3(aab, t1);
    let f3 = t.reshape(f, &[frames, 1, 1]);
    let h3 = t.reshape(h, &[frames, 1, 1]);
    let ft1 = t.mul(f3, t1);
    let ht2 = t.mul(h3, t2);
    let sum = t.add(ft1, ht2);
    t.add(pts, sum)
}

/// Decode a motion sequence `(T, E+6)` to vertices `(T, V, 3)` on the tape.
/// `beta` is fixed; gradients flow to the motion input.
pub fn decode_motion_tape(
    t: &mut Tape,
    model: &MorphableModel,
    beta: &ShapeParams,
    motion: Var,
    zero_head: bool,
) -> Var {
    let e = model.expr_dim();
    let v = model.num_vertices();
    let frames = t.shape(motion)[0];
    assert_eq!(t.shape(motion)[1], e + 6, "motion width mismatch");

    let psi = t.slice(motion, 1, 0, e);
    let thj = t.slice(motion, 1, e, 3);

    // constant part: template + shape offset, flattened (V*3)
    let base_flat = {
        let off = model.shape_basis.dot(&beta.beta);
        let mut flat = Array1::zeros(v * 3);
        for i in 0..v {
            for k in 0..3 {
                flat[i * 3 + k] = model.template[[i, k]] + off[i * 3 + k];
            }
        }
        flat
    };
    let base_c = t.constant(base_flat.into_dyn().into_shape_with_order(IxDyn(&[1, v * 3])).unwrap());
    let expr_t = t.constant(model.expr_basis.t().to_owned().into_dyn()); // (E, V*3)
    let expr_off = t.matmul(psi, expr_t); // (T, V*3)
    let blended = t.add(expr_off, base_c);
    let pts = t.reshape(blended, &[frames, v, 3]);

    // jaw: lerp between the point and its rotation about the pivot
    let pivot = Arr::from_shape_vec(IxDyn(&[1, 1, 3]), model.jaw_pivot.to_vec()).unwrap();
    let pivot_c = t.constant(pivot);
    let rel = t.sub(pts, pivot_c);
    let rot = rotate_tape(t, rel, thj);
    // displacement form keeps theta_j = 0 bit-exact
    let delta = t.sub(rot, rel);
    let w = Arr::from_shape_vec(
        IxDyn(&[1, v, 1]),
        model.jaw_weights.iter().copied().collect(),
    )
    .unwrap();
    let w_c = t.constant(w);
    let wdelta = t.mul(w_c, delta);
    let jawed = t.add(pts, wdelta);

    if zero_head {
        jawed
    } else {
        let thh = t.slice(motion, 1, e + 3, 3);
        rotate_tape(t, jawed, thh)
    }
}

// ---- mini-face generation ----

/// Deterministic procedural head: a deformed sphere with a lip slit, paired
/// lip keypoints, a mouth-opening expression basis in column 0, and jaw
/// skinning weights.
pub fn build_mini_model(seed: u64, v: usize, s: usize, e: usize) -> Result<MorphableModel> {
    if v < 12 {
        return Err(Error::Argument(format!("mini model needs V >= 12, got {v}")));
    }
    if s < 1 || e < 1 {
        return Err(Error::Argument("mini model needs S >= 1 and E >= 1".into()));
    }
    let mut rng = seeded_rng(seed);

    // unit sphere with exactly v vertices: two poles + stacked rings
    let n_inner = v - 2;
    let rows = (((n_inner as f64) / 2.0).sqrt().round() as usize).max(2);
    let base = n_inner / rows;
    let rem = n_inner % rows;
    let ring_sizes: Vec<usize> = (0..rows).map(|i| base + usize::from(i < rem)).collect();

    let mut unit: Vec<[f64; 3]> = Vec::with_capacity(v);
    unit.push([0.0, 1.0, 0.0]);
    let mut rings: Vec<Vec<(usize, f64)>> = Vec::with_capacity(rows);
    for (i, &size) in ring_sizes.iter().enumerate() {
        let phi = std::f64::consts::PI * (i as f64 + 1.0) / (rows as f64 + 1.0);
        let (rr, y) = (phi.sin(), phi.cos());
        let offset = if i % 2 == 1 { std::f64::consts::PI / size as f64 } else { 0.0 };
        let mut ring = Vec::with_capacity(size);
        for j in 0..size {
            let th = 2.0 * std::f64::consts::PI * j as f64 / size as f64 + offset;
            ring.push((unit.len(), th));
            // front of the face is +z
            unit.push([rr * th.cos(), y, rr * th.sin()]);
        }
        rings.push(ring);
    }
    unit.push([0.0, -1.0, 0.0]);
    let south = v - 1;

    let mut triangles: Vec<[usize; 3]> = Vec::new();
    // pole fans
    let first = &rings[0];
    for j in 0..first.len() {
        triangles.push([0, first[j].0, first[(j + 1) % first.len()].0]);
    }
    for w in rings.windows(2) {
        stitch_rings(&w[0], &w[1], &mut triangles);
    }
    let last = rings.last().unwrap();
    for j in 0..last.len() {
        triangles.push([south, last[(j + 1) % last.len()].0, last[j].0]);
    }
    // make all windings outward (normals point away from the center)
    for t in &mut triangles {
        let (a, b, c) = (unit[t[0]], unit[t[1]], unit[t[2]]);
        let ab = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let ac = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
        let n = cross(ab, ac);
        let ctr = [
            (a[0] + b[0] + c[0]) / 3.0,
            (a[1] + b[1] + c[1]) / 3.0,
            (a[2] + b[2] + c[2]) / 3.0,
        ];
        if n[0] * ctr[0] + n[1] * ctr[1] + n[2] * ctr[2] < 0.0 {
            t.swap(1, 2);
        }
    }

    // head-like ellipsoid, then smooth seeded bumps
    let (ax, ay, az) = (0.085, 0.115, 0.095);
    let mut verts = Array2::zeros((v, 3));
    for i in 0..v {
        verts[[i, 0]] = unit[i][0] * ax;
        verts[[i, 1]] = unit[i][1] * ay;
        verts[[i, 2]] = unit[i][2] * az;
    }
    for _ in 0..6 {
        let c = random_unit(&mut rng);
        let amp = rng.gen_range(-0.004..0.004);
        let width: f64 = rng.gen_range(0.4..0.8);
        for i in 0..v {
            let d2: f64 = (0..3).map(|k| (unit[i][k] - c[k]).powi(2)).sum();
            let g = (-d2 / (2.0 * width * width)).exp();
            for k in 0..3 {
                verts[[i, k]] += unit[i][k] * amp * g;
            }
        }
    }

    // mouth groove on the front
    let y_lip = -0.045;
    let lip_gx = |x: f64| (-x * x / (2.0 * 0.022f64.powi(2))).exp();
    let lip_gy = |y: f64| (-(y - y_lip) * (y - y_lip) / (2.0 * 0.010f64.powi(2))).exp();
    for i in 0..v {
        if verts[[i, 2]] > 0.0 {
            let g = lip_gx(verts[[i, 0]]) * lip_gy(verts[[i, 1]]);
            verts[[i, 2]] -= 0.008 * g;
        }
    }

    // paired lip keypoints: snap upper/lower pairs onto the slit boundary
    // (8 at the default resolution, fewer on coarse meshes)
    let n_pairs = 8.min((v / 80).max(1));
    let mut lip_upper = Vec::with_capacity(n_pairs);
    let mut lip_lower = Vec::with_capacity(n_pairs);
    let mut used = vec![false; v];
    let gap = MINI_SLIT_GAP;
    for p in 0..n_pairs {
        let xt = if n_pairs == 1 {
            0.0
        } else {
            -0.028 + 0.056 * p as f64 / (n_pairs - 1) as f64
        };
        for (want_upper, list) in [(true, &mut lip_upper), (false, &mut lip_lower)] {
            let ty = if want_upper { y_lip + gap / 2.0 } else { y_lip - gap / 2.0 };
            let mut best = None;
            let mut best_cost = f64::INFINITY;
            for i in 0..v {
                if used[i] || verts[[i, 2]] < 0.04 {
                    continue;
                }
                let above = verts[[i, 1]] >= y_lip;
                if above != want_upper {
                    continue;
                }
                let cost = (verts[[i, 0]] - xt).abs() + 3.0 * (verts[[i, 1]] - ty).abs();
                if cost < best_cost {
                    best_cost = cost;
                    best = Some(i);
                }
            }
            let i = best.ok_or_else(|| {
                Error::Argument("mini model too coarse to place lip keypoints".into())
            })?;
            used[i] = true;
            // place the keypoint exactly on the slit boundary
            verts[[i, 0]] = xt;
            verts[[i, 1]] = ty;
            verts[[i, 2]] = front_z(&verts, xt, ty).max(0.05);
            list.push(i);
        }
    }

    let lip_all: Vec<usize> = (0..v)
        .filter(|&i| {
            (verts[[i, 1]] - y_lip).abs() <= 0.025 && verts[[i, 2]] > 0.03 && verts[[i, 0]].abs() < 0.05
        })
        .collect();
    let upper_face: Vec<usize> = (0..v).filter(|&i| verts[[i, 1]] > 0.03).collect();

    // jaw skinning: below the lip line, front of the head
    let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
    let mut jaw_weights = Array1::zeros(v);
    for i in 0..v {
        let wy = sig((y_lip - verts[[i, 1]]) / 0.0012);
        let wz = sig((verts[[i, 2]] - 0.015) / 0.02);
        jaw_weights[i] = (wy * wz).clamp(0.0, 1.0);
    }
    let jaw_pivot = [0.0, -0.005, -0.01];

    // expression basis
    let lip_band = |x: f64, y: f64, z: f64| -> f64 {
        if z < 0.02 {
            0.0
        } else {
            lip_gx(x) * (-(y - y_lip) * (y - y_lip) / (2.0 * 0.018f64.powi(2))).exp()
        }
    };
    let mut expr_basis = Array2::zeros((v * 3, e));
    // column 0: open the lip slit (lower lip down, upper lip slightly up)
    for i in 0..v {
        let (x, y, z) = (verts[[i, 0]], verts[[i, 1]], verts[[i, 2]]);
        let g = lip_band(x, y, z);
        if g > 1e-6 {
            let dy = if y >= y_lip { 0.004 * g } else { -0.012 * g };
            expr_basis[[i * 3 + 1, 0]] = dy;
        }
    }
    // column 1 (when present): upper-face raise, zero on the lips
    if e > 1 {
        for i in 0..v {
            let (x, y, z) = (verts[[i, 0]], verts[[i, 1]], verts[[i, 2]]);
            if y > 0.025 && z > 0.0 {
                let g = (-(y - 0.05) * (y - 0.05) / (2.0 * 0.02f64.powi(2))).exp()
                    * (-x * x / (2.0 * 0.05f64.powi(2))).exp();
                expr_basis[[i * 3 + 1, 1]] = 0.006 * g;
                expr_basis[[i * 3 + 2, 1]] = 0.002 * g;
            }
        }
    }
    // remaining columns: smooth random fields, masked away from the lip band
    for col in 2..e {
        for _ in 0..3 {
            let c = random_unit(&mut rng);
            let dir = random_unit(&mut rng);
            let amp = rng.gen_range(-0.003..0.003);
            let width: f64 = rng.gen_range(0.3..0.7);
            for i in 0..v {
                let d2: f64 = (0..3).map(|k| (unit[i][k] - c[k]).powi(2)).sum();
                let g = (-d2 / (2.0 * width * width)).exp();
                let mask = 1.0 - lip_band(verts[[i, 0]], verts[[i, 1]], verts[[i, 2]]);
                for k in 0..3 {
                    expr_basis[[i * 3 + k, col]] += amp * g * dir[k] * mask;
                }
            }
        }
    }

    // shape basis: smooth identity variation, also masked at the lips
    let mut shape_basis = Array2::zeros((v * 3, s));
    for col in 0..s {
        for _ in 0..4 {
            let c = random_unit(&mut rng);
            let dir = random_unit(&mut rng);
            let amp = rng.gen_range(-0.004..0.004);
            let width: f64 = rng.gen_range(0.4..0.9);
            for i in 0..v {
                let d2: f64 = (0..3).map(|k| (unit[i][k] - c[k]).powi(2)).sum();
                let g = (-d2 / (2.0 * width * width)).exp();
                let mask = 1.0 - lip_band(verts[[i, 0]], verts[[i, 1]], verts[[i, 2]]);
                for k in 0..3 {
                    shape_basis[[i * 3 + k, col]] += amp * g * dir[k] * mask;
                }
            }
        }
    }

    let model = MorphableModel {
        template: verts,
        shape_basis,
        expr_basis,
        jaw_weights,
        jaw_pivot,
        triangles,
        lip_upper_idx: lip_upper,
        lip_lower_idx: lip_lower,
        lip_all_idx: lip_all,
        upper_face_idx: upper_face,
    };
    model.validate()?;
    Ok(model)
}

/// Representative front-surface depth near (x, y): max z among nearby vertices.
fn front_z(verts: &Array2<f64>, x: f64, y: f64) -> f64 {
    let mut best = 0.0f64;
    for i in 0..verts.nrows() {
        if (verts[[i, 0]] - x).abs() < 0.03 && (verts[[i, 1]] - y).abs() < 0.03 {
            best = best.max(verts[[i, 2]]);
        }
    }
    best
}

fn random_unit(rng: &mut rand_chacha::ChaCha12Rng) -> [f64; 3] {
    loop {
        let p = [
            rng.gen_range(-1.0..1.0f64),
            rng.gen_range(-1.0..1.0f64),
            rng.gen_range(-1.0..1.0f64),
        ];
        let n = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
        if n > 1e-3 && n <= 1.0 {
            return [p[0] / n, p[1] / n, p[2] / n];
        }
    }
}

/// Triangulate the band between two vertex rings by merging on angle.
fn stitch_rings(a: &[(usize, f64)], b: &[(usize, f64)], tris: &mut Vec<[usize; 3]>) {
    let (na, nb) = (a.len(), b.len());
    let ang = |ring: &[(usize, f64)], t: usize| -> f64 {
        let n = ring.len();
        ring[t % n].1 + 2.0 * std::f64::consts::PI * (t / n) as f64
    };
    let (mut i, mut j) = (0usize, 0usize);
    for _ in 0..na + nb {
        let adv_a = if i < na && j < nb {
            ang(a, i + 1) <= ang(b, j + 1)
        } else {
            i < na
        };
        if adv_a {
            tris.push([a[i % na].0, a[(i + 1) % na].0, b[j % nb].0]);
            i += 1;
        } else {
            tris.push([a[i % na].0, b[(j + 1) % nb].0, b[j % nb].0]);
            j += 1;
        }
    }
}

// ---- model file I/O ----

#[derive(Serialize, Deserialize)]
struct ModelManifest {
    format: u32,
    v: usize,
    s: usize,
    e: usize,
    jaw_pivot: [f64; 3],
    triangles: Vec<[usize; 3]>,
    lip_upper_idx: Vec<usize>,
    lip_lower_idx: Vec<usize>,
    lip_all_idx: Vec<usize>,
    upper_face_idx: Vec<usize>,
    files: ModelFiles,
}

#[derive(Serialize, Deserialize)]
struct ModelFiles {
    template: String,
    shape_basis: String,
    expr_basis: String,
    jaw_weights: String,
}

fn write_f32_blob(path: &Path, data: impl Iterator<Item = f64>) -> Result<()> {
    let mut buf = Vec::new();
    for x in data {
        buf.extend_from_slice(&(x as f32).to_le_bytes());
    }
    std::fs::write(path, buf)?;
    Ok(())
}

fn read_f32_blob(path: &Path, expected: usize) -> Result<Vec<f64>> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if bytes.len() != expected * 4 {
        return Err(Error::Validation(format!(
            "{}: expected {} bytes ({} f32), found {}",
            path.display(),
            expected * 4,
            expected,
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

pub fn save_model(model: &MorphableModel, dir: &Path) -> Result<()> {
    model.validate()?;
    std::fs::create_dir_all(dir)?;
    let manifest = ModelManifest {
        format: 1,
        v: model.num_vertices(),
        s: model.shape_dim(),
        e: model.expr_dim(),
        jaw_pivot: model.jaw_pivot,
        triangles: model.triangles.clone(),
        lip_upper_idx: model.lip_upper_idx.clone(),
        lip_lower_idx: model.lip_lower_idx.clone(),
        lip_all_idx: model.lip_all_idx.clone(),
        upper_face_idx: model.upper_face_idx.clone(),
        files: ModelFiles {
            template: "template.f32".into(),
            shape_basis: "shape_basis.f32".into(),
            expr_basis: "expr_basis.f32".into(),
            jaw_weights: "jaw_weights.f32".into(),
        },
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Runtime(format!("manifest serialization: {e}")))?;
    std::fs::write(dir.join("manifest.json"), json)?;
    write_f32_blob(&dir.join(&manifest.files.template), model.template.iter().copied())?;
    write_f32_blob(&dir.join(&manifest.files.shape_basis), model.shape_basis.iter().copied())?;
    write_f32_blob(&dir.join(&manifest.files.expr_basis), model.expr_basis.iter().copied())?;
    write_f32_blob(&dir.join(&manifest.files.jaw_weights), model.jaw_weights.iter().copied())?;
    Ok(())
}

pub fn load_model(dir: &Path) -> Result<MorphableModel> {
    let mpath = dir.join("manifest.json");
    let text = std::fs::read_to_string(&mpath)
        .map_err(|e| Error::Format(format!("{}: {e}", mpath.display())))?;
    let manifest: ModelManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", mpath.display())))?;
    let (v, s, e) = (manifest.v, manifest.s, manifest.e);
    let template = Array2::from_shape_vec((v, 3), read_f32_blob(&dir.join(&manifest.files.template), v * 3)?)
        .map_err(|e| Error::Format(format!("template shape: {e}")))?;
    let shape_basis =
        Array2::from_shape_vec((v * 3, s), read_f32_blob(&dir.join(&manifest.files.shape_basis), v * 3 * s)?)
            .map_err(|e| Error::Format(format!("shape basis shape: {e}")))?;
    let expr_basis =
        Array2::from_shape_vec((v * 3, e), read_f32_blob(&dir.join(&manifest.files.expr_basis), v * 3 * e)?)
            .map_err(|e| Error::Format(format!("expr basis shape: {e}")))?;
    let jaw_weights = Array1::from_vec(read_f32_blob(&dir.join(&manifest.files.jaw_weights), v)?);
    let model = MorphableModel {
        template,
        shape_basis,
        expr_basis,
        jaw_weights,
        jaw_pivot: manifest.jaw_pivot,
        triangles: manifest.triangles,
        lip_upper_idx: manifest.lip_upper_idx,
        lip_lower_idx: manifest.lip_lower_idx,
        lip_all_idx: manifest.lip_all_idx,
        upper_face_idx: manifest.upper_face_idx,
    };
    model.validate()?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn mini() -> MorphableModel {
        build_mini_model(7, 642, 8, 50).unwrap()
    }

    #[test]
    fn construction_contract() {
        let m = mini();
        assert_eq!(m.num_vertices(), 642);
        assert_eq!(m.expr_dim(), 50);
        assert_eq!(m.shape_dim(), 8);
        assert_eq!(m.lip_upper_idx.len(), m.lip_lower_idx.len());
        assert_eq!(m.lip_upper_idx.len(), 8);
        assert!(!m.lip_all_idx.is_empty());
        assert!(!m.upper_face_idx.is_empty());
        assert_eq!(m.motion_dim(), 56);
    }

    #[test]
    fn deterministic_per_seed() {
        let a = build_mini_model(7, 162, 4, 10).unwrap();
        let b = build_mini_model(7, 162, 4, 10).unwrap();
        assert_eq!(a, b);
        let c = build_mini_model(8, 162, 4, 10).unwrap();
        assert_ne!(a.template, c.template);
    }

    #[test]
    fn invalid_dimensions_error() {
        assert!(matches!(build_mini_model(7, 11, 8, 50), Err(Error::Argument(_))));
        assert!(matches!(build_mini_model(7, 42, 0, 5), Err(Error::Argument(_))));
    }

    #[test]
    fn zero_params_decode_to_template() {
        let m = mini();
        let out = m.decode(&ShapeParams::zeros(8), &MotionFrame::zeros(50)).unwrap();
        assert_eq!(out, m.template);
    }

    #[test]
    fn blendshape_linearity_is_exact() {
        let m = mini();
        let beta = ShapeParams::zeros(8);
        let mut f1 = MotionFrame::zeros(50);
        for i in 0..50 {
            f1.psi[i] = ((i * 7 + 3) % 11) as f64 / 11.0 - 0.4;
        }
        let mut f2 = f1.clone();
        f2.psi *= 2.0;
        let v1 = m.decode(&beta, &f1).unwrap();
        let v2 = m.decode(&beta, &f2).unwrap();
        let d1 = &v1 - &m.template;
        let d2 = &v2 - &m.template;
        // machine precision: the only rounding is (template + d) - template
        let max_err = (&d2 - &(&d1 * 2.0)).iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(max_err < 1e-12, "doubling error {max_err}");
    }

    #[test]
    fn head_rotation_matches_matrix_oracle() {
        let m = mini();
        let mut f = MotionFrame::zeros(50);
        f.theta_h = [0.0, 0.0, std::f64::consts::FRAC_PI_2];
        let out = m.decode(&ShapeParams::zeros(8), &f).unwrap();
        // oracle: 90 degrees about z -> (x,y,z) -> (-y, x, z)
        for i in 0..m.num_vertices() {
            let (x, y, z) = (m.template[[i, 0]], m.template[[i, 1]], m.template[[i, 2]]);
            assert!((out[[i, 0]] - (-y)).abs() < 1e-6);
            assert!((out[[i, 1]] - x).abs() < 1e-6);
            assert!((out[[i, 2]] - z).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_pose_removes_head_rotation() {
        let m = mini();
        let beta = ShapeParams::zeros(8);
        let mut seq = MotionSequence::zeros(4, 50);
        seq.data[[0, 53]] = 0.7;
        seq.data[[1, 54]] = -0.4;
        seq.data[[2, 55]] = 1.2;
        let frames = m.decode_zero_pose(&beta, &seq).unwrap();
        for f in &frames {
            assert_eq!(f, &m.template);
        }
        // consistency with decode when theta_h = 0
        let mut seq2 = MotionSequence::zeros(1, 50);
        seq2.data[[0, 0]] = 1.0; // psi = e_0
        let via_zero_pose = &m.decode_zero_pose(&beta, &seq2).unwrap()[0];
        let mut fr = MotionFrame::zeros(50);
        fr.psi[0] = 1.0;
        let direct = m.decode(&beta, &fr).unwrap();
        assert_eq!(via_zero_pose, &direct);
    }

    #[test]
    fn lip_opening_bounds_and_mouth_open_basis() {
        let m = mini();
        let rest = m.lip_opening(&m.template).unwrap();
        assert!(rest >= 0.0 && rest <= 2.0 * MINI_SLIT_GAP, "rest opening {rest}");
        let beta = ShapeParams::zeros(8);
        let mut f = MotionFrame::zeros(50);
        f.psi[0] = 0.8;
        let open = m.lip_opening(&m.decode(&beta, &f).unwrap()).unwrap();
        assert!(open > rest, "open {open} vs rest {rest}");
        // jaw opens the mouth as well
        let mut fj = MotionFrame::zeros(50);
        fj.theta_j = [0.2, 0.0, 0.0];
        let open_j = m.lip_opening(&m.decode(&beta, &fj).unwrap()).unwrap();
        assert!(open_j > rest, "jaw open {open_j} vs rest {rest}");
    }

    #[test]
    fn lip_opening_hand_computed_toy() {
        // 12-vertex toy mesh, 2 pairs at distances 0.01 and 0.03
        let mut template = Array2::zeros((12, 3));
        template[[0, 1]] = 0.01; // pair 0: (0, 1)
        template[[2, 1]] = 0.05; // pair 1: (2, 3)
        template[[3, 1]] = 0.02;
        let model = MorphableModel {
            template,
            shape_basis: Array2::zeros((36, 1)),
            expr_basis: Array2::zeros((36, 1)),
            jaw_weights: Array1::zeros(12),
            jaw_pivot: [0.0; 3],
            triangles: vec![[0, 1, 2]],
            lip_upper_idx: vec![0, 2],
            lip_lower_idx: vec![1, 3],
            lip_all_idx: vec![0, 1, 2, 3],
            upper_face_idx: vec![4],
        };
        let d = model.lip_opening(&model.template).unwrap();
        assert!((d - 0.02).abs() < 1e-12);
        // symmetric under swapping upper/lower roles
        let mut swapped = model.clone();
        std::mem::swap(&mut swapped.lip_upper_idx, &mut swapped.lip_lower_idx);
        assert_eq!(d, swapped.lip_opening(&model.template).unwrap());
    }

    #[test]
    fn decode_affine_in_shape_and_expression() {
        let m = mini();
        let mut rng = seeded_rng(123);
        let rand_vec = |rng: &mut rand_chacha::ChaCha12Rng, n: usize| {
            Array1::from_shape_fn(n, |_| rng.gen_range(-0.5..0.5))
        };
        let (b1, b2) = (rand_vec(&mut rng, 8), rand_vec(&mut rng, 8));
        let (p1, p2) = (rand_vec(&mut rng, 50), rand_vec(&mut rng, 50));
        let (a, b) = (0.7, -1.3);
        let dec = |beta: &Array1<f64>, psi: &Array1<f64>| {
            let mut f = MotionFrame::zeros(50);
            f.psi = psi.clone();
            m.decode(&ShapeParams { beta: beta.clone() }, &f).unwrap()
        };
        let lhs = dec(&(a * &b1 + b * &b2), &(a * &p1 + b * &p2)) - &m.template;
        let rhs = (dec(&b1, &p1) - &m.template) * a + (dec(&b2, &p2) - &m.template) * b;
        let max_err = (&lhs - &rhs).iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(max_err < 1e-6, "affinity error {max_err}");
    }

    #[test]
    fn rotations_preserve_pairwise_distances() {
        let m = mini();
        let mut f = MotionFrame::zeros(50);
        f.theta_h = [0.3, -0.8, 0.5];
        let out = m.decode(&ShapeParams::zeros(8), &f).unwrap();
        let mut rng = seeded_rng(5);
        for _ in 0..200 {
            let i = rng.gen_range(0..m.num_vertices());
            let j = rng.gen_range(0..m.num_vertices());
            let d0: f64 = (0..3).map(|k| (m.template[[i, k]] - m.template[[j, k]]).powi(2)).sum();
            let d1: f64 = (0..3).map(|k| (out[[i, k]] - out[[j, k]]).powi(2)).sum();
            assert!((d0.sqrt() - d1.sqrt()).abs() < 1e-6);
        }
    }

    #[test]
    fn canonicalization_wraps_to_pi() {
        let t = canonicalize_axis_angle([0.0, 4.0, 0.0]);
        let a = (t[0] * t[0] + t[1] * t[1] + t[2] * t[2]).sqrt();
        assert!(a <= std::f64::consts::PI + 1e-12);
        // same rotation
        let p = [0.3, 0.1, -0.2];
        let r1 = rotate_axis_angle([0.0, 4.0, 0.0], p);
        let r2 = rotate_axis_angle(t, p);
        for k in 0..3 {
            assert!((r1[k] - r2[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn projection_contracts() {
        let cam = CameraPose {
            extrinsic: [
                [1.0, 0.0, 0.0, 0.0],
                [0.0, 1.0, 0.0, 0.0],
                [0.0, 0.0, 1.0, 0.0],
                [0.0, 0.0, 0.0, 1.0],
            ],
            focal: 100.0,
            cx: 64.0,
            cy: 48.0,
            width: 128,
            height: 96,
        };
        let pts = array![[0.0, 0.0, 1.0], [0.1, 0.0, 2.0], [0.0, 0.0, -1.0]];
        let proj = project_vertices(&pts, &cam).unwrap();
        assert!((proj.pix[[0, 0]] - 64.0).abs() < 1e-12);
        assert!((proj.pix[[0, 1]] - 48.0).abs() < 1e-12);
        assert!(proj.valid[0] && proj.valid[1]);
        assert!(!proj.valid[2]);

        // translating the camera by (t,0,0) shifts projections by -f*t/z
        let t = 0.05;
        let mut cam2 = cam.clone();
        cam2.extrinsic[0][3] = -t; // world-to-camera translation of a camera moved by +t
        let proj2 = project_vertices(&pts, &cam2).unwrap();
        for i in 0..2 {
            let z = pts[[i, 2]];
            let expect = proj.pix[[i, 0]] - 100.0 * t / z;
            assert!((proj2.pix[[i, 0]] - expect).abs() < 1e-9);
        }

        // degenerate camera errors
        let mut bad = cam.clone();
        bad.extrinsic[0][0] = 0.0;
        bad.extrinsic[1][1] = 0.0;
        bad.extrinsic[2][2] = 0.0;
        assert!(matches!(project_vertices(&pts, &bad), Err(Error::Argument(_))));
    }

    #[test]
    fn loader_roundtrip_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let m = build_mini_model(11, 162, 4, 12).unwrap();
        let d1 = dir.path().join("a");
        let d2 = dir.path().join("b");
        save_model(&m, &d1).unwrap();
        let loaded = load_model(&d1).unwrap();
        save_model(&loaded, &d2).unwrap();
        for f in ["manifest.json", "template.f32", "shape_basis.f32", "expr_basis.f32", "jaw_weights.f32"] {
            let b1 = std::fs::read(d1.join(f)).unwrap();
            let b2 = std::fs::read(d2.join(f)).unwrap();
            assert_eq!(b1, b2, "{f} differs after round-trip");
        }
    }

    #[test]
    fn truncated_blob_reports_counts() {
        let dir = tempfile::tempdir().unwrap();
        let m = build_mini_model(3, 42, 2, 4).unwrap();
        save_model(&m, dir.path()).unwrap();
        let tpath = dir.path().join("template.f32");
        let bytes = std::fs::read(&tpath).unwrap();
        std::fs::write(&tpath, &bytes[..bytes.len() - 8]).unwrap();
        match load_model(dir.path()) {
            Err(Error::Validation(msg)) => {
                assert!(msg.contains("expected") && msg.contains("found"), "{msg}");
            }
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn tape_decode_matches_plain_decode() {
        let m = build_mini_model(21, 162, 4, 10).unwrap();
        let beta = ShapeParams {
            beta: Array1::from_shape_fn(4, |i| 0.2 * (i as f64 - 1.5)),
        };
        let mut motion = MotionSequence::zeros(3, 10);
        let mut rng = seeded_rng(9);
        for x in motion.data.iter_mut() {
            *x = rng.gen_range(-0.4..0.4);
        }
        for zero_head in [false, true] {
            let mut tape = Tape::new();
            let mv = tape.constant(motion.data.clone().into_dyn());
            let out = decode_motion_tape(&mut tape, &m, &beta, mv, zero_head);
            let got = tape.value_owned(out);
            let expect = m.decode_sequence(&beta, &motion, zero_head).unwrap();
            for f in 0..3 {
                for i in 0..m.num_vertices() {
                    for k in 0..3 {
                        let e = expect[f][[i, k]];
                        let g = got[[f, i, k]];
                        assert!((e - g).abs() < 1e-12, "mismatch at {f},{i},{k}: {e} vs {g}");
                    }
                }
            }
        }
    }

    #[test]
    fn tape_decode_gradient_matches_fd() {
        let m = build_mini_model(31, 42, 2, 6).unwrap();
        let beta = ShapeParams::zeros(2);
        let mut rng = seeded_rng(17);
        let t_frames = 2;
        let motion0 = Arr::from_shape_fn(IxDyn(&[t_frames, 12]), |_| rng.gen_range(-0.3..0.3));

        let mut tape = Tape::new();
        let mv = tape.leaf(motion0.clone());
        let verts = decode_motion_tape(&mut tape, &m, &beta, mv, false);
        // weighted sum so every output influences the loss differently
        let wsum = Arr::from_shape_fn(IxDyn(&tape.shape(verts)), |ix| {
            ((ix[0] * 31 + ix[1] * 7 + ix[2]) % 13) as f64 / 13.0 - 0.5
        });
        let w = tape.constant(wsum.clone());
        let prod = tape.mul(verts, w);
        let loss = tape.sum_all(prod);
        let mut grads = tape.backward(loss);
        let g = grads.take(mv).unwrap();

        let eval = |mo: &Arr| -> f64 {
            let mut t2 = Tape::new();
            let mv = t2.constant(mo.clone());
            let verts = decode_motion_tape(&mut t2, &m, &beta, mv, false);
            let w = t2.constant(wsum.clone());
            let prod = t2.mul(verts, w);
            let l = t2.sum_all(prod);
            t2.scalar(l)
        };
        let eps = 1e-6;
        for idx in [0usize, 5, 6, 7, 9, 11, 15, 20] {
            let mut mp = motion0.clone();
            mp.as_slice_mut().unwrap()[idx] += eps;
            let mut mm = motion0.clone();
            mm.as_slice_mut().unwrap()[idx] -= eps;
            let fd = (eval(&mp) - eval(&mm)) / (2.0 * eps);
            let an = g.as_slice().unwrap()[idx];
            let denom = fd.abs().max(an.abs()).max(1e-9);
            assert!((fd - an).abs() / denom < 1e-6, "idx {idx}: fd={fd} an={an}");
        }
    }
}
