//! Meta Gaussian renderer: per-vertex template Gaussians plus per-triangle
//! UV Gaussians built from a reference image, animated by vertex replacement,
//! splatted to a feature image, and refined to RGB. The whole path carries
//! reverse-mode gradients back to vertex positions and renderer parameters.

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::{Array1, Array2, Array3, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{project_vertices, CameraPose};
use crate::error::{Error, Result};
use crate::morphable::{MorphableModel, MotionFrame, ShapeParams};
use crate::nn::{self, conv2d, linear, seeded_rng, upsample2, Bound, Pad, ParamSet};
use crate::splat::splat;
use crate::tape::{Arr, Tape, Var};

pub const APPEARANCE_DIM: usize = 16;
pub const FEAT_DIM: usize = 64;
pub const BASE_FEAT_DIM: usize = 16;
const DV_HIDDEN: usize = 64;
const UV_HIDDEN: usize = 48;
/// Template/UV attribute widths: rot 4 + scale 3 + opacity 1 + appearance C.
const TMPL_ATTRS: usize = 8 + APPEARANCE_DIM;
const UV_ATTRS: usize = 11 + APPEARANCE_DIM;

// ---- gaussian set ----

/// Splat primitives; `scale` is stored in log-space, `opacity` after
/// squashing into [0, 1], `appearance` raw (channels 0..3 squash to RGB in
/// the refiner).
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSet {
    pub mu: Array2<f64>,
    pub rot: Array2<f64>,
    pub scale: Array2<f64>,
    pub opacity: Array1<f64>,
    pub appearance: Array2<f64>,
}

impl GaussianSet {
    pub fn len(&self) -> usize {
        self.mu.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.nrows() == 0
    }

    pub fn validate(&self) -> Result<()> {
        let g = self.len();
        if self.rot.dim() != (g, 4)
            || self.scale.dim() != (g, 3)
            || self.opacity.len() != g
            || self.appearance.nrows() != g
        {
            return Err(Error::Validation("gaussian set field shapes disagree".into()));
        }
        for i in 0..g {
            let n: f64 = (0..4).map(|k| self.rot[[i, k]] * self.rot[[i, k]]).sum::<f64>().sqrt();
            if (n - 1.0).abs() > 1e-6 {
                return Err(Error::Validation(format!("quaternion {i} has norm {n}")));
            }
            if !(0.0..=1.0).contains(&self.opacity[i]) {
                return Err(Error::Validation(format!("opacity {i} out of [0,1]")));
            }
        }
        let finite = self.mu.iter().all(|x| x.is_finite())
            && self.scale.iter().all(|x| x.is_finite())
            && self.appearance.iter().all(|x| x.is_finite());
        if !finite {
            return Err(Error::Validation("gaussian set contains non-finite values".into()));
        }
        Ok(())
    }

    pub fn concat(&self, other: &GaussianSet) -> GaussianSet {
        use ndarray::concatenate;
        use ndarray::Axis;
        GaussianSet {
            mu: concatenate(Axis(0), &[self.mu.view(), other.mu.view()]).unwrap(),
            rot: concatenate(Axis(0), &[self.rot.view(), other.rot.view()]).unwrap(),
            scale: concatenate(Axis(0), &[self.scale.view(), other.scale.view()]).unwrap(),
            opacity: concatenate(Axis(0), &[self.opacity.view(), other.opacity.view()]).unwrap(),
            appearance: concatenate(Axis(0), &[self.appearance.view(), other.appearance.view()])
                .unwrap(),
        }
    }
}

// ---- image encoders ----

/// Multi-scale convolutional image encoder; levels halve resolution.
pub trait ImageEncoder: Send + Sync {
    /// Feature pyramid for a `(3, H, W)` image on the tape.
    fn encode_tape(&self, t: &mut Tape, img: Var) -> Vec<Var>;
}

pub struct ImageEncoderRegistry {
    encoders: HashMap<String, Arc<dyn ImageEncoder>>,
}

impl Default for ImageEncoderRegistry {
    fn default() -> Self {
        let mut r = ImageEncoderRegistry { encoders: HashMap::new() };
        r.register("desk", Arc::new(DeskImageEncoder::new(0)));
        r
    }
}

impl ImageEncoderRegistry {
    pub fn register(&mut self, id: &str, enc: Arc<dyn ImageEncoder>) {
        self.encoders.insert(id.to_string(), enc);
    }

    pub fn get(&self, id: &str) -> Result<Arc<dyn ImageEncoder>> {
        self.encoders
            .get(id)
            .cloned()
            .ok_or_else(|| Error::Config(format!("unknown image encoder id: {id}")))
    }
}

/// Fixed-seed shallow convolutional pyramid: 3 -> 16 -> 32 -> 64 channels at
/// 1/2, 1/4, 1/8 resolution, edge padding throughout.
pub struct DeskImageEncoder {
    weights: Vec<(Arr, Arr)>,
}

impl DeskImageEncoder {
    pub fn new(seed: u64) -> Self {
        let mut rng = seeded_rng(seed.wrapping_add(0x1A6E));
        let dims = [(3usize, 16usize), (16, 32), (32, FEAT_DIM)];
        let weights = dims
            .iter()
            .map(|&(cin, cout)| {
                let lim = (6.0 / ((cin + cout) * 9) as f64).sqrt();
                let w = Arr::from_shape_fn(IxDyn(&[cout, cin, 3, 3]), |_| rng.gen_range(-lim..lim));
                (w, Arr::zeros(IxDyn(&[cout])))
            })
            .collect();
        DeskImageEncoder { weights }
    }
}

impl ImageEncoder for DeskImageEncoder {
    fn encode_tape(&self, t: &mut Tape, img: Var) -> Vec<Var> {
        let mut x = img;
        let mut levels = Vec::with_capacity(self.weights.len());
        for (w, b) in &self.weights {
            let wv = t.constant(w.clone());
            let bv = t.constant(b.clone());
            x = conv2d(t, x, wv, bv, 2, Pad::Edge);
            x = t.tanh(x);
            levels.push(x);
        }
        levels
    }
}

/// Reference-image encoding: the deepest feature map plus a pooled identity
/// embedding. Trainable per-vertex base features live in the renderer
/// parameter set, not here.
#[derive(Clone, Debug)]
pub struct RefEncoding {
    /// `(d_f, H/8, W/8)`.
    pub feature_map: Array3<f64>,
    /// Pooled identity embedding `(d_f)`.
    pub f_id: Array1<f64>,
}

pub fn encode_reference(
    registry: &ImageEncoderRegistry,
    image: &Array3<f64>,
    encoder_id: &str,
) -> Result<RefEncoding> {
    let (c, h, w) = image.dim();
    if c != 3 || h < 64 || w < 64 {
        return Err(Error::Argument(format!(
            "reference image must be (3, >=64, >=64), got ({c}, {h}, {w})"
        )));
    }
    let enc = registry.get(encoder_id)?;
    let mut tape = Tape::new();
    let img = tape.constant(image.clone().into_dyn());
    let levels = enc.encode_tape(&mut tape, img);
    let deepest = tape
        .value_owned(*levels.last().expect("encoder produced no levels"))
        .into_dimensionality::<ndarray::Ix3>()
        .unwrap();
    let (df, fh, fw) = deepest.dim();
    let mut f_id = Array1::zeros(df);
    for ch in 0..df {
        let mut acc = 0.0;
        for y in 0..fh {
            for x in 0..fw {
                acc += deepest[[ch, y, x]];
            }
        }
        f_id[ch] = acc / (fh * fw) as f64;
    }
    Ok(RefEncoding { feature_map: deepest, f_id })
}

/// Edge-clamped bilinear sample of a CHW map at image-space pixel (u, v),
/// where the map covers the full image extent.
pub fn sample_feature(map: &Array3<f64>, u: f64, v: f64, img_w: usize, img_h: usize) -> Array1<f64> {
    let (c, fh, fw) = map.dim();
    let fx = (u * fw as f64 / img_w as f64 - 0.5).clamp(0.0, (fw - 1) as f64);
    let fy = (v * fh as f64 / img_h as f64 - 0.5).clamp(0.0, (fh - 1) as f64);
    let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(fw - 1), (y0 + 1).min(fh - 1));
    let (ax, ay) = (fx - x0 as f64, fy - y0 as f64);
    let mut out = Array1::zeros(c);
    for ch in 0..c {
        out[ch] = (1.0 - ax) * (1.0 - ay) * map[[ch, y0, x0]]
            + ax * (1.0 - ay) * map[[ch, y0, x1]]
            + (1.0 - ax) * ay * map[[ch, y1, x0]]
            + ax * ay * map[[ch, y1, x1]];
    }
    out
}

// ---- renderer parameters and per-identity state ----

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RendererConfig {
    pub num_vertices: usize,
    pub image_size: (usize, usize),
    pub appearance_dim: usize,
    pub base_feat_dim: usize,
}

impl RendererConfig {
    pub fn for_model(model: &MorphableModel, image_size: (usize, usize)) -> Self {
        RendererConfig {
            num_vertices: model.num_vertices(),
            image_size,
            appearance_dim: APPEARANCE_DIM,
            base_feat_dim: BASE_FEAT_DIM,
        }
    }
}

/// Trainable renderer parameters: template attribute MLP `D_v`, UV decoder
/// `D_uv`, per-vertex base features `f_b`, and the refiner U-Net.
pub fn init_renderer_params(seed: u64, cfg: &RendererConfig) -> ParamSet {
    let mut rng = seeded_rng(seed);
    let mut ps = ParamSet::new();
    let dv_in = FEAT_DIM + cfg.base_feat_dim + FEAT_DIM;
    ps.add_linear(&mut rng, "rend.dv.0", dv_in, DV_HIDDEN);
    ps.add_linear(&mut rng, "rend.dv.1", DV_HIDDEN, TMPL_ATTRS);
    ps.add_conv(&mut rng, "rend.duv.0", FEAT_DIM, UV_HIDDEN, 3);
    ps.add_conv(&mut rng, "rend.duv.1", UV_HIDDEN, UV_ATTRS, 3);
    let fb = Arr::from_shape_fn(IxDyn(&[cfg.num_vertices, cfg.base_feat_dim]), |_| {
        rng.gen_range(-0.05..0.05)
    });
    ps.insert("rend.f_b", fb);
    // refiner U-Net over the (C+1)-channel splat output
    let rin = cfg.appearance_dim + 1;
    ps.add_conv(&mut rng, "rend.refine.enc0", rin, 8, 3);
    ps.add_conv(&mut rng, "rend.refine.down1", 8, 16, 3);
    ps.add_conv(&mut rng, "rend.refine.down2", 16, 32, 3);
    ps.add_conv(&mut rng, "rend.refine.up1", 32 + 16, 16, 3);
    ps.add_conv(&mut rng, "rend.refine.up2", 16 + 8, 8, 3);
    ps.insert("rend.refine.final.w", Arr::zeros(IxDyn(&[3, 8, 3, 3])));
    ps.insert("rend.refine.final.b", Arr::zeros(IxDyn(&[3])));
    ps
}

/// Constant per-identity inputs derived from one reference image.
#[derive(Clone, Debug)]
pub struct RendererState {
    pub ref_vertices: Array2<f64>,
    pub ref_enc: RefEncoding,
    /// Per-vertex sampled reference features `(V, d_f)`.
    pub f_s: Array2<f64>,
    /// Per-triangle sampled features arranged on a near-square grid
    /// `(d_f, gh, gw)` in triangle-index order.
    pub uv_grid: Array3<f64>,
    pub grid_dims: (usize, usize),
    pub n_tri: usize,
    pub mean_edge: f64,
}

pub fn prepare_reference(
    model: &MorphableModel,
    beta: &ShapeParams,
    ref_frame: &MotionFrame,
    ref_image: &Array3<f64>,
    camera: &CameraPose,
    registry: &ImageEncoderRegistry,
    encoder_id: &str,
) -> Result<RendererState> {
    let ref_enc = encode_reference(registry, ref_image, encoder_id)?;
    let ref_vertices = model.decode(beta, ref_frame)?;
    let proj = project_vertices(&ref_vertices, camera)?;
    let v = model.num_vertices();
    let mut f_s = Array2::zeros((v, FEAT_DIM));
    for i in 0..v {
        let f = sample_feature(
            &ref_enc.feature_map,
            proj.pix[[i, 0]],
            proj.pix[[i, 1]],
            camera.width,
            camera.height,
        );
        f_s.row_mut(i).assign(&f);
    }
    // per-triangle barycenter features on a near-square grid
    let n_tri = model.triangles.len();
    let gw = (n_tri as f64).sqrt().ceil() as usize;
    let gh = n_tri.div_ceil(gw);
    let mut uv_grid = Array3::zeros((FEAT_DIM, gh, gw));
    for (ti, tri) in model.triangles.iter().enumerate() {
        let mut bary = [0.0f64; 3];
        for k in 0..3 {
            bary[k] = (ref_vertices[[tri[0], k]] + ref_vertices[[tri[1], k]] + ref_vertices[[tri[2], k]]) / 3.0;
        }
        let cam_p = camera.world_to_cam(bary);
        let pix = camera.cam_to_pixel(cam_p).unwrap_or([camera.cx, camera.cy]);
        let f = sample_feature(&ref_enc.feature_map, pix[0], pix[1], camera.width, camera.height);
        for ch in 0..FEAT_DIM {
            uv_grid[[ch, ti / gw, ti % gw]] = f[ch];
        }
    }
    Ok(RendererState {
        ref_vertices,
        ref_enc,
        f_s,
        uv_grid,
        grid_dims: (gh, gw),
        n_tri,
        mean_edge: model.mean_edge_length(),
    })
}

// ---- gaussian construction on the tape ----

/// Gaussian attributes as tape vars (scale in log-space).
pub struct GaussVars {
    pub mu: Var,
    pub rot: Var,
    pub scale_log: Var,
    pub opacity: Var,
    pub appearance: Var,
}

fn normalize_quat(t: &mut Tape, raw: Var) -> Var {
    // bias toward identity so zero weights give the identity rotation
    let bias = t.constant(
        Arr::from_shape_vec(IxDyn(&[1, 4]), vec![1.0, 0.0, 0.0, 0.0]).unwrap(),
    );
    let q = t.add(raw, bias);
    let sq = t.square(q);
    let n2 = t.sum_axis(sq, 1);
    let n2 = t.add_scalar(n2, 1e-12);
    let n = t.sqrt(n2);
    t.div(q, n)
}

/// Bounded log-scale around a base stddev: log(s0) + 2 tanh(raw/2).
fn bounded_log_scale(t: &mut Tape, raw: Var, s0: f64) -> Var {
    let half = t.scale(raw, 0.5);
    let th = t.tanh(half);
    let bounded = t.scale(th, 2.0);
    t.add_scalar(bounded, s0.ln())
}

/// Template Gaussians: one per vertex, means at the decoded reference
/// vertices, attributes decoded from `f_s ⊕ f_b ⊕ f_id`.
pub fn build_template_gaussians_tape(
    t: &mut Tape,
    bound: &Bound,
    state: &RendererState,
) -> GaussVars {
    let v = state.f_s.nrows();
    let mu = t.constant(state.ref_vertices.clone().into_dyn());
    let f_s = t.constant(state.f_s.clone().into_dyn());
    let f_b = bound.var("rend.f_b");
    let f_id_row = state
        .ref_enc
        .f_id
        .clone()
        .into_shape_with_order((1, FEAT_DIM))
        .unwrap();
    let f_id_c = t.constant(f_id_row.into_dyn());
    let f_id_b = t.broadcast_to(f_id_c, &[v, FEAT_DIM]);
    let input = t.concat(1, &[f_s, f_b, f_id_b]);
    let h = linear(t, bound, "rend.dv.0", input);
    let h = t.relu(h);
    let attrs = linear(t, bound, "rend.dv.1", h);

    let rot_raw = t.slice(attrs, 1, 0, 4);
    let scale_raw = t.slice(attrs, 1, 4, 3);
    let op_raw = t.slice(attrs, 1, 7, 1);
    let app = t.slice(attrs, 1, 8, APPEARANCE_DIM);
    let rot = normalize_quat(t, rot_raw);
    let scale_log = bounded_log_scale(t, scale_raw, 0.45 * state.mean_edge);
    let op_b = t.add_scalar(op_raw, 1.0);
    let op_sig = t.sigmoid(op_b);
    let opacity = t.reshape(op_sig, &[v]);
    GaussVars { mu, rot, scale_log, opacity, appearance: app }
}

/// Per-triangle local offsets decoded by the UV conv decoder, with the
/// remaining attributes. Offsets are clamped in norm to the mean edge length.
pub struct UvDecoded {
    /// `(n_tri, 3)` offsets in the local triangle frame.
    pub local_offsets: Var,
    pub rot: Var,
    pub scale_log: Var,
    pub opacity: Var,
    pub appearance: Var,
}

pub fn decode_uv_attributes_tape(t: &mut Tape, bound: &Bound, state: &RendererState) -> UvDecoded {
    let (gh, gw) = state.grid_dims;
    let n = state.n_tri;
    let grid = t.constant(state.uv_grid.clone().into_dyn());
    let w0 = bound.var("rend.duv.0.w");
    let b0 = bound.var("rend.duv.0.b");
    let h = conv2d(t, grid, w0, b0, 1, Pad::Edge);
    let h = t.relu(h);
    let w1 = bound.var("rend.duv.1.w");
    let b1 = bound.var("rend.duv.1.b");
    let out = conv2d(t, h, w1, b1, 1, Pad::Edge);
    // (attrs, gh, gw) -> (gh*gw, attrs) -> first n rows
    let flat = t.reshape(out, &[UV_ATTRS, gh * gw]);
    let flat_t = {
        // transpose via matmul with identity is wasteful; use reshape trick:
        // gather rows after an explicit transpose op
        let v = t.value_owned(flat);
        let vt = v.into_dimensionality::<ndarray::Ix2>().unwrap().t().to_owned();
        let ng = t.needs_grad(flat);
        t.custom(
            vt.into_dyn(),
            ng,
            Box::new(move |g, acc| {
                let gt = g
                    .view()
                    .into_dimensionality::<ndarray::Ix2>()
                    .unwrap()
                    .t()
                    .to_owned();
                acc(flat, gt.into_dyn());
            }),
        )
    };
    let attrs = t.slice(flat_t, 0, 0, n);

    let dmu_raw = t.slice(attrs, 1, 0, 3);
    let rot_raw = t.slice(attrs, 1, 3, 4);
    let scale_raw = t.slice(attrs, 1, 7, 3);
    let op_raw = t.slice(attrs, 1, 10, 1);
    let app = t.slice(attrs, 1, 11, APPEARANCE_DIM);

    // norm clamp: dmu * L * tanh(|dmu|) / |dmu|
    let sq = t.square(dmu_raw);
    let n2 = t.sum_axis(sq, 1);
    let n2e = t.add_scalar(n2, 1e-24);
    let nrm = t.sqrt(n2e);
    let tanh_n = t.tanh(nrm);
    let ratio = t.div(tanh_n, nrm);
    let ratio = t.scale(ratio, state.mean_edge);
    let local_offsets = t.mul(dmu_raw, ratio);

    let rot = normalize_quat(t, rot_raw);
    let scale_log = bounded_log_scale(t, scale_raw, 0.28 * state.mean_edge);
    let op_b = t.add_scalar(op_raw, 1.0);
    let op_sig = t.sigmoid(op_b);
    let opacity = t.reshape(op_sig, &[n]);
    UvDecoded { local_offsets, rot, scale_log, opacity, appearance: app }
}

/// Orthonormal per-triangle frames `(u1, u2, u3)` from a vertex var `(V, 3)`.
fn triangle_frames_tape(
    t: &mut Tape,
    vertices: Var,
    triangles: &[[usize; 3]],
) -> (Var, Var, Var, Var) {
    let i0: Vec<usize> = triangles.iter().map(|t| t[0]).collect();
    let i1: Vec<usize> = triangles.iter().map(|t| t[1]).collect();
    let i2: Vec<usize> = triangles.iter().map(|t| t[2]).collect();
    let v0 = t.index_select(vertices, &i0);
    let v1 = t.index_select(vertices, &i1);
    let v2 = t.index_select(vertices, &i2);
    let sum01 = t.add(v0, v1);
    let sum012 = t.add(sum01, v2);
    let bary = t.scale(sum012, 1.0 / 3.0);
    let e1 = t.sub(v1, v0);
    let e2 = t.sub(v2, v0);
    let u1 = normalize_rows(t, e1);
    let nrm = t.cross3(e1, e2);
    let u3 = normalize_rows(t, nrm);
    let u2 = t.cross3(u3, u1);
    (bary, u1, u2, u3)
}

fn normalize_rows(t: &mut Tape, x: Var) -> Var {
    let sq = t.square(x);
    let n2 = t.sum_axis(sq, 1);
    let n2e = t.add_scalar(n2, 1e-18);
    let n = t.sqrt(n2e);
    t.div(x, n)
}

/// UV Gaussian means: barycenter + frame-rotated local offset.
pub fn uv_means_tape(
    t: &mut Tape,
    vertices: Var,
    triangles: &[[usize; 3]],
    local_offsets: Var,
) -> Var {
    let (bary, u1, u2, u3) = triangle_frames_tape(t, vertices, triangles);
    let a = t.slice(local_offsets, 1, 0, 1);
    let b = t.slice(local_offsets, 1, 1, 1);
    let c = t.slice(local_offsets, 1, 2, 1);
    let pa = t.mul(u1, a);
    let pb = t.mul(u2, b);
    let pc = t.mul(u3, c);
    let s1 = t.add(pa, pb);
    let s2 = t.add(s1, pc);
    t.add(bary, s2)
}

// ---- public (plain) builder and animate operations ----

fn gauss_vars_to_set(t: &Tape, gv: &GaussVars) -> GaussianSet {
    GaussianSet {
        mu: t.value_owned(gv.mu).into_dimensionality().unwrap(),
        rot: t.value_owned(gv.rot).into_dimensionality().unwrap(),
        scale: t.value_owned(gv.scale_log).into_dimensionality().unwrap(),
        opacity: t.value_owned(gv.opacity).into_dimensionality().unwrap(),
        appearance: t.value_owned(gv.appearance).into_dimensionality().unwrap(),
    }
}

/// One Gaussian per vertex of the reference mesh.
pub fn build_template_gaussians(params: &ParamSet, state: &RendererState) -> GaussianSet {
    let mut tape = Tape::new();
    let bound = Bound::constants(&mut tape, params);
    let gv = build_template_gaussians_tape(&mut tape, &bound, state);
    gauss_vars_to_set(&tape, &gv)
}

/// One Gaussian per triangle, mean at barycenter + clamped decoded offset.
pub fn build_uv_gaussians(params: &ParamSet, state: &RendererState, model: &MorphableModel) -> GaussianSet {
    let mut tape = Tape::new();
    let bound = Bound::constants(&mut tape, params);
    let uv = decode_uv_attributes_tape(&mut tape, &bound, state);
    let verts = tape.constant(state.ref_vertices.clone().into_dyn());
    let mu = uv_means_tape(&mut tape, verts, &model.triangles, uv.local_offsets);
    GaussianSet {
        mu: tape.value_owned(mu).into_dimensionality().unwrap(),
        rot: tape.value_owned(uv.rot).into_dimensionality().unwrap(),
        scale: tape.value_owned(uv.scale_log).into_dimensionality().unwrap(),
        opacity: tape.value_owned(uv.opacity).into_dimensionality().unwrap(),
        appearance: tape.value_owned(uv.appearance).into_dimensionality().unwrap(),
    }
}

/// How Gaussian means correspond to mesh vertices.
pub enum Correspondence<'a> {
    /// One Gaussian per vertex: means are replaced by the new vertices.
    PerVertex,
    /// One Gaussian per triangle: means are recomputed as the new barycenter
    /// plus the rigidly carried local offset.
    PerTriangle(&'a [[usize; 3]]),
}

/// Replace positions for new vertices, keeping all other attributes
/// unchanged (bit-exactly).
pub fn animate(
    gaussians: &GaussianSet,
    ref_vertices: &Array2<f64>,
    new_vertices: &Array2<f64>,
    corr: Correspondence<'_>,
) -> Result<GaussianSet> {
    if ref_vertices.dim() != new_vertices.dim() {
        return Err(Error::Argument(format!(
            "vertex count mismatch: ref {:?} vs new {:?}",
            ref_vertices.dim(),
            new_vertices.dim()
        )));
    }
    let mu = match corr {
        Correspondence::PerVertex => {
            if gaussians.len() != new_vertices.nrows() {
                return Err(Error::Argument("per-vertex correspondence needs G = V".into()));
            }
            new_vertices.clone()
        }
        Correspondence::PerTriangle(tris) => {
            if gaussians.len() != tris.len() {
                return Err(Error::Argument("per-triangle correspondence needs G = #triangles".into()));
            }
            let mut tape = Tape::new();
            // recover local offsets from the reference configuration
            let rv = tape.constant(ref_vertices.clone().into_dyn());
            let (bary_r, u1r, u2r, u3r) = triangle_frames_tape(&mut tape, rv, tris);
            let mu_c = tape.constant(gaussians.mu.clone().into_dyn());
            let world_off = tape.sub(mu_c, bary_r);
            // local = [u1·d, u2·d, u3·d]
            let d1 = rowdot(&mut tape, u1r, world_off);
            let d2 = rowdot(&mut tape, u2r, world_off);
            let d3 = rowdot(&mut tape, u3r, world_off);
            let local = tape.concat(1, &[d1, d2, d3]);
            let nv = tape.constant(new_vertices.clone().into_dyn());
            let mu_new = uv_means_tape(&mut tape, nv, tris, local);
            tape.value_owned(mu_new).into_dimensionality().unwrap()
        }
    };
    Ok(GaussianSet {
        mu,
        rot: gaussians.rot.clone(),
        scale: gaussians.scale.clone(),
        opacity: gaussians.opacity.clone(),
        appearance: gaussians.appearance.clone(),
    })
}

fn rowdot(t: &mut Tape, a: Var, b: Var) -> Var {
    let p = t.mul(a, b);
    t.sum_axis(p, 1)
}

/// Splat a Gaussian set: `(C, H, W)` feature image plus `(H, W)` alpha map.
pub fn splat_gaussians(set: &GaussianSet, camera: &CameraPose) -> Result<(Array3<f64>, Array2<f64>)> {
    set.validate()?;
    let mut tape = Tape::new();
    let mu = tape.constant(set.mu.clone().into_dyn());
    let rot = tape.constant(set.rot.clone().into_dyn());
    let slog = tape.constant(set.scale.clone().into_dyn());
    let scale = tape.exp(slog);
    let op = tape.constant(set.opacity.clone().into_dyn());
    let app = tape.constant(set.appearance.clone().into_dyn());
    let out = splat(&mut tape, mu, rot, scale, op, app, camera)?;
    let full = tape.value_owned(out).into_dimensionality::<ndarray::Ix3>().unwrap();
    let c = full.dim().0 - 1;
    let image = full.slice(ndarray::s![..c, .., ..]).to_owned();
    let alpha = full.index_axis(ndarray::Axis(0), c).to_owned();
    Ok((image, alpha))
}

// ---- refiner ----

/// Encoder-decoder refiner with skip connections; with a zero-initialized
/// final layer the output is exactly `sigmoid` of the coarse RGB channels.
pub fn refine_tape(t: &mut Tape, bound: &Bound, f_raw: Var) -> Var {
    let conv = |t: &mut Tape, name: &str, x: Var, stride: usize| -> Var {
        let w = bound.var(&format!("{name}.w"));
        let b = bound.var(&format!("{name}.b"));
        conv2d(t, x, w, b, stride, Pad::Edge)
    };
    let e0 = conv(t, "rend.refine.enc0", f_raw, 1);
    let e0 = t.relu(e0);
    let d1 = conv(t, "rend.refine.down1", e0, 2);
    let d1 = t.relu(d1);
    let d2 = conv(t, "rend.refine.down2", d1, 2);
    let d2 = t.relu(d2);
    let u1 = upsample2(t, d2);
    let u1 = t.concat(0, &[u1, d1]);
    let u1 = conv(t, "rend.refine.up1", u1, 1);
    let u1 = t.relu(u1);
    let u2 = upsample2(t, u1);
    let u2 = t.concat(0, &[u2, e0]);
    let u2 = conv(t, "rend.refine.up2", u2, 1);
    let u2 = t.relu(u2);
    let res = conv(t, "rend.refine.final", u2, 1);
    let coarse_rgb = t.slice(f_raw, 0, 0, 3);
    let sum = t.add(coarse_rgb, res);
    t.sigmoid(sum)
}

pub fn refine(params: &ParamSet, f_raw: &Array3<f64>) -> Result<Array3<f64>> {
    let rin = APPEARANCE_DIM + 1;
    if f_raw.dim().0 != rin {
        return Err(Error::Argument(format!(
            "refiner expects {rin} input channels, got {}",
            f_raw.dim().0
        )));
    }
    let mut tape = Tape::new();
    let bound = Bound::constants(&mut tape, params);
    let x = tape.constant(f_raw.clone().into_dyn());
    let out = refine_tape(&mut tape, &bound, x);
    Ok(tape.value_owned(out).into_dimensionality().unwrap())
}

// ---- full render path ----

/// animate -> splat -> refine on the tape; `vertices` is a `(V, 3)` var.
pub fn render_tape(
    t: &mut Tape,
    bound: &Bound,
    model: &MorphableModel,
    state: &RendererState,
    vertices: Var,
    camera: &CameraPose,
) -> Result<Var> {
    // template gaussians, animated to the given vertices
    let tmpl = build_template_gaussians_tape(t, bound, state);
    let uv = decode_uv_attributes_tape(t, bound, state);
    let uv_mu = uv_means_tape(t, vertices, &model.triangles, uv.local_offsets);

    let mu = t.concat(0, &[vertices, uv_mu]);
    let rot = t.concat(0, &[tmpl.rot, uv.rot]);
    let slog = t.concat(0, &[tmpl.scale_log, uv.scale_log]);
    let scale = t.exp(slog);
    let op = t.concat(0, &[tmpl.opacity, uv.opacity]);
    let app = t.concat(0, &[tmpl.appearance, uv.appearance]);
    let f_raw = splat(t, mu, rot, scale, op, app, camera)?;
    Ok(refine_tape(t, bound, f_raw))
}

/// Render decoded vertices to an RGB image without gradients.
pub fn render(
    params: &ParamSet,
    model: &MorphableModel,
    state: &RendererState,
    vertices: &Array2<f64>,
    camera: &CameraPose,
) -> Result<Array3<f64>> {
    if vertices.nrows() != model.num_vertices() {
        return Err(Error::Argument("vertex count does not match model".into()));
    }
    let mut tape = Tape::new();
    let bound = Bound::constants(&mut tape, params);
    let v = tape.constant(vertices.clone().into_dyn());
    let out = render_tape(&mut tape, &bound, model, state, v, camera)?;
    Ok(tape.value_owned(out).into_dimensionality().unwrap())
}

// ---- stage-2 loss ----

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct Stage2Weights {
    pub pho: f64,
    pub per: f64,
}

impl Default for Stage2Weights {
    fn default() -> Self {
        Stage2Weights { pho: 1.0, per: 0.025 }
    }
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct Stage2Breakdown {
    pub pho: f64,
    pub per: f64,
    pub total: f64,
}

pub struct Stage2LossVars {
    pub total: Var,
    pub breakdown: Stage2Breakdown,
}

/// Photometric (mean absolute) plus multi-scale perceptual feature loss.
pub fn stage2_loss_tape(
    t: &mut Tape,
    pred: Var,
    gt: &Array3<f64>,
    weights: &Stage2Weights,
    encoder: &dyn ImageEncoder,
) -> Result<Stage2LossVars> {
    if t.shape(pred) != gt.shape() {
        return Err(Error::Argument(format!(
            "image shape mismatch: {:?} vs {:?}",
            t.shape(pred),
            gt.shape()
        )));
    }
    let gt_c = t.constant(gt.clone().into_dyn());
    let diff = t.sub(pred, gt_c);
    let ad = t.abs(diff);
    let l_pho = t.mean_all(ad);

    let pred_feats = encoder.encode_tape(t, pred);
    let gt_feats = encoder.encode_tape(t, gt_c);
    let mut per_terms = Vec::with_capacity(pred_feats.len());
    for (pf, gf) in pred_feats.iter().zip(&gt_feats) {
        let d = t.sub(*pf, *gf);
        let sq = t.square(d);
        per_terms.push(t.mean_all(sq));
    }
    let mut l_per = per_terms[0];
    for term in &per_terms[1..] {
        l_per = t.add(l_per, *term);
    }
    let l_per = t.scale(l_per, 1.0 / per_terms.len() as f64);

    let wp = t.scale(l_pho, weights.pho);
    let wper = t.scale(l_per, weights.per);
    let total = t.add(wp, wper);
    let breakdown = Stage2Breakdown {
        pho: t.scalar(l_pho),
        per: t.scalar(l_per),
        total: t.scalar(total),
    };
    Ok(Stage2LossVars { total, breakdown })
}

pub fn stage2_loss(
    pred: &Array3<f64>,
    gt: &Array3<f64>,
    weights: &Stage2Weights,
    encoder: &dyn ImageEncoder,
) -> Result<Stage2Breakdown> {
    let mut tape = Tape::new();
    let p = tape.constant(pred.clone().into_dyn());
    let out = stage2_loss_tape(&mut tape, p, gt, weights, encoder)?;
    Ok(out.breakdown)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::morphable::build_mini_model;

    fn camera_for(size: usize) -> CameraPose {
        CameraPose::frontal(0.45, size as f64 * 1.25, size, size)
    }

    fn setup(v: usize, img: usize) -> (MorphableModel, RendererState, ParamSet, CameraPose) {
        let model = build_mini_model(5, v, 4, 10).unwrap();
        let beta = ShapeParams::zeros(4);
        let camera = camera_for(img);
        let mut rng = seeded_rng(77);
        use rand::Rng;
        let ref_image = Array3::from_shape_fn((3, img, img), |_| rng.gen_range(0.0..1.0));
        let reg = ImageEncoderRegistry::default();
        let state = prepare_reference(
            &model,
            &beta,
            &MotionFrame::zeros(10),
            &ref_image,
            &camera,
            &reg,
            "desk",
        )
        .unwrap();
        let cfg = RendererConfig::for_model(&model, (img, img));
        let params = init_renderer_params(3, &cfg);
        (model, state, params, camera)
    }

    #[test]
    fn reference_encoding_contract() {
        let reg = ImageEncoderRegistry::default();
        let img = Array3::from_shape_fn((3, 256, 256), |(c, y, x)| {
            ((c + y + x) % 11) as f64 / 11.0
        });
        let enc = encode_reference(&reg, &img, "desk").unwrap();
        assert_eq!(enc.feature_map.dim(), (FEAT_DIM, 32, 32));
        let enc2 = encode_reference(&reg, &img, "desk").unwrap();
        assert_eq!(enc.feature_map, enc2.feature_map);
        assert!(matches!(encode_reference(&reg, &img, "nope"), Err(Error::Config(_))));

        // constant image -> spatially constant features (edge padding)
        let flat = Array3::from_elem((3, 128, 128), 0.37);
        let encf = encode_reference(&reg, &flat, "desk").unwrap();
        let (c, h, w) = encf.feature_map.dim();
        for ch in 0..c {
            let v0 = encf.feature_map[[ch, 0, 0]];
            for y in 0..h {
                for x in 0..w {
                    assert!(
                        (encf.feature_map[[ch, y, x]] - v0).abs() < 1e-5,
                        "channel {ch} varies spatially"
                    );
                }
            }
        }
    }

    #[test]
    fn template_gaussians_contract() {
        let (model, state, params, _cam) = setup(162, 64);
        let set = build_template_gaussians(&params, &state);
        assert_eq!(set.len(), model.num_vertices());
        set.validate().unwrap();
        assert!(set.opacity.iter().all(|&o| (0.0..=1.0).contains(&o)));
        assert!(set.appearance.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn uv_gaussians_contract() {
        let (model, state, params, _cam) = setup(162, 64);
        let set = build_uv_gaussians(&params, &state, &model);
        assert_eq!(set.len(), model.triangles.len());
        set.validate().unwrap();
        // offset clamp: |mu - barycenter| <= mean edge length
        for (ti, tri) in model.triangles.iter().enumerate() {
            let mut bary = [0.0f64; 3];
            for k in 0..3 {
                bary[k] = (state.ref_vertices[[tri[0], k]]
                    + state.ref_vertices[[tri[1], k]]
                    + state.ref_vertices[[tri[2], k]])
                    / 3.0;
            }
            let d: f64 = (0..3).map(|k| (set.mu[[ti, k]] - bary[k]).powi(2)).sum::<f64>().sqrt();
            assert!(d <= state.mean_edge * (1.0 + 1e-9), "offset {d} > {}", state.mean_edge);
        }

        // zero decoder weights put means exactly at barycenters
        let mut zeroed = params.clone();
        for name in ["rend.duv.0.w", "rend.duv.0.b", "rend.duv.1.w", "rend.duv.1.b"] {
            zeroed.get_mut(name).fill(0.0);
        }
        let set0 = build_uv_gaussians(&zeroed, &state, &model);
        for (ti, tri) in model.triangles.iter().enumerate() {
            for k in 0..3 {
                let bary = (state.ref_vertices[[tri[0], k]]
                    + state.ref_vertices[[tri[1], k]]
                    + state.ref_vertices[[tri[2], k]])
                    / 3.0;
                assert!((set0.mu[[ti, k]] - bary).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn animate_contracts() {
        let (model, state, params, _cam) = setup(162, 64);
        let tmpl = build_template_gaussians(&params, &state);
        let uv = build_uv_gaussians(&params, &state, &model);

        // identity: new = ref
        let same = animate(&tmpl, &state.ref_vertices, &state.ref_vertices, Correspondence::PerVertex).unwrap();
        assert_eq!(same.mu, state.ref_vertices);
        assert_eq!(same.rot, tmpl.rot);
        let same_uv = animate(
            &uv,
            &state.ref_vertices,
            &state.ref_vertices,
            Correspondence::PerTriangle(&model.triangles),
        )
        .unwrap();
        let drift = (&same_uv.mu - &uv.mu).iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(drift < 1e-12, "uv identity drift {drift}");

        // rigid translation moves every mean by t
        let t = [0.02, -0.01, 0.03];
        let mut moved = state.ref_vertices.clone();
        for i in 0..moved.nrows() {
            for k in 0..3 {
                moved[[i, k]] += t[k];
            }
        }
        let out = animate(&uv, &state.ref_vertices, &moved, Correspondence::PerTriangle(&model.triangles)).unwrap();
        for i in 0..out.len() {
            for k in 0..3 {
                assert!((out.mu[[i, k]] - (uv.mu[[i, k]] + t[k])).abs() < 1e-12);
            }
        }
        // non-position attributes unchanged bit-exactly
        assert_eq!(out.rot, uv.rot);
        assert_eq!(out.scale, uv.scale);
        assert_eq!(out.opacity, uv.opacity);
        assert_eq!(out.appearance, uv.appearance);

        // vertex count mismatch errors
        let short = Array2::zeros((10, 3));
        assert!(animate(&tmpl, &state.ref_vertices, &short, Correspondence::PerVertex).is_err());
    }

    #[test]
    fn animate_template_jacobian_is_identity() {
        // template means equal the new vertices, so d(mu)/d(vertices) = I;
        // probe through the tape path used in render
        let (model, state, params, cam) = setup(42, 64);
        let mut tape = Tape::new();
        let bound = Bound::new(&mut tape, &params);
        let v0 = state.ref_vertices.clone();
        let verts = tape.leaf(v0.clone().into_dyn());
        let out = render_tape(&mut tape, &bound, &model, &state, verts, &cam).unwrap();
        let loss = tape.sum_all(out);
        let mut grads = tape.backward(loss);
        assert!(grads.take(verts).is_some());
    }

    #[test]
    fn refiner_contracts() {
        let (_model, _state, params, _cam) = setup(42, 64);
        let mut rng = seeded_rng(11);
        use rand::Rng;
        let f_raw = Array3::from_shape_fn((APPEARANCE_DIM + 1, 32, 32), |_| rng.gen_range(-1.0..1.0));
        // zero final layer: output = sigmoid(channels 0..3)
        let out = refine(&params, &f_raw).unwrap();
        for c in 0..3 {
            for y in 0..32 {
                for x in 0..32 {
                    let expect = 1.0 / (1.0 + (-f_raw[[c, y, x]]).exp());
                    assert!((out[[c, y, x]] - expect).abs() < 1e-12);
                }
            }
        }
        assert!(out.iter().all(|&v| (0.0..=1.0).contains(&v)));
        // wrong channel count errors
        let bad = Array3::zeros((3, 32, 32));
        assert!(refine(&params, &bad).is_err());
    }

    #[test]
    fn render_is_deterministic_and_motion_sensitive() {
        let (model, state, params, cam) = setup(162, 64);
        let beta = ShapeParams::zeros(4);
        let mut f1 = MotionFrame::zeros(10);
        f1.psi[0] = 0.0;
        let mut f2 = MotionFrame::zeros(10);
        f2.psi[0] = 1.0;
        f2.theta_j = [0.25, 0.0, 0.0];
        let v1 = model.decode(&beta, &f1).unwrap();
        let v2 = model.decode(&beta, &f2).unwrap();
        let a = render(&params, &model, &state, &v1, &cam).unwrap();
        let b = render(&params, &model, &state, &v1, &cam).unwrap();
        assert_eq!(a, b);
        let c = render(&params, &model, &state, &v2, &cam).unwrap();
        let d = (&a - &c).iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(d > 1e-9, "render insensitive to motion");
    }

    #[test]
    fn stage2_loss_contracts() {
        let reg = ImageEncoderRegistry::default();
        let enc = reg.get("desk").unwrap();
        let w = Stage2Weights::default();
        assert_eq!(w.pho, 1.0);
        assert_eq!(w.per, 0.025);
        let mut rng = seeded_rng(13);
        use rand::Rng;
        let gt = Array3::from_shape_fn((3, 32, 32), |_| rng.gen_range(0.0..1.0));
        let b = stage2_loss(&gt, &gt, &w, enc.as_ref()).unwrap();
        assert_eq!(b.pho, 0.0);
        assert_eq!(b.per, 0.0);
        assert_eq!(b.total, 0.0);

        // single channel delta changes L_pho by exactly |delta| / (H*W*3)
        let mut pred = gt.clone();
        let delta = 0.4;
        pred[[1, 5, 7]] += delta;
        let b2 = stage2_loss(&pred, &gt, &w, enc.as_ref()).unwrap();
        let expect = delta / (32.0 * 32.0 * 3.0);
        assert!((b2.pho - expect).abs() < 1e-15, "{} vs {expect}", b2.pho);

        let bad = Array3::zeros((3, 16, 16));
        assert!(stage2_loss(&bad, &gt, &w, enc.as_ref()).is_err());
    }

    #[test]
    fn end_to_end_gradient_to_motion_matches_fd() {
        // decode -> animate -> splat -> refine -> stage-2 loss, gradient
        // w.r.t. one motion parameter (jaw x) vs central differences
        let (model, state, params, cam) = setup(42, 64);
        let beta = ShapeParams::zeros(4);
        let reg = ImageEncoderRegistry::default();
        let enc = reg.get("desk").unwrap();
        let w = Stage2Weights::default();
        let mut rng = seeded_rng(19);
        use rand::Rng;
        let gt = Array3::from_shape_fn((3, 64, 64), |_| rng.gen_range(0.0..1.0));

        let eval = |jaw: f64| -> f64 {
            let mut fr = MotionFrame::zeros(10);
            fr.theta_j = [jaw, 0.0, 0.0];
            fr.psi[0] = 0.3;
            let v = model.decode(&beta, &fr).unwrap();
            let img = render(&params, &model, &state, &v, &cam).unwrap();
            stage2_loss(&img, &gt, &w, enc.as_ref()).unwrap().total
        };

        // analytic: motion var -> decode tape -> render tape -> loss
        let jaw0 = 0.12;
        let mut tape = Tape::new();
        let bound = Bound::new(&mut tape, &params);
        let mut flat = Array2::zeros((1, 16));
        flat[[0, 0]] = 0.3;
        flat[[0, 10]] = jaw0;
        let motion = tape.leaf(flat.into_dyn());
        let verts3 = crate::morphable::decode_motion_tape(&mut tape, &model, &beta, motion, false);
        let v2 = tape.reshape(verts3, &[model.num_vertices(), 3]);
        let img = render_tape(&mut tape, &bound, &model, &state, v2, &cam).unwrap();
        let loss = stage2_loss_tape(&mut tape, img, &gt, &w, enc.as_ref()).unwrap();
        let mut grads = tape.backward(loss.total);
        let g = grads.take(motion).unwrap();
        let an = g[[0, 10]];

        let eps = 1e-4;
        let fd = (eval(jaw0 + eps) - eval(jaw0 - eps)) / (2.0 * eps);
        let denom = fd.abs().max(an.abs()).max(1e-8);
        assert!(
            (fd - an).abs() / denom < 5e-2,
            "end-to-end gradient: fd={fd} analytic={an}"
        );
        assert!(an.abs() > 1e-10, "gradient vanished");
    }
}
