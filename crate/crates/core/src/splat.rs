//! Differentiable Gaussian splat rasterizer.
//!
//! Forward: perspective EWA splatting with front-to-back alpha compositing
//! over globally depth-sorted Gaussians (ties broken by index). Backward:
//! exact reverse-mode gradients for position, rotation, scale, opacity, and
//! appearance, derived analytically and registered as one tape op.
//!
//! Output layout is `(C+1, H, W)`: channels `0..C` are the composited
//! appearance latents (channels 0..3 form the coarse RGB), channel `C` is
//! the alpha map.

use ndarray::{ArrayD, IxDyn};

use crate::camera::CameraPose;
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};

/// Rasterization extent in sigmas. Wide enough that the truncation jump at
/// the footprint edge (exp(-k²/2)) sits far below finite-difference gradient
/// tolerances; 3-sigma truncation would leave a ~1% discontinuity.
const SIGMA_CUTOFF: f64 = 5.0;
/// EWA low-pass dilation added to the 2-D covariance diagonal (pixels²).
const DILATION: f64 = 0.3;
/// Eccentricity skip matching the footprint radius (0.5 * cutoff²).
const E_MAX: f64 = 0.5 * SIGMA_CUTOFF * SIGMA_CUTOFF;
const T_MIN: f64 = 1e-4;
const W_MIN: f64 = 1e-8;
const Z_NEAR: f64 = 1e-2;

type M3 = [[f64; 3]; 3];

fn quat_to_mat(q: [f64; 4]) -> M3 {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// dL/dq for unit q given dL/dR.
fn quat_backward(q: [f64; 4], dr: &M3) -> [f64; 4] {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let dw = 2.0
        * (-z * dr[0][1] + y * dr[0][2] + z * dr[1][0] - x * dr[1][2] - y * dr[2][0]
            + x * dr[2][1]);
    let dx = 2.0
        * (y * dr[0][1] + z * dr[0][2] + y * dr[1][0] - 2.0 * x * dr[1][1] - w * dr[1][2]
            + z * dr[2][0]
            + w * dr[2][1]
            - 2.0 * x * dr[2][2]);
    let dy = 2.0
        * (-2.0 * y * dr[0][0] + x * dr[0][1] + w * dr[0][2] + x * dr[1][0] + z * dr[1][2]
            - w * dr[2][0]
            + z * dr[2][1]
            - 2.0 * y * dr[2][2]);
    let dz = 2.0
        * (-2.0 * z * dr[0][0] - w * dr[0][1] + x * dr[0][2] + w * dr[1][0] - 2.0 * z * dr[1][1]
            + y * dr[1][2]
            + x * dr[2][0]
            + y * dr[2][1]);
    [dw, dx, dy, dz]
}

fn mat_mul(a: &M3, b: &M3) -> M3 {
    let mut o = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            o[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    o
}

fn mat_t(a: &M3) -> M3 {
    let mut o = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            o[i][j] = a[j][i];
        }
    }
    o
}

/// Per-Gaussian quantities shared by the forward and backward passes.
struct Prepared {
    idx: usize,
    p_cam: [f64; 3],
    proj: [f64; 2],
    /// 2-D conic (inverse covariance): (a, b, c).
    conic: [f64; 3],
    sigma2d: [f64; 3],
    jproj: [[f64; 3]; 2],
    rotm: M3,
    sigma_cam: M3,
    aabb: [usize; 4], // x0, x1, y0, y1 (inclusive)
}

struct Scene<'a> {
    mu: &'a [f64],
    rot: &'a [f64],
    scale: &'a [f64],
    opacity: &'a [f64],
    appearance: &'a [f64],
    channels: usize,
    cam_m: M3,
    cam_t: [f64; 3],
    focal: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
}

impl Scene<'_> {
    /// Project, build conics, cull, and depth-sort.
    fn prepare(&self) -> Vec<Prepared> {
        let g_count = self.mu.len() / 3;
        let mut out = Vec::with_capacity(g_count);
        for g in 0..g_count {
            let m = [self.mu[3 * g], self.mu[3 * g + 1], self.mu[3 * g + 2]];
            let p = [
                self.cam_m[0][0] * m[0] + self.cam_m[0][1] * m[1] + self.cam_m[0][2] * m[2] + self.cam_t[0],
                self.cam_m[1][0] * m[0] + self.cam_m[1][1] * m[1] + self.cam_m[1][2] * m[2] + self.cam_t[1],
                self.cam_m[2][0] * m[0] + self.cam_m[2][1] * m[1] + self.cam_m[2][2] * m[2] + self.cam_t[2],
            ];
            if p[2] <= Z_NEAR {
                continue;
            }
            let (f, z) = (self.focal, p[2]);
            let u = f * p[0] / z + self.cx;
            let v = f * p[1] / z + self.cy;
            let q = [
                self.rot[4 * g],
                self.rot[4 * g + 1],
                self.rot[4 * g + 2],
                self.rot[4 * g + 3],
            ];
            let rotm = quat_to_mat(q);
            let s = [self.scale[3 * g], self.scale[3 * g + 1], self.scale[3 * g + 2]];
            // world covariance R D Rᵀ, then camera covariance M Σ Mᵀ
            let mut rd = [[0.0; 3]; 3];
            for i in 0..3 {
                for j in 0..3 {
                    rd[i][j] = rotm[i][j] * s[j] * s[j];
                }
            }
            let sigma_w = mat_mul(&rd, &mat_t(&rotm));
            let sigma_cam = mat_mul(&self.cam_m, &mat_mul(&sigma_w, &mat_t(&self.cam_m)));
            let j = [
                [f / z, 0.0, -f * p[0] / (z * z)],
                [0.0, f / z, -f * p[1] / (z * z)],
            ];
            // Σ2D = J Σc Jᵀ + λI
            let mut s2 = [0.0f64; 3]; // (xx, xy, yy)
            for r in 0..2 {
                for c in r..2 {
                    let mut acc = 0.0;
                    for k in 0..3 {
                        for l in 0..3 {
                            acc += j[r][k] * sigma_cam[k][l] * j[c][l];
                        }
                    }
                    s2[r + c] = acc;
                }
            }
            s2[0] += DILATION;
            s2[2] += DILATION;
            let det = s2[0] * s2[2] - s2[1] * s2[1];
            if det <= 1e-12 {
                continue;
            }
            let conic = [s2[2] / det, -s2[1] / det, s2[0] / det];
            let mid = 0.5 * (s2[0] + s2[2]);
            let lmax = mid + ((mid * mid - det).max(0.0)).sqrt();
            let radius = SIGMA_CUTOFF * lmax.sqrt() + 0.5;
            let x0 = ((u - radius).floor().max(0.0)) as usize;
            let y0 = ((v - radius).floor().max(0.0)) as usize;
            if u + radius < 0.0 || v + radius < 0.0 {
                continue;
            }
            if x0 >= self.width || y0 >= self.height {
                continue;
            }
            let x1 = ((u + radius).ceil() as usize).min(self.width - 1);
            let y1 = ((v + radius).ceil() as usize).min(self.height - 1);
            if x1 < x0 || y1 < y0 {
                continue;
            }
            out.push(Prepared {
                idx: g,
                p_cam: p,
                proj: [u, v],
                conic,
                sigma2d: s2,
                jproj: j,
                rotm,
                sigma_cam,
                aabb: [x0, x1, y0, y1],
            });
        }
        // global front-to-back order; ties broken by Gaussian index
        out.sort_by(|a, b| {
            a.p_cam[2]
                .partial_cmp(&b.p_cam[2])
                .unwrap()
                .then(a.idx.cmp(&b.idx))
        });
        out
    }

    fn forward(&self, prep: &[Prepared]) -> ArrayD<f64> {
        let (h, w, c) = (self.height, self.width, self.channels);
        let mut img = ArrayD::zeros(IxDyn(&[c + 1, h, w]));
        let mut trans = vec![1.0f64; h * w];
        let imgs = img.as_slice_mut().unwrap();
        for p in prep {
            let g = p.idx;
            let alpha = self.opacity[g];
            for py in p.aabb[2]..=p.aabb[3] {
                for px in p.aabb[0]..=p.aabb[1] {
                    let t_cur = trans[py * w + px];
                    if t_cur < T_MIN {
                        continue;
                    }
                    let d0 = px as f64 + 0.5 - p.proj[0];
                    let d1 = py as f64 + 0.5 - p.proj[1];
                    let e = 0.5 * (p.conic[0] * d0 * d0 + 2.0 * p.conic[1] * d0 * d1 + p.conic[2] * d1 * d1);
                    if e > E_MAX {
                        continue;
                    }
                    let wgt = alpha * (-e).exp();
                    if wgt < W_MIN {
                        continue;
                    }
                    let contrib = wgt * t_cur;
                    for ch in 0..c {
                        imgs[ch * h * w + py * w + px] += self.appearance[g * c + ch] * contrib;
                    }
                    imgs[c * h * w + py * w + px] += contrib;
                    trans[py * w + px] = t_cur * (1.0 - wgt);
                }
            }
        }
        img
    }

    /// Gradients for (mu, rot, scale, opacity, appearance) given dL/d(output).
    fn backward(&self, prep: &[Prepared], gout: &ArrayD<f64>) -> [Vec<f64>; 5] {
        let (h, w, c) = (self.height, self.width, self.channels);
        let g_total = self.mu.len() / 3;
        let mut d_mu = vec![0.0; g_total * 3];
        let mut d_rot = vec![0.0; g_total * 4];
        let mut d_scale = vec![0.0; g_total * 3];
        let mut d_op = vec![0.0; g_total];
        let mut d_app = vec![0.0; g_total * c];
        // per-gaussian accumulators in projected space
        let mut d_proj = vec![[0.0f64; 2]; prep.len()];
        let mut d_conic = vec![[0.0f64; 3]; prep.len()];

        // build per-pixel contributor lists: (pixel, rank in depth order)
        let mut entries: Vec<(u32, u32)> = Vec::new();
        {
            let mut trans = vec![1.0f64; h * w];
            for (rank, p) in prep.iter().enumerate() {
                let alpha = self.opacity[p.idx];
                for py in p.aabb[2]..=p.aabb[3] {
                    for px in p.aabb[0]..=p.aabb[1] {
                        let t_cur = trans[py * w + px];
                        if t_cur < T_MIN {
                            continue;
                        }
                        let d0 = px as f64 + 0.5 - p.proj[0];
                        let d1 = py as f64 + 0.5 - p.proj[1];
                        let e = 0.5
                            * (p.conic[0] * d0 * d0 + 2.0 * p.conic[1] * d0 * d1 + p.conic[2] * d1 * d1);
                        if e > E_MAX {
                            continue;
                        }
                        let wgt = alpha * (-e).exp();
                        if wgt < W_MIN {
                            continue;
                        }
                        entries.push(((py * w + px) as u32, rank as u32));
                        trans[py * w + px] = t_cur * (1.0 - wgt);
                    }
                }
            }
        }
        // bucket by pixel; entries were pushed in global depth order, so the
        // per-pixel order is preserved by a stable counting scatter
        let entries = {
            let mut counts = vec![0u32; h * w + 1];
            for &(pix, _) in &entries {
                counts[pix as usize + 1] += 1;
            }
            for i in 0..h * w {
                counts[i + 1] += counts[i];
            }
            let mut sorted = vec![(0u32, 0u32); entries.len()];
            let mut cursor = counts.clone();
            for &(pix, rank) in &entries {
                let slot = cursor[pix as usize] as usize;
                sorted[slot] = (pix, rank);
                cursor[pix as usize] += 1;
            }
            sorted
        };
        let gs = gout.as_slice().expect("contiguous grad");

        let mut i = 0;
        let mut wgts: Vec<f64> = Vec::new();
        let mut tvals: Vec<f64> = Vec::new();
        let mut suffix = vec![0.0f64; c + 1];
        while i < entries.len() {
            let pix = entries[i].0;
            let mut j = i;
            while j < entries.len() && entries[j].0 == pix {
                j += 1;
            }
            let (py, px) = ((pix as usize) / w, (pix as usize) % w);
            // first pass: recompute weights and transmittances front-to-back
            wgts.clear();
            tvals.clear();
            let mut t_cur = 1.0;
            for &(_, rank) in &entries[i..j] {
                let p = &prep[rank as usize];
                let d0 = px as f64 + 0.5 - p.proj[0];
                let d1 = py as f64 + 0.5 - p.proj[1];
                let e =
                    0.5 * (p.conic[0] * d0 * d0 + 2.0 * p.conic[1] * d0 * d1 + p.conic[2] * d1 * d1);
                let wgt = self.opacity[p.idx] * (-e).exp();
                wgts.push(wgt);
                tvals.push(t_cur);
                t_cur *= 1.0 - wgt;
            }
            // second pass: back-to-front with suffix sums S_k = Σ_{j>i} ĉ_k w_j T_j
            suffix.fill(0.0);
            for k in (0..j - i).rev() {
                let rank = entries[i + k].1 as usize;
                let p = &prep[rank];
                let g = p.idx;
                let (wgt, t_here) = (wgts[k], tvals[k]);
                let d0 = px as f64 + 0.5 - p.proj[0];
                let d1 = py as f64 + 0.5 - p.proj[1];

                let mut d_w = 0.0;
                let denom = (1.0 - wgt).max(1e-6);
                for ch in 0..=c {
                    let go = gs[ch * h * w + py * w + px];
                    if go == 0.0 {
                        continue;
                    }
                    let chan_val = if ch < c { self.appearance[g * c + ch] } else { 1.0 };
                    d_w += go * (chan_val * t_here - suffix[ch] / denom);
                    if ch < c {
                        d_app[g * c + ch] += go * wgt * t_here;
                    }
                }
                // update suffix to include this gaussian
                for ch in 0..c {
                    suffix[ch] += self.appearance[g * c + ch] * wgt * t_here;
                }
                suffix[c] += wgt * t_here;

                let e = 0.5
                    * (p.conic[0] * d0 * d0 + 2.0 * p.conic[1] * d0 * d1 + p.conic[2] * d1 * d1);
                let expe = (-e).exp();
                d_op[g] += d_w * expe;
                let d_e = -d_w * wgt;
                // e = 0.5 dᵀ Q d
                let ded0 = p.conic[0] * d0 + p.conic[1] * d1;
                let ded1 = p.conic[1] * d0 + p.conic[2] * d1;
                d_proj[rank][0] -= d_e * ded0;
                d_proj[rank][1] -= d_e * ded1;
                d_conic[rank][0] += d_e * 0.5 * d0 * d0;
                d_conic[rank][1] += d_e * d0 * d1;
                d_conic[rank][2] += d_e * 0.5 * d1 * d1;
            }
            i = j;
        }

        // map projected-space gradients back to 3-D parameters
        for (rank, p) in prep.iter().enumerate() {
            let g = p.idx;
            let (f, z) = (self.focal, p.p_cam[2]);
            let (x, y) = (p.p_cam[0], p.p_cam[1]);
            let mut d_pcam = [0.0f64; 3];
            // projection μ -> (u, v)
            d_pcam[0] += d_proj[rank][0] * f / z;
            d_pcam[1] += d_proj[rank][1] * f / z;
            d_pcam[2] += -f * (x * d_proj[rank][0] + y * d_proj[rank][1]) / (z * z);

            // conic -> Σ2D: dL/dΣ = -Q dL/dQ Q
            let q = p.conic;
            let dq = [[d_conic[rank][0], d_conic[rank][1] / 2.0], [d_conic[rank][1] / 2.0, d_conic[rank][2]]];
            let qm = [[q[0], q[1]], [q[1], q[2]]];
            let mut qdq = [[0.0f64; 2]; 2];
            for a in 0..2 {
                for b in 0..2 {
                    qdq[a][b] = qm[a][0] * dq[0][b] + qm[a][1] * dq[1][b];
                }
            }
            let mut d_s2 = [[0.0f64; 2]; 2];
            for a in 0..2 {
                for b in 0..2 {
                    d_s2[a][b] = -(qdq[a][0] * qm[0][b] + qdq[a][1] * qm[1][b]);
                }
            }

            // Σ2D = J Σc Jᵀ: dL/dΣc = Jᵀ dΣ2D J ; dL/dJ = 2 dΣ2D J Σc
            let j = p.jproj;
            let mut d_sigc = [[0.0f64; 3]; 3];
            for a in 0..3 {
                for b in 0..3 {
                    let mut acc = 0.0;
                    for r in 0..2 {
                        for s in 0..2 {
                            acc += j[r][a] * d_s2[r][s] * j[s][b];
                        }
                    }
                    d_sigc[a][b] = acc;
                }
            }
            let mut d_j = [[0.0f64; 3]; 2];
            for r in 0..2 {
                for b in 0..3 {
                    let mut acc = 0.0;
                    for s in 0..2 {
                        for k in 0..3 {
                            acc += 2.0 * d_s2[r][s] * j[s][k] * p.sigma_cam[k][b];
                        }
                    }
                    d_j[r][b] = acc;
                }
            }
            // J depends on p_cam
            let fz2 = f / (z * z);
            d_pcam[0] += d_j[0][2] * (-fz2);
            d_pcam[1] += d_j[1][2] * (-fz2);
            d_pcam[2] += d_j[0][0] * (-fz2)
                + d_j[1][1] * (-fz2)
                + d_j[0][2] * (2.0 * f * x / (z * z * z))
                + d_j[1][2] * (2.0 * f * y / (z * z * z));

            // p_cam = M μ + t
            for k in 0..3 {
                d_mu[3 * g + k] += self.cam_m[0][k] * d_pcam[0]
                    + self.cam_m[1][k] * d_pcam[1]
                    + self.cam_m[2][k] * d_pcam[2];
            }

            // Σc = M Σw Mᵀ: dΣw = Mᵀ dΣc M
            let mt = mat_t(&self.cam_m);
            let d_sigw = mat_mul(&mt, &mat_mul(&d_sigc, &self.cam_m));
            // Σw = R D Rᵀ
            let s = [self.scale[3 * g], self.scale[3 * g + 1], self.scale[3 * g + 2]];
            let sym = |m: &M3| -> M3 {
                let mut o = [[0.0; 3]; 3];
                for a in 0..3 {
                    for b in 0..3 {
                        o[a][b] = 0.5 * (m[a][b] + m[b][a]);
                    }
                }
                o
            };
            let dsw = sym(&d_sigw);
            // dL/dR = 2 dΣw R D
            let mut rd = [[0.0; 3]; 3];
            for a in 0..3 {
                for b in 0..3 {
                    rd[a][b] = p.rotm[a][b] * s[b] * s[b];
                }
            }
            let two_dsw_rd = {
                let m = mat_mul(&dsw, &rd);
                let mut o = [[0.0; 3]; 3];
                for a in 0..3 {
                    for b in 0..3 {
                        o[a][b] = 2.0 * m[a][b];
                    }
                }
                o
            };
            let qv = [
                self.rot[4 * g],
                self.rot[4 * g + 1],
                self.rot[4 * g + 2],
                self.rot[4 * g + 3],
            ];
            let dq4 = quat_backward(qv, &two_dsw_rd);
            for k in 0..4 {
                d_rot[4 * g + k] += dq4[k];
            }
            // dL/ds_k = 2 s_k (Rᵀ dΣw R)_kk
            let rtdr = mat_mul(&mat_t(&p.rotm), &mat_mul(&dsw, &p.rotm));
            for k in 0..3 {
                d_scale[3 * g + k] += 2.0 * s[k] * rtdr[k][k];
            }
        }
        [d_mu, d_rot, d_scale, d_op, d_app]
    }
}

/// Splat Gaussians onto the tape. Inputs: `mu (G,3)`, `rot (G,4)` unit
/// quaternions, `scale (G,3)` linear stddevs, `opacity (G)` in [0,1],
/// `appearance (G,C)`. Returns `(C+1, H, W)`; the last channel is alpha.
pub fn splat(
    t: &mut Tape,
    mu: Var,
    rot: Var,
    scale: Var,
    opacity: Var,
    appearance: Var,
    camera: &CameraPose,
) -> Result<Var> {
    camera.validate()?;
    let g = t.shape(mu)[0];
    if t.shape(mu) != [g, 3]
        || t.shape(rot) != [g, 4]
        || t.shape(scale) != [g, 3]
        || t.shape(opacity) != [g]
        || t.shape(appearance).len() != 2
        || t.shape(appearance)[0] != g
    {
        return Err(Error::Argument("inconsistent gaussian attribute shapes".into()));
    }
    let channels = t.shape(appearance)[1];
    let (mu_v, rot_v, sc_v, op_v, app_v) = (
        t.value_owned(mu),
        t.value_owned(rot),
        t.value_owned(scale),
        t.value_owned(opacity),
        t.value_owned(appearance),
    );
    let mut cam_m = [[0.0; 3]; 3];
    let mut cam_t = [0.0; 3];
    for i in 0..3 {
        for j2 in 0..3 {
            cam_m[i][j2] = camera.extrinsic[i][j2];
        }
        cam_t[i] = camera.extrinsic[i][3];
    }
    let cam = (cam_m, cam_t, camera.focal, camera.cx, camera.cy, camera.width, camera.height);

    let out = {
        let scene = Scene {
            mu: mu_v.as_slice().unwrap(),
            rot: rot_v.as_slice().unwrap(),
            scale: sc_v.as_slice().unwrap(),
            opacity: op_v.as_slice().unwrap(),
            appearance: app_v.as_slice().unwrap(),
            channels,
            cam_m: cam.0,
            cam_t: cam.1,
            focal: cam.2,
            cx: cam.3,
            cy: cam.4,
            width: cam.5,
            height: cam.6,
        };
        let prep = scene.prepare();
        scene.forward(&prep)
    };

    let ng = t.needs_grad(mu)
        || t.needs_grad(rot)
        || t.needs_grad(scale)
        || t.needs_grad(opacity)
        || t.needs_grad(appearance);
    Ok(t.custom(
        out,
        ng,
        Box::new(move |g_out, acc| {
            let scene = Scene {
                mu: mu_v.as_slice().unwrap(),
                rot: rot_v.as_slice().unwrap(),
                scale: sc_v.as_slice().unwrap(),
                opacity: op_v.as_slice().unwrap(),
                appearance: app_v.as_slice().unwrap(),
                channels,
                cam_m: cam.0,
                cam_t: cam.1,
                focal: cam.2,
                cx: cam.3,
                cy: cam.4,
                width: cam.5,
                height: cam.6,
            };
            let prep = scene.prepare();
            let [d_mu, d_rot, d_scale, d_op, d_app] = scene.backward(&prep, g_out);
            let n = scene.mu.len() / 3;
            acc(mu, ArrayD::from_shape_vec(IxDyn(&[n, 3]), d_mu).unwrap());
            acc(rot, ArrayD::from_shape_vec(IxDyn(&[n, 4]), d_rot).unwrap());
            acc(scale, ArrayD::from_shape_vec(IxDyn(&[n, 3]), d_scale).unwrap());
            acc(opacity, ArrayD::from_shape_vec(IxDyn(&[n]), d_op).unwrap());
            acc(appearance, ArrayD::from_shape_vec(IxDyn(&[n, channels]), d_app).unwrap());
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::seeded_rng;
    use crate::tape::Arr;
    use ndarray::IxDyn;
    use rand::Rng;

    fn test_camera() -> CameraPose {
        CameraPose {
            extrinsic: [
                [1.0, 0.0, 0.0, 0.0],
                [0.0, 1.0, 0.0, 0.0],
                [0.0, 0.0, 1.0, 0.0],
                [0.0, 0.0, 0.0, 1.0],
            ],
            focal: 120.0,
            cx: 63.5,
            cy: 63.5,
            width: 128,
            height: 128,
        }
    }

    struct SceneVals {
        mu: Arr,
        rot: Arr,
        scale: Arr,
        opacity: Arr,
        appearance: Arr,
    }

    fn run(vals: &SceneVals, cam: &CameraPose) -> Arr {
        let mut tape = Tape::new();
        let mu = tape.constant(vals.mu.clone());
        let rot = tape.constant(vals.rot.clone());
        let sc = tape.constant(vals.scale.clone());
        let op = tape.constant(vals.opacity.clone());
        let app = tape.constant(vals.appearance.clone());
        let out = splat(&mut tape, mu, rot, sc, op, app, cam).unwrap();
        tape.value_owned(out)
    }

    fn single_gaussian(mu: [f64; 3], opacity: f64, scale: f64, chan0: f64) -> SceneVals {
        SceneVals {
            mu: Arr::from_shape_vec(IxDyn(&[1, 3]), mu.to_vec()).unwrap(),
            rot: Arr::from_shape_vec(IxDyn(&[1, 4]), vec![1.0, 0.0, 0.0, 0.0]).unwrap(),
            scale: Arr::from_elem(IxDyn(&[1, 3]), scale),
            opacity: Arr::from_elem(IxDyn(&[1]), opacity),
            appearance: Arr::from_shape_vec(IxDyn(&[1, 2]), vec![chan0, -0.5]).unwrap(),
        }
    }

    #[test]
    fn single_gaussian_peaks_at_principal_point() {
        let cam = test_camera();
        let vals = single_gaussian([0.0, 0.0, 1.0], 1.0, 0.02, 1.0);
        let out = run(&vals, &cam);
        let (mut best, mut arg) = (f64::MIN, (0usize, 0usize));
        for y in 0..128 {
            for x in 0..128 {
                if out[[0, y, x]] > best {
                    best = out[[0, y, x]];
                    arg = (y, x);
                }
            }
        }
        // principal point (63.5, 63.5) is the center of pixel (63, 63)
        let du = arg.1 as f64 + 0.5 - cam.cx;
        let dv = arg.0 as f64 + 0.5 - cam.cy;
        assert!(du.abs() <= 0.5 && dv.abs() <= 0.5, "peak at {arg:?}");
        assert!(best > 0.5);
    }

    #[test]
    fn empty_set_renders_zero() {
        let cam = test_camera();
        let vals = SceneVals {
            mu: Arr::zeros(IxDyn(&[0, 3])),
            rot: Arr::zeros(IxDyn(&[0, 4])),
            scale: Arr::zeros(IxDyn(&[0, 3])),
            opacity: Arr::zeros(IxDyn(&[0])),
            appearance: Arr::zeros(IxDyn(&[0, 2])),
        };
        let out = run(&vals, &cam);
        assert!(out.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn opaque_front_fully_occludes_back() {
        let cam = test_camera();
        // identical gaussians at different depths; front has opacity 1
        let front = single_gaussian([0.0, 0.0, 0.8], 1.0, 0.02, 1.0);
        let both = SceneVals {
            mu: Arr::from_shape_vec(IxDyn(&[2, 3]), vec![0.0, 0.0, 0.8, 0.0, 0.0, 1.6]).unwrap(),
            rot: Arr::from_shape_vec(IxDyn(&[2, 4]), vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]).unwrap(),
            scale: Arr::from_elem(IxDyn(&[2, 3]), 0.02),
            opacity: Arr::from_shape_vec(IxDyn(&[2]), vec![1.0, 1.0]).unwrap(),
            appearance: Arr::from_shape_vec(IxDyn(&[2, 2]), vec![1.0, -0.5, 7.0, 3.0]).unwrap(),
        };
        let a = run(&front, &cam);
        let b = run(&both, &cam);
        // wherever the front gaussian saturates, the back contributes nothing;
        // compare at the exact center pixel where the front weight is 1
        assert_eq!(a[[0, 63, 63]], b[[0, 63, 63]]);
        assert!(a[[2, 63, 63]] > 0.999); // alpha ~ 1
    }

    #[test]
    fn alpha_in_unit_interval_and_weights_bounded() {
        let cam = test_camera();
        let mut rng = seeded_rng(42);
        let g = 30;
        let vals = SceneVals {
            mu: Arr::from_shape_fn(IxDyn(&[g, 3]), |ix| match ix[1] {
                0 | 1 => rng.gen_range(-0.3..0.3),
                _ => rng.gen_range(0.5..1.5),
            }),
            rot: {
                let mut r = Arr::zeros(IxDyn(&[g, 4]));
                for i in 0..g {
                    let q = [
                        rng.gen_range(-1.0..1.0f64),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                    ];
                    let n = (q.iter().map(|x| x * x).sum::<f64>()).sqrt().max(1e-6);
                    for k in 0..4 {
                        r[[i, k]] = q[k] / n;
                    }
                }
                r
            },
            scale: Arr::from_shape_fn(IxDyn(&[g, 3]), |_| rng.gen_range(0.01..0.08)),
            opacity: Arr::from_shape_fn(IxDyn(&[g]), |_| rng.gen_range(0.1..1.0)),
            appearance: Arr::from_shape_fn(IxDyn(&[g, 2]), |_| rng.gen_range(-1.0..1.0)),
        };
        let out = run(&vals, &cam);
        for y in 0..128 {
            for x in 0..128 {
                let a = out[[2, y, x]];
                assert!(
                    (0.0..=1.0 + 1e-12).contains(&a),
                    "alpha {a} out of range at ({y},{x})"
                );
            }
        }
    }

    /// Five-Gaussian scene for FD checks: well-separated depths, moderate
    /// opacities, overlapping footprints.
    fn fd_scene(seed: u64) -> SceneVals {
        let mut rng = seeded_rng(seed);
        let g = 5;
        let mut rot = Arr::zeros(IxDyn(&[g, 4]));
        for i in 0..g {
            let q = [
                1.0 + rng.gen_range(-0.2..0.2f64),
                rng.gen_range(-0.3..0.3),
                rng.gen_range(-0.3..0.3),
                rng.gen_range(-0.3..0.3),
            ];
            let n = (q.iter().map(|x| x * x).sum::<f64>()).sqrt();
            for k in 0..4 {
                rot[[i, k]] = q[k] / n;
            }
        }
        SceneVals {
            mu: Arr::from_shape_fn(IxDyn(&[g, 3]), |ix| match ix[1] {
                0 | 1 => rng.gen_range(-0.15..0.15),
                _ => 0.7 + 0.25 * ix[0] as f64,
            }),
            rot,
            scale: Arr::from_shape_fn(IxDyn(&[g, 3]), |_| rng.gen_range(0.04..0.09)),
            opacity: Arr::from_shape_fn(IxDyn(&[g]), |_| rng.gen_range(0.3..0.8)),
            appearance: Arr::from_shape_fn(IxDyn(&[g, 2]), |_| rng.gen_range(-1.0..1.0)),
        }
    }

    /// Weighted scalar readout of the splat output (weights fixed per test).
    fn weighted_sum(vals: &SceneVals, cam: &CameraPose, wsum: &Arr, grad_for: usize) -> (f64, Arr) {
        let mut tape = Tape::new();
        let vars = [
            tape.leaf(vals.mu.clone()),
            tape.leaf(vals.rot.clone()),
            tape.leaf(vals.scale.clone()),
            tape.leaf(vals.opacity.clone()),
            tape.leaf(vals.appearance.clone()),
        ];
        let out = splat(&mut tape, vars[0], vars[1], vars[2], vars[3], vars[4], cam).unwrap();
        let w = tape.constant(wsum.clone());
        let prod = tape.mul(out, w);
        let loss = tape.sum_all(prod);
        let lv = tape.scalar(loss);
        let mut grads = tape.backward(loss);
        (lv, grads.take(vars[grad_for]).unwrap())
    }

    #[test]
    fn splat_gradients_match_finite_differences() {
        let cam = test_camera();
        let vals = fd_scene(7);
        let mut rng = seeded_rng(100);
        let wsum = Arr::from_shape_fn(IxDyn(&[3, 128, 128]), |_| rng.gen_range(-1.0..1.0));

        let eval = |v: &SceneVals| -> f64 {
            let out = run(v, &cam);
            (&out * &wsum).sum()
        };

        // (input index, flat coordinate, epsilon)
        let probes: Vec<(usize, usize, f64)> = vec![
            (0, 0, 1e-3), // mu.x of g0
            (0, 5, 1e-3), // mu.z of g1
            (0, 7, 1e-3), // mu.y of g2
            (0, 12, 1e-3),
            (1, 2, 1e-4), // rot
            (1, 9, 1e-4),
            (2, 1, 1e-4), // scale
            (2, 8, 1e-4),
            (3, 0, 1e-4), // opacity
            (3, 4, 1e-4),
            (4, 0, 1e-4), // appearance
            (4, 7, 1e-4),
        ];
        for (input, coord, eps) in probes {
            let (_, g) = weighted_sum(&vals, &cam, &wsum, input);
            let an = g.as_slice().unwrap()[coord];
            let mutate = |delta: f64| -> SceneVals {
                let mut v2 = SceneVals {
                    mu: vals.mu.clone(),
                    rot: vals.rot.clone(),
                    scale: vals.scale.clone(),
                    opacity: vals.opacity.clone(),
                    appearance: vals.appearance.clone(),
                };
                let arr = match input {
                    0 => &mut v2.mu,
                    1 => &mut v2.rot,
                    2 => &mut v2.scale,
                    3 => &mut v2.opacity,
                    _ => &mut v2.appearance,
                };
                arr.as_slice_mut().unwrap()[coord] += delta;
                v2
            };
            let fd = (eval(&mutate(eps)) - eval(&mutate(-eps))) / (2.0 * eps);
            let denom = fd.abs().max(an.abs()).max(1e-6);
            assert!(
                (fd - an).abs() / denom < 1e-2,
                "input {input} coord {coord}: fd={fd} analytic={an}"
            );
        }
    }

    #[test]
    fn deterministic_across_calls() {
        let cam = test_camera();
        let vals = fd_scene(9);
        let a = run(&vals, &cam);
        let b = run(&vals, &cam);
        assert_eq!(a, b);
    }
}
