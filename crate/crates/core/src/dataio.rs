//! Dialogue-clip dataset format (bit-exact round trips), the synthetic clip
//! generator, dataset manifests with disjoint splits, and the indicator
//! perturbation used by the robustness harness.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{read_wav, write_wav, AudioTrack, IndicatorTrack, CANONICAL_SAMPLE_RATE, FRAME_RATE};
use crate::camera::CameraPose;
use crate::error::{Error, Result};
use crate::morphable::{build_mini_model, MorphableModel, MotionSequence, ShapeParams};
use crate::nn::seeded_rng;

pub const SAMPLES_PER_FRAME: usize = CANONICAL_SAMPLE_RATE as usize / 25;
pub const DEFAULT_IMAGE_SIZE: usize = 128;

/// Mini-face configuration shared by a synthetic dataset.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ModelSpec {
    pub seed: u64,
    pub v: usize,
    pub s: usize,
    pub e: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec { seed: 1000, v: 642, s: 8, e: 50 }
    }
}

impl ModelSpec {
    pub fn build(&self) -> Result<MorphableModel> {
        build_mini_model(self.seed, self.v, self.s, self.e)
    }
}

#[derive(Clone, Debug)]
pub struct DialogueClip {
    pub clip_id: String,
    pub speaker_id: String,
    pub audio_self: AudioTrack,
    pub audio_other: AudioTrack,
    pub indicator: IndicatorTrack,
    pub motion: MotionSequence,
    pub beta: ShapeParams,
    pub camera: CameraPose,
    /// Optional ground-truth frames, `(3, H, W)` each, values in [0, 1].
    pub frames: Option<Vec<Array3<f64>>>,
}

impl DialogueClip {
    pub fn num_frames(&self) -> usize {
        self.motion.len()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.motion.len();
        if self.indicator.len() != t {
            return Err(Error::Validation(format!(
                "indicator has {} frames, motion has {t}",
                self.indicator.len()
            )));
        }
        if let Some(frames) = &self.frames {
            if frames.len() != t {
                return Err(Error::Validation(format!(
                    "{} image frames for {t} motion frames",
                    frames.len()
                )));
            }
        }
        let expect = t as f64 / FRAME_RATE;
        for (name, track) in [("audio_self", &self.audio_self), ("audio_other", &self.audio_other)] {
            let dur = track.duration();
            if (dur - expect).abs() > 0.011 {
                return Err(Error::Validation(format!(
                    "{name} duration {dur:.3}s does not match {t} frames ({expect:.3}s)"
                )));
            }
        }
        self.camera.validate()?;
        Ok(())
    }
}

// ---- clip directory I/O ----

#[derive(Serialize, Deserialize)]
struct CameraManifest {
    extrinsic: Vec<f64>,
    focal: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
}

#[derive(Serialize, Deserialize)]
struct ClipManifest {
    format: u32,
    clip_id: String,
    speaker_id: String,
    frames: usize,
    fps: f64,
    sample_rate: u32,
    expr_dim: usize,
    beta: Vec<f64>,
    camera: CameraManifest,
    has_frames: bool,
}

pub fn save_clip(clip: &DialogueClip, dir: &Path) -> Result<()> {
    clip.validate()?;
    std::fs::create_dir_all(dir)?;
    let manifest = ClipManifest {
        format: 1,
        clip_id: clip.clip_id.clone(),
        speaker_id: clip.speaker_id.clone(),
        frames: clip.num_frames(),
        fps: FRAME_RATE,
        sample_rate: clip.audio_self.sample_rate,
        expr_dim: clip.motion.expr_dim,
        beta: clip.beta.beta.to_vec(),
        camera: CameraManifest {
            extrinsic: clip.camera.extrinsic_flat().to_vec(),
            focal: clip.camera.focal,
            cx: clip.camera.cx,
            cy: clip.camera.cy,
            width: clip.camera.width,
            height: clip.camera.height,
        },
        has_frames: clip.frames.is_some(),
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Runtime(format!("clip manifest: {e}")))?;
    std::fs::write(dir.join("manifest.json"), json)?;
    write_wav(&clip.audio_self, &dir.join("audio_self.wav"))?;
    write_wav(&clip.audio_other, &dir.join("audio_other.wav"))?;
    std::fs::write(dir.join("indicator.bin"), &clip.indicator.bits)?;
    let mut blob = Vec::with_capacity(clip.motion.data.len() * 4);
    for &x in clip.motion.data.iter() {
        blob.extend_from_slice(&(x as f32).to_le_bytes());
    }
    std::fs::write(dir.join("motion.f32"), blob)?;
    if let Some(frames) = &clip.frames {
        let fdir = dir.join("frames");
        std::fs::create_dir_all(&fdir)?;
        for (i, frame) in frames.iter().enumerate() {
            write_png(frame, &fdir.join(format!("{i:06}.png")))?;
        }
    }
    Ok(())
}

pub fn load_clip(dir: &Path) -> Result<DialogueClip> {
    let mpath = dir.join("manifest.json");
    let text = std::fs::read_to_string(&mpath)
        .map_err(|e| Error::Format(format!("{}: {e}", mpath.display())))?;
    let m: ClipManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", mpath.display())))?;
    if m.format != 1 {
        return Err(Error::Format(format!("unsupported clip format {}", m.format)));
    }
    let audio_self = read_wav(&dir.join("audio_self.wav"))?;
    let audio_other = read_wav(&dir.join("audio_other.wav"))?;
    let ind_path = dir.join("indicator.bin");
    let bits = std::fs::read(&ind_path)
        .map_err(|e| Error::Format(format!("{}: {e}", ind_path.display())))?;
    if bits.len() != m.frames {
        return Err(Error::Validation(format!(
            "{}: expected {} bytes, found {}",
            ind_path.display(),
            m.frames,
            bits.len()
        )));
    }
    let indicator = IndicatorTrack::new(bits)?;
    let mpath = dir.join("motion.f32");
    let raw = std::fs::read(&mpath)
        .map_err(|e| Error::Format(format!("{}: {e}", mpath.display())))?;
    let dim = m.expr_dim + 6;
    let expect_bytes = m.frames * dim * 4;
    if raw.len() != expect_bytes {
        return Err(Error::Validation(format!(
            "{}: expected {expect_bytes} bytes ({} frames x {dim} f32), found {}",
            mpath.display(),
            m.frames,
            raw.len()
        )));
    }
    let data: Vec<f64> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let motion = MotionSequence::new(
        Array2::from_shape_vec((m.frames, dim), data)
            .map_err(|e| Error::Format(format!("motion shape: {e}")))?,
        m.expr_dim,
    )?;
    let camera = CameraPose::from_flat(
        &m.camera.extrinsic,
        m.camera.focal,
        m.camera.cx,
        m.camera.cy,
        m.camera.width,
        m.camera.height,
    )?;
    let frames = if m.has_frames {
        let fdir = dir.join("frames");
        let mut out = Vec::with_capacity(m.frames);
        for i in 0..m.frames {
            out.push(read_png(&fdir.join(format!("{i:06}.png")))?);
        }
        Some(out)
    } else {
        None
    };
    let clip = DialogueClip {
        clip_id: m.clip_id,
        speaker_id: m.speaker_id,
        audio_self,
        audio_other,
        indicator,
        motion,
        beta: ShapeParams { beta: m.beta.into() },
        camera,
        frames,
    };
    clip.validate()?;
    Ok(clip)
}

pub fn write_png(frame: &Array3<f64>, path: &Path) -> Result<()> {
    let (c, h, w) = frame.dim();
    if c != 3 {
        return Err(Error::Argument("png frames must have 3 channels".into()));
    }
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                (frame[[0, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
                (frame[[1, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
                (frame[[2, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
            ];
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    img.save(path)
        .map_err(|e| Error::Runtime(format!("{}: {e}", path.display())))?;
    Ok(())
}

pub fn read_png(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Array3::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            let px = img.get_pixel(x as u32, y as u32);
            for ch in 0..3 {
                out[[ch, y, x]] = px[ch] as f64 / 255.0;
            }
        }
    }
    Ok(out)
}

// ---- lambertian ground-truth rasterizer ----

const SKIN: [f64; 3] = [0.80, 0.62, 0.52];
const BACKGROUND: [f64; 3] = [0.10, 0.12, 0.16];

/// Flat z-buffered diffuse shading of the mesh; the fixed deterministic
/// renderer configuration used to produce ground-truth frames for synthetic
/// clips.
pub fn rasterize_lambert(
    vertices: &Array2<f64>,
    triangles: &[[usize; 3]],
    camera: &CameraPose,
) -> Array3<f64> {
    let (h, w) = (camera.height, camera.width);
    let mut img = Array3::zeros((3, h, w));
    for ch in 0..3 {
        for y in 0..h {
            for x in 0..w {
                img[[ch, y, x]] = BACKGROUND[ch];
            }
        }
    }
    let mut zbuf = vec![f64::INFINITY; h * w];
    let light = {
        let l = [0.25f64, 0.35, 0.90];
        let n = (l[0] * l[0] + l[1] * l[1] + l[2] * l[2]).sqrt();
        [l[0] / n, l[1] / n, l[2] / n]
    };
    for tri in triangles {
        let mut pix = [[0.0f64; 2]; 3];
        let mut zs = [0.0f64; 3];
        let mut world = [[0.0f64; 3]; 3];
        let mut ok = true;
        for (k, &vi) in tri.iter().enumerate() {
            let p = [vertices[[vi, 0]], vertices[[vi, 1]], vertices[[vi, 2]]];
            world[k] = p;
            let c = camera.world_to_cam(p);
            zs[k] = c[2];
            match camera.cam_to_pixel(c) {
                Some(uv) => pix[k] = uv,
                None => {
                    ok = false;
                    break;
                }
            }
        }
        if !ok {
            continue;
        }
        // diffuse shading from the outward face normal
        let e1 = [world[1][0] - world[0][0], world[1][1] - world[0][1], world[1][2] - world[0][2]];
        let e2 = [world[2][0] - world[0][0], world[2][1] - world[0][1], world[2][2] - world[0][2]];
        let mut n = [
            e1[1] * e2[2] - e1[2] * e2[1],
            e1[2] * e2[0] - e1[0] * e2[2],
            e1[0] * e2[1] - e1[1] * e2[0],
        ];
        let nn = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt().max(1e-18);
        for v in n.iter_mut() {
            *v /= nn;
        }
        let lambert = (n[0] * light[0] + n[1] * light[1] + n[2] * light[2]).max(0.0);
        let shade = 0.30 + 0.70 * lambert;

        let x0 = pix.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
        let x1 = (pix.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max).ceil() as usize).min(w.saturating_sub(1));
        let y0 = pix.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
        let y1 = (pix.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max).ceil() as usize).min(h.saturating_sub(1));
        if x0 > x1 || y0 > y1 {
            continue;
        }
        let (ax, ay) = (pix[0][0], pix[0][1]);
        let (bx, by) = (pix[1][0], pix[1][1]);
        let (cx, cy) = (pix[2][0], pix[2][1]);
        let area = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax);
        if area.abs() < 1e-12 {
            continue;
        }
        for py in y0..=y1 {
            for px in x0..=x1 {
                let (qx, qy) = (px as f64 + 0.5, py as f64 + 0.5);
                let w0 = ((bx - qx) * (cy - qy) - (by - qy) * (cx - qx)) / area;
                let w1 = ((cx - qx) * (ay - qy) - (cy - qy) * (ax - qx)) / area;
                let w2 = 1.0 - w0 - w1;
                if w0 < 0.0 || w1 < 0.0 || w2 < 0.0 {
                    continue;
                }
                let z = w0 * zs[0] + w1 * zs[1] + w2 * zs[2];
                if z < zbuf[py * w + px] {
                    zbuf[py * w + px] = z;
                    for ch in 0..3 {
                        img[[ch, py, px]] = (SKIN[ch] * shade).clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
    img
}

// ---- synthetic clip generation ----

pub struct SynthOptions {
    pub with_frames: bool,
    pub image_size: usize,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions { with_frames: true, image_size: DEFAULT_IMAGE_SIZE }
    }
}

pub fn default_camera(image_size: usize) -> CameraPose {
    CameraPose::frontal(0.45, image_size as f64 * 1.3, image_size, image_size)
}

/// Procedural dialogue clip: alternating speaking turns, band-limited noise
/// "speech" whose per-frame RMS envelope drives the jaw during the agent's
/// speaking frames, near-zero jaw with occasional upper-face pulses while
/// listening, slow head motion, and Lambert-rendered ground-truth frames.
pub fn synth_clip(
    model: &MorphableModel,
    seed: u64,
    t_frames: usize,
    opts: &SynthOptions,
) -> Result<DialogueClip> {
    if t_frames < 20 {
        return Err(Error::Argument(format!("synthetic clips need T >= 20, got {t_frames}")));
    }
    let mut rng = seeded_rng(seed.wrapping_mul(0x9E37_79B9).wrapping_add(17));
    let e = model.expr_dim();
    let s = model.shape_dim();

    let beta = ShapeParams {
        beta: ndarray::Array1::from_shape_fn(s, |_| rng.gen_range(-0.45..0.45)),
    };

    // alternating turns
    let mut bits = Vec::with_capacity(t_frames);
    let mut state: u8 = rng.gen_range(0..2);
    while bits.len() < t_frames {
        let seg = rng.gen_range(25..=45).min(t_frames - bits.len());
        bits.extend(std::iter::repeat_n(state, seg));
        state ^= 1;
    }
    let indicator = IndicatorTrack::new(bits)?;

    // per-frame speech envelopes for both speakers
    let mut env_self = vec![0.0f64; t_frames];
    let mut env_other = vec![0.0f64; t_frames];
    let syl_hz = 2.6;
    let phase_self: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let phase_other: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let mut seg_start = 0usize;
    for t in 0..t_frames {
        if t > 0 && indicator.bits[t] != indicator.bits[t - 1] {
            seg_start = t;
        }
        let in_seg = (t - seg_start) as f64;
        let taper = (in_seg / 3.0).min(1.0);
        let tt = t as f64 / FRAME_RATE;
        if indicator.bits[t] == 1 {
            let m = 0.5 * (1.0 - (std::f64::consts::TAU * syl_hz * tt + phase_self).cos());
            env_self[t] = taper * (0.25 + 0.75 * m);
        } else {
            let m = 0.5 * (1.0 - (std::f64::consts::TAU * (syl_hz * 0.9) * tt + phase_other).cos());
            env_other[t] = taper * (0.25 + 0.75 * m);
        }
    }

    // band-limited noise carriers
    let gen_audio = |rng: &mut ChaCha12Rng, env: &[f64]| -> AudioTrack {
        let n = t_frames * SAMPLES_PER_FRAME;
        let mut samples = vec![0.0f64; n];
        let mut lp = 0.0f64;
        for (i, s) in samples.iter_mut().enumerate() {
            let white: f64 = rng.gen_range(-1.0..1.0);
            lp += 0.35 * (white - lp);
            let frame = (i / SAMPLES_PER_FRAME).min(t_frames - 1);
            *s = (lp * 1.8 * env[frame]).clamp(-1.0, 1.0);
        }
        AudioTrack::new(samples, CANONICAL_SAMPLE_RATE).unwrap()
    };
    let audio_self = gen_audio(&mut rng, &env_self);
    let audio_other = gen_audio(&mut rng, &env_other);

    // motion: jaw follows the agent envelope while speaking; listening gets
    // occasional upper-face pulses; head drifts slowly
    let mut motion = MotionSequence::zeros(t_frames, e);
    let jaw_gain = 0.22;
    let mut head = [0.0f64; 3];
    let mut head_target = [0.0f64; 3];
    // listening pulses on expression column 1
    let mut pulse = vec![0.0f64; t_frames];
    {
        let mut t = 0usize;
        while t < t_frames {
            if indicator.bits[t] == 0 && rng.gen_bool(0.05) {
                let len = rng.gen_range(10..18).min(t_frames - t);
                let amp = rng.gen_range(0.5..1.0);
                for k in 0..len {
                    if indicator.bits[t + k] == 0 {
                        let ph = k as f64 / len as f64;
                        pulse[t + k] = amp * 0.5 * (1.0 - (std::f64::consts::TAU * ph).cos());
                    }
                }
                t += len;
            } else {
                t += 1;
            }
        }
    }
    for t in 0..t_frames {
        if t % 40 == 0 {
            for k in 0..3 {
                head_target[k] = rng.gen_range(-0.09..0.09);
            }
        }
        for k in 0..3 {
            head[k] += 0.04 * (head_target[k] - head[k]);
            motion.data[[t, e + 3 + k]] = head[k];
        }
        motion.data[[t, e]] = jaw_gain * env_self[t];
        if e > 1 {
            motion.data[[t, 1]] = pulse[t];
        }
        // light co-articulation noise on remaining expression channels
        for c in 2..e.min(8) {
            motion.data[[t, c]] = 0.02 * rng.gen_range(-1.0..1.0) * env_self[t];
        }
    }

    let camera = default_camera(opts.image_size);
    let frames = if opts.with_frames {
        let mut out = Vec::with_capacity(t_frames);
        for t in 0..t_frames {
            let verts = model.decode(&beta, &motion.frame(t))?;
            out.push(rasterize_lambert(&verts, &model.triangles, &camera));
        }
        Some(out)
    } else {
        None
    };

    let clip = DialogueClip {
        clip_id: format!("clip{seed:04}"),
        speaker_id: format!("spk{seed:04}"),
        audio_self,
        audio_other,
        indicator,
        motion,
        beta,
        camera,
        frames,
    };
    clip.validate()?;
    Ok(clip)
}

// ---- indicator perturbation ----

/// XOR the indicator with a contiguous flipped segment of length ⌈α·L⌉.
pub fn perturb_indicator(indicator: &IndicatorTrack, alpha: f64, seed: u64) -> Result<IndicatorTrack> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Argument(format!("alpha must lie in [0,1], got {alpha}")));
    }
    let l = indicator.len();
    let len_flip = (alpha * l as f64).ceil() as usize;
    let mut bits = indicator.bits.clone();
    if len_flip == 0 {
        return IndicatorTrack::new(bits);
    }
    let mut rng = seeded_rng(seed);
    let start = rng.gen_range(0..=l - len_flip);
    for b in bits.iter_mut().skip(start).take(len_flip) {
        *b ^= 1;
    }
    IndicatorTrack::new(bits)
}

// ---- dataset manifests ----

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClipEntry {
    pub id: String,
    pub path: String,
    pub speaker: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: u32,
    pub model: ModelSpec,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub clips: BTreeMap<String, ClipEntry>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        use std::collections::HashSet;
        let (tr, va, te): (HashSet<_>, HashSet<_>, HashSet<_>) = (
            self.train.iter().collect(),
            self.val.iter().collect(),
            self.test.iter().collect(),
        );
        if !tr.is_disjoint(&va) || !tr.is_disjoint(&te) || !va.is_disjoint(&te) {
            return Err(Error::Validation("dataset splits must be disjoint".into()));
        }
        for id in self.train.iter().chain(&self.val).chain(&self.test) {
            if !self.clips.contains_key(id) {
                return Err(Error::Validation(format!("split references unknown clip {id}")));
            }
        }
        // test identities must be unseen during training
        let train_speakers: HashSet<_> = self
            .train
            .iter()
            .filter_map(|id| self.clips.get(id).map(|c| c.speaker.as_str()))
            .collect();
        for id in &self.test {
            if let Some(c) = self.clips.get(id) {
                if train_speakers.contains(c.speaker.as_str()) {
                    return Err(Error::Validation(format!(
                        "test clip {id} shares speaker {} with the training split",
                        c.speaker
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        self.validate()?;
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Runtime(format!("dataset manifest: {e}")))?;
        std::fs::write(root.join("manifest.json"), json)?;
        Ok(())
    }

    pub fn load(root: &Path) -> Result<Self> {
        let p = root.join("manifest.json");
        let text = std::fs::read_to_string(&p)
            .map_err(|e| Error::Format(format!("{}: {e}", p.display())))?;
        let m: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", p.display())))?;
        m.validate()?;
        Ok(m)
    }

    pub fn clip_dir(&self, root: &Path, id: &str) -> Result<PathBuf> {
        let entry = self
            .clips
            .get(id)
            .ok_or_else(|| Error::Argument(format!("unknown clip id {id}")))?;
        Ok(root.join(&entry.path))
    }
}

/// Generate a synthetic dataset with 75/12.5/12.5 splits; each clip gets its
/// own speaker so test identities are unseen by construction.
pub fn generate_dataset(
    root: &Path,
    seed: u64,
    n_clips: usize,
    t_frames: usize,
    opts: &SynthOptions,
) -> Result<DatasetManifest> {
    if n_clips == 0 {
        return Err(Error::Argument("need at least one clip".into()));
    }
    std::fs::create_dir_all(root)?;
    let spec = ModelSpec::default();
    let model = spec.build()?;
    let mut clips = BTreeMap::new();
    let mut ids = Vec::with_capacity(n_clips);
    for i in 0..n_clips {
        let clip_seed = seed.wrapping_add(i as u64);
        let clip = synth_clip(&model, clip_seed, t_frames, opts)?;
        let id = clip.clip_id.clone();
        let rel = format!("clips/{id}");
        save_clip(&clip, &root.join(&rel))?;
        clips.insert(id.clone(), ClipEntry { id: id.clone(), path: rel, speaker: clip.speaker_id });
        ids.push(id);
    }
    let n_val = (n_clips / 8).max(if n_clips >= 3 { 1 } else { 0 });
    let n_test = n_val;
    let n_train = n_clips - n_val - n_test;
    let manifest = DatasetManifest {
        format: 1,
        model: spec,
        train: ids[..n_train].to_vec(),
        val: ids[n_train..n_train + n_val].to_vec(),
        test: ids[n_train + n_val..].to_vec(),
        clips,
    };
    manifest.save(root)?;
    Ok(manifest)
}
