//! Audio loading, pluggable frame-aligned feature encoders, and the
//! dual-audio interaction module that fuses both speakers' features with the
//! speaking indicator into a 513-wide per-frame representation.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array1, Array2};
use rustfft::{num_complex::Complex, FftPlanner};

use crate::error::{Error, Result};
use crate::nn::{self, attention, ffn, layer_norm, linear, seeded_rng, Bound, ParamSet};
use crate::tape::{Tape, Var};

pub const FEATURE_DIM: usize = 768;
pub const FUSED_DIM: usize = 513;
pub const CANONICAL_SAMPLE_RATE: u32 = 16_000;
pub const FRAME_RATE: f64 = 25.0;

#[derive(Clone, Debug, PartialEq)]
pub struct AudioTrack {
    /// Mono samples in [-1, 1].
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioTrack {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Argument("sample rate must be positive".into()));
        }
        if !samples.iter().all(|x| x.is_finite()) {
            return Err(Error::Argument("audio contains non-finite samples".into()));
        }
        Ok(AudioTrack { samples, sample_rate })
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Per-video-frame RMS energy at `fps` over `t_frames` frames.
    pub fn rms_envelope(&self, fps: f64, t_frames: usize) -> Array1<f64> {
        let spf = self.sample_rate as f64 / fps;
        let mut out = Array1::zeros(t_frames);
        for t in 0..t_frames {
            let a = (t as f64 * spf) as usize;
            let b = (((t + 1) as f64 * spf) as usize).min(self.samples.len());
            if a >= b {
                continue;
            }
            let e: f64 = self.samples[a..b].iter().map(|x| x * x).sum();
            out[t] = (e / (b - a) as f64).sqrt();
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IndicatorTrack {
    pub bits: Vec<u8>,
}

impl IndicatorTrack {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if !bits.iter().all(|&b| b == 0 || b == 1) {
            return Err(Error::Argument("indicator values must be 0 or 1".into()));
        }
        Ok(IndicatorTrack { bits })
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn transitions(&self) -> usize {
        self.bits.windows(2).filter(|w| w[0] != w[1]).count()
    }
}

#[derive(Clone, Debug)]
pub struct FeatureSequence {
    /// `(T, d)` features.
    pub features: Array2<f64>,
    pub frame_rate: f64,
}

// ---- WAV I/O (PCM16 mono) ----

pub fn write_wav(track: &AudioTrack, path: &Path) -> Result<()> {
    let n = track.samples.len();
    let data_len = (n * 2) as u32;
    let mut buf = Vec::with_capacity(44 + n * 2);
    buf.extend_from_slice(b"RIFF");
    buf.extend_from_slice(&(36 + data_len).to_le_bytes());
    buf.extend_from_slice(b"WAVE");
    buf.extend_from_slice(b"fmt ");
    buf.extend_from_slice(&16u32.to_le_bytes());
    buf.extend_from_slice(&1u16.to_le_bytes()); // PCM
    buf.extend_from_slice(&1u16.to_le_bytes()); // mono
    buf.extend_from_slice(&track.sample_rate.to_le_bytes());
    buf.extend_from_slice(&(track.sample_rate * 2).to_le_bytes());
    buf.extend_from_slice(&2u16.to_le_bytes()); // block align
    buf.extend_from_slice(&16u16.to_le_bytes()); // bits
    buf.extend_from_slice(b"data");
    buf.extend_from_slice(&data_len.to_le_bytes());
    for &x in &track.samples {
        let q = (x.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        buf.extend_from_slice(&q.to_le_bytes());
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_wav(path: &Path) -> Result<AudioTrack> {
    let mut file = std::fs::File::open(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    let fail = |msg: &str| Error::Format(format!("{}: {msg}", path.display()));
    if bytes.len() < 44 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(fail("not a RIFF/WAVE file"));
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    let mut data: Option<(usize, usize)> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body = pos + 8;
        if body + size > bytes.len() {
            return Err(fail("truncated chunk"));
        }
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(fail("fmt chunk too small"));
                }
                fmt = Some((
                    u16::from_le_bytes(bytes[body..body + 2].try_into().unwrap()),
                    u16::from_le_bytes(bytes[body + 2..body + 4].try_into().unwrap()),
                    u32::from_le_bytes(bytes[body + 4..body + 8].try_into().unwrap()),
                    u16::from_le_bytes(bytes[body + 14..body + 16].try_into().unwrap()),
                ));
            }
            b"data" => data = Some((body, size)),
            _ => {}
        }
        pos = body + size + size % 2;
    }
    let (format, channels, rate, bits) = fmt.ok_or_else(|| fail("missing fmt chunk"))?;
    if format != 1 || channels != 1 || bits != 16 {
        return Err(fail("expected PCM16 mono"));
    }
    let (start, size) = data.ok_or_else(|| fail("missing data chunk"))?;
    let samples = bytes[start..start + size]
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32767.0)
        .collect();
    AudioTrack::new(samples, rate)
}

// ---- feature encoders ----

pub trait AudioEncoder: Send + Sync {
    /// Features at the encoder's native frame rate, width [`FEATURE_DIM`].
    fn encode_native(&self, track: &AudioTrack) -> Result<Array2<f64>>;
    fn native_rate(&self) -> f64;
}

pub struct EncoderRegistry {
    encoders: HashMap<String, Arc<dyn AudioEncoder>>,
}

impl Default for EncoderRegistry {
    fn default() -> Self {
        let mut r = EncoderRegistry { encoders: HashMap::new() };
        r.register("desk", Arc::new(DeskEncoder::new(0)));
        r
    }
}

impl EncoderRegistry {
    pub fn register(&mut self, id: &str, encoder: Arc<dyn AudioEncoder>) {
        self.encoders.insert(id.to_string(), encoder);
    }

    pub fn get(&self, id: &str) -> Result<&Arc<dyn AudioEncoder>> {
        self.encoders
            .get(id)
            .ok_or_else(|| Error::Config(format!("unknown audio encoder id: {id}")))
    }
}

/// Encode to exactly `t_target` frames of width 768, resampling the
/// encoder's native rate by linear interpolation along time.
pub fn encode(
    registry: &EncoderRegistry,
    track: &AudioTrack,
    encoder_id: &str,
    t_target: usize,
) -> Result<FeatureSequence> {
    if track.samples.is_empty() {
        return Err(Error::Argument("cannot encode empty audio".into()));
    }
    if t_target == 0 {
        return Err(Error::Argument("target frame count must be positive".into()));
    }
    let enc = registry.get(encoder_id)?;
    let native = enc.encode_native(track)?;
    let out = resample_time(&native, t_target);
    Ok(FeatureSequence { features: out, frame_rate: FRAME_RATE })
}

fn resample_time(native: &Array2<f64>, t_target: usize) -> Array2<f64> {
    let (tn, d) = native.dim();
    let mut out = Array2::zeros((t_target, d));
    for t in 0..t_target {
        let p = if t_target > 1 && tn > 1 {
            t as f64 * (tn - 1) as f64 / (t_target - 1) as f64
        } else {
            0.0
        };
        let i0 = p.floor() as usize;
        let i1 = (i0 + 1).min(tn - 1);
        let a = p - i0 as f64;
        for c in 0..d {
            out[[t, c]] = (1.0 - a) * native[[i0, c]] + a * native[[i1, c]];
        }
    }
    out
}

/// Default deterministic encoder: 80-bin log-mel filterbank (25 ms window,
/// 10 ms hop) followed by a fixed-seed two-layer temporal convolution up to
/// 768 channels. Native rate 100 Hz.
pub struct DeskEncoder {
    mel_filters: Array2<f64>, // (80, 257)
    conv1_w: Array2<f64>,     // (256, 80*9)
    conv2_w: Array2<f64>,     // (768, 256*3)
}

const MEL_BINS: usize = 80;
const FFT_SIZE: usize = 512;
const WIN: usize = 400; // 25 ms @ 16 kHz
const HOP: usize = 160; // 10 ms @ 16 kHz
const CONV1_K: usize = 9;
const CONV1_C: usize = 256;
const CONV2_K: usize = 3;

impl DeskEncoder {
    pub fn new(seed: u64) -> Self {
        let mut rng = seeded_rng(seed.wrapping_add(0x5EED_A0D1));
        use rand::Rng;
        let lim1 = (6.0 / (MEL_BINS * CONV1_K + CONV1_C) as f64).sqrt();
        let conv1_w =
            Array2::from_shape_fn((CONV1_C, MEL_BINS * CONV1_K), |_| rng.gen_range(-lim1..lim1));
        let lim2 = (6.0 / (CONV1_C * CONV2_K + FEATURE_DIM) as f64).sqrt();
        let conv2_w =
            Array2::from_shape_fn((FEATURE_DIM, CONV1_C * CONV2_K), |_| rng.gen_range(-lim2..lim2));
        DeskEncoder { mel_filters: mel_filterbank(MEL_BINS, FFT_SIZE, CANONICAL_SAMPLE_RATE as f64), conv1_w, conv2_w }
    }

    fn log_mel(&self, track: &AudioTrack) -> Array2<f64> {
        let n = track.samples.len();
        let n_frames = n.div_ceil(HOP);
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(FFT_SIZE);
        let hann: Vec<f64> = (0..WIN)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / WIN as f64).cos())
            .collect();
        let mut mel = Array2::zeros((n_frames, MEL_BINS));
        let mut buf = vec![Complex::new(0.0, 0.0); FFT_SIZE];
        for f in 0..n_frames {
            let start = f * HOP;
            for (i, b) in buf.iter_mut().enumerate() {
                // edge-hold framing keeps constant signals constant
                let idx = (start + i).min(n - 1);
                let s = if i < WIN { track.samples[idx] * hann[i] } else { 0.0 };
                *b = Complex::new(s, 0.0);
            }
            fft.process(&mut buf);
            for m in 0..MEL_BINS {
                let mut acc = 0.0;
                for k in 0..FFT_SIZE / 2 + 1 {
                    let w = self.mel_filters[[m, k]];
                    if w > 0.0 {
                        acc += w * buf[k].norm_sqr();
                    }
                }
                mel[[f, m]] = (acc + 1e-8).ln();
            }
        }
        mel
    }
}

impl AudioEncoder for DeskEncoder {
    fn native_rate(&self) -> f64 {
        CANONICAL_SAMPLE_RATE as f64 / HOP as f64
    }

    fn encode_native(&self, track: &AudioTrack) -> Result<Array2<f64>> {
        let mel = self.log_mel(track);
        let h1 = conv1d_edge(&mel, &self.conv1_w, MEL_BINS, CONV1_K);
        let h1 = h1.mapv(|x| x.tanh());
        let h2 = conv1d_edge(&h1, &self.conv2_w, CONV1_C, CONV2_K);
        Ok(h2)
    }
}

/// Temporal conv over `(T, Cin)` with edge padding; weight `(Cout, Cin*k)`.
fn conv1d_edge(x: &Array2<f64>, w: &Array2<f64>, c_in: usize, k: usize) -> Array2<f64> {
    let t = x.nrows();
    let c_out = w.nrows();
    let half = k / 2;
    // im2col over time
    let mut col = Array2::zeros((t, c_in * k));
    for ti in 0..t {
        for ki in 0..k {
            let src = (ti + ki).saturating_sub(half).min(t - 1);
            for c in 0..c_in {
                col[[ti, ki * c_in + c]] = x[[src, c]];
            }
        }
    }
    let mut out = col.dot(&w.t());
    debug_assert_eq!(out.dim(), (t, c_out));
    out.mapv_inplace(|v| v * 0.1); // keep magnitudes tame without bias terms
    out
}

fn mel_filterbank(n_mels: usize, fft_size: usize, sample_rate: f64) -> Array2<f64> {
    let n_bins = fft_size / 2 + 1;
    let to_mel = |hz: f64| 2595.0 * (1.0 + hz / 700.0).log10();
    let to_hz = |mel: f64| 700.0 * (10f64.powf(mel / 2595.0) - 1.0);
    let mel_min = to_mel(0.0);
    let mel_max = to_mel(sample_rate / 2.0);
    let points: Vec<f64> = (0..n_mels + 2)
        .map(|i| to_hz(mel_min + (mel_max - mel_min) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_hz = sample_rate / fft_size as f64;
    let mut fb = Array2::zeros((n_mels, n_bins));
    for m in 0..n_mels {
        let (lo, mid, hi) = (points[m], points[m + 1], points[m + 2]);
        for k in 0..n_bins {
            let f = k as f64 * bin_hz;
            let w = if f >= lo && f <= mid && mid > lo {
                (f - lo) / (mid - lo)
            } else if f > mid && f <= hi && hi > mid {
                (hi - f) / (hi - mid)
            } else {
                0.0
            };
            fb[[m, k]] = w;
        }
    }
    fb
}

// ---- dual-audio interaction module ----

pub const DIM_PROJ: usize = 256;
pub const DIM_MODEL: usize = 512;
pub const DIM_HEADS: usize = 8;
pub const DIM_LAYERS: usize = 2;
const DIM_FFN: usize = 256;

/// Parameters of the fusion module: per-stream 768→256 projections, a
/// 2-layer 8-head self-attention encoder over the concatenated streams, a
/// residual add of the projected agent stream, and a final 513→513 mix.
pub fn init_dim_params(seed: u64) -> ParamSet {
    let mut rng = seeded_rng(seed);
    let mut ps = ParamSet::new();
    ps.add_linear(&mut rng, "dim.proj_self", FEATURE_DIM, DIM_PROJ);
    ps.add_linear(&mut rng, "dim.proj_other", FEATURE_DIM, DIM_PROJ);
    for i in 0..DIM_LAYERS {
        ps.add_attention(&mut rng, &format!("dim.enc{i}.attn"), DIM_MODEL);
        ps.add_layer_norm(&format!("dim.enc{i}.ln1"), DIM_MODEL);
        ps.add_linear(&mut rng, &format!("dim.enc{i}.ffn.0"), DIM_MODEL, DIM_FFN);
        ps.add_linear(&mut rng, &format!("dim.enc{i}.ffn.1"), DIM_FFN, DIM_MODEL);
        ps.add_layer_norm(&format!("dim.enc{i}.ln2"), DIM_MODEL);
    }
    ps.add_linear(&mut rng, "dim.final", FUSED_DIM, FUSED_DIM);
    ps
}

/// Fusion on the tape; `h_self`/`h_other` are `(T, 768)` vars.
pub fn dim_fuse_tape(
    t: &mut Tape,
    bound: &Bound,
    h_self: Var,
    h_other: Var,
    indicator: &IndicatorTrack,
) -> Var {
    let frames = t.shape(h_self)[0];
    assert_eq!(t.shape(h_other)[0], frames, "stream length mismatch");
    assert_eq!(indicator.len(), frames, "indicator length mismatch");

    let ps_ = linear(t, bound, "dim.proj_self", h_self);
    let po = linear(t, bound, "dim.proj_other", h_other);
    let mut x = t.concat(1, &[ps_, po]);
    let pe = t.constant(nn::sinusoid_table(frames, DIM_MODEL).into_dyn());
    x = t.add(x, pe);
    for i in 0..DIM_LAYERS {
        let (attn_out, _) = attention(t, bound, &format!("dim.enc{i}.attn"), x, x, DIM_HEADS, None);
        let res = t.add(x, attn_out);
        x = layer_norm(t, bound, &format!("dim.enc{i}.ln1"), res);
        let f = ffn(t, bound, &format!("dim.enc{i}.ffn"), x);
        let res = t.add(x, f);
        x = layer_norm(t, bound, &format!("dim.enc{i}.ln2"), res);
    }
    // residual: add the projected agent stream back onto the first 256 channels
    let first = t.slice(x, 1, 0, DIM_PROJ);
    let rest = t.slice(x, 1, DIM_PROJ, DIM_MODEL - DIM_PROJ);
    let first = t.add(first, ps_);
    // append the per-frame speaking indicator bit
    let ind = Array2::from_shape_fn((frames, 1), |(i, _)| indicator.bits[i] as f64);
    let ind_c = t.constant(ind.into_dyn());
    let z = t.concat(1, &[first, rest, ind_c]);
    linear(t, bound, "dim.final", z)
}

/// Plain fusion of two encoded feature sequences.
pub fn dim_fuse(
    params: &ParamSet,
    h_self: &FeatureSequence,
    h_other: &FeatureSequence,
    indicator: &IndicatorTrack,
) -> Result<FeatureSequence> {
    let t_len = h_self.features.nrows();
    if h_other.features.nrows() != t_len || indicator.len() != t_len {
        return Err(Error::Argument(format!(
            "length mismatch: self={}, other={}, indicator={}",
            t_len,
            h_other.features.nrows(),
            indicator.len()
        )));
    }
    if h_self.features.ncols() != FEATURE_DIM || h_other.features.ncols() != FEATURE_DIM {
        return Err(Error::Argument(format!("stream width must be {FEATURE_DIM}")));
    }
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, params);
    let hs = tape.constant(h_self.features.clone().into_dyn());
    let ho = tape.constant(h_other.features.clone().into_dyn());
    let out = dim_fuse_tape(&mut tape, &bound, hs, ho, indicator);
    let features = tape
        .value_owned(out)
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap();
    Ok(FeatureSequence { features, frame_rate: h_self.frame_rate })
}
