//! Component-level timings.

use std::time::Instant;

use mango_core::audio::*;
use mango_core::dataio::{synth_clip, ModelSpec, SynthOptions};
use mango_core::morphable::ShapeParams;
use mango_core::motiongen::*;
use mango_core::nn::{Bound, ParamSet};
use mango_core::renderer::*;
use mango_core::tape::Tape;
use ndarray::{Array2, Array3};

fn time(label: &str, mut f: impl FnMut()) {
    let t0 = Instant::now();
    let n = 5;
    for _ in 0..n {
        f();
    }
    println!("{label}: {:?}", t0.elapsed() / n);
}

fn main() {
    println!("threads available: {:?}", std::thread::available_parallelism());
    // raw dgemm
    let a = Array2::<f64>::from_elem((512, 512), 0.5);
    let b = Array2::<f64>::from_elem((512, 512), 0.25);
    let t0 = Instant::now();
    let mut acc = 0.0;
    for _ in 0..20 {
        acc += a.dot(&b)[[0, 0]];
    }
    let dt = t0.elapsed().as_secs_f64() / 20.0;
    println!("dgemm 512^3: {:.1} ms = {:.2} GFLOPS ({acc})", dt * 1e3, 2.0 * 512f64.powi(3) / dt / 1e9);

    let dim_params = init_dim_params(1);
    let ind = IndicatorTrack::new(vec![1; 110]).unwrap();
    let hs = Array2::<f64>::from_elem((110, 768), 0.1);
    time("DIM fuse fwd (110 tokens)", || {
        let mut t = Tape::new();
        let b = Bound::constants(&mut t, &dim_params);
        let h1 = t.constant(hs.clone().into_dyn());
        let h2 = t.constant(hs.clone().into_dyn());
        let _ = dim_fuse_tape(&mut t, &b, h1, h2, &ind);
    });
    time("DIM fuse fwd+bwd", || {
        let mut t = Tape::new();
        let b = Bound::new(&mut t, &dim_params);
        let h1 = t.constant(hs.clone().into_dyn());
        let h2 = t.constant(hs.clone().into_dyn());
        let out = dim_fuse_tape(&mut t, &b, h1, h2, &ind);
        let l = t.sum_all(out);
        let _ = t.backward(l);
    });

    let cfg = DenoiserConfig::default();
    let den = init_denoiser_params(2, &cfg);
    let audio = Array2::<f64>::from_elem((110, 513), 0.1);
    let xp = Array2::<f64>::zeros((10, 56));
    let xn = Array2::<f64>::from_elem((100, 56), 0.3);
    let beta = ShapeParams::zeros(8);
    time("denoise fwd (110 tokens, d=128, 8 layers)", || {
        let _ = denoise(&den, &cfg, &audio, &xp, &xn, 100, &beta).unwrap();
    });
    time("denoise fwd+bwd", || {
        let mut t = Tape::new();
        let b = Bound::new(&mut t, &den);
        let a = t.constant(audio.clone().into_dyn());
        let p = t.constant(xp.clone().into_dyn());
        let x = t.constant(xn.clone().into_dyn());
        let out = denoise_tape(&mut t, &b, &cfg, a, p, x, 100, &beta).unwrap();
        let l = t.sum_all(out.pred);
        let _ = t.backward(l);
    });

    // renderer path
    let spec = ModelSpec::default();
    let model = spec.build().unwrap();
    let clip = synth_clip(&model, 1, 20, &SynthOptions::default()).unwrap();
    let ireg = ImageEncoderRegistry::default();
    let state = prepare_reference(
        &model, &clip.beta, &clip.motion.frame(0), &clip.frames.as_ref().unwrap()[0],
        &clip.camera, &ireg, "desk",
    ).unwrap();
    let rcfg = RendererConfig::for_model(&model, (128, 128));
    let rp = init_renderer_params(3, &rcfg);
    let verts = model.decode(&clip.beta, &clip.motion.frame(5)).unwrap();
    time("render fwd (build+splat+refine)", || {
        let _ = render(&rp, &model, &state, &verts, &clip.camera).unwrap();
    });
    let enc = ireg.get("desk").unwrap();
    let gt: &Array3<f64> = &clip.frames.as_ref().unwrap()[5];
    time("render+loss fwd+bwd", || {
        let mut t = Tape::new();
        let b = Bound::new(&mut t, &rp);
        let v = t.constant(verts.clone().into_dyn());
        let img = render_tape(&mut t, &b, &model, &state, v, &clip.camera).unwrap();
        let l = stage2_loss_tape(&mut t, img, gt, &Stage2Weights::default(), enc.as_ref()).unwrap();
        let _ = t.backward(l.total);
    });
}
