//! Fine-grained hot-path timings.

use std::time::Instant;

use mango_core::dataio::{synth_clip, ModelSpec, SynthOptions};
use mango_core::nn::{conv2d, Bound, Pad, ParamSet};
use mango_core::renderer::*;
use mango_core::splat::splat;
use mango_core::tape::Tape;
use mango_core::nn::seeded_rng;
use ndarray::Array2;
use rand::Rng;

fn time(label: &str, mut f: impl FnMut()) {
    let t0 = Instant::now();
    let n = 10;
    for _ in 0..n {
        f();
    }
    println!("{label}: {:?}", t0.elapsed() / n);
}

fn main() {
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

    time("build_template (tape, no grad)", || {
        let mut t = Tape::new();
        let b = Bound::constants(&mut t, &rp);
        let _ = build_template_gaussians_tape(&mut t, &b, &state);
    });
    time("decode_uv_attributes (tape, no grad)", || {
        let mut t = Tape::new();
        let b = Bound::constants(&mut t, &rp);
        let _ = decode_uv_attributes_tape(&mut t, &b, &state);
    });

    // splat alone: realistic gaussian set
    let tmpl = build_template_gaussians(&rp, &state);
    let uv = build_uv_gaussians(&rp, &state, &model);
    let set = tmpl.concat(&uv);
    println!("gaussians: {}", set.len());
    time("splat fwd (plain)", || {
        let _ = splat_gaussians(&set, &clip.camera).unwrap();
    });
    time("splat fwd+bwd", || {
        let mut t = Tape::new();
        let mu = t.leaf(set.mu.clone().into_dyn());
        let rot = t.constant(set.rot.clone().into_dyn());
        let sl = t.constant(set.scale.clone().into_dyn());
        let sc = t.exp(sl);
        let op = t.constant(set.opacity.clone().into_dyn());
        let app = t.constant(set.appearance.clone().into_dyn());
        let out = splat(&mut t, mu, rot, sc, op, app, &clip.camera).unwrap();
        let l = t.sum_all(out);
        let _ = t.backward(l);
    });

    // refiner alone
    let mut rng = seeded_rng(1);
    let f_raw = ndarray::Array3::from_shape_fn((17, 128, 128), |_| rng.gen_range(-0.5..0.5));
    time("refine fwd (plain)", || {
        let _ = refine(&rp, &f_raw).unwrap();
    });
    time("refine fwd+bwd", || {
        let mut t = Tape::new();
        let b = Bound::new(&mut t, &rp);
        let x = t.constant(f_raw.clone().into_dyn());
        let out = refine_tape(&mut t, &b, x);
        let l = t.sum_all(out);
        let _ = t.backward(l);
    });

    // single conv at 128^2
    let mut ps = ParamSet::new();
    let mut rng2 = seeded_rng(2);
    ps.add_conv(&mut rng2, "c", 17, 8, 3);
    time("conv 17->8 @128^2 fwd+bwd", || {
        let mut t = Tape::new();
        let b = Bound::new(&mut t, &ps);
        let x = t.constant(f_raw.clone().into_dyn());
        let y = conv2d(&mut t, x, b.var("c.w"), b.var("c.b"), 1, Pad::Edge);
        let l = t.sum_all(y);
        let _ = t.backward(l);
    });

    // image encoder on 128^2 (used twice per perceptual loss)
    let enc = ireg.get("desk").unwrap();
    let img = ndarray::Array3::from_shape_fn((3, 128, 128), |_| rng.gen_range(0.0..1.0));
    time("image encoder fwd (3 levels)", || {
        let mut t = Tape::new();
        let x = t.constant(img.clone().into_dyn());
        let _ = enc.encode_tape(&mut t, x);
    });

    // DIM internals: one 512-d attention layer at 110 tokens
    let dimp = mango_core::audio::init_dim_params(1);
    let x0 = Array2::<f64>::from_elem((110, 512), 0.1);
    time("one 512-d 8-head attention fwd", || {
        let mut t = Tape::new();
        let b = Bound::constants(&mut t, &dimp);
        let x = t.constant(x0.clone().into_dyn());
        let _ = mango_core::nn::attention(&mut t, &b, "dim.enc0.attn", x, x, 8, None);
    });
}
