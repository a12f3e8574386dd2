//! Rough per-iteration timings at the default desk scale.

use std::time::Instant;

use mango_core::audio::EncoderRegistry;
use mango_core::dataio::{synth_clip, ModelSpec, SynthOptions};
use mango_core::renderer::ImageEncoderRegistry;
use mango_core::training::*;

fn main() {
    let spec = ModelSpec::default();
    let model = spec.build().unwrap();
    let t0 = Instant::now();
    let clip = synth_clip(&model, 1, 250, &SynthOptions::default()).unwrap();
    println!("synth 250-frame clip with frames: {:?}", t0.elapsed());

    let reg = EncoderRegistry::default();
    let t0 = Instant::now();
    let data = prepare_clips(vec![clip], &reg, "desk").unwrap();
    println!("audio encode (2 tracks, 250 frames): {:?}", t0.elapsed());

    let cfg = TrainConfig {
        phase: Phase::Pretrain1,
        iterations: 5,
        batch_size: 1,
        lr: 1e-3,
        seed: 1,
        ..TrainConfig::default()
    };
    let t0 = Instant::now();
    let run = pretrain_stage1(&data, &cfg, &model, &mut TrainLogger::default()).unwrap();
    println!("stage-1 iter (batch 1, w=100): {:?}/iter", t0.elapsed() / 5);

    let c2 = TrainConfig { phase: Phase::Pretrain2, iterations: 5, batch_size: 1, ..cfg.clone() };
    let ireg = ImageEncoderRegistry::default();
    let t0 = Instant::now();
    let run2 = pretrain_stage2(&data, &c2, &model, &ireg, &mut TrainLogger::default()).unwrap();
    println!("stage-2 iter (batch 1, 128x128): {:?}/iter", t0.elapsed() / 5);

    let jcfg = TrainConfig { phase: Phase::Joint, iterations: 2, batch_size: 1, n_render_frames: 5, ..cfg.clone() };
    let t0 = Instant::now();
    let _ = joint_train(&run.checkpoint, &run2.checkpoint, &data, &jcfg, &model, &ireg, &mut TrainLogger::default()).unwrap();
    println!("joint iter (K=5 chain + 2x5 renders): {:?}/iter", t0.elapsed() / 2);

    let t0 = Instant::now();
    let _ = run.checkpoint.generate_for_clip(&data[0], &data[0].clip.indicator, 3, Some(50)).unwrap();
    println!("generate 250 frames (ddim 50): {:?}", t0.elapsed());
}
