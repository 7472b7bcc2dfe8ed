//! Pretrain the multimodal backbone on scene captioning: render scenes from
//! the benchmark, pair them with their deterministic textual descriptions,
//! and minimize next-character cross-entropy over the autoregressive segment.
//!
//! Run with: cargo run --release --example caption_pretraining

use microvla::backbone::{Backbone, BackboneConfig};
use microvla::envbench::{describe_scene, reset, sample_task, PerturbationConfig};
use microvla::nn::{AdamW, Tape};
use microvla::types::Observation;
use microvla::Result;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<()> {
    let cfg = BackboneConfig {
        resolution: 16,
        num_action_queries: 4,
        max_ar_tokens: 40,
        ..Default::default()
    };
    let mut backbone = Backbone::new(cfg, 0);
    let mut opt = AdamW::new(0.01);
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    for step in 0..40 {
        // Fresh captioned scenes each step, drawn from the train seed range.
        let mut samples: Vec<(Observation, String)> = Vec::new();
        for _ in 0..2 {
            let task = sample_task("reacher2/reach_color", rng.gen_range(0..1 << 20))?;
            let (state, obs) = reset(&task, rng.gen_range(0..1 << 20), &PerturbationConfig::off(), 16);
            samples.push((obs, describe_scene(&state.task.scene)));
        }
        if step == 0 {
            println!("sample caption: \"{}\"", samples[0].1);
        }

        let mut tape = Tape::new();
        let bind = backbone.params.bind(&mut tape);
        let loss = backbone.caption_loss(&mut tape, &bind, &samples)?;
        let loss_val = tape.value(loss)[[0, 0]];
        let grads = tape.backward(loss);
        let grads = bind.collect_grads(&backbone.params, &grads);
        opt.step(&mut backbone.params, &grads, &|_| 1e-3, 1.0);

        if step % 10 == 0 || step == 39 {
            println!("step {step:>3}: caption loss {loss_val:.4}");
        }
    }
    println!("\nthe trainer exposes the same loop via train.init = caption:<steps>");
    Ok(())
}
