//! Train each of the four action heads on the same tiny dataset with the
//! same backbone and budget, and compare their final imitation losses.
//!
//! The heads differ in how they turn backbone features into action chunks:
//! - mlp:          direct chunk regression
//! - fast_ar:      autoregressive decoding of DCT-quantized action tokens
//! - flow_pi:      rectified-flow expert attending into backbone features
//! - dual_system:  flow expert behind a narrow (optionally frozen) interface
//!
//! Run with: cargo run --release --example head_comparison

use microvla::backbone::BackboneConfig;
use microvla::dataset::Split;
use microvla::envbench::{generate_dataset, DatasetRegime};
use microvla::heads::{FlowConfig, HeadConfig, HeadKind};
use microvla::trainer::{train, EvalSpec, ExperimentPlan, InitScheme, Protocol, TrainConfig};
use microvla::Result;

fn main() -> Result<()> {
    let dir = std::env::temp_dir().join("microvla_example_heads");
    let _ = std::fs::remove_dir_all(&dir);
    let data = dir.join("data");
    generate_dataset(
        "reacher2/reach_color",
        5,
        0.05,
        0,
        DatasetRegime::Clean,
        &data,
        Split::Train,
        16,
    )?;

    let cfg = TrainConfig {
        steps: 60,
        batch_size: 2,
        ..Default::default()
    };

    println!("{:<12} {}", "head", "final loss (60 steps)");
    for kind in [
        HeadKind::Mlp,
        HeadKind::FastAr,
        HeadKind::FlowPi,
        HeadKind::DualSystem,
    ] {
        // A narrower padded action space keeps the discrete head's token
        // sequence (horizon x dims + BOS/EOS) inside max_ar_tokens.
        let mut pipeline = microvla::datapipe::PipelineConfig::default();
        pipeline.padding.target_dim = 8;
        let plan = ExperimentPlan {
            protocol: Protocol::Specialist,
            datasets: vec![data.clone()],
            pipeline,
            backbone: BackboneConfig {
                resolution: 16,
                num_action_queries: 4,
                max_ar_tokens: 40,
                ..Default::default()
            },
            head: HeadConfig {
                kind,
                mlp_hidden: 32,
                flow: FlowConfig {
                    expert_width: 32,
                    expert_layers: 1,
                    expert_heads: 2,
                    ..Default::default()
                },
                ..Default::default()
            },
            init: InitScheme::Random,
            eval: EvalSpec::default(),
        };
        let run = dir.join(kind.as_str());
        train(&plan, &cfg, &run)?;
        let log = std::fs::read_to_string(run.join("train_log.csv")).unwrap();
        let final_loss = log.lines().last().unwrap().split(',').nth(1).unwrap().to_string();
        println!("{:<12} {}", kind.as_str(), final_loss);
    }
    println!("\nlosses are not directly comparable across heads (regression MSE");
    println!("vs token cross-entropy vs flow-matching MSE), but each should fall.");
    Ok(())
}
