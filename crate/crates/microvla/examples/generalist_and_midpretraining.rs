//! Cross-embodiment protocols: train one generalist policy on two
//! embodiments via the shared padded action space, then mid-pretrain on a
//! donor embodiment and fine-tune on a target one.
//!
//! Run with: cargo run --release --example generalist_and_midpretraining

use microvla::backbone::BackboneConfig;
use microvla::dataset::Split;
use microvla::envbench::{generate_dataset, DatasetRegime};
use microvla::trainer::{
    midpretrain_then_finetune, train, EvalSpec, ExperimentPlan, InitScheme, Protocol, TrainConfig,
};
use microvla::Result;

fn main() -> Result<()> {
    let dir = std::env::temp_dir().join("microvla_example_generalist");
    let _ = std::fs::remove_dir_all(&dir);
    let reach = dir.join("reach");
    let push = dir.join("push");
    generate_dataset("reacher2/reach_color", 5, 0.05, 0, DatasetRegime::Clean, &reach, Split::Train, 16)?;
    generate_dataset("pusher3/push_block", 5, 0.05, 100, DatasetRegime::Clean, &push, Split::Train, 16)?;

    let backbone = BackboneConfig {
        resolution: 16,
        num_action_queries: 4,
        max_ar_tokens: 40,
        ..Default::default()
    };
    let cfg = TrainConfig {
        steps: 60,
        batch_size: 2,
        ..Default::default()
    };

    // Generalist: one backbone, one head, both embodiments mixed
    // proportionally per step; 2-dim and 3-dim actions meet in the padded
    // 32-dim space and the loss is masked to each sample's valid dims.
    let generalist = ExperimentPlan {
        protocol: Protocol::Generalist,
        datasets: vec![reach.clone(), push.clone()],
        pipeline: Default::default(),
        backbone: backbone.clone(),
        head: Default::default(),
        init: InitScheme::Random,
        eval: EvalSpec::default(),
    };
    let bundle = train(&generalist, &cfg, &dir.join("generalist"))?;
    println!(
        "generalist trained on 2 embodiments; stats for: {:?}",
        bundle.stats.keys().collect::<Vec<_>>()
    );

    // Mid-pretraining: train on the donor (pusher3), then fine-tune on the
    // target (reacher2) starting from the donor's backbone weights.
    let donor = ExperimentPlan {
        protocol: Protocol::Specialist,
        datasets: vec![push],
        ..generalist.clone()
    };
    let target = ExperimentPlan {
        protocol: Protocol::Specialist,
        datasets: vec![reach],
        ..generalist.clone()
    };
    let bundle = midpretrain_then_finetune(&donor, &target, &cfg, &dir.join("mid"))?;
    println!(
        "mid-pretrained then fine-tuned: {} steps on target, fingerprint {}",
        bundle.meta.steps, bundle.meta.data_fingerprint
    );
    println!("\ndonor and fine-tune runs live under {}", dir.join("mid").display());
    Ok(())
}
