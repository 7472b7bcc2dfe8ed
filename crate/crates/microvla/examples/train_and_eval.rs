//! End-to-end specialist run: generate expert demonstrations, behavior-clone
//! a small MLP-head policy, save the bundle, reload it, and evaluate it in
//! closed loop on held-out seeds.
//!
//! This uses a deliberately tiny budget so it finishes in about a minute;
//! raise `steps`, `n` demos, and the backbone size for competent policies.
//!
//! Run with: cargo run --release --example train_and_eval

use microvla::backbone::BackboneConfig;
use microvla::dataset::Split;
use microvla::envbench::{generate_dataset, DatasetRegime};
use microvla::policy::PolicyBundle;
use microvla::trainer::{
    evaluate_bundle, train, EvalSpec, ExperimentPlan, InitScheme, Protocol, TrainConfig,
};
use microvla::Result;

fn main() -> Result<()> {
    let dir = std::env::temp_dir().join("microvla_example_train");
    let _ = std::fs::remove_dir_all(&dir);
    let data = dir.join("data");
    generate_dataset(
        "reacher2/reach_color",
        10,
        0.05,
        0,
        DatasetRegime::Clean,
        &data,
        Split::Train,
        16,
    )?;
    println!("generated 10 demonstrations");

    let plan = ExperimentPlan {
        protocol: Protocol::Specialist,
        datasets: vec![data],
        pipeline: Default::default(),
        backbone: BackboneConfig {
            resolution: 16,
            num_action_queries: 4,
            max_ar_tokens: 40,
            ..Default::default()
        },
        head: Default::default(), // MLP regression head
        init: InitScheme::Random,
        eval: EvalSpec {
            tasks: vec!["reacher2/reach_color".into()],
            episodes: 10,
            ..Default::default()
        },
    };
    let cfg = TrainConfig {
        steps: 400,
        batch_size: 4,
        ..Default::default()
    };

    let run_dir = dir.join("run");
    let bundle = train(&plan, &cfg, &run_dir)?;
    println!(
        "trained {} steps; data fingerprint {}",
        bundle.meta.steps, bundle.meta.data_fingerprint
    );

    // Checkpoints are plain-text directories; reloading reproduces the policy
    // bit for bit.
    let loaded = PolicyBundle::load(&run_dir.join("ckpt_final"), None)?;
    let reports = evaluate_bundle(&loaded, &plan.eval)?;
    for r in &reports {
        println!(
            "{}: SR {:.0}%, progress {:.1} over {} held-out episodes (seed {})",
            r.task, r.sr, r.progress, r.episodes, r.seed
        );
    }
    println!("\nrun artifacts in {}", run_dir.display());
    Ok(())
}
