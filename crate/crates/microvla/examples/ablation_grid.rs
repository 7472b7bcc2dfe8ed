//! Run a small ablation grid — the same experiment plan with one knob varied
//! per variant — and print the resulting success-rate table. Failed variants
//! are marked rather than aborting the grid.
//!
//! Run with: cargo run --release --example ablation_grid

use microvla::backbone::BackboneConfig;
use microvla::dataset::Split;
use microvla::datapipe::Parameterization;
use microvla::envbench::{generate_dataset, DatasetRegime};
use microvla::trainer::{
    run_ablation, EvalSpec, ExperimentPlan, InitScheme, Protocol, TrainConfig,
};
use microvla::Result;

fn main() -> Result<()> {
    let dir = std::env::temp_dir().join("microvla_example_ablation");
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

    let base = ExperimentPlan {
        protocol: Protocol::Specialist,
        datasets: vec![data],
        pipeline: Default::default(),
        backbone: BackboneConfig {
            resolution: 16,
            num_action_queries: 4,
            max_ar_tokens: 40,
            ..Default::default()
        },
        head: Default::default(),
        init: InitScheme::Random,
        eval: EvalSpec {
            tasks: vec!["reacher2/reach_color".into()],
            episodes: 5,
            ..Default::default()
        },
    };

    // Variant 2 switches the action parameterization; variant 3 is broken on
    // purpose (dataset path does not exist) to show failed-cell handling.
    let mut delta = base.clone();
    delta.pipeline.parameterization = Parameterization::Delta;
    let mut broken = base.clone();
    broken.datasets = vec![dir.join("no_such_dataset")];

    let grid = vec![
        ("absolute".to_string(), base),
        ("delta".to_string(), delta),
        ("broken".to_string(), broken),
    ];
    let cfg = TrainConfig {
        steps: 50,
        batch_size: 2,
        ..Default::default()
    };

    let report = run_ablation(&grid, &cfg, &dir.join("grid"))?;
    println!("{}", report.to_csv());
    for row in &report.rows {
        match (&row.average, &row.error) {
            (Some(avg), _) => println!("{:<10} average SR {avg:.0}", row.variant),
            (None, Some(err)) => println!("{:<10} failed: {err}", row.variant),
            _ => {}
        }
    }
    println!("\nablation.csv written under {}", dir.join("grid").display());
    Ok(())
}
