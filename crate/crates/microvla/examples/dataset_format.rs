//! Generate a small demonstration dataset and walk its on-disk layout:
//! a TSV manifest at the root plus one directory per episode containing
//! `meta.txt`, `frames/%05d.png`, `proprio.csv`, and `actions.csv`.
//!
//! Run with: cargo run --example dataset_format

use microvla::dataset::{read_episode, DatasetManifest, Split};
use microvla::envbench::{generate_dataset, DatasetRegime};
use microvla::types::validate_trajectory;
use microvla::Result;

fn main() -> Result<()> {
    let root = std::env::temp_dir().join("microvla_example_dataset");
    let _ = std::fs::remove_dir_all(&root);

    let ids = generate_dataset(
        "reacher2/reach_color",
        5,              // episodes
        0.05,           // expert action noise
        0,              // seed (train partition)
        DatasetRegime::Clean,
        &root,
        Split::Train,
        32,             // render resolution
    )?;
    println!("wrote {} episodes under {}", ids.len(), root.display());

    let manifest = DatasetManifest::load(&root)?;
    println!("\nmanifest ({} entries):", manifest.entries.len());
    for e in &manifest.entries {
        println!(
            "  {}  embodiment={}  split={}  steps={}  \"{}\"",
            e.id,
            e.embodiment,
            e.split.as_str(),
            e.steps,
            e.instruction
        );
    }

    // Episodes round-trip losslessly through the text format.
    let traj = read_episode(&root, &ids[0])?;
    let spec = microvla::envbench::ToyEmbodiment::Reacher2.spec();
    validate_trajectory(&traj, &spec)?;
    println!("\nepisode {}:", ids[0]);
    println!("  instruction: {}", traj.instruction);
    println!("  steps: {}, success: {}", traj.len(), traj.success);
    let (obs, action) = &traj.steps[0];
    println!("  first proprio: {:?}", obs.proprio);
    println!("  first action:  {action:?}");

    // The generation sidecar records every sampling seed used, which is what
    // the trainer checks against eval seeds to rule out train/eval leakage.
    let sidecar = std::fs::read_to_string(root.join("generation.txt")).unwrap();
    println!("\ngeneration.txt (first line):\n  {}", sidecar.lines().next().unwrap());
    Ok(())
}
