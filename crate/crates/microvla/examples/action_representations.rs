//! Tour of the cross-embodiment action transforms: normalization statistics,
//! delta/relative parameterizations, zero-padding to a shared width, and the
//! semantic slot layout that routes each embodiment's dims to fixed indices.
//!
//! Run with: cargo run --example action_representations

use microvla::datapipe::{
    compute_stats, denormalize, from_delta, normalize, pad_action, rdt_embed, rdt_extract,
    to_delta, unpad_action, PaddingConfig, RdtSlotLayout,
};
use microvla::dataset::Split;
use microvla::envbench::{generate_dataset, DatasetRegime, ToyEmbodiment};
use microvla::types::{ActionChunk, SpaceTag};
use microvla::Result;
use ndarray::Array2;

fn main() -> Result<()> {
    let root = std::env::temp_dir().join("microvla_example_repr");
    let _ = std::fs::remove_dir_all(&root);
    generate_dataset(
        "pusher3/push_block",
        4,
        0.05,
        0,
        DatasetRegime::Clean,
        &root,
        Split::Train,
        16,
    )?;
    let manifest = microvla::dataset::DatasetManifest::load(&root)?;
    let trajs: Vec<_> = manifest
        .ids_for_split(Split::Train)
        .iter()
        .map(|id| microvla::dataset::read_episode(&root, id))
        .collect::<Result<_>>()?;

    // Per-dimension mean/std over the training actions; std is clamped away
    // from zero so constant dims stay invertible.
    let stats = compute_stats(&trajs)?;
    println!("stats for {}:", stats.embodiment);
    println!("  mean = {:?}", stats.mean);
    println!("  std  = {:?}", stats.std);

    // Take a 4-step chunk from the first episode.
    let spec = ToyEmbodiment::Pusher3.spec();
    let h = 4;
    let mut values = Array2::zeros((h, spec.action_dim));
    for t in 0..h {
        for (i, v) in trajs[0].steps[t].1.iter().enumerate() {
            values[[t, i]] = *v;
        }
    }
    let chunk = ActionChunk::new(values, SpaceTag::Absolute);
    let proprio = &trajs[0].steps[0].0.proprio;

    // Absolute -> delta -> back. Every transform retags the chunk, and the
    // tags are checked, so applying the wrong inverse is an error.
    let delta = to_delta(&chunk, proprio)?;
    let back = from_delta(&delta, proprio)?;
    println!("\ndelta row 0:    {:?}", delta.values.row(0).to_vec());
    println!("restored row 0: {:?}", back.values.row(0).to_vec());
    assert_eq!(delta.space_tag, SpaceTag::Delta);

    let normalized = normalize(&chunk, &stats)?;
    let restored = denormalize(&normalized, &stats)?;
    let err: f64 = (&restored.values - &chunk.values).iter().map(|v| v.abs()).fold(0.0, f64::max);
    println!("\nnormalize round-trip max error: {err:e}");

    // Strategy 1: zero-pad to a shared 32-dim space with a validity mask.
    let padded = pad_action(&normalized, &spec, &PaddingConfig::default())?;
    println!("\npadded width {}, valid dims {:?}", padded.values.ncols(), padded.mask);
    let unpadded = unpad_action(&padded, &spec)?;
    assert_eq!(unpadded.values, normalized.values);

    // Strategy 2: semantic slots — pusher3's three joints land on the "arm A"
    // slot indices shared by every embodiment in the suite.
    let layout = RdtSlotLayout::toy_suite(32);
    let embedded = rdt_embed(&normalized, &spec, &layout)?;
    let slots: Vec<usize> = (0..32).filter(|&s| embedded.mask[s]).collect();
    println!("\nslot indices used by pusher3: {slots:?}");
    for &s in &slots {
        println!("  slot {s}: {}", layout.slot_semantics[s]);
    }
    let extracted = rdt_extract(&embedded, &spec, &layout)?;
    assert_eq!(extracted.values, normalized.values);
    println!("\nslot round-trip exact: true");
    Ok(())
}
