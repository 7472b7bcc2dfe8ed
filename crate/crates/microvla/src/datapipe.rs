//! Minimal data processing: normalization, action parameterizations
//! (absolute / delta / relative), history stacking, and the three
//! multi-embodiment representations (simple padding, semantic slots,
//! per-embodiment heads). Every transform is a pure function with an
//! exact or near-exact inverse.

use std::collections::HashMap;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::types::{
    ActionChunk, EmbodimentSpec, NormalizationStats, Observation, SpaceTag, Trajectory, EPS_STD,
};

pub const DEFAULT_TARGET_DIM: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct PaddingConfig {
    pub target_dim: usize,
    pub pad_value: f64,
}

impl Default for PaddingConfig {
    fn default() -> Self {
        Self {
            target_dim: DEFAULT_TARGET_DIM,
            pad_value: 0.0,
        }
    }
}

/// A chunk lifted into the fixed padded width, with a per-column validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedAction {
    pub values: Array2<f64>,
    pub mask: Vec<bool>,
}

impl PaddedAction {
    pub fn valid_dims(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }
}

/// Fixed semantic slot layout shared by all embodiments (RDT-style).
#[derive(Debug, Clone)]
pub struct RdtSlotLayout {
    pub target_dim: usize,
    /// embodiment name -> native dim index -> slot index
    pub slot_map: HashMap<String, Vec<usize>>,
    pub slot_semantics: Vec<String>,
}

impl RdtSlotLayout {
    /// The layout used by the bundled benchmark suite: slots 0..=7 arm A
    /// joints, 8 arm A gripper, 16..=23 arm B joints, 24 arm B gripper,
    /// everything else reserved.
    pub fn toy_suite(target_dim: usize) -> Self {
        let mut slot_semantics = vec!["reserved".to_string(); target_dim];
        for j in 0..8 {
            slot_semantics[j] = format!("arm A joint {j}");
            slot_semantics[16 + j] = format!("arm B joint {j}");
        }
        slot_semantics[8] = "arm A gripper".into();
        slot_semantics[24] = "arm B gripper".into();

        let mut slot_map = HashMap::new();
        slot_map.insert("reacher2".to_string(), vec![0, 1]);
        slot_map.insert("pusher3".to_string(), vec![0, 1, 2]);
        // x, y, wrist behave as arm A joints 0..2; grip takes the gripper slot
        slot_map.insert("gripper4".to_string(), vec![0, 1, 2, 8]);
        slot_map.insert(
            "dualarm8".to_string(),
            vec![0, 1, 2, 3, 16, 17, 18, 19],
        );
        Self {
            target_dim,
            slot_map,
            slot_semantics,
        }
    }

    pub fn slots_for(&self, spec: &EmbodimentSpec) -> Result<&[usize]> {
        let slots = self
            .slot_map
            .get(&spec.name)
            .ok_or_else(|| Error::UnmappedDim {
                embodiment: spec.name.clone(),
                dim: 0,
            })?;
        if slots.len() != spec.action_dim {
            return Err(Error::UnmappedDim {
                embodiment: spec.name.clone(),
                dim: slots.len().min(spec.action_dim),
            });
        }
        let mut seen = vec![false; self.target_dim];
        for &s in slots {
            if s >= self.target_dim {
                return Err(Error::UnmappedDim {
                    embodiment: spec.name.clone(),
                    dim: s,
                });
            }
            if seen[s] {
                return Err(Error::SlotCollision {
                    embodiment: spec.name.clone(),
                    slot: s,
                });
            }
            seen[s] = true;
        }
        Ok(slots)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parameterization {
    Absolute,
    Delta,
    Relative,
}

impl Parameterization {
    pub fn as_str(&self) -> &'static str {
        match self {
            Parameterization::Absolute => "absolute",
            Parameterization::Delta => "delta",
            Parameterization::Relative => "relative",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "absolute" => Ok(Self::Absolute),
            "delta" => Ok(Self::Delta),
            "relative" => Ok(Self::Relative),
            other => Err(Error::config(
                "pipeline.parameterization",
                format!("unknown parameterization `{other}`"),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MultiEmbodimentStrategy {
    SimplePadding,
    RdtSlots,
    MultiHead,
}

impl MultiEmbodimentStrategy {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::SimplePadding => "simple_padding",
            Self::RdtSlots => "rdt_slots",
            Self::MultiHead => "multi_head",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "simple_padding" => Ok(Self::SimplePadding),
            "rdt_slots" => Ok(Self::RdtSlots),
            "multi_head" => Ok(Self::MultiHead),
            other => Err(Error::config(
                "pipeline.multi_embodiment_strategy",
                format!("unknown strategy `{other}`"),
            )),
        }
    }
}

pub const MAX_HISTORY: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub normalize: bool,
    pub parameterization: Parameterization,
    pub history_k: usize,
    pub use_proprio: bool,
    pub multi_embodiment_strategy: MultiEmbodimentStrategy,
    pub padding: PaddingConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            normalize: true,
            parameterization: Parameterization::Absolute,
            history_k: 1,
            use_proprio: true,
            multi_embodiment_strategy: MultiEmbodimentStrategy::SimplePadding,
            padding: PaddingConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self, proprio_available: bool) -> Result<()> {
        if self.history_k < 1 || self.history_k > MAX_HISTORY {
            return Err(Error::config(
                "pipeline.history_k",
                format!("must be in 1..={MAX_HISTORY}"),
            ));
        }
        if !proprio_available && self.parameterization != Parameterization::Absolute {
            return Err(Error::ProprioUnavailable);
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Statistics

/// Per-dimension population mean/std over all action rows of the training
/// split, std clamped below at `EPS_STD`.
pub fn compute_stats(train_trajs: &[Trajectory]) -> Result<NormalizationStats> {
    let first = train_trajs.first().ok_or(Error::InsufficientData { need: 2, got: 0 })?;
    let embodiment = first.embodiment.clone();
    for t in train_trajs {
        if t.embodiment != embodiment {
            return Err(Error::MixedEmbodiments(embodiment, t.embodiment.clone()));
        }
    }
    let rows: Vec<&Vec<f64>> = train_trajs
        .iter()
        .flat_map(|t| t.steps.iter().map(|(_, a)| a))
        .collect();
    compute_stats_rows(&rows, &embodiment)
}

/// Stats over bare action rows; shared by the trajectory-level entry point
/// and by pipelines that first re-parameterize actions.
pub fn compute_stats_rows(rows: &[&Vec<f64>], embodiment: &str) -> Result<NormalizationStats> {
    if rows.len() < 2 {
        return Err(Error::InsufficientData {
            need: 2,
            got: rows.len(),
        });
    }
    let d = rows[0].len();
    let n = rows.len() as f64;
    let mut mean = vec![0.0; d];
    for r in rows {
        for i in 0..d {
            mean[i] += r[i];
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut var = vec![0.0; d];
    for r in rows {
        for i in 0..d {
            let c = r[i] - mean[i];
            var[i] += c * c;
        }
    }
    let std = var
        .iter()
        .map(|v| (v / n).sqrt().max(EPS_STD))
        .collect();
    Ok(NormalizationStats {
        mean,
        std,
        count: rows.len(),
        embodiment: embodiment.to_string(),
    })
}

// ---------------------------------------------------------------------------
// Normalization

pub fn normalize(chunk: &ActionChunk, stats: &NormalizationStats) -> Result<ActionChunk> {
    match chunk.space_tag {
        SpaceTag::Absolute | SpaceTag::Delta | SpaceTag::Relative => {}
        other => {
            return Err(Error::WrongSpaceTag {
                expected: "absolute|delta|relative".into(),
                got: other.to_string(),
            })
        }
    }
    if chunk.dim() != stats.dim() {
        return Err(Error::DimMismatch {
            expected: stats.dim(),
            got: chunk.dim(),
            context: "normalize".into(),
        });
    }
    let mut out = chunk.values.clone();
    for mut row in out.rows_mut() {
        for i in 0..stats.dim() {
            row[i] = (row[i] - stats.mean[i]) / stats.std[i];
        }
    }
    Ok(ActionChunk::new(out, SpaceTag::Normalized))
}

pub fn denormalize(chunk: &ActionChunk, stats: &NormalizationStats) -> Result<ActionChunk> {
    if chunk.space_tag != SpaceTag::Normalized {
        return Err(Error::WrongSpaceTag {
            expected: "normalized".into(),
            got: chunk.space_tag.to_string(),
        });
    }
    if chunk.dim() != stats.dim() {
        return Err(Error::DimMismatch {
            expected: stats.dim(),
            got: chunk.dim(),
            context: "denormalize".into(),
        });
    }
    let mut out = chunk.values.clone();
    for mut row in out.rows_mut() {
        for i in 0..stats.dim() {
            row[i] = row[i] * stats.std[i] + stats.mean[i];
        }
    }
    Ok(ActionChunk::new(out, SpaceTag::Absolute))
}

// ---------------------------------------------------------------------------
// Simple padding

pub fn pad_action(
    chunk: &ActionChunk,
    spec: &EmbodimentSpec,
    cfg: &PaddingConfig,
) -> Result<PaddedAction> {
    let d = spec.action_dim;
    if d > cfg.target_dim {
        return Err(Error::TargetTooSmall {
            target: cfg.target_dim,
            native: d,
        });
    }
    if chunk.dim() != d {
        return Err(Error::DimMismatch {
            expected: d,
            got: chunk.dim(),
            context: "pad_action".into(),
        });
    }
    let h = chunk.horizon();
    let mut values = Array2::from_elem((h, cfg.target_dim), cfg.pad_value);
    for t in 0..h {
        for i in 0..d {
            values[[t, i]] = chunk.values[[t, i]];
        }
    }
    let mut mask = vec![false; cfg.target_dim];
    for m in mask.iter_mut().take(d) {
        *m = true;
    }
    Ok(PaddedAction { values, mask })
}

pub fn unpad_action(p: &PaddedAction, spec: &EmbodimentSpec) -> Result<ActionChunk> {
    let d = spec.action_dim;
    if p.valid_dims() != d {
        return Err(Error::DimMismatch {
            expected: d,
            got: p.valid_dims(),
            context: "unpad_action mask".into(),
        });
    }
    let h = p.values.nrows();
    let mut values = Array2::zeros((h, d));
    for t in 0..h {
        for i in 0..d {
            values[[t, i]] = p.values[[t, i]];
        }
    }
    Ok(ActionChunk::new(values, SpaceTag::Normalized))
}

// ---------------------------------------------------------------------------
// RDT-style semantic slots

pub fn rdt_embed(
    chunk: &ActionChunk,
    spec: &EmbodimentSpec,
    layout: &RdtSlotLayout,
) -> Result<PaddedAction> {
    let slots = layout.slots_for(spec)?;
    if chunk.dim() != spec.action_dim {
        return Err(Error::DimMismatch {
            expected: spec.action_dim,
            got: chunk.dim(),
            context: "rdt_embed".into(),
        });
    }
    let h = chunk.horizon();
    let mut values = Array2::zeros((h, layout.target_dim));
    let mut mask = vec![false; layout.target_dim];
    for (i, &s) in slots.iter().enumerate() {
        mask[s] = true;
        for t in 0..h {
            values[[t, s]] = chunk.values[[t, i]];
        }
    }
    Ok(PaddedAction { values, mask })
}

pub fn rdt_extract(
    p: &PaddedAction,
    spec: &EmbodimentSpec,
    layout: &RdtSlotLayout,
) -> Result<ActionChunk> {
    let slots = layout.slots_for(spec)?;
    let h = p.values.nrows();
    let mut values = Array2::zeros((h, spec.action_dim));
    for (i, &s) in slots.iter().enumerate() {
        for t in 0..h {
            values[[t, i]] = p.values[[t, s]];
        }
    }
    Ok(ActionChunk::new(values, SpaceTag::Normalized))
}

// ---------------------------------------------------------------------------
// Delta / relative parameterizations

/// First step relative to the current proprio, subsequent steps consecutive
/// differences.
pub fn to_delta(chunk: &ActionChunk, current_proprio: &[f64]) -> Result<ActionChunk> {
    expect_tag(chunk, SpaceTag::Absolute)?;
    if current_proprio.len() != chunk.dim() {
        return Err(Error::ProprioUnavailable);
    }
    let h = chunk.horizon();
    let d = chunk.dim();
    let mut out = Array2::zeros((h, d));
    for i in 0..d {
        out[[0, i]] = chunk.values[[0, i]] - current_proprio[i];
    }
    for t in 1..h {
        for i in 0..d {
            out[[t, i]] = chunk.values[[t, i]] - chunk.values[[t - 1, i]];
        }
    }
    Ok(ActionChunk::new(out, SpaceTag::Delta))
}

/// Cumulative-sum inverse of [`to_delta`].
pub fn from_delta(chunk: &ActionChunk, current_proprio: &[f64]) -> Result<ActionChunk> {
    expect_tag(chunk, SpaceTag::Delta)?;
    if current_proprio.len() != chunk.dim() {
        return Err(Error::ProprioUnavailable);
    }
    let h = chunk.horizon();
    let d = chunk.dim();
    let mut out = Array2::zeros((h, d));
    for i in 0..d {
        out[[0, i]] = current_proprio[i] + chunk.values[[0, i]];
    }
    for t in 1..h {
        for i in 0..d {
            out[[t, i]] = out[[t - 1, i]] + chunk.values[[t, i]];
        }
    }
    Ok(ActionChunk::new(out, SpaceTag::Absolute))
}

/// Subtracts the chunk-start reference state from every step.
pub fn to_relative(chunk: &ActionChunk, reference: &[f64]) -> Result<ActionChunk> {
    expect_tag(chunk, SpaceTag::Absolute)?;
    if reference.len() != chunk.dim() {
        return Err(Error::DimMismatch {
            expected: chunk.dim(),
            got: reference.len(),
            context: "to_relative".into(),
        });
    }
    let mut out = chunk.values.clone();
    for mut row in out.rows_mut() {
        for (i, r) in reference.iter().enumerate() {
            row[i] -= r;
        }
    }
    Ok(ActionChunk::new(out, SpaceTag::Relative))
}

pub fn from_relative(chunk: &ActionChunk, reference: &[f64]) -> Result<ActionChunk> {
    expect_tag(chunk, SpaceTag::Relative)?;
    if reference.len() != chunk.dim() {
        return Err(Error::DimMismatch {
            expected: chunk.dim(),
            got: reference.len(),
            context: "from_relative".into(),
        });
    }
    let mut out = chunk.values.clone();
    for mut row in out.rows_mut() {
        for (i, r) in reference.iter().enumerate() {
            row[i] += r;
        }
    }
    Ok(ActionChunk::new(out, SpaceTag::Absolute))
}

fn expect_tag(chunk: &ActionChunk, tag: SpaceTag) -> Result<()> {
    if chunk.space_tag != tag {
        return Err(Error::WrongSpaceTag {
            expected: tag.to_string(),
            got: chunk.space_tag.to_string(),
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// History stacking

/// Observation at step `t` with the previous `k-1` frames stacked in front,
/// clamping below step 0 (edge replication).
pub fn stack_history(episode: &Trajectory, t: usize, k: usize) -> Observation {
    assert!(k >= 1, "history depth must be >= 1");
    assert!(t < episode.steps.len(), "step index out of range");
    let mut frames = Vec::with_capacity(k);
    for offset in (0..k).rev() {
        let idx = t.saturating_sub(offset);
        let obs = &episode.steps[idx].0;
        frames.push(obs.frames.last().expect("observation has a frame").clone());
    }
    let current = &episode.steps[t].0;
    Observation {
        frames,
        instruction: current.instruction.clone(),
        proprio: current.proprio.clone(),
        step_index: current.step_index,
    }
}

// ---------------------------------------------------------------------------
// Batch assembly

/// One prepared training sample: observation plus target in the active
/// multi-embodiment representation.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub embodiment: String,
    pub observation: Observation,
    /// H x D_repr target, already parameterized/normalized/represented.
    pub target: Array2<f64>,
    pub mask: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct TrainingBatch {
    pub observations: Vec<Observation>,
    pub targets: Vec<Array2<f64>>,
    pub masks: Vec<Vec<bool>>,
    pub embodiments: Vec<String>,
}

impl TrainingBatch {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }
}

/// Draws (dataset, sample) pairs with dataset probability proportional to
/// trajectory counts. One sampler per worker; seeds derived from a base seed.
pub struct MixingSampler {
    cumulative: Vec<usize>,
    total: usize,
    rng: ChaCha8Rng,
}

impl MixingSampler {
    pub fn new(trajectory_counts: &[usize], seed: u64) -> Result<Self> {
        let total: usize = trajectory_counts.iter().sum();
        if total == 0 {
            return Err(Error::EmptySampleSet);
        }
        let mut cumulative = Vec::with_capacity(trajectory_counts.len());
        let mut acc = 0;
        for c in trajectory_counts {
            acc += c;
            cumulative.push(acc);
        }
        Ok(Self {
            cumulative,
            total,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Dataset index for the next draw.
    pub fn next_dataset(&mut self) -> usize {
        let r = self.rng.gen_range(0..self.total);
        self.cumulative.partition_point(|&c| c <= r)
    }

    /// Uniform index into a dataset's sample list.
    pub fn next_sample_index(&mut self, n_samples: usize) -> usize {
        self.rng.gen_range(0..n_samples)
    }
}

/// Stacks already-prepared samples into one batch, checking that their
/// representations agree.
pub fn assemble_batch(samples: &[PreparedSample]) -> Result<TrainingBatch> {
    if samples.is_empty() {
        return Err(Error::EmptySampleSet);
    }
    let h = samples[0].target.nrows();
    let d = samples[0].target.ncols();
    let res = samples[0].observation.resolution();
    let k = samples[0].observation.frames.len();
    for s in samples {
        if s.target.nrows() != h || s.target.ncols() != d {
            return Err(Error::InconsistentPipelineTags(format!(
                "target shape {}x{} vs {}x{}",
                s.target.nrows(),
                s.target.ncols(),
                h,
                d
            )));
        }
        if s.observation.resolution() != res || s.observation.frames.len() != k {
            return Err(Error::InconsistentPipelineTags(
                "observation frame stack mismatch".into(),
            ));
        }
        if s.mask.len() != d {
            return Err(Error::InconsistentPipelineTags("mask width mismatch".into()));
        }
    }
    Ok(TrainingBatch {
        observations: samples.iter().map(|s| s.observation.clone()).collect(),
        targets: samples.iter().map(|s| s.target.clone()).collect(),
        masks: samples.iter().map(|s| s.mask.clone()).collect(),
        embodiments: samples.iter().map(|s| s.embodiment.clone()).collect(),
    })
}
