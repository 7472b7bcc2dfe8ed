//! Optimization loops, training protocols, and the ablation runner.
//!
//! The trainer consumes on-disk datasets, prepares samples through the
//! [`crate::datapipe`] representation pipeline, and optimizes a
//! [`PolicyBundle`] with AdamW-style decoupled weight decay, two learning-rate
//! groups (head parameters move 10x faster than the backbone by default), a
//! cosine schedule with linear warmup, and global gradient clipping. Three
//! protocols are exposed: specialist (one embodiment), generalist (mixed
//! embodiments with proportional sampling), and mid-pretraining followed by
//! fine-tuning (backbone carried over; head reinitialized when the action
//! representation changes).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::BackboneConfig;
use crate::datapipe::{
    assemble_batch, compute_stats_rows, stack_history, MixingSampler, Parameterization,
    PipelineConfig, PreparedSample,
};
use crate::dataset::{read_episode, DatasetManifest, Split};
use crate::envbench::{
    evaluate, sample_task, EvalConfig, EvalReport, PerturbationConfig, ToyEmbodiment,
    TRAIN_SEED_LIMIT,
};
use crate::error::{Error, Result};
use crate::fast::{FastTokenizer, FastTokenizerConfig};
use crate::heads::{batch_loss, HeadConfig, HeadKind};
use crate::nn::optim::{cosine_lr, AdamW};
use crate::nn::params::ParamStore;
use crate::nn::tape::Tape;
use crate::policy::{represent_chunk, PolicyBundle};
use crate::types::{validate_trajectory, ActionChunk, NormalizationStats, SpaceTag, Trajectory};

pub const LOG_EVERY: usize = 50;

/// Optimizer and schedule settings. The head:backbone learning-rate ratio
/// defaults to 10:1.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr_backbone: f64,
    pub lr_head: f64,
    /// Linear warmup fraction of the cosine schedule.
    pub warmup_frac: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub grad_clip_norm: f64,
    pub weight_decay: f64,
    /// Periodic checkpoint interval; 0 saves only the final checkpoint.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_backbone: 1e-3,
            lr_head: 1e-2,
            warmup_frac: 0.03,
            steps: 20_000,
            batch_size: 8,
            seed: 0,
            grad_clip_norm: 1.0,
            weight_decay: 0.01,
            checkpoint_every: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    Specialist,
    Generalist,
    MidpretrainFinetune,
}

impl Protocol {
    pub fn as_str(&self) -> &'static str {
        match self {
            Protocol::Specialist => "specialist",
            Protocol::Generalist => "generalist",
            Protocol::MidpretrainFinetune => "midpretrain_finetune",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "specialist" => Ok(Self::Specialist),
            "generalist" => Ok(Self::Generalist),
            "midpretrain_finetune" => Ok(Self::MidpretrainFinetune),
            other => Err(Error::config("train.protocol", format!("unknown protocol `{other}`"))),
        }
    }
}

/// How the bundle's parameters start out.
#[derive(Debug, Clone, PartialEq)]
pub enum InitScheme {
    Random,
    /// Pretrain the backbone on scene-caption prediction before behavior
    /// cloning.
    CaptionPretrained { steps: usize },
    /// Start from another checkpoint's backbone (and head, when shapes
    /// match).
    DonorCheckpoint(PathBuf),
}

/// What to evaluate a trained bundle on.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSpec {
    pub tasks: Vec<String>,
    pub episodes: usize,
    pub seed: u64,
    pub perturb: PerturbationConfig,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            tasks: vec!["reacher2/reach_color".into()],
            episodes: 50,
            seed: TRAIN_SEED_LIMIT,
            perturb: PerturbationConfig::off(),
        }
    }
}

/// One end-to-end experiment: datasets, pipeline, model, init, eval.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentPlan {
    pub protocol: Protocol,
    pub datasets: Vec<PathBuf>,
    pub pipeline: PipelineConfig,
    pub backbone: BackboneConfig,
    pub head: HeadConfig,
    pub init: InitScheme,
    pub eval: EvalSpec,
}

// ---------------------------------------------------------------------------
// Dataset loading
// ---------------------------------------------------------------------------

/// One dataset's train split in memory.
pub struct LoadedDataset {
    pub root: PathBuf,
    pub trajectories: Vec<Trajectory>,
    /// Highest generation seed recorded in the dataset's sidecar log.
    pub max_generation_seed: Option<u64>,
}

/// Loads and validates the train split of every dataset root.
pub fn load_datasets(roots: &[PathBuf]) -> Result<Vec<LoadedDataset>> {
    let mut out = Vec::with_capacity(roots.len());
    for root in roots {
        let manifest = DatasetManifest::load(root)?;
        let ids = manifest.ids_for_split(Split::Train);
        if ids.is_empty() {
            return Err(Error::InsufficientData { need: 1, got: 0 });
        }
        let mut trajectories = Vec::with_capacity(ids.len());
        for id in &ids {
            let traj = read_episode(root, id)?;
            let spec = ToyEmbodiment::parse(&traj.embodiment)?.spec();
            validate_trajectory(&traj, &spec)?;
            trajectories.push(traj);
        }
        out.push(LoadedDataset {
            root: root.clone(),
            trajectories,
            max_generation_seed: max_generation_seed(root)?,
        });
    }
    Ok(out)
}

/// Highest `seed=` entry in the dataset's `generation.txt` sidecar, if the
/// sidecar exists.
fn max_generation_seed(root: &Path) -> Result<Option<u64>> {
    let path = root.join("generation.txt");
    let Ok(text) = std::fs::read_to_string(&path) else {
        return Ok(None);
    };
    let mut max = None;
    for line in text.lines() {
        for field in line.split('\t') {
            if let Some(v) = field.strip_prefix("seed=") {
                let seed: u64 = v
                    .parse()
                    .map_err(|_| Error::config("generation.txt", format!("bad seed `{v}`")))?;
                max = Some(max.map_or(seed, |m: u64| m.max(seed)));
            }
        }
    }
    Ok(max)
}

/// Sorted dataset identity string stored in bundle metadata.
pub fn fingerprint(datasets: &[LoadedDataset]) -> String {
    let mut parts: Vec<String> = datasets
        .iter()
        .map(|d| {
            let name = d
                .root
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| d.root.display().to_string());
            let emb = d
                .trajectories
                .first()
                .map(|t| t.embodiment.clone())
                .unwrap_or_default();
            format!(
                "{name}:{emb}:{}:{}",
                d.trajectories.len(),
                d.max_generation_seed.map_or("-".to_string(), |s| s.to_string())
            )
        })
        .collect();
    parts.sort();
    parts.join(";")
}

/// Train/eval seed-partition check: every recorded generation seed must sit
/// below [`TRAIN_SEED_LIMIT`] and every eval seed at or above it.
pub fn check_dataset_leak(datasets: &[LoadedDataset], eval: &EvalSpec) -> Result<()> {
    for d in datasets {
        if let Some(s) = d.max_generation_seed {
            if s >= TRAIN_SEED_LIMIT {
                return Err(Error::DatasetLeak(format!(
                    "{}: generation seed {s} is inside the eval partition (>= {TRAIN_SEED_LIMIT})",
                    d.root.display()
                )));
            }
        }
    }
    if eval.seed < TRAIN_SEED_LIMIT {
        return Err(Error::DatasetLeak(format!(
            "eval seed {} is inside the train partition (< {TRAIN_SEED_LIMIT})",
            eval.seed
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Sample preparation
// ---------------------------------------------------------------------------

/// Per-embodiment normalization stats over parameterized action rows of the
/// training data. For delta/relative parameterizations the statistic is
/// computed on `a_t - proprio_t` rows; absolute uses raw actions.
pub fn compute_dataset_stats(
    datasets: &[LoadedDataset],
    pipeline: &PipelineConfig,
) -> Result<BTreeMap<String, NormalizationStats>> {
    let mut rows_by_emb: BTreeMap<String, Vec<Vec<f64>>> = BTreeMap::new();
    for d in datasets {
        for traj in &d.trajectories {
            let rows = rows_by_emb.entry(traj.embodiment.clone()).or_default();
            for (obs, action) in &traj.steps {
                let row = match pipeline.parameterization {
                    Parameterization::Absolute => action.clone(),
                    Parameterization::Delta | Parameterization::Relative => action
                        .iter()
                        .zip(&obs.proprio)
                        .map(|(a, p)| a - p)
                        .collect(),
                };
                rows.push(row);
            }
        }
    }
    let mut out = BTreeMap::new();
    for (emb, rows) in rows_by_emb {
        let refs: Vec<&Vec<f64>> = rows.iter().collect();
        out.insert(emb.clone(), compute_stats_rows(&refs, &emb)?);
    }
    Ok(out)
}

/// Builds one training sample: history-stacked observation plus the
/// represented `H x D_repr` target. The action chunk starting at `t` is
/// clamped at the episode end by repeating the final action.
pub fn prepare_sample(
    traj: &Trajectory,
    t: usize,
    horizon: usize,
    pipeline: &PipelineConfig,
    stats: &NormalizationStats,
) -> Result<PreparedSample> {
    let spec = ToyEmbodiment::parse(&traj.embodiment)?.spec();
    let observation = stack_history(traj, t, pipeline.history_k);
    let d = spec.action_dim;
    let values = Array2::from_shape_fn((horizon, d), |(h, i)| {
        let idx = (t + h).min(traj.steps.len() - 1);
        traj.steps[idx].1[i]
    });
    let chunk = ActionChunk::new(values, SpaceTag::Absolute);
    let (target, mask) = represent_chunk(&chunk, &observation.proprio, &spec, pipeline, stats)?;
    Ok(PreparedSample {
        embodiment: traj.embodiment.clone(),
        observation,
        target,
        mask,
    })
}

/// Fits the discrete-action tokenizer on represented chunks drawn from the
/// training data.
pub fn fit_tokenizer_on(
    datasets: &[LoadedDataset],
    pipeline: &PipelineConfig,
    stats: &BTreeMap<String, NormalizationStats>,
    horizon: usize,
    max_chunks: usize,
    seed: u64,
) -> Result<FastTokenizer> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfa57_0001);
    let mut corpus = Vec::new();
    let all: Vec<&Trajectory> = datasets.iter().flat_map(|d| d.trajectories.iter()).collect();
    if all.is_empty() {
        return Err(Error::EmptySampleSet);
    }
    while corpus.len() < max_chunks {
        let traj = all[rng.gen_range(0..all.len())];
        let t = rng.gen_range(0..traj.steps.len());
        let s = stats
            .get(&traj.embodiment)
            .ok_or_else(|| Error::UnregisteredEmbodiment(traj.embodiment.clone()))?;
        let sample = prepare_sample(traj, t, horizon, pipeline, s)?;
        corpus.push(ActionChunk::new(sample.target, SpaceTag::Normalized));
    }
    FastTokenizer::fit(&corpus, &FastTokenizerConfig::default())
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

fn lr_group(name: &str) -> &'static str {
    if name.starts_with("backbone.") {
        "backbone"
    } else {
        "head"
    }
}

/// Caption pretraining: next-character prediction of rendered scene captions
/// on freshly sampled scenes matching the training embodiments.
fn caption_pretrain(
    bundle: &mut PolicyBundle,
    datasets: &[LoadedDataset],
    cfg: &TrainConfig,
    steps: usize,
    log: &mut String,
) -> Result<()> {
    use crate::envbench::{describe_scene, reset};

    let mut embodiments: Vec<String> = datasets
        .iter()
        .filter_map(|d| d.trajectories.first().map(|t| t.embodiment.clone()))
        .collect();
    embodiments.sort();
    embodiments.dedup();
    let families: Vec<String> = embodiments
        .iter()
        .map(|e| Ok(ToyEmbodiment::parse(e)?.task_family().to_string()))
        .collect::<Result<_>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xcaf7_0001);
    let mut opt = AdamW::new(cfg.weight_decay);
    let started = Instant::now();
    for step in 0..steps {
        let mut samples = Vec::with_capacity(cfg.batch_size.min(4));
        for _ in 0..cfg.batch_size.min(4) {
            let family = &families[rng.gen_range(0..families.len())];
            let task = sample_task(family, rng.gen_range(0..TRAIN_SEED_LIMIT))?;
            let (state, obs) = reset(
                &task,
                rng.gen_range(0..TRAIN_SEED_LIMIT),
                &PerturbationConfig::off(),
                bundle.backbone.cfg.resolution,
            );
            let caption = describe_scene(&state.task.scene);
            samples.push((obs, caption));
        }
        let mut tape = Tape::new();
        let bind = bundle.params.bind(&mut tape);
        let loss = bundle.backbone.caption_loss(&mut tape, &bind, &samples)?;
        let loss_val = tape.value(loss)[[0, 0]];
        if !loss_val.is_finite() {
            return Err(Error::NonFiniteLoss(step));
        }
        let grads = tape.backward(loss);
        let grads = bind.collect_grads(&bundle.params, &grads);
        let lr = cosine_lr(step, steps, cfg.lr_backbone, cfg.warmup_frac);
        opt.step(&mut bundle.params, &grads, &|_| lr, cfg.grad_clip_norm);
        if step % LOG_EVERY == 0 || step + 1 == steps {
            let _ = writeln!(
                log,
                "caption_{step},{loss_val},{lr},{lr},{:.3}",
                wall_time(&started)
            );
        }
    }
    Ok(())
}

/// Wall-clock seconds since `started`, or 0.0 when `MICROVLA_DETERMINISTIC=1`
/// so that log files are bit-identical across repeat runs.
fn wall_time(started: &Instant) -> f64 {
    if std::env::var("MICROVLA_DETERMINISTIC").as_deref() == Ok("1") {
        0.0
    } else {
        started.elapsed().as_secs_f64()
    }
}

/// Core behavior-cloning loop; `donor` optionally seeds parameters
/// (backbone always carried over, head only when every shape matches).
fn train_with_init(
    plan: &ExperimentPlan,
    cfg: &TrainConfig,
    run_dir: &Path,
    donor: Option<&ParamStore>,
) -> Result<PolicyBundle> {
    let datasets = load_datasets(&plan.datasets)?;
    check_dataset_leak(&datasets, &plan.eval)?;

    let mut embodiments: Vec<String> = datasets
        .iter()
        .flat_map(|d| d.trajectories.iter().map(|t| t.embodiment.clone()))
        .collect();
    embodiments.sort();
    embodiments.dedup();
    match plan.protocol {
        Protocol::Specialist if embodiments.len() != 1 => {
            return Err(Error::config(
                "train.protocol",
                format!("specialist expects one embodiment, found {}", embodiments.len()),
            ))
        }
        Protocol::Generalist if embodiments.len() < 2 => {
            return Err(Error::config(
                "train.protocol",
                "generalist requires at least two embodiments",
            ))
        }
        _ => {}
    }
    plan.pipeline.validate(true)?;

    let stats = compute_dataset_stats(&datasets, &plan.pipeline)?;
    let horizon = plan.backbone.num_action_queries;
    let tokenizer = if plan.head.kind == HeadKind::FastAr {
        let tok = fit_tokenizer_on(&datasets, &plan.pipeline, &stats, horizon, 64, cfg.seed)?;
        if tok.sequence_len() > plan.backbone.max_ar_tokens {
            return Err(Error::config(
                "backbone.max_ar_tokens",
                format!(
                    "discrete head needs {} autoregressive tokens (horizon {} x {} represented dims + BOS/EOS) but the backbone allows {}",
                    tok.sequence_len(),
                    horizon,
                    tok.dim,
                    plan.backbone.max_ar_tokens
                ),
            ));
        }
        Some(tok)
    } else {
        None
    };

    let mut bundle = PolicyBundle::new(
        plan.backbone.clone(),
        plan.head.clone(),
        plan.pipeline.clone(),
        stats,
        tokenizer,
        cfg.seed,
    )?;
    bundle.meta.data_fingerprint = fingerprint(&datasets);

    std::fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir.display().to_string(), e))?;
    let mut log = String::from("step,loss,lr_backbone,lr_head,wall_time\n");

    match &plan.init {
        InitScheme::Random => {}
        InitScheme::CaptionPretrained { steps } => {
            caption_pretrain(&mut bundle, &datasets, cfg, *steps, &mut log)?;
        }
        InitScheme::DonorCheckpoint(path) => {
            let donor_bundle = PolicyBundle::load(path, None)?;
            absorb_donor(&mut bundle.params, &donor_bundle.params);
        }
    }
    if let Some(donor_params) = donor {
        absorb_donor(&mut bundle.params, donor_params);
    }

    // proportional mixing over datasets, uniform within a dataset
    let counts: Vec<usize> = datasets.iter().map(|d| d.trajectories.len()).collect();
    let mut sampler = MixingSampler::new(&counts, cfg.seed ^ 0x5a3f_0001)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7a11_0001);
    let mut opt = AdamW::new(cfg.weight_decay);
    let started = Instant::now();

    for step in 0..cfg.steps {
        let mut samples = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let di = sampler.next_dataset();
            let trajs = &datasets[di].trajectories;
            let traj = &trajs[sampler.next_sample_index(trajs.len())];
            let t = sampler.next_sample_index(traj.steps.len());
            let s = bundle
                .stats
                .get(&traj.embodiment)
                .expect("stats cover every training embodiment");
            samples.push(prepare_sample(traj, t, horizon, &plan.pipeline, s)?);
        }
        let batch = assemble_batch(&samples)?;

        let mut tape = Tape::new();
        let bind = bundle.params.bind(&mut tape);
        let loss = batch_loss(
            bundle.head(),
            &mut tape,
            &bind,
            &bundle.backbone,
            &batch,
            plan.pipeline.use_proprio,
            &mut rng,
        )?;
        let loss_val = tape.value(loss)[[0, 0]];
        if !loss_val.is_finite() {
            // last-good checkpoint, then abort
            bundle.meta.steps = step;
            bundle.save(&run_dir.join("ckpt_abort"))?;
            write_file(&run_dir.join("train_log.csv"), &log)?;
            return Err(Error::NonFiniteLoss(step));
        }
        let grads = tape.backward(loss);
        let grads = bind.collect_grads(&bundle.params, &grads);
        let lr_b = cosine_lr(step, cfg.steps, cfg.lr_backbone, cfg.warmup_frac);
        let lr_h = cosine_lr(step, cfg.steps, cfg.lr_head, cfg.warmup_frac);
        opt.step(
            &mut bundle.params,
            &grads,
            &|name| if lr_group(name) == "backbone" { lr_b } else { lr_h },
            cfg.grad_clip_norm,
        );

        if step % LOG_EVERY == 0 || step + 1 == cfg.steps {
            let _ = writeln!(
                log,
                "{step},{loss_val},{lr_b},{lr_h},{:.3}",
                wall_time(&started)
            );
        }
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 && step + 1 < cfg.steps
        {
            bundle.meta.steps = step + 1;
            bundle.save(&run_dir.join(format!("ckpt_{}", step + 1)))?;
        }
    }

    bundle.meta.steps = cfg.steps;
    bundle.meta.seed = cfg.seed;
    bundle.save(&run_dir.join("ckpt_final"))?;
    write_file(&run_dir.join("train_log.csv"), &log)?;
    Ok(bundle)
}

/// Copies donor parameters into `params`: backbone parameters always (shapes
/// must match — same preset), head parameters only where name and shape both
/// match. Mismatched head shapes mean a representation change, which
/// reinitializes the head by simply keeping the fresh values.
fn absorb_donor(params: &mut ParamStore, donor: &ParamStore) {
    let names: Vec<String> = params.names().to_vec();
    for name in names {
        if !donor.contains(&name) {
            continue;
        }
        let d = donor.get(&name);
        let p = params.get_mut(&name);
        if p.dim() == d.dim() {
            *p = d.clone();
        }
    }
}

/// Trains a plan into `run_dir` (checkpoints + `train_log.csv`).
pub fn train(plan: &ExperimentPlan, cfg: &TrainConfig, run_dir: &Path) -> Result<PolicyBundle> {
    train_with_init(plan, cfg, run_dir, None)
}

/// Mid-pretraining: trains on the donor plan, then fine-tunes on the target
/// plan starting from the donor's backbone. The head is carried over only
/// when its parameter shapes match (same representation width); otherwise it
/// is freshly initialized.
pub fn midpretrain_then_finetune(
    donor_plan: &ExperimentPlan,
    target_plan: &ExperimentPlan,
    cfg: &TrainConfig,
    run_dir: &Path,
) -> Result<PolicyBundle> {
    let donor = train(donor_plan, cfg, &run_dir.join("donor"))?;
    train_with_init(target_plan, cfg, &run_dir.join("finetune"), Some(&donor.params))
}

// ---------------------------------------------------------------------------
// Evaluation of a bundle
// ---------------------------------------------------------------------------

/// Evaluates a bundle on every task of an eval spec.
pub fn evaluate_bundle(bundle: &PolicyBundle, eval: &EvalSpec) -> Result<Vec<EvalReport>> {
    let mut reports = Vec::with_capacity(eval.tasks.len());
    for task in &eval.tasks {
        let family = task.clone();
        let embodiment = family
            .split('/')
            .next()
            .ok_or_else(|| Error::UnknownTaskFamily(family.clone()))?
            .to_string();
        let mut policy = crate::policy::BundlePolicy::new(bundle, embodiment, eval.seed);
        let cfg = EvalConfig {
            episodes: eval.episodes,
            seed: eval.seed,
            perturb: eval.perturb.clone(),
            resolution: bundle.backbone.cfg.resolution,
        };
        reports.push(evaluate(&mut policy, task, &cfg)?);
    }
    Ok(reports)
}

// ---------------------------------------------------------------------------
// Ablations
// ---------------------------------------------------------------------------

/// One grid cell outcome: success rates per task, or the failure message.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    /// One entry per eval task, `None` when the cell failed.
    pub cells: Vec<Option<f64>>,
    pub average: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct AblationReport {
    pub tasks: Vec<String>,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    /// `variant,seed,<task...>,average` with `failed` marking dead cells.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,seed");
        for t in &self.tasks {
            let _ = write!(out, ",{t}");
        }
        out.push_str(",average\n");
        for r in &self.rows {
            let _ = write!(out, "{},{}", r.variant, r.seed);
            for c in &r.cells {
                match c {
                    Some(v) => {
                        let _ = write!(out, ",{v}");
                    }
                    None => out.push_str(",failed"),
                }
            }
            match r.average {
                Some(v) => {
                    let _ = writeln!(out, ",{v}");
                }
                None => out.push_str(",failed\n"),
            }
        }
        out
    }
}

/// Trains and evaluates every variant with a shared base seed; failed cells
/// are marked instead of aborting the grid. Requires at least two variants
/// sharing one eval spec.
pub fn run_ablation(
    variants: &[(String, ExperimentPlan)],
    cfg: &TrainConfig,
    run_dir: &Path,
) -> Result<AblationReport> {
    if variants.len() < 2 {
        return Err(Error::config(
            "ablate.grid",
            format!("need at least 2 variants, got {}", variants.len()),
        ));
    }
    let eval = &variants[0].1.eval;
    for (name, plan) in variants {
        if plan.eval != *eval {
            return Err(Error::config(
                "ablate.grid",
                format!("variant `{name}` does not share the grid's eval spec"),
            ));
        }
    }
    let mut rows = Vec::with_capacity(variants.len());
    for (name, plan) in variants {
        let cell_dir = run_dir.join(name);
        let outcome = train(plan, cfg, &cell_dir).and_then(|b| evaluate_bundle(&b, eval));
        let row = match outcome {
            Ok(reports) => {
                let cells: Vec<Option<f64>> = reports.iter().map(|r| Some(r.sr)).collect();
                let avg = reports.iter().map(|r| r.sr).sum::<f64>() / reports.len() as f64;
                AblationRow {
                    variant: name.clone(),
                    seed: cfg.seed,
                    cells,
                    average: Some(avg),
                    error: None,
                }
            }
            Err(e) => AblationRow {
                variant: name.clone(),
                seed: cfg.seed,
                cells: vec![None; eval.tasks.len()],
                average: None,
                error: Some(e.to_string()),
            },
        };
        rows.push(row);
    }
    let report = AblationReport {
        tasks: eval.tasks.clone(),
        rows,
    };
    write_file(&run_dir.join("ablation.csv"), &report.to_csv())?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datapipe::MultiEmbodimentStrategy;
    use crate::envbench::{generate_dataset, DatasetRegime};
    use crate::heads::FlowConfig;
    use std::path::Path;

    fn gen(dir: &Path, family: &str, n: usize, seed: u64) -> PathBuf {
        let root = dir.join(family.replace('/', "_"));
        generate_dataset(family, n, 0.0, seed, DatasetRegime::Clean, &root, Split::Train, 16)
            .unwrap();
        root
    }

    fn tiny_plan(datasets: Vec<PathBuf>) -> ExperimentPlan {
        ExperimentPlan {
            protocol: Protocol::Specialist,
            datasets,
            pipeline: PipelineConfig::default(),
            backbone: BackboneConfig {
                resolution: 16,
                num_action_queries: 4,
                max_ar_tokens: 40,
                ..Default::default()
            },
            head: HeadConfig {
                mlp_hidden: 16,
                flow: FlowConfig {
                    expert_width: 16,
                    expert_layers: 1,
                    expert_heads: 2,
                    ..Default::default()
                },
                ..Default::default()
            },
            init: InitScheme::Random,
            eval: EvalSpec {
                episodes: 2,
                ..Default::default()
            },
        }
    }

    fn tiny_cfg(steps: usize) -> TrainConfig {
        TrainConfig {
            steps,
            batch_size: 2,
            checkpoint_every: 0,
            ..Default::default()
        }
    }

    fn logged_losses(run_dir: &Path) -> Vec<(String, f64)> {
        let text = std::fs::read_to_string(run_dir.join("train_log.csv")).unwrap();
        text.lines()
            .skip(1)
            .map(|l| {
                let mut it = l.split(',');
                let step = it.next().unwrap().to_string();
                let loss: f64 = it.next().unwrap().parse().unwrap();
                (step, loss)
            })
            .collect()
    }

    #[test]
    fn training_reduces_loss_and_writes_artifacts() {
        let tmp = tempfile::tempdir().unwrap();
        let data = gen(tmp.path(), "reacher2/reach_color", 2, 0);
        let plan = tiny_plan(vec![data]);
        let run = tmp.path().join("run");
        let bundle = train(&plan, &tiny_cfg(60), &run).unwrap();
        assert_eq!(bundle.meta.steps, 60);
        assert!(run.join("ckpt_final/params.txt").exists());
        let losses = logged_losses(&run);
        assert!(losses.len() >= 2);
        let first = losses.first().unwrap().1;
        let last = losses.last().unwrap().1;
        assert!(last < first, "loss did not decrease: {first} -> {last}");
        assert!(!bundle.meta.data_fingerprint.is_empty());
    }

    #[test]
    fn training_is_deterministic_given_seed() {
        let tmp = tempfile::tempdir().unwrap();
        let data = gen(tmp.path(), "reacher2/reach_color", 2, 0);
        let plan = tiny_plan(vec![data]);
        let b1 = train(&plan, &tiny_cfg(10), &tmp.path().join("r1")).unwrap();
        let b2 = train(&plan, &tiny_cfg(10), &tmp.path().join("r2")).unwrap();
        for name in b1.params.names() {
            assert_eq!(b1.params.get(name), b2.params.get(name), "{name}");
        }
        assert_eq!(
            logged_losses(&tmp.path().join("r1")),
            logged_losses(&tmp.path().join("r2"))
        );
    }

    #[test]
    fn zero_group_lr_freezes_that_group() {
        let tmp = tempfile::tempdir().unwrap();
        let data = gen(tmp.path(), "reacher2/reach_color", 1, 0);
        let plan = tiny_plan(vec![data]);

        let mut cfg = tiny_cfg(5);
        cfg.lr_backbone = 0.0;
        let b = train(&plan, &cfg, &tmp.path().join("frozen_backbone")).unwrap();
        let fresh = PolicyBundle::new(
            plan.backbone.clone(),
            plan.head.clone(),
            plan.pipeline.clone(),
            b.stats.clone(),
            None,
            cfg.seed,
        )
        .unwrap();
        let mut backbone_moved = false;
        let mut head_moved = false;
        for name in b.params.names() {
            let moved = b.params.get(name) != fresh.params.get(name);
            if name.starts_with("backbone.") {
                backbone_moved |= moved;
            } else {
                head_moved |= moved;
            }
        }
        assert!(!backbone_moved, "backbone moved with lr_backbone = 0");
        assert!(head_moved, "head should move with nonzero lr_head");

        let mut cfg = tiny_cfg(5);
        cfg.lr_head = 0.0;
        let b = train(&plan, &cfg, &tmp.path().join("frozen_head")).unwrap();
        let mut backbone_moved = false;
        let mut head_moved = false;
        for name in b.params.names() {
            let moved = b.params.get(name) != fresh.params.get(name);
            if name.starts_with("backbone.") {
                backbone_moved |= moved;
            } else {
                head_moved |= moved;
            }
        }
        assert!(backbone_moved, "backbone should move with nonzero lr_backbone");
        assert!(!head_moved, "head moved with lr_head = 0");
    }

    #[test]
    fn eval_seed_in_train_partition_is_a_leak() {
        let tmp = tempfile::tempdir().unwrap();
        let data = gen(tmp.path(), "reacher2/reach_color", 1, 0);
        let mut plan = tiny_plan(vec![data]);
        plan.eval.seed = 5; // inside the train partition
        let err = train(&plan, &tiny_cfg(1), &tmp.path().join("run")).err().unwrap();
        assert!(matches!(err, Error::DatasetLeak(_)), "{err}");
    }

    #[test]
    fn generalist_requires_two_embodiments() {
        let tmp = tempfile::tempdir().unwrap();
        let data = gen(tmp.path(), "reacher2/reach_color", 1, 0);
        let mut plan = tiny_plan(vec![data]);
        plan.protocol = Protocol::Generalist;
        assert!(train(&plan, &tiny_cfg(1), &tmp.path().join("run")).is_err());
    }

    #[test]
    fn midpretrain_dim_change_reinits_head_but_carries_backbone() {
        let tmp = tempfile::tempdir().unwrap();
        let donor_data = gen(tmp.path(), "pusher3/push_block", 1, 0);
        let target_data = gen(tmp.path(), "reacher2/reach_color", 1, 100);

        let mut donor_plan = tiny_plan(vec![donor_data]);
        donor_plan.pipeline.multi_embodiment_strategy = MultiEmbodimentStrategy::MultiHead;
        let mut target_plan = tiny_plan(vec![target_data.clone()]);
        target_plan.pipeline.multi_embodiment_strategy = MultiEmbodimentStrategy::MultiHead;

        let run = tmp.path().join("mid");
        let bundle = midpretrain_then_finetune(&donor_plan, &target_plan, &tiny_cfg(5), &run).unwrap();
        let donor = PolicyBundle::load(&run.join("donor/ckpt_final"), None).unwrap();

        // donor head was namespaced per embodiment, so the target head is fresh
        assert!(bundle.params.names().iter().any(|n| n.starts_with("head.reacher2.")));
        assert!(!bundle.params.names().iter().any(|n| n.starts_with("head.pusher3.")));

        // backbone carried over: fine-tuning for 5 steps from the donor's
        // weights cannot coincide with a fresh random init
        let fresh = PolicyBundle::new(
            target_plan.backbone.clone(),
            target_plan.head.clone(),
            target_plan.pipeline.clone(),
            bundle.stats.clone(),
            None,
            tiny_cfg(5).seed,
        )
        .unwrap();
        let name = "backbone.layer0.attn.wq";
        let from_fresh = (bundle.params.get(name) - fresh.params.get(name))
            .iter()
            .map(|v| v.abs())
            .sum::<f64>();
        let from_donor = (bundle.params.get(name) - donor.params.get(name))
            .iter()
            .map(|v| v.abs())
            .sum::<f64>();
        assert!(
            from_donor < from_fresh,
            "backbone looks closer to fresh init ({from_fresh}) than to donor ({from_donor})"
        );
    }

    #[test]
    fn ablation_needs_two_variants_and_marks_failed_cells() {
        let tmp = tempfile::tempdir().unwrap();
        let data = gen(tmp.path(), "reacher2/reach_color", 1, 0);
        let plan = tiny_plan(vec![data]);

        let single = vec![("only".to_string(), plan.clone())];
        assert!(run_ablation(&single, &tiny_cfg(1), &tmp.path().join("a0")).is_err());

        let mut broken = plan.clone();
        broken.datasets = vec![tmp.path().join("missing")];
        let grid = vec![
            ("ok".to_string(), plan),
            ("broken".to_string(), broken),
        ];
        let report = run_ablation(&grid, &tiny_cfg(3), &tmp.path().join("a1")).unwrap();
        assert_eq!(report.rows.len(), 2);
        assert!(report.rows[0].average.is_some());
        assert!(report.rows[1].average.is_none());
        let csv = std::fs::read_to_string(tmp.path().join("a1/ablation.csv")).unwrap();
        assert!(csv.contains("failed"), "{csv}");
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn caption_pretraining_runs_and_logs() {
        let tmp = tempfile::tempdir().unwrap();
        let data = gen(tmp.path(), "reacher2/reach_color", 1, 0);
        let mut plan = tiny_plan(vec![data]);
        plan.init = InitScheme::CaptionPretrained { steps: 2 };
        let run = tmp.path().join("run");
        train(&plan, &tiny_cfg(2), &run).unwrap();
        let log = std::fs::read_to_string(run.join("train_log.csv")).unwrap();
        assert!(log.contains("caption_0"), "{log}");
    }
}
