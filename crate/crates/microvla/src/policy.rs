//! The self-contained policy artifact and its observation-to-action pipeline.
//!
//! A [`PolicyBundle`] packages everything evaluation needs: backbone config +
//! parameters, head config + parameters, the data-pipeline settings the model
//! was trained under, per-embodiment normalization stats, the fitted action
//! tokenizer (for the discrete head), and training metadata. Bundles
//! round-trip through a plain-text checkpoint directory and can be executed
//! against the benchmark via [`BundlePolicy`], which replays predicted action
//! chunks open loop and replans when a chunk is exhausted.

use std::collections::BTreeMap;
use std::collections::VecDeque;
use std::path::Path;

use ndarray::Array2;
use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{tokenize, Backbone, BackboneConfig, SizePreset};
use crate::config::ConfigMap;
use crate::datapipe::{
    denormalize, from_delta, from_relative, normalize, pad_action, rdt_embed, rdt_extract,
    to_delta, to_relative, unpad_action, MultiEmbodimentStrategy, PaddedAction, PaddingConfig,
    Parameterization, PipelineConfig, RdtSlotLayout,
};
use crate::envbench::{Policy, SimState, ToyEmbodiment};
use crate::error::{Error, Result};
use crate::fast::FastTokenizer;
use crate::heads::{
    build_head, ActionHead, FastDecodeConfig, FlowConfig, FlowHead, HeadConfig, HeadKind,
    MlpHead, MultiHead,
};
use crate::nn::params::ParamStore;
use crate::nn::tape::Tape;
use crate::types::{ActionChunk, EmbodimentSpec, NormalizationStats, Observation, SpaceTag};

pub const BUNDLE_FORMAT_VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// Action representation (shared by training and inference)
// ---------------------------------------------------------------------------

/// Representation width the head sees for this pipeline and embodiment.
pub fn repr_dim(pipeline: &PipelineConfig, spec: &EmbodimentSpec) -> usize {
    match pipeline.multi_embodiment_strategy {
        MultiEmbodimentStrategy::SimplePadding | MultiEmbodimentStrategy::RdtSlots => {
            pipeline.padding.target_dim
        }
        MultiEmbodimentStrategy::MultiHead => spec.action_dim,
    }
}

/// Lifts a native absolute-space chunk into the model representation:
/// parameterize (against the current proprio reading), normalize, then embed
/// into the cross-embodiment layout. Returns the `H x D_repr` target and its
/// validity mask.
pub fn represent_chunk(
    chunk: &ActionChunk,
    proprio: &[f64],
    spec: &EmbodimentSpec,
    pipeline: &PipelineConfig,
    stats: &NormalizationStats,
) -> Result<(Array2<f64>, Vec<bool>)> {
    let parameterized = match pipeline.parameterization {
        Parameterization::Absolute => chunk.clone(),
        Parameterization::Delta => to_delta(chunk, proprio)?,
        Parameterization::Relative => to_relative(chunk, proprio)?,
    };
    let normalized = if pipeline.normalize {
        normalize(&parameterized, stats)?
    } else {
        ActionChunk::new(parameterized.values.clone(), SpaceTag::Normalized)
    };
    let padded = match pipeline.multi_embodiment_strategy {
        MultiEmbodimentStrategy::SimplePadding => {
            pad_action(&normalized, spec, &pipeline.padding)?
        }
        MultiEmbodimentStrategy::RdtSlots => {
            let layout = RdtSlotLayout::toy_suite(pipeline.padding.target_dim);
            rdt_embed(&normalized, spec, &layout)?
        }
        MultiEmbodimentStrategy::MultiHead => PaddedAction {
            values: normalized.values.clone(),
            mask: vec![true; spec.action_dim],
        },
    };
    Ok((padded.values, padded.mask))
}

/// Inverse of [`represent_chunk`]: extract native dimensions, denormalize,
/// and undo the parameterization against the same proprio reading.
pub fn invert_representation(
    pred: &Array2<f64>,
    proprio: &[f64],
    spec: &EmbodimentSpec,
    pipeline: &PipelineConfig,
    stats: &NormalizationStats,
) -> Result<ActionChunk> {
    let native = match pipeline.multi_embodiment_strategy {
        MultiEmbodimentStrategy::SimplePadding => {
            let mut mask = vec![false; pred.ncols()];
            for m in mask.iter_mut().take(spec.action_dim) {
                *m = true;
            }
            unpad_action(
                &PaddedAction {
                    values: pred.clone(),
                    mask,
                },
                spec,
            )?
        }
        MultiEmbodimentStrategy::RdtSlots => {
            let layout = RdtSlotLayout::toy_suite(pred.ncols());
            rdt_extract(
                &PaddedAction {
                    values: pred.clone(),
                    mask: vec![false; pred.ncols()],
                },
                spec,
                &layout,
            )?
        }
        MultiEmbodimentStrategy::MultiHead => {
            if pred.ncols() != spec.action_dim {
                return Err(Error::DimMismatch {
                    expected: spec.action_dim,
                    got: pred.ncols(),
                    context: "invert_representation".into(),
                });
            }
            ActionChunk::new(pred.clone(), SpaceTag::Normalized)
        }
    };
    let denorm_values = if pipeline.normalize {
        denormalize(&native, stats)?.values
    } else {
        native.values.clone()
    };
    // denormalization restores the parameterized space, not absolute space
    let denorm = ActionChunk::new(
        denorm_values,
        match pipeline.parameterization {
            Parameterization::Absolute => SpaceTag::Absolute,
            Parameterization::Delta => SpaceTag::Delta,
            Parameterization::Relative => SpaceTag::Relative,
        },
    );
    match pipeline.parameterization {
        Parameterization::Absolute => Ok(ActionChunk::new(denorm.values.clone(), SpaceTag::Absolute)),
        Parameterization::Delta => from_delta(&denorm, proprio),
        Parameterization::Relative => from_relative(&denorm, proprio),
    }
}

// ---------------------------------------------------------------------------
// Bundle
// ---------------------------------------------------------------------------

/// Training provenance carried inside the checkpoint.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BundleMeta {
    pub steps: usize,
    pub seed: u64,
    /// Sorted dataset identity string; used to detect train/eval overlap.
    pub data_fingerprint: String,
}

/// A trained policy with everything evaluation needs.
pub struct PolicyBundle {
    pub backbone: Backbone,
    pub head_cfg: HeadConfig,
    /// All trainable parameters (backbone + head), the single source of
    /// truth at inference time.
    pub params: ParamStore,
    pub pipeline: PipelineConfig,
    /// Per-embodiment normalization stats; keys are the embodiments this
    /// bundle was trained on.
    pub stats: BTreeMap<String, NormalizationStats>,
    pub tokenizer: Option<FastTokenizer>,
    pub meta: BundleMeta,
    head: Box<dyn ActionHead>,
}

/// Builds the head object a bundle executes, honoring the multi-embodiment
/// strategy: the `multi_head` strategy wraps one namespaced head per trained
/// embodiment.
pub fn build_bundle_head(
    head_cfg: &HeadConfig,
    pipeline: &PipelineConfig,
    horizon: usize,
    embodiments: &[String],
    tokenizer: Option<FastTokenizer>,
) -> Result<Box<dyn ActionHead>> {
    if pipeline.multi_embodiment_strategy != MultiEmbodimentStrategy::MultiHead {
        let dim = pipeline.padding.target_dim;
        return build_head(head_cfg, horizon, dim, tokenizer);
    }
    let mut heads: BTreeMap<String, Box<dyn ActionHead>> = BTreeMap::new();
    for name in embodiments {
        let spec = ToyEmbodiment::parse(name)?.spec();
        let prefix = format!("head.{name}.");
        let sub: Box<dyn ActionHead> = match head_cfg.kind {
            HeadKind::Mlp => {
                let mut h = MlpHead::new(horizon, spec.action_dim, head_cfg.mlp_hidden);
                h.prefix = prefix;
                Box::new(h)
            }
            HeadKind::FlowPi => {
                let mut h = FlowHead::joint(horizon, spec.action_dim, head_cfg.flow.clone());
                h.prefix = prefix;
                Box::new(h)
            }
            other => {
                return Err(Error::config(
                    "head.kind",
                    format!("kind {} cannot be routed per embodiment", other.as_str()),
                ))
            }
        };
        heads.insert(name.clone(), sub);
    }
    Ok(Box::new(MultiHead::new(heads)?))
}

impl PolicyBundle {
    /// Assembles a fresh bundle with freshly initialized parameters.
    pub fn new(
        backbone_cfg: BackboneConfig,
        head_cfg: HeadConfig,
        pipeline: PipelineConfig,
        stats: BTreeMap<String, NormalizationStats>,
        tokenizer: Option<FastTokenizer>,
        seed: u64,
    ) -> Result<Self> {
        let backbone = Backbone::new(backbone_cfg, seed);
        let embodiments: Vec<String> = stats.keys().cloned().collect();
        let head = build_bundle_head(
            &head_cfg,
            &pipeline,
            backbone.cfg.num_action_queries,
            &embodiments,
            tokenizer.clone(),
        )?;
        let mut params = backbone.params.clone();
        params.absorb(head.init_params(backbone.cfg.width(), seed.wrapping_add(1)));
        Ok(Self {
            backbone,
            head_cfg,
            params,
            pipeline,
            stats,
            tokenizer,
            meta: BundleMeta {
                seed,
                ..Default::default()
            },
            head,
        })
    }

    pub fn head(&self) -> &dyn ActionHead {
        self.head.as_ref()
    }

    pub fn head_kind(&self) -> HeadKind {
        self.head_cfg.kind
    }

    pub fn stats_for(&self, embodiment: &str) -> Result<&NormalizationStats> {
        self.stats
            .get(embodiment)
            .ok_or_else(|| Error::UnregisteredEmbodiment(embodiment.to_string()))
    }

    /// One full inference pass: observation -> native absolute action chunk.
    /// `obs` must already carry the history stack the pipeline expects.
    pub fn predict(
        &self,
        obs: &Observation,
        embodiment: &str,
        rng: &mut dyn RngCore,
    ) -> Result<ActionChunk> {
        let spec = ToyEmbodiment::parse(embodiment)?.spec();
        let stats = self.stats_for(embodiment)?;
        let stream = tokenize(obs, &self.backbone.cfg, self.pipeline.use_proprio)?;
        let mut tape = Tape::new();
        let bind = self.params.bind(&mut tape);
        let pred = self.head.predict(
            &mut tape,
            &bind,
            &self.backbone,
            &stream,
            embodiment,
            rng,
        )?;
        invert_representation(&pred.values, &obs.proprio, &spec, &self.pipeline, stats)
    }

    // -----------------------------------------------------------------------
    // Checkpoint format
    // -----------------------------------------------------------------------

    fn config_map(&self) -> ConfigMap {
        let mut m = ConfigMap::new();
        m.set("meta.format_version", BUNDLE_FORMAT_VERSION);
        m.set("meta.steps", self.meta.steps);
        m.set("meta.seed", self.meta.seed);
        m.set("meta.data_fingerprint", &self.meta.data_fingerprint);
        m.set(
            "meta.embodiments",
            self.stats.keys().cloned().collect::<Vec<_>>().join(","),
        );

        let b = &self.backbone.cfg;
        m.set("backbone.size_preset", b.size_preset.as_str());
        m.set("backbone.patch_size", b.patch_size);
        m.set("backbone.max_text_tokens", b.max_text_tokens);
        m.set("backbone.num_action_queries", b.num_action_queries);
        m.set("backbone.resolution", b.resolution);
        m.set("backbone.max_history", b.max_history);
        m.set("backbone.proprio_width", b.proprio_width);
        m.set("backbone.max_ar_tokens", b.max_ar_tokens);

        let h = &self.head_cfg;
        m.set("head.kind", h.kind.as_str());
        m.set("head.mlp_hidden", h.mlp_hidden);
        m.set("head.flow_steps", h.flow.steps);
        m.set("head.flow_expert_width", h.flow.expert_width);
        m.set("head.flow_expert_layers", h.flow.expert_layers);
        m.set("head.flow_expert_heads", h.flow.expert_heads);
        m.set("head.freeze_system2_link", h.flow.freeze_system2_link);
        m.set("head.fast_temperature", h.fast.temperature);
        m.set("head.fast_max_tokens", h.fast.max_tokens);

        let p = &self.pipeline;
        m.set("pipeline.normalize", p.normalize);
        m.set("pipeline.parameterization", p.parameterization.as_str());
        m.set("pipeline.history_k", p.history_k);
        m.set("pipeline.use_proprio", p.use_proprio);
        m.set(
            "pipeline.multi_embodiment_strategy",
            p.multi_embodiment_strategy.as_str(),
        );
        m.set("pipeline.target_dim", p.padding.target_dim);
        m.set("pipeline.pad_value", p.padding.pad_value);
        m
    }

    /// Writes the checkpoint directory: `config.txt`, `params.txt`,
    /// `stats.txt`, and `tokenizer.txt` when the bundle carries one.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let write = |name: &str, text: String| -> Result<()> {
            let path = dir.join(name);
            std::fs::write(&path, text).map_err(|e| Error::io(path.display().to_string(), e))
        };
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        write("config.txt", self.config_map().serialize())?;
        write("params.txt", self.params.serialize())?;
        write("stats.txt", serialize_stats(&self.stats))?;
        if let Some(tok) = &self.tokenizer {
            write("tokenizer.txt", tok.serialize())?;
        }
        Ok(())
    }

    /// Loads a checkpoint directory. When `expected_kind` is given, a bundle
    /// trained with a different head kind is rejected by name.
    pub fn load(dir: &Path, expected_kind: Option<HeadKind>) -> Result<Self> {
        let read = |name: &str| -> Result<String> {
            std::fs::read_to_string(dir.join(name))
                .map_err(|_| Error::MissingArtifact(dir.join(name).display().to_string()))
        };
        let m = ConfigMap::parse(&read("config.txt")?)?;
        let version: u32 = m.get_parse("meta.format_version")?;
        if version != BUNDLE_FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                expected: BUNDLE_FORMAT_VERSION,
                found: version,
            });
        }
        let kind = HeadKind::parse(m.get("head.kind")?)?;
        if let Some(expected) = expected_kind {
            if kind != expected {
                return Err(Error::HeadKindMismatch {
                    stored: kind.as_str().into(),
                    requested: expected.as_str().into(),
                });
            }
        }
        let backbone_cfg = BackboneConfig {
            size_preset: SizePreset::parse(m.get("backbone.size_preset")?)?,
            patch_size: m.get_parse("backbone.patch_size")?,
            max_text_tokens: m.get_parse("backbone.max_text_tokens")?,
            num_action_queries: m.get_parse("backbone.num_action_queries")?,
            resolution: m.get_parse("backbone.resolution")?,
            max_history: m.get_parse("backbone.max_history")?,
            proprio_width: m.get_parse("backbone.proprio_width")?,
            max_ar_tokens: m.get_parse("backbone.max_ar_tokens")?,
        };
        let head_cfg = HeadConfig {
            kind,
            mlp_hidden: m.get_parse("head.mlp_hidden")?,
            flow: FlowConfig {
                steps: m.get_parse("head.flow_steps")?,
                expert_width: m.get_parse("head.flow_expert_width")?,
                expert_layers: m.get_parse("head.flow_expert_layers")?,
                expert_heads: m.get_parse("head.flow_expert_heads")?,
                freeze_system2_link: m.get_parse("head.freeze_system2_link")?,
            },
            fast: FastDecodeConfig {
                temperature: m.get_parse("head.fast_temperature")?,
                max_tokens: m.get_parse("head.fast_max_tokens")?,
            },
        };
        let pipeline = PipelineConfig {
            normalize: m.get_parse("pipeline.normalize")?,
            parameterization: Parameterization::parse(m.get("pipeline.parameterization")?)?,
            history_k: m.get_parse("pipeline.history_k")?,
            use_proprio: m.get_parse("pipeline.use_proprio")?,
            multi_embodiment_strategy: MultiEmbodimentStrategy::parse(
                m.get("pipeline.multi_embodiment_strategy")?,
            )?,
            padding: PaddingConfig {
                target_dim: m.get_parse("pipeline.target_dim")?,
                pad_value: m.get_parse("pipeline.pad_value")?,
            },
        };
        let meta = BundleMeta {
            steps: m.get_parse("meta.steps")?,
            seed: m.get_parse("meta.seed")?,
            data_fingerprint: m.get("meta.data_fingerprint")?.to_string(),
        };
        let stats = parse_stats(&read("stats.txt")?)?;
        let tokenizer = if kind == HeadKind::FastAr {
            Some(FastTokenizer::deserialize(&read("tokenizer.txt")?)?)
        } else {
            None
        };

        let mut bundle = Self::new(backbone_cfg, head_cfg, pipeline, stats, tokenizer, meta.seed)?;
        let params = ParamStore::deserialize(&read("params.txt")?)?;
        bundle.params.shape_diff(&params)?;
        bundle.params = params;
        bundle.meta = meta;
        Ok(bundle)
    }
}

fn serialize_stats(stats: &BTreeMap<String, NormalizationStats>) -> String {
    let mut out = String::new();
    for (name, s) in stats {
        out.push_str(&format!("stats {} {} {}\n", name, s.dim(), s.count));
        let fmt = |v: &[f64]| v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(" ");
        out.push_str(&fmt(&s.mean));
        out.push('\n');
        out.push_str(&fmt(&s.std));
        out.push('\n');
    }
    out
}

fn parse_stats(text: &str) -> Result<BTreeMap<String, NormalizationStats>> {
    let mut out = BTreeMap::new();
    let mut lines = text.lines();
    while let Some(header) = lines.next() {
        if header.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 4 || parts[0] != "stats" {
            return Err(Error::config("stats", format!("bad header `{header}`")));
        }
        let name = parts[1].to_string();
        let dim: usize = parts[2]
            .parse()
            .map_err(|_| Error::config("stats", "bad dim"))?;
        let count: usize = parts[3]
            .parse()
            .map_err(|_| Error::config("stats", "bad count"))?;
        let mut row = |label: &str| -> Result<Vec<f64>> {
            let line = lines
                .next()
                .ok_or_else(|| Error::config("stats", format!("{name}: missing {label} row")))?;
            let vals: Result<Vec<f64>> = line
                .split_whitespace()
                .map(|v| {
                    v.parse()
                        .map_err(|_| Error::config("stats", format!("{name}: bad {label} value")))
                })
                .collect();
            let vals = vals?;
            if vals.len() != dim {
                return Err(Error::config(
                    "stats",
                    format!("{name}: {label} row has {} values, expected {dim}", vals.len()),
                ));
            }
            Ok(vals)
        };
        let mean = row("mean")?;
        let std = row("std")?;
        out.insert(
            name.clone(),
            NormalizationStats {
                mean,
                std,
                count,
                embodiment: name,
            },
        );
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Benchmark adapter
// ---------------------------------------------------------------------------

/// Runs a bundle against the benchmark: maintains the frame-history stack,
/// executes each predicted chunk open loop, and replans when the chunk runs
/// out.
pub struct BundlePolicy<'a> {
    pub bundle: &'a PolicyBundle,
    pub embodiment: String,
    /// Steps of each chunk to execute before replanning; clamped to the
    /// chunk horizon. Default: the full horizon.
    pub replan_every: usize,
    rng: ChaCha8Rng,
    seed: u64,
    history: VecDeque<crate::types::Frame>,
    queue: VecDeque<Vec<f64>>,
}

impl<'a> BundlePolicy<'a> {
    pub fn new(bundle: &'a PolicyBundle, embodiment: impl Into<String>, seed: u64) -> Self {
        let horizon = bundle.backbone.cfg.num_action_queries;
        Self {
            bundle,
            embodiment: embodiment.into(),
            replan_every: horizon,
            rng: ChaCha8Rng::seed_from_u64(seed),
            seed,
            history: VecDeque::new(),
            queue: VecDeque::new(),
        }
    }
}

impl Policy for BundlePolicy<'_> {
    fn embodiment(&self) -> &str {
        &self.embodiment
    }

    fn begin_episode(&mut self, episode_seed: u64) {
        self.history.clear();
        self.queue.clear();
        self.rng = ChaCha8Rng::seed_from_u64(self.seed ^ episode_seed.wrapping_mul(0x9e37_79b9));
    }

    fn act(&mut self, obs: &Observation, _state: &SimState) -> Result<Vec<f64>> {
        let k = self.bundle.pipeline.history_k;
        let frame = obs.frames.last().expect("observation has a frame").clone();
        if self.history.is_empty() {
            // edge-replicate below episode start
            for _ in 0..k {
                self.history.push_back(frame.clone());
            }
        } else {
            self.history.push_back(frame);
            while self.history.len() > k {
                self.history.pop_front();
            }
        }
        if self.queue.is_empty() {
            let stacked = Observation {
                frames: self.history.iter().cloned().collect(),
                instruction: obs.instruction.clone(),
                proprio: obs.proprio.clone(),
                step_index: obs.step_index,
            };
            let chunk = self
                .bundle
                .predict(&stacked, &self.embodiment, &mut self.rng)?;
            let take = self.replan_every.clamp(1, chunk.horizon());
            for t in 0..take {
                self.queue.push_back(chunk.values.row(t).to_vec());
            }
        }
        Ok(self.queue.pop_front().expect("chunk is never empty"))
    }
}
