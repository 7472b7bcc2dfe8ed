//! Command-line front end: `gen-data`, `fit-tokenizer`, `train`, `eval`,
//! `ablate`, and `report`, all driven by one sectioned key=value config
//! format with schema defaults.
//!
//! Conventions:
//! - every config key has a default; unknown keys are errors;
//! - any flag of the form `--section.key value` overrides that config key;
//! - the fully resolved config is echoed into the run directory as
//!   `resolved_config.txt`;
//! - exit codes: 0 ok, 2 config error, 3 runtime error, 4 missing artifact;
//! - env vars: `MICROVLA_RUNS_DIR` (default `./runs`),
//!   `MICROVLA_DETERMINISTIC=1` (zeroes wall-clock fields in logs).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::backbone::{BackboneConfig, SizePreset};
use crate::config::ConfigMap;
use crate::datapipe::{
    MultiEmbodimentStrategy, Parameterization, PipelineConfig,
};
use crate::envbench::{
    generate_dataset, DatasetRegime, PerturbationConfig, ToyEmbodiment,
};
use crate::error::{Error, Result};
use crate::heads::{FastDecodeConfig, FlowConfig, HeadConfig, HeadKind};
use crate::policy::PolicyBundle;
use crate::report;
use crate::trainer::{
    self, EvalSpec, ExperimentPlan, InitScheme, Protocol, TrainConfig,
};
use crate::dataset::Split;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;
pub const EXIT_MISSING: i32 = 4;

/// Map an error to its exit code: config problems are 2, missing files and
/// artifacts are 4, everything else is 3.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config { .. } | Error::UnknownTaskFamily(_) | Error::UnknownEmbodiment(_) => {
            EXIT_CONFIG
        }
        Error::MissingArtifact(_) => EXIT_MISSING,
        Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => EXIT_MISSING,
        _ => EXIT_RUNTIME,
    }
}

/// Entry point used by the binary: dispatches a subcommand, prints errors to
/// standard error, and returns the process exit code.
pub fn run(args: &[String]) -> i32 {
    let Some(cmd) = args.first() else {
        eprintln!("usage: microvla <gen-data|fit-tokenizer|train|eval|ablate|report> [flags]");
        return EXIT_CONFIG;
    };
    let rest = &args[1..];
    let result = match cmd.as_str() {
        "gen-data" => cmd_gen_data(rest),
        "fit-tokenizer" => cmd_fit_tokenizer(rest),
        "train" => cmd_train(rest),
        "eval" => cmd_eval(rest),
        "ablate" => cmd_ablate(rest),
        "report" => cmd_report(rest),
        other => {
            eprintln!("unknown command `{other}`");
            return EXIT_CONFIG;
        }
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("microvla {cmd}: {e}");
            exit_code(&e)
        }
    }
}

/// Runs directory: `MICROVLA_RUNS_DIR` or `./runs`.
pub fn runs_dir() -> PathBuf {
    std::env::var("MICROVLA_RUNS_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|_| PathBuf::from("./runs"))
}

// ---------------------------------------------------------------------------
// Config schema
// ---------------------------------------------------------------------------

/// The full experiment config with every key at its schema default.
pub fn default_config() -> ConfigMap {
    let mut m = ConfigMap::new();
    // dataset: generation inputs and training dataset roots
    m.set("dataset.roots", ""); // ';'-separated dataset directories
    m.set("dataset.donor_roots", ""); // donor datasets for mid-pretraining
    m.set("dataset.family", "reacher2/reach_color");
    m.set("dataset.n", 50);
    m.set("dataset.sigma_demo", 0.0);
    m.set("dataset.seed", 0);
    m.set("dataset.regime", "clean");
    m.set("dataset.split", "train");
    m.set("dataset.resolution", 64);
    m.set("dataset.out", "");

    let p = PipelineConfig::default();
    m.set("pipeline.normalize", p.normalize);
    m.set("pipeline.parameterization", p.parameterization.as_str());
    m.set("pipeline.history_k", p.history_k);
    m.set("pipeline.use_proprio", p.use_proprio);
    m.set("pipeline.strategy", p.multi_embodiment_strategy.as_str());
    m.set("pipeline.pad_dim", p.padding.target_dim);
    m.set("pipeline.pad_value", p.padding.pad_value);

    let b = BackboneConfig::default();
    m.set("backbone.size", b.size_preset.as_str());
    m.set("backbone.patch_size", b.patch_size);
    m.set("backbone.max_text_tokens", b.max_text_tokens);
    m.set("backbone.action_queries", b.num_action_queries);
    m.set("backbone.resolution", b.resolution);
    m.set("backbone.max_history", b.max_history);
    m.set("backbone.proprio_width", b.proprio_width);
    m.set("backbone.max_ar_tokens", b.max_ar_tokens);

    let h = HeadConfig::default();
    m.set("head.kind", h.kind.as_str());
    m.set("head.mlp_hidden", h.mlp_hidden);
    m.set("head.fast_temperature", h.fast.temperature);
    m.set("head.fast_max_tokens", h.fast.max_tokens);
    m.set("head.flow_steps", h.flow.steps);
    m.set("head.flow_expert_width", h.flow.expert_width);
    m.set("head.flow_expert_layers", h.flow.expert_layers);
    m.set("head.flow_expert_heads", h.flow.expert_heads);
    m.set("head.freeze_system2_link", h.flow.freeze_system2_link);

    let t = TrainConfig::default();
    m.set("train.protocol", "specialist");
    m.set("train.steps", t.steps);
    m.set("train.batch_size", t.batch_size);
    m.set("train.lr_backbone", t.lr_backbone);
    m.set("train.lr_head", t.lr_head);
    m.set("train.warmup_frac", t.warmup_frac);
    m.set("train.grad_clip_norm", t.grad_clip_norm);
    m.set("train.weight_decay", t.weight_decay);
    m.set("train.seed", t.seed);
    m.set("train.checkpoint_every", t.checkpoint_every);
    m.set("train.init", "random"); // random | caption:<steps> | donor:<ckpt dir>
    m.set("train.tokenizer_chunks", 256);
    m.set("train.run_name", "");

    let e = EvalSpec::default();
    m.set("eval.tasks", e.tasks.join(";"));
    m.set("eval.episodes", e.episodes);
    m.set("eval.seed", e.seed);

    let q = PerturbationConfig::off();
    m.set("perturbation.layout_shift", q.layout_shift);
    m.set("perturbation.robot_jitter", q.robot_jitter);
    m.set("perturbation.language_paraphrase", q.language_paraphrase);
    m.set("perturbation.camera_shift_px", q.camera_shift_px);
    m.set("perturbation.light_brightness", q.light_brightness);
    m.set("perturbation.light_contrast", q.light_contrast);
    m.set("perturbation.background_swap", q.background_swap);
    m.set("perturbation.noise_sigma", q.noise_sigma);
    m
}

/// Load a config file (optional), validate it against the schema, and apply
/// flag overrides. Returns the fully resolved config.
pub fn resolve_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<ConfigMap> {
    let mut resolved = default_config();
    let allowed: Vec<String> = resolved.keys().map(str::to_string).collect();
    let allowed_refs: Vec<&str> = allowed.iter().map(String::as_str).collect();
    if let Some(path) = path {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let file = ConfigMap::parse(&text)?;
        file.reject_unknown(&allowed_refs)?;
        for key in file.keys().map(str::to_string).collect::<Vec<_>>() {
            resolved.set(&key, file.get(&key)?);
        }
    }
    for (key, value) in overrides {
        if !resolved.contains(key) {
            return Err(Error::config(key.clone(), "unknown config key"));
        }
        resolved.set(key, value);
    }
    Ok(resolved)
}

fn echo_resolved(cfg: &ConfigMap, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let path = dir.join("resolved_config.txt");
    std::fs::write(&path, cfg.serialize()).map_err(|e| Error::io(path.display().to_string(), e))
}

// ---------------------------------------------------------------------------
// Config -> domain structs
// ---------------------------------------------------------------------------

fn pipeline_from(cfg: &ConfigMap) -> Result<PipelineConfig> {
    Ok(PipelineConfig {
        normalize: cfg.get_parse("pipeline.normalize")?,
        parameterization: Parameterization::parse(cfg.get("pipeline.parameterization")?)?,
        history_k: cfg.get_parse("pipeline.history_k")?,
        use_proprio: cfg.get_parse("pipeline.use_proprio")?,
        multi_embodiment_strategy: MultiEmbodimentStrategy::parse(cfg.get("pipeline.strategy")?)?,
        padding: crate::datapipe::PaddingConfig {
            target_dim: cfg.get_parse("pipeline.pad_dim")?,
            pad_value: cfg.get_parse("pipeline.pad_value")?,
        },
    })
}

fn backbone_from(cfg: &ConfigMap) -> Result<BackboneConfig> {
    Ok(BackboneConfig {
        size_preset: SizePreset::parse(cfg.get("backbone.size")?)?,
        patch_size: cfg.get_parse("backbone.patch_size")?,
        max_text_tokens: cfg.get_parse("backbone.max_text_tokens")?,
        num_action_queries: cfg.get_parse("backbone.action_queries")?,
        resolution: cfg.get_parse("backbone.resolution")?,
        max_history: cfg.get_parse("backbone.max_history")?,
        proprio_width: cfg.get_parse("backbone.proprio_width")?,
        max_ar_tokens: cfg.get_parse("backbone.max_ar_tokens")?,
    })
}

fn head_from(cfg: &ConfigMap) -> Result<HeadConfig> {
    Ok(HeadConfig {
        kind: HeadKind::parse(cfg.get("head.kind")?)?,
        mlp_hidden: cfg.get_parse("head.mlp_hidden")?,
        fast: FastDecodeConfig {
            temperature: cfg.get_parse("head.fast_temperature")?,
            max_tokens: cfg.get_parse("head.fast_max_tokens")?,
        },
        flow: FlowConfig {
            steps: cfg.get_parse("head.flow_steps")?,
            expert_width: cfg.get_parse("head.flow_expert_width")?,
            expert_layers: cfg.get_parse("head.flow_expert_layers")?,
            expert_heads: cfg.get_parse("head.flow_expert_heads")?,
            freeze_system2_link: cfg.get_parse("head.freeze_system2_link")?,
        },
    })
}

fn perturbation_from(cfg: &ConfigMap) -> Result<PerturbationConfig> {
    Ok(PerturbationConfig {
        layout_shift: cfg.get_parse("perturbation.layout_shift")?,
        robot_jitter: cfg.get_parse("perturbation.robot_jitter")?,
        language_paraphrase: cfg.get_parse("perturbation.language_paraphrase")?,
        camera_shift_px: cfg.get_parse("perturbation.camera_shift_px")?,
        light_brightness: cfg.get_parse("perturbation.light_brightness")?,
        light_contrast: cfg.get_parse("perturbation.light_contrast")?,
        background_swap: cfg.get_parse("perturbation.background_swap")?,
        noise_sigma: cfg.get_parse("perturbation.noise_sigma")?,
    })
}

fn eval_from(cfg: &ConfigMap) -> Result<EvalSpec> {
    Ok(EvalSpec {
        tasks: expand_tasks(cfg.get("eval.tasks")?)?,
        episodes: cfg.get_parse("eval.episodes")?,
        seed: cfg.get_parse("eval.seed")?,
        perturb: perturbation_from(cfg)?,
    })
}

fn train_config_from(cfg: &ConfigMap) -> Result<TrainConfig> {
    Ok(TrainConfig {
        steps: cfg.get_parse("train.steps")?,
        batch_size: cfg.get_parse("train.batch_size")?,
        lr_backbone: cfg.get_parse("train.lr_backbone")?,
        lr_head: cfg.get_parse("train.lr_head")?,
        warmup_frac: cfg.get_parse("train.warmup_frac")?,
        grad_clip_norm: cfg.get_parse("train.grad_clip_norm")?,
        weight_decay: cfg.get_parse("train.weight_decay")?,
        seed: cfg.get_parse("train.seed")?,
        checkpoint_every: cfg.get_parse("train.checkpoint_every")?,
    })
}

fn init_from(cfg: &ConfigMap) -> Result<InitScheme> {
    let raw = cfg.get("train.init")?;
    if raw == "random" {
        Ok(InitScheme::Random)
    } else if let Some(steps) = raw.strip_prefix("caption:") {
        let steps = steps
            .parse()
            .map_err(|_| Error::config("train.init", format!("bad caption step count `{steps}`")))?;
        Ok(InitScheme::CaptionPretrained { steps })
    } else if let Some(path) = raw.strip_prefix("donor:") {
        Ok(InitScheme::DonorCheckpoint(PathBuf::from(path)))
    } else {
        Err(Error::config(
            "train.init",
            format!("expected random, caption:<steps>, or donor:<dir>, got `{raw}`"),
        ))
    }
}

fn regime_from(cfg: &ConfigMap) -> Result<DatasetRegime> {
    match cfg.get("dataset.regime")? {
        "clean" => Ok(DatasetRegime::Clean),
        "randomized" => Ok(DatasetRegime::Randomized),
        other => Err(Error::config(
            "dataset.regime",
            format!("expected clean or randomized, got `{other}`"),
        )),
    }
}

fn split_from(cfg: &ConfigMap) -> Result<Split> {
    match cfg.get("dataset.split")? {
        "train" => Ok(Split::Train),
        "eval" => Ok(Split::Eval),
        other => Err(Error::config(
            "dataset.split",
            format!("expected train or eval, got `{other}`"),
        )),
    }
}

fn roots_from(cfg: &ConfigMap, key: &str) -> Result<Vec<PathBuf>> {
    let raw = cfg.get(key)?;
    let roots: Vec<PathBuf> = raw
        .split(';')
        .filter(|s| !s.trim().is_empty())
        .map(|s| PathBuf::from(s.trim()))
        .collect();
    if roots.is_empty() {
        return Err(Error::config(key, "no dataset roots given"));
    }
    Ok(roots)
}

/// Expand a `;`- or `,`-separated task list; `<family>/*` expands to every
/// registered task family with that embodiment prefix.
pub fn expand_tasks(raw: &str) -> Result<Vec<String>> {
    let mut tasks = Vec::new();
    for part in raw.split([';', ',']).map(str::trim).filter(|s| !s.is_empty()) {
        if let Some(prefix) = part.strip_suffix("/*") {
            let mut matched = false;
            for e in ToyEmbodiment::all() {
                if e.name() == prefix {
                    tasks.push(e.task_family().to_string());
                    matched = true;
                }
            }
            if !matched {
                return Err(Error::UnknownTaskFamily(part.to_string()));
            }
        } else {
            tasks.push(part.to_string());
        }
    }
    if tasks.is_empty() {
        return Err(Error::config("eval.tasks", "no tasks given"));
    }
    Ok(tasks)
}

fn plan_from(cfg: &ConfigMap, datasets_key: &str) -> Result<ExperimentPlan> {
    Ok(ExperimentPlan {
        protocol: Protocol::parse(cfg.get("train.protocol")?)?,
        datasets: roots_from(cfg, datasets_key)?,
        pipeline: pipeline_from(cfg)?,
        backbone: backbone_from(cfg)?,
        head: head_from(cfg)?,
        init: init_from(cfg)?,
        eval: eval_from(cfg)?,
    })
}

// ---------------------------------------------------------------------------
// Flag parsing
// ---------------------------------------------------------------------------

struct Args {
    flags: BTreeMap<String, String>,
    /// `--section.key value` flags, in order.
    overrides: Vec<(String, String)>,
    positionals: Vec<String>,
}

fn parse_flags(raw: &[String]) -> Result<Args> {
    let mut args = Args {
        flags: BTreeMap::new(),
        overrides: Vec::new(),
        positionals: Vec::new(),
    };
    let mut it = raw.iter();
    while let Some(tok) = it.next() {
        if let Some(name) = tok.strip_prefix("--") {
            let (name, value) = match name.split_once('=') {
                Some((n, v)) => (n.to_string(), v.to_string()),
                None => {
                    let v = it.next().ok_or_else(|| {
                        Error::config(name.to_string(), "flag is missing a value")
                    })?;
                    (name.to_string(), v.clone())
                }
            };
            if name.contains('.') {
                args.overrides.push((name, value));
            } else {
                args.flags.insert(name, value);
            }
        } else {
            args.positionals.push(tok.clone());
        }
    }
    Ok(args)
}

impl Args {
    fn config_path(&self) -> Option<PathBuf> {
        self.flags.get("config").map(PathBuf::from)
    }

    /// Convenience flags double as overrides of the named config key.
    fn alias(&self, flag: &str, key: &str, cfg: &mut ConfigMap) -> Result<()> {
        if let Some(v) = self.flags.get(flag) {
            if !cfg.contains(key) {
                return Err(Error::config(key, "unknown config key"));
            }
            cfg.set(key, v);
        }
        Ok(())
    }

    fn reject_unknown_flags(&self, allowed: &[&str]) -> Result<()> {
        for name in self.flags.keys() {
            if !allowed.contains(&name.as_str()) {
                return Err(Error::config(name.clone(), "unknown flag"));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

fn cmd_gen_data(raw: &[String]) -> Result<()> {
    let args = parse_flags(raw)?;
    args.reject_unknown_flags(&["config", "out", "n", "seed", "family"])?;
    let mut cfg = resolve_config(args.config_path().as_deref(), &args.overrides)?;
    args.alias("out", "dataset.out", &mut cfg)?;
    args.alias("n", "dataset.n", &mut cfg)?;
    args.alias("seed", "dataset.seed", &mut cfg)?;
    args.alias("family", "dataset.family", &mut cfg)?;

    let out = cfg.get("dataset.out")?;
    if out.is_empty() {
        return Err(Error::config("dataset.out", "output directory not set"));
    }
    let root = PathBuf::from(out);
    let family = cfg.get("dataset.family")?.to_string();
    let ids = generate_dataset(
        &family,
        cfg.get_parse("dataset.n")?,
        cfg.get_parse("dataset.sigma_demo")?,
        cfg.get_parse("dataset.seed")?,
        regime_from(&cfg)?,
        &root,
        split_from(&cfg)?,
        cfg.get_parse("dataset.resolution")?,
    )?;
    echo_resolved(&cfg, &root)?;
    let manifest = crate::dataset::DatasetManifest::load(&root)?;
    println!(
        "wrote {} episodes of `{family}` to {} ({} manifest entries)",
        ids.len(),
        root.display(),
        manifest.entries.len()
    );
    Ok(())
}

fn cmd_fit_tokenizer(raw: &[String]) -> Result<()> {
    let args = parse_flags(raw)?;
    args.reject_unknown_flags(&["config", "out", "datasets"])?;
    let mut cfg = resolve_config(args.config_path().as_deref(), &args.overrides)?;
    args.alias("datasets", "dataset.roots", &mut cfg)?;

    let roots = roots_from(&cfg, "dataset.roots")?;
    let pipeline = pipeline_from(&cfg)?;
    let datasets = trainer::load_datasets(&roots)?;
    let stats = trainer::compute_dataset_stats(&datasets, &pipeline)?;
    let horizon: usize = cfg.get_parse("backbone.action_queries")?;
    let tok = trainer::fit_tokenizer_on(
        &datasets,
        &pipeline,
        &stats,
        horizon,
        cfg.get_parse("train.tokenizer_chunks")?,
        cfg.get_parse("train.seed")?,
    )?;
    let out = PathBuf::from(
        args.flags
            .get("out")
            .map(String::as_str)
            .unwrap_or("tokenizer.txt"),
    );
    std::fs::write(&out, tok.serialize()).map_err(|e| Error::io(out.display().to_string(), e))?;
    println!(
        "fit tokenizer on {} dataset(s): vocab {}, sequence length {}, wrote {}",
        datasets.len(),
        tok.vocab_size(),
        tok.sequence_len(),
        out.display()
    );
    Ok(())
}

fn run_dir_for(cfg: &ConfigMap, fallback: &str) -> Result<PathBuf> {
    let name = cfg.get("train.run_name")?;
    let name = if name.is_empty() { fallback } else { name };
    Ok(runs_dir().join(name))
}

fn cmd_train(raw: &[String]) -> Result<()> {
    let args = parse_flags(raw)?;
    args.reject_unknown_flags(&["config", "run-name"])?;
    let mut cfg = resolve_config(args.config_path().as_deref(), &args.overrides)?;
    args.alias("run-name", "train.run_name", &mut cfg)?;

    let fallback = args
        .config_path()
        .as_deref()
        .and_then(Path::file_stem)
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| "run".to_string());
    let run_dir = run_dir_for(&cfg, &fallback)?;
    echo_resolved(&cfg, &run_dir)?;

    let plan = plan_from(&cfg, "dataset.roots")?;
    let tc = train_config_from(&cfg)?;
    let bundle = match plan.protocol {
        Protocol::MidpretrainFinetune => {
            let mut donor_plan = plan.clone();
            donor_plan.protocol = Protocol::Specialist;
            donor_plan.datasets = roots_from(&cfg, "dataset.donor_roots")?;
            let mut target_plan = plan.clone();
            target_plan.protocol = Protocol::Specialist;
            trainer::midpretrain_then_finetune(&donor_plan, &target_plan, &tc, &run_dir)?
        }
        _ => trainer::train(&plan, &tc, &run_dir)?,
    };
    println!(
        "trained {} steps; final checkpoint at {}",
        bundle.meta.steps,
        run_dir.join("ckpt_final").display()
    );
    Ok(())
}

fn cmd_eval(raw: &[String]) -> Result<()> {
    let args = parse_flags(raw)?;
    args.reject_unknown_flags(&["config", "bundle", "tasks", "episodes", "seed", "out"])?;
    let mut cfg = resolve_config(args.config_path().as_deref(), &args.overrides)?;
    args.alias("tasks", "eval.tasks", &mut cfg)?;
    args.alias("episodes", "eval.episodes", &mut cfg)?;
    args.alias("seed", "eval.seed", &mut cfg)?;

    let bundle_dir = args
        .flags
        .get("bundle")
        .ok_or_else(|| Error::config("bundle", "required flag --bundle <checkpoint dir>"))?;
    let bundle_dir = PathBuf::from(bundle_dir);
    if !bundle_dir.is_dir() {
        return Err(Error::MissingArtifact(format!(
            "bundle directory {}",
            bundle_dir.display()
        )));
    }
    let bundle = PolicyBundle::load(&bundle_dir, None)?;
    let eval = eval_from(&cfg)?;
    let reports = trainer::evaluate_bundle(&bundle, &eval)?;

    let mut csv = String::from("task,sr,progress,episodes,seed,perturb_hash\n");
    for r in &reports {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.task, r.sr, r.progress, r.episodes, r.seed, r.perturb_hash
        ));
    }
    let out_dir = args
        .flags
        .get("out")
        .map(PathBuf::from)
        .unwrap_or_else(|| bundle_dir.clone());
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let csv_path = out_dir.join("report.csv");
    std::fs::write(&csv_path, &csv).map_err(|e| Error::io(csv_path.display().to_string(), e))?;
    print!("{}", report::render_csv_file(&csv_path)?);
    println!("wrote {}", csv_path.display());
    Ok(())
}

/// Parse an ablation grid config: the base sections resolve like any other
/// config; the `[ablation]` section lists variant names; each `[variant:<name>]`
/// section holds overrides whose keys use `:` in place of `.`
/// (e.g. `head:kind = flow_pi` overrides `head.kind`).
pub fn parse_grid(text: &str, overrides: &[(String, String)]) -> Result<Vec<(String, ConfigMap)>> {
    let raw = ConfigMap::parse(text)?;
    let mut base = ConfigMap::new();
    let mut variant_sections: BTreeMap<String, Vec<(String, String)>> = BTreeMap::new();
    let mut names: Vec<String> = Vec::new();
    for key in raw.keys().map(str::to_string).collect::<Vec<_>>() {
        let value = raw.get(&key)?.to_string();
        if key == "ablation.variants" {
            names = value
                .split([',', ';'])
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(str::to_string)
                .collect();
        } else if let Some(rest) = key.strip_prefix("variant:") {
            let (name, subkey) = rest
                .split_once('.')
                .ok_or_else(|| Error::config(key.clone(), "malformed variant override"))?;
            variant_sections
                .entry(name.to_string())
                .or_default()
                .push((subkey.replace(':', "."), value));
        } else if key.starts_with("ablation.") {
            return Err(Error::config(key, "unknown ablation key"));
        } else {
            base.set(&key, value);
        }
    }
    if names.len() < 2 {
        return Err(Error::config(
            "ablation.variants",
            format!("an ablation grid needs at least 2 variants, got {}", names.len()),
        ));
    }
    for name in variant_sections.keys() {
        if !names.contains(name) {
            return Err(Error::config(
                format!("variant:{name}"),
                "section does not match any listed variant",
            ));
        }
    }
    let base_text = base.serialize();
    let mut out = Vec::new();
    for name in names {
        let mut var_overrides: Vec<(String, String)> = overrides.to_vec();
        if let Some(extra) = variant_sections.get(&name) {
            var_overrides.extend(extra.iter().cloned());
        }
        // route through resolve_config for schema validation + defaults
        let tmp = ConfigMap::parse(&base_text)?;
        let mut resolved = default_config();
        let allowed: Vec<String> = resolved.keys().map(str::to_string).collect();
        let allowed_refs: Vec<&str> = allowed.iter().map(String::as_str).collect();
        tmp.reject_unknown(&allowed_refs)?;
        for key in tmp.keys().map(str::to_string).collect::<Vec<_>>() {
            resolved.set(&key, tmp.get(&key)?);
        }
        for (key, value) in &var_overrides {
            if !resolved.contains(key) {
                return Err(Error::config(key.clone(), "unknown config key"));
            }
            resolved.set(key, value);
        }
        out.push((name, resolved));
    }
    Ok(out)
}

fn cmd_ablate(raw: &[String]) -> Result<()> {
    let args = parse_flags(raw)?;
    args.reject_unknown_flags(&["grid", "run-name"])?;
    let grid_path = args
        .flags
        .get("grid")
        .ok_or_else(|| Error::config("grid", "required flag --grid <grid config>"))?;
    let grid_path = PathBuf::from(grid_path);
    let text = std::fs::read_to_string(&grid_path)
        .map_err(|e| Error::io(grid_path.display().to_string(), e))?;
    let grid = parse_grid(&text, &args.overrides)?;

    let fallback = grid_path
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| "ablation".to_string());
    let run_dir = runs_dir().join(
        args.flags
            .get("run-name")
            .map(String::as_str)
            .unwrap_or(&fallback),
    );

    let tc = train_config_from(&grid[0].1)?;
    let mut variants = Vec::with_capacity(grid.len());
    for (name, cfg) in &grid {
        echo_resolved(cfg, &run_dir.join(name))?;
        variants.push((name.clone(), plan_from(cfg, "dataset.roots")?));
    }
    trainer::run_ablation(&variants, &tc, &run_dir)?;
    let csv_path = run_dir.join("ablation.csv");
    print!("{}", report::render_csv_file(&csv_path)?);
    println!("wrote {}", csv_path.display());
    Ok(())
}

fn cmd_report(raw: &[String]) -> Result<()> {
    let args = parse_flags(raw)?;
    args.reject_unknown_flags(&[])?;
    if args.positionals.is_empty() {
        return Err(Error::config(
            "report",
            "give one or more CSV files to render",
        ));
    }
    for p in &args.positionals {
        let path = PathBuf::from(p);
        if !path.is_file() {
            return Err(Error::MissingArtifact(path.display().to_string()));
        }
        let (table, images) = report::render_artifact(&path)?;
        println!("{}", path.display());
        print!("{table}");
        for img in images {
            println!("wrote {}", img.display());
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips() {
        let d = default_config();
        let text = d.serialize();
        let re = ConfigMap::parse(&text).unwrap();
        assert_eq!(re.serialize(), text);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("bad.cfg");
        std::fs::write(&path, "[train]\nsteps = 10\nmomentum = 0.9\n").unwrap();
        let err = resolve_config(Some(&path), &[]).unwrap_err();
        assert!(err.to_string().contains("momentum"), "{err}");
    }

    #[test]
    fn overrides_apply_and_must_exist() {
        let cfg = resolve_config(None, &[("train.steps".into(), "7".into())]).unwrap();
        assert_eq!(cfg.get("train.steps").unwrap(), "7");
        assert!(resolve_config(None, &[("train.bogus".into(), "1".into())]).is_err());
    }

    #[test]
    fn task_wildcards_expand() {
        let tasks = expand_tasks("reacher2/*;pusher3/push_block").unwrap();
        assert_eq!(tasks.len(), 2);
        assert!(tasks[0].starts_with("reacher2/"));
        assert!(expand_tasks("walker9/*").is_err());
    }

    #[test]
    fn grid_parses_variants_with_overrides() {
        let text = "\
[ablation]
variants = mlp, flow

[train]
steps = 5

[variant:flow]
head:kind = flow_pi
";
        let grid = parse_grid(text, &[]).unwrap();
        assert_eq!(grid.len(), 2);
        assert_eq!(grid[0].1.get("head.kind").unwrap(), "mlp");
        assert_eq!(grid[1].1.get("head.kind").unwrap(), "flow_pi");
        assert_eq!(grid[1].1.get("train.steps").unwrap(), "5");
        assert!(parse_grid("[ablation]\nvariants = solo\n", &[]).is_err());
    }

    #[test]
    fn exit_codes_map_error_classes() {
        assert_eq!(exit_code(&Error::config("k", "r")), EXIT_CONFIG);
        assert_eq!(exit_code(&Error::MissingArtifact("x".into())), EXIT_MISSING);
        assert_eq!(exit_code(&Error::NonFiniteLoss(3)), EXIT_RUNTIME);
    }
}
