//! Evaluation protocol (success rate + progress score), baseline policies,
//! and demonstration dataset generation.

use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dataset::{write_episode, Split};
use crate::error::{Error, Result};
use crate::types::{Observation, Trajectory};

use super::render::PerturbationConfig;
use super::sim::{expert_action, reset, step, SimState};
use super::{sample_task, ToyEmbodiment};

/// Training generation must draw task seeds below this; evaluation seeds sit
/// at or above it, so the clean eval set never leaks into training data.
pub const TRAIN_SEED_LIMIT: u64 = 1 << 20;

/// A closed-loop controller under evaluation. Scripted baselines may read the
/// privileged state; learned policies must only use the observation.
pub trait Policy {
    fn embodiment(&self) -> &str;
    /// Called at the start of each episode.
    fn begin_episode(&mut self, _seed: u64) {}
    fn act(&mut self, obs: &Observation, state: &SimState) -> Result<Vec<f64>>;
}

/// The scripted expert wrapped as a policy.
pub struct ExpertPolicy {
    pub embodiment: ToyEmbodiment,
}

impl Policy for ExpertPolicy {
    fn embodiment(&self) -> &str {
        self.embodiment.name()
    }

    fn act(&mut self, _obs: &Observation, state: &SimState) -> Result<Vec<f64>> {
        expert_action(state)
    }
}

/// Uniform random actions within the embodiment's bounds.
pub struct RandomPolicy {
    pub embodiment: ToyEmbodiment,
    rng: ChaCha8Rng,
}

impl RandomPolicy {
    pub fn new(embodiment: ToyEmbodiment, seed: u64) -> Self {
        Self {
            embodiment,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl Policy for RandomPolicy {
    fn embodiment(&self) -> &str {
        self.embodiment.name()
    }

    fn act(&mut self, _obs: &Observation, _state: &SimState) -> Result<Vec<f64>> {
        let spec = self.embodiment.spec();
        Ok((0..spec.action_dim)
            .map(|i| self.rng.gen_range(spec.action_low[i]..spec.action_high[i]))
            .collect())
    }
}

#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub episodes: usize,
    pub seed: u64,
    pub perturb: PerturbationConfig,
    pub resolution: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 50,
            seed: TRAIN_SEED_LIMIT,
            perturb: PerturbationConfig::off(),
            resolution: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub task: String,
    /// Success rate in [0, 100].
    pub sr: f64,
    /// Progress score in [0, 100]: mean final (latched) progress.
    pub progress: f64,
    pub episodes: usize,
    pub seed: u64,
    pub perturb_hash: String,
    /// Final progress per episode, in seed order.
    pub per_episode_progress: Vec<f64>,
}

/// Runs the fixed-seed evaluation protocol. SR = 100 * successes / episodes;
/// progress score = 100 * mean final progress.
pub fn evaluate(
    policy: &mut dyn Policy,
    family: &str,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let probe = sample_task(family, 0)?;
    if policy.embodiment() != probe.embodiment.name() {
        return Err(Error::EmbodimentMismatch {
            policy: policy.embodiment().to_string(),
            task: probe.embodiment.name().to_string(),
        });
    }
    let mut successes = 0usize;
    let mut per_episode = Vec::with_capacity(cfg.episodes);
    for ep in 0..cfg.episodes {
        let seed = cfg.seed + ep as u64;
        let task = sample_task(family, seed)?;
        let (mut state, mut obs) = reset(&task, seed, &cfg.perturb, cfg.resolution);
        policy.begin_episode(seed);
        loop {
            let action = policy.act(&obs, &state)?;
            let out = step(&mut state, &action);
            obs = out.observation;
            if out.done {
                if out.success {
                    successes += 1;
                    debug_assert_eq!(out.progress, 1.0);
                }
                per_episode.push(out.progress);
                break;
            }
        }
    }
    let n = cfg.episodes.max(1) as f64;
    Ok(EvalReport {
        task: family.to_string(),
        sr: 100.0 * successes as f64 / n,
        progress: 100.0 * per_episode.iter().sum::<f64>() / n,
        episodes: cfg.episodes,
        seed: cfg.seed,
        perturb_hash: cfg.perturb.hash(),
        per_episode_progress: per_episode,
    })
}

/// Machine-readable report rows.
pub fn write_report_csv(reports: &[EvalReport], path: &Path) -> Result<()> {
    let mut buf = String::from("task,sr,progress,episodes,seed,perturb_hash\n");
    for r in reports {
        buf.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.task, r.sr, r.progress, r.episodes, r.seed, r.perturb_hash
        ));
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetRegime {
    /// Perturbations off.
    Clean,
    /// Per-episode perturbation magnitudes drawn up to the mild preset.
    Randomized,
}

impl DatasetRegime {
    pub fn as_str(&self) -> &'static str {
        match self {
            DatasetRegime::Clean => "clean",
            DatasetRegime::Randomized => "randomized",
        }
    }
}

fn randomized_perturb(rng: &mut ChaCha8Rng) -> PerturbationConfig {
    let mild = PerturbationConfig::mild();
    let u = |rng: &mut ChaCha8Rng| rng.gen_range(0.0..1.0f64);
    PerturbationConfig {
        layout_shift: mild.layout_shift * u(rng),
        robot_jitter: mild.robot_jitter * u(rng),
        language_paraphrase: rng.gen_bool(0.5),
        camera_shift_px: rng.gen_range(-mild.camera_shift_px..=mild.camera_shift_px),
        light_brightness: 1.0 + (mild.light_brightness - 1.0) * rng.gen_range(-1.0..1.0),
        light_contrast: 1.0 + (mild.light_contrast - 1.0) * rng.gen_range(-1.0..1.0),
        background_swap: rng.gen_bool(0.25),
        noise_sigma: mild.noise_sigma * u(rng),
    }
}

/// Rolls out the scripted expert and writes only successful episodes.
/// Task seeds are `seed`, `seed+1`, ... and stay below [`TRAIN_SEED_LIMIT`]
/// for the train split. Errors with [`Error::GeneratorStalled`] after
/// `10 * n_demos` attempts.
#[allow(clippy::too_many_arguments)]
pub fn generate_dataset(
    family: &str,
    n_demos: usize,
    sigma_demo: f64,
    seed: u64,
    regime: DatasetRegime,
    root: &Path,
    split: Split,
    resolution: usize,
) -> Result<Vec<String>> {
    assert!(n_demos >= 1, "n_demos must be >= 1");
    let probe = sample_task(family, 0)?;
    let spec = probe.embodiment.spec();
    let mut ids = Vec::with_capacity(n_demos);
    let mut attempts = 0usize;
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xde30_a001);
    let mut gen_log = String::new();

    while ids.len() < n_demos {
        if attempts >= 10 * n_demos {
            return Err(Error::GeneratorStalled {
                attempts,
                successes: ids.len(),
                wanted: n_demos,
            });
        }
        let task_seed = seed + attempts as u64;
        if split == Split::Train {
            assert!(
                task_seed < TRAIN_SEED_LIMIT,
                "train generation seed {task_seed} crosses the eval partition"
            );
        }
        attempts += 1;
        let task = sample_task(family, task_seed)?;
        let perturb = match regime {
            DatasetRegime::Clean => PerturbationConfig::off(),
            DatasetRegime::Randomized => randomized_perturb(&mut noise_rng),
        };
        let (mut state, mut obs) = reset(&task, task_seed, &perturb, resolution);
        let mut steps: Vec<(Observation, Vec<f64>)> = Vec::new();
        let success = loop {
            let mut action = expert_action(&state)?;
            if sigma_demo > 0.0 {
                for (i, a) in action.iter_mut().enumerate() {
                    *a += noise_rng.sample::<f64, _>(StandardNormal) * sigma_demo;
                    *a = a.clamp(spec.action_low[i], spec.action_high[i]);
                }
            }
            steps.push((obs, action.clone()));
            let out = step(&mut state, &action);
            obs = out.observation;
            if out.done {
                break out.success;
            }
        };
        if !success {
            continue;
        }
        let traj = Trajectory {
            embodiment: probe.embodiment.name().to_string(),
            steps,
            instruction: state.task.instruction.clone(),
            success: true,
        };
        let id = write_episode(&traj, root, split)?;
        gen_log.push_str(&format!(
            "{id}\tfamily={family}\tregime={}\tseed={task_seed}\tsigma_demo={sigma_demo}\tperturb={}\n",
            regime.as_str(),
            perturb.hash()
        ));
        ids.push(id);
    }

    // generation config sidecar, appended per call
    let log_path = root.join("generation.txt");
    let mut existing = std::fs::read_to_string(&log_path).unwrap_or_default();
    existing.push_str(&gen_log);
    std::fs::write(&log_path, existing)
        .map_err(|e| Error::io(log_path.display().to_string(), e))?;
    Ok(ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{read_episode, DatasetManifest};
    use crate::types::validate_trajectory;

    #[test]
    fn expert_policy_scores_100_on_clean_reacher() {
        let mut expert = ExpertPolicy {
            embodiment: ToyEmbodiment::Reacher2,
        };
        let cfg = EvalConfig {
            episodes: 25,
            ..Default::default()
        };
        let r = evaluate(&mut expert, "reacher2/reach_color", &cfg).unwrap();
        assert_eq!(r.sr, 100.0);
        assert_eq!(r.progress, 100.0);
    }

    #[test]
    fn random_policy_rarely_succeeds() {
        let mut random = RandomPolicy::new(ToyEmbodiment::Reacher2, 5);
        let cfg = EvalConfig {
            episodes: 100,
            ..Default::default()
        };
        let r = evaluate(&mut random, "reacher2/reach_color", &cfg).unwrap();
        assert!(r.sr <= 5.0, "random SR {}", r.sr);
    }

    #[test]
    fn embodiment_mismatch_is_rejected() {
        let mut expert = ExpertPolicy {
            embodiment: ToyEmbodiment::Pusher3,
        };
        let err = evaluate(
            &mut expert,
            "reacher2/reach_color",
            &EvalConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::EmbodimentMismatch { .. }));
    }

    #[test]
    fn evaluation_is_reproducible() {
        let run = || {
            let mut p = RandomPolicy::new(ToyEmbodiment::Reacher2, 1);
            evaluate(
                &mut p,
                "reacher2/reach_color",
                &EvalConfig {
                    episodes: 10,
                    ..Default::default()
                },
            )
            .unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn generated_demos_validate_and_register() {
        let dir = tempfile::tempdir().unwrap();
        let ids = generate_dataset(
            "reacher2/reach_color",
            5,
            0.0,
            0,
            DatasetRegime::Clean,
            dir.path(),
            Split::Train,
            16,
        )
        .unwrap();
        assert_eq!(ids.len(), 5);
        let manifest = DatasetManifest::load(dir.path()).unwrap();
        assert_eq!(manifest.entries.len(), 5);
        let spec = ToyEmbodiment::Reacher2.spec();
        for id in &ids {
            let traj = read_episode(dir.path(), id).unwrap();
            assert!(traj.success);
            validate_trajectory(&traj, &spec).unwrap();
        }
        assert!(dir.path().join("generation.txt").exists());
    }

    #[test]
    fn randomized_regime_varies_perturbations() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = randomized_perturb(&mut rng);
        let b = randomized_perturb(&mut rng);
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn report_csv_has_expected_shape() {
        let dir = tempfile::tempdir().unwrap();
        let mut expert = ExpertPolicy {
            embodiment: ToyEmbodiment::DualArm8,
        };
        let cfg = EvalConfig {
            episodes: 5,
            ..Default::default()
        };
        let r = evaluate(&mut expert, "dualarm8/reach_pair", &cfg).unwrap();
        let path = dir.path().join("report.csv");
        write_report_csv(&[r], &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[0].starts_with("task,sr,progress"));
        assert!(lines[1].starts_with("dualarm8/reach_pair,"));
    }
}
