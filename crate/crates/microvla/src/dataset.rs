//! On-disk dataset format.
//!
//! Layout under a dataset root:
//!
//! ```text
//! root/
//!   manifest.txt            # header line, then id<TAB>embodiment<TAB>split<TAB>steps<TAB>instruction
//!   ep000000/
//!     meta.txt              # key=value lines
//!     frames/00000.png ...  # one 8-bit RGB PNG per step
//!     proprio.csv           # one row per step
//!     actions.csv           # one row per step
//! ```
//!
//! Numbers are written with Rust's shortest-round-trip float formatting, so
//! read(write(t)) reproduces action and proprio values bit-exactly.
//!
//! Writers must serialize manifest updates; a `.lock` file at the root acts
//! as the advisory single-writer lock. Readers need no lock.

use std::collections::HashMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::types::{EmbodimentSpec, Frame, Observation, Trajectory};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "eval" => Ok(Split::Eval),
            other => Err(Error::config("split", format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub embodiment: String,
    pub split: Split,
    pub steps: usize,
    pub instruction: String,
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
    pub format_version: u32,
}

impl DatasetManifest {
    pub fn manifest_path(root: &Path) -> PathBuf {
        root.join("manifest.txt")
    }

    /// Loads the manifest, or returns an empty one if the file is absent.
    pub fn load_or_empty(root: &Path) -> Result<Self> {
        let path = Self::manifest_path(root);
        if !path.exists() {
            return Ok(Self {
                root: root.to_path_buf(),
                entries: Vec::new(),
                format_version: FORMAT_VERSION,
            });
        }
        Self::load(root)
    }

    pub fn load(root: &Path) -> Result<Self> {
        let path = Self::manifest_path(root);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut entries = Vec::new();
        let mut format_version = FORMAT_VERSION;
        for (ln, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("# format_version=") {
                format_version = rest.parse().map_err(|_| Error::CorruptEpisode {
                    episode: "manifest".into(),
                    reason: format!("bad format_version line {ln}"),
                })?;
                continue;
            }
            let cols: Vec<&str> = line.splitn(5, '\t').collect();
            if cols.len() != 5 {
                return Err(Error::CorruptEpisode {
                    episode: "manifest".into(),
                    reason: format!("line {ln} has {} columns, expected 5", cols.len()),
                });
            }
            entries.push(ManifestEntry {
                id: cols[0].to_string(),
                embodiment: cols[1].to_string(),
                split: Split::parse(cols[2])?,
                steps: cols[3].parse().map_err(|_| Error::CorruptEpisode {
                    episode: cols[0].to_string(),
                    reason: "bad step count in manifest".into(),
                })?,
                instruction: cols[4].to_string(),
            });
        }
        let mut seen = std::collections::HashSet::new();
        for e in &entries {
            if !seen.insert(&e.id) {
                return Err(Error::CorruptEpisode {
                    episode: e.id.clone(),
                    reason: "duplicate episode id in manifest".into(),
                });
            }
        }
        Ok(Self {
            root: root.to_path_buf(),
            entries,
            format_version,
        })
    }

    fn store(&self) -> Result<()> {
        let path = Self::manifest_path(&self.root);
        let tmp = self.root.join("manifest.txt.tmp");
        let mut buf = format!("# format_version={}\n", self.format_version);
        for e in &self.entries {
            buf.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                e.id,
                e.embodiment,
                e.split.as_str(),
                e.steps,
                e.instruction
            ));
        }
        fs::write(&tmp, buf).map_err(|e| Error::io(tmp.display().to_string(), e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(())
    }

    /// Checks that every entry's embodiment resolves in `registry`.
    pub fn validate_embodiments(&self, registry: &HashMap<String, EmbodimentSpec>) -> Result<()> {
        for e in &self.entries {
            if !registry.contains_key(&e.embodiment) {
                return Err(Error::UnknownEmbodiment(e.embodiment.clone()));
            }
        }
        Ok(())
    }

    pub fn ids_for_split(&self, split: Split) -> Vec<String> {
        self.entries
            .iter()
            .filter(|e| e.split == split)
            .map(|e| e.id.clone())
            .collect()
    }
}

/// Advisory single-writer lock; removed on drop.
pub struct DatasetLock {
    path: PathBuf,
}

impl DatasetLock {
    pub fn acquire(root: &Path) -> Result<Self> {
        let path = root.join(".lock");
        let mut attempts = 0usize;
        loop {
            match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(mut f) => {
                    let _ = writeln!(f, "{}", std::process::id());
                    return Ok(Self { path });
                }
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    attempts += 1;
                    if attempts > 600 {
                        return Err(Error::io(
                            path.display().to_string(),
                            std::io::Error::new(
                                std::io::ErrorKind::TimedOut,
                                "dataset lock held too long",
                            ),
                        ));
                    }
                    std::thread::sleep(std::time::Duration::from_millis(50));
                }
                Err(e) => return Err(Error::io(path.display().to_string(), e)),
            }
        }
    }
}

impl Drop for DatasetLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn fmt_row(row: &[f64]) -> String {
    row.iter()
        .map(|v| format!("{v}"))
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_row(line: &str, episode: &str) -> Result<Vec<f64>> {
    if line.is_empty() {
        return Ok(Vec::new());
    }
    line.split(',')
        .map(|s| {
            s.parse::<f64>().map_err(|_| Error::CorruptEpisode {
                episode: episode.to_string(),
                reason: format!("malformed numeric field `{s}`"),
            })
        })
        .collect()
}

/// Writes one episode directory and appends it to the manifest atomically.
/// Returns the assigned episode id. Only the last frame of each observation
/// (the current frame) is stored; history stacking happens at load time.
pub fn write_episode(traj: &Trajectory, root: &Path, split: Split) -> Result<String> {
    if traj.steps.is_empty() {
        return Err(Error::EmptyTrajectory);
    }
    fs::create_dir_all(root).map_err(|e| Error::io(root.display().to_string(), e))?;
    let _lock = DatasetLock::acquire(root)?;
    let mut manifest = DatasetManifest::load_or_empty(root)?;
    let id = format!("ep{:06}", manifest.entries.len());
    let dir = root.join(&id);
    let frames_dir = dir.join("frames");
    fs::create_dir_all(&frames_dir).map_err(|e| Error::io(frames_dir.display().to_string(), e))?;

    // meta.txt
    let step_indices: Vec<String> = traj
        .steps
        .iter()
        .map(|(o, _)| o.step_index.to_string())
        .collect();
    let meta = format!(
        "format_version={}\nembodiment={}\ninstruction={}\nsuccess={}\nsteps={}\nstep_indices={}\n",
        FORMAT_VERSION,
        traj.embodiment,
        traj.instruction,
        traj.success,
        traj.steps.len(),
        step_indices.join(",")
    );
    let meta_path = dir.join("meta.txt");
    fs::write(&meta_path, meta).map_err(|e| Error::io(meta_path.display().to_string(), e))?;

    // frames, proprio, actions
    let mut proprio_rows = String::new();
    let mut action_rows = String::new();
    for (t, (obs, action)) in traj.steps.iter().enumerate() {
        let frame = obs.frames.last().expect("observation has no frame");
        let path = frames_dir.join(format!("{t:05}.png"));
        save_png(frame, &path)?;
        proprio_rows.push_str(&fmt_row(&obs.proprio));
        proprio_rows.push('\n');
        action_rows.push_str(&fmt_row(action));
        action_rows.push('\n');
    }
    let p = dir.join("proprio.csv");
    fs::write(&p, proprio_rows).map_err(|e| Error::io(p.display().to_string(), e))?;
    let p = dir.join("actions.csv");
    fs::write(&p, action_rows).map_err(|e| Error::io(p.display().to_string(), e))?;

    manifest.entries.push(ManifestEntry {
        id: id.clone(),
        embodiment: traj.embodiment.clone(),
        split,
        steps: traj.steps.len(),
        instruction: traj.instruction.clone(),
    });
    manifest.store()?;
    Ok(id)
}

/// Reads one episode back into a trajectory.
pub fn read_episode(root: &Path, episode_id: &str) -> Result<Trajectory> {
    let dir = root.join(episode_id);
    let corrupt = |reason: String| Error::CorruptEpisode {
        episode: episode_id.to_string(),
        reason,
    };
    let meta_path = dir.join("meta.txt");
    let meta_text =
        fs::read_to_string(&meta_path).map_err(|_| corrupt("missing meta.txt".into()))?;
    let mut meta: HashMap<String, String> = HashMap::new();
    for line in meta_text.lines() {
        if let Some((k, v)) = line.split_once('=') {
            meta.insert(k.to_string(), v.to_string());
        }
    }
    let get = |k: &str| {
        meta.get(k)
            .cloned()
            .ok_or_else(|| corrupt(format!("meta.txt missing key `{k}`")))
    };
    let version: u32 = get("format_version")?
        .parse()
        .map_err(|_| corrupt("malformed format_version".into()))?;
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            expected: FORMAT_VERSION,
            found: version,
        });
    }
    let embodiment = get("embodiment")?;
    let instruction = get("instruction")?;
    let success: bool = get("success")?
        .parse()
        .map_err(|_| corrupt("malformed success flag".into()))?;
    let steps: usize = get("steps")?
        .parse()
        .map_err(|_| corrupt("malformed steps".into()))?;
    let step_indices: Vec<usize> = get("step_indices")?
        .split(',')
        .map(|s| s.parse::<usize>().map_err(|_| corrupt("malformed step_indices".into())))
        .collect::<Result<_>>()?;
    if step_indices.len() != steps {
        return Err(corrupt("step_indices length mismatch".into()));
    }

    let read_csv = |name: &str| -> Result<Vec<Vec<f64>>> {
        let path = dir.join(name);
        let text = fs::read_to_string(&path).map_err(|_| corrupt(format!("missing {name}")))?;
        text.lines().map(|l| parse_row(l, episode_id)).collect()
    };
    let proprio = read_csv("proprio.csv")?;
    let actions = read_csv("actions.csv")?;
    if proprio.len() != steps || actions.len() != steps {
        return Err(corrupt(format!(
            "row count mismatch: steps={steps}, proprio={}, actions={}",
            proprio.len(),
            actions.len()
        )));
    }

    let mut traj_steps = Vec::with_capacity(steps);
    for t in 0..steps {
        let frame_path = dir.join("frames").join(format!("{t:05}.png"));
        let frame = load_png(&frame_path).map_err(|_| corrupt(format!("missing or bad frame {t}")))?;
        let obs = Observation {
            frames: vec![frame],
            instruction: instruction.clone(),
            proprio: proprio[t].clone(),
            step_index: step_indices[t],
        };
        traj_steps.push((obs, actions[t].clone()));
    }
    Ok(Trajectory {
        embodiment,
        steps: traj_steps,
        instruction,
        success,
    })
}

/// Re-scans episode directories and checks they match the manifest.
pub fn rescan_matches_manifest(root: &Path) -> Result<bool> {
    let manifest = DatasetManifest::load(root)?;
    for e in &manifest.entries {
        let traj = read_episode(root, &e.id)?;
        if traj.embodiment != e.embodiment
            || traj.steps.len() != e.steps
            || traj.instruction != e.instruction
        {
            return Ok(false);
        }
    }
    Ok(true)
}

pub fn save_png(frame: &Frame, path: &Path) -> Result<()> {
    let img = image::RgbImage::from_raw(
        frame.resolution as u32,
        frame.resolution as u32,
        frame.pixels.clone(),
    )
    .expect("pixel buffer size");
    img.save(path)?;
    Ok(())
}

pub fn load_png(path: &Path) -> Result<Frame> {
    let img = image::open(path)?.into_rgb8();
    let res = img.width() as usize;
    Ok(Frame::new(res, img.into_raw()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    fn toy_traj(n: usize) -> Trajectory {
        let mut steps = Vec::new();
        for t in 0..n {
            let mut frame = Frame::filled(16, [10, 20, 30]);
            frame.put(t % 16, t % 16, [255, 0, 0]);
            steps.push((
                Observation {
                    frames: vec![frame],
                    instruction: "reach the red target".into(),
                    proprio: vec![0.1 * t as f64, -0.3],
                    step_index: t,
                },
                vec![0.5f64.sin() * t as f64, 1.0 / (t as f64 + 3.0)],
            ));
        }
        Trajectory {
            embodiment: "reacher2".into(),
            steps,
            instruction: "reach the red target".into(),
            success: true,
        }
    }

    #[test]
    fn round_trip_is_identity() {
        let dir = TempDir::new().unwrap();
        let traj = toy_traj(25);
        let id = write_episode(&traj, dir.path(), Split::Train).unwrap();
        let back = read_episode(dir.path(), &id).unwrap();
        assert_eq!(traj, back);
    }

    #[test]
    fn missing_actions_file_is_corrupt() {
        let dir = TempDir::new().unwrap();
        let id = write_episode(&toy_traj(5), dir.path(), Split::Train).unwrap();
        fs::remove_file(dir.path().join(&id).join("actions.csv")).unwrap();
        match read_episode(dir.path(), &id) {
            Err(Error::CorruptEpisode { .. }) => {}
            other => panic!("expected CorruptEpisode, got {other:?}"),
        }
    }

    #[test]
    fn manifest_matches_disk_after_writes() {
        let dir = TempDir::new().unwrap();
        for _ in 0..3 {
            write_episode(&toy_traj(4), dir.path(), Split::Train).unwrap();
        }
        write_episode(&toy_traj(6), dir.path(), Split::Eval).unwrap();
        assert!(rescan_matches_manifest(dir.path()).unwrap());
        let m = DatasetManifest::load(dir.path()).unwrap();
        assert_eq!(m.entries.len(), 4);
        assert_eq!(m.ids_for_split(Split::Eval), vec!["ep000003".to_string()]);
    }

    #[test]
    fn empty_trajectory_rejected() {
        let dir = TempDir::new().unwrap();
        let t = Trajectory {
            embodiment: "reacher2".into(),
            steps: vec![],
            instruction: String::new(),
            success: false,
        };
        assert!(matches!(
            write_episode(&t, dir.path(), Split::Train),
            Err(Error::EmptyTrajectory)
        ));
    }
}
