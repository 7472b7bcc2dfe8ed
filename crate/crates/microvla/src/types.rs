//! Shared domain types: embodiments, observations, action chunks, trajectories
//! and normalization statistics.

use ndarray::Array2;

use crate::error::{Error, Result};

/// Lower clamp applied to per-dimension standard deviations.
pub const EPS_STD: f64 = 1e-6;

/// How a raw control vector is to be interpreted by the simulator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControlMode {
    AbsolutePosition,
}

/// Static description of a robot body.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbodimentSpec {
    pub name: String,
    pub action_dim: usize,
    pub proprio_dim: usize,
    pub control_mode: ControlMode,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
}

impl EmbodimentSpec {
    pub fn new(
        name: impl Into<String>,
        action_dim: usize,
        proprio_dim: usize,
        action_low: Vec<f64>,
        action_high: Vec<f64>,
    ) -> Self {
        assert!(action_dim >= 1, "action_dim must be >= 1");
        assert_eq!(action_low.len(), action_dim);
        assert_eq!(action_high.len(), action_dim);
        for i in 0..action_dim {
            assert!(
                action_low[i] < action_high[i],
                "action_low[{i}] must be < action_high[{i}]"
            );
        }
        Self {
            name: name.into(),
            action_dim,
            proprio_dim,
            control_mode: ControlMode::AbsolutePosition,
            action_low,
            action_high,
        }
    }
}

/// A single rendered image, row-major RGB bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub resolution: usize,
    pub pixels: Vec<u8>, // resolution * resolution * 3
}

impl Frame {
    pub fn new(resolution: usize, pixels: Vec<u8>) -> Self {
        assert_eq!(pixels.len(), resolution * resolution * 3);
        Self { resolution, pixels }
    }

    pub fn filled(resolution: usize, rgb: [u8; 3]) -> Self {
        let mut pixels = Vec::with_capacity(resolution * resolution * 3);
        for _ in 0..resolution * resolution {
            pixels.extend_from_slice(&rgb);
        }
        Self { resolution, pixels }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.resolution + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.resolution + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }
}

/// What the policy sees at one control step. `frames` holds the history
/// stack, oldest first; with no history it has exactly one entry.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub frames: Vec<Frame>,
    pub instruction: String,
    pub proprio: Vec<f64>,
    pub step_index: usize,
}

impl Observation {
    pub fn resolution(&self) -> usize {
        self.frames[0].resolution
    }
}

/// Coordinate space an action chunk currently lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpaceTag {
    Absolute,
    Delta,
    Relative,
    Normalized,
    Padded32,
}

impl std::fmt::Display for SpaceTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            SpaceTag::Absolute => "absolute",
            SpaceTag::Delta => "delta",
            SpaceTag::Relative => "relative",
            SpaceTag::Normalized => "normalized",
            SpaceTag::Padded32 => "padded32",
        };
        f.write_str(s)
    }
}

/// H x D matrix of controls, the universal action currency.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionChunk {
    pub values: Array2<f64>,
    pub space_tag: SpaceTag,
}

impl ActionChunk {
    pub fn new(values: Array2<f64>, space_tag: SpaceTag) -> Self {
        assert!(values.nrows() >= 1, "chunk horizon must be >= 1");
        debug_assert!(values.iter().all(|v| v.is_finite()), "chunk entries must be finite");
        Self { values, space_tag }
    }

    pub fn horizon(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }
}

/// One expert demonstration: per-step observations paired with the action
/// taken at that step.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub embodiment: String,
    pub steps: Vec<(Observation, Vec<f64>)>,
    pub instruction: String,
    pub success: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Action rows as an N x D matrix.
    pub fn action_matrix(&self) -> Array2<f64> {
        let n = self.steps.len();
        let d = self.steps.first().map_or(0, |(_, a)| a.len());
        let mut m = Array2::zeros((n, d));
        for (t, (_, a)) in self.steps.iter().enumerate() {
            for (i, v) in a.iter().enumerate() {
                m[[t, i]] = *v;
            }
        }
        m
    }
}

/// Per-dimension mean/std over the training split.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub count: usize,
    pub embodiment: String,
}

impl NormalizationStats {
    /// Identity stats (mean 0, std 1) for a given dimension.
    pub fn identity(dim: usize, embodiment: impl Into<String>) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
            count: 1,
            embodiment: embodiment.into(),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Checks every trajectory invariant against an embodiment spec.
pub fn validate_trajectory(traj: &Trajectory, spec: &EmbodimentSpec) -> Result<()> {
    if traj.steps.is_empty() {
        return Err(Error::EmptyTrajectory);
    }
    let mut last_step_index: Option<usize> = None;
    for (t, (obs, action)) in traj.steps.iter().enumerate() {
        if action.len() != spec.action_dim {
            return Err(Error::DimMismatch {
                expected: spec.action_dim,
                got: action.len(),
                context: format!("step {t}"),
            });
        }
        if obs.proprio.len() != spec.proprio_dim {
            return Err(Error::DimMismatch {
                expected: spec.proprio_dim,
                got: obs.proprio.len(),
                context: format!("proprio at step {t}"),
            });
        }
        for (i, v) in action.iter().enumerate() {
            if *v < spec.action_low[i] || *v > spec.action_high[i] {
                return Err(Error::OutOfBounds {
                    step: t,
                    dim: i,
                    value: *v,
                    low: spec.action_low[i],
                    high: spec.action_high[i],
                });
            }
        }
        if let Some(prev) = last_step_index {
            if obs.step_index <= prev {
                return Err(Error::CorruptEpisode {
                    episode: String::new(),
                    reason: format!(
                        "step_index not strictly increasing at step {t} ({} after {prev})",
                        obs.step_index
                    ),
                });
            }
        }
        last_step_index = Some(obs.step_index);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    pub(crate) fn reacher_spec() -> EmbodimentSpec {
        EmbodimentSpec::new(
            "reacher2",
            2,
            2,
            vec![-std::f64::consts::PI; 2],
            vec![std::f64::consts::PI; 2],
        )
    }

    fn obs(step: usize) -> Observation {
        Observation {
            frames: vec![Frame::filled(8, [0, 0, 0])],
            instruction: "reach".into(),
            proprio: vec![0.0, 0.0],
            step_index: step,
        }
    }

    fn traj(n: usize) -> Trajectory {
        Trajectory {
            embodiment: "reacher2".into(),
            steps: (0..n).map(|t| (obs(t), vec![0.1, -0.2])).collect(),
            instruction: "reach".into(),
            success: true,
        }
    }

    #[test]
    fn valid_trajectory_passes() {
        validate_trajectory(&traj(10), &reacher_spec()).unwrap();
    }

    #[test]
    fn dim_mismatch_detected() {
        let mut t = traj(10);
        t.steps[3].1 = vec![0.1, 0.2, 0.3];
        match validate_trajectory(&t, &reacher_spec()) {
            Err(Error::DimMismatch { expected: 2, got: 3, .. }) => {}
            other => panic!("expected DimMismatch, got {other:?}"),
        }
    }

    #[test]
    fn empty_trajectory_rejected() {
        match validate_trajectory(&traj(0), &reacher_spec()) {
            Err(Error::EmptyTrajectory) => {}
            other => panic!("expected EmptyTrajectory, got {other:?}"),
        }
    }

    #[test]
    fn out_of_bounds_reports_first_offender() {
        let mut t = traj(5);
        t.steps[2].1[1] = 4.0;
        match validate_trajectory(&t, &reacher_spec()) {
            Err(Error::OutOfBounds { step: 2, dim: 1, .. }) => {}
            other => panic!("expected OutOfBounds, got {other:?}"),
        }
    }

    #[test]
    fn action_matrix_layout() {
        let t = traj(3);
        let m = t.action_matrix();
        assert_eq!(m, array![[0.1, -0.2], [0.1, -0.2], [0.1, -0.2]]);
    }
}
