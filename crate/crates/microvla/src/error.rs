//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    // Trajectory / dataset validation
    #[error("action dimension mismatch: expected {expected}, got {got}{}", ctx_suffix(.context))]
    DimMismatch {
        expected: usize,
        got: usize,
        context: String,
    },
    #[error("trajectory has no steps")]
    EmptyTrajectory,
    #[error("action out of bounds at step {step}, dim {dim}: {value} not in [{low}, {high}]")]
    OutOfBounds {
        step: usize,
        dim: usize,
        value: f64,
        low: f64,
        high: f64,
    },
    #[error("corrupt episode {episode}: {reason}")]
    CorruptEpisode { episode: String, reason: String },
    #[error("unknown embodiment `{0}`")]
    UnknownEmbodiment(String),

    // Data pipeline
    #[error("trajectories mix embodiments: `{0}` and `{1}`")]
    MixedEmbodiments(String, String),
    #[error("insufficient data: need at least {need} action rows, got {got}")]
    InsufficientData { need: usize, got: usize },
    #[error("wrong action space tag: expected {expected}, got {got}")]
    WrongSpaceTag { expected: String, got: String },
    #[error("padding target dim {target} smaller than native dim {native}")]
    TargetTooSmall { target: usize, native: usize },
    #[error("embodiment `{embodiment}` dim {dim} has no slot in the layout")]
    UnmappedDim { embodiment: String, dim: usize },
    #[error("slot collision for embodiment `{embodiment}`: slot {slot} mapped twice")]
    SlotCollision { embodiment: String, slot: usize },
    #[error("delta/relative parameterization requires proprioception")]
    ProprioUnavailable,
    #[error("batch assembly received an empty sample set")]
    EmptySampleSet,
    #[error("samples carry inconsistent pipeline tags: {0}")]
    InconsistentPipelineTags(String),

    // Tokenizer
    #[error("tokenizer fit on an empty corpus")]
    EmptyCorpus,
    #[error("tokenizer corpus has inconsistent chunk shapes: {0}")]
    InconsistentShapes(String),
    #[error("chunk shape {got} does not match tokenizer shape {expected}")]
    ShapeMismatch { expected: String, got: String },

    // Backbone / heads
    #[error("bad image resolution: expected {expected}x{expected}, got {got_h}x{got_w}")]
    BadResolution {
        expected: usize,
        got_h: usize,
        got_w: usize,
    },
    #[error("non-finite activations in {0}")]
    NonFiniteActivations(String),
    #[error("batch row {0} has an all-false validity mask")]
    MaskAllFalse(usize),
    #[error("non-finite velocity during flow sampling")]
    NonFiniteVelocity,
    #[error("no head registered for embodiment `{0}`")]
    UnregisteredEmbodiment(String),

    // Benchmark
    #[error("inverse kinematics failed: target {0:?} unreachable")]
    IkFailure(Vec<f64>),
    #[error("demo generator stalled: {attempts} attempts produced only {successes}/{wanted} successes")]
    GeneratorStalled {
        attempts: usize,
        successes: usize,
        wanted: usize,
    },
    #[error("policy embodiment `{policy}` does not match task embodiment `{task}`")]
    EmbodimentMismatch { policy: String, task: String },
    #[error("unknown task family `{0}`")]
    UnknownTaskFamily(String),

    // Trainer
    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(usize),
    #[error("dataset leak: train data fingerprint intersects eval seeds ({0})")]
    DatasetLeak(String),
    #[error("bundle format version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: u32, found: u32 },
    #[error("head kind mismatch: bundle holds `{stored}`, requested `{requested}`")]
    HeadKindMismatch { stored: String, requested: String },

    // Config / CLI
    #[error("config error at `{key}`: {reason}")]
    Config { key: String, reason: String },
    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

fn ctx_suffix(ctx: &str) -> String {
    if ctx.is_empty() {
        String::new()
    } else {
        format!(" ({ctx})")
    }
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }
}
