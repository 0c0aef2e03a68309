//! Error type shared by every module in the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{context}: shape mismatch, expected {expected:?} but got {got:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("tensor data length {len} does not match shape {shape:?}")]
    BadTensorLength { shape: Vec<usize>, len: usize },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("backward called on {layer} before forward")]
    BackwardBeforeForward { layer: String },

    #[error("invalid architecture spec `{spec}`: {reason}")]
    BadArchSpec { spec: String, reason: String },

    #[error("cut layer {cut} out of range: network has {weighted} weighted layers")]
    CutLayerOutOfRange { cut: usize, weighted: usize },

    #[error("bottleneck invalid: {reason}")]
    BadBottleneck { reason: String },

    #[error("layer `{layer}` collapses spatial dims to zero for input {input:?}")]
    SpatialCollapse { layer: String, input: Vec<usize> },

    #[error("cannot upsample activation {activation:?} to image {image:?}: {reason}")]
    UnreachableOutputShape {
        activation: Vec<usize>,
        image: Vec<usize>,
        reason: String,
    },

    #[error("IDX file `{path}`: bad magic {got:#010x}, expected {expected:#010x}")]
    IdxBadMagic {
        path: String,
        got: u32,
        expected: u32,
    },

    #[error("IDX file `{path}`: truncated ({detail})")]
    IdxTruncated { path: String, detail: String },

    #[error("IDX datasets disagree: {images} images but {labels} labels")]
    IdxCountMismatch { images: usize, labels: usize },

    #[error("checkpoint `{path}`: bad magic")]
    CheckpointBadMagic { path: String },

    #[error("checkpoint `{path}`: version {got}, this build reads version {expected}")]
    CheckpointVersion { path: String, got: u32, expected: u32 },

    #[error("checkpoint `{path}`: CRC mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    CheckpointChecksum {
        path: String,
        stored: u32,
        computed: u32,
    },

    #[error("checkpoint `{path}`: truncated ({detail})")]
    CheckpointTruncated { path: String, detail: String },

    #[error("checkpoint tensor `{name}`: shape {got:?} does not fit model slot {expected:?}")]
    CheckpointTensorShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("checkpoint is missing tensor `{name}`")]
    CheckpointMissingTensor { name: String },

    #[error("cannot partition {samples} samples across {clients} clients")]
    TooManyClients { samples: usize, clients: usize },

    #[error("client {client} requested indices outside its shard")]
    ShardViolation { client: usize },

    #[error("NaN loss at epoch {epoch}, client {client}, step {step} ({phase})")]
    NanLoss {
        epoch: usize,
        client: usize,
        step: usize,
        phase: String,
    },

    #[error("no snapshot for epoch {requested}; available: {available:?}")]
    MissingSnapshot {
        requested: usize,
        available: Vec<usize>,
    },

    #[error("inversion model trained for epoch {model_epoch:?} applied to activations from epoch {activation_epoch}")]
    AttackEpochMismatch {
        model_epoch: Option<usize>,
        activation_epoch: usize,
    },

    #[error("attack configured with an empty tier set")]
    EmptyTiers,

    #[error("attack schedule is empty")]
    EmptySchedule,

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("io error on `{path}`: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
