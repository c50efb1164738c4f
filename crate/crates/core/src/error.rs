use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },

    #[error("unknown layer `{0}`")]
    UnknownLayer(String),

    #[error("duplicate layer name `{0}`")]
    DuplicateLayer(String),

    #[error("pivots out of topological order: `{before}` must precede `{after}`")]
    PivotOrder { before: String, after: String },

    #[error("residual at `{residual}` lies upstream of start layer `{start}`")]
    ResidualUpstream { residual: String, start: String },

    #[error("no residual slot at `{0}`")]
    NoResidualSlot(String),

    #[error("loss node {0} is not scalar")]
    NonScalarLoss(usize),

    #[error("node {target} is not an ancestor of loss node {loss}")]
    NotAncestor { target: usize, loss: usize },

    #[error("node {0} does not exist")]
    UnknownNode(usize),

    #[error("label index {index} out of range for {len} outputs")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("labels with zero positive occurrences: {0:?}")]
    ExcludedLabels(Vec<usize>),

    #[error("average precision undefined for labels without positives: {0:?}")]
    UndefinedAp(Vec<usize>),

    #[error("known and unknown label sets overlap at {0:?}")]
    OverlappingSets(Vec<usize>),

    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("refusing to write an empty report")]
    EmptyReport,

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable short identifier, used for machine-readable CLI errors.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::NonFinite { .. } => "non_finite",
            Error::UnknownLayer(_) => "unknown_layer",
            Error::DuplicateLayer(_) => "duplicate_layer",
            Error::PivotOrder { .. } => "pivot_order",
            Error::ResidualUpstream { .. } => "residual_upstream",
            Error::NoResidualSlot(_) => "no_residual_slot",
            Error::NonScalarLoss(_) => "non_scalar_loss",
            Error::NotAncestor { .. } => "not_ancestor",
            Error::UnknownNode(_) => "unknown_node",
            Error::IndexOutOfRange { .. } => "index_out_of_range",
            Error::ExcludedLabels(_) => "excluded_labels",
            Error::UndefinedAp(_) => "undefined_ap",
            Error::OverlappingSets(_) => "overlapping_sets",
            Error::InvalidSpec(_) => "invalid_spec",
            Error::Version { .. } => "version",
            Error::Corrupt(_) => "corrupt",
            Error::Divergence { .. } => "divergence",
            Error::EmptyReport => "empty_report",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
