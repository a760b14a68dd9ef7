use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite value produced by `{0}`")]
    NonFinite(&'static str),
    #[error("degenerate grid: {0}")]
    DegenerateGrid(String),
    #[error("region error: {0}")]
    Region(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("unknown variable `{0}`")]
    UnknownVariable(String),
    #[error("zero standard deviation for variable `{0}`")]
    ZeroStd(String),
    #[error("split error: {0}")]
    Split(String),
    #[error("model error: {0}")]
    Model(String),
    #[error("adapter error: {0}")]
    Adapter(String),
    #[error("search error: {0}")]
    Search(String),
    #[error("undefined ACC for variable `{variable}`: zero anomaly variance")]
    UndefinedAcc { variable: String },
    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },
    #[error("training error: {0}")]
    Train(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}
