use thiserror::Error;

/// Errors produced anywhere in the analysis chain.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Input data is structurally valid but unusable (missing cells, zero counts, ...).
    #[error("data error: {0}")]
    Data(String),

    /// Operand shapes do not agree.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A count file could not be parsed.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: u64, msg: String },

    /// The constraint plane is degenerate for the requested projection.
    #[error("degenerate plane: {0}")]
    DegeneratePlane(String),

    /// The linear program solver reported a state that should be impossible.
    #[error("linear program: {0}")]
    Lp(String),

    /// A pipeline stage failed on one run.
    #[error("{stage} stage failed (theta {theta}, run {run}): {source}")]
    Stage {
        stage: String,
        theta: f64,
        run: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
