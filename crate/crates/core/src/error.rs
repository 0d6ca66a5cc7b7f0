use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    Shape {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("parameter layout mismatch: {0}")]
    ParamMismatch(String),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("not a checkpoint file (bad magic)")]
    BadMagic,

    #[error("unsupported checkpoint version {0}")]
    Version(u32),

    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),

    #[error("checkpoint is missing {0}")]
    Missing(String),

    #[error(transparent)]
    Layout(#[from] NnError),
}

#[derive(Debug, Error)]
pub enum CohortError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("line {line}: parse error: {message}")]
    Parse { line: usize, message: String },

    #[error("line {line}: schema violation: {message}")]
    Schema { line: usize, message: String },

    #[error("line {line}: admission {id}: time index {t} does not follow {prev}")]
    NonMonotoneTime {
        line: usize,
        id: String,
        prev: i64,
        t: i64,
    },

    #[error("admission {0} has no outcome")]
    MissingOutcome(String),

    #[error("unknown feature index {index} (have {count})")]
    UnknownFeature { index: usize, count: usize },

    #[error("feature {0} is never observed in the training data")]
    NeverObserved(usize),

    #[error("cannot hold out {n_test} of {size} admissions")]
    SplitTooLarge { n_test: usize, size: usize },

    #[error("cannot select {requested} validation patients: {reason}")]
    Infeasible { requested: usize, reason: String },

    #[error("unknown vasopressor {0}")]
    UnknownDrug(String),

    #[error("empty training cohort")]
    Empty,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{stage}: loss became non-finite at iteration {iteration} ({diagnostics})")]
    Divergence {
        stage: &'static str,
        iteration: usize,
        diagnostics: String,
    },

    #[error("{0}: no training data")]
    NoData(&'static str),

    #[error("invalid hyperparameter: {0}")]
    Hyper(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SearchError {
    #[error("no candidate actions")]
    NoCandidates,

    #[error("expansion budget exhausted")]
    BudgetExhausted,

    #[error("node {0} is not an expandable leaf")]
    NotALeaf(usize),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OpeError {
    #[error("no test trajectories")]
    Empty,

    #[error("trajectory {0} has misaligned arrays")]
    Misaligned(usize),

    #[error("missing variant {0}")]
    MissingVariant(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScoreError {
    #[error("no recommendations at evaluation point")]
    NoRecommenders,

    #[error("variance must be positive, got {0}")]
    NonPositiveVariance(f64),

    #[error("evaluation point {point} is missing the {source_label} action")]
    MissingSource { point: String, source_label: String },

    #[error("no evaluation points")]
    NoPoints,
}

/// Top-level error for pipeline stages.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Cohort(#[from] CohortError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error(transparent)]
    Ope(#[from] OpeError),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("config error: {0}")]
    Config(String),
    #[error("study error: {0}")]
    Study(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
