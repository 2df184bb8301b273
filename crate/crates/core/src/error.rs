use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("duplicate cell_id {0}")]
    DuplicateCellId(u64),
    #[error("isolated cell {0}: IAR structure needs at least one neighbour per cell")]
    IsolatedCell(u64),
    #[error("lattice needs at least 2 cells, got {0}")]
    TooFewCells(usize),
    #[error("invalid GPD parameters: sigma_u = {sigma_u}, xi = {xi}")]
    InvalidParams { sigma_u: f64, xi: f64 },
    #[error("non-finite input: {0}")]
    NonFinite(&'static str),
    #[error("probability out of range: {0}")]
    BadProbability(f64),
    #[error("too few excesses in cell {cell_id}: {n} < {floor}")]
    TooFewExcesses { cell_id: u64, n: usize, floor: usize },
    #[error("series has no excesses above the selected threshold (constant data?)")]
    NoExcesses,
    #[error("empty series")]
    EmptySeries,
    #[error("theta outside support for cell {0}")]
    OutsideSupport(u64),
    #[error("singular information block for cell {0}")]
    SingularInformation(u64),
    #[error("MCMC state numerically broken at iteration {iter}: {what}")]
    BrokenState { iter: usize, what: String },
    #[error("missing MLE fit for cell {0}")]
    MissingMle(u64),
    #[error("return level below threshold: n_y*lambda_u*r = {0} <= 1")]
    BelowThreshold(f64),
    #[error("all draws invalid for cell {0}")]
    AllDrawsInvalid(u64),
    #[error("root not bracketed for predictive level (cell {cell_id}): averaged tail at bracket end = {tail}")]
    NotBracketed { cell_id: u64, tail: f64 },
    #[error("mismatched cell sets between analyses")]
    MismatchedCells,
    #[error("chain degenerate: no proposal accepted over {0} iterations")]
    ChainDegenerate(usize),
    #[error("infeasible simulation spec: sigma_u <= 0 persisted after {0} redraws")]
    InfeasibleSpec(usize),
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
