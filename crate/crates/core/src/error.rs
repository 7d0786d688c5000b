use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("empty power delay profile")]
    EmptyProfile,

    #[error("negative tap delay {0} ns")]
    NegativeDelay(f64),

    #[error("unknown named profile '{0}'")]
    UnknownProfile(String),

    #[error("unsupported overlapping factor {0} (expected 2, 3 or 4)")]
    UnsupportedOverlap(usize),

    #[error("number of subcarriers {0} is not a power of two >= 4")]
    UnsupportedSubcarriers(usize),

    #[error("degenerate user channel: zero frequency response for user {user}")]
    DegenerateUserChannel { user: usize },

    #[error("ZF infeasible: {antennas} antennas for {users} users")]
    ZfInfeasible { antennas: usize, users: usize },

    #[error("closed form undefined: need N > U, got N={antennas}, U={users}")]
    ClosedFormUndefined { antennas: usize, users: usize },

    #[error("tap design matrix ill-conditioned (condition number {0:.3e})")]
    IllConditioned(f64),

    #[error("interpolation plan C1={c1}, C2={c2} does not match M/2={half}")]
    PlanMismatch { c1: usize, c2: usize, half: usize },

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("empty realization stream")]
    EmptyStream,

    #[error("non-positive denominator in rate expression")]
    NonPositiveDenominator,
}
