use thiserror::Error;

/// Every failure the library can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value")]
    NonFinite,
    #[error("accumulator headroom exceeded: dot product of {len} terms (max {max})")]
    Headroom { len: usize, max: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid graph: {0}")]
    Graph(String),
    #[error("bad magic")]
    BadMagic,
    #[error("version mismatch: file has version {found}, expected {expected}")]
    VersionMismatch { found: u16, expected: u16 },
    #[error("truncated file")]
    Truncated,
    #[error("malformed PGM header: {0}")]
    PgmHeader(String),
    #[error("wrong bit depth: maxval {0}, expected 255")]
    BitDepth(u32),
    #[error("infeasible: node {node} does not fit in {budget} bytes of L1")]
    Infeasible { node: String, budget: usize },
    #[error("memory capacity exceeded in {region}: {detail}")]
    Capacity { region: &'static str, detail: String },
    #[error("memory access violation: {0}")]
    Access(String),
    #[error("schedule does not match graph: {0}")]
    ScheduleMismatch(String),
    #[error("no valid stack assignment: {0}")]
    NoAssignment(String),
    #[error("uncalibrated parameters: {0}")]
    Uncalibrated(String),
    #[error("underdetermined fit: {0}")]
    Underdetermined(String),
    #[error("domain violation: {0}")]
    Domain(String),
    #[error("trace too short: covers {covered:.3} s, need {needed:.3} s")]
    TraceTooShort { covered: f64, needed: f64 },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    EmptyInput,
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("data file error: {0}")]
    Data(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
