use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("bad magic bytes: expected \"MLRQ\"")]
    BadMagic,
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated buffer for tensor `{0}`")]
    TruncatedBuffer(String),
    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),
    #[error("invalid tensor name: {0}")]
    InvalidName(String),
    #[error("unknown dtype code {0}")]
    UnknownDType(u8),
    #[error("i/o failure: {0}")]
    Io(#[from] io::Error),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("missing tensor `{0}`")]
    MissingTensor(String),
    #[error("broken chain at layer `{layer}`: in_features {found} but previous out_features {expected}")]
    BrokenChain {
        layer: String,
        expected: usize,
        found: usize,
    },
    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("calibration set is empty")]
    EmptyCalibration,
    #[error("SVD did not converge")]
    SvdNoConvergence,
    #[error("empty candidate input")]
    EmptyInput,
    #[error("float network output has zero energy")]
    ZeroSignal,
    #[error("infeasible budget: minimal assignment needs {required} bits, budget is {budget} bits")]
    Infeasible { required: u64, budget: u64 },
    #[error("infeasible after rounding to {unit}-bit units: minimal assignment needs {required} units, budget holds {capacity}; lower the memory unit")]
    InfeasibleUnits { unit: u64, required: u64, capacity: u64 },
    #[error("no feasible activation bit-width for `{tensor}` (budget/size = {ratio})")]
    NoFeasibleBit { tensor: String, ratio: u64 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Infeasible { .. } | Error::InfeasibleUnits { .. } => 3,
            Error::SvdNoConvergence | Error::ZeroSignal | Error::Numerical(_) => 4,
            _ => 2,
        }
    }
}
