use thiserror::Error;

use crate::types::TypeId;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown type id {0} for this model")]
    UnknownType(TypeId),
    #[error("uncertified tail: {0}")]
    UncertifiedTail(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("unsupported model/operation pairing: {0}")]
    Unsupported(String),
    #[error("numeric non-convergence: {msg} (residual {residual:.3e})")]
    Numeric { msg: String, residual: f64 },
    #[error("structure error: {0}")]
    Structure(String),
    #[error("enumeration budget exceeded: {atoms} atoms > budget {budget}")]
    Budget { atoms: usize, budget: usize },
    #[error("population count overflow at generation {generation}")]
    Overflow { generation: u32 },
    #[error("offspring mean mismatch for type {x}: law mean {law} vs constructed {constructed} at coordinate {y}")]
    MeanMismatch {
        x: TypeId,
        y: TypeId,
        law: f64,
        constructed: f64,
    },
    #[error("empty watch set")]
    EmptyWatchSet,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
