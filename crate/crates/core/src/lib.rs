//! Evidence recommendation over two views of a clinical study corpus: a
//! heterogeneous co-reference graph linking studies to their problems,
//! interventions and outcomes, and a similarity graph over study texts.
//! Each view feeds an attention channel; the channels are fused per layer
//! and the final embeddings score (problem, study) pairs.

pub mod autodiff;
pub mod channels;
pub mod corpus;
pub mod eval;
pub mod fusion;
pub mod graphs;
pub mod linear;
pub mod model;
pub mod synthetic;
pub mod training;

use std::path::PathBuf;

pub use autodiff::AutodiffError;
pub use corpus::{Corpus, CorpusError, EmbeddingTable, NodeKind, PerKind};
pub use graphs::{EcgGraph, EtgGraph, GraphError, Relation};
pub use model::{Mhan, ModelConfig, Variant};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("no parameters for relation {0}")]
    UnknownRelation(Relation),
    #[error("evidence node {0} has no self-loop in the text graph")]
    MissingSelfLoop(usize),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unknown problem {0:?}")]
    UnknownProblem(String),
    #[error("problem {problem:?} has {available} negative candidates, {requested} requested")]
    NegativePool {
        problem: String,
        available: usize,
        requested: usize,
    },
    #[error("edge split: {0}")]
    Split(String),
    #[error("loss became non-finite at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("evaluation: {0}")]
    Eval(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
