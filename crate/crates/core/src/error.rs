use thiserror::Error;

use crate::graph::NodeId;

/// Errors raised across the fairrank pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("edge ({0}, {1}) does not join a user to a review or a review to a product")]
    EdgeTypeViolation(NodeId, NodeId),
    #[error("duplicate edge ({0}, {1})")]
    DuplicateEdge(NodeId, NodeId),
    #[error("edge endpoint {0} is not a node of the graph")]
    UnknownNode(usize),
    #[error("review {review} has {users} user and {products} product neighbours (expected 1 and 1)")]
    ReviewDegreeViolation {
        review: NodeId,
        users: usize,
        products: usize,
    },
    #[error("review {0} has no label")]
    MissingLabel(NodeId),
    #[error("node {0} is not a review but carries a label")]
    UnexpectedLabel(NodeId),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("graph has no users")]
    EmptyUserSet,
    #[error("percentile must lie strictly between 0 and 100, got {0}")]
    BadPercentile(u32),
    #[error("split fractions must be non-negative and sum to 1, got {0:?}")]
    BadFractions([f64; 3]),
    #[error("bad layer dimensions {0:?}")]
    BadDimensions(Vec<usize>),
    #[error("non-finite value in {0}")]
    NonFiniteValue(String),
    #[error("forward cache does not match the supplied inputs")]
    CacheMismatch,
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("no (non-spam, spam) pairs in the favoured training reviews")]
    NoPairs,
    #[error("sampling set {0} is empty")]
    EmptySourceSet(&'static str),
    #[error("ground truth for A' is unavailable")]
    MissingGroundTruth,
    #[error("no positives in {0}; NDCG is undefined")]
    NoPositives(&'static str),
    #[error("subgroup has no spam reviews")]
    NoSubgroupSpams,
    #[error("favoured group has no non-spam reviews")]
    NoFavoredNonSpams,
    #[error("AUC needs both classes present")]
    OneClassOnly,
    #[error("infeasible generator config: {0}")]
    InfeasibleConfig(String),
    #[error("{file}:{line}: {message}")]
    Parse {
        file: String,
        line: usize,
        message: String,
    },
    #[error("missing columns: {0:?}")]
    MissingColumns(Vec<String>),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}: {what}")]
    Diverged { epoch: usize, what: String },
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
