use std::path::PathBuf;

/// Errors surfaced by every stage of the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("empty corpus: {0}")]
    EmptyCorpus(String),

    #[error("document count mismatch: {raw} raw documents vs {lemma} lemma documents")]
    DocumentCountMismatch { raw: usize, lemma: usize },

    #[error("duplicate document id {doc_id} in corpus {corpus_id}")]
    DuplicateDocument { corpus_id: String, doc_id: String },

    #[error("lemma indexing requires alignments but none were supplied")]
    AlignmentRequired,

    #[error("no alignment for document {doc_id} in corpus {corpus_id}")]
    MissingAlignment { corpus_id: String, doc_id: String },

    #[error("corpus {0} has no lemma layer")]
    MissingLemmaLayer(String),

    #[error("term not in index: {0}")]
    UnknownTerm(String),

    #[error("unknown corpus: {0}")]
    UnknownCorpus(String),

    #[error("position {position} out of range for document {doc_id} ({len} tokens)")]
    PositionOutOfRange {
        doc_id: String,
        position: usize,
        len: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("backend unreachable: {0}")]
    BackendUnreachable(String),

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("empty replacement distribution for {term} in {corpus_id}")]
    EmptyDistribution { term: String, corpus_id: String },

    #[error("empty comparison window")]
    EmptyWindow,

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("need at least {needed} paired values, got {got}")]
    TooFewValues { needed: usize, got: usize },

    #[error("correlation undefined for constant input")]
    ConstantInput,

    #[error("no annotations for term {0}")]
    EmptyAnnotations(String),

    #[error("missing weight for dataset {0}")]
    MissingWeight(String),

    #[error("artifact directory {0} is locked by another run")]
    Locked(PathBuf),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }

    /// Process exit code for the CLI: 2 config, 3 backend/protocol, 4 data.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) => 2,
            Error::BackendUnreachable(_) | Error::Protocol(_) => 3,
            _ => 4,
        }
    }
}
