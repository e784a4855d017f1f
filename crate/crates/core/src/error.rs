use thiserror::Error;

pub type Result<T> = std::result::Result<T, FradError>;

#[derive(Debug, Error)]
pub enum FradError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("declared {declared} atoms but found {found}")]
    CountMismatch { declared: usize, found: usize },

    #[error("unknown element symbol `{0}`")]
    UnknownElement(String),

    #[error("not a V2000 MOL block: {0}")]
    NotV2000(String),

    #[error("bond {bond} references atom {atom}, but the molecule has {n_atoms} atoms")]
    BondOutOfRange {
        bond: usize,
        atom: usize,
        n_atoms: usize,
    },

    #[error("invalid topology: {0}")]
    Topology(String),

    #[error("bond {b}-{c} lies on a ring; removing it does not split the molecule")]
    RingBond { b: usize, c: usize },

    #[error("no bond between atoms {0} and {1}")]
    NoSuchBond(usize, usize),

    #[error("degenerate torsion {atoms:?}: collinear hinge")]
    DegenerateTorsion { atoms: [usize; 4] },

    #[error("zero-length axis between atoms {b} and {c}")]
    ZeroAxis { b: usize, c: usize },

    #[error("atoms {i} and {j} coincide")]
    CoincidentAtoms { i: usize, j: usize },

    #[error("degenerate internal coordinate during noise application: {0}")]
    DegenerateMove(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("ratio undefined: {0}")]
    UndefinedRatio(String),

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("non-finite loss for sample {sample}")]
    NonFiniteLoss { sample: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
