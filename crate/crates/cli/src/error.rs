use std::fmt::{self, Display};

use frad_core::FradError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Config,
    Data,
    Numeric,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: Kind,
    pub msg: String,
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        Self {
            kind: Kind::Config,
            msg: msg.into(),
        }
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Self {
            kind: Kind::Data,
            msg: msg.into(),
        }
    }

    pub fn context(self, prefix: impl Display) -> Self {
        Self {
            kind: self.kind,
            msg: format!("{prefix}: {}", self.msg),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            Kind::Config => 2,
            Kind::Data => 3,
            Kind::Numeric => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.msg)
    }
}

impl From<FradError> for CliError {
    fn from(e: FradError) -> Self {
        use FradError::*;
        let kind = match &e {
            Config(_) => Kind::Config,
            DegenerateTorsion { .. }
            | ZeroAxis { .. }
            | CoincidentAtoms { .. }
            | DegenerateMove(_)
            | UndefinedRatio(_)
            | UndefinedCorrelation(_)
            | NonFiniteLoss { .. } => Kind::Numeric,
            _ => Kind::Data,
        };
        Self { kind, msg: e.to_string() }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::data(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        Self::data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::data(e.to_string())
    }
}
