use std::fmt;

use serde_json::json;

/// A failed run, reported on stderr as `{"error": {"kind", "message"}}`.
#[derive(Debug)]
pub struct CliError {
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            kind: "config",
            message: message.into(),
        }
    }

    pub fn io(context: impl Into<String>, e: std::io::Error) -> Self {
        Self {
            kind: "io",
            message: format!("{}: {e}", context.into()),
        }
    }

    pub fn to_json(&self) -> String {
        json!({ "error": { "kind": self.kind, "message": self.message } }).to_string()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind, self.message)
    }
}

impl From<sare_core::Error> for CliError {
    fn from(e: sare_core::Error) -> Self {
        use sare_core::Error as E;
        let kind = match &e {
            E::DimensionMismatch { .. } => "dimension_mismatch",
            E::DegenerateInput(_) => "degenerate_input",
            E::DegenerateDirection(_) => "degenerate_direction",
            E::InvalidArgument(_) => "invalid_argument",
            E::NonFinite(_) => "non_finite",
            E::Mining(_) => "mining",
            E::Parse { .. } => "parse",
            E::RankDeficient { .. } => "rank_deficient",
            E::Io { .. } => "io",
            E::Json(_) => "json",
        };
        Self {
            kind,
            message: e.to_string(),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self {
            kind: "json",
            message: e.to_string(),
        }
    }
}
