use serde_json::json;
use slacc::{SlaccError, Violation};
use thiserror::Error;

/// Failures surfaced by the command-line tool.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{message}")]
    Input {
        message: String,
        subject_id: Option<String>,
        site: Option<String>,
        condition: Option<&'static str>,
    },
    #[error("validation failed: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    Validation(Vec<Violation>),
    #[error("{0}")]
    Numerical(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        source: std::io::Error,
    },
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn input(message: impl Into<String>) -> Self {
        CliError::Input {
            message: message.into(),
            subject_id: None,
            site: None,
            condition: None,
        }
    }

    pub fn subject(message: impl Into<String>, subject_id: &str) -> Self {
        CliError::Input {
            message: message.into(),
            subject_id: Some(subject_id.to_string()),
            site: None,
            condition: None,
        }
    }

    pub fn site(message: impl Into<String>, site: &str) -> Self {
        CliError::Input {
            message: message.into(),
            subject_id: None,
            site: Some(site.to_string()),
            condition: None,
        }
    }

    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        CliError::Io {
            context: context.into(),
            source,
        }
    }

    /// 2 for bad input, 3 for numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Numerical(_) => 3,
            _ => 2,
        }
    }

    /// Machine-readable diagnostics for stderr.
    pub fn to_json(&self) -> serde_json::Value {
        let mut v = json!({
            "error": self.kind(),
            "exit_code": self.exit_code(),
            "message": self.to_string(),
        });
        match self {
            CliError::Input {
                subject_id,
                site,
                condition,
                ..
            } => {
                if let Some(s) = subject_id {
                    v["subject_id"] = json!(s);
                }
                if let Some(s) = site {
                    v["site"] = json!(s);
                }
                if let Some(c) = condition {
                    v["condition"] = json!(c);
                }
            }
            CliError::Validation(violations) => {
                v["violations"] = json!(violations);
                let conditions: Vec<&str> = violations.iter().filter_map(condition_of).collect();
                if !conditions.is_empty() {
                    v["conditions"] = json!(conditions);
                }
            }
            _ => {}
        }
        v
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Input { .. } => "input",
            CliError::Validation(_) => "validation",
            CliError::Numerical(_) => "numerical",
            CliError::Io { .. } => "io",
        }
    }
}

fn condition_of(v: &Violation) -> Option<&'static str> {
    match v {
        Violation::RankNotBelowV { .. } | Violation::DimensionsTooSmall { .. } => Some("A.1"),
        Violation::RankDeficientCovariates { .. } => Some("A.5"),
        _ => None,
    }
}

impl From<SlaccError> for CliError {
    fn from(e: SlaccError) -> Self {
        match e {
            SlaccError::Numerical(_) | SlaccError::NotPositiveDefinite(_) => {
                CliError::Numerical(e.to_string())
            }
            SlaccError::RankBound { .. } => CliError::Input {
                message: e.to_string(),
                subject_id: None,
                site: None,
                condition: Some("A.1"),
            },
            other => CliError::input(other.to_string()),
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::input(format!("csv: {e}"))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::input(format!("json: {e}"))
    }
}
