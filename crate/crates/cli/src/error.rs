use serde::Serialize;

/// Everything a command can fail with. Serialized to stderr as a single
/// JSON line so wrappers can dispatch on `kind`.
#[derive(Debug)]
pub enum CliError {
    Config { path: String, key: String, message: String },
    /// A stage input is absent; `stage` names the command that produces it.
    MissingDependency { stage: String, message: String },
    Pipeline(egoaction::Error),
}

#[derive(Serialize)]
pub struct ErrorRecord<'a> {
    pub kind: &'static str,
    pub command: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub key: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<&'a str>,
    pub message: String,
}

impl CliError {
    pub fn missing(stage: &str, message: impl Into<String>) -> Self {
        CliError::MissingDependency {
            stage: stage.into(),
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } => 2,
            CliError::MissingDependency { .. } => 3,
            CliError::Pipeline(_) => 1,
        }
    }

    pub fn record<'a>(&'a self, command: &'a str) -> ErrorRecord<'a> {
        match self {
            CliError::Config { path, key, message } => ErrorRecord {
                kind: "config",
                command,
                stage: None,
                key: Some(key),
                path: Some(path),
                message: message.clone(),
            },
            CliError::MissingDependency { stage, message } => ErrorRecord {
                kind: "missing_dependency",
                command,
                stage: Some(stage),
                key: None,
                path: None,
                message: format!("run `{stage}` first: {message}"),
            },
            CliError::Pipeline(e) => ErrorRecord {
                kind: "pipeline",
                command,
                stage: None,
                key: None,
                path: None,
                message: e.to_string(),
            },
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config { path, key, message } => write!(f, "{path}: `{key}`: {message}"),
            CliError::MissingDependency { stage, message } => write!(f, "missing dependency `{stage}`: {message}"),
            CliError::Pipeline(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<egoaction::Error> for CliError {
    fn from(e: egoaction::Error) -> Self {
        CliError::Pipeline(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Pipeline(egoaction::Error::InvalidArgument(e.to_string()))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Pipeline(egoaction::Error::Json(e))
    }
}
