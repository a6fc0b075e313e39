use serde_json::json;

/// A failed command. The variant decides the exit status.
#[derive(Debug)]
pub enum CliError {
    /// Bad configuration or flags; exit 2.
    Config(anyhow::Error),
    /// A pipeline stage failed; exit 1.
    Stage(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Stage(_) => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Stage(_) => "stage",
        }
    }

    /// One-line JSON for standard error.
    pub fn to_json(&self, command: &str) -> String {
        let (CliError::Config(e) | CliError::Stage(e)) = self;
        json!({
            "error": {
                "kind": self.kind(),
                "command": command,
                "message": format!("{e:#}"),
            }
        })
        .to_string()
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let (CliError::Config(e) | CliError::Stage(e)) = self;
        write!(f, "{}: {e:#}", self.kind())
    }
}

impl std::error::Error for CliError {}

pub trait StageContext<T> {
    fn stage(self) -> Result<T, CliError>;
}

impl<T, E: Into<anyhow::Error>> StageContext<T> for Result<T, E> {
    fn stage(self) -> Result<T, CliError> {
        self.map_err(|e| CliError::Stage(e.into()))
    }
}
