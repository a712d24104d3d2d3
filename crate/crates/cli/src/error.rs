use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid scenario:\n  {}", .0.join("\n  "))]
    Parse(Vec<String>),

    #[error("{context}: {source}")]
    Core {
        context: String,
        #[source]
        source: drbsde_core::Error,
    },

    #[error("{0}")]
    Usage(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn core(context: impl Into<String>) -> impl FnOnce(drbsde_core::Error) -> CliError {
        let context = context.into();
        move |source| CliError::Core { context, source }
    }
}
