use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("unknown example {id:?}; known examples: {known}")]
    UnknownExample { id: String, known: String },

    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },

    #[error("{}: {source}", path.display())]
    Input { path: PathBuf, source: ntk_geom::Error },

    #[error(transparent)]
    Core(#[from] ntk_geom::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn input(path: &Path, source: ntk_geom::Error) -> Self {
        Self::Input {
            path: path.to_path_buf(),
            source,
        }
    }

    /// 2 for bad invocations and inputs, 3 when a numerical method gives up.
    pub fn exit_code(&self) -> u8 {
        use ntk_geom::Error as E;
        match self {
            Self::Core(e) | Self::Input { source: e, .. } => match e {
                E::FiberNotFound { .. }
                | E::StepSizeUnderflow { .. }
                | E::AmbiguousGrouping(_)
                | E::NotOnManifold { .. }
                | E::SingularPoint(_) => 3,
                _ => 2,
            },
            _ => 2,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
