use std::fmt;
use std::path::Path;

use flowmix::classifier::ClassifierError;
use flowmix::data::DataError;
use flowmix::eval::EvalError;
use flowmix::persist::PersistError;
use flowmix::settings::SettingsError;
use flowmix::ModelError;

/// A failed command; the variant picks the process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config file or model settings (exit 2).
    Config(String),
    /// Unreadable or inconsistent input data (exit 3).
    Data(String),
    /// Training or scoring hit non-finite arithmetic (exit 4).
    Numeric(String),
    /// Model or bundle files could not be read or written (exit 5).
    Persist(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
            CliError::Persist(_) => 5,
        }
    }

    pub fn write_failed(path: &Path, e: std::io::Error) -> Self {
        CliError::Persist(format!("cannot write {}: {e}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) | CliError::Data(m) | CliError::Numeric(m) | CliError::Persist(m) => f.write_str(m),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

impl From<SettingsError> for CliError {
    fn from(e: SettingsError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<PersistError> for CliError {
    fn from(e: PersistError) -> Self {
        CliError::Persist(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match &e {
            _ if e.is_numerical() => CliError::Numeric(e.to_string()),
            ModelError::DimMismatch { .. } => CliError::Data(e.to_string()),
            ModelError::InvalidModel(_) => CliError::Persist(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Model(m) => m.into(),
            EvalError::EmptyKList => CliError::Config(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<ClassifierError> for CliError {
    fn from(e: ClassifierError) -> Self {
        let msg = e.to_string();
        match e {
            ClassifierError::Training { source, .. } => match CliError::from(source) {
                CliError::Numeric(_) => CliError::Numeric(msg),
                CliError::Data(_) => CliError::Data(msg),
                _ => CliError::Config(msg),
            },
            ClassifierError::Unlabeled
            | ClassifierError::EmptyClass(_)
            | ClassifierError::DimMismatch { .. }
            | ClassifierError::Unscorable { .. } => CliError::Data(msg),
            ClassifierError::Conflict(_) | ClassifierError::BadClassId(_) | ClassifierError::ThreadPool(_) => {
                CliError::Config(msg)
            }
            ClassifierError::Empty
            | ClassifierError::Io { .. }
            | ClassifierError::Persist { .. }
            | ClassifierError::Manifest(_)
            | ClassifierError::Settings(_) => CliError::Persist(msg),
        }
    }
}
