use std::fmt;

use midstate::data::{DataError, LabelError};
use midstate::image::ImageError;
use midstate::metrics::MetricsError;
use midstate::nn::BlockError;
use midstate::post::CatalogError;
use midstate::tensor::TensorError;
use midstate::train::TrainError;
use midstate::zoo::ZooError;
use serde::Serialize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    Usage,
    Data,
    Numeric,
}

impl ErrorKind {
    pub fn exit_code(self) -> u8 {
        match self {
            ErrorKind::Usage => 1,
            ErrorKind::Data => 2,
            ErrorKind::Numeric => 3,
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            kind: ErrorKind::Usage,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        CliError {
            kind: ErrorKind::Data,
            message: message.into(),
        }
    }

    pub fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        Self::data(format!("{}: {e}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

fn tensor_kind(e: &TensorError) -> ErrorKind {
    match e {
        TensorError::NonFinite { .. } => ErrorKind::Numeric,
        _ => ErrorKind::Data,
    }
}

fn block_kind(e: &BlockError) -> ErrorKind {
    match e {
        BlockError::Tensor(t) => tensor_kind(t),
        _ => ErrorKind::Data,
    }
}

fn zoo_kind(e: &ZooError) -> ErrorKind {
    match e {
        ZooError::Config(_) => ErrorKind::Usage,
        ZooError::Block(b) => block_kind(b),
        _ => ErrorKind::Data,
    }
}

impl From<ZooError> for CliError {
    fn from(e: ZooError) -> Self {
        CliError {
            kind: zoo_kind(&e),
            message: e.to_string(),
        }
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        CliError {
            kind: tensor_kind(&e),
            message: e.to_string(),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        let kind = match &e {
            TrainError::Config(_) => ErrorKind::Usage,
            TrainError::NonFinite { .. } => ErrorKind::Numeric,
            TrainError::Tensor(t) => tensor_kind(t),
            TrainError::Block(b) => block_kind(b),
            TrainError::Zoo(z) => zoo_kind(z),
            TrainError::Shape(_) | TrainError::Metrics(_) | TrainError::Io { .. } => {
                ErrorKind::Data
            }
        };
        CliError {
            kind,
            message: e.to_string(),
        }
    }
}

macro_rules! data_errors {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::data(e.to_string())
            }
        }
    )*};
}

data_errors!(
    DataError,
    LabelError,
    ImageError,
    MetricsError,
    CatalogError,
    serde_json::Error
);
