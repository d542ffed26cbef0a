use alloc::string::String;

use thiserror::Error;

use crate::modality::Modality;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("unknown modality `{0}`")]
    UnknownModality(String),
    #[error("modality {0} is not available")]
    MissingModality(Modality),
    #[error("mask plan error: {0}")]
    Plan(String),
    #[error("degenerate loss: {0}")]
    DegenerateLoss(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("invalid label: {0}")]
    InvalidLabel(String),
    #[error("degenerate quantiles: {0}")]
    DegenerateQuantiles(String),
    #[error("value out of range: {0}")]
    OutOfRange(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
