//! Multi-head softmax attention with exact first and second order calculus,
//! logistic-risk bounds, GD training, NTK-margin certificates and
//! leave-one-out stability experiments on synthetic token data.

pub mod attention;
pub mod calculus;
pub mod datagen;
pub mod linalg;
pub mod ntk;
pub mod objective;
pub mod par;
pub mod reproduce;
pub mod stability;
pub mod svg;
pub mod training;

pub use attention::{HeadParams, LabeledExample, ModelParams, TokenMatrix};
pub use linalg::Matrix;
pub use objective::Dataset;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("size limit: {0}")]
    TooLarge(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
