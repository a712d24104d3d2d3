//! Error type shared by every module of the crate.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("assumption [P] violated: G = {value:e} at step {step}, prefix {prefix:#b}")]
    PositiveSurvival { step: usize, prefix: usize, value: f64 },

    #[error("undefined node: step {step}, index {index} carries zero mass")]
    UndefinedNode { step: usize, index: usize },

    #[error("internal consistency error: {0}")]
    Consistency(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("driver error: {0}")]
    Driver(String),

    #[error("hypothesis {name} violated: {detail}")]
    Hypothesis { name: &'static str, detail: String },

    #[error("numeric range error at step {step}, node {index}: {detail}")]
    NumericRange {
        step: usize,
        index: usize,
        detail: String,
    },

    #[error("size error: {0}")]
    Size(String),

    #[error("stopping rule error: {0}")]
    Rule(String),

    #[error("regression error: {0}")]
    Regression(String),

    #[error("model error: {0}")]
    Model(String),

    #[error("shape mismatch: {0}")]
    Shape(String),
}

pub type Result<T> = std::result::Result<T, Error>;
