//! Discrete-latent autoencoders trained by variational stochastic
//! quantization, alongside the classic vector-quantized baselines, at desk
//! scale: fully-connected networks, f64 arithmetic, bit-reproducible runs.
//!
//! The crate is organized around a small define-by-run autodiff engine
//! ([`tensor`]), a trainable codebook with its maintenance heuristics
//! ([`codebook`]), stochastic and deterministic quantizers ([`quantizer`]),
//! the training objectives ([`objectives`]), MLP encoder/decoder models
//! ([`models`]), dataset loading and synthesis ([`data`]), the training
//! loop ([`training`]), and evaluation metrics ([`metrics`]).

pub mod bessel;
pub mod codebook;
pub mod data;
pub mod metrics;
pub mod models;
pub mod objectives;
pub mod oracle;
pub mod quantizer;
pub mod rng;
pub mod tensor;
pub mod training;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A primitive was called with non-conforming shapes.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    /// A primitive produced NaN or Inf.
    #[error("non-finite output in {op}")]
    NonFinite { op: &'static str },
    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),
    /// Malformed input file.
    #[error("format error: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    /// Failure wrapped with the training step it occurred at.
    #[error("at step {step}: {source}")]
    AtStep {
        step: u64,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// True when the root cause is a NaN/Inf produced by a primitive.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::NonFinite { .. } => true,
            Error::AtStep { source, .. } => source.is_numeric(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
