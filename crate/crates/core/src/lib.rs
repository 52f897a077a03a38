//! Speech-unit generation stack: a small reverse-mode autodiff engine, neural
//! layers (mixture-of-experts, text-guided fusion), exact CTC with decoding,
//! CTC-based preference optimization, AR/NAR unit decoders, staged alignment
//! of toy speech/image encoders to a text backbone, and synthetic corpora.

pub mod alignment;
pub mod ctc;
pub mod data;
pub mod decoder;
pub mod error;
pub mod nn;
pub mod preference;
pub mod tensor;

pub use error::{Error, Result};
