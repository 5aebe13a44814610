//! ELECTRA-style replaced-token-detection pretraining over Reformer encoders,
//! with a BPE tokenizer, a text-cleaning corpus pipeline and a BIO named-entity
//! tagger with chunked inference and fuzzy auto-annotation.

pub mod attention;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod electra;
pub mod error;
pub mod ner;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod reformer;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod tokenizer;

pub use error::{Error, Result};
pub use tensor::Tensor;
