//! Knowledge-grounded response generation learned from a dialogue corpus and
//! an unrelated knowledge corpus.
//!
//! The latent knowledge behind a response and the rate at which it is
//! expressed are inferred with generalized EM: a retrieval posterior over
//! BM25 candidates, an exact posterior by enumeration, a knowledge selector,
//! a grounding-rate predictor and a Gumbel-softmax mutual-information term.

pub mod corpus;
pub mod decode;
pub mod error;
pub mod index;
pub mod io;
pub mod metrics;
pub mod nets;
pub mod objectives;
pub mod synth;
pub mod tensor;
pub mod textcore;
pub mod trainer;

pub use error::{Error, Result};
