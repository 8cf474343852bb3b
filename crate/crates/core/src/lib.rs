//! Sentence- and token-level propaganda identification guided by two
//! discourse structures: PDTB-style relations between adjacent sentences
//! and news discourse roles of each sentence.
//!
//! Two frozen teachers ([`teachers`]) predict those structures. A student
//! ([`student`]) either appends the teacher probabilities to its features
//! or learns from the teachers through response-based (KL) and
//! feature-relation (cosine structure) distillation ([`distill`]).

pub mod autograd;
pub mod corpus;
pub mod distill;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod head;
pub mod optim;
pub mod params;
pub mod student;
pub mod teachers;

mod fsutil;

pub use error::{Error, Result};
