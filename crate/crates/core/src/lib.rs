//! Retrieval-based proxy alignment for zero-shot detection of machine-generated
//! text: a kNN datastore over a proxy model's context embeddings corrects the
//! proxy's next-token distribution before likelihood-style detectors score it.

// negated comparisons also reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod align;
pub mod corpus;
pub mod datastore;
pub mod detect;
pub mod error;
pub mod eval;
pub mod hash;
pub mod index;
pub mod prob;
pub mod provider;
pub mod router;

pub use error::{Error, ErrorKind, Result};
