//! Lexical semantic change detection from masked-token substitutes.
//!
//! Each sampled occurrence of a term is represented by the handful of words
//! a masked language model ranks highest at its position. Counting those
//! substitutes per period gives a replacement distribution; the
//! Jensen-Shannon divergence between the two periods is the raw change
//! score, which is then re-expressed as a quantile among background terms
//! of similar frequency.

pub mod align;
pub mod change;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod pipeline;
pub mod seed;
pub mod senses;
pub mod stopwords;
pub mod substitute;

pub use error::{Error, Result};
