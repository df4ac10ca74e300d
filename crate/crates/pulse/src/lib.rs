//! PULSE: two-phase rationale-aligned sequential recommendation.
//!
//! Phase one aligns free-text rationales with behavioral histories in a
//! shared embedding space trained contrastively. Phase two expands a small
//! reasoning tree per user, picks the rationale that agrees best with the
//! user's behavior under that space, and feeds it to a rationale-conditioned
//! scorer over a fixed candidate set.
//!
//! Start with the `examples/` directory; each file exercises one stage of
//! the pipeline end to end at desk scale.

pub mod backbone;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod hashing;
pub mod rationale;
pub mod sft;
pub mod tensor;
pub mod text;
pub mod thought;

pub use error::{PulseError, Result};
