//! A desk-scale laboratory for dynamic-filter space lower bounds.
//!
//! The crate implements reference dynamic filters with exact state
//! accounting, the one-way communication protocols that extract a filter's
//! information content from its accepted sets, the obfuscating-tree
//! construction that equalizes history-dependent filter states, the
//! combinatorial stage-switch solver behind the protocols' schedules, and
//! the reconstructible-set construction that substitutes for accepted sets
//! on non-monotone filters. Transcripts carry both ideal (real-valued) and
//! bitstream (decodable) costs, so empirical space bounds can be derived
//! and cross-checked at small parameters.

pub mod accepted;
pub mod acceptance;
pub mod bits;
pub mod coding;
pub mod experiment;
pub mod filter;
pub mod lemma_s;
pub mod obfuscation;
pub mod reconstructible;
pub mod tape;
pub mod warmup;

pub use filter::{
    initialize, initialize_by_name, space_bits, ErrorRate, FilterError, FilterInstance,
    FilterOp, FilterParams, ImplId,
};
pub use tape::RandomTape;
