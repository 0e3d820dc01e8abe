//! File formats and plumbing behind the `stegsuggest` command-line tool.
//!
//! All protocol and simulation logic lives in `stegsuggest-core`; this crate
//! owns what touches disk:
//!
//! - [`files`]: payload containers, word lists, codebook tables, traces,
//!   and simulation configs
//! - [`channel`]: the recorded channel transcript that lets the sending and
//!   receiving halves of the tool run as separate offline invocations

pub mod channel;
pub mod files;
