//! Core logic for the stegsuggest covert channel.
//!
//! Two cooperating middleboxes tunnel a hidden bit stream through an overt
//! autocomplete service. The sender-side shim appends codebook words to
//! suggestion lists flowing toward the client; the receiver-side shim strips
//! them back out, so the endpoints observe unmodified traffic. Session
//! registration rides in rewritten TCP window-scale and timestamp options on
//! SYN segments.
//!
//! The crate is `no_std` + `alloc`: it holds the pure protocol and
//! simulation logic. File formats, sockets-of-any-kind, and the CLI live in
//! the companion `stegsuggest` crate.
//!
//! Module map:
//!
//! - [`codebook`]: the shared 4096-word table mapping 10-bit values to words
//! - [`wire`]: simplified TCP segments, suggestion bodies, trace records
//! - [`steg`]: session identifiers, option rewriting, frame encode/decode
//! - [`shim`]: the two middlebox state machines and the reassembler
//! - [`sim`]: deterministic discrete-event harness and bandwidth estimator
//! - [`stats`]: single-pass trace analyzer
//! - [`rng`]: the portable generator both ends use for codebook setup

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod codebook;
pub mod digest;
pub mod rng;
pub mod shim;
pub mod sim;
pub mod stats;
pub mod steg;
pub mod wire;

pub use codebook::{ChannelKey, Codebook};
pub use steg::Ssi;
