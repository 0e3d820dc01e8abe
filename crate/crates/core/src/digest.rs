//! Digest selection shared by codebook fingerprints and session identifiers.
//!
//! Both shims must hash identically, so the chosen algorithm is recorded in
//! the codebook file header and carried alongside the table at runtime.

use alloc::vec::Vec;

use sha1::{Digest as _, Sha1};
use sha2::Sha256;

/// Hash algorithm used for key fingerprints and session identifiers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DigestAlg {
    Sha1,
    Sha256,
}

impl DigestAlg {
    pub fn digest(self, data: &[u8]) -> Vec<u8> {
        match self {
            DigestAlg::Sha1 => Sha1::digest(data).to_vec(),
            DigestAlg::Sha256 => Sha256::digest(data).to_vec(),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DigestAlg::Sha1 => "sha1",
            DigestAlg::Sha256 => "sha256",
        }
    }

    pub fn from_str(name: &str) -> Option<Self> {
        match name {
            "sha1" => Some(DigestAlg::Sha1),
            "sha256" => Some(DigestAlg::Sha256),
            _ => None,
        }
    }
}
