//! On-disk formats shared by the subcommands.
//!
//! - Payload files carry arbitrary bit strings: a single `bits=N` header
//!   line, then the raw bytes, most-significant bit first. `N` may trim
//!   trailing bits of the final byte.
//! - Word lists and codebooks are the tab-separated text formats parsed by
//!   the core crate.
//! - Traces are line-delimited JSON, one segment record per line.
//! - Simulation configs are `key = value` text.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use stegsuggest_core::codebook::{parse_word_list, WordEntry};
use stegsuggest_core::digest::DigestAlg;
use stegsuggest_core::sim::SimConfig;
use stegsuggest_core::wire::TraceRecord;
use stegsuggest_core::{ChannelKey, Codebook};

/// Reads a payload file: `bits=N` header line, then `ceil(N / 8)` raw bytes.
pub fn read_payload(path: &Path) -> Result<(Vec<u8>, u64)> {
    let raw = fs::read(path).with_context(|| format!("reading payload file {}", path.display()))?;
    let nl = raw
        .iter()
        .position(|&b| b == b'\n')
        .with_context(|| format!("{}: missing `bits=N` header line", path.display()))?;
    let header = std::str::from_utf8(&raw[..nl])
        .ok()
        .and_then(|h| h.trim().strip_prefix("bits="))
        .with_context(|| format!("{}: header line must be `bits=N`", path.display()))?;
    let bits: u64 = header
        .parse()
        .with_context(|| format!("{}: bad bit count {header:?}", path.display()))?;
    let body = raw[nl + 1..].to_vec();
    let need = bits.div_ceil(8);
    if body.len() as u64 != need {
        bail!(
            "{}: {bits} bits require {need} payload bytes, found {}",
            path.display(),
            body.len()
        );
    }
    Ok((body, bits))
}

/// Writes a payload file. `bits` must fit in `data`, using at most one
/// partially filled trailing byte.
pub fn write_payload(path: &Path, data: &[u8], bits: u64) -> Result<()> {
    let need = bits.div_ceil(8);
    if data.len() as u64 != need {
        bail!(
            "payload of {bits} bits requires {need} bytes, caller passed {}",
            data.len()
        );
    }
    let mut out = format!("bits={bits}\n").into_bytes();
    out.extend_from_slice(data);
    fs::write(path, out).with_context(|| format!("writing payload file {}", path.display()))
}

/// Reads a `rank<TAB>word<TAB>pos` frequency list.
pub fn read_wordlist(path: &Path) -> Result<Vec<WordEntry>> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading word list {}", path.display()))?;
    parse_word_list(&text).with_context(|| format!("parsing word list {}", path.display()))
}

/// Reads and structurally validates a codebook table.
pub fn read_codebook(path: &Path) -> Result<Codebook> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading codebook {}", path.display()))?;
    Codebook::from_text(&text).with_context(|| format!("parsing codebook {}", path.display()))
}

/// Reads a codebook and confirms its fingerprint was produced by `key`.
pub fn read_codebook_for_key(path: &Path, key: ChannelKey) -> Result<Codebook> {
    let book = read_codebook(path)?;
    book.verify_key(key)
        .with_context(|| format!("codebook {} does not match the given key", path.display()))?;
    Ok(book)
}

pub fn write_codebook(path: &Path, book: &Codebook) -> Result<()> {
    fs::write(path, book.to_text())
        .with_context(|| format!("writing codebook {}", path.display()))
}

/// Reads a line-delimited JSON trace.
pub fn read_trace(path: &Path) -> Result<Vec<TraceRecord>> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading trace {}", path.display()))?;
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: TraceRecord = serde_json::from_str(line)
            .with_context(|| format!("{} line {}: bad trace record", path.display(), idx + 1))?;
        out.push(rec);
    }
    Ok(out)
}

/// Writes a trace as line-delimited JSON.
pub fn write_trace(path: &Path, records: &[TraceRecord]) -> Result<()> {
    let mut out = String::new();
    for rec in records {
        out.push_str(&serde_json::to_string(rec).context("serializing trace record")?);
        out.push('\n');
    }
    fs::write(path, out).with_context(|| format!("writing trace {}", path.display()))
}

/// Reads a `key = value` simulation config over the built-in defaults.
pub fn read_config(path: &Path) -> Result<SimConfig> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    SimConfig::parse(&text).with_context(|| format!("parsing config {}", path.display()))
}

/// Parses a channel key from decimal or `0x`-prefixed hex.
pub fn parse_key(s: &str) -> Result<ChannelKey> {
    let parsed = if let Some(hex) = s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        u64::from_str_radix(hex, 16)
    } else {
        s.parse()
    };
    parsed
        .map(ChannelKey)
        .with_context(|| format!("bad key {s:?}: expected decimal or 0x-prefixed hex"))
}

/// Parses a digest algorithm name.
pub fn parse_digest(s: &str) -> Result<DigestAlg> {
    match s {
        "sha1" => Ok(DigestAlg::Sha1),
        "sha256" => Ok(DigestAlg::Sha256),
        other => bail!("bad digest {other:?}: expected sha1 or sha256"),
    }
}
