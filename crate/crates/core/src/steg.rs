//! Session identifiers, SYN option rewriting, and steganographic frames.
//!
//! Registration: the receiver-side shim derives a 16-bit session identifier
//! (SSI) from the SYN's initial sequence number, the channel key, and the
//! original window-scale value, then plants it in the low bits of a
//! timestamp option. The sender-side shim recovers the original option
//! layout by brute-forcing the one unknown byte.
//!
//! Data transport: frames ride in suggestion lists as appended codebook
//! words — ten 10-bit payload chunks plus a 20-bit sequence number per data
//! list, giving 100 hidden bits per list.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use rand::RngCore;

use crate::codebook::{Codebook, ChannelKey, CodebookError};
use crate::digest::DigestAlg;
use crate::wire::{SuggestionList, WireError, MAX_ROWS};

/// 16-bit steganographic session identifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Ssi(pub u16);

impl fmt::Display for Ssi {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04x}", self.0)
    }
}

/// Window-scale value that stands for "option absent".
pub const OWS_ABSENT: u8 = 15;
/// Emitted WS value reserved for future use; never produced or accepted.
pub const RESERVED_WS: u8 = 3;
/// Payload bits carried by one data frame.
pub const FRAME_BITS: u32 = 100;
/// Largest sequence number a data frame can carry (20 bits, zero reserved).
pub const MAX_SEQ: u32 = (1 << 20) - 1;

/// Original SYN option layout, as seen from the client.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WsCase {
    /// Neither window scale nor timestamps present.
    AbsentBoth,
    /// Window scale present with the given value, no timestamps.
    WsOnly(u8),
    /// Both options present.
    WsAndTs(u8),
}

impl WsCase {
    /// The oWS byte hashed into the SSI: the original scale, or 15 when the
    /// option was absent.
    pub fn ows(self) -> u8 {
        match self {
            WsCase::AbsentBoth => OWS_ABSENT,
            WsCase::WsOnly(v) | WsCase::WsAndTs(v) => v,
        }
    }
}

/// What the receiver-side shim does to the SYN's timestamp option.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TsAction {
    /// No timestamps were present; add one carrying the SSI.
    AddTs,
    /// Timestamps were present; overwrite tsval with the SSI carrier and
    /// leave tsecr untouched.
    RewriteTsval,
}

/// Emitted window-scale value and timestamp action for an original layout.
///
/// The emitted value encodes which case the sender-side shim must undo:
///
/// | original          | emitted WS | timestamp action |
/// |-------------------|-----------|-------------------|
/// | absent, no TS     | 1         | add               |
/// | WS only           | 2         | add               |
/// | WS and TS         | 6         | rewrite tsval     |
///
/// Value 3 is reserved and never emitted.
pub fn choose_ws(original: WsCase) -> (u8, TsAction) {
    match original {
        WsCase::AbsentBoth => (1, TsAction::AddTs),
        WsCase::WsOnly(_) => (2, TsAction::AddTs),
        WsCase::WsAndTs(_) => (6, TsAction::RewriteTsval),
    }
}

/// Computes the session identifier: the first two digest bytes, big-endian,
/// over the 13-byte message `isn (4, BE) || key (8, BE) || ows (1)`.
pub fn compute_ssi(alg: DigestAlg, isn: u32, key: ChannelKey, ows: u8) -> Ssi {
    debug_assert!(ows <= OWS_ABSENT);
    let mut msg = [0u8; 13];
    msg[..4].copy_from_slice(&isn.to_be_bytes());
    msg[4..12].copy_from_slice(&key.0.to_be_bytes());
    msg[12] = ows;
    let d = alg.digest(&msg);
    Ssi(u16::from_be_bytes([d[0], d[1]]))
}

/// Plants the SSI in the low 16 bits of a timestamp value; the high 16
/// bits are drawn fresh so repeated registrations do not repeat tsvals.
pub fn embed_ssi_in_ts(ssi: Ssi, rng: &mut impl RngCore) -> u32 {
    ((rng.next_u32() & 0xFFFF_0000) as u32) | ssi.0 as u32
}

/// Reads the SSI back out of a timestamp value.
pub fn extract_ssi_from_ts(tsval: u32) -> Ssi {
    Ssi((tsval & 0xFFFF) as u16)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RecoverError {
    /// No oWS candidate both matches the SSI and is consistent with the
    /// emitted window-scale value.
    NoMatch,
    /// Two or more candidates match; the original layout cannot be pinned
    /// down. Treated exactly like `NoMatch` by callers: pass through.
    AmbiguousMatch,
}

impl fmt::Display for RecoverError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RecoverError::NoMatch => write!(f, "no oWS candidate matches the SSI"),
            RecoverError::AmbiguousMatch => write!(f, "multiple oWS candidates match the SSI"),
        }
    }
}

impl core::error::Error for RecoverError {}

/// Inverts [`choose_ws`] + [`embed_ssi_in_ts`]: given the emitted
/// window-scale value and the SSI-bearing tsval of an incoming SYN, finds
/// the unique original option layout by trying all sixteen oWS values.
pub fn recover_original(
    alg: DigestAlg,
    emitted_ws: u8,
    tsval: u32,
    isn: u32,
    key: ChannelKey,
) -> Result<WsCase, RecoverError> {
    let ssi = extract_ssi_from_ts(tsval);
    let candidates: &[u8] = match emitted_ws {
        1 => &[OWS_ABSENT],
        2 | 6 => &[0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14],
        _ => return Err(RecoverError::NoMatch),
    };
    let mut found = None;
    for &ows in candidates {
        if compute_ssi(alg, isn, key, ows) == ssi {
            if found.is_some() {
                return Err(RecoverError::AmbiguousMatch);
            }
            found = Some(ows);
        }
    }
    let ows = found.ok_or(RecoverError::NoMatch)?;
    Ok(match emitted_ws {
        1 => WsCase::AbsentBoth,
        2 => WsCase::WsOnly(ows),
        _ => WsCase::WsAndTs(ows),
    })
}

// ----- frames -----

/// One steganographic message carried by a suggestion list.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StegFrame {
    /// Confirms registration: the session identifier, encoded twice.
    RegistrationConfirm { ssi: Ssi },
    /// 100 payload bits plus a 20-bit sequence number in `1..=MAX_SEQ`.
    /// The payload occupies the low 100 bits of `payload`, first hidden bit
    /// at bit position 99.
    Data { seq: u32, payload: u128 },
    /// Data-shaped frame with sequence number zero: announces that the
    /// transfer is complete and a close frame follows. Carries no payload.
    EndOfData,
    /// Final frame: repeats the native SSI and says how many bits of the
    /// last data frame are meaningful (1..=100).
    Close { native_ssi: Ssi, last_bits: u8 },
}

/// What kind of frame the connection state leads the receiver to expect.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExpectedFrame {
    /// Pending registration; expect a confirmation repeating this SSI.
    Confirm { ssi: Ssi },
    /// Registered; expect a data frame (or the end-of-data signal).
    Data,
    /// End-of-data seen; expect a close frame carrying this native SSI.
    Close { native_ssi: Ssi },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum FrameError {
    /// The frame's fields violate their domains, or the list cannot host
    /// an embedding.
    FrameInvalid(String),
    /// The list does not carry a frame of the expected kind.
    FormatMismatch,
    /// Both SSI copies decoded but neither equals the expected value.
    SsiMismatch,
}

impl fmt::Display for FrameError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FrameError::FrameInvalid(reason) => write!(f, "invalid frame: {reason}"),
            FrameError::FormatMismatch => write!(f, "list does not carry the expected frame"),
            FrameError::SsiMismatch => write!(f, "decoded session identifier does not match"),
        }
    }
}

impl core::error::Error for FrameError {}

impl From<WireError> for FrameError {
    fn from(_: WireError) -> Self {
        FrameError::FormatMismatch
    }
}

impl From<CodebookError> for FrameError {
    fn from(_: CodebookError) -> Self {
        FrameError::FormatMismatch
    }
}

fn invalid(reason: &str) -> FrameError {
    FrameError::FrameInvalid(reason.to_string())
}

/// The 16-bit SSI zero-padded to 20 bits (four zero low bits) and split
/// into two 10-bit chunks, high chunk first.
fn ssi_chunks(ssi: Ssi) -> (u16, u16) {
    let padded = (ssi.0 as u32) << 4;
    (((padded >> 10) & 0x3FF) as u16, (padded & 0x3FF) as u16)
}

fn ssi_from_chunks(hi: u16, lo: u16) -> Option<Ssi> {
    let padded = ((hi as u32) << 10) | lo as u32;
    if padded & 0xF != 0 {
        return None; // the four padding bits must be zero
    }
    Some(Ssi((padded >> 4) as u16))
}

/// The 10-bit chunk of a data payload destined for row `row` (0-based);
/// row order is bit order, most significant chunk first.
fn payload_chunk(payload: u128, row: usize) -> u16 {
    ((payload >> (90 - 10 * row)) & 0x3FF) as u16
}

fn seq_chunks(seq: u32) -> (u16, u16) {
    (((seq >> 10) & 0x3FF) as u16, (seq & 0x3FF) as u16)
}

/// Embeds a frame into a suggestion list.
///
/// The list is first padded to exactly ten rows with bare-query fakes, then
/// words are appended per variant:
///
/// - confirmation / close: SSI chunk words on rows 1-4 (two independently
///   drawn copies); close adds a fifth word for `last_bits` on row 5
/// - data: one payload chunk word on every row, plus sequence words after
///   the payload word on rows 2 and 5 (high then low 10 bits)
pub fn encode_frame(
    frame: &StegFrame,
    list: &SuggestionList,
    cb: &Codebook,
    rng: &mut impl RngCore,
) -> Result<SuggestionList, FrameError> {
    if list.rows().is_empty() {
        return Err(invalid("cannot embed into a list with no rows"));
    }
    if list.rows().len() > MAX_ROWS {
        return Err(invalid("list has more rows than the wire model allows"));
    }
    let mut out = list.clone();
    out.pad_to(MAX_ROWS);

    match *frame {
        StegFrame::RegistrationConfirm { ssi } => {
            let (hi, lo) = ssi_chunks(ssi);
            for (row, value) in [(0, hi), (1, lo), (2, hi), (3, lo)] {
                put(&mut out, row, value, cb, rng)?;
            }
        }
        StegFrame::Data { seq, payload } => {
            if seq == 0 || seq > MAX_SEQ {
                return Err(invalid("data sequence number out of range"));
            }
            if payload >> FRAME_BITS != 0 {
                return Err(invalid("payload wider than 100 bits"));
            }
            encode_data_shape(&mut out, seq, payload, cb, rng)?;
        }
        StegFrame::EndOfData => {
            encode_data_shape(&mut out, 0, 0, cb, rng)?;
        }
        StegFrame::Close {
            native_ssi,
            last_bits,
        } => {
            if last_bits == 0 || last_bits as u32 > FRAME_BITS {
                return Err(invalid("last_bits outside 1..=100"));
            }
            let (hi, lo) = ssi_chunks(native_ssi);
            for (row, value) in [(0, hi), (1, lo), (2, hi), (3, lo)] {
                put(&mut out, row, value, cb, rng)?;
            }
            put(&mut out, 4, last_bits as u16, cb, rng)?;
        }
    }
    Ok(out)
}

fn put(
    out: &mut SuggestionList,
    row: usize,
    value: u16,
    cb: &Codebook,
    rng: &mut impl RngCore,
) -> Result<(), FrameError> {
    let word = cb.encode_chunk(value, rng).to_string();
    out.append_to_row(row, &word)
        .map_err(|_| invalid("row rejected appended word"))
}

fn encode_data_shape(
    out: &mut SuggestionList,
    seq: u32,
    payload: u128,
    cb: &Codebook,
    rng: &mut impl RngCore,
) -> Result<(), FrameError> {
    let (seq_hi, seq_lo) = seq_chunks(seq);
    for row in 0..MAX_ROWS {
        put(out, row, payload_chunk(payload, row), cb, rng)?;
    }
    // Sequence words ride after the payload word on rows 2 and 5.
    for (row, value) in [(1, seq_hi), (4, seq_lo)] {
        put(out, row, value, cb, rng)?;
    }
    Ok(())
}

/// Extracts a frame from a suggestion list and returns it together with the
/// cleaned list, byte-identical to the pre-embedding original.
///
/// Words are stripped by position per the expected format, never by
/// dictionary membership: original suggestions may legitimately end in
/// codebook words. Any shape violation — missing rows, a non-codebook word
/// at a steg position, nonzero SSI padding bits — yields `FormatMismatch`
/// and the caller forwards the list untouched.
pub fn decode_frame(
    list: &SuggestionList,
    cb: &Codebook,
    expected: ExpectedFrame,
) -> Result<(StegFrame, SuggestionList), FrameError> {
    let mut out = list.clone();
    let strip = |out: &mut SuggestionList, row: usize, n: usize| -> Result<Vec<u16>, FrameError> {
        let words = out.strip_from_row(row, n)?;
        let mut values = Vec::with_capacity(n);
        for w in &words {
            values.push(cb.decode_word(w)?.0);
        }
        Ok(values)
    };

    let frame = match expected {
        ExpectedFrame::Confirm { ssi } => {
            if out.rows().len() < 4 {
                return Err(FrameError::FormatMismatch);
            }
            let v: Vec<u16> = (0..4)
                .map(|row| strip(&mut out, row, 1).map(|mut w| w.remove(0)))
                .collect::<Result<_, _>>()?;
            let copy_a = ssi_from_chunks(v[0], v[1]).ok_or(FrameError::FormatMismatch)?;
            let copy_b = ssi_from_chunks(v[2], v[3]).ok_or(FrameError::FormatMismatch)?;
            if copy_a != ssi && copy_b != ssi {
                return Err(FrameError::SsiMismatch);
            }
            StegFrame::RegistrationConfirm { ssi }
        }
        ExpectedFrame::Data => {
            if out.rows().len() != MAX_ROWS {
                return Err(FrameError::FormatMismatch);
            }
            let mut payload: u128 = 0;
            let mut seq_hi = 0u16;
            let mut seq_lo = 0u16;
            for row in 0..MAX_ROWS {
                let n = if row == 1 || row == 4 { 2 } else { 1 };
                let values = strip(&mut out, row, n)?;
                payload |= (values[0] as u128) << (90 - 10 * row);
                if row == 1 {
                    seq_hi = values[1];
                }
                if row == 4 {
                    seq_lo = values[1];
                }
            }
            let seq = ((seq_hi as u32) << 10) | seq_lo as u32;
            if seq == 0 {
                StegFrame::EndOfData
            } else {
                StegFrame::Data { seq, payload }
            }
        }
        ExpectedFrame::Close { native_ssi } => {
            if out.rows().len() < 5 {
                return Err(FrameError::FormatMismatch);
            }
            let v: Vec<u16> = (0..4)
                .map(|row| strip(&mut out, row, 1).map(|mut w| w.remove(0)))
                .collect::<Result<_, _>>()?;
            let last = strip(&mut out, 4, 1)?[0];
            let copy_a = ssi_from_chunks(v[0], v[1]).ok_or(FrameError::FormatMismatch)?;
            let copy_b = ssi_from_chunks(v[2], v[3]).ok_or(FrameError::FormatMismatch)?;
            if copy_a != native_ssi && copy_b != native_ssi {
                return Err(FrameError::SsiMismatch);
            }
            if last == 0 || last as u32 > FRAME_BITS {
                return Err(FrameError::FormatMismatch);
            }
            StegFrame::Close {
                native_ssi,
                last_bits: last as u8,
            }
        }
    };

    out.remove_trailing_bare_rows();
    Ok((frame, out))
}
