//! The two cooperating middleboxes that carry the hidden channel.
//!
//! [`SrShim`] sits on the client side of the path. It marks outbound SYN
//! segments bound for known suggestion servers by rewriting their
//! window-scale and timestamp options, waits for a confirmation frame, and
//! afterwards strips appended codebook words from suggestion responses so
//! the client observes exactly the traffic the server produced.
//!
//! [`SsShim`] sits on the server side. It recognizes marked SYN segments,
//! restores the original options before the server sees them, and appends
//! codebook words to suggestion responses: first a registration
//! confirmation per connection, then data frames, an end marker, and a
//! final close frame.
//!
//! Everything in between is bookkeeping to keep both endpoints oblivious:
//! sequence and acknowledgment numbers are shifted to hide payload growth,
//! rewritten timestamp clocks advance consistently, and echoed timestamps
//! are mapped back to the values each endpoint actually emitted. Whenever
//! any step fails, a shim degrades to forwarding the segment untouched.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use rand::RngCore;
use serde::Serialize;

use crate::codebook::{ChannelKey, Codebook};
use crate::digest::DigestAlg;
use crate::rng::SplitMix64;
use crate::steg::{
    choose_ws, compute_ssi, decode_frame, embed_ssi_in_ts, encode_frame, extract_ssi_from_ts,
    recover_original, ExpectedFrame, RecoverError, Ssi, StegFrame, TsAction, WsCase, FRAME_BITS,
    MAX_SEQ,
};
use crate::wire::{
    build_response, parse_response, ConnId, Direction, DnsRecord, Segment, TsOption,
};

/// Capacity of one connection's timestamp echo map; the oldest entry is
/// evicted first once the map is full.
pub const TS_MAP_CAPACITY: usize = 4096;

/// Distinct nonzero data sequence numbers before the counter wraps.
pub const SEQ_CYCLE: u64 = MAX_SEQ as u64;

/// How far ahead of the next expected frame the reassembler will buffer.
const REASM_WINDOW: u64 = SEQ_CYCLE / 2;

// ----- errors -----

/// Failures surfaced by the frame reassembler.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReasmError {
    /// A frame gap persisted longer than the configured timeout.
    GapTimeout { next_missing: u64 },
    /// A frame mapped implausibly far beyond the next expected index.
    WindowExceeded { linear: u64 },
    /// The sequence number is outside `1..=MAX_SEQ`.
    SeqOutOfRange { seq: u32 },
}

impl fmt::Display for ReasmError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ReasmError::GapTimeout { next_missing } => {
                write!(f, "gave up waiting for frame {next_missing}")
            }
            ReasmError::WindowExceeded { linear } => {
                write!(f, "frame index {linear} is beyond the reassembly window")
            }
            ReasmError::SeqOutOfRange { seq } => {
                write!(f, "data sequence number {seq} out of range")
            }
        }
    }
}

impl core::error::Error for ReasmError {}

// ----- observability -----

/// Frame kinds as reported in [`ShimEvent`] entries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameKind {
    Confirm,
    Data,
    End,
    Close,
}

fn frame_kind(frame: &StegFrame) -> (FrameKind, Option<u32>) {
    match *frame {
        StegFrame::RegistrationConfirm { .. } => (FrameKind::Confirm, None),
        StegFrame::Data { seq, .. } => (FrameKind::Data, Some(seq)),
        StegFrame::EndOfData => (FrameKind::End, None),
        StegFrame::Close { .. } => (FrameKind::Close, None),
    }
}

/// One entry in a shim's event log. Events exist for observability and
/// post-run audits; the data path never depends on them.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum ShimEvent {
    SynMarked {
        at_us: u64,
        conn: String,
        ssi: u16,
        emitted_ws: u8,
    },
    SynRecovered {
        at_us: u64,
        conn: String,
        ssi: u16,
        restored_ws: Option<u8>,
    },
    SynAmbiguous {
        at_us: u64,
        conn: String,
    },
    Registered {
        at_us: u64,
        conn: String,
        ssi: u16,
        native: bool,
    },
    RegistrationExpired {
        at_us: u64,
        conn: String,
    },
    FrameSent {
        at_us: u64,
        conn: String,
        frame: FrameKind,
        seq: Option<u32>,
    },
    FrameReceived {
        at_us: u64,
        conn: String,
        frame: FrameKind,
        seq: Option<u32>,
    },
    GapTimeout {
        at_us: u64,
        missing: u64,
    },
    ChannelClosed {
        at_us: u64,
        complete: bool,
        bits: u64,
    },
}

// ----- shared configuration -----

/// Settings common to both shims. The same key, digest, and domain list
/// must be deployed on both sides for the channel to form.
#[derive(Clone, Debug)]
pub struct ShimConfig {
    pub digest: DigestAlg,
    pub key: ChannelKey,
    /// DNS names whose resolved addresses are treated as suggestion servers.
    pub domains: Vec<String>,
    /// How long the client-side shim waits for a confirmation frame before
    /// abandoning a marked connection.
    pub registration_timeout_us: u64,
    /// How long the reassembler tolerates a missing frame.
    pub gap_timeout_us: u64,
}

impl ShimConfig {
    pub fn new(key: ChannelKey, domains: Vec<String>) -> Self {
        ShimConfig {
            digest: DigestAlg::Sha1,
            key,
            domains,
            registration_timeout_us: 5_000_000,
            gap_timeout_us: 60_000_000,
        }
    }
}

// ----- suggestion server list -----

/// Addresses currently believed to serve autocomplete suggestions, learned
/// from DNS answers for the configured domains. Entries expire with their
/// TTL; re-observation can only extend a deadline, never shorten it.
#[derive(Clone, Debug)]
pub struct ServerList {
    domains: Vec<String>,
    entries: BTreeMap<String, u64>,
}

impl ServerList {
    pub fn new(domains: Vec<String>) -> Self {
        ServerList {
            domains,
            entries: BTreeMap::new(),
        }
    }

    pub fn observe(&mut self, rec: &DnsRecord, now_us: u64) {
        if !self.domains.iter().any(|d| d == &rec.name) {
            return;
        }
        let expiry = now_us.saturating_add(rec.ttl_s.saturating_mul(1_000_000));
        let slot = self.entries.entry(rec.address.clone()).or_insert(0);
        *slot = (*slot).max(expiry);
    }

    pub fn is_listed(&self, address: &str, now_us: u64) -> bool {
        self.entries.get(address).is_some_and(|&exp| now_us < exp)
    }

    pub fn tracked(&self) -> usize {
        self.entries.len()
    }
}

// ----- timestamp rewriting -----

/// Maps one timestamp clock onto another while preserving increments.
///
/// Seeded with the first observed input value and the first emitted output
/// value; every later input advances the output by the same wrapped delta,
/// so the downstream peer sees a plausible, monotone clock even though its
/// origin was replaced.
#[derive(Clone, Copy, Debug)]
pub struct TsRewrite {
    last_in: u32,
    last_out: u32,
}

impl TsRewrite {
    pub fn new(first_in: u32, first_out: u32) -> Self {
        TsRewrite {
            last_in: first_in,
            last_out: first_out,
        }
    }

    /// Feeds the next input clock value and returns the rewritten one.
    pub fn advance(&mut self, tsval: u32) -> u32 {
        let delta = tsval.wrapping_sub(self.last_in);
        self.last_in = tsval;
        self.last_out = self.last_out.wrapping_add(delta);
        self.last_out
    }

    pub fn last_out(&self) -> u32 {
        self.last_out
    }
}

/// Bounded map from emitted timestamp values back to the originals, used
/// to fix up echoes on the return path. When the capacity is exceeded the
/// least recently used entry is evicted; both inserts and successful
/// lookups count as use.
#[derive(Clone, Debug, Default)]
pub struct TsEchoMap {
    map: BTreeMap<u32, (u32, u64)>,
    recency: BTreeMap<u64, u32>,
    next_stamp: u64,
}

impl TsEchoMap {
    fn stamp(&mut self) -> u64 {
        let s = self.next_stamp;
        self.next_stamp += 1;
        s
    }

    pub fn insert(&mut self, emitted: u32, original: u32) {
        let stamp = self.stamp();
        if let Some((_, prev_stamp)) = self.map.insert(emitted, (original, stamp)) {
            self.recency.remove(&prev_stamp);
        }
        self.recency.insert(stamp, emitted);
        if self.map.len() > TS_MAP_CAPACITY {
            if let Some((&oldest, &key)) = self.recency.iter().next() {
                self.recency.remove(&oldest);
                self.map.remove(&key);
            }
        }
    }

    pub fn lookup(&mut self, emitted: u32) -> Option<u32> {
        let stamp = self.stamp();
        let entry = self.map.get_mut(&emitted)?;
        let original = entry.0;
        self.recency.remove(&entry.1);
        entry.1 = stamp;
        self.recency.insert(stamp, emitted);
        Some(original)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Per-connection timestamp duties: the forward clock rewrite plus the
/// echo map for the reverse path.
#[derive(Clone, Debug)]
struct TsState {
    clock: TsRewrite,
    echo: TsEchoMap,
}

// ----- length offset ledger -----

/// Cumulative count of payload bytes added (positive) or removed
/// (negative) on a connection's server-to-client stream. Both shims keep
/// one per connection and use it to shift sequence numbers toward the
/// client and acknowledgment numbers toward the server, so each endpoint
/// sees numbering consistent with the bytes it actually handled.
#[derive(Clone, Copy, Debug, Default)]
pub struct OffsetLedger {
    cum: i64,
}

impl OffsetLedger {
    pub fn offset(&self) -> i64 {
        self.cum
    }

    pub fn record(&mut self, delta: i64) {
        self.cum += delta;
    }
}

/// Shifts a 32-bit sequence or acknowledgment number by a signed byte
/// count with wraparound.
pub fn shift_seq(value: u32, delta: i64) -> u32 {
    value.wrapping_add(delta as u32)
}

// ----- bit packing -----

/// Reads `n` bits (at most 128) from `data` starting at bit offset
/// `start`, most-significant-bit first. Bits beyond the end of the buffer
/// read as zero. The first bit read lands in the highest position of the
/// returned value.
pub(crate) fn read_bits(data: &[u8], start: u64, n: u32) -> u128 {
    debug_assert!(n <= 128);
    let mut out = 0u128;
    for i in 0..n as u64 {
        let idx = start + i;
        let bit = data
            .get((idx / 8) as usize)
            .map_or(0, |b| (b >> (7 - (idx % 8) as u8)) & 1);
        out = (out << 1) | bit as u128;
    }
    out
}

/// Accumulates a bit stream most-significant-bit first.
#[derive(Clone, Debug, Default)]
pub(crate) struct BitWriter {
    bytes: Vec<u8>,
    bit_len: u64,
}

impl BitWriter {
    /// Appends the low `n` bits of `value`, highest first.
    pub(crate) fn push_bits(&mut self, value: u128, n: u32) {
        debug_assert!(n <= 128);
        for i in (0..n).rev() {
            let slot = (self.bit_len % 8) as u8;
            if slot == 0 {
                self.bytes.push(0);
            }
            if (value >> i) & 1 == 1 {
                *self.bytes.last_mut().expect("pushed above") |= 1 << (7 - slot);
            }
            self.bit_len += 1;
        }
    }

    pub(crate) fn into_parts(self) -> (Vec<u8>, u64) {
        (self.bytes, self.bit_len)
    }
}

/// The data sequence counter skips zero: after the maximum it wraps back
/// to one.
pub fn next_data_seq(current: u32) -> u32 {
    if current >= MAX_SEQ {
        1
    } else {
        current + 1
    }
}

// ----- frame reassembler -----

/// Maps a frame's 20-bit sequence number onto the unbounded linear index
/// nearest the next expected one, resolving wraparound.
fn nearest_epoch(base: u64, expected: u64) -> u64 {
    let lo = expected.saturating_sub(SEQ_CYCLE / 2);
    let epochs = (lo.saturating_sub(base) + SEQ_CYCLE - 1) / SEQ_CYCLE;
    base + epochs * SEQ_CYCLE
}

/// Reorders data frames into a contiguous bit stream.
///
/// Frames may arrive out of order across connections; each is mapped to a
/// linear index (resolving sequence wraparound), buffered while gaps
/// remain, and drained into the output as the contiguous prefix grows. The
/// most recently drained frame is held back until a successor arrives or
/// the close frame fixes how many of its bits are valid.
#[derive(Clone, Debug)]
pub struct Reassembler {
    pending: BTreeMap<u64, u128>,
    tail: Option<u128>,
    collected: BitWriter,
    next_linear: u64,
    start: u64,
    end_seen: bool,
    last_bits: Option<u8>,
    gap_since: Option<u64>,
    gap_timeout_us: u64,
}

impl Reassembler {
    pub fn new(gap_timeout_us: u64) -> Self {
        Reassembler::with_start(gap_timeout_us, 0)
    }

    /// Starts counting from a nonzero frame index, as when resuming a
    /// stream whose earlier frames were already consumed. The assembled
    /// output covers frames from `start` onward.
    pub fn with_start(gap_timeout_us: u64, start: u64) -> Self {
        Reassembler {
            pending: BTreeMap::new(),
            tail: None,
            collected: BitWriter::default(),
            next_linear: start,
            start,
            end_seen: false,
            last_bits: None,
            gap_since: None,
            gap_timeout_us,
        }
    }

    /// Accepts one data frame. Duplicates are ignored; frames implausibly
    /// far ahead of the expected index are rejected.
    pub fn on_data(&mut self, seq: u32, payload: u128, now_us: u64) -> Result<(), ReasmError> {
        if seq == 0 || seq > MAX_SEQ {
            return Err(ReasmError::SeqOutOfRange { seq });
        }
        let linear = nearest_epoch((seq - 1) as u64, self.next_linear);
        if linear >= self.next_linear + REASM_WINDOW {
            return Err(ReasmError::WindowExceeded { linear });
        }
        if linear < self.next_linear || self.pending.contains_key(&linear) {
            return Ok(());
        }
        self.pending.insert(linear, payload);
        self.drain(now_us);
        Ok(())
    }

    fn drain(&mut self, now_us: u64) {
        while let Some(payload) = self.pending.remove(&self.next_linear) {
            if let Some(prev) = self.tail.replace(payload) {
                self.collected.push_bits(prev, FRAME_BITS);
            }
            self.next_linear += 1;
        }
        self.gap_since = if self.pending.is_empty() {
            None
        } else {
            self.gap_since.or(Some(now_us))
        };
    }

    pub fn on_end(&mut self) {
        self.end_seen = true;
    }

    pub fn on_close(&mut self, last_bits: u8) {
        self.last_bits = Some(last_bits);
    }

    /// Reports a gap that has persisted beyond the timeout.
    pub fn check_gap(&self, now_us: u64) -> Result<(), ReasmError> {
        match self.gap_since {
            Some(since) if now_us.saturating_sub(since) > self.gap_timeout_us => {
                Err(ReasmError::GapTimeout {
                    next_missing: self.next_linear,
                })
            }
            _ => Ok(()),
        }
    }

    /// Frames consumed into the contiguous prefix so far.
    pub fn frames_received(&self) -> u64 {
        self.next_linear - self.start
    }

    pub fn is_complete(&self) -> bool {
        self.end_seen && self.last_bits.is_some() && self.pending.is_empty()
    }

    /// The reassembled bit stream, once the end marker and close frame
    /// have arrived and no gaps remain. The final frame contributes only
    /// the number of bits the close frame declared valid.
    pub fn assembled(&self) -> Option<(Vec<u8>, u64)> {
        if !self.is_complete() {
            return None;
        }
        Some(self.partial())
    }

    /// The contiguous prefix decoded so far, whether or not the stream
    /// completed; useful after a gap timeout. Until the close frame pins
    /// the valid width of the final frame, the held-back frame contributes
    /// all of its bits.
    pub fn partial(&self) -> (Vec<u8>, u64) {
        let mut writer = self.collected.clone();
        if let Some(tail) = self.tail {
            let n = u32::from(self.last_bits.unwrap_or(FRAME_BITS as u8));
            writer.push_bits(tail >> (FRAME_BITS - n), n);
        }
        writer.into_parts()
    }
}

// ----- client-side shim -----

/// Lifecycle of the receiving end of the channel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelPhase {
    /// Accepting registrations and data frames.
    Transfer,
    /// The end marker arrived; only the close frame is outstanding.
    AwaitingClose,
    /// The close frame arrived or the channel gave up; new connections
    /// pass through unmarked.
    Closed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum SrConnState {
    /// SYN marked; waiting for the confirmation frame.
    Pending { deadline_us: u64 },
    /// Confirmation received; responses may carry frames.
    Registered,
    /// Registration expired. Option and numbering duties continue for the
    /// connection's lifetime, but no frames are expected.
    Done,
}

struct SrConn {
    ssi: Ssi,
    case: WsCase,
    state: SrConnState,
    ts: Option<TsState>,
    ledger: OffsetLedger,
}

/// The middlebox on the client side of the path.
pub struct SrShim {
    digest: DigestAlg,
    key: ChannelKey,
    codebook: Codebook,
    servers: ServerList,
    registration_timeout_us: u64,
    conns: BTreeMap<ConnId, SrConn>,
    rng: SplitMix64,
    phase: ChannelPhase,
    native: Option<(ConnId, Ssi)>,
    reasm: Reassembler,
    events: Vec<ShimEvent>,
}

impl SrShim {
    pub fn new(cfg: &ShimConfig, codebook: Codebook, rng_seed: u64) -> Self {
        SrShim {
            digest: cfg.digest,
            key: cfg.key,
            codebook,
            servers: ServerList::new(cfg.domains.clone()),
            registration_timeout_us: cfg.registration_timeout_us,
            conns: BTreeMap::new(),
            rng: SplitMix64::new(rng_seed),
            phase: ChannelPhase::Transfer,
            native: None,
            reasm: Reassembler::new(cfg.gap_timeout_us),
            events: Vec::new(),
        }
    }

    pub fn on_dns(&mut self, rec: &DnsRecord, now_us: u64) {
        self.servers.observe(rec, now_us);
    }

    /// Processes one segment in place as it crosses the shim.
    pub fn on_segment(&mut self, seg: &mut Segment, now_us: u64) {
        self.expire_pending(&seg.conn, now_us);
        match seg.dir {
            Direction::ToServer => self.outbound(seg, now_us),
            Direction::ToClient => self.inbound(seg, now_us),
        }
    }

    pub fn phase(&self) -> ChannelPhase {
        self.phase
    }

    /// Identifier of the first registered connection, which names the
    /// channel in the close frame.
    pub fn native_ssi(&self) -> Option<Ssi> {
        self.native.as_ref().map(|(_, ssi)| *ssi)
    }

    pub fn frames_received(&self) -> u64 {
        self.reasm.frames_received()
    }

    /// The recovered bit stream once the channel closed cleanly.
    pub fn recovered(&self) -> Option<(Vec<u8>, u64)> {
        self.reasm.assembled()
    }

    /// Whatever contiguous prefix was recovered, even if the channel never
    /// completed (for example after a gap timeout).
    pub fn partial(&self) -> (Vec<u8>, u64) {
        self.reasm.partial()
    }

    pub fn take_events(&mut self) -> Vec<ShimEvent> {
        core::mem::take(&mut self.events)
    }

    fn expire_pending(&mut self, conn_id: &ConnId, now_us: u64) {
        if let Some(conn) = self.conns.get_mut(conn_id) {
            if let SrConnState::Pending { deadline_us } = conn.state {
                if now_us > deadline_us {
                    conn.state = SrConnState::Done;
                    self.events.push(ShimEvent::RegistrationExpired {
                        at_us: now_us,
                        conn: conn_id.to_string(),
                    });
                }
            }
        }
    }

    fn outbound(&mut self, seg: &mut Segment, now_us: u64) {
        if let Some(conn) = self.conns.get_mut(&seg.conn) {
            // Ongoing duties for a connection marked earlier: shift acks to
            // cover bytes the far shim appended, and keep the rewritten
            // client clock advancing.
            if seg.flags.ack {
                seg.ack = shift_seq(seg.ack, conn.ledger.offset());
            }
            if let (Some(state), Some(ts)) = (conn.ts.as_mut(), seg.ts) {
                let out = state.clock.advance(ts.tsval);
                state.echo.insert(out, ts.tsval);
                seg.set_ts(Some(TsOption {
                    tsval: out,
                    tsecr: ts.tsecr,
                }));
            }
            return;
        }
        if !(seg.flags.syn && seg.is_isn) || self.phase == ChannelPhase::Closed {
            return;
        }
        if !self.servers.is_listed(&seg.conn.server, now_us) {
            return;
        }
        let case = match (seg.ws, seg.ts) {
            (None, None) => WsCase::AbsentBoth,
            (Some(w), None) => WsCase::WsOnly(w),
            (Some(w), Some(_)) => WsCase::WsAndTs(w),
            // A timestamp without window scaling has no table entry; leave
            // the segment alone.
            (None, Some(_)) => return,
        };
        let ssi = compute_ssi(self.digest, seg.seq, self.key, case.ows());
        let (ws_out, action) = choose_ws(case);
        let tsval = embed_ssi_in_ts(ssi, &mut self.rng);
        let ts_state = match action {
            TsAction::AddTs => {
                seg.set_ts(Some(TsOption { tsval, tsecr: 0 }));
                None
            }
            TsAction::RewriteTsval => {
                let orig = seg.ts.expect("rewrite is only chosen when TS is present");
                let mut state = TsState {
                    clock: TsRewrite::new(orig.tsval, tsval),
                    echo: TsEchoMap::default(),
                };
                state.echo.insert(tsval, orig.tsval);
                seg.set_ts(Some(TsOption {
                    tsval,
                    tsecr: orig.tsecr,
                }));
                Some(state)
            }
        };
        seg.set_ws(Some(ws_out));
        self.conns.insert(
            seg.conn.clone(),
            SrConn {
                ssi,
                case,
                state: SrConnState::Pending {
                    deadline_us: now_us + self.registration_timeout_us,
                },
                ts: ts_state,
                ledger: OffsetLedger::default(),
            },
        );
        self.events.push(ShimEvent::SynMarked {
            at_us: now_us,
            conn: seg.conn.to_string(),
            ssi: ssi.0,
            emitted_ws: ws_out,
        });
    }

    fn inbound(&mut self, seg: &mut Segment, now_us: u64) {
        let Some(conn) = self.conns.get_mut(&seg.conn) else {
            return;
        };
        // Between the shims the server-to-client stream is inflated by
        // every byte appended so far; shift numbering back before the
        // client sees it.
        seg.seq = shift_seq(seg.seq, -conn.ledger.offset());
        // Remove or translate options the client never negotiated.
        match conn.case {
            WsCase::AbsentBoth => {
                if seg.ws.is_some() {
                    seg.set_ws(None);
                }
                if seg.ts.is_some() {
                    seg.set_ts(None);
                }
            }
            WsCase::WsOnly(_) => {
                if seg.ts.is_some() {
                    seg.set_ts(None);
                }
            }
            WsCase::WsAndTs(_) => {
                if let (Some(state), Some(ts)) = (conn.ts.as_mut(), seg.ts) {
                    if let Some(orig) = state.echo.lookup(ts.tsecr) {
                        seg.set_ts(Some(TsOption {
                            tsval: ts.tsval,
                            tsecr: orig,
                        }));
                    }
                }
            }
        }
        if self.phase == ChannelPhase::Closed || seg.payload.is_empty() {
            return;
        }
        // Which frames could this response carry? After the end marker the
        // close frame is expected, but a data frame that left the far shim
        // earlier may still be in flight, so both are tried in that order.
        let mut candidates: [Option<ExpectedFrame>; 2] = [None, None];
        match (conn.state, self.phase) {
            (SrConnState::Pending { .. }, _) => {
                candidates[0] = Some(ExpectedFrame::Confirm { ssi: conn.ssi });
            }
            (SrConnState::Registered, ChannelPhase::Transfer) => {
                candidates[0] = Some(ExpectedFrame::Data);
            }
            (SrConnState::Registered, ChannelPhase::AwaitingClose) => {
                if let Some((_, native_ssi)) = self.native {
                    candidates[0] = Some(ExpectedFrame::Close { native_ssi });
                }
                candidates[1] = Some(ExpectedFrame::Data);
            }
            _ => {}
        }
        let Ok(list) = parse_response(&seg.payload) else {
            return;
        };
        let Some((frame, cleaned)) = candidates
            .into_iter()
            .flatten()
            .find_map(|exp| decode_frame(&list, &self.codebook, exp).ok())
        else {
            return;
        };
        // Rebuild the payload without the appended words and account for
        // the removed bytes; the shift applied above used the ledger as it
        // stood before this response.
        let old_total = i64::from(seg.total_length);
        seg.set_payload(build_response(&cleaned));
        conn.ledger.record(old_total - i64::from(seg.total_length));
        let (kind, seq) = frame_kind(&frame);
        self.events.push(ShimEvent::FrameReceived {
            at_us: now_us,
            conn: seg.conn.to_string(),
            frame: kind,
            seq,
        });
        match frame {
            StegFrame::RegistrationConfirm { ssi } => {
                conn.state = SrConnState::Registered;
                let native = self.native.is_none();
                if native {
                    self.native = Some((seg.conn.clone(), ssi));
                }
                self.events.push(ShimEvent::Registered {
                    at_us: now_us,
                    conn: seg.conn.to_string(),
                    ssi: ssi.0,
                    native,
                });
            }
            StegFrame::Data { seq, payload } => {
                if let Err(err) = self.reasm.on_data(seq, payload, now_us) {
                    // The words were stripped either way; a frame the
                    // reassembler cannot place is only logged.
                    self.events.push(ShimEvent::GapTimeout {
                        at_us: now_us,
                        missing: match err {
                            ReasmError::WindowExceeded { linear } => linear,
                            _ => 0,
                        },
                    });
                }
            }
            StegFrame::EndOfData => {
                self.reasm.on_end();
                self.phase = ChannelPhase::AwaitingClose;
            }
            StegFrame::Close { last_bits, .. } => {
                self.reasm.on_close(last_bits);
                self.phase = ChannelPhase::Closed;
                let bits = self.reasm.assembled().map_or(0, |(_, n)| n);
                self.events.push(ShimEvent::ChannelClosed {
                    at_us: now_us,
                    complete: self.reasm.is_complete(),
                    bits,
                });
            }
        }
        if self.phase != ChannelPhase::Closed {
            if let Err(ReasmError::GapTimeout { next_missing }) = self.reasm.check_gap(now_us) {
                self.phase = ChannelPhase::Closed;
                self.events.push(ShimEvent::GapTimeout {
                    at_us: now_us,
                    missing: next_missing,
                });
            }
        }
    }
}

// ----- server-side shim -----

struct SsConn {
    ssi: Ssi,
    #[allow(dead_code)]
    case: WsCase,
    ts: Option<TsState>,
    ledger: OffsetLedger,
    /// Whether the connection participates in the channel; connections
    /// recovered after the close frame went out are restored but unused.
    active: bool,
    confirmed: bool,
}

/// The middlebox on the server side of the path.
pub struct SsShim {
    digest: DigestAlg,
    key: ChannelKey,
    codebook: Codebook,
    servers: ServerList,
    conns: BTreeMap<ConnId, SsConn>,
    rng: SplitMix64,
    data: Vec<u8>,
    bit_len: u64,
    next_bit: u64,
    next_seq: u32,
    last_bits: u8,
    end_sent: bool,
    close_sent: bool,
    native: Option<(ConnId, Ssi)>,
    events: Vec<ShimEvent>,
}

impl SsShim {
    /// Creates the sending shim with the payload to deliver: `bit_len`
    /// bits of `data`, most-significant-bit first.
    pub fn new(
        cfg: &ShimConfig,
        codebook: Codebook,
        data: Vec<u8>,
        bit_len: u64,
        rng_seed: u64,
    ) -> Self {
        assert!(
            bit_len <= data.len() as u64 * 8,
            "bit length exceeds the payload buffer"
        );
        // With nothing to send the shim never opens a channel: connections
        // are restored transparently but no frame is ever embedded.
        let idle = bit_len == 0;
        SsShim {
            digest: cfg.digest,
            key: cfg.key,
            codebook,
            servers: ServerList::new(cfg.domains.clone()),
            conns: BTreeMap::new(),
            rng: SplitMix64::new(rng_seed),
            data,
            bit_len,
            next_bit: 0,
            next_seq: 1,
            last_bits: FRAME_BITS as u8,
            end_sent: idle,
            close_sent: idle,
            native: None,
            events: Vec::new(),
        }
    }

    pub fn on_dns(&mut self, rec: &DnsRecord, now_us: u64) {
        self.servers.observe(rec, now_us);
    }

    /// Processes one segment in place as it crosses the shim.
    pub fn on_segment(&mut self, seg: &mut Segment, now_us: u64) {
        match seg.dir {
            Direction::ToServer => self.outbound(seg, now_us),
            Direction::ToClient => self.inbound(seg, now_us),
        }
    }

    /// Bits handed to the framing layer so far.
    pub fn bits_sent(&self) -> u64 {
        self.next_bit
    }

    /// True once the close frame went out.
    pub fn channel_closed(&self) -> bool {
        self.close_sent
    }

    pub fn take_events(&mut self) -> Vec<ShimEvent> {
        core::mem::take(&mut self.events)
    }

    fn outbound(&mut self, seg: &mut Segment, now_us: u64) {
        if let Some(conn) = self.conns.get_mut(&seg.conn) {
            if seg.flags.ack {
                seg.ack = shift_seq(seg.ack, -conn.ledger.offset());
            }
            if let (Some(state), Some(ts)) = (conn.ts.as_mut(), seg.ts) {
                let out = state.clock.advance(ts.tsval);
                state.echo.insert(out, ts.tsval);
                seg.set_ts(Some(TsOption {
                    tsval: out,
                    tsecr: ts.tsecr,
                }));
            }
            return;
        }
        if !(seg.flags.syn && seg.is_isn) {
            return;
        }
        if !self.servers.is_listed(&seg.conn.server, now_us) {
            return;
        }
        let (Some(ws), Some(ts)) = (seg.ws, seg.ts) else {
            return;
        };
        let case = match recover_original(self.digest, ws, ts.tsval, seg.seq, self.key) {
            Ok(case) => case,
            Err(RecoverError::AmbiguousMatch) => {
                self.events.push(ShimEvent::SynAmbiguous {
                    at_us: now_us,
                    conn: seg.conn.to_string(),
                });
                return;
            }
            Err(RecoverError::NoMatch) => return,
        };
        let ssi = extract_ssi_from_ts(ts.tsval);
        // Restore what the client originally sent. The original timestamp
        // value is unrecoverable, so a synthetic clock seeded here stands
        // in for it and advances with the client's own increments.
        let ts_state = match case {
            WsCase::AbsentBoth => {
                seg.set_ts(None);
                seg.set_ws(None);
                None
            }
            WsCase::WsOnly(w) => {
                seg.set_ts(None);
                seg.set_ws(Some(w));
                None
            }
            WsCase::WsAndTs(w) => {
                seg.set_ws(Some(w));
                let synthetic = self.rng.next_u32();
                let mut state = TsState {
                    clock: TsRewrite::new(ts.tsval, synthetic),
                    echo: TsEchoMap::default(),
                };
                state.echo.insert(synthetic, ts.tsval);
                seg.set_ts(Some(TsOption {
                    tsval: synthetic,
                    tsecr: ts.tsecr,
                }));
                Some(state)
            }
        };
        let restored_ws = seg.ws;
        self.conns.insert(
            seg.conn.clone(),
            SsConn {
                ssi,
                case,
                ts: ts_state,
                ledger: OffsetLedger::default(),
                active: !self.close_sent,
                confirmed: false,
            },
        );
        self.events.push(ShimEvent::SynRecovered {
            at_us: now_us,
            conn: seg.conn.to_string(),
            ssi: ssi.0,
            restored_ws,
        });
    }

    fn inbound(&mut self, seg: &mut Segment, now_us: u64) {
        let Some(conn) = self.conns.get_mut(&seg.conn) else {
            return;
        };
        // Inflate numbering toward the client by the bytes added so far,
        // and translate echoes of the synthetic clock back to the values
        // the client emitted.
        seg.seq = shift_seq(seg.seq, conn.ledger.offset());
        if let (Some(state), Some(ts)) = (conn.ts.as_mut(), seg.ts) {
            if let Some(orig) = state.echo.lookup(ts.tsecr) {
                seg.set_ts(Some(TsOption {
                    tsval: ts.tsval,
                    tsecr: orig,
                }));
            }
        }
        if !conn.active || seg.payload.is_empty() {
            return;
        }
        let Ok(list) = parse_response(&seg.payload) else {
            return;
        };
        // One frame per suggestion response: confirm the connection first,
        // then drain data, then the end marker, then the close frame on
        // whichever confirmed connection responds next.
        let (frame, data_bits) = if !conn.confirmed {
            (Some(StegFrame::RegistrationConfirm { ssi: conn.ssi }), None)
        } else if !self.end_sent && self.next_bit < self.bit_len {
            let n = u64::min(u64::from(FRAME_BITS), self.bit_len - self.next_bit) as u32;
            let chunk = read_bits(&self.data, self.next_bit, n) << (FRAME_BITS - n);
            (
                Some(StegFrame::Data {
                    seq: self.next_seq,
                    payload: chunk,
                }),
                Some(n),
            )
        } else if !self.end_sent {
            (Some(StegFrame::EndOfData), None)
        } else if !self.close_sent {
            match self.native {
                Some((_, native_ssi)) => (
                    Some(StegFrame::Close {
                        native_ssi,
                        last_bits: self.last_bits,
                    }),
                    None,
                ),
                None => (None, None),
            }
        } else {
            (None, None)
        };
        let Some(frame) = frame else {
            return;
        };
        let Ok(stuffed) = encode_frame(&frame, &list, &self.codebook, &mut self.rng) else {
            return;
        };
        let old_total = i64::from(seg.total_length);
        seg.set_payload(build_response(&stuffed));
        conn.ledger.record(i64::from(seg.total_length) - old_total);
        // Commit channel progress only after the embed succeeded.
        match frame {
            StegFrame::RegistrationConfirm { ssi } => {
                conn.confirmed = true;
                if self.native.is_none() {
                    self.native = Some((seg.conn.clone(), ssi));
                }
            }
            StegFrame::Data { .. } => {
                let n = data_bits.expect("data frames carry their bit count");
                self.next_bit += u64::from(n);
                if self.next_bit == self.bit_len {
                    self.last_bits = n as u8;
                }
                self.next_seq = next_data_seq(self.next_seq);
            }
            StegFrame::EndOfData => self.end_sent = true,
            StegFrame::Close { .. } => self.close_sent = true,
        }
        let (kind, seq) = frame_kind(&frame);
        self.events.push(ShimEvent::FrameSent {
            at_us: now_us,
            conn: seg.conn.to_string(),
            frame: kind,
            seq,
        });
    }
}
