//! Deterministic discrete-event harness around the two shims.
//!
//! A population of typing clients, a mock suggestion server, and the two
//! middleboxes are wired into a virtual network with a fixed per-hop
//! latency, then driven by a seeded event loop over virtual microseconds.
//! Nothing here reads wall clocks or system entropy, so one `(config,
//! payload)` pair always reproduces the same trace, report, and recovered
//! bits, no matter how many simulated hours the run covers.
//!
//! The harness also carries [`estimate_bandwidth`], the closed-form
//! throughput model the simulation is compared against.

use alloc::collections::{BTreeMap, BinaryHeap, VecDeque};
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use alloc::{format, vec};
use core::cmp::{Ordering, Reverse};
use core::fmt;

use serde::Serialize;

use crate::codebook::{ChannelKey, Codebook};
use crate::digest::DigestAlg;
use crate::rng::SplitMix64;
use crate::shim::{FrameKind, ShimConfig, ShimEvent, SrShim, SsShim};
use crate::wire::{
    build_response, parse_request, ClientKind, ConnId, Direction, DnsRecord, SegFlags, Segment,
    SuggestRequest, SuggestionList, TraceRecord, TsOption, MAX_ROWS,
};

/// One-way latency of each hop (client-SR, SR-SS, SS-server), in virtual
/// microseconds. Constant latency keeps per-connection delivery FIFO.
pub const HOP_US: u64 = 2_000;

/// Gap between two typed requests within a search, sampled uniformly.
const TYPE_GAP_MIN_US: u64 = 150_000;
const TYPE_GAP_MAX_US: u64 = 400_000;

/// Pause between connection establishment and the on-focus request that
/// precedes typing.
const FOCUS_DELAY_US: u64 = 50_000;

/// Window-scale value the mock server advertises when the client offered
/// one.
const SERVER_WS: u8 = 7;

/// Vocabulary for mock suggestion rows and search phrases: deliberately
/// invented tokens, so they cannot collide with codebook words drawn from
/// a frequency dictionary.
const FILLER_VOCAB: [&str; 40] = [
    "quorv", "blenith", "zandrel", "mivook", "tarnix", "velgor", "oprand", "sulfet", "crindle",
    "wozzer", "plimt", "gharno", "dexlit", "yarnup", "fobrine", "skelto", "urvane", "jexom",
    "lurnid", "cabrix", "nophel", "twazzle", "rimbork", "quenlo", "vastrip", "omblea", "drifex",
    "pallow", "snerg", "quibrand", "mortice", "flindra", "ebbort", "cruvane", "topliss", "wexford",
    "gannet", "prindle", "sovrak", "lumets",
];

// ----- sampling profiles -----

/// One window-scale shape with its sampling weight and the conditional
/// probability that the timestamp option accompanies it. Weights and
/// probabilities are in hundredths of a percent so two-decimal measured
/// percentages stay exact.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WsTsEntry {
    pub ws: Option<u8>,
    pub weight_x100: u32,
    pub ts_x100: u32,
}

/// Distribution of window-scale / timestamp option shapes on client SYNs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WsTsProfile {
    pub entries: Vec<WsTsEntry>,
}

impl Default for WsTsProfile {
    /// Option shapes measured on real traffic: 60.73% of SYNs carry a
    /// window scale (values 1, 2, 3, 6, 7 or 8, heaviest on 2), timestamps
    /// ride only alongside a window scale, and values 3, 6 and 7 always
    /// carry one.
    fn default() -> Self {
        let e = |ws: Option<u8>, weight_x100: u32, ts_x100: u32| WsTsEntry {
            ws,
            weight_x100,
            ts_x100,
        };
        WsTsProfile {
            entries: vec![
                e(None, 3927, 0),
                e(Some(1), 1446, 8631),
                e(Some(2), 3038, 157),
                e(Some(3), 211, 10_000),
                e(Some(6), 1029, 10_000),
                e(Some(7), 53, 10_000),
                e(Some(8), 296, 0),
            ],
        }
    }
}

impl WsTsProfile {
    /// Draws one SYN option shape. Always consumes exactly two generator
    /// outputs so interleaved sampling stays reproducible.
    pub fn sample(&self, rng: &mut SplitMix64) -> (Option<u8>, bool) {
        let total: u64 = self.entries.iter().map(|e| u64::from(e.weight_x100)).sum();
        assert!(total > 0, "profile has no weight");
        let mut roll = rng.next_u64() % total;
        let ts_roll = rng.next_u64() % 10_000;
        for e in &self.entries {
            let w = u64::from(e.weight_x100);
            if roll < w {
                let ts = e.ws.is_some() && ts_roll < u64::from(e.ts_x100);
                return (e.ws, ts);
            }
            roll -= w;
        }
        unreachable!("roll is below the total weight");
    }
}

/// Client families weighted by their measured share of requests, in
/// hundredths of a percent.
pub fn default_client_weights() -> Vec<(ClientKind, u32)> {
    vec![
        (ClientKind::Hp, 4153),
        (ClientKind::Serp, 2553),
        (ClientKind::Firefox, 854),
        (ClientKind::Safari, 606),
        (ClientKind::Chrome, 559),
        (ClientKind::Youtube, 521),
        (ClientKind::Ie, 499),
        (ClientKind::Tbrs, 187),
        (ClientKind::Img, 50),
        (ClientKind::Unspec, 19),
    ]
}

/// Default weights for 1..=10 rows per response; most responses fill all
/// ten rows, short lists are the rare case.
pub const DEFAULT_ROW_WEIGHTS: [u64; MAX_ROWS] = [1, 1, 2, 2, 3, 3, 4, 6, 8, 70];

/// How users begin searches over time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArrivalModel {
    /// Exponential inter-search gaps, one independent process per user.
    Poisson,
    /// Evenly spaced searches at the configured rate, first at t = 0.
    Fixed,
}

// ----- configuration -----

/// Full description of one simulation run. [`SimConfig::parse`] reads the
/// same structure from `key = value` text.
#[derive(Clone, Debug)]
pub struct SimConfig {
    pub seed: u64,
    pub num_users: u32,
    pub searches_per_hour_per_user: f64,
    /// Mean typed exchanges per search; the fractional part is realized as
    /// a Bernoulli extra request.
    pub requests_per_search: f64,
    /// Sampling weights for responses of 1..=10 rows (index i weights
    /// i + 1 rows).
    pub row_count_weights: [u64; MAX_ROWS],
    pub ws_ts_profile: WsTsProfile,
    pub client_kind_weights: Vec<(ClientKind, u32)>,
    pub duration_s: f64,
    pub registration_timeout_s: f64,
    pub gap_timeout_s: f64,
    pub arrival: ArrivalModel,
    /// Hard cap on searches across all users; `None` leaves the rate in
    /// charge.
    pub max_searches: Option<u64>,
    /// Hour of the virtual day at which the run starts; anchors trace
    /// timestamps to a wall clock for the analyzer.
    pub start_hour: f64,
    pub dns_ttl_s: f64,
    pub key: ChannelKey,
    pub digest: DigestAlg,
    pub domain: String,
    pub server_addr: String,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            seed: 1,
            num_users: 1,
            searches_per_hour_per_user: 0.31,
            requests_per_search: 7.1,
            row_count_weights: DEFAULT_ROW_WEIGHTS,
            ws_ts_profile: WsTsProfile::default(),
            client_kind_weights: default_client_weights(),
            duration_s: 3600.0,
            registration_timeout_s: 5.0,
            gap_timeout_s: 60.0,
            arrival: ArrivalModel::Poisson,
            max_searches: None,
            start_hour: 9.0,
            dns_ttl_s: 300.0,
            key: ChannelKey(0x5354_4547_5355_4747),
            digest: DigestAlg::Sha1,
            domain: "suggest.example.test".to_string(),
            server_addr: "198.51.100.10".to_string(),
        }
    }
}

/// A `key = value` line the config parser could not accept.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfigError {
    pub line: usize,
    pub reason: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config line {}: {}", self.line, self.reason)
    }
}

impl core::error::Error for ConfigError {}

fn cfg_err(line: usize, reason: impl fmt::Display) -> ConfigError {
    ConfigError {
        line,
        reason: reason.to_string(),
    }
}

fn parse_u64_any(v: &str, line: usize) -> Result<u64, ConfigError> {
    let r = if let Some(hex) = v.strip_prefix("0x").or_else(|| v.strip_prefix("0X")) {
        u64::from_str_radix(hex, 16)
    } else {
        v.parse()
    };
    r.map_err(|_| cfg_err(line, format!("expected an integer, got {v:?}")))
}

fn parse_f64_nonneg(v: &str, line: usize) -> Result<f64, ConfigError> {
    let x: f64 = v
        .parse()
        .map_err(|_| cfg_err(line, format!("expected a number, got {v:?}")))?;
    if !(x >= 0.0) || !x.is_finite() {
        return Err(cfg_err(line, format!("{v:?} must be a nonnegative number")));
    }
    Ok(x)
}

impl SimConfig {
    /// Parses `key = value` text over the defaults. `#` starts a comment;
    /// blank lines are skipped; unknown keys are errors.
    ///
    /// Recognized keys: `seed`, `users`, `searches_per_hour`,
    /// `requests_per_search`, `duration_s`, `registration_timeout_s`,
    /// `gap_timeout_s`, `start_hour`, `dns_ttl_s`, `max_searches`,
    /// `arrival` (`poisson`|`fixed`), `rows` (a single count 1..=10, or
    /// ten comma-separated weights), `key` (decimal or 0x-hex), `digest`
    /// (`sha1`|`sha256`), `domain`, `server_addr`.
    pub fn parse(text: &str) -> Result<SimConfig, ConfigError> {
        let mut cfg = SimConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| cfg_err(line_no, "expected `key = value`"))?;
            let (k, v) = (k.trim(), v.trim());
            match k {
                "seed" => cfg.seed = parse_u64_any(v, line_no)?,
                "users" => {
                    cfg.num_users = u32::try_from(parse_u64_any(v, line_no)?)
                        .map_err(|_| cfg_err(line_no, "user count does not fit in 32 bits"))?
                }
                "searches_per_hour" => {
                    cfg.searches_per_hour_per_user = parse_f64_nonneg(v, line_no)?
                }
                "requests_per_search" => cfg.requests_per_search = parse_f64_nonneg(v, line_no)?,
                "duration_s" => cfg.duration_s = parse_f64_nonneg(v, line_no)?,
                "registration_timeout_s" => {
                    cfg.registration_timeout_s = parse_f64_nonneg(v, line_no)?
                }
                "gap_timeout_s" => cfg.gap_timeout_s = parse_f64_nonneg(v, line_no)?,
                "start_hour" => cfg.start_hour = parse_f64_nonneg(v, line_no)?,
                "dns_ttl_s" => cfg.dns_ttl_s = parse_f64_nonneg(v, line_no)?,
                "max_searches" => cfg.max_searches = Some(parse_u64_any(v, line_no)?),
                "arrival" => {
                    cfg.arrival = match v {
                        "poisson" => ArrivalModel::Poisson,
                        "fixed" => ArrivalModel::Fixed,
                        _ => return Err(cfg_err(line_no, "arrival must be poisson or fixed")),
                    }
                }
                "rows" => cfg.row_count_weights = parse_rows(v, line_no)?,
                "key" => cfg.key = ChannelKey(parse_u64_any(v, line_no)?),
                "digest" => {
                    cfg.digest = match v {
                        "sha1" => DigestAlg::Sha1,
                        "sha256" => DigestAlg::Sha256,
                        _ => return Err(cfg_err(line_no, "digest must be sha1 or sha256")),
                    }
                }
                "domain" => cfg.domain = v.to_string(),
                "server_addr" => cfg.server_addr = v.to_string(),
                other => return Err(cfg_err(line_no, format!("unknown key {other:?}"))),
            }
        }
        if cfg.row_count_weights.iter().sum::<u64>() == 0 {
            return Err(cfg_err(0, "row weights sum to zero"));
        }
        Ok(cfg)
    }
}

fn parse_rows(v: &str, line: usize) -> Result<[u64; MAX_ROWS], ConfigError> {
    if !v.contains(',') {
        let n = parse_u64_any(v, line)?;
        if !(1..=MAX_ROWS as u64).contains(&n) {
            return Err(cfg_err(line, "row count must be between 1 and 10"));
        }
        let mut w = [0u64; MAX_ROWS];
        w[(n - 1) as usize] = 1;
        return Ok(w);
    }
    let parts: Vec<&str> = v.split(',').map(str::trim).collect();
    if parts.len() != MAX_ROWS {
        return Err(cfg_err(line, "expected ten comma-separated row weights"));
    }
    let mut w = [0u64; MAX_ROWS];
    for (slot, p) in w.iter_mut().zip(parts) {
        *slot = parse_u64_any(p, line)?;
    }
    Ok(w)
}

// ----- report types -----

/// Totals of one run. `achieved_bandwidth_bps` is always
/// `bits_received / virtual_elapsed_s`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SimReport {
    pub bits_sent: u64,
    pub bits_received: u64,
    /// Responses that carried a data frame.
    pub lists_used: u64,
    pub searches_simulated: u64,
    pub virtual_elapsed_s: f64,
    pub achieved_bandwidth_bps: f64,
    /// True when the run ended before the whole payload was received.
    pub incomplete: bool,
    /// True when the close frame made it through and the stream
    /// reassembled completely.
    pub channel_closed: bool,
    /// Where the trace was written, when the caller persisted it.
    pub trace_path: Option<String>,
}

/// End-to-end checks computed during the run. All counters should be zero
/// in a healthy simulation.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct AuditSummary {
    /// Requests whose bytes at the server differed from the client's
    /// emission.
    pub request_payload_mismatches: u64,
    /// Responses whose bytes at the client differed from the server's
    /// emission.
    pub response_payload_mismatches: u64,
    /// Sequence or acknowledgment numbers an endpoint saw out of step.
    pub sequence_violations: u64,
    /// Whether the recovered bits equal the payload prefix of that length.
    pub recovered_prefix_matches: bool,
}

/// Everything a run produces: the numeric report, the endpoint-side trace,
/// both shims' event logs, and the receiver's recovered bits.
#[derive(Clone, Debug)]
pub struct SimOutput {
    pub report: SimReport,
    pub trace: Vec<TraceRecord>,
    pub sr_events: Vec<ShimEvent>,
    pub ss_events: Vec<ShimEvent>,
    pub recovered: Vec<u8>,
    pub recovered_bits: u64,
    pub audit: AuditSummary,
}

/// Closed-form channel throughput in bits per second:
/// `users x searches/hour x lists/search x bits/list / 3600`.
pub fn estimate_bandwidth(
    lists_per_search: f64,
    bits_per_list: u32,
    searches_per_hour_per_user: f64,
    num_users: u32,
) -> f64 {
    f64::from(num_users) * searches_per_hour_per_user * lists_per_search * f64::from(bits_per_list)
        / 3600.0
}

// ----- mock suggestion server -----

/// Builds one mock response: every row repeats the query and appends zero
/// to four filler words from a vocabulary disjoint from any codebook. The
/// final row always carries at least one filler, so stripping trailing
/// bare-query padding downstream can never delete an original row. The row
/// count is drawn from `row_weights`.
pub fn mock_server_respond(
    req: &SuggestRequest,
    row_weights: &[u64; MAX_ROWS],
    rng: &mut SplitMix64,
) -> SuggestionList {
    let n = 1 + pick_weighted(row_weights, rng);
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let min_fillers = usize::from(i + 1 == n);
        let span = 5 - min_fillers as u64;
        let fillers = min_fillers + (rng.next_u64() % span) as usize;
        let mut row = req.phrase_prefix.clone();
        for _ in 0..fillers {
            row.push(' ');
            row.push_str(FILLER_VOCAB[(rng.next_u64() % FILLER_VOCAB.len() as u64) as usize]);
        }
        rows.push(row);
    }
    SuggestionList::new(&req.phrase_prefix, rows).expect("mock rows are well formed")
}

fn pick_weighted(weights: &[u64], rng: &mut SplitMix64) -> usize {
    let total: u64 = weights.iter().sum();
    assert!(total > 0, "weights sum to zero");
    let mut roll = rng.next_u64() % total;
    for (i, &w) in weights.iter().enumerate() {
        if roll < w {
            return i;
        }
        roll -= w;
    }
    weights.len() - 1
}

fn pick_client_kind(weights: &[(ClientKind, u32)], rng: &mut SplitMix64) -> ClientKind {
    let total: u64 = weights.iter().map(|&(_, w)| u64::from(w)).sum();
    assert!(total > 0, "client weights sum to zero");
    let mut roll = rng.next_u64() % total;
    for &(kind, w) in weights {
        if roll < u64::from(w) {
            return kind;
        }
        roll -= u64::from(w);
    }
    weights[weights.len() - 1].0
}

fn unit_f64(rng: &mut SplitMix64) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0)
}

fn uniform_us(rng: &mut SplitMix64, lo: u64, hi: u64) -> u64 {
    lo + rng.next_u64() % (hi - lo + 1)
}

fn next_u32(rng: &mut SplitMix64) -> u32 {
    (rng.next_u64() >> 32) as u32
}

// ----- event machinery -----

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Node {
    Sr,
    Ss,
    Server,
    Client,
}

enum EvKind {
    StartSearch { user: u32 },
    Wire { seg: Segment, node: Node },
    ClientSend { conn: ConnId },
}

struct Ev {
    at: u64,
    tick: u64,
    kind: EvKind,
}

impl PartialEq for Ev {
    fn eq(&self, other: &Self) -> bool {
        self.at == other.at && self.tick == other.tick
    }
}

impl Eq for Ev {}

impl PartialOrd for Ev {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Ev {
    fn cmp(&self, other: &Self) -> Ordering {
        self.at.cmp(&other.at).then(self.tick.cmp(&other.tick))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ConnPhase {
    SynSent,
    Established,
    FinSent,
}

struct ClientConn {
    user: u32,
    search_id: u64,
    kind: ClientKind,
    phrase: String,
    prefix_chars: usize,
    use_ts: bool,
    ts_offset: u32,
    snd_nxt: u32,
    rcv_nxt: u32,
    last_peer_tsval: u32,
    typed_total: u32,
    typed_sent: u32,
    reg_sent: bool,
    phase: ConnPhase,
}

struct ServerConn {
    snd_nxt: u32,
    rcv_nxt: u32,
    use_ts: bool,
    ts_offset: u32,
    last_peer_tsval: u32,
}

struct UserState {
    dns_expiry_us: u64,
    next_port: u16,
}

fn ts_clock(offset: u32, now_us: u64) -> u32 {
    offset.wrapping_add((now_us / 1000) as u32)
}

fn user_addr(user: u32) -> String {
    format!("10.0.{}.{}", (user >> 8) & 0xFF, user & 0xFF)
}

struct Sim<'a> {
    cfg: &'a SimConfig,
    duration_us: u64,
    heap: BinaryHeap<Reverse<Ev>>,
    tick: u64,
    rng: SplitMix64,
    srv_rng: SplitMix64,
    sr: SrShim,
    ss: SsShim,
    users: Vec<UserState>,
    client_conns: BTreeMap<ConnId, ClientConn>,
    server_conns: BTreeMap<ConnId, ServerConn>,
    expected_req: BTreeMap<ConnId, VecDeque<Vec<u8>>>,
    expected_resp: BTreeMap<ConnId, VecDeque<Vec<u8>>>,
    trace: Vec<TraceRecord>,
    audit: AuditSummary,
    searches_done: u64,
    next_search_id: u64,
}

impl<'a> Sim<'a> {
    fn push_ev(&mut self, at: u64, kind: EvKind) {
        let tick = self.tick;
        self.tick += 1;
        self.heap.push(Reverse(Ev { at, tick, kind }));
    }

    fn run(&mut self) {
        while let Some(Reverse(ev)) = self.heap.pop() {
            if ev.at > self.duration_us {
                break;
            }
            match ev.kind {
                EvKind::StartSearch { user } => self.start_search(user, ev.at),
                EvKind::ClientSend { conn } => self.client_send_next(&conn, ev.at),
                EvKind::Wire { mut seg, node } => match node {
                    Node::Sr => {
                        self.sr.on_segment(&mut seg, ev.at);
                        let next = match seg.dir {
                            Direction::ToServer => Node::Ss,
                            Direction::ToClient => Node::Client,
                        };
                        self.push_ev(ev.at + HOP_US, EvKind::Wire { seg, node: next });
                    }
                    Node::Ss => {
                        self.ss.on_segment(&mut seg, ev.at);
                        let next = match seg.dir {
                            Direction::ToServer => Node::Server,
                            Direction::ToClient => Node::Sr,
                        };
                        self.push_ev(ev.at + HOP_US, EvKind::Wire { seg, node: next });
                    }
                    Node::Server => self.server_receive(seg, ev.at),
                    Node::Client => self.client_receive(seg, ev.at),
                },
            }
        }
    }

    // -- scheduling --

    fn schedule_first_search(&mut self, user: u32) {
        let rate = self.cfg.searches_per_hour_per_user;
        if rate <= 0.0 {
            return;
        }
        let at_us = match self.cfg.arrival {
            ArrivalModel::Fixed => 0,
            ArrivalModel::Poisson => self.exp_gap_us(rate),
        };
        self.push_ev(at_us, EvKind::StartSearch { user });
    }

    fn schedule_next_search(&mut self, user: u32, now: u64) {
        let rate = self.cfg.searches_per_hour_per_user;
        if rate <= 0.0 {
            return;
        }
        let gap = match self.cfg.arrival {
            ArrivalModel::Fixed => (3600.0 / rate * 1e6) as u64,
            ArrivalModel::Poisson => self.exp_gap_us(rate),
        };
        let at = now.saturating_add(gap.max(1));
        if at <= self.duration_us {
            self.push_ev(at, EvKind::StartSearch { user });
        }
    }

    fn exp_gap_us(&mut self, rate_per_hour: f64) -> u64 {
        let mean_s = 3600.0 / rate_per_hour;
        let u = unit_f64(&mut self.rng);
        (-mean_s * libm::log(1.0 - u) * 1e6) as u64
    }

    // -- client behaviour --

    fn start_search(&mut self, user: u32, now: u64) {
        if let Some(cap) = self.cfg.max_searches {
            if self.searches_done >= cap {
                return;
            }
        }
        self.schedule_next_search(user, now);
        self.searches_done += 1;
        let search_id = self.next_search_id;
        self.next_search_id += 1;

        // Refresh the DNS answer both shims learn servers from.
        if self.users[user as usize].dns_expiry_us <= now {
            let rec = DnsRecord {
                name: self.cfg.domain.clone(),
                address: self.cfg.server_addr.clone(),
                ttl_s: self.cfg.dns_ttl_s as u64,
            };
            self.sr.on_dns(&rec, now);
            self.ss.on_dns(&rec, now);
            self.users[user as usize].dns_expiry_us =
                now + (self.cfg.dns_ttl_s * 1e6) as u64;
        }

        let (ws, use_ts) = self.cfg.ws_ts_profile.sample(&mut self.rng);
        let kind = pick_client_kind(&self.cfg.client_kind_weights, &mut self.rng);
        let w1 = FILLER_VOCAB[(self.rng.next_u64() % FILLER_VOCAB.len() as u64) as usize];
        let w2 = FILLER_VOCAB[(self.rng.next_u64() % FILLER_VOCAB.len() as u64) as usize];
        let phrase = format!("{w1} {w2}");
        let base = libm::floor(self.cfg.requests_per_search);
        let extra = unit_f64(&mut self.rng) < (self.cfg.requests_per_search - base);
        let typed_total = base as u32 + u32::from(extra);

        let port = {
            let st = &mut self.users[user as usize];
            let p = st.next_port;
            st.next_port = if st.next_port >= 65000 { 40000 } else { st.next_port + 1 };
            p
        };
        let conn = ConnId {
            client: user_addr(user),
            client_port: port,
            server: self.cfg.server_addr.clone(),
            server_port: 80,
        };
        let isn = next_u32(&mut self.rng);
        let ts_offset = next_u32(&mut self.rng);

        let mut syn = Segment::new(conn.clone(), Direction::ToServer, SegFlags::SYN, isn, 0);
        syn.set_ws(ws);
        if use_ts {
            syn.set_ts(Some(TsOption {
                tsval: ts_clock(ts_offset, now),
                tsecr: 0,
            }));
        }
        self.client_conns.insert(
            conn,
            ClientConn {
                user,
                search_id,
                kind,
                phrase,
                prefix_chars: 1,
                use_ts,
                ts_offset,
                snd_nxt: isn.wrapping_add(1),
                rcv_nxt: 0,
                last_peer_tsval: 0,
                typed_total,
                typed_sent: 0,
                reg_sent: false,
                phase: ConnPhase::SynSent,
            },
        );
        self.emit_client(syn, now, None, user, search_id);
    }

    fn client_send_next(&mut self, conn: &ConnId, now: u64) {
        let Some(cc) = self.client_conns.get_mut(conn) else {
            return;
        };
        if cc.phase != ConnPhase::Established {
            return;
        }
        let (prefix, kind, user, search_id, use_ts, ts_offset, last_peer, seq, ack);
        {
            if cc.reg_sent {
                cc.typed_sent += 1;
                let grow = 1 + (self.rng.next_u64() % 3) as usize;
                cc.prefix_chars = (cc.prefix_chars + grow).min(cc.phrase.chars().count());
            } else {
                cc.reg_sent = true;
                cc.prefix_chars = 1;
            }
            prefix = cc.phrase.chars().take(cc.prefix_chars).collect::<String>();
            kind = cc.kind;
            user = cc.user;
            search_id = cc.search_id;
            use_ts = cc.use_ts;
            ts_offset = cc.ts_offset;
            last_peer = cc.last_peer_tsval;
            seq = cc.snd_nxt;
            ack = cc.rcv_nxt;
        }
        let req = SuggestRequest::new(kind, &prefix, prefix.chars().count() as u32)
            .expect("prefix is valid");
        let payload = req.serialize();
        let mut seg = Segment::new(conn.clone(), Direction::ToServer, SegFlags::ack(), seq, ack);
        seg.set_payload(payload.clone());
        if use_ts {
            seg.set_ts(Some(TsOption {
                tsval: ts_clock(ts_offset, now),
                tsecr: last_peer,
            }));
        }
        if let Some(cc) = self.client_conns.get_mut(conn) {
            cc.snd_nxt = cc.snd_nxt.wrapping_add(payload.len() as u32);
        }
        self.expected_req
            .entry(conn.clone())
            .or_default()
            .push_back(payload);
        self.emit_client(seg, now, Some(kind), user, search_id);
    }

    fn client_receive(&mut self, seg: Segment, now: u64) {
        let conn = seg.conn.clone();
        let Some(cc) = self.client_conns.get_mut(&conn) else {
            return;
        };
        if let Some(ts) = seg.ts {
            cc.last_peer_tsval = ts.tsval;
        }
        let user = cc.user;
        let search_id = cc.search_id;
        let use_ts = cc.use_ts;
        let ts_offset = cc.ts_offset;
        match cc.phase {
            ConnPhase::SynSent => {
                if !(seg.flags.syn && seg.flags.ack) {
                    return;
                }
                if seg.ack != cc.snd_nxt {
                    self.audit.sequence_violations += 1;
                }
                cc.rcv_nxt = seg.seq.wrapping_add(1);
                cc.phase = ConnPhase::Established;
                let (seq, ack, last_peer) = (cc.snd_nxt, cc.rcv_nxt, cc.last_peer_tsval);
                let mut a =
                    Segment::new(conn.clone(), Direction::ToServer, SegFlags::ack(), seq, ack);
                if use_ts {
                    a.set_ts(Some(TsOption {
                        tsval: ts_clock(ts_offset, now),
                        tsecr: last_peer,
                    }));
                }
                self.emit_client(a, now, None, user, search_id);
                self.push_ev(
                    now + FOCUS_DELAY_US,
                    EvKind::ClientSend { conn },
                );
            }
            ConnPhase::Established => {
                if seg.flags.syn || seg.flags.fin {
                    return;
                }
                if seg.payload.is_empty() {
                    return;
                }
                let mut violated = false;
                if seg.seq != cc.rcv_nxt || seg.ack != cc.snd_nxt {
                    violated = true;
                }
                cc.rcv_nxt = seg.seq.wrapping_add(seg.payload.len() as u32);
                let ack_now = (cc.snd_nxt, cc.rcv_nxt, cc.last_peer_tsval);
                let more = cc.typed_sent < cc.typed_total;
                if !more {
                    cc.phase = ConnPhase::FinSent;
                    cc.snd_nxt = cc.snd_nxt.wrapping_add(1);
                }
                if violated {
                    self.audit.sequence_violations += 1;
                }
                let expected = self
                    .expected_resp
                    .get_mut(&conn)
                    .and_then(VecDeque::pop_front);
                if expected.as_deref() != Some(&seg.payload[..]) {
                    self.audit.response_payload_mismatches += 1;
                }
                if more {
                    // Acknowledge, then type the next prefix after a pause.
                    let mut a = Segment::new(
                        conn.clone(),
                        Direction::ToServer,
                        SegFlags::ack(),
                        ack_now.0,
                        ack_now.1,
                    );
                    if use_ts {
                        a.set_ts(Some(TsOption {
                            tsval: ts_clock(ts_offset, now),
                            tsecr: ack_now.2,
                        }));
                    }
                    self.emit_client(a, now, None, user, search_id);
                    let gap = uniform_us(&mut self.rng, TYPE_GAP_MIN_US, TYPE_GAP_MAX_US);
                    self.push_ev(now + gap, EvKind::ClientSend { conn });
                } else {
                    // Done typing: close the connection.
                    let mut f = Segment::new(
                        conn.clone(),
                        Direction::ToServer,
                        SegFlags {
                            fin: true,
                            ack: true,
                            ..SegFlags::default()
                        },
                        ack_now.0,
                        ack_now.1,
                    );
                    if use_ts {
                        f.set_ts(Some(TsOption {
                            tsval: ts_clock(ts_offset, now),
                            tsecr: ack_now.2,
                        }));
                    }
                    self.emit_client(f, now, None, user, search_id);
                }
            }
            ConnPhase::FinSent => {
                if !(seg.flags.fin && seg.flags.ack) {
                    return;
                }
                if seg.seq != cc.rcv_nxt || seg.ack != cc.snd_nxt {
                    self.audit.sequence_violations += 1;
                }
                cc.rcv_nxt = seg.seq.wrapping_add(1);
                let (seq, ack, last_peer) = (cc.snd_nxt, cc.rcv_nxt, cc.last_peer_tsval);
                let mut a =
                    Segment::new(conn.clone(), Direction::ToServer, SegFlags::ack(), seq, ack);
                if use_ts {
                    a.set_ts(Some(TsOption {
                        tsval: ts_clock(ts_offset, now),
                        tsecr: last_peer,
                    }));
                }
                self.emit_client(a, now, None, user, search_id);
                self.client_conns.remove(&conn);
                self.expected_req.remove(&conn);
                self.expected_resp.remove(&conn);
            }
        }
    }

    // -- server behaviour --

    fn server_receive(&mut self, seg: Segment, now: u64) {
        let conn = seg.conn.clone();
        if seg.flags.syn && !seg.flags.ack {
            let use_ts = seg.ts.is_some();
            let advertise_ws = seg.ws.is_some();
            let isn = next_u32(&mut self.srv_rng);
            let ts_offset = next_u32(&mut self.srv_rng);
            let rcv_nxt = seg.seq.wrapping_add(1);
            let last_peer = seg.ts.map_or(0, |t| t.tsval);
            let mut sa = Segment::new(
                conn.clone(),
                Direction::ToClient,
                SegFlags::syn_ack(),
                isn,
                rcv_nxt,
            );
            if advertise_ws {
                sa.set_ws(Some(SERVER_WS));
            }
            if use_ts {
                sa.set_ts(Some(TsOption {
                    tsval: ts_clock(ts_offset, now),
                    tsecr: last_peer,
                }));
            }
            self.server_conns.insert(
                conn,
                ServerConn {
                    snd_nxt: isn.wrapping_add(1),
                    rcv_nxt,
                    use_ts,
                    ts_offset,
                    last_peer_tsval: last_peer,
                },
            );
            self.emit_server(sa, now);
            return;
        }
        let Some(sc) = self.server_conns.get_mut(&conn) else {
            return;
        };
        if let Some(ts) = seg.ts {
            sc.last_peer_tsval = ts.tsval;
        }
        let mut violated = false;
        if seg.seq != sc.rcv_nxt || (seg.flags.ack && seg.ack != sc.snd_nxt) {
            violated = true;
        }
        if seg.flags.fin {
            sc.rcv_nxt = seg
                .seq
                .wrapping_add(seg.payload.len() as u32)
                .wrapping_add(1);
            let (seq, ack, use_ts, ts_offset, last_peer) = (
                sc.snd_nxt,
                sc.rcv_nxt,
                sc.use_ts,
                sc.ts_offset,
                sc.last_peer_tsval,
            );
            sc.snd_nxt = sc.snd_nxt.wrapping_add(1);
            if violated {
                self.audit.sequence_violations += 1;
            }
            let mut fa = Segment::new(
                conn.clone(),
                Direction::ToClient,
                SegFlags {
                    fin: true,
                    ack: true,
                    ..SegFlags::default()
                },
                seq,
                ack,
            );
            if use_ts {
                fa.set_ts(Some(TsOption {
                    tsval: ts_clock(ts_offset, now),
                    tsecr: last_peer,
                }));
            }
            self.emit_server(fa, now);
            return;
        }
        if violated {
            self.audit.sequence_violations += 1;
        }
        if seg.payload.is_empty() {
            // Pure acknowledgment: the final one of a closed connection
            // retires the server-side state.
            if self.client_conns.get(&conn).is_none() {
                self.server_conns.remove(&conn);
            }
            return;
        }
        sc.rcv_nxt = sc.rcv_nxt.wrapping_add(seg.payload.len() as u32);
        let (seq, ack, use_ts, ts_offset, last_peer) = (
            sc.snd_nxt,
            sc.rcv_nxt,
            sc.use_ts,
            sc.ts_offset,
            sc.last_peer_tsval,
        );
        let expected = self
            .expected_req
            .get_mut(&conn)
            .and_then(VecDeque::pop_front);
        if expected.as_deref() != Some(&seg.payload[..]) {
            self.audit.request_payload_mismatches += 1;
        }
        let Ok(req) = parse_request(&seg.payload) else {
            self.audit.request_payload_mismatches += 1;
            return;
        };
        let weights = self.cfg.row_count_weights;
        let list = mock_server_respond(&req, &weights, &mut self.srv_rng);
        let body = build_response(&list);
        if let Some(sc) = self.server_conns.get_mut(&conn) {
            sc.snd_nxt = sc.snd_nxt.wrapping_add(body.len() as u32);
        }
        let mut resp =
            Segment::new(conn.clone(), Direction::ToClient, SegFlags::ack(), seq, ack);
        resp.set_payload(body.clone());
        if use_ts {
            resp.set_ts(Some(TsOption {
                tsval: ts_clock(ts_offset, now),
                tsecr: last_peer,
            }));
        }
        self.expected_resp
            .entry(conn)
            .or_default()
            .push_back(body);
        self.emit_server(resp, now);
    }

    // -- emission + trace --

    fn timestamp_s(&self, now: u64) -> f64 {
        self.cfg.start_hour * 3600.0 + now as f64 / 1e6
    }

    fn emit_client(
        &mut self,
        seg: Segment,
        now: u64,
        kind: Option<ClientKind>,
        user: u32,
        search_id: u64,
    ) {
        self.trace.push(TraceRecord {
            timestamp_s: self.timestamp_s(now),
            conn_id: seg.conn.clone(),
            direction: seg.dir,
            flags: seg.flags,
            ws: seg.ws,
            ts_present: seg.ts.is_some(),
            client_kind: kind,
            user_id: user,
            search_id,
        });
        self.push_ev(now + HOP_US, EvKind::Wire { seg, node: Node::Sr });
    }

    fn emit_server(&mut self, seg: Segment, now: u64) {
        let (user, search_id) = self
            .client_conns
            .get(&seg.conn)
            .map_or((u32::MAX, 0), |cc| (cc.user, cc.search_id));
        self.trace.push(TraceRecord {
            timestamp_s: self.timestamp_s(now),
            conn_id: seg.conn.clone(),
            direction: seg.dir,
            flags: seg.flags,
            ws: seg.ws,
            ts_present: seg.ts.is_some(),
            client_kind: None,
            user_id: user,
            search_id,
        });
        self.push_ev(now + HOP_US, EvKind::Wire { seg, node: Node::Ss });
    }
}

// ----- top-level run -----

fn mask_tail(bytes: &mut Vec<u8>, bits: u64) {
    let full = (bits / 8) as usize;
    let rem = (bits % 8) as u32;
    let keep = full + usize::from(rem > 0);
    bytes.truncate(keep);
    if rem > 0 {
        if let Some(last) = bytes.last_mut() {
            *last &= 0xFFu8 << (8 - rem);
        }
    }
}

fn bit_prefix_eq(received: &[u8], bits: u64, source: &[u8]) -> bool {
    if bits > source.len() as u64 * 8 || bits > received.len() as u64 * 8 {
        return false;
    }
    let full = (bits / 8) as usize;
    if received[..full] != source[..full] {
        return false;
    }
    let rem = (bits % 8) as u32;
    if rem == 0 {
        return true;
    }
    let mask = 0xFFu8 << (8 - rem);
    (received[full] & mask) == (source[full] & mask)
}

/// Runs one simulation: builds both shims from `cfg`, drives the virtual
/// network for `cfg.duration_s`, and reports what the channel achieved.
/// The payload is `bit_len` bits of `steganogram`, most significant bit
/// first. Identical inputs give identical outputs.
pub fn run_simulation(
    cfg: &SimConfig,
    codebook: &Codebook,
    steganogram: &[u8],
    bit_len: u64,
) -> SimOutput {
    assert!(
        bit_len <= steganogram.len() as u64 * 8,
        "bit length exceeds the payload buffer"
    );
    let mut master = SplitMix64::new(cfg.seed);
    let sr_seed = master.next_u64();
    let ss_seed = master.next_u64();
    let client_seed = master.next_u64();
    let server_seed = master.next_u64();

    let mut shim_cfg = ShimConfig::new(cfg.key, vec![cfg.domain.clone()]);
    shim_cfg.digest = cfg.digest;
    shim_cfg.registration_timeout_us = (cfg.registration_timeout_s * 1e6) as u64;
    shim_cfg.gap_timeout_us = (cfg.gap_timeout_s * 1e6) as u64;

    let mut sim = Sim {
        cfg,
        duration_us: (cfg.duration_s * 1e6) as u64,
        heap: BinaryHeap::new(),
        tick: 0,
        rng: SplitMix64::new(client_seed),
        srv_rng: SplitMix64::new(server_seed),
        sr: SrShim::new(&shim_cfg, codebook.clone(), sr_seed),
        ss: SsShim::new(
            &shim_cfg,
            codebook.clone(),
            steganogram.to_vec(),
            bit_len,
            ss_seed,
        ),
        users: (0..cfg.num_users)
            .map(|_| UserState {
                dns_expiry_us: 0,
                next_port: 40000,
            })
            .collect(),
        client_conns: BTreeMap::new(),
        server_conns: BTreeMap::new(),
        expected_req: BTreeMap::new(),
        expected_resp: BTreeMap::new(),
        trace: Vec::new(),
        audit: AuditSummary::default(),
        searches_done: 0,
        next_search_id: 0,
    };
    for user in 0..cfg.num_users {
        sim.schedule_first_search(user);
    }
    sim.run();

    let ss_events = sim.ss.take_events();
    let sr_events = sim.sr.take_events();
    let lists_used = ss_events
        .iter()
        .filter(|e| {
            matches!(
                e,
                ShimEvent::FrameSent {
                    frame: FrameKind::Data,
                    ..
                }
            )
        })
        .count() as u64;
    let bits_sent = sim.ss.bits_sent();
    let complete = sim.sr.recovered();
    let channel_closed = complete.is_some();
    let (mut recovered, raw_bits) = complete.unwrap_or_else(|| sim.sr.partial());
    // Without the close frame the receiver cannot know how many bits of
    // the final frame are payload rather than padding; count only bits the
    // sender actually committed.
    let bits_received = raw_bits.min(bits_sent);
    mask_tail(&mut recovered, bits_received);

    let virtual_elapsed_s = cfg.duration_s;
    let report = SimReport {
        bits_sent,
        bits_received,
        lists_used,
        searches_simulated: sim.searches_done,
        virtual_elapsed_s,
        achieved_bandwidth_bps: if virtual_elapsed_s > 0.0 {
            bits_received as f64 / virtual_elapsed_s
        } else {
            0.0
        },
        incomplete: bits_received < bit_len,
        channel_closed,
        trace_path: None,
    };
    let mut audit = sim.audit;
    audit.recovered_prefix_matches = bit_prefix_eq(&recovered, bits_received, steganogram);
    SimOutput {
        report,
        trace: sim.trace,
        sr_events,
        ss_events,
        recovered,
        recovered_bits: bits_received,
        audit,
    }
}
