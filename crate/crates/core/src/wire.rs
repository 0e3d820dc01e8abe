//! Simplified wire model: TCP-ish segments, suggestion exchanges, DNS
//! records, and trace records.
//!
//! Segments carry the fields the shims actually inspect or rewrite; sizes
//! follow real TCP so that option edits show up in `total_length`.
//! Addresses and connection identifiers are opaque tokens, not IP
//! encodings. The suggestion body grammar mimics the classic
//! `window.google.ac.h([...])` callback shape, with completion markup such
//! as `<b>` kept as opaque row text.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Modeled IP + TCP header bytes before options.
pub const FIXED_HEADER_LEN: u32 = 40;
/// Upper bound on suggestion rows per response.
pub const MAX_ROWS: usize = 10;

// ----- errors -----

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum WireError {
    /// Input did not match the grammar; `offset` is a byte position.
    Parse { offset: usize, reason: String },
    /// A row strip asked for more trailing words than the row carries
    /// beyond its query prefix.
    RowTooShort,
    /// A row or query violates the body constraints.
    InvalidRow { reason: String },
}

impl fmt::Display for WireError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WireError::Parse { offset, reason } => {
                write!(f, "parse error at byte {offset}: {reason}")
            }
            WireError::RowTooShort => write!(f, "row has too few trailing words to strip"),
            WireError::InvalidRow { reason } => write!(f, "invalid suggestion row: {reason}"),
        }
    }
}

impl core::error::Error for WireError {}

fn parse_err(offset: usize, reason: &str) -> WireError {
    WireError::Parse {
        offset,
        reason: reason.to_string(),
    }
}

// ----- identifiers and enums -----

/// Connection identifier. Address tokens must not contain `:` or `>`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ConnId {
    pub client: String,
    pub client_port: u16,
    pub server: String,
    pub server_port: u16,
}

impl fmt::Display for ConnId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}:{}>{}:{}",
            self.client, self.client_port, self.server, self.server_port
        )
    }
}

impl ConnId {
    pub fn parse(s: &str) -> Result<Self, WireError> {
        let (c, srv) = s
            .split_once('>')
            .ok_or_else(|| parse_err(0, "connection id lacks '>'"))?;
        let split_addr = |part: &str| -> Result<(String, u16), WireError> {
            let (addr, port) = part
                .rsplit_once(':')
                .ok_or_else(|| parse_err(0, "address lacks ':port'"))?;
            let port = port.parse().map_err(|_| parse_err(0, "bad port"))?;
            Ok((addr.to_string(), port))
        };
        let (client, client_port) = split_addr(c)?;
        let (server, server_port) = split_addr(srv)?;
        Ok(ConnId {
            client,
            client_port,
            server,
            server_port,
        })
    }
}

impl Serialize for ConnId {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ConnId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        ConnId::parse(&s).map_err(|e| D::Error::custom(format!("{e}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "to_server")]
    ToServer,
    #[serde(rename = "to_client")]
    ToClient,
}

/// TCP flag subset, serialized as a compact letter string such as `"SA"`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SegFlags {
    pub syn: bool,
    pub ack: bool,
    pub fin: bool,
    pub rst: bool,
}

impl SegFlags {
    pub const SYN: SegFlags = SegFlags {
        syn: true,
        ack: false,
        fin: false,
        rst: false,
    };

    pub fn syn_ack() -> SegFlags {
        SegFlags {
            syn: true,
            ack: true,
            ..Default::default()
        }
    }

    pub fn ack() -> SegFlags {
        SegFlags {
            ack: true,
            ..Default::default()
        }
    }

    fn to_letters(self) -> String {
        let mut s = String::new();
        if self.syn {
            s.push('S');
        }
        if self.ack {
            s.push('A');
        }
        if self.fin {
            s.push('F');
        }
        if self.rst {
            s.push('R');
        }
        s
    }

    fn from_letters(s: &str) -> Result<Self, WireError> {
        let mut f = SegFlags::default();
        for c in s.chars() {
            match c {
                'S' => f.syn = true,
                'A' => f.ack = true,
                'F' => f.fin = true,
                'R' => f.rst = true,
                _ => return Err(parse_err(0, "unknown flag letter")),
            }
        }
        Ok(f)
    }
}

impl Serialize for SegFlags {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_letters())
    }
}

impl<'de> Deserialize<'de> for SegFlags {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        SegFlags::from_letters(&s).map_err(|e| D::Error::custom(format!("{e}")))
    }
}

/// Requesting client family, mirroring the overt service's `client=` tag.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClientKind {
    Hp,
    Serp,
    Tbrs,
    Firefox,
    Ie,
    Chrome,
    Safari,
    Img,
    Youtube,
    Unspec,
}

impl ClientKind {
    pub const ALL: [ClientKind; 10] = [
        ClientKind::Hp,
        ClientKind::Serp,
        ClientKind::Tbrs,
        ClientKind::Firefox,
        ClientKind::Ie,
        ClientKind::Chrome,
        ClientKind::Safari,
        ClientKind::Img,
        ClientKind::Youtube,
        ClientKind::Unspec,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ClientKind::Hp => "hp",
            ClientKind::Serp => "serp",
            ClientKind::Tbrs => "tbrs",
            ClientKind::Firefox => "firefox",
            ClientKind::Ie => "ie",
            ClientKind::Chrome => "chrome",
            ClientKind::Safari => "safari",
            ClientKind::Img => "img",
            ClientKind::Youtube => "youtube",
            ClientKind::Unspec => "unspec",
        }
    }

    pub fn from_str(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }
}

// ----- segments -----

/// TCP timestamp option payload.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TsOption {
    pub tsval: u32,
    pub tsecr: u32,
}

/// One TCP segment. `total_length` covers the fixed header, padded
/// options, and payload; keep it consistent via [`Segment::recompute_length`]
/// or [`rebalance_lengths`] after mutation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub conn: ConnId,
    pub dir: Direction,
    pub flags: SegFlags,
    pub seq: u32,
    pub ack: u32,
    /// True when `seq` is this side's initial sequence number.
    pub is_isn: bool,
    /// Window-scale option value (0..=14); carried on SYN segments only.
    pub ws: Option<u8>,
    pub ts: Option<TsOption>,
    pub payload: Vec<u8>,
    pub total_length: u32,
}

impl Segment {
    pub fn new(conn: ConnId, dir: Direction, flags: SegFlags, seq: u32, ack: u32) -> Self {
        let mut seg = Segment {
            conn,
            dir,
            flags,
            seq,
            ack,
            is_isn: flags.syn,
            ws: None,
            ts: None,
            payload: Vec::new(),
            total_length: 0,
        };
        seg.recompute_length();
        seg
    }

    /// Option bytes on the wire: WS takes 3, TS takes 10, padded to a
    /// 4-byte boundary as real stacks do.
    pub fn options_len(&self) -> u32 {
        let raw = self.ws.map_or(0, |_| 3) + self.ts.map_or(0, |_| 10);
        (raw + 3) / 4 * 4
    }

    pub fn recompute_length(&mut self) {
        self.total_length = FIXED_HEADER_LEN + self.options_len() + self.payload.len() as u32;
    }

    /// Sets the window-scale option. WS is only meaningful on SYN segments.
    pub fn set_ws(&mut self, ws: Option<u8>) {
        assert!(self.flags.syn || ws.is_none(), "WS outside a SYN segment");
        if let Some(v) = ws {
            assert!(v <= 14, "window scale {v} out of range");
        }
        self.ws = ws;
        self.recompute_length();
    }

    pub fn set_ts(&mut self, ts: Option<TsOption>) {
        self.ts = ts;
        self.recompute_length();
    }

    pub fn set_payload(&mut self, payload: Vec<u8>) {
        self.payload = payload;
        self.recompute_length();
    }

    pub fn payload_len(&self) -> u32 {
        self.payload.len() as u32
    }
}

/// Recomputes `total_length` and, for suggestion responses, the embedded
/// `Content-Length` header, after the payload body was mutated in place.
/// Returns the byte delta against the previously recorded length for the
/// stream-offset ledger.
pub fn rebalance_lengths(seg: &mut Segment) -> i64 {
    let old = seg.total_length as i64;
    if let Some(rebuilt) = rebuild_content_length(&seg.payload) {
        seg.payload = rebuilt;
    }
    seg.recompute_length();
    seg.total_length as i64 - old
}

fn rebuild_content_length(payload: &[u8]) -> Option<Vec<u8>> {
    let text = core::str::from_utf8(payload).ok()?;
    let rest = text.strip_prefix(RESPONSE_PREFIX)?;
    let (_, body) = rest.split_once("\r\n\r\n")?;
    Some(build_response_payload_bytes(body.as_bytes()))
}

// ----- suggestion exchange -----

/// Parsed suggestion request line.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SuggestRequest {
    pub client: ClientKind,
    /// The typed prefix so far.
    pub phrase_prefix: String,
    /// Cursor position in characters; at most the prefix length.
    pub cp: u32,
}

const REQUEST_PREFIX: &str = "GET /complete/search?client=";
const RESPONSE_PREFIX: &str = "HTTP/1.1 200 OK\r\nContent-Length: ";

fn percent_encode(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            ' ' => out.push_str("%20"),
            '%' => out.push_str("%25"),
            '&' => out.push_str("%26"),
            '=' => out.push_str("%3D"),
            _ => out.push(c),
        }
    }
    out
}

fn percent_decode(s: &str, base_offset: usize) -> Result<String, WireError> {
    let bytes = s.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'%' {
            let hex = s
                .get(i + 1..i + 3)
                .ok_or_else(|| parse_err(base_offset + i, "truncated percent escape"))?;
            let v = u8::from_str_radix(hex, 16)
                .map_err(|_| parse_err(base_offset + i, "bad percent escape"))?;
            out.push(v);
            i += 3;
        } else {
            out.push(bytes[i]);
            i += 1;
        }
    }
    String::from_utf8(out).map_err(|_| parse_err(base_offset, "query is not UTF-8"))
}

impl SuggestRequest {
    pub fn new(client: ClientKind, phrase_prefix: &str, cp: u32) -> Result<Self, WireError> {
        if cp as usize > phrase_prefix.chars().count() {
            return Err(WireError::InvalidRow {
                reason: "cursor beyond prefix".to_string(),
            });
        }
        Ok(SuggestRequest {
            client,
            phrase_prefix: phrase_prefix.to_string(),
            cp,
        })
    }

    pub fn serialize(&self) -> Vec<u8> {
        format!(
            "{REQUEST_PREFIX}{}&q={}&cp={} HTTP/1.1\r\n\r\n",
            self.client.as_str(),
            percent_encode(&self.phrase_prefix),
            self.cp
        )
        .into_bytes()
    }
}

/// Parses a request payload. Errors carry the byte offset of the first
/// mismatch.
pub fn parse_request(payload: &[u8]) -> Result<SuggestRequest, WireError> {
    let text =
        core::str::from_utf8(payload).map_err(|e| parse_err(e.valid_up_to(), "not UTF-8"))?;
    let rest = text
        .strip_prefix(REQUEST_PREFIX)
        .ok_or_else(|| parse_err(0, "not a suggestion request"))?;
    let mut offset = REQUEST_PREFIX.len();

    let (client_s, rest) = rest
        .split_once("&q=")
        .ok_or_else(|| parse_err(offset, "missing q parameter"))?;
    let client = ClientKind::from_str(client_s)
        .ok_or_else(|| parse_err(offset, "unknown client kind"))?;
    offset += client_s.len() + 3;

    let (q_enc, rest) = rest
        .split_once("&cp=")
        .ok_or_else(|| parse_err(offset, "missing cp parameter"))?;
    let phrase_prefix = percent_decode(q_enc, offset)?;
    offset += q_enc.len() + 4;

    let (cp_s, tail) = rest
        .split_once(" HTTP/1.1\r\n\r\n")
        .ok_or_else(|| parse_err(offset, "missing request tail"))?;
    if !tail.is_empty() {
        return Err(parse_err(offset + cp_s.len(), "trailing bytes"));
    }
    let cp: u32 = cp_s
        .parse()
        .map_err(|_| parse_err(offset, "bad cursor position"))?;

    SuggestRequest::new(client, &phrase_prefix, cp).map_err(|_| {
        parse_err(offset, "cursor beyond prefix")
    })
}

/// A suggestion list: the query it answers plus up to ten rows, each of
/// which begins with the query text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SuggestionList {
    query: String,
    rows: Vec<String>,
    /// Byte length of the serialized body; maintained by every mutator.
    content_length: usize,
}

fn check_text(s: &str, what: &str) -> Result<(), WireError> {
    if s.contains('"') || s.chars().any(|c| c.is_control()) {
        return Err(WireError::InvalidRow {
            reason: format!("{what} contains a quote or control character"),
        });
    }
    Ok(())
}

impl SuggestionList {
    pub fn new(query: &str, rows: Vec<String>) -> Result<Self, WireError> {
        if query.is_empty() {
            return Err(WireError::InvalidRow {
                reason: "empty query".to_string(),
            });
        }
        check_text(query, "query")?;
        if rows.len() > MAX_ROWS {
            return Err(WireError::InvalidRow {
                reason: format!("{} rows exceed the maximum of {MAX_ROWS}", rows.len()),
            });
        }
        for r in &rows {
            check_text(r, "row")?;
            if !r.starts_with(query) {
                return Err(WireError::InvalidRow {
                    reason: format!("row {r:?} does not start with the query"),
                });
            }
        }
        let mut list = SuggestionList {
            query: query.to_string(),
            rows,
            content_length: 0,
        };
        list.refresh_length();
        Ok(list)
    }

    pub fn query(&self) -> &str {
        &self.query
    }

    pub fn rows(&self) -> &[String] {
        &self.rows
    }

    pub fn content_length(&self) -> usize {
        self.content_length
    }

    fn refresh_length(&mut self) {
        self.content_length = self.serialize_body().len();
    }

    /// Serializes the body in the callback grammar:
    /// `window.google.ac.h(["q", [{"row",0,"0"}, ...], "", "", "", "", "", {}])`
    pub fn serialize_body(&self) -> String {
        let mut out = String::with_capacity(64 + self.rows.iter().map(|r| r.len() + 12).sum::<usize>());
        out.push_str("window.google.ac.h([\"");
        out.push_str(&self.query);
        out.push_str("\", [");
        for (i, row) in self.rows.iter().enumerate() {
            if i > 0 {
                out.push_str(", ");
            }
            out.push_str(&format!("{{\"{row}\",0,\"{i}\"}}"));
        }
        out.push_str("], \"\", \"\", \"\", \"\", \"\", {}])");
        out
    }

    /// Appends ` word` to the row at `idx`.
    pub fn append_to_row(&mut self, idx: usize, word: &str) -> Result<(), WireError> {
        check_text(word, "word")?;
        let row = self.rows.get_mut(idx).ok_or(WireError::RowTooShort)?;
        *row = append_word(row, word);
        self.refresh_length();
        Ok(())
    }

    /// Removes the last `n` space-separated words from the row at `idx`,
    /// returning them in row order.
    pub fn strip_from_row(&mut self, idx: usize, n: usize) -> Result<Vec<String>, WireError> {
        let query = self.query.clone();
        let row = self.rows.get_mut(idx).ok_or(WireError::RowTooShort)?;
        let (rest, words) = strip_last_words(row, &query, n)?;
        *row = rest;
        self.refresh_length();
        Ok(words)
    }

    /// Appends bare-query rows until the list has `n` rows.
    pub fn pad_to(&mut self, n: usize) {
        assert!(n <= MAX_ROWS);
        while self.rows.len() < n {
            self.rows.push(self.query.clone());
        }
        self.refresh_length();
    }

    /// Drops trailing rows equal to the bare query. Used after stripping to
    /// undo the padding done at embed time. The first row is always kept:
    /// padding only ever appends rows, so row 0 is always original even when
    /// it happens to equal the bare query.
    pub fn remove_trailing_bare_rows(&mut self) {
        while self.rows.len() > 1
            && self.rows.last().map(String::as_str) == Some(self.query.as_str())
        {
            self.rows.pop();
        }
        self.refresh_length();
    }
}

/// Appends a word to a row with a single space separator.
pub fn append_word(row: &str, word: &str) -> String {
    debug_assert!(!word.is_empty() && !word.contains(' '));
    let mut out = String::with_capacity(row.len() + 1 + word.len());
    out.push_str(row);
    out.push(' ');
    out.push_str(word);
    out
}

/// Removes exactly `n` trailing space-separated words that sit beyond the
/// query prefix; returns the shortened row and the removed words in row
/// order. `n = 0` is the identity. Inverse of `n` [`append_word`] calls.
pub fn strip_last_words(
    row: &str,
    query: &str,
    n: usize,
) -> Result<(String, Vec<String>), WireError> {
    let mut cut = row.len();
    let mut words = Vec::with_capacity(n);
    for _ in 0..n {
        let sp = row[..cut].rfind(' ').ok_or(WireError::RowTooShort)?;
        if sp < query.len() {
            return Err(WireError::RowTooShort);
        }
        let word = &row[sp + 1..cut];
        if word.is_empty() {
            return Err(WireError::RowTooShort);
        }
        words.push(word.to_string());
        cut = sp;
    }
    words.reverse();
    Ok((row[..cut].to_string(), words))
}

/// Builds a response payload carrying the serialized suggestion body.
pub fn build_response(list: &SuggestionList) -> Vec<u8> {
    build_response_payload_bytes(list.serialize_body().as_bytes())
}

fn build_response_payload_bytes(body: &[u8]) -> Vec<u8> {
    let mut out = format!("{RESPONSE_PREFIX}{}\r\n\r\n", body.len()).into_bytes();
    out.extend_from_slice(body);
    out
}

/// Parses a response payload back into its suggestion list.
pub fn parse_response(payload: &[u8]) -> Result<SuggestionList, WireError> {
    let text =
        core::str::from_utf8(payload).map_err(|e| parse_err(e.valid_up_to(), "not UTF-8"))?;
    let rest = text
        .strip_prefix(RESPONSE_PREFIX)
        .ok_or_else(|| parse_err(0, "not a suggestion response"))?;
    let mut offset = RESPONSE_PREFIX.len();
    let (len_s, body) = rest
        .split_once("\r\n\r\n")
        .ok_or_else(|| parse_err(offset, "missing header terminator"))?;
    let declared: usize = len_s
        .parse()
        .map_err(|_| parse_err(offset, "bad content length"))?;
    offset += len_s.len() + 4;
    if declared != body.len() {
        return Err(parse_err(offset, "content length mismatch"));
    }
    parse_suggestions_at(body, offset)
}

/// Parses a suggestion body. Errors carry the byte offset of the first
/// mismatch.
pub fn parse_suggestions(body: &str) -> Result<SuggestionList, WireError> {
    parse_suggestions_at(body, 0)
}

fn parse_suggestions_at(body: &str, base: usize) -> Result<SuggestionList, WireError> {
    let mut pos = 0usize;
    let expect = |pos: &mut usize, lit: &str| -> Result<(), WireError> {
        if body[*pos..].starts_with(lit) {
            *pos += lit.len();
            Ok(())
        } else {
            Err(parse_err(base + *pos, &format!("expected {lit:?}")))
        }
    };
    let scan_string = |pos: &mut usize| -> Result<String, WireError> {
        let rest = &body[*pos..];
        let end = rest
            .find('"')
            .ok_or_else(|| parse_err(base + *pos, "unterminated string"))?;
        let s = &rest[..end];
        *pos += end + 1;
        Ok(s.to_string())
    };

    expect(&mut pos, "window.google.ac.h([\"")?;
    let query = scan_string(&mut pos)?;
    expect(&mut pos, ", [")?;

    let mut rows = Vec::new();
    if body[pos..].starts_with(']') {
        pos += 1;
    } else {
        loop {
            expect(&mut pos, "{\"")?;
            let row_start = pos;
            let text = scan_string(&mut pos)?;
            expect(&mut pos, ",0,\"")?;
            let idx = scan_string(&mut pos)?;
            expect(&mut pos, "}")?;
            if idx != format!("{}", rows.len()) {
                return Err(parse_err(base + row_start, "row index out of order"));
            }
            rows.push(text);
            if body[pos..].starts_with(", ") {
                pos += 2;
            } else {
                expect(&mut pos, "]")?;
                break;
            }
        }
    }
    expect(&mut pos, ", \"\", \"\", \"\", \"\", \"\", {}])")?;
    if pos != body.len() {
        return Err(parse_err(base + pos, "trailing bytes"));
    }

    SuggestionList::new(&query, rows).map_err(|e| match e {
        WireError::InvalidRow { reason } => parse_err(base, &reason),
        other => other,
    })
}

// ----- DNS and traces -----

/// One observed DNS answer for a suggestion server.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DnsRecord {
    pub name: String,
    pub address: String,
    /// Time to live in virtual seconds; must be positive.
    pub ttl_s: u64,
}

/// One line of the segment trace consumed by the stats analyzer.
///
/// Records are taken where the endpoints emit segments, before any shim
/// rewriting, so option statistics reflect the traffic generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub timestamp_s: f64,
    pub conn_id: ConnId,
    pub direction: Direction,
    pub flags: SegFlags,
    pub ws: Option<u8>,
    pub ts_present: bool,
    /// Set on suggestion request segments.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub client_kind: Option<ClientKind>,
    pub user_id: u32,
    pub search_id: u64,
}

impl TraceRecord {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("trace record serializes")
    }

    pub fn from_json(line: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(line)
    }
}
