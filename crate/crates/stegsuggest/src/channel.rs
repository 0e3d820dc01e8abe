//! Recorded channel transcripts: the offline bridge between `send` and
//! `recv`.
//!
//! `send` drives a complete middlebox exchange in process and records what
//! the sending shim emitted on the wire toward the receiving shim: the
//! client's original SYN (so the receiver can derive the session identifier
//! exactly as it would in path) followed by every suggestion response with
//! the codebook words still embedded. `recv` replays those records through a
//! fresh receiving shim and writes the reassembled payload.
//!
//! The transcript captures the embedding-relevant surface only — SYN shape
//! and response payloads. Handshake mechanics are reconstructed by the
//! reader, and timestamp-echo restoration toward a live client is the
//! simulator's business, not this file format's.

use std::fs;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};
use stegsuggest_core::rng::SplitMix64;
use stegsuggest_core::shim::{FrameKind, ShimConfig, ShimEvent, SrShim, SsShim};
use stegsuggest_core::sim::{mock_server_respond, SimConfig};
use stegsuggest_core::wire::{
    build_response, ClientKind, ConnId, Direction, DnsRecord, SegFlags, Segment, SuggestRequest,
    TsOption,
};
use stegsuggest_core::{ChannelKey, Codebook};

/// One line of a channel transcript file (line-delimited JSON).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum ChannelRecord {
    /// Transcript header: where the overt suggestion service lives and
    /// which digest the codebook uses.
    Meta {
        domain: String,
        server_addr: String,
        digest: String,
    },
    /// The client's original SYN options. The receiver replays this to
    /// derive and embed the session identifier itself.
    Syn {
        conn: String,
        isn: u32,
        ws: Option<u8>,
        tsval: Option<u32>,
    },
    /// One suggestion response as emitted by the sender, words included.
    List { at_us: u64, payload: String },
}

/// Reads a transcript from line-delimited JSON.
pub fn read_transcript(path: &Path) -> Result<Vec<ChannelRecord>> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading channel {}", path.display()))?;
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: ChannelRecord = serde_json::from_str(line)
            .with_context(|| format!("{} line {}: bad channel record", path.display(), idx + 1))?;
        out.push(rec);
    }
    Ok(out)
}

/// Writes a transcript as line-delimited JSON.
pub fn write_transcript(path: &Path, records: &[ChannelRecord]) -> Result<()> {
    let mut out = String::new();
    for rec in records {
        out.push_str(&serde_json::to_string(rec).context("serializing channel record")?);
        out.push('\n');
    }
    fs::write(path, out).with_context(|| format!("writing channel {}", path.display()))
}

/// What [`build_transcript`] produced, for reporting.
#[derive(Clone, Copy, Debug)]
pub struct SendSummary {
    /// Suggestion responses recorded (every one carries a frame).
    pub lists: u64,
    /// How many of those carried payload-bearing data frames.
    pub data_frames: u64,
    /// Payload bits handed to the framing layer.
    pub bits: u64,
}

/// What [`replay_transcript`] consumed, for reporting.
#[derive(Clone, Copy, Debug)]
pub struct RecvSummary {
    pub lists: u64,
    pub data_frames: u64,
}

/// Overt cover traffic: progressive typing over a fixed phrase pool. The
/// queries themselves carry nothing; they exist so the transcript looks like
/// a plausible autocomplete session.
fn overt_query(exchange: u64) -> String {
    const PHRASES: [&str; 6] = [
        "weather tomorrow",
        "news headlines",
        "translate hello",
        "map of the town",
        "simple recipes",
        "train schedule",
    ];
    let phrase = PHRASES[(exchange as usize / 8) % PHRASES.len()];
    let typed = (1 + exchange as usize % 8).min(phrase.len());
    phrase[..typed].trim_end().to_string()
}

/// True when the first `bits` bits of `a` and `b` agree.
fn bits_eq(a: &[u8], b: &[u8], bits: u64) -> bool {
    let full = (bits / 8) as usize;
    if a.len() < full || b.len() < full || a[..full] != b[..full] {
        return false;
    }
    let rem = (bits % 8) as u32;
    if rem == 0 {
        return true;
    }
    let mask = !0u8 << (8 - rem);
    a.get(full).copied().unwrap_or(0) & mask == b.get(full).copied().unwrap_or(0) & mask
}

/// Runs both middleboxes in process over a single synthetic connection and
/// records the sending side's emissions. The receiving shim rides along as a
/// self-check: the transcript is only returned if replaying it reproduces
/// the payload bit for bit.
pub fn build_transcript(
    book: &Codebook,
    key: ChannelKey,
    payload: &[u8],
    bit_len: u64,
    seed: u64,
    domain: &str,
    server_addr: &str,
) -> Result<(Vec<ChannelRecord>, SendSummary)> {
    ensure!(bit_len > 0, "payload is empty; there is nothing to send");
    ensure!(
        bit_len <= payload.len() as u64 * 8,
        "bit length {bit_len} exceeds the payload buffer"
    );

    let mut cfg = ShimConfig::new(key, vec![domain.to_string()]);
    cfg.digest = book.digest();
    let mut master = SplitMix64::new(seed);
    let mut sr = SrShim::new(&cfg, book.clone(), master.next_u64());
    let mut ss = SsShim::new(
        &cfg,
        book.clone(),
        payload.to_vec(),
        bit_len,
        master.next_u64(),
    );
    let mut srv_rng = SplitMix64::new(master.next_u64());
    let row_weights = SimConfig::default().row_count_weights;

    let dns = DnsRecord {
        name: domain.to_string(),
        address: server_addr.to_string(),
        ttl_s: 1 << 20,
    };
    let mut now = 0u64;
    sr.on_dns(&dns, now);
    ss.on_dns(&dns, now);

    let conn = ConnId {
        client: "10.9.0.1".to_string(),
        client_port: 40001,
        server: server_addr.to_string(),
        server_port: 80,
    };
    let isn = master.next_u64() as u32;
    let server_isn = master.next_u64() as u32;

    let mut records = vec![
        ChannelRecord::Meta {
            domain: domain.to_string(),
            server_addr: server_addr.to_string(),
            digest: book.digest().as_str().to_string(),
        },
        ChannelRecord::Syn {
            conn: conn.to_string(),
            isn,
            ws: None,
            tsval: None,
        },
    ];

    let mut syn = Segment::new(conn.clone(), Direction::ToServer, SegFlags::SYN, isn, 0);
    sr.on_segment(&mut syn, now);
    ss.on_segment(&mut syn, now);

    now += 1_000;
    let mut synack = Segment::new(
        conn.clone(),
        Direction::ToClient,
        SegFlags::syn_ack(),
        server_isn,
        isn.wrapping_add(1),
    );
    ss.on_segment(&mut synack, now);
    sr.on_segment(&mut synack, now);

    let mut client_sent = 0u32;
    let mut server_sent = 0u32;
    let mut client_rcvd = 0u32;
    let mut exchanges = 0u64;
    while !ss.channel_closed() {
        // Frame per response: one confirmation, the data frames, the
        // end-of-data marker, the close. Anything past that bound means the
        // exchange is not converging.
        ensure!(
            exchanges <= bit_len / 10 + 64,
            "channel failed to close after {exchanges} exchanges"
        );
        now += 50_000;
        let q = overt_query(exchanges);
        let req = SuggestRequest {
            client: ClientKind::Hp,
            cp: q.chars().count() as u32,
            phrase_prefix: q,
        };
        let mut reqseg = Segment::new(
            conn.clone(),
            Direction::ToServer,
            SegFlags::ack(),
            isn.wrapping_add(1).wrapping_add(client_sent),
            server_isn.wrapping_add(1).wrapping_add(client_rcvd),
        );
        reqseg.set_payload(req.serialize());
        let req_len = reqseg.payload.len() as u32;
        sr.on_segment(&mut reqseg, now);
        ss.on_segment(&mut reqseg, now);
        client_sent = client_sent.wrapping_add(req_len);

        now += 20_000;
        let list = mock_server_respond(&req, &row_weights, &mut srv_rng);
        let mut resp = Segment::new(
            conn.clone(),
            Direction::ToClient,
            SegFlags::ack(),
            server_isn.wrapping_add(1).wrapping_add(server_sent),
            isn.wrapping_add(1).wrapping_add(client_sent),
        );
        resp.set_payload(build_response(&list));
        server_sent = server_sent.wrapping_add(resp.payload.len() as u32);
        ss.on_segment(&mut resp, now);
        let on_wire = String::from_utf8(resp.payload.clone())
            .context("embedded response is not valid UTF-8")?;
        records.push(ChannelRecord::List {
            at_us: now,
            payload: on_wire,
        });
        sr.on_segment(&mut resp, now);
        client_rcvd = client_rcvd.wrapping_add(resp.payload.len() as u32);
        exchanges += 1;
    }

    let data_frames = ss
        .take_events()
        .iter()
        .filter(|e| matches!(e, ShimEvent::FrameSent { frame: FrameKind::Data, .. }))
        .count() as u64;

    let (rec_bytes, rec_bits) = sr
        .recovered()
        .context("internal error: the recorded exchange did not reassemble")?;
    ensure!(
        rec_bits == bit_len && bits_eq(&rec_bytes, payload, bit_len),
        "internal error: the recorded exchange decodes to different bits"
    );

    Ok((
        records,
        SendSummary {
            lists: exchanges,
            data_frames,
            bits: ss.bits_sent(),
        },
    ))
}

/// Replays a transcript through a fresh receiving shim and returns the
/// reassembled payload with its bit length.
///
/// The receiver re-derives the session identifier from the recorded SYN and
/// its own key; a transcript recorded under a different key fails to
/// register and is reported as never having closed.
pub fn replay_transcript(
    book: &Codebook,
    key: ChannelKey,
    records: &[ChannelRecord],
) -> Result<(Vec<u8>, u64, RecvSummary)> {
    let mut iter = records.iter();
    let (domain, server_addr) = match iter.next() {
        Some(ChannelRecord::Meta {
            domain,
            server_addr,
            digest,
        }) => {
            ensure!(
                digest == book.digest().as_str(),
                "transcript was recorded with digest {digest}, codebook uses {}",
                book.digest().as_str()
            );
            (domain.clone(), server_addr.clone())
        }
        _ => bail!("channel file must start with a meta record"),
    };
    let (conn, isn, ws, tsval) = match iter.next() {
        Some(ChannelRecord::Syn {
            conn,
            isn,
            ws,
            tsval,
        }) => {
            if let Some(w) = ws {
                ensure!(*w <= 14, "SYN record carries window scale {w} out of range");
            }
            let conn = ConnId::parse(conn)
                .with_context(|| format!("SYN record carries a bad connection id {conn:?}"))?;
            (conn, *isn, *ws, *tsval)
        }
        _ => bail!("channel file must carry the original SYN as its second record"),
    };

    let mut cfg = ShimConfig::new(key, vec![domain]);
    cfg.digest = book.digest();
    let mut sr = SrShim::new(&cfg, book.clone(), 1);
    let dns = DnsRecord {
        name: cfg.domains[0].clone(),
        address: server_addr,
        ttl_s: 1 << 20,
    };
    sr.on_dns(&dns, 0);

    let mut syn = Segment::new(conn.clone(), Direction::ToServer, SegFlags::SYN, isn, 0);
    syn.set_ws(ws);
    if let Some(tv) = tsval {
        syn.set_ts(Some(TsOption {
            tsval: tv,
            tsecr: 0,
        }));
    }
    sr.on_segment(&mut syn, 0);
    let marked_ts = syn.ts;

    // Reconstructed handshake reply. The far shim restored the original
    // option shape toward the server, so the server echoes timestamps only
    // when the client offered them — and by then the echo has been mapped
    // back to the value this shim emitted on the marked SYN.
    let server_isn = 0x5EED_1234u32;
    let mut synack = Segment::new(
        conn.clone(),
        Direction::ToClient,
        SegFlags::syn_ack(),
        server_isn,
        isn.wrapping_add(1),
    );
    if ws.is_some() {
        synack.set_ws(Some(7));
    }
    if tsval.is_some() {
        let emitted = marked_ts.expect("a timestamp-bearing SYN stays timestamp-bearing");
        synack.set_ts(Some(TsOption {
            tsval: 1_000,
            tsecr: emitted.tsval,
        }));
    }
    sr.on_segment(&mut synack, 500);

    let mut server_sent = 0u32;
    let mut lists = 0u64;
    for rec in iter {
        match rec {
            ChannelRecord::List { at_us, payload } => {
                let bytes = payload.clone().into_bytes();
                let mut seg = Segment::new(
                    conn.clone(),
                    Direction::ToClient,
                    SegFlags::ack(),
                    server_isn.wrapping_add(1).wrapping_add(server_sent),
                    isn.wrapping_add(1),
                );
                server_sent = server_sent.wrapping_add(bytes.len() as u32);
                seg.set_payload(bytes);
                sr.on_segment(&mut seg, *at_us);
                lists += 1;
            }
            ChannelRecord::Meta { .. } => bail!("unexpected second meta record"),
            ChannelRecord::Syn { .. } => {
                bail!("this decoder replays single-connection transcripts")
            }
        }
    }

    let data_frames = sr.frames_received();
    match sr.recovered() {
        Some((bytes, bits)) => Ok((bytes, bits, RecvSummary { lists, data_frames })),
        None => {
            let (_, got_bits) = sr.partial();
            bail!(
                "transcript ended before the channel closed; \
                 {got_bits} contiguous bits were recovered from {lists} lists"
            )
        }
    }
}
