//! Single-pass trace analyzer.
//!
//! Consumes the segment trace the harness emits (or any file in the same
//! shape) and produces the four summaries an operator cares about when
//! sizing the channel: request share per client family, per-user search
//! activity, SYN option totals, and the window-scale value breakdown.
//!
//! All aggregation is order-free, so reordering records leaves every number
//! unchanged, and every mean or deviation guards its population explicitly
//! rather than dividing by zero.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use alloc::{format, vec};

use serde::Serialize;

use crate::wire::{ClientKind, TraceRecord};

/// Analyzer knobs. Users below `min_searches` searches are excluded from
/// the per-user statistics; `work_hours` bounds the daily window (in hours
/// of the virtual day) used for the searches-per-hour rate.
#[derive(Clone, Copy, Debug)]
pub struct StatsOptions {
    pub min_searches: u64,
    pub work_hours: (f64, f64),
}

impl Default for StatsOptions {
    fn default() -> Self {
        StatsOptions {
            min_searches: 5,
            work_hours: (9.0, 17.0),
        }
    }
}

/// A mean and population standard deviation over `n` observations. `n` is
/// the explicit zero-population marker: when it is zero both moments are
/// reported as zero.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct MeanSd {
    pub n: u64,
    pub mean: f64,
    pub sd: f64,
}

impl MeanSd {
    fn over(values: &[f64]) -> MeanSd {
        let n = values.len() as u64;
        if n == 0 {
            return MeanSd::default();
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        MeanSd {
            n,
            mean,
            sd: libm::sqrt(var),
        }
    }
}

/// One client family's share of suggestion requests.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClientRow {
    pub client: ClientKind,
    pub requests: u64,
    pub percent: f64,
}

/// Activity statistics over users that passed the search-count filter.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct PerUserStats {
    pub users_total: u64,
    pub users_qualifying: u64,
    pub searches_per_user: MeanSd,
    pub requests_per_user: MeanSd,
    pub requests_per_search: MeanSd,
    pub searches_per_work_hour: MeanSd,
    /// Hours of the observation span that fall inside the daily work
    /// window; the denominator of the rate above.
    pub work_hours_observed: f64,
}

/// Option totals over client SYN segments.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SynStats {
    pub total_syn: u64,
    pub with_ws: u64,
    pub with_ts: u64,
    pub ws_percent: f64,
    pub ts_percent: f64,
}

/// One row of the window-scale breakdown. `ws: None` is the SYNs-without-
/// WS row, so the `syn_percent` column of the whole table sums to 100.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WsRow {
    pub ws: Option<u8>,
    pub count: u64,
    /// Share of all SYNs carrying this value.
    pub syn_percent: f64,
    /// Share of this value's SYNs that also carry a timestamp.
    pub ts_percent: f64,
}

/// Everything [`analyze`] computes.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct StatsReport {
    pub records: u64,
    pub by_client: Vec<ClientRow>,
    pub per_user: PerUserStats,
    pub syn: SynStats,
    pub ws_table: Vec<WsRow>,
    pub min_searches: u64,
    pub work_hours: (f64, f64),
}

/// Overlap, in hours, between the span `[t0, t1]` (seconds) and the daily
/// `[start_h, end_h)` window repeated every 24 hours.
fn work_hours_overlap(t0: f64, t1: f64, start_h: f64, end_h: f64) -> f64 {
    if t1 <= t0 || end_h <= start_h {
        return 0.0;
    }
    let day = 86_400.0;
    let first_day = libm::floor(t0 / day) as i64;
    let last_day = libm::floor(t1 / day) as i64;
    let mut total_s = 0.0;
    for d in first_day..=last_day {
        let base = d as f64 * day;
        let lo = (base + start_h * 3600.0).max(t0);
        let hi = (base + end_h * 3600.0).min(t1);
        if hi > lo {
            total_s += hi - lo;
        }
    }
    total_s / 3600.0
}

fn hour_of_day(ts: f64) -> f64 {
    let day = 86_400.0;
    (ts - libm::floor(ts / day) * day) / 3600.0
}

struct UserAgg {
    requests: u64,
    searches: BTreeSet<u64>,
}

/// Computes the full report in one pass over the records.
///
/// Searches are distinct `search_id` values per user; requests are records
/// carrying a `client_kind`; SYN statistics cover pure SYN segments only.
/// The searches-per-hour rate counts searches whose earliest record falls
/// inside the work window, divided by the observed work hours.
pub fn analyze<'a, I>(records: I, opts: &StatsOptions) -> StatsReport
where
    I: IntoIterator<Item = &'a TraceRecord>,
{
    let mut total_records = 0u64;
    let mut clients: BTreeMap<&'static str, (ClientKind, u64)> = BTreeMap::new();
    let mut users: BTreeMap<u32, UserAgg> = BTreeMap::new();
    let mut search_first_ts: BTreeMap<(u32, u64), f64> = BTreeMap::new();
    let mut t_min = f64::INFINITY;
    let mut t_max = f64::NEG_INFINITY;
    let mut syn = SynStats::default();
    let mut ws_counts: BTreeMap<Option<u8>, (u64, u64)> = BTreeMap::new();

    for rec in records {
        total_records += 1;
        t_min = t_min.min(rec.timestamp_s);
        t_max = t_max.max(rec.timestamp_s);

        let user = users.entry(rec.user_id).or_insert_with(|| UserAgg {
            requests: 0,
            searches: BTreeSet::new(),
        });
        user.searches.insert(rec.search_id);
        if let Some(kind) = rec.client_kind {
            user.requests += 1;
            let c = clients.entry(kind.as_str()).or_insert((kind, 0));
            c.1 += 1;
        }
        let first = search_first_ts
            .entry((rec.user_id, rec.search_id))
            .or_insert(f64::INFINITY);
        *first = first.min(rec.timestamp_s);

        if rec.flags.syn && !rec.flags.ack {
            syn.total_syn += 1;
            if rec.ws.is_some() {
                syn.with_ws += 1;
            }
            if rec.ts_present {
                syn.with_ts += 1;
            }
            let slot = ws_counts.entry(rec.ws).or_insert((0, 0));
            slot.0 += 1;
            if rec.ts_present {
                slot.1 += 1;
            }
        }
    }

    // Requests by client, in the canonical kind order.
    let total_requests: u64 = clients.values().map(|&(_, n)| n).sum();
    let mut by_client = Vec::new();
    for kind in ClientKind::ALL {
        if let Some(&(_, n)) = clients.get(kind.as_str()) {
            by_client.push(ClientRow {
                client: kind,
                requests: n,
                percent: if total_requests > 0 {
                    n as f64 * 100.0 / total_requests as f64
                } else {
                    0.0
                },
            });
        }
    }

    // SYN percentages and the per-value table.
    if syn.total_syn > 0 {
        syn.ws_percent = syn.with_ws as f64 * 100.0 / syn.total_syn as f64;
        syn.ts_percent = syn.with_ts as f64 * 100.0 / syn.total_syn as f64;
    }
    let ws_table = ws_counts
        .iter()
        .map(|(&ws, &(count, ts))| WsRow {
            ws,
            count,
            syn_percent: count as f64 * 100.0 / syn.total_syn as f64,
            ts_percent: if count > 0 {
                ts as f64 * 100.0 / count as f64
            } else {
                0.0
            },
        })
        .collect();

    // Per-user moments over the qualifying population.
    let (start_h, end_h) = opts.work_hours;
    let observed = if t_min.is_finite() {
        work_hours_overlap(t_min, t_max, start_h, end_h)
    } else {
        0.0
    };
    let mut searches_pu = Vec::new();
    let mut requests_pu = Vec::new();
    let mut req_per_search = Vec::new();
    let mut rate_pu = Vec::new();
    for (uid, agg) in &users {
        let n_searches = agg.searches.len() as u64;
        if n_searches < opts.min_searches {
            continue;
        }
        searches_pu.push(n_searches as f64);
        requests_pu.push(agg.requests as f64);
        req_per_search.push(agg.requests as f64 / n_searches as f64);
        let in_window = agg
            .searches
            .iter()
            .filter(|&&sid| {
                search_first_ts
                    .get(&(*uid, sid))
                    .map(|&ts| {
                        let h = hour_of_day(ts);
                        h >= start_h && h < end_h
                    })
                    .unwrap_or(false)
            })
            .count() as f64;
        rate_pu.push(if observed > 0.0 {
            in_window / observed
        } else {
            0.0
        });
    }

    StatsReport {
        records: total_records,
        by_client,
        per_user: PerUserStats {
            users_total: users.len() as u64,
            users_qualifying: searches_pu.len() as u64,
            searches_per_user: MeanSd::over(&searches_pu),
            requests_per_user: MeanSd::over(&requests_pu),
            requests_per_search: MeanSd::over(&req_per_search),
            searches_per_work_hour: MeanSd::over(&rate_pu),
            work_hours_observed: observed,
        },
        syn,
        ws_table,
        min_searches: opts.min_searches,
        work_hours: opts.work_hours,
    }
}

/// Output shapes for [`render_report`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Table,
    JsonLines,
}

/// Renders the report as aligned text tables or as one JSON object per
/// line.
pub fn render_report(report: &StatsReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Table => render_table(report),
        ReportFormat::JsonLines => render_json_lines(report),
    }
}

fn render_table(r: &StatsReport) -> String {
    let mut out = String::new();
    out.push_str(&format!("records analyzed: {}\n\n", r.records));

    out.push_str("requests by client\n");
    out.push_str("client      requests  percent\n");
    for row in &r.by_client {
        out.push_str(&format!(
            "{:<10}  {:>8}  {:>7.2}\n",
            row.client.as_str(),
            row.requests,
            row.percent
        ));
    }

    let p = &r.per_user;
    out.push_str(&format!(
        "\nper-user statistics ({} of {} users with at least {} searches)\n",
        p.users_qualifying, p.users_total, r.min_searches
    ));
    out.push_str("metric                    mean        sd\n");
    for (name, m) in [
        ("searches/user", p.searches_per_user),
        ("requests/user", p.requests_per_user),
        ("requests/search", p.requests_per_search),
        ("searches/work-hour", p.searches_per_work_hour),
    ] {
        out.push_str(&format!("{name:<22}  {:>8.2}  {:>8.2}\n", m.mean, m.sd));
    }

    out.push_str(&format!(
        "\nsyn option totals\ntotal syn   {}\nwith ws     {} ({:.1}%)\nwith ts     {} ({:.1}%)\n",
        r.syn.total_syn, r.syn.with_ws, r.syn.ws_percent, r.syn.with_ts, r.syn.ts_percent
    ));

    out.push_str("\nws value breakdown\nws       count  syn-percent  with-ts-percent\n");
    for row in &r.ws_table {
        let label = row
            .ws
            .map_or_else(|| "absent".to_string(), |v| format!("{v}"));
        out.push_str(&format!(
            "{label:<7}  {:>5}  {:>11.2}  {:>15.2}\n",
            row.count, row.syn_percent, row.ts_percent
        ));
    }

    out.push_str(&format!(
        "\nnote: deviations are population form (divide by n); \
work hours are {:.0}:00-{:.0}:00\n",
        r.work_hours.0, r.work_hours.1
    ));
    out
}

#[derive(Serialize)]
struct Tagged<'a, T: Serialize> {
    record: &'a str,
    #[serde(flatten)]
    body: &'a T,
}

fn json_line<T: Serialize>(record: &str, body: &T) -> String {
    serde_json::to_string(&Tagged { record, body }).expect("report serializes")
}

fn render_json_lines(r: &StatsReport) -> String {
    #[derive(Serialize)]
    struct Meta {
        records: u64,
        min_searches: u64,
        work_hours_start: f64,
        work_hours_end: f64,
    }
    let mut lines = vec![json_line(
        "meta",
        &Meta {
            records: r.records,
            min_searches: r.min_searches,
            work_hours_start: r.work_hours.0,
            work_hours_end: r.work_hours.1,
        },
    )];
    for row in &r.by_client {
        lines.push(json_line("client", row));
    }
    lines.push(json_line("per_user", &r.per_user));
    lines.push(json_line("syn", &r.syn));
    for row in &r.ws_table {
        lines.push(json_line("ws", row));
    }
    let mut out = lines.join("\n");
    out.push('\n');
    out
}
