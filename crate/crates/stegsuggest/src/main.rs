//! The `stegsuggest` command line.
//!
//! Exit codes: 0 on success, 1 on usage errors (bad flags, missing
//! subcommand), 2 on data errors (unreadable or malformed files, key
//! mismatches, incomplete channels).

use std::fs;
use std::path::PathBuf;

use anyhow::{ensure, Context, Result};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

use stegsuggest::{channel, files};
use stegsuggest_core::codebook::{GROUPS, GROUP_SIZE, WORD_COUNT};
use stegsuggest_core::sim::{estimate_bandwidth, run_simulation};
use stegsuggest_core::stats::{analyze, render_report, ReportFormat, StatsOptions};
use stegsuggest_core::Codebook;

#[derive(Parser)]
#[command(
    name = "stegsuggest",
    version,
    about = "Covert channel in autocomplete traffic: two middleboxes tunnel a bit stream \
             through suggestion lists while the endpoints see unmodified traffic"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build a keyed codebook table from a ranked word list
    CodebookBuild(CodebookBuildArgs),
    /// Print a codebook's digest, fingerprint, and group sizes
    CodebookInspect(CodebookInspectArgs),
    /// Run the deterministic end-to-end simulation
    SimRun(SimRunArgs),
    /// Record a channel transcript that carries a payload
    Send(SendArgs),
    /// Replay a channel transcript and recover its payload
    Recv(RecvArgs),
    /// Analyze a segment trace
    Stats(StatsArgs),
    /// Closed-form channel bandwidth estimate
    Estimate(EstimateArgs),
}

#[derive(Args)]
struct CodebookBuildArgs {
    /// Ranked word list: `rank<TAB>word<TAB>pos` lines
    #[arg(long, value_name = "FILE")]
    wordlist: PathBuf,
    /// Channel key, decimal or 0x-prefixed hex
    #[arg(long, value_name = "KEY")]
    key: String,
    /// Digest algorithm: sha1 or sha256
    #[arg(long, value_name = "ALG", default_value = "sha1")]
    digest: String,
    /// Where to write the codebook table
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(Args)]
struct CodebookInspectArgs {
    /// Codebook table to inspect
    #[arg(long, value_name = "FILE")]
    codebook: PathBuf,
    /// Verify the fingerprint against this key
    #[arg(long, value_name = "KEY")]
    key: Option<String>,
}

#[derive(Args)]
struct SimRunArgs {
    /// Simulation config, `key = value` lines
    #[arg(long, value_name = "FILE")]
    config: PathBuf,
    /// Payload file: `bits=N` header line, then raw bytes
    #[arg(long, value_name = "FILE")]
    payload: PathBuf,
    /// Codebook shared by both middleboxes
    #[arg(long, value_name = "FILE")]
    codebook: PathBuf,
    /// Directory for report.json, trace.jsonl, recovered.bin
    #[arg(long, value_name = "DIR")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct SendArgs {
    /// Codebook shared by both middleboxes
    #[arg(long, value_name = "FILE")]
    codebook: PathBuf,
    /// Channel key, decimal or 0x-prefixed hex
    #[arg(long, value_name = "KEY")]
    key: String,
    /// Payload file: `bits=N` header line, then raw bytes
    #[arg(long, value_name = "FILE")]
    payload: PathBuf,
    /// Where to write the channel transcript
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Seed for the recorded exchange
    #[arg(long, value_name = "N", default_value_t = 1)]
    seed: u64,
    /// Overt service domain announced over DNS
    #[arg(long, value_name = "NAME", default_value = "suggest.example.test")]
    domain: String,
    /// Overt server address
    #[arg(long, value_name = "ADDR", default_value = "198.51.100.10")]
    server_addr: String,
}

#[derive(Args)]
struct RecvArgs {
    /// Codebook shared by both middleboxes
    #[arg(long, value_name = "FILE")]
    codebook: PathBuf,
    /// Channel key, decimal or 0x-prefixed hex
    #[arg(long, value_name = "KEY")]
    key: String,
    /// Channel transcript written by `send`
    #[arg(long, value_name = "FILE")]
    channel: PathBuf,
    /// Where to write the recovered payload
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(Args)]
struct StatsArgs {
    /// Trace file, one JSON segment record per line
    #[arg(long, value_name = "FILE")]
    trace: PathBuf,
    /// Drop users with fewer distinct searches from per-user statistics
    #[arg(long, value_name = "N", default_value_t = 5)]
    min_searches: u64,
    /// Daily window for the searches-per-hour rate, as `START-END` hours
    #[arg(long, value_name = "H-H", default_value = "9-17")]
    work_hours: String,
    /// Output format
    #[arg(long, value_enum, default_value_t = FormatArg::Table)]
    format: FormatArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    /// Aligned text tables
    Table,
    /// One JSON object per line
    JsonLines,
}

#[derive(Args)]
struct EstimateArgs {
    /// Mean suggestion lists per search
    #[arg(long, value_name = "F", default_value_t = 7.0)]
    lists_per_search: f64,
    /// Hidden bits carried per list
    #[arg(long, value_name = "N", default_value_t = 100)]
    bits_per_list: u32,
    /// Searches per hour per user
    #[arg(long, value_name = "F")]
    searches_per_hour: f64,
    /// Number of participating users
    #[arg(long, value_name = "N")]
    users: u32,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            std::process::exit(0);
        }
        Err(e) => {
            eprint!("{e}");
            std::process::exit(1);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(2);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::CodebookBuild(a) => codebook_build(a),
        Cmd::CodebookInspect(a) => codebook_inspect(a),
        Cmd::SimRun(a) => sim_run(a),
        Cmd::Send(a) => send(a),
        Cmd::Recv(a) => recv(a),
        Cmd::Stats(a) => stats(a),
        Cmd::Estimate(a) => estimate(a),
    }
}

fn codebook_build(a: CodebookBuildArgs) -> Result<()> {
    let words = files::read_wordlist(&a.wordlist)?;
    let key = files::parse_key(&a.key)?;
    let digest = files::parse_digest(&a.digest)?;
    let (book, stats) = Codebook::build_with_stats(&words, key, digest)
        .with_context(|| format!("building codebook from {}", a.wordlist.display()))?;
    files::write_codebook(&a.out, &book)?;
    println!("input words:             {}", stats.input);
    println!("after part-of-speech:    {}", stats.after_pos_filter);
    println!("after homograph filter:  {}", stats.after_homograph_filter);
    println!("selected:                {}", stats.selected);
    println!("digest:                  {}", book.digest().as_str());
    println!("fingerprint:             {}", book.fingerprint());
    println!("wrote {}", a.out.display());
    Ok(())
}

fn codebook_inspect(a: CodebookInspectArgs) -> Result<()> {
    let book = files::read_codebook(&a.codebook)?;
    println!("digest:      {}", book.digest().as_str());
    println!("fingerprint: {}", book.fingerprint());
    for g in 0..GROUPS {
        println!("group {g}:     {GROUP_SIZE} words");
    }
    println!("total:       {WORD_COUNT} words");
    if let Some(key) = a.key {
        let key = files::parse_key(&key)?;
        book.verify_key(key)
            .with_context(|| format!("verifying {}", a.codebook.display()))?;
        println!("key:         verified");
    }
    Ok(())
}

fn sim_run(a: SimRunArgs) -> Result<()> {
    let cfg = files::read_config(&a.config)?;
    let (payload, bits) = files::read_payload(&a.payload)?;
    let book = files::read_codebook_for_key(&a.codebook, cfg.key)?;
    ensure!(
        book.digest() == cfg.digest,
        "config digest {} does not match codebook digest {}",
        cfg.digest.as_str(),
        book.digest().as_str()
    );
    fs::create_dir_all(&a.out_dir)
        .with_context(|| format!("creating output directory {}", a.out_dir.display()))?;

    let out = run_simulation(&cfg, &book, &payload, bits);

    let trace_path = a.out_dir.join("trace.jsonl");
    files::write_trace(&trace_path, &out.trace)?;
    let recovered_path = a.out_dir.join("recovered.bin");
    let mut recovered = out.recovered.clone();
    recovered.truncate(out.recovered_bits.div_ceil(8) as usize);
    files::write_payload(&recovered_path, &recovered, out.recovered_bits)?;

    let mut report = out.report.clone();
    report.trace_path = Some(trace_path.display().to_string());
    let report_path = a.out_dir.join("report.json");
    let doc = serde_json::json!({ "report": report, "audit": out.audit });
    fs::write(&report_path, format!("{:#}\n", doc))
        .with_context(|| format!("writing report {}", report_path.display()))?;

    println!("searches simulated: {}", report.searches_simulated);
    println!("lists used:         {}", report.lists_used);
    println!("bits sent:          {}", report.bits_sent);
    println!("bits received:      {}", report.bits_received);
    println!("bandwidth:          {:.4} bit/s", report.achieved_bandwidth_bps);
    println!("channel closed:     {}", report.channel_closed);
    println!(
        "wrote {}, {}, {}",
        report_path.display(),
        trace_path.display(),
        recovered_path.display()
    );
    Ok(())
}

fn send(a: SendArgs) -> Result<()> {
    let key = files::parse_key(&a.key)?;
    let book = files::read_codebook_for_key(&a.codebook, key)?;
    let (payload, bits) = files::read_payload(&a.payload)?;
    let (records, summary) =
        channel::build_transcript(&book, key, &payload, bits, a.seed, &a.domain, &a.server_addr)?;
    channel::write_transcript(&a.out, &records)?;
    println!("payload bits:  {}", summary.bits);
    println!(
        "lists written: {} ({} carrying data)",
        summary.lists, summary.data_frames
    );
    println!("wrote {}", a.out.display());
    Ok(())
}

fn recv(a: RecvArgs) -> Result<()> {
    let key = files::parse_key(&a.key)?;
    let book = files::read_codebook_for_key(&a.codebook, key)?;
    let records = channel::read_transcript(&a.channel)?;
    let (mut bytes, bits, summary) = channel::replay_transcript(&book, key, &records)?;
    bytes.truncate(bits.div_ceil(8) as usize);
    files::write_payload(&a.out, &bytes, bits)?;
    println!(
        "lists replayed: {} ({} carrying data)",
        summary.lists, summary.data_frames
    );
    println!("recovered bits: {bits}");
    println!("wrote {}", a.out.display());
    Ok(())
}

fn stats(a: StatsArgs) -> Result<()> {
    let records = files::read_trace(&a.trace)?;
    let opts = StatsOptions {
        min_searches: a.min_searches,
        work_hours: parse_work_hours(&a.work_hours)?,
    };
    let report = analyze(&records, &opts);
    let format = match a.format {
        FormatArg::Table => ReportFormat::Table,
        FormatArg::JsonLines => ReportFormat::JsonLines,
    };
    print!("{}", render_report(&report, format));
    Ok(())
}

fn estimate(a: EstimateArgs) -> Result<()> {
    let bps = estimate_bandwidth(
        a.lists_per_search,
        a.bits_per_list,
        a.searches_per_hour,
        a.users,
    );
    println!("{bps:.2} bit/s");
    Ok(())
}

fn parse_work_hours(s: &str) -> Result<(f64, f64)> {
    let (lo, hi) = s
        .split_once('-')
        .with_context(|| format!("bad work hours {s:?}: expected START-END"))?;
    let lo: f64 = lo
        .trim()
        .parse()
        .with_context(|| format!("bad work hours {s:?}: start is not a number"))?;
    let hi: f64 = hi
        .trim()
        .parse()
        .with_context(|| format!("bad work hours {s:?}: end is not a number"))?;
    ensure!(
        (0.0..=24.0).contains(&lo) && (0.0..=24.0).contains(&hi) && lo < hi,
        "bad work hours {s:?}: need 0 <= start < end <= 24"
    );
    Ok((lo, hi))
}
