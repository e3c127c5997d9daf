use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::RngCore;
use swarmcast::crypto::generate_keypair;
use swarmcast::sim::{self, MetricsReport, RunOptions, Scenario};
use swarmcast::wire::{Frame, FrameBody, KeyxRecord};

#[derive(Parser)]
#[command(name = "swarmcast", version, about = "Secure multi-hop telemetry broadcast simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write its metrics report as JSON.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Write a JSON-lines event trace here.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Run a scenario under every forwarding mode and print a table.
    Compare {
        #[arg(long)]
        scenario: PathBuf,
    },
    /// Print an X25519 key pair in hex.
    Keygen {
        /// 32-byte private scalar in hex; random if omitted.
        #[arg(long)]
        seed: Option<String>,
    },
    /// Decode a hex-encoded frame field by field.
    Inspect { hex: String },
}

enum Failure {
    /// Bad input from the user: exit 1.
    Invalid(String),
    /// Anything else: exit 2.
    Internal(String),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Run {
            scenario,
            out,
            seed,
            trace,
        } => cmd_run(&scenario, &out, seed, trace.as_deref()),
        Command::Compare { scenario } => cmd_compare(&scenario),
        Command::Keygen { seed } => cmd_keygen(seed.as_deref()),
        Command::Inspect { hex } => cmd_inspect(&hex),
    };
    match result {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(Failure::Invalid(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Internal(msg)) => {
            eprintln!("internal error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn load_scenario(path: &Path) -> Result<Scenario, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::Invalid(format!("cannot read {}: {e}", path.display())))?;
    Scenario::from_toml(&text).map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))
}

fn cmd_run(
    path: &Path,
    out: &Path,
    seed: Option<u64>,
    trace_path: Option<&Path>,
) -> Result<String, Failure> {
    let mut scenario = load_scenario(path)?;
    if let Some(s) = seed {
        scenario.seed = s;
    }
    let opts = RunOptions {
        trace: trace_path.is_some(),
        ..Default::default()
    };
    let result = sim::run_detailed(&scenario, opts).map_err(|e| Failure::Invalid(e.to_string()))?;
    fs::write(out, result.report.to_json() + "\n")
        .map_err(|e| Failure::Internal(format!("cannot write {}: {e}", out.display())))?;
    if let Some(tp) = trace_path {
        let mut lines = String::new();
        for rec in &result.trace {
            let line = serde_json::to_string(rec).map_err(|e| Failure::Internal(e.to_string()))?;
            lines.push_str(&line);
            lines.push('\n');
        }
        fs::write(tp, lines)
            .map_err(|e| Failure::Internal(format!("cannot write {}: {e}", tp.display())))?;
    }
    Ok(result.report.summary_line() + "\n")
}

fn cmd_compare(path: &Path) -> Result<String, Failure> {
    let scenario = load_scenario(path)?;
    let reports = sim::compare(&scenario).map_err(|e| Failure::Invalid(e.to_string()))?;
    Ok(compare_table(&reports))
}

fn compare_table(reports: &[MetricsReport]) -> String {
    let mut s = format!(
        "{:<18} {:>14} {:>10} {:>12} {:>12} {:>10}\n",
        "mode", "delivery_ratio", "tx/msg", "mean_ms", "p95_ms", "dups"
    );
    for r in reports {
        let a = &r.aggregate;
        let _ = writeln!(
            s,
            "{:<18} {:>14.4} {:>10.3} {:>12.2} {:>12.1} {:>10}",
            r.scenario.mode.name(),
            a.delivery_ratio,
            a.transmissions_per_originated_message,
            a.latency_ms.mean,
            a.latency_ms.p95,
            a.duplicates
        );
    }
    s
}

fn cmd_keygen(seed: Option<&str>) -> Result<String, Failure> {
    let scalar: [u8; 32] = match seed {
        Some(h) => hex::decode(h.trim())
            .map_err(|e| Failure::Invalid(format!("seed is not hex: {e}")))?
            .try_into()
            .map_err(|v: Vec<u8>| {
                Failure::Invalid(format!("seed must be 32 bytes, got {}", v.len()))
            })?,
        None => {
            let mut b = [0u8; 32];
            rand::rngs::OsRng.fill_bytes(&mut b);
            b
        }
    };
    let kp = generate_keypair(scalar);
    Ok(format!(
        "private: {}\npublic:  {}\n",
        hex::encode(kp.private_scalar),
        hex::encode(kp.public_point)
    ))
}

fn cmd_inspect(text: &str) -> Result<String, Failure> {
    let cleaned: String = text.chars().filter(|c| !c.is_whitespace()).collect();
    let raw = hex::decode(&cleaned).map_err(|e| Failure::Invalid(format!("not hex: {e}")))?;
    let frame = Frame::decode(&raw).map_err(|e| Failure::Invalid(e.to_string()))?;
    Ok(describe(&frame, raw.len()))
}

fn describe(f: &Frame, len: usize) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "frame: {len} bytes");
    let _ = writeln!(s, "  version:   1");
    let _ = writeln!(s, "  type:      {:?}", f.frame_type());
    let _ = writeln!(s, "  sender:    {}", f.sender);
    let _ = writeln!(s, "  frame_seq: {}", f.frame_seq);
    let _ = writeln!(s, "  next_hop_table: {} entries", f.next_hop_table.len());
    for e in &f.next_hop_table {
        let _ = writeln!(
            s,
            "    dest={} next_hop={} hops={}",
            e.destination, e.next_hop, e.hop_count
        );
    }
    match &f.body {
        FrameBody::Data(msgs) => {
            let _ = writeln!(s, "  messages: {}", msgs.len());
            for (i, m) in msgs.iter().enumerate() {
                let _ = writeln!(s, "    [{i}] origin={} seq={}", m.origin, m.origin_seq);
                let _ = writeln!(s, "        timestamp_ms={} ttl={}", m.timestamp_ms, m.ttl);
                let _ = writeln!(
                    s,
                    "        ciphertext ({} bytes)={}",
                    m.ciphertext.len(),
                    hex::encode(&m.ciphertext)
                );
                let _ = writeln!(s, "        tag={}", hex::encode(m.tag));
            }
        }
        FrameBody::Ogm(o) => {
            let _ = writeln!(
                s,
                "  ogm: originator={} seq={} metric={}",
                o.originator, o.ogm_seq, o.metric
            );
        }
        FrameBody::Keyx(recs) => {
            let _ = writeln!(s, "  keyx records: {}", recs.len());
            for r in recs {
                let _ = match r {
                    KeyxRecord::PubKey { point } => {
                        writeln!(s, "    pubkey point={}", hex::encode(point))
                    }
                    KeyxRecord::Wrapped {
                        member,
                        wrapped,
                        tag,
                    } => writeln!(
                        s,
                        "    wrapped member={} key={} tag={}",
                        member,
                        hex::encode(wrapped),
                        hex::encode(tag)
                    ),
                    KeyxRecord::RelayedPubKey { owner, point } => writeln!(
                        s,
                        "    relayed-pubkey owner={} point={}",
                        owner,
                        hex::encode(point)
                    ),
                };
            }
        }
    }
    s
}
