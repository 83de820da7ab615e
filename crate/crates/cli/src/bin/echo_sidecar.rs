//! Reference provider that returns each request's render unchanged.
//!
//! Speaks the newline-delimited JSON protocol on stdin/stdout and needs no
//! model weights. Each view's reference version counts up from 1.
//! `--fail-after N` answers the N+1th reference request with an error and
//! exits nonzero.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::process::ExitCode;

use clap::Parser;
use serde_json::json;
use splat_interior::provider::{WireReference, WireRequest, PROTOCOL_VERSION};

#[derive(Parser)]
#[command(name = "echo-sidecar")]
struct Opts {
    /// Accepted for parity with the diffusion sidecar; echo is the only mode.
    #[arg(long)]
    dry_run: bool,
    #[arg(long)]
    fail_after: Option<usize>,
}

fn main() -> ExitCode {
    let opts = Opts::parse();
    let stdin = std::io::stdin();
    let mut out = std::io::stdout().lock();
    let mut versions: HashMap<String, u32> = HashMap::new();
    let mut served = 0usize;
    for line in stdin.lock().lines() {
        let Ok(line) = line else {
            return ExitCode::FAILURE;
        };
        if line.trim().is_empty() {
            continue;
        }
        let reply = match serde_json::from_str::<WireRequest>(&line) {
            Ok(WireRequest::Hello { version }) if version == PROTOCOL_VERSION => {
                json!({ "type": "hello", "version": PROTOCOL_VERSION })
            }
            Ok(WireRequest::Hello { version }) => {
                json!({ "type": "error", "message": format!("unsupported protocol version {version}") })
            }
            Ok(WireRequest::InitReference(r)) | Ok(WireRequest::RefineReference(r)) => {
                if opts.fail_after.is_some_and(|n| served >= n) {
                    let msg = json!({ "type": "error", "message": "sidecar stopped on request" });
                    let _ = writeln!(out, "{msg}");
                    let _ = out.flush();
                    return ExitCode::from(3);
                }
                served += 1;
                echo(&r, &mut versions)
            }
            Err(e) => json!({ "type": "error", "message": format!("bad request: {e}") }),
        };
        if writeln!(out, "{reply}").and_then(|_| out.flush()).is_err() {
            return ExitCode::FAILURE;
        }
    }
    ExitCode::SUCCESS
}

fn echo(r: &WireReference, versions: &mut HashMap<String, u32>) -> serde_json::Value {
    let v = versions.entry(r.view_id.clone()).or_insert(0);
    *v += 1;
    json!({ "view_id": r.view_id, "reference_png": r.rgb, "version": *v })
}
