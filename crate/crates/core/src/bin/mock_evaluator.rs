//! Protocol test double: scores a scheme as `mean_budget / 1000`.
//!
//! `--exit-after N` makes the process exit abruptly (status 3) when the
//! (N+1)-th request arrives, without answering it.

use std::io::{BufRead, Write};

use clap::Parser;

use layerbudget::evaluators::protocol::{to_line, ClientMessage, EvaluatorMessage};

#[derive(Debug, Parser)]
struct Args {
    #[arg(long, default_value_t = 32)]
    layers: usize,
    #[arg(long, default_value = "mean_budget")]
    metric: String,
    #[arg(long, default_value_t = 1)]
    max_concurrency: usize,
    /// Answer every request with this score instead.
    #[arg(long)]
    constant: Option<f64>,
    #[arg(long)]
    exit_after: Option<usize>,
}

fn main() -> std::io::Result<()> {
    let args = Args::parse();
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let send = |out: &mut std::io::StdoutLock<'_>, msg: &EvaluatorMessage| -> std::io::Result<()> {
        out.write_all(to_line(msg).expect("messages serialize").as_bytes())?;
        out.flush()
    };
    send(
        &mut out,
        &EvaluatorMessage::Hello {
            layers: args.layers,
            metric: args.metric.clone(),
            max_concurrency: args.max_concurrency,
            deterministic: true,
        },
    )?;

    let mut answered = 0usize;
    for line in std::io::stdin().lock().lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<ClientMessage>(&line) {
            Ok(ClientMessage::Shutdown) => return Ok(()),
            Ok(ClientMessage::Evaluate { id, budgets, .. }) => {
                if args.exit_after.is_some_and(|n| answered >= n) {
                    std::process::exit(3);
                }
                let reply = if budgets.len() != args.layers {
                    EvaluatorMessage::Error {
                        id,
                        message: format!("expected {} layers, got {}", args.layers, budgets.len()),
                    }
                } else {
                    let mean = budgets.iter().map(|&k| f64::from(k)).sum::<f64>() / budgets.len() as f64;
                    EvaluatorMessage::Result {
                        id,
                        score: args.constant.unwrap_or(mean / 1000.0),
                    }
                };
                send(&mut out, &reply)?;
                answered += 1;
            }
            Err(e) => send(
                &mut out,
                &EvaluatorMessage::Error {
                    id: 0,
                    message: format!("unreadable request: {e}"),
                },
            )?,
        }
    }
    Ok(())
}
