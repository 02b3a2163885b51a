//! Scripted classifier speaking the line protocol, for exercising the exec
//! backend. Usage: `mock-classifier <mode> [model-file]`.
//!
//! Modes: `fixed`, `mean` (labels from mean intensity), `desk <file>` (serves
//! a saved desk model), and the faulty `malformed`, `dead`, `bad-handshake`,
//! `wrong-id`, `small-k`.

use std::io::{self, BufRead, Write};
use std::process::ExitCode;

use advdetect_core::desk_model::DeskModel;
use advdetect_core::gateway::{Handshake, Reply, Request, PROTOCOL_NAME, PROTOCOL_VERSION};
use advdetect_core::{Classifier, Image};

const K: usize = 10;

fn by_mean(img: &Image) -> Reply {
    let top1 = ((img.mean_intensity() * K as f64) as usize).min(K - 1);
    Reply {
        id: 0,
        labels: (0..5).map(|i| ((top1 + i) % K) as u32).collect(),
        confidences: vec![0.6, 0.2, 0.1, 0.05, 0.05],
    }
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mode = args.first().map(String::as_str).unwrap_or("fixed");
    let model = match mode {
        "desk" => match args.get(1).map(DeskModel::load) {
            Some(Ok(m)) => Some(m),
            _ => {
                eprintln!("desk mode needs a readable model file");
                return ExitCode::from(2);
            }
        },
        _ => None,
    };
    let num_labels = match (mode, &model) {
        ("small-k", _) => 5,
        (_, Some(m)) => m.num_labels(),
        _ => K,
    };
    let protocol = if mode == "bad-handshake" { "something-else" } else { PROTOCOL_NAME };
    let hs = Handshake { protocol: protocol.into(), version: PROTOCOL_VERSION, num_labels };
    let mut out = io::stdout().lock();
    if writeln!(out, "{}", serde_json::to_string(&hs).unwrap()).and_then(|_| out.flush()).is_err() {
        return ExitCode::FAILURE;
    }

    for line in io::stdin().lock().lines() {
        let Ok(line) = line else { break };
        if mode == "dead" {
            return ExitCode::FAILURE;
        }
        let req: Request = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                eprintln!("bad request: {e}");
                return ExitCode::FAILURE;
            }
        };
        let img = match req.decode_image() {
            Ok(i) => i,
            Err(e) => {
                eprintln!("{e}");
                return ExitCode::FAILURE;
            }
        };
        let mut reply = match (&model, mode) {
            (Some(m), _) => {
                let t = m.classify_top5(&img).expect("desk model classifies");
                Reply { id: 0, labels: t.labels.to_vec(), confidences: t.confidences.to_vec() }
            }
            (None, "fixed") => Reply { id: 0, labels: vec![0, 1, 2, 3, 4], confidences: vec![0.5, 0.2, 0.1, 0.1, 0.1] },
            _ => by_mean(&img),
        };
        reply.id = if mode == "wrong-id" { req.id + 1 } else { req.id };
        let text = if mode == "malformed" { "{\"id\": oops".to_string() } else { serde_json::to_string(&reply).unwrap() };
        if writeln!(out, "{text}").and_then(|_| out.flush()).is_err() {
            break;
        }
    }
    ExitCode::SUCCESS
}
