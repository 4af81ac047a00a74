//! JSON report envelope.
//!
//! Payloads go through `serde_json::Value`, whose object map is ordered, so
//! keys come out sorted; floats use serde_json's shortest round-trip form.

use serde::Serialize;
use serde_json::Value;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportEnvelope {
    pub tool_version: String,
    /// Arguments after the program name, minus thread-count flags.
    pub command: Vec<String>,
    pub seed: u64,
    pub payload: Value,
}

impl ReportEnvelope {
    pub fn new(command: Vec<String>, seed: u64, payload: impl Serialize) -> Self {
        Self {
            tool_version: TOOL_VERSION.to_string(),
            command,
            seed,
            payload: serde_json::to_value(payload).expect("report payload serializes"),
        }
    }

    /// Pretty JSON with sorted keys and a trailing newline.
    pub fn to_json(&self) -> String {
        let value = serde_json::to_value(self).expect("envelope serializes");
        let mut s = serde_json::to_string_pretty(&value).expect("value serializes");
        s.push('\n');
        s
    }
}

/// Drops `--threads N` / `--threads=N` so the echoed command does not depend
/// on parallelism.
pub fn echo_command(args: &[String]) -> Vec<String> {
    let mut out = Vec::with_capacity(args.len());
    let mut skip = false;
    for a in args {
        if skip {
            skip = false;
            continue;
        }
        if a == "--threads" {
            skip = true;
            continue;
        }
        if a.starts_with("--threads=") {
            continue;
        }
        out.push(a.clone());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keys_sorted() {
        #[derive(Serialize)]
        struct P {
            zeta: f64,
            alpha: u32,
        }
        let json = ReportEnvelope::new(
            vec![],
            3,
            P {
                zeta: 0.1,
                alpha: 1,
            },
        )
        .to_json();
        assert!(json.find("\"alpha\"").unwrap() < json.find("\"zeta\"").unwrap());
        assert!(json.find("\"command\"").unwrap() < json.find("\"tool_version\"").unwrap());
        assert!(json.contains("0.1"));
    }

    #[test]
    fn threads_removed() {
        let args: Vec<String> = ["probe", "--threads", "8", "--seed", "1", "--threads=2"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        assert_eq!(echo_command(&args), vec!["probe", "--seed", "1"]);
    }
}
