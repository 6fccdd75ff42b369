//! Run manifests: a deterministic record of everything a run consumed, so
//! re-running the same command reproduces its artifacts byte for byte.

use std::fmt::Write as _;

pub struct Manifest {
    entries: Vec<(String, String)>,
}

impl Manifest {
    pub fn new(command: &str) -> Self {
        let mut m = Manifest { entries: Vec::new() };
        m.push("tool", format!("ovparse {}", env!("CARGO_PKG_VERSION")));
        m.push("command", command);
        m
    }

    pub fn push(&mut self, key: &str, value: impl ToString) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    pub fn push_flag(&mut self, key: &str, value: impl ToString) {
        self.push(&format!("flag.{key}"), value);
    }

    pub fn push_opt_flag(&mut self, key: &str, value: Option<impl ToString>) {
        match value {
            Some(v) => self.push_flag(key, v),
            None => self.push_flag(key, "-"),
        }
    }

    /// Echo a full training config under `config.` keys.
    pub fn push_config(&mut self, config: &ovparse_core::training::TrainConfig) {
        for line in config.to_kv_text().lines() {
            if let Some((k, v)) = line.split_once('=') {
                self.push(&format!("config.{k}"), v);
            }
        }
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }
}
