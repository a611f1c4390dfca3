use std::io::Write;

use serde::{Deserialize, Serialize};

/// One JSONL trace line. The first seven fields are always present; lock
/// and reset events carry the optional ones.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    /// Simulated time in nanoseconds.
    pub t: u64,
    pub node: String,
    pub kind: String,
    pub addr: u64,
    pub old: u64,
    pub new: u64,
    pub tag: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lock: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub client: Option<u16>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seq: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ts: Option<u16>,
    #[serde(rename = "lockId", default, skip_serializing_if = "Option::is_none")]
    pub lock_id: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cn: Option<u16>,
}

pub enum TraceSink {
    Off,
    Memory(Vec<u8>),
    Writer(Box<dyn Write>),
}

impl TraceSink {
    pub fn enabled(&self) -> bool {
        !matches!(self, TraceSink::Off)
    }

    pub(crate) fn emit(&mut self, ev: &TraceEvent) {
        let out: &mut dyn Write = match self {
            TraceSink::Off => return,
            TraceSink::Memory(buf) => buf,
            TraceSink::Writer(w) => w.as_mut(),
        };
        // Trace output is best-effort diagnostics; a failed write must not
        // perturb the simulation.
        let _ = serde_json::to_writer(&mut *out, ev);
        let _ = out.write_all(b"\n");
    }

    pub(crate) fn flush(&mut self) {
        if let TraceSink::Writer(w) = self {
            let _ = w.flush();
        }
    }
}
