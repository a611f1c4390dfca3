//! wasm-bindgen exports for the static page in `www/`. Every function
//! returns a JSON string so the page stays plain JavaScript.

use dislock::bench::{self, BenchConfig, RunMetrics};
use dislock::checker::Report;
use dislock::cql::{Action, Layout, LockHeader};
use dislock::fabric::TraceSink;
use dislock::hier::ts_earlier;
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Serialize)]
struct HeaderView {
    word: String,
    qhead: u64,
    qsize: u64,
    wcnt: u64,
    reset_id: u64,
    capacity: u64,
    qhead_bits: u32,
}

fn view(layout: &Layout, word: u64) -> HeaderView {
    let h = layout.decode(word);
    HeaderView {
        word: format!("{word:#018x}"),
        qhead: h.qhead,
        qsize: h.qsize,
        wcnt: h.wcnt,
        reset_id: h.reset_id,
        capacity: layout.capacity(),
        qhead_bits: layout.qhead_bits(),
    }
}

fn parse_word(s: &str) -> Result<u64, String> {
    let t = s.trim();
    let r = match t.strip_prefix("0x").or_else(|| t.strip_prefix("0X")) {
        Some(hex) => u64::from_str_radix(hex, 16),
        None => t.parse(),
    };
    r.map_err(|e| format!("bad word {t:?}: {e}"))
}

fn json<T: Serialize>(r: Result<T, String>) -> String {
    match r {
        Ok(v) => serde_json::to_string(&v).expect("serializable"),
        Err(e) => serde_json::json!({ "error": e }).to_string(),
    }
}

fn header_step(word: &str, capacity: u32, action: &str) -> Result<HeaderView, String> {
    let layout = Layout::for_capacity(8, capacity as u64).map_err(|e| e.to_string())?;
    let w = parse_word(word)?;
    let a = match action {
        "" | "none" => return Ok(view(&layout, w)),
        "acq_s" => Action::AcqShared,
        "acq_x" => Action::AcqExclusive,
        "rel_r" => Action::RelReader,
        "rel_w" => Action::RelWriter,
        other => return Err(format!("unknown action {other:?}")),
    };
    Ok(view(&layout, w.wrapping_add(layout.faa_delta(a))))
}

/// Decodes `word` (decimal or 0x-hex) in the K=8 layout for `capacity`,
/// after applying the FAA for `action` (`none`, `acq_s`, `acq_x`,
/// `rel_r`, `rel_w`).
#[wasm_bindgen]
pub fn header(word: &str, capacity: u32, action: &str) -> String {
    json(header_step(word, capacity, action))
}

/// Encodes header fields into a word.
#[wasm_bindgen]
pub fn encode(capacity: u32, qhead: u32, qsize: u32, wcnt: u32, reset_id: u32) -> String {
    json((|| {
        let layout = Layout::for_capacity(8, capacity as u64).map_err(|e| e.to_string())?;
        let h = LockHeader {
            qhead: qhead as u64,
            qsize: qsize as u64,
            wcnt: wcnt as u64,
            reset_id: reset_id as u64,
        };
        let w = layout.encode(&h).map_err(|e| e.to_string())?;
        Ok(view(&layout, w))
    })())
}

/// -1 if `a` is earlier, 1 if `b` is, 0 when equal.
#[wasm_bindgen]
pub fn ts_order(a: u16, b: u16) -> i32 {
    if ts_earlier(a, b) {
        -1
    } else if ts_earlier(b, a) {
        1
    } else {
        0
    }
}

#[derive(Serialize)]
struct SimView {
    metrics: RunMetrics,
    report: Report,
}

/// Runs one benchmark config (TOML) and returns its metrics and checker
/// report.
#[wasm_bindgen]
pub fn simulate(config_toml: &str) -> String {
    json((|| {
        let cfg = BenchConfig::from_toml(config_toml).map_err(|e| e.to_string())?;
        let out = bench::run(&cfg, TraceSink::Off).map_err(|e| e.to_string())?;
        Ok(SimView {
            metrics: out.metrics,
            report: out.report,
        })
    })())
}
