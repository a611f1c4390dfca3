//! Rebuilds grant intervals from a JSONL trace.

use std::collections::HashMap;
use std::io::BufRead;

use thiserror::Error;

use super::{GrantEvent, Via};
use crate::cql::Mode;
use crate::fabric::{Time, TraceEvent};

#[derive(Debug, Error)]
pub enum ParseError {
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("line {line}: {what}")]
    Malformed { line: usize, what: &'static str },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResetRecord {
    pub t: Time,
    pub lock: u32,
    pub phase: String,
    pub cn: u16,
}

#[derive(Debug, Clone, Default)]
pub struct ParsedTrace {
    pub grants: Vec<GrantEvent>,
    /// Requests with no grant by the end of the trace.
    pub pending: Vec<GrantEvent>,
    pub failures: Vec<(u16, Time)>,
    pub resets: Vec<ResetRecord>,
    pub end: Time,
    /// Cross-CN skew bound recorded by the run, if any.
    pub skew: Option<Time>,
}

fn cn_of(node: &str) -> Option<u16> {
    node.strip_prefix("cn")?.parse().ok()
}

pub fn parse_trace(r: impl BufRead) -> Result<ParsedTrace, ParseError> {
    let mut out = ParsedTrace::default();
    let mut waiting: HashMap<u16, GrantEvent> = HashMap::new();
    let mut open: HashMap<u16, usize> = HashMap::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        let lineno = n + 1;
        if line.trim().is_empty() {
            continue;
        }
        let ev: TraceEvent = serde_json::from_str(&line).map_err(|source| ParseError::Json { line: lineno, source })?;
        out.end = out.end.max(ev.t);
        let bad = |what| ParseError::Malformed { line: lineno, what };
        match ev.kind.as_str() {
            "META" => out.skew = Some(ev.addr),
            "ACQ" => {
                let client = ev.client.ok_or(bad("ACQ without client"))?;
                let mode = ev
                    .mode
                    .as_deref()
                    .and_then(Mode::parse)
                    .ok_or(bad("ACQ without mode"))?;
                waiting.insert(
                    client,
                    GrantEvent {
                        lock: ev.lock.ok_or(bad("ACQ without lock"))?,
                        client,
                        cn: ev.cn.ok_or(bad("ACQ without cn"))?,
                        mode,
                        t_request: ev.t,
                        t_granted: 0,
                        t_released: None,
                        enqueue_seq: 0,
                        ts: None,
                        via: Via::Immediate,
                    },
                );
            }
            "GRANT" => {
                let client = ev.client.ok_or(bad("GRANT without client"))?;
                let mut g = waiting.remove(&client).ok_or(bad("GRANT without ACQ"))?;
                g.t_granted = ev.t;
                g.enqueue_seq = ev.seq.unwrap_or(0);
                g.ts = ev.ts;
                g.via = Via::parse(&ev.tag).ok_or(bad("unknown grant path"))?;
                open.insert(client, out.grants.len());
                out.grants.push(g);
            }
            "REL" => {
                let client = ev.client.ok_or(bad("REL without client"))?;
                let i = open.remove(&client).ok_or(bad("REL without GRANT"))?;
                out.grants[i].t_released = Some(ev.t);
            }
            "ABANDON" => {
                if let Some(c) = ev.client {
                    waiting.remove(&c);
                }
            }
            "FAIL" => {
                if let Some(cn) = cn_of(&ev.node) {
                    out.failures.push((cn, ev.t));
                }
            }
            "RESET" => out.resets.push(ResetRecord {
                t: ev.t,
                lock: ev.lock_id.ok_or(bad("RESET without lockId"))?,
                phase: ev.phase.clone().ok_or(bad("RESET without phase"))?,
                cn: ev.cn.ok_or(bad("RESET without cn"))?,
            }),
            _ => {}
        }
    }
    let mut pending: Vec<GrantEvent> = waiting.into_values().collect();
    pending.sort_by_key(|g| (g.t_request, g.client));
    out.pending = pending;
    Ok(out)
}
