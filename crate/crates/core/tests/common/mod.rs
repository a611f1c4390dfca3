#![allow(dead_code)]

use dislock::bench::{self, BenchConfig, RunOutput, ScriptedOp};
use dislock::cql::Mode;
use dislock::fabric::TraceSink;

pub const X: Mode = Mode::Exclusive;
pub const S: Mode = Mode::Shared;

pub fn config(text: &str) -> BenchConfig {
    BenchConfig::from_toml(text).expect("test config parses")
}

pub fn run(cfg: &BenchConfig) -> RunOutput {
    bench::run(cfg, TraceSink::Off).expect("run succeeds")
}

pub fn run_traced(cfg: &BenchConfig) -> RunOutput {
    bench::run(cfg, TraceSink::Memory(Vec::new())).expect("run succeeds")
}

/// `(cn, client, at_us, mode, hold_us)` on lock 0.
pub fn script(ops: &[(u16, u16, f64, Mode, f64)]) -> Vec<ScriptedOp> {
    ops.iter()
        .map(|&(cn, client, at_us, mode, hold_us)| ScriptedOp {
            cn,
            client,
            at_us,
            lock: 0,
            mode,
            hold_us,
        })
        .collect()
}

/// A cluster of `cns` × `clients` on a single lock running `ops`.
pub fn scripted(cns: u16, clients: u16, hierarchy: bool, ops: &[(u16, u16, f64, Mode, f64)]) -> BenchConfig {
    let mut c = config(&format!(
        "seed = 1\n[workload]\nnum_cns = {cns}\nclients_per_cn = {clients}\nnum_locks = 1\n[lock]\nhierarchy = {hierarchy}\n"
    ));
    c.workload.script = script(ops);
    c.validate().expect("scripted config is valid");
    c
}

/// Clients granted, in grant order.
pub fn grant_order(out: &RunOutput) -> Vec<u16> {
    let mut g: Vec<_> = out.grants.iter().map(|g| (g.t_granted, g.client)).collect();
    g.sort();
    g.into_iter().map(|(_, c)| c).collect()
}

pub fn cid(cn: u16, local: u16) -> u16 {
    (cn << 8) | local
}
