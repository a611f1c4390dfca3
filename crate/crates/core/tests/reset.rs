//! Lock resets driven by timeouts and CN failures.

mod common;

use common::*;
use dislock::bench::FailureSpec;

fn fail(cfg: &mut dislock::bench::BenchConfig, node: &str, at_us: f64) {
    cfg.failures.push(FailureSpec {
        node: node.into(),
        at_us,
        recover_at_us: None,
    });
    cfg.validate().unwrap();
}

#[test]
fn waiter_behind_failed_holder_times_out_and_resets() {
    for hierarchy in [false, true] {
        let mut c = scripted(3, 1, hierarchy, &[(3, 0, 0.0, X, 1e6), (1, 0, 50.0, X, 0.0)]);
        fail(&mut c, "cn3", 100.0);
        let out = run(&c);
        assert!(out.stats.resets_done >= 1, "hierarchy={hierarchy}");
        assert_eq!(out.stats.reset_verify_failures, 0);
        assert_eq!(out.stats.ops_completed, 1);
        assert!(!out.report.has_violation(), "{:?}", out.report);
        // The survivor's grant comes after one acquisition timeout.
        let g = out.grants.iter().find(|g| g.cn == 1).unwrap();
        assert!(g.t_granted - g.t_request >= 10_000_000);
    }
}

#[test]
fn concurrent_timeouts_elect_one_resetter() {
    let mut c = scripted(
        3,
        1,
        false,
        &[(3, 0, 0.0, X, 1e6), (1, 0, 50.0, X, 0.0), (2, 0, 51.0, X, 0.0)],
    );
    fail(&mut c, "cn3", 100.0);
    let out = run(&c);
    assert_eq!(out.stats.resets_won, 1);
    assert_eq!(out.stats.resets_done, 1);
    assert_eq!(out.stats.ops_completed, 2);
    assert_eq!(out.report.mutex_violations, 0);
}

#[test]
fn live_long_holder_finishes_before_its_waiters_retry() {
    // The holder outlives the waiters' timeout; the reset must wait for it.
    let out = run(&scripted(
        3,
        1,
        false,
        &[(1, 0, 0.0, X, 15_000.0), (2, 0, 10.0, X, 0.0), (3, 0, 20.0, S, 0.0)],
    ));
    assert!(out.stats.resets_done >= 1);
    // The initiator counts a timeout; the other waiter an abort.
    assert_eq!((out.stats.timeouts, out.stats.aborts), (1, 1));
    assert_eq!(out.stats.reset_verify_failures, 0);
    assert_eq!(out.stats.ops_completed, 3);
    assert_eq!(out.report.mutex_violations, 0);
}

#[test]
fn reset_latency_grows_with_clients() {
    let latency = |clients: u16| {
        let mut ops = vec![(2, 0, 0.0, X, 1e6)];
        for i in 0..clients {
            ops.push((1, i, 10.0, S, 0.0));
        }
        let mut c = scripted(2, clients, false, &ops);
        fail(&mut c, "cn2", 50.0);
        let out = run(&c);
        assert_eq!(out.stats.reset_verify_failures, 0);
        assert_eq!(out.stats.ops_completed, clients as u64);
        *out.stats.reset_latency.iter().max().unwrap()
    };
    let small = latency(4);
    let large = latency(128);
    assert!(large > small, "{large} <= {small}");
}

#[test]
fn contention_causes_no_resets_without_failures() {
    let out = run(&config(
        "seed = 11\n[workload]\nnum_cns = 8\nclients_per_cn = 16\nnum_locks = 10000\nops_per_client = 100\n",
    ));
    assert_eq!(out.stats.resets_done, 0);
    assert_eq!(out.stats.ops_completed, 8 * 16 * 100);
}

#[test]
fn mn_outage_stalls_then_recovers() {
    let mut c =
        config("seed = 3\n[workload]\nnum_cns = 2\nclients_per_cn = 4\nnum_locks = 100\nops_per_client = 300\n");
    c.failures.push(FailureSpec {
        node: "mn".into(),
        at_us: 200.0,
        recover_at_us: Some(3_000.0),
    });
    let out = run(&c);
    assert_eq!(out.stats.ops_completed, 2 * 4 * 300);
    assert_eq!(out.report.mutex_violations, 0);
    // Work stops during the outage, so the run lasts beyond it.
    assert!(out.stats.last_completion > 3_000_000);
}
