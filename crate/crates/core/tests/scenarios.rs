use sieve_core::rsm::Mode;
use sieve_core::scenario::{Scenario, ScenarioError};

fn scenario(protocol: &str, n: usize, faults: &str, extra: &str) -> Scenario {
    let text = format!(
        r#"
v = 1
name = "inline"
protocol = "{protocol}"
mode = "full"
{extra}

[sim]
n = {n}
timeout = 200

{faults}

[workload]
generate = {{ count = 15, interval = 40, rand_fraction = 0.3 }}

[[assert]]
kind = "agreement"

[[assert]]
kind = "converged"

[[assert]]
kind = "all-committed"

[[assert]]
kind = "quiesced"
"#
    );
    Scenario::parse(&text).unwrap()
}

fn byzantine(p: u16, strategy: &str) -> String {
    format!("[[faults]]\nprocess = {p}\nkind = \"byzantine\"\nstrategy = \"{strategy}\"\n")
}

fn passes(mut sc: Scenario, seeds: std::ops::Range<u64>) {
    for mode in [Mode::Full, Mode::Hash] {
        sc.mode = mode;
        for r in sc.sweep(seeds.clone()).unwrap() {
            assert!(r.passed(), "{mode} seed {}: {:?}", r.seed, r.violations);
        }
    }
}

#[test]
fn sieve_tolerates_each_replica_strategy() {
    for s in ["silent", "wrong-digest", "garbage-responder", "silent-responder"] {
        passes(scenario("sieve", 4, &byzantine(3, s), ""), 0..4);
    }
}

#[test]
fn sieve_replaces_a_silent_leader() {
    let sc = scenario("sieve", 4, &byzantine(0, "silent"), "");
    for seed in 0..3 {
        let r = sc.run(seed).unwrap();
        assert!(r.passed(), "{:?}", r.violations);
        assert!(r.metrics.epochs_started >= 1);
    }
}

#[test]
fn equivocating_leader_cannot_split_histories() {
    passes(scenario("sieve", 4, &byzantine(0, "equivocating-leader"), ""), 0..4);
}

#[test]
fn seven_replicas_with_two_faults() {
    let faults = byzantine(5, "wrong-digest") + &byzantine(6, "garbage-responder");
    passes(scenario("sieve", 7, &faults, ""), 0..3);
    let crash = "[[faults]]\nprocess = 0\nkind = \"crash\"\nat = 150\n".to_string() + &byzantine(4, "silent");
    passes(scenario("sieve", 7, &crash, ""), 0..3);
}

#[test]
fn strict_validity_does_not_change_histories() {
    let mut sc = scenario("sieve", 4, &byzantine(3, "wrong-digest"), "");
    let plain = sc.run(2).unwrap();
    sc.sim.strict_validity = true;
    let strict = sc.run(2).unwrap();
    assert!(strict.passed());
    assert_eq!(plain.histories, strict.histories);
}

#[test]
fn master_slave_tolerates_faulty_slaves_and_masters() {
    for (p, s) in [(3, "silent"), (0, "biasing-master"), (0, "bad-master")] {
        passes(
            scenario("masterslave", 4, &byzantine(p, s), "app = \"nondet-kv\""),
            0..3,
        );
    }
}

#[test]
fn malformed_scenarios_are_rejected() {
    let base = "v = 1\nname = \"x\"\nprotocol = \"sieve\"\n[sim]\nn = 4\n";
    let cases = [
        format!("{base}surprise = 1\n"),
        format!("{base}[[faults]]\nprocess = 1\nkind = \"byzantine\"\n"),
        format!("{base}{}", byzantine(0, "bad-master")),
        format!("{base}[[faults]]\nprocess = 9\nkind = \"crash\"\nat = 5\n"),
        "v = 2\nname = \"x\"\nprotocol = \"sieve\"\n[sim]\nn = 4\n".to_string(),
        format!("{base}[[assert]]\nkind = \"decision\"\nop = \"q1\"\nvalue = \"confirm\"\n"),
    ];
    for text in cases {
        let err = Scenario::parse(&text).expect_err(&text);
        assert!(
            matches!(err, ScenarioError::Parse(_) | ScenarioError::Invalid(_)),
            "{text}: {err}"
        );
    }
}
