//! Declarative scenarios: a TOML document describing the protocol, network,
//! faults, workload and the assertions a run must satisfy.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Deserialize;
use serde_json::json;
use thiserror::Error;

use crate::abv::{KIND_MASTER_ORDER, KIND_ORDER_ABORT, KIND_ORDER_CONFIRM};
use crate::app::{Application, KvCommand, KvStore, Membership, NondetKvStore, OpId, ProcessId};
use crate::byzantine::{SilentNode, Strategy};
use crate::crypto::{CryptoBackend, IdealOracle, RealCrypto};
use crate::masterslave::MasterSlaveReplica;
use crate::metrics::Metrics;
use crate::rsm::{CommitRecord, Decision, Mode};
use crate::sieve::SieveReplica;
use crate::simnet::{child_seed, FaultSpec, Node, Sim, SimConfig, SimError, SimOutcome, Trace, TraceRecord};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Parse(String),
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error(transparent)]
    Sim(#[from] SimError),
}

fn invalid(msg: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    Sieve,
    MasterSlave,
}

impl FromStr for Protocol {
    type Err = ScenarioError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sieve" => Ok(Self::Sieve),
            "masterslave" | "master-slave" => Ok(Self::MasterSlave),
            _ => Err(invalid(format!("unknown protocol `{s}`"))),
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Sieve => "sieve",
            Self::MasterSlave => "masterslave",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AppKind {
    Kv,
    NondetKv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CryptoKind {
    Ideal,
    Real,
}

/// Per-seed fault pattern for sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultMix {
    None,
    /// One random process crashes at a random point of the workload.
    Crash,
    /// The f highest-numbered processes approve random digests.
    WrongDigest,
    /// The initial leader sends forged executions to f processes.
    EquivocatingLeader,
}

impl FromStr for FaultMix {
    type Err = ScenarioError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Self::None),
            "crash" => Ok(Self::Crash),
            "wrong-digest" => Ok(Self::WrongDigest),
            "equivocating-leader" => Ok(Self::EquivocatingLeader),
            _ => Err(invalid(format!("unknown fault-mix entry `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Invocation {
    pub at: u64,
    pub invoker: ProcessId,
    pub command: KvCommand,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Generate {
    pub count: usize,
    #[serde(default = "default_interval")]
    pub interval: u64,
    #[serde(default = "default_start")]
    pub start: u64,
    /// Share of rand-put operations; the rest are put/get/del.
    #[serde(default)]
    pub rand_fraction: f64,
    /// Share of crypto-rand-put operations.
    #[serde(default)]
    pub crypto_fraction: f64,
    #[serde(default = "default_keys")]
    pub keys: usize,
}

fn default_interval() -> u64 {
    15
}
fn default_start() -> u64 {
    10
}
fn default_keys() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Assertion {
    /// Committed (op, decision, state) sequences of correct processes are
    /// prefixes of one another.
    Agreement,
    /// Correct processes end with equal committed states.
    Converged,
    Quiesced,
    /// Every operation invoked at a correct process commits at every correct process.
    AllCommitted,
    Confirms {
        equals: Option<u64>,
        at_least: Option<u64>,
        at_most: Option<u64>,
    },
    Aborts {
        equals: Option<u64>,
        at_least: Option<u64>,
        at_most: Option<u64>,
    },
    /// `op` (e.g. `p1.0`) commits with `value` (`confirm` | `abort`) at every correct process.
    Decision {
        op: String,
        value: String,
    },
    /// No correct process emits an output for `op`.
    NoOutput {
        op: String,
    },
    EpochsAtLeast {
        value: u64,
    },
    /// No order broadcast by `process` is ever delivered.
    NoOrdersFrom {
        process: u16,
    },
    /// Every correct process adopts a leader other than `process` by `by`.
    ReplacedBy {
        process: u16,
        by: u64,
    },
    /// Correct processes consumed identical verifiable randomness; no tag repeats.
    RandomnessAgreement,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SimSection {
    n: Option<usize>,
    f: Option<usize>,
    seed: Option<u64>,
    gst: Option<u64>,
    timeout: Option<u64>,
    tick: Option<u64>,
    min_delay: Option<u64>,
    max_delay: Option<u64>,
    pre_gst_max_delay: Option<u64>,
    max_time: Option<u64>,
    strict_validity: Option<bool>,
    abv_retention: Option<u64>,
    instance_id: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FaultEntry {
    process: u16,
    kind: String,
    at: Option<u64>,
    strategy: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct OpEntry {
    at: u64,
    invoker: u16,
    op: String,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct WorkloadSection {
    #[serde(default)]
    ops: Vec<OpEntry>,
    generate: Option<Generate>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    v: u32,
    name: String,
    protocol: String,
    mode: Option<String>,
    app: Option<String>,
    crypto: Option<String>,
    #[serde(default)]
    sim: SimSection,
    #[serde(default)]
    faults: Vec<FaultEntry>,
    #[serde(default)]
    fault_mix: Vec<String>,
    #[serde(default)]
    pinned_random: BTreeMap<String, String>,
    #[serde(default)]
    workload: WorkloadSection,
    #[serde(default, rename = "assert")]
    assertions: Vec<Assertion>,
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub protocol: Protocol,
    pub mode: Mode,
    pub app: AppKind,
    pub crypto: CryptoKind,
    /// Network and fault configuration; `seed` is the default seed.
    pub sim: SimConfig,
    pub fault_mix: Vec<FaultMix>,
    pub ops: Vec<Invocation>,
    pub generate: Option<Generate>,
    pub assertions: Vec<Assertion>,
}

/// A scenario fixed to one seed: faults resolved and workload generated.
#[derive(Debug, Clone)]
pub struct Instance {
    pub cfg: SimConfig,
    pub workload: Vec<Invocation>,
}

impl Instance {
    /// Operation ids the workload produces, in invocation order at each invoker.
    pub fn op_ids(&self) -> Vec<(OpId, &Invocation)> {
        let mut order: Vec<&Invocation> = self.workload.iter().collect();
        order.sort_by_key(|i| i.at);
        let mut counters: BTreeMap<ProcessId, u64> = BTreeMap::new();
        order
            .into_iter()
            .map(|i| {
                let c = counters.entry(i.invoker).or_default();
                let id = OpId {
                    invoker: i.invoker,
                    counter: *c,
                };
                *c += 1;
                (id, i)
            })
            .collect()
    }
}

fn parse_process(key: &str, m: &Membership) -> Result<ProcessId, ScenarioError> {
    let digits = key.strip_prefix('p').unwrap_or(key);
    let p = digits
        .parse::<u16>()
        .map(ProcessId)
        .map_err(|_| invalid(format!("bad process `{key}`")))?;
    if !m.contains(p) {
        return Err(invalid(format!("process {p} is not a member")));
    }
    Ok(p)
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text).map_err(|e| match e {
            ScenarioError::Parse(msg) => ScenarioError::Parse(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let file: ScenarioFile = toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        if file.v != 1 {
            return Err(invalid(format!("unsupported version {}", file.v)));
        }
        let protocol: Protocol = file.protocol.parse()?;
        let mode: Mode = file
            .mode
            .as_deref()
            .unwrap_or("full")
            .parse()
            .map_err(|_| invalid("mode must be `full` or `hash`"))?;
        let app = match file.app.as_deref().unwrap_or("nondet-kv") {
            "kv" => AppKind::Kv,
            "nondet-kv" => AppKind::NondetKv,
            other => return Err(invalid(format!("unknown app `{other}`"))),
        };
        let crypto = match file.crypto.as_deref().unwrap_or("ideal") {
            "ideal" => CryptoKind::Ideal,
            "real" => CryptoKind::Real,
            other => return Err(invalid(format!("unknown crypto backend `{other}`"))),
        };

        let s = &file.sim;
        let n = s.n.unwrap_or(4);
        let membership = match s.f {
            Some(f) => Membership::new(n, f),
            None => Membership::with_max_faults(n),
        }
        .map_err(|e| invalid(e.to_string()))?;
        let mut sim = SimConfig::new(membership, s.seed.unwrap_or(0));
        sim.gst = s.gst.unwrap_or(sim.gst);
        sim.timeout = s.timeout.unwrap_or(sim.timeout);
        sim.tick = s.tick.unwrap_or(sim.tick);
        sim.delay.min = s.min_delay.unwrap_or(sim.delay.min);
        sim.delay.max = s.max_delay.unwrap_or(sim.delay.max);
        sim.delay.pre_gst_max = s.pre_gst_max_delay.unwrap_or(sim.delay.max);
        sim.max_time = s.max_time.unwrap_or(sim.max_time);
        sim.strict_validity = s.strict_validity.unwrap_or(false);
        sim.abv_retention = s.abv_retention.unwrap_or(sim.abv_retention);
        if let Some(id) = &s.instance_id {
            sim.instance_id = id.clone();
        }

        for fe in &file.faults {
            let p = ProcessId(fe.process);
            if !membership.contains(p) {
                return Err(invalid(format!("fault for unknown process {p}")));
            }
            let spec = match fe.kind.as_str() {
                "crash" => FaultSpec::Crash {
                    at: fe.at.ok_or_else(|| invalid(format!("crash of {p} needs `at`")))?,
                },
                "byzantine" => {
                    let name = fe
                        .strategy
                        .clone()
                        .ok_or_else(|| invalid(format!("byzantine {p} needs `strategy`")))?;
                    let st: Strategy = name.parse().map_err(invalid)?;
                    check_strategy(protocol, st)?;
                    FaultSpec::Byzantine { strategy: name }
                }
                other => return Err(invalid(format!("unknown fault kind `{other}`"))),
            };
            if sim.faults.insert(p, spec).is_some() {
                return Err(invalid(format!("two faults for {p}")));
            }
        }
        let fault_mix = file
            .fault_mix
            .iter()
            .map(|x| x.parse())
            .collect::<Result<Vec<FaultMix>, _>>()?;
        if !fault_mix.is_empty() && !sim.faults.is_empty() {
            return Err(invalid("`faults` and `fault_mix` are mutually exclusive"));
        }
        if protocol == Protocol::MasterSlave
            && fault_mix
                .iter()
                .any(|m| matches!(m, FaultMix::WrongDigest | FaultMix::EquivocatingLeader))
        {
            return Err(invalid("fault mix entry applies to sieve only"));
        }
        for (k, v) in &file.pinned_random {
            let p = parse_process(k, &membership)?;
            let bytes = hex::decode(v).map_err(|e| invalid(format!("pinned_random.{k}: {e}")))?;
            sim.pinned_random.insert(p, bytes);
        }
        sim.validate()?;

        let mut ops = Vec::new();
        for o in &file.workload.ops {
            let invoker = ProcessId(o.invoker);
            if !membership.contains(invoker) {
                return Err(invalid(format!("operation `{}` at unknown process {invoker}", o.op)));
            }
            let command =
                KvCommand::parse(&o.op).ok_or_else(|| invalid(format!("cannot parse operation `{}`", o.op)))?;
            ops.push(Invocation {
                at: o.at,
                invoker,
                command,
            });
        }
        if let Some(g) = &file.workload.generate {
            if !(0.0..=1.0).contains(&(g.rand_fraction + g.crypto_fraction)) || g.keys == 0 {
                return Err(invalid("generate: fractions must sum to at most 1 and keys > 0"));
            }
        }
        for a in &file.assertions {
            match a {
                Assertion::Decision { op, value } => {
                    parse_op_id(op)?;
                    if value != "confirm" && value != "abort" {
                        return Err(invalid(format!("decision must be confirm or abort, got `{value}`")));
                    }
                }
                Assertion::NoOutput { op } => {
                    parse_op_id(op)?;
                }
                _ => {}
            }
        }
        Ok(Self {
            name: file.name,
            protocol,
            mode,
            app,
            crypto,
            sim,
            fault_mix,
            ops,
            generate: file.workload.generate,
            assertions: file.assertions,
        })
    }

    /// Resolves the fault mix and generates the workload for `seed`.
    pub fn instantiate(&self, seed: u64) -> Instance {
        let mut cfg = self.sim.clone();
        cfg.seed = seed;
        let m = cfg.membership;
        let span = self.workload_span();
        if !self.fault_mix.is_empty() {
            let mut rng = ChaCha8Rng::from_seed(child_seed(seed, None, "fault-mix"));
            let pick = *self.fault_mix.choose(&mut rng).unwrap();
            let byz = |s: Strategy| FaultSpec::Byzantine {
                strategy: s.name().into(),
            };
            match pick {
                FaultMix::None => {}
                FaultMix::Crash => {
                    let p = ProcessId(rng.gen_range(0..m.n()) as u16);
                    let at = rng.gen_range(span.0..=span.1.max(span.0));
                    cfg.faults.insert(p, FaultSpec::Crash { at });
                }
                FaultMix::WrongDigest => {
                    for i in (m.n() - m.f())..m.n() {
                        cfg.faults.insert(ProcessId(i as u16), byz(Strategy::WrongDigest));
                    }
                }
                FaultMix::EquivocatingLeader => {
                    cfg.faults.insert(ProcessId(0), byz(Strategy::EquivocatingLeader));
                }
            }
        }
        let mut workload = self.ops.clone();
        if let Some(g) = &self.generate {
            let mut rng = ChaCha8Rng::from_seed(child_seed(seed, None, "workload"));
            let invokers = cfg.correct_processes();
            for i in 0..g.count {
                let key = format!("k{}", rng.gen_range(0..g.keys));
                let x: f64 = rng.gen();
                let command = if x < g.rand_fraction {
                    KvCommand::rand_put(&key)
                } else if x < g.rand_fraction + g.crypto_fraction {
                    KvCommand::crypto_rand_put(&key)
                } else {
                    match rng.gen_range(0..4) {
                        0 => KvCommand::get(&key),
                        1 => KvCommand::del(&key),
                        _ => KvCommand::put(&key, &rng.gen_range(0..1000).to_string()),
                    }
                };
                workload.push(Invocation {
                    at: g.start + i as u64 * g.interval,
                    invoker: *invokers.choose(&mut rng).unwrap(),
                    command,
                });
            }
        }
        Instance { cfg, workload }
    }

    fn workload_span(&self) -> (u64, u64) {
        let mut times: Vec<u64> = self.ops.iter().map(|o| o.at).collect();
        if let Some(g) = &self.generate {
            times.push(g.start);
            times.push(g.start + g.count.saturating_sub(1) as u64 * g.interval);
        }
        let lo = times.iter().copied().min().unwrap_or(0);
        let hi = times.iter().copied().max().unwrap_or(0);
        (lo, hi)
    }

    fn application(&self) -> Arc<dyn Application> {
        match self.app {
            AppKind::Kv => Arc::new(KvStore),
            AppKind::NondetKv => Arc::new(NondetKvStore),
        }
    }

    pub fn build(&self, inst: &Instance) -> Result<Sim, ScenarioError> {
        let cfg = &inst.cfg;
        let m = cfg.membership;
        let app = self.application();
        let mut nodes: Vec<Box<dyn Node>> = Vec::with_capacity(m.n());
        for p in m.processes() {
            let strategy = match cfg.fault(p) {
                FaultSpec::Byzantine { strategy } => Some(strategy.parse::<Strategy>().map_err(invalid)?),
                _ => None,
            };
            let node: Box<dyn Node> = match (strategy, self.protocol) {
                (Some(Strategy::Silent), _) => Box::new(SilentNode),
                (s, Protocol::Sieve) => {
                    let mut r = SieveReplica::new(m, p, self.mode, app.clone());
                    if let Some(s) = s {
                        r = r.with_behaviour(
                            s.sieve()
                                .ok_or_else(|| invalid(format!("{s} is not a sieve strategy")))?,
                        );
                    }
                    Box::new(r)
                }
                (s, Protocol::MasterSlave) => {
                    let mut r = MasterSlaveReplica::new(m, p, self.mode, app.clone(), &cfg.instance_id);
                    if let Some(s) = s {
                        r = r.with_behaviour(
                            s.master()
                                .ok_or_else(|| invalid(format!("{s} is not a master-slave strategy")))?,
                        );
                    }
                    Box::new(r)
                }
            };
            nodes.push(node);
        }
        let crypto: Box<dyn CryptoBackend> = match self.crypto {
            CryptoKind::Ideal => Box::new(IdealOracle::new()),
            CryptoKind::Real => Box::new(RealCrypto::new(m.n(), cfg.seed)),
        };
        let mut sim = Sim::new(cfg.clone(), nodes, crypto)?;
        for inv in &inst.workload {
            sim.schedule_invoke(inv.at, inv.invoker, inv.command.encode());
        }
        Ok(sim)
    }

    /// Runs one seed and checks every assertion.
    pub fn run(&self, seed: u64) -> Result<RunReport, ScenarioError> {
        let inst = self.instantiate(seed);
        let sim = self.build(&inst)?;
        Ok(match sim.run() {
            Ok(out) => self.report(&inst, out),
            Err(abort) => RunReport {
                scenario: self.name.clone(),
                seed,
                mode: self.mode,
                metrics: Metrics::default(),
                violations: vec![format!("simulation aborted: {}", abort.message)],
                aborted: true,
                histories: BTreeMap::new(),
                trace: abort.trace,
            },
        })
    }

    /// Runs every seed in `seeds` in parallel; reports come back in seed order
    /// without their traces.
    pub fn sweep(&self, seeds: std::ops::Range<u64>) -> Result<Vec<RunReport>, ScenarioError> {
        seeds
            .into_par_iter()
            .map(|s| {
                self.run(s).map(|mut r| {
                    r.trace = Trace::new();
                    r
                })
            })
            .collect()
    }

    fn report(&self, inst: &Instance, out: SimOutcome) -> RunReport {
        let cfg = &inst.cfg;
        let metrics = Metrics::collect(&out, cfg);
        let correct = cfg.correct_processes();
        let histories: BTreeMap<ProcessId, Vec<CommitRecord>> =
            correct.iter().map(|p| (*p, commits_of(&out, *p).to_vec())).collect();
        let mut violations = Vec::new();
        for a in &self.assertions {
            if let Err(v) = self.check(a, inst, &out, &metrics, &histories) {
                violations.push(v);
            }
        }
        RunReport {
            scenario: self.name.clone(),
            seed: cfg.seed,
            mode: self.mode,
            metrics,
            violations,
            aborted: false,
            histories,
            trace: out.trace,
        }
    }

    fn check(
        &self,
        a: &Assertion,
        inst: &Instance,
        out: &SimOutcome,
        metrics: &Metrics,
        histories: &BTreeMap<ProcessId, Vec<CommitRecord>>,
    ) -> Result<(), String> {
        let correct: Vec<ProcessId> = histories.keys().copied().collect();
        match a {
            Assertion::Agreement => check_agreement(histories),
            Assertion::Converged => {
                let states: BTreeSet<_> = correct.iter().map(|p| &out.fingerprints[p.index()]).collect();
                if states.len() > 1 {
                    return Err(format!(
                        "converged: correct processes end in {} different states",
                        states.len()
                    ));
                }
                Ok(())
            }
            Assertion::Quiesced => {
                if out.quiesced {
                    Ok(())
                } else {
                    Err(format!("quiesced: run hit the time limit at t={}", out.end_time))
                }
            }
            Assertion::AllCommitted => {
                for (id, inv) in inst.op_ids() {
                    if !inst.cfg.is_correct(inv.invoker) {
                        continue;
                    }
                    for (p, h) in histories {
                        if !h.iter().any(|c| c.op == id) {
                            return Err(format!("all-committed: {id} ({}) never committed at {p}", inv.command));
                        }
                    }
                }
                Ok(())
            }
            Assertion::Confirms {
                equals,
                at_least,
                at_most,
            } => check_count("confirms", metrics.confirms, *equals, *at_least, *at_most),
            Assertion::Aborts {
                equals,
                at_least,
                at_most,
            } => check_count("aborts", metrics.aborts, *equals, *at_least, *at_most),
            Assertion::Decision { op, value } => {
                let id = parse_op_id(op).map_err(|e| e.to_string())?;
                for (p, h) in histories {
                    match h.iter().find(|c| c.op == id) {
                        None => return Err(format!("decision: {op} not committed at {p}")),
                        Some(c) if c.decision.as_str() != value => {
                            return Err(format!(
                                "decision: {op} is {} at {p}, expected {value}",
                                c.decision.as_str()
                            ))
                        }
                        _ => {}
                    }
                }
                Ok(())
            }
            Assertion::NoOutput { op } => {
                let hit = out
                    .trace
                    .events("output")
                    .find(|r| r.get_str("op") == Some(op.as_str()) && r.proc.is_some_and(|p| correct.contains(&p)));
                match hit {
                    Some(r) => Err(format!("no-output: {op} output at {} t={}", r.proc.unwrap(), r.t)),
                    None => Ok(()),
                }
            }
            Assertion::EpochsAtLeast { value } => {
                if metrics.epochs_started >= *value {
                    Ok(())
                } else {
                    Err(format!(
                        "epochs-at-least: {} epochs started, expected {value}",
                        metrics.epochs_started
                    ))
                }
            }
            Assertion::NoOrdersFrom { process } => {
                let p = ProcessId(*process);
                let hit = out.log.iter().find(|m| {
                    m.sender == p
                        && matches!(
                            m.kind(),
                            Some(KIND_ORDER_CONFIRM) | Some(KIND_ORDER_ABORT) | Some(KIND_MASTER_ORDER)
                        )
                });
                match hit {
                    Some(_) => Err(format!("no-orders-from: an order from {p} was delivered")),
                    None => Ok(()),
                }
            }
            Assertion::ReplacedBy { process, by } => {
                let p = ProcessId(*process);
                for q in &correct {
                    let first = out
                        .trace
                        .of_process(*q)
                        .filter(|r| r.ev == "config")
                        .find(|r| r.get_u64("leader").is_some_and(|l| l != p.0 as u64));
                    match first {
                        Some(r) if r.t <= *by => {}
                        Some(r) => return Err(format!("replaced-by: {q} replaced {p} only at t={}", r.t)),
                        None => return Err(format!("replaced-by: {q} never replaced {p}")),
                    }
                }
                Ok(())
            }
            Assertion::RandomnessAgreement => check_randomness(&out.trace, &correct),
        }
    }
}

fn check_strategy(protocol: Protocol, s: Strategy) -> Result<(), ScenarioError> {
    let fits = match protocol {
        Protocol::Sieve => s == Strategy::Silent || s.sieve().is_some(),
        Protocol::MasterSlave => s == Strategy::Silent || s.master().is_some(),
    };
    if fits {
        Ok(())
    } else {
        Err(invalid(format!("strategy {s} does not apply to {protocol}")))
    }
}

/// Parses `p1.3` into an operation id.
pub fn parse_op_id(s: &str) -> Result<OpId, ScenarioError> {
    let bad = || invalid(format!("bad operation id `{s}` (expected e.g. p1.0)"));
    let (p, c) = s.strip_prefix('p').and_then(|x| x.split_once('.')).ok_or_else(bad)?;
    Ok(OpId {
        invoker: ProcessId(p.parse().map_err(|_| bad())?),
        counter: c.parse().map_err(|_| bad())?,
    })
}

fn commits_of(out: &SimOutcome, p: ProcessId) -> &[CommitRecord] {
    if let Some(r) = out.node::<SieveReplica>(p) {
        r.commits()
    } else if let Some(r) = out.node::<MasterSlaveReplica>(p) {
        r.commits()
    } else {
        &[]
    }
}

fn check_count(
    what: &str,
    got: u64,
    equals: Option<u64>,
    at_least: Option<u64>,
    at_most: Option<u64>,
) -> Result<(), String> {
    if equals.is_some_and(|e| got != e) {
        return Err(format!("{what}: got {got}, expected {}", equals.unwrap()));
    }
    if at_least.is_some_and(|e| got < e) {
        return Err(format!("{what}: got {got}, expected at least {}", at_least.unwrap()));
    }
    if at_most.is_some_and(|e| got > e) {
        return Err(format!("{what}: got {got}, expected at most {}", at_most.unwrap()));
    }
    Ok(())
}

type Committed<'a> = (OpId, Decision, &'a str);

fn view(h: &[CommitRecord]) -> Vec<Committed<'_>> {
    h.iter().map(|c| (c.op, c.decision, c.state.as_str())).collect()
}

/// Prefix consistency of committed (op, decision, state) sequences.
pub fn check_agreement(histories: &BTreeMap<ProcessId, Vec<CommitRecord>>) -> Result<(), String> {
    let mut it = histories.iter();
    let Some((p0, h0)) = it.next() else {
        return Ok(());
    };
    let base = view(h0);
    for (p, h) in it {
        let other = view(h);
        if let Some(i) = base.iter().zip(&other).position(|(a, b)| a != b) {
            return Err(format!(
                "agreement: {p0} and {p} differ at commit {i}: {:?} vs {:?}",
                base[i], other[i]
            ));
        }
    }
    Ok(())
}

fn check_randomness(trace: &Trace, correct: &[ProcessId]) -> Result<(), String> {
    let mut per: BTreeMap<ProcessId, Vec<(String, String, String)>> = BTreeMap::new();
    for r in trace.events("vrf") {
        let Some(p) = r.proc.filter(|p| correct.contains(p)) else {
            continue;
        };
        let field = |r: &TraceRecord, k| r.get_str(k).unwrap_or_default().to_string();
        per.entry(p)
            .or_default()
            .push((field(r, "op"), field(r, "tag"), field(r, "output")));
    }
    let mut views = per.values();
    if let Some(first) = views.next() {
        for v in views {
            let n = first.len().min(v.len());
            if first[..n] != v[..n] {
                return Err("randomness-agreement: correct processes consumed different randomness".into());
            }
        }
        let tags: BTreeSet<_> = first.iter().map(|x| &x.1).collect();
        if tags.len() != first.len() {
            return Err("randomness-agreement: a tag was used twice".into());
        }
    }
    Ok(())
}

/// Outcome of one seeded run.
#[derive(Debug)]
pub struct RunReport {
    pub scenario: String,
    pub seed: u64,
    pub mode: Mode,
    pub metrics: Metrics,
    pub violations: Vec<String>,
    pub aborted: bool,
    /// Committed history of each correct process.
    pub histories: BTreeMap<ProcessId, Vec<CommitRecord>>,
    pub trace: Trace,
}

impl RunReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    /// One-line JSON summary used by sweeps.
    pub fn summary(&self) -> serde_json::Value {
        json!({
            "seed": self.seed,
            "passed": self.passed(),
            "confirms": self.metrics.confirms,
            "aborts": self.metrics.aborts,
            "epochs_started": self.metrics.epochs_started,
            "end_time": self.metrics.end_time,
            "violation": self.violations.first(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const QUIET: &str = r#"
        v = 1
        name = "quiet"
        protocol = "sieve"
        [sim]
        n = 4
        [workload]
        ops = [
          { at = 10, invoker = 1, op = "put a 1" },
          { at = 10, invoker = 1, op = "get a" },
          { at = 20, invoker = 2, op = "put b 2" },
        ]
        [[assert]]
        kind = "agreement"
        [[assert]]
        kind = "aborts"
        equals = 0
    "#;

    #[test]
    fn parses_and_numbers_ops() {
        let s = Scenario::parse(QUIET).unwrap();
        assert_eq!(s.ops.len(), 3);
        let inst = s.instantiate(3);
        let ids: Vec<String> = inst.op_ids().iter().map(|(id, _)| id.to_string()).collect();
        assert_eq!(ids, ["p1.0", "p1.1", "p2.0"]);
    }

    #[test]
    fn rejects_bad_documents() {
        assert!(matches!(
            Scenario::parse("v = 1\nname = 3"),
            Err(ScenarioError::Parse(_))
        ));
        let wrong_version = QUIET.replace("v = 1", "v = 2");
        assert!(matches!(
            Scenario::parse(&wrong_version),
            Err(ScenarioError::Invalid(_))
        ));
        let unknown_key = QUIET.replace("n = 4", "n = 4\nbogus = 1");
        assert!(matches!(Scenario::parse(&unknown_key), Err(ScenarioError::Parse(_))));
        let bad_invoker = QUIET.replace("invoker = 2", "invoker = 9");
        assert!(Scenario::parse(&bad_invoker).is_err());
        let bad_strategy =
            format!("{QUIET}\n[[faults]]\nprocess = 1\nkind = \"byzantine\"\nstrategy = \"bad-master\"\n");
        assert!(Scenario::parse(&bad_strategy).is_err());
    }

    #[test]
    fn op_id_parse() {
        assert_eq!(parse_op_id("p3.12").unwrap().to_string(), "p3.12");
        assert!(parse_op_id("3.12").is_err());
        assert!(parse_op_id("p3").is_err());
    }

    #[test]
    fn fault_mix_is_seeded() {
        let text = QUIET.replace(
            "[sim]",
            "fault_mix = [\"none\", \"crash\", \"wrong-digest\", \"equivocating-leader\"]\n[sim]",
        );
        let s = Scenario::parse(&text).unwrap();
        let a: Vec<_> = (0..20).map(|seed| s.instantiate(seed).cfg.faults).collect();
        let b: Vec<_> = (0..20).map(|seed| s.instantiate(seed).cfg.faults).collect();
        assert_eq!(a, b);
        assert!(a.iter().any(|f| f.is_empty()));
        assert!(a.iter().any(|f| !f.is_empty()));
    }

    #[test]
    fn quiet_run_passes() {
        let s = Scenario::parse(QUIET).unwrap();
        let r = s.run(1).unwrap();
        assert!(r.passed(), "{:?}", r.violations);
        assert_eq!(r.metrics.confirms, 3);
    }
}
