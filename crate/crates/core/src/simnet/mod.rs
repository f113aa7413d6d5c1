//! Deterministic discrete-event simulator.
//!
//! Time is integer ticks. Events are processed in `(time, insertion sequence)`
//! order, so a run is a pure function of its configuration and seed. Links are
//! authenticated and FIFO per ordered pair; before GST a message may be held
//! back until shortly after GST but is never lost between live endpoints.
//! The atomic-broadcast sequencer lives here as a simulator-side actor.

pub mod env;
pub mod trace;

use std::any::Any;
use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashMap};
use std::panic::{self, AssertUnwindSafe};

use serde_json::{json, Value};
use thiserror::Error;

use crate::abv::{kind_name, AbvMessage, Sequencer};
use crate::app::{Membership, ProcessId};
use crate::crypto::{sha256, CryptoBackend, Digest, Signature, VrfKeyPair, VrfPublicKey};
pub use env::{LiveEnv, ProcessEnv};
pub use trace::{Trace, TraceRecord};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("post-GST delay bounds must satisfy 0 < min <= max, got {min}..={max}")]
    BadDelay { min: u64, max: u64 },
    #[error("expected {expected} nodes, got {got}")]
    NodeCount { expected: usize, got: usize },
    #[error("fault spec for unknown process {0}")]
    UnknownProcess(ProcessId),
    #[error("{faulty} faulty processes exceed f = {f}")]
    TooManyFaults { faulty: usize, f: usize },
    #[error("timeout and tick must be positive")]
    BadTimer,
}

/// Simulation aborted by a panicking handler; carries the trace so far.
#[derive(Debug)]
pub struct SimAbort {
    pub message: String,
    pub trace: Trace,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DelayBounds {
    pub min: u64,
    pub max: u64,
    /// Upper bound on the delay drawn for messages sent before GST.
    pub pre_gst_max: u64,
}

impl Default for DelayBounds {
    fn default() -> Self {
        Self {
            min: 1,
            max: 10,
            pre_gst_max: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FaultSpec {
    Correct,
    Crash {
        at: u64,
    },
    /// Byzantine process driven by the named strategy.
    Byzantine {
        strategy: String,
    },
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub membership: Membership,
    pub seed: u64,
    pub gst: u64,
    pub delay: DelayBounds,
    pub faults: BTreeMap<ProcessId, FaultSpec>,
    /// Base complaint timeout T0; the effective timeout of epoch e is T0 * 2^e.
    pub timeout: u64,
    /// Period of the age check.
    pub tick: u64,
    pub max_time: u64,
    pub strict_validity: bool,
    pub abv_retention: u64,
    /// Bytes served to a process's randomness source before its seeded stream.
    pub pinned_random: BTreeMap<ProcessId, Vec<u8>>,
    pub trace_messages: bool,
    pub instance_id: String,
}

impl SimConfig {
    pub fn new(membership: Membership, seed: u64) -> Self {
        Self {
            membership,
            seed,
            gst: 0,
            delay: DelayBounds::default(),
            faults: BTreeMap::new(),
            timeout: 200,
            tick: 20,
            max_time: 1_000_000,
            strict_validity: false,
            abv_retention: 2_000,
            pinned_random: BTreeMap::new(),
            trace_messages: true,
            instance_id: "sim".into(),
        }
    }

    pub fn fault(&self, p: ProcessId) -> &FaultSpec {
        self.faults.get(&p).unwrap_or(&FaultSpec::Correct)
    }

    pub fn is_correct(&self, p: ProcessId) -> bool {
        matches!(self.fault(p), FaultSpec::Correct)
    }

    pub fn correct_processes(&self) -> Vec<ProcessId> {
        self.membership.processes().filter(|p| self.is_correct(*p)).collect()
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let DelayBounds { min, max, .. } = self.delay;
        if min == 0 || min > max {
            return Err(SimError::BadDelay { min, max });
        }
        if self.timeout == 0 || self.tick == 0 {
            return Err(SimError::BadTimer);
        }
        for p in self.faults.keys() {
            if !self.membership.contains(*p) {
                return Err(SimError::UnknownProcess(*p));
            }
        }
        let faulty = self
            .faults
            .values()
            .filter(|f| !matches!(f, FaultSpec::Correct))
            .count();
        if faulty > self.membership.f() {
            return Err(SimError::TooManyFaults {
                faulty,
                f: self.membership.f(),
            });
        }
        Ok(())
    }

    /// Effective complaint timeout for an epoch.
    pub fn epoch_timeout(&self, epoch: u64) -> u64 {
        self.timeout.saturating_mul(1u64 << epoch.min(30))
    }
}

/// Deterministic child generator seed for `(process, purpose)`.
pub fn child_seed(seed: u64, proc: Option<ProcessId>, purpose: &str) -> [u8; 32] {
    let p = proc.map_or(u32::MAX, |p| p.0 as u32);
    sha256(&[&seed.to_be_bytes(), &p.to_be_bytes(), purpose.as_bytes()])
}

#[derive(Debug)]
pub enum Action {
    Send { to: ProcessId, bytes: Vec<u8> },
    Broadcast(Vec<u8>),
    Timer { after: u64, id: u64 },
}

/// Handler context: the only way a node touches the network, clock, crypto or trace.
pub struct Ctx<'a> {
    now: u64,
    me: ProcessId,
    cfg: &'a SimConfig,
    crypto: &'a mut dyn CryptoBackend,
    actions: &'a mut Vec<Action>,
    trace: &'a mut Trace,
    env: &'a mut ProcessEnv,
    vrf_keys: &'a BTreeMap<ProcessId, VrfPublicKey>,
}

impl<'a> Ctx<'a> {
    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn me(&self) -> ProcessId {
        self.me
    }

    pub fn config(&self) -> &SimConfig {
        self.cfg
    }

    pub fn membership(&self) -> Membership {
        self.cfg.membership
    }

    pub fn send(&mut self, to: ProcessId, bytes: Vec<u8>) {
        self.actions.push(Action::Send { to, bytes });
    }

    /// Point-to-point send to every process, self included.
    pub fn send_all(&mut self, bytes: Vec<u8>) {
        for p in self.cfg.membership.processes() {
            self.actions.push(Action::Send {
                to: p,
                bytes: bytes.clone(),
            });
        }
    }

    pub fn abv_broadcast(&mut self, payload: Vec<u8>) {
        self.actions.push(Action::Broadcast(payload));
    }

    pub fn set_timer(&mut self, after: u64, id: u64) {
        self.actions.push(Action::Timer { after, id });
    }

    /// Signs as the handler's own process; there is no way to sign as another.
    pub fn sign(&mut self, m: &[u8]) -> Signature {
        self.crypto.sign(self.me, m)
    }

    pub fn verify(&self, p: ProcessId, sig: &Signature, m: &[u8]) -> bool {
        self.crypto.verify(p, sig, m)
    }

    pub fn hash(&mut self, x: &[u8]) -> Digest {
        self.crypto.hash(x)
    }

    pub fn crypto(&mut self) -> &mut dyn CryptoBackend {
        self.crypto
    }

    pub fn crypto_ref(&self) -> &dyn CryptoBackend {
        self.crypto
    }

    pub fn vrf_key_of(&self, p: ProcessId) -> Option<VrfPublicKey> {
        self.vrf_keys.get(&p).copied()
    }

    pub fn own_vrf_key(&self) -> Option<&VrfKeyPair> {
        self.env.vrf.as_ref()
    }

    /// Live source of non-determinism; `vrf_tag` enables verifiable randomness.
    pub fn live_env(&mut self, vrf_tag: Option<Vec<u8>>) -> LiveEnv<'_> {
        LiveEnv::new(self.now, self.env, self.crypto, vrf_tag)
    }

    /// Generator reserved for Byzantine strategies of this process.
    pub fn byzantine_rng(&mut self) -> &mut rand_chacha::ChaCha8Rng {
        &mut self.env.byz_rng
    }

    pub fn trace(&mut self, ev: &str, fields: Vec<(&str, Value)>) {
        self.trace.push(TraceRecord {
            t: self.now,
            proc: Some(self.me),
            ev: ev.to_string(),
            fields: fields.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        });
    }

    pub fn note(&mut self, what: &str) {
        self.trace("note", vec![("what", what.into())]);
    }
}

/// A simulated process. Correct replicas and Byzantine strategies both
/// implement this; the simulator never looks inside.
pub trait Node: Send {
    fn start(&mut self, _ctx: &mut Ctx<'_>) {}
    /// Workload input: the node wraps `command` into a fresh operation.
    fn invoke(&mut self, _ctx: &mut Ctx<'_>, _command: Vec<u8>) {}
    fn receive(&mut self, _ctx: &mut Ctx<'_>, _from: ProcessId, _bytes: &[u8]) {}
    fn timer(&mut self, _ctx: &mut Ctx<'_>, _id: u64) {}
    fn abv_deliver(&mut self, _ctx: &mut Ctx<'_>, _msg: AbvMessage) {}
    /// External-validity predicate evaluated against the node's current state.
    fn validate(&mut self, _ctx: &mut Ctx<'_>, _msg: &AbvMessage) -> bool {
        false
    }
    /// Length of the delivered prefix this node has fully processed.
    fn abv_processed(&self) -> usize {
        0
    }
    /// No invoked operation outstanding and nothing blocked.
    fn is_settled(&self) -> bool {
        true
    }
    fn state_fingerprint(&self) -> Option<String> {
        None
    }
    fn as_any(&self) -> &dyn Any;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
enum Endpoint {
    Proc(ProcessId),
    Sequencer,
}

impl Endpoint {
    fn code(self) -> u32 {
        match self {
            Endpoint::Proc(p) => p.0 as u32,
            Endpoint::Sequencer => u32::MAX,
        }
    }
}

#[derive(Debug)]
enum EventKind {
    Deliver {
        from: ProcessId,
        to: ProcessId,
        bytes: Vec<u8>,
    },
    ToSequencer {
        from: ProcessId,
        payload: Vec<u8>,
    },
    AbvDeliver {
        to: ProcessId,
        index: usize,
    },
    Timer {
        proc: ProcessId,
        id: u64,
    },
    Crash {
        proc: ProcessId,
    },
    Invoke {
        proc: ProcessId,
        command: Vec<u8>,
    },
    /// Re-evaluates messages the sequencer is still holding.
    SequencerRetry,
}

impl EventKind {
    /// Events that represent outstanding work; timers and crashes do not.
    fn is_work(&self) -> bool {
        !matches!(
            self,
            EventKind::Timer { .. } | EventKind::Crash { .. } | EventKind::SequencerRetry
        )
    }
}

#[derive(Debug)]
struct Event {
    time: u64,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        (self.time, self.seq) == (other.time, other.seq)
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    // Reversed: BinaryHeap pops the earliest (time, seq).
    fn cmp(&self, other: &Self) -> Ordering {
        (other.time, other.seq).cmp(&(self.time, self.seq))
    }
}

/// Message counts by kind name, p2p and broadcast.
pub type MessageStats = BTreeMap<String, u64>;

pub fn p2p_kind_name(kind: u8) -> &'static str {
    match kind {
        0x10 => "complaint",
        0x11 => "certificate",
        0x20 => "invoke",
        0x21 => "execute",
        0x22 => "approve",
        0x23 => "state-request",
        0x24 => "state-response",
        _ => "unknown",
    }
}

pub struct SimOutcome {
    pub trace: Trace,
    pub end_time: u64,
    pub quiesced: bool,
    pub fingerprints: Vec<Option<String>>,
    pub messages: MessageStats,
    pub log: Vec<AbvMessage>,
    pub nodes: Vec<Box<dyn Node>>,
    pub crashed: Vec<bool>,
}

impl SimOutcome {
    pub fn node<T: 'static>(&self, p: ProcessId) -> Option<&T> {
        self.nodes[p.index()].as_any().downcast_ref::<T>()
    }
}

pub struct Sim {
    cfg: SimConfig,
    nodes: Vec<Box<dyn Node>>,
    envs: Vec<ProcessEnv>,
    crashed: Vec<bool>,
    crypto: Box<dyn CryptoBackend>,
    vrf_keys: BTreeMap<ProcessId, VrfPublicKey>,
    queue: BinaryHeap<Event>,
    next_seq: u64,
    now: u64,
    work: usize,
    link_last: HashMap<(Endpoint, Endpoint), u64>,
    link_count: HashMap<(Endpoint, Endpoint, u8), u64>,
    sequencer: Sequencer,
    retry_scheduled: bool,
    trace: Trace,
    messages: MessageStats,
}

impl Sim {
    pub fn new(
        cfg: SimConfig,
        nodes: Vec<Box<dyn Node>>,
        mut crypto: Box<dyn CryptoBackend>,
    ) -> Result<Self, SimError> {
        cfg.validate()?;
        let n = cfg.membership.n();
        if nodes.len() != n {
            return Err(SimError::NodeCount {
                expected: n,
                got: nodes.len(),
            });
        }
        let mut envs = Vec::with_capacity(n);
        let mut vrf_keys = BTreeMap::new();
        for p in cfg.membership.processes() {
            let kp = crypto
                .vrf_keygen(p, &child_seed(cfg.seed, Some(p), "vrf-key"))
                .expect("one VRF key per process");
            vrf_keys.insert(p, kp.vk);
            let pinned = cfg.pinned_random.get(&p).cloned().unwrap_or_default();
            envs.push(ProcessEnv::new(cfg.seed, p, pinned, kp));
        }
        // Lowest-numbered process that is correct for the whole run; n > 3f
        // guarantees one exists.
        let designated = cfg.correct_processes()[0];
        let sequencer = Sequencer::new(designated, cfg.abv_retention);
        let mut sim = Self {
            nodes,
            envs,
            crashed: vec![false; n],
            crypto,
            vrf_keys,
            queue: BinaryHeap::new(),
            next_seq: 0,
            now: 0,
            work: 0,
            link_last: HashMap::new(),
            link_count: HashMap::new(),
            sequencer,
            retry_scheduled: false,
            trace: Trace::new(),
            messages: BTreeMap::new(),
            cfg,
        };
        let crashes: Vec<_> = sim
            .cfg
            .faults
            .iter()
            .filter_map(|(p, f)| match f {
                FaultSpec::Crash { at } => Some((*p, *at)),
                _ => None,
            })
            .collect();
        for (proc, at) in crashes {
            sim.push(at, EventKind::Crash { proc });
        }
        Ok(sim)
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    /// Queues a workload invocation at `proc` for time `at`.
    pub fn schedule_invoke(&mut self, at: u64, proc: ProcessId, command: Vec<u8>) {
        self.push(at, EventKind::Invoke { proc, command });
    }

    fn push(&mut self, time: u64, kind: EventKind) {
        if kind.is_work() {
            self.work += 1;
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Event { time, seq, kind });
    }

    fn sim_trace(&mut self, ev: &str, fields: Vec<(&str, Value)>) {
        self.trace.push(TraceRecord {
            t: self.now,
            proc: None,
            ev: ev.into(),
            fields: fields.into_iter().map(|(k, v)| (k.into(), v)).collect(),
        });
    }

    /// Link delay for the `idx`-th message of `kind` on `from -> to`: a pure
    /// function of the seed, so extra traffic of one kind never shifts the
    /// delays of another.
    fn arrival(&mut self, from: Endpoint, to: Endpoint, kind: u8) -> u64 {
        let counter = self.link_count.entry((from, to, kind)).or_insert(0);
        let idx = *counter;
        *counter += 1;
        let h = sha256(&[
            b"delay",
            &self.cfg.seed.to_be_bytes(),
            &from.code().to_be_bytes(),
            &to.code().to_be_bytes(),
            &[kind],
            &idx.to_be_bytes(),
        ]);
        let r1 = u64::from_be_bytes(h[..8].try_into().unwrap());
        let r2 = u64::from_be_bytes(h[8..16].try_into().unwrap());
        let DelayBounds { min, max, pre_gst_max } = self.cfg.delay;
        let post = |r: u64| min + r % (max - min + 1);
        let mut at = if self.now >= self.cfg.gst {
            self.now + post(r1)
        } else {
            let hi = pre_gst_max.max(min);
            let at = self.now + min + r1 % (hi - min + 1);
            if at > self.cfg.gst + max {
                self.cfg.gst + post(r2)
            } else {
                at
            }
        };
        let last = self.link_last.entry((from, to)).or_insert(0);
        at = at.max(*last);
        *last = at;
        at
    }

    fn apply_actions(&mut self, me: ProcessId, actions: Vec<Action>) {
        for a in actions {
            match a {
                Action::Send { to, bytes } => {
                    let kind = bytes.first().copied().unwrap_or(0);
                    *self.messages.entry(p2p_kind_name(kind).to_string()).or_insert(0) += 1;
                    if !self.cfg.membership.contains(to) {
                        continue;
                    }
                    if self.cfg.trace_messages {
                        self.trace.push(TraceRecord {
                            t: self.now,
                            proc: Some(me),
                            ev: "send".into(),
                            fields: vec![("to".into(), json!(to.0)), ("kind".into(), json!(p2p_kind_name(kind)))],
                        });
                    }
                    let at = self.arrival(Endpoint::Proc(me), Endpoint::Proc(to), kind);
                    self.push(at, EventKind::Deliver { from: me, to, bytes });
                }
                Action::Broadcast(payload) => {
                    let kind = payload.first().copied().unwrap_or(0);
                    *self.messages.entry(format!("abv:{}", kind_name(kind))).or_insert(0) += 1;
                    self.trace.push(TraceRecord {
                        t: self.now,
                        proc: Some(me),
                        ev: "abv-broadcast".into(),
                        fields: vec![("kind".into(), json!(kind_name(kind)))],
                    });
                    let at = self.arrival(Endpoint::Proc(me), Endpoint::Sequencer, kind);
                    self.push(at, EventKind::ToSequencer { from: me, payload });
                }
                Action::Timer { after, id } => {
                    let at = self.now + after.max(1);
                    self.push(at, EventKind::Timer { proc: me, id });
                }
            }
        }
    }

    /// Runs `f` against node `p` with a fresh context and applies its actions.
    fn with_node<R>(&mut self, p: ProcessId, f: impl FnOnce(&mut dyn Node, &mut Ctx<'_>) -> R) -> R {
        let mut actions = Vec::new();
        let out = {
            let mut ctx = Ctx {
                now: self.now,
                me: p,
                cfg: &self.cfg,
                crypto: self.crypto.as_mut(),
                actions: &mut actions,
                trace: &mut self.trace,
                env: &mut self.envs[p.index()],
                vrf_keys: &self.vrf_keys,
            };
            f(self.nodes[p.index()].as_mut(), &mut ctx)
        };
        self.apply_actions(p, actions);
        out
    }

    fn pump_sequencer(&mut self) {
        self.pump_sequencer_once();
        if self.sequencer.has_pending() && !self.retry_scheduled {
            self.retry_scheduled = true;
            let at = self.now + self.cfg.tick;
            self.push(at, EventKind::SequencerRetry);
        }
    }

    fn pump_sequencer_once(&mut self) {
        loop {
            if !self.sequencer.has_pending() {
                return;
            }
            let d = self.sequencer.designated();
            if self.nodes[d.index()].abv_processed() != self.sequencer.log().len() {
                return;
            }
            // Validation must not emit actions; anything it queues is discarded.
            let mut scratch = Vec::new();
            let step = {
                let mut ctx = Ctx {
                    now: self.now,
                    me: d,
                    cfg: &self.cfg,
                    crypto: self.crypto.as_mut(),
                    actions: &mut scratch,
                    trace: &mut self.trace,
                    env: &mut self.envs[d.index()],
                    vrf_keys: &self.vrf_keys,
                };
                let node = self.nodes[d.index()].as_mut();
                self.sequencer.step(self.now, |m| node.validate(&mut ctx, m))
            };
            for m in step.expired {
                self.sim_trace(
                    "abv-reject",
                    vec![
                        ("sender", json!(m.sender.0)),
                        ("kind", json!(kind_name(m.kind().unwrap_or(0)))),
                    ],
                );
            }
            let Some(index) = step.appended else {
                return;
            };
            let msg = &self.sequencer.log()[index];
            let (sender, kind) = (msg.sender, msg.kind().unwrap_or(0));
            self.sim_trace(
                "abv-order",
                vec![
                    ("index", json!(index)),
                    ("sender", json!(sender.0)),
                    ("kind", json!(kind_name(kind))),
                ],
            );
            for p in self.cfg.membership.processes() {
                if self.crashed[p.index()] {
                    continue;
                }
                let at = self.arrival(Endpoint::Sequencer, Endpoint::Proc(p), kind);
                self.push(at, EventKind::AbvDeliver { to: p, index });
            }
        }
    }

    fn quiescent(&self) -> bool {
        self.work == 0
            && !self.sequencer.has_pending()
            && self
                .cfg
                .membership
                .processes()
                .all(|p| !self.cfg.is_correct(p) || self.nodes[p.index()].is_settled())
    }

    fn handle(&mut self, ev: Event) {
        match ev.kind {
            EventKind::Deliver { from, to, bytes } => {
                if self.crashed[to.index()] {
                    return;
                }
                if self.cfg.trace_messages {
                    let kind = bytes.first().copied().unwrap_or(0);
                    self.trace.push(TraceRecord {
                        t: self.now,
                        proc: Some(to),
                        ev: "recv".into(),
                        fields: vec![
                            ("from".into(), json!(from.0)),
                            ("kind".into(), json!(p2p_kind_name(kind))),
                        ],
                    });
                }
                self.with_node(to, |n, ctx| n.receive(ctx, from, &bytes));
            }
            EventKind::ToSequencer { from, payload } => {
                self.sequencer.submit(self.now, AbvMessage { sender: from, payload });
            }
            EventKind::AbvDeliver { to, index } => {
                if self.crashed[to.index()] {
                    return;
                }
                let msg = self.sequencer.log()[index].clone();
                self.with_node(to, |n, ctx| n.abv_deliver(ctx, msg));
            }
            EventKind::Timer { proc, id } => {
                if !self.crashed[proc.index()] {
                    self.with_node(proc, |n, ctx| n.timer(ctx, id));
                }
            }
            EventKind::Crash { proc } => {
                self.crashed[proc.index()] = true;
                self.trace.push(TraceRecord {
                    t: self.now,
                    proc: Some(proc),
                    ev: "crash".into(),
                    fields: vec![],
                });
            }
            EventKind::SequencerRetry => {
                self.retry_scheduled = false;
            }
            EventKind::Invoke { proc, command } => {
                if self.crashed[proc.index()] {
                    self.trace.push(TraceRecord {
                        t: self.now,
                        proc: Some(proc),
                        ev: "note".into(),
                        fields: vec![("what".into(), json!("invoke at crashed process dropped"))],
                    });
                    return;
                }
                self.with_node(proc, |n, ctx| n.invoke(ctx, command));
            }
        }
    }

    pub fn run(mut self) -> Result<SimOutcome, SimAbort> {
        let started = panic::catch_unwind(AssertUnwindSafe(|| {
            for p in self.cfg.membership.processes() {
                self.with_node(p, |n, ctx| n.start(ctx));
            }
        }));
        if let Err(e) = started {
            return Err(self.abort(e));
        }
        let mut quiesced = false;
        loop {
            if self.quiescent() {
                quiesced = true;
                break;
            }
            let Some(ev) = self.queue.pop() else {
                break;
            };
            if ev.time > self.cfg.max_time {
                self.now = self.cfg.max_time;
                break;
            }
            if ev.kind.is_work() {
                self.work -= 1;
            }
            self.now = ev.time;
            let r = panic::catch_unwind(AssertUnwindSafe(|| {
                self.handle(ev);
                self.pump_sequencer();
            }));
            if let Err(e) = r {
                return Err(self.abort(e));
            }
        }
        let fingerprints: Vec<_> = self.nodes.iter().map(|n| n.state_fingerprint()).collect();
        let states: serde_json::Map<String, Value> = self
            .cfg
            .membership
            .processes()
            .map(|p| {
                (
                    p.to_string(),
                    fingerprints[p.index()].clone().map_or(Value::Null, Value::String),
                )
            })
            .collect();
        self.sim_trace(
            "final",
            vec![
                ("quiesced", json!(quiesced)),
                ("log", json!(self.sequencer.log().len())),
                ("states", Value::Object(states)),
            ],
        );
        Ok(SimOutcome {
            end_time: self.now,
            quiesced,
            fingerprints,
            messages: self.messages,
            log: self.sequencer.log().to_vec(),
            trace: self.trace,
            nodes: self.nodes,
            crashed: self.crashed,
        })
    }

    fn abort(self, e: Box<dyn Any + Send>) -> SimAbort {
        let message = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "handler panicked".into());
        SimAbort {
            message,
            trace: self.trace,
        }
    }
}
