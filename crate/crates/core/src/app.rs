//! Application model: replica identities, operations, states, evidence and the
//! two reference key-value applications.
//!
//! Every byte encoding in this module feeds the hash oracle, so the layouts are
//! fixed: big-endian integers, `u32` length prefixes, map keys in ascending
//! lexicographic order.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::VrfTriple;
use crate::wire::{Reader, WireError, WireResult, Writer};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CoreError {
    #[error("need n > 3f, got n = {n}, f = {f}")]
    TooFewProcesses { n: usize, f: usize },
    #[error("process index {index} out of range for n = {n}")]
    NoSuchProcess { index: usize, n: usize },
    #[error("rollback of operation {0} that was never executed here")]
    NotJournaled(OpId),
    #[error(transparent)]
    Wire(#[from] WireError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
#[serde(transparent)]
pub struct ProcessId(pub u16);

impl ProcessId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for ProcessId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "p{}", self.0)
    }
}

/// The static process set: `n` replicas of which at most `f` are faulty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Membership {
    n: usize,
    f: usize,
}

impl Membership {
    pub fn new(n: usize, f: usize) -> Result<Self, CoreError> {
        if n <= 3 * f || n == 0 || n > u16::MAX as usize {
            return Err(CoreError::TooFewProcesses { n, f });
        }
        Ok(Self { n, f })
    }

    /// Largest tolerable `f` for `n` processes.
    pub fn with_max_faults(n: usize) -> Result<Self, CoreError> {
        Self::new(n, n.saturating_sub(1) / 3)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn f(&self) -> usize {
        self.f
    }

    pub fn process(&self, index: usize) -> Result<ProcessId, CoreError> {
        if index >= self.n {
            return Err(CoreError::NoSuchProcess { index, n: self.n });
        }
        Ok(ProcessId(index as u16))
    }

    pub fn processes(&self) -> impl Iterator<Item = ProcessId> {
        (0..self.n as u16).map(ProcessId)
    }

    pub fn contains(&self, p: ProcessId) -> bool {
        p.index() < self.n
    }

    /// Deterministic leader of an epoch: `epoch mod n`.
    pub fn leader_of(&self, epoch: u64) -> ProcessId {
        ProcessId((epoch % self.n as u64) as u16)
    }
}

/// Globally unique operation identifier: invoker plus a per-invoker counter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct OpId {
    pub invoker: ProcessId,
    pub counter: u64,
}

impl OpId {
    pub fn encode_into(&self, w: &mut Writer) {
        w.u16(self.invoker.0).u64(self.counter);
    }

    pub fn decode_from(r: &mut Reader<'_>) -> WireResult<Self> {
        Ok(Self {
            invoker: ProcessId(r.u16()?),
            counter: r.u64()?,
        })
    }
}

impl fmt::Display for OpId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.invoker, self.counter)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Operation {
    pub id: OpId,
    pub payload: Vec<u8>,
}

impl Operation {
    pub fn new(id: OpId, payload: Vec<u8>) -> Self {
        Self { id, payload }
    }

    pub fn encode_into(&self, w: &mut Writer) {
        self.id.encode_into(w);
        w.bytes(&self.payload);
    }

    pub fn decode_from(r: &mut Reader<'_>) -> WireResult<Self> {
        let id = OpId::decode_from(r)?;
        let payload = r.bytes()?.to_vec();
        Ok(Self { id, payload })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.encode_into(&mut w);
        w.into_bytes()
    }

    pub fn decode(bytes: &[u8]) -> WireResult<Self> {
        let mut r = Reader::new(bytes);
        let op = Self::decode_from(&mut r)?;
        r.finish()?;
        Ok(op)
    }
}

/// Key-value application state with a canonical encoding.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct AppState {
    entries: BTreeMap<Vec<u8>, Vec<u8>>,
}

impl AppState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, key: &[u8]) -> Option<&[u8]> {
        self.entries.get(key).map(Vec::as_slice)
    }

    pub fn insert(&mut self, key: impl Into<Vec<u8>>, value: impl Into<Vec<u8>>) {
        self.entries.insert(key.into(), value.into());
    }

    pub fn remove(&mut self, key: &[u8]) -> Option<Vec<u8>> {
        self.entries.remove(key)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[u8], &[u8])> {
        self.entries.iter().map(|(k, v)| (k.as_slice(), v.as_slice()))
    }

    /// `u32` entry count, then each entry as length-prefixed key and value,
    /// keys ascending.
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u32(self.entries.len() as u32);
        for (k, v) in &self.entries {
            w.bytes(k).bytes(v);
        }
        w.into_bytes()
    }

    /// Strict inverse of [`AppState::encode`]; rejects unsorted or duplicate keys.
    pub fn decode(bytes: &[u8]) -> WireResult<Self> {
        let mut r = Reader::new(bytes);
        let count = r.u32()?;
        let mut entries = BTreeMap::new();
        let mut last: Option<&[u8]> = None;
        for _ in 0..count {
            let k = r.bytes()?;
            let v = r.bytes()?;
            if last.is_some_and(|prev| prev >= k) {
                return Err(WireError::Invalid("state keys not strictly ascending"));
            }
            last = Some(k);
            entries.insert(k.to_vec(), v.to_vec());
        }
        r.finish()?;
        Ok(Self { entries })
    }
}

impl<K: Into<Vec<u8>>, V: Into<Vec<u8>>> FromIterator<(K, V)> for AppState {
    fn from_iter<I: IntoIterator<Item = (K, V)>>(iter: I) -> Self {
        Self {
            entries: iter.into_iter().map(|(k, v)| (k.into(), v.into())).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct Response(pub Vec<u8>);

impl Response {
    pub fn ok() -> Self {
        Self(b"ok".to_vec())
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }
}

impl From<&str> for Response {
    fn from(s: &str) -> Self {
        Self(s.as_bytes().to_vec())
    }
}

/// One non-deterministic choice made while executing an operation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Choice {
    RandomBytes(Vec<u8>),
    Clock(u64),
    Vrf(VrfTriple),
}

const CHOICE_RANDOM: u8 = 0x01;
const CHOICE_CLOCK: u8 = 0x02;
const CHOICE_VRF: u8 = 0x03;

/// Ordered record of every non-deterministic choice of one execution.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Evidence {
    pub choices: Vec<Choice>,
}

impl Evidence {
    pub fn is_empty(&self) -> bool {
        self.choices.is_empty()
    }

    /// `u32` record count; each record is a tag byte and a length-prefixed body.
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u32(self.choices.len() as u32);
        for c in &self.choices {
            match c {
                Choice::RandomBytes(b) => {
                    w.u8(CHOICE_RANDOM).bytes(b);
                }
                Choice::Clock(t) => {
                    w.u8(CHOICE_CLOCK).bytes(&t.to_be_bytes());
                }
                Choice::Vrf(triple) => {
                    w.u8(CHOICE_VRF).bytes(&triple.encode());
                }
            }
        }
        w.into_bytes()
    }

    pub fn decode(bytes: &[u8]) -> WireResult<Self> {
        let mut r = Reader::new(bytes);
        let count = r.u32()?;
        let mut choices = Vec::new();
        for _ in 0..count {
            let tag = r.u8()?;
            let body = r.bytes()?;
            choices.push(match tag {
                CHOICE_RANDOM => Choice::RandomBytes(body.to_vec()),
                CHOICE_CLOCK => {
                    let arr: [u8; 8] = body
                        .try_into()
                        .map_err(|_| WireError::Invalid("clock record must be 8 bytes"))?;
                    Choice::Clock(u64::from_be_bytes(arr))
                }
                CHOICE_VRF => Choice::Vrf(VrfTriple::decode(body)?),
                other => return Err(WireError::UnknownTag(other)),
            });
        }
        r.finish()?;
        Ok(Self { choices })
    }
}

/// Raised when a replaying environment cannot supply a recorded choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("non-deterministic choice unavailable")]
pub struct ChoiceUnavailable;

/// Source of non-determinism an application may consult while executing.
pub trait Environment {
    fn random_bytes(&mut self, len: usize) -> Result<Vec<u8>, ChoiceUnavailable>;
    fn clock(&mut self) -> Result<u64, ChoiceUnavailable>;
    /// Verifiable randomness for crypto-rand-put (the Mastercrypt source).
    fn verifiable_random(&mut self) -> Result<VrfTriple, ChoiceUnavailable>;
}

/// Environment for purely deterministic execution: every choice is unavailable.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoChoices;

impl Environment for NoChoices {
    fn random_bytes(&mut self, _len: usize) -> Result<Vec<u8>, ChoiceUnavailable> {
        Err(ChoiceUnavailable)
    }
    fn clock(&mut self) -> Result<u64, ChoiceUnavailable> {
        Err(ChoiceUnavailable)
    }
    fn verifiable_random(&mut self) -> Result<VrfTriple, ChoiceUnavailable> {
        Err(ChoiceUnavailable)
    }
}

/// Wraps a live environment and records each choice it hands out.
pub struct RecordingEnv<'a> {
    inner: &'a mut dyn Environment,
    choices: Vec<Choice>,
}

impl<'a> RecordingEnv<'a> {
    pub fn new(inner: &'a mut dyn Environment) -> Self {
        Self {
            inner,
            choices: Vec::new(),
        }
    }

    pub fn into_evidence(self) -> Evidence {
        Evidence { choices: self.choices }
    }
}

impl Environment for RecordingEnv<'_> {
    fn random_bytes(&mut self, len: usize) -> Result<Vec<u8>, ChoiceUnavailable> {
        let b = self.inner.random_bytes(len)?;
        self.choices.push(Choice::RandomBytes(b.clone()));
        Ok(b)
    }

    fn clock(&mut self) -> Result<u64, ChoiceUnavailable> {
        let t = self.inner.clock()?;
        self.choices.push(Choice::Clock(t));
        Ok(t)
    }

    fn verifiable_random(&mut self) -> Result<VrfTriple, ChoiceUnavailable> {
        let v = self.inner.verifiable_random()?;
        self.choices.push(Choice::Vrf(v.clone()));
        Ok(v)
    }
}

/// Decides whether a recorded VRF triple is acceptable to the replaying process.
pub trait ChoiceVerifier {
    fn accept_vrf(&self, triple: &VrfTriple) -> bool;
}

/// Rejects every VRF record; suitable where no Mastercrypt context exists.
#[derive(Debug, Default, Clone, Copy)]
pub struct RejectVrf;

impl ChoiceVerifier for RejectVrf {
    fn accept_vrf(&self, _triple: &VrfTriple) -> bool {
        false
    }
}

/// Replays pinned choices in order; any mismatch in kind or length fails.
struct ReplayEnv<'a> {
    choices: std::slice::Iter<'a, Choice>,
    verifier: &'a dyn ChoiceVerifier,
}

impl Environment for ReplayEnv<'_> {
    fn random_bytes(&mut self, len: usize) -> Result<Vec<u8>, ChoiceUnavailable> {
        match self.choices.next() {
            Some(Choice::RandomBytes(b)) if b.len() == len => Ok(b.clone()),
            _ => Err(ChoiceUnavailable),
        }
    }

    fn clock(&mut self) -> Result<u64, ChoiceUnavailable> {
        match self.choices.next() {
            Some(Choice::Clock(t)) => Ok(*t),
            _ => Err(ChoiceUnavailable),
        }
    }

    fn verifiable_random(&mut self) -> Result<VrfTriple, ChoiceUnavailable> {
        match self.choices.next() {
            Some(Choice::Vrf(v)) if self.verifier.accept_vrf(v) => Ok(v.clone()),
            _ => Err(ChoiceUnavailable),
        }
    }
}

/// A (possibly non-deterministic) state machine.
pub trait Application: Send + Sync {
    fn name(&self) -> &'static str;

    /// Runs `op` on `s`, consulting `env` for every non-deterministic choice.
    fn apply(
        &self,
        s: &AppState,
        op: &Operation,
        env: &mut dyn Environment,
    ) -> Result<(AppState, Response), ChoiceUnavailable>;

    fn execute(&self, s: &AppState, op: &Operation, env: &mut dyn Environment) -> (AppState, Response) {
        // Live environments never refuse; an app that still fails leaves the
        // state untouched.
        self.apply(s, op, env)
            .unwrap_or_else(|_| (s.clone(), Response::from("err:unavailable")))
    }

    fn nondet_execute(
        &self,
        s: &AppState,
        op: &Operation,
        env: &mut dyn Environment,
    ) -> (AppState, Response, Evidence) {
        let mut rec = RecordingEnv::new(env);
        let (s2, r) = self.execute(s, op, &mut rec);
        (s2, r, rec.into_evidence())
    }

    /// Re-executes `op` with the choices pinned by `rho`. `None` if the evidence
    /// cannot drive the execution or is not fully consumed.
    fn replay(
        &self,
        s: &AppState,
        op: &Operation,
        rho: &Evidence,
        verifier: &dyn ChoiceVerifier,
    ) -> Option<(AppState, Response)> {
        let mut env = ReplayEnv {
            choices: rho.choices.iter(),
            verifier,
        };
        let out = self.apply(s, op, &mut env).ok()?;
        if env.choices.next().is_some() {
            return None;
        }
        Some(out)
    }

    fn verify_execution(
        &self,
        s: &AppState,
        op: &Operation,
        s2: &AppState,
        r: &Response,
        rho: &Evidence,
        verifier: &dyn ChoiceVerifier,
    ) -> bool {
        self.replay(s, op, rho, verifier)
            .is_some_and(|(rs, rr)| &rs == s2 && &rr == r)
    }
}

const CMD_PUT: u8 = 0x01;
const CMD_GET: u8 = 0x02;
const CMD_DEL: u8 = 0x03;
const CMD_RAND_PUT: u8 = 0x04;
const CMD_TS_PUT: u8 = 0x05;
const CMD_CRYPTO_RAND_PUT: u8 = 0x06;

/// Commands understood by the reference key-value applications.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum KvCommand {
    Put {
        key: Vec<u8>,
        value: Vec<u8>,
    },
    Get {
        key: Vec<u8>,
    },
    Del {
        key: Vec<u8>,
    },
    /// Stores one freshly drawn random byte.
    RandPut {
        key: Vec<u8>,
    },
    /// Stores the local simulated clock as decimal text.
    TsPut {
        key: Vec<u8>,
    },
    /// Stores 32 bytes of verifiable randomness.
    CryptoRandPut {
        key: Vec<u8>,
    },
}

impl KvCommand {
    pub fn put(key: &str, value: &str) -> Self {
        Self::Put {
            key: key.into(),
            value: value.into(),
        }
    }

    pub fn get(key: &str) -> Self {
        Self::Get { key: key.into() }
    }

    pub fn del(key: &str) -> Self {
        Self::Del { key: key.into() }
    }

    pub fn rand_put(key: &str) -> Self {
        Self::RandPut { key: key.into() }
    }

    pub fn ts_put(key: &str) -> Self {
        Self::TsPut { key: key.into() }
    }

    pub fn crypto_rand_put(key: &str) -> Self {
        Self::CryptoRandPut { key: key.into() }
    }

    pub fn is_deterministic(&self) -> bool {
        matches!(self, Self::Put { .. } | Self::Get { .. } | Self::Del { .. })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        match self {
            Self::Put { key, value } => {
                w.u8(CMD_PUT).bytes(key).bytes(value);
            }
            Self::Get { key } => {
                w.u8(CMD_GET).bytes(key);
            }
            Self::Del { key } => {
                w.u8(CMD_DEL).bytes(key);
            }
            Self::RandPut { key } => {
                w.u8(CMD_RAND_PUT).bytes(key);
            }
            Self::TsPut { key } => {
                w.u8(CMD_TS_PUT).bytes(key);
            }
            Self::CryptoRandPut { key } => {
                w.u8(CMD_CRYPTO_RAND_PUT).bytes(key);
            }
        }
        w.into_bytes()
    }

    pub fn decode(bytes: &[u8]) -> WireResult<Self> {
        let mut r = Reader::new(bytes);
        let cmd = match r.u8()? {
            CMD_PUT => Self::Put {
                key: r.bytes()?.to_vec(),
                value: r.bytes()?.to_vec(),
            },
            CMD_GET => Self::Get {
                key: r.bytes()?.to_vec(),
            },
            CMD_DEL => Self::Del {
                key: r.bytes()?.to_vec(),
            },
            CMD_RAND_PUT => Self::RandPut {
                key: r.bytes()?.to_vec(),
            },
            CMD_TS_PUT => Self::TsPut {
                key: r.bytes()?.to_vec(),
            },
            CMD_CRYPTO_RAND_PUT => Self::CryptoRandPut {
                key: r.bytes()?.to_vec(),
            },
            other => return Err(WireError::UnknownTag(other)),
        };
        r.finish()?;
        Ok(cmd)
    }

    /// Parses the text form used in scenario files, e.g. `put x 5` or `rand-put k`.
    pub fn parse(text: &str) -> Option<Self> {
        let parts: Vec<&str> = text.split_whitespace().collect();
        match parts.as_slice() {
            ["put", k, v] => Some(Self::put(k, v)),
            ["get", k] => Some(Self::get(k)),
            ["del", k] => Some(Self::del(k)),
            ["rand-put", k] => Some(Self::rand_put(k)),
            ["ts-put", k] => Some(Self::ts_put(k)),
            ["crypto-rand-put", k] => Some(Self::crypto_rand_put(k)),
            _ => None,
        }
    }
}

impl fmt::Display for KvCommand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = String::from_utf8_lossy;
        match self {
            Self::Put { key, value } => write!(f, "put {} {}", s(key), s(value)),
            Self::Get { key } => write!(f, "get {}", s(key)),
            Self::Del { key } => write!(f, "del {}", s(key)),
            Self::RandPut { key } => write!(f, "rand-put {}", s(key)),
            Self::TsPut { key } => write!(f, "ts-put {}", s(key)),
            Self::CryptoRandPut { key } => write!(f, "crypto-rand-put {}", s(key)),
        }
    }
}

fn apply_kv(
    s: &AppState,
    payload: &[u8],
    allow_nondet: bool,
    env: &mut dyn Environment,
) -> Result<(AppState, Response), ChoiceUnavailable> {
    let Ok(cmd) = KvCommand::decode(payload) else {
        return Ok((s.clone(), Response::from("err:malformed")));
    };
    if !allow_nondet && !cmd.is_deterministic() {
        return Ok((s.clone(), Response::from("err:unsupported")));
    }
    let mut next = s.clone();
    let response = match cmd {
        KvCommand::Put { key, value } => {
            next.insert(key, value);
            Response::ok()
        }
        KvCommand::Get { key } => match s.get(&key) {
            Some(v) => Response(v.to_vec()),
            None => Response::from("nil"),
        },
        KvCommand::Del { key } => match next.remove(&key) {
            Some(_) => Response::ok(),
            None => Response::from("nil"),
        },
        KvCommand::RandPut { key } => {
            let b = env.random_bytes(1)?;
            next.insert(key, b);
            Response::ok()
        }
        KvCommand::TsPut { key } => {
            let t = env.clock()?;
            next.insert(key, t.to_string());
            Response::ok()
        }
        KvCommand::CryptoRandPut { key } => {
            let v = env.verifiable_random()?;
            next.insert(key, v.output.to_vec());
            Response::ok()
        }
    };
    Ok((next, response))
}

/// Deterministic key-value store: put, get, del.
#[derive(Debug, Default, Clone, Copy)]
pub struct KvStore;

impl Application for KvStore {
    fn name(&self) -> &'static str {
        "kv"
    }

    fn apply(
        &self,
        s: &AppState,
        op: &Operation,
        env: &mut dyn Environment,
    ) -> Result<(AppState, Response), ChoiceUnavailable> {
        apply_kv(s, &op.payload, false, env)
    }
}

/// Key-value store that also accepts rand-put, ts-put and crypto-rand-put.
#[derive(Debug, Default, Clone, Copy)]
pub struct NondetKvStore;

impl Application for NondetKvStore {
    fn name(&self) -> &'static str {
        "nondet-kv"
    }

    fn apply(
        &self,
        s: &AppState,
        op: &Operation,
        env: &mut dyn Environment,
    ) -> Result<(AppState, Response), ChoiceUnavailable> {
        apply_kv(s, &op.payload, true, env)
    }
}

#[derive(Debug, Clone)]
struct JournalEntry {
    op: OpId,
    pre: AppState,
    post: AppState,
    response: Response,
}

/// Pre-state journal backing `rollback` for speculative executions.
#[derive(Debug, Clone, Default)]
pub struct SpeculationJournal {
    entries: Vec<JournalEntry>,
}

impl SpeculationJournal {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn execute(
        &mut self,
        app: &dyn Application,
        s: &AppState,
        op: &Operation,
        env: &mut dyn Environment,
    ) -> (AppState, Response) {
        let (t, r) = app.execute(s, op, env);
        self.entries.push(JournalEntry {
            op: op.id,
            pre: s.clone(),
            post: t.clone(),
            response: r.clone(),
        });
        (t, r)
    }

    /// Returns the pre-state of the journaled execution that produced `(t, r)`
    /// for `op`, and forgets it.
    pub fn rollback(&mut self, t: &AppState, r: &Response, op: &Operation) -> Result<AppState, CoreError> {
        let pos = self
            .entries
            .iter()
            .rposition(|e| e.op == op.id && &e.post == t && &e.response == r)
            .ok_or(CoreError::NotJournaled(op.id))?;
        Ok(self.entries.remove(pos).pre)
    }

    /// Drops the journal entry of a committed operation.
    pub fn forget(&mut self, op: OpId) {
        self.entries.retain(|e| e.op != op);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
