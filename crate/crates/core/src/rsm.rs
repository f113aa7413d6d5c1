//! Bookkeeping shared by the Sieve and master-slave replicas: invoked
//! operations, the current configuration, epoch-change glue and the commit log.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde_json::json;

use crate::abv::AbvPayload;
use crate::app::{Membership, OpId, Operation, ProcessId};
use crate::epoch::{EpochChange, EpochConfig};
use crate::simnet::Ctx;
use crate::wire::{Reader, WireResult, Writer};

pub const KIND_INVOKE: u8 = 0x20;

/// Timer id of the periodic age check.
pub const AGE_TIMER: u64 = 1;

/// Whether order messages carry full outputs or only their digests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Mode {
    #[default]
    Full,
    Hash,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Full => "full",
            Self::Hash => "hash",
        })
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(Self::Full),
            "hash" => Ok(Self::Hash),
            other => Err(format!("unknown mode `{other}` (expected full or hash)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Decision {
    Confirm,
    Abort,
}

impl Decision {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Confirm => "confirm",
            Self::Abort => "abort",
        }
    }
}

/// One commit point. `state` is the content fingerprint of the committed state
/// after the operation; `response` is absent for aborted operations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommitRecord {
    pub op: OpId,
    pub config: u64,
    pub decision: Decision,
    pub state: String,
    pub response: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Pending {
    pub op: Operation,
    /// Time the operation was last (re-)sent to a leader; drives the age check.
    pub since: u64,
}

/// `0x20 ‖ config ‖ op`
pub fn encode_invoke(config: u64, op: &Operation) -> Vec<u8> {
    let mut w = Writer::with_tag(KIND_INVOKE);
    w.u64(config);
    op.encode_into(&mut w);
    w.into_bytes()
}

pub fn decode_invoke(bytes: &[u8]) -> WireResult<(u64, Operation)> {
    let mut r = Reader::new(bytes.get(1..).unwrap_or_default());
    let config = r.u64()?;
    let op = Operation::decode_from(&mut r)?;
    r.finish()?;
    Ok((config, op))
}

#[derive(Debug, Clone)]
pub struct ReplicaCore {
    pub me: ProcessId,
    pub membership: Membership,
    pub psi: EpochChange,
    pub invoked: BTreeMap<OpId, Pending>,
    next_counter: u64,
    pub config: u64,
    pub leader: ProcessId,
    pub next: Option<EpochConfig>,
    pub committed: HashSet<OpId>,
    pub commits: Vec<CommitRecord>,
    /// Invokes addressed to a configuration this process has not adopted yet.
    held: Vec<(ProcessId, u64, Operation)>,
}

impl ReplicaCore {
    pub fn new(membership: Membership, me: ProcessId) -> Self {
        Self {
            me,
            membership,
            psi: EpochChange::new(membership, me),
            invoked: BTreeMap::new(),
            next_counter: 0,
            config: 0,
            leader: membership.leader_of(0),
            next: None,
            committed: HashSet::new(),
            commits: Vec::new(),
            held: Vec::new(),
        }
    }

    pub fn start(&mut self, ctx: &mut Ctx<'_>) {
        let tick = ctx.config().tick;
        ctx.set_timer(tick, AGE_TIMER);
    }

    pub fn fresh_op(&mut self, payload: Vec<u8>) -> Operation {
        let id = OpId {
            invoker: self.me,
            counter: self.next_counter,
        };
        self.next_counter += 1;
        Operation::new(id, payload)
    }

    /// Adds `op` to the invoked set and sends it to the current leader.
    pub fn submit(&mut self, ctx: &mut Ctx<'_>, op: Operation) -> bool {
        if self.invoked.contains_key(&op.id) || self.committed.contains(&op.id) {
            ctx.trace("invoke-rejected", vec![("op", json!(op.id.to_string()))]);
            return false;
        }
        ctx.trace(
            "invoke",
            vec![
                ("op", json!(op.id.to_string())),
                ("config", json!(self.config)),
                ("leader", json!(self.leader.0)),
            ],
        );
        ctx.send(self.leader, encode_invoke(self.config, &op));
        self.invoked.insert(op.id, Pending { op, since: ctx.now() });
        true
    }

    /// Periodic check: complain about the trusted leader if some invoked
    /// operation has waited longer than the current epoch's timeout.
    pub fn age_check(&mut self, ctx: &mut Ctx<'_>) {
        let limit = ctx.config().epoch_timeout(self.psi.current().epoch);
        let now = ctx.now();
        if self.invoked.values().any(|p| now.saturating_sub(p.since) > limit) {
            let trusted = self.psi.trusted();
            self.psi.complain_about_trusted(ctx, trusted);
        }
        let tick = ctx.config().tick;
        ctx.set_timer(tick, AGE_TIMER);
    }

    /// Feeds a complaint or certificate to the epoch change. When an epoch
    /// starts, records it as the announced next configuration, restarts the age
    /// of every pending operation and, if this process leads it, announces it.
    pub fn on_epoch_message(&mut self, ctx: &mut Ctx<'_>, bytes: &[u8]) -> Option<EpochConfig> {
        let started = self.psi.handle(ctx, bytes)?;
        self.next = Some(started);
        let now = ctx.now();
        for p in self.invoked.values_mut() {
            p.since = now;
        }
        if started.leader == self.me && started.epoch > self.config {
            ctx.abv_broadcast(
                AbvPayload::NewConfig {
                    config: started.epoch,
                    leader: self.me,
                }
                .encode(),
            );
        }
        Some(started)
    }

    /// Validity of a new-configuration announcement: it must not exceed the
    /// announced epoch, must come from the announced leader itself, and must
    /// move the configuration forward.
    pub fn new_config_valid(&self, sender: ProcessId, config: u64, leader: ProcessId) -> bool {
        self.next.is_some_and(|n| config <= n.epoch && leader == n.leader) && sender == leader && config > self.config
    }

    /// Switches to `(config, leader)` and re-sends every pending operation to
    /// the new leader. Returns held invokes addressed to the new configuration.
    pub fn adopt(&mut self, ctx: &mut Ctx<'_>, config: u64, leader: ProcessId) -> Vec<(ProcessId, Operation)> {
        self.config = config;
        self.leader = leader;
        ctx.trace("config", vec![("config", json!(config)), ("leader", json!(leader.0))]);
        let now = ctx.now();
        for p in self.invoked.values_mut() {
            p.since = now;
            ctx.send(leader, encode_invoke(config, &p.op));
        }
        let held = std::mem::take(&mut self.held);
        let mut ready = Vec::new();
        for (from, c, op) in held {
            if c == config {
                ready.push((from, op));
            } else if c > config {
                self.held.push((from, c, op));
            }
        }
        ready
    }

    /// Sorts an incoming invoke: `Some` if it targets the current configuration,
    /// held for later if it targets a future one, dropped if stale.
    pub fn accept_invoke(
        &mut self,
        ctx: &mut Ctx<'_>,
        from: ProcessId,
        config: u64,
        op: Operation,
    ) -> Option<Operation> {
        if op.id.invoker != from {
            ctx.note("invoke for another process's operation dropped");
            return None;
        }
        if config > self.config {
            self.held.push((from, config, op));
            return None;
        }
        if config < self.config {
            ctx.trace(
                "invoke-stale",
                vec![("op", json!(op.id.to_string())), ("config", json!(config))],
            );
            return None;
        }
        if self.leader != self.me {
            ctx.trace("invoke-not-leader", vec![("op", json!(op.id.to_string()))]);
            return None;
        }
        if self.committed.contains(&op.id) {
            return None;
        }
        Some(op)
    }

    pub fn record_commit(&mut self, ctx: &mut Ctx<'_>, rec: CommitRecord) {
        self.invoked.remove(&rec.op);
        self.committed.insert(rec.op);
        ctx.trace(
            "commit",
            vec![
                ("op", json!(rec.op.to_string())),
                ("config", json!(rec.config)),
                ("decision", json!(rec.decision.as_str())),
                ("state", json!(rec.state)),
                (
                    "response",
                    rec.response.clone().map_or(serde_json::Value::Null, Into::into),
                ),
            ],
        );
        self.commits.push(rec);
    }

    pub fn settled(&self) -> bool {
        self.invoked.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn invoke_wire_layout() {
        let op = Operation::new(
            OpId {
                invoker: ProcessId(2),
                counter: 9,
            },
            vec![0xAA],
        );
        let bytes = encode_invoke(5, &op);
        assert_eq!(bytes[0], KIND_INVOKE);
        assert_eq!(&bytes[1..9], &5u64.to_be_bytes());
        assert_eq!(decode_invoke(&bytes).unwrap(), (5, op));
        assert!(decode_invoke(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn mode_parses() {
        assert_eq!("hash".parse::<Mode>().unwrap(), Mode::Hash);
        assert_eq!(Mode::Full.to_string(), "full");
        assert!("fast".parse::<Mode>().is_err());
    }

    #[test]
    fn new_config_rule() {
        let m = Membership::new(4, 1).unwrap();
        let mut core = ReplicaCore::new(m, ProcessId(2));
        assert!(!core.new_config_valid(ProcessId(1), 1, ProcessId(1)));
        core.next = Some(EpochConfig::for_epoch(&m, 1));
        assert!(core.new_config_valid(ProcessId(1), 1, ProcessId(1)));
        assert!(!core.new_config_valid(ProcessId(3), 1, ProcessId(1)));
        assert!(!core.new_config_valid(ProcessId(2), 1, ProcessId(2)));
        assert!(!core.new_config_valid(ProcessId(1), 2, ProcessId(1)));
    }
}
