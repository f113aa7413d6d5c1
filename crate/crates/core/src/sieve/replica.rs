use std::any::Any;
use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use rand::RngCore;
use serde_json::json;

use crate::abv::{AbvMessage, AbvPayload};
use crate::app::{AppState, Application, Membership, OpId, Operation, ProcessId, Response, SpeculationJournal};
use crate::crypto::{fingerprint, output_digest, response_digest, speculate_payload, state_digest, vrf_tag, Digest};
use crate::rsm::{CommitRecord, Decision, Mode, ReplicaCore, AGE_TIMER};
use crate::simnet::{Ctx, Node};

use super::decide::{decide, Verdict};
use super::messages::{ApproveMessage, OrderMessage, OrderOutput, PeerMessage};
use super::validate::validate;

/// Outputs kept for answering state requests.
const OUTPUT_CACHE: usize = 64;

/// Offset of the operation counters a misbehaving leader invents.
const FORGED_COUNTER_BASE: u64 = 1_000_000;

/// How a replica deviates from the protocol. Everything except `Honest` is a
/// Byzantine strategy; all of them sign only as the replica itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SieveBehaviour {
    #[default]
    Honest,
    /// Approves every execution with a random digest.
    WrongDigest,
    /// As leader, sends a different operation to the `f` highest-numbered
    /// other processes than to everyone else.
    EquivocatingLeader,
    /// Answers state requests with a corrupted state.
    GarbageResponder,
    /// Never answers state requests.
    SilentResponder,
}

#[derive(Debug, Clone)]
struct Speculation {
    op: Operation,
    t: AppState,
    r: Response,
    digest: Digest,
}

#[derive(Debug, Clone)]
struct Cached {
    op: OpId,
    digest: Digest,
    t: AppState,
    r: Response,
}

/// The leader's in-flight operation.
#[derive(Debug)]
struct Round {
    op: Operation,
    approvals: Vec<ApproveMessage>,
    verdict: Option<Verdict>,
    fetching: bool,
    ordered: bool,
}

/// A hash-mode commit waiting for the agreed output.
#[derive(Debug)]
struct Transfer {
    order: OrderMessage,
    digest: Digest,
}

pub struct SieveReplica {
    core: ReplicaCore,
    mode: Mode,
    behaviour: SieveBehaviour,
    app: Arc<dyn Application>,
    /// Committed state; in hash mode the speculative output is applied in place
    /// and undone through the journal.
    s: AppState,
    committed_fp: String,
    journal: SpeculationJournal,
    spec: Option<Speculation>,
    buffers: BTreeMap<ProcessId, VecDeque<Operation>>,
    rr_next: u16,
    round: Option<Round>,
    outputs: VecDeque<Cached>,
    inbox: VecDeque<AbvMessage>,
    processed: usize,
    transfer: Option<Transfer>,
    deferred: VecDeque<(ProcessId, PeerMessage)>,
    quarantine: Vec<OpId>,
    responses: Vec<(OpId, Response)>,
    seq: u64,
}

impl SieveReplica {
    pub fn new(membership: Membership, me: ProcessId, mode: Mode, app: Arc<dyn Application>) -> Self {
        let s = AppState::new();
        Self {
            core: ReplicaCore::new(membership, me),
            mode,
            behaviour: SieveBehaviour::Honest,
            app,
            committed_fp: fingerprint(&s.encode()),
            s,
            journal: SpeculationJournal::new(),
            spec: None,
            buffers: BTreeMap::new(),
            rr_next: 0,
            round: None,
            outputs: VecDeque::new(),
            inbox: VecDeque::new(),
            processed: 0,
            transfer: None,
            deferred: VecDeque::new(),
            quarantine: Vec::new(),
            responses: Vec::new(),
            seq: 0,
        }
    }

    pub fn with_behaviour(mut self, behaviour: SieveBehaviour) -> Self {
        self.behaviour = behaviour;
        self
    }

    pub fn commits(&self) -> &[CommitRecord] {
        &self.core.commits
    }

    /// Responses emitted to the application client, in commit order.
    pub fn responses(&self) -> &[(OpId, Response)] {
        &self.responses
    }

    pub fn quarantined(&self) -> &[OpId] {
        &self.quarantine
    }

    /// Last committed state. In hash mode an outstanding speculation is not
    /// included.
    pub fn committed_fingerprint(&self) -> &str {
        &self.committed_fp
    }

    pub fn config(&self) -> (u64, ProcessId) {
        (self.core.config, self.core.leader)
    }

    pub fn epochs(&self) -> &[crate::epoch::EpochConfig] {
        self.core.psi.started()
    }

    fn is_leader(&self) -> bool {
        self.core.leader == self.core.me
    }

    fn cache(&mut self, op: OpId, digest: Digest, t: AppState, r: Response) {
        if self.outputs.iter().any(|c| c.op == op && c.digest == digest) {
            return;
        }
        if self.outputs.len() == OUTPUT_CACHE {
            self.outputs.pop_front();
        }
        self.outputs.push_back(Cached { op, digest, t, r });
    }

    fn cached(&self, op: OpId, digest: Digest) -> Option<&Cached> {
        self.outputs.iter().find(|c| c.op == op && c.digest == digest)
    }

    // ---- leader side -------------------------------------------------------

    fn on_invoke(&mut self, ctx: &mut Ctx<'_>, from: ProcessId, config: u64, op: Operation) {
        if let Some(op) = self.core.accept_invoke(ctx, from, config, op) {
            self.buffer(ctx, from, op);
        }
    }

    fn buffer(&mut self, ctx: &mut Ctx<'_>, from: ProcessId, op: Operation) {
        let queued = self.buffers.values().flatten().any(|o| o.id == op.id)
            || self.round.as_ref().is_some_and(|r| r.op.id == op.id);
        if queued {
            return;
        }
        self.buffers.entry(from).or_default().push_back(op);
        self.try_dispatch(ctx);
    }

    /// Picks the next buffered operation: lowest process id at or after the
    /// round-robin pointer.
    fn try_dispatch(&mut self, ctx: &mut Ctx<'_>) {
        if !self.is_leader() || self.round.is_some() {
            return;
        }
        let n = self.core.membership.n() as u16;
        for k in 0..n {
            let p = ProcessId((self.rr_next + k) % n);
            let Some(q) = self.buffers.get_mut(&p) else {
                continue;
            };
            while let Some(op) = q.pop_front() {
                if self.core.committed.contains(&op.id) {
                    continue;
                }
                self.rr_next = (p.0 + 1) % n;
                self.dispatch(ctx, op);
                return;
            }
        }
    }

    fn dispatch(&mut self, ctx: &mut Ctx<'_>, op: Operation) {
        let config = self.core.config;
        ctx.trace(
            "dispatch",
            vec![("op", json!(op.id.to_string())), ("config", json!(config))],
        );
        let exec = PeerMessage::Execute { config, op: op.clone() }.encode();
        if self.behaviour == SieveBehaviour::EquivocatingLeader {
            let f = self.core.membership.f();
            let mut others: Vec<ProcessId> = self
                .core
                .membership
                .processes()
                .filter(|p| *p != self.core.me)
                .collect();
            let victims = others.split_off(others.len() - f);
            for p in self.core.membership.processes() {
                if victims.contains(&p) {
                    let forged = Operation::new(
                        OpId {
                            invoker: self.core.me,
                            counter: FORGED_COUNTER_BASE + op.id.counter,
                        },
                        crate::app::KvCommand::put("equivocation", &op.id.to_string()).encode(),
                    );
                    ctx.send(p, PeerMessage::Execute { config, op: forged }.encode());
                } else {
                    ctx.send(p, exec.clone());
                }
            }
        } else {
            ctx.send_all(exec);
        }
        self.round = Some(Round {
            op,
            approvals: Vec::new(),
            verdict: None,
            fetching: false,
            ordered: false,
        });
    }

    fn on_approve(&mut self, ctx: &mut Ctx<'_>, from: ProcessId, a: ApproveMessage) {
        if !self.is_leader() || a.config != self.core.config || a.signer() != from {
            return;
        }
        let f = self.core.membership.f();
        let Some(round) = self.round.as_mut() else {
            return;
        };
        if round.op.id != a.op || round.verdict.is_some() || round.approvals.iter().any(|x| x.signer() == from) {
            return;
        }
        if !a.verify(ctx.crypto_ref()) {
            ctx.note("approve with invalid signature dropped");
            return;
        }
        round.approvals.push(a);
        if round.approvals.len() == 2 * f + 1 {
            let verdict = decide(&round.approvals, f);
            let (decision, digest) = match verdict {
                Verdict::Confirm(d) => ("confirm", json!(d.to_string())),
                Verdict::Abort => ("abort", serde_json::Value::Null),
            };
            let op = round.op.id;
            round.verdict = Some(verdict);
            ctx.trace(
                "decide",
                vec![
                    ("op", json!(op.to_string())),
                    ("decision", json!(decision)),
                    ("digest", digest),
                ],
            );
            self.maybe_order(ctx);
        }
    }

    /// Broadcasts the order once the decision and, for CONFIRM, the agreed
    /// output are available; fetches that output from its approvers otherwise.
    fn maybe_order(&mut self, ctx: &mut Ctx<'_>) {
        let f = self.core.membership.f();
        let config = self.core.config;
        let Some(round) = self.round.as_ref() else {
            return;
        };
        if round.ordered {
            return;
        }
        let order = match round.verdict {
            None => return,
            Some(Verdict::Abort) => OrderMessage {
                decision: Decision::Abort,
                config,
                op: round.op.clone(),
                output: OrderOutput::None,
                justification: round.approvals.clone(),
            },
            Some(Verdict::Confirm(h)) => {
                let Some(c) = self.cached(round.op.id, h) else {
                    if !round.fetching {
                        let approvers: Vec<ProcessId> = round
                            .approvals
                            .iter()
                            .filter(|a| a.digest == h && a.signer() != self.core.me)
                            .map(|a| a.signer())
                            .collect();
                        let op = round.op.id;
                        ctx.trace(
                            "fetch",
                            vec![
                                ("op", json!(op.to_string())),
                                ("from", json!(approvers.iter().map(|p| p.0).collect::<Vec<_>>())),
                            ],
                        );
                        let req = PeerMessage::StateRequest { op, digest: h }.encode();
                        for p in approvers {
                            ctx.send(p, req.clone());
                        }
                        self.round.as_mut().unwrap().fetching = true;
                    }
                    return;
                };
                let output = match self.mode {
                    Mode::Full => OrderOutput::Full {
                        t: c.t.clone(),
                        r: c.r.clone(),
                    },
                    Mode::Hash => {
                        let (t, r) = (c.t.clone(), c.r.clone());
                        OrderOutput::Hashed {
                            ht: state_digest(ctx.crypto(), &t),
                            hr: response_digest(ctx.crypto(), &r),
                        }
                    }
                };
                OrderMessage {
                    decision: Decision::Confirm,
                    config,
                    op: round.op.clone(),
                    output,
                    justification: round
                        .approvals
                        .iter()
                        .filter(|a| a.digest == h)
                        .take(f + 1)
                        .cloned()
                        .collect(),
                }
            }
        };
        self.round.as_mut().unwrap().ordered = true;
        ctx.abv_broadcast(AbvPayload::Order(order).encode());
    }

    // ---- every process -----------------------------------------------------

    fn on_execute(&mut self, ctx: &mut Ctx<'_>, from: ProcessId, config: u64, op: Operation) {
        let reason = if from != self.core.leader {
            Some("not from leader")
        } else if config != self.core.config {
            Some("wrong config")
        } else if self.core.committed.contains(&op.id) {
            Some("already committed")
        } else {
            None
        };
        if let Some(reason) = reason {
            ctx.trace(
                "execute-ignored",
                vec![("op", json!(op.id.to_string())), ("reason", json!(reason))],
            );
            return;
        }
        let tag = vrf_tag(ctx.config().instance_id.as_bytes(), config, self.seq);
        let (t, r) = {
            let mut env = ctx.live_env(Some(tag));
            match self.mode {
                Mode::Full => self.app.execute(&self.s, &op, &mut env),
                Mode::Hash => self.journal.execute(self.app.as_ref(), &self.s, &op, &mut env),
            }
        };
        let ht = state_digest(ctx.crypto(), &t);
        let hr = response_digest(ctx.crypto(), &r);
        let digest = output_digest(ctx.crypto(), &ht, &hr);
        if self.mode == Mode::Hash {
            self.s = t.clone();
        }
        self.cache(op.id, digest, t.clone(), r.clone());
        let approved = if self.behaviour == SieveBehaviour::WrongDigest {
            let mut junk = [0u8; 32];
            ctx.byzantine_rng().fill_bytes(&mut junk);
            ctx.hash(&junk)
        } else {
            digest
        };
        let sig = ctx.sign(&speculate_payload(config, &approved));
        ctx.trace(
            "approve",
            vec![
                ("op", json!(op.id.to_string())),
                ("digest", json!(approved.to_string())),
            ],
        );
        let msg = PeerMessage::Approve(ApproveMessage {
            config,
            op: op.id,
            digest: approved,
            sig,
        });
        ctx.send(self.core.leader, msg.encode());
        self.spec = Some(Speculation { op, t, r, digest });
        if self.is_leader() {
            self.maybe_order(ctx);
        }
    }

    fn on_state_request(&mut self, ctx: &mut Ctx<'_>, from: ProcessId, op: OpId, digest: Digest) {
        let reply = match self.behaviour {
            SieveBehaviour::SilentResponder => return,
            SieveBehaviour::GarbageResponder => Some((
                [("garbage", "1")].into_iter().collect::<AppState>(),
                Response::from("garbage"),
            )),
            _ => self.cached(op, digest).map(|c| (c.t.clone(), c.r.clone())),
        };
        match reply {
            Some((t, r)) => {
                ctx.send(from, PeerMessage::StateResponse { op, digest, t, r }.encode());
            }
            None => ctx.note("state request for unknown output"),
        }
    }

    fn on_state_response(
        &mut self,
        ctx: &mut Ctx<'_>,
        from: ProcessId,
        op: OpId,
        digest: Digest,
        t: AppState,
        r: Response,
    ) {
        let ht = state_digest(ctx.crypto(), &t);
        let hr = response_digest(ctx.crypto(), &r);
        if output_digest(ctx.crypto(), &ht, &hr) != digest {
            ctx.trace(
                "state-rejected",
                vec![("op", json!(op.to_string())), ("from", json!(from.0))],
            );
            return;
        }
        self.cache(op, digest, t, r);
        if self
            .round
            .as_ref()
            .is_some_and(|rd| rd.op.id == op && rd.verdict == Some(Verdict::Confirm(digest)))
        {
            self.maybe_order(ctx);
        }
        if self
            .transfer
            .as_ref()
            .is_some_and(|x| x.order.op.id == op && x.digest == digest)
        {
            let x = self.transfer.take().unwrap();
            ctx.trace(
                "transfer-done",
                vec![("op", json!(op.to_string())), ("from", json!(from.0))],
            );
            let c = self.cached(op, digest).unwrap().clone();
            self.finish_confirm(ctx, &x.order, c.t, c.r);
            self.processed += 1;
            self.resume(ctx);
            self.try_dispatch(ctx);
        }
    }

    fn on_peer(&mut self, ctx: &mut Ctx<'_>, from: ProcessId, msg: PeerMessage) {
        match msg {
            PeerMessage::Execute { .. } if self.transfer.is_some() || self.spec.is_some() => {
                self.deferred.push_back((from, msg));
            }
            PeerMessage::Invoke { config, op } => self.on_invoke(ctx, from, config, op),
            PeerMessage::Execute { config, op } => self.on_execute(ctx, from, config, op),
            PeerMessage::Approve(a) => self.on_approve(ctx, from, a),
            PeerMessage::StateRequest { op, digest } => self.on_state_request(ctx, from, op, digest),
            PeerMessage::StateResponse { op, digest, t, r } => self.on_state_response(ctx, from, op, digest, t, r),
        }
    }

    /// Continues after a commit or state transfer: executions that arrived
    /// while a speculation was outstanding, then queued broadcast deliveries.
    fn resume(&mut self, ctx: &mut Ctx<'_>) {
        while self.transfer.is_none() {
            if self.spec.is_none() {
                if let Some((from, msg)) = self.deferred.pop_front() {
                    self.on_peer(ctx, from, msg);
                    continue;
                }
            }
            if !self.drain_inbox(ctx) {
                break;
            }
        }
    }

    /// Processes queued deliveries until the inbox empties or a transfer
    /// blocks. Returns whether anything was processed.
    fn drain_inbox(&mut self, ctx: &mut Ctx<'_>) -> bool {
        let mut any = false;
        while self.transfer.is_none() {
            let Some(m) = self.inbox.pop_front() else {
                break;
            };
            any = true;
            if ctx.config().strict_validity && !validate(&self.core, self.mode, ctx.crypto(), &m) {
                ctx.trace(
                    "abv-strict-drop",
                    vec![("sender", json!(m.sender.0)), ("kind", json!(m.kind()))],
                );
                self.processed += 1;
                continue;
            }
            let blocked = match m.decode() {
                Ok(AbvPayload::Order(o)) => self.commit(ctx, o),
                Ok(AbvPayload::NewConfig { config, leader }) => {
                    self.adopt_config(ctx, config, leader);
                    false
                }
                Ok(AbvPayload::MasterOrder(_)) | Err(_) => {
                    ctx.note("undecodable or foreign broadcast ignored");
                    false
                }
            };
            if !blocked {
                self.processed += 1;
            }
        }
        any
    }

    /// Commits a delivered order. Returns true if the commit waits on a state
    /// transfer.
    fn commit(&mut self, ctx: &mut Ctx<'_>, o: OrderMessage) -> bool {
        if o.config != self.core.config {
            ctx.trace(
                "order-stale",
                vec![("op", json!(o.op.id.to_string())), ("config", json!(o.config))],
            );
            return false;
        }
        if self.core.committed.contains(&o.op.id) {
            ctx.note("second order for a committed operation dropped");
            return false;
        }
        if self.round.as_ref().is_some_and(|r| r.op.id == o.op.id) {
            self.round = None;
        }
        let spec = self.spec.take();
        match o.decision {
            Decision::Abort => {
                if let Some(sp) = spec {
                    self.undo(&sp);
                }
                self.quarantine.push(o.op.id);
                ctx.trace("quarantine", vec![("op", json!(o.op.id.to_string()))]);
                self.record(ctx, &o, None);
            }
            Decision::Confirm => {
                let h = o.justification[0].digest;
                match &o.output {
                    OrderOutput::Full { t, r } => {
                        if let Some(sp) = spec {
                            self.undo(&sp);
                        }
                        let (t, r) = (t.clone(), r.clone());
                        self.finish_confirm(ctx, &o, t, r);
                    }
                    OrderOutput::Hashed { .. } => {
                        if let Some(sp) = spec {
                            if sp.op.id == o.op.id && sp.digest == h {
                                self.journal.forget(sp.op.id);
                                self.finish_confirm(ctx, &o, sp.t, sp.r);
                                self.try_dispatch(ctx);
                                return false;
                            }
                            self.undo(&sp);
                        }
                        if let Some(c) = self.cached(o.op.id, h).cloned() {
                            self.finish_confirm(ctx, &o, c.t, c.r);
                        } else {
                            self.start_transfer(ctx, o, h);
                            return true;
                        }
                    }
                    OrderOutput::None => unreachable!("decoder rejects confirm without output"),
                }
            }
        }
        self.try_dispatch(ctx);
        false
    }

    /// Discards a speculation; in hash mode rolls the state back.
    fn undo(&mut self, sp: &Speculation) {
        if self.mode == Mode::Hash {
            self.s = self
                .journal
                .rollback(&sp.t, &sp.r, &sp.op)
                .expect("every hash-mode speculation is journaled");
        }
    }

    fn start_transfer(&mut self, ctx: &mut Ctx<'_>, order: OrderMessage, digest: Digest) {
        let approvers: Vec<ProcessId> = order
            .justification
            .iter()
            .map(|a| a.signer())
            .filter(|p| *p != self.core.me)
            .collect();
        ctx.trace(
            "transfer-start",
            vec![
                ("op", json!(order.op.id.to_string())),
                ("from", json!(approvers.iter().map(|p| p.0).collect::<Vec<_>>())),
            ],
        );
        let req = PeerMessage::StateRequest {
            op: order.op.id,
            digest,
        }
        .encode();
        for p in approvers {
            ctx.send(p, req.clone());
        }
        self.transfer = Some(Transfer { order, digest });
    }

    fn finish_confirm(&mut self, ctx: &mut Ctx<'_>, o: &OrderMessage, t: AppState, r: Response) {
        self.s = t;
        self.responses.push((o.op.id, r.clone()));
        ctx.trace(
            "output",
            vec![
                ("op", json!(o.op.id.to_string())),
                ("response", json!(String::from_utf8_lossy(r.as_bytes()))),
            ],
        );
        self.record(ctx, o, Some(&r));
    }

    fn record(&mut self, ctx: &mut Ctx<'_>, o: &OrderMessage, r: Option<&Response>) {
        self.seq += 1;
        self.committed_fp = fingerprint(&self.s.encode());
        self.core.record_commit(
            ctx,
            CommitRecord {
                op: o.op.id,
                config: o.config,
                decision: o.decision,
                state: self.committed_fp.clone(),
                response: r.map(|r| fingerprint(r.as_bytes())),
            },
        );
    }

    fn adopt_config(&mut self, ctx: &mut Ctx<'_>, config: u64, leader: ProcessId) {
        if let Some(sp) = self.spec.take() {
            self.undo(&sp);
            ctx.trace("speculation-discarded", vec![("op", json!(sp.op.id.to_string()))]);
        }
        self.round = None;
        self.buffers.clear();
        self.rr_next = 0;
        let ready = self.core.adopt(ctx, config, leader);
        for (from, op) in ready {
            self.on_invoke(ctx, from, config, op);
        }
    }
}

impl Node for SieveReplica {
    fn start(&mut self, ctx: &mut Ctx<'_>) {
        self.core.start(ctx);
    }

    fn invoke(&mut self, ctx: &mut Ctx<'_>, command: Vec<u8>) {
        let op = self.core.fresh_op(command);
        self.core.submit(ctx, op);
    }

    fn receive(&mut self, ctx: &mut Ctx<'_>, from: ProcessId, bytes: &[u8]) {
        match bytes.first() {
            Some(&crate::epoch::KIND_COMPLAINT) | Some(&crate::epoch::KIND_CERTIFICATE) => {
                self.core.on_epoch_message(ctx, bytes);
            }
            _ => match PeerMessage::decode(bytes) {
                Ok(msg) => self.on_peer(ctx, from, msg),
                Err(_) => ctx.note("undecodable message dropped"),
            },
        }
    }

    fn timer(&mut self, ctx: &mut Ctx<'_>, id: u64) {
        if id == AGE_TIMER {
            self.core.age_check(ctx);
        }
    }

    fn abv_deliver(&mut self, ctx: &mut Ctx<'_>, msg: AbvMessage) {
        self.inbox.push_back(msg);
        self.resume(ctx);
    }

    fn validate(&mut self, ctx: &mut Ctx<'_>, msg: &AbvMessage) -> bool {
        validate(&self.core, self.mode, ctx.crypto(), msg)
    }

    fn abv_processed(&self) -> usize {
        self.processed
    }

    fn is_settled(&self) -> bool {
        self.core.settled() && self.transfer.is_none() && self.inbox.is_empty()
    }

    fn state_fingerprint(&self) -> Option<String> {
        Some(self.committed_fp.clone())
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}
