//! Evidence-based master-slave replication.
//!
//! The master of the current epoch executes each operation, records every
//! non-deterministic choice as evidence and broadcasts the output together with
//! that evidence. The broadcast only delivers an order that replays correctly
//! against the validator's state, so slaves adopt the output (or recompute it
//! from the evidence in hash mode). Masters are replaced through the same
//! complaint and new-configuration path as Sieve leaders.
//!
//! Verifiable randomness comes from the master's VRF, evaluated on a tag made
//! of the instance id, the epoch and the commit sequence number. A master that
//! leaks its key or withholds unfavourable outputs can still bias results.

use std::any::Any;
use std::collections::{HashSet, VecDeque};
use std::sync::Arc;

use serde_json::json;
use thiserror::Error;

use crate::abv::{AbvMessage, AbvPayload, KIND_MASTER_ORDER};
use crate::app::{
    AppState, Application, Choice, ChoiceVerifier, Evidence, Membership, OpId, Operation, ProcessId, Response,
};
use crate::crypto::{
    fingerprint, response_digest, state_digest, vrf_tag, CryptoBackend, Digest, VrfPublicKey, VrfTriple,
};
use crate::epoch::{EpochConfig, KIND_CERTIFICATE, KIND_COMPLAINT};
use crate::rsm::{decode_invoke, CommitRecord, Decision, Mode, ReplicaCore, AGE_TIMER, KIND_INVOKE};
use crate::simnet::{Ctx, Node};
use crate::wire::{Reader, WireError, WireResult, Writer};

const OUTPUT_FULL: u8 = 0x01;
const OUTPUT_HASHED: u8 = 0x02;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MasterOutput {
    Full { s2: AppState, r: Response },
    Hashed { hs: Digest, hr: Digest },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MasterOrderMessage {
    pub epoch: u64,
    pub op: Operation,
    pub output: MasterOutput,
    pub rho: Evidence,
}

impl MasterOrderMessage {
    /// `0x04 ‖ epoch ‖ op ‖ mode ‖ len-prefixed state ‖ len-prefixed response ‖ len-prefixed evidence`
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::with_tag(KIND_MASTER_ORDER);
        w.u64(self.epoch);
        self.op.encode_into(&mut w);
        match &self.output {
            MasterOutput::Full { s2, r } => {
                w.u8(OUTPUT_FULL).bytes(&s2.encode()).bytes(r.as_bytes());
            }
            MasterOutput::Hashed { hs, hr } => {
                w.u8(OUTPUT_HASHED).bytes(hs.as_bytes()).bytes(hr.as_bytes());
            }
        }
        w.bytes(&self.rho.encode());
        w.into_bytes()
    }

    pub fn decode(bytes: &[u8]) -> WireResult<Self> {
        let mut r = Reader::new(bytes);
        match r.u8()? {
            KIND_MASTER_ORDER => {}
            other => return Err(WireError::UnknownTag(other)),
        }
        let epoch = r.u64()?;
        let op = Operation::decode_from(&mut r)?;
        let mode = r.u8()?;
        let first = r.bytes()?;
        let second = r.bytes()?;
        let output = match mode {
            OUTPUT_FULL => MasterOutput::Full {
                s2: AppState::decode(first)?,
                r: Response(second.to_vec()),
            },
            OUTPUT_HASHED => MasterOutput::Hashed {
                hs: digest(first)?,
                hr: digest(second)?,
            },
            other => return Err(WireError::UnknownTag(other)),
        };
        let rho = Evidence::decode(r.bytes()?)?;
        r.finish()?;
        Ok(Self { epoch, op, output, rho })
    }
}

fn digest(b: &[u8]) -> WireResult<Digest> {
    Ok(Digest(
        b.try_into()
            .map_err(|_| WireError::Invalid("digest must be 32 bytes"))?,
    ))
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MastercryptError {
    #[error("VRF tag {0} used twice")]
    TagReuse(String),
}

/// Tag bookkeeping for master randomness.
#[derive(Debug, Clone)]
pub struct MastercryptContext {
    pub instance_id: Vec<u8>,
    pub epoch: u64,
    pub seq: u64,
    used: HashSet<Vec<u8>>,
}

impl MastercryptContext {
    pub fn new(instance_id: &[u8]) -> Self {
        Self {
            instance_id: instance_id.to_vec(),
            epoch: 0,
            seq: 0,
            used: HashSet::new(),
        }
    }

    pub fn tag(&self) -> Vec<u8> {
        vrf_tag(&self.instance_id, self.epoch, self.seq)
    }

    /// Marks `tag` as consumed by a committed operation.
    pub fn consume(&mut self, tag: &[u8]) -> Result<(), MastercryptError> {
        if !self.used.insert(tag.to_vec()) {
            return Err(MastercryptError::TagReuse(hex::encode(tag)));
        }
        Ok(())
    }
}

/// Accepts a VRF record only for the expected tag and only if it verifies under
/// the master's key.
pub struct MasterVrfCheck<'a> {
    pub crypto: &'a dyn CryptoBackend,
    pub vk: Option<VrfPublicKey>,
    pub tag: Vec<u8>,
}

impl ChoiceVerifier for MasterVrfCheck<'_> {
    fn accept_vrf(&self, v: &VrfTriple) -> bool {
        v.tag == self.tag
            && self
                .vk
                .is_some_and(|vk| self.crypto.vrf_verify(&vk, &v.tag, &v.output, &v.proof))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MasterBehaviour {
    #[default]
    Honest,
    /// Appends a fabricated choice to every evidence record.
    BadEvidence,
    /// Withholds verifiable-randomness orders whose output starts with an odd
    /// byte, so only even first bytes ever commit while it is master.
    Biasing,
}

pub struct MasterSlaveReplica {
    core: ReplicaCore,
    mode: Mode,
    behaviour: MasterBehaviour,
    app: Arc<dyn Application>,
    s: AppState,
    committed_fp: String,
    mastercrypt: MastercryptContext,
    queue: VecDeque<Operation>,
    in_flight: Option<OpId>,
    processed: usize,
    responses: Vec<(OpId, Response)>,
    randomness: Vec<(OpId, VrfTriple)>,
}

impl MasterSlaveReplica {
    pub fn new(
        membership: Membership,
        me: ProcessId,
        mode: Mode,
        app: Arc<dyn Application>,
        instance_id: &str,
    ) -> Self {
        let s = AppState::new();
        Self {
            core: ReplicaCore::new(membership, me),
            mode,
            behaviour: MasterBehaviour::Honest,
            app,
            committed_fp: fingerprint(&s.encode()),
            s,
            mastercrypt: MastercryptContext::new(instance_id.as_bytes()),
            queue: VecDeque::new(),
            in_flight: None,
            processed: 0,
            responses: Vec::new(),
            randomness: Vec::new(),
        }
    }

    pub fn with_behaviour(mut self, behaviour: MasterBehaviour) -> Self {
        self.behaviour = behaviour;
        self
    }

    pub fn commits(&self) -> &[CommitRecord] {
        &self.core.commits
    }

    pub fn responses(&self) -> &[(OpId, Response)] {
        &self.responses
    }

    /// Verifiable randomness consumed by committed operations, in commit order.
    pub fn randomness(&self) -> &[(OpId, VrfTriple)] {
        &self.randomness
    }

    pub fn state(&self) -> &AppState {
        &self.s
    }

    pub fn epochs(&self) -> &[EpochConfig] {
        self.core.psi.started()
    }

    fn on_invoke(&mut self, ctx: &mut Ctx<'_>, from: ProcessId, config: u64, op: Operation) {
        let Some(op) = self.core.accept_invoke(ctx, from, config, op) else {
            return;
        };
        if self.in_flight == Some(op.id) || self.queue.iter().any(|o| o.id == op.id) {
            return;
        }
        self.queue.push_back(op);
        self.try_order(ctx);
    }

    /// Executes the next queued operation and broadcasts its order. One order
    /// is outstanding at a time so each execution starts from committed state.
    fn try_order(&mut self, ctx: &mut Ctx<'_>) {
        if self.core.leader != self.core.me || self.in_flight.is_some() {
            return;
        }
        let Some(op) = self.queue.pop_front() else {
            return;
        };
        let epoch = self.core.config;
        self.mastercrypt.epoch = epoch;
        let tag = self.mastercrypt.tag();
        let (s2, r, mut rho) = {
            let mut env = ctx.live_env(Some(tag));
            self.app.nondet_execute(&self.s, &op, &mut env)
        };
        match self.behaviour {
            MasterBehaviour::Honest => {}
            MasterBehaviour::BadEvidence => rho.choices.push(Choice::RandomBytes(vec![0x5a])),
            MasterBehaviour::Biasing => {
                let odd = rho
                    .choices
                    .iter()
                    .any(|c| matches!(c, Choice::Vrf(v) if v.output[0] % 2 == 1));
                if odd {
                    ctx.trace("withheld", vec![("op", json!(op.id.to_string()))]);
                    return;
                }
            }
        }
        let output = match self.mode {
            Mode::Full => MasterOutput::Full { s2, r },
            Mode::Hash => MasterOutput::Hashed {
                hs: state_digest(ctx.crypto(), &s2),
                hr: response_digest(ctx.crypto(), &r),
            },
        };
        ctx.trace(
            "master-order",
            vec![
                ("op", json!(op.id.to_string())),
                ("epoch", json!(epoch)),
                ("choices", json!(rho.choices.len())),
            ],
        );
        self.in_flight = Some(op.id);
        ctx.abv_broadcast(MasterOrderMessage { epoch, op, output, rho }.encode());
    }

    fn check(&self, ctx: &mut Ctx<'_>, sender: ProcessId, m: &MasterOrderMessage) -> bool {
        if m.epoch != self.core.config || sender != self.core.leader || self.core.committed.contains(&m.op.id) {
            return false;
        }
        let verifier = MasterVrfCheck {
            vk: ctx.vrf_key_of(sender),
            tag: vrf_tag(&self.mastercrypt.instance_id, m.epoch, self.mastercrypt.seq),
            crypto: ctx.crypto_ref(),
        };
        match &m.output {
            MasterOutput::Full { s2, r } => self.app.verify_execution(&self.s, &m.op, s2, r, &m.rho, &verifier),
            MasterOutput::Hashed { hs, hr } => {
                let Some((s2, r)) = self.app.replay(&self.s, &m.op, &m.rho, &verifier) else {
                    return false;
                };
                state_digest(ctx.crypto(), &s2) == *hs && response_digest(ctx.crypto(), &r) == *hr
            }
        }
    }

    fn commit(&mut self, ctx: &mut Ctx<'_>, m: MasterOrderMessage) {
        if m.epoch != self.core.config {
            ctx.trace(
                "order-stale",
                vec![("op", json!(m.op.id.to_string())), ("config", json!(m.epoch))],
            );
            return;
        }
        if self.core.committed.contains(&m.op.id) {
            ctx.note("second order for a committed operation dropped");
            return;
        }
        let (s2, r) = match m.output {
            MasterOutput::Full { s2, r } => (s2, r),
            MasterOutput::Hashed { hs, hr } => {
                let verifier = MasterVrfCheck {
                    vk: ctx.vrf_key_of(self.core.leader),
                    tag: vrf_tag(&self.mastercrypt.instance_id, m.epoch, self.mastercrypt.seq),
                    crypto: ctx.crypto_ref(),
                };
                let (s2, r) = self
                    .app
                    .replay(&self.s, &m.op, &m.rho, &verifier)
                    .expect("delivered master order must replay");
                assert!(
                    state_digest(ctx.crypto(), &s2) == hs && response_digest(ctx.crypto(), &r) == hr,
                    "replayed output differs from the delivered digests"
                );
                (s2, r)
            }
        };
        for c in &m.rho.choices {
            if let Choice::Vrf(v) = c {
                self.mastercrypt.consume(&v.tag).expect("VRF tags are never reused");
                ctx.trace(
                    "vrf",
                    vec![
                        ("op", json!(m.op.id.to_string())),
                        ("tag", json!(hex::encode(&v.tag))),
                        ("output", json!(hex::encode(v.output))),
                    ],
                );
                self.randomness.push((m.op.id, v.clone()));
            }
        }
        self.s = s2;
        self.mastercrypt.seq += 1;
        self.committed_fp = fingerprint(&self.s.encode());
        self.responses.push((m.op.id, r.clone()));
        ctx.trace(
            "output",
            vec![
                ("op", json!(m.op.id.to_string())),
                ("response", json!(String::from_utf8_lossy(r.as_bytes()))),
            ],
        );
        self.core.record_commit(
            ctx,
            CommitRecord {
                op: m.op.id,
                config: m.epoch,
                decision: Decision::Confirm,
                state: self.committed_fp.clone(),
                response: Some(fingerprint(r.as_bytes())),
            },
        );
        if self.in_flight == Some(m.op.id) {
            self.in_flight = None;
        }
        self.try_order(ctx);
    }

    fn adopt_config(&mut self, ctx: &mut Ctx<'_>, config: u64, leader: ProcessId) {
        self.queue.clear();
        self.in_flight = None;
        let ready = self.core.adopt(ctx, config, leader);
        for (from, op) in ready {
            self.on_invoke(ctx, from, config, op);
        }
    }
}

impl Node for MasterSlaveReplica {
    fn start(&mut self, ctx: &mut Ctx<'_>) {
        self.core.start(ctx);
    }

    fn invoke(&mut self, ctx: &mut Ctx<'_>, command: Vec<u8>) {
        let op = self.core.fresh_op(command);
        self.core.submit(ctx, op);
    }

    fn receive(&mut self, ctx: &mut Ctx<'_>, from: ProcessId, bytes: &[u8]) {
        match bytes.first() {
            Some(&KIND_COMPLAINT) | Some(&KIND_CERTIFICATE) => {
                self.core.on_epoch_message(ctx, bytes);
            }
            Some(&KIND_INVOKE) => match decode_invoke(bytes) {
                Ok((config, op)) => self.on_invoke(ctx, from, config, op),
                Err(_) => ctx.note("undecodable invoke dropped"),
            },
            _ => ctx.note("unexpected message dropped"),
        }
    }

    fn timer(&mut self, ctx: &mut Ctx<'_>, id: u64) {
        if id == AGE_TIMER {
            self.core.age_check(ctx);
        }
    }

    fn abv_deliver(&mut self, ctx: &mut Ctx<'_>, msg: AbvMessage) {
        self.processed += 1;
        if ctx.config().strict_validity && !self.validate(ctx, &msg) {
            ctx.trace(
                "abv-strict-drop",
                vec![("sender", json!(msg.sender.0)), ("kind", json!(msg.kind()))],
            );
            return;
        }
        match msg.decode() {
            Ok(AbvPayload::MasterOrder(m)) => self.commit(ctx, m),
            Ok(AbvPayload::NewConfig { config, leader }) => self.adopt_config(ctx, config, leader),
            Ok(AbvPayload::Order(_)) | Err(_) => ctx.note("undecodable or foreign broadcast ignored"),
        }
    }

    fn validate(&mut self, ctx: &mut Ctx<'_>, msg: &AbvMessage) -> bool {
        match msg.decode() {
            Ok(AbvPayload::MasterOrder(m)) => self.check(ctx, msg.sender, &m),
            Ok(AbvPayload::NewConfig { config, leader }) => self.core.new_config_valid(msg.sender, config, leader),
            _ => false,
        }
    }

    fn abv_processed(&self) -> usize {
        self.processed
    }

    fn is_settled(&self) -> bool {
        self.core.settled()
    }

    fn state_fingerprint(&self) -> Option<String> {
        Some(self.committed_fp.clone())
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::app::{Environment, KvCommand, NondetKvStore, RecordingEnv};
    use crate::crypto::{IdealOracle, RealCrypto};

    fn op(counter: u64, cmd: KvCommand) -> Operation {
        Operation::new(
            OpId {
                invoker: ProcessId(1),
                counter,
            },
            cmd.encode(),
        )
    }

    #[test]
    fn master_order_round_trip() {
        let m = MasterOrderMessage {
            epoch: 3,
            op: op(0, KvCommand::rand_put("k")),
            output: MasterOutput::Full {
                s2: [("k", "\u{7}")].into_iter().collect(),
                r: Response::ok(),
            },
            rho: Evidence {
                choices: vec![Choice::RandomBytes(vec![7])],
            },
        };
        let bytes = m.encode();
        assert_eq!(bytes[0], KIND_MASTER_ORDER);
        assert_eq!(&bytes[1..9], &3u64.to_be_bytes());
        assert_eq!(MasterOrderMessage::decode(&bytes).unwrap(), m);
        let h = MasterOrderMessage {
            output: MasterOutput::Hashed {
                hs: Digest::from_index(1),
                hr: Digest::from_index(2),
            },
            ..m
        };
        assert_eq!(MasterOrderMessage::decode(&h.encode()).unwrap(), h);
    }

    #[test]
    fn tag_reuse_is_refused() {
        let mut ctx = MastercryptContext::new(b"inst");
        let tag = ctx.tag();
        ctx.consume(&tag).unwrap();
        assert!(matches!(ctx.consume(&tag), Err(MastercryptError::TagReuse(_))));
        ctx.seq += 1;
        assert_ne!(ctx.tag(), tag);
    }

    struct VrfOnly<'a> {
        crypto: &'a mut dyn CryptoBackend,
        kp: crate::crypto::VrfKeyPair,
        tag: Vec<u8>,
    }

    impl Environment for VrfOnly<'_> {
        fn random_bytes(&mut self, _len: usize) -> Result<Vec<u8>, crate::app::ChoiceUnavailable> {
            Err(crate::app::ChoiceUnavailable)
        }
        fn clock(&mut self) -> Result<u64, crate::app::ChoiceUnavailable> {
            Err(crate::app::ChoiceUnavailable)
        }
        fn verifiable_random(&mut self) -> Result<VrfTriple, crate::app::ChoiceUnavailable> {
            self.crypto
                .vrf_eval(&self.kp, &self.tag)
                .map_err(|_| crate::app::ChoiceUnavailable)
        }
    }

    fn master_run(crypto: &mut dyn CryptoBackend) {
        let kp = crypto.vrf_keygen(ProcessId(0), b"seed").unwrap();
        let vk = kp.vk;
        let ctx = MastercryptContext::new(b"inst");
        let tag = ctx.tag();
        let o = op(0, KvCommand::crypto_rand_put("k"));
        let app = NondetKvStore;
        let (s2, r, rho) = {
            let mut live = VrfOnly {
                crypto: &mut *crypto,
                kp: kp.clone(),
                tag: tag.clone(),
            };
            let mut rec = RecordingEnv::new(&mut live);
            let (s2, r) = app.execute(&AppState::new(), &o, &mut rec);
            (s2, r, rec.into_evidence())
        };
        // Same tag again: identical bits.
        let again = crypto.vrf_eval(&kp, &tag).unwrap();
        assert!(matches!(&rho.choices[0], Choice::Vrf(v) if v.output == again.output));
        let check = MasterVrfCheck {
            crypto: &*crypto,
            vk: Some(vk),
            tag: tag.clone(),
        };
        assert!(app.verify_execution(&AppState::new(), &o, &s2, &r, &rho, &check));

        // Forged output bits are refused.
        let mut forged = rho.clone();
        if let Choice::Vrf(v) = &mut forged.choices[0] {
            v.output[0] ^= 1;
        }
        assert!(!app.verify_execution(&AppState::new(), &o, &s2, &r, &forged, &check));

        // A record for another tag is refused even if it verifies.
        let other = MasterVrfCheck {
            crypto: &*crypto,
            vk: Some(vk),
            tag: vrf_tag(b"inst", 0, 1),
        };
        assert!(!app.verify_execution(&AppState::new(), &o, &s2, &r, &rho, &other));
    }

    #[test]
    fn mastercrypt_verification_ideal() {
        master_run(&mut IdealOracle::new());
    }

    #[test]
    fn mastercrypt_verification_real() {
        master_run(&mut RealCrypto::new(4, 9));
    }

    #[test]
    fn omitted_draw_fails_verification() {
        let app = NondetKvStore;
        let o = op(0, KvCommand::rand_put("k"));
        let s2: AppState = [("k", vec![9u8])].into_iter().collect();
        let ok = Evidence {
            choices: vec![Choice::RandomBytes(vec![9])],
        };
        assert!(app.verify_execution(&AppState::new(), &o, &s2, &Response::ok(), &ok, &crate::app::RejectVrf));
        assert!(!app.verify_execution(
            &AppState::new(),
            &o,
            &s2,
            &Response::ok(),
            &Evidence::default(),
            &crate::app::RejectVrf
        ));
    }
}
