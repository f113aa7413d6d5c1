//! Byzantine epoch change with complaint certificates, and the leader-detector
//! view derived from it.
//!
//! A process starts epoch `e + 1` once it holds `f + 1` valid complaints from
//! distinct processes about `(e, leader(e))`, and relays those complaints as a
//! certificate so every correct process follows. Any `f + 1` complaints include
//! one from a correct process. A certificate for an epoch ahead of the local one
//! jumps directly past it. The leader of epoch `e` is `e mod n`.

use std::collections::{BTreeMap, BTreeSet};

use serde_json::json;

use crate::app::{Membership, ProcessId};
use crate::crypto::{complain_payload, CryptoBackend, Signature};
use crate::simnet::Ctx;
use crate::wire::{Reader, WireError, WireResult, Writer};

pub const KIND_COMPLAINT: u8 = 0x10;
pub const KIND_CERTIFICATE: u8 = 0x11;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EpochConfig {
    pub epoch: u64,
    pub leader: ProcessId,
}

impl EpochConfig {
    pub fn for_epoch(membership: &Membership, epoch: u64) -> Self {
        Self {
            epoch,
            leader: membership.leader_of(epoch),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Complaint {
    pub epoch: u64,
    pub accused: ProcessId,
    pub complainer: ProcessId,
    pub sig: Signature,
}

impl Complaint {
    /// `0x10 ‖ epoch ‖ accused ‖ complainer ‖ len-prefixed signature`
    pub fn encode_into(&self, w: &mut Writer) {
        w.u8(KIND_COMPLAINT)
            .u64(self.epoch)
            .u16(self.accused.0)
            .u16(self.complainer.0)
            .bytes(&self.sig.value);
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.encode_into(&mut w);
        w.into_bytes()
    }

    pub fn decode_from(r: &mut Reader<'_>) -> WireResult<Self> {
        match r.u8()? {
            KIND_COMPLAINT => {}
            other => return Err(WireError::UnknownTag(other)),
        }
        let epoch = r.u64()?;
        let accused = ProcessId(r.u16()?);
        let complainer = ProcessId(r.u16()?);
        let value = r.bytes()?.to_vec();
        Ok(Self {
            epoch,
            accused,
            complainer,
            sig: Signature {
                signer: complainer,
                value,
            },
        })
    }

    pub fn is_valid(&self, membership: &Membership, crypto: &dyn CryptoBackend) -> bool {
        membership.contains(self.complainer)
            && self.accused == membership.leader_of(self.epoch)
            && self.sig.signer == self.complainer
            && crypto.verify(self.complainer, &self.sig, &complain_payload(self.epoch, self.accused))
    }
}

/// `0x11 ‖ count ‖ complaints`
pub fn encode_certificate(complaints: &[Complaint]) -> Vec<u8> {
    let mut w = Writer::with_tag(KIND_CERTIFICATE);
    w.u8(complaints.len() as u8);
    for c in complaints {
        c.encode_into(&mut w);
    }
    w.into_bytes()
}

pub fn decode_certificate(bytes: &[u8]) -> WireResult<Vec<Complaint>> {
    let mut r = Reader::new(bytes);
    match r.u8()? {
        KIND_CERTIFICATE => {}
        other => return Err(WireError::UnknownTag(other)),
    }
    let count = r.u8()?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        out.push(Complaint::decode_from(&mut r)?);
    }
    r.finish()?;
    Ok(out)
}

/// Per-process epoch-change state.
#[derive(Debug, Clone)]
pub struct EpochChange {
    membership: Membership,
    me: ProcessId,
    current: EpochConfig,
    complained: BTreeSet<u64>,
    collected: BTreeMap<u64, BTreeMap<ProcessId, Complaint>>,
    started: Vec<EpochConfig>,
}

impl EpochChange {
    /// Epoch 0 with leader `p0` is started implicitly.
    pub fn new(membership: Membership, me: ProcessId) -> Self {
        let initial = EpochConfig::for_epoch(&membership, 0);
        Self {
            membership,
            me,
            current: initial,
            complained: BTreeSet::new(),
            collected: BTreeMap::new(),
            started: vec![initial],
        }
    }

    pub fn current(&self) -> EpochConfig {
        self.current
    }

    /// Leader-detector output: the leader of the last started epoch.
    pub fn trusted(&self) -> ProcessId {
        self.current.leader
    }

    /// Every epoch started so far, in order, beginning with epoch 0.
    pub fn started(&self) -> &[EpochConfig] {
        &self.started
    }

    /// Files a signed complaint about `(epoch, accused)` with every process.
    /// Only the current epoch can be complained about; repeats are no-ops.
    pub fn complain(&mut self, ctx: &mut Ctx<'_>, epoch: u64, accused: ProcessId) {
        if epoch != self.current.epoch || accused != self.current.leader {
            ctx.trace(
                "complaint-ignored",
                vec![("epoch", json!(epoch)), ("accused", json!(accused.0))],
            );
            return;
        }
        if !self.complained.insert(epoch) {
            return;
        }
        let sig = ctx.sign(&complain_payload(epoch, accused));
        let c = Complaint {
            epoch,
            accused,
            complainer: self.me,
            sig,
        };
        ctx.trace("complain", vec![("epoch", json!(epoch)), ("accused", json!(accused.0))]);
        ctx.send_all(c.encode());
    }

    /// Leader-detector complaint: forwarded with the caller's current epoch.
    pub fn complain_about_trusted(&mut self, ctx: &mut Ctx<'_>, p: ProcessId) {
        let epoch = self.current.epoch;
        self.complain(ctx, epoch, p);
    }

    /// Handles a complaint or certificate; returns the epoch started, if any.
    pub fn handle(&mut self, ctx: &mut Ctx<'_>, bytes: &[u8]) -> Option<EpochConfig> {
        match bytes.first() {
            Some(&KIND_COMPLAINT) => {
                let mut r = Reader::new(bytes);
                let c = Complaint::decode_from(&mut r).ok()?;
                r.finish().ok()?;
                if !c.is_valid(&self.membership, ctx.crypto_ref()) {
                    ctx.note("invalid complaint dropped");
                    return None;
                }
                if c.epoch < self.current.epoch {
                    return None;
                }
                let epoch = c.epoch;
                let set = self.collected.entry(epoch).or_default();
                set.entry(c.complainer).or_insert(c);
                if set.len() > self.membership.f() {
                    let cert: Vec<Complaint> = set.values().take(self.membership.f() + 1).cloned().collect();
                    return self.advance(ctx, epoch, cert, "complaints");
                }
                None
            }
            Some(&KIND_CERTIFICATE) => {
                let cert = decode_certificate(bytes).ok()?;
                let epoch = cert.first()?.epoch;
                if epoch < self.current.epoch {
                    return None;
                }
                let distinct: BTreeSet<_> = cert.iter().map(|c| c.complainer).collect();
                let valid = distinct.len() == cert.len()
                    && cert.len() > self.membership.f()
                    && cert
                        .iter()
                        .all(|c| c.epoch == epoch && c.is_valid(&self.membership, ctx.crypto_ref()));
                if !valid {
                    ctx.note("invalid complaint certificate dropped");
                    return None;
                }
                self.advance(ctx, epoch, cert, "certificate")
            }
            _ => None,
        }
    }

    fn advance(
        &mut self,
        ctx: &mut Ctx<'_>,
        complained_epoch: u64,
        cert: Vec<Complaint>,
        via: &str,
    ) -> Option<EpochConfig> {
        let next = complained_epoch + 1;
        if next <= self.current.epoch {
            return None;
        }
        self.current = EpochConfig::for_epoch(&self.membership, next);
        self.started.push(self.current);
        self.collected = self.collected.split_off(&next);
        let complainers: Vec<u16> = cert.iter().map(|c| c.complainer.0).collect();
        ctx.trace(
            "start-epoch",
            vec![
                ("epoch", json!(next)),
                ("leader", json!(self.current.leader.0)),
                ("via", json!(via)),
                ("complainers", json!(complainers)),
            ],
        );
        let bytes = encode_certificate(&cert);
        for p in self.membership.processes().filter(|p| *p != self.me) {
            ctx.send(p, bytes.clone());
        }
        Some(self.current)
    }
}
