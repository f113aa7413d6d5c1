//! Byzantine atomic broadcast with external validity.
//!
//! The reference implementation is a trusted sequencer hosted by the simulator.
//! Broadcasts reach it over simulated links; it appends a message to the
//! totally ordered log only once the validator of a designated correct process,
//! evaluated against that process's fully processed delivered prefix, accepts
//! it. The log is then delivered to every process over simulated links.
//! Messages that stay invalid longer than the retention window are dropped.

use std::collections::VecDeque;

use crate::app::{OpId, ProcessId};
use crate::masterslave::MasterOrderMessage;
use crate::sieve::messages::OrderMessage;
use crate::simnet::{Ctx, Node};
use crate::wire::{Reader, WireError, WireResult, Writer};

pub const KIND_ORDER_CONFIRM: u8 = 0x01;
pub const KIND_ORDER_ABORT: u8 = 0x02;
pub const KIND_NEW_CONFIG: u8 = 0x03;
pub const KIND_MASTER_ORDER: u8 = 0x04;

/// A broadcast message as it travels through the sequencer. `sender` is set by
/// the authenticated link, never by the payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AbvMessage {
    pub sender: ProcessId,
    pub payload: Vec<u8>,
}

impl AbvMessage {
    pub fn kind(&self) -> Option<u8> {
        self.payload.first().copied()
    }

    pub fn decode(&self) -> WireResult<AbvPayload> {
        AbvPayload::decode(&self.payload)
    }
}

/// Every protocol message that rides the atomic broadcast.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AbvPayload {
    Order(OrderMessage),
    NewConfig { config: u64, leader: ProcessId },
    MasterOrder(MasterOrderMessage),
}

impl AbvPayload {
    pub fn encode(&self) -> Vec<u8> {
        match self {
            Self::Order(m) => m.encode(),
            Self::NewConfig { config, leader } => {
                let mut w = Writer::with_tag(KIND_NEW_CONFIG);
                w.u64(*config).u16(leader.0);
                w.into_bytes()
            }
            Self::MasterOrder(m) => m.encode(),
        }
    }

    pub fn decode(bytes: &[u8]) -> WireResult<Self> {
        match bytes.first() {
            Some(&KIND_ORDER_CONFIRM) | Some(&KIND_ORDER_ABORT) => Ok(Self::Order(OrderMessage::decode(bytes)?)),
            Some(&KIND_NEW_CONFIG) => {
                let mut r = Reader::new(&bytes[1..]);
                let config = r.u64()?;
                let leader = ProcessId(r.u16()?);
                r.finish()?;
                Ok(Self::NewConfig { config, leader })
            }
            Some(&KIND_MASTER_ORDER) => Ok(Self::MasterOrder(MasterOrderMessage::decode(bytes)?)),
            Some(&other) => Err(WireError::UnknownTag(other)),
            None => Err(WireError::Truncated { offset: 0, needed: 1 }),
        }
    }

    /// Operation ordered by this message, if any.
    pub fn op_id(&self) -> Option<OpId> {
        match self {
            Self::Order(m) => Some(m.op.id),
            Self::MasterOrder(m) => Some(m.op.id),
            Self::NewConfig { .. } => None,
        }
    }
}

pub fn kind_name(kind: u8) -> &'static str {
    match kind {
        KIND_ORDER_CONFIRM => "order-confirm",
        KIND_ORDER_ABORT => "order-abort",
        KIND_NEW_CONFIG => "new-config",
        KIND_MASTER_ORDER => "master-order",
        _ => "unknown",
    }
}

#[derive(Debug, Clone)]
struct Pending {
    arrived: u64,
    msg: AbvMessage,
}

/// Outcome of one sequencer step.
#[derive(Debug, Default)]
pub struct SequencerStep {
    pub appended: Option<usize>,
    pub expired: Vec<AbvMessage>,
}

/// Logically centralized orderer. It owns the delivered log.
#[derive(Debug)]
pub struct Sequencer {
    designated: ProcessId,
    retention: u64,
    pending: VecDeque<Pending>,
    log: Vec<AbvMessage>,
}

impl Sequencer {
    pub fn new(designated: ProcessId, retention: u64) -> Self {
        Self {
            designated,
            retention,
            pending: VecDeque::new(),
            log: Vec::new(),
        }
    }

    pub fn designated(&self) -> ProcessId {
        self.designated
    }

    pub fn submit(&mut self, now: u64, msg: AbvMessage) {
        self.pending.push_back(Pending { arrived: now, msg });
    }

    pub fn log(&self) -> &[AbvMessage] {
        &self.log
    }

    pub fn has_pending(&self) -> bool {
        !self.pending.is_empty()
    }

    /// Appends the oldest pending message accepted by `validate`, dropping
    /// messages that have been invalid for longer than the retention window.
    pub fn step(&mut self, now: u64, mut validate: impl FnMut(&AbvMessage) -> bool) -> SequencerStep {
        let mut step = SequencerStep::default();
        let mut i = 0;
        while i < self.pending.len() {
            if validate(&self.pending[i].msg) {
                let p = self.pending.remove(i).unwrap();
                self.log.push(p.msg);
                step.appended = Some(self.log.len() - 1);
                break;
            }
            if now.saturating_sub(self.pending[i].arrived) > self.retention {
                step.expired.push(self.pending.remove(i).unwrap().msg);
            } else {
                i += 1;
            }
        }
        step
    }
}

pub type ValidatorFn = Box<dyn FnMut(&AbvMessage) -> bool + Send>;

/// Minimal abv client: broadcasts each invoked payload and records deliveries.
/// Used to exercise the broadcast properties independently of Sieve.
pub struct BroadcastNode {
    validator: ValidatorFn,
    delivered: Vec<AbvMessage>,
}

impl BroadcastNode {
    pub fn new() -> Self {
        Self {
            validator: Box::new(|_| true),
            delivered: Vec::new(),
        }
    }

    pub fn set_validator(&mut self, v: ValidatorFn) {
        self.validator = v;
    }

    pub fn delivered(&self) -> &[AbvMessage] {
        &self.delivered
    }
}

impl Default for BroadcastNode {
    fn default() -> Self {
        Self::new()
    }
}

impl Node for BroadcastNode {
    fn invoke(&mut self, ctx: &mut Ctx<'_>, command: Vec<u8>) {
        ctx.abv_broadcast(command);
    }

    fn abv_deliver(&mut self, ctx: &mut Ctx<'_>, msg: AbvMessage) {
        ctx.trace(
            "abv-deliver",
            vec![
                ("sender", msg.sender.0.into()),
                ("payload", hex::encode(&msg.payload).into()),
            ],
        );
        self.delivered.push(msg);
    }

    fn validate(&mut self, _ctx: &mut Ctx<'_>, msg: &AbvMessage) -> bool {
        (self.validator)(msg)
    }

    fn abv_processed(&self) -> usize {
        self.delivered.len()
    }

    fn as_any(&self) -> &dyn std::any::Any {
        self
    }
}
