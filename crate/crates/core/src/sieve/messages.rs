//! Sieve wire messages: point-to-point (invoke, execute, approve, state
//! transfer) and the order message carried by the atomic broadcast.

use crate::abv::{KIND_ORDER_ABORT, KIND_ORDER_CONFIRM};
use crate::app::{AppState, OpId, Operation, Response};
use crate::crypto::{speculate_payload, CryptoBackend, Digest, Signature};
use crate::rsm::{decode_invoke, encode_invoke, Decision, KIND_INVOKE};
use crate::wire::{Reader, WireError, WireResult, Writer};

pub const KIND_EXECUTE: u8 = 0x21;
pub const KIND_APPROVE: u8 = 0x22;
pub const KIND_STATE_REQUEST: u8 = 0x23;
pub const KIND_STATE_RESPONSE: u8 = 0x24;

const OUTPUT_NONE: u8 = 0x00;
const OUTPUT_FULL: u8 = 0x01;
const OUTPUT_HASHED: u8 = 0x02;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApproveMessage {
    pub config: u64,
    pub op: OpId,
    pub digest: Digest,
    pub sig: Signature,
}

impl ApproveMessage {
    /// `config ‖ op-id ‖ digest ‖ sig` (no kind byte).
    pub fn encode_into(&self, w: &mut Writer) {
        w.u64(self.config);
        self.op.encode_into(w);
        w.raw(self.digest.as_bytes());
        self.sig.encode_into(w);
    }

    pub fn decode_from(r: &mut Reader<'_>) -> WireResult<Self> {
        Ok(Self {
            config: r.u64()?,
            op: OpId::decode_from(r)?,
            digest: Digest::decode_from(r)?,
            sig: Signature::decode_from(r)?,
        })
    }

    pub fn signer(&self) -> crate::app::ProcessId {
        self.sig.signer
    }

    pub fn verify(&self, crypto: &dyn CryptoBackend) -> bool {
        crypto.verify(
            self.sig.signer,
            &self.sig,
            &speculate_payload(self.config, &self.digest),
        )
    }
}

/// Output carried by an order: nothing for aborts, the full `(t, r)` in full
/// mode, their digests in hash mode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OrderOutput {
    None,
    Full { t: AppState, r: Response },
    Hashed { ht: Digest, hr: Digest },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OrderMessage {
    pub decision: Decision,
    pub config: u64,
    pub op: Operation,
    pub output: OrderOutput,
    pub justification: Vec<ApproveMessage>,
}

impl OrderMessage {
    /// `kind ‖ config ‖ op ‖ mode ‖ len-prefixed t ‖ len-prefixed r ‖ count ‖ approvals`
    pub fn encode(&self) -> Vec<u8> {
        let kind = match self.decision {
            Decision::Confirm => KIND_ORDER_CONFIRM,
            Decision::Abort => KIND_ORDER_ABORT,
        };
        let mut w = Writer::with_tag(kind);
        w.u64(self.config);
        self.op.encode_into(&mut w);
        match &self.output {
            OrderOutput::None => {
                w.u8(OUTPUT_NONE).bytes(&[]).bytes(&[]);
            }
            OrderOutput::Full { t, r } => {
                w.u8(OUTPUT_FULL).bytes(&t.encode()).bytes(r.as_bytes());
            }
            OrderOutput::Hashed { ht, hr } => {
                w.u8(OUTPUT_HASHED).bytes(ht.as_bytes()).bytes(hr.as_bytes());
            }
        }
        w.u8(self.justification.len() as u8);
        for a in &self.justification {
            a.encode_into(&mut w);
        }
        w.into_bytes()
    }

    pub fn decode(bytes: &[u8]) -> WireResult<Self> {
        let mut r = Reader::new(bytes);
        let decision = match r.u8()? {
            KIND_ORDER_CONFIRM => Decision::Confirm,
            KIND_ORDER_ABORT => Decision::Abort,
            other => return Err(WireError::UnknownTag(other)),
        };
        let config = r.u64()?;
        let op = Operation::decode_from(&mut r)?;
        let mode = r.u8()?;
        let first = r.bytes()?;
        let second = r.bytes()?;
        let output = match (decision, mode) {
            (Decision::Abort, OUTPUT_NONE) if first.is_empty() && second.is_empty() => OrderOutput::None,
            (Decision::Confirm, OUTPUT_FULL) => OrderOutput::Full {
                t: AppState::decode(first)?,
                r: Response(second.to_vec()),
            },
            (Decision::Confirm, OUTPUT_HASHED) => OrderOutput::Hashed {
                ht: digest_field(first)?,
                hr: digest_field(second)?,
            },
            _ => return Err(WireError::Invalid("order output does not fit its decision")),
        };
        let count = r.u8()?;
        let mut justification = Vec::with_capacity(count as usize);
        for _ in 0..count {
            justification.push(ApproveMessage::decode_from(&mut r)?);
        }
        r.finish()?;
        Ok(Self {
            decision,
            config,
            op,
            output,
            justification,
        })
    }
}

fn digest_field(b: &[u8]) -> WireResult<Digest> {
    let arr: [u8; 32] = b
        .try_into()
        .map_err(|_| WireError::Invalid("digest must be 32 bytes"))?;
    Ok(Digest(arr))
}

/// Point-to-point Sieve messages.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PeerMessage {
    Invoke {
        config: u64,
        op: Operation,
    },
    Execute {
        config: u64,
        op: Operation,
    },
    Approve(ApproveMessage),
    StateRequest {
        op: OpId,
        digest: Digest,
    },
    StateResponse {
        op: OpId,
        digest: Digest,
        t: AppState,
        r: Response,
    },
}

impl PeerMessage {
    pub fn encode(&self) -> Vec<u8> {
        match self {
            Self::Invoke { config, op } => encode_invoke(*config, op),
            Self::Execute { config, op } => {
                let mut w = Writer::with_tag(KIND_EXECUTE);
                w.u64(*config);
                op.encode_into(&mut w);
                w.into_bytes()
            }
            Self::Approve(a) => {
                let mut w = Writer::with_tag(KIND_APPROVE);
                a.encode_into(&mut w);
                w.into_bytes()
            }
            Self::StateRequest { op, digest } => {
                let mut w = Writer::with_tag(KIND_STATE_REQUEST);
                op.encode_into(&mut w);
                w.raw(digest.as_bytes());
                w.into_bytes()
            }
            Self::StateResponse { op, digest, t, r } => {
                let mut w = Writer::with_tag(KIND_STATE_RESPONSE);
                op.encode_into(&mut w);
                w.raw(digest.as_bytes()).bytes(&t.encode()).bytes(r.as_bytes());
                w.into_bytes()
            }
        }
    }

    pub fn decode(bytes: &[u8]) -> WireResult<Self> {
        let Some(&kind) = bytes.first() else {
            return Err(WireError::Truncated { offset: 0, needed: 1 });
        };
        if kind == KIND_INVOKE {
            let (config, op) = decode_invoke(bytes)?;
            return Ok(Self::Invoke { config, op });
        }
        let mut r = Reader::new(&bytes[1..]);
        let msg = match kind {
            KIND_EXECUTE => Self::Execute {
                config: r.u64()?,
                op: Operation::decode_from(&mut r)?,
            },
            KIND_APPROVE => Self::Approve(ApproveMessage::decode_from(&mut r)?),
            KIND_STATE_REQUEST => Self::StateRequest {
                op: OpId::decode_from(&mut r)?,
                digest: Digest::decode_from(&mut r)?,
            },
            KIND_STATE_RESPONSE => Self::StateResponse {
                op: OpId::decode_from(&mut r)?,
                digest: Digest::decode_from(&mut r)?,
                t: AppState::decode(r.bytes()?)?,
                r: Response(r.bytes()?.to_vec()),
            },
            other => return Err(WireError::UnknownTag(other)),
        };
        r.finish()?;
        Ok(msg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::app::ProcessId;
    use crate::crypto::IdealOracle;

    fn op() -> Operation {
        Operation::new(
            OpId {
                invoker: ProcessId(1),
                counter: 4,
            },
            vec![1, 2, 3],
        )
    }

    fn approve(o: &mut IdealOracle, p: u16, d: u64) -> ApproveMessage {
        let digest = Digest::from_index(d);
        ApproveMessage {
            config: 2,
            op: op().id,
            digest,
            sig: o.sign(ProcessId(p), &speculate_payload(2, &digest)),
        }
    }

    #[test]
    fn approve_layout_is_bit_exact() {
        let mut o = IdealOracle::new();
        let a = approve(&mut o, 3, 7);
        let bytes = PeerMessage::Approve(a.clone()).encode();
        assert_eq!(bytes[0], KIND_APPROVE);
        assert_eq!(&bytes[1..9], &2u64.to_be_bytes());
        // op id: invoker u16 then counter u64
        assert_eq!(&bytes[9..11], &[0, 1]);
        assert_eq!(&bytes[11..19], &4u64.to_be_bytes());
        assert_eq!(&bytes[19..51], Digest::from_index(7).as_bytes());
        assert_eq!(PeerMessage::decode(&bytes).unwrap(), PeerMessage::Approve(a.clone()));
        assert!(a.verify(&o));
    }

    #[test]
    fn peer_messages_round_trip() {
        let msgs = [
            PeerMessage::Invoke { config: 1, op: op() },
            PeerMessage::Execute { config: 1, op: op() },
            PeerMessage::StateRequest {
                op: op().id,
                digest: Digest::from_index(3),
            },
            PeerMessage::StateResponse {
                op: op().id,
                digest: Digest::from_index(3),
                t: [("k", "v")].into_iter().collect(),
                r: Response::ok(),
            },
        ];
        for m in msgs {
            let bytes = m.encode();
            assert_eq!(PeerMessage::decode(&bytes).unwrap(), m);
            assert!(PeerMessage::decode(&bytes[..bytes.len() - 1]).is_err());
        }
    }

    #[test]
    fn order_round_trips_in_every_shape() {
        let mut o = IdealOracle::new();
        let just = vec![approve(&mut o, 0, 1), approve(&mut o, 1, 1)];
        let shapes = [
            (Decision::Abort, OrderOutput::None),
            (
                Decision::Confirm,
                OrderOutput::Full {
                    t: [("x", "5")].into_iter().collect(),
                    r: Response::ok(),
                },
            ),
            (
                Decision::Confirm,
                OrderOutput::Hashed {
                    ht: Digest::from_index(1),
                    hr: Digest::from_index(2),
                },
            ),
        ];
        for (decision, output) in shapes {
            let m = OrderMessage {
                decision,
                config: 2,
                op: op(),
                output,
                justification: just.clone(),
            };
            let bytes = m.encode();
            assert_eq!(OrderMessage::decode(&bytes).unwrap(), m);
        }
    }

    #[test]
    fn order_output_must_fit_decision() {
        let m = OrderMessage {
            decision: Decision::Abort,
            config: 0,
            op: op(),
            output: OrderOutput::None,
            justification: vec![],
        };
        let mut bytes = m.encode();
        bytes[0] = KIND_ORDER_CONFIRM;
        assert!(OrderMessage::decode(&bytes).is_err());
    }
}
