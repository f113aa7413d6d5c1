//! Validity predicate plugged into the atomic broadcast.

use std::collections::BTreeSet;

use crate::abv::{AbvMessage, AbvPayload};
use crate::crypto::{output_digest, response_digest, state_digest, CryptoBackend};
use crate::rsm::{Decision, Mode, ReplicaCore};

use super::decide::supported_digest;
use super::messages::{OrderMessage, OrderOutput};

/// Evaluates a broadcast message against the replica's current state.
///
/// A CONFIRM needs `f + 1` valid approvals on one digest that equals the digest
/// of the carried output. An ABORT needs `2f + 1` valid approvals of which no
/// `f + 1` agree. A new configuration must match the announced epoch.
pub fn validate(core: &ReplicaCore, mode: Mode, crypto: &mut dyn CryptoBackend, msg: &AbvMessage) -> bool {
    match msg.decode() {
        Ok(AbvPayload::Order(m)) => order_valid(core, mode, crypto, &m),
        Ok(AbvPayload::NewConfig { config, leader }) => core.new_config_valid(msg.sender, config, leader),
        Ok(AbvPayload::MasterOrder(_)) | Err(_) => false,
    }
}

fn order_valid(core: &ReplicaCore, mode: Mode, crypto: &mut dyn CryptoBackend, m: &OrderMessage) -> bool {
    let f = core.membership.f();
    if m.config != core.config || core.committed.contains(&m.op.id) {
        return false;
    }
    let signers: BTreeSet<_> = m.justification.iter().map(|a| a.signer()).collect();
    if signers.len() != m.justification.len() {
        return false;
    }
    let approvals_ok = m
        .justification
        .iter()
        .all(|a| core.membership.contains(a.signer()) && a.config == m.config && a.op == m.op.id && a.verify(crypto));
    if !approvals_ok {
        return false;
    }
    match m.decision {
        Decision::Confirm => {
            if m.justification.len() != f + 1 {
                return false;
            }
            let h = m.justification[0].digest;
            if m.justification.iter().any(|a| a.digest != h) {
                return false;
            }
            let carried = match (&m.output, mode) {
                (OrderOutput::Full { t, r }, Mode::Full) => {
                    let ht = state_digest(crypto, t);
                    let hr = response_digest(crypto, r);
                    output_digest(crypto, &ht, &hr)
                }
                (OrderOutput::Hashed { ht, hr }, Mode::Hash) => output_digest(crypto, ht, hr),
                _ => return false,
            };
            carried == h
        }
        Decision::Abort => {
            m.justification.len() == 2 * f + 1
                && matches!(m.output, OrderOutput::None)
                && supported_digest(m.justification.iter().map(|a| &a.digest), f).is_none()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::app::{AppState, Membership, OpId, Operation, ProcessId, Response};
    use crate::crypto::{speculate_payload, Digest, IdealOracle};
    use crate::epoch::EpochConfig;
    use crate::sieve::messages::ApproveMessage;

    struct Fixture {
        crypto: IdealOracle,
        core: ReplicaCore,
        op: Operation,
        t: AppState,
        r: Response,
        h: Digest,
    }

    fn fixture() -> Fixture {
        let m = Membership::new(4, 1).unwrap();
        let mut crypto = IdealOracle::new();
        let t: AppState = [("x", "5")].into_iter().collect();
        let r = Response::ok();
        let ht = state_digest(&mut crypto, &t);
        let hr = response_digest(&mut crypto, &r);
        let h = output_digest(&mut crypto, &ht, &hr);
        Fixture {
            crypto,
            core: ReplicaCore::new(m, ProcessId(1)),
            op: Operation::new(
                OpId {
                    invoker: ProcessId(2),
                    counter: 0,
                },
                b"put".to_vec(),
            ),
            t,
            r,
            h,
        }
    }

    fn approve(fx: &mut Fixture, p: u16, digest: Digest) -> ApproveMessage {
        ApproveMessage {
            config: 0,
            op: fx.op.id,
            digest,
            sig: fx.crypto.sign(ProcessId(p), &speculate_payload(0, &digest)),
        }
    }

    fn abv(sender: u16, m: &OrderMessage) -> AbvMessage {
        AbvMessage {
            sender: ProcessId(sender),
            payload: m.encode(),
        }
    }

    fn confirm(fx: &mut Fixture, t: AppState) -> OrderMessage {
        let h = fx.h;
        OrderMessage {
            decision: Decision::Confirm,
            config: 0,
            op: fx.op.clone(),
            output: OrderOutput::Full { t, r: fx.r.clone() },
            justification: vec![approve(fx, 0, h), approve(fx, 2, h)],
        }
    }

    #[test]
    fn well_formed_confirm_is_valid() {
        let mut fx = fixture();
        let t = fx.t.clone();
        let m = confirm(&mut fx, t);
        assert!(validate(&fx.core, Mode::Full, &mut fx.crypto, &abv(0, &m)));
    }

    #[test]
    fn confirm_whose_payload_differs_from_approved_digest_is_invalid() {
        let mut fx = fixture();
        let forged: AppState = [("x", "6")].into_iter().collect();
        let m = confirm(&mut fx, forged);
        assert!(!validate(&fx.core, Mode::Full, &mut fx.crypto, &abv(0, &m)));
    }

    #[test]
    fn confirm_shape_rules() {
        let mut fx = fixture();
        let t = fx.t.clone();
        let good = confirm(&mut fx, t);

        let mut short = good.clone();
        short.justification.pop();
        assert!(!validate(&fx.core, Mode::Full, &mut fx.crypto, &abv(0, &short)));

        let mut dup = good.clone();
        dup.justification[1] = dup.justification[0].clone();
        assert!(!validate(&fx.core, Mode::Full, &mut fx.crypto, &abv(0, &dup)));

        let mut stale = good.clone();
        stale.config = 1;
        assert!(!validate(&fx.core, Mode::Full, &mut fx.crypto, &abv(0, &stale)));

        // Full-mode order offered to a hash-mode replica.
        assert!(!validate(&fx.core, Mode::Hash, &mut fx.crypto, &abv(0, &good)));

        let mut forged_sig = good.clone();
        forged_sig.justification[1].sig.signer = ProcessId(3);
        assert!(!validate(&fx.core, Mode::Full, &mut fx.crypto, &abv(0, &forged_sig)));

        fx.core.committed.insert(fx.op.id);
        assert!(!validate(&fx.core, Mode::Full, &mut fx.crypto, &abv(0, &good)));
    }

    #[test]
    fn hashed_confirm_binds_digests() {
        let mut fx = fixture();
        let ht = state_digest(&mut fx.crypto, &fx.t.clone());
        let hr = response_digest(&mut fx.crypto, &fx.r.clone());
        let mut m = confirm(&mut fx, AppState::new());
        m.output = OrderOutput::Hashed { ht, hr };
        assert!(validate(&fx.core, Mode::Hash, &mut fx.crypto, &abv(0, &m)));
        m.output = OrderOutput::Hashed { ht: hr, hr: ht };
        assert!(!validate(&fx.core, Mode::Hash, &mut fx.crypto, &abv(0, &m)));
    }

    #[test]
    fn abort_with_f_plus_one_equal_digests_is_invalid() {
        let mut fx = fixture();
        let (a, b) = (Digest::from_index(900), Digest::from_index(901));
        let m = OrderMessage {
            decision: Decision::Abort,
            config: 0,
            op: fx.op.clone(),
            output: OrderOutput::None,
            justification: vec![approve(&mut fx, 0, a), approve(&mut fx, 1, a), approve(&mut fx, 2, b)],
        };
        assert!(!validate(&fx.core, Mode::Full, &mut fx.crypto, &abv(0, &m)));

        let c = Digest::from_index(902);
        let ok = OrderMessage {
            justification: vec![approve(&mut fx, 0, a), approve(&mut fx, 1, b), approve(&mut fx, 2, c)],
            ..m
        };
        assert!(validate(&fx.core, Mode::Full, &mut fx.crypto, &abv(0, &ok)));
        assert!(validate(&fx.core, Mode::Hash, &mut fx.crypto, &abv(0, &ok)));
    }

    #[test]
    fn unannounced_new_config_is_invalid() {
        let mut fx = fixture();
        let msg = AbvMessage {
            sender: ProcessId(1),
            payload: AbvPayload::NewConfig {
                config: 1,
                leader: ProcessId(1),
            }
            .encode(),
        };
        assert!(!validate(&fx.core, Mode::Full, &mut fx.crypto, &msg));
        fx.core.next = Some(EpochConfig::for_epoch(&fx.core.membership, 1));
        assert!(validate(&fx.core, Mode::Full, &mut fx.crypto, &msg));
    }
}
