//! The leader's decision once `2f + 1` approvals are in.

use std::collections::BTreeMap;

use crate::crypto::Digest;

use super::messages::ApproveMessage;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    /// The unique digest approved by at least `f + 1` processes.
    Confirm(Digest),
    Abort,
}

/// Returns the digest with multiplicity at least `f + 1`, if any. Among
/// `2f + 1` digests at most one can reach that multiplicity.
pub fn supported_digest<'a>(digests: impl IntoIterator<Item = &'a Digest>, f: usize) -> Option<Digest> {
    let mut counts: BTreeMap<Digest, usize> = BTreeMap::new();
    for d in digests {
        let c = counts.entry(*d).or_insert(0);
        *c += 1;
        if *c > f {
            return Some(*d);
        }
    }
    None
}

/// CONFIRM the `f + 1`-supported digest, ABORT otherwise. The caller supplies
/// exactly `2f + 1` approvals from distinct processes with valid signatures.
pub fn decide(approvals: &[ApproveMessage], f: usize) -> Verdict {
    debug_assert_eq!(approvals.len(), 2 * f + 1);
    match supported_digest(approvals.iter().map(|a| &a.digest), f) {
        Some(d) => Verdict::Confirm(d),
        None => Verdict::Abort,
    }
}
