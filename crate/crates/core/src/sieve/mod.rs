//! Sieve: speculative execute-then-order replication that confirms an
//! operation when `f + 1` processes agree on its output and filters it out
//! when they demonstrably diverge.
//!
//! The leader sends each operation to all processes, which execute it
//! speculatively and return a signed digest of the output. With `2f + 1`
//! approvals in hand the leader broadcasts a CONFIRM carrying the output that
//! `f + 1` processes approved, or an ABORT when no output reaches that support.
//! The approvals travel with the order, so every process can validate it.

pub mod decide;
pub mod messages;
mod replica;
pub mod validate;

pub use decide::{decide, Verdict};
pub use messages::{ApproveMessage, OrderMessage, OrderOutput, PeerMessage};
pub use replica::{SieveBehaviour, SieveReplica};
