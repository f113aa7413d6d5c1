//! Byzantine state-machine replication for non-deterministic applications.
//!
//! Two replication protocols share one substrate: Sieve, which executes
//! speculatively and filters out operations whose outputs diverge, and
//! master-slave replication, where slaves replay the master's recorded
//! choices. Both run on a deterministic network simulator with an atomic
//! broadcast that checks messages against a validity predicate before
//! delivering them.

pub mod abv;
pub mod app;
pub mod byzantine;
pub mod crypto;
pub mod epoch;
pub mod masterslave;
pub mod metrics;
pub mod rsm;
pub mod scenario;
pub mod sieve;
pub mod simnet;
pub mod wire;
