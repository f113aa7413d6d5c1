//! Named Byzantine strategies. Scenarios refer to them by name; each maps to a
//! node that signs only as itself and reaches others only through its links.

use std::any::Any;
use std::fmt;
use std::str::FromStr;

use crate::masterslave::MasterBehaviour;
use crate::sieve::SieveBehaviour;
use crate::simnet::Node;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Strategy {
    /// Never sends anything.
    Silent,
    WrongDigest,
    EquivocatingLeader,
    GarbageResponder,
    SilentResponder,
    BadMaster,
    BiasingMaster,
}

impl Strategy {
    pub const ALL: [Strategy; 7] = [
        Self::Silent,
        Self::WrongDigest,
        Self::EquivocatingLeader,
        Self::GarbageResponder,
        Self::SilentResponder,
        Self::BadMaster,
        Self::BiasingMaster,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Silent => "silent",
            Self::WrongDigest => "wrong-digest",
            Self::EquivocatingLeader => "equivocating-leader",
            Self::GarbageResponder => "garbage-responder",
            Self::SilentResponder => "silent-responder",
            Self::BadMaster => "bad-master",
            Self::BiasingMaster => "biasing-master",
        }
    }

    /// Replica behaviour for Sieve; `None` if the strategy does not apply.
    pub fn sieve(self) -> Option<SieveBehaviour> {
        match self {
            Self::WrongDigest => Some(SieveBehaviour::WrongDigest),
            Self::EquivocatingLeader => Some(SieveBehaviour::EquivocatingLeader),
            Self::GarbageResponder => Some(SieveBehaviour::GarbageResponder),
            Self::SilentResponder => Some(SieveBehaviour::SilentResponder),
            _ => None,
        }
    }

    /// Replica behaviour for master-slave; `None` if the strategy does not apply.
    pub fn master(self) -> Option<MasterBehaviour> {
        match self {
            Self::BadMaster => Some(MasterBehaviour::BadEvidence),
            Self::BiasingMaster => Some(MasterBehaviour::Biasing),
            _ => None,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL.into_iter().find(|x| x.name() == s).ok_or_else(|| {
            let names: Vec<_> = Self::ALL.iter().map(|x| x.name()).collect();
            format!("unknown strategy `{s}` (known: {})", names.join(", "))
        })
    }
}

/// A process that ignores everything and sends nothing.
#[derive(Debug, Default)]
pub struct SilentNode;

impl Node for SilentNode {
    fn as_any(&self) -> &dyn Any {
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
        }
        assert!("sneaky".parse::<Strategy>().is_err());
    }

    #[test]
    fn each_strategy_fits_a_protocol() {
        for s in Strategy::ALL {
            let fits = s == Strategy::Silent || s.sieve().is_some() || s.master().is_some();
            assert!(fits, "{s}");
        }
    }
}
