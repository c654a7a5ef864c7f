//! Opaque identifiers. Each serializes as a short prefixed string (`n4`,
//! `e2`, `p7`, `r3`); the user node is the reserved id `user`.

use alloc::format;
use alloc::string::{String, ToString};
use core::fmt;
use core::str::FromStr;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

macro_rules! prefixed_id {
    ($(#[$meta:meta])* $name:ident, $prefix:literal) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub struct $name(pub u32);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, concat!($prefix, "{}"), self.0)
            }
        }

        impl FromStr for $name {
            type Err = String;
            fn from_str(s: &str) -> Result<Self, Self::Err> {
                s.strip_prefix($prefix)
                    .filter(|rest| !rest.is_empty() && rest.bytes().all(|b| b.is_ascii_digit()))
                    .and_then(|rest| rest.parse::<u32>().ok())
                    .map($name)
                    .ok_or_else(|| format!(concat!("expected an id like ", $prefix, "1, got {:?}"), s))
            }
        }

        impl Serialize for $name {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.collect_str(self)
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                s.parse().map_err(D::Error::custom)
            }
        }
    };
}

prefixed_id!(
    /// Graph edge id.
    EdgeId,
    "e"
);
prefixed_id!(
    /// Relation proposal id.
    ProposalId,
    "p"
);
prefixed_id!(
    /// Reasoner request id. Retries reuse the id with a higher attempt number.
    RequestId,
    "r"
);

/// Scene node id. `NodeId::USER` is the agent-centric user node; object
/// nodes count up from 1 and are never reused within a session.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub u32);

impl NodeId {
    pub const USER: NodeId = NodeId(0);

    pub fn is_user(self) -> bool {
        self == NodeId::USER
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_user() {
            f.write_str("user")
        } else {
            write!(f, "n{}", self.0)
        }
    }
}

impl FromStr for NodeId {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "user" {
            return Ok(NodeId::USER);
        }
        match s.strip_prefix('n').and_then(|r| {
            (!r.is_empty() && r.bytes().all(|b| b.is_ascii_digit())).then(|| r.parse::<u32>().ok())?
        }) {
            Some(0) | None => Err(format!("expected a node id like n1, got {s:?}")),
            Some(n) => Ok(NodeId(n)),
        }
    }
}

impl Serialize for NodeId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for NodeId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(D::Error::custom)
    }
}

/// Target of a confirm/reject event: an edge or a pending proposal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ItemRef {
    Edge(EdgeId),
    Proposal(ProposalId),
}

impl fmt::Display for ItemRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ItemRef::Edge(e) => e.fmt(f),
            ItemRef::Proposal(p) => p.fmt(f),
        }
    }
}

impl FromStr for ItemRef {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Ok(e) = s.parse::<EdgeId>() {
            return Ok(ItemRef::Edge(e));
        }
        s.parse::<ProposalId>()
            .map(ItemRef::Proposal)
            .map_err(|_| format!("expected an edge (e1) or proposal (p1) id, got {s:?}"))
    }
}

impl Serialize for ItemRef {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for ItemRef {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(D::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_parse_and_print() {
        assert_eq!("n12".parse::<NodeId>().unwrap(), NodeId(12));
        assert_eq!("user".parse::<NodeId>().unwrap(), NodeId::USER);
        assert_eq!(NodeId(3).to_string(), "n3");
        assert!("n0".parse::<NodeId>().is_err());
        assert!("n".parse::<NodeId>().is_err());
        assert!("e3".parse::<NodeId>().is_err());
        assert!("n-1".parse::<NodeId>().is_err());
        assert_eq!("e4".parse::<ItemRef>().unwrap(), ItemRef::Edge(EdgeId(4)));
        assert_eq!("p4".parse::<ItemRef>().unwrap(), ItemRef::Proposal(ProposalId(4)));
        assert!("x4".parse::<ItemRef>().is_err());
        let json = serde_json::to_string(&RequestId(9)).unwrap();
        assert_eq!(json, "\"r9\"");
    }
}
