use std::fmt;

use serde::{Deserialize, Serialize};

use super::LinkKind;

/// Historical marking shared by node and connection genes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Innovation(pub u64);

impl fmt::Display for Innovation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Every chromosome of a run shares these ids for its initial structure.
pub const INPUT_NODE: Innovation = Innovation(0);
pub const OUTPUT_NODE: Innovation = Innovation(1);
pub const MINIMAL_HIDDEN: Innovation = Innovation(2);
pub const MINIMAL_INPUT_EDGE: Innovation = Innovation(3);
pub const MINIMAL_OUTPUT_EDGE: Innovation = Innovation(4);
const FIRST_FREE: u64 = 5;

/// Ids issued when a connection is split by a new node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIds {
    pub node: Innovation,
    pub incoming: Innovation,
    pub outgoing: Innovation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
struct ConnectionKey {
    from: Innovation,
    to: Innovation,
    kind: LinkKind,
}

/// Issues innovation numbers for one population.
///
/// Within a generation the same structural event (connecting the same pair of
/// nodes, or splitting the same connection) maps to the same ids. The cache is
/// cleared by [`InnovationRegistry::advance_generation`]; the counter never
/// goes backwards, so distinct events never share an id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InnovationRegistry {
    next: u64,
    generation: u64,
    connections: Vec<(ConnectionKey, Innovation)>,
    splits: Vec<(Innovation, SplitIds)>,
}

impl Default for InnovationRegistry {
    fn default() -> Self {
        Self::new()
    }
}

impl InnovationRegistry {
    pub fn new() -> Self {
        Self {
            next: FIRST_FREE,
            generation: 0,
            connections: Vec::new(),
            splits: Vec::new(),
        }
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// Upper bound (exclusive) of every id issued so far.
    pub fn issued_below(&self) -> u64 {
        self.next
    }

    pub fn advance_generation(&mut self) {
        self.generation += 1;
        self.connections.clear();
        self.splits.clear();
    }

    fn fresh(&mut self) -> Innovation {
        let id = Innovation(self.next);
        self.next += 1;
        id
    }

    fn cached_connection(&self, key: &ConnectionKey) -> Option<Innovation> {
        self.connections.iter().find(|(k, _)| k == key).map(|(_, id)| *id)
    }

    pub fn connection(&mut self, from: Innovation, to: Innovation, kind: LinkKind) -> Innovation {
        let key = ConnectionKey { from, to, kind };
        if let Some(id) = self.cached_connection(&key) {
            return id;
        }
        let id = self.fresh();
        self.connections.push((key, id));
        id
    }

    /// Ids for splitting `edge` (whose endpoints are `from` and `to`).
    pub fn split(&mut self, edge: Innovation, from: Innovation, to: Innovation) -> SplitIds {
        if let Some((_, ids)) = self.splits.iter().find(|(e, _)| *e == edge) {
            return *ids;
        }
        let ids = self.fresh_split(from, to);
        self.splits.push((edge, ids));
        ids
    }

    /// Unshared ids for a split, used when a chromosome already carries the
    /// ids the cache would hand out.
    pub fn fresh_split(&mut self, from: Innovation, to: Innovation) -> SplitIds {
        let node = self.fresh();
        let incoming = self.fresh();
        let outgoing = self.fresh();
        let ids = SplitIds { node, incoming, outgoing };
        for (key, id) in [
            (ConnectionKey { from, to: node, kind: LinkKind::Layer }, incoming),
            (ConnectionKey { from: node, to, kind: LinkKind::Layer }, outgoing),
        ] {
            if self.cached_connection(&key).is_none() {
                self.connections.push((key, id));
            }
        }
        ids
    }
}
