//! Proactive route discovery and broadcast-tree membership.
//!
//! Every node periodically floods an originator message (OGM). Receivers keep
//! only the best next hop per originator, guarded by a feasibility distance so
//! that a route is only replaced by a newer sequence number or a strictly
//! shorter path. Next-hop tables are advertised on every DATA and OGM frame;
//! from its neighbors' tables a node learns which of them expect an origin's
//! broadcasts through it.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;
use thiserror::Error;

use crate::wire::{NextHopEntry, NodeId, OgmBody, MAX_TTL};

pub const OGM_INTERVAL_MS: u64 = 1000;
pub const NEIGHBOR_TIMEOUT_MS: u64 = 3000;
pub const MAX_NHT_ENTRIES: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RoutingError {
    #[error("no spanning-tree neighbor heard; node withdraws from forwarding")]
    Orphaned,
    #[error("routing loop toward {destination}: {path:?}")]
    Loop {
        destination: NodeId,
        path: Vec<NodeId>,
    },
}

/// Serial-number comparison on 16-bit sequence numbers: true when `a` is
/// newer than `b`.
pub fn seq_newer(a: u16, b: u16) -> bool {
    a != b && a.wrapping_sub(b) < 0x8000
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RouteEntry {
    pub destination: NodeId,
    pub next_hop: NodeId,
    pub metric: u8,
    pub ogm_seq: u16,
    pub feasibility_distance: u8,
    pub last_updated_ms: u64,
    /// Cleared when the next hop times out. The entry is kept so its sequence
    /// number and feasibility distance still guard against loops.
    pub reachable: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct NeighborView {
    pub neighbor: NodeId,
    pub their_next_hops: BTreeMap<NodeId, NodeId>,
    pub last_heard_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SpanningTreeState {
    pub root: NodeId,
    pub parent: Option<NodeId>,
    pub depth: u8,
    pub children: BTreeSet<NodeId>,
}

impl SpanningTreeState {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OgmDecision {
    pub accepted: bool,
    /// The OGM to re-flood, with its metric already incremented.
    pub forward: Option<OgmBody>,
}

/// Neighbors that route toward `origin` through `me`, i.e. `me`'s children in
/// the broadcast tree rooted at `origin`.
pub fn children_for_origin(
    me: NodeId,
    origin: NodeId,
    neighbors: &BTreeMap<NodeId, NeighborView>,
) -> BTreeSet<NodeId> {
    neighbors
        .values()
        .filter(|v| v.neighbor != origin && v.their_next_hops.get(&origin) == Some(&me))
        .map(|v| v.neighbor)
        .collect()
}

/// Picks the neighbor with the smallest announced depth (lowest id on ties)
/// as parent. `parents` maps each neighbor to the parent it announces.
pub fn update_spanning_tree(
    me: NodeId,
    root: NodeId,
    depths: &BTreeMap<NodeId, u8>,
    parents: &BTreeMap<NodeId, NodeId>,
) -> Result<SpanningTreeState, RoutingError> {
    let children = parents
        .iter()
        .filter(|(n, p)| **p == me && **n != me)
        .map(|(n, _)| *n)
        .collect();
    if me == root {
        return Ok(SpanningTreeState {
            root,
            parent: None,
            depth: 0,
            children,
        });
    }
    // BTreeMap iterates ascending, so min_by_key keeps the lowest id on ties.
    let (parent, parent_depth) = depths
        .iter()
        .filter(|(n, _)| **n != me)
        .min_by_key(|(_, d)| **d)
        .ok_or(RoutingError::Orphaned)?;
    let mut children: BTreeSet<NodeId> = children;
    children.remove(parent);
    Ok(SpanningTreeState {
        root,
        parent: Some(*parent),
        depth: parent_depth.saturating_add(1),
        children,
    })
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct RouteTable {
    entries: BTreeMap<NodeId, RouteEntry>,
}

impl RouteTable {
    pub fn get(&self, destination: NodeId) -> Option<&RouteEntry> {
        self.entries.get(&destination)
    }

    pub fn next_hop(&self, destination: NodeId) -> Option<NodeId> {
        self.entries
            .get(&destination)
            .filter(|e| e.reachable)
            .map(|e| e.next_hop)
    }

    /// Reachable routes in destination order.
    pub fn routes(&self) -> impl Iterator<Item = &RouteEntry> {
        self.entries.values().filter(|e| e.reachable)
    }

    pub fn len(&self) -> usize {
        self.routes().count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Follows next-hop pointers from `start` toward `destination`, failing if a
/// node is revisited. A missing route ends the walk.
pub fn walk_route_chain<'a, F>(
    start: NodeId,
    destination: NodeId,
    table_of: F,
) -> Result<Vec<NodeId>, RoutingError>
where
    F: Fn(NodeId) -> Option<&'a RouteTable>,
{
    let mut path = vec![start];
    let mut seen = BTreeSet::from([start]);
    let mut at = start;
    while at != destination {
        let Some(next) = table_of(at).and_then(|t| t.next_hop(destination)) else {
            break;
        };
        path.push(next);
        if !seen.insert(next) {
            return Err(RoutingError::Loop { destination, path });
        }
        at = next;
    }
    Ok(path)
}

#[derive(Debug, Clone)]
pub struct RoutingState {
    me: NodeId,
    own_seq: u16,
    max_ttl: u8,
    neighbor_timeout_ms: u64,
    pub table: RouteTable,
    pub neighbors: BTreeMap<NodeId, NeighborView>,
    /// Depth each neighbor last announced for the spanning-tree root.
    pub tree_depths: BTreeMap<NodeId, u8>,
    pub ignored_ogms: u64,
}

impl RoutingState {
    pub fn new(me: NodeId, neighbor_timeout_ms: u64) -> Self {
        RoutingState {
            me,
            own_seq: 0,
            max_ttl: MAX_TTL,
            neighbor_timeout_ms,
            table: RouteTable::default(),
            neighbors: BTreeMap::new(),
            tree_depths: BTreeMap::new(),
            ignored_ogms: 0,
        }
    }

    pub fn me(&self) -> NodeId {
        self.me
    }

    pub fn emit_ogm(&mut self) -> OgmBody {
        self.own_seq = self.own_seq.wrapping_add(1);
        OgmBody {
            originator: self.me,
            ogm_seq: self.own_seq,
            metric: 0,
        }
    }

    pub fn process_ogm(&mut self, from: NodeId, ogm: &OgmBody, now_ms: u64) -> OgmDecision {
        let rejected = OgmDecision {
            accepted: false,
            forward: None,
        };
        if ogm.originator == self.me || from == self.me {
            return rejected;
        }
        let metric = ogm.metric.saturating_add(1);
        let feasible = match self.table.entries.get(&ogm.originator) {
            None => true,
            Some(e) => {
                seq_newer(ogm.ogm_seq, e.ogm_seq)
                    || (ogm.ogm_seq == e.ogm_seq && metric < e.feasibility_distance)
            }
        };
        if !feasible {
            self.ignored_ogms += 1;
            return rejected;
        }
        self.table.entries.insert(
            ogm.originator,
            RouteEntry {
                destination: ogm.originator,
                next_hop: from,
                metric,
                ogm_seq: ogm.ogm_seq,
                feasibility_distance: metric,
                last_updated_ms: now_ms,
                reachable: true,
            },
        );
        let forward = (metric < self.max_ttl).then_some(OgmBody {
            originator: ogm.originator,
            ogm_seq: ogm.ogm_seq,
            metric,
        });
        OgmDecision {
            accepted: true,
            forward,
        }
    }

    /// Records that `from` was heard, together with the next-hop table it
    /// advertised. A table shorter than [`MAX_NHT_ENTRIES`] is complete and
    /// replaces the view; a full one may be a rotated slice and is merged.
    pub fn heard_frame(&mut self, from: NodeId, nht: &[NextHopEntry], now_ms: u64) {
        if from == self.me {
            return;
        }
        let view = self.neighbors.entry(from).or_insert_with(|| NeighborView {
            neighbor: from,
            ..Default::default()
        });
        view.last_heard_ms = now_ms;
        if nht.len() < MAX_NHT_ENTRIES {
            view.their_next_hops.clear();
        }
        for e in nht {
            view.their_next_hops.insert(e.destination, e.next_hop);
        }
    }

    /// Refreshes liveness for `from` without touching its advertised view.
    pub fn touch(&mut self, from: NodeId, now_ms: u64) {
        if from == self.me {
            return;
        }
        self.neighbors
            .entry(from)
            .or_insert_with(|| NeighborView {
                neighbor: from,
                ..Default::default()
            })
            .last_heard_ms = now_ms;
    }

    pub fn record_tree_depth(&mut self, from: NodeId, depth: u8) {
        if from != self.me {
            self.tree_depths.insert(from, depth);
        }
    }

    /// Drops neighbors not heard for longer than the timeout and retracts the
    /// routes through them. Returns the expired neighbors.
    pub fn expire(&mut self, now_ms: u64) -> Vec<NodeId> {
        let timeout = self.neighbor_timeout_ms;
        let expired: Vec<NodeId> = self
            .neighbors
            .values()
            .filter(|v| now_ms.saturating_sub(v.last_heard_ms) > timeout)
            .map(|v| v.neighbor)
            .collect();
        for n in &expired {
            self.neighbors.remove(n);
            self.tree_depths.remove(n);
            for e in self.table.entries.values_mut() {
                if e.next_hop == *n {
                    e.reachable = false;
                }
            }
        }
        expired
    }

    pub fn children_for_origin(&self, origin: NodeId) -> BTreeSet<NodeId> {
        children_for_origin(self.me, origin, &self.neighbors)
    }

    pub fn next_hop_table(&self) -> Vec<NextHopEntry> {
        self.table
            .routes()
            .map(|e| NextHopEntry {
                destination: e.destination,
                next_hop: e.next_hop,
                hop_count: e.metric,
            })
            .collect()
    }
}
