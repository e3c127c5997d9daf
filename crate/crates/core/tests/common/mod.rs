//! Independent oracles shared by the integration and acceptance tests. None of
//! this code calls into the routing or forwarding modules.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use num_bigint::BigUint;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use swarmcast::forwarding::ForwardingMode;
use swarmcast::sim::{Mobility, NodeSpec, Scenario};
use swarmcast::wire::NodeId;

pub const HOP_BUDGET: u32 = 8;

/// Undirected graph over node ids 1..=n.
#[derive(Debug, Clone)]
pub struct Graph {
    pub adj: BTreeMap<u16, BTreeSet<u16>>,
    pub pos: BTreeMap<u16, (f64, f64)>,
    pub range: f64,
}

impl Graph {
    pub fn unit_disk(pos: BTreeMap<u16, (f64, f64)>, range: f64) -> Graph {
        let mut adj: BTreeMap<u16, BTreeSet<u16>> = pos.keys().map(|k| (*k, BTreeSet::new())).collect();
        for (a, pa) in &pos {
            for (b, pb) in &pos {
                if a != b && ((pa.0 - pb.0).powi(2) + (pa.1 - pb.1).powi(2)).sqrt() <= range {
                    adj.get_mut(a).unwrap().insert(*b);
                }
            }
        }
        Graph { adj, pos, range }
    }

    pub fn nodes(&self) -> impl Iterator<Item = u16> + '_ {
        self.adj.keys().copied()
    }

    pub fn bfs(&self, src: u16) -> BTreeMap<u16, u32> {
        let mut d = BTreeMap::from([(src, 0)]);
        let mut q = VecDeque::from([src]);
        while let Some(u) = q.pop_front() {
            for v in &self.adj[&u] {
                if !d.contains_key(v) {
                    d.insert(*v, d[&u] + 1);
                    q.push_back(*v);
                }
            }
        }
        d
    }

    pub fn is_connected(&self) -> bool {
        let first = self.nodes().next().unwrap();
        self.bfs(first).len() == self.adj.len()
    }

    /// Next hop from `v` toward `dest`: the lowest-id neighbor one hop closer.
    pub fn next_hop(&self, v: u16, dest: u16) -> Option<u16> {
        let d = self.bfs(dest);
        let dv = *d.get(&v)?;
        if dv == 0 {
            return None;
        }
        self.adj[&v].iter().copied().find(|w| d.get(w) == Some(&(dv - 1)))
    }

    /// Broadcast tree rooted at `origin`: child -> parent, where each node's
    /// parent is its next hop toward the origin.
    pub fn source_tree(&self, origin: u16) -> BTreeMap<u16, u16> {
        let d = self.bfs(origin);
        d.keys()
            .filter(|v| **v != origin)
            .map(|v| (*v, self.next_hop(*v, origin).unwrap()))
            .collect()
    }

    /// Shared tree rooted at the lowest id.
    pub fn root_tree(&self) -> BTreeMap<u16, u16> {
        self.source_tree(self.nodes().next().unwrap())
    }

    pub fn to_scenario(&self, mode: ForwardingMode, duration_ms: u64, seed: u64) -> Scenario {
        Scenario {
            nodes: self
                .pos
                .iter()
                .map(|(id, (x, y))| NodeSpec {
                    id: NodeId(*id),
                    x: *x,
                    y: *y,
                })
                .collect(),
            radio_range_m: self.range,
            loss_probability: 0.0,
            mobility: Mobility::Static,
            duration_ms,
            mode,
            adversary: None,
            seed,
        }
    }
}

fn children_of(parent: &BTreeMap<u16, u16>) -> BTreeMap<u16, BTreeSet<u16>> {
    let mut c: BTreeMap<u16, BTreeSet<u16>> = BTreeMap::new();
    for (child, p) in parent {
        c.entry(*p).or_default().insert(*child);
    }
    c
}

/// Longest tree path in hops.
pub fn tree_diameter(g: &Graph, parent: &BTreeMap<u16, u16>) -> u32 {
    let mut tree = Graph {
        adj: g.nodes().map(|n| (n, BTreeSet::new())).collect(),
        pos: g.pos.clone(),
        range: g.range,
    };
    for (c, p) in parent {
        tree.adj.get_mut(c).unwrap().insert(*p);
        tree.adj.get_mut(p).unwrap().insert(*c);
    }
    g.nodes()
        .map(|s| tree.bfs(s).values().copied().max().unwrap_or(0))
        .max()
        .unwrap_or(0)
}

/// Every forwarding structure fits the hop budget: plain shortest paths and
/// paths along the shared tree.
pub fn within_hop_budget(g: &Graph) -> bool {
    let diam = g
        .nodes()
        .map(|s| g.bfs(s).values().copied().max().unwrap_or(0))
        .max()
        .unwrap_or(0);
    diam <= HOP_BUDGET && tree_diameter(g, &g.root_tree()) <= HOP_BUDGET
}

/// Connected random geometric graph with `n` nodes that fits the hop budget.
pub fn random_geometric(seed: u64, n: usize) -> Graph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let range = 100.0;
    // Density that keeps most draws connected without making them cliques.
    let side = range * (n as f64 / 2.2).sqrt().max(1.0);
    loop {
        let pos: BTreeMap<u16, (f64, f64)> = (1..=n as u16)
            .map(|i| {
                let x: f64 = rng.gen_range(0.0..side);
                let y: f64 = rng.gen_range(0.0..side);
                (i, ((x * 10.0).round() / 10.0, (y * 10.0).round() / 10.0))
            })
            .collect();
        let g = Graph::unit_disk(pos, range);
        if g.is_connected() && within_hop_budget(&g) {
            return g;
        }
    }
}

/// Straight line of `n` nodes, 100 m apart, 120 m range.
pub fn line(n: u16) -> Graph {
    Graph::unit_disk(
        (1..=n).map(|i| (i, ((i - 1) as f64 * 100.0, 0.0))).collect(),
        120.0,
    )
}

/// Brute-force broadcast of one message from `origin` under `mode`, evaluated
/// directly on the graph with lock-step hops. Returns the set of transmitting
/// nodes.
pub fn brute_force_transmitters(g: &Graph, origin: u16, mode: ForwardingMode) -> BTreeSet<u16> {
    let source_children = children_of(&g.source_tree(origin));
    let root_parent = g.root_tree();
    let root_children = children_of(&root_parent);
    let empty = BTreeSet::new();

    let rule = |v: u16, from: u16| -> bool {
        match mode {
            ForwardingMode::NaiveFlood => true,
            ForwardingMode::PerSourceTrees => source_children
                .get(&v)
                .unwrap_or(&empty)
                .iter()
                .any(|c| *c != from),
            ForwardingMode::SpanningTree => {
                let kids = root_children.get(&v).unwrap_or(&empty);
                let tree_nbr = root_parent.get(&v) == Some(&from) || kids.contains(&from);
                tree_nbr && !kids.is_empty()
            }
        }
    };

    let mut transmitted = BTreeSet::from([origin]);
    // (receiver, sender, ttl carried)
    let mut wave: Vec<(u16, u16, u32)> = g.adj[&origin].iter().map(|v| (*v, origin, HOP_BUDGET)).collect();
    while !wave.is_empty() {
        wave.sort();
        let mut next = Vec::new();
        for (v, from, ttl) in wave {
            if v == origin || transmitted.contains(&v) || ttl <= 1 || !rule(v, from) {
                continue;
            }
            transmitted.insert(v);
            next.extend(g.adj[&v].iter().map(|w| (*w, v, ttl - 1)));
        }
        wave = next;
    }
    transmitted
}

/// Nodes in the tree with at least one child (including the root when it has any).
pub fn non_leaf_count(parent: &BTreeMap<u16, u16>) -> usize {
    children_of(parent).len()
}

// X25519 over GF(2^255 - 19), straight from the RFC 7748 ladder.

fn p() -> BigUint {
    (BigUint::from(1u8) << 255u32) - BigUint::from(19u8)
}

fn decode_le(b: &[u8; 32]) -> BigUint {
    BigUint::from_bytes_le(b)
}

fn encode_le(x: &BigUint) -> [u8; 32] {
    let mut v = x.to_bytes_le();
    v.resize(32, 0);
    v.try_into().unwrap()
}

pub fn x25519_oracle(scalar: &[u8; 32], u: &[u8; 32]) -> [u8; 32] {
    let p = p();
    let mut k = *scalar;
    k[0] &= 248;
    k[31] &= 127;
    k[31] |= 64;
    let k = decode_le(&k);
    let mut ub = *u;
    ub[31] &= 127;
    let x1 = decode_le(&ub) % &p;
    let a24 = BigUint::from(121665u32);
    let (mut x2, mut z2) = (BigUint::from(1u8), BigUint::from(0u8));
    let (mut x3, mut z3) = (x1.clone(), BigUint::from(1u8));
    let mut swap = false;
    let sub = |a: &BigUint, b: &BigUint| (a + &p - (b % &p)) % &p;
    for t in (0..255).rev() {
        let bit = k.bit(t);
        if swap ^ bit {
            std::mem::swap(&mut x2, &mut x3);
            std::mem::swap(&mut z2, &mut z3);
        }
        swap = bit;
        let a = (&x2 + &z2) % &p;
        let aa = (&a * &a) % &p;
        let b = sub(&x2, &z2);
        let bb = (&b * &b) % &p;
        let e = sub(&aa, &bb);
        let c = (&x3 + &z3) % &p;
        let d = sub(&x3, &z3);
        let da = (&d * &a) % &p;
        let cb = (&c * &b) % &p;
        let s = (&da + &cb) % &p;
        x3 = (&s * &s) % &p;
        let df = sub(&da, &cb);
        z3 = (&x1 * ((&df * &df) % &p)) % &p;
        x2 = (&aa * &bb) % &p;
        z2 = (&e * ((&aa + &a24 * &e) % &p)) % &p;
    }
    if swap {
        std::mem::swap(&mut x2, &mut x3);
        std::mem::swap(&mut z2, &mut z3);
    }
    let inv = z2.modpow(&(&p - BigUint::from(2u8)), &p);
    encode_le(&((&x2 * inv) % &p))
}

pub fn x25519_base_oracle(scalar: &[u8; 32]) -> [u8; 32] {
    let mut nine = [0u8; 32];
    nine[0] = 9;
    x25519_oracle(scalar, &nine)
}

pub fn hex32(s: &str) -> [u8; 32] {
    hex::decode(s).unwrap().try_into().unwrap()
}

/// Every window of `needle.len()` bytes in `hay` compared directly.
pub fn contains_bytes(hay: &[u8], needle: &[u8]) -> bool {
    !needle.is_empty() && hay.windows(needle.len()).any(|w| w == needle)
}

use swarmcast::wire::{
    Frame, FrameBody, KeyxRecord, NextHopEntry, OgmBody, SealedMessage, HEADER_LEN, MAX_TTL,
    MTU_BYTES,
};

fn nonzero(rng: &mut ChaCha8Rng) -> NodeId {
    NodeId(rng.gen_range(1..=u16::MAX))
}

/// Random frame satisfying every codec invariant and the default MTU.
pub fn random_frame(rng: &mut ChaCha8Rng) -> Frame {
    let sender = nonzero(rng);
    let kind = rng.gen_range(0..3);
    let mut budget = MTU_BYTES - HEADER_LEN;
    let mut nht = Vec::new();
    if kind != 2 {
        for _ in 0..rng.gen_range(0..20) {
            let mut dest = nonzero(rng);
            if dest == sender {
                dest = NodeId(dest.0 % u16::MAX + 1);
            }
            nht.push(NextHopEntry {
                destination: dest,
                next_hop: nonzero(rng),
                hop_count: rng.gen_range(1..=u8::MAX),
            });
        }
        budget -= 5 * nht.len();
    }
    let body = match kind {
        0 => {
            let mut msgs = Vec::new();
            loop {
                let ct_len = if rng.gen_bool(0.5) { 21 } else { rng.gen_range(0..=255) };
                if 32 + ct_len > budget || (!msgs.is_empty() && rng.gen_bool(0.3)) {
                    break;
                }
                budget -= 32 + ct_len;
                let mut ciphertext = vec![0u8; ct_len];
                rng.fill(&mut ciphertext[..]);
                msgs.push(SealedMessage {
                    origin: nonzero(rng),
                    origin_seq: rng.gen(),
                    timestamp_ms: rng.gen(),
                    ttl: rng.gen_range(0..=MAX_TTL),
                    ciphertext,
                    tag: rng.gen(),
                });
            }
            FrameBody::Data(msgs)
        }
        1 => FrameBody::Ogm(OgmBody {
            originator: nonzero(rng),
            ogm_seq: rng.gen(),
            metric: rng.gen(),
        }),
        _ => {
            let mut recs = Vec::new();
            for _ in 0..rng.gen_range(1..30) {
                recs.push(match rng.gen_range(0..3) {
                    0 => KeyxRecord::PubKey { point: rng.gen() },
                    1 => KeyxRecord::Wrapped {
                        member: nonzero(rng),
                        wrapped: rng.gen(),
                        tag: rng.gen(),
                    },
                    _ => KeyxRecord::RelayedPubKey {
                        owner: nonzero(rng),
                        point: rng.gen(),
                    },
                });
            }
            FrameBody::Keyx(recs)
        }
    };
    Frame {
        sender,
        frame_seq: rng.gen(),
        next_hop_table: nht,
        body,
    }
}
