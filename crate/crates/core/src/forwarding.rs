//! Forwarding decisions, duplicate tracking and frame aggregation.

use std::collections::{BTreeSet, HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::routing::{RoutingState, SpanningTreeState};
use crate::wire::{
    Frame, FrameBody, MessageId, NextHopEntry, NodeId, SealedMessage, HEADER_LEN, NHT_ENTRY_LEN,
};

pub const DEDUP_CAPACITY: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ForwardingMode {
    PerSourceTrees,
    SpanningTree,
    NaiveFlood,
}

impl ForwardingMode {
    pub const ALL: [ForwardingMode; 3] = [
        ForwardingMode::PerSourceTrees,
        ForwardingMode::SpanningTree,
        ForwardingMode::NaiveFlood,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ForwardingMode::PerSourceTrees => "per-source-trees",
            ForwardingMode::SpanningTree => "spanning-tree",
            ForwardingMode::NaiveFlood => "naive-flood",
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct DedupEntry {
    forwarded: bool,
    touched: u64,
    first_seen_ms: u64,
}

/// Bounded set of seen message ids with least-recently-used eviction.
#[derive(Debug, Clone)]
pub struct DedupCache {
    capacity: usize,
    clock: u64,
    entries: HashMap<MessageId, DedupEntry>,
    // (touched, id) in touch order; stale pairs are skipped on eviction.
    order: VecDeque<(u64, MessageId)>,
    duplicates: u64,
}

impl Default for DedupCache {
    fn default() -> Self {
        DedupCache::with_capacity(DEDUP_CAPACITY)
    }
}

impl DedupCache {
    pub fn with_capacity(capacity: usize) -> Self {
        DedupCache {
            capacity: capacity.max(1),
            clock: 0,
            entries: HashMap::new(),
            order: VecDeque::new(),
            duplicates: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, id: &MessageId) -> bool {
        self.entries.contains_key(id)
    }

    pub fn duplicates(&self) -> u64 {
        self.duplicates
    }

    fn touch(&mut self, id: MessageId) -> &mut DedupEntry {
        self.clock += 1;
        let clock = self.clock;
        self.order.push_back((clock, id));
        if !self.entries.contains_key(&id) && self.entries.len() >= self.capacity {
            self.evict_one();
        }
        let e = self.entries.entry(id).or_default();
        e.touched = clock;
        if self.order.len() > 4 * self.capacity {
            let entries = &self.entries;
            self.order
                .retain(|(t, id)| entries.get(id).is_some_and(|e| e.touched == *t));
        }
        self.entries.get_mut(&id).expect("just inserted")
    }

    fn evict_one(&mut self) {
        while let Some((t, id)) = self.order.pop_front() {
            if self.entries.get(&id).is_some_and(|e| e.touched == t) {
                self.entries.remove(&id);
                return;
            }
        }
    }

    /// Records a first sighting at `now_ms`; later calls keep the original time.
    pub fn mark_seen(&mut self, id: MessageId, now_ms: u64) {
        let fresh = !self.contains(&id);
        let e = self.touch(id);
        if fresh {
            e.first_seen_ms = now_ms;
        }
    }

    pub fn first_seen_ms(&self, id: &MessageId) -> Option<u64> {
        self.entries.get(id).map(|e| e.first_seen_ms)
    }

    /// Records an arrival and returns true if the id had been seen before.
    pub fn record_arrival(&mut self, id: MessageId, now_ms: u64) -> bool {
        let dup = self.contains(&id);
        if dup {
            self.on_duplicate(id);
        } else {
            self.mark_seen(id, now_ms);
        }
        dup
    }

    pub fn on_duplicate(&mut self, id: MessageId) {
        self.duplicates += 1;
        self.touch(id);
    }

    pub fn was_forwarded(&self, id: &MessageId) -> bool {
        self.entries.get(id).is_some_and(|e| e.forwarded)
    }

    pub fn mark_forwarded(&mut self, id: MessageId) {
        self.touch(id).forwarded = true;
    }
}

#[derive(Debug, Clone)]
struct Pending {
    msg: SealedMessage,
    enqueued_ms: u64,
}

/// FIFO of sealed messages awaiting transmission.
#[derive(Debug, Clone, Default)]
pub struct OutQueue {
    pending: VecDeque<Pending>,
    ids: BTreeSet<MessageId>,
}

impl OutQueue {
    /// Returns false (and drops the message) if its ttl is 0 or its id is
    /// already queued.
    pub fn enqueue(&mut self, msg: SealedMessage, now_ms: u64) -> bool {
        if msg.ttl == 0 || !self.ids.insert(msg.id()) {
            return false;
        }
        self.pending.push_back(Pending {
            msg,
            enqueued_ms: now_ms,
        });
        true
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    pub fn oldest_enqueued_ms(&self) -> Option<u64> {
        self.pending.front().map(|p| p.enqueued_ms)
    }

    pub fn drain(&mut self) -> Vec<SealedMessage> {
        self.ids.clear();
        self.pending.drain(..).map(|p| p.msg).collect()
    }
}

/// Decides whether a received, authenticated message should be re-broadcast.
pub fn should_forward(
    msg: &SealedMessage,
    received_from: NodeId,
    mode: ForwardingMode,
    routing: &RoutingState,
    tree: Option<&SpanningTreeState>,
    dedup: &DedupCache,
) -> bool {
    if msg.ttl == 0 || dedup.was_forwarded(&msg.id()) || msg.origin == routing.me() {
        return false;
    }
    match mode {
        ForwardingMode::NaiveFlood => true,
        ForwardingMode::PerSourceTrees => {
            let mut children = routing.children_for_origin(msg.origin);
            children.remove(&received_from);
            !children.is_empty()
        }
        ForwardingMode::SpanningTree => match tree {
            None => false,
            Some(t) => {
                let via_tree =
                    t.parent == Some(received_from) || t.children.contains(&received_from);
                via_tree && !t.is_leaf()
            }
        },
    }
}

/// Greedy FIFO packing of `messages` into frames no larger than `mtu`. The
/// next-hop table rides on the first frame, truncated if it would not leave
/// room for the first message.
pub fn aggregate(
    sender: NodeId,
    next_frame_seq: &mut u32,
    messages: Vec<SealedMessage>,
    nht: &[NextHopEntry],
    mtu: usize,
) -> Vec<Frame> {
    let mut frames = Vec::new();
    let mut current: Vec<SealedMessage> = Vec::new();
    let mut nht_len = 0;
    let mut size = 0;

    let mut close = |msgs: Vec<SealedMessage>, nht_len: usize, frames: &mut Vec<Frame>| {
        frames.push(Frame {
            sender,
            frame_seq: *next_frame_seq,
            next_hop_table: nht[..nht_len].to_vec(),
            body: FrameBody::Data(msgs),
        });
        *next_frame_seq = next_frame_seq.wrapping_add(1);
    };

    for msg in messages {
        let len = msg.encoded_len();
        if HEADER_LEN + len > mtu {
            // Cannot fit even alone; not producible by the sealer.
            continue;
        }
        if current.is_empty() {
            if frames.is_empty() {
                let room = (mtu - HEADER_LEN - len) / NHT_ENTRY_LEN;
                nht_len = nht.len().min(room);
            } else {
                nht_len = 0;
            }
            size = HEADER_LEN + NHT_ENTRY_LEN * nht_len;
        } else if size + len > mtu || current.len() == u8::MAX as usize {
            close(std::mem::take(&mut current), nht_len, &mut frames);
            nht_len = 0;
            size = HEADER_LEN;
        }
        size += len;
        current.push(msg);
    }
    if !current.is_empty() {
        close(current, nht_len, &mut frames);
    }
    frames
}
