//! Per-node protocol engine.
//!
//! A pure event-driven state machine: callers feed [`Event`]s with a
//! non-decreasing clock and receive encoded frames to broadcast, telemetry
//! deliveries and diagnostics. There are no clocks, sockets or threads inside;
//! all randomness is drawn from `NodeConfig::rng_seed`.

use std::collections::BTreeSet;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::crypto::group::{KeyxError, DEFAULT_KEYX_RETRY_MS};
use crate::crypto::replay::{SeqWindow, DEFAULT_FRESHNESS_WINDOW_MS};
use crate::crypto::{
    generate_keypair, open_message, seal_message, CryptoError, KeyExchangeState, KeyxEvent,
    Phase, ReplayState, SessionKey,
};
use crate::forwarding::{aggregate, should_forward, DedupCache, ForwardingMode, OutQueue};
use crate::routing::{
    update_spanning_tree, RouteEntry, RoutingState, SpanningTreeState, MAX_NHT_ENTRIES,
    NEIGHBOR_TIMEOUT_MS, OGM_INTERVAL_MS,
};
use crate::wire::{
    Frame, FrameBody, KeyxRecord, MessageId, NextHopEntry, NodeId, OgmBody, SealedMessage,
    TelemetryPayload, HEADER_LEN, MAX_TTL, MTU_BYTES, SEALED_OVERHEAD,
};

pub const TELEMETRY_INTERVAL_MS: u64 = 500;
pub const AGGREGATION_DELAY_MS: u64 = 0;
/// Copies of an already delivered message arriving later than this after the
/// first one cannot be honest relays of the same flood and count as replays.
pub const DUPLICATE_HORIZON_MS: u64 = 100;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("node id {0} is not in the roster")]
    NotInRoster(NodeId),
    #[error("node id 0 is reserved")]
    ReservedId,
    #[error("timer {0} must be positive")]
    ZeroTimer(&'static str),
    #[error("mtu {0} cannot hold a full next-hop table and one message")]
    MtuTooSmall(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct NodeConfig {
    pub id: NodeId,
    pub roster: BTreeSet<NodeId>,
    pub mode: ForwardingMode,
    pub ogm_interval_ms: u64,
    pub telemetry_interval_ms: u64,
    pub freshness_window_ms: u64,
    pub neighbor_timeout_ms: u64,
    pub keyx_retry_ms: u64,
    pub aggregation_delay_ms: u64,
    pub mtu: usize,
    pub rng_seed: u64,
}

impl NodeConfig {
    pub fn new(id: NodeId, roster: BTreeSet<NodeId>, mode: ForwardingMode, rng_seed: u64) -> Self {
        NodeConfig {
            id,
            roster,
            mode,
            ogm_interval_ms: OGM_INTERVAL_MS,
            telemetry_interval_ms: TELEMETRY_INTERVAL_MS,
            freshness_window_ms: DEFAULT_FRESHNESS_WINDOW_MS,
            neighbor_timeout_ms: NEIGHBOR_TIMEOUT_MS,
            keyx_retry_ms: DEFAULT_KEYX_RETRY_MS,
            aggregation_delay_ms: AGGREGATION_DELAY_MS,
            mtu: MTU_BYTES,
            rng_seed,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !self.id.is_assigned() || self.roster.iter().any(|n| !n.is_assigned()) {
            return Err(ConfigError::ReservedId);
        }
        if !self.roster.contains(&self.id) {
            return Err(ConfigError::NotInRoster(self.id));
        }
        for (name, v) in [
            ("ogm_interval_ms", self.ogm_interval_ms),
            ("telemetry_interval_ms", self.telemetry_interval_ms),
            ("freshness_window_ms", self.freshness_window_ms),
            ("neighbor_timeout_ms", self.neighbor_timeout_ms),
            ("keyx_retry_ms", self.keyx_retry_ms),
        ] {
            if v == 0 {
                return Err(ConfigError::ZeroTimer(name));
            }
        }
        if self.mtu < HEADER_LEN + 5 * MAX_NHT_ENTRIES + SEALED_OVERHEAD + 255 {
            return Err(ConfigError::MtuTooSmall(self.mtu));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Event {
    Tick { now_ms: u64 },
    FrameIn { raw: Vec<u8>, now_ms: u64 },
    TelemetrySample { payload: TelemetryPayload, now_ms: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Delivery {
    pub origin: NodeId,
    pub seq: u32,
    pub payload: TelemetryPayload,
    pub timestamp_ms: u64,
    pub latency_ms: u64,
    pub hops: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    BadTag,
    Stale,
    Replayed,
    NoKey,
    Malformed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum Diagnostic {
    Rejected {
        id: Option<MessageId>,
        reason: RejectReason,
    },
    Duplicate(MessageId),
    Forwarded(MessageId),
    Originated(MessageId),
    RouteChanged(NodeId),
    KeyEstablished,
    KeyxTimeout,
    UnknownMember(NodeId),
    Orphaned,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Output {
    pub frames: Vec<Vec<u8>>,
    pub deliveries: Vec<Delivery>,
    pub diagnostics: Vec<Diagnostic>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Counters {
    pub frames_received: u64,
    pub data_frames_received: u64,
    pub ogm_frames_received: u64,
    pub keyx_frames_received: u64,
    pub messages_received: u64,
    pub delivered: u64,
    pub duplicates: u64,
    pub rejected_bad_tag: u64,
    pub rejected_stale: u64,
    pub rejected_replayed: u64,
    pub rejected_no_key: u64,
    pub rejected_malformed: u64,
    pub data_frames_sent: u64,
    pub ogm_frames_sent: u64,
    pub keyx_frames_sent: u64,
    pub messages_originated: u64,
    pub messages_forwarded: u64,
    pub non_tree_receptions: u64,
    pub telemetry_dropped_no_key: u64,
    pub ogms_ignored: u64,
    pub keyx_timeouts: u64,
    pub keyx_unknown_member: u64,
}

impl Counters {
    /// Units received: each sealed message in a DATA frame, each routing
    /// (OGM/KEYX) frame and each undecodable frame.
    pub fn received(&self) -> u64 {
        self.messages_received
            + self.ogm_frames_received
            + self.keyx_frames_received
            + self.malformed_frames()
    }

    pub fn malformed_frames(&self) -> u64 {
        self.frames_received
            - self.data_frames_received
            - self.ogm_frames_received
            - self.keyx_frames_received
    }

    pub fn rejected(&self) -> u64 {
        self.rejected_bad_tag
            + self.rejected_stale
            + self.rejected_replayed
            + self.rejected_no_key
            + self.rejected_malformed
    }

    pub fn routing_frames(&self) -> u64 {
        self.ogm_frames_received + self.keyx_frames_received
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Snapshot {
    pub id: NodeId,
    pub mode: ForwardingMode,
    pub key_phase: Phase,
    pub key_established_at_ms: Option<u64>,
    pub routes: Vec<RouteEntry>,
    pub neighbors: Vec<NodeId>,
    pub spanning_tree: Option<SpanningTreeState>,
    pub replay_windows: Vec<(NodeId, SeqWindow)>,
    pub queue_len: usize,
    pub counters: Counters,
}

pub struct Engine {
    config: NodeConfig,
    rng: ChaCha8Rng,
    keyx: KeyExchangeState,
    routing: RoutingState,
    tree: Option<SpanningTreeState>,
    replay: ReplayState,
    frame_windows: ReplayState,
    dedup: DedupCache,
    queue: OutQueue,
    counters: Counters,
    frame_seq: u32,
    origin_seq: u32,
    next_ogm_ms: Option<u64>,
    next_seal_ms: u64,
    pending_sample: Option<TelemetryPayload>,
    nht_cursor: usize,
    root: NodeId,
}

impl Engine {
    pub fn new(config: NodeConfig) -> Result<Engine, ConfigError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
        let mut seed = [0u8; 32];
        rng.fill_bytes(&mut seed);
        let keyx = KeyExchangeState::new(
            config.id,
            config.roster.clone(),
            generate_keypair(seed),
            config.keyx_retry_ms,
        );
        let root = *config.roster.iter().next().expect("validated roster");
        Ok(Engine {
            rng,
            keyx,
            routing: RoutingState::new(config.id, config.neighbor_timeout_ms),
            tree: None,
            replay: ReplayState::new(config.freshness_window_ms),
            frame_windows: ReplayState::new(u64::MAX),
            dedup: DedupCache::default(),
            queue: OutQueue::default(),
            counters: Counters::default(),
            frame_seq: 0,
            origin_seq: 0,
            next_ogm_ms: None,
            next_seal_ms: 0,
            pending_sample: None,
            nht_cursor: 0,
            root,
            config,
        })
    }

    pub fn id(&self) -> NodeId {
        self.config.id
    }

    pub fn config(&self) -> &NodeConfig {
        &self.config
    }

    pub fn counters(&self) -> &Counters {
        &self.counters
    }

    pub fn routing(&self) -> &RoutingState {
        &self.routing
    }

    pub fn spanning_tree(&self) -> Option<&SpanningTreeState> {
        self.tree.as_ref()
    }

    pub fn key_exchange(&self) -> &KeyExchangeState {
        &self.keyx
    }

    /// The group session key, once established. Exposed for diagnostics and
    /// confidentiality checks.
    pub fn session_key(&self) -> Option<&SessionKey> {
        self.keyx.session_key()
    }

    pub fn handle_event(&mut self, event: Event) -> Output {
        let mut out = Output::default();
        match event {
            Event::Tick { now_ms } => self.on_tick(now_ms, &mut out),
            Event::FrameIn { raw, now_ms } => self.on_frame(&raw, now_ms, &mut out),
            Event::TelemetrySample { payload, .. } => self.pending_sample = Some(payload),
        }
        out
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            id: self.config.id,
            mode: self.config.mode,
            key_phase: self.keyx.phase,
            key_established_at_ms: self.keyx.established_at_ms,
            routes: self.routing.table.routes().copied().collect(),
            neighbors: self.routing.neighbors.keys().copied().collect(),
            spanning_tree: self.tree.clone(),
            replay_windows: self
                .replay
                .origins
                .iter()
                .map(|(k, v)| (*k, *v))
                .collect(),
            queue_len: self.queue.len(),
            counters: self.counters,
        }
    }

    fn on_tick(&mut self, now: u64, out: &mut Output) {
        if self.keyx.phase == Phase::Idle {
            self.run_keyx(KeyxEvent::Start { now_ms: now }, out);
        } else {
            self.run_keyx(KeyxEvent::Tick { now_ms: now }, out);
        }

        self.routing.expire(now);

        if self.next_ogm_ms.is_none_or(|t| now >= t) {
            self.next_ogm_ms = Some(now + self.config.ogm_interval_ms);
            let ogm = self.routing.emit_ogm();
            self.send_ogm(ogm, out);
        }

        if self.config.mode == ForwardingMode::SpanningTree {
            self.refresh_tree(out);
        }

        if now >= self.next_seal_ms {
            if let Some(sample) = self.pending_sample.take() {
                self.next_seal_ms = now + self.config.telemetry_interval_ms;
                self.originate(sample, now, out);
            }
        }

        let ready = self
            .queue
            .oldest_enqueued_ms()
            .is_some_and(|t| now >= t + self.config.aggregation_delay_ms);
        if ready {
            self.flush_queue(out);
        }
    }

    fn refresh_tree(&mut self, out: &mut Output) {
        let parents = self
            .routing
            .neighbors
            .values()
            .filter_map(|v| v.their_next_hops.get(&self.root).map(|p| (v.neighbor, *p)))
            .collect();
        match update_spanning_tree(self.config.id, self.root, &self.routing.tree_depths, &parents)
        {
            Ok(t) => self.tree = Some(t),
            Err(_) => {
                if self.tree.take().is_some() {
                    out.diagnostics.push(Diagnostic::Orphaned);
                }
            }
        }
    }

    fn originate(&mut self, sample: TelemetryPayload, now: u64, out: &mut Output) {
        // Nothing to deliver in a swarm of one.
        if self.config.roster.len() < 2 {
            return;
        }
        let Some(key) = self.keyx.session_key().copied() else {
            self.counters.telemetry_dropped_no_key += 1;
            return;
        };
        let plaintext = match sample.encode() {
            Ok(p) => p,
            Err(_) => return,
        };
        self.origin_seq += 1;
        let msg = seal_message(
            &key,
            self.config.id,
            self.origin_seq,
            now,
            MAX_TTL,
            &plaintext,
        )
        .expect("telemetry payload is 21 bytes");
        let id = msg.id();
        let _ = self.replay.consume(id.origin, id.seq);
        self.dedup.mark_seen(id, now);
        self.dedup.mark_forwarded(id);
        self.queue.enqueue(msg, now);
        self.counters.messages_originated += 1;
        out.diagnostics.push(Diagnostic::Originated(id));
    }

    fn advertised_nht(&mut self) -> Vec<NextHopEntry> {
        let mut nht = self.routing.next_hop_table();
        if self.config.mode == ForwardingMode::SpanningTree {
            // Tree neighbors learn their children from the parent we announce.
            if let Some(SpanningTreeState {
                parent: Some(p),
                depth,
                ..
            }) = &self.tree
            {
                let entry = NextHopEntry {
                    destination: self.root,
                    next_hop: *p,
                    hop_count: (*depth).max(1),
                };
                match nht.iter_mut().find(|e| e.destination == self.root) {
                    Some(e) => *e = entry,
                    None => {
                        nht.push(entry);
                        nht.sort_by_key(|e| e.destination);
                    }
                }
            }
        }
        if nht.len() <= MAX_NHT_ENTRIES {
            return nht;
        }
        let start = self.nht_cursor % nht.len();
        self.nht_cursor = start + MAX_NHT_ENTRIES;
        nht.iter()
            .cycle()
            .skip(start)
            .take(MAX_NHT_ENTRIES)
            .copied()
            .collect()
    }

    fn next_frame_seq(&mut self) -> u32 {
        let s = self.frame_seq;
        self.frame_seq = self.frame_seq.wrapping_add(1);
        s
    }

    fn emit(&mut self, frame: &Frame, out: &mut Output) {
        match frame.encode_with_mtu(self.config.mtu) {
            Ok(bytes) => {
                match frame.body {
                    FrameBody::Data(_) => self.counters.data_frames_sent += 1,
                    FrameBody::Ogm(_) => self.counters.ogm_frames_sent += 1,
                    FrameBody::Keyx(_) => self.counters.keyx_frames_sent += 1,
                }
                out.frames.push(bytes);
            }
            Err(e) => unreachable!("engine built an invalid frame: {e}"),
        }
    }

    fn send_ogm(&mut self, ogm: OgmBody, out: &mut Output) {
        let frame = Frame {
            sender: self.config.id,
            frame_seq: self.next_frame_seq(),
            next_hop_table: self.advertised_nht(),
            body: FrameBody::Ogm(ogm),
        };
        self.emit(&frame, out);
    }

    fn send_keyx(&mut self, records: Vec<KeyxRecord>, out: &mut Output) {
        let mut batch: Vec<KeyxRecord> = Vec::new();
        let mut size = HEADER_LEN;
        for rec in records {
            let len = rec.encoded_len();
            if !batch.is_empty() && (size + len > self.config.mtu || batch.len() == 255) {
                let frame = Frame {
                    sender: self.config.id,
                    frame_seq: self.next_frame_seq(),
                    next_hop_table: vec![],
                    body: FrameBody::Keyx(std::mem::take(&mut batch)),
                };
                self.emit(&frame, out);
                size = HEADER_LEN;
            }
            size += len;
            batch.push(rec);
        }
        if !batch.is_empty() {
            let frame = Frame {
                sender: self.config.id,
                frame_seq: self.next_frame_seq(),
                next_hop_table: vec![],
                body: FrameBody::Keyx(batch),
            };
            self.emit(&frame, out);
        }
    }

    fn flush_queue(&mut self, out: &mut Output) {
        let nht = self.advertised_nht();
        let msgs = self.queue.drain();
        let mut seq = self.frame_seq;
        let frames = aggregate(self.config.id, &mut seq, msgs, &nht, self.config.mtu);
        self.frame_seq = seq;
        for f in &frames {
            self.emit(f, out);
        }
    }

    fn run_keyx(&mut self, event: KeyxEvent<'_>, out: &mut Output) {
        let was_established = self.keyx.is_established();
        match self.keyx.handle(event, &mut self.rng) {
            Ok(step) => {
                if step.timed_out {
                    self.counters.keyx_timeouts += 1;
                    out.diagnostics.push(Diagnostic::KeyxTimeout);
                }
                if !step.broadcast.is_empty() {
                    self.send_keyx(step.broadcast, out);
                }
            }
            Err(KeyxError::UnknownMember(n)) => {
                self.counters.keyx_unknown_member += 1;
                out.diagnostics.push(Diagnostic::UnknownMember(n));
            }
        }
        if !was_established && self.keyx.is_established() {
            out.diagnostics.push(Diagnostic::KeyEstablished);
        }
    }

    fn on_frame(&mut self, raw: &[u8], now: u64, out: &mut Output) {
        self.counters.frames_received += 1;
        let frame = match Frame::decode(raw) {
            Ok(f) => f,
            Err(_) => {
                out.diagnostics.push(Diagnostic::Rejected {
                    id: None,
                    reason: RejectReason::Malformed,
                });
                return;
            }
        };
        let sender = frame.sender;
        match frame.body {
            FrameBody::Keyx(records) => {
                self.counters.keyx_frames_received += 1;
                self.routing.touch(sender, now);
                self.run_keyx(
                    KeyxEvent::Frame {
                        sender,
                        records: &records,
                        now_ms: now,
                    },
                    out,
                );
            }
            FrameBody::Ogm(ogm) => {
                self.counters.ogm_frames_received += 1;
                self.routing.heard_frame(sender, &frame.next_hop_table, now);
                if ogm.originator == self.root {
                    self.routing.record_tree_depth(sender, ogm.metric);
                }
                let decision = self.routing.process_ogm(sender, &ogm, now);
                self.counters.ogms_ignored = self.routing.ignored_ogms;
                if decision.accepted {
                    out.diagnostics.push(Diagnostic::RouteChanged(ogm.originator));
                }
                if let Some(fwd) = decision.forward {
                    self.send_ogm(fwd, out);
                }
            }
            FrameBody::Data(msgs) => {
                self.counters.data_frames_received += 1;
                let frame_replayed = self.frame_windows.consume(sender, frame.frame_seq).is_err();
                // A recorded frame says nothing about who is in range now.
                if !frame_replayed {
                    self.routing.heard_frame(sender, &frame.next_hop_table, now);
                }
                for msg in msgs {
                    self.on_message(msg, sender, frame_replayed, now, out);
                }
            }
        }
    }

    fn reject(&mut self, id: MessageId, reason: RejectReason, out: &mut Output) {
        let c = &mut self.counters;
        match reason {
            RejectReason::BadTag => c.rejected_bad_tag += 1,
            RejectReason::Stale => c.rejected_stale += 1,
            RejectReason::Replayed => c.rejected_replayed += 1,
            RejectReason::NoKey => c.rejected_no_key += 1,
            RejectReason::Malformed => c.rejected_malformed += 1,
        }
        out.diagnostics.push(Diagnostic::Rejected {
            id: Some(id),
            reason,
        });
    }

    fn on_message(
        &mut self,
        msg: SealedMessage,
        sender: NodeId,
        frame_replayed: bool,
        now: u64,
        out: &mut Output,
    ) {
        self.counters.messages_received += 1;
        let id = msg.id();
        let Some(key) = self.keyx.session_key().copied() else {
            self.reject(id, RejectReason::NoKey, out);
            return;
        };
        match open_message(&key, &msg, &mut self.replay, now) {
            Ok(plaintext) => match TelemetryPayload::decode(&plaintext) {
                Ok(payload) => {
                    self.counters.delivered += 1;
                    self.dedup.mark_seen(id, now);
                    out.deliveries.push(Delivery {
                        origin: msg.origin,
                        seq: msg.origin_seq,
                        payload,
                        timestamp_ms: msg.timestamp_ms,
                        latency_ms: now.saturating_sub(msg.timestamp_ms),
                        hops: MAX_TTL - msg.ttl + 1,
                    });
                }
                Err(_) => {
                    self.reject(id, RejectReason::Malformed, out);
                    return;
                }
            },
            Err(CryptoError::BadTag) => return self.reject(id, RejectReason::BadTag, out),
            Err(CryptoError::Stale { .. }) => return self.reject(id, RejectReason::Stale, out),
            Err(CryptoError::Replayed { .. }) if frame_replayed || self.is_late_copy(&id, now) => {
                return self.reject(id, RejectReason::Replayed, out)
            }
            Err(CryptoError::Replayed { .. }) => {
                // Honest redundancy: the same message relayed by another neighbor.
                self.counters.duplicates += 1;
                self.dedup.on_duplicate(id);
                out.diagnostics.push(Diagnostic::Duplicate(id));
            }
            Err(e) => unreachable!("open_message cannot fail with {e}"),
        }
        if frame_replayed {
            return;
        }
        self.consider_forward(msg, sender, now, out);
    }

    fn is_late_copy(&self, id: &MessageId, now: u64) -> bool {
        self.dedup
            .first_seen_ms(id)
            .is_none_or(|t| now.saturating_sub(t) > DUPLICATE_HORIZON_MS)
    }

    fn consider_forward(&mut self, msg: SealedMessage, sender: NodeId, now: u64, out: &mut Output) {
        let forward = should_forward(
            &msg,
            sender,
            self.config.mode,
            &self.routing,
            self.tree.as_ref(),
            &self.dedup,
        );
        if !forward {
            if self.config.mode == ForwardingMode::SpanningTree {
                if let Some(t) = &self.tree {
                    if t.parent != Some(sender) && !t.children.contains(&sender) {
                        self.counters.non_tree_receptions += 1;
                    }
                }
            }
            return;
        }
        let id = msg.id();
        self.dedup.mark_forwarded(id);
        let relayed = SealedMessage {
            ttl: msg.ttl - 1,
            ..msg
        };
        if self.queue.enqueue(relayed, now) {
            self.counters.messages_forwarded += 1;
            out.diagnostics.push(Diagnostic::Forwarded(id));
        }
    }
}
