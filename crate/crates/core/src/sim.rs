//! Deterministic discrete-event simulator.
//!
//! Nodes sit on a plane and hear each other under a unit-disk model with
//! independent Bernoulli loss. Time advances in 1 ms steps and every broadcast
//! arrives one step later. Within a step, arrivals are processed first in
//! `(sender, frame_seq, receiver)` order, then each node ticks in id order, so
//! a run is a pure function of the scenario.

use std::collections::{BTreeMap, BTreeSet, HashSet, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{Counters, Delivery, Diagnostic, Engine, Event, NodeConfig, RejectReason};
use crate::forwarding::ForwardingMode;
use crate::routing::{walk_route_chain, RoutingError};
use crate::wire::{
    FrameType, MessageId, NodeId, TelemetryPayload, HEADER_LEN, NHT_ENTRY_LEN, PAYLOAD_LEN,
};

/// Telemetry starts once routes and the group key have had time to settle.
pub const TELEMETRY_START_MS: u64 = 3000;
pub const TELEMETRY_PERIOD_MS: u64 = 500;
/// Extra simulated time after `duration_ms` so in-flight messages land.
pub const DRAIN_MS: u64 = 500;
pub const PROPAGATION_DELAY_MS: u64 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("cannot parse scenario: {0}")]
    Parse(String),
    #[error("invalid scenario: {field}: {message}")]
    InvalidScenario { field: String, message: String },
}

fn invalid(field: impl Into<String>, message: impl Into<String>) -> SimError {
    SimError::InvalidScenario {
        field: field.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub id: NodeId,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Waypoint {
    pub node: NodeId,
    pub t_ms: u64,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Mobility {
    #[default]
    Static,
    /// Each node moves linearly between its own waypoints, holding its first
    /// and last positions outside their time range.
    Waypoint { waypoints: Vec<Waypoint> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdversaryKind {
    Eavesdrop,
    Tamper,
    Replay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdversaryModel {
    pub kind: AdversaryKind,
    pub x: f64,
    pub y: f64,
    pub range_m: f64,
    #[serde(default)]
    pub delay_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub nodes: Vec<NodeSpec>,
    pub radio_range_m: f64,
    pub loss_probability: f64,
    #[serde(default)]
    pub mobility: Mobility,
    pub duration_ms: u64,
    pub mode: ForwardingMode,
    #[serde(default)]
    pub adversary: Option<AdversaryModel>,
    #[serde(default)]
    pub seed: u64,
}

impl Scenario {
    /// Parses and validates a TOML scenario.
    pub fn from_toml(text: &str) -> Result<Scenario, SimError> {
        let s: Scenario = toml::from_str(text).map_err(|e| SimError::Parse(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.nodes.is_empty() {
            return Err(invalid("nodes", "at least one node is required"));
        }
        let mut ids = BTreeSet::new();
        for (i, n) in self.nodes.iter().enumerate() {
            if !n.id.is_assigned() {
                return Err(invalid(format!("nodes[{i}].id"), "id 0 is reserved"));
            }
            if !ids.insert(n.id) {
                return Err(invalid(format!("nodes[{i}].id"), format!("duplicate id {}", n.id)));
            }
            if !n.x.is_finite() || !n.y.is_finite() {
                return Err(invalid(format!("nodes[{i}]"), "position must be finite"));
            }
        }
        if !(self.radio_range_m.is_finite() && self.radio_range_m > 0.0) {
            return Err(invalid("radio_range_m", "must be a positive finite number"));
        }
        if !(0.0..1.0).contains(&self.loss_probability) {
            return Err(invalid("loss_probability", "must be in [0, 1)"));
        }
        if self.duration_ms == 0 {
            return Err(invalid("duration_ms", "must be positive"));
        }
        if let Mobility::Waypoint { waypoints } = &self.mobility {
            for (i, w) in waypoints.iter().enumerate() {
                if !ids.contains(&w.node) {
                    return Err(invalid(
                        format!("mobility.waypoints[{i}].node"),
                        format!("unknown node {}", w.node),
                    ));
                }
                if !w.x.is_finite() || !w.y.is_finite() {
                    return Err(invalid(
                        format!("mobility.waypoints[{i}]"),
                        "position must be finite",
                    ));
                }
            }
        }
        if let Some(a) = &self.adversary {
            if !a.x.is_finite() || !a.y.is_finite() {
                return Err(invalid("adversary", "position must be finite"));
            }
            if !(a.range_m.is_finite() && a.range_m > 0.0) {
                return Err(invalid("adversary.range_m", "must be a positive finite number"));
            }
        }
        Ok(())
    }

    pub fn with_mode(&self, mode: ForwardingMode) -> Scenario {
        Scenario {
            mode,
            ..self.clone()
        }
    }

    pub fn with_seed(&self, seed: u64) -> Scenario {
        Scenario {
            seed,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Summary {
    pub count: u64,
    pub mean: f64,
    pub p50: f64,
    pub p95: f64,
    pub max: f64,
}

impl Summary {
    /// Nearest-rank percentiles.
    pub fn of(values: &[u64]) -> Summary {
        if values.is_empty() {
            return Summary::default();
        }
        let mut v = values.to_vec();
        v.sort_unstable();
        let rank = |p: f64| {
            let idx = ((p * v.len() as f64).ceil() as usize).clamp(1, v.len()) - 1;
            v[idx] as f64
        };
        Summary {
            count: v.len() as u64,
            mean: v.iter().sum::<u64>() as f64 / v.len() as f64,
            p50: rank(0.50),
            p95: rank(0.95),
            max: *v.last().unwrap() as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct RejectCounts {
    pub bad_tag: u64,
    pub stale: u64,
    pub replayed: u64,
    pub no_key: u64,
    pub malformed: u64,
}

impl RejectCounts {
    fn from_counters(c: &Counters) -> Self {
        RejectCounts {
            bad_tag: c.rejected_bad_tag,
            stale: c.rejected_stale,
            replayed: c.rejected_replayed,
            no_key: c.rejected_no_key,
            malformed: c.rejected_malformed + c.malformed_frames(),
        }
    }

    fn add(&mut self, reason: RejectReason) {
        match reason {
            RejectReason::BadTag => self.bad_tag += 1,
            RejectReason::Stale => self.stale += 1,
            RejectReason::Replayed => self.replayed += 1,
            RejectReason::NoKey => self.no_key += 1,
            RejectReason::Malformed => self.malformed += 1,
        }
    }

    fn merge(&mut self, o: &RejectCounts) {
        self.bad_tag += o.bad_tag;
        self.stale += o.stale;
        self.replayed += o.replayed;
        self.no_key += o.no_key;
        self.malformed += o.malformed;
    }

    pub fn total(&self) -> u64 {
        self.bad_tag + self.stale + self.replayed + self.no_key + self.malformed
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NodeMetrics {
    pub id: NodeId,
    pub messages_originated: u64,
    pub messages_forwarded: u64,
    pub delivered: u64,
    pub expected: u64,
    pub delivery_ratio: f64,
    pub duplicates: u64,
    pub rejected: RejectCounts,
    pub key_established_at_ms: Option<u64>,
    pub latency_ms: Summary,
    pub counters: Counters,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateMetrics {
    pub messages_originated: u64,
    /// Every (message, other node) pair.
    pub expected_deliveries: u64,
    /// Pairs whose receiver was connected to the origin when it was sent.
    pub reachable_pairs: u64,
    pub delivered: u64,
    pub delivery_ratio: f64,
    pub reachable_delivery_ratio: f64,
    pub message_transmissions: u64,
    pub transmissions_per_originated_message: f64,
    pub data_frames_sent: u64,
    pub ogm_frames_sent: u64,
    pub keyx_frames_sent: u64,
    pub bytes_sent: u64,
    pub max_frame_bytes: u64,
    pub latency_ms: Summary,
    pub latency_hops: Summary,
    pub duplicates: u64,
    pub rejected: RejectCounts,
    pub non_tree_receptions: u64,
    pub telemetry_dropped_no_key: u64,
    pub key_established_nodes: u64,
    /// Time by which every node held the group key, if all did.
    pub key_exchange_time_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdversaryOutcome {
    pub kind: AdversaryKind,
    pub frames_overheard: u64,
    pub frames_injected: u64,
    pub messages_injected: u64,
    /// Injected copies that an honest node delivered to its application.
    pub accepted: u64,
    pub rejected: RejectCounts,
    pub duplicates: u64,
    pub transcript_bytes: u64,
    pub plaintext_leaks: u64,
    pub key_leaks: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioInfo {
    pub nodes: usize,
    pub mode: ForwardingMode,
    pub seed: u64,
    pub duration_ms: u64,
    pub loss_probability: f64,
    pub radio_range_m: f64,
    pub mobile: bool,
    pub adversary: Option<AdversaryKind>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub scenario: ScenarioInfo,
    pub aggregate: AggregateMetrics,
    pub nodes: Vec<NodeMetrics>,
    pub adversary: Option<AdversaryOutcome>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn summary_line(&self) -> String {
        let a = &self.aggregate;
        format!(
            "mode={} delivery_ratio={:.4} tx_per_msg={:.3} p95_latency_ms={}",
            self.scenario.mode.name(),
            a.delivery_ratio,
            a.transmissions_per_originated_message,
            a.latency_ms.p95
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TraceRecord {
    pub time_ms: u64,
    /// 0 denotes the adversary.
    pub node: u16,
    pub kind: &'static str,
    pub detail: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    pub trace: bool,
    /// Keep every honest transmission.
    pub transcript: bool,
    /// Walk next-hop chains after every route change.
    pub check_loops: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transmission {
    pub time_ms: u64,
    pub sender: NodeId,
    pub bytes: Vec<u8>,
}

pub struct RunOutput {
    pub report: MetricsReport,
    pub trace: Vec<TraceRecord>,
    pub transcript: Vec<Transmission>,
    /// What the adversary overheard.
    pub adversary_transcript: Vec<Vec<u8>>,
    pub plaintexts: Vec<[u8; PAYLOAD_LEN]>,
    /// (receiver, message) for every application delivery.
    pub deliveries: Vec<(NodeId, MessageId)>,
    pub transmissions_per_message: BTreeMap<MessageId, u64>,
    pub loop_checks: u64,
    pub loops: Vec<RoutingError>,
    pub engines: BTreeMap<NodeId, Engine>,
}

pub fn run(scenario: &Scenario) -> Result<MetricsReport, SimError> {
    Ok(run_detailed(scenario, RunOptions::default())?.report)
}

/// Runs the scenario once per forwarding mode with the same seed.
pub fn compare(scenario: &Scenario) -> Result<Vec<MetricsReport>, SimError> {
    ForwardingMode::ALL
        .iter()
        .map(|m| run(&scenario.with_mode(*m)))
        .collect()
}

/// Walks every node's next-hop chain toward each destination whose route
/// changed since the last call.
fn check_chains(
    engines: &BTreeMap<NodeId, Engine>,
    changed: &mut BTreeSet<NodeId>,
    checks: &mut u64,
    loops: &mut Vec<RoutingError>,
) {
    for dest in std::mem::take(changed) {
        for start in engines.keys() {
            *checks += 1;
            if let Err(e) = walk_route_chain(*start, dest, |n| engines.get(&n).map(|e| &e.routing().table)) {
                loops.push(e);
            }
        }
    }
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Uniform draw in [0, 1) that depends only on its key, so the order in which
/// links are visited cannot change the outcome.
pub fn link_draw(seed: u64, sender: NodeId, frame_seq: u32, receiver: NodeId) -> f64 {
    let h = mix(mix(mix(seed) ^ sender.0 as u64) ^ ((frame_seq as u64) << 16 | receiver.0 as u64));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

pub fn node_rng_seed(seed: u64, id: NodeId) -> u64 {
    mix(seed ^ mix(id.0 as u64 | 0x5eed_0000_0000))
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - b.0).hypot(a.1 - b.1)
}

struct Positions {
    start: BTreeMap<NodeId, (f64, f64)>,
    tracks: BTreeMap<NodeId, Vec<(u64, f64, f64)>>,
}

impl Positions {
    fn new(s: &Scenario) -> Self {
        let start = s.nodes.iter().map(|n| (n.id, (n.x, n.y))).collect();
        let mut tracks: BTreeMap<NodeId, Vec<(u64, f64, f64)>> = BTreeMap::new();
        if let Mobility::Waypoint { waypoints } = &s.mobility {
            for w in waypoints {
                tracks.entry(w.node).or_default().push((w.t_ms, w.x, w.y));
            }
            for t in tracks.values_mut() {
                t.sort_by_key(|w| w.0);
            }
        }
        Positions { start, tracks }
    }

    fn at(&self, id: NodeId, t: u64) -> (f64, f64) {
        let Some(track) = self.tracks.get(&id) else {
            return self.start[&id];
        };
        let first = track[0];
        if t <= first.0 {
            return (first.1, first.2);
        }
        for w in track.windows(2) {
            let (a, b) = (w[0], w[1]);
            if t <= b.0 {
                let f = (t - a.0) as f64 / (b.0 - a.0).max(1) as f64;
                return (a.1 + (b.1 - a.1) * f, a.2 + (b.2 - a.2) * f);
            }
        }
        let last = track[track.len() - 1];
        (last.1, last.2)
    }

    fn all_at(&self, t: u64) -> BTreeMap<NodeId, (f64, f64)> {
        self.start.keys().map(|id| (*id, self.at(*id, t))).collect()
    }
}

/// Connected component of `origin` in the unit-disk graph.
fn reachable_from(origin: NodeId, pos: &BTreeMap<NodeId, (f64, f64)>, range: f64) -> usize {
    let mut seen = BTreeSet::from([origin]);
    let mut queue = VecDeque::from([origin]);
    while let Some(u) = queue.pop_front() {
        for (v, p) in pos {
            if !seen.contains(v) && dist(pos[&u], *p) <= range {
                seen.insert(*v);
                queue.push_back(*v);
            }
        }
    }
    seen.len()
}

struct InFlight {
    order: (u16, u64, u16),
    receiver: NodeId,
    bytes: Vec<u8>,
    injected: Option<InjectedInfo>,
}

#[derive(Clone, Copy)]
struct InjectedInfo {
    /// Message whose bits were flipped, for tamper injections.
    /// Id of the altered message as it reads after the flip.
    tampered: Option<MessageId>,
}

fn header_sender_seq(raw: &[u8]) -> (NodeId, u32) {
    (
        NodeId(u16::from_be_bytes([raw[2], raw[3]])),
        u32::from_be_bytes([raw[4], raw[5], raw[6], raw[7]]),
    )
}

/// Flips one random bit inside the authenticated fields of one sealed message
/// of a DATA frame. Returns the id of the message as it reads after the flip.
fn tamper_frame(raw: &mut [u8], rng: &mut ChaCha8Rng) -> Option<MessageId> {
    let nht = raw[8] as usize;
    let count = raw[9] as usize;
    let mut at = HEADER_LEN + nht * NHT_ENTRY_LEN;
    let mut spans = Vec::with_capacity(count);
    for _ in 0..count {
        let ct_len = *raw.get(at + 15)? as usize;
        spans.push((at, ct_len));
        at += 32 + ct_len;
    }
    let (start, ct_len) = spans[rng.gen_range(0..spans.len())];
    // origin, seq and timestamp, then ciphertext and tag; ttl and length are
    // not covered by the tag.
    let authed = 14 + ct_len + 16;
    let pick = rng.gen_range(0..authed * 8);
    let byte = pick / 8;
    let offset = if byte < 14 { start + byte } else { start + 2 + byte };
    raw[offset] ^= 1 << (pick % 8);
    let id = MessageId {
        origin: NodeId(u16::from_be_bytes([raw[start], raw[start + 1]])),
        seq: u32::from_be_bytes([
            raw[start + 2],
            raw[start + 3],
            raw[start + 4],
            raw[start + 5],
        ]),
    };
    Some(id)
}

fn telemetry_sample(rng: &mut ChaCha8Rng, pos: (f64, f64), t: u64) -> TelemetryPayload {
    // Local metres mapped onto a reference point; the jitter keeps every
    // sample distinct.
    TelemetryPayload {
        latitude: 473_977_000 + (pos.1 * 90.0) as i32 + rng.gen_range(-5000..5000),
        longitude: 85_456_000 + (pos.0 * 130.0) as i32 + rng.gen_range(-5000..5000),
        altitude: 50_000 + rng.gen_range(0..20_000),
        velocity_x: rng.gen(),
        velocity_y: rng.gen(),
        velocity_z: rng.gen_range(-300..300),
        heading: rng.gen_range(0..36000),
        battery: (100 - (t / 60_000).min(100)) as u8,
    }
}

/// Counts 21-byte plaintexts and 16-byte keys that occur verbatim in `data`.
fn leak_scan(
    frames: &[Vec<u8>],
    plaintexts: &HashSet<[u8; PAYLOAD_LEN]>,
    keys: &HashSet<[u8; 16]>,
) -> (u64, u64) {
    let mut p = 0;
    let mut k = 0;
    for f in frames {
        p += f
            .windows(PAYLOAD_LEN)
            .filter(|w| plaintexts.contains(*w))
            .count() as u64;
        k += f.windows(16).filter(|w| keys.contains(*w)).count() as u64;
    }
    (p, k)
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

struct AdversaryState {
    model: AdversaryModel,
    rng: ChaCha8Rng,
    next_seq: u64,
    overheard: Vec<Vec<u8>>,
    frames_injected: u64,
    messages_injected: u64,
    accepted: u64,
    rejected: RejectCounts,
    duplicates: u64,
}

pub fn run_detailed(scenario: &Scenario, opts: RunOptions) -> Result<RunOutput, SimError> {
    scenario.validate()?;
    let seed = scenario.seed;
    let roster: BTreeSet<NodeId> = scenario.nodes.iter().map(|n| n.id).collect();
    let positions = Positions::new(scenario);
    let range = scenario.radio_range_m;
    let loss = scenario.loss_probability;

    let mut engines: BTreeMap<NodeId, Engine> = BTreeMap::new();
    for id in &roster {
        let cfg = NodeConfig::new(*id, roster.clone(), scenario.mode, node_rng_seed(seed, *id));
        let e = Engine::new(cfg).map_err(|e| invalid("nodes", e.to_string()))?;
        engines.insert(*id, e);
    }
    let mut sample_rng = ChaCha8Rng::seed_from_u64(mix(seed ^ 0x7e1e));
    let mut adversary = scenario.adversary.clone().map(|model| AdversaryState {
        model,
        rng: ChaCha8Rng::seed_from_u64(mix(seed ^ 0xad5e)),
        next_seq: 0,
        overheard: Vec::new(),
        frames_injected: 0,
        messages_injected: 0,
        accepted: 0,
        rejected: RejectCounts::default(),
        duplicates: 0,
    });

    let mut in_flight: BTreeMap<u64, Vec<InFlight>> = BTreeMap::new();
    let mut trace = Vec::new();
    let mut transcript = Vec::new();
    let mut plaintexts: Vec<[u8; PAYLOAD_LEN]> = Vec::new();
    let mut deliveries_out = Vec::new();
    let mut tx_per_msg: BTreeMap<MessageId, u64> = BTreeMap::new();
    let mut reachable_pairs = 0u64;
    let mut latencies_ms: BTreeMap<NodeId, Vec<u64>> = BTreeMap::new();
    let mut latencies_hops = Vec::new();
    let mut bytes_sent = 0u64;
    let mut max_frame = 0u64;
    let mut loop_checks = 0u64;
    let mut loops = Vec::new();

    let end = scenario.duration_ms + DRAIN_MS;
    for now in 0..=end {
        let pos = positions.all_at(now);
        let mut produced: Vec<(NodeId, Vec<Vec<u8>>)> = Vec::new();
        let mut changed: BTreeSet<NodeId> = BTreeSet::new();

        // Arrivals.
        if let Some(mut batch) = in_flight.remove(&now) {
            batch.sort_by_key(|f| (f.order, f.receiver.0));
            for f in batch {
                let engine = engines.get_mut(&f.receiver).expect("receiver exists");
                let out = engine.handle_event(Event::FrameIn {
                    raw: f.bytes,
                    now_ms: now,
                });
                if let (Some(info), Some(adv)) = (f.injected, adversary.as_mut()) {
                    for d in &out.diagnostics {
                        match d {
                            Diagnostic::Rejected { reason, .. } => adv.rejected.add(*reason),
                            Diagnostic::Duplicate(_) => adv.duplicates += 1,
                            _ => {}
                        }
                    }
                    adv.accepted += match (adv.model.kind, info.tampered) {
                        // The altered copy can collide with a genuine message in the same
                        // frame, so a delivery only counts if the altered copy
                        // got past the tag check.
                        (AdversaryKind::Tamper, Some(id)) => {
                            let rejected = out.diagnostics.iter().any(|d| {
                                matches!(d, Diagnostic::Rejected { id: Some(r), .. } if *r == id)
                            });
                            if rejected {
                                0
                            } else {
                                out.deliveries
                                    .iter()
                                    .filter(|d| d.origin == id.origin && d.seq == id.seq)
                                    .count() as u64
                            }
                        }
                        _ => out.deliveries.len() as u64,
                    };
                }
                record_output(
                    now,
                    f.receiver,
                    &out.deliveries,
                    &out.diagnostics,
                    opts.trace,
                    &mut trace,
                    &mut changed,
                );
                for d in &out.deliveries {
                    deliveries_out.push((
                        f.receiver,
                        MessageId {
                            origin: d.origin,
                            seq: d.seq,
                        },
                    ));
                    latencies_ms.entry(f.receiver).or_default().push(d.latency_ms);
                    latencies_hops.push(d.hops as u64);
                }
                produced.push((f.receiver, out.frames));
                if opts.check_loops {
                    check_chains(&engines, &mut changed, &mut loop_checks, &mut loops);
                }
            }
        }

        // Telemetry samples.
        if now >= TELEMETRY_START_MS
            && now <= scenario.duration_ms
            && (now - TELEMETRY_START_MS) % TELEMETRY_PERIOD_MS == 0
        {
            for (id, engine) in engines.iter_mut() {
                let payload = telemetry_sample(&mut sample_rng, pos[id], now);
                plaintexts.push(payload.encode().expect("sample is valid"));
                engine.handle_event(Event::TelemetrySample {
                    payload,
                    now_ms: now,
                });
            }
        }

        // Ticks.
        for (id, engine) in engines.iter_mut() {
            let out = engine.handle_event(Event::Tick { now_ms: now });
            for d in &out.diagnostics {
                if let Diagnostic::Originated(_) = d {
                    reachable_pairs += reachable_from(*id, &pos, range) as u64 - 1;
                }
            }
            record_output(
                now,
                *id,
                &out.deliveries,
                &out.diagnostics,
                opts.trace,
                &mut trace,
                &mut changed,
            );
            produced.push((*id, out.frames));
        }

        if opts.check_loops {
            check_chains(&engines, &mut changed, &mut loop_checks, &mut loops);
        }

        // Broadcasts.
        for (sender, frames) in produced {
            for raw in frames {
                let (_, frame_seq) = header_sender_seq(&raw);
                let len = raw.len() as u64;
                bytes_sent += len;
                max_frame = max_frame.max(len);
                let is_data = raw[1] == FrameType::Data as u8;
                if is_data {
                    count_messages(&raw, &mut tx_per_msg);
                }
                if opts.trace {
                    trace.push(TraceRecord {
                        time_ms: now,
                        node: sender.0,
                        kind: "tx",
                        detail: format!(
                            "type={} seq={} bytes={}",
                            ["data", "ogm", "keyx"][raw[1] as usize],
                            frame_seq,
                            len
                        ),
                    });
                }
                if let Some(adv) = adversary.as_mut() {
                    let apos = (adv.model.x, adv.model.y);
                    if dist(pos[&sender], apos) <= adv.model.range_m {
                        adversary_overhear(
                            adv,
                            &raw,
                            is_data,
                            now,
                            &pos,
                            &mut in_flight,
                            opts.trace.then_some(&mut trace),
                        );
                    }
                }
                for (v, p) in &pos {
                    if *v == sender || dist(pos[&sender], *p) > range {
                        continue;
                    }
                    if loss > 0.0 && link_draw(seed, sender, frame_seq, *v) < loss {
                        continue;
                    }
                    in_flight
                        .entry(now + PROPAGATION_DELAY_MS)
                        .or_default()
                        .push(InFlight {
                            order: (sender.0, frame_seq as u64, 0),
                            receiver: *v,
                            bytes: raw.clone(),
                            injected: None,
                        });
                }
                if opts.transcript {
                    transcript.push(Transmission {
                        time_ms: now,
                        sender,
                        bytes: raw,
                    });
                }
            }
        }
    }

    let adversary_transcript = adversary
        .as_ref()
        .map(|a| a.overheard.clone())
        .unwrap_or_default();
    let report = build_report(
        scenario,
        &engines,
        &tx_per_msg,
        reachable_pairs,
        &latencies_ms,
        &latencies_hops,
        bytes_sent,
        max_frame,
        adversary.as_ref(),
        &plaintexts,
    );
    deliveries_out.sort();
    Ok(RunOutput {
        report,
        trace,
        transcript,
        adversary_transcript,
        plaintexts,
        deliveries: deliveries_out,
        transmissions_per_message: tx_per_msg,
        loop_checks,
        loops,
        engines,
    })
}

fn count_messages(raw: &[u8], tx: &mut BTreeMap<MessageId, u64>) {
    let nht = raw[8] as usize;
    let count = raw[9] as usize;
    let mut at = HEADER_LEN + nht * NHT_ENTRY_LEN;
    for _ in 0..count {
        let id = MessageId {
            origin: NodeId(u16::from_be_bytes([raw[at], raw[at + 1]])),
            seq: u32::from_be_bytes([raw[at + 2], raw[at + 3], raw[at + 4], raw[at + 5]]),
        };
        *tx.entry(id).or_default() += 1;
        at += 32 + raw[at + 15] as usize;
    }
}

fn adversary_overhear(
    adv: &mut AdversaryState,
    raw: &[u8],
    is_data: bool,
    now: u64,
    pos: &BTreeMap<NodeId, (f64, f64)>,
    in_flight: &mut BTreeMap<u64, Vec<InFlight>>,
    trace: Option<&mut Vec<TraceRecord>>,
) {
    adv.overheard.push(raw.to_vec());
    let (bytes, at, tampered) = match adv.model.kind {
        AdversaryKind::Eavesdrop => return,
        _ if !is_data => return,
        AdversaryKind::Tamper => {
            let mut copy = raw.to_vec();
            let Some(id) = tamper_frame(&mut copy, &mut adv.rng) else {
                return;
            };
            // Heard one step after transmission, re-broadcast right away.
            (copy, now + 2 * PROPAGATION_DELAY_MS, Some(id))
        }
        AdversaryKind::Replay => (
            raw.to_vec(),
            now + 2 * PROPAGATION_DELAY_MS + adv.model.delay_ms,
            None,
        ),
    };
    adv.frames_injected += 1;
    adv.messages_injected += raw[9] as u64;
    let seq = adv.next_seq;
    adv.next_seq += 1;
    if let Some(trace) = trace {
        trace.push(TraceRecord {
            time_ms: at - PROPAGATION_DELAY_MS,
            node: 0,
            kind: "inject",
            detail: format!("{:?} bytes={}", adv.model.kind, bytes.len()),
        });
    }
    let apos = (adv.model.x, adv.model.y);
    for (v, p) in pos {
        if dist(apos, *p) <= adv.model.range_m {
            in_flight.entry(at).or_default().push(InFlight {
                order: (0, seq, 0),
                receiver: *v,
                bytes: bytes.clone(),
                injected: Some(InjectedInfo { tampered }),
            });
        }
    }
}

fn record_output(
    now: u64,
    node: NodeId,
    deliveries: &[Delivery],
    diagnostics: &[Diagnostic],
    trace_on: bool,
    trace: &mut Vec<TraceRecord>,
    changed: &mut BTreeSet<NodeId>,
) {
    for d in diagnostics {
        if let Diagnostic::RouteChanged(dest) = d {
            changed.insert(*dest);
        }
    }
    if !trace_on {
        return;
    }
    for d in deliveries {
        trace.push(TraceRecord {
            time_ms: now,
            node: node.0,
            kind: "deliver",
            detail: format!(
                "origin={} seq={} latency_ms={} hops={}",
                d.origin, d.seq, d.latency_ms, d.hops
            ),
        });
    }
    for d in diagnostics {
        let (kind, detail) = match d {
            Diagnostic::Rejected { id, reason } => (
                "reject",
                match id {
                    Some(id) => format!("{reason:?} origin={} seq={}", id.origin, id.seq),
                    None => format!("{reason:?}"),
                },
            ),
            Diagnostic::Duplicate(id) => ("duplicate", format!("origin={} seq={}", id.origin, id.seq)),
            Diagnostic::Forwarded(id) => ("forward", format!("origin={} seq={}", id.origin, id.seq)),
            Diagnostic::Originated(id) => ("originate", format!("seq={}", id.seq)),
            Diagnostic::KeyEstablished => ("key", "established".to_string()),
            Diagnostic::KeyxTimeout => ("key", "timeout".to_string()),
            Diagnostic::UnknownMember(m) => ("key", format!("unknown member {m}")),
            Diagnostic::Orphaned => ("tree", "orphaned".to_string()),
            Diagnostic::RouteChanged(_) => continue,
        };
        trace.push(TraceRecord {
            time_ms: now,
            node: node.0,
            kind,
            detail,
        });
    }
}

#[allow(clippy::too_many_arguments)]
fn build_report(
    scenario: &Scenario,
    engines: &BTreeMap<NodeId, Engine>,
    tx_per_msg: &BTreeMap<MessageId, u64>,
    reachable_pairs: u64,
    latencies_ms: &BTreeMap<NodeId, Vec<u64>>,
    latencies_hops: &[u64],
    bytes_sent: u64,
    max_frame: u64,
    adversary: Option<&AdversaryState>,
    plaintexts: &[[u8; PAYLOAD_LEN]],
) -> MetricsReport {
    let others = engines.len() as u64 - 1;
    let originated: u64 = engines.values().map(|e| e.counters().messages_originated).sum();
    let mut nodes = Vec::new();
    let mut rejected = RejectCounts::default();
    let mut all_latency = Vec::new();
    let mut key_time: Option<u64> = Some(0);
    let mut established = 0;
    for (id, e) in engines {
        let c = e.counters();
        let expected = originated - c.messages_originated;
        let r = RejectCounts::from_counters(c);
        rejected.merge(&r);
        let lat = latencies_ms.get(id).cloned().unwrap_or_default();
        all_latency.extend_from_slice(&lat);
        let at = e.key_exchange().established_at_ms;
        if at.is_some() {
            established += 1;
        }
        key_time = match (key_time, at) {
            (Some(a), Some(b)) => Some(a.max(b)),
            _ => None,
        };
        nodes.push(NodeMetrics {
            id: *id,
            messages_originated: c.messages_originated,
            messages_forwarded: c.messages_forwarded,
            delivered: c.delivered,
            expected,
            delivery_ratio: ratio(c.delivered, expected),
            duplicates: c.duplicates,
            rejected: r,
            key_established_at_ms: at,
            latency_ms: Summary::of(&lat),
            counters: *c,
        });
    }
    let sum = |f: fn(&Counters) -> u64| engines.values().map(|e| f(e.counters())).sum::<u64>();
    let delivered = sum(|c| c.delivered);
    let transmissions: u64 = tx_per_msg.values().sum();
    let expected = originated * others;
    let aggregate = AggregateMetrics {
        messages_originated: originated,
        expected_deliveries: expected,
        reachable_pairs,
        delivered,
        delivery_ratio: ratio(delivered, expected),
        reachable_delivery_ratio: ratio(delivered.min(reachable_pairs), reachable_pairs),
        message_transmissions: transmissions,
        transmissions_per_originated_message: if originated == 0 {
            0.0
        } else {
            transmissions as f64 / originated as f64
        },
        data_frames_sent: sum(|c| c.data_frames_sent),
        ogm_frames_sent: sum(|c| c.ogm_frames_sent),
        keyx_frames_sent: sum(|c| c.keyx_frames_sent),
        bytes_sent,
        max_frame_bytes: max_frame,
        latency_ms: Summary::of(&all_latency),
        latency_hops: Summary::of(latencies_hops),
        duplicates: sum(|c| c.duplicates),
        rejected,
        non_tree_receptions: sum(|c| c.non_tree_receptions),
        telemetry_dropped_no_key: sum(|c| c.telemetry_dropped_no_key),
        key_established_nodes: established,
        key_exchange_time_ms: key_time,
    };
    let adversary = adversary.map(|a| {
        let pt: HashSet<[u8; PAYLOAD_LEN]> = plaintexts.iter().copied().collect();
        let keys: HashSet<[u8; 16]> = engines
            .values()
            .filter_map(|e| e.session_key().map(|k| *k.as_bytes()))
            .collect();
        let (plaintext_leaks, key_leaks) = leak_scan(&a.overheard, &pt, &keys);
        AdversaryOutcome {
            kind: a.model.kind,
            frames_overheard: a.overheard.len() as u64,
            frames_injected: a.frames_injected,
            messages_injected: a.messages_injected,
            accepted: a.accepted,
            rejected: a.rejected,
            duplicates: a.duplicates,
            transcript_bytes: a.overheard.iter().map(|f| f.len() as u64).sum(),
            plaintext_leaks,
            key_leaks,
        }
    });
    MetricsReport {
        scenario: ScenarioInfo {
            nodes: engines.len(),
            mode: scenario.mode,
            seed: scenario.seed,
            duration_ms: scenario.duration_ms,
            loss_probability: scenario.loss_probability,
            radio_range_m: scenario.radio_range_m,
            mobile: matches!(scenario.mobility, Mobility::Waypoint { .. }),
            adversary: scenario.adversary.as_ref().map(|a| a.kind),
        },
        aggregate,
        nodes,
        adversary,
    }
}
