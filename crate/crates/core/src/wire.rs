//! Bit-exact wire format for swarm frames.
//!
//! Every frame starts with a fixed 10-byte header:
//!
//! ```text
//! version(1) | frame_type(1) | sender(2) | frame_seq(4) | nht_count(1) | msg_count(1)
//! ```
//!
//! followed by `nht_count` next-hop entries of 5 bytes each and then the
//! type-specific body. All multi-byte integers are big-endian. See
//! `docs/wire-format.md` for the field-by-field reference.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const FRAME_VERSION: u8 = 1;
pub const MTU_BYTES: usize = 1400;
pub const MAX_TTL: u8 = 8;

pub const HEADER_LEN: usize = 10;
pub const NHT_ENTRY_LEN: usize = 5;
pub const TAG_LEN: usize = 16;
/// Fixed part of a sealed message: origin, seq, timestamp, ttl, ct_len and tag.
pub const SEALED_OVERHEAD: usize = 2 + 4 + 8 + 1 + 1 + TAG_LEN;
pub const MAX_CIPHERTEXT_LEN: usize = 255;
pub const OGM_BODY_LEN: usize = 5;
pub const PAYLOAD_LEN: usize = 21;

pub const KEYX_PUBKEY: u8 = 1;
pub const KEYX_WRAPPED: u8 = 2;
pub const KEYX_RELAYED_PUBKEY: u8 = 3;

/// Identifier of a swarm member. Zero is reserved for "unassigned".
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct NodeId(pub u16);

impl NodeId {
    pub const UNASSIGNED: NodeId = NodeId(0);

    pub fn is_assigned(self) -> bool {
        self.0 != 0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl From<u16> for NodeId {
    fn from(v: u16) -> Self {
        NodeId(v)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("encoded frame is {size} bytes, exceeding the {mtu}-byte MTU")]
    SizeExceeded { size: usize, mtu: usize },
    #[error("invariant violation: {0}")]
    InvariantViolation(String),
    #[error("input truncated at offset {offset}")]
    Truncated { offset: usize },
    #[error("unsupported version {version} at offset {offset}")]
    BadVersion { offset: usize, version: u8 },
    #[error("unknown frame type {value} at offset {offset}")]
    BadFrameType { offset: usize, value: u8 },
    #[error("count mismatch at offset {offset}: {detail}")]
    CountMismatch { offset: usize, detail: String },
    #[error("invalid {field} value {value} at offset {offset}")]
    BadValue {
        offset: usize,
        field: &'static str,
        value: u64,
    },
    #[error("{field} out of range: {value}")]
    Range { field: &'static str, value: i64 },
}

impl CodecError {
    /// Offset of the first offending byte, for decode errors.
    pub fn offset(&self) -> Option<usize> {
        match self {
            CodecError::Truncated { offset }
            | CodecError::BadVersion { offset, .. }
            | CodecError::BadFrameType { offset, .. }
            | CodecError::CountMismatch { offset, .. }
            | CodecError::BadValue { offset, .. } => Some(*offset),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[repr(u8)]
pub enum FrameType {
    Data = 0,
    Ogm = 1,
    Keyx = 2,
}

impl FrameType {
    pub fn from_byte(b: u8) -> Option<FrameType> {
        match b {
            0 => Some(FrameType::Data),
            1 => Some(FrameType::Ogm),
            2 => Some(FrameType::Keyx),
            _ => None,
        }
    }
}

/// Plaintext telemetry carried inside a sealed message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TelemetryPayload {
    /// 1e-7 degrees.
    pub latitude: i32,
    /// 1e-7 degrees.
    pub longitude: i32,
    /// Millimeters.
    pub altitude: i32,
    /// cm/s.
    pub velocity_x: i16,
    pub velocity_y: i16,
    pub velocity_z: i16,
    /// Centidegrees in `[0, 36000)`.
    pub heading: u16,
    /// Percent in `[0, 100]`.
    pub battery: u8,
}

impl TelemetryPayload {
    pub fn validate(&self) -> Result<(), CodecError> {
        if self.heading >= 36000 {
            return Err(CodecError::Range {
                field: "heading",
                value: self.heading as i64,
            });
        }
        if self.battery > 100 {
            return Err(CodecError::Range {
                field: "battery",
                value: self.battery as i64,
            });
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<[u8; PAYLOAD_LEN], CodecError> {
        self.validate()?;
        let mut out = [0u8; PAYLOAD_LEN];
        out[0..4].copy_from_slice(&self.latitude.to_be_bytes());
        out[4..8].copy_from_slice(&self.longitude.to_be_bytes());
        out[8..12].copy_from_slice(&self.altitude.to_be_bytes());
        out[12..14].copy_from_slice(&self.velocity_x.to_be_bytes());
        out[14..16].copy_from_slice(&self.velocity_y.to_be_bytes());
        out[16..18].copy_from_slice(&self.velocity_z.to_be_bytes());
        out[18..20].copy_from_slice(&self.heading.to_be_bytes());
        out[20] = self.battery;
        Ok(out)
    }

    pub fn decode(raw: &[u8]) -> Result<TelemetryPayload, CodecError> {
        if raw.len() < PAYLOAD_LEN {
            return Err(CodecError::Truncated { offset: raw.len() });
        }
        if raw.len() > PAYLOAD_LEN {
            return Err(CodecError::CountMismatch {
                offset: PAYLOAD_LEN,
                detail: format!("payload is {} bytes, expected {PAYLOAD_LEN}", raw.len()),
            });
        }
        let mut r = Reader::new(raw);
        let t = TelemetryPayload {
            latitude: r.u32()? as i32,
            longitude: r.u32()? as i32,
            altitude: r.u32()? as i32,
            velocity_x: r.u16()? as i16,
            velocity_y: r.u16()? as i16,
            velocity_z: r.u16()? as i16,
            heading: r.u16()?,
            battery: r.u8()?,
        };
        t.validate()?;
        Ok(t)
    }
}

/// Encrypted, authenticated telemetry from one origin.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SealedMessage {
    pub origin: NodeId,
    pub origin_seq: u32,
    pub timestamp_ms: u64,
    /// Remaining hop budget; relays decrement it, so it is not authenticated.
    pub ttl: u8,
    pub ciphertext: Vec<u8>,
    pub tag: [u8; TAG_LEN],
}

impl SealedMessage {
    pub fn id(&self) -> MessageId {
        MessageId {
            origin: self.origin,
            seq: self.origin_seq,
        }
    }

    pub fn encoded_len(&self) -> usize {
        SEALED_OVERHEAD + self.ciphertext.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MessageId {
    pub origin: NodeId,
    pub seq: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NextHopEntry {
    pub destination: NodeId,
    pub next_hop: NodeId,
    pub hop_count: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OgmBody {
    pub originator: NodeId,
    pub ogm_seq: u16,
    /// Hop count from the originator; 0 when sent by the originator itself.
    pub metric: u8,
}

/// One key-exchange record inside a KEYX frame.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum KeyxRecord {
    /// The frame sender's own public point.
    PubKey { point: [u8; 32] },
    /// Session key wrapped by the leader for one member.
    Wrapped {
        member: NodeId,
        wrapped: [u8; 16],
        tag: [u8; 16],
    },
    /// Another node's public point, relayed on its behalf.
    RelayedPubKey { owner: NodeId, point: [u8; 32] },
}

impl KeyxRecord {
    pub fn encoded_len(&self) -> usize {
        match self {
            KeyxRecord::PubKey { .. } => 1 + 32,
            KeyxRecord::Wrapped { .. } => 1 + 2 + 16 + 16,
            KeyxRecord::RelayedPubKey { .. } => 1 + 2 + 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum FrameBody {
    Data(Vec<SealedMessage>),
    Ogm(OgmBody),
    Keyx(Vec<KeyxRecord>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Frame {
    /// The transmitting node, which for relayed messages differs from their origins.
    pub sender: NodeId,
    pub frame_seq: u32,
    pub next_hop_table: Vec<NextHopEntry>,
    pub body: FrameBody,
}

impl Frame {
    pub fn frame_type(&self) -> FrameType {
        match self.body {
            FrameBody::Data(_) => FrameType::Data,
            FrameBody::Ogm(_) => FrameType::Ogm,
            FrameBody::Keyx(_) => FrameType::Keyx,
        }
    }

    /// Size of the encoded frame, computed from the layout without encoding.
    pub fn encoded_len(&self) -> usize {
        let body = match &self.body {
            FrameBody::Data(msgs) => msgs.iter().map(SealedMessage::encoded_len).sum(),
            FrameBody::Ogm(_) => OGM_BODY_LEN,
            FrameBody::Keyx(recs) => recs.iter().map(KeyxRecord::encoded_len).sum(),
        };
        HEADER_LEN + NHT_ENTRY_LEN * self.next_hop_table.len() + body
    }

    pub fn encode(&self) -> Result<Vec<u8>, CodecError> {
        self.encode_with_mtu(MTU_BYTES)
    }

    pub fn encode_with_mtu(&self, mtu: usize) -> Result<Vec<u8>, CodecError> {
        self.check_invariants()?;
        let size = self.encoded_len();
        if size > mtu {
            return Err(CodecError::SizeExceeded { size, mtu });
        }

        let mut out = Vec::with_capacity(size);
        out.push(FRAME_VERSION);
        out.push(self.frame_type() as u8);
        out.extend_from_slice(&self.sender.0.to_be_bytes());
        out.extend_from_slice(&self.frame_seq.to_be_bytes());
        out.push(self.next_hop_table.len() as u8);
        let msg_count = match &self.body {
            FrameBody::Data(msgs) => msgs.len(),
            FrameBody::Ogm(_) => 0,
            FrameBody::Keyx(recs) => recs.len(),
        };
        out.push(msg_count as u8);

        for e in &self.next_hop_table {
            out.extend_from_slice(&e.destination.0.to_be_bytes());
            out.extend_from_slice(&e.next_hop.0.to_be_bytes());
            out.push(e.hop_count);
        }

        match &self.body {
            FrameBody::Data(msgs) => {
                for m in msgs {
                    out.extend_from_slice(&m.origin.0.to_be_bytes());
                    out.extend_from_slice(&m.origin_seq.to_be_bytes());
                    out.extend_from_slice(&m.timestamp_ms.to_be_bytes());
                    out.push(m.ttl);
                    out.push(m.ciphertext.len() as u8);
                    out.extend_from_slice(&m.ciphertext);
                    out.extend_from_slice(&m.tag);
                }
            }
            FrameBody::Ogm(ogm) => {
                out.extend_from_slice(&ogm.originator.0.to_be_bytes());
                out.extend_from_slice(&ogm.ogm_seq.to_be_bytes());
                out.push(ogm.metric);
            }
            FrameBody::Keyx(recs) => {
                for r in recs {
                    match r {
                        KeyxRecord::PubKey { point } => {
                            out.push(KEYX_PUBKEY);
                            out.extend_from_slice(point);
                        }
                        KeyxRecord::Wrapped {
                            member,
                            wrapped,
                            tag,
                        } => {
                            out.push(KEYX_WRAPPED);
                            out.extend_from_slice(&member.0.to_be_bytes());
                            out.extend_from_slice(wrapped);
                            out.extend_from_slice(tag);
                        }
                        KeyxRecord::RelayedPubKey { owner, point } => {
                            out.push(KEYX_RELAYED_PUBKEY);
                            out.extend_from_slice(&owner.0.to_be_bytes());
                            out.extend_from_slice(point);
                        }
                    }
                }
            }
        }
        debug_assert_eq!(out.len(), size);
        Ok(out)
    }

    fn check_invariants(&self) -> Result<(), CodecError> {
        let violation = |s: String| Err(CodecError::InvariantViolation(s));
        if !self.sender.is_assigned() {
            return violation("sender id 0 is reserved".into());
        }
        if self.next_hop_table.len() > u8::MAX as usize {
            return violation(format!(
                "{} next-hop entries exceed the 255 limit",
                self.next_hop_table.len()
            ));
        }
        for e in &self.next_hop_table {
            if !e.destination.is_assigned() || !e.next_hop.is_assigned() {
                return violation("next-hop entry uses reserved id 0".into());
            }
            if e.destination == self.sender {
                return violation(format!("next-hop entry advertises the sender {}", self.sender));
            }
            if e.hop_count == 0 {
                return violation("next-hop entry with hop_count 0".into());
            }
        }
        match &self.body {
            FrameBody::Data(msgs) => {
                if msgs.is_empty() {
                    return violation("DATA frame without messages".into());
                }
                if msgs.len() > u8::MAX as usize {
                    return violation(format!("{} messages exceed the 255 limit", msgs.len()));
                }
                for m in msgs {
                    if !m.origin.is_assigned() {
                        return violation("message origin id 0 is reserved".into());
                    }
                    if m.ciphertext.len() > MAX_CIPHERTEXT_LEN {
                        return violation(format!(
                            "ciphertext of {} bytes exceeds {MAX_CIPHERTEXT_LEN}",
                            m.ciphertext.len()
                        ));
                    }
                    if m.ttl > MAX_TTL {
                        return violation(format!("ttl {} exceeds {MAX_TTL}", m.ttl));
                    }
                }
            }
            FrameBody::Ogm(ogm) => {
                if !ogm.originator.is_assigned() {
                    return violation("OGM originator id 0 is reserved".into());
                }
            }
            FrameBody::Keyx(recs) => {
                if !self.next_hop_table.is_empty() {
                    return violation("KEYX frames carry no next-hop table".into());
                }
                if recs.is_empty() || recs.len() > u8::MAX as usize {
                    return violation(format!("KEYX frame with {} records", recs.len()));
                }
                for r in recs {
                    let id = match r {
                        KeyxRecord::PubKey { .. } => self.sender,
                        KeyxRecord::Wrapped { member, .. } => *member,
                        KeyxRecord::RelayedPubKey { owner, .. } => *owner,
                    };
                    if !id.is_assigned() {
                        return violation("KEYX record names reserved id 0".into());
                    }
                }
            }
        }
        Ok(())
    }

    /// Decodes a frame, accepting arbitrary input. Every successfully decoded
    /// frame re-encodes to exactly the input bytes.
    pub fn decode(raw: &[u8]) -> Result<Frame, CodecError> {
        let mut r = Reader::new(raw);
        let version = r.u8()?;
        if version != FRAME_VERSION {
            return Err(CodecError::BadVersion { offset: 0, version });
        }
        let type_byte = r.u8()?;
        let frame_type = FrameType::from_byte(type_byte).ok_or(CodecError::BadFrameType {
            offset: 1,
            value: type_byte,
        })?;
        let sender = r.node_id("sender")?;
        let frame_seq = r.u32()?;
        let nht_count = r.u8()? as usize;
        let msg_count_offset = r.pos;
        let msg_count = r.u8()? as usize;

        match frame_type {
            FrameType::Data if msg_count == 0 => {
                return Err(CodecError::CountMismatch {
                    offset: msg_count_offset,
                    detail: "DATA frame declares zero messages".into(),
                })
            }
            FrameType::Ogm if msg_count != 0 => {
                return Err(CodecError::CountMismatch {
                    offset: msg_count_offset,
                    detail: format!("OGM frame declares {msg_count} messages"),
                })
            }
            FrameType::Keyx if msg_count == 0 => {
                return Err(CodecError::CountMismatch {
                    offset: msg_count_offset,
                    detail: "KEYX frame declares zero records".into(),
                })
            }
            FrameType::Keyx if nht_count != 0 => {
                return Err(CodecError::CountMismatch {
                    offset: msg_count_offset - 1,
                    detail: "KEYX frame declares a next-hop table".into(),
                })
            }
            _ => {}
        }

        let mut next_hop_table = Vec::with_capacity(nht_count);
        for _ in 0..nht_count {
            let dest_offset = r.pos;
            let destination = r.node_id("destination")?;
            if destination == sender {
                return Err(CodecError::BadValue {
                    offset: dest_offset,
                    field: "destination",
                    value: destination.0 as u64,
                });
            }
            let next_hop = r.node_id("next_hop")?;
            let hc_offset = r.pos;
            let hop_count = r.u8()?;
            if hop_count == 0 {
                return Err(CodecError::BadValue {
                    offset: hc_offset,
                    field: "hop_count",
                    value: 0,
                });
            }
            next_hop_table.push(NextHopEntry {
                destination,
                next_hop,
                hop_count,
            });
        }

        let body = match frame_type {
            FrameType::Data => {
                let mut msgs = Vec::with_capacity(msg_count);
                for _ in 0..msg_count {
                    let origin = r.node_id("origin")?;
                    let origin_seq = r.u32()?;
                    let timestamp_ms = r.u64()?;
                    let ttl_offset = r.pos;
                    let ttl = r.u8()?;
                    if ttl > MAX_TTL {
                        return Err(CodecError::BadValue {
                            offset: ttl_offset,
                            field: "ttl",
                            value: ttl as u64,
                        });
                    }
                    let ct_len = r.u8()? as usize;
                    let ciphertext = r.bytes(ct_len)?.to_vec();
                    let tag = r.array::<TAG_LEN>()?;
                    msgs.push(SealedMessage {
                        origin,
                        origin_seq,
                        timestamp_ms,
                        ttl,
                        ciphertext,
                        tag,
                    });
                }
                FrameBody::Data(msgs)
            }
            FrameType::Ogm => FrameBody::Ogm(OgmBody {
                originator: r.node_id("originator")?,
                ogm_seq: r.u16()?,
                metric: r.u8()?,
            }),
            FrameType::Keyx => {
                let mut recs = Vec::with_capacity(msg_count);
                for _ in 0..msg_count {
                    let phase_offset = r.pos;
                    let rec = match r.u8()? {
                        KEYX_PUBKEY => KeyxRecord::PubKey {
                            point: r.array::<32>()?,
                        },
                        KEYX_WRAPPED => KeyxRecord::Wrapped {
                            member: r.node_id("member")?,
                            wrapped: r.array::<16>()?,
                            tag: r.array::<16>()?,
                        },
                        KEYX_RELAYED_PUBKEY => KeyxRecord::RelayedPubKey {
                            owner: r.node_id("owner")?,
                            point: r.array::<32>()?,
                        },
                        phase => {
                            return Err(CodecError::BadValue {
                                offset: phase_offset,
                                field: "keyx phase",
                                value: phase as u64,
                            })
                        }
                    };
                    recs.push(rec);
                }
                FrameBody::Keyx(recs)
            }
        };

        if r.pos != raw.len() {
            return Err(CodecError::CountMismatch {
                offset: r.pos,
                detail: format!("{} trailing bytes after declared content", raw.len() - r.pos),
            });
        }

        Ok(Frame {
            sender,
            frame_seq,
            next_hop_table,
            body,
        })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn bytes(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        if self.buf.len() - self.pos < n {
            return Err(CodecError::Truncated {
                offset: self.buf.len(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], CodecError> {
        let mut a = [0u8; N];
        a.copy_from_slice(self.bytes(N)?);
        Ok(a)
    }

    fn u8(&mut self) -> Result<u8, CodecError> {
        Ok(self.bytes(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CodecError> {
        Ok(u16::from_be_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32, CodecError> {
        Ok(u32::from_be_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64, CodecError> {
        Ok(u64::from_be_bytes(self.array()?))
    }

    fn node_id(&mut self, field: &'static str) -> Result<NodeId, CodecError> {
        let offset = self.pos;
        let id = NodeId(self.u16()?);
        if !id.is_assigned() {
            return Err(CodecError::BadValue {
                offset,
                field,
                value: 0,
            });
        }
        Ok(id)
    }
}
