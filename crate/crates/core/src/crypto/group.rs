//! Multi-party session key agreement over pairwise ECDH.
//!
//! The lowest roster id acts as leader. Every node floods its public point;
//! once the leader holds all points it draws a random session key and sends
//! each member a copy wrapped under their pairwise key. If some points are
//! still missing after two retry periods the leader goes ahead with the
//! members it has, and wraps the same key for latecomers as they appear. Nodes that are not yet
//! established re-announce their point every `retry_ms`; a node hearing such
//! a re-announcement answers with everything it knows. Requests for a wrapped
//! key travel toward the leader, and a member that passed one on repeats it
//! every retry period until the key comes back through it.

use std::collections::{BTreeMap, BTreeSet};

use rand::RngCore;
use serde::Serialize;
use thiserror::Error;

use super::{
    derive_wrap_key, ecdh_shared, unwrap_session_key, wrap_session_key, KeyPair, SessionKey,
};
use crate::wire::{KeyxRecord, NodeId};

pub const DEFAULT_KEYX_RETRY_MS: u64 = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Role {
    Leader,
    Member,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Phase {
    Idle,
    AwaitingPubkeys,
    AwaitingSessionKey,
    Established,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum KeyxError {
    #[error("node {0} is not in the roster")]
    UnknownMember(NodeId),
}

#[derive(Debug, Clone, Copy)]
pub enum KeyxEvent<'a> {
    Start {
        now_ms: u64,
    },
    Frame {
        sender: NodeId,
        records: &'a [KeyxRecord],
        now_ms: u64,
    },
    Tick {
        now_ms: u64,
    },
}

/// Records to broadcast in response to one event.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KeyxStep {
    pub broadcast: Vec<KeyxRecord>,
    /// The phase deadline passed and our own point was re-announced.
    pub timed_out: bool,
}

#[derive(Debug, Clone)]
pub struct KeyExchangeState {
    me: NodeId,
    leader: NodeId,
    roster: BTreeSet<NodeId>,
    keypair: KeyPair,
    pub role: Role,
    pub phase: Phase,
    pub known_pubkeys: BTreeMap<NodeId, [u8; 32]>,
    pub pairwise_secrets: BTreeMap<NodeId, [u8; 32]>,
    wrapped: BTreeMap<NodeId, ([u8; 16], [u8; 16])>,
    session_key: Option<SessionKey>,
    retry_ms: u64,
    deadline_ms: u64,
    grace_deadline_ms: u64,
    served: BTreeMap<NodeId, u64>,
    /// Owners whose wrapped key we asked for on someone else's behalf.
    pending: BTreeSet<NodeId>,
    last_response_ms: Option<u64>,
    pub established_at_ms: Option<u64>,
    pub timeouts: u64,
    pub bad_wraps: u64,
}

impl KeyExchangeState {
    /// `roster` must contain `me`.
    pub fn new(me: NodeId, roster: BTreeSet<NodeId>, keypair: KeyPair, retry_ms: u64) -> Self {
        let leader = *roster.iter().next().expect("roster is non-empty");
        let role = if leader == me {
            Role::Leader
        } else {
            Role::Member
        };
        let mut known_pubkeys = BTreeMap::new();
        known_pubkeys.insert(me, keypair.public_point);
        KeyExchangeState {
            me,
            leader,
            roster,
            keypair,
            role,
            phase: Phase::Idle,
            known_pubkeys,
            pairwise_secrets: BTreeMap::new(),
            wrapped: BTreeMap::new(),
            session_key: None,
            retry_ms,
            deadline_ms: 0,
            grace_deadline_ms: 0,
            served: BTreeMap::new(),
            pending: BTreeSet::new(),
            last_response_ms: None,
            established_at_ms: None,
            timeouts: 0,
            bad_wraps: 0,
        }
    }

    pub fn leader(&self) -> NodeId {
        self.leader
    }

    pub fn public_point(&self) -> [u8; 32] {
        self.keypair.public_point
    }

    pub fn session_key(&self) -> Option<&SessionKey> {
        self.session_key.as_ref()
    }

    pub fn is_established(&self) -> bool {
        self.phase == Phase::Established
    }

    pub fn handle(
        &mut self,
        event: KeyxEvent<'_>,
        rng: &mut dyn RngCore,
    ) -> Result<KeyxStep, KeyxError> {
        let mut step = KeyxStep::default();
        match event {
            KeyxEvent::Start { now_ms } => {
                if self.phase != Phase::Idle {
                    return Ok(step);
                }
                self.phase = match self.role {
                    Role::Leader => Phase::AwaitingPubkeys,
                    Role::Member => Phase::AwaitingSessionKey,
                };
                self.deadline_ms = now_ms + self.retry_ms;
                self.grace_deadline_ms = now_ms + 2 * self.retry_ms;
                if self.roster.len() > 1 {
                    step.broadcast.push(KeyxRecord::PubKey {
                        point: self.keypair.public_point,
                    });
                }
                self.progress(now_ms, rng, &mut step);
            }
            KeyxEvent::Tick { now_ms } => {
                if matches!(self.phase, Phase::AwaitingPubkeys | Phase::AwaitingSessionKey)
                    && now_ms >= self.deadline_ms
                {
                    self.timeouts += 1;
                    self.deadline_ms = now_ms + self.retry_ms;
                    step.timed_out = true;
                    step.broadcast.push(KeyxRecord::PubKey {
                        point: self.keypair.public_point,
                    });
                }
                self.repeat_requests(now_ms, &mut step);
                self.progress(now_ms, rng, &mut step);
            }
            KeyxEvent::Frame {
                sender,
                records,
                now_ms,
            } => {
                self.check_roster(sender, records)?;
                let mut respond = false;
                for rec in records {
                    match rec {
                        KeyxRecord::PubKey { point } => {
                            if self.learn_pubkey(sender, point) {
                                self.relay_pubkey(sender, point, &mut step);
                            } else if sender != self.me
                                && self.known_pubkeys.get(&sender) == Some(point)
                            {
                                // A re-announcement means the sender is stuck.
                                respond = true;
                                self.serve_request(sender, now_ms, &mut step);
                            }
                        }
                        KeyxRecord::RelayedPubKey { owner, point } => {
                            if self.learn_pubkey(*owner, point) {
                                self.relay_pubkey(*owner, point, &mut step);
                            } else if self.known_pubkeys.get(owner) == Some(point) {
                                self.serve_request(*owner, now_ms, &mut step);
                            }
                        }
                        KeyxRecord::Wrapped {
                            member,
                            wrapped,
                            tag,
                        } => {
                            if self.role == Role::Leader || self.wrapped.contains_key(member) {
                                continue;
                            }
                            self.wrapped.insert(*member, (*wrapped, *tag));
                            self.pending.remove(member);
                            if *member != self.me {
                                step.broadcast.push(rec.clone());
                            }
                        }
                    }
                }
                if respond && self.phase != Phase::Idle && self.may_respond(now_ms) {
                    self.last_response_ms = Some(now_ms);
                    step.broadcast.extend(self.everything_known());
                }
                self.progress(now_ms, rng, &mut step);
            }
        }
        Ok(step)
    }

    fn check_roster(&self, sender: NodeId, records: &[KeyxRecord]) -> Result<(), KeyxError> {
        if !self.roster.contains(&sender) {
            return Err(KeyxError::UnknownMember(sender));
        }
        for rec in records {
            let id = match rec {
                KeyxRecord::PubKey { .. } => sender,
                KeyxRecord::RelayedPubKey { owner, .. } => *owner,
                KeyxRecord::Wrapped { member, .. } => *member,
            };
            if !self.roster.contains(&id) {
                return Err(KeyxError::UnknownMember(id));
            }
        }
        Ok(())
    }

    /// Someone may still be missing `owner`'s wrapped key: hand it out if we
    /// hold it, otherwise pass the request on toward the leader.
    fn serve_request(&mut self, owner: NodeId, now_ms: u64, step: &mut KeyxStep) {
        if owner == self.me || self.roster.len() <= 2 {
            return;
        }
        if self
            .served
            .get(&owner)
            .is_some_and(|t| now_ms < t + self.retry_ms)
        {
            return;
        }
        self.served.insert(owner, now_ms);
        match self.wrapped.get(&owner) {
            Some((wrapped, tag)) => step.broadcast.push(KeyxRecord::Wrapped {
                member: owner,
                wrapped: *wrapped,
                tag: *tag,
            }),
            None if self.role == Role::Member => {
                self.pending.insert(owner);
                step.broadcast.push(KeyxRecord::RelayedPubKey {
                    owner,
                    point: self.known_pubkeys[&owner],
                });
            }
            None => {}
        }
    }

    fn repeat_requests(&mut self, now_ms: u64, step: &mut KeyxStep) {
        let due: Vec<NodeId> = self
            .pending
            .iter()
            .filter(|o| self.served.get(o).is_none_or(|t| now_ms >= t + self.retry_ms))
            .copied()
            .collect();
        for owner in due {
            self.served.insert(owner, now_ms);
            step.broadcast.push(KeyxRecord::RelayedPubKey {
                owner,
                point: self.known_pubkeys[&owner],
            });
        }
    }

    fn may_respond(&self, now_ms: u64) -> bool {
        self.last_response_ms
            .is_none_or(|t| now_ms >= t + self.retry_ms)
    }

    /// Returns true when `owner`'s point was not known before.
    fn learn_pubkey(&mut self, owner: NodeId, point: &[u8; 32]) -> bool {
        if owner == self.me || self.known_pubkeys.contains_key(&owner) {
            return false;
        }
        let needs_secret = match self.role {
            Role::Leader => true,
            Role::Member => owner == self.leader,
        };
        if needs_secret {
            match ecdh_shared(&self.keypair, point) {
                Ok(secret) => {
                    self.pairwise_secrets.insert(owner, secret);
                }
                Err(_) => return false,
            }
        }
        self.known_pubkeys.insert(owner, *point);
        true
    }

    fn relay_pubkey(&self, owner: NodeId, point: &[u8; 32], step: &mut KeyxStep) {
        // With only two members nobody else could need it.
        if self.roster.len() > 2 {
            step.broadcast.push(KeyxRecord::RelayedPubKey {
                owner,
                point: *point,
            });
        }
    }

    fn everything_known(&self) -> Vec<KeyxRecord> {
        let mut out: Vec<KeyxRecord> = self
            .known_pubkeys
            .iter()
            .map(|(owner, point)| KeyxRecord::RelayedPubKey {
                owner: *owner,
                point: *point,
            })
            .collect();
        out.extend(
            self.wrapped
                .iter()
                .map(|(member, (wrapped, tag))| KeyxRecord::Wrapped {
                    member: *member,
                    wrapped: *wrapped,
                    tag: *tag,
                }),
        );
        out
    }

    fn wrap_for_new_members(&mut self, step: &mut KeyxStep) {
        let Some(session) = self.session_key else {
            return;
        };
        let pending: Vec<NodeId> = self
            .pairwise_secrets
            .keys()
            .filter(|m| !self.wrapped.contains_key(*m))
            .copied()
            .collect();
        for member in pending {
            let wrap_key = derive_wrap_key(&self.pairwise_secrets[&member]);
            let (wrapped, tag) = wrap_session_key(&wrap_key, self.me, member, &session);
            self.wrapped.insert(member, (wrapped, tag));
            step.broadcast.push(KeyxRecord::Wrapped {
                member,
                wrapped,
                tag,
            });
        }
    }

    fn progress(&mut self, now_ms: u64, rng: &mut dyn RngCore, step: &mut KeyxStep) {
        match (self.role, self.phase) {
            (Role::Leader, Phase::AwaitingPubkeys) => {
                let complete = self.roster.iter().all(|n| self.known_pubkeys.contains_key(n));
                let partial = now_ms >= self.grace_deadline_ms && self.known_pubkeys.len() > 1;
                if !complete && !partial {
                    return;
                }
                let mut key = [0u8; 16];
                rng.fill_bytes(&mut key);
                self.session_key = Some(SessionKey(key));
                self.phase = Phase::Established;
                self.established_at_ms = Some(now_ms);
                self.wrap_for_new_members(step);
            }
            (Role::Leader, Phase::Established) => self.wrap_for_new_members(step),
            (Role::Member, Phase::AwaitingSessionKey) => {
                let (Some((wrapped, tag)), Some(secret)) = (
                    self.wrapped.get(&self.me),
                    self.pairwise_secrets.get(&self.leader),
                ) else {
                    return;
                };
                let wrap_key = derive_wrap_key(secret);
                match unwrap_session_key(&wrap_key, self.leader, self.me, wrapped, tag) {
                    Ok(session) => {
                        self.session_key = Some(session);
                        self.phase = Phase::Established;
                        self.established_at_ms = Some(now_ms);
                    }
                    Err(_) => {
                        self.bad_wraps += 1;
                        self.wrapped.remove(&self.me);
                    }
                }
            }
            _ => {}
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::generate_keypair;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn node(id: u16, roster: &[u16]) -> KeyExchangeState {
        KeyExchangeState::new(
            NodeId(id),
            roster.iter().map(|r| NodeId(*r)).collect(),
            generate_keypair([id as u8; 32]),
            DEFAULT_KEYX_RETRY_MS,
        )
    }

    #[test]
    fn two_party_exchange_in_three_messages() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut a = node(1, &[1, 2]);
        let mut b = node(2, &[1, 2]);
        let sa = a.handle(KeyxEvent::Start { now_ms: 0 }, &mut rng).unwrap();
        let sb = b.handle(KeyxEvent::Start { now_ms: 0 }, &mut rng).unwrap();
        assert_eq!(sa.broadcast.len(), 1);
        assert_eq!(sb.broadcast.len(), 1);

        let ra = b
            .handle(
                KeyxEvent::Frame {
                    sender: NodeId(1),
                    records: &sa.broadcast,
                    now_ms: 1,
                },
                &mut rng,
            )
            .unwrap();
        assert!(ra.broadcast.is_empty());
        let dist = a
            .handle(
                KeyxEvent::Frame {
                    sender: NodeId(2),
                    records: &sb.broadcast,
                    now_ms: 1,
                },
                &mut rng,
            )
            .unwrap();
        assert_eq!(dist.broadcast.len(), 1);
        assert!(a.is_established());
        let last = b
            .handle(
                KeyxEvent::Frame {
                    sender: NodeId(1),
                    records: &dist.broadcast,
                    now_ms: 2,
                },
                &mut rng,
            )
            .unwrap();
        assert!(last.broadcast.is_empty());
        assert!(b.is_established());
        assert_eq!(a.session_key(), b.session_key());
    }

    #[test]
    fn single_member_roster_establishes_alone() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut a = node(3, &[3]);
        let s = a.handle(KeyxEvent::Start { now_ms: 0 }, &mut rng).unwrap();
        assert!(s.broadcast.is_empty());
        assert!(a.is_established());
    }

    #[test]
    fn unknown_member_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut a = node(1, &[1, 2]);
        a.handle(KeyxEvent::Start { now_ms: 0 }, &mut rng).unwrap();
        let recs = [KeyxRecord::PubKey { point: [5; 32] }];
        assert_eq!(
            a.handle(
                KeyxEvent::Frame {
                    sender: NodeId(9),
                    records: &recs,
                    now_ms: 1
                },
                &mut rng
            ),
            Err(KeyxError::UnknownMember(NodeId(9)))
        );
        let recs = [KeyxRecord::RelayedPubKey {
            owner: NodeId(9),
            point: [5; 32],
        }];
        assert_eq!(
            a.handle(
                KeyxEvent::Frame {
                    sender: NodeId(2),
                    records: &recs,
                    now_ms: 1
                },
                &mut rng
            ),
            Err(KeyxError::UnknownMember(NodeId(9)))
        );
    }

    #[test]
    fn timeout_reannounces() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut b = node(2, &[1, 2]);
        b.handle(KeyxEvent::Start { now_ms: 0 }, &mut rng).unwrap();
        let s = b.handle(KeyxEvent::Tick { now_ms: 999 }, &mut rng).unwrap();
        assert!(!s.timed_out);
        let s = b.handle(KeyxEvent::Tick { now_ms: 1000 }, &mut rng).unwrap();
        assert!(s.timed_out);
        assert_eq!(s.broadcast.len(), 1);
        assert_eq!(b.timeouts, 1);
    }

    #[test]
    fn tampered_wrap_is_discarded() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut a = node(1, &[1, 2]);
        let mut b = node(2, &[1, 2]);
        let sa = a.handle(KeyxEvent::Start { now_ms: 0 }, &mut rng).unwrap();
        let sb = b.handle(KeyxEvent::Start { now_ms: 0 }, &mut rng).unwrap();
        b.handle(
            KeyxEvent::Frame {
                sender: NodeId(1),
                records: &sa.broadcast,
                now_ms: 1,
            },
            &mut rng,
        )
        .unwrap();
        let mut dist = a
            .handle(
                KeyxEvent::Frame {
                    sender: NodeId(2),
                    records: &sb.broadcast,
                    now_ms: 1,
                },
                &mut rng,
            )
            .unwrap();
        if let KeyxRecord::Wrapped { wrapped, .. } = &mut dist.broadcast[0] {
            wrapped[3] ^= 0x10;
        }
        b.handle(
            KeyxEvent::Frame {
                sender: NodeId(1),
                records: &dist.broadcast,
                now_ms: 2,
            },
            &mut rng,
        )
        .unwrap();
        assert!(!b.is_established());
        assert_eq!(b.bad_wraps, 1);
    }

    #[test]
    fn leader_proceeds_without_missing_members() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut a = node(1, &[1, 2, 3]);
        let mut b = node(2, &[1, 2, 3]);
        a.handle(KeyxEvent::Start { now_ms: 0 }, &mut rng).unwrap();
        let sb = b.handle(KeyxEvent::Start { now_ms: 0 }, &mut rng).unwrap();
        a.handle(
            KeyxEvent::Frame {
                sender: NodeId(2),
                records: &sb.broadcast,
                now_ms: 1,
            },
            &mut rng,
        )
        .unwrap();
        assert!(!a.is_established());
        let s = a.handle(KeyxEvent::Tick { now_ms: 1999 }, &mut rng).unwrap();
        assert!(s.broadcast.iter().all(|r| matches!(r, KeyxRecord::PubKey { .. })));
        let s = a.handle(KeyxEvent::Tick { now_ms: 2000 }, &mut rng).unwrap();
        assert!(a.is_established());
        let wrapped: Vec<_> = s
            .broadcast
            .iter()
            .filter(|r| matches!(r, KeyxRecord::Wrapped { .. }))
            .collect();
        assert_eq!(wrapped.len(), 1);

        // Node 3 shows up late and still gets the same key.
        let mut c = node(3, &[1, 2, 3]);
        let sc = c.handle(KeyxEvent::Start { now_ms: 2500 }, &mut rng).unwrap();
        let late = a
            .handle(
                KeyxEvent::Frame {
                    sender: NodeId(3),
                    records: &sc.broadcast,
                    now_ms: 2501,
                },
                &mut rng,
            )
            .unwrap();
        let sa = [KeyxRecord::PubKey {
            point: a.public_point(),
        }];
        c.handle(
            KeyxEvent::Frame {
                sender: NodeId(1),
                records: &sa,
                now_ms: 2502,
            },
            &mut rng,
        )
        .unwrap();
        let for_c: Vec<KeyxRecord> = late
            .broadcast
            .into_iter()
            .filter(|r| matches!(r, KeyxRecord::Wrapped { member, .. } if *member == NodeId(3)))
            .collect();
        assert_eq!(for_c.len(), 1);
        c.handle(
            KeyxEvent::Frame {
                sender: NodeId(1),
                records: &for_c,
                now_ms: 2503,
            },
            &mut rng,
        )
        .unwrap();
        assert_eq!(c.session_key(), a.session_key());
    }

    #[test]
    fn relayed_request_repeats_until_answered() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut b = node(2, &[1, 2, 3]);
        let c = node(3, &[1, 2, 3]);
        b.handle(KeyxEvent::Start { now_ms: 0 }, &mut rng).unwrap();
        let announce = [KeyxRecord::PubKey {
            point: c.public_point(),
        }];
        let frame = |now_ms| KeyxEvent::Frame {
            sender: NodeId(3),
            records: &announce,
            now_ms,
        };
        let asks = |step: &KeyxStep| {
            step.broadcast
                .iter()
                .any(|r| matches!(r, KeyxRecord::RelayedPubKey { owner, .. } if *owner == NodeId(3)))
        };
        // First sighting is relayed as news, the second one as a request.
        assert!(asks(&b.handle(frame(10), &mut rng).unwrap()));
        assert!(asks(&b.handle(frame(1010), &mut rng).unwrap()));
        assert!(!asks(&b.handle(KeyxEvent::Tick { now_ms: 1500 }, &mut rng).unwrap()));
        assert!(asks(&b.handle(KeyxEvent::Tick { now_ms: 2010 }, &mut rng).unwrap()));

        let answer = [KeyxRecord::Wrapped {
            member: NodeId(3),
            wrapped: [7; 16],
            tag: [8; 16],
        }];
        b.handle(
            KeyxEvent::Frame {
                sender: NodeId(1),
                records: &answer,
                now_ms: 2100,
            },
            &mut rng,
        )
        .unwrap();
        assert!(!asks(&b.handle(KeyxEvent::Tick { now_ms: 3100 }, &mut rng).unwrap()));
    }
}
