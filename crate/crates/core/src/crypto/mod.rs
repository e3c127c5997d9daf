//! Security envelope for telemetry broadcasts.
//!
//! * X25519 key pairs and pairwise Diffie-Hellman.
//! * A hub-style group exchange ([`group`]) that leaves every member with the
//!   same 128-bit session key.
//! * Encrypt-then-MAC sealing: AES-128-CTR, then HMAC-SHA-256 truncated to 16
//!   bytes over origin, sequence, timestamp and ciphertext. The TTL is left
//!   out of the MAC so relays can decrement it.
//! * Freshness and replay enforcement ([`replay`]).

pub mod group;
pub mod replay;

use std::fmt;

use aes::cipher::{BlockEncrypt, KeyInit, KeyIvInit, StreamCipher};
use aes::Aes128;
use hmac::{Hmac, Mac};
use sha2::{Digest, Sha256};
use subtle::ConstantTimeEq;
use thiserror::Error;
use x25519_dalek::{PublicKey, StaticSecret};

use crate::wire::{NodeId, SealedMessage, MAX_CIPHERTEXT_LEN, TAG_LEN};

pub use group::{KeyExchangeState, KeyxEvent, KeyxStep, Phase, Role};
pub use replay::ReplayState;

type Aes128Ctr = ctr::Ctr128BE<Aes128>;
type HmacSha256 = Hmac<Sha256>;

const WRAP_KEY_LABEL: &[u8] = b"swarmcast/v1/key-wrap";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CryptoError {
    #[error("peer public point yields an all-zero shared secret")]
    LowOrderPoint,
    #[error("plaintext of {0} bytes exceeds 255")]
    PlaintextTooLong(usize),
    #[error("authentication tag mismatch")]
    BadTag,
    #[error("timestamp {timestamp_ms} outside freshness window at {now_ms}")]
    Stale { timestamp_ms: u64, now_ms: u64 },
    #[error("message {origin}/{seq} already consumed")]
    Replayed { origin: NodeId, seq: u32 },
}

#[derive(Clone)]
pub struct KeyPair {
    pub private_scalar: [u8; 32],
    pub public_point: [u8; 32],
}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyPair")
            .field("public_point", &self.public_point)
            .finish_non_exhaustive()
    }
}

/// Builds a key pair from 32 seed bytes. The seed is used as the private
/// scalar; clamping happens inside the scalar multiplication.
pub fn generate_keypair(seed: [u8; 32]) -> KeyPair {
    let secret = StaticSecret::from(seed);
    let public = PublicKey::from(&secret);
    KeyPair {
        private_scalar: seed,
        public_point: public.to_bytes(),
    }
}

pub fn ecdh_shared(my: &KeyPair, their_public: &[u8; 32]) -> Result<[u8; 32], CryptoError> {
    let secret = StaticSecret::from(my.private_scalar);
    let shared = secret.diffie_hellman(&PublicKey::from(*their_public));
    if !shared.was_contributory() {
        return Err(CryptoError::LowOrderPoint);
    }
    Ok(shared.to_bytes())
}

#[derive(Clone, Copy, PartialEq, Eq)]
pub struct SessionKey(pub [u8; 16]);

impl fmt::Debug for SessionKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SessionKey(..)")
    }
}

impl SessionKey {
    pub fn as_bytes(&self) -> &[u8; 16] {
        &self.0
    }
}

/// Wrapping key for the leader-to-member session key transfer.
pub fn derive_wrap_key(pairwise_secret: &[u8; 32]) -> [u8; 16] {
    let mut h = Sha256::new();
    h.update(WRAP_KEY_LABEL);
    h.update(pairwise_secret);
    let digest = h.finalize();
    let mut key = [0u8; 16];
    key.copy_from_slice(&digest[..16]);
    key
}

/// Counter block: origin ‖ origin_seq ‖ timestamp_ms ‖ two zero counter bytes.
pub fn message_nonce(origin: NodeId, origin_seq: u32, timestamp_ms: u64) -> [u8; 16] {
    let mut iv = [0u8; 16];
    iv[0..2].copy_from_slice(&origin.0.to_be_bytes());
    iv[2..6].copy_from_slice(&origin_seq.to_be_bytes());
    iv[6..14].copy_from_slice(&timestamp_ms.to_be_bytes());
    iv
}

fn truncated_hmac(key: &[u8], parts: &[&[u8]]) -> [u8; TAG_LEN] {
    let mut mac = <HmacSha256 as Mac>::new_from_slice(key).expect("HMAC accepts any key length");
    for p in parts {
        mac.update(p);
    }
    let full = mac.finalize().into_bytes();
    let mut tag = [0u8; TAG_LEN];
    tag.copy_from_slice(&full[..TAG_LEN]);
    tag
}

fn message_tag(
    key: &SessionKey,
    origin: NodeId,
    origin_seq: u32,
    timestamp_ms: u64,
    ciphertext: &[u8],
) -> [u8; TAG_LEN] {
    truncated_hmac(
        &key.0,
        &[
            &origin.0.to_be_bytes(),
            &origin_seq.to_be_bytes(),
            &timestamp_ms.to_be_bytes(),
            ciphertext,
        ],
    )
}

fn apply_keystream(key: &SessionKey, iv: &[u8; 16], data: &mut [u8]) {
    let mut cipher = Aes128Ctr::new(&key.0.into(), iv.into());
    cipher.apply_keystream(data);
}

pub fn seal_message(
    key: &SessionKey,
    origin: NodeId,
    origin_seq: u32,
    timestamp_ms: u64,
    ttl: u8,
    plaintext: &[u8],
) -> Result<SealedMessage, CryptoError> {
    if plaintext.len() > MAX_CIPHERTEXT_LEN {
        return Err(CryptoError::PlaintextTooLong(plaintext.len()));
    }
    let mut ciphertext = plaintext.to_vec();
    apply_keystream(
        key,
        &message_nonce(origin, origin_seq, timestamp_ms),
        &mut ciphertext,
    );
    let tag = message_tag(key, origin, origin_seq, timestamp_ms, &ciphertext);
    Ok(SealedMessage {
        origin,
        origin_seq,
        timestamp_ms,
        ttl,
        ciphertext,
        tag,
    })
}

/// Constant-time tag check. Does not touch replay state.
pub fn verify_tag(key: &SessionKey, msg: &SealedMessage) -> bool {
    let expected = message_tag(
        key,
        msg.origin,
        msg.origin_seq,
        msg.timestamp_ms,
        &msg.ciphertext,
    );
    expected.ct_eq(&msg.tag).into()
}

/// Verifies the tag, then freshness, then the replay window; on success the
/// message id is marked consumed and the plaintext returned.
pub fn open_message(
    key: &SessionKey,
    msg: &SealedMessage,
    replay: &mut ReplayState,
    now_ms: u64,
) -> Result<Vec<u8>, CryptoError> {
    if !verify_tag(key, msg) {
        return Err(CryptoError::BadTag);
    }
    replay.check_fresh(msg.timestamp_ms, now_ms)?;
    replay.consume(msg.origin, msg.origin_seq)?;
    let mut plaintext = msg.ciphertext.clone();
    apply_keystream(
        key,
        &message_nonce(msg.origin, msg.origin_seq, msg.timestamp_ms),
        &mut plaintext,
    );
    Ok(plaintext)
}

/// Encrypts a session key for one member and binds it to both ids.
pub fn wrap_session_key(
    wrap_key: &[u8; 16],
    leader: NodeId,
    member: NodeId,
    session: &SessionKey,
) -> ([u8; 16], [u8; 16]) {
    let cipher = Aes128::new(wrap_key.into());
    let mut block = aes::Block::clone_from_slice(&session.0);
    cipher.encrypt_block(&mut block);
    let mut wrapped = [0u8; 16];
    wrapped.copy_from_slice(&block);
    let tag = truncated_hmac(
        wrap_key,
        &[&leader.0.to_be_bytes(), &member.0.to_be_bytes(), &wrapped],
    );
    (wrapped, tag)
}

pub fn unwrap_session_key(
    wrap_key: &[u8; 16],
    leader: NodeId,
    member: NodeId,
    wrapped: &[u8; 16],
    tag: &[u8; 16],
) -> Result<SessionKey, CryptoError> {
    use aes::cipher::BlockDecrypt;
    let expected = truncated_hmac(
        wrap_key,
        &[&leader.0.to_be_bytes(), &member.0.to_be_bytes(), wrapped],
    );
    if !bool::from(expected.ct_eq(tag)) {
        return Err(CryptoError::BadTag);
    }
    let cipher = Aes128::new(wrap_key.into());
    let mut block = aes::Block::clone_from_slice(wrapped);
    cipher.decrypt_block(&mut block);
    let mut key = [0u8; 16];
    key.copy_from_slice(&block);
    Ok(SessionKey(key))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key() -> SessionKey {
        SessionKey([0x42; 16])
    }

    #[test]
    fn seal_21_byte_payload() {
        let m = seal_message(&key(), NodeId(2), 1, 500, 8, &[5u8; 21]).unwrap();
        assert_eq!(m.ciphertext.len(), 21);
        assert_eq!(m.tag.len(), 16);
        assert_ne!(m.ciphertext, vec![5u8; 21]);
    }

    #[test]
    fn seal_is_deterministic() {
        let a = seal_message(&key(), NodeId(2), 7, 900, 8, b"telemetry").unwrap();
        let b = seal_message(&key(), NodeId(2), 7, 900, 8, b"telemetry").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn plaintext_too_long() {
        assert_eq!(
            seal_message(&key(), NodeId(2), 1, 0, 8, &[0u8; 256]),
            Err(CryptoError::PlaintextTooLong(256))
        );
        assert!(seal_message(&key(), NodeId(2), 1, 0, 8, &[0u8; 255]).is_ok());
    }

    #[test]
    fn open_rejects_replay_and_stale() {
        let mut replay = ReplayState::default();
        let m = seal_message(&key(), NodeId(3), 1, 10_000, 8, b"abc").unwrap();
        assert_eq!(open_message(&key(), &m, &mut replay, 10_500).unwrap(), b"abc");
        assert_eq!(
            open_message(&key(), &m, &mut replay, 10_600),
            Err(CryptoError::Replayed {
                origin: NodeId(3),
                seq: 1
            })
        );
        let old = seal_message(&key(), NodeId(3), 2, 7_999, 8, b"abc").unwrap();
        assert!(matches!(
            open_message(&key(), &old, &mut replay, 10_000),
            Err(CryptoError::Stale { .. })
        ));
        let edge = seal_message(&key(), NodeId(3), 3, 8_000, 8, b"abc").unwrap();
        assert!(open_message(&key(), &edge, &mut replay, 10_000).is_ok());
    }

    #[test]
    fn ttl_is_not_authenticated() {
        let mut m = seal_message(&key(), NodeId(3), 1, 0, 8, b"abc").unwrap();
        m.ttl = 1;
        assert!(verify_tag(&key(), &m));
    }

    #[test]
    fn bad_tag_leaves_replay_state_untouched() {
        let mut replay = ReplayState::default();
        let good = seal_message(&key(), NodeId(3), 1, 0, 8, b"abc").unwrap();
        let mut bad = good.clone();
        bad.tag[0] ^= 1;
        assert_eq!(
            open_message(&key(), &bad, &mut replay, 0),
            Err(CryptoError::BadTag)
        );
        assert!(open_message(&key(), &good, &mut replay, 0).is_ok());
    }

    #[test]
    fn zero_point_is_low_order() {
        let kp = generate_keypair([1; 32]);
        assert_eq!(ecdh_shared(&kp, &[0; 32]), Err(CryptoError::LowOrderPoint));
    }

    #[test]
    fn key_wrap_round_trip() {
        let wk = [9u8; 16];
        let s = SessionKey([0x11; 16]);
        let (w, t) = wrap_session_key(&wk, NodeId(1), NodeId(4), &s);
        assert_eq!(
            unwrap_session_key(&wk, NodeId(1), NodeId(4), &w, &t).unwrap(),
            s
        );
        assert_eq!(
            unwrap_session_key(&wk, NodeId(1), NodeId(5), &w, &t),
            Err(CryptoError::BadTag)
        );
    }
}
