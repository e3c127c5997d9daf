mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use swarmcast::crypto::{open_message, seal_message, CryptoError, ReplayState, SessionKey};
use swarmcast::forwarding::ForwardingMode;
use swarmcast::routing::OGM_INTERVAL_MS;
use swarmcast::sim::{run, run_detailed, RunOptions, DRAIN_MS};
use swarmcast::wire::{Frame, FrameBody, KeyxRecord, NodeId};

fn frame(seed: u64) -> Frame {
    common::random_frame(&mut ChaCha8Rng::seed_from_u64(seed))
}

/// Encoded size computed from the layout rather than the encoder.
fn size_law(f: &Frame) -> usize {
    10 + 5 * f.next_hop_table.len()
        + match &f.body {
            FrameBody::Data(m) => m.iter().map(|m| 16 + m.ciphertext.len() + 16).sum(),
            FrameBody::Ogm(_) => 5,
            FrameBody::Keyx(r) => r
                .iter()
                .map(|r| match r {
                    KeyxRecord::PubKey { .. } => 33,
                    KeyxRecord::Wrapped { .. } => 35,
                    KeyxRecord::RelayedPubKey { .. } => 35,
                })
                .sum(),
        }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn frames_round_trip(seed in any::<u64>()) {
        let f = frame(seed);
        let bytes = f.encode().unwrap();
        prop_assert_eq!(Frame::decode(&bytes).unwrap(), f);
    }

    #[test]
    fn encoded_size_follows_layout(seed in any::<u64>()) {
        let f = frame(seed);
        let bytes = f.encode().unwrap();
        prop_assert_eq!(bytes.len(), size_law(&f));
        prop_assert_eq!(f.encoded_len(), bytes.len());
    }

    #[test]
    fn distinct_frames_encode_differently(a in any::<u64>(), b in any::<u64>()) {
        let (fa, fb) = (frame(a), frame(b));
        prop_assume!(fa != fb);
        prop_assert_ne!(fa.encode().unwrap(), fb.encode().unwrap());
    }

    #[test]
    fn decoder_is_total(bytes in proptest::collection::vec(any::<u8>(), 0..1600)) {
        if let Ok(f) = Frame::decode(&bytes) {
            prop_assert_eq!(f.encode_with_mtu(usize::MAX).unwrap(), bytes);
        }
    }

    #[test]
    fn seal_open_round_trip(
        key in any::<[u8; 16]>(),
        origin in 1u16..,
        seq in any::<u32>(),
        ts in 0u64..1 << 40,
        ttl in 0u8..=8,
        pt in proptest::collection::vec(any::<u8>(), 0..=255),
    ) {
        let key = SessionKey(key);
        let m = seal_message(&key, NodeId(origin), seq, ts, ttl, &pt).unwrap();
        prop_assert_eq!(m.ciphertext.len(), pt.len());
        let mut replay = ReplayState::default();
        prop_assert_eq!(open_message(&key, &m, &mut replay, ts).unwrap(), pt);
    }

    #[test]
    fn each_id_opens_at_most_once(
        order in proptest::collection::vec(0usize..6, 1..60),
    ) {
        let key = SessionKey([3; 16]);
        let msgs: Vec<_> = (0..6u32)
            .map(|i| seal_message(&key, NodeId(1 + (i % 2) as u16), i, 1_000, 8, b"t").unwrap())
            .collect();
        let mut replay = ReplayState::default();
        let mut opened = [0u32; 6];
        for i in order {
            match open_message(&key, &msgs[i], &mut replay, 1_500) {
                Ok(_) => opened[i] += 1,
                Err(CryptoError::Replayed { .. }) => {}
                Err(e) => prop_assert!(false, "unexpected {e}"),
            }
        }
        prop_assert!(opened.iter().all(|c| *c <= 1));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn routes_converge_within_bound(seed in any::<u64>(), n in 2usize..=12) {
        let g = common::random_geometric(seed, n);
        let diameter = g.nodes().flat_map(|v| g.bfs(v).into_values()).max().unwrap() as u64;
        let bound = 3 * OGM_INTERVAL_MS * diameter.max(1);
        let s = g.to_scenario(ForwardingMode::PerSourceTrees, bound - DRAIN_MS.min(bound - 1), seed);
        let out = run_detailed(&s, RunOptions::default()).unwrap();
        for v in g.nodes() {
            let table = &out.engines[&NodeId(v)].routing().table;
            for (dest, d) in g.bfs(v) {
                if dest != v {
                    let e = table.get(NodeId(dest));
                    prop_assert_eq!(e.map(|e| e.metric as u32), Some(d), "{} -> {}", v, dest);
                }
            }
        }
    }

    #[test]
    fn runs_are_reproducible(seed in any::<u64>(), n in 2usize..=8, loss in 0.0f64..0.4) {
        let mut s = common::random_geometric(seed, n).to_scenario(ForwardingMode::SpanningTree, 4_000, seed);
        s.loss_probability = loss;
        prop_assert_eq!(run(&s).unwrap().to_json(), run(&s).unwrap().to_json());
    }
}

// Runs are long enough that key agreement has finished and each ratio rests
// on a few thousand (message, receiver) pairs; very short runs are dominated
// by sampling noise.
#[test]
fn flood_delivery_does_not_rise_with_loss() {
    let grid = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5];
    let topologies = [
        ("line6", common::line(6)),
        ("rgg10", common::random_geometric(31, 10)),
        ("rgg12", common::random_geometric(32, 12)),
    ];
    for (name, g) in topologies {
        for seed in 0..4 {
            let base = g.to_scenario(ForwardingMode::NaiveFlood, 30_000, seed);
            let ratios: Vec<f64> = grid
                .iter()
                .map(|p| {
                    let mut s = base.clone();
                    s.loss_probability = *p;
                    run(&s).unwrap().aggregate.delivery_ratio
                })
                .collect();
            assert!(
                ratios.windows(2).all(|w| w[1] <= w[0]),
                "{name} seed {seed}: {ratios:?}"
            );
        }
    }
}
