use invgrad::ledger::LedgerEvent;
use invgrad::{AllocTag, Ledger};
use proptest::prelude::*;

const TAGS: [AllocTag; 8] = [
    AllocTag::Activation,
    AllocTag::ResidualX,
    AllocTag::ResidualTheta,
    AllocTag::Parameter,
    AllocTag::Gradient,
    AllocTag::Tangent,
    AllocTag::Cotangent,
    AllocTag::Workspace,
];

#[derive(Debug, Clone)]
enum Op {
    Alloc(usize, u64),
    /// Frees the live allocation at this position (modulo the live count).
    Free(usize),
}

fn ops() -> impl Strategy<Value = Vec<Op>> {
    let op = prop_oneof![
        (0usize..8, 1u64..4096).prop_map(|(t, b)| Op::Alloc(t, b)),
        (0usize..64).prop_map(Op::Free),
    ];
    prop::collection::vec(op, 1..80)
}

proptest! {
    #[test]
    fn peak_is_max_prefix_sum_of_tracked_deltas(seq in ops()) {
        let ledger = Ledger::with_event_log();
        let mut live = Vec::new();
        for op in &seq {
            match *op {
                Op::Alloc(t, bytes) => live.push(ledger.register(TAGS[t], bytes)),
                Op::Free(i) if !live.is_empty() => {
                    let id = live.swap_remove(i % live.len());
                    ledger.release(id).unwrap();
                }
                Op::Free(_) => {}
            }
            prop_assert!(ledger.peak_tracked_bytes() >= ledger.tracked_live_bytes());
        }

        let mut sum: i64 = 0;
        let mut peak: i64 = 0;
        let mut per_tag = [0i64; 8];
        for ev in ledger.events() {
            let (tag, delta) = match ev {
                LedgerEvent::Alloc { tag, bytes, .. } => (tag, bytes as i64),
                LedgerEvent::Free { tag, bytes, .. } => (tag, -(bytes as i64)),
                LedgerEvent::Retag { .. } => unreachable!("no retags issued"),
            };
            per_tag[TAGS.iter().position(|&t| t == tag).unwrap()] += delta;
            if tag.is_tracked() {
                sum += delta;
                peak = peak.max(sum);
            }
        }
        prop_assert_eq!(ledger.peak_tracked_bytes() as i64, peak);
        prop_assert_eq!(ledger.tracked_live_bytes() as i64, sum);
        for (i, &tag) in TAGS.iter().enumerate() {
            prop_assert_eq!(ledger.live_bytes(tag) as i64, per_tag[i]);
        }
    }

    #[test]
    fn identical_sequences_give_identical_peaks(seq in ops()) {
        let run = || {
            let ledger = Ledger::new();
            let mut live = Vec::new();
            for op in &seq {
                match *op {
                    Op::Alloc(t, bytes) => live.push(ledger.register(TAGS[t], bytes)),
                    Op::Free(i) if !live.is_empty() => {
                        let id = live.swap_remove(i % live.len());
                        ledger.release(id).unwrap();
                    }
                    Op::Free(_) => {}
                }
            }
            (ledger.peak_tracked_bytes(), TAGS.map(|t| ledger.peak_bytes(t)))
        };
        prop_assert_eq!(run(), run());
    }
}

#[test]
fn untracked_tags_never_raise_the_peak() {
    let ledger = Ledger::new();
    let p = ledger.register(AllocTag::Parameter, 1 << 20);
    let g = ledger.register(AllocTag::Gradient, 1 << 20);
    assert_eq!(ledger.peak_tracked_bytes(), 0);
    let a = ledger.register(AllocTag::Activation, 100);
    assert_eq!(ledger.peak_tracked_bytes(), 100);
    for id in [p, g, a] {
        ledger.release(id).unwrap();
    }
}

#[test]
fn reset_only_clears_peaks() {
    let ledger = Ledger::new();
    let a = ledger.register(AllocTag::Tangent, 64);
    let b = ledger.register(AllocTag::Tangent, 64);
    ledger.release(b).unwrap();
    assert_eq!(ledger.peak_tracked_bytes(), 128);
    ledger.reset_peaks();
    assert_eq!(ledger.peak_tracked_bytes(), 64);
    assert_eq!(ledger.live_bytes(AllocTag::Tangent), 64);
    ledger.release(a).unwrap();
}
