use std::collections::BTreeSet;

use ire_core::crypto::xor_combine;
use ire_core::gka::{MessageKind, PerfectLink};
use ire_core::{Graph, Group, GroupConfig, KeyMaterial, NodeId, ProtocolMessage};
use proptest::prelude::*;

#[derive(Debug, Clone)]
enum Op {
    Join(u32),
    Leave(u32),
    GlobalRekey,
    LocalRekey(usize),
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        (9u32..=12).prop_map(Op::Join),
        (2u32..=12).prop_map(Op::Leave),
        Just(Op::GlobalRekey),
        (0usize..4).prop_map(Op::LocalRekey),
    ]
}

/// Eight founding members on a ring with chords, four spares attached to it.
fn topology() -> Graph {
    Graph::from_edges([
        (1, 2),
        (1, 3),
        (1, 4),
        (2, 5),
        (3, 6),
        (4, 7),
        (5, 8),
        (6, 8),
        (7, 8),
        (2, 3),
        (9, 5),
        (10, 6),
        (11, 1),
        (12, 7),
        (12, 9),
    ])
}

fn assert_converged(g: &Group) {
    let keys = g.keys().expect("established");
    let ledger: Vec<KeyMaterial> = g.share_ledger().into_values().collect();
    assert_eq!(xor_combine(&ledger).unwrap(), keys.global);
    for n in g.nodes().values() {
        assert_eq!(n.session_key(), Some(&keys.global));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn epochs_rise_on_success_and_hold_on_abort(
        seed in any::<u64>(),
        ops in proptest::collection::vec((op(), any::<bool>()), 1..10),
    ) {
        let graph = topology();
        let members: BTreeSet<NodeId> = (1..=8).map(NodeId).collect();
        let cfg = GroupConfig { seed, ..GroupConfig::default() };
        let mut g = Group::with_checker(cfg, KeyMaterial::from_bytes(&[9; 16]), &graph, &members, NodeId(1), NodeId(2)).unwrap();
        g.establish(&mut PerfectLink).unwrap();
        assert_converged(&g);
        for (op, lossy) in ops {
            let before = g.epoch();
            let keys_before = g.keys().cloned();
            // A lossy link drops every third-step message of the operation.
            let mut link = |m: &ProtocolMessage, _: NodeId, _: f64| {
                !(lossy && matches!(m.kind, MessageKind::JoinStepC | MessageKind::AuthStep3 | MessageKind::AgreeStep3 | MessageKind::GlobalRekeyConfirm | MessageKind::LocalRekeyStep3))
            };
            let ok = match op {
                Op::Join(n) => g.member_join(NodeId(n), &graph, &mut link).is_ok(),
                Op::Leave(n) => g.member_leave(NodeId(n), &graph, &mut link).is_ok(),
                Op::GlobalRekey => g.periodic_global_rekey(None, &mut link).is_ok(),
                Op::LocalRekey(i) => {
                    let l1 = g.tree().level_one();
                    g.periodic_local_rekey(l1[i % l1.len()], None, &mut link).is_ok()
                }
            };
            if ok {
                prop_assert_eq!(g.epoch(), before + 1);
                prop_assert_eq!(g.keys().unwrap().epoch, g.epoch());
            } else {
                prop_assert_eq!(g.epoch(), before);
                prop_assert_eq!(g.keys().cloned(), keys_before);
            }
            assert_converged(&g);
        }
    }
}
