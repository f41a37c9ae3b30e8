use std::collections::{BTreeMap, BTreeSet, VecDeque};

use ire_core::response::{
    check_global_trigger, compose_global_local_map, global_alarm, select_forwarding_node, CleanChannel,
    ResponseState, RoutingTable, SecurityMap, Verdict,
};
use ire_core::{Graph, NodeId, Suite};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn map(owner: u32, coverage: f64) -> SecurityMap {
    SecurityMap::new(NodeId(owner), 3, coverage, 30, [1; 32]).unwrap()
}

fn random_graph(n: u32, edges: &[(u32, u32)]) -> Graph {
    let mut g = Graph::new();
    for i in 1..=n {
        g.add_node(NodeId(i));
    }
    for &(a, b) in edges {
        let (a, b) = (a % n + 1, b % n + 1);
        if a != b {
            g.add_edge(NodeId(a), NodeId(b));
        }
    }
    g
}

fn hops(g: &Graph, from: NodeId, avoid: &BTreeSet<NodeId>) -> BTreeMap<NodeId, usize> {
    let mut d = BTreeMap::from([(from, 0)]);
    let mut q = VecDeque::from([from]);
    while let Some(u) = q.pop_front() {
        for v in g.neighbors(u) {
            if !avoid.contains(&v) && !d.contains_key(&v) {
                d.insert(v, d[&u] + 1);
                q.push_back(v);
            }
        }
    }
    d
}

proptest! {
    #[test]
    fn trigger_is_monotone_in_coverage(a in 0.0..=1.0f64, b in 0.0..=1.0f64) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let t_lo = check_global_trigger(&map(1, lo), 30).unwrap();
        let t_hi = check_global_trigger(&map(1, hi), 30).unwrap();
        prop_assert!(!t_lo || t_hi);
        prop_assert_eq!(t_hi, hi > 2.0 / 3.0);
    }

    #[test]
    fn composition_ignores_arrival_order(
        covs in proptest::collection::vec(0.0..=1.0f64, 1..12),
        rot in 0usize..12,
    ) {
        let own = map(100, 0.1);
        let maps: Vec<SecurityMap> = covs.iter().enumerate().map(|(i, c)| map(i as u32 + 1, *c)).collect();
        let mut shuffled = maps.clone();
        shuffled.rotate_left(rot % maps.len());
        shuffled.reverse();
        let a = compose_global_local_map(&own, &maps, 7.0);
        let b = compose_global_local_map(&own, &shuffled, 7.0);
        prop_assert_eq!(a.to_bytes(), b.to_bytes());
        for m in &maps {
            let e = a.entries[&m.owner];
            prop_assert_eq!(e.verdict == Verdict::AttackDominant, m.coverage > 2.0 / 3.0);
        }
    }

    #[test]
    fn forwarder_is_the_safest_eligible_candidate(
        covs in proptest::collection::vec(0.0..=1.0f64, 1..12),
        quarantine in proptest::collection::btree_set(1u32..12, 0..4),
    ) {
        let own = map(100, 0.0);
        let maps: Vec<SecurityMap> = covs.iter().enumerate().map(|(i, c)| map(i as u32 + 1, *c)).collect();
        let glm = compose_global_local_map(&own, &maps, 0.0);
        let candidates: BTreeSet<NodeId> = maps.iter().map(|m| m.owner).collect();
        let q: BTreeSet<NodeId> = quarantine.into_iter().map(NodeId).collect();
        let eligible: Vec<&SecurityMap> = maps
            .iter()
            .filter(|m| !q.contains(&m.owner) && m.coverage <= 2.0 / 3.0)
            .collect();
        match select_forwarding_node(&glm, &candidates, &q) {
            Ok(f) => {
                let best = eligible.iter().map(|m| m.coverage).fold(f64::INFINITY, f64::min);
                let first = eligible.iter().filter(|m| m.coverage == best).map(|m| m.owner).min();
                prop_assert_eq!(Some(f), first);
            }
            Err(_) => prop_assert!(eligible.is_empty()),
        }
    }

    #[test]
    fn routes_are_shortest_and_avoid_quarantine(
        edges in proptest::collection::vec((0u32..20, 0u32..20), 10..50),
        q in proptest::collection::btree_set(2u32..=20, 0..4),
    ) {
        let g = random_graph(20, &edges);
        let mut t = RoutingTable::new(NodeId(1), &g);
        let avoid: BTreeSet<NodeId> = q.into_iter().map(NodeId).collect();
        for n in &avoid {
            t.quarantine(*n, &g);
        }
        let d = hops(&g, NodeId(1), &avoid);
        prop_assert_eq!(t.next_hop.len(), d.len() - 1);
        for (dst, hop) in &t.next_hop {
            prop_assert!(g.has_edge(NodeId(1), *hop));
            prop_assert!(!avoid.contains(hop) && !avoid.contains(dst));
            let via = hops(&g, *hop, &avoid);
            prop_assert_eq!(via.get(dst).map(|h| h + 1), Some(d[dst]));
        }
    }

    #[test]
    fn accepted_alarms_purge_the_victim(
        edges in proptest::collection::vec((0u32..16, 0u32..16), 10..40),
        victim in 1u32..=16,
        coverage in 0.7..=1.0f64,
        seed in any::<u64>(),
    ) {
        let g = random_graph(16, &edges);
        let suite = Suite::default();
        let gk = suite.random_key(&mut ChaCha8Rng::seed_from_u64(seed));
        let keys: BTreeMap<NodeId, _> = g.nodes().map(|n| (n, gk.clone())).collect();
        let mut states: BTreeMap<NodeId, ResponseState> = g.nodes().map(|n| (n, ResponseState::new(n, &g))).collect();
        let v = map(victim, coverage);
        let out = global_alarm(&suite, &v, &gk, seed, 30, &g, &mut states, &keys, 0.0, &mut CleanChannel).unwrap();
        let nbrs: BTreeSet<NodeId> = g.neighbors(NodeId(victim)).collect();
        prop_assert_eq!(&out.accepted, &nbrs);
        for n in &out.accepted {
            prop_assert!(!states[n].routing.references(NodeId(victim)));
        }
    }
}
