use std::collections::BTreeSet;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use ire_core::fixtures::{join_topology, tree_topology, PATH_JOINER, TREE_CHECKER, TREE_ROOT};
use ire_core::gka::PerfectLink;
use ire_core::{Graph, Group, GroupConfig, KeyMaterial, NodeId};

fn tree_group() -> Group {
    let (g, members) = tree_topology();
    Group::with_checker(GroupConfig::default(), KeyMaterial::from_bytes(&[1; 16]), &g, &members, TREE_ROOT, TREE_CHECKER)
        .unwrap()
}

/// Grid of `side * side` members rooted in a corner.
fn grid(side: u32) -> (Graph, BTreeSet<NodeId>) {
    let id = |r: u32, c: u32| r * side + c + 1;
    let mut g = Graph::new();
    for r in 0..side {
        for c in 0..side {
            g.add_node(NodeId(id(r, c)));
            if c + 1 < side {
                g.add_edge(NodeId(id(r, c)), NodeId(id(r, c + 1)));
            }
            if r + 1 < side {
                g.add_edge(NodeId(id(r, c)), NodeId(id(r + 1, c)));
            }
        }
    }
    let members = g.nodes().collect();
    (g, members)
}

fn establish(c: &mut Criterion) {
    c.bench_function("establish/reference_tree", |b| {
        b.iter_batched(tree_group, |mut g| g.establish(&mut PerfectLink).unwrap(), BatchSize::SmallInput)
    });
    let (g, members) = grid(8);
    c.bench_function("establish/grid_64", |b| {
        b.iter_batched(
            || Group::new(GroupConfig::default(), KeyMaterial::from_bytes(&[1; 16]), &g, &members, NodeId(1)).unwrap(),
            |mut grp| grp.establish(&mut PerfectLink).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

fn membership_and_rekey(c: &mut Criterion) {
    let mut base = tree_group();
    base.establish(&mut PerfectLink).unwrap();
    let graph = join_topology();
    c.bench_function("member_join", |b| {
        b.iter_batched(
            || base.clone(),
            |mut g| g.member_join(PATH_JOINER, &graph, &mut PerfectLink).unwrap(),
            BatchSize::SmallInput,
        )
    });
    c.bench_function("member_leave", |b| {
        b.iter_batched(
            || base.clone(),
            |mut g| g.member_leave(NodeId(15), &graph, &mut PerfectLink).unwrap(),
            BatchSize::SmallInput,
        )
    });
    c.bench_function("periodic_global_rekey", |b| {
        b.iter_batched(
            || base.clone(),
            |mut g| g.periodic_global_rekey(None, &mut PerfectLink).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, establish, membership_and_rekey);
criterion_main!(benches);
