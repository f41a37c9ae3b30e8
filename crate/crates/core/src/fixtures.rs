//! Reference topologies used by tests, the acceptance suite and the CLI.

use std::collections::BTreeSet;

use crate::graph::{Graph, NodeId};

pub const TREE_ROOT: NodeId = NodeId(1);
pub const TREE_CHECKER: NodeId = NodeId(5);
/// Joiner three hops from the root, one hop from node 6.
pub const PATH_JOINER: NodeId = NodeId(19);

/// Seventeen tree members (1–4, 6–18) plus checker 5, height 4.
///
/// ```text
/// level 0: 1                       (checker 5 adjacent to 1 and 2)
/// level 1: 2 3 4
/// level 2: 6 7 | 8 9 | 10 18
/// level 3: 11 12 (6) | 13 (8) | 14 (10)
/// level 4: 15 (11) | 16 (13) | 17 (14)
/// ```
///
/// Cross edges 7–12, 9–13 and 3–4 exercise the lowest-ID parent rule.
pub fn tree_topology() -> (Graph, BTreeSet<NodeId>) {
    let g = Graph::from_edges([
        (1, 2),
        (1, 3),
        (1, 4),
        (1, 5),
        (2, 5),
        (3, 4),
        (2, 6),
        (2, 7),
        (3, 8),
        (3, 9),
        (4, 10),
        (4, 18),
        (6, 11),
        (6, 12),
        (7, 12),
        (8, 13),
        (9, 13),
        (10, 14),
        (11, 15),
        (13, 16),
        (14, 17),
    ]);
    let members = g.nodes().collect();
    (g, members)
}

/// Tree topology with the joiner linked to node 6 only.
pub fn join_topology() -> Graph {
    let (mut g, _) = tree_topology();
    g.add_edge(PATH_JOINER, NodeId(6));
    g
}

/// Node A (1) with one-hop neighbors B (2), C (3), D (4) and G (7);
/// E (5) and F (6) are two hops away.
pub fn star_topology() -> Graph {
    Graph::from_edges([(1, 2), (1, 3), (1, 4), (1, 7), (2, 3), (4, 5), (5, 6), (7, 6)])
}

/// Letter label to node id for the bridged topology (A = 1 … W = 23).
pub fn letter(c: char) -> NodeId {
    NodeId(c as u32 - 'A' as u32 + 1)
}

/// Three local networks centred on C, I and P, bridged H–I and O–P.
/// D is adjacent to A, B and C.
pub fn bridged_topology() -> Graph {
    let mut g = Graph::new();
    let mut link = |a: char, b: char| g.add_edge(letter(a), letter(b));
    for n in ['A', 'B', 'D', 'E', 'F', 'G', 'H'] {
        link('C', n);
    }
    link('D', 'A');
    link('D', 'B');
    link('A', 'B');
    for n in ['J', 'K', 'L', 'M', 'N', 'O'] {
        link('I', n);
    }
    for n in ['Q', 'R', 'S', 'T', 'U', 'V', 'W'] {
        link('P', n);
    }
    link('H', 'I');
    link('O', 'P');
    g
}
