//! Rooted key tree layered by hop distance from the root.
//!
//! Every tree is canonical: it is the BFS layering of the member-induced
//! subgraph (checker excluded) where each node's parent is its lowest-ID
//! neighbor on the previous level. Join and leave updates recompute that
//! layering, so a mutated tree is always identical to a from-scratch build.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::graph::{Graph, NodeId};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TreeError {
    #[error("root {0} has no one-hop neighbor")]
    IsolatedRoot(NodeId),
    #[error("members unreachable from root: {0:?}")]
    Unreachable(Vec<NodeId>),
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("node {0} has no neighbor in the tree")]
    Disconnected(NodeId),
    #[error("checker {0} is not a member or not adjacent to the root")]
    InvalidChecker(NodeId),
    #[error("node {0} is already a member")]
    AlreadyMember(NodeId),
    #[error("root {0} cannot leave the tree")]
    RootLeave(NodeId),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyTree {
    root: NodeId,
    checker: NodeId,
    parent: BTreeMap<NodeId, NodeId>,
    children: BTreeMap<NodeId, Vec<NodeId>>,
    level: BTreeMap<NodeId, usize>,
}

/// Member-to-root chain of ancestors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyPath(pub Vec<NodeId>);

impl KeyPath {
    pub fn nodes(&self) -> &[NodeId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Result of removing a member.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Detached {
    pub tree: KeyTree,
    /// Nodes that must refresh their contribution: former ancestors of the
    /// leaver plus every node whose parent changed.
    pub affected: BTreeSet<NodeId>,
    /// Orphans with no remaining route to the root; dropped from the group.
    pub dropped: BTreeSet<NodeId>,
}

/// Uniformly pick one of the root's one-hop neighbors.
pub fn select_checker<R: Rng + ?Sized>(
    root: NodeId,
    graph: &Graph,
    rng: &mut R,
) -> Result<NodeId, TreeError> {
    let nbrs: Vec<NodeId> = graph.neighbors(root).collect();
    nbrs.choose(rng).copied().ok_or(TreeError::IsolatedRoot(root))
}

pub fn build_tree(
    root: NodeId,
    members: &BTreeSet<NodeId>,
    graph: &Graph,
    checker: NodeId,
) -> Result<KeyTree, TreeError> {
    if !members.contains(&checker) || checker == root || !graph.has_edge(root, checker) {
        return Err(TreeError::InvalidChecker(checker));
    }
    if !members.contains(&root) {
        return Err(TreeError::UnknownNode(root));
    }
    let (tree, unreachable) = layer(root, members, graph, checker);
    if unreachable.is_empty() {
        Ok(tree)
    } else {
        Err(TreeError::Unreachable(unreachable.into_iter().collect()))
    }
}

/// BFS layering over `members \ {checker}`; returns members left unreached.
fn layer(
    root: NodeId,
    members: &BTreeSet<NodeId>,
    graph: &Graph,
    checker: NodeId,
) -> (KeyTree, BTreeSet<NodeId>) {
    let level = graph.bfs_levels(root, |n| n != checker && members.contains(&n));
    let mut parent = BTreeMap::new();
    let mut children: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
    for (&n, &l) in &level {
        children.entry(n).or_default();
        if l == 0 {
            continue;
        }
        let p = graph
            .neighbors(n)
            .find(|m| level.get(m) == Some(&(l - 1)))
            .expect("BFS layering guarantees a previous-level neighbor");
        parent.insert(n, p);
        children.entry(p).or_default().push(n);
    }
    // neighbors() iterates in ascending order, so children lists are sorted
    // once every node has been visited in key order.
    for list in children.values_mut() {
        list.sort_unstable();
    }
    let unreachable = members
        .iter()
        .copied()
        .filter(|m| *m != checker && !level.contains_key(m))
        .collect();
    (
        KeyTree {
            root,
            checker,
            parent,
            children,
            level,
        },
        unreachable,
    )
}

impl KeyTree {
    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn checker(&self) -> NodeId {
        self.checker
    }

    pub fn contains(&self, n: NodeId) -> bool {
        self.level.contains_key(&n)
    }

    pub fn members(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.level.keys().copied()
    }

    /// Tree members plus the checker.
    pub fn group(&self) -> BTreeSet<NodeId> {
        let mut g: BTreeSet<NodeId> = self.members().collect();
        g.insert(self.checker);
        g
    }

    pub fn len(&self) -> usize {
        self.level.len()
    }

    pub fn is_empty(&self) -> bool {
        self.level.is_empty()
    }

    pub fn parent(&self, n: NodeId) -> Option<NodeId> {
        self.parent.get(&n).copied()
    }

    pub fn children(&self, n: NodeId) -> &[NodeId] {
        self.children.get(&n).map_or(&[], Vec::as_slice)
    }

    pub fn level(&self, n: NodeId) -> Option<usize> {
        self.level.get(&n).copied()
    }

    pub fn levels(&self) -> &BTreeMap<NodeId, usize> {
        &self.level
    }

    pub fn height(&self) -> usize {
        self.level.values().copied().max().unwrap_or(0)
    }

    pub fn is_leaf(&self, n: NodeId) -> bool {
        self.children(n).is_empty()
    }

    /// Level-one members (the root's one-hop neighbors in the tree).
    pub fn level_one(&self) -> Vec<NodeId> {
        self.children(self.root).to_vec()
    }

    pub fn key_path(&self, node: NodeId) -> Result<KeyPath, TreeError> {
        if !self.contains(node) {
            return Err(TreeError::UnknownNode(node));
        }
        let mut path = vec![node];
        let mut cur = node;
        while let Some(p) = self.parent(cur) {
            path.push(p);
            cur = p;
        }
        Ok(KeyPath(path))
    }

    /// Attach a joining node by recomputing the canonical layering with it
    /// included. The joiner lands one level below its shallowest in-tree
    /// neighbor, under the lowest-ID neighbor at that level.
    pub fn attach_member(&self, new_node: NodeId, graph: &Graph) -> Result<KeyTree, TreeError> {
        if self.contains(new_node) || new_node == self.checker {
            return Err(TreeError::AlreadyMember(new_node));
        }
        if !graph.neighbors(new_node).any(|m| self.contains(m)) {
            return Err(TreeError::Disconnected(new_node));
        }
        let mut members = self.group();
        members.insert(new_node);
        let (tree, unreachable) = layer(self.root, &members, graph, self.checker);
        if !unreachable.is_empty() {
            // Existing members lost their route under the current graph.
            return Err(TreeError::Unreachable(unreachable.into_iter().collect()));
        }
        Ok(tree)
    }

    pub fn detach_member(&self, leaver: NodeId, graph: &Graph) -> Result<Detached, TreeError> {
        if leaver == self.checker {
            return Ok(Detached {
                tree: self.clone(),
                affected: BTreeSet::from([self.root]),
                dropped: BTreeSet::new(),
            });
        }
        if leaver == self.root {
            return Err(TreeError::RootLeave(leaver));
        }
        let old_path = self.key_path(leaver)?;
        let mut members = self.group();
        members.remove(&leaver);
        let (tree, dropped) = layer(self.root, &members, graph, self.checker);
        let mut affected: BTreeSet<NodeId> = old_path.0[1..].iter().copied().collect();
        affected.extend(self.restructured(&tree));
        affected.retain(|n| tree.contains(*n));
        Ok(Detached {
            tree,
            affected,
            dropped,
        })
    }

    /// Replace the checker with one of the root's level-one members. That
    /// member leaves the tree; its subtree is re-layered.
    pub fn reselect_checker<R: Rng + ?Sized>(
        &self,
        graph: &Graph,
        rng: &mut R,
    ) -> Result<Detached, TreeError> {
        let level_one = self.level_one();
        if level_one.is_empty() {
            return Err(TreeError::IsolatedRoot(self.root));
        }
        // Prefer candidates whose removal keeps every member reachable, then
        // leaves (no restructuring at all).
        let group = self.group();
        let mut viable = Vec::new();
        for &c in &level_one {
            let mut members = group.clone();
            members.remove(&self.checker);
            let (t, dropped) = layer(self.root, &members, graph, c);
            if dropped.is_empty() {
                viable.push((c, t));
            }
        }
        let leaves: Vec<usize> = (0..viable.len())
            .filter(|&i| self.is_leaf(viable[i].0))
            .collect();
        let pick = if !leaves.is_empty() {
            *leaves.choose(rng).expect("non-empty")
        } else if !viable.is_empty() {
            rng.random_range(0..viable.len())
        } else {
            let c = *level_one.choose(rng).expect("non-empty");
            let mut members = group.clone();
            members.remove(&self.checker);
            let (t, dropped) = layer(self.root, &members, graph, c);
            let mut affected = BTreeSet::from([self.root]);
            affected.extend(self.restructured(&t));
            affected.retain(|n| t.contains(*n));
            return Ok(Detached {
                tree: t,
                affected,
                dropped,
            });
        };
        let (_, tree) = viable.swap_remove(pick);
        let mut affected = BTreeSet::from([self.root]);
        affected.extend(self.restructured(&tree));
        affected.retain(|n| tree.contains(*n));
        Ok(Detached {
            tree,
            affected,
            dropped: BTreeSet::new(),
        })
    }

    /// Members of `other` whose parent differs from their parent here
    /// (including members new to `other`).
    pub fn reparented(&self, other: &KeyTree) -> BTreeSet<NodeId> {
        other
            .members()
            .filter(|&n| n != other.root && (!self.contains(n) || self.parent(n) != other.parent(n)))
            .collect()
    }

    /// Reparented members of `other` plus those whose child set changed.
    pub fn restructured(&self, other: &KeyTree) -> BTreeSet<NodeId> {
        let mut out = self.reparented(other);
        out.extend(other.members().filter(|&n| self.children(n) != other.children(n)));
        out
    }

    /// Debug dump: a `checker,<id>` header then `level,id,parent_id` lines
    /// sorted by (level, id); the root's parent is `-`.
    pub fn dump(&self) -> String {
        let mut rows: Vec<(usize, NodeId)> = self.level.iter().map(|(n, l)| (*l, *n)).collect();
        rows.sort_unstable();
        let mut out = format!("checker,{}\n", self.checker);
        for (l, n) in rows {
            match self.parent(n) {
                Some(p) => writeln!(out, "{l},{n},{p}").unwrap(),
                None => writeln!(out, "{l},{n},-").unwrap(),
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ids(v: &[u32]) -> Vec<NodeId> {
        v.iter().map(|&i| NodeId(i)).collect()
    }

    #[test]
    fn forced_checker_choice() {
        let g = Graph::from_edges([(1, 2)]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(select_checker(NodeId(1), &g, &mut rng), Ok(NodeId(2)));
        let mut g2 = Graph::new();
        g2.add_node(NodeId(1));
        assert_eq!(
            select_checker(NodeId(1), &g2, &mut rng),
            Err(TreeError::IsolatedRoot(NodeId(1)))
        );
    }

    #[test]
    fn checker_draws_are_uniform() {
        let g = Graph::from_edges([(1, 2), (1, 3), (1, 4), (1, 5)]);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut counts = BTreeMap::new();
        let n = 10_000;
        for _ in 0..n {
            *counts
                .entry(select_checker(NodeId(1), &g, &mut rng).unwrap())
                .or_insert(0usize) += 1;
        }
        let expected = n as f64 / 4.0;
        let sigma = (n as f64 * 0.25 * 0.75).sqrt();
        let mut chi2 = 0.0;
        for &c in counts.values() {
            assert!((c as f64 - expected).abs() <= 3.0 * sigma, "{counts:?}");
            chi2 += (c as f64 - expected).powi(2) / expected;
        }
        // chi-square, 3 dof, p = 0.001 critical value
        assert!(chi2 < 16.27, "chi2 = {chi2}");
    }

    #[test]
    fn degenerate_tree() {
        let g = Graph::from_edges([(1, 2)]);
        let members = BTreeSet::from([NodeId(1), NodeId(2)]);
        let t = build_tree(NodeId(1), &members, &g, NodeId(2)).unwrap();
        assert_eq!(t.height(), 0);
        assert_eq!(t.len(), 1);
        assert_eq!(t.key_path(NodeId(1)).unwrap().0, ids(&[1]));
    }

    #[test]
    fn tree_shape() {
        let (g, members) = fixtures::tree_topology();
        let t = build_tree(NodeId(1), &members, &g, fixtures::TREE_CHECKER).unwrap();
        assert_eq!(t.height(), 4);
        assert_eq!(t.level(NodeId(1)), Some(0));
        assert_eq!(t.len(), 17);
        assert!(!t.contains(NodeId(5)));
        assert!(g.has_edge(NodeId(1), NodeId(5)));
        // cross edges resolve to the lowest-ID parent
        assert_eq!(t.parent(NodeId(12)), Some(NodeId(6)));
        assert_eq!(t.parent(NodeId(13)), Some(NodeId(8)));
    }

    #[test]
    fn unreachable_members_are_reported() {
        let g = Graph::from_edges([(1, 2), (1, 3)]);
        let members = BTreeSet::from([NodeId(1), NodeId(2), NodeId(3), NodeId(9)]);
        assert_eq!(
            build_tree(NodeId(1), &members, &g, NodeId(2)),
            Err(TreeError::Unreachable(vec![NodeId(9)]))
        );
    }

    #[test]
    fn join_path() {
        let (mut g, members) = fixtures::tree_topology();
        let t = build_tree(NodeId(1), &members, &g, fixtures::TREE_CHECKER).unwrap();
        g.add_edge(fixtures::PATH_JOINER, NodeId(6));
        let t2 = t.attach_member(fixtures::PATH_JOINER, &g).unwrap();
        assert_eq!(t2.level(fixtures::PATH_JOINER), Some(3));
        assert!(t2.is_leaf(fixtures::PATH_JOINER));
        assert_eq!(
            t2.key_path(fixtures::PATH_JOINER).unwrap().0,
            vec![fixtures::PATH_JOINER, NodeId(6), NodeId(2), NodeId(1)]
        );
        assert_eq!(t.reparented(&t2), BTreeSet::from([fixtures::PATH_JOINER]));
    }

    #[test]
    fn joiner_adjacent_to_root_is_level_one() {
        let (mut g, members) = fixtures::tree_topology();
        let t = build_tree(NodeId(1), &members, &g, fixtures::TREE_CHECKER).unwrap();
        g.add_edge(NodeId(40), NodeId(1));
        let t2 = t.attach_member(NodeId(40), &g).unwrap();
        assert_eq!(t2.level(NodeId(40)), Some(1));
        assert_eq!(t2.parent(NodeId(40)), Some(NodeId(1)));
        let mut g3 = g.clone();
        g3.add_node(NodeId(41));
        assert_eq!(
            t.attach_member(NodeId(41), &g3),
            Err(TreeError::Disconnected(NodeId(41)))
        );
    }

    /// Enumerate every neighbor subset of a small line tree and check the
    /// attachment rule directly.
    #[test]
    fn attachment_rule_exhaustive() {
        // 1 - 2 - 3 - 4 (levels 0..3), checker 9 hangs off the root.
        let base = Graph::from_edges([(1, 2), (2, 3), (3, 4), (1, 9)]);
        let members = BTreeSet::from(ids(&[1, 2, 3, 4, 9]).into_iter().collect::<BTreeSet<_>>());
        let t = build_tree(NodeId(1), &members, &base, NodeId(9)).unwrap();
        for mask in 1u32..16 {
            let mut g = base.clone();
            let nbrs: Vec<u32> = (0..4).filter(|b| mask & (1 << b) != 0).map(|b| b + 1).collect();
            for &n in &nbrs {
                g.add_edge(NodeId(50), NodeId(n));
            }
            let t2 = t.attach_member(NodeId(50), &g).unwrap();
            let min_level = nbrs.iter().map(|&n| t.level(NodeId(n)).unwrap()).min().unwrap();
            let expect_parent = nbrs
                .iter()
                .copied()
                .filter(|&n| t.level(NodeId(n)) == Some(min_level))
                .min()
                .unwrap();
            assert_eq!(t2.level(NodeId(50)), Some(min_level + 1), "mask {mask}");
            assert_eq!(t2.parent(NodeId(50)), Some(NodeId(expect_parent)));
        }
    }

    #[test]
    fn leaf_leave_affects_ancestors_only() {
        let (g, members) = fixtures::tree_topology();
        let t = build_tree(NodeId(1), &members, &g, fixtures::TREE_CHECKER).unwrap();
        let d = t.detach_member(NodeId(15), &g).unwrap();
        assert_eq!(d.affected, BTreeSet::from(ids(&[11, 6, 2, 1]).into_iter().collect::<BTreeSet<_>>()));
        assert!(d.dropped.is_empty());
        assert!(!d.tree.contains(NodeId(15)));
    }

    #[test]
    fn checker_leave_keeps_tree() {
        let (g, members) = fixtures::tree_topology();
        let t = build_tree(NodeId(1), &members, &g, fixtures::TREE_CHECKER).unwrap();
        let d = t.detach_member(fixtures::TREE_CHECKER, &g).unwrap();
        assert_eq!(d.tree, t);
        assert_eq!(d.affected, BTreeSet::from([NodeId(1)]));
    }

    #[test]
    fn internal_leave_matches_fresh_build() {
        let (g, members) = fixtures::tree_topology();
        let t = build_tree(NodeId(1), &members, &g, fixtures::TREE_CHECKER).unwrap();
        // node 6 has children 11 and 12; 12 is also adjacent to 7
        assert_eq!(t.children(NodeId(6)), &ids(&[11, 12])[..]);
        let d = t.detach_member(NodeId(6), &g).unwrap();
        let mut reduced = members.clone();
        reduced.remove(&NodeId(6));
        // 11 and 15 lose every route; they are dropped
        assert_eq!(d.dropped, BTreeSet::from([NodeId(11), NodeId(15)]));
        reduced.remove(&NodeId(11));
        reduced.remove(&NodeId(15));
        let fresh = build_tree(NodeId(1), &reduced, &g, fixtures::TREE_CHECKER).unwrap();
        assert_eq!(d.tree, fresh);
        assert_eq!(d.tree.parent(NodeId(12)), Some(NodeId(7)));
        assert!(d.affected.contains(&NodeId(12)));
        assert!(d.affected.contains(&NodeId(2)));
    }

    #[test]
    fn dump_format() {
        let g = Graph::from_edges([(1, 2), (1, 3), (3, 4)]);
        let members: BTreeSet<NodeId> = ids(&[1, 2, 3, 4]).into_iter().collect();
        let t = build_tree(NodeId(1), &members, &g, NodeId(2)).unwrap();
        assert_eq!(t.dump(), "checker,2\n0,1,-\n1,3,1\n2,4,3\n");
    }

    #[test]
    fn key_path_unknown() {
        let (g, members) = fixtures::tree_topology();
        let t = build_tree(NodeId(1), &members, &g, fixtures::TREE_CHECKER).unwrap();
        assert_eq!(t.key_path(NodeId(5)), Err(TreeError::UnknownNode(NodeId(5))));
    }
}
