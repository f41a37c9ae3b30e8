//! Node identities and undirected connectivity graphs.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

/// Unique node identity. Ordering is used for every deterministic tie-break.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Undirected simple graph over [`NodeId`]s.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Graph {
    adj: BTreeMap<NodeId, BTreeSet<NodeId>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_edges<I: IntoIterator<Item = (u32, u32)>>(edges: I) -> Self {
        let mut g = Graph::new();
        for (a, b) in edges {
            g.add_edge(NodeId(a), NodeId(b));
        }
        g
    }

    pub fn add_node(&mut self, n: NodeId) {
        self.adj.entry(n).or_default();
    }

    pub fn add_edge(&mut self, a: NodeId, b: NodeId) {
        if a == b {
            self.add_node(a);
            return;
        }
        self.adj.entry(a).or_default().insert(b);
        self.adj.entry(b).or_default().insert(a);
    }

    pub fn remove_node(&mut self, n: NodeId) {
        if let Some(nbrs) = self.adj.remove(&n) {
            for m in nbrs {
                if let Some(s) = self.adj.get_mut(&m) {
                    s.remove(&n);
                }
            }
        }
    }

    pub fn contains(&self, n: NodeId) -> bool {
        self.adj.contains_key(&n)
    }

    pub fn has_edge(&self, a: NodeId, b: NodeId) -> bool {
        self.adj.get(&a).is_some_and(|s| s.contains(&b))
    }

    pub fn neighbors(&self, n: NodeId) -> impl Iterator<Item = NodeId> + '_ {
        self.adj.get(&n).into_iter().flat_map(|s| s.iter().copied())
    }

    pub fn degree(&self, n: NodeId) -> usize {
        self.adj.get(&n).map_or(0, BTreeSet::len)
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.adj.keys().copied()
    }

    pub fn edge_count(&self) -> usize {
        self.adj.values().map(BTreeSet::len).sum::<usize>() / 2
    }

    /// Hop distances from `src`, only traversing nodes accepted by `allow`.
    pub fn bfs_levels<F>(&self, src: NodeId, allow: F) -> BTreeMap<NodeId, usize>
    where
        F: Fn(NodeId) -> bool,
    {
        let mut dist = BTreeMap::new();
        if !self.contains(src) || !allow(src) {
            return dist;
        }
        dist.insert(src, 0);
        let mut queue = VecDeque::from([src]);
        while let Some(u) = queue.pop_front() {
            let d = dist[&u];
            for v in self.neighbors(u) {
                if allow(v) && !dist.contains_key(&v) {
                    dist.insert(v, d + 1);
                    queue.push_back(v);
                }
            }
        }
        dist
    }

    /// Shortest hop path from `src` to `dst` (lowest-ID predecessor on ties).
    pub fn shortest_path(&self, src: NodeId, dst: NodeId) -> Option<Vec<NodeId>> {
        let dist = self.bfs_levels(dst, |_| true);
        let mut d = *dist.get(&src)?;
        let mut path = vec![src];
        let mut cur = src;
        while d > 0 {
            cur = self
                .neighbors(cur)
                .find(|v| dist.get(v) == Some(&(d - 1)))
                .expect("BFS layering guarantees a predecessor");
            path.push(cur);
            d -= 1;
        }
        Some(path)
    }

    /// Nodes reachable from `src` (including it).
    pub fn component(&self, src: NodeId) -> BTreeSet<NodeId> {
        self.bfs_levels(src, |_| true).into_keys().collect()
    }
}
