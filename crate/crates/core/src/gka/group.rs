//! Single-threaded orchestration of a whole group: drives every node's state
//! machine through a delivery queue and commits or rolls back each epoch.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::message::{ProtocolMessage, Receiver};
use super::node::{next_master_key, NodeProtocolState, ProtocolOptions, StepError, TreeView};
use crate::crypto::{xor_combine, CryptoError, KeyMaterial, Suite};
use crate::graph::{Graph, NodeId};
use crate::key_tree::{build_tree, select_checker, KeyTree, TreeError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GkaError {
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error("timeout on edge {from} -> {to}")]
    Timeout { from: NodeId, to: NodeId },
    #[error("checker rejected the digest of node {0}")]
    CheckerVerificationFailure(NodeId),
    #[error("rekey confirmation from {0} did not match")]
    RekeyMismatch(NodeId),
    #[error("node {node} could not start: {source}")]
    Start { node: NodeId, source: StepError },
    #[error("no agreed group key yet")]
    NotEstablished,
    #[error("node {0} is not a group member")]
    UnknownNode(NodeId),
    #[error("node {0} is not a level-one member")]
    NotLevelOne(NodeId),
}

/// Delivery decision for one message copy. The default delivers everything.
pub trait Link {
    fn deliver(&mut self, _msg: &ProtocolMessage, _to: NodeId, _now: f64) -> bool {
        true
    }
}

/// Lossless, in-order delivery.
#[derive(Debug, Clone, Copy, Default)]
pub struct PerfectLink;

impl Link for PerfectLink {}

impl<F: FnMut(&ProtocolMessage, NodeId, f64) -> bool> Link for F {
    fn deliver(&mut self, msg: &ProtocolMessage, to: NodeId, now: f64) -> bool {
        self(msg, to, now)
    }
}

/// What a joiner is handed when it is admitted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Admission {
    /// The master key of the epoch it joins into.
    #[default]
    NextMasterKey,
    /// The master key in force before it joined. Exposes past traffic; only
    /// useful as a negative control.
    CurrentMasterKey,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupConfig {
    pub admission: Admission,
    pub suite: Suite,
    pub options: ProtocolOptions,
    pub seed: u64,
    /// Per-edge timeout in simulated seconds.
    pub timeout: f64,
    /// Per-hop delivery delay in simulated seconds.
    pub latency: f64,
}

impl Default for GroupConfig {
    fn default() -> Self {
        GroupConfig {
            admission: Admission::default(),
            suite: Suite::default(),
            options: ProtocolOptions::default(),
            seed: 0,
            timeout: 5.0,
            latency: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionKeys {
    pub global: KeyMaterial,
    /// Local keys held by the root, by level-one member.
    pub local: BTreeMap<NodeId, KeyMaterial>,
    pub epoch: u64,
}

/// One wire message and the nodes it actually reached.
#[derive(Debug, Clone, PartialEq)]
pub struct TranscriptEntry {
    pub time: f64,
    pub epoch: u64,
    pub msg: ProtocolMessage,
    pub delivered: Vec<NodeId>,
}

/// Public record of a membership change (epoch and resulting group).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MembershipRecord {
    pub epoch: u64,
    pub group: Vec<NodeId>,
}

#[derive(Debug, Default)]
struct PumpReport {
    lost: Vec<(NodeId, NodeId)>,
    digest_mismatch: Vec<NodeId>,
}

pub(crate) fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn node_seed(seed: u64, id: NodeId) -> u64 {
    splitmix(seed ^ splitmix(id.0 as u64))
}

pub fn view_for(tree: &KeyTree, id: NodeId) -> TreeView {
    let checker = tree.checker();
    TreeView {
        root: tree.root(),
        checker,
        parent: if id == checker {
            Some(tree.root())
        } else {
            tree.parent(id)
        },
        children: if id == checker {
            Vec::new()
        } else {
            tree.children(id).to_vec()
        },
        members: tree.members().collect(),
    }
}

#[derive(Debug, Clone)]
pub struct Group {
    config: GroupConfig,
    tree: KeyTree,
    nodes: BTreeMap<NodeId, NodeProtocolState>,
    epoch: u64,
    clock: f64,
    keys: Option<SessionKeys>,
    transcript: Vec<TranscriptEntry>,
    drops: BTreeMap<String, u64>,
    membership: Vec<MembershipRecord>,
    rng: ChaCha8Rng,
}

impl Group {
    /// Root plus a uniformly chosen checker among the root's neighbors.
    pub fn new(
        config: GroupConfig,
        master_key: KeyMaterial,
        graph: &Graph,
        members: &BTreeSet<NodeId>,
        root: NodeId,
    ) -> Result<Self, GkaError> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let sub = graph_restricted(graph, members);
        let checker = select_checker(root, &sub, &mut rng)?;
        let tree = build_tree(root, members, graph, checker)?;
        Ok(Self::from_tree(config, master_key, tree, &BTreeMap::new()))
    }

    pub fn with_checker(
        config: GroupConfig,
        master_key: KeyMaterial,
        graph: &Graph,
        members: &BTreeSet<NodeId>,
        root: NodeId,
        checker: NodeId,
    ) -> Result<Self, GkaError> {
        let tree = build_tree(root, members, graph, checker)?;
        Ok(Self::from_tree(config, master_key, tree, &BTreeMap::new()))
    }

    /// Build from an existing tree. Parties missing from `shares` draw a
    /// random one.
    pub fn from_tree(
        config: GroupConfig,
        master_key: KeyMaterial,
        tree: KeyTree,
        shares: &BTreeMap<NodeId, KeyMaterial>,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix(config.seed));
        let mut nodes = BTreeMap::new();
        for id in tree.group() {
            let share = shares
                .get(&id)
                .cloned()
                .unwrap_or_else(|| config.suite.random_key(&mut rng));
            nodes.insert(
                id,
                NodeProtocolState::new(
                    id,
                    config.suite,
                    config.options,
                    view_for(&tree, id),
                    master_key.clone(),
                    share,
                    node_seed(config.seed, id),
                ),
            );
        }
        let membership = vec![MembershipRecord {
            epoch: 0,
            group: tree.group().into_iter().collect(),
        }];
        Group {
            config,
            tree,
            nodes,
            epoch: 0,
            clock: 0.0,
            keys: None,
            transcript: Vec::new(),
            drops: BTreeMap::new(),
            membership,
            rng,
        }
    }

    pub fn config(&self) -> &GroupConfig {
        &self.config
    }
    pub fn tree(&self) -> &KeyTree {
        &self.tree
    }
    pub fn epoch(&self) -> u64 {
        self.epoch
    }
    pub fn clock(&self) -> f64 {
        self.clock
    }
    pub fn set_clock(&mut self, t: f64) {
        self.clock = t;
    }
    pub fn keys(&self) -> Option<&SessionKeys> {
        self.keys.as_ref()
    }
    pub fn node(&self, id: NodeId) -> Option<&NodeProtocolState> {
        self.nodes.get(&id)
    }
    pub fn nodes(&self) -> &BTreeMap<NodeId, NodeProtocolState> {
        &self.nodes
    }
    pub fn transcript(&self) -> &[TranscriptEntry] {
        &self.transcript
    }
    pub fn membership_log(&self) -> &[MembershipRecord] {
        &self.membership
    }
    /// Rejected deliveries by reason.
    pub fn drop_counts(&self) -> &BTreeMap<String, u64> {
        &self.drops
    }

    /// Direct mutable access for fault-injection tests.
    #[doc(hidden)]
    pub fn node_mut(&mut self, id: NodeId) -> Option<&mut NodeProtocolState> {
        self.nodes.get_mut(&id)
    }

    /// Current shares of every party (tree members and the checker).
    pub fn share_ledger(&self) -> BTreeMap<NodeId, KeyMaterial> {
        self.nodes
            .iter()
            .map(|(id, n)| (*id, n.share().clone()))
            .collect()
    }

    /// XOR of the share ledger: what the agreed global key must equal.
    pub fn ledger_key(&self) -> Result<KeyMaterial, GkaError> {
        let shares: Vec<KeyMaterial> = self.share_ledger().into_values().collect();
        Ok(xor_combine(&shares)?)
    }

    /// Feed a message through the network without any group operation,
    /// returning whether any node accepted it.
    pub fn inject(&mut self, msg: ProtocolMessage, link: &mut dyn Link) -> usize {
        let before = self.nodes.clone();
        self.pump(vec![msg], link);
        self.nodes
            .iter()
            .filter(|(id, n)| before.get(id) != Some(n))
            .count()
    }

    fn pump(&mut self, start: Vec<ProtocolMessage>, link: &mut dyn Link) -> PumpReport {
        let mut report = PumpReport::default();
        let mut queue: VecDeque<(f64, ProtocolMessage)> =
            start.into_iter().map(|m| (self.clock, m)).collect();
        while let Some((t, msg)) = queue.pop_front() {
            self.clock = self.clock.max(t);
            let recipients: Vec<NodeId> = match msg.receiver {
                Receiver::Node(r) => {
                    if self.nodes.contains_key(&r) {
                        vec![r]
                    } else {
                        Vec::new()
                    }
                }
                Receiver::Broadcast => self.nodes.keys().copied().filter(|n| *n != msg.sender).collect(),
            };
            let mut delivered = Vec::new();
            for r in recipients {
                if !link.deliver(&msg, r, t) {
                    report.lost.push((msg.sender, r));
                    continue;
                }
                delivered.push(r);
                let node = self.nodes.get_mut(&r).expect("recipient exists");
                match node.step(&msg, t) {
                    Ok(out) => {
                        for o in out {
                            queue.push_back((t + self.config.latency, o));
                        }
                    }
                    Err(e) => {
                        if let StepError::DigestMismatch(n) = e {
                            report.digest_mismatch.push(n);
                        }
                        *self.drops.entry(drop_reason(&e).to_string()).or_default() += 1;
                    }
                }
            }
            self.transcript.push(TranscriptEntry {
                time: t,
                epoch: self.epoch,
                msg,
                delivered,
            });
        }
        report
    }

    fn timeout_from(&mut self, report: &PumpReport, fallback: (NodeId, NodeId)) -> GkaError {
        self.clock += self.config.timeout;
        let (from, to) = report.lost.first().copied().unwrap_or(fallback);
        GkaError::Timeout { from, to }
    }

    /// Runs `op`; on failure every node is restored but the transcript,
    /// counters and clock keep what happened.
    fn atomically<T>(
        &mut self,
        op: impl FnOnce(&mut Self) -> Result<T, GkaError>,
    ) -> Result<T, GkaError> {
        let snapshot = (
            self.tree.clone(),
            self.nodes.clone(),
            self.epoch,
            self.keys.clone(),
            self.membership.clone(),
        );
        let out = op(self);
        if out.is_err() {
            self.tree = snapshot.0;
            self.nodes = snapshot.1;
            self.epoch = snapshot.2;
            self.keys = snapshot.3;
            self.membership = snapshot.4;
        }
        out
    }

    fn start_pending_initiations(&mut self) -> Result<Vec<ProtocolMessage>, GkaError> {
        let mut out = Vec::new();
        // Deepest first so the queue roughly follows the bottom-up order.
        let mut order: Vec<NodeId> = self.nodes.keys().copied().collect();
        order.sort_by_key(|n| (std::cmp::Reverse(self.tree.level(*n).unwrap_or(1)), *n));
        for id in order {
            let node = self.nodes.get_mut(&id).expect("listed");
            out.extend(
                node.start_initiation()
                    .map_err(|source| GkaError::Start { node: id, source })?,
            );
        }
        Ok(out)
    }

    fn check_initiation(&mut self, report: &PumpReport) -> Result<(), GkaError> {
        let stuck = self
            .nodes
            .iter()
            .find(|(_, n)| !n.initiation_done())
            .map(|(id, n)| (*id, n.awaiting().iter().next().copied()));
        if let Some((id, child)) = stuck {
            let fallback = match child {
                Some(c) => (c, id),
                None => (id, self.nodes[&id].view().parent.unwrap_or(id)),
            };
            return Err(self.timeout_from(report, fallback));
        }
        let root = &self.nodes[&self.tree.root()];
        if root.subkey().is_none() {
            return Err(self.timeout_from(report, (self.tree.root(), self.tree.root())));
        }
        Ok(())
    }

    fn initiation(&mut self, link: &mut dyn Link) -> Result<(KeyMaterial, BTreeMap<NodeId, KeyMaterial>), GkaError> {
        let start = self.start_pending_initiations()?;
        let report = self.pump(start, link);
        self.check_initiation(&report)?;
        let root = &self.nodes[&self.tree.root()];
        Ok((
            root.subkey().cloned().expect("checked"),
            root.local_keys().clone(),
        ))
    }

    fn agreement(&mut self, link: &mut dyn Link) -> Result<SessionKeys, GkaError> {
        let root_id = self.tree.root();
        let checker = self.tree.checker();
        let start = self
            .nodes
            .get_mut(&root_id)
            .expect("root present")
            .start_agreement()
            .map_err(|source| GkaError::Start { node: root_id, source })?;
        let report = self.pump(start, link);
        let ch = &self.nodes[&checker];
        if ch.session_key().is_none() {
            return Err(self.timeout_from(&report, (root_id, checker)));
        }
        if let Some(&n) = ch.confirmations_outstanding().iter().next() {
            if report.digest_mismatch.contains(&n) {
                return Err(GkaError::CheckerVerificationFailure(n));
            }
            return Err(self.timeout_from(&report, (n, checker)));
        }
        self.finish_epoch()
    }

    fn finish_epoch(&mut self) -> Result<SessionKeys, GkaError> {
        let epoch = self.epoch + 1;
        for n in self.nodes.values_mut() {
            n.commit(epoch);
        }
        self.epoch = epoch;
        let global = self.nodes[&self.tree.checker()]
            .session_key()
            .cloned()
            .ok_or(GkaError::NotEstablished)?;
        let keys = SessionKeys {
            global,
            local: self.nodes[&self.tree.root()].local_keys().clone(),
            epoch,
        };
        self.keys = Some(keys.clone());
        Ok(keys)
    }

    /// Key Initiation over every tree edge (and the root–checker link).
    /// Returns the root's subkey and local keys.
    pub fn run_key_initiation(
        &mut self,
        link: &mut dyn Link,
    ) -> Result<(KeyMaterial, BTreeMap<NodeId, KeyMaterial>), GkaError> {
        self.atomically(|g| {
            for n in g.nodes.values_mut() {
                n.begin_full_initiation();
            }
            g.initiation(link)
        })
    }

    /// Session Key Agreement; requires a completed initiation.
    pub fn run_session_agreement(&mut self, link: &mut dyn Link) -> Result<SessionKeys, GkaError> {
        self.atomically(|g| g.agreement(link))
    }

    /// Initiation followed by agreement, as one epoch.
    pub fn establish(&mut self, link: &mut dyn Link) -> Result<SessionKeys, GkaError> {
        self.atomically(|g| {
            for n in g.nodes.values_mut() {
                n.begin_full_initiation();
            }
            g.initiation(link)?;
            g.agreement(link)
        })
    }

    /// Re-run Tree Path Key Initiation for `refresh` (closed under ancestors)
    /// on `tree`, then the agreement.
    fn membership_epoch(
        &mut self,
        tree: KeyTree,
        refresh: BTreeSet<NodeId>,
        fresh_checker: bool,
        link: &mut dyn Link,
    ) -> Result<SessionKeys, GkaError> {
        let next_epoch = self.epoch + 1;
        let group: Vec<NodeId> = tree.group().into_iter().collect();
        for id in &group {
            let view = view_for(&tree, *id);
            let node = self.nodes.get_mut(id).expect("group member has state");
            let in_path = refresh.contains(id);
            let share = if in_path || (fresh_checker && *id == tree.checker()) {
                Some(self.config.suite.random_key(&mut self.rng))
            } else {
                None
            };
            let active = view
                .children
                .iter()
                .copied()
                .filter(|c| refresh.contains(c))
                .collect();
            node.begin_membership_epoch(view, next_epoch, &group, share, in_path, active);
        }
        self.tree = tree;
        self.membership.push(MembershipRecord {
            epoch: next_epoch,
            group,
        });
        self.initiation(link)?;
        self.agreement(link)
    }

    fn path_closure(tree: &KeyTree, seeds: impl IntoIterator<Item = NodeId>) -> Result<BTreeSet<NodeId>, GkaError> {
        let mut out = BTreeSet::from([tree.root()]);
        for s in seeds {
            out.extend(tree.key_path(s)?.0);
        }
        Ok(out)
    }

    /// Admit `joiner` (accept-all policy) and rekey its key path.
    pub fn member_join(
        &mut self,
        joiner: NodeId,
        graph: &Graph,
        link: &mut dyn Link,
    ) -> Result<SessionKeys, GkaError> {
        if self.keys.is_none() {
            return Err(GkaError::NotEstablished);
        }
        self.atomically(|g| {
            let tree = g.tree.attach_member(joiner, graph)?;
            let mut seeds = g.tree.restructured(&tree);
            seeds.insert(joiner);
            let refresh = Self::path_closure(&tree, seeds)?;

            let root = g.tree.root();
            let group: Vec<NodeId> = tree.group().into_iter().collect();
            let km_next = next_master_key(
                &g.config.suite,
                g.nodes[&root].master_key(),
                g.epoch + 1,
                &group,
            );
            let share = g.config.suite.random_key(&mut g.rng);
            let handed = match g.config.admission {
                Admission::NextMasterKey => km_next.clone(),
                Admission::CurrentMasterKey => g.nodes[&root].master_key().clone(),
            };
            let mut state = NodeProtocolState::new(
                joiner,
                g.config.suite,
                g.config.options,
                view_for(&tree, joiner),
                handed,
                share,
                node_seed(g.config.seed ^ g.epoch.rotate_left(17), joiner),
            );
            if g.config.admission == Admission::NextMasterKey {
                state.admit(km_next);
            }
            let request = state.join_request();
            g.nodes.insert(joiner, state);
            g.pump(vec![request], link);
            g.membership_epoch(tree, refresh, false, link)
        })
    }

    /// Remove `leaver`; orphans re-attach or are dropped, and every affected
    /// path rekeys. A departing checker is replaced by a level-one member.
    pub fn member_leave(
        &mut self,
        leaver: NodeId,
        graph: &Graph,
        link: &mut dyn Link,
    ) -> Result<SessionKeys, GkaError> {
        if self.keys.is_none() {
            return Err(GkaError::NotEstablished);
        }
        if !self.nodes.contains_key(&leaver) {
            return Err(GkaError::UnknownNode(leaver));
        }
        self.atomically(|g| {
            let checker_leaves = leaver == g.tree.checker();
            let detached = if checker_leaves {
                g.tree.reselect_checker(graph, &mut g.rng)?
            } else {
                g.tree.detach_member(leaver, graph)?
            };
            g.nodes.remove(&leaver);
            for d in &detached.dropped {
                g.nodes.remove(d);
            }
            let refresh = Self::path_closure(&detached.tree, detached.affected.iter().copied())?;
            g.membership_epoch(detached.tree, refresh, checker_leaves, link)
        })
    }

    /// Checker-driven refresh of the global key.
    pub fn periodic_global_rekey(
        &mut self,
        fresh: Option<KeyMaterial>,
        link: &mut dyn Link,
    ) -> Result<SessionKeys, GkaError> {
        if self.keys.is_none() {
            return Err(GkaError::NotEstablished);
        }
        self.atomically(|g| {
            let checker = g.tree.checker();
            let start = g
                .nodes
                .get_mut(&checker)
                .expect("checker present")
                .start_global_rekey(fresh)
                .map_err(|source| GkaError::Start { node: checker, source })?;
            let report = g.pump(start, link);
            if let Some(&n) = g.nodes[&checker].confirmations_outstanding().iter().next() {
                if report.digest_mismatch.contains(&n) {
                    return Err(GkaError::RekeyMismatch(n));
                }
                return Err(g.timeout_from(&report, (checker, n)));
            }
            g.finish_epoch()
        })
    }

    /// Level-one member `j` refreshes its local key with the root.
    pub fn periodic_local_rekey(
        &mut self,
        j: NodeId,
        fresh: Option<KeyMaterial>,
        link: &mut dyn Link,
    ) -> Result<KeyMaterial, GkaError> {
        if self.keys.is_none() {
            return Err(GkaError::NotEstablished);
        }
        let root = self.tree.root();
        if self.tree.parent(j) != Some(root) {
            return Err(GkaError::NotLevelOne(j));
        }
        self.atomically(|g| {
            let start = g
                .nodes
                .get_mut(&j)
                .expect("member present")
                .start_local_rekey(fresh)
                .map_err(|source| GkaError::Start { node: j, source })?;
            let report = g.pump(start, link);
            let r = &g.nodes[&root];
            if r.local_rekey_pending(j) {
                return Err(GkaError::RekeyMismatch(j));
            }
            let mine = g.nodes[&j].local_key(j).cloned();
            if r.local_key(j).cloned() != mine {
                return Err(g.timeout_from(&report, (j, root)));
            }
            g.finish_epoch()?;
            Ok(mine.expect("level-one member holds a local key"))
        })
    }
}

fn graph_restricted(graph: &Graph, members: &BTreeSet<NodeId>) -> Graph {
    let mut g = Graph::new();
    for &m in members {
        g.add_node(m);
        for n in graph.neighbors(m) {
            if members.contains(&n) {
                g.add_edge(m, n);
            }
        }
    }
    g
}

fn drop_reason(e: &StepError) -> &'static str {
    match e {
        StepError::NotAddressed => "not_addressed",
        StepError::IntegrityFailure => "integrity",
        StepError::NonceMismatch => "nonce",
        StepError::UnexpectedKind(_) => "unexpected",
        StepError::Malformed => "malformed",
        StepError::DigestMismatch(_) => "digest",
        StepError::Crypto(_) => "crypto",
    }
}

/// Key Initiation with caller-supplied shares on a lossless network.
pub fn run_key_initiation(
    tree: &KeyTree,
    shares: &BTreeMap<NodeId, KeyMaterial>,
    master_key: &KeyMaterial,
    suite: Suite,
) -> Result<(KeyMaterial, BTreeMap<NodeId, KeyMaterial>), GkaError> {
    let config = GroupConfig {
        suite,
        ..GroupConfig::default()
    };
    let mut g = Group::from_tree(config, master_key.clone(), tree.clone(), shares);
    g.run_key_initiation(&mut PerfectLink)
}
