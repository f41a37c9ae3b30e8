//! Local and global intrusion response.
//!
//! Local response: an initiator exchanges detector map summaries with its
//! one-hop neighbors under local keys, composes a per-node table of their
//! security status and picks a forwarder from it. Global response: a node
//! whose map is mostly attack broadcasts an alarm under the group key and
//! every node in range quarantines it.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use sha2::{Digest as _, Sha256};

use crate::crypto::{Digest, KeyMaterial, Suite};
use crate::gka::{MessageKind, ProtocolMessage, Receiver, WireError};
use crate::gka::message::{Reader, Writer};
use crate::graph::{Graph, NodeId};

/// Default number of classified samples a coverage figure is computed over.
pub const DEFAULT_WINDOW: usize = 30;
/// Strict lower bound on coverage for the global trigger.
pub const TRIGGER_FRACTION: f64 = 2.0 / 3.0;
/// Encoded length of a [`SecurityMap`].
pub const MAP_LEN: usize = 4 + 8 + 8 + 4 + 32;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ResponseError {
    #[error("no secure neighbor among the candidates")]
    NoSecureNeighbor,
    #[error("coverage window holds {have} samples, {need} required")]
    InsufficientWindow { have: usize, need: usize },
    #[error("coverage {0} outside [0, 1]")]
    InvalidCoverage(f64),
    #[error("node {0} has not crossed the global trigger")]
    NotTriggered(NodeId),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("malformed {} payload", .0.name())]
    Malformed(MessageKind),
    #[error("unexpected {} message", .0.name())]
    UnexpectedKind(MessageKind),
    #[error("message not addressed to node {0}")]
    NotAddressed(NodeId),
    #[error("keyed digest from {0} failed verification")]
    DigestFailure(NodeId),
    #[error("alarm from {0} replayed")]
    Replay(NodeId),
}

/// Compact, authenticated summary of one node's detector map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SecurityMap {
    pub owner: NodeId,
    /// Key epoch the summary is authenticated under.
    pub epoch: u64,
    /// Fraction of the window's classified samples that landed on attack regions.
    pub coverage: f64,
    pub window: u32,
    /// SHA-256 of the serialized detector model.
    pub model: [u8; 32],
}

impl SecurityMap {
    pub fn new(owner: NodeId, epoch: u64, coverage: f64, window: u32, model: [u8; 32]) -> Result<Self, ResponseError> {
        if !(0.0..=1.0).contains(&coverage) {
            return Err(ResponseError::InvalidCoverage(coverage));
        }
        Ok(SecurityMap {
            owner,
            epoch,
            coverage,
            window,
            model,
        })
    }

    pub fn from_window(owner: NodeId, epoch: u64, window: &CoverageWindow, model: [u8; 32]) -> Self {
        SecurityMap {
            owner,
            epoch,
            coverage: window.coverage(),
            window: window.len() as u32,
            model,
        }
    }

    pub fn model_digest(model_bytes: &[u8]) -> [u8; 32] {
        Sha256::digest(model_bytes).into()
    }

    pub fn attack_dominant(&self) -> bool {
        self.coverage > TRIGGER_FRACTION
    }

    pub fn to_bytes(&self) -> [u8; MAP_LEN] {
        let v = Writer::new()
            .id(self.owner)
            .u64(self.epoch)
            .u64(self.coverage.to_bits())
            .u32(self.window)
            .bytes(&self.model)
            .finish();
        v.try_into().expect("fixed layout")
    }

    pub fn from_bytes(b: &[u8]) -> Option<Self> {
        if b.len() != MAP_LEN {
            return None;
        }
        let mut r = Reader::new(b);
        let owner = r.id()?;
        let epoch = r.u64()?;
        let coverage = f64::from_bits(r.u64()?);
        let window = r.u32()?;
        let model = r.bytes(32)?.try_into().ok()?;
        SecurityMap::new(owner, epoch, coverage, window, model).ok()
    }
}

/// Sliding window over the most recent classified samples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoverageWindow {
    cap: usize,
    samples: VecDeque<bool>,
}

impl CoverageWindow {
    pub fn new(cap: usize) -> Self {
        CoverageWindow {
            cap: cap.max(1),
            samples: VecDeque::new(),
        }
    }

    pub fn push(&mut self, attack: bool) {
        if self.samples.len() == self.cap {
            self.samples.pop_front();
        }
        self.samples.push_back(attack);
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn coverage(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().filter(|a| **a).count() as f64 / self.samples.len() as f64
    }
}

/// True iff coverage is strictly above two thirds.
pub fn check_global_trigger(map: &SecurityMap, min_window: usize) -> Result<bool, ResponseError> {
    if (map.window as usize) < min_window {
        return Err(ResponseError::InsufficientWindow {
            have: map.window as usize,
            need: min_window,
        });
    }
    Ok(map.coverage > TRIGGER_FRACTION)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Verdict {
    Normal,
    AttackDominant,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapEntry {
    pub coverage: f64,
    pub verdict: Verdict,
}

/// Per-node security status of one initiator's neighborhood.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalLocalMap {
    pub owner: NodeId,
    pub entries: BTreeMap<NodeId, MapEntry>,
    pub composed_at: f64,
}

impl GlobalLocalMap {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new()
            .id(self.owner)
            .u64(self.composed_at.to_bits())
            .u32(self.entries.len() as u32);
        for (id, e) in &self.entries {
            w = w.id(*id).u64(e.coverage.to_bits()).bytes(&[e.verdict as u8]);
        }
        w.finish()
    }

    pub fn from_bytes(b: &[u8]) -> Option<Self> {
        let mut r = Reader::new(b);
        let owner = r.id()?;
        let composed_at = f64::from_bits(r.u64()?);
        let n = r.u32()? as usize;
        if r.remaining() != n.checked_mul(13)? {
            return None;
        }
        let mut entries = BTreeMap::new();
        for _ in 0..n {
            let id = r.id()?;
            let coverage = f64::from_bits(r.u64()?);
            let verdict = match r.u8()? {
                0 => Verdict::Normal,
                1 => Verdict::AttackDominant,
                _ => return None,
            };
            if !(0.0..=1.0).contains(&coverage) || entries.insert(id, MapEntry { coverage, verdict }).is_some() {
                return None;
            }
        }
        Some(GlobalLocalMap {
            owner,
            entries,
            composed_at,
        })
    }
}

pub fn compose_global_local_map(own: &SecurityMap, verified: &[SecurityMap], time: f64) -> GlobalLocalMap {
    let entries = std::iter::once(own)
        .chain(verified)
        .map(|m| {
            let verdict = if m.attack_dominant() {
                Verdict::AttackDominant
            } else {
                Verdict::Normal
            };
            (m.owner, MapEntry { coverage: m.coverage, verdict })
        })
        .collect();
    GlobalLocalMap {
        owner: own.owner,
        entries,
        composed_at: time,
    }
}

/// Lowest-coverage candidate that is neither quarantined nor attack-dominant;
/// ties go to the lower id.
pub fn select_forwarding_node(
    glm: &GlobalLocalMap,
    candidates: &BTreeSet<NodeId>,
    quarantined: &BTreeSet<NodeId>,
) -> Result<NodeId, ResponseError> {
    candidates
        .iter()
        .filter(|c| !quarantined.contains(c))
        .filter_map(|c| glm.entries.get(c).map(|e| (*c, e)))
        .filter(|(_, e)| e.verdict == Verdict::Normal)
        .min_by(|a, b| a.1.coverage.total_cmp(&b.1.coverage).then(a.0.cmp(&b.0)))
        .map(|(c, _)| c)
        .ok_or(ResponseError::NoSecureNeighbor)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoutingTable {
    pub owner: NodeId,
    pub next_hop: BTreeMap<NodeId, NodeId>,
    pub quarantined: BTreeSet<NodeId>,
}

impl RoutingTable {
    pub fn new(owner: NodeId, graph: &Graph) -> Self {
        let mut t = RoutingTable {
            owner,
            next_hop: BTreeMap::new(),
            quarantined: BTreeSet::new(),
        };
        t.recompute(graph);
        t
    }

    /// Shortest-hop routes that avoid quarantined nodes. Among equal-length
    /// routes the lowest-id first hop wins.
    pub fn recompute(&mut self, graph: &Graph) {
        self.next_hop.clear();
        if !graph.contains(self.owner) {
            return;
        }
        let mut seen = BTreeSet::from([self.owner]);
        let mut queue = VecDeque::new();
        for n in graph.neighbors(self.owner) {
            if !self.quarantined.contains(&n) && seen.insert(n) {
                self.next_hop.insert(n, n);
                queue.push_back(n);
            }
        }
        while let Some(u) = queue.pop_front() {
            let hop = self.next_hop[&u];
            for v in graph.neighbors(u) {
                if !self.quarantined.contains(&v) && seen.insert(v) {
                    self.next_hop.insert(v, hop);
                    queue.push_back(v);
                }
            }
        }
    }

    pub fn quarantine(&mut self, node: NodeId, graph: &Graph) {
        if self.quarantined.insert(node) {
            self.recompute(graph);
        }
    }

    pub fn lift(&mut self, node: NodeId, graph: &Graph) {
        if self.quarantined.remove(&node) {
            self.recompute(graph);
        }
    }

    /// Whether `node` appears as a destination or a next hop.
    pub fn references(&self, node: NodeId) -> bool {
        self.next_hop.contains_key(&node) || self.next_hop.values().any(|h| *h == node)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum EventKind {
    MapAccepted,
    MapRejected,
    MapMissing,
    MapComposed,
    ForwarderSelected,
    AlarmSent,
    AlarmAccepted,
    AlarmRejected,
    QuarantineLifted,
    Detection,
    KeyEpoch,
    KeyFailure,
    Join,
    Leave,
    Rekey,
    Rebuild,
    Adversary,
}

impl EventKind {
    pub fn name(self) -> &'static str {
        match self {
            EventKind::MapAccepted => "map_accepted",
            EventKind::MapRejected => "map_rejected",
            EventKind::MapMissing => "map_missing",
            EventKind::MapComposed => "map_composed",
            EventKind::ForwarderSelected => "forwarder_selected",
            EventKind::AlarmSent => "alarm_sent",
            EventKind::AlarmAccepted => "alarm_accepted",
            EventKind::AlarmRejected => "alarm_rejected",
            EventKind::QuarantineLifted => "quarantine_lifted",
            EventKind::Detection => "detection",
            EventKind::KeyEpoch => "key_epoch",
            EventKind::KeyFailure => "key_failure",
            EventKind::Join => "join",
            EventKind::Leave => "leave",
            EventKind::Rekey => "rekey",
            EventKind::Rebuild => "rebuild",
            EventKind::Adversary => "adversary",
        }
    }
}

/// One line of the response trace: `time,event_kind,node,peer,detail`.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceEvent {
    pub time: f64,
    pub kind: EventKind,
    pub node: NodeId,
    pub peer: Option<NodeId>,
    pub detail: String,
}

impl TraceEvent {
    pub fn new(time: f64, kind: EventKind, node: NodeId, peer: Option<NodeId>, detail: impl Into<String>) -> Self {
        TraceEvent {
            time,
            kind,
            node,
            peer,
            detail: detail.into(),
        }
    }
}

impl fmt::Display for TraceEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.6},{},{},", self.time, self.kind.name(), self.node)?;
        match self.peer {
            Some(p) => write!(f, "{p}")?,
            None => write!(f, "-")?,
        }
        write!(f, ",{}", self.detail)
    }
}

/// Carries one encoded frame to one receiver; may alter it or drop it.
pub trait Channel {
    fn carry(&mut self, _frame: &mut Vec<u8>, _to: NodeId) -> bool {
        true
    }
}

pub struct CleanChannel;

impl Channel for CleanChannel {}

impl<F: FnMut(&mut Vec<u8>, NodeId) -> bool> Channel for F {
    fn carry(&mut self, frame: &mut Vec<u8>, to: NodeId) -> bool {
        self(frame, to)
    }
}

fn tag(suite: &Suite, key: &KeyMaterial, parts: &[&[u8]]) -> Vec<u8> {
    suite.keyed_hash(key, &parts.concat()).0
}

fn ids_bytes(ids: &[NodeId]) -> Vec<u8> {
    ids.iter().flat_map(|n| n.0.to_be_bytes()).collect()
}

fn expect(msg: &ProtocolMessage, kind: MessageKind, me: NodeId) -> Result<(), ResponseError> {
    if msg.kind != kind {
        return Err(ResponseError::UnexpectedKind(msg.kind));
    }
    if !msg.is_for(me) {
        return Err(ResponseError::NotAddressed(me));
    }
    Ok(())
}

/// Step 1: the initiator's map and nonce, with one local-key digest per
/// neighbor listed in the header ids.
pub fn map_offer(suite: &Suite, own: &SecurityMap, keys: &BTreeMap<NodeId, KeyMaterial>, nonce: u64) -> ProtocolMessage {
    let ids: Vec<NodeId> = keys.keys().copied().collect();
    let map = own.to_bytes();
    let idb = ids_bytes(&ids);
    let mut w = Writer::new().bytes(&map).u64(nonce);
    for k in keys.values() {
        w = w.bytes(&tag(suite, k, &[&own.owner.0.to_be_bytes(), &map, &nonce.to_be_bytes(), &idb]));
    }
    ProtocolMessage::new(MessageKind::MapOffer, own.owner, Receiver::Broadcast, ids, w.finish())
}

pub fn open_map_offer(
    suite: &Suite,
    me: NodeId,
    key: &KeyMaterial,
    msg: &ProtocolMessage,
) -> Result<(SecurityMap, u64), ResponseError> {
    expect(msg, MessageKind::MapOffer, me)?;
    let idx = msg.ids.iter().position(|n| *n == me).ok_or(ResponseError::NotAddressed(me))?;
    let dl = suite.digest_len();
    let bad = || ResponseError::Malformed(MessageKind::MapOffer);
    if msg.payload.len() != MAP_LEN + 8 + dl * msg.ids.len() {
        return Err(bad());
    }
    let mut r = Reader::new(&msg.payload);
    let map_b = r.bytes(MAP_LEN).ok_or_else(bad)?;
    let nonce = r.u64().ok_or_else(bad)?;
    let tags = r.rest();
    let mine = &tags[idx * dl..(idx + 1) * dl];
    let data = [&msg.sender.0.to_be_bytes()[..], map_b, &nonce.to_be_bytes(), &ids_bytes(&msg.ids)].concat();
    if !suite.verify(key, &data, &Digest(mine.to_vec())) {
        return Err(ResponseError::DigestFailure(msg.sender));
    }
    let map = SecurityMap::from_bytes(map_b).ok_or_else(bad)?;
    if map.owner != msg.sender {
        return Err(bad());
    }
    Ok((map, nonce))
}

/// Step 2: a neighbor's map, bound to the initiator's nonce plus one.
pub fn map_reply(suite: &Suite, key: &KeyMaterial, map: &SecurityMap, initiator: NodeId, nonce: u64) -> ProtocolMessage {
    let b = map.to_bytes();
    let t = tag(suite, key, &[&map.owner.0.to_be_bytes(), &nonce.wrapping_add(1).to_be_bytes(), &b]);
    ProtocolMessage::new(
        MessageKind::MapReply,
        map.owner,
        Receiver::Node(initiator),
        vec![],
        Writer::new().bytes(&b).bytes(&t).finish(),
    )
}

pub fn open_map_reply(
    suite: &Suite,
    me: NodeId,
    key: &KeyMaterial,
    msg: &ProtocolMessage,
    nonce: u64,
) -> Result<SecurityMap, ResponseError> {
    expect(msg, MessageKind::MapReply, me)?;
    let bad = || ResponseError::Malformed(MessageKind::MapReply);
    if msg.payload.len() != MAP_LEN + suite.digest_len() || !msg.ids.is_empty() {
        return Err(bad());
    }
    let (b, t) = msg.payload.split_at(MAP_LEN);
    let data = [&msg.sender.0.to_be_bytes()[..], &nonce.wrapping_add(1).to_be_bytes(), b].concat();
    if !suite.verify(key, &data, &Digest(t.to_vec())) {
        return Err(ResponseError::DigestFailure(msg.sender));
    }
    let map = SecurityMap::from_bytes(b).ok_or_else(bad)?;
    if map.owner != msg.sender {
        return Err(bad());
    }
    Ok(map)
}

/// Step 4: the composed table, one digest per verified neighbor.
pub fn map_compose(
    suite: &Suite,
    glm: &GlobalLocalMap,
    keys: &BTreeMap<NodeId, KeyMaterial>,
    nonce: u64,
) -> ProtocolMessage {
    let ids: Vec<NodeId> = keys.keys().copied().collect();
    let body = glm.to_bytes();
    let idb = ids_bytes(&ids);
    let n2 = nonce.wrapping_add(2).to_be_bytes();
    let mut w = Writer::new().u32(body.len() as u32).bytes(&body);
    for k in keys.values() {
        w = w.bytes(&tag(suite, k, &[&glm.owner.0.to_be_bytes(), &n2, &body, &idb]));
    }
    ProtocolMessage::new(MessageKind::MapCompose, glm.owner, Receiver::Broadcast, ids, w.finish())
}

pub fn open_map_compose(
    suite: &Suite,
    me: NodeId,
    key: &KeyMaterial,
    msg: &ProtocolMessage,
    nonce: u64,
) -> Result<GlobalLocalMap, ResponseError> {
    expect(msg, MessageKind::MapCompose, me)?;
    let idx = msg.ids.iter().position(|n| *n == me).ok_or(ResponseError::NotAddressed(me))?;
    let dl = suite.digest_len();
    let bad = || ResponseError::Malformed(MessageKind::MapCompose);
    let mut r = Reader::new(&msg.payload);
    let len = r.u32().ok_or_else(bad)? as usize;
    let body = r.bytes(len).ok_or_else(bad)?;
    if r.remaining() != dl * msg.ids.len() {
        return Err(bad());
    }
    let tags = r.rest();
    let mine = &tags[idx * dl..(idx + 1) * dl];
    let data = [
        &msg.sender.0.to_be_bytes()[..],
        &nonce.wrapping_add(2).to_be_bytes(),
        body,
        &ids_bytes(&msg.ids),
    ]
    .concat();
    if !suite.verify(key, &data, &Digest(mine.to_vec())) {
        return Err(ResponseError::DigestFailure(msg.sender));
    }
    let glm = GlobalLocalMap::from_bytes(body).ok_or_else(bad)?;
    if glm.owner != msg.sender {
        return Err(bad());
    }
    Ok(glm)
}

/// One neighbor taking part in local map distribution.
#[derive(Debug, Clone)]
pub struct Neighbor {
    pub id: NodeId,
    /// The neighbor's copy of the key it shares with the initiator.
    pub key: KeyMaterial,
    pub map: SecurityMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalDistribution {
    pub map: GlobalLocalMap,
    /// Neighbors whose reply failed verification at the initiator.
    pub rejected: BTreeSet<NodeId>,
    /// Neighbors that sent nothing the initiator could use.
    pub missing: BTreeSet<NodeId>,
    /// Neighbors that verified and stored the composed table.
    pub confirmed: BTreeSet<NodeId>,
    /// Neighbors that rejected a frame from the initiator.
    pub refused: BTreeSet<NodeId>,
    pub events: Vec<TraceEvent>,
    pub transcript: Vec<ProtocolMessage>,
}

impl LocalDistribution {
    /// Digest failures seen on either side.
    pub fn tamper_count(&self) -> usize {
        self.rejected.len() + self.refused.len()
    }
}

fn carry<C: Channel>(channel: &mut C, msg: &ProtocolMessage, to: NodeId) -> Option<Result<ProtocolMessage, ResponseError>> {
    let mut frame = msg.encode().expect("response frames fit the wire format");
    if !channel.carry(&mut frame, to) {
        return None;
    }
    Some(ProtocolMessage::decode(&frame).map_err(ResponseError::from))
}

/// Runs the four-step local map distribution. `keys` holds the initiator's
/// local key for each neighbor; neighbors without one are not addressed.
pub fn distribute_local_maps<C: Channel>(
    suite: &Suite,
    own: &SecurityMap,
    keys: &BTreeMap<NodeId, KeyMaterial>,
    neighbors: &[Neighbor],
    nonce: u64,
    time: f64,
    channel: &mut C,
) -> LocalDistribution {
    let me = own.owner;
    let mut out = LocalDistribution {
        map: compose_global_local_map(own, &[], time),
        rejected: BTreeSet::new(),
        missing: BTreeSet::new(),
        confirmed: BTreeSet::new(),
        refused: BTreeSet::new(),
        events: Vec::new(),
        transcript: Vec::new(),
    };
    let offer = map_offer(suite, own, keys, nonce);
    out.transcript.push(offer.clone());
    let mut verified = Vec::new();
    for nb in neighbors.iter().filter(|n| keys.contains_key(&n.id)) {
        let opened = carry(channel, &offer, nb.id).map(|m| m.and_then(|m| open_map_offer(suite, nb.id, &nb.key, &m)));
        let n1 = match opened {
            Some(Ok((_, n1))) => n1,
            Some(Err(e)) => {
                out.refused.insert(nb.id);
                out.events
                    .push(TraceEvent::new(time, EventKind::MapRejected, nb.id, Some(me), e.to_string()));
                continue;
            }
            None => {
                out.missing.insert(nb.id);
                continue;
            }
        };
        let reply = map_reply(suite, &nb.key, &nb.map, me, n1);
        out.transcript.push(reply.clone());
        match carry(channel, &reply, me).map(|m| m.and_then(|m| open_map_reply(suite, me, &keys[&nb.id], &m, nonce))) {
            Some(Ok(map)) => {
                out.events.push(TraceEvent::new(
                    time,
                    EventKind::MapAccepted,
                    me,
                    Some(nb.id),
                    format!("coverage={:.6}", map.coverage),
                ));
                verified.push(map);
            }
            Some(Err(e)) => {
                out.rejected.insert(nb.id);
                out.events
                    .push(TraceEvent::new(time, EventKind::MapRejected, me, Some(nb.id), e.to_string()));
            }
            None => {
                out.missing.insert(nb.id);
                out.events
                    .push(TraceEvent::new(time, EventKind::MapMissing, me, Some(nb.id), "no reply"));
            }
        }
    }
    out.map = compose_global_local_map(own, &verified, time);
    out.events.push(TraceEvent::new(
        time,
        EventKind::MapComposed,
        me,
        None,
        format!("entries={}", out.map.entries.len()),
    ));
    let ok_keys: BTreeMap<NodeId, KeyMaterial> = verified.iter().map(|m| (m.owner, keys[&m.owner].clone())).collect();
    let compose = map_compose(suite, &out.map, &ok_keys, nonce);
    out.transcript.push(compose.clone());
    for nb in neighbors.iter().filter(|n| ok_keys.contains_key(&n.id)) {
        match carry(channel, &compose, nb.id).map(|m| m.and_then(|m| open_map_compose(suite, nb.id, &nb.key, &m, nonce))) {
            Some(Ok(_)) => {
                out.confirmed.insert(nb.id);
            }
            Some(Err(e)) => {
                out.refused.insert(nb.id);
                out.events
                    .push(TraceEvent::new(time, EventKind::MapRejected, nb.id, Some(me), e.to_string()));
            }
            None => {}
        }
    }
    out
}

/// The alarm: the victim's map in clear, a nonce and a group-key digest over both.
pub fn alarm_message(suite: &Suite, victim: &SecurityMap, gk: &KeyMaterial, nonce: u64) -> ProtocolMessage {
    let b = victim.to_bytes();
    let t = tag(suite, gk, &[&victim.owner.0.to_be_bytes(), &b, &nonce.to_be_bytes()]);
    ProtocolMessage::new(
        MessageKind::GlobalAlarm,
        victim.owner,
        Receiver::Broadcast,
        vec![],
        Writer::new().bytes(&b).u64(nonce).bytes(&t).finish(),
    )
}

pub fn open_alarm(
    suite: &Suite,
    me: NodeId,
    gk: &KeyMaterial,
    msg: &ProtocolMessage,
) -> Result<(SecurityMap, u64), ResponseError> {
    expect(msg, MessageKind::GlobalAlarm, me)?;
    let bad = || ResponseError::Malformed(MessageKind::GlobalAlarm);
    if msg.payload.len() != MAP_LEN + 8 + suite.digest_len() || !msg.ids.is_empty() {
        return Err(bad());
    }
    let mut r = Reader::new(&msg.payload);
    let b = r.bytes(MAP_LEN).ok_or_else(bad)?;
    let nonce = r.u64().ok_or_else(bad)?;
    let t = r.rest();
    let data = [&msg.sender.0.to_be_bytes()[..], b, &nonce.to_be_bytes()].concat();
    if !suite.verify(gk, &data, &Digest(t.to_vec())) {
        return Err(ResponseError::DigestFailure(msg.sender));
    }
    let map = SecurityMap::from_bytes(b).ok_or_else(bad)?;
    if map.owner != msg.sender {
        return Err(bad());
    }
    Ok((map, nonce))
}

/// Response-side state held by one node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResponseState {
    pub routing: RoutingTable,
    seen_alarms: BTreeSet<(NodeId, u64)>,
    pub tamper: usize,
}

impl ResponseState {
    pub fn new(owner: NodeId, graph: &Graph) -> Self {
        ResponseState {
            routing: RoutingTable::new(owner, graph),
            seen_alarms: BTreeSet::new(),
            tamper: 0,
        }
    }

    pub fn id(&self) -> NodeId {
        self.routing.owner
    }

    /// Verifies an alarm frame and quarantines its sender. Nothing changes
    /// on error except the tamper counter on digest failures.
    pub fn receive_alarm(
        &mut self,
        suite: &Suite,
        gk: &KeyMaterial,
        frame: &[u8],
        graph: &Graph,
    ) -> Result<NodeId, ResponseError> {
        let me = self.id();
        let res = ProtocolMessage::decode(frame)
            .map_err(ResponseError::from)
            .and_then(|m| open_alarm(suite, me, gk, &m));
        let (map, nonce) = match res {
            Ok(v) => v,
            Err(e) => {
                if matches!(e, ResponseError::DigestFailure(_)) {
                    self.tamper += 1;
                }
                return Err(e);
            }
        };
        if !self.seen_alarms.insert((map.owner, nonce)) {
            return Err(ResponseError::Replay(map.owner));
        }
        self.routing.quarantine(map.owner, graph);
        Ok(map.owner)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AlarmOutcome {
    pub accepted: BTreeSet<NodeId>,
    pub rejected: BTreeMap<NodeId, ResponseError>,
    pub events: Vec<TraceEvent>,
}

/// Broadcasts `victim`'s alarm to every node in its transmission range
/// (its neighbors in `graph`) that has response state; each verifies it
/// with its own copy of the group key.
#[allow(clippy::too_many_arguments)]
pub fn global_alarm<C: Channel>(
    suite: &Suite,
    victim: &SecurityMap,
    victim_gk: &KeyMaterial,
    nonce: u64,
    min_window: usize,
    graph: &Graph,
    states: &mut BTreeMap<NodeId, ResponseState>,
    keys: &BTreeMap<NodeId, KeyMaterial>,
    time: f64,
    channel: &mut C,
) -> Result<AlarmOutcome, ResponseError> {
    if !check_global_trigger(victim, min_window)? {
        return Err(ResponseError::NotTriggered(victim.owner));
    }
    let msg = alarm_message(suite, victim, victim_gk, nonce);
    let frame = msg.encode()?;
    let mut out = AlarmOutcome::default();
    out.events.push(TraceEvent::new(
        time,
        EventKind::AlarmSent,
        victim.owner,
        None,
        format!("coverage={:.6}", victim.coverage),
    ));
    let range: Vec<NodeId> = graph.neighbors(victim.owner).collect();
    for r in range {
        let (Some(st), Some(gk)) = (states.get_mut(&r), keys.get(&r)) else { continue };
        let mut f = frame.clone();
        if !channel.carry(&mut f, r) {
            continue;
        }
        match st.receive_alarm(suite, gk, &f, graph) {
            Ok(v) => {
                out.accepted.insert(r);
                out.events
                    .push(TraceEvent::new(time, EventKind::AlarmAccepted, r, Some(v), "quarantined"));
            }
            Err(e) => {
                out.events
                    .push(TraceEvent::new(time, EventKind::AlarmRejected, r, Some(victim.owner), e.to_string()));
                out.rejected.insert(r, e);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{star_topology, bridged_topology, letter};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn map(owner: u32, coverage: f64) -> SecurityMap {
        SecurityMap::new(NodeId(owner), 1, coverage, 30, [7; 32]).unwrap()
    }

    fn ids(v: &[u32]) -> BTreeSet<NodeId> {
        v.iter().map(|n| NodeId(*n)).collect()
    }

    #[test]
    fn trigger_is_strictly_above_two_thirds() {
        assert!(check_global_trigger(&map(1, 0.70), 30).unwrap());
        assert!(!check_global_trigger(&map(1, 2.0 / 3.0), 30).unwrap());
        assert!(!check_global_trigger(&map(1, 0.60), 30).unwrap());
        assert_eq!(
            check_global_trigger(&map(1, 0.9), 31),
            Err(ResponseError::InsufficientWindow { have: 30, need: 31 })
        );
    }

    #[test]
    fn coverage_window_slides() {
        let mut w = CoverageWindow::new(4);
        for a in [true, true, false, false, false, true] {
            w.push(a);
        }
        assert_eq!(w.len(), 4);
        assert_eq!(w.coverage(), 0.25);
        assert!(SecurityMap::new(NodeId(1), 0, 1.5, 1, [0; 32]).is_err());
    }

    #[test]
    fn map_bytes_round_trip() {
        let m = map(9, 0.125);
        assert_eq!(SecurityMap::from_bytes(&m.to_bytes()), Some(m));
        let g = compose_global_local_map(&m, &[map(3, 0.9), map(4, 0.0)], 2.5);
        assert_eq!(GlobalLocalMap::from_bytes(&g.to_bytes()), Some(g));
    }

    #[test]
    fn composition_flags_attack_dominant_neighbors() {
        let g = compose_global_local_map(&map(1, 0.0), &[map(2, 0.0), map(3, 0.0)], 0.0);
        assert!(g.entries.values().all(|e| e.coverage == 0.0 && e.verdict == Verdict::Normal));
        let g = compose_global_local_map(&map(1, 0.0), &[map(2, 0.9), map(3, 0.5)], 0.0);
        assert_eq!(g.entries.len(), 3);
        assert_eq!(g.entries[&NodeId(2)].verdict, Verdict::AttackDominant);
        assert_eq!(g.entries[&NodeId(3)].verdict, Verdict::Normal);
    }

    #[test]
    fn forwarder_is_lowest_coverage_then_lowest_id() {
        let g = compose_global_local_map(&map(1, 0.0), &[map(2, 0.1), map(3, 0.4), map(4, 0.1)], 0.0);
        let none = BTreeSet::new();
        assert_eq!(select_forwarding_node(&g, &ids(&[3]), &none), Ok(NodeId(3)));
        assert_eq!(select_forwarding_node(&g, &ids(&[2, 3, 4]), &none), Ok(NodeId(2)));
        assert_eq!(select_forwarding_node(&g, &ids(&[2, 3, 4]), &ids(&[2])), Ok(NodeId(4)));
        assert_eq!(
            select_forwarding_node(&g, &ids(&[2, 3, 4]), &ids(&[2, 3, 4])),
            Err(ResponseError::NoSecureNeighbor)
        );
        let g = compose_global_local_map(&map(1, 0.0), &[map(2, 0.9)], 0.0);
        assert_eq!(select_forwarding_node(&g, &ids(&[2]), &none), Err(ResponseError::NoSecureNeighbor));
    }

    #[test]
    fn routing_prefers_lowest_first_hop() {
        let g = Graph::from_edges([(1, 2), (1, 3), (2, 4), (3, 4), (4, 5)]);
        let mut t = RoutingTable::new(NodeId(1), &g);
        assert_eq!(t.next_hop[&NodeId(5)], NodeId(2));
        t.quarantine(NodeId(2), &g);
        assert_eq!(t.next_hop[&NodeId(5)], NodeId(3));
        assert!(!t.references(NodeId(2)));
        t.lift(NodeId(2), &g);
        assert_eq!(t.next_hop[&NodeId(5)], NodeId(2));
    }

    struct Setup {
        suite: Suite,
        own: SecurityMap,
        keys: BTreeMap<NodeId, KeyMaterial>,
        neighbors: Vec<Neighbor>,
    }

    fn star_setup() -> Setup {
        let suite = Suite::default();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = letter('A');
        let g = star_topology();
        let mut keys = BTreeMap::new();
        let mut neighbors = Vec::new();
        for n in g.neighbors(a) {
            let k = suite.random_key(&mut rng);
            keys.insert(n, k.clone());
            neighbors.push(Neighbor {
                id: n,
                key: k,
                map: map(n.0, rng.random_range(0.0..0.5)),
            });
        }
        Setup {
            suite,
            own: map(a.0, 0.1),
            keys,
            neighbors,
        }
    }

    #[test]
    fn lone_initiator_composes_its_own_entry() {
        let s = star_setup();
        let d = distribute_local_maps(&s.suite, &s.own, &BTreeMap::new(), &[], 1, 0.0, &mut CleanChannel);
        assert_eq!(d.map.entries.keys().copied().collect::<Vec<_>>(), vec![s.own.owner]);
    }

    #[test]
    fn star_neighborhood_is_fully_mapped() {
        let s = star_setup();
        let d = distribute_local_maps(&s.suite, &s.own, &s.keys, &s.neighbors, 77, 1.0, &mut CleanChannel);
        let want: BTreeSet<NodeId> = "ABCDG".chars().map(letter).collect();
        assert_eq!(d.map.entries.keys().copied().collect::<BTreeSet<_>>(), want);
        assert_eq!(d.confirmed.len(), 4);
        assert_eq!(d.tamper_count(), 0);
    }

    #[test]
    fn tampered_reply_digest_excludes_that_neighbor() {
        let s = star_setup();
        let victim = letter('C');
        let mut ch = |f: &mut Vec<u8>, to: NodeId| {
            // A reply from C to A: flip the last digest byte.
            if to == letter('A') && f[0] == MessageKind::MapReply.code() && f[1..5] == victim.0.to_be_bytes() {
                *f.last_mut().unwrap() ^= 1;
            }
            true
        };
        let d = distribute_local_maps(&s.suite, &s.own, &s.keys, &s.neighbors, 77, 1.0, &mut ch);
        assert!(!d.map.entries.contains_key(&victim));
        assert_eq!(d.tamper_count(), 1);
        assert_eq!(d.rejected, BTreeSet::from([victim]));
    }

    #[test]
    fn dropped_reply_is_missing_not_tampered() {
        let s = star_setup();
        let mut ch = |f: &mut Vec<u8>, _: NodeId| !(f[0] == MessageKind::MapReply.code() && f[4] == 2);
        let d = distribute_local_maps(&s.suite, &s.own, &s.keys, &s.neighbors, 5, 0.0, &mut ch);
        assert_eq!(d.missing, ids(&[2]));
        assert_eq!(d.tamper_count(), 0);
    }

    #[test]
    fn wrong_local_key_is_refused() {
        let mut s = star_setup();
        s.neighbors[0].key = KeyMaterial::zero(s.suite.key_width());
        let d = distribute_local_maps(&s.suite, &s.own, &s.keys, &s.neighbors, 5, 0.0, &mut CleanChannel);
        assert_eq!(d.refused, BTreeSet::from([s.neighbors[0].id]));
        assert_eq!(d.map.entries.len(), 4);
    }

    fn response_states(g: &Graph) -> BTreeMap<NodeId, ResponseState> {
        g.nodes().map(|n| (n, ResponseState::new(n, g))).collect()
    }

    #[test]
    fn alarm_removes_victim_from_every_table() {
        let suite = Suite::default();
        let g = bridged_topology();
        let gk = suite.random_key(&mut ChaCha8Rng::seed_from_u64(7));
        let keys: BTreeMap<_, _> = g.nodes().map(|n| (n, gk.clone())).collect();
        let mut states = response_states(&g);
        let d = letter('D');
        assert!(states[&letter('A')].routing.references(d));
        let out = global_alarm(&suite, &map(d.0, 0.8), &gk, 42, 30, &g, &mut states, &keys, 3.0, &mut CleanChannel)
            .unwrap();
        assert_eq!(out.accepted, ['A', 'B', 'C'].into_iter().map(letter).collect());
        for st in states.values() {
            assert!(st.routing.next_hop.values().all(|h| *h != d));
        }
        for n in &out.accepted {
            assert!(!states[n].routing.references(d));
        }
        // Same frame again is a replay.
        let again = alarm_message(&suite, &map(d.0, 0.8), &gk, 42).encode().unwrap();
        let st = states.get_mut(&letter('A')).unwrap();
        assert_eq!(st.receive_alarm(&suite, &gk, &again, &g), Err(ResponseError::Replay(d)));
    }

    #[test]
    fn forged_alarm_is_ignored() {
        let suite = Suite::default();
        let g = bridged_topology();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let gk = suite.random_key(&mut rng);
        let forged = suite.random_key(&mut rng);
        let keys: BTreeMap<_, _> = g.nodes().map(|n| (n, gk.clone())).collect();
        let mut states = response_states(&g);
        let before = states.clone();
        let out = global_alarm(&suite, &map(4, 0.9), &forged, 1, 30, &g, &mut states, &keys, 0.0, &mut CleanChannel)
            .unwrap();
        assert!(out.accepted.is_empty());
        assert_eq!(out.rejected.len(), 3);
        for (n, st) in &states {
            assert_eq!(st.routing, before[n].routing);
        }
        assert_eq!(states[&letter('C')].tamper, 1);
    }

    #[test]
    fn isolated_or_untriggered_victim_changes_nothing() {
        let suite = Suite::default();
        let mut g = bridged_topology();
        g.add_node(NodeId(99));
        let gk = suite.random_key(&mut ChaCha8Rng::seed_from_u64(9));
        let keys: BTreeMap<_, _> = g.nodes().map(|n| (n, gk.clone())).collect();
        let mut states = response_states(&g);
        let before = states.clone();
        let out = global_alarm(&suite, &map(99, 0.9), &gk, 1, 30, &g, &mut states, &keys, 0.0, &mut CleanChannel)
            .unwrap();
        assert!(out.accepted.is_empty() && out.rejected.is_empty());
        assert_eq!(states, before);
        assert_eq!(
            global_alarm(&suite, &map(4, 0.5), &gk, 1, 30, &g, &mut states, &keys, 0.0, &mut CleanChannel),
            Err(ResponseError::NotTriggered(NodeId(4)))
        );
    }

    #[test]
    fn single_bit_flips_never_pass() {
        let s = star_setup();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let b = s.neighbors[1].clone();
        let offer = map_offer(&s.suite, &s.own, &s.keys, 3).encode().unwrap();
        let reply = map_reply(&s.suite, &b.key, &b.map, s.own.owner, 3).encode().unwrap();
        let glm = compose_global_local_map(&s.own, &[b.map], 0.0);
        let compose = map_compose(&s.suite, &glm, &s.keys, 3).encode().unwrap();
        let gk = s.suite.random_key(&mut rng);
        let alarm = alarm_message(&s.suite, &map(s.own.owner.0, 0.9), &gk, 3).encode().unwrap();
        for _ in 0..200 {
            let flip = |f: &[u8], rng: &mut ChaCha8Rng| {
                let mut f = f.to_vec();
                let bit = rng.random_range(0..f.len() * 8);
                f[bit / 8] ^= 1 << (bit % 8);
                ProtocolMessage::decode(&f)
            };
            if let Ok(m) = flip(&offer, &mut rng) {
                let seen: Vec<_> = s
                    .neighbors
                    .iter()
                    .map(|n| open_map_offer(&s.suite, n.id, &n.key, &m))
                    .collect();
                assert!(seen.iter().any(|r| r.is_err()));
                assert!(seen.iter().flatten().all(|(mp, n)| *mp == s.own && *n == 3));
            }
            if let Ok(m) = flip(&reply, &mut rng) {
                assert!(open_map_reply(&s.suite, s.own.owner, &b.key, &m, 3).is_err());
            }
            if let Ok(m) = flip(&compose, &mut rng) {
                let seen: Vec<_> = s
                    .neighbors
                    .iter()
                    .map(|n| open_map_compose(&s.suite, n.id, &n.key, &m, 3))
                    .collect();
                assert!(seen.iter().any(|r| r.is_err()));
                assert!(seen.iter().flatten().all(|g| *g == glm));
            }
            let mut f = alarm.clone();
            let bit = rng.random_range(0..f.len() * 8);
            f[bit / 8] ^= 1 << (bit % 8);
            let mut st = ResponseState::new(letter('C'), &star_topology());
            assert!(st.receive_alarm(&s.suite, &gk, &f, &star_topology()).is_err());
        }
    }
}
