//! Deterministic MANET simulator: placement, random-waypoint mobility,
//! range connectivity, one-hop delivery with adversary hooks, and the
//! scenario runner that ties key agreement, detection and response together.

pub mod config;
mod scenario;

pub use config::{ConfigError, ScenarioConfig, ScheduleAction, ScheduleEntry};
pub use scenario::{run_cell, run_scenario, MetricsRow, ScenarioReport, METRICS_HEADER, TRACE_HEADER};

use std::collections::{BTreeMap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::esom::EsomError;
use crate::gka::group::splitmix;
use crate::gka::{ProtocolMessage, Receiver};
use crate::graph::{Graph, NodeId};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{to} is out of range of {from}")]
    OutOfRange { from: NodeId, to: NodeId },
    #[error("node {0} is not in the world")]
    UnknownNode(NodeId),
    #[error(transparent)]
    Detector(#[from] EsomError),
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Position {
    pub x: f64,
    pub y: f64,
}

impl Position {
    pub fn distance(&self, other: &Position) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MobilityConfig {
    pub speed_min: f64,
    pub speed_max: f64,
    pub pause_time: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorldConfig {
    pub nodes: u32,
    pub width: f64,
    pub height: f64,
    pub range: f64,
    pub mobility: MobilityConfig,
}

impl WorldConfig {
    pub fn from_scenario(cfg: &ScenarioConfig, pause_time: f64) -> Self {
        WorldConfig {
            nodes: cfg.nodes,
            width: cfg.area_width,
            height: cfg.area_height,
            range: cfg.range,
            mobility: MobilityConfig {
                speed_min: cfg.speed_min,
                speed_max: cfg.speed_max,
                pause_time,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum AdversaryKind {
    /// Discards data packets inside its window; protocol traffic is untouched.
    Dropper,
    Eavesdropper,
    Replayer,
}

impl AdversaryKind {
    pub fn name(self) -> &'static str {
        match self {
            AdversaryKind::Dropper => "dropper",
            AdversaryKind::Eavesdropper => "eavesdropper",
            AdversaryKind::Replayer => "replayer",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdversaryRole {
    pub kind: AdversaryKind,
    pub start: f64,
    pub stop: f64,
}

impl AdversaryRole {
    pub fn active(&self, t: f64) -> bool {
        t >= self.start && t <= self.stop
    }
}

#[derive(Debug, Clone)]
struct Walker {
    pos: Position,
    waypoint: Option<Position>,
    speed: f64,
    pause_until: f64,
    rng: ChaCha8Rng,
}

#[derive(Debug, Clone)]
pub struct World {
    config: WorldConfig,
    time: f64,
    walkers: BTreeMap<NodeId, Walker>,
    adversaries: BTreeMap<NodeId, AdversaryRole>,
    captured: BTreeMap<NodeId, Vec<ProtocolMessage>>,
    queue: VecDeque<ScheduleEntry>,
}

fn stream_seed(seed: u64, id: NodeId) -> u64 {
    splitmix(seed ^ splitmix(0x5157_0000 ^ id.0 as u64))
}

impl World {
    /// Uniform placement over the area; node `i` draws from its own stream.
    pub fn new(config: WorldConfig, seed: u64) -> Self {
        let walkers = (1..=config.nodes)
            .map(|i| {
                let id = NodeId(i);
                let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, id));
                let pos = Position {
                    x: rng.random_range(0.0..=config.width),
                    y: rng.random_range(0.0..=config.height),
                };
                let w = Walker {
                    pos,
                    waypoint: None,
                    speed: 0.0,
                    pause_until: config.mobility.pause_time,
                    rng,
                };
                (id, w)
            })
            .collect();
        World {
            config,
            time: 0.0,
            walkers,
            adversaries: BTreeMap::new(),
            captured: BTreeMap::new(),
            queue: VecDeque::new(),
        }
    }

    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.walkers.keys().copied()
    }

    pub fn position(&self, id: NodeId) -> Option<Position> {
        self.walkers.get(&id).map(|w| w.pos)
    }

    pub fn positions(&self) -> BTreeMap<NodeId, Position> {
        self.walkers.iter().map(|(k, w)| (*k, w.pos)).collect()
    }

    /// Advance every node by `dt` seconds of random-waypoint motion.
    pub fn step(&mut self, dt: f64) {
        assert!(dt > 0.0, "mobility step must be positive");
        let end = self.time + dt;
        let (w, h) = (self.config.width, self.config.height);
        let m = self.config.mobility;
        for walker in self.walkers.values_mut() {
            let mut now = self.time;
            while now < end {
                if walker.pause_until > now {
                    now = walker.pause_until.min(end);
                    continue;
                }
                if walker.waypoint.is_none() {
                    walker.speed = if m.speed_max > m.speed_min {
                        walker.rng.random_range(m.speed_min..=m.speed_max)
                    } else {
                        m.speed_min
                    };
                    walker.waypoint = Some(Position {
                        x: walker.rng.random_range(0.0..=w),
                        y: walker.rng.random_range(0.0..=h),
                    });
                }
                let target = walker.waypoint.expect("waypoint drawn");
                if walker.speed <= 0.0 {
                    break;
                }
                let left = walker.pos.distance(&target);
                let arrive = now + left / walker.speed;
                if arrive <= end {
                    walker.pos = target;
                    walker.waypoint = None;
                    walker.pause_until = arrive + m.pause_time;
                    now = arrive;
                    if m.pause_time <= 0.0 && left == 0.0 {
                        // Zero-length leg with no pause: draw again next tick.
                        break;
                    }
                } else {
                    let f = walker.speed * (end - now) / left;
                    walker.pos.x += (target.x - walker.pos.x) * f;
                    walker.pos.y += (target.y - walker.pos.y) * f;
                    now = end;
                }
            }
            walker.pos.x = walker.pos.x.clamp(0.0, w);
            walker.pos.y = walker.pos.y.clamp(0.0, h);
        }
        self.time = end;
    }

    pub fn in_range(&self, a: NodeId, b: NodeId) -> bool {
        match (self.walkers.get(&a), self.walkers.get(&b)) {
            (Some(x), Some(y)) => a != b && x.pos.distance(&y.pos) <= self.config.range,
            _ => false,
        }
    }

    /// Edge iff distance is at most the range.
    pub fn connectivity(&self) -> Graph {
        let mut g = Graph::new();
        let nodes: Vec<(NodeId, Position)> = self.walkers.iter().map(|(k, w)| (*k, w.pos)).collect();
        for (i, (a, pa)) in nodes.iter().enumerate() {
            g.add_node(*a);
            for (b, pb) in &nodes[i + 1..] {
                if pa.distance(pb) <= self.config.range {
                    g.add_edge(*a, *b);
                }
            }
        }
        g
    }

    pub fn set_adversary(&mut self, id: NodeId, role: AdversaryRole) {
        self.adversaries.insert(id, role);
    }

    pub fn adversaries(&self) -> &BTreeMap<NodeId, AdversaryRole> {
        &self.adversaries
    }

    pub fn role(&self, id: NodeId) -> Option<AdversaryRole> {
        self.adversaries.get(&id).copied()
    }

    /// Copies an eavesdropper or replayer recorded.
    pub fn captured(&self, id: NodeId) -> &[ProtocolMessage] {
        self.captured.get(&id).map_or(&[], |v| v.as_slice())
    }

    /// Recording eavesdroppers and replayers in range of the sender keep a copy.
    pub fn overhear(&mut self, msg: &ProtocolMessage) {
        let listeners: Vec<NodeId> = self
            .adversaries
            .iter()
            .filter(|(id, r)| {
                matches!(r.kind, AdversaryKind::Eavesdropper | AdversaryKind::Replayer)
                    && r.active(self.time)
                    && **id != msg.sender
                    && self.in_range(msg.sender, **id)
            })
            .map(|(id, _)| *id)
            .collect();
        for id in listeners {
            self.captured.entry(id).or_default().push(msg.clone());
        }
    }

    /// One-hop delivery. Broadcasts reach every in-range node; a unicast to an
    /// out-of-range receiver is reported undelivered.
    pub fn transmit(&mut self, msg: &ProtocolMessage) -> Result<Vec<NodeId>, SimError> {
        if !self.walkers.contains_key(&msg.sender) {
            return Err(SimError::UnknownNode(msg.sender));
        }
        self.overhear(msg);
        match &msg.receiver {
            Receiver::Broadcast => Ok(self.ids().filter(|n| self.in_range(msg.sender, *n)).collect()),
            Receiver::Node(to) => {
                if self.in_range(msg.sender, *to) {
                    Ok(vec![*to])
                } else {
                    Err(SimError::OutOfRange { from: msg.sender, to: *to })
                }
            }
        }
    }

    /// Queue events; they come back from `due` in time order, ties in
    /// insertion order.
    pub fn schedule(&mut self, entries: &[ScheduleEntry]) {
        let mut all: Vec<ScheduleEntry> = self.queue.drain(..).chain(entries.iter().copied()).collect();
        all.sort_by(|a, b| a.time.total_cmp(&b.time));
        self.queue = all.into();
    }

    /// Events whose time has been reached, removed from the queue.
    pub fn due(&mut self) -> Vec<ScheduleEntry> {
        let mut out = Vec::new();
        while self.queue.front().is_some_and(|e| e.time <= self.time) {
            out.extend(self.queue.pop_front());
        }
        out
    }

    pub fn pending(&self) -> impl Iterator<Item = &ScheduleEntry> {
        self.queue.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gka::{MessageKind, ProtocolMessage};

    fn cfg(nodes: u32, pause: f64, speed_max: f64) -> WorldConfig {
        WorldConfig {
            nodes,
            width: 1800.0,
            height: 1000.0,
            range: 250.0,
            mobility: MobilityConfig {
                speed_min: 0.0,
                speed_max,
                pause_time: pause,
            },
        }
    }

    fn place(w: &mut World, id: u32, x: f64, y: f64) {
        w.walkers.get_mut(&NodeId(id)).unwrap().pos = Position { x, y };
    }

    #[test]
    fn same_seed_same_world() {
        let mut a = World::new(cfg(50, 0.0, 10.0), 9);
        let mut b = World::new(cfg(50, 0.0, 10.0), 9);
        for _ in 0..100 {
            a.step(1.0);
            b.step(1.0);
        }
        assert_eq!(a.positions(), b.positions());
        assert_ne!(a.positions(), World::new(cfg(50, 0.0, 10.0), 10).positions());
    }

    #[test]
    fn placement_stays_in_area() {
        let mut w = World::new(cfg(50, 0.0, 10.0), 3);
        for _ in 0..=200 {
            for p in w.positions().values() {
                assert!((0.0..=1800.0).contains(&p.x) && (0.0..=1000.0).contains(&p.y));
            }
            w.step(1.0);
        }
    }

    #[test]
    fn displacement_bounded_by_top_speed() {
        let mut w = World::new(cfg(50, 0.0, 10.0), 4);
        for _ in 0..300 {
            let before = w.positions();
            w.step(1.0);
            for (id, p) in w.positions() {
                assert!(p.distance(&before[&id]) <= 10.0 + 1e-9);
            }
        }
    }

    #[test]
    fn pause_as_long_as_the_run_keeps_nodes_still() {
        let mut w = World::new(cfg(50, 200.0, 10.0), 5);
        let start = w.positions();
        for _ in 0..200 {
            w.step(1.0);
        }
        assert_eq!(w.positions(), start);

        let mut still = World::new(cfg(20, 0.0, 0.0), 5);
        let start = still.positions();
        still.step(50.0);
        assert_eq!(still.positions(), start);
    }

    #[test]
    fn nodes_do_move_without_pauses() {
        let mut w = World::new(cfg(50, 0.0, 10.0), 6);
        let start = w.positions();
        w.step(10.0);
        assert!(w.positions().iter().filter(|(k, p)| **p != start[k]).count() > 40);
    }

    #[test]
    fn range_is_inclusive() {
        let mut w = World::new(cfg(3, 0.0, 0.0), 1);
        place(&mut w, 1, 100.0, 100.0);
        place(&mut w, 2, 350.0, 100.0);
        place(&mut w, 3, 1700.0, 900.0);
        let g = w.connectivity();
        assert!(g.has_edge(NodeId(1), NodeId(2)));
        assert_eq!(g.degree(NodeId(3)), 0);
        place(&mut w, 2, 350.000001, 100.0);
        assert!(!w.connectivity().has_edge(NodeId(1), NodeId(2)));
    }

    fn msg(sender: u32, receiver: Receiver) -> ProtocolMessage {
        ProtocolMessage::new(MessageKind::AuthStep1, NodeId(sender), receiver, vec![], vec![1, 2, 3])
    }

    #[test]
    fn delivery_follows_range() {
        let mut w = World::new(cfg(4, 0.0, 0.0), 1);
        place(&mut w, 1, 0.0, 0.0);
        place(&mut w, 2, 200.0, 0.0);
        place(&mut w, 3, 0.0, 240.0);
        place(&mut w, 4, 1000.0, 1000.0);
        assert_eq!(w.transmit(&msg(1, Receiver::Broadcast)).unwrap(), vec![NodeId(2), NodeId(3)]);
        assert!(w.transmit(&msg(4, Receiver::Broadcast)).unwrap().is_empty());
        assert_eq!(w.transmit(&msg(1, Receiver::Node(NodeId(2)))).unwrap(), vec![NodeId(2)]);
        assert_eq!(
            w.transmit(&msg(1, Receiver::Node(NodeId(4)))),
            Err(SimError::OutOfRange { from: NodeId(1), to: NodeId(4) })
        );
    }

    #[test]
    fn eavesdropper_in_range_records_one_copy() {
        let mut w = World::new(cfg(3, 0.0, 0.0), 1);
        place(&mut w, 1, 0.0, 0.0);
        place(&mut w, 2, 100.0, 0.0);
        place(&mut w, 3, 900.0, 0.0);
        for id in [2, 3] {
            w.set_adversary(
                NodeId(id),
                AdversaryRole {
                    kind: AdversaryKind::Eavesdropper,
                    start: 0.0,
                    stop: 200.0,
                },
            );
        }
        w.transmit(&msg(1, Receiver::Node(NodeId(2)))).unwrap();
        assert_eq!(w.captured(NodeId(2)).len(), 1);
        assert!(w.captured(NodeId(3)).is_empty());
    }

    #[test]
    fn schedule_releases_events_in_order() {
        let mut w = World::new(cfg(2, 0.0, 0.0), 1);
        let e = |t: f64, a| ScheduleEntry { time: t, action: a };
        w.schedule(&[e(5.0, ScheduleAction::Rekey), e(2.5, ScheduleAction::Rebuild), e(5.0, ScheduleAction::Leave(NodeId(1)))]);
        w.step(2.0);
        assert!(w.due().is_empty());
        w.step(1.0);
        assert_eq!(w.due(), vec![e(2.5, ScheduleAction::Rebuild)]);
        w.step(2.0);
        let d = w.due();
        assert_eq!(d.len(), 2);
        assert!(d.iter().all(|x| x.time <= w.time()));
        assert_eq!(d[0].action, ScheduleAction::Rekey);
    }
}
