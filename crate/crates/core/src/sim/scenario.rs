//! Scenario runner. Each (pause time, dropper count) cell is an independent
//! run that yields one metrics row and a slice of the response trace.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{AdversaryKind, AdversaryRole, ScenarioConfig, ScheduleAction, SimError, World, WorldConfig};
use crate::crypto::KeyMaterial;
use crate::esom::{evaluate, Class, Detector, FeatureModel, FeatureVector, Sample, Verdict};
use crate::gka::adversary::Knowledge;
use crate::gka::group::splitmix;
use crate::gka::{GkaError, Group, GroupConfig, Link, MembershipRecord, ProtocolMessage, SessionKeys};
use crate::graph::{Graph, NodeId};
use crate::response::{
    alarm_message, check_global_trigger, distribute_local_maps, global_alarm, select_forwarding_node, CleanChannel,
    CoverageWindow, EventKind, Neighbor, ResponseState, SecurityMap, TraceEvent,
};

pub const METRICS_HEADER: &str = "cell,pause_time,droppers,members,samples,attack_samples,detection_rate,\
false_alarm_rate,unclassified,key_epochs,key_epochs_ok,alarms_sent,alarms_accepted,alarm_rejections,\
quarantined_nodes,tables_referencing_quarantined,map_distributions,map_tamper,forwarder_selections,\
eavesdropped_messages,eavesdropper_recoveries,replayed_messages,replay_state_changes";

pub const TRACE_HEADER: &str = "cell,time,event_kind,node,peer,detail";

/// Copies a replayer re-sends after each key epoch.
const REPLAY_BURST: usize = 32;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsRow {
    pub cell: usize,
    pub pause_time: f64,
    pub droppers: usize,
    pub members: usize,
    pub samples: usize,
    pub attack_samples: usize,
    pub detection_rate: Option<f64>,
    pub false_alarm_rate: Option<f64>,
    pub unclassified: usize,
    pub key_epochs: usize,
    pub key_epochs_ok: usize,
    pub alarms_sent: usize,
    pub alarms_accepted: usize,
    pub alarm_rejections: usize,
    pub quarantined_nodes: usize,
    pub tables_referencing_quarantined: usize,
    pub map_distributions: usize,
    pub map_tamper: usize,
    pub forwarder_selections: usize,
    pub eavesdropped_messages: usize,
    pub eavesdropper_recoveries: usize,
    pub replayed_messages: usize,
    pub replay_state_changes: usize,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"))
}

impl MetricsRow {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{:.6},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.cell,
            self.pause_time,
            self.droppers,
            self.members,
            self.samples,
            self.attack_samples,
            opt(self.detection_rate),
            opt(self.false_alarm_rate),
            self.unclassified,
            self.key_epochs,
            self.key_epochs_ok,
            self.alarms_sent,
            self.alarms_accepted,
            self.alarm_rejections,
            self.quarantined_nodes,
            self.tables_referencing_quarantined,
            self.map_distributions,
            self.map_tamper,
            self.forwarder_selections,
            self.eavesdropped_messages,
            self.eavesdropper_recoveries,
            self.replayed_messages,
            self.replay_state_changes,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScenarioReport {
    pub rows: Vec<MetricsRow>,
    /// Response and key events, tagged with their cell.
    pub trace: Vec<(usize, TraceEvent)>,
}

impl ScenarioReport {
    pub fn metrics_csv(&self) -> String {
        let mut s = String::from(METRICS_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.to_csv_line());
            s.push('\n');
        }
        s
    }

    pub fn trace_csv(&self) -> String {
        let mut s = String::from(TRACE_HEADER);
        s.push('\n');
        for (c, e) in &self.trace {
            let _ = writeln!(s, "{c},{e}");
        }
        s
    }
}

/// Runs every cell of the sweep in order.
pub fn run_scenario(cfg: &ScenarioConfig, seed: u64) -> Result<ScenarioReport, SimError> {
    cfg.validate()?;
    let mut report = ScenarioReport::default();
    for (i, (pause, droppers)) in cfg.cells().into_iter().enumerate() {
        let (row, events) = run_cell(cfg, seed, i, pause, droppers)?;
        report.rows.push(row);
        report.trace.extend(events.into_iter().map(|e| (i, e)));
    }
    Ok(report)
}

fn derive_seed(seed: u64, cell: usize, purpose: u64) -> u64 {
    splitmix(splitmix(seed ^ splitmix(cell as u64)) ^ purpose)
}

const TRAIN: u64 = 0x7472_6169_6e00;
const ROLES: u64 = 0x726f_6c65_7300;
const WORLD: u64 = 0x776f_726c_6400;
const TRAFFIC: u64 = 0x7472_6166_6600;
const PROTOCOL: u64 = 0x7072_6f74_6f00;

struct Cast {
    outsiders: BTreeSet<NodeId>,
    flows: Vec<(NodeId, NodeId)>,
}

/// Assigns adversary roles and traffic flows. Honest nodes are preferred
/// as traffic sources.
fn cast(cfg: &ScenarioConfig, droppers: usize, world: &mut World, seed: u64) -> Cast {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids: Vec<NodeId> = world.ids().collect();
    ids.shuffle(&mut rng);
    let mut pool = ids.iter().copied();
    let mut outsiders = BTreeSet::new();
    for (kind, count) in [
        (AdversaryKind::Dropper, droppers),
        (AdversaryKind::Eavesdropper, cfg.eavesdroppers),
        (AdversaryKind::Replayer, cfg.replayers),
    ] {
        let (start, stop) = match kind {
            AdversaryKind::Dropper => (cfg.attack_start, cfg.attack_end),
            _ => (0.0, cfg.duration),
        };
        for id in pool.by_ref().take(count) {
            world.set_adversary(id, AdversaryRole { kind, start, stop });
            if kind != AdversaryKind::Dropper {
                outsiders.insert(id);
            }
        }
    }
    let mut sources: Vec<NodeId> = pool.collect();
    sources.extend(ids.iter().copied().filter(|n| world.role(*n).is_some()));
    sources.truncate(cfg.generators);
    let mut sinks: Vec<NodeId> = world.ids().collect();
    sinks.shuffle(&mut rng);
    sinks.truncate(cfg.destinations);
    let flows = sources
        .iter()
        .enumerate()
        .filter_map(|(i, s)| {
            let d = sinks[i % sinks.len()];
            if d != *s {
                Some((*s, d))
            } else if sinks.len() > 1 {
                Some((*s, sinks[(i + 1) % sinks.len()]))
            } else {
                None
            }
        })
        .collect();
    Cast { outsiders, flows }
}

/// One labeled observation per flow source. A flow is under attack when its
/// shortest route passes through a dropper active at this instant.
fn sample_flows<R: Rng>(
    world: &World,
    graph: &Graph,
    flows: &[(NodeId, NodeId)],
    effect: f64,
    rng: &mut R,
) -> Vec<(NodeId, FeatureVector, Class)> {
    let model = FeatureModel::default();
    let t = world.time();
    flows
        .iter()
        .map(|(s, d)| {
            let attacked = graph.shortest_path(*s, *d).is_some_and(|p| {
                p.len() > 2
                    && p[1..p.len() - 1].iter().any(|n| {
                        world
                            .role(*n)
                            .is_some_and(|r| r.kind == AdversaryKind::Dropper && r.active(t))
                    })
            });
            let (class, e) = if attacked { (Class::Attack, effect) } else { (Class::Normal, 0.0) };
            (*s, model.sample(e, rng), class)
        })
        .collect()
}

fn ticks(cfg: &ScenarioConfig) -> usize {
    (cfg.duration / cfg.sample_interval).floor() as usize
}

/// Trains the detector on an independent replica of the cell: same
/// configuration, its own placement, roles and traffic.
fn train_detector(cfg: &ScenarioConfig, seed: u64, cell: usize, pause: f64, droppers: usize) -> Result<Detector, SimError> {
    let mut world = World::new(WorldConfig::from_scenario(cfg, pause), derive_seed(seed, cell, TRAIN ^ WORLD));
    let cast = cast(cfg, droppers, &mut world, derive_seed(seed, cell, TRAIN ^ ROLES));
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, cell, TRAIN ^ TRAFFIC));
    let mut samples = Vec::new();
    for _ in 0..ticks(cfg) {
        world.step(cfg.sample_interval);
        let g = world.connectivity();
        samples.extend(
            sample_flows(&world, &g, &cast.flows, cfg.effect, &mut rng)
                .into_iter()
                .map(|(_, features, c)| Sample {
                    features,
                    label: Some(c),
                }),
        );
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, cell, TRAIN));
    Ok(Detector::train(&samples, &cfg.som, &mut rng)?)
}

/// Protocol delivery over the radio. Messages are routed hop by hop, so a
/// copy arrives iff sender and receiver share a connected component.
struct RadioLink<'a> {
    world: &'a mut World,
    component: BTreeMap<NodeId, usize>,
    record: bool,
    last: Option<ProtocolMessage>,
}

impl<'a> RadioLink<'a> {
    fn new(world: &'a mut World, graph: &Graph, record: bool) -> Self {
        let mut component = BTreeMap::new();
        for n in graph.nodes() {
            if !component.contains_key(&n) {
                let c = component.len();
                for m in graph.component(n) {
                    component.insert(m, c);
                }
            }
        }
        RadioLink {
            world,
            component,
            record,
            last: None,
        }
    }
}

impl Link for RadioLink<'_> {
    fn deliver(&mut self, msg: &ProtocolMessage, to: NodeId, _now: f64) -> bool {
        if self.record && self.last.as_ref() != Some(msg) {
            self.world.overhear(msg);
            self.last = Some(msg.clone());
        }
        let c = self.component.get(&msg.sender);
        c.is_some() && c == self.component.get(&to)
    }
}

fn restricted(graph: &Graph, keep: &BTreeSet<NodeId>) -> Graph {
    let mut g = Graph::new();
    for &n in keep {
        g.add_node(n);
        for m in graph.neighbors(n) {
            if keep.contains(&m) {
                g.add_edge(n, m);
            }
        }
    }
    g
}

/// Keys and public membership records of one group instance.
struct Generation {
    log: Vec<MembershipRecord>,
    keys: Vec<KeyMaterial>,
}

struct CellRun<'a> {
    cfg: &'a ScenarioConfig,
    world: World,
    graph: Graph,
    outsiders: BTreeSet<NodeId>,
    flows: Vec<(NodeId, NodeId)>,
    detector: Detector,
    model: [u8; 32],
    master: KeyMaterial,
    group: Option<Group>,
    eligible: BTreeSet<NodeId>,
    generations: Vec<Generation>,
    keys_seen: Vec<KeyMaterial>,
    groups_formed: u64,
    seed: u64,
    rng: ChaCha8Rng,
    states: BTreeMap<NodeId, ResponseState>,
    windows: BTreeMap<NodeId, CoverageWindow>,
    alarmed: BTreeSet<NodeId>,
    events: Vec<TraceEvent>,
    row: MetricsRow,
}

/// Runs one cell: placement, key establishment, detection, response and the
/// scheduled membership events.
pub fn run_cell(
    cfg: &ScenarioConfig,
    seed: u64,
    cell: usize,
    pause: f64,
    droppers: usize,
) -> Result<(MetricsRow, Vec<TraceEvent>), SimError> {
    cfg.validate()?;
    let detector = train_detector(cfg, seed, cell, pause, droppers)?;
    let mut world = World::new(WorldConfig::from_scenario(cfg, pause), derive_seed(seed, cell, WORLD));
    let cast = cast(cfg, droppers, &mut world, derive_seed(seed, cell, ROLES));
    world.schedule(&cfg.schedule);
    let held_out: BTreeSet<NodeId> = cfg
        .schedule
        .iter()
        .filter_map(|e| match e.action {
            ScheduleAction::Join(n) => Some(n),
            _ => None,
        })
        .collect();
    let eligible = world
        .ids()
        .filter(|n| !cast.outsiders.contains(n) && !held_out.contains(n))
        .collect();
    let graph = world.connectivity();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, cell, PROTOCOL));
    let master = cfg.suite.random_key(&mut rng);
    let states = world.ids().map(|n| (n, ResponseState::new(n, &graph))).collect();
    let model = detector.digest();
    let mut run = CellRun {
        cfg,
        world,
        graph,
        outsiders: cast.outsiders,
        flows: cast.flows,
        detector,
        model,
        master,
        group: None,
        eligible,
        generations: Vec::new(),
        keys_seen: Vec::new(),
        groups_formed: 0,
        seed: derive_seed(seed, cell, PROTOCOL),
        rng,
        states,
        windows: BTreeMap::new(),
        alarmed: BTreeSet::new(),
        events: Vec::new(),
        row: MetricsRow {
            cell,
            pause_time: pause,
            droppers,
            ..MetricsRow::default()
        },
    };
    run.execute(seed, cell);
    Ok((run.row, run.events))
}

impl CellRun<'_> {
    fn execute(&mut self, seed: u64, cell: usize) {
        let cfg = self.cfg;
        self.form_group(EventKind::KeyEpoch, "establish");
        let mut traffic = ChaCha8Rng::seed_from_u64(derive_seed(seed, cell, TRAFFIC));
        let per_interval = ((cfg.response_interval / cfg.sample_interval).round() as usize).max(1);
        let mut verdicts = Vec::new();
        let mut truth = Vec::new();
        for tick in 1..=ticks(cfg) {
            self.world.step(cfg.sample_interval);
            self.graph = self.world.connectivity();
            for st in self.states.values_mut() {
                st.routing.recompute(&self.graph);
            }
            for e in self.world.due() {
                self.apply(e.action);
            }
            for (src, x, class) in sample_flows(&self.world, &self.graph, &self.flows, cfg.effect, &mut traffic) {
                let v = self.detector.classify(&x).verdict;
                verdicts.push(v);
                truth.push(class);
                if v != Verdict::Unclassified {
                    self.windows
                        .entry(src)
                        .or_insert_with(|| CoverageWindow::new(cfg.window))
                        .push(v == Verdict::Attack);
                }
            }
            if tick % per_interval == 0 {
                self.distribute_maps();
            }
            self.raise_alarms();
        }
        self.finish(&verdicts, &truth);
    }

    fn now(&self) -> f64 {
        self.world.time()
    }

    fn trace(&mut self, kind: EventKind, node: NodeId, peer: Option<NodeId>, detail: impl Into<String>) {
        let t = self.now();
        self.events.push(TraceEvent::new(t, kind, node, peer, detail));
    }

    fn retire_group(&mut self) {
        if let Some(g) = self.group.take() {
            self.generations.push(Generation {
                log: g.membership_log().to_vec(),
                keys: std::mem::take(&mut self.keys_seen),
            });
        }
    }

    fn note_keys(&mut self, keys: &SessionKeys) {
        self.keys_seen.push(keys.global.clone());
        self.keys_seen.extend(keys.local.values().cloned());
    }

    /// Largest connected set of eligible nodes, rooted at its lowest usable id.
    fn form_group(&mut self, kind: EventKind, label: &str) -> bool {
        self.row.key_epochs += 1;
        self.retire_group();
        let sub = restricted(&self.graph, &self.eligible);
        let mut best: BTreeSet<NodeId> = BTreeSet::new();
        let mut seen = BTreeSet::new();
        for &n in &self.eligible {
            if seen.contains(&n) {
                continue;
            }
            let comp = sub.component(n);
            seen.extend(comp.iter().copied());
            if comp.len() > best.len() {
                best = comp;
            }
        }
        let Some(&root) = best.iter().next().filter(|_| best.len() >= 2) else {
            self.trace(EventKind::KeyFailure, NodeId(0), None, format!("{label}: no connected group"));
            return false;
        };
        self.groups_formed += 1;
        let config = GroupConfig {
            suite: self.cfg.suite,
            seed: splitmix(self.seed ^ self.groups_formed),
            timeout: self.cfg.timeout,
            latency: self.cfg.latency,
            ..GroupConfig::default()
        };
        // Lowest-id root first; a root whose every checker would cut the
        // tree gives way to the next.
        let mut group = Group::new(config, self.master.clone(), &self.graph, &best, root);
        for r in best.iter().copied() {
            for c in sub.neighbors(r) {
                if group.is_ok() {
                    break;
                }
                group = Group::with_checker(config, self.master.clone(), &self.graph, &best, r, c);
            }
        }
        let mut group = match group {
            Ok(g) => g,
            Err(e) => {
                self.trace(EventKind::KeyFailure, root, None, format!("{label}: {e}"));
                return false;
            }
        };
        group.set_clock(self.now());
        let res = group.establish(&mut RadioLink::new(&mut self.world, &self.graph, true));
        let members = group.tree().group().len();
        let root = group.tree().root();
        self.group = Some(group);
        self.settle(kind, root, None, label, res.map(|k| (k, members)))
    }

    /// Records the outcome of one key epoch.
    fn settle(
        &mut self,
        kind: EventKind,
        node: NodeId,
        peer: Option<NodeId>,
        label: &str,
        res: Result<(SessionKeys, usize), GkaError>,
    ) -> bool {
        match res {
            Ok((keys, members)) => {
                self.row.key_epochs_ok += 1;
                self.note_keys(&keys);
                self.trace(kind, node, peer, format!("{label} epoch={} members={members}", keys.epoch));
                self.replay();
                true
            }
            Err(e) => {
                self.trace(EventKind::KeyFailure, node, peer, format!("{label}: {e}"));
                false
            }
        }
    }

    /// True when a tree edge or the root-checker link is no longer a radio link.
    fn tree_broken(&self) -> bool {
        let Some(g) = &self.group else { return true };
        let tree = g.tree();
        tree.group().into_iter().any(|n| {
            let up = if n == tree.checker() { Some(tree.root()) } else { tree.parent(n) };
            up.is_some_and(|p| !self.graph.has_edge(n, p))
        })
    }

    fn lift(&mut self, node: NodeId, why: &str) {
        let mut any = false;
        for st in self.states.values_mut() {
            any |= st.routing.quarantined.contains(&node);
            st.routing.lift(node, &self.graph);
        }
        self.alarmed.remove(&node);
        if any {
            self.trace(EventKind::QuarantineLifted, node, None, why);
        }
    }

    fn apply(&mut self, action: ScheduleAction) {
        if action != ScheduleAction::Rebuild && self.tree_broken() {
            self.form_group(EventKind::Rebuild, "repair");
        }
        match action {
            ScheduleAction::Rebuild => {
                if self.form_group(EventKind::Rebuild, "rebuild") {
                    let members: Vec<NodeId> = self.group.as_ref().map(|g| g.tree().group().into_iter().collect()).unwrap_or_default();
                    for m in members {
                        self.lift(m, "rebuild");
                    }
                }
            }
            ScheduleAction::Join(n) => {
                self.row.key_epochs += 1;
                self.eligible.insert(n);
                let res = match self.group.as_mut() {
                    None => Err(GkaError::NotEstablished),
                    Some(g) if self.outsiders.contains(&n) || g.tree().group().contains(&n) => Err(GkaError::UnknownNode(n)),
                    Some(g) => {
                        g.set_clock(self.world.time());
                        let r = g.member_join(n, &self.graph, &mut RadioLink::new(&mut self.world, &self.graph, true));
                        r.map(|k| (k, g.tree().group().len()))
                    }
                };
                if self.settle(EventKind::Join, n, None, "join", res) {
                    self.lift(n, "join");
                }
            }
            ScheduleAction::Leave(n) => {
                self.row.key_epochs += 1;
                self.eligible.remove(&n);
                let res = match self.group.as_mut() {
                    None => Err(GkaError::NotEstablished),
                    Some(g) => {
                        g.set_clock(self.world.time());
                        let r = g.member_leave(n, &self.graph, &mut RadioLink::new(&mut self.world, &self.graph, true));
                        r.map(|k| (k, g.tree().group().len()))
                    }
                };
                self.settle(EventKind::Leave, n, None, "leave", res);
            }
            ScheduleAction::Rekey => {
                self.row.key_epochs += 1;
                let (res, checker) = match self.group.as_mut() {
                    None => (Err(GkaError::NotEstablished), NodeId(0)),
                    Some(g) => {
                        g.set_clock(self.world.time());
                        let checker = g.tree().checker();
                        let r = g.periodic_global_rekey(None, &mut RadioLink::new(&mut self.world, &self.graph, true));
                        (r.map(|k| (k, g.tree().group().len())), checker)
                    }
                };
                self.settle(EventKind::Rekey, checker, None, "rekey", res);
            }
        }
    }

    /// Each replayer re-sends its most recent captures into the group.
    fn replay(&mut self) {
        let Some(group) = self.group.as_mut() else { return };
        let replayers: Vec<NodeId> = self
            .world
            .adversaries()
            .iter()
            .filter(|(_, r)| r.kind == AdversaryKind::Replayer)
            .map(|(id, _)| *id)
            .collect();
        for r in replayers {
            let cap = self.world.captured(r);
            let burst: Vec<ProtocolMessage> = cap[cap.len().saturating_sub(REPLAY_BURST)..].to_vec();
            for m in burst {
                self.row.replayed_messages += 1;
                let changed = group.inject(m, &mut RadioLink::new(&mut self.world, &self.graph, false));
                self.row.replay_state_changes += changed;
                if changed > 0 {
                    let t = self.world.time();
                    self.events
                        .push(TraceEvent::new(t, EventKind::Adversary, r, None, format!("replay changed {changed} nodes")));
                }
            }
        }
    }

    fn map_of(&self, n: NodeId, epoch: u64) -> SecurityMap {
        let empty = CoverageWindow::new(self.cfg.window);
        SecurityMap::from_window(n, epoch, self.windows.get(&n).unwrap_or(&empty), self.model)
    }

    /// The root runs local map distribution with its in-range level-one
    /// members and picks a forwarding node from the result.
    fn distribute_maps(&mut self) {
        let Some(group) = &self.group else { return };
        if group.keys().is_none() {
            return;
        }
        let tree = group.tree();
        let root = tree.root();
        let epoch = group.epoch();
        let Some(rs) = group.node(root) else { return };
        let mut keys = BTreeMap::new();
        let mut neighbors = Vec::new();
        for j in tree.level_one() {
            if !self.graph.has_edge(root, j) {
                continue;
            }
            let (Some(k), Some(theirs)) = (rs.local_key(j), group.node(j).and_then(|s| s.local_key(j))) else {
                continue;
            };
            keys.insert(j, k.clone());
            neighbors.push(Neighbor {
                id: j,
                key: theirs.clone(),
                map: self.map_of(j, epoch),
            });
        }
        let own = self.map_of(root, epoch);
        let nonce = self.rng.random_range(0..u64::MAX - 2);
        let t = self.now();
        let dist = distribute_local_maps(&self.cfg.suite, &own, &keys, &neighbors, nonce, t, &mut CleanChannel);
        for m in &dist.transcript {
            self.world.overhear(m);
        }
        self.row.map_distributions += 1;
        self.row.map_tamper += dist.tamper_count();
        self.events.extend(dist.events.iter().cloned());
        let candidates: BTreeSet<NodeId> = dist.map.entries.keys().copied().filter(|n| *n != root).collect();
        if candidates.is_empty() {
            return;
        }
        match select_forwarding_node(&dist.map, &candidates, &self.states[&root].routing.quarantined) {
            Ok(f) => {
                self.row.forwarder_selections += 1;
                self.trace(EventKind::ForwarderSelected, root, Some(f), "lowest coverage");
            }
            Err(e) => self.trace(EventKind::ForwarderSelected, root, None, e.to_string()),
        }
    }

    /// Members whose coverage crosses the trigger broadcast one alarm.
    fn raise_alarms(&mut self) {
        let Some(group) = &self.group else { return };
        if group.keys().is_none() {
            return;
        }
        let epoch = group.epoch();
        let gks: BTreeMap<NodeId, KeyMaterial> = group
            .nodes()
            .iter()
            .filter_map(|(n, s)| s.session_key().map(|k| (*n, k.clone())))
            .collect();
        let victims: Vec<NodeId> = self
            .windows
            .keys()
            .copied()
            .filter(|n| gks.contains_key(n) && !self.alarmed.contains(n))
            .filter(|n| {
                let m = self.map_of(*n, epoch);
                check_global_trigger(&m, self.cfg.window).unwrap_or(false)
            })
            .collect();
        for v in victims {
            let map = self.map_of(v, epoch);
            let nonce = self.rng.random_range(0..u64::MAX - 2);
            let t = self.now();
            self.world.overhear(&alarm_message(&self.cfg.suite, &map, &gks[&v], nonce));
            let out = global_alarm(
                &self.cfg.suite,
                &map,
                &gks[&v],
                nonce,
                self.cfg.window,
                &self.graph,
                &mut self.states,
                &gks,
                t,
                &mut CleanChannel,
            );
            if let Ok(out) = out {
                self.alarmed.insert(v);
                self.row.alarms_sent += 1;
                self.row.alarms_accepted += out.accepted.len();
                self.row.alarm_rejections += out.rejected.len();
                self.events.extend(out.events);
            }
        }
    }

    fn finish(&mut self, verdicts: &[Verdict], truth: &[Class]) {
        let ev = evaluate(verdicts, truth).expect("one verdict per sample");
        let has_droppers = self.row.droppers > 0;
        self.row.samples = truth.len();
        self.row.attack_samples = truth.iter().filter(|c| **c == Class::Attack).count();
        self.row.detection_rate = ev.detection_rate.filter(|_| has_droppers);
        self.row.false_alarm_rate = ev.false_alarm_rate;
        self.row.unclassified = ev.unclassified;
        self.row.members = self.group.as_ref().map_or(0, |g| g.tree().group().len());

        let mut quarantined = BTreeSet::new();
        for st in self.states.values() {
            quarantined.extend(st.routing.quarantined.iter().copied());
            if st.routing.quarantined.iter().any(|q| st.routing.references(*q)) {
                self.row.tables_referencing_quarantined += 1;
            }
        }
        self.row.quarantined_nodes = quarantined.len();

        self.retire_group();
        let eavesdroppers: Vec<NodeId> = self
            .world
            .adversaries()
            .iter()
            .filter(|(_, r)| r.kind == AdversaryKind::Eavesdropper)
            .map(|(id, _)| *id)
            .collect();
        let mut corpus: VecDeque<ProtocolMessage> = VecDeque::new();
        for e in &eavesdroppers {
            corpus.extend(self.world.captured(*e).iter().cloned());
        }
        self.row.eavesdropped_messages = corpus.len();
        if corpus.is_empty() {
            return;
        }
        let corpus: Vec<ProtocolMessage> = corpus.into();
        let mut recovered = 0;
        for g in &self.generations {
            let mut kn = Knowledge::new(self.cfg.suite);
            kn.close(&corpus, &g.log);
            recovered += g.keys.iter().filter(|k| kn.can_compute(k)).count();
        }
        self.row.eavesdropper_recoveries = recovered;
        if recovered > 0 {
            let t = self.now();
            self.events.push(TraceEvent::new(
                t,
                EventKind::Adversary,
                eavesdroppers[0],
                None,
                format!("recovered {recovered} keys"),
            ));
        }
    }
}
