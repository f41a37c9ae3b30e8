//! Adversarial property suites for the group key agreement: transcript
//! secrecy, key independence, forward and backward secrecy, and replay
//! resistance. Every trial runs on a freshly drawn random topology.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::crypto::{KeyMaterial, Suite};
use crate::gka::adversary::Knowledge;
use crate::gka::{Admission, GkaError, Group, GroupConfig, PerfectLink, ProtocolMessage, ProtocolOptions};
use crate::graph::{Graph, NodeId};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SecurityConfig {
    pub seed: u64,
    pub suite: Suite,
    pub options: ProtocolOptions,
    pub admission: Admission,
    pub scan_epochs: usize,
    pub replay_trials: usize,
    pub leaver_trials: usize,
    pub joiner_trials: usize,
    pub independence_trials: usize,
    /// Group sizes are drawn from this inclusive range.
    pub min_group: usize,
    pub max_group: usize,
}

impl Default for SecurityConfig {
    fn default() -> Self {
        SecurityConfig {
            seed: 1,
            suite: Suite::default(),
            options: ProtocolOptions::default(),
            admission: Admission::default(),
            scan_epochs: 1000,
            replay_trials: 100,
            leaver_trials: 1000,
            joiner_trials: 1000,
            independence_trials: 100,
            min_group: 4,
            max_group: 9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Goal {
    KeySecrecy,
    KeyIndependence,
    ForwardSecrecy,
    BackwardSecrecy,
    ReplayResistance,
}

impl Goal {
    pub fn name(self) -> &'static str {
        match self {
            Goal::KeySecrecy => "key_secrecy",
            Goal::KeyIndependence => "key_independence",
            Goal::ForwardSecrecy => "forward_secrecy",
            Goal::BackwardSecrecy => "backward_secrecy",
            Goal::ReplayResistance => "replay_resistance",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GoalResult {
    pub goal: Goal,
    /// Trials in which the defender held.
    pub held: usize,
    pub trials: usize,
    pub detail: String,
}

impl GoalResult {
    pub fn passed(&self) -> bool {
        self.trials > 0 && self.held == self.trials
    }
}

impl fmt::Display for GoalResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<18} {}  {}/{}  {}",
            self.goal.name(),
            if self.passed() { "PASS" } else { "FAIL" },
            self.held,
            self.trials,
            self.detail
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SecurityReport {
    pub goals: Vec<GoalResult>,
}

impl SecurityReport {
    pub fn all_passed(&self) -> bool {
        self.goals.iter().all(GoalResult::passed)
    }

    pub fn get(&self, goal: Goal) -> Option<&GoalResult> {
        self.goals.iter().find(|g| g.goal == goal)
    }
}

impl fmt::Display for SecurityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for g in &self.goals {
            writeln!(f, "{g}")?;
        }
        Ok(())
    }
}

pub fn run_security_suite(cfg: &SecurityConfig) -> SecurityReport {
    SecurityReport {
        goals: vec![
            key_secrecy(cfg),
            key_independence(cfg),
            forward_secrecy(cfg),
            backward_secrecy(cfg),
            replay_resistance(cfg),
        ],
    }
}

struct Scenario {
    graph: Graph,
    group: Group,
    spares: Vec<NodeId>,
}

fn scenario(rng: &mut ChaCha8Rng, cfg: &SecurityConfig) -> Scenario {
    loop {
        // A checker that cuts the graph leaves members unreachable; redraw.
        if let Some(s) = try_scenario(rng, cfg) {
            return s;
        }
    }
}

fn try_scenario(rng: &mut ChaCha8Rng, cfg: &SecurityConfig) -> Option<Scenario> {
    let n = rng.random_range(cfg.min_group..=cfg.max_group) as u32;
    let total = n + 4;
    let mut graph = Graph::new();
    for i in 2..=total {
        let j = rng.random_range(1..i.min(n + 1));
        graph.add_edge(NodeId(i), NodeId(j));
    }
    for _ in 0..n / 2 {
        let a = rng.random_range(1..=total);
        let b = rng.random_range(1..=total);
        graph.add_edge(NodeId(a), NodeId(b));
    }
    let members: BTreeSet<NodeId> = (1..=n).map(NodeId).collect();
    let config = GroupConfig {
        admission: cfg.admission,
        suite: cfg.suite,
        options: cfg.options,
        seed: rng.random(),
        ..GroupConfig::default()
    };
    let km = cfg.suite.random_key(rng);
    let group = Group::new(config, km, &graph, &members, NodeId(1)).ok()?;
    Some(Scenario {
        graph,
        group,
        spares: (n + 1..=total).map(NodeId).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum OpKind {
    Membership,
    Rekey,
}

fn random_op(rng: &mut ChaCha8Rng, s: &mut Scenario) -> Option<OpKind> {
    let g = &mut s.group;
    match rng.random_range(0..4) {
        0 => g.periodic_global_rekey(None, &mut PerfectLink).ok().map(|_| OpKind::Rekey),
        1 => {
            let j = *g.tree().level_one().choose(rng)?;
            g.periodic_local_rekey(j, None, &mut PerfectLink).ok().map(|_| OpKind::Rekey)
        }
        2 => {
            let outside: Vec<NodeId> = s
                .spares
                .iter()
                .copied()
                .filter(|n| g.node(*n).is_none())
                .collect();
            let j = *outside.choose(rng)?;
            g.member_join(j, &s.graph, &mut PerfectLink).ok().map(|_| OpKind::Membership)
        }
        _ => {
            if g.nodes().len() <= 3 {
                return None;
            }
            let root = g.tree().root();
            let cand: Vec<NodeId> = g.nodes().keys().copied().filter(|n| *n != root).collect();
            let l = *cand.choose(rng)?;
            g.member_leave(l, &s.graph, &mut PerfectLink).ok().map(|_| OpKind::Membership)
        }
    }
}

fn record_secrets(g: &Group, held: &mut BTreeMap<NodeId, BTreeSet<KeyMaterial>>) {
    for (id, n) in g.nodes() {
        held.entry(*id).or_default().extend(n.secrets());
    }
}

fn establish(s: &mut Scenario) -> Result<(), GkaError> {
    s.group.establish(&mut PerfectLink).map(|_| ())
}

/// Cleartext scan of every wire byte for any secret held by any party in any
/// epoch, plus an outsider closure over the full transcript.
pub fn key_secrecy(cfg: &SecurityConfig) -> GoalResult {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EC0);
    let w = cfg.suite.key_width();
    let mut epochs = 0;
    let mut clean = 0;
    let mut matches = 0usize;
    let mut outsider_hits = 0usize;
    while epochs < cfg.scan_epochs {
        let mut s = scenario(&mut rng, cfg);
        if establish(&mut s).is_err() {
            continue;
        }
        let mut held = BTreeMap::new();
        let mut gks = vec![s.group.keys().expect("established").global.clone()];
        record_secrets(&s.group, &mut held);
        let mut local_epochs = 1;
        for _ in 0..60 {
            if local_epochs + epochs >= cfg.scan_epochs {
                break;
            }
            if random_op(&mut rng, &mut s).is_some() {
                local_epochs += 1;
                record_secrets(&s.group, &mut held);
                gks.push(s.group.keys().expect("established").global.clone());
            }
        }
        let secrets: HashSet<Vec<u8>> = held
            .values()
            .flatten()
            .map(|k| k.as_bytes().to_vec())
            .collect();
        let mut group_matches = 0;
        for e in s.group.transcript() {
            let bytes = e.msg.encode().expect("encodable");
            group_matches += bytes.windows(w).filter(|win| secrets.contains(*win)).count();
        }
        let corpus: Vec<ProtocolMessage> = s.group.transcript().iter().map(|e| e.msg.clone()).collect();
        let mut outsider = Knowledge::new(cfg.suite);
        outsider.close(&corpus, s.group.membership_log());
        let hits = gks.iter().filter(|k| outsider.can_compute(k)).count();
        matches += group_matches;
        outsider_hits += hits;
        if group_matches == 0 && hits == 0 {
            clean += local_epochs;
        }
        epochs += local_epochs;
    }
    GoalResult {
        goal: Goal::KeySecrecy,
        held: clean,
        trials: epochs,
        detail: format!("cleartext_matches={matches} outsider_recoveries={outsider_hits}"),
    }
}

/// A disclosed global key must not reveal earlier keys or keys after the
/// next membership change.
pub fn key_independence(cfg: &SecurityConfig) -> GoalResult {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x1DE9);
    let mut trials = 0;
    let mut held = 0;
    while trials < cfg.independence_trials {
        let mut s = scenario(&mut rng, cfg);
        if establish(&mut s).is_err() {
            continue;
        }
        let mut log = vec![(OpKind::Membership, s.group.keys().expect("established").global.clone())];
        for _ in 0..6 {
            if let Some(kind) = random_op(&mut rng, &mut s) {
                log.push((kind, s.group.keys().expect("established").global.clone()));
            }
        }
        let e = rng.random_range(0..log.len());
        let disclosed = log[e].1.clone();
        let next_membership = (e + 1..log.len())
            .find(|&i| log[i].0 == OpKind::Membership)
            .unwrap_or(log.len());
        let targets: Vec<&KeyMaterial> = log
            .iter()
            .enumerate()
            .filter(|(i, (_, k))| (*i < e || *i >= next_membership) && *k != disclosed)
            .map(|(_, (_, k))| k)
            .collect();
        let mut kn = Knowledge::new(cfg.suite);
        kn.learn(disclosed);
        let corpus: Vec<ProtocolMessage> = s.group.transcript().iter().map(|e| e.msg.clone()).collect();
        kn.close(&corpus, s.group.membership_log());
        if !targets.iter().any(|k| kn.can_compute(k)) {
            held += 1;
        }
        trials += 1;
    }
    GoalResult {
        goal: Goal::KeyIndependence,
        held,
        trials,
        detail: String::new(),
    }
}

/// A departed member, knowing every secret it ever held, every message it
/// ever received, and the full post-departure transcript, must not obtain
/// the new global key.
///
/// Departures that force another member to re-attach under a new parent are
/// tallied separately: the new edge can only be bootstrapped from material
/// the leaver already knows.
pub fn forward_secrecy(cfg: &SecurityConfig) -> GoalResult {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xF0F0);
    let mut trials = 0;
    let mut held = 0;
    let mut reattach = 0;
    let mut reattach_exposed = 0;
    let mut checker_leaves = 0;
    while trials < cfg.leaver_trials {
        let mut s = scenario(&mut rng, cfg);
        if establish(&mut s).is_err() {
            continue;
        }
        let mut secrets = BTreeMap::new();
        record_secrets(&s.group, &mut secrets);
        for _ in 0..rng.random_range(0..3) {
            if random_op(&mut rng, &mut s).is_some() {
                record_secrets(&s.group, &mut secrets);
            }
        }
        let root = s.group.tree().root();
        let cand: Vec<NodeId> = s.group.nodes().keys().copied().filter(|n| *n != root).collect();
        let Some(&leaver) = cand.choose(&mut rng) else { continue };
        let was_checker = leaver == s.group.tree().checker();
        let old_tree = s.group.tree().clone();
        let mark = s.group.transcript().len();
        if s.group.member_leave(leaver, &s.graph, &mut PerfectLink).is_err() {
            continue;
        }
        let moved = !old_tree.reparented(s.group.tree()).is_empty();
        let target = s.group.keys().expect("established").global.clone();

        let mut kn = Knowledge::new(cfg.suite);
        kn.learn_all(secrets.remove(&leaver).unwrap_or_default());
        let corpus: Vec<ProtocolMessage> = s
            .group
            .transcript()
            .iter()
            .enumerate()
            .filter(|(i, e)| *i >= mark || e.msg.sender == leaver || e.delivered.contains(&leaver))
            .map(|(_, e)| e.msg.clone())
            .collect();
        kn.close(&corpus, s.group.membership_log());
        let exposed = kn.can_compute(&target);
        if moved {
            reattach += 1;
            reattach_exposed += exposed as usize;
            continue;
        }
        checker_leaves += was_checker as usize;
        trials += 1;
        held += !exposed as usize;
    }
    GoalResult {
        goal: Goal::ForwardSecrecy,
        held,
        trials,
        detail: format!(
            "checker_departures={checker_leaves} reattaching_departures_excluded={reattach} of_which_exposed={reattach_exposed}"
        ),
    }
}

/// A new member, knowing its post-join secrets and the complete pre-join
/// transcript, must not obtain any earlier global key.
pub fn backward_secrecy(cfg: &SecurityConfig) -> GoalResult {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xB0B0);
    let mut trials = 0;
    let mut held = 0;
    while trials < cfg.joiner_trials {
        let mut s = scenario(&mut rng, cfg);
        if establish(&mut s).is_err() {
            continue;
        }
        let mut past = vec![s.group.keys().expect("established").global.clone()];
        for _ in 0..rng.random_range(0..3) {
            if random_op(&mut rng, &mut s).is_some() {
                past.push(s.group.keys().expect("established").global.clone());
            }
        }
        let outside: Vec<NodeId> = s
            .spares
            .iter()
            .copied()
            .filter(|n| s.group.node(*n).is_none())
            .collect();
        let Some(&joiner) = outside.choose(&mut rng) else { continue };
        let root = s.group.tree().root();
        let handed = match cfg.admission {
            Admission::CurrentMasterKey => Some(s.group.node(root).expect("root").master_key().clone()),
            Admission::NextMasterKey => None,
        };
        if s.group.member_join(joiner, &s.graph, &mut PerfectLink).is_err() {
            continue;
        }
        let mut kn = Knowledge::new(cfg.suite);
        kn.learn_all(s.group.node(joiner).expect("joined").secrets());
        kn.learn_all(handed);
        let corpus: Vec<ProtocolMessage> = s.group.transcript().iter().map(|e| e.msg.clone()).collect();
        kn.close(&corpus, s.group.membership_log());
        trials += 1;
        if !past.iter().any(|k| kn.can_compute(k)) {
            held += 1;
        }
    }
    GoalResult {
        goal: Goal::BackwardSecrecy,
        held,
        trials,
        detail: String::new(),
    }
}

/// Re-inject previously delivered messages; no node state may change.
pub fn replay_resistance(cfg: &SecurityConfig) -> GoalResult {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xEE1A);
    let mut trials = 0;
    let mut held = 0;
    let mut accepted = 0;
    while trials < cfg.replay_trials {
        let mut s = scenario(&mut rng, cfg);
        if establish(&mut s).is_err() {
            continue;
        }
        for _ in 0..rng.random_range(0..4) {
            random_op(&mut rng, &mut s);
        }
        let delivered: Vec<ProtocolMessage> = s
            .group
            .transcript()
            .iter()
            .filter(|e| !e.delivered.is_empty())
            .map(|e| e.msg.clone())
            .collect();
        let mut changed = 0;
        for _ in 0..10 {
            let m = delivered.choose(&mut rng).expect("non-empty transcript").clone();
            changed += s.group.inject(m, &mut PerfectLink);
        }
        accepted += changed;
        trials += 1;
        held += (changed == 0) as usize;
    }
    GoalResult {
        goal: Goal::ReplayResistance,
        held,
        trials,
        detail: format!("state_changes={accepted}"),
    }
}
