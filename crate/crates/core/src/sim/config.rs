//! Scenario configuration: a plain `key = value` file.
//!
//! Blank lines and `#` comments are ignored. List values are comma
//! separated. `schedule` may repeat; each entry is one of `join@T:ID`,
//! `leave@T:ID`, `rekey@T` or `rebuild@T`.
//!
//! | key | default | meaning |
//! |---|---|---|
//! | `seed` | none | master seed (the CLI `--seed` overrides it) |
//! | `nodes` | 50 | hosts, numbered 1..=nodes |
//! | `area_width`, `area_height` | 1800, 1000 | metres |
//! | `range` | 250 | radio range in metres (inclusive) |
//! | `duration` | 200 | simulated seconds |
//! | `sample_interval` | 1 | seconds per feature sample and mobility tick |
//! | `speed_min`, `speed_max` | 0, 10 | random-waypoint leg speed, m/s |
//! | `pause_times` | 0,20,50,70,200 | one metrics row per pause time and dropper count |
//! | `droppers` | 5,10,15,20 | packet-dropping attackers per cell |
//! | `eavesdroppers`, `replayers` | 0, 0 | outsider adversaries |
//! | `generators`, `destinations` | 20, 10 | traffic sources and sinks |
//! | `mean_payload` | 512 | bytes (recorded, not simulated) |
//! | `attack_start`, `attack_end` | 50, 200 | dropper activity window |
//! | `effect` | 4 | attack shift in baseline deviations |
//! | `key_width` | 16 | key bytes (16 or 32) |
//! | `hash` | sha256 | `sha256` or `sha512` |
//! | `latency`, `timeout` | 0, 5 | protocol delivery delay and per-edge timeout |
//! | `som_rows`, `som_cols`, `som_epochs` | 50, 80, 20 | detector grid and schedule |
//! | `hill_quantile` | 0.85 | U-height quantile above which neurons are hills |
//! | `window` | 30 | classified samples behind a coverage figure |
//! | `response_interval` | 10 | seconds between local map distributions |

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::crypto::{HashAlg, Suite};
use crate::esom::SomConfig;
use crate::graph::NodeId;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("line {line}: {message}")]
pub struct ConfigError {
    /// 1-based line of the offending entry; 0 when not tied to a line.
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScheduleAction {
    Join(NodeId),
    Leave(NodeId),
    Rekey,
    Rebuild,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleEntry {
    pub time: f64,
    pub action: ScheduleAction,
}

impl fmt::Display for ScheduleEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.action {
            ScheduleAction::Join(n) => write!(f, "join@{}:{}", self.time, n),
            ScheduleAction::Leave(n) => write!(f, "leave@{}:{}", self.time, n),
            ScheduleAction::Rekey => write!(f, "rekey@{}", self.time),
            ScheduleAction::Rebuild => write!(f, "rebuild@{}", self.time),
        }
    }
}

impl FromStr for ScheduleEntry {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (verb, rest) = s
            .trim()
            .split_once('@')
            .ok_or_else(|| format!("schedule entry {s:?} lacks '@'"))?;
        let (time, id) = match rest.split_once(':') {
            Some((t, i)) => (t, Some(i)),
            None => (rest, None),
        };
        let time: f64 = time
            .trim()
            .parse()
            .ok()
            .filter(|t: &f64| t.is_finite() && *t >= 0.0)
            .ok_or_else(|| format!("bad time in schedule entry {s:?}"))?;
        let node = || -> Result<NodeId, String> {
            id.and_then(|i| i.trim().parse().ok())
                .map(NodeId)
                .ok_or_else(|| format!("schedule entry {s:?} needs a node id"))
        };
        let action = match verb.trim() {
            "join" => ScheduleAction::Join(node()?),
            "leave" => ScheduleAction::Leave(node()?),
            "rekey" | "rebuild" if id.is_some() => return Err(format!("{verb} takes no node id")),
            "rekey" => ScheduleAction::Rekey,
            "rebuild" => ScheduleAction::Rebuild,
            v => return Err(format!("unknown schedule action {v:?}")),
        };
        Ok(ScheduleEntry { time, action })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub seed: Option<u64>,
    pub nodes: u32,
    pub area_width: f64,
    pub area_height: f64,
    pub range: f64,
    pub duration: f64,
    pub sample_interval: f64,
    pub speed_min: f64,
    pub speed_max: f64,
    pub pause_times: Vec<f64>,
    pub droppers: Vec<usize>,
    pub eavesdroppers: usize,
    pub replayers: usize,
    pub generators: usize,
    pub destinations: usize,
    pub mean_payload: usize,
    pub attack_start: f64,
    pub attack_end: f64,
    pub effect: f64,
    pub suite: Suite,
    pub latency: f64,
    pub timeout: f64,
    pub som: SomConfig,
    pub window: usize,
    pub response_interval: f64,
    pub schedule: Vec<ScheduleEntry>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            seed: None,
            nodes: 50,
            area_width: 1800.0,
            area_height: 1000.0,
            range: 250.0,
            duration: 200.0,
            sample_interval: 1.0,
            speed_min: 0.0,
            speed_max: 10.0,
            pause_times: vec![0.0, 20.0, 50.0, 70.0, 200.0],
            droppers: vec![5, 10, 15, 20],
            eavesdroppers: 0,
            replayers: 0,
            generators: 20,
            destinations: 10,
            mean_payload: 512,
            attack_start: 50.0,
            attack_end: 200.0,
            effect: 4.0,
            suite: Suite::default(),
            latency: 0.0,
            timeout: 5.0,
            som: SomConfig::default(),
            window: 30,
            response_interval: 10.0,
            schedule: Vec::new(),
        }
    }
}

fn err(line: usize, message: impl Into<String>) -> ConfigError {
    ConfigError {
        line,
        message: message.into(),
    }
}

fn num<T: FromStr>(line: usize, key: &str, v: &str) -> Result<T, ConfigError> {
    v.trim()
        .parse()
        .map_err(|_| err(line, format!("{key}: cannot parse {v:?}")))
}

fn real(line: usize, key: &str, v: &str) -> Result<f64, ConfigError> {
    let x: f64 = num(line, key, v)?;
    if x.is_finite() {
        Ok(x)
    } else {
        Err(err(line, format!("{key}: must be finite")))
    }
}

fn list<T>(line: usize, key: &str, v: &str, each: impl Fn(usize, &str, &str) -> Result<T, ConfigError>) -> Result<Vec<T>, ConfigError> {
    let out = v
        .split(',')
        .map(|p| each(line, key, p))
        .collect::<Result<Vec<_>, _>>()?;
    if out.is_empty() {
        return Err(err(line, format!("{key}: empty list")));
    }
    Ok(out)
}

impl ScenarioConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut c = ScenarioConfig::default();
        let mut lines: BTreeMap<&'static str, usize> = BTreeMap::new();
        let mut width = 16;
        let mut hash = HashAlg::Sha256;
        let mut schedule_lines = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let ln = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (k, v) = content
                .split_once('=')
                .ok_or_else(|| err(ln, format!("expected key = value, found {content:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            macro_rules! set {
                ($name:literal, $e:expr) => {{
                    if lines.insert($name, ln).is_some() {
                        return Err(err(ln, format!("{} set twice", $name)));
                    }
                    $e
                }};
            }
            match k {
                "seed" => set!("seed", c.seed = Some(num(ln, k, v)?)),
                "nodes" => set!("nodes", c.nodes = num(ln, k, v)?),
                "area_width" => set!("area_width", c.area_width = real(ln, k, v)?),
                "area_height" => set!("area_height", c.area_height = real(ln, k, v)?),
                "range" => set!("range", c.range = real(ln, k, v)?),
                "duration" => set!("duration", c.duration = real(ln, k, v)?),
                "sample_interval" => set!("sample_interval", c.sample_interval = real(ln, k, v)?),
                "speed_min" => set!("speed_min", c.speed_min = real(ln, k, v)?),
                "speed_max" => set!("speed_max", c.speed_max = real(ln, k, v)?),
                "pause_times" => set!("pause_times", c.pause_times = list(ln, k, v, real)?),
                "droppers" => set!("droppers", c.droppers = list(ln, k, v, num)?),
                "eavesdroppers" => set!("eavesdroppers", c.eavesdroppers = num(ln, k, v)?),
                "replayers" => set!("replayers", c.replayers = num(ln, k, v)?),
                "generators" => set!("generators", c.generators = num(ln, k, v)?),
                "destinations" => set!("destinations", c.destinations = num(ln, k, v)?),
                "mean_payload" => set!("mean_payload", c.mean_payload = num(ln, k, v)?),
                "attack_start" => set!("attack_start", c.attack_start = real(ln, k, v)?),
                "attack_end" => set!("attack_end", c.attack_end = real(ln, k, v)?),
                "effect" => set!("effect", c.effect = real(ln, k, v)?),
                "key_width" => set!("key_width", width = num(ln, k, v)?),
                "hash" => set!(
                    "hash",
                    hash = HashAlg::parse(v).ok_or_else(|| err(ln, format!("hash: unknown algorithm {v:?}")))?
                ),
                "latency" => set!("latency", c.latency = real(ln, k, v)?),
                "timeout" => set!("timeout", c.timeout = real(ln, k, v)?),
                "som_rows" => set!("som_rows", c.som.rows = num(ln, k, v)?),
                "som_cols" => set!("som_cols", c.som.cols = num(ln, k, v)?),
                "som_epochs" => set!("som_epochs", c.som.epochs = num(ln, k, v)?),
                "hill_quantile" => set!("hill_quantile", c.som.hill_quantile = real(ln, k, v)?),
                "window" => set!("window", c.window = num(ln, k, v)?),
                "response_interval" => set!("response_interval", c.response_interval = real(ln, k, v)?),
                "schedule" => {
                    for part in v.split(',').filter(|p| !p.trim().is_empty()) {
                        let e: ScheduleEntry = part.parse().map_err(|m| err(ln, m))?;
                        c.schedule.push(e);
                        schedule_lines.push(ln);
                    }
                }
                other => return Err(err(ln, format!("unknown key {other:?}"))),
            }
        }
        c.suite = Suite::new(width, hash).map_err(|e| err(*lines.get("key_width").unwrap_or(&0), e.to_string()))?;
        c.validate_with(&lines, &schedule_lines)?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.validate_with(&BTreeMap::new(), &[])
    }

    fn validate_with(&self, lines: &BTreeMap<&'static str, usize>, schedule_lines: &[usize]) -> Result<(), ConfigError> {
        let at = |k: &str| *lines.get(k).unwrap_or(&0);
        let check = |ok: bool, k: &'static str, m: &str| if ok { Ok(()) } else { Err(err(at(k), format!("{k}: {m}"))) };
        check(self.nodes >= 2, "nodes", "need at least 2 nodes")?;
        check(self.area_width > 0.0, "area_width", "must be positive")?;
        check(self.area_height > 0.0, "area_height", "must be positive")?;
        check(self.range > 0.0, "range", "must be positive")?;
        check(self.duration > 0.0, "duration", "must be positive")?;
        check(
            self.sample_interval > 0.0 && self.sample_interval <= self.duration,
            "sample_interval",
            "must be positive and at most the duration",
        )?;
        check(self.speed_min >= 0.0, "speed_min", "must be non-negative")?;
        check(self.speed_max >= self.speed_min, "speed_max", "must be at least speed_min")?;
        check(self.pause_times.iter().all(|p| *p >= 0.0), "pause_times", "must be non-negative")?;
        let outsiders = self.eavesdroppers + self.replayers;
        check(
            self.droppers.iter().all(|d| d + outsiders < self.nodes as usize),
            "droppers",
            "adversaries must leave at least one honest node",
        )?;
        check(
            self.generators >= 1 && self.generators <= self.nodes as usize,
            "generators",
            "must lie in 1..=nodes",
        )?;
        check(
            self.destinations >= 1 && self.destinations <= self.nodes as usize,
            "destinations",
            "must lie in 1..=nodes",
        )?;
        check(
            self.attack_start >= 0.0 && self.attack_start <= self.attack_end,
            "attack_start",
            "must be non-negative and not after attack_end",
        )?;
        check(self.attack_end <= self.duration, "attack_end", "must lie within the run duration")?;
        check(self.effect >= 0.0, "effect", "must be non-negative")?;
        check(self.latency >= 0.0, "latency", "must be non-negative")?;
        check(self.timeout > 0.0, "timeout", "must be positive")?;
        check(self.window >= 1, "window", "must be positive")?;
        check(self.response_interval > 0.0, "response_interval", "must be positive")?;
        self.som.validate().map_err(|e| err(at("som_rows").max(at("som_cols")), e.to_string()))?;
        for (i, e) in self.schedule.iter().enumerate() {
            let ln = schedule_lines.get(i).copied().unwrap_or(0);
            if e.time > self.duration {
                return Err(err(ln, format!("schedule entry {e} lies beyond the run duration")));
            }
            if let ScheduleAction::Join(n) | ScheduleAction::Leave(n) = e.action {
                if n.0 == 0 || n.0 > self.nodes {
                    return Err(err(ln, format!("schedule entry {e} names node {n} outside 1..={}", self.nodes)));
                }
            }
        }
        Ok(())
    }

    /// `(pause_time, droppers)` for every metrics row, in output order.
    pub fn cells(&self) -> Vec<(f64, usize)> {
        self.pause_times
            .iter()
            .flat_map(|p| self.droppers.iter().map(move |d| (*p, *d)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_reference_setup() {
        let c = ScenarioConfig::parse("").unwrap();
        assert_eq!((c.nodes, c.area_width, c.area_height, c.range), (50, 1800.0, 1000.0, 250.0));
        assert_eq!(c.cells().len(), 20);
        assert_eq!(c.seed, None);
    }

    #[test]
    fn parses_lists_and_schedule() {
        let c = ScenarioConfig::parse(
            "# sweep\nseed = 7\npause_times = 0, 20,50 ,70,200\ndroppers = 5\n\
             schedule = join@60:12, rekey@80\nschedule = leave@90.5:3\nschedule=rebuild@100\n",
        )
        .unwrap();
        assert_eq!(c.seed, Some(7));
        assert_eq!(c.cells().len(), 5);
        assert_eq!(c.schedule.len(), 4);
        assert_eq!(c.schedule[2].action, ScheduleAction::Leave(NodeId(3)));
        assert_eq!(c.schedule[2].time, 90.5);
    }

    #[test]
    fn errors_name_their_line() {
        let cases = [
            ("nodes = 10\nbogus = 1\n", 2),
            ("\n\nrange = wide\n", 3),
            ("duration = 100\nattack_end = 150\n", 2),
            ("nodes = 10\ndroppers = 2\ngenerators = 4\ndestinations = 4\nschedule = join@5:11\n", 5),
            ("schedule = hop@5\n", 1),
            ("nodes = 5\nnodes = 6\n", 2),
            ("key_width = 20\n", 1),
            ("just words\n", 1),
        ];
        for (text, line) in cases {
            let e = ScenarioConfig::parse(text).unwrap_err();
            assert_eq!(e.line, line, "{text:?}: {e}");
        }
    }
}
