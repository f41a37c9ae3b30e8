//! Emergent self-organizing map detector: z-score normalization, online
//! Kohonen training, U-matrix, hill/valley region labeling and best-match
//! classification.

mod data;
mod model;

pub use data::{
    read_dataset, read_verdicts, two_class_dataset, write_dataset, write_verdicts, FeatureModel, Sample,
};
pub use model::Detector;

use rand::seq::SliceRandom;
use rand::Rng;

/// Features per observation.
pub const DIM: usize = 7;
/// Standard deviations below this are floored to it.
pub const STD_FLOOR: f64 = 1e-9;

pub const FEATURE_NAMES: [&str; DIM] = [
    "nav",
    "tx_rate",
    "rx_rate",
    "rts_retx_rate",
    "data_retx_rate",
    "active_neighbors",
    "forwarding_nodes",
];

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EsomError {
    #[error("need at least {need} samples, got {have}")]
    TooFewSamples { have: usize, need: usize },
    #[error("invalid detector config: {0}")]
    InvalidConfig(String),
    #[error("non-finite value in feature {0}")]
    NonFinite(&'static str),
    #[error("{verdicts} verdicts for {truth} ground-truth labels")]
    LengthMismatch { verdicts: usize, truth: usize },
    #[error("model file: {0}")]
    Model(String),
    #[error("row {row}: {message}")]
    Csv { row: u64, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FeatureVector {
    /// Network allocation vector, seconds.
    pub nav: f64,
    pub tx_rate: f64,
    pub rx_rate: f64,
    pub rts_retx_rate: f64,
    pub data_retx_rate: f64,
    pub active_neighbors: f64,
    pub forwarding_nodes: f64,
}

impl FeatureVector {
    pub fn to_array(&self) -> [f64; DIM] {
        [
            self.nav,
            self.tx_rate,
            self.rx_rate,
            self.rts_retx_rate,
            self.data_retx_rate,
            self.active_neighbors,
            self.forwarding_nodes,
        ]
    }

    pub fn from_array(a: [f64; DIM]) -> Self {
        FeatureVector {
            nav: a[0],
            tx_rate: a[1],
            rx_rate: a[2],
            rts_retx_rate: a[3],
            data_retx_rate: a[4],
            active_neighbors: a[5],
            forwarding_nodes: a[6],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Class {
    Normal,
    Attack,
}

impl Class {
    pub fn name(self) -> &'static str {
        match self {
            Class::Normal => "normal",
            Class::Attack => "attack",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "normal" | "0" => Some(Class::Normal),
            "attack" | "1" => Some(Class::Attack),
            _ => None,
        }
    }
}

/// Per-feature z-score statistics fitted on training data.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub mean: [f64; DIM],
    pub std: [f64; DIM],
}

impl Normalizer {
    /// Population mean and standard deviation per feature. Features with
    /// zero variance get the floor and are reported by [`Normalizer::degenerate`].
    pub fn fit(data: &[FeatureVector]) -> Result<Self, EsomError> {
        if data.len() < 2 {
            return Err(EsomError::TooFewSamples { have: data.len(), need: 2 });
        }
        let n = data.len() as f64;
        let mut mean = [0.0; DIM];
        for v in data {
            for (i, x) in v.to_array().into_iter().enumerate() {
                if !x.is_finite() {
                    return Err(EsomError::NonFinite(FEATURE_NAMES[i]));
                }
                mean[i] += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = [0.0; DIM];
        for v in data {
            for (i, x) in v.to_array().into_iter().enumerate() {
                var[i] += (x - mean[i]).powi(2);
            }
        }
        let std = var.map(|s| (s / n).sqrt().max(STD_FLOOR));
        Ok(Normalizer { mean, std })
    }

    /// Indices of features whose deviation sits at the floor.
    pub fn degenerate(&self) -> Vec<usize> {
        (0..DIM).filter(|i| self.std[*i] <= STD_FLOOR).collect()
    }

    pub fn normalize(&self, v: &FeatureVector) -> [f64; DIM] {
        let a = v.to_array();
        std::array::from_fn(|i| {
            if self.std[i] <= STD_FLOOR {
                0.0
            } else {
                (a[i] - self.mean[i]) / self.std[i]
            }
        })
    }

    pub fn denormalize(&self, z: &[f64; DIM]) -> FeatureVector {
        FeatureVector::from_array(std::array::from_fn(|i| z[i] * self.std[i] + self.mean[i]))
    }
}

/// Fits statistics and returns the normalized data alongside them.
pub fn normalize_features(data: &[FeatureVector]) -> Result<(Vec<[f64; DIM]>, Normalizer), EsomError> {
    let norm = Normalizer::fit(data)?;
    Ok((data.iter().map(|v| norm.normalize(v)).collect(), norm))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SomConfig {
    pub rows: usize,
    pub cols: usize,
    pub epochs: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    /// Defaults to half the longer side.
    pub radius_start: Option<f64>,
    pub radius_end: f64,
    pub hill_quantile: f64,
}

impl Default for SomConfig {
    fn default() -> Self {
        SomConfig {
            rows: 50,
            cols: 80,
            epochs: 20,
            lr_start: 0.5,
            lr_end: 0.05,
            radius_start: None,
            radius_end: 1.0,
            hill_quantile: 0.85,
        }
    }
}

impl SomConfig {
    pub fn validate(&self) -> Result<(), EsomError> {
        let bad = |m: &str| Err(EsomError::InvalidConfig(m.into()));
        if self.rows < 2 || self.cols < 2 {
            return bad("grid must be at least 2x2");
        }
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if !(self.lr_start > 0.0 && self.lr_end > 0.0 && self.lr_start <= 1.0 && self.lr_end <= 1.0) {
            return bad("learning rates must lie in (0, 1]");
        }
        if !(self.radius_end > 0.0 && self.radius_start().is_finite() && self.radius_start() >= self.radius_end) {
            return bad("radius must decay from a finite start to a positive end");
        }
        if !(0.0..=1.0).contains(&self.hill_quantile) {
            return bad("hill quantile must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn radius_start(&self) -> f64 {
        self.radius_start
            .unwrap_or(self.rows.max(self.cols) as f64 / 2.0)
    }
}

/// Planar neuron lattice with 8-neighborhood topology. Weights are stored
/// row-major at single precision, exactly as serialized.
#[derive(Debug, Clone, PartialEq)]
pub struct SomGrid {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<[f32; DIM]>,
}

impl SomGrid {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn position(&self, index: usize) -> (usize, usize) {
        (index / self.cols, index % self.cols)
    }

    pub fn neighbors(&self, index: usize) -> impl Iterator<Item = usize> + '_ {
        let (r, c) = self.position(index);
        let (r, c) = (r as isize, c as isize);
        (-1..=1isize)
            .flat_map(move |dr| (-1..=1isize).map(move |dc| (r + dr, c + dc)))
            .filter(move |&(rr, cc)| {
                (rr, cc) != (r, c) && rr >= 0 && cc >= 0 && (rr as usize) < self.rows && (cc as usize) < self.cols
            })
            .map(|(rr, cc)| rr as usize * self.cols + cc as usize)
    }

    /// Best-matching unit: smallest Euclidean distance, lowest index on ties.
    pub fn best_match(&self, x: &[f64; DIM]) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for (i, w) in self.weights.iter().enumerate() {
            let d = dist2(w, x);
            if d < best.1 {
                best = (i, d);
            }
        }
        (best.0, best.1.sqrt())
    }
}

fn dist2(w: &[f32; DIM], x: &[f64; DIM]) -> f64 {
    w.iter().zip(x).map(|(a, b)| (*a as f64 - b).powi(2)).sum()
}

/// Online Kohonen training over normalized data. Each epoch visits every
/// sample once in a shuffled order; the learning rate and the Gaussian
/// radius decay linearly over all steps.
pub fn train_som<R: Rng + ?Sized>(data: &[[f64; DIM]], cfg: &SomConfig, rng: &mut R) -> Result<SomGrid, EsomError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(EsomError::TooFewSamples { have: 0, need: 1 });
    }
    let mut w: Vec<[f64; DIM]> = (0..cfg.rows * cfg.cols)
        .map(|_| data[rng.random_range(0..data.len())])
        .collect();
    refine(&mut w, data, cfg, rng);
    Ok(finish(cfg, &w))
}

/// Runs the training schedule again starting from `grid`'s weights.
pub fn continue_som<R: Rng + ?Sized>(
    grid: &SomGrid,
    data: &[[f64; DIM]],
    cfg: &SomConfig,
    rng: &mut R,
) -> Result<SomGrid, EsomError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(EsomError::TooFewSamples { have: 0, need: 1 });
    }
    if (grid.rows, grid.cols) != (cfg.rows, cfg.cols) {
        return Err(EsomError::InvalidConfig("grid dimensions differ from config".into()));
    }
    let mut w: Vec<[f64; DIM]> = grid.weights.iter().map(|v| v.map(f64::from)).collect();
    refine(&mut w, data, cfg, rng);
    Ok(finish(cfg, &w))
}

fn finish(cfg: &SomConfig, w: &[[f64; DIM]]) -> SomGrid {
    SomGrid {
        rows: cfg.rows,
        cols: cfg.cols,
        weights: w.iter().map(|v| v.map(|x| x as f32)).collect(),
    }
}

fn refine<R: Rng + ?Sized>(w: &mut [[f64; DIM]], data: &[[f64; DIM]], cfg: &SomConfig, rng: &mut R) {
    let (rows, cols) = (cfg.rows, cfg.cols);
    let total = (cfg.epochs * data.len()).max(2) - 1;
    let (r0, r1) = (cfg.radius_start(), cfg.radius_end);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut hr = vec![0.0; rows];
    let mut hc = vec![0.0; cols];
    let mut step = 0usize;
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for &s in &order {
            let frac = (step as f64 / total as f64).min(1.0);
            let lr = cfg.lr_start + (cfg.lr_end - cfg.lr_start) * frac;
            let sigma = r0 + (r1 - r0) * frac;
            let x = &data[s];
            let mut bmu = (0, f64::INFINITY);
            for (i, wi) in w.iter().enumerate() {
                let d: f64 = wi.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum();
                if d < bmu.1 {
                    bmu = (i, d);
                }
            }
            let (br, bc) = (bmu.0 / cols, bmu.0 % cols);
            // Beyond ~4.3 sigma the Gaussian weight drops under 1e-4.
            let reach = (4.3 * sigma).ceil() as usize;
            let inv = 1.0 / (2.0 * sigma * sigma);
            let (rlo, rhi) = (br.saturating_sub(reach), (br + reach).min(rows - 1));
            let (clo, chi) = (bc.saturating_sub(reach), (bc + reach).min(cols - 1));
            for (r, h) in hr.iter_mut().enumerate().take(rhi + 1).skip(rlo) {
                *h = (-((r as f64 - br as f64).powi(2)) * inv).exp();
            }
            for (c, h) in hc.iter_mut().enumerate().take(chi + 1).skip(clo) {
                *h = (-((c as f64 - bc as f64).powi(2)) * inv).exp();
            }
            for r in rlo..=rhi {
                for c in clo..=chi {
                    let g = lr * hr[r] * hc[c];
                    let wi = &mut w[r * cols + c];
                    for k in 0..DIM {
                        wi[k] += g * (x[k] - wi[k]);
                    }
                }
            }
            step += 1;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UMatrix {
    pub rows: usize,
    pub cols: usize,
    pub heights: Vec<f64>,
}

/// Mean Euclidean distance from each neuron to its lattice neighbors.
pub fn compute_umatrix(grid: &SomGrid) -> UMatrix {
    let heights = (0..grid.len())
        .map(|i| {
            let wi = grid.weights[i].map(f64::from);
            let (sum, n) = grid
                .neighbors(i)
                .fold((0.0, 0usize), |(s, n), j| (s + dist2(&grid.weights[j], &wi).sqrt(), n + 1));
            if n == 0 {
                0.0
            } else {
                sum / n as f64
            }
        })
        .collect();
    UMatrix {
        rows: grid.rows,
        cols: grid.cols,
        heights,
    }
}

impl UMatrix {
    /// Height dump, one CSV line per lattice row.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for row in self.heights.chunks(self.cols) {
            let line: Vec<String> = row.iter().map(|h| format!("{h:.6}")).collect();
            s.push_str(&line.join(","));
            s.push('\n');
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Region {
    Normal,
    Attack,
    Hill,
}

impl Region {
    fn code(self) -> u8 {
        self as u8
    }

    fn from_code(c: u8) -> Option<Self> {
        [Region::Normal, Region::Attack, Region::Hill].get(c as usize).copied()
    }

    fn of(class: Class) -> Self {
        match class {
            Class::Normal => Region::Normal,
            Class::Attack => Region::Attack,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionLabeling {
    pub labels: Vec<Region>,
    /// Neurons strictly above this U-height are hills.
    pub hill_threshold: f64,
}

impl RegionLabeling {
    /// Classes that label no neuron.
    pub fn missing_classes(&self) -> Vec<Class> {
        [Class::Normal, Class::Attack]
            .into_iter()
            .filter(|c| !self.labels.contains(&Region::of(*c)))
            .collect()
    }

    pub fn hill_fraction(&self) -> f64 {
        self.labels.iter().filter(|l| **l == Region::Hill).count() as f64 / self.labels.len().max(1) as f64
    }
}

/// Hills are neurons above the `hill_quantile` U-height. Every other neuron
/// takes the majority label of the training samples that best-match it
/// (ties go to Attack); valley neurons with no samples copy the nearest
/// labeled valley neuron on the lattice, lowest index on ties.
pub fn label_regions(
    grid: &SomGrid,
    umatrix: &UMatrix,
    data: &[([f64; DIM], Class)],
    hill_quantile: f64,
) -> RegionLabeling {
    let n = grid.len();
    let mut sorted = umatrix.heights.clone();
    sorted.sort_by(f64::total_cmp);
    let k = ((hill_quantile * n as f64).ceil() as usize).clamp(1, n) - 1;
    let hill_threshold = sorted[k];
    let mut votes = vec![(0usize, 0usize); n];
    for (x, c) in data {
        let (b, _) = grid.best_match(x);
        match c {
            Class::Normal => votes[b].0 += 1,
            Class::Attack => votes[b].1 += 1,
        }
    }
    let mut labels: Vec<Option<Region>> = (0..n)
        .map(|i| {
            if umatrix.heights[i] > hill_threshold {
                Some(Region::Hill)
            } else {
                match votes[i] {
                    (0, 0) => None,
                    (a, b) if b >= a => Some(Region::Attack),
                    _ => Some(Region::Normal),
                }
            }
        })
        .collect();
    let seeds: Vec<(usize, Region)> = labels
        .iter()
        .enumerate()
        .filter_map(|(i, l)| l.filter(|r| *r != Region::Hill).map(|r| (i, r)))
        .collect();
    let fill: Vec<(usize, Region)> = (0..n)
        .filter(|i| labels[*i].is_none())
        .map(|i| {
            let (r, c) = grid.position(i);
            let nearest = seeds
                .iter()
                .min_by_key(|(j, _)| {
                    let (rr, cc) = grid.position(*j);
                    (r.abs_diff(rr).pow(2) + c.abs_diff(cc).pow(2), *j)
                })
                .map(|(_, l)| *l)
                .unwrap_or(Region::Normal);
            (i, nearest)
        })
        .collect();
    for (i, l) in fill {
        labels[i] = Some(l);
    }
    RegionLabeling {
        labels: labels.into_iter().map(|l| l.expect("filled")).collect(),
        hill_threshold,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Verdict {
    Normal,
    Attack,
    Unclassified,
}

impl Verdict {
    pub fn name(self) -> &'static str {
        match self {
            Verdict::Normal => "normal",
            Verdict::Attack => "attack",
            Verdict::Unclassified => "unclassified",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "normal" => Some(Verdict::Normal),
            "attack" => Some(Verdict::Attack),
            "unclassified" => Some(Verdict::Unclassified),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Classification {
    pub verdict: Verdict,
    pub best_match: usize,
    pub distance: f64,
}

/// Classifies an already-normalized point by the region of its best match.
pub fn classify(grid: &SomGrid, labeling: &RegionLabeling, point: &[f64; DIM]) -> Classification {
    let (best_match, distance) = grid.best_match(point);
    let verdict = match labeling.labels[best_match] {
        Region::Normal => Verdict::Normal,
        Region::Attack => Verdict::Attack,
        Region::Hill => Verdict::Unclassified,
    };
    Classification {
        verdict,
        best_match,
        distance,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    /// Attacks flagged Attack over classified attacks; absent without any.
    pub detection_rate: Option<f64>,
    /// Normals flagged Attack over classified normals; absent without any.
    pub false_alarm_rate: Option<f64>,
    pub attacks: usize,
    pub normals: usize,
    pub unclassified: usize,
}

/// Unclassified verdicts are left out of both rates and counted separately.
pub fn evaluate(verdicts: &[Verdict], truth: &[Class]) -> Result<Evaluation, EsomError> {
    if verdicts.len() != truth.len() {
        return Err(EsomError::LengthMismatch {
            verdicts: verdicts.len(),
            truth: truth.len(),
        });
    }
    let (mut att, mut hit, mut nor, mut fa, mut unc) = (0, 0, 0, 0, 0);
    for (v, t) in verdicts.iter().zip(truth) {
        match (v, t) {
            (Verdict::Unclassified, _) => unc += 1,
            (v, Class::Attack) => {
                att += 1;
                hit += (*v == Verdict::Attack) as usize;
            }
            (v, Class::Normal) => {
                nor += 1;
                fa += (*v == Verdict::Attack) as usize;
            }
        }
    }
    let rate = |a: usize, b: usize| (b > 0).then(|| a as f64 / b as f64);
    Ok(Evaluation {
        detection_rate: rate(hit, att),
        false_alarm_rate: rate(fa, nor),
        attacks: att,
        normals: nor,
        unclassified: unc,
    })
}

/// Mean U-height of neurons touching a neuron of the other class, divided
/// by the mean over the rest. `labeling` should come from a hill-free
/// labeling so that every neuron carries a class.
pub fn boundary_ratio(grid: &SomGrid, umatrix: &UMatrix, labeling: &RegionLabeling) -> Option<f64> {
    let (mut band, mut inner) = ((0.0, 0usize), (0.0, 0usize));
    for i in 0..grid.len() {
        let l = labeling.labels[i];
        let edge = grid.neighbors(i).any(|j| labeling.labels[j] != l);
        let acc = if edge { &mut band } else { &mut inner };
        acc.0 += umatrix.heights[i];
        acc.1 += 1;
    }
    (band.1 > 0 && inner.1 > 0 && inner.0 > 0.0).then(|| (band.0 / band.1 as f64) / (inner.0 / inner.1 as f64))
}
