//! Trained detector and its model file.
//!
//! Layout, little-endian: `"ESOM" | version:u16 | rows:u32 | cols:u32 |
//! features:u32 | weights:f32 * rows*cols*features (row-major) |
//! mean:f64 * features | std:f64 * features | hill_threshold:f64 |
//! labels:u8 * rows*cols` with labels 0 normal, 1 attack, 2 hill.

use rand::Rng;
use sha2::{Digest as _, Sha256};

use super::{
    classify, compute_umatrix, label_regions, normalize_features, train_som, Class, Classification, EsomError,
    FeatureVector, Normalizer, Region, RegionLabeling, Sample, SomConfig, SomGrid, UMatrix, DIM,
};

const MAGIC: &[u8; 4] = b"ESOM";
const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Detector {
    pub normalizer: Normalizer,
    pub grid: SomGrid,
    pub umatrix: UMatrix,
    pub labeling: RegionLabeling,
}

impl Detector {
    /// Normalizes, trains, computes the U-matrix and labels regions. Every
    /// sample must carry a label.
    pub fn train<R: Rng + ?Sized>(samples: &[Sample], cfg: &SomConfig, rng: &mut R) -> Result<Self, EsomError> {
        cfg.validate()?;
        let labels: Vec<Class> = samples
            .iter()
            .enumerate()
            .map(|(i, s)| {
                s.label
                    .ok_or_else(|| EsomError::InvalidConfig(format!("training sample {i} has no label")))
            })
            .collect::<Result<_, _>>()?;
        let x: Vec<FeatureVector> = samples.iter().map(|s| s.features).collect();
        let (z, normalizer) = normalize_features(&x)?;
        let grid = train_som(&z, cfg, rng)?;
        let umatrix = compute_umatrix(&grid);
        let labeled: Vec<_> = z.into_iter().zip(labels).collect();
        let labeling = label_regions(&grid, &umatrix, &labeled, cfg.hill_quantile);
        Ok(Detector {
            normalizer,
            grid,
            umatrix,
            labeling,
        })
    }

    pub fn classify(&self, v: &FeatureVector) -> Classification {
        classify(&self.grid, &self.labeling, &self.normalizer.normalize(v))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(22 + self.grid.len() * (DIM * 4 + 1) + DIM * 16 + 8);
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        b.extend_from_slice(&(self.grid.rows as u32).to_le_bytes());
        b.extend_from_slice(&(self.grid.cols as u32).to_le_bytes());
        b.extend_from_slice(&(DIM as u32).to_le_bytes());
        for w in &self.grid.weights {
            for x in w {
                b.extend_from_slice(&x.to_le_bytes());
            }
        }
        for x in self.normalizer.mean.iter().chain(&self.normalizer.std) {
            b.extend_from_slice(&x.to_le_bytes());
        }
        b.extend_from_slice(&self.labeling.hill_threshold.to_le_bytes());
        b.extend(self.labeling.labels.iter().map(|l| l.code()));
        b
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self, EsomError> {
        let bad = |m: &str| EsomError::Model(m.into());
        let mut pos = 0;
        let mut take = |n: usize| -> Result<&[u8], EsomError> {
            let s = b.get(pos..pos + n).ok_or_else(|| bad("truncated"))?;
            pos += n;
            Ok(s)
        };
        if take(4)? != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u16::from_le_bytes(take(2)?.try_into().unwrap());
        if version != VERSION {
            return Err(EsomError::Model(format!("unsupported version {version}")));
        }
        let mut u32_le = || -> Result<usize, EsomError> { Ok(u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize) };
        let rows = u32_le()?;
        let cols = u32_le()?;
        let features = u32_le()?;
        if features != DIM {
            return Err(EsomError::Model(format!("expected {DIM} features, found {features}")));
        }
        if rows < 2 || cols < 2 || rows.checked_mul(cols).is_none_or(|n| n > 1 << 24) {
            return Err(bad("implausible grid dimensions"));
        }
        let n = rows * cols;
        let mut weights = Vec::with_capacity(n);
        for _ in 0..n {
            let mut w = [0f32; DIM];
            for x in w.iter_mut() {
                *x = f32::from_le_bytes(take(4)?.try_into().unwrap());
                if !x.is_finite() {
                    return Err(bad("non-finite weight"));
                }
            }
            weights.push(w);
        }
        let mut f64_le = || -> Result<f64, EsomError> { Ok(f64::from_le_bytes(take(8)?.try_into().unwrap())) };
        let mut mean = [0.0; DIM];
        let mut std = [0.0; DIM];
        for x in mean.iter_mut().chain(std.iter_mut()) {
            *x = f64_le()?;
        }
        let hill_threshold = f64_le()?;
        let labels = take(n)?
            .iter()
            .map(|c| Region::from_code(*c).ok_or_else(|| bad("unknown region label")))
            .collect::<Result<Vec<_>, _>>()?;
        if pos != b.len() {
            return Err(bad("trailing bytes"));
        }
        let grid = SomGrid { rows, cols, weights };
        Ok(Detector {
            normalizer: Normalizer { mean, std },
            umatrix: compute_umatrix(&grid),
            grid,
            labeling: RegionLabeling { labels, hill_threshold },
        })
    }

    /// SHA-256 of the model file bytes.
    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.to_bytes()).into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::esom::two_class_dataset;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn model_file_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data = two_class_dataset(100, 4.0, 0.5, &mut rng);
        let cfg = SomConfig {
            rows: 6,
            cols: 7,
            epochs: 3,
            ..SomConfig::default()
        };
        let d = Detector::train(&data, &cfg, &mut rng).unwrap();
        let bytes = d.to_bytes();
        assert_eq!(&bytes[..4], b"ESOM");
        assert_eq!(bytes.len(), 18 + 42 * 28 + 14 * 8 + 8 + 42);
        let back = Detector::from_bytes(&bytes).unwrap();
        assert_eq!(back, d);
        assert!(Detector::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Detector::from_bytes(&bad).is_err());
        let unlabeled = vec![Sample {
            label: None,
            ..data[0]
        }];
        assert!(Detector::train(&unlabeled, &cfg, &mut rng).is_err());
    }
}
