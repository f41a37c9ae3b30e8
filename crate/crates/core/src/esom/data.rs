//! Feature datasets: the synthetic traffic model and CSV files.

use std::io::{self, Read, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Class, Classification, EsomError, FeatureVector, Verdict, DIM, FEATURE_NAMES};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub features: FeatureVector,
    pub label: Option<Class>,
}

/// Independent Gaussian per feature, clamped at zero. A packet-dropping
/// attacker on the route shifts rx_rate and forwarding_nodes down and
/// data_retx_rate up, each by `effect` of that feature's deviation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureModel {
    pub mean: [f64; DIM],
    pub sd: [f64; DIM],
}

impl Default for FeatureModel {
    fn default() -> Self {
        FeatureModel {
            mean: [0.020, 40.0, 38.0, 0.05, 0.04, 8.0, 12.0],
            sd: [0.004, 6.0, 5.0, 0.01, 0.01, 2.0, 2.0],
        }
    }
}

impl FeatureModel {
    /// Signed shift direction per feature under attack.
    pub const ATTACK_SHIFT: [f64; DIM] = [0.0, 0.0, -1.0, 0.0, 1.0, 0.0, -1.0];

    pub fn sample<R: Rng + ?Sized>(&self, effect: f64, rng: &mut R) -> FeatureVector {
        FeatureVector::from_array(std::array::from_fn(|i| {
            let mu = self.mean[i] + Self::ATTACK_SHIFT[i] * effect * self.sd[i];
            let x = Normal::new(mu, self.sd[i]).expect("positive deviation").sample(rng);
            x.max(0.0)
        }))
    }
}

/// `n` labeled samples, `attack_fraction` of them attacks shifted by
/// `separation` deviations, in shuffled order.
pub fn two_class_dataset<R: Rng + ?Sized>(n: usize, separation: f64, attack_fraction: f64, rng: &mut R) -> Vec<Sample> {
    let model = FeatureModel::default();
    let attacks = (n as f64 * attack_fraction.clamp(0.0, 1.0)).round() as usize;
    let mut out: Vec<Sample> = (0..n)
        .map(|i| {
            let (class, effect) = if i < attacks {
                (Class::Attack, separation)
            } else {
                (Class::Normal, 0.0)
            };
            Sample {
                features: model.sample(effect, rng),
                label: Some(class),
            }
        })
        .collect();
    out.shuffle(rng);
    out
}

fn csv_err(e: &csv::Error) -> EsomError {
    let row = e.position().map(|p| p.line()).unwrap_or(0);
    EsomError::Csv {
        row,
        message: e.to_string(),
    }
}

/// Reads a header row of the seven feature names, optionally followed by
/// `label`. Rows are reported by file line number.
pub fn read_dataset<R: Read>(input: R) -> Result<Vec<Sample>, EsomError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let headers = rdr.headers().map_err(|e| csv_err(&e))?.clone();
    let names: Vec<String> = headers.iter().map(|h| h.to_ascii_lowercase()).collect();
    let labeled = match names.len() {
        n if n == DIM => false,
        n if n == DIM + 1 && names[DIM] == "label" => true,
        _ => {
            return Err(EsomError::Csv {
                row: 1,
                message: format!("expected header {} [,label]", FEATURE_NAMES.join(",")),
            })
        }
    };
    if names[..DIM] != FEATURE_NAMES {
        return Err(EsomError::Csv {
            row: 1,
            message: format!("expected header {} [,label]", FEATURE_NAMES.join(",")),
        });
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(&e))?;
        let row = rec.position().map(|p| p.line()).unwrap_or(0);
        let bad = |message: String| EsomError::Csv { row, message };
        let mut a = [0.0; DIM];
        for (i, slot) in a.iter_mut().enumerate() {
            let f = &rec[i];
            *slot = f
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| bad(format!("{}: not a finite number: {f:?}", FEATURE_NAMES[i])))?;
        }
        let label = if labeled {
            Some(Class::parse(&rec[DIM]).ok_or_else(|| bad(format!("unknown label {:?}", &rec[DIM])))?)
        } else {
            None
        };
        out.push(Sample {
            features: FeatureVector::from_array(a),
            label,
        });
    }
    Ok(out)
}

pub fn write_dataset<W: Write>(mut out: W, samples: &[Sample]) -> io::Result<()> {
    let labeled = samples.iter().all(|s| s.label.is_some()) && !samples.is_empty();
    write!(out, "{}", FEATURE_NAMES.join(","))?;
    if labeled {
        write!(out, ",label")?;
    }
    writeln!(out)?;
    for s in samples {
        let cols: Vec<String> = s.features.to_array().iter().map(|x| format!("{x}")).collect();
        write!(out, "{}", cols.join(","))?;
        if let (true, Some(l)) = (labeled, s.label) {
            write!(out, ",{}", l.name())?;
        }
        writeln!(out)?;
    }
    Ok(())
}

pub fn write_verdicts<W: Write>(mut out: W, verdicts: &[Classification]) -> io::Result<()> {
    writeln!(out, "index,verdict,best_match,distance")?;
    for (i, c) in verdicts.iter().enumerate() {
        writeln!(out, "{i},{},{},{:.6}", c.verdict.name(), c.best_match, c.distance)?;
    }
    Ok(())
}

/// Reads the `verdict` column of a verdict file.
pub fn read_verdicts<R: Read>(input: R) -> Result<Vec<Verdict>, EsomError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let headers = rdr.headers().map_err(|e| csv_err(&e))?.clone();
    let col = headers.iter().position(|h| h == "verdict").ok_or(EsomError::Csv {
        row: 1,
        message: "missing verdict column".into(),
    })?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(&e))?;
        let row = rec.position().map(|p| p.line()).unwrap_or(0);
        let v = rec.get(col).unwrap_or("");
        out.push(Verdict::parse(v).ok_or(EsomError::Csv {
            row,
            message: format!("unknown verdict {v:?}"),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dataset_round_trips_through_csv() {
        let d = two_class_dataset(20, 2.0, 0.5, &mut ChaCha8Rng::seed_from_u64(1));
        let mut buf = Vec::new();
        write_dataset(&mut buf, &d).unwrap();
        assert_eq!(read_dataset(&buf[..]).unwrap(), d);
        assert_eq!(d.iter().filter(|s| s.label == Some(Class::Attack)).count(), 10);
    }

    #[test]
    fn bad_rows_are_reported_by_line() {
        let text = "nav,tx_rate,rx_rate,rts_retx_rate,data_retx_rate,active_neighbors,forwarding_nodes,label\n\
                    1,2,3,4,5,6,7,normal\n\
                    1,2,x,4,5,6,7,attack\n";
        match read_dataset(text.as_bytes()) {
            Err(EsomError::Csv { row, .. }) => assert_eq!(row, 3),
            other => panic!("{other:?}"),
        }
        assert!(matches!(read_dataset("a,b\n1,2\n".as_bytes()), Err(EsomError::Csv { row: 1, .. })));
        let short = "nav,tx_rate,rx_rate,rts_retx_rate,data_retx_rate,active_neighbors,forwarding_nodes\n1,2\n";
        assert!(matches!(read_dataset(short.as_bytes()), Err(EsomError::Csv { row: 2, .. })));
    }

    #[test]
    fn zero_effect_matches_baseline_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = FeatureModel::default();
        let xs: Vec<f64> = (0..4000).map(|_| m.sample(0.0, &mut rng).rx_rate).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        assert!((mean - m.mean[2]).abs() < 0.3, "{mean}");
        let ys: Vec<f64> = (0..4000).map(|_| m.sample(4.0, &mut rng).rx_rate).collect();
        let shifted = ys.iter().sum::<f64>() / ys.len() as f64;
        assert!((mean - shifted - 4.0 * m.sd[2]).abs() < 0.5, "{shifted}");
    }
}
