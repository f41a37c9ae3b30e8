use ire_core::esom::{
    compute_umatrix, evaluate, label_regions, train_som, two_class_dataset, Class, Detector, FeatureVector,
    Normalizer, SomConfig, SomGrid, Verdict, DIM,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small() -> SomConfig {
    SomConfig {
        rows: 8,
        cols: 10,
        epochs: 8,
        ..SomConfig::default()
    }
}

fn point() -> impl Strategy<Value = [f64; DIM]> {
    proptest::array::uniform7(-4.0..4.0f64)
}

fn detection(det: &Detector, data: &[ire_core::esom::Sample]) -> f64 {
    let v: Vec<Verdict> = data.iter().map(|s| det.classify(&s.features).verdict).collect();
    let t: Vec<Class> = data.iter().map(|s| s.label.unwrap()).collect();
    evaluate(&v, &t).unwrap().detection_rate.unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn best_match_is_the_exhaustive_argmin(
        weights in proptest::collection::vec(proptest::array::uniform7(-3.0..3.0f32), 12),
        x in point(),
    ) {
        let grid = SomGrid { rows: 3, cols: 4, weights };
        let d: Vec<f64> = grid
            .weights
            .iter()
            .map(|w| w.iter().zip(&x).map(|(a, b)| (*a as f64 - b) * (*a as f64 - b)).sum::<f64>())
            .collect();
        let min = d.iter().cloned().fold(f64::INFINITY, f64::min);
        let want = d.iter().position(|v| *v == min).unwrap();
        let (got, dist) = grid.best_match(&x);
        prop_assert_eq!(got, want);
        prop_assert!((dist - min.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn normalization_round_trips(rows in proptest::collection::vec(point(), 2..40)) {
        let data: Vec<FeatureVector> = rows.iter().map(|r| FeatureVector::from_array(*r)).collect();
        let norm = Normalizer::fit(&data).unwrap();
        for v in &data {
            let back = norm.denormalize(&norm.normalize(v)).to_array();
            for i in 0..DIM {
                if norm.std[i] > ire_core::esom::STD_FLOOR {
                    prop_assert!((back[i] - v.to_array()[i]).abs() <= 1e-9);
                }
            }
        }
    }

    #[test]
    fn hill_fraction_follows_the_quantile(q in 0.5..0.99f64, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = two_class_dataset(200, 3.0, 0.5, &mut rng);
        let x: Vec<FeatureVector> = data.iter().map(|s| s.features).collect();
        let norm = Normalizer::fit(&x).unwrap();
        let z: Vec<[f64; DIM]> = x.iter().map(|v| norm.normalize(v)).collect();
        let cfg = SomConfig { epochs: 2, ..small() };
        let grid = train_som(&z, &cfg, &mut rng).unwrap();
        let um = compute_umatrix(&grid);
        let labeled: Vec<_> = z.into_iter().zip(data.iter().map(|s| s.label.unwrap())).collect();
        let lab = label_regions(&grid, &um, &labeled, q);
        prop_assert!((lab.hill_fraction() - (1.0 - q)).abs() <= 1.0 / grid.len() as f64 + 1e-12);
    }
}

#[test]
fn training_is_deterministic_and_round_trips() {
    let data = two_class_dataset(400, 4.0, 0.5, &mut ChaCha8Rng::seed_from_u64(3));
    let a = Detector::train(&data, &small(), &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
    let b = Detector::train(&data, &small(), &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
    assert_eq!(a.to_bytes(), b.to_bytes());
    let back = Detector::from_bytes(&a.to_bytes()).unwrap();
    assert_eq!(back.to_bytes(), a.to_bytes());
    for s in &data {
        assert_eq!(back.classify(&s.features), a.classify(&s.features));
    }
}

#[test]
fn wider_separation_never_detects_less() {
    let cfg = SomConfig {
        rows: 12,
        cols: 16,
        epochs: 10,
        ..SomConfig::default()
    };
    let mut last = 0.0;
    for sep in [1.0, 2.5, 4.0] {
        let train = two_class_dataset(1000, sep, 0.5, &mut ChaCha8Rng::seed_from_u64(21));
        let test = two_class_dataset(1000, sep, 0.5, &mut ChaCha8Rng::seed_from_u64(22));
        let det = Detector::train(&train, &cfg, &mut ChaCha8Rng::seed_from_u64(23)).unwrap();
        let rate = detection(&det, &test);
        assert!(rate >= last, "separation {sep}: {rate} < {last}");
        last = rate;
    }
    assert!(last > 0.9);
}
