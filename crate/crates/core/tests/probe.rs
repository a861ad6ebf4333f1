use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vcsl_core::probe::{linear_probe, ProbeConfig};
use vcsl_core::Tensor64;

const CLASSES: usize = 4;
const PER_CLASS: usize = 40;

fn labels() -> Vec<usize> {
    (0..CLASSES * PER_CLASS).map(|i| i % CLASSES).collect()
}

/// Accuracy of a probe that has nothing to learn should stay near chance.
fn null_band(accuracies: &[f64]) -> (f64, f64) {
    let mean = accuracies.iter().sum::<f64>() / accuracies.len() as f64;
    let max = accuracies.iter().cloned().fold(f64::MIN, f64::max);
    (mean, max)
}

#[test]
fn gaussian_features_stay_near_chance() {
    let accs: Vec<f64> = (0..5)
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor64::randn(&[CLASSES * PER_CLASS, 16], 1.0, &mut rng);
            let cfg = ProbeConfig { seed, ..ProbeConfig::default() };
            linear_probe(&x, &labels(), None, "noise", &cfg).unwrap().accuracy
        })
        .collect();
    let (mean, max) = null_band(&accs);
    assert!((mean - 0.25).abs() < 0.12, "mean {mean} over {accs:?}");
    assert!(max < 0.5, "{accs:?}");
}

#[test]
fn shuffled_labels_stay_near_chance() {
    let y = labels();
    let mut x = Vec::with_capacity(y.len() * CLASSES);
    for &c in &y {
        x.extend((0..CLASSES).map(|k| if k == c { 1.0 } else { 0.0 }));
    }
    let x = Tensor64::from_vec(&[y.len(), CLASSES], x);
    let accs: Vec<f64> = (0..5)
        .map(|seed| {
            let mut shuffled = y.clone();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(100 + seed));
            let cfg = ProbeConfig { seed, ..ProbeConfig::default() };
            linear_probe(&x, &shuffled, None, "shuffled", &cfg).unwrap().accuracy
        })
        .collect();
    let (mean, max) = null_band(&accs);
    assert!((mean - 0.25).abs() < 0.12, "mean {mean} over {accs:?}");
    assert!(max < 0.5, "{accs:?}");
}

#[test]
fn separable_features_are_recovered() {
    let y = labels();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let noise = Tensor64::randn(&[y.len(), CLASSES], 0.1, &mut rng);
    let x: Vec<f64> = y
        .iter()
        .enumerate()
        .flat_map(|(i, &c)| {
            (0..CLASSES).map(move |k| if k == c { 1.0 } else { 0.0 }).enumerate().map(move |(k, v)| (i, k, v))
        })
        .map(|(i, k, v)| v + noise.at(i, k))
        .collect();
    let report =
        linear_probe(&Tensor64::from_vec(&[y.len(), CLASSES], x), &y, None, "clean", &ProbeConfig::default()).unwrap();
    assert!(report.accuracy > 0.95, "{}", report.accuracy);
    approx::assert_relative_eq!(report.chance, 0.25, epsilon = 1e-12);
}
