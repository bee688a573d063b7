//! Seeded ECG-like beats for tests and demos when the real recordings are
//! not available.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::{Dataset, BEAT_LEN, NUM_CLASSES};
use crate::error::Result;
use crate::tensor::Tensor;

/// (center, width, height) of the bumps composing each class template.
const TEMPLATES: [&[(f64, f64, f64)]; NUM_CLASSES] = [
    &[(0.08, 0.02, 1.0), (0.45, 0.06, 0.3)],
    &[(0.05, 0.02, 0.8), (0.30, 0.05, 0.45), (0.60, 0.05, 0.2)],
    &[(0.10, 0.06, 0.9), (0.35, 0.08, -0.3)],
    &[(0.08, 0.03, 0.7), (0.20, 0.04, -0.4), (0.50, 0.07, 0.35)],
    &[(0.15, 0.10, 0.5), (0.70, 0.10, 0.5)],
];

fn template(class: usize, shift: f64, gain: f64, rng: &mut ChaCha8Rng, noise: f64) -> Vec<f64> {
    (0..BEAT_LEN)
        .map(|i| {
            let x = i as f64 / BEAT_LEN as f64;
            let clean: f64 = TEMPLATES[class]
                .iter()
                .map(|&(c, w, h)| h * (-((x - c - shift) / w).powi(2) / 2.0).exp())
                .sum();
            (0.2 + gain * clean + noise * rng.sample::<f64, _>(StandardNormal)).clamp(0.0, 1.0)
        })
        .collect()
}

/// `per_class[c]` beats of class `c`, in class-major order.
pub fn synthetic_beats(per_class: &[usize; NUM_CLASSES], noise: f64, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (class, &n) in per_class.iter().enumerate() {
        for _ in 0..n {
            let shift = rng.gen_range(-0.02..0.02);
            let gain = rng.gen_range(0.8..1.2);
            data.extend(template(class, shift, gain, &mut rng, noise));
            labels.push(class);
        }
    }
    let n = labels.len();
    Dataset::new(Tensor::new(vec![n, BEAT_LEN], data)?, labels, format!("synthetic-{seed}"))
}
