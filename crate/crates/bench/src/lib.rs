//! Seeded fixtures shared by the criterion benchmarks.

use can_core::discrepancy::LabeledBatch;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_matrix(seed: u64, rows: usize, cols: usize) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

/// A two-layer CAS-shaped batch: `classes × per_class` rows per domain.
pub fn cas_batch(seed: u64, classes: usize, per_class: usize, widths: [usize; 2]) -> LabeledBatch {
    let n = classes * per_class;
    let labels: Vec<usize> = (0..classes).flat_map(|c| std::iter::repeat_n(c, per_class)).collect();
    LabeledBatch::new(
        widths.iter().enumerate().map(|(l, &d)| random_matrix(seed + l as u64, n, d)).collect(),
        widths.iter().enumerate().map(|(l, &d)| random_matrix(seed + 10 + l as u64, n, d)).collect(),
        labels.clone(),
        labels,
        (0..classes).collect(),
    )
    .expect("well-formed fixture")
}
