//! Target pseudo-labels via spherical k-means seeded from source class centres,
//! followed by the ambiguous-sample and small-class filters.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::{Error, Matrix, Result};

/// Norms below this are treated as zero.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterState {
    /// Unit-normalised centres, one row per class.
    pub centers: Matrix,
    pub assignments: Vec<usize>,
    /// Cosine dissimilarity of each sample to its assigned centre.
    pub dissimilarities: Vec<f64>,
    pub iterations_run: usize,
    pub converged: bool,
    /// Objective `Σ_i dist(x_i, centre(ŷ_i))` after the initial assignment and after each iteration.
    pub objective_history: Vec<f64>,
    /// Target rows whose feature vector had (near) zero norm.
    pub zero_norm_samples: usize,
}

impl ClusterState {
    pub fn num_classes(&self) -> usize {
        self.centers.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterResult {
    /// Indices forming the filtered target subset.
    pub kept_indices: Vec<usize>,
    /// Sorted class ids that survive the class filter.
    pub kept_classes: Vec<usize>,
    /// Per-class sample counts after the distance filter, before the class filter.
    pub per_class_counts: BTreeMap<usize, usize>,
}

/// Target indices paired with their pseudo-labels.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PseudoLabeled {
    pub indices: Vec<usize>,
    pub labels: Vec<usize>,
    /// Sorted classes eligible for class-aware sampling.
    pub classes: Vec<usize>,
}

impl PseudoLabeled {
    pub fn from_filter(state: &ClusterState, filter: &FilterResult) -> Self {
        Self {
            indices: filter.kept_indices.clone(),
            labels: filter.kept_indices.iter().map(|&i| state.assignments[i]).collect(),
            classes: filter.kept_classes.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

fn norm(v: ArrayView1<f64>) -> f64 {
    v.dot(&v).sqrt()
}

/// `½(1 − cos(a, b))`; 0.5 when either vector has zero norm.
pub fn cosine_dissimilarity(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na < NORM_EPS || nb < NORM_EPS {
        return 0.5;
    }
    let cos = (a.dot(&b) / (na * nb)).clamp(-1.0, 1.0);
    0.5 * (1.0 - cos)
}

fn unit(v: ArrayView1<f64>) -> Option<Array1<f64>> {
    let n = norm(v);
    (n >= NORM_EPS).then(|| &v / n)
}

/// Sum of unit-normalised rows per class, then normalised. Rows without a
/// class member keep `fallback` (or error when there is none).
fn class_direction_sums(
    features: ArrayView2<f64>,
    labels: &[usize],
    num_classes: usize,
) -> (Matrix, Vec<usize>) {
    let mut sums = Array2::zeros((num_classes, features.ncols()));
    let mut counts = vec![0usize; num_classes];
    for (row, &y) in features.rows().into_iter().zip(labels) {
        counts[y] += 1;
        if let Some(u) = unit(row) {
            let mut dst = sums.row_mut(y);
            dst += &u;
        }
    }
    (sums, counts)
}

/// Source class centres: normalised sum of unit feature vectors per class.
pub fn source_class_centers(features: ArrayView2<f64>, labels: &[usize], num_classes: usize) -> Result<Matrix> {
    if features.nrows() != labels.len() {
        return Err(Error::DimensionMismatch {
            what: "labels per row",
            left: labels.len(),
            right: features.nrows(),
        });
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= num_classes) {
        return Err(Error::LabelOutOfRange {
            label: y,
            classes: num_classes,
        });
    }
    let (mut sums, counts) = class_direction_sums(features, labels, num_classes);
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::UncoveredClass(c));
    }
    for mut row in sums.rows_mut() {
        let n = norm(row.view());
        if n >= NORM_EPS {
            row /= n;
        }
    }
    Ok(sums)
}

/// Nearest centre per row (lowest class id on ties) and its dissimilarity.
fn assign(features: ArrayView2<f64>, centers: &Matrix) -> (Vec<usize>, Vec<f64>) {
    features
        .rows()
        .into_iter()
        .map(|x| {
            let mut best = (0usize, f64::INFINITY);
            for (c, center) in centers.rows().into_iter().enumerate() {
                let d = cosine_dissimilarity(x, center);
                if d < best.1 {
                    best = (c, d);
                }
            }
            best
        })
        .unzip()
}

pub fn spherical_kmeans(
    features: ArrayView2<f64>,
    init_centers: ArrayView2<f64>,
    max_iters: usize,
    tol: f64,
) -> Result<ClusterState> {
    if features.nrows() == 0 {
        return Err(Error::NoSamples);
    }
    if init_centers.nrows() == 0 {
        return Err(Error::InvalidParam("no cluster centres".into()));
    }
    if features.ncols() != init_centers.ncols() {
        return Err(Error::DimensionMismatch {
            what: "centre width",
            left: init_centers.ncols(),
            right: features.ncols(),
        });
    }
    let m = init_centers.nrows();
    let zero_norm_samples = features.rows().into_iter().filter(|r| norm(*r) < NORM_EPS).count();

    let mut centers = init_centers.to_owned();
    for mut row in centers.rows_mut() {
        if let Some(u) = unit(row.view()) {
            row.assign(&u);
        }
    }
    let (mut assignments, mut dissimilarities) = assign(features, &centers);
    let mut objective_history = vec![dissimilarities.iter().sum::<f64>()];
    let mut iterations_run = 0;
    let mut converged = false;

    while iterations_run < max_iters {
        let (sums, _) = class_direction_sums(features, &assignments, m);
        let mut movement: f64 = 0.0;
        for (c, row) in sums.rows().into_iter().enumerate() {
            // Empty or degenerate cluster: keep the previous centre.
            if let Some(u) = unit(row) {
                movement = movement.max(cosine_dissimilarity(centers.row(c), u.view()));
                centers.row_mut(c).assign(&u);
            }
        }
        iterations_run += 1;
        let (next, dists) = assign(features, &centers);
        let changed = next != assignments;
        assignments = next;
        dissimilarities = dists;
        objective_history.push(dissimilarities.iter().sum());
        if !changed || movement < tol {
            converged = true;
            break;
        }
    }

    Ok(ClusterState {
        centers,
        assignments,
        dissimilarities,
        iterations_run,
        converged,
        objective_history,
        zero_norm_samples,
    })
}

/// Keep samples with dissimilarity `< d0`, then classes holding more than `n0` of them.
pub fn filter(state: &ClusterState, d0: f64, n0: usize) -> FilterResult {
    let close: Vec<usize> = (0..state.assignments.len())
        .filter(|&i| state.dissimilarities[i] < d0)
        .collect();
    let mut per_class_counts = BTreeMap::new();
    for &i in &close {
        *per_class_counts.entry(state.assignments[i]).or_insert(0) += 1;
    }
    let kept_classes: Vec<usize> = per_class_counts
        .iter()
        .filter_map(|(&c, &n)| (n > n0).then_some(c))
        .collect();
    let kept_indices = close
        .into_iter()
        .filter(|&i| kept_classes.binary_search(&state.assignments[i]).is_ok())
        .collect();
    FilterResult {
        kept_indices,
        kept_classes,
        per_class_counts,
    }
}
