//! Empirical MMD and the contrastive domain discrepancy (CDD).
//!
//! For a class pair `(c1, c2)` the class-conditional discrepancy is
//! `e1 + e2 − 2·e3`, where `e1` is the mean source/source kernel value over
//! class-`c1` pairs, `e2` the mean target/target value over class-`c2` pairs and
//! `e3` the mean cross-domain value over `(c1, c2)` pairs. Diagonal terms are
//! included (biased estimator), which keeps intra-class terms nonnegative.
//!
//! The CDD of one layer averages the intra-class terms (`c1 = c2`) over the
//! classes of the batch and subtracts the average over ordered pairs `c1 ≠ c2`.
//! Averages are taken over the `M'` classes that the batch actually carries,
//! not the full class count. Layer values are summed.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2, Axis};

use crate::kernels::{kernel_matrix, kernel_matrix_grad, KernelSpec};
use crate::{Error, Matrix, Result};

/// Multi-layer features of a CDD mini-batch with their (pseudo-)labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    pub source_features: Vec<Matrix>,
    pub target_features: Vec<Matrix>,
    pub source_labels: Vec<usize>,
    pub target_labels: Vec<usize>,
    /// Sorted, deduplicated class ids eligible this step.
    pub class_set: Vec<usize>,
}

impl LabeledBatch {
    pub fn new(
        source_features: Vec<Matrix>,
        target_features: Vec<Matrix>,
        source_labels: Vec<usize>,
        target_labels: Vec<usize>,
        mut class_set: Vec<usize>,
    ) -> Result<Self> {
        if source_features.is_empty() || source_features.len() != target_features.len() {
            return Err(Error::InvalidBatch(format!(
                "{} source layers vs {} target layers",
                source_features.len(),
                target_features.len()
            )));
        }
        for (l, (s, t)) in source_features.iter().zip(&target_features).enumerate() {
            if s.nrows() != source_labels.len() || t.nrows() != target_labels.len() {
                return Err(Error::InvalidBatch(format!("layer {l}: row count does not match labels")));
            }
            if s.ncols() != t.ncols() {
                return Err(Error::DimensionMismatch {
                    what: "layer width",
                    left: s.ncols(),
                    right: t.ncols(),
                });
            }
        }
        class_set.sort_unstable();
        class_set.dedup();
        if let Some(y) = source_labels
            .iter()
            .chain(&target_labels)
            .find(|y| class_set.binary_search(y).is_err())
        {
            return Err(Error::InvalidBatch(format!("label {y} not in class set")));
        }
        Ok(Self {
            source_features,
            target_features,
            source_labels,
            target_labels,
            class_set,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.source_features.len()
    }

    /// Single-layer batch; `class_set` is the union of the labels present.
    pub fn single_layer(
        source: Matrix,
        target: Matrix,
        source_labels: Vec<usize>,
        target_labels: Vec<usize>,
    ) -> Result<Self> {
        let classes = source_labels.iter().chain(&target_labels).copied().collect();
        Self::new(vec![source], vec![target], source_labels, target_labels, classes)
    }

    fn members(labels: &[usize], c: usize) -> Vec<usize> {
        labels
            .iter()
            .enumerate()
            .filter_map(|(i, &y)| (y == c).then_some(i))
            .collect()
    }
}

/// Which terms enter the CDD and how absent classes are treated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CddMode {
    /// Subtract the inter-class term; `false` gives the intra-only variant.
    pub inter: bool,
    /// Skip class pairs that lack a domain and renormalise over the remaining
    /// ones instead of failing. Used for class-agnostic batches.
    pub partial: bool,
}

impl CddMode {
    pub const FULL: Self = Self {
        inter: true,
        partial: false,
    };
    pub const INTRA_ONLY: Self = Self {
        inter: false,
        partial: false,
    };

    pub fn partial(self) -> Self {
        Self { partial: true, ..self }
    }
}

impl Default for CddMode {
    fn default() -> Self {
        Self::FULL
    }
}

/// The mean-embedding terms of one class-conditional discrepancy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairTerms {
    pub value: f64,
    pub e1: f64,
    pub e2: f64,
    pub e3: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LayerCdd {
    pub intra: f64,
    pub inter: f64,
    pub total: f64,
    pub per_pair: BTreeMap<(usize, usize), f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CddValue {
    pub total: f64,
    pub intra: f64,
    pub inter: f64,
    pub per_layer: Vec<LayerCdd>,
}

/// Mask `μ_{c c'}(y, y')`: 1 iff `y = c` and `y' = c'`.
pub fn class_mask(y: usize, y_prime: usize, c: usize, c_prime: usize) -> u8 {
    u8::from(y == c && y_prime == c_prime)
}

fn mean_all(k: &Matrix) -> f64 {
    k.sum() / k.len() as f64
}

/// Biased squared MMD between two samples (diagonal terms included).
pub fn mmd_squared(spec: &KernelSpec, source: ArrayView2<f64>, target: ArrayView2<f64>) -> Result<f64> {
    if source.nrows() == 0 || target.nrows() == 0 {
        return Err(Error::EmptyDomain);
    }
    let kss = kernel_matrix(spec, source, source)?;
    let ktt = kernel_matrix(spec, target, target)?;
    let kst = kernel_matrix(spec, source, target)?;
    Ok(mean_all(&kss) + mean_all(&ktt) - 2.0 * mean_all(&kst))
}

/// Class-conditional discrepancy of source class `c1` against target class `c2` at `layer`.
pub fn class_pair_discrepancy(
    spec: &KernelSpec,
    batch: &LabeledBatch,
    layer: usize,
    c1: usize,
    c2: usize,
) -> Result<PairTerms> {
    let src = batch
        .source_features
        .get(layer)
        .ok_or_else(|| Error::InvalidBatch(format!("no layer {layer}")))?;
    let tgt = &batch.target_features[layer];
    let s_idx = LabeledBatch::members(&batch.source_labels, c1);
    let t_idx = LabeledBatch::members(&batch.target_labels, c2);
    if s_idx.is_empty() || t_idx.is_empty() {
        return Err(Error::EmptyClassPair { c1, c2 });
    }
    let s = src.select(Axis(0), &s_idx);
    let t = tgt.select(Axis(0), &t_idx);
    let e1 = mean_all(&kernel_matrix(spec, s.view(), s.view())?);
    let e2 = mean_all(&kernel_matrix(spec, t.view(), t.view())?);
    let e3 = mean_all(&kernel_matrix(spec, s.view(), t.view())?);
    Ok(PairTerms {
        value: e1 + e2 - 2.0 * e3,
        e1,
        e2,
        e3,
    })
}

/// Per-class member lists and the weighted class pairs that enter one CDD evaluation.
struct Plan {
    src_members: BTreeMap<usize, Vec<usize>>,
    tgt_members: BTreeMap<usize, Vec<usize>>,
    /// `(c1, c2, weight)`; weight is `+1/#intra` or `−1/#inter`.
    pairs: Vec<(usize, usize, f64)>,
}

impl Plan {
    fn build(batch: &LabeledBatch, mode: CddMode) -> Result<Self> {
        let mut src_members = BTreeMap::new();
        let mut tgt_members = BTreeMap::new();
        for &c in &batch.class_set {
            src_members.insert(c, LabeledBatch::members(&batch.source_labels, c));
            tgt_members.insert(c, LabeledBatch::members(&batch.target_labels, c));
        }
        let has_src = |c: &usize| !src_members[c].is_empty();
        let has_tgt = |c: &usize| !tgt_members[c].is_empty();
        if !mode.partial {
            if let Some(&c) = batch.class_set.iter().find(|c| !(has_src(c) && has_tgt(c))) {
                return Err(Error::EmptyClassPair { c1: c, c2: c });
            }
        }
        let intra: Vec<usize> = batch
            .class_set
            .iter()
            .copied()
            .filter(|c| has_src(c) && has_tgt(c))
            .collect();
        let inter: Vec<(usize, usize)> = if mode.inter {
            batch
                .class_set
                .iter()
                .flat_map(|&c1| batch.class_set.iter().map(move |&c2| (c1, c2)))
                .filter(|(c1, c2)| c1 != c2 && has_src(c1) && has_tgt(c2))
                .collect()
        } else {
            Vec::new()
        };
        let mut pairs = Vec::with_capacity(intra.len() + inter.len());
        let wi = 1.0 / intra.len().max(1) as f64;
        pairs.extend(intra.iter().map(|&c| (c, c, wi)));
        let wo = -1.0 / inter.len().max(1) as f64;
        pairs.extend(inter.iter().map(|&(a, b)| (a, b, wo)));
        Ok(Self {
            src_members,
            tgt_members,
            pairs,
        })
    }
}

fn block_mean(k: &Matrix, rows: &[usize], cols: &[usize]) -> f64 {
    let mut acc = 0.0;
    for &i in rows {
        for &j in cols {
            acc += k[[i, j]];
        }
    }
    acc / (rows.len() * cols.len()) as f64
}

fn check_specs(specs: &[KernelSpec], batch: &LabeledBatch) -> Result<()> {
    if specs.len() != batch.num_layers() {
        return Err(Error::DimensionMismatch {
            what: "kernel specs per layer",
            left: specs.len(),
            right: batch.num_layers(),
        });
    }
    Ok(())
}

/// CDD with the default mode (intra minus inter, every class covered).
pub fn cdd(specs: &[KernelSpec], batch: &LabeledBatch) -> Result<CddValue> {
    cdd_with(specs, batch, CddMode::FULL)
}

pub fn cdd_with(specs: &[KernelSpec], batch: &LabeledBatch, mode: CddMode) -> Result<CddValue> {
    check_specs(specs, batch)?;
    let plan = Plan::build(batch, mode)?;
    let mut out = CddValue::default();
    for (l, spec) in specs.iter().enumerate() {
        let s = batch.source_features[l].view();
        let t = batch.target_features[l].view();
        let kss = kernel_matrix(spec, s, s)?;
        let ktt = kernel_matrix(spec, t, t)?;
        let kst = kernel_matrix(spec, s, t)?;
        let mut layer = LayerCdd::default();
        for &(c1, c2, w) in &plan.pairs {
            let sm = &plan.src_members[&c1];
            let tm = &plan.tgt_members[&c2];
            let v = block_mean(&kss, sm, sm) + block_mean(&ktt, tm, tm) - 2.0 * block_mean(&kst, sm, tm);
            layer.per_pair.insert((c1, c2), v);
            if c1 == c2 {
                layer.intra += w * v;
            } else {
                layer.inter -= w * v;
            }
        }
        layer.total = layer.intra - layer.inter;
        out.intra += layer.intra;
        out.inter += layer.inter;
        out.total += layer.total;
        out.per_layer.push(layer);
    }
    Ok(out)
}

/// Per-layer gradient of the CDD total with respect to the batch features.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub source: Matrix,
    pub target: Matrix,
}

pub fn cdd_grad(specs: &[KernelSpec], batch: &LabeledBatch) -> Result<Vec<LayerGrad>> {
    cdd_grad_with(specs, batch, CddMode::FULL)
}

pub fn cdd_grad_with(specs: &[KernelSpec], batch: &LabeledBatch, mode: CddMode) -> Result<Vec<LayerGrad>> {
    check_specs(specs, batch)?;
    let plan = Plan::build(batch, mode)?;
    let ns = batch.source_labels.len();
    let nt = batch.target_labels.len();

    // Upstream weights: d total / d K entry. They are layer-independent.
    let mut u_ss = Array2::<f64>::zeros((ns, ns));
    let mut u_tt = Array2::<f64>::zeros((nt, nt));
    let mut u_st = Array2::<f64>::zeros((ns, nt));
    for &(c1, c2, w) in &plan.pairs {
        let sm = &plan.src_members[&c1];
        let tm = &plan.tgt_members[&c2];
        let (a, b) = (sm.len() as f64, tm.len() as f64);
        for &i in sm {
            for &j in sm {
                u_ss[[i, j]] += w / (a * a);
            }
            for &j in tm {
                u_st[[i, j]] -= 2.0 * w / (a * b);
            }
        }
        for &i in tm {
            for &j in tm {
                u_tt[[i, j]] += w / (b * b);
            }
        }
    }

    specs
        .iter()
        .enumerate()
        .map(|(l, spec)| {
            let s = batch.source_features[l].view();
            let t = batch.target_features[l].view();
            let (ga, gb) = kernel_matrix_grad(spec, s, s, u_ss.view())?;
            let mut source = ga + gb;
            let (ga, gb) = kernel_matrix_grad(spec, t, t, u_tt.view())?;
            let mut target = ga + gb;
            let (ga, gb) = kernel_matrix_grad(spec, s, t, u_st.view())?;
            source += &ga;
            target += &gb;
            Ok(LayerGrad { source, target })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, concatenate};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn k1() -> KernelSpec {
        KernelSpec::single(1.0).unwrap()
    }

    #[test]
    fn mmd_identical_multisets_vanish() {
        let a = array![[0.0, 1.0], [2.0, -1.0], [0.5, 0.5]];
        let b = array![[2.0, -1.0], [0.5, 0.5], [0.0, 1.0]];
        assert_abs_diff_eq!(mmd_squared(&k1(), a.view(), b.view()).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn mmd_closed_form() {
        let v = mmd_squared(&k1(), array![[0.0]].view(), array![[1.0]].view()).unwrap();
        assert_abs_diff_eq!(v, 2.0 - 2.0 * (-0.5f64).exp(), epsilon = 1e-15);
        assert_abs_diff_eq!(v, 0.786939, epsilon = 1e-6);
    }

    #[test]
    fn mmd_empty_domain() {
        let e = Array2::<f64>::zeros((0, 1));
        assert!(matches!(
            mmd_squared(&k1(), e.view(), array![[1.0]].view()),
            Err(Error::EmptyDomain)
        ));
    }

    #[test]
    fn mask() {
        assert_eq!(class_mask(1, 2, 1, 2), 1);
        assert_eq!(class_mask(1, 1, 1, 2), 0);
        assert_eq!(class_mask(0, 0, 0, 0), 1);
    }

    #[test]
    fn pair_terms_closed_form() {
        let b = LabeledBatch::single_layer(array![[0.0]], array![[1.0]], vec![0], vec![1]).unwrap();
        let p = class_pair_discrepancy(&k1(), &b, 0, 0, 1).unwrap();
        assert_eq!(p.e1, 1.0);
        assert_eq!(p.e2, 1.0);
        assert_abs_diff_eq!(p.e3, (-0.5f64).exp(), epsilon = 1e-15);
        assert_abs_diff_eq!(p.value, 0.786939, epsilon = 1e-6);
        assert!(matches!(
            class_pair_discrepancy(&k1(), &b, 0, 1, 1),
            Err(Error::EmptyClassPair { .. })
        ));
    }

    #[test]
    fn identical_class_sets_have_zero_intra() {
        let s = array![[0.0, 0.1], [0.2, 0.0], [3.0, 3.0]];
        let b = LabeledBatch::single_layer(s.clone(), s, vec![0, 0, 1], vec![0, 0, 1]).unwrap();
        let p = class_pair_discrepancy(&k1(), &b, 0, 0, 0).unwrap();
        assert_abs_diff_eq!(p.value, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn single_class_has_no_inter_term() {
        let b = LabeledBatch::single_layer(array![[0.0], [0.4]], array![[1.0]], vec![2, 2], vec![2]).unwrap();
        let v = cdd(&[k1()], &b).unwrap();
        assert_eq!(v.inter, 0.0);
        assert_eq!(v.total, v.intra);
        assert!(v.intra > 0.0);
    }

    #[test]
    fn strict_mode_rejects_uncovered_class() {
        let b = LabeledBatch::single_layer(array![[0.0], [1.0]], array![[1.0]], vec![0, 1], vec![0]).unwrap();
        assert!(cdd(&[k1()], &b).is_err());
        assert!(cdd_grad(&[k1()], &b).is_err());
        // Partial mode skips class 1 entirely: intra over {0}, inter over (1, 0).
        let v = cdd_with(&[k1()], &b, CddMode::FULL.partial()).unwrap();
        assert_eq!(v.per_layer[0].per_pair.len(), 2);
    }

    #[test]
    fn batch_validation() {
        assert!(LabeledBatch::new(vec![array![[0.0]]], vec![array![[0.0]]], vec![0], vec![1], vec![0]).is_err());
        assert!(LabeledBatch::new(vec![array![[0.0]]], vec![array![[0.0, 1.0]]], vec![0], vec![0], vec![0]).is_err());
        assert!(LabeledBatch::new(vec![array![[0.0]]], vec![], vec![0], vec![0], vec![0]).is_err());
    }

    fn random_batch(rng: &mut ChaCha8Rng, n: usize, m: usize, d: usize, layers: usize) -> LabeledBatch {
        let labels = |rng: &mut ChaCha8Rng| -> Vec<usize> {
            let mut v: Vec<usize> = (0..n).map(|i| if i < m { i } else { rng.random_range(0..m) }).collect();
            v.reverse();
            v
        };
        let ys = labels(rng);
        let yt = labels(rng);
        let feats = |rng: &mut ChaCha8Rng| Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0));
        let sf = (0..layers).map(|_| feats(rng)).collect();
        let tf = (0..layers).map(|_| feats(rng)).collect();
        LabeledBatch::new(sf, tf, ys, yt, (0..m).collect()).unwrap()
    }

    #[test]
    fn well_separated_matching_classes_give_negative_cdd() {
        let s = array![[0.0, 0.0], [0.1, 0.0], [5.0, 5.0], [5.0, 5.1]];
        let b = LabeledBatch::single_layer(s.clone(), s, vec![0, 0, 1, 1], vec![0, 0, 1, 1]).unwrap();
        let v = cdd(&[k1()], &b).unwrap();
        assert_abs_diff_eq!(v.intra, 0.0, epsilon = 1e-12);
        assert!(v.inter > 0.0);
        assert!(v.total < 0.0);
    }

    #[test]
    fn aggregate_is_sum_of_layers() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let b = random_batch(&mut rng, 7, 3, 3, 2);
        let specs = vec![KernelSpec::from_base(0.8).unwrap(), KernelSpec::from_base(1.6).unwrap()];
        let v = cdd(&specs, &b).unwrap();
        let sum: f64 = v.per_layer.iter().map(|l| l.total).sum();
        assert_abs_diff_eq!(v.total, sum, epsilon = 1e-12);
        assert_abs_diff_eq!(v.total, v.intra - v.inter, epsilon = 1e-12);
        for l in &v.per_layer {
            assert_abs_diff_eq!(l.total, l.intra - l.inter, epsilon = 1e-12);
            assert!(l.per_pair.values().all(|p| (-2.0..=2.0).contains(p)));
        }
    }

    #[test]
    fn block_means_match_pair_discrepancy() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let b = random_batch(&mut rng, 8, 3, 2, 1);
        let spec = KernelSpec::from_base(0.5).unwrap();
        let v = cdd(std::slice::from_ref(&spec), &b).unwrap();
        for (&(c1, c2), val) in &v.per_layer[0].per_pair {
            let p = class_pair_discrepancy(&spec, &b, 0, c1, c2).unwrap();
            assert_abs_diff_eq!(*val, p.value, epsilon = 1e-12);
        }
    }

    #[test]
    fn coincident_features_give_zero_gradient() {
        let p = array![[0.3, -0.2], [0.3, -0.2]];
        let b = LabeledBatch::single_layer(p.clone(), p, vec![0, 0], vec![0, 0]).unwrap();
        let g = cdd_grad(&[k1()], &b).unwrap();
        assert!(g[0].source.iter().chain(g[0].target.iter()).all(|v| *v == 0.0));
    }

    #[test]
    fn padding_zero_dimensions_leaves_gradient_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = random_batch(&mut rng, 6, 2, 3, 1);
        let spec = [KernelSpec::from_base(1.1).unwrap()];
        let g = cdd_grad(&spec, &b).unwrap();
        let pad = |m: &Matrix| concatenate![Axis(1), m.view(), Array2::<f64>::zeros(m.dim()).view()];
        let wide = LabeledBatch::new(
            vec![pad(&b.source_features[0])],
            vec![pad(&b.target_features[0])],
            b.source_labels.clone(),
            b.target_labels.clone(),
            b.class_set.clone(),
        )
        .unwrap();
        let gw = cdd_grad(&spec, &wide).unwrap();
        for (x, y) in g[0].source.iter().zip(gw[0].source.slice(ndarray::s![.., ..3]).iter()) {
            assert_abs_diff_eq!(*x, *y, epsilon = 1e-14);
        }
        assert!(gw[0].target.slice(ndarray::s![.., 3..]).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let h = 1e-5;
        for (k, mode) in [CddMode::FULL, CddMode::INTRA_ONLY].into_iter().enumerate() {
            let b = random_batch(&mut rng, 6, 2 + k, 3, 2);
            let specs: Vec<_> = (0..2)
                .map(|l| KernelSpec::from_median(b.source_features[l].view(), b.target_features[l].view()).unwrap())
                .collect();
            let g = cdd_grad_with(&specs, &b, mode).unwrap();
            for l in 0..2 {
                for dom in 0..2 {
                    for idx in 0..18 {
                        let (r, c) = (idx / 3, idx % 3);
                        let eval = |delta: f64| {
                            let mut bb = b.clone();
                            let m = if dom == 0 { &mut bb.source_features[l] } else { &mut bb.target_features[l] };
                            m[[r, c]] += delta;
                            cdd_with(&specs, &bb, mode).unwrap().total
                        };
                        let fd = (eval(h) - eval(-h)) / (2.0 * h);
                        let an = if dom == 0 { g[l].source[[r, c]] } else { g[l].target[[r, c]] };
                        let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
                        assert!(rel < 1e-4, "layer {l} dom {dom} ({r},{c}): {an} vs {fd}");
                    }
                }
            }
        }
    }
}
