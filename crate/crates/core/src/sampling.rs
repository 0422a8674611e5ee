//! Mini-batch construction.
//!
//! CDD batches come from class-aware sampling (CAS): a random subset of the
//! eligible classes, then a fixed number of source and target samples per
//! class. Cross-entropy batches are drawn uniformly from the source set on a
//! separate random stream, so consuming one stream never shifts the other.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clustering::PseudoLabeled;
use crate::{Error, Result};

const CAS_STREAM: u64 = 1;
const CE_STREAM: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BatchPlan {
    pub classes_per_batch: usize,
    pub per_class_source: usize,
    pub per_class_target: usize,
    pub ce_batch_size: usize,
}

impl Default for BatchPlan {
    fn default() -> Self {
        Self {
            classes_per_batch: 3,
            per_class_source: 8,
            per_class_target: 8,
            ce_batch_size: 32,
        }
    }
}

impl BatchPlan {
    pub fn validate(&self) -> Result<()> {
        if self.classes_per_batch == 0
            || self.per_class_source == 0
            || self.per_class_target == 0
            || self.ce_batch_size == 0
        {
            return Err(Error::InvalidParam("batch plan counts must be >= 1".into()));
        }
        Ok(())
    }
}

/// Dataset indices chosen for one CDD batch, with their (pseudo-)labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CddBatchIndices {
    pub classes: Vec<usize>,
    pub source_indices: Vec<usize>,
    pub source_labels: Vec<usize>,
    pub target_indices: Vec<usize>,
    pub target_labels: Vec<usize>,
}

/// Owns the two random streams; single-owner, not shared between threads.
#[derive(Debug, Clone)]
pub struct Sampler {
    plan: BatchPlan,
    cas_rng: ChaCha8Rng,
    ce_rng: ChaCha8Rng,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// `count` draws from `pool`: without replacement when the pool suffices.
fn draw<R: Rng>(rng: &mut R, pool: &[usize], count: usize) -> Vec<usize> {
    if pool.len() >= count {
        index::sample(rng, pool.len(), count)
            .into_iter()
            .map(|k| pool[k])
            .collect()
    } else {
        (0..count).map(|_| pool[rng.random_range(0..pool.len())]).collect()
    }
}

fn group_by_label(indices: impl Iterator<Item = (usize, usize)>) -> BTreeMap<usize, Vec<usize>> {
    let mut out: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, y) in indices {
        out.entry(y).or_default().push(i);
    }
    out
}

impl Sampler {
    pub fn new(plan: BatchPlan, seed: u64) -> Result<Self> {
        plan.validate()?;
        Ok(Self {
            plan,
            cas_rng: stream(seed, CAS_STREAM),
            ce_rng: stream(seed, CE_STREAM),
        })
    }

    pub fn plan(&self) -> &BatchPlan {
        &self.plan
    }

    /// Class-aware CDD batch over the classes of `pool`.
    pub fn class_aware_batch(&mut self, source_labels: &[usize], pool: &PseudoLabeled) -> Result<CddBatchIndices> {
        let eligible = &pool.classes;
        let take = self.plan.classes_per_batch.min(eligible.len());
        let mut classes: Vec<usize> = index::sample(&mut self.cas_rng, eligible.len(), take)
            .into_iter()
            .map(|k| eligible[k])
            .collect();
        classes.sort_unstable();

        let src_by_class = group_by_label(source_labels.iter().copied().enumerate());
        let tgt_by_class = group_by_label(pool.indices.iter().copied().zip(pool.labels.iter().copied()));

        let mut out = CddBatchIndices {
            classes: classes.clone(),
            source_indices: Vec::new(),
            source_labels: Vec::new(),
            target_indices: Vec::new(),
            target_labels: Vec::new(),
        };
        for &c in &classes {
            let src = src_by_class
                .get(&c)
                .ok_or(Error::CasPrecondition { class: c, domain: "source" })?;
            let tgt = tgt_by_class
                .get(&c)
                .ok_or(Error::CasPrecondition { class: c, domain: "target" })?;
            let s = draw(&mut self.cas_rng, src, self.plan.per_class_source);
            let t = draw(&mut self.cas_rng, tgt, self.plan.per_class_target);
            out.source_labels.extend(std::iter::repeat_n(c, s.len()));
            out.target_labels.extend(std::iter::repeat_n(c, t.len()));
            out.source_indices.extend(s);
            out.target_indices.extend(t);
        }
        Ok(out)
    }

    /// Class-agnostic CDD batch of the same total size as a CAS batch.
    pub fn class_agnostic_batch(&mut self, source_labels: &[usize], pool: &PseudoLabeled) -> Result<CddBatchIndices> {
        if source_labels.is_empty() {
            return Err(Error::EmptySource);
        }
        if pool.is_empty() {
            return Err(Error::CasPrecondition {
                class: 0,
                domain: "target",
            });
        }
        let ns = self.plan.classes_per_batch * self.plan.per_class_source;
        let nt = self.plan.classes_per_batch * self.plan.per_class_target;
        let all_src: Vec<usize> = (0..source_labels.len()).collect();
        let all_pool: Vec<usize> = (0..pool.len()).collect();
        let s = draw(&mut self.cas_rng, &all_src, ns);
        let t = draw(&mut self.cas_rng, &all_pool, nt);
        let source_labels: Vec<usize> = s.iter().map(|&i| source_labels[i]).collect();
        let target_labels: Vec<usize> = t.iter().map(|&k| pool.labels[k]).collect();
        let mut classes: Vec<usize> = source_labels.iter().chain(&target_labels).copied().collect();
        classes.sort_unstable();
        classes.dedup();
        Ok(CddBatchIndices {
            classes,
            source_indices: s,
            source_labels,
            target_indices: t.iter().map(|&k| pool.indices[k]).collect(),
            target_labels,
        })
    }

    /// Uniform class-agnostic source indices for the cross-entropy term.
    pub fn uniform_source_batch(&mut self, n_source: usize) -> Result<Vec<usize>> {
        if n_source == 0 {
            return Err(Error::EmptySource);
        }
        let all: Vec<usize> = (0..n_source).collect();
        Ok(draw(&mut self.ce_rng, &all, self.plan.ce_batch_size))
    }

    /// Uniform draw of `ce_batch_size` members of a pseudo-labelled pool (CAS stream).
    /// Returns positions into the pool.
    pub fn uniform_pool_batch(&mut self, pool: &PseudoLabeled) -> Result<Vec<usize>> {
        if pool.is_empty() {
            return Err(Error::NoSamples);
        }
        let all: Vec<usize> = (0..pool.len()).collect();
        Ok(draw(&mut self.cas_rng, &all, self.plan.ce_batch_size))
    }
}
