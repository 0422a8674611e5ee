//! Alternating optimisation: cluster the target set with the current network,
//! filter it, then take `K` gradient steps on cross-entropy plus `β`·CDD with
//! the pseudo-labels held fixed. Repeated for `loops` outer iterations.
//!
//! Target ground truth never reaches the optimisation path. [`Trainer::new`]
//! strips it from the data used for updates and keeps it only for evaluation
//! and the CDD-G diagnostic (CDD measured with true target labels on a fixed
//! probe batch).

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use log::{debug, warn};
use ndarray::{ArrayView2, Axis};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clustering::{self, ClusterState, PseudoLabeled};
use crate::data::{Dataset, Domain};
use crate::discrepancy::{cdd_grad_with, cdd_with, CddMode, LabeledBatch};
use crate::kernels::KernelSpec;
use crate::model::{cross_entropy, cross_entropy_grad, Gradients, LrSchedule, Mlp, MlpShape, Sgd, TapGrads};
use crate::sampling::{BatchPlan, CddBatchIndices, Sampler};
use crate::{Error, Matrix, Result};

const PROBE_STREAM: u64 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    SourceOnly,
    Can,
    IntraOnly,
    NoAo,
    NoCas,
    Pseudo0,
    Pseudo1,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::SourceOnly,
        Method::Can,
        Method::IntraOnly,
        Method::NoAo,
        Method::NoCas,
        Method::Pseudo0,
        Method::Pseudo1,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::SourceOnly => "source-only",
            Method::Can => "can",
            Method::IntraOnly => "intra-only",
            Method::NoAo => "no-ao",
            Method::NoCas => "no-cas",
            Method::Pseudo0 => "pseudo0",
            Method::Pseudo1 => "pseudo1",
        }
    }

    fn cdd_mode(self) -> Option<CddMode> {
        match self {
            Method::Can | Method::NoAo => Some(CddMode::FULL),
            Method::IntraOnly => Some(CddMode::INTRA_ONLY),
            Method::NoCas => Some(CddMode::FULL.partial()),
            _ => None,
        }
    }

    /// Whether the target set is clustered at the start of loop `index`.
    fn clusters_at(self, index: usize) -> bool {
        match self {
            Method::SourceOnly | Method::NoAo => false,
            Method::Pseudo0 => index == 0,
            _ => true,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::UnknownMethod(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    /// Weight of the CDD penalty.
    pub beta: f64,
    /// Sample filter threshold on cosine dissimilarity.
    pub d0: f64,
    /// Class filter: a class needs more than this many filtered samples.
    pub n0: usize,
    /// Network updates per outer loop.
    pub k: usize,
    pub loops: usize,
    /// Cross-entropy-only source steps before the first loop.
    pub pretrain_steps: usize,
    pub batch: BatchPlan,
    pub eta0: f64,
    pub lr_a: f64,
    pub lr_b: f64,
    pub momentum: f64,
    pub logits_lr_multiplier: f64,
    pub hidden: Vec<usize>,
    pub bottleneck: usize,
    pub kmeans_max_iters: usize,
    pub kmeans_tol: f64,
    /// Samples per class and domain in the CDD-G probe batch.
    pub probe_per_class: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Can,
            beta: 0.3,
            d0: 0.05,
            n0: 3,
            k: 50,
            loops: 20,
            pretrain_steps: 500,
            batch: BatchPlan::default(),
            eta0: 0.01,
            lr_a: 10.0,
            lr_b: 0.75,
            momentum: 0.9,
            logits_lr_multiplier: 10.0,
            hidden: vec![64, 64],
            bottleneck: 16,
            kmeans_max_iters: 100,
            kmeans_tol: 1e-6,
            probe_per_class: 8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParam(m.to_string()));
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad("beta must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.d0) {
            return bad("d0 must lie in [0, 1]");
        }
        if self.k == 0 {
            return bad("k must be >= 1");
        }
        if self.bottleneck == 0 || self.hidden.contains(&0) {
            return bad("layer widths must be >= 1");
        }
        if self.probe_per_class == 0 {
            return bad("probe_per_class must be >= 1");
        }
        self.batch.validate()?;
        self.schedule().validate()
    }

    pub fn total_steps(&self) -> usize {
        self.pretrain_steps + self.loops * self.k
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            eta0: self.eta0,
            a: self.lr_a,
            b: self.lr_b,
            momentum: self.momentum,
            total_steps: self.total_steps().max(1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopMetrics {
    #[serde(rename = "loop")]
    pub loop_index: usize,
    /// Global optimiser step count at the end of the loop.
    pub step: usize,
    /// Mean source cross-entropy over the loop's steps.
    pub ce_loss: f64,
    /// Mean CDD (pseudo-labels) over the steps where it was computed.
    pub cdd: Option<f64>,
    /// CDD on the probe batch with ground-truth target labels.
    pub cdd_g: Option<f64>,
    pub target_accuracy: Option<f64>,
    pub clustering_accuracy: Option<f64>,
    pub kept_samples: Option<usize>,
    pub kept_classes: Option<usize>,
    pub learning_rate: f64,
    /// Excluded from the serialised stream so repeated runs are byte-identical.
    #[serde(skip)]
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    /// `None` for classes without samples.
    pub per_class: Vec<Option<f64>>,
    pub mean_class_accuracy: f64,
}

/// Accuracy of the argmax prediction (lowest class on ties).
pub fn evaluate(params: &Mlp, dataset: &Dataset) -> Result<Evaluation> {
    let labels = dataset.labels()?;
    let pred = params.predict(dataset.features.view())?;
    let m = params.shape().classes;
    let mut hit = vec![0usize; m];
    let mut tot = vec![0usize; m];
    for (&p, &y) in pred.iter().zip(labels) {
        if y >= m {
            return Err(Error::LabelOutOfRange { label: y, classes: m });
        }
        tot[y] += 1;
        hit[y] += usize::from(p == y);
    }
    let per_class: Vec<Option<f64>> = hit
        .iter()
        .zip(&tot)
        .map(|(&h, &t)| (t > 0).then(|| h as f64 / t as f64))
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    Ok(Evaluation {
        accuracy: hit.iter().sum::<usize>() as f64 / labels.len() as f64,
        mean_class_accuracy: present.iter().sum::<f64>() / present.len() as f64,
        per_class,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub loops: usize,
    pub steps: usize,
    pub final_target_accuracy: Option<f64>,
    pub per_class_accuracy: Option<Vec<Option<f64>>>,
    pub mean_class_accuracy: Option<f64>,
    pub final_cdd_g: Option<f64>,
    pub final_ce_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: Mlp,
    pub metrics: Vec<LoopMetrics>,
    pub summary: Summary,
}

/// Mutable training state carried across loops.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: Mlp,
    sgd: Sgd,
    /// Optimiser steps taken so far (pretraining included).
    pub step: usize,
    sampler: Sampler,
    pub loop_index: usize,
    /// Result of the most recent clustering.
    pub cluster: Option<ClusterState>,
    /// Filtered pseudo-labelled target subset used by the current loop.
    pub pool: PseudoLabeled,
}

/// Ground-truth-only diagnostics; never read by the update path.
#[derive(Debug, Clone)]
struct Diagnostics {
    target: Dataset,
    probe_source: Vec<usize>,
    probe_target: Vec<usize>,
    probe_classes: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Trainer {
    config: TrainConfig,
    num_classes: usize,
    source_x: Matrix,
    source_y: Vec<usize>,
    target_x: Matrix,
    diagnostics: Option<Diagnostics>,
}

fn per_class_indices(labels: &[usize], m: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); m];
    for (i, &y) in labels.iter().enumerate() {
        out[y].push(i);
    }
    out
}

fn probe_draw(rng: &mut ChaCha8Rng, members: &[usize], n: usize) -> Vec<usize> {
    index::sample(rng, members.len(), n.min(members.len()))
        .into_iter()
        .map(|k| members[k])
        .collect()
}

impl Trainer {
    pub fn new(config: TrainConfig, source: &Dataset, target: &Dataset) -> Result<Self> {
        config.validate()?;
        if source.domain != Domain::Source || target.domain != Domain::Target {
            return Err(Error::InvalidParam(format!(
                "expected a source and a target dataset, got {} and {}",
                source.domain, target.domain
            )));
        }
        let source_y = source.labels()?.to_vec();
        let num_classes = source.num_classes().ok_or(Error::NoSamples)?;
        if source.dims() != target.dims() {
            return Err(Error::DimensionMismatch {
                what: "source/target width",
                left: source.dims(),
                right: target.dims(),
            });
        }
        let diagnostics = match &target.labels {
            Some(t) => {
                if let Some(&y) = t.iter().find(|&&y| y >= num_classes) {
                    return Err(Error::LabelOutOfRange { label: y, classes: num_classes });
                }
                let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
                rng.set_stream(PROBE_STREAM);
                let s_by = per_class_indices(&source_y, num_classes);
                let t_by = per_class_indices(t, num_classes);
                let mut d = Diagnostics {
                    target: target.clone(),
                    probe_source: Vec::new(),
                    probe_target: Vec::new(),
                    probe_classes: Vec::new(),
                };
                for c in 0..num_classes {
                    if s_by[c].is_empty() || t_by[c].is_empty() {
                        continue;
                    }
                    d.probe_classes.push(c);
                    d.probe_source.extend(probe_draw(&mut rng, &s_by[c], config.probe_per_class));
                    d.probe_target.extend(probe_draw(&mut rng, &t_by[c], config.probe_per_class));
                }
                Some(d)
            }
            None => None,
        };
        Ok(Self {
            config,
            num_classes,
            source_x: source.features.clone(),
            source_y,
            target_x: target.features.clone(),
            diagnostics,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn shape(&self) -> MlpShape {
        MlpShape {
            input: self.source_x.ncols(),
            hidden: self.config.hidden.clone(),
            bottleneck: self.config.bottleneck,
            classes: self.num_classes,
        }
    }

    /// Fresh parameters followed by `pretrain_steps` cross-entropy steps.
    pub fn init_state(&self) -> Result<TrainState> {
        let params = Mlp::new(self.shape(), self.config.seed)?;
        self.state_from(params)
    }

    /// State around given parameters, then pretraining.
    pub fn state_from(&self, params: Mlp) -> Result<TrainState> {
        if params.shape() != &self.shape() {
            return Err(Error::InvalidParam("parameter shape does not match the data".into()));
        }
        let sgd = Sgd::new(self.config.schedule(), params.shape(), self.config.logits_lr_multiplier)?;
        let mut state = TrainState {
            params,
            sgd,
            step: 0,
            sampler: Sampler::new(self.config.batch.clone(), self.config.seed)?,
            loop_index: 0,
            cluster: None,
            pool: PseudoLabeled::default(),
        };
        for _ in 0..self.config.pretrain_steps {
            let mut grads = Gradients::zeros(state.params.shape());
            self.source_ce(&mut state, &mut grads)?;
            self.apply(&mut state, &grads)?;
        }
        Ok(state)
    }

    fn apply(&self, state: &mut TrainState, grads: &Gradients) -> Result<f64> {
        let lr = state.sgd.step(&mut state.params, grads, state.step)?;
        state.step += 1;
        Ok(lr)
    }

    /// Cross-entropy on an independent uniform source batch; accumulates into `grads`.
    fn source_ce(&self, state: &mut TrainState, grads: &mut Gradients) -> Result<f64> {
        let idx = state.sampler.uniform_source_batch(self.source_x.nrows())?;
        let x = self.source_x.select(Axis(0), &idx);
        let y: Vec<usize> = idx.iter().map(|&i| self.source_y[i]).collect();
        self.ce_on(&state.params, x.view(), &y, grads)
    }

    fn ce_on(&self, params: &Mlp, x: ArrayView2<f64>, y: &[usize], grads: &mut Gradients) -> Result<f64> {
        let stack = params.forward(x)?;
        let loss = cross_entropy(stack.probs.view(), y)?;
        let g = cross_entropy_grad(stack.probs.view(), y)?;
        grads.add_assign(&params.backward(&stack, Some(&g), &TapGrads::default(), 0.0)?);
        Ok(loss)
    }

    /// Steps 1–4: source centres, spherical k-means on the target, filtering.
    pub fn cluster(&self, params: &Mlp) -> Result<(ClusterState, PseudoLabeled)> {
        let src = params.forward(self.source_x.view())?;
        let centers = clustering::source_class_centers(src.bottleneck().view(), &self.source_y, self.num_classes)?;
        let tgt = params.forward(self.target_x.view())?;
        let state = clustering::spherical_kmeans(
            tgt.bottleneck().view(),
            centers.view(),
            self.config.kmeans_max_iters,
            self.config.kmeans_tol,
        )?;
        if state.zero_norm_samples > 0 {
            warn!("{} target samples have zero-norm features", state.zero_norm_samples);
        }
        let filtered = clustering::filter(&state, self.config.d0, self.config.n0);
        let pool = PseudoLabeled::from_filter(&state, &filtered);
        Ok((state, pool))
    }

    /// Pseudo-labels from the network's current predictions (no-AO variant).
    fn prediction_pool(&self, params: &Mlp) -> Result<PseudoLabeled> {
        let pred = params.predict(self.target_x.view())?;
        let mut counts = vec![0usize; self.num_classes];
        for &p in &pred {
            counts[p] += 1;
        }
        let classes: Vec<usize> = (0..self.num_classes).filter(|&c| counts[c] > self.config.n0).collect();
        let (indices, labels) = pred
            .into_iter()
            .enumerate()
            .filter(|(_, p)| classes.binary_search(p).is_ok())
            .unzip();
        Ok(PseudoLabeled { indices, labels, classes })
    }

    fn tap_stacks(&self, params: &Mlp, b: &CddBatchIndices) -> Result<(crate::model::FeatureStack, crate::model::FeatureStack)> {
        let s = params.forward(self.source_x.select(Axis(0), &b.source_indices).view())?;
        let t = params.forward(self.target_x.select(Axis(0), &b.target_indices).view())?;
        Ok((s, t))
    }

    /// One CDD term on a sampled batch; accumulates `β ∂CDD/∂θ` into `grads`.
    fn cdd_step(
        &self,
        state: &mut TrainState,
        pool: &PseudoLabeled,
        mode: CddMode,
        specs: &mut Option<Vec<KernelSpec>>,
        grads: &mut Gradients,
    ) -> Result<Option<f64>> {
        let method = self.config.method;
        if pool.classes.is_empty() || self.config.beta == 0.0 {
            return Ok(None);
        }
        let b = if method == Method::NoCas {
            state.sampler.class_agnostic_batch(&self.source_y, pool)?
        } else {
            state.sampler.class_aware_batch(&self.source_y, pool)?
        };
        let (s, t) = self.tap_stacks(&state.params, &b)?;
        if specs.is_none() {
            let fresh = s
                .taps()
                .iter()
                .zip(t.taps())
                .map(|(a, b)| KernelSpec::from_median(a.view(), b.view()))
                .collect::<Result<Vec<_>>>()?;
            *specs = Some(fresh);
        }
        let specs = specs.as_ref().expect("set above");
        let batch = LabeledBatch::new(
            s.taps().iter().map(|m| (*m).clone()).collect(),
            t.taps().iter().map(|m| (*m).clone()).collect(),
            b.source_labels.clone(),
            b.target_labels.clone(),
            b.classes.clone(),
        )?;
        let value = cdd_with(specs, &batch, mode)?;
        let lg = cdd_grad_with(specs, &batch, mode)?;
        let beta = self.config.beta;
        let taps_s = TapGrads {
            bottleneck: Some(lg[0].source.clone()),
            logits: Some(lg[1].source.clone()),
        };
        let taps_t = TapGrads {
            bottleneck: Some(lg[0].target.clone()),
            logits: Some(lg[1].target.clone()),
        };
        grads.add_assign(&state.params.backward(&s, None, &taps_s, beta)?);
        grads.add_assign(&state.params.backward(&t, None, &taps_t, beta)?);
        Ok(Some(value.total))
    }

    /// One outer loop of the alternating optimisation.
    pub fn run_loop(&self, state: &mut TrainState) -> Result<LoopMetrics> {
        let started = Instant::now();
        let method = self.config.method;
        let mut clustering_accuracy = None;
        if method.clusters_at(state.loop_index) {
            let (cs, pool) = self.cluster(&state.params)?;
            if pool.classes.is_empty() {
                warn!("loop {}: no target class survived filtering; CE-only steps", state.loop_index);
            }
            state.cluster = Some(cs);
            state.pool = pool;
        }
        if let (Some(cs), Some(d)) = (&state.cluster, &self.diagnostics) {
            let truth = d.target.labels()?;
            let hits = cs.assignments.iter().zip(truth).filter(|(a, b)| a == b).count();
            clustering_accuracy = Some(hits as f64 / truth.len() as f64);
        }
        let (kept_samples, kept_classes) = match method {
            Method::SourceOnly | Method::NoAo => (None, None),
            _ => (Some(state.pool.len()), Some(state.pool.classes.len())),
        };

        // Pseudo-labels are frozen for the K steps below.
        let pool = std::mem::take(&mut state.pool);
        let mut specs: Option<Vec<KernelSpec>> = None;
        let mut ce_total = 0.0;
        let mut cdd_sum = 0.0;
        let mut cdd_n = 0usize;
        let mut lr = 0.0;
        for _ in 0..self.config.k {
            let mut grads = Gradients::zeros(state.params.shape());
            ce_total += self.source_ce(state, &mut grads)?;
            match method {
                Method::SourceOnly => {}
                Method::Can | Method::IntraOnly | Method::NoCas => {
                    let mode = method.cdd_mode().expect("cdd method");
                    if let Some(v) = self.cdd_step(state, &pool, mode, &mut specs, &mut grads)? {
                        cdd_sum += v;
                        cdd_n += 1;
                    }
                }
                Method::NoAo => {
                    let live = self.prediction_pool(&state.params)?;
                    if let Some(v) = self.cdd_step(state, &live, CddMode::FULL, &mut specs, &mut grads)? {
                        cdd_sum += v;
                        cdd_n += 1;
                    }
                }
                Method::Pseudo0 | Method::Pseudo1 => {
                    if !pool.is_empty() {
                        let pos = state.sampler.uniform_pool_batch(&pool)?;
                        let idx: Vec<usize> = pos.iter().map(|&k| pool.indices[k]).collect();
                        let y: Vec<usize> = pos.iter().map(|&k| pool.labels[k]).collect();
                        let x = self.target_x.select(Axis(0), &idx);
                        self.ce_on(&state.params, x.view(), &y, &mut grads)?;
                    }
                }
            }
            lr = self.apply(state, &grads)?;
        }
        state.pool = pool;

        let metrics = LoopMetrics {
            loop_index: state.loop_index,
            step: state.step,
            ce_loss: ce_total / self.config.k as f64,
            cdd: (cdd_n > 0).then(|| cdd_sum / cdd_n as f64),
            cdd_g: self.cdd_g(&state.params)?,
            target_accuracy: match &self.diagnostics {
                Some(d) => Some(evaluate(&state.params, &d.target)?.accuracy),
                None => None,
            },
            clustering_accuracy,
            kept_samples,
            kept_classes,
            learning_rate: lr,
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        debug!("{method} {metrics:?}");
        state.loop_index += 1;
        Ok(metrics)
    }

    /// CDD of the probe batch under ground-truth target labels.
    pub fn cdd_g(&self, params: &Mlp) -> Result<Option<f64>> {
        let Some(d) = &self.diagnostics else {
            return Ok(None);
        };
        if d.probe_classes.is_empty() {
            return Ok(None);
        }
        let truth = d.target.labels()?;
        let s = params.forward(self.source_x.select(Axis(0), &d.probe_source).view())?;
        let t = params.forward(self.target_x.select(Axis(0), &d.probe_target).view())?;
        let specs = s
            .taps()
            .iter()
            .zip(t.taps())
            .map(|(a, b)| KernelSpec::from_median(a.view(), b.view()))
            .collect::<Result<Vec<_>>>()?;
        let batch = LabeledBatch::new(
            s.taps().iter().map(|m| (*m).clone()).collect(),
            t.taps().iter().map(|m| (*m).clone()).collect(),
            d.probe_source.iter().map(|&i| self.source_y[i]).collect(),
            d.probe_target.iter().map(|&i| truth[i]).collect(),
            d.probe_classes.clone(),
        )?;
        Ok(Some(cdd_with(&specs, &batch, CddMode::FULL)?.total))
    }

    pub fn summary(&self, params: &Mlp, metrics: &[LoopMetrics], steps: usize) -> Result<Summary> {
        let eval = match &self.diagnostics {
            Some(d) => Some(evaluate(params, &d.target)?),
            None => None,
        };
        Ok(Summary {
            loops: metrics.len(),
            steps,
            final_target_accuracy: eval.as_ref().map(|e| e.accuracy),
            per_class_accuracy: eval.as_ref().map(|e| e.per_class.clone()),
            mean_class_accuracy: eval.as_ref().map(|e| e.mean_class_accuracy),
            final_cdd_g: self.cdd_g(params)?,
            final_ce_loss: metrics.last().map(|m| m.ce_loss),
        })
    }

    /// Runs every loop, handing each record to `on_loop` as soon as it is ready.
    pub fn train_with(&self, mut on_loop: impl FnMut(&LoopMetrics) -> Result<()>) -> Result<TrainOutcome> {
        let mut state = self.init_state()?;
        let mut metrics = Vec::with_capacity(self.config.loops);
        for _ in 0..self.config.loops {
            let m = self.run_loop(&mut state)?;
            on_loop(&m)?;
            metrics.push(m);
        }
        let summary = self.summary(&state.params, &metrics, state.step)?;
        Ok(TrainOutcome {
            params: state.params,
            metrics,
            summary,
        })
    }
}

/// Trains `config.method` on `source` → `target`.
pub fn train(config: &TrainConfig, source: &Dataset, target: &Dataset) -> Result<TrainOutcome> {
    Trainer::new(config.clone(), source, target)?.train_with(|_| Ok(()))
}
