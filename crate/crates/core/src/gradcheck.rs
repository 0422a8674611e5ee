//! Central finite-difference checks for every analytic gradient in the crate.
//!
//! Three components are checked on seeded random instances: the kernel matrix
//! input gradient, the multi-layer CDD feature gradient, and the full composite
//! loss `ce + β·CDD` differentiated through the network parameters.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::discrepancy::{cdd, cdd_grad, LabeledBatch};
use crate::kernels::{kernel_matrix, kernel_matrix_grad, KernelSpec};
use crate::model::{cross_entropy, cross_entropy_grad, Mlp, MlpShape, TapGrads};
use crate::{Matrix, Result};

/// Denominator floor in the relative error, so vanishing gradients are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckOptions {
    pub seed: u64,
    /// Instances per component.
    pub instances: usize,
    pub rtol: f64,
    pub step: f64,
    pub beta: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            instances: 10,
            rtol: 1e-4,
            step: 1e-5,
            beta: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComponentReport {
    pub component: String,
    pub instances: usize,
    pub entries: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub rtol: f64,
    pub components: Vec<ComponentReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.components.iter().all(|c| c.passed)
    }

    pub fn total_instances(&self) -> usize {
        self.components.iter().map(|c| c.instances).sum()
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

/// Labels covering every class in `0..m` at least once.
fn covering_labels(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Vec<usize> {
    let mut y: Vec<usize> = (0..n).map(|i| if i < m { i } else { rng.random_range(0..m) }).collect();
    for i in (1..n).rev() {
        y.swap(i, rng.random_range(0..=i));
    }
    y
}

/// Central difference of `f` in every entry of `x`, compared with `analytic`.
fn check_matrix(x: &mut Matrix, analytic: &Matrix, h: f64, mut f: impl FnMut(&Matrix) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    for idx in 0..x.len() {
        let (r, c) = (idx / x.ncols(), idx % x.ncols());
        let orig = x[[r, c]];
        x[[r, c]] = orig + h;
        let up = f(x);
        x[[r, c]] = orig - h;
        let dn = f(x);
        x[[r, c]] = orig;
        worst = worst.max(rel_error(analytic[[r, c]], (up - dn) / (2.0 * h)));
    }
    worst
}

fn kernel_instance(rng: &mut ChaCha8Rng, h: f64) -> Result<(f64, usize)> {
    let mut a = uniform(rng, 3, 2);
    let mut b = uniform(rng, 3, 2);
    let up = uniform(rng, 3, 3);
    let spec = KernelSpec::from_median(a.view(), b.view())?;
    let (ga, gb) = kernel_matrix_grad(&spec, a.view(), b.view(), up.view())?;
    let objective = |a: &Matrix, b: &Matrix| (kernel_matrix(&spec, a.view(), b.view()).expect("shapes fixed") * &up).sum();
    let b0 = b.clone();
    let wa = check_matrix(&mut a, &ga, h, |a| objective(a, &b0));
    let a0 = a.clone();
    let wb = check_matrix(&mut b, &gb, h, |b| objective(&a0, b));
    Ok((wa.max(wb), a.len() + b.len()))
}

fn cdd_instance(rng: &mut ChaCha8Rng, h: f64) -> Result<(f64, usize)> {
    let m = rng.random_range(2..=3);
    let (n, d) = (6, 3);
    let ys = covering_labels(rng, n, m);
    let yt = covering_labels(rng, n, m);
    let sf: Vec<Matrix> = (0..2).map(|_| uniform(rng, n, d)).collect();
    let tf: Vec<Matrix> = (0..2).map(|_| uniform(rng, n, d)).collect();
    let batch = LabeledBatch::new(sf, tf, ys, yt, (0..m).collect())?;
    let specs = (0..2)
        .map(|l| KernelSpec::from_median(batch.source_features[l].view(), batch.target_features[l].view()))
        .collect::<Result<Vec<_>>>()?;
    let grads = cdd_grad(&specs, &batch)?;
    let mut worst: f64 = 0.0;
    let mut entries = 0;
    for l in 0..2 {
        for source_side in [true, false] {
            let mut work = batch.clone();
            let mut x = if source_side {
                work.source_features[l].clone()
            } else {
                work.target_features[l].clone()
            };
            let g = if source_side { &grads[l].source } else { &grads[l].target };
            entries += x.len();
            worst = worst.max(check_matrix(&mut x, g, h, |x| {
                if source_side {
                    work.source_features[l] = x.clone();
                } else {
                    work.target_features[l] = x.clone();
                }
                cdd(&specs, &work).expect("valid batch").total
            }));
        }
    }
    Ok((worst, entries))
}

struct CompositeProblem {
    ce_x: Matrix,
    ce_y: Vec<usize>,
    src_x: Matrix,
    src_y: Vec<usize>,
    tgt_x: Matrix,
    tgt_y: Vec<usize>,
    classes: Vec<usize>,
    specs: Vec<KernelSpec>,
    beta: f64,
}

impl CompositeProblem {
    fn cdd_batch(&self, net: &Mlp) -> Result<(LabeledBatch, crate::model::FeatureStack, crate::model::FeatureStack)> {
        let s = net.forward(self.src_x.view())?;
        let t = net.forward(self.tgt_x.view())?;
        let batch = LabeledBatch::new(
            s.taps().iter().map(|m| (*m).clone()).collect(),
            t.taps().iter().map(|m| (*m).clone()).collect(),
            self.src_y.clone(),
            self.tgt_y.clone(),
            self.classes.clone(),
        )?;
        Ok((batch, s, t))
    }

    fn loss(&self, net: &Mlp) -> Result<f64> {
        let ce = cross_entropy(net.forward(self.ce_x.view())?.probs.view(), &self.ce_y)?;
        let (batch, _, _) = self.cdd_batch(net)?;
        Ok(ce + self.beta * cdd(&self.specs, &batch)?.total)
    }

    fn gradient(&self, net: &Mlp) -> Result<Vec<f64>> {
        let stack = net.forward(self.ce_x.view())?;
        let g = cross_entropy_grad(stack.probs.view(), &self.ce_y)?;
        let mut total = net.backward(&stack, Some(&g), &TapGrads::default(), 0.0)?;
        let (batch, s, t) = self.cdd_batch(net)?;
        let lg = cdd_grad(&self.specs, &batch)?;
        let taps = |src: bool| TapGrads {
            bottleneck: Some(if src { lg[0].source.clone() } else { lg[0].target.clone() }),
            logits: Some(if src { lg[1].source.clone() } else { lg[1].target.clone() }),
        };
        total.add_assign(&net.backward(&s, None, &taps(true), self.beta)?);
        total.add_assign(&net.backward(&t, None, &taps(false), self.beta)?);
        Ok(total.values().collect())
    }
}

fn composite_instance(rng: &mut ChaCha8Rng, h: f64, beta: f64) -> Result<(f64, usize)> {
    let m = 2;
    let shape = MlpShape {
        input: 3,
        hidden: vec![4],
        bottleneck: 2,
        classes: m,
    };
    let mut net = Mlp::new(shape, rng.random())?;
    let src_x = uniform(rng, 6, 3);
    let tgt_x = uniform(rng, 6, 3);
    let s0 = net.forward(src_x.view())?;
    let t0 = net.forward(tgt_x.view())?;
    let specs = s0
        .taps()
        .iter()
        .zip(t0.taps())
        .map(|(a, b)| KernelSpec::from_median(a.view(), b.view()))
        .collect::<Result<Vec<_>>>()?;
    let problem = CompositeProblem {
        ce_x: uniform(rng, 5, 3),
        ce_y: covering_labels(rng, 5, m),
        src_x,
        src_y: covering_labels(rng, 6, m),
        tgt_x,
        tgt_y: covering_labels(rng, 6, m),
        classes: (0..m).collect(),
        specs,
        beta,
    };
    let analytic = problem.gradient(&net)?;
    let mut worst: f64 = 0.0;
    for (k, &an) in analytic.iter().enumerate() {
        let orig = *net.param_mut(k);
        *net.param_mut(k) = orig + h;
        let up = problem.loss(&net)?;
        *net.param_mut(k) = orig - h;
        let dn = problem.loss(&net)?;
        *net.param_mut(k) = orig;
        worst = worst.max(rel_error(an, (up - dn) / (2.0 * h)));
    }
    Ok((worst, analytic.len()))
}

pub fn run_gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut components = Vec::new();
    for name in ["kernel_matrix", "cdd", "composite"] {
        let mut worst: f64 = 0.0;
        let mut entries = 0;
        for _ in 0..opts.instances {
            let (w, n) = match name {
                "kernel_matrix" => kernel_instance(&mut rng, opts.step)?,
                "cdd" => cdd_instance(&mut rng, opts.step)?,
                _ => composite_instance(&mut rng, opts.step, opts.beta)?,
            };
            worst = worst.max(w);
            entries += n;
        }
        components.push(ComponentReport {
            component: name.to_string(),
            instances: opts.instances,
            entries,
            max_rel_error: worst,
            passed: worst <= opts.rtol,
        });
    }
    Ok(GradcheckReport {
        rtol: opts.rtol,
        components,
    })
}
