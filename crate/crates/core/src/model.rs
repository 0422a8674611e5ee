//! Feed-forward feature extractor and classifier with a hand-written backward pass.
//!
//! Layout: `input → [hidden (ReLU)] × H → bottleneck (linear) → logits (linear)`.
//! The bottleneck output is the representation used for clustering and, together
//! with the logits, one of the two layers the CDD is applied to.
//!
//! # Checkpoint format
//!
//! Plain text, one record per line:
//!
//! ```text
//! can-checkpoint v1
//! shape <input> <hidden widths, comma separated or '-'> <bottleneck> <classes>
//! tensor <name> <rows> <cols>
//! <rows*cols values, row-major, space separated>
//! ...
//! ```
//!
//! Tensors appear in layer order as `<layer>.weight` (`in × out`) followed by
//! `<layer>.bias` (`1 × out`), with layer names `hidden0…`, `bottleneck`, `logits`.
//! Values are written in scientific notation with 17 significant digits, so a
//! save/load round trip is exact.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Matrix, Result};

const CHECKPOINT_MAGIC: &str = "can-checkpoint v1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpShape {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub bottleneck: usize,
    pub classes: usize,
}

impl MlpShape {
    pub fn new(input: usize, classes: usize) -> Self {
        Self {
            input,
            hidden: vec![64, 64],
            bottleneck: 16,
            classes,
        }
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input];
        w.extend(&self.hidden);
        w.push(self.bottleneck);
        w.push(self.classes);
        w
    }

    fn layer_name(&self, l: usize) -> String {
        match l.checked_sub(self.hidden.len()) {
            None => format!("hidden{l}"),
            Some(0) => "bottleneck".into(),
            Some(_) => "logits".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `in × out`
    pub weight: Matrix,
    pub bias: Array1<f64>,
}

impl Dense {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Array2::zeros((fan_in, fan_out)),
            bias: Array1::zeros(fan_out),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    shape: MlpShape,
    pub layers: Vec<Dense>,
}

/// Parameter-shaped gradient (or velocity) buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Dense>,
}

impl Gradients {
    pub fn zeros(shape: &MlpShape) -> Self {
        let w = shape.widths();
        Self {
            layers: w.windows(2).map(|p| Dense::zeros(p[0], p[1])).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight += &b.weight;
            a.bias += &b.bias;
        }
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|d| d.weight.iter().chain(d.bias.iter()).copied())
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(f64::is_finite)
    }
}

/// All layer activations of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    pub input: Matrix,
    /// Pre-activation of each layer.
    pub pre: Vec<Matrix>,
    /// Output of each layer (ReLU applied on hidden layers).
    pub post: Vec<Matrix>,
    pub probs: Matrix,
}

impl FeatureStack {
    pub fn bottleneck(&self) -> &Matrix {
        &self.post[self.post.len() - 2]
    }

    pub fn logits(&self) -> &Matrix {
        &self.post[self.post.len() - 1]
    }

    /// The CDD taps, bottleneck first.
    pub fn taps(&self) -> [&Matrix; 2] {
        [self.bottleneck(), self.logits()]
    }
}

/// Gradients injected at the two tapped layers (unscaled; `beta` applies).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TapGrads {
    pub bottleneck: Option<Matrix>,
    pub logits: Option<Matrix>,
}

pub fn softmax(logits: ArrayView2<f64>) -> Matrix {
    let mut p = logits.to_owned();
    for mut row in p.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row /= s;
    }
    p
}

/// Index of the largest entry per row, lowest index on ties.
pub fn argmax_rows(m: ArrayView2<f64>) -> Vec<usize> {
    m.rows()
        .into_iter()
        .map(|r| {
            let mut best = 0;
            for (j, &v) in r.iter().enumerate() {
                if v > r[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

fn check_labels(probs: ArrayView2<f64>, labels: &[usize]) -> Result<()> {
    if labels.is_empty() || probs.nrows() != labels.len() {
        return Err(Error::DimensionMismatch {
            what: "labels per row",
            left: labels.len(),
            right: probs.nrows(),
        });
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= probs.ncols()) {
        return Err(Error::LabelOutOfRange {
            label: y,
            classes: probs.ncols(),
        });
    }
    Ok(())
}

/// Mean negative log-likelihood; log clamped at 1e-12.
pub fn cross_entropy(probs: ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
    check_labels(probs, labels)?;
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -probs[[i, y]].max(1e-12).ln())
        .sum();
    Ok(total / labels.len() as f64)
}

/// Gradient of [`cross_entropy`] with respect to the logits: `(p − onehot) / n`.
pub fn cross_entropy_grad(probs: ArrayView2<f64>, labels: &[usize]) -> Result<Matrix> {
    check_labels(probs, labels)?;
    let n = labels.len() as f64;
    let mut g = probs.to_owned();
    for (i, &y) in labels.iter().enumerate() {
        g[[i, y]] -= 1.0;
    }
    g /= n;
    Ok(g)
}

impl Mlp {
    /// Uniform `±1/√fan_in` initialisation for weights and biases.
    pub fn new(shape: MlpShape, seed: u64) -> Result<Self> {
        let widths = shape.widths();
        if widths.contains(&0) {
            return Err(Error::InvalidParam(format!("zero layer width in {widths:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = widths
            .windows(2)
            .map(|p| {
                let bound = 1.0 / (p[0] as f64).sqrt();
                let mut draw = || rng.random_range(-bound..bound);
                Dense {
                    weight: Array2::from_shape_simple_fn((p[0], p[1]), &mut draw),
                    bias: Array1::from_shape_simple_fn(p[1], &mut draw),
                }
            })
            .collect();
        Ok(Self { shape, layers })
    }

    pub fn zeros(shape: MlpShape) -> Self {
        let layers = Gradients::zeros(&shape).layers;
        Self { shape, layers }
    }

    pub fn from_layers(shape: MlpShape, layers: Vec<Dense>) -> Result<Self> {
        let widths = shape.widths();
        if layers.len() != widths.len() - 1 {
            return Err(Error::InvalidParam(format!(
                "{} layers for shape with {}",
                layers.len(),
                widths.len() - 1
            )));
        }
        for (l, (d, p)) in layers.iter().zip(widths.windows(2)).enumerate() {
            if d.weight.dim() != (p[0], p[1]) || d.bias.len() != p[1] {
                return Err(Error::InvalidParam(format!("layer {l} has the wrong shape")));
            }
        }
        Ok(Self { shape, layers })
    }

    pub fn shape(&self) -> &MlpShape {
        &self.shape
    }

    fn num_hidden(&self) -> usize {
        self.shape.hidden.len()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|d| d.weight.iter().chain(d.bias.iter()).all(|v| v.is_finite()))
    }

    pub fn forward(&self, inputs: ArrayView2<f64>) -> Result<FeatureStack> {
        if inputs.ncols() != self.shape.input {
            return Err(Error::DimensionMismatch {
                what: "input width",
                left: inputs.ncols(),
                right: self.shape.input,
            });
        }
        let h = self.num_hidden();
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post: Vec<Matrix> = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let x = if l == 0 { inputs } else { post[l - 1].view() };
            let z = x.dot(&layer.weight) + &layer.bias;
            let a = if l < h { z.mapv(|v| v.max(0.0)) } else { z.clone() };
            pre.push(z);
            post.push(a);
        }
        let probs = softmax(post[post.len() - 1].view());
        Ok(FeatureStack {
            input: inputs.to_owned(),
            pre,
            post,
            probs,
        })
    }

    /// Predicted class per row (argmax of logits).
    pub fn predict(&self, inputs: ArrayView2<f64>) -> Result<Vec<usize>> {
        let stack = self.forward(inputs)?;
        Ok(argmax_rows(stack.logits().view()))
    }

    /// Reverse-mode gradients of `ce + beta · Σ_taps ⟨tap grad, tap⟩` through the network.
    pub fn backward(
        &self,
        stack: &FeatureStack,
        ce_grad_at_logits: Option<&Matrix>,
        taps: &TapGrads,
        beta: f64,
    ) -> Result<Gradients> {
        let n = stack.input.nrows();
        let h = self.num_hidden();
        let check = |m: &Matrix, cols: usize, what: &'static str| {
            if m.dim() != (n, cols) {
                Err(Error::DimensionMismatch {
                    what,
                    left: m.nrows(),
                    right: n,
                })
            } else {
                Ok(())
            }
        };
        let mut g = Array2::<f64>::zeros((n, self.shape.classes));
        if let Some(ce) = ce_grad_at_logits {
            check(ce, self.shape.classes, "ce gradient")?;
            g += ce;
        }
        if let Some(t) = &taps.logits {
            check(t, self.shape.classes, "logits tap gradient")?;
            g.scaled_add(beta, t);
        }
        if let Some(t) = &taps.bottleneck {
            check(t, self.shape.bottleneck, "bottleneck tap gradient")?;
        }

        let mut grads = Gradients::zeros(&self.shape);
        for l in (0..self.layers.len()).rev() {
            // `g` is the gradient at this layer's output (post-activation).
            if l < h {
                ndarray::Zip::from(&mut g)
                    .and(&stack.pre[l])
                    .for_each(|gi, &z| if z <= 0.0 { *gi = 0.0 });
            }
            let x = if l == 0 { stack.input.view() } else { stack.post[l - 1].view() };
            grads.layers[l].weight = x.t().dot(&g);
            grads.layers[l].bias = g.sum_axis(Axis(0));
            if l > 0 {
                let mut below = g.dot(&self.layers[l].weight.t());
                if l - 1 == h {
                    if let Some(t) = &taps.bottleneck {
                        below.scaled_add(beta, t);
                    }
                }
                g = below;
            }
        }
        Ok(grads)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|d| d.weight.len() + d.bias.len()).sum()
    }

    /// Mutable access to parameter `k` in the flattening order of [`Gradients::values`].
    pub fn param_mut(&mut self, mut k: usize) -> &mut f64 {
        for d in &mut self.layers {
            if k < d.weight.len() {
                let cols = d.weight.ncols();
                return &mut d.weight[[k / cols, k % cols]];
            }
            k -= d.weight.len();
            if k < d.bias.len() {
                return &mut d.bias[k];
            }
            k -= d.bias.len();
        }
        panic!("parameter index out of range");
    }

    pub fn to_checkpoint_string(&self) -> String {
        let mut out = String::new();
        let s = &self.shape;
        let hidden = if s.hidden.is_empty() {
            "-".to_string()
        } else {
            s.hidden.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(",")
        };
        writeln!(out, "{CHECKPOINT_MAGIC}").unwrap();
        writeln!(out, "shape {} {} {} {}", s.input, hidden, s.bottleneck, s.classes).unwrap();
        for (l, d) in self.layers.iter().enumerate() {
            let name = s.layer_name(l);
            write_tensor(&mut out, &format!("{name}.weight"), d.weight.nrows(), d.weight.ncols(), d.weight.iter());
            write_tensor(&mut out, &format!("{name}.bias"), 1, d.bias.len(), d.bias.iter());
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_string())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_checkpoint_str(&text, path)
    }

    pub fn from_checkpoint_str(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i as u64 + 1, l));
        let err = |line: u64, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut next = |what: &str| lines.next().ok_or_else(|| err(0, format!("unexpected end of file, expected {what}")));

        let (ln, magic) = next("header")?;
        if magic.trim() != CHECKPOINT_MAGIC {
            return Err(err(ln, format!("bad header `{magic}`")));
        }
        let (ln, shape_line) = next("shape")?;
        let f: Vec<&str> = shape_line.split_whitespace().collect();
        if f.len() != 5 || f[0] != "shape" {
            return Err(err(ln, "malformed shape line".into()));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|e| err(ln, format!("bad width `{s}`: {e}")));
        let hidden = if f[2] == "-" {
            Vec::new()
        } else {
            f[2].split(',').map(num).collect::<Result<Vec<_>>>()?
        };
        let shape = MlpShape {
            input: num(f[1])?,
            hidden,
            bottleneck: num(f[3])?,
            classes: num(f[4])?,
        };
        let widths = shape.widths();
        let mut layers = Vec::new();
        for (l, p) in widths.windows(2).enumerate() {
            let name = shape.layer_name(l);
            let w = read_tensor(&mut next, &format!("{name}.weight"), p[0], p[1], path)?;
            let b = read_tensor(&mut next, &format!("{name}.bias"), 1, p[1], path)?;
            layers.push(Dense {
                weight: Array2::from_shape_vec((p[0], p[1]), w).expect("length checked"),
                bias: Array1::from(b),
            });
        }
        Self::from_layers(shape, layers)
    }
}

fn write_tensor<'a>(out: &mut String, name: &str, rows: usize, cols: usize, vals: impl Iterator<Item = &'a f64>) {
    writeln!(out, "tensor {name} {rows} {cols}").unwrap();
    let line: Vec<String> = vals.map(|v| format!("{v:.16e}")).collect();
    writeln!(out, "{}", line.join(" ")).unwrap();
}

fn read_tensor<'a>(
    next: &mut impl FnMut(&str) -> Result<(u64, &'a str)>,
    name: &str,
    rows: usize,
    cols: usize,
    path: &Path,
) -> Result<Vec<f64>> {
    let err = |line: u64, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let (ln, header) = next(name)?;
    let expected = format!("tensor {name} {rows} {cols}");
    if header.split_whitespace().collect::<Vec<_>>().join(" ") != expected {
        return Err(err(ln, format!("expected `{expected}`, found `{header}`")));
    }
    let (ln, body) = next(name)?;
    let vals = body
        .split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|e| err(ln, format!("bad value `{t}`: {e}"))))
        .collect::<Result<Vec<_>>>()?;
    if vals.len() != rows * cols {
        return Err(err(ln, format!("expected {} values, found {}", rows * cols, vals.len())));
    }
    Ok(vals)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LrSchedule {
    pub eta0: f64,
    pub a: f64,
    pub b: f64,
    pub momentum: f64,
    pub total_steps: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            eta0: 0.01,
            a: 10.0,
            b: 0.75,
            momentum: 0.9,
            total_steps: 1,
        }
    }
}

impl LrSchedule {
    /// `η_p = η₀ / (1 + a·p)^b` with `p = step / total_steps`.
    pub fn lr(&self, step: usize) -> f64 {
        let p = step as f64 / self.total_steps.max(1) as f64;
        self.eta0 / (1.0 + self.a * p).powf(self.b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta0 > 0.0 && self.a >= 0.0 && self.b >= 0.0 && (0.0..1.0).contains(&self.momentum)) {
            return Err(Error::InvalidParam(format!("invalid learning-rate schedule {self:?}")));
        }
        Ok(())
    }
}

/// Momentum SGD state.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub schedule: LrSchedule,
    /// Per-layer learning-rate multipliers.
    pub multipliers: Vec<f64>,
    velocity: Gradients,
}

impl Sgd {
    /// Multiplier 1.0 on every layer except `logits_multiplier` on the last.
    pub fn new(schedule: LrSchedule, shape: &MlpShape, logits_multiplier: f64) -> Result<Self> {
        schedule.validate()?;
        let velocity = Gradients::zeros(shape);
        let mut multipliers = vec![1.0; velocity.layers.len()];
        *multipliers.last_mut().unwrap() = logits_multiplier;
        Ok(Self {
            schedule,
            multipliers,
            velocity,
        })
    }

    /// `v ← μ·v + g;  θ ← θ − η_p·mult_l·v`.
    pub fn step(&mut self, params: &mut Mlp, grads: &Gradients, step: usize) -> Result<f64> {
        sgd_step(params, grads, &self.schedule, step, &mut self.velocity, &self.multipliers)
    }
}

pub fn sgd_step(
    params: &mut Mlp,
    grads: &Gradients,
    schedule: &LrSchedule,
    step: usize,
    velocity: &mut Gradients,
    multipliers: &[f64],
) -> Result<f64> {
    if step >= schedule.total_steps {
        return Err(Error::InvalidParam(format!(
            "step {step} beyond schedule of {} steps",
            schedule.total_steps
        )));
    }
    if !grads.is_finite() {
        return Err(Error::Divergence("gradient"));
    }
    let lr = schedule.lr(step);
    let mu = schedule.momentum;
    for ((p, g), (v, mult)) in params
        .layers
        .iter_mut()
        .zip(&grads.layers)
        .zip(velocity.layers.iter_mut().zip(multipliers))
    {
        v.weight.zip_mut_with(&g.weight, |vi, &gi| *vi = mu * *vi + gi);
        v.bias.zip_mut_with(&g.bias, |vi, &gi| *vi = mu * *vi + gi);
        p.weight.scaled_add(-lr * mult, &v.weight);
        p.bias.scaled_add(-lr * mult, &v.bias);
    }
    if !params.is_finite() {
        return Err(Error::Divergence("parameters"));
    }
    Ok(lr)
}
