//! A small dense feed-forward network: forward pass, backpropagation, SGD.
//!
//! Weights are stored row-major, `outputs x inputs`. The last layer is
//! normally `Identity` and produces logits; [`softmax_cross_entropy`] turns
//! them into probabilities and a loss.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    /// Uniform initialization in `+-1/sqrt(fan_in)`.
    pub fn random<R: Rng + ?Sized>(
        inputs: usize,
        outputs: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (inputs.max(1) as f64).sqrt();
        let mut draw = || rng.random_range(-bound..=bound);
        let weights = (0..inputs * outputs).map(|_| draw()).collect();
        let bias = (0..outputs).map(|_| draw()).collect();
        Self {
            inputs,
            outputs,
            weights,
            bias,
            activation,
        }
    }

    fn check(&self) -> Result<()> {
        if self.weights.len() != self.inputs * self.outputs || self.bias.len() != self.outputs {
            return Err(invalid(format!(
                "layer {}x{} has {} weights and {} biases",
                self.outputs,
                self.inputs,
                self.weights.len(),
                self.bias.len()
            )));
        }
        if self.weights.iter().chain(&self.bias).any(|v| !v.is_finite()) {
            return Err(invalid("non-finite layer parameter"));
        }
        Ok(())
    }

    fn affine(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.weights.chunks_exact(self.inputs).zip(&self.bias).map(|(row, b)| {
            row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b
        }));
    }
}

/// Inference-time dropout on hidden units.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Dropout {
    #[default]
    Off,
    Rate(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<DenseLayer>", into = "Vec<DenseLayer>")]
pub struct DenseNetwork {
    layers: Vec<DenseLayer>,
}

impl TryFrom<Vec<DenseLayer>> for DenseNetwork {
    type Error = Error;
    fn try_from(layers: Vec<DenseLayer>) -> Result<Self> {
        Self::from_layers(layers)
    }
}

impl From<DenseNetwork> for Vec<DenseLayer> {
    fn from(n: DenseNetwork) -> Self {
        n.layers
    }
}

/// Per-layer parameter gradients, same layout as the layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<Vec<f64>>,
}

impl Gradients {
    fn zeros_like(net: &DenseNetwork) -> Self {
        Self {
            weights: net.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            bias: net.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }

    fn scale(&mut self, s: f64) {
        for v in self.weights.iter_mut().chain(self.bias.iter_mut()) {
            v.iter_mut().for_each(|x| *x *= s);
        }
    }
}

/// Intermediate values of one forward pass, needed for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `inputs[l]` is the input to layer `l`.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation values of each layer.
    pre: Vec<Vec<f64>>,
    output: Vec<f64>,
}

impl ForwardTrace {
    pub fn output(&self) -> &[f64] {
        &self.output
    }
}

impl DenseNetwork {
    /// Random network with the given widths; hidden layers use ReLU and the
    /// last layer is linear.
    pub fn random<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Result<Self> {
        Self::random_with(widths, Activation::Relu, Activation::Identity, rng)
    }

    pub fn random_with<R: Rng + ?Sized>(
        widths: &[usize],
        hidden: Activation,
        last: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(invalid(format!("bad layer widths {widths:?}")));
        }
        let n = widths.len() - 1;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let act = if i + 1 == n { last } else { hidden };
                DenseLayer::random(w[0], w[1], act, rng)
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(invalid("network needs at least one layer"));
        }
        for l in &layers {
            l.check()?;
        }
        for w in layers.windows(2) {
            if w[0].outputs != w[1].inputs {
                return Err(Error::DimensionMismatch {
                    expected: w[0].outputs,
                    actual: w[1].inputs,
                });
            }
        }
        Ok(Self { layers })
    }

    /// `n x n` identity map.
    pub fn identity(n: usize) -> Self {
        let mut weights = vec![0.0; n * n];
        for i in 0..n {
            weights[i * n + i] = 1.0;
        }
        Self {
            layers: vec![DenseLayer {
                inputs: n,
                outputs: n,
                weights,
                bias: vec![0.0; n],
                activation: Activation::Identity,
            }],
        }
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                actual: input.len(),
            });
        }
        Ok(())
    }

    /// Forward pass. With dropout on, every hidden unit (outputs of all but
    /// the last layer) is zeroed with probability `rate` and the survivors
    /// scaled by `1 / (1 - rate)`.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        input: &[f64],
        dropout: Dropout,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        self.check_input(input)?;
        let rate = match dropout {
            Dropout::Off => 0.0,
            Dropout::Rate(r) if (0.0..1.0).contains(&r) => r,
            Dropout::Rate(r) => return Err(invalid(format!("dropout rate {r} outside [0, 1)"))),
        };
        let last = self.layers.len() - 1;
        let mut x = input.to_vec();
        let mut y = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            layer.affine(&x, &mut y);
            for v in y.iter_mut() {
                *v = layer.activation.apply(*v);
            }
            if i < last && rate > 0.0 {
                let keep = 1.0 / (1.0 - rate);
                for v in y.iter_mut() {
                    *v = if rng.random::<f64>() < rate { 0.0 } else { *v * keep };
                }
            }
            std::mem::swap(&mut x, &mut y);
        }
        Ok(x)
    }

    /// Deterministic forward pass without dropout.
    pub fn predict(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.trace(input)?.output)
    }

    pub fn trace(&self, input: &[f64]) -> Result<ForwardTrace> {
        self.check_input(input)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut x = input.to_vec();
        for layer in &self.layers {
            let mut z = Vec::new();
            layer.affine(&x, &mut z);
            let a = z.iter().map(|&v| layer.activation.apply(v)).collect();
            inputs.push(std::mem::replace(&mut x, a));
            pre.push(z);
        }
        Ok(ForwardTrace {
            inputs,
            pre,
            output: x,
        })
    }

    /// Backpropagates `grad_output` (dLoss/dOutput) through a trace. Adds the
    /// parameter gradients into `grads` and returns dLoss/dInput.
    pub fn backward(&self, trace: &ForwardTrace, grad_output: &[f64], grads: &mut Gradients) -> Vec<f64> {
        let mut g = grad_output.to_vec();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            for (gv, &z) in g.iter_mut().zip(&trace.pre[l]) {
                *gv *= layer.activation.derivative(z);
            }
            let x = &trace.inputs[l];
            let gw = &mut grads.weights[l];
            for (o, &go) in g.iter().enumerate() {
                if go == 0.0 {
                    continue;
                }
                let row = &mut gw[o * layer.inputs..(o + 1) * layer.inputs];
                for (w, &xv) in row.iter_mut().zip(x) {
                    *w += go * xv;
                }
            }
            for (b, &go) in grads.bias[l].iter_mut().zip(&g) {
                *b += go;
            }
            let mut gin = vec![0.0; layer.inputs];
            for (o, &go) in g.iter().enumerate() {
                if go == 0.0 {
                    continue;
                }
                let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                for (gi, &w) in gin.iter_mut().zip(row) {
                    *gi += go * w;
                }
            }
            g = gin;
        }
        g
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients::zeros_like(self)
    }

    /// `theta <- theta - lr * grad`.
    pub fn apply_gradients(&mut self, grads: &Gradients, lr: f64) {
        for (l, layer) in self.layers.iter_mut().enumerate() {
            for (w, g) in layer.weights.iter_mut().zip(&grads.weights[l]) {
                *w -= lr * g;
            }
            for (b, g) in layer.bias.iter_mut().zip(&grads.bias[l]) {
                *b -= lr * g;
            }
        }
    }

    /// Mean cross-entropy gradient over `batch`, without applying it.
    pub fn batch_gradients(&self, batch: &[(&[f64], usize)]) -> Result<(Gradients, f64)> {
        let mut grads = self.zero_gradients();
        let mut loss = 0.0;
        for &(x, y) in batch {
            let trace = self.trace(x)?;
            let (p, l) = softmax_cross_entropy(trace.output(), y)?;
            loss += l;
            self.backward(&trace, &cross_entropy_grad(&p, y), &mut grads);
        }
        let n = batch.len().max(1) as f64;
        grads.scale(1.0 / n);
        Ok((grads, loss / n))
    }

    /// One SGD step on the mean cross-entropy of `batch`. Returns the batch
    /// loss measured before the step.
    pub fn backward_sgd_step(&mut self, batch: &[(&[f64], usize)], lr: f64) -> Result<f64> {
        let (grads, loss) = self.batch_gradients(batch)?;
        if lr != 0.0 {
            self.apply_gradients(&grads, lr);
        }
        Ok(loss)
    }

    /// Mini-batch SGD over `data` for `epochs` passes. Returns the training
    /// accuracy of the final network.
    pub fn train<R: Rng + ?Sized>(
        &mut self,
        data: &[(Vec<f64>, usize)],
        opts: &TrainOptions,
        rng: &mut R,
    ) -> Result<f64> {
        let mut order: Vec<usize> = (0..data.len()).collect();
        for _ in 0..opts.epochs {
            order.shuffle(rng);
            for chunk in order.chunks(opts.batch_size.max(1)) {
                let batch: Vec<(&[f64], usize)> =
                    chunk.iter().map(|&i| (data[i].0.as_slice(), data[i].1)).collect();
                self.backward_sgd_step(&batch, opts.learning_rate)?;
            }
        }
        self.accuracy(data)
    }

    pub fn accuracy(&self, data: &[(Vec<f64>, usize)]) -> Result<f64> {
        if data.is_empty() {
            return Ok(0.0);
        }
        let mut hits = 0usize;
        for (x, y) in data {
            if argmax(&self.predict(x)?) == *y {
                hits += 1;
            }
        }
        Ok(hits as f64 / data.len() as f64)
    }

    /// Text serialization:
    ///
    /// ```text
    /// tinynet 1
    /// layers <L>
    /// layer <inputs> <outputs> <relu|identity>
    /// <outputs lines of <inputs> weights each, row-major>
    /// <one line of <outputs> biases>
    /// ... (repeated per layer)
    /// ```
    ///
    /// Values use Rust's shortest round-trip float formatting, so
    /// parse(serialize(net)) == net exactly.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "tinynet 1");
        let _ = writeln!(s, "layers {}", self.layers.len());
        for l in &self.layers {
            let _ = writeln!(s, "layer {} {} {}", l.inputs, l.outputs, l.activation.name());
            for row in l.weights.chunks_exact(l.inputs) {
                let _ = writeln!(s, "{}", join(row));
            }
            let _ = writeln!(s, "{}", join(&l.bias));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
        let mut next = |what: &str| {
            lines
                .next()
                .ok_or_else(|| Error::Parse(format!("unexpected end of input, expected {what}")))
        };
        if next("header")? != "tinynet 1" {
            return Err(Error::Parse("missing `tinynet 1` header".into()));
        }
        let count: usize = parse_field(next("layer count")?, "layers")?;
        let mut layers = Vec::with_capacity(count);
        for _ in 0..count {
            let head: Vec<&str> = next("layer header")?.split_whitespace().collect();
            let [tag, inputs, outputs, act] = head[..] else {
                return Err(Error::Parse(format!("bad layer header {head:?}")));
            };
            if tag != "layer" {
                return Err(Error::Parse(format!("expected `layer`, found {tag:?}")));
            }
            let inputs: usize = parse_num(inputs)?;
            let outputs: usize = parse_num(outputs)?;
            let activation = match act {
                "relu" => Activation::Relu,
                "identity" => Activation::Identity,
                other => return Err(Error::Parse(format!("unknown activation {other:?}"))),
            };
            let mut weights = Vec::with_capacity(inputs * outputs);
            for _ in 0..outputs {
                let row = parse_row(next("weight row")?)?;
                if row.len() != inputs {
                    return Err(Error::Parse(format!(
                        "weight row has {} values, expected {inputs}",
                        row.len()
                    )));
                }
                weights.extend(row);
            }
            let bias = parse_row(next("bias row")?)?;
            layers.push(DenseLayer {
                inputs,
                outputs,
                weights,
                bias,
                activation,
            });
        }
        Self::from_layers(layers)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 50,
            learning_rate: 0.1,
            batch_size: 16,
        }
    }
}

fn join(v: &[f64]) -> String {
    v.iter().map(f64::to_string).collect::<Vec<_>>().join(" ")
}

fn parse_num<T: std::str::FromStr>(s: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    s.parse().map_err(|e: T::Err| Error::Parse(format!("{s:?}: {e}")))
}

fn parse_field<T: std::str::FromStr>(line: &str, key: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    let value = line
        .strip_prefix(key)
        .ok_or_else(|| Error::Parse(format!("expected `{key}`, found {line:?}")))?;
    parse_num(value.trim())
}

fn parse_row(line: &str) -> Result<Vec<f64>> {
    line.split_whitespace().map(parse_num).collect()
}

/// Index of the largest value; ties go to the smallest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / s).collect()
}

/// Softmax probabilities and `-log p[label]`, computed via log-sum-exp.
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> Result<(Vec<f64>, f64)> {
    if label >= logits.len() {
        return Err(invalid(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
    Ok((softmax(logits), lse - logits[label]))
}

/// dLoss/dLogits of softmax cross-entropy.
pub fn cross_entropy_grad(probs: &[f64], label: usize) -> Vec<f64> {
    let mut g = probs.to_vec();
    g[label] -= 1.0;
    g
}

/// `max_{j != y} z_j - z_y`; negative when `y` wins by a margin.
pub fn margin_loss(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() || logits.len() < 2 {
        return Err(invalid(format!(
            "margin loss needs label {label} < {} and at least two classes",
            logits.len()
        )));
    }
    let other = logits
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != label)
        .map(|(_, &z)| z)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(other - logits[label])
}
