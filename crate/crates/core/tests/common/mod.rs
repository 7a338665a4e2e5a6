//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::HashMap;

use vfl_cps::combinatorics::CorruptionPattern;
use vfl_cps::tinynet::{softmax_cross_entropy, DenseNetwork};
use vfl_cps::vfl::{EmbeddingBundle, PredictionOracle};
use vfl_cps::Result;

/// All `c`-subsets of `{1..=m}` in lexicographic order, by recursion.
pub fn lex_subsets(m: usize, c: usize) -> Vec<Vec<usize>> {
    fn go(start: usize, m: usize, left: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if left == 0 {
            out.push(cur.clone());
            return;
        }
        for v in start..=m {
            cur.push(v);
            go(v + 1, m, left - 1, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    go(1, m, c, &mut Vec::new(), &mut out);
    out
}

/// Weights of layer `l` followed by its biases, addressed by one index.
fn param_mut(net: &mut DenseNetwork, l: usize, j: usize) -> &mut f64 {
    let layer = &mut net.layers_mut()[l];
    let nw = layer.weights.len();
    if j < nw {
        &mut layer.weights[j]
    } else {
        &mut layer.bias[j - nw]
    }
}

/// Largest relative difference between backpropagated weight and bias
/// gradients of the cross-entropy and central finite differences.
pub fn finite_difference_error(net: &DenseNetwork, x: &[f64], y: usize) -> f64 {
    let (grads, _) = net.batch_gradients(&[(x, y)]).unwrap();
    let loss = |n: &DenseNetwork| softmax_cross_entropy(&n.predict(x).unwrap(), y).unwrap().1;
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut probe = net.clone();
    for l in 0..net.layers().len() {
        let nw = net.layers()[l].weights.len();
        let nb = net.layers()[l].bias.len();
        for j in 0..nw + nb {
            let orig = *param_mut(&mut probe, l, j);
            *param_mut(&mut probe, l, j) = orig + h;
            let up = loss(&probe);
            *param_mut(&mut probe, l, j) = orig - h;
            let down = loss(&probe);
            *param_mut(&mut probe, l, j) = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = if j < nw { grads.weights[l][j] } else { grads.bias[l][j - nw] };
            let rel = (numeric - analytic).abs() / (numeric.abs() + analytic.abs()).max(1e-7);
            worst = worst.max(rel);
        }
    }
    worst
}

/// Wraps an oracle, checking every observed query against the l-inf
/// budget and the per-sample limit.
pub struct RecordingOracle<O> {
    pub inner: O,
    pub beta: f64,
    pub counts: HashMap<usize, usize>,
    pub max_ratio: f64,
    pub violations: usize,
}

impl<O> RecordingOracle<O> {
    pub fn new(inner: O, beta: f64) -> Self {
        Self {
            inner,
            beta,
            counts: HashMap::new(),
            max_ratio: 0.0,
            violations: 0,
        }
    }
}

impl<O: PredictionOracle> PredictionOracle for RecordingOracle<O> {
    fn query(
        &mut self,
        sample_id: usize,
        adversarial: &[f64],
        bundle: &EmbeddingBundle,
        pattern: &CorruptionPattern,
    ) -> Result<Vec<f64>> {
        let bound = self.beta * (bundle.ub - bundle.lb);
        let dev = adversarial
            .iter()
            .zip(&bundle.adversarial)
            .map(|(a, h)| (a - h).abs())
            .fold(0.0, f64::max);
        // Allow one ulp-scale rounding from h + eta - h.
        let slack = 1e-12 * (1.0 + bundle.ub.abs().max(bundle.lb.abs()));
        if dev > bound + slack {
            self.violations += 1;
        }
        if bound > 0.0 {
            self.max_ratio = self.max_ratio.max(dev / bound);
        }
        let r = self.inner.query(sample_id, adversarial, bundle, pattern)?;
        let c = self.counts.entry(sample_id).or_default();
        *c += 1;
        if *c > self.inner.query_limit() {
            self.violations += 1;
        }
        Ok(r)
    }

    fn queries_used(&self, sample_id: usize) -> usize {
        self.inner.queries_used(sample_id)
    }

    fn query_limit(&self) -> usize {
        self.inner.query_limit()
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}
