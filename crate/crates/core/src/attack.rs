//! Query-limited adversarial embedding generation.
//!
//! The attacker only sees class probabilities, so it estimates the gradient
//! of its loss with NES: antithetic Gaussian directions `+-delta_v`, loss
//! evaluated at `eta + sigma * delta`, and
//! `g = 1 / (sigma * n) * sum_j delta_j * L(eta + sigma * delta_j)`.
//! The perturbation is then updated by projected gradient descent inside the
//! l-infinity ball of radius `beta * (ub - lb)`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::combinatorics::CorruptionPattern;
use crate::error::{invalid, Error, Result};
use crate::tinynet::argmax;
use crate::vfl::{EmbeddingBundle, PredictionOracle};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    #[default]
    CrossEntropy,
    Margin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackMode {
    /// Push the prediction to this class.
    Targeted(usize),
    /// Push the prediction away from this class.
    Untargeted(usize),
}

impl AttackMode {
    /// Whether the attack goal holds for probabilities `p`.
    pub fn is_success(self, p: &[f64]) -> bool {
        match self {
            AttackMode::Targeted(target) => argmax(p) == target,
            AttackMode::Untargeted(source) => argmax(p) != source,
        }
    }

    /// Whether a sample with clean probabilities `p` is a valid attack target.
    pub fn is_eligible(self, p: &[f64]) -> bool {
        !self.is_success(p)
    }

    pub fn class(self) -> usize {
        match self {
            AttackMode::Targeted(c) | AttackMode::Untargeted(c) => c,
        }
    }
}

/// A length measured either absolutely or as a fraction of the sample's
/// adversarial embedding range `ub - lb`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scale {
    RangeFraction(f64),
    Absolute(f64),
}

impl Scale {
    pub fn resolve(self, range: f64) -> f64 {
        match self {
            Scale::RangeFraction(f) => f * range,
            Scale::Absolute(a) => a,
        }
    }

    fn raw(self) -> f64 {
        match self {
            Scale::RangeFraction(v) | Scale::Absolute(v) => v,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    /// Perturbation budget as a fraction of `ub - lb`.
    pub beta: f64,
    pub query_limit: usize,
    /// NES sample count `n`; must be even.
    pub population: usize,
    pub nes_scale: Scale,
    pub learning_rate: Scale,
    #[serde(default)]
    pub loss: LossKind,
    pub mode: AttackMode,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            beta: 0.3,
            query_limit: 2000,
            population: 50,
            nes_scale: Scale::RangeFraction(0.001),
            learning_rate: Scale::RangeFraction(0.02),
            loss: LossKind::CrossEntropy,
            mode: AttackMode::Targeted(0),
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(format!("beta {} outside [0, 1]", self.beta)));
        }
        if self.population == 0 || !self.population.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "NES population {} must be positive and even",
                self.population
            )));
        }
        if !(self.nes_scale.raw() > 0.0) {
            return Err(Error::Config("NES scale must be > 0".into()));
        }
        if !(self.learning_rate.raw() > 0.0) {
            return Err(Error::Config("learning rate must be > 0".into()));
        }
        Ok(())
    }
}

const LOG_FLOOR: f64 = 1e-300;

/// Base metric `l(p, y)`.
fn metric(p: &[f64], y: usize, kind: LossKind) -> f64 {
    let ln = |v: f64| v.max(LOG_FLOOR).ln();
    match kind {
        LossKind::CrossEntropy => -ln(p[y]),
        // Logit margin recovered from log-probabilities (softmax is shift
        // invariant, so log p_j differ from the logits by a constant).
        LossKind::Margin => {
            let other = p
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != y)
                .map(|(_, &v)| ln(v))
                .fold(f64::NEG_INFINITY, f64::max);
            other - ln(p[y])
        }
    }
}

/// The attacker's objective (minimized): `l(p, y_v)` when targeted,
/// `-l(p, y_u)` when untargeted.
pub fn attack_loss(p: &[f64], mode: AttackMode, kind: LossKind) -> f64 {
    match mode {
        AttackMode::Targeted(y) => metric(p, y, kind),
        AttackMode::Untargeted(y) => -metric(p, y, kind),
    }
}

/// Element-wise clip to `[-bound, bound]`.
pub fn clamp_linf(eta: &[f64], bound: f64) -> Result<Vec<f64>> {
    let mut out = eta.to_vec();
    clamp_linf_in_place(&mut out, bound)?;
    Ok(out)
}

pub fn clamp_linf_in_place(eta: &mut [f64], bound: f64) -> Result<()> {
    if !(bound >= 0.0) {
        return Err(invalid(format!("l-inf bound {bound} must be >= 0")));
    }
    for v in eta {
        *v = v.clamp(-bound, bound);
    }
    Ok(())
}

/// NES estimate from explicit directions. Each direction is evaluated at
/// `clamp(eta + sigma * delta)`; the caller supplies antithetic pairs.
pub fn nes_gradient_from_directions<F>(
    mut loss_oracle: F,
    eta: &[f64],
    directions: &[Vec<f64>],
    sigma: f64,
    bound: f64,
) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut grad = vec![0.0; eta.len()];
    let mut candidate = vec![0.0; eta.len()];
    for delta in directions {
        for ((c, &e), &d) in candidate.iter_mut().zip(eta).zip(delta) {
            *c = e + sigma * d;
        }
        clamp_linf_in_place(&mut candidate, bound)?;
        let l = loss_oracle(&candidate)?;
        for (g, &d) in grad.iter_mut().zip(delta) {
            *g += d * l;
        }
    }
    let norm = 1.0 / (sigma * directions.len() as f64);
    grad.iter_mut().for_each(|g| *g *= norm);
    Ok(grad)
}

/// NES gradient with `n / 2` standard Gaussian directions and their mirrors.
/// Calls `loss_oracle` exactly `n` times.
pub fn nes_gradient<F, R>(
    loss_oracle: F,
    eta: &[f64],
    n: usize,
    sigma: f64,
    bound: f64,
    rng: &mut R,
) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
    R: Rng + ?Sized,
{
    if n == 0 || !n.is_multiple_of(2) {
        return Err(invalid(format!("NES sample count {n} must be positive and even")));
    }
    let half: Vec<Vec<f64>> = (0..n / 2)
        .map(|_| (0..eta.len()).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    let mirrored: Vec<Vec<f64>> = half
        .iter()
        .map(|d| d.iter().map(|v: &f64| -v).collect())
        .collect();
    let directions: Vec<Vec<f64>> = half.into_iter().chain(mirrored).collect();
    nes_gradient_from_directions(loss_oracle, eta, &directions, sigma, bound)
}

/// Result of attacking one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationState {
    pub eta: Vec<f64>,
    pub queries_used: usize,
    pub success: bool,
    /// Gradient updates performed.
    pub iterations: usize,
    /// Loss observed at each success check.
    pub loss_trace: Vec<f64>,
}

/// Runs the check / estimate / update loop on one sample until success or
/// until the query budget cannot pay for another estimate plus check.
///
/// Every check costs one query and every gradient estimate `n` queries; the
/// total never exceeds `config.query_limit`.
pub fn generate_ae<O, R>(
    sample_id: usize,
    bundle: &EmbeddingBundle,
    pattern: &CorruptionPattern,
    config: &AttackConfig,
    oracle: &mut O,
    rng: &mut R,
) -> Result<PerturbationState>
where
    O: PredictionOracle + ?Sized,
    R: Rng + ?Sized,
{
    config.validate()?;
    let range = bundle.range();
    let bound = config.beta * range;
    let sigma = config.nes_scale.resolve(range);
    let lr = config.learning_rate.resolve(range);
    let n = config.population;
    let limit = config.query_limit;
    let max_updates = limit / n;

    let mut state = PerturbationState {
        eta: vec![0.0; bundle.adversarial.len()],
        queries_used: 0,
        success: false,
        iterations: 0,
        loss_trace: Vec::new(),
    };
    let mut perturbed = bundle.adversarial.clone();

    loop {
        clamp_linf_in_place(&mut state.eta, bound)?;
        if state.queries_used >= limit {
            break;
        }
        for ((x, &h), &e) in perturbed.iter_mut().zip(&bundle.adversarial).zip(&state.eta) {
            *x = h + e;
        }
        let p = match oracle.query(sample_id, &perturbed, bundle, pattern) {
            Ok(p) => p,
            Err(Error::QueryBudgetExceeded { .. }) => break,
            Err(e) => return Err(e),
        };
        state.queries_used += 1;
        state.loss_trace.push(attack_loss(&p, config.mode, config.loss));
        if config.mode.is_success(&p) {
            state.success = true;
            break;
        }
        if bound == 0.0 || state.iterations >= max_updates || limit - state.queries_used < n + 1 {
            break;
        }

        let mut used = 0usize;
        let mut query_loss = |candidate: &[f64]| -> Result<f64> {
            debug_assert!(candidate.iter().all(|v| v.abs() <= bound));
            let x: Vec<f64> = bundle
                .adversarial
                .iter()
                .zip(candidate)
                .map(|(h, e)| h + e)
                .collect();
            let p = oracle.query(sample_id, &x, bundle, pattern)?;
            used += 1;
            Ok(attack_loss(&p, config.mode, config.loss))
        };
        let grad = nes_gradient(&mut query_loss, &state.eta, n, sigma, bound, rng);
        state.queries_used += used;
        let grad = match grad {
            Ok(g) => g,
            Err(Error::QueryBudgetExceeded { .. }) => break,
            Err(e) => return Err(e),
        };
        for (e, g) in state.eta.iter_mut().zip(&grad) {
            *e -= lr * g;
        }
        state.iterations += 1;
    }
    clamp_linf_in_place(&mut state.eta, bound)?;
    Ok(state)
}

/// One sample queued for attack.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackTarget {
    pub sample_id: usize,
    pub bundle: EmbeddingBundle,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutcome {
    /// Fraction of successful samples.
    pub asr: f64,
    pub states: Vec<PerturbationState>,
}

impl BatchOutcome {
    pub fn total_queries(&self) -> usize {
        self.states.iter().map(|s| s.queries_used).sum()
    }
}

/// Attacks every sample of a pre-filtered batch with its own budget.
pub fn attack_batch<O, R>(
    batch: &[AttackTarget],
    pattern: &CorruptionPattern,
    config: &AttackConfig,
    oracle: &mut O,
    rng: &mut R,
) -> Result<BatchOutcome>
where
    O: PredictionOracle + ?Sized,
    R: Rng + ?Sized,
{
    if batch.is_empty() {
        return Err(invalid("attack batch is empty"));
    }
    let states = batch
        .iter()
        .map(|t| generate_ae(t.sample_id, &t.bundle, pattern, config, oracle, rng))
        .collect::<Result<Vec<_>>>()?;
    let successes = states.iter().filter(|s| s.success).count();
    Ok(BatchOutcome {
        asr: successes as f64 / batch.len() as f64,
        states,
    })
}
