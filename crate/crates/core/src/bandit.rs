//! Arm-selection policies over a flat set of `N` arms.
//!
//! Besides plain Gaussian Thompson sampling this module implements E-TS,
//! Thompson sampling restricted to an *empirical competitive set*: after `t0`
//! warm-up rounds, only arms whose empirical maximum reward reaches the mean
//! estimate of the empirical best arm are sampled.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Running per-arm state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArmStatistics {
    pub pulls: u64,
    pub mean_estimate: f64,
    /// Variance of the Gaussian sampling distribution, `1 / (pulls + 1)`.
    pub posterior_variance: f64,
    pub running_max: f64,
    pub empirical_max_reward: f64,
}

impl Default for ArmStatistics {
    fn default() -> Self {
        Self {
            pulls: 0,
            mean_estimate: 0.0,
            posterior_variance: 1.0,
            running_max: 0.0,
            empirical_max_reward: 0.0,
        }
    }
}

impl ArmStatistics {
    /// Folds one reward in. The running max is updated before the empirical
    /// maximum reward so the current pull contributes its own maximum.
    pub fn record(&mut self, reward: f64) -> Result<()> {
        check_reward(reward)?;
        self.pulls += 1;
        let n = self.pulls as f64;
        self.mean_estimate = (self.mean_estimate * (n - 1.0) + reward) / n;
        self.posterior_variance = 1.0 / (n + 1.0);
        self.running_max = self.running_max.max(reward);
        self.empirical_max_reward = (self.empirical_max_reward * (n - 1.0) + self.running_max) / n;
        Ok(())
    }
}

fn check_reward(reward: f64) -> Result<()> {
    if (0.0..=1.0).contains(&reward) {
        Ok(())
    } else {
        Err(invalid(format!("reward {reward} outside [0, 1]")))
    }
}

/// Which selection rule a [`Policy`] follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    /// Gaussian Thompson sampling over all arms, every round.
    PlainTs,
    /// Thompson sampling over the empirical competitive set after warm-up.
    ExtendedTs,
    /// Uniformly random arm (random corruption baseline).
    Random,
    /// Always the same arm.
    Fixed(usize),
}

impl PolicyKind {
    fn is_thompson(self) -> bool {
        matches!(self, PolicyKind::PlainTs | PolicyKind::ExtendedTs)
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PolicyKind::PlainTs => f.write_str("ts"),
            PolicyKind::ExtendedTs => f.write_str("ets"),
            PolicyKind::Random => f.write_str("random"),
            PolicyKind::Fixed(k) => write!(f, "fixed:{k}"),
        }
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    /// Accepts `ts`, `ets`, `random` and `fixed:<arm>`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ts" | "plain-ts" => Ok(PolicyKind::PlainTs),
            "ets" | "e-ts" | "extended-ts" => Ok(PolicyKind::ExtendedTs),
            "random" | "rc" => Ok(PolicyKind::Random),
            _ => s
                .strip_prefix("fixed:")
                .and_then(|k| k.parse().ok())
                .map(PolicyKind::Fixed)
                .ok_or_else(|| Error::Parse(format!("unknown policy {s:?}"))),
        }
    }
}

/// Policy parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    /// Rounds during which E-TS samples all arms (`t0`).
    #[serde(default, rename = "t0", alias = "warmup_rounds")]
    pub warmup_rounds: usize,
    /// Round-robin pulls per arm at the very start; 0 disables forcing.
    #[serde(default)]
    pub forced_pulls_per_arm: usize,
}

impl PolicyConfig {
    pub fn plain_ts() -> Self {
        Self {
            kind: PolicyKind::PlainTs,
            warmup_rounds: 0,
            forced_pulls_per_arm: 0,
        }
    }

    /// E-TS with `t0` warm-up rounds and the default two forced pulls per arm.
    pub fn extended_ts(warmup_rounds: usize) -> Self {
        Self {
            kind: PolicyKind::ExtendedTs,
            warmup_rounds,
            forced_pulls_per_arm: 2,
        }
    }

    pub fn random() -> Self {
        Self {
            kind: PolicyKind::Random,
            warmup_rounds: 0,
            forced_pulls_per_arm: 0,
        }
    }

    pub fn fixed(arm: usize) -> Self {
        Self {
            kind: PolicyKind::Fixed(arm),
            warmup_rounds: 0,
            forced_pulls_per_arm: 0,
        }
    }

    pub fn with_forced_pulls(mut self, pulls_per_arm: usize) -> Self {
        self.forced_pulls_per_arm = pulls_per_arm;
        self
    }
}

/// Round-robin prefix giving every arm `pulls_per_arm` pulls.
///
/// The prefix has to fit inside the warm-up window.
pub fn forced_exploration_schedule(
    arms: usize,
    warmup_rounds: usize,
    pulls_per_arm: usize,
) -> Result<Vec<usize>> {
    let len = arms
        .checked_mul(pulls_per_arm)
        .ok_or_else(|| Error::Config("forced exploration length overflows".into()))?;
    if len > warmup_rounds {
        return Err(Error::Config(format!(
            "forced exploration needs {len} rounds ({pulls_per_arm} pulls x {arms} arms) but warm-up is {warmup_rounds}"
        )));
    }
    Ok((0..len).map(|i| i % arms).collect())
}

/// Outcome of one arm selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Selection {
    pub arm: usize,
    /// Size of the set the arm was drawn from (`|E^t|` for E-TS).
    pub candidate_set_size: usize,
}

/// Policy state: per-arm statistics plus the global round counter.
#[derive(Debug, Clone)]
pub struct Policy {
    arms: Vec<ArmStatistics>,
    round: u64,
    config: PolicyConfig,
    forced: Vec<usize>,
    candidates: Vec<usize>,
}

impl Policy {
    pub fn new(arms: usize, config: PolicyConfig) -> Result<Self> {
        if arms == 0 {
            return Err(Error::Config("policy needs at least one arm".into()));
        }
        if let PolicyKind::Fixed(k) = config.kind {
            if k >= arms {
                return Err(Error::Config(format!(
                    "fixed arm {k} out of range for {arms} arms"
                )));
            }
        }
        let forced = if config.kind.is_thompson() && config.forced_pulls_per_arm > 0 {
            // Plain TS has no warm-up window; its forced prefix is unconstrained.
            let window = match config.kind {
                PolicyKind::ExtendedTs => config.warmup_rounds,
                _ => usize::MAX,
            };
            forced_exploration_schedule(arms, window, config.forced_pulls_per_arm)?
        } else {
            Vec::new()
        };
        Ok(Self {
            arms: vec![ArmStatistics::default(); arms],
            round: 1,
            config,
            forced,
            candidates: Vec::with_capacity(arms),
        })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn arms(&self) -> &[ArmStatistics] {
        &self.arms
    }

    pub fn num_arms(&self) -> usize {
        self.arms.len()
    }

    /// The round about to be played (1-based).
    pub fn round(&self) -> u64 {
        self.round
    }

    /// Empirical best arm among the fully explored arms, if any arm is
    /// fully explored (`n_k >= (t - 1) / N`).
    pub fn empirical_best_arm(&self) -> Option<usize> {
        let n = self.arms.len() as u64;
        let threshold = self.round - 1;
        let mut best: Option<usize> = None;
        for (k, a) in self.arms.iter().enumerate() {
            if a.pulls * n >= threshold
                && best.is_none_or(|b| a.mean_estimate > self.arms[b].mean_estimate)
            {
                best = Some(k);
            }
        }
        best
    }

    /// The E-TS empirical competitive set for the current round.
    pub fn ets_candidate_set(&self) -> Vec<usize> {
        let mut out = Vec::new();
        self.fill_ets_candidates(&mut out);
        out
    }

    fn fill_ets_candidates(&self, out: &mut Vec<usize>) {
        out.clear();
        let all = 0..self.arms.len();
        if self.round <= self.config.warmup_rounds as u64 {
            out.extend(all);
            return;
        }
        match self.empirical_best_arm() {
            None => out.extend(all),
            Some(best) => {
                let threshold = self.arms[best].mean_estimate;
                out.extend(all.filter(|&k| self.arms[k].empirical_max_reward >= threshold));
            }
        }
    }

    /// Picks the arm for the current round. Does not advance the round;
    /// [`Policy::update`] does.
    pub fn select<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Selection {
        let n = self.arms.len();
        let idx = (self.round - 1) as usize;
        if let Some(&arm) = self.forced.get(idx) {
            return Selection {
                arm,
                candidate_set_size: n,
            };
        }
        match self.config.kind {
            PolicyKind::Fixed(arm) => Selection {
                arm,
                candidate_set_size: 1,
            },
            PolicyKind::Random => Selection {
                arm: rng.random_range(0..n),
                candidate_set_size: n,
            },
            PolicyKind::PlainTs => Selection {
                arm: thompson_argmax(&self.arms, 0..n, rng),
                candidate_set_size: n,
            },
            PolicyKind::ExtendedTs => {
                let mut cands = std::mem::take(&mut self.candidates);
                self.fill_ets_candidates(&mut cands);
                let arm = thompson_argmax(&self.arms, cands.iter().copied(), rng);
                let size = cands.len();
                self.candidates = cands;
                Selection {
                    arm,
                    candidate_set_size: size,
                }
            }
        }
    }

    /// Records the reward of `arm` and advances the round counter.
    pub fn update(&mut self, arm: usize, reward: f64) -> Result<()> {
        let n = self.arms.len();
        let stats = self
            .arms
            .get_mut(arm)
            .ok_or_else(|| invalid(format!("arm {arm} out of range for {n} arms")))?;
        stats.record(reward)?;
        self.round += 1;
        Ok(())
    }
}

/// Draws `theta_k ~ N(mu_k, sigma_k)` for each candidate and returns the
/// argmax; ties go to the earliest candidate.
fn thompson_argmax<R, I>(arms: &[ArmStatistics], candidates: I, rng: &mut R) -> usize
where
    R: Rng + ?Sized,
    I: IntoIterator<Item = usize>,
{
    let mut best = usize::MAX;
    let mut best_theta = f64::NEG_INFINITY;
    for k in candidates {
        let a = &arms[k];
        let z: f64 = rng.sample(StandardNormal);
        let theta = a.mean_estimate + a.posterior_variance.sqrt() * z;
        if best == usize::MAX || theta > best_theta {
            best = k;
            best_theta = theta;
        }
    }
    best
}
