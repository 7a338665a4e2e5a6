//! Experiment drivers: pure bandit replications on Gaussian environments,
//! the online attack loop (policy picks a pattern, the attack's ASR is the
//! reward), the exhaustive pattern sweep and defense comparisons.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{attack_batch, AttackConfig, AttackTarget, LossKind, Scale};
use crate::bandit::{Policy, PolicyConfig};
use crate::combinatorics::{count_patterns, index_to_pattern, CorruptionPattern};
use crate::env::{build_grid_c5, build_grid_c6, CompetitiveLabel, EnvironmentSpec};
use crate::error::{invalid, Error, Result};
use crate::rng::SeedPath;
use crate::tinynet::argmax;
use crate::vfl::{make_synthetic_task, Defense, EmbeddingBundle, QueryServer, SyntheticTask, SyntheticTaskSpec};

/// Rounds averaged into one reported test epoch.
pub const DEFAULT_EPOCH_ROUNDS: usize = 25;

fn default_epoch_rounds() -> usize {
    DEFAULT_EPOCH_ROUNDS
}

/// Which Gaussian environment a bandit run uses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", deny_unknown_fields)]
pub enum EnvironmentChoice {
    /// 100 arms, means 0.00..0.99.
    GridC6,
    /// `arms - 1` cyclic grid arms plus one arm with mean 1.0.
    GridC5 { arms: usize },
    Custom { arms: EnvironmentSpec },
}

impl EnvironmentChoice {
    pub fn build(&self) -> Result<EnvironmentSpec> {
        match self {
            EnvironmentChoice::GridC6 => Ok(build_grid_c6()),
            EnvironmentChoice::GridC5 { arms } => build_grid_c5(*arms),
            EnvironmentChoice::Custom { arms } => Ok(arms.clone()),
        }
    }
}

/// Everything the online attack needs besides the policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackScenario {
    pub task: SyntheticTaskSpec,
    /// Clients corrupted per round (`C`).
    pub corruption_budget: usize,
    /// Eligible samples attacked per round (`B`).
    pub batch_size: usize,
    pub attack: AttackConfig,
    #[serde(default)]
    pub defense: Defense,
    /// Size of the common evaluation batch of sweeps and defense runs.
    pub sweep_batch: usize,
}

impl AttackScenario {
    /// Six clients, two corrupted, 16 samples per round, targeted at class 0.
    ///
    /// The attack steps at 0.05 of the embedding range instead of the
    /// library default, which barely moves these models within the budget.
    pub fn synthetic(weights: Vec<f64>) -> Self {
        let clients = weights.len();
        Self {
            task: SyntheticTaskSpec::uniform(clients).with_informativeness(weights),
            corruption_budget: 2,
            batch_size: 16,
            attack: AttackConfig {
                learning_rate: Scale::RangeFraction(0.05),
                loss: LossKind::CrossEntropy,
                ..AttackConfig::default()
            },
            defense: Defense::None,
            sweep_batch: 256,
        }
    }

    pub fn clients(&self) -> usize {
        self.task.clients()
    }

    pub fn arms(&self) -> Result<usize> {
        count_patterns(self.clients(), self.corruption_budget)
    }

    /// Trains the task model for one seed.
    pub fn build_task(&self, seed: u64) -> Result<SyntheticTask> {
        make_synthetic_task(&self.task, SeedPath::new(seed).label("task").seed())
    }

    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.sweep_batch == 0 {
            return Err(Error::Config("batch sizes must be >= 1".into()));
        }
        if self.corruption_budget == 0 {
            return Err(Error::Config("corruption budget must be >= 1".into()));
        }
        self.arms()?;
        self.attack.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
#[allow(clippy::large_enum_variant)]
pub enum Scenario {
    GaussianBandit { environment: EnvironmentChoice },
    VflAttack(AttackScenario),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub policy: PolicyConfig,
    /// Horizon `T`.
    pub rounds: usize,
    /// One trial per seed.
    pub seeds: Vec<u64>,
    #[serde(default = "default_epoch_rounds")]
    pub epoch_rounds: usize,
    pub scenario: Scenario,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be >= 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.epoch_rounds == 0 {
            return Err(Error::Config("epoch_rounds must be >= 1".into()));
        }
        match &self.scenario {
            Scenario::GaussianBandit { environment } => {
                Policy::new(environment.build()?.len(), self.policy).map(|_| ())
            }
            Scenario::VflAttack(s) => {
                s.validate()?;
                Policy::new(s.arms()?, self.policy).map(|_| ())
            }
        }
    }

    /// `trials` seeds derived from one master seed.
    pub fn derive_seeds(master_seed: u64, trials: usize) -> Vec<u64> {
        (0..trials as u64)
            .map(|i| SeedPath::new(master_seed).label("trial").index(i).seed())
            .collect()
    }
}

/// One round of a bandit or attack run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub t: u64,
    pub arm: usize,
    pub pattern: Option<CorruptionPattern>,
    pub reward: f64,
    pub candidate_set_size: usize,
    /// Pseudo-regret so far (bandit runs).
    pub cumulative_regret: Option<f64>,
    /// Server queries spent this round (attack runs).
    pub queries: Option<usize>,
}

/// Runs `config.policy` on the configured Gaussian environment.
pub fn run_bandit_experiment(config: &ExperimentConfig, seed: u64) -> Result<Vec<RoundRecord>> {
    let Scenario::GaussianBandit { environment } = &config.scenario else {
        return Err(Error::Config("run_bandit_experiment needs a gaussian-bandit scenario".into()));
    };
    run_bandit(&environment.build()?, config.policy, config.rounds, seed)
}

/// Bandit loop on a prebuilt environment.
pub fn run_bandit(
    env: &EnvironmentSpec,
    policy: PolicyConfig,
    rounds: usize,
    seed: u64,
) -> Result<Vec<RoundRecord>> {
    let mut policy = Policy::new(env.len(), policy)?;
    let root = SeedPath::new(seed);
    let mut select_rng = root.label("policy").rng();
    let mut reward_rng = root.label("rewards").rng();
    let mut regret = 0.0;
    let mut out = Vec::with_capacity(rounds);
    for _ in 0..rounds {
        let t = policy.round();
        let sel = policy.select(&mut select_rng);
        let reward = env.pull(sel.arm, &mut reward_rng)?;
        policy.update(sel.arm, reward)?;
        regret += env.gaps()[sel.arm];
        out.push(RoundRecord {
            t,
            arm: sel.arm,
            pattern: None,
            reward,
            candidate_set_size: sel.candidate_set_size,
            cumulative_regret: Some(regret),
            queries: None,
        });
    }
    Ok(out)
}

/// Mean reward of each consecutive block of `epoch_rounds` rounds; a
/// trailing partial block forms its own epoch.
pub fn epoch_means(rewards: &[f64], epoch_rounds: usize) -> Vec<f64> {
    rewards
        .chunks(epoch_rounds.max(1))
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect()
}

/// Pull count of every arm over a record series.
pub fn arm_pulls(records: &[RoundRecord], arms: usize) -> Vec<u64> {
    let mut pulls = vec![0; arms];
    for r in records {
        if let Some(p) = pulls.get_mut(r.arm) {
            *p += 1;
        }
    }
    pulls
}

/// Test samples with their clean embeddings and predictions.
#[derive(Debug, Clone)]
pub struct AttackPool {
    embeddings: Vec<Vec<Vec<f64>>>,
    predictions: Vec<usize>,
    eligible: Vec<bool>,
    classes: usize,
}

impl AttackPool {
    /// Marks which test samples the attack mode may target.
    pub fn new(task: &SyntheticTask, config: &AttackConfig) -> Result<Self> {
        let model = &task.model;
        let mut embeddings = Vec::with_capacity(task.test.len());
        let mut predictions = Vec::with_capacity(task.test.len());
        let mut eligible = Vec::with_capacity(task.test.len());
        for x in &task.test.samples {
            let h = model.client_embeddings(x)?;
            let full: Vec<f64> = h.concat();
            let p = model.predict_embedding(&full)?;
            predictions.push(argmax(&p));
            eligible.push(config.mode.is_eligible(&p));
            embeddings.push(h);
        }
        Ok(Self {
            embeddings,
            predictions,
            eligible,
            classes: model.classes(),
        })
    }

    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    pub fn eligible_count(&self) -> usize {
        self.eligible.iter().filter(|&&e| e).count()
    }

    /// Draws test indices uniformly until `size` distinct eligible samples
    /// are found. Gives up after `100 * size` draws.
    pub fn sample_batch<R: Rng + ?Sized>(&self, size: usize, rng: &mut R) -> Result<Vec<usize>> {
        if size == 0 {
            return Err(invalid("batch size must be >= 1"));
        }
        let limit = size.saturating_mul(100);
        let mut batch: Vec<usize> = Vec::with_capacity(size);
        let mut draws = 0;
        while batch.len() < size && draws < limit && !self.is_empty() {
            draws += 1;
            let i = rng.random_range(0..self.len());
            if self.eligible[i] && !batch.contains(&i) {
                batch.push(i);
            }
        }
        if batch.len() < size {
            let mut per_class = vec![0; self.classes];
            for &p in &self.predictions {
                per_class[p] += 1;
            }
            return Err(Error::NoEligibleSamples {
                wanted: size,
                draws,
                per_class,
            });
        }
        Ok(batch)
    }

    /// Attack targets for `indices` under `pattern`.
    pub fn targets(&self, indices: &[usize], pattern: &CorruptionPattern) -> Result<Vec<AttackTarget>> {
        indices
            .iter()
            .map(|&i| {
                Ok(AttackTarget {
                    sample_id: i,
                    bundle: EmbeddingBundle::split(&self.embeddings[i], pattern)?,
                })
            })
            .collect()
    }
}

/// Records and summaries of one online attack run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRun {
    pub records: Vec<RoundRecord>,
    pub epoch_asr: Vec<f64>,
    pub arm_pulls: Vec<u64>,
}

impl AttackRun {
    pub fn final_epoch_asr(&self) -> f64 {
        self.epoch_asr.last().copied().unwrap_or(0.0)
    }
}

/// The online attack: each round draws an eligible batch, lets the policy
/// pick a corruption pattern, attacks the batch through that pattern and
/// feeds the ASR back as the reward.
pub fn run_attack_experiment(
    task: &SyntheticTask,
    config: &ExperimentConfig,
    seed: u64,
) -> Result<AttackRun> {
    let Scenario::VflAttack(scenario) = &config.scenario else {
        return Err(Error::Config("run_attack_experiment needs a vfl-attack scenario".into()));
    };
    scenario.validate()?;
    let clients = task.model.clients();
    let arms = count_patterns(clients, scenario.corruption_budget)?;
    let pool = AttackPool::new(task, &scenario.attack)?;
    let mut policy = Policy::new(arms, config.policy)?;
    let root = SeedPath::new(seed);
    let mut select_rng = root.label("policy").rng();
    let mut batch_rng = root.label("batches").rng();
    let mut records = Vec::with_capacity(config.rounds);
    for _ in 0..config.rounds {
        let t = policy.round();
        let batch = pool.sample_batch(scenario.batch_size, &mut batch_rng)?;
        let sel = policy.select(&mut select_rng);
        let pattern = index_to_pattern(sel.arm, clients, scenario.corruption_budget)?;
        let targets = pool.targets(&batch, &pattern)?;
        let mut server = QueryServer::new(
            &task.model,
            scenario.attack.query_limit,
            scenario.defense,
            root.label("defense").index(t).seed(),
        )?;
        let mut attack_rng = root.label("attack").index(t).rng();
        let outcome = attack_batch(&targets, &pattern, &scenario.attack, &mut server, &mut attack_rng)?;
        policy.update(sel.arm, outcome.asr)?;
        records.push(RoundRecord {
            t,
            arm: sel.arm,
            pattern: Some(pattern),
            reward: outcome.asr,
            candidate_set_size: sel.candidate_set_size,
            cumulative_regret: None,
            queries: Some(outcome.total_queries()),
        });
    }
    let rewards: Vec<f64> = records.iter().map(|r| r.reward).collect();
    Ok(AttackRun {
        epoch_asr: epoch_means(&rewards, config.epoch_rounds),
        arm_pulls: arm_pulls(&records, arms),
        records,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub arm: usize,
    pub pattern: CorruptionPattern,
    pub asr: f64,
    pub queries: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    /// Arm with the highest ASR (smallest index on ties).
    pub best: usize,
}

impl SweepResult {
    pub fn best_row(&self) -> &SweepRow {
        &self.rows[self.best]
    }
}

/// Attacks one common evaluation batch through every corruption pattern.
pub fn exhaustive_pattern_sweep(
    task: &SyntheticTask,
    scenario: &AttackScenario,
    seed: u64,
) -> Result<SweepResult> {
    scenario.validate()?;
    let clients = task.model.clients();
    let arms = count_patterns(clients, scenario.corruption_budget)?;
    let pool = AttackPool::new(task, &scenario.attack)?;
    let root = SeedPath::new(seed).label("sweep");
    let batch = pool.sample_batch(scenario.sweep_batch, &mut root.label("batch").rng())?;
    let mut rows = Vec::with_capacity(arms);
    for arm in 0..arms {
        let pattern = index_to_pattern(arm, clients, scenario.corruption_budget)?;
        let targets = pool.targets(&batch, &pattern)?;
        let mut server = QueryServer::new(
            &task.model,
            scenario.attack.query_limit,
            scenario.defense,
            root.label("defense").index(arm as u64).seed(),
        )?;
        let mut rng = root.label("attack").index(arm as u64).rng();
        let outcome = attack_batch(&targets, &pattern, &scenario.attack, &mut server, &mut rng)?;
        rows.push(SweepRow {
            arm,
            pattern,
            asr: outcome.asr,
            queries: outcome.total_queries(),
        });
    }
    let best = rows
        .iter()
        .enumerate()
        .fold(0, |b, (i, r)| if r.asr > rows[b].asr { i } else { b });
    Ok(SweepResult { rows, best })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefenseOutcome {
    pub defense: Defense,
    pub asr: f64,
    pub queries: usize,
}

/// Attacks one common evaluation batch through `pattern` once per defense,
/// replaying the same attack randomness each time.
pub fn evaluate_defenses(
    task: &SyntheticTask,
    scenario: &AttackScenario,
    pattern: &CorruptionPattern,
    defenses: &[Defense],
    seed: u64,
) -> Result<Vec<DefenseOutcome>> {
    scenario.validate()?;
    let pool = AttackPool::new(task, &scenario.attack)?;
    let root = SeedPath::new(seed).label("defense-eval");
    let batch = pool.sample_batch(scenario.sweep_batch, &mut root.label("batch").rng())?;
    let targets = pool.targets(&batch, pattern)?;
    defenses
        .iter()
        .map(|&defense| {
            let mut server = QueryServer::new(
                &task.model,
                scenario.attack.query_limit,
                defense,
                root.label("server").seed(),
            )?;
            let mut rng = root.label("attack").rng();
            let outcome = attack_batch(&targets, pattern, &scenario.attack, &mut server, &mut rng)?;
            Ok(DefenseOutcome {
                defense,
                asr: outcome.asr,
                queries: outcome.total_queries(),
            })
        })
        .collect()
}

/// Number of rounds until the first epoch whose mean reaches `target`,
/// counted to the end of that epoch.
pub fn rounds_to_reach(epoch_curve: &[f64], target: f64, epoch_rounds: usize, total_rounds: usize) -> Option<usize> {
    epoch_curve
        .iter()
        .position(|&v| v >= target)
        .map(|e| ((e + 1) * epoch_rounds).min(total_rounds))
}

/// Pull counts at the quarter, half and full horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowthReport {
    pub checkpoints: [usize; 3],
    /// Per arm, pulls up to each checkpoint.
    pub pulls: Vec<[u64; 3]>,
    pub competitive: Vec<bool>,
    /// Summed pulls of competitive arms at each checkpoint.
    pub competitive_pulls: [u64; 3],
    pub non_competitive_pulls: [u64; 3],
}

impl GrowthReport {
    /// Mean pulls of `arms` during `(0, T/2]` and during `(T/2, T]`.
    pub fn halves(&self, arms: &[usize]) -> (f64, f64) {
        if arms.is_empty() {
            return (0.0, 0.0);
        }
        let n = arms.len() as f64;
        let first: u64 = arms.iter().map(|&k| self.pulls[k][1]).sum();
        let total: u64 = arms.iter().map(|&k| self.pulls[k][2]).sum();
        (first as f64 / n, (total - first) as f64 / n)
    }
}

/// Pull counts of a record series at `T/4`, `T/2` and `T`, split by the
/// competitive labels from [`crate::env::classify_competitive`].
pub fn pull_count_growth_report(
    records: &[RoundRecord],
    env: &EnvironmentSpec,
    labels: &[CompetitiveLabel],
) -> Result<GrowthReport> {
    if labels.len() != env.len() {
        return Err(Error::DimensionMismatch {
            expected: env.len(),
            actual: labels.len(),
        });
    }
    let horizon = records.len();
    let checkpoints = [horizon / 4, horizon / 2, horizon];
    let mut pulls = vec![[0u64; 3]; env.len()];
    for (i, r) in records.iter().enumerate() {
        let slot = pulls
            .get_mut(r.arm)
            .ok_or_else(|| invalid(format!("arm {} out of range for {} arms", r.arm, env.len())))?;
        for (c, &cp) in checkpoints.iter().enumerate() {
            if i < cp {
                slot[c] += 1;
            }
        }
    }
    let competitive: Vec<bool> = labels.iter().map(|l| l.competitive).collect();
    let mut competitive_pulls = [0; 3];
    let mut non_competitive_pulls = [0; 3];
    for (p, &c) in pulls.iter().zip(&competitive) {
        let acc = if c { &mut competitive_pulls } else { &mut non_competitive_pulls };
        for j in 0..3 {
            acc[j] += p[j];
        }
    }
    Ok(GrowthReport {
        checkpoints,
        pulls,
        competitive,
        competitive_pulls,
        non_competitive_pulls,
    })
}

/// The `count` lowest-mean arms among those labeled non-competitive, in
/// increasing order of mean.
pub fn lowest_non_competitive(env: &EnvironmentSpec, labels: &[CompetitiveLabel], count: usize) -> Vec<usize> {
    let mut arms: Vec<usize> = (0..env.len()).filter(|&k| !labels[k].competitive).collect();
    arms.sort_by(|&a, &b| env.arms()[a].mean.total_cmp(&env.arms()[b].mean).then(a.cmp(&b)));
    arms.truncate(count);
    arms
}
