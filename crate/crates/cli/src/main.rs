use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use rand::Rng;
use rand_distr::StandardNormal;

use vfl_cps::attack::{nes_gradient, Scale};
use vfl_cps::bandit::{PolicyConfig, PolicyKind};
use vfl_cps::combinatorics::{pattern_to_index, CorruptionPattern};
use vfl_cps::experiment::{
    evaluate_defenses, exhaustive_pattern_sweep, run_attack_experiment, run_bandit, AttackScenario,
    EnvironmentChoice, ExperimentConfig, Scenario, DEFAULT_EPOCH_ROUNDS,
};
use vfl_cps::manifest::{default_output_dir, ExperimentManifest};
use vfl_cps::report::{write_records_csv, RunSummary, TrialSummary};
use vfl_cps::rng::SeedPath;
use vfl_cps::tinynet::{softmax_cross_entropy, DenseNetwork};
use vfl_cps::vfl::{Defense, NoiseStd};

#[derive(Parser, Debug)]
#[command(name = "vflsim", version, about = "Corruption-pattern bandits and embedding attacks on simulated VFL inference")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Bandit policies on Gaussian grid environments; writes one CSV per trial.
    BanditSim(BanditArgs),
    /// Online attack: the policy picks corruption patterns, NES crafts perturbations.
    AttackSim(AttackArgs),
    /// Attacks a common batch through every corruption pattern.
    Sweep(SweepArgs),
    /// Compares attack success with no defense, smoothing and dropout.
    DefenseEval(DefenseArgs),
    /// Finite-difference and NES self-checks.
    GradCheck(GradCheckArgs),
}

#[derive(Args, Debug)]
struct RunArgs {
    /// TOML manifest; flags override its values.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Master seed; per-trial seeds are derived from it.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    rounds: Option<usize>,
    /// ts, ets, random or fixed:K
    #[arg(long)]
    policy: Option<PolicyKind>,
    /// Warm-up rounds of E-TS (defaults to twice the arm count).
    #[arg(long)]
    t0: Option<usize>,
    /// Round-robin pulls per arm at the start of TS-family policies.
    #[arg(long)]
    forced_pulls: Option<usize>,
    #[arg(long)]
    epoch_rounds: Option<usize>,
    /// Output directory (default: manifest value, then $VFLSIM_OUT_DIR).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BanditArgs {
    #[command(flatten)]
    run: RunArgs,
    /// c6, c5 or c5:N
    #[arg(long)]
    env: Option<String>,
}

#[derive(Args, Debug, Default)]
struct ScenarioArgs {
    /// Per-client informativeness weights, e.g. 5,1,1,1,1,1
    #[arg(long, value_delimiter = ',')]
    weights: Option<Vec<f64>>,
    /// Clients corrupted per round.
    #[arg(long)]
    budget: Option<usize>,
    /// Eligible samples attacked per round.
    #[arg(long)]
    batch: Option<usize>,
    /// Evaluation batch of sweeps and defense comparisons.
    #[arg(long)]
    eval_batch: Option<usize>,
    #[arg(long)]
    beta: Option<f64>,
    /// Query limit per sample.
    #[arg(long)]
    queries: Option<usize>,
    /// Attack step as a fraction of the embedding range.
    #[arg(long)]
    lr: Option<f64>,
    /// none, smoothing[:STD_FRACTION[:VOTES]] or dropout[:RATE]
    #[arg(long)]
    defense: Option<String>,
}

#[derive(Args, Debug)]
struct AttackArgs {
    #[command(flatten)]
    run: RunArgs,
    #[command(flatten)]
    scenario: ScenarioArgs,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    scenario: ScenarioArgs,
}

#[derive(Args, Debug)]
struct DefenseArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    trials: usize,
    /// Pattern to attack, e.g. {1,2}; defaults to each trial's sweep winner.
    #[arg(long)]
    pattern: Option<CorruptionPattern>,
    #[command(flatten)]
    scenario: ScenarioArgs,
}

#[derive(Args, Debug)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    nets: usize,
}

/// Problems with the requested configuration; reported with exit code 2.
#[derive(Debug)]
struct ConfigError(String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::BanditSim(a) => bandit_sim(a),
        Command::AttackSim(a) => attack_sim(a),
        Command::Sweep(a) => sweep(a),
        Command::DefenseEval(a) => defense_eval(a),
        Command::GradCheck(a) => grad_check(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<ConfigError>() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn load_manifest(path: Option<&Path>) -> anyhow::Result<Option<ExperimentManifest>> {
    path.map(|p| {
        ExperimentManifest::load(p).map_err(|e| config_err(format!("invalid manifest {}: {e}", p.display())))
    })
    .transpose()
}

fn parse_env(s: &str) -> anyhow::Result<EnvironmentChoice> {
    match s {
        "c6" => Ok(EnvironmentChoice::GridC6),
        "c5" => Ok(EnvironmentChoice::GridC5 { arms: 11_440 }),
        _ => s
            .strip_prefix("c5:")
            .and_then(|n| n.parse().ok())
            .map(|arms| EnvironmentChoice::GridC5 { arms })
            .ok_or_else(|| config_err(format!("unknown environment {s:?} (expected c6, c5 or c5:N)"))),
    }
}

fn parse_defense(s: &str) -> anyhow::Result<Defense> {
    let mut parts = s.split(':');
    let kind = parts.next().unwrap_or_default();
    let nums: Vec<f64> = parts
        .map(|p| p.parse::<f64>().map_err(|_| config_err(format!("bad number {p:?} in defense {s:?}"))))
        .collect::<anyhow::Result<_>>()?;
    match (kind, nums.as_slice()) {
        ("none", []) => Ok(Defense::None),
        ("smoothing", []) => Ok(Defense::DEFAULT_SMOOTHING),
        ("smoothing", [f]) => Ok(Defense::Smoothing {
            noise_std: NoiseStd::RangeFraction(*f),
            votes: 100,
        }),
        ("smoothing", [f, v]) if v.fract() == 0.0 && *v >= 1.0 => Ok(Defense::Smoothing {
            noise_std: NoiseStd::RangeFraction(*f),
            votes: *v as usize,
        }),
        ("dropout", []) => Ok(Defense::DEFAULT_DROPOUT),
        ("dropout", [r]) => Ok(Defense::Dropout { rate: *r }),
        _ => Err(config_err(format!("unknown defense {s:?}"))),
    }
}

/// Applies policy, horizon and seed flags on top of `config`.
fn apply_run_args(config: &mut ExperimentConfig, run: &RunArgs, arms: usize) {
    if let Some(kind) = run.policy {
        if kind != config.policy.kind {
            config.policy = match kind {
                PolicyKind::ExtendedTs => PolicyConfig::extended_ts(2 * arms),
                PolicyKind::PlainTs => PolicyConfig::plain_ts(),
                PolicyKind::Random => PolicyConfig::random(),
                PolicyKind::Fixed(k) => PolicyConfig::fixed(k),
            };
        }
    }
    if let Some(t0) = run.t0 {
        config.policy.warmup_rounds = t0;
    }
    if let Some(f) = run.forced_pulls {
        config.policy.forced_pulls_per_arm = f;
    }
    if let Some(r) = run.rounds {
        config.rounds = r;
    }
    if let Some(e) = run.epoch_rounds {
        config.epoch_rounds = e;
    }
    if run.seed.is_some() || run.trials.is_some() {
        let trials = run.trials.unwrap_or(config.seeds.len());
        config.seeds = ExperimentConfig::derive_seeds(run.seed.unwrap_or(0), trials);
    }
}

fn apply_scenario_args(s: &mut AttackScenario, a: &ScenarioArgs) -> anyhow::Result<()> {
    if let Some(w) = &a.weights {
        let mut task = s.task.clone();
        let m = w.len();
        task.feature_dims.resize(m, *task.feature_dims.first().unwrap_or(&4));
        task.embedding_dims.resize(m, *task.embedding_dims.first().unwrap_or(&8));
        task.informativeness = w.clone();
        s.task = task;
    }
    if let Some(c) = a.budget {
        s.corruption_budget = c;
    }
    if let Some(b) = a.batch {
        s.batch_size = b;
    }
    if let Some(b) = a.eval_batch {
        s.sweep_batch = b;
    }
    if let Some(b) = a.beta {
        s.attack.beta = b;
    }
    if let Some(q) = a.queries {
        s.attack.query_limit = q;
    }
    if let Some(lr) = a.lr {
        s.attack.learning_rate = Scale::RangeFraction(lr);
    }
    if let Some(d) = &a.defense {
        s.defense = parse_defense(d)?;
    }
    Ok(())
}

fn default_scenario() -> AttackScenario {
    AttackScenario::synthetic(vec![5.0, 1.0, 1.0, 1.0, 1.0, 1.0])
}

fn attack_scenario_from(manifest: Option<ExperimentManifest>) -> anyhow::Result<(Option<ExperimentConfig>, AttackScenario)> {
    match manifest.map(|m| m.experiment) {
        None => Ok((None, default_scenario())),
        Some(cfg) => match &cfg.scenario {
            Scenario::VflAttack(s) => {
                let s = s.clone();
                Ok((Some(cfg), s))
            }
            Scenario::GaussianBandit { .. } => Err(config_err("manifest describes a gaussian-bandit scenario")),
        },
    }
}

fn validated(config: ExperimentConfig) -> anyhow::Result<ExperimentConfig> {
    config.validate().map_err(|e| config_err(e.to_string()))?;
    Ok(config)
}

fn prepare_out_dir(flag: Option<&PathBuf>, manifest: Option<&ExperimentManifest>) -> anyhow::Result<PathBuf> {
    let dir = flag
        .cloned()
        .or_else(|| manifest.and_then(|m| m.output_dir.clone()))
        .unwrap_or_else(default_output_dir);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write_trial(dir: &Path, index: usize, records: &[vfl_cps::experiment::RoundRecord]) -> anyhow::Result<String> {
    let name = format!("trial-{index:03}.csv");
    let file = fs::File::create(dir.join(&name)).with_context(|| format!("creating {name}"))?;
    write_records_csv(std::io::BufWriter::new(file), records)?;
    Ok(name)
}

fn write_summary(dir: &Path, summary: &RunSummary) -> anyhow::Result<()> {
    let path = dir.join("summary.json");
    fs::write(&path, summary.to_json()? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn bandit_sim(args: BanditArgs) -> anyhow::Result<()> {
    let manifest = load_manifest(args.run.manifest.as_deref())?;
    let mut config = match &manifest {
        Some(m) => m.experiment.clone(),
        None => ExperimentConfig {
            policy: PolicyConfig::extended_ts(200),
            rounds: 5000,
            seeds: ExperimentConfig::derive_seeds(0, 10),
            epoch_rounds: DEFAULT_EPOCH_ROUNDS,
            scenario: Scenario::GaussianBandit {
                environment: EnvironmentChoice::GridC6,
            },
        },
    };
    if let Some(e) = &args.env {
        config.scenario = Scenario::GaussianBandit {
            environment: parse_env(e)?,
        };
    }
    let Scenario::GaussianBandit { environment } = &config.scenario else {
        return Err(config_err("bandit-sim needs a gaussian-bandit scenario"));
    };
    let env = environment.build().map_err(|e| config_err(e.to_string()))?;
    apply_run_args(&mut config, &args.run, env.len());
    let config = validated(config)?;
    let dir = prepare_out_dir(args.run.out.as_ref(), manifest.as_ref())?;

    let mut trials = Vec::new();
    for (i, &seed) in config.seeds.iter().enumerate() {
        let records = run_bandit(&env, config.policy, config.rounds, seed)?;
        let csv = write_trial(&dir, i, &records)?;
        let t = TrialSummary::from_records(seed, csv, &records, env.len(), config.epoch_rounds);
        println!(
            "trial {i} seed {seed}: final regret {:.3}",
            t.final_regret.unwrap_or_default()
        );
        trials.push(t);
    }
    let summary = RunSummary::new("bandit-sim", config.policy.kind.to_string(), config.rounds, config.epoch_rounds, trials);
    write_summary(&dir, &summary)?;
    println!(
        "mean final regret {:.3}; wrote {} trial CSVs and summary.json to {}",
        summary.mean_final_regret.unwrap_or_default(),
        summary.trials.len(),
        dir.display()
    );
    Ok(())
}

fn attack_sim(args: AttackArgs) -> anyhow::Result<()> {
    let manifest = load_manifest(args.run.manifest.as_deref())?;
    let (base, mut scenario) = attack_scenario_from(manifest.clone())?;
    apply_scenario_args(&mut scenario, &args.scenario)?;
    let arms = scenario.arms().map_err(|e| config_err(e.to_string()))?;
    let mut config = base.unwrap_or_else(|| ExperimentConfig {
        policy: PolicyConfig::extended_ts(2 * arms),
        rounds: 300,
        seeds: ExperimentConfig::derive_seeds(0, 1),
        epoch_rounds: DEFAULT_EPOCH_ROUNDS,
        scenario: Scenario::VflAttack(scenario.clone()),
    });
    config.scenario = Scenario::VflAttack(scenario.clone());
    apply_run_args(&mut config, &args.run, arms);
    let config = validated(config)?;
    let dir = prepare_out_dir(args.run.out.as_ref(), manifest.as_ref())?;

    let mut trials = Vec::new();
    for (i, &seed) in config.seeds.iter().enumerate() {
        let task = scenario.build_task(seed)?;
        let run = run_attack_experiment(&task, &config, seed)?;
        let csv = write_trial(&dir, i, &run.records)?;
        println!(
            "trial {i} seed {seed}: train accuracy {:.3}, final-epoch ASR {:.3}",
            task.train_accuracy,
            run.final_epoch_asr()
        );
        trials.push(TrialSummary::from_records(seed, csv, &run.records, arms, config.epoch_rounds));
    }
    let summary = RunSummary::new("attack-sim", config.policy.kind.to_string(), config.rounds, config.epoch_rounds, trials);
    write_summary(&dir, &summary)?;
    println!(
        "mean final-epoch ASR {:.3}; wrote {} trial CSVs and summary.json to {}",
        summary.mean_epoch_means.last().copied().unwrap_or_default(),
        summary.trials.len(),
        dir.display()
    );
    Ok(())
}

fn sweep(args: SweepArgs) -> anyhow::Result<()> {
    let (_, mut scenario) = attack_scenario_from(load_manifest(args.manifest.as_deref())?)?;
    apply_scenario_args(&mut scenario, &args.scenario)?;
    scenario.arms().map_err(|e| config_err(e.to_string()))?;
    let task = scenario.build_task(args.seed)?;
    let result = exhaustive_pattern_sweep(&task, &scenario, args.seed)?;
    println!("{:>4}  {:<12} {:>6}  {:>8}", "arm", "pattern", "asr", "queries");
    for row in &result.rows {
        println!("{:>4}  {:<12} {:>6.3}  {:>8}", row.arm, row.pattern.to_string(), row.asr, row.queries);
    }
    let best = result.best_row();
    println!("best: arm {} {} asr {:.3}", best.arm, best.pattern, best.asr);
    Ok(())
}

fn defense_eval(args: DefenseArgs) -> anyhow::Result<()> {
    let (_, mut scenario) = attack_scenario_from(load_manifest(args.manifest.as_deref())?)?;
    apply_scenario_args(&mut scenario, &args.scenario)?;
    scenario.defense = Defense::None;
    scenario.arms().map_err(|e| config_err(e.to_string()))?;
    if let Some(p) = &args.pattern {
        pattern_to_index(p, scenario.clients()).map_err(|e| config_err(e.to_string()))?;
    }
    let defenses = [Defense::None, Defense::DEFAULT_SMOOTHING, Defense::DEFAULT_DROPOUT];
    let names = ["none", "smoothing", "dropout"];
    let mut totals = [0.0; 3];
    let seeds = ExperimentConfig::derive_seeds(args.seed, args.trials);
    for &seed in &seeds {
        let task = scenario.build_task(seed)?;
        let pattern = match &args.pattern {
            Some(p) => p.clone(),
            None => exhaustive_pattern_sweep(&task, &scenario, seed)?.best_row().pattern.clone(),
        };
        let outcomes = evaluate_defenses(&task, &scenario, &pattern, &defenses, seed)?;
        let line: Vec<String> = outcomes
            .iter()
            .zip(names)
            .map(|(o, n)| format!("{n} {:.3}", o.asr))
            .collect();
        println!("seed {seed} pattern {pattern}: {}", line.join(", "));
        for (t, o) in totals.iter_mut().zip(&outcomes) {
            *t += o.asr;
        }
    }
    let n = seeds.len().max(1) as f64;
    for (name, t) in names.iter().zip(totals) {
        println!("mean ASR {name}: {:.3}", t / n);
    }
    Ok(())
}

/// Central-difference check of backpropagated parameter gradients and a
/// cosine check of the NES estimator on a quadratic.
fn grad_check(args: GradCheckArgs) -> anyhow::Result<()> {
    let root = SeedPath::new(args.seed).label("grad-check");
    let mut worst: f64 = 0.0;
    for i in 0..args.nets {
        let mut rng = root.index(i as u64).rng();
        let mut net = DenseNetwork::random(&[5, 8, 3], &mut rng)?;
        let x: Vec<f64> = (0..5).map(|_| rng.sample(StandardNormal)).collect();
        let y = rng.random_range(0..3);
        let (grads, _) = net.batch_gradients(&[(&x, y)])?;
        let h = 1e-6;
        for l in 0..net.layers().len() {
            for j in 0..net.layers()[l].weights.len() {
                let loss_at = |net: &DenseNetwork| -> anyhow::Result<f64> {
                    Ok(softmax_cross_entropy(&net.predict(&x)?, y)?.1)
                };
                let orig = net.layers()[l].weights[j];
                net.layers_mut()[l].weights[j] = orig + h;
                let up = loss_at(&net)?;
                net.layers_mut()[l].weights[j] = orig - h;
                let down = loss_at(&net)?;
                net.layers_mut()[l].weights[j] = orig;
                let numeric = (up - down) / (2.0 * h);
                let analytic = grads.weights[l][j];
                let rel = (numeric - analytic).abs() / (numeric.abs() + analytic.abs()).max(1e-7);
                worst = worst.max(rel);
            }
        }
    }
    println!("tinynet: max relative error {worst:.2e} over {} nets", args.nets);

    let mut rng = root.label("nes").rng();
    let d = 10;
    let center: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let mut cos_total = 0.0;
    let trials = 100;
    for _ in 0..trials {
        let eta: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let loss = |v: &[f64]| -> vfl_cps::Result<f64> {
            Ok(v.iter().zip(&center).map(|(a, c)| (a - c) * (a - c)).sum())
        };
        let est = nes_gradient(loss, &eta, 100, 1e-3, f64::INFINITY, &mut rng)?;
        let truth: Vec<f64> = eta.iter().zip(&center).map(|(a, c)| 2.0 * (a - c)).collect();
        let dot: f64 = est.iter().zip(&truth).map(|(a, b)| a * b).sum();
        let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
        cos_total += dot / (norm(&est) * norm(&truth));
    }
    let cos = cos_total / trials as f64;
    println!("nes: mean cosine similarity {cos:.4} over {trials} trials (d = {d}, n = 100)");
    if worst >= 1e-4 || cos < 0.9 {
        bail!("self-check failed");
    }
    Ok(())
}
