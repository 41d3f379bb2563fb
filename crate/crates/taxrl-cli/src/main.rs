//! `taxrl`: compute and analyze optimal tax-evasion strategies.
//!
//! Subcommands cover the full experiment surface: `dp` (exact value
//! iteration for the risk-neutral firm), `train` (double deep-Q learning),
//! `eval` (greedy rollouts of a checkpoint), `sweep` (risk-aversion sweep),
//! `calibrate` (fit the risk-aversion coefficient to observed average
//! evasion), and `analyze` (histograms, decision tree, constant-policy
//! comparison).
//!
//! Exit codes: 0 success, 2 configuration error, 3 training/runtime
//! failure, 4 artifact mismatch (checkpoint from a different config).

mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{parse_scenario, ExperimentConfig};
use output::{write_plain, write_stamped};
use taxrl::analysis;
use taxrl::dqn;
use taxrl::exact_dp::{self, EvasionGrid};
use taxrl::neuralnet::Checkpoint;
use taxrl::tax_env::TaxEnv;

#[derive(Parser)]
#[command(name = "taxrl", version, about = "Tax-evasion decision engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// JSON config file; replaces the profile defaults entirely.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in profile: `full` (production scale) or `desk` (minutes).
    #[arg(long, default_value = "full")]
    profile: String,
    /// Closure scenario override: never, bernoulli[:p], always, periodic5.
    #[arg(long)]
    scenario: Option<String>,
    /// Risk-aversion coefficient override.
    #[arg(long)]
    lambda: Option<f64>,
    /// Seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Exact risk-neutral value iteration; writes values, greedy policy,
    /// and the transition matrices.
    Dp {
        #[command(flatten)]
        common: ConfigArgs,
        /// Evasion grid levels (percent), e.g. "0,100" or "0,50,100".
        #[arg(long, default_value = "0,100")]
        grid: String,
    },
    /// Train a policy network; writes checkpoint, training log, and the
    /// resolved config.
    Train {
        #[command(flatten)]
        common: ConfigArgs,
    },
    /// Greedy rollouts of a trained checkpoint; writes decision samples
    /// and summary statistics.
    Eval {
        #[command(flatten)]
        common: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        #[arg(long, default_value_t = 250)]
        steps: usize,
    },
    /// Train and evaluate one policy per risk-aversion value.
    Sweep {
        #[command(flatten)]
        common: ConfigArgs,
        /// Comma-separated risk-aversion values.
        #[arg(long, default_value = "0,1,2,3,4,5,6,7")]
        lambdas: String,
        #[arg(long, default_value_t = 100)]
        eval_episodes: usize,
        #[arg(long, default_value_t = 250)]
        eval_steps: usize,
    },
    /// Bisection on the risk-aversion coefficient to hit a target average
    /// evasion level; each probe trains a fresh policy.
    Calibrate {
        #[command(flatten)]
        common: ConfigArgs,
        #[arg(long, default_value_t = 0.4)]
        target: f64,
        /// Bracket "lo,hi" for the coefficient.
        #[arg(long, default_value = "1.0,5.0")]
        bracket: String,
        #[arg(long, default_value_t = 0.03)]
        tolerance: f64,
        #[arg(long, default_value_t = 100)]
        eval_episodes: usize,
        #[arg(long, default_value_t = 250)]
        eval_steps: usize,
    },
    /// Full policy analysis of a checkpoint: histograms, shallow decision
    /// tree, and the constant-policy comparison.
    Analyze {
        #[command(flatten)]
        common: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        #[arg(long, default_value_t = 250)]
        steps: usize,
        /// Hidden-sum histogram bins.
        #[arg(long, default_value_t = 25)]
        bins: usize,
        /// Skip the 101-constant-policy comparison (it re-simulates every
        /// level).
        #[arg(long)]
        skip_constant: bool,
    },
}

/// Error wrapper mapping failures onto process exit codes.
enum CliError {
    Config(String),
    Runtime(String),
    Mismatch(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
            CliError::Mismatch(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Runtime(m) | CliError::Mismatch(m) => m,
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn resolve_config(args: &ConfigArgs) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match args.profile.as_str() {
        "full" => ExperimentConfig::full(),
        "desk" => ExperimentConfig::desk(),
        other => return Err(CliError::Config(format!("unknown profile '{other}'"))),
    };
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        cfg = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("bad config {}: {e}", path.display())))?;
    }
    if let Some(scenario) = &args.scenario {
        cfg.tax.closure_scenario = parse_scenario(scenario).map_err(CliError::Config)?;
    }
    if let Some(lambda) = args.lambda {
        cfg.tax.risk_aversion = lambda;
    }
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    cfg.tax.validate().map_err(config_err)?;
    cfg.train.validate().map_err(config_err)?;
    Ok(cfg)
}

fn echo_config(cfg: &ExperimentConfig, out: &PathBuf) -> Result<(), CliError> {
    write_plain(out, "config.json", &cfg.to_json_pretty()).map_err(runtime_err)?;
    Ok(())
}

fn cmd_dp(common: &ConfigArgs, grid: &str) -> Result<(), CliError> {
    let cfg = resolve_config(common)?;
    if cfg.tax.risk_aversion != 0.0 {
        return Err(CliError::Config(format!(
            "dp requires a risk-neutral configuration, got lambda {}",
            cfg.tax.risk_aversion
        )));
    }
    let levels: Vec<u8> = grid
        .split(',')
        .map(|s| s.trim().parse::<u8>())
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Config(format!("bad grid '{grid}': {e}")))?;
    let grid = EvasionGrid::new(levels).map_err(config_err)?;
    let hash = cfg.hash();
    let env = TaxEnv::new(cfg.tax.clone()).map_err(config_err)?;
    let solution =
        exact_dp::solve(&env, grid, exact_dp::DEFAULT_TOLERANCE, exact_dp::MAX_ITERATIONS)
            .map_err(runtime_err)?;
    let start = solution.table.scenario_start_value(&cfg.tax.closure_scenario);
    echo_config(&cfg, &common.out)?;
    write_stamped(&common.out, "values.csv", &hash, &solution.table.to_csv())
        .map_err(runtime_err)?;
    for (name, matrix) in [
        ("matrix_no_offer.csv", &env.model.m_no),
        ("matrix_offer_taken.csv", &env.model.m_a),
        ("matrix_offer_declined.csv", &env.model.m_d),
    ] {
        write_stamped(&common.out, name, &hash, &matrix.to_csv()).map_err(runtime_err)?;
    }
    let summary = format!(
        "scenario,start_value,iterations\n{},{},{}\n",
        cfg.tax.closure_scenario.label(),
        start,
        solution.iterations
    );
    write_stamped(&common.out, "dp_summary.csv", &hash, &summary).map_err(runtime_err)?;
    println!(
        "dp: scenario {} start value {start:.4} ({} sweeps)",
        cfg.tax.closure_scenario.label(),
        solution.iterations
    );
    Ok(())
}

fn cmd_train(common: &ConfigArgs) -> Result<(), CliError> {
    let cfg = resolve_config(common)?;
    let hash = cfg.hash();
    let env = TaxEnv::new(cfg.tax.clone()).map_err(config_err)?;
    let (net, log) = dqn::train(env, cfg.train.clone()).map_err(runtime_err)?;
    echo_config(&cfg, &common.out)?;
    let checkpoint = Checkpoint::new(net, hash.clone());
    let path = common.out.join("checkpoint.json");
    std::fs::create_dir_all(&common.out).map_err(runtime_err)?;
    checkpoint.save(&path).map_err(runtime_err)?;
    write_stamped(&common.out, "training_log.csv", &hash, &log.to_csv()).map_err(runtime_err)?;
    let last = log.records.last();
    println!(
        "train: {} episodes done, final eval value {}",
        cfg.train.episodes,
        last.map_or("n/a".to_string(), |r| format!("{:.6}", r.eval_discounted_utility))
    );
    Ok(())
}

fn load_matching_checkpoint(
    path: &PathBuf,
    cfg: &ExperimentConfig,
) -> Result<Checkpoint, CliError> {
    let checkpoint = Checkpoint::load(path)
        .map_err(|e| CliError::Runtime(format!("cannot load {}: {e}", path.display())))?;
    let hash = cfg.hash();
    if checkpoint.config_hash != hash {
        return Err(CliError::Mismatch(format!(
            "checkpoint {} was produced by config {} but the resolved config hashes to {hash}",
            path.display(),
            checkpoint.config_hash
        )));
    }
    Ok(checkpoint)
}

fn cmd_eval(
    common: &ConfigArgs,
    checkpoint: &PathBuf,
    episodes: usize,
    steps: usize,
) -> Result<(), CliError> {
    let cfg = resolve_config(common)?;
    let hash = cfg.hash();
    let env = TaxEnv::new(cfg.tax.clone()).map_err(config_err)?;
    let checkpoint = load_matching_checkpoint(checkpoint, &cfg)?;
    if checkpoint.network.spec.input_dim != env.observation_dim() {
        return Err(CliError::Mismatch(format!(
            "checkpoint expects {}-dim observations but the scenario produces {}",
            checkpoint.network.spec.input_dim,
            env.observation_dim()
        )));
    }
    let report = dqn::evaluate_policy(&checkpoint.network, &env, episodes, steps, cfg.train.seed)
        .map_err(runtime_err)?;
    echo_config(&cfg, &common.out)?;
    write_stamped(
        &common.out,
        "samples.csv",
        &hash,
        &analysis::samples_to_csv(&report.samples),
    )
    .map_err(runtime_err)?;
    let summary = format!(
        "episodes,steps,mean_discounted_utility,mean_undiscounted_revenue,mean_u1,std_u1,samples\n{},{},{},{},{},{},{}\n",
        episodes,
        steps,
        report.mean_discounted_utility,
        report.mean_undiscounted_revenue,
        report.mean_u1,
        report.std_u1,
        report.samples.len()
    );
    write_stamped(&common.out, "eval_summary.csv", &hash, &summary).map_err(runtime_err)?;
    println!(
        "eval: {} samples, mean utility {:.6}, mean u1 {:.4}",
        report.samples.len(),
        report.mean_discounted_utility,
        report.mean_u1
    );
    Ok(())
}

fn cmd_sweep(
    common: &ConfigArgs,
    lambdas: &str,
    eval_episodes: usize,
    eval_steps: usize,
) -> Result<(), CliError> {
    let cfg = resolve_config(common)?;
    let hash = cfg.hash();
    let lambdas: Vec<f64> = lambdas
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Config(format!("bad lambda list: {e}")))?;
    let rows = analysis::sweep_lambda(&lambdas, &cfg.tax, &cfg.train, eval_episodes, eval_steps);
    echo_config(&cfg, &common.out)?;
    write_stamped(&common.out, "sweep.csv", &hash, &analysis::sweep_to_csv(&rows))
        .map_err(runtime_err)?;
    for row in &rows {
        match &row.result {
            Ok((mean, std)) => println!("lambda {}: mean u1 {mean:.4} (std {std:.4})", row.lambda),
            Err(e) => println!("lambda {}: failed: {e}", row.lambda),
        }
    }
    if rows.iter().any(|r| r.result.is_err()) {
        return Err(CliError::Runtime("one or more sweep points failed".into()));
    }
    Ok(())
}

fn cmd_calibrate(
    common: &ConfigArgs,
    target: f64,
    bracket: &str,
    tolerance: f64,
    eval_episodes: usize,
    eval_steps: usize,
) -> Result<(), CliError> {
    let cfg = resolve_config(common)?;
    let hash = cfg.hash();
    let parts: Vec<f64> = bracket
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Config(format!("bad bracket '{bracket}': {e}")))?;
    if parts.len() != 2 {
        return Err(CliError::Config(format!(
            "bracket '{bracket}' must be 'lo,hi'"
        )));
    }
    let calibration = analysis::calibrate_lambda(
        target,
        &cfg.tax,
        &cfg.train,
        (parts[0], parts[1]),
        tolerance,
        eval_episodes,
        eval_steps,
    )
    .map_err(runtime_err)?;
    echo_config(&cfg, &common.out)?;
    write_stamped(
        &common.out,
        "calibration.csv",
        &hash,
        &analysis::calibration_to_csv(&calibration),
    )
    .map_err(runtime_err)?;
    println!(
        "calibrate: lambda {:.4} gives mean u1 {:.4} after {} probes",
        calibration.lambda,
        calibration.mean_u1,
        calibration.probes.len()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_analyze(
    common: &ConfigArgs,
    checkpoint: &PathBuf,
    episodes: usize,
    steps: usize,
    bins: usize,
    skip_constant: bool,
) -> Result<(), CliError> {
    let cfg = resolve_config(common)?;
    let hash = cfg.hash();
    let env = TaxEnv::new(cfg.tax.clone()).map_err(config_err)?;
    let checkpoint = load_matching_checkpoint(checkpoint, &cfg)?;
    if checkpoint.network.spec.input_dim != env.observation_dim() {
        return Err(CliError::Mismatch(format!(
            "checkpoint expects {}-dim observations but the scenario produces {}",
            checkpoint.network.spec.input_dim,
            env.observation_dim()
        )));
    }
    let report = dqn::evaluate_policy(&checkpoint.network, &env, episodes, steps, cfg.train.seed)
        .map_err(runtime_err)?;
    echo_config(&cfg, &common.out)?;
    write_stamped(
        &common.out,
        "samples.csv",
        &hash,
        &analysis::samples_to_csv(&report.samples),
    )
    .map_err(runtime_err)?;

    let h1 = analysis::histogram_u1(&report.samples).map_err(runtime_err)?;
    let mut csv = String::from("u1_level,count\n");
    for (level, count) in h1.iter().enumerate() {
        csv.push_str(&format!("{level},{count}\n"));
    }
    write_stamped(&common.out, "histogram_u1.csv", &hash, &csv).map_err(runtime_err)?;

    let by_status = analysis::histogram_by_status(&report.samples).map_err(runtime_err)?;
    write_stamped(
        &common.out,
        "histogram_status.csv",
        &hash,
        &analysis::grid_to_csv(&by_status, "status"),
    )
    .map_err(runtime_err)?;

    let by_sum = analysis::histogram_by_hidden_sum(&report.samples, bins).map_err(runtime_err)?;
    write_stamped(
        &common.out,
        "histogram_hidden_sum.csv",
        &hash,
        &analysis::grid_to_csv(&by_sum, "bin"),
    )
    .map_err(runtime_err)?;

    let tree = analysis::fit_decision_tree(&report.samples, 3, 1e-4).map_err(runtime_err)?;
    write_stamped(&common.out, "tree.txt", &hash, &tree.to_text()).map_err(runtime_err)?;
    write_stamped(&common.out, "tree.dot", &hash, &tree.to_dot()).map_err(runtime_err)?;

    if !skip_constant {
        let comparison = analysis::compare_constant_policy(
            &checkpoint.network,
            &env,
            episodes,
            steps,
            cfg.train.seed,
        )
        .map_err(runtime_err)?;
        write_stamped(
            &common.out,
            "constant_comparison.csv",
            &hash,
            &comparison.to_csv(),
        )
        .map_err(runtime_err)?;
        println!(
            "analyze: trained {:.6} vs best constant {:.6} at u1 {:.2}",
            comparison.trained_utility,
            comparison.best_constant_utility,
            f64::from(comparison.best_constant_level) / 100.0
        );
    }
    println!(
        "analyze: {} samples, mean u1 {:.4}, tree depth {}",
        report.samples.len(),
        report.mean_u1,
        tree.depth()
    );
    Ok(())
}

fn run() -> Result<(), CliError> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Dp { common, grid } => cmd_dp(common, grid),
        Command::Train { common } => cmd_train(common),
        Command::Eval {
            common,
            checkpoint,
            episodes,
            steps,
        } => cmd_eval(common, checkpoint, *episodes, *steps),
        Command::Sweep {
            common,
            lambdas,
            eval_episodes,
            eval_steps,
        } => cmd_sweep(common, lambdas, *eval_episodes, *eval_steps),
        Command::Calibrate {
            common,
            target,
            bracket,
            tolerance,
            eval_episodes,
            eval_steps,
        } => cmd_calibrate(common, *target, bracket, *tolerance, *eval_episodes, *eval_steps),
        Command::Analyze {
            common,
            checkpoint,
            episodes,
            steps,
            bins,
            skip_constant,
        } => cmd_analyze(common, checkpoint, *episodes, *steps, *bins, *skip_constant),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
