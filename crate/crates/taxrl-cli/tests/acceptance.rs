//! Acceptance suite: one test per shipping criterion, each printing a
//! PASS/FAIL line (run with `--nocapture` to see them all).
//!
//! Criteria 4-8 train desk-scale networks (2000 episodes x 250 steps on a
//! [64, 64, 64] trunk), which takes minutes per run on one core; the whole
//! suite is CPU-bound for several hours. Trained networks are memoized per
//! (scenario, risk aversion) so overlapping criteria share runs.

use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use taxrl::analysis;
use taxrl::dqn::{self, TrainConfig};
use taxrl::exact_dp::{
    self, calibrate_discount, EvasionGrid, BENCHMARK_ALWAYS, BENCHMARK_BERNOULLI, BENCHMARK_NEVER,
    BENCHMARK_PERIODIC, MAX_ITERATIONS,
};
use taxrl::neuralnet::{gradcheck, Network, NetworkSpec};
use taxrl::rng::{substream, Stream};
use taxrl::tax_env::{
    ClosureScenario, TaxEnv, TaxParams, TaxStatus, TransitionCase, TransitionModel, NUM_STATUSES,
};

/// Every training-based criterion runs on this seed.
const ACCEPTANCE_SEED: u64 = 7;
/// Greedy evaluation size: 100 episodes x 250 steps = 25000 decisions.
const EVAL_EPISODES: usize = 100;
const EVAL_STEPS: usize = 250;

fn params(scenario: ClosureScenario, lambda: f64) -> TaxParams {
    TaxParams {
        closure_scenario: scenario,
        risk_aversion: lambda,
        ..TaxParams::default()
    }
}

fn desk_config() -> TrainConfig {
    TrainConfig {
        seed: ACCEPTANCE_SEED,
        ..TrainConfig::desk()
    }
}

/// Shared trained networks, keyed by scenario label and risk aversion.
fn trained(scenario: ClosureScenario, lambda: f64) -> (TaxEnv, Network) {
    static CACHE: OnceLock<Mutex<HashMap<(String, u64), (TaxEnv, Network)>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let key = (scenario.label(), lambda.to_bits());
    if let Some(hit) = cache.lock().unwrap().get(&key) {
        return hit.clone();
    }
    let env = TaxEnv::new(params(scenario, lambda)).expect("valid params");
    let (net, _) = dqn::train(env.clone(), desk_config()).expect("training succeeds");
    let entry = (env, net);
    cache.lock().unwrap().insert(key, entry.clone());
    entry
}

fn dp_value(scenario: ClosureScenario) -> f64 {
    let env = TaxEnv::new(params(scenario, 0.0)).expect("valid params");
    let solution = exact_dp::solve(&env, EvasionGrid::bang_bang(), 1e-9, MAX_ITERATIONS)
        .expect("value iteration converges");
    solution.table.scenario_start_value(&scenario)
}

// ---------------------------------------------------------------------------
// 1. Transition-model audit
// ---------------------------------------------------------------------------

#[test]
fn criterion_1_transition_model_audit() {
    let model = TransitionModel::builtin();

    for (name, matrix) in [("m_no", &model.m_no), ("m_a", &model.m_a), ("m_d", &model.m_d)] {
        for j in 0..NUM_STATUSES {
            let sum = matrix.column_sum(j);
            assert!(
                (sum - 1.0).abs() <= 1e-12,
                "{name} column {} sums to {sum}",
                j + 1
            );
            for i in 0..NUM_STATUSES {
                assert!((0.0..=1.0).contains(&matrix.entries[i][j]));
            }
        }
    }
    for row in &model.m_a.entries {
        for &e in row {
            assert!(e == 0.0 || e == 1.0, "closure-taken matrix must be boolean");
        }
    }

    // Empirical frequencies: one million draws per (matrix, column), every
    // entry within three standard errors.
    let mut rng = ChaCha8Rng::seed_from_u64(20_240_817);
    let n = 1_000_000u32;
    let mut worst_z = 0.0f64;
    for case in [
        TransitionCase::NotOffered,
        TransitionCase::OfferTaken,
        TransitionCase::OfferDeclined,
    ] {
        let matrix = model.matrix(case);
        for status in TaxStatus::all() {
            let mut counts = [0u32; NUM_STATUSES];
            for _ in 0..n {
                let next = sample_next_status(matrix, status, &mut rng);
                counts[next] += 1;
            }
            for i in 0..NUM_STATUSES {
                let p = matrix.entries[i][status.index()];
                let observed = f64::from(counts[i]) / f64::from(n);
                let sigma = (p * (1.0 - p) / f64::from(n)).sqrt();
                if sigma == 0.0 {
                    assert_eq!(observed, p, "deterministic entry mismatch");
                } else {
                    let z = (observed - p).abs() / sigma;
                    worst_z = worst_z.max(z);
                    assert!(
                        z <= 3.0,
                        "{case:?} col {} row {}: z = {z:.2}",
                        status.value(),
                        i + 1
                    );
                }
            }
        }
    }
    println!(
        "ACCEPTANCE 1 (transition-model audit): PASS - columns stochastic within 1e-12, \
         closure-taken matrix boolean, empirical frequencies within 3 sigma (worst z {worst_z:.2})"
    );
}

/// Column draw routed through the environment step machinery.
fn sample_next_status(
    matrix: &taxrl::tax_env::StatusMatrix,
    status: TaxStatus,
    rng: &mut ChaCha8Rng,
) -> usize {
    use rand::Rng;
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for &(i, p) in matrix.column_support(status) {
        acc += p;
        if u < acc {
            return i;
        }
    }
    matrix.column_support(status).last().unwrap().0
}

// ---------------------------------------------------------------------------
// 2. Gradient oracle
// ---------------------------------------------------------------------------

#[test]
fn criterion_2_gradient_oracle() {
    use rand::Rng;
    let mut worst = 0.0f64;
    let mut checked = 0u64;
    let mut trial = 0u64;
    while checked < 20 {
        trial += 1;
        let mut rng = substream(2000 + trial, Stream::Init, trial);
        let spec = NetworkSpec {
            input_dim: rng.gen_range(2..8),
            trunk: (0..rng.gen_range(1..4)).map(|_| rng.gen_range(2..10)).collect(),
            head_widths: [rng.gen_range(1..7), rng.gen_range(1..4)],
        };
        let net = Network::init(spec.clone(), &mut rng).unwrap();
        let batch = rng.gen_range(1..4);
        let x: Vec<f64> = (0..batch * spec.input_dim)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        if gradcheck::preactivation_margin(&net, &x, batch) < 1e-3 {
            continue;
        }
        let c1: Vec<f64> = (0..spec.head_widths[0])
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let c2: Vec<f64> = (0..spec.head_widths[1])
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let err = gradcheck::max_relative_error(&net, &x, batch, &c1, &c2, 1e-5);
        assert!(err < 1e-4, "network {trial} ({spec:?}): relative error {err:e}");
        worst = worst.max(err);
        checked += 1;
    }
    println!(
        "ACCEPTANCE 2 (gradient oracle): PASS - 20 random two-head networks, \
         max relative error vs central differences {worst:.2e} < 1e-4"
    );
}

// ---------------------------------------------------------------------------
// 3. Risk-neutral DP vs published benchmarks
// ---------------------------------------------------------------------------

#[test]
fn criterion_3_risk_neutral_dp_benchmarks() {
    // Calibrate the discount from scratch on the never-closure scenario.
    let gamma = calibrate_discount(
        &params(ClosureScenario::Never, 0.0),
        &EvasionGrid::bang_bang(),
        BENCHMARK_NEVER,
    )
    .expect("calibration brackets the benchmark");

    let value_at = |scenario: ClosureScenario| -> f64 {
        let mut p = params(scenario, 0.0);
        p.discount = gamma;
        let env = TaxEnv::new(p).unwrap();
        exact_dp::solve(&env, EvasionGrid::bang_bang(), 1e-9, MAX_ITERATIONS)
            .unwrap()
            .table
            .scenario_start_value(&scenario)
    };

    let never = value_at(ClosureScenario::Never);
    let bernoulli = value_at(ClosureScenario::Bernoulli(0.2));
    let always = value_at(ClosureScenario::Always);
    let periodic = value_at(ClosureScenario::FiveYearPeriodic);

    assert!(
        (never - BENCHMARK_NEVER).abs() / BENCHMARK_NEVER <= 1e-3,
        "calibration anchor off: {never}"
    );
    for (name, value, benchmark) in [
        ("bernoulli", bernoulli, BENCHMARK_BERNOULLI),
        ("always", always, BENCHMARK_ALWAYS),
        ("periodic", periodic, BENCHMARK_PERIODIC),
    ] {
        let rel = (value - benchmark).abs() / benchmark;
        assert!(
            rel <= 0.02,
            "{name}: {value:.2} vs benchmark {benchmark} ({:.2}%)",
            100.0 * rel
        );
    }
    assert!(
        never < bernoulli && bernoulli < periodic && periodic < always,
        "scenario ordering violated: {never:.2}, {bernoulli:.2}, {periodic:.2}, {always:.2}"
    );
    println!(
        "ACCEPTANCE 3 (risk-neutral DP benchmarks): PASS - gamma {gamma:.6}; \
         values {never:.1}/{bernoulli:.1}/{periodic:.1}/{always:.1} vs \
         {BENCHMARK_NEVER}/{BENCHMARK_BERNOULLI}/{BENCHMARK_PERIODIC}/{BENCHMARK_ALWAYS} \
         all within 2%, ordering never < bernoulli(0.2) < periodic < always"
    );
}

// ---------------------------------------------------------------------------
// 4. Desk-scale DQN vs DP (risk-neutral)
// ---------------------------------------------------------------------------

#[test]
fn criterion_4_dqn_matches_dp_at_desk_scale() {
    let scenario = ClosureScenario::Never;
    let oracle = dp_value(scenario);
    let (env, net) = trained(scenario, 0.0);
    let report = dqn::evaluate_policy(&net, &env, EVAL_EPISODES, EVAL_STEPS, ACCEPTANCE_SEED)
        .expect("evaluation succeeds");

    let rel = (report.mean_discounted_utility - oracle) / oracle;
    assert!(
        rel.abs() <= 0.02,
        "value {:.2} vs DP {oracle:.2} ({:+.2}%)",
        report.mean_discounted_utility,
        100.0 * rel
    );

    let full_count = report.samples.iter().filter(|s| s.u1_level == 100).count();
    let closure_violations = report
        .samples
        .iter()
        .filter(|s| s.closure_offered && !s.u2)
        .count();
    assert_eq!(
        closure_violations, 0,
        "closure must be taken whenever offered"
    );
    assert_eq!(
        full_count,
        report.samples.len(),
        "policy must conceal everything everywhere: {} of {} decisions at u1=1 (mean u1 {:.4})",
        full_count,
        report.samples.len(),
        report.mean_u1
    );
    println!(
        "ACCEPTANCE 4 (desk-scale DQN vs DP): PASS - value {:.2} within {:+.2}% of DP {oracle:.2}; \
         u1=1 in {full_count}/25000 decisions, closure taken whenever offered",
        report.mean_discounted_utility,
        100.0 * rel
    );
}

// ---------------------------------------------------------------------------
// 5. Always-closure risk-averse fixed point
// ---------------------------------------------------------------------------

#[test]
fn criterion_5_always_closure_risk_averse_fixed_point() {
    let (env, net) = trained(ClosureScenario::Always, 2.6);
    let report = dqn::evaluate_policy(&net, &env, EVAL_EPISODES, EVAL_STEPS, ACCEPTANCE_SEED)
        .expect("evaluation succeeds");
    assert_eq!(report.samples.len(), 25_000);
    let full = report.samples.iter().filter(|s| s.u1_level == 100).count();
    let closure = report.samples.iter().filter(|s| s.u2).count();
    assert_eq!(
        full, 25_000,
        "all decisions must fully conceal; mean u1 {:.4}",
        report.mean_u1
    );
    assert_eq!(closure, 25_000, "all decisions must take the closure offer");
    println!(
        "ACCEPTANCE 5 (always-closure risk-averse fixed point): PASS - \
         lambda 2.6 converges to u1=1, u2=1 in all 25000 evaluation samples"
    );
}

// ---------------------------------------------------------------------------
// 6. Constant-policy dominance
// ---------------------------------------------------------------------------

#[test]
fn criterion_6_constant_policy_dominance() {
    let mut summaries = Vec::new();
    for scenario in [ClosureScenario::Never, ClosureScenario::Bernoulli(0.2)] {
        let (env, net) = trained(scenario, 2.6);
        let comparison = analysis::compare_constant_policy(
            &net,
            &env,
            EVAL_EPISODES,
            EVAL_STEPS,
            ACCEPTANCE_SEED,
        )
        .expect("comparison succeeds");
        assert!(
            comparison.trained_utility >= comparison.best_constant_utility,
            "{}: trained {:.6e} must dominate best constant {:.6e} (u1 {:.2})",
            scenario.label(),
            comparison.trained_utility,
            comparison.best_constant_utility,
            f64::from(comparison.best_constant_level) / 100.0
        );
        summaries.push(format!(
            "{}: trained {:.5e} (mean u1 {:.2}) >= best constant {:.5e} at u1 {:.2}",
            scenario.label(),
            comparison.trained_utility,
            comparison.trained_mean_u1,
            comparison.best_constant_utility,
            f64::from(comparison.best_constant_level) / 100.0
        ));
    }
    println!(
        "ACCEPTANCE 6 (constant-policy dominance): PASS - {}",
        summaries.join("; ")
    );
}

// ---------------------------------------------------------------------------
// 7. Risk-aversion trend
// ---------------------------------------------------------------------------

#[test]
fn criterion_7_risk_aversion_trend() {
    let lambdas: Vec<f64> = (0..=7).map(f64::from).collect();
    let mut summaries = Vec::new();
    for scenario in [
        ClosureScenario::Never,
        ClosureScenario::Bernoulli(0.2),
        ClosureScenario::Always,
        ClosureScenario::FiveYearPeriodic,
    ] {
        let means: Vec<f64> = lambdas
            .iter()
            .map(|&lambda| {
                let (env, net) = trained(scenario, lambda);
                dqn::evaluate_policy(&net, &env, EVAL_EPISODES, EVAL_STEPS, ACCEPTANCE_SEED)
                    .expect("evaluation succeeds")
                    .mean_u1
            })
            .collect();
        let rho = analysis::spearman(&lambdas, &means);
        assert!(
            rho < 0.0,
            "{}: Spearman correlation {rho:.3} must be strictly negative; means {means:?}",
            scenario.label()
        );
        summaries.push(format!("{} rho {rho:.2}", scenario.label()));
    }
    println!(
        "ACCEPTANCE 7 (risk-aversion trend): PASS - evasion falls with risk aversion \
         in every scenario ({})",
        summaries.join(", ")
    );
}

// ---------------------------------------------------------------------------
// 8. Risk-aversion calibration
// ---------------------------------------------------------------------------

#[test]
fn criterion_8_calibration_reproducibility() {
    let calibration = analysis::calibrate_lambda(
        0.4,
        &params(ClosureScenario::Bernoulli(0.2), 0.0),
        &desk_config(),
        (1.0, 5.0),
        0.03,
        EVAL_EPISODES,
        EVAL_STEPS,
    )
    .expect("bisection succeeds");
    assert!(
        (2.0..=3.2).contains(&calibration.lambda),
        "calibrated lambda {:.3} outside [2.0, 3.2]; probes: {:?}",
        calibration.lambda,
        calibration.probes
    );
    println!(
        "ACCEPTANCE 8 (calibration reproducibility): PASS - target mean u1 0.4 \
         reached at lambda {:.3} (mean u1 {:.3}) after {} probes",
        calibration.lambda,
        calibration.mean_u1,
        calibration.probes.len()
    );
}

// ---------------------------------------------------------------------------
// 9. Determinism of command outputs
// ---------------------------------------------------------------------------

#[test]
fn criterion_9_commands_are_bit_deterministic() {
    let base = std::env::temp_dir().join("taxrl_acceptance_determinism");
    let _ = std::fs::remove_dir_all(&base);
    let config_path = base.join("config.json");
    std::fs::create_dir_all(&base).unwrap();
    let tiny = serde_json::json!({
        "tax": {
            "tax_rate": 0.24,
            "penalty_rate": 0.24,
            "prompt_discount": 0.6,
            "closure_cost": 0.023,
            "annual_revenue": 100.0,
            "discount": exact_dp::CALIBRATED_DISCOUNT,
            "risk_aversion": 2.6,
            "closure_scenario": {"Bernoulli": 0.2},
            "utility_floor": -1.0
        },
        "train": {
            "episodes": 10,
            "steps_per_episode": 50,
            "minibatch": 25,
            "target_sync_episodes": 5,
            "epsilon_start": 0.5,
            "epsilon_end": 0.1,
            "epsilon_anneal_episodes": 5,
            "eval_interval": 5,
            "eval_episodes": 3,
            "replay_capacity": 10000,
            "learning_rate": 0.001,
            "trunk": [32, 32],
            "seed": 123
        }
    });
    std::fs::write(&config_path, serde_json::to_string_pretty(&tiny).unwrap()).unwrap();

    let run = |sub: &str, dir: &std::path::Path| {
        let mut cmd = std::process::Command::new(env!("CARGO_BIN_EXE_taxrl"));
        match sub {
            "dp" => {
                cmd.args(["dp", "--profile", "full", "--scenario", "bernoulli"]);
            }
            "train" => {
                cmd.arg("train").arg("--config").arg(&config_path);
            }
            _ => unreachable!(),
        }
        let out = cmd.arg("--out").arg(dir).output().unwrap();
        assert!(
            out.status.success(),
            "{sub} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    };

    let mut compared = 0usize;
    for sub in ["dp", "train"] {
        let dir_a = base.join(format!("{sub}_a"));
        let dir_b = base.join(format!("{sub}_b"));
        run(sub, &dir_a);
        run(sub, &dir_b);
        for entry in std::fs::read_dir(&dir_a).unwrap() {
            let name = entry.unwrap().file_name();
            let a = std::fs::read(dir_a.join(&name)).unwrap();
            let b = std::fs::read(dir_b.join(&name)).unwrap();
            assert_eq!(a, b, "{sub}: {name:?} differs between identical reruns");
            compared += 1;
        }
    }
    assert!(compared >= 8, "expected to compare several artifacts");
    println!(
        "ACCEPTANCE 9 (determinism): PASS - dp and train reruns produced \
         bit-identical artifacts ({compared} files compared)"
    );
}
