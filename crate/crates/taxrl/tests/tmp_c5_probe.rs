use taxrl::dqn::{self, TrainConfig};
use taxrl::tax_env::{ClosureScenario, TaxEnv, TaxParams};

fn run(tag: &str, episodes: usize, anneal: usize, eps_end: f64, lr: f64) {
    let t0 = std::time::Instant::now();
    let env = TaxEnv::new(TaxParams {
        closure_scenario: ClosureScenario::Always,
        risk_aversion: 2.6,
        ..TaxParams::default()
    }).unwrap();
    let config = TrainConfig {
        episodes,
        epsilon_anneal_episodes: anneal,
        epsilon_end: eps_end,
        learning_rate: lr,
        eval_interval: episodes / 20,
        seed: 7,
        ..TrainConfig::desk()
    };
    let (net, log) = dqn::train(env.clone(), config).unwrap();
    let traj: Vec<String> = log.records.iter().map(|r| format!("{:.2}", r.eval_mean_u1)).collect();
    let report = dqn::evaluate_policy(&net, &env, 100, 250, 7).unwrap();
    let full = report.samples.iter().filter(|s| s.u1_level == 100).count();
    let closure = report.samples.iter().filter(|s| s.u2).count();
    println!(
        "{tag}: mean_u1 {:.4} full {}/25000 closure {}/25000 util {:.4e} [{:.1} min] traj={}",
        report.mean_u1, full, closure, report.mean_discounted_utility,
        t0.elapsed().as_secs_f64() / 60.0, traj.join(",")
    );
}

#[test]
#[ignore]
fn c5_long4000() { run("always4000_anneal1000", 4000, 1000, 0.1, 1e-3); }

#[test]
#[ignore]
fn c5_long4000_higheps() { run("always4000_anneal3000_end0.3", 4000, 3000, 0.3, 1e-3); }
