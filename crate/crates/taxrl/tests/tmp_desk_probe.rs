use taxrl::dqn::{self, TrainConfig};
use taxrl::exact_dp::{self, EvasionGrid};
use taxrl::tax_env::{ClosureScenario, TaxEnv, TaxParams};

fn run(tag: &str, mut mutate: impl FnMut(&mut TrainConfig)) {
    let t0 = std::time::Instant::now();
    let params = TaxParams { closure_scenario: ClosureScenario::Never, ..TaxParams::default() };
    let env = TaxEnv::new(params).unwrap();
    let dp = exact_dp::solve(&env, EvasionGrid::bang_bang(), 1e-9, exact_dp::MAX_ITERATIONS).unwrap();
    let dp_value = dp.table.scenario_start_value(&ClosureScenario::Never);
    let mut config = TrainConfig::desk();
    mutate(&mut config);
    let (net, _log) = dqn::train(env.clone(), config).unwrap();
    let report = dqn::evaluate_policy(&net, &env, 100, 250, 999).unwrap();
    let full = report.samples.iter().filter(|s| s.u1_level == 100).count();
    // where do the non-full decisions happen?
    let mut by_status = [0u32; 15];
    let mut min_level = 100u8;
    for s in &report.samples {
        if s.u1_level != 100 {
            by_status[s.status as usize - 1] += 1;
            min_level = min_level.min(s.u1_level);
        }
    }
    println!(
        "{tag}: value {:.1} (rel {:+.2}%) mean_u1 {:.4} full {}/25000 min_lvl {} nonfull_by_status {:?} [{:.1} min]",
        report.mean_discounted_utility,
        100.0 * (report.mean_discounted_utility - dp_value) / dp_value,
        report.mean_u1, full, min_level, by_status,
        t0.elapsed().as_secs_f64() / 60.0
    );
}

#[test]
#[ignore]
fn desk_fresh_replay() { run("lr1e-3_replay50k", |c| { c.replay_capacity = 50_000; }); }

#[test]
#[ignore]
fn desk_low_eps_end() { run("lr1e-3_epsend0.03", |c| { c.epsilon_end = 0.03; }); }

#[test]
#[ignore]
fn desk_lr_2e3() { run("lr2e-3", |c| { c.learning_rate = 2e-3; }); }

#[test]
#[ignore]
fn desk_seed2() { run("s2_lr1e-3_replay50k", |c| { c.replay_capacity = 50_000; c.seed = 2; }); }

#[test]
#[ignore]
fn desk_seed3() { run("s3_lr1e-3_replay50k", |c| { c.replay_capacity = 50_000; c.seed = 3; }); }

#[test]
#[ignore]
fn desk_anneal200() { run("anneal200_lr1e-3_replay50k", |c| { c.replay_capacity = 50_000; c.epsilon_anneal_episodes = 200; }); }

#[test]
#[ignore]
fn desk_anneal1500() { run("anneal1500_lr1e-3_replay50k", |c| { c.replay_capacity = 50_000; c.epsilon_anneal_episodes = 1500; }); }

#[test]
#[ignore]
fn desk_full_explore() { run("eps1.0_anneal1000_lr1e-3_replay50k", |c| { c.replay_capacity = 50_000; c.epsilon_start = 1.0; c.epsilon_anneal_episodes = 1000; }); }

#[test]
#[ignore]
fn desk_full_explore_s2() { run("s2_eps1.0_anneal1000", |c| { c.replay_capacity = 50_000; c.epsilon_start = 1.0; c.epsilon_anneal_episodes = 1000; c.seed = 2; }); }
