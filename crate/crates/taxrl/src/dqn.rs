//! Double deep-Q training for the firm's two-part decision.
//!
//! One network, two heads: head 1 scores the 101 evasion levels, head 2 the
//! binary closure choice. Both heads are trained independently against the
//! same utility signal, with double-Q bootstrapping: the online network
//! selects the next action, a slowly-synced target copy evaluates it.
//! Experiences go through a uniform replay buffer; exploration is
//! epsilon-greedy with a linear anneal.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::DecisionSample;
use crate::neuralnet::{
    AdamState, BackwardScratch, BatchCache, Gradients, NetError, Network, NetworkSpec,
};
use crate::rng::{substream, Stream};
use crate::tax_env::{EnvError, FirmAction, FirmState, TaxEnv, NUM_EVASION_LEVELS};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Error)]
pub enum DqnError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("network input {net} does not match observation dim {env}")]
    ObservationDimMismatch { net: usize, env: usize },
    #[error("non-finite loss at episode {episode}, step {step}")]
    NonFiniteLoss { episode: usize, step: usize },
    #[error("parameters became non-finite at target sync, episode {episode}")]
    NonFiniteParams { episode: usize },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Net(#[from] NetError),
}

// ---------------------------------------------------------------------------
// Experience replay
// ---------------------------------------------------------------------------

/// One stored transition. States are kept in compact form; observations are
/// encoded on demand when a minibatch is assembled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Experience {
    pub state: FirmState,
    pub action: FirmAction,
    /// The clipped utility signal (raw reward for risk-neutral runs).
    pub utility: f64,
    pub next_state: FirmState,
}

impl Experience {
    pub fn next_closure_offered(&self) -> bool {
        self.next_state.closure_offered
    }
}

/// Fixed-capacity ring buffer with uniform sampling (with replacement).
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    data: Vec<Experience>,
    capacity: usize,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> ReplayBuffer {
        assert!(capacity > 0, "replay capacity must be positive");
        ReplayBuffer {
            data: Vec::new(),
            capacity,
            next: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Insert, overwriting the oldest entry once full.
    pub fn push(&mut self, exp: Experience) {
        debug_assert!(
            !(exp.action.use_closure && !exp.state.closure_offered),
            "stored action uses closure without an offer"
        );
        if self.data.len() < self.capacity {
            self.data.push(exp);
        } else {
            self.data[self.next] = exp;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    /// A uniformly random stored experience.
    pub fn sample(&self, rng: &mut impl Rng) -> &Experience {
        assert!(!self.data.is_empty(), "sampling from an empty replay buffer");
        &self.data[rng.gen_range(0..self.data.len())]
    }

    #[cfg(test)]
    fn entries(&self) -> &[Experience] {
        &self.data
    }
}

// ---------------------------------------------------------------------------
// Exploration schedule and configuration
// ---------------------------------------------------------------------------

/// Linearly annealed exploration rate, clamped at `end`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub end: f64,
    pub anneal_episodes: usize,
}

impl EpsilonSchedule {
    pub fn value(&self, episode: usize) -> f64 {
        let progress = if self.anneal_episodes == 0 {
            1.0
        } else {
            (episode as f64 / self.anneal_episodes as f64).min(1.0)
        };
        self.start - (self.start - self.end) * progress
    }
}

/// Training-run knobs. Defaults are the full production setup; `desk`
/// shrinks the run for fast validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub episodes: usize,
    pub steps_per_episode: usize,
    pub minibatch: usize,
    /// Target network refresh interval, in episodes.
    pub target_sync_episodes: usize,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub epsilon_anneal_episodes: usize,
    /// Greedy evaluation cadence, in episodes.
    pub eval_interval: usize,
    pub eval_episodes: usize,
    pub replay_capacity: usize,
    pub learning_rate: f64,
    /// Hidden widths of the network trunk.
    pub trunk: Vec<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            episodes: 50_000,
            steps_per_episode: 250,
            minibatch: 100,
            target_sync_episodes: 10,
            epsilon_start: 0.5,
            epsilon_end: 0.1,
            epsilon_anneal_episodes: 5000,
            eval_interval: 100,
            eval_episodes: 100,
            replay_capacity: 1_000_000,
            learning_rate: 1e-4,
            trunk: vec![256, 256, 256],
            seed: 1,
        }
    }
}

impl TrainConfig {
    /// Desk-scale profile: 2000 episodes on a [64, 64, 64] trunk, evaluated
    /// every 50 episodes, with the exploration anneal, replay horizon, and
    /// learning rate rescaled to the shorter run.
    pub fn desk() -> TrainConfig {
        TrainConfig {
            episodes: 2000,
            eval_interval: 50,
            eval_episodes: 20,
            epsilon_anneal_episodes: 500,
            replay_capacity: 50_000,
            learning_rate: 1e-3,
            trunk: vec![64, 64, 64],
            ..TrainConfig::default()
        }
    }

    pub fn epsilon_schedule(&self) -> EpsilonSchedule {
        EpsilonSchedule {
            start: self.epsilon_start,
            end: self.epsilon_end,
            anneal_episodes: self.epsilon_anneal_episodes,
        }
    }

    pub fn validate(&self) -> Result<(), DqnError> {
        let positive = [
            ("episodes", self.episodes),
            ("steps_per_episode", self.steps_per_episode),
            ("minibatch", self.minibatch),
            ("target_sync_episodes", self.target_sync_episodes),
            ("eval_interval", self.eval_interval),
            ("eval_episodes", self.eval_episodes),
            ("replay_capacity", self.replay_capacity),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(DqnError::Config(format!("{name} must be positive")));
            }
        }
        if !(0.0..=1.0).contains(&self.epsilon_start) || !(0.0..=1.0).contains(&self.epsilon_end) {
            return Err(DqnError::Config("epsilon out of [0,1]".into()));
        }
        if self.epsilon_start < self.epsilon_end {
            return Err(DqnError::Config(
                "epsilon_start must be >= epsilon_end".into(),
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(DqnError::Config("learning_rate must be positive".into()));
        }
        if self.minibatch > self.replay_capacity {
            return Err(DqnError::Config("minibatch exceeds replay capacity".into()));
        }
        if self.trunk.is_empty() || self.trunk.contains(&0) {
            return Err(DqnError::Config("trunk widths must be positive".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Action selection and targets
// ---------------------------------------------------------------------------

/// Index of the maximum entry; ties break to the lowest index.
pub fn argmax(q: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in q.iter().enumerate().skip(1) {
        if v > q[best] {
            best = i;
        }
    }
    best
}

/// Epsilon-greedy action choice, each head independently: with probability
/// `epsilon` a uniformly random valid value, otherwise that head's argmax.
/// Closure is forced off when it is not on offer.
pub fn select_action(
    net: &Network,
    cache: &mut BatchCache,
    observation: &[f64],
    closure_offered: bool,
    epsilon: f64,
    rng: &mut impl Rng,
) -> Result<FirmAction, DqnError> {
    net.forward_single(observation, cache)?;
    let evasion_level = if epsilon > 0.0 && rng.gen::<f64>() < epsilon {
        rng.gen_range(0..NUM_EVASION_LEVELS) as u8
    } else {
        argmax(cache.q1_row(0)) as u8
    };
    let use_closure = if !closure_offered {
        false
    } else if epsilon > 0.0 && rng.gen::<f64>() < epsilon {
        rng.gen_range(0..2) == 1
    } else {
        argmax(cache.q2_row(0)) == 1
    };
    Ok(FirmAction {
        evasion_level,
        use_closure,
    })
}

/// One double-Q bootstrapped target: the online network's q-values over the
/// valid next actions pick the action, the target network's value of that
/// action backs it up.
pub fn ddqn_target(
    utility: f64,
    gamma: f64,
    next_q_online: &[f64],
    next_q_target: &[f64],
    valid_actions: usize,
) -> f64 {
    let chosen = argmax(&next_q_online[..valid_actions]);
    utility + gamma * next_q_target[chosen]
}

/// Per-head DDQN targets for a batch of experiences. The closure head's
/// argmax is restricted to "decline" when no offer follows.
pub fn ddqn_targets(
    online: &Network,
    target: &Network,
    env: &TaxEnv,
    batch: &[Experience],
) -> Result<Vec<(f64, f64)>, DqnError> {
    let dim = env.observation_dim();
    let mut next_obs = vec![0.0; batch.len() * dim];
    for (s, exp) in batch.iter().enumerate() {
        env.encode_observation(&exp.next_state, &mut next_obs[s * dim..(s + 1) * dim]);
    }
    let mut online_cache = BatchCache::new(&online.spec, batch.len());
    let mut target_cache = BatchCache::new(&target.spec, batch.len());
    online.forward(&next_obs, batch.len(), &mut online_cache)?;
    target.forward(&next_obs, batch.len(), &mut target_cache)?;
    let gamma = env.params.discount;
    Ok(batch
        .iter()
        .enumerate()
        .map(|(s, exp)| {
            let valid2 = if exp.next_closure_offered() { 2 } else { 1 };
            let y1 = ddqn_target(
                exp.utility,
                gamma,
                online_cache.q1_row(s),
                target_cache.q1_row(s),
                NUM_EVASION_LEVELS,
            );
            let y2 = ddqn_target(
                exp.utility,
                gamma,
                online_cache.q2_row(s),
                target_cache.q2_row(s),
                valid2,
            );
            (y1, y2)
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

/// One record per evaluation point.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRecord {
    pub episode: usize,
    pub epsilon: f64,
    pub mean_loss: f64,
    pub eval_discounted_utility: f64,
    pub eval_mean_u1: f64,
}

/// Training history: one row per evaluation point.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub records: Vec<LogRecord>,
}

impl TrainingLog {
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("episode,epsilon,mean_loss,eval_discounted_utility,eval_mean_u1\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.episode, r.epsilon, r.mean_loss, r.eval_discounted_utility, r.eval_mean_u1
            ));
        }
        out
    }
}

/// The double-DQN training loop with its preallocated working memory.
pub struct Trainer {
    pub env: TaxEnv,
    pub online: Network,
    pub target: Network,
    pub adam: AdamState,
    pub buffer: ReplayBuffer,
    pub config: TrainConfig,
    schedule: EpsilonSchedule,
    rng_env: ChaCha8Rng,
    rng_explore: ChaCha8Rng,
    rng_replay: ChaCha8Rng,
    act_cache: BatchCache,
    obs_cache: BatchCache,
    next_cache: BatchCache,
    target_cache: BatchCache,
    grads: Gradients,
    scratch: BackwardScratch,
    obs_buf: Vec<f64>,
    next_obs_buf: Vec<f64>,
    gq1: Vec<f64>,
    gq2: Vec<f64>,
    minibatch: Vec<Experience>,
    obs_scratch: Vec<f64>,
}

impl Trainer {
    pub fn new(env: TaxEnv, config: TrainConfig) -> Result<Trainer, DqnError> {
        config.validate()?;
        let dim = env.observation_dim();
        let spec = NetworkSpec {
            input_dim: dim,
            trunk: config.trunk.clone(),
            head_widths: [NUM_EVASION_LEVELS, 2],
        };
        let mut rng_init = substream(config.seed, Stream::Init, 0);
        let online = Network::init(spec.clone(), &mut rng_init)?;
        let target = online.clone();
        let adam = AdamState::new(&online, config.learning_rate);
        let buffer = ReplayBuffer::new(config.replay_capacity);
        let b = config.minibatch;
        Ok(Trainer {
            rng_env: substream(config.seed, Stream::Env, 0),
            rng_explore: substream(config.seed, Stream::Explore, 0),
            rng_replay: substream(config.seed, Stream::Replay, 0),
            act_cache: BatchCache::new(&spec, 1),
            obs_cache: BatchCache::new(&spec, b),
            next_cache: BatchCache::new(&spec, b),
            target_cache: BatchCache::new(&spec, b),
            grads: Gradients::zeros_like(&online),
            scratch: BackwardScratch::new(&spec, b),
            obs_buf: vec![0.0; b * dim],
            next_obs_buf: vec![0.0; b * dim],
            gq1: vec![0.0; b * NUM_EVASION_LEVELS],
            gq2: vec![0.0; b * 2],
            minibatch: Vec::with_capacity(b),
            obs_scratch: vec![0.0; dim],
            env,
            online,
            target,
            adam,
            buffer,
            schedule: config.epsilon_schedule(),
            config,
        })
    }

    /// One gradient step on a sampled minibatch; returns the mean loss.
    ///
    /// The two heads regress their taken-action outputs onto their DDQN
    /// targets; all other outputs receive zero gradient. The head losses
    /// add, so one backward pass carries both.
    pub fn train_step(&mut self) -> Result<f64, DqnError> {
        let b = self.config.minibatch;
        // Sampling is with replacement, so any non-empty buffer works; the
        // training loop itself waits for one full minibatch.
        debug_assert!(!self.buffer.is_empty());
        let dim = self.env.observation_dim();
        let gamma = self.env.params.discount;

        self.minibatch.clear();
        for _ in 0..b {
            self.minibatch.push(*self.buffer.sample(&mut self.rng_replay));
        }
        for (s, exp) in self.minibatch.iter().enumerate() {
            self.env
                .encode_observation(&exp.state, &mut self.obs_buf[s * dim..(s + 1) * dim]);
            self.env.encode_observation(
                &exp.next_state,
                &mut self.next_obs_buf[s * dim..(s + 1) * dim],
            );
        }

        // Online trunk on the current observations (taken-action Q-values
        // are read head-row-wise); full online pass on the next
        // observations for the argmax; target trunk for the bootstrap
        // values of the selected actions only.
        self.online
            .forward_trunk(&self.obs_buf, b, &mut self.obs_cache)?;
        self.online
            .forward(&self.next_obs_buf, b, &mut self.next_cache)?;
        self.target
            .forward_trunk(&self.next_obs_buf, b, &mut self.target_cache)?;

        self.gq1.fill(0.0);
        self.gq2.fill(0.0);
        let mut loss = 0.0;
        let inv_b = 1.0 / b as f64;
        for (s, exp) in self.minibatch.iter().enumerate() {
            let a1 = exp.action.evasion_level as usize;
            let a2 = exp.action.use_closure as usize;
            let q1 = self.online.head_value(0, &self.obs_cache, s, a1);
            let q2 = self.online.head_value(1, &self.obs_cache, s, a2);

            let b1 = argmax(self.next_cache.q1_row(s));
            let valid2 = if exp.next_closure_offered() { 2 } else { 1 };
            let b2 = argmax(&self.next_cache.q2_row(s)[..valid2]);
            let y1 = exp.utility + gamma * self.target.head_value(0, &self.target_cache, s, b1);
            let y2 = exp.utility + gamma * self.target.head_value(1, &self.target_cache, s, b2);

            let d1 = q1 - y1;
            let d2 = q2 - y2;
            loss += d1 * d1 + d2 * d2;
            self.gq1[s * NUM_EVASION_LEVELS + a1] = 2.0 * d1 * inv_b;
            self.gq2[s * 2 + a2] = 2.0 * d2 * inv_b;
        }
        loss *= inv_b;

        self.online.backward(
            &self.obs_cache,
            &self.gq1,
            &self.gq2,
            &mut self.grads,
            &mut self.scratch,
        )?;
        self.adam.apply(&mut self.online, &self.grads)?;
        Ok(loss)
    }

    /// Run the configured number of episodes. Returns the log with one
    /// record per evaluation point.
    pub fn train(&mut self) -> Result<TrainingLog, DqnError> {
        let mut log = TrainingLog::default();
        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        for episode in 0..self.config.episodes {
            let epsilon = self.schedule.value(episode);
            let mut state = self.env.initial_state(&mut self.rng_env);
            for step in 0..self.config.steps_per_episode {
                self.env.encode_observation(&state, &mut self.obs_scratch);
                let action = {
                    let obs = std::mem::take(&mut self.obs_scratch);
                    let chosen = select_action(
                        &self.online,
                        &mut self.act_cache,
                        &obs,
                        state.closure_offered,
                        epsilon,
                        &mut self.rng_explore,
                    )?;
                    self.obs_scratch = obs;
                    chosen
                };
                let outcome = self.env.step(&state, &action, &mut self.rng_env)?;
                self.buffer.push(Experience {
                    state,
                    action,
                    utility: outcome.utility,
                    next_state: outcome.next,
                });
                state = outcome.next;
                if self.buffer.len() >= self.config.minibatch {
                    let loss = self.train_step()?;
                    if !loss.is_finite() {
                        return Err(DqnError::NonFiniteLoss { episode, step });
                    }
                    loss_sum += loss;
                    loss_count += 1;
                }
            }
            let done = episode + 1;
            if done % self.config.target_sync_episodes == 0 {
                if !self.online.is_finite() {
                    return Err(DqnError::NonFiniteParams { episode });
                }
                self.target = self.online.clone();
            }
            if done % self.config.eval_interval == 0 {
                let report = evaluate_policy(
                    &self.online,
                    &self.env,
                    self.config.eval_episodes,
                    self.config.steps_per_episode,
                    self.config.seed,
                )?;
                log.records.push(LogRecord {
                    episode: done,
                    epsilon,
                    mean_loss: if loss_count > 0 {
                        loss_sum / loss_count as f64
                    } else {
                        0.0
                    },
                    eval_discounted_utility: report.mean_discounted_utility,
                    eval_mean_u1: report.mean_u1,
                });
                loss_sum = 0.0;
                loss_count = 0;
            }
        }
        Ok(log)
    }

    pub fn into_network(self) -> Network {
        self.online
    }
}

/// Train a policy end to end for the given environment.
pub fn train(env: TaxEnv, config: TrainConfig) -> Result<(Network, TrainingLog), DqnError> {
    let mut trainer = Trainer::new(env, config)?;
    let log = trainer.train()?;
    Ok((trainer.online, log))
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Greedy-rollout statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Mean over episodes of the discounted utility-signal sum.
    pub mean_discounted_utility: f64,
    /// Mean over episodes of the undiscounted raw-revenue sum.
    pub mean_undiscounted_revenue: f64,
    /// Mean and standard deviation of the evasion fraction across all
    /// per-step decisions.
    pub mean_u1: f64,
    pub std_u1: f64,
    /// One record per step, `episodes * steps` in total.
    pub samples: Vec<DecisionSample>,
}

/// Greedy (epsilon = 0) evaluation over `episodes` rollouts of `steps`
/// years each. Each episode draws its environment randomness from its own
/// substream of `seed`, so reports are reproducible and independent of
/// caller state.
pub fn evaluate_policy(
    net: &Network,
    env: &TaxEnv,
    episodes: usize,
    steps: usize,
    seed: u64,
) -> Result<EvalReport, DqnError> {
    let dim = env.observation_dim();
    if net.spec.input_dim != dim {
        return Err(DqnError::ObservationDimMismatch {
            net: net.spec.input_dim,
            env: dim,
        });
    }
    let mut cache = BatchCache::new(&net.spec, 1);
    let mut obs = vec![0.0; dim];
    let mut samples = Vec::with_capacity(episodes * steps);
    let mut total_utility = 0.0;
    let mut total_revenue = 0.0;
    let gamma = env.params.discount;
    for episode in 0..episodes {
        let mut rng = substream(seed, Stream::Eval, episode as u64);
        let mut state = env.initial_state(&mut rng);
        let mut discount = 1.0;
        for _ in 0..steps {
            env.encode_observation(&state, &mut obs);
            let action =
                select_action(net, &mut cache, &obs, state.closure_offered, 0.0, &mut rng)?;
            samples.push(DecisionSample::from_decision(&state, &action));
            let outcome = env.step(&state, &action, &mut rng)?;
            total_utility += discount * outcome.utility;
            total_revenue += outcome.reward;
            discount *= gamma;
            state = outcome.next;
        }
    }
    let n = samples.len() as f64;
    let mean_u1 = samples.iter().map(|s| s.u1_fraction()).sum::<f64>() / n;
    let var_u1 = samples
        .iter()
        .map(|s| {
            let d = s.u1_fraction() - mean_u1;
            d * d
        })
        .sum::<f64>()
        / n;
    Ok(EvalReport {
        mean_discounted_utility: total_utility / episodes as f64,
        mean_undiscounted_revenue: total_revenue / episodes as f64,
        mean_u1,
        std_u1: var_u1.sqrt(),
        samples,
    })
}
