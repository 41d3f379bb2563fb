//! Exact value iteration on the reduced discrete state space.
//!
//! For a risk-neutral firm the optimal evasion decision is bang-bang, so the
//! five-year history only ever holds values from a small grid and the full
//! Bellman equation can be solved exactly by synchronous value iteration.
//! The solver is the ground-truth oracle the deep-Q solver is validated
//! against; it also supports finer evasion grids (to re-verify bang-bang
//! optimality empirically) and grid-restricted risk-averse cross-checks.

use rand::Rng;
use thiserror::Error;

use crate::tax_env::{
    reward, ClosureScenario, EnvError, FirmAction, FirmState, TaxEnv, TaxStatus, TransitionCase,
    CLOSURE_PERIOD, HISTORY_LEN, NUM_STATUSES,
};

/// Discount factor fitted so that the risk-neutral never-closure value from
/// the canonical start state equals the published benchmark 3254.6.
pub const CALIBRATED_DISCOUNT: f64 = 0.970_943_299_770_355_3;

/// Published risk-neutral benchmark values per closure scenario
/// (total discounted revenue from the canonical start state).
pub const BENCHMARK_NEVER: f64 = 3254.6;
pub const BENCHMARK_BERNOULLI: f64 = 3307.9;
pub const BENCHMARK_ALWAYS: f64 = 3358.3;
pub const BENCHMARK_PERIODIC: f64 = 3319.7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DpError {
    #[error("evasion grid must be non-empty")]
    EmptyGrid,
    #[error("evasion grid must contain level 0 (the clean start history)")]
    GridMissingZero,
    #[error("evasion grid levels must be unique, sorted, and at most 100")]
    MalformedGrid,
    #[error("history level {0} is not on the evasion grid")]
    LevelNotOnGrid(u8),
    #[error("value iteration did not converge: residual {residual:e} after {iterations} sweeps")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("tolerance must be positive, got {0}")]
    BadTolerance(f64),
    #[error(
        "calibration target {target} not bracketed: value {lo_value} at gamma {lo}, {hi_value} at gamma {hi}"
    )]
    TargetNotBracketed {
        target: f64,
        lo: f64,
        lo_value: f64,
        hi: f64,
        hi_value: f64,
    },
    #[error(transparent)]
    Env(#[from] EnvError),
}

// ---------------------------------------------------------------------------
// Evasion grid and state indexing
// ---------------------------------------------------------------------------

/// The discrete set of evasion levels the dynamic program optimizes over.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvasionGrid {
    levels: Vec<u8>,
}

impl EvasionGrid {
    pub fn new(levels: Vec<u8>) -> Result<Self, DpError> {
        if levels.is_empty() {
            return Err(DpError::EmptyGrid);
        }
        let sorted = levels.windows(2).all(|w| w[0] < w[1]);
        if !sorted || *levels.last().unwrap() > 100 {
            return Err(DpError::MalformedGrid);
        }
        if levels[0] != 0 {
            return Err(DpError::GridMissingZero);
        }
        Ok(EvasionGrid { levels })
    }

    /// The bang-bang grid {0, 100}: conceal everything or nothing.
    pub fn bang_bang() -> Self {
        EvasionGrid {
            levels: vec![0, 100],
        }
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn levels(&self) -> &[u8] {
        &self.levels
    }

    pub fn level(&self, pos: usize) -> u8 {
        self.levels[pos]
    }

    pub fn position(&self, level: u8) -> Result<usize, DpError> {
        self.levels
            .iter()
            .position(|&l| l == level)
            .ok_or(DpError::LevelNotOnGrid(level))
    }
}

/// A decoded dynamic-programming state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DpState {
    pub status: TaxStatus,
    pub closure_offered: bool,
    /// Grid positions of the history levels, oldest first.
    pub history_pos: [usize; HISTORY_LEN],
    /// Offer-cycle phase; meaningful only in the periodic scenario.
    pub phase: u8,
}

/// Enumerates `status x offer flag x history grid (x phase)` densely.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSpace {
    grid: EvasionGrid,
    periodic: bool,
    grid_powers: [usize; HISTORY_LEN],
}

impl StateSpace {
    pub fn new(grid: EvasionGrid, scenario: &ClosureScenario) -> StateSpace {
        let g = grid.len();
        let mut grid_powers = [1; HISTORY_LEN];
        for k in 1..HISTORY_LEN {
            grid_powers[k] = grid_powers[k - 1] * g;
        }
        StateSpace {
            grid,
            periodic: matches!(scenario, ClosureScenario::FiveYearPeriodic),
            grid_powers,
        }
    }

    pub fn grid(&self) -> &EvasionGrid {
        &self.grid
    }

    pub fn phases(&self) -> usize {
        if self.periodic {
            CLOSURE_PERIOD as usize
        } else {
            1
        }
    }

    pub fn history_codes(&self) -> usize {
        self.grid_powers[HISTORY_LEN - 1] * self.grid.len()
    }

    pub fn len(&self) -> usize {
        NUM_STATUSES * 2 * self.history_codes() * self.phases()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    fn history_code(&self, history_pos: &[usize; HISTORY_LEN]) -> usize {
        history_pos
            .iter()
            .zip(&self.grid_powers)
            .map(|(&p, &w)| p * w)
            .sum()
    }

    /// History code after shifting one year and appending `new_pos`: the
    /// oldest digit falls off and the new decision becomes most recent.
    fn shifted_code(&self, code: usize, new_pos: usize) -> usize {
        code / self.grid.len() + new_pos * self.grid_powers[HISTORY_LEN - 1]
    }

    pub fn index(&self, state: &DpState) -> usize {
        let s = state.status.index();
        let c = state.closure_offered as usize;
        let h = self.history_code(&state.history_pos);
        ((s * 2 + c) * self.history_codes() + h) * self.phases() + state.phase as usize
    }

    fn index_parts(&self, status_idx: usize, offered: bool, hcode: usize, phase: u8) -> usize {
        ((status_idx * 2 + offered as usize) * self.history_codes() + hcode) * self.phases()
            + phase as usize
    }

    pub fn decode(&self, mut idx: usize) -> DpState {
        let phase = (idx % self.phases()) as u8;
        idx /= self.phases();
        let mut hcode = idx % self.history_codes();
        idx /= self.history_codes();
        let closure_offered = idx % 2 == 1;
        let status_idx = idx / 2;
        let mut history_pos = [0usize; HISTORY_LEN];
        for p in history_pos.iter_mut() {
            *p = hcode % self.grid.len();
            hcode /= self.grid.len();
        }
        DpState {
            status: TaxStatus::new(status_idx as u8 + 1).expect("decoded status in range"),
            closure_offered,
            history_pos,
            phase,
        }
    }

    /// The decoded state as an environment state.
    pub fn to_firm_state(&self, state: &DpState) -> FirmState {
        let mut history = [0u8; HISTORY_LEN];
        for (h, &p) in history.iter_mut().zip(&state.history_pos) {
            *h = self.grid.level(p);
        }
        FirmState {
            status: state.status,
            closure_offered: state.closure_offered,
            history,
            periodic_phase: self.periodic.then_some(state.phase),
        }
    }

    /// Index of an environment state whose history lies on the grid.
    pub fn index_of_firm_state(&self, state: &FirmState) -> Result<usize, DpError> {
        let mut history_pos = [0usize; HISTORY_LEN];
        for (p, &level) in history_pos.iter_mut().zip(&state.history) {
            *p = self.grid.position(level)?;
        }
        Ok(self.index(&DpState {
            status: state.status,
            closure_offered: state.closure_offered,
            history_pos,
            phase: state.periodic_phase.unwrap_or(0),
        }))
    }
}

// ---------------------------------------------------------------------------
// Value table and the Bellman operator
// ---------------------------------------------------------------------------

/// Converged values and the greedy policy over the enumerated state space.
#[derive(Debug, Clone)]
pub struct ValueTable {
    pub space: StateSpace,
    pub values: Vec<f64>,
    /// Greedy action per state: (evasion grid position, use closure).
    pub policy: Vec<(usize, bool)>,
}

impl ValueTable {
    pub fn zeros(space: StateSpace) -> ValueTable {
        let n = space.len();
        ValueTable {
            space,
            values: vec![0.0; n],
            policy: vec![(0, false); n],
        }
    }

    pub fn greedy_action(&self, state: &FirmState) -> Result<FirmAction, DpError> {
        let idx = self.space.index_of_firm_state(state)?;
        let (pos, use_closure) = self.policy[idx];
        Ok(FirmAction {
            evasion_level: self.space.grid().level(pos),
            use_closure,
        })
    }

    /// Value of the canonical reporting state (unaudited five-plus years,
    /// clean history, phase 0) for a given initial offer flag.
    pub fn start_value(&self, closure_offered: bool) -> f64 {
        let state = DpState {
            status: TaxStatus::new(NUM_STATUSES as u8).unwrap(),
            closure_offered,
            history_pos: [self.space.grid().position(0).unwrap(); HISTORY_LEN],
            phase: 0,
        };
        self.values[self.space.index(&state)]
    }

    /// Start value averaged over the scenario's initial offer distribution,
    /// matching how simulation episodes begin.
    pub fn scenario_start_value(&self, scenario: &ClosureScenario) -> f64 {
        match scenario {
            ClosureScenario::Never | ClosureScenario::FiveYearPeriodic => self.start_value(false),
            ClosureScenario::Always => self.start_value(true),
            ClosureScenario::Bernoulli(p) => {
                (1.0 - p) * self.start_value(false) + p * self.start_value(true)
            }
        }
    }

    /// CSV rows keyed by decoded state tuple.
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("status,closure_offered,h1,h2,h3,h4,h5,phase,value,policy_u1,policy_u2\n");
        for idx in 0..self.space.len() {
            let st = self.space.decode(idx);
            let fs = self.space.to_firm_state(&st);
            let (pos, u2) = self.policy[idx];
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                fs.status.value(),
                fs.closure_offered as u8,
                fs.history[0],
                fs.history[1],
                fs.history[2],
                fs.history[3],
                fs.history[4],
                st.phase,
                self.values[idx],
                self.space.grid().level(pos),
                u2 as u8,
            ));
        }
        out
    }
}

/// Next-offer law: (offered, probability, next phase) triples.
fn offer_distribution(scenario: &ClosureScenario, phase: u8) -> Vec<(bool, f64, u8)> {
    match scenario {
        ClosureScenario::Never => vec![(false, 1.0, 0)],
        ClosureScenario::Always => vec![(true, 1.0, 0)],
        ClosureScenario::Bernoulli(p) => vec![(false, 1.0 - p, 0), (true, *p, 0)],
        ClosureScenario::FiveYearPeriodic => {
            let next = (phase + 1) % CLOSURE_PERIOD;
            vec![(next == 0, 1.0, next)]
        }
    }
}

/// One synchronous Bellman sweep. Returns the updated values, the greedy
/// policy of the sweep, and the sup-norm change.
pub fn bellman_backup(
    values: &[f64],
    env: &TaxEnv,
    space: &StateSpace,
) -> (Vec<f64>, Vec<(usize, bool)>, f64) {
    let gamma = env.params.discount;
    let scenario = &env.params.closure_scenario;
    let n = space.len();
    let mut new_values = vec![0.0; n];
    let mut policy = vec![(0usize, false); n];
    let mut residual = 0.0f64;

    for idx in 0..n {
        let dp_state = space.decode(idx);
        let firm_state = space.to_firm_state(&dp_state);
        let offers = offer_distribution(scenario, dp_state.phase);
        let hcode = space
            .history_code(&dp_state.history_pos);

        let mut best = f64::NEG_INFINITY;
        let mut best_action = (0usize, false);
        let closure_options: &[bool] = if dp_state.closure_offered {
            &[false, true]
        } else {
            &[false]
        };
        for &use_closure in closure_options {
            let case = TransitionCase::from_decision(dp_state.closure_offered, use_closure);
            let column = env.model.matrix(case).column_support(dp_state.status);
            for pos in 0..space.grid().len() {
                let action = FirmAction {
                    evasion_level: space.grid().level(pos),
                    use_closure,
                };
                let raw = reward(&firm_state, &action, &env.params)
                    .expect("enumerated states and grid actions are valid");
                let signal = env.utility_signal(raw);
                let next_hcode = space.shifted_code(hcode, pos);
                let mut expected = 0.0;
                for &(next_status_idx, p_status) in column {
                    for &(offered, p_offer, next_phase) in &offers {
                        let next_idx =
                            space.index_parts(next_status_idx, offered, next_hcode, next_phase);
                        expected += p_status * p_offer * values[next_idx];
                    }
                }
                let q = signal + gamma * expected;
                if q > best {
                    best = q;
                    best_action = (pos, use_closure);
                }
            }
        }
        new_values[idx] = best;
        policy[idx] = best_action;
        residual = residual.max((best - values[idx]).abs());
    }

    (new_values, policy, residual)
}

/// A converged solve with its iteration trace.
#[derive(Debug, Clone)]
pub struct Solution {
    pub table: ValueTable,
    pub iterations: usize,
    pub residuals: Vec<f64>,
}

/// Default sup-norm convergence tolerance, in value units.
pub const DEFAULT_TOLERANCE: f64 = 1e-9;
/// Default sweep cap.
pub const MAX_ITERATIONS: usize = 1_000_000;

/// Iterate Bellman sweeps until the sup-norm change is at most `tolerance`.
pub fn solve(
    env: &TaxEnv,
    grid: EvasionGrid,
    tolerance: f64,
    max_iterations: usize,
) -> Result<Solution, DpError> {
    if !(tolerance > 0.0) {
        return Err(DpError::BadTolerance(tolerance));
    }
    let space = StateSpace::new(grid, &env.params.closure_scenario);
    let mut table = ValueTable::zeros(space);
    let mut residuals = Vec::new();
    for iteration in 1..=max_iterations {
        let (values, policy, residual) = bellman_backup(&table.values, env, &table.space);
        table.values = values;
        table.policy = policy;
        residuals.push(residual);
        if residual <= tolerance {
            return Ok(Solution {
                table,
                iterations: iteration,
                residuals,
            });
        }
    }
    Err(DpError::NoConvergence {
        iterations: max_iterations,
        residual: *residuals.last().unwrap_or(&f64::INFINITY),
    })
}

/// Fit the discount factor by bisection so the never-closure risk-neutral
/// start value matches `target` (within 0.1% relative).
pub fn calibrate_discount(
    base: &crate::tax_env::TaxParams,
    grid: &EvasionGrid,
    target: f64,
) -> Result<f64, DpError> {
    let (mut lo, mut hi) = (0.9, 0.999);
    let value_at = |gamma: f64| -> Result<f64, DpError> {
        let mut params = base.clone();
        params.discount = gamma;
        params.closure_scenario = ClosureScenario::Never;
        params.risk_aversion = 0.0;
        let env = TaxEnv::new(params)?;
        let solution = solve(&env, grid.clone(), DEFAULT_TOLERANCE, MAX_ITERATIONS)?;
        Ok(solution.table.scenario_start_value(&ClosureScenario::Never))
    };
    let lo_value = value_at(lo)?;
    let hi_value = value_at(hi)?;
    if !(lo_value < target && target < hi_value) {
        return Err(DpError::TargetNotBracketed {
            target,
            lo,
            lo_value,
            hi,
            hi_value,
        });
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        let v = value_at(mid)?;
        if (v - target).abs() <= target * 1e-6 {
            return Ok(mid);
        }
        if v < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-13 {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Monte-Carlo rollout of a value table's greedy policy; returns the mean
/// discounted signal over `episodes` runs of `steps` years.
pub fn evaluate_greedy_policy(
    table: &ValueTable,
    env: &TaxEnv,
    episodes: usize,
    steps: usize,
    rng: &mut impl Rng,
) -> Result<f64, DpError> {
    let mut total = 0.0;
    for _ in 0..episodes {
        let mut state = env.initial_state(rng);
        let mut discount = 1.0;
        let mut episode_value = 0.0;
        for _ in 0..steps {
            let action = table.greedy_action(&state)?;
            let outcome = env.step(&state, &action, rng)?;
            episode_value += discount * outcome.utility;
            discount *= env.params.discount;
            state = outcome.next;
        }
        total += episode_value;
    }
    Ok(total / episodes as f64)
}
