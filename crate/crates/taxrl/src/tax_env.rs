//! The firm's stochastic tax environment.
//!
//! A firm's year-to-year life in the tax system is a Markov decision process:
//! its *tax status* encodes whether it is currently audited, has just used a
//! tax amnesty ("closure"), or has gone unaudited for up to five years; a
//! five-element history window holds its past evasion decisions (the statute
//! of limitations); and each year the government may offer the closure
//! option. The firm chooses how much profit to conceal (0–100%) and whether
//! to take a closure offer. Rewards are after-tax revenues, weighted through
//! a CRRA utility when the firm is risk-averse.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of tax statuses.
pub const NUM_STATUSES: usize = 15;
/// Years covered by the statute of limitations (history window length).
pub const HISTORY_LEN: usize = 5;
/// Evasion decisions are taken on a percent grid: levels `0..=100`.
pub const MAX_EVASION_LEVEL: u8 = 100;
/// Number of discrete evasion actions.
pub const NUM_EVASION_LEVELS: usize = MAX_EVASION_LEVEL as usize + 1;
/// Period of the five-year-periodic closure scenario.
pub const CLOSURE_PERIOD: u8 = 5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("tax status must be in 1..=15, got {0}")]
    InvalidStatus(u8),
    #[error("evasion level must be in 0..=100, got {0}")]
    InvalidEvasionLevel(u8),
    #[error("history element must be a level in 0..=100, got {0}")]
    InvalidHistoryLevel(u8),
    #[error("closure was not offered but the action uses it")]
    ClosureNotOffered,
    #[error("phase must be in 0..=4, got {0}")]
    InvalidPhase(u8),
    #[error("state carries a periodic phase only in the five-year-periodic scenario")]
    PhaseScenarioMismatch,
    #[error("CRRA utility is undefined for z={z} with risk aversion {lambda}")]
    UtilityDomain { z: f64, lambda: f64 },
    #[error("invalid tax parameters: {0}")]
    InvalidParams(String),
}

// ---------------------------------------------------------------------------
// Tax status
// ---------------------------------------------------------------------------

/// The firm's position in the 15-element status set.
///
/// * `1..=5`: currently audited, the value is how many past years the audit
///   covers;
/// * `6..=10`: closure used, `value - 5` years since the last audit/closure;
/// * `11..=15`: unaudited for `value - 10` years.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TaxStatus(u8);

impl TaxStatus {
    pub fn new(value: u8) -> Result<Self, EnvError> {
        if (1..=NUM_STATUSES as u8).contains(&value) {
            Ok(TaxStatus(value))
        } else {
            Err(EnvError::InvalidStatus(value))
        }
    }

    pub fn value(self) -> u8 {
        self.0
    }

    /// Zero-based index into status-dimensioned arrays.
    pub fn index(self) -> usize {
        self.0 as usize - 1
    }

    pub fn is_audited(self) -> bool {
        self.0 <= 5
    }

    pub fn is_closure(self) -> bool {
        (6..=10).contains(&self.0)
    }

    pub fn is_unaudited(self) -> bool {
        self.0 >= 11
    }

    /// Years covered by the current audit (statuses 1..=5 only).
    pub fn audit_years(self) -> Option<u8> {
        self.is_audited().then_some(self.0)
    }

    /// Years being paid for by the closure fee (statuses 6..=10 only).
    pub fn closure_years(self) -> Option<u8> {
        self.is_closure().then(|| self.0 - 5)
    }

    pub fn all() -> impl Iterator<Item = TaxStatus> {
        (1..=NUM_STATUSES as u8).map(TaxStatus)
    }
}

// ---------------------------------------------------------------------------
// Firm state and action
// ---------------------------------------------------------------------------

/// The firm's full state: tax status, whether closure is on offer this year,
/// and the five most recent evasion decisions.
///
/// History is stored as percent levels; element `HISTORY_LEN - 1` is the most
/// recent decision and element `0` the decision from five years ago. In the
/// five-year-periodic scenario the state also carries the phase of the offer
/// cycle, `0..=4`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FirmState {
    pub status: TaxStatus,
    pub closure_offered: bool,
    /// Evasion levels (percent), oldest first.
    pub history: [u8; HISTORY_LEN],
    /// Offer-cycle phase; present iff the scenario is five-year-periodic.
    pub periodic_phase: Option<u8>,
}

impl FirmState {
    pub fn validate(&self, scenario: &ClosureScenario) -> Result<(), EnvError> {
        for &h in &self.history {
            if h > MAX_EVASION_LEVEL {
                return Err(EnvError::InvalidHistoryLevel(h));
            }
        }
        match (self.periodic_phase, scenario) {
            (Some(p), ClosureScenario::FiveYearPeriodic) => {
                if p >= CLOSURE_PERIOD {
                    return Err(EnvError::InvalidPhase(p));
                }
            }
            (None, ClosureScenario::FiveYearPeriodic) => {
                return Err(EnvError::PhaseScenarioMismatch)
            }
            (Some(_), _) => return Err(EnvError::PhaseScenarioMismatch),
            (None, _) => {}
        }
        Ok(())
    }

    /// History as fractions in `[0, 1]`, oldest first.
    pub fn history_fractions(&self) -> [f64; HISTORY_LEN] {
        let mut out = [0.0; HISTORY_LEN];
        for (o, &h) in out.iter_mut().zip(&self.history) {
            *o = level_to_fraction(h);
        }
        out
    }
}

/// The firm's yearly decision: how much profit to conceal (a percent level)
/// and whether to use the closure option.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FirmAction {
    /// Concealed fraction of profits, as a level on the percent grid.
    pub evasion_level: u8,
    pub use_closure: bool,
}

impl FirmAction {
    pub fn new(evasion_level: u8, use_closure: bool) -> Result<Self, EnvError> {
        if evasion_level > MAX_EVASION_LEVEL {
            return Err(EnvError::InvalidEvasionLevel(evasion_level));
        }
        Ok(FirmAction {
            evasion_level,
            use_closure,
        })
    }

    pub fn evasion_fraction(&self) -> f64 {
        level_to_fraction(self.evasion_level)
    }
}

/// Percent level to fraction; the single conversion point used everywhere.
pub fn level_to_fraction(level: u8) -> f64 {
    f64::from(level) / 100.0
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

/// How often the government offers the closure option.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ClosureScenario {
    /// Closure is never offered.
    Never,
    /// Offered i.i.d. each year with this probability.
    Bernoulli(f64),
    /// Offered every year.
    Always,
    /// Offered deterministically every five years.
    FiveYearPeriodic,
}

impl ClosureScenario {
    pub fn label(&self) -> String {
        match self {
            ClosureScenario::Never => "never".to_string(),
            ClosureScenario::Bernoulli(p) => format!("bernoulli_{p}"),
            ClosureScenario::Always => "always".to_string(),
            ClosureScenario::FiveYearPeriodic => "periodic5".to_string(),
        }
    }
}

/// All tax-system and preference parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaxParams {
    /// Tax rate `r` on declared profits.
    pub tax_rate: f64,
    /// Yearly penalty rate `beta` on underreported profit found at audit.
    pub penalty_rate: f64,
    /// Discount on penalties for prompt payment, `beta_d`.
    pub prompt_discount: f64,
    /// Closure fee per closed year, as a fraction of annual revenue.
    pub closure_cost: f64,
    /// Annual revenue `R` in currency units.
    pub annual_revenue: f64,
    /// Discount factor `gamma` in (0, 1).
    pub discount: f64,
    /// CRRA risk-aversion coefficient `lambda` (0 = risk-neutral).
    pub risk_aversion: f64,
    pub closure_scenario: ClosureScenario,
    /// Utility value utilities are clipped to from below (risk-averse runs).
    pub utility_floor: f64,
}

impl TaxParams {
    pub fn validate(&self) -> Result<(), EnvError> {
        let fraction = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(EnvError::InvalidParams(format!("{name}={v} not in [0,1]")))
            }
        };
        fraction("tax_rate", self.tax_rate)?;
        fraction("penalty_rate", self.penalty_rate)?;
        fraction("prompt_discount", self.prompt_discount)?;
        fraction("closure_cost", self.closure_cost)?;
        if !(self.discount > 0.0 && self.discount < 1.0) {
            return Err(EnvError::InvalidParams(format!(
                "discount={} not in (0,1)",
                self.discount
            )));
        }
        if !(self.annual_revenue > 0.0) {
            return Err(EnvError::InvalidParams(format!(
                "annual_revenue={} must be positive",
                self.annual_revenue
            )));
        }
        if !(self.risk_aversion >= 0.0) {
            return Err(EnvError::InvalidParams(format!(
                "risk_aversion={} must be nonnegative",
                self.risk_aversion
            )));
        }
        if !(self.utility_floor < 0.0) {
            return Err(EnvError::InvalidParams(format!(
                "utility_floor={} must be negative",
                self.utility_floor
            )));
        }
        if let ClosureScenario::Bernoulli(p) = self.closure_scenario {
            fraction("closure probability", p)?;
        }
        Ok(())
    }
}

impl Default for TaxParams {
    /// Greek-system calibration: r=0.24, beta=0.24, beta_d=0.6, l=0.023,
    /// R=100, gamma fitted so the never-closure risk-neutral value matches
    /// the published dynamic-programming benchmark.
    fn default() -> Self {
        TaxParams {
            tax_rate: 0.24,
            penalty_rate: 0.24,
            prompt_discount: 0.6,
            closure_cost: 0.023,
            annual_revenue: 100.0,
            discount: crate::exact_dp::CALIBRATED_DISCOUNT,
            risk_aversion: 0.0,
            closure_scenario: ClosureScenario::Never,
            utility_floor: -1.0,
        }
    }
}

// ---------------------------------------------------------------------------
// Transition model
// ---------------------------------------------------------------------------

/// One 15x15 column-stochastic status matrix: `entries[i][j]` is the
/// probability of moving to status `i+1` given current status `j+1`.
#[derive(Debug, Clone, PartialEq)]
pub struct StatusMatrix {
    pub entries: [[f64; NUM_STATUSES]; NUM_STATUSES],
    /// Nonzero (next-status index, probability) pairs per column.
    support: Vec<Vec<(usize, f64)>>,
}

impl StatusMatrix {
    pub fn new(entries: [[f64; NUM_STATUSES]; NUM_STATUSES]) -> Self {
        let support = (0..NUM_STATUSES)
            .map(|j| {
                (0..NUM_STATUSES)
                    .filter(|&i| entries[i][j] != 0.0)
                    .map(|i| (i, entries[i][j]))
                    .collect()
            })
            .collect();
        StatusMatrix { entries, support }
    }

    /// Nonzero transitions out of `status`.
    pub fn column_support(&self, status: TaxStatus) -> &[(usize, f64)] {
        &self.support[status.index()]
    }

    pub fn column_sum(&self, j: usize) -> f64 {
        (0..NUM_STATUSES).map(|i| self.entries[i][j]).sum()
    }

    fn sample_next(&self, status: TaxStatus, rng: &mut impl Rng) -> TaxStatus {
        let u: f64 = rng.gen();
        let support = self.column_support(status);
        let mut acc = 0.0;
        for &(i, p) in support {
            acc += p;
            if u < acc {
                return TaxStatus(i as u8 + 1);
            }
        }
        // Rounding tail: the last supported status.
        let (i, _) = *support.last().expect("column has support");
        TaxStatus(i as u8 + 1)
    }

    /// CSV form, 15 rows by 15 columns, row = next status.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in &self.entries {
            let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }
}

/// The three status-transition laws: no offer on the table (`m_no`), offer
/// accepted (`m_a`), offer declined (`m_d`). Declining an offer roughly
/// triples the audit probabilities relative to no offer existing at all.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionModel {
    pub m_no: StatusMatrix,
    pub m_a: StatusMatrix,
    pub m_d: StatusMatrix,
}

/// Which of the three transition matrices applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransitionCase {
    NotOffered,
    OfferTaken,
    OfferDeclined,
}

impl TransitionCase {
    pub fn from_decision(closure_offered: bool, use_closure: bool) -> TransitionCase {
        match (closure_offered, use_closure) {
            (false, _) => TransitionCase::NotOffered,
            (true, true) => TransitionCase::OfferTaken,
            (true, false) => TransitionCase::OfferDeclined,
        }
    }
}

#[rustfmt::skip]
const M_NO: [[f64; NUM_STATUSES]; NUM_STATUSES] = [
    [0.0025, 0.0025, 0.0025, 0.0025, 0.0025, 0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,  0.0 ],
    [0.0,    0.0,    0.0,    0.0,    0.0,    0.0025, 0.0025, 0.0025, 0.0025, 0.0025, 0.0025, 0.0,    0.0,    0.0,  0.0 ],
    [0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0025, 0.0,    0.0,  0.0 ],
    [0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0025, 0.0,  0.0 ],
    [0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.04, 0.04],
    [0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,  0.0 ],
    [0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,  0.0 ],
    [0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,  0.0 ],
    [0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,  0.0 ],
    [0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,  0.0 ],
    [0.9975, 0.9975, 0.9975, 0.9975, 0.9975, 0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,  0.0 ],
    [0.0,    0.0,    0.0,    0.0,    0.0,    0.9975, 0.9975, 0.9975, 0.9975, 0.9975, 0.9975, 0.0,    0.0,    0.0,  0.0 ],
    [0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.9975, 0.0,    0.0,  0.0 ],
    [0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.9975, 0.0,  0.0 ],
    [0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.96, 0.96],
];

#[rustfmt::skip]
const M_A: [[f64; NUM_STATUSES]; NUM_STATUSES] = [
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0],
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0],
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0],
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0],
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0],
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
];

#[rustfmt::skip]
const M_D: [[f64; NUM_STATUSES]; NUM_STATUSES] = [
    [0.0075, 0.0075, 0.0075, 0.0075, 0.0075, 0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,  0.0 ],
    [0.0,    0.0,    0.0,    0.0,    0.0,    0.0075, 0.0075, 0.0075, 0.0075, 0.0075, 0.0075, 0.0,    0.0,    0.0,  0.0 ],
    [0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0075, 0.0,    0.0,  0.0 ],
    [0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0075, 0.0,  0.0 ],
    [0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.12, 0.12],
    [0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,  0.0 ],
    [0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,  0.0 ],
    [0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,  0.0 ],
    [0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,  0.0 ],
    [0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,  0.0 ],
    [0.9925, 0.9925, 0.9925, 0.9925, 0.9925, 0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,  0.0 ],
    [0.0,    0.0,    0.0,    0.0,    0.0,    0.9925, 0.9925, 0.9925, 0.9925, 0.9925, 0.9925, 0.0,    0.0,    0.0,  0.0 ],
    [0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.9925, 0.0,    0.0,  0.0 ],
    [0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.9925, 0.0,  0.0 ],
    [0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.0,    0.88, 0.88],
];

impl TransitionModel {
    /// The built-in transition law of the modeled tax system.
    pub fn builtin() -> TransitionModel {
        TransitionModel {
            m_no: StatusMatrix::new(M_NO),
            m_a: StatusMatrix::new(M_A),
            m_d: StatusMatrix::new(M_D),
        }
    }

    pub fn matrix(&self, case: TransitionCase) -> &StatusMatrix {
        match case {
            TransitionCase::NotOffered => &self.m_no,
            TransitionCase::OfferTaken => &self.m_a,
            TransitionCase::OfferDeclined => &self.m_d,
        }
    }

    /// Column-stochasticity and entry-range checks.
    pub fn validate(&self) -> Result<(), EnvError> {
        for (name, m) in [("m_no", &self.m_no), ("m_a", &self.m_a), ("m_d", &self.m_d)] {
            for j in 0..NUM_STATUSES {
                let sum = m.column_sum(j);
                if (sum - 1.0).abs() > 1e-12 {
                    return Err(EnvError::InvalidParams(format!(
                        "{name} column {} sums to {sum}",
                        j + 1
                    )));
                }
                for i in 0..NUM_STATUSES {
                    let e = m.entries[i][j];
                    if !(0.0..=1.0).contains(&e) {
                        return Err(EnvError::InvalidParams(format!(
                            "{name}[{i}][{j}] = {e} out of range"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Reward and utility
// ---------------------------------------------------------------------------

/// The firm's after-tax reward for one year, in currency units.
///
/// Unaudited: `R (1 - r + r u1)`. Closure in effect: the same minus the fee
/// `l` per closed year. Audited covering `s` years: declared taxes plus back
/// taxes on the covered history and penalties proportional to the age of
/// each offense, discounted for prompt payment. Deep audits of a heavy
/// evasion history can make this negative.
pub fn reward(state: &FirmState, action: &FirmAction, params: &TaxParams) -> Result<f64, EnvError> {
    if action.evasion_level > MAX_EVASION_LEVEL {
        return Err(EnvError::InvalidEvasionLevel(action.evasion_level));
    }
    let r = params.tax_rate;
    let u1 = action.evasion_fraction();
    let base = 1.0 - r + r * u1;
    let s = state.status.value();
    let h = state.history_fractions();
    let inner = if let Some(years) = state.status.closure_years() {
        base - params.closure_cost * f64::from(years)
    } else if let Some(years) = state.status.audit_years() {
        // Sums run over the `years` most recent history elements; the i-th
        // term is the decision made i years ago.
        let mut evaded = 0.0;
        let mut penalty_weighted = 0.0;
        for i in 1..=years as usize {
            let hi = h[HISTORY_LEN - i];
            evaded += hi;
            penalty_weighted += i as f64 * hi;
        }
        base - r * evaded - r * params.prompt_discount * params.penalty_rate * penalty_weighted
    } else {
        debug_assert!(state.status.is_unaudited());
        base
    };
    let _ = s;
    Ok(params.annual_revenue * inner)
}

/// CRRA utility `U(z) = z^(1-lambda) / (1-lambda)`.
///
/// `lambda = 0` is the risk-neutral identity; `lambda` within 1e-9 of 1 is
/// the logarithmic limit. For positive `lambda` the argument must be
/// positive; callers wanting a total function clip first.
pub fn utility(z: f64, lambda: f64) -> Result<f64, EnvError> {
    if lambda == 0.0 {
        return Ok(z);
    }
    if z <= 0.0 {
        return Err(EnvError::UtilityDomain { z, lambda });
    }
    if (lambda - 1.0).abs() < 1e-9 {
        Ok(z.ln())
    } else {
        Ok(z.powf(1.0 - lambda) / (1.0 - lambda))
    }
}

/// The argument threshold at which the CRRA utility equals `floor`
/// (`lambda > 1`): solving `z^(1-lambda)/(1-lambda) = floor` gives
/// `z = ((lambda-1) * (-floor))^(-1/(lambda-1))`.
pub fn clip_threshold(lambda: f64, floor: f64) -> f64 {
    debug_assert!(lambda > 1.0 && floor < 0.0);
    ((lambda - 1.0) * (-floor)).powf(-1.0 / (lambda - 1.0))
}

/// Utility with the argument clipped from below (`lambda > 1`): arguments
/// under the threshold where `U` reaches `floor` are replaced by it, so the
/// result always lies in `[floor, 0)`. Total for all real `z`.
pub fn clipped_utility(z: f64, lambda: f64, floor: f64) -> f64 {
    let eps = clip_threshold(lambda, floor);
    if z < eps {
        floor
    } else {
        utility(z, lambda).expect("argument at or above clip threshold is positive")
    }
}

// ---------------------------------------------------------------------------
// Environment
// ---------------------------------------------------------------------------

/// One environment transition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub next: FirmState,
    /// The learning signal: clipped utility for risk-averse runs, the raw
    /// reward when risk-neutral.
    pub utility: f64,
    /// Raw reward in currency units.
    pub reward: f64,
}

/// Tax parameters plus the transition law; the complete simulated system.
#[derive(Debug, Clone)]
pub struct TaxEnv {
    pub params: TaxParams,
    pub model: TransitionModel,
}

impl TaxEnv {
    pub fn new(params: TaxParams) -> Result<TaxEnv, EnvError> {
        params.validate()?;
        let model = TransitionModel::builtin();
        model.validate()?;
        Ok(TaxEnv { params, model })
    }

    /// Dimensionality of encoded observations: 21, plus one phase element in
    /// the five-year-periodic scenario.
    pub fn observation_dim(&self) -> usize {
        match self.params.closure_scenario {
            ClosureScenario::FiveYearPeriodic => NUM_STATUSES + 1 + HISTORY_LEN + 1,
            _ => NUM_STATUSES + 1 + HISTORY_LEN,
        }
    }

    /// The canonical start state: unaudited five-plus years, clean history.
    /// The closure offer is drawn per the scenario; the periodic cycle
    /// starts at phase 0 with no offer on the table.
    pub fn initial_state(&self, rng: &mut impl Rng) -> FirmState {
        let (closure_offered, periodic_phase) = match self.params.closure_scenario {
            ClosureScenario::Never => (false, None),
            ClosureScenario::Bernoulli(p) => (rng.gen::<f64>() < p, None),
            ClosureScenario::Always => (true, None),
            ClosureScenario::FiveYearPeriodic => (false, Some(0)),
        };
        FirmState {
            status: TaxStatus(NUM_STATUSES as u8),
            closure_offered,
            history: [0; HISTORY_LEN],
            periodic_phase,
        }
    }

    pub fn validate_action(&self, state: &FirmState, action: &FirmAction) -> Result<(), EnvError> {
        if action.evasion_level > MAX_EVASION_LEVEL {
            return Err(EnvError::InvalidEvasionLevel(action.evasion_level));
        }
        if action.use_closure && !state.closure_offered {
            return Err(EnvError::ClosureNotOffered);
        }
        Ok(())
    }

    /// The training signal for a raw reward `z`: the raw value when
    /// risk-neutral, otherwise the CRRA utility with the argument clipped so
    /// the signal never falls below the configured floor. The logarithmic
    /// lambda=1 case clips at `exp(floor)`; for lambda in (0,1) utilities
    /// are nonnegative and nonpositive arguments saturate to the limit 0.
    pub fn utility_signal(&self, z: f64) -> f64 {
        let lambda = self.params.risk_aversion;
        if lambda == 0.0 {
            z
        } else if lambda > 1.0 {
            clipped_utility(z, lambda, self.params.utility_floor)
        } else if (lambda - 1.0).abs() < 1e-9 {
            let eps = self.params.utility_floor.exp();
            if z < eps {
                self.params.utility_floor
            } else {
                z.ln()
            }
        } else {
            // lambda in (0,1): U(z) = z^(1-lambda)/(1-lambda) >= 0, with
            // U -> 0 as z -> 0+.
            if z <= 0.0 {
                0.0
            } else {
                z.powf(1.0 - lambda) / (1.0 - lambda)
            }
        }
    }

    /// Advance the firm one year: sample the next status via the matrix
    /// selected by the closure decision, draw the next closure offer per the
    /// scenario, shift the evasion history, and report the reward and its
    /// utility signal.
    pub fn step(
        &self,
        state: &FirmState,
        action: &FirmAction,
        rng: &mut impl Rng,
    ) -> Result<StepOutcome, EnvError> {
        self.validate_action(state, action)?;
        let raw = reward(state, action, &self.params)?;
        let signal = self.utility_signal(raw);

        let case = TransitionCase::from_decision(state.closure_offered, action.use_closure);
        let next_status = self.model.matrix(case).sample_next(state.status, rng);

        let (next_offered, next_phase) = match self.params.closure_scenario {
            ClosureScenario::Never => (false, None),
            ClosureScenario::Bernoulli(p) => (rng.gen::<f64>() < p, None),
            ClosureScenario::Always => (true, None),
            ClosureScenario::FiveYearPeriodic => {
                let phase = state.periodic_phase.ok_or(EnvError::PhaseScenarioMismatch)?;
                let next = (phase + 1) % CLOSURE_PERIOD;
                (next == 0, Some(next))
            }
        };

        let mut history = state.history;
        history.copy_within(1.., 0);
        history[HISTORY_LEN - 1] = action.evasion_level;

        Ok(StepOutcome {
            next: FirmState {
                status: next_status,
                closure_offered: next_offered,
                history,
                periodic_phase: next_phase,
            },
            utility: signal,
            reward: raw,
        })
    }

    /// Network input encoding: one-hot status (15), closure flag (1), the
    /// five history fractions, and the normalized phase in the periodic
    /// scenario; every element shifted by -0.5 to be centered around zero.
    pub fn encode_observation(&self, state: &FirmState, out: &mut [f64]) {
        let dim = self.observation_dim();
        assert_eq!(out.len(), dim, "observation buffer length mismatch");
        out[..NUM_STATUSES].fill(-0.5);
        out[state.status.index()] = 0.5;
        out[NUM_STATUSES] = if state.closure_offered { 0.5 } else { -0.5 };
        for (k, &h) in state.history.iter().enumerate() {
            out[NUM_STATUSES + 1 + k] = level_to_fraction(h) - 0.5;
        }
        if let ClosureScenario::FiveYearPeriodic = self.params.closure_scenario {
            let phase = state.periodic_phase.expect("periodic state has a phase") as f64;
            out[dim - 1] = phase / f64::from(CLOSURE_PERIOD - 1) - 0.5;
        }
    }

    pub fn observation_vec(&self, state: &FirmState) -> Vec<f64> {
        let mut out = vec![0.0; self.observation_dim()];
        self.encode_observation(state, &mut out);
        out
    }
}
