//! Experiment configuration: the tax-system block plus the training block,
//! resolved from a profile, an optional JSON file, and flag overrides. The
//! resolved config is hashed and the hash stamps every artifact a run
//! writes, so artifacts from different configurations cannot be mixed
//! silently.

use serde::{Deserialize, Serialize};
use taxrl::dqn::TrainConfig;
use taxrl::tax_env::{ClosureScenario, TaxParams};

/// Everything a run depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub tax: TaxParams,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    /// Full-scale profile: production training setup and the calibrated
    /// tax-system defaults.
    pub fn full() -> ExperimentConfig {
        ExperimentConfig {
            tax: TaxParams::default(),
            train: TrainConfig::default(),
        }
    }

    /// Desk-scale profile: minutes instead of days, for validation runs.
    pub fn desk() -> ExperimentConfig {
        ExperimentConfig {
            tax: TaxParams::default(),
            train: TrainConfig::desk(),
        }
    }

    /// FNV-1a over the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for byte in json.as_bytes() {
            h ^= u64::from(*byte);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("{h:016x}")
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Parse a scenario label: `never`, `always`, `periodic5`, `bernoulli`
/// (probability 0.2), or `bernoulli:<p>`.
pub fn parse_scenario(label: &str) -> Result<ClosureScenario, String> {
    match label {
        "never" => Ok(ClosureScenario::Never),
        "always" => Ok(ClosureScenario::Always),
        "periodic5" => Ok(ClosureScenario::FiveYearPeriodic),
        "bernoulli" => Ok(ClosureScenario::Bernoulli(0.2)),
        other => {
            if let Some(p) = other.strip_prefix("bernoulli:") {
                let p: f64 = p
                    .parse()
                    .map_err(|_| format!("bad closure probability in '{other}'"))?;
                if !(0.0..=1.0).contains(&p) {
                    return Err(format!("closure probability {p} not in [0,1]"));
                }
                Ok(ClosureScenario::Bernoulli(p))
            } else {
                Err(format!(
                    "unknown scenario '{other}' (expected never, bernoulli[:p], always, periodic5)"
                ))
            }
        }
    }
}
