//! Trajectory data model: admissions made of hourly steps, terminal
//! rewards, and validation of the structural invariants.

mod io;
mod preprocess;
mod select;

pub use io::{export_csv, export_jsonl, ingest_cohort, ingest_reader, Format};
pub use preprocess::{
    fit_equalizer, impute_sample_and_hold, Equalized, Equalizer, FeatureMedians, Preprocessor,
    ProcessedAdmission,
};
pub use select::{
    select_validation_patients, split_cohort, vaso_to_norepi_equivalent, ConversionRule,
    ConversionTable, MIN_VALIDATION_STEPS,
};

use serde::{Deserialize, Serialize};

use crate::error::CohortError;

pub const SURVIVAL_REWARD: f64 = 10.0;
pub const DEATH_REWARD: f64 = -10.0;
pub const DEFAULT_CONTINUOUS: usize = 59;
pub const DEFAULT_BINARY: usize = 4;

/// Hourly dose: maximum vasopressor rate in µg/kg/min norepinephrine
/// equivalent and total intravenous fluid volume in mL over the hour.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DoseAction {
    pub vasopressor: f64,
    pub iv_fluid: f64,
}

impl DoseAction {
    pub fn new(vasopressor: f64, iv_fluid: f64) -> Self {
        Self { vasopressor, iv_fluid }
    }

    pub fn as_array(&self) -> [f64; 2] {
        [self.vasopressor, self.iv_fluid]
    }

    pub fn is_valid(&self) -> bool {
        self.vasopressor.is_finite()
            && self.iv_fluid.is_finite()
            && self.vasopressor >= 0.0
            && self.iv_fluid >= 0.0
    }
}

/// One hour of patient measurements. Missing continuous entries carry the
/// canonical value `0.0` and `missing[i] == true`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ObservationVector {
    pub continuous: Vec<f64>,
    pub binary: Vec<bool>,
    pub missing: Vec<bool>,
}

impl ObservationVector {
    pub fn complete(continuous: Vec<f64>, binary: Vec<bool>) -> Self {
        let missing = vec![false; continuous.len()];
        Self {
            continuous,
            binary,
            missing,
        }
    }

    pub fn is_complete(&self) -> bool {
        !self.missing.iter().any(|m| *m)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    /// Hours since the alignment origin.
    pub time_index: i64,
    pub observation: ObservationVector,
    pub action: DoseAction,
    pub reward: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Survived,
    Died,
}

impl Outcome {
    pub fn terminal_reward(self) -> f64 {
        match self {
            Outcome::Survived => SURVIVAL_REWARD,
            Outcome::Died => DEATH_REWARD,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Admission {
    pub id: String,
    pub outcome: Option<Outcome>,
    pub steps: Vec<Step>,
}

impl Admission {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn received_vasopressor(&self) -> bool {
        self.steps.iter().any(|s| s.action.vasopressor > 0.0)
    }

    /// Discounted return from step 0.
    pub fn discounted_return(&self, gamma: f64) -> f64 {
        self.steps
            .iter()
            .rev()
            .fold(0.0, |acc, s| s.reward + gamma * acc)
    }
}

/// Zeroes every intermediate reward and places ±10 on the last step.
pub fn assign_rewards(mut admission: Admission, outcome: Option<Outcome>) -> Result<Admission, CohortError> {
    let outcome = outcome.ok_or_else(|| CohortError::MissingOutcome(admission.id.clone()))?;
    admission.outcome = Some(outcome);
    let n = admission.steps.len();
    for (i, step) in admission.steps.iter_mut().enumerate() {
        step.reward = if i + 1 == n { outcome.terminal_reward() } else { 0.0 };
    }
    Ok(admission)
}

/// A collection of admissions sharing one observation schema.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Cohort {
    pub n_continuous: usize,
    pub n_binary: usize,
    pub admissions: Vec<Admission>,
}

impl Cohort {
    pub fn new(n_continuous: usize, n_binary: usize) -> Self {
        Self {
            n_continuous,
            n_binary,
            admissions: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.admissions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.admissions.is_empty()
    }

    pub fn total_steps(&self) -> usize {
        self.admissions.iter().map(Admission::len).sum()
    }

    pub fn find(&self, id: &str) -> Option<&Admission> {
        self.admissions.iter().find(|a| a.id == id)
    }

    /// Checks every structural invariant; `line` is reported for errors.
    pub fn validate_admission(&self, a: &Admission, line: usize) -> Result<(), CohortError> {
        let schema = |message: String| CohortError::Schema { line, message };
        if a.steps.is_empty() {
            return Err(schema(format!("admission {} has no steps", a.id)));
        }
        let outcome = a.outcome.ok_or_else(|| CohortError::MissingOutcome(a.id.clone()))?;
        let mut prev: Option<i64> = None;
        for (i, s) in a.steps.iter().enumerate() {
            if let Some(p) = prev {
                if s.time_index <= p {
                    return Err(CohortError::NonMonotoneTime {
                        line,
                        id: a.id.clone(),
                        prev: p,
                        t: s.time_index,
                    });
                }
            }
            prev = Some(s.time_index);
            let o = &s.observation;
            if o.continuous.len() != self.n_continuous || o.missing.len() != self.n_continuous {
                return Err(schema(format!(
                    "step {i}: expected {} continuous features and mask entries",
                    self.n_continuous
                )));
            }
            if o.binary.len() != self.n_binary {
                return Err(schema(format!("step {i}: expected {} binary features", self.n_binary)));
            }
            if o.continuous.iter().any(|v| !v.is_finite()) {
                return Err(schema(format!("step {i}: non-finite observation")));
            }
            if !s.action.is_valid() {
                return Err(schema(format!("step {i}: doses must be finite and non-negative")));
            }
            let expected = if i + 1 == a.steps.len() { outcome.terminal_reward() } else { 0.0 };
            if s.reward != expected {
                return Err(schema(format!("step {i}: reward {} should be {expected}", s.reward)));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CohortError> {
        for (i, a) in self.admissions.iter().enumerate() {
            self.validate_admission(a, i + 1)?;
        }
        Ok(())
    }
}
