//! Train/test splitting, shadow-study patient selection and vasopressor
//! dose conversion.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Admission, Cohort};
use crate::error::CohortError;

/// Minimum stay length (hourly steps) for a shadow-study patient.
pub const MIN_VALIDATION_STEPS: usize = 48;

/// Randomly holds out `n_test` admissions. Both halves keep the original
/// cohort order.
pub fn split_cohort<R: Rng + ?Sized>(cohort: &Cohort, n_test: usize, rng: &mut R) -> Result<(Cohort, Cohort), CohortError> {
    if n_test > 0 && n_test >= cohort.len() {
        return Err(CohortError::SplitTooLarge {
            n_test,
            size: cohort.len(),
        });
    }
    let mut idx: Vec<usize> = (0..cohort.len()).collect();
    idx.shuffle(rng);
    let mut is_test = vec![false; cohort.len()];
    for &i in &idx[..n_test] {
        is_test[i] = true;
    }
    let mut train = Cohort::new(cohort.n_continuous, cohort.n_binary);
    let mut test = Cohort::new(cohort.n_continuous, cohort.n_binary);
    for (a, t) in cohort.admissions.iter().zip(is_test) {
        if t {
            test.admissions.push(a.clone());
        } else {
            train.admissions.push(a.clone());
        }
    }
    Ok((train, test))
}

/// Draws `n` stays of at least [`MIN_VALIDATION_STEPS`] steps, at least
/// half of them (rounded up) vasopressor-exposed.
pub fn select_validation_patients<R: Rng + ?Sized>(
    cohort: &Cohort,
    n: usize,
    rng: &mut R,
) -> Result<Vec<Admission>, CohortError> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let infeasible = |reason: String| CohortError::Infeasible { requested: n, reason };
    let long: Vec<usize> = (0..cohort.len())
        .filter(|&i| cohort.admissions[i].len() >= MIN_VALIDATION_STEPS)
        .collect();
    if long.len() < n {
        return Err(infeasible(format!(
            "only {} stays reach {MIN_VALIDATION_STEPS} hours",
            long.len()
        )));
    }
    let (mut exposed, mut other): (Vec<usize>, Vec<usize>) =
        long.into_iter().partition(|&i| cohort.admissions[i].received_vasopressor());
    let need = n.div_ceil(2);
    if exposed.len() < need {
        return Err(infeasible(format!(
            "only {} long stays received vasopressors, need {need}",
            exposed.len()
        )));
    }
    exposed.shuffle(rng);
    let mut chosen: Vec<usize> = exposed.drain(..need).collect();
    other.extend(exposed);
    other.sort_unstable();
    other.shuffle(rng);
    chosen.extend(other.into_iter().take(n - need));
    chosen.sort_unstable();
    Ok(chosen.into_iter().map(|i| cohort.admissions[i].clone()).collect())
}

/// `equivalent = factor · dose + offset`
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConversionRule {
    pub factor: f64,
    #[serde(default)]
    pub offset: f64,
}

/// Drug name (lower case) to norepinephrine-equivalent rule.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConversionTable(pub BTreeMap<String, ConversionRule>);

impl ConversionTable {
    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }
}

pub fn vaso_to_norepi_equivalent(drug: &str, dose: f64, table: &ConversionTable) -> Result<f64, CohortError> {
    let rule = table
        .0
        .get(&drug.to_ascii_lowercase())
        .ok_or_else(|| CohortError::UnknownDrug(drug.to_string()))?;
    Ok(rule.factor * dose + rule.offset)
}
