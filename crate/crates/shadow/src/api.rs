//! Request and response bodies. Field names are part of the public API.

use dosing_core::cohort::DoseAction;
use dosing_core::shadow_metrics::{DoseGaussian, ScoreTable};
use dosing_core::study::{RecommendationRecord, StudyPoint};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientSummary {
    pub patient_id: String,
    pub length: usize,
    pub received_vasopressor: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub clinician_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub study_id: String,
    pub clinician_id: String,
    pub points: Vec<StudyPoint>,
    pub submitted: usize,
    pub next_point: Option<StudyPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowQuery {
    pub t: usize,
    pub session: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowStep {
    pub time_index: i64,
    /// Last measured value of each continuous feature, `null` before the
    /// first measurement.
    pub values: Vec<Option<f64>>,
    /// True where the feature was not measured at this step.
    pub imputed: Vec<bool>,
    pub binary: Vec<bool>,
    /// Recorded dose; present for steps before the requested hour only.
    pub action: Option<DoseAction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RevealedActions {
    pub record: DoseAction,
    pub discrete_baseline: Option<DoseAction>,
    pub pomdp: Option<DoseAction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowView {
    pub patient_id: String,
    pub time_index: usize,
    pub steps: Vec<WindowStep>,
    /// Present once this session has submitted the point.
    pub revealed: Option<RevealedActions>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubmitRequest {
    pub patient_id: String,
    pub time_index: usize,
    pub vasopressor: DoseGaussian,
    pub iv_fluid: DoseGaussian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmitResponse {
    pub record: RecommendationRecord,
    pub next_point: Option<StudyPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoresResponse {
    pub study_id: String,
    pub table: String,
    pub scores: ScoreTable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
}
