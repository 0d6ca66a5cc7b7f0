//! Shadow-mode study data: which points clinicians see, the append-only
//! submission log, and turning a log into scorable evaluation points.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cohort::{select_validation_patients, Admission, Cohort, DoseAction, Preprocessor};
use crate::error::{Error, Result, ScoreError};
use crate::policy::PolicyValueNet;
use crate::shadow_metrics::{score_table, DoseGaussian, EvaluationPoint, Recommendation, ScoreTable, Source};
use crate::state_repr::StateModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudyConfig {
    pub study_id: String,
    pub n_patients: usize,
    pub points_per_patient: usize,
    pub seed: u64,
    /// Score both drugs with one 2-D density per clinician.
    pub joint: bool,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            study_id: "pilot".into(),
            n_patients: 10,
            points_per_patient: 3,
            seed: 7,
            joint: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StudyPoint {
    pub patient_id: String,
    pub time_index: usize,
}

/// Selected patients and the ordered points every session steps through.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyDesign {
    pub study_id: String,
    pub patients: Vec<Admission>,
    pub points: Vec<StudyPoint>,
}

impl StudyDesign {
    pub fn patient(&self, id: &str) -> Option<&Admission> {
        self.patients.iter().find(|a| a.id == id)
    }
}

/// Picks validation patients from `test` and `points_per_patient` distinct
/// hours in each, sorted by patient then hour.
pub fn design_study(test: &Cohort, config: &StudyConfig) -> Result<StudyDesign> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let patients = select_validation_patients(test, config.n_patients, &mut rng)?;
    let mut points = Vec::new();
    for a in &patients {
        let k = config.points_per_patient.min(a.len());
        let mut hours = index::sample(&mut rng, a.len(), k).into_vec();
        hours.sort_unstable();
        points.extend(hours.into_iter().map(|t| StudyPoint {
            patient_id: a.id.clone(),
            time_index: t,
        }));
    }
    Ok(StudyDesign {
        study_id: config.study_id.clone(),
        patients,
        points,
    })
}

/// One submitted recommendation. Records are never modified.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecommendationRecord {
    pub record_id: u64,
    pub session_id: String,
    pub clinician_id: String,
    pub patient_id: String,
    pub time_index: usize,
    pub vasopressor: DoseGaussian,
    pub iv_fluid: DoseGaussian,
    pub submitted_at_ms: u64,
}

/// One line of the study log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case", deny_unknown_fields)]
pub enum LogEntry {
    SessionCreated {
        session_id: String,
        study_id: String,
        clinician_id: String,
        created_at_ms: u64,
    },
    Recommendation(RecommendationRecord),
}

pub fn read_log<R: BufRead>(reader: R) -> Result<Vec<LogEntry>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Study(format!("log line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

pub fn write_log_entry<W: Write>(mut w: W, entry: &LogEntry) -> Result<()> {
    let line = serde_json::to_string(entry).map_err(|e| Error::Study(e.to_string()))?;
    writeln!(w, "{line}")?;
    Ok(())
}

/// Recommendations of every session that belongs to `study_id`, in log order.
pub fn study_records<'a>(entries: &'a [LogEntry], study_id: &str) -> Vec<&'a RecommendationRecord> {
    let sessions: Vec<&str> = entries
        .iter()
        .filter_map(|e| match e {
            LogEntry::SessionCreated {
                session_id, study_id: s, ..
            } if s == study_id => Some(session_id.as_str()),
            _ => None,
        })
        .collect();
    entries
        .iter()
        .filter_map(|e| match e {
            LogEntry::Recommendation(r) if sessions.contains(&r.session_id.as_str()) => Some(r),
            _ => None,
        })
        .collect()
}

/// Doses of an external discrete-action model, one per study point.
///
/// CSV with header `patient_id,time_index,vasopressor,iv_fluid`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BaselineActions(pub BTreeMap<StudyPoint, DoseAction>);

#[derive(Deserialize)]
struct BaselineRow {
    patient_id: String,
    time_index: usize,
    vasopressor: f64,
    iv_fluid: f64,
}

impl BaselineActions {
    pub fn from_csv<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, row) in csv::Reader::from_reader(reader).deserialize::<BaselineRow>().enumerate() {
            let r = row.map_err(|e| Error::Study(format!("baseline row {}: {e}", i + 1)))?;
            let a = DoseAction::new(r.vasopressor, r.iv_fluid);
            if !a.is_valid() {
                return Err(Error::Study(format!("baseline row {}: doses must be finite and non-negative", i + 1)));
            }
            map.insert(
                StudyPoint {
                    patient_id: r.patient_id,
                    time_index: r.time_index,
                },
                a,
            );
        }
        Ok(Self(map))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("patient_id,time_index,vasopressor,iv_fluid\n");
        for (p, a) in &self.0 {
            out.push_str(&format!("{},{},{},{}\n", p.patient_id, p.time_index, a.vasopressor, a.iv_fluid));
        }
        out
    }
}

/// The learned policy's dose at an hour of a recorded stay, using only
/// observations up to that hour and recorded doses before it.
#[derive(Debug, Clone)]
pub struct PomdpRecommender {
    pub preprocessor: Preprocessor,
    pub state: StateModel,
    pub net: PolicyValueNet,
}

impl PomdpRecommender {
    pub fn action(&self, adm: &Admission, t: usize) -> DoseAction {
        let processed = self.preprocessor.process(adm);
        let beliefs = self.state.encoder.encode_upto(&processed, t + 1);
        let s = beliefs.last().expect("t is within the stay");
        let m = self.net.evaluate(s).mean;
        let raw = self.preprocessor.decode_action([m[0].clamp(0.0, 1.0), m[1].clamp(0.0, 1.0)]);
        DoseAction::new(raw[0], raw[1])
    }
}

/// Groups a study's records by point and attaches the three actions under
/// test. Points appear in design order; points without records are
/// skipped.
pub fn evaluation_points(
    design: &StudyDesign,
    records: &[&RecommendationRecord],
    baseline: &BaselineActions,
    pomdp: &dyn Fn(&Admission, usize) -> DoseAction,
) -> Result<Vec<EvaluationPoint>> {
    let mut by_point: BTreeMap<StudyPoint, Vec<Recommendation>> = BTreeMap::new();
    for r in records {
        let key = StudyPoint {
            patient_id: r.patient_id.clone(),
            time_index: r.time_index,
        };
        if !design.points.contains(&key) {
            return Err(Error::Study(format!(
                "record {} refers to {}@{}, which is not a study point",
                r.record_id, r.patient_id, r.time_index
            )));
        }
        by_point.entry(key).or_default().push(Recommendation {
            clinician_id: r.clinician_id.clone(),
            vasopressor: r.vasopressor,
            iv_fluid: r.iv_fluid,
        });
    }
    let mut out = Vec::new();
    for p in &design.points {
        let Some(recs) = by_point.remove(p) else { continue };
        let adm = design.patient(&p.patient_id).expect("design points refer to design patients");
        let baseline_action = baseline.0.get(p).ok_or_else(|| ScoreError::MissingSource {
            point: format!("{}@{}", p.patient_id, p.time_index),
            source_label: Source::DiscreteBaseline.label().into(),
        })?;
        let mut actions = BTreeMap::new();
        actions.insert(Source::Record, adm.steps[p.time_index].action);
        actions.insert(Source::DiscreteBaseline, *baseline_action);
        actions.insert(Source::Pomdp, pomdp(adm, p.time_index));
        out.push(EvaluationPoint {
            patient_id: p.patient_id.clone(),
            time_index: p.time_index,
            recommendations: recs,
            actions,
        });
    }
    Ok(out)
}

/// Scores one study from the log.
pub fn score_study(
    design: &StudyDesign,
    entries: &[LogEntry],
    baseline: &BaselineActions,
    pomdp: &dyn Fn(&Admission, usize) -> DoseAction,
    joint: bool,
) -> Result<ScoreTable> {
    let records = study_records(entries, &design.study_id);
    let points = evaluation_points(design, &records, baseline, pomdp)?;
    Ok(score_table(&points, joint)?)
}

/// Per-point detail as a tab-separated table.
pub fn point_scores_tsv(table: &ScoreTable) -> String {
    let mut out = String::from("patient_id\ttime_index\ttarget\tsource\tp_score\tc_score\tn_recommenders\n");
    for p in &table.points {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            p.patient_id,
            p.time_index,
            p.target.label(),
            p.source.label(),
            p.p_score,
            p.c_score,
            p.n_recommenders
        ));
    }
    out
}
