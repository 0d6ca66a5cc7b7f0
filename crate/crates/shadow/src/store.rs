//! Session state rebuilt from, and persisted to, an append-only log.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use dosing_core::cohort::{Admission, DoseAction};
use dosing_core::shadow_metrics::{DoseGaussian, ScoreTable};
use dosing_core::study::{read_log, score_study, write_log_entry, BaselineActions, LogEntry, PomdpRecommender, RecommendationRecord, StudyDesign, StudyPoint};

use crate::api::{PatientSummary, RevealedActions, SessionView, SubmitRequest, WindowStep, WindowView};
use crate::error::ServiceError;

/// The study being served and the sources of the actions under test.
pub struct Study {
    pub design: StudyDesign,
    pub baseline: Option<BaselineActions>,
    pub recommender: Option<PomdpRecommender>,
    pub joint: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionState {
    pub session_id: String,
    pub study_id: String,
    pub clinician_id: String,
    /// Number of points already submitted.
    pub submitted: usize,
}

pub struct Store {
    pub study: Study,
    log_path: PathBuf,
    file: File,
    entries: Vec<LogEntry>,
    sessions: BTreeMap<String, SessionState>,
    next_record: u64,
}

fn valid_gaussian(g: &DoseGaussian) -> bool {
    g.mean.is_finite() && g.mean >= 0.0 && g.variance.is_finite() && g.variance > 0.0
}

impl Store {
    /// Opens `log_path`, replaying any existing entries.
    pub fn open(study: Study, log_path: impl AsRef<Path>) -> Result<Self, ServiceError> {
        let log_path = log_path.as_ref().to_path_buf();
        let existing = if log_path.exists() {
            read_log(BufReader::new(File::open(&log_path)?))?
        } else {
            Vec::new()
        };
        if let Some(parent) = log_path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(&log_path)?;
        let mut store = Self {
            study,
            log_path,
            file,
            entries: Vec::new(),
            sessions: BTreeMap::new(),
            next_record: 1,
        };
        for e in existing {
            store.apply(&e)?;
            store.entries.push(e);
        }
        Ok(store)
    }

    pub fn log_path(&self) -> &Path {
        &self.log_path
    }

    pub fn entries(&self) -> &[LogEntry] {
        &self.entries
    }

    pub fn sessions(&self) -> &BTreeMap<String, SessionState> {
        &self.sessions
    }

    fn points(&self) -> &[StudyPoint] {
        &self.study.design.points
    }

    /// Checks an entry against the current state and applies it.
    fn apply(&mut self, e: &LogEntry) -> Result<(), ServiceError> {
        match e {
            LogEntry::SessionCreated {
                session_id,
                study_id,
                clinician_id,
                ..
            } => {
                if self.sessions.contains_key(session_id) {
                    return Err(ServiceError::Corrupt(format!("session {session_id} created twice")));
                }
                self.sessions.insert(
                    session_id.clone(),
                    SessionState {
                        session_id: session_id.clone(),
                        study_id: study_id.clone(),
                        clinician_id: clinician_id.clone(),
                        submitted: 0,
                    },
                );
            }
            LogEntry::Recommendation(r) => {
                let n_points = self.points().len();
                let s = self
                    .sessions
                    .get(&r.session_id)
                    .ok_or_else(|| ServiceError::UnknownSession(r.session_id.clone()))?;
                let expected = self.points().get(s.submitted).cloned();
                let point = StudyPoint {
                    patient_id: r.patient_id.clone(),
                    time_index: r.time_index,
                };
                if !valid_gaussian(&r.vasopressor) || !valid_gaussian(&r.iv_fluid) {
                    return Err(ServiceError::InvalidDose);
                }
                if self.points()[..s.submitted.min(n_points)].contains(&point) {
                    return Err(ServiceError::Duplicate(point));
                }
                match expected {
                    None => return Err(ServiceError::SessionComplete(r.session_id.clone())),
                    Some(p) if p != point => return Err(ServiceError::OutOfOrder { expected: p, got: point }),
                    _ => {}
                }
                self.sessions.get_mut(&r.session_id).expect("checked").submitted += 1;
                self.next_record = self.next_record.max(r.record_id + 1);
            }
        }
        Ok(())
    }

    fn append(&mut self, e: LogEntry) -> Result<(), ServiceError> {
        self.apply(&e)?;
        let mut line = Vec::new();
        write_log_entry(&mut line, &e)?;
        self.file.write_all(&line)?;
        self.file.flush()?;
        self.entries.push(e);
        Ok(())
    }

    fn view(&self, s: &SessionState) -> SessionView {
        SessionView {
            session_id: s.session_id.clone(),
            study_id: s.study_id.clone(),
            clinician_id: s.clinician_id.clone(),
            points: self.points().to_vec(),
            submitted: s.submitted,
            next_point: self.points().get(s.submitted).cloned(),
        }
    }

    pub fn session(&self, id: &str) -> Result<SessionView, ServiceError> {
        let s = self.sessions.get(id).ok_or_else(|| ServiceError::UnknownSession(id.into()))?;
        Ok(self.view(s))
    }

    pub fn create_session(&mut self, clinician_id: &str, now_ms: u64) -> Result<SessionView, ServiceError> {
        if clinician_id.trim().is_empty() {
            return Err(ServiceError::BadRequest("clinician_id must not be empty".into()));
        }
        let session_id = format!("s{:04}", self.sessions.len() + 1);
        self.append(LogEntry::SessionCreated {
            session_id: session_id.clone(),
            study_id: self.study.design.study_id.clone(),
            clinician_id: clinician_id.into(),
            created_at_ms: now_ms,
        })?;
        self.session(&session_id)
    }

    pub fn submit(&mut self, session_id: &str, req: &SubmitRequest, now_ms: u64) -> Result<RecommendationRecord, ServiceError> {
        let s = self
            .sessions
            .get(session_id)
            .ok_or_else(|| ServiceError::UnknownSession(session_id.into()))?;
        let record = RecommendationRecord {
            record_id: self.next_record,
            session_id: session_id.into(),
            clinician_id: s.clinician_id.clone(),
            patient_id: req.patient_id.clone(),
            time_index: req.time_index,
            vasopressor: req.vasopressor,
            iv_fluid: req.iv_fluid,
            submitted_at_ms: now_ms,
        };
        self.append(LogEntry::Recommendation(record.clone()))?;
        Ok(record)
    }

    pub fn list_patients(&self) -> Vec<PatientSummary> {
        self.study
            .design
            .patients
            .iter()
            .map(|a| PatientSummary {
                patient_id: a.id.clone(),
                length: a.len(),
                received_vasopressor: a.received_vasopressor(),
            })
            .collect()
    }

    fn patient(&self, id: &str) -> Result<&Admission, ServiceError> {
        self.study.design.patient(id).ok_or_else(|| ServiceError::UnknownPatient(id.into()))
    }

    /// Steps `0..=t` of a patient with doses before `t` only. The session
    /// must have reached the point `(patient, t)`; once that point is
    /// submitted the actions under test at `t` are revealed too.
    pub fn window(&self, session_id: &str, patient_id: &str, t: usize) -> Result<WindowView, ServiceError> {
        let s = self
            .sessions
            .get(session_id)
            .ok_or_else(|| ServiceError::UnknownSession(session_id.into()))?;
        let adm = self.patient(patient_id)?;
        if t >= adm.len() {
            return Err(ServiceError::OutOfRange { t, length: adm.len() });
        }
        let point = StudyPoint {
            patient_id: patient_id.into(),
            time_index: t,
        };
        let pos = self.points().iter().position(|p| *p == point);
        let reached = matches!(pos, Some(i) if i <= s.submitted);
        if !reached {
            return Err(ServiceError::Blinded(point));
        }
        let submitted = matches!(pos, Some(i) if i < s.submitted);

        let n_cont = adm.steps[0].observation.continuous.len();
        let mut held: Vec<Option<f64>> = vec![None; n_cont];
        let steps = adm.steps[..=t]
            .iter()
            .enumerate()
            .map(|(k, step)| {
                let o = &step.observation;
                for (h, (v, m)) in held.iter_mut().zip(o.continuous.iter().zip(&o.missing)) {
                    if !m {
                        *h = Some(*v);
                    }
                }
                WindowStep {
                    time_index: step.time_index,
                    values: held.clone(),
                    imputed: o.missing.clone(),
                    binary: o.binary.clone(),
                    action: (k < t).then_some(step.action),
                }
            })
            .collect();
        let revealed = submitted.then(|| RevealedActions {
            record: adm.steps[t].action,
            discrete_baseline: self.study.baseline.as_ref().and_then(|b| b.0.get(&point).copied()),
            pomdp: self.study.recommender.as_ref().map(|r| r.action(adm, t)),
        });
        Ok(WindowView {
            patient_id: patient_id.into(),
            time_index: t,
            steps,
            revealed,
        })
    }

    pub fn scores(&self, study_id: &str) -> Result<ScoreTable, ServiceError> {
        if study_id != self.study.design.study_id {
            return Err(ServiceError::UnknownStudy(study_id.into()));
        }
        let baseline = self
            .study
            .baseline
            .as_ref()
            .ok_or(ServiceError::NotLoaded("discrete-baseline actions"))?;
        let rec = self
            .study
            .recommender
            .as_ref()
            .ok_or(ServiceError::NotLoaded("policy checkpoint"))?;
        let pomdp = |a: &Admission, t: usize| -> DoseAction { rec.action(a, t) };
        Ok(score_study(&self.study.design, &self.entries, baseline, &pomdp, self.study.joint)?)
    }
}
