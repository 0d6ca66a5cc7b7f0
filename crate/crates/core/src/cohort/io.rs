//! Trajectory file ingestion and export.
//!
//! JSON-lines form: one admission per line, see `docs/trajectory-schema.md`.
//! Delimited form: one step per row with a header naming
//! `id,outcome,t,vaso,fluid,obs_cont_<i>...,obs_bin_<j>...,obs_mask_<i>...`.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{assign_rewards, Admission, Cohort, DoseAction, ObservationVector, Outcome, Step};
use crate::error::CohortError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Jsonl,
    Csv,
}

impl Format {
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") | Some("tsv") => Format::Csv,
            _ => Format::Jsonl,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdmissionRecord {
    id: String,
    outcome: Option<Outcome>,
    steps: Vec<StepRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StepRecord {
    t: i64,
    obs_cont: Vec<Option<f64>>,
    obs_bin: Vec<u8>,
    obs_mask: Vec<u8>,
    vaso: f64,
    fluid: f64,
}

fn schema_err(line: usize, message: impl Into<String>) -> CohortError {
    CohortError::Schema {
        line,
        message: message.into(),
    }
}

fn build_step(
    line: usize,
    t: i64,
    cont: Vec<Option<f64>>,
    bin: Vec<u8>,
    mask: Vec<u8>,
    vaso: f64,
    fluid: f64,
) -> Result<Step, CohortError> {
    if mask.len() != cont.len() {
        return Err(schema_err(line, "obs_mask length differs from obs_cont"));
    }
    let mut continuous = Vec::with_capacity(cont.len());
    let mut missing = Vec::with_capacity(cont.len());
    for (v, m) in cont.into_iter().zip(&mask) {
        match (v, m) {
            (_, 1) => {
                continuous.push(0.0);
                missing.push(true);
            }
            (Some(x), 0) => {
                continuous.push(x);
                missing.push(false);
            }
            (None, 0) => return Err(schema_err(line, "null value for an observed feature")),
            (_, m) => return Err(schema_err(line, format!("mask value {m} is not 0 or 1"))),
        }
    }
    let binary = bin
        .into_iter()
        .map(|b| match b {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(schema_err(line, format!("binary value {other} is not 0 or 1"))),
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Step {
        time_index: t,
        observation: ObservationVector {
            continuous,
            binary,
            missing,
        },
        action: DoseAction::new(vaso, fluid),
        reward: 0.0,
    })
}

fn finish(cohort: &mut Cohort, admission: Admission, line: usize) -> Result<(), CohortError> {
    if cohort.admissions.is_empty() {
        if let Some(first) = admission.steps.first() {
            cohort.n_continuous = first.observation.continuous.len();
            cohort.n_binary = first.observation.binary.len();
        }
    }
    let outcome = admission.outcome;
    let admission = assign_rewards(admission, outcome)?;
    cohort.validate_admission(&admission, line)?;
    cohort.admissions.push(admission);
    Ok(())
}

fn ingest_jsonl<R: BufRead>(reader: R) -> Result<Cohort, CohortError> {
    let mut cohort = Cohort::default();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: AdmissionRecord = serde_json::from_str(&line).map_err(|e| CohortError::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        let steps = rec
            .steps
            .into_iter()
            .map(|s| build_step(lineno, s.t, s.obs_cont, s.obs_bin, s.obs_mask, s.vaso, s.fluid))
            .collect::<Result<Vec<_>, _>>()?;
        finish(
            &mut cohort,
            Admission {
                id: rec.id,
                outcome: rec.outcome,
                steps,
            },
            lineno,
        )?;
    }
    Ok(cohort)
}

fn ingest_csv<R: std::io::Read>(reader: R) -> Result<Cohort, CohortError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| CohortError::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (Some(id_c), Some(out_c), Some(t_c), Some(v_c), Some(f_c)) =
        (col("id"), col("outcome"), col("t"), col("vaso"), col("fluid"))
    else {
        if headers.is_empty() {
            return Ok(Cohort::default());
        }
        return Err(schema_err(1, "header must contain id, outcome, t, vaso, fluid"));
    };
    let indexed = |prefix: &str| -> Vec<usize> {
        (0..)
            .map_while(|i| col(&format!("{prefix}{i}")))
            .collect()
    };
    let cont_c = indexed("obs_cont_");
    let bin_c = indexed("obs_bin_");
    let mask_c = indexed("obs_mask_");

    let mut cohort = Cohort::default();
    let mut current: Option<(Admission, usize)> = None;
    for (i, rec) in rdr.records().enumerate() {
        let lineno = i + 2;
        let rec = rec.map_err(|e| CohortError::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        let parse_f = |c: usize| -> Result<f64, CohortError> {
            rec[c].trim().parse::<f64>().map_err(|e| CohortError::Parse {
                line: lineno,
                message: format!("column {}: {e}", &headers[c]),
            })
        };
        let id = rec[id_c].to_string();
        let outcome = match rec[out_c].trim() {
            "" => None,
            "survived" => Some(Outcome::Survived),
            "died" => Some(Outcome::Died),
            other => return Err(schema_err(lineno, format!("unknown outcome {other}"))),
        };
        let t = rec[t_c].trim().parse::<i64>().map_err(|e| CohortError::Parse {
            line: lineno,
            message: format!("column t: {e}"),
        })?;
        let cont = cont_c
            .iter()
            .map(|&c| if rec[c].trim().is_empty() { Ok(None) } else { parse_f(c).map(Some) })
            .collect::<Result<Vec<_>, _>>()?;
        let as_u8 = |c: usize| -> Result<u8, CohortError> {
            rec[c].trim().parse::<u8>().map_err(|e| CohortError::Parse {
                line: lineno,
                message: format!("column {}: {e}", &headers[c]),
            })
        };
        let bin = bin_c.iter().map(|&c| as_u8(c)).collect::<Result<Vec<_>, _>>()?;
        let mask = mask_c.iter().map(|&c| as_u8(c)).collect::<Result<Vec<_>, _>>()?;
        let step = build_step(lineno, t, cont, bin, mask, parse_f(v_c)?, parse_f(f_c)?)?;

        match current.as_mut() {
            Some((a, _)) if a.id == id => {
                if a.outcome != outcome {
                    return Err(schema_err(lineno, "outcome changes within an admission"));
                }
                a.steps.push(step);
            }
            _ => {
                if let Some((done, start)) = current.take() {
                    finish(&mut cohort, done, start)?;
                }
                current = Some((
                    Admission {
                        id,
                        outcome,
                        steps: vec![step],
                    },
                    lineno,
                ));
            }
        }
    }
    if let Some((done, start)) = current {
        finish(&mut cohort, done, start)?;
    }
    Ok(cohort)
}

pub fn ingest_reader<R: BufRead>(reader: R, format: Format) -> Result<Cohort, CohortError> {
    match format {
        Format::Jsonl => ingest_jsonl(reader),
        Format::Csv => ingest_csv(reader),
    }
}

/// Reads and validates a trajectory file; rewards are assigned from outcomes.
pub fn ingest_cohort(path: impl AsRef<Path>, format: Option<Format>) -> Result<Cohort, CohortError> {
    let path = path.as_ref();
    let format = format.unwrap_or_else(|| Format::from_path(path));
    let f = std::fs::File::open(path)?;
    ingest_reader(std::io::BufReader::new(f), format)
}

fn step_record(s: &Step) -> StepRecord {
    let o = &s.observation;
    StepRecord {
        t: s.time_index,
        obs_cont: o
            .continuous
            .iter()
            .zip(&o.missing)
            .map(|(v, m)| if *m { None } else { Some(*v) })
            .collect(),
        obs_bin: o.binary.iter().map(|b| *b as u8).collect(),
        obs_mask: o.missing.iter().map(|m| *m as u8).collect(),
        vaso: s.action.vasopressor,
        fluid: s.action.iv_fluid,
    }
}

pub fn export_jsonl<W: Write>(cohort: &Cohort, mut w: W) -> Result<(), CohortError> {
    for a in &cohort.admissions {
        let rec = AdmissionRecord {
            id: a.id.clone(),
            outcome: a.outcome,
            steps: a.steps.iter().map(step_record).collect(),
        };
        let line = serde_json::to_string(&rec).map_err(|e| CohortError::Parse {
            line: 0,
            message: e.to_string(),
        })?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn export_csv<W: Write>(cohort: &Cohort, w: W) -> Result<(), CohortError> {
    let mut wr = csv::Writer::from_writer(w);
    let mut header: Vec<String> = ["id", "outcome", "t", "vaso", "fluid"].iter().map(|s| s.to_string()).collect();
    header.extend((0..cohort.n_continuous).map(|i| format!("obs_cont_{i}")));
    header.extend((0..cohort.n_binary).map(|i| format!("obs_bin_{i}")));
    header.extend((0..cohort.n_continuous).map(|i| format!("obs_mask_{i}")));
    let to_err = |e: csv::Error| CohortError::Parse {
        line: 0,
        message: e.to_string(),
    };
    wr.write_record(&header).map_err(to_err)?;
    for a in &cohort.admissions {
        let outcome = match a.outcome {
            Some(Outcome::Survived) => "survived",
            Some(Outcome::Died) => "died",
            None => "",
        };
        for s in &a.steps {
            let o = &s.observation;
            let mut row = vec![
                a.id.clone(),
                outcome.to_string(),
                s.time_index.to_string(),
                s.action.vasopressor.to_string(),
                s.action.iv_fluid.to_string(),
            ];
            row.extend(
                o.continuous
                    .iter()
                    .zip(&o.missing)
                    .map(|(v, m)| if *m { String::new() } else { v.to_string() }),
            );
            row.extend(o.binary.iter().map(|b| (*b as u8).to_string()));
            row.extend(o.missing.iter().map(|m| (*m as u8).to_string()));
            wr.write_record(&row).map_err(to_err)?;
        }
    }
    wr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::tests::toy_admission;

    fn sample_cohort() -> Cohort {
        let mut c = Cohort::new(2, 1);
        let mut a = toy_admission("a1", 2, Outcome::Survived);
        a.steps[1].observation.missing[0] = true;
        a.steps[1].observation.continuous[0] = 0.0;
        c.admissions.push(a);
        c.admissions.push(toy_admission("a2", 3, Outcome::Died));
        c
    }

    #[test]
    fn empty_input_gives_empty_cohort() {
        let c = ingest_reader(&b""[..], Format::Jsonl).unwrap();
        assert!(c.is_empty());
        let c = ingest_reader(&b""[..], Format::Csv).unwrap();
        assert!(c.is_empty());
    }

    #[test]
    fn single_record_round_trip() {
        let line = r#"{"id":"p","outcome":"died","steps":[{"t":0,"obs_cont":[1.5,null],"obs_bin":[1],"obs_mask":[0,1],"vaso":0.0,"fluid":20.0},{"t":1,"obs_cont":[1.0,2.0],"obs_bin":[0],"obs_mask":[0,0],"vaso":0.1,"fluid":0.0}]}"#;
        let c = ingest_reader(line.as_bytes(), Format::Jsonl).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c.admissions[0].len(), 2);
        assert_eq!(c.admissions[0].steps[1].reward, -10.0);
        assert!(c.admissions[0].steps[0].observation.missing[1]);
        let mut out = Vec::new();
        export_jsonl(&c, &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap().trim(), line);
    }

    #[test]
    fn both_formats_round_trip() {
        let c = sample_cohort();
        let mut buf = Vec::new();
        export_jsonl(&c, &mut buf).unwrap();
        assert_eq!(ingest_reader(buf.as_slice(), Format::Jsonl).unwrap(), c);
        let mut buf = Vec::new();
        export_csv(&c, &mut buf).unwrap();
        assert_eq!(ingest_reader(buf.as_slice(), Format::Csv).unwrap(), c);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let good = r#"{"id":"p","outcome":"died","steps":[{"t":0,"obs_cont":[1.5],"obs_bin":[],"obs_mask":[0],"vaso":0.0,"fluid":20.0}]}"#;
        let text = format!("{good}\n{{not json\n");
        match ingest_reader(text.as_bytes(), Format::Jsonl) {
            Err(CohortError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        let bad_time = r#"{"id":"q","outcome":"died","steps":[{"t":3,"obs_cont":[1.5],"obs_bin":[],"obs_mask":[0],"vaso":0.0,"fluid":20.0},{"t":3,"obs_cont":[1.5],"obs_bin":[],"obs_mask":[0],"vaso":0.0,"fluid":20.0}]}"#;
        let text = format!("{good}\n\n{bad_time}\n");
        match ingest_reader(text.as_bytes(), Format::Jsonl) {
            Err(CohortError::NonMonotoneTime { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        let no_outcome = r#"{"id":"p","outcome":null,"steps":[{"t":0,"obs_cont":[1.5],"obs_bin":[],"obs_mask":[0],"vaso":0.0,"fluid":20.0}]}"#;
        assert!(matches!(
            ingest_reader(no_outcome.as_bytes(), Format::Jsonl),
            Err(CohortError::MissingOutcome(_))
        ));
        let negative = good.replace("\"vaso\":0.0", "\"vaso\":-1.0");
        assert!(matches!(
            ingest_reader(negative.as_bytes(), Format::Jsonl),
            Err(CohortError::Schema { line: 1, .. })
        ));
    }
}
