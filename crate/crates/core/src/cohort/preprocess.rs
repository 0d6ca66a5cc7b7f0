//! Histogram equalization and sample-and-hold imputation.

use super::{Admission, Cohort, ObservationVector};
use crate::checkpoint::Checkpoint;
use crate::error::{CheckpointError, CohortError};
use crate::tensor::Tensor;

/// Empirical-CDF map per feature, built from sorted training references.
#[derive(Debug, Clone, PartialEq)]
pub struct Equalizer {
    references: Vec<Vec<f64>>,
}

/// An equalized value and whether the raw value fell outside the
/// reference range (and so was pinned to 0 or 1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Equalized {
    pub value: f64,
    pub clamped: bool,
}

impl Equalizer {
    /// Each reference sample must be non-empty; it is sorted here.
    pub fn from_samples(mut references: Vec<Vec<f64>>) -> Result<Self, CohortError> {
        for (i, r) in references.iter_mut().enumerate() {
            if r.is_empty() {
                return Err(CohortError::NeverObserved(i));
            }
            r.sort_by(f64::total_cmp);
        }
        Ok(Self { references })
    }

    pub fn n_features(&self) -> usize {
        self.references.len()
    }

    pub fn reference(&self, index: usize) -> &[f64] {
        &self.references[index]
    }

    fn refs(&self, index: usize) -> Result<&[f64], CohortError> {
        self.references.get(index).map(Vec::as_slice).ok_or(CohortError::UnknownFeature {
            index,
            count: self.references.len(),
        })
    }

    /// `(#{ref < v} + ½·#{ref = v}) / |ref|`
    pub fn apply(&self, index: usize, value: f64) -> Result<f64, CohortError> {
        Ok(self.apply_checked(index, value)?.value)
    }

    pub fn apply_checked(&self, index: usize, value: f64) -> Result<Equalized, CohortError> {
        let r = self.refs(index)?;
        let below = r.partition_point(|x| *x < value);
        let not_above = r.partition_point(|x| *x <= value);
        let equal = not_above - below;
        let u = (below as f64 + 0.5 * equal as f64) / r.len() as f64;
        Ok(Equalized {
            value: u.clamp(0.0, 1.0),
            clamped: value < r[0] || value > r[r.len() - 1],
        })
    }

    /// Approximate inverse: piecewise-linear through `(F(vⱼ), vⱼ)` at the
    /// distinct reference values, constant beyond the ends.
    pub fn invert(&self, index: usize, u: f64) -> Result<f64, CohortError> {
        let r = self.refs(index)?;
        let n = r.len() as f64;
        let cdf = |v: f64| {
            let below = r.partition_point(|x| *x < v);
            let not_above = r.partition_point(|x| *x <= v);
            (below, (below as f64 + 0.5 * (not_above - below) as f64) / n)
        };
        let p = r.partition_point(|x| cdf(*x).1 < u);
        if p == r.len() {
            return Ok(r[r.len() - 1]);
        }
        let v = r[p];
        let (below, f) = cdf(v);
        if below == 0 {
            return Ok(v);
        }
        let pv = r[below - 1];
        let pf = cdf(pv).1;
        Ok(pv + (v - pv) * (u - pf) / (f - pf))
    }
}

/// Fits the observation equalizer on every observed continuous value.
pub fn fit_equalizer(train: &Cohort) -> Result<Equalizer, CohortError> {
    let mut refs = vec![Vec::new(); train.n_continuous];
    for a in &train.admissions {
        for s in &a.steps {
            let o = &s.observation;
            for (i, (v, m)) in o.continuous.iter().zip(&o.missing).enumerate() {
                if !m {
                    refs[i].push(*v);
                }
            }
        }
    }
    Equalizer::from_samples(refs)
}

/// Per-feature medians of observed training values, used before the first
/// sample of a feature is available.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMedians(pub Vec<f64>);

impl FeatureMedians {
    pub fn fit(train: &Cohort) -> Result<Self, CohortError> {
        let eq = fit_equalizer(train)?;
        Ok(Self::from_equalizer(&eq))
    }

    fn from_equalizer(eq: &Equalizer) -> Self {
        Self(
            eq.references
                .iter()
                .map(|r| {
                    let n = r.len();
                    if n % 2 == 1 {
                        r[n / 2]
                    } else {
                        0.5 * (r[n / 2 - 1] + r[n / 2])
                    }
                })
                .collect(),
        )
    }
}

/// Carries the last observed value forward; leading gaps take the median.
pub fn impute_sample_and_hold(series: &[ObservationVector], medians: &FeatureMedians) -> Vec<ObservationVector> {
    let mut held = medians.0.clone();
    series
        .iter()
        .map(|o| {
            let continuous = o
                .continuous
                .iter()
                .zip(&o.missing)
                .enumerate()
                .map(|(i, (v, m))| {
                    if !m {
                        held[i] = *v;
                    }
                    held[i]
                })
                .collect::<Vec<_>>();
            ObservationVector {
                missing: vec![false; continuous.len()],
                continuous,
                binary: o.binary.clone(),
            }
        })
        .collect()
}

/// Network-ready view of one admission.
#[derive(Debug, Clone, PartialEq)]
pub struct ProcessedAdmission {
    pub id: String,
    /// Equalized continuous features followed by binary flags as 0/1.
    pub obs: Vec<Vec<f64>>,
    /// 1.0 where the continuous feature was actually measured, else 0.0.
    pub observed: Vec<Vec<f64>>,
    /// Equalized (vasopressor, fluid).
    pub actions: Vec<[f64; 2]>,
    pub raw_actions: Vec<[f64; 2]>,
    pub rewards: Vec<f64>,
}

impl ProcessedAdmission {
    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }
}

/// Everything fitted on the training split that turns raw admissions into
/// network inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessor {
    pub n_continuous: usize,
    pub n_binary: usize,
    pub medians: FeatureMedians,
    pub observations: Equalizer,
    pub actions: Equalizer,
}

impl Preprocessor {
    pub fn fit(train: &Cohort) -> Result<Self, CohortError> {
        if train.is_empty() {
            return Err(CohortError::Empty);
        }
        let observations = fit_equalizer(train)?;
        let mut act = vec![Vec::new(), Vec::new()];
        for s in train.admissions.iter().flat_map(|a| &a.steps) {
            act[0].push(s.action.vasopressor);
            act[1].push(s.action.iv_fluid);
        }
        Ok(Self {
            n_continuous: train.n_continuous,
            n_binary: train.n_binary,
            medians: FeatureMedians::from_equalizer(&observations),
            observations,
            actions: Equalizer::from_samples(act)?,
        })
    }

    pub fn obs_dim(&self) -> usize {
        self.n_continuous + self.n_binary
    }

    /// Equalizes an already-complete observation.
    pub fn encode_observation(&self, o: &ObservationVector) -> Vec<f64> {
        let mut out: Vec<f64> = o
            .continuous
            .iter()
            .enumerate()
            .map(|(i, v)| self.observations.apply(i, *v).expect("schema checked"))
            .collect();
        out.extend(o.binary.iter().map(|b| if *b { 1.0 } else { 0.0 }));
        out
    }

    /// Online variant of sample-and-hold: `held` starts as the medians and
    /// is updated in place.
    pub fn observe_online(&self, held: &mut [f64], o: &ObservationVector) -> Vec<f64> {
        for (i, (v, m)) in o.continuous.iter().zip(&o.missing).enumerate() {
            if !m {
                held[i] = *v;
            }
        }
        let complete = ObservationVector::complete(held.to_vec(), o.binary.clone());
        self.encode_observation(&complete)
    }

    pub fn encode_action(&self, raw: [f64; 2]) -> [f64; 2] {
        [
            self.actions.apply(0, raw[0]).expect("two action features"),
            self.actions.apply(1, raw[1]).expect("two action features"),
        ]
    }

    /// Maps an equalized action back to raw dose units, clamping to [0, 1].
    pub fn decode_action(&self, eq: [f64; 2]) -> [f64; 2] {
        [
            self.actions.invert(0, eq[0].clamp(0.0, 1.0)).expect("two action features"),
            self.actions.invert(1, eq[1].clamp(0.0, 1.0)).expect("two action features"),
        ]
    }

    pub fn process(&self, a: &Admission) -> ProcessedAdmission {
        let raw: Vec<ObservationVector> = a.steps.iter().map(|s| s.observation.clone()).collect();
        let imputed = impute_sample_and_hold(&raw, &self.medians);
        ProcessedAdmission {
            id: a.id.clone(),
            obs: imputed.iter().map(|o| self.encode_observation(o)).collect(),
            observed: raw
                .iter()
                .map(|o| o.missing.iter().map(|m| if *m { 0.0 } else { 1.0 }).collect())
                .collect(),
            actions: a.steps.iter().map(|s| self.encode_action(s.action.as_array())).collect(),
            raw_actions: a.steps.iter().map(|s| s.action.as_array()).collect(),
            rewards: a.steps.iter().map(|s| s.reward).collect(),
        }
    }

    pub fn process_cohort(&self, c: &Cohort) -> Vec<ProcessedAdmission> {
        c.admissions.iter().map(|a| self.process(a)).collect()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(serde_json::json!({
            "kind": "preprocessor",
            "n_continuous": self.n_continuous,
            "n_binary": self.n_binary,
        }));
        for (i, r) in self.observations.references.iter().enumerate() {
            ck.tensors.insert(format!("obs.{i}"), Tensor::vector(r.clone()));
        }
        for (i, r) in self.actions.references.iter().enumerate() {
            ck.tensors.insert(format!("act.{i}"), Tensor::vector(r.clone()));
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, CheckpointError> {
        let n_continuous: usize = ck.meta("n_continuous")?;
        let n_binary: usize = ck.meta("n_binary")?;
        let load = |prefix: &str, n: usize| -> Result<Equalizer, CheckpointError> {
            let refs = (0..n)
                .map(|i| ck.tensor(&format!("{prefix}.{i}")).map(|t| t.data().to_vec()))
                .collect::<Result<Vec<_>, _>>()?;
            Equalizer::from_samples(refs).map_err(|e| CheckpointError::Corrupt(e.to_string()))
        };
        let observations = load("obs", n_continuous)?;
        Ok(Self {
            n_continuous,
            n_binary,
            medians: FeatureMedians::from_equalizer(&observations),
            observations,
            actions: load("act", 2)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn eq(refs: Vec<f64>) -> Equalizer {
        Equalizer::from_samples(vec![refs]).unwrap()
    }

    #[test]
    fn equalizer_examples() {
        assert_eq!(eq(vec![1.0, 2.0, 3.0]).apply(0, -5.0).unwrap(), 0.0);
        assert_eq!(eq(vec![4.0]).apply(0, 4.0).unwrap(), 0.5);
        assert_eq!(eq(vec![1.0, 2.0, 3.0, 4.0]).apply(0, 2.5).unwrap(), 0.5);
        assert!(matches!(
            eq(vec![1.0]).apply(3, 1.0),
            Err(CohortError::UnknownFeature { index: 3, count: 1 })
        ));
        let e = eq(vec![1.0, 2.0]).apply_checked(0, 9.0).unwrap();
        assert_eq!(e, Equalized { value: 1.0, clamped: true });
    }

    #[test]
    fn invert_recovers_reference_values() {
        let e = eq(vec![0.0, 0.0, 1.0, 3.0, 3.0, 7.0]);
        for v in [0.0, 1.0, 3.0, 7.0] {
            let u = e.apply(0, v).unwrap();
            assert!((e.invert(0, u).unwrap() - v).abs() < 1e-12);
        }
        assert_eq!(e.invert(0, 0.0).unwrap(), 0.0);
        assert_eq!(e.invert(0, 1.0).unwrap(), 7.0);
    }

    /// Walks the distinct reference values in order.
    fn invert_by_scan(r: &[f64], u: f64) -> f64 {
        let n = r.len() as f64;
        let mut prev: Option<(f64, f64)> = None;
        let mut i = 0;
        while i < r.len() {
            let v = r[i];
            let mut j = i;
            while j < r.len() && r[j] == v {
                j += 1;
            }
            let f = (i as f64 + 0.5 * (j - i) as f64) / n;
            if u <= f {
                return match prev {
                    None => v,
                    Some((pf, pv)) => pv + (v - pv) * (u - pf) / (f - pf),
                };
            }
            prev = Some((f, v));
            i = j;
        }
        r[r.len() - 1]
    }

    proptest! {
        #[test]
        fn invert_matches_scan(refs in prop::collection::vec((0..12i32).prop_map(|k| k as f64 * 0.5), 1..40),
                               u in 0.0f64..=1.0) {
            let e = eq(refs);
            prop_assert_eq!(e.invert(0, u).unwrap(), invert_by_scan(e.reference(0), u));
        }

        #[test]
        fn equalizer_monotone_and_bounded(refs in prop::collection::vec(-10.0f64..10.0, 1..30),
                                          a in -20.0f64..20.0, b in -20.0f64..20.0) {
            let e = eq(refs);
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let (ul, uh) = (e.apply(0, lo).unwrap(), e.apply(0, hi).unwrap());
            prop_assert!((0.0..=1.0).contains(&ul) && (0.0..=1.0).contains(&uh));
            prop_assert!(ul <= uh);
        }

        #[test]
        fn imputation_complete_and_idempotent(vals in prop::collection::vec((0.0f64..5.0, any::<bool>()), 1..20)) {
            let series: Vec<ObservationVector> = vals.iter().map(|(v, m)| ObservationVector {
                continuous: vec![if *m { 0.0 } else { *v }],
                binary: vec![],
                missing: vec![*m],
            }).collect();
            let med = FeatureMedians(vec![2.0]);
            let once = impute_sample_and_hold(&series, &med);
            prop_assert!(once.iter().all(ObservationVector::is_complete));
            let twice = impute_sample_and_hold(&once, &med);
            prop_assert_eq!(once, twice);
        }
    }

    fn series(vals: &[Option<f64>]) -> Vec<ObservationVector> {
        vals.iter()
            .map(|v| ObservationVector {
                continuous: vec![v.unwrap_or(0.0)],
                binary: vec![],
                missing: vec![v.is_none()],
            })
            .collect()
    }

    #[test]
    fn hold_examples() {
        let med = FeatureMedians(vec![2.0]);
        let out = impute_sample_and_hold(&series(&[Some(5.0), None, None, Some(7.0)]), &med);
        let vals: Vec<f64> = out.iter().map(|o| o.continuous[0]).collect();
        assert_eq!(vals, vec![5.0, 5.0, 5.0, 7.0]);
        let out = impute_sample_and_hold(&series(&[None, Some(3.0)]), &med);
        let vals: Vec<f64> = out.iter().map(|o| o.continuous[0]).collect();
        assert_eq!(vals, vec![2.0, 3.0]);
        let full = series(&[Some(1.0), Some(4.0)]);
        assert_eq!(impute_sample_and_hold(&full, &med), full);
    }

    #[test]
    fn medians_come_from_training_split() {
        use crate::cohort::tests::toy_admission;
        use crate::cohort::Outcome;
        let mut c = Cohort::new(2, 1);
        // feature 0 takes values 0, 1, 2 → median 1
        c.admissions.push(toy_admission("a", 3, Outcome::Survived));
        let m = FeatureMedians::fit(&c).unwrap();
        assert_eq!(m.0, vec![1.0, 1.0]);
        let leading = impute_sample_and_hold(&series(&[None, Some(3.0)]), &FeatureMedians(vec![m.0[0]]));
        assert_eq!(leading[0].continuous[0], 1.0);

        for s in &mut c.admissions[0].steps {
            s.observation.missing[1] = true;
        }
        assert!(matches!(FeatureMedians::fit(&c), Err(CohortError::NeverObserved(1))));
    }

    #[test]
    fn preprocessor_checkpoint_round_trip() {
        use crate::cohort::tests::toy_admission;
        use crate::cohort::Outcome;
        let mut c = Cohort::new(2, 1);
        c.admissions.push(toy_admission("a", 4, Outcome::Survived));
        let p = Preprocessor::fit(&c).unwrap();
        let back = Preprocessor::from_checkpoint(&p.to_checkpoint()).unwrap();
        assert_eq!(p, back);
        let proc = p.process(&c.admissions[0]);
        assert_eq!(proc.obs[0].len(), 3);
        assert!(proc.obs.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
    }
}
