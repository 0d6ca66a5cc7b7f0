//! Agreement scores between an action and a set of clinician dose
//! recommendations, each a per-drug Gaussian in raw dose units.
//!
//! The P-score is the mean recommendation density at the action. The
//! C-score is the share of clinicians whose density at the action reaches
//! [`C_THRESHOLD`]. The zero count is the share of evaluation points whose
//! C-score is zero.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::cohort::DoseAction;
use crate::dist::normal_pdf;
use crate::error::ScoreError;

/// A density at or above this value counts as acceptable.
pub const C_THRESHOLD: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DoseGaussian {
    pub mean: f64,
    pub variance: f64,
}

impl DoseGaussian {
    pub fn density(&self, x: f64) -> Result<f64, ScoreError> {
        if self.variance.is_nan() || self.variance <= 0.0 {
            return Err(ScoreError::NonPositiveVariance(self.variance));
        }
        Ok(normal_pdf(x, self.mean, self.variance))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Recommendation {
    pub clinician_id: String,
    pub vasopressor: DoseGaussian,
    pub iv_fluid: DoseGaussian,
}

impl Recommendation {
    pub fn for_drug(&self, drug: Drug) -> DoseGaussian {
        match drug {
            Drug::IvFluid => self.iv_fluid,
            Drug::Vasopressor => self.vasopressor,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Drug {
    IvFluid,
    Vasopressor,
}

impl Drug {
    pub const ALL: [Drug; 2] = [Drug::IvFluid, Drug::Vasopressor];

    pub fn label(self) -> &'static str {
        match self {
            Drug::IvFluid => "IV Fluids",
            Drug::Vasopressor => "Vasopressors",
        }
    }

    pub fn dose(self, a: &DoseAction) -> f64 {
        match self {
            Drug::IvFluid => a.iv_fluid,
            Drug::Vasopressor => a.vasopressor,
        }
    }
}

/// Where an action under test comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    /// The dose in the patient record.
    Record,
    /// An external discrete-action model.
    DiscreteBaseline,
    /// The learned policy.
    Pomdp,
}

impl Source {
    pub const ALL: [Source; 3] = [Source::Record, Source::DiscreteBaseline, Source::Pomdp];

    pub fn label(self) -> &'static str {
        match self {
            Source::Record => "MIMIC",
            Source::DiscreteBaseline => "MDP",
            Source::Pomdp => "POMDP",
        }
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

fn densities(a: f64, recs: &[DoseGaussian]) -> Result<Vec<f64>, ScoreError> {
    if recs.is_empty() {
        return Err(ScoreError::NoRecommenders);
    }
    recs.iter().map(|r| r.density(a)).collect()
}

/// `(1/N) Σ N(a; μᵢ, σᵢ²)`
pub fn p_score(a: f64, recs: &[DoseGaussian]) -> Result<f64, ScoreError> {
    let d = densities(a, recs)?;
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

/// `(1/N) Σ 1[N(a; μᵢ, σᵢ²) ≥ 0.01]`
pub fn c_score(a: f64, recs: &[DoseGaussian]) -> Result<f64, ScoreError> {
    let d = densities(a, recs)?;
    Ok(d.iter().filter(|&&p| p >= C_THRESHOLD).count() as f64 / d.len() as f64)
}

fn joint_densities(a: &DoseAction, recs: &[Recommendation]) -> Result<Vec<f64>, ScoreError> {
    if recs.is_empty() {
        return Err(ScoreError::NoRecommenders);
    }
    recs.iter()
        .map(|r| Ok(r.vasopressor.density(a.vasopressor)? * r.iv_fluid.density(a.iv_fluid)?))
        .collect()
}

/// P-score with a diagonal 2-D Gaussian per clinician.
pub fn p_score_joint(a: &DoseAction, recs: &[Recommendation]) -> Result<f64, ScoreError> {
    let d = joint_densities(a, recs)?;
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

/// C-score with a diagonal 2-D Gaussian per clinician.
pub fn c_score_joint(a: &DoseAction, recs: &[Recommendation]) -> Result<f64, ScoreError> {
    let d = joint_densities(a, recs)?;
    Ok(d.iter().filter(|&&p| p >= C_THRESHOLD).count() as f64 / d.len() as f64)
}

/// Share of C-scores equal to zero.
pub fn zero_count_rate(c_scores: &[f64]) -> Result<f64, ScoreError> {
    if c_scores.is_empty() {
        return Err(ScoreError::NoPoints);
    }
    Ok(c_scores.iter().filter(|&&c| c == 0.0).count() as f64 / c_scores.len() as f64)
}

/// One `(patient, hour)` with every clinician's recommendation and the
/// actions under test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationPoint {
    pub patient_id: String,
    pub time_index: usize,
    pub recommendations: Vec<Recommendation>,
    pub actions: BTreeMap<Source, DoseAction>,
}

/// What the rows of the table are keyed by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreTarget {
    Drug(Drug),
    /// Both drugs scored together.
    Joint,
}

impl ScoreTarget {
    pub fn label(self) -> &'static str {
        match self {
            ScoreTarget::Drug(d) => d.label(),
            ScoreTarget::Joint => "Joint",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreCell {
    pub p_score: f64,
    pub c_score: f64,
    pub zero_count: f64,
    pub n_points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointScore {
    pub patient_id: String,
    pub time_index: usize,
    pub target: ScoreTarget,
    pub source: Source,
    pub p_score: f64,
    pub c_score: f64,
    pub n_recommenders: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub cells: Vec<(ScoreTarget, Source, ScoreCell)>,
    pub points: Vec<PointScore>,
}

impl ScoreTable {
    pub fn cell(&self, target: ScoreTarget, source: Source) -> Option<&ScoreCell> {
        self.cells.iter().find(|(t, s, _)| *t == target && *s == source).map(|c| &c.2)
    }

    fn targets(&self) -> Vec<ScoreTarget> {
        let mut t: Vec<ScoreTarget> = self.cells.iter().map(|c| c.0).collect();
        t.dedup();
        t
    }

    /// Tab-separated table: `ACTION SCORE MIMIC MDP POMDP`, three rows per
    /// drug (`P-Score`, `C-Score`, `Zero Count`), values to three decimals.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("ACTION\tSCORE\tMIMIC\tMDP\tPOMDP\n");
        for target in self.targets() {
            for (name, get) in [
                ("P-Score", (|c: &ScoreCell| c.p_score) as fn(&ScoreCell) -> f64),
                ("C-Score", |c| c.c_score),
                ("Zero Count", |c| c.zero_count),
            ] {
                out.push_str(target.label());
                out.push('\t');
                out.push_str(name);
                for s in Source::ALL {
                    let v = self.cell(target, s).map(get).unwrap_or(f64::NAN);
                    out.push_str(&format!("\t{v:.3}"));
                }
                out.push('\n');
            }
        }
        out
    }
}

/// Averages P and C over points and computes zero counts, for every drug
/// (or the joint target) and source. Every point must carry all three
/// sources and at least one recommendation.
pub fn score_table(points: &[EvaluationPoint], joint: bool) -> Result<ScoreTable, ScoreError> {
    if points.is_empty() {
        return Err(ScoreError::NoPoints);
    }
    let targets: Vec<ScoreTarget> = if joint {
        vec![ScoreTarget::Joint]
    } else {
        Drug::ALL.iter().map(|d| ScoreTarget::Drug(*d)).collect()
    };
    let mut detail = Vec::new();
    let mut cells = Vec::new();
    for &target in &targets {
        for source in Source::ALL {
            let mut ps = Vec::with_capacity(points.len());
            let mut cs = Vec::with_capacity(points.len());
            for pt in points {
                let a = pt.actions.get(&source).ok_or_else(|| ScoreError::MissingSource {
                    point: format!("{}@{}", pt.patient_id, pt.time_index),
                    source_label: source.label().to_string(),
                })?;
                let (p, c) = match target {
                    ScoreTarget::Drug(d) => {
                        let recs: Vec<DoseGaussian> = pt.recommendations.iter().map(|r| r.for_drug(d)).collect();
                        (p_score(d.dose(a), &recs)?, c_score(d.dose(a), &recs)?)
                    }
                    ScoreTarget::Joint => (p_score_joint(a, &pt.recommendations)?, c_score_joint(a, &pt.recommendations)?),
                };
                ps.push(p);
                cs.push(c);
                detail.push(PointScore {
                    patient_id: pt.patient_id.clone(),
                    time_index: pt.time_index,
                    target,
                    source,
                    p_score: p,
                    c_score: c,
                    n_recommenders: pt.recommendations.len(),
                });
            }
            let n = ps.len() as f64;
            cells.push((
                target,
                source,
                ScoreCell {
                    p_score: ps.iter().sum::<f64>() / n,
                    c_score: cs.iter().sum::<f64>() / n,
                    zero_count: zero_count_rate(&cs)?,
                    n_points: ps.len(),
                },
            ));
        }
    }
    Ok(ScoreTable { cells, points: detail })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn g(mean: f64, variance: f64) -> DoseGaussian {
        DoseGaussian { mean, variance }
    }

    /// Variance that puts density `d` at distance `x` from the mean is not
    /// closed-form, so pick σ = 1 and solve for the distance instead.
    fn offset_for_density(d: f64) -> f64 {
        (-2.0 * (d * (2.0 * std::f64::consts::PI).sqrt()).ln()).sqrt()
    }

    #[test]
    fn p_score_examples() {
        let peak = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
        assert!((p_score(3.0, &[g(3.0, 1.0)]).unwrap() - peak).abs() < 1e-15);
        assert_eq!(
            p_score(1.2, &[g(1.0, 0.5), g(1.0, 0.5)]).unwrap(),
            p_score(1.2, &[g(1.0, 0.5)]).unwrap()
        );
        let recs = [g(0.0, 1.0), g(2.0, 4.0), g(-1.0, 0.25)];
        let direct: f64 = recs
            .iter()
            .map(|r| (-(0.7 - r.mean).powi(2) / (2.0 * r.variance)).exp() / (2.0 * std::f64::consts::PI * r.variance).sqrt())
            .sum::<f64>()
            / 3.0;
        assert!((p_score(0.7, &recs).unwrap() - direct).abs() < 1e-12);
        assert_eq!(p_score(0.0, &[]), Err(ScoreError::NoRecommenders));
        assert_eq!(p_score(0.0, &[g(0.0, 0.0)]), Err(ScoreError::NonPositiveVariance(0.0)));
    }

    #[test]
    fn c_score_examples() {
        assert_eq!(c_score(5.0, &[g(5.0, 1.0)]).unwrap(), 1.0);
        // density exactly at the threshold: σ² chosen so the peak is 0.01
        let var = 1.0 / (2.0 * std::f64::consts::PI * C_THRESHOLD * C_THRESHOLD);
        let d = g(0.0, var).density(0.0).unwrap();
        assert!(d >= C_THRESHOLD, "{d}");
        assert_eq!(c_score(0.0, &[g(0.0, var)]).unwrap(), 1.0);
        let recs = [
            g(offset_for_density(0.2), 1.0),
            g(offset_for_density(0.005), 1.0),
            g(offset_for_density(0.011), 1.0),
        ];
        assert!((c_score(0.0, &recs).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn zero_count_examples() {
        assert_eq!(zero_count_rate(&[0.5, 1.0, 1.0 / 3.0]).unwrap(), 0.0);
        assert_eq!(zero_count_rate(&[0.0]).unwrap(), 1.0);
        let mut c = vec![1.0; 30];
        c[7] = 0.0;
        assert_eq!(format!("{:.3}", zero_count_rate(&c).unwrap()), "0.033");
        assert_eq!(zero_count_rate(&[]), Err(ScoreError::NoPoints));
    }

    proptest! {
        #[test]
        fn scores_are_bounded_and_symmetric(
            a in -50.0f64..50.0,
            recs in proptest::collection::vec((-50.0f64..50.0, 0.01f64..100.0), 1..6),
            seed in 0u64..100,
        ) {
            let recs: Vec<DoseGaussian> = recs.into_iter().map(|(m, v)| g(m, v)).collect();
            let p = p_score(a, &recs).unwrap();
            let c = c_score(a, &recs).unwrap();
            prop_assert!(p >= 0.0 && (0.0..=1.0).contains(&c));
            let mut shuffled = recs.clone();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            prop_assert!((p_score(a, &shuffled).unwrap() - p).abs() < 1e-15);
            prop_assert_eq!(c_score(a, &shuffled).unwrap(), c);
            prop_assert!(p_score(a + 1e6, &recs).unwrap() < 1e-300);
            prop_assert_eq!(c_score(a + 1e6, &recs).unwrap(), 0.0);
        }
    }

    pub(crate) fn synthetic_study(rng: &mut ChaCha8Rng, n_clinicians: usize, n_points: usize) -> Vec<EvaluationPoint> {
        (0..n_points)
            .map(|p| {
                let recs = (0..n_clinicians)
                    .map(|c| Recommendation {
                        clinician_id: format!("c{c}"),
                        vasopressor: g(rng.random_range(0.0..0.5), rng.random_range(0.001..0.05)),
                        iv_fluid: g(rng.random_range(0.0..2.0), rng.random_range(0.05..1.0)),
                    })
                    .collect();
                let actions = Source::ALL
                    .iter()
                    .map(|s| (*s, DoseAction::new(rng.random_range(0.0..0.6), rng.random_range(0.0..2.5))))
                    .collect();
                EvaluationPoint {
                    patient_id: format!("p{}", p / 3),
                    time_index: p,
                    recommendations: recs,
                    actions,
                }
            })
            .collect()
    }

    /// Spreadsheet-style tabulation: loops written out with explicit
    /// densities and counters.
    pub(crate) fn brute_force(points: &[EvaluationPoint], drug: Drug, source: Source) -> (f64, f64, f64) {
        let (mut p_sum, mut c_sum, mut zeros) = (0.0, 0.0, 0usize);
        for pt in points {
            let a = match drug {
                Drug::IvFluid => pt.actions[&source].iv_fluid,
                Drug::Vasopressor => pt.actions[&source].vasopressor,
            };
            let (mut dens, mut hits) = (0.0, 0usize);
            for r in &pt.recommendations {
                let q = match drug {
                    Drug::IvFluid => r.iv_fluid,
                    Drug::Vasopressor => r.vasopressor,
                };
                let d = (-(a - q.mean) * (a - q.mean) / (2.0 * q.variance)).exp()
                    / (2.0 * std::f64::consts::PI * q.variance).sqrt();
                dens += d;
                if d >= 0.01 {
                    hits += 1;
                }
            }
            let n = pt.recommendations.len() as f64;
            p_sum += dens / n;
            c_sum += hits as f64 / n;
            if hits == 0 {
                zeros += 1;
            }
        }
        let m = points.len() as f64;
        (p_sum / m, c_sum / m, zeros as f64 / m)
    }

    #[test]
    fn table_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let study = synthetic_study(&mut rng, 3, 10);
        let table = score_table(&study, false).unwrap();
        for d in Drug::ALL {
            for s in Source::ALL {
                let cell = table.cell(ScoreTarget::Drug(d), s).unwrap();
                let (p, c, z) = brute_force(&study, d, s);
                assert!((cell.p_score - p).abs() < 1e-12);
                assert!((cell.c_score - c).abs() < 1e-12);
                assert!((cell.zero_count - z).abs() < 1e-12);
                assert_eq!(cell.n_points, 10);
            }
        }
        let tsv = table.to_tsv();
        let rows: Vec<Vec<&str>> = tsv.lines().map(|l| l.split('\t').collect()).collect();
        assert_eq!(rows[0], ["ACTION", "SCORE", "MIMIC", "MDP", "POMDP"]);
        assert_eq!(rows.len(), 7);
        let labels: Vec<(&str, &str)> = rows[1..].iter().map(|r| (r[0], r[1])).collect();
        assert_eq!(
            labels,
            [
                ("IV Fluids", "P-Score"),
                ("IV Fluids", "C-Score"),
                ("IV Fluids", "Zero Count"),
                ("Vasopressors", "P-Score"),
                ("Vasopressors", "C-Score"),
                ("Vasopressors", "Zero Count"),
            ]
        );

        // recommender order does not matter
        let mut permuted = study.clone();
        for p in &mut permuted {
            p.recommendations.reverse();
        }
        let other = score_table(&permuted, false).unwrap();
        for (a, b) in table.cells.iter().zip(&other.cells) {
            assert!((a.2.p_score - b.2.p_score).abs() < 1e-15 && a.2.c_score == b.2.c_score);
        }
    }

    #[test]
    fn table_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let one = synthetic_study(&mut rng, 1, 1);
        let t = score_table(&one, false).unwrap();
        let a = one[0].actions[&Source::Pomdp];
        let c = t.cell(ScoreTarget::Drug(Drug::IvFluid), Source::Pomdp).unwrap();
        assert_eq!(c.p_score, p_score(a.iv_fluid, &[one[0].recommendations[0].iv_fluid]).unwrap());

        let mut missing = one.clone();
        missing[0].actions.remove(&Source::DiscreteBaseline);
        assert!(matches!(score_table(&missing, false), Err(ScoreError::MissingSource { .. })));
        assert_eq!(score_table(&[], false), Err(ScoreError::NoPoints));

        let joint = score_table(&one, true).unwrap();
        let r = &one[0].recommendations[0];
        let want = r.vasopressor.density(a.vasopressor).unwrap() * r.iv_fluid.density(a.iv_fluid).unwrap();
        assert!((joint.cell(ScoreTarget::Joint, Source::Pomdp).unwrap().p_score - want).abs() < 1e-15);
        assert_eq!(joint.to_tsv().lines().count(), 4);
    }
}
