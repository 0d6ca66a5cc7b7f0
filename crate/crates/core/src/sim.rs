//! Synthetic septic-patient POMDP.
//!
//! A latent severity vector `x ∈ ℝᵏ` grows under `A` and is pulled toward
//! zero by each drug along its effect vector. Drug effects saturate as
//! `d / (d + half)` and soft-threshold each coordinate, so a drug never
//! pushes a coordinate through zero. Patients have one of two phenotypes:
//! latent mass starts on the vasopressor-responsive or on the
//! fluid-responsive coordinates.
//!
//! Observations are a fixed random affine map of `x` through `tanh` plus
//! noise, with binary features from thresholded projections and
//! per-feature missingness. Severity is `‖x‖`; crossing the death threshold
//! ends the stay with −10, falling below the recovery threshold or reaching
//! the horizon ends it with +10.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::cohort::{assign_rewards, Admission, Cohort, DoseAction, ObservationVector, Outcome, Step};

/// Scripted clinician parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClinicianConfig {
    /// Vasopressor dose per unit of perceived severity (µg/kg/min).
    pub vaso_gain: f64,
    /// Fluid dose per unit of perceived severity (mL/h).
    pub fluid_gain: f64,
    /// Dose of the non-preferred drug relative to the preferred one.
    pub secondary_fraction: f64,
    pub severity_noise: f64,
    /// Perceived severity below this earns no treatment.
    pub deadband: f64,
    /// Standard deviation of the lognormal dose multiplier.
    pub dose_noise: f64,
    /// Probability of the pressor-first style.
    pub pressor_first_prob: f64,
}

impl Default for ClinicianConfig {
    fn default() -> Self {
        Self {
            vaso_gain: 0.25,
            fluid_gain: 150.0,
            secondary_fraction: 0.2,
            severity_noise: 0.25,
            deadband: 0.3,
            dose_noise: 0.3,
            pressor_first_prob: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub latent_dim: usize,
    pub n_continuous: usize,
    pub n_binary: usize,
    /// Seed of the fixed emission map.
    pub emission_seed: u64,
    /// Scalar growth used when `dynamics` is absent (`A = growth·I`).
    pub growth: f64,
    /// Explicit `k×k` drift matrix, row-major rows.
    pub dynamics: Option<Vec<Vec<f64>>>,
    pub vaso_effect: Vec<f64>,
    pub fluid_effect: Vec<f64>,
    pub vaso_half_effect: f64,
    pub fluid_half_effect: f64,
    pub process_noise: f64,
    pub obs_noise: f64,
    pub missing_prob: f64,
    pub death_threshold: f64,
    pub survival_threshold: f64,
    pub horizon: usize,
    pub gamma: f64,
    /// Range of the per-coordinate mean on the responsive coordinates.
    pub initial_magnitude: [f64; 2],
    pub initial_spread: f64,
    /// Probability of the vasopressor-responsive phenotype.
    pub vaso_phenotype_prob: f64,
    pub clinician: ClinicianConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            latent_dim: 4,
            n_continuous: 12,
            n_binary: 2,
            emission_seed: 17,
            growth: 1.05,
            dynamics: None,
            vaso_effect: vec![0.3, 0.3, 0.0, 0.0],
            fluid_effect: vec![0.0, 0.0, 0.3, 0.3],
            vaso_half_effect: 0.2,
            fluid_half_effect: 250.0,
            process_noise: 0.05,
            obs_noise: 0.1,
            missing_prob: 0.3,
            death_threshold: 6.0,
            survival_threshold: 0.6,
            horizon: 72,
            gamma: 0.99,
            initial_magnitude: [1.2, 2.4],
            initial_spread: 0.3,
            vaso_phenotype_prob: 0.5,
            clinician: ClinicianConfig::default(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), String> {
        let k = self.latent_dim;
        if k == 0 || self.horizon == 0 {
            return Err("latent_dim and horizon must be at least 1".into());
        }
        if self.vaso_effect.len() != k || self.fluid_effect.len() != k {
            return Err(format!("effect vectors must have length {k}"));
        }
        if let Some(a) = &self.dynamics {
            if a.len() != k || a.iter().any(|r| r.len() != k) {
                return Err(format!("dynamics must be {k}×{k}"));
            }
        }
        if !(self.death_threshold > self.survival_threshold && self.survival_threshold >= 0.0) {
            return Err("need death_threshold > survival_threshold >= 0".into());
        }
        let stds = [
            self.process_noise,
            self.obs_noise,
            self.initial_spread,
            self.clinician.severity_noise,
            self.clinician.dose_noise,
        ];
        if stds.iter().any(|s| !(*s >= 0.0)) {
            return Err("noise standard deviations must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.missing_prob) {
            return Err("missing_prob must lie in [0, 1]".into());
        }
        if self.vaso_half_effect <= 0.0 || self.fluid_half_effect <= 0.0 {
            return Err("half-effect doses must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err("gamma must lie in [0, 1]".into());
        }
        Ok(())
    }
}

/// What a policy may look at when choosing a dose. The scripted clinician
/// peeks at the latent state; learned policies use only the observation.
pub struct PatientView<'a> {
    pub t: usize,
    pub latent: &'a [f64],
    pub observation: &'a ObservationVector,
}

pub trait ClinicalPolicy {
    /// Called once before each admission.
    fn reset(&mut self, rng: &mut dyn rand::RngCore);
    fn act(&mut self, view: &PatientView, rng: &mut dyn rand::RngCore) -> DoseAction;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Style {
    PressorFirst,
    FluidFirst,
}

/// Noisy proportional controller on perceived severity with a per-admission
/// preferred drug.
#[derive(Debug, Clone)]
pub struct ScriptedClinician {
    pub config: ClinicianConfig,
    style: Style,
}

impl ScriptedClinician {
    pub fn new(config: ClinicianConfig) -> Self {
        Self {
            config,
            style: Style::PressorFirst,
        }
    }

    pub fn style(&self) -> Style {
        self.style
    }
}

impl ClinicalPolicy for ScriptedClinician {
    fn reset(&mut self, rng: &mut dyn rand::RngCore) {
        self.style = if rng.random::<f64>() < self.config.pressor_first_prob {
            Style::PressorFirst
        } else {
            Style::FluidFirst
        };
    }

    fn act(&mut self, view: &PatientView, rng: &mut dyn rand::RngCore) -> DoseAction {
        let c = &self.config;
        let sev = norm(view.latent) + c.severity_noise * rng.sample::<f64, _>(StandardNormal);
        let s = (sev - c.deadband).max(0.0);
        let (mut v, mut f) = (c.vaso_gain * s, c.fluid_gain * s);
        match self.style {
            Style::PressorFirst => f *= c.secondary_fraction,
            Style::FluidFirst => v *= c.secondary_fraction,
        }
        let nv: f64 = rng.sample(StandardNormal);
        let nf: f64 = rng.sample(StandardNormal);
        DoseAction::new(v * (c.dose_noise * nv).exp(), f * (c.dose_noise * nf).exp())
    }
}

/// The same dose at every step.
#[derive(Debug, Clone, Copy)]
pub struct ConstantPolicy(pub DoseAction);

impl ClinicalPolicy for ConstantPolicy {
    fn reset(&mut self, _rng: &mut dyn rand::RngCore) {}

    fn act(&mut self, _view: &PatientView, _rng: &mut dyn rand::RngCore) -> DoseAction {
        self.0
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Monte-Carlo value of a policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValueEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub survival_rate: f64,
    pub n: usize,
}

/// A configured simulator with its emission map materialized.
#[derive(Debug, Clone)]
pub struct Simulator {
    pub config: SimConfig,
    dynamics: Vec<Vec<f64>>,
    emit_w: Vec<Vec<f64>>,
    emit_b: Vec<f64>,
    bin_w: Vec<Vec<f64>>,
}

impl Simulator {
    pub fn new(config: SimConfig) -> Result<Self, String> {
        config.validate()?;
        let k = config.latent_dim;
        let dynamics = config.dynamics.clone().unwrap_or_else(|| {
            (0..k)
                .map(|i| (0..k).map(|j| if i == j { config.growth } else { 0.0 }).collect())
                .collect()
        });
        let mut rng = ChaCha8Rng::seed_from_u64(config.emission_seed);
        let scale = 1.0 / (k as f64).sqrt();
        let row = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..k).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
        };
        let emit_w = (0..config.n_continuous).map(|_| row(&mut rng)).collect();
        let bin_w = (0..config.n_binary).map(|_| row(&mut rng)).collect();
        let emit_b = (0..config.n_continuous)
            .map(|_| 0.3 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Ok(Self {
            config,
            dynamics,
            emit_w,
            emit_b,
            bin_w,
        })
    }

    pub fn initial_state<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let c = &self.config;
        let vaso = rng.random::<f64>() < c.vaso_phenotype_prob;
        let target = if vaso { &c.vaso_effect } else { &c.fluid_effect };
        let [lo, hi] = c.initial_magnitude;
        let m = if hi > lo { rng.random_range(lo..hi) } else { lo };
        target
            .iter()
            .map(|e| {
                let mean = if *e > 0.0 { m } else { 0.0 };
                mean + c.initial_spread * rng.sample::<f64, _>(StandardNormal)
            })
            .collect()
    }

    pub fn observe<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> ObservationVector {
        let c = &self.config;
        let dot = |w: &[f64]| w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        let mut continuous = Vec::with_capacity(c.n_continuous);
        let mut missing = Vec::with_capacity(c.n_continuous);
        for (w, b) in self.emit_w.iter().zip(&self.emit_b) {
            let v = (dot(w) + b).tanh() + c.obs_noise * rng.sample::<f64, _>(StandardNormal);
            let m = rng.random::<f64>() < c.missing_prob;
            continuous.push(if m { 0.0 } else { v });
            missing.push(m);
        }
        let binary = self.bin_w.iter().map(|w| dot(w) > 0.0).collect();
        ObservationVector {
            continuous,
            binary,
            missing,
        }
    }

    pub fn transition<R: Rng + ?Sized>(&self, x: &[f64], action: DoseAction, rng: &mut R) -> Vec<f64> {
        let c = &self.config;
        let sv = action.vasopressor / (action.vasopressor + c.vaso_half_effect);
        let sf = action.iv_fluid / (action.iv_fluid + c.fluid_half_effect);
        self.dynamics
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let y: f64 = row.iter().zip(x).map(|(a, b)| a * b).sum();
                let pull = c.vaso_effect[i] * sv + c.fluid_effect[i] * sf;
                let y = y.signum() * (y.abs() - pull).max(0.0);
                y + c.process_noise * rng.sample::<f64, _>(StandardNormal)
            })
            .collect()
    }

    /// One stay. `env_rng` drives the patient, `policy_rng` the policy, so
    /// deterministic policies see common random numbers across runs.
    pub fn simulate_admission(
        &self,
        policy: &mut dyn ClinicalPolicy,
        id: &str,
        env_rng: &mut ChaCha8Rng,
        policy_rng: &mut ChaCha8Rng,
    ) -> Admission {
        let c = &self.config;
        policy.reset(policy_rng);
        let mut x = self.initial_state(env_rng);
        let mut steps = Vec::new();
        let mut outcome = Outcome::Survived;
        for t in 0..c.horizon {
            let observation = self.observe(&x, env_rng);
            let view = PatientView {
                t,
                latent: &x,
                observation: &observation,
            };
            let mut action = policy.act(&view, policy_rng);
            action.vasopressor = action.vasopressor.max(0.0);
            action.iv_fluid = action.iv_fluid.max(0.0);
            steps.push(Step {
                time_index: t as i64,
                observation,
                action,
                reward: 0.0,
            });
            if norm(&x) < c.survival_threshold {
                break;
            }
            x = self.transition(&x, action, env_rng);
            if norm(&x) >= c.death_threshold {
                outcome = Outcome::Died;
                break;
            }
        }
        let a = Admission {
            id: id.to_string(),
            outcome: None,
            steps,
        };
        assign_rewards(a, Some(outcome)).expect("outcome is set")
    }

    /// Environment and policy stream for admission `i` under `seed`.
    pub fn streams(seed: u64, i: usize) -> (ChaCha8Rng, ChaCha8Rng) {
        let mut env = ChaCha8Rng::seed_from_u64(seed);
        env.set_stream(2 * i as u64);
        let mut pol = ChaCha8Rng::seed_from_u64(seed);
        pol.set_stream(2 * i as u64 + 1);
        (env, pol)
    }

    pub fn simulate_cohort(&self, policy: &mut dyn ClinicalPolicy, n: usize, seed: u64) -> Cohort {
        let mut cohort = Cohort::new(self.config.n_continuous, self.config.n_binary);
        for i in 0..n {
            let (mut env, mut pol) = Self::streams(seed, i);
            cohort
                .admissions
                .push(self.simulate_admission(policy, &format!("sim-{i:05}"), &mut env, &mut pol));
        }
        cohort
    }

    /// Mean discounted return with its standard error over `n_rollouts`.
    pub fn true_policy_value(
        &self,
        policy: &mut dyn ClinicalPolicy,
        n_rollouts: usize,
        gamma: f64,
        seed: u64,
    ) -> ValueEstimate {
        assert!(n_rollouts >= 1, "need at least one rollout");
        let mut returns = Vec::with_capacity(n_rollouts);
        let mut survived = 0usize;
        for i in 0..n_rollouts {
            let (mut env, mut pol) = Self::streams(seed, i);
            let a = self.simulate_admission(policy, "rollout", &mut env, &mut pol);
            if a.outcome == Some(Outcome::Survived) {
                survived += 1;
            }
            returns.push(a.discounted_return(gamma));
        }
        let n = n_rollouts as f64;
        let mean = returns.iter().sum::<f64>() / n;
        let var = if n_rollouts > 1 {
            returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        ValueEstimate {
            mean,
            std_error: (var / n).sqrt(),
            survival_rate: survived as f64 / n,
            n: n_rollouts,
        }
    }

    /// Best survival rate over constant-dose policies drawn from `grid`,
    /// each evaluated on the same `n` patients.
    pub fn best_constant_survival(&self, grid: &[DoseAction], n: usize, seed: u64) -> f64 {
        grid.iter()
            .map(|a| self.true_policy_value(&mut ConstantPolicy(*a), n, 1.0, seed).survival_rate)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}
