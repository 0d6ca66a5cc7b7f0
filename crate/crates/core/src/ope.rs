//! Off-policy evaluation: clipped weighted importance sampling, a
//! Retrace(λ)-fitted state value averaged over initial states, and
//! weighted doubly-robust, each with bootstrap intervals.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::OpeError;
use crate::optim::{clipped_step, RmsPropConfig, RmsPropState, MAX_GRAD_NORM};
use crate::policy::{actor_critic_loss, LossCoefficients, LossTrace, PolicyValueNet};

/// Per-trajectory importance ratios are clipped to this range.
pub const RATIO_CLIP: (f64, f64) = (1e-30, 1e10);

/// One test admission under one evaluated policy.
#[derive(Debug, Clone, PartialEq)]
pub struct OpeTrajectory {
    pub states: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    /// `ln π(a_t|s_t) − ln π_b(a_t|s_t)`
    pub log_ratios: Vec<f64>,
}

impl OpeTrajectory {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn discounted_return(&self, gamma: f64) -> f64 {
        self.rewards.iter().rev().fold(0.0, |acc, r| r + gamma * acc)
    }
}

fn check(trajs: &[OpeTrajectory]) -> Result<(), OpeError> {
    if trajs.is_empty() {
        return Err(OpeError::Empty);
    }
    for (i, t) in trajs.iter().enumerate() {
        if t.states.len() != t.len() || t.log_ratios.len() != t.len() {
            return Err(OpeError::Misaligned(i));
        }
    }
    Ok(())
}

fn clip_ratio(log_w: f64) -> f64 {
    log_w.exp().clamp(RATIO_CLIP.0, RATIO_CLIP.1)
}

/// `Σ wᵢ Gᵢ / Σ wᵢ` with `wᵢ = clip(Π_t π/π_b)`.
pub fn wis(trajs: &[OpeTrajectory], gamma: f64) -> Result<f64, OpeError> {
    check(trajs)?;
    let (mut num, mut den) = (0.0, 0.0);
    for t in trajs {
        let w = clip_ratio(t.log_ratios.iter().sum());
        num += w * t.discounted_return(gamma);
        den += w;
    }
    Ok(num / den)
}

/// Cumulative clipped ratios `ρ_{i,0:t}`, padded with the final value after
/// an admission ends.
fn cumulative_weights(trajs: &[OpeTrajectory]) -> (Vec<Vec<f64>>, usize) {
    let horizon = trajs.iter().map(OpeTrajectory::len).max().unwrap_or(0);
    let w = trajs
        .iter()
        .map(|t| {
            let mut acc = 0.0;
            let mut out = Vec::with_capacity(horizon);
            for k in 0..horizon {
                if k < t.len() {
                    acc += t.log_ratios[k];
                }
                out.push(clip_ratio(acc));
            }
            out
        })
        .collect();
    (w, horizon)
}

/// Weighted doubly-robust estimate with a state-value baseline:
///
/// `Σ_t γ^t Σ_i [ w_{i,t} r_{i,t} − (w_{i,t} − w_{i,t−1}) V̂(s_{i,t}) ]`
///
/// where `w_{i,t}` is the cumulative ratio normalized over trajectories at
/// step `t`, `w_{i,−1} = 1/n`, and steps past the end of an admission
/// contribute zero reward and zero value.
pub fn wdr(trajs: &[OpeTrajectory], values: &[Vec<f64>], gamma: f64) -> Result<f64, OpeError> {
    check(trajs)?;
    for (i, (t, v)) in trajs.iter().zip(values).enumerate() {
        if v.len() != t.len() {
            return Err(OpeError::Misaligned(i));
        }
    }
    if values.len() != trajs.len() {
        return Err(OpeError::Misaligned(values.len().min(trajs.len())));
    }
    let n = trajs.len();
    let (cum, horizon) = cumulative_weights(trajs);
    let mut prev = vec![1.0 / n as f64; n];
    let mut total = 0.0;
    let mut disc = 1.0;
    for k in 0..horizon {
        let s: f64 = cum.iter().map(|w| w[k]).sum();
        let cur: Vec<f64> = cum.iter().map(|w| w[k] / s).collect();
        let mut step = 0.0;
        for i in 0..n {
            if k < trajs[i].len() {
                step += cur[i] * trajs[i].rewards[k] - (cur[i] - prev[i]) * values[i][k];
            }
        }
        total += disc * step;
        disc *= gamma;
        prev = cur;
    }
    Ok(total)
}

/// Stepwise (per-decision) weighted importance sampling.
pub fn stepwise_wis(trajs: &[OpeTrajectory], gamma: f64) -> Result<f64, OpeError> {
    let zeros: Vec<Vec<f64>> = trajs.iter().map(|t| vec![0.0; t.len()]).collect();
    wdr(trajs, &zeros, gamma)
}

/// Regression model for `V̂`.
pub trait ValueRegressor {
    fn predict(&self, state: &[f64]) -> f64;
    fn fit(&mut self, states: &[&[f64]], targets: &[f64]);
}

/// Exact lookup table keyed by the bit pattern of the state.
#[derive(Debug, Clone, Default)]
pub struct TabularRegressor {
    table: HashMap<Vec<u64>, f64>,
}

fn key(s: &[f64]) -> Vec<u64> {
    s.iter().map(|v| v.to_bits()).collect()
}

impl ValueRegressor for TabularRegressor {
    fn predict(&self, state: &[f64]) -> f64 {
        self.table.get(&key(state)).copied().unwrap_or(0.0)
    }

    fn fit(&mut self, states: &[&[f64]], targets: &[f64]) {
        let mut acc: HashMap<Vec<u64>, (f64, usize)> = HashMap::new();
        for (s, t) in states.iter().zip(targets) {
            let e = acc.entry(key(s)).or_default();
            e.0 += t;
            e.1 += 1;
        }
        self.table = acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect();
    }
}

/// The critic architecture regressed with RMSProp on squared error.
#[derive(Debug, Clone)]
pub struct CriticRegressor {
    pub net: PolicyValueNet,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    rng: ChaCha8Rng,
    state: RmsPropState,
}

impl CriticRegressor {
    pub fn new(net: PolicyValueNet, epochs: usize, batch_size: usize, lr: f64, seed: u64) -> Self {
        let state = RmsPropState::new(
            &net.params,
            RmsPropConfig {
                lr,
                ..RmsPropConfig::default()
            },
        );
        Self {
            net,
            epochs,
            batch_size,
            lr,
            rng: ChaCha8Rng::seed_from_u64(seed),
            state,
        }
    }
}

impl ValueRegressor for CriticRegressor {
    fn predict(&self, state: &[f64]) -> f64 {
        self.net.value(state)
    }

    fn fit(&mut self, states: &[&[f64]], targets: &[f64]) {
        use rand::seq::SliceRandom;
        let mut order: Vec<usize> = (0..states.len()).collect();
        let coeffs = LossCoefficients {
            lambda_bc: 0.0,
            lambda_ess: 0.0,
        };
        for _ in 0..self.epochs {
            order.shuffle(&mut self.rng);
            for chunk in order.chunks(self.batch_size.max(1)) {
                let beliefs: Vec<Vec<f64>> = chunk.iter().map(|&i| states[i].to_vec()).collect();
                let actions = vec![[0.5, 0.5]; chunk.len()];
                let dens = vec![1.0; chunk.len()];
                let batch = [LossTrace {
                    beliefs: &beliefs,
                    actions: &actions,
                    behavior_density: &dens,
                    advantages: vec![0.0; chunk.len()],
                    weights: vec![0.0; chunk.len()],
                    targets: chunk.iter().map(|&i| Some(targets[i])).collect(),
                }];
                let (_, g) = actor_critic_loss(&self.net, &batch, coeffs, true).expect("state width matches critic");
                clipped_step(
                    &mut [&mut self.net.params],
                    std::slice::from_mut(&mut self.state),
                    vec![g.expect("requested")],
                    MAX_GRAD_NORM,
                );
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetraceFit {
    pub iterations: usize,
    pub converged: bool,
    /// Largest change of a fitted value in the last iteration.
    pub max_change: f64,
}

/// Retrace(λ) targets for one admission under the current values:
/// `V(s_t) + Σ_{k≥t} γ^{k−t} (Π_{j=t}^{k−1} c_j) ρ_k δ_k` with
/// `c_j = λ·min(1, ratio_j)`, `ρ_k = min(1, ratio_k)` and
/// `δ_k = r_k + γV(s_{k+1}) − V(s_k)`, `V` after the last step being 0.
pub fn retrace_targets(t: &OpeTrajectory, values: &[f64], lambda: f64, gamma: f64) -> Vec<f64> {
    let n = t.len();
    let mut out = vec![0.0; n];
    let mut acc = 0.0;
    for k in (0..n).rev() {
        let trunc = t.log_ratios[k].exp().min(1.0);
        let next = if k + 1 < n { values[k + 1] } else { 0.0 };
        let delta = trunc * (t.rewards[k] + gamma * next - values[k]);
        // acc holds Σ_{m>k} γ^{m−k−1} (Π_{j=k+1}^{m−1} c_j) ρ_m δ_m
        let correction = if k + 1 < n { gamma * lambda * trunc * acc } else { 0.0 };
        acc = delta + correction;
        out[k] = values[k] + acc;
    }
    out
}

/// Alternates Retrace targets and regression until the fitted values move
/// less than `tol` or `max_iter` is reached.
pub fn fit_value_retrace(
    trajs: &[OpeTrajectory],
    lambda: f64,
    gamma: f64,
    regressor: &mut dyn ValueRegressor,
    tol: f64,
    max_iter: usize,
) -> Result<RetraceFit, OpeError> {
    check(trajs)?;
    let states: Vec<&[f64]> = trajs.iter().flat_map(|t| t.states.iter().map(Vec::as_slice)).collect();
    let mut values: Vec<Vec<f64>> = trajs
        .iter()
        .map(|t| t.states.iter().map(|s| regressor.predict(s)).collect())
        .collect();
    let mut fit = RetraceFit {
        iterations: 0,
        converged: false,
        max_change: f64::INFINITY,
    };
    while fit.iterations < max_iter {
        let targets: Vec<f64> = trajs
            .iter()
            .zip(&values)
            .flat_map(|(t, v)| retrace_targets(t, v, lambda, gamma))
            .collect();
        regressor.fit(&states, &targets);
        let next: Vec<Vec<f64>> = trajs
            .iter()
            .map(|t| t.states.iter().map(|s| regressor.predict(s)).collect())
            .collect();
        fit.max_change = values
            .iter()
            .flatten()
            .zip(next.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        values = next;
        fit.iterations += 1;
        if fit.max_change < tol {
            fit.converged = true;
            break;
        }
    }
    Ok(fit)
}

/// Mean of `V̂(s₀)` over admissions.
pub fn initial_state_value(regressor: &dyn ValueRegressor, trajs: &[OpeTrajectory]) -> Result<f64, OpeError> {
    check(trajs)?;
    Ok(trajs.iter().map(|t| regressor.predict(&t.states[0])).sum::<f64>() / trajs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub point: f64,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantEstimates {
    pub variant: String,
    pub wis: Estimate,
    pub retrace: Estimate,
    pub wdr: Estimate,
    pub retrace_fit: RetraceFit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpeReport {
    pub gamma: f64,
    pub lambda: f64,
    pub resamples: usize,
    pub variants: Vec<VariantEstimates>,
}

impl OpeReport {
    /// Tab-separated table, one row per variant.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("variant\twis\twis_lo\twis_hi\tretrace\tretrace_lo\tretrace_hi\twdr\twdr_lo\twdr_hi\n");
        for v in &self.variants {
            out.push_str(&v.variant);
            for e in [v.wis, v.retrace, v.wdr] {
                out.push_str(&format!("\t{}\t{}\t{}", e.point, e.lo, e.hi));
            }
            out.push('\n');
        }
        out
    }

    /// Long-format plot data: `estimator,variant,estimate,lo,hi`.
    pub fn plot_data(&self) -> String {
        let mut out = String::from("estimator,variant,estimate,lo,hi\n");
        for name in ["wis", "retrace", "wdr"] {
            for v in &self.variants {
                let e = match name {
                    "wis" => v.wis,
                    "retrace" => v.retrace,
                    _ => v.wdr,
                };
                out.push_str(&format!("{name},{},{},{},{}\n", v.variant, e.point, e.lo, e.hi));
            }
        }
        out
    }

    pub fn get(&self, variant: &str) -> Result<&VariantEstimates, OpeError> {
        self.variants
            .iter()
            .find(|v| v.variant == variant)
            .ok_or_else(|| OpeError::MissingVariant(variant.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OpeConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub resamples: usize,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for OpeConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lambda: 0.9,
            resamples: 1000,
            tol: 1e-3,
            max_iter: 10,
        }
    }
}

/// Percentile bootstrap over admissions; the interval is widened if needed
/// so that it contains the point estimate.
pub fn bootstrap<R: Rng>(
    n: usize,
    point: f64,
    resamples: usize,
    rng: &mut R,
    mut stat: impl FnMut(&[usize]) -> f64,
) -> Estimate {
    if resamples == 0 || n == 0 {
        return Estimate { point, lo: point, hi: point };
    }
    let mut draws: Vec<f64> = (0..resamples)
        .map(|_| {
            let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            stat(&idx)
        })
        .collect();
    draws.sort_by(f64::total_cmp);
    let q = |p: f64| draws[((p * (resamples - 1) as f64).round() as usize).min(resamples - 1)];
    Estimate {
        point,
        lo: q(0.025).min(point),
        hi: q(0.975).max(point),
    }
}

/// A policy to evaluate with its test trajectories.
#[derive(Debug, Clone, PartialEq)]
pub struct OpeVariant {
    pub name: String,
    pub trajectories: Vec<OpeTrajectory>,
}

/// Runs all three estimators for every variant. `regressor_for` supplies a
/// fresh `V̂` model per variant.
pub fn evaluate_all(
    variants: &[OpeVariant],
    config: &OpeConfig,
    seed: u64,
    mut regressor_for: impl FnMut(&OpeVariant) -> Box<dyn ValueRegressor>,
) -> Result<OpeReport, OpeError> {
    let mut out = Vec::with_capacity(variants.len());
    for (vi, v) in variants.iter().enumerate() {
        let trajs = &v.trajectories;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(vi as u64);
        let mut reg = regressor_for(v);
        let fit = fit_value_retrace(trajs, config.lambda, config.gamma, reg.as_mut(), config.tol, config.max_iter)?;
        let values: Vec<Vec<f64>> = trajs
            .iter()
            .map(|t| t.states.iter().map(|s| reg.predict(s)).collect())
            .collect();
        let v0: Vec<f64> = values.iter().map(|v| v[0]).collect();
        let n = trajs.len();

        let w_point = wis(trajs, config.gamma)?;
        let wis_e = bootstrap(n, w_point, config.resamples, &mut rng, |idx| {
            let sample: Vec<OpeTrajectory> = idx.iter().map(|&i| trajs[i].clone()).collect();
            wis(&sample, config.gamma).expect("non-empty resample")
        });
        let r_point = v0.iter().sum::<f64>() / n as f64;
        let ret_e = bootstrap(n, r_point, config.resamples, &mut rng, |idx| {
            idx.iter().map(|&i| v0[i]).sum::<f64>() / idx.len() as f64
        });
        let d_point = wdr(trajs, &values, config.gamma)?;
        let wdr_e = bootstrap(n, d_point, config.resamples, &mut rng, |idx| {
            let sample: Vec<OpeTrajectory> = idx.iter().map(|&i| trajs[i].clone()).collect();
            let vals: Vec<Vec<f64>> = idx.iter().map(|&i| values[i].clone()).collect();
            wdr(&sample, &vals, config.gamma).expect("non-empty resample")
        });
        out.push(VariantEstimates {
            variant: v.name.clone(),
            wis: wis_e,
            retrace: ret_e,
            wdr: wdr_e,
            retrace_fit: fit,
        });
    }
    Ok(OpeReport {
        gamma: config.gamma,
        lambda: config.lambda,
        resamples: config.resamples,
        variants: out,
    })
}
