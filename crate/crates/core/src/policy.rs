//! Global actor-critic on belief states.
//!
//! A two-layer trunk feeds three heads: a Gaussian mean and log-std over
//! equalized doses, and `V(s)`. Advantages are the up-going V-trace variant
//! computed backwards over each admission; the critic is regressed onto
//! tree-search targets; behavior cloning keeps the policy near the
//! clinicians.

use rand::seq::{index, SliceRandom};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::behavior::BehaviorCvae;
use crate::checkpoint::Checkpoint;
use crate::cohort::{Preprocessor, ProcessedAdmission};
use crate::cohort::DoseAction;
use crate::dist::{gaussian_log_prob, tape_gaussian_log_prob};
use crate::error::{CheckpointError, NnError, TrainError};
use crate::nn::Linear;
use crate::optim::{clipped_step, RmsPropConfig, RmsPropState, MAX_GRAD_NORM};
use crate::sim::{ClinicalPolicy, PatientView};
use crate::state_repr::{obs_input, tape_bounded, HistoryEncoder, ObsCvae};
use crate::tape::{GradTape, Slot, Var};
use crate::tensor::{ParamSet, Tensor};
use crate::tree::{search_value, SearchBudget, SearchModel};

/// Relative weight of the value regression term.
pub const VALUE_WEIGHT: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub hidden: usize,
    pub log_std_bounds: [f64; 2],
    pub gamma: f64,
    pub lr: f64,
    pub rms_eps: f64,
    pub lambda_bc: f64,
    /// Weight of `batch/ESS − 1`; 0 disables the penalty.
    pub lambda_ess: f64,
    pub rho_bar: f64,
    pub c_bar: f64,
    /// Multiply the TD error by `ρ_t`.
    pub weighted_delta: bool,
    /// Reweight the policy-gradient term by normalized products of ratios.
    pub shift_weights: bool,
    pub iterations: usize,
    pub batch_admissions: usize,
    /// States searched per iteration.
    pub search_states: usize,
    /// Share of searched states drawn from last steps of admissions.
    pub terminal_fraction: f64,
    pub checkpoint_every: usize,
    /// Importance draws for observation likelihoods inside the tree.
    pub likelihood_k_z: usize,
    pub search: SearchBudget,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            log_std_bounds: [-3.0, 0.0],
            gamma: 0.99,
            lr: 5e-4,
            rms_eps: 1e-5,
            lambda_bc: 0.1,
            lambda_ess: 0.0,
            rho_bar: 1.0,
            c_bar: 1.0,
            weighted_delta: true,
            shift_weights: false,
            iterations: 200,
            batch_admissions: 8,
            search_states: 32,
            terminal_fraction: 0.25,
            checkpoint_every: 50,
            likelihood_k_z: 1,
            search: SearchBudget::default(),
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Hyper(m));
        if !(self.lr > 0.0 && self.rms_eps > 0.0) {
            return bad("lr and rms_eps must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.terminal_fraction) {
            return bad("gamma and terminal_fraction must lie in [0, 1]".into());
        }
        if self.rho_bar <= 0.0 || self.c_bar <= 0.0 {
            return bad("truncation levels must be positive".into());
        }
        if self.log_std_bounds[0] >= self.log_std_bounds[1] {
            return bad("log_std_bounds must be increasing".into());
        }
        if self.search.expansions > 0 {
            self.search.validate().map_err(TrainError::Hyper)?;
        }
        Ok(())
    }
}

/// Head outputs for one belief.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyOutput {
    pub mean: [f64; 2],
    pub log_std: [f64; 2],
    pub value: f64,
}

impl PolicyOutput {
    pub fn log_prob(&self, a: [f64; 2]) -> f64 {
        gaussian_log_prob(&a, &self.mean, &self.log_std)
    }
}

#[derive(Debug, Clone)]
pub struct PolicyValueNet {
    pub params: ParamSet,
    l1: Linear,
    l2: Linear,
    mean: Linear,
    log_std: Linear,
    value: Linear,
    belief_dim: usize,
    hidden: usize,
    log_std_bounds: [f64; 2],
}

impl PolicyValueNet {
    pub fn new<R: Rng + ?Sized>(belief_dim: usize, hidden: usize, log_std_bounds: [f64; 2], rng: &mut R) -> Self {
        let mut params = ParamSet::new();
        let g = 2f64.sqrt();
        let l1 = Linear::new(&mut params, "trunk.l1", belief_dim, hidden, g, rng);
        let l2 = Linear::new(&mut params, "trunk.l2", hidden, hidden, g, rng);
        let mean = Linear::new(&mut params, "head.mean", hidden, 2, 0.01, rng);
        let log_std = Linear::new(&mut params, "head.log_std", hidden, 2, 0.01, rng);
        let value = Linear::new(&mut params, "head.value", hidden, 1, 1.0, rng);
        Self {
            params,
            l1,
            l2,
            mean,
            log_std,
            value,
            belief_dim,
            hidden,
            log_std_bounds,
        }
    }

    pub fn belief_dim(&self) -> usize {
        self.belief_dim
    }

    pub fn mean_bias_index(&self) -> usize {
        self.mean.bias_index()
    }

    pub fn value_bias_index(&self) -> usize {
        self.value.bias_index()
    }

    /// `(mean, log_std, V)` on a tape.
    pub fn forward_tape(&self, tape: &mut GradTape, slot: Slot, s: Var) -> Result<(Var, Var, Var), NnError> {
        let width = tape.value(s).len();
        if width != self.belief_dim {
            return Err(NnError::Shape {
                context: "policy input",
                expected: self.belief_dim,
                found: width,
            });
        }
        let h = self.l1.forward(tape, slot, s);
        let h = tape.relu(h);
        let h = self.l2.forward(tape, slot, h);
        let h = tape.relu(h);
        let m = self.mean.forward(tape, slot, h);
        let m = tape.sigmoid(m);
        let ls = self.log_std.forward(tape, slot, h);
        let [lo, hi] = self.log_std_bounds;
        let ls = tape_bounded(tape, ls, lo, hi);
        let v = self.value.forward(tape, slot, h);
        Ok((m, ls, v))
    }

    pub fn evaluate(&self, s: &[f64]) -> PolicyOutput {
        let mut tape = GradTape::new();
        let slot = tape.bind(&self.params);
        let sv = tape.constant(s.to_vec());
        let (m, ls, v) = self.forward_tape(&mut tape, slot, sv).expect("belief width");
        let (m, ls) = (tape.value(m), tape.value(ls));
        PolicyOutput {
            mean: [m[0], m[1]],
            log_std: [ls[0], ls[1]],
            value: tape.scalar(v),
        }
    }

    pub fn value(&self, s: &[f64]) -> f64 {
        self.evaluate(s).value
    }

    /// Draw from `π(·|s)`, clipped to the unit square.
    pub fn sample<R: Rng + ?Sized>(&self, s: &[f64], rng: &mut R) -> [f64; 2] {
        let out = self.evaluate(s);
        let mut a = [0.0; 2];
        for i in 0..2 {
            a[i] = (out.mean[i] + out.log_std[i].exp() * rng.sample::<f64, _>(StandardNormal)).clamp(0.0, 1.0);
        }
        a
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(serde_json::json!({
            "kind": "policy",
            "belief_dim": self.belief_dim,
            "hidden": self.hidden,
            "log_std_bounds": self.log_std_bounds,
        }));
        ck.add_params("policy", &self.params);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, CheckpointError> {
        let mut net = Self::new(
            ck.meta("belief_dim")?,
            ck.meta("hidden")?,
            ck.meta("log_std_bounds")?,
            &mut ChaCha8Rng::seed_from_u64(0),
        );
        net.params.assign(ck.params("policy"))?;
        Ok(net)
    }
}

/// One admission as seen by the policy stage.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub beliefs: Vec<Vec<f64>>,
    /// Equalized clinician actions.
    pub actions: Vec<[f64; 2]>,
    pub rewards: Vec<f64>,
    /// Whether the last step ends the admission.
    pub terminal: bool,
    /// Belief after the last step, needed only when not terminal.
    pub bootstrap: Option<Vec<f64>>,
    /// Floored `π_b(a_t|s_t)`.
    pub behavior_density: Vec<f64>,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Encodes admissions with a frozen encoder and attaches behavior
/// densities estimated with `k_z` prior draws.
pub fn build_traces(
    adms: &[ProcessedAdmission],
    encoder: &HistoryEncoder,
    behavior: &BehaviorCvae,
    k_z: usize,
    seed: u64,
) -> Vec<Trace> {
    adms.iter()
        .enumerate()
        .map(|(i, a)| {
            let beliefs = encoder.encode(a);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let behavior_density = beliefs
                .iter()
                .zip(&a.actions)
                .map(|(s, act)| behavior.density(s, *act, k_z, &mut rng))
                .collect();
            Trace {
                beliefs,
                actions: a.actions.clone(),
                rewards: a.rewards.clone(),
                terminal: true,
                bootstrap: None,
                behavior_density,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ratio {
    pub ratio: f64,
    pub rho: f64,
    pub c: f64,
}

/// `ratio = π/π_b`, `ρ = min(ρ̄, ratio)`, `c = min(c̄, ratio)`.
pub fn truncated_ratios(pi_log_density: f64, behavior_density: f64, rho_bar: f64, c_bar: f64) -> Ratio {
    let ratio = (pi_log_density - behavior_density.ln()).exp();
    Ratio {
        ratio,
        rho: ratio.min(rho_bar),
        c: ratio.min(c_bar),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageVector {
    pub advantages: Vec<f64>,
    pub deltas: Vec<f64>,
    pub rho: Vec<f64>,
    pub c: Vec<f64>,
}

/// Up-going advantage, computed backwards:
/// `A_{T−1} = δ_{T−1}`, `A_t = γ c_t max(A_{t+1}, 0) + δ_t`, with
/// `δ_t = ρ_t (r_t + γ V(s_{t+1}) − V(s_t))` (or without `ρ_t` when
/// `weighted_delta` is off). `next_value` is `V` after the last step, 0 if
/// terminal.
pub fn upgoing_advantage(
    values: &[f64],
    next_value: f64,
    rewards: &[f64],
    rho: &[f64],
    c: &[f64],
    gamma: f64,
    weighted_delta: bool,
) -> Result<AdvantageVector, TrainError> {
    let n = values.len();
    if n == 0 {
        return Err(TrainError::NoData("advantage trace"));
    }
    if rewards.len() != n || rho.len() != n || c.len() != n {
        return Err(TrainError::Hyper(format!(
            "trace arrays differ in length: values {n}, rewards {}, rho {}, c {}",
            rewards.len(),
            rho.len(),
            c.len()
        )));
    }
    let mut deltas = vec![0.0; n];
    let mut adv = vec![0.0f64; n];
    for t in (0..n).rev() {
        let next = if t + 1 < n { values[t + 1] } else { next_value };
        let td = rewards[t] + gamma * next - values[t];
        deltas[t] = if weighted_delta { rho[t] * td } else { td };
        adv[t] = if t + 1 < n {
            gamma * c[t] * adv[t + 1].max(0.0) + deltas[t]
        } else {
            deltas[t]
        };
    }
    Ok(AdvantageVector {
        advantages: adv,
        deltas,
        rho: rho.to_vec(),
        c: c.to_vec(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShiftWeights {
    /// `ln w_t = Σ_{k<t} ln ratio_k` per admission.
    pub log_raw: Vec<Vec<f64>>,
    /// Weights rescaled to mean 1 over every step of the batch.
    pub normalized: Vec<Vec<f64>>,
    /// `(Σw)² / Σw²`
    pub ess: f64,
}

impl ShiftWeights {
    pub fn raw(&self) -> Vec<Vec<f64>> {
        self.log_raw.iter().map(|r| r.iter().map(|l| l.exp()).collect()).collect()
    }
}

/// Products of all previous untruncated ratios, from log ratios.
pub fn distribution_shift_weights(log_ratios: &[Vec<f64>]) -> ShiftWeights {
    let log_raw: Vec<Vec<f64>> = log_ratios
        .iter()
        .map(|lr| {
            let mut acc = 0.0;
            lr.iter()
                .map(|l| {
                    let w = acc;
                    acc += l;
                    w
                })
                .collect()
        })
        .collect();
    let max = log_raw.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    let n = log_raw.iter().map(Vec::len).sum::<usize>();
    if n == 0 {
        return ShiftWeights {
            log_raw,
            normalized: Vec::new(),
            ess: 0.0,
        };
    }
    let scaled: Vec<Vec<f64>> = log_raw.iter().map(|r| r.iter().map(|l| (l - max).exp()).collect()).collect();
    let s1: f64 = scaled.iter().flatten().sum();
    let s2: f64 = scaled.iter().flatten().map(|w| w * w).sum();
    let normalized = scaled
        .iter()
        .map(|r| r.iter().map(|w| w * n as f64 / s1).collect())
        .collect();
    ShiftWeights {
        normalized,
        log_raw,
        ess: s1 * s1 / s2,
    }
}

/// Per-admission inputs to the composite loss. Advantages, weights and
/// targets are constants.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTrace<'a> {
    pub beliefs: &'a [Vec<f64>],
    pub actions: &'a [[f64; 2]],
    pub behavior_density: &'a [f64],
    pub advantages: Vec<f64>,
    pub weights: Vec<f64>,
    pub targets: Vec<Option<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossCoefficients {
    pub lambda_bc: f64,
    pub lambda_ess: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub policy_gradient: f64,
    pub value: f64,
    pub behavior_cloning: f64,
    pub ess_penalty: f64,
}

/// `−mean(w·A·log π) + 0.5·mean((V − v_T)²) + λ_bc·mean(−log π)
/// + λ_ess·(N/ESS − 1)`. The value mean runs over steps with a target.
pub fn actor_critic_loss(
    net: &PolicyValueNet,
    batch: &[LossTrace],
    coeffs: LossCoefficients,
    with_grad: bool,
) -> Result<(LossTerms, Option<Vec<Tensor>>), NnError> {
    let mut tape = GradTape::new();
    let slot = tape.bind(&net.params);
    let mut pg = Vec::new();
    let mut bc = Vec::new();
    let mut vf = Vec::new();
    let mut log_w = Vec::new();
    for tr in batch {
        let mut acc: Option<Var> = None;
        for t in 0..tr.actions.len() {
            let s = tape.constant(tr.beliefs[t].clone());
            let (m, ls, v) = net.forward_tape(&mut tape, slot, s)?;
            let a = tape.constant(tr.actions[t].to_vec());
            let lp = tape_gaussian_log_prob(&mut tape, a, m, ls);
            pg.push(tape.scale(lp, -tr.weights[t] * tr.advantages[t]));
            bc.push(tape.scale(lp, -1.0));
            if let Some(target) = tr.targets[t] {
                let d = tape.offset(v, -target);
                vf.push(tape.square(d));
            }
            if coeffs.lambda_ess > 0.0 {
                log_w.push(acc.unwrap_or_else(|| tape.scalar_constant(0.0)));
                let step = tape.offset(lp, -tr.behavior_density[t].ln());
                acc = Some(match acc {
                    Some(prev) => tape.add(prev, step),
                    None => step,
                });
            }
        }
    }
    let n = pg.len();
    if n == 0 {
        return Ok((LossTerms::default(), with_grad.then(|| net.params.zeros_like())));
    }
    let mean_of = |tape: &mut GradTape, xs: &[Var], c: f64| {
        let s = tape.add_all(xs);
        tape.scale(s, c / xs.len() as f64)
    };
    let pg_v = mean_of(&mut tape, &pg, 1.0);
    let bc_v = mean_of(&mut tape, &bc, coeffs.lambda_bc);
    let mut terms = vec![pg_v, bc_v];
    let vf_v = (!vf.is_empty()).then(|| mean_of(&mut tape, &vf, VALUE_WEIGHT));
    terms.extend(vf_v);
    let ess_v = if coeffs.lambda_ess > 0.0 {
        let shift = log_w.iter().map(|&v| tape.scalar(v)).fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<Var> = log_w
            .iter()
            .map(|&l| {
                let l = tape.offset(l, -shift);
                tape.exp(l)
            })
            .collect();
        let w2: Vec<Var> = w.iter().map(|&x| tape.square(x)).collect();
        let s1 = tape.add_all(&w);
        let s2 = tape.add_all(&w2);
        let ln1 = tape.ln(s1);
        let ln2 = tape.ln(s2);
        let ln1 = tape.scale(ln1, -2.0);
        let r = tape.add(ln2, ln1);
        let r = tape.exp(r);
        let r = tape.scale(r, n as f64);
        let r = tape.offset(r, -1.0);
        Some(tape.scale(r, coeffs.lambda_ess))
    } else {
        None
    };
    terms.extend(ess_v);
    let total = tape.add_all(&terms);
    let out = LossTerms {
        total: tape.scalar(total),
        policy_gradient: tape.scalar(pg_v),
        value: vf_v.map_or(0.0, |v| tape.scalar(v)),
        behavior_cloning: tape.scalar(bc_v),
        ess_penalty: ess_v.map_or(0.0, |v| tape.scalar(v)),
    };
    Ok((out, with_grad.then(|| tape.backward(total).take_slot(slot))))
}

/// Frozen models that grow search trees.
#[derive(Debug, Clone, Copy)]
pub struct BeliefModels<'a> {
    pub encoder: &'a HistoryEncoder,
    pub cvae: &'a ObsCvae,
}

/// Search-model view of the frozen belief models plus the current net.
pub struct LearnedSearch<'a> {
    pub models: BeliefModels<'a>,
    pub net: &'a PolicyValueNet,
    pub likelihood_k_z: usize,
}

impl SearchModel for LearnedSearch<'_> {
    fn value(&self, belief: &[f64]) -> f64 {
        self.net.value(belief)
    }

    fn sample_action(&self, belief: &[f64], rng: &mut dyn RngCore) -> [f64; 2] {
        self.net.sample(belief, rng)
    }

    fn simulate(&self, belief: &[f64], action: [f64; 2], rng: &mut dyn RngCore) -> (Vec<f64>, f64) {
        let o = self.models.cvae.sample_next_observation(belief, action, rng);
        let ll = self
            .models
            .cvae
            .observation_log_likelihood(belief, action, &o, self.likelihood_k_z, rng);
        let n_cont = self.models.encoder.input_dim() - o.len();
        let next = self
            .models
            .encoder
            .step(belief, action, &obs_input(&o, &vec![1.0; n_cont]))
            .expect("cvae and encoder share a schema");
        (next, ll)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PolicyIteration {
    pub iteration: usize,
    pub loss: LossTerms,
    pub ess: f64,
    pub mean_abs_advantage: f64,
    pub mean_target: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PolicyTrainLog {
    pub iterations: Vec<PolicyIteration>,
}

impl PolicyTrainLog {
    /// Tab-separated log with a header row.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("iteration\ttotal\tpolicy_gradient\tvalue\tbehavior_cloning\tess_penalty\tess\tmean_abs_advantage\tmean_target\tgrad_norm\n");
        for it in &self.iterations {
            let l = &it.loss;
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                it.iteration,
                l.total,
                l.policy_gradient,
                l.value,
                l.behavior_cloning,
                l.ess_penalty,
                it.ess,
                it.mean_abs_advantage,
                it.mean_target,
                it.grad_norm
            ));
        }
        out
    }
}

/// Chooses searched states: a `terminal_fraction` share from last steps
/// of terminal admissions, the rest uniformly over all steps.
fn pick_search_states<R: Rng>(batch: &[&Trace], config: &PolicyConfig, rng: &mut R) -> Vec<(usize, usize)> {
    let terminal: Vec<(usize, usize)> = batch
        .iter()
        .enumerate()
        .filter(|(_, t)| t.terminal)
        .map(|(i, t)| (i, t.len() - 1))
        .collect();
    let all: Vec<(usize, usize)> = batch
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |s| (i, s)))
        .collect();
    let budget = config.search_states.min(all.len());
    let n_term = ((budget as f64 * config.terminal_fraction).round() as usize).min(terminal.len());
    let mut picked: Vec<(usize, usize)> = index::sample(rng, terminal.len(), n_term)
        .into_iter()
        .map(|k| terminal[k])
        .collect();
    let rest: Vec<(usize, usize)> = all.into_iter().filter(|p| !picked.contains(p)).collect();
    let n_rest = (budget - n_term).min(rest.len());
    picked.extend(index::sample(rng, rest.len(), n_rest).into_iter().map(|k| rest[k]));
    picked.sort_unstable();
    picked
}

/// Trains from scratch; see [`train_policy_from`].
pub fn train_policy(
    traces: &[Trace],
    models: BeliefModels,
    config: &PolicyConfig,
    seed: u64,
    on_checkpoint: impl FnMut(usize, &PolicyValueNet) -> Result<(), TrainError>,
) -> Result<(PolicyValueNet, PolicyTrainLog), TrainError> {
    let belief_dim = models.encoder.belief_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = PolicyValueNet::new(belief_dim, config.hidden, config.log_std_bounds, &mut rng);
    train_policy_from(net, traces, models, config, rng.next_u64(), on_checkpoint)
}

/// Alternates tree search on sampled states with actor-critic steps.
/// Searched roots at the last step of a terminal admission take the
/// observed terminal reward as their target; every other searched root
/// takes `v_T(root)`.
pub fn train_policy_from(
    mut net: PolicyValueNet,
    traces: &[Trace],
    models: BeliefModels,
    config: &PolicyConfig,
    seed: u64,
    mut on_checkpoint: impl FnMut(usize, &PolicyValueNet) -> Result<(), TrainError>,
) -> Result<(PolicyValueNet, PolicyTrainLog), TrainError> {
    config.validate()?;
    let usable: Vec<&Trace> = traces.iter().filter(|t| !t.is_empty()).collect();
    if usable.is_empty() {
        return Err(TrainError::NoData("policy"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = RmsPropState::new(
        &net.params,
        RmsPropConfig {
            lr: config.lr,
            eps: config.rms_eps,
            ..RmsPropConfig::default()
        },
    );
    let coeffs = LossCoefficients {
        lambda_bc: config.lambda_bc,
        lambda_ess: config.lambda_ess,
    };
    let mut log = PolicyTrainLog::default();
    for iteration in 1..=config.iterations {
        let diverged = |d: String| TrainError::Divergence {
            stage: "policy",
            iteration,
            diagnostics: d,
        };
        let mut batch = usable.clone();
        batch.shuffle(&mut rng);
        batch.truncate(config.batch_admissions.max(1));

        let mut advs = Vec::with_capacity(batch.len());
        let mut log_ratios = Vec::with_capacity(batch.len());
        for tr in &batch {
            let outs: Vec<PolicyOutput> = tr.beliefs.iter().map(|s| net.evaluate(s)).collect();
            let values: Vec<f64> = outs.iter().map(|o| o.value).collect();
            let r: Vec<Ratio> = outs
                .iter()
                .zip(&tr.actions)
                .zip(&tr.behavior_density)
                .map(|((o, a), b)| truncated_ratios(o.log_prob(*a), *b, config.rho_bar, config.c_bar))
                .collect();
            log_ratios.push(
                outs.iter()
                    .zip(&tr.actions)
                    .zip(&tr.behavior_density)
                    .map(|((o, a), b)| o.log_prob(*a) - b.ln())
                    .collect::<Vec<f64>>(),
            );
            let next = match (&tr.bootstrap, tr.terminal) {
                (Some(b), false) => net.value(b),
                _ => 0.0,
            };
            let rho: Vec<f64> = r.iter().map(|x| x.rho).collect();
            let c: Vec<f64> = r.iter().map(|x| x.c).collect();
            advs.push(upgoing_advantage(&values, next, &tr.rewards, &rho, &c, config.gamma, config.weighted_delta)?);
        }
        let shift = distribution_shift_weights(&log_ratios);

        let searched = pick_search_states(&batch, config, &mut rng);
        let search = LearnedSearch {
            models,
            net: &net,
            likelihood_k_z: config.likelihood_k_z,
        };
        let mut targets: Vec<Vec<Option<f64>>> = batch.iter().map(|t| vec![None; t.len()]).collect();
        let mut target_sum = 0.0;
        for &(i, t) in &searched {
            let mut srng = ChaCha8Rng::seed_from_u64(rng.next_u64());
            let tr = batch[i];
            let v = if tr.terminal && t + 1 == tr.len() {
                tr.rewards[t]
            } else {
                search_value(&tr.beliefs[t], &search, &config.search, &mut srng).map_err(|e| diverged(e.to_string()))?
            };
            target_sum += v;
            targets[i][t] = Some(v);
        }

        let loss_batch: Vec<LossTrace> = batch
            .iter()
            .zip(advs.iter())
            .zip(targets)
            .enumerate()
            .map(|(i, ((tr, adv), targets))| LossTrace {
                beliefs: &tr.beliefs,
                actions: &tr.actions,
                behavior_density: &tr.behavior_density,
                advantages: adv.advantages.clone(),
                weights: if config.shift_weights {
                    shift.normalized[i].clone()
                } else {
                    vec![1.0; tr.len()]
                },
                targets,
            })
            .collect();
        let (terms, grads) = actor_critic_loss(&net, &loss_batch, coeffs, true).map_err(|e| diverged(e.to_string()))?;
        if !terms.total.is_finite() {
            return Err(diverged(format!("{terms:?}")));
        }
        let grad_norm = clipped_step(
            &mut [&mut net.params],
            std::slice::from_mut(&mut state),
            vec![grads.expect("requested")],
            MAX_GRAD_NORM,
        );
        let n_steps: usize = advs.iter().map(|a| a.advantages.len()).sum();
        let it = PolicyIteration {
            iteration,
            loss: terms,
            ess: shift.ess,
            mean_abs_advantage: advs.iter().flat_map(|a| &a.advantages).map(|a| a.abs()).sum::<f64>() / n_steps as f64,
            mean_target: target_sum / searched.len().max(1) as f64,
            grad_norm,
        };
        tracing::debug!(?it, "policy iteration");
        log.iterations.push(it);
        if config.checkpoint_every > 0 && iteration % config.checkpoint_every == 0 {
            on_checkpoint(iteration, &net)?;
        }
    }
    Ok((net, log))
}

/// Runs a trained policy online: sample-and-hold against the training
/// medians, a belief update per observation, and the policy mean mapped
/// back to raw doses.
#[derive(Debug, Clone)]
pub struct LearnedPolicy<'a> {
    pub preprocessor: &'a Preprocessor,
    pub encoder: &'a HistoryEncoder,
    pub net: &'a PolicyValueNet,
    held: Vec<f64>,
    belief: Vec<f64>,
    prev: [f64; 2],
}

impl<'a> LearnedPolicy<'a> {
    pub fn new(preprocessor: &'a Preprocessor, encoder: &'a HistoryEncoder, net: &'a PolicyValueNet) -> Self {
        Self {
            preprocessor,
            encoder,
            net,
            held: preprocessor.medians.0.clone(),
            belief: encoder.initial_belief(),
            prev: [0.0, 0.0],
        }
    }
}

impl ClinicalPolicy for LearnedPolicy<'_> {
    fn reset(&mut self, _rng: &mut dyn RngCore) {
        self.held = self.preprocessor.medians.0.clone();
        self.belief = self.encoder.initial_belief();
        self.prev = [0.0, 0.0];
    }

    fn act(&mut self, view: &PatientView, _rng: &mut dyn RngCore) -> DoseAction {
        let o = self.preprocessor.observe_online(&mut self.held, view.observation);
        let observed: Vec<f64> = view.observation.missing.iter().map(|m| if *m { 0.0 } else { 1.0 }).collect();
        self.belief = self
            .encoder
            .step(&self.belief, self.prev, &obs_input(&o, &observed))
            .expect("observation matches the preprocessor schema");
        let mean = self.net.evaluate(&self.belief).mean;
        let eq = [mean[0].clamp(0.0, 1.0), mean[1].clamp(0.0, 1.0)];
        self.prev = eq;
        let raw = self.preprocessor.decode_action(eq);
        DoseAction::new(raw[0], raw[1])
    }
}
