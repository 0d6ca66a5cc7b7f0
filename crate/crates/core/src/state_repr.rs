//! Belief states from observation/action history and the conditional
//! generative model of the next observation.
//!
//! The history encoder embeds `a_{t−1}` and `o_t` (with its measured-flag
//! vector) by two-layer perceptrons and feeds the concatenation to a GRU;
//! the hidden state is the belief `s_t`. The observation CVAE models
//! `p(o_{t+1} | s_t, a_t)` with a fixed-std Gaussian encoder over `z`, a
//! standard-normal prior, Gaussian continuous outputs with input-dependent
//! log-std, and Bernoulli binary outputs. Encoder and CVAE are trained
//! jointly: gradients of the negative ELBO flow through `s_t` into the GRU.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::cohort::ProcessedAdmission;
use crate::dist::{
    bernoulli_nll, gaussian_log_prob, log_sum_exp, tape_bernoulli_nll, tape_gaussian_sample, tape_kl_standard_normal,
    tape_masked_gaussian_log_prob, HALF_LN_2PI,
};
use crate::error::{CheckpointError, NnError, TrainError};
use crate::nn::{GruCell, Mlp};
use crate::optim::{clipped_step, RmsPropConfig, RmsPropState, MAX_GRAD_NORM};
use crate::tape::{GradTape, Slot, Var};
use crate::tensor::{ParamSet, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StateConfig {
    pub belief_dim: usize,
    pub embed_hidden: usize,
    pub embed_dim: usize,
    pub latent_dim: usize,
    pub cvae_hidden: usize,
    /// Fixed standard deviation of the CVAE encoder.
    pub encoder_std: f64,
    /// Bounds on the decoder log-std.
    pub decoder_log_std: [f64; 2],
    pub kl_weight: f64,
    pub lr: f64,
    pub rms_eps: f64,
    pub epochs: usize,
    pub batch_admissions: usize,
    pub heldout_fraction: f64,
    /// When false the history encoder keeps its initial weights and only
    /// the CVAE is fitted.
    pub train_encoder: bool,
}

impl Default for StateConfig {
    fn default() -> Self {
        Self {
            belief_dim: 64,
            embed_hidden: 32,
            embed_dim: 32,
            latent_dim: 16,
            cvae_hidden: 64,
            encoder_std: 0.1,
            decoder_log_std: [-4.0, 0.7],
            kl_weight: 1.0,
            lr: 5e-4,
            rms_eps: 1e-5,
            epochs: 5,
            batch_admissions: 8,
            heldout_fraction: 0.1,
            train_encoder: true,
        }
    }
}

/// Network input for one observation: values followed by measured flags.
pub fn obs_input(obs: &[f64], observed: &[f64]) -> Vec<f64> {
    let mut v = Vec::with_capacity(obs.len() + observed.len());
    v.extend_from_slice(obs);
    v.extend_from_slice(observed);
    v
}

/// `lo + (hi − lo)·σ(x)`
pub fn tape_bounded(tape: &mut GradTape, x: Var, lo: f64, hi: f64) -> Var {
    let s = tape.sigmoid(x);
    let s = tape.scale(s, hi - lo);
    tape.offset(s, lo)
}

fn shape_err(context: &'static str, expected: usize, found: usize) -> NnError {
    NnError::Shape {
        context,
        expected,
        found,
    }
}

/// Embeds `(a_{t−1}, o_t)` and advances a GRU.
#[derive(Debug, Clone)]
pub struct HistoryEncoder {
    pub params: ParamSet,
    obs_mlp: Mlp,
    act_mlp: Mlp,
    gru: GruCell,
    n_continuous: usize,
    n_binary: usize,
}

impl HistoryEncoder {
    pub fn new<R: Rng + ?Sized>(n_continuous: usize, n_binary: usize, cfg: &StateConfig, rng: &mut R) -> Self {
        let mut params = ParamSet::new();
        let in_dim = 2 * n_continuous + n_binary;
        let obs_mlp = Mlp::new(&mut params, "obs", in_dim, cfg.embed_hidden, cfg.embed_dim, 1.0, rng);
        let act_mlp = Mlp::new(&mut params, "act", 2, cfg.embed_hidden, cfg.embed_dim, 1.0, rng);
        let gru = GruCell::new(&mut params, "gru", 2 * cfg.embed_dim, cfg.belief_dim, rng);
        Self {
            params,
            obs_mlp,
            act_mlp,
            gru,
            n_continuous,
            n_binary,
        }
    }

    pub fn belief_dim(&self) -> usize {
        self.gru.hidden_dim()
    }

    /// Width of [`obs_input`] vectors.
    pub fn input_dim(&self) -> usize {
        2 * self.n_continuous + self.n_binary
    }

    pub fn step_tape(
        &self,
        tape: &mut GradTape,
        slot: Slot,
        h: Var,
        prev_action: Var,
        obs_in: Var,
    ) -> Result<Var, NnError> {
        let eo = self.obs_mlp.forward(tape, slot, obs_in)?;
        let eo = tape.relu(eo);
        let ea = self.act_mlp.forward(tape, slot, prev_action)?;
        let ea = tape.relu(ea);
        let x = tape.concat(&[ea, eo]);
        self.gru.step(tape, slot, x, h)
    }

    /// One belief update outside of training.
    pub fn step(&self, h: &[f64], prev_action: [f64; 2], obs_in: &[f64]) -> Result<Vec<f64>, NnError> {
        let mut tape = GradTape::new();
        let slot = tape.bind(&self.params);
        let hv = tape.constant(h.to_vec());
        let av = tape.constant(prev_action.to_vec());
        let ov = tape.constant(obs_in.to_vec());
        let out = self.step_tape(&mut tape, slot, hv, av, ov)?;
        Ok(tape.value(out).to_vec())
    }

    pub fn initial_belief(&self) -> Vec<f64> {
        vec![0.0; self.belief_dim()]
    }

    /// Beliefs `s_0 … s_{n−1}` for the first `n` steps; `a_{−1}` is zero.
    pub fn encode_upto(&self, adm: &ProcessedAdmission, n: usize) -> Vec<Vec<f64>> {
        let n = n.min(adm.len());
        let mut out = Vec::with_capacity(n);
        let mut h = self.initial_belief();
        for t in 0..n {
            let prev = if t == 0 { [0.0, 0.0] } else { adm.actions[t - 1] };
            h = self
                .step(&h, prev, &obs_input(&adm.obs[t], &adm.observed[t]))
                .expect("admission matches encoder schema");
            out.push(h.clone());
        }
        out
    }

    pub fn encode(&self, adm: &ProcessedAdmission) -> Vec<Vec<f64>> {
        self.encode_upto(adm, adm.len())
    }
}

/// Decoder output for one `(z, s, a)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedObservation {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
    pub logits: Vec<f64>,
}

impl DecodedObservation {
    /// `log p(o | decoder)` over continuous and binary parts.
    pub fn log_prob(&self, o: &[f64]) -> f64 {
        let c = self.mean.len();
        let lp = gaussian_log_prob(&o[..c], &self.mean, &self.log_std);
        lp - self
            .logits
            .iter()
            .zip(&o[c..])
            .map(|(l, y)| bernoulli_nll(*l, *y))
            .sum::<f64>()
    }
}

/// `q(z | o′, s, a)` and `p(o′ | z, s, a)`.
#[derive(Debug, Clone)]
pub struct ObsCvae {
    pub params: ParamSet,
    enc: Mlp,
    dec: Mlp,
    n_continuous: usize,
    n_binary: usize,
    latent: usize,
    encoder_log_std: f64,
    log_std_bounds: [f64; 2],
}

/// Pieces of one negative-ELBO evaluation.
#[derive(Debug, Clone, Copy)]
pub struct ElboTerms {
    pub loss: Var,
    pub recon: Var,
    pub kl: Var,
}

impl ObsCvae {
    pub fn new<R: Rng + ?Sized>(
        n_continuous: usize,
        n_binary: usize,
        belief_dim: usize,
        cfg: &StateConfig,
        rng: &mut R,
    ) -> Self {
        let mut params = ParamSet::new();
        let obs_dim = n_continuous + n_binary;
        let enc = Mlp::new(&mut params, "enc", obs_dim + belief_dim + 2, cfg.cvae_hidden, cfg.latent_dim, 1.0, rng);
        let dec = Mlp::new(
            &mut params,
            "dec",
            cfg.latent_dim + belief_dim + 2,
            cfg.cvae_hidden,
            2 * n_continuous + n_binary,
            1.0,
            rng,
        );
        Self {
            params,
            enc,
            dec,
            n_continuous,
            n_binary,
            latent: cfg.latent_dim,
            encoder_log_std: cfg.encoder_std.ln(),
            log_std_bounds: cfg.decoder_log_std,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.latent
    }

    pub fn obs_dim(&self) -> usize {
        self.n_continuous + self.n_binary
    }

    pub fn encoder_log_std(&self) -> f64 {
        self.encoder_log_std
    }

    pub fn log_std_bounds(&self) -> [f64; 2] {
        self.log_std_bounds
    }

    /// Index of the decoder output bias, whose entries are laid out as
    /// `[mean (C), log-std pre-activation (C), logits (B)]`.
    pub fn decoder_bias_index(&self) -> usize {
        self.dec.output_layer().bias_index()
    }

    pub fn encoder_bias_index(&self) -> usize {
        self.enc.output_layer().bias_index()
    }

    pub fn encode_tape(&self, tape: &mut GradTape, slot: Slot, o: Var, s: Var, a: Var) -> Result<Var, NnError> {
        let x = tape.concat(&[o, s, a]);
        self.enc.forward(tape, slot, x)
    }

    pub fn decode_tape(
        &self,
        tape: &mut GradTape,
        slot: Slot,
        z: Var,
        s: Var,
        a: Var,
    ) -> Result<(Var, Var, Option<Var>), NnError> {
        let x = tape.concat(&[z, s, a]);
        let out = self.dec.forward(tape, slot, x)?;
        let c = self.n_continuous;
        let mean = tape.slice(out, 0, c);
        let raw = tape.slice(out, c, c);
        let [lo, hi] = self.log_std_bounds;
        let log_std = tape_bounded(tape, raw, lo, hi);
        let logits = (self.n_binary > 0).then(|| tape.slice(out, 2 * c, self.n_binary));
        Ok((mean, log_std, logits))
    }

    /// Negative ELBO for one transition. `observed` masks the continuous
    /// part of `o_next`; `noise` is the reparameterization draw for `z`.
    #[allow(clippy::too_many_arguments)]
    pub fn loss_tape(
        &self,
        tape: &mut GradTape,
        slot: Slot,
        s: Var,
        a: Var,
        o_next: &[f64],
        observed: &[f64],
        noise: &[f64],
        kl_weight: f64,
    ) -> Result<ElboTerms, NnError> {
        if o_next.len() != self.obs_dim() {
            return Err(shape_err("cvae observation", self.obs_dim(), o_next.len()));
        }
        if noise.len() != self.latent {
            return Err(shape_err("cvae noise", self.latent, noise.len()));
        }
        let c = self.n_continuous;
        let o = tape.constant(o_next.to_vec());
        let mu = self.encode_tape(tape, slot, o, s, a)?;
        let ls = tape.constant(vec![self.encoder_log_std; self.latent]);
        let eps = tape.constant(noise.to_vec());
        let z = tape_gaussian_sample(tape, mu, ls, eps);
        let (mean, log_std, logits) = self.decode_tape(tape, slot, z, s, a)?;
        let oc = tape.constant(o_next[..c].to_vec());
        let lp = tape_masked_gaussian_log_prob(tape, oc, mean, log_std, observed);
        let mut recon = tape.scale(lp, -1.0);
        if let Some(l) = logits {
            let bce = tape_bernoulli_nll(tape, l, &o_next[c..]);
            recon = tape.add(recon, bce);
        }
        let kl = tape_kl_standard_normal(tape, mu, ls);
        let wkl = tape.scale(kl, kl_weight);
        let loss = tape.add(recon, wkl);
        Ok(ElboTerms { loss, recon, kl })
    }

    pub fn decode(&self, z: &[f64], s: &[f64], a: [f64; 2]) -> DecodedObservation {
        let mut tape = GradTape::new();
        let slot = tape.bind(&self.params);
        let zv = tape.constant(z.to_vec());
        let sv = tape.constant(s.to_vec());
        let av = tape.constant(a.to_vec());
        let (m, ls, lg) = self.decode_tape(&mut tape, slot, zv, sv, av).expect("decoder widths");
        DecodedObservation {
            mean: tape.value(m).to_vec(),
            log_std: tape.value(ls).to_vec(),
            logits: lg.map(|l| tape.value(l).to_vec()).unwrap_or_default(),
        }
    }

    pub fn encode_mean(&self, o: &[f64], s: &[f64], a: [f64; 2]) -> Vec<f64> {
        let mut tape = GradTape::new();
        let slot = tape.bind(&self.params);
        let ov = tape.constant(o.to_vec());
        let sv = tape.constant(s.to_vec());
        let av = tape.constant(a.to_vec());
        let mu = self.encode_tape(&mut tape, slot, ov, sv, av).expect("encoder widths");
        tape.value(mu).to_vec()
    }

    /// Draws `z ~ p(z)` then `o′ ~ p(o′ | z, s, a)`. The result is fully
    /// observed: equalized continuous values followed by 0/1 flags.
    pub fn sample_next_observation<R: Rng + ?Sized>(&self, s: &[f64], a: [f64; 2], rng: &mut R) -> Vec<f64> {
        let z: Vec<f64> = (0..self.latent).map(|_| rng.sample(StandardNormal)).collect();
        let d = self.decode(&z, s, a);
        let mut o: Vec<f64> = d
            .mean
            .iter()
            .zip(&d.log_std)
            .map(|(m, ls)| m + ls.exp() * rng.sample::<f64, _>(StandardNormal))
            .collect();
        for l in &d.logits {
            let p = 1.0 / (1.0 + (-l).exp());
            o.push(if rng.random::<f64>() < p { 1.0 } else { 0.0 });
        }
        o
    }

    /// `log p̂(o′ | s, a)`. With `k_z = 1` this is the decoder density at
    /// the prior mean `z = 0`; larger `k_z` averages
    /// `p(o′|z)p(z)/q(z|o′)` over encoder draws.
    pub fn observation_log_likelihood<R: Rng + ?Sized>(
        &self,
        s: &[f64],
        a: [f64; 2],
        o: &[f64],
        k_z: usize,
        rng: &mut R,
    ) -> f64 {
        if k_z <= 1 {
            return self.decode(&vec![0.0; self.latent], s, a).log_prob(o);
        }
        let mu = self.encode_mean(o, s, a);
        let ls = vec![self.encoder_log_std; self.latent];
        let zero = vec![0.0; self.latent];
        let terms: Vec<f64> = (0..k_z)
            .map(|_| {
                let z: Vec<f64> = mu
                    .iter()
                    .map(|m| m + self.encoder_log_std.exp() * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                self.decode(&z, s, a).log_prob(o) + gaussian_log_prob(&z, &zero, &zero)
                    - gaussian_log_prob(&z, &mu, &ls)
            })
            .collect();
        log_sum_exp(&terms) - (k_z as f64).ln()
    }

    pub fn observation_likelihood<R: Rng + ?Sized>(&self, s: &[f64], a: [f64; 2], o: &[f64], k_z: usize, rng: &mut R) -> f64 {
        self.observation_log_likelihood(s, a, o, k_z, rng).exp()
    }
}

/// Negative ELBO of one transition without gradient bookkeeping.
#[allow(clippy::too_many_arguments)]
pub fn cvae_loss(
    cvae: &ObsCvae,
    s: &[f64],
    a: [f64; 2],
    o_next: &[f64],
    observed: &[f64],
    noise: &[f64],
    kl_weight: f64,
) -> Result<f64, NnError> {
    let mut tape = GradTape::new();
    let slot = tape.bind(&cvae.params);
    let sv = tape.constant(s.to_vec());
    let av = tape.constant(a.to_vec());
    let t = cvae.loss_tape(&mut tape, slot, sv, av, o_next, observed, noise, kl_weight)?;
    Ok(tape.scalar(t.loss))
}

/// Encoder plus CVAE with the configuration that built them.
#[derive(Debug, Clone)]
pub struct StateModel {
    pub config: StateConfig,
    pub encoder: HistoryEncoder,
    pub cvae: ObsCvae,
}

impl StateModel {
    pub fn new<R: Rng + ?Sized>(n_continuous: usize, n_binary: usize, config: StateConfig, rng: &mut R) -> Self {
        let encoder = HistoryEncoder::new(n_continuous, n_binary, &config, rng);
        let cvae = ObsCvae::new(n_continuous, n_binary, config.belief_dim, &config, rng);
        Self { config, encoder, cvae }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(serde_json::json!({
            "kind": "state",
            "n_continuous": self.encoder.n_continuous,
            "n_binary": self.encoder.n_binary,
            "config": self.config,
        }));
        ck.add_params("encoder", &self.encoder.params);
        ck.add_params("cvae", &self.cvae.params);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, CheckpointError> {
        let config: StateConfig = ck.meta("config")?;
        let mut m = Self::new(
            ck.meta("n_continuous")?,
            ck.meta("n_binary")?,
            config,
            &mut ChaCha8Rng::seed_from_u64(0),
        );
        m.encoder.params.assign(ck.params("encoder"))?;
        m.cvae.params.assign(ck.params("cvae"))?;
        Ok(m)
    }
}

/// Mean per-transition loss of `batch` on one tape, plus gradients for
/// the encoder and the CVAE.
pub fn batch_loss(
    model: &StateModel,
    batch: &[&ProcessedAdmission],
    noise: &[Vec<Vec<f64>>],
    with_grad: bool,
) -> Result<(f64, usize, Option<(Vec<Tensor>, Vec<Tensor>)>), NnError> {
    let mut tape = GradTape::new();
    let es = tape.bind(&model.encoder.params);
    let cs = tape.bind(&model.cvae.params);
    let mut terms = Vec::new();
    for (adm, eps) in batch.iter().zip(noise) {
        let mut h = tape.constant(model.encoder.initial_belief());
        for t in 0..adm.len().saturating_sub(1) {
            let prev = tape.constant(if t == 0 { vec![0.0, 0.0] } else { adm.actions[t - 1].to_vec() });
            let oi = tape.constant(obs_input(&adm.obs[t], &adm.observed[t]));
            h = model.encoder.step_tape(&mut tape, es, h, prev, oi)?;
            let a = tape.constant(adm.actions[t].to_vec());
            let e = model.cvae.loss_tape(
                &mut tape,
                cs,
                h,
                a,
                &adm.obs[t + 1],
                &adm.observed[t + 1],
                &eps[t],
                model.config.kl_weight,
            )?;
            terms.push(e.loss);
        }
    }
    let n = terms.len();
    if n == 0 {
        return Ok((0.0, 0, None));
    }
    let total = tape.add_all(&terms);
    let mean = tape.scale(total, 1.0 / n as f64);
    let value = tape.scalar(mean);
    let grads = with_grad.then(|| {
        let mut g = tape.backward(mean);
        (g.take_slot(es), g.take_slot(cs))
    });
    Ok((value, n, grads))
}

/// Standard-normal latent noise, one draw per transition.
pub fn draw_noise<R: Rng + ?Sized>(adms: &[&ProcessedAdmission], latent: usize, rng: &mut R) -> Vec<Vec<Vec<f64>>> {
    adms.iter()
        .map(|a| {
            (0..a.len().saturating_sub(1))
                .map(|_| (0..latent).map(|_| rng.sample(StandardNormal)).collect())
                .collect()
        })
        .collect()
}

/// Per-epoch losses of a state-representation run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StateTrainLog {
    pub initial_heldout: f64,
    pub epochs: Vec<EpochLoss>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train: f64,
    pub heldout: f64,
}

/// Mean held-out negative ELBO with noise fixed by `seed`.
pub fn heldout_loss(model: &StateModel, adms: &[&ProcessedAdmission], seed: u64) -> Result<f64, NnError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = draw_noise(adms, model.cvae.latent_dim(), &mut rng);
    let (mut sum, mut n) = (0.0, 0usize);
    for (a, e) in adms.iter().zip(&noise) {
        let (v, k, _) = batch_loss(model, std::slice::from_ref(a), std::slice::from_ref(e), false)?;
        sum += v * k as f64;
        n += k;
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Fits encoder and CVAE jointly on `train` by RMSProp on the mean
/// per-transition negative ELBO.
pub fn train_state_representation(
    train: &[ProcessedAdmission],
    n_continuous: usize,
    n_binary: usize,
    config: StateConfig,
    seed: u64,
) -> Result<(StateModel, StateTrainLog), TrainError> {
    if train.is_empty() {
        return Err(TrainError::NoData("state representation"));
    }
    if !(config.lr > 0.0 && config.rms_eps > 0.0 && config.encoder_std > 0.0) {
        return Err(TrainError::Hyper("lr, rms_eps and encoder_std must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = StateModel::new(n_continuous, n_binary, config.clone(), &mut rng);
    let mut log = StateTrainLog::default();
    if train.iter().all(|a| a.len() < 2) {
        tracing::warn!("no admission has a next observation; state representation left at initialization");
        return Ok((model, log));
    }

    let mut order: Vec<&ProcessedAdmission> = train.iter().collect();
    order.shuffle(&mut rng);
    let n_held = ((train.len() as f64) * config.heldout_fraction).floor() as usize;
    let n_held = n_held.min(train.len() - 1);
    let (held, fit) = order.split_at(n_held);
    let mut fit: Vec<&ProcessedAdmission> = fit.to_vec();
    let held_seed = seed ^ 0x5eed_0b5e;
    let diverged = |iteration: usize, what: String| TrainError::Divergence {
        stage: "state representation",
        iteration,
        diagnostics: what,
    };
    log.initial_heldout = heldout_loss(&model, held, held_seed).map_err(|e| diverged(0, e.to_string()))?;

    let opt = RmsPropConfig {
        lr: config.lr,
        eps: config.rms_eps,
        ..RmsPropConfig::default()
    };
    let mut states = [
        RmsPropState::new(&model.encoder.params, opt),
        RmsPropState::new(&model.cvae.params, opt),
    ];
    let mut iteration = 0;
    for epoch in 0..config.epochs {
        fit.shuffle(&mut rng);
        let (mut sum, mut count) = (0.0, 0usize);
        for batch in fit.chunks(config.batch_admissions.max(1)) {
            iteration += 1;
            let noise = draw_noise(batch, model.cvae.latent_dim(), &mut rng);
            let (loss, n, grads) = batch_loss(&model, batch, &noise, true).map_err(|e| diverged(iteration, e.to_string()))?;
            let Some((ge, gc)) = grads else { continue };
            if !loss.is_finite() {
                return Err(diverged(iteration, format!("epoch {epoch}, batch loss {loss}")));
            }
            sum += loss * n as f64;
            count += n;
            if config.train_encoder {
                clipped_step(
                    &mut [&mut model.encoder.params, &mut model.cvae.params],
                    &mut states,
                    vec![ge, gc],
                    MAX_GRAD_NORM,
                );
            } else {
                clipped_step(&mut [&mut model.cvae.params], &mut states[1..], vec![gc], MAX_GRAD_NORM);
            }
        }
        let heldout = heldout_loss(&model, held, held_seed).map_err(|e| diverged(iteration, e.to_string()))?;
        let train_loss = if count > 0 { sum / count as f64 } else { 0.0 };
        tracing::info!(epoch, train_loss, heldout, "state representation epoch");
        log.epochs.push(EpochLoss {
            epoch,
            train: train_loss,
            heldout,
        });
    }
    Ok((model, log))
}

/// Held-out log-likelihood of a per-feature marginal baseline: Gaussian
/// moments of each observed continuous feature and Bernoulli rates of each
/// binary one, fitted on `fit`, scored on the next observations of `test`.
pub fn marginal_baseline_log_likelihood(fit: &[ProcessedAdmission], test: &[ProcessedAdmission], n_continuous: usize) -> f64 {
    let obs_dim = fit.first().map(|a| a.obs[0].len()).unwrap_or(n_continuous);
    let mut sum = vec![0.0; obs_dim];
    let mut sq = vec![0.0; obs_dim];
    let mut cnt = vec![0.0; obs_dim];
    for a in fit {
        for t in 1..a.len() {
            for i in 0..obs_dim {
                let w = if i < n_continuous { a.observed[t][i] } else { 1.0 };
                sum[i] += w * a.obs[t][i];
                sq[i] += w * a.obs[t][i] * a.obs[t][i];
                cnt[i] += w;
            }
        }
    }
    let mean: Vec<f64> = (0..obs_dim).map(|i| sum[i] / cnt[i].max(1.0)).collect();
    let var: Vec<f64> = (0..obs_dim)
        .map(|i| (sq[i] / cnt[i].max(1.0) - mean[i] * mean[i]).max(1e-6))
        .collect();
    let (mut ll, mut n) = (0.0, 0usize);
    for a in test {
        for t in 1..a.len() {
            for i in 0..obs_dim {
                let x = a.obs[t][i];
                if i < n_continuous {
                    if a.observed[t][i] > 0.0 {
                        ll += -HALF_LN_2PI - 0.5 * var[i].ln() - 0.5 * (x - mean[i]).powi(2) / var[i];
                    }
                } else {
                    let p = mean[i].clamp(1e-6, 1.0 - 1e-6);
                    ll += if x > 0.5 { p.ln() } else { (1.0 - p).ln() };
                }
            }
            n += 1;
        }
    }
    ll / n.max(1) as f64
}

/// Held-out next-observation log-likelihood of the model (prior-mean
/// decoder density, masked to measured continuous features).
pub fn model_log_likelihood(model: &StateModel, test: &[ProcessedAdmission]) -> f64 {
    let (mut ll, mut n) = (0.0, 0usize);
    let c = model.encoder.n_continuous;
    for a in test {
        let beliefs = model.encoder.encode(a);
        for t in 0..a.len().saturating_sub(1) {
            let d = model.cvae.decode(&vec![0.0; model.cvae.latent_dim()], &beliefs[t], a.actions[t]);
            let o = &a.obs[t + 1];
            for i in 0..c {
                if a.observed[t + 1][i] > 0.0 {
                    ll += gaussian_log_prob(&o[i..=i], &d.mean[i..=i], &d.log_std[i..=i]);
                }
            }
            ll -= d.logits.iter().zip(&o[c..]).map(|(l, y)| bernoulli_nll(*l, *y)).sum::<f64>();
            n += 1;
        }
    }
    ll / n.max(1) as f64
}
