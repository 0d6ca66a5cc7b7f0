//! Clinician behavior policy `π_b(a | s)` as a conditional VAE over
//! equalized actions.
//!
//! A CVAE has no closed-form density, so `π_b(a|s)` is estimated by
//! averaging the decoder density over `K_z` prior draws of `z`, floored at
//! [`DENSITY_FLOOR`].

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dist::{gaussian_log_prob, log_sum_exp, tape_gaussian_log_prob, tape_gaussian_sample, tape_kl_standard_normal};
use crate::error::{CheckpointError, NnError, TrainError};
use crate::nn::Mlp;
use crate::optim::{clipped_step, RmsPropConfig, RmsPropState, MAX_GRAD_NORM};
use crate::state_repr::tape_bounded;
use crate::tape::{GradTape, Slot, Var};
use crate::tensor::{ParamSet, Tensor};

pub const DENSITY_FLOOR: f64 = 1e-30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BehaviorConfig {
    pub latent_dim: usize,
    pub hidden: usize,
    pub encoder_std: f64,
    pub decoder_log_std: [f64; 2],
    pub kl_weight: f64,
    pub lr: f64,
    pub rms_eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub heldout_fraction: f64,
    /// Prior draws per density estimate.
    pub k_z: usize,
}

impl Default for BehaviorConfig {
    fn default() -> Self {
        Self {
            latent_dim: 8,
            hidden: 64,
            encoder_std: 0.1,
            decoder_log_std: [-4.0, 0.0],
            kl_weight: 1.0,
            lr: 5e-4,
            rms_eps: 1e-5,
            epochs: 5,
            batch_size: 64,
            heldout_fraction: 0.1,
            k_z: 32,
        }
    }
}

/// One `(belief, equalized action)` training pair.
#[derive(Debug, Clone, PartialEq)]
pub struct BeliefAction {
    pub belief: Vec<f64>,
    pub action: [f64; 2],
}

#[derive(Debug, Clone)]
pub struct BehaviorCvae {
    pub config: BehaviorConfig,
    pub params: ParamSet,
    enc: Mlp,
    dec: Mlp,
    belief_dim: usize,
}

impl BehaviorCvae {
    pub fn new<R: Rng + ?Sized>(belief_dim: usize, config: BehaviorConfig, rng: &mut R) -> Self {
        let mut params = ParamSet::new();
        let enc = Mlp::new(&mut params, "enc", 2 + belief_dim, config.hidden, config.latent_dim, 1.0, rng);
        let dec = Mlp::new(&mut params, "dec", config.latent_dim + belief_dim, config.hidden, 4, 1.0, rng);
        Self {
            config,
            params,
            enc,
            dec,
            belief_dim,
        }
    }

    pub fn belief_dim(&self) -> usize {
        self.belief_dim
    }

    pub fn decoder_bias_index(&self) -> usize {
        self.dec.output_layer().bias_index()
    }

    /// Decoder mean (squashed into the unit square) and log-std.
    pub fn decode_tape(&self, tape: &mut GradTape, slot: Slot, z: Var, s: Var) -> Result<(Var, Var), NnError> {
        let x = tape.concat(&[z, s]);
        let out = self.dec.forward(tape, slot, x)?;
        let m = tape.slice(out, 0, 2);
        let mean = tape.sigmoid(m);
        let raw = tape.slice(out, 2, 2);
        let [lo, hi] = self.config.decoder_log_std;
        Ok((mean, tape_bounded(tape, raw, lo, hi)))
    }

    /// Negative ELBO of one pair.
    pub fn loss_tape(
        &self,
        tape: &mut GradTape,
        slot: Slot,
        s: Var,
        action: [f64; 2],
        noise: &[f64],
    ) -> Result<Var, NnError> {
        let a = tape.constant(action.to_vec());
        let x = tape.concat(&[a, s]);
        let mu = self.enc.forward(tape, slot, x)?;
        let ls = tape.constant(vec![self.config.encoder_std.ln(); self.config.latent_dim]);
        let eps = tape.constant(noise.to_vec());
        let z = tape_gaussian_sample(tape, mu, ls, eps);
        let (mean, log_std) = self.decode_tape(tape, slot, z, s)?;
        let lp = tape_gaussian_log_prob(tape, a, mean, log_std);
        let kl = tape_kl_standard_normal(tape, mu, ls);
        let kl = tape.scale(kl, self.config.kl_weight);
        Ok(tape.sub(kl, lp))
    }

    pub fn decode(&self, z: &[f64], s: &[f64]) -> ([f64; 2], [f64; 2]) {
        let mut tape = GradTape::new();
        let slot = tape.bind(&self.params);
        let zv = tape.constant(z.to_vec());
        let sv = tape.constant(s.to_vec());
        let (m, ls) = self.decode_tape(&mut tape, slot, zv, sv).expect("decoder widths");
        let (m, ls) = (tape.value(m), tape.value(ls));
        ([m[0], m[1]], [ls[0], ls[1]])
    }

    /// `ln π̂_b(a|s)` from `k_z` prior draws, floored at `ln 1e-30`.
    pub fn log_density<R: Rng + ?Sized>(&self, s: &[f64], a: [f64; 2], k_z: usize, rng: &mut R) -> f64 {
        self.density(s, a, k_z, rng).ln()
    }

    pub fn density<R: Rng + ?Sized>(&self, s: &[f64], a: [f64; 2], k_z: usize, rng: &mut R) -> f64 {
        let k = k_z.max(1);
        let terms: Vec<f64> = (0..k)
            .map(|_| {
                let z: Vec<f64> = (0..self.config.latent_dim).map(|_| rng.sample(StandardNormal)).collect();
                let (m, ls) = self.decode(&z, s);
                gaussian_log_prob(&a, &m, &ls)
            })
            .collect();
        (log_sum_exp(&terms) - (k as f64).ln()).exp().max(DENSITY_FLOOR)
    }

    /// `z ~ p(z)`, `a ~ p(a|z,s)`, clipped to the unit square.
    pub fn sample<R: Rng + ?Sized>(&self, s: &[f64], rng: &mut R) -> [f64; 2] {
        let z: Vec<f64> = (0..self.config.latent_dim).map(|_| rng.sample(StandardNormal)).collect();
        let (m, ls) = self.decode(&z, s);
        let mut a = [0.0; 2];
        for i in 0..2 {
            a[i] = (m[i] + ls[i].exp() * rng.sample::<f64, _>(StandardNormal)).clamp(0.0, 1.0);
        }
        a
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(serde_json::json!({
            "kind": "behavior",
            "belief_dim": self.belief_dim,
            "config": self.config,
        }));
        ck.add_params("behavior", &self.params);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, CheckpointError> {
        let mut m = Self::new(ck.meta("belief_dim")?, ck.meta("config")?, &mut ChaCha8Rng::seed_from_u64(0));
        m.params.assign(ck.params("behavior"))?;
        Ok(m)
    }
}

pub fn behavior_density<R: Rng + ?Sized>(model: &BehaviorCvae, s: &[f64], a: [f64; 2], k_z: usize, rng: &mut R) -> f64 {
    model.density(s, a, k_z, rng)
}

pub fn behavior_sample<R: Rng + ?Sized>(model: &BehaviorCvae, s: &[f64], rng: &mut R) -> [f64; 2] {
    model.sample(s, rng)
}

/// Mean negative ELBO of `batch` with fixed latent noise, plus gradients.
pub fn batch_loss(
    model: &BehaviorCvae,
    batch: &[&BeliefAction],
    noise: &[Vec<f64>],
    with_grad: bool,
) -> Result<(f64, Option<Vec<Tensor>>), NnError> {
    let mut tape = GradTape::new();
    let slot = tape.bind(&model.params);
    let mut terms = Vec::with_capacity(batch.len());
    for (p, eps) in batch.iter().zip(noise) {
        let s = tape.constant(p.belief.clone());
        terms.push(model.loss_tape(&mut tape, slot, s, p.action, eps)?);
    }
    let total = tape.add_all(&terms);
    let mean = tape.scale(total, 1.0 / batch.len().max(1) as f64);
    let v = tape.scalar(mean);
    Ok((v, with_grad.then(|| tape.backward(mean).take_slot(slot))))
}

/// Standard-normal latent noise, one draw per pair.
pub fn noise_for<R: Rng + ?Sized>(n: usize, latent: usize, rng: &mut R) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..latent).map(|_| rng.sample(StandardNormal)).collect())
        .collect()
}

/// Mean held-out negative ELBO with noise fixed by `seed`.
pub fn behavior_heldout_loss(model: &BehaviorCvae, pairs: &[&BeliefAction], seed: u64) -> Result<f64, NnError> {
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = noise_for(pairs.len(), model.config.latent_dim, &mut rng);
    Ok(batch_loss(model, pairs, &noise, false)?.0)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BehaviorTrainLog {
    pub initial_heldout: f64,
    pub heldout: Vec<f64>,
    pub train: Vec<f64>,
}

pub fn train_behavior_cvae(
    pairs: &[BeliefAction],
    config: BehaviorConfig,
    seed: u64,
) -> Result<(BehaviorCvae, BehaviorTrainLog), TrainError> {
    let Some(first) = pairs.first() else {
        return Err(TrainError::NoData("behavior policy"));
    };
    if !(config.lr > 0.0 && config.rms_eps > 0.0 && config.encoder_std > 0.0 && config.k_z >= 1) {
        return Err(TrainError::Hyper("lr, rms_eps, encoder_std must be positive and k_z at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = BehaviorCvae::new(first.belief.len(), config.clone(), &mut rng);
    let mut order: Vec<&BeliefAction> = pairs.iter().collect();
    order.shuffle(&mut rng);
    let n_held = ((pairs.len() as f64) * config.heldout_fraction).floor() as usize;
    let n_held = n_held.min(pairs.len() - 1);
    let (held, fit) = order.split_at(n_held);
    let mut fit = fit.to_vec();
    let held_seed = seed ^ 0xbe4a_u64;
    let diverged = |iteration: usize, d: String| TrainError::Divergence {
        stage: "behavior policy",
        iteration,
        diagnostics: d,
    };
    let mut log = BehaviorTrainLog {
        initial_heldout: behavior_heldout_loss(&model, held, held_seed).map_err(|e| diverged(0, e.to_string()))?,
        ..Default::default()
    };
    let mut state = RmsPropState::new(
        &model.params,
        RmsPropConfig {
            lr: config.lr,
            eps: config.rms_eps,
            ..RmsPropConfig::default()
        },
    );
    let mut iteration = 0;
    for _ in 0..config.epochs {
        fit.shuffle(&mut rng);
        let (mut sum, mut count) = (0.0, 0usize);
        for batch in fit.chunks(config.batch_size.max(1)) {
            iteration += 1;
            let noise = noise_for(batch.len(), config.latent_dim, &mut rng);
            let (loss, g) = batch_loss(&model, batch, &noise, true).map_err(|e| diverged(iteration, e.to_string()))?;
            if !loss.is_finite() {
                return Err(diverged(iteration, format!("batch loss {loss}")));
            }
            sum += loss * batch.len() as f64;
            count += batch.len();
            clipped_step(
                &mut [&mut model.params],
                std::slice::from_mut(&mut state),
                vec![g.expect("requested")],
                MAX_GRAD_NORM,
            );
        }
        let h = behavior_heldout_loss(&model, held, held_seed).map_err(|e| diverged(iteration, e.to_string()))?;
        tracing::info!(train = sum / count.max(1) as f64, heldout = h, "behavior epoch");
        log.train.push(sum / count.max(1) as f64);
        log.heldout.push(h);
    }
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;

    fn tiny() -> BehaviorConfig {
        BehaviorConfig {
            latent_dim: 2,
            hidden: 6,
            ..BehaviorConfig::default()
        }
    }

    fn pairs(n: usize, rng: &mut ChaCha8Rng) -> Vec<BeliefAction> {
        (0..n)
            .map(|_| {
                let b: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
                // two clusters keyed on the sign of the first belief entry
                let action = if b[0] > 0.0 {
                    [0.8 + 0.05 * rng.random::<f64>(), 0.2]
                } else {
                    [0.2, 0.7 + 0.05 * rng.random::<f64>()]
                };
                BeliefAction { belief: b, action }
            })
            .collect()
    }

    #[test]
    fn floor_applies_far_away() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = BehaviorCvae::new(3, tiny(), &mut rng);
        let d = m.density(&[0.0, 0.0, 0.0], [1e6, -1e6], 4, &mut rng);
        assert_eq!(d, DENSITY_FLOOR);
    }

    #[test]
    fn density_integrates_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = BehaviorCvae::new(3, tiny(), &mut rng);
        let s = [0.3, -0.2, 0.5];
        let (lo, hi, n) = (-3.0, 4.0, 350);
        let h = (hi - lo) / n as f64;
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                let a = [lo + (i as f64 + 0.5) * h, lo + (j as f64 + 0.5) * h];
                // identical prior draws at every grid point
                total += m.density(&s, a, 4, &mut ChaCha8Rng::seed_from_u64(9)) * h * h;
            }
        }
        assert!((total - 1.0).abs() < 1e-3, "{total}");
    }

    #[test]
    fn estimate_variance_shrinks_with_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = BehaviorCvae::new(3, tiny(), &mut rng);
        let s = [0.1, 0.4, -0.3];
        let spread = |k: usize, rng: &mut ChaCha8Rng| {
            let xs: Vec<f64> = (0..200).map(|_| m.density(&s, [0.4, 0.6], k, rng)).collect();
            let mu = xs.iter().sum::<f64>() / xs.len() as f64;
            xs.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / xs.len() as f64
        };
        let (v1, v16) = (spread(1, &mut rng), spread(16, &mut rng));
        assert!(v16 < v1 / 4.0, "{v16} vs {v1}");
    }

    #[test]
    fn samples_are_seeded_and_in_square() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = BehaviorCvae::new(3, tiny(), &mut rng);
        let s = [0.5, 0.5, 0.5];
        let draw = |seed| m.sample(&s, &mut ChaCha8Rng::seed_from_u64(seed));
        assert_eq!(draw(5), draw(5));
        for _ in 0..500 {
            let a = m.sample(&s, &mut rng);
            assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut m = BehaviorCvae::new(3, tiny(), &mut rng);
        for i in 0..m.params.len() {
            m.params.get_mut(i).data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
        }
        let data = pairs(5, &mut rng);
        let refs: Vec<&BeliefAction> = data.iter().collect();
        let noise = noise_for(5, 2, &mut rng);
        let report = check_gradients(
            std::slice::from_ref(&m.params),
            |ps| {
                let mut mm = m.clone();
                mm.params = ps[0].clone();
                let (v, g) = batch_loss(&mm, &refs, &noise, true).unwrap();
                (v, vec![g.unwrap()])
            },
            1e-5,
            1e-6,
        );
        assert!(report.n_params < 1000);
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn training_is_seeded_and_improves() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data = pairs(400, &mut rng);
        let cfg = BehaviorConfig {
            epochs: 4,
            lr: 3e-3,
            batch_size: 16,
            ..tiny()
        };
        let (m1, l1) = train_behavior_cvae(&data, cfg.clone(), 3).unwrap();
        let (m2, l2) = train_behavior_cvae(&data, cfg, 3).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(m1.params, m2.params);
        assert!(l1.heldout.last().unwrap() < &l1.initial_heldout);
        assert!(matches!(
            train_behavior_cvae(&[], tiny(), 1),
            Err(TrainError::NoData(_))
        ));
        let back = BehaviorCvae::from_checkpoint(&m1.to_checkpoint()).unwrap();
        assert_eq!(back.params, m1.params);
    }
}
