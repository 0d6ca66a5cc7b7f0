//! Diagonal Gaussian and Bernoulli utilities, as plain functions and as
//! differentiable tape compositions.

use crate::tape::{GradTape, Var};

pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Log density of `x` under a diagonal Gaussian parameterized by log-std.
pub fn gaussian_log_prob(x: &[f64], mean: &[f64], log_std: &[f64]) -> f64 {
    assert!(x.len() == mean.len() && x.len() == log_std.len(), "shape mismatch");
    x.iter()
        .zip(mean)
        .zip(log_std)
        .map(|((&xi, &mi), &ls)| {
            let z = (xi - mi) * (-ls).exp();
            -ls - HALF_LN_2PI - 0.5 * z * z
        })
        .sum()
}

/// Scalar normal density with the given variance.
pub fn normal_pdf(x: f64, mean: f64, variance: f64) -> f64 {
    let d = x - mean;
    (-0.5 * d * d / variance).exp() / (2.0 * std::f64::consts::PI * variance).sqrt()
}

/// Reparameterized draw `mean + exp(log_std) ⊙ noise`.
pub fn gaussian_sample(mean: &[f64], log_std: &[f64], noise: &[f64]) -> Vec<f64> {
    mean.iter()
        .zip(log_std)
        .zip(noise)
        .map(|((m, ls), n)| m + ls.exp() * n)
        .collect()
}

/// Closed-form `KL(q ‖ p)` between diagonal Gaussians.
pub fn kl_diag_gaussian(mean_q: &[f64], log_std_q: &[f64], mean_p: &[f64], log_std_p: &[f64]) -> f64 {
    (0..mean_q.len())
        .map(|i| {
            let var_ratio = (2.0 * (log_std_q[i] - log_std_p[i])).exp();
            let d = (mean_q[i] - mean_p[i]) * (-log_std_p[i]).exp();
            log_std_p[i] - log_std_q[i] + 0.5 * (var_ratio + d * d) - 0.5
        })
        .sum()
}

/// `−log p(y | logit)` for a Bernoulli with target in {0, 1}.
pub fn bernoulli_nll(logit: f64, target: f64) -> f64 {
    logit.max(0.0) + (-logit.abs()).exp().ln_1p() - target * logit
}

/// Numerically stable `ln Σ exp(xᵢ)`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Normalizes log-weights into probabilities that sum to one.
pub fn softmax_normalize(log_w: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(log_w);
    let mut p: Vec<f64> = log_w.iter().map(|l| (l - lse).exp()).collect();
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= s);
    p
}

/// Tape version of [`gaussian_log_prob`].
pub fn tape_gaussian_log_prob(tape: &mut GradTape, x: Var, mean: Var, log_std: Var) -> Var {
    let diff = tape.sub(x, mean);
    let neg = tape.scale(log_std, -1.0);
    let inv_std = tape.exp(neg);
    let z = tape.mul(diff, inv_std);
    let z2 = tape.square(z);
    let half = tape.scale(z2, -0.5);
    let terms = tape.sub(half, log_std);
    let s = tape.sum(terms);
    let n = tape.value(x).len() as f64;
    tape.offset(s, -HALF_LN_2PI * n)
}

/// Like [`tape_gaussian_log_prob`] but only over entries with weight 1;
/// entries with weight 0 contribute nothing and carry no gradient.
pub fn tape_masked_gaussian_log_prob(
    tape: &mut GradTape,
    x: Var,
    mean: Var,
    log_std: Var,
    weights: &[f64],
) -> Var {
    let diff = tape.sub(x, mean);
    let neg = tape.scale(log_std, -1.0);
    let inv_std = tape.exp(neg);
    let z = tape.mul(diff, inv_std);
    let z2 = tape.square(z);
    let half = tape.scale(z2, -0.5);
    let terms = tape.sub(half, log_std);
    let s = tape.weighted_sum(terms, weights.to_vec());
    let n: f64 = weights.iter().sum();
    tape.offset(s, -HALF_LN_2PI * n)
}

pub fn tape_gaussian_sample(tape: &mut GradTape, mean: Var, log_std: Var, noise: Var) -> Var {
    let std = tape.exp(log_std);
    let scaled = tape.mul(std, noise);
    tape.add(mean, scaled)
}

/// `KL(N(mean, exp(log_std)²) ‖ N(0, I))`.
pub fn tape_kl_standard_normal(tape: &mut GradTape, mean: Var, log_std: Var) -> Var {
    let m2 = tape.square(mean);
    let two_ls = tape.scale(log_std, 2.0);
    let var = tape.exp(two_ls);
    let s = tape.add(m2, var);
    let s = tape.scale(s, 0.5);
    let t = tape.sub(s, log_std);
    let total = tape.sum(t);
    let n = tape.value(mean).len() as f64;
    tape.offset(total, -0.5 * n)
}

/// Tape version of [`kl_diag_gaussian`].
pub fn tape_kl_diag_gaussian(tape: &mut GradTape, mean_q: Var, log_std_q: Var, mean_p: Var, log_std_p: Var) -> Var {
    let dls = tape.sub(log_std_q, log_std_p);
    let two = tape.scale(dls, 2.0);
    let var_ratio = tape.exp(two);
    let dm = tape.sub(mean_q, mean_p);
    let neg_p = tape.scale(log_std_p, -1.0);
    let inv_p = tape.exp(neg_p);
    let d = tape.mul(dm, inv_p);
    let d2 = tape.square(d);
    let s = tape.add(var_ratio, d2);
    let s = tape.scale(s, 0.5);
    let t = tape.sub(s, dls);
    let total = tape.sum(t);
    let n = tape.value(mean_q).len() as f64;
    tape.offset(total, -0.5 * n)
}

/// Summed Bernoulli negative log-likelihood of constant targets.
pub fn tape_bernoulli_nll(tape: &mut GradTape, logits: Var, targets: &[f64]) -> Var {
    let sp = tape.softplus(logits);
    let sp_sum = tape.sum(sp);
    let lin = tape.weighted_sum(logits, targets.to_vec());
    tape.sub(sp_sum, lin)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn standard_normal_at_mean() {
        let lp = gaussian_log_prob(&[0.0], &[0.0], &[0.0]);
        assert!((lp + 0.918939).abs() < 1e-6);
        let d = 7;
        let lp = gaussian_log_prob(&vec![1.5; d], &vec![1.5; d], &vec![0.0; d]);
        assert!((lp + d as f64 / 2.0 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
    }

    #[test]
    fn log_prob_matches_density_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
        let m: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
        let ls: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        // oracle: product of scalar densities with variance exp(2·ls)
        let oracle: f64 = (0..5)
            .map(|i| normal_pdf(x[i], m[i], (2.0 * ls[i]).exp()).ln())
            .sum();
        assert!((gaussian_log_prob(&x, &m, &ls) - oracle).abs() < 1e-12);

        let mut tape = GradTape::new();
        let (xv, mv, lv) = (tape.input(x.clone()), tape.input(m.clone()), tape.input(ls.clone()));
        let out = tape_gaussian_log_prob(&mut tape, xv, mv, lv);
        assert!((tape.scalar(out) - oracle).abs() < 1e-12);
    }

    #[test]
    fn sampling_identities_and_gradient() {
        assert_eq!(gaussian_sample(&[1.0, 2.0], &[0.3, -0.1], &[0.0, 0.0]), vec![1.0, 2.0]);
        assert_eq!(gaussian_sample(&[1.0, 2.0], &[0.0, 0.0], &[0.5, -1.0]), vec![1.5, 1.0]);

        let mean = vec![0.2, -0.4];
        let ls = vec![0.1, -0.3];
        let noise = vec![1.3, -0.7];
        let mut tape = GradTape::new();
        let (m, l, n) = (tape.input(mean.clone()), tape.input(ls.clone()), tape.input(noise.clone()));
        let s = tape_gaussian_sample(&mut tape, m, l, n);
        let tot = tape.sum(s);
        let g = tape.backward(tot);
        let h = 1e-6;
        for i in 0..2 {
            let mut lp = ls.clone();
            let mut lm = ls.clone();
            lp[i] += h;
            lm[i] -= h;
            let fd = (gaussian_sample(&mean, &lp, &noise)[i] - gaussian_sample(&mean, &lm, &noise)[i]) / (2.0 * h);
            assert!((g.wrt(l)[i] - fd).abs() < 1e-8);
            assert!((g.wrt(l)[i] - noise[i] * ls[i].exp()).abs() < 1e-14);
        }
    }

    #[test]
    fn kl_closed_forms() {
        let m = [0.3, -1.2, 0.5];
        let ls = [0.2, -0.4, 0.1];
        assert!(kl_diag_gaussian(&m, &ls, &m, &ls).abs() < 1e-15);
        let k = kl_diag_gaussian(&m, &[0.0; 3], &[0.0; 3], &[0.0; 3]);
        let expected = m.iter().map(|v| v * v).sum::<f64>() / 2.0;
        assert!((k - expected).abs() < 1e-14);

        let mut tape = GradTape::new();
        let (a, b) = (tape.input(m.to_vec()), tape.input(ls.to_vec()));
        let (c, d) = (tape.input(vec![0.1, 0.0, -0.2]), tape.input(vec![0.3, 0.1, -0.5]));
        let kt = tape_kl_diag_gaussian(&mut tape, a, b, c, d);
        let kp = kl_diag_gaussian(&m, &ls, &[0.1, 0.0, -0.2], &[0.3, 0.1, -0.5]);
        assert!((tape.scalar(kt) - kp).abs() < 1e-13);
        let ks = tape_kl_standard_normal(&mut tape, a, b);
        assert!((tape.scalar(ks) - kl_diag_gaussian(&m, &ls, &[0.0; 3], &[0.0; 3])).abs() < 1e-13);
    }

    #[test]
    fn kl_matches_monte_carlo() {
        let mq = [0.4, -0.3];
        let lq = [-0.2, 0.1];
        let mp = [0.0, 0.5];
        let lp = [0.3, -0.1];
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = 1_000_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let noise: Vec<f64> = (0..2).map(|_| rng.sample(StandardNormal)).collect();
            let x = gaussian_sample(&mq, &lq, &noise);
            let v = gaussian_log_prob(&x, &mq, &lq) - gaussian_log_prob(&x, &mp, &lp);
            s += v;
            s2 += v * v;
        }
        let mean = s / n as f64;
        let se = ((s2 / n as f64 - mean * mean) / n as f64).sqrt();
        let exact = kl_diag_gaussian(&mq, &lq, &mp, &lp);
        assert!(exact >= 0.0);
        assert!((mean - exact).abs() < 3.0 * se, "{mean} vs {exact} (se {se})");
    }

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax_normalize(&[-800.0, -801.0, -799.5]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(p[2] > p[0] && p[0] > p[1]);
    }

    #[test]
    fn bernoulli_at_zero_logit() {
        assert!((bernoulli_nll(0.0, 1.0) - 2f64.ln()).abs() < 1e-15);
        assert!((bernoulli_nll(0.0, 0.0) - 2f64.ln()).abs() < 1e-15);
    }
}
