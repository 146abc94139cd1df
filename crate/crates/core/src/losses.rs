//! Loss terms and their weighted totals.
//!
//! Plain `f64` functions give the reference definitions; the `*_var`
//! functions build the same quantities on a tape, averaged over a batch.

use serde::{Deserialize, Serialize};
use vaeinfo_tensor::Var;

use crate::error::{Error, Result};

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda1: 1.0, lambda2: 1.0, lambda3: 1.0, lambda4: 1.0 }
    }
}

impl LossWeights {
    /// Adversarial and information terms switched off.
    pub fn ablation() -> Self {
        Self { lambda3: 0.0, lambda4: 0.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda1, self.lambda2, self.lambda3, self.lambda4];
        if all.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::Domain(format!("loss weights {all:?} must be finite and ≥ 0")));
        }
        Ok(())
    }
}

/// The individual terms of one step, batch means.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub l_ae: f64,
    pub kl: f64,
    pub recon: f64,
    pub l_disc: f64,
    pub l_gen: f64,
    pub l_info: f64,
}

impl LossParts {
    pub fn l_vae(&self) -> f64 {
        self.kl + self.recon
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_ae: f64,
    pub l_vae: f64,
    pub kl: f64,
    pub recon: f64,
    pub l_disc: f64,
    pub l_gen: f64,
    pub l_info: f64,
    pub l_d_total: f64,
    pub l_g_total: f64,
}

impl LossReport {
    pub fn new(parts: LossParts, weights: &LossWeights) -> Self {
        let (l_d_total, l_g_total) = combine_totals(&parts, weights);
        Self {
            l_ae: parts.l_ae,
            l_vae: parts.l_vae(),
            kl: parts.kl,
            recon: parts.recon,
            l_disc: parts.l_disc,
            l_gen: parts.l_gen,
            l_info: parts.l_info,
            l_d_total,
            l_g_total,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.l_ae, self.l_vae, self.l_disc, self.l_gen, self.l_info, self.l_d_total, self.l_g_total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// `(l_d_total, l_g_total)`.
pub fn combine_totals(p: &LossParts, w: &LossWeights) -> (f64, f64) {
    let shared = w.lambda1 * p.l_ae + w.lambda2 * p.l_vae() + w.lambda4 * p.l_info;
    (shared + w.lambda3 * p.l_disc, shared + w.lambda3 * p.l_gen)
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn logit(p: f64) -> f64 {
    p.ln() - (-p).ln_1p()
}

/// Mean squared difference over all entries.
pub fn loss_ae(x: &[f64], x_hat: &[f64]) -> Result<f64> {
    if x.len() != x_hat.len() || x.is_empty() {
        return Err(Error::Contract(format!("loss_ae on {} and {} entries", x.len(), x_hat.len())));
    }
    Ok(x.iter().zip(x_hat).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / x.len() as f64)
}

/// Unit-variance Gaussian negative log-likelihood summed over entries.
pub fn recon_nll(x: &[f64], x_hat: &[f64]) -> f64 {
    x.iter().zip(x_hat).map(|(a, b)| 0.5 * (a - b).powi(2) + 0.5 * LN_2PI).sum()
}

/// `ln N(z; μ, diag v)`.
pub fn log_normal(z: &[f64], mean: &[f64], var: &[f64]) -> f64 {
    z.iter().zip(mean).zip(var).map(|((z, m), v)| -0.5 * LN_2PI - 0.5 * v.ln() - 0.5 * (z - m).powi(2) / v).sum()
}

/// Single-sample KL estimate `ln q(z) − ln N(z; 0, I)` with `q` the full
/// mixture density.
pub fn kl_estimate(z: &[f64], weights: &[f64], means: &[Vec<f64>], vars: &[Vec<f64>]) -> Result<f64> {
    let terms: Vec<f64> = weights.iter().zip(means).zip(vars).map(|((w, m), v)| w.ln() + log_normal(z, m, v)).collect();
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_q = max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln();
    let prior = log_normal(z, &vec![0.0; z.len()], &vec![1.0; z.len()]);
    let kl = log_q - prior;
    if !kl.is_finite() {
        return Err(Error::Numeric(format!("KL estimate is {kl} (log q = {log_q}, log p = {prior})")));
    }
    Ok(kl)
}

/// `(total, kl, recon)` for one example.
pub fn loss_vae(
    x: &[f64],
    x_hat: &[f64],
    z_c: &[f64],
    weights: &[f64],
    means: &[Vec<f64>],
    vars: &[Vec<f64>],
) -> Result<(f64, f64, f64)> {
    if x.len() != x_hat.len() {
        return Err(Error::Contract("loss_vae on mismatched images".into()));
    }
    let kl = kl_estimate(z_c, weights, means, vars)?;
    let recon = recon_nll(x, x_hat);
    Ok((kl + recon, kl, recon))
}

/// `−ln D(X) − ln(1 − D(X̃))` from logits.
pub fn loss_disc_logits(real: f64, fake: f64) -> f64 {
    softplus(-real) + softplus(fake)
}

/// `−ln D(X̃)` from a logit.
pub fn loss_gen_logit(fake: f64) -> f64 {
    softplus(-fake)
}

/// Discriminator loss from probabilities, evaluated through logits.
pub fn loss_disc(d_real: f64, d_fake: f64) -> f64 {
    loss_disc_logits(logit(d_real), logit(d_fake))
}

pub fn loss_gen(d_fake: f64) -> f64 {
    loss_gen_logit(logit(d_fake))
}

/// Gaussian negative log-likelihood of `a` under Q's mean and log-variance.
pub fn loss_info(a: &[f64], q_mean: &[f64], q_logvar: &[f64]) -> Result<f64> {
    if a.len() != q_mean.len() || a.len() != q_logvar.len() {
        return Err(Error::Contract("loss_info on mismatched lengths".into()));
    }
    Ok(a.iter()
        .zip(q_mean)
        .zip(q_logvar)
        .map(|((a, m), lv)| 0.5 * LN_2PI + 0.5 * lv + 0.5 * (a - m).powi(2) / lv.exp())
        .sum())
}

/// Batch mean of [`loss_ae`] over `[N, ...]` tensors.
pub fn loss_ae_var<'t>(x: Var<'t>, x_hat: Var<'t>) -> Var<'t> {
    (x - x_hat).sqr().mean()
}

/// Batch mean of [`recon_nll`].
pub fn recon_var<'t>(x: Var<'t>, x_hat: Var<'t>) -> Var<'t> {
    let n = x.shape()[0] as f64;
    let entries = x.value().len() as f64;
    (x - x_hat).sqr().sum().scale(0.5 / n).add_scalar(0.5 * LN_2PI * entries / n)
}

/// Batch mean of [`kl_estimate`]. `z` is `[N, d]`; `logits` `[N, m]`;
/// `means` `[N, m, d]`; `logvar` `[N, m, d]` or `[N, m, 1]`.
pub fn kl_var<'t>(z: Var<'t>, logits: Var<'t>, means: Var<'t>, logvar: Var<'t>) -> Var<'t> {
    let shape = means.shape();
    let (n, m, d) = (shape[0], shape[1], shape[2]);
    let logvar = logvar.broadcast_as(&shape);
    let zb = z.reshape(&[n, 1, d]).broadcast_as(&shape);
    let comp = ((zb - means).sqr() * logvar.neg().exp() + logvar).scale(-0.5).sum_axis(2).add_scalar(-0.5 * LN_2PI * d as f64);
    let log_w = logits - logits.logsumexp_axis(1).reshape(&[n, 1]).broadcast_as(&[n, m]);
    let log_q = (log_w + comp).logsumexp_axis(1);
    let log_p = z.sqr().sum_axis(1).scale(-0.5).add_scalar(-0.5 * LN_2PI * d as f64);
    (log_q - log_p).mean()
}

/// Batch mean of [`loss_disc_logits`]; logits are `[N, 1]`.
pub fn disc_var<'t>(real: Var<'t>, fake: Var<'t>) -> Var<'t> {
    real.neg().softplus().mean() + fake.softplus().mean()
}

pub fn gen_var(fake: Var<'_>) -> Var<'_> {
    fake.neg().softplus().mean()
}

/// Batch mean of [`loss_info`] over `[N, d_a]` tensors.
pub fn info_var<'t>(a: Var<'t>, q_mean: Var<'t>, q_logvar: Var<'t>) -> Var<'t> {
    let n = a.shape()[0] as f64;
    let d = a.shape()[1] as f64;
    let quad = (a - q_mean).sqr() * q_logvar.neg().exp();
    (quad + q_logvar).sum().scale(0.5 / n).add_scalar(0.5 * LN_2PI * d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use vaeinfo_tensor::{Array, Tape};

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn analytic_values() {
        assert!((loss_disc(0.5, 0.5) - 2.0 * LN2).abs() < 1e-12);
        assert!(loss_disc(1.0, 0.0).abs() < 1e-12);
        assert!((loss_disc(0.9, 0.1) - 2.0 * -(0.9f64.ln())).abs() < 1e-12);
        assert!((loss_gen(0.5) - LN2).abs() < 1e-12);
        assert!(loss_gen(1.0).abs() < 1e-12);
        assert!((loss_gen(0.25) - 4f64.ln()).abs() < 1e-12);
        assert!((loss_info(&[0.3; 32], &[0.3; 32], &[0.0; 32]).unwrap() - 16.0 * LN_2PI).abs() < 1e-12);
        assert!((loss_info(&[1.0], &[0.0], &[0.0]).unwrap() - (0.5 * LN_2PI + 0.5)).abs() < 1e-12);
        assert_eq!(loss_ae(&[1.0], &[3.0]).unwrap(), 4.0);
        assert_eq!(loss_ae(&[0.2, 0.4], &[0.2, 0.4]).unwrap(), 0.0);
        assert_eq!(loss_ae(&[1.0, 5.0], &[2.0, 0.0]).unwrap(), loss_ae(&[2.0, 0.0], &[1.0, 5.0]).unwrap());
        assert!(loss_ae(&[1.0], &[1.0, 2.0]).is_err());
        assert_eq!(recon_nll(&[0.7; 6], &[0.7; 6]), 0.5 * LN_2PI * 6.0);
    }

    #[test]
    fn logits_never_overflow() {
        for l in [-30.0, -1.0, 0.0, 1.0, 30.0] {
            assert!(loss_disc_logits(l, -l).is_finite());
            assert!(loss_gen_logit(l).is_finite());
            assert!(loss_disc_logits(l, l) >= 0.0);
        }
    }

    #[test]
    fn totals() {
        let p = LossParts { l_ae: 0.1, kl: 0.05, recon: 0.15, l_disc: 0.3, l_gen: 0.7, l_info: 0.4 };
        let (d, g) = combine_totals(&p, &LossWeights::default());
        assert!((d - 1.0).abs() < 1e-12);
        assert!((g - 1.4).abs() < 1e-12);
        let (d, g) = combine_totals(&p, &LossWeights::ablation());
        assert!((d - 0.3).abs() < 1e-12 && (g - 0.3).abs() < 1e-12);
        assert_eq!(combine_totals(&LossParts::default(), &LossWeights::default()), (0.0, 0.0));
    }

    #[test]
    fn kl_single_gaussian_is_log_ratio() {
        // m = 1 and q = N(0, I): the estimate is exactly zero for any sample
        let z = [0.3, -1.2];
        assert!(kl_estimate(&z, &[1.0], &[vec![0.0, 0.0]], &[vec![1.0, 1.0]]).unwrap().abs() < 1e-12);
    }

    fn close(a: f64, b: f64) {
        assert!((a - b).abs() < 1e-10 * (1.0 + b.abs()), "{a} vs {b}");
    }

    #[test]
    fn tape_forms_match_reference() {
        let tape = Tape::new();
        let x = [0.1, 0.5, 1.2, 0.0, 2.0, 0.3];
        let xh = [0.2, 0.4, 1.0, 0.1, 1.5, 0.3];
        let xv = tape.constant(Array::new(vec![2, 3], x.to_vec()));
        let xhv = tape.constant(Array::new(vec![2, 3], xh.to_vec()));
        close(loss_ae_var(xv, xhv).item(), loss_ae(&x, &xh).unwrap());
        close(recon_var(xv, xhv).item(), (recon_nll(&x[..3], &xh[..3]) + recon_nll(&x[3..], &xh[3..])) / 2.0);

        let logits = [0.2, -0.5, 1.0, 0.0];
        let means = [0.1, -0.3, 0.5, 0.9, -1.0, 0.0, 0.4, 0.2];
        let lv = [0.1, -0.2, 0.3, 0.0, -0.4, 0.5, 0.2, 0.1];
        let z = [0.3, -0.2, 1.1, 0.4];
        let kl = kl_var(
            tape.constant(Array::new(vec![2, 2], z.to_vec())),
            tape.constant(Array::new(vec![2, 2], logits.to_vec())),
            tape.constant(Array::new(vec![2, 2, 2], means.to_vec())),
            tape.constant(Array::new(vec![2, 2, 2], lv.to_vec())),
        );
        let mut expect = 0.0;
        for i in 0..2 {
            let l = &logits[2 * i..2 * i + 2];
            let lse = (l[0].exp() + l[1].exp()).ln();
            let w: Vec<f64> = l.iter().map(|v| (v - lse).exp()).collect();
            let mu: Vec<Vec<f64>> = (0..2).map(|k| means[4 * i + 2 * k..4 * i + 2 * k + 2].to_vec()).collect();
            let var: Vec<Vec<f64>> = (0..2).map(|k| lv[4 * i + 2 * k..4 * i + 2 * k + 2].iter().map(|v| v.exp()).collect()).collect();
            expect += kl_estimate(&z[2 * i..2 * i + 2], &w, &mu, &var).unwrap() / 2.0;
        }
        close(kl.item(), expect);

        let a = [0.2, 0.9, 0.4, 0.1];
        let qm = [0.0, 1.0, 0.5, 0.3];
        let ql = [0.1, -0.3, 0.0, 0.7];
        let info = info_var(
            tape.constant(Array::new(vec![2, 2], a.to_vec())),
            tape.constant(Array::new(vec![2, 2], qm.to_vec())),
            tape.constant(Array::new(vec![2, 2], ql.to_vec())),
        );
        close(info.item(), (loss_info(&a[..2], &qm[..2], &ql[..2]).unwrap() + loss_info(&a[2..], &qm[2..], &ql[2..]).unwrap()) / 2.0);

        let real = tape.constant(Array::new(vec![2, 1], vec![1.5, -0.5]));
        let fake = tape.constant(Array::new(vec![2, 1], vec![-2.0, 0.3]));
        close(disc_var(real, fake).item(), (loss_disc_logits(1.5, -2.0) + loss_disc_logits(-0.5, 0.3)) / 2.0);
        close(gen_var(fake).item(), (loss_gen_logit(-2.0) + loss_gen_logit(0.3)) / 2.0);
    }

    #[test]
    fn info_gradient_vanishes_at_mean() {
        let tape = Tape::new();
        let a = tape.constant(Array::new(vec![1, 3], vec![0.2, 0.5, 0.7]));
        let qm = tape.param(Array::new(vec![1, 3], vec![0.2, 0.5, 0.7]));
        let ql = tape.constant(Array::new(vec![1, 3], vec![0.3, 0.0, -0.2]));
        let g = tape.backward(info_var(a, qm, ql));
        assert!(g.get(qm).unwrap().data().iter().all(|v| *v == 0.0));
    }
}
