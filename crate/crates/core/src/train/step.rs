//! One alternating update: a D-phase on `l_d_total`, then a G-phase on
//! `l_g_total`, each back-propagated into every parameter it reaches.

use rand::Rng as _;
use vaeinfo_tensor::{Array, Tape, Var};

use super::{TrainConfig, TrainingState};
use crate::error::{Error, Result};
use crate::losses::{self, LossParts, LossReport, LossWeights};
use crate::model::{self, nets, Ctx, Model, ModelKind};
use crate::rng::{indexed, Rng};

/// Random inputs of one forward pass, drawn before the pass so that the
/// pass itself is a deterministic function of parameters and data.
#[derive(Clone, Debug, PartialEq)]
pub struct StepNoise {
    /// Uniform draws selecting mixture components, `[N]`.
    pub u: Vec<f64>,
    /// `[N, d_c]` standard normal.
    pub eps: Array,
    /// `[N, d_a]` uniform attribute noise (cGAN without FLC).
    pub a: Array,
}

impl StepNoise {
    pub fn draw(rng: &mut Rng, n: usize, model: &Model) -> Self {
        let u = (0..n).map(|_| rng.random()).collect();
        let eps = model::standard_normal(rng, vec![n, model.config.d_c]);
        let a = model::uniform(rng, vec![n, model.config.d_a]);
        Self { u, eps, a }
    }
}

/// Loss terms of one forward pass, as tape variables.
pub struct LossVars<'t> {
    pub l_ae: Option<Var<'t>>,
    pub kl: Option<Var<'t>>,
    pub recon: Option<Var<'t>>,
    pub l_disc: Option<Var<'t>>,
    pub l_gen: Option<Var<'t>>,
    pub l_info: Option<Var<'t>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    D,
    G,
}

impl<'t> LossVars<'t> {
    pub fn parts(&self) -> LossParts {
        let v = |x: &Option<Var>| x.map_or(0.0, |v| v.item());
        LossParts {
            l_ae: v(&self.l_ae),
            kl: v(&self.kl),
            recon: v(&self.recon),
            l_disc: v(&self.l_disc),
            l_gen: v(&self.l_gen),
            l_info: v(&self.l_info),
        }
    }

    /// `λ1·l_ae + λ2·l_vae + λ3·(l_disc | l_gen) + λ4·l_info` over the
    /// terms this model has.
    pub fn total(&self, w: &LossWeights, phase: Phase) -> Option<Var<'t>> {
        let adv = match phase {
            Phase::D => self.l_disc,
            Phase::G => self.l_gen,
        };
        let terms = [
            (w.lambda1, self.l_ae),
            (w.lambda2, self.kl),
            (w.lambda2, self.recon),
            (w.lambda3, adv),
            (w.lambda4, self.l_info),
        ];
        terms
            .into_iter()
            .filter_map(|(lambda, v)| v.filter(|_| lambda != 0.0).map(|v| v.scale(lambda)))
            .reduce(|a, b| a + b)
    }
}

/// Whether the discriminator takes part in training under `w`.
pub fn uses_discriminator(kind: ModelKind, w: &LossWeights) -> bool {
    kind.has_discriminator() && (w.lambda3 != 0.0 || (kind.has_q() && w.lambda4 != 0.0))
}

/// Training-mode forward pass. `x` is the lognorm target `[N, c, S, S]`,
/// `y` the road raster `[N, 1, S, S]`.
pub fn forward_losses<'t>(
    ctx: &Ctx<'t>,
    model: &Model,
    weights: &LossWeights,
    x: Var<'t>,
    y: Var<'t>,
    noise: &StepNoise,
) -> LossVars<'t> {
    let cfg = &model.config;
    let kind = model.kind;
    let tape = ctx.tape;
    let cond = nets::condition_encoder(ctx, cfg, y);
    let z_c = if kind.is_variational() {
        let weights = model::softmax(cond.logits).value();
        let onehot = tape.constant(model::choose_components(&weights, &noise.u));
        model::reparameterize(&cond, onehot, tape.constant(noise.eps.clone()))
    } else {
        model::mixture_mean(&cond)
    };
    let a = match kind {
        ModelKind::CvaePlc => tape.constant(Array::zeros(noise.a.shape().to_vec())),
        ModelKind::CganPlc => tape.constant(noise.a.clone()),
        _ => nets::attribute_encoder(ctx, cfg, x),
    };
    let z = Var::concat(&[z_c, a], 1);
    let skips = cfg.skip_connections.then_some(cond.skips.as_slice());
    let x_hat = nets::generator(ctx, cfg, z, skips);

    let mut out = LossVars { l_ae: None, kl: None, recon: None, l_disc: None, l_gen: None, l_info: None };
    if kind != ModelKind::CganPlc {
        out.l_ae = Some(losses::loss_ae_var(x, x_hat));
    }
    if kind.is_variational() {
        out.kl = Some(losses::kl_var(z_c, cond.logits, cond.means, cond.logvar));
        out.recon = Some(losses::recon_var(x, x_hat));
    }
    if uses_discriminator(kind, weights) {
        let real = nets::discriminator(ctx, cfg, Var::concat(&[x, y], 1), false);
        let fake = nets::discriminator(ctx, cfg, Var::concat(&[x_hat, y], 1), kind.has_q());
        out.l_disc = Some(losses::disc_var(real.logit, fake.logit));
        out.l_gen = Some(losses::gen_var(fake.logit));
        if let Some((q_mean, q_logvar)) = fake.q {
            out.l_info = Some(losses::info_var(a, q_mean, q_logvar));
        }
    }
    out
}

/// Runs one phase: forward, backward of the phase total, Adam update, and
/// running-statistics update. Returns the pre-update loss parts.
fn phase(
    state: &mut TrainingState,
    cfg: &TrainConfig,
    lr: f64,
    x: &Array,
    y: &Array,
    noise: &StepNoise,
    which: Phase,
) -> Result<LossParts> {
    let tape = Tape::new();
    let params = std::mem::take(&mut state.model.params);
    let ctx = Ctx::new(&tape, params, true, true);
    let xv = tape.constant(x.clone());
    let yv = tape.constant(y.clone());
    let vars = forward_losses(&ctx, &state.model, &cfg.lambda, xv, yv, noise);
    let parts = vars.parts();
    let total = vars.total(&cfg.lambda, which);
    let finite = LossReport::new(parts, &cfg.lambda).is_finite();
    let grads = match (finite, total) {
        (true, Some(t)) => Some(ctx.gradients(tape.backward(t))),
        _ => None,
    };
    state.model.params = ctx.finish();
    if !finite {
        return Err(Error::Numeric(format!("non-finite loss at step {}: {parts:?}", state.step)));
    }
    if let Some(grads) = grads {
        let adam = match which {
            Phase::D => &mut state.adam_d,
            Phase::G => &mut state.adam_g,
        };
        adam.update(&cfg.adam, lr, &mut state.model.params, &grads);
    }
    Ok(parts)
}

/// One D-phase and one G-phase update on a batch. The report holds the
/// loss terms of the D-phase forward pass.
pub fn train_step(state: &mut TrainingState, cfg: &TrainConfig, lr: f64, x: &Array, y: &Array) -> Result<LossReport> {
    let n = x.shape()[0];
    let s = state.model.config.size();
    if x.shape() != [n, state.model.config.channels, s, s] || y.shape() != [n, 1, s, s] {
        return Err(Error::Contract(format!("batch shapes {:?} / {:?} do not match the model", x.shape(), y.shape())));
    }
    let mut rng = indexed(cfg.seed, "noise", state.step);
    let noise_d = StepNoise::draw(&mut rng, n, &state.model);
    let noise_g = StepNoise::draw(&mut rng, n, &state.model);
    let parts = phase(state, cfg, lr, x, y, &noise_d, Phase::D)?;
    phase(state, cfg, lr, x, y, &noise_g, Phase::G)?;
    state.step += 1;
    Ok(LossReport::new(parts, &cfg.lambda))
}
