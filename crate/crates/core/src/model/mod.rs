//! The networks, their parameters, and inference entry points.

pub mod config;
pub mod layers;
pub mod nets;
pub mod params;

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use vaeinfo_tensor::{Array, Tape, Var};

pub use config::{ConvKind, ModelConfig};
pub use params::{Ctx, Entry, Init, ParamStore};

use crate::error::{Error, Result};
use crate::raster::{RasterImage, Space};
use crate::rng::{substream, Rng};

/// The main model and the four baselines it is compared against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    VaeInfoCgan,
    CvaePlc,
    CvaePlcFlc,
    CganPlc,
    CganPlcFlc,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] =
        [ModelKind::CvaePlc, ModelKind::CvaePlcFlc, ModelKind::CganPlc, ModelKind::CganPlcFlc, ModelKind::VaeInfoCgan];

    /// Uses the attribute encoder (feature-level condition).
    pub fn has_ae(self) -> bool {
        matches!(self, ModelKind::VaeInfoCgan | ModelKind::CvaePlcFlc | ModelKind::CganPlcFlc)
    }

    pub fn has_discriminator(self) -> bool {
        matches!(self, ModelKind::VaeInfoCgan | ModelKind::CganPlc | ModelKind::CganPlcFlc)
    }

    pub fn has_q(self) -> bool {
        self == ModelKind::VaeInfoCgan
    }

    /// Samples `z_c` from the posterior and pays the KL term. The cGAN kinds
    /// use the mixture mean as a deterministic encoding instead.
    pub fn is_variational(self) -> bool {
        matches!(self, ModelKind::VaeInfoCgan | ModelKind::CvaePlc | ModelKind::CvaePlcFlc)
    }

    pub fn label(self) -> &'static str {
        match self {
            ModelKind::CvaePlc => "cVAE (only PLC)",
            ModelKind::CvaePlcFlc => "cVAE (PLC and FLC)",
            ModelKind::CganPlc => "cGAN (only PLC)",
            ModelKind::CganPlcFlc => "cGAN (PLC and FLC)",
            ModelKind::VaeInfoCgan => "VAE-Info-cGAN",
        }
    }

    pub fn slug(self) -> &'static str {
        match self {
            ModelKind::VaeInfoCgan => "vae-info-cgan",
            ModelKind::CvaePlc => "cvae-plc",
            ModelKind::CvaePlcFlc => "cvae-plc-flc",
            ModelKind::CganPlc => "cgan-plc",
            ModelKind::CganPlcFlc => "cgan-plc-flc",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.slug())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('_', "-");
        ModelKind::ALL
            .into_iter()
            .find(|k| k.slug() == norm)
            .ok_or_else(|| Error::Domain(format!("unknown model kind {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub kind: ModelKind,
    pub params: ParamStore,
}

/// Stacks rasters into a channel-first batch `[N, c, h, w]`.
pub fn stack(images: &[&RasterImage]) -> Array {
    let first = images.first().expect("non-empty batch");
    let mut data = Vec::with_capacity(images.len() * first.values.len());
    for img in images {
        data.extend(img.to_chw());
    }
    Array::new(vec![images.len(), first.c, first.h, first.w], data)
}

/// Splits a `[N, c, h, w]` batch into rasters.
pub fn unstack(batch: &Array, space: Space) -> Vec<RasterImage> {
    let s = batch.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    batch.data().chunks_exact(c * h * w).take(n).map(|chunk| RasterImage::from_chw(h, w, c, chunk, space)).collect()
}

/// Picks component `onehot` (`[N, m]`) and applies `μ + σ ⊙ ε`.
pub fn reparameterize<'t>(cond: &nets::ConditionVars<'t>, onehot: Var<'t>, eps: Var<'t>) -> Var<'t> {
    let shape = cond.means.shape();
    let (n, m, d) = (shape[0], shape[1], shape[2]);
    let mask = onehot.reshape(&[n, m, 1]).broadcast_as(&[n, m, d]);
    let mu = (cond.means * mask).sum_axis(1);
    let sigma = (cond.logvar.scale(0.5).exp().broadcast_as(&[n, m, d]) * mask).sum_axis(1);
    mu + sigma * eps
}

/// Softmax over the last axis of `[N, m]`.
pub fn softmax<'t>(logits: Var<'t>) -> Var<'t> {
    let s = logits.shape();
    let lse = logits.logsumexp_axis(1).reshape(&[s[0], 1]).broadcast_as(&s);
    (logits - lse).exp()
}

/// Mixture mean `Σ_k w_k μ_k`, `[N, d_c]`.
pub fn mixture_mean<'t>(cond: &nets::ConditionVars<'t>) -> Var<'t> {
    let shape = cond.means.shape();
    let w = softmax(cond.logits).reshape(&[shape[0], shape[1], 1]).broadcast_as(&shape);
    (cond.means * w).sum_axis(1)
}

/// Inverse-CDF component choice for uniform draws `u`, as one-hot `[N, m]`.
pub fn choose_components(weights: &Array, u: &[f64]) -> Array {
    let (n, m) = (weights.shape()[0], weights.shape()[1]);
    let mut out = vec![0.0; n * m];
    for (i, &ui) in u.iter().enumerate().take(n) {
        let row = &weights.data()[i * m..(i + 1) * m];
        let mut acc = 0.0;
        let mut pick = m - 1;
        for (k, w) in row.iter().enumerate() {
            acc += w;
            if ui < acc {
                pick = k;
                break;
            }
        }
        out[i * m + pick] = 1.0;
    }
    Array::new(vec![n, m], out)
}

pub fn standard_normal(rng: &mut Rng, shape: Vec<usize>) -> Array {
    let n = shape.iter().product();
    Array::new(shape, (0..n).map(|_| StandardNormal.sample(rng)).collect())
}

pub fn uniform(rng: &mut Rng, shape: Vec<usize>) -> Array {
    let n = shape.iter().product();
    Array::new(shape, (0..n).map(|_| rng.random::<f64>()).collect())
}

/// Mixture-of-Gaussians posterior over the condition vector for one road
/// raster, with the encoder's skip features.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionPosterior {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
    /// `[1, C, r, r]` feature maps for r = 2, 4, …, S.
    pub skips: Vec<Array>,
}

/// Where the generator's attribute slot comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum AttrSource {
    /// Fresh `U[0,1]^{d_a}` per image.
    Uniform,
    /// The same vector for every image.
    Fixed(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscOutput {
    pub logit: f64,
    pub q_mean: Vec<f64>,
    pub q_logvar: Vec<f64>,
}

impl Model {
    /// Builds a model with freshly initialized parameters.
    pub fn new(config: ModelConfig, kind: ModelKind, seed: u64) -> Result<Self> {
        config.validate()?;
        let tape = Tape::new();
        let ctx = Ctx::initializing(&tape, substream(seed, "model-init"));
        let s = config.size();
        let x = tape.constant(Array::zeros(vec![2, config.channels, s, s]));
        let y = tape.constant(Array::zeros(vec![2, 1, s, s]));
        if kind.has_ae() {
            nets::attribute_encoder(&ctx, &config, x);
        }
        let cond = nets::condition_encoder(&ctx, &config, y);
        let z = tape.constant(Array::zeros(vec![2, config.latent_dim()]));
        let skips = config.skip_connections.then_some(cond.skips.as_slice());
        nets::generator(&ctx, &config, z, skips);
        if kind.has_discriminator() {
            let xd = tape.constant(Array::zeros(vec![2, config.channels + 1, s, s]));
            nets::discriminator(&ctx, &config, xd, kind.has_q());
        }
        Ok(Self { config, kind, params: ctx.into_store() })
    }

    fn check_image(&self, img: &RasterImage, channels: usize, space: Space, what: &str) -> Result<()> {
        let s = self.config.size();
        if (img.h, img.w, img.c) != (s, s, channels) {
            return Err(Error::Contract(format!(
                "{what} is {}×{}×{}, model expects {s}×{s}×{channels}",
                img.h, img.w, img.c
            )));
        }
        if img.space != space {
            return Err(Error::Contract(format!("{what} must be in {space:?} space")));
        }
        Ok(())
    }

    fn check_roads(&self, y: &RasterImage) -> Result<()> {
        self.check_image(y, 1, Space::Count, "road raster")?;
        if y.values.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Contract("road raster must be binary".into()));
        }
        Ok(())
    }

    /// Attribute encodings of a lognorm batch `[N, c, S, S]`, `[N, d_a]`.
    pub fn encode_attribute_batch(&self, x: &Array) -> Array {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, self.params.clone(), false, false);
        let a = nets::attribute_encoder(&ctx, &self.config, tape.constant(x.clone()));
        (*a.value()).clone()
    }

    pub fn encode_attribute(&self, x: &RasterImage) -> Result<Vec<f64>> {
        if !self.kind.has_ae() {
            return Err(Error::Contract(format!("{} has no attribute encoder", self.kind)));
        }
        self.check_image(x, self.config.channels, Space::Lognorm, "input")?;
        Ok(self.encode_attribute_batch(&stack(&[x])).into_data())
    }

    pub fn encode_condition(&self, y: &RasterImage) -> Result<ConditionPosterior> {
        self.check_roads(y)?;
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, self.params.clone(), false, false);
        let cond = nets::condition_encoder(&ctx, &self.config, tape.constant(stack(&[y])));
        let (m, d) = (self.config.m, self.config.d_c);
        let weights = softmax(cond.logits).value().data().to_vec();
        let means = cond.means.value().data().chunks(d).map(<[f64]>::to_vec).collect();
        let lv = cond.logvar.value();
        let per = lv.len() / m;
        let variances = (0..m).map(|k| (0..d).map(|j| lv.data()[k * per + j.min(per - 1)].exp()).collect()).collect();
        let skips = cond.skips.iter().map(|s| (*s.value()).clone()).collect();
        let post = ConditionPosterior { weights, means, variances, skips };
        if post.weights.iter().chain(post.means.iter().flatten()).chain(post.variances.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("condition posterior is not finite".into()));
        }
        Ok(post)
    }

    /// Concatenates `[z_c ‖ a]`.
    pub fn form_latent(&self, z_c: &[f64], a: &[f64]) -> Result<Vec<f64>> {
        if z_c.len() != self.config.d_c || a.len() != self.config.d_a {
            return Err(Error::Contract(format!(
                "latent parts of length {} and {}, expected {} and {}",
                z_c.len(),
                a.len(),
                self.config.d_c,
                self.config.d_a
            )));
        }
        Ok(z_c.iter().chain(a).copied().collect())
    }

    /// Generator output for a latent batch `[B, d_c + d_a]` with skips
    /// `[B, C, r, r]` (or `[1, C, r, r]`, repeated across the batch).
    pub fn generate_batch(&self, z: &Array, skips: Option<&[Array]>) -> Result<Array> {
        let b = z.shape()[0];
        if z.rank() != 2 || z.shape()[1] != self.config.latent_dim() {
            return Err(Error::Contract(format!("latent batch shape {:?}", z.shape())));
        }
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, self.params.clone(), false, false);
        let skip_vars: Option<Vec<Var>> = match (self.config.skip_connections, skips) {
            (false, _) => None,
            (true, None) => return Err(Error::Contract("generator needs skip features".into())),
            (true, Some(s)) => {
                if s.len() != self.config.gen_upsample_stages {
                    return Err(Error::Contract(format!("{} skip maps for {} stages", s.len(), self.config.gen_upsample_stages)));
                }
                Some(
                    s.iter()
                        .map(|a| {
                            let v = tape.constant(a.clone());
                            if a.shape()[0] == b {
                                v
                            } else {
                                let mut shape = a.shape().to_vec();
                                shape[0] = b;
                                v.broadcast_as(&shape)
                            }
                        })
                        .collect(),
                )
            }
        };
        let out = nets::generator(&ctx, &self.config, tape.constant(z.clone()), skip_vars.as_deref());
        Ok((*out.value()).clone())
    }

    /// One lognorm image from latent `z` and the posterior's skips.
    pub fn generate(&self, z: &[f64], skips: Option<&[Array]>) -> Result<RasterImage> {
        let z = Array::new(vec![1, z.len()], z.to_vec());
        let out = self.generate_batch(&z, skips)?;
        Ok(unstack(&out, Space::Lognorm).remove(0))
    }

    /// Discriminator logit and Q parameters for a stacked `c + 1` channel
    /// input (lognorm sample, then road raster).
    pub fn discriminate(&self, x: &RasterImage) -> Result<DiscOutput> {
        if !self.kind.has_discriminator() {
            return Err(Error::Contract(format!("{} has no discriminator", self.kind)));
        }
        let want = self.config.channels + 1;
        if x.c != want {
            return Err(Error::Contract(format!("discriminator input has {} channels, expected {want}", x.c)));
        }
        self.check_image(x, want, x.space, "discriminator input")?;
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, self.params.clone(), false, false);
        let out = nets::discriminator(&ctx, &self.config, tape.constant(stack(&[x])), self.kind.has_q());
        let (q_mean, q_logvar) = match out.q {
            Some((m, v)) => (m.value().data().to_vec(), v.value().data().to_vec()),
            None => (Vec::new(), Vec::new()),
        };
        Ok(DiscOutput { logit: out.logit.item(), q_mean, q_logvar })
    }

    /// Generates lognorm images for road rasters following each kind's
    /// generation contract: sampled `z_c` for the variational kinds, the
    /// mixture mean for cGANs; the attribute slot is `attrs` for kinds with
    /// an attribute encoder, uniform noise for cGAN (PLC) and zeros for
    /// cVAE (PLC).
    pub fn generate_for_roads(&self, roads: &[&RasterImage], attrs: &AttrSource, rng: &mut Rng) -> Result<Vec<RasterImage>> {
        for y in roads {
            self.check_roads(y)?;
        }
        if roads.is_empty() {
            return Ok(Vec::new());
        }
        let n = roads.len();
        let (d_c, d_a) = (self.config.d_c, self.config.d_a);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, self.params.clone(), false, false);
        let cond = nets::condition_encoder(&ctx, &self.config, tape.constant(stack(roads)));
        let z_c = if self.kind.is_variational() {
            let weights = softmax(cond.logits).value();
            let u: Vec<f64> = (0..n).map(|_| rng.random()).collect();
            let onehot = tape.constant(choose_components(&weights, &u));
            let eps = tape.constant(standard_normal(rng, vec![n, d_c]));
            reparameterize(&cond, onehot, eps)
        } else {
            mixture_mean(&cond)
        };
        let a = match (self.kind, attrs) {
            (ModelKind::CvaePlc, _) => Array::zeros(vec![n, d_a]),
            (ModelKind::CganPlc, _) | (_, AttrSource::Uniform) => uniform(rng, vec![n, d_a]),
            (_, AttrSource::Fixed(a)) => {
                if a.len() != d_a {
                    return Err(Error::Contract(format!("attribute vector of length {}, expected {d_a}", a.len())));
                }
                Array::new(vec![n, d_a], a.iter().copied().cycle().take(n * d_a).collect())
            }
        };
        let z = Var::concat(&[z_c, tape.constant(a)], 1);
        let skips = self.config.skip_connections.then_some(cond.skips.as_slice());
        let out = nets::generator(&ctx, &self.config, z, skips);
        let out = out.value();
        if !out.all_finite() {
            return Err(Error::Numeric("generator produced non-finite values".into()));
        }
        Ok(unstack(&out, Space::Lognorm))
    }
}

/// Draws component `k ~ weights`, then `μ_k + σ_k ⊙ ε`.
pub fn sample_condition(post: &ConditionPosterior, rng: &mut Rng) -> Vec<f64> {
    let u: f64 = rng.random();
    let w = Array::new(vec![1, post.weights.len()], post.weights.clone());
    let k = choose_components(&w, &[u]).data().iter().position(|&v| v == 1.0).expect("one-hot");
    let eps: Vec<f64> = (0..post.means[k].len()).map(|_| StandardNormal.sample(rng)).collect();
    sample_condition_with(post, k, &eps)
}

/// `μ_k + σ_k ⊙ ε` for a fixed component and noise.
pub fn sample_condition_with(post: &ConditionPosterior, k: usize, eps: &[f64]) -> Vec<f64> {
    post.means[k].iter().zip(&post.variances[k]).zip(eps).map(|((m, v), e)| m + v.sqrt() * e).collect()
}
