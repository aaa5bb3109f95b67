//! Deterministic DDIM sampling: noise schedule, classifier-free guidance,
//! the single DDIM update, the simplified denoising loop with a cached
//! noise trajectory, and the latent → RGB decoder.
//!
//! Timesteps are 1-based: `alpha(0) == 1` and `alpha(T)` is the most
//! noised level.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::conditioning::Embedding;
use crate::denoiser::NoisePredictor;
use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};
use crate::tensor::Tensor4;

pub const BETA_START: f64 = 8.5e-4;
pub const BETA_END: f64 = 1.2e-2;
pub const MAX_STEPS: usize = 1000;

/// Noise schedule `β_1 … β_T` with cumulative products `α_t = Π (1 - β_s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
}

impl Schedule {
    /// Scaled-linear schedule between [`BETA_START`] and [`BETA_END`].
    pub fn new(steps: usize) -> Result<Self> {
        Self::scaled_linear(steps, BETA_START, BETA_END)
    }

    /// `β` linearly spaced in `√β`, then squared.
    pub fn scaled_linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::EmptySchedule);
        }
        if steps > MAX_STEPS {
            return Err(Error::invalid(format!(
                "schedule of {steps} steps exceeds {MAX_STEPS}"
            )));
        }
        let (lo, hi) = (beta_start.sqrt(), beta_end.sqrt());
        let betas = (0..steps)
            .map(|i| {
                let frac = if steps == 1 {
                    0.0
                } else {
                    i as f64 / (steps - 1) as f64
                };
                let r = lo + (hi - lo) * frac;
                r * r
            })
            .collect();
        Self::from_betas(betas)
    }

    /// Arbitrary betas in `[0, 1)`. A zero beta gives the degenerate
    /// `α_t == α_{t-1}` step, useful to probe limiting cases.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::EmptySchedule);
        }
        if betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return Err(Error::invalid("betas must lie in [0, 1)"));
        }
        let mut alphas = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alphas.push(acc);
        }
        Ok(Self { betas, alphas })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// `α_t`, with `α_0 = 1`.
    pub fn alpha(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alphas[t - 1]
        }
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::TimestepOutOfRange {
                t,
                max: self.steps(),
            });
        }
        Ok(())
    }

    /// Coefficients `(a, b)` of the DDIM update `z_{t-1} = a·z_t + b·ε`,
    /// expanded from `√(α_{t-1}/α_t)(z_t - √(1-α_t) ε) + √(1-α_{t-1}) ε`.
    pub fn step_coefficients(&self, t: usize) -> Result<(f64, f64)> {
        self.check_t(t)?;
        let (at, ap) = (self.alpha(t), self.alpha(t - 1));
        let a = (ap / at).sqrt();
        Ok((a, (1.0 - ap).sqrt() - a * (1.0 - at).sqrt()))
    }

    /// The collapsed noise coefficient `√((α_t - α_{t-1}) / α_t)`, or `None`
    /// when the radicand is negative. Since `α` decreases in `t` the
    /// radicand is only non-negative for a zero-beta step, where it agrees
    /// with the expanded coefficient.
    pub fn collapsed_eps_coefficient(&self, t: usize) -> Result<Option<f64>> {
        self.check_t(t)?;
        let r = (self.alpha(t) - self.alpha(t - 1)) / self.alpha(t);
        Ok((r >= 0.0).then(|| r.sqrt()))
    }
}

/// Builds the default scaled-linear schedule with `steps` steps.
pub fn build_schedule(steps: usize) -> Result<Schedule> {
    Schedule::new(steps)
}

/// Classifier-free guidance scale `ω`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub omega: f64,
}

impl GuidanceConfig {
    pub fn new(omega: f64) -> Result<Self> {
        if !omega.is_finite() || omega < 0.0 {
            return Err(Error::invalid(format!(
                "guidance scale {omega} must be finite and >= 0"
            )));
        }
        Ok(Self { omega })
    }
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self { omega: 7.5 }
    }
}

/// `ε_uncond + ω (ε_cond - ε_uncond)`.
pub fn cfg_noise(eps_uncond: &Tensor4, eps_cond: &Tensor4, g: GuidanceConfig) -> Result<Tensor4> {
    eps_uncond.zip_map(eps_cond, |u, c| u + g.omega * (c - u))
}

/// `√α_T z0 + √(1 - α_T) noise`.
pub fn forward_diffuse(z0: &Tensor4, schedule: &Schedule, noise: &Tensor4) -> Result<Tensor4> {
    let a = schedule.alpha(schedule.steps());
    z0.lincomb(a.sqrt(), noise, (1.0 - a).sqrt())
}

/// One deterministic DDIM step from `z_t` to `z_{t-1}`.
pub fn ddim_step(z_t: &Tensor4, eps: &Tensor4, t: usize, schedule: &Schedule) -> Result<Tensor4> {
    schedule.check_t(t)?;
    let (at, ap) = (schedule.alpha(t), schedule.alpha(t - 1));
    let ratio = (ap / at).sqrt();
    let (s_t, s_p) = ((1.0 - at).sqrt(), (1.0 - ap).sqrt());
    z_t.zip_map(eps, |z, e| ratio * (z - s_t * e) + s_p * e)
}

/// Guided noise prediction `ε_θ(z_t, C, Φ_t)`.
pub fn guided_noise<P: NoisePredictor + ?Sized>(
    model: &P,
    z: &Tensor4,
    cond: &Embedding,
    uncond: &Embedding,
    t: usize,
    g: GuidanceConfig,
) -> Result<Tensor4> {
    let eps_u = model.predict(z, uncond, t)?;
    let eps_c = model.predict(z, cond, t)?;
    cfg_noise(&eps_u, &eps_c, g)
}

/// Noise predictions `ε_t` for `t = T-1 … 1` recorded along a denoising
/// trajectory. Entry `t - 1` holds `ε_t`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NoiseCache {
    eps: Vec<Tensor4>,
}

impl NoiseCache {
    pub fn len(&self) -> usize {
        self.eps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eps.is_empty()
    }

    pub fn get(&self, t: usize) -> Option<&Tensor4> {
        t.checked_sub(1).and_then(|i| self.eps.get(i))
    }
}

/// Simplified DDIM denoising.
///
/// The first step uses a fresh guided prediction at `z_T` with `Φ_T`; each
/// later step recomputes `ε_t` at the current latent and records it in the
/// returned cache. `phis[t - 1]` is `Φ_t`.
pub fn denoise_simplified<P: NoisePredictor + ?Sized>(
    z_t: &Tensor4,
    cond: &Embedding,
    phis: &[Embedding],
    schedule: &Schedule,
    g: GuidanceConfig,
    model: &P,
) -> Result<(Tensor4, NoiseCache)> {
    let steps = schedule.steps();
    if phis.len() != steps {
        return Err(Error::shape(
            format!("{steps} unconditional embeddings"),
            phis.len(),
        ));
    }
    let eps_top = guided_noise(model, z_t, cond, &phis[steps - 1], steps, g)?;
    let mut z = ddim_step(z_t, &eps_top, steps, schedule)?;
    let mut eps = vec![Tensor4::zeros(z_t.shape()); steps - 1];
    for t in (1..steps).rev() {
        let e = guided_noise(model, &z, cond, &phis[t - 1], t, g)?;
        z = ddim_step(&z, &e, t, schedule)?;
        eps[t - 1] = e;
    }
    Ok((z, NoiseCache { eps }))
}

/// Denoising with `ε_t` for `t < T` taken from `cache` as constants; only
/// the first step depends on the model. This is the objective the attack's
/// approximate gradient differentiates exactly.
pub fn denoise_with_cache<P: NoisePredictor + ?Sized>(
    z_t: &Tensor4,
    cond: &Embedding,
    phi_top: &Embedding,
    schedule: &Schedule,
    g: GuidanceConfig,
    model: &P,
    cache: &NoiseCache,
) -> Result<Tensor4> {
    let steps = schedule.steps();
    if cache.len() != steps - 1 {
        return Err(Error::shape(
            format!("{} cached noises", steps - 1),
            cache.len(),
        ));
    }
    let eps_top = guided_noise(model, z_t, cond, phi_top, steps, g)?;
    let mut z = ddim_step(z_t, &eps_top, steps, schedule)?;
    for t in (1..steps).rev() {
        z = ddim_step(&z, &cache.eps[t - 1], t, schedule)?;
    }
    Ok(z)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub latent_channels: usize,
    pub upsample: usize,
    pub seed: u64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            upsample: 8,
            seed: 0,
        }
    }
}

/// Fixed seeded decoder: per-pixel linear map from latent channels to RGB,
/// nearest-neighbour upsampling, logistic squashing into `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentDecoder {
    config: DecoderConfig,
    weight: Vec<f64>,
    bias: [f64; CHANNELS],
}

pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl LatentDecoder {
    pub fn new(config: DecoderConfig) -> Result<Self> {
        if config.latent_channels == 0 || config.upsample == 0 {
            return Err(Error::invalid("decoder needs channels and upsampling >= 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x6465_636f_6465_7200);
        let std = 1.0 / (config.latent_channels as f64).sqrt();
        let weight = (0..CHANNELS * config.latent_channels)
            .map(|_| std * 1.2 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let bias = [0.0; CHANNELS].map(|_| 0.2 * rng.sample::<f64, _>(StandardNormal));
        Ok(Self {
            config,
            weight,
            bias,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    pub fn bias(&self) -> [f64; CHANNELS] {
        self.bias
    }

    fn check(&self, z0: &Tensor4) -> Result<()> {
        let [n, c, _, _] = z0.shape();
        if n != 1 || c != self.config.latent_channels {
            return Err(Error::shape(
                format!("(1, {}, h, w)", self.config.latent_channels),
                z0.shape(),
            ));
        }
        Ok(())
    }

    fn pre_activation(&self, z0: &Tensor4) -> Vec<f64> {
        let [_, c, h, w] = z0.shape();
        let mut out = vec![0.0; CHANNELS * h * w];
        for k in 0..CHANNELS {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = self.bias[k];
                    for ch in 0..c {
                        acc += self.weight[k * c + ch] * z0.get([0, ch, y, x]);
                    }
                    out[(k * h + y) * w + x] = acc;
                }
            }
        }
        out
    }

    /// Decodes a `(1, c, h, w)` latent into an `(h·f) × (w·f)` RGB patch.
    pub fn decode(&self, z0: &Tensor4) -> Result<Image> {
        self.check(z0)?;
        let [_, _, h, w] = z0.shape();
        let f = self.config.upsample;
        let pre = self.pre_activation(z0);
        let mut img = Image::zeros(h * f, w * f);
        for k in 0..CHANNELS {
            for y in 0..h * f {
                for x in 0..w * f {
                    img.set(k, y, x, logistic(pre[(k * h + y / f) * w + x / f]));
                }
            }
        }
        Ok(img)
    }

    /// Pulls an image-space cotangent back to the latent.
    pub fn vjp(&self, z0: &Tensor4, cotangent: &Image) -> Result<Tensor4> {
        self.check(z0)?;
        let [_, c, h, w] = z0.shape();
        let f = self.config.upsample;
        if cotangent.dims() != (h * f, w * f) {
            return Err(Error::shape((h * f, w * f), cotangent.dims()));
        }
        let pre = self.pre_activation(z0);
        // Sum the cotangent over each upsampled footprint, then through the
        // logistic derivative and the channel map.
        let mut out = Tensor4::zeros(z0.shape());
        let data = out.data_mut();
        for k in 0..CHANNELS {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for dy in 0..f {
                        for dx in 0..f {
                            acc += cotangent.get(k, y * f + dy, x * f + dx);
                        }
                    }
                    let s = logistic(pre[(k * h + y) * w + x]);
                    let g = acc * s * (1.0 - s);
                    for ch in 0..c {
                        data[(ch * h + y) * w + x] += self.weight[k * c + ch] * g;
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Seeded standard-normal initial latent.
pub fn initial_latent(shape: [usize; 4], seed: u64) -> Tensor4 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor4::randn(shape, &mut rng)
}
