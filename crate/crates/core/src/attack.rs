//! The adversarial-logo attack loop and the pixel-space baseline.
//!
//! The patch is `τ = decode(Ω̃(Re(ifft4(z̃_T)), C, Φ))`. Each inner
//! iteration pastes `τ` on the clean detections of a batch, pulls the
//! detection loss back to `z_0`, and from there to the frequency latent
//! `z̃_T` (sign-PGD inside an L∞ ball around its initial value) and to the
//! top-step unconditional embedding `Φ_T` (plain gradient descent).
//! Every denoising step but the first is treated as a constant.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conditioning::{encode_prompt, init_unconditional, Embedding};
use crate::denoiser::{ConvDenoiser, DenoiserConfig, NoisePredictor};
use crate::detector::{
    loss_and_image_grads, Detection, DetectionBox, Detector, Selection, TARGET_CLASS,
};
use crate::diffusion::{
    denoise_simplified, initial_latent, DecoderConfig, GuidanceConfig, LatentDecoder, NoiseCache,
    Schedule,
};
use crate::error::{Error, Result};
use crate::image::{Image, PatchImage};
use crate::patching::{
    apply_patch, batch, vjp_apply_patch, DEFAULT_TEST_SCALE, DEFAULT_TRAIN_SCALE,
};
use crate::tensor::{clamp_linf, fft4, ifft4, project_real, real_ifft4_adjoint, sign};
use crate::tensor::{ComplexTensor4, Shape4, Tensor4};

/// Coefficients of the first-step gradient `∂z_0/∂z_T = c1·I + c2·∂ε/∂z_T`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradFormula {
    /// `c1 = √(1/α_{T-1})`, `c2 = √((α_T - α_{T-1}) / (α_{T-1} α_T))`. The
    /// radicand is negative for any decreasing schedule; its signed square
    /// root `sgn(r)·√|r|` is used.
    PaperExact,
    /// Exact for the frozen-cache objective: `c1 = √(1/α_T)`,
    /// `c2 = √((1-α_{T-1})/α_{T-1}) - √((1-α_T)/α_T)`.
    #[default]
    Rederived,
}

/// `(c1, c2)` for the top step of `schedule`.
pub fn gradient_coefficients(schedule: &Schedule, formula: GradFormula) -> (f64, f64) {
    let steps = schedule.steps();
    let (at, ap) = (schedule.alpha(steps), schedule.alpha(steps - 1));
    match formula {
        GradFormula::PaperExact => {
            let r = (at - ap) / (ap * at);
            ((1.0 / ap).sqrt(), r.signum() * r.abs().sqrt())
        }
        GradFormula::Rederived => (
            (1.0 / at).sqrt(),
            ((1.0 - ap) / ap).sqrt() - ((1.0 - at) / at).sqrt(),
        ),
    }
}

/// Fixed inputs of the gradient assembly.
#[derive(Debug, Clone, Copy)]
pub struct GradContext<'a, P: NoisePredictor + ?Sized> {
    pub schedule: &'a Schedule,
    pub model: &'a P,
    pub z_t: &'a Tensor4,
    pub cond: &'a Embedding,
    pub phi_t: &'a Embedding,
    pub guidance: GuidanceConfig,
    pub formula: GradFormula,
}

/// `∇_{z̃_T} L` from `∇_{z_0} L`.
pub fn assemble_grad_freq<P: NoisePredictor + ?Sized>(
    grad_z0: &Tensor4,
    ctx: &GradContext<'_, P>,
) -> Result<ComplexTensor4> {
    grad_z0.ensure_same_shape(ctx.z_t)?;
    let steps = ctx.schedule.steps();
    let (c1, c2) = gradient_coefficients(ctx.schedule, ctx.formula);
    let w = ctx.guidance.omega;
    let cot = grad_z0.scale(c2);
    let via_u = ctx.model.vjp_latent(ctx.z_t, ctx.phi_t, steps, &cot)?;
    let via_c = ctx.model.vjp_latent(ctx.z_t, ctx.cond, steps, &cot)?;
    let grad_zt = grad_z0.scale(c1).add(&via_u.lincomb(1.0 - w, &via_c, w)?)?;
    Ok(real_ifft4_adjoint(&grad_zt))
}

/// `∇_{Φ_T} L` from `∇_{z_0} L`; only the unconditional branch sees `Φ_T`.
pub fn assemble_grad_embedding<P: NoisePredictor + ?Sized>(
    grad_z0: &Tensor4,
    ctx: &GradContext<'_, P>,
) -> Result<Embedding> {
    grad_z0.ensure_same_shape(ctx.z_t)?;
    let (_, c2) = gradient_coefficients(ctx.schedule, ctx.formula);
    let w = ctx.guidance.omega;
    let cot = grad_z0.scale(c2 * (1.0 - w));
    ctx.model
        .vjp_embedding(ctx.z_t, ctx.phi_t, ctx.schedule.steps(), &cot)
}

/// Full attack configuration; also the on-disk run config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub prompt: String,
    /// Inner iterations per batch.
    pub k: usize,
    /// Epochs.
    pub m: usize,
    /// Denoising steps.
    pub t: usize,
    pub alpha: f64,
    pub beta: f64,
    pub delta: f64,
    pub omega: f64,
    pub bs: usize,
    pub train_scale: f64,
    pub test_scale: f64,
    /// Seed of the initial latent.
    pub seed: u64,
    pub grad_formula: GradFormula,
    pub prompt_seed: u64,
    pub latent_shape: Shape4,
    pub model: DenoiserConfig,
    pub decoder: DecoderConfig,
    /// Differentiate every over-threshold cell, not only NMS survivors.
    pub soft_selection: bool,
    /// Restrict the loss to the target class.
    pub restrict_to_target: bool,
    /// Detect clean boxes once per scene instead of every iteration.
    pub memoize_clean: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            prompt: "a dog, 8k".into(),
            k: 5,
            m: 20,
            t: 20,
            alpha: 0.2,
            beta: 1e-4,
            delta: 30.0,
            omega: 7.5,
            bs: 8,
            train_scale: DEFAULT_TRAIN_SCALE,
            test_scale: DEFAULT_TEST_SCALE,
            seed: 0,
            grad_formula: GradFormula::Rederived,
            prompt_seed: 0,
            latent_shape: [1, 4, 16, 16],
            model: DenoiserConfig::default(),
            decoder: DecoderConfig::default(),
            soft_selection: false,
            restrict_to_target: true,
            memoize_clean: true,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("alpha", self.alpha),
            ("delta", self.delta),
            ("train_scale", self.train_scale),
            ("test_scale", self.test_scale),
        ];
        for (name, v) in positive {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if self.beta.is_nan() || self.beta < 0.0 || self.omega.is_nan() || self.omega < 0.0 {
            return Err(Error::invalid("beta and omega must be non-negative"));
        }
        if self.k == 0 || self.t == 0 || self.bs == 0 {
            return Err(Error::invalid("k, t and bs must be at least 1"));
        }
        let [n, c, _, _] = self.latent_shape;
        if n != 1 || c != self.model.latent_channels || c != self.decoder.latent_channels {
            return Err(Error::invalid(format!(
                "latent shape {:?} inconsistent with model/decoder channels",
                self.latent_shape
            )));
        }
        Ok(())
    }

    fn selection(&self) -> Selection {
        if self.soft_selection {
            Selection::Soft
        } else {
            Selection::Nms
        }
    }

    fn class_filter(&self) -> Option<usize> {
        self.restrict_to_target.then_some(TARGET_CLASS)
    }
}

/// Everything that maps `(z̃_T, Φ_T)` to a patch.
pub struct Generator<P: NoisePredictor = ConvDenoiser> {
    pub schedule: Schedule,
    pub model: P,
    pub decoder: LatentDecoder,
    pub cond: Embedding,
    /// `Φ_1 … Φ_T` at initialisation; only `Φ_T` is ever replaced.
    pub phis: Vec<Embedding>,
    pub guidance: GuidanceConfig,
}

/// One forward pass of the generator.
#[derive(Debug, Clone)]
pub struct Rendered {
    pub z_t: Tensor4,
    pub z0: Tensor4,
    pub cache: NoiseCache,
    pub tau: PatchImage,
}

impl Generator<ConvDenoiser> {
    pub fn from_config(cfg: &AttackConfig) -> Result<Self> {
        cfg.validate()?;
        let model = ConvDenoiser::new(cfg.model);
        let cond = encode_prompt(
            &cfg.prompt,
            cfg.prompt_seed,
            cfg.model.tokens,
            cfg.model.dim,
        )?;
        let empty = encode_prompt("", cfg.prompt_seed, cfg.model.tokens, cfg.model.dim)?;
        Ok(Self {
            schedule: Schedule::new(cfg.t)?,
            model,
            decoder: LatentDecoder::new(cfg.decoder)?,
            cond,
            phis: init_unconditional(cfg.t, &empty)?,
            guidance: GuidanceConfig::new(cfg.omega)?,
        })
    }
}

impl<P: NoisePredictor> Generator<P> {
    pub fn phi_top(&self) -> &Embedding {
        &self.phis[self.phis.len() - 1]
    }

    pub fn render(&self, freq: &ComplexTensor4, phi_t: &Embedding) -> Result<Rendered> {
        let z_t = project_real(&ifft4(freq));
        let mut phis = self.phis.clone();
        *phis.last_mut().expect("non-empty schedule") = phi_t.clone();
        let (z0, cache) = denoise_simplified(
            &z_t,
            &self.cond,
            &phis,
            &self.schedule,
            self.guidance,
            &self.model,
        )?;
        let tau = self.decoder.decode(&z0)?;
        Ok(Rendered {
            z_t,
            z0,
            cache,
            tau,
        })
    }

    pub fn context<'a>(
        &'a self,
        z_t: &'a Tensor4,
        phi_t: &'a Embedding,
        formula: GradFormula,
    ) -> GradContext<'a, P> {
        GradContext {
            schedule: &self.schedule,
            model: &self.model,
            z_t,
            cond: &self.cond,
            phi_t,
            guidance: self.guidance,
            formula,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackState {
    pub freq: ComplexTensor4,
    pub freq_init: ComplexTensor4,
    pub phi_t: Embedding,
    pub epoch: usize,
    pub iter: usize,
    pub loss_history: Vec<f64>,
}

impl AttackState {
    pub fn new(freq: ComplexTensor4, phi_t: Embedding) -> Self {
        Self {
            freq_init: freq.clone(),
            freq,
            phi_t,
            epoch: 0,
            iter: 0,
            loss_history: Vec::new(),
        }
    }

    /// `(|re - re_0|∞, |im - im_0|∞)`.
    pub fn linf_drift(&self) -> (f64, f64) {
        (
            self.freq
                .re
                .max_abs_diff(&self.freq_init.re)
                .expect("same shape"),
            self.freq
                .im
                .max_abs_diff(&self.freq_init.im)
                .expect("same shape"),
        )
    }
}

/// Sign step on both frequency components, projected onto the δ-ball
/// around `freq_init`.
pub fn pgd_step_freq(
    state: &AttackState,
    grad: &ComplexTensor4,
    alpha: f64,
    delta: f64,
) -> Result<AttackState> {
    let step = |x: &Tensor4, g: &Tensor4, c: &Tensor4| -> Result<Tensor4> {
        clamp_linf(&x.lincomb(1.0, &sign(g), -alpha)?, c, delta)
    };
    let mut next = state.clone();
    next.freq = ComplexTensor4 {
        re: step(&state.freq.re, &grad.re, &state.freq_init.re)?,
        im: step(&state.freq.im, &grad.im, &state.freq_init.im)?,
    };
    Ok(next)
}

/// `Φ_T - β·grad`.
pub fn embedding_step(phi_t: &Embedding, grad: &Embedding, beta: f64) -> Result<Embedding> {
    phi_t.lincomb(1.0, grad, -beta)
}

/// Which state components the loop updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    Null,
    Embedding,
    Latent,
    Hybrid,
}

impl AblationMode {
    pub const ALL: [AblationMode; 4] = [Self::Null, Self::Embedding, Self::Latent, Self::Hybrid];

    pub fn name(self) -> &'static str {
        match self {
            Self::Null => "null",
            Self::Embedding => "embedding",
            Self::Latent => "latent",
            Self::Hybrid => "hybrid",
        }
    }

    fn updates_latent(self) -> bool {
        matches!(self, Self::Latent | Self::Hybrid)
    }

    fn updates_embedding(self) -> bool {
        matches!(self, Self::Embedding | Self::Hybrid)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub epoch: usize,
    pub batch: usize,
    pub iter: usize,
    pub loss: f64,
    pub linf_re: f64,
    pub linf_im: f64,
}

#[derive(Debug, Clone)]
pub struct AttackOutcome {
    pub tau: PatchImage,
    pub state: AttackState,
    pub records: Vec<IterationRecord>,
    /// Skipped batches and iterations without gradient signal.
    pub log: Vec<String>,
}

/// Clean detections of each image, optionally restricted to one class.
pub fn clean_boxes<D: Detector + ?Sized>(
    detector: &D,
    images: &[Image],
    class_id: Option<usize>,
) -> Result<Vec<Vec<DetectionBox>>> {
    images
        .par_iter()
        .map(|img| {
            Ok(detector
                .detect(img)?
                .into_iter()
                .filter(|b| class_id.is_none_or(|c| b.class_id == c))
                .collect())
        })
        .collect()
}

/// Loss of one batch with `tau` pasted at `scale`, and its gradient with
/// respect to `tau`.
pub fn patch_loss_and_grad<D: Detector + ?Sized>(
    detector: &D,
    images: &[Image],
    boxes: &[Vec<DetectionBox>],
    tau: &PatchImage,
    scale: f64,
    selection: Selection,
    class_id: Option<usize>,
) -> Result<(f64, Image, usize)> {
    let adv: Vec<Image> = images
        .par_iter()
        .zip(boxes)
        .map(|(img, b)| apply_patch(img, tau, b, scale))
        .collect::<Result<_>>()?;
    let (loss, grads, dets) = loss_and_image_grads(detector, &adv, selection, class_id)?;
    let count = dets.iter().map(Vec::len).sum();
    let per_image: Vec<Image> = images
        .par_iter()
        .zip(boxes)
        .zip(&grads)
        .map(|((img, b), g)| vjp_apply_patch(img, tau, b, scale, g))
        .collect::<Result<_>>()?;
    let mut grad = Image::zeros(tau.height(), tau.width());
    for g in &per_image {
        grad.add_assign(g)?;
    }
    Ok((loss, grad, count))
}

/// Detection loss of `tau` pasted at `scale` on all images at once.
pub fn surrogate_loss<D: Detector + ?Sized>(
    detector: &D,
    images: &[Image],
    tau: &PatchImage,
    scale: f64,
    selection: Selection,
    class_id: Option<usize>,
) -> Result<f64> {
    let boxes = clean_boxes(detector, images, class_id)?;
    let adv: Vec<Image> = images
        .par_iter()
        .zip(&boxes)
        .map(|(img, b)| apply_patch(img, tau, b, scale))
        .collect::<Result<_>>()?;
    let dets: Vec<Vec<Detection>> = adv
        .par_iter()
        .map(|img| detector.detect_cells(img, selection))
        .collect::<Result<_>>()?;
    let confs: Vec<f64> = dets
        .iter()
        .flatten()
        .filter(|d| class_id.is_none_or(|c| d.bbox.class_id == c))
        .map(|d| d.bbox.conf)
        .collect();
    if confs.is_empty() {
        return Ok(0.0);
    }
    Ok(confs.iter().map(|c| c * c).sum::<f64>() / confs.len() as f64)
}

/// Initial state: seeded Gaussian `z_T`, its spectrum, and `Φ_T`.
pub fn initial_state<P: NoisePredictor>(
    cfg: &AttackConfig,
    generator: &Generator<P>,
) -> Result<AttackState> {
    let z_t = initial_latent(cfg.latent_shape, cfg.seed);
    Ok(AttackState::new(fft4(&z_t), generator.phi_top().clone()))
}

/// The full attack loop.
pub fn run_attack<D: Detector + ?Sized>(
    cfg: &AttackConfig,
    surrogate: &D,
    scenes: &[Image],
) -> Result<AttackOutcome> {
    run_ablation(cfg, surrogate, scenes, AblationMode::Hybrid)
}

/// The attack loop with some updates disabled.
pub fn run_ablation<D: Detector + ?Sized>(
    cfg: &AttackConfig,
    surrogate: &D,
    scenes: &[Image],
    mode: AblationMode,
) -> Result<AttackOutcome> {
    let generator = Generator::from_config(cfg)?;
    run_with_generator(cfg, &generator, surrogate, scenes, mode)
}

pub fn run_with_generator<P: NoisePredictor, D: Detector + ?Sized>(
    cfg: &AttackConfig,
    generator: &Generator<P>,
    surrogate: &D,
    scenes: &[Image],
    mode: AblationMode,
) -> Result<AttackOutcome> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::invalid("attack needs at least one scene"));
    }
    let (selection, class_id) = (cfg.selection(), cfg.class_filter());
    let mut state = initial_state(cfg, generator)?;
    let mut rendered = generator.render(&state.freq, &state.phi_t)?;
    let mut records = Vec::new();
    let mut log = Vec::new();
    let memo = if cfg.memoize_clean {
        Some(clean_boxes(surrogate, scenes, class_id)?)
    } else {
        None
    };
    let batches = batch(scenes, cfg.bs)?;
    for epoch in 1..=cfg.m {
        state.epoch = epoch;
        let mut start = 0;
        for (b, images) in batches.iter().enumerate() {
            let range = start..start + images.len();
            start += images.len();
            for k in 1..=cfg.k {
                let boxes = match &memo {
                    Some(all) => all[range.clone()].to_vec(),
                    None => clean_boxes(surrogate, images, class_id)?,
                };
                if boxes.iter().all(Vec::is_empty) {
                    log.push(format!(
                        "epoch {epoch} batch {b}: no clean detections, skipped"
                    ));
                    break;
                }
                let (loss, grad_tau, count) = patch_loss_and_grad(
                    surrogate,
                    images,
                    &boxes,
                    &rendered.tau,
                    cfg.train_scale,
                    selection,
                    class_id,
                )?;
                state.iter += 1;
                state.loss_history.push(loss);
                if count == 0 {
                    log.push(format!(
                        "epoch {epoch} batch {b} iter {k}: no adversarial detections, no update"
                    ));
                } else if mode != AblationMode::Null {
                    let grad_z0 = generator.decoder.vjp(&rendered.z0, &grad_tau)?;
                    let ctx = generator.context(&rendered.z_t, &state.phi_t, cfg.grad_formula);
                    let grad_freq = assemble_grad_freq(&grad_z0, &ctx)?;
                    let grad_emb = assemble_grad_embedding(&grad_z0, &ctx)?;
                    if mode.updates_latent() {
                        state = pgd_step_freq(&state, &grad_freq, cfg.alpha, cfg.delta)?;
                    }
                    if mode.updates_embedding() {
                        state.phi_t = embedding_step(&state.phi_t, &grad_emb, cfg.beta)?;
                    }
                    rendered = generator.render(&state.freq, &state.phi_t)?;
                }
                let (linf_re, linf_im) = state.linf_drift();
                records.push(IterationRecord {
                    epoch,
                    batch: b,
                    iter: k,
                    loss,
                    linf_re,
                    linf_im,
                });
            }
        }
    }
    Ok(AttackOutcome {
        tau: rendered.tau,
        state,
        records,
        log,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub steps: usize,
    pub step_size: f64,
    pub seed: u64,
    /// Side of the square patch.
    pub size: usize,
    pub scale: f64,
    pub restrict_to_target: bool,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            step_size: 1.0 / 255.0,
            seed: 0,
            size: 128,
            scale: DEFAULT_TRAIN_SCALE,
            restrict_to_target: true,
        }
    }
}

/// Seeded uniform random patch.
pub fn random_patch(size: usize, seed: u64) -> Result<PatchImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::new(
        size,
        size,
        (0..3 * size * size)
            .map(|_| rng.random_range(0.0..1.0))
            .collect(),
    )
}

/// Pixel-space sign-PGD on the patch itself. Returns the patch and the
/// loss before each step plus the final loss.
pub fn advpatch_baseline<D: Detector + ?Sized>(
    surrogate: &D,
    scenes: &[Image],
    cfg: &BaselineConfig,
) -> Result<(PatchImage, Vec<f64>)> {
    if scenes.is_empty() {
        return Err(Error::invalid("baseline needs at least one scene"));
    }
    let class_id = cfg.restrict_to_target.then_some(TARGET_CLASS);
    let boxes = clean_boxes(surrogate, scenes, class_id)?;
    let mut tau = random_patch(cfg.size, cfg.seed)?;
    let mut history = Vec::with_capacity(cfg.steps + 1);
    for _ in 0..cfg.steps {
        let (loss, grad, _) = patch_loss_and_grad(
            surrogate,
            scenes,
            &boxes,
            &tau,
            cfg.scale,
            Selection::Nms,
            class_id,
        )?;
        history.push(loss);
        let step: Vec<f64> = tau
            .data()
            .iter()
            .zip(grad.data())
            .map(|(&v, &g)| {
                (v - cfg.step_size * g.signum() * (g != 0.0) as u8 as f64).clamp(0.0, 1.0)
            })
            .collect();
        tau = Image::new(tau.height(), tau.width(), step)?;
    }
    let (loss, _, _) = patch_loss_and_grad(
        surrogate,
        scenes,
        &boxes,
        &tau,
        cfg.scale,
        Selection::Nms,
        class_id,
    )?;
    history.push(loss);
    Ok((tau, history))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_schedule() -> Schedule {
        Schedule::new(5).unwrap()
    }

    #[test]
    fn coefficients_coincide_on_flat_top_step() {
        let s = Schedule::from_betas(vec![0.01, 0.02, 0.0]).unwrap();
        let (a1, a2) = gradient_coefficients(&s, GradFormula::PaperExact);
        let (b1, b2) = gradient_coefficients(&s, GradFormula::Rederived);
        assert!((a1 - b1).abs() < 1e-14);
        assert!(a2.abs() < 1e-14 && b2.abs() < 1e-14);
        let s = small_schedule();
        let (p1, p2) = gradient_coefficients(&s, GradFormula::PaperExact);
        let (r1, r2) = gradient_coefficients(&s, GradFormula::Rederived);
        assert!(p1 < r1);
        assert!(p2 < 0.0 && r2 < 0.0);
    }

    #[test]
    fn zero_model_gradient_is_scaled_adjoint() {
        let cfg = DenoiserConfig::default();
        let model = ConvDenoiser::zeroed(cfg);
        let s = small_schedule();
        let z = initial_latent([1, 4, 4, 4], 1);
        let g = initial_latent([1, 4, 4, 4], 2);
        let cond = encode_prompt("c", 0, cfg.tokens, cfg.dim).unwrap();
        let phi = encode_prompt("", 0, cfg.tokens, cfg.dim).unwrap();
        let ctx = GradContext {
            schedule: &s,
            model: &model,
            z_t: &z,
            cond: &cond,
            phi_t: &phi,
            guidance: GuidanceConfig::default(),
            formula: GradFormula::Rederived,
        };
        let got = assemble_grad_freq(&g, &ctx).unwrap();
        let (c1, _) = gradient_coefficients(&s, GradFormula::Rederived);
        let want = real_ifft4_adjoint(&g.scale(c1));
        assert!(got.max_abs_diff(&want).unwrap() < 1e-12);
        assert_eq!(assemble_grad_embedding(&g, &ctx).unwrap().max_abs(), 0.0);
        let zero = Tensor4::zeros(z.shape());
        assert_eq!(assemble_grad_freq(&zero, &ctx).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn unit_guidance_kills_embedding_gradient() {
        let cfg = DenoiserConfig::default();
        let model = ConvDenoiser::new(cfg);
        let s = small_schedule();
        let z = initial_latent([1, 4, 4, 4], 3);
        let g = initial_latent([1, 4, 4, 4], 4);
        let cond = encode_prompt("c", 0, cfg.tokens, cfg.dim).unwrap();
        let phi = encode_prompt("", 0, cfg.tokens, cfg.dim).unwrap();
        let mut ctx = GradContext {
            schedule: &s,
            model: &model,
            z_t: &z,
            cond: &cond,
            phi_t: &phi,
            guidance: GuidanceConfig::new(1.0).unwrap(),
            formula: GradFormula::Rederived,
        };
        assert_eq!(assemble_grad_embedding(&g, &ctx).unwrap().max_abs(), 0.0);
        ctx.guidance = GuidanceConfig::default();
        assert!(assemble_grad_embedding(&g, &ctx).unwrap().max_abs() > 0.0);
        assert!(assemble_grad_freq(&Tensor4::zeros([1, 4, 4, 5]), &ctx).is_err());
    }

    #[test]
    fn pgd_step_examples() {
        let re = initial_latent([1, 1, 2, 3], 5);
        let im = initial_latent([1, 1, 2, 3], 6);
        let state = AttackState::new(
            ComplexTensor4::new(re.clone(), im).unwrap(),
            Embedding::zeros(1, 1),
        );
        let zero = ComplexTensor4::zeros(re.shape());
        assert_eq!(pgd_step_freq(&state, &zero, 0.2, 30.0).unwrap(), state);
        let ones = ComplexTensor4::new(
            Tensor4::full(re.shape(), 1.0),
            Tensor4::full(re.shape(), -2.0),
        )
        .unwrap();
        let next = pgd_step_freq(&state, &ones, 0.2, 30.0).unwrap();
        for (a, b) in next.freq.re.data().iter().zip(state.freq.re.data()) {
            assert!((b - a - 0.2).abs() < 1e-15);
        }
        for (a, b) in next.freq.im.data().iter().zip(state.freq.im.data()) {
            assert!((a - b - 0.2).abs() < 1e-15);
        }
        let mut s = state.clone();
        for _ in 0..200 {
            s = pgd_step_freq(&s, &ones, 0.2, 30.0).unwrap();
            let (dr, di) = s.linf_drift();
            assert!(dr <= 30.0 && di <= 30.0);
        }
        let (dr, di) = s.linf_drift();
        assert!(dr > 30.0 - 1e-9 && di > 30.0 - 1e-9);
    }

    #[test]
    fn embedding_step_examples() {
        let phi = encode_prompt("", 0, 2, 3).unwrap();
        let zero = Embedding::zeros(2, 3);
        assert_eq!(embedding_step(&phi, &zero, 1e-4).unwrap(), phi);
        let unit = Embedding::new(2, 3, vec![1.0; 6]).unwrap();
        assert_eq!(embedding_step(&phi, &unit, 0.0).unwrap(), phi);
        let next = embedding_step(&phi, &unit, 1e-4).unwrap();
        for (a, b) in next.data().iter().zip(phi.data()) {
            assert!((b - a - 1e-4).abs() < 1e-15);
        }
        assert!(embedding_step(&phi, &Embedding::zeros(3, 2), 1e-4).is_err());
    }

    #[test]
    fn config_json_round_trip_and_validation() {
        let cfg = AttackConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert!(text.contains("\"grad_formula\":\"rederived\""));
        let back: AttackConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        let partial: AttackConfig = serde_json::from_str(r#"{"m": 2, "prompt": "x"}"#).unwrap();
        assert_eq!((partial.m, partial.k), (2, 5));
        assert!(AttackConfig {
            bs: 0,
            ..cfg.clone()
        }
        .validate()
        .is_err());
        assert!(AttackConfig {
            alpha: 0.0,
            ..cfg.clone()
        }
        .validate()
        .is_err());
        assert!(AttackConfig {
            latent_shape: [1, 3, 16, 16],
            ..cfg
        }
        .validate()
        .is_err());
    }

    #[test]
    fn zero_epochs_return_initial_logo() {
        let cfg = AttackConfig {
            m: 0,
            t: 3,
            ..AttackConfig::default()
        };
        let det = crate::detector::GridDetector::new(Default::default()).unwrap();
        let scenes = vec![Image::filled(64, 64, 0.5)];
        let out = run_attack(&cfg, &det, &scenes).unwrap();
        let generator = Generator::from_config(&cfg).unwrap();
        let st = initial_state(&cfg, &generator).unwrap();
        assert_eq!(out.tau, generator.render(&st.freq, &st.phi_t).unwrap().tau);
        assert!(out.records.is_empty());
    }

    #[test]
    fn scenes_without_detections_are_skipped() {
        let cfg = AttackConfig {
            m: 1,
            t: 2,
            ..AttackConfig::default()
        };
        let det = crate::detector::GridDetector::new(Default::default()).unwrap();
        let scenes = vec![Image::filled(64, 64, 0.5); 3];
        let out = run_attack(&cfg, &det, &scenes).unwrap();
        assert_eq!(out.log.len(), 1);
        assert!(out.state.loss_history.is_empty());
        assert!(run_attack(&cfg, &det, &[]).is_err());
    }

    #[test]
    fn baseline_zero_steps_is_random_patch() {
        let det = crate::detector::GridDetector::new(Default::default()).unwrap();
        let scenes = vec![Image::filled(64, 64, 0.5)];
        let cfg = BaselineConfig {
            steps: 0,
            size: 16,
            ..BaselineConfig::default()
        };
        let (tau, hist) = advpatch_baseline(&det, &scenes, &cfg).unwrap();
        assert_eq!(tau, random_patch(16, 0).unwrap());
        assert_eq!(hist, vec![0.0]);
    }
}
