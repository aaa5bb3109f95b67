//! Finite-difference checks of the attack gradients.
//!
//! The objective differentiated by the attack is the detection loss of the
//! patched scenes with every denoising step after the first replaying its
//! recorded noise prediction, the clean anchor boxes fixed and the set of
//! scored detector cells fixed. [`GradInstance`] builds small seeded
//! instances of it and compares analytic gradients with central
//! differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attack::{
    assemble_grad_embedding, assemble_grad_freq, clean_boxes, initial_state, AttackConfig,
    Generator, GradFormula,
};
use crate::conditioning::Embedding;
use crate::denoiser::NoisePredictor;
use crate::detector::{
    frozen_loss_and_grads, Cell, DetectionBox, Detector, DetectorSpec, GridDetector, Selection,
    TARGET_CLASS,
};
use crate::diffusion::{denoise_with_cache, NoiseCache};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::patching::{apply_patch, generate_scenes_for, vjp_apply_patch};
use crate::tensor::ifft4;
use crate::tensor::{project_real, ComplexTensor4, Tensor4};

/// `‖analytic - numeric‖∞ / ‖numeric‖∞`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let num = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    if num == 0.0 {
        diff
    } else {
        diff / num
    }
}

/// `(f(x + h) - f(x - h)) / 2h` for a scalar perturbation.
pub fn central_difference(f: impl Fn(f64) -> Result<f64>, h: f64) -> Result<f64> {
    Ok((f(h)? - f(-h)?) / (2.0 * h))
}

fn pick(rng: &mut ChaCha8Rng, n: usize, count: usize) -> Vec<usize> {
    if count >= n {
        return (0..n).collect();
    }
    let mut picked: Vec<usize> = Vec::with_capacity(count);
    while picked.len() < count {
        let i = rng.random_range(0..n);
        if !picked.contains(&i) {
            picked.push(i);
        }
    }
    picked
}

/// A small frozen-cache attack objective.
pub struct GradInstance {
    pub cfg: AttackConfig,
    pub generator: Generator,
    pub detector: GridDetector,
    pub scenes: Vec<Image>,
    pub boxes: Vec<Vec<DetectionBox>>,
    pub cells: Vec<Vec<Cell>>,
    pub freq: ComplexTensor4,
    pub phi_t: Embedding,
    pub cache: NoiseCache,
    /// Smallest distance of a scored confidence from the threshold.
    pub threshold_margin: f64,
}

impl GradInstance {
    /// Latent `1×4×8×8`, five denoising steps, two 96×96 scenes.
    pub fn seeded(seed: u64) -> Result<Self> {
        let mut cfg = AttackConfig {
            t: 5,
            seed,
            prompt_seed: seed,
            latent_shape: [1, 4, 8, 8],
            ..AttackConfig::default()
        };
        cfg.model.seed = seed;
        cfg.decoder.seed = seed;
        let generator = Generator::from_config(&cfg)?;
        let state = initial_state(&cfg, &generator)?;
        let rendered = generator.render(&state.freq, &state.phi_t)?;
        let detector = GridDetector::new(DetectorSpec::default())?;
        let scenes: Vec<Image> =
            generate_scenes_for(seed, 2, 96, 96, std::slice::from_ref(&detector))?
                .into_iter()
                .map(|s| s.image)
                .collect();
        let boxes = clean_boxes(&detector, &scenes, Some(TARGET_CLASS))?;
        let mut cells = Vec::with_capacity(scenes.len());
        let mut margin = f64::INFINITY;
        for (img, b) in scenes.iter().zip(&boxes) {
            let adv = apply_patch(img, &rendered.tau, b, cfg.train_scale)?;
            let dets = detector.detect_cells(&adv, Selection::Nms)?;
            for d in &dets {
                margin = margin.min((d.bbox.conf - detector.threshold()).abs());
            }
            cells.push(dets.into_iter().map(|d| d.cell).collect::<Vec<_>>());
        }
        if cells.iter().all(Vec::is_empty) {
            return Err(Error::invalid(format!(
                "seed {seed}: patch already hides every target"
            )));
        }
        Ok(Self {
            cfg,
            generator,
            detector,
            scenes,
            boxes,
            cells,
            freq: state.freq,
            phi_t: state.phi_t,
            cache: rendered.cache,
            threshold_margin: margin,
        })
    }

    fn z_t(&self, freq: &ComplexTensor4) -> Tensor4 {
        project_real(&ifft4(freq))
    }

    fn z0(&self, freq: &ComplexTensor4, phi_t: &Embedding) -> Result<Tensor4> {
        let g = &self.generator;
        denoise_with_cache(
            &self.z_t(freq),
            &g.cond,
            phi_t,
            &g.schedule,
            g.guidance,
            &g.model,
            &self.cache,
        )
    }

    fn patched(&self, tau: &Image) -> Result<Vec<Image>> {
        self.scenes
            .iter()
            .zip(&self.boxes)
            .map(|(img, b)| apply_patch(img, tau, b, self.cfg.train_scale))
            .collect()
    }

    /// Frozen-cache, frozen-selection detection loss.
    pub fn objective(&self, freq: &ComplexTensor4, phi_t: &Embedding) -> Result<f64> {
        let tau = self.generator.decoder.decode(&self.z0(freq, phi_t)?)?;
        Ok(frozen_loss_and_grads(&self.detector, &self.patched(&tau)?, &self.cells)?.0)
    }

    /// Gradient of the objective with respect to `z_0`.
    pub fn grad_z0(&self) -> Result<Tensor4> {
        let z0 = self.z0(&self.freq, &self.phi_t)?;
        let tau = self.generator.decoder.decode(&z0)?;
        let adv = self.patched(&tau)?;
        let (_, grads) = frozen_loss_and_grads(&self.detector, &adv, &self.cells)?;
        let mut grad_tau = Image::zeros(tau.height(), tau.width());
        for ((img, b), g) in self.scenes.iter().zip(&self.boxes).zip(&grads) {
            grad_tau.add_assign(&vjp_apply_patch(img, &tau, b, self.cfg.train_scale, g)?)?;
        }
        self.generator.decoder.vjp(&z0, &grad_tau)
    }

    pub fn analytic(&self, formula: GradFormula) -> Result<(ComplexTensor4, Embedding)> {
        let grad_z0 = self.grad_z0()?;
        let z_t = self.z_t(&self.freq);
        let ctx = self.generator.context(&z_t, &self.phi_t, formula);
        Ok((
            assemble_grad_freq(&grad_z0, &ctx)?,
            assemble_grad_embedding(&grad_z0, &ctx)?,
        ))
    }

    /// Central differences at `coords` of `re` then `im` (flat indices).
    pub fn numeric_freq(&self, re: &[usize], im: &[usize], h: f64) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(re.len() + im.len());
        for (part, idx) in re.iter().map(|&i| (0, i)).chain(im.iter().map(|&i| (1, i))) {
            out.push(central_difference(
                |d| {
                    let mut f = self.freq.clone();
                    let t = if part == 0 { &mut f.re } else { &mut f.im };
                    let v = t.data()[idx] + d;
                    *t = t.with_entry_flat(idx, v);
                    self.objective(&f, &self.phi_t)
                },
                h,
            )?);
        }
        Ok(out)
    }

    pub fn numeric_embedding(&self, coords: &[usize], h: f64) -> Result<Vec<f64>> {
        let dim = self.phi_t.dim();
        coords
            .iter()
            .map(|&i| {
                central_difference(
                    |d| {
                        let (tok, k) = (i / dim, i % dim);
                        let phi = self.phi_t.with_entry(tok, k, self.phi_t.get(tok, k) + d);
                        self.objective(&self.freq, &phi)
                    },
                    h,
                )
            })
            .collect()
    }
}

/// Relative errors of one instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradcheckResult {
    pub seed: u64,
    pub freq_rel_error: f64,
    pub embedding_rel_error: f64,
    pub paper_exact_freq_rel_error: f64,
    pub paper_exact_embedding_rel_error: f64,
    pub threshold_margin: f64,
}

/// Compares both gradient formulas with central differences on `coords`
/// random coordinates of each parameter block.
pub fn check_instance(seed: u64, coords: usize, h: f64) -> Result<GradcheckResult> {
    let inst = GradInstance::seeded(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6772_6164);
    let n = inst.freq.re.len();
    let re = pick(&mut rng, n, coords);
    let im = pick(&mut rng, n, coords);
    let emb = pick(&mut rng, inst.phi_t.data().len(), coords);
    let fd_freq = inst.numeric_freq(&re, &im, h)?;
    let fd_emb = inst.numeric_embedding(&emb, h)?;
    let gather = |g: &ComplexTensor4| -> Vec<f64> {
        re.iter()
            .map(|&i| g.re.data()[i])
            .chain(im.iter().map(|&i| g.im.data()[i]))
            .collect()
    };
    let gather_emb = |g: &Embedding| -> Vec<f64> { emb.iter().map(|&i| g.data()[i]).collect() };
    let (rf, re_emb) = inst.analytic(GradFormula::Rederived)?;
    let (pf, pe_emb) = inst.analytic(GradFormula::PaperExact)?;
    Ok(GradcheckResult {
        seed,
        freq_rel_error: relative_error(&gather(&rf), &fd_freq),
        embedding_rel_error: relative_error(&gather_emb(&re_emb), &fd_emb),
        paper_exact_freq_rel_error: relative_error(&gather(&pf), &fd_freq),
        paper_exact_embedding_rel_error: relative_error(&gather_emb(&pe_emb), &fd_emb),
        threshold_margin: inst.threshold_margin,
    })
}

/// Relative errors of the individual vector-Jacobian products.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ComponentErrors {
    pub denoiser_latent: f64,
    pub denoiser_embedding: f64,
    pub detector_loss: f64,
    pub patch_applier: f64,
    pub decoder: f64,
}

impl ComponentErrors {
    pub fn max(&self) -> f64 {
        [
            self.denoiser_latent,
            self.denoiser_embedding,
            self.detector_loss,
            self.patch_applier,
            self.decoder,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }
}

fn dot_tensor(a: &Tensor4, b: &Tensor4) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Checks each component VJP of a seeded instance against central
/// differences of `⟨cotangent, forward⟩`.
pub fn check_components(seed: u64, coords: usize, h: f64) -> Result<ComponentErrors> {
    let inst = GradInstance::seeded(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x636f_6d70);
    let g = &inst.generator;
    let t = g.schedule.steps();
    let z = inst.z_t(&inst.freq);
    let u = Tensor4::randn(z.shape(), &mut rng);

    let latent_idx = pick(&mut rng, z.len(), coords);
    let vjp = g.model.vjp_latent(&z, &inst.phi_t, t, &u)?;
    let fd: Vec<f64> = latent_idx
        .iter()
        .map(|&i| {
            central_difference(
                |d| {
                    Ok(dot_tensor(
                        &u,
                        &g.model
                            .predict(&z.with_entry_flat(i, z.data()[i] + d), &inst.phi_t, t)?,
                    ))
                },
                h,
            )
        })
        .collect::<Result<_>>()?;
    let an: Vec<f64> = latent_idx.iter().map(|&i| vjp.data()[i]).collect();
    let denoiser_latent = relative_error(&an, &fd);

    let dim = inst.phi_t.dim();
    let emb_idx = pick(&mut rng, inst.phi_t.data().len(), coords);
    let vjp = g.model.vjp_embedding(&z, &inst.phi_t, t, &u)?;
    let fd: Vec<f64> = emb_idx
        .iter()
        .map(|&i| {
            central_difference(
                |d| {
                    let phi = inst
                        .phi_t
                        .with_entry(i / dim, i % dim, inst.phi_t.data()[i] + d);
                    Ok(dot_tensor(&u, &g.model.predict(&z, &phi, t)?))
                },
                h,
            )
        })
        .collect::<Result<_>>()?;
    let an: Vec<f64> = emb_idx.iter().map(|&i| vjp.data()[i]).collect();
    let denoiser_embedding = relative_error(&an, &fd);

    let z0 = inst.z0(&inst.freq, &inst.phi_t)?;
    let tau = g.decoder.decode(&z0)?;
    let adv = inst.patched(&tau)?;
    let (_, grads) = frozen_loss_and_grads(&inst.detector, &adv, &inst.cells)?;
    let (img_i, grad_img) = grads
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.max_abs().total_cmp(&b.1.max_abs()))
        .expect("at least one scene");
    let support: Vec<usize> = (0..grad_img.data().len())
        .filter(|&k| grad_img.data()[k] != 0.0)
        .collect();
    let chosen: Vec<usize> = pick(&mut rng, support.len(), coords)
        .into_iter()
        .map(|k| support[k])
        .collect();
    let (hh, ww) = adv[img_i].dims();
    let fd: Vec<f64> = chosen
        .iter()
        .map(|&k| {
            let (c, y, x) = (k / (hh * ww), (k / ww) % hh, k % ww);
            central_difference(
                |d| {
                    let mut imgs = adv.clone();
                    imgs[img_i] = adv[img_i].with_pixel(c, y, x, adv[img_i].get(c, y, x) + d);
                    Ok(frozen_loss_and_grads(&inst.detector, &imgs, &inst.cells)?.0)
                },
                h,
            )
        })
        .collect::<Result<_>>()?;
    let an: Vec<f64> = chosen.iter().map(|&k| grad_img.data()[k]).collect();
    let detector_loss = relative_error(&an, &fd);

    let scene = &inst.scenes[img_i];
    let boxes = &inst.boxes[img_i];
    let cot = Image::new(
        scene.height(),
        scene.width(),
        (0..scene.data().len())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    )?;
    let vjp = vjp_apply_patch(scene, &tau, boxes, inst.cfg.train_scale, &cot)?;
    let tau_idx = pick(&mut rng, tau.data().len(), coords * 4)
        .into_iter()
        .filter(|&k| vjp.data()[k] != 0.0)
        .take(coords)
        .collect::<Vec<_>>();
    let (th, tw) = tau.dims();
    let fd: Vec<f64> = tau_idx
        .iter()
        .map(|&k| {
            let (c, y, x) = (k / (th * tw), (k / tw) % th, k % tw);
            central_difference(
                |d| {
                    let p = tau.with_pixel(c, y, x, tau.get(c, y, x) + d);
                    apply_patch(scene, &p, boxes, inst.cfg.train_scale)?.dot(&cot)
                },
                h,
            )
        })
        .collect::<Result<_>>()?;
    let an: Vec<f64> = tau_idx.iter().map(|&k| vjp.data()[k]).collect();
    let patch_applier = relative_error(&an, &fd);

    let cot = Image::new(
        tau.height(),
        tau.width(),
        (0..tau.data().len())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    )?;
    let vjp = g.decoder.vjp(&z0, &cot)?;
    let z_idx = pick(&mut rng, z0.len(), coords);
    let fd: Vec<f64> = z_idx
        .iter()
        .map(|&i| {
            central_difference(
                |d| {
                    g.decoder
                        .decode(&z0.with_entry_flat(i, z0.data()[i] + d))?
                        .dot(&cot)
                },
                h,
            )
        })
        .collect::<Result<_>>()?;
    let an: Vec<f64> = z_idx.iter().map(|&i| vjp.data()[i]).collect();
    let decoder = relative_error(&an, &fd);

    Ok(ComponentErrors {
        denoiser_latent,
        denoiser_embedding,
        detector_loss,
        patch_applier,
        decoder,
    })
}
