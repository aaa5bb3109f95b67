//! Noise-prediction network `ε_θ(z_t, embedding, t)` with exact
//! vector-Jacobian products.
//!
//! [`ConvDenoiser`] is a deliberately tiny conditional network: two 3×3
//! convolutions with a tanh in between, the hidden activations modulated
//! per channel by an affine map of the (token-pooled) embedding plus a
//! sinusoidal timestep feature, and a `3·tanh` output head. It is small
//! enough that every gradient can be checked against finite differences,
//! yet both the latent and the embedding legs are nontrivial.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::conditioning::Embedding;
use crate::diffusion::Schedule;
use crate::error::{Error, Result};
use crate::tensor::{read_tensor, write_tensor, Tensor4};

/// Bound on the magnitude of predicted noise.
pub const OUTPUT_BOUND: f64 = 3.0;
const MOD_INIT: f64 = 0.15;

/// A noise predictor usable by the diffusion sampler and the attack.
pub trait NoisePredictor: Send + Sync {
    fn predict(&self, z: &Tensor4, emb: &Embedding, t: usize) -> Result<Tensor4>;

    /// `cotangentᵀ · ∂predict/∂z`.
    fn vjp_latent(
        &self,
        z: &Tensor4,
        emb: &Embedding,
        t: usize,
        cotangent: &Tensor4,
    ) -> Result<Tensor4>;

    /// `cotangentᵀ · ∂predict/∂emb`.
    fn vjp_embedding(
        &self,
        z: &Tensor4,
        emb: &Embedding,
        t: usize,
        cotangent: &Tensor4,
    ) -> Result<Embedding>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    pub hidden: usize,
    pub tokens: usize,
    pub dim: usize,
    pub seed: u64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            hidden: 8,
            tokens: 8,
            dim: 32,
            seed: 0,
        }
    }
}

/// Parameter set of [`ConvDenoiser`]. Layouts:
/// `w1: [hidden, c, 3, 3]`, `w2: [c, hidden, 3, 3]`, `mod_scale` and
/// `mod_shift: [hidden, dim]`, `pool: [tokens]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub pool: Vec<f64>,
    pub mod_scale: Vec<f64>,
    pub mod_shift: Vec<f64>,
    pub time_scale: Vec<f64>,
    pub time_shift: Vec<f64>,
}

impl DenoiserParams {
    fn zeros(cfg: &DenoiserConfig) -> Self {
        let (c, h, l, d) = (cfg.latent_channels, cfg.hidden, cfg.tokens, cfg.dim);
        Self {
            w1: vec![0.0; h * c * 9],
            b1: vec![0.0; h],
            w2: vec![0.0; c * h * 9],
            b2: vec![0.0; c],
            pool: vec![0.0; l],
            mod_scale: vec![0.0; h * d],
            mod_shift: vec![0.0; h * d],
            time_scale: vec![0.0; h],
            time_shift: vec![0.0; h],
        }
    }

    fn fields(&self) -> [(&'static str, &Vec<f64>); 9] {
        [
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
            ("pool", &self.pool),
            ("mod_scale", &self.mod_scale),
            ("mod_shift", &self.mod_shift),
            ("time_scale", &self.time_scale),
            ("time_shift", &self.time_shift),
        ]
    }

    fn fields_mut(&mut self) -> [(&'static str, &mut Vec<f64>); 9] {
        [
            ("w1", &mut self.w1),
            ("b1", &mut self.b1),
            ("w2", &mut self.w2),
            ("b2", &mut self.b2),
            ("pool", &mut self.pool),
            ("mod_scale", &mut self.mod_scale),
            ("mod_shift", &mut self.mod_shift),
            ("time_scale", &mut self.time_scale),
            ("time_shift", &mut self.time_shift),
        ]
    }

    fn axpy(&mut self, a: f64, other: &DenoiserParams) {
        for ((_, dst), (_, src)) in self.fields_mut().into_iter().zip(other.fields()) {
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += a * s);
        }
    }

    fn norm(&self) -> f64 {
        self.fields()
            .iter()
            .flat_map(|(_, v)| v.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: DenoiserConfig,
    parameters: Vec<String>,
}

/// Intermediate activations kept for the backward pass.
struct Forward {
    a1: Vec<f64>,
    hidden: Vec<f64>,
    a2: Vec<f64>,
    gain: Vec<f64>,
    pooled: Vec<f64>,
    time_feature: f64,
}

/// Gradients of all inputs and parameters for one cotangent.
struct Backward {
    latent: Vec<f64>,
    embedding: Vec<f64>,
    params: DenoiserParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvDenoiser {
    config: DenoiserConfig,
    params: DenoiserParams,
}

/// Scalar timestep feature injected into the modulation.
pub fn time_feature(t: usize) -> f64 {
    (t as f64 / 10.0).sin()
}

impl ConvDenoiser {
    /// Seeded random weights.
    pub fn new(config: DenoiserConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x6465_6e6f_6973_6572);
        let mut p = DenoiserParams::zeros(&config);
        let (c, h, l, d) = (
            config.latent_channels,
            config.hidden,
            config.tokens,
            config.dim,
        );
        let mut fill = |v: &mut Vec<f64>, std: f64| {
            v.iter_mut()
                .for_each(|x| *x = std * rng.sample::<f64, _>(StandardNormal));
        };
        fill(&mut p.w1, 1.0 / ((c * 9) as f64).sqrt());
        fill(&mut p.b1, 0.1);
        fill(&mut p.w2, 1.0 / ((h * 9) as f64).sqrt());
        fill(&mut p.b2, 0.05);
        // Conditioning moves the prediction by a modest fraction, so the
        // guided difference stays comparable to the prediction itself.
        fill(&mut p.mod_scale, MOD_INIT / (d as f64).sqrt());
        fill(&mut p.mod_shift, MOD_INIT / (d as f64).sqrt());
        fill(&mut p.time_scale, 0.2);
        fill(&mut p.time_shift, 0.2);
        fill(&mut p.pool, 0.5 / l as f64);
        p.pool.iter_mut().for_each(|w| *w += 1.0 / l as f64);
        Self { config, params: p }
    }

    /// All-zero parameters; predicts zero noise for every input.
    pub fn zeroed(config: DenoiserConfig) -> Self {
        Self {
            params: DenoiserParams::zeros(&config),
            config,
        }
    }

    pub fn from_params(config: DenoiserConfig, params: DenoiserParams) -> Result<Self> {
        let expected = DenoiserParams::zeros(&config);
        for ((name, want), (_, got)) in expected.fields().iter().zip(params.fields()) {
            if want.len() != got.len() {
                return Err(Error::shape(
                    format!("{name}: {}", want.len()),
                    format!("{name}: {}", got.len()),
                ));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &DenoiserParams {
        &self.params
    }

    /// Zero out the pooling weight of one token, disconnecting it.
    pub fn with_pool_weight(mut self, token: usize, weight: f64) -> Self {
        self.params.pool[token] = weight;
        self
    }

    fn check(&self, z: &Tensor4, emb: &Embedding) -> Result<()> {
        let [_, c, _, _] = z.shape();
        if c != self.config.latent_channels {
            return Err(Error::shape(
                format!("{} latent channels", self.config.latent_channels),
                z.shape(),
            ));
        }
        if emb.tokens() != self.config.tokens || emb.dim() != self.config.dim {
            return Err(Error::shape(
                (self.config.tokens, self.config.dim),
                (emb.tokens(), emb.dim()),
            ));
        }
        Ok(())
    }

    fn pool(&self, emb: &Embedding) -> Vec<f64> {
        let d = self.config.dim;
        let mut pooled = vec![0.0; d];
        for (l, &w) in self.params.pool.iter().enumerate() {
            for (j, p) in pooled.iter_mut().enumerate() {
                *p += w * emb.get(l, j);
            }
        }
        pooled
    }

    fn forward(&self, z: &Tensor4, emb: &Embedding, t: usize) -> Forward {
        let [n, c, height, width] = z.shape();
        let (hid, d) = (self.config.hidden, self.config.dim);
        let p = &self.params;
        let pooled = self.pool(emb);
        let s = time_feature(t);
        let mut gain = vec![0.0; hid];
        let mut shift = vec![0.0; hid];
        for k in 0..hid {
            let row = k * d..(k + 1) * d;
            let g: f64 = p.mod_scale[row.clone()]
                .iter()
                .zip(&pooled)
                .map(|(a, b)| a * b)
                .sum();
            let b: f64 = p.mod_shift[row]
                .iter()
                .zip(&pooled)
                .map(|(a, b)| a * b)
                .sum();
            gain[k] = 1.0 + g + p.time_scale[k] * s;
            shift[k] = b + p.time_shift[k] * s;
        }
        let a1 = conv3x3(z.data(), n, c, height, width, &p.w1, hid, &p.b1);
        let plane = height * width;
        let mut hidden = vec![0.0; a1.len()];
        for (i, (hv, &av)) in hidden.iter_mut().zip(&a1).enumerate() {
            let k = (i / plane) % hid;
            *hv = (av * gain[k] + shift[k]).tanh();
        }
        let a2 = conv3x3(&hidden, n, hid, height, width, &p.w2, c, &p.b2);
        Forward {
            a1,
            hidden,
            a2,
            gain,
            pooled,
            time_feature: s,
        }
    }

    fn backward(
        &self,
        z: &Tensor4,
        emb: &Embedding,
        fwd: &Forward,
        cotangent: &Tensor4,
        want_params: bool,
    ) -> Backward {
        let [n, c, height, width] = z.shape();
        let (hid, d, l) = (self.config.hidden, self.config.dim, self.config.tokens);
        let p = &self.params;
        let plane = height * width;

        let da2: Vec<f64> = fwd
            .a2
            .iter()
            .zip(cotangent.data())
            .map(|(&a, &u)| {
                let th = a.tanh();
                u * OUTPUT_BOUND * (1.0 - th * th)
            })
            .collect();
        let dh = conv3x3_input_grad(&da2, n, c, height, width, &p.w2, hid);
        let dm: Vec<f64> = dh
            .iter()
            .zip(&fwd.hidden)
            .map(|(&g, &h)| g * (1.0 - h * h))
            .collect();
        let mut dgain = vec![0.0; hid];
        let mut dshift = vec![0.0; hid];
        let mut da1 = vec![0.0; dm.len()];
        for (i, &g) in dm.iter().enumerate() {
            let k = (i / plane) % hid;
            dgain[k] += g * fwd.a1[i];
            dshift[k] += g;
            da1[i] = g * fwd.gain[k];
        }
        let latent = conv3x3_input_grad(&da1, n, hid, height, width, &p.w1, c);

        let mut dpooled = vec![0.0; d];
        for k in 0..hid {
            for (j, dp) in dpooled.iter_mut().enumerate() {
                *dp += p.mod_scale[k * d + j] * dgain[k] + p.mod_shift[k * d + j] * dshift[k];
            }
        }
        let mut embedding = vec![0.0; l * d];
        for tok in 0..l {
            for j in 0..d {
                embedding[tok * d + j] = p.pool[tok] * dpooled[j];
            }
        }

        let mut params = DenoiserParams::zeros(&self.config);
        if want_params {
            params.w2 = conv3x3_weight_grad(&da2, &fwd.hidden, n, hid, height, width, c);
            params.b2 = channel_sums(&da2, n, c, plane);
            params.w1 = conv3x3_weight_grad(&da1, z.data(), n, c, height, width, hid);
            params.b1 = channel_sums(&da1, n, hid, plane);
            for k in 0..hid {
                for j in 0..d {
                    params.mod_scale[k * d + j] = dgain[k] * fwd.pooled[j];
                    params.mod_shift[k * d + j] = dshift[k] * fwd.pooled[j];
                }
                params.time_scale[k] = dgain[k] * fwd.time_feature;
                params.time_shift[k] = dshift[k] * fwd.time_feature;
            }
            for tok in 0..l {
                params.pool[tok] = (0..d).map(|j| dpooled[j] * emb.get(tok, j)).sum();
            }
        }
        Backward {
            latent,
            embedding,
            params,
        }
    }

    /// Gradient of `⟨cotangent, predict(z, emb, t)⟩` with respect to every
    /// parameter.
    pub fn vjp_params(
        &self,
        z: &Tensor4,
        emb: &Embedding,
        t: usize,
        cotangent: &Tensor4,
    ) -> Result<DenoiserParams> {
        self.check(z, emb)?;
        z.ensure_same_shape(cotangent)?;
        let fwd = self.forward(z, emb, t);
        Ok(self.backward(z, emb, &fwd, cotangent, true).params)
    }

    /// Denoising score matching on procedurally generated blob latents.
    ///
    /// Each step draws a fresh blob latent `x0`, a timestep and Gaussian
    /// noise, and takes one SGD step on `‖ε_θ(√α x0 + √(1-α) ε) - ε‖²`.
    /// Returns the per-step losses.
    pub fn train_dsm(
        &mut self,
        schedule: &Schedule,
        latent_hw: (usize, usize),
        embeddings: &[Embedding],
        steps: usize,
        learning_rate: f64,
        seed: u64,
    ) -> Result<Vec<f64>> {
        if embeddings.is_empty() {
            return Err(Error::invalid("training needs at least one embedding"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = [1, self.config.latent_channels, latent_hw.0, latent_hw.1];
        let mut losses = Vec::with_capacity(steps);
        for _ in 0..steps {
            let x0 = blob_latent(shape, &mut rng);
            let t = rng.random_range(1..=schedule.steps());
            let emb = &embeddings[rng.random_range(0..embeddings.len())];
            let noise = Tensor4::randn(shape, &mut rng);
            let a = schedule.alpha(t);
            let zt = x0.lincomb(a.sqrt(), &noise, (1.0 - a).sqrt())?;
            let pred = self.predict(&zt, emb, t)?;
            let resid = pred.sub(&noise)?;
            let n = resid.len() as f64;
            losses.push(resid.norm_sq() / n);
            let grad = self.vjp_params(&zt, emb, t, &resid.scale(2.0 / n))?;
            let norm = grad.norm();
            let clip = if norm > 1.0 { 1.0 / norm } else { 1.0 };
            self.params.axpy(-learning_rate * clip, &grad);
        }
        Ok(losses)
    }

    /// One checkpoint file per parameter plus `manifest.json`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut names = Vec::new();
        for (name, values) in self.params.fields() {
            let t = Tensor4::new([1, 1, 1, values.len()], values.clone())?;
            write_tensor(dir.join(format!("{name}.tensor")), &t)?;
            names.push(name.to_string());
        }
        let manifest = Manifest {
            config: self.config,
            parameters: names,
        };
        fs::write(
            dir.join("manifest.json"),
            serde_json::to_vec_pretty(&manifest)?,
        )?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
        let mut params = DenoiserParams::zeros(&manifest.config);
        for (name, slot) in params.fields_mut() {
            let t = read_tensor(dir.join(format!("{name}.tensor")))?;
            *slot = t.into_data();
        }
        Self::from_params(manifest.config, params)
    }
}

impl NoisePredictor for ConvDenoiser {
    fn predict(&self, z: &Tensor4, emb: &Embedding, t: usize) -> Result<Tensor4> {
        self.check(z, emb)?;
        let fwd = self.forward(z, emb, t);
        let data = fwd.a2.iter().map(|a| OUTPUT_BOUND * a.tanh()).collect();
        Tensor4::new(z.shape(), data)
    }

    fn vjp_latent(
        &self,
        z: &Tensor4,
        emb: &Embedding,
        t: usize,
        cotangent: &Tensor4,
    ) -> Result<Tensor4> {
        self.check(z, emb)?;
        z.ensure_same_shape(cotangent)?;
        let fwd = self.forward(z, emb, t);
        let b = self.backward(z, emb, &fwd, cotangent, false);
        Tensor4::new(z.shape(), b.latent)
    }

    fn vjp_embedding(
        &self,
        z: &Tensor4,
        emb: &Embedding,
        t: usize,
        cotangent: &Tensor4,
    ) -> Result<Embedding> {
        self.check(z, emb)?;
        z.ensure_same_shape(cotangent)?;
        let fwd = self.forward(z, emb, t);
        let b = self.backward(z, emb, &fwd, cotangent, false);
        Embedding::new(emb.tokens(), emb.dim(), b.embedding)
    }
}

/// A few Gaussian blobs per channel, the training distribution for
/// [`ConvDenoiser::train_dsm`].
pub fn blob_latent<R: Rng + ?Sized>(shape: [usize; 4], rng: &mut R) -> Tensor4 {
    let [_, c, h, w] = shape;
    let mut out = Tensor4::zeros(shape);
    let blobs = rng.random_range(1..=3);
    for _ in 0..blobs {
        let cy = rng.random_range(0.0..h as f64);
        let cx = rng.random_range(0.0..w as f64);
        let radius = rng.random_range(1.0..(h.min(w) as f64 / 3.0).max(1.5));
        let amp: Vec<f64> = (0..c).map(|_| rng.random_range(-1.5..1.5)).collect();
        let data = out.data_mut();
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let r2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    data[(ch * h + y) * w + x] += amp[ch] * (-r2 / (2.0 * radius * radius)).exp();
                }
            }
        }
    }
    out
}

fn channel_sums(v: &[f64], n: usize, c: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; c];
    for b in 0..n {
        for (k, o) in out.iter_mut().enumerate() {
            let base = (b * c + k) * plane;
            *o += v[base..base + plane].iter().sum::<f64>();
        }
    }
    out
}

/// Same-padded 3×3 convolution (cross-correlation), stride 1.
#[allow(clippy::too_many_arguments)]
fn conv3x3(
    input: &[f64],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    cout: usize,
    bias: &[f64],
) -> Vec<f64> {
    let plane = h * w;
    let mut out = vec![0.0; n * cout * plane];
    for b in 0..n {
        for o in 0..cout {
            let dst = &mut out[(b * cout + o) * plane..(b * cout + o + 1) * plane];
            dst.iter_mut().for_each(|v| *v = bias[o]);
            for i in 0..cin {
                let src = &input[(b * cin + i) * plane..(b * cin + i + 1) * plane];
                let k = &weight[(o * cin + i) * 9..(o * cin + i + 1) * 9];
                for y in 0..h {
                    for ky in 0..3 {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let srow = &src[sy as usize * w..(sy as usize + 1) * w];
                        let drow = &mut dst[y * w..(y + 1) * w];
                        for kx in 0..3 {
                            let kv = k[ky * 3 + kx];
                            for (x, d) in drow.iter_mut().enumerate() {
                                let sx = x as isize + kx as isize - 1;
                                if sx >= 0 && sx < w as isize {
                                    *d += kv * srow[sx as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`conv3x3`] with respect to its input.
fn conv3x3_input_grad(
    dout: &[f64],
    n: usize,
    cout: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    cin: usize,
) -> Vec<f64> {
    let plane = h * w;
    let mut din = vec![0.0; n * cin * plane];
    for b in 0..n {
        for o in 0..cout {
            let src = &dout[(b * cout + o) * plane..(b * cout + o + 1) * plane];
            for i in 0..cin {
                let k = &weight[(o * cin + i) * 9..(o * cin + i + 1) * 9];
                let dst = &mut din[(b * cin + i) * plane..(b * cin + i + 1) * plane];
                for y in 0..h {
                    for ky in 0..3 {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let sy = sy as usize;
                        for kx in 0..3 {
                            let kv = k[ky * 3 + kx];
                            for x in 0..w {
                                let sx = x as isize + kx as isize - 1;
                                if sx >= 0 && sx < w as isize {
                                    dst[sy * w + sx as usize] += kv * src[y * w + x];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    din
}

/// Gradient of [`conv3x3`] with respect to its weights.
fn conv3x3_weight_grad(
    dout: &[f64],
    input: &[f64],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
) -> Vec<f64> {
    let plane = h * w;
    let mut dw = vec![0.0; cout * cin * 9];
    for b in 0..n {
        for o in 0..cout {
            let g = &dout[(b * cout + o) * plane..(b * cout + o + 1) * plane];
            for i in 0..cin {
                let src = &input[(b * cin + i) * plane..(b * cin + i + 1) * plane];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let mut acc = 0.0;
                        for y in 0..h {
                            let sy = y as isize + ky as isize - 1;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            for x in 0..w {
                                let sx = x as isize + kx as isize - 1;
                                if sx >= 0 && sx < w as isize {
                                    acc += g[y * w + x] * src[sy as usize * w + sx as usize];
                                }
                            }
                        }
                        dw[((o * cin + i) * 3 + ky) * 3 + kx] += acc;
                    }
                }
            }
        }
    }
    dw
}
