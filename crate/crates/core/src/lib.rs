//! Adversarial logo generation by steering a DDIM denoising process.
//!
//! A seeded latent is moved to the frequency domain; sign-gradient steps on
//! its real and imaginary spectra (bounded in L∞) and plain gradient steps
//! on the last-timestep unconditional embedding are driven by the detection
//! loss of a surrogate detector evaluated on images carrying the decoded
//! patch. Gradients through the sampler use the cached-noise approximation:
//! only the first denoising step is differentiated through the network.

pub mod attack;
pub mod conditioning;
pub mod denoiser;
pub mod detector;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod image;
pub mod patching;
pub mod run;
pub mod tensor;

pub use attack::{run_attack, AttackConfig, AttackState, GradFormula};
pub use conditioning::{encode_prompt, init_unconditional, Embedding};
pub use denoiser::{ConvDenoiser, DenoiserConfig, NoisePredictor};
pub use detector::{Detection, DetectionBox, Detector, GridDetector};
pub use diffusion::{GuidanceConfig, LatentDecoder, NoiseCache, Schedule};
pub use error::{Error, Result};
pub use image::{Image, PatchImage};
pub use patching::{apply_patch, generate_scenes, Scene};
pub use tensor::{ComplexTensor4, Tensor4};
