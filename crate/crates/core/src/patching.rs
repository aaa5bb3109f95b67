//! Synthetic scenes, batching and the patch applier.
//!
//! Scenes are smooth textured backgrounds with one to three copies of the
//! target figure. The applier resizes the patch with a separable triangle
//! (bilinear) filter, widened when shrinking so every source pixel
//! contributes, and pastes it centred in each box.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detector::{
    read_detections_jsonl, render_figure, target_figure, DetectionBox, Detector, TARGET_CLASS,
    TEMPLATE_SIZES,
};
use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};

pub const DEFAULT_TRAIN_SCALE: f64 = 0.15;
pub const DEFAULT_TEST_SCALE: f64 = 0.2;
pub const DEFAULT_TRAIN_SCENES: usize = 614;
pub const DEFAULT_TEST_SCENES: usize = 288;
pub const MIN_SCENE_DIM: usize = 64;
/// Targets sit on this pixel lattice so every zoo stride can hit them.
const PLACEMENT_GRID: usize = 4;
const MAX_REROLLS: u64 = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: Image,
    /// Planted target extents `[x1, y1, x2, y2]`, for diagnostics.
    pub planted_targets: Vec<[f64; 4]>,
}

fn scene_rng(seed: u64, index: usize, attempt: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(index as u64).to_le_bytes());
    key[16..24].copy_from_slice(&attempt.to_le_bytes());
    key[24..].copy_from_slice(b"scenes\0\0");
    ChaCha8Rng::from_seed(key)
}

fn background(rng: &mut ChaCha8Rng, height: usize, width: usize) -> Image {
    let mut img = Image::zeros(height, width);
    for c in 0..CHANNELS {
        let base = rng.random_range(0.3..0.7);
        let waves: Vec<[f64; 4]> = (0..3)
            .map(|_| {
                [
                    rng.random_range(0.02..0.06),
                    rng.random_range(-0.08..0.08),
                    rng.random_range(-0.08..0.08),
                    rng.random_range(0.0..std::f64::consts::TAU),
                ]
            })
            .collect();
        for y in 0..height {
            for x in 0..width {
                let v = waves
                    .iter()
                    .map(|[a, fx, fy, ph]| a * (fx * x as f64 + fy * y as f64 + ph).sin())
                    .sum::<f64>();
                let noise = rng.random_range(-0.02..0.02);
                img.set(c, y, x, (base + v + noise).clamp(0.0, 1.0));
            }
        }
    }
    img
}

fn plant(img: &mut Image, size: usize, y0: usize, x0: usize) {
    let fig = render_figure(size, [0.0; 3]);
    for y in 0..size {
        for x in 0..size {
            let (u, v) = (
                (x as f64 + 0.5) / size as f64,
                (y as f64 + 0.5) / size as f64,
            );
            if target_figure(u, v).is_some() {
                for c in 0..CHANNELS {
                    img.set(c, y0 + y, x0 + x, fig.get(c, y, x));
                }
            }
        }
    }
}

fn overlaps(a: [f64; 4], b: [f64; 4], margin: f64) -> bool {
    a[0] < b[2] + margin && b[0] < a[2] + margin && a[1] < b[3] + margin && b[1] < a[3] + margin
}

fn roll_scene(rng: &mut ChaCha8Rng, height: usize, width: usize) -> Scene {
    let mut image = background(rng, height, width);
    let wanted = rng.random_range(1..=3);
    let mut planted: Vec<[f64; 4]> = Vec::new();
    for _ in 0..50 {
        if planted.len() == wanted {
            break;
        }
        let size = TEMPLATE_SIZES[rng.random_range(0..TEMPLATE_SIZES.len())];
        if size > height || size > width {
            continue;
        }
        let y = rng.random_range(0..=(height - size) / PLACEMENT_GRID) * PLACEMENT_GRID;
        let x = rng.random_range(0..=(width - size) / PLACEMENT_GRID) * PLACEMENT_GRID;
        let ext = [x as f64, y as f64, (x + size) as f64, (y + size) as f64];
        if planted
            .iter()
            .any(|&p| overlaps(p, ext, PLACEMENT_GRID as f64))
        {
            continue;
        }
        plant(&mut image, size, y, x);
        planted.push(ext);
    }
    Scene {
        image,
        planted_targets: planted,
    }
}

/// Generates `n` scenes; each is re-rolled until every detector in `zoo`
/// reports at least one box on it.
pub fn generate_scenes_for<D: Detector>(
    seed: u64,
    n: usize,
    height: usize,
    width: usize,
    zoo: &[D],
) -> Result<Vec<Scene>> {
    use rayon::prelude::*;
    if n == 0 {
        return Err(Error::invalid("scene count must be at least 1"));
    }
    let largest = *TEMPLATE_SIZES.iter().max().expect("non-empty sizes");
    if height < MIN_SCENE_DIM.max(largest) || width < MIN_SCENE_DIM.max(largest) {
        return Err(Error::invalid(format!(
            "scene {height}x{width} too small; need at least {}",
            MIN_SCENE_DIM.max(largest)
        )));
    }
    (0..n)
        .into_par_iter()
        .map(|index| {
            for attempt in 0..MAX_REROLLS {
                let scene = roll_scene(&mut scene_rng(seed, index, attempt), height, width);
                let mut ok = true;
                for d in zoo {
                    if d.detect(&scene.image)?.is_empty() {
                        ok = false;
                        break;
                    }
                }
                if ok {
                    return Ok(scene);
                }
            }
            Err(Error::invalid(format!(
                "scene {index}: no detectable layout after {MAX_REROLLS} attempts"
            )))
        })
        .collect()
}

/// [`generate_scenes_for`] against the default zoo (seed 0).
pub fn generate_scenes(seed: u64, n: usize, height: usize, width: usize) -> Result<Vec<Scene>> {
    generate_scenes_for(seed, n, height, width, &crate::detector::default_zoo(0))
}

/// Contiguous chunks of at most `bs`, order preserved.
pub fn batch<T>(items: &[T], bs: usize) -> Result<Vec<&[T]>> {
    if bs == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    Ok(items.chunks(bs).collect())
}

/// Side of the pasted square for a box.
pub fn patch_side(bbox: &DetectionBox, scale: f64) -> usize {
    (scale * (bbox.width() * bbox.height()).sqrt()).round() as usize
}

/// `out × src` resampling matrix of the triangle filter, rows summing to 1.
pub fn resize_weights(src: usize, out: usize) -> Vec<f64> {
    let ratio = src as f64 / out as f64;
    let support = ratio.max(1.0);
    let mut w = vec![0.0; out * src];
    for o in 0..out {
        let centre = (o as f64 + 0.5) * ratio;
        let row = &mut w[o * src..(o + 1) * src];
        let lo = (centre - support).floor().max(0.0) as usize;
        let hi = ((centre + support).ceil() as usize).min(src);
        for (k, r) in row.iter_mut().enumerate().take(hi).skip(lo) {
            *r = (1.0 - ((k as f64 + 0.5 - centre) / support).abs()).max(0.0);
        }
        let total: f64 = row.iter().sum();
        row.iter_mut().for_each(|r| *r /= total);
    }
    w
}

/// Resizes every channel of `img` to `out_h × out_w`.
pub fn resize(img: &Image, out_h: usize, out_w: usize) -> Image {
    let (h, w) = img.dims();
    let (ry, rx) = (resize_weights(h, out_h), resize_weights(w, out_w));
    let mut out = Image::zeros(out_h, out_w);
    let mut tmp = vec![0.0; h * out_w];
    for c in 0..CHANNELS {
        let src = img.channel(c);
        for y in 0..h {
            for ox in 0..out_w {
                tmp[y * out_w + ox] = (0..w).map(|x| rx[ox * w + x] * src[y * w + x]).sum();
            }
        }
        let dst = out.channel_mut(c);
        for oy in 0..out_h {
            for ox in 0..out_w {
                dst[oy * out_w + ox] = (0..h).map(|y| ry[oy * h + y] * tmp[y * out_w + ox]).sum();
            }
        }
    }
    out
}

/// Adjoint of [`resize`]: maps an `out`-shaped cotangent to the source shape.
pub fn resize_adjoint(cot: &Image, src_h: usize, src_w: usize) -> Image {
    let (out_h, out_w) = cot.dims();
    let (ry, rx) = (resize_weights(src_h, out_h), resize_weights(src_w, out_w));
    let mut out = Image::zeros(src_h, src_w);
    let mut tmp = vec![0.0; src_h * out_w];
    for c in 0..CHANNELS {
        let g = cot.channel(c);
        for y in 0..src_h {
            for ox in 0..out_w {
                tmp[y * out_w + ox] = (0..out_h)
                    .map(|oy| ry[oy * src_h + y] * g[oy * out_w + ox])
                    .sum();
            }
        }
        let dst = out.channel_mut(c);
        for y in 0..src_h {
            for x in 0..src_w {
                dst[y * src_w + x] = (0..out_w)
                    .map(|ox| rx[ox * src_w + x] * tmp[y * out_w + ox])
                    .sum();
            }
        }
    }
    out
}

/// Pixel footprint of one pasted patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Placement {
    side: usize,
    /// Top-left corner, possibly outside the image.
    y0: isize,
    x0: isize,
}

fn placements(boxes: &[DetectionBox], scale: f64) -> Vec<Option<Placement>> {
    boxes
        .iter()
        .map(|b| {
            let side = patch_side(b, scale);
            (side > 0).then(|| Placement {
                side,
                y0: ((b.y1 + b.y2 - side as f64) / 2.0).round() as isize,
                x0: ((b.x1 + b.x2 - side as f64) / 2.0).round() as isize,
            })
        })
        .collect()
}

/// Per pixel, index of the placement that wrote it last.
fn ownership(h: usize, w: usize, places: &[Option<Placement>]) -> Vec<Option<usize>> {
    let mut owner = vec![None; h * w];
    for (i, p) in places.iter().enumerate() {
        let Some(p) = p else { continue };
        for py in 0..p.side {
            for px in 0..p.side {
                let (y, x) = (p.y0 + py as isize, p.x0 + px as isize);
                if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                    owner[y as usize * w + x as usize] = Some(i);
                }
            }
        }
    }
    owner
}

fn check_scale(scale: f64) -> Result<()> {
    if !scale.is_finite() || scale <= 0.0 {
        return Err(Error::invalid(format!(
            "patch scale must be positive, got {scale}"
        )));
    }
    Ok(())
}

/// Pastes `tau`, resized to `round(scale·√(w·h))`, centred in every box.
pub fn apply_patch(x: &Image, tau: &Image, boxes: &[DetectionBox], scale: f64) -> Result<Image> {
    check_scale(scale)?;
    let (h, w) = x.dims();
    let places = placements(boxes, scale);
    let resized: Vec<Option<Image>> = places
        .iter()
        .map(|p| p.map(|p| resize(tau, p.side, p.side)))
        .collect();
    let owner = ownership(h, w, &places);
    let mut out = x.clone();
    for (idx, o) in owner.iter().enumerate() {
        let Some(i) = *o else { continue };
        let p = places[i].expect("owner has a placement");
        let r = resized[i].as_ref().expect("owner has a patch");
        let (y, xx) = (idx / w, idx % w);
        let (py, px) = ((y as isize - p.y0) as usize, (xx as isize - p.x0) as usize);
        for c in 0..CHANNELS {
            out.set(c, y, xx, r.get(c, py, px).clamp(0.0, 1.0));
        }
    }
    Ok(out)
}

/// Gradient of `⟨cotangent, apply_patch(x, τ, boxes, scale)⟩` with respect to `τ`.
pub fn vjp_apply_patch(
    x: &Image,
    tau: &Image,
    boxes: &[DetectionBox],
    scale: f64,
    cotangent: &Image,
) -> Result<Image> {
    check_scale(scale)?;
    x.ensure_same_dims(cotangent)?;
    let (h, w) = x.dims();
    let places = placements(boxes, scale);
    let owner = ownership(h, w, &places);
    let mut grad = Image::zeros(tau.height(), tau.width());
    for (i, p) in places.iter().enumerate() {
        let Some(p) = *p else { continue };
        let resized = resize(tau, p.side, p.side);
        let mut local = Image::zeros(p.side, p.side);
        let mut touched = false;
        for py in 0..p.side {
            for px in 0..p.side {
                let (y, xx) = (p.y0 + py as isize, p.x0 + px as isize);
                if y < 0 || xx < 0 || y as usize >= h || xx as usize >= w {
                    continue;
                }
                let idx = y as usize * w + xx as usize;
                if owner[idx] != Some(i) {
                    continue;
                }
                for c in 0..CHANNELS {
                    let v = resized.get(c, py, px);
                    if (0.0..=1.0).contains(&v) {
                        local.set(c, py, px, cotangent.get(c, y as usize, xx as usize));
                        touched = true;
                    }
                }
            }
        }
        if touched {
            grad.add_assign(&resize_adjoint(&local, tau.height(), tau.width()))?;
        }
    }
    Ok(grad)
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    file: String,
    height: usize,
    width: usize,
    planted_targets: Vec<[f64; 4]>,
}

/// Writes `scene_NNNN.ppm` files and a `manifest.json` describing them.
pub fn write_scenes(dir: impl AsRef<Path>, scenes: &[Scene]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut manifest = Vec::with_capacity(scenes.len());
    for (i, s) in scenes.iter().enumerate() {
        let file = format!("scene_{i:04}.ppm");
        s.image.write_ppm(dir.join(&file))?;
        manifest.push(ManifestEntry {
            file,
            height: s.image.height(),
            width: s.image.width(),
            planted_targets: s.planted_targets.clone(),
        });
    }
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_vec_pretty(&manifest)?,
    )?;
    Ok(())
}

/// An external image with its clean boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub image: Image,
    pub boxes: Vec<DetectionBox>,
}

/// Loads every `.ppm`/`.png` in `dir` (sorted by name) and the boxes in
/// `annotations.jsonl`, whose `image` field indexes that sorted list.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<LabeledImage>> {
    let dir = dir.as_ref();
    let mut files: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("ppm") || e.eq_ignore_ascii_case("png"))
        })
        .collect();
    files.sort();
    let mut out: Vec<LabeledImage> = files
        .iter()
        .map(|f| {
            Ok(LabeledImage {
                image: Image::load(f)?,
                boxes: Vec::new(),
            })
        })
        .collect::<Result<_>>()?;
    let ann_path = dir.join("annotations.jsonl");
    let text = fs::read_to_string(&ann_path)?;
    for (idx, boxes) in read_detections_jsonl(&text)? {
        let entry = out.get_mut(idx).ok_or_else(|| {
            Error::format(&ann_path, format!("annotation for missing image {idx}"))
        })?;
        entry.boxes = boxes
            .into_iter()
            .filter(|b| b.class_id == TARGET_CLASS)
            .collect();
    }
    Ok(out)
}
