//! Differentiable template-matching detector and the detection loss.
//!
//! A [`GridDetector`] slides centre-weighted RGB templates of the target
//! class over the image on a fixed stride, at a few template sizes. Each
//! placement ("cell") scores `conf = logistic((corr - bias) / temperature)`.
//! Cells at or above the threshold survive, are sorted by confidence and
//! pruned by greedy NMS. Gradients treat the surviving set as fixed and
//! flow only through the logistic confidence head.

use std::cmp::Ordering;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffusion::logistic;
use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};

/// Class id of the attacked target ("person").
pub const TARGET_CLASS: usize = 0;
pub const DEFAULT_THRESHOLD: f64 = 0.6;
pub const DEFAULT_NMS_IOU: f64 = 0.5;
/// Template sizes shared by the zoo and the scene generator.
pub const TEMPLATE_SIZES: [usize; 3] = [40, 48, 56];

/// One detection: pixel box, confidence and class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub conf: f64,
    pub class_id: usize,
}

impl DetectionBox {
    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn iou(&self, other: &DetectionBox) -> f64 {
        iou(
            [self.x1, self.y1, self.x2, self.y2],
            [other.x1, other.y1, other.x2, other.y2],
        )
    }

    pub fn to_array(&self) -> [f64; 6] {
        [
            self.x1,
            self.y1,
            self.x2,
            self.y2,
            self.conf,
            self.class_id as f64,
        ]
    }

    pub fn from_array(a: [f64; 6]) -> Result<Self> {
        let b = Self {
            x1: a[0],
            y1: a[1],
            x2: a[2],
            y2: a[3],
            conf: a[4],
            class_id: a[5] as usize,
        };
        if !(b.x1 < b.x2 && b.y1 < b.y2) || !(0.0..=1.0).contains(&b.conf) || a[5] < 0.0 {
            return Err(Error::invalid(format!("malformed detection box {a:?}")));
        }
        Ok(b)
    }
}

/// Intersection over union of two `[x1, y1, x2, y2]` boxes.
pub fn iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Grid position of a detection: template index and top-left pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Cell {
    pub scale: usize,
    pub y: usize,
    pub x: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: DetectionBox,
    pub cell: Cell,
}

/// Which cells feed the loss gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Selection {
    /// Threshold then NMS, exactly what [`Detector::detect`] reports.
    #[default]
    Nms,
    /// Every cell over threshold, before NMS.
    Soft,
}

/// Object detector interface used by the attack and the evaluator.
pub trait Detector: Send + Sync {
    fn id(&self) -> &str;

    fn detect_cells(&self, image: &Image, selection: Selection) -> Result<Vec<Detection>>;

    /// Confidence of one cell, whether or not it clears the threshold.
    fn confidence_at(&self, image: &Image, cell: Cell) -> Result<f64>;

    /// `Σ_j weights[j] · ∂conf(cells[j]) / ∂image`.
    fn vjp_confidences(&self, image: &Image, cells: &[Cell], weights: &[f64]) -> Result<Image>;

    fn detect(&self, image: &Image) -> Result<Vec<DetectionBox>> {
        Ok(self
            .detect_cells(image, Selection::Nms)?
            .into_iter()
            .map(|d| d.bbox)
            .collect())
    }
}

/// Canonical target figure on the unit square: RGB colour inside the
/// silhouette, `None` outside (background shows through).
pub fn target_figure(u: f64, v: f64) -> Option<[f64; 3]> {
    let head = (u - 0.5).powi(2) + (v - 0.15).powi(2) <= 0.12 * 0.12;
    let body = (0.22..=0.78).contains(&u) && (0.28..=0.97).contains(&v);
    if !(head || body) {
        return None;
    }
    let tau = std::f64::consts::TAU;
    let p = (tau * 1.5 * (u - 0.5)).cos() * (tau * 1.5 * (v - 0.55)).cos();
    let q = (tau * 2.0 * (v - 0.55)).cos();
    Some([0.5 + 0.42 * p, 0.5 - 0.38 * p, 0.45 + 0.2 * q - 0.15 * p])
}

/// Renders the canonical figure at `size` pixels over a flat background.
pub fn render_figure(size: usize, background: [f64; 3]) -> Image {
    let mut img = Image::zeros(size, size);
    for y in 0..size {
        for x in 0..size {
            let (u, v) = (
                (x as f64 + 0.5) / size as f64,
                (y as f64 + 0.5) / size as f64,
            );
            let rgb = target_figure(u, v).unwrap_or(background);
            for (c, &v) in rgb.iter().enumerate() {
                img.set(c, y, x, v);
            }
        }
    }
    img
}

/// Construction parameters of one [`GridDetector`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorSpec {
    pub id: String,
    pub family: String,
    pub sizes: Vec<usize>,
    pub stride: usize,
    /// Gaussian window width as a fraction of the template size.
    pub window: f64,
    pub temperature: f64,
    pub bias: f64,
    pub threshold: f64,
    pub nms_iou: f64,
    /// Relative magnitude of the seeded kernel perturbation.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for DetectorSpec {
    fn default() -> Self {
        Self {
            id: "det0".into(),
            family: "grid-stride4".into(),
            sizes: TEMPLATE_SIZES.to_vec(),
            stride: 4,
            window: 0.2,
            temperature: 0.1,
            bias: 0.5,
            threshold: DEFAULT_THRESHOLD,
            nms_iou: DEFAULT_NMS_IOU,
            jitter: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Template {
    size: usize,
    /// Side of the kernel support, centred in the `size × size` box.
    support: usize,
    offset: usize,
    kernel: Vec<f64>,
}

impl Template {
    fn build(size: usize, spec: &DetectorSpec, rng: &mut ChaCha8Rng) -> Self {
        let sigma = spec.window * size as f64;
        let support = ((6.0 * sigma).round() as usize).clamp(3, size);
        let offset = (size - support) / 2;
        let figure = render_figure(size, [0.5; 3]);
        let mut kernel = vec![0.0; CHANNELS * support * support];
        for c in 0..CHANNELS {
            for i in 0..support {
                for j in 0..support {
                    let (y, x) = (offset + i, offset + j);
                    let dy = (y as f64 + 0.5) - size as f64 / 2.0;
                    let dx = (x as f64 + 0.5) - size as f64 / 2.0;
                    let w = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                    let noise: f64 = rng.sample(StandardNormal);
                    let centred = figure.get(c, y, x) - 0.5;
                    kernel[(c * support + i) * support + j] =
                        w * (centred + spec.jitter * 0.3 * noise);
                }
            }
        }
        // Zero mean per channel: flat images score exactly zero.
        let plane = support * support;
        for c in 0..CHANNELS {
            let ch = &mut kernel[c * plane..(c + 1) * plane];
            let mean = ch.iter().sum::<f64>() / plane as f64;
            ch.iter_mut().for_each(|k| *k -= mean);
        }
        // Unit response on the canonical figure.
        let mut response = 0.0;
        for c in 0..CHANNELS {
            for i in 0..support {
                for j in 0..support {
                    response += kernel[(c * support + i) * support + j]
                        * figure.get(c, offset + i, offset + j);
                }
            }
        }
        kernel.iter_mut().for_each(|k| *k /= response);
        Self {
            size,
            support,
            offset,
            kernel,
        }
    }

    fn correlate(&self, image: &Image, y0: usize, x0: usize) -> f64 {
        let (s, w) = (self.support, image.width());
        let mut acc = 0.0;
        for c in 0..CHANNELS {
            let plane = image.channel(c);
            let k = &self.kernel[c * s * s..(c + 1) * s * s];
            for i in 0..s {
                let row = (y0 + self.offset + i) * w + x0 + self.offset;
                let src = &plane[row..row + s];
                let kr = &k[i * s..(i + 1) * s];
                acc += kr.iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        acc
    }

    fn accumulate(&self, grad: &mut Image, y0: usize, x0: usize, scale: f64) {
        let (s, w) = (self.support, grad.width());
        for c in 0..CHANNELS {
            let k = &self.kernel[c * s * s..(c + 1) * s * s];
            let plane = grad.channel_mut(c);
            for i in 0..s {
                let row = (y0 + self.offset + i) * w + x0 + self.offset;
                plane[row..row + s]
                    .iter_mut()
                    .zip(&k[i * s..(i + 1) * s])
                    .for_each(|(g, kv)| *g += scale * kv);
            }
        }
    }
}

/// Centre-weighted template-matching detector.
#[derive(Debug, Clone, PartialEq)]
pub struct GridDetector {
    spec: DetectorSpec,
    templates: Vec<Template>,
}

impl GridDetector {
    pub fn new(spec: DetectorSpec) -> Result<Self> {
        if spec.sizes.is_empty() || spec.sizes.contains(&0) {
            return Err(Error::invalid("detector needs positive template sizes"));
        }
        if spec.stride == 0 || spec.temperature <= 0.0 {
            return Err(Error::invalid(
                "detector stride and temperature must be positive",
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x6465_7465_6374_6f72);
        let templates = spec
            .sizes
            .iter()
            .map(|&s| Template::build(s, &spec, &mut rng))
            .collect();
        Ok(Self { spec, templates })
    }

    pub fn spec(&self) -> &DetectorSpec {
        &self.spec
    }

    pub fn threshold(&self) -> f64 {
        self.spec.threshold
    }

    /// Largest template side.
    pub fn max_size(&self) -> usize {
        self.templates.iter().map(|t| t.size).max().unwrap_or(0)
    }

    fn conf_of(&self, corr: f64) -> f64 {
        logistic((corr - self.spec.bias) / self.spec.temperature)
    }

    fn check_image(&self, image: &Image) -> Result<()> {
        if image.height() < self.max_size() || image.width() < self.max_size() {
            return Err(Error::invalid(format!(
                "image {:?} smaller than largest template {}",
                image.dims(),
                self.max_size()
            )));
        }
        Ok(())
    }

    fn check_cell(&self, image: &Image, cell: Cell) -> Result<&Template> {
        let t = self
            .templates
            .get(cell.scale)
            .ok_or_else(|| Error::invalid(format!("no template {}", cell.scale)))?;
        if cell.y + t.size > image.height() || cell.x + t.size > image.width() {
            return Err(Error::invalid(format!("cell {cell:?} outside image")));
        }
        Ok(t)
    }

    /// Confidence map of every cell, in scale/row/column order.
    pub fn score_cells(&self, image: &Image) -> Result<Vec<(Cell, f64)>> {
        self.check_image(image)?;
        let stride = self.spec.stride;
        let mut out = Vec::new();
        for (scale, t) in self.templates.iter().enumerate() {
            for y in (0..=image.height() - t.size).step_by(stride) {
                for x in (0..=image.width() - t.size).step_by(stride) {
                    let conf = self.conf_of(t.correlate(image, y, x));
                    out.push((Cell { scale, y, x }, conf));
                }
            }
        }
        Ok(out)
    }

    fn to_detection(&self, cell: Cell, conf: f64) -> Detection {
        let s = self.templates[cell.scale].size as f64;
        Detection {
            bbox: DetectionBox {
                x1: cell.x as f64,
                y1: cell.y as f64,
                x2: cell.x as f64 + s,
                y2: cell.y as f64 + s,
                conf,
                class_id: TARGET_CLASS,
            },
            cell,
        }
    }
}

impl Detector for GridDetector {
    fn id(&self) -> &str {
        &self.spec.id
    }

    fn detect_cells(&self, image: &Image, selection: Selection) -> Result<Vec<Detection>> {
        let mut cands: Vec<Detection> = self
            .score_cells(image)?
            .into_iter()
            .filter(|&(_, conf)| conf >= self.spec.threshold)
            .map(|(cell, conf)| self.to_detection(cell, conf))
            .collect();
        cands.sort_by(|a, b| {
            b.bbox
                .conf
                .partial_cmp(&a.bbox.conf)
                .unwrap_or(Ordering::Equal)
                .then(a.cell.cmp(&b.cell))
        });
        if selection == Selection::Soft {
            return Ok(cands);
        }
        let mut kept: Vec<Detection> = Vec::new();
        for d in cands {
            if kept.iter().all(|k| k.bbox.iou(&d.bbox) < self.spec.nms_iou) {
                kept.push(d);
            }
        }
        Ok(kept)
    }

    fn confidence_at(&self, image: &Image, cell: Cell) -> Result<f64> {
        let t = self.check_cell(image, cell)?;
        Ok(self.conf_of(t.correlate(image, cell.y, cell.x)))
    }

    fn vjp_confidences(&self, image: &Image, cells: &[Cell], weights: &[f64]) -> Result<Image> {
        if cells.len() != weights.len() {
            return Err(Error::shape(cells.len(), weights.len()));
        }
        let mut grad = Image::zeros(image.height(), image.width());
        for (&cell, &w) in cells.iter().zip(weights) {
            let t = self.check_cell(image, cell)?;
            let conf = self.conf_of(t.correlate(image, cell.y, cell.x));
            let dconf = conf * (1.0 - conf) / self.spec.temperature;
            t.accumulate(&mut grad, cell.y, cell.x, w * dconf);
        }
        Ok(grad)
    }
}

/// The seven-member detector zoo. Members differ in window width, stride,
/// temperature, bias and a seeded kernel perturbation; `det0` is the
/// unperturbed default.
pub fn zoo_specs(seed: u64) -> Vec<DetectorSpec> {
    const STRIDES: [usize; 7] = [4, 2, 4, 4, 2, 4, 4];
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7a6f_6f00);
    (0..7)
        .map(|i| {
            if i == 0 {
                return DetectorSpec {
                    seed,
                    ..DetectorSpec::default()
                };
            }
            DetectorSpec {
                id: format!("det{i}"),
                family: format!("grid-stride{}", STRIDES[i]),
                stride: STRIDES[i],
                window: rng.random_range(0.17..0.24),
                temperature: rng.random_range(0.08..0.12),
                bias: rng.random_range(0.46..0.54),
                jitter: rng.random_range(0.1..0.25),
                seed: seed.wrapping_mul(31).wrapping_add(i as u64),
                ..DetectorSpec::default()
            }
        })
        .collect()
}

pub fn default_zoo(seed: u64) -> Vec<GridDetector> {
    zoo_specs(seed)
        .into_iter()
        .map(|s| GridDetector::new(s).expect("zoo specs are valid"))
        .collect()
}

/// `Σ_i Σ_j conf²_{ij} / Σ_i M_i`, zero when nothing is detected.
pub fn detection_loss(detections_per_image: &[Vec<DetectionBox>]) -> f64 {
    let count: usize = detections_per_image.iter().map(Vec::len).sum();
    if count == 0 {
        return 0.0;
    }
    let sum: f64 = detections_per_image
        .iter()
        .flatten()
        .map(|b| b.conf * b.conf)
        .sum();
    sum / count as f64
}

/// Keeps only boxes of `class_id` unless `class_id` is `None`.
pub fn filter_class(dets: Vec<Detection>, class_id: Option<usize>) -> Vec<Detection> {
    match class_id {
        Some(c) => dets.into_iter().filter(|d| d.bbox.class_id == c).collect(),
        None => dets,
    }
}

/// Batch detection loss and its gradient with respect to each image, with
/// the surviving cells held fixed.
pub fn loss_and_image_grads<D: Detector + ?Sized>(
    detector: &D,
    images: &[Image],
    selection: Selection,
    class_id: Option<usize>,
) -> Result<(f64, Vec<Image>, Vec<Vec<Detection>>)> {
    let dets: Vec<Vec<Detection>> = images
        .iter()
        .map(|img| {
            detector
                .detect_cells(img, selection)
                .map(|d| filter_class(d, class_id))
        })
        .collect::<Result<_>>()?;
    let count: usize = dets.iter().map(Vec::len).sum();
    if count == 0 {
        let grads = images
            .iter()
            .map(|i| Image::zeros(i.height(), i.width()))
            .collect();
        return Ok((0.0, grads, dets));
    }
    let loss = dets
        .iter()
        .flatten()
        .map(|d| d.bbox.conf * d.bbox.conf)
        .sum::<f64>()
        / count as f64;
    let grads = images
        .iter()
        .zip(&dets)
        .map(|(img, d)| {
            let cells: Vec<Cell> = d.iter().map(|x| x.cell).collect();
            let weights: Vec<f64> = d.iter().map(|x| 2.0 * x.bbox.conf / count as f64).collect();
            detector.vjp_confidences(img, &cells, &weights)
        })
        .collect::<Result<_>>()?;
    Ok((loss, grads, dets))
}

/// Loss of one image through the confidence head, with box membership
/// frozen; the gradient of [`loss_and_image_grads`] differentiates this.
pub fn vjp_loss_wrt_image<D: Detector + ?Sized>(
    detector: &D,
    image: &Image,
    soft: bool,
) -> Result<Image> {
    let selection = if soft {
        Selection::Soft
    } else {
        Selection::Nms
    };
    let (_, mut grads, _) = loss_and_image_grads(
        detector,
        std::slice::from_ref(image),
        selection,
        Some(TARGET_CLASS),
    )?;
    Ok(grads.remove(0))
}

/// Frozen-selection loss: confidences re-evaluated at fixed cells.
pub fn frozen_loss<D: Detector + ?Sized>(
    detector: &D,
    images: &[Image],
    cells: &[Vec<Cell>],
) -> Result<f64> {
    let count: usize = cells.iter().map(Vec::len).sum();
    if count == 0 {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for (img, cs) in images.iter().zip(cells) {
        for &c in cs {
            let conf = detector.confidence_at(img, c)?;
            sum += conf * conf;
        }
    }
    Ok(sum / count as f64)
}

/// [`frozen_loss`] and its gradient with respect to each image.
pub fn frozen_loss_and_grads<D: Detector + ?Sized>(
    detector: &D,
    images: &[Image],
    cells: &[Vec<Cell>],
) -> Result<(f64, Vec<Image>)> {
    if images.len() != cells.len() {
        return Err(Error::shape(images.len(), cells.len()));
    }
    let count: usize = cells.iter().map(Vec::len).sum();
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(images.len());
    for (img, cs) in images.iter().zip(cells) {
        let confs: Vec<f64> = cs
            .iter()
            .map(|&c| detector.confidence_at(img, c))
            .collect::<Result<_>>()?;
        loss += confs.iter().map(|c| c * c).sum::<f64>();
        let weights: Vec<f64> = confs
            .iter()
            .map(|c| 2.0 * c / count.max(1) as f64)
            .collect();
        grads.push(detector.vjp_confidences(img, cs, &weights)?);
    }
    Ok((if count == 0 { 0.0 } else { loss / count as f64 }, grads))
}

#[derive(Serialize, Deserialize)]
struct DetectionLine {
    image: usize,
    boxes: Vec<[f64; 6]>,
}

/// JSON lines: `{"image": i, "boxes": [[x1,y1,x2,y2,conf,class], …]}`.
pub fn write_detections_jsonl<W: Write>(mut w: W, per_image: &[Vec<DetectionBox>]) -> Result<()> {
    for (i, boxes) in per_image.iter().enumerate() {
        let line = DetectionLine {
            image: i,
            boxes: boxes.iter().map(DetectionBox::to_array).collect(),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Parses detection JSON lines into `(image index, boxes)` pairs.
pub fn read_detections_jsonl(text: &str) -> Result<Vec<(usize, Vec<DetectionBox>)>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let line: DetectionLine = serde_json::from_str(l)?;
            let boxes = line
                .boxes
                .into_iter()
                .map(DetectionBox::from_array)
                .collect::<Result<_>>()?;
            Ok((line.image, boxes))
        })
        .collect()
}
