//! mAP against clean predictions, black-box averaging and reports.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{run_attack, AttackConfig};
use crate::detector::{iou, DetectionBox, Detector, TARGET_CLASS};
use crate::error::{Error, Result};
use crate::image::{Image, PatchImage};
use crate::patching::apply_patch;

pub const IOU_THRESHOLD: f64 = 0.5;
const RECALL_POINTS: usize = 101;

/// The prompts compared by default.
pub const DEFAULT_PROMPTS: [&str; 4] = [
    "a dog, 8k",
    "a dog, portrait",
    "a tree, 8k",
    "a tree, portrait",
];

fn corners(b: &DetectionBox) -> [f64; 4] {
    [b.x1, b.y1, b.x2, b.y2]
}

/// Single-class average precision: greedy matching in descending
/// confidence order at `iou_threshold`, 101-point interpolated precision.
/// With no ground truth the score is 1 if there are no predictions either,
/// else 0.
pub fn average_precision(
    predictions: &[Vec<DetectionBox>],
    ground_truth: &[Vec<DetectionBox>],
    iou_threshold: f64,
) -> Result<f64> {
    if predictions.len() != ground_truth.len() {
        return Err(Error::shape(ground_truth.len(), predictions.len()));
    }
    let total_gt: usize = ground_truth.iter().map(Vec::len).sum();
    let mut ranked: Vec<(usize, &DetectionBox)> = predictions
        .iter()
        .enumerate()
        .flat_map(|(i, p)| p.iter().map(move |b| (i, b)))
        .collect();
    if total_gt == 0 {
        return Ok(if ranked.is_empty() { 1.0 } else { 0.0 });
    }
    // Stable sort keeps image order, then within-image order, among ties.
    ranked.sort_by(|a, b| b.1.conf.partial_cmp(&a.1.conf).unwrap_or(Ordering::Equal));
    let mut used: Vec<Vec<bool>> = ground_truth.iter().map(|g| vec![false; g.len()]).collect();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut curve = Vec::with_capacity(ranked.len());
    for (img, pred) in ranked {
        let mut best: Option<(usize, f64)> = None;
        for (j, gt) in ground_truth[img].iter().enumerate() {
            if used[img][j] {
                continue;
            }
            let o = iou(corners(pred), corners(gt));
            if o >= iou_threshold && best.is_none_or(|(_, b)| o > b) {
                best = Some((j, o));
            }
        }
        match best {
            Some((j, _)) => {
                used[img][j] = true;
                tp += 1;
            }
            None => fp += 1,
        }
        curve.push((tp as f64 / total_gt as f64, tp as f64 / (tp + fp) as f64));
    }
    Ok(interpolated_ap(&curve))
}

/// Mean over recall levels `0, 0.01, …, 1` of the best precision at
/// recall at least that level.
pub fn interpolated_ap(curve: &[(f64, f64)]) -> f64 {
    let mut envelope = vec![0.0; curve.len()];
    let mut best: f64 = 0.0;
    for (i, &(_, p)) in curve.iter().enumerate().rev() {
        best = best.max(p);
        envelope[i] = best;
    }
    let mut sum = 0.0;
    let mut idx = 0;
    for k in 0..RECALL_POINTS {
        let level = k as f64 / (RECALL_POINTS - 1) as f64;
        while idx < curve.len() && curve[idx].0 < level - 1e-12 {
            idx += 1;
        }
        if idx < curve.len() {
            sum += envelope[idx];
        }
    }
    sum / RECALL_POINTS as f64
}

fn target_only(boxes: Vec<DetectionBox>) -> Vec<DetectionBox> {
    boxes
        .into_iter()
        .filter(|b| b.class_id == TARGET_CLASS)
        .collect()
}

/// Boxes of every image in a scene set.
pub type PerImage = Vec<Vec<DetectionBox>>;

/// Clean predictions of `detector` and its predictions on the patched
/// scenes (`tau` at `test_scale`, anchored on the clean boxes). Scale 0
/// means no patch.
pub fn clean_and_patched<D: Detector + ?Sized>(
    detector: &D,
    scenes: &[Image],
    tau: &PatchImage,
    test_scale: f64,
) -> Result<(PerImage, PerImage)> {
    if scenes.is_empty() {
        return Err(Error::invalid("evaluation needs at least one scene"));
    }
    if test_scale < 0.0 || !test_scale.is_finite() {
        return Err(Error::invalid(format!(
            "test scale must be non-negative, got {test_scale}"
        )));
    }
    let pairs: Vec<(Vec<DetectionBox>, Vec<DetectionBox>)> = scenes
        .par_iter()
        .map(|img| {
            let clean = target_only(detector.detect(img)?);
            let patched = if test_scale == 0.0 || clean.is_empty() {
                clean.clone()
            } else {
                target_only(detector.detect(&apply_patch(img, tau, &clean, test_scale)?)?)
            };
            Ok((clean, patched))
        })
        .collect::<Result<_>>()?;
    Ok(pairs.into_iter().unzip())
}

/// mAP of the patched scenes with the clean predictions as ground truth.
pub fn evaluate_map<D: Detector + ?Sized>(
    detector: &D,
    scenes: &[Image],
    tau: &PatchImage,
    test_scale: f64,
) -> Result<f64> {
    let (clean, patched) = clean_and_patched(detector, scenes, tau, test_scale)?;
    average_precision(&patched, &clean, IOU_THRESHOLD)
}

/// Mean mAP over every detector except the surrogate.
pub fn blackbox_average(maps: &[(String, f64)], surrogate_id: &str) -> Result<f64> {
    if maps.len() < 2 {
        return Err(Error::invalid(
            "black-box average needs at least two detectors",
        ));
    }
    if !maps.iter().any(|(id, _)| id == surrogate_id) {
        return Err(Error::MissingSurrogate(surrogate_id.to_string()));
    }
    let others: Vec<f64> = maps
        .iter()
        .filter(|(id, _)| id != surrogate_id)
        .map(|&(_, m)| m)
        .collect();
    Ok(others.iter().sum::<f64>() / others.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `(detector id, mAP)` in zoo order.
    pub maps: Vec<(String, f64)>,
    pub blackbox_avg: f64,
    pub surrogate_id: String,
    pub patch_id: String,
    pub config: serde_json::Value,
}

impl EvalReport {
    pub fn map_of(&self, id: &str) -> Option<f64> {
        self.maps.iter().find(|(d, _)| d == id).map(|&(_, m)| m)
    }
}

/// Evaluates `tau` on every detector of `zoo`.
pub fn evaluate_zoo<D: Detector>(
    zoo: &[D],
    surrogate_id: &str,
    scenes: &[Image],
    tau: &PatchImage,
    test_scale: f64,
    patch_id: &str,
    config: serde_json::Value,
) -> Result<EvalReport> {
    let maps = zoo
        .iter()
        .map(|d| {
            Ok((
                d.id().to_string(),
                evaluate_map(d, scenes, tau, test_scale)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let blackbox_avg = blackbox_average(&maps, surrogate_id)?;
    Ok(EvalReport {
        maps,
        blackbox_avg,
        surrogate_id: surrogate_id.to_string(),
        patch_id: patch_id.to_string(),
        config,
    })
}

#[derive(Serialize, Deserialize)]
struct Summary {
    blackbox_avg: f64,
    surrogate_id: String,
    patch_id: String,
    config: serde_json::Value,
}

/// Path of the JSON summary written next to a report CSV.
pub fn summary_path(csv: &Path) -> PathBuf {
    csv.with_extension("json")
}

/// Writes the per-detector CSV and a JSON summary next to it.
pub fn write_report(report: &EvalReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if report.maps.is_empty() {
        return Err(Error::invalid("report has no detectors"));
    }
    let mut csv = String::from("detector_id,map,role\n");
    for (id, m) in &report.maps {
        let role = if *id == report.surrogate_id {
            "surrogate"
        } else {
            "blackbox"
        };
        writeln!(csv, "{id},{m:.6},{role}").expect("writing to a string");
    }
    let summary = Summary {
        blackbox_avg: report.blackbox_avg,
        surrogate_id: report.surrogate_id.clone(),
        patch_id: report.patch_id.clone(),
        config: report.config.clone(),
    };
    let json = serde_json::to_vec_pretty(&summary)?;
    fs::write(path, csv)?;
    fs::write(summary_path(path), json)?;
    Ok(())
}

/// Reads a report written by [`write_report`].
pub fn read_report(path: impl AsRef<Path>) -> Result<EvalReport> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some("detector_id,map,role") {
        return Err(Error::format(path, "missing report header"));
    }
    let mut maps = Vec::new();
    for line in lines.filter(|l| !l.is_empty()) {
        let fields: Vec<&str> = line.split(',').collect();
        let [id, m, role] = fields[..] else {
            return Err(Error::format(path, format!("bad row {line:?}")));
        };
        if role != "surrogate" && role != "blackbox" {
            return Err(Error::format(path, format!("bad role {role:?}")));
        }
        let m: f64 = m
            .parse()
            .map_err(|_| Error::format(path, format!("bad mAP {m:?}")))?;
        maps.push((id.to_string(), m));
    }
    let summary: Summary = serde_json::from_slice(&fs::read(summary_path(path))?)?;
    Ok(EvalReport {
        maps,
        blackbox_avg: summary.blackbox_avg,
        surrogate_id: summary.surrogate_id,
        patch_id: summary.patch_id,
        config: summary.config,
    })
}

/// One row of the prompt comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRow {
    pub prompt: String,
    pub maps: Vec<(String, f64)>,
    pub blackbox_avg: f64,
}

/// Runs the attack once per config and evaluates each patch on the zoo.
pub fn compare_prompts<D: Detector>(
    configs: &[AttackConfig],
    zoo: &[D],
    surrogate_id: &str,
    train_scenes: &[Image],
    test_scenes: &[Image],
) -> Result<Vec<PromptRow>> {
    if configs.is_empty() {
        return Err(Error::invalid("need at least one prompt config"));
    }
    let surrogate = zoo
        .iter()
        .find(|d| d.id() == surrogate_id)
        .ok_or_else(|| Error::MissingSurrogate(surrogate_id.to_string()))?;
    configs
        .iter()
        .map(|cfg| {
            let out = run_attack(cfg, surrogate, train_scenes)?;
            let report = evaluate_zoo(
                zoo,
                surrogate_id,
                test_scenes,
                &out.tau,
                cfg.test_scale,
                &cfg.prompt,
                serde_json::Value::Null,
            )?;
            Ok(PromptRow {
                prompt: cfg.prompt.clone(),
                maps: report.maps,
                blackbox_avg: report.blackbox_avg,
            })
        })
        .collect()
}

/// CSV with one row per prompt: prompt, one mAP column per detector, and
/// the black-box average.
pub fn prompts_csv(rows: &[PromptRow]) -> String {
    let mut out = String::from("prompt");
    if let Some(first) = rows.first() {
        for (id, _) in &first.maps {
            write!(out, ",{id}").expect("writing to a string");
        }
    }
    out.push_str(",blackbox_avg\n");
    for r in rows {
        write!(out, "\"{}\"", r.prompt.replace('"', "\"\"")).expect("writing to a string");
        for (_, m) in &r.maps {
            write!(out, ",{m:.6}").expect("writing to a string");
        }
        writeln!(out, ",{:.6}", r.blackbox_avg).expect("writing to a string");
    }
    out
}
