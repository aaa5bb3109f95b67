//! Slow, obviously-correct reference implementations shared by the
//! integration tests. Nothing here calls into the code it checks.
#![allow(dead_code)]

use std::f64::consts::PI;

use advlogo::detector::iou;
use advlogo::{ComplexTensor4, DetectionBox, Image, Tensor4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Quadruple-sum DFT. `sign = -1` is the forward transform; the inverse
/// (`sign = +1`) divides by the element count.
pub fn naive_dft4(re: &Tensor4, im: &Tensor4, sign: f64) -> (Vec<f64>, Vec<f64>) {
    let s = re.shape();
    let n: usize = s.iter().product();
    let mut out_re = vec![0.0; n];
    let mut out_im = vec![0.0; n];
    for k0 in 0..s[0] {
        for k1 in 0..s[1] {
            for k2 in 0..s[2] {
                for k3 in 0..s[3] {
                    let (mut acc_re, mut acc_im) = (0.0, 0.0);
                    for n0 in 0..s[0] {
                        for n1 in 0..s[1] {
                            for n2 in 0..s[2] {
                                for n3 in 0..s[3] {
                                    let phase = 2.0
                                        * PI
                                        * ((k0 * n0) as f64 / s[0] as f64
                                            + (k1 * n1) as f64 / s[1] as f64
                                            + (k2 * n2) as f64 / s[2] as f64
                                            + (k3 * n3) as f64 / s[3] as f64);
                                    let (sin, cos) = (sign * phase).sin_cos();
                                    let (a, b) =
                                        (re.get([n0, n1, n2, n3]), im.get([n0, n1, n2, n3]));
                                    acc_re += a * cos - b * sin;
                                    acc_im += a * sin + b * cos;
                                }
                            }
                        }
                    }
                    let idx = re.offset([k0, k1, k2, k3]);
                    let norm = if sign > 0.0 { n as f64 } else { 1.0 };
                    out_re[idx] = acc_re / norm;
                    out_im[idx] = acc_im / norm;
                }
            }
        }
    }
    (out_re, out_im)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

pub fn complex_max_diff(c: &ComplexTensor4, re: &[f64], im: &[f64]) -> f64 {
    max_abs_diff(c.re.data(), re).max(max_abs_diff(c.im.data(), im))
}

/// `max |a - n| / max |n|`.
pub fn rel_max_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = max_abs_diff(analytic, numeric);
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

pub fn central_diff(f: impl Fn(f64) -> f64, h: f64) -> f64 {
    (f(h) - f(-h)) / (2.0 * h)
}

fn triangle_weight(src_index: usize, out_index: usize, src: usize, out: usize) -> f64 {
    let ratio = src as f64 / out as f64;
    let support = ratio.max(1.0);
    let centre = (out_index as f64 + 0.5) * ratio;
    (1.0 - ((src_index as f64 + 0.5 - centre) / support).abs()).max(0.0)
}

/// Antialiased bilinear resize evaluated as one normalised 2-D sum per
/// output pixel, with no separable pass.
pub fn bilinear_oracle(img: &Image, out_h: usize, out_w: usize) -> Image {
    let (h, w) = img.dims();
    let mut data = vec![0.0; 3 * out_h * out_w];
    for c in 0..3 {
        for oy in 0..out_h {
            for ox in 0..out_w {
                let (mut acc, mut total) = (0.0, 0.0);
                for y in 0..h {
                    let wy = triangle_weight(y, oy, h, out_h);
                    if wy == 0.0 {
                        continue;
                    }
                    for x in 0..w {
                        let wt = wy * triangle_weight(x, ox, w, out_w);
                        acc += wt * img.get(c, y, x);
                        total += wt;
                    }
                }
                data[(c * out_h + oy) * out_w + ox] = acc / total;
            }
        }
    }
    Image::new(out_h, out_w, data).unwrap()
}

/// Pastes patches one pixel at a time using [`bilinear_oracle`].
pub fn paste_oracle(x: &Image, tau: &Image, boxes: &[DetectionBox], scale: f64) -> Image {
    let (h, w) = x.dims();
    let mut out = x.clone();
    for b in boxes {
        let side = (scale * (b.width() * b.height()).sqrt()).round() as usize;
        if side == 0 {
            continue;
        }
        let patch = bilinear_oracle(tau, side, side);
        let y0 = ((b.y1 + b.y2 - side as f64) / 2.0).round() as isize;
        let x0 = ((b.x1 + b.x2 - side as f64) / 2.0).round() as isize;
        for py in 0..side {
            for px in 0..side {
                let (y, xx) = (y0 + py as isize, x0 + px as isize);
                if y < 0 || xx < 0 || y as usize >= h || xx as usize >= w {
                    continue;
                }
                for c in 0..3 {
                    let v = patch.get(c, py, px).clamp(0.0, 1.0);
                    out = out.with_pixel(c, y as usize, xx as usize, v);
                }
            }
        }
    }
    out
}

/// Largest number of prediction/ground-truth pairs with IoU at or above
/// `thr`, found by trying every assignment.
fn max_matching(preds: &[DetectionBox], gts: &[DetectionBox], thr: f64) -> usize {
    fn go(
        i: usize,
        preds: &[DetectionBox],
        gts: &[DetectionBox],
        used: &mut Vec<bool>,
        thr: f64,
    ) -> usize {
        if i == preds.len() {
            return 0;
        }
        let mut best = go(i + 1, preds, gts, used, thr);
        let p = &preds[i];
        for j in 0..gts.len() {
            let g = &gts[j];
            if !used[j] && iou([p.x1, p.y1, p.x2, p.y2], [g.x1, g.y1, g.x2, g.y2]) >= thr {
                used[j] = true;
                best = best.max(1 + go(i + 1, preds, gts, used, thr));
                used[j] = false;
            }
        }
        best
    }
    go(0, preds, gts, &mut vec![false; gts.len()], thr)
}

/// Average precision recomputed from scratch for every prefix of the
/// confidence ranking, with the 101-point envelope taken literally.
pub fn brute_force_ap(preds: &[Vec<DetectionBox>], gts: &[Vec<DetectionBox>], thr: f64) -> f64 {
    let total: usize = gts.iter().map(Vec::len).sum();
    let mut ranked: Vec<(usize, usize, f64)> = preds
        .iter()
        .enumerate()
        .flat_map(|(i, p)| p.iter().enumerate().map(move |(j, b)| (i, j, b.conf)))
        .collect();
    if total == 0 {
        return if ranked.is_empty() { 1.0 } else { 0.0 };
    }
    ranked.sort_by(|a, b| b.2.total_cmp(&a.2));
    let mut points = Vec::new();
    for k in 1..=ranked.len() {
        let mut per_image: Vec<Vec<DetectionBox>> = vec![Vec::new(); preds.len()];
        for &(i, j, _) in &ranked[..k] {
            per_image[i].push(preds[i][j]);
        }
        let tp: usize = per_image
            .iter()
            .zip(gts)
            .map(|(p, g)| max_matching(p, g, thr))
            .sum();
        points.push((tp as f64 / total as f64, tp as f64 / k as f64));
    }
    (0..=100)
        .map(|r| {
            let level = r as f64 / 100.0;
            points
                .iter()
                .filter(|(rec, _)| *rec >= level - 1e-12)
                .map(|(_, p)| *p)
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 101.0
}
