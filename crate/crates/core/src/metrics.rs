//! Image-quality and detection metrics: MSE, PSNR, SSIM, IoU, AP and mAP.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::detect::Detection;
use crate::error::{Error, Result};
use crate::imaging::{gaussian_kernel, to_byte, Image};
use crate::scatter::GroundTruthBox;

pub fn mse(reference: &Image, test: &Image) -> Result<f64> {
    reference.ensure_same_shape(test, "mse")?;
    Ok(mse_slices(reference.data(), test.data()))
}

fn mse_slices(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// `10·log10(MAX² / MSE)`; identical inputs give `+∞`.
pub fn psnr_from_mse(mse: f64, max_value: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (max_value * max_value / mse).log10()
    }
}

pub fn psnr(reference: &Image, test: &Image, max_value: f64) -> Result<f64> {
    Ok(psnr_from_mse(mse(reference, test)?, max_value))
}

/// PSNR after 8-bit quantization of both images, against MAX = 255.
pub fn psnr_bytes(reference: &Image, test: &Image) -> Result<f64> {
    reference.ensure_same_shape(test, "psnr")?;
    let a: Vec<f64> = reference.data().iter().map(|&v| f64::from(to_byte(v))).collect();
    let b: Vec<f64> = test.data().iter().map(|&v| f64::from(to_byte(v))).collect();
    Ok(psnr_from_mse(mse_slices(&a, &b), 255.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SsimWindow {
    Global,
    Gaussian11,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SsimParams {
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
    pub window: SsimWindow,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
            window: SsimWindow::Gaussian11,
        }
    }
}

impl SsimParams {
    pub fn global() -> Self {
        Self {
            window: SsimWindow::Global,
            ..Self::default()
        }
    }

    pub fn c1(&self) -> f64 {
        (self.k1 * self.dynamic_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.dynamic_range).powi(2)
    }
}

fn ssim_formula(mx: f64, my: f64, vx: f64, vy: f64, cxy: f64, c1: f64, c2: f64) -> f64 {
    ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
}

const WINDOW: usize = 11;
const WINDOW_SIGMA: f64 = 1.5;

/// SSIM of two single-channel images. Global mode uses whole-image
/// population statistics; windowed mode averages the per-window index over
/// every fully-contained 11×11 Gaussian (σ = 1.5) window.
pub fn ssim(reference: &Image, test: &Image, p: &SsimParams) -> Result<f64> {
    reference.ensure_same_shape(test, "ssim")?;
    if reference.channels() != 1 {
        return Err(Error::domain("ssim expects single-channel images"));
    }
    let (c1, c2) = (p.c1(), p.c2());
    if !(c1 > 0.0 && c2 > 0.0) {
        return Err(Error::domain("ssim stabilizers must be positive"));
    }
    let (x, y) = (reference.data(), test.data());
    match p.window {
        SsimWindow::Global => {
            let n = x.len() as f64;
            let mx = x.iter().sum::<f64>() / n;
            let my = y.iter().sum::<f64>() / n;
            let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
            for (a, b) in x.iter().zip(y) {
                vx += (a - mx) * (a - mx);
                vy += (b - my) * (b - my);
                cxy += (a - mx) * (b - my);
            }
            Ok(ssim_formula(mx, my, vx / n, vy / n, cxy / n, c1, c2))
        }
        SsimWindow::Gaussian11 => {
            let (h, w) = (reference.height(), reference.width());
            if h < WINDOW || w < WINDOW {
                return Err(Error::domain(format!(
                    "windowed ssim needs at least {WINDOW}x{WINDOW}, got {h}x{w}"
                )));
            }
            // radius ceil(3σ) = 5 gives the 11-tap support
            let g = gaussian_kernel(WINDOW_SIGMA);
            debug_assert_eq!(g.len(), WINDOW);
            let mut total = 0.0;
            let mut count = 0usize;
            for oy in 0..=h - WINDOW {
                for ox in 0..=w - WINDOW {
                    let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for (ky, gy) in g.iter().enumerate() {
                        let row = (oy + ky) * w + ox;
                        for (kx, gx) in g.iter().enumerate() {
                            let wgt = gy * gx;
                            let a = x[row + kx];
                            let b = y[row + kx];
                            mx += wgt * a;
                            my += wgt * b;
                            sxx += wgt * a * a;
                            syy += wgt * b * b;
                            sxy += wgt * a * b;
                        }
                    }
                    let vx = sxx - mx * mx;
                    let vy = syy - my * my;
                    let cxy = sxy - mx * my;
                    total += ssim_formula(mx, my, vx, vy, cxy, c1, c2);
                    count += 1;
                }
            }
            Ok(total / count as f64)
        }
    }
}

fn box_area(b: &[f64; 4]) -> f64 {
    (b[2] - b[0]) * (b[3] - b[1])
}

/// Intersection over union of two `[x0, y0, x1, y1]` boxes.
pub fn iou(a: &[f64; 4], b: &[f64; 4]) -> Result<f64> {
    let (aa, ab) = (box_area(a), box_area(b));
    if !(aa > 0.0 && ab > 0.0) {
        return Err(Error::domain(format!("zero-area box in iou: {a:?} / {b:?}")));
    }
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    Ok(inter / (aa + ab - inter))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatchConfig {
    pub iou_threshold: f64,
    pub per_class: bool,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            per_class: true,
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(Error::domain("iou_threshold must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// Ranks detections (confidence descending, stable) and flags each as a
/// true positive under greedy highest-IoU matching. Returns flags in rank order.
fn rank_and_match(images: &[(&[Detection], &[GroundTruthBox])], threshold: f64) -> Vec<bool> {
    let mut ranked: Vec<(usize, usize)> = images
        .iter()
        .enumerate()
        .flat_map(|(img, (dets, _))| (0..dets.len()).map(move |d| (img, d)))
        .collect();
    ranked.sort_by(|&(ia, da), &(ib, db)| {
        images[ib].0[db]
            .confidence
            .total_cmp(&images[ia].0[da].confidence)
    });

    let mut taken: Vec<Vec<bool>> = images.iter().map(|(_, g)| vec![false; g.len()]).collect();
    ranked
        .into_iter()
        .map(|(img, d)| {
            let det = images[img].0[d].bounds();
            let mut best: Option<(usize, f64)> = None;
            for (gi, gt) in images[img].1.iter().enumerate() {
                if taken[img][gi] {
                    continue;
                }
                let Ok(v) = iou(&det, &gt.bounds()) else { continue };
                if v >= threshold && best.map_or(true, |(_, bv)| v > bv) {
                    best = Some((gi, v));
                }
            }
            match best {
                Some((gi, _)) => {
                    taken[img][gi] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

fn ap_from_flags(flags: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return if flags.is_empty() { 1.0 } else { 0.0 };
    }
    let mut tp = 0usize;
    let mut sum = 0.0;
    for (k, &rel) in flags.iter().enumerate() {
        if rel {
            tp += 1;
            sum += tp as f64 / (k + 1) as f64;
        }
    }
    sum / n_gt as f64
}

/// Average precision of one class on one image.
pub fn average_precision(dets: &[Detection], gts: &[GroundTruthBox], cfg: &MatchConfig) -> f64 {
    average_precision_pooled(&[(dets, gts)], cfg)
}

/// Average precision with detections ranked jointly across images and
/// matched only against ground truth from their own image.
pub fn average_precision_pooled(
    images: &[(&[Detection], &[GroundTruthBox])],
    cfg: &MatchConfig,
) -> f64 {
    let flags = rank_and_match(images, cfg.iou_threshold);
    let n_gt = images.iter().map(|(_, g)| g.len()).sum();
    ap_from_flags(&flags, n_gt)
}

/// Unweighted mean of per-class AP values.
pub fn mean_ap(per_class: &[(String, f64)]) -> Result<f64> {
    if per_class.is_empty() {
        return Err(Error::domain("mean_ap over an empty class list"));
    }
    Ok(per_class.iter().map(|(_, ap)| ap).sum::<f64>() / per_class.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapResult {
    pub per_class: Vec<(String, f64)>,
    pub map: f64,
}

/// Dataset-level mAP. Classes are those with at least one ground-truth box;
/// detections of other classes are ignored.
pub fn evaluate_map(
    images: &[(Vec<Detection>, Vec<GroundTruthBox>)],
    cfg: &MatchConfig,
) -> Result<MapResult> {
    cfg.validate()?;
    if !cfg.per_class {
        let refs: Vec<(&[Detection], &[GroundTruthBox])> = images
            .iter()
            .map(|(d, g)| (d.as_slice(), g.as_slice()))
            .collect();
        if refs.iter().all(|(_, g)| g.is_empty()) {
            return Err(Error::domain("no ground truth in dataset"));
        }
        let ap = average_precision_pooled(&refs, cfg);
        let per_class = vec![("*".to_string(), ap)];
        let map = mean_ap(&per_class)?;
        return Ok(MapResult { per_class, map });
    }

    let classes: BTreeSet<&str> = images
        .iter()
        .flat_map(|(_, g)| g.iter().map(|b| b.cls.as_str()))
        .collect();
    let mut per_class = Vec::with_capacity(classes.len());
    for cls in classes {
        let split: Vec<(Vec<Detection>, Vec<GroundTruthBox>)> = images
            .iter()
            .map(|(d, g)| {
                (
                    d.iter().filter(|x| x.cls == cls).cloned().collect(),
                    g.iter().filter(|x| x.cls == cls).cloned().collect(),
                )
            })
            .collect();
        let refs: Vec<(&[Detection], &[GroundTruthBox])> = split
            .iter()
            .map(|(d, g)| (d.as_slice(), g.as_slice()))
            .collect();
        per_class.push((cls.to_string(), average_precision_pooled(&refs, cfg)));
    }
    let map = mean_ap(&per_class)?;
    Ok(MapResult { per_class, map })
}
