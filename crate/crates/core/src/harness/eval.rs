//! Dehazing and detection evaluation over a manifest's test split.

use rayon::prelude::*;

use super::config::EvalConfig;
use super::manifest::{DatasetManifest, ManifestRecord, Split};
use super::report::{ClassAp, ReportRow};
use crate::dehaze::{apply_k, dehaze_aod, forward_aodx, rasterize_rois, DehazerParams, TrainSample};
use crate::detect::{Detection, Detector};
use crate::error::{Error, Result};
use crate::imaging::{to_luma, Image};
use crate::metrics::{evaluate_map, mse, psnr_bytes, psnr_from_mse, ssim, MatchConfig, SsimParams, SsimWindow};
use crate::pipeline::{run_pipeline, PipelineConfig, PipelineMode};
use crate::scatter::{ideal_k, transmission_from_depth, GroundTruthBox};

/// How a dehazing row produces its output.
#[derive(Clone, Debug)]
pub enum DehazeMethod {
    /// Returns the foggy input unchanged.
    Identity,
    /// K-estimator only.
    Aod(DehazerParams),
    /// Attention-gated, with ROIs from the preliminary detector.
    AodX(DehazerParams),
    /// Inverts the scattering model with the true depth, beta and airlight.
    Oracle,
}

#[derive(Clone, Debug)]
pub struct DehazeVariant {
    pub name: String,
    pub method: DehazeMethod,
}

impl DehazeVariant {
    pub fn new(name: &str, method: DehazeMethod) -> Self {
        Self {
            name: name.to_string(),
            method,
        }
    }
}

/// The standard rows: no-op, K-only, attention-gated and oracle.
pub fn standard_variants(params: &DehazerParams) -> Vec<DehazeVariant> {
    vec![
        DehazeVariant::new("no-op", DehazeMethod::Identity),
        DehazeVariant::new("aod-net", DehazeMethod::Aod(params.clone())),
        DehazeVariant::new("aod-netx", DehazeMethod::AodX(params.clone())),
        DehazeVariant::new("oracle", DehazeMethod::Oracle),
    ]
}

pub struct EvalContext<'a> {
    pub preliminary: &'a dyn Detector,
    pub final_detector: &'a dyn Detector,
    pub pipeline: &'a PipelineConfig,
    pub matching: &'a MatchConfig,
    pub ssim: &'a SsimParams,
    pub eval: &'a EvalConfig,
}

/// Test-split records in id order.
fn test_records(m: &DatasetManifest) -> Vec<&ManifestRecord> {
    let mut v = m.split(Split::Test);
    v.sort_by(|a, b| a.id.cmp(&b.id));
    v
}

fn roi_for(img: &Image, id: &str, ctx: &EvalContext<'_>) -> Result<crate::dehaze::RoiMask> {
    let cfg = ctx.pipeline;
    let dets: Vec<Detection> = ctx
        .preliminary
        .detect(img, id)?
        .into_iter()
        .filter(|d| d.confidence >= cfg.pre_conf_threshold)
        .collect();
    rasterize_rois(&dets, img.height(), img.width(), cfg.roi_margin, cfg.roi_feather)
}

/// `None` when the variant cannot run on this record (missing references).
fn apply_method(
    m: &DatasetManifest,
    r: &ManifestRecord,
    foggy: &Image,
    method: &DehazeMethod,
    ctx: &EvalContext<'_>,
) -> Result<Option<Image>> {
    Ok(Some(match method {
        DehazeMethod::Identity => foggy.clone(),
        DehazeMethod::Aod(p) => dehaze_aod(p, foggy)?,
        DehazeMethod::AodX(p) => {
            let roi = roi_for(foggy, &r.id, ctx)?;
            forward_aodx(p, foggy, &roi, ctx.pipeline.lambda_min)?
        }
        DehazeMethod::Oracle => {
            let (Some(depth), Some(haze)) = (m.load_depth(r)?, r.haze()) else {
                return Ok(None);
            };
            let t = transmission_from_depth(&depth, haze.beta)?;
            let k = ideal_k(foggy, &t, &haze, 1.0)?;
            apply_k(&k.k, foggy, 1.0)?
        }
    }))
}

struct ImageScores {
    ssim_global: f64,
    ssim_gaussian: Option<f64>,
    psnr: f64,
    psnr_bytes: f64,
}

fn score(clear: &Image, out: &Image, ctx: &EvalContext<'_>) -> Result<ImageScores> {
    let (lc, lo) = (to_luma(clear), to_luma(out));
    let global = SsimParams {
        window: SsimWindow::Global,
        ..ctx.ssim.clone()
    };
    let windowed = SsimParams {
        window: SsimWindow::Gaussian11,
        ..ctx.ssim.clone()
    };
    let fits = clear.height() >= 11 && clear.width() >= 11;
    let cap = ctx.eval.psnr_cap;
    Ok(ImageScores {
        ssim_global: ssim(&lc, &lo, &global)?,
        ssim_gaussian: if fits { Some(ssim(&lc, &lo, &windowed)?) } else { None },
        psnr: psnr_from_mse(mse(clear, out)?, 1.0).min(cap),
        psnr_bytes: psnr_bytes(clear, out)?.min(cap),
    })
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// One row per variant: mean SSIM (both windows) and PSNR of the variant's
/// output against the clear reference over the test split. Records without
/// the references a variant needs are skipped and counted.
pub fn run_dehaze_eval(
    manifest: &DatasetManifest,
    variants: &[DehazeVariant],
    ctx: &EvalContext<'_>,
) -> Result<Vec<ReportRow>> {
    let records = test_records(manifest);
    let mut rows = Vec::with_capacity(variants.len());
    for v in variants {
        let scores = records
            .par_iter()
            .map(|r| -> Result<Option<ImageScores>> {
                let Some(clear) = manifest.load_clear(r)? else {
                    return Ok(None);
                };
                let foggy = manifest.load_foggy(r)?;
                match apply_method(manifest, r, &foggy, &v.method, ctx)? {
                    Some(out) => score(&clear, &out, ctx).map(Some),
                    None => Ok(None),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let ok: Vec<&ImageScores> = scores.iter().flatten().collect();
        let mut row = ReportRow::new("dehaze", &v.name, "foggy");
        row.images = ok.len();
        row.skipped = scores.len() - ok.len();
        row.ssim_global = mean(ok.iter().map(|s| s.ssim_global));
        row.ssim_gaussian = if ok.iter().all(|s| s.ssim_gaussian.is_some()) {
            mean(ok.iter().filter_map(|s| s.ssim_gaussian))
        } else {
            None
        };
        row.psnr = mean(ok.iter().map(|s| s.psnr));
        if ctx.eval.psnr_bytes {
            row.psnr_bytes = mean(ok.iter().map(|s| s.psnr_bytes));
        }
        if row.skipped > 0 {
            eprintln!(
                "warning: {} test image(s) skipped for {} (missing references)",
                row.skipped, v.name
            );
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Training pairs for one split. ROI masks come from the ground-truth boxes.
/// Records without a clear reference are skipped with a warning.
pub fn training_samples(
    m: &DatasetManifest,
    split: Split,
    roi_margin: f64,
    roi_feather: f64,
) -> Result<Vec<TrainSample>> {
    let mut records = m.split(split);
    records.sort_by(|a, b| a.id.cmp(&b.id));
    let out = records
        .par_iter()
        .map(|r| -> Result<Option<TrainSample>> {
            let Some(clear) = m.load_clear(r)? else {
                eprintln!("warning: {} has no clear reference, skipped", r.id);
                return Ok(None);
            };
            let foggy = m.load_foggy(r)?;
            let boxes: Vec<Detection> = r
                .gt_boxes
                .iter()
                .map(|b| Detection {
                    cls: b.cls.clone(),
                    x0: b.x0,
                    y0: b.y0,
                    x1: b.x1,
                    y1: b.y1,
                    confidence: 1.0,
                })
                .collect();
            let roi = rasterize_rois(&boxes, foggy.height(), foggy.width(), roi_margin, roi_feather)?;
            Ok(Some(TrainSample {
                foggy,
                clear,
                roi: Some(roi),
            }))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(out.into_iter().flatten().collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Condition {
    Clear,
    Foggy,
}

impl Condition {
    pub fn as_str(self) -> &'static str {
        match self {
            Condition::Clear => "clear",
            Condition::Foggy => "foggy",
        }
    }
}

/// mAP of one pipeline mode on one condition of the test split.
pub fn detect_map(
    manifest: &DatasetManifest,
    dehazer: &DehazerParams,
    mode: PipelineMode,
    condition: Condition,
    ctx: &EvalContext<'_>,
) -> Result<(crate::metrics::MapResult, usize, usize)> {
    let records = test_records(manifest);
    if records.is_empty() {
        return Err(Error::domain("test split is empty"));
    }
    let cfg = ctx.pipeline.with_mode(mode);
    let per_image = records
        .par_iter()
        .map(|r| -> Result<Option<(Vec<Detection>, Vec<GroundTruthBox>)>> {
            let img = match condition {
                Condition::Foggy => manifest.load_foggy(r)?,
                Condition::Clear => match manifest.load_clear(r)? {
                    Some(c) => c,
                    None => return Ok(None),
                },
            };
            let trace = run_pipeline(&img, &r.id, dehazer, ctx.preliminary, ctx.final_detector, &cfg)?;
            Ok(Some((trace.final_detections, r.gt_boxes.clone())))
        })
        .collect::<Result<Vec<_>>>()?;
    let skipped = per_image.iter().filter(|x| x.is_none()).count();
    let images: Vec<_> = per_image.into_iter().flatten().collect();
    if images.is_empty() {
        return Err(Error::domain(format!(
            "no {} images in the test split",
            condition.as_str()
        )));
    }
    let n = images.len();
    Ok((evaluate_map(&images, ctx.matching)?, n, skipped))
}

fn map_row(table: &str, mode: PipelineMode, condition: &str, res: (crate::metrics::MapResult, usize, usize)) -> ReportRow {
    let (m, n, skipped) = res;
    let mut row = ReportRow::new(table, mode.as_str(), condition);
    row.map = Some(m.map);
    row.per_class = m
        .per_class
        .into_iter()
        .map(|(cls, ap)| ClassAp { cls, ap })
        .collect();
    row.images = n;
    row.skipped = skipped;
    row
}

/// mAP for every pipeline mode under clear and foggy conditions, plus the
/// foggy condition of an out-of-distribution manifest when given.
pub fn run_detect_eval(
    manifest: &DatasetManifest,
    ood: Option<&DatasetManifest>,
    dehazer: &DehazerParams,
    ctx: &EvalContext<'_>,
) -> Result<Vec<ReportRow>> {
    if test_records(manifest).is_empty() {
        return Err(Error::domain("test split is empty"));
    }
    let has_clear = manifest.split(Split::Test).iter().any(|r| r.clear_path.is_some());
    let mut rows = Vec::new();
    for mode in PipelineMode::ALL {
        for cond in [Condition::Clear, Condition::Foggy] {
            if cond == Condition::Clear && !has_clear {
                continue;
            }
            let res = detect_map(manifest, dehazer, mode, cond, ctx)?;
            rows.push(map_row("detect", mode, cond.as_str(), res));
        }
    }
    if let Some(ood) = ood {
        for mode in PipelineMode::ALL {
            let res = detect_map(ood, dehazer, mode, Condition::Foggy, ctx)?;
            rows.push(map_row("ood", mode, "foggy", res));
        }
    }
    Ok(rows)
}
