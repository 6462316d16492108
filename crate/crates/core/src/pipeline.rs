//! Three-stage orchestration: preliminary detection, ROI-gated dehazing,
//! final detection. An optional haze gate skips dehazing on clear frames.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dehaze::{dehaze_aod, forward_aodx, rasterize_rois, DehazerParams, RoiMask};
use crate::detect::{Detection, Detector};
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::scatter::{haze_index, HazeIndexConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineMode {
    BaselineDetectOnly,
    GlobalDehaze,
    GazeDehaze,
}

impl PipelineMode {
    pub const ALL: [PipelineMode; 3] = [
        PipelineMode::BaselineDetectOnly,
        PipelineMode::GlobalDehaze,
        PipelineMode::GazeDehaze,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PipelineMode::BaselineDetectOnly => "baseline_detect_only",
            PipelineMode::GlobalDehaze => "global_dehaze",
            PipelineMode::GazeDehaze => "gaze_dehaze",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.as_str() == s)
    }
}

impl std::fmt::Display for PipelineMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Preliminary detections below this confidence never reach the ROI mask.
    pub pre_conf_threshold: f64,
    pub roi_margin: f64,
    pub roi_feather: f64,
    pub lambda_min: f64,
    pub tau_haze: f64,
    pub gate_enabled: bool,
    pub mode: PipelineMode,
    pub haze_index: HazeIndexConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            pre_conf_threshold: 0.25,
            roi_margin: 0.1,
            roi_feather: 1.5,
            lambda_min: 0.3,
            tau_haze: 0.55,
            gate_enabled: false,
            mode: PipelineMode::GazeDehaze,
            haze_index: HazeIndexConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("pre_conf_threshold", self.pre_conf_threshold),
            ("lambda_min", self.lambda_min),
            ("tau_haze", self.tau_haze),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("pipeline.{name} must lie in [0, 1]")));
            }
        }
        if !(self.roi_margin >= 0.0 && self.roi_margin.is_finite()) {
            return Err(Error::Config("pipeline.roi_margin must be non-negative".into()));
        }
        if !(self.roi_feather >= 0.0 && self.roi_feather.is_finite()) {
            return Err(Error::Config("pipeline.roi_feather must be non-negative".into()));
        }
        Ok(())
    }

    pub fn with_mode(&self, mode: PipelineMode) -> Self {
        Self {
            mode,
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

/// Everything a run produced. Optional fields are `None` when their stage
/// did not execute.
#[derive(Clone, Debug)]
pub struct PipelineTrace {
    pub image_id: String,
    pub mode: PipelineMode,
    pub preliminary: Option<Vec<Detection>>,
    pub roi: Option<RoiMask>,
    pub haze_index: Option<f64>,
    pub gate_passed: Option<bool>,
    pub dehazed: Option<Image>,
    pub final_detections: Vec<Detection>,
    pub timings: Vec<StageTiming>,
    pub total_seconds: f64,
}

/// Serializable summary of a trace, one JSON object per image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub image_id: String,
    pub mode: PipelineMode,
    pub preliminary: Option<Vec<Detection>>,
    pub haze_index: Option<f64>,
    pub gate_passed: Option<bool>,
    pub dehazed: bool,
    pub final_detections: Vec<Detection>,
}

impl PipelineTrace {
    pub fn record(&self) -> TraceRecord {
        TraceRecord {
            image_id: self.image_id.clone(),
            mode: self.mode,
            preliminary: self.preliminary.clone(),
            haze_index: self.haze_index,
            gate_passed: self.gate_passed,
            dehazed: self.dehazed.is_some(),
            final_detections: self.final_detections.clone(),
        }
    }
}

pub fn should_dehaze(img: &Image, cfg: &PipelineConfig) -> bool {
    cfg.gate_enabled && haze_index(img, &cfg.haze_index) >= cfg.tau_haze
}

fn staged<T>(stage: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage {
        stage,
        source: Box::new(e),
    })
}

struct Clock {
    timings: Vec<StageTiming>,
}

impl Clock {
    fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.timings.push(StageTiming {
            stage: stage.to_string(),
            seconds: start.elapsed().as_secs_f64(),
        });
        out
    }
}

pub fn run_pipeline(
    img: &Image,
    image_id: &str,
    dehazer: &DehazerParams,
    preliminary: &dyn Detector,
    final_detector: &dyn Detector,
    cfg: &PipelineConfig,
) -> Result<PipelineTrace> {
    let started = Instant::now();
    cfg.validate()?;
    let mut clock = Clock {
        timings: Vec::new(),
    };
    let mut trace = PipelineTrace {
        image_id: image_id.to_string(),
        mode: cfg.mode,
        preliminary: None,
        roi: None,
        haze_index: None,
        gate_passed: None,
        dehazed: None,
        final_detections: Vec::new(),
        timings: Vec::new(),
        total_seconds: 0.0,
    };

    if cfg.mode != PipelineMode::BaselineDetectOnly && cfg.gate_enabled {
        let h = clock.time("gate", || haze_index(img, &cfg.haze_index));
        trace.haze_index = Some(h);
        trace.gate_passed = Some(h >= cfg.tau_haze);
    }
    let dehaze_allowed = trace.gate_passed.unwrap_or(true);

    match cfg.mode {
        PipelineMode::BaselineDetectOnly => {}
        PipelineMode::GlobalDehaze => {
            if dehaze_allowed {
                let out = clock.time("dehaze", || dehaze_aod(dehazer, img));
                trace.dehazed = Some(staged("dehaze", out)?);
            }
        }
        PipelineMode::GazeDehaze => {
            let dets = clock.time("preliminary", || preliminary.detect(img, image_id));
            let dets = staged("preliminary", dets)?;
            let kept: Vec<Detection> = dets
                .iter()
                .filter(|d| d.confidence >= cfg.pre_conf_threshold)
                .cloned()
                .collect();
            trace.preliminary = Some(dets);
            let roi = clock.time("roi", || {
                rasterize_rois(&kept, img.height(), img.width(), cfg.roi_margin, cfg.roi_feather)
            });
            let roi = staged("roi", roi)?;
            if dehaze_allowed {
                let out = clock.time("dehaze", || forward_aodx(dehazer, img, &roi, cfg.lambda_min));
                trace.dehazed = Some(staged("dehaze", out)?);
            }
            trace.roi = Some(roi);
        }
    }

    let target = trace.dehazed.as_ref().unwrap_or(img);
    let fin = clock.time("final", || final_detector.detect(target, image_id));
    trace.final_detections = staged("final", fin)?;
    trace.timings = clock.timings;
    trace.total_seconds = started.elapsed().as_secs_f64();
    Ok(trace)
}
