//! Detections, the built-in threshold detector, and the detection exchange files
//! used to plug in external models.

use std::collections::VecDeque;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{to_luma, Image};
use crate::scatter::{hue_degrees, ObjectClass};

/// Class assigned by the toy detector when the image carries no color.
pub const ACHROMATIC_CLASS: &str = "object";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub cls: String,
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
    pub confidence: f64,
}

impl Detection {
    pub fn bounds(&self) -> [f64; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x0, self.y0, self.x1, self.y1, self.confidence]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.x0 >= self.x1 || self.y0 >= self.y1 {
            return Err(Error::domain(format!("degenerate detection box {:?}", self.bounds())));
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(Error::domain(format!(
                "confidence {} outside [0, 1]",
                self.confidence
            )));
        }
        Ok(())
    }

    /// Clips the box to a `width × height` image; `None` if nothing remains.
    pub fn clipped(&self, width: usize, height: usize) -> Option<Detection> {
        let mut d = self.clone();
        d.x0 = d.x0.max(0.0);
        d.y0 = d.y0.max(0.0);
        d.x1 = d.x1.min(width as f64);
        d.y1 = d.y1.min(height as f64);
        (d.x0 < d.x1 && d.y0 < d.y1).then_some(d)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetectorRole {
    Preliminary,
    Final,
}

impl DetectorRole {
    pub fn as_str(self) -> &'static str {
        match self {
            DetectorRole::Preliminary => "preliminary",
            DetectorRole::Final => "final",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strength {
    Weak,
    Strong,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyDetectorConfig {
    pub luma_threshold: f64,
    pub min_area: usize,
    /// Added to `luma_threshold` for the weak tier.
    pub weak_threshold_offset: f64,
    /// Multiplies `min_area` for the weak tier.
    pub weak_area_factor: f64,
}

impl Default for ToyDetectorConfig {
    fn default() -> Self {
        Self {
            luma_threshold: 0.5,
            min_area: 4,
            weak_threshold_offset: 0.1,
            weak_area_factor: 2.0,
        }
    }
}

/// 4-connected labels of `mask`; `None` for background.
fn label_components(mask: &[bool], height: usize, width: usize) -> (Vec<Option<u32>>, usize) {
    let mut labels = vec![None; mask.len()];
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        if !mask[start] || labels[start].is_some() {
            continue;
        }
        labels[start] = Some(next);
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            let (y, x) = (i / width, i % width);
            let mut visit = |j: usize| {
                if mask[j] && labels[j].is_none() {
                    labels[j] = Some(next);
                    queue.push_back(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < width {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - width);
            }
            if y + 1 < height {
                visit(i + width);
            }
        }
        next += 1;
    }
    (labels, next as usize)
}

#[derive(Clone, Default)]
struct Blob {
    area: usize,
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
    luma_sum: f64,
    rgb_sum: [f64; 3],
}

impl Blob {
    fn add(&mut self, y: usize, x: usize, luma: f64, px: &[f64]) {
        if self.area == 0 {
            (self.x0, self.y0, self.x1, self.y1) = (x, y, x + 1, y + 1);
        } else {
            self.x0 = self.x0.min(x);
            self.y0 = self.y0.min(y);
            self.x1 = self.x1.max(x + 1);
            self.y1 = self.y1.max(y + 1);
        }
        self.area += 1;
        self.luma_sum += luma;
        if px.len() == 3 {
            for c in 0..3 {
                self.rgb_sum[c] += px[c];
            }
        }
    }

    fn to_detection(&self, color: bool) -> Detection {
        let n = self.area as f64;
        let cls = if color {
            let [r, g, b] = self.rgb_sum.map(|s| s / n);
            classify_hue(hue_degrees(r, g, b)).as_str().to_string()
        } else {
            ACHROMATIC_CLASS.to_string()
        };
        Detection {
            cls,
            x0: self.x0 as f64,
            y0: self.y0 as f64,
            x1: self.x1 as f64,
            y1: self.y1 as f64,
            confidence: (self.luma_sum / n).clamp(0.0, 1.0),
        }
    }
}

fn hue_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).abs().rem_euclid(360.0);
    d.min(360.0 - d)
}

/// Nearest class by paint hue.
pub fn classify_hue(hue: f64) -> ObjectClass {
    ObjectClass::ALL
        .into_iter()
        .min_by(|a, b| hue_distance(hue, a.hue()).total_cmp(&hue_distance(hue, b.hue())))
        .expect("vocabulary is non-empty")
}

/// Threshold-and-label detector. The weak tier thresholds higher and needs
/// more area, then merges its blobs per strong-tier component, so it never
/// reports more boxes than the strong tier.
pub fn toy_detect(img: &Image, cfg: &ToyDetectorConfig, strength: Strength) -> Vec<Detection> {
    let luma = to_luma(img);
    let (h, w) = (img.height(), img.width());
    let color = img.channels() == 3;
    let lv = luma.data();

    let strong_mask: Vec<bool> = lv.iter().map(|&v| v >= cfg.luma_threshold).collect();
    let (strong_labels, n_strong) = label_components(&strong_mask, h, w);

    let (labels, min_area, group_of): (Vec<Option<u32>>, usize, Box<dyn Fn(usize) -> usize>) =
        match strength {
            Strength::Strong => (strong_labels, cfg.min_area, Box::new(|l| l)),
            Strength::Weak => {
                let tau = (cfg.luma_threshold + cfg.weak_threshold_offset).min(1.0);
                let mask: Vec<bool> = lv.iter().map(|&v| v >= tau).collect();
                let (weak_labels, n_weak) = label_components(&mask, h, w);
                let mut parent = vec![0usize; n_weak];
                for (i, l) in weak_labels.iter().enumerate() {
                    if let Some(l) = l {
                        // a weak pixel is also above the strong threshold
                        parent[*l as usize] = strong_labels[i].expect("nested thresholds") as usize;
                    }
                }
                let area = (cfg.min_area as f64 * cfg.weak_area_factor).ceil() as usize;
                (weak_labels, area, Box::new(move |l| parent[l]))
            }
        };

    let n_labels = labels.iter().flatten().map(|&l| l as usize + 1).max().unwrap_or(0);
    let mut areas = vec![0usize; n_labels];
    for l in labels.iter().flatten() {
        areas[*l as usize] += 1;
    }
    let mut groups: Vec<Blob> = vec![Blob::default(); n_strong];
    for (i, l) in labels.iter().enumerate() {
        let Some(l) = l else { continue };
        let l = *l as usize;
        if areas[l] < min_area {
            continue;
        }
        let (y, x) = (i / w, i % w);
        groups[group_of(l)].add(y, x, lv[i], img.pixel(y, x));
    }
    groups
        .iter()
        .filter(|b| b.area > 0)
        .map(|b| b.to_detection(color))
        .collect()
}

/// Anything that maps an image to detections. `image_id` lets file-backed
/// detectors find their records.
pub trait Detector: Send + Sync {
    fn detect(&self, img: &Image, image_id: &str) -> Result<Vec<Detection>>;
}

impl<F> Detector for F
where
    F: Fn(&Image, &str) -> Result<Vec<Detection>> + Send + Sync,
{
    fn detect(&self, img: &Image, image_id: &str) -> Result<Vec<Detection>> {
        self(img, image_id)
    }
}

#[derive(Clone, Debug)]
pub struct ToyDetector {
    pub cfg: ToyDetectorConfig,
    pub strength: Strength,
}

impl Detector for ToyDetector {
    fn detect(&self, img: &Image, _image_id: &str) -> Result<Vec<Detection>> {
        Ok(toy_detect(img, &self.cfg, self.strength))
    }
}

/// Reads `<dir>/<image_id>.jsonl` written by an external model.
#[derive(Clone, Debug)]
pub struct FileDetector {
    pub dir: PathBuf,
}

impl FileDetector {
    pub fn path_for(&self, image_id: &str) -> PathBuf {
        self.dir.join(format!("{image_id}.jsonl"))
    }
}

impl Detector for FileDetector {
    fn detect(&self, img: &Image, image_id: &str) -> Result<Vec<Detection>> {
        let file = load_detection_file(self.path_for(image_id))?;
        if let Some(id) = &file.image_id {
            if id != image_id {
                return Err(Error::domain(format!(
                    "detection file for {image_id} is labelled {id}"
                )));
            }
        }
        Ok(file
            .detections
            .into_iter()
            .filter_map(|d| d.clipped(img.width(), img.height()))
            .collect())
    }
}

/// One line of a detection exchange file. Field order is part of the format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionRecord {
    pub image_id: String,
    pub cls: String,
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
    pub confidence: f64,
}

pub fn save_detections(image_id: &str, dets: &[Detection], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for d in dets {
        let rec = DetectionRecord {
            image_id: image_id.to_string(),
            cls: d.cls.clone(),
            x0: d.x0,
            y0: d.y0,
            x1: d.x1,
            y1: d.y1,
            confidence: d.confidence,
        };
        serde_json::to_writer(&mut out, &rec).expect("records serialize");
        out.push(b'\n');
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectionFile {
    /// `None` for an empty file.
    pub image_id: Option<String>,
    pub detections: Vec<Detection>,
}

pub fn load_detection_file(path: impl AsRef<Path>) -> Result<DetectionFile> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut image_id: Option<String> = None;
    let mut detections = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |reason: String| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            reason,
        };
        let rec: DetectionRecord =
            serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        match &image_id {
            None => image_id = Some(rec.image_id.clone()),
            Some(id) if *id != rec.image_id => {
                return Err(parse_err(format!(
                    "image_id {} differs from {id}; one image per file",
                    rec.image_id
                )))
            }
            _ => {}
        }
        let det = Detection {
            cls: rec.cls,
            x0: rec.x0,
            y0: rec.y0,
            x1: rec.x1,
            y1: rec.y1,
            confidence: rec.confidence,
        };
        det.validate().map_err(|e| parse_err(e.to_string()))?;
        detections.push(det);
    }
    Ok(DetectionFile {
        image_id,
        detections,
    })
}

pub fn load_detections(path: impl AsRef<Path>) -> Result<Vec<Detection>> {
    Ok(load_detection_file(path)?.detections)
}
