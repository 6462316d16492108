//! Converters from external annotation layouts into manifests. No data is
//! bundled; splits come from explicit list files (one image stem per line).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use super::manifest::{DatasetManifest, ManifestRecord, Split};
use crate::error::{Error, Result};
use crate::scatter::GroundTruthBox;

/// Reads a split list: non-empty, non-comment lines, trimmed.
pub fn read_split_list(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect())
}

fn require_file(p: &Path) -> Result<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(Error::io(
            p,
            std::io::Error::new(std::io::ErrorKind::NotFound, "file missing"),
        ))
    }
}

fn finish(records: Vec<ManifestRecord>, out_root: &Path) -> Result<DatasetManifest> {
    let m = DatasetManifest {
        root: out_root.to_path_buf(),
        records,
    };
    m.validate()?;
    Ok(m)
}

/// Pascal-VOC style: `<annotations>/<stem>.xml` with `object/name` and
/// `object/bndbox/{xmin,ymin,xmax,ymax}` (1-based, inclusive).
#[derive(Clone, Debug)]
pub struct VocImport {
    pub annotations: PathBuf,
    pub images: PathBuf,
    /// Optional directory of haze-free counterparts with the same file names.
    pub clear_images: Option<PathBuf>,
    pub extension: String,
    pub splits: Vec<(Split, PathBuf)>,
}

fn xml_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        reason: reason.into(),
    }
}

/// Boxes from one VOC annotation, converted to half-open pixel edges.
pub fn parse_voc(text: &str, origin: &Path) -> Result<Vec<GroundTruthBox>> {
    let doc = roxmltree::Document::parse(text).map_err(|e| Error::Parse {
        path: origin.to_path_buf(),
        line: e.pos().row as usize,
        reason: e.to_string(),
    })?;
    let child_text = |n: roxmltree::Node, name: &str| -> Option<String> {
        n.children()
            .find(|c| c.has_tag_name(name))
            .and_then(|c| c.text())
            .map(|t| t.trim().to_string())
    };
    let mut out = Vec::new();
    for obj in doc.descendants().filter(|n| n.has_tag_name("object")) {
        let cls = child_text(obj, "name").ok_or_else(|| xml_err(origin, "object without name"))?;
        let bb = obj
            .children()
            .find(|c| c.has_tag_name("bndbox"))
            .ok_or_else(|| xml_err(origin, format!("object {cls} without bndbox")))?;
        let coord = |k: &str| -> Result<f64> {
            child_text(bb, k)
                .and_then(|v| v.parse::<f64>().ok())
                .ok_or_else(|| xml_err(origin, format!("bad or missing {k}")))
        };
        let (xmin, ymin, xmax, ymax) = (coord("xmin")?, coord("ymin")?, coord("xmax")?, coord("ymax")?);
        if xmax < xmin || ymax < ymin {
            return Err(xml_err(origin, format!("inverted box for {cls}")));
        }
        out.push(GroundTruthBox {
            cls,
            x0: xmin - 1.0,
            y0: ymin - 1.0,
            x1: xmax,
            y1: ymax,
        });
    }
    Ok(out)
}

pub fn import_voc(cfg: &VocImport, out_root: &Path) -> Result<DatasetManifest> {
    let mut records = Vec::new();
    for (split, list) in &cfg.splits {
        for stem in read_split_list(list)? {
            let ann = cfg.annotations.join(format!("{stem}.xml"));
            let text = std::fs::read_to_string(&ann).map_err(|e| Error::io(&ann, e))?;
            let file = format!("{stem}.{}", cfg.extension);
            let foggy = cfg.images.join(&file);
            require_file(&foggy)?;
            let clear = cfg.clear_images.as_ref().map(|d| d.join(&file));
            records.push(ManifestRecord {
                id: stem.clone(),
                split: *split,
                foggy_path: foggy,
                clear_path: clear,
                depth_path: None,
                depth_range: None,
                gt_boxes: parse_voc(&text, &ann)?,
                beta: None,
                airlight: None,
            });
        }
    }
    finish(records, out_root)
}

/// Cityscapes-style: `gtFine/<split>/<city>/<name>_gtFine_polygons.json`,
/// clear `leftImg8bit/.../<name>_leftImg8bit.png`, foggy
/// `leftImg8bit_foggy/.../<name>_leftImg8bit_foggy_beta_<beta>.png`.
/// List entries are `<split>/<city>/<name>`.
#[derive(Clone, Debug)]
pub struct CityscapesImport {
    pub root: PathBuf,
    /// Beta suffix as it appears in file names, e.g. `0.02`.
    pub beta: String,
    /// Source label to manifest class. Labels not listed are dropped.
    pub classes: BTreeMap<String, String>,
    pub splits: Vec<(Split, PathBuf)>,
}

#[derive(Deserialize)]
struct CsPolygons {
    objects: Vec<CsObject>,
}

#[derive(Deserialize)]
struct CsObject {
    label: String,
    polygon: Vec<[f64; 2]>,
}

/// Axis-aligned boxes around the kept polygons. Vertices are pixel
/// corners, so the upper edges are exclusive.
pub fn parse_cityscapes(
    text: &str,
    origin: &Path,
    classes: &BTreeMap<String, String>,
) -> Result<Vec<GroundTruthBox>> {
    let doc: CsPolygons = serde_json::from_str(text).map_err(|e| Error::Parse {
        path: origin.to_path_buf(),
        line: e.line(),
        reason: e.to_string(),
    })?;
    let mut out = Vec::new();
    for obj in doc.objects {
        let Some(cls) = classes.get(&obj.label) else {
            continue;
        };
        if obj.polygon.is_empty() {
            continue;
        }
        let (mut x0, mut y0) = (f64::INFINITY, f64::INFINITY);
        let (mut x1, mut y1) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for [x, y] in obj.polygon {
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
        }
        if x1 > x0 && y1 > y0 {
            out.push(GroundTruthBox {
                cls: cls.clone(),
                x0,
                y0,
                x1,
                y1,
            });
        }
    }
    Ok(out)
}

pub fn default_cityscapes_classes() -> BTreeMap<String, String> {
    [
        ("car", "vehicle"),
        ("truck", "vehicle"),
        ("bus", "vehicle"),
        ("person", "person"),
        ("rider", "person"),
        ("traffic sign", "sign"),
    ]
    .into_iter()
    .map(|(a, b)| (a.to_string(), b.to_string()))
    .collect()
}

pub fn import_cityscapes(cfg: &CityscapesImport, out_root: &Path) -> Result<DatasetManifest> {
    let mut records = Vec::new();
    for (split, list) in &cfg.splits {
        for entry in read_split_list(list)? {
            let rel = Path::new(&entry);
            let name = rel
                .file_name()
                .and_then(|n| n.to_str())
                .ok_or_else(|| Error::domain(format!("bad list entry {entry}")))?;
            let parent = rel.parent().unwrap_or(Path::new(""));
            let gt = cfg
                .root
                .join("gtFine")
                .join(parent)
                .join(format!("{name}_gtFine_polygons.json"));
            let clear = cfg
                .root
                .join("leftImg8bit")
                .join(parent)
                .join(format!("{name}_leftImg8bit.png"));
            let foggy = cfg
                .root
                .join("leftImg8bit_foggy")
                .join(parent)
                .join(format!("{name}_leftImg8bit_foggy_beta_{}.png", cfg.beta));
            let text = std::fs::read_to_string(&gt).map_err(|e| Error::io(&gt, e))?;
            records.push(ManifestRecord {
                id: entry.replace('/', "_"),
                split: *split,
                foggy_path: foggy,
                clear_path: clear.is_file().then_some(clear),
                depth_path: None,
                depth_range: None,
                gt_boxes: parse_cityscapes(&text, &gt, &cfg.classes)?,
                beta: cfg.beta.parse().ok(),
                airlight: None,
            });
        }
    }
    finish(records, out_root)
}
