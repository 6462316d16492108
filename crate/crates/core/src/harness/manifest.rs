//! Newline-delimited JSON dataset manifests and synthetic dataset rendering.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{load_image, save_image, DepthMap, Image};
use crate::scatter::{apply_haze, synth_scene, transmission_from_depth, GroundTruthBox, HazeParams, SceneSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One image. Paths are relative to the manifest's directory unless absolute.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub split: Split,
    pub foggy_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clear_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth_path: Option<PathBuf>,
    /// `(min, max)` depth that the 8-bit depth PNG is scaled between.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth_range: Option<(f64, f64)>,
    pub gt_boxes: Vec<GroundTruthBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub airlight: Option<[f64; 3]>,
}

impl ManifestRecord {
    pub fn haze(&self) -> Option<HazeParams> {
        Some(HazeParams {
            beta: self.beta?,
            airlight: self.airlight?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    /// Directory that relative paths resolve against.
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn load_foggy(&self, r: &ManifestRecord) -> Result<Image> {
        load_image(self.resolve(&r.foggy_path))
    }

    pub fn load_clear(&self, r: &ManifestRecord) -> Result<Option<Image>> {
        r.clear_path
            .as_ref()
            .map(|p| load_image(self.resolve(p)))
            .transpose()
    }

    pub fn load_depth(&self, r: &ManifestRecord) -> Result<Option<DepthMap>> {
        match (&r.depth_path, r.depth_range) {
            (Some(p), Some(range)) => {
                let img = load_image(self.resolve(p))?;
                DepthMap::from_normalized(&img, range).map(Some)
            }
            _ => Ok(None),
        }
    }

    /// Checks id uniqueness and that every referenced file exists.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::domain(format!("duplicate manifest id {}", r.id)));
            }
            let paths = std::iter::once(&r.foggy_path)
                .chain(r.clear_path.iter())
                .chain(r.depth_path.iter());
            for p in paths {
                let full = self.resolve(p);
                if !full.is_file() {
                    return Err(Error::io(
                        full,
                        std::io::Error::new(std::io::ErrorKind::NotFound, "referenced file missing"),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }
}

/// Parses a manifest file and validates it. Relative paths resolve against
/// the file's directory.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        records.push(rec);
    }
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let m = DatasetManifest { root, records };
    m.validate()?;
    Ok(m)
}

/// Seed for the `index`-th scene of a dataset rooted at `seed`.
pub fn scene_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(index.wrapping_mul(0xbf58_476d_1ce4_e5b9))
        .wrapping_add(0x94d0_49bb_1331_11eb);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Renders one scene to PNGs. The foggy image is computed from the
/// quantized clear image and quantized depth, so reloading the files and
/// re-applying the haze reproduces the foggy PNG byte for byte.
fn render_record(
    dir: &Path,
    id: &str,
    split: Split,
    seed: u64,
    spec: &SceneSpec,
) -> Result<ManifestRecord> {
    let s = synth_scene(seed, spec)?;
    let clear = Image::from_bytes(s.clear.height(), s.clear.width(), 3, &s.clear.to_bytes())?;
    let (depth_img, range) = s.depth.normalized();
    let depth_img = Image::from_bytes(depth_img.height(), depth_img.width(), 1, &depth_img.to_bytes())?;
    let depth = DepthMap::from_normalized(&depth_img, range)?;
    let t = transmission_from_depth(&depth, s.haze.beta)?;
    let foggy = apply_haze(&clear, &t, &s.haze)?;

    let rel = |kind: &str| PathBuf::from(kind).join(format!("{id}.png"));
    let rec = ManifestRecord {
        id: id.to_string(),
        split,
        foggy_path: rel("foggy"),
        clear_path: Some(rel("clear")),
        depth_path: Some(rel("depth")),
        depth_range: Some(range),
        gt_boxes: s.boxes.clone(),
        beta: Some(s.haze.beta),
        airlight: Some(s.haze.airlight),
    };
    save_image(&foggy, dir.join(&rec.foggy_path))?;
    save_image(&clear, dir.join(rec.clear_path.as_ref().expect("set")))?;
    save_image(&depth_img, dir.join(rec.depth_path.as_ref().expect("set")))?;
    Ok(rec)
}

/// Renders `counts` scenes per split under `out_dir` and writes
/// `out_dir/manifest.jsonl`. Deterministic in `seed`.
pub fn materialize_dataset(
    spec: &SceneSpec,
    counts: [(Split, usize); 3],
    seed: u64,
    out_dir: impl AsRef<Path>,
) -> Result<DatasetManifest> {
    let dir = out_dir.as_ref();
    spec.validate()?;
    for sub in ["foggy", "clear", "depth"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut jobs = Vec::new();
    let mut index = 0u64;
    for (split, n) in counts {
        for k in 0..n {
            jobs.push((format!("{split}-{k:05}"), split, scene_seed(seed, index)));
            index += 1;
        }
    }
    let records = jobs
        .par_iter()
        .map(|(id, split, s)| render_record(dir, id, *split, *s, spec))
        .collect::<Result<Vec<_>>>()?;
    let m = DatasetManifest {
        root: dir.to_path_buf(),
        records,
    };
    m.save(dir.join("manifest.jsonl"))?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> SceneSpec {
        SceneSpec {
            width: 24,
            height: 20,
            min_object_size: 4,
            max_object_size: 6,
            ..SceneSpec::default()
        }
    }

    const COUNTS: [(Split, usize); 3] = [(Split::Train, 2), (Split::Val, 1), (Split::Test, 1)];

    #[test]
    fn counts_and_unique_ids() {
        let dir = tempfile::tempdir().unwrap();
        let m = materialize_dataset(&tiny(), COUNTS, 3, dir.path()).unwrap();
        assert_eq!(m.records.len(), 4);
        assert_eq!(m.split(Split::Train).len(), 2);
        assert_eq!(m.split(Split::Val).len(), 1);
        assert_eq!(m.split(Split::Test).len(), 1);
        let loaded = load_manifest(dir.path().join("manifest.jsonl")).unwrap();
        assert_eq!(loaded.records, m.records);
    }

    #[test]
    fn rerun_is_byte_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        materialize_dataset(&tiny(), COUNTS, 8, a.path()).unwrap();
        let m = materialize_dataset(&tiny(), COUNTS, 8, b.path()).unwrap();
        let read = |d: &Path, p: &Path| std::fs::read(d.join(p)).unwrap();
        assert_eq!(
            read(a.path(), Path::new("manifest.jsonl")),
            read(b.path(), Path::new("manifest.jsonl"))
        );
        for r in &m.records {
            assert_eq!(read(a.path(), &r.foggy_path), read(b.path(), &r.foggy_path));
            assert_eq!(read(a.path(), &r.depth_path.clone().unwrap()), read(b.path(), &r.depth_path.clone().unwrap()));
        }
    }

    #[test]
    fn foggy_files_follow_the_scattering_model() {
        let dir = tempfile::tempdir().unwrap();
        let m = materialize_dataset(&tiny(), COUNTS, 5, dir.path()).unwrap();
        for r in &m.records {
            let clear = m.load_clear(r).unwrap().unwrap();
            let depth = m.load_depth(r).unwrap().unwrap();
            let haze = r.haze().unwrap();
            let t = transmission_from_depth(&depth, haze.beta).unwrap();
            let again = apply_haze(&clear, &t, &haze).unwrap();
            assert_eq!(again.to_bytes(), m.load_foggy(r).unwrap().to_bytes());
        }
    }

    #[test]
    fn duplicate_ids_and_missing_files_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m = materialize_dataset(&tiny(), COUNTS, 1, dir.path()).unwrap();
        let mut dup = m.clone();
        dup.records[1].id = dup.records[0].id.clone();
        assert!(matches!(dup.validate(), Err(Error::Domain(_))));
        let mut missing = m;
        missing.records[0].foggy_path = PathBuf::from("foggy/nope.png");
        assert!(matches!(missing.validate(), Err(Error::Io { .. })));
    }

    #[test]
    fn parse_error_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        std::fs::write(&p, "\n{\"id\": 3}\n").unwrap();
        match load_manifest(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }
}
