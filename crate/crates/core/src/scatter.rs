//! Homogeneous fog synthesis, seeded synthetic scenes, and the haze index.
//!
//! Fog follows the standard scattering model: transmission `t = exp(-β d)`
//! and observed radiance `I = J t + A (1 - t)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{gaussian_blur_plane, to_luma, DepthMap, Image, Raster, LUMA_WEIGHTS};

/// Denominator guard for [`ideal_k`]; `I = 1` is a pole of the K parameterization.
pub const IDEAL_K_EPS: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HazeParams {
    pub beta: f64,
    pub airlight: [f64; 3],
}

impl HazeParams {
    pub fn new(beta: f64, airlight: [f64; 3]) -> Result<Self> {
        let p = Self { beta, airlight };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.beta.is_finite() || self.beta < 0.0 {
            return Err(Error::domain(format!("beta must be >= 0, got {}", self.beta)));
        }
        if self.airlight.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::domain(format!(
                "airlight must lie in [0, 1], got {:?}",
                self.airlight
            )));
        }
        Ok(())
    }

    /// Airlight as seen by an image with `channels` channels.
    pub fn airlight_for(&self, channels: usize) -> Vec<f64> {
        if channels == 1 {
            vec![LUMA_WEIGHTS
                .iter()
                .zip(&self.airlight)
                .map(|(w, a)| w * a)
                .sum::<f64>()
                .clamp(0.0, 1.0)]
        } else {
            self.airlight.to_vec()
        }
    }
}

pub fn transmission_from_depth(depth: &DepthMap, beta: f64) -> Result<Image> {
    if !beta.is_finite() || beta < 0.0 {
        return Err(Error::domain(format!("beta must be >= 0, got {beta}")));
    }
    let data = depth.data().iter().map(|&d| (-beta * d).exp()).collect();
    Image::new(depth.height(), depth.width(), 1, data)
}

/// Composites fog over `clear`. `t = 0` is accepted and yields pure airlight.
pub fn apply_haze(clear: &Image, t: &Image, haze: &HazeParams) -> Result<Image> {
    check_transmission(clear, t)?;
    haze.validate()?;
    let c = clear.channels();
    let airlight = haze.airlight_for(c);
    let data = clear
        .data()
        .chunks_exact(c)
        .zip(t.data())
        .flat_map(|(px, &tt)| {
            px.iter()
                .zip(&airlight)
                .map(move |(&j, &a)| (j * tt + a * (1.0 - tt)).clamp(0.0, 1.0))
                .collect::<Vec<_>>()
        })
        .collect();
    Image::new(clear.height(), clear.width(), c, data)
}

fn check_transmission(img: &Image, t: &Image) -> Result<()> {
    if t.channels() != 1 || t.height() != img.height() || t.width() != img.width() {
        return Err(Error::shape(format!(
            "transmission {:?} does not match image {:?}",
            t.shape(),
            img.shape()
        )));
    }
    Ok(())
}

/// Exact K map for known fog, plus which samples hit the denominator guard.
#[derive(Clone, Debug)]
pub struct IdealK {
    pub k: Raster,
    pub guarded: Vec<bool>,
}

/// Solves `K·I − K + b = J` for the K that undoes known fog.
pub fn ideal_k(foggy: &Image, t: &Image, haze: &HazeParams, b: f64) -> Result<IdealK> {
    check_transmission(foggy, t)?;
    if t.data().iter().any(|&v| v <= 0.0) {
        return Err(Error::domain("transmission must be strictly positive"));
    }
    let c = foggy.channels();
    let airlight = haze.airlight_for(c);
    let mut k = Vec::with_capacity(foggy.data().len());
    let mut guarded = Vec::with_capacity(foggy.data().len());
    for (px, &tt) in foggy.data().chunks_exact(c).zip(t.data()) {
        for (&i, &a) in px.iter().zip(&airlight) {
            let mut denom = i - 1.0;
            let guard = denom.abs() <= IDEAL_K_EPS;
            if guard {
                denom = if denom > 0.0 { IDEAL_K_EPS } else { -IDEAL_K_EPS };
            }
            k.push(((i - a) / tt + (a - b)) / denom);
            guarded.push(guard);
        }
    }
    Ok(IdealK {
        k: Raster::new(foggy.height(), foggy.width(), c, k)?,
        guarded,
    })
}

/// Closed object vocabulary shared by the renderer and the toy detector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectClass {
    Vehicle,
    Person,
    Sign,
}

impl ObjectClass {
    pub const ALL: [ObjectClass; 3] = [ObjectClass::Vehicle, ObjectClass::Person, ObjectClass::Sign];

    pub fn as_str(self) -> &'static str {
        match self {
            ObjectClass::Vehicle => "vehicle",
            ObjectClass::Person => "person",
            ObjectClass::Sign => "sign",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.as_str() == s)
    }

    /// Base paint color; all three sit well above luma 0.6.
    pub fn color(self) -> [f64; 3] {
        match self {
            ObjectClass::Vehicle => [1.0, 0.55, 0.45],
            ObjectClass::Person => [0.55, 1.0, 0.55],
            ObjectClass::Sign => [0.55, 0.7, 1.0],
        }
    }

    pub fn hue(self) -> f64 {
        let [r, g, b] = self.color();
        hue_degrees(r, g, b)
    }

    pub fn shape(self) -> Shape {
        match self {
            ObjectClass::Vehicle => Shape::Rectangle,
            ObjectClass::Person | ObjectClass::Sign => Shape::Ellipse,
        }
    }
}

impl std::fmt::Display for ObjectClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Hue in degrees `[0, 360)`; zero for achromatic input.
pub fn hue_degrees(r: f64, g: f64, b: f64) -> f64 {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    if d <= 0.0 {
        return 0.0;
    }
    let h = if max == r {
        ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        (b - r) / d + 2.0
    } else {
        (r - g) / d + 4.0
    };
    (h * 60.0).rem_euclid(360.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Rectangle,
    Ellipse,
}

/// Axis-aligned annotation; `x1`/`y1` are exclusive pixel edges.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruthBox {
    pub cls: String,
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl GroundTruthBox {
    pub fn area(&self) -> f64 {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    pub fn bounds(&self) -> [f64; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_object_size: usize,
    pub max_object_size: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub airlight_min: f64,
    pub airlight_max: f64,
    /// Per-channel airlight jitter around the sampled gray level.
    pub airlight_tint: f64,
    pub depth_near: f64,
    pub depth_far: f64,
    pub background_level: f64,
    pub texture_amplitude: f64,
    /// When set, every scene uses this fog instead of sampling one.
    pub fixed_haze: Option<HazeParams>,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            min_objects: 1,
            max_objects: 4,
            min_object_size: 8,
            max_object_size: 16,
            beta_min: 0.3,
            beta_max: 1.2,
            airlight_min: 0.75,
            airlight_max: 0.95,
            airlight_tint: 0.02,
            depth_near: 0.5,
            depth_far: 2.0,
            background_level: 0.18,
            texture_amplitude: 0.04,
            fixed_haze: None,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::domain("scene size must be positive"));
        }
        if self.min_objects > self.max_objects {
            return Err(Error::domain("min_objects exceeds max_objects"));
        }
        if self.min_object_size == 0 || self.min_object_size > self.max_object_size {
            return Err(Error::domain("invalid object size range"));
        }
        if !(0.0 <= self.beta_min && self.beta_min <= self.beta_max) {
            return Err(Error::domain("invalid beta range"));
        }
        if !(0.0 <= self.airlight_min && self.airlight_min <= self.airlight_max && self.airlight_max <= 1.0)
        {
            return Err(Error::domain("invalid airlight range"));
        }
        if !(0.0 <= self.depth_near && self.depth_near <= self.depth_far) {
            return Err(Error::domain("invalid depth range"));
        }
        if let Some(h) = &self.fixed_haze {
            h.validate()?;
        }
        Ok(())
    }
}

/// One object to paint: a class and its bounding rectangle (exclusive upper edges).
#[derive(Clone, Debug, PartialEq)]
pub struct PlacedObject {
    pub class: ObjectClass,
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
    /// Multiplier on the class paint color.
    pub shade: f64,
}

impl PlacedObject {
    fn covers(&self, y: usize, x: usize) -> bool {
        if x < self.x0 || x >= self.x1 || y < self.y0 || y >= self.y1 {
            return false;
        }
        match self.class.shape() {
            Shape::Rectangle => true,
            Shape::Ellipse => {
                let rx = (self.x1 - self.x0) as f64 / 2.0;
                let ry = (self.y1 - self.y0) as f64 / 2.0;
                let dx = (x as f64 + 0.5 - self.x0 as f64 - rx) / rx;
                let dy = (y as f64 + 0.5 - self.y0 as f64 - ry) / ry;
                dx * dx + dy * dy <= 1.0
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub id: String,
    pub clear: Image,
    pub depth: DepthMap,
    pub haze: HazeParams,
    pub boxes: Vec<GroundTruthBox>,
}

impl SceneSample {
    pub fn transmission(&self) -> Image {
        transmission_from_depth(&self.depth, self.haze.beta).expect("haze validated at synthesis")
    }

    pub fn foggy(&self) -> Image {
        apply_haze(&self.clear, &self.transmission(), &self.haze).expect("shapes agree by construction")
    }
}

fn ground_depth(spec: &SceneSpec, y: usize) -> f64 {
    let frac = if spec.height > 1 {
        y as f64 / (spec.height - 1) as f64
    } else {
        1.0
    };
    spec.depth_far - (spec.depth_far - spec.depth_near) * frac
}

/// Paints `objects` over a seeded textured background. Boxes are the exact
/// pixel extents of what was painted.
pub fn render_scene(seed: u64, spec: &SceneSpec, objects: &[PlacedObject]) -> Result<SceneSample> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let haze = match &spec.fixed_haze {
        Some(fixed) => fixed.clone(),
        None => {
            let beta = rng.gen_range(spec.beta_min..=spec.beta_max);
            let base = rng.gen_range(spec.airlight_min..=spec.airlight_max);
            let mut airlight = [0.0; 3];
            for a in airlight.iter_mut() {
                let jitter = if spec.airlight_tint > 0.0 {
                    rng.gen_range(-spec.airlight_tint..=spec.airlight_tint)
                } else {
                    0.0
                };
                *a = (base + jitter).clamp(0.0, 1.0);
            }
            HazeParams::new(beta, airlight)?
        }
    };

    // coarse value noise for low-frequency variation, bilinearly upsampled
    const GRID: usize = 5;
    let coarse: Vec<f64> = (0..GRID * GRID).map(|_| rng.gen_range(-1.0..=1.0)).collect();
    let tint: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-0.02..=0.02));
    let mut data = vec![0.0; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            let gy = y as f64 / h.max(2) as f64 * (GRID - 1) as f64;
            let gx = x as f64 / w.max(2) as f64 * (GRID - 1) as f64;
            let (iy, ix) = (gy.floor() as usize, gx.floor() as usize);
            let (fy, fx) = (gy - iy as f64, gx - ix as f64);
            let at = |yy: usize, xx: usize| coarse[yy.min(GRID - 1) * GRID + xx.min(GRID - 1)];
            let smooth = (1.0 - fy) * ((1.0 - fx) * at(iy, ix) + fx * at(iy, ix + 1))
                + fy * ((1.0 - fx) * at(iy + 1, ix) + fx * at(iy + 1, ix + 1));
            let fine = if spec.texture_amplitude > 0.0 {
                rng.gen_range(-spec.texture_amplitude..=spec.texture_amplitude)
            } else {
                0.0
            };
            let level = spec.background_level + 0.06 * smooth + fine;
            for c in 0..3 {
                data[(y * w + x) * 3 + c] = (level + tint[c]).clamp(0.0, 1.0);
            }
        }
    }

    let mut depth: Vec<f64> = (0..h * w).map(|i| ground_depth(spec, i / w)).collect();
    let mut boxes = Vec::with_capacity(objects.len());
    for obj in objects {
        if obj.x1 > w || obj.y1 > h || obj.x0 >= obj.x1 || obj.y0 >= obj.y1 {
            return Err(Error::domain(format!("object {obj:?} outside {w}x{h} scene")));
        }
        let color = obj.class.color();
        let obj_depth = ground_depth(spec, obj.y1 - 1);
        let (mut bx0, mut by0, mut bx1, mut by1) = (usize::MAX, usize::MAX, 0, 0);
        for y in obj.y0..obj.y1 {
            for x in obj.x0..obj.x1 {
                if obj.covers(y, x) {
                    for c in 0..3 {
                        data[(y * w + x) * 3 + c] = (color[c] * obj.shade).clamp(0.0, 1.0);
                    }
                    depth[y * w + x] = obj_depth;
                    bx0 = bx0.min(x);
                    by0 = by0.min(y);
                    bx1 = bx1.max(x + 1);
                    by1 = by1.max(y + 1);
                }
            }
        }
        if bx1 > bx0 && by1 > by0 {
            boxes.push(GroundTruthBox {
                cls: obj.class.as_str().to_string(),
                x0: bx0 as f64,
                y0: by0 as f64,
                x1: bx1 as f64,
                y1: by1 as f64,
            });
        }
    }

    Ok(SceneSample {
        id: format!("scene-{seed:08}"),
        clear: Image::new(h, w, 3, data)?,
        depth: DepthMap::new(h, w, depth)?,
        haze,
        boxes,
    })
}

/// Samples a non-overlapping object layout (two-pixel gap, one-pixel border)
/// and renders it. Pure in `(seed, spec)`.
pub fn synth_scene(seed: u64, spec: &SceneSpec) -> Result<SceneSample> {
    spec.validate()?;
    // layout draws use a derived stream so the render stream stays aligned
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let count = rng.gen_range(spec.min_objects..=spec.max_objects);
    let mut placed: Vec<PlacedObject> = Vec::with_capacity(count);
    let max_size = spec.max_object_size.min(spec.width.saturating_sub(2)).min(spec.height.saturating_sub(2));
    if count > 0 && max_size < spec.min_object_size {
        return Err(Error::domain("scene too small for requested object sizes"));
    }
    for _ in 0..count {
        for _attempt in 0..200 {
            let class = ObjectClass::ALL[rng.gen_range(0..ObjectClass::ALL.len())];
            let a = rng.gen_range(spec.min_object_size..=max_size);
            let b = rng.gen_range(spec.min_object_size..=max_size);
            let (ow, oh) = match class {
                ObjectClass::Vehicle => (a.max(b), a.min(b)),
                ObjectClass::Person => (a.min(b), a.max(b)),
                ObjectClass::Sign => (a, a),
            };
            let x0 = rng.gen_range(1..=spec.width - 1 - ow);
            let y0 = rng.gen_range(1..=spec.height - 1 - oh);
            let shade = rng.gen_range(0.95..=1.0);
            let cand = PlacedObject {
                class,
                x0,
                y0,
                x1: x0 + ow,
                y1: y0 + oh,
                shade,
            };
            let clash = placed.iter().any(|p| {
                cand.x0 < p.x1 + 2 && p.x0 < cand.x1 + 2 && cand.y0 < p.y1 + 2 && p.y0 < cand.y1 + 2
            });
            if !clash {
                placed.push(cand);
                break;
            }
        }
    }
    render_scene(seed, spec, &placed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HazeIndexConfig {
    pub w_contrast: f64,
    pub w_brightness: f64,
    pub w_texture: f64,
    pub contrast_norm: f64,
    pub texture_norm: f64,
}

impl Default for HazeIndexConfig {
    fn default() -> Self {
        Self {
            w_contrast: 0.4,
            w_brightness: 0.2,
            w_texture: 0.4,
            contrast_norm: 0.05,
            texture_norm: 0.005,
        }
    }
}

/// Scale of the blur subtracted before measuring contrast.
pub const LOCAL_CONTRAST_SIGMA: f64 = 2.0;

/// Luma statistics feeding the haze index.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HazeStats {
    /// RMS of luma minus its Gaussian blur, over pixels clear of the border.
    /// Smooth airlight gradients from depth-varying fog cancel out here,
    /// whereas they would inflate a global standard deviation.
    pub contrast: f64,
    pub brightness: f64,
    pub texture: f64,
}

pub fn haze_stats(img: &Image) -> HazeStats {
    let luma = to_luma(img);
    let v = luma.data();
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;

    let (h, w) = (luma.height(), luma.width());
    let mut lap = Vec::new();
    if h >= 3 && w >= 3 {
        lap.reserve((h - 2) * (w - 2));
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                let c = v[y * w + x];
                lap.push(
                    v[(y - 1) * w + x] + v[(y + 1) * w + x] + v[y * w + x - 1] + v[y * w + x + 1]
                        - 4.0 * c,
                );
            }
        }
    }
    let texture = if lap.is_empty() {
        0.0
    } else {
        let m = lap.iter().sum::<f64>() / lap.len() as f64;
        lap.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / lap.len() as f64
    };
    HazeStats {
        contrast: local_contrast(v, h, w),
        brightness: mean,
        texture,
    }
}

fn local_contrast(v: &[f64], h: usize, w: usize) -> f64 {
    let blur = gaussian_blur_plane(v, h, w, LOCAL_CONTRAST_SIGMA);
    let r = (3.0 * LOCAL_CONTRAST_SIGMA).ceil() as usize;
    let (ys, xs) = if h > 2 * r && w > 2 * r {
        (r..h - r, r..w - r)
    } else {
        (0..h, 0..w)
    };
    let (mut sum, mut n) = (0.0, 0usize);
    for y in ys {
        for x in xs.clone() {
            let d = v[y * w + x] - blur[y * w + x];
            sum += d * d;
            n += 1;
        }
    }
    (sum / n as f64).sqrt()
}

/// Scalar haziness estimate in `[0, 1]` (for weights summing to one).
pub fn haze_index(img: &Image, cfg: &HazeIndexConfig) -> f64 {
    let s = haze_stats(img);
    let low_contrast = 1.0 - (s.contrast / cfg.contrast_norm).min(1.0);
    let low_texture = 1.0 - (s.texture / cfg.texture_norm).min(1.0);
    (cfg.w_contrast * low_contrast + cfg.w_brightness * s.brightness + cfg.w_texture * low_texture)
        .clamp(0.0, 1.0)
}
