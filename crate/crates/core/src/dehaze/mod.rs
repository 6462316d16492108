//! K-formulation dehazer with an ROI-driven spatial attention head.
//!
//! The K-estimator maps a foggy image `I` to a per-pixel map `K` and the
//! clear image is recovered as `J = K·I − K + b`. The attention head reads
//! `[K, roi]` and produces `M ∈ (0, 1)`; with floor `λ` the gate
//! `M' = λ + (1 − λ)·M` blends K toward the identity map (`K = 1` leaves
//! the pixel untouched when `b = 1`):
//!
//! ```text
//! K̂ = M'·K + (1 − M')
//! J = clamp(K̂·I − K̂ + b, 0, 1)
//! ```

pub mod conv;
pub mod net;
pub mod train;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detect::Detection;
use crate::error::{Error, Result};
use crate::imaging::{gaussian_blur_plane, Image, Raster};
use conv::{Conv2d, ConvGrad};
use net::{AttentionHead, KEstimator, ATTN_HIDDEN, K_WIDTH};

pub use train::{train_dehazer, EpochRecord, TrainConfig, TrainHistory, TrainPhase, TrainSample};

pub const PARAMS_FORMAT: &str = "fogsight-dehazer";
pub const PARAMS_VERSION: &str = "aodx-1";

pub const LAYER_NAMES: [&str; 7] = [
    "k.conv1", "k.conv2", "k.conv3", "k.conv4", "k.conv5", "attn.conv1", "attn.conv2",
];
/// Layers `0..K_LAYERS` belong to the K-estimator, the rest to the attention head.
pub const K_LAYERS: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct DehazerParams {
    pub k_net: KEstimator,
    pub attention: AttentionHead,
    pub b: f64,
    pub version: String,
}

impl DehazerParams {
    pub fn layer(&self, idx: usize) -> &Conv2d {
        match idx {
            0 => &self.k_net.conv1,
            1 => &self.k_net.conv2,
            2 => &self.k_net.conv3,
            3 => &self.k_net.conv4,
            4 => &self.k_net.conv5,
            5 => &self.attention.conv1,
            6 => &self.attention.conv2,
            _ => panic!("layer index {idx} out of range"),
        }
    }

    pub fn layer_mut(&mut self, idx: usize) -> &mut Conv2d {
        match idx {
            0 => &mut self.k_net.conv1,
            1 => &mut self.k_net.conv2,
            2 => &mut self.k_net.conv3,
            3 => &mut self.k_net.conv4,
            4 => &mut self.k_net.conv5,
            5 => &mut self.attention.conv1,
            6 => &mut self.attention.conv2,
            _ => panic!("layer index {idx} out of range"),
        }
    }

    pub fn param_count(&self) -> usize {
        (0..LAYER_NAMES.len()).map(|i| self.layer(i).param_count()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.b.is_finite()
            && (0..LAYER_NAMES.len()).all(|i| {
                let l = self.layer(i);
                l.weight.iter().chain(&l.bias).all(|v| v.is_finite())
            })
    }

    /// A K-estimator that outputs `K ≡ 1`, i.e. the identity dehazer.
    pub fn identity() -> Self {
        let mut p = init_dehazer(0);
        for i in 0..K_LAYERS {
            let l = p.layer_mut(i);
            l.weight.iter_mut().for_each(|w| *w = 0.0);
            l.bias.iter_mut().for_each(|b| *b = 0.0);
        }
        p.k_net.conv5.bias.iter_mut().for_each(|b| *b = 1.0);
        p
    }
}

/// Seeded initialization. Hidden layers use fan-in scaled uniform weights;
/// the last K stage starts near zero with unit bias so the initial model is
/// close to the identity. The attention head starts with one hidden unit
/// reading the ROI channel, giving `M ≈ 0.27` off-ROI and `M ≈ 0.73` on it;
/// without that prior the sigmoid tends to saturate before the ROI is used.
pub fn init_dehazer(seed: u64) -> DehazerParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layer = |cin: usize, cout: usize, k: usize, gain: f64, bias: f64| {
        let std = gain / ((cin * k * k) as f64).sqrt();
        let mut c = Conv2d::random(cin, cout, k, std, &mut rng);
        c.bias.iter_mut().for_each(|b| *b = bias);
        c
    };
    let k_net = KEstimator {
        conv1: layer(3, K_WIDTH, 1, 1.0, 0.1),
        conv2: layer(K_WIDTH, K_WIDTH, 3, 1.0, 0.1),
        conv3: layer(2 * K_WIDTH, K_WIDTH, 5, 1.0, 0.1),
        conv4: layer(2 * K_WIDTH, K_WIDTH, 7, 1.0, 0.1),
        conv5: layer(4 * K_WIDTH, K_WIDTH, 3, 0.1, 1.0),
    };
    let mut attention = AttentionHead {
        conv1: layer(K_WIDTH + 1, ATTN_HIDDEN, 3, 0.2, 0.0),
        conv2: layer(ATTN_HIDDEN, 1, 3, 0.2, 0.0),
    };
    // center taps: roi channel -> hidden 0 -> output
    attention.conv1.weight[K_WIDTH * 9 + 4] = 1.0;
    attention.conv2.weight[4] = 2.0;
    attention.conv2.bias[0] = -1.0;
    DehazerParams {
        k_net,
        attention,
        b: 1.0,
        version: PARAMS_VERSION.to_string(),
    }
}

/// Per-pixel ROI weight in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RoiMask {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl RoiMask {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width || height == 0 || width == 0 {
            return Err(Error::shape("roi mask buffer does not match dimensions"));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::domain("roi mask values must lie in [0, 1]"));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![1.0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    pub fn to_image(&self) -> Image {
        Image::new(self.height, self.width, 1, self.data.clone()).expect("mask is in range")
    }
}

/// Paints detection boxes into a mask. Each box grows by
/// `margin·max(w, h)` per side, is clipped, and fills pixels whose centers it
/// covers with its confidence; overlaps keep the maximum. A Gaussian of
/// width `feather` softens the edges.
pub fn rasterize_rois(
    boxes: &[Detection],
    height: usize,
    width: usize,
    margin: f64,
    feather: f64,
) -> Result<RoiMask> {
    if height == 0 || width == 0 {
        return Err(Error::domain("roi mask dimensions must be positive"));
    }
    if !(margin >= 0.0) || !(feather >= 0.0) {
        return Err(Error::domain("margin and feather must be non-negative"));
    }
    let mut data = vec![0.0; height * width];
    for d in boxes {
        let grow = margin * (d.x1 - d.x0).max(d.y1 - d.y0);
        let x0 = (d.x0 - grow).max(0.0);
        let y0 = (d.y0 - grow).max(0.0);
        let x1 = (d.x1 + grow).min(width as f64);
        let y1 = (d.y1 + grow).min(height as f64);
        if !(x0 < x1 && y0 < y1) {
            continue;
        }
        let conf = d.confidence.clamp(0.0, 1.0);
        // first/last pixel whose center lies in [lo, hi)
        let first = |lo: f64| (lo - 0.5).ceil().max(0.0) as usize;
        let last = |hi: f64, n: usize| ((hi - 0.5).ceil().max(0.0) as usize).min(n);
        for y in first(y0)..last(y1, height) {
            for x in first(x0)..last(x1, width) {
                let v = &mut data[y * width + x];
                *v = f64::max(*v, conf);
            }
        }
    }
    let mut data = gaussian_blur_plane(&data, height, width, feather);
    data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    RoiMask::new(height, width, data)
}

pub(crate) fn to_planar(img: &Image) -> Vec<f64> {
    let (h, w, c) = img.shape();
    let mut out = vec![0.0; h * w * c];
    for (p, px) in img.data().chunks_exact(c).enumerate() {
        for (ch, &v) in px.iter().enumerate() {
            out[ch * h * w + p] = v;
        }
    }
    out
}

pub(crate) fn to_interleaved(planar: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w * c];
    for ch in 0..c {
        for p in 0..h * w {
            out[p * c + ch] = planar[ch * h * w + p];
        }
    }
    out
}

fn require_rgb(img: &Image) -> Result<()> {
    if img.channels() != 3 {
        return Err(Error::domain(format!(
            "dehazer expects an RGB image, got {} channel(s)",
            img.channels()
        )));
    }
    Ok(())
}

/// Which forward path to run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Variant {
    /// K-estimator only.
    Aod,
    /// K-estimator gated by the attention head with floor `lambda_min`.
    Aodx { lambda_min: f64 },
}

pub(crate) struct Forward {
    pub k: net::KCache,
    pub attn: Option<net::AttnCache>,
    /// Per-pixel gate `M'`, present for the attention path.
    pub gate: Option<Vec<f64>>,
    /// Unclamped output, planar.
    pub pre: Vec<f64>,
}

pub(crate) fn run_forward(
    params: &DehazerParams,
    input: &[f64],
    roi: Option<&[f64]>,
    variant: Variant,
    h: usize,
    w: usize,
) -> Forward {
    let hw = h * w;
    let k = params.k_net.forward(input, h, w);
    let (attn, gate) = match variant {
        Variant::Aod => (None, None),
        Variant::Aodx { lambda_min } => {
            let zeros;
            let roi = match roi {
                Some(r) => r,
                None => {
                    zeros = vec![0.0; hw];
                    &zeros
                }
            };
            let a = params.attention.forward(&k.k, roi, h, w);
            let gate: Vec<f64> = a.m.iter().map(|m| lambda_min + (1.0 - lambda_min) * m).collect();
            (Some(a), Some(gate))
        }
    };
    let mut pre = vec![0.0; 3 * hw];
    for c in 0..3 {
        for p in 0..hw {
            let kv = k.k[c * hw + p];
            let khat = match &gate {
                Some(g) => g[p] * kv + (1.0 - g[p]),
                None => kv,
            };
            pre[c * hw + p] = khat * (input[c * hw + p] - 1.0) + params.b;
        }
    }
    Forward { k, attn, gate, pre }
}

fn clamp_output(pre: &[f64], h: usize, w: usize) -> Result<Image> {
    if pre.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("dehazer produced non-finite output"));
    }
    let data: Vec<f64> = to_interleaved(pre, h, w, 3)
        .into_iter()
        .map(|v| v.clamp(0.0, 1.0))
        .collect();
    Image::new(h, w, 3, data)
}

/// The K map for `foggy`, H×W×3.
pub fn estimate_k(params: &DehazerParams, foggy: &Image) -> Result<Raster> {
    require_rgb(foggy)?;
    let (h, w) = (foggy.height(), foggy.width());
    let k = params.k_net.forward(&to_planar(foggy), h, w).k;
    Raster::new(h, w, 3, to_interleaved(&k, h, w, 3))
}

/// Applies `J = K·I − K + b` for a given K map (no network involved).
pub fn apply_k(k: &Raster, foggy: &Image, b: f64) -> Result<Image> {
    if (k.height, k.width, k.channels) != foggy.shape() {
        return Err(Error::shape("K map does not match image"));
    }
    let data = k
        .data
        .iter()
        .zip(foggy.data())
        .map(|(&kv, &i)| (kv * (i - 1.0) + b).clamp(0.0, 1.0))
        .collect();
    Image::new(foggy.height(), foggy.width(), foggy.channels(), data)
}

/// Global dehazing with the K-estimator alone.
pub fn dehaze_aod(params: &DehazerParams, foggy: &Image) -> Result<Image> {
    require_rgb(foggy)?;
    let (h, w) = (foggy.height(), foggy.width());
    let f = run_forward(params, &to_planar(foggy), None, Variant::Aod, h, w);
    clamp_output(&f.pre, h, w)
}

fn check_aodx_inputs(foggy: &Image, roi: &RoiMask, lambda_min: f64) -> Result<()> {
    require_rgb(foggy)?;
    if roi.height() != foggy.height() || roi.width() != foggy.width() {
        return Err(Error::shape(format!(
            "roi {}x{} vs image {}x{}",
            roi.height(),
            roi.width(),
            foggy.height(),
            foggy.width()
        )));
    }
    if !(0.0..=1.0).contains(&lambda_min) {
        return Err(Error::domain(format!("lambda_min {lambda_min} outside [0, 1]")));
    }
    Ok(())
}

/// Attention-gated dehazing. With `lambda_min = 1` this is exactly
/// [`dehaze_aod`].
pub fn forward_aodx(
    params: &DehazerParams,
    foggy: &Image,
    roi: &RoiMask,
    lambda_min: f64,
) -> Result<Image> {
    Ok(forward_aodx_traced(params, foggy, roi, lambda_min)?.0)
}

/// Like [`forward_aodx`] but also returns the raw attention map `M`.
pub fn forward_aodx_traced(
    params: &DehazerParams,
    foggy: &Image,
    roi: &RoiMask,
    lambda_min: f64,
) -> Result<(Image, Image)> {
    check_aodx_inputs(foggy, roi, lambda_min)?;
    let (h, w) = (foggy.height(), foggy.width());
    let f = run_forward(
        params,
        &to_planar(foggy),
        Some(roi.data()),
        Variant::Aodx { lambda_min },
        h,
        w,
    );
    let m = f.attn.expect("attention path ran").m;
    let m = Image::from_clamped(h, w, 1, m)?;
    Ok((clamp_output(&f.pre, h, w)?, m))
}

/// Per-layer gradients in [`LAYER_NAMES`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct DehazerGrads {
    pub layers: Vec<ConvGrad>,
}

impl DehazerGrads {
    pub fn zeros(params: &DehazerParams) -> Self {
        Self {
            layers: (0..LAYER_NAMES.len())
                .map(|i| ConvGrad::zeros_like(params.layer(i)))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &DehazerGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.layers.iter_mut().for_each(|l| l.scale(s));
    }
}

/// Training loss for one sample.
///
/// `Aod` scores the reconstruction `mean((J − clear)²)`. `Aodx` scores the
/// gaze objective `Σ r·(J − clear)² / Σ r + Σ (1 − r)·(J − I)² / Σ (1 − r)`
/// (channel-averaged): restore inside the ROI, leave the rest as observed.
pub fn sample_loss(params: &DehazerParams, sample: &TrainSample, variant: Variant) -> Result<f64> {
    Ok(loss_impl(params, sample, variant, false)?.0)
}

pub fn sample_loss_and_grad(
    params: &DehazerParams,
    sample: &TrainSample,
    variant: Variant,
) -> Result<(f64, DehazerGrads)> {
    let (loss, grads) = loss_impl(params, sample, variant, true)?;
    Ok((loss, grads.expect("requested")))
}

fn loss_impl(
    params: &DehazerParams,
    sample: &TrainSample,
    variant: Variant,
    with_grad: bool,
) -> Result<(f64, Option<DehazerGrads>)> {
    require_rgb(&sample.foggy)?;
    sample.foggy.ensure_same_shape(&sample.clear, "training pair")?;
    let (h, w) = (sample.foggy.height(), sample.foggy.width());
    let hw = h * w;
    if let Some(r) = &sample.roi {
        if r.height() != h || r.width() != w {
            return Err(Error::shape("roi does not match training pair"));
        }
    }
    let input = to_planar(&sample.foggy);
    let clear = to_planar(&sample.clear);
    let roi = sample.roi.as_ref().map(|r| r.data());
    let f = run_forward(params, &input, roi, variant, h, w);

    // Gaze terms are normalized by their own mask mass so small ROIs are not
    // drowned out by the background.
    let (w_in, w_out) = match (variant, roi) {
        (Variant::Aod, _) => (0.0, 0.0),
        (Variant::Aodx { .. }, r) => {
            let mass: f64 = r.map_or(0.0, |r| r.iter().sum());
            (
                1.0 / (3.0 * mass.max(1.0)),
                1.0 / (3.0 * (hw as f64 - mass).max(1.0)),
            )
        }
    };
    let n = (3 * hw) as f64;
    let mut loss = 0.0;
    let mut d_out = vec![0.0; 3 * hw];
    for c in 0..3 {
        for p in 0..hw {
            let i = c * hw + p;
            let pre = f.pre[i];
            let j = pre.clamp(0.0, 1.0);
            let pass = pre > 0.0 && pre < 1.0;
            let (l, g) = match variant {
                Variant::Aod => {
                    let e = j - clear[i];
                    (e * e / n, 2.0 * e / n)
                }
                Variant::Aodx { .. } => {
                    let r = roi.map_or(0.0, |r| r[p]);
                    let ec = j - clear[i];
                    let ei = j - input[i];
                    let (a, b) = (r * w_in, (1.0 - r) * w_out);
                    (a * ec * ec + b * ei * ei, 2.0 * (a * ec + b * ei))
                }
            };
            loss += l;
            if pass {
                d_out[i] = g;
            }
        }
    }
    if !with_grad {
        return Ok((loss, None));
    }

    let mut d_k = vec![0.0; 3 * hw];
    let mut grads = DehazerGrads::zeros(params);
    match (&f.gate, &f.attn, variant) {
        (Some(gate), Some(attn), Variant::Aodx { lambda_min }) => {
            let mut d_m = vec![0.0; hw];
            for c in 0..3 {
                for p in 0..hw {
                    let i = c * hw + p;
                    let d_khat = d_out[i] * (input[i] - 1.0);
                    d_k[i] = d_khat * gate[p];
                    d_m[p] += d_khat * (f.k.k[i] - 1.0) * (1.0 - lambda_min);
                }
            }
            let (d_k_attn, attn_grads) = params.attention.backward(attn, h, w, &d_m);
            for (a, b) in d_k.iter_mut().zip(&d_k_attn) {
                *a += b;
            }
            let [a1, a2] = attn_grads;
            grads.layers[K_LAYERS] = a1;
            grads.layers[K_LAYERS + 1] = a2;
        }
        _ => {
            for i in 0..3 * hw {
                d_k[i] = d_out[i] * (input[i] - 1.0);
            }
        }
    }
    let k_grads = params.k_net.backward(&f.k, &input, h, w, d_k);
    for (slot, g) in grads.layers.iter_mut().zip(k_grads) {
        *slot = g;
    }
    Ok((loss, Some(grads)))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamsFile {
    format: String,
    version: String,
    b: f64,
    tensors: Vec<NamedTensor>,
}

/// Serializes to the JSON weight format described in the README.
pub fn params_to_json(params: &DehazerParams) -> String {
    let mut tensors = Vec::with_capacity(2 * LAYER_NAMES.len());
    for (i, name) in LAYER_NAMES.iter().enumerate() {
        let l = params.layer(i);
        tensors.push(NamedTensor {
            name: format!("{name}.weight"),
            shape: vec![l.out_ch, l.in_ch, l.kernel, l.kernel],
            values: l.weight.clone(),
        });
        tensors.push(NamedTensor {
            name: format!("{name}.bias"),
            shape: vec![l.out_ch],
            values: l.bias.clone(),
        });
    }
    let file = ParamsFile {
        format: PARAMS_FORMAT.to_string(),
        version: params.version.clone(),
        b: params.b,
        tensors,
    };
    let mut s = serde_json::to_string_pretty(&file).expect("params serialize");
    s.push('\n');
    s
}

pub fn params_from_json(text: &str, origin: &Path) -> Result<DehazerParams> {
    let bad = |reason: String| Error::Parse {
        path: origin.to_path_buf(),
        line: 0,
        reason,
    };
    let file: ParamsFile = serde_json::from_str(text).map_err(|e| Error::Parse {
        path: origin.to_path_buf(),
        line: e.line(),
        reason: e.to_string(),
    })?;
    if file.format != PARAMS_FORMAT {
        return Err(bad(format!("unexpected format tag {:?}", file.format)));
    }
    if file.tensors.len() != 2 * LAYER_NAMES.len() {
        return Err(bad(format!("expected {} tensors", 2 * LAYER_NAMES.len())));
    }
    let mut params = init_dehazer(0);
    params.b = file.b;
    params.version = file.version;
    for (i, name) in LAYER_NAMES.iter().enumerate() {
        let layer = params.layer_mut(i);
        for (suffix, dst, shape) in [
            (
                "weight",
                &mut layer.weight,
                vec![layer.out_ch, layer.in_ch, layer.kernel, layer.kernel],
            ),
            ("bias", &mut layer.bias, vec![layer.out_ch]),
        ] {
            let full = format!("{name}.{suffix}");
            let t = file
                .tensors
                .iter()
                .find(|t| t.name == full)
                .ok_or_else(|| bad(format!("missing tensor {full}")))?;
            if t.shape != shape || t.values.len() != dst.len() {
                return Err(bad(format!("tensor {full} has shape {:?}, expected {shape:?}", t.shape)));
            }
            dst.copy_from_slice(&t.values);
        }
    }
    if !params.is_finite() {
        return Err(bad("non-finite weights".into()));
    }
    Ok(params)
}

pub fn save_params(params: &DehazerParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, params_to_json(params)).map_err(|e| Error::io(path, e))
}

pub fn load_params(path: impl AsRef<Path>) -> Result<DehazerParams> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    params_from_json(&text, path)
}
