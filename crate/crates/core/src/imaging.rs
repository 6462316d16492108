//! Pixel containers and PNG boundary I/O.
//!
//! Everything inside the crate works on `f64` samples in `[0, 1]`, stored
//! row-major with interleaved channels (`(y * width + x) * channels + c`).
//! Bytes only appear at the file boundary.

use std::path::Path;

use image::{DynamicImage, GrayImage, RgbImage};

use crate::error::{Error, Result};

/// Rec. 601 luma weights.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// H×W×C image with every sample finite and in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

fn check_dims(height: usize, width: usize, channels: usize, len: usize) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(Error::domain(format!(
            "image dimensions must be positive, got {height}x{width}"
        )));
    }
    if channels != 1 && channels != 3 {
        return Err(Error::domain(format!(
            "channel count must be 1 or 3, got {channels}"
        )));
    }
    if len != height * width * channels {
        return Err(Error::shape(format!(
            "buffer of {len} samples does not fit {height}x{width}x{channels}"
        )));
    }
    Ok(())
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(height, width, channels, data.len())?;
        if let Some((i, v)) = data
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < 0.0 || **v > 1.0)
        {
            return Err(Error::domain(format!(
                "sample {i} = {v} is outside [0, 1]"
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Builds an image, clamping finite samples into `[0, 1]`. Non-finite
    /// samples are still rejected.
    pub fn from_clamped(
        height: usize,
        width: usize,
        channels: usize,
        mut data: Vec<f64>,
    ) -> Result<Self> {
        check_dims(height, width, channels, data.len())?;
        for v in data.iter_mut() {
            if !v.is_finite() {
                return Err(Error::domain("non-finite sample"));
            }
            *v = v.clamp(0.0, 1.0);
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::new(height, width, channels, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.shape() == other.shape()
    }

    pub fn ensure_same_shape(&self, other: &Image, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )))
        }
    }

    /// Quantizes to 8-bit with `round(v * 255)`.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|&v| to_byte(v)).collect()
    }

    pub fn from_bytes(height: usize, width: usize, channels: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(
            height,
            width,
            channels,
            bytes.iter().map(|&b| f64::from(b) / 255.0).collect(),
        )
    }
}

#[inline]
pub fn to_byte(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Unbounded H×W×C float field (K maps, network activations exposed to callers).
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Raster {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height * width * channels != data.len() || height == 0 || width == 0 || channels == 0 {
            return Err(Error::shape(format!(
                "buffer of {} samples does not fit {height}x{width}x{channels}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("raster contains non-finite values"));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Per-pixel scene depth, finite and non-negative.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl DepthMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::shape(format!(
                "depth buffer of {} samples does not fit {height}x{width}",
                data.len()
            )));
        }
        if data.iter().any(|d| !d.is_finite() || *d < 0.0) {
            return Err(Error::domain("depth values must be finite and non-negative"));
        }
        Ok(Self {
            height,
            width,
            data,
        })
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

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &d| {
                (lo.min(d), hi.max(d))
            })
    }

    /// Affine map onto `[0, 1]`; returns the image and the `(min, max)` needed
    /// to invert it. A constant map encodes as all zeros.
    pub fn normalized(&self) -> (Image, (f64, f64)) {
        let (lo, hi) = self.min_max();
        let span = hi - lo;
        let data = self
            .data
            .iter()
            .map(|&d| if span > 0.0 { (d - lo) / span } else { 0.0 })
            .collect();
        let img = Image::from_clamped(self.height, self.width, 1, data)
            .expect("normalized depth is in range");
        (img, (lo, hi))
    }

    pub fn from_normalized(img: &Image, range: (f64, f64)) -> Result<Self> {
        if img.channels() != 1 {
            return Err(Error::domain("depth image must be single channel"));
        }
        let (lo, hi) = range;
        Self::new(
            img.height(),
            img.width(),
            img.data().iter().map(|&v| lo + v * (hi - lo)).collect(),
        )
    }
}

/// Reads an 8-bit grayscale or RGB PNG; samples are `byte / 255`.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let decoded = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png).map_err(
        |e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        },
    )?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    match decoded {
        DynamicImage::ImageLuma8(buf) => Image::from_bytes(h, w, 1, buf.as_raw()),
        DynamicImage::ImageRgb8(buf) => Image::from_bytes(h, w, 3, buf.as_raw()),
        other => Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("expected 8-bit gray or RGB, found {:?}", other.color()),
        }),
    }
}

/// Writes an 8-bit PNG with each sample quantized to `round(v * 255)`.
pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (w, h) = (img.width() as u32, img.height() as u32);
    let bytes = img.to_bytes();
    let result = match img.channels() {
        1 => GrayImage::from_raw(w, h, bytes)
            .expect("buffer sized from image")
            .save_with_format(path, image::ImageFormat::Png),
        _ => RgbImage::from_raw(w, h, bytes)
            .expect("buffer sized from image")
            .save_with_format(path, image::ImageFormat::Png),
    };
    result.map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    })
}

/// Single-channel luma; single-channel input is returned unchanged.
pub fn to_luma(img: &Image) -> Image {
    if img.channels() == 1 {
        return img.clone();
    }
    let data = img
        .data()
        .chunks_exact(3)
        .map(|p| (LUMA_WEIGHTS[0] * p[0] + LUMA_WEIGHTS[1] * p[1] + LUMA_WEIGHTS[2] * p[2]).clamp(0.0, 1.0))
        .collect();
    Image::new(img.height(), img.width(), 1, data).expect("luma of a valid image is valid")
}

/// Normalized 1-D Gaussian kernel with radius `ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as usize;
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable Gaussian blur of a single H×W plane with edge replication.
/// `sigma <= 0` returns the input unchanged.
pub fn gaussian_blur_plane(plane: &[f64], height: usize, width: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return plane.to_vec();
    }
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as isize;
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;

    let mut tmp = vec![0.0; plane.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                let xx = clampi(x as isize + k as isize - r, width);
                acc += w * plane[y * width + xx];
            }
            tmp[y * width + x] = acc;
        }
    }
    let mut out = vec![0.0; plane.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                let yy = clampi(y as isize + k as isize - r, height);
                acc += w * tmp[yy * width + x];
            }
            out[y * width + x] = acc;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_gray(path: &Path, w: u32, h: u32, v: u8) {
        GrayImage::from_pixel(w, h, image::Luma([v])).save(path).unwrap();
    }

    #[test]
    fn load_zero_and_saturated_png() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.png");
        write_gray(&p, 4, 4, 0);
        let img = load_image(&p).unwrap();
        assert_eq!(img.shape(), (4, 4, 1));
        assert!(img.data().iter().all(|&v| v == 0.0));

        write_gray(&p, 4, 4, 255);
        assert!(load_image(&p).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn load_mid_value_is_exact_division() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        write_gray(&p, 2, 3, 128);
        let img = load_image(&p).unwrap();
        assert!(img.data().iter().all(|&v| v == 128.0 / 255.0));
        assert!((img.get(0, 0, 0) - 0.50196).abs() < 1e-5);
    }

    #[test]
    fn rgb_channel_count_preserved() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rgb.png");
        RgbImage::from_pixel(3, 2, image::Rgb([10, 20, 30])).save(&p).unwrap();
        let img = load_image(&p).unwrap();
        assert_eq!(img.shape(), (2, 3, 3));
        assert_eq!(img.pixel(1, 2), &[10.0 / 255.0, 20.0 / 255.0, 30.0 / 255.0]);
    }

    #[test]
    fn load_missing_file_is_io_error() {
        let err = load_image("/nonexistent/nope.png").unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn load_sixteen_bit_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("16.png");
        image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_pixel(2, 2, image::Luma([1000]))
            .save(&p)
            .unwrap();
        assert!(matches!(load_image(&p).unwrap_err(), Error::Format { .. }));
    }

    #[test]
    fn save_then_load_known_values() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.png");
        for (v, expect) in [(0.0, 0.0), (1.0, 1.0), (0.5, 128.0 / 255.0)] {
            let img = Image::filled(3, 5, 3, v).unwrap();
            save_image(&img, &p).unwrap();
            let back = load_image(&p).unwrap();
            assert_eq!(back.shape(), (3, 5, 3));
            assert!(back.data().iter().all(|&b| b == expect));
        }
    }

    #[test]
    fn save_to_unwritable_path_is_io_error() {
        let img = Image::filled(2, 2, 1, 0.0).unwrap();
        let err = save_image(&img, "/nonexistent-dir/x.png").unwrap_err();
        assert!(matches!(err, Error::Io { .. }), "{err:?}");
    }

    #[test]
    fn luma_weights() {
        let gray = Image::from_fn(2, 2, 1, |y, x, _| (y * 2 + x) as f64 / 4.0).unwrap();
        assert_eq!(to_luma(&gray), gray);
        let white = Image::filled(2, 2, 3, 1.0).unwrap();
        assert!(to_luma(&white).data().iter().all(|&v| (v - 1.0).abs() < 1e-15));
        let red = Image::from_fn(1, 1, 3, |_, _, c| if c == 0 { 1.0 } else { 0.0 }).unwrap();
        assert_eq!(to_luma(&red).data(), &[0.299]);
    }

    #[test]
    fn invalid_images_rejected() {
        assert!(Image::new(0, 2, 1, vec![]).is_err());
        assert!(Image::new(1, 1, 2, vec![0.0, 0.0]).is_err());
        assert!(Image::new(1, 1, 1, vec![1.5]).is_err());
        assert!(Image::new(1, 1, 1, vec![f64::NAN]).is_err());
        assert!(Image::from_clamped(1, 1, 1, vec![f64::INFINITY]).is_err());
        assert_eq!(Image::from_clamped(1, 1, 1, vec![1.5]).unwrap().data(), &[1.0]);
    }

    #[test]
    fn depth_normalization_inverts() {
        let d = DepthMap::new(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let (img, range) = d.normalized();
        assert_eq!(img.data(), &[0.0, 0.5, 1.0]);
        assert_eq!(DepthMap::from_normalized(&img, range).unwrap(), d);
        assert!(DepthMap::new(1, 1, vec![-1.0]).is_err());
    }

    #[test]
    fn blur_preserves_constants() {
        let plane = vec![0.7; 30];
        let out = gaussian_blur_plane(&plane, 5, 6, 1.5);
        assert!(out.iter().all(|v| (v - 0.7).abs() < 1e-12));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn png_round_trip_within_half_step(
                h in 1usize..6, w in 1usize..6, rgb in any::<bool>(),
                seed in proptest::collection::vec(0.0f64..=1.0, 108),
            ) {
                let c = if rgb { 3 } else { 1 };
                let data: Vec<f64> = seed.iter().cycle().take(h * w * c).copied().collect();
                let img = Image::new(h, w, c, data).unwrap();
                let dir = tempfile::tempdir().unwrap();
                let p = dir.path().join("rt.png");
                save_image(&img, &p).unwrap();
                let back = load_image(&p).unwrap();
                prop_assert_eq!(back.shape(), img.shape());
                for (a, b) in img.data().iter().zip(back.data()) {
                    prop_assert!((a - b).abs() <= 1.0 / 510.0 + 1e-12);
                }
            }

            #[test]
            fn luma_stays_in_unit_range(px in proptest::collection::vec(0.0f64..=1.0, 12)) {
                let img = Image::new(2, 2, 3, px).unwrap();
                prop_assert!(to_luma(&img).data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }
}
