//! Full-resolution 8-bit RGB images: load, crop, bilinear rescale, save,
//! and conversion to and from the network's `[-1, 1]` float range.

use std::fmt;
use std::path::Path;

use image::{ColorType, DynamicImage, ImageReader, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::checkpoint::write_atomic;
use crate::tensor::{Dims4, Tensor4};

pub const CHANNELS: usize = 3;

/// Row-major interleaved RGB pixels.
#[derive(Clone, PartialEq, Eq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl fmt::Debug for ImageBuffer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ImageBuffer({}x{})", self.width, self.height)
    }
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidDims(format!("image {width}x{height} has a zero side")));
        }
        if pixels.len() != width * height * CHANNELS {
            return Err(Error::InvalidDims(format!(
                "image {width}x{height} needs {} bytes, got {}",
                width * height * CHANNELS,
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self> {
        let pixels = rgb.iter().copied().cycle().take(width * height * CHANNELS).collect();
        Self::new(width, height, pixels)
    }

    /// Build from a per-pixel function `f(x, y) -> rgb`.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [u8; 3]) -> Result<Self> {
        let mut pixels = Vec::with_capacity(width * height * CHANNELS);
        for y in 0..height {
            for x in 0..width {
                pixels.extend_from_slice(&f(x, y));
            }
        }
        Self::new(width, height, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * CHANNELS;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Per-channel mean over all pixels.
    pub fn channel_means(&self) -> [f64; 3] {
        let mut acc = [0u64; 3];
        for px in self.pixels.chunks_exact(CHANNELS) {
            for c in 0..CHANNELS {
                acc[c] += px[c] as u64;
            }
        }
        let n = (self.width * self.height) as f64;
        acc.map(|s| s as f64 / n)
    }
}

/// A rectangular region of an image plus optional reflections, applied
/// after extraction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CropSpec {
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
    pub flip_h: bool,
    pub flip_v: bool,
}

impl CropSpec {
    pub fn new(x0: usize, y0: usize, w: usize, h: usize) -> Self {
        Self {
            x0,
            y0,
            w,
            h,
            flip_h: false,
            flip_v: false,
        }
    }

    pub fn full(img: &ImageBuffer) -> Self {
        Self::new(0, 0, img.width, img.height)
    }

    pub fn check_bounds(&self, width: usize, height: usize) -> Result<()> {
        if self.w == 0 || self.h == 0 || self.x0 + self.w > width || self.y0 + self.h > height {
            return Err(Error::InvalidArgument(format!(
                "crop {}x{}+{}+{} outside {width}x{height}",
                self.w, self.h, self.x0, self.y0
            )));
        }
        Ok(())
    }

    /// The single crop equivalent to applying `self` and then `inner` to
    /// the result.
    pub fn then(&self, inner: &CropSpec) -> CropSpec {
        let x0 = if self.flip_h {
            self.x0 + self.w - inner.x0 - inner.w
        } else {
            self.x0 + inner.x0
        };
        let y0 = if self.flip_v {
            self.y0 + self.h - inner.y0 - inner.h
        } else {
            self.y0 + inner.y0
        };
        CropSpec {
            x0,
            y0,
            w: inner.w,
            h: inner.h,
            flip_h: self.flip_h ^ inner.flip_h,
            flip_v: self.flip_v ^ inner.flip_v,
        }
    }

    /// Flags as written in crop records: `h`, `v`, `hv` or `-`.
    pub fn flag_str(&self) -> &'static str {
        match (self.flip_h, self.flip_v) {
            (false, false) => "-",
            (true, false) => "h",
            (false, true) => "v",
            (true, true) => "hv",
        }
    }

    pub fn parse_flags(s: &str) -> Option<(bool, bool)> {
        match s {
            "-" => Some((false, false)),
            "h" => Some((true, false)),
            "v" => Some((false, true)),
            "hv" => Some((true, true)),
            _ => None,
        }
    }
}

fn image_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Decode an 8-bit image file. Grayscale is promoted to RGB and alpha is
/// dropped; 16-bit and float images are rejected.
pub fn load_image(path: &Path) -> Result<ImageBuffer> {
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    let mut reader = reader;
    reader.no_limits();
    let img = reader.decode().map_err(|e| image_err(path, e.to_string()))?;
    match img.color() {
        ColorType::L8 | ColorType::La8 | ColorType::Rgb8 | ColorType::Rgba8 => {}
        other => return Err(image_err(path, format!("unsupported pixel format {other:?}"))),
    }
    let rgb = match img {
        DynamicImage::ImageRgb8(rgb) => rgb,
        other => other.to_rgb8(),
    };
    let (w, h) = rgb.dimensions();
    ImageBuffer::new(w as usize, h as usize, rgb.into_raw())
}

/// Image dimensions from the file header alone.
pub fn image_dimensions(path: &Path) -> Result<(usize, usize)> {
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    let (w, h) = reader
        .into_dimensions()
        .map_err(|e| image_err(path, e.to_string()))?;
    Ok((w as usize, h as usize))
}

/// Encode as 8-bit RGB PNG via a temp file and rename.
pub fn save_png(img: &ImageBuffer, path: &Path) -> Result<()> {
    let rgb = RgbImage::from_raw(img.width as u32, img.height as u32, img.pixels.clone())
        .expect("buffer length checked on construction");
    write_atomic(path, |w| {
        rgb.write_to(w, image::ImageFormat::Png)
            .map_err(std::io::Error::other)
    })
}

pub fn crop(img: &ImageBuffer, spec: &CropSpec) -> Result<ImageBuffer> {
    spec.check_bounds(img.width, img.height)?;
    let mut pixels = Vec::with_capacity(spec.w * spec.h * CHANNELS);
    for j in 0..spec.h {
        let sy = if spec.flip_v { spec.y0 + spec.h - 1 - j } else { spec.y0 + j };
        let row = &img.pixels[sy * img.width * CHANNELS..(sy + 1) * img.width * CHANNELS];
        if spec.flip_h {
            for i in (0..spec.w).rev() {
                let s = (spec.x0 + i) * CHANNELS;
                pixels.extend_from_slice(&row[s..s + CHANNELS]);
            }
        } else {
            pixels.extend_from_slice(&row[spec.x0 * CHANNELS..(spec.x0 + spec.w) * CHANNELS]);
        }
    }
    ImageBuffer::new(spec.w, spec.h, pixels)
}

/// Source index pairs and weights for one axis of a half-pixel-centred
/// bilinear resize.
fn axis_taps(src: usize, dst: usize) -> Vec<(usize, usize, f32)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, (pos - lo as f64) as f32)
        })
        .collect()
}

/// Bilinear resize of an interleaved float plane with `channels` values
/// per pixel. Output values are convex combinations of input values.
pub fn resize_bilinear(
    src: &[f32],
    width: usize,
    height: usize,
    channels: usize,
    target_w: usize,
    target_h: usize,
) -> Vec<f32> {
    assert_eq!(src.len(), width * height * channels);
    let xs = axis_taps(width, target_w);
    let ys = axis_taps(height, target_h);
    let mut out = vec![0.0f32; target_w * target_h * channels];
    for (ty, &(y0, y1, fy)) in ys.iter().enumerate() {
        let r0 = &src[y0 * width * channels..(y0 + 1) * width * channels];
        let r1 = &src[y1 * width * channels..(y1 + 1) * width * channels];
        let orow = &mut out[ty * target_w * channels..(ty + 1) * target_w * channels];
        for (tx, &(x0, x1, fx)) in xs.iter().enumerate() {
            for c in 0..channels {
                let a = r0[x0 * channels + c] * (1.0 - fx) + r0[x1 * channels + c] * fx;
                let b = r1[x0 * channels + c] * (1.0 - fx) + r1[x1 * channels + c] * fx;
                orow[tx * channels + c] = a * (1.0 - fy) + b * fy;
            }
        }
    }
    out
}

fn quantize(v: f32) -> u8 {
    // round half away from zero; inputs are non-negative
    (v.clamp(0.0, 255.0) + 0.5).floor() as u8
}

pub fn rescale(img: &ImageBuffer, target_w: usize, target_h: usize) -> Result<ImageBuffer> {
    if target_w == 0 || target_h == 0 {
        return Err(Error::InvalidDims(format!("rescale target {target_w}x{target_h}")));
    }
    if (target_w, target_h) == (img.width, img.height) {
        return Ok(img.clone());
    }
    let src: Vec<f32> = img.pixels.iter().map(|&p| p as f32).collect();
    let out = resize_bilinear(&src, img.width, img.height, CHANNELS, target_w, target_h);
    ImageBuffer::new(target_w, target_h, out.into_iter().map(quantize).collect())
}

pub fn pixel_to_unit(p: u8) -> f32 {
    p as f32 / 127.5 - 1.0
}

pub fn unit_to_pixel(v: f32) -> u8 {
    let v = if v.is_nan() { 0.0 } else { v.clamp(-1.0, 1.0) };
    let scaled = (v + 1.0) * 127.5;
    (scaled + 0.5).floor().min(255.0) as u8
}

/// `1 x height x width x 3` tensor with values `p / 127.5 - 1`.
pub fn to_tensor(img: &ImageBuffer) -> Tensor4 {
    let data = img.pixels.iter().map(|&p| pixel_to_unit(p)).collect();
    Tensor4::from_vec(Dims4::new(1, img.height, img.width, CHANNELS), data)
        .expect("image dims are positive")
}

/// Inverse of [`to_tensor`], clamping to `[-1, 1]` first.
pub fn from_tensor(t: &Tensor4) -> Result<ImageBuffer> {
    let d = t.dims();
    if d.c != CHANNELS {
        return Err(Error::ChannelMismatch {
            op: "from_tensor",
            expected: CHANNELS,
            actual: d.c,
        });
    }
    if d.n != 1 {
        return Err(Error::InvalidArgument(format!(
            "from_tensor expects a single sample, got batch {}",
            d.n
        )));
    }
    ImageBuffer::new(d.w, d.h, t.data().iter().map(|&v| unit_to_pixel(v)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize) -> ImageBuffer {
        ImageBuffer::from_fn(w, h, |x, y| [(x * 7 % 256) as u8, (y * 11 % 256) as u8, ((x + y) % 256) as u8]).unwrap()
    }

    #[test]
    fn rejects_bad_buffers() {
        assert!(ImageBuffer::new(0, 1, vec![]).is_err());
        assert!(ImageBuffer::new(2, 1, vec![0; 5]).is_err());
    }

    #[test]
    fn identity_crop() {
        let img = ramp(5, 4);
        assert_eq!(crop(&img, &CropSpec::full(&img)).unwrap(), img);
    }

    #[test]
    fn horizontal_flip_swaps_columns() {
        let img = ImageBuffer::from_fn(2, 2, |x, y| if (x + y) % 2 == 0 { [0; 3] } else { [255; 3] }).unwrap();
        let spec = CropSpec {
            flip_h: true,
            ..CropSpec::full(&img)
        };
        let out = crop(&img, &spec).unwrap();
        for y in 0..2 {
            assert_eq!(out.pixel(0, y), img.pixel(1, y));
            assert_eq!(out.pixel(1, y), img.pixel(0, y));
        }
    }

    #[test]
    fn out_of_bounds_crop_is_rejected() {
        let img = ramp(5, 4);
        assert!(crop(&img, &CropSpec::new(3, 0, 3, 1)).is_err());
        assert!(crop(&img, &CropSpec::new(0, 0, 0, 1)).is_err());
    }

    #[test]
    fn constant_image_rescales_to_constant() {
        let img = ImageBuffer::filled(13, 7, [100, 100, 100]).unwrap();
        for (w, h) in [(1, 1), (5, 3), (40, 21)] {
            let out = rescale(&img, w, h).unwrap();
            assert!(out.pixels().iter().all(|&p| p == 100));
        }
    }

    #[test]
    fn same_size_rescale_is_identity() {
        let img = ramp(9, 6);
        assert_eq!(rescale(&img, 9, 6).unwrap(), img);
    }

    #[test]
    fn halving_matches_hand_bilinear() {
        // with half-pixel centres a 2x downscale samples at (2i + 0.5), the
        // midpoint of each 2x2 block, so every output is the block mean
        let vals: [u8; 16] = [10, 20, 30, 40, 50, 60, 70, 80, 90, 100, 110, 120, 130, 140, 150, 160];
        let img = ImageBuffer::from_fn(4, 4, |x, y| [vals[y * 4 + x]; 3]).unwrap();
        let out = rescale(&img, 2, 2).unwrap();
        let expect = [35.0, 55.0, 115.0, 135.0];
        for (i, e) in expect.iter().enumerate() {
            let got = out.pixel(i % 2, i / 2)[0] as f64;
            assert!((got - e).abs() <= 1.0, "pixel {i}: {got} vs {e}");
        }
    }

    #[test]
    fn tensor_mapping_endpoints_and_clamp() {
        assert_eq!(pixel_to_unit(0), -1.0);
        assert_eq!(pixel_to_unit(255), 1.0);
        assert_eq!(unit_to_pixel(2.0), 255);
        assert_eq!(unit_to_pixel(-3.0), 0);
    }

    #[test]
    fn every_byte_round_trips_through_tensor_space() {
        let img = ImageBuffer::from_fn(256, 1, |x, _| [x as u8, 255 - x as u8, x as u8]).unwrap();
        assert_eq!(from_tensor(&to_tensor(&img)).unwrap(), img);
    }

    #[test]
    fn from_tensor_checks_channels() {
        let t = Tensor4::zeros(Dims4::new(1, 2, 2, 4));
        assert!(matches!(from_tensor(&t), Err(Error::ChannelMismatch { .. })));
    }

    #[test]
    fn png_round_trip_and_single_white_pixel() {
        let dir = tempfile::tempdir().unwrap();
        let white = ImageBuffer::filled(1, 1, [255; 3]).unwrap();
        let p = dir.path().join("white.png");
        save_png(&white, &p).unwrap();
        assert_eq!(load_image(&p).unwrap().pixels(), &[255, 255, 255]);

        let img = ramp(64, 32);
        let p = dir.path().join("ramp.png");
        save_png(&img, &p).unwrap();
        let back = load_image(&p).unwrap();
        assert_eq!((back.width(), back.height()), (64, 32));
        assert_eq!(back, img);
        assert_eq!(image_dimensions(&p).unwrap(), (64, 32));
    }

    #[test]
    fn grayscale_and_alpha_are_normalized() {
        let dir = tempfile::tempdir().unwrap();
        let gray = image::GrayImage::from_raw(2, 1, vec![10, 200]).unwrap();
        let p = dir.path().join("g.png");
        gray.save(&p).unwrap();
        assert_eq!(load_image(&p).unwrap().pixels(), &[10, 10, 10, 200, 200, 200]);

        let rgba = image::RgbaImage::from_raw(1, 1, vec![1, 2, 3, 4]).unwrap();
        let p = dir.path().join("a.png");
        rgba.save(&p).unwrap();
        assert_eq!(load_image(&p).unwrap().pixels(), &[1, 2, 3]);
    }

    #[test]
    fn sixteen_bit_and_corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let deep = image::ImageBuffer::<image::Rgb<u16>, _>::from_raw(1, 1, vec![1u16, 2, 3]).unwrap();
        let p = dir.path().join("deep.png");
        deep.save(&p).unwrap();
        assert!(matches!(load_image(&p), Err(Error::Image { .. })));

        let p = dir.path().join("junk.png");
        std::fs::write(&p, b"\x89PNG\r\n\x1a\nnot really").unwrap();
        assert!(load_image(&p).is_err());
        assert!(matches!(load_image(&dir.path().join("missing.png")), Err(Error::Io { .. })));
    }
}
