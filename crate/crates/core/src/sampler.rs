//! Random zoomed subsample extraction for training batches.
//!
//! Randomness comes from [`SeededRng`], ChaCha with 8 rounds
//! (`rand_chacha::ChaCha8Rng`), seeded through `SeedableRng::seed_from_u64`.
//! The generator is counter-based and platform independent, and its full
//! state serializes, so a recorded seed or state replays the same crops on
//! any machine. Integer draws use `rand`'s `random_range` (uniform, no
//! modulo bias).

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_store::{self, CropSpec, ImageBuffer, CHANNELS};
use crate::tensor::{Dims4, Tensor4};

pub type SeededRng = rand_chacha::ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SeededRng {
    SeededRng::seed_from_u64(seed)
}

/// Number of distinct top-left offsets for `batch`-sized windows counted
/// as `(x_full - x_batch) * (y_full - y_batch)`.
pub fn count_subsamples(x_full: u64, y_full: u64, x_batch: u64, y_batch: u64) -> Result<u64> {
    if x_batch > x_full || y_batch > y_full {
        return Err(Error::InvalidArgument(format!(
            "batch {x_batch}x{y_batch} larger than image {x_full}x{y_full}"
        )));
    }
    Ok((x_full - x_batch) * (y_full - y_batch))
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub x_batch: usize,
    pub y_batch: usize,
    pub batch_size: usize,
    /// Smallest crop side lengths; defaults to the batch resolution.
    #[serde(default)]
    pub zoom_min: Option<[usize; 2]>,
    /// Largest crop side lengths; defaults to the full image.
    #[serde(default)]
    pub zoom_max: Option<[usize; 2]>,
    #[serde(default = "default_true")]
    pub allow_flip_h: bool,
    #[serde(default = "default_true")]
    pub allow_flip_v: bool,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn new(x_batch: usize, y_batch: usize, batch_size: usize, seed: u64) -> Self {
        Self {
            x_batch,
            y_batch,
            batch_size,
            zoom_min: None,
            zoom_max: None,
            allow_flip_h: true,
            allow_flip_v: true,
            seed,
        }
    }

    pub fn validate_for(&self, img: &ImageBuffer) -> Result<()> {
        if self.batch_size == 0 || self.x_batch == 0 || self.y_batch == 0 {
            return Err(Error::InvalidArgument(
                "batch size and batch resolution must be positive".into(),
            ));
        }
        if self.x_batch > img.width() || self.y_batch > img.height() {
            return Err(Error::InvalidArgument(format!(
                "batch resolution {}x{} exceeds image {}x{}",
                self.x_batch,
                self.y_batch,
                img.width(),
                img.height()
            )));
        }
        let ((wmin, hmin), (wmax, hmax)) = self.side_ranges(img);
        if wmin > wmax || hmin > hmax || wmin == 0 || hmin == 0 {
            return Err(Error::InvalidArgument(format!(
                "empty zoom range {wmin}..={wmax} x {hmin}..={hmax} for image {}x{}",
                img.width(),
                img.height()
            )));
        }
        Ok(())
    }

    /// Inclusive crop side ranges `((w_min, h_min), (w_max, h_max))`.
    fn side_ranges(&self, img: &ImageBuffer) -> ((usize, usize), (usize, usize)) {
        let [wmin, hmin] = self.zoom_min.unwrap_or([self.x_batch, self.y_batch]);
        let [wmax, hmax] = self.zoom_max.unwrap_or([img.width(), img.height()]);
        ((wmin, hmin), (wmax.min(img.width()), hmax.min(img.height())))
    }
}

/// Draw one crop: side lengths uniform per axis over the zoom range,
/// position uniform over all in-bounds offsets, fair-coin flips.
pub fn draw_crop<R: Rng + ?Sized>(img: &ImageBuffer, cfg: &SamplerConfig, rng: &mut R) -> Result<CropSpec> {
    cfg.validate_for(img)?;
    let ((wmin, hmin), (wmax, hmax)) = cfg.side_ranges(img);
    let w = rng.random_range(wmin..=wmax);
    let h = rng.random_range(hmin..=hmax);
    let x0 = rng.random_range(0..=img.width() - w);
    let y0 = rng.random_range(0..=img.height() - h);
    let flip_h = cfg.allow_flip_h && rng.random_bool(0.5);
    let flip_v = cfg.allow_flip_v && rng.random_bool(0.5);
    Ok(CropSpec {
        x0,
        y0,
        w,
        h,
        flip_h,
        flip_v,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Provenance {
    pub image: usize,
    pub crop: CropSpec,
}

#[derive(Debug)]
pub struct TrainingBatch {
    pub tensor: Tensor4,
    pub provenance: Vec<Provenance>,
}

/// One crop rendered at the batch resolution in `[-1, 1]`.
fn render(img: &ImageBuffer, spec: &CropSpec, cfg: &SamplerConfig) -> Result<Vec<f32>> {
    let patch = image_store::crop(img, spec)?;
    let patch = image_store::rescale(&patch, cfg.x_batch, cfg.y_batch)?;
    Ok(patch.pixels().iter().map(|&p| image_store::pixel_to_unit(p)).collect())
}

/// `b` independent crops, each from a uniformly chosen image of the domain,
/// stacked into a `(b, y_batch, x_batch, 3)` tensor.
pub fn next_batch<R: Rng + ?Sized>(
    domain: &[ImageBuffer],
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<TrainingBatch> {
    if domain.is_empty() {
        return Err(Error::InvalidArgument("domain has no images".into()));
    }
    for img in domain {
        cfg.validate_for(img)?;
    }
    let per = cfg.x_batch * cfg.y_batch * CHANNELS;
    let mut data = Vec::with_capacity(per * cfg.batch_size);
    let mut provenance = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.batch_size {
        let image = if domain.len() == 1 {
            0
        } else {
            rng.random_range(0..domain.len())
        };
        let crop = draw_crop(&domain[image], cfg, rng)?;
        data.extend(render(&domain[image], &crop, cfg)?);
        provenance.push(Provenance { image, crop });
    }
    let dims = Dims4::new(cfg.batch_size, cfg.y_batch, cfg.x_batch, CHANNELS);
    Ok(TrainingBatch {
        tensor: Tensor4::from_vec(dims, data)?,
        provenance,
    })
}

/// A sampler owning its images' config and random stream.
#[derive(Clone, Debug)]
pub struct Sampler {
    pub config: SamplerConfig,
    rng: SeededRng,
}

impl Sampler {
    pub fn new(config: SamplerConfig) -> Self {
        let rng = seeded_rng(config.seed);
        Self { config, rng }
    }

    pub fn with_rng(config: SamplerConfig, rng: SeededRng) -> Self {
        Self { config, rng }
    }

    pub fn rng(&self) -> &SeededRng {
        &self.rng
    }

    pub fn next_batch(&mut self, domain: &[ImageBuffer]) -> Result<TrainingBatch> {
        next_batch(domain, &self.config, &mut self.rng)
    }
}

/// One line per record: `image,x0,y0,w,h,flags`.
pub fn format_records<'a>(records: impl IntoIterator<Item = &'a Provenance>) -> String {
    let mut out = String::new();
    for r in records {
        let c = &r.crop;
        let _ = writeln!(out, "{},{},{},{},{},{}", r.image, c.x0, c.y0, c.w, c.h, c.flag_str());
    }
    out
}

pub fn parse_records(text: &str) -> Result<Vec<Provenance>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            let bad = || Error::InvalidArgument(format!("malformed crop record on line {}: {line}", i + 1));
            let fields: Vec<&str> = line.trim().split(',').collect();
            if fields.len() != 6 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<usize>().map_err(|_| bad());
            let (flip_h, flip_v) = CropSpec::parse_flags(fields[5]).ok_or_else(bad)?;
            Ok(Provenance {
                image: num(fields[0])?,
                crop: CropSpec {
                    x0: num(fields[1])?,
                    y0: num(fields[2])?,
                    w: num(fields[3])?,
                    h: num(fields[4])?,
                    flip_h,
                    flip_v,
                },
            })
        })
        .collect()
}
