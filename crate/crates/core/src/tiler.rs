//! Whole-image translation through overlapping tiles.
//!
//! Each tile is cut from the source, translated on its own, and added into
//! a per-pixel sum with a per-pixel cover count; the output pixel is
//! `sum / count`. Tile results are always merged in grid order, so the
//! output does not depend on how many workers produced them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gan::{Direction, Translator, GENERATOR_FACTOR};
use crate::image_store::{self, CropSpec, ImageBuffer, CHANNELS};
use crate::memprof::{self, MemTracker};
use crate::sampler::{format_records, Provenance};
use crate::tensor::{Dims4, Tensor4};

pub const DEFAULT_TILE: usize = 128;
pub const DEFAULT_STRIDE: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TileGrid {
    pub width: usize,
    pub height: usize,
    pub tile_w: usize,
    pub tile_h: usize,
    pub stride_x: usize,
    pub stride_y: usize,
    pub tiles: Vec<CropSpec>,
}

impl TileGrid {
    pub fn x_offsets(&self) -> Vec<usize> {
        axis_offsets(self.width, self.tile_w, self.stride_x)
    }

    pub fn y_offsets(&self) -> Vec<usize> {
        axis_offsets(self.height, self.tile_h, self.stride_y)
    }

    pub fn len(&self) -> usize {
        self.tiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tiles.is_empty()
    }

    /// Tiles in the sampler's crop-record text format.
    pub fn to_records(&self) -> String {
        let recs: Vec<Provenance> = self.tiles.iter().map(|&crop| Provenance { image: 0, crop }).collect();
        format_records(&recs)
    }
}

fn axis_offsets(full: usize, tile: usize, stride: usize) -> Vec<usize> {
    let last = full - tile;
    let mut v: Vec<usize> = (0..=last).step_by(stride).collect();
    if *v.last().expect("offset 0 always present") != last {
        v.push(last);
    }
    v
}

/// Offsets `0, s, 2s, ...` per axis plus a final offset flush with the far
/// edge. Tiles are listed row by row.
pub fn plan_grid(
    x_full: usize,
    y_full: usize,
    tile_w: usize,
    tile_h: usize,
    stride_x: usize,
    stride_y: usize,
) -> Result<TileGrid> {
    if tile_w == 0 || tile_h == 0 || tile_w > x_full || tile_h > y_full {
        return Err(Error::InvalidArgument(format!(
            "tile {tile_w}x{tile_h} must be non-empty and fit the image {x_full}x{y_full}"
        )));
    }
    if stride_x == 0 || stride_y == 0 || stride_x > tile_w || stride_y > tile_h {
        return Err(Error::InvalidArgument(format!(
            "stride {stride_x}x{stride_y} must lie in 1..=tile size {tile_w}x{tile_h}"
        )));
    }
    let xs = axis_offsets(x_full, tile_w, stride_x);
    let ys = axis_offsets(y_full, tile_h, stride_y);
    let tiles = ys
        .iter()
        .flat_map(|&y0| xs.iter().map(move |&x0| CropSpec::new(x0, y0, tile_w, tile_h)))
        .collect();
    Ok(TileGrid {
        width: x_full,
        height: y_full,
        tile_w,
        tile_h,
        stride_x,
        stride_y,
        tiles,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ScaleMode {
    /// Tiles enter the network at their own size.
    #[default]
    Native,
    /// Every tile is resized to `x_batch`x`y_batch`, translated, and
    /// resized back.
    Rescale { x_batch: usize, y_batch: usize },
}

/// Per-pixel running sums and cover counts.
#[derive(Clone, Debug)]
pub struct BlendAccumulator {
    width: usize,
    height: usize,
    sum: Vec<f64>,
    weight: Vec<u32>,
}

impl BlendAccumulator {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            sum: vec![0.0; width * height * CHANNELS],
            weight: vec![0; width * height],
        }
    }

    /// Add a translated tile (values in `[-1, 1]`, `w*h*3` interleaved) at
    /// the position of `spec`.
    pub fn add(&mut self, spec: &CropSpec, values: &[f32]) -> Result<()> {
        spec.check_bounds(self.width, self.height)?;
        if values.len() != spec.w * spec.h * CHANNELS {
            return Err(Error::InvalidArgument(format!(
                "tile of {} values does not match {}x{}",
                values.len(),
                spec.w,
                spec.h
            )));
        }
        for y in 0..spec.h {
            let row = (spec.y0 + y) * self.width + spec.x0;
            let src = &values[y * spec.w * CHANNELS..(y + 1) * spec.w * CHANNELS];
            let dst = &mut self.sum[row * CHANNELS..(row + spec.w) * CHANNELS];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += s as f64;
            }
            for w in &mut self.weight[row..row + spec.w] {
                *w += 1;
            }
        }
        Ok(())
    }

    pub fn weights(&self) -> &[u32] {
        &self.weight
    }

    /// Per-pixel averages in `[-1, 1]` units.
    pub fn averages(&self) -> Result<Vec<f64>> {
        if let Some(i) = self.weight.iter().position(|&w| w == 0) {
            return Err(Error::InvalidArgument(format!(
                "pixel ({}, {}) not covered by any tile",
                i % self.width,
                i / self.width
            )));
        }
        Ok(self
            .sum
            .iter()
            .enumerate()
            .map(|(i, &s)| s / self.weight[i / CHANNELS] as f64)
            .collect())
    }

    pub fn finish(&self) -> Result<ImageBuffer> {
        let px = self
            .averages()?
            .into_iter()
            .map(|v| image_store::unit_to_pixel(v as f32))
            .collect();
        ImageBuffer::new(self.width, self.height, px)
    }
}

/// Something that maps a `(1, h, w, 3)` tile tensor to a translated one of
/// the same shape.
pub trait TileTranslator: Sync {
    fn translate_tile(&self, tile: Tensor4) -> Result<Tensor4>;
}

impl<F> TileTranslator for F
where
    F: Fn(Tensor4) -> Result<Tensor4> + Sync,
{
    fn translate_tile(&self, tile: Tensor4) -> Result<Tensor4> {
        self(tile)
    }
}

/// A frozen model bound to one direction.
pub struct Directed<'m, T: ?Sized> {
    pub model: &'m T,
    pub direction: Direction,
}

impl<T: Translator + ?Sized> TileTranslator for Directed<'_, T> {
    fn translate_tile(&self, tile: Tensor4) -> Result<Tensor4> {
        self.model.translate(self.direction, tile)
    }
}

fn check_grid(img: &ImageBuffer, grid: &TileGrid, mode: ScaleMode) -> Result<()> {
    if (grid.width, grid.height) != (img.width(), img.height()) {
        return Err(Error::InvalidArgument(format!(
            "grid planned for {}x{} but image is {}x{}",
            grid.width,
            grid.height,
            img.width(),
            img.height()
        )));
    }
    match mode {
        ScaleMode::Native => {
            for t in &grid.tiles {
                if t.w % GENERATOR_FACTOR != 0 || t.h % GENERATOR_FACTOR != 0 {
                    return Err(Error::InvalidDims(format!(
                        "native mode needs tile dims divisible by {GENERATOR_FACTOR}, got {}x{}",
                        t.w, t.h
                    )));
                }
            }
        }
        ScaleMode::Rescale { x_batch, y_batch } => {
            if x_batch == 0 || y_batch == 0 || x_batch % GENERATOR_FACTOR != 0 || y_batch % GENERATOR_FACTOR != 0 {
                return Err(Error::InvalidDims(format!(
                    "rescale resolution {x_batch}x{y_batch} must be positive and divisible by {GENERATOR_FACTOR}"
                )));
            }
        }
    }
    Ok(())
}

/// Cut, translate and (in rescale mode) resize back one tile. Returns
/// interleaved `[-1, 1]` values at the tile's own extent.
fn run_tile<T: TileTranslator + ?Sized>(
    net: &T,
    img: &ImageBuffer,
    spec: &CropSpec,
    mode: ScaleMode,
) -> Result<Vec<f32>> {
    let patch = image_store::crop(img, spec)?;
    let (nw, nh) = match mode {
        ScaleMode::Native => (spec.w, spec.h),
        ScaleMode::Rescale { x_batch, y_batch } => (x_batch, y_batch),
    };
    let patch = image_store::rescale(&patch, nw, nh)?;
    let out = net.translate_tile(image_store::to_tensor(&patch))?;
    let expect = Dims4::new(1, nh, nw, CHANNELS);
    if out.dims() != expect {
        return Err(Error::ShapeMismatch {
            op: "translate_tile",
            expected: expect,
            actual: out.dims(),
        });
    }
    let values = out.into_vec();
    if (nw, nh) == (spec.w, spec.h) {
        Ok(values)
    } else {
        Ok(image_store::resize_bilinear(&values, nw, nh, CHANNELS, spec.w, spec.h))
    }
}

/// Translate `img` tile by tile and average overlaps.
pub fn translate_image<T: TileTranslator + ?Sized>(
    net: &T,
    img: &ImageBuffer,
    grid: &TileGrid,
    mode: ScaleMode,
) -> Result<ImageBuffer> {
    accumulate(net, img, grid, mode, 1)?.finish()
}

/// As [`translate_image`] with up to `workers` tiles in flight. The output
/// is byte-identical for every worker count.
pub fn translate_parallel<T: TileTranslator + ?Sized>(
    net: &T,
    img: &ImageBuffer,
    grid: &TileGrid,
    mode: ScaleMode,
    workers: usize,
) -> Result<ImageBuffer> {
    accumulate(net, img, grid, mode, workers)?.finish()
}

/// Run every tile of `grid` and return the filled accumulator.
pub fn accumulate<T: TileTranslator + ?Sized>(
    net: &T,
    img: &ImageBuffer,
    grid: &TileGrid,
    mode: ScaleMode,
    workers: usize,
) -> Result<BlendAccumulator> {
    if workers == 0 {
        return Err(Error::InvalidArgument("workers must be at least 1".into()));
    }
    check_grid(img, grid, mode)?;
    let mut acc = BlendAccumulator::new(img.width(), img.height());
    if workers == 1 {
        for spec in &grid.tiles {
            let values = run_tile(net, img, spec, mode)?;
            acc.add(spec, &values)?;
        }
        return Ok(acc);
    }
    let tracker = memprof::current();
    for chunk in grid.tiles.chunks(workers) {
        let results: Vec<Result<Vec<f32>>> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|spec| {
                    let tracker = tracker.clone();
                    s.spawn(move || {
                        let _scope = tracker.as_ref().map(MemTracker::enter);
                        run_tile(net, img, spec, mode)
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|p| std::panic::resume_unwind(p)))
                .collect()
        });
        for (spec, values) in chunk.iter().zip(results) {
            acc.add(spec, &values?)?;
        }
    }
    Ok(acc)
}

/// Default grid for an image: 128x128 tiles at stride 64, or a single
/// rescaled tile covering an image smaller than a tile.
pub fn default_plan(
    width: usize,
    height: usize,
    tile: (usize, usize),
    stride: (usize, usize),
    mode: ScaleMode,
) -> Result<(TileGrid, ScaleMode)> {
    if width < tile.0 || height < tile.1 {
        let grid = plan_grid(width, height, width, height, width, height)?;
        let mode = match mode {
            ScaleMode::Rescale { .. } => mode,
            ScaleMode::Native => ScaleMode::Rescale {
                x_batch: round_up(tile.0.min(width.max(1)), GENERATOR_FACTOR),
                y_batch: round_up(tile.1.min(height.max(1)), GENERATOR_FACTOR),
            },
        };
        return Ok((grid, mode));
    }
    Ok((plan_grid(width, height, tile.0, tile.1, stride.0, stride.1)?, mode))
}

fn round_up(v: usize, m: usize) -> usize {
    v.div_ceil(m) * m
}

/// Convenience wrapper: plan a grid and translate with a frozen model.
pub fn translate_with<T: Translator + ?Sized>(
    model: &T,
    direction: Direction,
    img: &ImageBuffer,
    tile: (usize, usize),
    stride: (usize, usize),
    mode: ScaleMode,
    workers: usize,
) -> Result<ImageBuffer> {
    let (grid, mode) = default_plan(img.width(), img.height(), tile, stride, mode)?;
    translate_parallel(&Directed { model, direction }, img, &grid, mode, workers)
}
