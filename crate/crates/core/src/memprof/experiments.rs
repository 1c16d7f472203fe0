//! Peak-memory experiments: whole-image passes at growing sizes, and tiled
//! translation at a fixed tile size.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::MemTracker;
use crate::error::{Error, Result};
use crate::gan::{Direction, GanArch, GanModel, Translator, GENERATOR_FACTOR};
use crate::image_store::ImageBuffer;
use crate::sampler::seeded_rng;
use crate::tensor::{Dims4, Graph, LayerKind, Tensor4};
use crate::tiler::{self, ScaleMode};

/// Default cap for marking sizes: 4 GiB, the memory of a small workstation
/// GPU.
pub const DEFAULT_CAP_BYTES: usize = 4 << 30;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Workload {
    #[default]
    Forward,
    ForwardBackward,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MemReport {
    pub peak_bytes: usize,
    /// High-water mark per layer, in execution order.
    pub samples: Vec<(String, usize)>,
    pub input_pixels: usize,
    pub input_bytes: usize,
    /// Every tracked allocation was released by the end of the run.
    pub balanced: bool,
}

/// Bytes of every activation a whole-image generator forward keeps alive
/// (one output per conv, norm, activation and residual sum), excluding the
/// input and transient scratch.
pub fn predicted_forward_bytes(arch: &GanArch, dims: Dims4) -> usize {
    let mut h = dims.h;
    let mut w = dims.w;
    let mut total = 0usize;
    for layer in arch.generator_layers() {
        match layer.kind {
            LayerKind::DownConv => {
                h /= layer.stride;
                w /= layer.stride;
                total += 2 * h * w * layer.out_channels;
            }
            LayerKind::UpConv => {
                h *= layer.stride;
                w *= layer.stride;
                total += 2 * h * w * layer.out_channels;
            }
            LayerKind::Residual => total += 6 * h * w * layer.out_channels,
            LayerKind::Activation => total += h * w * layer.out_channels,
        }
    }
    total * dims.n * std::mem::size_of::<f32>()
}

/// Predicted whole-image peak: input plus retained activations.
pub fn predicted_peak_bytes(arch: &GanArch, dims: Dims4) -> usize {
    dims.len() * std::mem::size_of::<f32>() + predicted_forward_bytes(arch, dims)
}

fn random_input(dims: Dims4, seed: u64) -> Tensor4 {
    Tensor4::rand_uniform(dims, -1.0, 1.0, &mut seeded_rng(seed))
}

/// Run one A→B generator pass on a random input of `dims` under a fresh
/// tracker and report its peak. The input tensor is allocated inside the
/// measured scope.
pub fn tracked_run(model: &GanModel, workload: Workload, dims: Dims4) -> Result<MemReport> {
    tracked_run_with(model, workload, dims, MemTracker::with_phases())
}

fn tracked_run_with(model: &GanModel, workload: Workload, dims: Dims4, tracker: std::sync::Arc<MemTracker>) -> Result<MemReport> {
    {
        let _scope = tracker.enter();
        let x = random_input(dims, 0x5eed);
        match workload {
            Workload::Forward => {
                let mut g = Graph::inference(model.store());
                let xv = g.input(x);
                model.forward(&mut g, Direction::AB, xv)?;
            }
            Workload::ForwardBackward => {
                let mut g = Graph::recording(model.store());
                g.set_trainable(model.generator_params());
                let xv = g.input(x);
                let y = model.forward(&mut g, Direction::AB, xv)?;
                let loss = g.mean(y)?;
                g.backward(loss)?;
                super::phase("backward");
                drop(g.take_param_grads());
            }
        }
    }
    Ok(MemReport {
        peak_bytes: tracker.peak_bytes(),
        samples: tracker.phases(),
        input_pixels: dims.n * dims.h * dims.w,
        input_bytes: dims.len() * std::mem::size_of::<f32>(),
        balanced: tracker.is_balanced(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowStatus {
    Ok,
    /// Predicted peak above the cap; the size was not run.
    OverCap,
    /// Ran, but tracked bytes crossed the cap.
    ExceededCap,
}

impl RowStatus {
    fn as_str(self) -> &'static str {
        match self {
            RowStatus::Ok => "ok",
            RowStatus::OverCap => "over_cap",
            RowStatus::ExceededCap => "exceeded_cap",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "ok" => Some(RowStatus::Ok),
            "over_cap" => Some(RowStatus::OverCap),
            "exceeded_cap" => Some(RowStatus::ExceededCap),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub workload: Workload,
    pub cap_bytes: Option<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            workload: Workload::Forward,
            cap_bytes: Some(DEFAULT_CAP_BYTES),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SweepRow {
    pub size: usize,
    pub pixels: usize,
    pub peak_bytes: Option<usize>,
    pub predicted_bytes: usize,
    pub status: RowStatus,
}

/// Least-squares line `peak = slope * pixels + intercept`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// `None` with fewer than two distinct x values.
pub fn linear_fit(points: &[(f64, f64)]) -> Option<LinearFit> {
    let n = points.len() as f64;
    if points.len() < 2 {
        return None;
    }
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Some(LinearFit { slope, intercept, r2 })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub fit: Option<LinearFit>,
}

/// Whole-image generator passes at each square `size`. Sizes whose
/// predicted peak exceeds the cap are listed but not run.
pub fn memory_sweep(model: &GanModel, sizes: &[usize], config: SweepConfig) -> Result<SweepReport> {
    if sizes.is_empty() {
        return Err(Error::InvalidArgument("no sizes to sweep".into()));
    }
    if let Some(&bad) = sizes.iter().find(|&&s| s == 0 || s % GENERATOR_FACTOR != 0) {
        return Err(Error::InvalidArgument(format!(
            "size {bad} is not a positive multiple of {GENERATOR_FACTOR}"
        )));
    }
    let mut rows = Vec::with_capacity(sizes.len());
    for &size in sizes {
        let dims = Dims4::new(1, size, size, 3);
        let predicted = predicted_peak_bytes(model.arch(), dims);
        let mut row = SweepRow {
            size,
            pixels: size * size,
            peak_bytes: None,
            predicted_bytes: predicted,
            status: RowStatus::Ok,
        };
        if config.cap_bytes.is_some_and(|cap| predicted > cap) {
            log::info!("size {size}: predicted {predicted} bytes exceeds cap, skipped");
            row.status = RowStatus::OverCap;
            rows.push(row);
            continue;
        }
        let tracker = match config.cap_bytes {
            Some(cap) => MemTracker::with_cap(cap),
            None => MemTracker::new(),
        };
        let report = tracked_run_with(model, config.workload, dims, tracker.clone())?;
        row.peak_bytes = Some(report.peak_bytes);
        if tracker.cap_exceeded() {
            row.status = RowStatus::ExceededCap;
        }
        log::info!("size {size}: peak {} bytes", report.peak_bytes);
        rows.push(row);
    }
    let points: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.status == RowStatus::Ok)
        .filter_map(|r| r.peak_bytes.map(|p| (r.pixels as f64, p as f64)))
        .collect();
    Ok(SweepReport {
        fit: linear_fit(&points),
        rows,
    })
}

/// A synthetic RGB noise image.
pub fn noise_image(width: usize, height: usize, seed: u64) -> Result<ImageBuffer> {
    let mut rng = seeded_rng(seed);
    ImageBuffer::from_fn(width, height, |_, _| [rng.random(), rng.random(), rng.random()])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TiledConfig {
    pub tile: (usize, usize),
    pub stride: (usize, usize),
    pub workers: usize,
}

impl Default for TiledConfig {
    fn default() -> Self {
        Self {
            tile: (tiler::DEFAULT_TILE, tiler::DEFAULT_TILE),
            stride: (tiler::DEFAULT_STRIDE, tiler::DEFAULT_STRIDE),
            workers: 1,
        }
    }
}

/// Peak tracked bytes while translating an existing image tile by tile.
/// The image bitmap and blend buffers are not tensors and are not counted.
pub fn tiled_peak_for<T: Translator + ?Sized>(
    model: &T,
    img: &ImageBuffer,
    config: TiledConfig,
) -> Result<MemReport> {
    let tracker = MemTracker::new();
    {
        let _scope = tracker.enter();
        tiler::translate_with(
            model,
            Direction::AB,
            img,
            config.tile,
            config.stride,
            ScaleMode::Native,
            config.workers,
        )?;
    }
    Ok(MemReport {
        peak_bytes: tracker.peak_bytes(),
        samples: Vec::new(),
        input_pixels: img.width() * img.height(),
        input_bytes: 0,
        balanced: tracker.is_balanced(),
    })
}

/// [`tiled_peak_for`] on a synthetic `size`x`size` noise image.
pub fn tiled_peak<T: Translator + ?Sized>(model: &T, size: usize, config: TiledConfig) -> Result<MemReport> {
    let img = noise_image(size, size, size as u64)?;
    tiled_peak_for(model, &img, config)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReportRow {
    pub mode: String,
    pub size: usize,
    pub pixels: usize,
    pub peak_bytes: Option<usize>,
    pub status: RowStatus,
}

/// Whole-image sweep plus tiled peaks, as written by [`write_report`].
#[derive(Clone, Debug, PartialEq)]
pub struct ProfileReport {
    pub rows: Vec<ReportRow>,
    pub fit: Option<LinearFit>,
}

impl ProfileReport {
    pub fn new(sweep: &SweepReport, tiled: &[(usize, usize)]) -> Self {
        let mut rows: Vec<ReportRow> = sweep
            .rows
            .iter()
            .map(|r| ReportRow {
                mode: "whole".into(),
                size: r.size,
                pixels: r.pixels,
                peak_bytes: r.peak_bytes,
                status: r.status,
            })
            .collect();
        rows.extend(tiled.iter().map(|&(size, peak)| ReportRow {
            mode: "tiled".into(),
            size,
            pixels: size * size,
            peak_bytes: Some(peak),
            status: RowStatus::Ok,
        }));
        Self { rows, fit: sweep.fit }
    }

    pub fn rows_for<'a>(&'a self, mode: &'a str) -> impl Iterator<Item = &'a ReportRow> + 'a {
        self.rows.iter().filter(move |r| r.mode == mode)
    }
}

pub const REPORT_HEADER: &str = "mode,size,pixels,peak_bytes,status";

/// CSV rows then a `fit,slope,intercept,r2` line (`fit,undefined,,` when
/// fewer than two whole-image points ran).
pub fn write_report(report: &ProfileReport) -> String {
    let mut out = format!("{REPORT_HEADER}\n");
    for r in &report.rows {
        let peak = r.peak_bytes.map(|p| p.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{},{},{}", r.mode, r.size, r.pixels, peak, r.status.as_str());
    }
    match report.fit {
        Some(f) => {
            let _ = writeln!(out, "fit,{},{},{}", f.slope, f.intercept, f.r2);
        }
        None => out.push_str("fit,undefined,,\n"),
    }
    out
}

pub fn parse_report(text: &str) -> Result<ProfileReport> {
    let mut rows = Vec::new();
    let mut fit = None;
    let mut saw_fit = false;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line == REPORT_HEADER {
            continue;
        }
        let bad = || Error::InvalidArgument(format!("report line {}: {line}", i + 1));
        let f: Vec<&str> = line.split(',').collect();
        if f[0] == "fit" {
            if f.len() != 4 {
                return Err(bad());
            }
            saw_fit = true;
            if f[1] != "undefined" {
                let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
                fit = Some(LinearFit {
                    slope: num(f[1])?,
                    intercept: num(f[2])?,
                    r2: num(f[3])?,
                });
            }
            continue;
        }
        if f.len() != 5 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad());
        rows.push(ReportRow {
            mode: f[0].to_string(),
            size: num(f[1])?,
            pixels: num(f[2])?,
            peak_bytes: if f[3].is_empty() { None } else { Some(num(f[3])?) },
            status: RowStatus::parse(f[4]).ok_or_else(bad)?,
        });
    }
    if !saw_fit {
        return Err(Error::InvalidArgument("report has no fit line".into()));
    }
    Ok(ProfileReport { rows, fit })
}
