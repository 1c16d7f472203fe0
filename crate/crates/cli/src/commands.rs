use std::fs;
use std::path::Path;

use anyhow::{anyhow, Context};
use tilegan::gan::{load_model, GanModel, LoadedModel};
use tilegan::image_store::{image_dimensions, load_image, save_png, ImageBuffer};
use tilegan::memprof::{memory_sweep, noise_image, tiled_peak_for, write_report, ProfileReport, RowStatus, SweepConfig, TiledConfig};
use tilegan::sampler::{count_subsamples, seeded_rng};
use tilegan::tiler::{default_plan, translate_with};
use tilegan::trainer;

use crate::config::{profile_plan, train_plan, translate_plan};
use crate::exit::{usage, Classify, CmdResult, Failure};
use crate::{InfoArgs, ProfileArgs, TrainArgs, TranslateArgs};

/// Subsample side used by `info`.
pub const INFO_BATCH: u64 = 128;

fn load_images(paths: &[std::path::PathBuf]) -> CmdResult<Vec<ImageBuffer>> {
    paths.iter().map(|p| load_image(p).usage()).collect()
}

fn load_checkpoint(dir: &Path) -> CmdResult<LoadedModel> {
    load_model(dir)
        .with_context(|| format!("cannot load checkpoint {}", dir.display()))
        .usage()
}

pub fn train(args: TrainArgs) -> CmdResult {
    let plan = train_plan(&args).usage()?;
    let a = load_images(&plan.domain_a)?;
    let b = load_images(&plan.domain_b)?;
    for (key, imgs, cfg) in [
        ("domain_a", &a, &plan.config.sampler_a),
        ("domain_b", &b, &plan.config.sampler_b),
    ] {
        for img in imgs.iter() {
            cfg.validate_for(img).with_context(|| format!("{key} image too small")).usage()?;
        }
    }
    log::info!(
        "training {} iterations at {}x{}, batch {}",
        plan.config.iterations,
        plan.config.sampler_a.x_batch,
        plan.config.sampler_a.y_batch,
        plan.config.sampler_a.batch_size
    );
    let outcome = trainer::train(plan.config, &a, &b, &plan.out).runtime()?;
    println!("{}", outcome.checkpoint.display());
    Ok(())
}

pub fn translate(args: TranslateArgs) -> CmdResult {
    let plan = translate_plan(&args).usage()?;
    let (w, h) = image_dimensions(&plan.input).usage()?;
    default_plan(w, h, plan.tile, plan.stride, plan.mode)
        .context("tile geometry")
        .usage()?;
    let model = load_checkpoint(&plan.checkpoint)?;
    let img = load_image(&plan.input).usage()?;
    let out = translate_with(&model, plan.direction, &img, plan.tile, plan.stride, plan.mode, plan.workers).runtime()?;
    if let Some(parent) = plan.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).runtime()?;
    }
    save_png(&out, &plan.out).runtime()?;
    println!("{}", plan.out.display());
    Ok(())
}

pub fn profile(args: ProfileArgs) -> CmdResult {
    let plan = profile_plan(&args).usage()?;
    let model = match &plan.checkpoint {
        Some(dir) => load_checkpoint(dir)?
            .into_gan()
            .ok_or_else(|| usage(format!("{} holds a stub model; profile needs a network", dir.display())))?,
        None => GanModel::new(plan.arch, &mut seeded_rng(plan.seed)).usage()?,
    };
    let sweep = memory_sweep(
        &model,
        &plan.sizes,
        SweepConfig {
            workload: plan.workload,
            cap_bytes: plan.cap_bytes,
        },
    )
    .runtime()?;
    let tiled_cfg = TiledConfig {
        tile: plan.tile,
        stride: plan.stride,
        workers: plan.workers,
    };
    let mut tiled = Vec::with_capacity(plan.tiled_sizes.len());
    for &size in &plan.tiled_sizes {
        let img = noise_image(size, size, plan.seed ^ size as u64).runtime()?;
        let report = tiled_peak_for(&model, &img, tiled_cfg).runtime()?;
        log::info!("tiled {size}: peak {} bytes", report.peak_bytes);
        tiled.push((size, report.peak_bytes));
    }
    let text = write_report(&ProfileReport::new(&sweep, &tiled));
    if let Some(parent) = plan.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).runtime()?;
    }
    fs::write(&plan.out, &text)
        .with_context(|| format!("cannot write {}", plan.out.display()))
        .runtime()?;
    print!("{text}");
    if sweep.rows.iter().all(|r| r.status != RowStatus::Ok) {
        return Err(Failure::Runtime(anyhow!("every whole-image size hit the memory cap")));
    }
    Ok(())
}

/// `w·h / 10⁶` rounded half-up to two decimals.
pub fn megapixels(width: u64, height: u64) -> String {
    let hundredths = (width * height + 5_000) / 10_000;
    format!("{}.{:02}", hundredths / 100, hundredths % 100)
}

pub fn info_lines(width: u64, height: u64) -> String {
    let count = if width >= INFO_BATCH && height >= INFO_BATCH {
        count_subsamples(width, height, INFO_BATCH, INFO_BATCH).unwrap_or(0)
    } else {
        0
    };
    format!(
        "width: {width}\nheight: {height}\nmegapixels: {}\nsubsamples_{INFO_BATCH}x{INFO_BATCH}: {count}\n",
        megapixels(width, height)
    )
}

pub fn info(args: InfoArgs) -> CmdResult {
    let (w, h) = image_dimensions(&args.image).usage()?;
    print!("{}", info_lines(w as u64, h as u64));
    Ok(())
}
