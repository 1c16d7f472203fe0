//! JSON run files, one object per command. Unknown keys are rejected,
//! relative paths resolve against the file's directory, and command-line
//! flags override file values.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use tilegan::gan::{Direction, GanArch};
use tilegan::memprof::Workload;
use tilegan::tiler::{ScaleMode, DEFAULT_STRIDE, DEFAULT_TILE};
use tilegan::trainer::TrainConfig;

use crate::{DirectionArg, ProfileArgs, ScaleModeArg, TrainArgs, TranslateArgs};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFile {
    pub domain_a: Vec<PathBuf>,
    pub domain_b: Vec<PathBuf>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    /// Overrides `trainer.seed` and both sampler seeds.
    #[serde(default)]
    pub seed: Option<u64>,
    pub trainer: TrainConfig,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TranslateFile {
    pub checkpoint: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub tile: Option<[usize; 2]>,
    pub stride: Option<[usize; 2]>,
    pub scale_mode: Option<ScaleModeName>,
    /// Network input size in rescale mode; defaults to the tile size
    /// rounded up to a multiple of 8.
    pub rescale_to: Option<[usize; 2]>,
    pub workers: Option<usize>,
    pub direction: Option<Direction>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleModeName {
    Native,
    Rescale,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileFile {
    pub checkpoint: Option<PathBuf>,
    /// Width of the random model used without a checkpoint.
    pub base_channels: Option<usize>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub sizes: Option<Vec<usize>>,
    pub tiled_sizes: Option<Vec<usize>>,
    pub tile: Option<[usize; 2]>,
    pub stride: Option<[usize; 2]>,
    pub workers: Option<usize>,
    pub workload: Option<Workload>,
    /// Whole-image sizes predicted above this many bytes are skipped;
    /// `null` disables the cap.
    #[serde(default = "default_cap")]
    pub cap_bytes: Option<usize>,
}

fn default_cap() -> Option<usize> {
    Some(tilegan::memprof::DEFAULT_CAP_BYTES)
}

fn read_json<T: DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("invalid config {}", path.display()))
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn rebase(base: &Path, p: PathBuf) -> PathBuf {
    if p.is_absolute() {
        p
    } else {
        base.join(p)
    }
}

fn pair(v: Option<Vec<usize>>) -> Option<[usize; 2]> {
    v.map(|v| [v[0], v[1]])
}

fn require_file(what: &str, p: &Path) -> anyhow::Result<()> {
    if !p.is_file() {
        bail!("{what} {} does not exist", p.display());
    }
    Ok(())
}

#[derive(Debug)]
pub struct TrainPlan {
    pub domain_a: Vec<PathBuf>,
    pub domain_b: Vec<PathBuf>,
    pub out: PathBuf,
    pub config: TrainConfig,
}

pub fn train_plan(args: &TrainArgs) -> anyhow::Result<TrainPlan> {
    let Some(path) = &args.config else {
        bail!("train needs --config PATH");
    };
    let file: TrainFile = read_json(path)?;
    let base = base_dir(path);
    let mut config = file.trainer;
    if let Some(seed) = args.seed.or(file.seed) {
        config.seed = seed;
        config.sampler_a.seed = seed.wrapping_add(1);
        config.sampler_b.seed = seed.wrapping_add(2);
    }
    config.validate().context("invalid key under trainer")?;
    let out = match (&args.out, file.out) {
        (Some(o), _) => o.clone(),
        (None, Some(o)) => rebase(&base, o),
        (None, None) => PathBuf::from("run"),
    };
    let domain_a: Vec<PathBuf> = file.domain_a.into_iter().map(|p| rebase(&base, p)).collect();
    let domain_b: Vec<PathBuf> = file.domain_b.into_iter().map(|p| rebase(&base, p)).collect();
    for (key, paths) in [("domain_a", &domain_a), ("domain_b", &domain_b)] {
        if paths.is_empty() {
            bail!("{key} lists no images");
        }
        for p in paths {
            require_file(key, p)?;
        }
    }
    Ok(TrainPlan {
        domain_a,
        domain_b,
        out,
        config,
    })
}

#[derive(Debug)]
pub struct TranslatePlan {
    pub checkpoint: PathBuf,
    pub input: PathBuf,
    pub out: PathBuf,
    pub tile: (usize, usize),
    pub stride: (usize, usize),
    pub mode: ScaleMode,
    pub workers: usize,
    pub direction: Direction,
}

pub fn translate_plan(args: &TranslateArgs) -> anyhow::Result<TranslatePlan> {
    let (file, base) = match &args.config {
        Some(path) => (read_json::<TranslateFile>(path)?, base_dir(path)),
        None => (TranslateFile::default(), PathBuf::new()),
    };
    let checkpoint = match (&args.checkpoint, file.checkpoint) {
        (Some(c), _) => c.clone(),
        (None, Some(c)) => rebase(&base, c),
        (None, None) => bail!("no checkpoint given"),
    };
    let input = match (&args.input, file.input) {
        (Some(i), _) => i.clone(),
        (None, Some(i)) => rebase(&base, i),
        (None, None) => bail!("no input image given"),
    };
    let out = match (&args.out, file.out) {
        (Some(o), _) => o.clone(),
        (None, Some(o)) => rebase(&base, o),
        (None, None) => bail!("no output path given (--out)"),
    };
    require_file("checkpoint manifest", &checkpoint.join(tilegan::gan::MANIFEST_FILE))?;
    require_file("input image", &input)?;
    let [tw, th] = pair(args.tile.clone()).or(file.tile).unwrap_or([DEFAULT_TILE; 2]);
    let [sx, sy] = pair(args.stride.clone()).or(file.stride).unwrap_or([DEFAULT_STRIDE; 2]);
    let mode_name = match args.scale_mode {
        Some(ScaleModeArg::Native) => ScaleModeName::Native,
        Some(ScaleModeArg::Rescale) => ScaleModeName::Rescale,
        None => file.scale_mode.unwrap_or(ScaleModeName::Native),
    };
    let mode = match mode_name {
        ScaleModeName::Native => ScaleMode::Native,
        ScaleModeName::Rescale => {
            let [x_batch, y_batch] = file.rescale_to.unwrap_or([tw.next_multiple_of(8), th.next_multiple_of(8)]);
            ScaleMode::Rescale { x_batch, y_batch }
        }
    };
    let workers = args.workers.or(file.workers).unwrap_or(1);
    if workers == 0 {
        bail!("workers must be at least 1");
    }
    let direction = match args.direction {
        Some(DirectionArg::Ab) => Direction::AB,
        Some(DirectionArg::Ba) => Direction::BA,
        None => file.direction.unwrap_or(Direction::AB),
    };
    Ok(TranslatePlan {
        checkpoint,
        input,
        out,
        tile: (tw, th),
        stride: (sx, sy),
        mode,
        workers,
        direction,
    })
}

#[derive(Debug)]
pub struct ProfilePlan {
    pub checkpoint: Option<PathBuf>,
    pub arch: GanArch,
    pub seed: u64,
    pub out: PathBuf,
    pub sizes: Vec<usize>,
    pub tiled_sizes: Vec<usize>,
    pub tile: (usize, usize),
    pub stride: (usize, usize),
    pub workers: usize,
    pub workload: Workload,
    pub cap_bytes: Option<usize>,
}

pub const DEFAULT_PROFILE_SIZES: [usize; 3] = [128, 256, 512];

pub fn profile_plan(args: &ProfileArgs) -> anyhow::Result<ProfilePlan> {
    let (file, base) = match &args.config {
        Some(path) => (read_json::<ProfileFile>(path)?, base_dir(path)),
        None => (
            ProfileFile {
                cap_bytes: default_cap(),
                ..Default::default()
            },
            PathBuf::new(),
        ),
    };
    let checkpoint = match (&args.checkpoint, file.checkpoint) {
        (Some(c), _) => Some(c.clone()),
        (None, c) => c.map(|c| rebase(&base, c)),
    };
    if let Some(c) = &checkpoint {
        require_file("checkpoint manifest", &c.join(tilegan::gan::MANIFEST_FILE))?;
    }
    let out = match (&args.out, file.out) {
        (Some(o), _) => o.clone(),
        (None, Some(o)) => rebase(&base, o),
        (None, None) => PathBuf::from("profile.csv"),
    };
    let sizes = args
        .sizes
        .clone()
        .or(file.sizes)
        .unwrap_or_else(|| DEFAULT_PROFILE_SIZES.to_vec());
    if sizes.is_empty() {
        bail!("sizes is empty");
    }
    let tiled_sizes = args.tiled_sizes.clone().or(file.tiled_sizes).unwrap_or_else(|| sizes.clone());
    let [tw, th] = pair(args.tile.clone()).or(file.tile).unwrap_or([DEFAULT_TILE; 2]);
    let [sx, sy] = pair(args.stride.clone()).or(file.stride).unwrap_or([DEFAULT_STRIDE; 2]);
    for &s in sizes.iter().chain(&tiled_sizes) {
        if s == 0 || s % tilegan::gan::GENERATOR_FACTOR != 0 {
            bail!("size {s} is not a positive multiple of {}", tilegan::gan::GENERATOR_FACTOR);
        }
    }
    for &s in &tiled_sizes {
        if s < tw || s < th {
            bail!("tiled size {s} is smaller than the {tw}x{th} tile");
        }
    }
    let workers = args.workers.or(file.workers).unwrap_or(1);
    if workers == 0 {
        bail!("workers must be at least 1");
    }
    Ok(ProfilePlan {
        checkpoint,
        arch: GanArch::with_base(file.base_channels.unwrap_or(64)),
        seed: args.seed.or(file.seed).unwrap_or(0),
        out,
        sizes,
        tiled_sizes,
        tile: (tw, th),
        stride: (sx, sy),
        workers,
        workload: file.workload.unwrap_or_default(),
        cap_bytes: file.cap_bytes,
    })
}
