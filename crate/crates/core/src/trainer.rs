//! Alternating discriminator/generator updates on random subsample batches.
//!
//! One iteration draws a batch per domain, takes one Adam step on both
//! discriminators against gradient-detached fakes, then one Adam step on
//! both generators (shared core included) against the adversarial plus
//! cycle objective.
//!
//! A checkpoint directory holds:
//!
//! ```text
//! model.json  model.tgck          architecture + parameters
//! optim_gen.tgop optim_disc.tgop  Adam moments and step counters
//! trainer.json                    iteration, config, sampler RNG states
//! ```

use std::fs::{self, File};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gan::{self, Direction, Domain, GanArch, GanModel, LossWeights, Translator};
use crate::image_store::ImageBuffer;
use crate::memprof::MemTracker;
use crate::sampler::{seeded_rng, Sampler, SamplerConfig, SeededRng, TrainingBatch};
use crate::tensor::checkpoint::{load_optimizer, save_optimizer, write_atomic};
use crate::tensor::{AdamConfig, AdamState, Graph, Tensor4};

pub const LOG_FILE: &str = "train_log.csv";
pub const LOG_HEADER: &str = "iteration,disc_loss,gen_loss,cycle_loss,ms,peak_bytes";
pub const CHECKPOINT_DIR: &str = "checkpoint";
const STATE_FILE: &str = "trainer.json";
const OPT_GEN_FILE: &str = "optim_gen.tgop";
const OPT_DISC_FILE: &str = "optim_disc.tgop";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: u64,
    /// Write a checkpoint every this many iterations (and always at the end).
    pub checkpoint_every: u64,
    pub arch: GanArch,
    pub sampler_a: SamplerConfig,
    pub sampler_b: SamplerConfig,
    #[serde(default)]
    pub loss: LossWeights,
    #[serde(default)]
    pub adam: AdamConfig,
    /// Seeds the parameter initialization.
    pub seed: u64,
}

impl TrainConfig {
    /// Both domains sampled at `size`x`size` with batch `b`, seeds derived
    /// from `seed`.
    pub fn new(arch: GanArch, size: usize, batch_size: usize, iterations: u64, seed: u64) -> Self {
        Self {
            iterations,
            checkpoint_every: iterations,
            arch,
            sampler_a: SamplerConfig::new(size, size, batch_size, seed.wrapping_add(1)),
            sampler_b: SamplerConfig::new(size, size, batch_size, seed.wrapping_add(2)),
            loss: LossWeights::default(),
            adam: AdamConfig::default(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidArgument("iterations must be at least 1".into()));
        }
        if self.checkpoint_every == 0 || self.checkpoint_every > self.iterations {
            return Err(Error::InvalidArgument(format!(
                "checkpoint_every must lie in 1..={}",
                self.iterations
            )));
        }
        let (a, b) = (&self.sampler_a, &self.sampler_b);
        if (a.x_batch, a.y_batch, a.batch_size) != (b.x_batch, b.y_batch, b.batch_size) {
            return Err(Error::InvalidArgument(
                "both domains need the same batch size and resolution".into(),
            ));
        }
        if a.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        if a.x_batch % gan::DISCRIMINATOR_FACTOR != 0 || a.y_batch % gan::DISCRIMINATOR_FACTOR != 0 {
            return Err(Error::InvalidArgument(format!(
                "batch resolution {}x{} must be divisible by {}",
                a.x_batch,
                a.y_batch,
                gan::DISCRIMINATOR_FACTOR
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainLogRecord {
    pub iteration: u64,
    pub disc_loss: f64,
    pub gen_loss: f64,
    pub cycle_loss: f64,
    pub ms: f64,
    pub peak_bytes: usize,
}

impl TrainLogRecord {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{:.3},{}",
            self.iteration, self.disc_loss, self.gen_loss, self.cycle_loss, self.ms, self.peak_bytes
        )
    }

    pub fn parse_csv(line: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("malformed log line: {line}"));
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 6 {
            return Err(bad());
        }
        let float = |s: &str| s.parse::<f64>().map_err(|_| bad());
        Ok(Self {
            iteration: f[0].parse().map_err(|_| bad())?,
            disc_loss: float(f[1])?,
            gen_loss: float(f[2])?,
            cycle_loss: float(f[3])?,
            ms: float(f[4])?,
            peak_bytes: f[5].parse().map_err(|_| bad())?,
        })
    }
}

/// Read a log written by [`train`].
pub fn read_log(path: &Path) -> Result<Vec<TrainLogRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() || line.starts_with("iteration") {
            continue;
        }
        out.push(TrainLogRecord::parse_csv(&line)?);
    }
    Ok(out)
}

/// Losses of one iteration, before timing is attached.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub disc_loss: f64,
    pub gen_loss: f64,
    pub cycle_loss: f64,
}

fn check_finite(v: f64, iteration: u64, last_checkpoint: Option<&Path>) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFiniteLoss {
            iteration,
            last_checkpoint: last_checkpoint.map(Path::to_path_buf),
        })
    }
}

/// Discriminator update on real batches and detached translations.
/// Returns the loss evaluated before the update.
pub fn disc_step(
    model: &mut GanModel,
    opt: &mut AdamState,
    real_a: &Tensor4,
    real_b: &Tensor4,
    check: impl Fn(f64) -> Result<f64>,
) -> Result<f64> {
    let fake_b = model.translate(Direction::AB, real_a.detached())?;
    let fake_a = model.translate(Direction::BA, real_b.detached())?;
    let (loss, grads) = {
        let mut g = Graph::recording(model.store());
        g.set_trainable(model.discriminator_params());
        let ra = g.input(real_a.detached());
        let rb = g.input(real_b.detached());
        let fa = g.input(fake_a);
        let fb = g.input(fake_b);
        let sra = model.discriminate_var(&mut g, Domain::A, ra)?;
        let srb = model.discriminate_var(&mut g, Domain::B, rb)?;
        let sfa = model.discriminate_var(&mut g, Domain::A, fa)?;
        let sfb = model.discriminate_var(&mut g, Domain::B, fb)?;
        let loss = gan::lsgan_disc_loss(&mut g, [sra, srb], [sfa, sfb])?;
        let value = check(g.scalar(loss))?;
        g.backward(loss)?;
        (value, g.take_param_grads())
    };
    opt.step(model.store_mut(), &grads)?;
    Ok(loss)
}

/// Generator update on `w_gan * gen_loss + w_cycle * cycle_loss`.
/// Returns `(gen_loss, cycle_loss)` evaluated before the update.
pub fn gen_step(
    model: &mut GanModel,
    opt: &mut AdamState,
    weights: LossWeights,
    real_a: &Tensor4,
    real_b: &Tensor4,
    check: impl Fn(f64) -> Result<f64>,
) -> Result<(f64, f64)> {
    let (gen_loss, cycle_loss, grads) = {
        let m: &GanModel = model;
        let mut g = Graph::recording(m.store());
        g.set_trainable(m.generator_params());
        let a = g.input(real_a.detached());
        let b = g.input(real_b.detached());
        let fake_b = m.forward(&mut g, Direction::AB, a)?;
        let fake_a = m.forward(&mut g, Direction::BA, b)?;
        let rec_a = m.forward(&mut g, Direction::BA, fake_b)?;
        let rec_b = m.forward(&mut g, Direction::AB, fake_a)?;
        let sfa = m.discriminate_var(&mut g, Domain::A, fake_a)?;
        let sfb = m.discriminate_var(&mut g, Domain::B, fake_b)?;
        let adv = gan::lsgan_gen_loss(&mut g, [sfa, sfb])?;
        let la = gan::mae(&mut g, rec_a, a)?;
        let lb = gan::mae(&mut g, rec_b, b)?;
        let cyc = g.add(la, lb)?;
        let adv_w = g.scale(adv, weights.gan)?;
        let cyc_w = g.scale(cyc, weights.cycle)?;
        let total = g.add(adv_w, cyc_w)?;
        let gen_loss = check(g.scalar(adv))?;
        let cycle_loss = check(g.scalar(cyc))?;
        check(g.scalar(total))?;
        g.backward(total)?;
        (gen_loss, cycle_loss, g.take_param_grads())
    };
    opt.step(model.store_mut(), &grads)?;
    Ok((gen_loss, cycle_loss))
}

/// One full iteration on prepared batches: discriminators first, then
/// generators, one Adam step each.
pub fn train_step(
    model: &mut GanModel,
    batch_a: &TrainingBatch,
    batch_b: &TrainingBatch,
    opt_gen: &mut AdamState,
    opt_disc: &mut AdamState,
    weights: LossWeights,
) -> Result<StepLosses> {
    train_step_checked(model, batch_a, batch_b, opt_gen, opt_disc, weights, 0, None)
}

#[allow(clippy::too_many_arguments)]
fn train_step_checked(
    model: &mut GanModel,
    batch_a: &TrainingBatch,
    batch_b: &TrainingBatch,
    opt_gen: &mut AdamState,
    opt_disc: &mut AdamState,
    weights: LossWeights,
    iteration: u64,
    last_checkpoint: Option<&Path>,
) -> Result<StepLosses> {
    let (da, db) = (batch_a.tensor.dims(), batch_b.tensor.dims());
    if da != db {
        return Err(Error::ShapeMismatch {
            op: "train_step",
            expected: da,
            actual: db,
        });
    }
    let check = |v: f64| check_finite(v, iteration, last_checkpoint);
    let disc_loss = disc_step(model, opt_disc, &batch_a.tensor, &batch_b.tensor, check)?;
    let (gen_loss, cycle_loss) = gen_step(model, opt_gen, weights, &batch_a.tensor, &batch_b.tensor, check)?;
    Ok(StepLosses {
        disc_loss,
        gen_loss,
        cycle_loss,
    })
}

#[derive(Serialize, Deserialize)]
struct TrainerState {
    iteration: u64,
    config: TrainConfig,
    rng_a: SeededRng,
    rng_b: SeededRng,
}

pub struct Trainer {
    config: TrainConfig,
    model: GanModel,
    opt_gen: AdamState,
    opt_disc: AdamState,
    sampler_a: Sampler,
    sampler_b: Sampler,
    iteration: u64,
    last_checkpoint: Option<PathBuf>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = GanModel::new(config.arch, &mut seeded_rng(config.seed))?;
        let opt_gen = AdamState::new(config.adam, model.store(), model.generator_params().to_vec());
        let opt_disc = AdamState::new(config.adam, model.store(), model.discriminator_params().to_vec());
        Ok(Self {
            sampler_a: Sampler::new(config.sampler_a.clone()),
            sampler_b: Sampler::new(config.sampler_b.clone()),
            config,
            model,
            opt_gen,
            opt_disc,
            iteration: 0,
            last_checkpoint: None,
        })
    }

    /// Restore a trainer from a checkpoint directory.
    pub fn resume(dir: &Path) -> Result<Self> {
        let path = dir.join(STATE_FILE);
        let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let state: TrainerState = serde_json::from_slice(&text)?;
        state.config.validate()?;
        let model = gan::load_model(dir)?
            .into_gan()
            .ok_or_else(|| Error::Checkpoint("training checkpoint holds a stub model".into()))?;
        if *model.arch() != state.config.arch {
            return Err(Error::Checkpoint("model architecture differs from trainer config".into()));
        }
        let config = state.config;
        let mut opt_gen = AdamState::new(config.adam, model.store(), model.generator_params().to_vec());
        let mut opt_disc = AdamState::new(config.adam, model.store(), model.discriminator_params().to_vec());
        load_optimizer(&dir.join(OPT_GEN_FILE), &mut opt_gen, model.store())?;
        load_optimizer(&dir.join(OPT_DISC_FILE), &mut opt_disc, model.store())?;
        Ok(Self {
            sampler_a: Sampler::with_rng(config.sampler_a.clone(), state.rng_a),
            sampler_b: Sampler::with_rng(config.sampler_b.clone(), state.rng_b),
            config,
            model,
            opt_gen,
            opt_disc,
            iteration: state.iteration,
            last_checkpoint: Some(dir.to_path_buf()),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &GanModel {
        &self.model
    }

    pub fn into_model(self) -> GanModel {
        self.model
    }

    /// Iterations completed so far.
    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.config.iterations
    }

    /// Sample both domains and run one iteration. Peak bytes cover batch
    /// construction and both updates.
    pub fn step(&mut self, domain_a: &[ImageBuffer], domain_b: &[ImageBuffer]) -> Result<TrainLogRecord> {
        let tracker = MemTracker::new();
        let start = Instant::now();
        let losses = {
            let _scope = tracker.enter();
            let batch_a = self.sampler_a.next_batch(domain_a)?;
            let batch_b = self.sampler_b.next_batch(domain_b)?;
            train_step_checked(
                &mut self.model,
                &batch_a,
                &batch_b,
                &mut self.opt_gen,
                &mut self.opt_disc,
                self.config.loss,
                self.iteration + 1,
                self.last_checkpoint.as_deref(),
            )?
        };
        self.iteration += 1;
        Ok(TrainLogRecord {
            iteration: self.iteration,
            disc_loss: losses.disc_loss,
            gen_loss: losses.gen_loss,
            cycle_loss: losses.cycle_loss,
            ms: start.elapsed().as_secs_f64() * 1e3,
            peak_bytes: tracker.peak_bytes(),
        })
    }

    pub fn save_checkpoint(&mut self, dir: &Path) -> Result<()> {
        gan::save_model(dir, &self.model)?;
        save_optimizer(&dir.join(OPT_GEN_FILE), &self.opt_gen, self.model.store())?;
        save_optimizer(&dir.join(OPT_DISC_FILE), &self.opt_disc, self.model.store())?;
        let state = TrainerState {
            iteration: self.iteration,
            config: self.config.clone(),
            rng_a: self.sampler_a.rng().clone(),
            rng_b: self.sampler_b.rng().clone(),
        };
        let json = serde_json::to_vec_pretty(&state)?;
        write_atomic(&dir.join(STATE_FILE), |w| w.write_all(&json))?;
        self.last_checkpoint = Some(dir.to_path_buf());
        Ok(())
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub log_path: PathBuf,
    pub log: Vec<TrainLogRecord>,
}

fn open_log(out_dir: &Path, keep_through: u64) -> Result<(File, Vec<TrainLogRecord>)> {
    let path = out_dir.join(LOG_FILE);
    let kept: Vec<TrainLogRecord> = if keep_through > 0 && path.exists() {
        read_log(&path)?
            .into_iter()
            .filter(|r| r.iteration <= keep_through)
            .collect()
    } else {
        Vec::new()
    };
    let mut text = format!("{LOG_HEADER}\n");
    for r in &kept {
        text.push_str(&r.to_csv());
        text.push('\n');
    }
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    let file = fs::OpenOptions::new()
        .append(true)
        .open(&path)
        .map_err(|e| Error::io(&path, e))?;
    Ok((file, kept))
}

/// Run (or continue) training until the iteration budget is spent.
///
/// The log goes to `out_dir/train_log.csv`, checkpoints to
/// `out_dir/checkpoint/`. Pass a trainer from [`Trainer::resume`] to
/// continue an interrupted run.
pub fn run(
    mut trainer: Trainer,
    domain_a: &[ImageBuffer],
    domain_b: &[ImageBuffer],
    out_dir: &Path,
) -> Result<TrainOutcome> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    for (img_set, cfg) in [(domain_a, &trainer.config.sampler_a), (domain_b, &trainer.config.sampler_b)] {
        if img_set.is_empty() {
            return Err(Error::InvalidArgument("domain has no images".into()));
        }
        for img in img_set {
            cfg.validate_for(img)?;
        }
    }
    let ckpt = out_dir.join(CHECKPOINT_DIR);
    let log_path = out_dir.join(LOG_FILE);
    let (mut log_file, mut log) = open_log(out_dir, trainer.iteration())?;
    let every = trainer.config.checkpoint_every;
    while !trainer.is_done() {
        let record = trainer.step(domain_a, domain_b)?;
        writeln!(log_file, "{}", record.to_csv()).map_err(|e| Error::io(&log_path, e))?;
        log::debug!("{}", record.to_csv());
        log.push(record);
        if record.iteration % every == 0 || trainer.is_done() {
            trainer.save_checkpoint(&ckpt)?;
            log::info!("iteration {}: checkpoint written to {}", record.iteration, ckpt.display());
        }
    }
    log_file.sync_all().map_err(|e| Error::io(&log_path, e))?;
    Ok(TrainOutcome {
        checkpoint: ckpt,
        log_path,
        log,
    })
}

/// Fresh training run from `config`.
pub fn train(
    config: TrainConfig,
    domain_a: &[ImageBuffer],
    domain_b: &[ImageBuffer],
    out_dir: &Path,
) -> Result<TrainOutcome> {
    run(Trainer::new(config)?, domain_a, domain_b, out_dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image_store::ImageBuffer;

    fn noise(seed: u64, size: usize) -> ImageBuffer {
        use rand::Rng;
        let mut rng = seeded_rng(seed);
        ImageBuffer::from_fn(size, size, |_, _| {
            let v: u8 = rng.random();
            [v, v, v]
        })
        .unwrap()
    }

    fn tiny_config(iterations: u64) -> TrainConfig {
        TrainConfig::new(GanArch::with_base(2), 16, 2, iterations, 11)
    }

    #[test]
    fn config_validation() {
        assert!(tiny_config(1).validate().is_ok());
        let mut c = tiny_config(1);
        c.iterations = 0;
        assert!(c.validate().is_err());
        let mut c = tiny_config(3);
        c.checkpoint_every = 4;
        assert!(c.validate().is_err());
        let mut c = tiny_config(3);
        c.sampler_b.batch_size = 3;
        assert!(c.validate().is_err());
        let mut c = tiny_config(3);
        c.sampler_a.x_batch = 24;
        c.sampler_b.x_batch = 24;
        assert!(c.validate().is_err());
    }

    #[test]
    fn one_iteration_one_record_one_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let out = train(tiny_config(1), &[noise(1, 40)], &[noise(2, 48)], dir.path()).unwrap();
        assert_eq!(out.log.len(), 1);
        assert!(out.checkpoint.join("model.tgck").exists());
        assert!(out.checkpoint.join(STATE_FILE).exists());
        let back = read_log(&out.log_path).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].cycle_loss, out.log[0].cycle_loss);
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        let mut config = tiny_config(1);
        config.adam.lr = 0.0;
        let mut t = Trainer::new(config).unwrap();
        let before: Vec<Vec<f32>> = t.model().store().iter().map(|(_, p)| p.tensor.data().to_vec()).collect();
        t.step(&[noise(1, 32)], &[noise(2, 32)]).unwrap();
        let after: Vec<Vec<f32>> = t.model().store().iter().map(|(_, p)| p.tensor.data().to_vec()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn log_line_round_trip() {
        let r = TrainLogRecord {
            iteration: 7,
            disc_loss: 0.1 + 0.2,
            gen_loss: 1.0 / 3.0,
            cycle_loss: 2.5e-7,
            ms: 12.5,
            peak_bytes: 123_456,
        };
        let back = TrainLogRecord::parse_csv(&r.to_csv()).unwrap();
        assert_eq!(back, r);
    }
}
