//! Two-domain translation GAN with a shared latent core.
//!
//! Each generator is `decoder_target ∘ shared_core ∘ encoder_source`:
//!
//! | stage            | layers                                             |
//! |------------------|----------------------------------------------------|
//! | encoder (each)   | conv 7×7 (b) s1, 3×3 (2b) s2, 3×3 (4b) s2, 3×3 (8b) s2, LeakyReLU; 3 residual blocks |
//! | shared core      | 2 residual blocks, same parameters for both directions |
//! | decoder (each)   | 3 residual blocks; up-conv 3×3 (4b), (2b), (b) s2 LeakyReLU; 3×3 (3) s1 Tanh |
//!
//! with `b = 64` for the full-size model. Residual blocks are
//! conv → instance norm → ReLU → conv → instance norm plus the identity
//! shortcut. Discriminators are 3×3 stride-2 convs (b, 2b, 4b, 8b) and a
//! 1×1 (1) conv, all LeakyReLU, producing a patch score map at 1/16
//! resolution.

mod io;
mod losses;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use io::{load_model, save_model, save_stub, LoadedModel, ModelManifest, ModelSpec, MANIFEST_FILE, PARAMS_FILE};
pub use losses::{cycle_loss, gan_losses, lsgan_disc_loss, lsgan_gen_loss, mae, LossWeights};

use crate::error::{Error, Result};
use crate::memprof;
use crate::tensor::{
    Activation, Dims4, Graph, LayerKind, LayerSpec, Norm, ParamId, ParamStore, ResidualVars, Tensor4, Var,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Domain {
    A,
    B,
}

impl Domain {
    fn index(self) -> usize {
        match self {
            Domain::A => 0,
            Domain::B => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    #[serde(alias = "a2b")]
    AB,
    #[serde(alias = "b2a")]
    BA,
}

impl Direction {
    pub fn source(self) -> Domain {
        match self {
            Direction::AB => Domain::A,
            Direction::BA => Domain::B,
        }
    }

    pub fn target(self) -> Domain {
        match self {
            Direction::AB => Domain::B,
            Direction::BA => Domain::A,
        }
    }

    pub fn reverse(self) -> Direction {
        match self {
            Direction::AB => Direction::BA,
            Direction::BA => Direction::AB,
        }
    }
}

impl std::str::FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ab" | "a2b" => Ok(Direction::AB),
            "ba" | "b2a" => Ok(Direction::BA),
            _ => Err(Error::InvalidArgument(format!("unknown direction {s:?} (use ab or ba)"))),
        }
    }
}

/// Generator spatial dims must be divisible by this (three stride-2 stages).
pub const GENERATOR_FACTOR: usize = 8;
/// Discriminator spatial dims must be divisible by this (four stride-2 stages).
pub const DISCRIMINATOR_FACTOR: usize = 16;

fn default_slope() -> f32 {
    0.2
}

fn default_eps() -> f32 {
    1e-5
}

/// Network width and the few scalars the layer table leaves open.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GanArch {
    /// Channels of the first layer; later layers use 2x, 4x, 8x.
    pub base_channels: usize,
    #[serde(default = "default_slope")]
    pub leaky_slope: f32,
    #[serde(default = "default_eps")]
    pub norm_eps: f32,
}

impl Default for GanArch {
    fn default() -> Self {
        Self::with_base(64)
    }
}

impl GanArch {
    /// Full-size model: 64/128/256/512 channels.
    pub fn full() -> Self {
        Self::with_base(64)
    }

    pub fn with_base(base_channels: usize) -> Self {
        Self {
            base_channels,
            leaky_slope: default_slope(),
            norm_eps: default_eps(),
        }
    }

    fn leaky(&self) -> Activation {
        Activation::LeakyRelu(self.leaky_slope)
    }

    pub fn latent_channels(&self) -> usize {
        8 * self.base_channels
    }

    fn conv_spec(&self, kind: LayerKind, k: usize, out: usize, stride: usize, act: Activation) -> LayerSpec {
        LayerSpec {
            kind,
            filter_size: k,
            out_channels: out,
            norm: Norm::None,
            activation: act,
            stride,
            shared: false,
        }
    }

    fn residual_spec(&self, shared: bool) -> LayerSpec {
        LayerSpec {
            kind: LayerKind::Residual,
            filter_size: 3,
            out_channels: self.latent_channels(),
            norm: Norm::Instance,
            activation: Activation::Relu,
            stride: 1,
            shared,
        }
    }

    /// The generator layer table, one entry per layer or residual block.
    pub fn generator_layers(&self) -> Vec<LayerSpec> {
        let b = self.base_channels;
        let mut layers = vec![
            self.conv_spec(LayerKind::DownConv, 7, b, 1, self.leaky()),
            self.conv_spec(LayerKind::DownConv, 3, 2 * b, 2, self.leaky()),
            self.conv_spec(LayerKind::DownConv, 3, 4 * b, 2, self.leaky()),
            self.conv_spec(LayerKind::DownConv, 3, 8 * b, 2, self.leaky()),
        ];
        layers.extend((0..3).map(|_| self.residual_spec(false)));
        layers.extend((0..2).map(|_| self.residual_spec(true)));
        layers.extend((0..3).map(|_| self.residual_spec(false)));
        layers.extend([
            self.conv_spec(LayerKind::UpConv, 3, 4 * b, 2, self.leaky()),
            self.conv_spec(LayerKind::UpConv, 3, 2 * b, 2, self.leaky()),
            self.conv_spec(LayerKind::UpConv, 3, b, 2, self.leaky()),
            self.conv_spec(LayerKind::UpConv, 3, 3, 1, Activation::Tanh),
        ]);
        layers
    }

    pub fn discriminator_layers(&self) -> Vec<LayerSpec> {
        let b = self.base_channels;
        vec![
            self.conv_spec(LayerKind::DownConv, 3, b, 2, self.leaky()),
            self.conv_spec(LayerKind::DownConv, 3, 2 * b, 2, self.leaky()),
            self.conv_spec(LayerKind::DownConv, 3, 4 * b, 2, self.leaky()),
            self.conv_spec(LayerKind::DownConv, 3, 8 * b, 2, self.leaky()),
            self.conv_spec(LayerKind::DownConv, 1, 1, 1, self.leaky()),
        ]
    }

    fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(Error::InvalidArgument("base_channels must be positive".into()));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::InvalidArgument("leaky_slope must lie in (0, 1)".into()));
        }
        if !(self.norm_eps > 0.0) {
            return Err(Error::InvalidArgument("norm_eps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct ConvLayer {
    weight: ParamId,
    bias: ParamId,
    stride: usize,
    pad: usize,
    transposed: bool,
    activation: Activation,
}

impl ConvLayer {
    fn forward<'p>(&self, g: &mut Graph<'p>, x: Var) -> Result<Var> {
        let w = g.param(self.weight)?;
        let b = g.param(self.bias)?;
        let y = if self.transposed {
            g.conv_transpose2d(x, w, b, self.stride, self.pad, self.stride - 1)?
        } else {
            g.conv2d(x, w, b, self.stride, self.pad)?
        };
        match self.activation {
            Activation::None => Ok(y),
            act => g.activation(y, act),
        }
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    conv1: (ParamId, ParamId),
    norm1: (ParamId, ParamId),
    conv2: (ParamId, ParamId),
    norm2: (ParamId, ParamId),
    eps: f32,
}

impl ResBlock {
    fn forward<'p>(&self, g: &mut Graph<'p>, x: Var) -> Result<Var> {
        let vars = ResidualVars {
            conv1: (g.param(self.conv1.0)?, g.param(self.conv1.1)?),
            norm1: (g.param(self.norm1.0)?, g.param(self.norm1.1)?),
            conv2: (g.param(self.conv2.0)?, g.param(self.conv2.1)?),
            norm2: (g.param(self.norm2.0)?, g.param(self.norm2.1)?),
        };
        g.residual_block(x, &vars, self.eps)
    }
}

#[derive(Clone, Debug)]
struct Encoder {
    down: Vec<ConvLayer>,
    res: Vec<ResBlock>,
}

#[derive(Clone, Debug)]
struct Decoder {
    res: Vec<ResBlock>,
    up: Vec<ConvLayer>,
}

/// Weight/bias registration with fan-in Gaussian init.
struct Builder<'a, R: Rng> {
    store: &'a mut ParamStore,
    rng: &'a mut R,
}

impl<R: Rng> Builder<'_, R> {
    fn conv(&mut self, name: &str, spec: &LayerSpec, in_ch: usize) -> Result<ConvLayer> {
        let k = spec.filter_size;
        let std = (2.0 / (k * k * in_ch) as f32).sqrt();
        let transposed = spec.kind == LayerKind::UpConv && spec.stride > 1;
        // transposed weights are laid out (in, k, k, out), plain ones (out, k, k, in)
        let dims = if transposed {
            Dims4::new(in_ch, k, k, spec.out_channels)
        } else {
            Dims4::new(spec.out_channels, k, k, in_ch)
        };
        let weight = self.store.add(format!("{name}.weight"), Tensor4::randn(dims, std, self.rng))?;
        let bias = self.store.add(
            format!("{name}.bias"),
            Tensor4::zeros(Dims4::new(1, 1, 1, spec.out_channels)),
        )?;
        Ok(ConvLayer {
            weight,
            bias,
            stride: spec.stride,
            pad: spec.padding(),
            transposed,
            activation: spec.activation,
        })
    }

    fn residual(&mut self, name: &str, channels: usize, eps: f32) -> Result<ResBlock> {
        let spec = LayerSpec {
            kind: LayerKind::DownConv,
            filter_size: 3,
            out_channels: channels,
            norm: Norm::Instance,
            activation: Activation::None,
            stride: 1,
            shared: false,
        };
        let c1 = self.conv(&format!("{name}.conv1"), &spec, channels)?;
        let n1 = self.norm(&format!("{name}.norm1"), channels)?;
        let c2 = self.conv(&format!("{name}.conv2"), &spec, channels)?;
        let n2 = self.norm(&format!("{name}.norm2"), channels)?;
        Ok(ResBlock {
            conv1: (c1.weight, c1.bias),
            norm1: n1,
            conv2: (c2.weight, c2.bias),
            norm2: n2,
            eps,
        })
    }

    fn norm(&mut self, name: &str, channels: usize) -> Result<(ParamId, ParamId)> {
        let d = Dims4::new(1, 1, 1, channels);
        let gamma = self.store.add(format!("{name}.gamma"), Tensor4::filled(d, 1.0))?;
        let beta = self.store.add(format!("{name}.beta"), Tensor4::zeros(d))?;
        Ok((gamma, beta))
    }
}

/// Anything that can translate between the two domains inside a graph.
pub trait Translator: Sync {
    fn param_store(&self) -> Option<&ParamStore>;

    fn forward<'p>(&'p self, g: &mut Graph<'p>, dir: Direction, x: Var) -> Result<Var>;

    /// Forward-only translation of a batch.
    fn translate(&self, dir: Direction, x: Tensor4) -> Result<Tensor4> {
        let mut g = match self.param_store() {
            Some(store) => Graph::inference(store),
            None => Graph::standalone_inference(),
        };
        let xv = g.input(x);
        let y = self.forward(&mut g, dir, xv)?;
        Ok(g.into_value(y))
    }
}

/// Fixed-output generators for exercising the pipeline without a trained
/// network.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StubGenerator {
    Identity,
    Constant(f32),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StubPair {
    pub ab: StubGenerator,
    pub ba: StubGenerator,
}

impl StubPair {
    pub fn identity() -> Self {
        Self {
            ab: StubGenerator::Identity,
            ba: StubGenerator::Identity,
        }
    }
}

impl Translator for StubPair {
    fn param_store(&self) -> Option<&ParamStore> {
        None
    }

    fn forward<'p>(&'p self, g: &mut Graph<'p>, dir: Direction, x: Var) -> Result<Var> {
        let stub = match dir {
            Direction::AB => self.ab,
            Direction::BA => self.ba,
        };
        match stub {
            StubGenerator::Identity => Ok(x),
            StubGenerator::Constant(v) => {
                let dims = g.dims(x);
                Ok(g.input(Tensor4::filled(dims, v)))
            }
        }
    }
}

pub struct GanModel {
    arch: GanArch,
    store: ParamStore,
    encoders: [Encoder; 2],
    shared: Vec<ResBlock>,
    decoders: [Decoder; 2],
    discriminators: [Vec<ConvLayer>; 2],
    generator_params: Vec<ParamId>,
    discriminator_params: Vec<ParamId>,
    shared_params: Vec<ParamId>,
}

impl GanModel {
    /// Build and randomly initialize all four networks.
    pub fn new<R: Rng>(arch: GanArch, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let mut store = ParamStore::new();
        let gen_layers = arch.generator_layers();
        let disc_layers = arch.discriminator_layers();
        let latent = arch.latent_channels();
        let eps = arch.norm_eps;
        let mut b = Builder {
            store: &mut store,
            rng,
        };

        let build_encoder = |b: &mut Builder<'_, R>, tag: &str| -> Result<Encoder> {
            let mut in_ch = 3;
            let mut down = Vec::new();
            for (i, spec) in gen_layers.iter().filter(|l| l.kind == LayerKind::DownConv).enumerate() {
                down.push(b.conv(&format!("enc_{tag}.down{i}"), spec, in_ch)?);
                in_ch = spec.out_channels;
            }
            let res = (0..3)
                .map(|i| b.residual(&format!("enc_{tag}.res{i}"), latent, eps))
                .collect::<Result<_>>()?;
            Ok(Encoder { down, res })
        };
        let enc_a = build_encoder(&mut b, "a")?;
        let enc_b = build_encoder(&mut b, "b")?;
        let shared = (0..2)
            .map(|i| b.residual(&format!("shared.res{i}"), latent, eps))
            .collect::<Result<Vec<_>>>()?;

        let build_decoder = |b: &mut Builder<'_, R>, tag: &str| -> Result<Decoder> {
            let res = (0..3)
                .map(|i| b.residual(&format!("dec_{tag}.res{i}"), latent, eps))
                .collect::<Result<_>>()?;
            let mut in_ch = latent;
            let mut up = Vec::new();
            for (i, spec) in gen_layers.iter().filter(|l| l.kind == LayerKind::UpConv).enumerate() {
                up.push(b.conv(&format!("dec_{tag}.up{i}"), spec, in_ch)?);
                in_ch = spec.out_channels;
            }
            Ok(Decoder { res, up })
        };
        let dec_a = build_decoder(&mut b, "a")?;
        let dec_b = build_decoder(&mut b, "b")?;
        let generator_count = b.store.len();

        let build_disc = |b: &mut Builder<'_, R>, tag: &str| -> Result<Vec<ConvLayer>> {
            let mut in_ch = 3;
            let mut layers = Vec::new();
            for (i, spec) in disc_layers.iter().enumerate() {
                layers.push(b.conv(&format!("disc_{tag}.conv{i}"), spec, in_ch)?);
                in_ch = spec.out_channels;
            }
            Ok(layers)
        };
        let disc_a = build_disc(&mut b, "a")?;
        let disc_b = build_disc(&mut b, "b")?;

        let all: Vec<ParamId> = store.ids().collect();
        let shared_params = all
            .iter()
            .copied()
            .filter(|&id| store.get(id).name.starts_with("shared."))
            .collect();
        Ok(Self {
            arch,
            generator_params: all[..generator_count].to_vec(),
            discriminator_params: all[generator_count..].to_vec(),
            shared_params,
            store,
            encoders: [enc_a, enc_b],
            shared,
            decoders: [dec_a, dec_b],
            discriminators: [disc_a, disc_b],
        })
    }

    pub fn arch(&self) -> &GanArch {
        &self.arch
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Parameters of both generators, shared core included once.
    pub fn generator_params(&self) -> &[ParamId] {
        &self.generator_params
    }

    pub fn discriminator_params(&self) -> &[ParamId] {
        &self.discriminator_params
    }

    /// Parameters of the shared residual blocks.
    pub fn shared_params(&self) -> &[ParamId] {
        &self.shared_params
    }

    /// The latent code: encoder of the source domain followed by the
    /// shared core.
    pub fn encode<'p>(&'p self, g: &mut Graph<'p>, domain: Domain, x: Var) -> Result<Var> {
        check_input(g.dims(x), GENERATOR_FACTOR, "translate")?;
        let enc = &self.encoders[domain.index()];
        let mut h = x;
        for (i, layer) in enc.down.iter().enumerate() {
            h = layer.forward(g, h)?;
            memprof::phase(&format!("down{i}"));
        }
        for (i, block) in enc.res.iter().chain(&self.shared).enumerate() {
            h = block.forward(g, h)?;
            memprof::phase(&format!("res{i}"));
        }
        Ok(h)
    }

    pub fn decode<'p>(&'p self, g: &mut Graph<'p>, domain: Domain, z: Var) -> Result<Var> {
        let dec = &self.decoders[domain.index()];
        let mut h = z;
        for (i, block) in dec.res.iter().enumerate() {
            h = block.forward(g, h)?;
            memprof::phase(&format!("res{}", i + 5));
        }
        for (i, layer) in dec.up.iter().enumerate() {
            h = layer.forward(g, h)?;
            memprof::phase(&format!("up{i}"));
        }
        Ok(h)
    }

    pub fn discriminate_var<'p>(&'p self, g: &mut Graph<'p>, domain: Domain, x: Var) -> Result<Var> {
        check_input(g.dims(x), DISCRIMINATOR_FACTOR, "discriminate")?;
        let mut h = x;
        for layer in &self.discriminators[domain.index()] {
            h = layer.forward(g, h)?;
        }
        Ok(h)
    }

    /// Patch score map at 1/16 resolution, forward only.
    pub fn discriminate(&self, domain: Domain, x: Tensor4) -> Result<Tensor4> {
        let mut g = Graph::inference(&self.store);
        let xv = g.input(x);
        let y = self.discriminate_var(&mut g, domain, xv)?;
        Ok(g.into_value(y))
    }
}

impl Translator for GanModel {
    fn param_store(&self) -> Option<&ParamStore> {
        Some(&self.store)
    }

    fn forward<'p>(&'p self, g: &mut Graph<'p>, dir: Direction, x: Var) -> Result<Var> {
        let z = self.encode(g, dir.source(), x)?;
        self.decode(g, dir.target(), z)
    }
}

fn check_input(d: Dims4, factor: usize, op: &str) -> Result<()> {
    if d.c != 3 {
        return Err(Error::ChannelMismatch {
            op: "gan input",
            expected: 3,
            actual: d.c,
        });
    }
    if d.h % factor != 0 || d.w % factor != 0 {
        return Err(Error::InvalidDims(format!(
            "{op} needs spatial dims divisible by {factor}, got {}x{}",
            d.h, d.w
        )));
    }
    Ok(())
}
