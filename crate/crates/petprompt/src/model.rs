//! Configurable 3D U-shape denoiser with prompt modules on its skip
//! connections.
//!
//! The backbone is a residual conv U-Net: two 3x3x3 convs with group norm
//! and relu per level, stride-2 conv downsampling, trilinear upsampling.
//! Each skip connection passes through a per-level prompt module before it is
//! concatenated into the decoder. Five operating modes:
//!
//! - `dual`: count-level prompt fused with the general prompt, then injected,
//! - `gpd`: general prompt only (blind prompting),
//! - `clp`: count-level prompt only, projected and broadcast, then injected,
//! - `film`: per-channel affine conditioning on the count level,
//! - `none`: skip tensors pass through unchanged.

use ndarray::{Array3, ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{CountLevel, Volume3D, VolumeRole};
use crate::error::{Error, Result};
use crate::injection::{inject_graph, InjectionConfig, InjectionParams};
use crate::nn::{conv_init, linear_init, norm_init, Conv3, FeatureMap, Linear, Norm};
use crate::prompts::{clp_graph, fuse_graph, gpd_graph, ClpConfig, ClpParams, FusionParams, GpdConfig, GpdParams};
use crate::tensor::{Conv3dSpec, Elem, NodeId, Tape};

/// Operating mode of the denoiser.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Dual,
    Gpd,
    Clp,
    Film,
    None,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::Dual, Mode::Gpd, Mode::Clp, Mode::Film, Mode::None];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Dual => "dual",
            Mode::Gpd => "gpd",
            Mode::Clp => "clp",
            Mode::Film => "film",
            Mode::None => "none",
        }
    }

    /// Whether forward inference consumes the count level.
    pub fn needs_delta(self) -> bool {
        matches!(self, Mode::Dual | Mode::Clp | Mode::Film)
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dual" => Ok(Mode::Dual),
            "gpd" => Ok(Mode::Gpd),
            "clp" => Ok(Mode::Clp),
            "film" => Ok(Mode::Film),
            "none" => Ok(Mode::None),
            other => Err(Error::InvalidArgument(format!("unknown mode '{other}'"))),
        }
    }
}

/// Count-level input to a forward pass.
///
/// `Poison` is a testing hook: it satisfies the type but fails loudly if any
/// code path actually reads the value, proving that delta-independent modes
/// never touch it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CountInput {
    Absent,
    Value(CountLevel),
    Poison,
}

impl CountInput {
    fn require(&self, mode: Mode) -> Result<f64> {
        match self {
            CountInput::Value(c) => Ok(c.value()),
            CountInput::Absent => Err(Error::InvalidArgument(format!(
                "mode '{}' requires a count level",
                mode.as_str()
            ))),
            CountInput::Poison => Err(Error::InvalidArgument(format!(
                "poisoned count level was read by mode '{}'",
                mode.as_str()
            ))),
        }
    }
}

impl From<CountLevel> for CountInput {
    fn from(c: CountLevel) -> Self {
        CountInput::Value(c)
    }
}

/// Model architecture configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of skip connections S (input dims must divide by 2^S).
    pub levels: usize,
    /// Channels at the finest level; doubled per level.
    pub base_channels: usize,
    pub mode: Mode,
    /// Group-norm groups (capped at the channel count per level).
    pub groups: usize,
    pub clp: ClpConfig,
    pub gpd: GpdConfig,
    pub injection: InjectionConfig,
    /// Hidden width of the per-level conditioning MLP in film mode.
    pub film_hidden: usize,
    /// Clamp inference outputs at zero (never applied in training).
    pub clamp_nonneg_inference: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            levels: 3,
            base_channels: 16,
            mode: Mode::Dual,
            groups: 8,
            clp: ClpConfig::default(),
            gpd: GpdConfig::default(),
            injection: InjectionConfig::default(),
            film_hidden: 16,
            clamp_nonneg_inference: false,
        }
    }
}

impl ModelConfig {
    pub fn channels_at(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn groups_at(&self, level: usize) -> usize {
        self.groups.min(self.channels_at(level))
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::Config("levels must be at least 1".into()));
        }
        if self.base_channels == 0 {
            return Err(Error::Config("base channels must be positive".into()));
        }
        for lvl in 0..=self.levels {
            let c = self.channels_at(lvl);
            let g = self.groups.min(c);
            if g == 0 || c % g != 0 {
                return Err(Error::Config(format!(
                    "group count {g} does not divide {c} channels at level {lvl}"
                )));
            }
        }
        if matches!(self.mode, Mode::Dual | Mode::Gpd | Mode::Clp) {
            for lvl in 0..self.levels {
                let c = self.channels_at(lvl);
                if self.injection.heads == 0 || c % self.injection.heads != 0 {
                    return Err(Error::Config(format!(
                        "attention heads ({}) must divide {c} channels at level {lvl}",
                        self.injection.heads
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Two-conv residual block with group norm.
#[derive(Debug, Clone)]
pub struct ConvBlock<T> {
    pub conv1: Conv3<T>,
    pub norm1: Norm<T>,
    pub conv2: Conv3<T>,
    pub norm2: Norm<T>,
    /// 1x1 shortcut when in/out channels differ.
    pub shortcut: Option<Linear<T>>,
}

impl<T> ConvBlock<T> {
    pub fn for_each<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        self.conv1.for_each(&format!("{prefix}.conv1"), f);
        self.norm1.for_each(&format!("{prefix}.norm1"), f);
        self.conv2.for_each(&format!("{prefix}.conv2"), f);
        self.norm2.for_each(&format!("{prefix}.norm2"), f);
        if let Some(s) = &self.shortcut {
            s.for_each(&format!("{prefix}.shortcut"), f);
        }
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
        self.conv1.for_each_mut(&format!("{prefix}.conv1"), f);
        self.norm1.for_each_mut(&format!("{prefix}.norm1"), f);
        self.conv2.for_each_mut(&format!("{prefix}.conv2"), f);
        self.norm2.for_each_mut(&format!("{prefix}.norm2"), f);
        if let Some(s) = &mut self.shortcut {
            s.for_each_mut(&format!("{prefix}.shortcut"), f);
        }
    }

    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> ConvBlock<U> {
        ConvBlock {
            conv1: self.conv1.map(f),
            norm1: self.norm1.map(f),
            conv2: self.conv2.map(f),
            norm2: self.norm2.map(f),
            shortcut: self.shortcut.as_ref().map(|s| s.map(f)),
        }
    }
}

impl<E: Elem> ConvBlock<ArrayD<E>> {
    fn init(rng: &mut ChaCha8Rng, in_ch: usize, out_ch: usize) -> Self {
        ConvBlock {
            conv1: conv_init(rng, out_ch, in_ch, 3),
            norm1: norm_init(out_ch),
            conv2: conv_init(rng, out_ch, out_ch, 3),
            norm2: norm_init(out_ch),
            shortcut: (in_ch != out_ch).then(|| linear_init(rng, out_ch, in_ch)),
        }
    }
}

fn conv_block_graph<E: Elem>(
    t: &mut Tape<E>,
    x: NodeId,
    p: &ConvBlock<NodeId>,
    groups: usize,
) -> NodeId {
    let y = t.conv3d(x, p.conv1.weight, p.conv1.bias, Conv3dSpec::SAME3);
    let y = t.groupnorm(y, p.norm1.gamma, p.norm1.beta, groups);
    let y = t.relu(y);
    let y = t.conv3d(y, p.conv2.weight, p.conv2.bias, Conv3dSpec::SAME3);
    let y = t.groupnorm(y, p.norm2.gamma, p.norm2.beta, groups);
    let short = match &p.shortcut {
        Some(s) => t.conv1x1(x, s.weight, s.bias),
        None => x,
    };
    let sum = t.add(y, short);
    t.relu(sum)
}

/// Per-skip prompt stack; the variant fixes the parameter tree of a mode.
#[derive(Debug, Clone)]
pub enum SkipModule<T> {
    Dual {
        clp: ClpParams<T>,
        gpd: GpdParams<T>,
        fusion: FusionParams<T>,
        injection: InjectionParams<T>,
    },
    Gpd {
        gpd: GpdParams<T>,
        injection: InjectionParams<T>,
    },
    Clp {
        clp: ClpParams<T>,
        /// Projection `M -> c` before broadcasting across the grid.
        proj: Linear<T>,
        injection: InjectionParams<T>,
    },
    Film {
        fc1: Linear<T>,
        fc2: Linear<T>,
    },
    None,
}

impl<T> SkipModule<T> {
    pub fn for_each<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        match self {
            SkipModule::Dual {
                clp,
                gpd,
                fusion,
                injection,
            } => {
                clp.for_each(&format!("{prefix}.clp"), f);
                gpd.for_each(&format!("{prefix}.gpd"), f);
                fusion.for_each(&format!("{prefix}.fusion"), f);
                injection.for_each(&format!("{prefix}.injection"), f);
            }
            SkipModule::Gpd { gpd, injection } => {
                gpd.for_each(&format!("{prefix}.gpd"), f);
                injection.for_each(&format!("{prefix}.injection"), f);
            }
            SkipModule::Clp {
                clp,
                proj,
                injection,
            } => {
                clp.for_each(&format!("{prefix}.clp"), f);
                proj.for_each(&format!("{prefix}.proj"), f);
                injection.for_each(&format!("{prefix}.injection"), f);
            }
            SkipModule::Film { fc1, fc2 } => {
                fc1.for_each(&format!("{prefix}.film.fc1"), f);
                fc2.for_each(&format!("{prefix}.film.fc2"), f);
            }
            SkipModule::None => {}
        }
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
        match self {
            SkipModule::Dual {
                clp,
                gpd,
                fusion,
                injection,
            } => {
                clp.for_each_mut(&format!("{prefix}.clp"), f);
                gpd.for_each_mut(&format!("{prefix}.gpd"), f);
                fusion.for_each_mut(&format!("{prefix}.fusion"), f);
                injection.for_each_mut(&format!("{prefix}.injection"), f);
            }
            SkipModule::Gpd { gpd, injection } => {
                gpd.for_each_mut(&format!("{prefix}.gpd"), f);
                injection.for_each_mut(&format!("{prefix}.injection"), f);
            }
            SkipModule::Clp {
                clp,
                proj,
                injection,
            } => {
                clp.for_each_mut(&format!("{prefix}.clp"), f);
                proj.for_each_mut(&format!("{prefix}.proj"), f);
                injection.for_each_mut(&format!("{prefix}.injection"), f);
            }
            SkipModule::Film { fc1, fc2 } => {
                fc1.for_each_mut(&format!("{prefix}.film.fc1"), f);
                fc2.for_each_mut(&format!("{prefix}.film.fc2"), f);
            }
            SkipModule::None => {}
        }
    }

    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> SkipModule<U> {
        match self {
            SkipModule::Dual {
                clp,
                gpd,
                fusion,
                injection,
            } => SkipModule::Dual {
                clp: clp.map(f),
                gpd: gpd.map(f),
                fusion: fusion.map(f),
                injection: injection.map(f),
            },
            SkipModule::Gpd { gpd, injection } => SkipModule::Gpd {
                gpd: gpd.map(f),
                injection: injection.map(f),
            },
            SkipModule::Clp {
                clp,
                proj,
                injection,
            } => SkipModule::Clp {
                clp: clp.map(f),
                proj: proj.map(f),
                injection: injection.map(f),
            },
            SkipModule::Film { fc1, fc2 } => SkipModule::Film {
                fc1: fc1.map(f),
                fc2: fc2.map(f),
            },
            SkipModule::None => SkipModule::None,
        }
    }
}

/// Encoder stage: level block plus stride-2 downsampling conv.
#[derive(Debug, Clone)]
pub struct EncoderStage<T> {
    pub block: ConvBlock<T>,
    pub down: Conv3<T>,
}

impl<T> EncoderStage<T> {
    pub fn for_each<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        self.block.for_each(&format!("{prefix}.block"), f);
        self.down.for_each(&format!("{prefix}.down"), f);
    }
    pub fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
        self.block.for_each_mut(&format!("{prefix}.block"), f);
        self.down.for_each_mut(&format!("{prefix}.down"), f);
    }
    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> EncoderStage<U> {
        EncoderStage {
            block: self.block.map(f),
            down: self.down.map(f),
        }
    }
}

/// Decoder stage: channel projection after upsampling plus level block.
#[derive(Debug, Clone)]
pub struct DecoderStage<T> {
    pub up_proj: Linear<T>,
    pub block: ConvBlock<T>,
}

impl<T> DecoderStage<T> {
    pub fn for_each<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        self.up_proj.for_each(&format!("{prefix}.up_proj"), f);
        self.block.for_each(&format!("{prefix}.block"), f);
    }
    pub fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
        self.up_proj.for_each_mut(&format!("{prefix}.up_proj"), f);
        self.block.for_each_mut(&format!("{prefix}.block"), f);
    }
    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> DecoderStage<U> {
        DecoderStage {
            up_proj: self.up_proj.map(f),
            block: self.block.map(f),
        }
    }
}

/// Full parameter tree of the denoiser.
#[derive(Debug, Clone)]
pub struct ModelParams<T> {
    pub stem: Conv3<T>,
    pub encoder: Vec<EncoderStage<T>>,
    pub bottleneck: ConvBlock<T>,
    pub decoder: Vec<DecoderStage<T>>,
    pub skips: Vec<SkipModule<T>>,
    pub head: Linear<T>,
}

impl<T> ModelParams<T> {
    pub fn for_each<'a>(&'a self, f: &mut dyn FnMut(String, &'a T)) {
        self.stem.for_each("stem", f);
        for (i, e) in self.encoder.iter().enumerate() {
            e.for_each(&format!("enc{i}"), f);
        }
        self.bottleneck.for_each("bottleneck", f);
        for (i, d) in self.decoder.iter().enumerate() {
            d.for_each(&format!("dec{i}"), f);
        }
        for (i, s) in self.skips.iter().enumerate() {
            s.for_each(&format!("skip{i}"), f);
        }
        self.head.for_each("head", f);
    }

    pub fn for_each_mut(&mut self, f: &mut dyn FnMut(String, &mut T)) {
        self.stem.for_each_mut("stem", f);
        for (i, e) in self.encoder.iter_mut().enumerate() {
            e.for_each_mut(&format!("enc{i}"), f);
        }
        self.bottleneck.for_each_mut("bottleneck", f);
        for (i, d) in self.decoder.iter_mut().enumerate() {
            d.for_each_mut(&format!("dec{i}"), f);
        }
        for (i, s) in self.skips.iter_mut().enumerate() {
            s.for_each_mut(&format!("skip{i}"), f);
        }
        self.head.for_each_mut("head", f);
    }

    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> ModelParams<U> {
        ModelParams {
            stem: self.stem.map(f),
            encoder: self.encoder.iter().map(|e| e.map(f)).collect(),
            bottleneck: self.bottleneck.map(f),
            decoder: self.decoder.iter().map(|d| d.map(f)).collect(),
            skips: self.skips.iter().map(|s| s.map(f)).collect(),
            head: self.head.map(f),
        }
    }
}

impl<E: Elem> ModelParams<ArrayD<E>> {
    /// Initialize all parameters from a seed. Draw order is fixed by the
    /// parameter tree, so a (config, seed) pair fully determines the model.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = config.levels;
        let stem = conv_init(&mut rng, config.base_channels, 1, 3);
        let encoder = (0..s)
            .map(|i| {
                let c = config.channels_at(i);
                EncoderStage {
                    block: ConvBlock::init(&mut rng, c, c),
                    down: conv_init(&mut rng, config.channels_at(i + 1), c, 3),
                }
            })
            .collect();
        let bc = config.channels_at(s);
        let bottleneck = ConvBlock::init(&mut rng, bc, bc);
        let decoder = (0..s)
            .map(|i| {
                let c = config.channels_at(i);
                DecoderStage {
                    up_proj: linear_init(&mut rng, c, config.channels_at(i + 1)),
                    block: ConvBlock::init(&mut rng, 2 * c, c),
                }
            })
            .collect();
        let skips = (0..s)
            .map(|i| {
                let c = config.channels_at(i);
                match config.mode {
                    Mode::Dual => SkipModule::Dual {
                        clp: ClpParams::init(&mut rng, &config.clp),
                        gpd: GpdParams::init(&mut rng, c, &config.gpd),
                        fusion: FusionParams::init(&mut rng, c, config.clp.m),
                        injection: InjectionParams::init(&mut rng, c, &config.injection),
                    },
                    Mode::Gpd => SkipModule::Gpd {
                        gpd: GpdParams::init(&mut rng, c, &config.gpd),
                        injection: InjectionParams::init(&mut rng, c, &config.injection),
                    },
                    Mode::Clp => SkipModule::Clp {
                        clp: ClpParams::init(&mut rng, &config.clp),
                        proj: linear_init(&mut rng, c, config.clp.m),
                        injection: InjectionParams::init(&mut rng, c, &config.injection),
                    },
                    Mode::Film => SkipModule::Film {
                        fc1: linear_init(&mut rng, config.film_hidden, 1),
                        fc2: linear_init(&mut rng, 2 * c, config.film_hidden),
                    },
                    Mode::None => SkipModule::None,
                }
            })
            .collect();
        let head = linear_init(&mut rng, 1, config.base_channels);
        Ok(ModelParams {
            stem,
            encoder,
            bottleneck,
            decoder,
            skips,
            head,
        })
    }
}

/// Exact parameter count per named array, in canonical order.
pub fn count_parameters<E: Elem>(params: &ModelParams<ArrayD<E>>) -> Vec<(String, usize)> {
    let mut out = Vec::new();
    params.for_each(&mut |name, a| out.push((name, a.len())));
    out
}

/// Total number of scalar parameters.
pub fn total_parameters<E: Elem>(params: &ModelParams<ArrayD<E>>) -> usize {
    count_parameters(params).iter().map(|(_, n)| n).sum()
}

/// Per-channel affine conditioning on the count level (the conditional-model
/// baseline): `F * (1 + s(delta)) + b(delta)`.
pub fn film_graph<E: Elem>(
    t: &mut Tape<E>,
    feature: NodeId,
    delta: f64,
    fc1: &Linear<NodeId>,
    fc2: &Linear<NodeId>,
) -> NodeId {
    let c = t.value(feature).shape()[0];
    let d = t.constant(ArrayD::from_elem(IxDyn(&[1]), E::f(delta)));
    let h = t.linear(d, fc1.weight, fc1.bias);
    let h = t.relu(h);
    let sb = t.linear(h, fc2.weight, fc2.bias);
    let s = t.narrow_channels(sb, 0, c);
    let b = t.narrow_channels(sb, c, c);
    t.affine_chan(feature, s, b)
}

/// Value-level conditional baseline op.
pub fn film_condition<E: Elem>(
    feature: &FeatureMap<E>,
    delta: CountLevel,
    fc1: &Linear<ArrayD<E>>,
    fc2: &Linear<ArrayD<E>>,
) -> Result<FeatureMap<E>> {
    if fc2.weight.shape()[0] != 2 * feature.channels() {
        return Err(Error::Shape(format!(
            "conditioning MLP must emit 2c = {} values, got {}",
            2 * feature.channels(),
            fc2.weight.shape()[0]
        )));
    }
    let mut t: Tape<E> = Tape::new();
    let fc1n = fc1.map(&mut |a| t.constant(a.clone()));
    let fc2n = fc2.map(&mut |a| t.constant(a.clone()));
    let f = t.constant(feature.to_dyn());
    let y = film_graph(&mut t, f, delta.value(), &fc1n, &fc2n);
    FeatureMap::from_dyn(t.value(y).clone())
}

fn skip_graph<E: Elem>(
    t: &mut Tape<E>,
    skip: NodeId,
    module: &SkipModule<NodeId>,
    delta: Option<f64>,
    heads: usize,
) -> NodeId {
    match module {
        SkipModule::Dual {
            clp,
            gpd,
            fusion,
            injection,
        } => {
            let (pg, _) = gpd_graph(t, skip, gpd);
            let pc = clp_graph(t, delta.expect("checked by forward"), clp);
            let (prompt, _) = fuse_graph(t, pg, pc, fusion);
            inject_graph(t, skip, prompt, injection, heads)
        }
        SkipModule::Gpd { gpd, injection } => {
            let (pg, _) = gpd_graph(t, skip, gpd);
            inject_graph(t, skip, pg, injection, heads)
        }
        SkipModule::Clp {
            clp,
            proj,
            injection,
        } => {
            let dims = {
                let s = t.value(skip).shape();
                (s[1], s[2], s[3])
            };
            let pc = clp_graph(t, delta.expect("checked by forward"), clp);
            let v = t.linear(pc, proj.weight, proj.bias);
            let prompt = t.broadcast_spatial(v, dims);
            inject_graph(t, skip, prompt, injection, heads)
        }
        SkipModule::Film { fc1, fc2 } => {
            film_graph(t, skip, delta.expect("checked by forward"), fc1, fc2)
        }
        SkipModule::None => skip,
    }
}

/// Build the full forward graph from a `[1, H, W, D]` input node.
pub fn forward_graph<E: Elem>(
    t: &mut Tape<E>,
    input: NodeId,
    params: &ModelParams<NodeId>,
    config: &ModelConfig,
    delta: Option<f64>,
) -> NodeId {
    let s = config.levels;
    let mut x = t.conv3d(input, params.stem.weight, params.stem.bias, Conv3dSpec::SAME3);
    let mut skips = Vec::with_capacity(s);
    let mut dims = Vec::with_capacity(s);
    for i in 0..s {
        let f = conv_block_graph(t, x, &params.encoder[i].block, config.groups_at(i));
        let sh = t.value(f).shape();
        dims.push((sh[1], sh[2], sh[3]));
        skips.push(f);
        x = t.conv3d(
            f,
            params.encoder[i].down.weight,
            params.encoder[i].down.bias,
            Conv3dSpec::DOWN3,
        );
    }
    x = conv_block_graph(t, x, &params.bottleneck, config.groups_at(s));
    for i in (0..s).rev() {
        x = t.resize_trilinear(x, dims[i]);
        x = t.conv1x1(x, params.decoder[i].up_proj.weight, params.decoder[i].up_proj.bias);
        let transformed = skip_graph(t, skips[i], &params.skips[i], delta, config.injection.heads);
        let cat = t.concat_channels(&[transformed, x]);
        x = conv_block_graph(t, cat, &params.decoder[i].block, config.groups_at(i));
    }
    t.conv1x1(x, params.head.weight, params.head.bias)
}

/// A config + parameters bundle.
#[derive(Debug, Clone)]
pub struct Model<E: Elem> {
    pub config: ModelConfig,
    pub params: ModelParams<ArrayD<E>>,
}

impl<E: Elem> Model<E> {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = ModelParams::init(&config, seed)?;
        Ok(Model { config, params })
    }

    /// Resolve the count-level input for this model's mode (the poison test
    /// hook lives here: delta-free modes never call `require`).
    pub fn resolve_delta(&self, delta: CountInput) -> Result<Option<f64>> {
        if self.config.mode.needs_delta() {
            Ok(Some(delta.require(self.config.mode)?))
        } else {
            Ok(None)
        }
    }

    fn check_dims(&self, dims: (usize, usize, usize)) -> Result<()> {
        let div = 1usize << self.config.levels;
        let (h, w, d) = dims;
        if h % div != 0 || w % div != 0 || d % div != 0 {
            return Err(Error::Shape(format!(
                "input dims {dims:?} must be divisible by 2^{} = {div}",
                self.config.levels
            )));
        }
        Ok(())
    }

    /// Run inference on a volume. Output dims equal input dims; the voxel
    /// array is the raw network output (no clamping here).
    pub fn forward_volume(&self, x: &Volume3D, delta: CountInput) -> Result<Volume3D> {
        let delta_val = self.resolve_delta(delta)?;
        self.check_dims(x.dims())?;
        let (h, w, d) = x.dims();
        let mut input = ArrayD::<E>::zeros(IxDyn(&[1, h, w, d]));
        for ((_, iy, ix, iz), v) in input.indexed_iter_mut().map(|(ix, v)| {
            let i = (ix[0], ix[1], ix[2], ix[3]);
            (i, v)
        }) {
            *v = E::f(x.voxels[[iy, ix, iz]] as f64);
        }
        let mut t: Tape<E> = Tape::new();
        let ids = self.params.map(&mut |a| t.constant(a.clone()));
        let inp = t.constant(input);
        let out = forward_graph(&mut t, inp, &ids, &self.config, delta_val);
        let ov = t.value(out);
        let mut voxels = Array3::<f32>::zeros((h, w, d));
        for (o, &v) in voxels.iter_mut().zip(ov.iter()) {
            *o = v.to_f64() as f32;
        }
        let mut vol = Volume3D::new(voxels, x.study_id.clone(), x.realization, VolumeRole::Denoised, None)?;
        vol.seed = x.seed;
        Ok(vol)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_phantom, PhantomConfig};

    fn tiny_config(mode: Mode) -> ModelConfig {
        ModelConfig {
            levels: 1,
            base_channels: 2,
            mode,
            groups: 2,
            clp: ClpConfig { hidden: 4, m: 4 },
            gpd: GpdConfig {
                n: 2,
                base_dims: (4, 4, 4),
            },
            injection: InjectionConfig {
                heads: 2,
                expansion: 2,
            },
            film_hidden: 4,
            clamp_nonneg_inference: false,
        }
    }

    fn phantom(dims: (usize, usize, usize)) -> Volume3D {
        generate_phantom(3, dims, &PhantomConfig::default()).unwrap()
    }

    #[test]
    fn output_dims_equal_input_dims_for_all_modes() {
        let x = phantom((8, 8, 8));
        let delta = CountLevel::new(0.17).unwrap();
        for mode in Mode::ALL {
            let m: Model<f64> = Model::init(tiny_config(mode), 1).unwrap();
            let y = m.forward_volume(&x, CountInput::Value(delta)).unwrap();
            assert_eq!(y.dims(), x.dims(), "mode {mode:?}");
            assert_eq!(y.role, VolumeRole::Denoised);
        }
    }

    #[test]
    fn indivisible_dims_rejected() {
        let mut cfg = tiny_config(Mode::None);
        cfg.levels = 2;
        cfg.groups = 2;
        let m: Model<f64> = Model::init(cfg, 1).unwrap();
        let x = phantom((10, 8, 8));
        assert!(matches!(
            m.forward_volume(&x, CountInput::Absent),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn mode_none_never_reads_delta() {
        let m: Model<f64> = Model::init(tiny_config(Mode::None), 1).unwrap();
        let x = phantom((8, 8, 8));
        // poison would error if the mode ever read the count level
        let y = m.forward_volume(&x, CountInput::Poison).unwrap();
        assert_eq!(y.dims(), (8, 8, 8));
        // gpd mode is blind prompting: also delta-free
        let g: Model<f64> = Model::init(tiny_config(Mode::Gpd), 1).unwrap();
        g.forward_volume(&x, CountInput::Poison).unwrap();
    }

    #[test]
    fn delta_dependent_modes_demand_a_value() {
        let x = phantom((8, 8, 8));
        for mode in [Mode::Dual, Mode::Clp, Mode::Film] {
            let m: Model<f64> = Model::init(tiny_config(mode), 1).unwrap();
            assert!(
                matches!(
                    m.forward_volume(&x, CountInput::Absent),
                    Err(Error::InvalidArgument(_))
                ),
                "mode {mode:?} accepted a missing count level"
            );
            assert!(matches!(
                m.forward_volume(&x, CountInput::Poison),
                Err(Error::InvalidArgument(_))
            ));
        }
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let m: Model<f64> = Model::init(tiny_config(Mode::Dual), 7).unwrap();
        let x = phantom((8, 8, 8));
        let d = CountInput::Value(CountLevel::new(0.2).unwrap());
        let a = m.forward_volume(&x, d).unwrap();
        let b = m.forward_volume(&x, d).unwrap();
        assert_eq!(a.voxels, b.voxels);
    }

    #[test]
    fn dual_output_depends_on_delta() {
        let m: Model<f64> = Model::init(tiny_config(Mode::Dual), 7).unwrap();
        let x = phantom((8, 8, 8));
        let a = m
            .forward_volume(&x, CountInput::Value(CountLevel::new(0.13).unwrap()))
            .unwrap();
        let b = m
            .forward_volume(&x, CountInput::Value(CountLevel::new(0.22).unwrap()))
            .unwrap();
        assert!(a.voxels.iter().zip(b.voxels.iter()).any(|(p, q)| p != q));
    }

    #[test]
    fn dual_and_gpd_differ_with_shared_params() {
        // copy the gpd/injection params from a dual model into a gpd model:
        // the remaining difference is exactly the count-level path
        let dual: Model<f64> = Model::init(tiny_config(Mode::Dual), 9).unwrap();
        let mut gpd: Model<f64> = Model::init(tiny_config(Mode::Gpd), 9).unwrap();
        // shared backbone: same init order means encoder/decoder match only
        // if we copy them over explicitly
        gpd.params.stem = dual.params.stem.clone();
        gpd.params.encoder = dual.params.encoder.clone();
        gpd.params.bottleneck = dual.params.bottleneck.clone();
        gpd.params.decoder = dual.params.decoder.clone();
        gpd.params.head = dual.params.head.clone();
        for (gs, ds) in gpd.params.skips.iter_mut().zip(dual.params.skips.iter()) {
            if let (
                SkipModule::Gpd { gpd, injection },
                SkipModule::Dual {
                    gpd: dgpd,
                    injection: dinj,
                    ..
                },
            ) = (gs, ds)
            {
                *gpd = dgpd.clone();
                *injection = dinj.clone();
            }
        }
        let x = phantom((8, 8, 8));
        let d = CountInput::Value(CountLevel::new(0.15).unwrap());
        let a = dual.forward_volume(&x, d).unwrap();
        let b = gpd.forward_volume(&x, d).unwrap();
        assert!(a.voxels.iter().zip(b.voxels.iter()).any(|(p, q)| p != q));
    }

    #[test]
    fn zero_weight_model_outputs_constant_head_bias() {
        let mut m: Model<f64> = Model::init(tiny_config(Mode::None), 1).unwrap();
        m.params.for_each_mut(&mut |_, a| a.fill(0.0));
        m.params.head.bias.fill(0.5);
        let x1 = phantom((8, 8, 8));
        let x2 = generate_phantom(99, (8, 8, 8), &PhantomConfig::default()).unwrap();
        let y1 = m.forward_volume(&x1, CountInput::Absent).unwrap();
        let y2 = m.forward_volume(&x2, CountInput::Absent).unwrap();
        assert!(y1.voxels.iter().all(|&v| (v - 0.5).abs() < 1e-6));
        assert_eq!(y1.voxels, y2.voxels);
    }

    #[test]
    fn film_condition_identity_at_zero_and_forced_scale() {
        use crate::nn::FeatureMap;
        use ndarray::Array4;
        let c = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut fc1: Linear<ArrayD<f64>> = linear_init(&mut rng, 4, 1);
        let mut fc2: Linear<ArrayD<f64>> = linear_init(&mut rng, 2 * c, 4);
        let f = FeatureMap::new(Array4::from_shape_fn((c, 2, 2, 2), |(a, b, cc, d)| {
            (a + b + cc + d) as f64 * 0.25 - 0.5
        }))
        .unwrap();
        let delta = CountLevel::new(0.18).unwrap();

        // zero MLP -> exact identity
        fc1.weight.fill(0.0);
        fc1.bias.fill(0.0);
        fc2.weight.fill(0.0);
        fc2.bias.fill(0.0);
        let y = film_condition(&f, delta, &fc1, &fc2).unwrap();
        assert_eq!(y, f);

        // forced s = 1, b = 0 -> output is exactly 2F
        for i in 0..c {
            fc2.bias[[i]] = 1.0;
        }
        let y = film_condition(&f, delta, &fc1, &fc2).unwrap();
        let expect = f.to_dyn().mapv(|v| 2.0 * v);
        let diff = y
            .to_dyn()
            .iter()
            .zip(expect.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-12);
    }

    #[test]
    fn parameter_counts_dual_exceeds_none_and_scale_with_channels() {
        let dual: ModelParams<ArrayD<f64>> =
            ModelParams::init(&tiny_config(Mode::Dual), 1).unwrap();
        let none: ModelParams<ArrayD<f64>> =
            ModelParams::init(&tiny_config(Mode::None), 1).unwrap();
        assert!(total_parameters(&dual) > total_parameters(&none));

        // doubling base channels scales conv weights ~4x
        let mut big = tiny_config(Mode::None);
        big.base_channels = 4;
        big.groups = 2;
        let bigp: ModelParams<ArrayD<f64>> = ModelParams::init(&big, 1).unwrap();
        let count_of = |p: &ModelParams<ArrayD<f64>>, name: &str| {
            count_parameters(p)
                .into_iter()
                .find(|(n, _)| n == name)
                .map(|(_, c)| c)
                .unwrap()
        };
        let small_w = count_of(&none, "enc0.block.conv1.weight");
        let big_w = count_of(&bigp, "enc0.block.conv1.weight");
        assert_eq!(big_w, 4 * small_w);
    }

    #[test]
    fn hand_counted_tiny_none_model() {
        // S = 1, base = 1, mode none, groups 1
        let cfg = ModelConfig {
            levels: 1,
            base_channels: 1,
            mode: Mode::None,
            groups: 1,
            ..tiny_config(Mode::None)
        };
        let p: ModelParams<ArrayD<f64>> = ModelParams::init(&cfg, 1).unwrap();
        // stem 1->1: 27 + 1
        // enc block (1->1): conv1 27+1, norm1 1+1, conv2 27+1, norm2 1+1
        // down 1->2: 2*27 + 2
        // bottleneck (2->2): conv1 2*2*27+2, norm 2+2, conv2 2*2*27+2, norm 2+2
        // dec: up_proj 2->1: 2+1; block (2->1): conv1 2*27+1, n 1+1,
        //      conv2 27+1, n 1+1, shortcut 2+1
        // head 1->1: 1+1
        let expect = (27 + 1)
            + (27 + 1 + 1 + 1 + 27 + 1 + 1 + 1)
            + (54 + 2)
            + (108 + 2 + 2 + 2 + 108 + 2 + 2 + 2)
            + (2 + 1)
            + (54 + 1 + 1 + 1 + 27 + 1 + 1 + 1 + 2 + 1)
            + (1 + 1);
        assert_eq!(total_parameters(&p), expect);
    }

    #[test]
    fn checkpoint_key_names_are_stable_and_unique() {
        let p: ModelParams<ArrayD<f64>> = ModelParams::init(&tiny_config(Mode::Dual), 1).unwrap();
        let names: Vec<String> = count_parameters(&p).into_iter().map(|(n, _)| n).collect();
        let unique: std::collections::HashSet<&String> = names.iter().collect();
        assert_eq!(unique.len(), names.len(), "duplicate parameter names");
        assert!(names.iter().any(|n| n == "skip0.clp.fc1.weight"));
        assert!(names.iter().any(|n| n == "skip0.gpd.component0"));
        assert!(names.iter().any(|n| n == "skip0.injection.mhta.temperature"));
    }
}
