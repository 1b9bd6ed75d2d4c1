//! BN-free, residual-free VGG-style networks ("PlainNet").
//!
//! A model is a straight chain of `conv3x3 -> activation` blocks with 2x2 max
//! pools at stage boundaries, followed by the head
//! `Linear(F, H) -> ReLU -> Dropout -> Linear(H, classes)`. There are no
//! normalization layers and no skip connections.
//!
//! Depth counts weight layers. The depth-16 layout is fixed by its parameter
//! count (15,028,644 with parameter-free activations). The depth-8 and
//! depth-32 layouts are reconstructions that keep the same five pooling
//! boundaries and head:
//!
//! | depth | convs | channels per stage        | pools after conv (1-based) |
//! |-------|-------|---------------------------|----------------------------|
//! | 8     | 6     | 64, 128, 256 x2, 512, 512 | 1, 2, 4, 5, 6              |
//! | 16    | 13    | 64x2, 128x2, 256x3, 512x3, 512x3 | 2, 4, 7, 10, 13     |
//! | 32    | 30    | 64x6, 128x6, 256x6, 512x6, 512x6 | 6, 12, 18, 24, 30   |
//!
//! Weights and biases are drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` with
//! `fan_in = C_in * 9` for convolutions and `F_in` for linears.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::activations::{ActivationKind, Pointwise, INIT_BETA_RAW, INIT_C, INIT_G};
use crate::autodiff::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const INPUT_CHANNELS: usize = 3;
pub const INPUT_SIZE: usize = 32;
pub const NUM_CLASSES: usize = 100;
pub const HEAD_WIDTH: usize = 512;
pub const DEFAULT_DROPOUT: f64 = 0.5;
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub enum Depth {
    D8,
    D16,
    D32,
}

impl Depth {
    /// Nominal depth. Depth 8 and 32 count conv plus linear layers exactly;
    /// depth 16 keeps the VGG-16 conv stack (13 convs) with the two-layer
    /// head, so it has 15 weight layers.
    pub fn layers(self) -> u32 {
        match self {
            Depth::D8 => 8,
            Depth::D16 => 16,
            Depth::D32 => 32,
        }
    }

    /// Canonical conv output channels and 0-based pool positions.
    pub fn layout(self) -> (Vec<usize>, Vec<usize>) {
        match self {
            Depth::D8 => (vec![64, 128, 256, 256, 512, 512], vec![0, 1, 3, 4, 5]),
            Depth::D16 => (
                vec![64, 64, 128, 128, 256, 256, 256, 512, 512, 512, 512, 512, 512],
                vec![1, 3, 6, 9, 12],
            ),
            Depth::D32 => {
                let stages = [64, 128, 256, 512, 512];
                let channels = stages.iter().flat_map(|&c| [c; 6]).collect();
                (channels, vec![5, 11, 17, 23, 29])
            }
        }
    }
}

impl TryFrom<u32> for Depth {
    type Error = Error;

    fn try_from(d: u32) -> Result<Self> {
        match d {
            8 => Ok(Depth::D8),
            16 => Ok(Depth::D16),
            32 => Ok(Depth::D32),
            other => Err(Error::config("depth", format!("must be 8, 16 or 32, got {other}"))),
        }
    }
}

impl From<Depth> for u32 {
    fn from(d: Depth) -> u32 {
        d.layers()
    }
}

impl fmt::Display for Depth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.layers())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlainNetConfig {
    pub depth: Depth,
    /// Conv output channels at full width.
    pub channel_progression: Vec<usize>,
    /// 0-based conv indices followed by a 2x2 max pool.
    pub pool_after: Vec<usize>,
    /// Divides every channel count and the head width; 1 is full scale.
    pub width_divisor: usize,
    pub activation: ActivationKind,
    pub num_classes: usize,
    /// Hidden width of the head at full scale.
    pub head_width: usize,
    pub dropout_p: f64,
    pub input_channels: usize,
    pub input_size: usize,
}

impl PlainNetConfig {
    pub fn new(depth: Depth, activation: ActivationKind) -> Self {
        let (channel_progression, pool_after) = depth.layout();
        Self {
            depth,
            channel_progression,
            pool_after,
            width_divisor: 1,
            activation,
            num_classes: NUM_CLASSES,
            head_width: HEAD_WIDTH,
            dropout_p: DEFAULT_DROPOUT,
            input_channels: INPUT_CHANNELS,
            input_size: INPUT_SIZE,
        }
    }

    pub fn with_width_divisor(mut self, divisor: usize) -> Self {
        self.width_divisor = divisor;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.channel_progression.is_empty() {
            return Err(Error::config("channel_progression", "must not be empty"));
        }
        if self.width_divisor == 0 {
            return Err(Error::config("width_divisor", "must be positive"));
        }
        for &c in self.channel_progression.iter().chain([&self.head_width]) {
            if c % self.width_divisor != 0 || c < self.width_divisor {
                return Err(Error::config(
                    "width_divisor",
                    format!("{} does not divide channel count {c}", self.width_divisor),
                ));
            }
        }
        let n = self.channel_progression.len();
        if self.pool_after.windows(2).any(|w| w[0] >= w[1]) || self.pool_after.iter().any(|&i| i >= n) {
            return Err(Error::config(
                "pool_after",
                format!("must be strictly increasing conv indices below {n}"),
            ));
        }
        let mut size = self.input_size;
        for _ in &self.pool_after {
            if size == 0 || !size.is_multiple_of(2) {
                return Err(Error::config(
                    "pool_after",
                    format!("pooling an odd or empty {size}x{size} map"),
                ));
            }
            size /= 2;
        }
        if size == 0 {
            return Err(Error::config("input_size", "spatial size vanishes"));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::config("dropout_p", format!("must lie in [0, 1), got {}", self.dropout_p)));
        }
        if self.num_classes == 0 || self.input_channels == 0 {
            return Err(Error::config("num_classes", "must be positive"));
        }
        Ok(())
    }

    /// Conv output channels after width scaling.
    pub fn scaled_channels(&self) -> Vec<usize> {
        self.channel_progression
            .iter()
            .map(|c| c / self.width_divisor)
            .collect()
    }

    pub fn head_hidden(&self) -> usize {
        self.head_width / self.width_divisor
    }

    pub fn final_spatial(&self) -> usize {
        self.input_size >> self.pool_after.len()
    }

    /// Flattened feature width entering the head.
    pub fn flat_features(&self) -> usize {
        let last = *self.scaled_channels().last().unwrap_or(&0);
        last * self.final_spatial() * self.final_spatial()
    }

    /// Parameter tensors in build order.
    pub fn param_plan(&self) -> Result<Vec<ParamSpec>> {
        self.validate()?;
        let mut plan = Vec::new();
        let mut c_in = self.input_channels;
        for (i, &c_out) in self.scaled_channels().iter().enumerate() {
            let fan_in = c_in * 9;
            plan.push(ParamSpec::new(format!("conv{i}.weight"), ParamRole::ConvWeight, vec![c_out, c_in, 3, 3], fan_in));
            plan.push(ParamSpec::new(format!("conv{i}.bias"), ParamRole::ConvBias, vec![c_out], fan_in));
            if self.activation == ActivationKind::ZcSwish {
                for (suffix, role) in [
                    ("c", ParamRole::ZcAnchor),
                    ("beta_raw", ParamRole::ZcBetaRaw),
                    ("g", ParamRole::ZcGain),
                ] {
                    plan.push(ParamSpec::new(format!("act{i}.{suffix}"), role, vec![c_out], 0));
                }
            }
            c_in = c_out;
        }
        let (f, h, k) = (self.flat_features(), self.head_hidden(), self.num_classes);
        plan.push(ParamSpec::new("fc1.weight".into(), ParamRole::LinearWeight, vec![h, f], f));
        plan.push(ParamSpec::new("fc1.bias".into(), ParamRole::LinearBias, vec![h], f));
        plan.push(ParamSpec::new("fc2.weight".into(), ParamRole::LinearWeight, vec![k, h], h));
        plan.push(ParamSpec::new("fc2.bias".into(), ParamRole::LinearBias, vec![k], h));
        Ok(plan)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    ConvWeight,
    ConvBias,
    LinearWeight,
    LinearBias,
    ZcAnchor,
    ZcBetaRaw,
    ZcGain,
}

impl ParamRole {
    pub fn is_activation(self) -> bool {
        matches!(self, ParamRole::ZcAnchor | ParamRole::ZcBetaRaw | ParamRole::ZcGain)
    }

    pub fn is_weight(self) -> bool {
        matches!(self, ParamRole::ConvWeight | ParamRole::LinearWeight)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub role: ParamRole,
    pub shape: Vec<usize>,
    /// Fan-in used for the uniform init bound (0 for activation params).
    pub fan_in: usize,
}

impl ParamSpec {
    fn new(name: String, role: ParamRole, shape: Vec<usize>, fan_in: usize) -> Self {
        Self {
            name,
            role,
            shape,
            fan_in,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerCount {
    pub name: String,
    pub params: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamCountReport {
    pub total: usize,
    pub activation_params: usize,
    pub layers: Vec<LayerCount>,
}

impl ParamCountReport {
    /// Count from the layer plan alone, without allocating weights.
    pub fn for_config(cfg: &PlainNetConfig) -> Result<Self> {
        let plan = cfg.param_plan()?;
        Ok(Self::from_specs(plan.iter().map(|s| (s.name.as_str(), s.role, s.numel()))))
    }

    fn from_specs<'a>(specs: impl Iterator<Item = (&'a str, ParamRole, usize)>) -> Self {
        let mut layers: Vec<LayerCount> = Vec::new();
        let mut total = 0;
        let mut activation_params = 0;
        for (name, role, n) in specs {
            total += n;
            if role.is_activation() {
                activation_params += n;
            }
            let layer = name.split('.').next().unwrap_or(name);
            match layers.last_mut() {
                Some(l) if l.name == layer => l.params += n,
                _ => layers.push(LayerCount {
                    name: layer.to_string(),
                    params: n,
                }),
            }
        }
        Self {
            total,
            activation_params,
            layers,
        }
    }

    /// Activation parameters as a fraction of the total.
    pub fn overhead(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.activation_params as f64 / self.total as f64
        }
    }
}

/// Thousands-separated integer, e.g. `15,028,644`.
pub fn group_thousands(n: usize) -> String {
    let s = n.to_string();
    let mut out = String::with_capacity(s.len() + s.len() / 3);
    for (i, ch) in s.chars().enumerate() {
        if i > 0 && (s.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

impl fmt::Display for ParamCountReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for l in &self.layers {
            writeln!(f, "  {:<10} {:>12}", l.name, group_thousands(l.params))?;
        }
        writeln!(f, "  total       {:>12}", group_thousands(self.total))?;
        writeln!(f, "  act. params {:>12}", group_thousands(self.activation_params))?;
        write!(f, "  overhead    {:>11.4}%", 100.0 * self.overhead())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub spec: ParamSpec,
    pub value: Tensor<T>,
}

/// What sits at one position of the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layer {
    Conv { weight: usize, bias: usize },
    /// Conv-block activation; `params` indexes the ZC-Swish `(c, β_raw, g)` triple.
    Activation { kind: ActivationKind, params: Option<[usize; 3]> },
    MaxPool,
    Flatten,
    Linear { weight: usize, bias: usize },
    HeadRelu,
    Dropout,
}

/// Where a probed activation lives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteKind {
    Conv,
    Head,
}

#[derive(Clone, Copy, Debug)]
pub struct Site {
    pub index: usize,
    pub kind: SiteKind,
    /// Post-activation value on the tape.
    pub output: Var,
    /// Index of the weight parameter feeding this activation.
    pub weight_param: usize,
}

pub struct ForwardPass {
    pub logits: Var,
    /// Tape handle of every model parameter, in model order.
    pub params: Vec<Var>,
    pub sites: Vec<Site>,
}

/// Forward mode; training mode enables dropout with the given generator.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlainNet<T = f32> {
    config: PlainNetConfig,
    layers: Vec<Layer>,
    params: Vec<Param<T>>,
}

#[derive(Clone, Debug, PartialEq, Eq, Default, Serialize)]
pub struct ArchitectureAudit {
    pub convs: usize,
    pub linears: usize,
    pub pools: usize,
    pub activation_sites: usize,
    pub normalization_layers: usize,
    pub skip_junctions: usize,
}

impl<T: Scalar> PlainNet<T> {
    /// Build with the default uniform init, deterministic in `seed`.
    pub fn build(config: PlainNetConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build_with(config, |spec, _| {
            if spec.role.is_activation() {
                let v = match spec.role {
                    ParamRole::ZcAnchor => INIT_C,
                    ParamRole::ZcBetaRaw => INIT_BETA_RAW,
                    _ => INIT_G,
                };
                return Tensor::full(spec.shape.clone(), T::cast(v));
            }
            let bound = 1.0 / (spec.fan_in as f64).sqrt();
            let data = (0..spec.numel())
                .map(|_| T::cast(rng.random_range(-bound..bound)))
                .collect();
            Tensor::new(spec.shape.clone(), data).expect("plan shape")
        })
    }

    /// Build with every conv/linear weight and bias set to zero.
    pub fn build_zeroed(config: PlainNetConfig) -> Result<Self> {
        let mut m = Self::build(config, 0)?;
        for p in &mut m.params {
            if !p.spec.role.is_activation() {
                p.value = Tensor::zeros(p.spec.shape.clone());
            }
        }
        Ok(m)
    }

    fn build_with(config: PlainNetConfig, mut init: impl FnMut(&ParamSpec, usize) -> Tensor<T>) -> Result<Self> {
        let plan = config.param_plan()?;
        let params: Vec<Param<T>> = plan
            .into_iter()
            .enumerate()
            .map(|(i, spec)| {
                let value = init(&spec, i);
                Param { spec, value }
            })
            .collect();
        let layers = Self::layer_list(&config, &params);
        Ok(Self {
            config,
            layers,
            params,
        })
    }

    fn layer_list(config: &PlainNetConfig, params: &[Param<T>]) -> Vec<Layer> {
        let mut layers = Vec::new();
        let mut p = 0;
        for i in 0..config.channel_progression.len() {
            layers.push(Layer::Conv { weight: p, bias: p + 1 });
            p += 2;
            let zc = (config.activation == ActivationKind::ZcSwish).then(|| {
                let idx = [p, p + 1, p + 2];
                p += 3;
                idx
            });
            layers.push(Layer::Activation {
                kind: config.activation,
                params: zc,
            });
            if config.pool_after.contains(&i) {
                layers.push(Layer::MaxPool);
            }
        }
        layers.push(Layer::Flatten);
        layers.push(Layer::Linear { weight: p, bias: p + 1 });
        layers.push(Layer::HeadRelu);
        layers.push(Layer::Dropout);
        layers.push(Layer::Linear {
            weight: p + 2,
            bias: p + 3,
        });
        debug_assert_eq!(p + 4, params.len());
        layers
    }

    pub fn config(&self) -> &PlainNetConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn count_params(&self) -> ParamCountReport {
        ParamCountReport::from_specs(
            self.params
                .iter()
                .map(|p| (p.spec.name.as_str(), p.spec.role, p.value.numel())),
        )
    }

    /// Number of probed activation sites (one per conv plus the head ReLU).
    pub fn site_count(&self) -> usize {
        self.config.channel_progression.len() + 1
    }

    pub fn forward(&self, tape: &mut Tape<T>, images: &Tensor<T>, mode: Mode<'_>) -> Result<ForwardPass> {
        let params: Vec<Var> = self.params.iter().map(|p| tape.param(p.value.clone())).collect();
        let x = tape.constant(images.clone());
        self.forward_vars(tape, params, x, mode)
    }

    /// Forward pass over caller-supplied parameter and input nodes, one per
    /// entry of [`PlainNet::params`] in order. The stored values are ignored.
    pub fn forward_vars(&self, tape: &mut Tape<T>, params: Vec<Var>, input: Var, mut mode: Mode<'_>) -> Result<ForwardPass> {
        let c = &self.config;
        let expect = [c.input_channels, c.input_size, c.input_size];
        let shape = tape.value(input).shape();
        if shape.len() != 4 || shape[1..] != expect {
            return Err(Error::shape(
                "plainnet.forward",
                "input",
                format!("[N, {}, {}, {}]", expect[0], expect[1], expect[2]),
                format!("{shape:?}"),
            ));
        }
        if params.len() != self.params.len() {
            return Err(Error::shape("plainnet.forward", "parameter count", self.params.len(), params.len()));
        }
        let mut x = input;
        let mut sites = Vec::with_capacity(self.site_count());
        let mut last_weight = 0;
        for layer in &self.layers {
            x = match *layer {
                Layer::Conv { weight, bias } => {
                    last_weight = weight;
                    tape.conv2d(x, params[weight], params[bias])?
                }
                Layer::Activation { kind, params: zc } => {
                    let y = match (kind, zc) {
                        (ActivationKind::ZcSwish, Some([pc, pb, pg])) => {
                            tape.zc_swish(x, params[pc], params[pb], params[pg])?
                        }
                        (ActivationKind::Relu, _) => tape.pointwise(x, Pointwise::Relu),
                        (ActivationKind::Gelu, _) => tape.pointwise(x, Pointwise::Gelu),
                        (ActivationKind::Swish, _) => tape.pointwise(x, Pointwise::Swish),
                        (ActivationKind::ZcSwish, None) => {
                            return Err(Error::invalid("plainnet.forward", "ZC-Swish layer without parameters"))
                        }
                    };
                    sites.push(Site {
                        index: sites.len(),
                        kind: SiteKind::Conv,
                        output: y,
                        weight_param: last_weight,
                    });
                    y
                }
                Layer::MaxPool => tape.maxpool2(x)?,
                Layer::Flatten => tape.flatten(x)?,
                Layer::Linear { weight, bias } => {
                    last_weight = weight;
                    tape.linear(x, params[weight], params[bias])?
                }
                Layer::HeadRelu => {
                    let y = tape.relu(x);
                    sites.push(Site {
                        index: sites.len(),
                        kind: SiteKind::Head,
                        output: y,
                        weight_param: last_weight,
                    });
                    y
                }
                Layer::Dropout => match &mut mode {
                    Mode::Train(rng) => tape.dropout(x, c.dropout_p, true, &mut **rng)?,
                    Mode::Eval => x,
                },
            };
        }
        Ok(ForwardPass {
            logits: x,
            params,
            sites,
        })
    }

    /// Logits for `images` in evaluation mode.
    pub fn logits(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let pass = self.forward(&mut tape, images, Mode::Eval)?;
        Ok(tape.value(pass.logits).clone())
    }

    /// Walk the layer list and a recorded forward pass, counting layer kinds.
    /// Normalization ops and additive junctions are counted from the tape.
    pub fn audit(&self) -> Result<ArchitectureAudit> {
        let mut a = ArchitectureAudit::default();
        for layer in &self.layers {
            match layer {
                Layer::Conv { .. } => a.convs += 1,
                Layer::Linear { .. } => a.linears += 1,
                Layer::MaxPool => a.pools += 1,
                Layer::Activation { .. } | Layer::HeadRelu => a.activation_sites += 1,
                Layer::Flatten | Layer::Dropout => {}
            }
        }
        let c = &self.config;
        let probe = Tensor::zeros([1, c.input_channels, c.input_size, c.input_size]);
        let mut tape = Tape::new();
        self.forward(&mut tape, &probe, Mode::Eval)?;
        for (name, count) in tape.op_histogram() {
            if name.contains("norm") {
                a.normalization_layers += count;
            }
            if name == "add" {
                a.skip_junctions += count;
            }
        }
        Ok(a)
    }

    /// Checkpoint layout (little endian): format version `u32`, config JSON
    /// length `u64`, config JSON, element width `u8` (4 or 8), parameter count
    /// `u64`, then for each parameter its element count `u64` and values.
    pub fn write_checkpoint(&self, mut w: impl Write) -> Result<()> {
        let json = serde_json::to_vec(&self.config)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        let width = std::mem::size_of::<T>() as u8;
        w.write_all(&[width])?;
        w.write_all(&(self.params.len() as u64).to_le_bytes())?;
        for p in &self.params {
            w.write_all(&(p.value.numel() as u64).to_le_bytes())?;
            for &v in p.value.data() {
                if width == 4 {
                    w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
                } else {
                    w.write_all(&v.as_f64().to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn read_checkpoint(mut r: impl Read) -> Result<Self> {
        let mut u32b = [0u8; 4];
        let mut u64b = [0u8; 8];
        r.read_exact(&mut u32b)?;
        let version = u32::from_le_bytes(u32b);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        r.read_exact(&mut u64b)?;
        let mut json = vec![0u8; u64::from_le_bytes(u64b) as usize];
        r.read_exact(&mut json)?;
        let config: PlainNetConfig = serde_json::from_slice(&json)?;
        let mut width = [0u8; 1];
        r.read_exact(&mut width)?;
        if width[0] != 4 && width[0] != 8 {
            return Err(Error::Checkpoint(format!("bad element width {}", width[0])));
        }
        r.read_exact(&mut u64b)?;
        let count = u64::from_le_bytes(u64b) as usize;
        let plan = config.param_plan()?;
        if count != plan.len() {
            return Err(Error::Checkpoint(format!(
                "config expects {} parameter tensors, file has {count}",
                plan.len()
            )));
        }
        let mut values = Vec::with_capacity(count);
        for spec in &plan {
            r.read_exact(&mut u64b)?;
            let n = u64::from_le_bytes(u64b) as usize;
            if n != spec.numel() {
                return Err(Error::Checkpoint(format!(
                    "{}: expected {} values, file has {n}",
                    spec.name,
                    spec.numel()
                )));
            }
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                let v = if width[0] == 4 {
                    r.read_exact(&mut u32b)?;
                    f32::from_le_bytes(u32b) as f64
                } else {
                    r.read_exact(&mut u64b)?;
                    f64::from_le_bytes(u64b)
                };
                data.push(T::cast(v));
            }
            values.push(Tensor::new(spec.shape.clone(), data)?);
        }
        let mut values = values.into_iter();
        Self::build_with(config, |_, _| values.next().expect("count checked"))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_checkpoint(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_checkpoint(std::io::BufReader::new(f))
    }
}
