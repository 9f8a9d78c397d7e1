//! Token mixers, channel mixers and the block that composes them.
//!
//! Each sublayer is pre-normalized and residual: `Y = Mix(LN(X)) + X`. The
//! channel residual can be switched off through [`BlockSpec::channel_residual`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Axis, ConvSpec, Graph, NodeId};
use crate::tensor::FrameMatrix;

pub const FFN_EXPANSION: usize = 4;
pub const GEGLU_EXPANSION: usize = 2;
pub const ISC_EXPANSION: usize = 2;
pub const POOL_KERNEL: usize = 3;
pub const DEFAULT_DW_KERNEL: usize = 7;
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenMixerKind {
    SelfAttention,
    Pool,
    Identity,
    Isc,
    Dw,
    Msdw,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelMixerKind {
    Ffn,
    Pool,
    Identity,
    Geglu,
}

impl TokenMixerKind {
    pub const ALL: [TokenMixerKind; 6] = [
        TokenMixerKind::SelfAttention,
        TokenMixerKind::Pool,
        TokenMixerKind::Identity,
        TokenMixerKind::Isc,
        TokenMixerKind::Dw,
        TokenMixerKind::Msdw,
    ];

    /// Identifier used in configuration files.
    pub fn key(self) -> &'static str {
        match self {
            TokenMixerKind::SelfAttention => "self_attention",
            TokenMixerKind::Pool => "pool",
            TokenMixerKind::Identity => "identity",
            TokenMixerKind::Isc => "isc",
            TokenMixerKind::Dw => "dw",
            TokenMixerKind::Msdw => "msdw",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            TokenMixerKind::SelfAttention => "Self-Attention",
            TokenMixerKind::Pool => "Pool",
            TokenMixerKind::Identity => "Identity",
            TokenMixerKind::Isc => "ISC",
            TokenMixerKind::Dw => "DW",
            TokenMixerKind::Msdw => "MSDW",
        }
    }

    /// Mixers built on a `dw_kernel`-wide temporal convolution.
    pub fn uses_wide_kernel(self) -> bool {
        matches!(
            self,
            TokenMixerKind::Isc | TokenMixerKind::Dw | TokenMixerKind::Msdw
        )
    }
}

impl ChannelMixerKind {
    pub const ALL: [ChannelMixerKind; 4] = [
        ChannelMixerKind::Ffn,
        ChannelMixerKind::Pool,
        ChannelMixerKind::Identity,
        ChannelMixerKind::Geglu,
    ];

    pub fn key(self) -> &'static str {
        match self {
            ChannelMixerKind::Ffn => "ffn",
            ChannelMixerKind::Pool => "pool",
            ChannelMixerKind::Identity => "identity",
            ChannelMixerKind::Geglu => "geglu",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            ChannelMixerKind::Ffn => "FFN",
            ChannelMixerKind::Pool => "Pool",
            ChannelMixerKind::Identity => "Identity",
            ChannelMixerKind::Geglu => "GEGLU",
        }
    }
}

impl fmt::Display for TokenMixerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl fmt::Display for ChannelMixerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for TokenMixerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        TokenMixerKind::ALL
            .into_iter()
            .find(|k| k.key() == norm)
            .ok_or_else(|| Error::config("token_mixer", format!("unknown token mixer `{s}`")))
    }
}

impl FromStr for ChannelMixerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        ChannelMixerKind::ALL
            .into_iter()
            .find(|k| k.key() == norm)
            .ok_or_else(|| {
                Error::config("channel_mixer", format!("unknown channel mixer `{s}`"))
            })
    }
}

/// How a parameter tensor is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform on `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    Uniform { fan_in: usize },
    Zeros,
    Ones,
}

/// Name, shape and training attributes of one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorSpec {
    pub name: &'static str,
    pub shape: Vec<usize>,
    pub init: Init,
    /// Whether weight decay applies. Biases and norm affines are exempt.
    pub decay: bool,
}

impl TensorSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// `[rows x cols]` view: the leading axis against everything else.
    /// Rank-1 tensors are a single row.
    pub fn matrix_dims(&self) -> (usize, usize) {
        matrix_dims(&self.shape)
    }

    fn linear_weight(name: &'static str, fan_in: usize, fan_out: usize) -> Self {
        Self {
            name,
            shape: vec![fan_in, fan_out],
            init: Init::Uniform { fan_in },
            decay: true,
        }
    }

    fn bias(name: &'static str, width: usize) -> Self {
        Self {
            name,
            shape: vec![width],
            init: Init::Zeros,
            decay: false,
        }
    }

    fn depthwise(name: &'static str, channels: usize, kernel: usize) -> Self {
        Self {
            name,
            shape: vec![channels, 1, kernel],
            init: Init::Uniform { fan_in: kernel },
            decay: true,
        }
    }
}

pub fn matrix_dims(shape: &[usize]) -> (usize, usize) {
    match shape {
        [n] => (1, *n),
        [rows, rest @ ..] => (*rows, rest.iter().product()),
        [] => (1, 1),
    }
}

/// Geometry shared by all mixers in a model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockSpec {
    pub token: TokenMixerKind,
    pub channel: ChannelMixerKind,
    pub d_model: usize,
    pub dw_kernel: usize,
    pub channel_residual: bool,
}

impl BlockSpec {
    pub fn new(token: TokenMixerKind, channel: ChannelMixerKind, d_model: usize) -> Self {
        Self {
            token,
            channel,
            d_model,
            dw_kernel: DEFAULT_DW_KERNEL,
            channel_residual: true,
        }
    }

    /// A note for sequences shorter than the wide kernel, where padding dominates.
    pub fn short_sequence_warning(&self, len: usize) -> Option<String> {
        (self.token.uses_wide_kernel() && len < self.dw_kernel).then(|| {
            format!(
                "{} token mixer with kernel {} applied to only {len} frames; output is dominated by padding",
                self.token, self.dw_kernel
            )
        })
    }
}

pub fn token_layout(kind: TokenMixerKind, d: usize, dw_kernel: usize) -> Vec<TensorSpec> {
    match kind {
        TokenMixerKind::SelfAttention => vec![
            TensorSpec::linear_weight("wq.weight", d, d),
            TensorSpec::bias("wq.bias", d),
            TensorSpec::linear_weight("wk.weight", d, d),
            TensorSpec::bias("wk.bias", d),
            TensorSpec::linear_weight("wv.weight", d, d),
            TensorSpec::bias("wv.bias", d),
            TensorSpec::linear_weight("wo.weight", d, d),
            TensorSpec::bias("wo.bias", d),
        ],
        TokenMixerKind::Pool | TokenMixerKind::Identity => vec![],
        TokenMixerKind::Isc => {
            let h = ISC_EXPANSION * d;
            vec![
                TensorSpec::linear_weight("expand.weight", d, h),
                TensorSpec::depthwise("depthwise.weight", h, dw_kernel),
                TensorSpec::linear_weight("project.weight", h, d),
            ]
        }
        TokenMixerKind::Dw => vec![TensorSpec::depthwise("depthwise.weight", d, dw_kernel)],
        TokenMixerKind::Msdw => vec![
            TensorSpec::depthwise("wide.weight", d, dw_kernel),
            TensorSpec::depthwise("point.weight", d, 1),
        ],
    }
}

pub fn channel_layout(kind: ChannelMixerKind, d: usize) -> Vec<TensorSpec> {
    match kind {
        ChannelMixerKind::Ffn => {
            let h = FFN_EXPANSION * d;
            vec![
                TensorSpec::linear_weight("fc_in.weight", d, h),
                TensorSpec::bias("fc_in.bias", h),
                TensorSpec::linear_weight("fc_out.weight", h, d),
                TensorSpec::bias("fc_out.bias", d),
            ]
        }
        ChannelMixerKind::Geglu => {
            let h = GEGLU_EXPANSION * d;
            vec![
                TensorSpec::linear_weight("gate.weight", d, h),
                TensorSpec::bias("gate.bias", h),
                TensorSpec::linear_weight("value.weight", d, h),
                TensorSpec::bias("value.bias", h),
                TensorSpec::linear_weight("out.weight", h, d),
                TensorSpec::bias("out.bias", d),
            ]
        }
        ChannelMixerKind::Pool | ChannelMixerKind::Identity => vec![],
    }
}

pub fn norm_layout(d: usize) -> Vec<TensorSpec> {
    vec![
        TensorSpec {
            name: "gamma",
            shape: vec![d],
            init: Init::Ones,
            decay: false,
        },
        TensorSpec {
            name: "beta",
            shape: vec![d],
            init: Init::Zeros,
            decay: false,
        },
    ]
}

/// Named tensors of one mixer, in layout order.
#[derive(Clone, Debug, PartialEq)]
pub struct MixerParams<T> {
    entries: Vec<(&'static str, T)>,
}

impl<T> MixerParams<T> {
    pub fn new(entries: Vec<(&'static str, T)>) -> Self {
        Self { entries }
    }

    pub fn get(&self, name: &str) -> Result<&T> {
        self.entries
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::shape("mixer", format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&'static str, &T)> {
        self.entries.iter().map(|(n, t)| (*n, t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> MixerParams<U> {
        MixerParams {
            entries: self.entries.iter().map(|(n, t)| (*n, f(t))).collect(),
        }
    }
}

impl MixerParams<FrameMatrix> {
    /// All-zero tensors for a layout (norm gains included).
    pub fn zeros(layout: &[TensorSpec]) -> Self {
        Self::new(
            layout
                .iter()
                .map(|s| {
                    let (r, c) = s.matrix_dims();
                    (s.name, FrameMatrix::zeros(r, c))
                })
                .collect(),
        )
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormParams<T> {
    pub gamma: T,
    pub beta: T,
}

impl<T> NormParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> NormParams<U> {
        NormParams {
            gamma: f(&self.gamma),
            beta: f(&self.beta),
        }
    }
}

impl NormParams<FrameMatrix> {
    pub fn identity(d: usize) -> Self {
        Self {
            gamma: FrameMatrix::filled(1, d, 1.0),
            beta: FrameMatrix::zeros(1, d),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T> {
    pub token_norm: NormParams<T>,
    pub token: MixerParams<T>,
    pub channel_norm: NormParams<T>,
    pub channel: MixerParams<T>,
}

impl<T> BlockParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> BlockParams<U> {
        BlockParams {
            token_norm: self.token_norm.map(&mut f),
            token: self.token.map(&mut f),
            channel_norm: self.channel_norm.map(&mut f),
            channel: self.channel.map(&mut f),
        }
    }

    /// Tensors in a fixed order: token norm, token mixer, channel norm, channel mixer.
    pub fn tensors(&self) -> Vec<&T> {
        let mut out = vec![&self.token_norm.gamma, &self.token_norm.beta];
        out.extend(self.token.iter().map(|(_, t)| t));
        out.extend([&self.channel_norm.gamma, &self.channel_norm.beta]);
        out.extend(self.channel.iter().map(|(_, t)| t));
        out
    }
}

impl BlockParams<FrameMatrix> {
    /// Zero mixer weights with identity norms.
    pub fn zeros(spec: &BlockSpec) -> Self {
        Self {
            token_norm: NormParams::identity(spec.d_model),
            token: MixerParams::zeros(&token_layout(spec.token, spec.d_model, spec.dw_kernel)),
            channel_norm: NormParams::identity(spec.d_model),
            channel: MixerParams::zeros(&channel_layout(spec.channel, spec.d_model)),
        }
    }

    /// Rebuild from a flat list produced by [`BlockParams::tensors`].
    pub fn from_tensors(spec: &BlockSpec, tensors: &[FrameMatrix]) -> Self {
        let template = Self::zeros(spec);
        let mut it = tensors.iter().cloned();
        template.map(|_| it.next().expect("tensor count matches block layout"))
    }

    pub fn bind(&self, g: &mut Graph) -> BlockParams<NodeId> {
        self.map(|t| g.param(t.clone()))
    }
}

fn check_width(g: &Graph, x: NodeId, d: usize, op: &'static str) -> Result<()> {
    let (l, c) = g.shape(x);
    if c != d {
        return Err(Error::shape(
            op,
            format!("input [{l}x{c}] does not have d_model = {d} channels"),
        ));
    }
    Ok(())
}

fn depthwise(g: &mut Graph, x: NodeId, w: NodeId, kernel: usize) -> Result<NodeId> {
    let channels = g.shape(x).1;
    g.conv1d(x, w, None, ConvSpec::same(kernel, channels))
}

/// `Y = Mix(LN(X)) + X` across the frame axis.
pub fn token_mix(
    g: &mut Graph,
    spec: &BlockSpec,
    norm: &NormParams<NodeId>,
    params: &MixerParams<NodeId>,
    x: NodeId,
) -> Result<NodeId> {
    let d = spec.d_model;
    check_width(g, x, d, "token_mix")?;
    let z = g.layer_norm(x, norm.gamma, norm.beta, LAYER_NORM_EPS)?;
    let mixed = match spec.token {
        TokenMixerKind::SelfAttention => {
            let q = g.linear(z, *params.get("wq.weight")?, Some(*params.get("wq.bias")?))?;
            let k = g.linear(z, *params.get("wk.weight")?, Some(*params.get("wk.bias")?))?;
            let v = g.linear(z, *params.get("wv.weight")?, Some(*params.get("wv.bias")?))?;
            let kt = g.transpose(k);
            let scores = g.matmul(q, kt)?;
            let scores = g.scale(scores, 1.0 / (d as f64).sqrt());
            let attn = g.softmax_rows(scores);
            let ctx = g.matmul(attn, v)?;
            g.linear(ctx, *params.get("wo.weight")?, Some(*params.get("wo.bias")?))?
        }
        TokenMixerKind::Pool => g.avg_pool(z, POOL_KERNEL, Axis::Time)?,
        TokenMixerKind::Identity => z,
        TokenMixerKind::Isc => {
            let h = g.linear(z, *params.get("expand.weight")?, None)?;
            let h = g.gelu(h);
            let h = depthwise(g, h, *params.get("depthwise.weight")?, spec.dw_kernel)?;
            let h = g.gelu(h);
            g.linear(h, *params.get("project.weight")?, None)?
        }
        TokenMixerKind::Dw => depthwise(g, z, *params.get("depthwise.weight")?, spec.dw_kernel)?,
        TokenMixerKind::Msdw => {
            let wide = depthwise(g, z, *params.get("wide.weight")?, spec.dw_kernel)?;
            let point = depthwise(g, z, *params.get("point.weight")?, 1)?;
            let sum = g.add(wide, point)?;
            g.gelu(sum)
        }
    };
    g.add(mixed, x)
}

/// `Y = Mix(LN(X)) (+ X)` within each frame.
pub fn channel_mix(
    g: &mut Graph,
    spec: &BlockSpec,
    norm: &NormParams<NodeId>,
    params: &MixerParams<NodeId>,
    x: NodeId,
) -> Result<NodeId> {
    check_width(g, x, spec.d_model, "channel_mix")?;
    let z = g.layer_norm(x, norm.gamma, norm.beta, LAYER_NORM_EPS)?;
    let mixed = match spec.channel {
        ChannelMixerKind::Ffn => {
            let h = g.linear(z, *params.get("fc_in.weight")?, Some(*params.get("fc_in.bias")?))?;
            let h = g.gelu(h);
            g.linear(h, *params.get("fc_out.weight")?, Some(*params.get("fc_out.bias")?))?
        }
        ChannelMixerKind::Geglu => {
            let gate = g.linear(z, *params.get("gate.weight")?, Some(*params.get("gate.bias")?))?;
            let gate = g.gelu(gate);
            let value =
                g.linear(z, *params.get("value.weight")?, Some(*params.get("value.bias")?))?;
            let h = g.mul(gate, value)?;
            g.linear(h, *params.get("out.weight")?, Some(*params.get("out.bias")?))?
        }
        ChannelMixerKind::Pool => g.avg_pool(z, POOL_KERNEL, Axis::Channel)?,
        ChannelMixerKind::Identity => z,
    };
    if spec.channel_residual {
        g.add(mixed, x)
    } else {
        Ok(mixed)
    }
}

/// Token mixer followed by channel mixer; shape-preserving.
pub fn afformer_block(
    g: &mut Graph,
    spec: &BlockSpec,
    params: &BlockParams<NodeId>,
    x: NodeId,
) -> Result<NodeId> {
    let y = token_mix(g, spec, &params.token_norm, &params.token, x)?;
    channel_mix(g, spec, &params.channel_norm, &params.channel, y)
}
