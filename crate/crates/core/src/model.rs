//! Projection, merge hierarchy, classification head.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{ConvSpec, Graph, NodeId, Precision};
use crate::mixers::{
    afformer_block, channel_layout, matrix_dims, norm_layout, token_layout, BlockParams,
    BlockSpec, ChannelMixerKind, Init, MixerParams, NormParams, TensorSpec, TokenMixerKind,
    DEFAULT_DW_KERNEL, LAYER_NORM_EPS,
};
use crate::tensor::FrameMatrix;

/// Name prefix shared by the projection tensors.
pub const PROJECTION_PREFIX: &str = "projection.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub seq_len: usize,
    pub d_model: usize,
    pub proj_kernel: usize,
    pub stage_factors: Vec<usize>,
    pub stage_depths: Vec<usize>,
    pub token_mixer: TokenMixerKind,
    pub channel_mixer: ChannelMixerKind,
    pub head_hidden: usize,
    pub num_classes: usize,
    pub channel_residual: bool,
    pub dw_kernel: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 1024,
            seq_len: 3200,
            d_model: 8,
            proj_kernel: 3,
            stage_factors: vec![4, 2, 2],
            stage_depths: vec![2, 2, 1],
            token_mixer: TokenMixerKind::Msdw,
            channel_mixer: ChannelMixerKind::Geglu,
            head_hidden: 16,
            num_classes: 2,
            channel_residual: true,
            dw_kernel: DEFAULT_DW_KERNEL,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_dim", self.input_dim),
            ("seq_len", self.seq_len),
            ("d_model", self.d_model),
            ("head_hidden", self.head_hidden),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes", "must be at least 2"));
        }
        if self.proj_kernel % 2 == 0 {
            return Err(Error::config(
                "proj_kernel",
                format!("must be odd, got {}", self.proj_kernel),
            ));
        }
        if self.dw_kernel % 2 == 0 {
            return Err(Error::config(
                "dw_kernel",
                format!("must be odd, got {}", self.dw_kernel),
            ));
        }
        if self.stage_factors.is_empty() {
            return Err(Error::config("stage_factors", "at least one stage is required"));
        }
        if self.stage_factors.len() != self.stage_depths.len() {
            return Err(Error::config(
                "stage_depths",
                format!(
                    "{} depths for {} stage factors",
                    self.stage_depths.len(),
                    self.stage_factors.len()
                ),
            ));
        }
        if let Some(i) = self.stage_factors.iter().position(|&f| f == 0) {
            return Err(Error::config("stage_factors", format!("factor {i} is zero")));
        }
        if let Some(i) = self.stage_depths.iter().position(|&d| d == 0) {
            return Err(Error::config("stage_depths", format!("depth {i} is zero")));
        }
        let mut product = 1usize;
        for &f in &self.stage_factors {
            product = product.saturating_mul(f);
            if self.seq_len % product != 0 {
                return Err(Error::config(
                    "seq_len",
                    format!(
                        "{} is not divisible by the cumulative merge factor {product}",
                        self.seq_len
                    ),
                ));
            }
        }
        Ok(())
    }

    /// Frame counts after each stage.
    pub fn stage_lengths(&self) -> Vec<usize> {
        let mut len = self.seq_len;
        self.stage_factors
            .iter()
            .map(|f| {
                len /= f;
                len
            })
            .collect()
    }

    pub fn total_blocks(&self) -> usize {
        self.stage_depths.iter().sum()
    }

    pub fn block_spec(&self) -> BlockSpec {
        BlockSpec {
            token: self.token_mixer,
            channel: self.channel_mixer,
            d_model: self.d_model,
            dw_kernel: self.dw_kernel,
            channel_residual: self.channel_residual,
        }
    }

    pub fn with_mixers(mut self, token: TokenMixerKind, channel: ChannelMixerKind) -> Self {
        self.token_mixer = token;
        self.channel_mixer = channel;
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum HierarchyPreset {
    H2,
    H3_1,
    H3_2,
    H4,
}

impl HierarchyPreset {
    pub const ALL: [HierarchyPreset; 4] = [
        HierarchyPreset::H2,
        HierarchyPreset::H3_1,
        HierarchyPreset::H3_2,
        HierarchyPreset::H4,
    ];

    /// `(stage_factors, stage_depths)`
    pub fn expand(self) -> (Vec<usize>, Vec<usize>) {
        match self {
            HierarchyPreset::H2 => (vec![4, 2], vec![2, 2]),
            HierarchyPreset::H3_1 => (vec![4, 2, 2], vec![2, 2, 1]),
            HierarchyPreset::H3_2 => (vec![4, 2, 2], vec![2, 2, 2]),
            HierarchyPreset::H4 => (vec![4, 2, 2, 2], vec![2, 2, 2, 1]),
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            HierarchyPreset::H2 => "h2",
            HierarchyPreset::H3_1 => "h3_1",
            HierarchyPreset::H3_2 => "h3_2",
            HierarchyPreset::H4 => "h4",
        }
    }
}

impl fmt::Display for HierarchyPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for HierarchyPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s
            .trim()
            .to_ascii_lowercase()
            .replace(['-', '.'], "_")
            .replace("hierarchy", "h");
        HierarchyPreset::ALL
            .into_iter()
            .find(|p| p.key() == norm)
            .ok_or_else(|| Error::config("preset", format!("unknown hierarchy preset `{s}`")))
    }
}

/// Overwrites the stage layout; every other field is kept.
pub fn apply_preset(preset: HierarchyPreset, cfg: &ModelConfig) -> Result<ModelConfig> {
    let (factors, depths) = preset.expand();
    let out = ModelConfig {
        stage_factors: factors,
        stage_depths: depths,
        ..cfg.clone()
    };
    out.validate()?;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: FrameMatrix,
    pub grad: FrameMatrix,
    pub decay: bool,
}

/// Named parameter tensors in construction order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: String, shape: Vec<usize>, value: FrameMatrix, decay: bool) -> Result<usize> {
        if self.index.contains_key(&name) {
            return Err(Error::config("parameters", format!("duplicate parameter `{name}`")));
        }
        let (r, c) = matrix_dims(&shape);
        if value.shape() != (r, c) {
            return Err(Error::shape(
                "parameter",
                format!("`{name}` value [{}x{}] does not match shape {shape:?}", value.rows(), value.cols()),
            ));
        }
        let i = self.params.len();
        self.index.insert(name.clone(), i);
        self.params.push(Parameter {
            name,
            shape,
            grad: FrameMatrix::zeros(r, c),
            value,
            decay,
        });
        Ok(i)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> std::slice::IterMut<'_, Parameter> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn scalar_count_excluding_projection(&self) -> usize {
        self.params
            .iter()
            .filter(|p| !p.name.starts_with(PROJECTION_PREFIX))
            .map(|p| p.value.len())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Same names, shapes and bit patterns of every value.
    pub fn bit_identical(&self, other: &Self) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| {
                a.name == b.name
                    && a.shape == b.shape
                    && a.value
                        .data()
                        .iter()
                        .zip(b.value.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T> {
    pub weight: T,
    pub bias: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageParams<T> {
    pub merge: ConvParams<T>,
    pub blocks: Vec<BlockParams<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams<T> {
    pub hidden_weight: T,
    pub hidden_bias: T,
    pub out_weight: T,
    pub out_bias: T,
}

/// Structured view of every model tensor, generic over the handle type
/// (store indices, graph nodes, or owned values).
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub projection: ConvParams<T>,
    pub stages: Vec<StageParams<T>>,
    pub final_norm: NormParams<T>,
    pub head: HeadParams<T>,
}

impl<T> ModelParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> ModelParams<U> {
        ModelParams {
            projection: ConvParams {
                weight: f(&self.projection.weight),
                bias: f(&self.projection.bias),
            },
            stages: self
                .stages
                .iter()
                .map(|s| StageParams {
                    merge: ConvParams {
                        weight: f(&s.merge.weight),
                        bias: f(&s.merge.bias),
                    },
                    blocks: s.blocks.iter().map(|b| b.map(&mut f)).collect(),
                })
                .collect(),
            final_norm: self.final_norm.map(&mut f),
            head: HeadParams {
                hidden_weight: f(&self.head.hidden_weight),
                hidden_bias: f(&self.head.hidden_bias),
                out_weight: f(&self.head.out_weight),
                out_bias: f(&self.head.out_bias),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageInfo {
    pub factor: usize,
    pub depth: usize,
    pub in_len: usize,
    pub out_len: usize,
}

/// Layer geometry of a built model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Architecture {
    pub seq_len: usize,
    pub input_dim: usize,
    pub d_model: usize,
    pub stages: Vec<StageInfo>,
    pub head_hidden: usize,
    pub num_classes: usize,
}

/// Counter-based initializer: tensor `i` draws from stream `i` of a
/// ChaCha generator keyed by the model seed, so each tensor is independent
/// of how many values the others consumed.
fn init_tensor(spec: &TensorSpec, seed: u64, stream: u64) -> FrameMatrix {
    let (r, c) = spec.matrix_dims();
    match spec.init {
        Init::Zeros => FrameMatrix::zeros(r, c),
        Init::Ones => FrameMatrix::filled(r, c, 1.0),
        Init::Uniform { fan_in } => {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream);
            FrameMatrix::from_fn(r, c, |_, _| bound * (2.0 * rng.gen::<f64>() - 1.0))
        }
    }
}

struct StoreBuilder {
    store: ParameterStore,
    seed: u64,
}

impl StoreBuilder {
    fn add(&mut self, prefix: &str, spec: &TensorSpec) -> Result<usize> {
        let stream = self.store.len() as u64;
        let value = init_tensor(spec, self.seed, stream);
        self.store.push(
            format!("{prefix}.{}", spec.name),
            spec.shape.clone(),
            value,
            spec.decay,
        )
    }

    fn conv(&mut self, prefix: &str, cout: usize, cin: usize, kernel: usize) -> Result<ConvParams<usize>> {
        let fan_in = cin * kernel;
        let weight = TensorSpec {
            name: "weight",
            shape: vec![cout, cin, kernel],
            init: Init::Uniform { fan_in },
            decay: true,
        };
        let bias = TensorSpec {
            name: "bias",
            shape: vec![cout],
            init: Init::Zeros,
            decay: false,
        };
        Ok(ConvParams {
            weight: self.add(prefix, &weight)?,
            bias: self.add(prefix, &bias)?,
        })
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> Result<(usize, usize)> {
        let weight = TensorSpec {
            name: "weight",
            shape: vec![fan_in, fan_out],
            init: Init::Uniform { fan_in },
            decay: true,
        };
        let bias = TensorSpec {
            name: "bias",
            shape: vec![fan_out],
            init: Init::Zeros,
            decay: false,
        };
        Ok((self.add(prefix, &weight)?, self.add(prefix, &bias)?))
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Result<NormParams<usize>> {
        let layout = norm_layout(d);
        Ok(NormParams {
            gamma: self.add(prefix, &layout[0])?,
            beta: self.add(prefix, &layout[1])?,
        })
    }

    fn mixer(&mut self, prefix: &str, layout: &[TensorSpec]) -> Result<MixerParams<usize>> {
        let entries = layout
            .iter()
            .map(|s| Ok((s.name, self.add(prefix, s)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(MixerParams::new(entries))
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    store: ParameterStore,
    layout: ModelParams<usize>,
    arch: Architecture,
}

/// Result of a forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// Raw class scores, `[1 x num_classes]`.
    pub logits: FrameMatrix,
    /// `(frames, channels)` after each stage.
    pub stage_shapes: Vec<(usize, usize)>,
    pub warnings: Vec<String>,
}

/// Graph handles produced by [`Model::forward_graph`].
pub struct ForwardTrace {
    pub logits: NodeId,
    pub stage_shapes: Vec<(usize, usize)>,
    pub warnings: Vec<String>,
}

/// Allocates and initializes every tensor of the configured network.
pub fn build_model(cfg: &ModelConfig) -> Result<(ParameterStore, Architecture)> {
    let model = Model::build(cfg.clone())?;
    Ok((model.store, model.arch))
}

impl Model {
    pub fn build(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let spec = cfg.block_spec();
        let mut b = StoreBuilder {
            store: ParameterStore::new(),
            seed: cfg.seed,
        };
        let projection = b.conv("projection", d, cfg.input_dim, cfg.proj_kernel)?;
        let token_layout = token_layout(spec.token, d, spec.dw_kernel);
        let channel_layout = channel_layout(spec.channel, d);
        let mut stages = Vec::with_capacity(cfg.stage_factors.len());
        for (s, (&factor, &depth)) in cfg.stage_factors.iter().zip(&cfg.stage_depths).enumerate() {
            let merge = b.conv(&format!("stage{s}.merge"), d, d, factor)?;
            let mut blocks = Vec::with_capacity(depth);
            for k in 0..depth {
                let p = format!("stage{s}.block{k}");
                blocks.push(BlockParams {
                    token_norm: b.norm(&format!("{p}.token_norm"), d)?,
                    token: b.mixer(&format!("{p}.token_mixer"), &token_layout)?,
                    channel_norm: b.norm(&format!("{p}.channel_norm"), d)?,
                    channel: b.mixer(&format!("{p}.channel_mixer"), &channel_layout)?,
                });
            }
            stages.push(StageParams { merge, blocks });
        }
        let final_norm = b.norm("final_norm", d)?;
        let (hidden_weight, hidden_bias) = b.linear("head.hidden", d, cfg.head_hidden)?;
        let (out_weight, out_bias) = b.linear("head.out", cfg.head_hidden, cfg.num_classes)?;
        let layout = ModelParams {
            projection,
            stages,
            final_norm,
            head: HeadParams {
                hidden_weight,
                hidden_bias,
                out_weight,
                out_bias,
            },
        };

        let mut in_len = cfg.seq_len;
        let stage_info = cfg
            .stage_factors
            .iter()
            .zip(&cfg.stage_depths)
            .map(|(&factor, &depth)| {
                let info = StageInfo {
                    factor,
                    depth,
                    in_len,
                    out_len: in_len / factor,
                };
                in_len /= factor;
                info
            })
            .collect();
        let arch = Architecture {
            seq_len: cfg.seq_len,
            input_dim: cfg.input_dim,
            d_model: d,
            stages: stage_info,
            head_hidden: cfg.head_hidden,
            num_classes: cfg.num_classes,
        };
        let store = b.store;
        Ok(Self {
            config: cfg,
            store,
            layout,
            arch,
        })
    }

    /// Reassemble a model from a config and a store with matching names and shapes.
    pub fn from_parts(cfg: ModelConfig, store: ParameterStore) -> Result<Self> {
        let mut model = Self::build(cfg)?;
        if model.store.len() != store.len() {
            return Err(Error::config(
                "parameters",
                format!("expected {} tensors, found {}", model.store.len(), store.len()),
            ));
        }
        for p in store.iter() {
            let slot = model.store.get_mut(&p.name).ok_or_else(|| {
                Error::config("parameters", format!("unexpected tensor `{}`", p.name))
            })?;
            if slot.shape != p.shape {
                return Err(Error::config(
                    "parameters",
                    format!("`{}` has shape {:?}, expected {:?}", p.name, p.shape, slot.shape),
                ));
            }
            slot.value = p.value.clone();
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParameterStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParameterStore {
        &mut self.store
    }

    pub fn layout(&self) -> &ModelParams<usize> {
        &self.layout
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    /// Put every parameter on the graph; `trainable` decides whether they
    /// are differentiable leaves or constants. Returned handles follow store order.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> (Vec<NodeId>, ModelParams<NodeId>) {
        let ids: Vec<NodeId> = self
            .store
            .iter()
            .map(|p| {
                if trainable {
                    g.param(p.value.clone())
                } else {
                    g.input(p.value.clone())
                }
            })
            .collect();
        let handles = self.layout.map(|&i| ids[i]);
        (ids, handles)
    }

    /// Builds the forward computation on `g` from already-bound parameters.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        params: &ModelParams<NodeId>,
        x: NodeId,
    ) -> Result<ForwardTrace> {
        let cfg = &self.config;
        let (rows, cols) = g.shape(x);
        if (rows, cols) != (cfg.seq_len, cfg.input_dim) {
            return Err(Error::shape(
                "forward",
                format!(
                    "input: expected [{}x{}], got [{rows}x{cols}]",
                    cfg.seq_len, cfg.input_dim
                ),
            ));
        }
        let at = |stage: &str| {
            let stage = stage.to_string();
            move |e: Error| match e {
                Error::Shape { detail, .. } => Error::shape("forward", format!("{stage}: {detail}")),
                other => other,
            }
        };
        let spec = cfg.block_spec();
        let mut h = g
            .conv1d(
                x,
                params.projection.weight,
                Some(params.projection.bias),
                ConvSpec::same(cfg.proj_kernel, 1),
            )
            .map_err(at("projection"))?;
        let mut stage_shapes = Vec::with_capacity(params.stages.len());
        let mut warnings = Vec::new();
        for (s, stage) in params.stages.iter().enumerate() {
            let name = format!("stage{s}");
            h = g
                .conv1d(
                    h,
                    stage.merge.weight,
                    Some(stage.merge.bias),
                    ConvSpec::downsample(cfg.stage_factors[s]),
                )
                .map_err(at(&name))?;
            if let Some(w) = spec.short_sequence_warning(g.shape(h).0) {
                warnings.push(format!("{name}: {w}"));
            }
            for block in &stage.blocks {
                h = afformer_block(g, &spec, block, h).map_err(at(&name))?;
            }
            stage_shapes.push(g.shape(h));
        }
        let h = g
            .layer_norm(h, params.final_norm.gamma, params.final_norm.beta, LAYER_NORM_EPS)
            .map_err(at("final_norm"))?;
        let pooled = g.mean_pool_time(h);
        let hidden = g
            .linear(pooled, params.head.hidden_weight, Some(params.head.hidden_bias))
            .map_err(at("head"))?;
        let hidden = g.gelu(hidden);
        let logits = g
            .linear(hidden, params.head.out_weight, Some(params.head.out_bias))
            .map_err(at("head"))?;
        Ok(ForwardTrace {
            logits,
            stage_shapes,
            warnings,
        })
    }

    pub fn forward(&self, x: &FrameMatrix) -> Result<Forward> {
        self.forward_with_precision(x, Precision::F64)
    }

    pub fn forward_with_precision(&self, x: &FrameMatrix, precision: Precision) -> Result<Forward> {
        let mut g = Graph::with_precision(precision);
        let (_, params) = self.bind(&mut g, false);
        let xn = g.input(x.clone());
        let trace = self.forward_graph(&mut g, &params, xn)?;
        Ok(Forward {
            logits: g.value(trace.logits).clone(),
            stage_shapes: trace.stage_shapes,
            warnings: trace.warnings,
        })
    }

    /// Cross-entropy of one sequence and its gradient for every store tensor (store order).
    pub fn loss_and_grad(&self, x: &FrameMatrix, label: usize) -> Result<SampleGrad> {
        let mut g = Graph::new();
        let (ids, params) = self.bind(&mut g, true);
        let xn = g.input(x.clone());
        let trace = self.forward_graph(&mut g, &params, xn)?;
        let loss = g.cross_entropy(trace.logits, label)?;
        let loss_value = g.value(loss).item();
        if !loss_value.is_finite() {
            return Err(Error::Evaluation(format!("non-finite loss {loss_value}")));
        }
        let logits = g.value(trace.logits).clone();
        let mut grads = g.backward(loss)?;
        let grads = ids
            .iter()
            .zip(self.store.iter())
            .map(|(id, p)| {
                grads
                    .take(*id)
                    .unwrap_or_else(|| FrameMatrix::zeros(p.value.rows(), p.value.cols()))
            })
            .collect();
        Ok(SampleGrad {
            loss: loss_value,
            logits,
            grads,
        })
    }
}

pub struct SampleGrad {
    pub loss: f64,
    pub logits: FrameMatrix,
    pub grads: Vec<FrameMatrix>,
}
