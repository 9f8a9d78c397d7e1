//! Gradient-check suite over every block combination and a whole model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gradcheck::{grad_check, GradCheckOptions, GradCheckReport, DEFAULT_TOLERANCE};
use crate::graph::{Graph, NodeId};
use crate::mixers::{afformer_block, BlockParams, BlockSpec, ChannelMixerKind, TokenMixerKind};
use crate::model::{Model, ModelConfig};
use crate::tensor::FrameMatrix;

pub const BLOCK_LEN: usize = 16;
pub const BLOCK_WIDTH: usize = 8;

/// Geometry of the end-to-end case.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scale {
    /// Configured geometry, a few sampled coordinates per tensor.
    Paper,
    /// `seq_len` 64, `input_dim` 16, every coordinate.
    Small,
}

pub struct GradCheckCase {
    pub name: String,
    pub run: Box<dyn Fn() -> Result<GradCheckReport>>,
}

impl GradCheckCase {
    pub fn new(name: impl Into<String>, run: impl Fn() -> Result<GradCheckReport> + 'static) -> Self {
        Self {
            name: name.into(),
            run: Box::new(run),
        }
    }
}

#[derive(Clone, Debug)]
pub struct CaseOutcome {
    pub name: String,
    /// `Err` holds the failure message of a case that could not be evaluated.
    pub max_rel_error: std::result::Result<f64, String>,
    pub passed: bool,
}

impl CaseOutcome {
    pub fn line(&self) -> String {
        let status = if self.passed { "PASS" } else { "FAIL" };
        match &self.max_rel_error {
            Ok(e) => format!("{status} {:<28} max rel error {e:.3e}", self.name),
            Err(m) => format!("{status} {:<28} error: {m}", self.name),
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> FrameMatrix {
    FrameMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-scale..scale))
}

/// Block parameters with every tensor (norms included) randomized.
pub fn random_block_params(spec: &BlockSpec, seed: u64) -> BlockParams<FrameMatrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let zeros = BlockParams::zeros(spec);
    let mut p = zeros.map(|t| uniform(&mut rng, t.rows(), t.cols(), 0.5));
    for norm in [&mut p.token_norm, &mut p.channel_norm] {
        norm.gamma = norm.gamma.map(|v| 1.0 + 0.4 * v);
    }
    p
}

/// Checks `sum(block(X) ⊙ R)` with respect to the input and every block tensor.
pub fn check_block(spec: &BlockSpec, len: usize, seed: u64) -> Result<GradCheckReport> {
    let params = random_block_params(spec, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB10C);
    let x = uniform(&mut rng, len, spec.d_model, 1.0);
    let r = uniform(&mut rng, len, spec.d_model, 1.0);
    let mut theta = vec![x];
    theta.extend(params.tensors().into_iter().cloned());
    let spec = *spec;
    grad_check(
        move |g: &mut Graph, leaves: &[NodeId]| {
            let mut it = leaves[1..].iter().copied();
            let bound = BlockParams::zeros(&spec).map(|_| it.next().expect("leaf per tensor"));
            let y = afformer_block(g, &spec, &bound, leaves[0])?;
            let w = g.input(r.clone());
            let yw = g.mul(y, w)?;
            Ok(g.sum(yw))
        },
        &theta,
        GradCheckOptions::default(),
    )
}

/// Checks cross-entropy of a full forward pass with respect to every model tensor.
pub fn check_model(cfg: &ModelConfig, max_coords_per_tensor: Option<usize>) -> Result<GradCheckReport> {
    let model = Model::build(cfg.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xE2E);
    let x = uniform(&mut rng, cfg.seq_len, cfg.input_dim, 1.0);
    let theta: Vec<FrameMatrix> = model.store().iter().map(|p| p.value.clone()).collect();
    grad_check(
        |g: &mut Graph, leaves: &[NodeId]| {
            let params = model.layout().map(|&i| leaves[i]);
            let xn = g.input(x.clone());
            let trace = model.forward_graph(g, &params, xn)?;
            g.cross_entropy(trace.logits, 1)
        },
        &theta,
        GradCheckOptions {
            max_coords_per_tensor,
            ..GradCheckOptions::default()
        },
    )
}

/// The shrunken end-to-end geometry used by [`Scale::Small`].
pub fn small_model_config(base: &ModelConfig) -> ModelConfig {
    ModelConfig {
        seq_len: 64,
        input_dim: 16,
        ..base.clone()
    }
}

/// 24 block cases followed by one end-to-end case for `base`'s mixers.
pub fn standard_cases(base: &ModelConfig, scale: Scale) -> Vec<GradCheckCase> {
    let mut cases = Vec::new();
    for (i, t) in TokenMixerKind::ALL.into_iter().enumerate() {
        for (j, c) in ChannelMixerKind::ALL.into_iter().enumerate() {
            let mut spec = BlockSpec::new(t, c, BLOCK_WIDTH);
            spec.channel_residual = base.channel_residual;
            spec.dw_kernel = base.dw_kernel;
            let seed = base.seed.wrapping_add((i * 4 + j) as u64);
            cases.push(GradCheckCase::new(
                format!("block {}+{}", t.key(), c.key()),
                move || check_block(&spec, BLOCK_LEN, seed),
            ));
        }
    }
    let (cfg, cap) = match scale {
        Scale::Small => (small_model_config(base), None),
        Scale::Paper => (base.clone(), Some(3)),
    };
    cases.push(GradCheckCase::new(
        format!("model {}+{} L={}", cfg.token_mixer.key(), cfg.channel_mixer.key(), cfg.seq_len),
        move || check_model(&cfg, cap),
    ));
    cases
}

/// Runs every case; a case passes when it evaluates and stays below `tolerance`.
pub fn run_cases(cases: &[GradCheckCase], tolerance: f64) -> Vec<CaseOutcome> {
    cases
        .iter()
        .map(|case| match (case.run)() {
            Ok(r) => CaseOutcome {
                name: case.name.clone(),
                max_rel_error: Ok(r.max_rel_error),
                passed: r.passes(tolerance),
            },
            Err(e) => CaseOutcome {
                name: case.name.clone(),
                max_rel_error: Err(e.to_string()),
                passed: false,
            },
        })
        .collect()
}

pub fn run_standard(base: &ModelConfig, scale: Scale) -> Vec<CaseOutcome> {
    run_cases(&standard_cases(base, scale), DEFAULT_TOLERANCE)
}
