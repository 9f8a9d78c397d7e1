//! Straight-line reference implementations written with plain nested loops,
//! independent of the graph engine.

#![allow(dead_code)]

use hafformer::mixers::{ChannelMixerKind, TokenMixerKind};
use hafformer::model::{Model, ModelConfig, ParameterStore};
use hafformer::FrameMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(m: &FrameMatrix) -> Mat {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

pub fn from_mat(m: &Mat) -> FrameMatrix {
    FrameMatrix::from_rows(m).unwrap()
}

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> FrameMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    FrameMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len());
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (m, k, n) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; n]; m];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i][p] * b[p][j];
            }
            out[i][j] = s;
        }
    }
    out
}

/// `x · W + b` with `W` stored `[in x out]`.
pub fn linear(x: &Mat, w: &Mat, b: Option<&[f64]>) -> Mat {
    let mut y = matmul(x, w);
    if let Some(b) = b {
        for row in &mut y {
            for (v, bb) in row.iter_mut().zip(b) {
                *v += bb;
            }
        }
    }
    y
}

/// Sliding-window convolution over frames. `w[o]` holds `cin/groups * k`
/// values indexed `ci * k + j`.
pub fn conv1d(x: &Mat, w: &Mat, b: Option<&[f64]>, k: usize, stride: usize, pad: usize, groups: usize) -> Mat {
    let len = x.len() as isize;
    let cin = x[0].len();
    let cout = w.len();
    let cin_pg = cin / groups;
    let cout_pg = cout / groups;
    let lout = (x.len() + 2 * pad - k) / stride + 1;
    let mut out = vec![vec![0.0; cout]; lout];
    for t in 0..lout {
        for o in 0..cout {
            let grp = o / cout_pg;
            let mut s = b.map_or(0.0, |b| b[o]);
            for ci in 0..cin_pg {
                for j in 0..k {
                    let src = (t * stride + j) as isize - pad as isize;
                    if src >= 0 && src < len {
                        s += w[o][ci * k + j] * x[src as usize][grp * cin_pg + ci];
                    }
                }
            }
            out[t][o] = s;
        }
    }
    out
}

pub fn layer_norm(x: &Mat, gamma: &[f64], beta: &[f64], eps: f64) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            row.iter()
                .enumerate()
                .map(|(c, v)| (v - mean) * inv * gamma[c] + beta[c])
                .collect()
        })
        .collect()
}

pub fn gelu_scalar(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu(x: &Mat) -> Mat {
    x.iter().map(|r| r.iter().map(|&v| gelu_scalar(v)).collect()).collect()
}

pub fn softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

pub fn hadamard(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).collect())
        .collect()
}

/// Mean over the valid entries of a width-3 window along frames.
pub fn avg_pool_time(x: &Mat) -> Mat {
    let l = x.len();
    (0..l)
        .map(|t| {
            let lo = t.saturating_sub(1);
            let hi = (t + 1).min(l - 1);
            (0..x[0].len())
                .map(|c| (lo..=hi).map(|s| x[s][c]).sum::<f64>() / (hi - lo + 1) as f64)
                .collect()
        })
        .collect()
}

/// Mean over the valid entries of a width-3 window along channels.
pub fn avg_pool_channels(x: &Mat) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len();
            (0..n)
                .map(|c| {
                    let lo = c.saturating_sub(1);
                    let hi = (c + 1).min(n - 1);
                    row[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
                })
                .collect()
        })
        .collect()
}

/// Single-head attention written with explicit loops.
pub fn attention(z: &Mat, wq: &Mat, bq: &[f64], wk: &Mat, bk: &[f64], wv: &Mat, bv: &[f64], wo: &Mat, bo: &[f64]) -> Mat {
    let q = linear(z, wq, Some(bq));
    let k = linear(z, wk, Some(bk));
    let v = linear(z, wv, Some(bv));
    let l = z.len();
    let d = z[0].len();
    let scale = 1.0 / (d as f64).sqrt();
    let mut ctx = vec![vec![0.0; d]; l];
    for i in 0..l {
        let scores: Vec<f64> = (0..l)
            .map(|j| (0..d).map(|c| q[i][c] * k[j][c]).sum::<f64>() * scale)
            .collect();
        let p = softmax_row(&scores);
        for j in 0..l {
            for c in 0..d {
                ctx[i][c] += p[j] * v[j][c];
            }
        }
    }
    linear(&ctx, wo, Some(bo))
}

/// GEGLU with explicit per-element loops: `W3(GELU(Z W1 + b1) ⊙ (Z W2 + b2)) + b3`.
pub fn geglu(z: &Mat, w1: &Mat, b1: &[f64], w2: &Mat, b2: &[f64], w3: &Mat, b3: &[f64]) -> Mat {
    let d = z[0].len();
    let h = w1[0].len();
    z.iter()
        .map(|row| {
            let mut hidden = vec![0.0; h];
            for j in 0..h {
                let mut a = b1[j];
                let mut b = b2[j];
                for i in 0..d {
                    a += row[i] * w1[i][j];
                    b += row[i] * w2[i][j];
                }
                hidden[j] = gelu_scalar(a) * b;
            }
            (0..d)
                .map(|o| b3[o] + (0..h).map(|j| hidden[j] * w3[j][o]).sum::<f64>())
                .collect()
        })
        .collect()
}

/// Published grid: (token, channel, params [K], MACs [M]), projection excluded.
pub const PUBLISHED: [(TokenMixerKind, ChannelMixerKind, f64, f64); 24] = [
    (TokenMixerKind::SelfAttention, ChannelMixerKind::Ffn, 5.09, 28.51),
    (TokenMixerKind::SelfAttention, ChannelMixerKind::Pool, 2.33, 27.18),
    (TokenMixerKind::SelfAttention, ChannelMixerKind::Identity, 2.33, 27.18),
    (TokenMixerKind::SelfAttention, ChannelMixerKind::Geglu, 4.45, 28.18),
    (TokenMixerKind::Pool, ChannelMixerKind::Ffn, 3.65, 1.6),
    (TokenMixerKind::Pool, ChannelMixerKind::Pool, 0.89, 0.27),
    (TokenMixerKind::Pool, ChannelMixerKind::Identity, 0.89, 0.27),
    (TokenMixerKind::Pool, ChannelMixerKind::Geglu, 3.01, 1.27),
    (TokenMixerKind::Identity, ChannelMixerKind::Ffn, 3.65, 1.6),
    (TokenMixerKind::Identity, ChannelMixerKind::Pool, 0.89, 0.27),
    (TokenMixerKind::Identity, ChannelMixerKind::Identity, 0.89, 0.27),
    (TokenMixerKind::Identity, ChannelMixerKind::Geglu, 3.01, 1.27),
    (TokenMixerKind::Isc, ChannelMixerKind::Ffn, 5.49, 2.56),
    (TokenMixerKind::Isc, ChannelMixerKind::Pool, 2.73, 1.23),
    (TokenMixerKind::Isc, ChannelMixerKind::Identity, 2.73, 1.23),
    (TokenMixerKind::Isc, ChannelMixerKind::Geglu, 4.85, 2.23),
    (TokenMixerKind::Dw, ChannelMixerKind::Ffn, 3.93, 1.75),
    (TokenMixerKind::Dw, ChannelMixerKind::Pool, 1.17, 0.42),
    (TokenMixerKind::Dw, ChannelMixerKind::Identity, 1.17, 0.42),
    (TokenMixerKind::Dw, ChannelMixerKind::Geglu, 3.29, 1.42),
    (TokenMixerKind::Msdw, ChannelMixerKind::Ffn, 4.13, 1.77),
    (TokenMixerKind::Msdw, ChannelMixerKind::Pool, 1.37, 0.44),
    (TokenMixerKind::Msdw, ChannelMixerKind::Identity, 1.37, 0.44),
    (TokenMixerKind::Msdw, ChannelMixerKind::Geglu, 3.49, 1.44),
];

pub const EPS: f64 = 1e-5;

/// Looks up tensors by full name.
pub struct Params<'a>(pub &'a ParameterStore);

impl Params<'_> {
    pub fn mat(&self, name: &str) -> Mat {
        to_mat(&self.0.get(name).unwrap_or_else(|| panic!("missing {name}")).value)
    }

    pub fn vec(&self, name: &str) -> Vec<f64> {
        self.0.get(name).unwrap_or_else(|| panic!("missing {name}")).value.row(0).to_vec()
    }
}

pub fn token_mixer(kind: TokenMixerKind, p: &Params, prefix: &str, z: &Mat, dw_kernel: usize) -> Mat {
    let n = |s: &str| format!("{prefix}.token_mixer.{s}");
    let d = z[0].len();
    match kind {
        TokenMixerKind::SelfAttention => attention(
            z,
            &p.mat(&n("wq.weight")),
            &p.vec(&n("wq.bias")),
            &p.mat(&n("wk.weight")),
            &p.vec(&n("wk.bias")),
            &p.mat(&n("wv.weight")),
            &p.vec(&n("wv.bias")),
            &p.mat(&n("wo.weight")),
            &p.vec(&n("wo.bias")),
        ),
        TokenMixerKind::Pool => avg_pool_time(z),
        TokenMixerKind::Identity => z.clone(),
        TokenMixerKind::Isc => {
            let h = gelu(&linear(z, &p.mat(&n("expand.weight")), None));
            let c = h[0].len();
            let h = gelu(&conv1d(&h, &p.mat(&n("depthwise.weight")), None, dw_kernel, 1, dw_kernel / 2, c));
            linear(&h, &p.mat(&n("project.weight")), None)
        }
        TokenMixerKind::Dw => conv1d(z, &p.mat(&n("depthwise.weight")), None, dw_kernel, 1, dw_kernel / 2, d),
        TokenMixerKind::Msdw => {
            let wide = conv1d(z, &p.mat(&n("wide.weight")), None, dw_kernel, 1, dw_kernel / 2, d);
            let point = conv1d(z, &p.mat(&n("point.weight")), None, 1, 1, 0, d);
            gelu(&add(&wide, &point))
        }
    }
}

pub fn channel_mixer(kind: ChannelMixerKind, p: &Params, prefix: &str, z: &Mat) -> Mat {
    let n = |s: &str| format!("{prefix}.channel_mixer.{s}");
    match kind {
        ChannelMixerKind::Ffn => {
            let h = gelu(&linear(z, &p.mat(&n("fc_in.weight")), Some(&p.vec(&n("fc_in.bias")))));
            linear(&h, &p.mat(&n("fc_out.weight")), Some(&p.vec(&n("fc_out.bias"))))
        }
        ChannelMixerKind::Geglu => geglu(
            z,
            &p.mat(&n("gate.weight")),
            &p.vec(&n("gate.bias")),
            &p.mat(&n("value.weight")),
            &p.vec(&n("value.bias")),
            &p.mat(&n("out.weight")),
            &p.vec(&n("out.bias")),
        ),
        ChannelMixerKind::Pool => avg_pool_channels(z),
        ChannelMixerKind::Identity => z.clone(),
    }
}

/// Full forward pass without the graph engine; returns logits.
pub fn reference_forward(model: &Model, x: &Mat) -> Vec<f64> {
    let cfg: &ModelConfig = model.config();
    let p = Params(model.store());
    let mut h = conv1d(
        x,
        &p.mat("projection.weight"),
        Some(&p.vec("projection.bias")),
        cfg.proj_kernel,
        1,
        cfg.proj_kernel / 2,
        1,
    );
    for (s, (&factor, &depth)) in cfg.stage_factors.iter().zip(&cfg.stage_depths).enumerate() {
        h = conv1d(
            &h,
            &p.mat(&format!("stage{s}.merge.weight")),
            Some(&p.vec(&format!("stage{s}.merge.bias"))),
            factor,
            factor,
            0,
            1,
        );
        for b in 0..depth {
            let prefix = format!("stage{s}.block{b}");
            let z = layer_norm(
                &h,
                &p.vec(&format!("{prefix}.token_norm.gamma")),
                &p.vec(&format!("{prefix}.token_norm.beta")),
                EPS,
            );
            h = add(&token_mixer(cfg.token_mixer, &p, &prefix, &z, cfg.dw_kernel), &h);
            let z = layer_norm(
                &h,
                &p.vec(&format!("{prefix}.channel_norm.gamma")),
                &p.vec(&format!("{prefix}.channel_norm.beta")),
                EPS,
            );
            let mixed = channel_mixer(cfg.channel_mixer, &p, &prefix, &z);
            h = if cfg.channel_residual { add(&mixed, &h) } else { mixed };
        }
    }
    let h = layer_norm(&h, &p.vec("final_norm.gamma"), &p.vec("final_norm.beta"), EPS);
    let l = h.len() as f64;
    let pooled: Vec<f64> = (0..h[0].len()).map(|c| h.iter().map(|r| r[c]).sum::<f64>() / l).collect();
    let hidden = gelu(&linear(&vec![pooled], &p.mat("head.hidden.weight"), Some(&p.vec("head.hidden.bias"))));
    linear(&hidden, &p.mat("head.out.weight"), Some(&p.vec("head.out.bias"))).remove(0)
}

/// Overwrites every tensor with uniform noise so that biases and norms are
/// exercised too.
pub fn randomize(model: &mut Model, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in model.store_mut().iter_mut() {
        for v in p.value.data_mut() {
            *v += rng.gen_range(-scale..scale);
        }
    }
}
