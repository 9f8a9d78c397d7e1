//! Closed-form parameter and multiply-accumulate accounting.
//!
//! Counting conventions:
//! - fully connected layers carry a bias, mixer convolutions do not, merge
//!   and projection convolutions do;
//! - a layer norm over `d` channels has `2d` parameters;
//! - one MAC is one multiply-accumulate of a matmul, convolution or attention
//!   product. Biases, norms, activations, softmax and pooling cost nothing.

use serde::Serialize;

use crate::mixers::{ChannelMixerKind, TokenMixerKind, FFN_EXPANSION, GEGLU_EXPANSION, ISC_EXPANSION};
use crate::model::{apply_preset, HierarchyPreset, ModelConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Cost {
    pub params: u64,
    pub macs: u64,
}

impl std::ops::Add for Cost {
    type Output = Cost;

    fn add(self, rhs: Cost) -> Cost {
        Cost {
            params: self.params + rhs.params,
            macs: self.macs + rhs.macs,
        }
    }
}

impl std::iter::Sum for Cost {
    fn sum<I: Iterator<Item = Cost>>(iter: I) -> Cost {
        iter.fold(Cost::default(), |a, b| a + b)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CostEntry {
    pub component: String,
    pub params: u64,
    pub macs: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CostReport {
    pub token_mixer: TokenMixerKind,
    pub channel_mixer: ChannelMixerKind,
    pub entries: Vec<CostEntry>,
    pub total_excl_projection: Cost,
    pub total_incl_projection: Cost,
    pub warnings: Vec<String>,
}

impl CostReport {
    pub fn entry(&self, component: &str) -> Option<&CostEntry> {
        self.entries.iter().find(|e| e.component == component)
    }

    pub fn projection(&self) -> Cost {
        self.entry("projection")
            .map(|e| Cost {
                params: e.params,
                macs: e.macs,
            })
            .unwrap_or_default()
    }

    /// Human-readable breakdown.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{} + {}\n{:<28} {:>12} {:>14}\n",
            self.token_mixer, self.channel_mixer, "component", "params", "MACs"
        );
        for e in &self.entries {
            out.push_str(&format!("{:<28} {:>12} {:>14}\n", e.component, e.params, e.macs));
        }
        let t = self.total_excl_projection;
        out.push_str(&format!(
            "total excl. projection: {}K params, {}M MACs\n",
            kilo(t.params),
            mega(t.macs)
        ));
        let t = self.total_incl_projection;
        out.push_str(&format!(
            "total incl. projection: {}K params, {}M MACs\n",
            kilo(t.params),
            mega(t.macs)
        ));
        for w in &self.warnings {
            out.push_str(&format!("warning: {w}\n"));
        }
        out
    }
}

/// Fixed-point decimal with two places, rounding half away from zero.
fn scaled2(count: u64, unit: u64) -> String {
    let hundredths = (count as u128 * 100 + unit as u128 / 2) / unit as u128;
    format!("{}.{:02}", hundredths / 100, hundredths % 100)
}

/// Count in thousands, two decimals.
pub fn kilo(count: u64) -> String {
    scaled2(count, 1_000)
}

/// Count in millions, two decimals.
pub fn mega(count: u64) -> String {
    scaled2(count, 1_000_000)
}

/// Two-decimal value as a float, for tolerance checks.
pub fn rounded(count: u64, unit: u64) -> f64 {
    scaled2(count, unit).parse().unwrap()
}

/// Per-block cost of a token mixer at `len` frames.
pub fn token_mixer_cost(kind: TokenMixerKind, d: u64, kernel: u64, len: u64) -> Cost {
    match kind {
        TokenMixerKind::SelfAttention => Cost {
            params: 4 * (d * d + d),
            macs: 4 * d * d * len + 2 * d * len * len,
        },
        TokenMixerKind::Pool | TokenMixerKind::Identity => Cost::default(),
        TokenMixerKind::Isc => {
            let h = ISC_EXPANSION as u64 * d;
            let per_frame = d * h + h * kernel + h * d;
            Cost {
                params: per_frame,
                macs: per_frame * len,
            }
        }
        TokenMixerKind::Dw => Cost {
            params: d * kernel,
            macs: d * kernel * len,
        },
        TokenMixerKind::Msdw => Cost {
            params: d * kernel + d,
            macs: (d * kernel + d) * len,
        },
    }
}

/// Per-block cost of a channel mixer at `len` frames.
pub fn channel_mixer_cost(kind: ChannelMixerKind, d: u64, len: u64) -> Cost {
    match kind {
        ChannelMixerKind::Ffn => {
            let h = FFN_EXPANSION as u64 * d;
            Cost {
                params: (d * h + h) + (h * d + d),
                macs: 2 * d * h * len,
            }
        }
        ChannelMixerKind::Geglu => {
            let h = GEGLU_EXPANSION as u64 * d;
            Cost {
                params: 2 * (d * h + h) + (h * d + d),
                macs: 3 * d * h * len,
            }
        }
        ChannelMixerKind::Pool | ChannelMixerKind::Identity => Cost::default(),
    }
}

/// Full breakdown for one configuration. MACs are for one `seq_len` input.
pub fn analyze(cfg: &ModelConfig) -> CostReport {
    let d = cfg.d_model as u64;
    let k = cfg.dw_kernel as u64;
    let mut entries = Vec::new();
    let mut push = |component: String, c: Cost| {
        entries.push(CostEntry {
            component,
            params: c.params,
            macs: c.macs,
        })
    };

    let input_dim = cfg.input_dim as u64;
    let pk = cfg.proj_kernel as u64;
    let projection = Cost {
        params: d * input_dim * pk + d,
        macs: cfg.seq_len as u64 * input_dim * d * pk,
    };
    push("projection".into(), projection);

    let mut len = cfg.seq_len as u64;
    for (s, (&factor, &depth)) in cfg.stage_factors.iter().zip(&cfg.stage_depths).enumerate() {
        let f = factor as u64;
        len /= f.max(1);
        let depth = depth as u64;
        push(
            format!("stage{s}.merge"),
            Cost {
                params: d * d * f + d,
                macs: len * d * d * f,
            },
        );
        push(
            format!("stage{s}.norms"),
            Cost {
                params: depth * 4 * d,
                macs: 0,
            },
        );
        let tm = token_mixer_cost(cfg.token_mixer, d, k, len);
        push(
            format!("stage{s}.token_mixer"),
            Cost {
                params: depth * tm.params,
                macs: depth * tm.macs,
            },
        );
        let cm = channel_mixer_cost(cfg.channel_mixer, d, len);
        push(
            format!("stage{s}.channel_mixer"),
            Cost {
                params: depth * cm.params,
                macs: depth * cm.macs,
            },
        );
    }
    push(
        "final_norm".into(),
        Cost {
            params: 2 * d,
            macs: 0,
        },
    );
    let hh = cfg.head_hidden as u64;
    let nc = cfg.num_classes as u64;
    push(
        "head".into(),
        Cost {
            params: (d * hh + hh) + (hh * nc + nc),
            macs: d * hh + hh * nc,
        },
    );

    let total_incl: Cost = entries
        .iter()
        .map(|e| Cost {
            params: e.params,
            macs: e.macs,
        })
        .sum();
    let total_excl = Cost {
        params: total_incl.params - projection.params,
        macs: total_incl.macs - projection.macs,
    };
    let warnings = reference_warnings(cfg, total_excl);
    CostReport {
        token_mixer: cfg.token_mixer,
        channel_mixer: cfg.channel_mixer,
        entries,
        total_excl_projection: total_excl,
        total_incl_projection: total_incl,
        warnings,
    }
}

/// Parameter view of [`analyze`].
pub fn count_params(cfg: &ModelConfig) -> CostReport {
    analyze(cfg)
}

/// MAC view of [`analyze`].
pub fn count_macs(cfg: &ModelConfig) -> CostReport {
    analyze(cfg)
}

/// Published cost figures for the 6x4 mixer grid under preset H3_1 at
/// `d_model = 8`, `seq_len = 3200`: (token, channel, params [K], MACs [M]),
/// projection excluded.
pub const REFERENCE_COSTS: [(TokenMixerKind, ChannelMixerKind, f64, f64); 24] = {
    use ChannelMixerKind as C;
    use TokenMixerKind as T;
    [
        (T::SelfAttention, C::Ffn, 5.09, 28.51),
        (T::SelfAttention, C::Pool, 2.33, 27.18),
        (T::SelfAttention, C::Identity, 2.33, 27.18),
        (T::SelfAttention, C::Geglu, 4.45, 28.18),
        (T::Pool, C::Ffn, 3.65, 1.60),
        (T::Pool, C::Pool, 0.89, 0.27),
        (T::Pool, C::Identity, 0.89, 0.27),
        (T::Pool, C::Geglu, 3.01, 1.27),
        (T::Identity, C::Ffn, 3.65, 1.60),
        (T::Identity, C::Pool, 0.89, 0.27),
        (T::Identity, C::Identity, 0.89, 0.27),
        (T::Identity, C::Geglu, 3.01, 1.27),
        (T::Isc, C::Ffn, 5.49, 2.56),
        (T::Isc, C::Pool, 2.73, 1.23),
        (T::Isc, C::Identity, 2.73, 1.23),
        (T::Isc, C::Geglu, 4.85, 2.23),
        (T::Dw, C::Ffn, 3.93, 1.75),
        (T::Dw, C::Pool, 1.17, 0.42),
        (T::Dw, C::Identity, 1.17, 0.42),
        (T::Dw, C::Geglu, 3.29, 1.42),
        (T::Msdw, C::Ffn, 4.13, 1.77),
        (T::Msdw, C::Pool, 1.37, 0.44),
        (T::Msdw, C::Identity, 1.37, 0.44),
        (T::Msdw, C::Geglu, 3.49, 1.44),
    ]
};

pub fn reference_cost(token: TokenMixerKind, channel: ChannelMixerKind) -> Option<(f64, f64)> {
    REFERENCE_COSTS
        .iter()
        .find(|(t, c, _, _)| *t == token && *c == channel)
        .map(|&(_, _, p, m)| (p, m))
}

/// The geometry the reference figures were measured at.
pub fn reference_config() -> ModelConfig {
    apply_preset(HierarchyPreset::H3_1, &ModelConfig::default()).expect("default config is valid")
}

fn is_reference_geometry(cfg: &ModelConfig) -> bool {
    let r = reference_config();
    cfg.input_dim == r.input_dim
        && cfg.seq_len == r.seq_len
        && cfg.d_model == r.d_model
        && cfg.proj_kernel == r.proj_kernel
        && cfg.stage_factors == r.stage_factors
        && cfg.stage_depths == r.stage_depths
        && cfg.head_hidden == r.head_hidden
        && cfg.num_classes == r.num_classes
        && cfg.dw_kernel == r.dw_kernel
}

fn reference_warnings(cfg: &ModelConfig, total: Cost) -> Vec<String> {
    if !is_reference_geometry(cfg) {
        return Vec::new();
    }
    let Some((ref_params, _)) = reference_cost(cfg.token_mixer, cfg.channel_mixer) else {
        return Vec::new();
    };
    let ours = rounded(total.params, 1_000);
    if (ours - ref_params).abs() < 0.005 {
        return Vec::new();
    }
    let mut msg = format!(
        "{} + {}: closed-form parameter count {}K differs from the reference {:.2}K by {:+.2}K",
        cfg.token_mixer,
        cfg.channel_mixer,
        kilo(total.params),
        ref_params,
        ours - ref_params
    );
    if cfg.token_mixer == TokenMixerKind::Msdw {
        msg.push_str(
            " (the two bias-free depthwise branches give 64 parameters per block; \
             the reference implies 96, a residue no bias/norm convention reproduces \
             together with the MAC column)",
        );
    }
    vec![msg]
}

/// One line of the mixer grid.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CostRow {
    pub token_mixer: TokenMixerKind,
    pub channel_mixer: ChannelMixerKind,
    pub params: u64,
    pub macs: u64,
    pub params_incl_projection: u64,
    pub macs_incl_projection: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CostTable {
    pub rows: Vec<CostRow>,
    pub warnings: Vec<String>,
}

/// Every (token, channel) combination of the reference grid.
pub fn all_combos() -> Vec<(TokenMixerKind, ChannelMixerKind)> {
    TokenMixerKind::ALL
        .iter()
        .flat_map(|&t| ChannelMixerKind::ALL.iter().map(move |&c| (t, c)))
        .collect()
}

/// Costs for a list of mixer combinations on top of `base`.
pub fn emit_cost_table(base: &ModelConfig, combos: &[(TokenMixerKind, ChannelMixerKind)]) -> CostTable {
    let mut table = CostTable::default();
    for &(t, c) in combos {
        let report = analyze(&base.clone().with_mixers(t, c));
        table.rows.push(CostRow {
            token_mixer: t,
            channel_mixer: c,
            params: report.total_excl_projection.params,
            macs: report.total_excl_projection.macs,
            params_incl_projection: report.total_incl_projection.params,
            macs_incl_projection: report.total_incl_projection.macs,
        });
        table.warnings.extend(report.warnings);
    }
    table
}

impl CostTable {
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{:<16} {:<14} {:>10} {:>9} {:>16} {:>15}\n",
            "Token mixer", "Channel mixer", "Params [K]", "MACs [M]", "Params+proj [K]", "MACs+proj [M]"
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:<16} {:<14} {:>10} {:>9} {:>16} {:>15}\n",
                r.token_mixer.label(),
                r.channel_mixer.label(),
                kilo(r.params),
                mega(r.macs),
                kilo(r.params_incl_projection),
                mega(r.macs_incl_projection)
            ));
        }
        for w in &self.warnings {
            out.push_str(&format!("warning: {w}\n"));
        }
        out
    }

    /// JSON array of row objects.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.rows).expect("rows serialize")
    }
}
