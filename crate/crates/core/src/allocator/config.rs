use serde::{Deserialize, Serialize};

use crate::attribution::{AttnSlices, PivotMode, DEFAULT_HALF_WIDTH, DEFAULT_MIN_MARKERS};
use crate::error::{Error, Result};
use crate::model::{Modality, Sublayer, UnitKind};
use crate::seed::DEFAULT_SEED;

/// Guard against `floor` landing one below an exact product, e.g. 0.7·10.
const FLOOR_GUARD: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Allocation {
    #[default]
    Global,
    Layerwise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scoring {
    #[default]
    Mucrasp,
    Taylor,
    Magnitude,
}

impl Scoring {
    pub fn as_str(self) -> &'static str {
        match self {
            Scoring::Mucrasp => "mucrasp",
            Scoring::Taylor => "taylor",
            Scoring::Magnitude => "magnitude",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PruningConfig {
    /// Target pruning ratio S in (0, 1).
    pub ratio: f64,
    /// Transition window half-width W.
    pub half_width: usize,
    pub min_markers: usize,
    pub gamma_base: f64,
    pub rho: f64,
    /// Replaces γ_dyn(S) when set.
    pub gamma_override: Option<f64>,
    /// α(S) = alpha_base + alpha_slope·S
    pub alpha_base: f64,
    pub alpha_slope: f64,
    /// β(S) = beta_base + beta_slope·S
    pub beta_base: f64,
    pub beta_slope: f64,
    pub n_early: usize,
    pub n_final: usize,
    pub early_boost_scale: f64,
    pub final_boost: f64,
    pub attention_boost: f64,
    pub vision_boost: f64,
    pub pivot_mode: PivotMode,
    pub cmds_enabled: bool,
    pub allocation: Allocation,
    pub scoring: Scoring,
    pub attn_slices: AttnSlices,
    pub seed: u64,
}

impl Default for PruningConfig {
    fn default() -> Self {
        PruningConfig {
            ratio: 0.3,
            half_width: DEFAULT_HALF_WIDTH,
            min_markers: DEFAULT_MIN_MARKERS,
            gamma_base: 0.4,
            rho: 2.0,
            gamma_override: None,
            alpha_base: 0.3,
            alpha_slope: 1.5,
            beta_base: 0.2,
            beta_slope: 1.0,
            n_early: 4,
            n_final: 2,
            early_boost_scale: 0.5,
            final_boost: 1.3,
            attention_boost: 1.8,
            vision_boost: 1.2,
            pivot_mode: PivotMode::Real,
            cmds_enabled: true,
            allocation: Allocation::Global,
            scoring: Scoring::Mucrasp,
            attn_slices: AttnSlices::QkvO,
            seed: DEFAULT_SEED,
        }
    }
}

pub fn dynamic_gamma(s: f64, gamma_base: f64, rho: f64) -> f64 {
    gamma_base * (1.0 - s).powf(rho)
}

/// Minimum GQA groups kept in a layer of `n`: max(2, ⌊n·max(0.35, 0.70(1−S))⌋), capped at n.
pub fn attn_min_keep(n: usize, s: f64) -> usize {
    let frac = f64::max(0.35, 0.70 * (1.0 - s));
    ((n as f64 * frac + FLOOR_GUARD).floor() as usize).max(2).min(n)
}

/// Minimum MLP neurons kept in a layer of `n`: max(1, ⌊n·max(0.05, 0.25(1−S))⌋), capped at n.
pub fn mlp_min_keep(n: usize, s: f64) -> usize {
    let frac = f64::max(0.05, 0.25 * (1.0 - s));
    ((n as f64 * frac + FLOOR_GUARD).floor() as usize).max(1).min(n)
}

pub fn min_keep(kind: UnitKind, n: usize, s: f64) -> usize {
    match kind {
        UnitKind::MlpNeuron => mlp_min_keep(n, s),
        UnitKind::GqaGroup => attn_min_keep(n, s),
    }
}

impl PruningConfig {
    pub fn with_ratio(ratio: f64) -> Self {
        PruningConfig {
            ratio,
            ..Default::default()
        }
    }

    // Negated comparisons so NaN is rejected too.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.ratio > 0.0 && self.ratio < 1.0) {
            return bad(format!("ratio must lie in (0, 1), got {}", self.ratio));
        }
        if !(0.0..=1.0).contains(&self.gamma_base) {
            return bad(format!("gamma_base must lie in [0, 1], got {}", self.gamma_base));
        }
        if let Some(g) = self.gamma_override {
            if !(0.0..=1.0).contains(&g) {
                return bad(format!("gamma override must lie in [0, 1], got {g}"));
            }
        }
        if !(self.rho >= 0.0) {
            return bad(format!("rho must be >= 0, got {}", self.rho));
        }
        if self.half_width == 0 {
            return bad("window half-width must be >= 1".into());
        }
        for (name, b) in [
            ("final_boost", self.final_boost),
            ("attention_boost", self.attention_boost),
            ("vision_boost", self.vision_boost),
        ] {
            if !(b >= 1.0) {
                return bad(format!("{name} must be >= 1, got {b}"));
            }
        }
        if !(self.early_boost_scale >= 0.0) {
            return bad("early_boost_scale must be >= 0".into());
        }
        if self.alpha(self.ratio) < 0.0 || self.beta(self.ratio) < 0.0 {
            return bad("alpha and beta must be >= 0 at the target ratio".into());
        }
        Ok(())
    }

    pub fn alpha(&self, s: f64) -> f64 {
        self.alpha_base + self.alpha_slope * s
    }

    pub fn beta(&self, s: f64) -> f64 {
        self.beta_base + self.beta_slope * s
    }

    /// γ used for fusion: zero without pivots or under Taylor scoring,
    /// otherwise the override or γ_dyn(S).
    pub fn effective_gamma(&self) -> f64 {
        if self.pivot_mode == PivotMode::None || self.scoring != Scoring::Mucrasp {
            return 0.0;
        }
        self.gamma_override
            .unwrap_or_else(|| dynamic_gamma(self.ratio, self.gamma_base, self.rho))
    }

    /// Ω(L): product of the early, final, attention and vision factors that apply.
    pub fn structural_prior(
        &self,
        layer: usize,
        sublayer: Sublayer,
        modality: Modality,
        n_layers: usize,
    ) -> f64 {
        let mut omega = 1.0;
        if layer < self.n_early {
            omega *= 1.0 + self.early_boost_scale * (1.0 - layer as f64 / self.n_early as f64);
        }
        if layer + self.n_final >= n_layers {
            omega *= self.final_boost;
        }
        if sublayer == Sublayer::Attention {
            omega *= self.attention_boost;
        }
        if modality == Modality::Vision {
            omega *= self.vision_boost;
        }
        omega
    }

    /// P = (1 + α·S̃ens)(1 + β·C̃MDS)·Ω; the CMDS factor is 1 when disabled.
    pub fn protection(&self, sens_norm: f64, cmds_norm: f64, omega: f64) -> f64 {
        let s = self.ratio;
        let cmds_term = if self.cmds_enabled {
            1.0 + self.beta(s) * cmds_norm
        } else {
            1.0
        };
        (1.0 + self.alpha(s) * sens_norm) * cmds_term * omega
    }
}
