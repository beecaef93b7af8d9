//! Miniature multimodal decoder: GQA attention, SwiGLU MLPs and RMS
//! normalization, with exact forward/backward passes and physical pruning.
//!
//! Weight matrices are stored `[out × in]`; a linear map is `y = x · Wᵀ` with
//! activations laid out `[seq × features]`.

mod backward;
mod checkpoint;
mod forward;
mod prune;
mod units;

pub use backward::{backward, loss_and_gradients, GradientTable};
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use forward::{
    forward, loss, masked_forward, masked_nll, token_log_probs, ForwardTrace, LossWeights,
    Modality, Sequence, Sublayer,
};
pub use prune::{apply_prune, KeepSet, UnitMask};
pub use units::{enumerate_units, StructuralUnit, UnitKind};

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const RMS_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Single,
    #[default]
    Double,
}

/// Widths of one decoder layer. Dense models have identical entries for
/// every layer; pruning makes them diverge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub d_mlp: usize,
    pub n_kv_groups: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    /// Query heads of the dense model.
    pub n_q_heads: usize,
    /// KV groups of the dense model.
    pub n_kv_groups: usize,
    pub head_dim: usize,
    /// SwiGLU hidden width of the dense model.
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub n_vision_tokens: usize,
    #[serde(default)]
    pub precision: Precision,
    /// Per-layer widths. Always `n_layers` long once validated.
    pub layers: Vec<LayerShape>,
}

impl ModelConfig {
    /// Dense config with uniform per-layer widths.
    #[allow(clippy::too_many_arguments)]
    pub fn dense(
        n_layers: usize,
        d_model: usize,
        n_q_heads: usize,
        n_kv_groups: usize,
        head_dim: usize,
        d_mlp: usize,
        vocab_size: usize,
        max_seq: usize,
        n_vision_tokens: usize,
    ) -> Result<Self> {
        let cfg = ModelConfig {
            n_layers,
            d_model,
            n_q_heads,
            n_kv_groups,
            head_dim,
            d_mlp,
            vocab_size,
            max_seq,
            n_vision_tokens,
            precision: Precision::Double,
            layers: vec![LayerShape { d_mlp, n_kv_groups }; n_layers],
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// The default desk-scale configuration used by the CLI and the
    /// acceptance suite.
    pub fn toy() -> Self {
        ModelConfig::dense(4, 64, 4, 2, 16, 128, 259, 256, 8).expect("toy config is valid")
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_q_heads", self.n_q_heads),
            ("n_kv_groups", self.n_kv_groups),
            ("head_dim", self.head_dim),
            ("d_mlp", self.d_mlp),
            ("vocab_size", self.vocab_size),
            ("max_seq", self.max_seq),
            ("n_vision_tokens", self.n_vision_tokens),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        if !self.n_q_heads.is_multiple_of(self.n_kv_groups) {
            return Err(Error::InvalidConfig(format!(
                "n_q_heads {} is not a multiple of n_kv_groups {}",
                self.n_q_heads, self.n_kv_groups
            )));
        }
        if self.n_q_heads * self.head_dim != self.d_model {
            return Err(Error::InvalidConfig(format!(
                "n_q_heads * head_dim = {} != d_model {}",
                self.n_q_heads * self.head_dim,
                self.d_model
            )));
        }
        if self.n_vision_tokens >= self.max_seq {
            return Err(Error::InvalidConfig(
                "n_vision_tokens must be < max_seq".into(),
            ));
        }
        if self.layers.len() != self.n_layers {
            return Err(Error::InvalidConfig(format!(
                "{} layer shapes for {} layers",
                self.layers.len(),
                self.n_layers
            )));
        }
        for (l, s) in self.layers.iter().enumerate() {
            if s.d_mlp == 0 || s.n_kv_groups == 0 {
                return Err(Error::InvalidConfig(format!("layer {l} has zero width")));
            }
            if s.d_mlp > self.d_mlp || s.n_kv_groups > self.n_kv_groups {
                return Err(Error::InvalidConfig(format!(
                    "layer {l} is wider than the dense model"
                )));
            }
        }
        Ok(())
    }

    pub fn heads_per_group(&self) -> usize {
        self.n_q_heads / self.n_kv_groups
    }

    pub fn layer_q_heads(&self, layer: usize) -> usize {
        self.layers[layer].n_kv_groups * self.heads_per_group()
    }

    pub fn layer_q_dim(&self, layer: usize) -> usize {
        self.layer_q_heads(layer) * self.head_dim
    }

    pub fn layer_kv_dim(&self, layer: usize) -> usize {
        self.layers[layer].n_kv_groups * self.head_dim
    }

    /// Embeddings, position table, norm scales and output head.
    pub fn non_prunable_params(&self) -> u64 {
        let d = self.d_model as u64;
        let v = self.vocab_size as u64;
        let n = self.n_layers as u64;
        v * d + self.max_seq as u64 * d + 2 * n * d + d + v * d
    }

    pub fn total_params(&self) -> u64 {
        let d = self.d_model as u64;
        let layers: u64 = (0..self.n_layers)
            .map(|l| {
                let q = self.layer_q_dim(l) as u64;
                let kv = self.layer_kv_dim(l) as u64;
                let m = self.layers[l].d_mlp as u64;
                2 * q * d + 2 * kv * d + 3 * m * d
            })
            .sum();
        layers + self.non_prunable_params()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    /// `[q_dim × d_model]`
    pub w_q: Array2<f64>,
    /// `[kv_dim × d_model]`
    pub w_k: Array2<f64>,
    /// `[kv_dim × d_model]`
    pub w_v: Array2<f64>,
    /// `[d_model × q_dim]`
    pub w_o: Array2<f64>,
    /// `[d_mlp × d_model]`
    pub w_gate: Array2<f64>,
    /// `[d_mlp × d_model]`
    pub w_up: Array2<f64>,
    /// `[d_model × d_mlp]`
    pub w_down: Array2<f64>,
    pub attn_norm: Array1<f64>,
    pub mlp_norm: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    /// `[vocab × d_model]`
    pub token_embedding: Array2<f64>,
    /// `[max_seq × d_model]`, added to every position.
    pub position_embedding: Array2<f64>,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Array1<f64>,
    /// `[vocab × d_model]`
    pub output_head: Array2<f64>,
}

impl ModelWeights {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let layers = (0..cfg.n_layers)
            .map(|l| {
                let q = cfg.layer_q_dim(l);
                let kv = cfg.layer_kv_dim(l);
                let m = cfg.layers[l].d_mlp;
                LayerWeights {
                    w_q: Array2::zeros((q, d)),
                    w_k: Array2::zeros((kv, d)),
                    w_v: Array2::zeros((kv, d)),
                    w_o: Array2::zeros((d, q)),
                    w_gate: Array2::zeros((m, d)),
                    w_up: Array2::zeros((m, d)),
                    w_down: Array2::zeros((d, m)),
                    attn_norm: Array1::zeros(d),
                    mlp_norm: Array1::zeros(d),
                }
            })
            .collect();
        ModelWeights {
            token_embedding: Array2::zeros((cfg.vocab_size, d)),
            position_embedding: Array2::zeros((cfg.max_seq, d)),
            layers,
            final_norm: Array1::zeros(d),
            output_head: Array2::zeros((cfg.vocab_size, d)),
        }
    }

    /// Gaussian init with std 0.02 (embeddings) and `1/sqrt(fan_in)` scaled
    /// projections; norm scales start at 1.
    pub fn random<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let mut w = ModelWeights::zeros(cfg);
        let emb = Normal::new(0.0, 0.02).unwrap();
        let fill = |a: &mut Array2<f64>, dist: &Normal<f64>, rng: &mut R| {
            a.iter_mut().for_each(|x| *x = dist.sample(rng));
        };
        fill(&mut w.token_embedding, &emb, rng);
        fill(&mut w.position_embedding, &emb, rng);
        let in_d = Normal::new(0.0, 1.0 / (cfg.d_model as f64).sqrt()).unwrap();
        let in_m = Normal::new(0.0, 1.0 / (cfg.d_mlp as f64).sqrt()).unwrap();
        let out_scale = Normal::new(0.0, 0.5 / (cfg.d_model as f64).sqrt()).unwrap();
        for layer in &mut w.layers {
            fill(&mut layer.w_q, &in_d, rng);
            fill(&mut layer.w_k, &in_d, rng);
            fill(&mut layer.w_v, &in_d, rng);
            fill(&mut layer.w_o, &out_scale, rng);
            fill(&mut layer.w_gate, &in_d, rng);
            fill(&mut layer.w_up, &in_d, rng);
            fill(&mut layer.w_down, &in_m, rng);
            layer.attn_norm.fill(1.0);
            layer.mlp_norm.fill(1.0);
        }
        w.final_norm.fill(1.0);
        fill(&mut w.output_head, &in_d, rng);
        w
    }

    /// Every tensor as `(name, shape, data)` in canonical manifest order.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out: Vec<(String, Vec<usize>, &[f64])> = Vec::new();
        push2(&mut out, "token_embedding".into(), &self.token_embedding);
        push2(&mut out, "position_embedding".into(), &self.position_embedding);
        for (l, layer) in self.layers.iter().enumerate() {
            push2(&mut out, format!("layers.{l}.w_q"), &layer.w_q);
            push2(&mut out, format!("layers.{l}.w_k"), &layer.w_k);
            push2(&mut out, format!("layers.{l}.w_v"), &layer.w_v);
            push2(&mut out, format!("layers.{l}.w_o"), &layer.w_o);
            push2(&mut out, format!("layers.{l}.w_gate"), &layer.w_gate);
            push2(&mut out, format!("layers.{l}.w_up"), &layer.w_up);
            push2(&mut out, format!("layers.{l}.w_down"), &layer.w_down);
            push1(&mut out, format!("layers.{l}.attn_norm"), &layer.attn_norm);
            push1(&mut out, format!("layers.{l}.mlp_norm"), &layer.mlp_norm);
        }
        push1(&mut out, "final_norm".into(), &self.final_norm);
        push2(&mut out, "output_head".into(), &self.output_head);
        out
    }

    /// Mutable flat views in the same order as [`ModelWeights::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = Vec::new();
        out.push(("token_embedding".into(), slice_mut(&mut self.token_embedding)));
        out.push((
            "position_embedding".into(),
            slice_mut(&mut self.position_embedding),
        ));
        for (l, layer) in self.layers.iter_mut().enumerate() {
            out.push((format!("layers.{l}.w_q"), slice_mut(&mut layer.w_q)));
            out.push((format!("layers.{l}.w_k"), slice_mut(&mut layer.w_k)));
            out.push((format!("layers.{l}.w_v"), slice_mut(&mut layer.w_v)));
            out.push((format!("layers.{l}.w_o"), slice_mut(&mut layer.w_o)));
            out.push((format!("layers.{l}.w_gate"), slice_mut(&mut layer.w_gate)));
            out.push((format!("layers.{l}.w_up"), slice_mut(&mut layer.w_up)));
            out.push((format!("layers.{l}.w_down"), slice_mut(&mut layer.w_down)));
            out.push((
                format!("layers.{l}.attn_norm"),
                layer.attn_norm.as_slice_mut().expect("contiguous"),
            ));
            out.push((
                format!("layers.{l}.mlp_norm"),
                layer.mlp_norm.as_slice_mut().expect("contiguous"),
            ));
        }
        out.push((
            "final_norm".into(),
            self.final_norm.as_slice_mut().expect("contiguous"),
        ));
        out.push(("output_head".into(), slice_mut(&mut self.output_head)));
        out
    }

    pub fn param_count(&self) -> u64 {
        self.tensors().iter().map(|(_, _, d)| d.len() as u64).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, _, d)| d.iter().all(|x| x.is_finite()))
    }

    /// Round every entry to the nearest `f32`.
    pub fn round_to_single(&mut self) {
        for (_, data) in self.tensors_mut() {
            data.iter_mut().for_each(|x| *x = *x as f32 as f64);
        }
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &ModelWeights, scale: f64) {
        let src = other.tensors();
        for ((_, dst), (_, _, s)) in self.tensors_mut().into_iter().zip(src) {
            dst.iter_mut().zip(s).for_each(|(d, s)| *d += scale * s);
        }
    }
}

fn push2<'a>(out: &mut Vec<(String, Vec<usize>, &'a [f64])>, name: String, a: &'a Array2<f64>) {
    out.push((name, a.shape().to_vec(), a.as_slice().expect("contiguous")));
}

fn push1<'a>(out: &mut Vec<(String, Vec<usize>, &'a [f64])>, name: String, a: &'a Array1<f64>) {
    out.push((name, a.shape().to_vec(), a.as_slice().expect("contiguous")));
}

fn slice_mut(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("contiguous")
}

/// Config plus weights; the unit every pipeline stage passes around.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub weights: ModelWeights,
}

impl Model {
    pub fn new(config: ModelConfig, weights: ModelWeights) -> Result<Self> {
        config.validate()?;
        let expected = ModelWeights::zeros(&config);
        for ((name, s_exp, _), (_, s_got, _)) in expected.tensors().iter().zip(weights.tensors()) {
            if *s_exp != s_got {
                return Err(Error::ShapeMismatch(format!(
                    "{name}: expected {s_exp:?}, got {s_got:?}"
                )));
            }
        }
        if expected.layers.len() != weights.layers.len() {
            return Err(Error::ShapeMismatch("layer count".into()));
        }
        Ok(Model { config, weights })
    }

    pub fn random(config: ModelConfig, seed: u64) -> Self {
        let mut rng = crate::seed::rng(seed);
        let weights = ModelWeights::random(&config, &mut rng);
        let mut model = Model { config, weights };
        if model.config.precision == Precision::Single {
            model.weights.round_to_single();
        }
        model
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_config_is_valid() {
        let cfg = ModelConfig::toy();
        assert_eq!(cfg.heads_per_group(), 2);
        assert_eq!(cfg.layer_kv_dim(0), 32);
    }

    #[test]
    fn rejects_uneven_gqa() {
        let err = ModelConfig::dense(1, 48, 3, 2, 16, 8, 16, 8, 1).unwrap_err();
        assert!(matches!(err, Error::InvalidConfig(_)));
    }

    #[test]
    fn rejects_head_dim_mismatch() {
        assert!(ModelConfig::dense(1, 64, 4, 2, 8, 8, 16, 8, 1).is_err());
    }

    #[test]
    fn rejects_vision_prefix_filling_context() {
        assert!(ModelConfig::dense(1, 16, 2, 1, 8, 8, 16, 4, 4).is_err());
    }

    #[test]
    fn param_count_matches_config() {
        let cfg = ModelConfig::toy();
        let w = ModelWeights::zeros(&cfg);
        assert_eq!(w.param_count(), cfg.total_params());
    }
}
