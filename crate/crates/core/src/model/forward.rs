use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, UnitMask, RMS_EPS};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Vision,
    Text,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sublayer {
    Attention,
    Mlp,
}

/// One model input: a fixed-length vision prefix followed by text tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub vision: Vec<Vec<f64>>,
    pub tokens: Vec<u32>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.vision.len() + self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Sequence position whose logits predict text token `i`.
    pub fn predicting_row(&self, i: usize) -> usize {
        self.vision.len() + i - 1
    }
}

/// Per-text-token loss weights. `mean` gives the token-averaged NLL over a
/// mask; `sum` gives the plain sum used for the pivot-restricted loss.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights(pub Vec<f64>);

impl LossWeights {
    pub fn mean(mask: &[bool]) -> Self {
        let n = mask.iter().filter(|&&m| m).count();
        let w = if n == 0 { 0.0 } else { 1.0 / n as f64 };
        LossWeights(mask.iter().map(|&m| if m { w } else { 0.0 }).collect())
    }

    pub fn sum(mask: &[bool]) -> Self {
        Self::scaled_sum(mask, 1.0)
    }

    pub fn scaled_sum(mask: &[bool], scale: f64) -> Self {
        LossWeights(mask.iter().map(|&m| if m { scale } else { 0.0 }).collect())
    }

    pub fn is_empty(&self) -> bool {
        self.0.iter().all(|&w| w == 0.0)
    }
}

/// Sublayer outputs and logits of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// Attention output after `W_O`, before the residual add, per layer.
    pub attn_out: Vec<Array2<f64>>,
    /// MLP output after `W_down`, before the residual add, per layer.
    pub mlp_out: Vec<Array2<f64>>,
    pub modality: Vec<Modality>,
    /// `[seq × vocab]`
    pub logits: Array2<f64>,
}

impl ForwardTrace {
    pub fn sublayer(&self, layer: usize, sub: Sublayer) -> &Array2<f64> {
        match sub {
            Sublayer::Attention => &self.attn_out[layer],
            Sublayer::Mlp => &self.mlp_out[layer],
        }
    }
}

pub(super) struct LayerCache {
    pub x_in: Array2<f64>,
    pub r_attn: Array1<f64>,
    pub a: Array2<f64>,
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    pub probs: Vec<Array2<f64>>,
    pub o_cat: Array2<f64>,
    pub x_mid: Array2<f64>,
    pub r_mlp: Array1<f64>,
    pub m: Array2<f64>,
    pub gate: Array2<f64>,
    pub up: Array2<f64>,
    pub hid: Array2<f64>,
}

pub(super) struct Cache {
    pub layers: Vec<LayerCache>,
    pub x_last: Array2<f64>,
    pub r_final: Array1<f64>,
    pub xf: Array2<f64>,
}

pub(super) fn check_input(cfg: &ModelConfig, seq: &Sequence) -> Result<()> {
    if seq.len() > cfg.max_seq {
        return Err(Error::SequenceTooLong {
            len: seq.len(),
            max_seq: cfg.max_seq,
        });
    }
    if seq.vision.len() != cfg.n_vision_tokens {
        return Err(Error::VisionCount {
            expected: cfg.n_vision_tokens,
            got: seq.vision.len(),
        });
    }
    for v in &seq.vision {
        if v.len() != cfg.d_model {
            return Err(Error::EmbeddingDim {
                expected: cfg.d_model,
                got: v.len(),
            });
        }
    }
    if let Some(&id) = seq.tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::TokenOutOfRange {
            id,
            vocab: cfg.vocab_size,
        });
    }
    Ok(())
}

pub(super) fn rms_norm(x: &Array2<f64>, scale: &Array1<f64>) -> (Array2<f64>, Array1<f64>) {
    let d = x.ncols() as f64;
    let r = x.map_axis(Axis(1), |row| 1.0 / (row.dot(&row) / d + RMS_EPS).sqrt());
    let mut y = x.clone();
    Zip::from(y.rows_mut()).and(&r).for_each(|mut row, &ri| {
        Zip::from(&mut row).and(scale).for_each(|v, &g| *v *= ri * g);
    });
    (y, r)
}

pub(super) fn silu(z: f64) -> f64 {
    z / (1.0 + (-z).exp())
}

pub(super) fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Row-wise causal softmax of `scores` in place.
fn causal_softmax(scores: &mut Array2<f64>) {
    for (i, mut row) in scores.rows_mut().into_iter().enumerate() {
        let max = row
            .slice(s![..=i])
            .fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut total = 0.0;
        for (j, v) in row.iter_mut().enumerate() {
            if j <= i {
                *v = (*v - max).exp();
                total += *v;
            } else {
                *v = 0.0;
            }
        }
        row.slice_mut(s![..=i]).mapv_inplace(|v| v / total);
    }
}

pub(super) fn run(
    model: &Model,
    seq: &Sequence,
    mask: Option<&UnitMask>,
    keep_cache: bool,
) -> Result<(ForwardTrace, Option<Cache>)> {
    let cfg = &model.config;
    let w = &model.weights;
    check_input(cfg, seq)?;
    let t_len = seq.len();
    let nv = seq.vision.len();
    let d = cfg.d_model;
    let hd = cfg.head_dim;
    let hpg = cfg.heads_per_group();
    let scale = 1.0 / (hd as f64).sqrt();

    let mut x = Array2::<f64>::zeros((t_len, d));
    for (t, mut row) in x.rows_mut().into_iter().enumerate() {
        if t < nv {
            row.assign(&ArrayView1::from(&seq.vision[t][..]));
        } else {
            row.assign(&w.token_embedding.row(seq.tokens[t - nv] as usize));
        }
        row += &w.position_embedding.row(t);
    }

    let mut attn_out = Vec::with_capacity(cfg.n_layers);
    let mut mlp_out = Vec::with_capacity(cfg.n_layers);
    let mut caches = Vec::new();

    for (l, lw) in w.layers.iter().enumerate() {
        let n_heads = cfg.layer_q_heads(l);
        let (a, r_attn) = rms_norm(&x, &lw.attn_norm);
        let q = a.dot(&lw.w_q.t());
        let k = a.dot(&lw.w_k.t());
        let v = a.dot(&lw.w_v.t());
        let mut o_cat = Array2::<f64>::zeros((t_len, n_heads * hd));
        let mut probs = Vec::with_capacity(if keep_cache { n_heads } else { 0 });
        for h in 0..n_heads {
            let g = h / hpg;
            let head_scale = mask.map_or(1.0, |m| m.heads[l][h]);
            let qh = q.slice(s![.., h * hd..(h + 1) * hd]);
            let kh = k.slice(s![.., g * hd..(g + 1) * hd]);
            let vh = v.slice(s![.., g * hd..(g + 1) * hd]);
            let mut p = qh.dot(&kh.t());
            p.mapv_inplace(|s| s * scale);
            causal_softmax(&mut p);
            let mut oh = p.dot(&vh);
            if head_scale != 1.0 {
                oh.mapv_inplace(|o| o * head_scale);
            }
            o_cat.slice_mut(s![.., h * hd..(h + 1) * hd]).assign(&oh);
            if keep_cache {
                probs.push(p);
            }
        }
        let attn = o_cat.dot(&lw.w_o.t());
        let x_mid = &x + &attn;

        let (m, r_mlp) = rms_norm(&x_mid, &lw.mlp_norm);
        let gate = m.dot(&lw.w_gate.t());
        let up = m.dot(&lw.w_up.t());
        let mut hid = Array2::<f64>::zeros(gate.raw_dim());
        Zip::from(&mut hid)
            .and(&gate)
            .and(&up)
            .for_each(|h, &g, &u| *h = silu(g) * u);
        if let Some(m) = mask {
            hid *= &m.neurons[l].view().insert_axis(Axis(0));
        }
        let mlp = hid.dot(&lw.w_down.t());
        let x_next = &x_mid + &mlp;

        if keep_cache {
            caches.push(LayerCache {
                x_in: x,
                r_attn,
                a,
                q,
                k,
                v,
                probs,
                o_cat,
                x_mid,
                r_mlp,
                m,
                gate,
                up,
                hid,
            });
        }
        attn_out.push(attn);
        mlp_out.push(mlp);
        x = x_next;
    }

    let (xf, r_final) = rms_norm(&x, &w.final_norm);
    let logits = xf.dot(&w.output_head.t());
    let modality = (0..t_len)
        .map(|t| if t < nv { Modality::Vision } else { Modality::Text })
        .collect();
    let trace = ForwardTrace {
        attn_out,
        mlp_out,
        modality,
        logits,
    };
    let cache = keep_cache.then(|| Cache {
        layers: caches,
        x_last: x,
        r_final,
        xf,
    });
    Ok((trace, cache))
}

/// Full forward pass over `vision ⧺ tokens` with causal masking.
pub fn forward(model: &Model, seq: &Sequence) -> Result<ForwardTrace> {
    run(model, seq, None, false).map(|(t, _)| t)
}

/// Forward pass with pruned units' contributions zeroed in place rather
/// than sliced out.
pub fn masked_forward(model: &Model, keep: &super::KeepSet, seq: &Sequence) -> Result<ForwardTrace> {
    let mask = UnitMask::from_keep(&model.config, keep)?;
    run(model, seq, Some(&mask), false).map(|(t, _)| t)
}

/// Row-wise log-softmax.
pub fn token_log_probs(logits: ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Weighted negative log-likelihood of the text tokens.
pub fn masked_nll(logits: &Array2<f64>, seq: &Sequence, weights: &LossWeights) -> Result<f64> {
    if weights.0.len() != seq.tokens.len() {
        return Err(Error::InvalidArgument(format!(
            "{} loss weights for {} tokens",
            weights.0.len(),
            seq.tokens.len()
        )));
    }
    if weights.is_empty() {
        return Err(Error::EmptyMask);
    }
    let mut total = 0.0;
    for (i, (&w, &tok)) in weights.0.iter().zip(&seq.tokens).enumerate() {
        if w == 0.0 {
            continue;
        }
        if seq.vision.len() + i == 0 {
            return Err(Error::InvalidArgument(
                "the first sequence position has no predecessor".into(),
            ));
        }
        let row = logits.row(seq.predicting_row(i));
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        total += w * (lse - row[tok as usize]);
    }
    Ok(total)
}

/// Loss of a recorded trace: the weighted NLL of the sequence's tokens.
pub fn loss(trace: &ForwardTrace, seq: &Sequence, weights: &LossWeights) -> Result<f64> {
    masked_nll(&trace.logits, seq, weights)
}
