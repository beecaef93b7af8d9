use std::collections::BTreeSet;

use ndarray::{Array1, Array2, Axis};

use super::{LayerShape, LayerWeights, Model, ModelConfig, ModelWeights, StructuralUnit, UnitKind};
use crate::error::{Error, Result};

/// Units that survive pruning.
pub type KeepSet = BTreeSet<StructuralUnit>;

/// 0/1 multipliers equivalent to a keep-set: one per MLP neuron and one per
/// query head (every head of a dropped group is zeroed).
#[derive(Debug, Clone, PartialEq)]
pub struct UnitMask {
    pub neurons: Vec<Array1<f64>>,
    pub heads: Vec<Vec<f64>>,
}

struct LayerKeep {
    neurons: Vec<usize>,
    groups: Vec<usize>,
}

fn split_keep(cfg: &ModelConfig, keep: &KeepSet) -> Result<Vec<LayerKeep>> {
    let mut per_layer: Vec<LayerKeep> = (0..cfg.n_layers)
        .map(|_| LayerKeep {
            neurons: Vec::new(),
            groups: Vec::new(),
        })
        .collect();
    for u in keep {
        let shape = cfg
            .layers
            .get(u.layer)
            .ok_or_else(|| Error::UnitOutOfRange(u.to_string()))?;
        let (limit, list) = match u.kind {
            UnitKind::MlpNeuron => (shape.d_mlp, &mut per_layer[u.layer].neurons),
            UnitKind::GqaGroup => (shape.n_kv_groups, &mut per_layer[u.layer].groups),
        };
        if u.index_in_layer >= limit {
            return Err(Error::UnitOutOfRange(u.to_string()));
        }
        list.push(u.index_in_layer);
    }
    for (layer, lk) in per_layer.iter().enumerate() {
        if lk.neurons.is_empty() {
            return Err(Error::EmptyLayer {
                layer,
                kind: UnitKind::MlpNeuron,
            });
        }
        if lk.groups.is_empty() {
            return Err(Error::EmptyLayer {
                layer,
                kind: UnitKind::GqaGroup,
            });
        }
    }
    // BTreeSet iteration already yields ascending indices per (layer, kind).
    Ok(per_layer)
}

impl UnitMask {
    pub fn from_keep(cfg: &ModelConfig, keep: &KeepSet) -> Result<Self> {
        let per_layer = split_keep(cfg, keep)?;
        let hpg = cfg.heads_per_group();
        let mut neurons = Vec::with_capacity(cfg.n_layers);
        let mut heads = Vec::with_capacity(cfg.n_layers);
        for (l, lk) in per_layer.iter().enumerate() {
            let mut n = Array1::zeros(cfg.layers[l].d_mlp);
            for &i in &lk.neurons {
                n[i] = 1.0;
            }
            let mut h = vec![0.0; cfg.layer_q_heads(l)];
            for &g in &lk.groups {
                h[g * hpg..(g + 1) * hpg].fill(1.0);
            }
            neurons.push(n);
            heads.push(h);
        }
        Ok(UnitMask { neurons, heads })
    }
}

fn rows(a: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    a.select(Axis(0), idx)
}

fn cols(a: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    a.select(Axis(1), idx).as_standard_layout().into_owned()
}

/// Physically remove every unit not in `keep`, returning a smaller dense
/// model with per-layer widths.
pub fn apply_prune(model: &Model, keep: &KeepSet) -> Result<Model> {
    let cfg = &model.config;
    let per_layer = split_keep(cfg, keep)?;
    let hd = cfg.head_dim;
    let hpg = cfg.heads_per_group();
    let mut new_cfg = cfg.clone();
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for (l, (lw, lk)) in model.weights.layers.iter().zip(&per_layer).enumerate() {
        let kv_idx: Vec<usize> = lk
            .groups
            .iter()
            .flat_map(|&g| g * hd..(g + 1) * hd)
            .collect();
        let q_idx: Vec<usize> = lk
            .groups
            .iter()
            .flat_map(|&g| g * hpg * hd..(g + 1) * hpg * hd)
            .collect();
        layers.push(LayerWeights {
            w_q: rows(&lw.w_q, &q_idx),
            w_k: rows(&lw.w_k, &kv_idx),
            w_v: rows(&lw.w_v, &kv_idx),
            w_o: cols(&lw.w_o, &q_idx),
            w_gate: rows(&lw.w_gate, &lk.neurons),
            w_up: rows(&lw.w_up, &lk.neurons),
            w_down: cols(&lw.w_down, &lk.neurons),
            attn_norm: lw.attn_norm.clone(),
            mlp_norm: lw.mlp_norm.clone(),
        });
        new_cfg.layers[l] = LayerShape {
            d_mlp: lk.neurons.len(),
            n_kv_groups: lk.groups.len(),
        };
    }
    let weights = ModelWeights {
        token_embedding: model.weights.token_embedding.clone(),
        position_embedding: model.weights.position_embedding.clone(),
        layers,
        final_norm: model.weights.final_norm.clone(),
        output_head: model.weights.output_head.clone(),
    };
    Model::new(new_cfg, weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{enumerate_units, forward, masked_forward, Sequence};

    fn model() -> Model {
        Model::random(ModelConfig::dense(2, 16, 4, 2, 4, 6, 20, 16, 2).unwrap(), 9)
    }

    fn seq() -> Sequence {
        Sequence {
            vision: vec![vec![0.3; 16], vec![-0.2; 16]],
            tokens: vec![1, 5, 7, 2],
        }
    }

    fn all(m: &Model) -> KeepSet {
        enumerate_units(&m.config).into_iter().collect()
    }

    #[test]
    fn keep_all_is_identity() {
        let m = model();
        let p = apply_prune(&m, &all(&m)).unwrap();
        assert_eq!(p, m);
        assert_eq!(
            masked_forward(&m, &all(&m), &seq()).unwrap(),
            forward(&m, &seq()).unwrap()
        );
    }

    #[test]
    fn dropping_a_neuron_removes_three_rows_worth() {
        let m = model();
        let mut keep = all(&m);
        let victim = *keep.iter().find(|u| u.kind == UnitKind::MlpNeuron).unwrap();
        keep.remove(&victim);
        let p = apply_prune(&m, &keep).unwrap();
        assert_eq!(
            m.weights.param_count() - p.weights.param_count(),
            3 * m.config.d_model as u64
        );
        assert_eq!(p.weights.param_count(), p.config.total_params());
        assert_ne!(
            masked_forward(&m, &keep, &seq()).unwrap().logits,
            forward(&m, &seq()).unwrap().logits
        );
    }

    #[test]
    fn slicing_matches_masking() {
        let m = model();
        let mut keep = all(&m);
        keep.retain(|u| !(u.layer == 0 && u.kind == UnitKind::GqaGroup && u.index_in_layer == 1));
        keep.retain(|u| !(u.kind == UnitKind::MlpNeuron && u.index_in_layer % 2 == 0));
        let pruned = apply_prune(&m, &keep).unwrap();
        let a = forward(&pruned, &seq()).unwrap().logits;
        let b = masked_forward(&m, &keep, &seq()).unwrap().logits;
        let diff = (&a - &b).mapv(f64::abs).fold(0.0f64, |x, &y| x.max(y));
        assert!(diff < 1e-12, "{diff}");
    }

    #[test]
    fn rejects_emptied_layer() {
        let m = model();
        let mut keep = all(&m);
        keep.retain(|u| !(u.layer == 1 && u.kind == UnitKind::GqaGroup));
        assert!(matches!(
            apply_prune(&m, &keep),
            Err(Error::EmptyLayer { layer: 1, kind: UnitKind::GqaGroup })
        ));
    }

    #[test]
    fn rejects_out_of_range_units() {
        let m = model();
        let mut keep = all(&m);
        keep.insert(StructuralUnit {
            layer: 0,
            kind: UnitKind::MlpNeuron,
            index_in_layer: 99,
            cost: 48,
        });
        assert!(matches!(apply_prune(&m, &keep), Err(Error::UnitOutOfRange(_))));
    }
}
