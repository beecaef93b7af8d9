use std::fmt;

use serde::{Deserialize, Serialize};

use super::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum UnitKind {
    /// One SwiGLU hidden channel: a gate row, an up row and a down column.
    MlpNeuron,
    /// One KV head together with the query heads that share it.
    GqaGroup,
}

impl UnitKind {
    pub fn as_str(self) -> &'static str {
        match self {
            UnitKind::MlpNeuron => "mlp",
            UnitKind::GqaGroup => "gqa",
        }
    }
}

/// A prunable unit. Field order gives the canonical `(layer, kind, index)`
/// ordering used for enumeration and tie-breaking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StructuralUnit {
    pub layer: usize,
    pub kind: UnitKind,
    pub index_in_layer: usize,
    /// Exact number of parameters removed with the unit.
    pub cost: u64,
}

impl fmt::Display for StructuralUnit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}/{}/{}", self.layer, self.kind.as_str(), self.index_in_layer)
    }
}

pub fn mlp_neuron_cost(cfg: &ModelConfig) -> u64 {
    3 * cfg.d_model as u64
}

pub fn gqa_group_cost(cfg: &ModelConfig) -> u64 {
    let d = cfg.d_model as u64;
    let hd = cfg.head_dim as u64;
    2 * hd * d + 2 * cfg.heads_per_group() as u64 * hd * d
}

/// All units of the model ordered by `(layer, kind, index)`.
pub fn enumerate_units(cfg: &ModelConfig) -> Vec<StructuralUnit> {
    let mlp_cost = mlp_neuron_cost(cfg);
    let gqa_cost = gqa_group_cost(cfg);
    let mut units = Vec::new();
    for (layer, shape) in cfg.layers.iter().enumerate() {
        units.extend((0..shape.d_mlp).map(|i| StructuralUnit {
            layer,
            kind: UnitKind::MlpNeuron,
            index_in_layer: i,
            cost: mlp_cost,
        }));
        units.extend((0..shape.n_kv_groups).map(|i| StructuralUnit {
            layer,
            kind: UnitKind::GqaGroup,
            index_in_layer: i,
            cost: gqa_cost,
        }));
    }
    units
}
