use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{StructuralUnit, UnitKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TableKind {
    Global,
    Pivot,
    Fused,
    Magnitude,
}

/// One score per enumerated unit, in enumeration order.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceTable {
    pub kind: TableKind,
    pub sample_count: usize,
    pub normalized: bool,
    pub units: Vec<StructuralUnit>,
    pub scores: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ScoreEntry {
    kind: UnitKind,
    layer: usize,
    index: usize,
    value: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct TableJson {
    kind: TableKind,
    sample_count: usize,
    normalized: bool,
    scores: Vec<ScoreEntry>,
}

impl ImportanceTable {
    pub fn zeros(kind: TableKind, units: Vec<StructuralUnit>) -> Self {
        let scores = vec![0.0; units.len()];
        ImportanceTable {
            kind,
            sample_count: 0,
            normalized: false,
            units,
            scores,
        }
    }

    pub fn get(&self, unit: &StructuralUnit) -> Option<f64> {
        self.units
            .binary_search(unit)
            .ok()
            .map(|i| self.scores[i])
    }

    pub fn same_universe(&self, other: &ImportanceTable) -> Result<()> {
        if self.units != other.units {
            return Err(Error::UnitUniverseMismatch);
        }
        Ok(())
    }

    pub fn to_json(&self) -> serde_json::Value {
        let t = TableJson {
            kind: self.kind,
            sample_count: self.sample_count,
            normalized: self.normalized,
            scores: self
                .units
                .iter()
                .zip(&self.scores)
                .map(|(u, &value)| ScoreEntry {
                    kind: u.kind,
                    layer: u.layer,
                    index: u.index_in_layer,
                    value,
                })
                .collect(),
        };
        serde_json::to_value(t).expect("table serializes")
    }

    /// Rebuild from JSON; unit costs come from `units` (the model's
    /// enumeration), which must match the listed entries.
    pub fn from_json(value: serde_json::Value, units: &[StructuralUnit]) -> Result<Self> {
        let t: TableJson = serde_json::from_value(value)?;
        if t.scores.len() != units.len()
            || t.scores.iter().zip(units).any(|(e, u)| {
                e.kind != u.kind || e.layer != u.layer || e.index != u.index_in_layer
            })
        {
            return Err(Error::UnitUniverseMismatch);
        }
        Ok(ImportanceTable {
            kind: t.kind,
            sample_count: t.sample_count,
            normalized: t.normalized,
            units: units.to_vec(),
            scores: t.scores.iter().map(|e| e.value).collect(),
        })
    }
}

/// Divide each score by the mean score of its unit kind. A kind whose mean
/// is zero keeps all-zero scores.
pub fn normalize_importance(table: &ImportanceTable) -> ImportanceTable {
    let mut out = table.clone();
    for kind in [UnitKind::MlpNeuron, UnitKind::GqaGroup] {
        let idx: Vec<usize> = (0..table.units.len())
            .filter(|&i| table.units[i].kind == kind)
            .collect();
        if idx.is_empty() {
            continue;
        }
        let mean = idx.iter().map(|&i| table.scores[i]).sum::<f64>() / idx.len() as f64;
        for &i in &idx {
            out.scores[i] = if mean > 0.0 { table.scores[i] / mean } else { 0.0 };
        }
    }
    out.normalized = true;
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{enumerate_units, ModelConfig};

    fn table(mlp: &[f64], gqa: &[f64]) -> ImportanceTable {
        let cfg = ModelConfig::dense(1, 8, 2, 2, 4, mlp.len(), 4, 4, 1).unwrap();
        let units = enumerate_units(&cfg);
        assert_eq!(units.len(), mlp.len() + gqa.len());
        let mut t = ImportanceTable::zeros(TableKind::Global, units);
        t.scores = mlp.iter().chain(gqa).copied().collect();
        t
    }

    #[test]
    fn constant_scores_become_one() {
        let n = normalize_importance(&table(&[4.0, 4.0, 4.0], &[0.5, 0.5]));
        assert_eq!(n.scores, vec![1.0; 5]);
        assert!(n.normalized);
    }

    #[test]
    fn mean_division() {
        let n = normalize_importance(&table(&[1.0, 3.0], &[2.0, 6.0]));
        assert_eq!(n.scores, vec![0.5, 1.5, 0.5, 1.5]);
    }

    #[test]
    fn zero_kind_stays_zero() {
        let n = normalize_importance(&table(&[0.0, 0.0], &[1.0, 2.0]));
        assert_eq!(&n.scores[..2], &[0.0, 0.0]);
    }

    #[test]
    fn json_round_trip() {
        let t = table(&[1.25, 3.0], &[2.0, 6.5]);
        let back = ImportanceTable::from_json(t.to_json(), &t.units).unwrap();
        assert_eq!(back, t);
        let v = t.to_json();
        assert_eq!(v["scores"][2]["kind"], "GqaGroup");
        assert_eq!(v["kind"], "global");
    }
}
