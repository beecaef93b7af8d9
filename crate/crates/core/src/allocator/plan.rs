use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::config::{min_keep, Allocation, PruningConfig, Scoring};
use super::pack::{efficiency, enforce_safety, greedy_pack, groups, layerwise_select};
use crate::attribution::{
    corpus_pivot_masks, global_attribution, magnitude_scores, normalize_importance,
    pivot_attribution, ImportanceTable, PivotMode, PivotSummary, TableKind,
};
use crate::calibration::Corpus;
use crate::error::{Error, Result};
use crate::model::{enumerate_units, KeepSet, Modality, Model, StructuralUnit, Sublayer, UnitKind};
use crate::profiling::{collect_stats, normalize_profiles, profile_keys, LayerProfile};
use crate::seed::sub_seed;

pub const PLAN_SCHEMA_VERSION: u32 = 1;

/// (1−γ)·Ā_global + γ·Ā_pivot per unit.
pub fn fuse(global: &ImportanceTable, pivot: &ImportanceTable, gamma: f64) -> Result<ImportanceTable> {
    global.same_universe(pivot)?;
    let mut out = ImportanceTable::zeros(TableKind::Fused, global.units.clone());
    out.scores = global
        .scores
        .iter()
        .zip(&pivot.scores)
        .map(|(g, p)| (1.0 - gamma) * g + gamma * p)
        .collect();
    out.sample_count = global.sample_count;
    out.normalized = global.normalized && pivot.normalized;
    Ok(out)
}

fn sublayer_of(kind: UnitKind) -> Sublayer {
    match kind {
        UnitKind::MlpNeuron => Sublayer::Mlp,
        UnitKind::GqaGroup => Sublayer::Attention,
    }
}

/// Fill Ω and P on normalized profiles.
pub fn protect_profiles(profiles: &[LayerProfile], cfg: &PruningConfig, n_layers: usize) -> Vec<LayerProfile> {
    profiles
        .iter()
        .map(|p| {
            let omega = cfg.structural_prior(p.layer, p.sublayer, Modality::Text, n_layers);
            LayerProfile {
                omega,
                protection: cfg.protection(p.sens_norm, p.cmds_norm, omega),
                ..p.clone()
            }
        })
        .collect()
}

/// v(u) = A(u)·P(L_u); units without a profile get P = 1.
pub fn unit_values(table: &ImportanceTable, profiles: &[LayerProfile]) -> Vec<f64> {
    let p: BTreeMap<(usize, Sublayer), f64> = profiles
        .iter()
        .map(|p| ((p.layer, p.sublayer), p.protection))
        .collect();
    table
        .units
        .iter()
        .zip(&table.scores)
        .map(|(u, &a)| a * p.get(&(u.layer, sublayer_of(u.kind))).copied().unwrap_or(1.0))
        .collect()
}

/// Per-unit values and everything that went into them.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitScores {
    pub table: ImportanceTable,
    pub values: Vec<f64>,
    pub gamma: f64,
    pub profiles: Vec<LayerProfile>,
    pub pivots: Option<PivotSummary>,
}

fn profiles_for(model: &Model, corpus: &Corpus, cfg: &PruningConfig) -> Result<Vec<LayerProfile>> {
    let stats = collect_stats(model, corpus)?;
    let raw = profile_keys(model.config.n_layers)
        .into_iter()
        .zip(&stats)
        .map(|((l, sub), st)| {
            let cmds = if cfg.cmds_enabled { st.cmds()? } else { 0.0 };
            Ok(LayerProfile::raw(l, sub, st.sensitivity(), cmds))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(protect_profiles(&normalize_profiles(&raw), cfg, model.config.n_layers))
}

/// Attribution, pivot windows, profiling, fusion and protection.
pub fn score_units(model: &Model, corpus: &Corpus, cfg: &PruningConfig) -> Result<UnitScores> {
    cfg.validate()?;
    match cfg.scoring {
        Scoring::Magnitude => {
            let table = normalize_importance(&magnitude_scores(model));
            let values = table.scores.clone();
            return Ok(UnitScores {
                table,
                values,
                gamma: 0.0,
                profiles: Vec::new(),
                pivots: None,
            });
        }
        Scoring::Taylor => {
            let table = normalize_importance(&global_attribution(model, corpus, cfg.attn_slices)?);
            let values = table.scores.clone();
            return Ok(UnitScores {
                table,
                values,
                gamma: 0.0,
                profiles: Vec::new(),
                pivots: None,
            });
        }
        Scoring::Mucrasp => {}
    }
    let global = normalize_importance(&global_attribution(model, corpus, cfg.attn_slices)?);
    let gamma = cfg.effective_gamma();
    let (fused, pivots) = if cfg.pivot_mode == PivotMode::None {
        let mut t = global.clone();
        t.kind = TableKind::Fused;
        (t, None)
    } else {
        let masks = corpus_pivot_masks(
            corpus,
            cfg.pivot_mode,
            cfg.half_width,
            cfg.min_markers,
            cfg.seed,
        )?;
        let lens: Vec<usize> = corpus.samples.iter().map(|s| s.response_len()).collect();
        let summary = PivotSummary::of(&masks, &lens);
        let pivot = normalize_importance(&pivot_attribution(model, corpus, &masks, cfg.attn_slices)?);
        (fuse(&global, &pivot, gamma)?, Some(summary))
    };
    let profiles = profiles_for(model, corpus, cfg)?;
    let values = unit_values(&fused, &profiles);
    Ok(UnitScores {
        table: fused,
        values,
        gamma,
        profiles,
        pivots,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct UnitRef {
    pub kind: UnitKind,
    pub layer: usize,
    pub index: usize,
}

impl From<&StructuralUnit> for UnitRef {
    fn from(u: &StructuralUnit) -> Self {
        UnitRef {
            kind: u.kind,
            layer: u.layer,
            index: u.index_in_layer,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanUnit {
    pub kind: UnitKind,
    pub layer: usize,
    pub index: usize,
    pub kept: bool,
    pub value: f64,
    pub efficiency: f64,
    pub cost: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruningPlan {
    pub schema_version: u32,
    pub method: String,
    pub config: PruningConfig,
    pub gamma: f64,
    /// ⌊(1−S)·prunable_params⌋, the enforced budget.
    pub budget: u64,
    pub prunable_params: u64,
    /// ⌊(1−S)·total_params⌋, recorded for comparison only.
    pub budget_total_basis: u64,
    pub total_params: u64,
    pub kept_params: u64,
    pub greedy_fallback: bool,
    pub units: Vec<PlanUnit>,
    pub forced_in: Vec<UnitRef>,
    pub evicted: Vec<UnitRef>,
    pub profiles: Vec<LayerProfile>,
    pub pivots: Option<PivotSummary>,
    pub sub_seeds: BTreeMap<String, u64>,
}

impl PruningPlan {
    pub fn keep_set(&self) -> KeepSet {
        self.units
            .iter()
            .filter(|u| u.kept)
            .map(|u| StructuralUnit {
                layer: u.layer,
                kind: u.kind,
                index_in_layer: u.index,
                cost: u.cost,
            })
            .collect()
    }

    /// Same keep-set, values, accounting and audit trail; ignores the
    /// config snapshot and diagnostics.
    pub fn same_selection(&self, other: &PruningPlan) -> bool {
        self.units == other.units
            && self.budget == other.budget
            && self.kept_params == other.kept_params
            && self.forced_in == other.forced_in
            && self.evicted == other.evicted
            && self.greedy_fallback == other.greedy_fallback
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("plan serializes")
    }

    pub fn from_json(value: serde_json::Value) -> Result<Self> {
        let found = value.get("schema_version").and_then(|v| v.as_u64()).unwrap_or(0);
        if found != PLAN_SCHEMA_VERSION as u64 {
            return Err(Error::SchemaVersion {
                found,
                expected: PLAN_SCHEMA_VERSION as u64,
            });
        }
        Ok(serde_json::from_value(value)?)
    }

    /// Kept fraction per `(layer, kind)`.
    pub fn retention(&self) -> Result<Vec<Retention>> {
        let mut counts: BTreeMap<(usize, UnitKind), (usize, usize)> = BTreeMap::new();
        for u in &self.units {
            let e = counts.entry((u.layer, u.kind)).or_default();
            e.1 += 1;
            if u.kept {
                e.0 += 1;
            }
        }
        counts
            .into_iter()
            .map(|((layer, kind), (kept, total))| {
                if kept == 0 {
                    return Err(Error::EmptyLayer { layer, kind });
                }
                Ok(Retention {
                    layer,
                    kind,
                    kept,
                    total,
                    fraction: kept as f64 / total as f64,
                    min_keep: min_keep(kind, total, self.config.ratio),
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Retention {
    pub layer: usize,
    pub kind: UnitKind,
    pub kept: usize,
    pub total: usize,
    pub fraction: f64,
    pub min_keep: usize,
}

/// Allocation over precomputed values: budget, packing (or layerwise
/// selection) and minimum-retention enforcement.
pub fn allocate(
    model: &Model,
    units: &[StructuralUnit],
    scores: UnitScores,
    cfg: &PruningConfig,
) -> Result<PruningPlan> {
    cfg.validate()?;
    let values = &scores.values;
    if values.len() != units.len() || values.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::NonFinite("unit values".into()));
    }
    let prunable: u64 = units.iter().map(|u| u.cost).sum();
    let budget = ((1.0 - cfg.ratio) * prunable as f64).floor() as u64;
    let total_params = model.config.total_params();
    let (kept, fallback, forced, evicted) = match cfg.allocation {
        Allocation::Global => {
            let packed = greedy_pack(units, values, budget);
            let safe = enforce_safety(units, values, packed.kept, cfg.ratio, budget)?;
            (safe.kept, packed.fallback_used, safe.forced_in, safe.evicted)
        }
        Allocation::Layerwise => (
            layerwise_select(units, values, cfg.ratio, budget)?,
            false,
            Vec::new(),
            Vec::new(),
        ),
    };
    debug_assert!(groups(units).iter().all(|((_, k), idx)| {
        idx.iter().filter(|&&i| kept[i]).count() >= min_keep(*k, idx.len(), cfg.ratio)
    }));
    let kept_params = units.iter().zip(&kept).filter(|(_, &k)| k).map(|(u, _)| u.cost).sum();
    let plan_units = units
        .iter()
        .zip(values)
        .zip(&kept)
        .map(|((u, &value), &kept)| PlanUnit {
            kind: u.kind,
            layer: u.layer,
            index: u.index_in_layer,
            kept,
            value,
            efficiency: efficiency(value, u.cost),
            cost: u.cost,
        })
        .collect();
    let mut sub_seeds = BTreeMap::new();
    if cfg.pivot_mode == PivotMode::Random && cfg.scoring == Scoring::Mucrasp {
        sub_seeds.insert("random-pivots".into(), sub_seed(cfg.seed, "random-pivots"));
    }
    Ok(PruningPlan {
        schema_version: PLAN_SCHEMA_VERSION,
        method: cfg.scoring.as_str().into(),
        config: cfg.clone(),
        gamma: scores.gamma,
        budget,
        prunable_params: prunable,
        budget_total_basis: ((1.0 - cfg.ratio) * total_params as f64).floor() as u64,
        total_params,
        kept_params,
        greedy_fallback: fallback,
        units: plan_units,
        forced_in: forced.iter().map(|&i| UnitRef::from(&units[i])).collect(),
        evicted: evicted.iter().map(|&i| UnitRef::from(&units[i])).collect(),
        profiles: scores.profiles,
        pivots: scores.pivots,
        sub_seeds,
    })
}

/// Score every unit and allocate the budget.
pub fn build_plan(model: &Model, corpus: &Corpus, cfg: &PruningConfig) -> Result<PruningPlan> {
    let units = enumerate_units(&model.config);
    let scores = score_units(model, corpus, cfg)?;
    allocate(model, &units, scores, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::generate_synthetic_corpus;
    use crate::model::ModelConfig;

    fn setup() -> (Model, Corpus) {
        let cfg = ModelConfig::dense(2, 16, 4, 2, 4, 16, 259, 256, 8).unwrap();
        let corpus = generate_synthetic_corpus(5, 4, &cfg).unwrap();
        (Model::random(cfg, 8), corpus)
    }

    fn table(scores: &[f64]) -> ImportanceTable {
        let units = enumerate_units(&ModelConfig::dense(1, 8, 2, 1, 4, scores.len() - 1, 4, 4, 1).unwrap());
        let mut t = ImportanceTable::zeros(TableKind::Global, units);
        t.scores = scores.to_vec();
        t.normalized = true;
        t
    }

    #[test]
    fn fusion_endpoints_and_midpoint() {
        let g = table(&[2.0, 1.0, 0.5]);
        let p = table(&[4.0, 3.0, 0.0]);
        assert_eq!(fuse(&g, &p, 0.0).unwrap().scores, g.scores);
        assert_eq!(fuse(&g, &p, 1.0).unwrap().scores, p.scores);
        assert_eq!(fuse(&g, &p, 0.5).unwrap().scores[0], 3.0);
        assert_eq!(fuse(&g, &p, 0.5).unwrap().kind, TableKind::Fused);
        assert!(matches!(fuse(&g, &table(&[1.0, 1.0]), 0.5), Err(Error::UnitUniverseMismatch)));
    }

    #[test]
    fn small_ratio_keeps_everything() {
        let (m, c) = setup();
        let units = enumerate_units(&m.config);
        let plan = build_plan(&m, &c, &PruningConfig::with_ratio(1e-17)).unwrap();
        assert_eq!(plan.keep_set().len(), units.len());
        assert_eq!(plan.kept_params, plan.prunable_params);
    }

    #[test]
    fn deterministic() {
        let (m, c) = setup();
        let cfg = PruningConfig::with_ratio(0.4);
        assert_eq!(build_plan(&m, &c, &cfg).unwrap(), build_plan(&m, &c, &cfg).unwrap());
    }

    #[test]
    fn budget_and_retention_hold_across_modes() {
        let (m, c) = setup();
        for scoring in [Scoring::Mucrasp, Scoring::Taylor, Scoring::Magnitude] {
            for allocation in [Allocation::Global, Allocation::Layerwise] {
                for pivot_mode in [PivotMode::Real, PivotMode::Random, PivotMode::None] {
                    let cfg = PruningConfig {
                        ratio: 0.4,
                        scoring,
                        allocation,
                        pivot_mode,
                        ..Default::default()
                    };
                    let plan = build_plan(&m, &c, &cfg).unwrap();
                    assert!(plan.kept_params <= plan.budget);
                    for r in plan.retention().unwrap() {
                        assert!(r.kept >= r.min_keep, "{scoring:?} {allocation:?} {r:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn scaling_values_keeps_the_plan() {
        let (m, c) = setup();
        let cfg = PruningConfig::with_ratio(0.4);
        let units = enumerate_units(&m.config);
        let scores = score_units(&m, &c, &cfg).unwrap();
        let mut scaled = scores.clone();
        scaled.values.iter_mut().for_each(|v| *v *= 7.5);
        let a = allocate(&m, &units, scores, &cfg).unwrap();
        let b = allocate(&m, &units, scaled, &cfg).unwrap();
        assert_eq!(a.keep_set(), b.keep_set());
    }

    #[test]
    fn pivot_none_matches_zero_gamma() {
        let (m, c) = setup();
        let none = PruningConfig {
            ratio: 0.4,
            pivot_mode: PivotMode::None,
            ..Default::default()
        };
        let zero = PruningConfig {
            ratio: 0.4,
            gamma_override: Some(0.0),
            ..Default::default()
        };
        let a = build_plan(&m, &c, &none).unwrap();
        let b = build_plan(&m, &c, &zero).unwrap();
        assert!(a.same_selection(&b));
    }

    #[test]
    fn no_cmds_matches_zero_beta() {
        let (m, c) = setup();
        let off = PruningConfig {
            ratio: 0.4,
            cmds_enabled: false,
            ..Default::default()
        };
        let zero = PruningConfig {
            ratio: 0.4,
            beta_base: 0.0,
            beta_slope: 0.0,
            ..Default::default()
        };
        assert!(build_plan(&m, &c, &off).unwrap().same_selection(&build_plan(&m, &c, &zero).unwrap()));
    }

    #[test]
    fn json_round_trip_and_version_check() {
        let (m, c) = setup();
        let plan = build_plan(&m, &c, &PruningConfig::with_ratio(0.4)).unwrap();
        let v = plan.to_json();
        assert_eq!(PruningPlan::from_json(v.clone()).unwrap(), plan);
        let mut old = v;
        old["schema_version"] = 0.into();
        assert!(PruningPlan::from_json(old).is_err());
    }

    #[test]
    fn infeasible_ratio_is_reported() {
        let (m, c) = setup();
        // Both GQA groups per layer are always kept, so a high ratio cannot fit.
        let err = build_plan(&m, &c, &PruningConfig::with_ratio(0.9)).unwrap_err();
        assert!(matches!(err, Error::Infeasible { ref binding, .. } if !binding.is_empty()));
    }
}
