use std::collections::BTreeMap;

use super::config::min_keep;
use crate::error::{BindingLayer, Error, Result};
use crate::model::{StructuralUnit, UnitKind};

/// E_u = v(u) / c(u)
pub fn efficiency(value: f64, cost: u64) -> f64 {
    value / cost as f64
}

/// Indices sorted by descending efficiency, ties by ascending position in
/// `units` (which is canonical `(layer, kind, index)` order).
pub fn efficiency_order(units: &[StructuralUnit], values: &[f64]) -> Vec<usize> {
    let eff: Vec<f64> = units.iter().zip(values).map(|(u, &v)| efficiency(v, u.cost)).collect();
    let mut order: Vec<usize> = (0..units.len()).collect();
    order.sort_by(|&a, &b| eff[b].total_cmp(&eff[a]).then(a.cmp(&b)));
    order
}

#[derive(Debug, Clone, PartialEq)]
pub struct Packing {
    pub kept: Vec<bool>,
    /// The single best unit beat the greedy fill and replaced it.
    pub fallback_used: bool,
}

impl Packing {
    pub fn cost(&self, units: &[StructuralUnit]) -> u64 {
        units.iter().zip(&self.kept).filter(|(_, &k)| k).map(|(u, _)| u.cost).sum()
    }

    pub fn value(&self, values: &[f64]) -> f64 {
        values.iter().zip(&self.kept).filter(|(_, &k)| k).map(|(v, _)| v).sum()
    }
}

/// Greedy efficiency packing with skip-and-continue, compared against the
/// best single unit that fits on its own.
pub fn greedy_pack(units: &[StructuralUnit], values: &[f64], budget: u64) -> Packing {
    let mut kept = vec![false; units.len()];
    let mut used = 0u64;
    let mut total = 0.0;
    for i in efficiency_order(units, values) {
        if used + units[i].cost <= budget {
            kept[i] = true;
            used += units[i].cost;
            total += values[i];
        }
    }
    let best_single = (0..units.len())
        .filter(|&i| units[i].cost <= budget)
        .max_by(|&a, &b| values[a].total_cmp(&values[b]).then(b.cmp(&a)));
    if let Some(i) = best_single {
        if values[i] > total {
            let mut only = vec![false; units.len()];
            only[i] = true;
            return Packing {
                kept: only,
                fallback_used: true,
            };
        }
    }
    Packing {
        kept,
        fallback_used: false,
    }
}

/// Unit indices grouped by `(layer, kind)`, each group in canonical order.
pub(crate) fn groups(units: &[StructuralUnit]) -> BTreeMap<(usize, UnitKind), Vec<usize>> {
    let mut g: BTreeMap<(usize, UnitKind), Vec<usize>> = BTreeMap::new();
    for (i, u) in units.iter().enumerate() {
        g.entry((u.layer, u.kind)).or_default().push(i);
    }
    g
}

/// Error out before packing when the minimum retention alone exceeds the budget.
pub fn check_feasible(units: &[StructuralUnit], ratio: f64, budget: u64) -> Result<()> {
    let mut binding = Vec::new();
    let mut required = 0u64;
    for ((layer, kind), idx) in groups(units) {
        let eta = min_keep(kind, idx.len(), ratio);
        let mut costs: Vec<u64> = idx.iter().map(|&i| units[i].cost).collect();
        costs.sort_unstable();
        let min_cost: u64 = costs[..eta].iter().sum();
        required += min_cost;
        binding.push(BindingLayer {
            layer,
            kind,
            min_keep: eta,
            min_cost,
        });
    }
    if required > budget {
        binding.sort_by(|a, b| b.min_cost.cmp(&a.min_cost).then(a.layer.cmp(&b.layer)));
        return Err(Error::Infeasible {
            required,
            budget,
            binding,
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SafetyOutcome {
    pub kept: Vec<bool>,
    pub forced_in: Vec<usize>,
    pub evicted: Vec<usize>,
}

/// Raise every `(layer, kind)` to its minimum retention with the most
/// efficient excluded units, then evict the least efficient kept units whose
/// group stays above its minimum until the budget holds.
pub fn enforce_safety(
    units: &[StructuralUnit],
    values: &[f64],
    mut kept: Vec<bool>,
    ratio: f64,
    budget: u64,
) -> Result<SafetyOutcome> {
    check_feasible(units, ratio, budget)?;
    let order = efficiency_order(units, values);
    let mut rank = vec![0usize; units.len()];
    for (r, &i) in order.iter().enumerate() {
        rank[i] = r;
    }
    let groups = groups(units);
    let mut forced_in = Vec::new();
    let mut count: BTreeMap<(usize, UnitKind), usize> = BTreeMap::new();
    let mut eta: BTreeMap<(usize, UnitKind), usize> = BTreeMap::new();
    for (&key, idx) in &groups {
        let need = min_keep(key.1, idx.len(), ratio);
        let mut have = idx.iter().filter(|&&i| kept[i]).count();
        let mut excluded: Vec<usize> = idx.iter().copied().filter(|&i| !kept[i]).collect();
        excluded.sort_by_key(|&i| rank[i]);
        for i in excluded {
            if have >= need {
                break;
            }
            kept[i] = true;
            forced_in.push(i);
            have += 1;
        }
        count.insert(key, have);
        eta.insert(key, need);
    }
    let mut cost: u64 = units.iter().zip(&kept).filter(|(_, &k)| k).map(|(u, _)| u.cost).sum();
    let mut evicted = Vec::new();
    // Lowest efficiency first; among equals the last in canonical order goes first.
    for &i in order.iter().rev() {
        if cost <= budget {
            break;
        }
        let key = (units[i].layer, units[i].kind);
        if kept[i] && count[&key] > eta[&key] {
            kept[i] = false;
            *count.get_mut(&key).expect("group") -= 1;
            cost -= units[i].cost;
            evicted.push(i);
        }
    }
    if cost > budget {
        return Err(Error::Infeasible {
            required: cost,
            budget,
            binding: Vec::new(),
        });
    }
    forced_in.sort_unstable();
    Ok(SafetyOutcome {
        kept,
        forced_in,
        evicted,
    })
}

/// Keep the same fraction f of every `(layer, kind)` (top efficiency first),
/// never below minimum retention. f starts at 1−S and steps down through the
/// groups' count breakpoints until the plan fits the budget.
pub fn layerwise_select(
    units: &[StructuralUnit],
    values: &[f64],
    ratio: f64,
    budget: u64,
) -> Result<Vec<bool>> {
    check_feasible(units, ratio, budget)?;
    let order = efficiency_order(units, values);
    let mut rank = vec![0usize; units.len()];
    for (r, &i) in order.iter().enumerate() {
        rank[i] = r;
    }
    let groups: Vec<((usize, UnitKind), Vec<usize>)> = groups(units)
        .into_iter()
        .map(|(k, mut idx)| {
            idx.sort_by_key(|&i| rank[i]);
            (k, idx)
        })
        .collect();
    let keep_target = 1.0 - ratio;
    let mut fractions: Vec<f64> = groups
        .iter()
        .flat_map(|(_, idx)| {
            let n = idx.len();
            (0..=n).map(move |k| k as f64 / n as f64)
        })
        .filter(|&f| f <= keep_target)
        .chain([keep_target])
        .collect();
    fractions.sort_by(|a, b| b.total_cmp(a));
    fractions.dedup();
    for f in fractions {
        let mut kept = vec![false; units.len()];
        let mut cost = 0u64;
        for ((_, kind), idx) in &groups {
            let n = idx.len();
            let k = ((f * n as f64 + 1e-9).floor() as usize).max(min_keep(*kind, n, ratio));
            for &i in &idx[..k.min(n)] {
                kept[i] = true;
                cost += units[i].cost;
            }
        }
        if cost <= budget {
            return Ok(kept);
        }
    }
    unreachable!("f = 0 reduces to minimum retention, which check_feasible accepted")
}

/// Value of the optimal 0/1 knapsack, by exhaustive subset search.
#[cfg(test)]
pub(crate) fn knapsack_optimum(costs: &[u64], values: &[f64], budget: u64) -> f64 {
    let n = costs.len();
    let mut best = 0.0f64;
    for mask in 0u32..(1 << n) {
        let (mut c, mut v) = (0u64, 0.0);
        for i in 0..n {
            if mask >> i & 1 == 1 {
                c += costs[i];
                v += values[i];
            }
        }
        if c <= budget && v > best {
            best = v;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{enumerate_units, ModelConfig};
    use crate::seed::rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn unit(layer: usize, kind: UnitKind, index_in_layer: usize, cost: u64) -> StructuralUnit {
        StructuralUnit {
            layer,
            kind,
            index_in_layer,
            cost,
        }
    }

    fn flat(costs: &[u64]) -> Vec<StructuralUnit> {
        costs
            .iter()
            .enumerate()
            .map(|(i, &c)| unit(0, UnitKind::MlpNeuron, i, c))
            .collect()
    }

    #[test]
    fn everything_fits() {
        let u = flat(&[3, 4, 5]);
        let p = greedy_pack(&u, &[1.0, 2.0, 3.0], 12);
        assert_eq!(p.kept, vec![true; 3]);
    }

    #[test]
    fn zero_budget_is_empty() {
        let u = flat(&[3, 4, 5]);
        let p = greedy_pack(&u, &[1.0, 2.0, 3.0], 0);
        assert_eq!(p.kept, vec![false; 3]);
        assert!(!p.fallback_used);
    }

    #[test]
    fn fallback_beats_greedy() {
        // Greedy takes the tiny efficient item and then cannot fit the big one.
        let u = flat(&[1, 10]);
        let p = greedy_pack(&u, &[2.0, 10.0], 10);
        assert_eq!(p.kept, vec![false, true]);
        assert!(p.fallback_used);
    }

    #[test]
    fn ties_break_canonically() {
        let u = flat(&[2, 2, 2]);
        let p = greedy_pack(&u, &[1.0, 1.0, 1.0], 4);
        assert_eq!(p.kept, vec![true, true, false]);
    }

    #[test]
    fn half_of_optimum_on_random_instances() {
        let mut r = rng(11);
        for _ in 0..200 {
            let n = r.random_range(1..=12);
            let costs: Vec<u64> = (0..n).map(|_| r.random_range(1..=40)).collect();
            let values: Vec<f64> = (0..n).map(|_| r.random_range(0.0..10.0)).collect();
            let budget = costs.iter().sum::<u64>() / 2;
            let u = flat(&costs);
            let p = greedy_pack(&u, &values, budget);
            let opt = knapsack_optimum(&costs, &values, budget);
            assert!(p.cost(&u) <= budget);
            assert!(p.value(&values) >= 0.5 * opt - 1e-12);
        }
    }

    proptest! {
        #[test]
        fn greedy_fill_is_maximal(
            costs in proptest::collection::vec(1u64..50, 1..20),
            seed in 0u64..1000,
            frac in 0.0f64..1.0,
        ) {
            let mut r = rng(seed);
            let values: Vec<f64> = costs.iter().map(|_| r.random_range(0.0..5.0)).collect();
            let budget = (costs.iter().sum::<u64>() as f64 * frac) as u64;
            let u = flat(&costs);
            let p = greedy_pack(&u, &values, budget);
            let used = p.cost(&u);
            prop_assert!(used <= budget);
            if !p.fallback_used {
                for (unit, &kept) in u.iter().zip(&p.kept) {
                    prop_assert!(kept || used + unit.cost > budget);
                }
            }
        }
    }

    fn toy_units() -> Vec<StructuralUnit> {
        enumerate_units(&ModelConfig::dense(2, 8, 4, 4, 2, 10, 16, 16, 1).unwrap())
    }

    #[test]
    fn safety_fixed_point() {
        let u = toy_units();
        let kept = vec![true; u.len()];
        let total: u64 = u.iter().map(|x| x.cost).sum();
        let out = enforce_safety(&u, &vec![1.0; u.len()], kept.clone(), 0.3, total).unwrap();
        assert_eq!(out.kept, kept);
        assert!(out.forced_in.is_empty() && out.evicted.is_empty());
    }

    #[test]
    fn safety_forces_most_efficient() {
        let u = toy_units();
        let values: Vec<f64> = (0..u.len()).map(|i| i as f64).collect();
        let total: u64 = u.iter().map(|x| x.cost).sum();
        let out = enforce_safety(&u, &values, vec![false; u.len()], 0.5, total).unwrap();
        // Layer 0 MLP: 10 neurons, η = max(1, ⌊10·0.125⌋) = 1, highest value is index 9.
        let l0_mlp: Vec<usize> = (0..10).filter(|&i| out.kept[i]).collect();
        assert_eq!(l0_mlp, vec![9]);
        // Attention: 4 groups, η = max(2, ⌊4·0.35⌋) = 2.
        let l0_attn: Vec<usize> = (10..14).filter(|&i| out.kept[i]).collect();
        assert_eq!(l0_attn, vec![12, 13]);
    }

    #[test]
    fn safety_evicts_lowest_efficiency() {
        let u = toy_units();
        let values: Vec<f64> = (0..u.len()).map(|i| (i + 1) as f64).collect();
        let total: u64 = u.iter().map(|x| x.cost).sum();
        let budget = total - 2 * u[0].cost;
        let out = enforce_safety(&u, &values, vec![true; u.len()], 0.3, budget).unwrap();
        assert_eq!(out.evicted, vec![0, 1]);
    }

    #[test]
    fn infeasible_reports_binding_layers() {
        let u = toy_units();
        match enforce_safety(&u, &vec![1.0; u.len()], vec![true; u.len()], 0.3, 10) {
            Err(Error::Infeasible { binding, budget, required }) => {
                assert_eq!(budget, 10);
                assert!(required > 10);
                assert_eq!(binding.len(), 4);
                assert_eq!(binding[0].kind, UnitKind::GqaGroup);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn layerwise_uses_uniform_fraction() {
        let u = toy_units();
        let values: Vec<f64> = (0..u.len()).map(|i| ((i * 7) % 5) as f64).collect();
        let total: u64 = u.iter().map(|x| x.cost).sum();
        let kept = layerwise_select(&u, &values, 0.5, total / 2).unwrap();
        let cost: u64 = u.iter().zip(&kept).filter(|(_, &k)| k).map(|(x, _)| x.cost).sum();
        assert!(cost <= total / 2);
        for ((_, kind), idx) in groups(&u) {
            let n = idx.len();
            let k = idx.iter().filter(|&&i| kept[i]).count();
            assert!(k >= min_keep(kind, n, 0.5));
        }
        // Both MLP layers keep the same count.
        let c0 = (0..10).filter(|&i| kept[i]).count();
        let c1 = (14..24).filter(|&i| kept[i]).count();
        assert_eq!(c0, c1);
    }
}
