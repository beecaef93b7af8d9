//! First-order Taylor attribution `Σ |w · ∂L/∂w|` per structural unit, and
//! the ℓ1 magnitude baseline over the same parameter slices.

use ndarray::{s, Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::pivots::PivotMask;
use super::table::{ImportanceTable, TableKind};
use crate::calibration::Corpus;
use crate::error::{Error, Result};
use crate::model::{backward, enumerate_units, LossWeights, Model, ModelWeights};

/// Which parameter slices count towards a GQA group's Taylor score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttnSlices {
    /// Q rows, O columns and the group's K/V rows: everything pruning removes.
    #[default]
    QkvO,
    /// Q rows and O columns only.
    QO,
}

fn pair_sum(w: ArrayView2<f64>, g: Option<ArrayView2<f64>>) -> f64 {
    match g {
        Some(g) => w.iter().zip(g.iter()).map(|(a, b)| (a * b).abs()).sum(),
        None => w.iter().map(|a| a.abs()).sum(),
    }
}

fn rows<'a>(a: &'a Array2<f64>, lo: usize, hi: usize) -> ArrayView2<'a, f64> {
    a.slice(s![lo..hi, ..])
}

fn cols<'a>(a: &'a Array2<f64>, lo: usize, hi: usize) -> ArrayView2<'a, f64> {
    a.slice(s![.., lo..hi])
}

/// Per-unit sums in enumeration order: `Σ|w·g|` when `grads` is given,
/// otherwise `Σ|w|`.
pub(crate) fn unit_sums(
    model: &Model,
    grads: Option<&ModelWeights>,
    slices: AttnSlices,
) -> Vec<f64> {
    let cfg = &model.config;
    let hd = cfg.head_dim;
    let hpg = cfg.heads_per_group();
    let mut out = Vec::new();
    for (l, lw) in model.weights.layers.iter().enumerate() {
        let lg = grads.map(|g| &g.layers[l]);
        for j in 0..cfg.layers[l].d_mlp {
            let mut v = pair_sum(rows(&lw.w_gate, j, j + 1), lg.map(|g| rows(&g.w_gate, j, j + 1)));
            v += pair_sum(rows(&lw.w_up, j, j + 1), lg.map(|g| rows(&g.w_up, j, j + 1)));
            v += pair_sum(cols(&lw.w_down, j, j + 1), lg.map(|g| cols(&g.w_down, j, j + 1)));
            out.push(v);
        }
        for grp in 0..cfg.layers[l].n_kv_groups {
            let (q0, q1) = (grp * hpg * hd, (grp + 1) * hpg * hd);
            let (k0, k1) = (grp * hd, (grp + 1) * hd);
            let mut v = pair_sum(rows(&lw.w_q, q0, q1), lg.map(|g| rows(&g.w_q, q0, q1)));
            v += pair_sum(cols(&lw.w_o, q0, q1), lg.map(|g| cols(&g.w_o, q0, q1)));
            if slices == AttnSlices::QkvO || grads.is_none() {
                v += pair_sum(rows(&lw.w_k, k0, k1), lg.map(|g| rows(&g.w_k, k0, k1)));
                v += pair_sum(rows(&lw.w_v, k0, k1), lg.map(|g| rows(&g.w_v, k0, k1)));
            }
            out.push(v);
        }
    }
    out
}

fn accumulate(parts: Vec<Result<Option<Vec<f64>>>>, n_units: usize) -> Result<(Vec<f64>, usize)> {
    let mut acc = vec![0.0; n_units];
    let mut count = 0;
    for p in parts {
        if let Some(v) = p? {
            acc.iter_mut().zip(&v).for_each(|(a, b)| *a += b);
            count += 1;
        }
    }
    Ok((acc, count))
}

/// Taylor scores of the token-mean response loss, averaged over the corpus.
pub fn global_attribution(model: &Model, corpus: &Corpus, slices: AttnSlices) -> Result<ImportanceTable> {
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("empty calibration corpus".into()));
    }
    let units = enumerate_units(&model.config);
    let parts: Vec<_> = corpus
        .samples
        .par_iter()
        .map(|s| {
            let g = backward(model, &s.sequence(), &LossWeights::mean(&s.loss_mask))?;
            Ok(Some(unit_sums(model, Some(&g), slices)))
        })
        .collect();
    let (acc, count) = accumulate(parts, units.len())?;
    let mut table = ImportanceTable::zeros(TableKind::Global, units);
    table.scores = acc.into_iter().map(|v| v / count as f64).collect();
    table.sample_count = count;
    Ok(table)
}

/// Taylor scores of the window-restricted summed loss. Each sample's
/// contribution is scaled by `1/|pivots|`; the accumulator is then averaged
/// over the samples that had pivots.
pub fn pivot_attribution(
    model: &Model,
    corpus: &Corpus,
    masks: &[PivotMask],
    slices: AttnSlices,
) -> Result<ImportanceTable> {
    if masks.len() != corpus.len() {
        return Err(Error::InvalidArgument(format!(
            "{} pivot masks for {} samples",
            masks.len(),
            corpus.len()
        )));
    }
    let units = enumerate_units(&model.config);
    let parts: Vec<_> = corpus
        .samples
        .par_iter()
        .zip(masks.par_iter())
        .map(|(s, m)| {
            if m.is_empty() || m.window.is_empty() {
                return Ok(None);
            }
            let mask = s.response_mask(m.window.iter().copied());
            let weights = LossWeights::scaled_sum(&mask, 1.0 / m.pivot_indices.len() as f64);
            let g = backward(model, &s.sequence(), &weights)?;
            Ok(Some(unit_sums(model, Some(&g), slices)))
        })
        .collect();
    let (acc, count) = accumulate(parts, units.len())?;
    if count == 0 {
        return Err(Error::NoPivots);
    }
    let mut table = ImportanceTable::zeros(TableKind::Pivot, units);
    table.scores = acc.into_iter().map(|v| v / count as f64).collect();
    table.sample_count = count;
    Ok(table)
}

/// ℓ1 norm of every parameter a unit owns (the same slices as its cost).
pub fn magnitude_scores(model: &Model) -> ImportanceTable {
    let units = enumerate_units(&model.config);
    let mut table = ImportanceTable::zeros(TableKind::Magnitude, units);
    table.scores = unit_sums(model, None, AttnSlices::QkvO);
    table
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attribution::pivots::{PivotMask, PivotSource};
    use crate::calibration::{generate_synthetic_corpus, CalibrationSample};
    use crate::model::{loss_and_gradients, ModelConfig, UnitKind};

    fn setup() -> (Model, Corpus) {
        let cfg = ModelConfig::dense(2, 16, 4, 2, 4, 8, 259, 256, 8).unwrap();
        let corpus = generate_synthetic_corpus(4, 3, &cfg).unwrap();
        (Model::random(cfg, 4), corpus)
    }

    #[test]
    fn zero_model_scores_vanish() {
        let (m, c) = setup();
        let zero = Model::new(m.config.clone(), ModelWeights::zeros(&m.config)).unwrap();
        let g = global_attribution(&zero, &c, AttnSlices::QkvO).unwrap();
        assert!(g.scores.iter().all(|&v| v == 0.0));
        assert!(magnitude_scores(&zero).scores.iter().all(|&v| v == 0.0));
        let masks: Vec<_> = c
            .samples
            .iter()
            .map(|s| PivotMask::from_pivots([3], s.response_len(), 2, PivotSource::Markers))
            .collect();
        let p = pivot_attribution(&zero, &c, &masks, AttnSlices::QkvO).unwrap();
        assert!(p.scores.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_computed_single_layer_scores() {
        // One layer, two neurons, one sample: sum |w*g| over the slices by hand.
        let cfg = ModelConfig::dense(1, 8, 2, 1, 4, 2, 259, 256, 8).unwrap();
        let m = Model::random(cfg.clone(), 21);
        let c = generate_synthetic_corpus(9, 1, &cfg).unwrap();
        let s = &c.samples[0];
        let (_, g, _) = loss_and_gradients(&m, &s.sequence(), &LossWeights::mean(&s.loss_mask)).unwrap();
        let lw = &m.weights.layers[0];
        let lg = &g.layers[0];
        let mut want = [0.0f64; 2];
        for (j, w) in want.iter_mut().enumerate() {
            for k in 0..8 {
                *w += (lw.w_gate[[j, k]] * lg.w_gate[[j, k]]).abs();
                *w += (lw.w_up[[j, k]] * lg.w_up[[j, k]]).abs();
                *w += (lw.w_down[[k, j]] * lg.w_down[[k, j]]).abs();
            }
        }
        let mut group = 0.0;
        for r in 0..8 {
            for k in 0..8 {
                group += (lw.w_q[[r, k]] * lg.w_q[[r, k]]).abs();
                group += (lw.w_o[[k, r]] * lg.w_o[[k, r]]).abs();
            }
        }
        let mut kv = 0.0;
        for r in 0..4 {
            for k in 0..8 {
                kv += (lw.w_k[[r, k]] * lg.w_k[[r, k]]).abs();
                kv += (lw.w_v[[r, k]] * lg.w_v[[r, k]]).abs();
            }
        }
        let t = global_attribution(&m, &c, AttnSlices::QkvO).unwrap();
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * b.abs().max(1.0);
        assert!(close(t.scores[0], want[0]) && close(t.scores[1], want[1]));
        assert!(close(t.scores[2], group + kv));
        let strict = global_attribution(&m, &c, AttnSlices::QO).unwrap();
        assert!(close(strict.scores[2], group));
        assert_eq!(strict.scores[..2], t.scores[..2]);
    }

    #[test]
    fn duplicated_corpus_gives_same_mean() {
        let (m, c) = setup();
        let mut doubled = c.clone();
        doubled.samples.extend(c.samples.clone());
        let a = global_attribution(&m, &c, AttnSlices::QkvO).unwrap();
        let b = global_attribution(&m, &doubled, AttnSlices::QkvO).unwrap();
        for (x, y) in a.scores.iter().zip(&b.scores) {
            assert!((x - y).abs() <= 1e-12 * x.abs().max(1e-300), "{x} {y}");
        }
        assert_eq!(b.sample_count, 6);
    }

    #[test]
    fn full_windows_match_sum_form_global() {
        // Windows covering the whole response with the same pivot count per
        // sample reproduce global attribution of the summed loss, scaled.
        let (m, c) = setup();
        let masks: Vec<_> = c
            .samples
            .iter()
            .map(|s| {
                let n = s.response_len();
                PivotMask::from_pivots([0, n / 2, n - 1], n, n, PivotSource::Markers)
            })
            .collect();
        assert!(masks.iter().all(|mk| mk.window.len() == mk.window.last().unwrap() + 1));
        let p = pivot_attribution(&m, &c, &masks, AttnSlices::QkvO).unwrap();
        let units = enumerate_units(&m.config);
        let mut want = vec![0.0; units.len()];
        for s in &c.samples {
            let g = backward(&m, &s.sequence(), &LossWeights::sum(&s.loss_mask)).unwrap();
            for (w, v) in want.iter_mut().zip(unit_sums(&m, Some(&g), AttnSlices::QkvO)) {
                *w += v;
            }
        }
        for (got, w) in p.scores.iter().zip(&want) {
            let w = w / 3.0 / c.len() as f64;
            assert!((got - w).abs() <= 1e-10 * w.abs().max(1e-12), "{got} vs {w}");
        }
    }

    #[test]
    fn single_token_window() {
        let (m, c) = setup();
        let c = Corpus {
            samples: vec![c.samples[0].clone()],
            seed: 0,
        };
        let s: &CalibrationSample = &c.samples[0];
        let mut mask = PivotMask::from_pivots([5, 9], s.response_len(), 1, PivotSource::Markers);
        mask.window = vec![7];
        let p = pivot_attribution(&m, &c, &[mask], AttnSlices::QkvO).unwrap();
        let mut weights = vec![0.0; s.token_ids.len()];
        weights[s.response_start() + 7] = 1.0;
        let g = backward(&m, &s.sequence(), &LossWeights(weights)).unwrap();
        let want = unit_sums(&m, Some(&g), AttnSlices::QkvO);
        for (got, w) in p.scores.iter().zip(&want) {
            assert!((got - w / 2.0).abs() <= 1e-12 * w.abs().max(1e-300));
        }
    }

    #[test]
    fn no_pivots_is_an_error() {
        let (m, c) = setup();
        let masks: Vec<_> = c
            .samples
            .iter()
            .map(|s| PivotMask::from_pivots([], s.response_len(), 8, PivotSource::Markers))
            .collect();
        assert!(matches!(
            pivot_attribution(&m, &c, &masks, AttnSlices::QkvO),
            Err(Error::NoPivots)
        ));
    }

    #[test]
    fn magnitude_of_ones_is_slice_size() {
        let (m, _) = setup();
        let mut ones = m.clone();
        for (_, d) in ones.weights.tensors_mut() {
            d.fill(1.0);
        }
        let t = magnitude_scores(&ones);
        assert_eq!(t.scores[0], 3.0 * 16.0);
        let gqa = t.units.iter().position(|u| u.kind == UnitKind::GqaGroup).unwrap();
        assert_eq!(t.scores[gqa], t.units[gqa].cost as f64);
    }

    #[test]
    fn magnitude_is_homogeneous() {
        let (m, _) = setup();
        let mut doubled = m.clone();
        for (_, d) in doubled.weights.tensors_mut() {
            d.iter_mut().for_each(|v| *v *= 2.0);
        }
        let a = magnitude_scores(&m);
        let b = magnitude_scores(&doubled);
        for (x, y) in a.scores.iter().zip(&b.scores) {
            assert_eq!(2.0 * x, *y);
        }
    }
}
