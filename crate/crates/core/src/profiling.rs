//! Per-sublayer output statistics over the calibration corpus: the
//! linear-kernel cross-modal dependency score and the RMS output
//! sensitivity, with min-max normalization across layers.

use ndarray::ArrayView2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::Corpus;
use crate::error::{Error, Result};
use crate::model::{forward, Modality, Model, Sublayer};

pub const CMDS_EPS: f64 = 1e-8;

const SUBLAYERS: [Sublayer; 2] = [Sublayer::Attention, Sublayer::Mlp];

/// Pooled sums over every position seen at one sublayer.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationStats {
    pub vision_sum: Vec<f64>,
    pub vision_count: usize,
    pub text_sum: Vec<f64>,
    pub text_count: usize,
    /// Σ‖a‖₂
    pub norm_sum: f64,
    /// Σ‖a‖₂²
    pub sq_norm_sum: f64,
}

impl ActivationStats {
    pub fn new(dim: usize) -> Self {
        ActivationStats {
            vision_sum: vec![0.0; dim],
            vision_count: 0,
            text_sum: vec![0.0; dim],
            text_count: 0,
            norm_sum: 0.0,
            sq_norm_sum: 0.0,
        }
    }

    /// Add the rows of `acts` (`[positions × dim]`) tagged by `modality`.
    pub fn add(&mut self, acts: ArrayView2<f64>, modality: &[Modality]) {
        for (row, m) in acts.outer_iter().zip(modality) {
            let (sum, count) = match m {
                Modality::Vision => (&mut self.vision_sum, &mut self.vision_count),
                Modality::Text => (&mut self.text_sum, &mut self.text_count),
            };
            sum.iter_mut().zip(row.iter()).for_each(|(s, v)| *s += v);
            *count += 1;
            let sq: f64 = row.iter().map(|v| v * v).sum();
            self.sq_norm_sum += sq;
            self.norm_sum += sq.sqrt();
        }
    }

    pub fn merge(&mut self, other: &ActivationStats) {
        self.vision_sum.iter_mut().zip(&other.vision_sum).for_each(|(a, b)| *a += b);
        self.text_sum.iter_mut().zip(&other.text_sum).for_each(|(a, b)| *a += b);
        self.vision_count += other.vision_count;
        self.text_count += other.text_count;
        self.norm_sum += other.norm_sum;
        self.sq_norm_sum += other.sq_norm_sum;
    }

    pub fn count(&self) -> usize {
        self.vision_count + self.text_count
    }

    /// ‖μ_vision − μ_text‖₂ / (mean ‖a‖₂ + ε)
    pub fn cmds(&self) -> Result<f64> {
        if self.vision_count == 0 || self.text_count == 0 {
            return Err(Error::MissingModality);
        }
        let (nv, nt) = (self.vision_count as f64, self.text_count as f64);
        let gap = self
            .vision_sum
            .iter()
            .zip(&self.text_sum)
            .map(|(v, t)| (v / nv - t / nt).powi(2))
            .sum::<f64>()
            .sqrt();
        Ok(gap / (self.norm_sum / self.count() as f64 + CMDS_EPS))
    }

    /// √(mean ‖a‖₂²), zero when nothing was observed.
    pub fn sensitivity(&self) -> f64 {
        match self.count() {
            0 => 0.0,
            n => (self.sq_norm_sum / n as f64).sqrt(),
        }
    }
}

/// Statistics for every `(layer, sublayer)`, in `profile_keys` order.
pub fn collect_stats(model: &Model, corpus: &Corpus) -> Result<Vec<ActivationStats>> {
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("empty calibration corpus".into()));
    }
    let d = model.config.d_model;
    let keys = profile_keys(model.config.n_layers);
    let per_sample: Vec<Result<Vec<ActivationStats>>> = corpus
        .samples
        .par_iter()
        .map(|s| {
            let trace = forward(model, &s.sequence())?;
            Ok(keys
                .iter()
                .map(|&(l, sub)| {
                    let mut st = ActivationStats::new(d);
                    st.add(trace.sublayer(l, sub).view(), &trace.modality);
                    st
                })
                .collect())
        })
        .collect();
    let mut total = vec![ActivationStats::new(d); keys.len()];
    for sample in per_sample {
        for (acc, st) in total.iter_mut().zip(sample?) {
            acc.merge(&st);
        }
    }
    Ok(total)
}

/// `(layer, sublayer)` pairs, attention before MLP within each layer.
pub fn profile_keys(n_layers: usize) -> Vec<(usize, Sublayer)> {
    (0..n_layers)
        .flat_map(|l| SUBLAYERS.map(|s| (l, s)))
        .collect()
}

pub fn compute_cmds(model: &Model, corpus: &Corpus) -> Result<Vec<f64>> {
    collect_stats(model, corpus)?.iter().map(|s| s.cmds()).collect()
}

pub fn compute_sensitivity(model: &Model, corpus: &Corpus) -> Result<Vec<f64>> {
    Ok(collect_stats(model, corpus)?
        .iter()
        .map(ActivationStats::sensitivity)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerProfile {
    pub layer: usize,
    pub sublayer: Sublayer,
    pub sens_raw: f64,
    pub cmds_raw: f64,
    pub sens_norm: f64,
    pub cmds_norm: f64,
    /// Structural prior Ω; 1 until the allocator fills it in.
    pub omega: f64,
    /// Protection factor P; 1 until the allocator fills it in.
    pub protection: f64,
}

impl LayerProfile {
    pub fn raw(layer: usize, sublayer: Sublayer, sens_raw: f64, cmds_raw: f64) -> Self {
        LayerProfile {
            layer,
            sublayer,
            sens_raw,
            cmds_raw,
            sens_norm: 0.0,
            cmds_norm: 0.0,
            omega: 1.0,
            protection: 1.0,
        }
    }
}

/// Raw and normalized profiles for every sublayer, from one pass over the corpus.
pub fn profile_model(model: &Model, corpus: &Corpus) -> Result<Vec<LayerProfile>> {
    let stats = collect_stats(model, corpus)?;
    let raw = profile_keys(model.config.n_layers)
        .into_iter()
        .zip(&stats)
        .map(|((l, sub), st)| Ok(LayerProfile::raw(l, sub, st.sensitivity(), st.cmds()?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(normalize_profiles(&raw))
}

fn min_max(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    values
        .iter()
        .map(|&v| if hi > lo { (v - lo) / (hi - lo) } else { 0.0 })
        .collect()
}

/// Min-max scale `sens_raw` and `cmds_raw` to [0, 1] across layers within
/// each sublayer class. A constant class maps to 0.
pub fn normalize_profiles(profiles: &[LayerProfile]) -> Vec<LayerProfile> {
    let mut out = profiles.to_vec();
    for sub in SUBLAYERS {
        let idx: Vec<usize> = (0..out.len()).filter(|&i| out[i].sublayer == sub).collect();
        let sens: Vec<f64> = idx.iter().map(|&i| out[i].sens_raw).collect();
        let cmds: Vec<f64> = idx.iter().map(|&i| out[i].cmds_raw).collect();
        for ((&i, s), c) in idx.iter().zip(min_max(&sens)).zip(min_max(&cmds)) {
            out[i].sens_norm = s;
            out[i].cmds_norm = c;
        }
    }
    out
}

/// One sensitivity per layer: the larger of its two sublayers' raw values.
pub fn layer_sensitivity(profiles: &[LayerProfile]) -> Vec<f64> {
    let n = profiles.iter().map(|p| p.layer + 1).max().unwrap_or(0);
    let mut out = vec![0.0f64; n];
    for p in profiles {
        out[p.layer] = out[p.layer].max(p.sens_raw);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::generate_synthetic_corpus;
    use crate::model::{ModelConfig, ModelWeights};
    use ndarray::Array2;

    fn tags(nv: usize, nt: usize) -> Vec<Modality> {
        let mut t = vec![Modality::Vision; nv];
        t.extend(vec![Modality::Text; nt]);
        t
    }

    fn stats(acts: &Array2<f64>, nv: usize) -> ActivationStats {
        let mut s = ActivationStats::new(acts.ncols());
        s.add(acts.view(), &tags(nv, acts.nrows() - nv));
        s
    }

    #[test]
    fn identical_modalities_give_zero() {
        let row = [0.5, -1.0, 2.0];
        let acts = Array2::from_shape_fn((6, 3), |(_, j)| row[j]);
        assert_eq!(stats(&acts, 2).cmds().unwrap(), 0.0);
    }

    #[test]
    fn opposed_means_give_two() {
        let c = 3.0;
        let acts = Array2::from_shape_fn((5, 4), |(i, j)| match (i < 2, j) {
            (true, 0) => c,
            (false, 0) => -c,
            _ => 0.0,
        });
        let got = stats(&acts, 2).cmds().unwrap();
        assert!((got - 2.0 * c / (c + CMDS_EPS)).abs() < 1e-15);
        assert!((got - 2.0).abs() < 1e-8);
    }

    #[test]
    fn scale_invariant() {
        let acts = Array2::from_shape_fn((7, 3), |(i, j)| ((i * 3 + j) as f64).sin());
        let base = stats(&acts, 3).cmds().unwrap();
        for lambda in [0.01, 2.5, 1e3] {
            let scaled = stats(&acts.mapv(|v| v * lambda), 3).cmds().unwrap();
            assert!((scaled - base).abs() <= 1e-6 * base, "{lambda}: {scaled} vs {base}");
        }
    }

    #[test]
    fn missing_modality_is_an_error() {
        let acts = Array2::ones((3, 2));
        assert!(matches!(stats(&acts, 0).cmds(), Err(Error::MissingModality)));
        assert!(matches!(stats(&acts, 3).cmds(), Err(Error::MissingModality)));
    }

    #[test]
    fn constant_norm_three_sensitivity() {
        let acts = Array2::from_shape_fn((4, 2), |(i, j)| if (i + j) % 2 == 0 { 3.0 } else { 0.0 });
        assert_eq!(stats(&acts, 1).sensitivity(), 3.0);
    }

    #[test]
    fn merge_is_order_free_for_counts() {
        let a = Array2::from_shape_fn((3, 2), |(i, j)| (i + 2 * j) as f64);
        let b = Array2::from_shape_fn((4, 2), |(i, j)| (i * j) as f64 - 1.0);
        let mut ab = stats(&a, 1);
        ab.merge(&stats(&b, 2));
        let mut ba = stats(&b, 2);
        ba.merge(&stats(&a, 1));
        assert!((ab.sensitivity() - ba.sensitivity()).abs() < 1e-15);
        assert!((ab.cmds().unwrap() - ba.cmds().unwrap()).abs() < 1e-15);
    }

    fn small() -> (Model, Corpus) {
        let cfg = ModelConfig::dense(2, 16, 4, 2, 4, 8, 259, 256, 8).unwrap();
        (Model::random(cfg.clone(), 3), generate_synthetic_corpus(1, 3, &cfg).unwrap())
    }

    #[test]
    fn zero_model_has_zero_sensitivity() {
        let (m, c) = small();
        let z = Model::new(m.config.clone(), ModelWeights::zeros(&m.config)).unwrap();
        assert!(compute_sensitivity(&z, &c).unwrap().iter().all(|&s| s == 0.0));
        assert!(compute_cmds(&z, &c).unwrap().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn sensitivity_matches_two_pass_oracle() {
        let (m, c) = small();
        let got = compute_sensitivity(&m, &c).unwrap();
        let traces: Vec<_> = c.samples.iter().map(|s| forward(&m, &s.sequence()).unwrap()).collect();
        for (k, (l, sub)) in profile_keys(2).into_iter().enumerate() {
            let mut norms = Vec::new();
            for t in &traces {
                for row in t.sublayer(l, sub).outer_iter() {
                    norms.push(row.iter().map(|v| v * v).sum::<f64>());
                }
            }
            let mean = norms.iter().sum::<f64>() / norms.len() as f64;
            assert!((got[k] - mean.sqrt()).abs() <= 1e-10 * mean.sqrt());
        }
    }

    #[test]
    fn sample_order_does_not_matter() {
        let (m, c) = small();
        let mut rev = c.clone();
        rev.samples.reverse();
        let a = compute_sensitivity(&m, &c).unwrap();
        let b = compute_sensitivity(&m, &rev).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-12 * x);
        }
    }

    #[test]
    fn min_max_rows() {
        let ps: Vec<_> = [2.0, 4.0, 6.0]
            .iter()
            .enumerate()
            .map(|(l, &v)| LayerProfile::raw(l, Sublayer::Mlp, v, 5.0))
            .collect();
        let n = normalize_profiles(&ps);
        assert_eq!(n.iter().map(|p| p.sens_norm).collect::<Vec<_>>(), vec![0.0, 0.5, 1.0]);
        assert!(n.iter().all(|p| p.cmds_norm == 0.0));
        let one = normalize_profiles(&[LayerProfile::raw(0, Sublayer::Attention, 7.0, 1.0)]);
        assert_eq!((one[0].sens_norm, one[0].cmds_norm), (0.0, 0.0));
    }

    #[test]
    fn classes_normalize_separately() {
        let ps = vec![
            LayerProfile::raw(0, Sublayer::Attention, 1.0, 0.0),
            LayerProfile::raw(0, Sublayer::Mlp, 100.0, 0.0),
            LayerProfile::raw(1, Sublayer::Attention, 3.0, 0.0),
            LayerProfile::raw(1, Sublayer::Mlp, 50.0, 0.0),
        ];
        let n = normalize_profiles(&ps);
        let s: Vec<f64> = n.iter().map(|p| p.sens_norm).collect();
        assert_eq!(s, vec![0.0, 1.0, 1.0, 0.0]);
        assert_eq!(layer_sensitivity(&ps), vec![100.0, 50.0]);
    }

    #[test]
    fn profile_model_fills_both_fields() {
        let (m, c) = small();
        let p = profile_model(&m, &c).unwrap();
        assert_eq!(p.len(), 4);
        assert!(p.iter().all(|x| (0.0..=1.0).contains(&x.sens_norm) && x.cmds_raw >= 0.0));
    }
}
