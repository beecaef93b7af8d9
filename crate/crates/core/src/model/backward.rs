//! Hand-written reverse pass for the decoder in `forward.rs`.

use std::ops::{Deref, DerefMut};

use ndarray::{s, Array1, Array2, Axis, Zip};

use super::forward::{masked_nll, run, sigmoid, silu, ForwardTrace, LossWeights, Sequence};
use super::{Model, ModelWeights};
use crate::error::{Error, Result};

/// `∂L/∂W` for every weight tensor, shape-congruent with [`ModelWeights`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientTable(pub ModelWeights);

impl Deref for GradientTable {
    type Target = ModelWeights;
    fn deref(&self) -> &ModelWeights {
        &self.0
    }
}

impl DerefMut for GradientTable {
    fn deref_mut(&mut self) -> &mut ModelWeights {
        &mut self.0
    }
}

/// Returns `(dx, dscale)` for `y = rms_norm(x) * scale`.
fn rms_norm_backward(
    x: &Array2<f64>,
    r: &Array1<f64>,
    scale: &Array1<f64>,
    dy: &Array2<f64>,
) -> (Array2<f64>, Array1<f64>) {
    let d = x.ncols() as f64;
    let mut dx = Array2::<f64>::zeros(x.raw_dim());
    let mut dscale = Array1::<f64>::zeros(scale.raw_dim());
    for t in 0..x.nrows() {
        let xt = x.row(t);
        let dyt = dy.row(t);
        let rt = r[t];
        let mut proj = 0.0;
        for i in 0..x.ncols() {
            proj += dyt[i] * scale[i] * xt[i];
            dscale[i] += dyt[i] * xt[i] * rt;
        }
        let c = rt * rt * rt / d * proj;
        let mut dxt = dx.row_mut(t);
        for i in 0..x.ncols() {
            dxt[i] = rt * scale[i] * dyt[i] - xt[i] * c;
        }
    }
    (dx, dscale)
}

/// Forward with caching, then exact gradients of the weighted NLL.
pub fn loss_and_gradients(
    model: &Model,
    seq: &Sequence,
    weights: &LossWeights,
) -> Result<(f64, GradientTable, ForwardTrace)> {
    let (trace, cache) = run(model, seq, None, true)?;
    let cache = cache.expect("cache requested");
    let loss = masked_nll(&trace.logits, seq, weights)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    let cfg = &model.config;
    let w = &model.weights;
    let nv = seq.vision.len();
    let hd = cfg.head_dim;
    let hpg = cfg.heads_per_group();
    let scale = 1.0 / (hd as f64).sqrt();
    let mut g = ModelWeights::zeros(cfg);

    // d loss / d logits
    let mut dlogits = Array2::<f64>::zeros(trace.logits.raw_dim());
    for (i, (&wt, &tok)) in weights.0.iter().zip(&seq.tokens).enumerate() {
        if wt == 0.0 {
            continue;
        }
        let row = seq.predicting_row(i);
        let logits = trace.logits.row(row);
        let max = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let z: f64 = logits.iter().map(|&v| (v - max).exp()).sum();
        let mut drow = dlogits.row_mut(row);
        Zip::from(&mut drow)
            .and(&logits)
            .for_each(|d, &l| *d += wt * (l - max).exp() / z);
        drow[tok as usize] -= wt;
    }

    g.output_head = dlogits.t().dot(&cache.xf);
    let dxf = dlogits.dot(&w.output_head);
    let (mut dx, dfinal) = rms_norm_backward(&cache.x_last, &cache.r_final, &w.final_norm, &dxf);
    g.final_norm = dfinal;

    for (l, lc) in cache.layers.iter().enumerate().rev() {
        let lw = &w.layers[l];
        let lg = &mut g.layers[l];

        // MLP sublayer
        lg.w_down = dx.t().dot(&lc.hid);
        let dhid = dx.dot(&lw.w_down);
        let mut dgate = Array2::<f64>::zeros(lc.gate.raw_dim());
        let mut dup = Array2::<f64>::zeros(lc.up.raw_dim());
        Zip::from(&mut dgate)
            .and(&mut dup)
            .and(&dhid)
            .and(&lc.gate)
            .and(&lc.up)
            .for_each(|dg, du, &dh, &z, &u| {
                let sg = sigmoid(z);
                *dg = dh * u * sg * (1.0 + z * (1.0 - sg));
                *du = dh * silu(z);
            });
        lg.w_gate = dgate.t().dot(&lc.m);
        lg.w_up = dup.t().dot(&lc.m);
        let dm = dgate.dot(&lw.w_gate) + dup.dot(&lw.w_up);
        let (dx_norm, dscale) = rms_norm_backward(&lc.x_mid, &lc.r_mlp, &lw.mlp_norm, &dm);
        lg.mlp_norm = dscale;
        let dx_mid = dx + dx_norm;

        // Attention sublayer
        lg.w_o = dx_mid.t().dot(&lc.o_cat);
        let do_cat = dx_mid.dot(&lw.w_o);
        let mut dq = Array2::<f64>::zeros(lc.q.raw_dim());
        let mut dk = Array2::<f64>::zeros(lc.k.raw_dim());
        let mut dv = Array2::<f64>::zeros(lc.v.raw_dim());
        for (h, p) in lc.probs.iter().enumerate() {
            let grp = h / hpg;
            let doh = do_cat.slice(s![.., h * hd..(h + 1) * hd]);
            let qh = lc.q.slice(s![.., h * hd..(h + 1) * hd]);
            let kh = lc.k.slice(s![.., grp * hd..(grp + 1) * hd]);
            let vh = lc.v.slice(s![.., grp * hd..(grp + 1) * hd]);
            let dp = doh.dot(&vh.t());
            {
                let mut dvh = dv.slice_mut(s![.., grp * hd..(grp + 1) * hd]);
                dvh += &p.t().dot(&doh);
            }
            let row_dot = (&dp * p).sum_axis(Axis(1));
            let mut ds = dp;
            Zip::from(ds.rows_mut())
                .and(p.rows())
                .and(&row_dot)
                .for_each(|mut dsr, pr, &rd| {
                    Zip::from(&mut dsr).and(&pr).for_each(|d, &pv| *d = pv * (*d - rd) * scale);
                });
            dq.slice_mut(s![.., h * hd..(h + 1) * hd])
                .assign(&ds.dot(&kh));
            let mut dkh = dk.slice_mut(s![.., grp * hd..(grp + 1) * hd]);
            dkh += &ds.t().dot(&qh);
        }
        lg.w_q = dq.t().dot(&lc.a);
        lg.w_k = dk.t().dot(&lc.a);
        lg.w_v = dv.t().dot(&lc.a);
        let da = dq.dot(&lw.w_q) + dk.dot(&lw.w_k) + dv.dot(&lw.w_v);
        let (dx_norm, dscale) = rms_norm_backward(&lc.x_in, &lc.r_attn, &lw.attn_norm, &da);
        lg.attn_norm = dscale;
        dx = dx_mid + dx_norm;
    }

    for (t, row) in dx.rows().into_iter().enumerate() {
        let mut pos = g.position_embedding.row_mut(t);
        pos += &row;
        if t >= nv {
            let mut tok = g.token_embedding.row_mut(seq.tokens[t - nv] as usize);
            tok += &row;
        }
    }

    if !g.all_finite() {
        return Err(Error::NonFinite("gradients".into()));
    }
    Ok((loss, GradientTable(g), trace))
}

/// Exact gradients of the weighted NLL with respect to every weight tensor.
pub fn backward(model: &Model, seq: &Sequence, weights: &LossWeights) -> Result<GradientTable> {
    loss_and_gradients(model, seq, weights).map(|(_, g, _)| g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward, ModelConfig};

    fn setup(seed: u64) -> (Model, Sequence) {
        let cfg = ModelConfig::dense(2, 8, 2, 1, 4, 6, 11, 12, 2).unwrap();
        let model = Model::random(cfg, seed);
        let mut rng = crate::seed::rng(seed + 100);
        use rand::Rng;
        let vision = (0..2)
            .map(|_| (0..8).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let tokens = (0..6).map(|_| rng.random_range(0..11)).collect();
        (model, Sequence { vision, tokens })
    }

    #[test]
    fn matches_finite_differences() {
        let (mut model, seq) = setup(1);
        let lw = LossWeights::mean(&[false, true, true, true, false, true]);
        let grads = backward(&model, &seq, &lw).unwrap();
        let h = 1e-5;
        let names: Vec<String> = grads.tensors().iter().map(|(n, _, _)| n.clone()).collect();
        let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|(_, _, d)| d.to_vec()).collect();
        for (ti, name) in names.iter().enumerate() {
            for (k, &a) in analytic[ti].iter().enumerate() {
                let orig = model.weights.tensors()[ti].2[k];
                model.weights.tensors_mut()[ti].1[k] = orig + h;
                let lp = loss(&model, &seq, &lw);
                model.weights.tensors_mut()[ti].1[k] = orig - h;
                let lm = loss(&model, &seq, &lw);
                model.weights.tensors_mut()[ti].1[k] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-2);
                assert!(rel <= 1e-5, "{name}[{k}]: analytic {a} vs fd {fd}");
            }
        }
    }

    fn loss(model: &Model, seq: &Sequence, lw: &LossWeights) -> f64 {
        let tr = forward(model, seq).unwrap();
        masked_nll(&tr.logits, seq, lw).unwrap()
    }

    #[test]
    fn zero_loss_gives_zero_gradients() {
        // Every position sees the same constant input, and the head puts an
        // overwhelming logit on token 0, so softmax is exactly one-hot.
        let cfg = ModelConfig::dense(2, 8, 2, 1, 4, 6, 11, 12, 2).unwrap();
        let mut w = ModelWeights::zeros(&cfg);
        w.position_embedding.fill(0.5);
        w.final_norm.fill(1.0);
        for l in &mut w.layers {
            l.attn_norm.fill(1.0);
            l.mlp_norm.fill(1.0);
        }
        w.output_head.row_mut(0).fill(1e3);
        let model = Model::new(cfg, w).unwrap();
        let seq = Sequence {
            vision: vec![vec![0.0; 8]; 2],
            tokens: vec![0; 5],
        };
        let lw = LossWeights::mean(&[true; 5]);
        let (l, g, _) = loss_and_gradients(&model, &seq, &lw).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.tensors().iter().all(|(_, _, d)| d.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn single_token_mask_matches_single_token_loss() {
        let (model, seq) = setup(3);
        let g1 = backward(&model, &seq, &LossWeights::mean(&[false, false, true, false, false, false])).unwrap();
        let g2 = backward(&model, &seq, &LossWeights(vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0])).unwrap();
        assert_eq!(g1, g2);
    }
}
