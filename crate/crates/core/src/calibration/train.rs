use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::Corpus;
use crate::error::{Error, Result};
use crate::model::{loss_and_gradients, Model, Precision};
use crate::model::LossWeights;
use crate::seed::{rng, sub_seed};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            steps: 500,
            learning_rate: 0.1,
            batch_size: 2,
            seed: crate::seed::DEFAULT_SEED,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean batch loss at every step, before the update.
    pub losses: Vec<f64>,
}

impl TrainReport {
    /// Trailing moving average of the step losses.
    pub fn moving_average(&self, window: usize) -> Vec<f64> {
        self.losses
            .windows(window.max(1))
            .map(|w| w.iter().sum::<f64>() / w.len() as f64)
            .collect()
    }
}

/// Plain minibatch SGD on the token-mean response NLL.
pub fn train(model: &Model, corpus: &Corpus, opts: &TrainOptions) -> Result<(Model, TrainReport)> {
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("cannot train on an empty corpus".into()));
    }
    if opts.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be >= 1".into()));
    }
    let mut model = model.clone();
    let mut r = rng(sub_seed(opts.seed, "train"));
    let mut order: Vec<usize> = Vec::new();
    let mut losses = Vec::with_capacity(opts.steps);
    let batch = opts.batch_size.min(corpus.len());
    for step in 0..opts.steps {
        if order.len() < batch {
            let mut epoch: Vec<usize> = (0..corpus.len()).collect();
            epoch.shuffle(&mut r);
            order.extend(epoch);
        }
        let picked: Vec<usize> = order.drain(..batch).collect();
        let results = picked
            .par_iter()
            .map(|&i| {
                let s = &corpus.samples[i];
                loss_and_gradients(&model, &s.sequence(), &LossWeights::mean(&s.loss_mask))
            })
            .collect::<Vec<_>>();
        let mut batch_loss = 0.0;
        let scale = opts.learning_rate / batch as f64;
        for res in results {
            let (l, g, _) = res.map_err(|e| match e {
                Error::NonFinite(what) => Error::NonFinite(format!("{what} at step {step}")),
                other => other,
            })?;
            batch_loss += l / batch as f64;
            model.weights.add_scaled(&g, -scale);
        }
        if !batch_loss.is_finite() || !model.weights.all_finite() {
            return Err(Error::NonFinite(format!("training diverged at step {step}")));
        }
        if model.config.precision == Precision::Single {
            model.weights.round_to_single();
        }
        losses.push(batch_loss);
    }
    Ok((model, TrainReport { losses }))
}
