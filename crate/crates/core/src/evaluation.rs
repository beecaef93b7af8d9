//! Quality of a pruned model against its dense parent: masked perplexity,
//! per-token KL divergence, retention, MLP zero-out ablations and
//! side-by-side method comparison.

use std::time::Instant;

use ndarray::ArrayView1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::allocator::{build_plan, Allocation, PivotMode, PruningConfig, PruningPlan, Retention, Scoring};
use crate::calibration::Corpus;
use crate::error::{Error, Result};
use crate::model::{apply_prune, forward, masked_nll, LossWeights, Model};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const KL_BINS: usize = 64;
pub const KL_MAX: f64 = 16.0;

/// exp of the mean NLL over every response token in the corpus.
pub fn perplexity(model: &Model, corpus: &Corpus) -> Result<f64> {
    let (nll, count) = nll_sum(model, corpus)?;
    Ok((nll / count as f64).exp())
}

/// Summed response NLL and the number of response tokens.
pub fn nll_sum(model: &Model, corpus: &Corpus) -> Result<(f64, usize)> {
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("empty corpus".into()));
    }
    let parts: Vec<Result<(f64, usize)>> = corpus
        .samples
        .par_iter()
        .map(|s| {
            let seq = s.sequence();
            let trace = forward(model, &seq)?;
            let n = s.loss_mask.iter().filter(|&&m| m).count();
            if n == 0 {
                return Ok((0.0, 0));
            }
            Ok((masked_nll(&trace.logits, &seq, &LossWeights::sum(&s.loss_mask))?, n))
        })
        .collect();
    let (mut total, mut count) = (0.0, 0);
    for p in parts {
        let (v, n) = p?;
        total += v;
        count += n;
    }
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    Ok((total, count))
}

fn log_softmax(row: ArrayView1<f64>) -> Vec<f64> {
    let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|&v| v - lse).collect()
}

/// D_KL(softmax(p) ∥ softmax(q)) in nats, clamped at 0 against rounding.
pub fn position_kl(p_logits: ArrayView1<f64>, q_logits: ArrayView1<f64>) -> f64 {
    let lp = log_softmax(p_logits);
    let lq = log_softmax(q_logits);
    let kl: f64 = lp
        .iter()
        .zip(&lq)
        .map(|(&a, &b)| if a == b { 0.0 } else { a.exp() * (a - b) })
        .sum();
    if kl.is_nan() {
        kl
    } else {
        kl.max(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlReport {
    pub mean_kl: f64,
    /// 64 equal bins over [0, 16) nats.
    pub histogram: Vec<u64>,
    /// Values ≥ 16 nats.
    pub overflow: u64,
    pub total_positions: usize,
    pub dropped_positions: usize,
}

fn bin_of(kl: f64) -> Option<usize> {
    let b = (kl / KL_MAX * KL_BINS as f64).floor() as usize;
    (b < KL_BINS).then_some(b)
}

/// KL at every position that predicts a response token.
pub fn kl_report(dense: &Model, pruned: &Model, corpus: &Corpus) -> Result<KlReport> {
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("empty corpus".into()));
    }
    let per_sample: Vec<Result<Vec<f64>>> = corpus
        .samples
        .par_iter()
        .map(|s| {
            let seq = s.sequence();
            let a = forward(dense, &seq)?.logits;
            let b = forward(pruned, &seq)?.logits;
            Ok(s.loss_mask
                .iter()
                .enumerate()
                .filter(|(_, &m)| m)
                .map(|(i, _)| {
                    let r = seq.predicting_row(i);
                    position_kl(a.row(r), b.row(r))
                })
                .collect())
        })
        .collect();
    let mut histogram = vec![0u64; KL_BINS];
    let (mut overflow, mut total, mut dropped, mut sum) = (0u64, 0usize, 0usize, 0.0);
    for sample in per_sample {
        for kl in sample? {
            total += 1;
            if !kl.is_finite() {
                dropped += 1;
                continue;
            }
            sum += kl;
            match bin_of(kl) {
                Some(b) => histogram[b] += 1,
                None => overflow += 1,
            }
        }
    }
    let valid = total - dropped;
    if valid == 0 {
        return Err(Error::NoValidPositions);
    }
    Ok(KlReport {
        mean_kl: sum / valid as f64,
        histogram,
        overflow,
        total_positions: total,
        dropped_positions: dropped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub runtime_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub method: String,
    pub ratio: Option<f64>,
    pub window_start: Option<usize>,
    pub window_len: Option<usize>,
    pub perplexity: f64,
    pub dense_perplexity: f64,
    pub kl: KlReport,
    pub retention: Vec<Retention>,
    pub params: u64,
    pub dense_params: u64,
    pub metadata: ReportMetadata,
}

impl EvalReport {
    pub fn mean_kl(&self) -> f64 {
        self.kl.mean_kl
    }

    /// Equal in everything except the runtime metadata.
    pub fn same_results(&self, other: &EvalReport) -> bool {
        let mut a = self.clone();
        a.metadata = other.metadata.clone();
        &a == other
    }
}

/// Perplexity of both models and the KL between them.
pub fn evaluate(dense: &Model, pruned: &Model, corpus: &Corpus, method: &str) -> Result<EvalReport> {
    let start = Instant::now();
    let dense_perplexity = perplexity(dense, corpus)?;
    let ppl = perplexity(pruned, corpus)?;
    let kl = kl_report(dense, pruned, corpus)?;
    Ok(EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        method: method.into(),
        ratio: None,
        window_start: None,
        window_len: None,
        perplexity: ppl,
        dense_perplexity,
        kl,
        retention: Vec::new(),
        params: pruned.weights.param_count(),
        dense_params: dense.weights.param_count(),
        metadata: ReportMetadata {
            runtime_seconds: start.elapsed().as_secs_f64(),
        },
    })
}

/// Kept fraction per `(layer, kind)`, with minimum retention checked.
pub fn retention_report(plan: &PruningPlan) -> Result<Vec<Retention>> {
    let r = plan.retention()?;
    if let Some(bad) = r.iter().find(|x| x.kept < x.min_keep) {
        return Err(Error::InvalidArgument(format!(
            "layer {} {:?} keeps {} of {}, below minimum {}",
            bad.layer, bad.kind, bad.kept, bad.total, bad.min_keep
        )));
    }
    Ok(r)
}

/// Copy of `model` with the MLP weights of layers `start..start+len` zeroed.
pub fn zero_mlp_layers(model: &Model, start: usize, len: usize) -> Result<Model> {
    let n = model.config.n_layers;
    if start + len > n || (len > 0 && start >= n) {
        return Err(Error::InvalidArgument(format!(
            "window {start}..{} outside {n} layers",
            start + len
        )));
    }
    let mut out = model.clone();
    for lw in &mut out.weights.layers[start..start + len] {
        lw.w_gate.fill(0.0);
        lw.w_up.fill(0.0);
        lw.w_down.fill(0.0);
    }
    Ok(out)
}

pub fn zero_out_ablation(model: &Model, corpus: &Corpus, start: usize, len: usize) -> Result<EvalReport> {
    let ablated = zero_mlp_layers(model, start, len)?;
    let mut r = evaluate(model, &ablated, corpus, "mlp-zero-out")?;
    r.window_start = Some(start);
    r.window_len = Some(len);
    r.params = model.weights.param_count();
    Ok(r)
}

/// One zero-out report per window position, sliding by one layer.
pub fn sliding_ablation(model: &Model, corpus: &Corpus, len: usize) -> Result<Vec<EvalReport>> {
    let n = model.config.n_layers;
    if len == 0 || len > n {
        return Err(Error::InvalidArgument(format!(
            "window length {len} must lie in 1..={n}"
        )));
    }
    (0..=n - len)
        .map(|s| zero_out_ablation(model, corpus, s, len))
        .collect()
}

/// A named pruning configuration to compare.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub name: String,
    pub config: PruningConfig,
}

impl MethodSpec {
    /// Names: `mucrasp`, `taylor`, `magnitude`, plus the variants
    /// `mucrasp-random-pivots`, `mucrasp-no-pivots`, `mucrasp-no-cmds`,
    /// `mucrasp-layerwise`.
    pub fn named(name: &str, base: &PruningConfig) -> Result<Self> {
        let mut c = base.clone();
        match name {
            "mucrasp" => c.scoring = Scoring::Mucrasp,
            "taylor" => c.scoring = Scoring::Taylor,
            "magnitude" => c.scoring = Scoring::Magnitude,
            "mucrasp-random-pivots" => c.pivot_mode = PivotMode::Random,
            "mucrasp-no-pivots" => c.pivot_mode = PivotMode::None,
            "mucrasp-no-cmds" => c.cmds_enabled = false,
            "mucrasp-layerwise" => c.allocation = Allocation::Layerwise,
            other => return Err(Error::InvalidArgument(format!("unknown method {other}"))),
        }
        Ok(MethodSpec {
            name: name.into(),
            config: c,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: String,
    pub ratio: Option<f64>,
    pub kept_params: Option<u64>,
    pub budget: Option<u64>,
    pub report: Option<EvalReport>,
    pub error: Option<String>,
}

/// Plan, prune and evaluate one method.
pub fn run_method(model: &Model, corpus: &Corpus, spec: &MethodSpec) -> Result<(PruningPlan, EvalReport)> {
    let start = Instant::now();
    let plan = build_plan(model, corpus, &spec.config)?;
    let pruned = apply_prune(model, &plan.keep_set())?;
    let mut r = evaluate(model, &pruned, corpus, &spec.name)?;
    r.ratio = Some(spec.config.ratio);
    r.retention = retention_report(&plan)?;
    r.metadata.runtime_seconds = start.elapsed().as_secs_f64();
    Ok((plan, r))
}

/// Every method on identical inputs; a failing method yields a row with its error.
pub fn compare_methods(model: &Model, corpus: &Corpus, methods: &[MethodSpec]) -> Result<Vec<ComparisonRow>> {
    if methods.is_empty() {
        return Err(Error::InvalidArgument("no methods to compare".into()));
    }
    Ok(methods
        .iter()
        .map(|m| match run_method(model, corpus, m) {
            Ok((plan, r)) => ComparisonRow {
                method: m.name.clone(),
                ratio: Some(m.config.ratio),
                kept_params: Some(plan.kept_params),
                budget: Some(plan.budget),
                report: Some(r),
                error: None,
            },
            Err(e) => ComparisonRow {
                method: m.name.clone(),
                ratio: Some(m.config.ratio),
                kept_params: None,
                budget: None,
                report: None,
                error: Some(e.to_string()),
            },
        })
        .collect())
}

pub const CSV_HEADER: &str = "method,ratio,window_start,window_len,perplexity,dense_perplexity,mean_kl,dropped_positions,total_positions,params,kept_params,budget,error";

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl ComparisonRow {
    pub fn from_report(report: EvalReport) -> Self {
        ComparisonRow {
            method: report.method.clone(),
            ratio: report.ratio,
            kept_params: None,
            budget: None,
            report: Some(report),
            error: None,
        }
    }

    pub fn to_csv(&self) -> String {
        let r = self.report.as_ref();
        [
            self.method.clone(),
            opt(self.ratio),
            opt(r.and_then(|r| r.window_start)),
            opt(r.and_then(|r| r.window_len)),
            opt(r.map(|r| r.perplexity)),
            opt(r.map(|r| r.dense_perplexity)),
            opt(r.map(|r| r.kl.mean_kl)),
            opt(r.map(|r| r.kl.dropped_positions)),
            opt(r.map(|r| r.kl.total_positions)),
            opt(r.map(|r| r.params)),
            opt(self.kept_params),
            opt(self.budget),
            self.error.as_deref().unwrap_or("").replace([',', '\n'], ";"),
        ]
        .join(",")
    }
}

/// CSV summary, one line per row.
pub fn rows_to_csv(rows: &[ComparisonRow]) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for row in rows {
        out.push_str(&row.to_csv());
        out.push('\n');
    }
    out
}

pub fn reports_to_csv(reports: &[EvalReport]) -> String {
    let rows: Vec<_> = reports.iter().cloned().map(ComparisonRow::from_report).collect();
    rows_to_csv(&rows)
}
