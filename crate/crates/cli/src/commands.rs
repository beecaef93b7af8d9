use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use mucrasp_core::allocator::{build_plan, Allocation, PivotMode, PruningConfig, PruningPlan, Scoring};
use mucrasp_core::attribution::{
    corpus_pivot_masks, global_attribution, magnitude_scores, pivot_attribution, AttnSlices,
};
use mucrasp_core::calibration::{generate_synthetic_corpus, load_corpus, save_corpus, train, Corpus, TrainOptions};
use mucrasp_core::evaluation::{
    compare_methods, evaluate, perplexity, reports_to_csv, retention_report, rows_to_csv,
    sliding_ablation, ComparisonRow, EvalReport, MethodSpec, REPORT_SCHEMA_VERSION,
};
use mucrasp_core::fsutil::{write_atomic, write_json};
use mucrasp_core::seed::sub_seed;
use mucrasp_core::{apply_prune, load_checkpoint, save_checkpoint, Error, Model, ModelConfig, Precision};

use crate::args::*;

/// Two flags that cannot be combined.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct Conflict(pub String);

fn conflict(msg: impl Into<String>) -> anyhow::Error {
    Conflict(msg.into()).into()
}

fn require_inputs(paths: &[&Path]) -> Result<()> {
    for p in paths {
        if !p.exists() {
            return Err(Error::Io {
                path: p.to_path_buf(),
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "input does not exist"),
            }
            .into());
        }
    }
    Ok(())
}

fn guard_outputs(inputs: &[&Path], outputs: &[&Path]) -> Result<()> {
    for o in outputs {
        let o_abs = o.canonicalize().ok();
        for i in inputs {
            if o == i || (o_abs.is_some() && o_abs == i.canonicalize().ok()) {
                return Err(conflict(format!("output {} would overwrite an input", o.display())));
            }
        }
    }
    Ok(())
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn with_precision(mut model: Model, p: PrecisionArg) -> Model {
    if p == PrecisionArg::F32 {
        model.config.precision = Precision::Single;
        model.weights.round_to_single();
    } else {
        model.config.precision = Precision::Double;
    }
    model
}

fn csv_beside(path: &Path) -> PathBuf {
    path.with_extension("csv")
}

fn report(line: String, outputs: &[&Path]) {
    let paths: Vec<String> = outputs.iter().map(|p| p.display().to_string()).collect();
    println!("{line} -> {}", paths.join(" "));
}

pub fn gen_data(a: GenDataArgs) -> Result<()> {
    let cfg = match &a.model {
        Some(p) => {
            require_inputs(&[p])?;
            load_checkpoint(p)?.config
        }
        None => ModelConfig::toy(),
    };
    let mut corpus = generate_synthetic_corpus(sub_seed(a.seed.seed, "data"), a.n, &cfg)?;
    corpus.seed = a.seed.seed;
    ensure_parent(&a.out)?;
    save_corpus(&corpus, &a.out)?;
    report(format!("gen-data: {} samples (seed {})", corpus.len(), a.seed.seed), &[&a.out]);
    Ok(())
}

#[derive(Serialize)]
struct TrainLog {
    schema_version: u32,
    steps: usize,
    learning_rate: f64,
    batch_size: usize,
    seed: u64,
    sub_seeds: BTreeMap<String, u64>,
    initial_perplexity: f64,
    final_perplexity: f64,
    losses: Vec<f64>,
    moving_average_20: Vec<f64>,
}

pub fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut inputs: Vec<&Path> = vec![&a.data];
    if let Some(m) = &a.model {
        inputs.push(m);
    }
    require_inputs(&inputs)?;
    let log_path = a.out.with_extension("train.json");
    guard_outputs(&inputs, &[&a.out, &log_path])?;
    let seed = a.seed.seed;
    let mut sub_seeds = BTreeMap::new();
    let model = match &a.model {
        Some(p) => load_checkpoint(p)?,
        None => {
            let s = sub_seed(seed, "init");
            sub_seeds.insert("init".into(), s);
            Model::random(ModelConfig::toy(), s)
        }
    };
    let model = with_precision(model, a.precision);
    let corpus = load_corpus(&a.data)?;
    let opts = TrainOptions {
        steps: a.steps,
        learning_rate: a.lr,
        batch_size: 2,
        seed,
    };
    sub_seeds.insert("train".into(), sub_seed(seed, "train"));
    let initial = perplexity(&model, &corpus)?;
    let (trained, rep) = train(&model, &corpus, &opts)?;
    let fin = perplexity(&trained, &corpus)?;
    ensure_parent(&a.out)?;
    save_checkpoint(&trained, &a.out)?;
    let log = TrainLog {
        schema_version: REPORT_SCHEMA_VERSION,
        steps: a.steps,
        learning_rate: a.lr,
        batch_size: 2,
        seed,
        sub_seeds,
        initial_perplexity: initial,
        final_perplexity: fin,
        moving_average_20: rep.moving_average(20),
        losses: rep.losses,
    };
    write_json(&log_path, &log)?;
    report(
        format!("train: {} steps, perplexity {initial:.4} -> {fin:.4}", a.steps),
        &[&a.out, &log_path],
    );
    Ok(())
}

fn pivot_mode(p: PivotArg) -> PivotMode {
    match p {
        PivotArg::Real => PivotMode::Real,
        PivotArg::Random => PivotMode::Random,
        PivotArg::None => PivotMode::None,
    }
}

pub fn score(a: ScoreArgs) -> Result<()> {
    if a.mode != ScoreMode::Pivot {
        if a.window.is_some() {
            return Err(conflict("--window only applies to --mode pivot"));
        }
        if a.pivot.is_some() {
            return Err(conflict("--pivot only applies to --mode pivot"));
        }
    }
    if a.mode == ScoreMode::Magnitude && a.qo_only {
        return Err(conflict("--qo-only does not apply to --mode magnitude"));
    }
    if a.pivot == Some(PivotArg::None) {
        return Err(conflict("--mode pivot needs --pivot real or random"));
    }
    let mut inputs: Vec<&Path> = vec![&a.model];
    if let Some(d) = &a.data {
        inputs.push(d);
    }
    require_inputs(&inputs)?;
    guard_outputs(&inputs, &[&a.out])?;
    let model = load_checkpoint(&a.model)?;
    let slices = if a.qo_only { AttnSlices::QO } else { AttnSlices::QkvO };
    let corpus = || -> Result<Corpus> {
        let d = a.data.as_ref().ok_or_else(|| conflict("--data is required for this mode"))?;
        Ok(load_corpus(d)?)
    };
    let table = match a.mode {
        ScoreMode::Magnitude => magnitude_scores(&model),
        ScoreMode::Global => global_attribution(&model, &corpus()?, slices)?,
        ScoreMode::Pivot => {
            let c = corpus()?;
            let cfg = PruningConfig::default();
            let masks = corpus_pivot_masks(
                &c,
                pivot_mode(a.pivot.unwrap_or(PivotArg::Real)),
                a.window.unwrap_or(cfg.half_width),
                cfg.min_markers,
                a.seed.seed,
            )?;
            pivot_attribution(&model, &c, &masks, slices)?
        }
    };
    ensure_parent(&a.out)?;
    write_json(&a.out, &table.to_json())?;
    report(
        format!("score: {} units ({:?})", table.units.len(), a.mode).to_lowercase(),
        &[&a.out],
    );
    Ok(())
}

fn pruning_config(mode: MethodArg, o: &PruneOpts) -> Result<PruningConfig> {
    let scoring = match mode {
        MethodArg::Mucrasp => Scoring::Mucrasp,
        MethodArg::Taylor => Scoring::Taylor,
        MethodArg::Magnitude => Scoring::Magnitude,
    };
    if scoring != Scoring::Mucrasp {
        let name = scoring.as_str();
        for (flag, set) in [
            ("--window", o.window.is_some()),
            ("--gamma-base", o.gamma_base.is_some()),
            ("--rho", o.rho.is_some()),
            ("--pivot", o.pivot.is_some()),
            ("--no-cmds", o.no_cmds),
        ] {
            if set {
                return Err(conflict(format!("{flag} cannot be combined with --mode {name}")));
            }
        }
    }
    let d = PruningConfig::default();
    let cfg = PruningConfig {
        ratio: o.ratio,
        half_width: o.window.unwrap_or(d.half_width),
        gamma_base: o.gamma_base.unwrap_or(d.gamma_base),
        rho: o.rho.unwrap_or(d.rho),
        pivot_mode: o.pivot.map(pivot_mode).unwrap_or(d.pivot_mode),
        cmds_enabled: !o.no_cmds,
        allocation: match o.allocation {
            AllocationArg::Global => Allocation::Global,
            AllocationArg::Layerwise => Allocation::Layerwise,
        },
        scoring,
        seed: o.seed.seed,
        ..d
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn prune(a: PruneArgs) -> Result<()> {
    let cfg = pruning_config(a.mode, &a.opts)?;
    require_inputs(&[&a.model, &a.data])?;
    let plan_path = a.plan_out.clone().unwrap_or_else(|| a.out.join("plan.json"));
    let model_path = a.model_out.clone().unwrap_or_else(|| a.out.join("pruned.ckpt"));
    let retention_path = a.out.join("retention.json");
    guard_outputs(&[&a.model, &a.data], &[&plan_path, &model_path, &retention_path])?;
    let model = load_checkpoint(&a.model)?;
    let corpus = load_corpus(&a.data)?;
    let plan = build_plan(&model, &corpus, &cfg)?;
    let pruned = with_precision(apply_prune(&model, &plan.keep_set())?, a.precision);
    let retention = retention_report(&plan)?;
    for p in [&plan_path, &model_path, &retention_path] {
        ensure_parent(p)?;
    }
    write_json(&plan_path, &plan.to_json())?;
    save_checkpoint(&pruned, &model_path)?;
    write_json(&retention_path, &retention)?;
    report(
        format!(
            "prune: kept {}/{} prunable parameters ({}, S={})",
            plan.kept_params, plan.prunable_params, plan.method, cfg.ratio
        ),
        &[&plan_path, &model_path, &retention_path],
    );
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let mut inputs: Vec<&Path> = vec![&a.dense, &a.pruned, &a.data];
    if let Some(p) = &a.plan {
        inputs.push(p);
    }
    require_inputs(&inputs)?;
    let csv = csv_beside(&a.out);
    guard_outputs(&inputs, &[&a.out, &csv])?;
    let dense = load_checkpoint(&a.dense)?;
    let pruned = load_checkpoint(&a.pruned)?;
    let corpus = load_corpus(&a.data)?;
    let plan = match &a.plan {
        Some(p) => Some(read_plan(p)?),
        None => None,
    };
    let method = a
        .method
        .clone()
        .or_else(|| plan.as_ref().map(|p| p.method.clone()))
        .unwrap_or_else(|| "pruned".into());
    let mut r = evaluate(&dense, &pruned, &corpus, &method)?;
    if let Some(plan) = &plan {
        r.ratio = Some(plan.config.ratio);
        r.retention = retention_report(plan)?;
    }
    ensure_parent(&a.out)?;
    write_json(&a.out, &r)?;
    write_atomic(&csv, reports_to_csv(std::slice::from_ref(&r)).as_bytes())?;
    report(
        format!(
            "eval: perplexity {:.4} (dense {:.4}), mean KL {:.6} nats",
            r.perplexity, r.dense_perplexity, r.kl.mean_kl
        ),
        &[&a.out, &csv],
    );
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct Ablation {
    schema_version: u32,
    window_len: usize,
    reports: Vec<EvalReport>,
}

pub fn ablate(a: AblateArgs) -> Result<()> {
    require_inputs(&[&a.model, &a.data])?;
    let csv = csv_beside(&a.out);
    guard_outputs(&[&a.model, &a.data], &[&a.out, &csv])?;
    let model = load_checkpoint(&a.model)?;
    let corpus = load_corpus(&a.data)?;
    let reports = sliding_ablation(&model, &corpus, a.window_len)?;
    ensure_parent(&a.out)?;
    write_atomic(&csv, reports_to_csv(&reports).as_bytes())?;
    let n = reports.len();
    write_json(
        &a.out,
        &Ablation {
            schema_version: REPORT_SCHEMA_VERSION,
            window_len: a.window_len,
            reports,
        },
    )?;
    report(format!("ablate: {n} windows of {} layers", a.window_len), &[&a.out, &csv]);
    Ok(())
}

/// Rows keyed by `(method, S)`, shared by `compare` and `report`.
#[derive(Debug, Serialize, Deserialize)]
struct RowTable {
    schema_version: u32,
    rows: Vec<ComparisonRow>,
}

fn write_rows(out: &Path, rows: Vec<ComparisonRow>) -> Result<PathBuf> {
    let csv = csv_beside(out);
    ensure_parent(out)?;
    write_atomic(&csv, rows_to_csv(&rows).as_bytes())?;
    write_json(
        out,
        &RowTable {
            schema_version: REPORT_SCHEMA_VERSION,
            rows,
        },
    )?;
    Ok(csv)
}

pub fn compare(a: CompareArgs) -> Result<()> {
    let base = pruning_config(MethodArg::Mucrasp, &a.opts)?;
    let methods = a
        .methods
        .iter()
        .map(|m| MethodSpec::named(m.trim(), &base))
        .collect::<mucrasp_core::Result<Vec<_>>>()?;
    require_inputs(&[&a.model, &a.data])?;
    guard_outputs(&[&a.model, &a.data], &[&a.out, &csv_beside(&a.out)])?;
    let model = load_checkpoint(&a.model)?;
    let corpus = load_corpus(&a.data)?;
    let rows = compare_methods(&model, &corpus, &methods)?;
    let summary: Vec<String> = rows
        .iter()
        .map(|r| match &r.report {
            Some(rep) => format!("{} KL {:.4}", r.method, rep.kl.mean_kl),
            None => format!("{} failed", r.method),
        })
        .collect();
    let csv = write_rows(&a.out, rows)?;
    report(format!("compare: {}", summary.join(", ")), &[&a.out, &csv]);
    Ok(())
}

fn read_json(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn read_plan(path: &Path) -> Result<PruningPlan> {
    PruningPlan::from_json(read_json(path)?).with_context(|| format!("reading plan {}", path.display()))
}

fn check_version(v: &Value, path: &Path) -> Result<()> {
    let found = v.get("schema_version").and_then(Value::as_u64).unwrap_or(0);
    if found != REPORT_SCHEMA_VERSION as u64 {
        return Err(anyhow::Error::from(Error::SchemaVersion {
            found,
            expected: REPORT_SCHEMA_VERSION as u64,
        })
        .context(format!("{}", path.display())));
    }
    Ok(())
}

pub fn report_cmd(a: ReportArgs) -> Result<()> {
    if a.plan.is_empty() && a.eval.is_empty() {
        return Err(conflict("report needs at least one --plan or --eval"));
    }
    let inputs: Vec<&Path> = a.plan.iter().chain(&a.eval).map(PathBuf::as_path).collect();
    require_inputs(&inputs)?;
    guard_outputs(&inputs, &[&a.out, &csv_beside(&a.out)])?;
    let plans = a.plan.iter().map(|p| read_plan(p)).collect::<Result<Vec<_>>>()?;
    let mut rows: Vec<ComparisonRow> = Vec::new();
    for path in &a.eval {
        let v = read_json(path)?;
        check_version(&v, path)?;
        if v.get("rows").is_some() {
            let t: RowTable = serde_json::from_value(v)?;
            rows.extend(t.rows);
        } else if v.get("reports").is_some() {
            let t: Ablation = serde_json::from_value(v)?;
            rows.extend(t.reports.into_iter().map(ComparisonRow::from_report));
        } else {
            let r: EvalReport = serde_json::from_value(v)?;
            rows.push(ComparisonRow::from_report(r));
        }
    }
    for plan in &plans {
        let key = (plan.method.as_str(), Some(plan.config.ratio));
        match rows.iter_mut().find(|r| (r.method.as_str(), r.ratio) == key) {
            Some(row) => {
                row.kept_params.get_or_insert(plan.kept_params);
                row.budget.get_or_insert(plan.budget);
            }
            None => rows.push(ComparisonRow {
                method: plan.method.clone(),
                ratio: Some(plan.config.ratio),
                kept_params: Some(plan.kept_params),
                budget: Some(plan.budget),
                report: None,
                error: None,
            }),
        }
    }
    let n = rows.len();
    let csv = write_rows(&a.out, rows)?;
    report(format!("report: {n} row(s)"), &[&a.out, &csv]);
    Ok(())
}
