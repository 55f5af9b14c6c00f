//! Command implementations behind the `porofno` binary. Every command reads
//! its inputs, runs the core pipeline and writes its artifacts atomically,
//! together with an echo of the fully resolved run configuration.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use log::{info, warn};
use porofno_core::fno_model::{Head, ModelParams};
use porofno_core::io::{self, RunConfig};
use porofno_core::porous_gen::{generate_dataset, LabeledSample};
use porofno_core::stokes_lbm::solve_permeability;
use porofno_core::train_engine::{
    fit, loss_csv, mse_loss, predict, r2_score, split_by_size, EdgeContexts, EpochRecord, Example, SizeNormalizer,
};
use porofno_core::{Error, Result};
use rayon::prelude::*;
use serde::Serialize;

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "PORofNO_THREADS";

pub const CHECKPOINT_BEST: &str = "checkpoint_best.pfnc";
pub const CHECKPOINT_FINAL: &str = "checkpoint_final.pfnc";
pub const LOSS_CSV: &str = "loss.csv";
pub const SUMMARY_JSON: &str = "summary.json";
pub const RESOLVED_CONFIG: &str = "resolved_config.json";
pub const METRICS_JSON: &str = "metrics.json";
pub const SCATTER_CSV: &str = "scatter.csv";
pub const REPORT_CSV: &str = "report.csv";

/// Process exit code for a failed command: 2 for configuration errors,
/// 3 for data and format errors, 4 for numerical divergence.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::GridTooSmall { .. } => 2,
        Error::Divergence { .. } => 4,
        _ => 3,
    }
}

/// Worker cap from [`THREADS_ENV`], if set.
pub fn thread_cap() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(Error::Config(format!("{THREADS_ENV}: {e}"))),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(Error::Config(format!(
                "{THREADS_ENV} must be a positive integer, got {v:?}"
            ))),
        },
    }
}

fn refuse_existing(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::Config(format!(
            "{} already exists; pass --force to overwrite",
            path.display()
        )));
    }
    Ok(())
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => Ok(std::fs::create_dir_all(dir)?),
        _ => Ok(()),
    }
}

/// `dir/stem.suffix` next to a file output.
pub fn sidecar_path(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn write_config(path: &Path, cfg: &RunConfig) -> Result<()> {
    io::write_atomic(path, cfg.to_json().as_bytes())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    io::write_atomic(path, text.as_bytes())
}

fn write_csv<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<()> {
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        w.serialize(row).map_err(csv_err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    io::write_atomic(path, &bytes)
}

/// Porosity statistics of one size group.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PorositySummary {
    pub n: usize,
    pub count: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl PorositySummary {
    fn of(n: usize, samples: &[LabeledSample]) -> Self {
        let values = samples.iter().map(|s| s.porosity);
        Self {
            n,
            count: samples.len(),
            mean: values.clone().sum::<f64>() / samples.len() as f64,
            min: values.clone().fold(f64::INFINITY, f64::min),
            max: values.fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

/// Generate the unlabeled corpus described by `cfg.gen` and `cfg.corpus`.
pub fn cmd_gen(cfg: &RunConfig, out: &Path, force: bool) -> Result<Vec<PorositySummary>> {
    cfg.validate()?;
    refuse_existing(out, force)?;
    let sizes = &cfg.corpus.sizes;
    if sizes.is_empty() {
        return Err(Error::Config("corpus.sizes is empty".into()));
    }
    if sizes.iter().collect::<BTreeSet<_>>().len() != sizes.len() {
        return Err(Error::Config(format!("corpus.sizes {sizes:?} contains duplicates")));
    }
    for &n in sizes {
        cfg.model.check_edge(n)?;
    }
    let mut samples = Vec::with_capacity(sizes.len() * cfg.corpus.count_per_size);
    let mut summary = Vec::with_capacity(sizes.len());
    for &n in sizes {
        info!("generating {} samples at n = {n}", cfg.corpus.count_per_size);
        let group = generate_dataset(&cfg.gen.with_edge(n), cfg.corpus.count_per_size)?;
        summary.push(PorositySummary::of(n, &group));
        samples.extend(group);
    }
    ensure_parent(out)?;
    io::write_dataset(out, &samples)?;
    write_config(&sidecar_path(out, RESOLVED_CONFIG), cfg)?;
    Ok(summary)
}

/// Outcome of one lattice Boltzmann solve.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SolveRecord {
    pub index: usize,
    pub steps: u64,
    pub converged: bool,
}

/// Label every sample of `input` with its lattice Boltzmann permeability.
/// Solves run in parallel across samples; the per-sample step counts go to
/// a `.solve.csv` sidecar next to `out`.
pub fn cmd_solve(cfg: &RunConfig, input: &Path, out: &Path, force: bool) -> Result<Vec<SolveRecord>> {
    cfg.lbm.validate()?;
    refuse_existing(out, force)?;
    let mut samples = io::read_dataset(input)?;
    if samples.is_empty() {
        return Err(Error::Data(format!("{} holds no samples", input.display())));
    }
    info!("solving {} samples", samples.len());
    let results = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            solve_permeability(&s.voxels, &cfg.lbm).map_err(|e| match e {
                Error::Divergence { step, msg } => Error::Divergence {
                    step,
                    msg: format!("sample {i}: {msg}"),
                },
                other => other,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut records = Vec::with_capacity(results.len());
    for (i, (s, r)) in samples.iter_mut().zip(&results).enumerate() {
        if !r.k_millidarcy.is_finite() {
            return Err(Error::Divergence {
                step: r.steps,
                msg: format!("sample {i}: permeability {}", r.k_millidarcy),
            });
        }
        if !r.converged {
            warn!("sample {i} did not converge within {} steps", r.steps);
        }
        s.permeability = r.k_millidarcy;
        records.push(SolveRecord {
            index: i,
            steps: r.steps,
            converged: r.converged,
        });
    }
    ensure_parent(out)?;
    io::write_dataset(out, &samples)?;
    write_csv(
        &sidecar_path(out, "solve.csv"),
        &["index", "steps", "converged"],
        &records,
    )?;
    write_config(&sidecar_path(out, RESOLVED_CONFIG), cfg)?;
    Ok(records)
}

/// Coefficient of determination of one size group; `None` when undefined.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SizeScore {
    pub n: usize,
    pub count: usize,
    pub r2: Option<f64>,
}

fn per_size_scores(edges: &[usize], truths: &[f64], preds: &[f64]) -> Vec<SizeScore> {
    let mut groups: BTreeMap<usize, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for ((&n, &t), &p) in edges.iter().zip(truths).zip(preds) {
        let g = groups.entry(n).or_default();
        g.0.push(t);
        g.1.push(p);
    }
    groups
        .into_iter()
        .map(|(n, (t, p))| SizeScore {
            n,
            count: t.len(),
            r2: r2_score(&t, &p).ok(),
        })
        .collect()
}

/// Physical-unit predictions for `samples` under `params`.
fn predict_millidarcy(samples: &[&LabeledSample], params: &ModelParams, norm: &SizeNormalizer) -> Result<Vec<f64>> {
    let examples: Vec<Example> = samples
        .iter()
        .enumerate()
        .map(|(id, s)| Example {
            id,
            voxels: &s.voxels,
            target: 0.0,
        })
        .collect();
    let ctxs = EdgeContexts::for_examples(params.config(), &examples)?;
    predict(&examples, params, &ctxs)?
        .into_iter()
        .zip(samples)
        .map(|(p, s)| norm.denormalize_any(p, s.edge()))
        .collect()
}

fn require_labeled(samples: &[LabeledSample]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Data("dataset is empty".into()));
    }
    let missing = samples.iter().filter(|s| !s.is_labeled()).count();
    if missing > 0 {
        return Err(Error::Data(format!(
            "{missing} of {} samples are unlabeled; run `porofno solve` first",
            samples.len()
        )));
    }
    Ok(())
}

/// Headline numbers of a training run, written as `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainSummary {
    pub head: Head,
    pub parameter_count: usize,
    pub epochs: usize,
    pub best_epoch: usize,
    pub train_count: usize,
    pub val_count: usize,
    pub test_count: usize,
    pub train_loss_final: Option<f64>,
    pub val_loss_final: Option<f64>,
    pub best_val_loss: Option<f64>,
    /// Test-split R² of the best checkpoint, millidarcy.
    pub test_r2: Option<f64>,
    /// Test-split R² of the final parameters, millidarcy.
    pub test_r2_final: Option<f64>,
    pub test_per_size: Vec<SizeScore>,
}

/// Train on `data` and write checkpoints, loss curve and summary to `out_dir`.
pub fn cmd_train(cfg: &RunConfig, data: &Path, out_dir: &Path) -> Result<TrainSummary> {
    let samples = io::read_dataset(data)?;
    train_on(cfg, &samples, out_dir)
}

/// [`cmd_train`] on samples already in memory.
pub fn train_on(cfg: &RunConfig, samples: &[LabeledSample], out_dir: &Path) -> Result<TrainSummary> {
    cfg.validate()?;
    require_labeled(samples)?;
    let edges: Vec<usize> = samples.iter().map(LabeledSample::edge).collect();
    for &n in edges.iter().collect::<BTreeSet<_>>() {
        cfg.model.check_edge(n)?;
    }
    let splits = split_by_size(&edges, cfg.train.seed);
    if splits.train.is_empty() || splits.val.is_empty() {
        return Err(Error::Data(format!(
            "{} samples leave an empty training or validation split; each size needs at least 10",
            samples.len()
        )));
    }
    let norm = SizeNormalizer::fit(splits.train.iter().map(|&i| (edges[i], samples[i].permeability)))?;
    let examples = |idx: &[usize]| -> Result<Vec<Example>> {
        idx.iter()
            .map(|&i| {
                Ok(Example {
                    id: i,
                    voxels: &samples[i].voxels,
                    target: norm.normalize(samples[i].permeability, edges[i])?,
                })
            })
            .collect()
    };
    let train = examples(&splits.train)?;
    let val = examples(&splits.val)?;
    info!(
        "training {:?} head on {} samples ({} validation, {} test)",
        cfg.model.head,
        train.len(),
        val.len(),
        splits.test.len()
    );

    let init = ModelParams::init(&cfg.model, cfg.train.seed)?;
    let parameter_count = init.count();
    let every = (cfg.train.epochs / 20).max(1);
    let outcome = fit(&train, &val, init, &cfg.train, |r: &EpochRecord| {
        if r.epoch.is_multiple_of(every) || r.epoch == 1 {
            info!(
                "epoch {:>5}  train {:.6e}  val {:.6e}",
                r.epoch, r.train_loss, r.val_loss
            );
        }
    })?;

    std::fs::create_dir_all(out_dir)?;
    io::write_checkpoint(&out_dir.join(CHECKPOINT_BEST), &outcome.best, &norm)?;
    io::write_checkpoint(&out_dir.join(CHECKPOINT_FINAL), &outcome.last, &norm)?;
    io::write_atomic(&out_dir.join(LOSS_CSV), loss_csv(&outcome.history).as_bytes())?;
    write_config(&out_dir.join(RESOLVED_CONFIG), cfg)?;

    let test: Vec<&LabeledSample> = splits.test.iter().map(|&i| &samples[i]).collect();
    let truths: Vec<f64> = test.iter().map(|s| s.permeability).collect();
    let test_edges: Vec<usize> = test.iter().map(|s| s.edge()).collect();
    let (test_r2, test_r2_final, test_per_size) = if test.is_empty() {
        (None, None, Vec::new())
    } else {
        let best = predict_millidarcy(&test, &outcome.best, &norm)?;
        let last = predict_millidarcy(&test, &outcome.last, &norm)?;
        (
            r2_score(&truths, &best).ok(),
            r2_score(&truths, &last).ok(),
            per_size_scores(&test_edges, &truths, &best),
        )
    };
    let last = outcome.history.last();
    let summary = TrainSummary {
        head: cfg.model.head,
        parameter_count,
        epochs: outcome.history.len(),
        best_epoch: outcome.best_epoch,
        train_count: train.len(),
        val_count: val.len(),
        test_count: test.len(),
        train_loss_final: last.map(|r| r.train_loss),
        val_loss_final: last.map(|r| r.val_loss),
        best_val_loss: outcome.history.iter().map(|r| r.val_loss).reduce(f64::min),
        test_r2,
        test_r2_final,
        test_per_size,
    };
    write_json(&out_dir.join(SUMMARY_JSON), &summary)?;
    Ok(summary)
}

/// Overall and per-size accuracy of a checkpoint, written as `metrics.json`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub count: usize,
    pub r2: Option<f64>,
    /// Mean squared error, mD².
    pub mse: f64,
    pub per_size: Vec<SizeScore>,
    /// Sizes without a training range; their predictions use an interpolated one.
    pub unseen_sizes: Vec<usize>,
}

#[derive(Serialize)]
struct ScatterRow {
    n: usize,
    k_truth_md: f64,
    k_pred_md: f64,
}

/// Evaluate `checkpoint` on every sample of `data`; writes `metrics.json`
/// and `scatter.csv` to `out_dir`.
pub fn cmd_eval(checkpoint: &Path, data: &Path, out_dir: &Path) -> Result<EvalReport> {
    let (params, norm) = io::read_checkpoint(checkpoint)?;
    let samples = io::read_dataset(data)?;
    eval_on(&params, &norm, &samples, out_dir)
}

/// [`cmd_eval`] on a checkpoint and samples already in memory.
pub fn eval_on(
    params: &ModelParams,
    norm: &SizeNormalizer,
    samples: &[LabeledSample],
    out_dir: &Path,
) -> Result<EvalReport> {
    require_labeled(samples)?;
    let sizes: BTreeSet<usize> = samples.iter().map(LabeledSample::edge).collect();
    for &n in &sizes {
        params.config().check_edge(n)?;
    }
    let registered: BTreeSet<usize> = norm.sizes().collect();
    let unseen_sizes: Vec<usize> = sizes.difference(&registered).copied().collect();
    if !unseen_sizes.is_empty() {
        info!("sizes {unseen_sizes:?} were not seen in training; using interpolated normalization ranges");
    }
    let refs: Vec<&LabeledSample> = samples.iter().collect();
    let preds = predict_millidarcy(&refs, params, norm)?;
    let truths: Vec<f64> = samples.iter().map(|s| s.permeability).collect();
    let edges: Vec<usize> = samples.iter().map(LabeledSample::edge).collect();
    let report = EvalReport {
        count: samples.len(),
        r2: r2_score(&truths, &preds).ok(),
        mse: mse_loss(&preds, &truths)?,
        per_size: per_size_scores(&edges, &truths, &preds),
        unseen_sizes,
    };
    let rows: Vec<ScatterRow> = edges
        .iter()
        .zip(&truths)
        .zip(&preds)
        .map(|((&n, &t), &p)| ScatterRow {
            n,
            k_truth_md: t,
            k_pred_md: p,
        })
        .collect();
    std::fs::create_dir_all(out_dir)?;
    write_json(&out_dir.join(METRICS_JSON), &report)?;
    write_csv(&out_dir.join(SCATTER_CSV), &["n", "k_truth_mD", "k_pred_mD"], &rows)?;
    Ok(report)
}

/// One row of the head comparison report.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompareRow {
    pub head: String,
    pub test_r2: Option<f64>,
    pub train_loss_final: Option<f64>,
    pub val_loss_final: Option<f64>,
}

/// Train the static-pool and adaptive-pool heads on identical data, seeds
/// and budgets, each into its own subdirectory, and write `report.csv`.
pub fn cmd_compare(cfg: &RunConfig, data: &Path, out_dir: &Path) -> Result<Vec<CompareRow>> {
    let samples = io::read_dataset(data)?;
    compare_on(cfg, &samples, out_dir)
}

/// [`cmd_compare`] on samples already in memory.
pub fn compare_on(cfg: &RunConfig, samples: &[LabeledSample], out_dir: &Path) -> Result<Vec<CompareRow>> {
    let runs: Vec<(&str, RunConfig)> = [
        ("static", Head::StaticChannelPool),
        ("adaptive", Head::AdaptiveSpatialPool),
    ]
    .into_iter()
    .map(|(name, head)| {
        let mut c = cfg.clone();
        c.model.head = head;
        (name, c)
    })
    .collect();
    for (_, c) in &runs {
        c.validate()?;
        for n in samples.iter().map(LabeledSample::edge).collect::<BTreeSet<_>>() {
            c.model.check_edge(n)?;
        }
    }
    std::fs::create_dir_all(out_dir)?;
    write_config(&out_dir.join(RESOLVED_CONFIG), cfg)?;
    let mut rows = Vec::with_capacity(runs.len());
    for (name, c) in &runs {
        let s = train_on(c, samples, &out_dir.join(name))?;
        rows.push(CompareRow {
            head: name.to_string(),
            test_r2: s.test_r2,
            train_loss_final: s.train_loss_final,
            val_loss_final: s.val_loss_final,
        });
    }
    write_csv(
        &out_dir.join(REPORT_CSV),
        &["head", "test_R2", "train_loss_final", "val_loss_final"],
        &rows,
    )?;
    Ok(rows)
}
