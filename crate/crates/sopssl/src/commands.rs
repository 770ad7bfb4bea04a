//! Implementations of the `sopssl` subcommands.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use sopssl_core::data::{generate, Dataset, SplitCounts, SyntheticSpec};
use sopssl_core::model::{GrlSpec, Model};
use sopssl_core::oracle::linalg::{frobenius, matrix_sqrt_exact, random_spd};
use sopssl_core::oracle::{model_gradcheck, LayerReport};
use sopssl_core::sop::{approx_sqrt, SopConfig};
use sopssl_core::train::{
    check_lambda_grid, check_rates, evaluate, lambda_point, rate_point, run_with_clock, RunOutput, TrainConfig,
};
use sopssl_core::Tensor;

use crate::artifacts::{self, write_json, write_rows};
use crate::checkpoint;
use crate::config::{ensure_dir, RunConfig};
use crate::dataset_io;
use crate::error::{CliError, CliResult};

/// Loads `data` when given, otherwise generates the configured synthetic set.
pub fn dataset_for(cfg: &RunConfig, data: Option<&Path>) -> CliResult<Dataset> {
    let ds = match data {
        Some(dir) => dataset_io::load(dir)?,
        None => generate(&cfg.data)?,
    };
    check_image_shape(cfg, &ds)?;
    Ok(ds)
}

fn check_image_shape(cfg: &RunConfig, ds: &Dataset) -> CliResult<()> {
    if ds.image_shape != cfg.extractor.input {
        return Err(CliError::config(format!(
            "extractor input {:?} does not match dataset images {:?}",
            cfg.extractor.input, ds.image_shape
        )));
    }
    Ok(())
}

fn prepare(cfg: &RunConfig) -> CliResult<()> {
    cfg.validate()?;
    ensure_dir(&cfg.out_dir)?;
    cfg.write_resolved(&cfg.out_dir)
}

pub fn generate_cmd(cfg: &RunConfig) -> CliResult<dataset_io::Manifest> {
    prepare(cfg)?;
    let ds = generate(&cfg.data)?;
    dataset_io::save(&ds, Some(&cfg.data), &cfg.out_dir)
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub mode: String,
    pub iterations_run: usize,
    pub best_iteration: usize,
    pub best_val_acc: f64,
    pub selected_test_acc: f64,
    pub final_test_acc: f64,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
}

pub fn train_cmd(cfg: &RunConfig, data: Option<&Path>) -> CliResult<TrainSummary> {
    prepare(cfg)?;
    let ds = dataset_for(cfg, data)?;
    let start = Instant::now();
    let clock = move || start.elapsed().as_secs_f64() * 1e3;
    let out: RunOutput = run_with_clock(&ds, &cfg.model(), &cfg.train, &clock)?;
    let dir = &cfg.out_dir;
    artifacts::write_metrics(&dir.join(artifacts::METRICS_CSV), &out.records)?;
    let last_it = out.records.last().map_or(0, |r| r.iteration);
    checkpoint::save(&out.best_model, out.best_iteration, &dir.join("best"))?;
    checkpoint::save(&out.model, last_it, &dir.join("final"))?;
    let summary = TrainSummary {
        mode: cfg.train.mode.name().into(),
        iterations_run: last_it,
        best_iteration: out.best_iteration,
        best_val_acc: out.best_val_acc,
        selected_test_acc: out.selected_test_acc,
        final_test_acc: out.final_test_acc,
        n_labeled: ds.labeled.len(),
        n_unlabeled: ds.unlabeled.len(),
    };
    write_json(&dir.join(artifacts::SUMMARY_JSON), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub checkpoint: PathBuf,
    pub validation_acc: f64,
    pub test_acc: f64,
    pub n_validation: usize,
    pub n_test: usize,
}

pub fn eval_cmd(cfg: &RunConfig, ckpt: &Path, data: Option<&Path>) -> CliResult<EvalReport> {
    cfg.validate()?;
    let (model, _) = checkpoint::load(ckpt)?;
    let ds = dataset_for(cfg, data)?;
    Ok(EvalReport {
        checkpoint: ckpt.to_path_buf(),
        validation_acc: evaluate(&model, &ds.validation)?,
        test_acc: evaluate(&model, &ds.test)?,
        n_validation: ds.validation.len(),
        n_test: ds.test.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum SweepKind {
    Lambda,
    LabelRate,
}

fn pool(threads: Option<usize>) -> CliResult<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        b = b.num_threads(n);
    }
    b.build().map_err(|e| CliError::config(format!("thread pool: {e}")))
}

/// One run per grid point, fanned out over worker threads. Returns the row count.
pub fn sweep_cmd(cfg: &RunConfig, kind: SweepKind, data: Option<&Path>) -> CliResult<usize> {
    match kind {
        SweepKind::Lambda => check_lambda_grid(&cfg.sweep.lambda_grid)?,
        SweepKind::LabelRate => check_rates(&cfg.sweep.label_rates)?,
    }
    prepare(cfg)?;
    let ds = dataset_for(cfg, data)?;
    let model = cfg.model();
    let path = cfg.out_dir.join(artifacts::SWEEP_CSV);
    let pool = pool(cfg.sweep.threads)?;
    match kind {
        SweepKind::Lambda => {
            let rows = pool.install(|| {
                cfg.sweep
                    .lambda_grid
                    .par_iter()
                    .map(|&l| lambda_point(&ds, &model, &cfg.train, l))
                    .collect::<Result<Vec<_>, _>>()
            })?;
            write_rows(&path, &rows)?;
            Ok(rows.len())
        }
        SweepKind::LabelRate => {
            let rows = pool.install(|| {
                cfg.sweep
                    .label_rates
                    .par_iter()
                    .map(|&r| rate_point(&ds, &model, &cfg.train, r))
                    .collect::<Result<Vec<_>, _>>()
            })?;
            write_rows(&path, &rows)?;
            Ok(rows.len())
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckRow {
    pub name: String,
    pub group: String,
    pub count: usize,
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
}

impl From<&LayerReport> for GradcheckRow {
    fn from(r: &LayerReport) -> Self {
        GradcheckRow {
            name: r.name.clone(),
            group: serde_json::to_value(r.group)
                .ok()
                .and_then(|v| v.as_str().map(String::from))
                .unwrap_or_default(),
            count: r.stats.count,
            max_rel_err: r.stats.max_rel,
            mean_rel_err: r.stats.mean_rel,
        }
    }
}

/// Checks every parameter gradient of a seeded model on tiny batches.
/// `reversal` replaces the gradient reversal layer, which lets tests inject a
/// wrong backward.
pub fn gradcheck_cmd(cfg: &RunConfig, reversal: GrlSpec) -> CliResult<Vec<GradcheckRow>> {
    let gc = &cfg.gradcheck;
    if gc.batch == 0 || gc.step.is_nan() || gc.step <= 0.0 || gc.tolerance.is_nan() || gc.tolerance <= 0.0 {
        return Err(CliError::config("gradcheck needs batch >= 1, step > 0, tolerance > 0"));
    }
    prepare(cfg)?;
    let per = gc.batch.div_ceil(cfg.data.num_classes);
    let spec = SyntheticSpec {
        per_class: SplitCounts {
            labeled: per,
            unlabeled: per,
            validation: 1,
            test: 1,
        },
        seed: gc.seed,
        ..cfg.data.clone()
    };
    let ds = generate(&spec)?;
    let train = TrainConfig {
        lambda: gc.lambda,
        seed: gc.seed,
        ..cfg.train.clone()
    };
    let model = Model::new(cfg.model(), train.mode.arch(), ds.num_classes, gc.seed)?;
    let lab: Vec<_> = ds.labeled.iter().take(gc.batch).collect();
    let unl: Vec<_> = ds.unlabeled.iter().take(gc.batch).collect();
    let reports = model_gradcheck(&model, &lab, &unl, &train, reversal, gc.step)?;
    let rows: Vec<GradcheckRow> = reports.iter().map(GradcheckRow::from).collect();
    write_rows(&cfg.out_dir.join(artifacts::GRADCHECK_CSV), &rows)?;
    Ok(rows)
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub d: usize,
    pub iterations: usize,
    pub instances: usize,
    pub ns_us: f64,
    pub jacobi_us: f64,
    /// Mean relative Frobenius error against the eigendecomposition root.
    pub rel_err: f64,
    pub max_rel_err: f64,
    /// Same error after a single iteration.
    pub rel_err_n1: f64,
}

pub fn bench_cmd(cfg: &RunConfig) -> CliResult<Vec<BenchRow>> {
    let b = &cfg.bench;
    if b.d_list.is_empty() {
        return Err(CliError::config("bench.d_list is empty"));
    }
    if b.d_list.contains(&0) || b.instances == 0 || b.iterations == 0 {
        return Err(CliError::config("bench needs d >= 1, instances >= 1, iterations >= 1"));
    }
    prepare(cfg)?;
    let sop = SopConfig {
        iterations: b.iterations,
        ..cfg.sop
    };
    let one = SopConfig { iterations: 1, ..sop };
    let mut rows = Vec::new();
    for &d in &b.d_list {
        let mats: Vec<Tensor> = (0..b.instances as u64)
            .map(|i| Tensor::new(vec![d, d], random_spd(d, b.seed + i, 0.0)))
            .collect::<Result<_, _>>()?;
        let t = Instant::now();
        let approx = mats
            .iter()
            .map(|s| approx_sqrt(s, &sop))
            .collect::<Result<Vec<_>, _>>()?;
        let ns_us = t.elapsed().as_secs_f64() * 1e6 / mats.len() as f64;
        let t = Instant::now();
        let exact = mats
            .iter()
            .map(|s| matrix_sqrt_exact(s.data(), d))
            .collect::<Result<Vec<_>, _>>()?;
        let jacobi_us = t.elapsed().as_secs_f64() * 1e6 / mats.len() as f64;
        let first = mats
            .iter()
            .map(|s| approx_sqrt(s, &one))
            .collect::<Result<Vec<_>, _>>()?;
        let rel = |z: &Tensor, e: &[f64]| {
            let diff: Vec<f64> = z.data().iter().zip(e).map(|(a, b)| a - b).collect();
            frobenius(&diff) / frobenius(e)
        };
        let errs: Vec<f64> = approx.iter().zip(&exact).map(|(z, e)| rel(z, e)).collect();
        let errs1: Vec<f64> = first.iter().zip(&exact).map(|(z, e)| rel(z, e)).collect();
        let n = errs.len() as f64;
        rows.push(BenchRow {
            d,
            iterations: b.iterations,
            instances: b.instances,
            ns_us,
            jacobi_us,
            rel_err: errs.iter().sum::<f64>() / n,
            max_rel_err: errs.iter().cloned().fold(0.0, f64::max),
            rel_err_n1: errs1.iter().sum::<f64>() / n,
        });
    }
    write_rows(&cfg.out_dir.join(artifacts::BENCH_CSV), &rows)?;
    Ok(rows)
}

/// Writes pooled test-split features with labels. Returns `(rows, m)`.
pub fn export_features_cmd(cfg: &RunConfig, ckpt: &Path, data: Option<&Path>) -> CliResult<(usize, usize)> {
    prepare(cfg)?;
    let (model, _) = checkpoint::load(ckpt)?;
    let ds = match data {
        Some(dir) => dataset_io::load(dir)?,
        None => generate(&cfg.data)?,
    };
    if ds.image_shape != model.config.extractor.input {
        return Err(CliError::config(format!(
            "checkpoint expects images {:?}, dataset has {:?}",
            model.config.extractor.input, ds.image_shape
        )));
    }
    if ds.test.is_empty() {
        return Err(CliError::config("test split is empty"));
    }
    let images: Vec<&Tensor> = ds.test.iter().map(|s| &s.image).collect();
    let labels: Vec<Option<usize>> = ds.test.iter().map(|s| s.label).collect();
    let features = model.feature_vectors(&images)?;
    artifacts::write_features(&cfg.out_dir.join(artifacts::FEATURES_CSV), &labels, &features)?;
    Ok((features.rows(), features.cols()))
}
