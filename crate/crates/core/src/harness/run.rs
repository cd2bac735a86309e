use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{adam_update, estimate, Batch, OptimizerState, StepOptions, StepReport};
use crate::models::{predictive_samples, read_checkpoint, write_checkpoint, Mlp, PredictiveSampleSet};
use crate::tensor::{ParamStore, RngStream, StreamId};
use crate::uncertainty::{
    accuracy, ensemble_combine, pavpu_counts, test_log_likelihood, write_records_csv, write_samples_csv,
    EvalRecord, PavpuCounts,
};

use super::config::{DatasetKind, RunConfig};
use super::data::{add_gaussian_noise, load_mnist, synthetic_dataset, Dataset};

pub const FAILED_SENTINEL: &str = "FAILED";
/// Rows per forward pass when drawing predictive samples.
const EVAL_CHUNK: usize = 1000;

/// Train and test splits after limits and noise.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub train: Dataset,
    pub test: Dataset,
}

/// Loads the configured data and corrupts it once. The noise depends only
/// on `data_seed`, so every method and run seed sees the same pixels.
pub fn prepare_data(cfg: &RunConfig) -> Result<PreparedData> {
    let (train, test) = match cfg.dataset {
        DatasetKind::Mnist => load_mnist(&cfg.data_dir)?,
        DatasetKind::Synthetic => {
            let rng = RngStream::new(cfg.data_seed, StreamId::Synthetic);
            (
                synthetic_dataset(&cfg.synthetic, cfg.synthetic.train, &mut rng.derive(0))?,
                synthetic_dataset(&cfg.synthetic, cfg.synthetic.test, &mut rng.derive(1))?,
            )
        }
    };
    let train = cfg.train_limit.map_or(train.clone(), |n| train.head(n));
    let test = cfg.test_limit.map_or(test.clone(), |n| test.head(n));
    if train.dim() != cfg.widths[0] {
        return Err(Error::data(format!("inputs have {} features, model expects {}", train.dim(), cfg.widths[0])));
    }
    let noise = RngStream::new(cfg.data_seed, StreamId::Noise);
    Ok(PreparedData {
        train: add_gaussian_noise(&train, cfg.train_noise(), &mut noise.derive(0)),
        test: add_gaussian_noise(&test, cfg.noise_var, &mut noise.derive(1)),
    })
}

/// Freshly initialized model for a run seed.
pub fn build_model(cfg: &RunConfig, seed: u64) -> Result<(Mlp, ParamStore)> {
    let mut store = ParamStore::new();
    let mlp = Mlp::new(cfg.model_spec(), &mut store, &mut RngStream::new(seed, StreamId::Init))?;
    Ok((mlp, store))
}

/// Model with parameters read from a checkpoint.
pub fn load_model(cfg: &RunConfig, checkpoint: &Path) -> Result<(Mlp, ParamStore)> {
    let (mlp, mut store) = build_model(cfg, cfg.seed)?;
    read_checkpoint(checkpoint, &mut store)?;
    Ok((mlp, store))
}

#[derive(Serialize)]
struct MetricsLine<'a> {
    epoch: usize,
    step: usize,
    #[serde(flatten)]
    report: &'a StepReport,
}

#[derive(Serialize)]
struct TimingLine {
    epoch: usize,
    step: usize,
    wall_time: f64,
}

/// Batch-mean objective averaged over one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub elbo: f64,
    pub log_likelihood: f64,
    pub kl: f64,
    pub seconds: f64,
}

/// Where training writes its per-step logs.
pub struct TrainLogs {
    metrics: BufWriter<File>,
    timing: BufWriter<File>,
}

impl TrainLogs {
    pub fn create(dir: &Path) -> Result<Self> {
        Ok(TrainLogs {
            metrics: BufWriter::new(File::create(dir.join("metrics.jsonl"))?),
            timing: BufWriter::new(File::create(dir.join("timing.jsonl"))?),
        })
    }
}

pub struct Trained {
    pub mlp: Mlp,
    pub store: ParamStore,
    pub history: Vec<EpochSummary>,
}

/// Trains a model from scratch with run seed `seed`.
pub fn train_model(
    cfg: &RunConfig,
    seed: u64,
    train: &Dataset,
    mut logs: Option<&mut TrainLogs>,
    progress: &mut dyn FnMut(&EpochSummary),
) -> Result<Trained> {
    cfg.validate()?;
    let (mlp, mut store) = build_model(cfg, seed)?;
    let mut opt = OptimizerState::new(cfg.optimizer, &store)?;
    let opts = StepOptions {
        estimator: cfg.estimator(),
        dataset_size: train.len(),
    };
    let mut shuffle = RngStream::new(seed, StreamId::Shuffle);
    let mut masks = RngStream::new(seed, StreamId::Masks);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        shuffle.shuffle(&mut order);
        let (mut elbo, mut ll, mut kl, mut seen) = (0.0, 0.0, 0.0, 0usize);
        for rows in order.chunks(cfg.batch_size) {
            let x = train.x.select_rows(rows);
            let y: Vec<usize> = rows.iter().map(|&r| train.y[r]).collect();
            let est = estimate(&mlp, &store, Batch::new(&x, &y)?, &opts, &mut masks)?;
            let r = &est.report;
            if !r.elbo.is_finite() {
                return Err(Error::numeric("train", format!("ELBO {} at step {step}", r.elbo)));
            }
            adam_update(&mut opt, &mut store, &est.loss_grads())?;
            if let Some(logs) = logs.as_deref_mut() {
                serde_json::to_writer(&mut logs.metrics, &MetricsLine { epoch, step, report: r })?;
                logs.metrics.write_all(b"\n")?;
                serde_json::to_writer(&mut logs.timing, &TimingLine { epoch, step, wall_time: r.wall_time })?;
                logs.timing.write_all(b"\n")?;
            }
            let w = rows.len() as f64;
            elbo += r.elbo * w;
            ll += r.log_likelihood * w;
            kl += r.kl * w;
            seen += rows.len();
            step += 1;
        }
        let n = seen.max(1) as f64;
        let summary = EpochSummary {
            epoch,
            elbo: elbo / n,
            log_likelihood: ll / n,
            kl: kl / n,
            seconds: started.elapsed().as_secs_f64(),
        };
        progress(&summary);
        history.push(summary);
    }
    if let Some(logs) = logs {
        logs.metrics.flush()?;
        logs.timing.flush()?;
    }
    Ok(Trained { mlp, store, history })
}

/// `k` predictive samples per test input, drawn in fixed-size chunks
/// from the evaluation stream of `seed`.
pub fn sample_sets(mlp: &Mlp, store: &ParamStore, data: &Dataset, k: usize, seed: u64) -> Result<Vec<PredictiveSampleSet>> {
    let mut rng = RngStream::new(seed, StreamId::Eval);
    let rows: Vec<usize> = (0..data.len()).collect();
    let mut sets = Vec::with_capacity(data.len());
    for chunk in rows.chunks(EVAL_CHUNK) {
        sets.extend(predictive_samples(mlp, store, &data.x.select_rows(chunk), k, &mut rng)?);
    }
    Ok(sets)
}

pub fn score(sets: &[PredictiveSampleSet], labels: &[usize], thresholds: &[f64]) -> Result<Vec<EvalRecord>> {
    if sets.len() != labels.len() {
        return Err(Error::usage(format!("{} sample sets for {} labels", sets.len(), labels.len())));
    }
    sets.iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (s, &y))| EvalRecord::from_samples(i, y, s, thresholds))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSummary {
    pub threshold: f64,
    pub pavpu: f64,
    pub counts: PavpuCounts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub records: usize,
    pub k: usize,
    pub accuracy: f64,
    pub pavpu: Vec<ThresholdSummary>,
    pub test_log_likelihood: f64,
    /// Verdicts whose two compared columns had zero spread.
    pub degenerate: usize,
}

impl EvalSummary {
    pub fn from_records(records: &[EvalRecord], k: usize, thresholds: &[f64]) -> Result<Self> {
        let pavpu = thresholds
            .iter()
            .map(|&threshold| {
                let counts = pavpu_counts(records, threshold)?;
                Ok(ThresholdSummary { threshold, pavpu: counts.value(), counts })
            })
            .collect::<Result<_>>()?;
        Ok(EvalSummary {
            records: records.len(),
            k,
            accuracy: accuracy(records)?,
            pavpu,
            test_log_likelihood: test_log_likelihood(records)?,
            degenerate: records.iter().filter(|r| r.verdict.degenerate).count(),
        })
    }

    /// PAvPU at `threshold`, if it was evaluated.
    pub fn pavpu_at(&self, threshold: f64) -> Option<f64> {
        self.pavpu.iter().find(|p| p.threshold == threshold).map(|p| p.pavpu)
    }
}

/// Records plus summary for one model on the test split.
pub fn evaluate(
    mlp: &Mlp,
    store: &ParamStore,
    test: &Dataset,
    cfg: &RunConfig,
    seed: u64,
) -> Result<(Vec<PredictiveSampleSet>, Vec<EvalRecord>, EvalSummary)> {
    let sets = sample_sets(mlp, store, test, cfg.k, seed)?;
    let records = score(&sets, &test.y, &cfg.thresholds)?;
    let summary = EvalSummary::from_records(&records, cfg.k, &cfg.thresholds)?;
    Ok((sets, records, summary))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

pub fn write_evaluation(dir: &Path, records: &[EvalRecord], summary: &EvalSummary) -> Result<()> {
    write_records_csv(BufWriter::new(File::create(dir.join("records.csv"))?), records)?;
    write_json(&dir.join("summary.json"), summary)
}

/// Runs `body` in `dir`, leaving a `FAILED` file with the error behind if
/// it fails so that partial outputs are never mistaken for results.
pub fn with_sentinel<T>(dir: &Path, body: impl FnOnce() -> Result<T>) -> Result<T> {
    fs::create_dir_all(dir)?;
    let sentinel = dir.join(FAILED_SENTINEL);
    if sentinel.exists() {
        fs::remove_file(&sentinel)?;
    }
    body().inspect_err(|e| {
        let _ = fs::write(&sentinel, format!("{e}\n"));
    })
}

fn echo_config(cfg: &RunConfig) -> Result<()> {
    fs::write(cfg.out.join("config.json"), cfg.to_json() + "\n")?;
    Ok(())
}

pub fn checkpoint_path(cfg: &RunConfig, checkpoint: Option<&Path>) -> PathBuf {
    checkpoint.map_or_else(|| cfg.out.join("model.ckpt"), Path::to_path_buf)
}

/// `train`: fits one model, then evaluates it on the test split.
pub fn run_train(cfg: &RunConfig, progress: &mut dyn FnMut(&EpochSummary)) -> Result<EvalSummary> {
    cfg.validate()?;
    with_sentinel(&cfg.out, || {
        echo_config(cfg)?;
        let data = prepare_data(cfg)?;
        let mut logs = TrainLogs::create(&cfg.out)?;
        let trained = train_model(cfg, cfg.seed, &data.train, Some(&mut logs), progress)?;
        write_checkpoint(&cfg.out.join("model.ckpt"), &trained.store)?;
        write_json(&cfg.out.join("history.json"), &trained.history)?;
        let (_, records, summary) = evaluate(&trained.mlp, &trained.store, &data.test, cfg, cfg.seed)?;
        write_evaluation(&cfg.out, &records, &summary)?;
        Ok(summary)
    })
}

/// `eval`: scores a stored checkpoint.
pub fn run_eval(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<EvalSummary> {
    cfg.validate()?;
    let ckpt = checkpoint_path(cfg, checkpoint);
    with_sentinel(&cfg.out, || {
        let (mlp, store) = load_model(cfg, &ckpt)?;
        let data = prepare_data(cfg)?;
        let (_, records, summary) = evaluate(&mlp, &store, &data.test, cfg, cfg.seed)?;
        write_evaluation(&cfg.out, &records, &summary)?;
        Ok(summary)
    })
}

/// Per-threshold certainty breakdown.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyReport {
    pub summary: EvalSummary,
    /// Mean p-value of accurate and of inaccurate predictions.
    pub mean_p_accurate: f64,
    pub mean_p_inaccurate: f64,
}

/// `uncertainty`: like `eval`, plus `uncertainty.json` contrasting the
/// p-values of correct and incorrect predictions.
pub fn run_uncertainty(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<UncertaintyReport> {
    cfg.validate()?;
    let ckpt = checkpoint_path(cfg, checkpoint);
    with_sentinel(&cfg.out, || {
        let (mlp, store) = load_model(cfg, &ckpt)?;
        let data = prepare_data(cfg)?;
        let (_, records, summary) = evaluate(&mlp, &store, &data.test, cfg, cfg.seed)?;
        write_evaluation(&cfg.out, &records, &summary)?;
        let mean_p = |acc: bool| {
            let ps: Vec<f64> = records
                .iter()
                .filter(|r| (r.accuracy > 0.5) == acc)
                .map(|r| r.verdict.p_value)
                .collect();
            if ps.is_empty() {
                f64::NAN
            } else {
                ps.iter().sum::<f64>() / ps.len() as f64
            }
        };
        let report = UncertaintyReport {
            summary,
            mean_p_accurate: mean_p(true),
            mean_p_inaccurate: mean_p(false),
        };
        write_json(&cfg.out.join("uncertainty.json"), &report)?;
        Ok(report)
    })
}

/// Ensemble members' summaries and the pooled evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleReport {
    pub members: Vec<EvalSummary>,
    pub ensemble: EvalSummary,
}

/// Pools per-input sample sets of several models.
pub fn combine_members(members: &[Vec<PredictiveSampleSet>]) -> Result<Vec<PredictiveSampleSet>> {
    let first = members.first().ok_or_else(|| Error::usage("empty ensemble"))?;
    (0..first.len())
        .map(|i| {
            let per_model: Vec<PredictiveSampleSet> = members.iter().map(|m| m[i].clone()).collect();
            ensemble_combine(&per_model)
        })
        .collect()
}

/// `ensemble`: trains `cfg.ensemble` members with seeds `seed, seed+1, ...`
/// and evaluates their pooled predictive samples.
pub fn run_ensemble(cfg: &RunConfig, progress: &mut dyn FnMut(&EpochSummary)) -> Result<EnsembleReport> {
    cfg.validate()?;
    with_sentinel(&cfg.out, || {
        echo_config(cfg)?;
        let data = prepare_data(cfg)?;
        let mut member_sets = Vec::with_capacity(cfg.ensemble);
        let mut members = Vec::with_capacity(cfg.ensemble);
        for m in 0..cfg.ensemble {
            let seed = cfg.seed + m as u64;
            let dir = cfg.out.join(format!("member{m}"));
            fs::create_dir_all(&dir)?;
            let mut logs = TrainLogs::create(&dir)?;
            let trained = train_model(cfg, seed, &data.train, Some(&mut logs), progress)?;
            write_checkpoint(&dir.join("model.ckpt"), &trained.store)?;
            let (sets, records, summary) = evaluate(&trained.mlp, &trained.store, &data.test, cfg, seed)?;
            write_evaluation(&dir, &records, &summary)?;
            member_sets.push(sets);
            members.push(summary);
        }
        let pooled = combine_members(&member_sets)?;
        let records = score(&pooled, &data.test.y, &cfg.thresholds)?;
        let ensemble = EvalSummary::from_records(&records, cfg.k * cfg.ensemble, &cfg.thresholds)?;
        write_evaluation(&cfg.out, &records, &ensemble)?;
        let report = EnsembleReport { members, ensemble };
        write_json(&cfg.out.join("ensemble.json"), &report)?;
        Ok(report)
    })
}

/// `export-samples`: dumps every test input's predictive samples.
pub fn run_export_samples(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<usize> {
    cfg.validate()?;
    let ckpt = checkpoint_path(cfg, checkpoint);
    with_sentinel(&cfg.out, || {
        let (mlp, store) = load_model(cfg, &ckpt)?;
        let data = prepare_data(cfg)?;
        let sets = sample_sets(&mlp, &store, &data.test, cfg.k, cfg.seed)?;
        let indexed: Vec<(usize, &PredictiveSampleSet)> = sets.iter().enumerate().collect();
        write_samples_csv(BufWriter::new(File::create(cfg.out.join("samples.csv"))?), &indexed)?;
        Ok(sets.len())
    })
}
