//! Experiment orchestration: data preparation, two-stage training with a
//! continuation control, inference, paired evaluation and ablation sweeps.
//!
//! Every emitted file carries the config hash: CSV and NDJSON files in a
//! leading comment or header line, JSON files in a `config_hash` field,
//! images in a header comment.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bridge::inference_input;
use crate::checkpoint::{Checkpoint, RunMeta};
use crate::config::ExperimentConfig;
use crate::dataset::{
    build_prior, hex, load_dataset, manifest_for, measure_all, save_dataset, synth_dataset, train_val_split,
    DatasetManifest,
};
use crate::error::{Error, Result};
use crate::eval::{frechet_desk, paired_t_test, posterior_sample, psnr, NfeCounter, FEATURE_DIM};
use crate::forward_ops::ForwardOperator;
use crate::grid::{ImageGrid, RangeTag};
use crate::image_io::export_image;
use crate::memory::SampleRecord;
use crate::models::{GaussianPrior, ParamModel};
use crate::rng::{tags, SeededRng};
use crate::schedule::ScheduleTable;
use crate::training::{
    begin_stage2, init_student, run_stage, run_two_stage, Stage, StepTrace, TrainConfig, TrainContext, TrainState,
};

/// Everything derived from a config before training.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub cfg: ExperimentConfig,
    pub hash: String,
    pub op: ForwardOperator,
    pub sched: ScheduleTable,
    pub prior: GaussianPrior,
    pub train: Vec<SampleRecord>,
    pub val: Vec<SampleRecord>,
    pub clamp_rate: f64,
}

impl Prepared {
    pub fn context(&self) -> TrainContext<'_> {
        self.context_with(&self.cfg.train)
    }

    pub fn context_with<'a>(&'a self, train: &'a TrainConfig) -> TrainContext<'a> {
        TrainContext { op: &self.op, prior: &self.prior, sched: &self.sched, cfg: train, seed: self.cfg.seed }
    }

    /// Validation records used for evaluation.
    pub fn eval_records(&self) -> &[SampleRecord] {
        match self.cfg.eval.measurements {
            0 => &self.val,
            m => &self.val[..m],
        }
    }

    pub fn run_meta(&self, label: &str, train: &TrainConfig) -> RunMeta {
        RunMeta {
            config_hash: self.hash.clone(),
            label: label.into(),
            seed: self.cfg.seed,
            h: train.h,
            lambda: train.lambda,
            memory_window: train.memory_window,
            schedule: self.cfg.schedule,
        }
    }
}

/// Validates the config, builds the prior, synthesizes, measures and splits the data.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    let op = cfg.operator()?;
    let sched = cfg.schedule_table()?;
    let prior = build_prior(&cfg.dataset, cfg.seed)?;
    let synth = synth_dataset(&cfg.dataset, &prior, cfg.seed)?;
    let records = measure_all(&synth.images, &op, cfg.seed)?;
    let mut split_rng = SeededRng::new(cfg.seed).derive(&[tags::SPLIT]);
    let (train, val) = train_val_split(records, cfg.dataset.val_fraction, &mut split_rng)?;
    Ok(Prepared { cfg: cfg.clone(), hash: cfg.hash(), op, sched, prior, train, val, clamp_rate: synth.clamp_rate })
}

/// Fresh generator and teacher-initialized student over the training split.
pub fn initial_state(p: &Prepared) -> Result<TrainState> {
    let root = SeededRng::new(p.cfg.seed).derive(&[tags::INIT_PARAMS]);
    let mut generator = ParamModel::init(p.cfg.generator_arch(), &mut root.derive(&[0]))?;
    if let crate::config::GeneratorConfig::Affine { init_gain } = p.cfg.generator {
        let scaled = generator.params().iter().map(|v| v * init_gain).collect();
        generator.set_params(scaled)?;
    }
    let student = init_student(p.cfg.student_arch(&p.sched)?, &p.prior, &mut root.derive(&[2]))?;
    Ok(TrainState::new(generator, student, p.train.clone(), &p.cfg.train))
}

/// Standard file names inside a run directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }
    pub fn traces(&self) -> PathBuf {
        self.root.join("traces.ndjson")
    }
    pub fn control_traces(&self) -> PathBuf {
        self.root.join("traces_control.ndjson")
    }
    pub fn checkpoint(&self, label: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{label}.ckpt"))
    }
    pub fn images(&self) -> PathBuf {
        self.root.join("images")
    }
    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }
    pub fn deltas(&self) -> PathBuf {
        self.root.join("deltas.csv")
    }
    pub fn histogram(&self) -> PathBuf {
        self.root.join("histogram.csv")
    }
    pub fn summary(&self) -> PathBuf {
        self.root.join("summary.json")
    }
    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }
}

pub fn params_hash(model: &ParamModel) -> String {
    let mut h = Sha256::new();
    for v in model.params() {
        h.update(v.to_le_bytes());
    }
    hex(&h.finalize())
}

fn hash_comment(hash: &str) -> String {
    format!("# config_hash={hash}\n")
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, contents)?;
    Ok(())
}

/// NDJSON trace writer; the first line records the config hash.
pub struct TraceWriter {
    out: BufWriter<fs::File>,
}

impl TraceWriter {
    pub fn create(path: &Path, hash: &str, run: &str) -> Result<Self> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut out = BufWriter::new(fs::File::create(path)?);
        writeln!(out, "{}", serde_json::json!({ "config_hash": hash, "run": run, "format": "udavi-traces/1" }))?;
        Ok(Self { out })
    }

    pub fn write(&mut self, trace: &StepTrace) -> Result<()> {
        serde_json::to_writer(&mut self.out, trace)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

/// Continues the first stage for `iters` more steps with the second-stage
/// batch size, the baseline that the uncertainty-aware stage is compared to.
pub fn davi_continuation(
    stage1: &TrainState,
    ctx: &TrainContext<'_>,
    iters: u64,
    sink: &mut dyn FnMut(&StepTrace) -> Result<()>,
) -> Result<TrainState> {
    let mut state = stage1.clone();
    state.stage = Stage::Davi;
    let mut cfg = ctx.cfg.clone();
    cfg.batch_size = cfg.batch_size_for(Stage::UDavi);
    let ctx = TrainContext { cfg: &cfg, ..*ctx };
    run_stage(&mut state, &ctx, iters, 0.0, sink)?;
    Ok(state)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutputs {
    pub config_hash: String,
    pub stage1: PathBuf,
    pub stage2: PathBuf,
    pub control: PathBuf,
    pub stage1_params: String,
    pub stage2_params: String,
    pub control_params: String,
    pub clamp_rate: f64,
    pub final_consistency: Option<f64>,
}

/// Two-stage training plus the continuation control. Writes `config.json`,
/// the trace files, three checkpoints and `train_summary.json`.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path) -> Result<TrainOutputs> {
    let p = prepare(cfg)?;
    let layout = RunLayout::new(out);
    write_file(&layout.config(), &cfg.to_wrapped_json()?)?;
    let ctx = p.context();
    let state = initial_state(&p)?;

    let mut traces = TraceWriter::create(&layout.traces(), &p.hash, "two_stage")?;
    let mut last = None;
    let result = run_two_stage(state, &ctx, &mut |t| {
        last = Some(t.consistency);
        if t.iteration % 100 == 0 {
            info!("iter {} {:?} consistency {:.4e} score {:.4e}", t.iteration, t.stage, t.consistency, t.score);
        }
        traces.write(t)
    })?;
    traces.finish()?;

    let mut control_traces = TraceWriter::create(&layout.control_traces(), &p.hash, "davi_continuation")?;
    let control = davi_continuation(&result.stage1, &ctx, cfg.train.stage2_iters, &mut |t| control_traces.write(t))?;
    control_traces.finish()?;

    let save = |state: &TrainState, label: &str| -> Result<PathBuf> {
        let path = layout.checkpoint(label);
        Checkpoint::from_state(state, &p.run_meta(label, &cfg.train)).save(&path)?;
        Ok(path)
    };
    let outputs = TrainOutputs {
        config_hash: p.hash.clone(),
        stage1: save(&result.stage1, "stage1")?,
        stage2: save(&result.stage2, "stage2")?,
        control: save(&control, "control")?,
        stage1_params: params_hash(&result.stage1.generator),
        stage2_params: params_hash(&result.stage2.generator),
        control_params: params_hash(&control.generator),
        clamp_rate: p.clamp_rate,
        final_consistency: last,
    };
    write_file(&layout.root.join("train_summary.json"), &serde_json::to_string_pretty(&outputs)?)?;
    Ok(outputs)
}

/// Loads a checkpoint and checks it against the config's schedule and grid.
pub fn load_checked(cfg: &ExperimentConfig, path: &Path) -> Result<Checkpoint> {
    let ck = Checkpoint::load(path)?;
    ck.check_schedule(&cfg.schedule)?;
    if ck.generator.dims() != cfg.dims() {
        return Err(Error::Checkpoint(format!(
            "checkpoint generator works on {}, config on {}",
            ck.generator.dims(),
            cfg.dims()
        )));
    }
    Ok(ck)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferReport {
    pub config_hash: String,
    pub checkpoint: String,
    pub measurements: usize,
    pub samples_per_measurement: usize,
    pub generator_evaluations: u64,
    pub nfe_per_sample: f64,
    /// Whether all samples of every measurement are pairwise distinct.
    pub samples_distinct: bool,
}

/// Draws `k` single-pass posterior samples per measurement. Measurements come
/// from a dataset directory (its validation ids when a split file is present)
/// or the config's validation split.
pub fn cmd_infer(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    measurements: Option<&Path>,
    k: usize,
    out: &Path,
) -> Result<InferReport> {
    if k == 0 {
        return Err(Error::Config("infer needs at least one sample per measurement".into()));
    }
    let ck = load_checked(cfg, checkpoint)?;
    let op = cfg.operator()?;
    let dims = cfg.dims();
    let records = match measurements {
        Some(dir) => {
            let (manifest, recs) = load_dataset(dir)?;
            if manifest.measurement_dims != op.output_dims(dims)? {
                return Err(Error::Shape(format!(
                    "measurements are {}, operator produces {}",
                    manifest.measurement_dims,
                    op.output_dims(dims)?
                )));
            }
            match read_split(dir)? {
                Some(split) => recs.into_iter().filter(|r| split.val_ids.contains(&r.sample_id)).collect(),
                None => recs,
            }
        }
        None => prepare(cfg)?.eval_records().to_vec(),
    };
    let hash = cfg.hash();
    let layout = RunLayout::new(out);
    let h = ck.header.h;
    let counter = NfeCounter::new();
    let root = SeededRng::new(cfg.seed).derive(&[tags::INFER]);
    let mut nfe_csv = hash_comment(&hash);
    nfe_csv.push_str("measurement_id,samples,generator_evaluations,nfe_per_sample\n");
    let mut all_distinct = true;
    for rec in &records {
        let y_img = op.lift_to_input(&rec.y, dims)?;
        let before = counter.get();
        let mut samples = Vec::with_capacity(k);
        for s in 0..k as u64 {
            let mut rng = root.derive(&[rec.sample_id, s]);
            samples.push(posterior_sample(&ck.generator, &y_img, h, &mut rng, &counter)?);
        }
        let used = counter.get() - before;
        writeln!(nfe_csv, "{},{k},{used},{}", rec.sample_id, used as f64 / k as f64).expect("string write");
        for i in 0..k {
            for j in i + 1..k {
                if samples[i] == samples[j] {
                    all_distinct = false;
                }
            }
        }
        let comment = format!("config_hash={hash}");
        for (s, img) in samples.iter().take(cfg.eval.export_images).enumerate() {
            let name = format!("infer_m{}_s{s}.{}", rec.sample_id, pixmap_ext(img));
            export_image(img, &layout.images().join(name), Some(&comment))?;
        }
    }
    write_file(&layout.root.join("nfe.csv"), &nfe_csv)?;
    let total = counter.get();
    let n_samples = (records.len() * k) as u64;
    let report = InferReport {
        config_hash: hash,
        checkpoint: checkpoint.display().to_string(),
        measurements: records.len(),
        samples_per_measurement: k,
        generator_evaluations: total,
        nfe_per_sample: if n_samples == 0 { 0.0 } else { total as f64 / n_samples as f64 },
        samples_distinct: all_distinct,
    };
    write_file(&layout.root.join("infer_report.json"), &serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

fn pixmap_ext(img: &ImageGrid) -> &'static str {
    if img.dims().channels == 3 {
        "ppm"
    } else {
        "pgm"
    }
}

/// Per-seed metrics for the baseline (`davi`) and uncertainty-aware (`udavi`) generators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub psnr_davi: f64,
    pub psnr_udavi: f64,
    pub frechet_desk_davi: f64,
    pub frechet_desk_udavi: f64,
}

impl SeedMetrics {
    /// `PSNR_U − PSNR_D`; positive favors the uncertainty-aware model.
    pub fn delta_psnr(&self) -> f64 {
        self.psnr_udavi - self.psnr_davi
    }

    /// `Fréchet_D − Fréchet_U`; positive favors the uncertainty-aware model.
    pub fn delta_frechet(&self) -> f64 {
        self.frechet_desk_davi - self.frechet_desk_udavi
    }
}

/// Mean PSNR and `frechet_desk` of one sample per measurement.
fn score_samples(samples: &[ImageGrid], refs: &[ImageGrid]) -> Result<(f64, f64)> {
    let mut total = 0.0;
    for (s, r) in samples.iter().zip(refs) {
        total += psnr(s, r)?;
    }
    Ok((total / samples.len() as f64, frechet_desk(samples, refs)?))
}

/// Paired comparison across `seeds` inference seeds. Both generators see the
/// same perturbed input for every (seed, measurement) pair.
pub fn compare_generators(
    davi: &ParamModel,
    udavi: &ParamModel,
    records: &[SampleRecord],
    op: &ForwardOperator,
    h: f64,
    seeds: usize,
    seed: u64,
) -> Result<Vec<SeedMetrics>> {
    if records.len() < FEATURE_DIM {
        return Err(Error::Config(format!(
            "evaluation needs at least {FEATURE_DIM} measurements for frechet_desk, got {}",
            records.len()
        )));
    }
    let dims = davi.dims();
    let inputs: Vec<ImageGrid> = records.iter().map(|r| op.lift_to_input(&r.y, dims)).collect::<Result<_>>()?;
    let refs: Vec<ImageGrid> = records.iter().map(|r| r.x0.clone()).collect();
    let root = SeededRng::new(seed).derive(&[tags::EVAL]);
    (0..seeds as u64)
        .into_par_iter()
        .map(|s| {
            let mut d_samples = Vec::with_capacity(records.len());
            let mut u_samples = Vec::with_capacity(records.len());
            for (rec, y_img) in records.iter().zip(&inputs) {
                let input = inference_input(y_img, h, &mut root.derive(&[s, rec.sample_id]))?;
                d_samples.push(ImageGrid::new(dims, davi.forward(input.values(), None)?, RangeTag::Model)?);
                u_samples.push(ImageGrid::new(dims, udavi.forward(input.values(), None)?, RangeTag::Model)?);
            }
            let (psnr_davi, frechet_desk_davi) = score_samples(&d_samples, &refs)?;
            let (psnr_udavi, frechet_desk_udavi) = score_samples(&u_samples, &refs)?;
            Ok(SeedMetrics { seed: s, psnr_davi, psnr_udavi, frechet_desk_davi, frechet_desk_udavi })
        })
        .collect()
}

/// Paired t-test summary for one (task, metric) combination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaTest {
    pub task: String,
    pub metric: String,
    pub mean_delta: f64,
    pub t_stat: Option<f64>,
    pub p_value: Option<f64>,
    pub df: f64,
    pub zero_variance: bool,
}

pub fn delta_test(task: &str, metric: &str, deltas: &[f64]) -> Result<DeltaTest> {
    let mean_delta = deltas.iter().sum::<f64>() / deltas.len() as f64;
    let df = deltas.len() as f64 - 1.0;
    let base = DeltaTest {
        task: task.into(),
        metric: metric.into(),
        mean_delta,
        t_stat: None,
        p_value: None,
        df,
        zero_variance: false,
    };
    match paired_t_test(deltas) {
        Ok(t) => Ok(DeltaTest { t_stat: Some(t.t_stat), p_value: Some(t.p_value), ..base }),
        Err(Error::Degenerate(_)) => Ok(DeltaTest { zero_variance: true, ..base }),
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub config_hash: String,
    pub task: String,
    pub seeds: usize,
    pub measurements: usize,
    pub davi_checkpoint: String,
    pub udavi_checkpoint: String,
    pub psnr_davi_mean: f64,
    pub psnr_udavi_mean: f64,
    pub frechet_desk_davi_mean: f64,
    pub frechet_desk_udavi_mean: f64,
    pub delta_definitions: String,
    pub tests: Vec<DeltaTest>,
}

const DELTA_DEFINITIONS: &str = "delta_psnr = psnr_udavi - psnr_davi; delta_frechet_desk = frechet_desk_davi - frechet_desk_udavi; positive values favor U-DAVI";

/// Equal-width bins over `[min, max]`; a constant sample gets a unit-width range.
pub fn histogram(values: &[f64], bins: usize) -> Vec<(f64, f64, usize)> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &v in values {
        let idx = (((v - lo) / width) as usize).min(bins - 1);
        counts[idx] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, c)| (lo + width * i as f64, if i + 1 == bins { hi } else { lo + width * (i + 1) as f64 }, c))
        .collect()
}

/// Writes `metrics.csv`, `deltas.csv`, `histogram.csv` and `summary.json`.
pub fn write_eval_outputs(
    layout: &RunLayout,
    hash: &str,
    task: &str,
    bins: usize,
    rows: &[SeedMetrics],
    mut summary: EvalSummary,
) -> Result<EvalSummary> {
    let mut metrics = hash_comment(hash);
    metrics.push_str("seed,task,psnr_davi,psnr_udavi,frechet_desk_davi,frechet_desk_udavi,delta_psnr,delta_frechet_desk\n");
    let mut deltas = hash_comment(hash);
    writeln!(deltas, "# {DELTA_DEFINITIONS}").expect("string write");
    deltas.push_str("seed,task,delta_psnr,delta_frechet_desk\n");
    for r in rows {
        writeln!(
            metrics,
            "{},{task},{},{},{},{},{},{}",
            r.seed,
            r.psnr_davi,
            r.psnr_udavi,
            r.frechet_desk_davi,
            r.frechet_desk_udavi,
            r.delta_psnr(),
            r.delta_frechet()
        )
        .expect("string write");
        writeln!(deltas, "{},{task},{},{}", r.seed, r.delta_psnr(), r.delta_frechet()).expect("string write");
    }
    let dp: Vec<f64> = rows.iter().map(SeedMetrics::delta_psnr).collect();
    let df: Vec<f64> = rows.iter().map(SeedMetrics::delta_frechet).collect();
    let mut hist = hash_comment(hash);
    hist.push_str("task,metric,bin,lower,upper,count\n");
    for (metric, vals) in [("delta_psnr", &dp), ("delta_frechet_desk", &df)] {
        for (i, (lo, hi, c)) in histogram(vals, bins).into_iter().enumerate() {
            writeln!(hist, "{task},{metric},{i},{lo},{hi},{c}").expect("string write");
        }
    }
    summary.tests = vec![delta_test(task, "psnr", &dp)?, delta_test(task, "frechet_desk", &df)?];
    write_file(&layout.metrics(), &metrics)?;
    write_file(&layout.deltas(), &deltas)?;
    write_file(&layout.histogram(), &hist)?;
    write_file(&layout.summary(), &serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

fn mean_by(rows: &[SeedMetrics], f: impl Fn(&SeedMetrics) -> f64) -> f64 {
    rows.iter().map(f).sum::<f64>() / rows.len() as f64
}

/// Paired evaluation of a baseline and an uncertainty-aware checkpoint from
/// the same config over `cfg.eval.seeds` inference seeds.
pub fn cmd_eval(cfg: &ExperimentConfig, davi: &Path, udavi: &Path, out: &Path) -> Result<EvalSummary> {
    let seeds = cfg.eval.seeds;
    if seeds < 2 {
        return Err(Error::Config(format!("eval.seeds must be >= 2, got {seeds}")));
    }
    let hash = cfg.hash();
    let d = load_checked(cfg, davi)?;
    let u = load_checked(cfg, udavi)?;
    for (ck, path) in [(&d, davi), (&u, udavi)] {
        if ck.header.config_hash != hash {
            return Err(Error::Config(format!(
                "{} was trained under config_hash {}, evaluating under {hash}",
                path.display(),
                ck.header.config_hash
            )));
        }
    }
    let p = prepare(cfg)?;
    let records = p.eval_records();
    let rows = compare_generators(&d.generator, &u.generator, records, &p.op, d.header.h, seeds, cfg.seed)?;
    let task = cfg.task.name();
    let summary = EvalSummary {
        config_hash: hash.clone(),
        task: task.into(),
        seeds,
        measurements: records.len(),
        davi_checkpoint: davi.display().to_string(),
        udavi_checkpoint: udavi.display().to_string(),
        psnr_davi_mean: mean_by(&rows, |r| r.psnr_davi),
        psnr_udavi_mean: mean_by(&rows, |r| r.psnr_udavi),
        frechet_desk_davi_mean: mean_by(&rows, |r| r.frechet_desk_davi),
        frechet_desk_udavi_mean: mean_by(&rows, |r| r.frechet_desk_udavi),
        delta_definitions: DELTA_DEFINITIONS.into(),
        tests: vec![],
    };
    write_eval_outputs(&RunLayout::new(out), &hash, task, cfg.eval.histogram_bins, &rows, summary)
}

/// One row per (task, metric) across several evaluation summaries.
pub fn write_pvalue_table(summaries: &[EvalSummary], path: &Path) -> Result<()> {
    let mut csv = String::new();
    for s in summaries {
        writeln!(csv, "# config_hash={} task={}", s.config_hash, s.task).expect("string write");
    }
    csv.push_str("task,metric,seeds,mean_delta,t_stat,p_value,zero_variance\n");
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for s in summaries {
        for t in &s.tests {
            writeln!(
                csv,
                "{},{},{},{},{},{},{}",
                t.task,
                t.metric,
                s.seeds,
                t.mean_delta,
                opt(t.t_stat),
                opt(t.p_value),
                t.zero_variance
            )
            .expect("string write");
        }
    }
    write_file(path, &csv)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "param", content = "values", rename_all = "snake_case")]
pub enum Sweep {
    Lambda(Vec<f64>),
    MemoryWindow(Vec<usize>),
}

impl Sweep {
    pub fn len(&self) -> usize {
        match self {
            Sweep::Lambda(v) => v.len(),
            Sweep::MemoryWindow(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn name(&self) -> &'static str {
        match self {
            Sweep::Lambda(_) => "lambda",
            Sweep::MemoryWindow(_) => "memory_window",
        }
    }

    fn configs(&self, base: &TrainConfig) -> Vec<(String, TrainConfig)> {
        match self {
            Sweep::Lambda(v) => v.iter().map(|&l| (l.to_string(), TrainConfig { lambda: l, ..base.clone() })).collect(),
            Sweep::MemoryWindow(v) => {
                v.iter().map(|&n| (n.to_string(), TrainConfig { memory_window: n, ..base.clone() })).collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: String,
    pub psnr: f64,
    pub frechet_desk: f64,
    pub delta_psnr: DeltaTest,
    pub delta_frechet_desk: DeltaTest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub config_hash: String,
    pub sweep: String,
    pub control_psnr: f64,
    pub control_frechet_desk: f64,
    pub rows: Vec<SweepRow>,
    pub best_by_psnr: String,
    pub best_by_frechet_desk: String,
}

/// Mean validation PSNR over a few fixed inference seeds.
fn validation_psnr(gen: &ParamModel, records: &[SampleRecord], op: &ForwardOperator, h: f64, seed: u64) -> Result<f64> {
    const CURVE_SEEDS: u64 = 4;
    let dims = gen.dims();
    let root = SeededRng::new(seed).derive(&[tags::EVAL, u64::MAX]);
    let mut total = 0.0;
    for s in 0..CURVE_SEEDS {
        for rec in records {
            let input = inference_input(&op.lift_to_input(&rec.y, dims)?, h, &mut root.derive(&[s, rec.sample_id]))?;
            let x = ImageGrid::new(dims, gen.forward(input.values(), None)?, RangeTag::Model)?;
            total += psnr(&x, &rec.x0)?;
        }
    }
    Ok(total / (CURVE_SEEDS as usize * records.len()) as f64)
}

/// Runs `iters` steps in chunks of `every`, recording validation PSNR after each chunk.
fn run_with_curve(
    state: &mut TrainState,
    ctx: &TrainContext<'_>,
    iters: u64,
    lambda: f64,
    every: u64,
    p: &Prepared,
) -> Result<Vec<(u64, f64)>> {
    let h = ctx.cfg.h;
    let mut curve = vec![(state.iteration, validation_psnr(&state.generator, p.eval_records(), &p.op, h, p.cfg.seed)?)];
    let mut done = 0;
    while done < iters {
        let chunk = every.min(iters - done);
        run_stage(state, ctx, chunk, lambda, &mut |_| Ok(()))?;
        done += chunk;
        curve.push((state.iteration, validation_psnr(&state.generator, p.eval_records(), &p.op, h, p.cfg.seed)?));
    }
    Ok(curve)
}

/// One second-stage run per sweep value from a shared first stage, each
/// compared against the continuation control.
pub fn cmd_ablate(cfg: &ExperimentConfig, sweep: &Sweep, out: &Path) -> Result<AblationReport> {
    if sweep.is_empty() {
        return Err(Error::Config("ablation sweep has no values".into()));
    }
    let p = prepare(cfg)?;
    let layout = RunLayout::new(out);
    write_file(&layout.config(), &cfg.to_wrapped_json()?)?;
    let ctx = p.context();
    let mut stage1 = initial_state(&p)?;
    if cfg.train.student_warmup_iters > 0 {
        crate::training::warm_up_student(&mut stage1, &ctx, cfg.train.student_warmup_iters)?;
    }
    run_stage(&mut stage1, &ctx, cfg.train.stage1_iters, 0.0, &mut |_| Ok(()))?;
    Checkpoint::from_state(&stage1, &p.run_meta("stage1", &cfg.train)).save(&layout.checkpoint("stage1"))?;

    let iters = cfg.train.stage2_iters;
    let every = cfg.eval.curve_every;
    let mut control_cfg = cfg.train.clone();
    control_cfg.batch_size = control_cfg.batch_size_for(Stage::UDavi);
    let control_ctx = p.context_with(&control_cfg);
    let mut control = stage1.clone();
    let mut curves = vec![("control".to_string(), run_with_curve(&mut control, &control_ctx, iters, 0.0, every, &p)?)];

    let mut rows = Vec::new();
    let records = p.eval_records();
    let mut control_means = (0.0, 0.0);
    for (value, train) in sweep.configs(&cfg.train) {
        train.validate()?;
        let vctx = p.context_with(&train);
        let mut state = stage1.clone();
        begin_stage2(&mut state, &vctx)?;
        let curve = run_with_curve(&mut state, &vctx, iters, train.lambda, every, &p)?;
        curves.push((value.clone(), curve));
        let metrics =
            compare_generators(&control.generator, &state.generator, records, &p.op, cfg.train.h, cfg.eval.seeds, cfg.seed)?;
        control_means = (mean_by(&metrics, |r| r.psnr_davi), mean_by(&metrics, |r| r.frechet_desk_davi));
        let dp: Vec<f64> = metrics.iter().map(SeedMetrics::delta_psnr).collect();
        let df: Vec<f64> = metrics.iter().map(SeedMetrics::delta_frechet).collect();
        let task = cfg.task.name();
        rows.push(SweepRow {
            value: value.clone(),
            psnr: mean_by(&metrics, |r| r.psnr_udavi),
            frechet_desk: mean_by(&metrics, |r| r.frechet_desk_udavi),
            delta_psnr: delta_test(task, "psnr", &dp)?,
            delta_frechet_desk: delta_test(task, "frechet_desk", &df)?,
        });
        let label = format!("{}_{value}", sweep.name());
        Checkpoint::from_state(&state, &p.run_meta(&label, &train)).save(&layout.checkpoint(&label))?;
    }

    let best = |key: fn(&SweepRow) -> f64| {
        rows.iter()
            .fold(None::<&SweepRow>, |acc, r| match acc {
                Some(b) if key(b) >= key(r) => Some(b),
                _ => Some(r),
            })
            .map(|r| r.value.clone())
            .unwrap_or_default()
    };
    let report = AblationReport {
        config_hash: p.hash.clone(),
        sweep: sweep.name().into(),
        control_psnr: control_means.0,
        control_frechet_desk: control_means.1,
        best_by_psnr: best(|r| r.psnr),
        best_by_frechet_desk: best(|r| -r.frechet_desk),
        rows,
    };

    let mut table = hash_comment(&p.hash);
    writeln!(table, "# {DELTA_DEFINITIONS}").expect("string write");
    table.push_str("sweep,value,psnr,frechet_desk,delta_psnr,delta_frechet_desk,p_psnr,p_frechet_desk\n");
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in &report.rows {
        writeln!(
            table,
            "{},{},{},{},{},{},{},{}",
            report.sweep,
            r.value,
            r.psnr,
            r.frechet_desk,
            r.delta_psnr.mean_delta,
            r.delta_frechet_desk.mean_delta,
            opt(r.delta_psnr.p_value),
            opt(r.delta_frechet_desk.p_value)
        )
        .expect("string write");
    }
    write_file(&layout.root.join("ablate.csv"), &table)?;
    let mut curve_csv = hash_comment(&p.hash);
    curve_csv.push_str("sweep,value,iteration,val_psnr\n");
    for (value, curve) in &curves {
        for (it, v) in curve {
            writeln!(curve_csv, "{},{value},{it},{v}", report.sweep).expect("string write");
        }
    }
    write_file(&layout.root.join("ablate_curves.csv"), &curve_csv)?;
    write_file(&layout.root.join("ablate_summary.json"), &serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitFile {
    pub config_hash: String,
    pub train_ids: Vec<u64>,
    pub val_ids: Vec<u64>,
}

fn read_split(dir: &Path) -> Result<Option<SplitFile>> {
    let path = dir.join("split.json");
    if !path.exists() {
        return Ok(None);
    }
    Ok(Some(serde_json::from_str(&fs::read_to_string(path)?)?))
}

/// Writes the synthesized dataset, its split and a few preview images to `out/data`.
pub fn cmd_synth_data(cfg: &ExperimentConfig, out: &Path) -> Result<DatasetManifest> {
    let p = prepare(cfg)?;
    let layout = RunLayout::new(out);
    let dir = layout.data();
    let dims = cfg.dims();
    let mut all: Vec<SampleRecord> = p.train.iter().chain(&p.val).cloned().collect();
    all.sort_by_key(|r| r.sample_id);
    let manifest = manifest_for(&cfg.dataset, p.op.output_dims(dims)?, cfg.seed, &p.hash, p.clamp_rate);
    save_dataset(&dir, &manifest, &all)?;
    let split = SplitFile {
        config_hash: p.hash.clone(),
        train_ids: p.train.iter().map(|r| r.sample_id).collect(),
        val_ids: p.val.iter().map(|r| r.sample_id).collect(),
    };
    write_file(&dir.join("split.json"), &serde_json::to_string_pretty(&split)?)?;
    let comment = format!("config_hash={}", p.hash);
    for rec in all.iter().take(4) {
        let ext = pixmap_ext(&rec.x0);
        export_image(&rec.x0, &dir.join(format!("preview_x0_{}.{ext}", rec.sample_id)), Some(&comment))?;
        let y = p.op.lift_to_input(&rec.y, dims)?.clamp_model();
        export_image(&y, &dir.join(format!("preview_y_{}.{ext}", rec.sample_id)), Some(&comment))?;
    }
    info!("wrote {} records to {}", all.len(), dir.display());
    Ok(manifest)
}
