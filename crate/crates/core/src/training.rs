//! Losses, the alternating student/generator step, and the two-stage curriculum.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bridge::{bridge, Guidance};
use crate::error::{Error, Result};
use crate::forward_ops::ForwardOperator;
use crate::grid::{ImageGrid, RangeTag};
use crate::memory::{init_memories, observe, SampleRecord};
use crate::models::{Arch, GaussianPrior, ParamModel, Tape, TimeInput};
use crate::optim::{AdamW, AdamWConfig};
use crate::rng::{tags, SeededRng};
use crate::schedule::ScheduleTable;

/// Losses above this (per element) or non-finite abort training.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Davi,
    UDavi,
}

/// Weighting of the denoising loss across noise levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreWeighting {
    /// `‖s_ψ − target‖²` in score space.
    #[default]
    Score,
    /// `‖ε̂ − z‖²`, the score-space loss times `1 − ᾱ_t`.
    Noise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Consistency weight.
    pub gamma: f64,
    /// Uncertainty scale for the second stage.
    pub lambda: f64,
    /// Bridge perturbation scale.
    pub h: f64,
    pub memory_window: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub stage2_batch_size: Option<usize>,
    pub learning_rate: f64,
    #[serde(default)]
    pub student_learning_rate: Option<f64>,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_beta_a")]
    pub beta_a: [f64; 2],
    pub stage1_iters: u64,
    pub stage2_iters: u64,
    #[serde(default)]
    pub student_warmup_iters: u64,
    #[serde(default)]
    pub score_weighting: ScoreWeighting,
}

fn default_weight_decay() -> f64 {
    0.01
}

fn default_beta_a() -> [f64; 2] {
    [3.0, 1.0]
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.5,
            lambda: 1.0,
            h: 0.1,
            memory_window: 8,
            batch_size: 8,
            stage2_batch_size: None,
            learning_rate: 1e-4,
            student_learning_rate: None,
            weight_decay: default_weight_decay(),
            beta_a: default_beta_a(),
            stage1_iters: 200,
            stage2_iters: 200,
            student_warmup_iters: 0,
            score_weighting: ScoreWeighting::Score,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("train.{what}")));
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return bad("gamma must be > 0");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be >= 0");
        }
        if !(self.h >= 0.0 && self.h.is_finite()) {
            return bad("h must be >= 0");
        }
        if self.memory_window == 0 {
            return bad("memory_window must be >= 1");
        }
        if self.batch_size == 0 || self.stage2_batch_size == Some(0) {
            return bad("batch sizes must be >= 1");
        }
        if self.beta_a.iter().any(|p| !(*p > 0.0)) {
            return bad("beta_a parameters must be > 0");
        }
        self.generator_optim().validate()?;
        self.student_optim().validate()?;
        Ok(())
    }

    pub fn generator_optim(&self) -> AdamWConfig {
        AdamWConfig { weight_decay: self.weight_decay, ..AdamWConfig::with_lr(self.learning_rate) }
    }

    pub fn student_optim(&self) -> AdamWConfig {
        AdamWConfig {
            weight_decay: self.weight_decay,
            ..AdamWConfig::with_lr(self.student_learning_rate.unwrap_or(self.learning_rate))
        }
    }

    pub fn batch_size_for(&self, stage: Stage) -> usize {
        match stage {
            Stage::Davi => self.batch_size,
            Stage::UDavi => self.stage2_batch_size.unwrap_or(self.batch_size),
        }
    }
}

/// Fixed inputs shared by every step.
#[derive(Debug, Clone, Copy)]
pub struct TrainContext<'a> {
    pub op: &'a ForwardOperator,
    pub prior: &'a GaussianPrior,
    pub sched: &'a ScheduleTable,
    pub cfg: &'a TrainConfig,
    pub seed: u64,
}

/// Mutable training state: both models, their optimizers, and the memory bank.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub generator: ParamModel,
    pub student: ParamModel,
    pub generator_opt: AdamW,
    pub student_opt: AdamW,
    pub records: Vec<SampleRecord>,
    /// Completed steps across both stages.
    pub iteration: u64,
    pub stage: Stage,
}

impl TrainState {
    pub fn new(generator: ParamModel, student: ParamModel, records: Vec<SampleRecord>, cfg: &TrainConfig) -> Self {
        Self {
            generator_opt: AdamW::new(cfg.generator_optim(), generator.num_params()),
            student_opt: AdamW::new(cfg.student_optim(), student.num_params()),
            generator,
            student,
            records,
            iteration: 0,
            stage: Stage::Davi,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Student,
    Generator,
    Memory,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleDraw {
    pub sample_id: u64,
    pub a: f64,
    pub t: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NfeCounts {
    pub generator: u64,
    pub student: u64,
    pub teacher: u64,
}

/// One line of the training trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub iteration: u64,
    pub stage: Stage,
    pub lambda: f64,
    /// Batch mean of `‖y − H x̂0‖²`.
    pub consistency: f64,
    /// Batch mean of the score-space denoising loss, before the student update.
    pub score: f64,
    /// Batch mean of `w(t)·⟨s_ψ − s_θ, x̂_t⟩`, whose gradient is the IKL direction.
    pub ikl_surrogate: f64,
    pub draws: Vec<SampleDraw>,
    pub nfe: NfeCounts,
    pub phases: Vec<Phase>,
    /// Batch mean of the uncertainty maps after the memory update.
    pub mean_uncertainty: Option<f64>,
}

/// `‖y − H x̂0‖²`
pub fn consistency_loss(op: &ForwardOperator, y: &ImageGrid, xhat0: &ImageGrid) -> Result<f64> {
    Ok(consistency_grad(op, y, xhat0)?.0)
}

/// `(‖y − H x̂0‖², 2 Hᵀ(H x̂0 − y))`
pub fn consistency_grad(op: &ForwardOperator, y: &ImageGrid, xhat0: &ImageGrid) -> Result<(f64, Vec<f64>)> {
    let hx = op.apply(xhat0)?;
    hx.ensure_same_dims(y, "consistency residual")?;
    let resid: Vec<f64> = hx.values().iter().zip(y.values()).map(|(a, b)| a - b).collect();
    let loss = resid.iter().map(|r| r * r).sum();
    let mut g = vec![0.0; xhat0.len()];
    op.adjoint_into(&resid, xhat0.dims(), &mut g);
    g.iter_mut().for_each(|v| *v *= 2.0);
    Ok((loss, g))
}

/// Score-space denoising loss `‖s_ψ(x̂_t, t) + z/σ_t‖²` with `x̂_t = diffuse(x̂0, t, z)`.
pub fn score_matching_loss(
    student: &ParamModel,
    xhat0: &ImageGrid,
    t: usize,
    z: &ImageGrid,
    sched: &ScheduleTable,
) -> Result<f64> {
    Ok(score_matching_grad(student, xhat0, t, z, sched, ScoreWeighting::Score)?.0)
}

/// Score-space loss and the parameter gradient of the weighted loss.
pub fn score_matching_grad(
    student: &ParamModel,
    xhat0: &ImageGrid,
    t: usize,
    z: &ImageGrid,
    sched: &ScheduleTable,
    weighting: ScoreWeighting,
) -> Result<(f64, Vec<f64>)> {
    let xt = sched.diffuse(xhat0, t, z)?;
    let time = TimeInput::at(t, sched)?;
    let inv_var = 1.0 / (time.sigma * time.sigma);
    let scale = match weighting {
        ScoreWeighting::Score => inv_var,
        ScoreWeighting::Noise => 1.0,
    };
    let mut score_loss = 0.0;
    let (_, grad) = student.param_grad(xt.values(), Some(time), |eps| {
        let r: Vec<f64> = eps.iter().zip(z.values()).map(|(e, z)| e - z).collect();
        let sq: f64 = r.iter().map(|v| v * v).sum();
        score_loss = sq * inv_var;
        (sq * scale, r.iter().map(|v| 2.0 * scale * v).collect())
    })?;
    Ok((score_loss, grad))
}

/// IKL direction for one sample with respect to `x̂0`: `sqrt(ᾱ_t)·w(t)·(s_ψ − s_θ)`,
/// with the score difference held constant. Also returns the surrogate value.
pub fn ikl_output_grad(
    student: &ParamModel,
    prior: &GaussianPrior,
    xhat_t: &ImageGrid,
    t: usize,
    sched: &ScheduleTable,
) -> Result<(f64, Vec<f64>)> {
    let time = TimeInput::at(t, sched)?;
    let ab = sched.alpha_bar(t)?;
    let w = sched.ikl_weight(t)?;
    let eps = student.forward(xhat_t.values(), Some(time))?;
    let teacher = prior.score(xhat_t.values(), ab)?;
    let delta: Vec<f64> = eps.iter().zip(&teacher).map(|(e, s)| w * (-e / time.sigma - s)).collect();
    if delta.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("score difference".into()));
    }
    let surrogate = delta.iter().zip(xhat_t.values()).map(|(d, x)| d * x).sum();
    let root = ab.sqrt();
    Ok((surrogate, delta.iter().map(|d| root * d).collect()))
}

/// IKL gradient with respect to the generator parameters, given the tape of
/// the generator pass that produced `x̂0`.
pub fn ikl_generator_grad(
    generator: &ParamModel,
    tape: &Tape,
    student: &ParamModel,
    prior: &GaussianPrior,
    xhat_t: &ImageGrid,
    t: usize,
    sched: &ScheduleTable,
) -> Result<Vec<f64>> {
    let (_, g_out) = ikl_output_grad(student, prior, xhat_t, t, sched)?;
    Ok(generator.backward(tape, &g_out)?.params)
}

/// Noise-level knots for a time-affine student, geometric from `σ_1` to `σ_T`.
pub fn student_knots(sched: &ScheduleTable, count: usize) -> Result<Vec<f64>> {
    if count == 0 {
        return Err(Error::Config("student knot count must be >= 1".into()));
    }
    let lo = sched.sigma(1)?;
    let hi = sched.sigma(sched.timesteps())?;
    if count == 1 || hi <= lo {
        return Ok(vec![lo]);
    }
    Ok((0..count).map(|k| lo * (hi / lo).powf(k as f64 / (count - 1) as f64)).collect())
}

/// Student initialized from the teacher. Time-affine students copy the
/// teacher's exact noise predictor at each knot (moment-matched for mixtures);
/// other architectures start from the default initialization.
pub fn init_student(arch: Arch, prior: &GaussianPrior, rng: &mut SeededRng) -> Result<ParamModel> {
    match &arch {
        Arch::TimeAffine { knots, dims } => {
            if *dims != prior.dims() {
                return Err(Error::Shape(format!("student dims {dims} vs prior {}", prior.dims())));
            }
            let gauss = if prior.is_single() {
                prior.clone()
            } else {
                GaussianPrior::single(prior.dims(), prior.mean(), prior.covariance())?
            };
            let mut params = Vec::with_capacity(arch.num_params());
            for &s in knots {
                let (w, b) = gauss.epsilon_affine(1.0 - s * s)?;
                params.extend(w);
                params.extend(b);
            }
            ParamModel::new(arch, params)
        }
        _ => ParamModel::init(arch, rng),
    }
}

/// Denoising fits of the student to draws from the teacher prior.
pub fn warm_up_student(state: &mut TrainState, ctx: &TrainContext<'_>, iters: u64) -> Result<()> {
    let dims = state.student.dims();
    let root = SeededRng::new(ctx.seed).derive(&[tags::INIT_PARAMS, 1]);
    let t_max = ctx.sched.timesteps() as u64;
    for k in 0..iters {
        let batch: Vec<(f64, Vec<f64>)> = (0..ctx.cfg.batch_size as u64)
            .into_par_iter()
            .map(|j| {
                let mut rng = root.derive(&[k, j]);
                let x0 = ImageGrid::new(dims, ctx.prior.sample(&mut rng), RangeTag::Unbounded)?;
                let t = rng.uniform_int(1, t_max) as usize;
                let z = rng.gaussian_grid(dims);
                score_matching_grad(&state.student, &x0, t, &z, ctx.sched, ctx.cfg.score_weighting)
            })
            .collect::<Result<_>>()?;
        let (loss, grad) = mean_of(&batch, state.student.num_params());
        guard(k, "student warm-up loss", loss / dims.len() as f64)?;
        state.student_opt.update(state.student.params_mut(), &grad)?;
    }
    Ok(())
}

fn mean_of(items: &[(f64, Vec<f64>)], n: usize) -> (f64, Vec<f64>) {
    let mut loss = 0.0;
    let mut grad = vec![0.0; n];
    for (l, g) in items {
        loss += l;
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    let inv = 1.0 / items.len() as f64;
    grad.iter_mut().for_each(|v| *v *= inv);
    (loss * inv, grad)
}

fn guard(iteration: u64, what: &str, value: f64) -> Result<()> {
    if !value.is_finite() || value.abs() > DIVERGENCE_LIMIT {
        return Err(Error::Divergence { iteration, reason: format!("{what} = {value}") });
    }
    Ok(())
}

struct Forward {
    draw: SampleDraw,
    xhat0: ImageGrid,
    tape: Tape,
    xhat_t: ImageGrid,
    z_diffuse: ImageGrid,
}

/// One alternating update on a batch. `lambda` is used only in the second stage.
pub fn train_step(state: &mut TrainState, ctx: &TrainContext<'_>, lambda: f64) -> Result<StepTrace> {
    let cfg = ctx.cfg;
    let stage = state.stage;
    let lambda = if stage == Stage::Davi { 0.0 } else { lambda };
    let iteration = state.iteration;
    let n = state.records.len();
    let bsz = cfg.batch_size_for(stage);
    if bsz > n {
        return Err(Error::Config(format!("batch size {bsz} exceeds {n} training records")));
    }
    let root = SeededRng::new(ctx.seed);
    let batch: Vec<usize> = root.derive(&[tags::BATCH, iteration]).permutation(n)[..bsz].to_vec();
    let dims = state.generator.dims();
    let t_max = ctx.sched.timesteps() as u64;

    // bridge draw, generator pass, diffusion
    let generator = &state.generator;
    let records = &state.records;
    let fwd: Vec<Forward> = batch
        .par_iter()
        .map(|&idx| {
            let rec = &records[idx];
            let mut rng = root.derive(&[tags::TRAIN, iteration, rec.sample_id]);
            let a = rng.beta(cfg.beta_a[0], cfg.beta_a[1]);
            let z_bridge = rng.gaussian_grid(dims);
            let t = rng.uniform_int(1, t_max) as usize;
            let z_diffuse = rng.gaussian_grid(dims);
            let y_img = ctx.op.lift_to_input(&rec.y, dims)?;
            let guidance = match stage {
                Stage::Davi => None,
                Stage::UDavi => Some(Guidance { uncertainty: &rec.uncertainty, lambda }),
            };
            let draw_b = bridge(&rec.x0, &y_img, a, cfg.h, &z_bridge, guidance, ctx.sched)?;
            let (out, tape) = generator.forward_tape(draw_b.y_a.values(), None)?;
            let xhat0 = ImageGrid::new(dims, out, RangeTag::Model)?;
            let xhat_t = ctx.sched.diffuse(&xhat0, t, &z_diffuse)?;
            Ok(Forward { draw: SampleDraw { sample_id: rec.sample_id, a, t }, xhat0, tape, xhat_t, z_diffuse })
        })
        .collect::<Result<_>>()?;
    let mut phases = Vec::with_capacity(3);

    // student update
    let student = &state.student;
    let sm: Vec<(f64, Vec<f64>)> = fwd
        .par_iter()
        .map(|f| score_matching_grad(student, &f.xhat0, f.draw.t, &f.z_diffuse, ctx.sched, cfg.score_weighting))
        .collect::<Result<_>>()?;
    let mut score = 0.0;
    let mut sgrad = vec![0.0; student.num_params()];
    for (l, g) in &sm {
        score += l;
        for (a, b) in sgrad.iter_mut().zip(g) {
            *a += b;
        }
    }
    let inv_b = 1.0 / bsz as f64;
    sgrad.iter_mut().for_each(|v| *v *= inv_b);
    score *= inv_b;
    guard(iteration, "score loss per element", score / dims.len() as f64)?;
    state.student_opt.update(state.student.params_mut(), &sgrad)?;
    phases.push(Phase::Student);

    // generator update against the refreshed student
    let student = &state.student;
    let generator = &state.generator;
    let gen_terms: Vec<(f64, f64, Vec<f64>)> = fwd
        .par_iter()
        .zip(&batch)
        .map(|(f, &idx)| {
            let (cons, g_cons) = consistency_grad(ctx.op, &records[idx].y, &f.xhat0)?;
            let (sur, g_ikl) = ikl_output_grad(student, ctx.prior, &f.xhat_t, f.draw.t, ctx.sched)?;
            let g_out: Vec<f64> = g_cons.iter().zip(&g_ikl).map(|(c, i)| cfg.gamma * c + i).collect();
            Ok((cons, sur, generator.backward(&f.tape, &g_out)?.params))
        })
        .collect::<Result<_>>()?;
    let mut consistency = 0.0;
    let mut ikl_surrogate = 0.0;
    let mut ggrad = vec![0.0; generator.num_params()];
    for (c, s, g) in &gen_terms {
        consistency += c;
        ikl_surrogate += s;
        for (a, b) in ggrad.iter_mut().zip(g) {
            *a += b;
        }
    }
    consistency *= inv_b;
    ikl_surrogate *= inv_b;
    ggrad.iter_mut().for_each(|v| *v *= inv_b);
    let y_len = records[batch[0]].y.len() as f64;
    guard(iteration, "consistency loss per element", consistency / y_len)?;
    guard(iteration, "ikl surrogate per element", ikl_surrogate / dims.len() as f64)?;
    state.generator_opt.update(state.generator.params_mut(), &ggrad)?;
    phases.push(Phase::Generator);

    // uncertainty maps and memories
    let mut mean_uncertainty = None;
    if stage == Stage::UDavi {
        let mut acc = 0.0;
        for (f, &idx) in fwd.iter().zip(&batch) {
            let rec = &mut state.records[idx];
            observe(rec, &f.xhat0, cfg.memory_window)?;
            acc += rec.uncertainty.mean();
        }
        mean_uncertainty = Some(acc * inv_b);
        phases.push(Phase::Memory);
    }

    state.iteration += 1;
    let b = bsz as u64;
    Ok(StepTrace {
        iteration,
        stage,
        lambda,
        consistency,
        score,
        ikl_surrogate,
        draws: fwd.iter().map(|f| f.draw).collect(),
        nfe: NfeCounts { generator: b, student: 2 * b, teacher: b },
        phases,
        mean_uncertainty,
    })
}

/// Switches to the second stage: memories start at the current generator's
/// reconstruction of an `a = 1` bridge input, uncertainty maps at zero.
pub fn begin_stage2(state: &mut TrainState, ctx: &TrainContext<'_>) -> Result<()> {
    let root = SeededRng::new(ctx.seed);
    let dims = state.generator.dims();
    let generator = state.generator.clone();
    init_memories(&mut state.records, |rec| {
        let mut rng = root.derive(&[tags::MEMORY_INIT, rec.sample_id]);
        let z = rng.gaussian_grid(dims);
        let y_img = ctx.op.lift_to_input(&rec.y, dims)?;
        let b = bridge(&rec.x0, &y_img, 1.0, ctx.cfg.h, &z, None, ctx.sched)?;
        ImageGrid::new(dims, generator.forward(b.y_a.values(), None)?, RangeTag::Model)
    })?;
    state.stage = Stage::UDavi;
    Ok(())
}

/// Runs `iters` steps, handing each trace to `sink`.
pub fn run_stage(
    state: &mut TrainState,
    ctx: &TrainContext<'_>,
    iters: u64,
    lambda: f64,
    sink: &mut dyn FnMut(&StepTrace) -> Result<()>,
) -> Result<()> {
    for _ in 0..iters {
        let trace = train_step(state, ctx, lambda)?;
        sink(&trace)?;
    }
    Ok(())
}

/// Result of the two-stage curriculum.
#[derive(Debug, Clone)]
pub struct TwoStageOutput {
    pub stage1: TrainState,
    pub stage2: TrainState,
}

/// Stage 1 with `λ = 0`, memory initialization, then stage 2 with `cfg.lambda`.
pub fn run_two_stage(
    mut state: TrainState,
    ctx: &TrainContext<'_>,
    sink: &mut dyn FnMut(&StepTrace) -> Result<()>,
) -> Result<TwoStageOutput> {
    if state.records.is_empty() {
        return Err(Error::InvalidArgument("training needs a non-empty dataset".into()));
    }
    if ctx.cfg.student_warmup_iters > 0 && state.iteration == 0 {
        warm_up_student(&mut state, ctx, ctx.cfg.student_warmup_iters)?;
    }
    state.stage = Stage::Davi;
    run_stage(&mut state, ctx, ctx.cfg.stage1_iters, 0.0, sink)?;
    let stage1 = state.clone();
    if ctx.cfg.stage2_iters > 0 {
        begin_stage2(&mut state, ctx)?;
        run_stage(&mut state, ctx, ctx.cfg.stage2_iters, ctx.cfg.lambda, sink)?;
    }
    Ok(TwoStageOutput { stage1, stage2: state })
}
