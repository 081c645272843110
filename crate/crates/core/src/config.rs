//! Experiment configuration: strict JSON schema, validation and hashing.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{hex, DatasetSpec};
use crate::error::{Error, Result};
use crate::forward_ops::{ForwardOperator, DENSE_CAP};
use crate::grid::Dims;
use crate::models::{Arch, Squash};
use crate::schedule::{ScheduleParams, ScheduleTable};
use crate::training::{student_knots, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Deblur,
    SuperRes,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Deblur => "deblur",
            Task::SuperRes => "super_res",
        }
    }
}

/// Forward-operator settings. Blur fields apply to `deblur`, `factor` to `super_res`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperatorConfig {
    #[serde(default = "default_kernel_size")]
    pub kernel_size: usize,
    #[serde(default = "default_kernel_sigma")]
    pub kernel_sigma: f64,
    #[serde(default = "default_factor")]
    pub factor: usize,
    #[serde(default = "default_noise_sigma")]
    pub noise_sigma: f64,
}

fn default_kernel_size() -> usize {
    7
}
fn default_kernel_sigma() -> f64 {
    1.5
}
fn default_factor() -> usize {
    2
}
fn default_noise_sigma() -> f64 {
    0.05
}

impl Default for OperatorConfig {
    fn default() -> Self {
        Self {
            kernel_size: default_kernel_size(),
            kernel_sigma: default_kernel_sigma(),
            factor: default_factor(),
            noise_sigma: default_noise_sigma(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GeneratorConfig {
    /// Affine map with clamped output, initialized at `init_gain · I`.
    Affine {
        #[serde(default = "default_gain")]
        init_gain: f64,
    },
    /// Encoder-decoder with a residual connection and tanh output.
    Conv {
        #[serde(default = "default_widths")]
        widths: [usize; 3],
    },
}

fn default_gain() -> f64 {
    1.0
}
fn default_widths() -> [usize; 3] {
    [8, 16, 32]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StudentConfig {
    /// Piecewise-affine noise predictor over geometric noise-level knots.
    TimeAffine {
        #[serde(default = "default_knots")]
        knots: usize,
    },
    /// Encoder-decoder with the time fraction as an extra input channel.
    Conv {
        #[serde(default = "default_widths")]
        widths: [usize; 3],
    },
}

fn default_knots() -> usize {
    12
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Inference seeds per comparison.
    #[serde(default = "default_seeds")]
    pub seeds: usize,
    /// Held-out measurements used per seed; 0 uses the whole validation split.
    #[serde(default)]
    pub measurements: usize,
    #[serde(default = "default_bins")]
    pub histogram_bins: usize,
    /// Posterior samples drawn per measurement by `infer`.
    #[serde(default = "default_infer_samples")]
    pub infer_samples: usize,
    /// Samples per measurement written as images by `infer`.
    #[serde(default = "default_export_images")]
    pub export_images: usize,
    /// Iterations between validation points on ablation curves.
    #[serde(default = "default_curve_every")]
    pub curve_every: u64,
}

fn default_seeds() -> usize {
    100
}
fn default_bins() -> usize {
    20
}
fn default_infer_samples() -> usize {
    8
}
fn default_export_images() -> usize {
    4
}
fn default_curve_every() -> u64 {
    25
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seeds: default_seeds(),
            measurements: 0,
            histogram_bins: default_bins(),
            infer_samples: default_infer_samples(),
            export_images: default_export_images(),
            curve_every: default_curve_every(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub operator: OperatorConfig,
    #[serde(default)]
    pub schedule: ScheduleParams,
    pub dataset: DatasetSpec,
    pub generator: GeneratorConfig,
    pub student: StudentConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    /// Run directory; excluded from the config hash.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<String>,
}

impl ExperimentConfig {
    /// Parses a bare config or a run's `{"config_hash", "config"}` wrapper,
    /// whose recorded hash must match.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let wrapped = value.as_object().filter(|m| m.len() == 2 && m.contains_key("config_hash") && m.contains_key("config"));
        let (inner, recorded) = match wrapped {
            Some(m) => (m["config"].clone(), m["config_hash"].as_str().map(str::to_string)),
            None => (value, None),
        };
        let cfg: Self = serde_json::from_value(inner).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        if let Some(h) = recorded {
            if h != cfg.hash() {
                return Err(Error::Config(format!("recorded config_hash {h} does not match contents {}", cfg.hash())));
            }
        }
        Ok(cfg)
    }

    /// Run-directory form carrying the hash.
    pub fn to_wrapped_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&serde_json::json!({ "config_hash": self.hash(), "config": self }))?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// SHA-256 of the canonical (sorted-key, compact) JSON without `output_dir`.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(m) = v.as_object_mut() {
            m.remove("output_dir");
        }
        hex(&Sha256::digest(v.to_string().as_bytes()))
    }

    pub fn dims(&self) -> Dims {
        self.dataset.dims()
    }

    /// Every field is checked before any compute starts.
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.train.validate()?;
        let field = |m: String| Err(Error::Config(m));
        let d = self.dims();
        let op = &self.operator;
        if !(op.noise_sigma >= 0.0 && op.noise_sigma.is_finite()) {
            return field("operator.noise_sigma must be >= 0".into());
        }
        match self.task {
            Task::Deblur => {
                if op.kernel_size % 2 == 0 || !(op.kernel_sigma > 0.0) {
                    return field("operator.kernel_size must be odd and operator.kernel_sigma > 0".into());
                }
            }
            Task::SuperRes => {
                if op.factor == 0 || d.height % op.factor != 0 || d.width % op.factor != 0 {
                    return field(format!("operator.factor {} must divide the grid {d}", op.factor));
                }
            }
        }
        ScheduleTable::from_params(&self.schedule).map_err(|e| Error::Config(format!("schedule: {e}")))?;
        self.generator_arch().validate().map_err(|e| Error::Config(format!("generator: {e}")))?;
        match &self.student {
            StudentConfig::TimeAffine { knots } if *knots == 0 => return field("student.knots must be >= 1".into()),
            StudentConfig::Conv { .. } => {
                self.student_arch_with(vec![]).validate().map_err(|e| Error::Config(format!("student: {e}")))?
            }
            _ => {}
        }
        if let GeneratorConfig::Affine { init_gain } = self.generator {
            if !init_gain.is_finite() {
                return field("generator.init_gain must be finite".into());
            }
        }
        if matches!(self.generator, GeneratorConfig::Affine { .. }) || matches!(self.student, StudentConfig::TimeAffine { .. }) {
            if d.len() > DENSE_CAP {
                return field(format!("affine models need dims.len() <= {DENSE_CAP}, got {}", d.len()));
            }
        }
        let n_val = (self.dataset.count as f64 * self.dataset.val_fraction).round() as usize;
        if n_val == 0 || n_val >= self.dataset.count {
            return field("dataset.val_fraction leaves an empty split".into());
        }
        let n_train = self.dataset.count - n_val;
        if self.train.batch_size > n_train || self.train.stage2_batch_size.unwrap_or(0) > n_train {
            return field(format!("train.batch_size exceeds the {n_train} training records"));
        }
        let ev = &self.eval;
        if ev.seeds < 2 {
            return field("eval.seeds must be >= 2".into());
        }
        if ev.histogram_bins == 0 || ev.infer_samples == 0 || ev.curve_every == 0 {
            return field("eval.histogram_bins, eval.infer_samples and eval.curve_every must be >= 1".into());
        }
        if ev.measurements > n_val {
            return field(format!("eval.measurements {} exceeds the {n_val} validation records", ev.measurements));
        }
        Ok(())
    }

    pub fn operator(&self) -> Result<ForwardOperator> {
        let op = &self.operator;
        match self.task {
            Task::Deblur => ForwardOperator::gaussian_blur(op.kernel_size, op.kernel_sigma, op.noise_sigma),
            Task::SuperRes => ForwardOperator::avg_pool(op.factor, op.noise_sigma),
        }
    }

    pub fn schedule_table(&self) -> Result<ScheduleTable> {
        ScheduleTable::from_params(&self.schedule)
    }

    pub fn generator_arch(&self) -> Arch {
        let dims = self.dims();
        match self.generator {
            GeneratorConfig::Affine { .. } => Arch::Affine { dims, squash: Squash::Clamp },
            GeneratorConfig::Conv { widths } => {
                Arch::Conv { dims, widths, time_channel: false, squash: Squash::Tanh, residual: true }
            }
        }
    }

    fn student_arch_with(&self, knots: Vec<f64>) -> Arch {
        let dims = self.dims();
        match self.student {
            StudentConfig::TimeAffine { .. } => Arch::TimeAffine { dims, knots },
            StudentConfig::Conv { widths } => {
                Arch::Conv { dims, widths, time_channel: true, squash: Squash::None, residual: false }
            }
        }
    }

    pub fn student_arch(&self, sched: &ScheduleTable) -> Result<Arch> {
        let knots = match self.student {
            StudentConfig::TimeAffine { knots } => student_knots(sched, knots)?,
            StudentConfig::Conv { .. } => vec![],
        };
        Ok(self.student_arch_with(knots))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "task": "deblur",
        "dataset": {"kind": "gaussian_prior_draws", "count": 40, "height": 8, "width": 8,
                    "prior": {"kind": "isotropic", "mean": 0.0, "std": 0.2}},
        "generator": {"kind": "affine"},
        "student": {"kind": "time_affine"},
        "train": {"gamma": 0.5, "lambda": 1.0, "h": 0.1, "memory_window": 8, "batch_size": 8,
                  "learning_rate": 1e-4, "stage1_iters": 2, "stage2_iters": 2}
    }"#;

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = ExperimentConfig::from_json(MINIMAL).unwrap();
        assert_eq!(cfg.schedule.timesteps, 400);
        assert_eq!(cfg.operator.noise_sigma, 0.05);
        assert_eq!(cfg.eval.seeds, 100);
        assert_eq!(cfg.train.beta_a, [3.0, 1.0]);
        assert_eq!(cfg.dataset.channels, 1);
    }

    #[test]
    fn unknown_keys_rejected_at_every_level() {
        for (from, to) in [
            (r#""task": "deblur","#, r#""task": "deblur", "tsak": 1,"#),
            (r#""batch_size": 8"#, r#""batch_size": 8, "lamda": 2"#),
            (r#""std": 0.2"#, r#""std": 0.2, "sd": 1"#),
            (r#""kind": "affine""#, r#""kind": "affine", "gain": 1"#),
        ] {
            let text = MINIMAL.replacen(from, to, 1);
            assert_ne!(text, MINIMAL);
            assert!(matches!(ExperimentConfig::from_json(&text), Err(Error::Config(_))), "{to}");
        }
    }

    #[test]
    fn field_level_validation_messages() {
        let cases = [
            (r#""gamma": 0.5"#, r#""gamma": -1"#, "gamma"),
            (r#""count": 40"#, r#""count": 0"#, "count"),
            (r#""batch_size": 8"#, r#""batch_size": 64"#, "batch_size"),
        ];
        for (from, to, key) in cases {
            let err = ExperimentConfig::from_json(&MINIMAL.replacen(from, to, 1)).unwrap_err().to_string();
            assert!(err.contains(key), "{err}");
        }
        let mut cfg = ExperimentConfig::from_json(MINIMAL).unwrap();
        cfg.eval.seeds = 1;
        assert!(cfg.validate().unwrap_err().to_string().contains("eval.seeds"));
        cfg = ExperimentConfig::from_json(MINIMAL).unwrap();
        cfg.task = Task::SuperRes;
        cfg.operator.factor = 3;
        assert!(cfg.validate().unwrap_err().to_string().contains("factor"));
    }

    #[test]
    fn hash_tracks_content_not_output_dir() {
        let a = ExperimentConfig::from_json(MINIMAL).unwrap();
        let mut b = a.clone();
        b.output_dir = Some("elsewhere".into());
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        let round = ExperimentConfig::from_json(&a.to_json().unwrap()).unwrap();
        assert_eq!(round.hash(), a.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn wrapped_form_checks_hash() {
        let a = ExperimentConfig::from_json(MINIMAL).unwrap();
        let wrapped = a.to_wrapped_json().unwrap();
        assert_eq!(ExperimentConfig::from_json(&wrapped).unwrap(), a);
        let tampered = wrapped.replace("\"stage1_iters\": 2", "\"stage1_iters\": 3");
        assert_ne!(tampered, wrapped);
        assert!(ExperimentConfig::from_json(&tampered).unwrap_err().to_string().contains("config_hash"));
    }
}
