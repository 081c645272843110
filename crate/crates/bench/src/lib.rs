//! Shared fixtures for the kernel benchmarks.

use udavi_core::config::ExperimentConfig;

/// 16x16 grayscale texture deblurring setup at the default desk scale.
pub fn desk_config() -> ExperimentConfig {
    ExperimentConfig::from_json(
        r#"{
        "task": "deblur", "seed": 1,
        "dataset": { "kind": "procedural_textures", "count": 64, "height": 16, "width": 16,
                     "prior": { "kind": "fitted", "samples": 400, "ridge": 0.001 } },
        "generator": { "kind": "conv", "widths": [8, 16, 32] },
        "student": { "kind": "time_affine", "knots": 12 },
        "train": { "gamma": 330.0, "lambda": 1.0, "h": 0.1, "memory_window": 8, "batch_size": 8,
                   "learning_rate": 0.001, "stage1_iters": 1, "stage2_iters": 1 },
        "eval": { "seeds": 2 }
    }"#,
    )
    .expect("bench config parses")
}
