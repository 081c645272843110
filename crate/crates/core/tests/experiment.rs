use std::fs;
use std::path::Path;

use udavi_core::checkpoint::Checkpoint;
use udavi_core::config::ExperimentConfig;
use udavi_core::experiment::*;
use udavi_core::image_io::read_image;
use udavi_core::{Error, RangeTag};

fn tiny(extra: &str) -> ExperimentConfig {
    let text = format!(
        r#"{{
        "task": "deblur",
        "seed": 5,
        "operator": {{ "kernel_size": 3, "kernel_sigma": 0.8 }},
        "schedule": {{ "timesteps": 50, "beta_start": 0.0001, "beta_end": 0.02 }},
        "dataset": {{ "kind": "procedural_textures", "count": 44, "height": 8, "width": 8,
                     "prior": {{ "kind": "fitted", "samples": 100, "ridge": 0.001 }}, "val_fraction": 0.5 }},
        "generator": {{ "kind": "conv", "widths": [2, 4, 4] }},
        "student": {{ "kind": "time_affine", "knots": 3 }},
        "train": {{ "gamma": 5.0, "lambda": 1.0, "h": 0.1, "memory_window": 4, "batch_size": 4,
                    "learning_rate": 0.001, "stage1_iters": 4, "stage2_iters": 4 {extra} }},
        "eval": {{ "seeds": 6, "histogram_bins": 4, "infer_samples": 3, "export_images": 2, "curve_every": 2 }}
    }}"#
    );
    ExperimentConfig::from_json(&text).unwrap()
}

fn data_lines(path: &Path) -> Vec<String> {
    fs::read_to_string(path).unwrap().lines().filter(|l| !l.starts_with('#')).map(String::from).collect()
}

#[test]
fn train_writes_layout_and_is_reproducible() {
    let cfg = tiny("");
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let oa = cmd_train(&cfg, a.path()).unwrap();
    let ob = cmd_train(&cfg, b.path()).unwrap();
    assert_eq!((oa.stage2_params.clone(), oa.control_params.clone()), (ob.stage2_params, ob.control_params));
    let layout = RunLayout::new(a.path());
    for p in [layout.config(), layout.traces(), layout.control_traces(), oa.stage1.clone(), oa.stage2.clone(), oa.control.clone()] {
        assert!(p.exists(), "{}", p.display());
    }
    let traces = fs::read_to_string(layout.traces()).unwrap();
    let mut lines = traces.lines();
    assert!(lines.next().unwrap().contains(&cfg.hash()));
    assert_eq!(lines.count(), 8);
    assert_eq!(ExperimentConfig::load(&layout.config()).unwrap(), cfg);
    let s2 = Checkpoint::load(&oa.stage2).unwrap();
    assert_eq!(s2.header.config_hash, cfg.hash());
    assert_eq!(s2.header.iteration, 8);
    assert_ne!(oa.stage2_params, oa.control_params);
}

#[test]
fn zero_lambda_stage_two_matches_control() {
    let cfg = tiny(r#", "stage2_batch_size": 6"#);
    let mut zero = cfg.clone();
    zero.train.lambda = 0.0;
    let dir = tempfile::tempdir().unwrap();
    let o = cmd_train(&zero, dir.path()).unwrap();
    assert_eq!(o.stage2_params, o.control_params);
    let s2 = Checkpoint::load(&o.stage2).unwrap();
    let ctl = Checkpoint::load(&o.control).unwrap();
    assert_eq!(s2.generator, ctl.generator);
    assert_eq!(s2.student, ctl.student);
}

#[test]
fn infer_reports_one_evaluation_per_sample() {
    let cfg = tiny("");
    let dir = tempfile::tempdir().unwrap();
    let o = cmd_train(&cfg, dir.path()).unwrap();
    let r = cmd_infer(&cfg, &o.stage2, None, 5, dir.path()).unwrap();
    assert_eq!(r.nfe_per_sample, 1.0);
    assert_eq!(r.generator_evaluations, (r.measurements * 5) as u64);
    assert!(r.samples_distinct);
    let nfe = data_lines(&dir.path().join("nfe.csv"));
    assert_eq!(nfe.len(), r.measurements + 1);
    assert!(nfe[1..].iter().all(|l| l.ends_with(",5,5,1")));
    let img = fs::read_dir(RunLayout::new(dir.path()).images()).unwrap().next().unwrap().unwrap().path();
    assert_eq!(read_image(&img, RangeTag::Model).unwrap().dims(), cfg.dims());

    let mut still = cfg.clone();
    still.train.h = 0.0;
    let d2 = tempfile::tempdir().unwrap();
    let o2 = cmd_train(&still, d2.path()).unwrap();
    assert!(!cmd_infer(&still, &o2.stage2, None, 4, d2.path()).unwrap().samples_distinct);
}

#[test]
fn infer_rejects_schedule_mismatch() {
    let cfg = tiny("");
    let dir = tempfile::tempdir().unwrap();
    let o = cmd_train(&cfg, dir.path()).unwrap();
    let mut other = cfg.clone();
    other.schedule.timesteps = 60;
    assert!(matches!(cmd_infer(&other, &o.stage2, None, 2, dir.path()), Err(Error::Checkpoint(_))));
}

#[test]
fn synth_data_feeds_infer() {
    let cfg = tiny("");
    let dir = tempfile::tempdir().unwrap();
    let m = cmd_synth_data(&cfg, dir.path()).unwrap();
    assert_eq!(m.count, 44);
    let o = cmd_train(&cfg, dir.path()).unwrap();
    let r = cmd_infer(&cfg, &o.stage1, Some(&RunLayout::new(dir.path()).data()), 2, dir.path()).unwrap();
    assert_eq!(r.measurements, 22);
}

#[test]
fn eval_outputs_and_sign_conventions() {
    let cfg = tiny("");
    let dir = tempfile::tempdir().unwrap();
    let o = cmd_train(&cfg, dir.path()).unwrap();
    let s = cmd_eval(&cfg, &o.control, &o.stage2, dir.path()).unwrap();
    let layout = RunLayout::new(dir.path());
    let metrics = data_lines(&layout.metrics());
    assert_eq!(metrics.len(), cfg.eval.seeds + 1);
    assert_eq!(data_lines(&layout.deltas()).len(), cfg.eval.seeds + 1);
    for row in &metrics[1..] {
        let f: Vec<f64> = row.split(',').skip(2).map(|v| v.parse().unwrap()).collect();
        assert_eq!(f[4], f[1] - f[0]);
        assert_eq!(f[5], f[2] - f[3]);
    }
    let hist = data_lines(&layout.histogram());
    assert_eq!(hist.len(), 1 + 2 * cfg.eval.histogram_bins);
    let counted: usize = hist[1..].iter().map(|l| l.rsplit(',').next().unwrap().parse::<usize>().unwrap()).sum();
    assert_eq!(counted, 2 * cfg.eval.seeds);
    assert_eq!(s.tests.len(), 2);
    assert!(fs::read_to_string(layout.metrics()).unwrap().starts_with(&format!("# config_hash={}", cfg.hash())));

    let same = cmd_eval(&cfg, &o.stage2, &o.stage2, dir.path()).unwrap();
    assert!(same.tests.iter().all(|t| t.zero_variance && t.mean_delta == 0.0 && t.p_value.is_none()));

    let mut other = cfg.clone();
    other.train.gamma = 6.0;
    assert!(matches!(cmd_eval(&other, &o.control, &o.stage2, dir.path()), Err(Error::Config(_))));
    let mut few = cfg.clone();
    few.eval.seeds = 1;
    assert!(cmd_eval(&few, &o.control, &o.stage2, dir.path()).is_err());

    let table = dir.path().join("pvalues.csv");
    write_pvalue_table(&[s.clone(), s], &table).unwrap();
    assert_eq!(data_lines(&table).len(), 5);
}

#[test]
fn ablation_sweeps() {
    let cfg = tiny("");
    let dir = tempfile::tempdir().unwrap();
    let r = cmd_ablate(&cfg, &Sweep::Lambda(vec![0.5, 1.0, 2.0]), dir.path()).unwrap();
    assert_eq!(r.rows.len(), 3);
    assert_eq!(data_lines(&dir.path().join("ablate.csv")).len(), 4);
    assert!(r.rows.iter().any(|row| row.value == r.best_by_psnr));

    let d2 = tempfile::tempdir().unwrap();
    let n = cmd_ablate(&cfg, &Sweep::MemoryWindow(vec![4, 8, 16]), d2.path()).unwrap();
    assert_eq!(n.sweep, "memory_window");
    let curves = data_lines(&d2.path().join("ablate_curves.csv"));
    // control plus three values, each with the start point and two chunks
    assert_eq!(curves.len(), 1 + 4 * 3);
    assert!(cmd_ablate(&cfg, &Sweep::Lambda(vec![]), d2.path()).is_err());
}

#[test]
fn single_value_sweep_matches_train_and_eval() {
    let cfg = tiny("");
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let r = cmd_ablate(&cfg, &Sweep::Lambda(vec![1.0]), a.path()).unwrap();
    let o = cmd_train(&cfg, b.path()).unwrap();
    let s = cmd_eval(&cfg, &o.control, &o.stage2, b.path()).unwrap();
    assert_eq!(r.rows[0].delta_psnr.mean_delta, s.tests[0].mean_delta);
    assert_eq!(r.rows[0].psnr, s.psnr_udavi_mean);
}

#[test]
fn pipeline_metrics_are_bit_identical() {
    let cfg = tiny("");
    let run = |dir: &Path| {
        cmd_synth_data(&cfg, dir).unwrap();
        let o = cmd_train(&cfg, dir).unwrap();
        cmd_eval(&cfg, &o.control, &o.stage2, dir).unwrap();
        fs::read(RunLayout::new(dir).metrics()).unwrap()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert_eq!(run(a.path()), run(b.path()));
}
