//! Synthetic datasets with known generating distributions, splits, and an
//! on-disk cache.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::forward_ops::ForwardOperator;
use crate::grid::{Dims, ImageGrid, RangeTag};
use crate::memory::SampleRecord;
use crate::models::prior::{fit_gaussian, isotropic_cov, smooth_cov};
use crate::models::{GaussianComponent, GaussianPrior};
use crate::rng::{tags, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    GaussianPriorDraws,
    GmmDraws,
    ProceduralTextures,
}

/// One mixture component: constant mean, isotropic or smooth covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentSpec {
    pub weight: f64,
    pub mean: f64,
    pub std: f64,
    #[serde(default)]
    pub length_scale: Option<f64>,
    #[serde(default)]
    pub nugget: f64,
}

/// Prior parameters. `Fitted` fits a Gaussian to a separate draw of the
/// dataset generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PriorSpec {
    Isotropic { mean: f64, std: f64 },
    Smooth { mean: f64, std: f64, length_scale: f64, nugget: f64 },
    Mixture { components: Vec<ComponentSpec> },
    Fitted { samples: usize, ridge: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub count: usize,
    pub height: usize,
    pub width: usize,
    #[serde(default = "one")]
    pub channels: usize,
    pub prior: PriorSpec,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
}

fn one() -> usize {
    1
}

fn default_val_fraction() -> f64 {
    0.2
}

impl DatasetSpec {
    pub fn dims(&self) -> Dims {
        Dims::new(self.height, self.width, self.channels)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("dataset.{m}")));
        if self.count == 0 {
            return bad("count must be >= 1".into());
        }
        if self.dims().is_empty() {
            return bad(format!("dims {} must be positive", self.dims()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad("val_fraction must lie in (0, 1)".into());
        }
        match (&self.kind, &self.prior) {
            (DatasetKind::GaussianPriorDraws, PriorSpec::Isotropic { .. } | PriorSpec::Smooth { .. }) => {}
            (DatasetKind::GmmDraws, PriorSpec::Mixture { .. }) => {}
            (DatasetKind::ProceduralTextures, _) => {}
            (k, p) => return bad(format!("prior {p:?} does not generate {k:?} data")),
        }
        match &self.prior {
            PriorSpec::Isotropic { std, .. } | PriorSpec::Smooth { std, .. } if !(*std > 0.0) => {
                bad("prior.std must be > 0".into())
            }
            PriorSpec::Smooth { length_scale, nugget, .. } if !(*length_scale > 0.0 && *nugget > 0.0) => {
                bad("prior.length_scale and prior.nugget must be > 0".into())
            }
            PriorSpec::Mixture { components } if components.is_empty() => bad("prior.components is empty".into()),
            PriorSpec::Fitted { samples, ridge } if *samples < 2 || !(*ridge > 0.0) => {
                bad("prior.samples must be >= 2 and prior.ridge > 0".into())
            }
            _ => Ok(()),
        }
    }

    /// SHA-256 of the prior parameters, grid and kind.
    pub fn prior_hash(&self) -> String {
        let key = serde_json::json!({ "kind": self.kind, "dims": self.dims(), "prior": self.prior });
        hex(&Sha256::digest(key.to_string().as_bytes()))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Builds the analytic prior described by a dataset spec. Every consumer (data
/// generation, teacher, oracle) takes the prior from here.
pub fn build_prior(spec: &DatasetSpec, seed: u64) -> Result<GaussianPrior> {
    let d = spec.dims();
    let n = d.len();
    let cov_for = |std: f64, ls: Option<f64>, nugget: f64| match ls {
        Some(l) => smooth_cov(d, std, l, nugget),
        None => isotropic_cov(n, std).add_diag(nugget),
    };
    match &spec.prior {
        PriorSpec::Isotropic { mean, std } => GaussianPrior::single(d, vec![*mean; n], isotropic_cov(n, *std)),
        PriorSpec::Smooth { mean, std, length_scale, nugget } => {
            GaussianPrior::single(d, vec![*mean; n], smooth_cov(d, *std, *length_scale, *nugget))
        }
        PriorSpec::Mixture { components } => GaussianPrior::mixture(
            d,
            components
                .iter()
                .map(|c| GaussianComponent {
                    weight: c.weight,
                    mean: vec![c.mean; n],
                    cov: cov_for(c.std, c.length_scale, c.nugget),
                })
                .collect(),
        ),
        PriorSpec::Fitted { samples, ridge } => {
            let root = SeededRng::new(seed).derive(&[tags::PRIOR_FIT]);
            let draws: Vec<Vec<f64>> = (0..*samples as u64)
                .map(|k| procedural_texture(d, &mut root.derive(&[k])).into_values())
                .collect();
            fit_gaussian(d, &draws, *ridge)
        }
    }
}

/// Sinusoids plus step edges plus a fine-stripe patch, in `[-0.9, 0.9]`.
pub fn procedural_texture(d: Dims, rng: &mut SeededRng) -> ImageGrid {
    use std::f64::consts::PI;
    let (h, w) = (d.height as f64, d.width as f64);
    let waves: Vec<(f64, f64, f64, f64)> = (0..2)
        .map(|_| {
            let freq = 1.0 + 3.0 * rng.uniform();
            let theta = PI * rng.uniform();
            let phase = 2.0 * PI * rng.uniform();
            let amp = 0.15 + 0.2 * rng.uniform();
            (freq, theta, phase, amp)
        })
        .collect();
    let edges: Vec<(f64, f64, f64, f64)> = (0..2)
        .map(|_| {
            let theta = 2.0 * PI * rng.uniform();
            let offset = (rng.uniform() - 0.5) * 0.6;
            let amp = (rng.uniform() - 0.5) * 0.8;
            (theta.cos(), theta.sin(), offset, amp)
        })
        .collect();
    let (cy, cx) = (rng.uniform(), rng.uniform());
    let radius = 0.2 + 0.15 * rng.uniform();
    let stripe_freq = d.width as f64 / 3.0;
    let stripe_amp = 0.1 + 0.15 * rng.uniform();
    let base = (rng.uniform() - 0.5) * 0.3;
    let tints: Vec<f64> = (0..d.channels).map(|_| 0.9 + 0.2 * rng.uniform()).collect();

    let mut values = Vec::with_capacity(d.len());
    for i in 0..d.height {
        for j in 0..d.width {
            let (u, v) = ((i as f64 + 0.5) / h, (j as f64 + 0.5) / w);
            let mut s = base;
            for &(f, th, ph, a) in &waves {
                s += a * (2.0 * PI * f * (u * th.cos() + v * th.sin()) + ph).sin();
            }
            for &(nx, ny, off, a) in &edges {
                if (u - 0.5) * nx + (v - 0.5) * ny > off {
                    s += a;
                }
            }
            if (u - cy).powi(2) + (v - cx).powi(2) < radius * radius {
                s += stripe_amp * (PI * stripe_freq * v * 2.0).sin().signum();
            }
            for &t in &tints {
                values.push((s * t).clamp(-0.9, 0.9));
            }
        }
    }
    ImageGrid::new(d, values, RangeTag::Model).expect("texture values are clamped to the model range")
}

/// Clean images plus the fraction of values that hit the `[-1, 1]` clamp.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub images: Vec<ImageGrid>,
    pub clamp_rate: f64,
}

pub fn synth_dataset(spec: &DatasetSpec, prior: &GaussianPrior, seed: u64) -> Result<SynthOutput> {
    spec.validate()?;
    let d = spec.dims();
    if prior.dims() != d {
        return Err(Error::Shape(format!("prior over {} for a {d} dataset", prior.dims())));
    }
    let root = SeededRng::new(seed).derive(&[tags::DATASET]);
    let mut clamped = 0usize;
    let mut images = Vec::with_capacity(spec.count);
    for k in 0..spec.count as u64 {
        let mut rng = root.derive(&[k]);
        let img = match spec.kind {
            DatasetKind::ProceduralTextures => procedural_texture(d, &mut rng),
            DatasetKind::GaussianPriorDraws | DatasetKind::GmmDraws => {
                let raw = prior.sample(&mut rng);
                clamped += raw.iter().filter(|v| v.abs() > 1.0).count();
                ImageGrid::new(d, raw.iter().map(|v| v.clamp(-1.0, 1.0)).collect(), RangeTag::Model)?
            }
        };
        images.push(img);
    }
    let clamp_rate = clamped as f64 / (spec.count * d.len()) as f64;
    info!("synthesized {} {:?} images on {d}; clamp rate {clamp_rate:.3e}", spec.count, spec.kind);
    Ok(SynthOutput { images, clamp_rate })
}

/// Records with seeded measurements `y = H x0 + n`.
pub fn measure_all(images: &[ImageGrid], op: &ForwardOperator, seed: u64) -> Result<Vec<SampleRecord>> {
    let root = SeededRng::new(seed).derive(&[tags::MEASURE]);
    images
        .iter()
        .enumerate()
        .map(|(k, x0)| {
            let y = op.measure(x0, &mut root.derive(&[k as u64]))?;
            Ok(SampleRecord::new(k as u64, x0.clone(), y))
        })
        .collect()
}

/// Seeded disjoint split; the validation side gets `round(n · val_fraction)` records.
pub fn train_val_split(
    records: Vec<SampleRecord>,
    val_fraction: f64,
    rng: &mut SeededRng,
) -> Result<(Vec<SampleRecord>, Vec<SampleRecord>)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!("val_fraction {val_fraction} outside (0, 1)")));
    }
    let n = records.len();
    let n_val = (n as f64 * val_fraction).round() as usize;
    if n_val == 0 || n_val == n {
        return Err(Error::InvalidArgument(format!(
            "split of {n} records at {val_fraction} leaves one side empty"
        )));
    }
    let perm = rng.permutation(n);
    let mut is_val = vec![false; n];
    for &p in &perm[..n_val] {
        is_val[p] = true;
    }
    let (mut train, mut val) = (Vec::with_capacity(n - n_val), Vec::with_capacity(n_val));
    for (k, rec) in records.into_iter().enumerate() {
        if is_val[k] {
            val.push(rec);
        } else {
            train.push(rec);
        }
    }
    Ok((train, val))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub kind: DatasetKind,
    pub dims: Dims,
    pub measurement_dims: Dims,
    pub count: usize,
    pub seed: u64,
    pub prior_hash: String,
    pub config_hash: String,
    pub clamp_rate: f64,
    pub x0_file: String,
    pub y_file: String,
}

const DATASET_FORMAT: u32 = 1;

fn write_f64s(path: &Path, grids: &[ImageGrid]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for g in grids {
        for v in g.values() {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    f.flush()?;
    Ok(())
}

fn read_f64s(path: &Path, dims: Dims, count: usize, range: RangeTag) -> Result<Vec<ImageGrid>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let per = dims.len() * 8;
    if bytes.len() != per * count {
        return Err(Error::Shape(format!("{} holds {} bytes, expected {}", path.display(), bytes.len(), per * count)));
    }
    bytes
        .chunks_exact(per)
        .map(|chunk| {
            let vals = chunk.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
            ImageGrid::new(dims, vals, range)
        })
        .collect()
}

/// Writes `manifest.json`, `x0.f64` and `y.f64` into `dir`.
pub fn save_dataset(dir: &Path, manifest: &DatasetManifest, records: &[SampleRecord]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let x0: Vec<ImageGrid> = records.iter().map(|r| r.x0.clone()).collect();
    let y: Vec<ImageGrid> = records.iter().map(|r| r.y.clone()).collect();
    write_f64s(&dir.join(&manifest.x0_file), &x0)?;
    write_f64s(&dir.join(&manifest.y_file), &y)?;
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(manifest)?)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<SampleRecord>)> {
    let manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    if manifest.format_version != DATASET_FORMAT {
        return Err(Error::Checkpoint(format!("dataset format {} unsupported", manifest.format_version)));
    }
    let x0 = read_f64s(&dir.join(&manifest.x0_file), manifest.dims, manifest.count, RangeTag::Model)?;
    let y = read_f64s(&dir.join(&manifest.y_file), manifest.measurement_dims, manifest.count, RangeTag::Unbounded)?;
    let records = x0.into_iter().zip(y).enumerate().map(|(k, (x, y))| SampleRecord::new(k as u64, x, y)).collect();
    Ok((manifest, records))
}

pub fn manifest_for(
    spec: &DatasetSpec,
    measurement_dims: Dims,
    seed: u64,
    config_hash: &str,
    clamp_rate: f64,
) -> DatasetManifest {
    DatasetManifest {
        format_version: DATASET_FORMAT,
        kind: spec.kind,
        dims: spec.dims(),
        measurement_dims,
        count: spec.count,
        seed,
        prior_hash: spec.prior_hash(),
        config_hash: config_hash.to_string(),
        clamp_rate,
        x0_file: "x0.f64".into(),
        y_file: "y.f64".into(),
    }
}
