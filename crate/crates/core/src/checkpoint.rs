//! Versioned binary checkpoints.
//!
//! Layout: 8-byte magic `UDAVICKP`, `u32` LE format version, `u64` LE header
//! length, UTF-8 JSON header, then the blobs listed in the header as
//! little-endian `f64` runs in this order: generator params, student params,
//! generator optimizer first/second moments, student optimizer first/second
//! moments, then memory and uncertainty for each record in `sample_ids` order.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{ImageGrid, RangeTag};
use crate::memory::SampleRecord;
use crate::models::{Arch, ParamModel};
use crate::optim::{AdamW, AdamWConfig};
use crate::schedule::ScheduleParams;
use crate::training::{Stage, TrainState};

pub const MAGIC: &[u8; 8] = b"UDAVICKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimMeta {
    pub config: AdamWConfig,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobEntry {
    pub name: String,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config_hash: String,
    /// `stage1`, `stage2` or `control`.
    pub label: String,
    pub stage: Stage,
    pub iteration: u64,
    pub seed: u64,
    /// Bridge perturbation scale used for training and inference.
    pub h: f64,
    pub lambda: f64,
    pub memory_window: usize,
    pub schedule: ScheduleParams,
    pub generator_arch: Arch,
    pub student_arch: Arch,
    pub generator_opt: OptimMeta,
    pub student_opt: OptimMeta,
    pub sample_ids: Vec<u64>,
    pub blobs: Vec<BlobEntry>,
}

/// Run-level metadata stamped into a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct RunMeta {
    pub config_hash: String,
    pub label: String,
    pub seed: u64,
    pub h: f64,
    pub lambda: f64,
    pub memory_window: usize,
    pub schedule: ScheduleParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryEntry {
    pub sample_id: u64,
    pub memory: ImageGrid,
    pub uncertainty: ImageGrid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub generator: ParamModel,
    pub student: ParamModel,
    pub generator_opt: AdamW,
    pub student_opt: AdamW,
    pub memories: Vec<MemoryEntry>,
}

impl Checkpoint {
    pub fn from_state(state: &TrainState, meta: &RunMeta) -> Self {
        let memories: Vec<MemoryEntry> = state
            .records
            .iter()
            .map(|r| MemoryEntry { sample_id: r.sample_id, memory: r.memory.clone(), uncertainty: r.uncertainty.clone() })
            .collect();
        let mut blobs = vec![
            BlobEntry { name: "generator".into(), len: state.generator.num_params() },
            BlobEntry { name: "student".into(), len: state.student.num_params() },
            BlobEntry { name: "generator_opt.first".into(), len: state.generator_opt.first.len() },
            BlobEntry { name: "generator_opt.second".into(), len: state.generator_opt.second.len() },
            BlobEntry { name: "student_opt.first".into(), len: state.student_opt.first.len() },
            BlobEntry { name: "student_opt.second".into(), len: state.student_opt.second.len() },
        ];
        for m in &memories {
            blobs.push(BlobEntry { name: format!("memory.{}", m.sample_id), len: m.memory.len() });
            blobs.push(BlobEntry { name: format!("uncertainty.{}", m.sample_id), len: m.uncertainty.len() });
        }
        let header = CheckpointHeader {
            config_hash: meta.config_hash.clone(),
            label: meta.label.clone(),
            stage: state.stage,
            iteration: state.iteration,
            seed: meta.seed,
            h: meta.h,
            lambda: meta.lambda,
            memory_window: meta.memory_window,
            schedule: meta.schedule,
            generator_arch: state.generator.arch().clone(),
            student_arch: state.student.arch().clone(),
            generator_opt: OptimMeta { config: state.generator_opt.config, step: state.generator_opt.step },
            student_opt: OptimMeta { config: state.student_opt.config, step: state.student_opt.step },
            sample_ids: memories.iter().map(|m| m.sample_id).collect(),
            blobs,
        };
        Self {
            header,
            generator: state.generator.clone(),
            student: state.student.clone(),
            generator_opt: state.generator_opt.clone(),
            student_opt: state.student_opt.clone(),
            memories,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let header = serde_json::to_vec(&self.header)?;
        let mut f = BufWriter::new(fs::File::create(path)?);
        f.write_all(MAGIC)?;
        f.write_all(&FORMAT_VERSION.to_le_bytes())?;
        f.write_all(&(header.len() as u64).to_le_bytes())?;
        f.write_all(&header)?;
        let mut put = |vals: &[f64]| -> Result<()> {
            for v in vals {
                f.write_all(&v.to_le_bytes())?;
            }
            Ok(())
        };
        put(self.generator.params())?;
        put(self.student.params())?;
        put(&self.generator_opt.first)?;
        put(&self.generator_opt.second)?;
        put(&self.student_opt.first)?;
        put(&self.student_opt.second)?;
        for m in &self.memories {
            put(m.memory.values())?;
            put(m.uncertainty.values())?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(bad(&format!("format version {version}, expected {FORMAT_VERSION}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body_start = 20usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[20..body_start])?;
        let body = &bytes[body_start..];
        let total: usize = header.blobs.iter().map(|b| b.len).sum();
        if body.len() != total * 8 {
            return Err(bad(&format!("body holds {} bytes, header lists {}", body.len(), total * 8)));
        }
        let mut blobs = header.blobs.iter().scan(0usize, |off, b| {
            let vals: Vec<f64> = body[*off * 8..(*off + b.len) * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            *off += b.len;
            Some(vals)
        });
        let mut next = || blobs.next().ok_or_else(|| bad("missing blob"));
        let generator = ParamModel::new(header.generator_arch.clone(), next()?)?;
        let student = ParamModel::new(header.student_arch.clone(), next()?)?;
        let generator_opt = AdamW {
            config: header.generator_opt.config,
            step: header.generator_opt.step,
            first: next()?,
            second: next()?,
        };
        let student_opt =
            AdamW { config: header.student_opt.config, step: header.student_opt.step, first: next()?, second: next()? };
        let dims = generator.dims();
        let mut memories = Vec::with_capacity(header.sample_ids.len());
        for &sample_id in &header.sample_ids {
            memories.push(MemoryEntry {
                sample_id,
                memory: ImageGrid::new(dims, next()?, RangeTag::Memory)?,
                uncertainty: ImageGrid::new(dims.single_channel(), next()?, RangeTag::Memory)?,
            });
        }
        Ok(Self { header, generator, student, generator_opt, student_opt, memories })
    }

    /// Rebuilds a training state over `records`, restoring memories by sample id.
    pub fn restore(&self, mut records: Vec<SampleRecord>) -> Result<TrainState> {
        if records.len() != self.memories.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} memories for {} records",
                self.memories.len(),
                records.len()
            )));
        }
        for rec in &mut records {
            let m = self
                .memories
                .iter()
                .find(|m| m.sample_id == rec.sample_id)
                .ok_or_else(|| Error::Checkpoint(format!("no memory for sample {}", rec.sample_id)))?;
            rec.memory = m.memory.clone();
            rec.uncertainty = m.uncertainty.clone();
        }
        Ok(TrainState {
            generator: self.generator.clone(),
            student: self.student.clone(),
            generator_opt: self.generator_opt.clone(),
            student_opt: self.student_opt.clone(),
            records,
            iteration: self.header.iteration,
            stage: self.header.stage,
        })
    }

    pub fn check_schedule(&self, schedule: &ScheduleParams) -> Result<()> {
        if self.header.schedule != *schedule {
            return Err(Error::Checkpoint(format!(
                "checkpoint schedule {:?} does not match configured {:?}",
                self.header.schedule, schedule
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Dims;
    use crate::models::Squash;
    use crate::rng::SeededRng;
    use crate::training::TrainConfig;

    fn state() -> TrainState {
        let d = Dims::new(4, 4, 1);
        let mut rng = SeededRng::new(2);
        let gen = ParamModel::new(Arch::Affine { dims: d, squash: Squash::Clamp }, rng.normal_vec(16 * 17)).unwrap();
        let student_arch = Arch::TimeAffine { dims: d, knots: vec![0.1, 0.5] };
        let student = ParamModel::new(student_arch, rng.normal_vec(2 * 16 * 17)).unwrap();
        let records = (0..3u64)
            .map(|id| {
                let mut r = SampleRecord::new(id * 7, ImageGrid::zeros(d, RangeTag::Model), ImageGrid::zeros(d, RangeTag::Unbounded));
                r.memory = ImageGrid::new(d, (0..16).map(|_| rng.uniform()).collect(), RangeTag::Memory).unwrap();
                r.uncertainty = ImageGrid::new(d, (0..16).map(|_| rng.uniform() / 3.0).collect(), RangeTag::Memory).unwrap();
                r
            })
            .collect();
        let mut s = TrainState::new(gen, student, records, &TrainConfig::default());
        s.generator_opt.first = rng.normal_vec(16 * 17);
        s.student_opt.second = rng.normal_vec(2 * 16 * 17).iter().map(|v| v * v).collect();
        s.generator_opt.step = 11;
        s.iteration = 42;
        s.stage = Stage::UDavi;
        s
    }

    fn meta() -> RunMeta {
        RunMeta {
            config_hash: "f00d".into(),
            label: "stage2".into(),
            seed: 9,
            h: 0.1,
            lambda: 1.0,
            memory_window: 8,
            schedule: ScheduleParams::default(),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = state();
        let ck = Checkpoint::from_state(&s, &meta());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        let blank: Vec<SampleRecord> = s
            .records
            .iter()
            .rev()
            .map(|r| SampleRecord::new(r.sample_id, r.x0.clone(), r.y.clone()))
            .collect();
        let restored = back.restore(blank).unwrap();
        for r in &restored.records {
            let orig = s.records.iter().find(|o| o.sample_id == r.sample_id).unwrap();
            let bits = |g: &ImageGrid| g.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&r.memory), bits(&orig.memory));
            assert_eq!(bits(&r.uncertainty), bits(&orig.uncertainty));
        }
        assert_eq!(restored.generator, s.generator);
        assert_eq!(restored.student_opt, s.student_opt);
        assert_eq!((restored.iteration, restored.stage), (42, Stage::UDavi));
    }

    #[test]
    fn corrupt_files_rejected() {
        let ck = Checkpoint::from_state(&state(), &meta());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        ck.save(&path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Checkpoint(_))));
        let mut wrong = bytes.clone();
        wrong[8] = 99;
        fs::write(&path, &wrong).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Checkpoint(_))));
        fs::write(&path, b"garbage").unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn schedule_mismatch_detected() {
        let ck = Checkpoint::from_state(&state(), &meta());
        assert!(ck.check_schedule(&ScheduleParams::default()).is_ok());
        let other = ScheduleParams { timesteps: 100, ..ScheduleParams::default() };
        assert!(ck.check_schedule(&other).is_err());
    }
}
