//! Persistent reconstruction memories and temporal-inconsistency uncertainty.

use crate::error::{Error, Result};
use crate::grid::{Dims, ImageGrid, RangeTag};

/// Max-distance threshold below which the uncertainty map is all zeros.
pub const UNCERTAINTY_EPS: f64 = 1e-12;

/// A training example with its reconstruction memory and current uncertainty.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub sample_id: u64,
    pub x0: ImageGrid,
    pub y: ImageGrid,
    /// `x̄_i`, memory space.
    pub memory: ImageGrid,
    /// `u_i`, single channel, `[0, 1]`.
    pub uncertainty: ImageGrid,
}

impl SampleRecord {
    pub fn new(sample_id: u64, x0: ImageGrid, y: ImageGrid) -> Self {
        let d = x0.dims();
        Self {
            sample_id,
            memory: ImageGrid::zeros(d, RangeTag::Memory),
            uncertainty: ImageGrid::zeros(d.single_channel(), RangeTag::Memory),
            x0,
            y,
        }
    }

    pub fn dims(&self) -> Dims {
        self.x0.dims()
    }
}

/// `(x + 1) / 2`, clamped into `[0, 1]`.
pub fn rescale_to_memory_space(xhat: &ImageGrid) -> ImageGrid {
    let values = xhat.values().iter().map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0)).collect();
    ImageGrid::from_raw(xhat.dims(), values, RangeTag::Memory)
}

/// Per-pixel channel-summed L1 distance to the memory, normalized by its maximum.
pub fn uncertainty_map(xhat_star: &ImageGrid, memory: &ImageGrid) -> Result<ImageGrid> {
    xhat_star.ensure_same_dims(memory, "uncertainty map")?;
    let d = xhat_star.dims();
    let c = d.channels;
    let dist: Vec<f64> = xhat_star
        .values()
        .chunks(c)
        .zip(memory.values().chunks(c))
        .map(|(a, b)| a.iter().zip(b).map(|(p, q)| (p - q).abs()).sum())
        .collect();
    let max = dist.iter().copied().fold(0.0, f64::max);
    let values = if max > UNCERTAINTY_EPS {
        dist.iter().map(|v| v / max).collect()
    } else {
        vec![0.0; dist.len()]
    };
    Ok(ImageGrid::from_raw(d.single_channel(), values, RangeTag::Memory))
}

/// Smoothing coefficient `η = 2 / (N + 1)` for a memory window of `N` updates.
pub fn ema_eta(window: usize) -> Result<f64> {
    if window == 0 {
        return Err(Error::InvalidArgument("memory window must be >= 1".into()));
    }
    Ok(2.0 / (window as f64 + 1.0))
}

/// `(1-η)·memory + η·x̂*`
pub fn ema_update(memory: &ImageGrid, xhat_star: &ImageGrid, window: usize) -> Result<ImageGrid> {
    memory.ensure_same_dims(xhat_star, "memory update")?;
    let eta = ema_eta(window)?;
    let values = memory
        .values()
        .iter()
        .zip(xhat_star.values())
        .map(|(&m, &x)| if eta == 1.0 { x } else { (m + eta * (x - m)).clamp(0.0, 1.0) })
        .collect();
    Ok(ImageGrid::from_raw(memory.dims(), values, RangeTag::Memory))
}

/// Uncertainty from the pre-update memory, then the EMA update.
pub fn observe(record: &mut SampleRecord, xhat: &ImageGrid, window: usize) -> Result<()> {
    let star = rescale_to_memory_space(xhat);
    record.uncertainty = uncertainty_map(&star, &record.memory)?;
    record.memory = ema_update(&record.memory, &star, window)?;
    Ok(())
}

/// Sets every memory to the rescaled reconstruction `reconstruct(record)` and
/// clears the uncertainty maps.
pub fn init_memories(
    records: &mut [SampleRecord],
    mut reconstruct: impl FnMut(&SampleRecord) -> Result<ImageGrid>,
) -> Result<()> {
    for rec in records.iter_mut() {
        let xhat = reconstruct(rec)?;
        rec.x0.ensure_same_dims(&xhat, "memory init")?;
        rec.memory = rescale_to_memory_space(&xhat);
        rec.uncertainty = ImageGrid::zeros(rec.dims().single_channel(), RangeTag::Memory);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use proptest::prelude::*;

    fn g(d: Dims, v: Vec<f64>, r: RangeTag) -> ImageGrid {
        ImageGrid::new(d, v, r).unwrap()
    }

    #[test]
    fn rescale_values() {
        let d = Dims::new(1, 4, 1);
        let m = rescale_to_memory_space(&g(d, vec![-1.0, 1.0, 0.0, 1.2], RangeTag::Model));
        assert_eq!(m.values(), &[0.0, 1.0, 0.5, 1.0]);
        let c = rescale_to_memory_space(&ImageGrid::filled(d, -0.5, RangeTag::Model).unwrap());
        assert!(c.values().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn uncertainty_hand_example() {
        let d = Dims::new(2, 2, 1);
        let mem = g(d, vec![0.5; 4], RangeTag::Memory);
        let cur = g(d, vec![0.6, 0.3, 0.5, 0.9], RangeTag::Memory);
        let u = uncertainty_map(&cur, &mem).unwrap();
        let expected = [0.25, 0.5, 0.0, 1.0];
        for (a, b) in u.values().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn uncertainty_degenerate_and_single_pixel() {
        let d = Dims::new(3, 3, 3);
        let mut rng = SeededRng::new(1);
        let mem = g(d, (0..27).map(|_| rng.uniform()).collect(), RangeTag::Memory);
        let u = uncertainty_map(&mem, &mem).unwrap();
        assert!(u.values().iter().all(|&v| v == 0.0));
        assert_eq!(u.dims(), d.single_channel());

        let mut v = mem.values().to_vec();
        v[4 * 3 + 1] = (v[4 * 3 + 1] + 0.5) % 1.0;
        let u = uncertainty_map(&g(d, v, RangeTag::Memory), &mem).unwrap();
        for (p, &val) in u.values().iter().enumerate() {
            assert_eq!(val, if p == 4 { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn ema_cases() {
        let d = Dims::new(1, 1, 1);
        let zero = ImageGrid::zeros(d, RangeTag::Memory);
        let one = ImageGrid::filled(d, 1.0, RangeTag::Memory).unwrap();
        assert_eq!(ema_update(&zero, &one, 1).unwrap(), one);
        let m = ema_update(&zero, &one, 8).unwrap();
        assert!((m.values()[0] - 2.0 / 9.0).abs() < 1e-15);
        assert!(ema_update(&zero, &one, 0).is_err());
    }

    #[test]
    fn ema_geometric_recursion() {
        let d = Dims::new(2, 2, 1);
        let c = 0.8;
        let m0 = 0.1;
        let target = ImageGrid::filled(d, c, RangeTag::Memory).unwrap();
        let mut m = ImageGrid::filled(d, m0, RangeTag::Memory).unwrap();
        let eta = ema_eta(8).unwrap();
        for k in 1..=50 {
            m = ema_update(&m, &target, 8).unwrap();
            let expected = c + (1.0 - eta).powi(k) * (m0 - c);
            assert!(m.values().iter().all(|v| (v - expected).abs() < 1e-12), "k={k}");
        }
    }

    #[test]
    fn observe_uses_pre_update_memory() {
        let d = Dims::new(1, 2, 1);
        let x0 = ImageGrid::zeros(d, RangeTag::Model);
        let mut rec = SampleRecord::new(0, x0.clone(), x0);
        rec.memory = g(d, vec![0.5, 0.5], RangeTag::Memory);
        // x̂* = (0.5, 0.9): distances (0, 0.4) against the old memory
        let xhat = g(d, vec![0.0, 0.8], RangeTag::Model);
        observe(&mut rec, &xhat, 3).unwrap();
        assert_eq!(rec.uncertainty.values(), &[0.0, 1.0]);
        assert!((rec.memory.values()[1] - 0.7).abs() < 1e-15);
    }

    #[test]
    fn init_sets_memory_and_clears_uncertainty() {
        let d = Dims::new(2, 2, 1);
        let x0 = ImageGrid::filled(d, 0.2, RangeTag::Model).unwrap();
        let mut recs = vec![SampleRecord::new(3, x0.clone(), x0.clone())];
        recs[0].uncertainty = ImageGrid::filled(d.single_channel(), 0.5, RangeTag::Memory).unwrap();
        init_memories(&mut recs, |r| Ok(r.x0.clone())).unwrap();
        assert!(recs[0].memory.values().iter().all(|&v| (v - 0.6).abs() < 1e-15));
        assert!(recs[0].uncertainty.values().iter().all(|&v| v == 0.0));
        let u = uncertainty_map(&rescale_to_memory_space(&x0), &recs[0].memory).unwrap();
        assert!(u.values().iter().all(|&v| v == 0.0));
    }

    proptest! {
        #[test]
        fn uncertainty_is_normalized(
            cur in proptest::collection::vec(0.0f64..=1.0, 12),
            mem in proptest::collection::vec(0.0f64..=1.0, 12),
        ) {
            let d = Dims::new(2, 2, 3);
            let u = uncertainty_map(&g(d, cur, RangeTag::Memory), &g(d, mem, RangeTag::Memory)).unwrap();
            prop_assert!(u.values().iter().all(|v| (0.0..=1.0).contains(v)));
            let max = u.values().iter().copied().fold(0.0, f64::max);
            prop_assert!(max == 1.0 || max == 0.0);
        }

        #[test]
        fn ema_is_affine_with_fixed_point(
            m in proptest::collection::vec(0.0f64..=1.0, 4),
            x in proptest::collection::vec(0.0f64..=1.0, 4),
            window in 1usize..32,
        ) {
            let d = Dims::new(2, 2, 1);
            let mg = g(d, m.clone(), RangeTag::Memory);
            let xg = g(d, x.clone(), RangeTag::Memory);
            let eta = ema_eta(window).unwrap();
            let out = ema_update(&mg, &xg, window).unwrap();
            for k in 0..4 {
                prop_assert!((out.values()[k] - ((1.0 - eta) * m[k] + eta * x[k])).abs() < 1e-12);
            }
            let fixed = ema_update(&xg, &xg, window).unwrap();
            prop_assert_eq!(fixed.values(), xg.values());
        }
    }
}
