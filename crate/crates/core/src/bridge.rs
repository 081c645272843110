//! Perturbed-posterior-bridge inputs for the generator.
//!
//! `y_a = (1-σ_a)·y + σ_a·x0 + h·σ̄_a·(z ⊙ (1 + λu))`, where `u` is a
//! single-channel per-pixel map broadcast across channels. With `λ = 0`
//! (or no map) this is the plain bridge and the arithmetic is identical
//! bit for bit.

use crate::error::{Error, Result};
use crate::grid::{ImageGrid, RangeTag};
use crate::rng::SeededRng;
use crate::schedule::ScheduleTable;

#[derive(Debug, Clone, PartialEq)]
pub struct BridgeDraw {
    pub a: f64,
    pub sigma_a: f64,
    pub sigma_bar_a: f64,
    pub z: ImageGrid,
    pub y_a: ImageGrid,
}

/// Uncertainty guidance for the bridge noise.
#[derive(Debug, Clone, Copy)]
pub struct Guidance<'a> {
    pub uncertainty: &'a ImageGrid,
    pub lambda: f64,
}

pub fn sample_bridge(
    x0: &ImageGrid,
    y_img: &ImageGrid,
    a: f64,
    h: f64,
    z: &ImageGrid,
    sched: &ScheduleTable,
) -> Result<BridgeDraw> {
    bridge(x0, y_img, a, h, z, None, sched)
}

pub fn sample_bridge_uncertain(
    x0: &ImageGrid,
    y_img: &ImageGrid,
    a: f64,
    h: f64,
    z: &ImageGrid,
    u: &ImageGrid,
    lambda: f64,
    sched: &ScheduleTable,
) -> Result<BridgeDraw> {
    bridge(x0, y_img, a, h, z, Some(Guidance { uncertainty: u, lambda }), sched)
}

/// Shared implementation of both bridge variants.
pub fn bridge(
    x0: &ImageGrid,
    y_img: &ImageGrid,
    a: f64,
    h: f64,
    z: &ImageGrid,
    guidance: Option<Guidance<'_>>,
    sched: &ScheduleTable,
) -> Result<BridgeDraw> {
    x0.ensure_same_dims(y_img, "bridge measurement")?;
    x0.ensure_same_dims(z, "bridge noise")?;
    if !(h >= 0.0) {
        return Err(Error::InvalidArgument(format!("perturbation scale h = {h}")));
    }
    let (sigma_a, sigma_bar_a) = sched.bridge_coeffs(a)?;
    let dims = x0.dims();
    let scale = h * sigma_bar_a;
    let values: Vec<f64> = match guidance {
        None => x0
            .values()
            .iter()
            .zip(y_img.values())
            .zip(z.values())
            .map(|((x, y), e)| (1.0 - sigma_a) * y + sigma_a * x + scale * e)
            .collect(),
        Some(Guidance { uncertainty: u, lambda }) => {
            if u.dims() != dims.single_channel() {
                return Err(Error::Shape(format!(
                    "uncertainty map {} for a {dims} image",
                    u.dims()
                )));
            }
            if !(lambda >= 0.0) {
                return Err(Error::InvalidArgument(format!("lambda = {lambda}")));
            }
            if let Some(v) = u.values().iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::OutOfRange(format!("uncertainty value {v} outside [0, 1]")));
            }
            let c = dims.channels;
            x0.values()
                .iter()
                .zip(y_img.values())
                .zip(z.values())
                .enumerate()
                .map(|(k, ((x, y), e))| {
                    let amp = 1.0 + lambda * u.values()[k / c];
                    (1.0 - sigma_a) * y + sigma_a * x + scale * (e * amp)
                })
                .collect()
        }
    };
    Ok(BridgeDraw {
        a,
        sigma_a,
        sigma_bar_a,
        z: z.clone(),
        y_a: ImageGrid::new(dims, values, RangeTag::Model)?,
    })
}

/// Single-pass inference input `y + h z` with fresh `z`.
pub fn inference_input(y_img: &ImageGrid, h: f64, rng: &mut SeededRng) -> Result<ImageGrid> {
    if !(h >= 0.0) {
        return Err(Error::InvalidArgument(format!("perturbation scale h = {h}")));
    }
    let z = rng.gaussian_grid(y_img.dims());
    let values = y_img.values().iter().zip(z.values()).map(|(y, e)| y + h * e).collect();
    ImageGrid::new(y_img.dims(), values, RangeTag::Model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Dims;
    use crate::schedule::linear_schedule;

    struct Fixture {
        sched: ScheduleTable,
        x0: ImageGrid,
        y: ImageGrid,
        z: ImageGrid,
    }

    fn fixture(d: Dims, seed: u64) -> Fixture {
        let mut rng = SeededRng::new(seed);
        let x0 = rng.gaussian_grid(d).map(RangeTag::Model, |v| 0.3 * v).unwrap();
        let y = rng.gaussian_grid(d).map(RangeTag::Unbounded, |v| 0.3 * v).unwrap();
        let z = rng.gaussian_grid(d);
        Fixture { sched: linear_schedule(400, 1e-4, 0.02).unwrap(), x0, y, z }
    }

    #[test]
    fn endpoints() {
        let f = fixture(Dims::new(4, 4, 3), 1);
        let b0 = sample_bridge(&f.x0, &f.y, 0.0, 0.1, &f.z, &f.sched).unwrap();
        assert_eq!(b0.y_a.values(), f.x0.values());

        let b1 = sample_bridge(&f.x0, &f.y, 1.0, 0.1, &f.z, &f.sched).unwrap();
        let (_, sb) = f.sched.bridge_coeffs(1.0).unwrap();
        for ((v, y), e) in b1.y_a.values().iter().zip(f.y.values()).zip(f.z.values()) {
            assert!((v - (y + 0.1 * sb * e)).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_h_is_deterministic_mix() {
        let f = fixture(Dims::new(3, 3, 1), 2);
        let (sa, _) = f.sched.bridge_coeffs(0.5).unwrap();
        let b = sample_bridge(&f.x0, &f.y, 0.5, 0.0, &f.z, &f.sched).unwrap();
        for ((v, y), x) in b.y_a.values().iter().zip(f.y.values()).zip(f.x0.values()) {
            assert!((v - ((1.0 - sa) * y + sa * x)).abs() < 1e-15);
        }
    }

    #[test]
    fn lambda_zero_is_bit_identical() {
        let d = Dims::new(5, 5, 3);
        let f = fixture(d, 3);
        let mut rng = SeededRng::new(4);
        let u = ImageGrid::new(d.single_channel(), (0..25).map(|_| rng.uniform()).collect(), RangeTag::Memory)
            .unwrap();
        for &a in &[0.0, 0.3, 0.81, 1.0] {
            let plain = sample_bridge(&f.x0, &f.y, a, 0.1, &f.z, &f.sched).unwrap();
            let guided = sample_bridge_uncertain(&f.x0, &f.y, a, 0.1, &f.z, &u, 0.0, &f.sched).unwrap();
            let bits = |g: &ImageGrid| g.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&plain.y_a), bits(&guided.y_a));
        }
    }

    #[test]
    fn full_uncertainty_doubles_perturbation() {
        let d = Dims::new(3, 3, 2);
        let f = fixture(d, 5);
        let u = ImageGrid::filled(d.single_channel(), 1.0, RangeTag::Memory).unwrap();
        let a = 0.7;
        let base = sample_bridge(&f.x0, &f.y, a, 0.0, &f.z, &f.sched).unwrap();
        let plain = sample_bridge(&f.x0, &f.y, a, 0.1, &f.z, &f.sched).unwrap();
        let guided = sample_bridge_uncertain(&f.x0, &f.y, a, 0.1, &f.z, &u, 1.0, &f.sched).unwrap();
        for k in 0..d.len() {
            let p = plain.y_a.values()[k] - base.y_a.values()[k];
            let g = guided.y_a.values()[k] - base.y_a.values()[k];
            assert!((g - 2.0 * p).abs() < 1e-14);
        }
    }

    #[test]
    fn single_pixel_guidance_matches_hand_grid() {
        let d = Dims::new(2, 2, 1);
        let x0 = ImageGrid::new(d, vec![0.1, 0.2, 0.3, 0.4], RangeTag::Model).unwrap();
        let y = ImageGrid::new(d, vec![0.0, -0.2, 0.5, 0.1], RangeTag::Unbounded).unwrap();
        let z = ImageGrid::new(d, vec![1.0, -1.0, 0.5, 2.0], RangeTag::Unbounded).unwrap();
        let u = ImageGrid::new(d.single_channel(), vec![0.0, 0.5, 0.0, 0.0], RangeTag::Memory).unwrap();
        let sched = linear_schedule(400, 1e-4, 0.02).unwrap();
        let (a, h, lambda) = (0.6, 0.1, 2.0);
        let (sa, sb) = sched.bridge_coeffs(a).unwrap();
        let out = sample_bridge_uncertain(&x0, &y, a, h, &z, &u, lambda, &sched).unwrap();
        let amp = [1.0, 2.0, 1.0, 1.0];
        for k in 0..4 {
            let expected = (1.0 - sa) * y.values()[k] + sa * x0.values()[k] + h * sb * z.values()[k] * amp[k];
            assert!((out.y_a.values()[k] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let d = Dims::new(2, 2, 1);
        let f = fixture(d, 6);
        let bad_u = ImageGrid::filled(d, 1.5, RangeTag::Unbounded).unwrap();
        assert!(sample_bridge_uncertain(&f.x0, &f.y, 0.5, 0.1, &f.z, &bad_u, 1.0, &f.sched).is_err());
        let small = ImageGrid::zeros(Dims::new(1, 1, 1), RangeTag::Model);
        assert!(sample_bridge(&f.x0, &small, 0.5, 0.1, &f.z, &f.sched).is_err());
    }

    #[test]
    fn inference_input_statistics() {
        let d = Dims::new(4, 4, 1);
        let y = ImageGrid::filled(d, 0.25, RangeTag::Unbounded).unwrap();
        let same = inference_input(&y, 0.0, &mut SeededRng::new(1)).unwrap();
        assert_eq!(same.values(), y.values());

        let a = inference_input(&y, 0.1, &mut SeededRng::new(77)).unwrap();
        let b = inference_input(&y, 0.1, &mut SeededRng::new(77)).unwrap();
        assert_eq!(a, b);

        // 1e4 draws x 16 pixels; relative sd of the std estimate ~ 1/sqrt(2·1.6e5)
        let mut rng = SeededRng::new(9);
        let mut acc = 0.0;
        let n = 10_000;
        for _ in 0..n {
            let s = inference_input(&y, 0.1, &mut rng).unwrap();
            acc += s.sub(&y).unwrap().squared_norm();
        }
        let sd = (acc / (n * 16) as f64).sqrt();
        assert!((sd / 0.1 - 1.0).abs() < 0.02, "{sd}");
    }
}
