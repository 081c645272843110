//! Linear measurement operators: Gaussian blur and average-pool downsampling.
//!
//! Blur uses symmetric (half-sample) reflection at the borders, applied as
//! often as needed so kernels wider than the image stay well defined. The
//! adjoint scatters through the same reflection map, so it is exact at the
//! boundary too.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Dims, ImageGrid, RangeTag};
use crate::linalg::DenseMatrix;
use crate::rng::SeededRng;

/// Default cap on the input dimension for [`ForwardOperator::as_dense_matrix`].
pub const DENSE_CAP: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Boundary {
    Reflect,
}

#[derive(Debug, Clone, PartialEq)]
pub enum OperatorKind {
    GaussianBlur { kernel: ImageGrid },
    AvgPoolSr { factor: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOperator {
    kind: OperatorKind,
    boundary: Boundary,
    noise_sigma: f64,
}

/// Discretized isotropic Gaussian, normalized to unit sum.
pub fn make_gaussian_kernel(size: usize, sigma: f64) -> Result<ImageGrid> {
    if size == 0 || size % 2 == 0 {
        return Err(Error::InvalidArgument(format!("kernel size must be odd, got {size}")));
    }
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!("kernel sigma must be positive, got {sigma}")));
    }
    let r = (size / 2) as f64;
    let taps: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let mut values: Vec<f64> = Vec::with_capacity(size * size);
    for a in &taps {
        for b in &taps {
            values.push(a * b);
        }
    }
    let total: f64 = values.iter().sum();
    values.iter_mut().for_each(|v| *v /= total);
    ImageGrid::new(Dims::new(size, size, 1), values, RangeTag::Unbounded)
}

/// Symmetric reflection of an arbitrary integer index into `0..n`.
#[inline]
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

impl ForwardOperator {
    pub fn blur(kernel: ImageGrid, noise_sigma: f64) -> Result<Self> {
        let kd = kernel.dims();
        if kd.channels != 1 || kd.height != kd.width || kd.height % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "blur kernel must be square, odd and single-channel, got {kd}"
            )));
        }
        let sum = kernel.sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!("blur kernel sums to {sum}, expected 1")));
        }
        let k = kd.height;
        for i in 0..k {
            for j in 0..k {
                if kernel.get(i, j, 0) != kernel.get(k - 1 - i, k - 1 - j, 0) {
                    return Err(Error::InvalidArgument(
                        "blur kernel is not symmetric under 180-degree rotation".into(),
                    ));
                }
            }
        }
        Self::check_sigma(noise_sigma)?;
        Ok(Self { kind: OperatorKind::GaussianBlur { kernel }, boundary: Boundary::Reflect, noise_sigma })
    }

    pub fn gaussian_blur(size: usize, sigma: f64, noise_sigma: f64) -> Result<Self> {
        Self::blur(make_gaussian_kernel(size, sigma)?, noise_sigma)
    }

    pub fn avg_pool(factor: usize, noise_sigma: f64) -> Result<Self> {
        if factor == 0 {
            return Err(Error::InvalidArgument("downsampling factor must be positive".into()));
        }
        Self::check_sigma(noise_sigma)?;
        Ok(Self { kind: OperatorKind::AvgPoolSr { factor }, boundary: Boundary::Reflect, noise_sigma })
    }

    fn check_sigma(s: f64) -> Result<()> {
        if !(s >= 0.0) || !s.is_finite() {
            return Err(Error::InvalidArgument(format!("noise sigma must be >= 0, got {s}")));
        }
        Ok(())
    }

    pub fn kind(&self) -> &OperatorKind {
        &self.kind
    }

    pub fn boundary(&self) -> Boundary {
        self.boundary
    }

    pub fn noise_sigma(&self) -> f64 {
        self.noise_sigma
    }

    pub fn with_noise_sigma(&self, noise_sigma: f64) -> Result<Self> {
        Self::check_sigma(noise_sigma)?;
        Ok(Self { noise_sigma, ..self.clone() })
    }

    /// Output dims for an input of `dims`.
    pub fn output_dims(&self, dims: Dims) -> Result<Dims> {
        match &self.kind {
            OperatorKind::GaussianBlur { .. } => Ok(dims),
            OperatorKind::AvgPoolSr { factor } => {
                if dims.height % factor != 0 || dims.width % factor != 0 {
                    return Err(Error::Shape(format!(
                        "downsampling factor {factor} does not divide {dims}"
                    )));
                }
                Ok(Dims::new(dims.height / factor, dims.width / factor, dims.channels))
            }
        }
    }

    /// Noiseless measurement `H x`.
    pub fn apply(&self, x: &ImageGrid) -> Result<ImageGrid> {
        let out_dims = self.output_dims(x.dims())?;
        let mut out = vec![0.0; out_dims.len()];
        self.apply_into(x.values(), x.dims(), &mut out);
        ImageGrid::new(out_dims, out, RangeTag::Unbounded)
    }

    /// `Hᵀ y`. `input_dims` is the shape of the operator's input space.
    pub fn apply_adjoint(&self, y: &ImageGrid, input_dims: Dims) -> Result<ImageGrid> {
        let out_dims = self.output_dims(input_dims)?;
        if y.dims() != out_dims {
            return Err(Error::Shape(format!(
                "adjoint expects a {out_dims} measurement, got {}",
                y.dims()
            )));
        }
        let mut out = vec![0.0; input_dims.len()];
        self.adjoint_into(y.values(), input_dims, &mut out);
        ImageGrid::new(input_dims, out, RangeTag::Unbounded)
    }

    /// Slice form of [`apply`](Self::apply); `out` must have the output length.
    pub fn apply_into(&self, x: &[f64], dims: Dims, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        let Dims { height: h, width: w, channels: c } = dims;
        match &self.kind {
            OperatorKind::GaussianBlur { kernel } => {
                let k = kernel.dims().height;
                let r = (k / 2) as isize;
                let kv = kernel.values();
                let rows: Vec<Vec<usize>> = (0..h)
                    .map(|i| (0..k).map(|a| reflect(i as isize + a as isize - r, h)).collect())
                    .collect();
                let cols: Vec<Vec<usize>> = (0..w)
                    .map(|j| (0..k).map(|b| reflect(j as isize + b as isize - r, w)).collect())
                    .collect();
                for i in 0..h {
                    for j in 0..w {
                        let o = (i * w + j) * c;
                        for a in 0..k {
                            let src_row = rows[i][a] * w;
                            let krow = &kv[a * k..(a + 1) * k];
                            for (b, &kab) in krow.iter().enumerate() {
                                let s = (src_row + cols[j][b]) * c;
                                for ch in 0..c {
                                    out[o + ch] += kab * x[s + ch];
                                }
                            }
                        }
                    }
                }
            }
            OperatorKind::AvgPoolSr { factor } => {
                let f = *factor;
                let ow = w / f;
                let scale = 1.0 / (f * f) as f64;
                for i in 0..h {
                    for j in 0..w {
                        let o = ((i / f) * ow + j / f) * c;
                        let s = (i * w + j) * c;
                        for ch in 0..c {
                            out[o + ch] += scale * x[s + ch];
                        }
                    }
                }
            }
        }
    }

    /// Slice form of [`apply_adjoint`](Self::apply_adjoint); `dims` is the input-space shape.
    pub fn adjoint_into(&self, y: &[f64], dims: Dims, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        let Dims { height: h, width: w, channels: c } = dims;
        match &self.kind {
            OperatorKind::GaussianBlur { kernel } => {
                let k = kernel.dims().height;
                let r = (k / 2) as isize;
                let kv = kernel.values();
                let rows: Vec<Vec<usize>> = (0..h)
                    .map(|i| (0..k).map(|a| reflect(i as isize + a as isize - r, h)).collect())
                    .collect();
                let cols: Vec<Vec<usize>> = (0..w)
                    .map(|j| (0..k).map(|b| reflect(j as isize + b as isize - r, w)).collect())
                    .collect();
                for i in 0..h {
                    for j in 0..w {
                        let o = (i * w + j) * c;
                        for a in 0..k {
                            let dst_row = rows[i][a] * w;
                            let krow = &kv[a * k..(a + 1) * k];
                            for (b, &kab) in krow.iter().enumerate() {
                                let d = (dst_row + cols[j][b]) * c;
                                for ch in 0..c {
                                    out[d + ch] += kab * y[o + ch];
                                }
                            }
                        }
                    }
                }
            }
            OperatorKind::AvgPoolSr { factor } => {
                let f = *factor;
                let ow = w / f;
                let scale = 1.0 / (f * f) as f64;
                for i in 0..h {
                    for j in 0..w {
                        let s = ((i / f) * ow + j / f) * c;
                        let d = (i * w + j) * c;
                        for ch in 0..c {
                            out[d + ch] = scale * y[s + ch];
                        }
                    }
                }
            }
        }
    }

    /// `H x0 + σ_y z` with `z` drawn from `rng`.
    pub fn measure(&self, x0: &ImageGrid, rng: &mut SeededRng) -> Result<ImageGrid> {
        let clean = self.apply(x0)?;
        let z = rng.gaussian_grid(clean.dims());
        let values = clean
            .values()
            .iter()
            .zip(z.values())
            .map(|(v, n)| v + self.noise_sigma * n)
            .collect();
        ImageGrid::new(clean.dims(), values, RangeTag::Unbounded)
    }

    /// Explicit matrix with `M vec(x) = vec(apply(x))`, built column by column.
    pub fn as_dense_matrix(&self, input_dims: Dims, cap: usize) -> Result<DenseMatrix> {
        let n = input_dims.len();
        if n > cap {
            return Err(Error::TooLarge { size: n, cap });
        }
        let m = self.output_dims(input_dims)?.len();
        let mut mat = DenseMatrix::zeros(m, n);
        let mut basis = vec![0.0; n];
        let mut col = vec![0.0; m];
        for k in 0..n {
            basis[k] = 1.0;
            self.apply_into(&basis, input_dims, &mut col);
            basis[k] = 0.0;
            for (i, &v) in col.iter().enumerate() {
                mat.set(i, k, v);
            }
        }
        Ok(mat)
    }

    /// Brings a measurement onto the input grid for bridging: identity for
    /// blur, nearest-neighbour block replication for downsampling.
    pub fn lift_to_input(&self, y: &ImageGrid, input_dims: Dims) -> Result<ImageGrid> {
        let expected = self.output_dims(input_dims)?;
        if y.dims() != expected {
            return Err(Error::Shape(format!("expected a {expected} measurement, got {}", y.dims())));
        }
        match &self.kind {
            OperatorKind::GaussianBlur { .. } => Ok(y.clone()),
            OperatorKind::AvgPoolSr { factor } => Ok(upsample_nearest(y, *factor)),
        }
    }
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest(y: &ImageGrid, factor: usize) -> ImageGrid {
    let d = y.dims();
    let out_dims = Dims::new(d.height * factor, d.width * factor, d.channels);
    let mut out = Vec::with_capacity(out_dims.len());
    for i in 0..out_dims.height {
        for j in 0..out_dims.width {
            for ch in 0..d.channels {
                out.push(y.get(i / factor, j / factor, ch));
            }
        }
    }
    ImageGrid::from_raw(out_dims, out, y.range())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(d: Dims, v: Vec<f64>) -> ImageGrid {
        ImageGrid::new(d, v, RangeTag::Unbounded).unwrap()
    }

    #[test]
    fn wide_kernel_sums_to_one_with_central_max() {
        let k = make_gaussian_kernel(61, 3.0).unwrap();
        assert!((k.sum() - 1.0).abs() < 1e-12);
        let center = k.get(30, 30, 0);
        assert!(k.values().iter().all(|&v| v <= center));
    }

    #[test]
    fn degenerate_and_wide_kernels() {
        assert_eq!(make_gaussian_kernel(1, 0.7).unwrap().values(), &[1.0]);
        // For sigma -> inf every tap tends to 1/9; the residual is O(1/sigma^2).
        let k = make_gaussian_kernel(3, 1e6).unwrap();
        assert!(k.values().iter().all(|v| (v - 1.0 / 9.0).abs() < 1e-6));
        assert!(make_gaussian_kernel(4, 1.0).is_err());
    }

    #[test]
    fn blur_fixes_constants() {
        let op = ForwardOperator::gaussian_blur(7, 1.5, 0.0).unwrap();
        let x = ImageGrid::filled(Dims::new(9, 9, 2), 0.37, RangeTag::Model).unwrap();
        let y = op.apply(&x).unwrap();
        assert!(y.values().iter().all(|v| (v - 0.37).abs() < 1e-14));
    }

    #[test]
    fn avg_pool_block_mean() {
        let op = ForwardOperator::avg_pool(2, 0.0).unwrap();
        let y = op.apply(&grid(Dims::new(2, 2, 1), vec![1.0, 3.0, 5.0, 7.0])).unwrap();
        assert_eq!(y.values(), &[4.0]);
        let adj = op.apply_adjoint(&grid(Dims::new(1, 1, 1), vec![1.0]), Dims::new(2, 2, 1)).unwrap();
        assert_eq!(adj.values(), &[0.25; 4]);
        assert!(op.apply(&grid(Dims::new(3, 2, 1), vec![0.0; 6])).is_err());
    }

    #[test]
    fn delta_blurs_to_kernel() {
        let op = ForwardOperator::gaussian_blur(5, 1.0, 0.0).unwrap();
        let d = Dims::new(11, 11, 1);
        let mut v = vec![0.0; d.len()];
        v[5 * 11 + 5] = 1.0;
        let y = op.apply(&grid(d, v)).unwrap();
        let OperatorKind::GaussianBlur { kernel } = op.kind() else { unreachable!() };
        for a in 0..5 {
            for b in 0..5 {
                assert_eq!(y.get(3 + a, 3 + b, 0), kernel.get(a, b, 0));
            }
        }
        assert_eq!(y.get(0, 0, 0), 0.0);
    }

    #[test]
    fn adjoint_matches_dense_transpose_and_rotated_kernel() {
        let op = ForwardOperator::gaussian_blur(3, 0.8, 0.0).unwrap();
        let d = Dims::new(8, 8, 1);
        let m = op.as_dense_matrix(d, DENSE_CAP).unwrap();
        let mt = m.transpose();
        let mut rng = SeededRng::new(2);
        let y = rng.gaussian_grid(d);
        let adj = op.apply_adjoint(&y, d).unwrap();
        let dense = mt.matvec(y.values()).unwrap();
        for (a, b) in adj.values().iter().zip(&dense) {
            assert!((a - b).abs() < 1e-12);
        }
        // away from the border the adjoint is a blur with the rotated (= same) kernel
        let fwd = op.apply(&y).unwrap();
        for i in 1..7 {
            for j in 1..7 {
                assert!((fwd.get(i, j, 0) - adj.get(i, j, 0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dense_matrix_properties() {
        let id = ForwardOperator::gaussian_blur(1, 1.0, 0.0).unwrap();
        let m = id.as_dense_matrix(Dims::new(3, 3, 1), DENSE_CAP).unwrap();
        assert_eq!(m, DenseMatrix::identity(9));

        let sr = ForwardOperator::avg_pool(2, 0.0).unwrap();
        let m = sr.as_dense_matrix(Dims::new(4, 4, 1), DENSE_CAP).unwrap();
        assert_eq!((m.rows(), m.cols()), (4, 16));
        for i in 0..4 {
            assert!((m.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
        assert!(matches!(
            sr.as_dense_matrix(Dims::new(128, 128, 1), DENSE_CAP),
            Err(Error::TooLarge { .. })
        ));
    }

    #[test]
    fn measurement_noise() {
        let op = ForwardOperator::gaussian_blur(3, 1.0, 0.0).unwrap();
        let x = ImageGrid::filled(Dims::new(4, 4, 1), 0.2, RangeTag::Model).unwrap();
        let mut rng = SeededRng::new(1);
        assert_eq!(op.measure(&x, &mut rng).unwrap(), op.apply(&x).unwrap());

        let op = op.with_noise_sigma(0.05).unwrap();
        let a = op.measure(&x, &mut SeededRng::new(8)).unwrap();
        let b = op.measure(&x, &mut SeededRng::new(8)).unwrap();
        assert_eq!(a, b);

        // per-pixel std over 1e4 draws; sd of the sample std is ~ 0.05/sqrt(2e4) = 3.5e-4
        let clean = op.apply(&x).unwrap();
        let n = 10_000;
        let mut sq = vec![0.0; 16];
        let mut rng = SeededRng::new(11);
        for _ in 0..n {
            let y = op.measure(&x, &mut rng).unwrap();
            for (k, (v, c)) in y.values().iter().zip(clean.values()).enumerate() {
                sq[k] += (v - c).powi(2);
            }
        }
        for s in sq {
            let sd = (s / n as f64).sqrt();
            assert!((sd - 0.05).abs() < 0.002, "sd {sd}");
        }
    }

    #[test]
    fn upsample_replicates_blocks() {
        let y = grid(Dims::new(1, 2, 1), vec![0.5, -0.5]);
        let up = upsample_nearest(&y, 2);
        assert_eq!(up.dims(), Dims::new(2, 4, 1));
        assert_eq!(up.values(), &[0.5, 0.5, -0.5, -0.5, 0.5, 0.5, -0.5, -0.5]);
    }
}
