//! Closed-form Gaussian posterior, image metrics, significance testing, and
//! generator-evaluation accounting.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::bridge::inference_input;
use crate::error::{Error, Result};
use crate::grid::{ImageGrid, RangeTag};
use crate::linalg::{sqrt_psd, Cholesky, DenseMatrix};
use crate::models::{GaussianPrior, ParamModel};
use crate::rng::SeededRng;

/// Reported PSNR for identical images.
pub const PSNR_CAP_DB: f64 = 99.0;
/// Peak-to-peak signal range of model space.
pub const PSNR_RANGE: f64 = 2.0;
/// Tolerance for slightly negative eigenvalues in matrix square roots.
pub const SQRT_CLIP: f64 = 1e-10;
/// Length of the desk Fréchet feature vector.
pub const FEATURE_DIM: usize = 18;

/// Exact posterior of a linear-Gaussian model.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorOracle {
    pub mu_post: Vec<f64>,
    pub sigma_post: DenseMatrix,
}

impl PosteriorOracle {
    pub fn std_devs(&self) -> Vec<f64> {
        self.sigma_post.diag().iter().map(|v| v.max(0.0).sqrt()).collect()
    }
}

/// `μ = μ0 + Σ0Hᵀ S⁻¹ (y − Hμ0)`, `Σ = Σ0 − Σ0Hᵀ S⁻¹ HΣ0`, `S = HΣ0Hᵀ + σ_y² I`.
pub fn gaussian_posterior(prior: &GaussianPrior, h: &DenseMatrix, sigma_y: f64, y: &[f64]) -> Result<PosteriorOracle> {
    if !prior.is_single() {
        return Err(Error::InvalidArgument("closed-form posterior needs a single Gaussian prior".into()));
    }
    let comp = &prior.components()[0];
    let n = prior.dim();
    if h.cols() != n || h.rows() != y.len() {
        return Err(Error::Shape(format!(
            "operator {}x{} with prior dim {n} and {} measurements",
            h.rows(),
            h.cols(),
            y.len()
        )));
    }
    let sigma_ht = comp.cov.matmul(&h.transpose())?;
    let innovation = h.matmul(&sigma_ht)?.add_diag(sigma_y * sigma_y).symmetrize();
    let chol = Cholesky::factor(&innovation)?;
    let resid: Vec<f64> = y.iter().zip(h.matvec(&comp.mean)?).map(|(a, b)| a - b).collect();
    let gain_resid = sigma_ht.matvec(&chol.solve(&resid)?)?;
    let mu_post = comp.mean.iter().zip(&gain_resid).map(|(m, g)| m + g).collect();
    // Σ0Hᵀ S⁻¹ HΣ0 = Wᵀ W with W = L⁻¹ HΣ0
    let h_sigma = sigma_ht.transpose();
    let mut w = DenseMatrix::zeros(h_sigma.rows(), n);
    for j in 0..n {
        let col: Vec<f64> = (0..h_sigma.rows()).map(|i| h_sigma.get(i, j)).collect();
        for (i, v) in chol.forward_sub(&col).into_iter().enumerate() {
            w.set(i, j, v);
        }
    }
    let sigma_post = comp.cov.sub(&w.transpose().matmul(&w)?)?.symmetrize();
    Ok(PosteriorOracle { mu_post, sigma_post })
}

/// Peak signal-to-noise ratio in dB for model-space images, capped at [`PSNR_CAP_DB`].
pub fn psnr(x: &ImageGrid, reference: &ImageGrid) -> Result<f64> {
    x.ensure_same_dims(reference, "psnr")?;
    let mse = x.sub(reference)?.squared_norm() / x.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (PSNR_RANGE * PSNR_RANGE / mse).log10()).min(PSNR_CAP_DB))
}

/// Handcrafted features: image mean, 4x4 thumbnail, mean Sobel gradient energy.
/// Channels are averaged first.
pub fn desk_features(img: &ImageGrid) -> Result<Vec<f64>> {
    let d = img.dims();
    if d.height < 4 || d.width < 4 {
        return Err(Error::Shape(format!("features need at least 4x4 images, got {d}")));
    }
    let (h, w, c) = (d.height, d.width, d.channels);
    let gray: Vec<f64> = img.values().chunks(c).map(|px| px.iter().sum::<f64>() / c as f64).collect();
    let mut feats = Vec::with_capacity(FEATURE_DIM);
    feats.push(gray.iter().sum::<f64>() / gray.len() as f64);
    let mut thumb = [0.0; 16];
    let mut counts = [0usize; 16];
    for i in 0..h {
        for j in 0..w {
            let b = (i * 4 / h) * 4 + j * 4 / w;
            thumb[b] += gray[i * w + j];
            counts[b] += 1;
        }
    }
    feats.extend(thumb.iter().zip(&counts).map(|(s, &n)| s / n as f64));
    let at = |i: isize, j: isize| {
        let r = crate::forward_ops::reflect(i, h);
        let q = crate::forward_ops::reflect(j, w);
        gray[r * w + q]
    };
    let mut energy = 0.0;
    for i in 0..h as isize {
        for j in 0..w as isize {
            let gx = (at(i - 1, j + 1) + 2.0 * at(i, j + 1) + at(i + 1, j + 1))
                - (at(i - 1, j - 1) + 2.0 * at(i, j - 1) + at(i + 1, j - 1));
            let gy = (at(i + 1, j - 1) + 2.0 * at(i + 1, j) + at(i + 1, j + 1))
                - (at(i - 1, j - 1) + 2.0 * at(i - 1, j) + at(i - 1, j + 1));
            energy += gx * gx + gy * gy;
        }
    }
    feats.push(energy / (h * w) as f64);
    Ok(feats)
}

fn mean_cov(feats: &[Vec<f64>]) -> (Vec<f64>, DenseMatrix) {
    let n = feats.len() as f64;
    let k = feats[0].len();
    let mut mu = vec![0.0; k];
    for f in feats {
        for (m, v) in mu.iter_mut().zip(f) {
            *m += v / n;
        }
    }
    let mut cov = DenseMatrix::zeros(k, k);
    for f in feats {
        for i in 0..k {
            for j in 0..k {
                let v = cov.get(i, j) + (f[i] - mu[i]) * (f[j] - mu[j]) / (n - 1.0);
                cov.set(i, j, v);
            }
        }
    }
    (mu, cov)
}

/// `‖μa − μb‖² + tr(Ca + Cb − 2 (Ca Cb)^{1/2})`
pub fn frechet_gaussians(mu_a: &[f64], cov_a: &DenseMatrix, mu_b: &[f64], cov_b: &DenseMatrix) -> Result<f64> {
    let mean_term: f64 = mu_a.iter().zip(mu_b).map(|(a, b)| (a - b).powi(2)).sum();
    // tr (Ca Cb)^{1/2} = tr (Ca^{1/2} Cb Ca^{1/2})^{1/2}
    let root_a = sqrt_psd(cov_a, SQRT_CLIP)?;
    let inner = root_a.matmul(cov_b)?.matmul(&root_a)?.symmetrize();
    let cross = sqrt_psd(&inner, SQRT_CLIP)?.trace();
    Ok((mean_term + cov_a.trace() + cov_b.trace() - 2.0 * cross).max(0.0))
}

/// Fréchet distance between Gaussians fitted to two feature sets.
pub fn frechet_from_features(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArgument("Fréchet distance needs non-empty sets".into()));
    }
    let k = a[0].len();
    if a.iter().chain(b).any(|f| f.len() != k) {
        return Err(Error::Shape("feature vectors differ in length".into()));
    }
    let need = k.max(2);
    if a.len() < need || b.len() < need {
        return Err(Error::InvalidArgument(format!(
            "Fréchet distance over {k} features needs at least {need} samples per set \
             (got {} and {}); add samples or reduce the feature set",
            a.len(),
            b.len()
        )));
    }
    let (ma, ca) = mean_cov(a);
    let (mb, cb) = mean_cov(b);
    frechet_gaussians(&ma, &ca, &mb, &cb)
}

/// Desk-scale Fréchet distance between two image populations.
pub fn frechet_desk(set_a: &[ImageGrid], set_b: &[ImageGrid]) -> Result<f64> {
    let fa = set_a.iter().map(desk_features).collect::<Result<Vec<_>>>()?;
    let fb = set_b.iter().map(desk_features).collect::<Result<Vec<_>>>()?;
    frechet_from_features(&fa, &fb)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t_stat: f64,
    pub p_value: f64,
    pub df: f64,
    pub mean: f64,
}

/// Two-sided one-sample t-test of `deltas` against zero mean.
pub fn paired_t_test(deltas: &[f64]) -> Result<TTest> {
    let n = deltas.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("t-test needs at least 2 deltas, got {n}")));
    }
    let nf = n as f64;
    let mean = deltas.iter().sum::<f64>() / nf;
    let var = deltas.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    if !(var > 0.0) {
        return Err(Error::Degenerate("deltas have zero variance".into()));
    }
    let t = mean / (var / nf).sqrt();
    let df = nf - 1.0;
    let p = student_t_two_sided(t, df)?;
    Ok(TTest { t_stat: t, p_value: p, df, mean })
}

/// `P(|T| ≥ |t|)` for Student's t with `df` degrees of freedom.
pub fn student_t_two_sided(t: f64, df: f64) -> Result<f64> {
    let x = df / (df + t * t);
    Ok(regularized_incomplete_beta(x, df / 2.0, 0.5)?.min(1.0))
}

/// Lanczos approximation of `ln Γ(x)` for `x > 0`.
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_59,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_571_6e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEF[0];
    for (i, c) in COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Regularized incomplete beta `I_x(a, b)` by continued fraction.
pub fn regularized_incomplete_beta(x: f64, a: f64, b: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&x) || !(a > 0.0 && b > 0.0) {
        return Err(Error::InvalidArgument(format!("incomplete beta at x={x}, a={a}, b={b}")));
    }
    if x == 0.0 || x == 1.0 {
        return Ok(x);
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        Ok(front * beta_continued_fraction(x, a, b)? / a)
    } else {
        Ok(1.0 - front * beta_continued_fraction(1.0 - x, b, a)? / b)
    }
}

/// Modified Lentz evaluation of the incomplete-beta continued fraction.
fn beta_continued_fraction(x: f64, a: f64, b: f64) -> Result<f64> {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let mut c = 1.0;
    let mut d = 1.0 - (a + b) * x / (a + 1.0);
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut f = d;
    for m in 1..=10_000 {
        let m = m as f64;
        for num in [
            m * (b - m) * x / ((a + 2.0 * m - 1.0) * (a + 2.0 * m)),
            -(a + m) * (a + b + m) * x / ((a + 2.0 * m) * (a + 2.0 * m + 1.0)),
        ] {
            d = 1.0 + num * d;
            if d.abs() < TINY {
                d = TINY;
            }
            c = 1.0 + num / c;
            if c.abs() < TINY {
                c = TINY;
            }
            d = 1.0 / d;
            f *= c * d;
        }
        if (c * d - 1.0).abs() < EPS {
            return Ok(f);
        }
    }
    Err(Error::Degenerate("incomplete beta continued fraction did not converge".into()))
}

/// Counts generator forward evaluations.
#[derive(Debug, Default)]
pub struct NfeCounter(AtomicU64);

impl NfeCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }

    fn bump(&self) {
        self.0.fetch_add(1, Ordering::Relaxed);
    }
}

/// One single-pass posterior sample `I_φ(y + h z)`.
pub fn posterior_sample(
    generator: &ParamModel,
    y_img: &ImageGrid,
    h: f64,
    rng: &mut SeededRng,
    counter: &NfeCounter,
) -> Result<ImageGrid> {
    let input = inference_input(y_img, h, rng)?;
    counter.bump();
    ImageGrid::new(generator.dims(), generator.forward(input.values(), None)?, RangeTag::Model)
}

/// Generator evaluations used to draw `k` posterior samples for one measurement.
pub fn nfe_audit(generator: &ParamModel, y_img: &ImageGrid, h: f64, k: usize, seed: u64) -> Result<u64> {
    let counter = NfeCounter::new();
    let root = SeededRng::new(seed);
    for s in 0..k as u64 {
        posterior_sample(generator, y_img, h, &mut root.derive(&[crate::rng::tags::INFER, s]), &counter)?;
    }
    Ok(counter.get())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward_ops::ForwardOperator;
    use crate::grid::Dims;
    use crate::models::prior::{isotropic_cov, smooth_cov};
    use crate::models::{Arch, Squash};
    use proptest::prelude::*;

    #[test]
    fn psnr_examples() {
        let d = Dims::new(4, 4, 1);
        let r = ImageGrid::zeros(d, RangeTag::Model);
        let x = ImageGrid::filled(d, 0.2, RangeTag::Model).unwrap();
        assert!((psnr(&x, &r).unwrap() - 20.0).abs() < 1e-12);
        assert_eq!(psnr(&r, &r).unwrap(), PSNR_CAP_DB);
        let x = ImageGrid::filled(d, 0.1, RangeTag::Model).unwrap();
        assert!((psnr(&x, &r).unwrap() - 10.0 * 400f64.log10()).abs() < 1e-12);
    }

    #[test]
    fn psnr_decreases_with_noise() {
        let d = Dims::new(8, 8, 1);
        let mut rng = SeededRng::new(1);
        let r = rng.gaussian_grid(d).map(RangeTag::Model, |v| 0.3 * v).unwrap();
        let mut wins = 0;
        for _ in 0..100 {
            let z = rng.gaussian_grid(d);
            let a = r.values().iter().zip(z.values()).map(|(v, e)| v + 0.05 * e).collect();
            let b = r.values().iter().zip(z.values()).map(|(v, e)| v + 0.1 * e).collect();
            let pa = psnr(&ImageGrid::new(d, a, RangeTag::Model).unwrap(), &r).unwrap();
            let pb = psnr(&ImageGrid::new(d, b, RangeTag::Model).unwrap(), &r).unwrap();
            wins += usize::from(pa > pb);
        }
        assert_eq!(wins, 100);
    }

    #[test]
    fn scalar_conjugacy_and_noiseless_limit() {
        let d = Dims::new(2, 2, 1);
        let mu0 = vec![0.1, -0.2, 0.0, 0.3];
        let prior = GaussianPrior::single(d, mu0.clone(), isotropic_cov(4, 0.5)).unwrap();
        let h = DenseMatrix::identity(4);
        let y = vec![0.4, 0.4, -0.1, 0.9];
        let post = gaussian_posterior(&prior, &h, 0.2, &y).unwrap();
        for i in 0..4 {
            let expected = (0.25 * y[i] + 0.04 * mu0[i]) / 0.29;
            assert!((post.mu_post[i] - expected).abs() < 1e-12);
            assert!((post.sigma_post.get(i, i) - 0.25 * 0.04 / 0.29).abs() < 1e-12);
        }
        let id_prior = GaussianPrior::single(d, vec![0.0; 4], DenseMatrix::identity(4)).unwrap();
        let sharp = gaussian_posterior(&id_prior, &h, 1e-6, &y).unwrap();
        for i in 0..4 {
            assert!((sharp.mu_post[i] - y[i]).abs() < 1e-10);
            assert!(sharp.sigma_post.get(i, i).abs() < 1e-10);
        }
    }

    #[test]
    fn blur_posterior_matches_information_form() {
        let d = Dims::new(8, 8, 1);
        let op = ForwardOperator::gaussian_blur(3, 1.0, 0.05).unwrap();
        let h = op.as_dense_matrix(d, 4096).unwrap();
        let mu0: Vec<f64> = (0..64).map(|k| 0.05 * (k as f64 * 0.3).cos()).collect();
        let cov = smooth_cov(d, 0.3, 1.5, 0.01);
        let prior = GaussianPrior::single(d, mu0.clone(), cov.clone()).unwrap();
        let mut rng = SeededRng::new(3);
        let y = rng.normal_vec(64).iter().map(|v| 0.3 * v).collect::<Vec<_>>();
        let post = gaussian_posterior(&prior, &h, 0.05, &y).unwrap();

        // independent: information form with nalgebra inverses
        let s0_inv = cov.to_nalgebra().try_inverse().unwrap();
        let hn = h.to_nalgebra();
        let prec = &s0_inv + hn.transpose() * &hn / 0.0025;
        let sigma = prec.clone().try_inverse().unwrap();
        let rhs = &s0_inv * nalgebra::DVector::from_vec(mu0) + hn.transpose() * nalgebra::DVector::from_vec(y.clone()) / 0.0025;
        let mu = &sigma * rhs;
        for i in 0..64 {
            assert!((post.mu_post[i] - mu[i]).abs() < 1e-9);
            for j in 0..64 {
                assert!((post.sigma_post.get(i, j) - sigma[(i, j)]).abs() < 1e-9);
            }
        }
        // stationarity of ‖y−Hx‖²/σ² + (x−μ0)ᵀΣ0⁻¹(x−μ0) at μ_post
        let x = nalgebra::DVector::from_vec(post.mu_post.clone());
        let grad = hn.transpose() * (&hn * &x - nalgebra::DVector::from_vec(y)) / 0.0025
            + &s0_inv * (&x - nalgebra::DVector::from_vec(prior.mean()));
        assert!(grad.amax() < 1e-8 * (1.0 + prec.amax()));
    }

    #[test]
    fn frechet_examples() {
        // equal unit covariances, means 0 and 3: distance 9
        let a: Vec<Vec<f64>> = [-1.0, 1.0, -1.0, 1.0].iter().map(|v| vec![*v * (0.75f64).sqrt()]).collect();
        let b: Vec<Vec<f64>> = a.iter().map(|v| vec![v[0] + 3.0]).collect();
        assert!((frechet_from_features(&a, &b).unwrap() - 9.0).abs() < 1e-12);

        let mut rng = SeededRng::new(4);
        let imgs: Vec<ImageGrid> = (0..40).map(|_| rng.gaussian_grid(Dims::new(8, 8, 1))).collect();
        assert!(frechet_desk(&imgs, &imgs).unwrap().abs() < 1e-8);
        assert!(frechet_desk(&imgs[..5], &imgs[..5]).is_err());
    }

    #[test]
    fn frechet_two_gaussian_closed_form() {
        // diagonal covariances: Σ (μa−μb)² + (sqrt(va) − sqrt(vb))²
        let ma = [0.0, 1.0];
        let mb = [0.5, -1.0];
        let ca = DenseMatrix::from_diag(&[4.0, 1.0]);
        let cb = DenseMatrix::from_diag(&[1.0, 9.0]);
        let expected = 0.25 + 4.0 + 1.0 + 4.0;
        assert!((frechet_gaussians(&ma, &ca, &mb, &cb).unwrap() - expected).abs() < 1e-10);
    }

    #[test]
    fn feature_values() {
        let d = Dims::new(8, 8, 1);
        let c = ImageGrid::filled(d, 0.25, RangeTag::Model).unwrap();
        let f = desk_features(&c).unwrap();
        assert_eq!(f.len(), FEATURE_DIM);
        assert!(f[..17].iter().all(|&v| (v - 0.25).abs() < 1e-15));
        assert_eq!(f[17], 0.0);
    }

    #[test]
    fn t_test_hand_examples() {
        // independent values from a scipy one-sample t-test
        let r = paired_t_test(&[0.5, 1.2, -0.3, 0.8, 1.1]).unwrap();
        assert!((r.t_stat - 2.449_489_742_783_178_3).abs() < 1e-10);
        assert!((r.p_value - 0.070_483_996_910_219_934).abs() < 1e-6);
        let r = paired_t_test(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert!((r.t_stat - 4.242_640_687_119_284_8).abs() < 1e-10);
        assert!((r.p_value - 0.013_235_599_563_682_695).abs() < 1e-6);

        let sym = paired_t_test(&[1.0, -1.0, 1.0, -1.0]).unwrap();
        assert_eq!(sym.t_stat, 0.0);
        assert!((sym.p_value - 1.0).abs() < 1e-15);
        assert!(matches!(paired_t_test(&[1.0; 4]), Err(Error::Degenerate(_))));
        assert!(paired_t_test(&[1.0]).is_err());
    }

    #[test]
    fn t_distribution_matches_statrs() {
        use statrs::distribution::{ContinuousCDF, StudentsT};
        for &df in &[1.0, 3.0, 9.5, 99.0] {
            let dist = StudentsT::new(0.0, 1.0, df).unwrap();
            for &t in &[0.1, 0.9, 2.0, 4.5, 12.0] {
                let expected = 2.0 * (1.0 - dist.cdf(t));
                let got = student_t_two_sided(t, df).unwrap();
                assert!((got - expected).abs() < 1e-9 * (1.0 + expected), "df={df} t={t}: {got} vs {expected}");
            }
        }
    }

    #[test]
    fn significant_shift_detected() {
        let mut rng = SeededRng::new(8);
        let d: Vec<f64> = (0..100).map(|_| 0.1 + 0.1 * rng.normal()).collect();
        assert!(paired_t_test(&d).unwrap().p_value < 1e-4);
    }

    #[test]
    fn nfe_counts_single_pass() {
        let d = Dims::new(2, 2, 1);
        let mut rng = SeededRng::new(1);
        let g = ParamModel::init(Arch::Affine { dims: d, squash: Squash::Clamp }, &mut rng).unwrap();
        let y = ImageGrid::zeros(d, RangeTag::Unbounded);
        assert_eq!(nfe_audit(&g, &y, 0.1, 1, 0).unwrap(), 1);
        assert_eq!(nfe_audit(&g, &y, 0.1, 7, 0).unwrap(), 7);
    }

    proptest! {
        #[test]
        fn frechet_symmetric_nonnegative(seed in 0u64..1000) {
            let mut rng = SeededRng::new(seed);
            let a: Vec<Vec<f64>> = (0..12).map(|_| rng.normal_vec(3)).collect();
            let b: Vec<Vec<f64>> = (0..15).map(|_| rng.normal_vec(3).iter().map(|v| 2.0 * v + 0.5).collect()).collect();
            let ab = frechet_from_features(&a, &b).unwrap();
            let ba = frechet_from_features(&b, &a).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ba).abs() < 1e-9 * (1.0 + ab));
        }
    }
}
