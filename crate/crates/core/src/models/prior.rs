//! Gaussian and Gaussian-mixture priors with closed-form diffused scores.
//!
//! Each component's covariance is eigendecomposed once, so the diffused
//! covariance `ᾱΣ + (1-ᾱ)I` is diagonal in the same basis at every step.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Dims, ImageGrid, RangeTag};
use crate::linalg::{Cholesky, DenseMatrix, SymEigen};
use crate::rng::SeededRng;
use crate::schedule::ScheduleTable;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub cov: DenseMatrix,
}

#[derive(Debug, Clone)]
struct Factored {
    eig: SymEigen,
    chol: Cholesky,
}

/// A prior over vectorized images: one or more weighted Gaussian components.
#[derive(Debug, Clone)]
pub struct GaussianPrior {
    dims: Dims,
    components: Vec<GaussianComponent>,
    factors: Vec<Factored>,
}

impl GaussianPrior {
    pub fn single(dims: Dims, mean: Vec<f64>, cov: DenseMatrix) -> Result<Self> {
        Self::mixture(dims, vec![GaussianComponent { weight: 1.0, mean, cov }])
    }

    pub fn mixture(dims: Dims, components: Vec<GaussianComponent>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::InvalidArgument("prior needs at least one component".into()));
        }
        let n = dims.len();
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if components.iter().any(|c| !(c.weight > 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("mixture weights must be positive and sum to 1 (sum {total})")));
        }
        let mut factors = Vec::with_capacity(components.len());
        for c in &components {
            if c.mean.len() != n || c.cov.rows() != n || c.cov.cols() != n {
                return Err(Error::Shape(format!("prior component does not match {dims}")));
            }
            let chol = Cholesky::factor(&c.cov)?;
            let eig = SymEigen::new(&c.cov)?;
            factors.push(Factored { eig, chol });
        }
        Ok(Self { dims, components, factors })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn dim(&self) -> usize {
        self.dims.len()
    }

    pub fn components(&self) -> &[GaussianComponent] {
        &self.components
    }

    pub fn is_single(&self) -> bool {
        self.components.len() == 1
    }

    /// Overall mean.
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim()];
        for c in &self.components {
            for (a, b) in m.iter_mut().zip(&c.mean) {
                *a += c.weight * b;
            }
        }
        m
    }

    /// Overall covariance (moment-matched for mixtures).
    pub fn covariance(&self) -> DenseMatrix {
        let mu = self.mean();
        let n = self.dim();
        let mut out = DenseMatrix::zeros(n, n);
        for c in &self.components {
            for i in 0..n {
                for j in 0..n {
                    let v = out.get(i, j)
                        + c.weight * (c.cov.get(i, j) + (c.mean[i] - mu[i]) * (c.mean[j] - mu[j]));
                    out.set(i, j, v);
                }
            }
        }
        out
    }

    pub fn sample(&self, rng: &mut SeededRng) -> Vec<f64> {
        let k = if self.is_single() {
            0
        } else {
            let u = rng.uniform();
            let mut acc = 0.0;
            let mut pick = self.components.len() - 1;
            for (i, c) in self.components.iter().enumerate() {
                acc += c.weight;
                if u < acc {
                    pick = i;
                    break;
                }
            }
            pick
        };
        let eps = rng.normal_vec(self.dim());
        let l = self.factors[k].chol.lower();
        let shaped = l.matvec(&eps).expect("square factor");
        self.components[k].mean.iter().zip(shaped).map(|(m, s)| m + s).collect()
    }

    /// Per-component (log density, score) of the diffused marginal.
    fn component_terms(&self, k: usize, x: &[f64], alpha_bar: f64) -> Result<(f64, Vec<f64>)> {
        let c = &self.components[k];
        let eig = &self.factors[k].eig;
        let root = alpha_bar.sqrt();
        let diff: Vec<f64> = x.iter().zip(&c.mean).map(|(x, m)| x - root * m).collect();
        let mut coef = eig.to_eigenbasis(&diff);
        let mut quad = 0.0;
        let mut log_det = 0.0;
        for (pivot, (cv, lam)) in coef.iter_mut().zip(&eig.eigenvalues).enumerate() {
            let var = alpha_bar * lam + (1.0 - alpha_bar);
            if !(var > 0.0) {
                return Err(Error::NotPositiveDefinite { pivot, value: var });
            }
            quad += *cv * *cv / var;
            log_det += var.ln();
            *cv /= var;
        }
        let score = eig.from_eigenbasis(&coef).into_iter().map(|v| -v).collect();
        let n = x.len() as f64;
        let log_density = -0.5 * (quad + log_det + n * (2.0 * std::f64::consts::PI).ln());
        Ok((log_density, score))
    }

    /// Score of the diffused marginal at `x` for cumulative signal level `alpha_bar`.
    pub fn score(&self, x: &[f64], alpha_bar: f64) -> Result<Vec<f64>> {
        self.check(x, alpha_bar)?;
        if self.is_single() {
            return Ok(self.component_terms(0, x, alpha_bar)?.1);
        }
        let terms = (0..self.components.len())
            .map(|k| self.component_terms(k, x, alpha_bar))
            .collect::<Result<Vec<_>>>()?;
        let logits: Vec<f64> =
            terms.iter().zip(&self.components).map(|((ld, _), c)| c.weight.ln() + ld).collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let unnorm: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = unnorm.iter().sum();
        let mut out = vec![0.0; x.len()];
        for ((_, s), r) in terms.iter().zip(&unnorm) {
            let resp = r / z;
            for (o, v) in out.iter_mut().zip(s) {
                *o += resp * v;
            }
        }
        Ok(out)
    }

    /// Log density of the diffused marginal.
    pub fn log_marginal(&self, x: &[f64], alpha_bar: f64) -> Result<f64> {
        self.check(x, alpha_bar)?;
        let logits = (0..self.components.len())
            .map(|k| Ok(self.components[k].weight.ln() + self.component_terms(k, x, alpha_bar)?.0))
            .collect::<Result<Vec<f64>>>()?;
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln())
    }

    /// The noise predictor `ε(x) = σ C⁻¹ (x - sqrt(ᾱ) μ)` of a single Gaussian as
    /// an affine map `(W, b)`, row-major `W`.
    pub fn epsilon_affine(&self, alpha_bar: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        if !self.is_single() {
            return Err(Error::InvalidArgument("affine noise predictor needs a single-component prior".into()));
        }
        let sigma = (1.0 - alpha_bar).sqrt();
        let eig = &self.factors[0].eig;
        let inv = eig.apply_fn(|lam| sigma / (alpha_bar * lam + 1.0 - alpha_bar));
        let root = alpha_bar.sqrt();
        let shifted: Vec<f64> = self.components[0].mean.iter().map(|m| root * m).collect();
        let b = inv.matvec(&shifted)?.into_iter().map(|v| -v).collect();
        Ok((inv.entries().to_vec(), b))
    }

    fn check(&self, x: &[f64], alpha_bar: f64) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::Shape(format!("{} values for a prior over {}", x.len(), self.dims)));
        }
        if !(alpha_bar > 0.0 && alpha_bar <= 1.0) {
            return Err(Error::OutOfRange(format!("alpha_bar = {alpha_bar}")));
        }
        Ok(())
    }
}

/// Teacher score `∇ log p_t(x_t)` of the diffused prior at timestep `t`.
pub fn teacher_score(prior: &GaussianPrior, x_t: &ImageGrid, t: usize, sched: &ScheduleTable) -> Result<ImageGrid> {
    let ab = sched.alpha_bar(t)?;
    ImageGrid::new(x_t.dims(), prior.score(x_t.values(), ab)?, RangeTag::Unbounded)
}

/// `std² I`
pub fn isotropic_cov(n: usize, std: f64) -> DenseMatrix {
    DenseMatrix::identity(n).scale(std * std)
}

/// Squared-exponential covariance over pixel positions, independent across
/// channels, plus `nugget` on the diagonal.
pub fn smooth_cov(dims: Dims, std: f64, length_scale: f64, nugget: f64) -> DenseMatrix {
    let c = dims.channels;
    let n = dims.len();
    DenseMatrix::from_fn(n, n, |i, j| {
        if i % c != j % c {
            return 0.0;
        }
        let (pi, pj) = (i / c, j / c);
        let (ri, ci) = ((pi / dims.width) as f64, (pi % dims.width) as f64);
        let (rj, cj) = ((pj / dims.width) as f64, (pj % dims.width) as f64);
        let r2 = (ri - rj).powi(2) + (ci - cj).powi(2);
        let base = std * std * (-r2 / (2.0 * length_scale * length_scale)).exp();
        if i == j {
            base + nugget
        } else {
            base
        }
    })
}

/// Empirical mean and covariance of `samples`, with `ridge` added to the diagonal.
pub fn fit_gaussian(dims: Dims, samples: &[Vec<f64>], ridge: f64) -> Result<GaussianPrior> {
    let n = dims.len();
    if samples.len() < 2 {
        return Err(Error::InvalidArgument("need at least two samples to fit a Gaussian".into()));
    }
    let count = samples.len() as f64;
    let mut mean = vec![0.0; n];
    for s in samples {
        if s.len() != n {
            return Err(Error::Shape(format!("sample of length {} for {dims}", s.len())));
        }
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v / count;
        }
    }
    let mut cov = DenseMatrix::zeros(n, n);
    for s in samples {
        let d: Vec<f64> = s.iter().zip(&mean).map(|(v, m)| v - m).collect();
        for i in 0..n {
            for j in i..n {
                let v = cov.get(i, j) + d[i] * d[j] / (count - 1.0);
                cov.set(i, j, v);
            }
        }
    }
    for i in 0..n {
        for j in 0..i {
            let v = cov.get(j, i);
            cov.set(i, j, v);
        }
    }
    GaussianPrior::single(dims, mean, cov.add_diag(ridge))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff_gradient;
    use crate::schedule::linear_schedule;

    fn smooth_prior(dims: Dims) -> GaussianPrior {
        let mean: Vec<f64> = (0..dims.len()).map(|k| 0.1 * ((k as f64) * 0.7).sin()).collect();
        GaussianPrior::single(dims, mean, smooth_cov(dims, 0.3, 1.5, 0.01)).unwrap()
    }

    fn mixture_prior(dims: Dims) -> GaussianPrior {
        let n = dims.len();
        GaussianPrior::mixture(
            dims,
            vec![
                GaussianComponent { weight: 0.3, mean: vec![0.4; n], cov: smooth_cov(dims, 0.2, 1.0, 0.02) },
                GaussianComponent { weight: 0.7, mean: vec![-0.3; n], cov: isotropic_cov(n, 0.15) },
            ],
        )
        .unwrap()
    }

    #[test]
    fn standard_normal_score_is_minus_x() {
        let d = Dims::new(2, 3, 1);
        let p = GaussianPrior::single(d, vec![0.0; 6], DenseMatrix::identity(6)).unwrap();
        let sched = linear_schedule(400, 1e-4, 0.02).unwrap();
        let x = ImageGrid::new(d, vec![0.5, -1.0, 2.0, 0.0, 0.3, -0.2], RangeTag::Unbounded).unwrap();
        for t in [1, 57, 400] {
            let s = teacher_score(&p, &x, t, &sched).unwrap();
            for (a, b) in s.values().iter().zip(x.values()) {
                assert!((a + b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn scores_match_log_density_finite_differences() {
        let d = Dims::new(3, 3, 1);
        let sched = linear_schedule(400, 1e-4, 0.02).unwrap();
        let mut rng = SeededRng::new(11);
        for prior in [smooth_prior(d), mixture_prior(d)] {
            for t in [1, 50, 150, 300, 400] {
                let ab = sched.alpha_bar(t).unwrap();
                for _ in 0..20 {
                    let x: Vec<f64> = rng.normal_vec(9).iter().map(|v| 0.5 * v).collect();
                    let s = prior.score(&x, ab).unwrap();
                    let num = finite_diff_gradient(|q| prior.log_marginal(q, ab).unwrap(), &x, 1e-5).unwrap();
                    for (a, b) in s.iter().zip(&num) {
                        assert!((a - b).abs() < 1e-6 * (1.0 + b.abs()), "t={t}: {a} vs {b}");
                    }
                }
            }
        }
    }

    #[test]
    fn single_component_mixture_equals_gaussian() {
        let d = Dims::new(2, 2, 1);
        let g = smooth_prior(d);
        let m = GaussianPrior::mixture(d, g.components().to_vec()).unwrap();
        let x = [0.1, -0.4, 0.7, 0.2];
        assert_eq!(g.score(&x, 0.3).unwrap(), m.score(&x, 0.3).unwrap());
    }

    #[test]
    fn pure_noise_limit() {
        let d = Dims::new(2, 2, 1);
        let p = mixture_prior(d);
        let x = [0.3, -0.1, 0.2, 0.9];
        // residual is O(sqrt(ᾱ)·|μ|)
        let s = p.score(&x, 1e-12).unwrap();
        for (a, b) in s.iter().zip(&x) {
            assert!((a + b).abs() < 1e-6);
        }
    }

    #[test]
    fn epsilon_affine_matches_score() {
        let d = Dims::new(2, 2, 1);
        let p = smooth_prior(d);
        let ab = 0.6;
        let (w, b) = p.epsilon_affine(ab).unwrap();
        let x = [0.3, -0.1, 0.2, 0.9];
        let s = p.score(&x, ab).unwrap();
        let sigma = (1.0 - ab).sqrt();
        for i in 0..4 {
            let eps: f64 = b[i] + (0..4).map(|j| w[i * 4 + j] * x[j]).sum::<f64>();
            assert!((eps + sigma * s[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn sampling_moments() {
        let d = Dims::new(1, 2, 1);
        let cov = DenseMatrix::new(2, 2, vec![0.04, 0.02, 0.02, 0.09]).unwrap();
        let p = GaussianPrior::single(d, vec![0.1, -0.2], cov).unwrap();
        let mut rng = SeededRng::new(3);
        let draws: Vec<Vec<f64>> = (0..200_000).map(|_| p.sample(&mut rng)).collect();
        let fit = fit_gaussian(d, &draws, 0.0).unwrap();
        let c = &fit.components()[0];
        assert!((c.mean[0] - 0.1).abs() < 3e-3 && (c.mean[1] + 0.2).abs() < 3e-3);
        assert!((c.cov.get(0, 1) - 0.02).abs() < 2e-3);
        assert!((c.cov.get(1, 1) - 0.09).abs() < 2e-3);
    }

    #[test]
    fn rejects_bad_priors() {
        let d = Dims::new(1, 2, 1);
        let bad = DenseMatrix::new(2, 2, vec![1.0, 2.0, 2.0, 1.0]).unwrap();
        assert!(matches!(
            GaussianPrior::single(d, vec![0.0; 2], bad),
            Err(Error::NotPositiveDefinite { .. })
        ));
        let c = GaussianComponent { weight: 0.5, mean: vec![0.0; 2], cov: DenseMatrix::identity(2) };
        assert!(GaussianPrior::mixture(d, vec![c]).is_err());
    }
}
