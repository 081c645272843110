//! Parametric models (generator and student) with hand-written reverse-mode
//! gradients, plus the analytic Gaussian-family teacher.

pub mod layers;
pub mod prior;
mod unet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Dims, ImageGrid, RangeTag};
use crate::rng::SeededRng;
use crate::schedule::ScheduleTable;

pub use prior::{teacher_score, GaussianComponent, GaussianPrior};

/// Output nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Squash {
    None,
    /// Hard clamp to `[-1, 1]`; gradient 1 inside, 0 outside.
    Clamp,
    Tanh,
}

impl Squash {
    #[inline]
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Squash::None => v,
            Squash::Clamp => v.clamp(-1.0, 1.0),
            Squash::Tanh => v.tanh(),
        }
    }

    #[inline]
    fn derivative(self, pre: f64, out: f64) -> f64 {
        match self {
            Squash::None => 1.0,
            Squash::Clamp => {
                if (-1.0..=1.0).contains(&pre) {
                    1.0
                } else {
                    0.0
                }
            }
            Squash::Tanh => 1.0 - out * out,
        }
    }
}

/// Time conditioning handed to score models.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeInput {
    /// `t / T`
    pub frac: f64,
    /// `sqrt(1 - ᾱ_t)`
    pub sigma: f64,
}

impl TimeInput {
    pub fn at(t: usize, sched: &ScheduleTable) -> Result<Self> {
        Ok(Self {
            frac: t as f64 / sched.timesteps() as f64,
            sigma: sched.sigma(t)?,
        })
    }
}

/// Architecture descriptor. Inputs and outputs share `dims`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Arch {
    /// `squash(A x + b)`
    Affine { dims: Dims, squash: Squash },
    /// `Σ_k c_k(σ_t) (W_k x + b_k)` with hat functions `c_k` over noise-level knots.
    TimeAffine { dims: Dims, knots: Vec<f64> },
    /// Three-level convolutional encoder-decoder with skip connections.
    Conv {
        dims: Dims,
        widths: [usize; 3],
        time_channel: bool,
        squash: Squash,
        residual: bool,
    },
}

impl Arch {
    pub fn dims(&self) -> Dims {
        match self {
            Arch::Affine { dims, .. } | Arch::TimeAffine { dims, .. } | Arch::Conv { dims, .. } => *dims,
        }
    }

    pub fn needs_time(&self) -> bool {
        match self {
            Arch::Affine { .. } => false,
            Arch::TimeAffine { .. } => true,
            Arch::Conv { time_channel, .. } => *time_channel,
        }
    }

    pub fn num_params(&self) -> usize {
        let n = self.dims().len();
        match self {
            Arch::Affine { .. } => n * n + n,
            Arch::TimeAffine { knots, .. } => knots.len() * (n * n + n),
            Arch::Conv { .. } => unet::ConvNet::from_arch(self).num_params(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dims();
        if d.is_empty() {
            return Err(Error::InvalidArgument(format!("empty model dims {d}")));
        }
        match self {
            Arch::Affine { .. } => Ok(()),
            Arch::TimeAffine { knots, .. } => {
                if knots.is_empty() {
                    return Err(Error::InvalidArgument("time-affine model needs at least one knot".into()));
                }
                if knots.iter().any(|k| !(k.is_finite() && *k > 0.0)) || knots.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(Error::InvalidArgument("knots must be positive and strictly increasing".into()));
                }
                Ok(())
            }
            Arch::Conv { widths, .. } => {
                if d.height % 4 != 0 || d.width % 4 != 0 {
                    return Err(Error::InvalidArgument(format!(
                        "conv model needs height and width divisible by 4, got {d}"
                    )));
                }
                if widths.contains(&0) {
                    return Err(Error::InvalidArgument("conv widths must be positive".into()));
                }
                Ok(())
            }
        }
    }

    /// Hat-function weights `(knot index, weight)` at noise level `sigma`.
    fn knot_weights(knots: &[f64], sigma: f64) -> [(usize, f64); 2] {
        let last = knots.len() - 1;
        if last == 0 || sigma <= knots[0] {
            return [(0, 1.0), (0, 0.0)];
        }
        if sigma >= knots[last] {
            return [(last, 1.0), (last, 0.0)];
        }
        let j = knots.partition_point(|&k| k <= sigma) - 1;
        let w = (sigma - knots[j]) / (knots[j + 1] - knots[j]);
        [(j, 1.0 - w), (j + 1, w)]
    }
}

/// Intermediate values kept by a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub enum Tape {
    Affine { input: Vec<f64>, pre: Vec<f64>, out: Vec<f64> },
    TimeAffine { input: Vec<f64>, coeffs: [(usize, f64); 2] },
    Conv(Box<unet::ConvTape>),
}

/// Gradients of a scalar with respect to parameters and input.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub params: Vec<f64>,
    pub input: Vec<f64>,
}

/// A fixed architecture with a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamModel {
    arch: Arch,
    params: Vec<f64>,
}

impl ParamModel {
    pub fn new(arch: Arch, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        if params.len() != arch.num_params() {
            return Err(Error::Shape(format!(
                "{} parameters for an architecture with {}",
                params.len(),
                arch.num_params()
            )));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model parameters".into()));
        }
        Ok(Self { arch, params })
    }

    pub fn zeros(arch: Arch) -> Result<Self> {
        let n = arch.num_params();
        Self::new(arch, vec![0.0; n])
    }

    /// Default initialization: affine maps start at the identity, conv nets
    /// get scaled normal weights with a zero output layer when residual.
    pub fn init(arch: Arch, rng: &mut SeededRng) -> Result<Self> {
        arch.validate()?;
        let params = match &arch {
            Arch::Affine { dims, .. } => identity_affine(dims.len()),
            Arch::TimeAffine { dims, knots } => {
                let block = identity_affine(dims.len());
                block.iter().copied().cycle().take(block.len() * knots.len()).collect()
            }
            Arch::Conv { .. } => unet::ConvNet::from_arch(&arch).init_params(rng),
        };
        Self::new(arch, params)
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn dims(&self) -> Dims {
        self.arch.dims()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Shape(format!("{} parameters, expected {}", params.len(), self.params.len())));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model parameters".into()));
        }
        self.params = params;
        Ok(())
    }

    pub(crate) fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn check_input(&self, x: &[f64], time: Option<TimeInput>) -> Result<()> {
        let n = self.dims().len();
        if x.len() != n {
            return Err(Error::Shape(format!("model input has {} values, expected {n}", x.len())));
        }
        if self.arch.needs_time() && time.is_none() {
            return Err(Error::InvalidArgument("time-conditioned model called without a timestep".into()));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64], time: Option<TimeInput>) -> Result<Vec<f64>> {
        Ok(self.forward_tape(x, time)?.0)
    }

    pub fn forward_tape(&self, x: &[f64], time: Option<TimeInput>) -> Result<(Vec<f64>, Tape)> {
        self.check_input(x, time)?;
        let n = x.len();
        let (out, tape) = match &self.arch {
            Arch::Affine { squash, .. } => {
                let (a, b) = self.params.split_at(n * n);
                let pre: Vec<f64> = (0..n).map(|i| b[i] + dot(&a[i * n..(i + 1) * n], x)).collect();
                let out: Vec<f64> = pre.iter().map(|&v| squash.apply(v)).collect();
                (out.clone(), Tape::Affine { input: x.to_vec(), pre, out })
            }
            Arch::TimeAffine { knots, .. } => {
                let coeffs = Arch::knot_weights(knots, time.map(|t| t.sigma).unwrap_or(0.0));
                let block = n * n + n;
                let mut out = vec![0.0; n];
                for &(k, c) in coeffs.iter().filter(|(_, c)| *c != 0.0) {
                    let p = &self.params[k * block..(k + 1) * block];
                    let (w, b) = p.split_at(n * n);
                    for i in 0..n {
                        out[i] += c * (b[i] + dot(&w[i * n..(i + 1) * n], x));
                    }
                }
                (out, Tape::TimeAffine { input: x.to_vec(), coeffs })
            }
            Arch::Conv { .. } => {
                let net = unet::ConvNet::from_arch(&self.arch);
                let (out, tape) = net.forward(&self.params, x, time.map(|t| t.frac))?;
                (out, Tape::Conv(Box::new(tape)))
            }
        };
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model output".into()));
        }
        Ok((out, tape))
    }

    /// Reverse pass for the upstream gradient `grad_out` of some scalar.
    pub fn backward(&self, tape: &Tape, grad_out: &[f64]) -> Result<Gradients> {
        let n = self.dims().len();
        if grad_out.len() != n {
            return Err(Error::Shape(format!("output gradient has {} values, expected {n}", grad_out.len())));
        }
        if grad_out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("output gradient".into()));
        }
        match (&self.arch, tape) {
            (Arch::Affine { squash, .. }, Tape::Affine { input, pre, out }) => {
                let a = &self.params[..n * n];
                let g_pre: Vec<f64> = (0..n).map(|i| grad_out[i] * squash.derivative(pre[i], out[i])).collect();
                let mut params = vec![0.0; n * n + n];
                let mut gx = vec![0.0; n];
                for (i, &g) in g_pre.iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    let row = &mut params[i * n..(i + 1) * n];
                    for (r, &xv) in row.iter_mut().zip(input) {
                        *r = g * xv;
                    }
                    for (gxj, &aij) in gx.iter_mut().zip(&a[i * n..(i + 1) * n]) {
                        *gxj += g * aij;
                    }
                }
                params[n * n..].copy_from_slice(&g_pre);
                Ok(Gradients { params, input: gx })
            }
            (Arch::TimeAffine { .. }, Tape::TimeAffine { input, coeffs }) => {
                let block = n * n + n;
                let mut params = vec![0.0; self.params.len()];
                let mut gx = vec![0.0; n];
                for &(k, c) in coeffs.iter().filter(|(_, c)| *c != 0.0) {
                    let w = &self.params[k * block..k * block + n * n];
                    let gp = &mut params[k * block..(k + 1) * block];
                    for i in 0..n {
                        let g = c * grad_out[i];
                        for j in 0..n {
                            gp[i * n + j] += g * input[j];
                            gx[j] += g * w[i * n + j];
                        }
                        gp[n * n + i] += g;
                    }
                }
                Ok(Gradients { params, input: gx })
            }
            (Arch::Conv { .. }, Tape::Conv(t)) => {
                unet::ConvNet::from_arch(&self.arch).backward(&self.params, t, grad_out)
            }
            _ => Err(Error::InvalidArgument("tape does not belong to this architecture".into())),
        }
    }

    /// Value and parameter gradient of `loss(forward(x))`, where `loss`
    /// returns its value and its gradient with respect to the output.
    pub fn param_grad(
        &self,
        x: &[f64],
        time: Option<TimeInput>,
        loss: impl FnOnce(&[f64]) -> (f64, Vec<f64>),
    ) -> Result<(f64, Vec<f64>)> {
        let (out, tape) = self.forward_tape(x, time)?;
        let (value, g_out) = loss(&out);
        if !value.is_finite() {
            return Err(Error::NonFinite("loss value".into()));
        }
        Ok((value, self.backward(&tape, &g_out)?.params))
    }
}

fn identity_affine(n: usize) -> Vec<f64> {
    let mut p = vec![0.0; n * n + n];
    for i in 0..n {
        p[i * n + i] = 1.0;
    }
    p
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// One posterior sample `I_φ(y_a)`.
pub fn generator_forward(gen: &ParamModel, y_a: &ImageGrid) -> Result<ImageGrid> {
    if y_a.dims() != gen.dims() {
        return Err(Error::Shape(format!("generator expects {}, got {}", gen.dims(), y_a.dims())));
    }
    ImageGrid::new(gen.dims(), gen.forward(y_a.values(), None)?, RangeTag::Model)
}

/// Student score `-ε̂(x_t, t) / sqrt(1 - ᾱ_t)`.
pub fn student_score(student: &ParamModel, x_t: &ImageGrid, t: usize, sched: &ScheduleTable) -> Result<ImageGrid> {
    let time = TimeInput::at(t, sched)?;
    let eps = student.forward(x_t.values(), Some(time))?;
    let values = eps.iter().map(|e| -e / time.sigma).collect();
    ImageGrid::new(x_t.dims(), values, RangeTag::Unbounded)
}
