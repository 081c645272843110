//! Convolution-network primitives on HWC buffers, each with its backward pass.

/// Shape of an HWC activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl Shape {
    pub const fn new(h: usize, w: usize, c: usize) -> Self {
        Self { h, w, c }
    }

    pub const fn len(&self) -> usize {
        self.h * self.w * self.c
    }
}

/// Square convolution with zero "same" padding. Weights are laid out
/// `[cout][ky][kx][cin]`, followed by `cout` biases.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
}

impl Conv {
    pub const fn new(cin: usize, cout: usize, k: usize) -> Self {
        Self { cin, cout, k }
    }

    pub const fn weight_len(&self) -> usize {
        self.cout * self.k * self.k * self.cin
    }

    pub const fn num_params(&self) -> usize {
        self.weight_len() + self.cout
    }

    pub fn forward(&self, x: &[f64], s: Shape, params: &[f64]) -> Vec<f64> {
        debug_assert_eq!(s.c, self.cin);
        let (wts, bias) = params.split_at(self.weight_len());
        let r = (self.k / 2) as isize;
        let mut out = vec![0.0; s.h * s.w * self.cout];
        for i in 0..s.h {
            for j in 0..s.w {
                let o = (i * s.w + j) * self.cout;
                out[o..o + self.cout].copy_from_slice(bias);
                for ky in 0..self.k {
                    let yi = i as isize + ky as isize - r;
                    if yi < 0 || yi >= s.h as isize {
                        continue;
                    }
                    for kx in 0..self.k {
                        let xj = j as isize + kx as isize - r;
                        if xj < 0 || xj >= s.w as isize {
                            continue;
                        }
                        let src = &x[(yi as usize * s.w + xj as usize) * self.cin..][..self.cin];
                        for co in 0..self.cout {
                            let wrow = &wts[((co * self.k + ky) * self.k + kx) * self.cin..][..self.cin];
                            out[o + co] += wrow.iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
            }
        }
        out
    }

    /// Returns `(grad_input, grad_params)`.
    pub fn backward(&self, x: &[f64], s: Shape, params: &[f64], gout: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let wts = &params[..self.weight_len()];
        let r = (self.k / 2) as isize;
        let mut gx = vec![0.0; x.len()];
        let mut gp = vec![0.0; self.num_params()];
        let (gw, gb) = gp.split_at_mut(self.weight_len());
        for i in 0..s.h {
            for j in 0..s.w {
                let o = (i * s.w + j) * self.cout;
                let go = &gout[o..o + self.cout];
                for (b, g) in gb.iter_mut().zip(go) {
                    *b += g;
                }
                for ky in 0..self.k {
                    let yi = i as isize + ky as isize - r;
                    if yi < 0 || yi >= s.h as isize {
                        continue;
                    }
                    for kx in 0..self.k {
                        let xj = j as isize + kx as isize - r;
                        if xj < 0 || xj >= s.w as isize {
                            continue;
                        }
                        let base = (yi as usize * s.w + xj as usize) * self.cin;
                        for (co, &g) in go.iter().enumerate() {
                            if g == 0.0 {
                                continue;
                            }
                            let widx = ((co * self.k + ky) * self.k + kx) * self.cin;
                            for ci in 0..self.cin {
                                gw[widx + ci] += g * x[base + ci];
                                gx[base + ci] += g * wts[widx + ci];
                            }
                        }
                    }
                }
            }
        }
        (gx, gp)
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v * sigmoid(v)).collect()
}

/// Gradient through SiLU given the pre-activation.
pub fn silu_backward(pre: &[f64], gout: &[f64]) -> Vec<f64> {
    pre.iter()
        .zip(gout)
        .map(|(&v, g)| {
            let s = sigmoid(v);
            g * (s + v * s * (1.0 - s))
        })
        .collect()
}

/// 2x2 average pooling. `s.h` and `s.w` must be even.
pub fn avg_pool2(x: &[f64], s: Shape) -> Vec<f64> {
    let (oh, ow) = (s.h / 2, s.w / 2);
    let mut out = vec![0.0; oh * ow * s.c];
    for i in 0..s.h {
        for j in 0..s.w {
            let o = ((i / 2) * ow + j / 2) * s.c;
            let src = (i * s.w + j) * s.c;
            for c in 0..s.c {
                out[o + c] += 0.25 * x[src + c];
            }
        }
    }
    out
}

/// `s` is the input shape of the forward pool.
pub fn avg_pool2_backward(gout: &[f64], s: Shape) -> Vec<f64> {
    let ow = s.w / 2;
    let mut gx = vec![0.0; s.len()];
    for i in 0..s.h {
        for j in 0..s.w {
            let o = ((i / 2) * ow + j / 2) * s.c;
            let d = (i * s.w + j) * s.c;
            for c in 0..s.c {
                gx[d + c] = 0.25 * gout[o + c];
            }
        }
    }
    gx
}

/// Nearest-neighbour 2x upsampling; `s` is the input shape.
pub fn upsample2(x: &[f64], s: Shape) -> Vec<f64> {
    let (oh, ow) = (s.h * 2, s.w * 2);
    let mut out = vec![0.0; oh * ow * s.c];
    for i in 0..oh {
        for j in 0..ow {
            let src = ((i / 2) * s.w + j / 2) * s.c;
            let d = (i * ow + j) * s.c;
            out[d..d + s.c].copy_from_slice(&x[src..src + s.c]);
        }
    }
    out
}

/// `s` is the input shape of the forward upsample.
pub fn upsample2_backward(gout: &[f64], s: Shape) -> Vec<f64> {
    let ow = s.w * 2;
    let mut gx = vec![0.0; s.len()];
    for i in 0..s.h * 2 {
        for j in 0..ow {
            let d = ((i / 2) * s.w + j / 2) * s.c;
            let src = (i * ow + j) * s.c;
            for c in 0..s.c {
                gx[d + c] += gout[src + c];
            }
        }
    }
    gx
}

/// Channel concatenation of two activations with the same spatial size.
pub fn concat(a: &[f64], ca: usize, b: &[f64], cb: usize) -> Vec<f64> {
    let px = a.len() / ca;
    let mut out = Vec::with_capacity(px * (ca + cb));
    for p in 0..px {
        out.extend_from_slice(&a[p * ca..(p + 1) * ca]);
        out.extend_from_slice(&b[p * cb..(p + 1) * cb]);
    }
    out
}

pub fn split(g: &[f64], ca: usize, cb: usize) -> (Vec<f64>, Vec<f64>) {
    let px = g.len() / (ca + cb);
    let mut a = Vec::with_capacity(px * ca);
    let mut b = Vec::with_capacity(px * cb);
    for p in 0..px {
        let row = &g[p * (ca + cb)..(p + 1) * (ca + cb)];
        a.extend_from_slice(&row[..ca]);
        b.extend_from_slice(&row[ca..]);
    }
    (a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_gradient, max_relative_error};
    use crate::grid::dot;
    use crate::rng::SeededRng;

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = SeededRng::new(21);
        for &(k, cin, cout) in &[(3, 2, 3), (1, 4, 2)] {
            let conv = Conv::new(cin, cout, k);
            let s = Shape::new(4, 5, cin);
            let x = rng.normal_vec(s.len());
            let p = rng.normal_vec(conv.num_params());
            let probe = rng.normal_vec(s.h * s.w * cout);
            let (gx, gp) = conv.backward(&x, s, &p, &probe);
            let num_p = finite_diff_gradient(|q| dot(&conv.forward(&x, s, q), &probe), &p, 1e-6).unwrap();
            let num_x = finite_diff_gradient(|q| dot(&conv.forward(q, s, &p), &probe), &x, 1e-6).unwrap();
            assert!(max_relative_error(&gp, &num_p, 1e-6) < 1e-6);
            assert!(max_relative_error(&gx, &num_x, 1e-6) < 1e-6);
        }
    }

    #[test]
    fn pooling_and_upsampling_are_adjoint_pairs() {
        let mut rng = SeededRng::new(2);
        let s = Shape::new(4, 6, 3);
        let x = rng.normal_vec(s.len());
        let g = rng.normal_vec(s.len() / 4);
        // <pool x, g> = <x, poolᵀ g>
        let lhs = dot(&avg_pool2(&x, s), &g);
        let rhs = dot(&x, &avg_pool2_backward(&g, s));
        assert!((lhs - rhs).abs() < 1e-12);

        let small = Shape::new(2, 3, 3);
        let xs = rng.normal_vec(small.len());
        let gs = rng.normal_vec(small.len() * 4);
        let lhs = dot(&upsample2(&xs, small), &gs);
        let rhs = dot(&xs, &upsample2_backward(&gs, small));
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn silu_gradient() {
        let x = vec![-3.0, -0.5, 0.0, 0.7, 4.0];
        let g = silu_backward(&x, &[1.0; 5]);
        for (k, &v) in x.iter().enumerate() {
            let num = finite_diff_gradient(|q| silu(q)[0], &[v], 1e-6).unwrap()[0];
            assert!((g[k] - num).abs() < 1e-8);
        }
    }

    #[test]
    fn concat_split_roundtrip() {
        let a = vec![1.0, 2.0, 3.0, 4.0];
        let b = vec![9.0, 8.0];
        let c = concat(&a, 2, &b, 1);
        assert_eq!(c, vec![1.0, 2.0, 9.0, 3.0, 4.0, 8.0]);
        assert_eq!(split(&c, 2, 1), (a, b));
    }
}
