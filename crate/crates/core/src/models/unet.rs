//! Three-level encoder-decoder: conv-SiLU, pool, conv-SiLU, pool, conv-SiLU,
//! upsample + skip, conv-SiLU, upsample + skip, conv-SiLU, 1x1 conv.

use super::layers::{self, Conv, Shape};
use super::{Arch, Gradients, Squash};
use crate::error::{Error, Result};
use crate::rng::SeededRng;

pub(crate) struct ConvNet {
    h: usize,
    w: usize,
    c: usize,
    widths: [usize; 3],
    time_channel: bool,
    squash: Squash,
    residual: bool,
    convs: [Conv; 6],
}

#[derive(Debug, Clone)]
pub struct ConvTape {
    input: Vec<f64>,
    pre: [Vec<f64>; 5],
    act: [Vec<f64>; 5],
    pooled: [Vec<f64>; 2],
    cat: [Vec<f64>; 2],
    out_pre: Vec<f64>,
    out: Vec<f64>,
}

fn finite(v: &[f64], layer: usize) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("conv layer {layer}")))
    }
}

impl ConvNet {
    pub(crate) fn from_arch(arch: &Arch) -> Self {
        let Arch::Conv { dims, widths, time_channel, squash, residual } = arch else {
            unreachable!("ConvNet built from a non-conv architecture")
        };
        let c = dims.channels;
        let cin = c + usize::from(*time_channel);
        let [w1, w2, w3] = *widths;
        Self {
            h: dims.height,
            w: dims.width,
            c,
            widths: *widths,
            time_channel: *time_channel,
            squash: *squash,
            residual: *residual,
            convs: [
                Conv::new(cin, w1, 3),
                Conv::new(w1, w2, 3),
                Conv::new(w2, w3, 3),
                Conv::new(w3 + w2, w2, 3),
                Conv::new(w2 + w1, w1, 3),
                Conv::new(w1, c, 1),
            ],
        }
    }

    pub(crate) fn num_params(&self) -> usize {
        self.convs.iter().map(Conv::num_params).sum()
    }

    fn offsets(&self) -> [usize; 7] {
        let mut o = [0; 7];
        for (k, conv) in self.convs.iter().enumerate() {
            o[k + 1] = o[k] + conv.num_params();
        }
        o
    }

    fn shapes(&self) -> [Shape; 6] {
        let [w1, w2, w3] = self.widths;
        let (h, w) = (self.h, self.w);
        [
            Shape::new(h, w, self.convs[0].cin),
            Shape::new(h / 2, w / 2, w1),
            Shape::new(h / 4, w / 4, w2),
            Shape::new(h / 2, w / 2, w3 + w2),
            Shape::new(h, w, w2 + w1),
            Shape::new(h, w, w1),
        ]
    }

    pub(crate) fn init_params(&self, rng: &mut SeededRng) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.num_params());
        for (k, conv) in self.convs.iter().enumerate() {
            let last = k == 5;
            let fan_in = (conv.k * conv.k * conv.cin) as f64;
            let std = if last && self.residual {
                0.0
            } else if last {
                0.1 / fan_in.sqrt()
            } else {
                (2.0 / fan_in).sqrt()
            };
            for _ in 0..conv.weight_len() {
                p.push(std * rng.normal());
            }
            p.extend(std::iter::repeat_n(0.0, conv.cout));
        }
        p
    }

    pub(crate) fn forward(&self, params: &[f64], x: &[f64], frac: Option<f64>) -> Result<(Vec<f64>, ConvTape)> {
        let o = self.offsets();
        let s = self.shapes();
        let p = |k: usize| &params[o[k]..o[k + 1]];
        let [w1, w2, w3] = self.widths;
        let input = if self.time_channel {
            let f = frac.unwrap_or(0.0);
            x.chunks(self.c).flat_map(|px| px.iter().copied().chain(std::iter::once(f))).collect()
        } else {
            x.to_vec()
        };

        let pre0 = self.convs[0].forward(&input, s[0], p(0));
        finite(&pre0, 0)?;
        let e1 = layers::silu(&pre0);
        let p1 = layers::avg_pool2(&e1, Shape::new(self.h, self.w, w1));
        let pre1 = self.convs[1].forward(&p1, s[1], p(1));
        finite(&pre1, 1)?;
        let e2 = layers::silu(&pre1);
        let p2 = layers::avg_pool2(&e2, Shape::new(self.h / 2, self.w / 2, w2));
        let pre2 = self.convs[2].forward(&p2, s[2], p(2));
        finite(&pre2, 2)?;
        let mid = layers::silu(&pre2);
        let up2 = layers::upsample2(&mid, Shape::new(self.h / 4, self.w / 4, w3));
        let cat2 = layers::concat(&up2, w3, &e2, w2);
        let pre3 = self.convs[3].forward(&cat2, s[3], p(3));
        finite(&pre3, 3)?;
        let d2 = layers::silu(&pre3);
        let up1 = layers::upsample2(&d2, Shape::new(self.h / 2, self.w / 2, w2));
        let cat1 = layers::concat(&up1, w2, &e1, w1);
        let pre4 = self.convs[4].forward(&cat1, s[4], p(4));
        finite(&pre4, 4)?;
        let d1 = layers::silu(&pre4);
        let mut out_pre = self.convs[5].forward(&d1, s[5], p(5));
        if self.residual {
            for (o, v) in out_pre.iter_mut().zip(x) {
                *o += v;
            }
        }
        finite(&out_pre, 5)?;
        let out: Vec<f64> = out_pre.iter().map(|&v| self.squash.apply(v)).collect();
        let tape = ConvTape {
            input,
            pre: [pre0, pre1, pre2, pre3, pre4],
            act: [e1, e2, mid, d2, d1],
            pooled: [p1, p2],
            cat: [cat2, cat1],
            out_pre,
            out: out.clone(),
        };
        Ok((out, tape))
    }

    pub(crate) fn backward(&self, params: &[f64], t: &ConvTape, grad_out: &[f64]) -> Result<Gradients> {
        let o = self.offsets();
        let s = self.shapes();
        let p = |k: usize| &params[o[k]..o[k + 1]];
        let [w1, w2, w3] = self.widths;
        let (h, w) = (self.h, self.w);
        let mut grads = vec![0.0; self.num_params()];
        let mut put = |k: usize, g: Vec<f64>| grads[o[k]..o[k + 1]].copy_from_slice(&g);

        let g_pre_out: Vec<f64> = grad_out
            .iter()
            .zip(t.out_pre.iter().zip(&t.out))
            .map(|(g, (&pre, &out))| g * self.squash.derivative(pre, out))
            .collect();

        let (g_d1, gp) = self.convs[5].backward(&t.act[4], s[5], p(5), &g_pre_out);
        finite(&g_d1, 5)?;
        put(5, gp);
        let g = layers::silu_backward(&t.pre[4], &g_d1);
        let (g_cat1, gp) = self.convs[4].backward(&t.cat[1], s[4], p(4), &g);
        finite(&g_cat1, 4)?;
        put(4, gp);
        let (g_up1, g_e1_skip) = layers::split(&g_cat1, w2, w1);
        let g_d2 = layers::upsample2_backward(&g_up1, Shape::new(h / 2, w / 2, w2));
        let g = layers::silu_backward(&t.pre[3], &g_d2);
        let (g_cat2, gp) = self.convs[3].backward(&t.cat[0], s[3], p(3), &g);
        finite(&g_cat2, 3)?;
        put(3, gp);
        let (g_up2, g_e2_skip) = layers::split(&g_cat2, w3, w2);
        let g_mid = layers::upsample2_backward(&g_up2, Shape::new(h / 4, w / 4, w3));
        let g = layers::silu_backward(&t.pre[2], &g_mid);
        let (g_p2, gp) = self.convs[2].backward(&t.pooled[1], s[2], p(2), &g);
        finite(&g_p2, 2)?;
        put(2, gp);
        let mut g_e2 = layers::avg_pool2_backward(&g_p2, Shape::new(h / 2, w / 2, w2));
        for (a, b) in g_e2.iter_mut().zip(&g_e2_skip) {
            *a += b;
        }
        let g = layers::silu_backward(&t.pre[1], &g_e2);
        let (g_p1, gp) = self.convs[1].backward(&t.pooled[0], s[1], p(1), &g);
        finite(&g_p1, 1)?;
        put(1, gp);
        let mut g_e1 = layers::avg_pool2_backward(&g_p1, Shape::new(h, w, w1));
        for (a, b) in g_e1.iter_mut().zip(&g_e1_skip) {
            *a += b;
        }
        let g = layers::silu_backward(&t.pre[0], &g_e1);
        let (g_in, gp) = self.convs[0].backward(&t.input, s[0], p(0), &g);
        finite(&g_in, 0)?;
        put(0, gp);

        let cin = self.convs[0].cin;
        let mut input: Vec<f64> = g_in.chunks(cin).flat_map(|px| px[..self.c].iter().copied()).collect();
        if self.residual {
            for (a, b) in input.iter_mut().zip(&g_pre_out) {
                *a += b;
            }
        }
        Ok(Gradients { params: grads, input })
    }
}
