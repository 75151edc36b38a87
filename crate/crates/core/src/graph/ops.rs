//! Per-operator forward kernels and vector-Jacobian products.

use serde::{Deserialize, Serialize};

/// Fully connected layer; `weight` is `outputs x inputs`, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Stride-1, same-padded 2-D convolution over `[channels, height, width]`.
/// `weight` is laid out `[c_out, c_in, kernel, kernel]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        (0..self.outputs)
            .map(|o| {
                let row = &self.weight[o * self.inputs..(o + 1) * self.inputs];
                self.bias[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect()
    }

    pub fn grad_input(&self, g: &[f64]) -> Vec<f64> {
        let mut gx = vec![0.0; self.inputs];
        for (o, &go) in g.iter().enumerate() {
            if go == 0.0 {
                continue;
            }
            let row = &self.weight[o * self.inputs..(o + 1) * self.inputs];
            for (acc, w) in gx.iter_mut().zip(row) {
                *acc += w * go;
            }
        }
        gx
    }

    pub fn grad_params(&self, x: &[f64], g: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut gw = vec![0.0; self.weight.len()];
        for (o, &go) in g.iter().enumerate() {
            for (acc, v) in gw[o * self.inputs..(o + 1) * self.inputs].iter_mut().zip(x) {
                *acc = go * v;
            }
        }
        (gw, g.to_vec())
    }
}

impl Conv2d {
    fn idx(c: usize, y: usize, x: usize, h: usize, w: usize) -> usize {
        (c * h + y) * w + x
    }

    /// Visits every (output, input) pixel pair touched by the kernel.
    fn for_each_tap(&self, h: usize, w: usize, mut f: impl FnMut(usize, usize, usize)) {
        let pad = (self.kernel / 2) as isize;
        let k = self.kernel;
        for o in 0..self.c_out {
            for i in 0..self.c_in {
                for ky in 0..k {
                    for kx in 0..k {
                        let wi = ((o * self.c_in + i) * k + ky) * k + kx;
                        for y in 0..h {
                            let sy = y as isize + ky as isize - pad;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            for x in 0..w {
                                let sx = x as isize + kx as isize - pad;
                                if sx < 0 || sx >= w as isize {
                                    continue;
                                }
                                f(
                                    Self::idx(o, y, x, h, w),
                                    Self::idx(i, sy as usize, sx as usize, h, w),
                                    wi,
                                );
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &[f64], h: usize, w: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.c_out * h * w];
        for o in 0..self.c_out {
            out[o * h * w..(o + 1) * h * w].fill(self.bias[o]);
        }
        self.for_each_tap(h, w, |oi, ii, wi| out[oi] += self.weight[wi] * x[ii]);
        out
    }

    pub fn grad_input(&self, g: &[f64], h: usize, w: usize) -> Vec<f64> {
        let mut gx = vec![0.0; self.c_in * h * w];
        self.for_each_tap(h, w, |oi, ii, wi| gx[ii] += self.weight[wi] * g[oi]);
        gx
    }

    pub fn grad_params(&self, x: &[f64], g: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
        let mut gw = vec![0.0; self.weight.len()];
        self.for_each_tap(h, w, |oi, ii, wi| gw[wi] += g[oi] * x[ii]);
        let gb = (0..self.c_out)
            .map(|o| g[o * h * w..(o + 1) * h * w].iter().sum())
            .collect();
        (gw, gb)
    }
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

pub fn relu_grad(x: &[f64], g: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(g)
        .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
        .collect()
}

/// VJP of softmax given its output `p`.
pub fn softmax_grad(p: &[f64], g: &[f64]) -> Vec<f64> {
    let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
    p.iter().zip(g).map(|(pi, gi)| pi * (gi - dot)).collect()
}

pub fn quantize(x: &[f64], levels: u32) -> Vec<f64> {
    let steps = f64::from(levels - 1);
    x.iter().map(|v| (v * steps).round() / steps).collect()
}

const RS_FLOOR: f64 = 1e-6;
const LOGIT_CLAMP: f64 = 1e-12;

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

struct ReverseSigmoidParts {
    p: Vec<f64>,
    h: Vec<f64>,
    clipped: Vec<bool>,
    sum: f64,
}

fn reverse_sigmoid_parts(z: &[f64], beta: f64, gamma: f64) -> ReverseSigmoidParts {
    let p = crate::tensor::softmax(z);
    let mut h = Vec::with_capacity(p.len());
    let mut clipped = Vec::with_capacity(p.len());
    for &pi in &p {
        let pc = pi.clamp(LOGIT_CLAMP, 1.0 - LOGIT_CLAMP);
        let logit = (pc / (1.0 - pc)).ln();
        let raw = pi - beta * (sigmoid(gamma * logit) - 0.5);
        clipped.push(!(RS_FLOOR..=1.0).contains(&raw));
        h.push(raw.clamp(RS_FLOOR, 1.0));
    }
    let sum = h.iter().sum();
    ReverseSigmoidParts { p, h, clipped, sum }
}

/// Reverse-sigmoid output perturbation applied to the class probabilities of
/// logits `z`, returned in log space so that a following softmax yields the
/// perturbed, renormalized probabilities.
pub fn reverse_sigmoid(z: &[f64], beta: f64, gamma: f64) -> Vec<f64> {
    let parts = reverse_sigmoid_parts(z, beta, gamma);
    parts.h.iter().map(|hi| (hi / parts.sum).ln()).collect()
}

pub fn reverse_sigmoid_grad(z: &[f64], g: &[f64], beta: f64, gamma: f64) -> Vec<f64> {
    let ReverseSigmoidParts { p, h, clipped, sum } = reverse_sigmoid_parts(z, beta, gamma);
    // out_i = ln h_i - ln S
    let gsum: f64 = g.iter().sum();
    let gh: Vec<f64> = h.iter().zip(g).map(|(hi, gi)| gi / hi - gsum / sum).collect();
    let gp: Vec<f64> = p
        .iter()
        .zip(&gh)
        .zip(&clipped)
        .map(|((&pi, &ghi), &clip)| {
            if clip || pi <= LOGIT_CLAMP || pi >= 1.0 - LOGIT_CLAMP {
                return if clip { 0.0 } else { ghi };
            }
            let s = sigmoid(gamma * (pi / (1.0 - pi)).ln());
            let dh = 1.0 - beta * gamma * s * (1.0 - s) / (pi * (1.0 - pi));
            ghi * dh
        })
        .collect();
    softmax_grad(&p, &gp)
}
