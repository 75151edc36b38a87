//! Learned differentiable stand-ins for non-differentiable vertices.

use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{as_image, ops, Approximator, Conv2d, Graph, VertexId};
use crate::error::{Error, Result};
use crate::rng::{purpose, stream};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BpdaKind {
    Identity,
    Conv1,
    Conv2Relu,
}

impl BpdaKind {
    pub const ALL: [BpdaKind; 3] = [BpdaKind::Identity, BpdaKind::Conv1, BpdaKind::Conv2Relu];
}

impl fmt::Display for BpdaKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BpdaKind::Identity => "identity",
            BpdaKind::Conv1 => "conv1",
            BpdaKind::Conv2Relu => "conv2relu",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingOptions {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub init_range: f64,
    pub seed: u64,
}

impl Default for TrainingOptions {
    fn default() -> Self {
        Self {
            epochs: 10,
            learning_rate: 0.01,
            batch_size: 32,
            init_range: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BpdaTraining {
    pub approximator: Approximator,
    pub initial_mse: f64,
    pub final_mse: f64,
    /// Full-dataset MSE after each epoch.
    pub curve: Vec<f64>,
}

/// Fits an approximator to the forward map of `vertex`, using the vertex's
/// actual inputs and outputs on `inputs` (graph-level samples).
///
/// Training is plain minibatch SGD on the element-wise mean squared error.
pub fn train_bpda_approximator(
    graph: &Graph,
    vertex: VertexId,
    kind: BpdaKind,
    inputs: &[Tensor],
    options: &TrainingOptions,
) -> Result<BpdaTraining> {
    if inputs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let v = graph.vertex(vertex)?;
    if !v.is_removable() {
        return Err(Error::NotCandidate {
            vertex,
            what: "BPDA",
        });
    }
    let pos = graph.position(vertex)?;
    let in_pos = graph.position(v.inputs[0])?;
    let shape = v.in_shape.clone();
    let mut rng = stream(options.seed, &[purpose::TRAINING, vertex as u64]);
    let mut pairs = Vec::with_capacity(inputs.len());
    for x in inputs {
        let pass = graph.forward(x, &mut rng)?;
        pairs.push((
            pass.trace.value(in_pos).data().to_vec(),
            pass.trace.value(pos).data().to_vec(),
        ));
    }

    let (c, h, w) = as_image(&shape);
    let mut init = |k: usize| {
        let mut conv = Conv2d {
            c_in: c,
            c_out: c,
            kernel: k,
            weight: vec![0.0; c * c * k * k],
            bias: vec![0.0; c],
        };
        for p in conv.weight.iter_mut() {
            *p = rng.random_range(-options.init_range..=options.init_range);
        }
        conv
    };
    let mut approx = match kind {
        BpdaKind::Identity => Approximator::Identity,
        BpdaKind::Conv1 => Approximator::Conv1 { layer: init(1) },
        BpdaKind::Conv2Relu => Approximator::Conv2Relu {
            hidden: init(3),
            output: init(1),
        },
    };

    let mse = |a: &Approximator| -> f64 {
        let total: f64 = pairs
            .iter()
            .map(|(x, y)| {
                let out = approximator_forward(a, x, h, w);
                out.iter().zip(y).map(|(o, t)| (o - t) * (o - t)).sum::<f64>() / y.len() as f64
            })
            .sum();
        total / pairs.len() as f64
    };
    let initial_mse = mse(&approx);
    let mut curve = Vec::with_capacity(options.epochs);
    if kind != BpdaKind::Identity {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        let batch = options.batch_size.max(1);
        for epoch in 0..options.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(batch) {
                let mut grads = ApproxGrads::zeros(&approx);
                for &i in chunk {
                    let (x, y) = &pairs[i];
                    let scale = 2.0 / (y.len() * chunk.len()) as f64;
                    accumulate_grads(&approx, x, y, h, w, scale, &mut grads);
                }
                grads.apply(&mut approx, options.learning_rate);
            }
            let e = mse(&approx);
            if !e.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            curve.push(e);
        }
    }
    let final_mse = curve.last().copied().unwrap_or(initial_mse);
    Ok(BpdaTraining {
        approximator: approx,
        initial_mse,
        final_mse,
        curve,
    })
}

pub(crate) fn approximator_forward(a: &Approximator, x: &[f64], h: usize, w: usize) -> Vec<f64> {
    match a {
        Approximator::Identity => x.to_vec(),
        Approximator::Conv1 { layer } => layer.forward(x, h, w),
        Approximator::Conv2Relu { hidden, output } => {
            output.forward(&ops::relu(&hidden.forward(x, h, w)), h, w)
        }
    }
}

/// Vector-Jacobian product of the approximator at `x`.
pub(crate) fn approximator_vjp(a: &Approximator, x: &[f64], g: &[f64], shape: &[usize]) -> Vec<f64> {
    let (_, h, w) = as_image(shape);
    match a {
        Approximator::Identity => g.to_vec(),
        Approximator::Conv1 { layer } => layer.grad_input(g, h, w),
        Approximator::Conv2Relu { hidden, output } => {
            let pre = hidden.forward(x, h, w);
            let gh = ops::relu_grad(&pre, &output.grad_input(g, h, w));
            hidden.grad_input(&gh, h, w)
        }
    }
}

struct ApproxGrads(Vec<(Vec<f64>, Vec<f64>)>);

impl ApproxGrads {
    fn zeros(a: &Approximator) -> Self {
        let z = |c: &Conv2d| (vec![0.0; c.weight.len()], vec![0.0; c.bias.len()]);
        Self(match a {
            Approximator::Identity => vec![],
            Approximator::Conv1 { layer } => vec![z(layer)],
            Approximator::Conv2Relu { hidden, output } => vec![z(hidden), z(output)],
        })
    }

    fn add(&mut self, layer: usize, (gw, gb): (Vec<f64>, Vec<f64>)) {
        let (w, b) = &mut self.0[layer];
        w.iter_mut().zip(gw).for_each(|(a, d)| *a += d);
        b.iter_mut().zip(gb).for_each(|(a, d)| *a += d);
    }

    fn apply(&self, a: &mut Approximator, lr: f64) {
        let step = |c: &mut Conv2d, (gw, gb): &(Vec<f64>, Vec<f64>)| {
            c.weight.iter_mut().zip(gw).for_each(|(p, d)| *p -= lr * d);
            c.bias.iter_mut().zip(gb).for_each(|(p, d)| *p -= lr * d);
        };
        match a {
            Approximator::Identity => {}
            Approximator::Conv1 { layer } => step(layer, &self.0[0]),
            Approximator::Conv2Relu { hidden, output } => {
                step(hidden, &self.0[0]);
                step(output, &self.0[1]);
            }
        }
    }
}

fn accumulate_grads(
    a: &Approximator,
    x: &[f64],
    y: &[f64],
    h: usize,
    w: usize,
    scale: f64,
    grads: &mut ApproxGrads,
) {
    match a {
        Approximator::Identity => {}
        Approximator::Conv1 { layer } => {
            let out = layer.forward(x, h, w);
            let g: Vec<f64> = out.iter().zip(y).map(|(o, t)| scale * (o - t)).collect();
            grads.add(0, layer.grad_params(x, &g, h, w));
        }
        Approximator::Conv2Relu { hidden, output } => {
            let pre = hidden.forward(x, h, w);
            let act = ops::relu(&pre);
            let out = output.forward(&act, h, w);
            let g: Vec<f64> = out.iter().zip(y).map(|(o, t)| scale * (o - t)).collect();
            grads.add(1, output.grad_params(&act, &g, h, w));
            let gh = ops::relu_grad(&pre, &output.grad_input(&g, h, w));
            grads.add(0, hidden.grad_params(x, &gh, h, w));
        }
    }
}
