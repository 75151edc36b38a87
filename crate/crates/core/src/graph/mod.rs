//! Reverse-mode differentiable computation graphs whose vertices can be
//! rewritten: backward functions swapped for differentiable approximations,
//! or dimension-preserving operators spliced out entirely.

mod bpda;
mod ops;
mod transform;

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{softmax, Tensor};

pub use bpda::{train_bpda_approximator, BpdaKind, BpdaTraining, TrainingOptions};
pub use ops::{Conv2d, Dense};
pub use transform::{apply_transform, list_bpda_candidates, list_removal_candidates, TransformPolicy};

pub type VertexId = u32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Op {
    Input,
    Dense(Dense),
    Conv2d(Conv2d),
    Relu,
    Softmax,
    Add,
    Flatten,
    Quantize { levels: u32 },
    GaussianNoise { sigma: f64 },
    ReverseSigmoid { beta: f64, gamma: f64 },
    Identity,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Dense(_) => "dense",
            Op::Conv2d(_) => "conv2d",
            Op::Relu => "relu",
            Op::Softmax => "softmax",
            Op::Add => "add",
            Op::Flatten => "flatten",
            Op::Quantize { .. } => "quantize",
            Op::GaussianNoise { .. } => "gaussian-noise",
            Op::ReverseSigmoid { .. } => "reverse-sigmoid",
            Op::Identity => "identity",
        }
    }

    /// Operators without a usable derivative. Quantization is piecewise
    /// constant, so its true gradient is zero almost everywhere.
    pub fn is_differentiable(&self) -> bool {
        !matches!(self, Op::Quantize { .. })
    }

    pub fn is_random(&self) -> bool {
        matches!(self, Op::GaussianNoise { sigma } if *sigma > 0.0)
    }
}

/// Differentiable stand-in used on the backward pass of a vertex.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Approximator {
    Identity,
    Conv1 { layer: Conv2d },
    Conv2Relu { hidden: Conv2d, output: Conv2d },
}

impl Approximator {
    pub fn kind(&self) -> BpdaKind {
        match self {
            Approximator::Identity => BpdaKind::Identity,
            Approximator::Conv1 { .. } => BpdaKind::Conv1,
            Approximator::Conv2Relu { .. } => BpdaKind::Conv2Relu,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum BackwardMode {
    #[default]
    Native,
    Bpda(Approximator),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vertex {
    pub id: VertexId,
    pub op: Op,
    pub inputs: Vec<VertexId>,
    pub in_shape: Vec<usize>,
    pub out_shape: Vec<usize>,
    #[serde(default)]
    pub backward: BackwardMode,
    /// Layers of the base network. The transformation space only ranges
    /// over operator-level vertices, so these are never candidates.
    #[serde(default)]
    pub internal: bool,
}

impl Vertex {
    /// Whether splicing the vertex out leaves every shape intact.
    pub fn is_removable(&self) -> bool {
        !matches!(self.op, Op::Input) && self.inputs.len() == 1 && self.in_shape == self.out_shape
    }
}

static GENERATION: AtomicU64 = AtomicU64::new(1);

fn next_generation() -> u64 {
    GENERATION.fetch_add(1, Ordering::Relaxed)
}

/// Vertices are stored in a fixed topological order: every vertex appears
/// after all of its inputs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Graph {
    vertices: Vec<Vertex>,
    input: VertexId,
    logits: VertexId,
    probs: VertexId,
    #[serde(skip, default = "next_generation")]
    generation: u64,
}

impl PartialEq for Graph {
    fn eq(&self, other: &Self) -> bool {
        self.vertices == other.vertices
            && self.input == other.input
            && self.logits == other.logits
            && self.probs == other.probs
    }
}

/// Cached activations of one forward evaluation, in vertex order.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    generation: u64,
    values: Vec<Tensor>,
}

impl ForwardTrace {
    pub fn value(&self, position: usize) -> &Tensor {
        &self.values[position]
    }
}

#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub logits: Tensor,
    pub probs: Tensor,
    pub trace: ForwardTrace,
}

/// Which output the loss is attached to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tap {
    Logits,
    Probs,
}

/// Parameter gradients by vertex position (dense and conv vertices only).
pub type ParamGrads = Vec<Option<(Vec<f64>, Vec<f64>)>>;

pub struct GraphBuilder {
    vertices: Vec<Vertex>,
    next_id: VertexId,
}

impl GraphBuilder {
    pub fn new(input_shape: &[usize]) -> (Self, VertexId) {
        let input = Vertex {
            id: 0,
            op: Op::Input,
            inputs: vec![],
            in_shape: input_shape.to_vec(),
            out_shape: input_shape.to_vec(),
            backward: BackwardMode::Native,
            internal: true,
        };
        (
            Self {
                vertices: vec![input],
                next_id: 1,
            },
            0,
        )
    }

    pub fn add(&mut self, op: Op, inputs: &[VertexId]) -> Result<VertexId> {
        self.push(op, inputs, false)
    }

    /// Adds a layer belonging to the base network.
    pub fn add_internal(&mut self, op: Op, inputs: &[VertexId]) -> Result<VertexId> {
        self.push(op, inputs, true)
    }

    fn push(&mut self, op: Op, inputs: &[VertexId], internal: bool) -> Result<VertexId> {
        let shapes = inputs
            .iter()
            .map(|id| {
                self.vertices
                    .iter()
                    .find(|v| v.id == *id)
                    .map(|v| v.out_shape.clone())
                    .ok_or(Error::UnknownVertex(*id))
            })
            .collect::<Result<Vec<_>>>()?;
        let out_shape = infer_shape(&op, &shapes)?;
        let id = self.next_id;
        self.next_id += 1;
        self.vertices.push(Vertex {
            id,
            in_shape: shapes.first().cloned().unwrap_or_default(),
            out_shape,
            op,
            inputs: inputs.to_vec(),
            backward: BackwardMode::Native,
            internal,
        });
        Ok(id)
    }

    pub fn build(self, logits: VertexId, probs: VertexId) -> Result<Graph> {
        Graph::from_parts(self.vertices, 0, logits, probs)
    }
}

fn infer_shape(op: &Op, inputs: &[Vec<usize>]) -> Result<Vec<usize>> {
    let arity = if matches!(op, Op::Add) { 2 } else { 1 };
    if matches!(op, Op::Input) || inputs.len() != arity {
        return Err(Error::InvalidGraph(format!(
            "{} expects {arity} input(s), got {}",
            op.name(),
            inputs.len()
        )));
    }
    let s = &inputs[0];
    let numel: usize = s.iter().product();
    match op {
        Op::Dense(d) => {
            if numel != d.inputs || d.weight.len() != d.inputs * d.outputs || d.bias.len() != d.outputs
            {
                return Err(Error::Shape {
                    expected: vec![d.inputs],
                    actual: s.clone(),
                });
            }
            Ok(vec![d.outputs])
        }
        Op::Conv2d(c) => {
            let ok = s.len() == 3
                && s[0] == c.c_in
                && c.kernel % 2 == 1
                && c.weight.len() == c.c_out * c.c_in * c.kernel * c.kernel
                && c.bias.len() == c.c_out;
            if !ok {
                return Err(Error::Shape {
                    expected: vec![c.c_in, 0, 0],
                    actual: s.clone(),
                });
            }
            Ok(vec![c.c_out, s[1], s[2]])
        }
        Op::Softmax | Op::ReverseSigmoid { .. } => {
            if s.len() != 1 {
                return Err(Error::InvalidGraph(format!("{} needs a 1-D input", op.name())));
            }
            Ok(s.clone())
        }
        Op::Add => {
            if inputs[1] != *s {
                return Err(Error::Shape {
                    expected: s.clone(),
                    actual: inputs[1].clone(),
                });
            }
            Ok(s.clone())
        }
        Op::Flatten => Ok(vec![numel]),
        Op::Quantize { levels } if *levels < 2 => {
            Err(Error::InvalidParam(format!("quantize levels must be >= 2, got {levels}")))
        }
        _ => Ok(s.clone()),
    }
}

/// Treats a tensor shape as `[channels, height, width]`; non-image shapes
/// become a single-channel row.
pub(crate) fn as_image(shape: &[usize]) -> (usize, usize, usize) {
    match shape {
        [c, h, w] => (*c, *h, *w),
        _ => (1, 1, shape.iter().product()),
    }
}

impl Graph {
    fn from_parts(
        vertices: Vec<Vertex>,
        input: VertexId,
        logits: VertexId,
        probs: VertexId,
    ) -> Result<Self> {
        let g = Self {
            vertices,
            input,
            logits,
            probs,
            generation: next_generation(),
        };
        g.validate()?;
        Ok(g)
    }

    /// Checks ordering, shapes and tap ids.
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for v in &self.vertices {
            for i in &v.inputs {
                if !seen.contains(i) {
                    return Err(Error::InvalidGraph(format!(
                        "vertex {} consumes {} which does not precede it",
                        v.id, i
                    )));
                }
            }
            if !seen.insert(v.id) {
                return Err(Error::InvalidGraph(format!("duplicate vertex id {}", v.id)));
            }
            if !matches!(v.op, Op::Input) {
                let shapes: Vec<_> = v
                    .inputs
                    .iter()
                    .map(|i| self.vertex(*i).map(|u| u.out_shape.clone()))
                    .collect::<Result<_>>()?;
                if infer_shape(&v.op, &shapes)? != v.out_shape {
                    return Err(Error::InvalidGraph(format!("vertex {} has a stale shape", v.id)));
                }
            }
        }
        match self.vertices.first() {
            Some(v) if v.id == self.input && matches!(v.op, Op::Input) => {}
            _ => return Err(Error::InvalidGraph("first vertex must be the input".into())),
        }
        let logits = &self.vertex(self.logits)?.out_shape;
        let probs = &self.vertex(self.probs)?.out_shape;
        if logits.len() != 1 || logits != probs {
            return Err(Error::InvalidGraph("logits and probs must be equal-length vectors".into()));
        }
        Ok(())
    }

    pub fn vertices(&self) -> &[Vertex] {
        &self.vertices
    }

    pub fn input_id(&self) -> VertexId {
        self.input
    }

    pub fn logits_id(&self) -> VertexId {
        self.logits
    }

    pub fn probs_id(&self) -> VertexId {
        self.probs
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.vertices[0].out_shape
    }

    pub fn num_classes(&self) -> usize {
        self.vertex(self.logits).map(|v| v.out_shape[0]).unwrap_or(0)
    }

    pub fn position(&self, id: VertexId) -> Result<usize> {
        self.vertices
            .iter()
            .position(|v| v.id == id)
            .ok_or(Error::UnknownVertex(id))
    }

    pub fn vertex(&self, id: VertexId) -> Result<&Vertex> {
        self.position(id).map(|p| &self.vertices[p])
    }

    pub(crate) fn vertex_mut(&mut self, id: VertexId) -> Result<&mut Vertex> {
        let p = self.position(id)?;
        self.generation = next_generation();
        Ok(&mut self.vertices[p])
    }

    /// True iff any vertex draws random numbers on the forward pass.
    pub fn is_randomized(&self) -> bool {
        self.vertices.iter().any(|v| v.op.is_random())
    }

    /// Inserts `op` directly after `after`, rerouting every consumer of
    /// `after` (and the logits/probs taps) through the new vertex.
    pub fn insert_after(&mut self, after: VertexId, op: Op, internal: bool) -> Result<VertexId> {
        let pos = self.position(after)?;
        let shape = self.vertices[pos].out_shape.clone();
        let out_shape = infer_shape(&op, &[shape.clone()])?;
        if out_shape != shape {
            return Err(Error::InvalidGraph(format!(
                "cannot insert {} after vertex {after}: it changes the shape",
                op.name()
            )));
        }
        let id = self.vertices.iter().map(|v| v.id).max().unwrap_or(0) + 1;
        for v in &mut self.vertices {
            for i in &mut v.inputs {
                if *i == after {
                    *i = id;
                }
            }
        }
        if self.logits == after {
            self.logits = id;
        }
        if self.probs == after {
            self.probs = id;
        }
        self.vertices.insert(
            pos + 1,
            Vertex {
                id,
                op,
                inputs: vec![after],
                in_shape: shape.clone(),
                out_shape,
                backward: BackwardMode::Native,
                internal,
            },
        );
        self.generation = next_generation();
        Ok(id)
    }

    /// Splices a removable vertex out of the graph.
    pub(crate) fn splice_out(&mut self, id: VertexId) -> Result<()> {
        let pos = self.position(id)?;
        let v = &self.vertices[pos];
        if !v.is_removable() {
            return Err(Error::NotCandidate {
                vertex: id,
                what: "removal",
            });
        }
        let source = v.inputs[0];
        self.vertices.remove(pos);
        for v in &mut self.vertices {
            for i in &mut v.inputs {
                if *i == id {
                    *i = source;
                }
            }
        }
        if self.logits == id {
            self.logits = source;
        }
        if self.probs == id {
            self.probs = source;
        }
        self.generation = next_generation();
        Ok(())
    }

    /// Evaluates the graph on `x`. Random vertices draw from `rng` only.
    pub fn forward<R: Rng + ?Sized>(&self, x: &Tensor, rng: &mut R) -> Result<ForwardPass> {
        if x.shape() != self.input_shape() {
            return Err(Error::Shape {
                expected: self.input_shape().to_vec(),
                actual: x.shape().to_vec(),
            });
        }
        let mut values: Vec<Tensor> = Vec::with_capacity(self.vertices.len());
        for v in &self.vertices {
            let arg = |k: usize| -> &Tensor {
                let p = self
                    .vertices
                    .iter()
                    .position(|u| u.id == v.inputs[k])
                    .expect("validated graph");
                &values[p]
            };
            let data = match &v.op {
                Op::Input => x.data().to_vec(),
                Op::Dense(d) => d.forward(arg(0).data()),
                Op::Conv2d(c) => {
                    let (_, h, w) = as_image(&v.in_shape);
                    c.forward(arg(0).data(), h, w)
                }
                Op::Relu => ops::relu(arg(0).data()),
                Op::Softmax => softmax(arg(0).data()),
                Op::Add => arg(0)
                    .data()
                    .iter()
                    .zip(arg(1).data())
                    .map(|(a, b)| a + b)
                    .collect(),
                Op::Flatten | Op::Identity => arg(0).data().to_vec(),
                Op::Quantize { levels } => ops::quantize(arg(0).data(), *levels),
                Op::GaussianNoise { sigma } => arg(0)
                    .data()
                    .iter()
                    .map(|&a| {
                        let n: f64 = rng.sample(StandardNormal);
                        a + sigma * n
                    })
                    .collect(),
                Op::ReverseSigmoid { beta, gamma } => {
                    ops::reverse_sigmoid(arg(0).data(), *beta, *gamma)
                }
            };
            if data.iter().any(|d| !d.is_finite()) {
                return Err(Error::NonFinite {
                    vertex: v.id,
                    op: v.op.name(),
                });
            }
            values.push(Tensor::new(v.out_shape.clone(), data)?);
        }
        let logits = values[self.position(self.logits)?].clone();
        let probs = values[self.position(self.probs)?].clone();
        Ok(ForwardPass {
            logits,
            probs,
            trace: ForwardTrace {
                generation: self.generation,
                values,
            },
        })
    }

    /// Gradient of a loss with respect to the graph input, given the loss
    /// gradient at the chosen tap.
    pub fn backward(&self, trace: &ForwardTrace, loss_grad: &Tensor, tap: Tap) -> Result<Tensor> {
        self.backward_impl(trace, loss_grad, tap, false).map(|(g, _)| g)
    }

    /// As [`Graph::backward`], also returning parameter gradients.
    pub fn backward_with_params(
        &self,
        trace: &ForwardTrace,
        loss_grad: &Tensor,
        tap: Tap,
    ) -> Result<(Tensor, ParamGrads)> {
        self.backward_impl(trace, loss_grad, tap, true)
    }

    fn backward_impl(
        &self,
        trace: &ForwardTrace,
        loss_grad: &Tensor,
        tap: Tap,
        want_params: bool,
    ) -> Result<(Tensor, ParamGrads)> {
        if trace.generation != self.generation || trace.values.len() != self.vertices.len() {
            return Err(Error::TraceMismatch);
        }
        let tap_id = match tap {
            Tap::Logits => self.logits,
            Tap::Probs => self.probs,
        };
        let tap_pos = self.position(tap_id)?;
        if loss_grad.shape() != self.vertices[tap_pos].out_shape.as_slice() {
            return Err(Error::Shape {
                expected: self.vertices[tap_pos].out_shape.clone(),
                actual: loss_grad.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.vertices.len()];
        let mut params: ParamGrads = vec![None; self.vertices.len()];
        grads[tap_pos] = Some(loss_grad.data().to_vec());
        for pos in (1..=tap_pos).rev() {
            let Some(g) = grads[pos].take() else { continue };
            let v = &self.vertices[pos];
            let input_pos: Vec<usize> = v
                .inputs
                .iter()
                .map(|i| self.position(*i))
                .collect::<Result<_>>()?;
            let x = trace.values[input_pos[0]].data();
            let out = trace.values[pos].data();
            let mut input_grads: Vec<Vec<f64>> = Vec::with_capacity(2);
            match (&v.backward, &v.op) {
                (BackwardMode::Bpda(approx), _) => {
                    input_grads.push(bpda::approximator_vjp(approx, x, &g, &v.in_shape));
                }
                (_, Op::Input) => unreachable!("input is position 0"),
                (_, Op::Dense(d)) => {
                    input_grads.push(d.grad_input(&g));
                    if want_params {
                        params[pos] = Some(d.grad_params(x, &g));
                    }
                }
                (_, Op::Conv2d(c)) => {
                    let (_, h, w) = as_image(&v.in_shape);
                    input_grads.push(c.grad_input(&g, h, w));
                    if want_params {
                        params[pos] = Some(c.grad_params(x, &g, h, w));
                    }
                }
                (_, Op::Relu) => input_grads.push(ops::relu_grad(x, &g)),
                (_, Op::Softmax) => input_grads.push(ops::softmax_grad(out, &g)),
                (_, Op::Add) => {
                    input_grads.push(g.clone());
                    input_grads.push(g);
                }
                (_, Op::Flatten | Op::Identity | Op::GaussianNoise { .. }) => input_grads.push(g),
                (_, Op::Quantize { .. }) => input_grads.push(vec![0.0; g.len()]),
                (_, Op::ReverseSigmoid { beta, gamma }) => {
                    input_grads.push(ops::reverse_sigmoid_grad(x, &g, *beta, *gamma))
                }
            }
            for (ip, ig) in input_pos.into_iter().zip(input_grads) {
                match &mut grads[ip] {
                    Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(ig),
                }
            }
        }
        let gx = grads[0]
            .take()
            .unwrap_or_else(|| vec![0.0; self.vertices[0].out_shape.iter().product()]);
        Ok((Tensor::new(self.vertices[0].out_shape.clone(), gx)?, params))
    }

    /// Every weight and bias vector, BPDA approximators included, in vertex
    /// order. Used by the model file format to move parameters into a blob.
    pub(crate) fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        self.generation = next_generation();
        let mut out = Vec::new();
        for v in &mut self.vertices {
            match &mut v.op {
                Op::Dense(d) => out.extend([&mut d.weight, &mut d.bias]),
                Op::Conv2d(c) => out.extend([&mut c.weight, &mut c.bias]),
                _ => {}
            }
            if let BackwardMode::Bpda(a) = &mut v.backward {
                match a {
                    Approximator::Identity => {}
                    Approximator::Conv1 { layer } => out.extend([&mut layer.weight, &mut layer.bias]),
                    Approximator::Conv2Relu { hidden, output } => out.extend([
                        &mut hidden.weight,
                        &mut hidden.bias,
                        &mut output.weight,
                        &mut output.bias,
                    ]),
                }
            }
        }
        out
    }

    /// Plain SGD step on every dense and conv vertex.
    pub(crate) fn sgd_step(&mut self, grads: &ParamGrads, lr: f64) {
        for (v, g) in self.vertices.iter_mut().zip(grads) {
            let Some((gw, gb)) = g else { continue };
            let (w, b) = match &mut v.op {
                Op::Dense(d) => (&mut d.weight, &mut d.bias),
                Op::Conv2d(c) => (&mut c.weight, &mut c.bias),
                _ => continue,
            };
            w.iter_mut().zip(gw).for_each(|(p, d)| *p -= lr * d);
            b.iter_mut().zip(gb).for_each(|(p, d)| *p -= lr * d);
        }
        self.generation = next_generation();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn linear(w: Vec<f64>, inputs: usize, outputs: usize) -> Graph {
        let (mut b, x) = GraphBuilder::new(&[inputs]);
        let d = b
            .add(
                Op::Dense(Dense {
                    inputs,
                    outputs,
                    weight: w,
                    bias: vec![0.0; outputs],
                }),
                &[x],
            )
            .unwrap();
        let p = b.add(Op::Softmax, &[d]).unwrap();
        b.build(d, p).unwrap()
    }

    #[test]
    fn identity_dense_passes_input_through() {
        let g = linear(vec![1.0, 0.0, 0.0, 1.0], 2, 2);
        let out = g.forward(&Tensor::vector(vec![1.0, 2.0]), &mut stream(0, &[])).unwrap();
        assert_eq!(out.logits.data(), &[1.0, 2.0]);
    }

    #[test]
    fn softmax_of_equal_logits_is_half() {
        let g = linear(vec![0.0; 4], 2, 2);
        let out = g.forward(&Tensor::vector(vec![3.0, -1.0]), &mut stream(0, &[])).unwrap();
        assert_eq!(out.probs.data(), &[0.5, 0.5]);
    }

    #[test]
    fn linear_backward_is_transpose_product() {
        let w = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let g = linear(w, 3, 2);
        let pass = g.forward(&Tensor::vector(vec![0.1, 0.2, 0.3]), &mut stream(0, &[])).unwrap();
        let gx = g
            .backward(&pass.trace, &Tensor::vector(vec![1.0, -1.0]), Tap::Logits)
            .unwrap();
        assert_eq!(gx.data(), &[1.0 - 4.0, 2.0 - 5.0, 3.0 - 6.0]);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let g = linear(vec![0.0; 4], 2, 2);
        let err = g.forward(&Tensor::vector(vec![1.0]), &mut stream(0, &[]));
        assert!(matches!(err, Err(Error::Shape { .. })));
    }

    #[test]
    fn nan_names_the_vertex() {
        let g = linear(vec![f64::NAN, 0.0, 0.0, 1.0], 2, 2);
        let err = g.forward(&Tensor::vector(vec![1.0, 1.0]), &mut stream(0, &[]));
        assert!(matches!(err, Err(Error::NonFinite { vertex: 1, op: "dense" })));
    }

    #[test]
    fn quantize_native_gradient_is_zero() {
        let (mut b, x) = GraphBuilder::new(&[3]);
        let q = b.add(Op::Quantize { levels: 8 }, &[x]).unwrap();
        let d = b
            .add(
                Op::Dense(Dense {
                    inputs: 3,
                    outputs: 2,
                    weight: vec![1.0, -2.0, 0.5, 0.3, 0.2, -0.7],
                    bias: vec![0.0, 0.1],
                }),
                &[q],
            )
            .unwrap();
        let p = b.add(Op::Softmax, &[d]).unwrap();
        let g = b.build(d, p).unwrap();
        let pass = g.forward(&Tensor::vector(vec![0.2, 0.4, 0.9]), &mut stream(0, &[])).unwrap();
        let gx = g.backward(&pass.trace, &Tensor::vector(vec![1.0, 2.0]), Tap::Probs).unwrap();
        assert!(gx.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stale_trace_is_rejected() {
        let g = linear(vec![1.0, 0.0, 0.0, 1.0], 2, 2);
        let pass = g.forward(&Tensor::vector(vec![1.0, 2.0]), &mut stream(0, &[])).unwrap();
        let mut h = g.clone();
        h.insert_after(h.input_id(), Op::Identity, false).unwrap();
        assert!(matches!(
            h.backward(&pass.trace, &Tensor::vector(vec![1.0, 0.0]), Tap::Logits),
            Err(Error::TraceMismatch)
        ));
    }
}
