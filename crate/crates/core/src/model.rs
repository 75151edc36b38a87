//! Classifiers, the toy defense zoo, the confidence detector, fixture data
//! and fixture training.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Conv2d, Dense, ForwardPass, Graph, GraphBuilder, Op, Tap};
use crate::io;
use crate::rng::{purpose, stream, Stream};
use crate::tensor::Tensor;

pub const MODEL_MAGIC: &str = "attack-search model v1";
pub const DATASET_MAGIC: &str = "attack-search dataset v1";

/// Side length of fixture images.
pub const FIXTURE_SIDE: usize = 8;
pub const FIXTURE_CLASSES: usize = 4;

/// Accepts an input iff its top class probability reaches `threshold`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detector {
    pub threshold: f64,
}

impl Detector {
    pub fn new(threshold: f64) -> Result<Self> {
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(Error::InvalidParam(format!(
                "detector threshold must lie in (0, 1), got {threshold}"
            )));
        }
        Ok(Self { threshold })
    }

    pub fn accepts(&self, probs: &Tensor) -> bool {
        probs.max() >= self.threshold
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    pub graph: Graph,
    #[serde(default)]
    pub detector: Option<Detector>,
}

impl Classifier {
    pub fn new(graph: Graph, detector: Option<Detector>) -> Self {
        Self { graph, detector }
    }

    pub fn num_classes(&self) -> usize {
        self.graph.num_classes()
    }

    pub fn input_shape(&self) -> &[usize] {
        self.graph.input_shape()
    }

    pub fn is_randomized(&self) -> bool {
        self.graph.is_randomized()
    }

    pub fn forward(&self, x: &Tensor, rng: &mut Stream) -> Result<ForwardPass> {
        self.graph.forward(x, rng)
    }

    pub fn predict(&self, x: &Tensor, rng: &mut Stream) -> Result<usize> {
        Ok(self.forward(x, rng)?.logits.argmax())
    }

    /// Detector decision g(x).
    pub fn detect(&self, x: &Tensor, rng: &mut Stream) -> Result<bool> {
        let d = self.detector.ok_or(Error::NoDetector)?;
        Ok(d.accepts(&self.forward(x, rng)?.probs))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let (header, blob) = self.to_parts();
        io::write_container(path, MODEL_MAGIC, &header, &blob)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, blob): (ModelHeader, _) = io::read_container(path, MODEL_MAGIC)?;
        Self::from_parts(header, blob).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let (header, blob) = self.to_parts();
        io::encode_container(MODEL_MAGIC, &header, &blob)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, blob): (ModelHeader, _) =
            io::decode_container(Path::new("<memory>"), MODEL_MAGIC, bytes)?;
        Self::from_parts(header, blob)
    }

    fn to_parts(&self) -> (ModelHeader, Vec<f64>) {
        let mut stripped = self.clone();
        let mut blob = Vec::new();
        let mut lengths = Vec::new();
        for p in stripped.graph.params_mut() {
            lengths.push(p.len());
            blob.extend(std::mem::take(p));
        }
        (
            ModelHeader {
                classifier: stripped,
                param_lengths: lengths,
            },
            blob,
        )
    }

    fn from_parts(header: ModelHeader, blob: Vec<f64>) -> Result<Self> {
        let mut c = header.classifier;
        let total: usize = header.param_lengths.iter().sum();
        if total != blob.len() {
            return Err(Error::InvalidGraph(format!(
                "header declares {total} parameters, blob holds {}",
                blob.len()
            )));
        }
        let mut offset = 0;
        let slots = c.graph.params_mut();
        if slots.len() != header.param_lengths.len() {
            return Err(Error::InvalidGraph("parameter table does not match graph".into()));
        }
        for (slot, len) in slots.into_iter().zip(&header.param_lengths) {
            *slot = blob[offset..offset + len].to_vec();
            offset += len;
        }
        c.graph.validate()?;
        if let Some(d) = c.detector {
            Detector::new(d.threshold)?;
        }
        Ok(c)
    }
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    classifier: Classifier,
    param_lengths: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Tensor,
    pub y: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub num_classes: usize,
    pub samples: Vec<Sample>,
}

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    name: String,
    num_classes: usize,
    shape: Vec<usize>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let shape = self.samples.first().map(|s| s.x.shape().to_vec());
        for (i, s) in self.samples.iter().enumerate() {
            if s.y >= self.num_classes {
                return Err(Error::InvalidParam(format!(
                    "sample {i} has label {} but there are {} classes",
                    s.y, self.num_classes
                )));
            }
            if Some(s.x.shape()) != shape.as_deref() {
                return Err(Error::InvalidParam(format!("sample {i} has a different shape")));
            }
            if s.x.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::InvalidParam(format!("sample {i} has pixels outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// The samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            num_classes: self.num_classes,
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    /// Splits off the first `n` samples.
    pub fn split(&self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.len());
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.len()).collect();
        (self.subset(&head), self.subset(&tail))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = DatasetHeader {
            name: self.name.clone(),
            num_classes: self.num_classes,
            shape: self.samples.first().map(|s| s.x.shape().to_vec()).unwrap_or_default(),
            labels: self.samples.iter().map(|s| s.y).collect(),
        };
        let blob: Vec<f64> = self.samples.iter().flat_map(|s| s.x.data().iter().copied()).collect();
        io::write_container(path, DATASET_MAGIC, &header, &blob)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (h, blob): (DatasetHeader, Vec<f64>) = io::read_container(path, DATASET_MAGIC)?;
        let size: usize = h.shape.iter().product();
        if size == 0 || blob.len() != size * h.labels.len() {
            return Err(Error::format(path, "blob size does not match shape and label count"));
        }
        let samples = h
            .labels
            .iter()
            .zip(blob.chunks_exact(size))
            .map(|(&y, px)| {
                Ok(Sample {
                    x: Tensor::new(h.shape.clone(), px.to_vec())?,
                    y,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let d = Dataset {
            name: h.name,
            num_classes: h.num_classes,
            samples,
        };
        d.validate().map_err(|e| Error::format(path, e.to_string()))?;
        Ok(d)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FixtureKind {
    Bars,
    Blobs,
}

/// Synthetic single-channel 8x8 images with four balanced classes.
///
/// Bars: class 0 horizontal, 1 vertical, 2 diagonal, 3 anti-diagonal, at a
/// random offset and intensity over uniform background noise. Blobs: a
/// Gaussian bump inside the quadrant named by the class.
pub fn make_fixture_dataset(kind: FixtureKind, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidParam("fixture size must be positive".into()));
    }
    let s = FIXTURE_SIDE;
    let mut rng = stream(seed, &[purpose::DATASET, kind as u64]);
    let mut labels: Vec<usize> = (0..n).map(|i| i % FIXTURE_CLASSES).collect();
    labels.shuffle(&mut rng);
    let samples = labels
        .into_iter()
        .map(|y| {
            let mut px: Vec<f64> = (0..s * s).map(|_| rng.random_range(0.0..0.15)).collect();
            match kind {
                FixtureKind::Bars => {
                    let amp = rng.random_range(0.6..1.0);
                    let off = rng.random_range(1..s - 2) as isize;
                    for a in 0..s as isize {
                        for t in 0..2isize {
                            let (r, c) = match y {
                                0 => (off + t, a),
                                1 => (a, off + t),
                                2 => (a, a + off - s as isize / 2 + t),
                                _ => (a, s as isize - 1 - a + off - s as isize / 2 + t),
                            };
                            if (0..s as isize).contains(&r) && (0..s as isize).contains(&c) {
                                px[r as usize * s + c as usize] += amp;
                            }
                        }
                    }
                }
                FixtureKind::Blobs => {
                    let h = s as f64 / 2.0;
                    let cy = rng.random_range(0.5..h - 0.5) + if y / 2 == 1 { h } else { 0.0 };
                    let cx = rng.random_range(0.5..h - 0.5) + if y % 2 == 1 { h } else { 0.0 };
                    let amp = rng.random_range(0.6..1.0);
                    for r in 0..s {
                        for c in 0..s {
                            let d2 = (r as f64 + 0.5 - cy).powi(2) + (c as f64 + 0.5 - cx).powi(2);
                            px[r * s + c] += amp * (-d2 / 3.0).exp();
                        }
                    }
                }
            }
            for p in &mut px {
                *p = p.clamp(0.0, 1.0);
            }
            Sample {
                x: Tensor::new(vec![1, s, s], px).expect("fixture shape"),
                y,
            }
        })
        .collect();
    Ok(Dataset {
        name: format!("{kind:?}-{n}-{seed}").to_lowercase(),
        num_classes: FIXTURE_CLASSES,
        samples,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Mlp,
    Cnn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            learning_rate: 0.1,
            batch_size: 16,
            seed: 0,
        }
    }
}

/// Builds an untrained fixture network with Glorot-uniform weights.
pub fn build_fixture_net(
    arch: Arch,
    input_shape: &[usize],
    num_classes: usize,
    rng: &mut Stream,
) -> Result<Graph> {
    let mut glorot = |n: usize, fan_in: usize, fan_out: usize| -> Vec<f64> {
        let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
        (0..n).map(|_| rng.random_range(-s..s)).collect()
    };
    let numel: usize = input_shape.iter().product();
    let (mut b, x) = GraphBuilder::new(input_shape);
    let logits = match arch {
        Arch::Mlp => {
            let f = b.add_internal(Op::Flatten, &[x])?;
            let h = 64;
            let d1 = b.add_internal(
                Op::Dense(Dense {
                    inputs: numel,
                    outputs: h,
                    weight: glorot(numel * h, numel, h),
                    bias: vec![0.0; h],
                }),
                &[f],
            )?;
            let r = b.add_internal(Op::Relu, &[d1])?;
            b.add_internal(
                Op::Dense(Dense {
                    inputs: h,
                    outputs: num_classes,
                    weight: glorot(h * num_classes, h, num_classes),
                    bias: vec![0.0; num_classes],
                }),
                &[r],
            )?
        }
        Arch::Cnn => {
            let (c, hh, ww) = match input_shape {
                [c, h, w] => (*c, *h, *w),
                _ => {
                    return Err(Error::InvalidParam(
                        "cnn fixture needs a [channels, height, width] input".into(),
                    ))
                }
            };
            let ch = 8;
            let conv = b.add_internal(
                Op::Conv2d(Conv2d {
                    c_in: c,
                    c_out: ch,
                    kernel: 3,
                    weight: glorot(ch * c * 9, c * 9, ch * 9),
                    bias: vec![0.0; ch],
                }),
                &[x],
            )?;
            let r = b.add_internal(Op::Relu, &[conv])?;
            let f = b.add_internal(Op::Flatten, &[r])?;
            let n = ch * hh * ww;
            b.add_internal(
                Op::Dense(Dense {
                    inputs: n,
                    outputs: num_classes,
                    weight: glorot(n * num_classes, n, num_classes),
                    bias: vec![0.0; num_classes],
                }),
                &[f],
            )?
        }
    };
    let probs = b.add_internal(Op::Softmax, &[logits])?;
    b.build(logits, probs)
}

/// Minibatch SGD on softmax cross-entropy. Deterministic for a fixed seed.
pub fn train_fixture(dataset: &Dataset, arch: Arch, config: &TrainConfig) -> Result<Classifier> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rng = stream(config.seed, &[purpose::TRAINING]);
    let mut graph = build_fixture_net(
        arch,
        dataset.samples[0].x.shape(),
        dataset.num_classes,
        &mut rng,
    )?;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let batch = config.batch_size.max(1);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let mut acc: Option<crate::graph::ParamGrads> = None;
            for &i in chunk {
                let s = &dataset.samples[i];
                let pass = graph.forward(&s.x, &mut rng)?;
                let p = pass.probs.data();
                let loss = -p[s.y].max(1e-300).ln();
                if !loss.is_finite() {
                    return Err(Error::Diverged { epoch });
                }
                let mut g = p.to_vec();
                g[s.y] -= 1.0;
                for v in &mut g {
                    *v /= chunk.len() as f64;
                }
                let (_, pg) = graph.backward_with_params(&pass.trace, &Tensor::vector(g), Tap::Logits)?;
                match &mut acc {
                    None => acc = Some(pg),
                    Some(a) => {
                        for (sum, new) in a.iter_mut().zip(pg) {
                            if let (Some((sw, sb)), Some((nw, nb))) = (sum.as_mut(), new) {
                                sw.iter_mut().zip(nw).for_each(|(x, y)| *x += y);
                                sb.iter_mut().zip(nb).for_each(|(x, y)| *x += y);
                            }
                        }
                    }
                }
            }
            if let Some(a) = acc {
                graph.sgd_step(&a, config.learning_rate);
            }
        }
    }
    Ok(Classifier::new(graph, None))
}

/// Fraction of samples classified correctly; random defenses use a stream
/// keyed by the sample index.
pub fn clean_accuracy(model: &Classifier, dataset: &Dataset, seed: u64) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut correct = 0usize;
    for (i, s) in dataset.samples.iter().enumerate() {
        let mut rng = stream(seed, &[purpose::DRAWS, i as u64]);
        if model.predict(&s.x, &mut rng)? == s.y {
            correct += 1;
        }
    }
    Ok(correct as f64 / dataset.len() as f64)
}

fn default_levels() -> u32 {
    8
}
fn default_sigma() -> f64 {
    0.05
}
fn default_beta() -> f64 {
    0.7
}
fn default_gamma() -> f64 {
    0.3
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Defense {
    Quantize {
        #[serde(default = "default_levels")]
        levels: u32,
    },
    GaussianNoise {
        #[serde(default = "default_sigma")]
        sigma: f64,
    },
    ReverseSigmoid {
        #[serde(default = "default_beta")]
        beta: f64,
        #[serde(default = "default_gamma")]
        gamma: f64,
    },
}

impl Defense {
    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Defense::Quantize { levels } => (2..=65536).contains(&levels),
            Defense::GaussianNoise { sigma } => sigma.is_finite() && sigma > 0.0,
            Defense::ReverseSigmoid { beta, gamma } => {
                beta.is_finite() && beta >= 0.0 && gamma.is_finite() && gamma > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParam(format!("defense parameters out of range: {self:?}")))
        }
    }

    fn op(&self) -> Op {
        match *self {
            Defense::Quantize { levels } => Op::Quantize { levels },
            Defense::GaussianNoise { sigma } => Op::GaussianNoise { sigma },
            Defense::ReverseSigmoid { beta, gamma } => Op::ReverseSigmoid { beta, gamma },
        }
    }
}

/// Defense configuration file contents.
///
/// ```toml
/// defenses = [
///   { kind = "quantize", levels = 8 },
///   { kind = "reverse-sigmoid", beta = 0.7, gamma = 0.3 },
/// ]
/// [detector]
/// threshold = 0.4
/// ```
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefenseConfig {
    #[serde(default)]
    pub defenses: Vec<Defense>,
    #[serde(default)]
    pub detector: Option<Detector>,
}

impl DefenseConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Inserts input defenses right after the input vertex in the given order
/// and output defenses after the logits (before the softmax).
pub fn make_defended(
    model: &Classifier,
    defenses: &[Defense],
    detector: Option<Detector>,
) -> Result<Classifier> {
    let mut graph = model.graph.clone();
    let mut cursor = graph.input_id();
    for d in defenses {
        d.validate()?;
        match d {
            Defense::ReverseSigmoid { .. } => {
                graph.insert_after(graph.logits_id(), d.op(), false)?;
            }
            _ => cursor = graph.insert_after(cursor, d.op(), false)?,
        }
    }
    if let Some(det) = detector {
        Detector::new(det.threshold)?;
    }
    Ok(Classifier::new(graph, detector.or(model.detector)))
}
