//! Dense feed-forward network with exact backpropagation and mini-batch SGD.
//!
//! A network is described by a [`ModelSpec`] and its parameters are carried
//! in two [`WeightSet`]s: the base layers followed by the personalization
//! layers. Every routine here takes both halves so the same code serves the
//! federated (base) and client-private (personal) parts of the model.

use rand::distr::{Distribution, Uniform};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::split::ModelSpec;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self {
            in_dim,
            out_dim,
            activation,
        }
    }
}

/// One dense layer: `weight` is `[out_dim × in_dim]`, `bias` is `[out_dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LayerWeights {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        let ws = weight.shape();
        if ws.len() != 2 || bias.shape() != [ws[0]] {
            return Err(Error::shape(
                0,
                format!(
                    "weight {:?} and bias {:?} do not form a dense layer",
                    weight.shape(),
                    bias.shape()
                ),
            ));
        }
        Ok(Self { weight, bias })
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: Tensor::zeros(vec![out_dim, in_dim]),
            bias: Tensor::zeros(vec![out_dim]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }
}

/// Ordered list of dense layers.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightSet {
    layers: Vec<LayerWeights>,
}

impl WeightSet {
    pub fn new(layers: Vec<LayerWeights>) -> Result<Self> {
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::shape(
                    i + 1,
                    format!(
                        "input dim {} does not match previous output dim {}",
                        pair[1].in_dim(),
                        pair[0].out_dim()
                    ),
                ));
            }
        }
        Ok(Self { layers })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    /// Glorot-uniform weights and zero biases, drawn layer by layer in
    /// row-major order.
    pub fn init<R: Rng + ?Sized>(specs: &[LayerSpec], rng: &mut R) -> Self {
        let layers = specs
            .iter()
            .map(|s| {
                let limit = (6.0 / (s.in_dim + s.out_dim) as f64).sqrt();
                let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
                let w = (0..s.in_dim * s.out_dim).map(|_| dist.sample(rng)).collect();
                LayerWeights {
                    weight: Tensor::matrix(s.out_dim, s.in_dim, w).expect("dims are positive"),
                    bias: Tensor::zeros(vec![s.out_dim]),
                }
            })
            .collect();
        Self { layers }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights::zeros(l.in_dim(), l.out_dim()))
                .collect(),
        }
    }

    pub fn layers(&self) -> &[LayerWeights] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LayerWeights] {
        &mut self.layers
    }

    pub fn into_layers(self) -> Vec<LayerWeights> {
        self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// All parameters in layer order, weight then bias per layer.
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weight.data().iter().chain(l.bias.data()).copied())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.layers.iter_mut().flat_map(|l| {
            let LayerWeights { weight, bias } = l;
            weight.data_mut().iter_mut().chain(bias.data_mut().iter_mut())
        })
    }

    /// Same layer count and per-layer shapes.
    pub fn same_shape(&self, other: &WeightSet) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.weight.shape() == b.weight.shape() && a.bias.shape() == b.bias.shape()
            })
    }

    /// Hex SHA-256 over the little-endian bytes of every parameter.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for l in &self.layers {
            for d in l.weight.shape() {
                hasher.update((*d as u64).to_le_bytes());
            }
        }
        for v in self.values() {
            hasher.update(v.to_le_bytes());
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    fn sub_scaled(&mut self, scale: f64, grad: &WeightSet) {
        for (l, g) in self.layers.iter_mut().zip(&grad.layers) {
            l.weight.sub_scaled(scale, &g.weight);
            l.bias.sub_scaled(scale, &g.bias);
        }
    }

    fn scale(&mut self, factor: f64) {
        for v in self.values_mut() {
            *v *= factor;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: usize,
}

impl Sample {
    pub fn new(x: Vec<f64>, y: usize) -> Self {
        Self { x, y }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub eta: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("learning rate must be finite and non-negative, got {}", self.eta)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// The stacked layers of one client's model, base first.
struct Net<'a> {
    layers: Vec<(&'a LayerWeights, Activation)>,
}

impl<'a> Net<'a> {
    fn assemble(spec: &ModelSpec, base: &'a WeightSet, personal: &'a WeightSet) -> Result<Self> {
        if base.len() != spec.k_base() || personal.len() != spec.k_personal {
            return Err(Error::shape(
                base.len().min(spec.k_base()),
                format!(
                    "expected {} base and {} personal layers, got {} and {}",
                    spec.k_base(),
                    spec.k_personal,
                    base.len(),
                    personal.len()
                ),
            ));
        }
        let layers: Vec<_> = base.layers.iter().chain(&personal.layers).collect();
        for (i, (w, s)) in layers.iter().zip(&spec.layers).enumerate() {
            if w.in_dim() != s.in_dim || w.out_dim() != s.out_dim {
                return Err(Error::shape(
                    i,
                    format!(
                        "weights are {}→{}, spec says {}→{}",
                        w.in_dim(),
                        w.out_dim(),
                        s.in_dim,
                        s.out_dim
                    ),
                ));
            }
        }
        Ok(Self {
            layers: layers
                .into_iter()
                .zip(&spec.layers)
                .map(|(w, s)| (w, s.activation))
                .collect(),
        })
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        let want = self.layers[0].0.in_dim();
        if x.len() != want {
            return Err(Error::shape(
                0,
                format!("input has {} features, layer expects {want}", x.len()),
            ));
        }
        Ok(())
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut a = x.to_vec();
        for (w, act) in &self.layers {
            a = affine(w, &a).into_iter().map(|z| act.apply(z)).collect();
        }
        a
    }

    /// Adds the gradient of this sample's loss into `grads` and returns the loss.
    fn accumulate(&self, sample: &Sample, grads: &mut [LayerWeights]) -> f64 {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut a = sample.x.clone();
        for (w, act) in &self.layers {
            let z = affine(w, &a);
            let next = z.iter().map(|&v| act.apply(v)).collect();
            inputs.push(std::mem::replace(&mut a, next));
            pre.push(z);
        }

        let (loss, probs) = softmax_cross_entropy(&a, sample.y);
        let mut upstream = probs;
        upstream[sample.y] -= 1.0;

        for (i, (w, act)) in self.layers.iter().enumerate().rev() {
            let delta: Vec<f64> = upstream
                .iter()
                .zip(&pre[i])
                .map(|(g, &z)| g * act.derivative(z))
                .collect();
            let input = &inputs[i];
            let in_dim = w.in_dim();
            let g = &mut grads[i];
            let gw = g.weight.data_mut();
            for (r, d) in delta.iter().enumerate() {
                let row = &mut gw[r * in_dim..(r + 1) * in_dim];
                for (gv, xv) in row.iter_mut().zip(input) {
                    *gv += d * xv;
                }
            }
            for (gb, d) in g.bias.data_mut().iter_mut().zip(&delta) {
                *gb += d;
            }
            if i > 0 {
                let wd = w.weight.data();
                let mut down = vec![0.0; in_dim];
                for (r, d) in delta.iter().enumerate() {
                    for (dv, wv) in down.iter_mut().zip(&wd[r * in_dim..(r + 1) * in_dim]) {
                        *dv += d * wv;
                    }
                }
                upstream = down;
            }
        }
        loss
    }
}

fn affine(layer: &LayerWeights, x: &[f64]) -> Vec<f64> {
    let in_dim = layer.in_dim();
    layer
        .weight
        .data()
        .chunks_exact(in_dim)
        .zip(layer.bias.data())
        .map(|(row, b)| row.iter().zip(x).fold(*b, |acc, (w, v)| acc + w * v))
        .collect()
}

/// Returns `(−log softmax(logits)[label], softmax(logits))`.
pub(crate) fn softmax_cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() - (logits[label] - max);
    (loss, exps.into_iter().map(|e| e / sum).collect())
}

/// Logits `f(x; base, personal)`: base layers, then personalization layers.
pub fn forward(spec: &ModelSpec, base: &WeightSet, personal: &WeightSet, x: &[f64]) -> Result<Vec<f64>> {
    let net = Net::assemble(spec, base, personal)?;
    net.check_input(x)?;
    Ok(net.forward(x))
}

/// Mean softmax cross-entropy over `batch` and its exact gradient with
/// respect to both weight sets.
pub fn loss_and_grad(
    spec: &ModelSpec,
    base: &WeightSet,
    personal: &WeightSet,
    batch: &[Sample],
) -> Result<(f64, WeightSet, WeightSet)> {
    let net = Net::assemble(spec, base, personal)?;
    let batch: Vec<&Sample> = batch.iter().collect();
    batch_grad(&net, spec, &batch).map(|(loss, mut grads)| {
        let personal_grads = grads.split_off(spec.k_base());
        (
            loss,
            WeightSet { layers: grads },
            WeightSet {
                layers: personal_grads,
            },
        )
    })
}

fn batch_grad(net: &Net<'_>, spec: &ModelSpec, batch: &[&Sample]) -> Result<(f64, Vec<LayerWeights>)> {
    if batch.is_empty() {
        return Err(Error::Usage("loss over an empty batch".into()));
    }
    let num_classes = spec.num_classes();
    let mut grads: Vec<LayerWeights> = net
        .layers
        .iter()
        .map(|(w, _)| LayerWeights::zeros(w.in_dim(), w.out_dim()))
        .collect();
    let mut total = 0.0;
    for s in batch {
        net.check_input(&s.x)?;
        if s.y >= num_classes {
            return Err(Error::Usage(format!(
                "label {} out of range for {num_classes} classes",
                s.y
            )));
        }
        total += net.accumulate(s, &mut grads);
    }
    let n = batch.len() as f64;
    let mut set = WeightSet { layers: grads };
    set.scale(1.0 / n);
    Ok((total / n, set.layers))
}

/// Which halves of the model an SGD pass may update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainable {
    All,
    PersonalOnly,
}

/// Mini-batch SGD over `dataset` for `cfg.epochs` epochs, starting from
/// `(base, personal)`. Each epoch draws a fresh permutation from `rng` and
/// the trailing partial batch is kept.
pub fn sgd<R: Rng + ?Sized>(
    spec: &ModelSpec,
    base: &WeightSet,
    personal: &WeightSet,
    dataset: &[Sample],
    cfg: &SgdConfig,
    rng: &mut R,
) -> Result<(WeightSet, WeightSet)> {
    sgd_masked(spec, base, personal, dataset, cfg, Trainable::All, rng)
}

pub fn sgd_masked<R: Rng + ?Sized>(
    spec: &ModelSpec,
    base: &WeightSet,
    personal: &WeightSet,
    dataset: &[Sample],
    cfg: &SgdConfig,
    trainable: Trainable,
    rng: &mut R,
) -> Result<(WeightSet, WeightSet)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Net::assemble(spec, base, personal)?;

    let mut base = base.clone();
    let mut personal = personal.clone();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &dataset[i]).collect();
            let (_, mut grads) = {
                let net = Net::assemble(spec, &base, &personal)?;
                batch_grad(&net, spec, &batch)?
            };
            let personal_grads = WeightSet {
                layers: grads.split_off(spec.k_base()),
            };
            if trainable == Trainable::All {
                base.sub_scaled(cfg.eta, &WeightSet { layers: grads });
            }
            personal.sub_scaled(cfg.eta, &personal_grads);
        }
    }
    Ok((base, personal))
}
