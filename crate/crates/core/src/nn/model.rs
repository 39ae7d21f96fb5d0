use rand::Rng;

use crate::data::DatasetShard;
use crate::error::{Error, Result};
use crate::seed::{self, Stream};
use crate::tensor::Tensor;

use super::arch::{chain_shapes, ArchitectureSpec};
use super::kernels::KinkProbe;
use super::layer::{backward_kind, forward_kind, Layer, LayerKind};
use super::loss::{cross_entropy_grad, mean_nll};

/// Which layers are excluded from training.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Freezing {
    /// Layers `0..l` frozen, `l..` active.
    Ordered(usize),
    /// Arbitrary frozen set; backpropagation runs down to the lowest active layer.
    Mask(Vec<bool>),
}

/// Per-layer parameters widened to `f64`, indexed `[layer][tensor][element]`.
pub type ShadowParams = Vec<Vec<Vec<f64>>>;

#[derive(Debug, Clone, Copy)]
pub struct ShadowEval {
    pub loss: f64,
    /// Smallest distance of any ReLU input or max-pool runner-up to a kink.
    pub kink_margin: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    layers: Vec<Layer>,
    /// Per-sample input shape of each layer, then the output shape.
    shapes: Vec<Vec<usize>>,
    freezing: Freezing,
}

const EVAL_CHUNK: usize = 256;

impl Model {
    /// Kaiming-uniform weights (bound `sqrt(6 / fan_in)`), zero biases.
    pub fn build(arch: &ArchitectureSpec, seed: u64) -> Result<Self> {
        let shapes = arch.shapes()?;
        let mut rng = seed::rng(seed, Stream::Init, &[]);
        let layers = arch
            .kinds()
            .into_iter()
            .map(|kind| {
                if !kind.has_params() {
                    return Layer::parameterless(kind);
                }
                let params = kind
                    .param_shapes()
                    .into_iter()
                    .map(|shape| {
                        if shape.len() == 1 {
                            Tensor::zeros(shape)
                        } else {
                            let fan_in: usize = shape[1..].iter().product();
                            let bound = (6.0 / fan_in as f64).sqrt() as f32;
                            Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
                        }
                    })
                    .collect();
                Layer::new(kind, params).expect("shapes come from the kind")
            })
            .collect();
        Ok(Self {
            layers,
            shapes,
            freezing: Freezing::Ordered(0),
        })
    }

    /// Assembles a model from existing layers, validating that they chain.
    pub fn from_layers(input_shape: &[usize], layers: Vec<Layer>) -> Result<Self> {
        let kinds: Vec<LayerKind> = layers.iter().map(|l| l.kind().clone()).collect();
        let shapes = chain_shapes(input_shape, &kinds)?;
        Ok(Self {
            layers: layers.iter().map(Layer::detached).collect(),
            shapes,
            freezing: Freezing::Ordered(0),
        })
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer_mut(&mut self, i: usize) -> &mut Layer {
        &mut self.layers[i]
    }

    pub fn into_layers(self) -> Vec<Layer> {
        self.layers
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.shapes[0]
    }

    /// Per-sample input shape of layer `i`; `i == len()` gives the output shape.
    pub fn shape_at(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    pub fn classes(&self) -> usize {
        self.shapes[self.layers.len()].iter().product()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn freezing(&self) -> &Freezing {
        &self.freezing
    }

    /// Number of leading frozen layers.
    pub fn freeze_index(&self) -> usize {
        match &self.freezing {
            Freezing::Ordered(l) => *l,
            Freezing::Mask(m) => m.iter().take_while(|&&f| f).count(),
        }
    }

    pub fn set_freeze_index(&mut self, index: usize) -> Result<()> {
        if index >= self.layers.len() {
            return Err(Error::FreezeIndex {
                index,
                layers: self.layers.len(),
            });
        }
        self.freezing = Freezing::Ordered(index);
        self.reset_state();
        Ok(())
    }

    pub fn set_frozen_mask(&mut self, mask: Vec<bool>) -> Result<()> {
        let frozen = mask.iter().filter(|&&f| f).count();
        if mask.len() != self.layers.len() || frozen == mask.len() {
            return Err(Error::FreezeIndex {
                index: frozen,
                layers: self.layers.len(),
            });
        }
        self.freezing = Freezing::Mask(mask);
        self.reset_state();
        Ok(())
    }

    pub fn is_frozen(&self, i: usize) -> bool {
        match &self.freezing {
            Freezing::Ordered(l) => i < *l,
            Freezing::Mask(m) => m[i],
        }
    }

    /// Index of the lowest trainable layer; backpropagation ends there.
    pub fn lowest_active(&self) -> usize {
        self.freeze_index()
    }

    fn reset_state(&mut self) {
        for l in &mut self.layers {
            l.set_cache(None);
            l.clear_grads();
        }
    }

    fn check_batch(&self, batch: &Tensor) -> Result<usize> {
        let shape = batch.shape();
        if shape.len() < 2 || shape[1..] != self.shapes[0][..] {
            if shape.len() >= 2 && shape[1..].iter().product::<usize>() == self.shapes[0].iter().product::<usize>() {
                return Ok(shape[0]);
            }
            return Err(Error::shape(
                "forward",
                format!("batch shape {shape:?} does not match input {:?}", self.shapes[0]),
            ));
        }
        Ok(shape[0])
    }

    fn batched(&self, i: usize, batch: usize) -> Vec<usize> {
        let mut s = Vec::with_capacity(self.shapes[i].len() + 1);
        s.push(batch);
        s.extend_from_slice(&self.shapes[i]);
        s
    }

    /// Runs the network. In training mode every layer from the lowest active
    /// one upward keeps its input for backpropagation; frozen layers below it
    /// keep nothing.
    pub fn forward(&mut self, batch: &Tensor, training: bool) -> Result<Tensor> {
        let b = self.check_batch(batch)?;
        let start = self.lowest_active();
        let mut cur = batch.data().to_vec();
        for i in 0..self.layers.len() {
            let out = {
                let layer = &self.layers[i];
                forward_kind(layer.kind(), layer.params(), &cur, b, &self.shapes[i], None)
            };
            if out.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("forward"));
            }
            let prev = std::mem::replace(&mut cur, out);
            let cache = (training && i >= start).then(|| Tensor::from_parts(self.batched(i, b), prev));
            self.layers[i].set_cache(cache);
        }
        Ok(Tensor::from_parts(self.batched(self.layers.len(), b), cur))
    }

    /// Inference without touching cached state.
    pub fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        let b = self.check_batch(batch)?;
        let mut cur = batch.data().to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            cur = forward_kind(layer.kind(), layer.params(), &cur, b, &self.shapes[i], None);
        }
        let out = Tensor::from_parts(self.batched(self.layers.len(), b), cur);
        out.check_finite("forward")?;
        Ok(out)
    }

    /// Output of every layer for `batch`, in inference mode.
    pub fn layer_outputs(&self, batch: &Tensor) -> Result<Vec<Tensor>> {
        let b = self.check_batch(batch)?;
        let mut cur = batch.data().to_vec();
        let mut outs = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            cur = forward_kind(layer.kind(), layer.params(), &cur, b, &self.shapes[i], None);
            outs.push(Tensor::from_parts(self.batched(i + 1, b), cur.clone()));
        }
        Ok(outs)
    }

    /// Mean cross-entropy of `predictions`; fills gradients of trainable
    /// layers only. Nothing is computed below the lowest active layer.
    pub fn backward(&mut self, predictions: &Tensor, labels: &[usize]) -> Result<f32> {
        let start = self.lowest_active();
        let batch = predictions.rows();
        for i in start..self.layers.len() {
            match self.layers[i].cached_activation() {
                Some(c) if c.rows() == batch => {}
                _ => return Err(Error::MissingActivation(i)),
            }
        }
        let (loss, mut d) = cross_entropy_grad(predictions, labels)?;
        for i in (start..self.layers.len()).rev() {
            let trainable = !self.is_frozen(i);
            let g = {
                let layer = &self.layers[i];
                let x = layer.cached_activation().expect("checked above");
                backward_kind(layer.kind(), layer.params(), x.data(), batch, &self.shapes[i], &d, i > start)
            };
            if trainable && self.layers[i].kind().has_params() {
                let grads: Vec<Tensor> = g
                    .params
                    .into_iter()
                    .zip(self.layers[i].params())
                    .map(|(data, p)| Tensor::from_parts(p.shape().to_vec(), data))
                    .collect();
                if grads.iter().any(|t| !t.is_finite()) {
                    return Err(Error::NonFinite("backward"));
                }
                self.layers[i].set_grads(grads);
            }
            if let Some(dx) = g.dx {
                d = dx;
            }
        }
        Ok(loss)
    }

    /// `p -= eta * grad` on every trainable layer; clears the gradients.
    pub fn sgd_step(&mut self, eta: f32) -> Result<()> {
        let trainable: Vec<usize> = (0..self.layers.len())
            .filter(|&i| !self.is_frozen(i) && self.layers[i].kind().has_params())
            .collect();
        if trainable.iter().any(|&i| self.layers[i].grads().is_none()) {
            return Err(Error::MissingGrads);
        }
        for i in trainable {
            let layer = &mut self.layers[i];
            let grads = layer.take_grads().expect("checked above");
            for (p, g) in layer.params_mut().iter_mut().zip(&grads) {
                for (w, dw) in p.data_mut().iter_mut().zip(g.data()) {
                    *w -= eta * dw;
                }
                p.check_finite("sgd_step")?;
            }
        }
        Ok(())
    }

    /// Top-1 accuracy and mean loss in inference mode.
    pub fn evaluate(&self, shard: &DatasetShard) -> Result<(f64, f64)> {
        if shard.is_empty() {
            return Err(Error::Empty("dataset"));
        }
        let classes = self.classes();
        let mut correct = 0usize;
        let mut loss = 0.0f64;
        let idx: Vec<usize> = (0..shard.len()).collect();
        for chunk in idx.chunks(EVAL_CHUNK) {
            let (x, y) = shard.batch(chunk);
            let out = self.predict(&x)?;
            for (row, &label) in out.data().chunks(classes).zip(&y) {
                if label >= classes {
                    return Err(Error::Label { label, classes });
                }
                if argmax(row) == label {
                    correct += 1;
                }
            }
            let logits: Vec<f64> = out.data().iter().map(|&v| f64::from(v)).collect();
            loss += mean_nll(&logits, classes, &y) * chunk.len() as f64;
        }
        let n = shard.len() as f64;
        Ok((correct as f64 / n, loss / n))
    }

    pub fn flat_params(&self) -> Vec<f32> {
        self.layers
            .iter()
            .flat_map(|l| l.params().iter().flat_map(|p| p.data().iter().copied()))
            .collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f32]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::shape(
                "set_flat_params",
                format!("expected {} values, got {}", self.param_count(), flat.len()),
            ));
        }
        let mut off = 0;
        for l in &mut self.layers {
            for p in l.params_mut() {
                let n = p.len();
                p.data_mut().copy_from_slice(&flat[off..off + n]);
                off += n;
            }
        }
        self.reset_state();
        Ok(())
    }

    /// Gradients in `flat_params` order; zeros where a layer holds none.
    pub fn flat_grads(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            match l.grads() {
                Some(g) => out.extend(g.iter().flat_map(|t| t.data().iter().copied())),
                None => out.extend(std::iter::repeat_n(0.0, l.param_count())),
            }
        }
        out
    }

    pub fn shadow_params(&self) -> ShadowParams {
        self.layers
            .iter()
            .map(|l| {
                l.params()
                    .iter()
                    .map(|p| p.data().iter().map(|&v| f64::from(v)).collect())
                    .collect()
            })
            .collect()
    }

    /// Double-precision loss for substituted parameters, used as the reference
    /// side of gradient checks.
    pub fn shadow_loss(&self, params: &ShadowParams, batch: &Tensor, labels: &[usize]) -> Result<ShadowEval> {
        let b = self.check_batch(batch)?;
        let mut probe = KinkProbe::default();
        let mut cur: Vec<f64> = batch.data().iter().map(|&v| f64::from(v)).collect();
        for (i, layer) in self.layers.iter().enumerate() {
            cur = forward_kind(layer.kind(), &params[i], &cur, b, &self.shapes[i], Some(&mut probe));
        }
        let classes = self.classes();
        if labels.len() != b {
            return Err(Error::shape("shadow_loss", "label count differs from batch"));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Label { label, classes });
        }
        Ok(ShadowEval {
            loss: mean_nll(&cur, classes, labels),
            kink_margin: probe.margin,
        })
    }
}

pub(crate) fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
