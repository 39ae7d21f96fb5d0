use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::kernels::{self, ConvGeom, KinkProbe, Real};

/// Structural description of one freezable unit.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Dense { inputs: usize, outputs: usize },
    Conv2d(ConvGeom),
    Relu,
    MaxPool2d { size: usize },
    Flatten,
    Residual(ResidualBlock),
}

/// `relu(body(x) + shortcut(x))`, where the shortcut is the identity or a
/// 1x1 projection convolution. Frozen and trained as a single unit.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock {
    /// Conv2d and Relu kinds only.
    pub body: Vec<LayerKind>,
    pub projection: Option<ConvGeom>,
}

impl ResidualBlock {
    /// The standard basic block: 3x3 conv (strided), ReLU, 3x3 conv.
    pub fn basic(in_channels: usize, out_channels: usize, stride: usize) -> Self {
        let conv = |i, o, s| {
            LayerKind::Conv2d(ConvGeom {
                in_channels: i,
                out_channels: o,
                kernel: 3,
                stride: s,
                padding: 1,
            })
        };
        let projection = (stride != 1 || in_channels != out_channels).then_some(ConvGeom {
            in_channels,
            out_channels,
            kernel: 1,
            stride,
            padding: 0,
        });
        Self {
            body: vec![conv(in_channels, out_channels, stride), LayerKind::Relu, conv(out_channels, out_channels, 1)],
            projection,
        }
    }
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Dense { .. } => "dense",
            LayerKind::Conv2d(_) => "conv2d",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool2d { .. } => "maxpool2d",
            LayerKind::Flatten => "flatten",
            LayerKind::Residual(_) => "residual",
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, LayerKind::Dense { .. } | LayerKind::Conv2d(_) | LayerKind::Residual(_))
    }

    /// Shapes of the parameter tensors in storage order (weight then bias;
    /// residual blocks list body convolutions first, then the projection).
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match self {
            LayerKind::Dense { inputs, outputs } => vec![vec![*outputs, *inputs], vec![*outputs]],
            LayerKind::Conv2d(g) => conv_param_shapes(g),
            LayerKind::Residual(b) => {
                let mut shapes = Vec::new();
                for k in &b.body {
                    if let LayerKind::Conv2d(g) = k {
                        shapes.extend(conv_param_shapes(g));
                    }
                }
                if let Some(g) = &b.projection {
                    shapes.extend(conv_param_shapes(g));
                }
                shapes
            }
            _ => Vec::new(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|s| s.iter().product::<usize>()).sum()
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> std::result::Result<Vec<usize>, String> {
        let numel: usize = input.iter().product();
        match self {
            LayerKind::Dense { inputs, outputs } => {
                if numel != *inputs {
                    return Err(format!("dense expects {inputs} inputs, got shape {input:?}"));
                }
                Ok(vec![*outputs])
            }
            LayerKind::Conv2d(g) => {
                let [c, h, w] = chw(input, "conv2d")?;
                if c != g.in_channels {
                    return Err(format!("conv2d expects {} channels, got {c}", g.in_channels));
                }
                let (ho, wo) = g
                    .out_hw(h, w)
                    .ok_or_else(|| format!("conv2d kernel {} does not fit {h}x{w}", g.kernel))?;
                Ok(vec![g.out_channels, ho, wo])
            }
            LayerKind::Relu => Ok(input.to_vec()),
            LayerKind::MaxPool2d { size } => {
                let [c, h, w] = chw(input, "maxpool2d")?;
                if *size == 0 || h < *size || w < *size {
                    return Err(format!("maxpool window {size} does not fit {h}x{w}"));
                }
                Ok(vec![c, h / size, w / size])
            }
            LayerKind::Flatten => Ok(vec![numel]),
            LayerKind::Residual(b) => {
                let mut shape = input.to_vec();
                for k in &b.body {
                    if !matches!(k, LayerKind::Conv2d(_) | LayerKind::Relu) {
                        return Err(format!("residual body may not contain {}", k.name()));
                    }
                    shape = k.output_shape(&shape)?;
                }
                let short = match &b.projection {
                    Some(g) => LayerKind::Conv2d(*g).output_shape(input)?,
                    None => input.to_vec(),
                };
                if short != shape {
                    return Err(format!("residual shortcut yields {short:?} but body yields {shape:?}"));
                }
                Ok(shape)
            }
        }
    }

    /// Multiply-accumulate operations per sample.
    pub fn macs(&self, input: &[usize]) -> u64 {
        match self {
            LayerKind::Dense { inputs, outputs } => (*inputs * *outputs) as u64,
            LayerKind::Conv2d(g) => {
                let out = self.output_shape(input).unwrap_or_default();
                let spatial: usize = out.iter().skip(1).product();
                (g.out_channels * spatial * g.fan_in()) as u64
            }
            LayerKind::Residual(b) => {
                let mut shape = input.to_vec();
                let mut total = 0;
                for k in &b.body {
                    total += k.macs(&shape);
                    shape = k.output_shape(&shape).unwrap_or_default();
                }
                if let Some(g) = &b.projection {
                    total += LayerKind::Conv2d(*g).macs(input);
                }
                total
            }
            _ => 0,
        }
    }

    /// Elements a training pass keeps alive per sample for this unit: its
    /// output, and for residual blocks every internal output as well.
    pub fn activation_elems(&self, input: &[usize]) -> u64 {
        let out = || self.output_shape(input).unwrap_or_default().iter().product::<usize>() as u64;
        match self {
            LayerKind::Flatten => 0,
            LayerKind::Residual(b) => {
                let mut shape = input.to_vec();
                let mut total = 0;
                for k in &b.body {
                    shape = k.output_shape(&shape).unwrap_or_default();
                    total += shape.iter().product::<usize>() as u64;
                }
                if let Some(g) = &b.projection {
                    let s = LayerKind::Conv2d(*g).output_shape(input).unwrap_or_default();
                    total += s.iter().product::<usize>() as u64;
                }
                total + out()
            }
            _ => out(),
        }
    }
}

fn conv_param_shapes(g: &ConvGeom) -> Vec<Vec<usize>> {
    vec![vec![g.out_channels, g.in_channels, g.kernel, g.kernel], vec![g.out_channels]]
}

fn chw(shape: &[usize], op: &str) -> std::result::Result<[usize; 3], String> {
    match shape {
        [c, h, w] => Ok([*c, *h, *w]),
        _ => Err(format!("{op} expects a [channels, height, width] input, got {shape:?}")),
    }
}

/// One freezable unit with its parameters and training state.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    kind: LayerKind,
    params: Vec<Tensor>,
    grads: Option<Vec<Tensor>>,
    cached_activation: Option<Tensor>,
}

impl Layer {
    pub fn new(kind: LayerKind, params: Vec<Tensor>) -> Result<Self> {
        let shapes = kind.param_shapes();
        if shapes.len() != params.len() || shapes.iter().zip(&params).any(|(s, p)| s.as_slice() != p.shape()) {
            return Err(Error::shape(
                "layer",
                format!(
                    "{} expects parameter shapes {shapes:?}, got {:?}",
                    kind.name(),
                    params.iter().map(|p| p.shape().to_vec()).collect::<Vec<_>>()
                ),
            ));
        }
        Ok(Self {
            kind,
            params,
            grads: None,
            cached_activation: None,
        })
    }

    pub fn parameterless(kind: LayerKind) -> Self {
        debug_assert!(!kind.has_params());
        Self {
            kind,
            params: Vec::new(),
            grads: None,
            cached_activation: None,
        }
    }

    pub fn kind(&self) -> &LayerKind {
        &self.kind
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn grads(&self) -> Option<&[Tensor]> {
        self.grads.as_deref()
    }

    pub fn cached_activation(&self) -> Option<&Tensor> {
        self.cached_activation.as_ref()
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Parameter bytes as transmitted (32-bit floats).
    pub fn bytes(&self) -> u64 {
        self.param_count() as u64 * 4
    }

    /// A copy without gradients or cached activations, as sent over the wire.
    pub fn detached(&self) -> Layer {
        Layer {
            kind: self.kind.clone(),
            params: self.params.clone(),
            grads: None,
            cached_activation: None,
        }
    }

    pub(crate) fn set_cache(&mut self, t: Option<Tensor>) {
        self.cached_activation = t;
    }

    pub(crate) fn take_grads(&mut self) -> Option<Vec<Tensor>> {
        self.grads.take()
    }

    pub(crate) fn set_grads(&mut self, g: Vec<Tensor>) {
        self.grads = Some(g);
    }

    pub(crate) fn clear_grads(&mut self) {
        self.grads = None;
    }
}

/// Forward pass of one unit, generic over precision. `x` holds `batch` samples
/// of per-sample shape `in_shape`.
pub(crate) fn forward_kind<T: Real, P: AsRef<[T]>>(
    kind: &LayerKind,
    params: &[P],
    x: &[T],
    batch: usize,
    in_shape: &[usize],
    probe: Option<&mut KinkProbe>,
) -> Vec<T> {
    match kind {
        LayerKind::Dense { inputs, outputs } => {
            kernels::dense(x, batch, params[0].as_ref(), params[1].as_ref(), *inputs, *outputs)
        }
        LayerKind::Conv2d(g) => kernels::conv2d(
            x,
            batch,
            in_shape[1],
            in_shape[2],
            params[0].as_ref(),
            params[1].as_ref(),
            g,
        ),
        LayerKind::Relu => kernels::relu(x, probe),
        LayerKind::MaxPool2d { size } => {
            kernels::maxpool(x, batch, in_shape[0], in_shape[1], in_shape[2], *size, probe)
        }
        LayerKind::Flatten => x.to_vec(),
        LayerKind::Residual(b) => residual_forward(b, params, x, batch, in_shape, probe, None),
    }
}

struct ResidualTrace<T> {
    /// Input of every body sub-layer.
    inputs: Vec<Vec<T>>,
    shapes: Vec<Vec<usize>>,
    /// Pre-activation sum of body and shortcut.
    sum: Vec<T>,
}

fn residual_forward<T: Real, P: AsRef<[T]>>(
    b: &ResidualBlock,
    params: &[P],
    x: &[T],
    batch: usize,
    in_shape: &[usize],
    mut probe: Option<&mut KinkProbe>,
    mut trace: Option<&mut ResidualTrace<T>>,
) -> Vec<T> {
    let mut cur = x.to_vec();
    let mut shape = in_shape.to_vec();
    let mut pi = 0;
    for k in &b.body {
        let n = if k.has_params() { 2 } else { 0 };
        let next = forward_kind(k, &params[pi..pi + n], &cur, batch, &shape, probe.as_deref_mut());
        pi += n;
        let next_shape = k.output_shape(&shape).expect("validated");
        if let Some(t) = trace.as_deref_mut() {
            t.inputs.push(std::mem::replace(&mut cur, next));
            t.shapes.push(std::mem::replace(&mut shape, next_shape));
        } else {
            cur = next;
            shape = next_shape;
        }
    }
    let short = match &b.projection {
        Some(g) => kernels::conv2d(x, batch, in_shape[1], in_shape[2], params[pi].as_ref(), params[pi + 1].as_ref(), g),
        None => x.to_vec(),
    };
    for (c, s) in cur.iter_mut().zip(&short) {
        *c += *s;
    }
    let out = kernels::relu(&cur, probe);
    if let Some(t) = trace {
        t.sum = cur;
    }
    out
}

pub(crate) struct UnitGrads {
    pub dx: Option<Vec<f32>>,
    pub params: Vec<Vec<f32>>,
}

/// Backward pass of one unit given its cached input `x` and output gradient `dy`.
pub(crate) fn backward_kind(
    kind: &LayerKind,
    params: &[Tensor],
    x: &[f32],
    batch: usize,
    in_shape: &[usize],
    dy: &[f32],
    want_dx: bool,
) -> UnitGrads {
    match kind {
        LayerKind::Dense { inputs, outputs } => {
            let g = kernels::dense_backward(x, dy, batch, params[0].data(), *inputs, *outputs, want_dx);
            UnitGrads {
                dx: g.dx,
                params: vec![g.dw, g.db],
            }
        }
        LayerKind::Conv2d(geom) => {
            let g = kernels::conv2d_backward(x, dy, batch, in_shape[1], in_shape[2], params[0].data(), geom, want_dx);
            UnitGrads {
                dx: g.dx,
                params: vec![g.dw, g.db],
            }
        }
        LayerKind::Relu => UnitGrads {
            dx: want_dx.then(|| kernels::relu_backward(x, dy)),
            params: Vec::new(),
        },
        LayerKind::MaxPool2d { size } => UnitGrads {
            dx: want_dx.then(|| kernels::maxpool_backward(x, dy, batch, in_shape[0], in_shape[1], in_shape[2], *size)),
            params: Vec::new(),
        },
        LayerKind::Flatten => UnitGrads {
            dx: want_dx.then(|| dy.to_vec()),
            params: Vec::new(),
        },
        LayerKind::Residual(b) => residual_backward(b, params, x, batch, in_shape, dy, want_dx),
    }
}

fn residual_backward(
    b: &ResidualBlock,
    params: &[Tensor],
    x: &[f32],
    batch: usize,
    in_shape: &[usize],
    dy: &[f32],
    want_dx: bool,
) -> UnitGrads {
    let mut trace = ResidualTrace {
        inputs: Vec::new(),
        shapes: Vec::new(),
        sum: Vec::new(),
    };
    residual_forward(b, params, x, batch, in_shape, None, Some(&mut trace));
    let dsum = kernels::relu_backward(&trace.sum, dy);

    let mut offsets = Vec::with_capacity(b.body.len());
    let mut pi = 0;
    for k in &b.body {
        offsets.push(pi);
        if k.has_params() {
            pi += 2;
        }
    }
    let mut grads: Vec<Vec<f32>> = vec![Vec::new(); params.len()];
    let mut d = dsum.clone();
    for (j, k) in b.body.iter().enumerate().rev() {
        let need_dx = j > 0 || want_dx;
        let n = if k.has_params() { 2 } else { 0 };
        let g = backward_kind(
            k,
            &params[offsets[j]..offsets[j] + n],
            &trace.inputs[j],
            batch,
            &trace.shapes[j],
            &d,
            need_dx,
        );
        for (slot, pg) in g.params.into_iter().enumerate() {
            grads[offsets[j] + slot] = pg;
        }
        match g.dx {
            Some(dx) => d = dx,
            None => d.clear(),
        }
    }
    match &b.projection {
        Some(geom) => {
            let g = kernels::conv2d_backward(x, &dsum, batch, in_shape[1], in_shape[2], params[pi].data(), geom, want_dx);
            grads[pi] = g.dw;
            grads[pi + 1] = g.db;
            if let Some(dxp) = g.dx {
                for (a, b) in d.iter_mut().zip(dxp) {
                    *a += b;
                }
            }
        }
        None => {
            if want_dx {
                for (a, b) in d.iter_mut().zip(&dsum) {
                    *a += *b;
                }
            }
        }
    }
    UnitGrads {
        dx: want_dx.then_some(d),
        params: grads,
    }
}
