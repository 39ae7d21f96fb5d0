use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::kernels::ConvGeom;
use super::layer::{LayerKind, ResidualBlock};

fn one() -> usize {
    1
}

/// One entry of an architecture description, as written in config files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    Relu,
    #[serde(rename = "maxpool2d")]
    MaxPool2d {
        size: usize,
    },
    Flatten,
    /// Basic residual block; a 1x1 projection shortcut is added when the
    /// stride or channel count changes.
    Residual {
        in_channels: usize,
        out_channels: usize,
        #[serde(default = "one")]
        stride: usize,
    },
}

impl LayerSpec {
    pub fn kind(&self) -> LayerKind {
        match *self {
            LayerSpec::Dense { inputs, outputs } => LayerKind::Dense { inputs, outputs },
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => LayerKind::Conv2d(ConvGeom {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            }),
            LayerSpec::Relu => LayerKind::Relu,
            LayerSpec::MaxPool2d { size } => LayerKind::MaxPool2d { size },
            LayerSpec::Flatten => LayerKind::Flatten,
            LayerSpec::Residual {
                in_channels,
                out_channels,
                stride,
            } => LayerKind::Residual(ResidualBlock::basic(in_channels, out_channels, stride)),
        }
    }
}

/// Ordered layer list plus the per-sample input shape.
///
/// Dense layers accept any input whose element count matches `inputs`, so a
/// `flatten` layer is optional in front of a classifier head.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureSpec {
    #[serde(default)]
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl ArchitectureSpec {
    /// Infers the input shape from a leading dense layer.
    pub fn new(layers: Vec<LayerSpec>) -> Self {
        let input_shape = match layers.first() {
            Some(LayerSpec::Dense { inputs, .. }) => vec![*inputs],
            _ => Vec::new(),
        };
        Self { input_shape, layers }
    }

    pub fn with_input(input_shape: Vec<usize>, layers: Vec<LayerSpec>) -> Self {
        Self { input_shape, layers }
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn resolved_input_shape(&self) -> Result<Vec<usize>> {
        if !self.input_shape.is_empty() {
            return Ok(self.input_shape.clone());
        }
        match self.layers.first() {
            Some(LayerSpec::Dense { inputs, .. }) => Ok(vec![*inputs]),
            Some(_) => Err(Error::Architecture(
                "input_shape is required unless the first layer is dense".into(),
            )),
            None => Err(Error::Architecture("no layers".into())),
        }
    }

    pub fn kinds(&self) -> Vec<LayerKind> {
        self.layers.iter().map(LayerSpec::kind).collect()
    }

    /// Per-sample input shape of every layer followed by the output shape.
    /// Fails with the 1-based pair of layers that do not chain (0 is the input).
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        let input = self.resolved_input_shape()?;
        chain_shapes(&input, &self.kinds())
    }

    pub fn classes(&self) -> Result<usize> {
        Ok(self.shapes()?.last().map(|s| s.iter().product()).unwrap_or(0))
    }

    /// `features -> hidden... -> classes` with ReLU between dense layers.
    pub fn mlp(features: usize, hidden: &[usize], classes: usize) -> Self {
        let mut layers = Vec::new();
        let mut prev = features;
        for &h in hidden {
            layers.push(LayerSpec::Dense { inputs: prev, outputs: h });
            layers.push(LayerSpec::Relu);
            prev = h;
        }
        layers.push(LayerSpec::Dense {
            inputs: prev,
            outputs: classes,
        });
        Self::new(layers)
    }

    /// Two conv blocks and one dense classifier.
    pub fn small_cnn(input: [usize; 3], classes: usize) -> Self {
        let [c, h, w] = input;
        let layers = vec![
            conv(c, 8, 5, 1, 2),
            LayerSpec::Relu,
            LayerSpec::MaxPool2d { size: 2 },
            conv(8, 16, 5, 1, 2),
            LayerSpec::Relu,
            LayerSpec::MaxPool2d { size: 2 },
            LayerSpec::Flatten,
            LayerSpec::Dense {
                inputs: 16 * (h / 4) * (w / 4),
                outputs: classes,
            },
        ];
        Self::with_input(input.to_vec(), layers)
    }

    /// Five conv layers and two dense layers, for 32x32 inputs.
    pub fn alexnet_like(channels: usize, classes: usize) -> Self {
        let layers = vec![
            conv(channels, 16, 3, 1, 1),
            LayerSpec::Relu,
            LayerSpec::MaxPool2d { size: 2 },
            conv(16, 32, 3, 1, 1),
            LayerSpec::Relu,
            LayerSpec::MaxPool2d { size: 2 },
            conv(32, 48, 3, 1, 1),
            LayerSpec::Relu,
            conv(48, 48, 3, 1, 1),
            LayerSpec::Relu,
            conv(48, 32, 3, 1, 1),
            LayerSpec::Relu,
            LayerSpec::MaxPool2d { size: 2 },
            LayerSpec::Flatten,
            LayerSpec::Dense {
                inputs: 32 * 4 * 4,
                outputs: 128,
            },
            LayerSpec::Relu,
            LayerSpec::Dense {
                inputs: 128,
                outputs: classes,
            },
        ];
        Self::with_input(vec![channels, 32, 32], layers)
    }

    /// CIFAR-style residual network with `blocks_per_stage` basic blocks in each
    /// of three stages (3 gives the 20-layer variant, 7 the 44-layer one). The
    /// head is a global max pool feeding a dense classifier.
    pub fn resnet_like(blocks_per_stage: usize, classes: usize) -> Self {
        let mut layers = vec![conv(3, 16, 3, 1, 1), LayerSpec::Relu];
        let mut prev = 16;
        for (stage, width) in [16usize, 32, 64].into_iter().enumerate() {
            for b in 0..blocks_per_stage {
                let stride = if stage > 0 && b == 0 { 2 } else { 1 };
                layers.push(LayerSpec::Residual {
                    in_channels: prev,
                    out_channels: width,
                    stride,
                });
                prev = width;
            }
        }
        layers.push(LayerSpec::MaxPool2d { size: 8 });
        layers.push(LayerSpec::Dense {
            inputs: prev,
            outputs: classes,
        });
        Self::with_input(vec![3, 32, 32], layers)
    }

    pub fn resnet20_like(classes: usize) -> Self {
        Self::resnet_like(3, classes)
    }
}

fn conv(i: usize, o: usize, k: usize, s: usize, p: usize) -> LayerSpec {
    LayerSpec::Conv2d {
        in_channels: i,
        out_channels: o,
        kernel: k,
        stride: s,
        padding: p,
    }
}

pub(crate) fn chain_shapes(input: &[usize], kinds: &[LayerKind]) -> Result<Vec<Vec<usize>>> {
    if kinds.is_empty() {
        return Err(Error::Architecture("no layers".into()));
    }
    if input.is_empty() || input.iter().any(|&d| d == 0) {
        return Err(Error::Architecture(format!("invalid input shape {input:?}")));
    }
    let mut shapes = vec![input.to_vec()];
    for (i, k) in kinds.iter().enumerate() {
        let out = k.output_shape(&shapes[i]).map_err(|detail| Error::Chain {
            first: i,
            second: i + 1,
            detail,
        })?;
        shapes.push(out);
    }
    Ok(shapes)
}
