//! Declarative network descriptions and the desk-scale presets.
//!
//! A `NetworkSpec` is a flat list of layer descriptors plus input geometry
//! and class count. Checkpoints store only the spec id string; `from_id`
//! rebuilds the preset, which together with an `InitSpec` reconstructs every
//! weight bit.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSpec {
    /// 3x3-style square convolution, no bias (weights are the mask target).
    Conv2d {
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    /// Fully connected layer, no bias.
    Linear { out_features: usize },
    /// Non-affine batch normalization over the channel axis.
    BatchNorm,
    Relu,
    MaxPool { kernel: usize, stride: usize },
    AvgPool { kernel: usize, stride: usize },
    /// Average over the full spatial extent (square inputs).
    GlobalAvgPool,
    Flatten,
    /// Pre-activation residual block: BN-ReLU-conv3x3(stride)-BN-ReLU-conv3x3,
    /// with a 1x1 projection on the shortcut when geometry changes.
    PreactBlock { out_ch: usize, stride: usize },
}

/// Network architecture: input geometry, class count, ordered layers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    pub name: String,
    /// (channels, height, width)
    pub input: (usize, usize, usize),
    pub classes: usize,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// Compact CNN: three conv/BN/ReLU stages with two 2x2 max-pools, then a
    /// single linear head. Works for any square input of at least 8x8.
    pub fn desk_cnn(input: (usize, usize, usize), classes: usize) -> Self {
        use LayerSpec::*;
        NetworkSpec {
            name: "desk_cnn".to_string(),
            input,
            classes,
            layers: vec![
                Conv2d { out_ch: 16, kernel: 3, stride: 1, pad: 1 },
                BatchNorm,
                Relu,
                Conv2d { out_ch: 32, kernel: 3, stride: 1, pad: 1 },
                BatchNorm,
                Relu,
                MaxPool { kernel: 2, stride: 2 },
                Conv2d { out_ch: 64, kernel: 3, stride: 1, pad: 1 },
                BatchNorm,
                Relu,
                MaxPool { kernel: 2, stride: 2 },
                Flatten,
                Linear { out_features: classes },
            ],
        }
    }

    /// Pre-activation residual network with eight weighted layers on the
    /// main path: stem conv, three residual blocks, linear head.
    pub fn desk_resnet8(input: (usize, usize, usize), classes: usize) -> Self {
        use LayerSpec::*;
        NetworkSpec {
            name: "desk_resnet8".to_string(),
            input,
            classes,
            layers: vec![
                Conv2d { out_ch: 8, kernel: 3, stride: 1, pad: 1 },
                PreactBlock { out_ch: 8, stride: 1 },
                PreactBlock { out_ch: 16, stride: 2 },
                PreactBlock { out_ch: 32, stride: 2 },
                BatchNorm,
                Relu,
                GlobalAvgPool,
                Flatten,
                Linear { out_features: classes },
            ],
        }
    }

    /// Single linear layer on the flattened input; the enumeration-oracle
    /// workhorse.
    pub fn toy_linear(input: (usize, usize, usize), classes: usize) -> Self {
        use LayerSpec::*;
        NetworkSpec {
            name: "toy_linear".to_string(),
            input,
            classes,
            layers: vec![Flatten, Linear { out_features: classes }],
        }
    }

    /// Two-layer perceptron with a fixed hidden width of 8.
    pub fn toy_mlp(input: (usize, usize, usize), classes: usize) -> Self {
        use LayerSpec::*;
        NetworkSpec {
            name: "toy_mlp".to_string(),
            input,
            classes,
            layers: vec![
                Flatten,
                Linear { out_features: 8 },
                Relu,
                Linear { out_features: classes },
            ],
        }
    }

    /// Minimal conv net for small-network tests: conv, ReLU, flatten, linear.
    pub fn toy_conv(input: (usize, usize, usize), classes: usize) -> Self {
        use LayerSpec::*;
        NetworkSpec {
            name: "toy_conv".to_string(),
            input,
            classes,
            layers: vec![
                Conv2d { out_ch: 2, kernel: 2, stride: 1, pad: 0 },
                Relu,
                Flatten,
                Linear { out_features: classes },
            ],
        }
    }

    /// Arbitrary architecture for in-process experiments. Its id is not
    /// resolvable by `from_id`, so checkpoints of custom nets cannot be
    /// reconstructed from the id alone.
    pub fn custom(
        name: &str,
        input: (usize, usize, usize),
        classes: usize,
        layers: Vec<LayerSpec>,
    ) -> Self {
        NetworkSpec {
            name: name.to_string(),
            input,
            classes,
            layers,
        }
    }

    /// Stable identity string, e.g. `desk_cnn:1x8x8:10`.
    pub fn id(&self) -> String {
        format!(
            "{}:{}x{}x{}:{}",
            self.name, self.input.0, self.input.1, self.input.2, self.classes
        )
    }

    /// Rebuilds a preset from its id string.
    pub fn from_id(id: &str) -> Result<NetworkSpec> {
        let mut parts = id.split(':');
        let (name, dims, classes) = match (parts.next(), parts.next(), parts.next(), parts.next())
        {
            (Some(n), Some(d), Some(c), None) => (n, d, c),
            _ => return Err(Error::UnknownNetworkId(id.to_string())),
        };
        let mut it = dims.split('x');
        let (c, h, w) = match (it.next(), it.next(), it.next(), it.next()) {
            (Some(c), Some(h), Some(w), None) => (
                c.parse::<usize>(),
                h.parse::<usize>(),
                w.parse::<usize>(),
            ),
            _ => return Err(Error::UnknownNetworkId(id.to_string())),
        };
        let (c, h, w) = match (c, h, w) {
            (Ok(c), Ok(h), Ok(w)) => (c, h, w),
            _ => return Err(Error::UnknownNetworkId(id.to_string())),
        };
        let classes: usize = classes
            .parse()
            .map_err(|_| Error::UnknownNetworkId(id.to_string()))?;
        let input = (c, h, w);
        match name {
            "desk_cnn" => Ok(NetworkSpec::desk_cnn(input, classes)),
            "desk_resnet8" => Ok(NetworkSpec::desk_resnet8(input, classes)),
            "toy_linear" => Ok(NetworkSpec::toy_linear(input, classes)),
            "toy_mlp" => Ok(NetworkSpec::toy_mlp(input, classes)),
            "toy_conv" => Ok(NetworkSpec::toy_conv(input, classes)),
            _ => Err(Error::UnknownNetworkId(id.to_string())),
        }
    }

    /// Replaces the final linear layer's class count (used when transferring
    /// a trained network to a task with a different label set).
    pub fn with_classes(&self, classes: usize) -> NetworkSpec {
        let mut spec = self.clone();
        spec.classes = classes;
        for layer in spec.layers.iter_mut().rev() {
            if let LayerSpec::Linear { out_features } = layer {
                *out_features = classes;
                break;
            }
        }
        spec
    }
}
