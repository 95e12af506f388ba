//! Layer specifications, named presets and the textual architecture format.
//!
//! The text form is what checkpoints embed, e.g.
//! `in=1x28x28;classes=10;dense(784,500);relu;dense(500,10)`.

use std::fmt;
use std::str::FromStr;

use crate::error::{LabError, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    /// Fully connected layer. Any input whose per-item size equals `inputs`
    /// is accepted and treated as flat.
    Dense { inputs: usize, outputs: usize },
    /// Valid (unpadded) 2-D convolution over `[channels, height, width]`.
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    },
    ReLU,
    /// 2×2 max pooling with stride 2; odd trailing rows/columns are dropped.
    MaxPool2x2,
    /// Inverted dropout, identity in evaluation mode.
    Dropout { rate: f64 },
    Flatten,
}

impl LayerSpec {
    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. })
    }

    /// Weight shape and bias length for parametric layers.
    pub fn param_shapes(&self) -> Option<(Vec<usize>, usize)> {
        match *self {
            LayerSpec::Dense { inputs, outputs } => Some((vec![outputs, inputs], outputs)),
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some((vec![out_channels, in_channels, kernel, kernel], out_channels)),
            _ => None,
        }
    }

    /// Per-item output shape for the given per-item input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let numel: usize = input.iter().product();
        match *self {
            LayerSpec::Dense { inputs, outputs } => {
                if inputs == 0 || outputs == 0 {
                    return Err(LabError::InvalidArchitecture(
                        "dense dimensions must be positive".into(),
                    ));
                }
                if numel != inputs {
                    return Err(LabError::InvalidArchitecture(format!(
                        "dense layer expects {inputs} inputs, previous layer yields {input:?}"
                    )));
                }
                Ok(vec![outputs])
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
            } => {
                if in_channels == 0 || out_channels == 0 || kernel == 0 || stride == 0 {
                    return Err(LabError::InvalidArchitecture(
                        "conv2d dimensions must be positive".into(),
                    ));
                }
                let [c, h, w] = input else {
                    return Err(LabError::InvalidArchitecture(format!(
                        "conv2d needs a [channels, height, width] input, got {input:?}"
                    )));
                };
                if *c != in_channels {
                    return Err(LabError::InvalidArchitecture(format!(
                        "conv2d expects {in_channels} channels, got {c}"
                    )));
                }
                if *h < kernel || *w < kernel {
                    return Err(LabError::InvalidArchitecture(format!(
                        "conv2d kernel {kernel} larger than input {h}x{w}"
                    )));
                }
                Ok(vec![
                    out_channels,
                    (h - kernel) / stride + 1,
                    (w - kernel) / stride + 1,
                ])
            }
            LayerSpec::MaxPool2x2 => {
                let [c, h, w] = input else {
                    return Err(LabError::InvalidArchitecture(format!(
                        "maxpool needs a [channels, height, width] input, got {input:?}"
                    )));
                };
                if *h < 2 || *w < 2 {
                    return Err(LabError::InvalidArchitecture(format!(
                        "maxpool input {h}x{w} too small"
                    )));
                }
                Ok(vec![*c, h / 2, w / 2])
            }
            LayerSpec::Dropout { rate } => {
                if !(0.0..1.0).contains(&rate) {
                    return Err(LabError::InvalidArchitecture(format!(
                        "dropout rate {rate} outside [0, 1)"
                    )));
                }
                Ok(input.to_vec())
            }
            LayerSpec::ReLU => Ok(input.to_vec()),
            LayerSpec::Flatten => Ok(vec![numel]),
        }
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Dense { inputs, outputs } => write!(f, "dense({inputs},{outputs})"),
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
            } => write!(f, "conv2d({in_channels},{out_channels},{kernel},{stride})"),
            LayerSpec::ReLU => f.write_str("relu"),
            LayerSpec::MaxPool2x2 => f.write_str("maxpool2x2"),
            LayerSpec::Dropout { rate } => write!(f, "dropout({rate})"),
            LayerSpec::Flatten => f.write_str("flatten"),
        }
    }
}

impl FromStr for LayerSpec {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || LabError::InvalidArchitecture(format!("cannot parse layer `{s}`"));
        let (name, args) = match s.find('(') {
            Some(open) => {
                let inner = s[open + 1..].strip_suffix(')').ok_or_else(bad)?;
                (&s[..open], inner.split(',').map(str::trim).collect::<Vec<_>>())
            }
            None => (s, Vec::new()),
        };
        let ints = |n: usize| -> Result<Vec<usize>> {
            if args.len() != n {
                return Err(bad());
            }
            args.iter().map(|a| a.parse().map_err(|_| bad())).collect()
        };
        match name.to_ascii_lowercase().as_str() {
            "dense" | "linear" => {
                let v = ints(2)?;
                Ok(LayerSpec::Dense {
                    inputs: v[0],
                    outputs: v[1],
                })
            }
            "conv2d" => {
                let v = ints(4)?;
                Ok(LayerSpec::Conv2d {
                    in_channels: v[0],
                    out_channels: v[1],
                    kernel: v[2],
                    stride: v[3],
                })
            }
            "relu" if args.is_empty() => Ok(LayerSpec::ReLU),
            "maxpool2x2" | "maxpool" if args.is_empty() => Ok(LayerSpec::MaxPool2x2),
            "flatten" if args.is_empty() => Ok(LayerSpec::Flatten),
            "dropout" if args.len() == 1 => Ok(LayerSpec::Dropout {
                rate: args[0].parse().map_err(|_| bad())?,
            }),
            _ => Err(bad()),
        }
    }
}

/// Default dropout rate for presets that contain a dropout layer.
pub const DEFAULT_DROPOUT: f64 = 0.5;

/// A validated layer stack together with its per-item input shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    input_shape: Vec<usize>,
    num_classes: usize,
    layers: Vec<LayerSpec>,
    /// Per-item shape entering each layer, plus the final output shape.
    shapes: Vec<Vec<usize>>,
}

impl Architecture {
    pub fn new(layers: Vec<LayerSpec>, input_shape: &[usize], num_classes: usize) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(LabError::InvalidArchitecture(format!(
                "input shape {input_shape:?} must be non-empty and positive"
            )));
        }
        if num_classes < 2 {
            return Err(LabError::InvalidArchitecture(
                "at least two classes are required".into(),
            ));
        }
        let mut shapes = vec![input_shape.to_vec()];
        for layer in &layers {
            let next = layer.output_shape(shapes.last().unwrap())?;
            shapes.push(next);
        }
        let out = shapes.last().unwrap();
        if out.as_slice() != [num_classes] {
            return Err(LabError::InvalidArchitecture(format!(
                "network output {out:?} does not match {num_classes} classes"
            )));
        }
        Ok(Self {
            input_shape: input_shape.to_vec(),
            num_classes,
            layers,
            shapes,
        })
    }

    /// Builds one of the named presets `FC-2`, `FC-4`, `Conv-2`, `Conv-4`.
    ///
    /// The hidden widths are fixed; only the first dense layer of the
    /// convolutional presets adapts to the flattened feature size (9216 for
    /// `Conv-2` on `1×28×28` inputs, 2048 for `Conv-4`).
    pub fn preset(name: &str, input_shape: &[usize], num_classes: usize) -> Result<Self> {
        let flat: usize = input_shape.iter().product();
        let channels = input_shape.first().copied().unwrap_or(0);
        let conv = |i: usize, o: usize| LayerSpec::Conv2d {
            in_channels: i,
            out_channels: o,
            kernel: 3,
            stride: 1,
        };
        let dense = |i: usize, o: usize| LayerSpec::Dense {
            inputs: i,
            outputs: o,
        };
        let layers = match normalize_preset(name).as_str() {
            "fc2" => vec![dense(flat, 500), LayerSpec::ReLU, dense(500, num_classes)],
            "fc4" => vec![
                dense(flat, 500),
                LayerSpec::ReLU,
                dense(500, 200),
                LayerSpec::ReLU,
                dense(200, 100),
                LayerSpec::ReLU,
                dense(100, num_classes),
            ],
            "conv2" => {
                let mut layers = vec![
                    conv(channels, 32),
                    LayerSpec::ReLU,
                    conv(32, 64),
                    LayerSpec::ReLU,
                    LayerSpec::MaxPool2x2,
                ];
                let feat = features_after(&layers, input_shape)?;
                layers.extend([
                    dense(feat, 128),
                    LayerSpec::ReLU,
                    LayerSpec::Dropout {
                        rate: DEFAULT_DROPOUT,
                    },
                    dense(128, num_classes),
                ]);
                layers
            }
            "conv4" => {
                let mut layers = vec![
                    conv(channels, 32),
                    LayerSpec::ReLU,
                    conv(32, 64),
                    LayerSpec::ReLU,
                    conv(64, 128),
                    LayerSpec::ReLU,
                    LayerSpec::MaxPool2x2,
                    conv(128, 128),
                    LayerSpec::ReLU,
                    LayerSpec::MaxPool2x2,
                ];
                let feat = features_after(&layers, input_shape)?;
                layers.extend([
                    dense(feat, 128),
                    LayerSpec::ReLU,
                    LayerSpec::Dropout {
                        rate: DEFAULT_DROPOUT,
                    },
                    dense(128, num_classes),
                ]);
                layers
            }
            _ => return Err(LabError::UnknownPreset(name.to_string())),
        };
        Self::new(layers, input_shape, num_classes)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    /// Per-item input shape of layer `i` (`i == layers.len()` gives the output).
    pub fn shape_at(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .filter_map(LayerSpec::param_shapes)
            .map(|(w, b)| w.iter().product::<usize>() + b)
            .sum()
    }

    pub fn has_dropout(&self) -> bool {
        self.layers
            .iter()
            .any(|l| matches!(l, LayerSpec::Dropout { rate } if *rate > 0.0))
    }
}

fn normalize_preset(name: &str) -> String {
    name.chars()
        .filter(|c| c.is_ascii_alphanumeric())
        .collect::<String>()
        .to_ascii_lowercase()
}

/// Returns true when `name` is one of the built-in preset names.
pub fn is_preset(name: &str) -> bool {
    matches!(normalize_preset(name).as_str(), "fc2" | "fc4" | "conv2" | "conv4")
}

fn features_after(layers: &[LayerSpec], input: &[usize]) -> Result<usize> {
    let mut shape = input.to_vec();
    for l in layers {
        shape = l.output_shape(&shape)?;
    }
    Ok(shape.iter().product())
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let dims: Vec<String> = self.input_shape.iter().map(usize::to_string).collect();
        write!(f, "in={};classes={}", dims.join("x"), self.num_classes)?;
        for l in &self.layers {
            write!(f, ";{l}")?;
        }
        Ok(())
    }
}

impl FromStr for Architecture {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        let mut input = None;
        let mut classes = None;
        let mut layers = Vec::new();
        for part in s.split(';').map(str::trim).filter(|p| !p.is_empty()) {
            if let Some(v) = part.strip_prefix("in=") {
                let dims = v
                    .split('x')
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| LabError::InvalidArchitecture(format!("bad input shape `{v}`")))?;
                input = Some(dims);
            } else if let Some(v) = part.strip_prefix("classes=") {
                classes = Some(v.parse::<usize>().map_err(|_| {
                    LabError::InvalidArchitecture(format!("bad class count `{v}`"))
                })?);
            } else {
                layers.push(part.parse::<LayerSpec>()?);
            }
        }
        let input =
            input.ok_or_else(|| LabError::InvalidArchitecture("missing `in=` field".into()))?;
        let classes = classes
            .ok_or_else(|| LabError::InvalidArchitecture("missing `classes=` field".into()))?;
        Architecture::new(layers, &input, classes)
    }
}
