use std::fmt;
use std::str::FromStr;

use crate::error::{bail, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Padding {
    #[default]
    Same,
    Valid,
}

/// Per-layer hyperparameters of a branch or head.
///
/// The text form (used in model manifests) is compact, e.g.
/// `conv7x7/128/s1/same`, `maxpool2/s2`, `gmp`, `bn`, `relu`,
/// `dropout0.4`, `dense13`, `softmax`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LayerSpec {
    Conv2d {
        kernel: usize,
        filters: usize,
        stride: usize,
        padding: Padding,
    },
    MaxPool2d {
        window: usize,
        stride: usize,
    },
    GlobalMaxPool,
    BatchNorm,
    Relu,
    Dropout {
        rate: f64,
    },
    Dense {
        units: usize,
    },
    Softmax,
}

impl LayerSpec {
    /// Stride-1 same-padded convolution.
    pub fn conv(kernel: usize, filters: usize) -> Self {
        LayerSpec::Conv2d {
            kernel,
            filters,
            stride: 1,
            padding: Padding::Same,
        }
    }

    pub fn pool(window: usize) -> Self {
        LayerSpec::MaxPool2d {
            window,
            stride: window,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            LayerSpec::Conv2d {
                kernel,
                filters,
                stride,
                ..
            } => {
                if kernel % 2 == 0 {
                    bail!(Config, "conv kernel size must be odd, got {kernel}");
                }
                if stride == 0 || filters == 0 {
                    bail!(Config, "conv stride and filters must be at least 1");
                }
            }
            LayerSpec::MaxPool2d { window, stride } => {
                if window == 0 || stride == 0 {
                    bail!(Config, "pool window and stride must be at least 1");
                }
            }
            LayerSpec::Dropout { rate } => {
                if !(0.0..1.0).contains(&rate) {
                    bail!(Config, "dropout rate must lie in [0, 1), got {rate}");
                }
            }
            LayerSpec::Dense { units: 0 } => bail!(Config, "dense units must be at least 1"),
            _ => {}
        }
        Ok(())
    }

    /// Output shape (without batch axis) for the given input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.validate()?;
        match *self {
            LayerSpec::Conv2d {
                kernel,
                filters,
                stride,
                padding,
            } => {
                let [h, w, _] = spatial(input, "conv")?;
                let pad = match padding {
                    Padding::Same => kernel / 2,
                    Padding::Valid => 0,
                };
                if h + 2 * pad < kernel || w + 2 * pad < kernel {
                    bail!(Dimension, "conv kernel {kernel} larger than input {h}×{w}");
                }
                Ok(vec![
                    (h + 2 * pad - kernel) / stride + 1,
                    (w + 2 * pad - kernel) / stride + 1,
                    filters,
                ])
            }
            LayerSpec::MaxPool2d { window, stride } => {
                let [h, w, c] = spatial(input, "maxpool")?;
                if window > h || window > w {
                    bail!(Dimension, "pool window {window} larger than input {h}×{w}");
                }
                Ok(vec![(h - window) / stride + 1, (w - window) / stride + 1, c])
            }
            LayerSpec::GlobalMaxPool => {
                let [_, _, c] = spatial(input, "global max pool")?;
                Ok(vec![c])
            }
            LayerSpec::Dense { units } => {
                if input.len() != 1 {
                    bail!(Dimension, "dense expects a flat input, got {input:?}");
                }
                Ok(vec![units])
            }
            LayerSpec::BatchNorm | LayerSpec::Relu | LayerSpec::Dropout { .. } | LayerSpec::Softmax => {
                Ok(input.to_vec())
            }
        }
    }
}

fn spatial(input: &[usize], what: &str) -> Result<[usize; 3]> {
    match *input {
        [h, w, c] => Ok([h, w, c]),
        _ => bail!(Dimension, "{what} expects an H×W×C input, got {input:?}"),
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            LayerSpec::Conv2d {
                kernel,
                filters,
                stride,
                padding,
            } => {
                let pad = match padding {
                    Padding::Same => "same",
                    Padding::Valid => "valid",
                };
                write!(f, "conv{kernel}x{kernel}/{filters}/s{stride}/{pad}")
            }
            LayerSpec::MaxPool2d { window, stride } => write!(f, "maxpool{window}/s{stride}"),
            LayerSpec::GlobalMaxPool => write!(f, "gmp"),
            LayerSpec::BatchNorm => write!(f, "bn"),
            LayerSpec::Relu => write!(f, "relu"),
            LayerSpec::Dropout { rate } => write!(f, "dropout{rate}"),
            LayerSpec::Dense { units } => write!(f, "dense{units}"),
            LayerSpec::Softmax => write!(f, "softmax"),
        }
    }
}

impl FromStr for LayerSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Format(format!("unrecognized layer spec '{s}'"));
        let num = |t: &str| t.parse::<usize>().map_err(|_| bad());
        let spec = match s.trim() {
            "gmp" => LayerSpec::GlobalMaxPool,
            "bn" => LayerSpec::BatchNorm,
            "relu" => LayerSpec::Relu,
            "softmax" => LayerSpec::Softmax,
            t if t.starts_with("conv") => {
                let parts: Vec<&str> = t["conv".len()..].split('/').collect();
                let [size, filters, rest @ ..] = parts.as_slice() else {
                    return Err(bad());
                };
                let (k1, k2) = size.split_once('x').ok_or_else(bad)?;
                if k1 != k2 {
                    return Err(bad());
                }
                let mut stride = 1;
                let mut padding = Padding::Same;
                for r in rest {
                    match *r {
                        "same" => padding = Padding::Same,
                        "valid" => padding = Padding::Valid,
                        r if r.starts_with('s') => stride = num(&r[1..])?,
                        _ => return Err(bad()),
                    }
                }
                LayerSpec::Conv2d {
                    kernel: num(k1)?,
                    filters: num(filters)?,
                    stride,
                    padding,
                }
            }
            t if t.starts_with("maxpool") => {
                let body = &t["maxpool".len()..];
                let (w, s) = match body.split_once("/s") {
                    Some((w, s)) => (num(w)?, num(s)?),
                    None => (num(body)?, num(body)?),
                };
                LayerSpec::MaxPool2d {
                    window: w,
                    stride: s,
                }
            }
            t if t.starts_with("dropout") => LayerSpec::Dropout {
                rate: t["dropout".len()..].parse().map_err(|_| bad())?,
            },
            t if t.starts_with("dense") => LayerSpec::Dense {
                units: num(&t["dense".len()..])?,
            },
            _ => return Err(bad()),
        };
        spec.validate()?;
        Ok(spec)
    }
}
