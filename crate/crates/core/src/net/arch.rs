//! Architecture presets and the normalization mode applied to their convs.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::layers::{ConvGeometry, PoolGeometry};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NormMode {
    Plain,
    Bn,
    Wn,
    Pws,
    Gn,
}

impl NormMode {
    pub const ALL: [NormMode; 5] = [NormMode::Plain, NormMode::Bn, NormMode::Wn, NormMode::Pws, NormMode::Gn];

    pub fn as_str(self) -> &'static str {
        match self {
            NormMode::Plain => "plain",
            NormMode::Bn => "bn",
            NormMode::Wn => "wn",
            NormMode::Pws => "pws",
            NormMode::Gn => "gn",
        }
    }

    /// Whether outputs depend on other samples in the batch during training.
    pub fn uses_batch_statistics(self) -> bool {
        self == NormMode::Bn
    }
}

impl fmt::Display for NormMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NormMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        NormMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown norm '{s}', expected plain|bn|wn|pws|gn")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// Conv-pool stack with 96/192 channels, no dropout, global average pool.
    PlainC,
    /// CIFAR residual network with 16/32/64 channels.
    ResNetSmall,
    /// Two 3×3 convs and a 1×1 classifier, for tests.
    Tiny,
}

impl Preset {
    pub fn as_str(self) -> &'static str {
        match self {
            Preset::PlainC => "plain-c",
            Preset::ResNetSmall => "resnet-small",
            Preset::Tiny => "tiny",
        }
    }

    pub(crate) fn code(self) -> u32 {
        match self {
            Preset::PlainC => 0,
            Preset::ResNetSmall => 1,
            Preset::Tiny => 2,
        }
    }

    pub(crate) fn from_code(code: u32) -> Option<Self> {
        [Preset::PlainC, Preset::ResNetSmall, Preset::Tiny]
            .into_iter()
            .find(|p| p.code() == code)
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Preset::PlainC, Preset::ResNetSmall, Preset::Tiny]
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown arch '{s}', expected plain-c|resnet-small|tiny")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ArchConfig {
    pub preset: Preset,
    /// Channel multiplier applied to every hidden layer.
    pub width: f64,
    /// Total weighted depth of the residual preset (`6n + 2`).
    pub depth: usize,
    pub classes: usize,
    pub in_channels: usize,
    pub in_size: usize,
}

impl ArchConfig {
    pub fn new(preset: Preset) -> Self {
        ArchConfig {
            preset,
            width: 1.0,
            depth: 20,
            classes: 10,
            in_channels: 3,
            in_size: 32,
        }
    }

    fn channels(&self, base: usize) -> usize {
        ((base as f64 * self.width).round() as usize).max(1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LayerSpec {
    /// `head` marks the conv that produces class scores; it keeps its weight
    /// transform but never gets an output normalizer.
    Conv {
        geom: ConvGeometry,
        relu: bool,
        head: bool,
    },
    MaxPool(PoolGeometry),
    GlobalAvgPool,
    Linear {
        inputs: usize,
        outputs: usize,
    },
    /// conv3×3(stride) → norm → ReLU → conv3×3 → norm, plus a shortcut that
    /// subsamples and zero-pads channels, then ReLU.
    Residual {
        in_channels: usize,
        out_channels: usize,
        stride: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArchitectureSpec {
    pub config: ArchConfig,
    pub layers: Vec<LayerSpec>,
}

impl ArchitectureSpec {
    pub fn from_config(config: ArchConfig) -> Result<Self> {
        if !(config.width > 0.0) || config.classes == 0 || config.in_channels == 0 {
            return Err(Error::domain(format!("invalid architecture config {config:?}")));
        }
        let conv = |c, d, k| LayerSpec::Conv {
            geom: ConvGeometry::same(c, d, k),
            relu: true,
            head: false,
        };
        let head = |c, d| LayerSpec::Conv {
            geom: ConvGeometry::same(c, d, 1),
            relu: false,
            head: true,
        };
        let pool = LayerSpec::MaxPool(PoolGeometry { kernel: 2, stride: 2 });
        let mut layers = Vec::new();
        match config.preset {
            Preset::PlainC => {
                let a = config.channels(96);
                let b = config.channels(192);
                layers.extend([conv(config.in_channels, a, 3), conv(a, a, 3), conv(a, a, 3), pool]);
                layers.extend([conv(a, b, 3), conv(b, b, 3), conv(b, b, 3), pool]);
                layers.extend([conv(b, b, 3), conv(b, b, 1), head(b, config.classes), LayerSpec::GlobalAvgPool]);
            }
            Preset::ResNetSmall => {
                if config.depth < 8 || (config.depth - 2) % 6 != 0 {
                    return Err(Error::domain(format!("residual depth {} is not of the form 6n+2", config.depth)));
                }
                let blocks = (config.depth - 2) / 6;
                let widths = [config.channels(16), config.channels(32), config.channels(64)];
                layers.push(conv(config.in_channels, widths[0], 3));
                let mut c = widths[0];
                for (stage, &d) in widths.iter().enumerate() {
                    for b in 0..blocks {
                        let stride = if stage > 0 && b == 0 { 2 } else { 1 };
                        layers.push(LayerSpec::Residual {
                            in_channels: c,
                            out_channels: d,
                            stride,
                        });
                        c = d;
                    }
                }
                layers.push(LayerSpec::GlobalAvgPool);
                layers.push(LayerSpec::Linear {
                    inputs: c,
                    outputs: config.classes,
                });
            }
            Preset::Tiny => {
                let a = config.channels(8);
                layers.extend([
                    conv(config.in_channels, a, 3),
                    conv(a, a, 3),
                    pool,
                    head(a, config.classes),
                    LayerSpec::GlobalAvgPool,
                ]);
            }
        }
        let spec = ArchitectureSpec { config, layers };
        spec.output_shape()?;
        Ok(spec)
    }

    /// Walks the layer list and returns the per-sample output extent, which
    /// must be a vector of class scores.
    pub fn output_shape(&self) -> Result<usize> {
        // (channels, height, width) while spatial, (features, 0, 0) after flattening
        let mut shape = (self.config.in_channels, self.config.in_size, self.config.in_size);
        let mut flat = false;
        let mut heads = 0;
        for (i, layer) in self.layers.iter().enumerate() {
            let bad = |msg: String| Error::domain(format!("layer {i}: {msg}"));
            match *layer {
                LayerSpec::Conv { geom, head, .. } => {
                    geom.validate()?;
                    if flat || geom.in_channels != shape.0 {
                        return Err(bad(format!("conv expects {} channels, input has {:?}", geom.in_channels, shape)));
                    }
                    shape = (geom.out_channels, geom.output_extent(shape.1)?, geom.output_extent(shape.2)?);
                    heads += head as usize;
                }
                LayerSpec::MaxPool(p) => {
                    if flat {
                        return Err(bad("pooling after flattening".into()));
                    }
                    shape = (shape.0, p.output_extent(shape.1)?, p.output_extent(shape.2)?);
                }
                LayerSpec::GlobalAvgPool => {
                    if flat {
                        return Err(bad("pooling after flattening".into()));
                    }
                    flat = true;
                    shape = (shape.0, 0, 0);
                }
                LayerSpec::Linear { inputs, outputs } => {
                    if !flat || inputs != shape.0 {
                        return Err(bad(format!("linear expects {inputs} features, input has {:?}", shape)));
                    }
                    shape = (outputs, 0, 0);
                    heads += 1;
                }
                LayerSpec::Residual {
                    in_channels,
                    out_channels,
                    stride,
                } => {
                    if flat || in_channels != shape.0 || out_channels < in_channels || stride == 0 {
                        return Err(bad(format!("residual block {in_channels}->{out_channels} on {:?}", shape)));
                    }
                    let g = ConvGeometry::new(in_channels, out_channels, 3, stride, 1);
                    shape = (out_channels, g.output_extent(shape.1)?, g.output_extent(shape.2)?);
                }
            }
        }
        if !flat || heads != 1 || shape.0 != self.config.classes {
            return Err(Error::domain(format!(
                "architecture must end in exactly one {}-way head, got {heads} heads and output {:?}",
                self.config.classes, shape
            )));
        }
        Ok(shape.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for preset in [Preset::PlainC, Preset::ResNetSmall, Preset::Tiny] {
            let spec = ArchitectureSpec::from_config(ArchConfig::new(preset)).unwrap();
            assert_eq!(spec.output_shape().unwrap(), 10);
        }
        let mut half = ArchConfig::new(Preset::PlainC);
        half.width = 0.5;
        let spec = ArchitectureSpec::from_config(half).unwrap();
        match spec.layers[0] {
            LayerSpec::Conv { geom, .. } => assert_eq!(geom.out_channels, 48),
            _ => unreachable!(),
        }
    }

    #[test]
    fn resnet_depth_counts_weighted_layers() {
        let spec = ArchitectureSpec::from_config(ArchConfig::new(Preset::ResNetSmall)).unwrap();
        let blocks = spec.layers.iter().filter(|l| matches!(l, LayerSpec::Residual { .. })).count();
        assert_eq!(1 + 2 * blocks + 1, 20);
        let mut bad = ArchConfig::new(Preset::ResNetSmall);
        bad.depth = 21;
        assert!(ArchitectureSpec::from_config(bad).is_err());
    }

    #[test]
    fn incompatible_layers_are_rejected() {
        let mut spec = ArchitectureSpec::from_config(ArchConfig::new(Preset::Tiny)).unwrap();
        spec.layers.swap(0, 1);
        assert!(matches!(spec.output_shape(), Err(Error::Domain(_))));
        let mut spec = ArchitectureSpec::from_config(ArchConfig::new(Preset::Tiny)).unwrap();
        spec.layers.pop();
        assert!(spec.output_shape().is_err());
    }

    #[test]
    fn names_round_trip() {
        for m in NormMode::ALL {
            assert_eq!(m.as_str().parse::<NormMode>().unwrap(), m);
        }
        assert!("layer".parse::<NormMode>().is_err());
        assert_eq!("resnet-small".parse::<Preset>().unwrap(), Preset::ResNetSmall);
    }
}
