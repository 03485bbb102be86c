//! Declarative architecture descriptions and built-in presets.

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

fn one() -> usize {
    1
}

fn default_eps() -> f64 {
    1e-5
}

fn default_momentum() -> f64 {
    0.1
}

/// One entry of a layer list. Spiking layers take the run's neuron settings
/// unless `v_th` or `alpha` are given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LayerSpec {
    Fc {
        inputs: usize,
        outputs: usize,
    },
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    Avgpool {
        kernel: usize,
    },
    Bn {
        #[serde(default = "default_eps")]
        eps: f64,
        #[serde(default = "default_momentum")]
        momentum: f64,
    },
    Spiking {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        v_th: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        alpha: Option<f64>,
    },
    Dropout {
        p: f64,
    },
    Flatten,
    /// `body(x) + shortcut(x)`; an empty shortcut is the identity.
    ResidualBlock {
        body: Vec<LayerSpec>,
        #[serde(default)]
        shortcut: Vec<LayerSpec>,
    },
}

impl LayerSpec {
    pub fn fc(inputs: usize, outputs: usize) -> Self {
        LayerSpec::Fc { inputs, outputs }
    }

    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        LayerSpec::Conv {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    pub fn bn() -> Self {
        LayerSpec::Bn {
            eps: default_eps(),
            momentum: default_momentum(),
        }
    }

    pub fn spiking() -> Self {
        LayerSpec::Spiking {
            v_th: None,
            alpha: None,
        }
    }

    pub fn avgpool(kernel: usize) -> Self {
        LayerSpec::Avgpool { kernel }
    }
}

/// Sample shape (without batch or time axes), class count and layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub input: Vec<usize>,
    pub classes: usize,
    pub layers: Vec<LayerSpec>,
}

pub const ARCHITECTURE_PRESETS: &[&str] = &[
    "digits-conv",
    "preact-resnet-18",
    "preact-resnet-20",
    "preact-resnet-32",
    "preact-resnet-44",
    "preact-resnet-56",
    "preact-resnet-110",
    "vgg11",
];

fn image_input(input: &[usize], name: &str) -> Result<(usize, usize, usize)> {
    match input {
        &[c, h, w] => Ok((c, h, w)),
        _ => bail!(Spec, "{name} expects a [C, H, W] input, got {input:?}"),
    }
}

/// Two conv stages and two fully connected layers, sized for small digit images.
pub fn digits_conv(input: &[usize], classes: usize) -> Result<NetworkSpec> {
    let (c, h, w) = image_input(input, "digits-conv")?;
    if h % 4 != 0 || w % 4 != 0 {
        bail!(Spec, "digits-conv needs spatial dims divisible by 4, got {h}x{w}");
    }
    let flat = 32 * (h / 4) * (w / 4);
    Ok(NetworkSpec {
        input: input.to_vec(),
        classes,
        layers: vec![
            LayerSpec::conv(c, 16, 3, 1, 1),
            LayerSpec::bn(),
            LayerSpec::spiking(),
            LayerSpec::avgpool(2),
            LayerSpec::spiking(),
            LayerSpec::conv(16, 32, 3, 1, 1),
            LayerSpec::bn(),
            LayerSpec::spiking(),
            LayerSpec::avgpool(2),
            LayerSpec::spiking(),
            LayerSpec::Flatten,
            LayerSpec::fc(flat, 64),
            LayerSpec::bn(),
            LayerSpec::spiking(),
            LayerSpec::fc(64, classes),
            LayerSpec::bn(),
            LayerSpec::spiking(),
        ],
    })
}

fn preact_block(inp: usize, out: usize, stride: usize) -> LayerSpec {
    let shortcut = if stride == 1 && inp == out {
        Vec::new()
    } else {
        vec![LayerSpec::conv(inp, out, 1, stride, 0)]
    };
    LayerSpec::ResidualBlock {
        body: vec![
            LayerSpec::bn(),
            LayerSpec::spiking(),
            LayerSpec::conv(inp, out, 3, stride, 1),
            LayerSpec::bn(),
            LayerSpec::spiking(),
            LayerSpec::conv(out, out, 3, 1, 1),
        ],
        shortcut,
    }
}

/// Pre-activation residual network. Depth 18 uses four stages of two blocks
/// (64..512 channels); depths 6n+2 use three stages of n blocks (16/32/64).
pub fn preact_resnet(depth: usize, input: &[usize], classes: usize) -> Result<NetworkSpec> {
    let (c, h, w) = image_input(input, "preact-resnet")?;
    let (widths, blocks): (Vec<usize>, usize) = match depth {
        18 => (vec![64, 128, 256, 512], 2),
        20 | 32 | 44 | 56 | 110 => (vec![16, 32, 64], (depth - 2) / 6),
        _ => bail!(Spec, "unsupported preact-resnet depth {depth}"),
    };
    let down = 1 << (widths.len() - 1);
    if h != w || h % down != 0 {
        bail!(
            Spec,
            "preact-resnet-{depth} needs square input divisible by {down}, got {h}x{w}"
        );
    }
    let mut layers = vec![LayerSpec::conv(c, widths[0], 3, 1, 1)];
    let mut ch = widths[0];
    for (stage, &width) in widths.iter().enumerate() {
        for b in 0..blocks {
            let stride = if stage > 0 && b == 0 { 2 } else { 1 };
            layers.push(preact_block(ch, width, stride));
            ch = width;
        }
    }
    layers.extend([
        LayerSpec::bn(),
        LayerSpec::spiking(),
        LayerSpec::avgpool(h / down),
        LayerSpec::spiking(),
        LayerSpec::Flatten,
        LayerSpec::fc(ch, classes),
        LayerSpec::bn(),
        LayerSpec::spiking(),
    ]);
    Ok(NetworkSpec {
        input: input.to_vec(),
        classes,
        layers,
    })
}

/// VGG-11 feature stack with a single classifier layer. Pools whose input is
/// not evenly divisible are skipped, so small inputs still build.
pub fn vgg11(input: &[usize], classes: usize, dropout: f64) -> Result<NetworkSpec> {
    let (c, mut h, mut w) = image_input(input, "vgg11")?;
    const CFG: [usize; 13] = [64, 0, 128, 0, 256, 256, 0, 512, 512, 0, 512, 512, 0];
    let mut layers = Vec::new();
    let mut ch = c;
    for &v in &CFG {
        if v == 0 {
            if h % 2 == 0 && w % 2 == 0 {
                layers.push(LayerSpec::avgpool(2));
                layers.push(LayerSpec::spiking());
                h /= 2;
                w /= 2;
            }
        } else {
            layers.extend([LayerSpec::conv(ch, v, 3, 1, 1), LayerSpec::bn(), LayerSpec::spiking()]);
            ch = v;
        }
    }
    layers.push(LayerSpec::Flatten);
    if dropout > 0.0 {
        layers.push(LayerSpec::Dropout { p: dropout });
    }
    layers.extend([
        LayerSpec::fc(ch * h * w, classes),
        LayerSpec::bn(),
        LayerSpec::spiking(),
    ]);
    Ok(NetworkSpec {
        input: input.to_vec(),
        classes,
        layers,
    })
}

/// Resolves a named architecture for the given sample shape.
pub fn architecture_preset(name: &str, input: &[usize], classes: usize, dropout: f64) -> Result<NetworkSpec> {
    if let Some(depth) = name.strip_prefix("preact-resnet-") {
        let depth = depth
            .parse()
            .map_err(|_| crate::DsrError::Spec(format!("unknown architecture preset {name:?}")))?;
        return preact_resnet(depth, input, classes);
    }
    match name {
        "digits-conv" => digits_conv(input, classes),
        "vgg11" => vgg11(input, classes, dropout),
        _ => bail!(
            Spec,
            "unknown architecture preset {name:?}; known: {}",
            ARCHITECTURE_PRESETS.join(", ")
        ),
    }
}
