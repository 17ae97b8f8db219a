//! Residual convolutional feature extractor.
//!
//! Each block computes `relu(F(x) + shortcut(x))` with
//! `F = conv3x3 → relu → conv3x3`. The shortcut is the identity when the
//! block preserves shape, and a strided 1×1 projection otherwise. There is
//! no batch normalization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Init, ParamId, ParamRegistry, ParamVars};
use crate::tensor::{shape_err, Activation, Scalar, Tape, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
    /// Stride of the first block in each stage.
    pub stage_strides: Vec<usize>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl BackboneConfig {
    /// Two stages of one block each, total stride 4.
    pub fn desk() -> Self {
        BackboneConfig {
            in_channels: 3,
            stage_channels: vec![16, 32],
            blocks_per_stage: vec![1, 1],
            stage_strides: vec![2, 2],
        }
    }

    /// Total stride 16 with 3/4/6 bottleneck-free blocks, giving a 14×14 map
    /// at 224 input like a 50-layer network cut after its third stage.
    pub fn full_scale() -> Self {
        BackboneConfig {
            in_channels: 3,
            stage_channels: vec![64, 256, 512, 1024],
            blocks_per_stage: vec![1, 3, 4, 6],
            stage_strides: vec![2, 2, 2, 2],
        }
    }

    pub fn total_stride(&self) -> usize {
        self.stage_strides.iter().product()
    }

    pub fn out_channels(&self) -> usize {
        *self.stage_channels.last().unwrap_or(&self.in_channels)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.stage_channels.len();
        if n == 0 || self.blocks_per_stage.len() != n || self.stage_strides.len() != n {
            return Err(Error::Config(format!(
                "backbone stage lists disagree: channels {}, blocks {}, strides {}",
                n,
                self.blocks_per_stage.len(),
                self.stage_strides.len()
            )));
        }
        let positive = |v: &[usize]| v.iter().all(|&x| x > 0);
        if self.in_channels == 0
            || !positive(&self.stage_channels)
            || !positive(&self.blocks_per_stage)
            || !positive(&self.stage_strides)
        {
            return Err(Error::Config("backbone channels, blocks and strides must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl ConvLayer {
    pub fn register(reg: &mut ParamRegistry, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize) -> Self {
        let fan_in = c_in * k * k;
        ConvLayer {
            weight: reg.add(format!("{name}.weight"), vec![c_out, c_in, k, k], Init::FanIn(fan_in)),
            bias: reg.add(format!("{name}.bias"), vec![c_out], Init::FanIn(fan_in)),
            stride,
            padding: k / 2,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, x: Var, p: &ParamVars) -> Result<Var> {
        let y = tape.conv2d(x, p[self.weight], self.stride, self.padding)?;
        tape.channel_bias(y, p[self.bias])
    }
}

#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
    pub projection: Option<ConvLayer>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
}

impl ResidualBlock {
    pub fn register(reg: &mut ParamRegistry, name: &str, c_in: usize, c_out: usize, stride: usize) -> Self {
        let conv1 = ConvLayer::register(reg, &format!("{name}.conv1"), c_in, c_out, 3, stride);
        let conv2 = ConvLayer::register(reg, &format!("{name}.conv2"), c_out, c_out, 3, 1);
        let projection = (stride != 1 || c_in != c_out)
            .then(|| ConvLayer::register(reg, &format!("{name}.projection"), c_in, c_out, 1, stride));
        ResidualBlock {
            conv1,
            conv2,
            projection,
            in_channels: c_in,
            out_channels: c_out,
            stride,
        }
    }
}

/// `relu(conv2(relu(conv1(x))) + shortcut(x))`
pub fn residual_block_forward<T: Scalar>(tape: &mut Tape<T>, x: Var, block: &ResidualBlock, p: &ParamVars) -> Result<Var> {
    let shape = tape.shape(x);
    if shape.len() != 3 || shape[0] != block.in_channels {
        return shape_err(format!(
            "residual block expects {} input channels, got {:?}",
            block.in_channels, shape
        ));
    }
    let h = block.conv1.forward(tape, x, p)?;
    let h = tape.activation(h, Activation::Relu)?;
    let h = block.conv2.forward(tape, h, p)?;
    let shortcut = match &block.projection {
        Some(proj) => proj.forward(tape, x, p)?,
        None => x,
    };
    if tape.shape(h) != tape.shape(shortcut) {
        return shape_err(format!(
            "residual branch {:?} does not match shortcut {:?}",
            tape.shape(h),
            tape.shape(shortcut)
        ));
    }
    let sum = tape.add(h, shortcut)?;
    tape.activation(sum, Activation::Relu)
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub blocks: Vec<ResidualBlock>,
}

impl Backbone {
    pub fn register(reg: &mut ParamRegistry, config: &BackboneConfig) -> Result<Self> {
        config.validate()?;
        let mut blocks = Vec::new();
        let mut c_in = config.in_channels;
        for (s, ((&c_out, &n), &stride)) in config
            .stage_channels
            .iter()
            .zip(&config.blocks_per_stage)
            .zip(&config.stage_strides)
            .enumerate()
        {
            for b in 0..n {
                let stride = if b == 0 { stride } else { 1 };
                blocks.push(ResidualBlock::register(reg, &format!("backbone.stage{s}.block{b}"), c_in, c_out, stride));
                c_in = c_out;
            }
        }
        Ok(Backbone {
            config: config.clone(),
            blocks,
        })
    }
}

/// Runs every residual block in order on `x[C_in×H×W]`, producing
/// `C_f × H/s × W/s` for total stride `s`.
pub fn backbone_forward<T: Scalar>(tape: &mut Tape<T>, x: Var, backbone: &Backbone, p: &ParamVars) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let s = backbone.config.total_stride();
    match shape.as_slice() {
        [c, h, w] if *c == backbone.config.in_channels => {
            if h % s != 0 || w % s != 0 {
                return shape_err(format!("input {h}×{w} is not divisible by backbone stride {s}"));
            }
        }
        _ => {
            return shape_err(format!(
                "backbone expects {} input channels, got {shape:?}",
                backbone.config.in_channels
            ))
        }
    }
    backbone
        .blocks
        .iter()
        .try_fold(x, |h, block| residual_block_forward(tape, h, block, p))
}

/// Pointwise linear map from backbone channels to the attention width.
#[derive(Clone, Debug)]
pub struct ChannelProjection {
    pub layer: ConvLayer,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ChannelProjection {
    pub fn register(reg: &mut ParamRegistry, name: &str, c_in: usize, d: usize) -> Self {
        ChannelProjection {
            layer: ConvLayer::register(reg, name, c_in, d, 1, 1),
            in_channels: c_in,
            out_channels: d,
        }
    }
}

pub fn channel_project<T: Scalar>(tape: &mut Tape<T>, f: Var, proj: &ChannelProjection, p: &ParamVars) -> Result<Var> {
    let shape = tape.shape(f);
    if shape.len() != 3 || shape[0] != proj.in_channels {
        return shape_err(format!(
            "channel projection expects {} channels, got {:?}",
            proj.in_channels, shape
        ));
    }
    proj.layer.forward(tape, f, p)
}
