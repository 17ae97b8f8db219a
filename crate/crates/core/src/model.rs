//! The hybrid classifier: residual backbone → 1×1 projection → shifted-window
//! attention blocks → global average pooling → linear head → softmax.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{backbone_forward, channel_project, Backbone, BackboneConfig, ChannelProjection};
use crate::error::{Error, Result};
use crate::params::{Init, ParamId, ParamRegistry, ParamSet, ParamVars};
use crate::swin::{swin_block_forward, SwinBlock, WindowLayout};
use crate::tensor::{shape_err, Scalar, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct HybridModelConfig {
    /// Square input side in pixels.
    pub input_size: usize,
    pub backbone: BackboneConfig,
    pub embed_dim: usize,
    pub heads: usize,
    pub window: usize,
    pub shift: usize,
    pub num_swin_blocks: usize,
    pub num_classes: usize,
    pub seed: u64,
    /// Learned per-window logit bias in every attention head.
    pub position_bias: bool,
}

impl Default for HybridModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl HybridModelConfig {
    /// 64-pixel input, stride-4 backbone, d=32, 2 heads, 4×4 windows shifted
    /// by 2, two attention blocks, two classes.
    pub fn desk() -> Self {
        HybridModelConfig {
            input_size: 64,
            backbone: BackboneConfig::desk(),
            embed_dim: 32,
            heads: 2,
            window: 4,
            shift: 2,
            num_swin_blocks: 2,
            num_classes: 2,
            seed: 0,
            position_bias: false,
        }
    }

    /// 224-pixel input, stride-16 backbone, 14×14 tokens in 7×7 windows.
    pub fn full_scale(num_classes: usize) -> Self {
        HybridModelConfig {
            input_size: 224,
            backbone: BackboneConfig::full_scale(),
            embed_dim: 128,
            heads: 4,
            window: 7,
            shift: 3,
            num_swin_blocks: 2,
            num_classes,
            seed: 0,
            position_bias: false,
        }
    }

    pub fn feature_size(&self) -> usize {
        self.input_size / self.backbone.total_stride()
    }

    pub fn layout(&self) -> Result<WindowLayout> {
        let f = self.feature_size();
        WindowLayout::new(f, f, self.window, self.shift).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        let s = self.backbone.total_stride();
        if self.input_size == 0 || self.input_size % s != 0 {
            return Err(Error::Config(format!(
                "input size {} is not divisible by backbone stride {s}",
                self.input_size
            )));
        }
        if self.window == 0 || self.feature_size() % self.window != 0 {
            return Err(Error::Config(format!(
                "feature map side {} is not divisible by window {}",
                self.feature_size(),
                self.window
            )));
        }
        if self.shift >= self.window {
            return Err(Error::Config(format!("shift {} must be below window {}", self.shift, self.window)));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        if self.heads == 0 || self.embed_dim == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed dim {} must be a positive multiple of {} heads",
                self.embed_dim, self.heads
            )));
        }
        Ok(())
    }

    /// Same architecture, ignoring the initialization seed.
    pub fn same_architecture(&self, other: &HybridModelConfig) -> bool {
        HybridModelConfig { seed: 0, ..self.clone() } == HybridModelConfig { seed: 0, ..other.clone() }
    }
}

/// Where each layer's parameters live in the flat [`ParamSet`].
#[derive(Clone, Debug)]
pub struct ModelLayout {
    pub registry: ParamRegistry,
    pub backbone: Backbone,
    pub projection: ChannelProjection,
    pub blocks: Vec<SwinBlock>,
    pub head_weight: ParamId,
    pub head_bias: ParamId,
}

impl ModelLayout {
    pub fn new(cfg: &HybridModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut reg = ParamRegistry::new();
        let backbone = Backbone::register(&mut reg, &cfg.backbone)?;
        let projection = ChannelProjection::register(&mut reg, "projection", cfg.backbone.out_channels(), cfg.embed_dim);
        let layout = cfg.layout()?;
        let blocks = (0..cfg.num_swin_blocks)
            .map(|i| SwinBlock::register(&mut reg, &format!("swin{i}"), layout, cfg.embed_dim, cfg.heads, cfg.position_bias))
            .collect::<Result<Vec<_>>>()?;
        let head_weight = reg.add("head.weight", vec![cfg.num_classes, cfg.embed_dim], Init::FanIn(cfg.embed_dim));
        let head_bias = reg.add("head.bias", vec![cfg.num_classes], Init::FanIn(cfg.embed_dim));
        Ok(ModelLayout {
            registry: reg,
            backbone,
            projection,
            blocks,
            head_weight,
            head_bias,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub probabilities: Vec<f64>,
    pub label: usize,
    pub confidence: f64,
}

impl Prediction {
    /// Picks the most probable class; ties go to the lowest index.
    pub fn from_probabilities(probabilities: Vec<f64>) -> Self {
        let mut label = 0;
        for (i, &p) in probabilities.iter().enumerate() {
            if p > probabilities[label] {
                label = i;
            }
        }
        let confidence = probabilities[label];
        Prediction {
            probabilities,
            label,
            confidence,
        }
    }
}

/// Tape handles produced by one recorded forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub embedding: Var,
    pub logits: Var,
    pub probabilities: Var,
}

#[derive(Clone, Debug)]
pub struct HybridModel<T = f32> {
    config: HybridModelConfig,
    layout: ModelLayout,
    params: ParamSet<T>,
}

impl HybridModel<f32> {
    /// Seeded initialization: identical configs give identical parameters.
    pub fn init(config: &HybridModelConfig) -> Result<Self> {
        let layout = ModelLayout::new(config)?;
        let params = layout.registry.initialize(&mut ChaCha8Rng::seed_from_u64(config.seed));
        Ok(HybridModel {
            config: config.clone(),
            layout,
            params,
        })
    }
}

impl<T: Scalar> HybridModel<T> {
    pub fn from_params(config: &HybridModelConfig, params: ParamSet<T>) -> Result<Self> {
        let layout = ModelLayout::new(config)?;
        layout.registry.validate(&params)?;
        if let Some(i) = params.tensors().iter().position(|t| !t.is_finite()) {
            return Err(Error::Numeric(format!("parameter {} is not finite", params.names()[i])));
        }
        Ok(HybridModel {
            config: config.clone(),
            layout,
            params,
        })
    }

    pub fn config(&self) -> &HybridModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &ModelLayout {
        &self.layout
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamSet<T> {
        self.params
    }

    pub fn cast<U: Scalar>(&self) -> HybridModel<U> {
        HybridModel {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: self.params.cast(),
        }
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.config.backbone.in_channels, self.config.input_size, self.config.input_size]
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape != self.input_shape() {
            return shape_err(format!("model expects input {:?}, got {shape:?}", self.input_shape()));
        }
        Ok(())
    }

    /// Pooled embedding `z` of an input already on the tape.
    pub fn record_embedding(&self, tape: &mut Tape<T>, p: &ParamVars, x: Var) -> Result<Var> {
        self.check_input(tape.shape(x))?;
        let f = backbone_forward(tape, x, &self.layout.backbone, p)?;
        let mut h = channel_project(tape, f, &self.layout.projection, p)?;
        for block in &self.layout.blocks {
            h = swin_block_forward(tape, h, block, p)?.output;
        }
        tape.global_avg_pool(h)
    }

    /// `softmax(W z + b)` for an embedding already on the tape.
    pub fn record_head(&self, tape: &mut Tape<T>, p: &ParamVars, z: Var) -> Result<(Var, Var)> {
        let d = self.config.embed_dim;
        if tape.shape(z) != [d] {
            return shape_err(format!("embedding must have {d} entries, got {:?}", tape.shape(z)));
        }
        let col = tape.reshape(z, vec![d, 1])?;
        let wz = tape.matmul(p[self.layout.head_weight], col)?;
        let wz = tape.reshape(wz, vec![self.config.num_classes])?;
        let logits = tape.add(wz, p[self.layout.head_bias])?;
        let probs = tape.softmax(logits)?;
        Ok((logits, probs))
    }

    /// Full forward pass on a tape. `dropout`, when given, multiplies the
    /// pooled embedding elementwise (an already-scaled keep mask).
    pub fn record(&self, tape: &mut Tape<T>, p: &ParamVars, x: Var, dropout: Option<&Tensor<T>>) -> Result<ForwardVars> {
        let mut z = self.record_embedding(tape, p, x)?;
        let embedding = z;
        if let Some(mask) = dropout {
            z = tape.mul_const(z, mask)?;
        }
        let (logits, probabilities) = self.record_head(tape, p, z)?;
        Ok(ForwardVars {
            embedding,
            logits,
            probabilities,
        })
    }

    pub fn probabilities(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = self.record(&mut tape, &p, xv, None)?;
        Ok(tape.value(out.probabilities).clone())
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Prediction> {
        let p = self.probabilities(x)?;
        Ok(Prediction::from_probabilities(p.data().iter().map(|v| v.as_f64()).collect()))
    }

    pub fn embed(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let z = self.record_embedding(&mut tape, &p, xv)?;
        Ok(tape.value(z).clone())
    }

    /// Class probabilities from a pooled embedding.
    pub fn head_proba(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let zv = tape.constant(z.clone());
        let (_, probs) = self.record_head(&mut tape, &p, zv)?;
        Ok(tape.value(probs).clone())
    }

    /// Per-sample forward over a batch, order preserved. Samples are spread
    /// over the current rayon pool; each result is computed exactly as
    /// [`forward`](Self::forward) would.
    pub fn classify_batch(&self, xs: &[Tensor<T>]) -> Result<Vec<Prediction>> {
        if let Some(first) = xs.first() {
            if let Some(bad) = xs.iter().find(|x| x.shape() != first.shape()) {
                return shape_err(format!("batch mixes shapes {:?} and {:?}", first.shape(), bad.shape()));
            }
        }
        xs.par_iter().map(|x| self.forward(x)).collect()
    }
}
