//! The configurable U-Net family.
//!
//! Every encoder level is a [`ConvBlock`] whose first convolution has stride
//! 2, so a 128³ patch reaches 2³ after six levels. The decoder mirrors the
//! encoder with 2x2x2 transposed convolutions; each step concatenates the
//! skip features of the next finer level. Because level 0 already
//! downsamples, the last decoder step concatenates the network input to
//! get back to full resolution. Setting
//! [`ModelConfig::first_level_stride_one`] keeps level 0 at full resolution
//! instead.

pub mod checkpoint;
pub mod layers;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{self as ag, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub use layers::{
    AttentionGate, Conv, ConvBlock, Ctx, DropBlockConfig, InstanceNorm, ParamEntry, ParamId, ParamKind, ParamStore,
    ParamVars, UpConv,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Base,
    Residual,
    Attention,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// 5 with the foreground one-hot channel, 4 without.
    pub in_channels: usize,
    pub out_channels: usize,
    pub depth: usize,
    pub channels: Vec<usize>,
    pub variant: Variant,
    pub deep_supervision: bool,
    pub ds_heads: usize,
    pub drop_block: Option<DropBlockConfig>,
    pub negative_slope: f64,
    pub first_level_stride_one: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::best()
    }
}

impl ModelConfig {
    /// Depth 6 with 32..320 channels, no deep supervision, no one-hot input.
    pub fn baseline() -> Self {
        ModelConfig {
            in_channels: 4,
            out_channels: 3,
            depth: 6,
            channels: vec![32, 64, 128, 256, 320, 320],
            variant: Variant::Base,
            deep_supervision: false,
            ds_heads: 2,
            drop_block: None,
            negative_slope: 0.01,
            first_level_stride_one: false,
        }
    }

    /// Depth 7, widened channels, one-hot input and deep supervision.
    pub fn best() -> Self {
        ModelConfig {
            in_channels: 5,
            depth: 7,
            channels: vec![64, 96, 128, 192, 256, 384, 512],
            deep_supervision: true,
            ..Self::baseline()
        }
    }

    /// Small configuration for tests and desk-scale runs.
    pub fn tiny(depth: usize, channels: Vec<usize>) -> Self {
        ModelConfig {
            in_channels: 5,
            depth,
            channels,
            ..Self::baseline()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.depth == 0 {
            return fail("depth must be at least 1".into());
        }
        if self.channels.len() != self.depth {
            return fail(format!(
                "channel list has {} entries but depth is {}",
                self.channels.len(),
                self.depth
            ));
        }
        if self.channels.iter().any(|c| *c == 0) || self.in_channels == 0 || self.out_channels == 0 {
            return fail("channel counts must be positive".into());
        }
        if self.first_level_stride_one && self.depth < 2 {
            return fail("a stride-one first level needs depth >= 2".into());
        }
        if self.deep_supervision && self.ds_heads + 1 > self.decoder_levels() {
            return fail(format!(
                "{} deep supervision heads need more than {} decoder levels",
                self.ds_heads,
                self.decoder_levels()
            ));
        }
        if !self.negative_slope.is_finite() || self.negative_slope < 0.0 {
            return fail("negative slope must be finite and non-negative".into());
        }
        if let Some(db) = &self.drop_block {
            if db.block_size == 0 || !(0.0..1.0).contains(&db.drop_prob) {
                return fail("drop block needs block_size >= 1 and drop_prob in [0, 1)".into());
            }
        }
        Ok(())
    }

    /// Number of stride-2 encoder levels.
    pub fn downsamplings(&self) -> usize {
        if self.first_level_stride_one {
            self.depth - 1
        } else {
            self.depth
        }
    }

    pub fn decoder_levels(&self) -> usize {
        self.downsamplings()
    }

    /// Spatial sides must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << self.downsamplings()
    }

    pub fn check_input(&self, spatial: [usize; 3]) -> Result<()> {
        let d = self.divisor();
        if spatial.iter().any(|s| *s == 0 || s % d != 0) {
            return Err(Error::ShapeMismatch(format!(
                "spatial extent {spatial:?} is not divisible by {d} (2^{})",
                self.downsamplings()
            )));
        }
        Ok(())
    }
}

/// Raw logits from one forward pass; sigmoid is applied downstream.
pub struct NetworkOutput<T: Scalar> {
    pub main: Var<T>,
    /// Deep supervision logits at 1/2, 1/4, ... of the main resolution.
    pub ds: Vec<Var<T>>,
}

#[derive(Clone, Debug)]
struct DecoderStep {
    up: UpConv,
    gate: Option<AttentionGate>,
    block: ConvBlock,
}

#[derive(Clone, Debug)]
pub struct Model<T: Scalar = f32> {
    config: ModelConfig,
    params: ParamStore<T>,
    encoder: Vec<ConvBlock>,
    /// Ordered coarse to fine.
    decoder: Vec<DecoderStep>,
    head: Conv,
    ds_heads: Vec<Conv>,
}

/// Builds a model and initialises it with Kaiming-normal weights.
pub fn build_model<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<Model<T>> {
    let mut model = Model::new(cfg)?;
    crate::trainer::init_weights(&mut model, seed);
    Ok(model)
}

impl<T: Scalar> Model<T> {
    /// Builds the layer graph with default (unit scale, zero) parameters.
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let residual = cfg.variant == Variant::Residual;
        let encoder: Vec<ConvBlock> = (0..cfg.depth)
            .map(|l| {
                let cin = if l == 0 { cfg.in_channels } else { cfg.channels[l - 1] };
                let stride = if l == 0 && cfg.first_level_stride_one { 1 } else { 2 };
                ConvBlock::new(
                    &mut params,
                    &format!("enc{l}"),
                    cin,
                    cfg.channels[l],
                    stride,
                    residual,
                    cfg.drop_block.is_some(),
                )
            })
            .collect();

        // (skip channels, output channels) from fine to coarse
        let mut skips: Vec<(usize, usize)> = Vec::new();
        if !cfg.first_level_stride_one {
            skips.push((cfg.in_channels, cfg.channels[0]));
        }
        skips.extend((0..cfg.depth - 1).map(|l| (cfg.channels[l], cfg.channels[l])));

        let mut decoder = Vec::new();
        let mut prev = cfg.channels[cfg.depth - 1];
        for (j, &(skip_ch, out_ch)) in skips.iter().enumerate().rev() {
            let name = format!("dec{j}");
            let up = UpConv::new(&mut params, &format!("{name}.up"), prev, out_ch);
            let gate = (cfg.variant == Variant::Attention)
                .then(|| AttentionGate::new(&mut params, &format!("{name}.gate"), skip_ch, prev));
            let block = ConvBlock::new(&mut params, &name, out_ch + skip_ch, out_ch, 1, residual, false);
            decoder.push(DecoderStep { up, gate, block });
            prev = out_ch;
        }
        let head = Conv::new(&mut params, "head", prev, cfg.out_channels, 1, 1);
        let n_dec = decoder.len();
        let ds_heads = if cfg.deep_supervision {
            (1..=cfg.ds_heads)
                .map(|i| {
                    let ch = skips[i].1;
                    debug_assert!(i < n_dec);
                    Conv::new(&mut params, &format!("ds{i}"), ch, cfg.out_channels, 1, 1)
                })
                .collect()
        } else {
            Vec::new()
        };
        Ok(Model {
            config: cfg.clone(),
            params,
            encoder,
            decoder,
            head,
            ds_heads,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn count_parameters(&self) -> usize {
        self.params.count_parameters()
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            head: self.head.clone(),
            ds_heads: self.ds_heads.clone(),
        }
    }

    /// Runs the network inside an existing context.
    pub fn forward_ctx(&self, ctx: &Ctx<T>, x: &Var<T>) -> Result<NetworkOutput<T>> {
        let shape = x.shape();
        if shape.len() != 5 || shape[1] != self.config.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "expected input [B, {}, h, w, d], got {shape:?}",
                self.config.in_channels
            )));
        }
        self.config.check_input(x.value().spatial())?;

        let mut skips: Vec<Var<T>> = Vec::with_capacity(self.config.depth + 1);
        if !self.config.first_level_stride_one {
            skips.push(x.clone());
        }
        let mut h = x.clone();
        for (l, block) in self.encoder.iter().enumerate() {
            h = block.forward(ctx, &h);
            if l + 1 < self.encoder.len() {
                skips.push(h.clone());
            }
        }

        let n_dec = self.decoder.len();
        let mut ds_taps: Vec<Option<Var<T>>> = vec![None; self.ds_heads.len()];
        for (i, step) in self.decoder.iter().enumerate() {
            let skip = skips.pop().expect("one skip per decoder step");
            let skip = match &step.gate {
                Some(gate) => gate.forward(ctx, &skip, &h),
                None => skip,
            };
            let up = step.up.forward(ctx, &h);
            h = step.block.forward(ctx, &ag::concat_channels(&up, &skip));
            // distance from the full-resolution output
            let level = n_dec - 1 - i;
            if level >= 1 && level <= ds_taps.len() {
                ds_taps[level - 1] = Some(h.clone());
            }
        }
        let main = self.head.forward(ctx, &h);
        let ds = self
            .ds_heads
            .iter()
            .zip(ds_taps)
            .map(|(head, tap)| head.forward(ctx, &tap.expect("tapped decoder level")))
            .collect();
        Ok(NetworkOutput { main, ds })
    }

    /// Evaluation-mode forward pass; no gradients are tracked.
    pub fn forward(&self, x: &Tensor<T>) -> Result<NetworkOutput<T>> {
        let ctx = Ctx::new(self.params.vars(false), self.config.negative_slope);
        self.forward_ctx(&ctx, &Var::constant(x.clone()))
    }

    /// Training-mode context: tracked parameters and, when configured,
    /// drop-block sampling seeded by `seed`.
    pub fn train_ctx(&self, seed: u64) -> Ctx<T> {
        let ctx = Ctx::new(self.params.vars(true), self.config.negative_slope);
        match self.config.drop_block {
            Some(cfg) => ctx.with_drop_block(cfg, seed),
            None => ctx,
        }
    }

    /// Main-head sigmoid probabilities for a batch, `[B, out, ...]`.
    pub fn predict_proba(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let out = self.forward(x)?;
        drop(out.ds);
        Ok(out.main.into_value().map(|v| ag::sigmoid_scalar(*v)))
    }

    /// Fills every parameter with small random values; used by tests that
    /// need a non-degenerate network without the Kaiming machinery.
    pub fn randomize(&mut self, seed: u64, scale: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for e in self.params.entries_mut() {
            for v in e.value.data_mut() {
                *v = T::lit(rng.random_range(-scale..scale));
            }
        }
    }
}

#[cfg(test)]
mod tests;
