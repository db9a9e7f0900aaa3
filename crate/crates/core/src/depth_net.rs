//! Bottom-up-top-down depth network.
//!
//! A four-stage convolutional patch-merging encoder produces features at
//! 1/4, 1/8, 1/16 and 1/32 resolution. A pyramid pooling head turns the top
//! feature into the first prediction `X`; four decoder levels (top to
//! bottom) refine it with a neural window CRF block, and between levels the
//! prediction is upscaled by pixel rearrangement followed by a 1×1
//! projection. A 1×1 head with a scaled sigmoid produces depth at 1/4
//! resolution.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::neural_crf::{CrfOptimConfig, NeuralCrfBlock};
use crate::params::{Bound, Initializer, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const LEVELS: usize = 4;
/// Patch size in pixels of each encoder level, finest first.
pub const PATCH_FACTORS: [usize; LEVELS] = [4, 8, 16, 32];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecoderKind {
    /// Neural window CRF blocks.
    NeuralCrf,
    /// Baseline: two 3×3 convolutions per level in place of the CRF blocks.
    Convolutional,
}

impl DecoderKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DecoderKind::NeuralCrf => "crf",
            DecoderKind::Convolutional => "conv",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "crf" => Some(DecoderKind::NeuralCrf),
            "conv" => Some(DecoderKind::Convolutional),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub window_size: usize,
    /// Attention heads per decoder level, top to bottom.
    pub heads: [usize; LEVELS],
    pub head_dim: usize,
    /// Encoder widths at 1/4, 1/8, 1/16, 1/32.
    pub encoder_widths: [usize; LEVELS],
    pub ppm_scales: Vec<usize>,
    pub max_depth: f64,
    pub seed: u64,
    pub decoder: DecoderKind,
    pub mlp_ratio: usize,
    pub scale_logits: bool,
    pub qk_layer_norm: bool,
}

impl Default for ModelConfig {
    /// Paper head structure (32/16/8/4 heads of 32 channels, `N = 7`,
    /// scales 1/2/3/6) with desk-scale encoder widths.
    fn default() -> Self {
        ModelConfig {
            window_size: 7,
            heads: [32, 16, 8, 4],
            head_dim: 32,
            encoder_widths: [64, 128, 256, 512],
            ppm_scales: alloc::vec![1, 2, 3, 6],
            max_depth: 10.0,
            seed: 0,
            decoder: DecoderKind::NeuralCrf,
            mlp_ratio: 4,
            scale_logits: true,
            qk_layer_norm: true,
        }
    }
}

impl ModelConfig {
    /// Default with the wider encoder.
    pub fn paper_faithful() -> Self {
        ModelConfig { encoder_widths: [128, 256, 512, 1024], ..Self::default() }
    }

    /// Small network that trains on one CPU core in minutes.
    pub fn compact() -> Self {
        ModelConfig {
            window_size: 4,
            heads: [4, 2, 2, 2],
            head_dim: 8,
            encoder_widths: [16, 24, 32, 48],
            ..Self::default()
        }
    }

    pub fn levels(&self) -> usize {
        LEVELS
    }

    /// Prediction width `heads[level]·d_h` (level 0 is the top).
    pub fn prediction_width(&self, level: usize) -> usize {
        self.heads[level] * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Contract(msg));
        if self.window_size == 0 {
            return bad("window_size must be at least 1".into());
        }
        if self.head_dim == 0 || self.heads.contains(&0) || self.encoder_widths.contains(&0) || self.mlp_ratio == 0 {
            return bad("head counts, head width, encoder widths and mlp ratio must be positive".into());
        }
        if self.ppm_scales.is_empty() || self.ppm_scales.contains(&0) {
            return bad("ppm_scales must be a non-empty list of positive sizes".into());
        }
        if !(self.max_depth > 0.0 && self.max_depth.is_finite()) {
            return bad(format!("max_depth must be positive, got {}", self.max_depth));
        }
        for level in 0..LEVELS - 1 {
            if !self.prediction_width(level).is_multiple_of(4) {
                return bad(format!("prediction width of level {level} must be divisible by 4 for rearrangement"));
            }
        }
        Ok(())
    }

    /// Drops pooling scales larger than the top feature map of an `h×w`
    /// input.
    pub fn fit_ppm_scales(&mut self, height: usize, width: usize) {
        let top = (height / 32).min(width / 32);
        self.ppm_scales.retain(|&s| s <= top);
        if self.ppm_scales.is_empty() {
            self.ppm_scales.push(1);
        }
    }

    fn crf_config(&self, level: usize) -> CrfOptimConfig {
        CrfOptimConfig {
            feature_channels: self.encoder_widths[LEVELS - 1 - level],
            heads: self.heads[level],
            head_dim: self.head_dim,
            window_size: self.window_size,
            mlp_ratio: self.mlp_ratio,
            scale_logits: self.scale_logits,
            qk_layer_norm: self.qk_layer_norm,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    kernel: ParamId,
    bias: ParamId,
}

impl Conv {
    fn new(store: &mut ParamStore, init: &mut Initializer, name: &str, cin: usize, cout: usize) -> Self {
        let fan = 9 * cin;
        Conv {
            kernel: store.insert(format!("{name}.kernel"), init.fan_in(&[3, 3, cin, cout], fan)),
            bias: store.insert(format!("{name}.bias"), init.fan_in(&[cout], fan)),
        }
    }

    fn apply(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.conv2d(x, p.var(self.kernel), p.var(self.bias))
    }
}

/// Per-pixel affine map over channels (a 1×1 convolution).
#[derive(Clone, Copy, Debug)]
struct Pointwise {
    weight: ParamId,
    bias: ParamId,
}

impl Pointwise {
    fn new(store: &mut ParamStore, init: &mut Initializer, name: &str, cin: usize, cout: usize) -> Self {
        Pointwise {
            weight: store.insert(format!("{name}.weight"), init.fan_in(&[cin, cout], cin)),
            bias: store.insert(format!("{name}.bias"), init.fan_in(&[cout], cin)),
        }
    }

    fn apply(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let [h, w, c] = *tape.value(x).extents() else {
            return Err(shape_err!("pointwise map expects H×W×C"));
        };
        let flat = tape.reshape(x, &[h * w, c])?;
        let y = tape.matmul(flat, p.var(self.weight))?;
        let y = tape.add_bias(y, p.var(self.bias))?;
        let cout = tape.value(y).extents()[1];
        tape.reshape(y, &[h, w, cout])
    }
}

#[derive(Clone, Debug)]
struct EncoderStage {
    /// Space-to-depth steps before the merge convolution.
    unshuffles: usize,
    merge: Conv,
    res_a: Conv,
    res_b: Conv,
}

impl EncoderStage {
    fn apply(&self, tape: &mut Tape, p: &Bound, mut x: Var) -> Result<Var> {
        for _ in 0..self.unshuffles {
            x = tape.pixel_unrearrange(x)?;
        }
        let x = self.merge.apply(tape, p, x)?;
        let x = tape.gelu(x);
        let r = self.res_a.apply(tape, p, x)?;
        let r = tape.gelu(r);
        let r = self.res_b.apply(tape, p, r)?;
        tape.add(x, r)
    }
}

#[allow(clippy::large_enum_variant)]
#[derive(Clone, Debug)]
enum LevelDecoder {
    Crf(NeuralCrfBlock),
    Conv { first: Conv, second: Conv },
}

#[derive(Clone, Debug)]
struct DecoderLevel {
    decoder: LevelDecoder,
    /// 1×1 projection after rearrangement (absent at the bottom level).
    project: Option<Pointwise>,
}

/// Encoder outputs at 1/4, 1/8, 1/16 and 1/32 resolution.
#[derive(Clone, Copy, Debug)]
pub struct FeaturePyramid {
    pub levels: [Var; LEVELS],
}

/// Network structure; parameters live in a separate [`ParamStore`].
#[derive(Clone, Debug)]
pub struct DepthNet {
    config: ModelConfig,
    encoder: Vec<EncoderStage>,
    ppm: Conv,
    levels: Vec<DecoderLevel>,
    head: Pointwise,
}

/// A network together with its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub net: DepthNet,
    pub params: ParamStore,
}

fn check_finite(tape: &Tape, v: Var, stage: &str) -> Result<()> {
    if tape.value(v).all_finite() {
        Ok(())
    } else {
        Err(Error::Numeric { stage: stage.to_string() })
    }
}

impl DepthNet {
    /// Builds the structure and a freshly initialised parameter store
    /// (seeded by `config.seed`).
    pub fn new(config: ModelConfig) -> Result<(DepthNet, ParamStore)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Initializer::new(config.seed);
        let w = config.encoder_widths;

        let mut encoder = Vec::with_capacity(LEVELS);
        let mut cin = 3;
        for (i, &width) in w.iter().enumerate() {
            let unshuffles = if i == 0 { 2 } else { 1 };
            let merged = cin * if i == 0 { 16 } else { 4 };
            encoder.push(EncoderStage {
                unshuffles,
                merge: Conv::new(&mut store, &mut init, &format!("encoder.{i}.merge"), merged, width),
                res_a: Conv::new(&mut store, &mut init, &format!("encoder.{i}.res_a"), width, width),
                res_b: Conv::new(&mut store, &mut init, &format!("encoder.{i}.res_b"), width, width),
            });
            cin = width;
        }

        let top = w[LEVELS - 1];
        let ppm = Conv::new(&mut store, &mut init, "ppm.conv", top * (1 + config.ppm_scales.len()), config.prediction_width(0));

        let mut levels = Vec::with_capacity(LEVELS);
        for level in 0..LEVELS {
            let cx = config.prediction_width(level);
            let features = w[LEVELS - 1 - level];
            let decoder = match config.decoder {
                DecoderKind::NeuralCrf => {
                    LevelDecoder::Crf(NeuralCrfBlock::new(&mut store, &format!("decoder.{level}.crf"), config.crf_config(level), &mut init))
                }
                DecoderKind::Convolutional => LevelDecoder::Conv {
                    first: Conv::new(&mut store, &mut init, &format!("decoder.{level}.conv_a"), features + cx, cx),
                    second: Conv::new(&mut store, &mut init, &format!("decoder.{level}.conv_b"), cx, cx),
                },
            };
            let project = (level + 1 < LEVELS).then(|| {
                Pointwise::new(&mut store, &mut init, &format!("decoder.{level}.project"), cx / 4, config.prediction_width(level + 1))
            });
            levels.push(DecoderLevel { decoder, project });
        }
        let head = Pointwise::new(&mut store, &mut init, "head", config.prediction_width(LEVELS - 1), 1);
        Ok((DepthNet { config, encoder, ppm, levels, head }, store))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Four-level feature pyramid of an `H×W×3` image (`H`, `W` multiples
    /// of 32).
    pub fn encode(&self, tape: &mut Tape, p: &Bound, image: Var) -> Result<FeaturePyramid> {
        let (h, w) = match *tape.value(image).extents() {
            [h, w, 3] => (h, w),
            ref e => return Err(shape_err!("image must be H×W×3, got {e:?}")),
        };
        if h % 32 != 0 || w % 32 != 0 {
            return Err(shape_err!("image extents {h}×{w} must be multiples of 32; pad the input first"));
        }
        let mut x = image;
        let mut out = [image; LEVELS];
        for (i, stage) in self.encoder.iter().enumerate() {
            x = stage.apply(tape, p, x)?;
            check_finite(tape, x, &format!("encoder stage {i}"))?;
            out[i] = x;
        }
        Ok(FeaturePyramid { levels: out })
    }

    /// Pyramid pooling over the top feature: average-pool at each scale,
    /// resize back by nearest neighbour, concatenate with the input and map
    /// to the top prediction width with a 3×3 convolution.
    pub fn ppm_head(&self, tape: &mut Tape, p: &Bound, top: Var) -> Result<Var> {
        let [h, w, _] = *tape.value(top).extents() else {
            return Err(shape_err!("ppm input must be H×W×C"));
        };
        if let Some(&s) = self.config.ppm_scales.iter().find(|&&s| s > h.min(w)) {
            return Err(shape_err!("ppm scale {s} exceeds the {h}×{w} top feature map"));
        }
        let mut parts = alloc::vec![top];
        for &s in &self.config.ppm_scales {
            let pooled = tape.avg_pool_to(top, s)?;
            parts.push(tape.upsample_nearest(pooled, h, w)?);
        }
        let joined = tape.concat_last(&parts)?;
        self.ppm.apply(tape, p, joined)
    }

    /// Depth map at 1/4 resolution, `H/4 × W/4`, values in `(0, max_depth)`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, image: Var) -> Result<Var> {
        let pyramid = self.encode(tape, p, image)?;
        let mut x = self.ppm_head(tape, p, pyramid.levels[LEVELS - 1])?;
        check_finite(tape, x, "ppm head")?;
        for (level, dec) in self.levels.iter().enumerate() {
            let features = pyramid.levels[LEVELS - 1 - level];
            x = match &dec.decoder {
                LevelDecoder::Crf(block) => block.forward(tape, p, features, x)?,
                LevelDecoder::Conv { first, second } => {
                    let joined = tape.concat_last(&[features, x])?;
                    let y = first.apply(tape, p, joined)?;
                    let y = tape.gelu(y);
                    second.apply(tape, p, y)?
                }
            };
            check_finite(tape, x, &format!("decoder level {level}"))?;
            if let Some(project) = &dec.project {
                x = tape.pixel_rearrange(x)?;
                x = project.apply(tape, p, x)?;
                check_finite(tape, x, &format!("upscale after level {level}"))?;
            }
        }
        let y = self.head.apply(tape, p, x)?;
        let y = tape.sigmoid(y);
        let y = tape.scale(y, self.config.max_depth);
        let [h, w, _] = *tape.value(y).extents() else { unreachable!() };
        let depth = tape.reshape(y, &[h, w])?;
        check_finite(tape, depth, "depth head")?;
        Ok(depth)
    }
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let (net, params) = DepthNet::new(config)?;
        Ok(Model { net, params })
    }

    pub fn config(&self) -> &ModelConfig {
        self.net.config()
    }

    /// Inference on one image without gradient bookkeeping beyond one tape.
    pub fn predict(&self, image: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let x = tape.leaf(image.clone());
        let depth = self.net.forward(&mut tape, &p, x)?;
        Ok(tape.value(depth).clone())
    }
}
