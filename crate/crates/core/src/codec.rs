//! Encoder, CSTF-enhanced skips, hierarchical decoder and the softmax output head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{self, FusionMode, LN_EPS};
use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::params::{fan_in_uniform, Bound, ParamSet};
use crate::patching::{self, EmbedMode, PatchConfig};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub in_channels: usize,
    /// Channel width of each of the `n + 1` encoder stages.
    pub widths: Vec<usize>,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub fusion: FusionMode,
    pub patch: PatchConfig,
    /// Shared query/key/value width of both attention modules.
    pub attn_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            widths: vec![8, 16, 32, 32],
            height: 32,
            width: 32,
            classes: 2,
            fusion: FusionMode::Concat,
            patch: PatchConfig::default(),
            attn_dim: 8,
        }
    }
}

impl ModelConfig {
    /// Number of stages that pass through the CSTF block.
    pub fn cstf_stages(&self) -> usize {
        self.widths.len().saturating_sub(1)
    }

    /// Spatial size `(H/2^(i−1), W/2^(i−1))` of 1-based stage `i`.
    pub fn stage_size(&self, stage: usize) -> (usize, usize) {
        (self.height >> (stage - 1), self.width >> (stage - 1))
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.cstf_stages();
        if n < 1 {
            return Err(Error::Config("need at least two encoder stages (n ≥ 1)".into()));
        }
        if self.in_channels == 0 || self.widths.contains(&0) {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        let div = 1usize << n;
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(div) || !self.width.is_multiple_of(div) {
            return Err(Error::Config(format!(
                "input {}×{} must be divisible by 2^n = {div}",
                self.height, self.width
            )));
        }
        if self.classes < 2 {
            return Err(Error::Config("output head needs at least two classes".into()));
        }
        if self.attn_dim == 0 {
            return Err(Error::Config("attention width must be positive".into()));
        }
        let (h, w) = self.stage_size(n);
        if self.patch.grid == 0 || self.patch.grid > h.min(w) {
            return Err(Error::Config(format!(
                "token grid {} does not fit the smallest CSTF stage ({h}×{w})",
                self.patch.grid
            )));
        }
        if self.patch.mode == EmbedMode::Convolutional {
            for s in 1..=n {
                let (h, w) = self.stage_size(s);
                patching::conv_patch_kernel(h, w, self.patch.grid).map_err(|e| Error::Config(e.to_string()))?;
            }
        }
        Ok(())
    }

    /// Freshly initialized weights: fan-in uniform matrices, zero biases, unit LN gains.
    pub fn init_params<T: Real>(&self, seed: u64) -> Result<ParamSet<T>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        let n = self.cstf_stages();
        for (i, &c) in self.widths.iter().enumerate() {
            let s = i + 1;
            let c_in = if s == 1 {
                self.in_channels
            } else {
                let prev = self.widths[i - 1];
                p.insert(format!("enc.{s}.down.w"), fan_in_uniform(&[c, prev, 3, 3], prev * 9, &mut rng));
                p.insert(format!("enc.{s}.down.b"), Tensor::zeros(&[c]));
                c
            };
            p.insert(format!("enc.{s}.conv.w"), fan_in_uniform(&[c, c_in, 3, 3], c_in * 9, &mut rng));
            p.insert(format!("enc.{s}.conv.b"), Tensor::zeros(&[c]));
        }
        for s in 1..=n {
            let (side, _) = self.stage_size(s);
            patching::init_stage_params(&mut p, &mut rng, s, self.widths[s - 1], side, &self.patch)?;
        }
        attention::init_block_params(&mut p, &mut rng, &self.widths[..n], self.attn_dim, self.fusion);
        for s in 1..=n {
            let (c_out, c_in) = (self.widths[s - 1], self.widths[s]);
            p.insert(format!("dec.{s}.conv.w"), fan_in_uniform(&[c_out, c_in, 3, 3], c_in * 9, &mut rng));
            p.insert(format!("dec.{s}.conv.b"), Tensor::zeros(&[c_out]));
            p.insert(format!("dec.{s}.ln.g"), Tensor::ones(&[c_out]));
            p.insert(format!("dec.{s}.ln.b"), Tensor::zeros(&[c_out]));
        }
        let c1 = self.widths[0];
        p.insert("head.w", fan_in_uniform(&[self.classes, c1, 1, 1], c1, &mut rng));
        p.insert("head.b", Tensor::zeros(&[self.classes]));
        Ok(p)
    }
}

/// Runs the `n + 1` encoder stages; stage 1 keeps full resolution, each later stage halves it.
pub fn encoder_forward<T: Real>(tape: &mut Tape<T>, image: Var, bound: &Bound, cfg: &ModelConfig) -> Result<Vec<Var>> {
    let expect = [cfg.in_channels, cfg.height, cfg.width];
    if tape.shape(image) != expect {
        return Err(Error::Dimension {
            op: "encoder_forward",
            lhs: tape.shape(image).to_vec(),
            rhs: expect.to_vec(),
        });
    }
    let mut stages = Vec::with_capacity(cfg.widths.len());
    let mut x = image;
    for s in 1..=cfg.widths.len() {
        if s > 1 {
            let w = bound.get(&format!("enc.{s}.down.w"))?;
            let b = bound.get(&format!("enc.{s}.down.b"))?;
            x = tape.conv2d(x, w, Some(b), 2, 1)?;
        }
        let w = bound.get(&format!("enc.{s}.conv.w"))?;
        let b = bound.get(&format!("enc.{s}.conv.b"))?;
        let conv = tape.conv2d(x, w, Some(b), 1, 1)?;
        x = tape.gelu(conv);
        stages.push(x);
    }
    Ok(stages)
}

/// Lays `g² × C` tokens back onto a C×g×g grid and nearest-upsamples to `h×w`.
pub fn tokens_to_map<T: Real>(tape: &mut Tape<T>, tokens: Var, h: usize, w: usize) -> Result<Var> {
    let [p, c] = tape.value(tokens).dims2()?;
    let g = (p as f64).sqrt().round() as usize;
    if g * g != p {
        return Err(Error::Contract(format!("{p} tokens do not form a square grid")));
    }
    let cp = tape.transpose(tokens)?;
    let grid = tape.reshape(cp, &[c, g, g])?;
    tape.resize_nearest(grid, h, w)
}

/// `ConvBlock(UpSample(d_next)) + skip`, where `ConvBlock` is 3×3 conv → channel LN → GeLU.
pub fn decoder_stage<T: Real>(tape: &mut Tape<T>, d_next: Var, skip: Var, stage: usize, bound: &Bound) -> Result<Var> {
    let up = tape.upsample_nearest(d_next, 2)?;
    let w = bound.get(&format!("dec.{stage}.conv.w"))?;
    let b = bound.get(&format!("dec.{stage}.conv.b"))?;
    let conv = tape.conv2d(up, w, Some(b), 1, 1)?;
    if tape.shape(conv) != tape.shape(skip) {
        return Err(Error::Dimension {
            op: "decoder_stage skip",
            lhs: tape.shape(conv).to_vec(),
            rhs: tape.shape(skip).to_vec(),
        });
    }
    let g = bound.get(&format!("dec.{stage}.ln.g"))?;
    let lb = bound.get(&format!("dec.{stage}.ln.b"))?;
    let normed = tape.layer_norm_axis(conv, g, lb, 0, T::lit(LN_EPS))?;
    let act = tape.gelu(normed);
    tape.add(act, skip)
}

#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    pub logits: Var,
    pub probs: Var,
}

/// 1×1 convolution to class logits followed by a per-pixel softmax.
pub fn output_head<T: Real>(tape: &mut Tape<T>, features: Var, bound: &Bound) -> Result<HeadOutput> {
    let w = bound.get("head.w")?;
    let b = bound.get("head.b")?;
    let logits = tape.conv2d(features, w, Some(b), 1, 0)?;
    let probs = tape.softmax(logits, 0)?;
    Ok(HeadOutput { logits, probs })
}

#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub logits: Var,
    pub probs: Var,
    /// Encoder features of all `n + 1` stages.
    pub features: Vec<Var>,
    /// CSTF block output tokens of the first `n` stages.
    pub tokens: Vec<Var>,
    /// Skip maps handed to the decoder.
    pub skips: Vec<Var>,
    pub attention_weights: Vec<Var>,
}

/// Encoder → CSTF over the first `n` stages → decoder with enhanced skips → softmax head.
pub fn model_forward<T: Real>(tape: &mut Tape<T>, image: Var, bound: &Bound, cfg: &ModelConfig) -> Result<ModelOutput> {
    let (features, block) = encode_with_cstf(tape, image, bound, cfg)?;
    let n = cfg.cstf_stages();
    let mut skips = Vec::with_capacity(n);
    for s in 1..=n {
        let [_, h, w] = tape.value(features[s - 1]).dims3()?;
        let map = tokens_to_map(tape, block.tokens[s - 1], h, w)?;
        skips.push(tape.add(features[s - 1], map)?);
    }
    let mut d = features[n];
    for s in (1..=n).rev() {
        d = decoder_stage(tape, d, skips[s - 1], s, bound)?;
    }
    let head = output_head(tape, d, bound)?;
    Ok(ModelOutput {
        logits: head.logits,
        probs: head.probs,
        features,
        tokens: block.tokens,
        skips,
        attention_weights: block.attention_weights,
    })
}

/// Encoder features plus the CSTF block over the first `n` stages.
pub fn encode_with_cstf<T: Real>(
    tape: &mut Tape<T>,
    image: Var,
    bound: &Bound,
    cfg: &ModelConfig,
) -> Result<(Vec<Var>, attention::BlockOutput)> {
    cfg.validate()?;
    let features = encoder_forward(tape, image, bound, cfg)?;
    let n = cfg.cstf_stages();
    let tokens = (1..=n)
        .map(|s| patching::embed_stage(tape, bound, s, features[s - 1], &cfg.patch))
        .collect::<Result<Vec<_>>>()?;
    let block = attention::cstf_block(tape, &tokens, bound, cfg.fusion)?;
    Ok((features, block))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.cstf_stages(), 3);
        assert_eq!(cfg.stage_size(3), (8, 8));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = ModelConfig { height: 30, ..Default::default() };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg = ModelConfig { widths: vec![8], ..Default::default() };
        assert!(cfg.validate().is_err());
        cfg = ModelConfig { classes: 1, ..Default::default() };
        assert!(cfg.validate().is_err());
        cfg = ModelConfig::default();
        cfg.patch.grid = 9;
        assert!(cfg.validate().is_err());
        cfg.patch.grid = 3;
        cfg.patch.mode = EmbedMode::Convolutional;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn tokens_to_map_needs_square_count() {
        let mut tape = Tape::<f64>::new();
        let t = tape.constant(Tensor::zeros(&[6, 2]));
        assert!(matches!(tokens_to_map(&mut tape, t, 6, 6), Err(Error::Contract(_))));
    }

    #[test]
    fn image_size_is_checked() {
        let cfg = ModelConfig::default();
        let params = cfg.init_params::<f64>(0).unwrap();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let img = tape.constant(Tensor::zeros(&[1, 16, 16]));
        assert!(encoder_forward(&mut tape, img, &bound, &cfg).is_err());
    }
}
