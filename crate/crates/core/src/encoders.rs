//! Frozen stand-ins for the two vision encoders and the text embedding table.
//!
//! The low-resolution branch is ViT-like: non-overlapping 14-pixel patches,
//! each mean-pooled and mapped to `C_L` channels by a fixed random linear map.
//! The high-resolution branch is ConvNeXt-like: a 4×4 patchify stage followed
//! by three 2×2 stride-2 stages with `tanh`, giving grids at strides
//! 4, 8, 16 and 32. All weights come from a seeded generator and never train.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::SyntheticImage;
use crate::rng::{glorot, uniform, SeedTree};
use crate::tensor::Tensor;

pub const STRIDE_LOW: usize = 14;
pub const STRIDE_HIGH: usize = 32;
/// Strides of the high-resolution stages, finest first.
pub const STAGE_STRIDES: [usize; 4] = [4, 8, 16, 32];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub low_res: usize,
    pub high_res: usize,
    pub stride_low: usize,
    pub stride_high: usize,
    pub channels_low: usize,
    pub channels_high: usize,
    /// Channel width of each high-resolution stage; the last must equal
    /// `channels_high`.
    pub stage_channels: Vec<usize>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            low_res: 336,
            high_res: 768,
            stride_low: STRIDE_LOW,
            stride_high: STRIDE_HIGH,
            channels_low: 32,
            channels_high: 48,
            stage_channels: vec![12, 24, 36, 48],
        }
    }
}

impl EncoderConfig {
    /// Picks resolutions with equal token counts: the low resolution is
    /// rounded down to a multiple of the low stride and the high resolution
    /// follows from the resulting grid side.
    pub fn with_adjusted_resolutions(mut self, low_request: usize, high_request: usize) -> Result<Self> {
        let grid = low_request / self.stride_low;
        if grid == 0 {
            return Err(Error::Config(format!(
                "low resolution {low_request} is below one {}-pixel patch",
                self.stride_low
            )));
        }
        self.low_res = grid * self.stride_low;
        self.high_res = grid * self.stride_high;
        if self.high_res != high_request {
            log::debug!(
                "high resolution adjusted {high_request} -> {} for a {grid}x{grid} token grid",
                self.high_res
            );
        }
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride_low == 0 || !self.low_res.is_multiple_of(self.stride_low) || self.low_res == 0 {
            return Err(Error::Config(format!(
                "low_res {} must be a positive multiple of stride_low {}",
                self.low_res, self.stride_low
            )));
        }
        if self.stride_high != STRIDE_HIGH {
            return Err(Error::Config(format!(
                "stride_high must be {STRIDE_HIGH} for the four-stage encoder, got {}",
                self.stride_high
            )));
        }
        if !self.high_res.is_multiple_of(self.stride_high) || self.high_res == 0 {
            return Err(Error::Config(format!(
                "high_res {} must be a positive multiple of stride_high {}",
                self.high_res, self.stride_high
            )));
        }
        let (nl, nh) = (self.low_grid(), self.high_grid());
        if nl != nh {
            return Err(Error::Config(format!(
                "token-count equality violated: low grid {nl}x{nl} vs high grid {nh}x{nh}"
            )));
        }
        if self.stage_channels.len() != STAGE_STRIDES.len() {
            return Err(Error::Config(format!(
                "expected {} stage widths, got {}",
                STAGE_STRIDES.len(),
                self.stage_channels.len()
            )));
        }
        if self.stage_channels.last() != Some(&self.channels_high) {
            return Err(Error::Config("last stage width must equal channels_high".into()));
        }
        if self.channels_low == 0 || self.stage_channels.contains(&0) {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        Ok(())
    }

    pub fn low_grid(&self) -> usize {
        self.low_res / self.stride_low
    }

    pub fn high_grid(&self) -> usize {
        self.high_res / self.stride_high
    }

    /// Tokens per image, `N`.
    pub fn tokens(&self) -> usize {
        self.low_grid() * self.low_grid()
    }

    /// Channel width of the stride-4 pyramid (sum of stage widths).
    pub fn pyramid_channels(&self) -> usize {
        self.stage_channels.iter().sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    Flat,
    Spatial { h: usize, w: usize },
}

/// Encoder output with its stride and layout.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    /// `N × C` when flat, `h × w × C` when spatial.
    pub tokens: Tensor,
    pub stride: usize,
    pub layout: Layout,
    /// Side of the (square) image the grid was computed from.
    pub source_extent: usize,
}

impl FeatureGrid {
    pub fn channels(&self) -> usize {
        *self
            .tokens
            .shape()
            .last()
            .expect("feature grids are never scalars")
    }

    pub fn token_count(&self) -> usize {
        self.tokens.len() / self.channels().max(1)
    }

    /// `N × C` view regardless of layout.
    pub fn flat(&self) -> Result<Tensor> {
        self.tokens.reshape(vec![self.token_count(), self.channels()])
    }

    pub fn spatial_dims(&self) -> Option<(usize, usize)> {
        match self.layout {
            Layout::Spatial { h, w } => Some((h, w)),
            Layout::Flat => None,
        }
    }
}

/// Seeded frozen weights for both vision branches.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticEncoders {
    cfg: EncoderConfig,
    low_w: Tensor,
    low_b: Tensor,
    stage_w: Vec<Tensor>,
    stage_b: Vec<Tensor>,
}

impl SyntheticEncoders {
    pub fn new(cfg: &EncoderConfig, seeds: &SeedTree) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seeds.stream("encoders.low");
        let low_w = glorot(&mut rng, 3, cfg.channels_low);
        let low_b = uniform(&mut rng, vec![cfg.channels_low], 0.1);
        let mut rng = seeds.stream("encoders.high");
        let mut stage_w = Vec::new();
        let mut stage_b = Vec::new();
        let mut cin = 3;
        for (s, &cout) in cfg.stage_channels.iter().enumerate() {
            let kernel = if s == 0 { 4 } else { 2 };
            stage_w.push(glorot(&mut rng, kernel * kernel * cin, cout));
            stage_b.push(uniform(&mut rng, vec![cout], 0.1));
            cin = cout;
        }
        Ok(Self {
            cfg: cfg.clone(),
            low_w,
            low_b,
            stage_w,
            stage_b,
        })
    }

    /// Same weights with every bias zeroed.
    pub fn without_bias(mut self) -> Self {
        self.low_b = Tensor::zeros(self.low_b.shape().to_vec());
        for b in &mut self.stage_b {
            *b = Tensor::zeros(b.shape().to_vec());
        }
        self
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Named weight tensors, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("encoders.low.w".to_string(), &self.low_w),
            ("encoders.low.b".to_string(), &self.low_b),
        ];
        for (s, (w, b)) in self.stage_w.iter().zip(&self.stage_b).enumerate() {
            out.push((format!("encoders.stage{s}.w"), w));
            out.push((format!("encoders.stage{s}.b"), b));
        }
        out
    }

    /// Low-resolution tokens `E_L`, flat `N × C_L`.
    pub fn encode_low(&self, img: &SyntheticImage) -> Result<FeatureGrid> {
        let res = self.cfg.low_res;
        let p = self.cfg.stride_low;
        if !res.is_multiple_of(p) {
            return Err(Error::Config(format!("low_res {res} not divisible by {p}")));
        }
        let pixels = img.resize(res, res)?;
        let g = res / p;
        let mut pooled = vec![0.0; g * g * 3];
        let px = pixels.data();
        for y in 0..res {
            for x in 0..res {
                let cell = (y / p) * g + x / p;
                for c in 0..3 {
                    pooled[cell * 3 + c] += px[(y * res + x) * 3 + c];
                }
            }
        }
        let norm = (p * p) as f64;
        pooled.iter_mut().for_each(|v| *v /= norm);
        let pooled = Tensor::from_parts(vec![g * g, 3], pooled);
        let tokens = add_row_bias(pooled.matmul(&self.low_w)?, &self.low_b);
        Ok(FeatureGrid {
            tokens,
            stride: p,
            layout: Layout::Flat,
            source_extent: res,
        })
    }

    /// High-resolution stage outputs at strides 4, 8, 16, 32.
    pub fn encode_high(&self, img: &SyntheticImage) -> Result<Vec<FeatureGrid>> {
        let res = self.cfg.high_res;
        if !res.is_multiple_of(STRIDE_HIGH) {
            return Err(Error::Config(format!(
                "high_res {res} not divisible by {STRIDE_HIGH}"
            )));
        }
        let mut current = img.resize(res, res)?;
        let mut stages = Vec::with_capacity(STAGE_STRIDES.len());
        for (s, (w, b)) in self.stage_w.iter().zip(&self.stage_b).enumerate() {
            let kernel = if s == 0 { 4 } else { 2 };
            current = patch_conv(&current, kernel, w, b)?;
            let (h, gw, _) = current.dims3()?;
            stages.push(FeatureGrid {
                tokens: current.clone(),
                stride: STAGE_STRIDES[s],
                layout: Layout::Spatial { h, w: gw },
                source_extent: res,
            });
        }
        Ok(stages)
    }
}

/// Non-overlapping `k × k` stride-`k` convolution with `tanh`.
/// Patch vectors are ordered `(dy, dx, channel)`.
fn patch_conv(input: &Tensor, k: usize, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (h, wd, c) = input.dims3()?;
    let (oh, ow) = (h / k, wd / k);
    let mut patches = Vec::with_capacity(oh * ow * k * k * c);
    let d = input.data();
    for oy in 0..oh {
        for ox in 0..ow {
            for dy in 0..k {
                let row = (oy * k + dy) * wd;
                for dx in 0..k {
                    let base = (row + ox * k + dx) * c;
                    patches.extend_from_slice(&d[base..base + c]);
                }
            }
        }
    }
    let patches = Tensor::from_parts(vec![oh * ow, k * k * c], patches);
    let out = add_row_bias(patches.matmul(w)?, b).map(f64::tanh);
    out.reshape(vec![oh, ow, w.shape()[1]])
}

fn add_row_bias(mut x: Tensor, b: &Tensor) -> Tensor {
    let c = b.len();
    for row in x.data_mut().chunks_mut(c) {
        for (v, bv) in row.iter_mut().zip(b.data()) {
            *v += bv;
        }
    }
    x
}

pub const DEFAULT_VOCAB: usize = 64;
pub const DEFAULT_MODEL_DIM: usize = 32;

/// Seeded embedding table standing in for the language model's input layer.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedder {
    table: Tensor,
}

impl TextEmbedder {
    pub fn new(vocab: usize, dim: usize, seeds: &SeedTree) -> Self {
        let mut rng = seeds.stream("text.embedding");
        Self {
            table: Tensor::from_fn(vec![vocab, dim], |_| rng.gen_range(-0.5..0.5)),
        }
    }

    pub fn vocab(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.table.shape()[1]
    }

    pub fn table(&self) -> &Tensor {
        &self.table
    }

    /// `E_T`: one row per token id.
    pub fn embed(&self, ids: &[usize]) -> Result<Tensor> {
        let (vocab, dim) = (self.vocab(), self.dim());
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= vocab {
                return Err(Error::OutOfVocab { id, vocab });
            }
            out.extend_from_slice(self.table.row(id));
        }
        Ok(Tensor::from_parts(vec![ids.len(), dim], out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> EncoderConfig {
        EncoderConfig {
            low_res: 56,
            high_res: 128,
            ..EncoderConfig::default()
        }
    }

    #[test]
    fn default_config_has_576_tokens() {
        let cfg = EncoderConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.tokens(), 576);
        assert_eq!(cfg.high_grid(), 24);
    }

    #[test]
    fn validation_names_violated_constraint() {
        let cfg = EncoderConfig {
            low_res: 224,
            high_res: 448,
            ..EncoderConfig::default()
        };
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("token-count equality"), "{err}");
        let bad = EncoderConfig {
            low_res: 330,
            ..EncoderConfig::default()
        };
        assert!(bad.validate().unwrap_err().to_string().contains("stride_low"));
    }

    #[test]
    fn adjuster_equalizes_token_counts() {
        let cfg = EncoderConfig::default()
            .with_adjusted_resolutions(224, 448)
            .unwrap();
        assert_eq!((cfg.low_res, cfg.high_res), (224, 512));
        cfg.validate().unwrap();
        let cfg = EncoderConfig::default()
            .with_adjusted_resolutions(336, 768)
            .unwrap();
        assert_eq!((cfg.low_res, cfg.high_res), (336, 768));
    }

    #[test]
    fn stage_extents_follow_strides() {
        let cfg = small();
        let enc = SyntheticEncoders::new(&cfg, &SeedTree::new(1)).unwrap();
        let img = SyntheticImage::noise(2, 90, 70).unwrap();
        let low = enc.encode_low(&img).unwrap();
        assert_eq!(low.tokens.shape(), &[16, 32]);
        let stages = enc.encode_high(&img).unwrap();
        let strides: Vec<usize> = stages.iter().map(|s| s.stride).collect();
        assert_eq!(strides, STAGE_STRIDES);
        for s in &stages {
            let (h, w) = s.spatial_dims().unwrap();
            assert_eq!(h * s.stride, cfg.high_res);
            assert_eq!(w * s.stride, cfg.high_res);
        }
        assert_eq!(stages[3].token_count(), low.token_count());
    }

    #[test]
    fn zero_image_zero_bias_gives_zero_features() {
        let cfg = small();
        let enc = SyntheticEncoders::new(&cfg, &SeedTree::new(1))
            .unwrap()
            .without_bias();
        let img = SyntheticImage::new(Tensor::zeros(vec![64, 64, 3])).unwrap();
        assert!(enc
            .encode_low(&img)
            .unwrap()
            .tokens
            .data()
            .iter()
            .all(|&v| v == 0.0));
        for s in enc.encode_high(&img).unwrap() {
            assert!(s.tokens.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn encoders_are_pure() {
        let cfg = small();
        let img = SyntheticImage::noise(9, 64, 64).unwrap();
        let a = SyntheticEncoders::new(&cfg, &SeedTree::new(4)).unwrap();
        let b = SyntheticEncoders::new(&cfg, &SeedTree::new(4)).unwrap();
        assert_eq!(a.encode_low(&img).unwrap(), b.encode_low(&img).unwrap());
        assert_eq!(a.encode_high(&img).unwrap(), b.encode_high(&img).unwrap());
    }

    #[test]
    fn text_embedding_lookup() {
        let emb = TextEmbedder::new(DEFAULT_VOCAB, DEFAULT_MODEL_DIM, &SeedTree::new(0));
        assert_eq!(emb.embed(&[]).unwrap().shape(), &[0, DEFAULT_MODEL_DIM]);
        let t = emb.embed(&[5, 9, 5]).unwrap();
        assert_eq!(t.row(0), t.row(2));
        assert!(matches!(emb.embed(&[64]), Err(Error::OutOfVocab { id: 64, .. })));
        let other = TextEmbedder::new(DEFAULT_VOCAB, DEFAULT_MODEL_DIM, &SeedTree::new(1));
        assert_ne!(emb.table().checksum(), other.table().checksum());
    }
}
