//! One-dimensional convolutional sound encoder.
//!
//! A stack of strided convolutions over the raw waveform, globally average
//! pooled over time into the sound embedding `f_s`, followed by two
//! rectify-then-project blocks producing the sound context `h` that the
//! attention module compares against visual cells.
//!
//! Every convolution except the last is followed by rectification and
//! non-overlapping max pooling. The last convolution is linear so that `f_s`
//! can take either sign, like the visual embedding it is compared with.
//!
//! The default layer table follows the eight-layer SoundNet shape with the
//! final width set to 1000. The original kernel sizes and strides are not
//! pinned down anywhere we rely on, so treat [`SoundNetConfig::soundnet`] as
//! an informed stand-in rather than a faithful reproduction.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio::WaveformWindow;
use crate::error::{Error, Result};
use crate::nn::{self, Conv1d, Linear};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub pool_size: usize,
}

impl ConvLayerSpec {
    pub const fn new(out_channels: usize, kernel_size: usize, stride: usize, pool_size: usize) -> Self {
        Self {
            out_channels,
            kernel_size,
            stride,
            pool_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SoundNetConfig {
    pub conv_layers: Vec<ConvLayerSpec>,
    /// Width of the first fully connected layer of the context head.
    pub fc_hidden: usize,
    pub context_dim: usize,
}

impl Default for SoundNetConfig {
    fn default() -> Self {
        Self::soundnet()
    }
}

impl SoundNetConfig {
    /// Eight convolutions in the SoundNet lineage, 1000-d `f_s`, 512-d `h`.
    ///
    /// | layer | channels | kernel | stride | pool |
    /// |-------|----------|--------|--------|------|
    /// | conv1 | 16       | 64     | 2      | 8    |
    /// | conv2 | 32       | 32     | 2      | 8    |
    /// | conv3 | 64       | 16     | 2      | 1    |
    /// | conv4 | 128      | 8      | 2      | 1    |
    /// | conv5 | 256      | 4      | 2      | 4    |
    /// | conv6 | 512      | 4      | 1      | 1    |
    /// | conv7 | 1024     | 4      | 1      | 1    |
    /// | conv8 | 1000     | 4      | 1      | 1    |
    ///
    /// Convolutions are unpadded, so the last three layers use stride 1 to
    /// keep the receptive field at 91166 samples (about 4.1 s at 22050 Hz).
    pub fn soundnet() -> Self {
        Self {
            conv_layers: vec![
                ConvLayerSpec::new(16, 64, 2, 8),
                ConvLayerSpec::new(32, 32, 2, 8),
                ConvLayerSpec::new(64, 16, 2, 1),
                ConvLayerSpec::new(128, 8, 2, 1),
                ConvLayerSpec::new(256, 4, 2, 4),
                ConvLayerSpec::new(512, 4, 1, 1),
                ConvLayerSpec::new(1024, 4, 1, 1),
                ConvLayerSpec::new(1000, 4, 1, 1),
            ],
            fc_hidden: 512,
            context_dim: 512,
        }
    }

    /// Three-layer encoder for desk-scale experiments.
    pub fn toy() -> Self {
        Self {
            conv_layers: vec![
                ConvLayerSpec::new(8, 16, 4, 4),
                ConvLayerSpec::new(16, 8, 2, 2),
                ConvLayerSpec::new(32, 4, 1, 1),
            ],
            fc_hidden: 32,
            context_dim: 32,
        }
    }

    pub fn final_conv_channels(&self) -> usize {
        self.conv_layers.last().map_or(0, |l| l.out_channels)
    }

    pub fn validate(&self) -> Result<()> {
        let Some(last) = self.conv_layers.last() else {
            return Err(Error::Config("sound encoder needs at least one conv layer".into()));
        };
        if last.pool_size != 1 {
            return Err(Error::Config(
                "the final sound conv layer feeds global pooling and must not pool".into(),
            ));
        }
        for (i, l) in self.conv_layers.iter().enumerate() {
            if l.out_channels == 0 || l.kernel_size == 0 || l.stride == 0 || l.pool_size == 0 {
                return Err(Error::Config(format!("sound conv layer {i} has a zero size")));
            }
        }
        if self.fc_hidden == 0 || self.context_dim == 0 {
            return Err(Error::Config("sound context head sizes must be positive".into()));
        }
        Ok(())
    }

    /// Shortest waveform for which the last convolution emits one sample.
    pub fn min_input_len(&self) -> usize {
        let mut need = 1usize;
        for (i, l) in self.conv_layers.iter().enumerate().rev() {
            let pool = if i + 1 == self.conv_layers.len() { 1 } else { l.pool_size };
            let conv_out = need * pool;
            need = (conv_out - 1) * l.stride + l.kernel_size;
        }
        need
    }
}

/// `f_s`: the temporally pooled output of the last convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct SoundEmbedding(pub Vec<f64>);

/// `h`: the output of the context head.
#[derive(Debug, Clone, PartialEq)]
pub struct SoundContext(pub Vec<f64>);

impl SoundEmbedding {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl SoundContext {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SoundNetParams {
    pub config: SoundNetConfig,
    pub convs: Vec<Conv1d>,
    pub fc9: Linear,
    pub fc10: Linear,
}

impl SoundNetParams {
    pub fn init(config: &SoundNetConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut in_ch = 1;
        let mut convs = Vec::with_capacity(config.conv_layers.len());
        for l in &config.conv_layers {
            convs.push(Conv1d::init(in_ch, l.out_channels, l.kernel_size, l.stride, rng));
            in_ch = l.out_channels;
        }
        let fc9 = Linear::init(in_ch, config.fc_hidden, rng);
        let fc10 = Linear::init(config.fc_hidden, config.context_dim, rng);
        Ok(Self {
            config: config.clone(),
            convs,
            fc9,
            fc10,
        })
    }

    /// Same shapes, all zeros; used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            convs: self
                .convs
                .iter()
                .map(|c| Conv1d::zeros(c.in_channels, c.out_channels, c.kernel, c.stride))
                .collect(),
            fc9: Linear::zeros(self.fc9.in_dim, self.fc9.out_dim),
            fc10: Linear::zeros(self.fc10.in_dim, self.fc10.out_dim),
        }
    }

    pub(crate) fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            out.push((format!("sound.conv{}.weight", i + 1), c.weight.as_slice()));
            out.push((format!("sound.conv{}.bias", i + 1), c.bias.as_slice()));
        }
        out.push(("sound.fc9.weight".into(), self.fc9.weight.as_slice()));
        out.push(("sound.fc9.bias".into(), self.fc9.bias.as_slice()));
        out.push(("sound.fc10.weight".into(), self.fc10.weight.as_slice()));
        out.push(("sound.fc10.bias".into(), self.fc10.bias.as_slice()));
        out
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = Vec::new();
        for c in &mut self.convs {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        out.push(&mut self.fc9.weight);
        out.push(&mut self.fc9.bias);
        out.push(&mut self.fc10.weight);
        out.push(&mut self.fc10.bias);
        out
    }
}

struct ConvCache {
    in_len: usize,
    conv_len: usize,
    cols: Vec<f64>,
    /// Post-rectification conv output (pre-activation for the last layer).
    activation: Vec<f64>,
    pool_idx: Option<Vec<usize>>,
}

pub(crate) struct SoundCache {
    layers: Vec<ConvCache>,
    pub f_s: Vec<f64>,
    a9: Vec<f64>,
    a10: Vec<f64>,
    pub h: Vec<f64>,
}

impl SoundCache {
    /// Feeds the piecewise-linear region (rectifier signs, pooling winners)
    /// into `hasher`.
    pub(crate) fn fingerprint(&self, hasher: &mut crate::model::RegionHasher) {
        let n = self.layers.len();
        for (i, l) in self.layers.iter().enumerate() {
            if i + 1 < n {
                hasher.mask(&l.activation);
            }
            if let Some(idx) = &l.pool_idx {
                hasher.indices(idx);
            }
        }
        hasher.mask(&self.a9);
        hasher.mask(&self.a10);
    }
}

pub(crate) fn forward_cached(window: &[f64], params: &SoundNetParams) -> Result<SoundCache> {
    let min_len = params.config.min_input_len();
    if window.len() < min_len {
        return Err(Error::InputTooSmall(format!(
            "waveform of {} samples is shorter than the encoder's receptive field ({min_len})",
            window.len()
        )));
    }
    let n_layers = params.convs.len();
    let mut x = window.to_vec();
    let mut len = window.len();
    let mut layers = Vec::with_capacity(n_layers);
    for (i, (conv, spec)) in params.convs.iter().zip(&params.config.conv_layers).enumerate() {
        let in_len = len;
        let (mut y, cols) = conv.forward(&x, len);
        let conv_len = conv.output_len(len).expect("checked by min_input_len");
        let mut pool_idx = None;
        if i + 1 == n_layers {
            x = y.clone();
            len = conv_len;
        } else {
            nn::relu_inplace(&mut y);
            if spec.pool_size > 1 {
                let (p, idx) = nn::max_pool1d(&y, conv.out_channels, conv_len, spec.pool_size);
                pool_idx = Some(idx);
                x = p;
                len = conv_len / spec.pool_size;
            } else {
                x = y.clone();
                len = conv_len;
            }
        }
        layers.push(ConvCache {
            in_len,
            conv_len,
            cols,
            activation: y,
            pool_idx,
        });
    }
    let channels = params.config.final_conv_channels();
    let f_s = nn::row_means(&x, channels, len);
    let mut a9 = f_s.clone();
    nn::relu_inplace(&mut a9);
    let mut a10 = params.fc9.forward(&a9);
    nn::relu_inplace(&mut a10);
    let h = params.fc10.forward(&a10);
    Ok(SoundCache {
        layers,
        f_s,
        a9,
        a10,
        h,
    })
}

/// Back-propagates `dL/df_s` and `dL/dh` into `grad`; returns `dL/dwaveform`.
pub(crate) fn backward(
    cache: &SoundCache,
    params: &SoundNetParams,
    df_s: &[f64],
    dh: &[f64],
    grad: &mut SoundNetParams,
) -> Vec<f64> {
    let mut da10 = params.fc10.backward(&cache.a10, dh, &mut grad.fc10);
    nn::relu_backward(&cache.a10, &mut da10);
    let mut da9 = params.fc9.backward(&cache.a9, &da10, &mut grad.fc9);
    nn::relu_backward(&cache.a9, &mut da9);
    let dfs: Vec<f64> = df_s.iter().zip(&da9).map(|(a, b)| a + b).collect();

    let n = params.convs.len();
    let last = &cache.layers[n - 1];
    let t = last.conv_len;
    let mut dy: Vec<f64> = dfs
        .iter()
        .flat_map(|&g| std::iter::repeat(g / t as f64).take(t))
        .collect();
    let mut dx = Vec::new();
    for i in (0..n).rev() {
        let layer = &cache.layers[i];
        let conv = &params.convs[i];
        if i + 1 < n {
            if let Some(idx) = &layer.pool_idx {
                dy = nn::max_pool_backward(&dy, idx, layer.activation.len());
            }
            nn::relu_backward(&layer.activation, &mut dy);
        }
        dx = conv.backward(&layer.cols, &dy, layer.in_len, &mut grad.convs[i]);
        dy = dx.clone();
    }
    dx
}

fn check_finite(params: &SoundNetParams) -> Result<()> {
    for (name, t) in params.tensors() {
        if t.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("parameter tensor {name}")));
        }
    }
    Ok(())
}

/// Encodes a waveform window into `(f_s, h)`.
pub fn sound_forward(
    window: &WaveformWindow,
    params: &SoundNetParams,
) -> Result<(SoundEmbedding, SoundContext)> {
    check_finite(params)?;
    let cache = forward_cached(&window.samples, params)?;
    Ok((SoundEmbedding(cache.f_s), SoundContext(cache.h)))
}

/// Mean over the time axis of a `channels x time` grid.
pub fn global_average_pool(activation: &[f64], channels: usize) -> Result<Vec<f64>> {
    if channels == 0 || activation.is_empty() {
        return Err(Error::Empty("activation has an empty time axis".into()));
    }
    if activation.len() % channels != 0 {
        return Err(Error::DimensionMismatch(format!(
            "{} values do not form {channels} rows",
            activation.len()
        )));
    }
    Ok(nn::row_means(activation, channels, activation.len() / channels))
}
