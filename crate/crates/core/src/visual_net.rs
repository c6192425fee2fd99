//! Two-dimensional convolutional visual encoder.
//!
//! A VGG-style stack of "same" convolutions grouped into stages, each stage
//! ending in max pooling by its downsample factor. The last activation is the
//! feature grid `V` (one `D`-vector per cell). After attention pooling, the
//! context vector `z` goes through two rectify-then-project blocks to give the
//! visual embedding `f_v`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Conv2d, Linear};
use crate::raster::Raster;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisualStage {
    pub channels: usize,
    pub convs: usize,
    pub kernel_size: usize,
    pub downsample: usize,
}

impl VisualStage {
    pub const fn new(channels: usize, convs: usize, kernel_size: usize, downsample: usize) -> Self {
        Self {
            channels,
            convs,
            kernel_size,
            downsample,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualConfig {
    pub stages: Vec<VisualStage>,
    pub embedding_dim: usize,
    pub fc_hidden: usize,
    /// Per-channel mean subtracted from `[0, 1]` pixels.
    pub channel_mean: [f64; 3],
}

impl Default for VisualConfig {
    fn default() -> Self {
        Self::vgg16()
    }
}

impl VisualConfig {
    /// VGG-16 through `conv5_3`: 13 convolutions, total downsample 16, 512 channels.
    pub fn vgg16() -> Self {
        Self {
            stages: vec![
                VisualStage::new(64, 2, 3, 2),
                VisualStage::new(128, 2, 3, 2),
                VisualStage::new(256, 3, 3, 2),
                VisualStage::new(512, 3, 3, 2),
                VisualStage::new(512, 3, 3, 1),
            ],
            embedding_dim: 1000,
            fc_hidden: 1000,
            channel_mean: [0.485, 0.456, 0.406],
        }
    }

    /// Two stages, downsample 4, 16-channel grid.
    pub fn toy() -> Self {
        Self {
            stages: vec![VisualStage::new(16, 1, 3, 2), VisualStage::new(32, 1, 3, 2)],
            embedding_dim: 32,
            fc_hidden: 32,
            channel_mean: [0.5, 0.5, 0.5],
        }
    }

    pub fn grid_channels(&self) -> usize {
        self.stages.last().map_or(0, |s| s.channels)
    }

    pub fn downsample_factor(&self) -> usize {
        self.stages.iter().map(|s| s.downsample).product()
    }

    pub fn grid_dims(&self, height: usize, width: usize) -> (usize, usize) {
        let mut h = height;
        let mut w = width;
        for s in &self.stages {
            h /= s.downsample;
            w /= s.downsample;
        }
        (h, w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("visual encoder needs at least one stage".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.channels == 0 || s.convs == 0 || s.downsample == 0 {
                return Err(Error::Config(format!("visual stage {i} has a zero size")));
            }
            if s.kernel_size % 2 == 0 {
                return Err(Error::Config(format!(
                    "visual stage {i} kernel {} must be odd for same padding",
                    s.kernel_size
                )));
            }
        }
        if self.embedding_dim == 0 || self.fc_hidden == 0 {
            return Err(Error::Config("visual embedding sizes must be positive".into()));
        }
        Ok(())
    }
}

/// `V`: `rows x cols` cells, each a `dim`-vector, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub rows: usize,
    pub cols: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl FeatureGrid {
    pub fn new(rows: usize, cols: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols == 0 {
            return Err(Error::Empty("feature grid has no cells".into()));
        }
        if data.len() != rows * cols * dim {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {rows}x{cols}x{dim} grid",
                data.len()
            )));
        }
        Ok(Self {
            rows,
            cols,
            dim,
            data,
        })
    }

    /// Builds a grid from explicit cell vectors laid out on `rows x cols`.
    pub fn from_cells(rows: usize, cols: usize, cells: &[Vec<f64>]) -> Result<Self> {
        let dim = cells.first().map_or(0, Vec::len);
        if cells.iter().any(|c| c.len() != dim) {
            return Err(Error::DimensionMismatch("cells of unequal length".into()));
        }
        Self::new(rows, cols, dim, cells.concat())
    }

    /// Number of cells `M`.
    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    pub fn cell(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// `f_v`.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualEmbedding(pub Vec<f64>);

impl VisualEmbedding {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisualNetParams {
    pub config: VisualConfig,
    pub stages: Vec<Vec<Conv2d>>,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl VisualNetParams {
    pub fn init(config: &VisualConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut in_ch = 3;
        let mut stages = Vec::with_capacity(config.stages.len());
        for s in &config.stages {
            let mut convs = Vec::with_capacity(s.convs);
            for _ in 0..s.convs {
                convs.push(Conv2d::init(in_ch, s.channels, s.kernel_size, rng));
                in_ch = s.channels;
            }
            stages.push(convs);
        }
        let fc1 = Linear::init(in_ch, config.fc_hidden, rng);
        let fc2 = Linear::init(config.fc_hidden, config.embedding_dim, rng);
        Ok(Self {
            config: config.clone(),
            stages,
            fc1,
            fc2,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            stages: self
                .stages
                .iter()
                .map(|st| {
                    st.iter()
                        .map(|c| Conv2d::zeros(c.in_channels, c.out_channels, c.kernel))
                        .collect()
                })
                .collect(),
            fc1: Linear::zeros(self.fc1.in_dim, self.fc1.out_dim),
            fc2: Linear::zeros(self.fc2.in_dim, self.fc2.out_dim),
        }
    }

    pub(crate) fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        for (s, stage) in self.stages.iter().enumerate() {
            for (c, conv) in stage.iter().enumerate() {
                out.push((format!("visual.conv{}_{}.weight", s + 1, c + 1), conv.weight.as_slice()));
                out.push((format!("visual.conv{}_{}.bias", s + 1, c + 1), conv.bias.as_slice()));
            }
        }
        out.push(("visual.fc1.weight".into(), self.fc1.weight.as_slice()));
        out.push(("visual.fc1.bias".into(), self.fc1.bias.as_slice()));
        out.push(("visual.fc2.weight".into(), self.fc2.weight.as_slice()));
        out.push(("visual.fc2.bias".into(), self.fc2.bias.as_slice()));
        out
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = Vec::new();
        for stage in &mut self.stages {
            for conv in stage {
                out.push(&mut conv.weight);
                out.push(&mut conv.bias);
            }
        }
        out.push(&mut self.fc1.weight);
        out.push(&mut self.fc1.bias);
        out.push(&mut self.fc2.weight);
        out.push(&mut self.fc2.bias);
        out
    }
}

struct ConvCache {
    h: usize,
    w: usize,
    cols: Vec<f64>,
    activation: Vec<f64>,
}

struct StageCache {
    convs: Vec<ConvCache>,
    pool_idx: Option<Vec<usize>>,
}

pub(crate) struct VisualCache {
    stages: Vec<StageCache>,
    pub grid: FeatureGrid,
}

impl VisualCache {
    pub(crate) fn fingerprint(&self, hasher: &mut crate::model::RegionHasher) {
        for s in &self.stages {
            for c in &s.convs {
                hasher.mask(&c.activation);
            }
            if let Some(idx) = &s.pool_idx {
                hasher.indices(idx);
            }
        }
    }
}

pub(crate) struct EmbedCache {
    a1: Vec<f64>,
    a2: Vec<f64>,
    pub f_v: Vec<f64>,
}

impl EmbedCache {
    pub(crate) fn fingerprint(&self, hasher: &mut crate::model::RegionHasher) {
        hasher.mask(&self.a1);
        hasher.mask(&self.a2);
    }
}

fn to_planar(frame: &Raster, mean: &[f64; 3]) -> Vec<f64> {
    let hw = frame.height * frame.width;
    let mut out = vec![0.0; 3 * hw];
    for (p, px) in frame.data.chunks_exact(3).enumerate() {
        for c in 0..3 {
            out[c * hw + p] = px[c] - mean[c];
        }
    }
    out
}

pub(crate) fn forward_cached(frame: &Raster, params: &VisualNetParams) -> Result<VisualCache> {
    if frame.channels != 3 {
        return Err(Error::InvalidArgument(format!(
            "visual encoder expects 3 channels, got {}",
            frame.channels
        )));
    }
    let factor = params.config.downsample_factor();
    let (gh, gw) = params.config.grid_dims(frame.height, frame.width);
    if gh == 0 || gw == 0 {
        return Err(Error::InputTooSmall(format!(
            "{}x{} frame is smaller than the downsample factor {factor}",
            frame.height, frame.width
        )));
    }
    let mut x = to_planar(frame, &params.config.channel_mean);
    let (mut h, mut w) = (frame.height, frame.width);
    let mut stages = Vec::with_capacity(params.stages.len());
    for (convs, spec) in params.stages.iter().zip(&params.config.stages) {
        let mut conv_caches = Vec::with_capacity(convs.len());
        for conv in convs {
            let (mut y, cols) = conv.forward(&x, h, w);
            nn::relu_inplace(&mut y);
            x = y.clone();
            conv_caches.push(ConvCache {
                h,
                w,
                cols,
                activation: y,
            });
        }
        let channels = spec.channels;
        let pool_idx = if spec.downsample > 1 {
            let (p, idx) = nn::max_pool2d(&x, channels, h, w, spec.downsample);
            x = p;
            h /= spec.downsample;
            w /= spec.downsample;
            Some(idx)
        } else {
            None
        };
        stages.push(StageCache {
            convs: conv_caches,
            pool_idx,
        });
    }
    let d = params.config.grid_channels();
    let m = h * w;
    let mut data = vec![0.0; m * d];
    for c in 0..d {
        for i in 0..m {
            data[i * d + c] = x[c * m + i];
        }
    }
    Ok(VisualCache {
        stages,
        grid: FeatureGrid::new(h, w, d, data)?,
    })
}

/// Back-propagates `dL/dV` (row-major `M x D`) into `grad`.
pub(crate) fn backward_grid(
    cache: &VisualCache,
    params: &VisualNetParams,
    d_grid: &[f64],
    grad: &mut VisualNetParams,
) {
    let g = &cache.grid;
    let (m, d) = (g.cells(), g.dim);
    let mut dy = vec![0.0; m * d];
    for i in 0..m {
        for c in 0..d {
            dy[c * m + i] = d_grid[i * d + c];
        }
    }
    for s in (0..params.stages.len()).rev() {
        let sc = &cache.stages[s];
        if let Some(idx) = &sc.pool_idx {
            let last = sc.convs.last().expect("stage has convs");
            dy = nn::max_pool_backward(&dy, idx, last.activation.len());
        }
        for c in (0..params.stages[s].len()).rev() {
            let cc = &sc.convs[c];
            nn::relu_backward(&cc.activation, &mut dy);
            dy = params.stages[s][c].backward(&cc.cols, &dy, cc.h, cc.w, &mut grad.stages[s][c]);
        }
    }
}

pub(crate) fn embed_cached(z: &[f64], params: &VisualNetParams) -> EmbedCache {
    let mut a1 = z.to_vec();
    nn::relu_inplace(&mut a1);
    let mut a2 = params.fc1.forward(&a1);
    nn::relu_inplace(&mut a2);
    let f_v = params.fc2.forward(&a2);
    EmbedCache { a1, a2, f_v }
}

/// Back-propagates `dL/df_v`; returns `dL/dz`.
pub(crate) fn embed_backward(
    cache: &EmbedCache,
    params: &VisualNetParams,
    df_v: &[f64],
    grad: &mut VisualNetParams,
) -> Vec<f64> {
    let mut da2 = params.fc2.backward(&cache.a2, df_v, &mut grad.fc2);
    nn::relu_backward(&cache.a2, &mut da2);
    let mut dz = params.fc1.backward(&cache.a1, &da2, &mut grad.fc1);
    nn::relu_backward(&cache.a1, &mut dz);
    dz
}

/// Computes the feature grid of an RGB frame with values in `[0, 1]`.
pub fn visual_forward(frame: &Raster, params: &VisualNetParams) -> Result<FeatureGrid> {
    Ok(forward_cached(frame, params)?.grid)
}

/// Maps an attention-pooled context vector to the shared embedding space.
pub fn embed_context(z: &[f64], params: &VisualNetParams) -> Result<VisualEmbedding> {
    if z.len() != params.fc1.in_dim {
        return Err(Error::DimensionMismatch(format!(
            "context vector has {} entries, embedding head expects {}",
            z.len(),
            params.fc1.in_dim
        )));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("context vector".into()));
    }
    Ok(VisualEmbedding(embed_cached(z, params).f_v))
}
