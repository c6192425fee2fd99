//! Sound-guided localization: cosine correlation between every visual cell
//! and the sound context, softmax attention over the grid, the attention
//! pooled context vector, and pixel-resolution response maps.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::visual_net::FeatureGrid;

/// How correlation scores are formed from normalized inner products.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mechanism {
    /// Plain cosine similarity, range `[-1, 1]`.
    #[default]
    Cos,
    /// Cosine similarity clipped at zero, range `[0, 1]`.
    Relu,
}

impl std::str::FromStr for Mechanism {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cos" => Ok(Self::Cos),
            "relu" => Ok(Self::Relu),
            other => Err(Error::InvalidArgument(format!(
                "unknown attention mechanism '{other}' (expected cos or relu)"
            ))),
        }
    }
}

/// A map defined on the feature grid.
pub trait GridMap {
    fn rows(&self) -> usize;
    fn cols(&self) -> usize;
    fn values(&self) -> &[f64];

    /// Index of the largest value (first one on ties).
    fn argmax(&self) -> usize {
        let v = self.values();
        let mut best = 0;
        for (i, &x) in v.iter().enumerate() {
            if x > v[best] {
                best = i;
            }
        }
        best
    }
}

/// Pre-softmax correlation scores `a`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    pub mechanism: Mechanism,
}

/// Softmax attention weights `alpha`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl GridMap for ScoreMap {
    fn rows(&self) -> usize {
        self.rows
    }
    fn cols(&self) -> usize {
        self.cols
    }
    fn values(&self) -> &[f64] {
        &self.values
    }
}

impl GridMap for AttentionMap {
    fn rows(&self) -> usize {
        self.rows
    }
    fn cols(&self) -> usize {
        self.cols
    }
    fn values(&self) -> &[f64] {
        &self.values
    }
}

/// `z`, the attention-weighted mean of the grid cells.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextVector(pub Vec<f64>);

impl ContextVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// A pixel-resolution map with values in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl ResponseMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {height}x{width} map",
                values.len()
            )));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Intermediate values of the score computation kept for back-propagation.
pub(crate) struct ScoreCache {
    pub cell_norms: Vec<f64>,
    pub h_norm: f64,
    pub cosines: Vec<f64>,
}

pub(crate) fn scores_cached(
    grid: &FeatureGrid,
    h: &[f64],
    mechanism: Mechanism,
) -> Result<(ScoreMap, ScoreCache)> {
    if grid.dim != h.len() {
        return Err(Error::DimensionMismatch(format!(
            "grid cells have {} channels but the sound context has {}",
            grid.dim,
            h.len()
        )));
    }
    let h_norm = norm(h);
    if !(h_norm > 0.0) {
        return Err(Error::ZeroNorm("sound context h".into()));
    }
    let m = grid.cells();
    let mut cell_norms = Vec::with_capacity(m);
    let mut cosines = Vec::with_capacity(m);
    for i in 0..m {
        let v = grid.cell(i);
        let n = norm(v);
        cell_norms.push(n);
        let c = if n > 0.0 {
            let dot: f64 = v.iter().zip(h).map(|(a, b)| a * b).sum();
            (dot / (n * h_norm)).clamp(-1.0, 1.0)
        } else {
            0.0
        };
        cosines.push(c);
    }
    let values = match mechanism {
        Mechanism::Cos => cosines.clone(),
        Mechanism::Relu => cosines.iter().map(|&c| c.max(0.0)).collect(),
    };
    Ok((
        ScoreMap {
            rows: grid.rows,
            cols: grid.cols,
            values,
            mechanism,
        },
        ScoreCache {
            cell_norms,
            h_norm,
            cosines,
        },
    ))
}

/// Given `dL/da`, returns `(dL/dV, dL/dh)`.
pub(crate) fn scores_backward(
    grid: &FeatureGrid,
    h: &[f64],
    mechanism: Mechanism,
    cache: &ScoreCache,
    d_scores: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let d = grid.dim;
    let mut d_grid = vec![0.0; grid.data.len()];
    let mut dh = vec![0.0; d];
    let hn = cache.h_norm;
    for i in 0..grid.cells() {
        let vn = cache.cell_norms[i];
        if vn == 0.0 {
            continue;
        }
        let s = cache.cosines[i];
        let mut g = d_scores[i];
        if mechanism == Mechanism::Relu && s <= 0.0 {
            g = 0.0;
        }
        if g == 0.0 {
            continue;
        }
        let v = grid.cell(i);
        let dv = &mut d_grid[i * d..(i + 1) * d];
        for k in 0..d {
            let v_hat = v[k] / vn;
            let h_hat = h[k] / hn;
            dv[k] += g * (h_hat - s * v_hat) / vn;
            dh[k] += g * (v_hat - s * h_hat) / hn;
        }
    }
    (d_grid, dh)
}

/// Correlation of each cell with the sound context after scaling both to
/// unit length. Zero-norm cells score 0 under either mechanism.
pub fn attention_scores(grid: &FeatureGrid, h: &[f64], mechanism: Mechanism) -> Result<ScoreMap> {
    Ok(scores_cached(grid, h, mechanism)?.0)
}

/// Max-subtracted softmax over the grid.
pub fn softmax_normalize(scores: &ScoreMap) -> AttentionMap {
    AttentionMap {
        rows: scores.rows,
        cols: scores.cols,
        values: softmax(&scores.values),
    }
}

pub(crate) fn softmax(a: &[f64]) -> Vec<f64> {
    let max = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = a.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Given `dL/dalpha`, returns `dL/da` through the softmax Jacobian.
pub(crate) fn softmax_backward(alpha: &[f64], d_alpha: &[f64]) -> Vec<f64> {
    let dot: f64 = alpha.iter().zip(d_alpha).map(|(a, g)| a * g).sum();
    alpha
        .iter()
        .zip(d_alpha)
        .map(|(a, g)| a * (g - dot))
        .collect()
}

/// `z = sum_i alpha_i v_i`.
pub fn context_vector(grid: &FeatureGrid, alpha: &AttentionMap) -> Result<ContextVector> {
    if alpha.values.len() != grid.cells() {
        return Err(Error::DimensionMismatch(format!(
            "{} attention weights for {} grid cells",
            alpha.values.len(),
            grid.cells()
        )));
    }
    let mut z = vec![0.0; grid.dim];
    for (i, &a) in alpha.values.iter().enumerate() {
        for (zk, vk) in z.iter_mut().zip(grid.cell(i)) {
            *zk += a * vk;
        }
    }
    Ok(ContextVector(z))
}

/// Bilinear upsampling (half-pixel centers, edge clamping) followed by
/// per-map min-max rescaling. A constant map rescales to all zeros.
pub fn full_resolution_response(map: &impl GridMap, height: usize, width: usize) -> Result<ResponseMap> {
    let (rows, cols) = (map.rows(), map.cols());
    if height < rows || width < cols {
        return Err(Error::InvalidArgument(format!(
            "target {height}x{width} is smaller than the {rows}x{cols} grid"
        )));
    }
    let src = map.values();
    if src.len() != rows * cols || src.is_empty() {
        return Err(Error::DimensionMismatch("grid map values do not match its shape".into()));
    }
    let sy = rows as f64 / height as f64;
    let sx = cols as f64 / width as f64;
    let axis = |dst: usize, scale: f64, n: usize| {
        let p = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = p.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, p - i0 as f64)
    };
    let xs: Vec<_> = (0..width).map(|x| axis(x, sx, cols)).collect();
    let mut values = Vec::with_capacity(height * width);
    for y in 0..height {
        let (y0, y1, fy) = axis(y, sy, rows);
        for &(x0, x1, fx) in &xs {
            let top = src[y0 * cols + x0] * (1.0 - fx) + src[y0 * cols + x1] * fx;
            let bot = src[y1 * cols + x0] * (1.0 - fx) + src[y1 * cols + x1] * fx;
            values.push(top * (1.0 - fy) + bot * fy);
        }
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if span > 0.0 {
        for v in &mut values {
            *v = (*v - lo) / span;
        }
    } else {
        values.fill(0.0);
    }
    ResponseMap::new(height, width, values)
}

/// Writes a response map as an 8-bit grayscale PNG.
pub fn write_heatmap_png(path: impl AsRef<Path>, map: &ResponseMap) -> Result<()> {
    let bytes: Vec<u8> = map
        .values
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    image::save_buffer_with_format(
        path,
        &bytes,
        map.width as u32,
        map.height as u32,
        image::ExtendedColorType::L8,
        image::ImageFormat::Png,
    )?;
    Ok(())
}

/// Encodes the raw sidecar: `u32` height, `u32` width, then row-major `f32`
/// values, all little-endian.
pub fn encode_sidecar(map: &ResponseMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * map.values.len());
    out.extend_from_slice(&(map.height as u32).to_le_bytes());
    out.extend_from_slice(&(map.width as u32).to_le_bytes());
    for &v in &map.values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_sidecar(bytes: &[u8]) -> Result<ResponseMap> {
    if bytes.len() < 8 {
        return Err(Error::InvalidArgument("sidecar shorter than its header".into()));
    }
    let height = u32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes")) as usize;
    let width = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let body = &bytes[8..];
    if body.len() != 4 * height * width {
        return Err(Error::DimensionMismatch(format!(
            "sidecar declares {height}x{width} but carries {} bytes of data",
            body.len()
        )));
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    ResponseMap::new(height, width, values)
}

pub fn write_sidecar(path: impl AsRef<Path>, map: &ResponseMap) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_sidecar(map))?;
    Ok(())
}

pub fn read_sidecar(path: impl AsRef<Path>) -> Result<ResponseMap> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_sidecar(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(cells: &[Vec<f64>]) -> FeatureGrid {
        FeatureGrid::from_cells(1, cells.len(), cells).unwrap()
    }

    #[test]
    fn parallel_and_antiparallel_cells() {
        let h = [0.3, -1.2, 2.0];
        let g = grid(&[h.to_vec(), h.iter().map(|x| -x).collect()]);
        let cos = attention_scores(&g, &h, Mechanism::Cos).unwrap();
        assert!((cos.values[0] - 1.0).abs() < 1e-15);
        assert!((cos.values[1] + 1.0).abs() < 1e-15);
        let relu = attention_scores(&g, &h, Mechanism::Relu).unwrap();
        assert!((relu.values[0] - 1.0).abs() < 1e-15);
        assert_eq!(relu.values[1], 0.0);
    }

    #[test]
    fn two_cell_inner_products() {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let g = grid(&[vec![1.0, 0.0], vec![s, s]]);
        let a = attention_scores(&g, &[1.0, 0.0], Mechanism::Cos).unwrap();
        assert!((a.values[0] - 1.0).abs() < 1e-15);
        assert!((a.values[1] - s).abs() < 1e-15);
    }

    #[test]
    fn zero_norm_cells_and_context() {
        let g = grid(&[vec![0.0, 0.0], vec![1.0, 1.0]]);
        let a = attention_scores(&g, &[1.0, 0.0], Mechanism::Cos).unwrap();
        assert_eq!(a.values[0], 0.0);
        assert!(matches!(
            attention_scores(&g, &[0.0, 0.0], Mechanism::Cos),
            Err(Error::ZeroNorm(_))
        ));
        assert!(matches!(
            attention_scores(&g, &[1.0], Mechanism::Cos),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn softmax_cases() {
        let uniform = ScoreMap {
            rows: 2,
            cols: 2,
            values: vec![0.4; 4],
            mechanism: Mechanism::Cos,
        };
        assert!(softmax_normalize(&uniform).values.iter().all(|&a| (a - 0.25).abs() < 1e-15));

        let two = ScoreMap {
            rows: 1,
            cols: 2,
            values: vec![2f64.ln(), 0.0],
            mechanism: Mechanism::Cos,
        };
        let alpha = softmax_normalize(&two).values;
        assert!((alpha[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((alpha[1] - 1.0 / 3.0).abs() < 1e-12);

        let shifted = ScoreMap {
            values: two.values.iter().map(|x| x + 7.5).collect(),
            ..two.clone()
        };
        let beta = softmax_normalize(&shifted).values;
        for (a, b) in alpha.iter().zip(&beta) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn context_vector_cases() {
        let cells = vec![vec![1.0, 2.0], vec![-3.0, 0.5], vec![4.0, 4.0]];
        let g = grid(&cells);
        let onehot = AttentionMap {
            rows: 1,
            cols: 3,
            values: vec![0.0, 1.0, 0.0],
        };
        assert_eq!(context_vector(&g, &onehot).unwrap().0, cells[1]);

        let uniform = AttentionMap {
            rows: 1,
            cols: 3,
            values: vec![1.0 / 3.0; 3],
        };
        let z = context_vector(&g, &uniform).unwrap().0;
        assert!((z[0] - 2.0 / 3.0).abs() < 1e-12 && (z[1] - 6.5 / 3.0).abs() < 1e-12);

        let weighted = AttentionMap {
            rows: 1,
            cols: 3,
            values: vec![0.5, 0.3, 0.2],
        };
        // 0.5*(1,2) + 0.3*(-3,0.5) + 0.2*(4,4) = (0.5-0.9+0.8, 1+0.15+0.8)
        let z = context_vector(&g, &weighted).unwrap().0;
        assert!((z[0] - 0.4).abs() < 1e-12 && (z[1] - 1.95).abs() < 1e-12);

        let short = AttentionMap {
            rows: 1,
            cols: 2,
            values: vec![0.5, 0.5],
        };
        assert!(context_vector(&g, &short).is_err());
    }

    #[test]
    fn upsampling_keeps_one_hot_corner() {
        let m = AttentionMap {
            rows: 2,
            cols: 2,
            values: vec![0.0, 0.0, 0.0, 1.0],
        };
        let r = full_resolution_response(&m, 8, 8).unwrap();
        let best = r
            .values
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap();
        assert_eq!(*best.1, 1.0);
        assert_eq!(r.get(7, 7), 1.0);
        assert_eq!(r.get(0, 0), 0.0);
    }

    #[test]
    fn constant_map_rescales_to_zero() {
        let m = AttentionMap {
            rows: 2,
            cols: 3,
            values: vec![0.2; 6],
        };
        let r = full_resolution_response(&m, 4, 6).unwrap();
        assert!(r.values.iter().all(|&v| v == 0.0));
        assert!(full_resolution_response(&m, 1, 6).is_err());
    }

    #[test]
    fn column_upsample_matches_hand_interpolation() {
        let m = AttentionMap {
            rows: 2,
            cols: 1,
            values: vec![0.2, 0.8],
        };
        let r = full_resolution_response(&m, 4, 1).unwrap();
        // half-pixel sources: -0.25 -> 0.2, 0.25 -> 0.35, 0.75 -> 0.65, 1.25 -> 0.8
        let want = [0.0, 0.25, 0.75, 1.0];
        for (a, b) in r.values.iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "{:?}", r.values);
        }
    }

    #[test]
    fn sidecar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let map = ResponseMap::new(2, 3, vec![0.0, 0.5, 1.0, 0.25, 0.75, 0.125]).unwrap();
        let p = dir.path().join("m.f32");
        write_sidecar(&p, &map).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..8], &[2, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(read_sidecar(&p).unwrap(), map);
        assert!(decode_sidecar(&bytes[..10]).is_err());
    }

    fn arb_grid() -> impl Strategy<Value = (FeatureGrid, Vec<f64>)> {
        (1usize..6, 1usize..6, 1usize..6).prop_flat_map(|(r, c, d)| {
            (
                prop::collection::vec(-3.0f64..3.0, r * c * d),
                prop::collection::vec(-3.0f64..3.0, d),
            )
                .prop_map(move |(data, h)| (FeatureGrid::new(r, c, d, data).unwrap(), h))
        })
    }

    proptest! {
        #[test]
        fn attention_is_a_probability_vector((g, h) in arb_grid(), relu in any::<bool>()) {
            prop_assume!(norm(&h) > 1e-6);
            let mech = if relu { Mechanism::Relu } else { Mechanism::Cos };
            let a = attention_scores(&g, &h, mech).unwrap();
            for &s in &a.values {
                match mech {
                    Mechanism::Cos => prop_assert!((-1.0..=1.0).contains(&s)),
                    Mechanism::Relu => prop_assert!((0.0..=1.0).contains(&s)),
                }
            }
            let alpha = softmax_normalize(&a);
            prop_assert!(alpha.values.iter().all(|&x| x > 0.0));
            prop_assert!((alpha.values.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }

        #[test]
        fn scores_ignore_context_scale((g, h) in arb_grid(), scale in 1e-3f64..1e3) {
            prop_assume!(norm(&h) > 1e-6);
            let a = attention_scores(&g, &h, Mechanism::Cos).unwrap();
            let hs: Vec<f64> = h.iter().map(|x| x * scale).collect();
            let b = attention_scores(&g, &hs, Mechanism::Cos).unwrap();
            for (x, y) in a.values.iter().zip(&b.values) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn relu_zeroes_anticorrelated_grids(
            h in prop::collection::vec(0.1f64..2.0, 4),
            weights in prop::collection::vec(0.1f64..3.0, 6),
        ) {
            // every cell is a negative multiple of h: strictly anti-correlated
            let cells: Vec<Vec<f64>> = weights.iter().map(|w| h.iter().map(|x| -w * x).collect()).collect();
            let g = FeatureGrid::from_cells(2, 3, &cells).unwrap();
            let a = attention_scores(&g, &h, Mechanism::Relu).unwrap();
            prop_assert!(a.values.iter().all(|&s| s == 0.0));
        }

        #[test]
        fn upsampled_peak_stays_in_its_cell(rows in 1usize..6, cols in 1usize..6, peak in 0usize..36, scale in 1usize..5) {
            let m = rows * cols;
            let peak = peak % m;
            let mut values = vec![0.0; m];
            values[peak] = 1.0;
            let map = AttentionMap { rows, cols, values };
            prop_assume!(m > 1);
            let r = full_resolution_response(&map, rows * scale, cols * scale).unwrap();
            let best = r.values.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0))).unwrap().0;
            let (py, px) = (best / r.width, best % r.width);
            prop_assert_eq!((py / scale) * cols + px / scale, peak);
        }
    }
}
