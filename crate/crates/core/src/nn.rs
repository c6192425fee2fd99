//! Dense, convolutional and pooling layers with hand-written backward passes.
//!
//! Activations are stored channel-major (`[C][L]` for sequences, `[C][H][W]`
//! for images). Convolutions run as im2col followed by a GEMM.

use rand::Rng;

/// `C = op(A) * op(B)` (or `C += ...` when `accumulate`), all row-major.
/// `op(A)` is `m x k`, `op(B)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices hold exactly the extents described by the strides,
    // checked by the debug assertions above and by every caller's shapes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// He-style uniform initialization bound for a given fan-in.
fn init_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in.max(1) as f64).sqrt()
}

fn uniform_vec(rng: &mut impl Rng, len: usize, bound: f64) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(-bound..bound)).collect()
}

pub(crate) fn relu_inplace(x: &mut [f64]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Zeroes the gradient wherever the rectified output was not positive.
pub(crate) fn relu_backward(output: &[f64], grad: &mut [f64]) {
    for (g, &y) in grad.iter_mut().zip(output) {
        if y <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Fully connected layer `y = W x + b` with `W` stored `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    pub fn init(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: uniform_vec(rng, in_dim * out_dim, init_bound(in_dim)),
            bias: vec![0.0; out_dim],
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.bias.clone();
        for (o, yo) in y.iter_mut().enumerate() {
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            *yo += row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &[f64], dy: &[f64], grad: &mut Linear) -> Vec<f64> {
        let mut dx = vec![0.0; self.in_dim];
        for (o, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad.bias[o] += g;
            let row = o * self.in_dim;
            for i in 0..self.in_dim {
                grad.weight[row + i] += g * x[i];
                dx[i] += g * self.weight[row + i];
            }
        }
        dx
    }
}

/// Valid-padding strided 1-D convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    /// `out x (in * kernel)`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv1d {
    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            weight: vec![0.0; out_channels * in_channels * kernel],
            bias: vec![0.0; out_channels],
        }
    }

    pub fn init(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_channels * kernel;
        Self {
            weight: uniform_vec(rng, out_channels * fan_in, init_bound(fan_in)),
            ..Self::zeros(in_channels, out_channels, kernel, stride)
        }
    }

    /// Output length for an input of `len` samples, `None` if too short.
    pub fn output_len(&self, len: usize) -> Option<usize> {
        (len >= self.kernel).then(|| (len - self.kernel) / self.stride + 1)
    }

    /// Returns `(output [out][T], im2col buffer [in*kernel][T])`.
    pub fn forward(&self, x: &[f64], len: usize) -> (Vec<f64>, Vec<f64>) {
        let t_out = self.output_len(len).expect("input shorter than kernel");
        let rows = self.in_channels * self.kernel;
        let mut cols = vec![0.0; rows * t_out];
        for c in 0..self.in_channels {
            let xc = &x[c * len..(c + 1) * len];
            for k in 0..self.kernel {
                let dst = &mut cols[(c * self.kernel + k) * t_out..][..t_out];
                for (t, d) in dst.iter_mut().enumerate() {
                    *d = xc[t * self.stride + k];
                }
            }
        }
        let mut y = vec![0.0; self.out_channels * t_out];
        for (o, chunk) in y.chunks_exact_mut(t_out).enumerate() {
            chunk.fill(self.bias[o]);
        }
        gemm(
            self.out_channels,
            rows,
            t_out,
            &self.weight,
            false,
            &cols,
            false,
            &mut y,
            true,
        );
        (y, cols)
    }

    pub fn backward(&self, cols: &[f64], dy: &[f64], len: usize, grad: &mut Conv1d) -> Vec<f64> {
        let t_out = dy.len() / self.out_channels;
        let rows = self.in_channels * self.kernel;
        for (o, chunk) in dy.chunks_exact(t_out).enumerate() {
            grad.bias[o] += chunk.iter().sum::<f64>();
        }
        gemm(
            self.out_channels,
            t_out,
            rows,
            dy,
            false,
            cols,
            true,
            &mut grad.weight,
            true,
        );
        let mut dcols = vec![0.0; rows * t_out];
        gemm(
            rows,
            self.out_channels,
            t_out,
            &self.weight,
            true,
            dy,
            false,
            &mut dcols,
            false,
        );
        let mut dx = vec![0.0; self.in_channels * len];
        for c in 0..self.in_channels {
            let dxc = &mut dx[c * len..(c + 1) * len];
            for k in 0..self.kernel {
                let src = &dcols[(c * self.kernel + k) * t_out..][..t_out];
                for (t, &g) in src.iter().enumerate() {
                    dxc[t * self.stride + k] += g;
                }
            }
        }
        dx
    }
}

/// Stride-1 2-D convolution with zero "same" padding and an odd square kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    /// `out x (in * kernel * kernel)`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            weight: vec![0.0; out_channels * in_channels * kernel * kernel],
            bias: vec![0.0; out_channels],
        }
    }

    pub fn init(in_channels: usize, out_channels: usize, kernel: usize, rng: &mut impl Rng) -> Self {
        let fan_in = in_channels * kernel * kernel;
        Self {
            weight: uniform_vec(rng, out_channels * fan_in, init_bound(fan_in)),
            ..Self::zeros(in_channels, out_channels, kernel)
        }
    }

    fn im2col(&self, x: &[f64], h: usize, w: usize) -> Vec<f64> {
        let k = self.kernel;
        let pad = (k / 2) as isize;
        let hw = h * w;
        let mut cols = vec![0.0; self.in_channels * k * k * hw];
        for c in 0..self.in_channels {
            let xc = &x[c * hw..(c + 1) * hw];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * hw..(row + 1) * hw];
                    let dy = ky as isize - pad;
                    let dx = kx as isize - pad;
                    for r in 0..h {
                        let sr = r as isize + dy;
                        if sr < 0 || sr >= h as isize {
                            continue;
                        }
                        let src_row = &xc[sr as usize * w..(sr as usize + 1) * w];
                        let dst_row = &mut dst[r * w..(r + 1) * w];
                        let c0 = (-dx).max(0) as usize;
                        let c1 = (w as isize - dx).min(w as isize).max(0) as usize;
                        for col in c0..c1 {
                            dst_row[col] = src_row[(col as isize + dx) as usize];
                        }
                    }
                }
            }
        }
        cols
    }

    /// Returns `(output [out][H][W], im2col buffer)`.
    pub fn forward(&self, x: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
        let cols = self.im2col(x, h, w);
        let hw = h * w;
        let rows = self.in_channels * self.kernel * self.kernel;
        let mut y = vec![0.0; self.out_channels * hw];
        for (o, chunk) in y.chunks_exact_mut(hw).enumerate() {
            chunk.fill(self.bias[o]);
        }
        gemm(
            self.out_channels,
            rows,
            hw,
            &self.weight,
            false,
            &cols,
            false,
            &mut y,
            true,
        );
        (y, cols)
    }

    pub fn backward(
        &self,
        cols: &[f64],
        dy: &[f64],
        h: usize,
        w: usize,
        grad: &mut Conv2d,
    ) -> Vec<f64> {
        let k = self.kernel;
        let hw = h * w;
        let rows = self.in_channels * k * k;
        for (o, chunk) in dy.chunks_exact(hw).enumerate() {
            grad.bias[o] += chunk.iter().sum::<f64>();
        }
        gemm(
            self.out_channels,
            hw,
            rows,
            dy,
            false,
            cols,
            true,
            &mut grad.weight,
            true,
        );
        let mut dcols = vec![0.0; rows * hw];
        gemm(
            rows,
            self.out_channels,
            hw,
            &self.weight,
            true,
            dy,
            false,
            &mut dcols,
            false,
        );
        let pad = (k / 2) as isize;
        let mut dx = vec![0.0; self.in_channels * hw];
        for c in 0..self.in_channels {
            let dxc = &mut dx[c * hw..(c + 1) * hw];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &dcols[row * hw..(row + 1) * hw];
                    let dy_off = ky as isize - pad;
                    let dx_off = kx as isize - pad;
                    for r in 0..h {
                        let sr = r as isize + dy_off;
                        if sr < 0 || sr >= h as isize {
                            continue;
                        }
                        let c0 = (-dx_off).max(0) as usize;
                        let c1 = (w as isize - dx_off).min(w as isize).max(0) as usize;
                        for col in c0..c1 {
                            dxc[sr as usize * w + (col as isize + dx_off) as usize] +=
                                src[r * w + col];
                        }
                    }
                }
            }
        }
        dx
    }
}

/// Non-overlapping 1-D max pooling over `[C][L]`; trailing samples that do
/// not fill a full pool are dropped. Returns the output and, for every
/// output element, the input index it was taken from.
pub(crate) fn max_pool1d(x: &[f64], channels: usize, len: usize, pool: usize) -> (Vec<f64>, Vec<usize>) {
    let out_len = len / pool;
    let mut y = Vec::with_capacity(channels * out_len);
    let mut idx = Vec::with_capacity(channels * out_len);
    for c in 0..channels {
        for t in 0..out_len {
            let base = c * len + t * pool;
            let (mut best, mut best_i) = (x[base], base);
            for i in base + 1..base + pool {
                if x[i] > best {
                    best = x[i];
                    best_i = i;
                }
            }
            y.push(best);
            idx.push(best_i);
        }
    }
    (y, idx)
}

/// Non-overlapping 2-D max pooling over `[C][H][W]` with a square window.
pub(crate) fn max_pool2d(
    x: &[f64],
    channels: usize,
    h: usize,
    w: usize,
    pool: usize,
) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / pool, w / pool);
    let mut y = Vec::with_capacity(channels * oh * ow);
    let mut idx = Vec::with_capacity(channels * oh * ow);
    for c in 0..channels {
        let base = c * h * w;
        for r in 0..oh {
            for col in 0..ow {
                let first = base + r * pool * w + col * pool;
                let (mut best, mut best_i) = (x[first], first);
                for dr in 0..pool {
                    for dc in 0..pool {
                        let i = base + (r * pool + dr) * w + col * pool + dc;
                        if x[i] > best {
                            best = x[i];
                            best_i = i;
                        }
                    }
                }
                y.push(best);
                idx.push(best_i);
            }
        }
    }
    (y, idx)
}

pub(crate) fn max_pool_backward(dy: &[f64], idx: &[usize], input_len: usize) -> Vec<f64> {
    let mut dx = vec![0.0; input_len];
    for (&g, &i) in dy.iter().zip(idx) {
        dx[i] += g;
    }
    dx
}

/// Row means of a `channels x len` grid.
pub(crate) fn row_means(x: &[f64], channels: usize, len: usize) -> Vec<f64> {
    (0..channels)
        .map(|c| x[c * len..(c + 1) * len].iter().sum::<f64>() / len as f64)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_matmul(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for l in 0..k {
                    c[i * n + j] += a[i * k + l] * b[l * n + j];
                }
            }
        }
        c
    }

    fn transpose(rows: usize, cols: usize, a: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; a.len()];
        for r in 0..rows {
            for c in 0..cols {
                t[c * rows + r] = a[r * cols + c];
            }
        }
        t
    }

    #[test]
    fn gemm_matches_naive_in_all_transpose_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (m, k, n) = (4, 5, 3);
        let a = uniform_vec(&mut rng, m * k, 1.0);
        let b = uniform_vec(&mut rng, k * n, 1.0);
        let want = naive_matmul(m, k, n, &a, &b);
        let at = transpose(m, k, &a);
        let bt = transpose(k, n, &b);
        for (aa, ta) in [(&a, false), (&at, true)] {
            for (bb, tb) in [(&b, false), (&bt, true)] {
                let mut c = vec![0.0; m * n];
                gemm(m, k, n, aa, ta, bb, tb, &mut c, false);
                for (x, y) in c.iter().zip(&want) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv1d_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let conv = Conv1d::init(2, 3, 4, 3, &mut rng);
        let len = 17;
        let x = uniform_vec(&mut rng, 2 * len, 1.0);
        let (y, _) = conv.forward(&x, len);
        let t_out = conv.output_len(len).unwrap();
        assert_eq!(t_out, 5);
        for o in 0..3 {
            for t in 0..t_out {
                let mut s = conv.bias[o];
                for c in 0..2 {
                    for k in 0..4 {
                        s += conv.weight[(o * 2 + c) * 4 + k] * x[c * len + t * 3 + k];
                    }
                }
                assert!((y[o * t_out + t] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv2d_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let conv = Conv2d::init(2, 3, 3, &mut rng);
        let (h, w) = (4, 5);
        let x = uniform_vec(&mut rng, 2 * h * w, 1.0);
        let (y, _) = conv.forward(&x, h, w);
        for o in 0..3 {
            for r in 0..h as isize {
                for c in 0..w as isize {
                    let mut s = conv.bias[o];
                    for i in 0..2 {
                        for ky in 0..3isize {
                            for kx in 0..3isize {
                                let (sr, sc) = (r + ky - 1, c + kx - 1);
                                if sr < 0 || sc < 0 || sr >= h as isize || sc >= w as isize {
                                    continue;
                                }
                                s += conv.weight[((o * 2 + i) * 3 + ky as usize) * 3 + kx as usize]
                                    * x[i * h * w + sr as usize * w + sc as usize];
                            }
                        }
                    }
                    let got = y[o * h * w + r as usize * w + c as usize];
                    assert!((got - s).abs() < 1e-12);
                }
            }
        }
    }

    fn check_layer_grad(f: impl Fn(&[f64]) -> f64, analytic: &[f64], x: &[f64]) {
        let eps = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.to_vec();
            xp[i] += eps;
            let mut xm = x.to_vec();
            xm[i] -= eps;
            let fd = (f(&xp) - f(&xm)) / (2.0 * eps);
            assert!((fd - analytic[i]).abs() < 1e-6, "i={i} fd={fd} an={}", analytic[i]);
        }
    }

    #[test]
    fn conv_backward_input_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        // loss = <r, conv(x)> for a fixed random r
        let c1 = Conv1d::init(2, 3, 3, 2, &mut rng);
        let len = 11;
        let x = uniform_vec(&mut rng, 2 * len, 1.0);
        let r = uniform_vec(&mut rng, 3 * c1.output_len(len).unwrap(), 1.0);
        let (_, cols) = c1.forward(&x, len);
        let mut g = Conv1d::zeros(2, 3, 3, 2);
        let dx = c1.backward(&cols, &r, len, &mut g);
        let loss = |x: &[f64]| c1.forward(x, len).0.iter().zip(&r).map(|(a, b)| a * b).sum();
        check_layer_grad(loss, &dx, &x);

        let c2 = Conv2d::init(2, 2, 3, &mut rng);
        let (h, w) = (3, 4);
        let x = uniform_vec(&mut rng, 2 * h * w, 1.0);
        let r = uniform_vec(&mut rng, 2 * h * w, 1.0);
        let (_, cols) = c2.forward(&x, h, w);
        let mut g = Conv2d::zeros(2, 2, 3);
        let dx = c2.backward(&cols, &r, h, w, &mut g);
        let loss = |x: &[f64]| c2.forward(x, h, w).0.iter().zip(&r).map(|(a, b)| a * b).sum();
        check_layer_grad(loss, &dx, &x);
    }

    #[test]
    fn pooling_picks_maxima() {
        let x = [1.0, 3.0, 2.0, 0.0, 5.0, 4.0, 9.0];
        let (y, idx) = max_pool1d(&x, 1, 7, 2);
        assert_eq!(y, vec![3.0, 2.0, 5.0]);
        assert_eq!(idx, vec![1, 2, 4]);
        let dx = max_pool_backward(&[1.0, 1.0, 1.0], &idx, 7);
        assert_eq!(dx, vec![0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 0.0]);

        let img = [1.0, 2.0, 0.0, 0.0, 3.0, 0.0, 0.0, 7.0];
        let (y, _) = max_pool2d(&img, 1, 2, 4, 2);
        assert_eq!(y, vec![3.0, 7.0]);
    }

    #[test]
    fn row_means_are_arithmetic_means() {
        assert_eq!(row_means(&[1.0, 2.0, 3.0, 0.0, 0.0, 0.0], 2, 3), vec![2.0, 0.0]);
    }
}
