//! Forward and backward kernels for the layer primitives.
//!
//! Kernels work on flat slices with explicit geometry so they can be shared
//! between the layer graph and the preprocessing pipeline.

/// `out += a · b` with `a: m×k`, `b: k×n`.
pub fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    // Four output rows per pass share each row of `b`. Every output element
    // still accumulates over `k` in order.
    let quads = m / 4;
    for q in 0..quads {
        let i = q * 4;
        let (o0, rest) = out[i * n..(i + 4) * n].split_at_mut(n);
        let (o1, rest) = rest.split_at_mut(n);
        let (o2, o3) = rest.split_at_mut(n);
        let a0 = &a[i * k..(i + 1) * k];
        let a1 = &a[(i + 1) * k..(i + 2) * k];
        let a2 = &a[(i + 2) * k..(i + 3) * k];
        let a3 = &a[(i + 3) * k..(i + 4) * k];
        for kk in 0..k {
            let brow = &b[kk * n..(kk + 1) * n];
            let (v0, v1, v2, v3) = (a0[kk], a1[kk], a2[kk], a3[kk]);
            for j in 0..n {
                let bv = brow[j];
                o0[j] += v0 * bv;
                o1[j] += v1 * bv;
                o2[j] += v2 * bv;
                o3[j] += v3 * bv;
            }
        }
    }
    for i in quads * 4..m {
        let orow = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += aᵀ · b` with `a: m×k`, `b: m×n`, `out: k×n`.
pub fn matmul_at_b_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a · bᵀ` with `a: m×n`, `b: k×n`, `out: m×k`.
pub fn matmul_a_bt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * k);
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for kk in 0..k {
            let brow = &b[kk * n..(kk + 1) * n];
            let mut s = 0.0;
            for (&x, &y) in arow.iter().zip(brow) {
                s += x * y;
            }
            out[i * k + kk] += s;
        }
    }
}

/// Spatial geometry of a windowed operation (convolution or pooling).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl Window {
    /// `same == false` is valid padding, which requires the kernel to fit.
    pub fn new(in_h: usize, in_w: usize, kernel: usize, stride: usize, same: bool) -> Option<Self> {
        if kernel == 0 || stride == 0 || in_h == 0 || in_w == 0 {
            return None;
        }
        if same {
            let out_h = in_h.div_ceil(stride);
            let out_w = in_w.div_ceil(stride);
            let pad_h = ((out_h - 1) * stride + kernel).saturating_sub(in_h);
            let pad_w = ((out_w - 1) * stride + kernel).saturating_sub(in_w);
            Some(Self {
                in_h,
                in_w,
                kernel,
                stride,
                out_h,
                out_w,
                pad_top: pad_h / 2,
                pad_left: pad_w / 2,
            })
        } else {
            if kernel > in_h || kernel > in_w {
                return None;
            }
            Some(Self {
                in_h,
                in_w,
                kernel,
                stride,
                out_h: (in_h - kernel) / stride + 1,
                out_w: (in_w - kernel) / stride + 1,
                pad_top: 0,
                pad_left: 0,
            })
        }
    }

    /// Input coordinate for output `(oy, ox)` and kernel offset `(ky, kx)`,
    /// or `None` when it falls in the padding.
    #[inline]
    pub fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let iy = (oy * self.stride + ky) as isize - self.pad_top as isize;
        let ix = (ox * self.stride + kx) as isize - self.pad_left as isize;
        if iy < 0 || ix < 0 || iy >= self.in_h as isize || ix >= self.in_w as isize {
            None
        } else {
            Some((iy as usize, ix as usize))
        }
    }
}

/// Unfold one `[H, W, C]` image into a `(out_h·out_w) × (k·k·C)` patch matrix.
pub fn im2col(x: &[f64], win: &Window, channels: usize, col: &mut [f64]) {
    let k = win.kernel;
    let row_len = k * k * channels;
    debug_assert_eq!(col.len(), win.out_h * win.out_w * row_len);
    for oy in 0..win.out_h {
        for ox in 0..win.out_w {
            let row = &mut col[(oy * win.out_w + ox) * row_len..][..row_len];
            for ky in 0..k {
                for kx in 0..k {
                    let dst = &mut row[(ky * k + kx) * channels..][..channels];
                    match win.source(oy, ox, ky, kx) {
                        Some((iy, ix)) => {
                            dst.copy_from_slice(&x[(iy * win.in_w + ix) * channels..][..channels])
                        }
                        None => dst.iter_mut().for_each(|v| *v = 0.0),
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add patch gradients back into the image.
pub fn col2im_acc(col: &[f64], win: &Window, channels: usize, dx: &mut [f64]) {
    let k = win.kernel;
    let row_len = k * k * channels;
    for oy in 0..win.out_h {
        for ox in 0..win.out_w {
            let row = &col[(oy * win.out_w + ox) * row_len..][..row_len];
            for ky in 0..k {
                for kx in 0..k {
                    if let Some((iy, ix)) = win.source(oy, ox, ky, kx) {
                        let src = &row[(ky * k + kx) * channels..][..channels];
                        let dst = &mut dx[(iy * win.in_w + ix) * channels..][..channels];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

/// Convolution of a batch `[N, H, W, C]` with weights `[k, k, C, F]`.
pub fn conv2d_forward(
    x: &[f64],
    batch: usize,
    win: &Window,
    channels: usize,
    weights: &[f64],
    bias: Option<&[f64]>,
    filters: usize,
) -> Vec<f64> {
    let in_len = win.in_h * win.in_w * channels;
    let p = win.out_h * win.out_w;
    let kdim = win.kernel * win.kernel * channels;
    let mut out = vec![0.0; batch * p * filters];
    let mut col = vec![0.0; p * kdim];
    for n in 0..batch {
        im2col(&x[n * in_len..(n + 1) * in_len], win, channels, &mut col);
        let o = &mut out[n * p * filters..(n + 1) * p * filters];
        if let Some(b) = bias {
            for row in o.chunks_exact_mut(filters) {
                row.copy_from_slice(b);
            }
        }
        matmul_acc(&col, weights, o, p, kdim, filters);
    }
    out
}

/// Returns `dx` (all zeros unless `need_dx`); accumulates into `dw` and `db`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    x: &[f64],
    batch: usize,
    win: &Window,
    channels: usize,
    weights: &[f64],
    filters: usize,
    dout: &[f64],
    dw: &mut [f64],
    db: Option<&mut [f64]>,
    need_dx: bool,
) -> Vec<f64> {
    let in_len = win.in_h * win.in_w * channels;
    let p = win.out_h * win.out_w;
    let kdim = win.kernel * win.kernel * channels;
    let mut dx = vec![0.0; x.len()];
    let mut col = vec![0.0; p * kdim];
    let mut dcol = vec![0.0; p * kdim];
    for n in 0..batch {
        let g = &dout[n * p * filters..(n + 1) * p * filters];
        im2col(&x[n * in_len..(n + 1) * in_len], win, channels, &mut col);
        matmul_at_b_acc(&col, g, dw, p, kdim, filters);
        if !need_dx {
            continue;
        }
        dcol.iter_mut().for_each(|v| *v = 0.0);
        matmul_a_bt_acc(g, weights, &mut dcol, p, filters, kdim);
        col2im_acc(&dcol, win, channels, &mut dx[n * in_len..(n + 1) * in_len]);
    }
    if let Some(db) = db {
        for row in dout.chunks_exact(filters) {
            for (d, g) in db.iter_mut().zip(row) {
                *d += g;
            }
        }
    }
    dx
}

/// Max pooling; returns outputs and, for each output, the flat input index of
/// the selected maximum (first maximum in scan order on ties).
pub fn maxpool_forward(x: &[f64], batch: usize, win: &Window, channels: usize) -> (Vec<f64>, Vec<usize>) {
    let in_len = win.in_h * win.in_w * channels;
    let out_len = win.out_h * win.out_w * channels;
    let mut out = vec![f64::NEG_INFINITY; batch * out_len];
    let mut arg = vec![usize::MAX; batch * out_len];
    for n in 0..batch {
        for oy in 0..win.out_h {
            for ox in 0..win.out_w {
                let obase = n * out_len + (oy * win.out_w + ox) * channels;
                for ky in 0..win.kernel {
                    for kx in 0..win.kernel {
                        if let Some((iy, ix)) = win.source(oy, ox, ky, kx) {
                            let ibase = n * in_len + (iy * win.in_w + ix) * channels;
                            for c in 0..channels {
                                let v = x[ibase + c];
                                if v > out[obase + c] {
                                    out[obase + c] = v;
                                    arg[obase + c] = ibase + c;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (out, arg)
}

pub fn maxpool_backward(argmax: &[usize], dout: &[f64], in_len_total: usize) -> Vec<f64> {
    let mut dx = vec![0.0; in_len_total];
    for (&i, &g) in argmax.iter().zip(dout) {
        dx[i] += g;
    }
    dx
}

/// Average pooling over the in-bounds part of each window.
pub fn avgpool_forward(x: &[f64], batch: usize, win: &Window, channels: usize) -> Vec<f64> {
    let in_len = win.in_h * win.in_w * channels;
    let out_len = win.out_h * win.out_w * channels;
    let mut out = vec![0.0; batch * out_len];
    for n in 0..batch {
        for oy in 0..win.out_h {
            for ox in 0..win.out_w {
                let obase = n * out_len + (oy * win.out_w + ox) * channels;
                let mut count = 0usize;
                for ky in 0..win.kernel {
                    for kx in 0..win.kernel {
                        if let Some((iy, ix)) = win.source(oy, ox, ky, kx) {
                            count += 1;
                            let ibase = n * in_len + (iy * win.in_w + ix) * channels;
                            for c in 0..channels {
                                out[obase + c] += x[ibase + c];
                            }
                        }
                    }
                }
                let inv = 1.0 / count as f64;
                out[obase..obase + channels].iter_mut().for_each(|v| *v *= inv);
            }
        }
    }
    out
}

pub fn avgpool_backward(dout: &[f64], batch: usize, win: &Window, channels: usize) -> Vec<f64> {
    let in_len = win.in_h * win.in_w * channels;
    let out_len = win.out_h * win.out_w * channels;
    let mut dx = vec![0.0; batch * in_len];
    for n in 0..batch {
        for oy in 0..win.out_h {
            for ox in 0..win.out_w {
                let obase = n * out_len + (oy * win.out_w + ox) * channels;
                let sources: Vec<(usize, usize)> = (0..win.kernel)
                    .flat_map(|ky| (0..win.kernel).map(move |kx| (ky, kx)))
                    .filter_map(|(ky, kx)| win.source(oy, ox, ky, kx))
                    .collect();
                let inv = 1.0 / sources.len() as f64;
                for (iy, ix) in sources {
                    let ibase = n * in_len + (iy * win.in_w + ix) * channels;
                    for c in 0..channels {
                        dx[ibase + c] += dout[obase + c] * inv;
                    }
                }
            }
        }
    }
    dx
}

/// Mean over all spatial positions: `[N, P, C] -> [N, C]`.
pub fn global_avgpool_forward(x: &[f64], batch: usize, positions: usize, channels: usize) -> Vec<f64> {
    let mut out = vec![0.0; batch * channels];
    let inv = 1.0 / positions as f64;
    for n in 0..batch {
        let o = &mut out[n * channels..(n + 1) * channels];
        for p in 0..positions {
            let row = &x[(n * positions + p) * channels..][..channels];
            for (a, b) in o.iter_mut().zip(row) {
                *a += b;
            }
        }
        o.iter_mut().for_each(|v| *v *= inv);
    }
    out
}

pub fn global_avgpool_backward(dout: &[f64], batch: usize, positions: usize, channels: usize) -> Vec<f64> {
    let mut dx = vec![0.0; batch * positions * channels];
    let inv = 1.0 / positions as f64;
    for n in 0..batch {
        let g = &dout[n * channels..(n + 1) * channels];
        for p in 0..positions {
            let row = &mut dx[(n * positions + p) * channels..][..channels];
            for (a, b) in row.iter_mut().zip(g) {
                *a = b * inv;
            }
        }
    }
    dx
}

/// Cross-channel local response normalization constants.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrnParams {
    pub depth_radius: usize,
    pub alpha: f64,
    pub beta: f64,
    pub bias: f64,
}

impl Default for LrnParams {
    fn default() -> Self {
        Self {
            depth_radius: 2,
            alpha: 1e-4,
            beta: 0.75,
            bias: 1.0,
        }
    }
}

/// Returns outputs and the per-element scale `bias + alpha·Σ a²`.
pub fn lrn_forward(x: &[f64], channels: usize, p: &LrnParams) -> (Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; x.len()];
    let mut scale = vec![0.0; x.len()];
    for (row, (orow, srow)) in x
        .chunks_exact(channels)
        .zip(out.chunks_exact_mut(channels).zip(scale.chunks_exact_mut(channels)))
    {
        for c in 0..channels {
            let lo = c.saturating_sub(p.depth_radius);
            let hi = (c + p.depth_radius).min(channels - 1);
            let sq: f64 = row[lo..=hi].iter().map(|v| v * v).sum();
            let s = p.bias + p.alpha * sq;
            srow[c] = s;
            orow[c] = row[c] * s.powf(-p.beta);
        }
    }
    (out, scale)
}

pub fn lrn_backward(x: &[f64], scale: &[f64], dout: &[f64], channels: usize, p: &LrnParams) -> Vec<f64> {
    let mut dx = vec![0.0; x.len()];
    for (((row, srow), grow), drow) in x
        .chunks_exact(channels)
        .zip(scale.chunks_exact(channels))
        .zip(dout.chunks_exact(channels))
        .zip(dx.chunks_exact_mut(channels))
    {
        // t_i = g_i · a_i · s_i^(-β-1)
        let t: Vec<f64> = (0..channels)
            .map(|i| grow[i] * row[i] * srow[i].powf(-p.beta - 1.0))
            .collect();
        for j in 0..channels {
            let lo = j.saturating_sub(p.depth_radius);
            let hi = (j + p.depth_radius).min(channels - 1);
            let cross: f64 = t[lo..=hi].iter().sum();
            drow[j] = grow[j] * srow[j].powf(-p.beta) - 2.0 * p.alpha * p.beta * row[j] * cross;
        }
    }
    dx
}

/// Normalization statistics kept for the backward pass.
#[derive(Clone, Debug, Default)]
pub struct NormCache {
    pub normalized: Vec<f64>,
    /// One `1/sqrt(var + eps)` per normalized group.
    pub inv_std: Vec<f64>,
}

/// Per-example, per-channel normalization of `[N, P, C]` to zero mean and
/// unit variance. Returns outputs plus the per-(n, c) mean and inverse std.
pub fn instance_norm_forward(
    x: &[f64],
    batch: usize,
    positions: usize,
    channels: usize,
    epsilon: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; x.len()];
    let mut means = vec![0.0; batch * channels];
    let mut inv_stds = vec![0.0; batch * channels];
    let inv_p = 1.0 / positions as f64;
    for n in 0..batch {
        let xs = &x[n * positions * channels..(n + 1) * positions * channels];
        for c in 0..channels {
            let mean = xs.iter().skip(c).step_by(channels).sum::<f64>() * inv_p;
            let var = xs
                .iter()
                .skip(c)
                .step_by(channels)
                .map(|v| (v - mean) * (v - mean))
                .sum::<f64>()
                * inv_p;
            let inv_std = 1.0 / (var + epsilon).sqrt();
            means[n * channels + c] = mean;
            inv_stds[n * channels + c] = inv_std;
            for p in 0..positions {
                let i = n * positions * channels + p * channels + c;
                out[i] = (x[i] - mean) * inv_std;
            }
        }
    }
    (out, means, inv_stds)
}

/// Backward of a normalization over groups of `m` elements: for each group,
/// `dx = inv_std/m · (m·g − Σg − x̂·Σ(g·x̂))`. `index(group, j)` maps to flat
/// positions.
fn normalize_backward_groups(
    groups: usize,
    m: usize,
    index: impl Fn(usize, usize) -> usize,
    normalized: &[f64],
    inv_std: &[f64],
    dxhat: &[f64],
    dx: &mut [f64],
) {
    let mf = m as f64;
    for g in 0..groups {
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for j in 0..m {
            let i = index(g, j);
            sum_g += dxhat[i];
            sum_gx += dxhat[i] * normalized[i];
        }
        let k = inv_std[g] / mf;
        for j in 0..m {
            let i = index(g, j);
            dx[i] = k * (mf * dxhat[i] - sum_g - normalized[i] * sum_gx);
        }
    }
}

pub fn instance_norm_backward(
    normalized: &[f64],
    inv_std: &[f64],
    dout: &[f64],
    batch: usize,
    positions: usize,
    channels: usize,
) -> Vec<f64> {
    let mut dx = vec![0.0; dout.len()];
    normalize_backward_groups(
        batch * channels,
        positions,
        |g, j| {
            let (n, c) = (g / channels, g % channels);
            n * positions * channels + j * channels + c
        },
        normalized,
        inv_std,
        dout,
        &mut dx,
    );
    dx
}

/// Batch normalization statistics over `[M, C]` rows (M = N·positions).
/// Returns `(x̂, mean, var, inv_std)`.
pub fn batch_norm_stats(x: &[f64], channels: usize, epsilon: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = x.len() / channels;
    let inv_m = 1.0 / rows as f64;
    let mut mean = vec![0.0; channels];
    for row in x.chunks_exact(channels) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m *= inv_m);
    let mut var = vec![0.0; channels];
    for row in x.chunks_exact(channels) {
        for c in 0..channels {
            let d = row[c] - mean[c];
            var[c] += d * d;
        }
    }
    var.iter_mut().for_each(|v| *v *= inv_m);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + epsilon).sqrt()).collect();
    let mut xhat = vec![0.0; x.len()];
    for (row, orow) in x.chunks_exact(channels).zip(xhat.chunks_exact_mut(channels)) {
        for c in 0..channels {
            orow[c] = (row[c] - mean[c]) * inv_std[c];
        }
    }
    (xhat, mean, var, inv_std)
}

pub fn batch_norm_backward(normalized: &[f64], inv_std: &[f64], dxhat: &[f64], channels: usize) -> Vec<f64> {
    let rows = dxhat.len() / channels;
    let mut dx = vec![0.0; dxhat.len()];
    normalize_backward_groups(
        channels,
        rows,
        |c, j| j * channels + c,
        normalized,
        inv_std,
        dxhat,
        &mut dx,
    );
    dx
}

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax over the last axis.
pub fn softmax_rows(x: &[f64], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, orow) in x.chunks_exact(width).zip(out.chunks_exact_mut(width)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - max).exp();
            sum += *o;
        }
        orow.iter_mut().for_each(|o| *o /= sum);
    }
    out
}

pub fn softmax_backward(y: &[f64], dout: &[f64], width: usize) -> Vec<f64> {
    let mut dx = vec![0.0; y.len()];
    for ((yr, gr), dr) in y
        .chunks_exact(width)
        .zip(dout.chunks_exact(width))
        .zip(dx.chunks_exact_mut(width))
    {
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for i in 0..width {
            dr[i] = yr[i] * (gr[i] - dot);
        }
    }
    dx
}

/// Per-timestep activations of one LSTM layer, kept for backpropagation
/// through time. Gate order within the `4H` block is input, forget, cell
/// candidate, output.
#[derive(Clone, Debug, Default)]
pub struct LstmCache {
    pub gates: Vec<f64>,
    pub cells: Vec<f64>,
    pub hidden: Vec<f64>,
}

/// One LSTM cell update for a batch: given pre-activations `z: [N, 4H]`
/// and the previous cell state, writes activated gates back into `z` and
/// returns `(c_t, h_t)`.
pub fn lstm_cell(z: &mut [f64], c_prev: &[f64], units: usize) -> (Vec<f64>, Vec<f64>) {
    let batch = c_prev.len() / units;
    let mut c = vec![0.0; batch * units];
    let mut h = vec![0.0; batch * units];
    for n in 0..batch {
        let zr = &mut z[n * 4 * units..(n + 1) * 4 * units];
        for u in 0..units {
            let i = sigmoid(zr[u]);
            let f = sigmoid(zr[units + u]);
            let g = zr[2 * units + u].tanh();
            let o = sigmoid(zr[3 * units + u]);
            zr[u] = i;
            zr[units + u] = f;
            zr[2 * units + u] = g;
            zr[3 * units + u] = o;
            let ct = f * c_prev[n * units + u] + i * g;
            c[n * units + u] = ct;
            h[n * units + u] = o * ct.tanh();
        }
    }
    (c, h)
}

/// Run an LSTM over `x: [N, T, D]` with weights `wx: [D, 4H]`, `wh: [H, 4H]`,
/// `b: [4H]`. Returns the cache holding every gate, cell and hidden state.
pub fn lstm_forward(
    x: &[f64],
    batch: usize,
    steps: usize,
    dim: usize,
    units: usize,
    wx: &[f64],
    wh: &[f64],
    b: &[f64],
) -> LstmCache {
    let g4 = 4 * units;
    let mut cache = LstmCache {
        gates: vec![0.0; steps * batch * g4],
        cells: vec![0.0; steps * batch * units],
        hidden: vec![0.0; steps * batch * units],
    };
    let mut h_prev = vec![0.0; batch * units];
    let mut c_prev = vec![0.0; batch * units];
    let mut xt = vec![0.0; batch * dim];
    for t in 0..steps {
        for n in 0..batch {
            xt[n * dim..(n + 1) * dim].copy_from_slice(&x[(n * steps + t) * dim..][..dim]);
        }
        let mut z = vec![0.0; batch * g4];
        for row in z.chunks_exact_mut(g4) {
            row.copy_from_slice(b);
        }
        matmul_acc(&xt, wx, &mut z, batch, dim, g4);
        matmul_acc(&h_prev, wh, &mut z, batch, units, g4);
        let (c, h) = lstm_cell(&mut z, &c_prev, units);
        cache.gates[t * batch * g4..(t + 1) * batch * g4].copy_from_slice(&z);
        cache.cells[t * batch * units..(t + 1) * batch * units].copy_from_slice(&c);
        cache.hidden[t * batch * units..(t + 1) * batch * units].copy_from_slice(&h);
        h_prev = h;
        c_prev = c;
    }
    cache
}

/// Backpropagation through time. `dh_seq: [T, N, H]` holds the loss
/// gradient w.r.t. each emitted hidden state. Returns `dx: [N, T, D]` and
/// accumulates weight gradients.
#[allow(clippy::too_many_arguments)]
pub fn lstm_backward(
    x: &[f64],
    batch: usize,
    steps: usize,
    dim: usize,
    units: usize,
    wx: &[f64],
    wh: &[f64],
    cache: &LstmCache,
    dh_seq: &[f64],
    dwx: &mut [f64],
    dwh: &mut [f64],
    db: &mut [f64],
) -> Vec<f64> {
    let g4 = 4 * units;
    let bu = batch * units;
    let mut dx = vec![0.0; x.len()];
    let mut dh_next = vec![0.0; bu];
    let mut dc_next = vec![0.0; bu];
    let mut xt = vec![0.0; batch * dim];
    let zeros = vec![0.0; bu];
    for t in (0..steps).rev() {
        let gates = &cache.gates[t * batch * g4..(t + 1) * batch * g4];
        let cells = &cache.cells[t * bu..(t + 1) * bu];
        let c_prev = if t > 0 { &cache.cells[(t - 1) * bu..t * bu] } else { &zeros[..] };
        let h_prev = if t > 0 { &cache.hidden[(t - 1) * bu..t * bu] } else { &zeros[..] };
        let mut dz = vec![0.0; batch * g4];
        for n in 0..batch {
            for u in 0..units {
                let k = n * units + u;
                let gr = &gates[n * g4..(n + 1) * g4];
                let (i, f, g, o) = (gr[u], gr[units + u], gr[2 * units + u], gr[3 * units + u]);
                let tc = cells[k].tanh();
                let dh = dh_seq[t * bu + k] + dh_next[k];
                let d_o = dh * tc;
                let dc = dh * o * (1.0 - tc * tc) + dc_next[k];
                let di = dc * g;
                let dg = dc * i;
                let df = dc * c_prev[k];
                dc_next[k] = dc * f;
                let dzr = &mut dz[n * g4..(n + 1) * g4];
                dzr[u] = di * i * (1.0 - i);
                dzr[units + u] = df * f * (1.0 - f);
                dzr[2 * units + u] = dg * (1.0 - g * g);
                dzr[3 * units + u] = d_o * o * (1.0 - o);
            }
        }
        for n in 0..batch {
            xt[n * dim..(n + 1) * dim].copy_from_slice(&x[(n * steps + t) * dim..][..dim]);
        }
        matmul_at_b_acc(&xt, &dz, dwx, batch, dim, g4);
        matmul_at_b_acc(h_prev, &dz, dwh, batch, units, g4);
        for row in dz.chunks_exact(g4) {
            for (d, v) in db.iter_mut().zip(row) {
                *d += v;
            }
        }
        let mut dxt = vec![0.0; batch * dim];
        matmul_a_bt_acc(&dz, wx, &mut dxt, batch, g4, dim);
        for n in 0..batch {
            dx[(n * steps + t) * dim..][..dim].copy_from_slice(&dxt[n * dim..(n + 1) * dim]);
        }
        dh_next.iter_mut().for_each(|v| *v = 0.0);
        matmul_a_bt_acc(&dz, wh, &mut dh_next, batch, g4, units);
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_geometry() {
        let w = Window::new(5, 5, 3, 2, true).unwrap();
        assert_eq!((w.out_h, w.out_w, w.pad_top, w.pad_left), (3, 3, 1, 1));
        let w = Window::new(26, 64, 2, 2, true).unwrap();
        assert_eq!((w.out_h, w.out_w, w.pad_top), (13, 32, 0));
        assert!(Window::new(2, 8, 3, 1, false).is_none());
        let w = Window::new(5, 5, 3, 2, false).unwrap();
        assert_eq!((w.out_h, w.out_w), (2, 2));
    }

    #[test]
    fn instance_norm_constant_channel_is_zero() {
        let x = vec![7.0; 12];
        let (y, _, _) = instance_norm_forward(&x, 1, 12, 1, 1e-5);
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn instance_norm_two_values() {
        let (y, mean, _) = instance_norm_forward(&[0.0, 2.0], 1, 2, 1, 1e-5);
        assert_eq!(mean[0], 1.0);
        assert!((y[0] + 1.0).abs() < 1e-5);
        assert!((y[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn maxpool_routes_to_single_maximum() {
        // 5×5 plane, unique maximum at the center (2, 2).
        let mut x: Vec<f64> = (0..25).map(|i| (i % 7) as f64 * 0.1).collect();
        x[12] = 10.0;
        let win = Window::new(5, 5, 3, 2, false).unwrap();
        let (y, arg) = maxpool_forward(&x, 1, &win, 1);
        // Every 3×3 window of a 5×5 plane at stride 2 contains the center.
        assert_eq!(y, vec![10.0; 4]);
        assert!(arg.iter().all(|&a| a == 12));
        let dx = maxpool_backward(&arg, &[1.0, 2.0, 3.0, 4.0], 25);
        assert_eq!(dx[12], 10.0);
        assert_eq!(dx.iter().sum::<f64>(), 10.0);
    }

    #[test]
    fn softmax_sums_to_one() {
        let y = softmax_rows(&[1000.0, 0.0, -5.0, 3.0, 0.1, 0.2, 0.3, 0.4], 4);
        for row in y.chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn matmul_variants_agree() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect(); // 2×3
        let b: Vec<f64> = (0..12).map(|v| v as f64 * 0.5).collect(); // 3×4
        let mut ab = vec![0.0; 8];
        matmul_acc(&a, &b, &mut ab, 2, 3, 4);
        // Transpose b to 4×3 and compute a·(bᵀ)ᵀ.
        let bt: Vec<f64> = (0..4).flat_map(|j| (0..3).map(move |i| (i, j))).map(|(i, j)| b[i * 4 + j]).collect();
        let mut ab2 = vec![0.0; 8];
        matmul_a_bt_acc(&a, &bt, &mut ab2, 2, 3, 4);
        assert_eq!(ab, ab2);
        // aᵀ·c with a: 2×3, c: 2×4.
        let mut atc = vec![0.0; 12];
        matmul_at_b_acc(&a, &ab, &mut atc, 2, 3, 4);
        assert_eq!(atc[0], a[0] * ab[0] + a[3] * ab[4]);
    }
}
