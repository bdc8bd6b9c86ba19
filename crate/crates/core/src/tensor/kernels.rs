//! Raw numeric kernels shared by the tape ops and the tape-free inference
//! path. All functions work on flat row-major slices.

use rayon::prelude::*;

/// `c = alpha * op(a) * op(b) + beta * c` for row-major operands, where
/// `op(a)` is `m × k` and `op(b)` is `k × n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the strided kernel touches.
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

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.height + 2 * self.pad + 1 - self.kh
    }
    pub fn out_w(&self) -> usize {
        self.width + 2 * self.pad + 1 - self.kw
    }
    fn patch(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }
    fn out_plane(&self) -> usize {
        self.out_h() * self.out_w()
    }
    fn in_sample(&self) -> usize {
        self.in_ch * self.height * self.width
    }
}

fn im2col(g: &ConvGeom, x: &[f64], cols: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let l = oh * ow;
    for c in 0..g.in_ch {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * l..(row + 1) * l];
                for oy in 0..oh {
                    let iy = (oy + ky) as isize - g.pad as isize;
                    for ox in 0..ow {
                        let ix = (ox + kx) as isize - g.pad as isize;
                        dst[oy * ow + ox] = if iy >= 0
                            && (iy as usize) < g.height
                            && ix >= 0
                            && (ix as usize) < g.width
                        {
                            x[(c * g.height + iy as usize) * g.width + ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add(g: &ConvGeom, cols: &[f64], dx: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let l = oh * ow;
    for c in 0..g.in_ch {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * l..(row + 1) * l];
                for oy in 0..oh {
                    let iy = (oy + ky) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.height {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox + kx) as isize - g.pad as isize;
                        if ix < 0 || ix as usize >= g.width {
                            continue;
                        }
                        dx[(c * g.height + iy as usize) * g.width + ix as usize] +=
                            src[oy * ow + ox];
                    }
                }
            }
        }
    }
}

/// Stride-1 zero-padded convolution (cross-correlation), no bias.
pub fn conv2d_forward(g: &ConvGeom, x: &[f64], w: &[f64]) -> Vec<f64> {
    let l = g.out_plane();
    let k = g.patch();
    let mut out = vec![0.0; g.batch * g.out_ch * l];
    out.par_chunks_mut(g.out_ch * l)
        .zip(x.par_chunks(g.in_sample()))
        .for_each_init(
            || vec![0.0; k * l],
            |cols, (o, xb)| {
                im2col(g, xb, cols);
                gemm(g.out_ch, k, l, w, false, cols, false, o, 0.0);
            },
        );
    out
}

/// Gradients of [`conv2d_forward`]. Either output may be skipped.
pub fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let l = g.out_plane();
    let k = g.patch();
    let dx = want_dx.then(|| {
        let mut dx = vec![0.0; g.batch * g.in_sample()];
        dx.par_chunks_mut(g.in_sample())
            .zip(dout.par_chunks(g.out_ch * l))
            .for_each_init(
                || vec![0.0; k * l],
                |dcols, (dxb, db)| {
                    gemm(k, g.out_ch, l, w, true, db, false, dcols, 0.0);
                    col2im_add(g, dcols, dxb);
                },
            );
        dx
    });
    let dw = want_dw.then(|| {
        // Per-sample partials reduced in batch order keep the sum
        // independent of the thread count.
        let partials: Vec<Vec<f64>> = x
            .par_chunks(g.in_sample())
            .zip(dout.par_chunks(g.out_ch * l))
            .map(|(xb, db)| {
                let mut cols = vec![0.0; k * l];
                im2col(g, xb, &mut cols);
                let mut part = vec![0.0; g.out_ch * k];
                gemm(g.out_ch, l, k, db, false, &cols, true, &mut part, 0.0);
                part
            })
            .collect();
        let mut dw = vec![0.0; g.out_ch * k];
        for p in &partials {
            for (a, b) in dw.iter_mut().zip(p) {
                *a += b;
            }
        }
        dw
    });
    (dx, dw)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeom {
    pub planes: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl PoolGeom {
    pub fn out_h(&self) -> usize {
        (self.height - self.kernel) / self.stride + 1
    }
    pub fn out_w(&self) -> usize {
        (self.width - self.kernel) / self.stride + 1
    }
}

/// Average pooling without padding. Callers ensure `kernel <= height, width`.
pub fn avg_pool_forward(g: &PoolGeom, x: &[f64]) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let inv = 1.0 / (g.kernel * g.kernel) as f64;
    let mut out = vec![0.0; g.planes * oh * ow];
    for p in 0..g.planes {
        let xp = &x[p * g.height * g.width..(p + 1) * g.height * g.width];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for dy in 0..g.kernel {
                    let row = &xp[(oy * g.stride + dy) * g.width..];
                    for dx in 0..g.kernel {
                        acc += row[ox * g.stride + dx];
                    }
                }
                out[(p * oh + oy) * ow + ox] = acc * inv;
            }
        }
    }
    out
}

pub fn avg_pool_backward(g: &PoolGeom, dout: &[f64]) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let inv = 1.0 / (g.kernel * g.kernel) as f64;
    let mut dx = vec![0.0; g.planes * g.height * g.width];
    for p in 0..g.planes {
        let dp = &mut dx[p * g.height * g.width..(p + 1) * g.height * g.width];
        for oy in 0..oh {
            for ox in 0..ow {
                let d = dout[(p * oh + oy) * ow + ox] * inv;
                for dy in 0..g.kernel {
                    for dxx in 0..g.kernel {
                        dp[(oy * g.stride + dy) * g.width + ox * g.stride + dxx] += d;
                    }
                }
            }
        }
    }
    dx
}

/// Per-plane normalization to zero mean and unit variance. Returns the
/// normalized values and the per-plane inverse standard deviations.
pub fn instance_norm_forward(x: &[f64], plane: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let planes = x.len() / plane;
    let mut y = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; planes];
    for p in 0..planes {
        let xs = &x[p * plane..(p + 1) * plane];
        let mean = xs.iter().sum::<f64>() / plane as f64;
        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / plane as f64;
        let inv = 1.0 / (var + eps).sqrt();
        inv_std[p] = inv;
        for (o, v) in y[p * plane..(p + 1) * plane].iter_mut().zip(xs) {
            *o = (v - mean) * inv;
        }
    }
    (y, inv_std)
}

pub fn instance_norm_backward(y: &[f64], inv_std: &[f64], dy: &[f64], plane: usize) -> Vec<f64> {
    let mut dx = vec![0.0; y.len()];
    let n = plane as f64;
    for (p, &inv) in inv_std.iter().enumerate() {
        let r = p * plane..(p + 1) * plane;
        let (ys, dys) = (&y[r.clone()], &dy[r.clone()]);
        let sum_dy: f64 = dys.iter().sum();
        let sum_dy_y: f64 = dys.iter().zip(ys).map(|(a, b)| a * b).sum();
        for ((o, &d), &yv) in dx[r].iter_mut().zip(dys).zip(ys) {
            *o = inv / n * (n * d - sum_dy - yv * sum_dy_y);
        }
    }
    dx
}

/// Adds `bias[c]` to every element of channel `c` in a `[B, C, rest...]`
/// layout where `inner` is the product of the trailing dimensions.
pub fn add_channel_bias(x: &mut [f64], bias: &[f64], inner: usize) {
    let ch = bias.len();
    for (i, chunk) in x.chunks_mut(inner).enumerate() {
        let b = bias[i % ch];
        for v in chunk {
            *v += b;
        }
    }
}

pub fn relu_inplace(x: &mut [f64]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Row-wise softmax of a `rows × cols` matrix.
pub fn softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (o, row) in out.chunks_mut(cols).zip(x.chunks(cols)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (oi, &v) in o.iter_mut().zip(row) {
            *oi = (v - max).exp();
            total += *oi;
        }
        for oi in o {
            *oi /= total;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(g: &ConvGeom, x: &[f64], w: &[f64]) -> Vec<f64> {
        let (oh, ow) = (g.out_h(), g.out_w());
        let mut out = vec![0.0; g.batch * g.out_ch * oh * ow];
        for b in 0..g.batch {
            for o in 0..g.out_ch {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for c in 0..g.in_ch {
                            for ky in 0..g.kh {
                                for kx in 0..g.kw {
                                    let iy = oy as isize + ky as isize - g.pad as isize;
                                    let ix = ox as isize + kx as isize - g.pad as isize;
                                    if iy < 0
                                        || ix < 0
                                        || iy as usize >= g.height
                                        || ix as usize >= g.width
                                    {
                                        continue;
                                    }
                                    acc += x[((b * g.in_ch + c) * g.height + iy as usize)
                                        * g.width
                                        + ix as usize]
                                        * w[((o * g.in_ch + c) * g.kh + ky) * g.kw + kx];
                                }
                            }
                        }
                        out[((b * g.out_ch + o) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loop() {
        let g = ConvGeom {
            batch: 2,
            in_ch: 3,
            height: 5,
            width: 4,
            out_ch: 2,
            kh: 3,
            kw: 3,
            pad: 1,
        };
        let x: Vec<f64> = (0..2 * 3 * 5 * 4).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let w: Vec<f64> = (0..2 * 3 * 9).map(|i| ((i * 5) % 7) as f64 * 0.1 - 0.3).collect();
        let fast = conv2d_forward(&g, &x, &w);
        let slow = naive_conv(&g, &x, &w);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, true, &b, false, &mut c, 0.0);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, &mut c, 0.0);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn pool_geometry_three_by_two() {
        let g = PoolGeom {
            planes: 1,
            height: 28,
            width: 28,
            kernel: 3,
            stride: 2,
        };
        assert_eq!((g.out_h(), g.out_w()), (13, 13));
        let x = vec![1.0; 28 * 28];
        assert!(avg_pool_forward(&g, &x).iter().all(|&v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn instance_norm_zero_mean_unit_var() {
        let x: Vec<f64> = (0..16).map(|i| (i as f64).sin() * 3.0 + 2.0).collect();
        let (y, _) = instance_norm_forward(&x, 8, 0.0);
        for p in y.chunks(8) {
            let m = p.iter().sum::<f64>() / 8.0;
            let v = p.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 8.0;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-9);
        }
    }
}
