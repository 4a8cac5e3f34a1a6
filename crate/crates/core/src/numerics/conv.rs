//! Direct 2-D convolution kernels shared by the strided convolution and its
//! transpose. A transposed convolution is the adjoint of a convolution whose
//! input is the transposed convolution's output, so three kernels cover both
//! operators and all of their gradients.

/// Shape of a strided, zero-padded 2-D convolution over `(N, C, H, W)` data.
///
/// `in_*` describes the convolution input, `out_*` its output. Weights are laid
/// out `(out_channels, in_channels, kernel, kernel)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn in_len(&self) -> usize {
        self.batch * self.in_channels * self.in_h * self.in_w
    }

    pub fn out_len(&self) -> usize {
        self.batch * self.out_channels * self.out_h * self.out_w
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
    }
}

/// Range of output coordinates `o` for which `o * stride + offset` lands in
/// `0..in_len`.
#[inline]
fn valid_range(offset: isize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { (-offset + s - 1) / s };
    let hi_num = in_len as isize - 1 - offset;
    if hi_num < 0 {
        return (0, 0);
    }
    let hi = (hi_num / s + 1).min(out_len as isize);
    if hi <= lo {
        (0, 0)
    } else {
        (lo as usize, hi as usize)
    }
}

/// Unrolls the receptive fields of one image into a `(Cin*K*K, out_h*out_w)`
/// matrix; taps that fall into the padding are zero.
fn im2col(g: &ConvGeometry, image: &[f64], col: &mut [f64]) {
    let k = g.kernel;
    let plane = g.out_h * g.out_w;
    col.fill(0.0);
    for c in 0..g.in_channels {
        let map = &image[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            let oy_off = ky as isize - g.pad as isize;
            let (oy0, oy1) = valid_range(oy_off, g.stride, g.in_h, g.out_h);
            for kx in 0..k {
                let ox_off = kx as isize - g.pad as isize;
                let (ox0, ox1) = valid_range(ox_off, g.stride, g.in_w, g.out_w);
                let row = &mut col[((c * k + ky) * k + kx) * plane..][..plane];
                for oy in oy0..oy1 {
                    let iy = ((oy * g.stride) as isize + oy_off) as usize;
                    let src = &map[iy * g.in_w..(iy + 1) * g.in_w];
                    let dst = &mut row[oy * g.out_w..(oy + 1) * g.out_w];
                    for ox in ox0..ox1 {
                        dst[ox] = src[((ox * g.stride) as isize + ox_off) as usize];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds a column matrix back onto an image.
fn col2im(g: &ConvGeometry, col: &[f64], image: &mut [f64]) {
    let k = g.kernel;
    let plane = g.out_h * g.out_w;
    for c in 0..g.in_channels {
        let map = &mut image[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            let oy_off = ky as isize - g.pad as isize;
            let (oy0, oy1) = valid_range(oy_off, g.stride, g.in_h, g.out_h);
            for kx in 0..k {
                let ox_off = kx as isize - g.pad as isize;
                let (ox0, ox1) = valid_range(ox_off, g.stride, g.in_w, g.out_w);
                let row = &col[((c * k + ky) * k + kx) * plane..][..plane];
                for oy in oy0..oy1 {
                    let iy = ((oy * g.stride) as isize + oy_off) as usize;
                    let dst = &mut map[iy * g.in_w..(iy + 1) * g.in_w];
                    let src = &row[oy * g.out_w..(oy + 1) * g.out_w];
                    for ox in ox0..ox1 {
                        dst[((ox * g.stride) as isize + ox_off) as usize] += src[ox];
                    }
                }
            }
        }
    }
}

/// `c += op(a) * op(b)` for row-major `c` of shape `(m, n)`. `a` holds
/// `(m, k)`, or `(k, m)` when `a_t`; `b` holds `(k, n)`, or `(n, k)` when `b_t`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides address exactly the asserted extents of each slice.
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
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn col_rows(g: &ConvGeometry) -> usize {
    g.in_channels * g.kernel * g.kernel
}

/// `out += conv(input, weight)`.
pub fn forward(g: &ConvGeometry, input: &[f64], weight: &[f64], out: &mut [f64]) {
    let plane = g.out_h * g.out_w;
    let rows = col_rows(g);
    let in_img = g.in_channels * g.in_h * g.in_w;
    let out_img = g.out_channels * plane;
    let mut col = vec![0.0; rows * plane];
    for n in 0..g.batch {
        im2col(g, &input[n * in_img..(n + 1) * in_img], &mut col);
        gemm(g.out_channels, rows, plane, weight, false, &col, false, &mut out[n * out_img..(n + 1) * out_img]);
    }
}

/// `grad_input += conv^T(grad_out, weight)`: the adjoint of [`forward`] with
/// respect to its input.
pub fn adjoint_input(g: &ConvGeometry, grad_out: &[f64], weight: &[f64], grad_input: &mut [f64]) {
    let plane = g.out_h * g.out_w;
    let rows = col_rows(g);
    let in_img = g.in_channels * g.in_h * g.in_w;
    let out_img = g.out_channels * plane;
    let mut col = vec![0.0; rows * plane];
    for n in 0..g.batch {
        col.fill(0.0);
        gemm(rows, g.out_channels, plane, weight, true, &grad_out[n * out_img..(n + 1) * out_img], false, &mut col);
        col2im(g, &col, &mut grad_input[n * in_img..(n + 1) * in_img]);
    }
}

/// `grad_weight += d conv(input, W) / dW` contracted with `grad_out`.
pub fn weight_grad(g: &ConvGeometry, input: &[f64], grad_out: &[f64], grad_weight: &mut [f64]) {
    let plane = g.out_h * g.out_w;
    let rows = col_rows(g);
    let in_img = g.in_channels * g.in_h * g.in_w;
    let out_img = g.out_channels * plane;
    let mut col = vec![0.0; rows * plane];
    for n in 0..g.batch {
        im2col(g, &input[n * in_img..(n + 1) * in_img], &mut col);
        gemm(g.out_channels, plane, rows, &grad_out[n * out_img..(n + 1) * out_img], false, &col, true, grad_weight);
    }
}

/// Adds a per-channel bias to `(N, C, H*W)` data.
pub fn add_bias(data: &mut [f64], bias: &[f64], batch: usize, plane: usize) {
    let channels = bias.len();
    for n in 0..batch {
        for (c, &b) in bias.iter().enumerate() {
            let base = (n * channels + c) * plane;
            data[base..base + plane].iter_mut().for_each(|v| *v += b);
        }
    }
}

/// Per-channel sum of `(N, C, H*W)` data, accumulated into `grad_bias`.
pub fn bias_grad(grad_out: &[f64], grad_bias: &mut [f64], batch: usize, plane: usize) {
    let channels = grad_bias.len();
    for n in 0..batch {
        for (c, gb) in grad_bias.iter_mut().enumerate() {
            let base = (n * channels + c) * plane;
            *gb += grad_out[base..base + plane].iter().sum::<f64>();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Naive reference with explicit bounds checks for every tap.
    fn reference_forward(g: &ConvGeometry, input: &[f64], weight: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; g.out_len()];
        let k = g.kernel;
        for n in 0..g.batch {
            for o in 0..g.out_channels {
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        let mut acc = 0.0;
                        for c in 0..g.in_channels {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= g.in_h as isize || ix >= g.in_w as isize {
                                        continue;
                                    }
                                    let iv = input[((n * g.in_channels + c) * g.in_h + iy as usize) * g.in_w
                                        + ix as usize];
                                    acc += iv * weight[((o * g.in_channels + c) * k + ky) * k + kx];
                                }
                            }
                        }
                        out[((n * g.out_channels + o) * g.out_h + oy) * g.out_w + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn geometry() -> ConvGeometry {
        ConvGeometry {
            batch: 2,
            in_channels: 3,
            in_h: 7,
            in_w: 6,
            out_channels: 2,
            out_h: 4,
            out_w: 3,
            kernel: 3,
            stride: 2,
            pad: 1,
        }
    }

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        (0..n)
            .map(|i| (((i as u64 * 2654435761 + seed * 97) % 1000) as f64) / 500.0 - 1.0)
            .collect()
    }

    #[test]
    fn forward_matches_naive() {
        let g = geometry();
        let x = pseudo(g.in_len(), 1);
        let w = pseudo(g.weight_len(), 2);
        let mut out = vec![0.0; g.out_len()];
        forward(&g, &x, &w, &mut out);
        let expect = reference_forward(&g, &x, &w);
        for (a, b) in out.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn adjoint_identity_holds() {
        // <conv(x), y> == <x, conv^T(y)> and the same pairing for the weights.
        let g = geometry();
        let x = pseudo(g.in_len(), 3);
        let w = pseudo(g.weight_len(), 4);
        let y = pseudo(g.out_len(), 5);
        let mut cx = vec![0.0; g.out_len()];
        forward(&g, &x, &w, &mut cx);
        let lhs: f64 = cx.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut aty = vec![0.0; g.in_len()];
        adjoint_input(&g, &y, &w, &mut aty);
        let rhs: f64 = x.iter().zip(&aty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
        let mut gw = vec![0.0; g.weight_len()];
        weight_grad(&g, &x, &y, &mut gw);
        let rhs_w: f64 = w.iter().zip(&gw).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs_w).abs() < 1e-10);
    }

    #[test]
    fn valid_range_edges() {
        assert_eq!(valid_range(-1, 2, 7, 4), (1, 4));
        assert_eq!(valid_range(1, 2, 7, 4), (0, 3));
        assert_eq!(valid_range(0, 1, 3, 3), (0, 3));
        assert_eq!(valid_range(5, 1, 3, 3), (0, 0));
    }
}
