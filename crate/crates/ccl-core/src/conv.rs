//! Convolution, transposed convolution, and 2×2 max pooling, with exact
//! gradients for each.
//!
//! Convolution uses the cross-correlation convention (no kernel flip).
//! The primary path is im2col + matmul; the naive nested-loop form lives in
//! the test suite as an independent oracle. Transposed convolution is the
//! exact adjoint of a strided convolution and is implemented with the same
//! column buffers plus a scatter, so its gradients reuse the index map.

use crate::error::{CclError, Result};
use crate::tensor::{Scalar, Tensor};

fn out_extent(input: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    let span = input + 2 * padding;
    if span < k || (span - k) % stride != 0 {
        return Err(CclError::dim(format!(
            "conv output size not integral: input {input}, kernel {k}, stride {stride}, padding {padding}"
        )));
    }
    Ok((span - k) / stride + 1)
}

fn conv_dims<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<(usize, usize, usize, usize, usize, usize, usize, usize)> {
    if input.rank() != 4 || kernel.rank() != 4 {
        return Err(CclError::dim(format!(
            "conv2d expects rank-4 input and kernel, got {:?} and {:?}",
            input.shape(),
            kernel.shape()
        )));
    }
    let (b, c, h, w) = (
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    );
    let (f, ck, kh, kw) = (
        kernel.shape()[0],
        kernel.shape()[1],
        kernel.shape()[2],
        kernel.shape()[3],
    );
    if ck != c {
        return Err(CclError::dim(format!(
            "kernel channels {ck} vs input channels {c}"
        )));
    }
    if kh != kw {
        return Err(CclError::dim("non-square kernels unsupported".into()));
    }
    let oh = out_extent(h, kh, stride, padding)?;
    let ow = out_extent(w, kw, stride, padding)?;
    Ok((b, c, h, w, f, kh, oh, ow))
}

/// Unfold input patches into a [B·OH·OW × C·K·K] matrix. Column order is
/// (c, ky, kx), which fixes the summation order of the matmul path.
fn im2col<T: Scalar>(
    input: &Tensor<T>,
    k: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
) -> Tensor<T> {
    let (b, c, h, w) = (
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    );
    let cols_w = c * k * k;
    let mut cols = Tensor::zeros(&[b * oh * ow, cols_w]);
    let id = input.data();
    let cd = cols.data_mut();
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((bi * oh + oy) * ow + ox) * cols_w;
                for ci in 0..c {
                    let plane = (bi * c + ci) * h * w;
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = plane + iy as usize * w;
                        let dst = row + (ci * k + ky) * k;
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            cd[dst + kx] = id[src + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Fold a [B·OH·OW × C·K·K] column matrix back into [B×C×H×W] with
/// overlapping adds (the adjoint of `im2col`).
fn col2im<T: Scalar>(
    cols: &Tensor<T>,
    shape: &[usize],
    k: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
) -> Tensor<T> {
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let cols_w = c * k * k;
    let mut out = Tensor::zeros(shape);
    let od = out.data_mut();
    let cd = cols.data();
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((bi * oh + oy) * ow + ox) * cols_w;
                for ci in 0..c {
                    let plane = (bi * c + ci) * h * w;
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = plane + iy as usize * w;
                        let src = row + (ci * k + ky) * k;
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            od[dst + ix as usize] += cd[src + kx];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Reorder [B×F×OH×OW] into rows of shape [B·OH·OW × F].
fn nchw_to_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (b, f, oh, ow) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let mut out = Tensor::zeros(&[b * oh * ow, f]);
    let od = out.data_mut();
    let xd = x.data();
    for bi in 0..b {
        for fi in 0..f {
            let src = (bi * f + fi) * oh * ow;
            for p in 0..oh * ow {
                od[(bi * oh * ow + p) * f + fi] = xd[src + p];
            }
        }
    }
    out
}

/// Inverse of `nchw_to_rows`.
fn rows_to_nchw<T: Scalar>(rows: &Tensor<T>, b: usize, f: usize, oh: usize, ow: usize) -> Tensor<T> {
    let mut out = Tensor::zeros(&[b, f, oh, ow]);
    let od = out.data_mut();
    let rd = rows.data();
    for bi in 0..b {
        for fi in 0..f {
            let dst = (bi * f + fi) * oh * ow;
            for p in 0..oh * ow {
                od[dst + p] = rd[(bi * oh * ow + p) * f + fi];
            }
        }
    }
    out
}

/// Cross-correlation of `input` [B×C×H×W] with `kernel` [F×C×K×K].
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let (b, _c, _h, _w, f, k, oh, ow) = conv_dims(input, kernel, stride, padding)?;
    let cols = im2col(input, k, stride, padding, oh, ow);
    let kmat = kernel.reshaped(&[f, kernel.len() / f])?;
    let rows = cols.matmul(&kmat.transposed2()?)?;
    Ok(rows_to_nchw(&rows, b, f, oh, ow))
}

/// Exact gradients of `conv2d_forward` with respect to input and kernel.
pub fn conv2d_grads<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    upstream: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (b, _c, _h, _w, f, k, oh, ow) = conv_dims(input, kernel, stride, padding)?;
    if upstream.shape() != [b, f, oh, ow] {
        return Err(CclError::dim(format!(
            "upstream shape {:?}, expected {:?}",
            upstream.shape(),
            [b, f, oh, ow]
        )));
    }
    let up_rows = nchw_to_rows(upstream);
    let cols = im2col(input, k, stride, padding, oh, ow);
    // dK = upᵀ · cols, reshaped back to [F×C×K×K]
    let gk = up_rows.matmul_tn(&cols)?;
    let grad_kernel = gk.reshaped(kernel.shape())?;
    // dX = fold(up · Kmat)
    let kmat = kernel.reshaped(&[f, kernel.len() / f])?;
    let gcols = up_rows.matmul(&kmat)?;
    let grad_input = col2im(&gcols, input.shape(), k, stride, padding, oh, ow);
    Ok((grad_input, grad_kernel))
}

/// Per-sample gradient of the bias of a conv layer: sum of upstream over
/// batch and spatial positions → [F].
pub fn conv2d_bias_grad<T: Scalar>(upstream: &Tensor<T>) -> Result<Tensor<T>> {
    if upstream.rank() != 4 {
        return Err(CclError::dim("bias grad expects rank-4 upstream".into()));
    }
    let (b, f, oh, ow) = (
        upstream.shape()[0],
        upstream.shape()[1],
        upstream.shape()[2],
        upstream.shape()[3],
    );
    let mut out = Tensor::zeros(&[f]);
    let od = out.data_mut();
    let ud = upstream.data();
    for bi in 0..b {
        for fi in 0..f {
            let src = (bi * f + fi) * oh * ow;
            let mut acc = T::zero();
            for p in 0..oh * ow {
                acc += ud[src + p];
            }
            od[fi] += acc;
        }
    }
    Ok(out)
}

/// Output spatial size of `conv_transpose2d`.
pub fn conv_t_out_extent(input: usize, k: usize, stride: usize, padding: usize, output_padding: usize) -> usize {
    (input - 1) * stride + k + output_padding - 2 * padding
}

fn conv_t_dims<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
) -> Result<(usize, usize, usize, usize, usize)> {
    if input.rank() != 4 || kernel.rank() != 4 {
        return Err(CclError::dim("conv_transpose2d expects rank-4 tensors".into()));
    }
    let (b, cin, hy, wx) = (
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    );
    if hy != wx {
        return Err(CclError::dim("non-square inputs unsupported in transpose conv".into()));
    }
    let (cout, cin2, kh, kw) = (
        kernel.shape()[0],
        kernel.shape()[1],
        kernel.shape()[2],
        kernel.shape()[3],
    );
    if cin2 != cin || kh != kw {
        return Err(CclError::dim(format!(
            "transpose kernel {:?} incompatible with input {:?}",
            kernel.shape(),
            input.shape()
        )));
    }
    Ok((b, cin, hy, cout, kh))
}

/// Kernel [Cout×Cin×K×K] viewed as a [Cin × Cout·K·K] matrix.
fn conv_t_weight_matrix<T: Scalar>(kernel: &Tensor<T>) -> Tensor<T> {
    let (cout, cin, k, _) = (
        kernel.shape()[0],
        kernel.shape()[1],
        kernel.shape()[2],
        kernel.shape()[3],
    );
    let mut w = Tensor::zeros(&[cin, cout * k * k]);
    let wd = w.data_mut();
    let kd = kernel.data();
    for co in 0..cout {
        for ci in 0..cin {
            for kk in 0..k * k {
                wd[ci * cout * k * k + co * k * k + kk] = kd[(co * cin + ci) * k * k + kk];
            }
        }
    }
    w
}

/// Scatter target index for one (input position, kernel offset) pair, or
/// None if it falls outside the output plane.
#[inline(always)]
fn scatter_pos(
    i: usize,
    kk: usize,
    stride: usize,
    padding: usize,
    out_extent: usize,
) -> Option<usize> {
    let o = (i * stride + kk) as isize - padding as isize;
    if o < 0 || o >= out_extent as isize {
        None
    } else {
        Some(o as usize)
    }
}

/// Transposed convolution (fractionally-strided): `input` [B×Cin×S×S],
/// `kernel` [Cout×Cin×K×K] → [B×Cout×S′×S′]. With stride 2, padding 1,
/// output_padding 1 and K = 3 this exactly doubles the spatial size,
/// mirroring a stride-2 downsampling block.
pub fn conv_transpose2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: usize,
    output_padding: usize,
) -> Result<Tensor<T>> {
    let (b, _cin, s, cout, k) = conv_t_dims(input, kernel)?;
    let so = conv_t_out_extent(s, k, stride, padding, output_padding);
    let in_rows = nchw_to_rows(input);
    let wmat = conv_t_weight_matrix(kernel);
    let cols = in_rows.matmul(&wmat)?; // [B·S·S × Cout·K·K]
    let mut out = Tensor::zeros(&[b, cout, so, so]);
    let od = out.data_mut();
    let cd = cols.data();
    let cw = cout * k * k;
    for bi in 0..b {
        for iy in 0..s {
            for ix in 0..s {
                let row = ((bi * s + iy) * s + ix) * cw;
                for co in 0..cout {
                    let plane = (bi * cout + co) * so * so;
                    for ky in 0..k {
                        let Some(oy) = scatter_pos(iy, ky, stride, padding, so) else {
                            continue;
                        };
                        for kx in 0..k {
                            let Some(ox) = scatter_pos(ix, kx, stride, padding, so) else {
                                continue;
                            };
                            od[plane + oy * so + ox] += cd[row + (co * k + ky) * k + kx];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gather the adjoint columns of the transpose-conv scatter: for each input
/// position, the [Cout·K·K] slice of `upstream` the scatter would have
/// written to (zeros where out of bounds).
fn conv_t_gather_cols<T: Scalar>(
    upstream: &Tensor<T>,
    s: usize,
    k: usize,
    stride: usize,
    padding: usize,
) -> Tensor<T> {
    let (b, cout, so, _) = (
        upstream.shape()[0],
        upstream.shape()[1],
        upstream.shape()[2],
        upstream.shape()[3],
    );
    let cw = cout * k * k;
    let mut cols = Tensor::zeros(&[b * s * s, cw]);
    let cd = cols.data_mut();
    let ud = upstream.data();
    for bi in 0..b {
        for iy in 0..s {
            for ix in 0..s {
                let row = ((bi * s + iy) * s + ix) * cw;
                for co in 0..cout {
                    let plane = (bi * cout + co) * so * so;
                    for ky in 0..k {
                        let Some(oy) = scatter_pos(iy, ky, stride, padding, so) else {
                            continue;
                        };
                        for kx in 0..k {
                            let Some(ox) = scatter_pos(ix, kx, stride, padding, so) else {
                                continue;
                            };
                            cd[row + (co * k + ky) * k + kx] = ud[plane + oy * so + ox];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Exact gradients of `conv_transpose2d` with respect to input and kernel.
pub fn conv_transpose2d_grads<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    upstream: &Tensor<T>,
    stride: usize,
    padding: usize,
    output_padding: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (b, cin, s, cout, k) = conv_t_dims(input, kernel)?;
    let so = conv_t_out_extent(s, k, stride, padding, output_padding);
    if upstream.shape() != [b, cout, so, so] {
        return Err(CclError::dim(format!(
            "upstream shape {:?}, expected {:?}",
            upstream.shape(),
            [b, cout, so, so]
        )));
    }
    let gcols = conv_t_gather_cols(upstream, s, k, stride, padding);
    let in_rows = nchw_to_rows(input);
    // dX rows = gcols · Wᵀ
    let wmat = conv_t_weight_matrix(kernel);
    let gin_rows = gcols.matmul(&wmat.transposed2()?)?;
    let grad_input = rows_to_nchw(&gin_rows, b, cin, s, s);
    // dW = in_rowsᵀ · gcols, then back to [Cout×Cin×K×K]
    let gw = in_rows.matmul_tn(&gcols)?; // [Cin × Cout·K·K]
    let mut grad_kernel = Tensor::zeros(kernel.shape());
    {
        let gkd = grad_kernel.data_mut();
        let gwd = gw.data();
        for co in 0..cout {
            for ci in 0..cin {
                for kk in 0..k * k {
                    gkd[(co * cin + ci) * k * k + kk] = gwd[ci * cout * k * k + co * k * k + kk];
                }
            }
        }
    }
    Ok((grad_input, grad_kernel))
}

/// 2×2 max pooling with stride 2. The mask records each window's winner as
/// an index in row-major window order (0..4); ties go to the first index.
pub fn maxpool2x2<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<u8>)> {
    if input.rank() != 4 {
        return Err(CclError::dim("maxpool2x2 expects rank-4 input".into()));
    }
    let (b, c, h, w) = (
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    );
    if h % 2 != 0 || w % 2 != 0 {
        return Err(CclError::dim(format!("maxpool2x2 needs even extents, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[b, c, oh, ow]);
    let mut mask = vec![0u8; b * c * oh * ow];
    let id = input.data();
    let od = out.data_mut();
    for p in 0..b * c {
        let plane = p * h * w;
        let oplane = p * oh * ow;
        for oy in 0..oh {
            for ox in 0..ow {
                let base = plane + (oy * 2) * w + ox * 2;
                let cand = [id[base], id[base + 1], id[base + w], id[base + w + 1]];
                let mut best = 0usize;
                for (j, &v) in cand.iter().enumerate() {
                    if v > cand[best] {
                        best = j;
                    }
                }
                od[oplane + oy * ow + ox] = cand[best];
                mask[oplane + oy * ow + ox] = best as u8;
            }
        }
    }
    Ok((out, mask))
}

/// Route pooled gradients back through the argmax mask.
pub fn maxpool2x2_backward<T: Scalar>(
    upstream: &Tensor<T>,
    mask: &[u8],
    input_shape: &[usize],
) -> Result<Tensor<T>> {
    let (b, c, h, w) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
    let (oh, ow) = (h / 2, w / 2);
    if upstream.shape() != [b, c, oh, ow] || mask.len() != upstream.len() {
        return Err(CclError::dim("maxpool backward shape mismatch".into()));
    }
    let mut out = Tensor::zeros(input_shape);
    let od = out.data_mut();
    let ud = upstream.data();
    for p in 0..b * c {
        let plane = p * h * w;
        let oplane = p * oh * ow;
        for oy in 0..oh {
            for ox in 0..ow {
                let j = mask[oplane + oy * ow + ox] as usize;
                let (ky, kx) = (j / 2, j % 2);
                od[plane + (oy * 2 + ky) * w + ox * 2 + kx] = ud[oplane + oy * ow + ox];
            }
        }
    }
    Ok(out)
}
