//! Direct 2-D convolution (cross-correlation) kernels and their adjoints.
//!
//! Hot path of the whole crate. The loops are ordered so the innermost
//! pass runs over contiguous output columns, which lets the compiler
//! vectorize the fused multiply-adds. Stride 1 takes the fast path; the
//! general stride falls back to an indexed loop.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Output spatial size: floor((in + 2*padding - k) / stride) + 1.
pub fn out_dim(input: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = input + 2 * padding;
    if padded < k {
        return Err(Error::InvalidArg(format!(
            "kernel size {k} exceeds padded input extent {padded}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

fn check_args(input: &Tensor, kernel: &Tensor, bias: &Tensor, stride: usize) -> Result<()> {
    let [_, c_in, _, _] = input.shape();
    let [c_out, kc_in, kh, kw] = kernel.shape();
    if kh != kw {
        return Err(Error::InvalidArg(format!(
            "only square kernels are supported, got {kh}x{kw}"
        )));
    }
    if kc_in != c_in {
        return Err(Error::ShapeMismatch {
            context: "conv2d input channels vs kernel",
            lhs: input.shape(),
            rhs: kernel.shape(),
        });
    }
    if bias.shape() != [1, c_out, 1, 1] {
        return Err(Error::ShapeMismatch {
            context: "conv2d bias (expected [1, c_out, 1, 1])",
            lhs: bias.shape(),
            rhs: kernel.shape(),
        });
    }
    if stride == 0 {
        return Err(Error::InvalidArg("conv2d stride must be >= 1".into()));
    }
    Ok(())
}

pub fn forward(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    check_args(input, kernel, bias, stride)?;
    let [n_batch, c_in, h, w] = input.shape();
    let [c_out, _, k, _] = kernel.shape();
    let oh = out_dim(h, k, stride, padding)?;
    let ow = out_dim(w, k, stride, padding)?;

    let mut out = Tensor::zeros([n_batch, c_out, oh, ow]);
    let kd = kernel.data();
    let id = input.data();
    let bd = bias.data();
    let od = out.data_mut();

    for n in 0..n_batch {
        for co in 0..c_out {
            let out_plane = &mut od[((n * c_out + co) * oh) * ow..][..oh * ow];
            out_plane.fill(bd[co]);
            for ci in 0..c_in {
                let in_plane = &id[((n * c_in + ci) * h) * w..][..h * w];
                let kbase = ((co * c_in + ci) * k) * k;
                for ky in 0..k {
                    for kx in 0..k {
                        let wgt = kd[kbase + ky * k + kx];
                        if wgt == 0.0 {
                            continue;
                        }
                        accumulate_shifted(
                            out_plane, in_plane, wgt, oh, ow, h, w, ky, kx, stride, padding,
                        );
                    }
                }
            }
        }
    }
    Ok(out)
}

/// out[oy, ox] += wgt * in[oy*stride + ky - padding, ox*stride + kx - padding]
/// over the in-bounds region.
#[allow(clippy::too_many_arguments)]
#[inline]
fn accumulate_shifted(
    out_plane: &mut [f64],
    in_plane: &[f64],
    wgt: f64,
    oh: usize,
    ow: usize,
    h: usize,
    w: usize,
    ky: usize,
    kx: usize,
    stride: usize,
    padding: usize,
) {
    for oy in 0..oh {
        let iy = (oy * stride + ky) as isize - padding as isize;
        if iy < 0 || iy >= h as isize {
            continue;
        }
        let in_row = &in_plane[iy as usize * w..][..w];
        let out_row = &mut out_plane[oy * ow..][..ow];
        if stride == 1 {
            // ox + kx - padding must land in [0, w)
            let lo = padding.saturating_sub(kx);
            let hi = (w + padding).saturating_sub(kx).min(ow);
            if lo >= hi {
                continue;
            }
            let off = (lo + kx) as isize - padding as isize;
            let src = &in_row[off as usize..][..hi - lo];
            for (d, s) in out_row[lo..hi].iter_mut().zip(src) {
                *d += wgt * s;
            }
        } else {
            for (ox, d) in out_row.iter_mut().enumerate() {
                let ix = (ox * stride + kx) as isize - padding as isize;
                if ix >= 0 && ix < w as isize {
                    *d += wgt * in_row[ix as usize];
                }
            }
        }
    }
}

/// Gradient with respect to the input.
pub fn backward_input(
    grad_out: &Tensor,
    kernel: &Tensor,
    input_shape: [usize; 4],
    stride: usize,
    padding: usize,
) -> Tensor {
    let [n_batch, c_in, h, w] = input_shape;
    let [c_out, _, k, _] = kernel.shape();
    let [_, _, oh, ow] = grad_out.shape();

    let mut grad_in = Tensor::zeros(input_shape);
    let gd = grad_out.data();
    let kd = kernel.data();
    let gid = grad_in.data_mut();

    for n in 0..n_batch {
        for ci in 0..c_in {
            let gi_plane = &mut gid[((n * c_in + ci) * h) * w..][..h * w];
            for co in 0..c_out {
                let go_plane = &gd[((n * c_out + co) * oh) * ow..][..oh * ow];
                let kbase = ((co * c_in + ci) * k) * k;
                for ky in 0..k {
                    for kx in 0..k {
                        let wgt = kd[kbase + ky * k + kx];
                        if wgt == 0.0 {
                            continue;
                        }
                        // Adjoint of accumulate_shifted: scatter grad_out back
                        // onto the input positions it read.
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let go_row = &go_plane[oy * ow..][..ow];
                            let gi_row = &mut gi_plane[iy as usize * w..][..w];
                            if stride == 1 {
                                let lo = padding.saturating_sub(kx);
                                let hi = (w + padding).saturating_sub(kx).min(ow);
                                if lo >= hi {
                                    continue;
                                }
                                let off = lo + kx - padding;
                                let dst = &mut gi_row[off..][..hi - lo];
                                for (d, g) in dst.iter_mut().zip(&go_row[lo..hi]) {
                                    *d += wgt * g;
                                }
                            } else {
                                for (ox, g) in go_row.iter().enumerate() {
                                    let ix = (ox * stride + kx) as isize - padding as isize;
                                    if ix >= 0 && ix < w as isize {
                                        gi_row[ix as usize] += wgt * g;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    grad_in
}

/// Gradient with respect to the kernel.
pub fn backward_kernel(
    grad_out: &Tensor,
    input: &Tensor,
    kernel_shape: [usize; 4],
    stride: usize,
    padding: usize,
) -> Tensor {
    let [n_batch, c_in, h, w] = input.shape();
    let [c_out, _, k, _] = kernel_shape;
    let [_, _, oh, ow] = grad_out.shape();

    let mut grad_k = Tensor::zeros(kernel_shape);
    let gd = grad_out.data();
    let id = input.data();
    let gkd = grad_k.data_mut();

    for n in 0..n_batch {
        for co in 0..c_out {
            let go_plane = &gd[((n * c_out + co) * oh) * ow..][..oh * ow];
            for ci in 0..c_in {
                let in_plane = &id[((n * c_in + ci) * h) * w..][..h * w];
                let kbase = ((co * c_in + ci) * k) * k;
                for ky in 0..k {
                    for kx in 0..k {
                        let mut acc = 0.0;
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let go_row = &go_plane[oy * ow..][..ow];
                            let in_row = &in_plane[iy as usize * w..][..w];
                            if stride == 1 {
                                let lo = padding.saturating_sub(kx);
                                let hi = (w + padding).saturating_sub(kx).min(ow);
                                if lo >= hi {
                                    continue;
                                }
                                let off = lo + kx - padding;
                                let src = &in_row[off..][..hi - lo];
                                for (g, s) in go_row[lo..hi].iter().zip(src) {
                                    acc += g * s;
                                }
                            } else {
                                for (ox, g) in go_row.iter().enumerate() {
                                    let ix = (ox * stride + kx) as isize - padding as isize;
                                    if ix >= 0 && ix < w as isize {
                                        acc += g * in_row[ix as usize];
                                    }
                                }
                            }
                        }
                        gkd[kbase + ky * k + kx] += acc;
                    }
                }
            }
        }
    }
    grad_k
}

/// Gradient with respect to the per-output-channel bias.
pub fn backward_bias(grad_out: &Tensor) -> Tensor {
    let [n_batch, c_out, oh, ow] = grad_out.shape();
    let mut grad_b = Tensor::zeros([1, c_out, 1, 1]);
    let gd = grad_out.data();
    let gbd = grad_b.data_mut();
    for n in 0..n_batch {
        for co in 0..c_out {
            let plane = &gd[((n * c_out + co) * oh) * ow..][..oh * ow];
            gbd[co] += plane.iter().sum::<f64>();
        }
    }
    grad_b
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ones(shape: [usize; 4]) -> Tensor {
        Tensor::full(shape, 1.0)
    }

    #[test]
    fn all_ones_3x3_same_padding() {
        // 3x3 input of 1s, 3x3 kernel of 1s, stride 1, padding 1:
        // center sees all 9 inputs, corners see 4.
        let out = forward(
            &ones([1, 1, 3, 3]),
            &ones([1, 1, 3, 3]),
            &Tensor::zeros([1, 1, 1, 1]),
            1,
            1,
        )
        .unwrap();
        assert_eq!(out.shape(), [1, 1, 3, 3]);
        assert_eq!(out.at(0, 0, 1, 1), 9.0);
        assert_eq!(out.at(0, 0, 0, 0), 4.0);
        assert_eq!(out.at(0, 0, 2, 2), 4.0);
        assert_eq!(out.at(0, 0, 0, 1), 6.0);
    }

    #[test]
    fn identity_kernel_preserves_input() {
        let input = Tensor::from_fn([1, 1, 4, 5], |_, _, y, x| (y * 5 + x) as f64 * 0.25);
        let kernel = Tensor::from_vec([1, 1, 1, 1], vec![1.0]).unwrap();
        let out = forward(&input, &kernel, &Tensor::zeros([1, 1, 1, 1]), 1, 0).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn zero_kernel_yields_bias() {
        let input = Tensor::from_fn([1, 2, 4, 4], |_, c, y, x| (c + y + x) as f64);
        let kernel = Tensor::zeros([3, 2, 3, 3]);
        let bias = Tensor::from_vec([1, 3, 1, 1], vec![0.5, -1.0, 2.0]).unwrap();
        let out = forward(&input, &kernel, &bias, 1, 1).unwrap();
        for c in 0..3 {
            for y in 0..4 {
                for x in 0..4 {
                    assert_eq!(out.at(0, c, y, x), bias.data()[c]);
                }
            }
        }
    }

    #[test]
    fn matches_naive_reference() {
        // Hand-summation oracle on a random-ish multi-channel case.
        let input = Tensor::from_fn([2, 3, 6, 7], |n, c, y, x| {
            ((n * 31 + c * 17 + y * 7 + x * 3) % 13) as f64 * 0.37 - 1.0
        });
        let kernel = Tensor::from_fn([4, 3, 3, 3], |o, i, y, x| {
            ((o * 5 + i * 11 + y * 3 + x) % 7) as f64 * 0.21 - 0.4
        });
        let bias = Tensor::from_vec([1, 4, 1, 1], vec![0.1, -0.2, 0.3, 0.0]).unwrap();
        for &(stride, padding) in &[(1usize, 1usize), (1, 0), (2, 1), (2, 0)] {
            let out = forward(&input, &kernel, &bias, stride, padding).unwrap();
            let [nb, co_n, oh, ow] = out.shape();
            for n in 0..nb {
                for co in 0..co_n {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = bias.data()[co];
                            for ci in 0..3 {
                                for ky in 0..3 {
                                    for kx in 0..3 {
                                        let iy = (oy * stride + ky) as isize - padding as isize;
                                        let ix = (ox * stride + kx) as isize - padding as isize;
                                        if iy >= 0 && iy < 6 && ix >= 0 && ix < 7 {
                                            acc += input.at(n, ci, iy as usize, ix as usize)
                                                * kernel.at(co, ci, ky, kx);
                                        }
                                    }
                                }
                            }
                            let got = out.at(n, co, oy, ox);
                            assert!(
                                (got - acc).abs() < 1e-12,
                                "mismatch at {n},{co},{oy},{ox}: {got} vs {acc} (s={stride} p={padding})"
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let err = forward(
            &ones([1, 2, 4, 4]),
            &ones([1, 3, 3, 3]),
            &Tensor::zeros([1, 1, 1, 1]),
            1,
            1,
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 2, 4, 4]") && msg.contains("[1, 3, 3, 3]"), "{msg}");
    }
}
