//! 2-D convolution (cross-correlation, zero padding, channels-first).
//!
//! Two independent routes compute the same map:
//! [`conv2d_naive`] evaluates the nested sum directly and serves as the
//! oracle; [`conv2d_fast`] lowers the input with [`im2col`] and runs a single
//! GEMM per sample.

use crate::error::{Error, Result};
use crate::tensor::{gemm_into, MatRef, Scalar, Tensor};

/// Output extent along one axis, `None` when the kernel exceeds the padded input.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    if stride == 0 || kernel == 0 || input + 2 * padding < kernel {
        return None;
    }
    Some((input + 2 * padding - kernel) / stride + 1)
}

/// Resolved geometry of one convolution over a single `[C, H, W]` sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(Error::InvalidArgument("stride must be positive".into()));
        }
        let out_h = conv_out_dim(height, kernel_h, stride, padding);
        let out_w = conv_out_dim(width, kernel_w, stride, padding);
        match (out_h, out_w) {
            (Some(out_h), Some(out_w)) => Ok(ConvGeometry {
                channels,
                height,
                width,
                kernel_h,
                kernel_w,
                stride,
                padding,
                out_h,
                out_w,
            }),
            _ => Err(Error::shape(
                "conv2d",
                format!(
                    "kernel {kernel_h}x{kernel_w} larger than padded input {}x{}",
                    height + 2 * padding,
                    width + 2 * padding
                ),
            )),
        }
    }

    /// Rows of the lowered matrix: `C·M·N`.
    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    /// Columns of the lowered matrix: `H_out·W_out`.
    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn input_len(&self) -> usize {
        self.channels * self.height * self.width
    }
}

/// Checks `input [C,H,W]`, `weights [K,C,M,N]`, `bias [K]` and returns the geometry.
pub(crate) fn conv_geometry<T: Scalar>(
    input_shape: &[usize],
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<ConvGeometry> {
    let ws = weights.shape();
    if input_shape.len() != 3 {
        return Err(Error::shape("conv2d", format!("input must be [C,H,W], got {input_shape:?}")));
    }
    if ws.len() != 4 || ws[1] != input_shape[0] {
        return Err(Error::shape(
            "conv2d",
            format!("weights {ws:?} incompatible with input {input_shape:?}"),
        ));
    }
    if bias.shape() != [ws[0]] {
        return Err(Error::shape(
            "conv2d",
            format!("bias {:?} for {} filters", bias.shape(), ws[0]),
        ));
    }
    ConvGeometry::new(
        input_shape[0],
        input_shape[1],
        input_shape[2],
        ws[2],
        ws[3],
        stride,
        padding,
    )
}

/// Lowers one sample into `cols` (`patch_len × positions`, row-major).
pub(crate) fn im2col_into<T: Scalar>(input: &[T], g: &ConvGeometry, cols: &mut [T]) {
    let npos = g.positions();
    let pad = g.padding as isize;
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for m in 0..g.kernel_h {
            for n in 0..g.kernel_w {
                let dst = &mut cols[row * npos..(row + 1) * npos];
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + m) as isize - pad;
                    let line = &mut dst[oh * g.out_w..(oh + 1) * g.out_w];
                    if ih < 0 || ih >= g.height as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[ih as usize * g.width..(ih as usize + 1) * g.width];
                    if g.stride == 1 {
                        // valid ow satisfy 0 <= ow + n - pad < width
                        let lo = (pad - n as isize).clamp(0, g.out_w as isize) as usize;
                        let hi = (g.width as isize + pad - n as isize).clamp(lo as isize, g.out_w as isize) as usize;
                        if lo == hi {
                            line.fill(T::zero());
                            continue;
                        }
                        line[..lo].fill(T::zero());
                        let start = (lo + n) - g.padding;
                        line[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                        line[hi..].fill(T::zero());
                        continue;
                    }
                    for (ow, v) in line.iter_mut().enumerate() {
                        let iw = (ow * g.stride + n) as isize - pad;
                        *v = if iw < 0 || iw >= g.width as isize {
                            T::zero()
                        } else {
                            src[iw as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col_into`]: scatters `cols` back and accumulates into `out`.
pub(crate) fn col2im_add<T: Scalar>(cols: &[T], g: &ConvGeometry, out: &mut [T]) {
    let npos = g.positions();
    let pad = g.padding as isize;
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &mut out[c * g.height * g.width..(c + 1) * g.height * g.width];
        for m in 0..g.kernel_h {
            for n in 0..g.kernel_w {
                let src = &cols[row * npos..(row + 1) * npos];
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + m) as isize - pad;
                    if ih < 0 || ih >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * g.width..(ih as usize + 1) * g.width];
                    let line = &src[oh * g.out_w..(oh + 1) * g.out_w];
                    if g.stride == 1 {
                        let lo = (pad - n as isize).clamp(0, g.out_w as isize) as usize;
                        let hi = (g.width as isize + pad - n as isize).clamp(lo as isize, g.out_w as isize) as usize;
                        if lo == hi {
                            continue;
                        }
                        let start = (lo + n) - g.padding;
                        for (d, &v) in dst[start..start + hi - lo].iter_mut().zip(&line[lo..hi]) {
                            *d += v;
                        }
                        continue;
                    }
                    for ow in 0..g.out_w {
                        let iw = (ow * g.stride + n) as isize - pad;
                        if iw >= 0 && iw < g.width as isize {
                            dst[iw as usize] += src[oh * g.out_w + ow];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Fast forward for one sample: `out[K, P] = W[K, CMN] · cols[CMN, P] + b`.
pub(crate) fn conv_forward_sample<T: Scalar>(
    input: &[T],
    g: &ConvGeometry,
    weights: &[T],
    bias: &[T],
    cols: &mut [T],
    out: &mut [T],
) {
    let k = bias.len();
    let npos = g.positions();
    im2col_into(input, g, cols);
    for (f, row) in out[..k * npos].chunks_exact_mut(npos).enumerate() {
        row.fill(bias[f]);
    }
    gemm_into(
        MatRef::new(weights, k, g.patch_len()),
        MatRef::new(cols, g.patch_len(), npos),
        T::one(),
        out,
    );
}

/// Direct evaluation of
/// `z[k][i][j] = Σ_c Σ_m Σ_n x[c][i·s+m−p][j·s+n−p] · w[k][c][m][n] + b[k]`.
pub fn conv2d_naive<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = conv_geometry(input.shape(), weights, bias, stride, padding)?;
    let k_count = weights.shape()[0];
    let x = input.data();
    let w = weights.data();
    let mut out = Tensor::zeros(&[k_count, g.out_h, g.out_w])?;
    let z = out.data_mut();
    for k in 0..k_count {
        for i in 0..g.out_h {
            for j in 0..g.out_w {
                let mut acc = bias.data()[k];
                for c in 0..g.channels {
                    for m in 0..g.kernel_h {
                        for n in 0..g.kernel_w {
                            let ih = (i * stride + m) as isize - padding as isize;
                            let iw = (j * stride + n) as isize - padding as isize;
                            if ih < 0 || iw < 0 || ih >= g.height as isize || iw >= g.width as isize {
                                continue;
                            }
                            let xv = x[(c * g.height + ih as usize) * g.width + iw as usize];
                            let wv = w[((k * g.channels + c) * g.kernel_h + m) * g.kernel_w + n];
                            acc += xv * wv;
                        }
                    }
                }
                z[(k * g.out_h + i) * g.out_w + j] = acc;
            }
        }
    }
    Ok(out)
}

/// Unrolls receptive fields of `input [C,H,W]` into a `[C·M·N, H_out·W_out]` matrix.
pub fn im2col<T: Scalar>(
    input: &Tensor<T>,
    kernel_h: usize,
    kernel_w: usize,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let s = input.shape();
    if s.len() != 3 {
        return Err(Error::shape("im2col", format!("input must be [C,H,W], got {s:?}")));
    }
    let g = ConvGeometry::new(s[0], s[1], s[2], kernel_h, kernel_w, stride, padding)?;
    let mut out = Tensor::zeros(&[g.patch_len(), g.positions()])?;
    im2col_into(input.data(), &g, out.data_mut());
    Ok(out)
}

/// Same contract as [`conv2d_naive`], computed as one GEMM over the lowered input.
pub fn conv2d_fast<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = conv_geometry(input.shape(), weights, bias, stride, padding)?;
    let k_count = weights.shape()[0];
    let mut cols = vec![T::zero(); g.patch_len() * g.positions()];
    let mut out = Tensor::zeros(&[k_count, g.out_h, g.out_w])?;
    conv_forward_sample(
        input.data(),
        &g,
        weights.data(),
        bias.data(),
        &mut cols,
        out.data_mut(),
    );
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn t(shape: &[usize], v: &[f32]) -> Tensor {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    fn random(shape: &[usize], rng: &mut Rng) -> Tensor {
        let n = shape.iter().product();
        t(shape, &(0..n).map(|_| rng.uniform(-1.0, 1.0) as f32).collect::<Vec<_>>())
    }

    #[test]
    fn identity_kernel() {
        let x = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let w = t(&[1, 1, 1, 1], &[1.0]);
        let b = t(&[1], &[0.0]);
        for out in [
            conv2d_naive(&x, &w, &b, 1, 0).unwrap(),
            conv2d_fast(&x, &w, &b, 1, 0).unwrap(),
        ] {
            assert_eq!(out.shape(), &[1, 2, 2]);
            assert_eq!(out.data(), x.data());
        }
    }

    #[test]
    fn diagonal_kernel_sums_diagonal() {
        let x = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let w = t(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let b = t(&[1], &[0.0]);
        assert_eq!(conv2d_naive(&x, &w, &b, 1, 0).unwrap().data(), &[5.0]);
        assert_eq!(conv2d_fast(&x, &w, &b, 1, 0).unwrap().data(), &[5.0]);
    }

    #[test]
    fn zero_weights_give_bias() {
        let mut rng = Rng::new(3);
        let x = random(&[2, 5, 5], &mut rng);
        let w = Tensor::zeros(&[3, 2, 3, 3]).unwrap();
        let b = t(&[3], &[0.5, -1.0, 2.0]);
        let out = conv2d_fast(&x, &w, &b, 1, 1).unwrap();
        for (k, plane) in out.data().chunks(25).enumerate() {
            assert!(plane.iter().all(|&v| v == b.data()[k]));
        }
    }

    #[test]
    fn oversized_kernel_rejected() {
        let x = Tensor::<f32>::zeros(&[1, 2, 2]).unwrap();
        let w = Tensor::zeros(&[1, 1, 3, 3]).unwrap();
        let b = Tensor::zeros(&[1]).unwrap();
        assert!(matches!(conv2d_naive(&x, &w, &b, 1, 0), Err(Error::ShapeMismatch { .. })));
        assert!(matches!(conv2d_fast(&x, &w, &b, 1, 0), Err(Error::ShapeMismatch { .. })));
        assert!(im2col(&x, 3, 3, 1, 0).is_err());
        // padding makes it fit
        assert!(conv2d_fast(&x, &w, &b, 1, 1).is_ok());
    }

    #[test]
    fn im2col_single_window() {
        let x = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let cols = im2col(&x, 2, 2, 1, 0).unwrap();
        assert_eq!(cols.shape(), &[4, 1]);
        assert_eq!(cols.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn im2col_one_by_one_is_flatten() {
        let mut rng = Rng::new(8);
        let x = random(&[3, 4, 5], &mut rng);
        let cols = im2col(&x, 1, 1, 1, 0).unwrap();
        assert_eq!(cols.shape(), &[3, 20]);
        assert_eq!(cols.data(), x.data());
    }

    #[test]
    fn im2col_padded_corners() {
        let x = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let cols = im2col(&x, 2, 2, 1, 1).unwrap();
        assert_eq!(cols.shape(), &[4, 9]);
        // Receptive fields enumerated by hand over the zero-padded 4x4 grid.
        let column = |p: usize| -> Vec<f32> { (0..4).map(|r| cols.data()[r * 9 + p]).collect() };
        assert_eq!(column(0), vec![0.0, 0.0, 0.0, 1.0]);
        assert_eq!(column(4), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(column(8), vec![4.0, 0.0, 0.0, 0.0]);
        for p in [0, 2, 6, 8] {
            assert_eq!(column(p).iter().filter(|&&v| v == 0.0).count(), 3);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let mut rng = Rng::new(21);
        let g = ConvGeometry::new(2, 5, 4, 3, 2, 2, 1).unwrap();
        let x: Vec<f64> = (0..g.input_len()).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let y: Vec<f64> = (0..g.patch_len() * g.positions()).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let mut cols = vec![0.0; y.len()];
        im2col_into(&x, &g, &mut cols);
        let mut back = vec![0.0; x.len()];
        col2im_add(&y, &g, &mut back);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn fast_matches_naive(
            c in 1usize..4, h in 1usize..10, w in 1usize..10,
            k in 1usize..5, m in 1usize..4, n in 1usize..4,
            stride in 1usize..3, pad in 0usize..3, seed in any::<u64>(),
        ) {
            prop_assume!(h + 2 * pad >= m && w + 2 * pad >= n);
            let mut rng = Rng::new(seed);
            let x = random(&[c, h, w], &mut rng);
            let wt = random(&[k, c, m, n], &mut rng);
            let b = random(&[k], &mut rng);
            let slow = conv2d_naive(&x, &wt, &b, stride, pad).unwrap();
            let fast = conv2d_fast(&x, &wt, &b, stride, pad).unwrap();
            prop_assert_eq!(slow.shape(), fast.shape());
            prop_assert!(slow.max_abs_diff(&fast).unwrap() < 1e-5);
        }
    }

    #[test]
    fn fast_matches_naive_three_channel_8x8() {
        for seed in 0..100 {
            let mut rng = Rng::new(seed);
            let x = random(&[3, 8, 8], &mut rng);
            let w = random(&[4, 3, 3, 3], &mut rng);
            let b = random(&[4], &mut rng);
            let d = conv2d_naive(&x, &w, &b, 1, 1)
                .unwrap()
                .max_abs_diff(&conv2d_fast(&x, &w, &b, 1, 1).unwrap())
                .unwrap();
            assert!(d < 1e-5, "seed {seed}: {d}");
        }
    }
}
