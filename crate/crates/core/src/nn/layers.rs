//! Forward and backward kernels for the individual layer types.
//!
//! Layer functions accept either a single sample or a batch with a leading
//! batch dimension; backward passes sum parameter gradients over the batch.

use crate::conv::{col2im_add, conv_forward_sample, conv_geometry, im2col_into, ConvGeometry};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{gemm_into, MatRef, Scalar, Tensor};

fn uniform_init<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Result<Tensor<T>> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(rng.uniform(-bound, bound))).collect();
    Tensor::from_vec(shape, data)
}

pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Passes `upstream` through where the cached input was strictly positive.
pub fn relu_backward<T: Scalar>(upstream: &Tensor<T>, cached_input: &Tensor<T>) -> Result<Tensor<T>> {
    if upstream.shape() != cached_input.shape() {
        return Err(Error::shape(
            "relu_backward",
            format!("{:?} vs {:?}", upstream.shape(), cached_input.shape()),
        ));
    }
    let data = upstream
        .data()
        .iter()
        .zip(cached_input.data())
        .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(upstream.shape(), data)
}

/// Max pooling over the last two axes; all leading axes are independent planes.
///
/// Returns the pooled tensor and, per output cell, the flat index of the
/// winning input element. Ties go to the first element in row-major order.
pub fn maxpool_forward<T: Scalar>(
    x: &Tensor<T>,
    window: usize,
    stride: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let s = x.shape();
    if s.len() < 2 || window == 0 || stride == 0 {
        return Err(Error::shape("maxpool", format!("input {s:?}, window {window}, stride {stride}")));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    if h < window || w < window {
        return Err(Error::shape(
            "maxpool",
            format!("window {window} larger than input {h}x{w}"),
        ));
    }
    let (oh, ow) = ((h - window) / stride + 1, (w - window) / stride + 1);
    let planes = x.len() / (h * w);
    let mut out_shape = s[..s.len() - 2].to_vec();
    out_shape.extend([oh, ow]);

    let src = x.data();
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut argmax = Vec::with_capacity(planes * oh * ow);
    for (p, plane) in src.chunks_exact(h * w).enumerate() {
        let base = p * h * w;
        if window == 2 && stride == 2 {
            for i in 0..oh {
                let top = &plane[2 * i * w..(2 * i + 1) * w];
                let bottom = &plane[(2 * i + 1) * w..(2 * i + 2) * w];
                for j in 0..ow {
                    let cands = [top[2 * j], top[2 * j + 1], bottom[2 * j], bottom[2 * j + 1]];
                    let mut k = 0;
                    for c in 1..4 {
                        if cands[c] > cands[k] {
                            k = c;
                        }
                    }
                    out.push(cands[k]);
                    argmax.push(base + (2 * i + k / 2) * w + 2 * j + k % 2);
                }
            }
            continue;
        }
        for i in 0..oh {
            for j in 0..ow {
                let first = i * stride * w + j * stride;
                let (mut best, mut best_v) = (first, plane[first]);
                for m in 0..window {
                    let row = first + m * w;
                    for (off, &v) in plane[row..row + window].iter().enumerate() {
                        if v > best_v {
                            best = row + off;
                            best_v = v;
                        }
                    }
                }
                out.push(best_v);
                argmax.push(base + best);
            }
        }
    }
    Ok((Tensor::from_vec(&out_shape, out)?, argmax))
}

/// Routes each upstream value to its recorded argmax position.
pub fn maxpool_backward<T: Scalar>(
    upstream: &Tensor<T>,
    argmax: &[usize],
    input_shape: &[usize],
) -> Result<Tensor<T>> {
    if upstream.len() != argmax.len() {
        return Err(Error::shape(
            "maxpool_backward",
            format!("{} upstream values for {} indices", upstream.len(), argmax.len()),
        ));
    }
    let mut grad = Tensor::zeros(input_shape)?;
    let g = grad.data_mut();
    for (&idx, &u) in argmax.iter().zip(upstream.data()) {
        let slot = g.get_mut(idx).ok_or_else(|| {
            Error::shape(
                "maxpool_backward",
                format!("argmax index {idx} outside input {input_shape:?}"),
            )
        })?;
        *slot += u;
    }
    Ok(grad)
}

/// Fully connected layer: `y = W·x + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer<T: Scalar = f32> {
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseGrads<T: Scalar = f32> {
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
    pub input: Tensor<T>,
}

impl<T: Scalar> DenseLayer<T> {
    pub fn new(weights: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        if weights.rank() != 2 || bias.shape() != [weights.shape()[0]] {
            return Err(Error::shape(
                "dense",
                format!("weights {:?}, bias {:?}", weights.shape(), bias.shape()),
            ));
        }
        Ok(DenseLayer { weights, bias })
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Result<Self> {
        Self::new(Tensor::zeros(&[outputs, inputs])?, Tensor::zeros(&[outputs])?)
    }

    /// Fan-in scaled uniform weights, zero bias.
    pub fn init(inputs: usize, outputs: usize, rng: &mut Rng) -> Result<Self> {
        Self::new(
            uniform_init(&[outputs, inputs], inputs, rng)?,
            Tensor::zeros(&[outputs])?,
        )
    }

    pub fn inputs(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weights.shape()[0]
    }

    /// Accepts `[in]` or `[B, in]`; returns a tensor with the same leading layout.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let batch = dense_batch(x, self.inputs(), "dense_forward")?;
        let out_n = self.outputs();
        let mut out = vec![T::zero(); batch * out_n];
        for row in out.chunks_exact_mut(out_n) {
            row.copy_from_slice(self.bias.data());
        }
        // [B, in] · Wᵀ[in, out]
        gemm_into(
            MatRef::new(x.data(), batch, self.inputs()),
            MatRef::new(self.weights.data(), out_n, self.inputs()).t(),
            T::one(),
            &mut out,
        );
        let shape: Vec<usize> = if x.rank() == 1 { vec![out_n] } else { vec![batch, out_n] };
        Tensor::from_vec(&shape, out)
    }

    pub fn backward(&self, upstream: &Tensor<T>, cached_x: &Tensor<T>) -> Result<DenseGrads<T>> {
        let batch = dense_batch(cached_x, self.inputs(), "dense_backward")?;
        let (in_n, out_n) = (self.inputs(), self.outputs());
        if upstream.len() != batch * out_n || upstream.rank() != cached_x.rank() {
            return Err(Error::shape(
                "dense_backward",
                format!("upstream {:?} for input {:?}", upstream.shape(), cached_x.shape()),
            ));
        }
        let g = MatRef::new(upstream.data(), batch, out_n);
        let mut gw = Tensor::zeros(&[out_n, in_n])?;
        gemm_into(g.t(), MatRef::new(cached_x.data(), batch, in_n), T::zero(), gw.data_mut());

        let mut gb = Tensor::zeros(&[out_n])?;
        for row in upstream.data().chunks_exact(out_n) {
            for (acc, &v) in gb.data_mut().iter_mut().zip(row) {
                *acc += v;
            }
        }

        let mut gx = Tensor::zeros(cached_x.shape())?;
        gemm_into(g, MatRef::new(self.weights.data(), out_n, in_n), T::zero(), gx.data_mut());
        Ok(DenseGrads {
            weights: gw,
            bias: gb,
            input: gx,
        })
    }
}

fn dense_batch<T: Scalar>(x: &Tensor<T>, inputs: usize, ctx: &str) -> Result<usize> {
    match *x.shape() {
        [n] if n == inputs => Ok(1),
        [b, n] if n == inputs => Ok(b),
        _ => Err(Error::shape(ctx, format!("input {:?}, expected width {inputs}", x.shape()))),
    }
}

pub fn dense_forward<T: Scalar>(layer: &DenseLayer<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    layer.forward(x)
}

pub fn dense_backward<T: Scalar>(
    layer: &DenseLayer<T>,
    upstream: &Tensor<T>,
    cached_x: &Tensor<T>,
) -> Result<DenseGrads<T>> {
    layer.backward(upstream, cached_x)
}

/// Convolution layer with `weights [K, C_in, M, N]` and `bias [K]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<T: Scalar = f32> {
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvGrads<T: Scalar = f32> {
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
    pub input: Option<Tensor<T>>,
}

impl<T: Scalar> ConvLayer<T> {
    pub fn new(weights: Tensor<T>, bias: Tensor<T>, stride: usize, padding: usize) -> Result<Self> {
        if weights.rank() != 4 || bias.shape() != [weights.shape()[0]] || stride == 0 {
            return Err(Error::shape(
                "conv layer",
                format!("weights {:?}, bias {:?}, stride {stride}", weights.shape(), bias.shape()),
            ));
        }
        Ok(ConvLayer {
            weights,
            bias,
            stride,
            padding,
        })
    }

    pub fn zeros(filters: usize, channels: usize, kernel: usize, stride: usize, padding: usize) -> Result<Self> {
        Self::new(
            Tensor::zeros(&[filters, channels, kernel, kernel])?,
            Tensor::zeros(&[filters])?,
            stride,
            padding,
        )
    }

    pub fn init(
        filters: usize,
        channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        Self::new(
            uniform_init(&[filters, channels, kernel, kernel], channels * kernel * kernel, rng)?,
            Tensor::zeros(&[filters])?,
            stride,
            padding,
        )
    }

    pub fn filters(&self) -> usize {
        self.weights.shape()[0]
    }

    /// Splits `[C,H,W]` or `[B,C,H,W]` into (batch, geometry).
    fn batch_geometry(&self, shape: &[usize]) -> Result<(usize, ConvGeometry)> {
        let (batch, sample) = match shape.len() {
            3 => (1, shape),
            4 => (shape[0], &shape[1..]),
            _ => return Err(Error::shape("conv2d", format!("input {shape:?}"))),
        };
        let g = conv_geometry(sample, &self.weights, &self.bias, self.stride, self.padding)?;
        Ok((batch, g))
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (batch, g) = self.batch_geometry(x.shape())?;
        let k = self.filters();
        let out_len = k * g.positions();
        let mut cols = vec![T::zero(); g.patch_len() * g.positions()];
        let mut out = vec![T::zero(); batch * out_len];
        for (sample, dst) in x.data().chunks_exact(g.input_len()).zip(out.chunks_exact_mut(out_len)) {
            conv_forward_sample(sample, &g, self.weights.data(), self.bias.data(), &mut cols, dst);
        }
        let shape: Vec<usize> = if x.rank() == 3 {
            vec![k, g.out_h, g.out_w]
        } else {
            vec![batch, k, g.out_h, g.out_w]
        };
        Tensor::from_vec(&shape, out)
    }

    /// Gradients of the layer; the input gradient is skipped when `need_input` is false.
    pub fn backward_with(
        &self,
        upstream: &Tensor<T>,
        cached_input: &Tensor<T>,
        need_input: bool,
    ) -> Result<ConvGrads<T>> {
        let (batch, g) = self.batch_geometry(cached_input.shape())?;
        let k = self.filters();
        let npos = g.positions();
        let patch = g.patch_len();
        if upstream.len() != batch * k * npos {
            return Err(Error::shape(
                "conv2d_backward",
                format!("upstream {:?} for input {:?}", upstream.shape(), cached_input.shape()),
            ));
        }
        let mut gw = Tensor::zeros(self.weights.shape())?;
        let mut gb = Tensor::zeros(&[k])?;
        let mut gi = if need_input {
            Some(Tensor::zeros(cached_input.shape())?)
        } else {
            None
        };
        let mut cols = vec![T::zero(); patch * npos];
        let mut dcols = vec![T::zero(); if need_input { patch * npos } else { 0 }];
        let wmat = MatRef::new(self.weights.data(), k, patch);

        for (s, (x, dy)) in cached_input
            .data()
            .chunks_exact(g.input_len())
            .zip(upstream.data().chunks_exact(k * npos))
            .enumerate()
        {
            let dy_mat = MatRef::new(dy, k, npos);
            im2col_into(x, &g, &mut cols);
            // dW[K, CMN] += dY[K, P] · colsᵀ[P, CMN]
            gemm_into(dy_mat, MatRef::new(&cols, patch, npos).t(), T::one(), gw.data_mut());
            for (acc, row) in gb.data_mut().iter_mut().zip(dy.chunks_exact(npos)) {
                *acc += row.iter().copied().sum::<T>();
            }
            if let Some(gi) = gi.as_mut() {
                // dcols[CMN, P] = Wᵀ · dY
                gemm_into(wmat.t(), dy_mat, T::zero(), &mut dcols);
                let dst = &mut gi.data_mut()[s * g.input_len()..(s + 1) * g.input_len()];
                col2im_add(&dcols, &g, dst);
            }
        }
        Ok(ConvGrads {
            weights: gw,
            bias: gb,
            input: gi,
        })
    }
}

/// Exact adjoints of the convolution sum for weights, bias, and input.
pub fn conv2d_backward<T: Scalar>(
    layer: &ConvLayer<T>,
    upstream: &Tensor<T>,
    cached_input: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let g = layer.backward_with(upstream, cached_input, true)?;
    Ok((g.weights, g.bias, g.input.expect("input gradient requested")))
}
