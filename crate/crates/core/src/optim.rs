//! Softmax, sparse categorical cross-entropy, the two-head loss, and Adam.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Probabilities are clamped to this before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Max-subtracted softmax of a logit vector.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    if logits.rank() != 1 {
        return Err(Error::shape("softmax", format!("expected a vector, got {:?}", logits.shape())));
    }
    if !logits.is_finite() {
        return Err(Error::NonFinite("softmax logits"));
    }
    let max = logits.data().iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.data().iter().map(|&v| (v - max).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    Tensor::from_vec(logits.shape(), exps.into_iter().map(|e| e / sum).collect())
}

/// `−ln(max(p[class], 1e-12))`.
pub fn sparse_ce<T: Scalar>(probabilities: &Tensor<T>, true_class: usize) -> Result<T> {
    let n = probabilities.len();
    if true_class >= n {
        return Err(Error::ClassOutOfRange {
            index: true_class,
            classes: n,
        });
    }
    let total: f64 = probabilities.data().iter().map(|p| p.as_f64()).sum();
    if (total - 1.0).abs() > 1e-5 {
        return Err(Error::InvalidArgument(format!("probabilities sum to {total}")));
    }
    let p = probabilities.data()[true_class].max(T::from_f64(PROB_FLOOR));
    Ok(-p.ln())
}

/// Gradient of `sparse_ce(softmax(logits), class)` with respect to the logits.
pub fn softmax_ce_grad<T: Scalar>(logits: &Tensor<T>, true_class: usize) -> Result<Tensor<T>> {
    if true_class >= logits.len() {
        return Err(Error::ClassOutOfRange {
            index: true_class,
            classes: logits.len(),
        });
    }
    let mut g = softmax(logits)?;
    g.data_mut()[true_class] -= T::one();
    Ok(g)
}

/// Relative weight of each head in the total loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeadWeights {
    pub base: f64,
    pub exponent: f64,
}

impl Default for HeadWeights {
    fn default() -> Self {
        HeadWeights {
            base: 1.0,
            exponent: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub base_loss: f64,
    pub exp_loss: f64,
    /// `w_b·base_loss + w_e·exp_loss`
    pub total: f64,
}

pub fn combined_loss<T: Scalar>(
    base_logits: &Tensor<T>,
    exp_logits: &Tensor<T>,
    base_label: usize,
    exp_label: usize,
    weights: HeadWeights,
) -> Result<LossBreakdown> {
    let base_loss = sparse_ce(&softmax(base_logits)?, base_label)?.as_f64();
    let exp_loss = sparse_ce(&softmax(exp_logits)?, exp_label)?.as_f64();
    Ok(LossBreakdown {
        base_loss,
        exp_loss,
        total: weights.base * base_loss + weights.exponent * exp_loss,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates mirroring the parameter list.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[&Tensor<f32>]) -> Self {
        let zeros = || -> Vec<Tensor<f32>> {
            params
                .iter()
                .map(|p| Tensor::zeros(p.shape()).expect("parameter shapes are valid"))
                .collect()
        };
        AdamState {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One bias-corrected Adam update of every parameter tensor.
pub fn adam_step(params: &mut [&mut Tensor<f32>], grads: &[Tensor<f32>], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(Error::shape(
            "adam_step",
            format!(
                "{} params, {} grads, {} moments",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    for (i, ((p, g), m)) in params.iter().zip(grads).zip(&state.m).enumerate() {
        if p.shape() != g.shape() || p.shape() != m.shape() || m.shape() != state.v[i].shape() {
            return Err(Error::shape(
                "adam_step",
                format!("tensor {i}: param {:?}, grad {:?}", p.shape(), g.shape()),
            ));
        }
    }
    state.step += 1;
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    let t = state.step as i32;
    let bc1 = (1.0 - f64::from(beta1).powi(t)) as f32;
    let bc2 = (1.0 - f64::from(beta2).powi(t)) as f32;
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mv = beta1 * *mv + (1.0 - beta1) * gv;
            *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
            let m_hat = *mv / bc1;
            let v_hat = *vv / bc2;
            *pv -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
