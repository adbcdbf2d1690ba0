//! Central finite-difference verification of the analytic gradients.
//!
//! The model is re-instantiated in `f64`; every parameter element is nudged by
//! `±ε` and the two-head loss re-evaluated. Elements whose nudge flips a ReLU
//! or changes a pooling winner sit on a kink of the loss surface and are
//! skipped rather than compared.

use std::io::Write;

use crate::error::Result;
use crate::nn::{Gradients, MultiOutputModel};
use crate::optim::{combined_loss, softmax_ce_grad, HeadWeights};
use crate::tensor::Tensor;

/// Denominator floor of the relative error.
pub const REL_ERR_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckRow {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub epsilon: f64,
    pub tolerance: f64,
    pub rows: Vec<GradCheckRow>,
}

impl GradCheckReport {
    pub fn all_passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.rows.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
    }

    /// CSV with header `parameter,max_rel_err,status`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["parameter", "max_rel_err", "status"])?;
        for row in &self.rows {
            w.write_record([
                row.name.as_str(),
                &row.max_rel_err.to_string(),
                if row.passed { "pass" } else { "fail" },
            ])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Analytic gradient of the unit-weighted two-head loss for one image.
pub fn analytic_gradients(
    model: &MultiOutputModel<f64>,
    image: &Tensor<f64>,
    labels: (usize, usize),
) -> Result<Gradients<f64>> {
    let (b, e, trace) = model.forward(image)?;
    model.backward(&trace, &softmax_ce_grad(&b, labels.0)?, &softmax_ce_grad(&e, labels.1)?)
}

/// Compares `analytic` with central differences of the loss, tensor by tensor.
pub fn compare_gradients(
    model: &MultiOutputModel<f64>,
    image: &Tensor<f64>,
    labels: (usize, usize),
    analytic: &Gradients<f64>,
    epsilon: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let (_, _, trace) = model.forward(image)?;
    let pattern = trace.activation_pattern(model);
    let names = model.param_names();
    let mut probe = model.clone();

    // Loss at the current probe parameters, or None when the activation
    // pattern differs from the unperturbed one.
    let eval = |m: &MultiOutputModel<f64>| -> Result<Option<f64>> {
        let (b, e, trace) = m.forward(image)?;
        if trace.activation_pattern(m) != pattern {
            return Ok(None);
        }
        Ok(Some(combined_loss(&b, &e, labels.0, labels.1, HeadWeights::default())?.total))
    };

    let mut rows = Vec::with_capacity(names.len());
    for (t, name) in names.into_iter().enumerate() {
        let len = probe.params()[t].len();
        let (mut max_rel, mut checked, mut skipped) = (0.0f64, 0, 0);
        for j in 0..len {
            let original = probe.params()[t].data()[j];
            probe.params_mut()[t].data_mut()[j] = original + epsilon;
            let plus = eval(&probe)?;
            probe.params_mut()[t].data_mut()[j] = original - epsilon;
            let minus = eval(&probe)?;
            probe.params_mut()[t].data_mut()[j] = original;
            match (plus, minus) {
                (Some(lp), Some(lm)) => {
                    let numeric = (lp - lm) / (2.0 * epsilon);
                    max_rel = max_rel.max(relative_error(analytic.tensors[t].data()[j], numeric));
                    checked += 1;
                }
                _ => skipped += 1,
            }
        }
        rows.push(GradCheckRow {
            name,
            max_rel_err: max_rel,
            checked,
            skipped,
            passed: max_rel < tolerance,
        });
    }
    Ok(GradCheckReport {
        epsilon,
        tolerance,
        rows,
    })
}

/// Full check: re-evaluates `model` in 64-bit and compares every parameter gradient.
pub fn gradient_check(
    model: &MultiOutputModel<f32>,
    image: &Tensor<f32>,
    labels: (usize, usize),
    epsilon: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let m64 = model.cast::<f64>();
    let x64 = image.cast::<f64>();
    let analytic = analytic_gradients(&m64, &x64, labels)?;
    compare_gradients(&m64, &x64, labels, &analytic, epsilon, tolerance)
}
