//! Central finite-difference check of the full training loss against the
//! autodiff gradient. Requires float64 parameters.
//!
//! Stop-gradient factors are held at their values at the unperturbed point
//! during the finite differences, so both sides differentiate the same
//! surrogate objective.

use candle_core::{DType, Tensor};
use serde::Serialize;

use crate::encoder::AssignMode;
use crate::error::{Error, Result};
use crate::losses::FrozenFactors;
use crate::model::HoiModel;
use crate::nn::to_f64_vec;
use crate::scenes::SceneSample;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// `name[index]` of the entry with the largest relative error.
    pub worst: String,
}

/// Noise-free loss value for the current parameters.
pub fn eval_loss(model: &HoiModel, scenes: &[&SceneSample], frozen: Option<&FrozenFactors>) -> Result<f64> {
    let out = model.forward_scenes(scenes, AssignMode::Eval)?;
    Ok(model.loss_with(&out, scenes, frozen)?.breakdown.total)
}

/// Compares every parameter entry; the relative error denominator is
/// `max(|analytic|, |numeric|, floor)`.
pub fn gradcheck(model: &HoiModel, scenes: &[&SceneSample], eps: f64, floor: f64) -> Result<GradcheckReport> {
    if model.store.dtype() != DType::F64 {
        return Err(Error::Config("gradient check needs float64 parameters".into()));
    }
    let out = model.forward_scenes(scenes, AssignMode::Eval)?;
    let base_loss = model.loss(&out, scenes)?;
    let frozen = base_loss.frozen.clone();
    let grads = base_loss.total.backward()?;
    let mut report = GradcheckReport {
        checked: 0,
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: String::new(),
    };
    for (name, param) in model.store.iter() {
        let t = param.var.as_tensor();
        let shape = t.dims().to_vec();
        let base = to_f64_vec(t)?;
        let analytic = match grads.get(t) {
            Some(g) => to_f64_vec(g)?,
            None => vec![0.0; base.len()],
        };
        let mut values = base.clone();
        for k in 0..base.len() {
            values[k] = base[k] + eps;
            model.store.set(name, &Tensor::from_vec(values.clone(), shape.as_slice(), t.device())?)?;
            let plus = eval_loss(model, scenes, Some(&frozen))?;
            values[k] = base[k] - eps;
            model.store.set(name, &Tensor::from_vec(values.clone(), shape.as_slice(), t.device())?)?;
            let minus = eval_loss(model, scenes, Some(&frozen))?;
            values[k] = base[k];
            let numeric = (plus - minus) / (2.0 * eps);
            let abs = (analytic[k] - numeric).abs();
            let rel = abs / analytic[k].abs().max(numeric.abs()).max(floor);
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = format!("{name}[{k}]");
            }
        }
        model.store.set(name, &Tensor::from_vec(base, shape.as_slice(), t.device())?)?;
    }
    Ok(report)
}
