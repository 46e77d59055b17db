//! Central finite-difference check of RawMixer parameter gradients.

use rawmix_autodiff::{ParamId, Tape};
use rawmix_core::RawImage;
use serde::Serialize;

use crate::error::Result;
use crate::rawmixer::{BnMode, RawMixer};

/// Smallest step tried when a perturbation straddles a kink.
const MIN_STEP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Absolute differences (elements or norms) below this count as zero error.
    pub abs_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-3,
            abs_floor: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    /// Step actually used; smaller than the configured one after a kink.
    pub step: f64,
}

/// Checked elements of one parameter tensor, compared as a vector.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorSummary {
    pub param: String,
    pub elements: usize,
    /// `|a - n| / max(|a|, |n|)` over the checked elements (2-norms).
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tensors: Vec<TensorSummary>,
    pub max_element_rel_error: f64,
    pub max_tensor_rel_error: f64,
    pub kink_retries: usize,
}

impl GradCheckReport {
    /// Every parameter tensor within `rel_tol`.
    pub fn passed(&self, rel_tol: f64) -> bool {
        self.max_tensor_rel_error <= rel_tol
    }

    /// Single elements whose own relative error exceeds `rel_tol`.
    pub fn element_failures(&self, rel_tol: f64) -> impl Iterator<Item = &GradCheckEntry> {
        self.entries.iter().filter(move |e| e.rel_error > rel_tol)
    }
}

fn rel_error(diff: f64, a: f64, n: f64, floor: f64) -> f64 {
    if diff <= floor {
        0.0
    } else {
        diff / a.max(n)
    }
}

/// Every `(parameter, element)` pair of the model.
pub fn all_elements(model: &RawMixer) -> Vec<(ParamId, usize)> {
    let ps = model.params();
    ps.ids().flat_map(|id| (0..ps.get(id).value.numel()).map(move |i| (id, i))).collect()
}

fn train_loss(model: &RawMixer, imgs: &[&RawImage], labels: &[usize]) -> Result<(f64, u64)> {
    let mut tape = Tape::new();
    let mut bn = model.batch_norm_states().clone();
    let out = model.forward(&mut tape, imgs, BnMode::Train(&mut bn))?;
    let loss = tape.cross_entropy(out.logits, labels)?;
    Ok((tape.value(loss).item().unwrap(), tape.branch_digest()))
}

/// Compares backprop gradients of the train-mode cross-entropy with central
/// differences for the listed elements.
///
/// A difference is only trusted when `+h`, `-h` and the unperturbed pass take
/// the same SELU and max-pool branches; otherwise the step shrinks by 10
/// until they agree (down to 1e-7).
pub fn gradient_check(
    model: &mut RawMixer,
    imgs: &[&RawImage],
    labels: &[usize],
    cfg: &GradCheckConfig,
    elements: &[(ParamId, usize)],
) -> Result<GradCheckReport> {
    let mut tape = Tape::new();
    let mut bn = model.batch_norm_states().clone();
    let out = model.forward(&mut tape, imgs, BnMode::Train(&mut bn))?;
    let loss = tape.cross_entropy(out.logits, labels)?;
    let base = tape.branch_digest();
    model.params_mut().zero_grad();
    tape.backward_params(loss, model.params_mut())?;

    let mut report = GradCheckReport {
        entries: Vec::with_capacity(elements.len()),
        tensors: Vec::new(),
        max_element_rel_error: 0.0,
        max_tensor_rel_error: 0.0,
        kink_retries: 0,
    };
    for &(id, i) in elements {
        let analytic = model.params().get(id).grad[i];
        let orig = model.params().get(id).value.data()[i];
        let mut step = cfg.step;
        let numeric = loop {
            let mut eval = |v: f64| -> Result<(f64, u64)> {
                model.params_mut().get_mut(id).value.data_mut()[i] = v;
                train_loss(model, imgs, labels)
            };
            let (plus, dp) = eval(orig + step)?;
            let (minus, dm) = eval(orig - step)?;
            model.params_mut().get_mut(id).value.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            if (dp == base && dm == base) || step / 10.0 < MIN_STEP {
                break numeric;
            }
            report.kink_retries += 1;
            step /= 10.0;
        };
        let rel_error = rel_error((analytic - numeric).abs(), analytic.abs(), numeric.abs(), cfg.abs_floor);
        report.max_element_rel_error = report.max_element_rel_error.max(rel_error);
        report.entries.push(GradCheckEntry {
            param: model.params().get(id).name.clone(),
            index: i,
            analytic,
            numeric,
            rel_error,
            step,
        });
    }

    for id in model.params().ids() {
        let name = &model.params().get(id).name;
        let (mut diff, mut a, mut n, mut count) = (0.0, 0.0, 0.0, 0);
        for e in report.entries.iter().filter(|e| &e.param == name) {
            diff += (e.analytic - e.numeric).powi(2);
            a += e.analytic * e.analytic;
            n += e.numeric * e.numeric;
            count += 1;
        }
        if count == 0 {
            continue;
        }
        let rel_error = rel_error(diff.sqrt(), a.sqrt(), n.sqrt(), cfg.abs_floor);
        report.max_tensor_rel_error = report.max_tensor_rel_error.max(rel_error);
        report.tensors.push(TensorSummary {
            param: name.clone(),
            elements: count,
            rel_error,
        });
    }
    Ok(report)
}
