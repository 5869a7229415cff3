//! Central finite-difference oracle for reverse-mode gradients.

use super::eval::{Bindings, Mode};
use super::graph::{Graph, NodeId};
use super::params::ParamTable;
use crate::error::{Error, Result};

/// Outcome of a gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over all checked coordinates of
    /// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
    pub max_rel_error: f64,
    /// Parameter holding the worst coordinate.
    pub worst_param: Option<String>,
    pub coordinates: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn loss_value(graph: &Graph, params: &ParamTable<f64>, inputs: &Bindings<f64>, loss: NodeId, mode: Mode) -> Result<f64> {
    let ev = graph.eval(params, inputs, mode)?;
    Ok(ev.value(loss).data()[0])
}

/// Compares the reverse-mode gradient of `loss` with central differences
/// for every coordinate of every trainable parameter.
///
/// Runs in 64-bit precision. In training mode the dropout masks are drawn
/// from the same stream on every evaluation, so they stay fixed across
/// perturbations.
pub fn grad_check(
    graph: &Graph,
    params: &ParamTable<f64>,
    inputs: &Bindings<f64>,
    loss: NodeId,
    step: f64,
    mode: Mode,
) -> Result<GradCheckReport> {
    if !(step > 0.0 && step <= 1e-3) {
        return Err(Error::Config(format!("finite-difference step {step} outside (0, 1e-3]")));
    }
    let grads = graph.eval(params, inputs, mode)?.backward(loss)?;

    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: None,
        coordinates: 0,
    };
    for (name, analytic) in grads.iter() {
        for k in 0..analytic.numel() {
            let orig = probe.get(name).expect("gradient names come from the table").data()[k];
            probe.get_mut(name).expect("present").data_mut()[k] = orig + step;
            let plus = loss_value(graph, &probe, inputs, loss, mode)?;
            probe.get_mut(name).expect("present").data_mut()[k] = orig - step;
            let minus = loss_value(graph, &probe, inputs, loss, mode)?;
            probe.get_mut(name).expect("present").data_mut()[k] = orig;

            let numeric = (plus - minus) / (2.0 * step);
            let err = relative_error(analytic.data()[k], numeric);
            report.coordinates += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = Some(name.to_string());
            }
        }
    }
    Ok(report)
}
