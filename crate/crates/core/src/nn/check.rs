//! Central finite-difference gradient verification.
//!
//! The training code trusts the hand-written backward passes in
//! [`super::graph`]; this module is the referee. It reduces a graph output to
//! a scalar through a fixed random projection, then compares every analytic
//! parameter and input gradient against `(L(x + eps) - L(x - eps)) / 2 eps`.
//! Double precision keeps the truncation error of the central difference far
//! below the pass threshold, which would not hold in `f32`.

use super::{Gradients, Graph, NnError, ParamStore, Tensor4};
use crate::math;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha12Rng;

/// Worst relative disagreement found, with a label for the offending tensor.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: String,
    pub checked: usize,
}

fn rel_error(a: f64, n: f64) -> f64 {
    let denom = math::abs(a).max(math::abs(n)).max(1e-6);
    math::abs(a - n) / denom
}

/// Projects a tensor to a scalar with deterministic pseudo-random weights.
fn project(out: &Tensor4, weights: &[f64]) -> f64 {
    out.data().iter().zip(weights).map(|(a, b)| a * b).sum()
}

/// Compares analytic gradients with central finite differences for every
/// parameter element and every input element. `eps` is the probe step.
pub fn check_graph_gradients(
    graph: &Graph,
    params: &mut ParamStore,
    inputs: &[Tensor4],
    t: f64,
    eps: f64,
) -> Result<GradCheckReport, NnError> {
    let input_refs: Vec<&Tensor4> = inputs.iter().collect();
    let trace = graph.forward(params, &input_refs, t)?;
    let out_len = trace.output().len();
    let mut wrng = ChaCha12Rng::seed_from_u64(0x9e3779b97f4a7c15);
    let weights: Vec<f64> = (0..out_len).map(|_| wrng.random_range(-1.0..1.0)).collect();

    let grad_out = Tensor4::from_vec(trace.output().shape(), weights.clone())?;
    let mut grads = Gradients::for_store(params);
    let input_grads = graph.backward(params, &trace, &grad_out, &mut grads)?;

    let mut report = GradCheckReport { max_rel_error: 0.0, worst: String::new(), checked: 0 };
    let note = |err: f64, label: String, report: &mut GradCheckReport| {
        report.checked += 1;
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = label;
        }
    };

    // Parameters.
    for id in 0..params.len() {
        for i in 0..params.get(id).len() {
            let orig = params.get(id).data()[i];
            params.get_mut(id).data_mut()[i] = orig + eps;
            let lp = project(graph.forward(params, &input_refs, t)?.output(), &weights);
            params.get_mut(id).data_mut()[i] = orig - eps;
            let lm = project(graph.forward(params, &input_refs, t)?.output(), &weights);
            params.get_mut(id).data_mut()[i] = orig;
            let numeric = (lp - lm) / (2.0 * eps);
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[i]);
            note(
                rel_error(analytic, numeric),
                format!("param '{}'[{i}]", params.name(id)),
                &mut report,
            );
        }
    }

    // Graph inputs.
    let mut probe: Vec<Tensor4> = inputs.to_vec();
    for (slot, input) in inputs.iter().enumerate() {
        for i in 0..input.len() {
            let orig = input.data()[i];
            probe[slot].data_mut()[i] = orig + eps;
            let refs: Vec<&Tensor4> = probe.iter().collect();
            let lp = project(graph.forward(params, &refs, t)?.output(), &weights);
            probe[slot].data_mut()[i] = orig - eps;
            let refs: Vec<&Tensor4> = probe.iter().collect();
            let lm = project(graph.forward(params, &refs, t)?.output(), &weights);
            probe[slot].data_mut()[i] = orig;
            let numeric = (lp - lm) / (2.0 * eps);
            let analytic = if input_grads[slot].is_empty() {
                0.0
            } else {
                input_grads[slot].data()[i]
            };
            note(rel_error(analytic, numeric), format!("input {slot}[{i}]"), &mut report);
        }
    }

    Ok(report)
}
