//! Central-difference gradient verification in double precision.

use std::collections::HashSet;

use rand::Rng as _;
use serde::Serialize;

use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// A scalar loss over a set of parameter tensors, evaluated in `f64`.
pub trait Objective {
    /// Sizes of every parameter tensor, in gradient order.
    fn param_sizes(&self) -> Vec<usize>;
    fn param_name(&self, index: usize) -> String;
    fn get(&self, param: usize, elem: usize) -> f64;
    fn set(&mut self, param: usize, elem: usize, value: f64);
    /// Loss plus a hash of every discrete branch taken during the pass.
    fn loss(&self) -> Result<(f64, u64)>;
    fn loss_and_grad(&self) -> Result<(f64, Vec<Tensor<f64>>)>;
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub max_relative_error: f64,
    pub checked: usize,
    /// Samples discarded because the ±ε perturbation crossed a relu kink or
    /// changed a pooling winner.
    pub skipped_kinks: usize,
    pub worst_parameter: String,
    pub epsilon: f64,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares analytic gradients against central differences on up to
/// `samples` parameter elements (all of them if there are fewer).
pub fn gradcheck(obj: &mut impl Objective, epsilon: f64, samples: usize, rng: &mut Rng) -> Result<GradcheckReport> {
    let (_, grads) = obj.loss_and_grad()?;
    let (_, base_sig) = obj.loss()?;
    let sizes = obj.param_sizes();
    let total: usize = sizes.iter().sum();
    let mut offsets = Vec::with_capacity(sizes.len());
    let mut acc = 0;
    for s in &sizes {
        offsets.push(acc);
        acc += s;
    }
    let locate = |flat: usize| -> (usize, usize) {
        let p = offsets.partition_point(|&o| o <= flat) - 1;
        (p, flat - offsets[p])
    };

    let order: Vec<usize> = if total <= samples {
        (0..total).collect()
    } else {
        // Draw without replacement; extra candidates cover kink skips.
        let mut seen = HashSet::new();
        let want = (samples * 2).min(total);
        let mut v = Vec::with_capacity(want);
        while v.len() < want {
            let f = rng.random_range(0..total);
            if seen.insert(f) {
                v.push(f);
            }
        }
        v
    };

    let mut report = GradcheckReport {
        max_relative_error: 0.0,
        checked: 0,
        skipped_kinks: 0,
        worst_parameter: String::new(),
        epsilon,
    };
    for flat in order {
        if report.checked >= samples {
            break;
        }
        let (p, e) = locate(flat);
        let orig = obj.get(p, e);
        obj.set(p, e, orig + epsilon);
        let (plus, sig_plus) = obj.loss()?;
        obj.set(p, e, orig - epsilon);
        let (minus, sig_minus) = obj.loss()?;
        obj.set(p, e, orig);
        if sig_plus != base_sig || sig_minus != base_sig {
            report.skipped_kinks += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * epsilon);
        let analytic = grads[p].data()[e];
        let err = relative_error(analytic, numeric);
        if err > report.max_relative_error || report.worst_parameter.is_empty() {
            report.max_relative_error = report.max_relative_error.max(err);
            report.worst_parameter = format!("{}[{e}]", obj.param_name(p));
        }
        report.checked += 1;
    }
    Ok(report)
}
