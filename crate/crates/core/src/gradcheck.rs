//! Reverse-mode vs central finite-difference gradient comparison.

use crate::error::{Error, Result};
use crate::params::{ParamGrads, ParamId, ParameterStore};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Gradient magnitudes below this are compared absolutely.
    pub floor: f64,
    /// Cap on probed elements per tensor (evenly spaced); `None` probes all.
    pub max_per_tensor: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-5, floor: 1e-3, max_per_tensor: None }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst element.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `eval`'s reverse-mode gradients with central differences of its
/// loss over every (or a sample of every) parameter element.
pub fn grad_check<F>(store: &ParameterStore, eval: F, tolerance: f64, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&ParameterStore) -> Result<(f64, ParamGrads)>,
{
    let (loss, grads) = eval(store)?;
    let (again, _) = eval(store)?;
    if loss.to_bits() != again.to_bits() {
        return Err(Error::GradCheck(format!("closure is not deterministic ({loss} vs {again})")));
    }
    if !loss.is_finite() {
        return Err(Error::GradCheck(format!("loss is not finite ({loss})")));
    }
    let mut probe = store.clone();
    let mut max_rel = 0.0;
    let mut worst = None;
    let mut checked = 0;
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let n = store.value(id).len();
        let indices: Vec<usize> = match opts.max_per_tensor {
            Some(cap) if cap < n => (0..cap).map(|i| i * n / cap).collect(),
            _ => (0..n).collect(),
        };
        for idx in indices {
            let orig = store.value(id).data()[idx];
            probe.value_mut(id).data_mut()[idx] = orig + opts.step;
            let (plus, _) = eval(&probe)?;
            probe.value_mut(id).data_mut()[idx] = orig - opts.step;
            let (minus, _) = eval(&probe)?;
            probe.value_mut(id).data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let analytic = grads.get(id).data()[idx];
            let rel = relative_error(analytic, numeric, opts.floor);
            if rel > max_rel || worst.is_none() {
                if rel > max_rel {
                    max_rel = rel;
                }
                worst = Some((store.name(id).to_string(), idx));
            }
            checked += 1;
        }
    }
    Ok(GradCheckReport { max_rel_error: max_rel, worst, checked, tolerance, passed: max_rel <= tolerance })
}
