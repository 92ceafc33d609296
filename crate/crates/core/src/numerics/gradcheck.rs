//! Central finite-difference verification of reverse-mode gradients.
//!
//! The oracle re-evaluates the loss at perturbed parameter values and never
//! touches the tape's backward rules, so it stays independent of the
//! gradient path it checks. It runs in f64 per the precision policy.

use super::tensor::Tensor;
use super::TensorError;

/// One probed coordinate: the analytic and central-difference values and
/// their relative error under `|ad - cd| / max(1, |cd|)`.
#[derive(Debug, Clone)]
pub struct CoordReport {
    pub param: String,
    pub coord: usize,
    pub autodiff: f64,
    pub central: f64,
    pub rel_err: f64,
}

/// Outcome of a finite-difference sweep.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub rel_tol: f64,
    pub step: f64,
    pub probes: usize,
    /// Coordinate with the largest relative error, if any were probed.
    pub worst: Option<CoordReport>,
    /// All coordinates exceeding the tolerance.
    pub failures: Vec<CoordReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "gradcheck: {} probes, {} failures at rel_tol {:.1e}",
            self.probes,
            self.failures.len(),
            self.rel_tol
        )?;
        if let Some(w) = &self.worst {
            write!(
                f,
                "; worst {}[{}] autodiff={:.6e} central={:.6e} rel_err={:.3e}",
                w.param, w.coord, w.autodiff, w.central, w.rel_err
            )?;
        }
        Ok(())
    }
}

/// Compares `autodiff_grads` against central differences of `loss_fn` on
/// every coordinate of every parameter. `loss_fn` must be deterministic:
/// any stochastic inputs (dropout masks, reparameterization noise) have to
/// be replayed identically across probes.
pub fn finite_difference_check<F>(
    params: &[(String, Tensor<f64>)],
    autodiff_grads: &[Vec<f64>],
    mut loss_fn: F,
    step: f64,
    rel_tol: f64,
) -> Result<GradCheckReport, TensorError>
where
    F: FnMut(&[(String, Tensor<f64>)]) -> Result<f64, TensorError>,
{
    if params.len() != autodiff_grads.len() {
        return Err(TensorError::Usage(format!(
            "gradcheck: {} params vs {} gradient buffers",
            params.len(),
            autodiff_grads.len()
        )));
    }
    let mut work: Vec<(String, Tensor<f64>)> = params.to_vec();
    let mut probes = 0usize;
    let mut worst: Option<CoordReport> = None;
    let mut failures = Vec::new();
    for (pi, (name, base)) in params.iter().enumerate() {
        if autodiff_grads[pi].len() != base.numel() {
            return Err(TensorError::Usage(format!(
                "gradcheck: gradient for {} has {} elements, parameter has {}",
                name,
                autodiff_grads[pi].len(),
                base.numel()
            )));
        }
        for coord in 0..base.numel() {
            let orig = base.values()[coord];
            work[pi].1.values_mut()[coord] = orig + step;
            let plus = loss_fn(&work)?;
            work[pi].1.values_mut()[coord] = orig - step;
            let minus = loss_fn(&work)?;
            work[pi].1.values_mut()[coord] = orig;
            let central = (plus - minus) / (2.0 * step);
            let autodiff = autodiff_grads[pi][coord];
            let rel_err = (autodiff - central).abs() / central.abs().max(1.0);
            probes += 1;
            let report = CoordReport {
                param: name.clone(),
                coord,
                autodiff,
                central,
                rel_err,
            };
            if worst.as_ref().map(|w| rel_err > w.rel_err).unwrap_or(true) {
                worst = Some(report.clone());
            }
            if rel_err > rel_tol {
                failures.push(report);
            }
        }
    }
    Ok(GradCheckReport {
        rel_tol,
        step,
        probes,
        worst,
        failures,
    })
}
