//! Central-difference verification of the tape's backward rules.

use super::rng::PortableRng;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tol: f64,
    /// Probe at most this many components (chosen with `seed`); `None` probes all.
    pub max_components: Option<usize>,
    pub seed: u64,
    /// Forwarded to [`Tape::inject_fault`] for the analytic pass.
    pub fault: Option<String>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: DEFAULT_STEP, tol: 1e-4, max_components: None, seed: 0, fault: None }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub pass: bool,
    pub checked: usize,
}

/// Compares the tape gradient of scalar `f` at `x` against central differences.
///
/// Error per component is |g_analytic − g_fd| / max(1, |g_fd|).
pub fn grad_check<F>(f: F, x: &Tensor<f64>, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tape<f64>, &Var<f64>) -> Result<Var<f64>>,
{
    grad_check_with(f, x, &GradCheckOptions { step, tol, ..Default::default() })
}

pub fn grad_check_with<F>(f: F, x: &Tensor<f64>, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&Tape<f64>, &Var<f64>) -> Result<Var<f64>>,
{
    let tape = Tape::new();
    if let Some(op) = &opts.fault {
        tape.inject_fault(op);
    }
    let xv = tape.leaf(x.clone());
    let y = f(&tape, &xv)?;
    let analytic = tape.backward(&y)?.wrt(&xv);

    let mut idx: Vec<usize> = (0..x.len()).collect();
    if let Some(m) = opts.max_components {
        if m < idx.len() {
            PortableRng::new(opts.seed).shuffle(&mut idx);
            idx.truncate(m);
        }
    }
    let eval = |t: Tensor<f64>| -> Result<f64> {
        let probe = Tape::inference();
        let v = probe.constant(t);
        Ok(f(&probe, &v)?.item())
    };
    let mut max_rel_err = 0.0f64;
    let mut probe = x.clone();
    for &i in &idx {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + opts.step;
        let up = eval(probe.clone())?;
        probe.data_mut()[i] = orig - opts.step;
        let down = eval(probe.clone())?;
        probe.data_mut()[i] = orig;
        let fd = (up - down) / (2.0 * opts.step);
        let err = (analytic.data()[i] - fd).abs() / fd.abs().max(1.0);
        max_rel_err = max_rel_err.max(if err.is_nan() { f64::INFINITY } else { err });
    }
    Ok(GradCheckReport { max_rel_err, pass: max_rel_err <= opts.tol, checked: idx.len() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::from_fn(&[5], |i| i as f64 - 2.0);
        let r = grad_check(|t, v| Ok(t.sum(v)), &x, DEFAULT_STEP, 1e-9).unwrap();
        assert!(r.max_rel_err <= 1e-9, "{r:?}");
    }

    #[test]
    fn fault_is_detected() {
        let x = Tensor::from_fn(&[4], |i| 0.3 * i as f64 + 0.1);
        let opts = GradCheckOptions { fault: Some("square".into()), ..Default::default() };
        let r = grad_check_with(|t, v| Ok(t.sum(&t.square(v))), &x, &opts).unwrap();
        assert!(!r.pass);
    }
}
