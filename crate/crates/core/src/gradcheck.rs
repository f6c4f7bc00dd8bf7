//! Central finite-difference verification of reverse-mode gradients.

use crate::autodiff::{Fault, Graph, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error, so coordinates whose true
    /// gradient is ~0 are compared absolutely at this scale.
    pub denom_floor: f64,
    /// Coordinates probed per input tensor; all of them when the tensor is
    /// smaller.
    pub max_coords: usize,
    pub seed: u64,
    pub fault: Fault,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            tolerance: 1e-4,
            denom_floor: 1e-4,
            max_coords: 64,
            seed: 0,
            fault: Fault::None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Worst {
    pub input: usize,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub worst: Option<Worst>,
    pub passed: bool,
}

fn relative_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>], fault: Fault) -> Result<(Graph<f64>, Vec<Var>, Var)>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new().with_fault(fault);
    let vars = inputs.iter().map(|t| g.input(t.clone())).collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    if g.value(out).len() != 1 {
        return Err(Error::invalid("grad_check", "function must return a scalar"));
    }
    Ok((g, vars, out))
}

/// Compares the tape gradient of scalar `f` against central differences
/// with step `h` on a seeded subset of coordinates of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let (g, vars, out) = evaluate(&f, inputs, opts.fault)?;
    let grads = g.backward(out)?;
    let mut rng = Rng::new(opts.seed, 0x6772_6164);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        worst: None,
        passed: true,
    };
    let mut probe = inputs.to_vec();
    for (idx, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[idx]).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
        let all: Vec<usize> = (0..input.len()).collect();
        let mut coords = rng.sample_without_replacement(&all, opts.max_coords);
        coords.sort_unstable();
        for c in coords {
            let orig = input.data()[c];
            probe[idx].data_mut()[c] = orig + opts.step;
            let plus = evaluate(&f, &probe, Fault::None)?;
            let fp = plus.0.value(plus.2).data()[0];
            probe[idx].data_mut()[c] = orig - opts.step;
            let minus = evaluate(&f, &probe, Fault::None)?;
            let fm = minus.0.value(minus.2).data()[0];
            probe[idx].data_mut()[c] = orig;

            let numeric = (fp - fm) / (2.0 * opts.step);
            let a = analytic.data()[c];
            let err = relative_error(a, numeric, opts.denom_floor);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                report.worst = Some(Worst {
                    input: idx,
                    coord: c,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    report.passed = report.max_rel_err <= opts.tolerance;
    Ok(report)
}
