//! Central finite-difference verification of analytic gradients (64-bit).

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{AutodiffError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Gradients smaller than this are compared absolutely rather than relatively.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input, element)` of the worst disagreement.
    pub worst: Option<(usize, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares `d f / d inputs` from one backward pass against
/// `(f(x + h) - f(x - h)) / 2h` for every input element.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let all: Vec<Vec<usize>> = inputs.iter().map(|t| (0..t.len()).collect()).collect();
    check_elements(&f, inputs, step, &all)
}

/// Like [`grad_check`] but only probes up to `per_input` seeded random
/// elements of each input.
pub fn grad_check_sampled<F>(
    f: F,
    inputs: &[Tensor<f64>],
    step: f64,
    per_input: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<Vec<usize>> = inputs
        .iter()
        .map(|t| {
            if t.len() <= per_input {
                (0..t.len()).collect()
            } else {
                let mut v = sample(&mut rng, t.len(), per_input).into_vec();
                v.sort_unstable();
                v
            }
        })
        .collect();
    check_elements(&f, inputs, step, &picks)
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out);
    if v.len() != 1 {
        return Err(AutodiffError::NonScalarRoot(v.shape().to_vec()));
    }
    Ok(v.item())
}

fn check_elements<F>(
    f: &F,
    inputs: &[Tensor<f64>],
    step: f64,
    picks: &[Vec<usize>],
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let root = f(&mut g, &vars)?;
    g.backward(root)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut report =
        GradCheckReport { max_rel_error: 0.0, worst: None, analytic: 0.0, numeric: 0.0, checked: 0 };
    let mut probe = inputs.to_vec();
    for (i, elems) in picks.iter().enumerate() {
        for &e in elems {
            let orig = probe[i].data()[e];
            probe[i].data_mut()[e] = orig + step;
            let plus = evaluate(f, &probe)?;
            probe[i].data_mut()[e] = orig - step;
            let minus = evaluate(f, &probe)?;
            probe[i].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[i].data()[e];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((i, e));
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
