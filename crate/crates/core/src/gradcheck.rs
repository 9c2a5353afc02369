//! Central finite-difference checks for graph gradients.
//!
//! Only forward evaluations are used on the numerical side, so the check
//! is independent of every backward closure it validates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::params::{Binding, ParamSet};
use crate::tensor::Tensor;

/// Denominator floor so that vanishing gradients do not blow up the ratio.
pub const RELATIVE_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Projects a non-scalar output onto fixed random weights.
fn scalarize(g: &Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(out);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::randn(&shape, 1.0, &mut rng);
    g.weighted_sum(out, &w)
}

/// Worst disagreement between analytic and numerical derivatives.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Checks `d/dx <r, f(x)>` for every element of `x`.
pub fn check_input_gradient(
    x: &Tensor<f64>,
    f: &dyn Fn(&Graph<f64>, Var) -> Var,
    step: f64,
    seed: u64,
) -> Result<f64> {
    let eval = |input: &Tensor<f64>| -> Result<f64> {
        let g = Graph::new();
        let v = g.constant(input.clone());
        let out = f(&g, v);
        let s = scalarize(&g, out, seed)?;
        Ok(g.value(s).data()[0])
    };
    let g = Graph::new();
    let v = g.leaf(x.clone());
    let out = f(&g, v);
    let s = scalarize(&g, out, seed)?;
    let grads = g.backward(s)?;
    let analytic = grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * step);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Checks parameter gradients of `<r, f(params)>` on up to `per_tensor`
/// randomly chosen entries of every named tensor.
pub fn check_param_gradients(
    params: &ParamSet<f64>,
    f: &dyn Fn(&Binding<f64>) -> Result<Var>,
    step: f64,
    per_tensor: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let eval = |p: &ParamSet<f64>| -> Result<f64> {
        let g = Graph::new();
        let b = Binding::new(&g, p, false);
        let out = f(&b)?;
        let s = scalarize(&g, out, seed)?;
        Ok(g.value(s).data()[0])
    };
    let g = Graph::new();
    let b = Binding::new(&g, params, true);
    let out = f(&b)?;
    let s = scalarize(&g, out, seed)?;
    let grads = b.gradients(&g.backward(s)?);

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let mut report = GradCheckReport { max_relative_error: 0.0, worst: None, checked: 0 };
    for (name, t) in params.iter() {
        let indices: Vec<usize> = if t.len() <= per_tensor {
            (0..t.len()).collect()
        } else {
            (0..per_tensor).map(|_| rng.random_range(0..t.len())).collect()
        };
        for i in indices {
            let mut plus = params.clone();
            plus.get_mut(name)?.data_mut()[i] += step;
            let mut minus = params.clone();
            minus.get_mut(name)?.data_mut()[i] -= step;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * step);
            let analytic = grads.get(name)?.data()[i];
            let err = relative_error(analytic, numeric);
            report.checked += 1;
            if err > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = report.max_relative_error.max(err);
                if err >= report.max_relative_error {
                    report.worst = Some((name.clone(), i));
                }
            }
        }
    }
    Ok(report)
}
