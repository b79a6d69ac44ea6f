//! Central finite-difference gradient checking.
//!
//! The numerical side only ever evaluates forward values, so it is
//! independent of every backward rule it checks.

use std::fmt;

use crate::tensor::{Graph, Tensor, Var};

/// Acceptance band: an analytic/numeric pair agrees when
/// `|a - n| <= max(rel * max(|a|, |n|), abs)`.
#[derive(Debug, Clone, Copy)]
pub struct Tolerance {
    pub rel: f64,
    pub abs: f64,
}

impl Tolerance {
    pub const DEFAULT: Tolerance = Tolerance { rel: 1e-4, abs: 1e-6 };

    pub fn accepts(&self, analytic: f64, numeric: f64) -> bool {
        let err = (analytic - numeric).abs();
        err <= (self.rel * analytic.abs().max(numeric.abs())).max(self.abs)
    }
}

/// Step used for the central differences.
pub const DEFAULT_STEP: f64 = 1e-6;

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_abs_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradMismatch {
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl fmt::Display for GradMismatch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "input {} element {}: analytic {:.12e} vs numeric {:.12e}",
            self.input, self.element, self.analytic, self.numeric
        )
    }
}

/// Fixed weights that turn a non-scalar output into a scalar, so every
/// output element contributes to the checked gradient.
fn projection(len: usize) -> Vec<f64> {
    (0..len)
        .map(|i| {
            let x = ((i as f64 + 1.0) * 0.618_033_988_749_895).fract();
            0.5 + x
        })
        .collect()
}

fn scalarize<'g>(out: Var<'g, f64>) -> crate::Result<Var<'g, f64>> {
    if out.value().len() == 1 {
        return Ok(out.reshape(Vec::<usize>::new())?);
    }
    let weights = Tensor::new(out.shape(), projection(out.value().len()))?;
    out.mul(out.graph().constant(weights)).map(|v| v.sum())
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>]) -> f64
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> crate::Result<Var<'g, f64>>,
{
    let g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&g, &vars).expect("forward failed during finite differencing");
    scalarize(out).expect("projection").item()
}

/// Compares the autodiff gradient of `f` with respect to every element of
/// every input against central differences. Non-scalar outputs are reduced
/// with a fixed weighting first.
pub fn check_gradients<F>(
    inputs: &[Tensor<f64>],
    f: F,
    step: f64,
    tol: Tolerance,
) -> Result<GradCheckReport, GradMismatch>
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> crate::Result<Var<'g, f64>>,
{
    let all: Vec<usize> = (0..inputs.len()).collect();
    check_gradients_wrt(inputs, &all, f, step, tol)
}

/// Like [`check_gradients`], but only the inputs listed in `wrt` are
/// differentiated; the rest enter the graph as constants.
pub fn check_gradients_wrt<F>(
    inputs: &[Tensor<f64>],
    wrt: &[usize],
    f: F,
    step: f64,
    tol: Tolerance,
) -> Result<GradCheckReport, GradMismatch>
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> crate::Result<Var<'g, f64>>,
{
    let g = Graph::new();
    let vars: Vec<_> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| g.leaf(t.clone(), wrt.contains(&i)))
        .collect();
    let out = f(&g, &vars).expect("forward failed");
    let loss = scalarize(out).expect("projection");
    g.backward(loss).expect("backward failed");
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| v.grad().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();

    let mut report = GradCheckReport::default();
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for &i in wrt {
        let input = &inputs[i];
        for e in 0..input.len() {
            let orig = input.data()[e];
            probe[i].data_mut()[e] = orig + step;
            let up = evaluate(&f, &probe);
            probe[i].data_mut()[e] = orig - step;
            let down = evaluate(&f, &probe);
            probe[i].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[i].data()[e];
            report.checked += 1;
            report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
            if !tol.accepts(a, numeric) {
                return Err(GradMismatch {
                    input: i,
                    element: e,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}
