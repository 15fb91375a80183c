//! Finite-difference gradient checking, shared by unit and acceptance tests.
//!
//! The numerical side only ever evaluates the forward pass, so it is
//! independent of the reverse sweep it checks.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::{Graph, Result, Tensor, Var};

pub fn random_tensor(shape: &[usize], scale: f64, rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        z * scale
    })
}

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Relative error `|a - n| / max(|a|, |n|, floor)` between two gradient vectors.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / na.max(nn).max(1e-8)
}

fn evaluate<F>(inputs: &[Tensor<f64>], f: &F) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let root = f(&mut g, &vars).expect("forward evaluation failed");
    g.value(root).item()
}

/// Numerical gradient of the scalar function `f` with respect to every input.
pub fn numerical_gradients<F>(inputs: &[Tensor<f64>], f: F) -> Vec<Vec<f64>>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for k in 0..inputs.len() {
        let mut grad = Vec::with_capacity(inputs[k].numel());
        for i in 0..inputs[k].numel() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + FD_STEP;
            let plus = evaluate(&work, &f);
            work[k].data_mut()[i] = orig - FD_STEP;
            let minus = evaluate(&work, &f);
            work[k].data_mut()[i] = orig;
            grad.push((plus - minus) / (2.0 * FD_STEP));
        }
        out.push(grad);
    }
    out
}

/// Reverse-mode gradient of `f` with respect to every input.
pub fn analytic_gradients<F>(inputs: &[Tensor<f64>], f: F) -> Vec<Vec<f64>>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let root = f(&mut g, &vars).expect("forward evaluation failed");
    g.backward(root).expect("backward failed");
    vars.iter()
        .zip(inputs)
        .map(|(&v, t)| {
            g.grad(v)
                .map(|gr| gr.data().to_vec())
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect()
}

/// Worst relative error over all inputs between reverse-mode and central
/// finite-difference gradients.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], f: F) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradients(inputs, &f);
    let numeric = numerical_gradients(inputs, &f);
    analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(a, n))
        .fold(0.0, f64::max)
}
