//! Test-only helpers: pseudo-random tensors and a central finite-difference
//! gradient checker run in f64.

use alloc::vec::Vec;

use crate::graph::{Graph, Var};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub fn random_matrix(rng: &mut Rng, r: usize, c: usize) -> Tensor<f64> {
    let data: Vec<f64> = (0..r * c).map(|_| rng.normal()).collect();
    Tensor::matrix(r, c, data).unwrap()
}

/// Check analytic gradients of `build` against central differences for
/// every element of every input. `build` must return a scalar loss.
pub fn grad_check<B>(inputs: &[Tensor<f64>], build: B, tol: f64)
where
    B: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let forward = |points: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = points.iter().map(|t| g.leaf(t.clone())).collect();
        let loss = build(&mut g, &vars);
        g.value(loss).item()
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = build(&mut g, &vars);
    g.backward(loss).unwrap();
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .enumerate()
        .map(|(i, &v)| match g.grad(v) {
            Some(t) => t.clone(),
            None => Tensor::zeros(inputs[i].shape.clone()),
        })
        .collect();

    for (ti, input) in inputs.iter().enumerate() {
        for ei in 0..input.data.len() {
            let h = 1e-5 * (1.0 + input.data[ei].abs());
            let mut plus = inputs.to_vec();
            plus[ti].data[ei] += h;
            let mut minus = inputs.to_vec();
            minus[ti].data[ei] -= h;
            let numeric = (forward(&plus) - forward(&minus)) / (2.0 * h);
            let a = analytic[ti].data[ei];
            let denom = 1.0_f64.max(a.abs()).max(numeric.abs());
            let rel = (a - numeric).abs() / denom;
            assert!(
                rel < tol,
                "tensor {ti} elem {ei}: analytic {a}, numeric {numeric}, rel {rel}"
            );
        }
    }
}
