//! Shared test helpers: deterministic fill and the central finite-difference
//! gradient checker.
#![allow(dead_code)] // each test target uses a subset

use entitygen_core::tape::{GradTape, VarId};
use entitygen_core::tensor::Tensor;

/// Deterministic pseudo-random tensor (LCG; independent of the crate's RNG).
pub fn lcg_tensor(shape: Vec<usize>, seed: u64) -> Tensor {
    let mut s = seed;
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Relative-error gate with an absolute floor for near-zero gradients
/// (central differences bottom out around 1e-11 of the loss scale).
pub fn grad_close(analytic: f64, fd: f64, tol: f64) -> bool {
    let diff = (analytic - fd).abs();
    diff <= tol * analytic.abs().max(fd.abs()) || diff <= 1e-8
}

/// Check analytic gradients of `build` against central finite differences
/// over every element of every input.
///
/// `build` receives the inputs as parameter leaves and must return a scalar
/// loss node.
pub fn check_grad<F>(build: F, inputs: &[Tensor], h: f64, tol: f64)
where
    F: Fn(&mut GradTape, &[VarId]) -> VarId,
{
    // analytic pass
    let mut tape = GradTape::new();
    let ids: Vec<VarId> = inputs.iter().map(|t| tape.leaf(t.clone().with_grad())).collect();
    let loss = build(&mut tape, &ids);
    let grads = tape.backward(loss).unwrap();

    let eval = |perturbed: &[Tensor]| -> f64 {
        let mut tape = GradTape::new();
        let ids: Vec<VarId> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = build(&mut tape, &ids);
        tape.value(loss).item().unwrap()
    };

    for (pi, input) in inputs.iter().enumerate() {
        let analytic = &grads[&ids[pi]];
        for j in 0..input.numel() {
            let mut plus: Vec<Tensor> = inputs.to_vec();
            plus[pi].data_mut()[j] += h;
            let mut minus: Vec<Tensor> = inputs.to_vec();
            minus[pi].data_mut()[j] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.data()[j];
            assert!(
                grad_close(a, fd, tol),
                "input {} element {}: analytic {} vs fd {}",
                pi,
                j,
                a,
                fd
            );
        }
    }
}
