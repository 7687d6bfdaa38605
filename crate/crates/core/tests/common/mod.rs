//! Shared helpers for the core test suites. Each suite compiles this module
//! independently, so not every helper is used by every binary.
#![allow(dead_code)]

use accent_core::gradcheck::{finite_difference_check, FdReport};
use accent_core::params::{ParameterStore, TapeBinding};
use accent_core::tape::{Tape, Var};
use accent_core::tensor::Tensor;
use accent_core::Result;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn assert_close(a: f64, b: f64, tol: f64, what: &str) {
    assert!(
        (a - b).abs() <= tol,
        "{what}: {a} vs {b} differs by {} (tol {tol})",
        (a - b).abs()
    );
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Drives one forward/backward pass of `graph` over the store's parameters,
/// fills the analytic gradient slots, then runs the central finite-difference
/// sweep with the same graph as the probe.
///
/// `graph` receives a fresh tape plus a binding and must return the scalar
/// loss node; every parameter it reads must go through the binding.
pub fn check_gradients<G>(params: &mut ParameterStore, epsilon: f64, graph: G) -> Result<FdReport>
where
    G: Fn(&mut Tape, &mut TapeBinding, &ParameterStore) -> Result<Var>,
{
    params.zero_grads();
    let mut tape = Tape::new();
    let mut binding = TapeBinding::new();
    let root = graph(&mut tape, &mut binding, params)?;
    let grads = tape.backward(root)?;
    binding.accumulate(&tape, &grads, params, 1.0)?;

    finite_difference_check(
        |p| {
            let mut tape = Tape::new();
            let mut binding = TapeBinding::new();
            let root = graph(&mut tape, &mut binding, p)?;
            tape.value(root).item()
        },
        params,
        epsilon,
    )
}
