//! Shared test helpers: seeded tensors and the central finite-difference
//! gradient oracle. The oracle only ever re-runs forward passes, so it stays
//! independent of the backward rules it checks.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use revit::tensor::{Real, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform tensor over [-scale, scale].
pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<Real> =
        (0..n).map(|_| ((rng.random::<f64>() * 2.0 - 1.0) * scale) as Real).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Row-stochastic map of the given square size.
pub fn rand_stochastic(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    let mut data = vec![0.0 as Real; n * n];
    for r in 0..n {
        let row = &mut data[r * n..(r + 1) * n];
        let mut sum = 0.0f64;
        for v in row.iter_mut() {
            let u = rng.random::<f64>() + 1e-3;
            *v = u as Real;
            sum += u;
        }
        for v in row.iter_mut() {
            *v = (*v as f64 / sum) as Real;
        }
    }
    Tensor::new(vec![n, n], data).unwrap()
}

/// (rtol, atol) for comparing analytic and finite-difference gradients. The
/// absolute floor absorbs the difference-quotient noise floor of the scalar
/// type.
pub fn grad_tolerances() -> (Real, Real) {
    if cfg!(feature = "f64") {
        (1e-5, 1e-8)
    } else {
        (1e-2, 1e-3)
    }
}

/// Central-difference step. The f64 build shrinks it so quotient truncation
/// (~h^2) sits well below the 1e-5 relative tolerance.
#[cfg(not(feature = "f64"))]
pub const FD_STEP: Real = 1e-3;
#[cfg(feature = "f64")]
pub const FD_STEP: Real = 1e-5;

/// Central finite differences of `f` w.r.t. input `which`, element by
/// element.
pub fn numeric_grad<F>(f: F, inputs: &[Tensor], which: usize, h: Real) -> Vec<Real>
where
    F: Fn(&[Tensor]) -> Real,
{
    let n = inputs[which].numel();
    let mut grads = vec![0.0; n];
    for i in 0..n {
        let mut plus = inputs.to_vec();
        plus[which].data_mut()[i] += h;
        let mut minus = inputs.to_vec();
        minus[which].data_mut()[i] -= h;
        grads[i] = (f(&plus) - f(&minus)) / (2.0 * h);
    }
    grads
}

/// |a - n| <= atol + rtol * max(|a|, |n|), element-wise.
pub fn assert_grads_close(analytic: &[Real], numeric: &[Real], ctx: &str) {
    let (rtol, atol) = grad_tolerances();
    assert_eq!(analytic.len(), numeric.len(), "{ctx}: length mismatch");
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let bound = atol + rtol * a.abs().max(n.abs());
        assert!(
            (a - n).abs() <= bound,
            "{ctx}: element {i}: analytic {a} vs numeric {n} (bound {bound})"
        );
    }
}

pub fn max_abs_diff(a: &[Real], b: &[Real]) -> Real {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, Real::max)
}
