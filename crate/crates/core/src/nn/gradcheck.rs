//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Module;

/// Gradients smaller than this are compared absolutely rather than
/// relatively, which keeps round-off on near-zero entries from dominating.
const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinate with the largest error.
    pub worst_index: Option<usize>,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn coordinates(n: usize, max_coords: Option<usize>, seed: u64) -> Vec<usize> {
    match max_coords {
        Some(k) if k < n => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut idx = sample(&mut rng, n, k).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..n).collect(),
    }
}

/// Compare `analytic` against central differences of `loss` around `x` on
/// all coordinates, or on a seeded random subset of `max_coords`.
pub fn grad_check<F>(x: &[f64], analytic: &[f64], eps: f64, max_coords: Option<usize>, seed: u64, mut loss: F) -> GradCheckReport
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(x.len(), analytic.len(), "gradient length mismatch");
    let idx = coordinates(x.len(), max_coords, seed);
    let mut probe = x.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: None,
        checked: idx.len(),
    };
    for i in idx {
        probe[i] = x[i] + eps;
        let up = loss(&probe);
        probe[i] = x[i] - eps;
        let down = loss(&probe);
        probe[i] = x[i];
        let err = relative_error(analytic[i], (up - down) / (2.0 * eps));
        if report.worst_index.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = Some(i);
        }
    }
    report
}

/// Gradient check over every parameter of `module`. `loss_backward`
/// must compute the scalar loss and accumulate its parameter gradients.
pub fn grad_check_module<M, F>(module: &mut M, eps: f64, max_coords: Option<usize>, seed: u64, mut loss_backward: F) -> GradCheckReport
where
    M: Module<f64> + Clone,
    F: FnMut(&mut M) -> f64,
{
    module.zero_grad();
    loss_backward(module);
    let analytic = module.flat_grads();
    let x = module.flat_values();
    let mut probe = module.clone();
    let report = grad_check(&x, &analytic, eps, max_coords, seed, |v| {
        probe.set_flat_values(v);
        probe.zero_grad();
        loss_backward(&mut probe)
    });
    module.zero_grad();
    report
}
