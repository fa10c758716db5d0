//! Central finite-difference gradient checking in double precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::backend::{Builder, ParamId, ParamStore};
use crate::error::Result;
use crate::tensor::Tensor;

/// Step of the central difference.
pub const STEP: f64 = 1e-6;
/// Gradient magnitudes below this are compared absolutely.
pub const FLOOR: f64 = 1e-6;

/// Relative error with a small absolute floor.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Outcome of a check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradReport {
    pub max_rel_error: f64,
    pub checked: usize,
}

impl GradReport {
    fn merge(self, other: GradReport) -> GradReport {
        GradReport {
            max_rel_error: self.max_rel_error.max(other.max_rel_error),
            checked: self.checked + other.checked,
        }
    }
}

/// Compare `grad` with central differences of `f` at `x`.
pub fn check_fn(f: impl Fn(&[f64]) -> f64, x: &[f64], grad: &[f64]) -> GradReport {
    let mut worst: f64 = 0.0;
    let mut xp = x.to_vec();
    for k in 0..x.len() {
        xp[k] = x[k] + STEP;
        let up = f(&xp);
        xp[k] = x[k] - STEP;
        let down = f(&xp);
        xp[k] = x[k];
        worst = worst.max(rel_error(grad[k], (up - down) / (2.0 * STEP)));
    }
    GradReport {
        max_rel_error: worst,
        checked: x.len(),
    }
}

/// Check input and parameter gradients of a block. The scalar objective is
/// `Σ_k <w_k, out_k>` with fixed random weights `w_k`, so every output
/// element contributes with a distinct coefficient. At most
/// `per_tensor` entries of each parameter tensor are probed.
pub fn check_block<M, F>(
    build: impl FnOnce(&mut Builder<'_, f64>) -> Result<M>,
    forward: F,
    input_shape: &[usize],
    seed: u64,
    per_tensor: usize,
) -> Result<GradReport>
where
    F: Fn(&M, &mut Graph<f64>, &ParamStore<f64>, Var) -> Result<Vec<Var>>,
{
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let block = build(&mut Builder::new(&mut store, &mut rng))?;
    // perturb every parameter away from its initial constant so biases,
    // norm scales and shifts are all exercised
    for p in store.params_mut() {
        for v in p.value.data_mut() {
            *v += rng.random_range(-0.2..0.2);
        }
    }
    let input = Tensor::from_fn(input_shape, |_| rng.random_range(-1.0..1.0));

    let eval = |store: &ParamStore<f64>, x: &Tensor<f64>| -> Result<(Graph<f64>, Var, Vec<Var>)> {
        let mut g = Graph::new(true);
        let xv = g.input(x.clone());
        let outs = forward(&block, &mut g, store, xv)?;
        Ok((g, xv, outs))
    };
    let (g, xv, outs) = eval(&store, &input)?;
    let mut wrng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let weights: Vec<Tensor<f64>> = outs
        .iter()
        .map(|&o| Tensor::from_fn(g.value(o).shape(), |_| wrng.random_range(-1.0..1.0)))
        .collect();
    let objective = |store: &ParamStore<f64>, x: &Tensor<f64>| -> Result<f64> {
        let (g, _, outs) = eval(store, x)?;
        Ok(outs
            .iter()
            .zip(&weights)
            .map(|(&o, w)| g.value(o).data().iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>())
            .sum())
    };
    let seeds: Vec<_> = outs.iter().copied().zip(weights.iter().cloned()).collect();
    let grads = g.backward(&seeds)?;

    let mut report = GradReport {
        max_rel_error: 0.0,
        checked: 0,
    };
    let dx = grads.of(xv).cloned().unwrap_or_else(|| Tensor::zeros(input_shape));
    let mut x = input.clone();
    for k in 0..input.len() {
        let base = input.data()[k];
        x.data_mut()[k] = base + STEP;
        let up = objective(&store, &x)?;
        x.data_mut()[k] = base - STEP;
        let down = objective(&store, &x)?;
        x.data_mut()[k] = base;
        report = report.merge(GradReport {
            max_rel_error: rel_error(dx.data()[k], (up - down) / (2.0 * STEP)),
            checked: 1,
        });
    }
    let mut probe = store.clone();
    for id in 0..store.len() {
        let value = store.params()[id].value.clone();
        let zero = Tensor::zeros(value.shape());
        let analytic = grads.param(ParamId(id)).unwrap_or(&zero);
        let n = value.len();
        let stride = n.div_ceil(per_tensor.max(1)).max(1);
        for k in (0..n).step_by(stride) {
            let base = value.data()[k];
            probe.params_mut()[id].value.data_mut()[k] = base + STEP;
            let up = objective(&probe, &input)?;
            probe.params_mut()[id].value.data_mut()[k] = base - STEP;
            let down = objective(&probe, &input)?;
            probe.params_mut()[id].value.data_mut()[k] = base;
            report = report.merge(GradReport {
                max_rel_error: rel_error(analytic.data()[k], (up - down) / (2.0 * STEP)),
                checked: 1,
            });
        }
    }
    Ok(report)
}
