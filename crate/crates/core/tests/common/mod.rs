#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vcnet_autodiff::{AutodiffError, Graph, Tensor, Var};
use vcnet_core::model::{ForwardOptions, Sample, VcNet};
use vcnet_core::{CoreError, Dims, VesselMask, Volume3D};

pub fn random_volume(dims: Dims, seed: u64) -> Volume3D {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Volume3D::from_fn(dims, |_, _, _| rng.random::<f32>())
}

pub fn random_mask(dims: Dims, density: f64, seed: u64) -> VesselMask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    VesselMask::from_fn(dims, |_, _, _| rng.random_bool(density))
}

/// A bright tube along the slice axis through `(cx, cy)` with its mask.
pub fn tube_patch(dims: Dims, cx: f64, cy: f64, r: f64) -> (Volume3D, VesselMask) {
    let d = |x: usize, y: usize| ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
    let vol = Volume3D::from_fn(dims, |x, y, _| (-(d(x, y) / r).powi(2)).exp() as f32);
    let mask = VesselMask::from_fn(dims, |x, y, _| d(x, y) <= r);
    (vol, mask)
}

fn ad(e: CoreError) -> AutodiffError {
    AutodiffError::Config(e.to_string())
}

/// Total loss of `model` on `sample`, with the parameters as graph inputs,
/// in 64-bit.
pub fn loss_f64(model: &VcNet, sample: &Sample, g: &mut Graph<f64>, vars: &[Var]) -> Result<Var, AutodiffError> {
    let (input, targets) = sample.cast::<f64>();
    let out = model.graph_forward(g, vars, &input, ForwardOptions::default()).map_err(ad)?;
    let l = model.graph_loss(g, &out, &targets).map_err(ad)?;
    Ok(l.total)
}

/// The model's parameters in 64-bit with biases drawn from U(-0.1, 0.1).
/// Zero-initialised biases put exact zeros on ReLU kinks wherever a conv
/// window is all zero, which breaks central differences.
pub fn tie_free_params(model: &VcNet, seed: u64) -> Vec<Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    model
        .params()
        .iter()
        .map(|p| {
            let mut t: Tensor<f64> = p.value.cast();
            if p.name.ends_with(".b") {
                t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.1..0.1));
            }
            t
        })
        .collect()
}
