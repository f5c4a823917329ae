use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Persistent power-iteration state for one weight.
///
/// The weight is viewed as a matrix of `out` rows (its leading dimension) by
/// the flattened remaining dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralNormState {
    pub u: Vec<f32>,
    pub v: Vec<f32>,
    pub power_iterations: usize,
}

impl SpectralNormState {
    pub fn random<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let mut u: Vec<f32> = (0..rows).map(|_| rng.sample(StandardNormal)).collect();
        normalize(&mut u);
        let mut v: Vec<f32> = (0..cols).map(|_| rng.sample(StandardNormal)).collect();
        normalize(&mut v);
        SpectralNormState {
            u,
            v,
            power_iterations: 1,
        }
    }
}

pub(crate) fn normalize(x: &mut [f32]) -> f64 {
    let norm = x.iter().map(|&a| (a as f64).powi(2)).sum::<f64>().sqrt();
    if norm > 1e-12 {
        x.iter_mut().for_each(|a| *a = (*a as f64 / norm) as f32);
    }
    norm
}

/// One power-iteration update: `v ← Wᵀu/‖Wᵀu‖`, `u ← Wv/‖Wv‖`. Returns
/// `σ̂ = uᵀWv`. A zero direction leaves the previous vector in place.
pub(crate) fn power_iteration(w: &[f32], rows: usize, u: &mut [f32], v: &mut [f32]) -> f64 {
    let cols = w.len() / rows;
    let mut nv = vec![0.0f64; cols];
    for r in 0..rows {
        let ur = u[r] as f64;
        for (c, acc) in nv.iter_mut().enumerate() {
            *acc += w[r * cols + c] as f64 * ur;
        }
    }
    let mut nv32: Vec<f32> = nv.iter().map(|&x| x as f32).collect();
    if normalize(&mut nv32) > 1e-12 {
        v.copy_from_slice(&nv32);
    }
    let mut nu: Vec<f32> = (0..rows)
        .map(|r| {
            w[r * cols..(r + 1) * cols]
                .iter()
                .zip(v.iter())
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum::<f64>() as f32
        })
        .collect();
    let sigma = normalize(&mut nu);
    if sigma > 1e-12 {
        u.copy_from_slice(&nu);
    }
    sigma
}

/// Runs `state.power_iterations` updates and returns `(W/σ̂, σ̂)`.
///
/// An all-zero weight has no direction to estimate; it is returned unchanged
/// with `σ̂ = 1`.
pub fn spectral_normalize(w: &Tensor, state: &mut SpectralNormState) -> Result<(Tensor, f32)> {
    let rows = w.shape()[0];
    let cols = w.numel() / rows;
    if state.u.len() != rows || state.v.len() != cols {
        return Err(Error::shape(
            "spectral_normalize",
            w.shape(),
            &[state.u.len(), state.v.len()],
        ));
    }
    if state.power_iterations == 0 {
        return Err(Error::InvalidArgument(
            "spectral_normalize: power_iterations must be positive".into(),
        ));
    }
    let mut sigma = 0.0;
    for _ in 0..state.power_iterations {
        sigma = power_iteration(w.data(), rows, &mut state.u, &mut state.v);
    }
    if sigma <= 1e-12 {
        return Ok((w.clone(), 1.0));
    }
    let sigma = sigma as f32;
    Ok((w.map(|x| x / sigma), sigma))
}
