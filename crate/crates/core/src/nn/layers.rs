use rand::Rng;
use rand_distr::StandardNormal;

use super::params::{Bound, ParamId, ParamSet};
use super::spectral::{power_iteration, SpectralNormState};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Everything a layer needs during one forward pass.
pub struct Ctx<'a> {
    pub tape: &'a Tape,
    pub bound: &'a Bound,
    pub params: &'a mut ParamSet,
    pub mode: Mode,
}

impl Ctx<'_> {
    pub fn var(&self, id: ParamId) -> Var {
        self.bound.var(id)
    }
}

/// Fan-in scaled Gaussian (He) initialization.
pub fn he_normal<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    let std = (2.0 / fan_in as f64).sqrt() as f32;
    Tensor::from_fn(shape.to_vec(), |_| {
        let z: f32 = rng.sample(StandardNormal);
        z * std
    })
}

const SN_WARMUP_ITERATIONS: usize = 10;

#[derive(Clone, Debug)]
pub struct SpectralNorm {
    u: ParamId,
    v: ParamId,
}

impl SpectralNorm {
    fn new<R: Rng + ?Sized>(params: &mut ParamSet, name: &str, shape: &[usize], rng: &mut R) -> Self {
        let rows = shape[0];
        let cols: usize = shape[1..].iter().product();
        let st = SpectralNormState::random(rows, cols, rng);
        let u = params.add_buffer(format!("{name}/sn_u"), Tensor::new([rows], st.u).unwrap());
        let v = params.add_buffer(format!("{name}/sn_v"), Tensor::new([cols], st.v).unwrap());
        SpectralNorm { u, v }
    }

    fn update(&self, params: &mut ParamSet, weight: ParamId) {
        let w = params.get(weight).clone();
        let rows = w.shape()[0];
        let mut u = params.get(self.u).data().to_vec();
        let mut v = params.get(self.v).data().to_vec();
        power_iteration(w.data(), rows, &mut u, &mut v);
        params.get_mut(self.u).data_mut().copy_from_slice(&u);
        params.get_mut(self.v).data_mut().copy_from_slice(&v);
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    sn: Option<SpectralNorm>,
}

pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub bias: bool,
    pub spectral_norm: bool,
}

impl ConvSpec {
    /// Stride-1 "same" convolution with bias.
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            pad: kernel / 2,
            bias: true,
            spectral_norm: false,
        }
    }

    pub fn strided(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn spectral(mut self, on: bool) -> Self {
        self.spectral_norm = on;
        self
    }
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        spec: ConvSpec,
        rng: &mut R,
    ) -> Self {
        let shape = [spec.out_channels, spec.in_channels, spec.kernel, spec.kernel];
        let weight = params.add_param(format!("{name}/weight"), he_normal(&shape, rng));
        let bias = spec
            .bias
            .then(|| params.add_param(format!("{name}/bias"), Tensor::zeros([spec.out_channels])));
        let sn = spec
            .spectral_norm
            .then(|| SpectralNorm::new(params, name, &shape, rng));
        // Random u, v badly underestimate σ; converge them before first use.
        if let Some(sn) = &sn {
            for _ in 0..SN_WARMUP_ITERATIONS {
                sn.update(params, weight);
            }
        }
        Conv2d {
            weight,
            bias,
            in_channels: spec.in_channels,
            out_channels: spec.out_channels,
            kernel: spec.kernel,
            stride: spec.stride,
            pad: spec.pad,
            sn,
        }
    }

    pub fn spectral_norm(&self) -> bool {
        self.sn.is_some()
    }

    /// One power iteration on the current weight (call once per optimizer step).
    pub fn refresh_spectral_norm(&self, params: &mut ParamSet) {
        if let Some(sn) = &self.sn {
            sn.update(params, self.weight);
        }
    }

    /// Zeroes weight and bias.
    pub fn zero(&self, params: &mut ParamSet) {
        params.get_mut(self.weight).data_mut().fill(0.0);
        if let Some(b) = self.bias {
            params.get_mut(b).data_mut().fill(0.0);
        }
    }

    fn effective_weight(&self, ctx: &Ctx) -> Result<Var> {
        let w = ctx.var(self.weight);
        match &self.sn {
            None => Ok(w),
            Some(sn) => {
                let u = ctx.params.get(sn.u).data();
                let v = ctx.params.get(sn.v).data();
                Ok(ctx.tape.spectral_div(w, u, v)?.0)
            }
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let w = self.effective_weight(ctx)?;
        let y = ctx.tape.conv2d(x, w, self.stride, self.pad)?;
        match self.bias {
            Some(b) => ctx.tape.channel_bias(y, ctx.var(b)),
            None => Ok(y),
        }
    }
}

/// Fully connected layer, stored as a 1×1 convolution so that the weight's
/// leading dimension is the output dimension.
#[derive(Clone, Debug)]
pub struct Dense {
    conv: Conv2d,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        inputs: usize,
        outputs: usize,
        spectral_norm: bool,
        rng: &mut R,
    ) -> Self {
        let spec = ConvSpec::same(inputs, outputs, 1).spectral(spectral_norm);
        Dense {
            conv: Conv2d::new(params, name, spec, rng),
        }
    }

    pub fn conv(&self) -> &Conv2d {
        &self.conv
    }

    pub fn refresh_spectral_norm(&self, params: &mut ParamSet) {
        self.conv.refresh_spectral_norm(params);
    }

    pub fn zero(&self, params: &mut ParamSet) {
        self.conv.zero(params);
    }

    /// `N×in → N×out`.
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let s = ctx.tape.shape(x);
        let x4 = ctx.tape.reshape(x, &[s[0], s[1], 1, 1])?;
        let y = self.conv.forward(ctx, x4)?;
        ctx.tape.reshape(y, &[s[0], self.conv.out_channels])
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
    pub eps: f32,
    pub momentum: f32,
}

impl BatchNorm {
    pub fn new(params: &mut ParamSet, name: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: params.add_param(format!("{name}/gamma"), Tensor::ones([channels])),
            beta: params.add_param(format!("{name}/beta"), Tensor::zeros([channels])),
            running_mean: params.add_buffer(format!("{name}/running_mean"), Tensor::zeros([channels])),
            running_var: params.add_buffer(format!("{name}/running_var"), Tensor::ones([channels])),
            channels,
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    /// Training mode normalizes with batch statistics (at least two values
    /// per channel across batch and space) and
    /// folds them into the running estimates; eval mode uses the estimates.
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let (g, b) = (ctx.var(self.gamma), ctx.var(self.beta));
        match ctx.mode {
            Mode::Train => {
                let (y, stats) = ctx.tape.batch_norm(x, g, b, self.eps, None)?;
                let stats = stats.expect("training mode returns batch stats");
                let n: usize = {
                    let s = ctx.tape.shape(x);
                    s[0] * s[2..].iter().product::<usize>()
                };
                let unbias = if n > 1 { n as f32 / (n - 1) as f32 } else { 1.0 };
                let m = self.momentum;
                for (r, s) in ctx
                    .params
                    .get_mut(self.running_mean)
                    .data_mut()
                    .iter_mut()
                    .zip(&stats.mean)
                {
                    *r = (1.0 - m) * *r + m * s;
                }
                for (r, s) in ctx
                    .params
                    .get_mut(self.running_var)
                    .data_mut()
                    .iter_mut()
                    .zip(&stats.var)
                {
                    *r = (1.0 - m) * *r + m * s * unbias;
                }
                Ok(y)
            }
            Mode::Eval => {
                let mean = ctx.params.get(self.running_mean).data().to_vec();
                let var = ctx.params.get(self.running_var).data().to_vec();
                Ok(ctx.tape.batch_norm(x, g, b, self.eps, Some((&mean, &var)))?.0)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn run_bn(x: Tensor, mode: Mode, scale: f32, shift: f32) -> Result<Tensor> {
        let mut params = ParamSet::new();
        let c = x.shape()[1];
        let bn = BatchNorm::new(&mut params, "bn", c);
        params.get_mut(bn.gamma).data_mut().fill(scale);
        params.get_mut(bn.beta).data_mut().fill(shift);
        let tape = Tape::new();
        let bound = params.bind(&tape, true);
        let xv = tape.constant(x);
        let mut ctx = Ctx {
            tape: &tape,
            bound: &bound,
            params: &mut params,
            mode,
        };
        let y = bn.forward(&mut ctx, xv)?;
        let out = tape.value(y).clone();
        Ok(out)
    }

    #[test]
    fn constant_channel_maps_to_shift() {
        let y = run_bn(Tensor::full([3, 2, 2, 2], 4.0), Mode::Train, 2.0, 0.7).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.7).abs() < 1e-6));
    }

    #[test]
    fn standardized_input_is_a_fixed_point() {
        let raw = [-1.5f32, -0.5, 0.5, 1.5];
        let mean = 0.0;
        let std = (raw.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / 4.0).sqrt();
        let data: Vec<f32> = raw.iter().map(|v| v / std).collect();
        let x = Tensor::new([4, 1], data.clone()).unwrap();
        let y = run_bn(x, Mode::Train, 1.0, 0.0).unwrap();
        for (a, b) in y.data().iter().zip(&data) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn training_mode_rejects_single_value() {
        let err = run_bn(Tensor::zeros([1, 2, 1, 1]), Mode::Train, 1.0, 0.0).unwrap_err();
        assert!(matches!(err, Error::Domain { op: "batch_norm", .. }));
        assert!(run_bn(Tensor::zeros([1, 2, 4, 4]), Mode::Train, 1.0, 0.0).is_ok());
        assert!(run_bn(Tensor::zeros([1, 2, 1, 1]), Mode::Eval, 1.0, 0.0).is_ok());
    }

    #[test]
    fn dense_matches_manual_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = ParamSet::new();
        let d = Dense::new(&mut params, "fc", 3, 2, false, &mut rng);
        let w = params.get(d.conv().weight).clone();
        let tape = Tape::new();
        let bound = params.bind(&tape, false);
        let x = tape.constant(Tensor::new([1, 3], vec![1.0, -2.0, 0.5]).unwrap());
        let mut ctx = Ctx {
            tape: &tape,
            bound: &bound,
            params: &mut params,
            mode: Mode::Eval,
        };
        let y = d.forward(&mut ctx, x).unwrap();
        let y = tape.value(y);
        for o in 0..2 {
            let want: f32 = (0..3).map(|i| w.data()[o * 3 + i] * [1.0, -2.0, 0.5][i]).sum();
            assert!((y.data()[o] - want).abs() < 1e-5);
        }
    }
}
