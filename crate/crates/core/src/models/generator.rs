use rand::Rng;

use super::{check_image_batch, ConvInfo};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Bound, Conv2d, ConvSpec, Ctx, Direction, Mode, ParamSet, ResBlock, ResBlockSpec};

/// Block widths of the lite generator; the big variant multiplies each by 8.
pub const GENERATOR_WIDTHS: [usize; 4] = [64, 32, 16, 8];
const DIRECTIONS: [Direction; 4] = [Direction::Down, Direction::Down, Direction::Up, Direction::Up];

/// Residual image-to-image generator: two down blocks, two up blocks, then
/// `BN → ReLU → conv3×3 → Tanh` back to RGB.
#[derive(Clone, Debug)]
pub struct Generator {
    pub params: ParamSet,
    pub prefix: String,
    pub widths: [usize; 4],
    blocks: Vec<ResBlock>,
    bn: BatchNorm,
    out: Conv2d,
    /// Number of forward calls since construction.
    pub forwards: u64,
}

impl Generator {
    pub fn new<R: Rng + ?Sized>(prefix: &str, channel_multiplier: usize, rng: &mut R) -> Self {
        assert!(channel_multiplier > 0, "channel multiplier must be positive");
        Self::with_widths(prefix, GENERATOR_WIDTHS.map(|w| w * channel_multiplier), rng)
    }

    pub fn with_widths<R: Rng + ?Sized>(prefix: &str, widths: [usize; 4], rng: &mut R) -> Self {
        let mut params = ParamSet::new();
        let mut blocks = Vec::new();
        let mut cin = 3;
        for (i, (&w, &dir)) in widths.iter().zip(&DIRECTIONS).enumerate() {
            blocks.push(ResBlock::new(
                &mut params,
                &format!("{prefix}/block{}", i + 1),
                ResBlockSpec {
                    direction: dir,
                    channels_in: cin,
                    channels_out: w,
                    batch_norm: true,
                    spectral_norm: true,
                    preactivation: i > 0,
                },
                rng,
            ));
            cin = w;
        }
        let bn = BatchNorm::new(&mut params, &format!("{prefix}/out_bn"), cin);
        let out = Conv2d::new(
            &mut params,
            &format!("{prefix}/out_conv"),
            ConvSpec::same(cin, 3, 3).spectral(true),
            rng,
        );
        Generator {
            params,
            prefix: prefix.to_string(),
            widths,
            blocks,
            bn,
            out,
            forwards: 0,
        }
    }

    pub fn bind(&self, tape: &Tape, trainable: bool) -> Bound {
        self.params.bind(tape, trainable)
    }

    /// `N×3×H×W → N×3×H×W` in (−1, 1). H and W must be divisible by 4.
    pub fn forward(&mut self, tape: &Tape, bound: &Bound, x: Var, mode: Mode) -> Result<Var> {
        let s = tape.shape(x);
        check_image_batch("generator", &s)?;
        if !s[2].is_multiple_of(4) || !s[3].is_multiple_of(4) {
            return Err(Error::domain(
                "generator",
                format!("spatial dims must be divisible by 4, got {}x{}", s[2], s[3]),
            ));
        }
        self.forwards += 1;
        let mut ctx = Ctx {
            tape,
            bound,
            params: &mut self.params,
            mode,
        };
        let mut h = x;
        for b in &self.blocks {
            h = b.forward(&mut ctx, h)?;
        }
        h = self.bn.forward(&mut ctx, h)?;
        h = tape.relu(h)?;
        h = self.out.forward(&mut ctx, h)?;
        tape.tanh(h)
    }

    /// Runs the generator without recording gradients.
    pub fn infer(&mut self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let xv = tape.constant(x.clone());
        let y = self.forward(&tape, &bound, xv, Mode::Eval)?;
        let out = tape.value(y).clone();
        Ok(out)
    }

    pub fn refresh_spectral_norms(&mut self) {
        for b in &self.blocks {
            b.refresh_spectral_norms(&mut self.params);
        }
        self.out.refresh_spectral_norm(&mut self.params);
    }

    /// Zeroes the output conv, making the generator map everything to 0.
    pub fn zero_output(&mut self) {
        self.out.zero(&mut self.params);
    }

    /// Layer sequence in table form.
    pub fn describe(&self) -> Vec<String> {
        let mut v: Vec<String> = self
            .blocks
            .iter()
            .map(|b| {
                let dir = match b.direction {
                    Direction::Down => "down",
                    Direction::Up => "up",
                };
                format!("ResBlock {dir} {}", b.channels_out)
            })
            .collect();
        v.extend(["BN".into(), "ReLU".into(), "Conv3x3 3".into(), "Tanh".into()]);
        v
    }

    pub fn conv_layers(&self) -> Vec<ConvInfo> {
        let mut v: Vec<ConvInfo> = self
            .blocks
            .iter()
            .flat_map(|b| b.convs())
            .map(|c| ConvInfo::of(&self.params, c))
            .collect();
        v.push(ConvInfo::of(&self.params, &self.out));
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy() -> Generator {
        Generator::with_widths("g", [4, 3, 3, 2], &mut ChaCha8Rng::seed_from_u64(1))
    }

    fn input(n: usize, h: usize) -> Tensor {
        Tensor::from_fn([n, 3, h, h], |i| ((i * 37 % 101) as f32 / 50.0) - 1.0)
    }

    #[test]
    fn shape_and_range() {
        let mut g = toy();
        let y = g.infer(&input(2, 8)).unwrap();
        assert_eq!(y.shape(), &[2, 3, 8, 8]);
        assert!(y.data().iter().all(|v| v.abs() < 1.0));
        assert_eq!(g.forwards, 1);
    }

    #[test]
    fn zero_output_conv_gives_zero_image() {
        let mut g = toy();
        g.zero_output();
        let y = g.infer(&input(1, 8)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn indivisible_dims_rejected() {
        let mut g = toy();
        assert!(g.infer(&input(1, 6)).is_err());
        assert_eq!(g.forwards, 0);
    }

    #[test]
    fn describes_table_layout() {
        let g = Generator::new("generator", 1, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(
            g.describe(),
            [
                "ResBlock down 64",
                "ResBlock down 32",
                "ResBlock up 16",
                "ResBlock up 8",
                "BN",
                "ReLU",
                "Conv3x3 3",
                "Tanh"
            ]
        );
    }
}
