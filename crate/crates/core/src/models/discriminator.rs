use rand::Rng;

use super::{check_image_batch, ConvInfo};
use crate::autodiff::{Pool, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, Ctx, Dense, Direction, Mode, ParamSet, ResBlock, ResBlockSpec};

pub const DISCRIMINATOR_WIDTHS: [usize; 6] = [8, 16, 32, 64, 128, 128];

/// Spectrally normalized residual critic: a stack of down blocks, ReLU,
/// global sum pooling and a dense layer to one logit per image.
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub params: ParamSet,
    pub prefix: String,
    pub widths: Vec<usize>,
    blocks: Vec<ResBlock>,
    dense: Dense,
    pub forwards: u64,
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(prefix: &str, channel_multiplier: usize, rng: &mut R) -> Self {
        assert!(channel_multiplier > 0, "channel multiplier must be positive");
        let widths: Vec<usize> = DISCRIMINATOR_WIDTHS.iter().map(|w| w * channel_multiplier).collect();
        Self::with_widths(prefix, &widths, rng)
    }

    pub fn with_widths<R: Rng + ?Sized>(prefix: &str, widths: &[usize], rng: &mut R) -> Self {
        assert!(!widths.is_empty());
        let mut params = ParamSet::new();
        let mut blocks = Vec::new();
        let mut cin = 3;
        for (i, &w) in widths.iter().enumerate() {
            blocks.push(ResBlock::new(
                &mut params,
                &format!("{prefix}/block{}", i + 1),
                ResBlockSpec {
                    direction: Direction::Down,
                    channels_in: cin,
                    channels_out: w,
                    batch_norm: false,
                    spectral_norm: true,
                    preactivation: i > 0,
                },
                rng,
            ));
            cin = w;
        }
        let dense = Dense::new(&mut params, &format!("{prefix}/dense"), cin, 1, true, rng);
        Discriminator {
            params,
            prefix: prefix.to_string(),
            widths: widths.to_vec(),
            blocks,
            dense,
            forwards: 0,
        }
    }

    pub fn bind(&self, tape: &Tape, trainable: bool) -> Bound {
        self.params.bind(tape, trainable)
    }

    /// `N×3×H×W → [N]` logits. H and W must be divisible by `2^blocks`.
    pub fn forward(&mut self, tape: &Tape, bound: &Bound, x: Var) -> Result<Var> {
        let s = tape.shape(x);
        check_image_batch("discriminator", &s)?;
        let m = 1 << self.blocks.len();
        if !s[2].is_multiple_of(m) || !s[3].is_multiple_of(m) {
            return Err(Error::domain(
                "discriminator",
                format!("spatial dims must be divisible by {m}, got {}x{}", s[2], s[3]),
            ));
        }
        self.forwards += 1;
        let mut ctx = Ctx {
            tape,
            bound,
            params: &mut self.params,
            mode: Mode::Train,
        };
        let mut h = x;
        for b in &self.blocks {
            h = b.forward(&mut ctx, h)?;
        }
        h = tape.relu(h)?;
        h = tape.pool(h, Pool::GlobalSum)?;
        let y = self.dense.forward(&mut ctx, h)?;
        tape.reshape(y, &[s[0]])
    }

    pub fn infer(&mut self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let xv = tape.constant(x.clone());
        let y = self.forward(&tape, &bound, xv)?;
        let out = tape.value(y).clone();
        Ok(out)
    }

    pub fn refresh_spectral_norms(&mut self) {
        for b in &self.blocks {
            b.refresh_spectral_norms(&mut self.params);
        }
        self.dense.refresh_spectral_norm(&mut self.params);
    }

    pub fn zero_head(&mut self) {
        self.dense.zero(&mut self.params);
    }

    pub fn describe(&self) -> Vec<String> {
        let mut v: Vec<String> = self
            .blocks
            .iter()
            .map(|b| format!("ResBlock down {}", b.channels_out))
            .collect();
        v.extend(["ReLU".into(), "Global sum pooling".into(), "Dense 1".into()]);
        v
    }

    pub fn conv_layers(&self) -> Vec<ConvInfo> {
        let mut v: Vec<ConvInfo> = self
            .blocks
            .iter()
            .flat_map(|b| b.convs())
            .map(|c| ConvInfo::of(&self.params, c))
            .collect();
        v.push(ConvInfo::of(&self.params, self.dense.conv()));
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy() -> Discriminator {
        Discriminator::with_widths("d", &[4, 4, 6], &mut ChaCha8Rng::seed_from_u64(3))
    }

    #[test]
    fn one_logit_per_image() {
        let mut d = toy();
        let x = Tensor::from_fn([4, 3, 8, 8], |i| (i as f32 * 0.11).sin());
        let y = d.infer(&x).unwrap();
        assert_eq!(y.shape(), &[4]);
        assert!(y.all_finite());
        assert_eq!(d.forwards, 1);
    }

    #[test]
    fn zero_head_gives_zero_logit() {
        let mut d = toy();
        d.zero_head();
        let y = d.infer(&Tensor::full([2, 3, 8, 8], 0.3)).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0]);
    }

    #[test]
    fn batch_permutation_permutes_logits() {
        let mut d = toy();
        let x = Tensor::from_fn([3, 3, 8, 8], |i| ((i * 13 % 29) as f32 / 14.0) - 1.0);
        let per = 3 * 64;
        let mut swapped = x.data().to_vec();
        swapped[..per].copy_from_slice(&x.data()[2 * per..]);
        swapped[2 * per..].copy_from_slice(&x.data()[..per]);
        let a = d.infer(&x).unwrap();
        let b = d.infer(&Tensor::new([3, 3, 8, 8], swapped).unwrap()).unwrap();
        for (i, j) in [(0, 2), (1, 1), (2, 0)] {
            assert!((a.data()[i] - b.data()[j]).abs() < 1e-5);
        }
    }

    #[test]
    fn describes_table_layout() {
        let d = Discriminator::new("discriminator", 1, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(
            d.describe(),
            [
                "ResBlock down 8",
                "ResBlock down 16",
                "ResBlock down 32",
                "ResBlock down 64",
                "ResBlock down 128",
                "ResBlock down 128",
                "ReLU",
                "Global sum pooling",
                "Dense 1"
            ]
        );
    }
}
