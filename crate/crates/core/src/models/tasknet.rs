use rand::Rng;

use super::{check_image_batch, NUM_SEG_CLASSES};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::Result;
use crate::nn::{Bound, Conv2d, ConvSpec, Ctx, Mode, ParamSet};

/// Small fully convolutional segmentation net: three conv3×3+ReLU stages and
/// a 1×1 conv to per-pixel class logits at input resolution.
#[derive(Clone, Debug)]
pub struct TaskNet {
    pub params: ParamSet,
    pub classes: usize,
    convs: Vec<Conv2d>,
    head: Conv2d,
    pub forwards: u64,
}

impl TaskNet {
    pub fn new<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self::with_width(16, NUM_SEG_CLASSES, rng)
    }

    pub fn with_width<R: Rng + ?Sized>(width: usize, classes: usize, rng: &mut R) -> Self {
        let mut params = ParamSet::new();
        let mut convs = Vec::new();
        let mut cin = 3;
        for i in 0..3 {
            convs.push(Conv2d::new(
                &mut params,
                &format!("tasknet/conv{}", i + 1),
                ConvSpec::same(cin, width, 3),
                rng,
            ));
            cin = width;
        }
        let head = Conv2d::new(&mut params, "tasknet/head", ConvSpec::same(cin, classes, 1), rng);
        TaskNet {
            params,
            classes,
            convs,
            head,
            forwards: 0,
        }
    }

    pub fn bind(&self, tape: &Tape, trainable: bool) -> Bound {
        self.params.bind(tape, trainable)
    }

    /// `N×3×H×W → N×K×H×W` logits.
    pub fn forward(&mut self, tape: &Tape, bound: &Bound, x: Var) -> Result<Var> {
        check_image_batch("tasknet", &tape.shape(x))?;
        self.forwards += 1;
        let mut ctx = Ctx {
            tape,
            bound,
            params: &mut self.params,
            mode: Mode::Eval,
        };
        let mut h = x;
        for c in &self.convs {
            h = c.forward(&mut ctx, h)?;
            h = tape.relu(h)?;
        }
        self.head.forward(&mut ctx, h)
    }

    /// Per-pixel argmax labels, `N·H·W` long.
    pub fn predict(&mut self, x: &Tensor) -> Result<Vec<usize>> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let xv = tape.constant(x.clone());
        let y = self.forward(&tape, &bound, xv)?;
        let logits = tape.value(y);
        Ok(argmax_channels(&logits))
    }
}

/// Argmax over dim 1 of an `N×K×...` tensor; ties go to the lower class.
pub fn argmax_channels(t: &Tensor) -> Vec<usize> {
    let s = t.shape();
    let (n, k) = (s[0], s[1]);
    let inner: usize = s[2..].iter().product();
    let d = t.data();
    let mut out = Vec::with_capacity(n * inner);
    for b in 0..n {
        for p in 0..inner {
            let mut best = 0;
            for c in 1..k {
                if d[(b * k + c) * inner + p] > d[(b * k + best) * inner + p] {
                    best = c;
                }
            }
            out.push(best);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn keeps_resolution() {
        let mut t = TaskNet::new(&mut ChaCha8Rng::seed_from_u64(0));
        let x = Tensor::from_fn([2, 3, 8, 6], |i| (i as f32 * 0.07).cos());
        let labels = t.predict(&x).unwrap();
        assert_eq!(labels.len(), 2 * 8 * 6);
        assert!(labels.iter().all(|&c| c < NUM_SEG_CLASSES));
        assert_eq!(t.forwards, 1);
    }

    #[test]
    fn argmax_prefers_lower_on_ties() {
        let t = Tensor::new([1, 3, 2], vec![1.0, 0.0, 1.0, 2.0, 0.0, 2.0]).unwrap();
        assert_eq!(argmax_channels(&t), vec![0, 1]);
    }
}
