use rand::Rng;

use super::layers::{BatchNorm, Conv2d, ConvSpec, Ctx};
use super::params::ParamSet;
use crate::autodiff::{Pool, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Down,
    Up,
}

/// Pre-activation residual block.
///
/// Residual path: `[BN] → ReLU → (up) → conv3×3 → [BN] → ReLU → conv3×3 → (down)`.
/// Shortcut: `(up) → conv1×1 → (down)`. Down blocks mean-pool after the
/// second conv; up blocks upsample before the first. A block fed with raw
/// images can drop the leading `[BN] → ReLU` via `preactivation: false`.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub direction: Direction,
    pub channels_in: usize,
    pub channels_out: usize,
    preactivation: bool,
    bn1: Option<BatchNorm>,
    pub conv1: Conv2d,
    bn2: Option<BatchNorm>,
    pub conv2: Conv2d,
    pub shortcut: Option<Conv2d>,
}

pub struct ResBlockSpec {
    pub direction: Direction,
    pub channels_in: usize,
    pub channels_out: usize,
    pub batch_norm: bool,
    pub spectral_norm: bool,
    pub preactivation: bool,
}

impl ResBlock {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        spec: ResBlockSpec,
        rng: &mut R,
    ) -> Self {
        let (cin, cout, sn) = (spec.channels_in, spec.channels_out, spec.spectral_norm);
        let bn1 = (spec.batch_norm && spec.preactivation)
            .then(|| BatchNorm::new(params, &format!("{name}/bn1"), cin));
        let conv1 = Conv2d::new(
            params,
            &format!("{name}/conv1"),
            ConvSpec::same(cin, cout, 3).spectral(sn),
            rng,
        );
        let bn2 = spec
            .batch_norm
            .then(|| BatchNorm::new(params, &format!("{name}/bn2"), cout));
        let conv2 = Conv2d::new(
            params,
            &format!("{name}/conv2"),
            ConvSpec::same(cout, cout, 3).spectral(sn),
            rng,
        );
        // Every block resamples, so the shortcut always needs its projection.
        let shortcut = Some(Conv2d::new(
            params,
            &format!("{name}/shortcut"),
            ConvSpec::same(cin, cout, 1).spectral(sn),
            rng,
        ));
        ResBlock {
            direction: spec.direction,
            channels_in: cin,
            channels_out: cout,
            preactivation: spec.preactivation,
            bn1,
            conv1,
            bn2,
            conv2,
            shortcut,
        }
    }

    pub fn convs(&self) -> Vec<&Conv2d> {
        let mut v = vec![&self.conv1, &self.conv2];
        v.extend(self.shortcut.as_ref());
        v
    }

    pub fn refresh_spectral_norms(&self, params: &mut ParamSet) {
        for c in self.convs() {
            c.refresh_spectral_norm(params);
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let s = ctx.tape.shape(x);
        if s.len() != 4 || s[1] != self.channels_in {
            return Err(Error::shape(
                "resblock",
                &s,
                &[0, self.channels_in, 0, 0],
            ));
        }
        if self.direction == Direction::Down && (!s[2].is_multiple_of(2) || !s[3].is_multiple_of(2)) {
            return Err(Error::domain(
                "resblock",
                format!("down block needs even spatial dims, got {}x{}", s[2], s[3]),
            ));
        }
        let tape = ctx.tape;

        let mut h = x;
        if let Some(bn) = &self.bn1 {
            h = bn.forward(ctx, h)?;
        }
        if self.preactivation {
            h = tape.relu(h)?;
        }
        if self.direction == Direction::Up {
            h = tape.upsample2(h)?;
        }
        h = self.conv1.forward(ctx, h)?;
        if let Some(bn) = &self.bn2 {
            h = bn.forward(ctx, h)?;
        }
        h = tape.relu(h)?;
        h = self.conv2.forward(ctx, h)?;
        if self.direction == Direction::Down {
            h = tape.pool(h, Pool::Mean2x2)?;
        }

        let mut sc = x;
        if self.direction == Direction::Up {
            sc = tape.upsample2(sc)?;
        }
        if let Some(conv) = &self.shortcut {
            sc = conv.forward(ctx, sc)?;
        }
        if self.direction == Direction::Down {
            sc = tape.pool(sc, Pool::Mean2x2)?;
        }
        tape.add(h, sc)
    }
}
