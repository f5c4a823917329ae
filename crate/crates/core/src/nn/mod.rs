//! Layers, residual blocks, spectral normalization and optimizers.

mod layers;
mod optim;
mod params;
mod resblock;
mod spectral;

pub use layers::{he_normal, BatchNorm, Conv2d, ConvSpec, Ctx, Dense, Mode, SpectralNorm};
pub use optim::{Optimizer, OptimizerKind};
pub use params::{Bound, Entry, EntryKind, ParamId, ParamSet};
pub use resblock::{Direction, ResBlock, ResBlockSpec};
pub use spectral::{spectral_normalize, SpectralNormState};
