//! Networks: image generator, discriminator, segmentation task net and the
//! single-stage detector.

mod detector;
mod discriminator;
mod generator;
mod tasknet;

pub use detector::{anchor_center, decode, encode_targets, DetOutput, DetTargets, Detector, ANCHOR_SIZE, STRIDE};
pub use discriminator::{Discriminator, DISCRIMINATOR_WIDTHS};
pub use generator::{Generator, GENERATOR_WIDTHS};
pub use tasknet::{argmax_channels, TaskNet};

use crate::deteval::BBox;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ParamSet};

/// Segmentation classes: background, car, distractor.
pub const NUM_SEG_CLASSES: usize = 3;
/// Detection classes (car only); the detector adds a background class.
pub const NUM_DET_CLASSES: usize = 1;

pub const SEG_BACKGROUND: usize = 0;
pub const SEG_CAR: usize = 1;
pub const SEG_DISTRACTOR: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub image_id: u64,
    pub class: usize,
    pub bbox: BBox,
    pub confidence: f64,
}

impl Detection {
    /// `image_id class x1 y1 x2 y2 confidence`
    pub fn to_line(&self) -> String {
        let b = self.bbox;
        format!(
            "{} {} {:.6} {:.6} {:.6} {:.6} {:.6}",
            self.image_id, self.class, b.x1, b.y1, b.x2, b.y2, self.confidence
        )
    }

    pub fn parse_line(line: &str) -> Result<Detection> {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 7 {
            return Err(Error::Parse {
                context: "detection line".into(),
                detail: format!("expected 7 fields, got {}: {line:?}", f.len()),
            });
        }
        let bad = |e: &dyn std::fmt::Display| Error::Parse {
            context: "detection line".into(),
            detail: format!("{e}: {line:?}"),
        };
        let num = |s: &str| s.parse::<f64>().map_err(|e| bad(&e));
        Ok(Detection {
            image_id: f[0].parse().map_err(|e| bad(&e))?,
            class: f[1].parse().map_err(|e| bad(&e))?,
            bbox: BBox::new(num(f[2])?, num(f[3])?, num(f[4])?, num(f[5])?),
            confidence: num(f[6])?,
        })
    }
}

/// Shape summary of one convolution.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvInfo {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub num_weights: usize,
}

impl ConvInfo {
    pub(crate) fn of(params: &ParamSet, c: &Conv2d) -> Self {
        let name = params.name(c.weight);
        ConvInfo {
            name: name.strip_suffix("/weight").unwrap_or(name).to_string(),
            in_channels: c.in_channels,
            out_channels: c.out_channels,
            kernel: c.kernel,
            num_weights: params.get(c.weight).numel(),
        }
    }
}

pub(crate) fn check_image_batch(op: &'static str, s: &[usize]) -> Result<()> {
    if s.len() != 4 || s[1] != 3 {
        return Err(Error::shape(op, s, &[0, 3, 0, 0]));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detection_line_round_trip() {
        let d = Detection {
            image_id: 42,
            class: 0,
            bbox: BBox::new(1.5, 2.0, 10.25, 12.0),
            confidence: 0.75,
        };
        let line = d.to_line();
        assert_eq!(line, "42 0 1.500000 2.000000 10.250000 12.000000 0.750000");
        assert_eq!(Detection::parse_line(&line).unwrap(), d);
        assert!(Detection::parse_line("1 0 1 2 3").is_err());
    }
}
