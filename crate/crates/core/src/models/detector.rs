use rand::Rng;

use super::{check_image_batch, Detection, NUM_DET_CLASSES};
use crate::autodiff::{Tape, Tensor, Var};
use crate::deteval::{nms, BBox, LabeledBox};
use crate::error::{Error, Result};
use crate::nn::{Bound, Conv2d, ConvSpec, Ctx, Mode, ParamSet};

pub const STRIDE: usize = 8;
pub const ANCHOR_SIZE: f64 = 16.0;
/// Log-scale offsets are clamped before exponentiation when decoding.
const MAX_LOG_SCALE: f64 = 4.0;

/// Raw head outputs for a batch.
#[derive(Clone, Copy, Debug)]
pub struct DetOutput {
    /// Last backbone stage, `N×C×H/8×W/8`.
    pub phi: Var,
    /// `N×(K+1)×H/8×W/8`, channel 0 is background.
    pub cls: Var,
    /// `N×4×H/8×W/8` as (dx, dy, dw, dh).
    pub boxes: Var,
}

/// Single-stage detector with one square anchor per stride-8 cell.
#[derive(Clone, Debug)]
pub struct Detector {
    pub params: ParamSet,
    pub classes: usize,
    backbone: Vec<Conv2d>,
    cls_head: Conv2d,
    box_head: Conv2d,
    pub forwards: u64,
}

/// Per-cell training targets for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct DetTargets {
    /// `N·gh·gw` class ids, 0 for background.
    pub classes: Vec<usize>,
    /// `N×4×gh×gw` regression targets, zero on background cells.
    pub offsets: Tensor,
    /// `N×4×gh×gw`, 1 on positive cells.
    pub mask: Tensor,
    pub num_pos: usize,
}

impl Detector {
    pub fn new<R: Rng + ?Sized>(rng: &mut R) -> Self {
        // (in, out, stride) per conv; strided convs use 4×4 kernels so even
        // sizes halve exactly
        let layout = [
            ("stage1/conv1", 3, 16, 1),
            ("stage2/conv1", 16, 32, 2),
            ("stage3/conv1", 32, 64, 2),
            ("stage3/conv2", 64, 64, 1),
            ("stage4/conv1", 64, 64, 2),
            ("stage4/conv2", 64, 64, 1),
        ];
        let mut params = ParamSet::new();
        let backbone = layout
            .iter()
            .map(|&(name, cin, cout, stride)| {
                let spec = if stride == 1 {
                    ConvSpec::same(cin, cout, 3)
                } else {
                    ConvSpec {
                        pad: 1,
                        ..ConvSpec::same(cin, cout, 4).strided(stride)
                    }
                };
                Conv2d::new(&mut params, &format!("detector/{name}"), spec, rng)
            })
            .collect();
        let classes = NUM_DET_CLASSES;
        let cls_head = Conv2d::new(&mut params, "detector/cls_head", ConvSpec::same(64, classes + 1, 1), rng);
        let box_head = Conv2d::new(&mut params, "detector/box_head", ConvSpec::same(64, 4, 1), rng);
        cls_head.zero(&mut params);
        box_head.zero(&mut params);
        Detector {
            params,
            classes,
            backbone,
            cls_head,
            box_head,
            forwards: 0,
        }
    }

    pub fn bind(&self, tape: &Tape, trainable: bool) -> Bound {
        self.params.bind(tape, trainable)
    }

    pub fn forward(&mut self, tape: &Tape, bound: &Bound, x: Var) -> Result<DetOutput> {
        let s = tape.shape(x);
        check_image_batch("detector", &s)?;
        if !s[2].is_multiple_of(STRIDE) || !s[3].is_multiple_of(STRIDE) {
            return Err(Error::domain(
                "detector",
                format!("spatial dims must be divisible by {STRIDE}, got {}x{}", s[2], s[3]),
            ));
        }
        self.forwards += 1;
        let mut ctx = Ctx {
            tape,
            bound,
            params: &mut self.params,
            mode: Mode::Eval,
        };
        let mut h = x;
        for c in &self.backbone {
            h = c.forward(&mut ctx, h)?;
            h = tape.relu(h)?;
        }
        let cls = self.cls_head.forward(&mut ctx, h)?;
        let boxes = self.box_head.forward(&mut ctx, h)?;
        Ok(DetOutput { phi: h, cls, boxes })
    }

    /// Detections per image with confidence ≥ `score_threshold`, clipped,
    /// per-class NMS'd and sorted by descending confidence.
    pub fn detect(
        &mut self,
        x: &Tensor,
        image_ids: &[u64],
        score_threshold: f64,
        nms_iou: f64,
    ) -> Result<Vec<Vec<Detection>>> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let xv = tape.constant(x.clone());
        let out = self.forward(&tape, &bound, xv)?;
        let (h, w) = (x.shape()[2], x.shape()[3]);
        let cls = tape.value(out.cls);
        let boxes = tape.value(out.boxes);
        decode(&cls, &boxes, image_ids, h, w, score_threshold, nms_iou)
    }

    /// Assigns each box to the cell containing its centre; when two boxes
    /// land in one cell the larger wins.
    pub fn encode_targets(&self, labels: &[Vec<LabeledBox>], h: usize, w: usize) -> Result<DetTargets> {
        encode_targets(labels, h, w, self.classes)
    }
}

pub fn anchor_center(row: usize, col: usize) -> (f64, f64) {
    ((col as f64 + 0.5) * STRIDE as f64, (row as f64 + 0.5) * STRIDE as f64)
}

pub fn encode_targets(labels: &[Vec<LabeledBox>], h: usize, w: usize, classes: usize) -> Result<DetTargets> {
    let (gh, gw) = (h / STRIDE, w / STRIDE);
    let cells = gh * gw;
    let n = labels.len();
    let mut cls = vec![0usize; n * cells];
    let mut offsets = vec![0.0f32; n * 4 * cells];
    let mut mask = vec![0.0f32; n * 4 * cells];
    let mut area = vec![0.0f64; n * cells];
    for (b, boxes) in labels.iter().enumerate() {
        for lb in boxes {
            if lb.class >= classes {
                return Err(Error::InvalidArgument(format!(
                    "box class {} outside 0..{classes}",
                    lb.class
                )));
            }
            if !lb.bbox.is_well_formed() {
                return Err(Error::domain("encode_targets", format!("malformed box {:?}", lb.bbox)));
            }
            let (cx, cy) = lb.bbox.center();
            let col = ((cx / STRIDE as f64).floor().max(0.0) as usize).min(gw - 1);
            let row = ((cy / STRIDE as f64).floor().max(0.0) as usize).min(gh - 1);
            let cell = row * gw + col;
            let a = lb.bbox.area();
            if cls[b * cells + cell] != 0 && area[b * cells + cell] >= a {
                continue;
            }
            area[b * cells + cell] = a;
            cls[b * cells + cell] = lb.class + 1;
            let (ax, ay) = anchor_center(row, col);
            let t = [
                (cx - ax) / ANCHOR_SIZE,
                (cy - ay) / ANCHOR_SIZE,
                (lb.bbox.width() / ANCHOR_SIZE).ln(),
                (lb.bbox.height() / ANCHOR_SIZE).ln(),
            ];
            for (k, tk) in t.iter().enumerate() {
                let i = (b * 4 + k) * cells + cell;
                offsets[i] = *tk as f32;
                mask[i] = 1.0;
            }
        }
    }
    let num_pos = cls.iter().filter(|&&c| c != 0).count();
    Ok(DetTargets {
        classes: cls,
        offsets: Tensor::new([n, 4, gh, gw], offsets)?,
        mask: Tensor::new([n, 4, gh, gw], mask)?,
        num_pos,
    })
}

/// Turns raw head outputs into per-image detections.
pub fn decode(
    cls: &Tensor,
    boxes: &Tensor,
    image_ids: &[u64],
    h: usize,
    w: usize,
    score_threshold: f64,
    nms_iou: f64,
) -> Result<Vec<Vec<Detection>>> {
    let s = cls.shape();
    let (n, k1, gh, gw) = (s[0], s[1], s[2], s[3]);
    if image_ids.len() != n {
        return Err(Error::InvalidArgument(format!(
            "{} image ids for a batch of {n}",
            image_ids.len()
        )));
    }
    let cells = gh * gw;
    let (c, b) = (cls.data(), boxes.data());
    let mut all = Vec::with_capacity(n);
    for img in 0..n {
        let mut dets = Vec::new();
        for cell in 0..cells {
            let logits: Vec<f64> = (0..k1).map(|j| c[(img * k1 + j) * cells + cell] as f64).collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            let off = |k: usize| b[(img * 4 + k) * cells + cell] as f64;
            let (ax, ay) = anchor_center(cell / gw, cell % gw);
            let cx = ax + off(0) * ANCHOR_SIZE;
            let cy = ay + off(1) * ANCHOR_SIZE;
            let bw = ANCHOR_SIZE * off(2).clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE).exp();
            let bh = ANCHOR_SIZE * off(3).clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE).exp();
            let bbox = BBox::new(cx - bw / 2.0, cy - bh / 2.0, cx + bw / 2.0, cy + bh / 2.0)
                .clip(w as f64, h as f64);
            if !bbox.is_well_formed() {
                continue;
            }
            for (j, l) in logits.iter().enumerate().skip(1) {
                // Rounding can push a saturated softmax to exactly 1.
                let conf = ((l - m).exp() / z).min(1.0 - 1e-12);
                if conf >= score_threshold {
                    dets.push(Detection {
                        image_id: image_ids[img],
                        class: j - 1,
                        bbox,
                        confidence: conf,
                    });
                }
            }
        }
        all.push(nms(&dets, nms_iou));
    }
    Ok(all)
}
