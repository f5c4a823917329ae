//! Training objectives: adversarial, cycle consistency, semantic alignment,
//! label preservation, detection, pseudo-label and pair alignment losses.
//!
//! Models enter through small traits so that tests can substitute closures
//! (identity maps, constant shifts) for real networks.

use crate::autodiff::{Tape, Tensor, Var};
use crate::deteval::LabeledBox;
use crate::error::{Error, Result};
use crate::models::{
    argmax_channels, decode, encode_targets, DetOutput, DetTargets, Detection, Detector, Discriminator,
    Generator, TaskNet,
};
use crate::nn::{Bound, Mode};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub gan: f32,
    pub cycle: f32,
    pub sa: f32,
    pub label: f32,
    pub pseudo: f32,
    pub pair: f32,
    pub unsup: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            gan: 1.0,
            cycle: 1.0,
            sa: 1.0,
            label: 1.0,
            pseudo: 1.0,
            pair: 1.0,
            unsup: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("gan", self.gan),
            ("cycle", self.cycle),
            ("sa", self.sa),
            ("label", self.label),
            ("pseudo", self.pseudo),
            ("pair", self.pair),
            ("unsup", self.unsup),
        ];
        for (name, w) in all {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("loss weight {name} must be non-negative, got {w}")));
            }
        }
        Ok(())
    }
}

/// Image-to-image map recorded on a tape.
pub trait Translator {
    fn translate(&mut self, tape: &Tape, x: Var) -> Result<Var>;
}

/// Per-pixel class logits.
pub trait Segmenter {
    fn segment(&mut self, tape: &Tape, x: Var) -> Result<Var>;
}

/// One logit per image.
pub trait Critic {
    fn criticize(&mut self, tape: &Tape, x: Var) -> Result<Var>;
}

impl<F: FnMut(&Tape, Var) -> Result<Var>> Translator for F {
    fn translate(&mut self, tape: &Tape, x: Var) -> Result<Var> {
        self(tape, x)
    }
}

/// A model paired with its tape bindings.
pub struct Bind<'a, M> {
    pub model: &'a mut M,
    pub bound: &'a Bound,
    pub mode: Mode,
}

impl<'a, M> Bind<'a, M> {
    pub fn new(model: &'a mut M, bound: &'a Bound, mode: Mode) -> Self {
        Bind { model, bound, mode }
    }
}

impl Translator for Bind<'_, Generator> {
    fn translate(&mut self, tape: &Tape, x: Var) -> Result<Var> {
        self.model.forward(tape, self.bound, x, self.mode)
    }
}

impl Segmenter for Bind<'_, TaskNet> {
    fn segment(&mut self, tape: &Tape, x: Var) -> Result<Var> {
        self.model.forward(tape, self.bound, x)
    }
}

impl Critic for Bind<'_, Discriminator> {
    fn criticize(&mut self, tape: &Tape, x: Var) -> Result<Var> {
        self.model.forward(tape, self.bound, x)
    }
}

/// `λ·term`, or `None` when λ is 0 so the term vanishes from the graph.
fn weighted(tape: &Tape, term: Var, w: f32) -> Option<Var> {
    (w != 0.0).then(|| if w == 1.0 { term } else { tape.scale(term, w) })
}

fn sum_terms(tape: &Tape, terms: impl IntoIterator<Item = Option<Var>>) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for t in terms.into_iter().flatten() {
        acc = Some(match acc {
            None => t,
            Some(a) => tape.add(a, t)?,
        });
    }
    Ok(acc.unwrap_or_else(|| tape.constant(Tensor::scalar(0.0))))
}

// ----- adversarial -------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GanSide {
    Discriminator,
    Generator,
}

/// Value of the adversarial objective, `E[log D(x_t)] + E[log(1 − D(G(x_s)))]`,
/// from raw logits. Always ≤ 0.
pub fn gan_value(tape: &Tape, real_logits: Var, fake_logits: Var) -> Result<Var> {
    let a = tape.mean(tape.log_sigmoid(real_logits)?);
    let b = tape.mean(tape.log_sigmoid(tape.scale(fake_logits, -1.0))?);
    tape.add(a, b)
}

/// Discriminator side minimizes the negated value; the generator side uses
/// the non-saturating `−E[log D(G(x_s))]` and ignores `real_logits`.
pub fn gan_loss(tape: &Tape, real_logits: Option<Var>, fake_logits: Var, side: GanSide) -> Result<Var> {
    match side {
        GanSide::Discriminator => {
            let real = real_logits.ok_or_else(|| {
                Error::InvalidArgument("discriminator-side GAN loss needs real logits".into())
            })?;
            Ok(tape.scale(gan_value(tape, real, fake_logits)?, -1.0))
        }
        GanSide::Generator => Ok(tape.scale(tape.mean(tape.log_sigmoid(fake_logits)?), -1.0)),
    }
}

// ----- cycle consistency and semantic alignment -------------------------

pub struct CycleTerms {
    pub loss: Var,
    /// G(x_s)
    pub fake_target: Var,
    /// G′(x_t)
    pub fake_source: Var,
}

/// `mean|G′(G(x_s)) − x_s| + mean|G(G′(x_t)) − x_t|`: four generator passes.
pub fn cycle_terms(
    tape: &Tape,
    g: &mut impl Translator,
    g_rev: &mut impl Translator,
    xs: Var,
    xt: Var,
) -> Result<CycleTerms> {
    let fake_target = g.translate(tape, xs)?;
    let back_s = g_rev.translate(tape, fake_target)?;
    let fake_source = g_rev.translate(tape, xt)?;
    let back_t = g.translate(tape, fake_source)?;
    let ls = tape.mean(tape.abs(tape.sub(back_s, xs)?)?);
    let lt = tape.mean(tape.abs(tape.sub(back_t, xt)?)?);
    Ok(CycleTerms {
        loss: tape.add(ls, lt)?,
        fake_target,
        fake_source,
    })
}

pub fn cycle_loss(
    tape: &Tape,
    g: &mut impl Translator,
    g_rev: &mut impl Translator,
    xs: Var,
    xt: Var,
) -> Result<Var> {
    Ok(cycle_terms(tape, g, g_rev, xs, xt)?.loss)
}

fn self_labels(tape: &Tape, fs: &mut impl Segmenter, x: Var) -> Result<Vec<usize>> {
    let logits = fs.segment(tape, x)?;
    let v = tape.value(logits);
    Ok(argmax_channels(&v))
}

/// Semantic alignment on already translated images: `f_s` on the
/// translations is scored against its own hard predictions on the originals.
pub fn semantic_alignment_from(
    tape: &Tape,
    fs: &mut impl Segmenter,
    xs: Var,
    fake_target: Var,
    xt: Var,
    fake_source: Var,
) -> Result<Var> {
    let ys = self_labels(tape, fs, xs)?;
    let yt = self_labels(tape, fs, xt)?;
    let a = tape.softmax_cross_entropy(fs.segment(tape, fake_target)?, &ys)?;
    let b = tape.softmax_cross_entropy(fs.segment(tape, fake_source)?, &yt)?;
    tape.add(a, b)
}

pub fn semantic_alignment_loss(
    tape: &Tape,
    fs: &mut impl Segmenter,
    g: &mut impl Translator,
    g_rev: &mut impl Translator,
    xs: Var,
    xt: Var,
) -> Result<Var> {
    let fake_target = g.translate(tape, xs)?;
    let fake_source = g_rev.translate(tape, xt)?;
    semantic_alignment_from(tape, fs, xs, fake_target, xt, fake_source)
}

// ----- label preservation and the combined objective ---------------------

/// Pixel-wise cross-entropy of the frozen task net on translated images.
pub fn label_preservation_from(tape: &Tape, t: &mut impl Segmenter, fake: Var, ys: &[usize]) -> Result<Var> {
    let logits = t.segment(tape, fake)?;
    tape.softmax_cross_entropy(logits, ys)
}

pub fn label_preservation_loss(
    tape: &Tape,
    t: &mut impl Segmenter,
    g: &mut impl Translator,
    xs: Var,
    ys: &[usize],
) -> Result<Var> {
    let fake = g.translate(tape, xs)?;
    label_preservation_from(tape, t, fake, ys)
}

pub struct SplatTerms {
    /// Weighted generator objective.
    pub total: Var,
    pub gan: Option<Var>,
    pub label: Option<Var>,
    /// G(x_s)
    pub fake: Var,
    /// D(G(x_s)), reusable for the discriminator update.
    pub fake_logits: Option<Var>,
}

/// `λ_gan·(non-saturating GAN) + λ_label·(label preservation)` with one
/// generator pass, one critic pass on the fake and one task-net pass.
pub fn splat_loss(
    tape: &Tape,
    g: &mut impl Translator,
    d: &mut impl Critic,
    t: &mut impl Segmenter,
    xs: Var,
    ys: &[usize],
    w: &LossWeights,
) -> Result<SplatTerms> {
    let fake = g.translate(tape, xs)?;
    let (gan, fake_logits) = if w.gan != 0.0 {
        let logits = d.criticize(tape, fake)?;
        (Some(gan_loss(tape, None, logits, GanSide::Generator)?), Some(logits))
    } else {
        (None, None)
    };
    let label = if w.label != 0.0 {
        Some(label_preservation_from(tape, t, fake, ys)?)
    } else {
        None
    };
    let total = sum_terms(
        tape,
        [
            gan.and_then(|v| weighted(tape, v, w.gan)),
            label.and_then(|v| weighted(tape, v, w.label)),
        ],
    )?;
    Ok(SplatTerms {
        total,
        gan,
        label,
        fake,
        fake_logits,
    })
}

// ----- detection ---------------------------------------------------------

/// Mean cross-entropy over all cells plus smooth-L1 box regression summed
/// over positive cells and divided by `max(1, positives)`.
pub fn detection_loss(tape: &Tape, out: &DetOutput, targets: &DetTargets) -> Result<Var> {
    let ce = tape.softmax_cross_entropy(out.cls, &targets.classes)?;
    if targets.num_pos == 0 {
        return Ok(ce);
    }
    let off = tape.constant(targets.offsets.clone());
    let mask = tape.constant(targets.mask.clone());
    let diff = tape.mul(tape.sub(out.boxes, off)?, mask)?;
    let reg = tape.sum(tape.smooth_l1(diff)?);
    let reg = tape.scale(reg, 1.0 / targets.num_pos as f32);
    tape.add(ce, reg)
}

/// Detection loss of `f_t` on adapted images against transferred labels.
pub fn pseudo_label_loss(
    tape: &Tape,
    ft: &mut Detector,
    ft_bound: &Bound,
    x: Var,
    labels: &[Vec<LabeledBox>],
) -> Result<Var> {
    let s = tape.shape(x);
    if s.first() != Some(&labels.len()) {
        return Err(Error::InvalidArgument(format!(
            "pseudo_label_loss: {} images but {} label sets",
            s.first().copied().unwrap_or(0),
            labels.len()
        )));
    }
    let out = ft.forward(tape, ft_bound, x)?;
    let targets = encode_targets(labels, s[2], s[3], ft.classes)?;
    detection_loss(tape, &out, &targets)
}

/// Keeps detections whose confidence is at least `threshold`.
pub fn filter_confident(dets: &[Detection], threshold: f64) -> Vec<Detection> {
    dets.iter().filter(|d| d.confidence >= threshold).cloned().collect()
}

pub fn detections_to_labels(dets: &[Detection]) -> Vec<LabeledBox> {
    dets.iter()
        .map(|d| LabeledBox {
            class: d.class,
            bbox: d.bbox,
        })
        .collect()
}

pub struct UnsupTerms {
    pub loss: Var,
    pub pseudo_labels: Vec<Vec<LabeledBox>>,
}

/// Pseudo-labels `x_s′` with the frozen `f_s` (confidence ≥ threshold,
/// NMS at `nms_iou`) and scores `f_t` on `G(x_s′)` against them.
#[allow(clippy::too_many_arguments)]
pub fn unsup_loss(
    tape: &Tape,
    fs: &mut Detector,
    ft: &mut Detector,
    ft_bound: &Bound,
    g: &mut impl Translator,
    xs: &Tensor,
    threshold: f64,
    nms_iou: f64,
) -> Result<UnsupTerms> {
    let n = xs.shape()[0];
    let ids: Vec<u64> = (0..n as u64).collect();
    let dets = fs.detect(xs, &ids, 0.0, nms_iou)?;
    let pseudo_labels: Vec<Vec<LabeledBox>> = dets
        .iter()
        .map(|d| detections_to_labels(&filter_confident(d, threshold)))
        .collect();
    let xv = tape.constant(xs.clone());
    let adapted = g.translate(tape, xv)?;
    let loss = pseudo_label_loss(tape, ft, ft_bound, adapted, &pseudo_labels)?;
    Ok(UnsupTerms { loss, pseudo_labels })
}

/// Squared L2 distance between paired feature maps, summed per sample and
/// averaged over the batch.
pub fn pair_alignment_loss(tape: &Tape, phi_s: Var, phi_t: Var) -> Result<Var> {
    let (a, b) = (tape.shape(phi_s), tape.shape(phi_t));
    if a != b {
        return Err(Error::shape("pair_alignment_loss", &a, &b));
    }
    let d = tape.sub(phi_s, phi_t)?;
    let s = tape.sum(tape.square(d)?);
    Ok(tape.scale(s, 1.0 / a[0] as f32))
}

/// Decodes raw head values into detections, for callers that already ran a
/// forward pass.
pub fn detections_from(
    tape: &Tape,
    out: &DetOutput,
    ids: &[u64],
    h: usize,
    w: usize,
    threshold: f64,
    nms_iou: f64,
) -> Result<Vec<Vec<Detection>>> {
    let cls = tape.value(out.cls);
    let boxes = tape.value(out.boxes);
    decode(&cls, &boxes, ids, h, w, threshold, nms_iou)
}
