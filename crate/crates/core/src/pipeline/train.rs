use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{DetectorLoss, ExperimentConfig, LossSet, TransformerMode};
use crate::autodiff::{Tape, Tensor, Var};
use crate::deteval::{map_at_05, BBox, EvalReport, LabeledBox};
use crate::error::{Error, Result};
use crate::losses::{
    cycle_terms, detection_loss, gan_loss, semantic_alignment_from, splat_loss, Bind, GanSide, LossWeights,
    pair_alignment_loss,
};
use crate::models::{Detection, Detector, Discriminator, Generator, TaskNet};
use crate::nn::{Mode, Optimizer, OptimizerKind};
use crate::synthdata::Dataset;

/// Loss values for one iteration, in a fixed column order.
pub type LossRow = Vec<(&'static str, f64)>;

/// Epoch-wise shuffled minibatch indices.
pub struct Batcher {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Batcher {
    pub fn new(n: usize, seed: u64) -> Self {
        let mut b = Batcher {
            order: (0..n).collect(),
            pos: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        b.order.shuffle(&mut b.rng);
        b
    }

    pub fn next(&mut self, batch: usize) -> Vec<usize> {
        (0..batch)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

fn adam(cfg: &ExperimentConfig, lr: f32) -> Optimizer {
    Optimizer::new(OptimizerKind::adam(lr, cfg.adam_beta1, cfg.adam_beta2))
}

/// Stream seed for a named stage so stages never share random draws.
pub fn stage_seed(seed: u64, stage: &str) -> u64 {
    stage
        .bytes()
        .fold(seed ^ 0x9e37_79b9_7f4a_7c15, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

fn flip_images(x: &Tensor) -> Tensor {
    let s = x.shape();
    let w = s[3];
    let src = x.data();
    Tensor::from_fn(s.to_vec(), |i| {
        let col = i % w;
        src[i - col + (w - 1 - col)]
    })
}

fn flip_boxes(labels: &[Vec<LabeledBox>], w: usize) -> Vec<Vec<LabeledBox>> {
    let w = w as f64;
    labels
        .iter()
        .map(|bs| {
            bs.iter()
                .map(|b| LabeledBox {
                    class: b.class,
                    bbox: BBox::new(w - b.bbox.x2, b.bbox.y1, w - b.bbox.x1, b.bbox.y2),
                })
                .collect()
        })
        .collect()
}

fn flip_segmaps(ys: &[usize], w: usize) -> Vec<usize> {
    (0..ys.len()).map(|i| ys[i - i % w + (w - 1 - i % w)]).collect()
}

/// Supervision for one detector training run.
pub struct DetectorJob<'a> {
    /// Training images (source, target, or adapted source).
    pub images: &'a Dataset,
    /// Box labels aligned with `images`.
    pub labels: &'a [Vec<LabeledBox>],
    pub losses: LossSet,
    /// Unadapted counterparts of `images` and the frozen source detector,
    /// required by the pair loss.
    pub pair: Option<(&'a Dataset, &'a mut Detector)>,
}

/// Adam on the detection objective with random horizontal flips. Calls
/// `log` once per iteration with the loss values.
pub fn train_detector(
    det: &mut Detector,
    job: DetectorJob,
    cfg: &ExperimentConfig,
    iters: usize,
    seed: u64,
    log: &mut dyn FnMut(usize, &LossRow) -> Result<()>,
) -> Result<()> {
    let DetectorJob {
        images,
        labels,
        losses,
        mut pair,
    } = job;
    if images.is_empty() {
        return Err(Error::MissingDataset(images.dir.clone()));
    }
    if labels.len() != images.len() {
        return Err(Error::InvalidArgument(format!(
            "{} images but {} label sets",
            images.len(),
            labels.len()
        )));
    }
    let use_pair = losses.contains(DetectorLoss::Pair);
    let use_pseudo = losses.contains(DetectorLoss::Pseudo);
    if use_pair {
        match &pair {
            Some((orig, _)) if orig.len() == images.len() => {}
            Some((orig, _)) => {
                return Err(Error::Config(format!(
                    "pair loss needs one original per adapted image: {} vs {}",
                    orig.len(),
                    images.len()
                )))
            }
            None => return Err(Error::Config("pair loss requested without paired originals".into())),
        }
    }
    let w = &cfg.weights;
    let mut opt = adam(cfg, cfg.detector_lr);
    let mut batcher = Batcher::new(images.len(), seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
    for it in 0..iters {
        let idx = batcher.next(cfg.batch_size.min(images.len()));
        let flip = rng.random_bool(0.5);
        let mut x = images.batch(&idx);
        let mut ys: Vec<Vec<LabeledBox>> = idx.iter().map(|&i| labels[i].clone()).collect();
        if flip {
            x = flip_images(&x);
            ys = flip_boxes(&ys, images.size);
        }
        let tape = Tape::new();
        let bound = det.bind(&tape, true);
        let xv = tape.constant(x);
        let out = det.forward(&tape, &bound, xv)?;
        let mut row: LossRow = Vec::new();
        let mut terms: Vec<Var> = Vec::new();
        if use_pseudo {
            let targets = det.encode_targets(&ys, images.size, images.size)?;
            let l = detection_loss(&tape, &out, &targets)?;
            row.push(("detection", tape.item_f64(l)));
            terms.push(tape.scale(l, w.pseudo));
        }
        if use_pair {
            let (orig, fs) = pair.as_mut().unwrap();
            let mut xo = orig.batch(&idx);
            if flip {
                xo = flip_images(&xo);
            }
            let fb = fs.bind(&tape, false);
            let xo = tape.constant(xo);
            let phi_s = fs.forward(&tape, &fb, xo)?.phi;
            let l = pair_alignment_loss(&tape, phi_s, out.phi)?;
            row.push(("pair", tape.item_f64(l)));
            terms.push(tape.scale(l, w.pair));
        }
        let mut total = terms[0];
        for &t in &terms[1..] {
            total = tape.add(total, t)?;
        }
        row.push(("total", tape.item_f64(total)));
        let grads = tape.backward_wrt(total, &bound.vars())?;
        opt.step(&mut det.params, &bound, &grads)?;
        log(it, &row)?;
    }
    Ok(())
}

/// Random channel permutation, gain and offset, applied to a whole batch.
fn color_jitter(x: &Tensor, rng: &mut ChaCha8Rng) -> Tensor {
    let s = x.shape().to_vec();
    let plane = s[2] * s[3];
    let mut perm = [0usize, 1, 2];
    perm.shuffle(rng);
    let gain = rng.random_range(0.6f32..1.2);
    let bias = rng.random_range(-0.3f32..0.3);
    let src = x.data();
    Tensor::from_fn(s.clone(), |i| {
        let c = (i / plane) % 3;
        let j = i - c * plane + perm[c] * plane;
        (src[j] * gain + bias).clamp(-1.0, 1.0)
    })
}

/// Trains the segmentation net on source segmaps with colour jitter and
/// flips so that it keys on shape rather than palette.
pub fn train_tasknet(
    t: &mut TaskNet,
    data: &Dataset,
    cfg: &ExperimentConfig,
    iters: usize,
    seed: u64,
    log: &mut dyn FnMut(usize, &LossRow) -> Result<()>,
) -> Result<()> {
    if data.segmaps.is_none() {
        return Err(Error::Config(format!("{} has no segmentation maps", data.dir.display())));
    }
    let mut opt = adam(cfg, cfg.tasknet_lr);
    let mut batcher = Batcher::new(data.len(), seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
    for it in 0..iters {
        let idx = batcher.next(cfg.batch_size.min(data.len()));
        let mut x = color_jitter(&data.batch(&idx), &mut rng);
        let mut ys = data.batch_segmaps(&idx).unwrap();
        if rng.random_bool(0.5) {
            x = flip_images(&x);
            ys = flip_segmaps(&ys, data.size);
        }
        let tape = Tape::new();
        let bound = t.bind(&tape, true);
        let logits = t.forward(&tape, &bound, tape.constant(x))?;
        let l = tape.softmax_cross_entropy(logits, &ys)?;
        let grads = tape.backward_wrt(l, &bound.vars())?;
        opt.step(&mut t.params, &bound, &grads)?;
        log(it, &vec![("segmentation", tape.item_f64(l))])?;
    }
    Ok(())
}

/// Counters and losses for one transformer iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationStats {
    pub iteration: usize,
    pub generator_forwards: u64,
    pub discriminator_forwards: u64,
    pub tasknet_forwards: u64,
    pub wall_clock_seconds: f64,
    pub losses: LossRow,
}

/// Generator/discriminator pair(s) and their optimizers for one mode.
pub struct TransformerTrainer {
    pub mode: TransformerMode,
    /// Source to target.
    pub g: Generator,
    pub d: Discriminator,
    /// Target to source, cycle mode only.
    pub g_rev: Option<Generator>,
    pub d_rev: Option<Discriminator>,
    /// Frozen task net: label preservation in lite/big, semantic alignment
    /// in cycle mode when enabled.
    pub t: Option<TaskNet>,
    pub weights: LossWeights,
    pub semantic_alignment: bool,
    opt_g: Optimizer,
    opt_d: Optimizer,
    opt_g_rev: Option<Optimizer>,
    opt_d_rev: Option<Optimizer>,
    iteration: usize,
}

impl TransformerTrainer {
    pub fn new(cfg: &ExperimentConfig, mode: TransformerMode, t: Option<TaskNet>, seed: u64) -> Result<Self> {
        let semantic_alignment = mode == TransformerMode::Cycle && cfg.cycle_semantic_alignment;
        if (mode.needs_segmaps() || semantic_alignment) && t.is_none() {
            return Err(Error::Config(format!("mode {mode} needs a trained task net")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = mode.channel_multiplier();
        let g = Generator::new("generator", m, &mut rng);
        let d = Discriminator::new("discriminator", m, &mut rng);
        let cycle = mode == TransformerMode::Cycle;
        let g_rev = cycle.then(|| Generator::new("generator_rev", m, &mut rng));
        let d_rev = cycle.then(|| Discriminator::new("discriminator_rev", m, &mut rng));
        Ok(TransformerTrainer {
            mode,
            g,
            d,
            g_rev,
            d_rev,
            t,
            weights: cfg.weights,
            semantic_alignment,
            opt_g: adam(cfg, cfg.generator_lr),
            opt_d: adam(cfg, cfg.discriminator_lr),
            opt_g_rev: cycle.then(|| adam(cfg, cfg.generator_lr)),
            opt_d_rev: cycle.then(|| adam(cfg, cfg.discriminator_lr)),
            iteration: 0,
        })
    }

    fn counters(&self) -> (u64, u64, u64) {
        let g = self.g.forwards + self.g_rev.as_ref().map_or(0, |g| g.forwards);
        let d = self.d.forwards + self.d_rev.as_ref().map_or(0, |d| d.forwards);
        let t = self.t.as_ref().map_or(0, |t| t.forwards);
        (g, d, t)
    }

    /// One generator and one discriminator update. `ys` are the flattened
    /// source segmaps, required outside cycle mode.
    pub fn step(&mut self, xs: &Tensor, ys: Option<&[usize]>, xt: &Tensor) -> Result<IterationStats> {
        let before = self.counters();
        let start = Instant::now();
        let losses = match self.mode {
            TransformerMode::Lite | TransformerMode::Big => {
                let ys = ys.ok_or_else(|| {
                    Error::Config(format!("mode {} needs source segmentation maps", self.mode))
                })?;
                self.step_splat(xs, ys, xt)?
            }
            TransformerMode::Cycle => self.step_cycle(xs, xt)?,
        };
        let elapsed = start.elapsed().as_secs_f64();
        let after = self.counters();
        let stats = IterationStats {
            iteration: self.iteration,
            generator_forwards: after.0 - before.0,
            discriminator_forwards: after.1 - before.1,
            tasknet_forwards: after.2 - before.2,
            wall_clock_seconds: elapsed,
            losses,
        };
        self.iteration += 1;
        Ok(stats)
    }

    fn step_splat(&mut self, xs: &Tensor, ys: &[usize], xt: &Tensor) -> Result<LossRow> {
        let tape = Tape::new();
        let gb = self.g.bind(&tape, true);
        let db = self.d.bind(&tape, true);
        let t = self.t.as_mut().unwrap();
        let tb = t.bind(&tape, false);
        let xs = tape.constant(xs.clone());
        let xt = tape.constant(xt.clone());
        let terms = splat_loss(
            &tape,
            &mut Bind::new(&mut self.g, &gb, Mode::Train),
            &mut Bind::new(&mut self.d, &db, Mode::Train),
            &mut Bind::new(t, &tb, Mode::Eval),
            xs,
            ys,
            &self.weights,
        )?;
        let mut row: LossRow = Vec::new();
        if let Some(v) = terms.gan {
            row.push(("gan_g", tape.item_f64(v)));
        }
        if let Some(v) = terms.label {
            row.push(("label", tape.item_f64(v)));
        }
        row.push(("total_g", tape.item_f64(terms.total)));
        let gg = tape.backward_wrt(terms.total, &gb.vars())?;
        if let Some(fake_logits) = terms.fake_logits {
            let real_logits = self.d.forward(&tape, &db, xt)?;
            let ld = gan_loss(&tape, Some(real_logits), fake_logits, GanSide::Discriminator)?;
            let ld = tape.scale(ld, self.weights.gan);
            row.push(("loss_d", tape.item_f64(ld)));
            let gd = tape.backward_wrt(ld, &db.vars())?;
            self.opt_d.step(&mut self.d.params, &db, &gd)?;
            self.d.refresh_spectral_norms();
        }
        self.opt_g.step(&mut self.g.params, &gb, &gg)?;
        self.g.refresh_spectral_norms();
        Ok(row)
    }

    fn step_cycle(&mut self, xs: &Tensor, xt: &Tensor) -> Result<LossRow> {
        let n = xs.shape()[0];
        let tape = Tape::new();
        let g_rev = self.g_rev.as_mut().unwrap();
        let d_rev = self.d_rev.as_mut().unwrap();
        let gb = self.g.bind(&tape, true);
        let grb = g_rev.bind(&tape, true);
        let db = self.d.bind(&tape, true);
        let drb = d_rev.bind(&tape, true);
        let xs = tape.constant(xs.clone());
        let xt = tape.constant(xt.clone());
        let cyc = cycle_terms(
            &tape,
            &mut Bind::new(&mut self.g, &gb, Mode::Train),
            &mut Bind::new(&mut *g_rev, &grb, Mode::Train),
            xs,
            xt,
        )?;
        // one critic pass per domain over [real; fake]
        let lt = self.d.forward(&tape, &db, tape.concat(&[xt, cyc.fake_target])?)?;
        let ls = d_rev.forward(&tape, &drb, tape.concat(&[xs, cyc.fake_source])?)?;
        let (real_t, fake_t) = (tape.slice(lt, 0, n)?, tape.slice(lt, n, n)?);
        let (real_s, fake_s) = (tape.slice(ls, 0, n)?, tape.slice(ls, n, n)?);
        let w = self.weights;
        let gan_g = tape.add(
            gan_loss(&tape, None, fake_t, GanSide::Generator)?,
            gan_loss(&tape, None, fake_s, GanSide::Generator)?,
        )?;
        let mut row: LossRow = vec![("gan_g", tape.item_f64(gan_g)), ("cycle", tape.item_f64(cyc.loss))];
        let mut total = tape.add(tape.scale(gan_g, w.gan), tape.scale(cyc.loss, w.cycle))?;
        if self.semantic_alignment {
            let t = self.t.as_mut().unwrap();
            let tb = t.bind(&tape, false);
            let sa = semantic_alignment_from(
                &tape,
                &mut Bind::new(t, &tb, Mode::Eval),
                xs,
                cyc.fake_target,
                xt,
                cyc.fake_source,
            )?;
            row.push(("sa", tape.item_f64(sa)));
            total = tape.add(total, tape.scale(sa, w.sa))?;
        }
        row.push(("total_g", tape.item_f64(total)));
        let ld = tape.add(
            gan_loss(&tape, Some(real_t), fake_t, GanSide::Discriminator)?,
            gan_loss(&tape, Some(real_s), fake_s, GanSide::Discriminator)?,
        )?;
        let ld = tape.scale(ld, w.gan);
        row.push(("loss_d", tape.item_f64(ld)));
        let mut gvars = gb.vars();
        gvars.extend(grb.vars());
        let gg = tape.backward_wrt(total, &gvars)?;
        let mut dvars = db.vars();
        dvars.extend(drb.vars());
        let gd = tape.backward_wrt(ld, &dvars)?;
        self.opt_g.step(&mut self.g.params, &gb, &gg)?;
        self.opt_g_rev.as_mut().unwrap().step(&mut g_rev.params, &grb, &gg)?;
        self.opt_d.step(&mut self.d.params, &db, &gd)?;
        self.opt_d_rev.as_mut().unwrap().step(&mut d_rev.params, &drb, &gd)?;
        self.g.refresh_spectral_norms();
        g_rev.refresh_spectral_norms();
        self.d.refresh_spectral_norms();
        d_rev.refresh_spectral_norms();
        Ok(row)
    }
}

/// Runs `g` over a dataset in chunks, returning 8-bit-representable images.
pub fn adapt_dataset(g: &mut Generator, data: &Dataset, chunk: usize) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for part in idx.chunks(chunk.max(1)) {
        let y = g.infer(&data.batch(part))?;
        let per = y.numel() / part.len();
        for k in 0..part.len() {
            let img = Tensor::new([3, data.size, data.size], y.data()[k * per..(k + 1) * per].to_vec())?;
            out.push(crate::synthdata::quantized(&img));
        }
    }
    Ok(out)
}

/// Detections for every image in `data`, batched.
pub fn detect_dataset(
    det: &mut Detector,
    data: &Dataset,
    score_threshold: f64,
    nms_iou: f64,
    chunk: usize,
) -> Result<Vec<Vec<Detection>>> {
    let mut out = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for part in idx.chunks(chunk.max(1)) {
        let ids: Vec<u64> = part.iter().map(|&i| data.seeds[i]).collect();
        out.extend(det.detect(&data.batch(part), &ids, score_threshold, nms_iou)?);
    }
    Ok(out)
}

/// mAP@0.5 of `det` against the dataset's ground-truth boxes.
pub fn evaluate_detector(det: &mut Detector, data: &Dataset, cfg: &ExperimentConfig) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::MissingDataset(data.dir.clone()));
    }
    let gts = data.boxes.as_ref().ok_or_else(|| {
        Error::Config(format!("{} has no ground-truth boxes", data.dir.display()))
    })?;
    let preds = detect_dataset(det, data, cfg.eval_score_threshold, cfg.nms_iou, 32)?;
    let classes: Vec<usize> = (0..det.classes).collect();
    map_at_05(&data.seeds, &preds, gts, &classes)
}
