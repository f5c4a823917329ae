//! Disk-backed pipeline stages. Every stage reads its inputs from the data
//! directory or the run directory and writes checkpoints and CSV metrics
//! into the run directory.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint;
use super::config::{DetectorLoss, ExperimentConfig, LossSet, TransformerMode};
use super::train::{
    adapt_dataset, detect_dataset, evaluate_detector, stage_seed, train_detector, train_tasknet, Batcher,
    DetectorJob, IterationStats, LossRow, TransformerTrainer,
};
use crate::deteval::{EvalReport, LabeledBox};
use crate::error::{Error, Result};
use crate::losses::filter_confident;
use crate::models::{Detection, Detector, Generator, TaskNet};
use crate::synthdata::{make_splits, read_manifest, render_seed, save_png, Dataset, Split, Style};

/// Extension of pseudo-label files written next to source-seg images.
pub const PSEUDO_EXT: &str = "pseudo";

/// Header-first CSV file, truncated when a stage starts and appended to
/// row by row.
pub struct CsvLog {
    path: PathBuf,
    file: fs::File,
}

impl CsvLog {
    pub fn create(path: &Path, header: &[&str]) -> Result<Self> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut log = CsvLog {
            path: path.to_path_buf(),
            file,
        };
        log.row(header.iter().map(|s| s.to_string()))?;
        Ok(log)
    }

    pub fn row(&mut self, fields: impl IntoIterator<Item = String>) -> Result<()> {
        let line: Vec<String> = fields.into_iter().collect();
        writeln!(self.file, "{}", line.join(",")).map_err(|e| Error::io(&self.path, e))
    }
}

fn fmt(x: f64) -> String {
    format!("{x:.6}")
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Loss CSV logger: the header is taken from the first row's names.
struct LossLog {
    path: PathBuf,
    log: Option<CsvLog>,
}

impl LossLog {
    fn new(path: PathBuf) -> Self {
        LossLog { path, log: None }
    }

    fn write(&mut self, it: usize, row: &LossRow) -> Result<()> {
        if self.log.is_none() {
            let mut header = vec!["iteration"];
            header.extend(row.iter().map(|(k, _)| *k));
            self.log = Some(CsvLog::create(&self.path, &header)?);
        }
        let fields = std::iter::once(it.to_string()).chain(row.iter().map(|(_, v)| fmt(*v)));
        self.log.as_mut().unwrap().row(fields)
    }

    /// Leaves a header-only file when no iteration ran.
    fn finish(self, names: &[&str]) -> Result<()> {
        if self.log.is_none() {
            let mut header = vec!["iteration"];
            header.extend_from_slice(names);
            CsvLog::create(&self.path, &header)?;
        }
        Ok(())
    }
}

/// Paths of everything a run writes.
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        RunLayout { root: cfg.run_dir() }
    }

    pub fn source_detector(&self) -> PathBuf {
        self.root.join("source_detector")
    }

    pub fn oracle_detector(&self) -> PathBuf {
        self.root.join("oracle_detector")
    }

    pub fn tasknet(&self) -> PathBuf {
        self.root.join("tasknet")
    }

    pub fn mode_dir(&self, mode: TransformerMode) -> PathBuf {
        self.root.join(mode.name())
    }

    pub fn generator(&self, mode: TransformerMode) -> PathBuf {
        self.mode_dir(mode).join("generator")
    }

    pub fn adapted(&self, mode: TransformerMode) -> PathBuf {
        self.mode_dir(mode).join("adapted")
    }

    pub fn target_detector(&self, mode: TransformerMode, losses: &LossSet) -> PathBuf {
        self.mode_dir(mode).join(format!("target_{}", losses.tag()))
    }

    pub fn eval_csv(&self, stem: &Path, split: &str) -> PathBuf {
        let name = stem.file_name().unwrap().to_string_lossy();
        stem.with_file_name(format!("eval_{name}_{split}.csv"))
    }
}

fn split_dir(cfg: &ExperimentConfig, split: Split) -> PathBuf {
    cfg.data_dir.join(split.dir_name())
}

fn load_split(cfg: &ExperimentConfig, split: Split, label_ext: &str) -> Result<Dataset> {
    Dataset::load(&split_dir(cfg, split), label_ext)
}

/// Boxes for a rendered split, regenerated from the scene seeds.
fn regenerated_boxes(data: &Dataset, style: Style, cfg: &ExperimentConfig) -> Vec<Vec<LabeledBox>> {
    let scene = cfg.data_config().scene;
    data.seeds.iter().map(|&s| render_seed(s, &scene, style).boxes).collect()
}

fn detector_model() -> &'static str {
    "detector"
}

fn generator_model(mode: TransformerMode) -> String {
    format!("generator-{}", mode.name())
}

pub fn new_detector(cfg: &ExperimentConfig) -> Detector {
    Detector::new(&mut ChaCha8Rng::seed_from_u64(stage_seed(cfg.seed, "detector-init")))
}

pub fn load_detector(stem: &Path) -> Result<Detector> {
    let mut det = Detector::new(&mut ChaCha8Rng::seed_from_u64(0));
    checkpoint::load(stem, detector_model(), &mut det.params)?;
    Ok(det)
}

pub fn load_generator(stem: &Path, mode: TransformerMode) -> Result<Generator> {
    let mut g = Generator::new("generator", mode.channel_multiplier(), &mut ChaCha8Rng::seed_from_u64(0));
    checkpoint::load(stem, &generator_model(mode), &mut g.params)?;
    Ok(g)
}

pub fn load_tasknet(stem: &Path) -> Result<TaskNet> {
    let mut t = TaskNet::new(&mut ChaCha8Rng::seed_from_u64(0));
    checkpoint::load(stem, "tasknet", &mut t.params)?;
    Ok(t)
}

/// Renders all splits unless the data directory already holds this seed's.
pub fn gen_data(cfg: &ExperimentConfig) -> Result<()> {
    cfg.validate()?;
    let want = cfg.data_config();
    if let Ok(have) = read_manifest(&cfg.data_dir) {
        if have == want {
            return Ok(());
        }
    }
    make_splits(&want, &cfg.data_dir)
}

/// Source-style evaluation images rendered from a seed range disjoint from
/// every split.
pub fn source_eval_set(cfg: &ExperimentConfig) -> Dataset {
    let d = cfg.data_config();
    Dataset::render(d.source_eval_range(cfg.n_source_eval), &d.scene, Style::Source)
}

fn fit_detector(
    cfg: &ExperimentConfig,
    det: &mut Detector,
    job: DetectorJob,
    stem: &Path,
    stage: &str,
) -> Result<()> {
    let names: Vec<&str> = {
        let mut v = Vec::new();
        if job.losses.contains(DetectorLoss::Pseudo) {
            v.push("detection");
        }
        if job.losses.contains(DetectorLoss::Pair) {
            v.push("pair");
        }
        v.push("total");
        v
    };
    let mut log = LossLog::new(stem.with_file_name(format!(
        "{}_loss.csv",
        stem.file_name().unwrap().to_string_lossy()
    )));
    train_detector(det, job, cfg, cfg.detector_iters, stage_seed(cfg.seed, stage), &mut |i, r| {
        log.write(i, r)
    })?;
    log.finish(&names)?;
    checkpoint::save(stem, detector_model(), &det.params)
}

/// Trains `f_s` on labeled source-det images and records its mAP on a
/// source-style evaluation set.
pub fn train_source(cfg: &ExperimentConfig) -> Result<f64> {
    let data = load_split(cfg, Split::SourceDet, "boxes")?;
    let labels = data
        .boxes
        .clone()
        .ok_or_else(|| Error::MissingDataset(data.dir.join("*.boxes")))?;
    let layout = RunLayout::new(cfg);
    let stem = layout.source_detector();
    let mut det = new_detector(cfg);
    let job = DetectorJob {
        images: &data,
        labels: &labels,
        losses: LossSet::new([DetectorLoss::Pseudo])?,
        pair: None,
    };
    fit_detector(cfg, &mut det, job, &stem, "train-source")?;
    let report = evaluate_detector(&mut det, &source_eval_set(cfg), cfg)?;
    write_text(&layout.eval_csv(&stem, "source-eval"), &report.to_csv())?;
    Ok(report.map)
}

/// Trains the oracle on target-train with labels regenerated from seeds.
pub fn train_oracle(cfg: &ExperimentConfig) -> Result<()> {
    let data = load_split(cfg, Split::TargetTrain, "boxes")?;
    let labels = regenerated_boxes(&data, Style::Target, cfg);
    let mut det = new_detector(cfg);
    let job = DetectorJob {
        images: &data,
        labels: &labels,
        losses: LossSet::new([DetectorLoss::Pseudo])?,
        pair: None,
    };
    fit_detector(cfg, &mut det, job, &RunLayout::new(cfg).oracle_detector(), "train-oracle")
}

/// Pre-trains the frozen task net on source-seg segmentation maps.
pub fn train_tasknet_stage(cfg: &ExperimentConfig) -> Result<()> {
    let data = load_split(cfg, Split::SourceSeg, "boxes")?;
    let mut t = TaskNet::new(&mut ChaCha8Rng::seed_from_u64(stage_seed(cfg.seed, "tasknet-init")));
    let stem = RunLayout::new(cfg).tasknet();
    let mut log = LossLog::new(stem.with_file_name("tasknet_loss.csv"));
    train_tasknet(&mut t, &data, cfg, cfg.tasknet_iters, stage_seed(cfg.seed, "tasknet"), &mut |i, r| {
        log.write(i, r)
    })?;
    log.finish(&["segmentation"])?;
    checkpoint::save(&stem, "tasknet", &t.params)
}

fn stats_header(losses: &[&'static str]) -> Vec<&'static str> {
    let mut h = vec!["iteration", "generator_forwards", "discriminator_forwards", "tasknet_forwards"];
    h.extend_from_slice(losses);
    h
}

fn loss_names(mode: TransformerMode, cfg: &ExperimentConfig) -> Vec<&'static str> {
    match mode {
        TransformerMode::Cycle if cfg.cycle_semantic_alignment => vec!["gan_g", "cycle", "sa", "total_g", "loss_d"],
        TransformerMode::Cycle => vec!["gan_g", "cycle", "total_g", "loss_d"],
        _ => {
            let mut v = Vec::new();
            if cfg.weights.gan != 0.0 {
                v.push("gan_g");
            }
            if cfg.weights.label != 0.0 {
                v.push("label");
            }
            v.push("total_g");
            if cfg.weights.gan != 0.0 {
                v.push("loss_d");
            }
            v
        }
    }
}

fn stats_row(s: &IterationStats) -> Vec<String> {
    let mut r = vec![
        s.iteration.to_string(),
        s.generator_forwards.to_string(),
        s.discriminator_forwards.to_string(),
        s.tasknet_forwards.to_string(),
    ];
    r.extend(s.losses.iter().map(|(_, v)| fmt(*v)));
    r
}

/// Builds a trainer for `mode`, loading the task net when the mode uses it.
pub fn transformer_trainer(cfg: &ExperimentConfig, mode: TransformerMode) -> Result<TransformerTrainer> {
    let needs_t = mode.needs_segmaps() || (mode == TransformerMode::Cycle && cfg.cycle_semantic_alignment);
    let t = if needs_t {
        Some(load_tasknet(&RunLayout::new(cfg).tasknet())?)
    } else {
        None
    };
    TransformerTrainer::new(cfg, mode, t, stage_seed(cfg.seed, &format!("transformer-{}", mode.name())))
}

/// Trains the pixel transformer on source-seg ↔ target-train. Pass counts
/// and losses go to `transformer_stats.csv`, wall-clock times to
/// `transformer_timing.csv`.
pub fn train_transformer(cfg: &ExperimentConfig, mode: TransformerMode) -> Result<Vec<IterationStats>> {
    let src = load_split(cfg, Split::SourceSeg, "boxes")?;
    if mode.needs_segmaps() && src.segmaps.is_none() {
        return Err(Error::Config(format!(
            "mode {mode} needs segmentation maps in {}",
            src.dir.display()
        )));
    }
    let tgt = load_split(cfg, Split::TargetTrain, "boxes")?;
    let mut tr = transformer_trainer(cfg, mode)?;
    let layout = RunLayout::new(cfg);
    let dir = layout.mode_dir(mode);
    let stem = layout.generator(mode);
    let names = loss_names(mode, cfg);
    let mut stats_log = CsvLog::create(&dir.join("transformer_stats.csv"), &stats_header(&names))?;
    let mut time_log = CsvLog::create(&dir.join("transformer_timing.csv"), &["iteration", "wall_clock_seconds"])?;
    let seed = stage_seed(cfg.seed, &format!("transformer-batches-{}", mode.name()));
    let mut bs = Batcher::new(src.len(), seed);
    let mut bt = Batcher::new(tgt.len(), seed ^ 1);
    let n = cfg.batch_size;
    let mut all = Vec::with_capacity(cfg.transformer_iters);
    for it in 0..cfg.transformer_iters {
        let is = bs.next(n);
        let xs = src.batch(&is);
        let ys = src.batch_segmaps(&is);
        let xt = tgt.batch(&bt.next(n));
        let s = tr.step(&xs, ys.as_deref(), &xt)?;
        stats_log.row(stats_row(&s))?;
        time_log.row([s.iteration.to_string(), format!("{:.6}", s.wall_clock_seconds)])?;
        if cfg.checkpoint_every > 0 && (it + 1) % cfg.checkpoint_every == 0 {
            checkpoint::save(&stem, &generator_model(mode), &tr.g.params)?;
        }
        all.push(s);
    }
    checkpoint::save(&stem, &generator_model(mode), &tr.g.params)?;
    Ok(all)
}

/// Writes one pseudo-label file; returns how many detections were kept.
pub fn write_pseudo_labels(dir: &Path, image_id: u64, dets: &[Detection], threshold: f64) -> Result<usize> {
    let kept = filter_confident(dets, threshold);
    let mut text = String::new();
    for d in &kept {
        let _ = writeln!(text, "{}", d.to_line());
    }
    let p = dir.join(format!("{image_id}.{PSEUDO_EXT}"));
    fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    Ok(kept.len())
}

/// Runs `f_s` over source-seg and writes `<seed>.pseudo` files next to the
/// images. Returns (kept, total) detection counts at the NMS stage.
pub fn pseudo_label(cfg: &ExperimentConfig, threshold: f64) -> Result<(usize, usize)> {
    let data = load_split(cfg, Split::SourceSeg, PSEUDO_EXT)?;
    let mut fs_det = load_detector(&RunLayout::new(cfg).source_detector())?;
    let dets = detect_dataset(&mut fs_det, &data, 0.0, cfg.nms_iou, 32)?;
    let mut kept = 0;
    let mut total = 0;
    for (seed, d) in data.seeds.iter().zip(&dets) {
        total += d.len();
        kept += write_pseudo_labels(&data.dir, *seed, d, threshold)?;
    }
    let mut log = CsvLog::create(
        &cfg.run_dir().join("pseudo_labels.csv"),
        &["split", "threshold", "images", "kept", "total"],
    )?;
    log.row([
        Split::SourceSeg.dir_name().to_string(),
        fmt(threshold),
        data.len().to_string(),
        kept.to_string(),
        total.to_string(),
    ])?;
    Ok((kept, total))
}

/// Translates every source-seg image with the trained generator into
/// `<run>/<mode>/adapted/<seed>.png`. Returns the number of images written.
pub fn adapt(cfg: &ExperimentConfig, mode: TransformerMode) -> Result<usize> {
    let layout = RunLayout::new(cfg);
    let mut g = load_generator(&layout.generator(mode), mode)?;
    let data = load_split(cfg, Split::SourceSeg, PSEUDO_EXT)?;
    adapt_into(&mut g, &data, &layout.adapted(mode))
}

pub fn adapt_into(g: &mut Generator, data: &Dataset, out: &Path) -> Result<usize> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let images = adapt_dataset(g, data, 16)?;
    for (seed, img) in data.seeds.iter().zip(&images) {
        save_png(&out.join(format!("{seed}.png")), img)?;
    }
    Ok(images.len())
}

/// Trains `f_t`, initialized from `f_s`, on adapted source-seg images with
/// pseudo-labels, then evaluates it on target-eval. Returns the mAP.
pub fn train_target(cfg: &ExperimentConfig, mode: TransformerMode, losses: &LossSet) -> Result<f64> {
    let layout = RunLayout::new(cfg);
    let adapted = Dataset::load(&layout.adapted(mode), PSEUDO_EXT)?;
    let originals = load_split(cfg, Split::SourceSeg, PSEUDO_EXT)?;
    if originals.seeds != adapted.seeds {
        return Err(Error::Config(format!(
            "{} does not pair one to one with {}",
            adapted.dir.display(),
            originals.dir.display()
        )));
    }
    let labels = originals.boxes.clone().ok_or_else(|| {
        Error::MissingDataset(originals.dir.join(format!("*.{PSEUDO_EXT}")))
    })?;
    let fs_stem = layout.source_detector();
    let mut det = load_detector(&fs_stem)?;
    let mut frozen = if losses.contains(DetectorLoss::Pair) {
        Some(load_detector(&fs_stem)?)
    } else {
        None
    };
    let job = DetectorJob {
        images: &adapted,
        labels: &labels,
        losses: losses.clone(),
        pair: frozen.as_mut().map(|f| (&originals, f)),
    };
    let stem = layout.target_detector(mode, losses);
    fit_detector(cfg, &mut det, job, &stem, &format!("train-target-{}-{}", mode.name(), losses.tag()))?;
    Ok(evaluate(cfg, &stem, Split::TargetEval)?.map)
}

/// Evaluates a detector checkpoint on a labeled split and writes the report
/// CSV next to the checkpoint.
pub fn evaluate(cfg: &ExperimentConfig, stem: &Path, split: Split) -> Result<EvalReport> {
    let mut det = load_detector(stem)?;
    let data = load_split(cfg, split, "boxes")?;
    if data.boxes.is_none() {
        return Err(Error::Config(format!("{} has no ground-truth boxes", data.dir.display())));
    }
    let report = evaluate_detector(&mut det, &data, cfg)?;
    write_text(&RunLayout::new(cfg).eval_csv(stem, split.dir_name()), &report.to_csv())?;
    Ok(report)
}

/// Median per-iteration time and pass counts for one mode.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub mode: TransformerMode,
    pub generator_forwards: u64,
    pub discriminator_forwards: u64,
    pub tasknet_forwards: u64,
    pub median_seconds: f64,
    pub speedup: Option<f64>,
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Times `bench_warmup + bench_iters` single-image iterations per mode on
/// synthetic inputs and keeps the median of the warm ones. Speedups are
/// relative to cycle mode when it is among `modes`.
pub fn benchmark(cfg: &ExperimentConfig, modes: &[TransformerMode]) -> Result<Vec<BenchRow>> {
    let d = cfg.data_config();
    let base = d.seed_range(Split::SourceSeg).start;
    let xs = Dataset::render(base..base + 1, &d.scene, Style::Source);
    let xt = Dataset::render(base..base + 1, &d.scene, Style::Target);
    let (xs_img, xt_img) = (xs.batch(&[0]), xt.batch(&[0]));
    let ys = xs.batch_segmaps(&[0]).unwrap();
    let mut rows = Vec::new();
    for &mode in modes {
        let mut c = cfg.clone();
        c.cycle_semantic_alignment = false;
        let t = TaskNet::new(&mut ChaCha8Rng::seed_from_u64(stage_seed(cfg.seed, "bench-tasknet")));
        let mut tr = TransformerTrainer::new(&c, mode, Some(t), stage_seed(cfg.seed, "bench"))?;
        let mut times = Vec::new();
        let mut last = None;
        for i in 0..cfg.bench_warmup + cfg.bench_iters {
            let s = tr.step(&xs_img, Some(&ys), &xt_img)?;
            if i >= cfg.bench_warmup {
                times.push(s.wall_clock_seconds);
            }
            last = Some(s);
        }
        let last = last.ok_or_else(|| Error::Config("benchmark needs at least one iteration".into()))?;
        rows.push(BenchRow {
            mode,
            generator_forwards: last.generator_forwards,
            discriminator_forwards: last.discriminator_forwards,
            tasknet_forwards: last.tasknet_forwards,
            median_seconds: median(&times),
            speedup: None,
        });
    }
    if let Some(cycle) = rows.iter().find(|r| r.mode == TransformerMode::Cycle).map(|r| r.median_seconds) {
        for r in &mut rows {
            r.speedup = Some(cycle / r.median_seconds);
        }
    }
    let mut log = CsvLog::create(
        &cfg.run_dir().join("benchmark.csv"),
        &[
            "mode",
            "generator_forwards",
            "discriminator_forwards",
            "tasknet_forwards",
            "median_seconds",
            "speedup",
        ],
    )?;
    for r in &rows {
        log.row([
            r.mode.to_string(),
            r.generator_forwards.to_string(),
            r.discriminator_forwards.to_string(),
            r.tasknet_forwards.to_string(),
            fmt(r.median_seconds),
            r.speedup.map(|s| format!("{s:.2}")).unwrap_or_default(),
        ])?;
    }
    Ok(rows)
}

/// Reads the headline mAP from a report written by [`evaluate`].
pub fn read_map(path: &Path) -> Result<Option<f64>> {
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let line = text
        .lines()
        .find(|l| l.starts_with("mAP,"))
        .ok_or_else(|| Error::Parse {
            context: path.display().to_string(),
            detail: "no mAP row".into(),
        })?;
    let v = line.split(',').nth(1).unwrap_or("");
    v.parse().map(Some).map_err(|e| Error::Parse {
        context: path.display().to_string(),
        detail: format!("bad mAP {v:?}: {e}"),
    })
}

/// Headline numbers gathered from a run directory.
#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub source_only: Option<f64>,
    pub adapted: Option<f64>,
    pub oracle: Option<f64>,
    pub gap_recovered: Option<f64>,
    /// (loss-set tag, mAP) for the configured mode.
    pub ablation: Vec<(String, Option<f64>)>,
}

/// `(adapted − source-only) / (oracle − source-only)` in percent.
pub fn gap_recovered(source_only: f64, adapted: f64, oracle: f64) -> Option<f64> {
    let gap = oracle - source_only;
    (gap.abs() > 1e-12).then(|| 100.0 * (adapted - source_only) / gap)
}

pub fn ablation_sets() -> Vec<LossSet> {
    vec![
        LossSet::new([DetectorLoss::Pseudo]).unwrap(),
        LossSet::new([DetectorLoss::Pair]).unwrap(),
        LossSet::new([DetectorLoss::Pseudo, DetectorLoss::Pair]).unwrap(),
    ]
}

fn opt(x: Option<f64>) -> String {
    x.map(fmt).unwrap_or_default()
}

/// Writes `table2.csv`, `table3.csv` and `ablation.csv` from whatever the
/// run directory holds; missing entries are left blank.
pub fn report(cfg: &ExperimentConfig) -> Result<Summary> {
    let layout = RunLayout::new(cfg);
    let te = Split::TargetEval.dir_name();
    let source_only = read_map(&layout.eval_csv(&layout.source_detector(), te))?;
    let oracle = read_map(&layout.eval_csv(&layout.oracle_detector(), te))?;
    let mode_map = |mode: TransformerMode, losses: &LossSet| {
        read_map(&layout.eval_csv(&layout.target_detector(mode, losses), te))
    };
    let adapted = mode_map(cfg.mode, &cfg.losses)?;
    let gap = match (source_only, adapted, oracle) {
        (Some(s), Some(a), Some(o)) => gap_recovered(s, a, o),
        _ => None,
    };
    let mut t2 = String::from("row,map,gap_recovered\n");
    let _ = writeln!(t2, "source-only,{},", opt(source_only));
    let _ = writeln!(t2, "adapted,{},{}", opt(adapted), opt(gap));
    let _ = writeln!(t2, "oracle,{},", opt(oracle));
    write_text(&layout.root.join("table2.csv"), &t2)?;

    let bench = read_bench(&layout.root.join("benchmark.csv"))?;
    let mut t3 = String::from("mode,map,seconds_per_iteration,speedup\n");
    for mode in TransformerMode::ALL {
        let b = bench.iter().find(|(m, _, _)| *m == mode.name());
        let _ = writeln!(
            t3,
            "{},{},{},{}",
            mode,
            opt(mode_map(mode, &cfg.losses)?),
            b.map(|(_, s, _)| s.clone()).unwrap_or_default(),
            b.map(|(_, _, x)| x.clone()).unwrap_or_default()
        );
    }
    write_text(&layout.root.join("table3.csv"), &t3)?;

    let mut ab = String::from("losses,map\n");
    let mut ablation = Vec::new();
    for set in ablation_sets() {
        let m = mode_map(cfg.mode, &set)?;
        let _ = writeln!(ab, "{},{}", set.tag(), opt(m));
        ablation.push((set.tag(), m));
    }
    write_text(&layout.root.join("ablation.csv"), &ab)?;
    Ok(Summary {
        source_only,
        adapted,
        oracle,
        gap_recovered: gap,
        ablation,
    })
}

/// (mode, median seconds, speedup) rows of `benchmark.csv`.
fn read_bench(path: &Path) -> Result<Vec<(String, String, String)>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .skip(1)
        .filter_map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f.len() == 6).then(|| (f[0].to_string(), f[4].to_string(), f[5].to_string()))
        })
        .collect())
}

/// Which parts of the experiment grid [`run_experiment`] executes.
#[derive(Clone, Debug)]
pub struct GridPlan {
    /// Transformer modes trained end to end. Each gets adapted images and a
    /// target detector with the configured loss set.
    pub modes: Vec<TransformerMode>,
    /// Run all three loss sets for the configured mode.
    pub ablation: bool,
    /// Modes timed by the benchmark; empty skips it.
    pub bench_modes: Vec<TransformerMode>,
}

/// The full procedure for one seed: data, f_s, oracle, task net,
/// transformer(s), pseudo-labels, adaptation, f_t, evaluation, benchmark
/// and report.
pub fn run_experiment(cfg: &ExperimentConfig, plan: &GridPlan) -> Result<Summary> {
    cfg.validate()?;
    let started = Instant::now();
    gen_data(cfg)?;
    let layout = RunLayout::new(cfg);
    train_source(cfg)?;
    evaluate(cfg, &layout.source_detector(), Split::TargetEval)?;
    train_oracle(cfg)?;
    evaluate(cfg, &layout.oracle_detector(), Split::TargetEval)?;
    pseudo_label(cfg, cfg.confidence_threshold)?;
    if plan.modes.iter().any(|m| m.needs_segmaps()) || cfg.cycle_semantic_alignment {
        train_tasknet_stage(cfg)?;
    }
    for &mode in &plan.modes {
        train_transformer(cfg, mode)?;
        adapt(cfg, mode)?;
        let sets = if plan.ablation && mode == cfg.mode {
            ablation_sets()
        } else {
            vec![cfg.losses.clone()]
        };
        for set in &sets {
            train_target(cfg, mode, set)?;
        }
    }
    if !plan.bench_modes.is_empty() {
        benchmark(cfg, &plan.bench_modes)?;
    }
    let summary = report(cfg)?;
    write_text(
        &layout.root.join("elapsed_seconds.txt"),
        &format!("{:.1}\n", started.elapsed().as_secs_f64()),
    )?;
    Ok(summary)
}
