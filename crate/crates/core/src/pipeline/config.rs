use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::synthdata::{DataConfig, Split};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TransformerMode {
    Lite,
    Big,
    Cycle,
}

impl TransformerMode {
    pub const ALL: [TransformerMode; 3] = [TransformerMode::Cycle, TransformerMode::Big, TransformerMode::Lite];

    pub fn name(self) -> &'static str {
        match self {
            TransformerMode::Lite => "lite",
            TransformerMode::Big => "big",
            TransformerMode::Cycle => "cycle",
        }
    }

    pub fn channel_multiplier(self) -> usize {
        match self {
            TransformerMode::Big => 8,
            _ => 1,
        }
    }

    pub fn needs_segmaps(self) -> bool {
        self != TransformerMode::Cycle
    }
}

impl FromStr for TransformerMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "lite" => Ok(TransformerMode::Lite),
            "big" => Ok(TransformerMode::Big),
            "cycle" => Ok(TransformerMode::Cycle),
            other => Err(Error::Config(format!("unknown transformer mode {other:?}"))),
        }
    }
}

impl fmt::Display for TransformerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DetectorLoss {
    Pseudo,
    Pair,
}

/// Non-empty set of target-detector losses.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LossSet(BTreeSet<DetectorLoss>);

impl LossSet {
    pub fn new(losses: impl IntoIterator<Item = DetectorLoss>) -> Result<Self> {
        let set: BTreeSet<_> = losses.into_iter().collect();
        if set.is_empty() {
            return Err(Error::Config("at least one target-detector loss is required".into()));
        }
        Ok(LossSet(set))
    }

    pub fn contains(&self, l: DetectorLoss) -> bool {
        self.0.contains(&l)
    }

    /// `pseudo`, `pair` or `pseudo+pair`; used in file names.
    pub fn tag(&self) -> String {
        self.0
            .iter()
            .map(|l| match l {
                DetectorLoss::Pseudo => "pseudo",
                DetectorLoss::Pair => "pair",
            })
            .collect::<Vec<_>>()
            .join("+")
    }
}

impl FromStr for LossSet {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let mut v = Vec::new();
        for part in s.split([',', '+']).map(str::trim).filter(|p| !p.is_empty()) {
            v.push(match part {
                "pseudo" => DetectorLoss::Pseudo,
                "pair" => DetectorLoss::Pair,
                other => return Err(Error::Config(format!("unknown detector loss {other:?}"))),
            });
        }
        LossSet::new(v)
    }
}

impl fmt::Display for LossSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.tag())
    }
}

/// Everything that determines a run.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub image_size: usize,
    pub n_source_det: usize,
    pub n_source_seg: usize,
    pub n_target_train: usize,
    pub n_target_eval: usize,
    /// Size of the in-memory source-style evaluation set.
    pub n_source_eval: usize,
    pub mode: TransformerMode,
    pub losses: LossSet,
    pub weights: LossWeights,
    pub cycle_semantic_alignment: bool,
    pub batch_size: usize,
    pub detector_iters: usize,
    pub transformer_iters: usize,
    pub tasknet_iters: usize,
    pub detector_lr: f32,
    pub generator_lr: f32,
    pub discriminator_lr: f32,
    pub tasknet_lr: f32,
    pub adam_beta1: f32,
    pub adam_beta2: f32,
    /// Pseudo-label acceptance, inclusive.
    pub confidence_threshold: f64,
    pub nms_iou: f64,
    /// Detections below this score are dropped before computing AP.
    pub eval_score_threshold: f64,
    pub checkpoint_every: usize,
    pub bench_iters: usize,
    pub bench_warmup: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
            seed: 0,
            image_size: 64,
            n_source_det: 2000,
            n_source_seg: 2000,
            n_target_train: 1000,
            n_target_eval: 300,
            n_source_eval: 300,
            mode: TransformerMode::Lite,
            losses: LossSet::new([DetectorLoss::Pseudo]).unwrap(),
            weights: LossWeights::default(),
            cycle_semantic_alignment: false,
            batch_size: 8,
            detector_iters: 2000,
            transformer_iters: 1000,
            tasknet_iters: 1000,
            detector_lr: 1e-3,
            generator_lr: 2e-4,
            discriminator_lr: 2e-4,
            tasknet_lr: 1e-3,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            confidence_threshold: 0.5,
            nms_iou: 0.5,
            eval_score_threshold: 0.01,
            checkpoint_every: 500,
            bench_iters: 50,
            bench_warmup: 5,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    v.trim()
        .parse()
        .map_err(|e| Error::Config(format!("{key} = {v:?}: {e}")))
}

impl ExperimentConfig {
    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let k = key.trim();
        let v = value.trim();
        match k {
            "data_dir" => self.data_dir = PathBuf::from(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "seed" => self.seed = parse(k, v)?,
            "image_size" => self.image_size = parse(k, v)?,
            "n_source_det" => self.n_source_det = parse(k, v)?,
            "n_source_seg" => self.n_source_seg = parse(k, v)?,
            "n_target_train" => self.n_target_train = parse(k, v)?,
            "n_target_eval" => self.n_target_eval = parse(k, v)?,
            "n_source_eval" => self.n_source_eval = parse(k, v)?,
            "mode" => self.mode = parse(k, v)?,
            "losses" => self.losses = parse(k, v)?,
            "lambda_gan" => self.weights.gan = parse(k, v)?,
            "lambda_cycle" => self.weights.cycle = parse(k, v)?,
            "lambda_sa" => self.weights.sa = parse(k, v)?,
            "lambda_label" => self.weights.label = parse(k, v)?,
            "lambda_pseudo" => self.weights.pseudo = parse(k, v)?,
            "lambda_pair" => self.weights.pair = parse(k, v)?,
            "lambda_unsup" => self.weights.unsup = parse(k, v)?,
            "cycle_semantic_alignment" => self.cycle_semantic_alignment = parse(k, v)?,
            "batch_size" => self.batch_size = parse(k, v)?,
            "detector_iters" => self.detector_iters = parse(k, v)?,
            "transformer_iters" => self.transformer_iters = parse(k, v)?,
            "tasknet_iters" => self.tasknet_iters = parse(k, v)?,
            "detector_lr" => self.detector_lr = parse(k, v)?,
            "generator_lr" => self.generator_lr = parse(k, v)?,
            "discriminator_lr" => self.discriminator_lr = parse(k, v)?,
            "tasknet_lr" => self.tasknet_lr = parse(k, v)?,
            "adam_beta1" => self.adam_beta1 = parse(k, v)?,
            "adam_beta2" => self.adam_beta2 = parse(k, v)?,
            "confidence_threshold" => self.confidence_threshold = parse(k, v)?,
            "nms_iou" => self.nms_iou = parse(k, v)?,
            "eval_score_threshold" => self.eval_score_threshold = parse(k, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(k, v)?,
            "bench_iters" => self.bench_iters = parse(k, v)?,
            "bench_warmup" => self.bench_warmup = parse(k, v)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Parses a flat `key = value` file; `#` starts a comment.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_text(&text)
    }

    pub fn to_text(&self) -> String {
        let w = &self.weights;
        let rows: Vec<(&str, String)> = vec![
            ("data_dir", self.data_dir.display().to_string()),
            ("out_dir", self.out_dir.display().to_string()),
            ("seed", self.seed.to_string()),
            ("image_size", self.image_size.to_string()),
            ("n_source_det", self.n_source_det.to_string()),
            ("n_source_seg", self.n_source_seg.to_string()),
            ("n_target_train", self.n_target_train.to_string()),
            ("n_target_eval", self.n_target_eval.to_string()),
            ("n_source_eval", self.n_source_eval.to_string()),
            ("mode", self.mode.to_string()),
            ("losses", self.losses.tag().replace('+', ",")),
            ("lambda_gan", w.gan.to_string()),
            ("lambda_cycle", w.cycle.to_string()),
            ("lambda_sa", w.sa.to_string()),
            ("lambda_label", w.label.to_string()),
            ("lambda_pseudo", w.pseudo.to_string()),
            ("lambda_pair", w.pair.to_string()),
            ("lambda_unsup", w.unsup.to_string()),
            ("cycle_semantic_alignment", self.cycle_semantic_alignment.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("detector_iters", self.detector_iters.to_string()),
            ("transformer_iters", self.transformer_iters.to_string()),
            ("tasknet_iters", self.tasknet_iters.to_string()),
            ("detector_lr", self.detector_lr.to_string()),
            ("generator_lr", self.generator_lr.to_string()),
            ("discriminator_lr", self.discriminator_lr.to_string()),
            ("tasknet_lr", self.tasknet_lr.to_string()),
            ("adam_beta1", self.adam_beta1.to_string()),
            ("adam_beta2", self.adam_beta2.to_string()),
            ("confidence_threshold", self.confidence_threshold.to_string()),
            ("nms_iou", self.nms_iou.to_string()),
            ("eval_score_threshold", self.eval_score_threshold.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("bench_iters", self.bench_iters.to_string()),
            ("bench_warmup", self.bench_warmup.to_string()),
        ];
        rows.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        // A pseudo-label threshold above 1 is allowed and simply keeps nothing.
        if self.confidence_threshold.is_nan() || self.confidence_threshold < 0.0 {
            return Err(Error::Config(format!(
                "confidence_threshold must be non-negative, got {}",
                self.confidence_threshold
            )));
        }
        for (k, v) in [("nms_iou", self.nms_iou), ("eval_score_threshold", self.eval_score_threshold)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{k} must lie in [0, 1], got {v}")));
            }
        }
        self.data_config().validate()
    }

    pub fn data_config(&self) -> DataConfig {
        let mut d = DataConfig::new(self.seed);
        d.scene.size = self.image_size;
        for (s, n) in [
            (Split::SourceDet, self.n_source_det),
            (Split::SourceSeg, self.n_source_seg),
            (Split::TargetTrain, self.n_target_train),
            (Split::TargetEval, self.n_target_eval),
        ] {
            d.counts.insert(s, n);
        }
        d
    }

    /// Directory holding the outputs of this seed.
    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(format!("seed{}", self.seed))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = ExperimentConfig::default();
        cfg.set("mode", "cycle").unwrap();
        cfg.set("losses", "pseudo,pair").unwrap();
        cfg.set("lambda_pair", "0.25").unwrap();
        let back = ExperimentConfig::parse_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn comments_and_errors() {
        let cfg = ExperimentConfig::parse_text("# hi\nseed = 3  # trailing\n\n").unwrap();
        assert_eq!(cfg.seed, 3);
        assert!(ExperimentConfig::parse_text("bogus = 1").is_err());
        assert!(ExperimentConfig::parse_text("seed 3").is_err());
        assert!(ExperimentConfig::parse_text("mode = huge").is_err());
    }

    #[test]
    fn empty_loss_set_rejected() {
        assert!(matches!("".parse::<LossSet>(), Err(Error::Config(_))));
        assert_eq!("pair,pseudo".parse::<LossSet>().unwrap().tag(), "pseudo+pair");
    }
}
