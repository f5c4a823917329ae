//! Procedural paired domains: flat-shaded "source" scenes and a "target"
//! rendering of the same geometry with shifted colours, blur, vignette and
//! sensor noise.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::ops::Range;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde_json::{json, Value};

use crate::autodiff::Tensor;
use crate::deteval::{BBox, LabeledBox};
use crate::error::{Error, Result};
use crate::models::{SEG_BACKGROUND, SEG_CAR, SEG_DISTRACTOR};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Style {
    Source,
    Target,
}

impl Style {
    pub fn name(self) -> &'static str {
        match self {
            Style::Source => "source",
            Style::Target => "target",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObjectKind {
    Car,
    Distractor,
}

/// Integer pixel rectangle `[x, x+w) × [y, y+h)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    pub fn to_bbox(self) -> BBox {
        BBox::new(self.x as f64, self.y as f64, (self.x + self.w) as f64, (self.y + self.h) as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneObject {
    pub kind: ObjectKind,
    pub rect: Rect,
    /// Index into the style's palette for this kind.
    pub palette: usize,
    /// Brightness jitter in [−1, 1], applied identically in both styles.
    pub shade: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    /// Back to front.
    pub objects: Vec<SceneObject>,
    pub background_shade: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub size: usize,
    pub max_objects: usize,
    /// Target scenes place cars in the lower half only.
    pub layout_shift: bool,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            size: 64,
            max_objects: 6,
            layout_shift: false,
        }
    }
}

const CAR_PALETTES: usize = 3;
const DISTRACTOR_PALETTES: usize = 3;
const MAX_PLACEMENT_TRIES: usize = 50;

fn rects_overlap(a: &Rect, b: &Rect) -> bool {
    a.x < b.x + b.w && b.x < a.x + a.w && a.y < b.y + b.h && b.y < a.y + a.h
}

/// Deterministic scene for `seed`. The first object is always a car; cars
/// never overlap each other and are drawn after every distractor.
pub fn gen_scene(seed: u64, cfg: &SceneConfig) -> Scene {
    gen_scene_styled(seed, cfg, Style::Source)
}

fn gen_scene_styled(seed: u64, cfg: &SceneConfig, style: Style) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = cfg.size;
    let n = rng.random_range(1..=cfg.max_objects.max(1));
    let mut cars: Vec<SceneObject> = Vec::new();
    let mut distractors: Vec<SceneObject> = Vec::new();
    for i in 0..n {
        let kind = if i == 0 || rng.random_bool(0.6) {
            ObjectKind::Car
        } else {
            ObjectKind::Distractor
        };
        let palette = rng.random_range(0..match kind {
            ObjectKind::Car => CAR_PALETTES,
            ObjectKind::Distractor => DISTRACTOR_PALETTES,
        });
        let shade = rng.random_range(-1.0f32..=1.0);
        match kind {
            ObjectKind::Car => {
                let lo_y = if cfg.layout_shift && style == Style::Target { s / 2 } else { 0 };
                for _ in 0..MAX_PLACEMENT_TRIES {
                    let w = rng.random_range(s * 10 / 64..=s * 22 / 64);
                    let lo_h = (w / 2).max(5);
                    let h = rng.random_range(lo_h..=(w * 3 / 4).max(lo_h));
                    if h > s - lo_y {
                        continue;
                    }
                    let x = rng.random_range(0..=s - w);
                    let y = rng.random_range(lo_y..=s - h);
                    let rect = Rect { x, y, w, h };
                    if cars.iter().all(|c| !rects_overlap(&c.rect, &rect)) {
                        cars.push(SceneObject {
                            kind,
                            rect,
                            palette,
                            shade,
                        });
                        break;
                    }
                }
            }
            ObjectKind::Distractor => {
                let w = rng.random_range(s * 6 / 64..=s * 18 / 64);
                let h = rng.random_range(s * 6 / 64..=s * 18 / 64);
                let x = rng.random_range(0..=s - w);
                let y = rng.random_range(0..=s - h);
                distractors.push(SceneObject {
                    kind,
                    rect: Rect { x, y, w, h },
                    palette,
                    shade,
                });
            }
        }
    }
    let background_shade = rng.random_range(-1.0f32..=1.0);
    distractors.extend(cars);
    Scene {
        seed,
        height: s,
        width: s,
        objects: distractors,
        background_shade,
    }
}

type Rgb = [f32; 3];

struct Palette {
    background: Rgb,
    cars: [Rgb; CAR_PALETTES],
    window: Rgb,
    wheel: Rgb,
    distractors: [Rgb; DISTRACTOR_PALETTES],
}

// Flat colours in [0, 1]. The target palette is the source palette with the
// channels rotated (r, g, b) → (b, r, g) and darkened, so target distractors
// take on source car colours and vice versa.
const SOURCE: Palette = Palette {
    background: [0.62, 0.62, 0.60],
    cars: [[0.88, 0.14, 0.12], [0.90, 0.78, 0.12], [0.92, 0.45, 0.10]],
    window: [0.78, 0.90, 0.98],
    wheel: [0.08, 0.08, 0.08],
    distractors: [[0.14, 0.12, 0.88], [0.12, 0.90, 0.78], [0.10, 0.92, 0.45]],
};

fn target_colour(c: Rgb) -> Rgb {
    let rot = [c[2], c[0], c[1]];
    rot.map(|v| 0.1 + 0.75 * v)
}

const TARGET_NOISE_SIGMA: f32 = 0.1;
const VIGNETTE_STRENGTH: f32 = 0.35;

#[derive(Clone, Debug, PartialEq)]
pub struct StyledImage {
    pub seed: u64,
    pub style: Style,
    /// `3×H×W` in [−1, 1].
    pub pixels: Tensor,
    pub boxes: Vec<LabeledBox>,
    /// Per-pixel class ids, row-major.
    pub segmap: Vec<u8>,
}

fn in_ellipse(r: &Rect, px: usize, py: usize) -> bool {
    let cx = r.x as f32 + r.w as f32 / 2.0;
    let cy = r.y as f32 + r.h as f32 / 2.0;
    let dx = (px as f32 + 0.5 - cx) / (r.w as f32 / 2.0);
    let dy = (py as f32 + 0.5 - cy) / (r.h as f32 / 2.0);
    dx * dx + dy * dy <= 1.0
}

/// Car parts at a pixel: 1 body, 2 window, 3 wheel.
fn car_part(r: &Rect, px: usize, py: usize) -> Option<u8> {
    if px < r.x || px >= r.x + r.w || py < r.y || py >= r.y + r.h {
        return None;
    }
    let wheel_r = (r.h as f32 / 4.0).max(1.5);
    let body_bottom = r.y as f32 + r.h as f32 - wheel_r;
    let (fx, fy) = (px as f32 + 0.5, py as f32 + 0.5);
    for wx in [r.x as f32 + r.w as f32 * 0.25, r.x as f32 + r.w as f32 * 0.75] {
        let (dx, dy) = (fx - wx, fy - body_bottom);
        if dx * dx + dy * dy <= wheel_r * wheel_r {
            return Some(3);
        }
    }
    if fy < body_bottom {
        let lx = r.x as f32 + r.w as f32 * 0.3;
        let rx = r.x as f32 + r.w as f32 * 0.7;
        let ty = r.y as f32 + 1.0;
        let by = r.y as f32 + (body_bottom - r.y as f32) * 0.45;
        if fx >= lx && fx < rx && fy >= ty && fy < by {
            return Some(2);
        }
        return Some(1);
    }
    None
}

fn shaded(c: Rgb, shade: f32) -> Rgb {
    c.map(|v| (v + 0.06 * shade).clamp(0.0, 1.0))
}

/// Renders a scene. Geometry, boxes and segmap are identical across styles.
pub fn render(scene: &Scene, style: Style) -> StyledImage {
    let (h, w) = (scene.height, scene.width);
    let colour = |c: Rgb| match style {
        Style::Source => c,
        Style::Target => target_colour(c),
    };
    let bg = colour(shaded(SOURCE.background, scene.background_shade));
    let mut img = vec![bg; h * w];
    let mut seg = vec![SEG_BACKGROUND as u8; h * w];
    let mut car_bounds: Vec<Option<(usize, usize, usize, usize)>> = Vec::new();
    for obj in &scene.objects {
        let mut bounds: Option<(usize, usize, usize, usize)> = None;
        let r = obj.rect;
        for py in r.y..r.y + r.h {
            for px in r.x..r.x + r.w {
                let i = py * w + px;
                match obj.kind {
                    ObjectKind::Distractor => {
                        if in_ellipse(&r, px, py) {
                            img[i] = colour(shaded(SOURCE.distractors[obj.palette], obj.shade));
                            seg[i] = SEG_DISTRACTOR as u8;
                        }
                    }
                    ObjectKind::Car => {
                        if let Some(part) = car_part(&r, px, py) {
                            let c = match part {
                                1 => shaded(SOURCE.cars[obj.palette], obj.shade),
                                2 => SOURCE.window,
                                _ => SOURCE.wheel,
                            };
                            img[i] = colour(c);
                            seg[i] = SEG_CAR as u8;
                            bounds = Some(match bounds {
                                None => (px, py, px + 1, py + 1),
                                Some((a, b, c, d)) => (a.min(px), b.min(py), c.max(px + 1), d.max(py + 1)),
                            });
                        }
                    }
                }
            }
        }
        if obj.kind == ObjectKind::Car {
            car_bounds.push(bounds);
        }
    }
    let boxes = car_bounds
        .into_iter()
        .flatten()
        .map(|(x1, y1, x2, y2)| LabeledBox {
            class: 0,
            bbox: BBox::new(x1 as f64, y1 as f64, x2 as f64, y2 as f64),
        })
        .collect();

    if style == Style::Target {
        img = blur3(&img, h, w);
        let mut rng = ChaCha8Rng::seed_from_u64(scene.seed ^ 0x5eed_7a12_6e7d_0001);
        let noise = Normal::new(0.0f32, TARGET_NOISE_SIGMA).unwrap();
        let (cy, cx) = (h as f32 / 2.0, w as f32 / 2.0);
        let rmax2 = cy * cy + cx * cx;
        for py in 0..h {
            for px in 0..w {
                let (dy, dx) = (py as f32 + 0.5 - cy, px as f32 + 0.5 - cx);
                let v = 1.0 - VIGNETTE_STRENGTH * (dx * dx + dy * dy) / rmax2;
                let p = &mut img[py * w + px];
                for c in p.iter_mut() {
                    *c *= v;
                }
            }
        }
        // Noise is added in the [−1, 1] range below, in channel-major order.
        let mut data = to_signed(&img, h, w);
        for v in data.iter_mut() {
            *v = (*v + noise.sample(&mut rng)).clamp(-1.0, 1.0);
        }
        return StyledImage {
            seed: scene.seed,
            style,
            pixels: Tensor::new([3, h, w], data).unwrap(),
            boxes,
            segmap: seg,
        };
    }
    StyledImage {
        seed: scene.seed,
        style,
        pixels: Tensor::new([3, h, w], to_signed(&img, h, w)).unwrap(),
        boxes,
        segmap: seg,
    }
}

fn to_signed(img: &[Rgb], h: usize, w: usize) -> Vec<f32> {
    let mut out = vec![0.0; 3 * h * w];
    for (i, p) in img.iter().enumerate() {
        for c in 0..3 {
            out[c * h * w + i] = p[c] * 2.0 - 1.0;
        }
    }
    out
}

/// Separable [1, 2, 1]/4 blur with edge clamping.
fn blur3(img: &[Rgb], h: usize, w: usize) -> Vec<Rgb> {
    let k = [0.25f32, 0.5, 0.25];
    let mut tmp = vec![[0.0; 3]; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f32; 3];
            for (j, kw) in k.iter().enumerate() {
                let xx = (x as isize + j as isize - 1).clamp(0, w as isize - 1) as usize;
                for c in 0..3 {
                    acc[c] += kw * img[y * w + xx][c];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![[0.0; 3]; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f32; 3];
            for (j, kw) in k.iter().enumerate() {
                let yy = (y as isize + j as isize - 1).clamp(0, h as isize - 1) as usize;
                for c in 0..3 {
                    acc[c] += kw * tmp[yy * w + x][c];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

pub fn render_seed(seed: u64, cfg: &SceneConfig, style: Style) -> StyledImage {
    render(&gen_scene_styled(seed, cfg, style), style)
}

// ----- image and label files ---------------------------------------------

fn quantize(v: f32) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 0.5 * 255.0).round()) as u8
}

/// Writes a `3×H×W` tensor in [−1, 1] as 8-bit RGB.
pub fn save_png(path: &Path, pixels: &Tensor) -> Result<()> {
    let s = pixels.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let d = pixels.data();
    let mut raw = vec![0u8; 3 * h * w];
    for i in 0..h * w {
        for c in 0..3 {
            raw[i * 3 + c] = quantize(d[c * h * w + i]);
        }
    }
    let img = RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer sized for image");
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

pub fn load_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.into_raw();
    let mut data = vec![0.0f32; 3 * h * w];
    for i in 0..h * w {
        for c in 0..3 {
            data[c * h * w + i] = raw[i * 3 + c] as f32 / 255.0 * 2.0 - 1.0;
        }
    }
    Tensor::new([3, h, w], data)
}

pub fn save_segmap(path: &Path, seg: &[u8], h: usize, w: usize) -> Result<()> {
    let img = GrayImage::from_raw(w as u32, h as u32, seg.to_vec()).expect("buffer sized for image");
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

pub fn load_segmap(path: &Path) -> Result<Vec<u8>> {
    Ok(image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma8()
        .into_raw())
}

/// `image_id class x1 y1 x2 y2` per line.
pub fn format_boxes(image_id: u64, boxes: &[LabeledBox]) -> String {
    let mut s = String::new();
    for b in boxes {
        s.push_str(&format!(
            "{} {} {:.6} {:.6} {:.6} {:.6}\n",
            image_id, b.class, b.bbox.x1, b.bbox.y1, b.bbox.x2, b.bbox.y2
        ));
    }
    s
}

/// Parses box lines; a 7th confidence column, if present, is ignored.
pub fn parse_boxes(text: &str) -> Result<Vec<LabeledBox>> {
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 6 && f.len() != 7 {
            return Err(Error::Parse {
                context: "box line".into(),
                detail: format!("expected 6 or 7 fields: {line:?}"),
            });
        }
        let bad = |e: &dyn std::fmt::Display| Error::Parse {
            context: "box line".into(),
            detail: format!("{e}: {line:?}"),
        };
        let num = |s: &str| s.parse::<f64>().map_err(|e| bad(&e));
        let bbox = BBox::new(num(f[2])?, num(f[3])?, num(f[4])?, num(f[5])?);
        if !bbox.is_well_formed() {
            return Err(bad(&"malformed box"));
        }
        out.push(LabeledBox {
            class: f[1].parse().map_err(|e| bad(&e))?,
            bbox,
        });
    }
    Ok(out)
}

// ----- splits --------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    SourceDet,
    SourceSeg,
    TargetTrain,
    TargetEval,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::SourceDet, Split::SourceSeg, Split::TargetTrain, Split::TargetEval];

    pub fn dir_name(self) -> &'static str {
        match self {
            Split::SourceDet => "source-det",
            Split::SourceSeg => "source-seg",
            Split::TargetTrain => "target-train",
            Split::TargetEval => "target-eval",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.dir_name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown split {s:?}")))
    }

    pub fn style(self) -> Style {
        match self {
            Split::SourceDet | Split::SourceSeg => Style::Source,
            Split::TargetTrain | Split::TargetEval => Style::Target,
        }
    }

    pub fn writes_boxes(self) -> bool {
        matches!(self, Split::SourceDet | Split::TargetEval)
    }

    pub fn writes_segmaps(self) -> bool {
        self == Split::SourceSeg
    }

    fn index(self) -> u64 {
        self as u64
    }
}

/// Seeds per split are `seed·SEED_STRIDE + split·SPLIT_STRIDE + i`.
pub const SEED_STRIDE: u64 = 10_000_000;
pub const SPLIT_STRIDE: u64 = 1_000_000;
/// Offset of the in-memory source-style evaluation set within a seed block.
pub const SOURCE_EVAL_OFFSET: u64 = 4 * SPLIT_STRIDE;

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub seed: u64,
    pub counts: BTreeMap<Split, usize>,
    /// Explicit first seeds; defaults derive from `seed`.
    pub first_seeds: BTreeMap<Split, u64>,
    pub scene: SceneConfig,
}

impl DataConfig {
    pub fn new(seed: u64) -> Self {
        let counts = [
            (Split::SourceDet, 2000),
            (Split::SourceSeg, 2000),
            (Split::TargetTrain, 1000),
            (Split::TargetEval, 300),
        ]
        .into_iter()
        .collect();
        DataConfig {
            seed,
            counts,
            first_seeds: BTreeMap::new(),
            scene: SceneConfig::default(),
        }
    }

    pub fn count(&self, split: Split) -> usize {
        self.counts.get(&split).copied().unwrap_or(0)
    }

    pub fn seed_range(&self, split: Split) -> Range<u64> {
        let first = self
            .first_seeds
            .get(&split)
            .copied()
            .unwrap_or(self.seed * SEED_STRIDE + split.index() * SPLIT_STRIDE);
        first..first + self.count(split) as u64
    }

    /// Seeds of a source-style evaluation set disjoint from every split.
    pub fn source_eval_range(&self, count: usize) -> Range<u64> {
        let first = self.seed * SEED_STRIDE + SOURCE_EVAL_OFFSET;
        first..first + count as u64
    }

    pub fn validate(&self) -> Result<()> {
        if !self.scene.size.is_multiple_of(8) || self.scene.size < 32 {
            return Err(Error::Config(format!(
                "image size must be a multiple of 8 and at least 32, got {}",
                self.scene.size
            )));
        }
        for (i, a) in Split::ALL.iter().enumerate() {
            let ra = self.seed_range(*a);
            if ra.end - ra.start > SPLIT_STRIDE && !self.first_seeds.contains_key(a) {
                return Err(Error::Config(format!(
                    "{} has more than {SPLIT_STRIDE} images",
                    a.dir_name()
                )));
            }
            for b in &Split::ALL[i + 1..] {
                let rb = self.seed_range(*b);
                if ra.start < rb.end && rb.start < ra.end {
                    return Err(Error::Config(format!(
                        "seed ranges of {} {:?} and {} {:?} overlap",
                        a.dir_name(),
                        ra,
                        b.dir_name(),
                        rb
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Value {
        let splits: Vec<Value> = Split::ALL
            .iter()
            .map(|&s| {
                let r = self.seed_range(s);
                json!({
                    "name": s.dir_name(),
                    "style": s.style().name(),
                    "first_seed": r.start,
                    "count": self.count(s),
                    "boxes": s.writes_boxes(),
                    "segmaps": s.writes_segmaps(),
                })
            })
            .collect();
        json!({
            "seed": self.seed,
            "image_size": self.scene.size,
            "max_objects": self.scene.max_objects,
            "layout_shift": self.scene.layout_shift,
            "splits": splits,
        })
    }
}

/// Writes all four split directories plus `manifest.json` under `root`.
pub fn make_splits(cfg: &DataConfig, root: &Path) -> Result<()> {
    cfg.validate()?;
    for split in Split::ALL {
        let dir = root.join(split.dir_name());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for seed in cfg.seed_range(split) {
            let img = render_seed(seed, &cfg.scene, split.style());
            save_png(&dir.join(format!("{seed}.png")), &img.pixels)?;
            if split.writes_boxes() {
                let p = dir.join(format!("{seed}.boxes"));
                fs::write(&p, format_boxes(seed, &img.boxes)).map_err(|e| Error::io(&p, e))?;
            }
            if split.writes_segmaps() {
                let p = dir.join(format!("{seed}.seg.png"));
                save_segmap(&p, &img.segmap, cfg.scene.size, cfg.scene.size)?;
            }
        }
    }
    let p = root.join("manifest.json");
    let mut f = fs::File::create(&p).map_err(|e| Error::io(&p, e))?;
    let text = serde_json::to_string_pretty(&cfg.to_json()).expect("manifest serializes");
    writeln!(f, "{text}").map_err(|e| Error::io(&p, e))?;
    Ok(())
}

/// Reads `manifest.json` back into a config.
pub fn read_manifest(root: &Path) -> Result<DataConfig> {
    let p = root.join("manifest.json");
    if !p.exists() {
        return Err(Error::MissingDataset(root.to_path_buf()));
    }
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let v: Value = serde_json::from_str(&text).map_err(|e| Error::Parse {
        context: p.display().to_string(),
        detail: e.to_string(),
    })?;
    let bad = |what: &str| Error::Parse {
        context: p.display().to_string(),
        detail: format!("missing or invalid `{what}`"),
    };
    let mut cfg = DataConfig::new(v["seed"].as_u64().ok_or_else(|| bad("seed"))?);
    cfg.scene.size = v["image_size"].as_u64().ok_or_else(|| bad("image_size"))? as usize;
    cfg.scene.max_objects = v["max_objects"].as_u64().ok_or_else(|| bad("max_objects"))? as usize;
    cfg.scene.layout_shift = v["layout_shift"].as_bool().ok_or_else(|| bad("layout_shift"))?;
    for s in v["splits"].as_array().ok_or_else(|| bad("splits"))? {
        let split = Split::parse(s["name"].as_str().ok_or_else(|| bad("splits.name"))?)?;
        cfg.counts.insert(split, s["count"].as_u64().ok_or_else(|| bad("splits.count"))? as usize);
        cfg.first_seeds
            .insert(split, s["first_seed"].as_u64().ok_or_else(|| bad("splits.first_seed"))?);
    }
    Ok(cfg)
}

/// One split loaded into memory, ordered by seed.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub seeds: Vec<u64>,
    pub images: Vec<Tensor>,
    pub boxes: Option<Vec<Vec<LabeledBox>>>,
    pub segmaps: Option<Vec<Vec<u8>>>,
    pub size: usize,
}

impl Dataset {
    /// Loads `<root>/<split>`; box files named `<seed>.<label_ext>` are read
    /// when present for every image.
    pub fn load(dir: &Path, label_ext: &str) -> Result<Dataset> {
        if !dir.is_dir() {
            return Err(Error::MissingDataset(dir.to_path_buf()));
        }
        let mut seeds: Vec<u64> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let name = e.file_name().into_string().ok()?;
                let stem = name.strip_suffix(".png")?;
                stem.parse::<u64>().ok()
            })
            .collect();
        seeds.sort_unstable();
        if seeds.is_empty() {
            return Err(Error::MissingDataset(dir.to_path_buf()));
        }
        let images = seeds
            .iter()
            .map(|s| load_png(&dir.join(format!("{s}.png"))))
            .collect::<Result<Vec<_>>>()?;
        let size = images[0].shape()[1];
        let read_boxes = |ext: &str| -> Result<Option<Vec<Vec<LabeledBox>>>> {
            if !seeds.iter().all(|s| dir.join(format!("{s}.{ext}")).exists()) {
                return Ok(None);
            }
            seeds
                .iter()
                .map(|s| {
                    let p = dir.join(format!("{s}.{ext}"));
                    parse_boxes(&fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?)
                })
                .collect::<Result<Vec<_>>>()
                .map(Some)
        };
        let boxes = read_boxes(label_ext)?;
        let segmaps = if seeds.iter().all(|s| dir.join(format!("{s}.seg.png")).exists()) {
            Some(
                seeds
                    .iter()
                    .map(|s| load_segmap(&dir.join(format!("{s}.seg.png"))))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        Ok(Dataset {
            dir: dir.to_path_buf(),
            seeds,
            images,
            boxes,
            segmaps,
            size,
        })
    }

    /// Renders a split in memory without touching the disk.
    pub fn render(seeds: Range<u64>, cfg: &SceneConfig, style: Style) -> Dataset {
        let mut ds = Dataset {
            dir: PathBuf::new(),
            seeds: Vec::new(),
            images: Vec::new(),
            boxes: Some(Vec::new()),
            segmaps: Some(Vec::new()),
            size: cfg.size,
        };
        for seed in seeds {
            let img = render_seed(seed, cfg, style);
            ds.seeds.push(seed);
            ds.images.push(quantized(&img.pixels));
            ds.boxes.as_mut().unwrap().push(img.boxes);
            ds.segmaps.as_mut().unwrap().push(img.segmap);
        }
        ds
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Stacks the images at `idx` into `N×3×H×W`.
    pub fn batch(&self, idx: &[usize]) -> Tensor {
        let per = self.images[0].numel();
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend_from_slice(self.images[i].data());
        }
        Tensor::new([idx.len(), 3, self.size, self.size], data).unwrap()
    }

    pub fn batch_boxes(&self, idx: &[usize]) -> Option<Vec<Vec<LabeledBox>>> {
        self.boxes.as_ref().map(|b| idx.iter().map(|&i| b[i].clone()).collect())
    }

    /// Flattened per-pixel labels for the images at `idx`.
    pub fn batch_segmaps(&self, idx: &[usize]) -> Option<Vec<usize>> {
        self.segmaps
            .as_ref()
            .map(|s| idx.iter().flat_map(|&i| s[i].iter().map(|&c| c as usize)).collect())
    }
}

/// Round-trips pixels through 8-bit quantization, as stored on disk.
pub fn quantized(t: &Tensor) -> Tensor {
    t.map(|v| quantize(v) as f32 / 255.0 * 2.0 - 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_are_deterministic_and_bounded() {
        let cfg = SceneConfig::default();
        for seed in 0..300 {
            let s = gen_scene(seed, &cfg);
            assert_eq!(s, gen_scene(seed, &cfg));
            assert!((1..=6).contains(&s.objects.len()));
            for o in &s.objects {
                assert!(o.rect.x + o.rect.w <= 64 && o.rect.y + o.rect.h <= 64);
            }
        }
    }

    #[test]
    fn boxes_shared_across_styles() {
        let cfg = SceneConfig::default();
        for seed in 0..50 {
            let s = gen_scene(seed, &cfg);
            let (a, b) = (render(&s, Style::Source), render(&s, Style::Target));
            assert_eq!(a.boxes, b.boxes);
            assert_eq!(a.segmap, b.segmap);
            assert!(!a.boxes.is_empty());
        }
    }

    #[test]
    fn car_boxes_mostly_car_pixels() {
        let cfg = SceneConfig::default();
        for seed in 0..200 {
            let img = render(&gen_scene(seed, &cfg), Style::Source);
            for b in &img.boxes {
                let bb = b.bbox;
                let mut car = 0;
                for y in bb.y1 as usize..bb.y2 as usize {
                    for x in bb.x1 as usize..bb.x2 as usize {
                        car += (img.segmap[y * 64 + x] == SEG_CAR as u8) as usize;
                    }
                }
                assert!(car as f64 >= 0.6 * bb.area(), "seed {seed}: {car} / {}", bb.area());
            }
        }
    }

    #[test]
    fn box_lines_round_trip() {
        let boxes = vec![LabeledBox {
            class: 0,
            bbox: BBox::new(1.0, 2.0, 30.0, 12.0),
        }];
        let text = format_boxes(9, &boxes);
        assert_eq!(text, "9 0 1.000000 2.000000 30.000000 12.000000\n");
        assert_eq!(parse_boxes(&text).unwrap(), boxes);
        assert!(parse_boxes("1 0 5 5 2 2\n").is_err());
    }

    #[test]
    fn overlapping_ranges_rejected() {
        let mut cfg = DataConfig::new(0);
        cfg.first_seeds.insert(Split::TargetEval, 10);
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        assert!(DataConfig::new(3).validate().is_ok());
    }
}
