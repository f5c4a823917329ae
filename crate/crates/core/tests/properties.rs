#![allow(clippy::field_reassign_with_default)]

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use splat::autodiff::{Pool, Tape, Tensor, Var};
use splat::deteval::{average_precision, iou, nms, BBox, GroundTruth, LabeledBox};
use splat::losses::{
    cycle_loss, gan_loss, gan_value, label_preservation_loss, pair_alignment_loss, splat_loss, Critic, GanSide,
    LossWeights, Segmenter,
};
use splat::models::{decode, Detection, Detector, Discriminator, Generator, SEG_CAR};
use splat::nn::{spectral_normalize, SpectralNormState};
use splat::pipeline::{gap_recovered, Batcher, ExperimentConfig};
use splat::synthdata::{gen_scene, render, ObjectKind, SceneConfig, Style};

fn tensor(shape: Vec<usize>) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-1.0f32..1.0, n).prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
}

fn bbox() -> impl Strategy<Value = BBox> {
    (0.0f64..50.0, 0.0f64..50.0, 1.0f64..14.0, 1.0f64..14.0).prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h))
}

fn detections(max: usize) -> impl Strategy<Value = Vec<Detection>> {
    prop::collection::vec((0u64..3, bbox(), 0.01f64..1.0), 0..max).prop_map(|v| {
        v.into_iter()
            .map(|(image_id, bbox, confidence)| Detection {
                image_id,
                class: 0,
                bbox,
                confidence,
            })
            .collect()
    })
}

fn ground_truth(max: usize) -> impl Strategy<Value = Vec<GroundTruth>> {
    prop::collection::vec((0u64..3, bbox()), 0..max)
        .prop_map(|v| v.into_iter().map(|(image_id, bbox)| GroundTruth { image_id, bbox }).collect())
}

struct LinearSeg(Tensor);

impl Segmenter for LinearSeg {
    fn segment(&mut self, t: &Tape, x: Var) -> splat::Result<Var> {
        t.conv2d(x, t.constant(self.0.clone()), 1, 0)
    }
}

struct MeanCritic;

impl Critic for MeanCritic {
    fn criticize(&mut self, t: &Tape, x: Var) -> splat::Result<Var> {
        let n = t.shape(x)[0];
        let flat = t.reshape(x, &[n, t.shape(x)[1..].iter().product()])?;
        let ones = t.constant(Tensor::from_fn([t.shape(flat)[1], 1], |_| 0.1));
        t.matmul(flat, ones)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn shape_product_matches_data(shape in prop::collection::vec(1usize..5, 1..4)) {
        let t = Tensor::zeros(shape.clone());
        prop_assert_eq!(t.numel(), shape.iter().product::<usize>());
        prop_assert_eq!(t.data().len(), t.numel());
        prop_assert!(Tensor::new(shape, vec![0.0; t.numel() + 1]).is_err());
    }

    #[test]
    fn reused_input_doubles_gradient(x in tensor(vec![2, 3])) {
        let t = Tape::new();
        let v = t.param(x.clone());
        let g1 = t.sum(t.square(t.tanh(v).unwrap()).unwrap());
        let once = t.backward(g1).unwrap().wrt(v).clone();
        let t = Tape::new();
        let v = t.param(x);
        let g = |t: &Tape| t.sum(t.square(t.tanh(v).unwrap()).unwrap());
        let twice = t.backward(t.add(g(&t), g(&t)).unwrap()).unwrap().wrt(v).clone();
        for (a, b) in once.data().iter().zip(twice.data()) {
            prop_assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn unit_1x1_conv_is_identity(x in tensor(vec![2, 3, 4, 4])) {
        let t = Tape::new();
        let w = Tensor::from_fn([3, 3, 1, 1], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
        let y = t.conv2d(t.constant(x.clone()), t.constant(w), 1, 0).unwrap();
        let out = t.value(y).clone();
        prop_assert_eq!(out.data(), x.data());
    }

    #[test]
    fn ops_leave_inputs_untouched(x in tensor(vec![1, 2, 4, 4]), y in tensor(vec![1, 2, 4, 4])) {
        let t = Tape::new();
        let (a, b) = (t.param(x.clone()), t.param(y.clone()));
        let outs = [
            t.relu(a).unwrap(),
            t.abs(a).unwrap(),
            t.mul(a, b).unwrap(),
            t.pool(a, Pool::Mean2x2).unwrap(),
            t.upsample2(a).unwrap(),
            t.batch_norm(a, t.constant(Tensor::ones([2])), t.constant(Tensor::zeros([2])), 1e-5, None).unwrap().0,
        ];
        let loss = outs.iter().fold(t.sum(a), |acc, &o| t.add(acc, t.sum(o)).unwrap());
        t.backward(loss).unwrap();
        let (va, vb) = (t.value(a).clone(), t.value(b).clone());
        prop_assert_eq!(va.data(), x.data());
        prop_assert_eq!(vb.data(), y.data());
    }

    #[test]
    fn spectral_state_stays_unit(seed in any::<u64>(), rows in 2usize..10, cols in 2usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = Tensor::from_fn([rows, cols], |i| ((i * 7 + seed as usize % 13) % 11) as f32 - 5.0);
        let mut st = SpectralNormState::random(rows, cols, &mut rng);
        for _ in 0..3 {
            spectral_normalize(&w, &mut st).unwrap();
            let n: f32 = st.u.iter().map(|x| x * x).sum::<f32>().sqrt();
            prop_assert!((n - 1.0).abs() < 1e-5, "norm {}", n);
        }
    }

    #[test]
    fn losses_have_documented_signs(real in tensor(vec![4]), fake in tensor(vec![4]), a in tensor(vec![2, 3, 2, 2]), b in tensor(vec![2, 3, 2, 2])) {
        let t = Tape::new();
        let (r, f) = (t.constant(real), t.constant(fake));
        prop_assert!(t.item(gan_value(&t, r, f).unwrap()) <= 0.0);
        prop_assert!(t.item(gan_loss(&t, Some(r), f, GanSide::Discriminator).unwrap()) >= 0.0);
        prop_assert!(t.item(gan_loss(&t, None, f, GanSide::Generator).unwrap()) >= 0.0);
        let (pa, pb) = (t.constant(a.clone()), t.constant(b));
        prop_assert!(t.item(pair_alignment_loss(&t, pa, pb).unwrap()) >= 0.0);
        prop_assert_eq!(t.item(pair_alignment_loss(&t, pa, pa).unwrap()), 0.0);
        let x = t.constant(a);
        let id = |_: &Tape, v: Var| Ok(v);
        prop_assert_eq!(t.item(cycle_loss(&t, &mut { id }, &mut { id }, x, x).unwrap()), 0.0);
        let ys = vec![1usize; 8];
        let seg = Tensor::from_fn([3, 3, 1, 1], |i| (i % 4) as f32 * 0.3);
        let mut g = id;
        let lp = t.item(label_preservation_loss(&t, &mut LinearSeg(seg), &mut g, x, &ys).unwrap());
        prop_assert!(lp >= 0.0);
    }

    #[test]
    fn zero_label_weight_gives_pure_gan_gradient(x in tensor(vec![1, 3, 4, 4]), w in tensor(vec![3, 3, 1, 1])) {
        let seg = Tensor::from_fn([3, 3, 1, 1], |i| (i % 5) as f32 * 0.2 - 0.4);
        let ys = vec![2usize; 16];
        let run = |weights: LossWeights, pure: bool| {
            let t = Tape::new();
            let wv = t.param(w.clone());
            let xv = t.constant(x.clone());
            let mut g = |t: &Tape, v: Var| t.tanh(t.conv2d(v, wv, 1, 0)?);
            let loss = if pure {
                let fake = g(&t, xv).unwrap();
                gan_loss(&t, None, MeanCritic.criticize(&t, fake).unwrap(), GanSide::Generator).unwrap()
            } else {
                splat_loss(&t, &mut g, &mut MeanCritic, &mut LinearSeg(seg.clone()), xv, &ys, &weights).unwrap().total
            };
            t.backward(loss).unwrap().wrt(wv).clone()
        };
        let weights = LossWeights { label: 0.0, ..LossWeights::default() };
        let (full, pure) = (run(weights, false), run(weights, true));
        prop_assert_eq!(full.data(), pure.data());
    }

    #[test]
    fn decoded_boxes_stay_in_bounds(cls in tensor(vec![1, 2, 4, 4]), boxes in tensor(vec![1, 4, 4, 4])) {
        let boxes = boxes.map(|v| v * 4.0);
        let dets = decode(&cls, &boxes, &[0], 32, 32, 0.0, 1.0).unwrap();
        for d in &dets[0] {
            let b = d.bbox;
            prop_assert!(b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= 32.0 && b.y2 <= 32.0, "{:?}", b);
            prop_assert!((0.0..=1.0).contains(&d.confidence));
        }
    }

    #[test]
    fn ap_ignores_monotone_rescaling(dets in detections(8), gts in ground_truth(6)) {
        let base = average_precision(&dets, &gts, 0.5).ap;
        let squashed: Vec<Detection> = dets
            .iter()
            .map(|d| Detection { confidence: d.confidence.powi(3) * 0.5, ..d.clone() })
            .collect();
        prop_assert!((0.0..=1.0).contains(&base));
        prop_assert_eq!(base, average_precision(&squashed, &gts, 0.5).ap);
    }

    #[test]
    fn lowest_false_positive_never_helps(dets in detections(8), gts in ground_truth(6)) {
        let base = average_precision(&dets, &gts, 0.5).ap;
        let mut more = dets.clone();
        more.push(Detection { image_id: 9, class: 0, bbox: BBox::new(0.0, 0.0, 1.0, 1.0), confidence: 0.001 });
        prop_assert!(average_precision(&more, &gts, 0.5).ap <= base);
    }

    #[test]
    fn no_ground_truth_matched_twice(dets in detections(10), gts in ground_truth(6)) {
        let r = average_precision(&dets, &gts, 0.5);
        let tp = r.curve.last().map(|p| p.recall * gts.len() as f64).unwrap_or(0.0);
        prop_assert!(tp <= gts.len() as f64 + 1e-9);
    }

    #[test]
    fn nms_survivors_do_not_overlap(dets in detections(12)) {
        let kept = nms(&dets, 0.5);
        for (i, a) in kept.iter().enumerate() {
            for b in &kept[i + 1..] {
                if a.image_id == b.image_id {
                    prop_assert!(iou(&a.bbox, &b.bbox).unwrap() <= 0.5);
                }
            }
        }
    }

    #[test]
    fn gap_recovered_matches_formula(s in 0.0f64..50.0, gap in 1.0f64..50.0, frac in -0.5f64..1.5) {
        let o = s + gap;
        let a = s + frac * gap;
        prop_assert!((gap_recovered(s, a, o).unwrap() - 100.0 * frac).abs() < 1e-6);
    }

    #[test]
    fn batcher_visits_each_index_once_per_epoch(n in 1usize..40, batch in 1usize..8, seed in any::<u64>()) {
        let mut b = Batcher::new(n, seed);
        let mut seen = vec![0usize; n];
        let mut drawn = 0;
        while drawn < n {
            let idx = b.next(batch.min(n - drawn));
            drawn += idx.len();
            for i in idx {
                seen[i] += 1;
            }
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn config_text_round_trips(seed in any::<u64>(), iters in 0usize..5000, thr in 0.0f64..1.0) {
        let mut cfg = ExperimentConfig::default();
        cfg.seed = seed;
        cfg.detector_iters = iters;
        cfg.confidence_threshold = thr;
        let back = ExperimentConfig::parse_text(&cfg.to_text()).unwrap();
        prop_assert_eq!(back.to_text(), cfg.to_text());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn scenes_respect_layout_rules(seed in any::<u64>()) {
        let cfg = SceneConfig::default();
        let s = gen_scene(seed, &cfg);
        prop_assert!((1..=6).contains(&s.objects.len()));
        let cars: Vec<BBox> = s.objects.iter().filter(|o| o.kind == ObjectKind::Car).map(|o| o.rect.to_bbox()).collect();
        for o in &s.objects {
            prop_assert!(o.rect.x + o.rect.w <= cfg.size && o.rect.y + o.rect.h <= cfg.size);
        }
        for (i, a) in cars.iter().enumerate() {
            for b in &cars[i + 1..] {
                prop_assert!(iou(a, b).unwrap() <= 0.3);
            }
        }
    }

    #[test]
    fn style_never_changes_geometry(seed in any::<u64>()) {
        let scene = gen_scene(seed, &SceneConfig::default());
        let (a, b) = (render(&scene, Style::Source), render(&scene, Style::Target));
        prop_assert_eq!(&a.boxes, &b.boxes);
        prop_assert_eq!(&a.segmap, &b.segmap);
        prop_assert_ne!(a.pixels.data(), b.pixels.data());
        for lb in &a.boxes {
            let bb = lb.bbox;
            let (mut car, mut total) = (0usize, 0usize);
            for y in bb.y1 as usize..bb.y2 as usize {
                for x in bb.x1 as usize..bb.x2 as usize {
                    total += 1;
                    car += (a.segmap[y * 64 + x] as usize == SEG_CAR) as usize;
                }
            }
            prop_assert!(car as f64 >= 0.6 * total as f64, "{car}/{total}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn generator_keeps_shape_and_range(seed in any::<u64>(), x in tensor(vec![2, 3, 16, 16])) {
        let mut g = Generator::new("generator", 1, &mut ChaCha8Rng::seed_from_u64(seed));
        let y = g.infer(&x).unwrap();
        prop_assert_eq!(y.shape(), x.shape());
        prop_assert!(y.data().iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn discriminator_emits_one_logit_per_image(seed in any::<u64>(), n in 1usize..4) {
        let mut d = Discriminator::new("discriminator", 1, &mut ChaCha8Rng::seed_from_u64(seed));
        let x = Tensor::from_fn([n, 3, 64, 64], |i| ((i % 17) as f32 / 8.5) - 1.0);
        let y = d.infer(&x).unwrap();
        prop_assert_eq!(y.numel(), n);
        prop_assert!(y.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn detect_is_deterministic(seed in any::<u64>(), x in tensor(vec![1, 3, 32, 32])) {
        let mut det = Detector::new(&mut ChaCha8Rng::seed_from_u64(seed));
        let a = det.detect(&x, &[0], 0.0, 0.5).unwrap();
        let b = det.detect(&x, &[0], 0.0, 0.5).unwrap();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn labeled_boxes_survive_style_roundtrip() {
    let img = splat::synthdata::render_seed(3, &SceneConfig::default(), Style::Target);
    let text = splat::synthdata::format_boxes(3, &img.boxes);
    let back: Vec<LabeledBox> = splat::synthdata::parse_boxes(&text).unwrap();
    assert_eq!(back, img.boxes);
}
