//! Detection evaluation: IoU, per-class NMS, VOC-style average precision
//! with all-point interpolation, and mAP at IoU 0.5.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::models::Detection;

/// Axis-aligned box in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    pub fn is_well_formed(&self) -> bool {
        self.x1 < self.x2 && self.y1 < self.y2 && [self.x1, self.y1, self.x2, self.y2]
            .iter()
            .all(|v| v.is_finite())
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn clip(&self, width: f64, height: f64) -> BBox {
        BBox {
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
            x2: self.x2.clamp(0.0, width),
            y2: self.y2.clamp(0.0, height),
        }
    }
}

pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    for bx in [a, b] {
        if !bx.is_well_formed() {
            return Err(Error::domain("iou", format!("malformed box {bx:?}")));
        }
    }
    Ok(iou_unchecked(a, b))
}

pub(crate) fn iou_unchecked(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    if inter == 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// Descending confidence; equal confidences keep their input order.
fn by_confidence(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| {
        dets[j]
            .confidence
            .partial_cmp(&dets[i].confidence)
            .unwrap_or(Ordering::Equal)
            .then(i.cmp(&j))
    });
    order
}

/// Greedy per-class suppression of boxes overlapping a kept box with IoU at
/// or above `iou_threshold`. Output is sorted by descending confidence.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut kept: Vec<Detection> = Vec::new();
    for i in by_confidence(dets) {
        let d = &dets[i];
        let suppressed = kept.iter().any(|k| {
            k.class == d.class
                && k.image_id == d.image_id
                && iou_unchecked(&k.bbox, &d.bbox) >= iou_threshold
        });
        if !suppressed {
            kept.push(d.clone());
        }
    }
    kept
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
    /// Confidence of the detection at which this point is reached.
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ApResult {
    pub ap: f64,
    pub num_gt: usize,
    pub num_det: usize,
    pub curve: Vec<PrPoint>,
    /// Set when AP is defined by convention rather than measured.
    pub warning: Option<String>,
}

/// A ground-truth box belonging to one image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundTruth {
    pub image_id: u64,
    pub bbox: BBox,
}

/// Average precision for one class.
///
/// Detections are visited by descending confidence. Each one is compared to
/// the best-overlapping ground truth in its image; it is a true positive when
/// that IoU reaches `iou_threshold` and the ground truth is still unmatched,
/// otherwise a false positive. AP is the area under the precision envelope.
pub fn average_precision(dets: &[Detection], gts: &[GroundTruth], iou_threshold: f64) -> ApResult {
    let mut by_image: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, g) in gts.iter().enumerate() {
        by_image.entry(g.image_id).or_default().push(i);
    }
    if gts.is_empty() {
        let warning = if dets.is_empty() {
            "no ground truth and no detections; AP defined as 0"
        } else {
            "no ground truth; AP defined as 0"
        };
        return ApResult {
            ap: 0.0,
            num_gt: 0,
            num_det: dets.len(),
            curve: Vec::new(),
            warning: Some(warning.to_string()),
        };
    }

    let mut matched = vec![false; gts.len()];
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut curve = Vec::with_capacity(dets.len());
    for i in by_confidence(dets) {
        let d = &dets[i];
        let mut best: Option<(usize, f64)> = None;
        if let Some(cands) = by_image.get(&d.image_id) {
            for &g in cands {
                let o = iou_unchecked(&d.bbox, &gts[g].bbox);
                if best.is_none_or(|(_, b)| o > b) {
                    best = Some((g, o));
                }
            }
        }
        match best {
            Some((g, o)) if o >= iou_threshold && !matched[g] => {
                matched[g] = true;
                tp += 1;
            }
            _ => fp += 1,
        }
        curve.push(PrPoint {
            recall: tp as f64 / gts.len() as f64,
            precision: tp as f64 / (tp + fp) as f64,
            threshold: d.confidence,
        });
    }
    ApResult {
        ap: area_under_envelope(&curve),
        num_gt: gts.len(),
        num_det: dets.len(),
        curve,
        warning: None,
    }
}

fn area_under_envelope(curve: &[PrPoint]) -> f64 {
    let mut env: Vec<f64> = curve.iter().map(|p| p.precision).collect();
    for i in (0..env.len().saturating_sub(1)).rev() {
        env[i] = env[i].max(env[i + 1]);
    }
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    for (p, e) in curve.iter().zip(&env) {
        area += (p.recall - prev_recall) * e;
        prev_recall = p.recall;
    }
    area
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassReport {
    pub class: usize,
    pub ap: f64,
    pub num_gt: usize,
    pub num_det: usize,
    pub warning: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub classes: Vec<ClassReport>,
    /// Mean AP in percent.
    pub map: f64,
}

impl EvalReport {
    /// `class,ap,num_gt,num_det` rows followed by a `mAP` summary row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,ap,num_gt,num_det\n");
        for c in &self.classes {
            let _ = writeln!(s, "{},{:.6},{},{}", c.class, c.ap, c.num_gt, c.num_det);
        }
        let _ = writeln!(s, "mAP,{:.6},,", self.map);
        s
    }
}

/// A labeled ground-truth box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabeledBox {
    pub class: usize,
    pub bbox: BBox,
}

/// mAP (percent) at IoU 0.5 over `classes`. `predictions[i]` and
/// `ground_truth[i]` describe the same image, identified by `image_ids[i]`.
pub fn map_at_05(
    image_ids: &[u64],
    predictions: &[Vec<Detection>],
    ground_truth: &[Vec<LabeledBox>],
    classes: &[usize],
) -> Result<EvalReport> {
    if predictions.len() != image_ids.len() || ground_truth.len() != image_ids.len() {
        return Err(Error::InvalidArgument(format!(
            "map_at_05: {} ids, {} prediction sets, {} ground-truth sets",
            image_ids.len(),
            predictions.len(),
            ground_truth.len()
        )));
    }
    let mut reports = Vec::with_capacity(classes.len());
    for &class in classes {
        let dets: Vec<Detection> = predictions
            .iter()
            .zip(image_ids)
            .flat_map(|(ps, &id)| {
                ps.iter().filter(move |d| d.class == class).map(move |d| Detection {
                    image_id: id,
                    ..d.clone()
                })
            })
            .collect();
        let gts: Vec<GroundTruth> = ground_truth
            .iter()
            .zip(image_ids)
            .flat_map(|(gs, &id)| {
                gs.iter()
                    .filter(move |g| g.class == class)
                    .map(move |g| GroundTruth {
                        image_id: id,
                        bbox: g.bbox,
                    })
            })
            .collect();
        let r = average_precision(&dets, &gts, 0.5);
        reports.push(ClassReport {
            class,
            ap: r.ap,
            num_gt: r.num_gt,
            num_det: r.num_det,
            warning: r.warning,
        });
    }
    let map = if reports.is_empty() {
        0.0
    } else {
        100.0 * reports.iter().map(|r| r.ap).sum::<f64>() / reports.len() as f64
    };
    Ok(EvalReport {
        classes: reports,
        map,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(id: u64, b: BBox, conf: f64) -> Detection {
        Detection {
            image_id: id,
            class: 0,
            bbox: b,
            confidence: conf,
        }
    }

    fn gt(b: BBox) -> GroundTruth {
        GroundTruth { image_id: 0, bbox: b }
    }

    #[test]
    fn iou_cases() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &BBox::new(5.0, 5.0, 6.0, 6.0)).unwrap(), 0.0);
        let b = BBox::new(1.0, 0.0, 3.0, 2.0);
        assert!((iou(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-9);
        assert!(iou(&a, &BBox::new(2.0, 0.0, 1.0, 1.0)).is_err());
    }

    #[test]
    fn nms_cases() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        let kept = nms(&[det(0, a, 0.8), det(0, a, 0.9)], 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].confidence, 0.9);

        let far = BBox::new(20.0, 20.0, 30.0, 30.0);
        assert_eq!(nms(&[det(0, a, 0.9), det(0, far, 0.8)], 0.5).len(), 2);

        // A–B and B–C overlap with IoU 0.6, A–C only 1/3: B goes, A and C stay.
        let ba = BBox::new(0.0, 0.0, 16.0, 1.0);
        let bb = BBox::new(4.0, 0.0, 20.0, 1.0);
        let bc = BBox::new(8.0, 0.0, 24.0, 1.0);
        assert!((iou(&ba, &bb).unwrap() - 0.6).abs() < 1e-9);
        assert!((iou(&bb, &bc).unwrap() - 0.6).abs() < 1e-9);
        let kept = nms(&[det(0, ba, 0.9), det(0, bb, 0.8), det(0, bc, 0.7)], 0.5);
        let confs: Vec<f64> = kept.iter().map(|d| d.confidence).collect();
        assert_eq!(confs, vec![0.9, 0.7]);

        // Disjoint A and C around a B holding both halves: IoU exactly 0.5 suppresses.
        let ba = BBox::new(0.0, 0.0, 8.0, 1.0);
        let bb = BBox::new(0.0, 0.0, 16.0, 1.0);
        let bc = BBox::new(8.0, 0.0, 16.0, 1.0);
        assert_eq!(iou(&ba, &bc).unwrap(), 0.0);
        let kept = nms(&[det(0, ba, 0.9), det(0, bb, 0.8), det(0, bc, 0.7)], 0.5);
        let confs: Vec<f64> = kept.iter().map(|d| d.confidence).collect();
        assert_eq!(confs, vec![0.9, 0.7]);
    }

    #[test]
    fn hand_computed_ap() {
        let g = BBox::new(0.0, 0.0, 10.0, 10.0);
        let miss = BBox::new(30.0, 30.0, 40.0, 40.0);
        assert_eq!(average_precision(&[det(0, g, 0.7)], &[gt(g)], 0.5).ap, 1.0);
        let ap = average_precision(&[det(0, g, 0.9), det(0, miss, 0.8)], &[gt(g)], 0.5).ap;
        assert_eq!(ap, 1.0);
        let ap = average_precision(&[det(0, miss, 0.9), det(0, g, 0.8)], &[gt(g)], 0.5).ap;
        assert_eq!(ap, 0.5);
    }

    #[test]
    fn duplicates_are_false_positives() {
        let g = BBox::new(0.0, 0.0, 10.0, 10.0);
        let r = average_precision(&[det(0, g, 0.9), det(0, g, 0.8)], &[gt(g)], 0.5);
        assert_eq!(r.curve[1].precision, 0.5);
        assert_eq!(r.ap, 1.0);
    }

    #[test]
    fn empty_everything_warns() {
        let r = average_precision(&[], &[], 0.5);
        assert_eq!(r.ap, 0.0);
        assert!(r.warning.is_some());
    }

    #[test]
    fn map_bounds_and_csv() {
        let g = BBox::new(2.0, 2.0, 12.0, 9.0);
        let labels = vec![vec![LabeledBox { class: 0, bbox: g }]];
        let perfect = vec![vec![det(7, g, 0.9)]];
        let r = map_at_05(&[7], &perfect, &labels, &[0]).unwrap();
        assert_eq!(r.map, 100.0);
        let r = map_at_05(&[7], &[vec![]], &labels, &[0]).unwrap();
        assert_eq!(r.map, 0.0);
        let csv = r.to_csv();
        assert!(csv.starts_with("class,ap,num_gt,num_det\n0,0.000000,1,0\n"));
        assert!(csv.ends_with("mAP,0.000000,,\n"));
    }
}
