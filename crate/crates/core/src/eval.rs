//! Detection evaluation: IoU, greedy matching, all-point interpolated AP and
//! mAP over classes.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::BBox;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: String,
    pub class_id: u32,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image_id: String,
    pub class_id: u32,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    pub confidence_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            confidence_threshold: 0.8,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        let open_unit = |v: f64| v > 0.0 && v < 1.0;
        if !open_unit(self.iou_threshold) || !open_unit(self.confidence_threshold) {
            return Err(Error::invalid("iou and confidence thresholds must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Evaluation summary. `precision` and `recall` are measured on the
/// detections scoring at least the confidence threshold; AP uses the full
/// ranked list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapScore {
    pub per_class_ap: BTreeMap<u32, f64>,
    pub map: f64,
    pub precision: f64,
    pub recall: f64,
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchResult {
    /// Per detection, in input order.
    pub true_positive: Vec<bool>,
    /// Per ground truth, in input order.
    pub gt_matched: Vec<bool>,
}

/// Indices of `dets` sorted by descending score; equal scores keep input order.
fn ranked(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    order
}

/// Greedy matching in descending score order. A detection is a true
/// positive iff the unmatched ground truth of its class and image with the
/// highest IoU reaches the threshold; that ground truth is then consumed.
pub fn match_detections(dets: &[Detection], gts: &[GroundTruth], cfg: &EvalConfig) -> MatchResult {
    let mut by_key: HashMap<(&str, u32), Vec<usize>> = HashMap::new();
    for (i, g) in gts.iter().enumerate() {
        by_key.entry((g.image_id.as_str(), g.class_id)).or_default().push(i);
    }
    let mut gt_matched = vec![false; gts.len()];
    let mut true_positive = vec![false; dets.len()];
    for di in ranked(dets) {
        let d = &dets[di];
        let Some(cands) = by_key.get(&(d.image_id.as_str(), d.class_id)) else {
            continue;
        };
        let mut best: Option<(usize, f64)> = None;
        for &gi in cands {
            if gt_matched[gi] {
                continue;
            }
            let o = iou(&d.bbox, &gts[gi].bbox);
            if best.is_none_or(|(_, bo)| o > bo) {
                best = Some((gi, o));
            }
        }
        if let Some((gi, o)) = best {
            if o >= cfg.iou_threshold {
                gt_matched[gi] = true;
                true_positive[di] = true;
            }
        }
    }
    MatchResult {
        true_positive,
        gt_matched,
    }
}

/// All-point interpolated AP of one class. `ranked_flags` are TP flags in
/// descending score order.
pub fn average_precision(ranked_flags: &[bool], total_gt: usize) -> Result<f64> {
    if total_gt == 0 {
        return Err(Error::EmptyEvaluation);
    }
    let mut recall = Vec::with_capacity(ranked_flags.len());
    let mut precision = Vec::with_capacity(ranked_flags.len());
    let mut tp = 0usize;
    for (i, &hit) in ranked_flags.iter().enumerate() {
        tp += usize::from(hit);
        recall.push(tp as f64 / total_gt as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    // precision envelope from the right
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        if *r > prev_recall {
            ap += (r - prev_recall) * p;
            prev_recall = *r;
        }
    }
    Ok(ap)
}

/// AP from flags and their scores (sorted here, ties in input order).
pub fn average_precision_scored(flags: &[bool], scores: &[f64], total_gt: usize) -> Result<f64> {
    if flags.len() != scores.len() {
        return Err(Error::invalid("flags and scores differ in length"));
    }
    let mut order: Vec<usize> = (0..flags.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let ranked: Vec<bool> = order.iter().map(|&i| flags[i]).collect();
    average_precision(&ranked, total_gt)
}

/// Per-class AP and their mean. Classes without ground truth are left out.
pub fn evaluate_predictions(dets: &[Detection], gts: &[GroundTruth], cfg: &EvalConfig) -> Result<MapScore> {
    if gts.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let matched = match_detections(dets, gts, cfg);
    let mut gt_per_class: BTreeMap<u32, usize> = BTreeMap::new();
    for g in gts {
        *gt_per_class.entry(g.class_id).or_default() += 1;
    }
    let order = ranked(dets);
    let mut per_class_ap = BTreeMap::new();
    for (&class, &count) in &gt_per_class {
        let flags: Vec<bool> = order
            .iter()
            .filter(|&&i| dets[i].class_id == class)
            .map(|&i| matched.true_positive[i])
            .collect();
        per_class_ap.insert(class, average_precision(&flags, count)?);
    }
    let map = per_class_ap.values().sum::<f64>() / per_class_ap.len() as f64;

    let confident: Vec<usize> = (0..dets.len())
        .filter(|&i| dets[i].score >= cfg.confidence_threshold && gt_per_class.contains_key(&dets[i].class_id))
        .collect();
    let tp = confident.iter().filter(|&&i| matched.true_positive[i]).count();
    let precision = if confident.is_empty() {
        0.0
    } else {
        tp as f64 / confident.len() as f64
    };
    Ok(MapScore {
        per_class_ap,
        map,
        precision,
        recall: tp as f64 / gts.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    fn det(img: &str, class: u32, bx: BBox, score: f64) -> Detection {
        Detection {
            image_id: img.into(),
            class_id: class,
            bbox: bx,
            score,
        }
    }

    fn gt(img: &str, class: u32, bx: BBox) -> GroundTruth {
        GroundTruth {
            image_id: img.into(),
            class_id: class,
            bbox: bx,
        }
    }

    #[test]
    fn iou_cases() {
        let a = b(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &b(20.0, 0.0, 30.0, 10.0)), 0.0);
        // pixel-count oracle: 50 shared unit cells, 150 in the union
        let c = b(5.0, 0.0, 15.0, 10.0);
        let cells = |bx: &BBox| -> std::collections::HashSet<(i32, i32)> {
            (bx.x0 as i32..bx.x1 as i32)
                .flat_map(|x| (bx.y0 as i32..bx.y1 as i32).map(move |y| (x, y)))
                .collect()
        };
        let (ca, cc) = (cells(&a), cells(&c));
        let oracle = ca.intersection(&cc).count() as f64 / ca.union(&cc).count() as f64;
        assert!((iou(&a, &c) - oracle).abs() < 1e-15);
        assert!((iou(&a, &c) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn matching_cases() {
        let cfg = EvalConfig::default();
        let g = vec![gt("i", 0, b(0.0, 0.0, 10.0, 10.0))];
        // IoU 0.6
        let r = match_detections(&[det("i", 0, b(0.0, 0.0, 10.0, 6.0), 0.9)], &g, &cfg);
        assert_eq!(r.true_positive, vec![true]);
        // duplicate on one GT: higher score wins, the other is FP
        let dets = vec![
            det("i", 0, b(0.0, 0.0, 10.0, 9.0), 0.8),
            det("i", 0, b(0.0, 0.0, 10.0, 10.0), 0.9),
        ];
        let r = match_detections(&dets, &g, &cfg);
        assert_eq!(r.true_positive, vec![false, true]);
        assert_eq!(r.gt_matched, vec![true]);
        // wrong class
        let r = match_detections(&[det("i", 1, b(0.0, 0.0, 10.0, 10.0), 0.9)], &g, &cfg);
        assert_eq!(r.true_positive, vec![false]);
    }

    #[test]
    fn ap_cases() {
        assert_eq!(average_precision(&[true], 1).unwrap(), 1.0);
        assert_eq!(average_precision_scored(&[false, true], &[0.9, 0.8], 1).unwrap(), 0.5);
        assert_eq!(average_precision(&[], 3).unwrap(), 0.0);
        assert!(matches!(average_precision(&[true], 0), Err(Error::EmptyEvaluation)));
    }

    #[test]
    fn evaluate_extremes() {
        let cfg = EvalConfig::default();
        let gts = vec![
            gt("a", 0, b(0.0, 0.0, 10.0, 10.0)),
            gt("a", 1, b(20.0, 0.0, 30.0, 10.0)),
            gt("b", 0, b(5.0, 5.0, 9.0, 9.0)),
        ];
        let perfect: Vec<Detection> = gts.iter().map(|g| det(&g.image_id, g.class_id, g.bbox, 0.95)).collect();
        let s = evaluate_predictions(&perfect, &gts, &cfg).unwrap();
        assert_eq!(s.map, 1.0);
        assert_eq!((s.precision, s.recall), (1.0, 1.0));
        let s = evaluate_predictions(&[], &gts, &cfg).unwrap();
        assert_eq!(s.map, 0.0);
        assert!(matches!(
            evaluate_predictions(&perfect, &[], &cfg),
            Err(Error::EmptyEvaluation)
        ));
    }

    #[test]
    fn detection_json_shape() {
        let d = det("img-1", 3, b(1.0, 2.0, 3.0, 4.0), 0.5);
        let v = serde_json::to_value(&d).unwrap();
        assert_eq!(
            v,
            serde_json::json!({"image_id":"img-1","class_id":3,"box":[1.0,2.0,3.0,4.0],"score":0.5})
        );
    }
}
