//! Independent reference computations shared by the test targets.

use std::collections::BTreeSet;

use deformsynth::eval::{Detection, GroundTruth};
use deformsynth::raster::BBox;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn cell_iou(a: &BBox, b: &BBox) -> f64 {
    let cells = |x: &BBox| -> BTreeSet<(i64, i64)> {
        (x.x0 as i64..x.x1 as i64)
            .flat_map(|i| (x.y0 as i64..x.y1 as i64).map(move |j| (i, j)))
            .collect()
    };
    let (ca, cb) = (cells(a), cells(b));
    let inter = ca.intersection(&cb).count();
    let union = ca.union(&cb).count();
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn brute_map(dets: &[Detection], gts: &[GroundTruth], thr: f64) -> f64 {
    let classes: BTreeSet<u32> = gts.iter().map(|g| g.class_id).collect();
    let mut total = 0.0;
    for &c in &classes {
        let class_gts: Vec<&GroundTruth> = gts.iter().filter(|g| g.class_id == c).collect();
        // stable sort by descending score
        let mut ranked: Vec<&Detection> = dets.iter().filter(|d| d.class_id == c).collect();
        ranked.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
        let mut used = vec![false; class_gts.len()];
        let mut hits = Vec::new();
        for d in &ranked {
            let mut best: Option<(usize, f64)> = None;
            for (gi, g) in class_gts.iter().enumerate() {
                if used[gi] || g.image_id != d.image_id {
                    continue;
                }
                let o = cell_iou(&d.bbox, &g.bbox);
                if best.map_or(true, |(_, bo)| o > bo) {
                    best = Some((gi, o));
                }
            }
            let hit = matches!(best, Some((_, o)) if o >= thr);
            if let (true, Some((gi, _))) = (hit, best) {
                used[gi] = true;
            }
            hits.push(hit);
        }
        let precision_at = |i: usize| hits[..=i].iter().filter(|&&h| h).count() as f64 / (i + 1) as f64;
        let mut ap = 0.0;
        for i in 0..hits.len() {
            if hits[i] {
                let envelope = (i..hits.len()).map(precision_at).fold(0.0, f64::max);
                ap += envelope / class_gts.len() as f64;
            }
        }
        total += ap;
    }
    total / classes.len() as f64
}

pub fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    let x0 = rng.random_range(0..12) as f64;
    let y0 = rng.random_range(0..12) as f64;
    let w = rng.random_range(1..8) as f64;
    let h = rng.random_range(1..8) as f64;
    BBox::new(x0, y0, x0 + w, y0 + h).unwrap()
}

/// At most 5 images, 4 ground truths and 4 detections per image, 2 classes.
pub fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<Detection>, Vec<GroundTruth>) {
    let images = rng.random_range(1..=5);
    let (mut dets, mut gts) = (Vec::new(), Vec::new());
    for i in 0..images {
        let id = format!("img{i}");
        for _ in 0..rng.random_range(0..=4) {
            gts.push(GroundTruth {
                image_id: id.clone(),
                class_id: rng.random_range(0..2),
                bbox: random_box(rng),
            });
        }
        for _ in 0..rng.random_range(0..=4) {
            // near a ground truth half of the time, so matches happen
            let bbox = match gts.last() {
                Some(g) if rng.random_bool(0.5) => {
                    let dx = rng.random_range(-1..=1) as f64;
                    BBox::new((g.bbox.x0 + dx).max(0.0), g.bbox.y0, g.bbox.x1 + dx.max(0.0), g.bbox.y1).unwrap()
                }
                _ => random_box(rng),
            };
            dets.push(Detection {
                image_id: id.clone(),
                class_id: rng.random_range(0..2),
                bbox,
                // coarse scores so ties occur
                score: f64::from(rng.random_range(1..=10u32)) / 10.0,
            });
        }
    }
    if gts.is_empty() {
        gts.push(GroundTruth {
            image_id: "img0".into(),
            class_id: 0,
            bbox: random_box(rng),
        });
    }
    (dets, gts)
}
