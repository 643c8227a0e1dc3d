//! Brute-force references the library is checked against.

use distillwsd::regions::BBox;

pub fn area_iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    inter / ((a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter)
}

/// Quadratic greedy NMS: pick the best remaining box (lowest index on ties),
/// drop everything overlapping it by more than `thresh`, repeat.
pub fn greedy_nms(boxes: &[BBox], scores: &[f64], thresh: f64) -> Vec<usize> {
    let mut alive = vec![true; boxes.len()];
    let mut kept = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for i in 0..boxes.len() {
            if alive[i] && best.map_or(true, |b| scores[i] > scores[b]) {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        kept.push(b);
        for i in 0..boxes.len() {
            if alive[i] && area_iou(&boxes[b], &boxes[i]) > thresh {
                alive[i] = false;
            }
        }
        alive[b] = false;
    }
    kept
}

/// Precision at every positive, counting for each item how many items rank
/// strictly before it: higher score, or equal score and lower index.
pub fn exhaustive_ap(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let positives: Vec<usize> = (0..scores.len()).filter(|&i| labels[i] == 1).collect();
    if positives.is_empty() {
        return None;
    }
    let ahead = |i: usize| (0..scores.len()).filter(move |&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i));
    let mut at: Vec<(usize, usize)> = positives
        .iter()
        .map(|&i| (ahead(i).count() + 1, ahead(i).filter(|&j| labels[j] == 1).count() + 1))
        .collect();
    // accumulate from the top of the ranking down
    at.sort_unstable();
    let total: f64 = at.iter().map(|&(rank, hits)| hits as f64 / rank as f64).sum();
    Some(total / positives.len() as f64)
}

/// RoI max pooling by scanning every cell of a `c×h×w` map: the box is
/// snapped outward to whole cells, split into equal continuous bins, and a
/// cell belongs to every bin its unit square overlaps with positive area.
pub fn scan_roi_pool(map: &[f64], (c, h, w): (usize, usize, usize), bbox: &BBox, out: (usize, usize), image: (usize, usize)) -> Vec<f64> {
    let snap = |lo: f64, hi: f64, cells: usize, pixels: usize| {
        let s = cells as f64 / pixels as f64;
        let a = (lo * s).floor().clamp(0.0, cells as f64 - 1.0);
        let b = (hi * s).ceil().clamp(a + 1.0, cells as f64);
        (a, b)
    };
    let (ya, yb) = snap(bbox.y1, bbox.y2, h, image.0);
    let (xa, xb) = snap(bbox.x1, bbox.x2, w, image.1);
    let mut result = vec![f64::NEG_INFINITY; c * out.0 * out.1];
    for i in 0..out.0 {
        let (lo_y, hi_y) = (ya + i as f64 * (yb - ya) / out.0 as f64, ya + (i + 1) as f64 * (yb - ya) / out.0 as f64);
        for j in 0..out.1 {
            let (lo_x, hi_x) = (xa + j as f64 * (xb - xa) / out.1 as f64, xa + (j + 1) as f64 * (xb - xa) / out.1 as f64);
            for y in 0..h {
                for x in 0..w {
                    let overlaps = (y as f64) < hi_y && (y + 1) as f64 > lo_y && (x as f64) < hi_x && (x + 1) as f64 > lo_x;
                    if overlaps {
                        for ch in 0..c {
                            let slot = &mut result[(ch * out.0 + i) * out.1 + j];
                            *slot = slot.max(map[(ch * h + y) * w + x]);
                        }
                    }
                }
            }
        }
    }
    result
}
