//! Region proposals, RoI pooling, IoU and greedy non-maximum suppression.
//!
//! Proposals come from a deterministic sliding-window search scored by Sobel
//! edge density: a window is good when it contains a lot of edge energy and
//! little edge energy sits just outside its border (an edge right outside
//! usually means the window cuts through an object). Prior scores are
//! normalized so the best window of each image scores 1 and floored at
//! [`PRIOR_FLOOR`].

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::image::RgbImage;
use crate::tensor::{Float, RoiWindow, Tape, Tensor, Var};

/// Lowest prior score a proposal can carry.
pub const PRIOR_FLOOR: f64 = 1e-3;
/// Weight of the edge mass in the band just outside a window.
pub const RING_WEIGHT: f64 = 0.5;

/// Axis-aligned box in continuous pixel coordinates, `[x1, x2) × [y1, y2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if !(x1 < x2 && y1 < y2) {
            bail!(Input, "degenerate box ({x1}, {y1}, {x2}, {y2})");
        }
        Ok(BBox { x1, y1, x2, y2 })
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn flip_horizontal(&self, image_width: f64) -> BBox {
        BBox { x1: image_width - self.x2, y1: self.y1, x2: image_width - self.x1, y2: self.y2 }
    }

    pub fn scaled(&self, sx: f64, sy: f64) -> BBox {
        BBox { x1: self.x1 * sx, y1: self.y1 * sy, x2: self.x2 * sx, y2: self.y2 * sy }
    }
}

/// Intersection over union; 0 for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// Greedy NMS. Returns kept indices in selection order (descending score,
/// lowest index first on ties). A box is suppressed when its IoU with an
/// already kept box exceeds `iou_thresh`.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_thresh: f64) -> Result<Vec<usize>> {
    if boxes.len() != scores.len() {
        bail!(Contract, "nms: {} boxes but {} scores", boxes.len(), scores.len());
    }
    if !(iou_thresh > 0.0 && iou_thresh < 1.0) {
        bail!(Contract, "nms threshold must be in (0, 1), got {iou_thresh}");
    }
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    // stable: equal scores keep ascending index order
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut suppressed = vec![false; boxes.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order[pos + 1..] {
            if !suppressed[j] && iou(&boxes[i], &boxes[j]) > iou_thresh {
                suppressed[j] = true;
            }
        }
    }
    Ok(keep)
}

/// Boxes of one image with their prior scores, best first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalSet {
    pub image_id: String,
    pub boxes: Vec<BBox>,
    pub prior_scores: Vec<f64>,
}

impl ProposalSet {
    pub fn new(image_id: impl Into<String>, boxes: Vec<BBox>, prior_scores: Vec<f64>) -> Result<Self> {
        if boxes.len() != prior_scores.len() {
            bail!(Contract, "{} boxes but {} prior scores", boxes.len(), prior_scores.len());
        }
        Ok(ProposalSet { image_id: image_id.into(), boxes, prior_scores })
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn flip_horizontal(&self, image_width: f64) -> ProposalSet {
        ProposalSet {
            image_id: self.image_id.clone(),
            boxes: self.boxes.iter().map(|b| b.flip_horizontal(image_width)).collect(),
            prior_scores: self.prior_scores.clone(),
        }
    }

    pub fn scaled(&self, s: f64) -> ProposalSet {
        ProposalSet {
            image_id: self.image_id.clone(),
            boxes: self.boxes.iter().map(|b| b.scaled(s, s)).collect(),
            prior_scores: self.prior_scores.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalConfig {
    pub top_n: usize,
    /// Window side as a fraction of the shorter image side.
    pub scales: Vec<f64>,
    /// Width/height ratios; window area is kept constant across ratios.
    pub aspect_ratios: Vec<f64>,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        ProposalConfig { top_n: 64, scales: vec![0.2, 0.3, 0.4, 0.55, 0.75], aspect_ratios: vec![1.0, 0.5, 2.0] }
    }
}

/// Sobel gradient magnitude of the luminance (channel mean in [0, 1]),
/// replicate-padded at the border. Computed in integers so flat regions are
/// exactly zero.
pub fn edge_magnitude(image: &RgbImage) -> Vec<f64> {
    let (w, h) = (image.width(), image.height());
    let lum: Vec<i64> = image.pixels().chunks(3).map(|p| p.iter().map(|&v| v as i64).sum()).collect();
    let at = |x: isize, y: isize| {
        let xc = x.clamp(0, w as isize - 1) as usize;
        let yc = y.clamp(0, h as isize - 1) as usize;
        lum[yc * w + xc]
    };
    let mut mag = vec![0.0; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = at(x + 1, y - 1) + 2 * at(x + 1, y) + at(x + 1, y + 1)
                - at(x - 1, y - 1)
                - 2 * at(x - 1, y)
                - at(x - 1, y + 1);
            let gy = at(x - 1, y + 1) + 2 * at(x, y + 1) + at(x + 1, y + 1)
                - at(x - 1, y - 1)
                - 2 * at(x, y - 1)
                - at(x + 1, y - 1);
            mag[y as usize * w + x as usize] = ((gx * gx + gy * gy) as f64).sqrt() / 765.0;
        }
    }
    mag
}

/// Summed-area table with a zero row and column prepended.
struct Integral {
    w: usize,
    table: Vec<f64>,
}

impl Integral {
    fn new(values: &[f64], w: usize, h: usize) -> Self {
        let mut table = vec![0.0; (w + 1) * (h + 1)];
        for y in 0..h {
            let mut row = 0.0;
            for x in 0..w {
                row += values[y * w + x];
                table[(y + 1) * (w + 1) + x + 1] = table[y * (w + 1) + x + 1] + row;
            }
        }
        Integral { w, table }
    }

    /// Sum over pixels `[x0, x1) × [y0, y1)`.
    fn sum(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> f64 {
        let s = self.w + 1;
        self.table[y1 * s + x1] - self.table[y0 * s + x1] - self.table[y1 * s + x0] + self.table[y0 * s + x0]
    }
}

/// Integer pixel window `[x, x + w) × [y, y + h)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Window {
    pub fn to_box(self) -> BBox {
        BBox { x1: self.x as f64, y1: self.y as f64, x2: (self.x + self.w) as f64, y2: (self.y + self.h) as f64 }
    }
}

/// Width of the band outside a window that counts against it.
pub fn penalty_band(win: &Window) -> usize {
    ((win.w.min(win.h) as f64 * 0.1).round() as usize).max(1)
}

/// All sliding windows in grid order: scale, then aspect ratio, then row, then column.
pub fn candidate_windows(width: usize, height: usize, cfg: &ProposalConfig) -> Result<Vec<Window>> {
    if width < 3 || height < 3 {
        bail!(Input, "image {width}x{height} is too small for edge scoring");
    }
    let short = width.min(height) as f64;
    let mut out = Vec::new();
    for &scale in &cfg.scales {
        for &ratio in &cfg.aspect_ratios {
            let side = scale * short;
            let w = ((side * ratio.sqrt()).round() as usize).min(width);
            let h = ((side / ratio.sqrt()).round() as usize).min(height);
            if w < 2 || h < 2 {
                bail!(Input, "image {width}x{height} is smaller than the {scale} window");
            }
            let (sx, sy) = ((w / 8).max(1), (h / 8).max(1));
            for y in (0..=height - h).step_by(sy) {
                for x in (0..=width - w).step_by(sx) {
                    out.push(Window { x, y, w, h });
                }
            }
        }
    }
    Ok(out)
}

/// Deterministic edge-density proposals; see the module docs.
pub fn generate_proposals(image: &RgbImage, image_id: &str, cfg: &ProposalConfig) -> Result<ProposalSet> {
    if cfg.top_n == 0 {
        bail!(Input, "top_n must be at least 1");
    }
    let (w, h) = (image.width(), image.height());
    let windows = candidate_windows(w, h, cfg)?;
    let mag = edge_magnitude(image);
    let integral = Integral::new(&mag, w, h);
    let raw: Vec<f64> = windows
        .iter()
        .map(|win| {
            // an object's edge response straddles its outline by one pixel
            let (ix0, iy0) = (win.x.saturating_sub(1), win.y.saturating_sub(1));
            let (ix1, iy1) = ((win.x + win.w + 1).min(w), (win.y + win.h + 1).min(h));
            let inside = integral.sum(ix0, iy0, ix1, iy1);
            let b = penalty_band(win);
            let (ox0, oy0) = (ix0.saturating_sub(b), iy0.saturating_sub(b));
            let (ox1, oy1) = ((ix1 + b).min(w), (iy1 + b).min(h));
            let ring = integral.sum(ox0, oy0, ox1, oy1) - inside;
            (inside - RING_WEIGHT * ring) / (2.0 * (win.w + win.h) as f64)
        })
        .collect();
    let best = raw.iter().copied().fold(0.0, f64::max);
    let scores: Vec<f64> = raw
        .iter()
        .map(|&s| if best > 0.0 { (s / best).max(PRIOR_FLOOR) } else { PRIOR_FLOOR })
        .collect();

    let mut order: Vec<usize> = (0..windows.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order.truncate(cfg.top_n);
    let picked = recycle(&order, cfg.top_n);
    ProposalSet::new(
        image_id,
        picked.iter().map(|&i| windows[i].to_box()).collect(),
        picked.iter().map(|&i| scores[i]).collect(),
    )
}

/// Repeat `items` cyclically from the front until there are `n` of them.
pub fn recycle<X: Clone>(items: &[X], n: usize) -> Vec<X> {
    if items.is_empty() {
        return Vec::new();
    }
    items.iter().cycle().take(n).cloned().collect()
}

/// Bin layout of `bbox` projected onto an `fh`×`fw` feature map of an
/// image of `image_size = (H, W)`. Starts round down, ends round up, and a
/// projection with no area collapses onto one cell.
pub fn roi_window(
    bbox: &BBox,
    feature_size: (usize, usize),
    image_size: (usize, usize),
    out: (usize, usize),
    batch: usize,
) -> Result<RoiWindow> {
    let (fh, fw) = feature_size;
    let (ih, iw) = image_size;
    if out.0 == 0 || out.1 == 0 {
        bail!(Dimension, "roi output size must be at least 1x1, got {:?}", out);
    }
    if fh == 0 || fw == 0 || ih == 0 || iw == 0 {
        bail!(Dimension, "empty feature map or image");
    }
    let span = |lo: f64, hi: f64, cells: usize, pixels: usize| {
        let scale = cells as f64 / pixels as f64;
        let start = ((lo * scale).floor().max(0.0) as usize).min(cells - 1);
        let end = ((hi * scale).ceil().max(0.0) as usize).clamp(start + 1, cells);
        (start, end)
    };
    let bins = |(start, end): (usize, usize), n: usize| -> Vec<(usize, usize)> {
        let len = end - start;
        (0..n).map(|j| (start + j * len / n, start + ((j + 1) * len).div_ceil(n))).collect()
    };
    Ok(RoiWindow {
        batch,
        rows: bins(span(bbox.y1, bbox.y2, fh, ih), out.0),
        cols: bins(span(bbox.x1, bbox.x2, fw, iw), out.1),
    })
}

/// Max-pool one region of a `c×h×w` feature map into `c×out.0×out.1`.
pub fn roi_pool<T: Float>(
    features: &Tensor<T>,
    bbox: &BBox,
    out: (usize, usize),
    image_size: (usize, usize),
) -> Result<Tensor<T>> {
    let s = features.shape();
    if s.len() != 3 {
        bail!(Dimension, "roi_pool wants a c×h×w map, got {:?}", s);
    }
    let window = roi_window(bbox, (s[1], s[2]), image_size, out, 0)?;
    let mut tape = Tape::new();
    let f = tape.constant(features.clone().reshape(&[1, s[0], s[1], s[2]])?);
    let pooled = tape.roi_pool(f, &[window])?;
    tape.value(pooled).clone().reshape(&[s[0], out.0, out.1])
}

/// Pool every proposal, scale it by its score and stack: `|R|×c×out.0×out.1`.
pub fn weighted_roi_features<T: Float>(
    features: &Tensor<T>,
    boxes: &[BBox],
    scores: &[f64],
    out: (usize, usize),
    image_size: (usize, usize),
) -> Result<Tensor<T>> {
    if boxes.len() != scores.len() {
        bail!(Contract, "{} boxes but {} scores", boxes.len(), scores.len());
    }
    let s = features.shape();
    if s.len() != 3 {
        bail!(Dimension, "weighted_roi_features wants a c×h×w map, got {:?}", s);
    }
    let windows = boxes
        .iter()
        .map(|b| roi_window(b, (s[1], s[2]), image_size, out, 0))
        .collect::<Result<Vec<_>>>()?;
    let mut tape = Tape::new();
    let f = tape.constant(features.clone().reshape(&[1, s[0], s[1], s[2]])?);
    let pooled = tape.roi_pool(f, &windows)?;
    let weights: Vec<T> = scores.iter().map(|&v| T::lit(v)).collect();
    let weighted = tape.scale_rows(pooled, &weights)?;
    Ok(tape.value(weighted).clone())
}

/// Tape version of [`weighted_roi_features`] over a batch: `features` is
/// `B×C×h×w`, and image `b` contributes one weighted slice per box in
/// `boxes[b]`. Output is `(Σ_b |boxes[b]|)×C×out.0×out.1` in batch order.
pub fn weighted_roi_var<T: Float>(
    tape: &mut Tape<T>,
    features: Var,
    boxes: &[&[BBox]],
    weights: &[&[f64]],
    out: (usize, usize),
    image_size: (usize, usize),
) -> Result<Var> {
    let s = tape.shape(features).to_vec();
    if s.len() != 4 || s[0] != boxes.len() || boxes.len() != weights.len() {
        bail!(Contract, "{} box lists and {} weight lists for features {:?}", boxes.len(), weights.len(), s);
    }
    let mut windows = Vec::new();
    let mut scale = Vec::new();
    for (b, (bs, ws)) in boxes.iter().zip(weights).enumerate() {
        if bs.len() != ws.len() {
            bail!(Contract, "image {b}: {} boxes but {} scores", bs.len(), ws.len());
        }
        for (bx, &w) in bs.iter().zip(ws.iter()) {
            windows.push(roi_window(bx, (s[2], s[3]), image_size, out, b)?);
            scale.push(T::lit(w));
        }
    }
    let pooled = tape.roi_pool(features, &windows)?;
    tape.scale_rows(pooled, &scale)
}
