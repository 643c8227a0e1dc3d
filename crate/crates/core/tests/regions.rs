mod common;

use common::oracles::{area_iou, greedy_nms, scan_roi_pool};
use distillwsd::image::RgbImage;
use distillwsd::regions::*;
use distillwsd::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    let x1 = rng.gen_range(0.0..50.0);
    let y1 = rng.gen_range(0.0..50.0);
    BBox::new(x1, y1, x1 + rng.gen_range(1.0..14.0), y1 + rng.gen_range(1.0..14.0)).unwrap()
}

#[test]
fn nms_matches_greedy_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..1000 {
        let n = rng.gen_range(1..=50);
        let boxes: Vec<BBox> = (0..n).map(|_| random_box(&mut rng)).collect();
        // coarse scores so ties occur
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..8) as f64 / 8.0).collect();
        let thresh = rng.gen_range(0.1..0.9);
        let got = nms(&boxes, &scores, thresh).unwrap();
        assert_eq!(got, greedy_nms(&boxes, &scores, thresh), "trial {trial}");
        for (i, &a) in got.iter().enumerate() {
            for &b in &got[i + 1..] {
                assert!(iou(&boxes[a], &boxes[b]) <= thresh);
            }
        }
    }
}

#[test]
fn nms_small_cases() {
    let a = BBox::new(0.0, 0.0, 4.0, 4.0).unwrap();
    assert_eq!(nms(&[a], &[0.3], 0.4).unwrap(), vec![0]);
    assert_eq!(nms(&[a, a], &[0.9, 0.8], 0.4).unwrap(), vec![0]);
    assert_eq!(nms(&[a, a], &[0.8, 0.8], 0.4).unwrap(), vec![0]);
}

#[test]
fn iou_hand_values() {
    let a = BBox::new(0.0, 0.0, 2.0, 2.0).unwrap();
    let b = BBox::new(1.0, 0.0, 3.0, 2.0).unwrap();
    assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(iou(&a, &a), 1.0);
    assert_eq!(iou(&a, &BBox::new(5.0, 5.0, 6.0, 6.0).unwrap()), 0.0);
}

#[test]
fn iou_symmetric_and_scale_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..2000 {
        let (a, b) = (random_box(&mut rng), random_box(&mut rng));
        let v = iou(&a, &b);
        assert!((0.0..=1.0).contains(&v));
        assert_eq!(v, iou(&b, &a));
        let s = rng.gen_range(0.25..4.0);
        assert!((iou(&a.scaled(s, s), &b.scaled(s, s)) - v).abs() < 1e-12);
        assert!((v - area_iou(&a, &b)).abs() < 1e-12);
    }
}

#[test]
fn roi_pool_hand_cases() {
    let f = Tensor::<f64>::from_f64(&[1, 4, 4], &(1..=16).map(f64::from).collect::<Vec<_>>()).unwrap();
    let full = BBox::new(0.0, 0.0, 4.0, 4.0).unwrap();
    let q = roi_pool(&f, &full, (2, 2), (4, 4)).unwrap();
    assert_eq!(q.to_f64_vec(), vec![6.0, 8.0, 14.0, 16.0]);
    let g = roi_pool(&f, &full, (1, 1), (4, 4)).unwrap();
    assert_eq!(g.to_f64_vec(), vec![16.0]);
    // one pixel at row 2, column 1 holds 10
    let px = BBox::new(1.0, 2.0, 2.0, 3.0).unwrap();
    let p = roi_pool(&f, &px, (3, 3), (4, 4)).unwrap();
    assert!(p.data().iter().all(|&v| v == 10.0));
}

#[test]
fn roi_pool_matches_scan_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..1000 {
        let (c, h, w) = (rng.gen_range(1..4), rng.gen_range(1..12), rng.gen_range(1..12));
        let image = (rng.gen_range(h..=8 * h), rng.gen_range(w..=8 * w));
        let map: Vec<f64> = (0..c * h * w).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let x1 = rng.gen_range(0.0..image.1 as f64 - 0.5);
        let y1 = rng.gen_range(0.0..image.0 as f64 - 0.5);
        let bbox = BBox::new(x1, y1, rng.gen_range(x1 + 0.1..=image.1 as f64), rng.gen_range(y1 + 0.1..=image.0 as f64)).unwrap();
        let out = (rng.gen_range(1..6), rng.gen_range(1..6));
        let f = Tensor::<f64>::from_f64(&[c, h, w], &map).unwrap();
        let got = roi_pool(&f, &bbox, out, image).unwrap();
        assert_eq!(got.to_f64_vec(), scan_roi_pool(&map, (c, h, w), &bbox, out, image), "{bbox:?} {out:?} on {h}x{w}");
    }
}

#[test]
fn roi_pool_scales_box_to_feature_map() {
    // 8×8 image over a 4×4 map: the right half of the image is columns 2..4
    let f = Tensor::<f64>::from_f64(&[1, 4, 4], &(1..=16).map(f64::from).collect::<Vec<_>>()).unwrap();
    let right = BBox::new(4.0, 0.0, 8.0, 8.0).unwrap();
    let p = roi_pool(&f, &right, (1, 2), (8, 8)).unwrap();
    assert_eq!(p.to_f64_vec(), vec![15.0, 16.0]);
}

#[test]
fn roi_pool_output_stays_within_map_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let data: Vec<f64> = (0..2 * 16 * 16).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let f = Tensor::<f64>::from_f64(&[2, 16, 16], &data).unwrap();
    for _ in 0..200 {
        let b = random_box(&mut rng);
        let p = roi_pool(&f, &b, (7, 7), (64, 64)).unwrap();
        assert_eq!(p.shape(), &[2, 7, 7]);
        for c in 0..2 {
            let max = data[c * 256..(c + 1) * 256].iter().copied().fold(f64::MIN, f64::max);
            let min = data[c * 256..(c + 1) * 256].iter().copied().fold(f64::MAX, f64::min);
            assert!(p.data()[c * 49..(c + 1) * 49].iter().all(|&v| v >= min && v <= max));
        }
    }
}

#[test]
fn weighted_roi_features_scale_each_slice() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let data: Vec<f64> = (0..3 * 8 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let f = Tensor::<f64>::from_f64(&[3, 8, 8], &data).unwrap();
    let boxes = [random_box(&mut rng), random_box(&mut rng)];
    let w = weighted_roi_features(&f, &boxes, &[0.5, 2.0], (2, 2), (64, 64)).unwrap();
    assert_eq!(w.shape(), &[2, 3, 2, 2]);
    for (r, (b, s)) in boxes.iter().zip([0.5, 2.0]).enumerate() {
        let plain = roi_pool(&f, b, (2, 2), (64, 64)).unwrap();
        for (x, y) in w.data()[r * 12..(r + 1) * 12].iter().zip(plain.data()) {
            assert_eq!(*x, s * y);
        }
    }
    let zero = weighted_roi_features(&f, &boxes[..1], &[0.0], (2, 2), (64, 64)).unwrap();
    assert!(zero.data().iter().all(|&v| v == 0.0));
}

#[test]
fn uniform_image_gives_floor_scores_in_grid_order() {
    let img = RgbImage::filled(32, 32, [90, 90, 90]);
    let cfg = ProposalConfig { top_n: 20, ..Default::default() };
    let p = generate_proposals(&img, "u", &cfg).unwrap();
    assert!(p.prior_scores.iter().all(|&s| s == PRIOR_FLOOR));
    let grid = candidate_windows(32, 32, &cfg).unwrap();
    let expect: Vec<BBox> = grid[..20].iter().map(|w| w.to_box()).collect();
    assert_eq!(p.boxes, expect);
}

#[test]
fn recycling_repeats_from_the_front() {
    assert_eq!(recycle(&["w0", "w1", "w2"], 5), vec!["w0", "w1", "w2", "w0", "w1"]);
}

/// Score every window by direct summation over the edge map.
fn exhaustive_scores(img: &RgbImage, cfg: &ProposalConfig) -> Vec<(BBox, f64)> {
    let (w, h) = (img.width(), img.height());
    let mag = edge_magnitude(img);
    let sum = |x0: usize, y0: usize, x1: usize, y1: usize| {
        let mut s = 0.0;
        for y in y0..y1 {
            for x in x0..x1 {
                s += mag[y * w + x];
            }
        }
        s
    };
    let mut out = Vec::new();
    for win in candidate_windows(w, h, cfg).unwrap() {
        let (ix0, iy0) = (win.x.saturating_sub(1), win.y.saturating_sub(1));
        let (ix1, iy1) = ((win.x + win.w + 1).min(w), (win.y + win.h + 1).min(h));
        let inside = sum(ix0, iy0, ix1, iy1);
        let b = penalty_band(&win);
        let outer = sum(ix0.saturating_sub(b), iy0.saturating_sub(b), (ix1 + b).min(w), (iy1 + b).min(h));
        let score = (inside - RING_WEIGHT * (outer - inside)) / (2.0 * (win.w + win.h) as f64);
        out.push((win.to_box(), score));
    }
    out
}

#[test]
fn high_contrast_square_is_found() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let cfg = ProposalConfig::default();
    for _ in 0..100 {
        let side = rng.gen_range(14..30);
        // a square flush with the border shows only two edges
        let (x0, y0) = (rng.gen_range(2..62 - side), rng.gen_range(2..62 - side));
        let mut img = RgbImage::filled(64, 64, [20, 20, 20]);
        for y in y0..y0 + side {
            for x in x0..x0 + side {
                img.put(x, y, [240, 240, 240]);
            }
        }
        let truth = BBox::new(x0 as f64, y0 as f64, (x0 + side) as f64, (y0 + side) as f64).unwrap();
        let p = generate_proposals(&img, "sq", &cfg).unwrap();
        let scored = exhaustive_scores(&img, &cfg);
        let best = scored.iter().map(|s| s.1).fold(f64::MIN, f64::max);
        let top = scored.iter().find(|s| s.0 == p.boxes[0]).unwrap().1;
        // equal up to summation order
        assert!(top >= best - 1e-9);
        assert!(iou(&p.boxes[0], &truth) >= 0.5, "{truth:?}: best proposal {:?}", p.boxes[0]);
    }
}
