//! Brute-force reference implementations of the localization metrics,
//! written independently of the library code paths they check: recursive
//! flood fill instead of an explicit stack, direct per-threshold pixel
//! counting instead of histogram pooling.

use ccam_core::eval::BBox;
use ccam_core::rng::CounterRng;
use ccam_core::tensor::Tensor;

/// Largest 8-connected component box by exhaustive labeling; ties by the
/// smallest first-pixel in row-major order. Falls back to the 1x1 argmax box.
pub fn oracle_extract_bbox(map: &Tensor, tau: f32) -> BBox {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let data = map.data();
    let mut visited = vec![false; h * w];

    fn flood(
        data: &[f32],
        visited: &mut [bool],
        h: usize,
        w: usize,
        y: usize,
        x: usize,
        tau: f32,
        pixels: &mut Vec<(usize, usize)>,
    ) {
        if visited[y * w + x] || data[y * w + x] < tau {
            return;
        }
        visited[y * w + x] = true;
        pixels.push((y, x));
        for dy in -1i32..=1 {
            for dx in -1i32..=1 {
                if dy == 0 && dx == 0 {
                    continue;
                }
                let ny = y as i32 + dy;
                let nx = x as i32 + dx;
                if ny >= 0 && ny < h as i32 && nx >= 0 && nx < w as i32 {
                    flood(data, visited, h, w, ny as usize, nx as usize, tau, pixels);
                }
            }
        }
    }

    let mut best: Option<Vec<(usize, usize)>> = None;
    for y in 0..h {
        for x in 0..w {
            if !visited[y * w + x] && data[y * w + x] >= tau {
                let mut pixels = Vec::new();
                flood(data, &mut visited, h, w, y, x, tau, &mut pixels);
                let replace = match &best {
                    None => true,
                    Some(b) => pixels.len() > b.len(),
                };
                if replace {
                    best = Some(pixels);
                }
            }
        }
    }
    match best {
        Some(pixels) => {
            let x0 = pixels.iter().map(|&(_, x)| x).min().unwrap();
            let x1 = pixels.iter().map(|&(_, x)| x).max().unwrap();
            let y0 = pixels.iter().map(|&(y, _)| y).min().unwrap();
            let y1 = pixels.iter().map(|&(y, _)| y).max().unwrap();
            BBox { x0, y0, x1, y1 }
        }
        None => {
            let mut arg = 0usize;
            for (i, &v) in data.iter().enumerate() {
                if v > data[arg] {
                    arg = i;
                }
            }
            BBox {
                x0: arg % w,
                y0: arg / w,
                x1: arg % w,
                y1: arg / w,
            }
        }
    }
}

/// IoU by explicitly counting member pixels of each box.
pub fn oracle_iou(a: &BBox, b: &BBox, bound: usize) -> f32 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for y in 0..bound {
        for x in 0..bound {
            let in_a = x >= a.x0 && x <= a.x1 && y >= a.y0 && y <= a.y1;
            let in_b = x >= b.x0 && x <= b.x1 && y >= b.y0 && y <= b.y1;
            inter += (in_a && in_b) as usize;
            union += (in_a || in_b) as usize;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f32 / union as f32
    }
}

/// MaxBoxAccV2 by sweeping every grid threshold and recomputing every box
/// and IoU from scratch with the oracle primitives.
pub fn oracle_max_box_acc_v2(maps: &[Tensor], gts: &[BBox], bound: usize) -> f32 {
    let grid: Vec<f32> = (0..100).map(|k| k as f32 / 100.0).collect();
    let levels = [0.3f32, 0.5, 0.7];
    let mut total = 0.0f64;
    for &level in &levels {
        let mut best = 0.0f64;
        for &tau in &grid {
            let mut hits = 0usize;
            for (map, gt) in maps.iter().zip(gts.iter()) {
                let b = oracle_extract_bbox(map, tau);
                if oracle_iou(&b, gt, bound) >= level {
                    hits += 1;
                }
            }
            best = best.max(hits as f64 / maps.len() as f64);
        }
        total += best;
    }
    (total / levels.len() as f64) as f32
}

/// PxAP by counting every pixel at every threshold directly and integrating
/// precision over recall with the step rule.
pub fn oracle_pxap(maps: &[Tensor], masks: &[Tensor]) -> f32 {
    let grid: Vec<f32> = (0..100).map(|k| k as f32 / 100.0).collect();
    let total_fg: u64 = masks
        .iter()
        .map(|m| m.data().iter().filter(|&&v| v >= 0.5).count() as u64)
        .sum();
    assert!(total_fg > 0, "oracle_pxap: no foreground");
    // walk thresholds from high to low so recall ascends
    let mut ap = 0.0f64;
    let mut prev_recall = 0.0f64;
    for &tau in grid.iter().rev() {
        let mut tp = 0u64;
        let mut pos = 0u64;
        for (map, mask) in maps.iter().zip(masks.iter()) {
            for (&v, &m) in map.data().iter().zip(mask.data().iter()) {
                if v >= tau {
                    pos += 1;
                    if m >= 0.5 {
                        tp += 1;
                    }
                }
            }
        }
        let recall = tp as f64 / total_fg as f64;
        let precision = if pos > 0 { tp as f64 / pos as f64 } else { 0.0 };
        ap += precision * (recall - prev_recall);
        prev_recall = recall;
    }
    ap as f32
}

/// A random 8x8 map whose values are quantized to the threshold-grid scale
/// half the time (exercises the v == tau boundary), with occasional flat
/// zero maps (exercises the degenerate box rule).
pub fn random_map(rng: &mut CounterRng, side: usize) -> Tensor {
    let kind = rng.below(4);
    let data: Vec<f32> = match kind {
        0 => vec![0.0; side * side],
        1 => (0..side * side)
            .map(|_| (rng.below(101) as f32) / 100.0)
            .collect(),
        _ => (0..side * side).map(|_| rng.next_f32()).collect(),
    };
    Tensor::new(vec![side, side], data).unwrap()
}

pub fn random_box(rng: &mut CounterRng, side: usize) -> BBox {
    let x0 = rng.below(side);
    let y0 = rng.below(side);
    let x1 = x0 + rng.below(side - x0);
    let y1 = y0 + rng.below(side - y0);
    BBox { x0, y0, x1, y1 }
}

pub fn random_mask(rng: &mut CounterRng, side: usize) -> Tensor {
    let data: Vec<f32> = (0..side * side)
        .map(|_| if rng.next_f32() < 0.3 { 1.0 } else { 0.0 })
        .collect();
    Tensor::new(vec![side, side], data).unwrap()
}
