//! Localization metrics: CAM-to-box extraction, IoU, the Top-1/GT-known
//! accuracy suite, MaxBoxAccV2, PxAP, a background-activation diagnostic,
//! and the end-to-end evaluation pass over a dataset split.

use crate::config::EvalConfig;
use crate::error::{Error, Result};
use crate::graph::{BnMode, Graph};
use crate::model::{
    bind, classify, combine_cams, compute_all_cams, decouple_features, ensemble_predict,
    forward_backbone, rank_classes, CamSource, LocalizationMap, ModelParams, Trainable,
};
use crate::pnm::{self, GrayImage, RgbImage};
use crate::synth::Scene;
use crate::tensor::Tensor;
use std::path::Path;

/// Axis-aligned box with inclusive pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn area(&self) -> usize {
        (self.x1 - self.x0 + 1) * (self.y1 - self.y0 + 1)
    }
}

/// The 100-value score threshold grid 0.00..0.99 used by MaxBoxAccV2 and
/// PxAP.
pub fn threshold_grid() -> Vec<f32> {
    (0..100).map(|k| k as f32 / 100.0).collect()
}

pub const IOU_LEVELS: [f32; 3] = [0.3, 0.5, 0.7];

/// Binarize a normalized map at `tau`, label 8-connected components, and
/// return the tight box of the largest one (ties break to the component
/// first reached in row-major order). If nothing passes the threshold, the
/// box degenerates to the single pixel holding the map's maximum (first in
/// row-major order on ties).
pub fn extract_bbox(h_norm: &Tensor, tau: f32) -> BBox {
    let (h, w) = (h_norm.shape()[0], h_norm.shape()[1]);
    let data = h_norm.data();
    let mut labels = vec![0u32; h * w];
    let mut next = 1u32;
    let mut best_label = 0u32;
    let mut best_area = 0usize;
    let mut stack: Vec<usize> = Vec::new();
    for start in 0..h * w {
        if data[start] < tau || labels[start] != 0 {
            continue;
        }
        let label = next;
        next += 1;
        let mut area = 0usize;
        labels[start] = label;
        stack.push(start);
        while let Some(p) = stack.pop() {
            area += 1;
            let (py, px) = (p / w, p % w);
            let y_lo = py.saturating_sub(1);
            let y_hi = (py + 1).min(h - 1);
            let x_lo = px.saturating_sub(1);
            let x_hi = (px + 1).min(w - 1);
            for ny in y_lo..=y_hi {
                for nx in x_lo..=x_hi {
                    let q = ny * w + nx;
                    if labels[q] == 0 && data[q] >= tau {
                        labels[q] = label;
                        stack.push(q);
                    }
                }
            }
        }
        if area > best_area {
            best_area = area;
            best_label = label;
        }
    }

    if best_label == 0 {
        // Degenerate: nothing passed. Single-pixel box at the argmax.
        let mut arg = 0usize;
        for (i, &v) in data.iter().enumerate() {
            if v > data[arg] {
                arg = i;
            }
        }
        let (y, x) = (arg / w, arg % w);
        return BBox {
            x0: x,
            y0: y,
            x1: x,
            y1: y,
        };
    }

    let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0usize, 0usize);
    for y in 0..h {
        for x in 0..w {
            if labels[y * w + x] == best_label {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
        }
    }
    BBox { x0, y0, x1, y1 }
}

/// Intersection over union with inclusive-pixel areas.
pub fn iou(a: &BBox, b: &BBox) -> f32 {
    let ix0 = a.x0.max(b.x0);
    let iy0 = a.y0.max(b.y0);
    let ix1 = a.x1.min(b.x1);
    let iy1 = a.y1.min(b.y1);
    if ix0 > ix1 || iy0 > iy1 {
        return 0.0;
    }
    let inter = (ix1 - ix0 + 1) * (iy1 - iy0 + 1);
    let union = a.area() + b.area() - inter;
    inter as f32 / union as f32
}

/// Top-1 classification, GT-known localization (IoU >= 0.5), and Top-1
/// localization (both at once) over aligned per-image lists.
pub fn accuracy_suite(
    preds: &[usize],
    boxes: &[BBox],
    gt_classes: &[usize],
    gt_boxes: &[BBox],
) -> Result<(f32, f32, f32)> {
    let n = preds.len();
    if boxes.len() != n || gt_classes.len() != n || gt_boxes.len() != n {
        return Err(Error::shape(format!(
            "accuracy_suite: misaligned lists ({n} preds, {} boxes, {} gt classes, {} gt boxes)",
            boxes.len(),
            gt_classes.len(),
            gt_boxes.len()
        )));
    }
    if n == 0 {
        return Err(Error::shape("accuracy_suite: empty input".to_string()));
    }
    let mut cls = 0usize;
    let mut loc = 0usize;
    let mut known = 0usize;
    for i in 0..n {
        let correct = preds[i] == gt_classes[i];
        let hit = iou(&boxes[i], &gt_boxes[i]) >= 0.5;
        cls += correct as usize;
        known += hit as usize;
        loc += (correct && hit) as usize;
    }
    Ok((
        cls as f32 / n as f32,
        loc as f32 / n as f32,
        known as f32 / n as f32,
    ))
}

/// Box accuracy maximized over the score-threshold grid, averaged over IoU
/// levels {0.3, 0.5, 0.7}.
pub fn max_box_acc_v2(maps: &[Tensor], gt_boxes: &[BBox]) -> Result<f32> {
    if maps.is_empty() || maps.len() != gt_boxes.len() {
        return Err(Error::shape(format!(
            "max_box_acc_v2: got {} maps and {} boxes",
            maps.len(),
            gt_boxes.len()
        )));
    }
    let grid = threshold_grid();
    // ious[t][i]: IoU of the box extracted from map i at grid[t].
    let mut ious = vec![vec![0.0f32; maps.len()]; grid.len()];
    for (i, (map, gt)) in maps.iter().zip(gt_boxes.iter()).enumerate() {
        for (t, &tau) in grid.iter().enumerate() {
            let b = extract_bbox(map, tau);
            ious[t][i] = iou(&b, gt);
        }
    }
    let mut acc_sum = 0.0f64;
    for &level in &IOU_LEVELS {
        let mut best = 0.0f64;
        for row in &ious {
            let hits = row.iter().filter(|&&v| v >= level).count();
            best = best.max(hits as f64 / maps.len() as f64);
        }
        acc_sum += best;
    }
    Ok((acc_sum / IOU_LEVELS.len() as f64) as f32)
}

/// Pixel average precision over the dataset-pooled precision/recall curve.
/// A pixel is predicted positive at threshold tau when its map value is
/// >= tau; points are integrated with the step rule over recall with an
/// implicit (recall = 0) start.
pub fn pxap(maps: &[Tensor], gt_masks: &[Tensor]) -> Result<f32> {
    if maps.is_empty() || maps.len() != gt_masks.len() {
        return Err(Error::shape(format!(
            "pxap: got {} maps and {} masks",
            maps.len(),
            gt_masks.len()
        )));
    }
    let grid = threshold_grid();
    let g = grid.len();
    // bucket j accumulates pixels whose value admits thresholds 0..=j
    let mut tp_add = vec![0u64; g];
    let mut pos_add = vec![0u64; g];
    let mut total_fg = 0u64;
    for (map, mask) in maps.iter().zip(gt_masks.iter()) {
        if map.shape() != mask.shape() {
            return Err(Error::shape(format!(
                "pxap: map shape {:?} != mask shape {:?}",
                map.shape(),
                mask.shape()
            )));
        }
        for (&v, &m) in map.data().iter().zip(mask.data().iter()) {
            let fg = m >= 0.5;
            total_fg += fg as u64;
            // largest j with grid[j] <= v, adjusted for float edges
            let mut j = ((v * 100.0).floor() as isize).clamp(0, g as isize - 1) as usize;
            while j + 1 < g && grid[j + 1] <= v {
                j += 1;
            }
            while grid[j] > v {
                if j == 0 {
                    break;
                }
                j -= 1;
            }
            if grid[j] <= v {
                tp_add[j] += fg as u64;
                pos_add[j] += 1;
            }
        }
    }
    if total_fg == 0 {
        return Err(Error::Data(
            "pxap: ground-truth masks contain no foreground pixels".to_string(),
        ));
    }
    // TP(k) / P(k) are suffix sums over buckets.
    let mut tp = vec![0u64; g];
    let mut pos = vec![0u64; g];
    let mut acc_tp = 0u64;
    let mut acc_pos = 0u64;
    for k in (0..g).rev() {
        acc_tp += tp_add[k];
        acc_pos += pos_add[k];
        tp[k] = acc_tp;
        pos[k] = acc_pos;
    }
    // Walk thresholds from high to low: recall ascends.
    let mut ap = 0.0f64;
    let mut prev_recall = 0.0f64;
    for k in (0..g).rev() {
        let recall = tp[k] as f64 / total_fg as f64;
        let precision = if pos[k] > 0 {
            tp[k] as f64 / pos[k] as f64
        } else {
            0.0
        };
        ap += precision * (recall - prev_recall);
        prev_recall = recall;
    }
    Ok(ap as f32)
}

/// Fraction of total map activation falling outside the ground-truth mask;
/// 0 when the map sums to 0.
pub fn background_activation_ratio(h_norm: &Tensor, mask: &Tensor) -> f32 {
    debug_assert_eq!(h_norm.shape(), mask.shape());
    let mut total = 0.0f64;
    let mut outside = 0.0f64;
    for (&v, &m) in h_norm.data().iter().zip(mask.data().iter()) {
        total += v as f64;
        if m < 0.5 {
            outside += v as f64;
        }
    }
    if total == 0.0 {
        0.0
    } else {
        (outside / total) as f32
    }
}

#[derive(Debug, Clone)]
pub struct PerImageRecord {
    pub id: String,
    pub pred: usize,
    pub fg_class: usize,
    pub iou: f32,
    pub bbox: BBox,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub top1_cls: f32,
    pub top1_loc: f32,
    pub gt_known: f32,
    pub maxboxaccv2: f32,
    pub pxap: f32,
    pub bg_activation_ratio: f32,
    pub per_image: Vec<PerImageRecord>,
}

impl EvalReport {
    /// Aggregate rows for `metrics.csv`, in a fixed order.
    pub fn metric_rows(&self) -> Vec<(&'static str, f32)> {
        vec![
            ("top1_cls", self.top1_cls),
            ("top1_loc", self.top1_loc),
            ("gt_known", self.gt_known),
            ("maxboxaccv2", self.maxboxaccv2),
            ("pxap", self.pxap),
            ("bg_activation_ratio", self.bg_activation_ratio),
        ]
    }

    pub fn metrics_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        for (name, value) in self.metric_rows() {
            s.push_str(&format!("{name},{value}\n"));
        }
        s
    }

    pub fn per_image_csv(&self) -> String {
        let mut s = String::from("id,pred,fg_class,iou,x0,y0,x1,y1\n");
        for r in &self.per_image {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.id, r.pred, r.fg_class, r.iou, r.bbox.x0, r.bbox.y0, r.bbox.x1, r.bbox.y1
            ));
        }
        s
    }
}

/// Per-image localization pipeline output: the ensemble prediction plus the
/// normalized localization map.
pub struct ImageEval {
    pub pred: usize,
    pub scores: Vec<f32>,
    pub map: LocalizationMap,
}

/// Run the inference pipeline on a single image tensor [3,S,S].
pub fn eval_image(params: &mut ModelParams, image: &Tensor, cfg: &EvalConfig) -> Result<ImageEval> {
    let s = image.shape()[1];
    let mut g = Graph::new();
    let bm = bind(&mut g, params, Trainable::None);
    let mut batched = Vec::with_capacity(image.numel());
    batched.extend_from_slice(image.data());
    let x = g.leaf(Tensor::new(vec![1, 3, s, s], batched)?);
    let maps = forward_backbone(&mut g, &bm, params, x, BnMode::Eval)?;
    let feats = decouple_features(&mut g, &bm, maps)?;
    let z_o = classify(&mut g, &bm, feats.original)?;
    let z_f = classify(&mut g, &bm, feats.foreground)?;
    let (scores, pred) = ensemble_predict(g.value(z_o).data(), g.value(z_f).data());

    let source = match cfg.cam_source {
        CamSource::Foreground => feats.fg_maps,
        CamSource::Backbone => feats.maps,
    };
    let src = g.value(source);
    let (d, h, w) = (src.shape()[1], src.shape()[2], src.shape()[3]);
    let maps3 = Tensor::new(vec![d, h, w], src.data().to_vec())?;
    let cams = compute_all_cams(&maps3, &params.cls_w)?;
    let ranking = rank_classes(&scores);
    let map = combine_cams(&cams, &ranking, cfg.omega_scheme, s)?;
    Ok(ImageEval { pred, scores, map })
}

/// Evaluate a split: per image, eval-mode forward, ensemble prediction,
/// rank-combined CAM, box extraction at the configured threshold; then all
/// aggregate metrics. Deterministic and order-independent.
pub fn evaluate(scenes: &[Scene], params: &ModelParams, cfg: &EvalConfig) -> Result<EvalReport> {
    if scenes.is_empty() {
        return Err(Error::Data("evaluate: empty split".to_string()));
    }
    if let Some(s) = scenes.iter().find(|s| s.fg_class >= params.n_classes) {
        return Err(Error::Mismatch(format!(
            "evaluate: scene '{}' has class {} but the checkpoint expects < {}",
            s.id, s.fg_class, params.n_classes
        )));
    }
    // Eval mode never mutates running statistics, but the forward signature
    // is uniform; work on a scratch copy.
    let mut scratch = params.clone();

    let mut order: Vec<usize> = (0..scenes.len()).collect();
    order.sort_by(|&a, &b| scenes[a].id.cmp(&scenes[b].id));

    let mut preds = vec![0usize; scenes.len()];
    let mut boxes = vec![
        BBox {
            x0: 0,
            y0: 0,
            x1: 0,
            y1: 0
        };
        scenes.len()
    ];
    let mut maps: Vec<Tensor> = vec![Tensor::scalar(0.0); scenes.len()];
    let mut bg_ratio_sum = 0.0f64;
    for &i in &order {
        let scene = &scenes[i];
        let ev = eval_image(&mut scratch, &scene.image, cfg)?;
        preds[i] = ev.pred;
        boxes[i] = extract_bbox(&ev.map.norm, cfg.seg_threshold);
        bg_ratio_sum += background_activation_ratio(&ev.map.norm, &scene.mask) as f64;
        maps[i] = ev.map.norm;
    }

    let gt_classes: Vec<usize> = scenes.iter().map(|s| s.fg_class).collect();
    let gt_boxes: Vec<BBox> = scenes.iter().map(|s| s.bbox).collect();
    let (top1_cls, top1_loc, gt_known) = accuracy_suite(&preds, &boxes, &gt_classes, &gt_boxes)?;
    // Sorted-id order keeps the aggregates independent of input ordering
    // (f32 accumulation order is fixed).
    let maps_sorted: Vec<Tensor> = order.iter().map(|&i| maps[i].clone()).collect();
    let gt_boxes_sorted: Vec<BBox> = order.iter().map(|&i| gt_boxes[i]).collect();
    let masks_sorted: Vec<Tensor> = order.iter().map(|&i| scenes[i].mask.clone()).collect();
    let maxboxaccv2 = max_box_acc_v2(&maps_sorted, &gt_boxes_sorted)?;
    let pxap_val = pxap(&maps_sorted, &masks_sorted)?;

    let per_image: Vec<PerImageRecord> = order
        .iter()
        .map(|&i| PerImageRecord {
            id: scenes[i].id.clone(),
            pred: preds[i],
            fg_class: scenes[i].fg_class,
            iou: iou(&boxes[i], &gt_boxes[i]),
            bbox: boxes[i],
        })
        .collect();

    Ok(EvalReport {
        top1_cls,
        top1_loc,
        gt_known,
        maxboxaccv2,
        pxap: pxap_val,
        bg_activation_ratio: (bg_ratio_sum / scenes.len() as f64) as f32,
        per_image,
    })
}

/// Write `cams/<id>.pgm` (the normalized map scaled to 0-255) and
/// `overlays/<id>.ppm` (the image blended 50% with a heat ramp, predicted
/// box in green, ground-truth box in red).
pub fn dump_cam(
    dir: &Path,
    scene: &Scene,
    map: &Tensor,
    pred_box: &BBox,
) -> Result<()> {
    let s = map.shape()[0];
    let cams_dir = dir.join("cams");
    let overlays_dir = dir.join("overlays");
    std::fs::create_dir_all(&cams_dir).map_err(|e| Error::io(&cams_dir, e))?;
    std::fs::create_dir_all(&overlays_dir).map_err(|e| Error::io(&overlays_dir, e))?;

    let gray: Vec<u8> = map
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    pnm::write_pgm(
        &cams_dir.join(format!("{}.pgm", scene.id)),
        &GrayImage {
            width: s,
            height: s,
            pixels: gray,
        },
    )?;

    let plane = s * s;
    let img = scene.image.data();
    let mut rgb = vec![0u8; plane * 3];
    for p in 0..plane {
        let v = map.data()[p].clamp(0.0, 1.0);
        // heat ramp: blue (cold) to red (hot)
        let heat = [v, 0.15 * v, 1.0 - v];
        for c in 0..3 {
            let blended = 0.5 * img[c * plane + p] + 0.5 * heat[c];
            rgb[p * 3 + c] = (blended.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    draw_box(&mut rgb, s, pred_box, [0, 255, 0]);
    draw_box(&mut rgb, s, &scene.bbox, [255, 0, 0]);
    pnm::write_ppm(
        &overlays_dir.join(format!("{}.ppm", scene.id)),
        &RgbImage {
            width: s,
            height: s,
            pixels: rgb,
        },
    )
}

fn draw_box(rgb: &mut [u8], s: usize, b: &BBox, color: [u8; 3]) {
    let mut put = |x: usize, y: usize| {
        let p = (y * s + x) * 3;
        rgb[p..p + 3].copy_from_slice(&color);
    };
    for x in b.x0..=b.x1.min(s - 1) {
        put(x, b.y0);
        put(x, b.y1.min(s - 1));
    }
    for y in b.y0..=b.y1.min(s - 1) {
        put(b.x0, y);
        put(b.x1.min(s - 1), y);
    }
}
