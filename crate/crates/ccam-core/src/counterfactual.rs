//! Counterfactual training: the decoupled feature loss, batch-level
//! counterfactual representation synthesis, the composite training objective
//! with ablation switches, and the training loop itself.

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::graph::{BnMode, Graph, TensorId};
use crate::model::{
    bind, classify, decouple_features, ensemble_predict, forward_backbone, ModelParams, Trainable,
};
use crate::optim::{poly_decay_lr, AdamState};
use crate::rng::CounterRng;
use crate::synth::Scene;
use crate::tensor::Tensor;
use std::path::Path;
use std::time::Instant;

/// The bz x bz grid of synthesized representations. Entry (i, j) pairs
/// foreground i with background j; row i inherits label y_i and the diagonal
/// reconstructs the original features.
#[derive(Debug, Clone)]
pub struct CounterfactualBatch {
    /// [bz, bz, d]
    pub features: Tensor,
    /// length bz; the label of every entry in row i
    pub labels: Vec<usize>,
}

impl CounterfactualBatch {
    pub fn batch_size(&self) -> usize {
        self.features.shape()[0]
    }

    /// Row-major labels for the flattened grid.
    pub fn grid_labels(&self) -> Vec<usize> {
        grid_labels(&self.labels)
    }
}

/// Labels for the flattened pairing grid: entry (i, j) carries y_i.
pub fn grid_labels(labels: &[usize]) -> Vec<usize> {
    let bz = labels.len();
    let mut out = Vec::with_capacity(bz * bz);
    for &y in labels {
        for _ in 0..bz {
            out.push(y);
        }
    }
    out
}

/// Plain-tensor counterfactual synthesis: FB[i][j] = F_i + B_j.
pub fn synthesize_counterfactuals(
    f: &Tensor,
    b: &Tensor,
    labels: &[usize],
) -> Result<CounterfactualBatch> {
    let (bz, d) = match (f.shape(), b.shape()) {
        ([fb, fd], [bb, bd]) if fb == bb && fd == bd => (*fb, *fd),
        _ => {
            return Err(Error::shape(format!(
                "synthesize_counterfactuals: mismatched inputs {:?} vs {:?}",
                f.shape(),
                b.shape()
            )))
        }
    };
    if labels.len() != bz {
        return Err(Error::shape(format!(
            "synthesize_counterfactuals: {bz} feature rows but {} labels",
            labels.len()
        )));
    }
    let mut data = vec![0.0f32; bz * bz * d];
    for i in 0..bz {
        let fr = &f.data()[i * d..(i + 1) * d];
        for j in 0..bz {
            let br = &b.data()[j * d..(j + 1) * d];
            let dst = &mut data[(i * bz + j) * d..(i * bz + j + 1) * d];
            for ((o, &fv), &bv) in dst.iter_mut().zip(fr.iter()).zip(br.iter()) {
                *o = fv + bv;
            }
        }
    }
    Ok(CounterfactualBatch {
        features: Tensor::new(vec![bz, bz, d], data)?,
        labels: labels.to_vec(),
    })
}

/// Feature decoupling objective, assembled in the graph from cosine
/// similarities against the classifier rows (the class prototypes):
///
/// - per image: |cos(F, p_i)| for i != y plus |cos(F, p_y) - 1|, averaged
///   over the batch (foreground alignment);
/// - mean |cos(B_i, F_j)| over batch pairs (all pairs by default, or only
///   i == j when `all_pairs` is false);
/// - per image: sum_i |cos(B, p_i)|, averaged over the batch.
///
/// Gradients flow into F, B, and W.
pub fn decoupled_loss(
    g: &mut Graph,
    f: TensorId,
    b: TensorId,
    w: TensorId,
    labels: &[usize],
    all_pairs: bool,
) -> Result<TensorId> {
    let (bz, _) = match *g.value(f).shape() {
        [bz, d] => (bz, d),
        ref s => return Err(Error::shape(format!("decoupled_loss: F must be [bz,d], got {s:?}"))),
    };
    let n = g.value(w).shape()[0];
    if labels.len() != bz {
        return Err(Error::shape(format!(
            "decoupled_loss: {bz} rows but {} labels",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= n) {
        return Err(Error::shape(format!(
            "decoupled_loss: label {bad} out of range for {n} classes"
        )));
    }
    let inv_bz = 1.0 / bz as f32;

    // foreground alignment: residual of cos(F, P) against one-hot targets
    let cm_fw = g.cosine_matrix(f, w)?;
    let mut onehot = vec![0.0f32; bz * n];
    for (i, &y) in labels.iter().enumerate() {
        onehot[i * n + y] = 1.0;
    }
    let target = g.leaf(Tensor::new(vec![bz, n], onehot)?);
    let fw_res = g.sub(cm_fw, target)?;
    let fw_abs = g.abs(fw_res);
    let fw_sum = g.sum_all(fw_abs);
    let align = g.scale(fw_sum, inv_bz);

    // background orthogonal to foregrounds
    let cm_bf = g.cosine_matrix(b, f)?;
    let bf_abs = g.abs(cm_bf);
    let bg_fg = if all_pairs {
        g.mean_all(bf_abs)
    } else {
        let mut diag = vec![0.0f32; bz * bz];
        for i in 0..bz {
            diag[i * bz + i] = 1.0;
        }
        let mask = g.leaf(Tensor::new(vec![bz, bz], diag)?);
        let masked = g.mul(bf_abs, mask)?;
        let s = g.sum_all(masked);
        g.scale(s, inv_bz)
    };

    // background orthogonal to prototypes
    let cm_bw = g.cosine_matrix(b, w)?;
    let bw_abs = g.abs(cm_bw);
    let bw_sum = g.sum_all(bw_abs);
    let bg_proto = g.scale(bw_sum, inv_bz);

    g.add_n(&[(align, 1.0), (bg_fg, 1.0), (bg_proto, 1.0)])
}

/// Handles to the assembled training objective and its term values.
pub struct TrainingLoss {
    pub total: TensorId,
    pub ce_original: f32,
    pub ce_foreground: f32,
    pub ce_counterfactual: Option<f32>,
    pub decouple: Option<f32>,
}

/// Composite objective: CE(z_o) + CE(z_f) [+ mean CE over the bz^2 grid]
/// [+ alpha * decoupled]. The switches drop terms entirely (the dropped
/// branch contributes neither value nor gradient).
#[allow(clippy::too_many_arguments)]
pub fn training_loss(
    g: &mut Graph,
    z_o: TensorId,
    z_f: TensorId,
    z_fb: Option<TensorId>,
    labels: &[usize],
    f: TensorId,
    b: TensorId,
    w: TensorId,
    cfg: &TrainConfig,
) -> Result<TrainingLoss> {
    let ce_o = g.cross_entropy_mean(z_o, labels)?;
    let ce_f = g.cross_entropy_mean(z_f, labels)?;
    let mut terms = vec![(ce_o, 1.0f32), (ce_f, 1.0)];
    let mut ce_fb_val = None;
    if cfg.use_counterfactual {
        let z_fb = z_fb.ok_or_else(|| {
            Error::Graph("training_loss: counterfactual term enabled but no grid logits".to_string())
        })?;
        let gl = grid_labels(labels);
        let ce_fb = g.cross_entropy_mean(z_fb, &gl)?;
        ce_fb_val = Some(g.value(ce_fb).item());
        terms.push((ce_fb, 1.0));
    }
    let mut dec_val = None;
    if cfg.use_decouple {
        let dec = decoupled_loss(g, f, b, w, labels, cfg.decouple_all_pairs)?;
        dec_val = Some(g.value(dec).item());
        terms.push((dec, cfg.alpha));
    }
    let total = g.add_n(&terms)?;
    Ok(TrainingLoss {
        total,
        ce_original: g.value(ce_o).item(),
        ce_foreground: g.value(ce_f).item(),
        ce_counterfactual: ce_fb_val,
        decouple: dec_val,
    })
}

#[derive(Debug, Clone)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f32,
    pub mean_ce_original: f32,
    pub mean_ce_foreground: f32,
    pub mean_ce_counterfactual: Option<f32>,
    pub mean_decouple: Option<f32>,
    pub train_acc: f32,
    pub seconds: f64,
}

pub struct TrainOutput {
    pub params: ModelParams,
    pub epochs: Vec<EpochStats>,
}

/// Batch images stacked into a [bz,3,S,S] tensor.
pub fn stack_images(images: &[&Tensor]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::shape("stack_images: empty batch".to_string()))?;
    let per = first.numel();
    let mut data = Vec::with_capacity(images.len() * per);
    for img in images {
        if img.shape() != first.shape() {
            return Err(Error::shape("stack_images: mixed image shapes".to_string()));
        }
        data.extend_from_slice(img.data());
    }
    let mut shape = vec![images.len()];
    shape.extend_from_slice(first.shape());
    Tensor::new(shape, data)
}

/// Train from scratch on the given scenes. Each epoch shuffles with the
/// seeded stream, iterates batches (a trailing batch smaller than two images
/// is dropped to keep batch statistics defined), and applies one Adam update
/// per batch under a polynomial learning-rate decay. Emits one line per
/// epoch on stdout and optionally appends to a `train_log.csv`.
pub fn train(
    scenes: &[Scene],
    n_classes: usize,
    cfg: &TrainConfig,
    log_csv: Option<&Path>,
) -> Result<TrainOutput> {
    if scenes.is_empty() {
        return Err(Error::Data("train: empty training split".to_string()));
    }
    if cfg.batch_size < 2 {
        return Err(Error::Config(format!(
            "train: batch_size must be >= 2, got {}",
            cfg.batch_size
        )));
    }
    if let Some(s) = scenes.iter().find(|s| s.fg_class >= n_classes) {
        return Err(Error::Mismatch(format!(
            "train: scene '{}' has class {} but the model expects < {n_classes}",
            s.id, s.fg_class
        )));
    }

    let mut params = ModelParams::init(cfg.seed, n_classes, 64)?;
    let sizes: Vec<usize> = params
        .named_learnables()
        .iter()
        .map(|(_, t)| t.numel())
        .collect();
    let mut adam = AdamState::new(cfg.lr, &sizes);
    let mut rng = CounterRng::new(cfg.seed).derive(0x747261696e); // shuffle stream
    let mut indices: Vec<usize> = (0..scenes.len()).collect();
    let mut stats = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        adam.lr = poly_decay_lr(cfg.lr, epoch, cfg.epochs);
        rng.shuffle(&mut indices);

        let mut sum_loss = 0.0f64;
        let mut sum_ce_o = 0.0f64;
        let mut sum_ce_f = 0.0f64;
        let mut sum_ce_fb = 0.0f64;
        let mut sum_dec = 0.0f64;
        let mut batches = 0usize;
        let mut correct = 0usize;
        let mut seen = 0usize;

        for (batch_idx, chunk) in indices.chunks(cfg.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let bz = chunk.len();
            let labels: Vec<usize> = chunk.iter().map(|&i| scenes[i].fg_class).collect();
            let imgs: Vec<&Tensor> = chunk.iter().map(|&i| &scenes[i].image).collect();
            let images = stack_images(&imgs)?;

            let mut g = Graph::new();
            let bm = bind(&mut g, &params, Trainable::All);
            let x = g.leaf(images);
            let maps = forward_backbone(&mut g, &bm, &mut params, x, BnMode::Train)?;
            let feats = decouple_features(&mut g, &bm, maps)?;
            let z_o = classify(&mut g, &bm, feats.original)?;
            let z_f = classify(&mut g, &bm, feats.foreground)?;
            let z_fb = if cfg.use_counterfactual {
                let fb = g.pair_grid(feats.foreground, feats.background)?;
                Some(classify(&mut g, &bm, fb)?)
            } else {
                None
            };
            let loss = training_loss(
                &mut g,
                z_o,
                z_f,
                z_fb,
                &labels,
                feats.foreground,
                feats.background,
                bm.cls_w,
                cfg,
            )?;
            let loss_val = g.value(loss.total).item();
            if !loss_val.is_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite training loss at epoch {epoch}, batch {batch_idx}"
                )));
            }
            g.backward(loss.total)?;
            let grads = bm.gradients(&g);
            {
                let mut learnables = params.learnables_mut();
                let mut views: Vec<&mut [f32]> =
                    learnables.iter_mut().map(|t| t.data_mut()).collect();
                let grad_views: Vec<&[f32]> = grads.iter().map(|v| v.as_slice()).collect();
                adam.step(&mut views, &grad_views)?;
            }

            // train-mode ensemble accuracy over the batch
            let zo = g.value(z_o).data();
            let zf = g.value(z_f).data();
            for (r, &y) in labels.iter().enumerate() {
                let (_, pred) =
                    ensemble_predict(&zo[r * n_classes..(r + 1) * n_classes], &zf[r * n_classes..(r + 1) * n_classes]);
                correct += (pred == y) as usize;
            }
            seen += bz;

            sum_loss += loss_val as f64;
            sum_ce_o += loss.ce_original as f64;
            sum_ce_f += loss.ce_foreground as f64;
            sum_ce_fb += loss.ce_counterfactual.unwrap_or(0.0) as f64;
            sum_dec += loss.decouple.unwrap_or(0.0) as f64;
            batches += 1;
        }

        if batches == 0 {
            return Err(Error::Data(
                "train: no batch of size >= 2 could be formed".to_string(),
            ));
        }
        let nb = batches as f64;
        let stat = EpochStats {
            epoch,
            mean_loss: (sum_loss / nb) as f32,
            mean_ce_original: (sum_ce_o / nb) as f32,
            mean_ce_foreground: (sum_ce_f / nb) as f32,
            mean_ce_counterfactual: cfg.use_counterfactual.then(|| (sum_ce_fb / nb) as f32),
            mean_decouple: cfg.use_decouple.then(|| (sum_dec / nb) as f32),
            train_acc: correct as f32 / seen as f32,
            seconds: start.elapsed().as_secs_f64(),
        };
        println!(
            "epoch {:>3}  loss {:.4}  ce_o {:.4}  ce_f {:.4}  ce_fb {}  dec {}  acc {:.4}  lr {:.6}  {:.1}s",
            stat.epoch,
            stat.mean_loss,
            stat.mean_ce_original,
            stat.mean_ce_foreground,
            stat.mean_ce_counterfactual
                .map_or("   -  ".to_string(), |v| format!("{v:.4}")),
            stat.mean_decouple
                .map_or("   -  ".to_string(), |v| format!("{v:.4}")),
            stat.train_acc,
            adam.lr,
            stat.seconds
        );
        stats.push(stat);
    }

    if let Some(path) = log_csv {
        let mut text = String::from("epoch,mean_loss,train_acc,seconds\n");
        for s in &stats {
            text.push_str(&format!(
                "{},{},{},{:.3}\n",
                s.epoch, s.mean_loss, s.train_acc, s.seconds
            ));
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    }

    Ok(TrainOutput {
        params,
        epochs: stats,
    })
}
