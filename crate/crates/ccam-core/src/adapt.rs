//! Test-time adaptation: label-free finetuning of the batch-norm affine
//! parameters, the foreground extractor, and the classifier on unlabeled
//! test images, driven by temperature-softened distillation from the
//! foreground head, entropy minimization on the counterfactual grid, and the
//! decoupled loss.

use crate::config::AdaptConfig;
use crate::counterfactual::{decoupled_loss, stack_images};
use crate::error::{Error, Result};
use crate::graph::{BnMode, Graph, TensorId};
use crate::model::{
    bind, classify, decouple_features, ensemble_predict, forward_backbone, ModelParams, Trainable,
};
use crate::optim::AdamState;
use crate::rng::CounterRng;
use crate::tensor::Tensor;
use std::path::Path;

/// Assemble the adaptation objective:
///
/// `beta * KL(softmax(z_o/T) || softmax(z_f/T))
///  + (1 - beta) * (mean entropy(z_fb) + delta * decoupled)`
///
/// No ground-truth labels are consumed; the decoupled term aligns each
/// foreground feature with the prototype of the model's own ensemble
/// prediction for that image.
#[allow(clippy::too_many_arguments)]
pub fn adaptation_loss(
    g: &mut Graph,
    z_o: TensorId,
    z_f: TensorId,
    z_fb: TensorId,
    f: TensorId,
    b: TensorId,
    w: TensorId,
    cfg: &AdaptConfig,
) -> Result<TensorId> {
    let kd = g.kl_temp_mean(z_o, z_f, cfg.temperature)?;
    let ent = g.entropy_mean(z_fb)?;
    let pseudo = pseudo_labels(g, z_o, z_f);
    let dec = decoupled_loss(g, f, b, w, &pseudo, true)?;
    g.add_n(&[
        (kd, cfg.beta),
        (ent, 1.0 - cfg.beta),
        (dec, (1.0 - cfg.beta) * cfg.delta),
    ])
}

/// Ensemble-argmax predictions per row (a discrete choice; no gradient
/// flows through it).
fn pseudo_labels(g: &Graph, z_o: TensorId, z_f: TensorId) -> Vec<usize> {
    let n = *g.value(z_o).shape().last().unwrap();
    let zo = g.value(z_o).data();
    let zf = g.value(z_f).data();
    let rows = zo.len() / n;
    (0..rows)
        .map(|r| ensemble_predict(&zo[r * n..(r + 1) * n], &zf[r * n..(r + 1) * n]).1)
        .collect()
}

#[derive(Debug, Clone)]
pub struct AdaptBatchStat {
    pub batch: usize,
    pub loss: f32,
}

pub struct AdaptOutput {
    pub params: ModelParams,
    pub batches: Vec<AdaptBatchStat>,
}

/// One (by default) online pass over seeded-shuffled test batches. Batch
/// norm runs in adapt mode (batch statistics, running statistics updated);
/// Adam updates touch only the batch-norm affine parameters, the foreground
/// extractor, and the classifier. Backbone conv weights are frozen. With
/// `episodic` set, learnables and running statistics reset to the entry
/// checkpoint after every batch.
pub fn adapt(
    images: &[Tensor],
    params: &ModelParams,
    cfg: &AdaptConfig,
    log_csv: Option<&Path>,
) -> Result<AdaptOutput> {
    if images.len() < 2 {
        return Err(Error::Data(
            "adapt: need at least two test images".to_string(),
        ));
    }
    if cfg.batch_size < 2 {
        return Err(Error::Config(format!(
            "adapt: batch_size must be >= 2, got {}",
            cfg.batch_size
        )));
    }
    let snapshot = params.clone();
    let mut params = params.clone();

    // Adam slots exist for every learnable; frozen slots simply never see a
    // gradient because their leaves do not participate in backward.
    let adapt_mask: Vec<bool> = params
        .named_learnables()
        .iter()
        .map(|(name, _)| ModelParams::in_adapt_group(name))
        .collect();
    let sizes: Vec<usize> = params
        .named_learnables()
        .iter()
        .zip(adapt_mask.iter())
        .filter(|(_, &m)| m)
        .map(|((_, t), _)| t.numel())
        .collect();
    let mut adam = AdamState::new(cfg.lr, &sizes);

    let mut rng = CounterRng::new(cfg.seed).derive(0x6164617074); // adapt stream
    let mut indices: Vec<usize> = (0..images.len()).collect();
    let mut stats = Vec::new();
    let mut batch_counter = 0usize;

    for _pass in 0..cfg.passes.max(1) {
        rng.shuffle(&mut indices);
        for chunk in indices.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let imgs: Vec<&Tensor> = chunk.iter().map(|&i| &images[i]).collect();
            let batch = stack_images(&imgs)?;

            let mut g = Graph::new();
            let bm = bind(&mut g, &params, Trainable::AdaptGroup);
            let x = g.leaf(batch);
            let maps = forward_backbone(&mut g, &bm, &mut params, x, BnMode::Adapt)?;
            let feats = decouple_features(&mut g, &bm, maps)?;
            let z_o = classify(&mut g, &bm, feats.original)?;
            let z_f = classify(&mut g, &bm, feats.foreground)?;
            let fb = g.pair_grid(feats.foreground, feats.background)?;
            let z_fb = classify(&mut g, &bm, fb)?;
            let loss = adaptation_loss(
                &mut g,
                z_o,
                z_f,
                z_fb,
                feats.foreground,
                feats.background,
                bm.cls_w,
                cfg,
            )?;
            let loss_val = g.value(loss).item();
            if !loss_val.is_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite adaptation loss at batch {batch_counter}"
                )));
            }
            g.backward(loss)?;

            let all_grads = bm.gradients(&g);
            let grads: Vec<&[f32]> = all_grads
                .iter()
                .zip(adapt_mask.iter())
                .filter(|(_, &m)| m)
                .map(|(v, _)| v.as_slice())
                .collect();
            {
                let mut learnables = params.learnables_mut();
                let mut views: Vec<&mut [f32]> = learnables
                    .iter_mut()
                    .zip(adapt_mask.iter())
                    .filter(|(_, &m)| m)
                    .map(|(t, _)| t.data_mut())
                    .collect();
                adam.step(&mut views, &grads)?;
            }

            stats.push(AdaptBatchStat {
                batch: batch_counter,
                loss: loss_val,
            });
            batch_counter += 1;

            if cfg.episodic {
                params = snapshot.clone();
            }
        }
    }

    if let Some(path) = log_csv {
        let mut text = String::from("batch,loss\n");
        for s in &stats {
            text.push_str(&format!("{},{}\n", s.batch, s.loss));
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    }

    Ok(AdaptOutput {
        params,
        batches: stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;

    fn rand_tensor(rng: &mut CounterRng, shape: Vec<usize>) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.normal()).collect()).unwrap()
    }

    fn test_cfg() -> AdaptConfig {
        AdaptConfig {
            seed: 7,
            beta: 0.2,
            delta: 0.012,
            temperature: 15.0,
            lr: 1e-4,
            batch_size: 4,
            passes: 1,
            episodic: false,
        }
    }

    #[test]
    fn beta_one_reduces_to_distillation() {
        let mut rng = CounterRng::new(2);
        let (bz, n, d) = (3, 4, 8);
        let mut g = Graph::new();
        let z_o = g.leaf(rand_tensor(&mut rng, vec![bz, n]));
        let z_f = g.leaf(rand_tensor(&mut rng, vec![bz, n]));
        let z_fb = g.leaf(rand_tensor(&mut rng, vec![bz * bz, n]));
        let f = g.leaf(rand_tensor(&mut rng, vec![bz, d]));
        let b = g.leaf(rand_tensor(&mut rng, vec![bz, d]));
        let w = g.leaf(rand_tensor(&mut rng, vec![n, d]));
        let mut cfg = test_cfg();
        cfg.beta = 1.0;
        let loss = adaptation_loss(&mut g, z_o, z_f, z_fb, f, b, w, &cfg).unwrap();
        let kd = g.kl_temp_mean(z_o, z_f, cfg.temperature).unwrap();
        assert_eq!(g.value(loss).item(), g.value(kd).item());
    }

    #[test]
    fn equal_heads_uniform_grid_closed_form() {
        // z_o == z_f kills the KD term; uniform grid logits give entropy
        // ln n; the decoupled term is zeroed via delta = 0. The loss is then
        // (1 - beta) * ln n.
        let (bz, n, d) = (2, 4, 8);
        let mut rng = CounterRng::new(3);
        let z: Tensor = rand_tensor(&mut rng, vec![bz, n]);
        let mut g = Graph::new();
        let z_o = g.leaf(z.clone());
        let z_f = g.leaf(z);
        let z_fb = g.leaf(Tensor::zeros(vec![bz * bz, n]));
        let f = g.leaf(rand_tensor(&mut rng, vec![bz, d]));
        let b = g.leaf(rand_tensor(&mut rng, vec![bz, d]));
        let w = g.leaf(rand_tensor(&mut rng, vec![n, d]));
        let mut cfg = test_cfg();
        cfg.beta = 0.3;
        cfg.delta = 0.0;
        let loss = adaptation_loss(&mut g, z_o, z_f, z_fb, f, b, w, &cfg).unwrap();
        let expect = (1.0 - cfg.beta) * (n as f32).ln();
        assert!(
            (g.value(loss).item() - expect).abs() < 1e-5,
            "{} vs {expect}",
            g.value(loss).item()
        );
    }

    #[test]
    fn adaptation_loss_nonnegative() {
        let mut rng = CounterRng::new(4);
        for _ in 0..20 {
            let (bz, n, d) = (3, 4, 8);
            let mut g = Graph::new();
            let z_o = g.leaf(rand_tensor(&mut rng, vec![bz, n]));
            let z_f = g.leaf(rand_tensor(&mut rng, vec![bz, n]));
            let z_fb = g.leaf(rand_tensor(&mut rng, vec![bz * bz, n]));
            let f = g.leaf(rand_tensor(&mut rng, vec![bz, d]));
            let b = g.leaf(rand_tensor(&mut rng, vec![bz, d]));
            let w = g.leaf(rand_tensor(&mut rng, vec![n, d]));
            let loss = adaptation_loss(&mut g, z_o, z_f, z_fb, f, b, w, &test_cfg()).unwrap();
            assert!(g.value(loss).item() >= 0.0);
        }
    }

    #[test]
    fn beta_one_gradients_ignore_grid_and_decouple_terms() {
        // With beta = 1 the delta knob must not influence any gradient.
        let rng = CounterRng::new(6);
        let (bz, n, d) = (3, 4, 8);
        let run = |delta: f32| -> Vec<f32> {
            let mut rng2 = rng.clone();
            let mut g = Graph::new();
            let z_src = rand_tensor(&mut rng2, vec![bz, d]);
            let w = g.leaf(rand_tensor(&mut rng2, vec![n, d]).with_grad());
            let bias = g.leaf(Tensor::zeros(vec![n]));
            let feats_f = g.leaf(z_src.clone().with_grad());
            let feats_b = g.leaf(rand_tensor(&mut rng2, vec![bz, d]).with_grad());
            let z_o = g.linear(feats_b, w, bias).unwrap();
            let z_f = g.linear(feats_f, w, bias).unwrap();
            let fb = g.pair_grid(feats_f, feats_b).unwrap();
            let z_fb = g.linear(fb, w, bias).unwrap();
            let mut cfg = test_cfg();
            cfg.beta = 1.0;
            cfg.delta = delta;
            let loss =
                adaptation_loss(&mut g, z_o, z_f, z_fb, feats_f, feats_b, w, &cfg).unwrap();
            g.backward(loss).unwrap();
            let mut out = g.grad(w).unwrap().to_vec();
            out.extend_from_slice(g.grad(feats_f).unwrap());
            out.extend_from_slice(g.grad(feats_b).unwrap());
            out
        };
        let a = run(0.0);
        let b = run(123.0);
        assert_eq!(a, b);
    }
}
