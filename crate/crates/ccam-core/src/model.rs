//! The convolutional model: a four-block backbone (conv3x3 -> batch norm ->
//! relu, max-pooled after the first three blocks), a two-convolution
//! foreground extractor, and a shared linear classifier whose weight rows
//! double as class prototypes. Also hosts feature decoupling (original /
//! foreground / background vectors), CAM computation, and rank-weighted CAM
//! combination.

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::graph::{softmax_row, BnMode, BnRunning, Graph, TensorId};
use crate::rng::CounterRng;
use crate::tensor::Tensor;

/// Which feature maps feed CAM computation: the foreground branch (default)
/// or the raw backbone output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CamSource {
    Foreground,
    Backbone,
}

impl std::str::FromStr for CamSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fg" => Ok(CamSource::Foreground),
            "backbone" => Ok(CamSource::Backbone),
            other => Err(Error::Config(format!(
                "cam_source must be 'fg' or 'backbone', got '{other}'"
            ))),
        }
    }
}

impl std::fmt::Display for CamSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CamSource::Foreground => "fg",
            CamSource::Backbone => "backbone",
        })
    }
}

/// Rank-weight scheme for combining per-class activation maps.
/// `Top1` keeps only the best-ranked class (vanilla CAM); `Linear` ramps from
/// +1 on the best class to -1 on the worst.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OmegaScheme {
    Top1,
    Linear,
}

impl OmegaScheme {
    /// Weight for rank r (1-based) among n ranked classes.
    pub fn weight(&self, rank: usize, n: usize) -> f32 {
        debug_assert!(rank >= 1 && rank <= n);
        match self {
            OmegaScheme::Top1 => {
                if rank == 1 {
                    1.0
                } else {
                    0.0
                }
            }
            OmegaScheme::Linear => {
                if n == 1 {
                    1.0
                } else {
                    1.0 - 2.0 * (rank as f32 - 1.0) / (n as f32 - 1.0)
                }
            }
        }
    }
}

impl std::str::FromStr for OmegaScheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "top1" => Ok(OmegaScheme::Top1),
            "linear" => Ok(OmegaScheme::Linear),
            other => Err(Error::Config(format!(
                "omega_scheme must be 'top1' or 'linear', got '{other}'"
            ))),
        }
    }
}

impl std::fmt::Display for OmegaScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OmegaScheme::Top1 => "top1",
            OmegaScheme::Linear => "linear",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub w: Tensor,
    pub b: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnLayer {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running: BnRunning,
}

/// All model state: learnable tensors plus batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub n_classes: usize,
    pub feat_dim: usize,
    pub blocks: Vec<(ConvLayer, BnLayer)>,
    pub fg1: ConvLayer,
    pub fg2: ConvLayer,
    pub cls_w: Tensor,
    pub cls_b: Tensor,
}

/// Which parameters participate in gradient updates when binding a model
/// into a graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainable {
    /// Everything learnable.
    All,
    /// Batch-norm affine parameters, the foreground extractor, and the
    /// classifier; backbone conv weights stay frozen.
    AdaptGroup,
    /// Nothing (inference).
    None,
}

fn he_normal(rng: &mut CounterRng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let std = (2.0 / fan_in as f32).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| rng.normal() * std).collect();
    Tensor::new(shape, data).unwrap()
}

impl ModelParams {
    /// He-normal conv/classifier weights, zero biases, identity batch norm.
    /// `n` is the class count, `d` the backbone output channel count (which
    /// is also the feature dimension shared by O, F, B and the classifier).
    pub fn init(seed: u64, n: usize, d: usize) -> Result<Self> {
        if n < 2 || d < 2 {
            return Err(Error::Config(format!(
                "model: need n >= 2 and d >= 2, got n={n}, d={d}"
            )));
        }
        let mut rng = CounterRng::new(seed).derive(0x6d6f64); // model stream
        let channels = [16usize, 32, d, d];
        let mut blocks = Vec::new();
        let mut c_in = 3usize;
        for &c_out in &channels {
            let conv = ConvLayer {
                w: he_normal(&mut rng, vec![c_out, c_in, 3, 3], c_in * 9),
                b: Tensor::zeros(vec![c_out]),
            };
            let bn = BnLayer {
                gamma: Tensor::full(vec![c_out], 1.0),
                beta: Tensor::zeros(vec![c_out]),
                running: BnRunning::new(c_out),
            };
            blocks.push((conv, bn));
            c_in = c_out;
        }
        let fg1 = ConvLayer {
            w: he_normal(&mut rng, vec![d, d, 3, 3], d * 9),
            b: Tensor::zeros(vec![d]),
        };
        let fg2 = ConvLayer {
            w: he_normal(&mut rng, vec![d, d, 3, 3], d * 9),
            b: Tensor::zeros(vec![d]),
        };
        let cls_w = he_normal(&mut rng, vec![n, d], d);
        let cls_b = Tensor::zeros(vec![n]);
        Ok(ModelParams {
            n_classes: n,
            feat_dim: d,
            blocks,
            fg1,
            fg2,
            cls_w,
            cls_b,
        })
    }

    /// Learnable tensors in a fixed order (the optimizer slot order).
    pub fn named_learnables(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, (conv, bn)) in self.blocks.iter().enumerate() {
            out.push((format!("backbone.{i}.conv.w"), &conv.w));
            out.push((format!("backbone.{i}.conv.b"), &conv.b));
            out.push((format!("backbone.{i}.bn.gamma"), &bn.gamma));
            out.push((format!("backbone.{i}.bn.beta"), &bn.beta));
        }
        out.push(("fg.0.w".to_string(), &self.fg1.w));
        out.push(("fg.0.b".to_string(), &self.fg1.b));
        out.push(("fg.1.w".to_string(), &self.fg2.w));
        out.push(("fg.1.b".to_string(), &self.fg2.b));
        out.push(("classifier.w".to_string(), &self.cls_w));
        out.push(("classifier.b".to_string(), &self.cls_b));
        out
    }

    pub fn learnables_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for (conv, bn) in self.blocks.iter_mut() {
            out.push(&mut conv.w);
            out.push(&mut conv.b);
            out.push(&mut bn.gamma);
            out.push(&mut bn.beta);
        }
        out.push(&mut self.fg1.w);
        out.push(&mut self.fg1.b);
        out.push(&mut self.fg2.w);
        out.push(&mut self.fg2.b);
        out.push(&mut self.cls_w);
        out.push(&mut self.cls_b);
        out
    }

    /// True if the named learnable belongs to the test-time adaptation group
    /// (batch-norm affine, foreground extractor, classifier).
    pub fn in_adapt_group(name: &str) -> bool {
        name.contains(".bn.") || name.starts_with("fg.") || name.starts_with("classifier.")
    }

    /// Everything that goes into a checkpoint: learnables plus batch-norm
    /// running statistics.
    pub fn checkpoint_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .named_learnables()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        for (i, (_, bn)) in self.blocks.iter().enumerate() {
            out.push((
                format!("backbone.{i}.bn.running_mean"),
                Tensor::new(vec![bn.running.mean.len()], bn.running.mean.clone()).unwrap(),
            ));
            out.push((
                format!("backbone.{i}.bn.running_var"),
                Tensor::new(vec![bn.running.var.len()], bn.running.var.clone()).unwrap(),
            ));
        }
        out
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let need = |name: &str| -> Result<&Tensor> {
            ck.get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor '{name}'")))
        };
        let cls_w = need("classifier.w")?.clone();
        let (n, d) = match *cls_w.shape() {
            [n, d] => (n, d),
            ref s => {
                return Err(Error::Checkpoint(format!(
                    "classifier.w has shape {s:?}, expected rank 2"
                )))
            }
        };
        let mut blocks = Vec::new();
        for i in 0.. {
            if ck.get(&format!("backbone.{i}.conv.w")).is_none() {
                break;
            }
            let conv = ConvLayer {
                w: need(&format!("backbone.{i}.conv.w"))?.clone(),
                b: need(&format!("backbone.{i}.conv.b"))?.clone(),
            };
            let bn = BnLayer {
                gamma: need(&format!("backbone.{i}.bn.gamma"))?.clone(),
                beta: need(&format!("backbone.{i}.bn.beta"))?.clone(),
                running: BnRunning {
                    mean: need(&format!("backbone.{i}.bn.running_mean"))?.data().to_vec(),
                    var: need(&format!("backbone.{i}.bn.running_var"))?.data().to_vec(),
                },
            };
            blocks.push((conv, bn));
        }
        if blocks.len() != 4 {
            return Err(Error::Checkpoint(format!(
                "expected 4 backbone blocks, found {}",
                blocks.len()
            )));
        }
        Ok(ModelParams {
            n_classes: n,
            feat_dim: d,
            blocks,
            fg1: ConvLayer {
                w: need("fg.0.w")?.clone(),
                b: need("fg.0.b")?.clone(),
            },
            fg2: ConvLayer {
                w: need("fg.1.w")?.clone(),
                b: need("fg.1.b")?.clone(),
            },
            cls_w,
            cls_b: need("classifier.b")?.clone(),
        })
    }
}

/// Graph handles for one bound copy of the model parameters.
pub struct BoundModel {
    pub conv: Vec<(TensorId, TensorId)>,
    pub bn: Vec<(TensorId, TensorId)>,
    pub fg1: (TensorId, TensorId),
    pub fg2: (TensorId, TensorId),
    pub cls_w: TensorId,
    pub cls_b: TensorId,
}

impl BoundModel {
    /// Gradients of all learnables in the `named_learnables` order (zeros
    /// where a parameter did not participate).
    pub fn gradients(&self, g: &Graph) -> Vec<Vec<f32>> {
        let mut ids = Vec::new();
        for i in 0..self.conv.len() {
            ids.push(self.conv[i].0);
            ids.push(self.conv[i].1);
            ids.push(self.bn[i].0);
            ids.push(self.bn[i].1);
        }
        ids.extend([self.fg1.0, self.fg1.1, self.fg2.0, self.fg2.1, self.cls_w, self.cls_b]);
        ids.iter()
            .map(|&id| {
                g.grad(id)
                    .map(|s| s.to_vec())
                    .unwrap_or_else(|| vec![0.0; g.value(id).numel()])
            })
            .collect()
    }
}

/// Insert every learnable as a graph leaf, marking gradient participation
/// per `trainable`.
pub fn bind(g: &mut Graph, params: &ModelParams, trainable: Trainable) -> BoundModel {
    let mut insert = |t: &Tensor, name_in_adapt: bool| -> TensorId {
        let mut t = t.clone();
        t.requires_grad = match trainable {
            Trainable::All => true,
            Trainable::AdaptGroup => name_in_adapt,
            Trainable::None => false,
        };
        g.leaf(t)
    };
    let mut conv = Vec::new();
    let mut bn = Vec::new();
    for (c, b) in params.blocks.iter() {
        conv.push((insert(&c.w, false), insert(&c.b, false)));
        bn.push((insert(&b.gamma, true), insert(&b.beta, true)));
    }
    let fg1 = (insert(&params.fg1.w, true), insert(&params.fg1.b, true));
    let fg2 = (insert(&params.fg2.w, true), insert(&params.fg2.b, true));
    let cls_w = insert(&params.cls_w, true);
    let cls_b = insert(&params.cls_b, true);
    BoundModel {
        conv,
        bn,
        fg1,
        fg2,
        cls_w,
        cls_b,
    }
}

/// Backbone feature maps X for a batch of images [bz,3,S,S] (S divisible by
/// 8): conv/bn/relu blocks with 2x max-pooling after blocks 1-3, yielding
/// [bz,d,S/8,S/8].
pub fn forward_backbone(
    g: &mut Graph,
    bm: &BoundModel,
    params: &mut ModelParams,
    images: TensorId,
    mode: BnMode,
) -> Result<TensorId> {
    let mut x = images;
    for i in 0..params.blocks.len() {
        let (w, b) = bm.conv[i];
        let (gamma, beta) = bm.bn[i];
        x = g.conv2d(x, w, b, 1, 1)?;
        x = g.batchnorm2d(x, gamma, beta, &mut params.blocks[i].1.running, mode)?;
        x = g.relu(x);
        if i < 3 {
            x = g.maxpool2d(x, 2, 2)?;
        }
    }
    let out = g.value(x);
    if !out.is_finite() {
        return Err(Error::Divergence(
            "backbone forward produced non-finite values".to_string(),
        ));
    }
    Ok(x)
}

/// Per-batch feature decomposition handles.
pub struct FeatureBundle {
    /// backbone maps X, [bz,d,h',w']
    pub maps: TensorId,
    /// foreground-branch maps X_f, [bz,d,h',w']
    pub fg_maps: TensorId,
    /// O = GAP(X), [bz,d]
    pub original: TensorId,
    /// F = GAP(X_f), [bz,d]
    pub foreground: TensorId,
    /// B = O - F, [bz,d]
    pub background: TensorId,
}

/// Split backbone maps into original/foreground/background features:
/// O = GAP(X), X_f = fg2(relu(fg1(X))), F = GAP(X_f), B = O - F.
pub fn decouple_features(g: &mut Graph, bm: &BoundModel, maps: TensorId) -> Result<FeatureBundle> {
    let original = g.global_avg_pool(maps)?;
    let h1 = g.conv2d(maps, bm.fg1.0, bm.fg1.1, 1, 1)?;
    let h1 = g.relu(h1);
    let fg_maps = g.conv2d(h1, bm.fg2.0, bm.fg2.1, 1, 1)?;
    let foreground = g.global_avg_pool(fg_maps)?;
    let background = g.sub(original, foreground)?;
    Ok(FeatureBundle {
        maps,
        fg_maps,
        original,
        foreground,
        background,
    })
}

/// Shared classifier: logits = W v + b. Used identically for O, F, and every
/// synthesized representation.
pub fn classify(g: &mut Graph, bm: &BoundModel, v: TensorId) -> Result<TensorId> {
    g.linear(v, bm.cls_w, bm.cls_b)
}

/// Average the two heads' probabilities and predict the argmax; ties break
/// to the lowest class index.
pub fn ensemble_predict(z_o: &[f32], z_f: &[f32]) -> (Vec<f32>, usize) {
    debug_assert_eq!(z_o.len(), z_f.len());
    let n = z_o.len();
    let mut s_o = vec![0.0f32; n];
    let mut s_f = vec![0.0f32; n];
    softmax_row(z_o, 1.0, &mut s_o);
    softmax_row(z_f, 1.0, &mut s_f);
    let s: Vec<f32> = s_o
        .iter()
        .zip(s_f.iter())
        .map(|(a, b)| 0.5 * (a + b))
        .collect();
    let mut pred = 0usize;
    for (i, &v) in s.iter().enumerate() {
        if v > s[pred] {
            pred = i;
        }
    }
    (s, pred)
}

/// Class ranking by descending score; equal scores keep ascending index
/// order (deterministic).
pub fn rank_classes(scores: &[f32]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx
}

/// Activation map for one class: M_i = sum_j W[i,j] * maps[j].
pub fn compute_cam(maps: &Tensor, w: &Tensor, class_i: usize) -> Result<Tensor> {
    let (d, h, wd) = match *maps.shape() {
        [d, h, w] => (d, h, w),
        ref s => {
            return Err(Error::shape(format!(
                "compute_cam: maps must be [d,h,w], got {s:?}"
            )))
        }
    };
    let (n, wd2) = match *w.shape() {
        [n, c] => (n, c),
        ref s => {
            return Err(Error::shape(format!(
                "compute_cam: weights must be [n,d], got {s:?}"
            )))
        }
    };
    if wd2 != d {
        return Err(Error::shape(format!(
            "compute_cam: weight dim {wd2} != channel count {d}"
        )));
    }
    if class_i >= n {
        return Err(Error::shape(format!(
            "compute_cam: class {class_i} out of range for {n} classes"
        )));
    }
    let plane = h * wd;
    let mut out = vec![0.0f32; plane];
    let wrow = &w.data()[class_i * d..(class_i + 1) * d];
    for (j, &wj) in wrow.iter().enumerate() {
        let src = &maps.data()[j * plane..(j + 1) * plane];
        for (o, &v) in out.iter_mut().zip(src.iter()) {
            *o += wj * v;
        }
    }
    Tensor::new(vec![h, wd], out)
}

/// All class activation maps stacked as [n,h,w].
pub fn compute_all_cams(maps: &Tensor, w: &Tensor) -> Result<Tensor> {
    let n = w.shape()[0];
    let (h, wd) = (maps.shape()[1], maps.shape()[2]);
    let mut data = Vec::with_capacity(n * h * wd);
    for i in 0..n {
        data.extend_from_slice(compute_cam(maps, w, i)?.data());
    }
    Tensor::new(vec![n, h, wd], data)
}

/// Localization map: the raw rank-combined map plus its normalized, upsampled
/// form.
pub struct LocalizationMap {
    pub raw: Tensor,
    /// min-max normalized to [0,1] and bilinearly upsampled to [size,size];
    /// all zeros when the raw map is constant.
    pub norm: Tensor,
}

/// Combine ranked activation maps into one localization map:
/// H = sum_r omega_r * M_{ranking[r]}, then min-max normalize and upsample.
pub fn combine_cams(
    cams: &Tensor,
    ranking: &[usize],
    scheme: OmegaScheme,
    out_size: usize,
) -> Result<LocalizationMap> {
    let (n, h, w) = match *cams.shape() {
        [n, h, w] => (n, h, w),
        ref s => {
            return Err(Error::shape(format!(
                "combine_cams: cams must be [n,h,w], got {s:?}"
            )))
        }
    };
    let mut seen = vec![false; n];
    if ranking.len() != n || ranking.iter().any(|&c| c >= n || std::mem::replace(&mut seen[c], true)) {
        return Err(Error::shape(format!(
            "combine_cams: ranking {ranking:?} is not a permutation of 0..{n}"
        )));
    }
    let plane = h * w;
    let mut raw = vec![0.0f32; plane];
    for (r, &class) in ranking.iter().enumerate() {
        let wt = scheme.weight(r + 1, n);
        if wt == 0.0 {
            continue;
        }
        let src = &cams.data()[class * plane..(class + 1) * plane];
        for (o, &v) in raw.iter_mut().zip(src.iter()) {
            *o += wt * v;
        }
    }
    let minv = raw.iter().cloned().fold(f32::INFINITY, f32::min);
    let maxv = raw.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let normed: Vec<f32> = if maxv == minv {
        vec![0.0; plane]
    } else {
        let inv = 1.0 / (maxv - minv);
        raw.iter().map(|&v| (v - minv) * inv).collect()
    };
    let small = Tensor::new(vec![h, w], normed)?;
    let norm = bilinear_upsample(&small, out_size);
    Ok(LocalizationMap {
        raw: Tensor::new(vec![h, w], raw)?,
        norm,
    })
}

/// Bilinear upsampling with align-corners mapping. With the default geometry
/// (8x8 maps to a 64-pixel image) every source cell lands exactly on an
/// output pixel, so extrema survive resampling.
pub fn bilinear_upsample(src: &Tensor, out_size: usize) -> Tensor {
    let (h, w) = (src.shape()[0], src.shape()[1]);
    let s = out_size;
    let mut out = vec![0.0f32; s * s];
    let sy_scale = if s > 1 { (h - 1) as f32 / (s - 1) as f32 } else { 0.0 };
    let sx_scale = if s > 1 { (w - 1) as f32 / (s - 1) as f32 } else { 0.0 };
    let data = src.data();
    for y in 0..s {
        let fy = y as f32 * sy_scale;
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f32;
        for x in 0..s {
            let fx = x as f32 * sx_scale;
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f32;
            let top = data[y0 * w + x0] * (1.0 - wx) + data[y0 * w + x1] * wx;
            let bot = data[y1 * w + x0] * (1.0 - wx) + data[y1 * w + x1] * wx;
            out[y * s + x] = top * (1.0 - wy) + bot * wy;
        }
    }
    Tensor::new(vec![s, s], out).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image_batch(seed: u64, bz: usize, s: usize) -> Tensor {
        let mut rng = CounterRng::new(seed);
        let n = bz * 3 * s * s;
        let data: Vec<f32> = (0..n).map(|_| rng.next_f32()).collect();
        Tensor::new(vec![bz, 3, s, s], data).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_biases_zero() {
        let a = ModelParams::init(7, 4, 64).unwrap();
        let b = ModelParams::init(7, 4, 64).unwrap();
        assert_eq!(a, b);
        assert!(a.cls_b.data().iter().all(|&v| v == 0.0));
        for (conv, bn) in &a.blocks {
            assert!(conv.b.data().iter().all(|&v| v == 0.0));
            assert!(bn.gamma.data().iter().all(|&v| v == 1.0));
            assert!(bn.beta.data().iter().all(|&v| v == 0.0));
        }
        let c = ModelParams::init(8, 4, 64).unwrap();
        assert_ne!(a.blocks[0].0.w.data(), c.blocks[0].0.w.data());
    }

    #[test]
    fn init_weight_variance_tracks_he_target() {
        for (li, fan_in) in [(0usize, 3 * 9), (1, 16 * 9), (2, 32 * 9), (3, 64 * 9)] {
            let mut pooled = 0.0f64;
            let mut count = 0usize;
            for seed in 0..5 {
                let p = ModelParams::init(seed, 4, 64).unwrap();
                let w = p.blocks[li].0.w.data();
                pooled += w.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>();
                count += w.len();
            }
            let var = pooled / count as f64;
            let target = 2.0 / fan_in as f64;
            assert!(
                (var - target).abs() < 0.3 * target,
                "layer {li}: var {var:.6} vs target {target:.6}"
            );
        }
    }

    #[test]
    fn backbone_output_shape_and_determinism() {
        let mut params = ModelParams::init(3, 4, 64).unwrap();
        let imgs = image_batch(1, 2, 64);
        let mut g = Graph::new();
        let bm = bind(&mut g, &params, Trainable::None);
        let x = g.leaf(imgs.clone());
        let maps = forward_backbone(&mut g, &bm, &mut params, x, BnMode::Eval).unwrap();
        assert_eq!(g.value(maps).shape(), &[2, 64, 8, 8]);
        assert!(g.value(maps).is_finite());

        // Eval forwards with fixed params are bitwise deterministic.
        let mut g2 = Graph::new();
        let bm2 = bind(&mut g2, &params, Trainable::None);
        let x2 = g2.leaf(imgs);
        let maps2 = forward_backbone(&mut g2, &bm2, &mut params, x2, BnMode::Eval).unwrap();
        assert_eq!(g.value(maps).data(), g2.value(maps2).data());
    }

    #[test]
    fn zero_image_is_finite() {
        let mut params = ModelParams::init(3, 4, 64).unwrap();
        let mut g = Graph::new();
        let bm = bind(&mut g, &params, Trainable::None);
        let x = g.leaf(Tensor::zeros(vec![1, 3, 64, 64]));
        let maps = forward_backbone(&mut g, &bm, &mut params, x, BnMode::Eval).unwrap();
        assert!(g.value(maps).is_finite());
    }

    #[test]
    fn decoupling_identity_holds() {
        let mut params = ModelParams::init(5, 4, 64).unwrap();
        let mut g = Graph::new();
        let bm = bind(&mut g, &params, Trainable::None);
        let x = g.leaf(image_batch(2, 3, 64));
        let maps = forward_backbone(&mut g, &bm, &mut params, x, BnMode::Eval).unwrap();
        let fb = decouple_features(&mut g, &bm, maps).unwrap();
        let o = g.value(fb.original).data();
        let f = g.value(fb.foreground).data();
        let b = g.value(fb.background).data();
        for i in 0..o.len() {
            assert!((o[i] - (f[i] + b[i])).abs() <= 1e-6, "index {i}");
        }
    }

    #[test]
    fn decoupling_identity_with_zeroed_extractor() {
        let mut params = ModelParams::init(5, 4, 64).unwrap();
        params.fg1.w = Tensor::zeros(params.fg1.w.shape().to_vec());
        params.fg2.w = Tensor::zeros(params.fg2.w.shape().to_vec());
        let mut g = Graph::new();
        let bm = bind(&mut g, &params, Trainable::None);
        let x = g.leaf(image_batch(9, 2, 64));
        let maps = forward_backbone(&mut g, &bm, &mut params, x, BnMode::Eval).unwrap();
        let fb = decouple_features(&mut g, &bm, maps).unwrap();
        // Zero extractor weights leave only the bias path: F is constant 0
        // here (biases are zero), so B equals O.
        let f = g.value(fb.foreground).data();
        assert!(f.iter().all(|&v| v == 0.0));
        let o = g.value(fb.original).data();
        let b = g.value(fb.background).data();
        assert_eq!(o, b);
    }

    #[test]
    fn classify_zero_vector_returns_bias() {
        let params = ModelParams::init(1, 4, 64).unwrap();
        let mut params = params;
        params.cls_b = Tensor::new(vec![4], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let mut g = Graph::new();
        let bm = bind(&mut g, &params, Trainable::None);
        let v = g.leaf(Tensor::zeros(vec![64]));
        let z = classify(&mut g, &bm, v).unwrap();
        assert_eq!(g.value(z).data(), &[0.1, 0.2, 0.3, 0.4]);
    }

    #[test]
    fn ensemble_matches_single_head_when_equal() {
        let z = vec![1.0f32, 2.0, 0.5];
        let (s, pred) = ensemble_predict(&z, &z);
        let mut expect = vec![0.0f32; 3];
        softmax_row(&z, 1.0, &mut expect);
        for (a, b) in s.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-7);
        }
        assert_eq!(pred, 1);
    }

    #[test]
    fn ensemble_argmax_shift_invariant_and_tie_breaks_low() {
        let z_o = vec![1.0f32, 3.0, 2.0];
        let z_f = vec![0.0f32, 1.0, 4.0];
        let (_, pred) = ensemble_predict(&z_o, &z_f);
        let shifted_o: Vec<f32> = z_o.iter().map(|v| v + 100.0).collect();
        let shifted_f: Vec<f32> = z_f.iter().map(|v| v - 50.0).collect();
        let (_, pred2) = ensemble_predict(&shifted_o, &shifted_f);
        assert_eq!(pred, pred2);

        // Two equally confident, disagreeing one-hot-like inputs.
        let a = vec![10.0f32, 0.0];
        let b = vec![0.0f32, 10.0];
        let (s, pred) = ensemble_predict(&a, &b);
        assert!((s[0] - s[1]).abs() < 1e-7);
        assert_eq!(pred, 0);
    }

    #[test]
    fn cam_one_hot_row_selects_channel() {
        let maps = Tensor::new(
            vec![3, 2, 2],
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0],
        )
        .unwrap();
        let mut w = vec![0.0f32; 2 * 3];
        w[0 * 3 + 1] = 1.0; // class 0 reads channel 1
        let w = Tensor::new(vec![2, 3], w).unwrap();
        let cam = compute_cam(&maps, &w, 0).unwrap();
        assert_eq!(cam.data(), &[5.0, 6.0, 7.0, 8.0]);
        let cam1 = compute_cam(&maps, &w, 1).unwrap();
        assert!(cam1.data().iter().all(|&v| v == 0.0));
        assert!(compute_cam(&maps, &w, 2).is_err());
    }

    #[test]
    fn combine_top1_equals_best_class_cam() {
        let cams = Tensor::new(
            vec![2, 2, 2],
            vec![0.0, 1.0, 2.0, 3.0, 5.0, 5.0, 5.0, 5.0],
        )
        .unwrap();
        let lm = combine_cams(&cams, &[0, 1], OmegaScheme::Top1, 2).unwrap();
        assert_eq!(lm.raw.data(), &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(lm.norm.data(), &[0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0]);
    }

    #[test]
    fn combine_linear_two_classes_is_difference() {
        let cams = Tensor::new(vec![2, 1, 2], vec![3.0, 4.0, 1.0, 1.0]).unwrap();
        let lm = combine_cams(&cams, &[1, 0], OmegaScheme::Linear, 2).unwrap();
        // omega = (+1, -1): H = M_1 - M_0.
        assert_eq!(lm.raw.data(), &[1.0 - 3.0, 1.0 - 4.0]);
    }

    #[test]
    fn combine_constant_map_normalizes_to_zero() {
        let cams = Tensor::new(vec![1, 2, 2], vec![4.0; 4]).unwrap();
        let lm = combine_cams(&cams, &[0], OmegaScheme::Top1, 4).unwrap();
        assert!(lm.norm.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn combine_rejects_non_permutation() {
        let cams = Tensor::new(vec![2, 1, 1], vec![1.0, 2.0]).unwrap();
        assert!(combine_cams(&cams, &[0, 0], OmegaScheme::Top1, 2).is_err());
        assert!(combine_cams(&cams, &[0], OmegaScheme::Top1, 2).is_err());
        assert!(combine_cams(&cams, &[0, 2], OmegaScheme::Top1, 2).is_err());
    }

    #[test]
    fn cam_is_linear_in_maps() {
        let mut rng = CounterRng::new(4);
        let maps_data: Vec<f32> = (0..3 * 4 * 4).map(|_| rng.normal()).collect();
        let maps = Tensor::new(vec![3, 4, 4], maps_data.clone()).unwrap();
        let scaled = Tensor::new(vec![3, 4, 4], maps_data.iter().map(|v| v * 2.5).collect()).unwrap();
        let w_data: Vec<f32> = (0..2 * 3).map(|_| rng.normal()).collect();
        let w = Tensor::new(vec![2, 3], w_data).unwrap();
        let a = compute_cam(&maps, &w, 1).unwrap();
        let b = compute_cam(&scaled, &w, 1).unwrap();
        for (x, y) in a.data().iter().zip(b.data().iter()) {
            assert!((x * 2.5 - y).abs() < 1e-5);
        }
    }

    #[test]
    fn checkpoint_round_trip_restores_model() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut params = ModelParams::init(11, 4, 64).unwrap();
        params.blocks[2].1.running.mean[5] = 0.25;
        params.blocks[2].1.running.var[5] = 2.5;
        let tensors = params.checkpoint_tensors();
        let refs: Vec<(String, &Tensor)> = tensors.iter().map(|(n, t)| (n.clone(), t)).collect();
        crate::checkpoint::save(&path, &refs, 0).unwrap();
        let ck = crate::checkpoint::load(&path).unwrap();
        assert!(!ck.is_adapted());
        let restored = ModelParams::from_checkpoint(&ck).unwrap();
        assert_eq!(restored, params);
    }
}
