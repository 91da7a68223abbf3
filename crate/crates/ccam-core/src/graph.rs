//! Define-by-run reverse-mode differentiation tape.
//!
//! A [`Graph`] records every operation as it executes; [`Graph::backward`]
//! replays the record in exact reverse order and accumulates gradients into
//! each node's tensor. Graphs are rebuilt per forward pass and must not be
//! shared across threads.
//!
//! The operation set is exactly what the training/adaptation pipeline needs:
//! conv/pool/batch-norm/GAP/linear for the network, fused row-wise losses
//! (cross-entropy, entropy, temperature KL), pairwise cosine similarity, the
//! foreground/background pairing grid, and a handful of generic elementwise
//! reductions used to assemble composite objectives.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;
pub const COSINE_EPS: f32 = 1e-8;

/// Handle to a node in one specific [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

/// Batch-norm execution mode. `Train` and `Adapt` both normalize with
/// current-batch statistics and update running statistics; `Eval` normalizes
/// with the stored running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
    Adapt,
}

impl BnMode {
    pub fn uses_batch_stats(self) -> bool {
        matches!(self, BnMode::Train | BnMode::Adapt)
    }
}

/// Running statistics owned by a batch-norm layer, updated in place by
/// train/adapt forwards.
#[derive(Debug, Clone, PartialEq)]
pub struct BnRunning {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

impl BnRunning {
    pub fn new(channels: usize) -> Self {
        BnRunning {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: TensorId,
        w: TensorId,
        b: TensorId,
        stride: usize,
        pad: usize,
        // im2col buffer saved from the forward pass, one [K x N] block per
        // batch image (K = c_in*k*k, N = h_out*w_out).
        cols: Vec<f32>,
    },
    Relu {
        x: TensorId,
    },
    MaxPool2d {
        x: TensorId,
        // flat input index of the (first-in-scan-order) max per output cell
        argmax: Vec<u32>,
    },
    BatchNorm2d {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        mode: BnMode,
        // per-channel statistics actually used for normalization
        mean: Vec<f32>,
        inv_std: Vec<f32>,
    },
    Gap {
        x: TensorId,
    },
    Linear {
        x: TensorId,
        w: TensorId,
        b: TensorId,
    },
    Softmax {
        x: TensorId,
        temp: f32,
    },
    Sub {
        a: TensorId,
        b: TensorId,
    },
    Mul {
        a: TensorId,
        b: TensorId,
    },
    Abs {
        x: TensorId,
    },
    Scale {
        x: TensorId,
        c: f32,
    },
    SumAll {
        x: TensorId,
    },
    MeanAll {
        x: TensorId,
    },
    AddN {
        terms: Vec<(TensorId, f32)>,
    },
    PairGrid {
        f: TensorId,
        b: TensorId,
    },
    CosineMatrix {
        a: TensorId,
        b: TensorId,
    },
    CrossEntropyMean {
        z: TensorId,
        labels: Vec<usize>,
    },
    EntropyMean {
        z: TensorId,
    },
    KlTempMean {
        p: TensorId,
        q: TensorId,
        temp: f32,
    },
}

struct Node {
    tensor: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_run: bool,
}

/// Interprets a rank-3 tensor as a single-image batch and a rank-4 tensor as
/// a batched one. Returns (bz, c, h, w).
fn batched_dims(shape: &[usize], what: &str) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((1, c, h, w)),
        [bz, c, h, w] => Ok((bz, c, h, w)),
        _ => Err(Error::shape(format!(
            "{what}: expected rank-3 or rank-4 input, got shape {shape:?}"
        ))),
    }
}

/// Interprets rank-1 as a single row, rank-2 as a row matrix. Returns (rows, cols).
fn row_dims(shape: &[usize], what: &str) -> Result<(usize, usize)> {
    match *shape {
        [d] => Ok((1, d)),
        [m, d] => Ok((m, d)),
        _ => Err(Error::shape(format!(
            "{what}: expected rank-1 or rank-2 input, got shape {shape:?}"
        ))),
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].tensor
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f32]> {
        self.nodes[id.0].tensor.grad()
    }

    /// Insert an input tensor. Gradient participation follows
    /// `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: Tensor) -> TensorId {
        let needs = tensor.requires_grad;
        self.push(tensor, Op::Leaf, needs)
    }

    fn push(&mut self, tensor: Tensor, op: Op, needs_grad: bool) -> TensorId {
        self.nodes.push(Node {
            tensor,
            op,
            needs_grad,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn data(&self, id: TensorId) -> &[f32] {
        self.nodes[id.0].tensor.data()
    }

    fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].tensor.shape()
    }

    // ── network ops ────────────────────────────────────────────────────

    /// 2-D cross-correlation with zero padding and square kernels.
    /// Input rank 3 ([c,h,w]) or rank 4 ([bz,c,h,w]); output rank matches.
    pub fn conv2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: TensorId,
        stride: usize,
        pad: usize,
    ) -> Result<TensorId> {
        let (bz, ci, h, wdt) = batched_dims(self.shape(x), "conv2d")?;
        let wshape = self.shape(w);
        let ([co, wci, k, k2], [bn]) = match (wshape, self.shape(b)) {
            ([a, b_, c, d], [e]) => ([*a, *b_, *c, *d], [*e]),
            (ws, bs) => {
                return Err(Error::shape(format!(
                    "conv2d: weight must be rank 4 and bias rank 1, got {ws:?} / {bs:?}"
                )))
            }
        };
        if k != k2 {
            return Err(Error::shape(format!("conv2d: kernel must be square, got {k}x{k2}")));
        }
        if wci != ci {
            return Err(Error::shape(format!(
                "conv2d: input has {ci} channels but weight expects {wci}"
            )));
        }
        if bn != co {
            return Err(Error::shape(format!("conv2d: bias length {bn} != out channels {co}")));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d: stride must be >= 1".to_string()));
        }
        if k > h + 2 * pad || k > wdt + 2 * pad {
            return Err(Error::shape(format!(
                "conv2d: kernel {k} exceeds padded input {}x{}",
                h + 2 * pad,
                wdt + 2 * pad
            )));
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wdt + 2 * pad - k) / stride + 1;
        let kk = ci * k * k;
        let n = ho * wo;

        let mut cols = vec![0.0f32; bz * kk * n];
        let mut out = vec![0.0f32; bz * co * n];
        {
            let xd = self.data(x);
            let wd = self.data(w);
            let bd = self.data(b);
            for img in 0..bz {
                let xi = &xd[img * ci * h * wdt..(img + 1) * ci * h * wdt];
                let ci_cols = &mut cols[img * kk * n..(img + 1) * kk * n];
                im2col(xi, ci, h, wdt, k, stride, pad, ho, wo, ci_cols);
                let oi = &mut out[img * co * n..(img + 1) * co * n];
                gemm_bias(wd, ci_cols, bd, co, kk, n, oi);
            }
        }
        let out_shape = if self.shape(x).len() == 3 {
            vec![co, ho, wo]
        } else {
            vec![bz, co, ho, wo]
        };
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            },
            needs,
        ))
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let data: Vec<f32> = self.data(x).iter().map(|&v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        self.push(Tensor::new(shape, data).unwrap(), Op::Relu { x }, needs)
    }

    /// Max pooling. Only k == stride == 2 with evenly divisible spatial dims
    /// is supported; the gradient routes to the first max in scan order.
    pub fn maxpool2d(&mut self, x: TensorId, k: usize, stride: usize) -> Result<TensorId> {
        if k != 2 || stride != 2 {
            return Err(Error::shape(format!(
                "maxpool2d: unsupported k={k}, stride={stride} (only k=stride=2)"
            )));
        }
        let (bz, c, h, w) = batched_dims(self.shape(x), "maxpool2d")?;
        if h % stride != 0 || w % stride != 0 {
            return Err(Error::shape(format!(
                "maxpool2d: spatial dims {h}x{w} not divisible by stride {stride}"
            )));
        }
        let ho = h / stride;
        let wo = w / stride;
        let mut out = vec![0.0f32; bz * c * ho * wo];
        let mut argmax = vec![0u32; bz * c * ho * wo];
        {
            let xd = self.data(x);
            let mut oi = 0;
            for img in 0..bz {
                for ch in 0..c {
                    let base = (img * c + ch) * h * w;
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let mut best = f32::NEG_INFINITY;
                            let mut best_idx = 0usize;
                            for ky in 0..k {
                                for kx in 0..k {
                                    let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                                    let v = xd[idx];
                                    if v > best {
                                        best = v;
                                        best_idx = idx;
                                    }
                                }
                            }
                            out[oi] = best;
                            argmax[oi] = best_idx as u32;
                            oi += 1;
                        }
                    }
                }
            }
        }
        let out_shape = if self.shape(x).len() == 3 {
            vec![c, ho, wo]
        } else {
            vec![bz, c, ho, wo]
        };
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::MaxPool2d { x, argmax },
            needs,
        ))
    }

    /// Batch normalization over [bz,c,h,w]. Train/adapt normalize with batch
    /// statistics (bz >= 2 required) and update `running` in place with
    /// momentum 0.1 (unbiased variance for the running estimate); eval
    /// normalizes with the stored running statistics.
    pub fn batchnorm2d(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        running: &mut BnRunning,
        mode: BnMode,
    ) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        let (bz, c, h, w) = match shape[..] {
            [bz, c, h, w] => (bz, c, h, w),
            _ => {
                return Err(Error::shape(format!(
                    "batchnorm2d: expected rank-4 input, got {shape:?}"
                )))
            }
        };
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(format!(
                "batchnorm2d: gamma/beta must have shape [{c}]"
            )));
        }
        if running.mean.len() != c || running.var.len() != c {
            return Err(Error::shape(format!(
                "batchnorm2d: running stats sized for {} channels, input has {c}",
                running.mean.len()
            )));
        }
        if mode.uses_batch_stats() && bz < 2 {
            return Err(Error::shape(
                "batchnorm2d: batch size must be >= 2 in train/adapt mode".to_string(),
            ));
        }

        let plane = h * w;
        let m = bz * plane;
        let mut mean = vec![0.0f32; c];
        let mut inv_std = vec![0.0f32; c];
        let mut out = vec![0.0f32; bz * c * plane];
        {
            let xd = self.data(x);
            let gd = self.data(gamma);
            let bd = self.data(beta);
            for ch in 0..c {
                let (mu, var) = if mode.uses_batch_stats() {
                    let mut sum = 0.0f64;
                    let mut sumsq = 0.0f64;
                    for img in 0..bz {
                        let sl = &xd[(img * c + ch) * plane..(img * c + ch + 1) * plane];
                        for &v in sl {
                            sum += v as f64;
                            sumsq += (v as f64) * (v as f64);
                        }
                    }
                    let mu = sum / m as f64;
                    let var = (sumsq / m as f64 - mu * mu).max(0.0);
                    (mu as f32, var as f32)
                } else {
                    (running.mean[ch], running.var[ch])
                };
                mean[ch] = mu;
                let istd = 1.0 / (var + BN_EPS).sqrt();
                inv_std[ch] = istd;
                let g = gd[ch];
                let b = bd[ch];
                for img in 0..bz {
                    let off = (img * c + ch) * plane;
                    let src = &xd[off..off + plane];
                    let dst = &mut out[off..off + plane];
                    for (d, &v) in dst.iter_mut().zip(src.iter()) {
                        *d = g * (v - mu) * istd + b;
                    }
                }
                if mode.uses_batch_stats() {
                    let unbiased = var * (m as f32 / (m as f32 - 1.0));
                    running.mean[ch] = (1.0 - BN_MOMENTUM) * running.mean[ch] + BN_MOMENTUM * mu;
                    running.var[ch] = (1.0 - BN_MOMENTUM) * running.var[ch] + BN_MOMENTUM * unbiased;
                }
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::BatchNorm2d {
                x,
                gamma,
                beta,
                mode,
                mean,
                inv_std,
            },
            needs,
        ))
    }

    /// Global average pooling: per-channel mean over spatial positions.
    /// [c,h,w] -> [c] or [bz,c,h,w] -> [bz,c].
    pub fn global_avg_pool(&mut self, x: TensorId) -> Result<TensorId> {
        let (bz, c, h, w) = batched_dims(self.shape(x), "global_avg_pool")?;
        let plane = h * w;
        let mut out = vec![0.0f32; bz * c];
        {
            let xd = self.data(x);
            for i in 0..bz * c {
                let sl = &xd[i * plane..(i + 1) * plane];
                let sum: f64 = sl.iter().map(|&v| v as f64).sum();
                out[i] = (sum / plane as f64) as f32;
            }
        }
        let out_shape = if self.shape(x).len() == 3 {
            vec![c]
        } else {
            vec![bz, c]
        };
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Gap { x }, needs))
    }

    /// Affine map `x W^T + b` with weight rows as output units.
    /// x: [d] or [m,d]; w: [n,d]; b: [n].
    pub fn linear(&mut self, x: TensorId, w: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, d) = row_dims(self.shape(x), "linear")?;
        let (n, wd) = match *self.shape(w) {
            [n, wd] => (n, wd),
            ref s => return Err(Error::shape(format!("linear: weight must be rank 2, got {s:?}"))),
        };
        if wd != d {
            return Err(Error::shape(format!(
                "linear: input dim {d} != weight dim {wd}"
            )));
        }
        if self.shape(b) != [n] {
            return Err(Error::shape(format!("linear: bias must have shape [{n}]")));
        }
        let mut out = vec![0.0f32; m * n];
        {
            let xd = self.data(x);
            let wd_ = self.data(w);
            let bd = self.data(b);
            for r in 0..m {
                let xr = &xd[r * d..(r + 1) * d];
                for j in 0..n {
                    let wr = &wd_[j * d..(j + 1) * d];
                    let mut acc = 0.0f32;
                    for (xv, wv) in xr.iter().zip(wr.iter()) {
                        acc += xv * wv;
                    }
                    out[r * n + j] = acc + bd[j];
                }
            }
        }
        let out_shape = if self.shape(x).len() == 1 {
            vec![n]
        } else {
            vec![m, n]
        };
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Linear { x, w, b }, needs))
    }

    /// Row-wise temperature softmax with max-shift stabilization.
    pub fn softmax(&mut self, x: TensorId, temp: f32) -> Result<TensorId> {
        if !(temp > 0.0) {
            return Err(Error::shape(format!("softmax: temperature must be > 0, got {temp}")));
        }
        let (m, n) = row_dims(self.shape(x), "softmax")?;
        let mut out = vec![0.0f32; m * n];
        {
            let xd = self.data(x);
            for r in 0..m {
                let row = &xd[r * n..(r + 1) * n];
                softmax_row(row, temp, &mut out[r * n..(r + 1) * n]);
            }
        }
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { x, temp }, needs))
    }

    // ── generic elementwise / reduction ops ────────────────────────────

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "sub: shape mismatch {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data: Vec<f32> = self
            .data(a)
            .iter()
            .zip(self.data(b).iter())
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::Sub { a, b }, needs))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "mul: shape mismatch {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data: Vec<f32> = self
            .data(a)
            .iter()
            .zip(self.data(b).iter())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::Mul { a, b }, needs))
    }

    /// Elementwise absolute value; the subgradient at 0 is 0.
    pub fn abs(&mut self, x: TensorId) -> TensorId {
        let data: Vec<f32> = self.data(x).iter().map(|v| v.abs()).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        self.push(Tensor::new(shape, data).unwrap(), Op::Abs { x }, needs)
    }

    pub fn scale(&mut self, x: TensorId, c: f32) -> TensorId {
        let data: Vec<f32> = self.data(x).iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        self.push(Tensor::new(shape, data).unwrap(), Op::Scale { x, c }, needs)
    }

    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let sum: f64 = self.data(x).iter().map(|&v| v as f64).sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(sum as f32), Op::SumAll { x }, needs)
    }

    pub fn mean_all(&mut self, x: TensorId) -> TensorId {
        let n = self.data(x).len();
        let sum: f64 = self.data(x).iter().map(|&v| v as f64).sum();
        let needs = self.needs(x);
        self.push(
            Tensor::scalar((sum / n as f64) as f32),
            Op::MeanAll { x },
            needs,
        )
    }

    /// Weighted sum of scalar nodes: `sum_i w_i * terms_i`.
    pub fn add_n(&mut self, terms: &[(TensorId, f32)]) -> Result<TensorId> {
        if terms.is_empty() {
            return Err(Error::shape("add_n: no terms".to_string()));
        }
        let mut acc = 0.0f64;
        for &(id, wt) in terms {
            if self.nodes[id.0].tensor.numel() != 1 {
                return Err(Error::shape(format!(
                    "add_n: term has shape {:?}, expected scalar",
                    self.shape(id)
                )));
            }
            acc += self.nodes[id.0].tensor.item() as f64 * wt as f64;
        }
        let needs = terms.iter().any(|&(id, _)| self.needs(id));
        Ok(self.push(
            Tensor::scalar(acc as f32),
            Op::AddN {
                terms: terms.to_vec(),
            },
            needs,
        ))
    }

    // ── pipeline-specific ops ──────────────────────────────────────────

    /// Pairing grid: rows f[i] + b[j] stacked row-major, [bz,d] x [bz,d] ->
    /// [bz*bz, d]. Row block i carries foreground i paired with every
    /// background j; the diagonal (i == j) reconstructs the original feature.
    pub fn pair_grid(&mut self, f: TensorId, b: TensorId) -> Result<TensorId> {
        let (mf, df) = row_dims(self.shape(f), "pair_grid")?;
        let (mb, db) = row_dims(self.shape(b), "pair_grid")?;
        if mf != mb || df != db {
            return Err(Error::shape(format!(
                "pair_grid: mismatched inputs {:?} vs {:?}",
                self.shape(f),
                self.shape(b)
            )));
        }
        let d = df;
        let mut out = vec![0.0f32; mf * mb * d];
        {
            let fd = self.data(f);
            let bd = self.data(b);
            for i in 0..mf {
                for j in 0..mb {
                    let dst = &mut out[(i * mb + j) * d..(i * mb + j + 1) * d];
                    let fr = &fd[i * d..(i + 1) * d];
                    let br = &bd[j * d..(j + 1) * d];
                    for ((o, &fv), &bv) in dst.iter_mut().zip(fr.iter()).zip(br.iter()) {
                        *o = fv + bv;
                    }
                }
            }
        }
        let needs = self.needs(f) || self.needs(b);
        Ok(self.push(
            Tensor::new(vec![mf * mb, d], out)?,
            Op::PairGrid { f, b },
            needs,
        ))
    }

    /// All-pairs cosine similarity between rows: a [m,d], b [k,d] -> [m,k].
    /// The denominator is clamped at 1e-8 so zero vectors stay finite.
    pub fn cosine_matrix(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, da) = row_dims(self.shape(a), "cosine_matrix")?;
        let (k, db) = row_dims(self.shape(b), "cosine_matrix")?;
        if da != db {
            return Err(Error::shape(format!(
                "cosine_matrix: feature dims differ, {da} vs {db}"
            )));
        }
        let d = da;
        let mut out = vec![0.0f32; m * k];
        {
            let ad = self.data(a);
            let bd = self.data(b);
            let na: Vec<f32> = (0..m).map(|r| norm(&ad[r * d..(r + 1) * d])).collect();
            let nb: Vec<f32> = (0..k).map(|c| norm(&bd[c * d..(c + 1) * d])).collect();
            for r in 0..m {
                for c in 0..k {
                    let dot = dot(&ad[r * d..(r + 1) * d], &bd[c * d..(c + 1) * d]);
                    out[r * k + c] = dot / (na[r] * nb[c]).max(COSINE_EPS);
                }
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::new(vec![m, k], out)?,
            Op::CosineMatrix { a, b },
            needs,
        ))
    }

    /// Mean over rows of `-log softmax(z)[label]`. z: [n] or [m,n].
    pub fn cross_entropy_mean(&mut self, z: TensorId, labels: &[usize]) -> Result<TensorId> {
        let (m, n) = row_dims(self.shape(z), "cross_entropy_mean")?;
        if labels.len() != m {
            return Err(Error::shape(format!(
                "cross_entropy_mean: {m} rows but {} labels",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
            return Err(Error::shape(format!(
                "cross_entropy_mean: label {bad} out of range for {n} classes"
            )));
        }
        let mut total = 0.0f64;
        {
            let zd = self.data(z);
            for r in 0..m {
                let row = &zd[r * n..(r + 1) * n];
                let maxv = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                let lse: f64 = row
                    .iter()
                    .map(|&v| ((v - maxv) as f64).exp())
                    .sum::<f64>()
                    .ln();
                total += lse + maxv as f64 - row[labels[r]] as f64;
            }
        }
        let needs = self.needs(z);
        Ok(self.push(
            Tensor::scalar((total / m as f64) as f32),
            Op::CrossEntropyMean {
                z,
                labels: labels.to_vec(),
            },
            needs,
        ))
    }

    /// Mean over rows of the Shannon entropy of softmax(z, T=1); probability
    /// terms below 1e-12 contribute zero.
    pub fn entropy_mean(&mut self, z: TensorId) -> Result<TensorId> {
        let (m, n) = row_dims(self.shape(z), "entropy_mean")?;
        let mut total = 0.0f64;
        {
            let zd = self.data(z);
            let mut probs = vec![0.0f32; n];
            for r in 0..m {
                softmax_row(&zd[r * n..(r + 1) * n], 1.0, &mut probs);
                total += entropy_of(&probs);
            }
        }
        let needs = self.needs(z);
        Ok(self.push(
            Tensor::scalar((total / m as f64) as f32),
            Op::EntropyMean { z },
            needs,
        ))
    }

    /// Mean over rows of KL(softmax(p/T) || softmax(q/T)). Gradient flows
    /// into both logit arguments.
    pub fn kl_temp_mean(&mut self, p: TensorId, q: TensorId, temp: f32) -> Result<TensorId> {
        if !(temp > 0.0) {
            return Err(Error::shape(format!(
                "kl_temp_mean: temperature must be > 0, got {temp}"
            )));
        }
        let (m, n) = row_dims(self.shape(p), "kl_temp_mean")?;
        if self.shape(p) != self.shape(q) {
            return Err(Error::shape(format!(
                "kl_temp_mean: shape mismatch {:?} vs {:?}",
                self.shape(p),
                self.shape(q)
            )));
        }
        let mut total = 0.0f64;
        {
            let pd = self.data(p);
            let qd = self.data(q);
            for r in 0..m {
                let (lp, _) = log_softmax_row(&pd[r * n..(r + 1) * n], temp);
                let (lq, _) = log_softmax_row(&qd[r * n..(r + 1) * n], temp);
                let mut kl = 0.0f64;
                for j in 0..n {
                    let pj = lp[j].exp();
                    kl += pj * (lp[j] - lq[j]);
                }
                total += kl;
            }
        }
        let needs = self.needs(p) || self.needs(q);
        Ok(self.push(
            Tensor::scalar((total / m as f64) as f32),
            Op::KlTempMean { p, q, temp },
            needs,
        ))
    }

    // ── spec-named scalar conveniences ─────────────────────────────────

    /// Cosine similarity of two equal-length vectors as a scalar node.
    pub fn cosine_similarity(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let m = self.cosine_matrix(a, b)?;
        if self.nodes[m.0].tensor.numel() != 1 {
            return Err(Error::shape(
                "cosine_similarity: expected two vectors".to_string(),
            ));
        }
        Ok(m)
    }

    /// `-log softmax(z)[label]` for a single logit vector.
    pub fn cross_entropy(&mut self, z: TensorId, label: usize) -> Result<TensorId> {
        self.cross_entropy_mean(z, &[label])
    }

    /// Shannon entropy of softmax(z) for a single logit vector.
    pub fn shannon_entropy(&mut self, z: TensorId) -> Result<TensorId> {
        self.entropy_mean(z)
    }

    /// Temperature KL between two single logit vectors.
    pub fn kl_temperature(&mut self, p: TensorId, q: TensorId, temp: f32) -> Result<TensorId> {
        self.kl_temp_mean(p, q, temp)
    }

    // ── backward ───────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar loss. Populates `grad` on every node
    /// that (transitively) involves a `requires_grad` leaf. Rejects
    /// non-scalar losses and repeated invocation on the same graph.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.backward_run {
            return Err(Error::Graph(
                "backward already run on this graph".to_string(),
            ));
        }
        if self.nodes[loss.0].tensor.numel() != 1 {
            return Err(Error::Graph(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_run = true;
        if !self.nodes[loss.0].needs_grad {
            return Ok(());
        }
        self.nodes[loss.0].tensor.accumulate_grad(&[1.0]);

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad || self.nodes[i].tensor.grad().is_none() {
                continue;
            }
            self.backprop_node(i);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize) {
        // Take the node's op out to appease the borrow checker; Leaf is a
        // cheap placeholder.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        let grad = self.nodes[i].tensor.grad().unwrap().to_vec();
        match &op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            } => self.backward_conv2d(i, *x, *w, *b, *stride, *pad, cols, &grad),
            Op::Relu { x } => {
                if self.needs(*x) {
                    let delta: Vec<f32> = self
                        .data(*x)
                        .iter()
                        .zip(grad.iter())
                        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                        .collect();
                    self.nodes[x.0].tensor.accumulate_grad(&delta);
                }
            }
            Op::MaxPool2d { x, argmax } => {
                if self.needs(*x) {
                    let mut delta = vec![0.0f32; self.nodes[x.0].tensor.numel()];
                    for (o, &src) in argmax.iter().enumerate() {
                        delta[src as usize] += grad[o];
                    }
                    self.nodes[x.0].tensor.accumulate_grad(&delta);
                }
            }
            Op::BatchNorm2d {
                x,
                gamma,
                beta,
                mode,
                mean,
                inv_std,
            } => self.backward_batchnorm(*x, *gamma, *beta, *mode, mean, inv_std, &grad),
            Op::Gap { x } => {
                if self.needs(*x) {
                    let shape = self.shape(*x);
                    let (plane, total) = {
                        let r = shape.len();
                        (shape[r - 2] * shape[r - 1], self.nodes[x.0].tensor.numel())
                    };
                    let mut delta = vec![0.0f32; total];
                    for (ci, &g) in grad.iter().enumerate() {
                        let gs = g / plane as f32;
                        for v in &mut delta[ci * plane..(ci + 1) * plane] {
                            *v = gs;
                        }
                    }
                    self.nodes[x.0].tensor.accumulate_grad(&delta);
                }
            }
            Op::Linear { x, w, b } => self.backward_linear(*x, *w, *b, &grad),
            Op::Softmax { x, temp } => {
                if self.needs(*x) {
                    let (m, n) = row_dims(self.shape(*x), "softmax").unwrap();
                    let out = self.nodes[i].tensor.data();
                    let mut delta = vec![0.0f32; m * n];
                    for r in 0..m {
                        let s = &out[r * n..(r + 1) * n];
                        let g = &grad[r * n..(r + 1) * n];
                        let dot: f64 = s
                            .iter()
                            .zip(g.iter())
                            .map(|(&sv, &gv)| sv as f64 * gv as f64)
                            .sum();
                        for j in 0..n {
                            delta[r * n + j] = s[j] * (g[j] - dot as f32) / temp;
                        }
                    }
                    self.nodes[x.0].tensor.accumulate_grad(&delta);
                }
            }
            Op::Sub { a, b } => {
                if self.needs(*a) {
                    self.nodes[a.0].tensor.accumulate_grad(&grad);
                }
                if self.needs(*b) {
                    let neg: Vec<f32> = grad.iter().map(|g| -g).collect();
                    self.nodes[b.0].tensor.accumulate_grad(&neg);
                }
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    let delta: Vec<f32> = grad
                        .iter()
                        .zip(self.data(*b).iter())
                        .map(|(&g, &v)| g * v)
                        .collect();
                    self.nodes[a.0].tensor.accumulate_grad(&delta);
                }
                if self.needs(*b) {
                    let delta: Vec<f32> = grad
                        .iter()
                        .zip(self.data(*a).iter())
                        .map(|(&g, &v)| g * v)
                        .collect();
                    self.nodes[b.0].tensor.accumulate_grad(&delta);
                }
            }
            Op::Abs { x } => {
                if self.needs(*x) {
                    let delta: Vec<f32> = self
                        .data(*x)
                        .iter()
                        .zip(grad.iter())
                        .map(|(&v, &g)| {
                            if v > 0.0 {
                                g
                            } else if v < 0.0 {
                                -g
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    self.nodes[x.0].tensor.accumulate_grad(&delta);
                }
            }
            Op::Scale { x, c } => {
                if self.needs(*x) {
                    let delta: Vec<f32> = grad.iter().map(|g| g * c).collect();
                    self.nodes[x.0].tensor.accumulate_grad(&delta);
                }
            }
            Op::SumAll { x } => {
                if self.needs(*x) {
                    let delta = vec![grad[0]; self.nodes[x.0].tensor.numel()];
                    self.nodes[x.0].tensor.accumulate_grad(&delta);
                }
            }
            Op::MeanAll { x } => {
                if self.needs(*x) {
                    let n = self.nodes[x.0].tensor.numel();
                    let delta = vec![grad[0] / n as f32; n];
                    self.nodes[x.0].tensor.accumulate_grad(&delta);
                }
            }
            Op::AddN { terms } => {
                for &(id, wt) in terms {
                    if self.needs(id) {
                        self.nodes[id.0].tensor.accumulate_grad(&[grad[0] * wt]);
                    }
                }
            }
            Op::PairGrid { f, b } => {
                let (bz, d) = row_dims(self.shape(*f), "pair_grid").unwrap();
                if self.needs(*f) {
                    let mut delta = vec![0.0f32; bz * d];
                    for i2 in 0..bz {
                        for j in 0..bz {
                            let g = &grad[(i2 * bz + j) * d..(i2 * bz + j + 1) * d];
                            for (dv, &gv) in delta[i2 * d..(i2 + 1) * d].iter_mut().zip(g.iter()) {
                                *dv += gv;
                            }
                        }
                    }
                    self.nodes[f.0].tensor.accumulate_grad(&delta);
                }
                if self.needs(*b) {
                    let mut delta = vec![0.0f32; bz * d];
                    for i2 in 0..bz {
                        for j in 0..bz {
                            let g = &grad[(i2 * bz + j) * d..(i2 * bz + j + 1) * d];
                            for (dv, &gv) in delta[j * d..(j + 1) * d].iter_mut().zip(g.iter()) {
                                *dv += gv;
                            }
                        }
                    }
                    self.nodes[b.0].tensor.accumulate_grad(&delta);
                }
            }
            Op::CosineMatrix { a, b } => self.backward_cosine_matrix(*a, *b, &grad),
            Op::CrossEntropyMean { z, labels } => {
                if self.needs(*z) {
                    let (m, n) = row_dims(self.shape(*z), "cross_entropy_mean").unwrap();
                    let zd = self.data(*z);
                    let mut delta = vec![0.0f32; m * n];
                    let mut probs = vec![0.0f32; n];
                    let gm = grad[0] / m as f32;
                    for r in 0..m {
                        softmax_row(&zd[r * n..(r + 1) * n], 1.0, &mut probs);
                        for j in 0..n {
                            let ind = if j == labels[r] { 1.0 } else { 0.0 };
                            delta[r * n + j] = (probs[j] - ind) * gm;
                        }
                    }
                    self.nodes[z.0].tensor.accumulate_grad(&delta);
                }
            }
            Op::EntropyMean { z } => {
                if self.needs(*z) {
                    let (m, n) = row_dims(self.shape(*z), "entropy_mean").unwrap();
                    let zd = self.data(*z);
                    let mut delta = vec![0.0f32; m * n];
                    let mut probs = vec![0.0f32; n];
                    let gm = grad[0] / m as f32;
                    for r in 0..m {
                        softmax_row(&zd[r * n..(r + 1) * n], 1.0, &mut probs);
                        let h = entropy_of(&probs) as f32;
                        for j in 0..n {
                            let lp = if probs[j] > 0.0 { probs[j].ln() } else { 0.0 };
                            delta[r * n + j] = -probs[j] * (lp + h) * gm;
                        }
                    }
                    self.nodes[z.0].tensor.accumulate_grad(&delta);
                }
            }
            Op::KlTempMean { p, q, temp } => {
                let (m, n) = row_dims(self.shape(*p), "kl_temp_mean").unwrap();
                let gm = grad[0] / (m as f32 * temp);
                let (pd, qd) = (self.data(*p).to_vec(), self.data(*q).to_vec());
                if self.needs(*p) {
                    let mut delta = vec![0.0f32; m * n];
                    for r in 0..m {
                        let (lp, _) = log_softmax_row(&pd[r * n..(r + 1) * n], *temp);
                        let (lq, _) = log_softmax_row(&qd[r * n..(r + 1) * n], *temp);
                        let mut kl = 0.0f64;
                        for j in 0..n {
                            kl += lp[j].exp() * (lp[j] - lq[j]);
                        }
                        for j in 0..n {
                            delta[r * n + j] =
                                (lp[j].exp() * (lp[j] - lq[j] - kl)) as f32 * gm;
                        }
                    }
                    self.nodes[p.0].tensor.accumulate_grad(&delta);
                }
                if self.needs(*q) {
                    let mut delta = vec![0.0f32; m * n];
                    for r in 0..m {
                        let (lp, _) = log_softmax_row(&pd[r * n..(r + 1) * n], *temp);
                        let (lq, _) = log_softmax_row(&qd[r * n..(r + 1) * n], *temp);
                        for j in 0..n {
                            delta[r * n + j] = (lq[j].exp() - lp[j].exp()) as f32 * gm;
                        }
                    }
                    self.nodes[q.0].tensor.accumulate_grad(&delta);
                }
            }
        }
        self.nodes[i].op = op;
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_conv2d(
        &mut self,
        out: usize,
        x: TensorId,
        w: TensorId,
        b: TensorId,
        stride: usize,
        pad: usize,
        cols: &[f32],
        grad: &[f32],
    ) {
        let (bz, ci, h, wdt) = batched_dims(self.shape(x), "conv2d").unwrap();
        let ws = self.shape(w);
        let (co, k) = (ws[0], ws[2]);
        let out_shape = self.nodes[out].tensor.shape();
        let r = out_shape.len();
        let (ho, wo) = (out_shape[r - 2], out_shape[r - 1]);
        let kk = ci * k * k;
        let n = ho * wo;

        let needs_x = self.needs(x);
        let needs_w = self.needs(w);
        let needs_b = self.needs(b);

        let mut dw = if needs_w { vec![0.0f32; co * kk] } else { Vec::new() };
        let mut db = if needs_b { vec![0.0f32; co] } else { Vec::new() };
        let mut dx = if needs_x {
            vec![0.0f32; bz * ci * h * wdt]
        } else {
            Vec::new()
        };

        let wd = self.data(w).to_vec();
        let mut cols_t = if needs_w { vec![0.0f32; n * kk] } else { Vec::new() };
        let mut dcols = if needs_x { vec![0.0f32; kk * n] } else { Vec::new() };

        for img in 0..bz {
            let g = &grad[img * co * n..(img + 1) * co * n];
            let c = &cols[img * kk * n..(img + 1) * kk * n];

            if needs_b {
                for i in 0..co {
                    let s: f64 = g[i * n..(i + 1) * n].iter().map(|&v| v as f64).sum();
                    db[i] += s as f32;
                }
            }
            if needs_w {
                // dW[i,p] += sum_n g[i,n] * cols[p,n]; transpose cols once so
                // the inner accumulation runs over contiguous rows.
                transpose(c, kk, n, &mut cols_t);
                for i in 0..co {
                    let dwrow = &mut dw[i * kk..(i + 1) * kk];
                    let grow = &g[i * n..(i + 1) * n];
                    for (nn, &gv) in grow.iter().enumerate() {
                        if gv == 0.0 {
                            continue;
                        }
                        let ct = &cols_t[nn * kk..(nn + 1) * kk];
                        for (dwv, &cv) in dwrow.iter_mut().zip(ct.iter()) {
                            *dwv += gv * cv;
                        }
                    }
                }
            }
            if needs_x {
                // dcols[p,n] = sum_i w[i,p] * g[i,n], then scatter back.
                dcols.fill(0.0);
                for i in 0..co {
                    let grow = &g[i * n..(i + 1) * n];
                    let wrow = &wd[i * kk..(i + 1) * kk];
                    for (p, &wip) in wrow.iter().enumerate() {
                        let drow = &mut dcols[p * n..(p + 1) * n];
                        for (dv, &gv) in drow.iter_mut().zip(grow.iter()) {
                            *dv += wip * gv;
                        }
                    }
                }
                col2im_add(
                    &dcols,
                    ci,
                    h,
                    wdt,
                    k,
                    stride,
                    pad,
                    ho,
                    wo,
                    &mut dx[img * ci * h * wdt..(img + 1) * ci * h * wdt],
                );
            }
        }

        if needs_x {
            self.nodes[x.0].tensor.accumulate_grad(&dx);
        }
        if needs_w {
            self.nodes[w.0].tensor.accumulate_grad(&dw);
        }
        if needs_b {
            self.nodes[b.0].tensor.accumulate_grad(&db);
        }
    }

    fn backward_linear(&mut self, x: TensorId, w: TensorId, b: TensorId, grad: &[f32]) {
        let (m, d) = row_dims(self.shape(x), "linear").unwrap();
        let n = self.shape(w)[0];
        if self.needs(x) {
            let wd = self.data(w);
            let mut dx = vec![0.0f32; m * d];
            for r in 0..m {
                let dxr = &mut dx[r * d..(r + 1) * d];
                for j in 0..n {
                    let g = grad[r * n + j];
                    let wr = &wd[j * d..(j + 1) * d];
                    for (dv, &wv) in dxr.iter_mut().zip(wr.iter()) {
                        *dv += g * wv;
                    }
                }
            }
            self.nodes[x.0].tensor.accumulate_grad(&dx);
        }
        if self.needs(w) {
            let xd = self.data(x);
            let mut dw = vec![0.0f32; n * d];
            for r in 0..m {
                let xr = &xd[r * d..(r + 1) * d];
                for j in 0..n {
                    let g = grad[r * n + j];
                    let dwr = &mut dw[j * d..(j + 1) * d];
                    for (dv, &xv) in dwr.iter_mut().zip(xr.iter()) {
                        *dv += g * xv;
                    }
                }
            }
            self.nodes[w.0].tensor.accumulate_grad(&dw);
        }
        if self.needs(b) {
            let mut dbv = vec![0.0f32; n];
            for r in 0..m {
                for j in 0..n {
                    dbv[j] += grad[r * n + j];
                }
            }
            self.nodes[b.0].tensor.accumulate_grad(&dbv);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_batchnorm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        mode: BnMode,
        mean: &[f32],
        inv_std: &[f32],
        grad: &[f32],
    ) {
        let shape = self.shape(x).to_vec();
        let (bz, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let plane = h * w;
        let m = (bz * plane) as f64;
        let xd = self.data(x).to_vec();
        let gd = self.data(gamma).to_vec();

        let needs_x = self.needs(x);
        let needs_gamma = self.needs(gamma);
        let needs_beta = self.needs(beta);

        let mut dx = if needs_x { vec![0.0f32; xd.len()] } else { Vec::new() };
        let mut dgamma = if needs_gamma { vec![0.0f32; c] } else { Vec::new() };
        let mut dbeta = if needs_beta { vec![0.0f32; c] } else { Vec::new() };

        for ch in 0..c {
            let mu = mean[ch];
            let istd = inv_std[ch];
            let mut s1 = 0.0f64; // sum of upstream grad
            let mut s2 = 0.0f64; // sum of upstream grad * xhat
            for img in 0..bz {
                let off = (img * c + ch) * plane;
                for idx in off..off + plane {
                    let xhat = (xd[idx] - mu) * istd;
                    let g = grad[idx] as f64;
                    s1 += g;
                    s2 += g * xhat as f64;
                }
            }
            if needs_gamma {
                dgamma[ch] = s2 as f32;
            }
            if needs_beta {
                dbeta[ch] = s1 as f32;
            }
            if needs_x {
                let gch = gd[ch];
                if mode.uses_batch_stats() {
                    let s1m = (s1 / m) as f32;
                    let s2m = (s2 / m) as f32;
                    for img in 0..bz {
                        let off = (img * c + ch) * plane;
                        for idx in off..off + plane {
                            let xhat = (xd[idx] - mu) * istd;
                            dx[idx] = gch * istd * (grad[idx] - s1m - xhat * s2m);
                        }
                    }
                } else {
                    // Eval: statistics are constants.
                    for img in 0..bz {
                        let off = (img * c + ch) * plane;
                        for idx in off..off + plane {
                            dx[idx] = gch * istd * grad[idx];
                        }
                    }
                }
            }
        }
        if needs_x {
            self.nodes[x.0].tensor.accumulate_grad(&dx);
        }
        if needs_gamma {
            self.nodes[gamma.0].tensor.accumulate_grad(&dgamma);
        }
        if needs_beta {
            self.nodes[beta.0].tensor.accumulate_grad(&dbeta);
        }
    }

    fn backward_cosine_matrix(&mut self, a: TensorId, b: TensorId, grad: &[f32]) {
        let (m, d) = row_dims(self.shape(a), "cosine_matrix").unwrap();
        let (k, _) = row_dims(self.shape(b), "cosine_matrix").unwrap();
        let ad = self.data(a).to_vec();
        let bd = self.data(b).to_vec();
        let na: Vec<f32> = (0..m).map(|r| norm(&ad[r * d..(r + 1) * d])).collect();
        let nb: Vec<f32> = (0..k).map(|c| norm(&bd[c * d..(c + 1) * d])).collect();

        let needs_a = self.needs(a);
        let needs_b = self.needs(b);
        let mut da = if needs_a { vec![0.0f32; m * d] } else { Vec::new() };
        let mut db = if needs_b { vec![0.0f32; k * d] } else { Vec::new() };

        for r in 0..m {
            let ar = &ad[r * d..(r + 1) * d];
            for c in 0..k {
                let g = grad[r * k + c];
                if g == 0.0 {
                    continue;
                }
                let br = &bd[c * d..(c + 1) * d];
                let prod = na[r] * nb[c];
                if prod > COSINE_EPS {
                    let denom = prod;
                    let dotv = dot(ar, br);
                    let cos = dotv / denom;
                    if needs_a {
                        let inv_na2 = 1.0 / (na[r] * na[r]);
                        let dar = &mut da[r * d..(r + 1) * d];
                        for t in 0..d {
                            dar[t] += g * (br[t] / denom - cos * ar[t] * inv_na2);
                        }
                    }
                    if needs_b {
                        let inv_nb2 = 1.0 / (nb[c] * nb[c]);
                        let dbr = &mut db[c * d..(c + 1) * d];
                        for t in 0..d {
                            dbr[t] += g * (ar[t] / denom - cos * br[t] * inv_nb2);
                        }
                    }
                } else {
                    // Clamped branch: denominator is the constant 1e-8.
                    let inv = 1.0 / COSINE_EPS;
                    if needs_a {
                        let dar = &mut da[r * d..(r + 1) * d];
                        for t in 0..d {
                            dar[t] += g * br[t] * inv;
                        }
                    }
                    if needs_b {
                        let dbr = &mut db[c * d..(c + 1) * d];
                        for t in 0..d {
                            dbr[t] += g * ar[t] * inv;
                        }
                    }
                }
            }
        }
        if needs_a {
            self.nodes[a.0].tensor.accumulate_grad(&da);
        }
        if needs_b {
            self.nodes[b.0].tensor.accumulate_grad(&db);
        }
    }
}

// ── numeric kernels ─────────────────────────────────────────────────────

fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0.0f32;
    for (x, y) in a.iter().zip(b.iter()) {
        acc += x * y;
    }
    acc
}

fn norm(a: &[f32]) -> f32 {
    let mut acc = 0.0f64;
    for &x in a {
        acc += x as f64 * x as f64;
    }
    (acc.sqrt()) as f32
}

/// Row softmax with max-shift: exp((z - max)/T) normalized to sum 1.
pub(crate) fn softmax_row(row: &[f32], temp: f32, out: &mut [f32]) {
    let maxv = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f64;
    for (o, &v) in out.iter_mut().zip(row.iter()) {
        let e = (((v - maxv) / temp) as f64).exp();
        *o = e as f32;
        sum += e;
    }
    let inv = (1.0 / sum) as f32;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

/// Row log-softmax at temperature, in f64 for stable loss math.
fn log_softmax_row(row: &[f32], temp: f32) -> (Vec<f64>, f64) {
    let maxv = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let t = temp as f64;
    let lse: f64 = row
        .iter()
        .map(|&v| ((v as f64 - maxv) / t).exp())
        .sum::<f64>()
        .ln();
    let lp: Vec<f64> = row
        .iter()
        .map(|&v| (v as f64 - maxv) / t - lse)
        .collect();
    (lp, lse)
}

/// Shannon entropy of a probability vector; terms below 1e-12 contribute 0.
pub(crate) fn entropy_of(probs: &[f32]) -> f64 {
    let mut h = 0.0f64;
    for &p in probs {
        let pd = p as f64;
        if pd >= 1e-12 {
            h -= pd * pd.ln();
        }
    }
    h
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f32],
    ci: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    cols: &mut [f32],
) {
    let n = ho * wo;
    let mut row = 0usize;
    for c in 0..ci {
        let xc = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let src = &xc[iy as usize * w..(iy as usize + 1) * w];
                    if stride == 1 {
                        // Valid ox span: 0 <= ox + kx - pad < w.
                        let lo = pad.saturating_sub(kx);
                        let hi = (w + pad - kx).min(wo);
                        drow[..lo.min(wo)].fill(0.0);
                        if lo < hi {
                            drow[lo..hi]
                                .copy_from_slice(&src[lo + kx - pad..hi + kx - pad]);
                        }
                        if hi < wo {
                            drow[hi..].fill(0.0);
                        }
                    } else {
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            *d = if ix < 0 || ix >= w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-add of a column buffer back into image layout (adjoint of im2col).
#[allow(clippy::too_many_arguments)]
fn col2im_add(
    cols: &[f32],
    ci: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    x: &mut [f32],
) {
    let n = ho * wo;
    let mut row = 0usize;
    for c in 0..ci {
        let xc = &mut x[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let srow = &src[oy * wo..(oy + 1) * wo];
                    let dst = &mut xc[iy as usize * w..(iy as usize + 1) * w];
                    if stride == 1 {
                        let lo = pad.saturating_sub(kx);
                        let hi = (w + pad - kx).min(wo);
                        if lo < hi {
                            let doff = lo + kx - pad;
                            for (d, &s) in dst[doff..doff + (hi - lo)]
                                .iter_mut()
                                .zip(srow[lo..hi].iter())
                            {
                                *d += s;
                            }
                        }
                    } else {
                        for (ox, &s) in srow.iter().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += s;
                            }
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// out[m, n] = w[m, kk] * cols[kk, n] + bias (broadcast per row of out).
fn gemm_bias(w: &[f32], cols: &[f32], bias: &[f32], m: usize, kk: usize, n: usize, out: &mut [f32]) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        orow.fill(bias[i]);
        let wrow = &w[i * kk..(i + 1) * kk];
        for (p, &wp) in wrow.iter().enumerate() {
            let crow = &cols[p * n..(p + 1) * n];
            for (o, &cv) in orow.iter_mut().zip(crow.iter()) {
                *o += wp * cv;
            }
        }
    }
}

fn transpose(src: &[f32], rows: usize, cols: usize, dst: &mut [f32]) {
    for r in 0..rows {
        for c in 0..cols {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
}
