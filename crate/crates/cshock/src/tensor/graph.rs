//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] is built append-only by immediate-mode ops; node indices are
//! already a topological order, so the backward pass is a single reverse
//! sweep. All reductions run in a fixed element order (including under
//! rayon, which only ever partitions disjoint output cells), so forward,
//! backward, and optimizer results are bit-reproducible.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{CshockError, Result};

/// Keeps sigmoid outputs strictly inside (0, 1) even at saturation.
const SIGMOID_FLOOR: f64 = 1e-12;

/// Work threshold below which op kernels stay single-threaded.
const PAR_THRESHOLD: usize = 250_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel running statistics consumed by eval-mode batch norm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BnRunning {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BnRunning {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

/// Batch statistics produced by a train-mode batch norm. The caller decides
/// whether to fold them into its running averages, so speculative forward
/// passes (e.g. finite-difference probes) leave no side effects.
#[derive(Clone, Debug)]
pub struct BnBatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub n_valid: f64,
}

struct Node {
    tensor: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Sum(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Dot(NodeId, NodeId),
    Linear {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    Conv {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        dilation: usize,
    },
    BatchNormTrain {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mask: Vec<f64>,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        n_valid: f64,
    },
    BatchNormEval {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Dropout {
        input: NodeId,
        scaled_mask: Vec<f64>,
    },
    /// First `len` timesteps of one batch element of a [B,1,T] or [B,T] tensor.
    TrajectorySlice {
        input: NodeId,
        batch: usize,
        len: usize,
    },
    SoftmaxWeighted {
        scores: NodeId,
        alpha: f64,
        weights: Vec<f64>,
    },
    CombineScalars {
        terms: Vec<(NodeId, f64)>,
    },
    MeanOverTime {
        input: NodeId,
        mask: Vec<f64>,
        inv_counts: Vec<f64>,
    },
    RowVec {
        input: NodeId,
        row: usize,
    },
    DotConst {
        input: NodeId,
        weights: Vec<f64>,
    },
    AddBroadcastScalar {
        vec: NodeId,
        scalar: NodeId,
    },
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].tensor
    }

    pub fn data(&self, id: NodeId) -> &[f64] {
        self.nodes[id.0].tensor.data()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].tensor.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Gradient buffer populated by the last backward pass.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn leaf(&mut self, tensor: Tensor, requires_grad: bool) -> NodeId {
        self.push(tensor, requires_grad, Op::Leaf)
    }

    /// Leaf that never tracks gradients.
    pub fn constant(&mut self, tensor: Tensor) -> NodeId {
        self.push(tensor, false, Op::Leaf)
    }

    fn push(&mut self, tensor: Tensor, requires_grad: bool, op: Op) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            tensor,
            grad: None,
            requires_grad,
            op,
        });
        id
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(CshockError::Shape(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let tensor = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(tensor, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "sub")?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x - y)
            .collect();
        let tensor = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(tensor, rg, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let tensor = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(tensor, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let data = self.data(a).iter().map(|x| c * x).collect();
        let tensor = Tensor::new(self.shape(a).to_vec(), data).expect("shape preserved");
        let rg = self.requires_grad(a);
        self.push(tensor, rg, Op::Scale(a, c))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let total: f64 = self.data(a).iter().sum();
        let rg = self.requires_grad(a);
        self.push(Tensor::scalar(total), rg, Op::Sum(a))
    }

    /// Elementwise max(0, x). The subgradient at exactly 0 is 0.
    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let data = self.data(a).iter().map(|x| x.max(0.0)).collect();
        let tensor = Tensor::new(self.shape(a).to_vec(), data).expect("shape preserved");
        let rg = self.requires_grad(a);
        self.push(tensor, rg, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let data = self.data(a).iter().map(|&x| stable_sigmoid(x)).collect();
        let tensor = Tensor::new(self.shape(a).to_vec(), data).expect("shape preserved");
        let rg = self.requires_grad(a);
        self.push(tensor, rg, Op::Sigmoid(a))
    }

    /// Inner product of two equal-length vectors, yielding a scalar.
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "dot")?;
        let total: f64 = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).sum();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(Tensor::scalar(total), rg, Op::Dot(a, b)))
    }

    /// weight [out, in] * input [in] + bias [out].
    pub fn linear(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let in_shape = self.shape(input).to_vec();
        let w_shape = self.shape(weight).to_vec();
        let b_shape = self.shape(bias).to_vec();
        if in_shape.len() != 1 || w_shape.len() != 2 || b_shape.len() != 1 {
            return Err(CshockError::Shape(format!(
                "linear expects input [in], weight [out,in], bias [out]; got {:?}, {:?}, {:?}",
                in_shape, w_shape, b_shape
            )));
        }
        let (out_dim, in_dim) = (w_shape[0], w_shape[1]);
        if in_shape[0] != in_dim || b_shape[0] != out_dim {
            return Err(CshockError::Shape(format!(
                "linear dimension mismatch: input {:?}, weight {:?}, bias {:?}",
                in_shape, w_shape, b_shape
            )));
        }
        let x = self.data(input);
        let w = self.data(weight);
        let b = self.data(bias);
        let mut out = vec![0.0; out_dim];
        for o in 0..out_dim {
            let row = &w[o * in_dim..(o + 1) * in_dim];
            let mut acc = b[o];
            for (wi, xi) in row.iter().zip(x) {
                acc += wi * xi;
            }
            out[o] = acc;
        }
        let rg = self.requires_grad(input) || self.requires_grad(weight) || self.requires_grad(bias);
        Ok(self.push(
            Tensor::vector(out),
            rg,
            Op::Linear {
                input,
                weight,
                bias,
            },
        ))
    }

    /// sigmoid(weight . input + bias) for a feature vector, a weight vector of
    /// the same length, and a scalar bias.
    pub fn linear_sigmoid(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        if !self.value(bias).is_scalar() {
            return Err(CshockError::Shape(format!(
                "linear_sigmoid bias must be a scalar, got shape {:?}",
                self.shape(bias)
            )));
        }
        let z = self.dot(weight, input)?;
        // dot() yields shape []; normalize bias access through scalar add.
        let zb = self.add_scalars(z, bias)?;
        Ok(self.sigmoid(zb))
    }

    fn add_scalars(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if !self.value(a).is_scalar() || !self.value(b).is_scalar() {
            return Err(CshockError::Shape("add_scalars expects scalars".into()));
        }
        let v = self.value(a).item() + self.value(b).item();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(Tensor::scalar(v), rg, Op::CombineScalars {
            terms: vec![(a, 1.0), (b, 1.0)],
        }))
    }

    /// Dilated causal 1-D convolution.
    ///
    /// Input is [C_in, T] or [B, C_in, T]; weight is [C_out, C_in, K]; the
    /// optional bias is [C_out]. The input is implicitly left-padded with
    /// (K-1)*dilation zeros so the output keeps length T and the value at
    /// time t depends only on inputs at times <= t. The last kernel tap
    /// reads the current timestep.
    pub fn dilated_causal_conv1d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        dilation: usize,
    ) -> Result<NodeId> {
        if dilation == 0 {
            return Err(CshockError::InvalidArgument(
                "conv dilation must be >= 1".into(),
            ));
        }
        let in_shape = self.shape(input).to_vec();
        let w_shape = self.shape(weight).to_vec();
        if w_shape.len() != 3 {
            return Err(CshockError::Shape(format!(
                "conv weight must be [C_out, C_in, K], got {:?}",
                w_shape
            )));
        }
        let (c_out, c_in, k) = (w_shape[0], w_shape[1], w_shape[2]);
        if k == 0 {
            return Err(CshockError::InvalidArgument(
                "conv kernel size must be >= 1".into(),
            ));
        }
        let (batched, b, in_c, t) = match in_shape.len() {
            2 => (false, 1, in_shape[0], in_shape[1]),
            3 => (true, in_shape[0], in_shape[1], in_shape[2]),
            _ => {
                return Err(CshockError::Shape(format!(
                    "conv input must be [C_in, T] or [B, C_in, T], got {:?}",
                    in_shape
                )))
            }
        };
        if in_c != c_in {
            return Err(CshockError::Shape(format!(
                "conv input channels {} do not match weight channels_in {}",
                in_c, c_in
            )));
        }
        if let Some(bias) = bias {
            let b_shape = self.shape(bias);
            if b_shape != [c_out] {
                return Err(CshockError::Shape(format!(
                    "conv bias must be [C_out]={}, got {:?}",
                    c_out, b_shape
                )));
            }
        }

        let x = self.data(input);
        let w = self.data(weight);
        let bias_data: Option<&[f64]> = bias.map(|n| self.nodes[n.0].tensor.data());
        let mut out = vec![0.0; b * c_out * t];
        let work = b * c_out * t * c_in * k;
        let run_row = |row_idx: usize, row: &mut [f64]| {
            let bi = row_idx / c_out;
            let o = row_idx % c_out;
            let init = bias_data.map_or(0.0, |bd| bd[o]);
            row.fill(init);
            for ci in 0..c_in {
                let xrow = &x[(bi * c_in + ci) * t..(bi * c_in + ci + 1) * t];
                for kk in 0..k {
                    let wv = w[(o * c_in + ci) * k + kk];
                    let off = (k - 1 - kk) * dilation;
                    if off >= t {
                        continue;
                    }
                    for tt in off..t {
                        row[tt] += wv * xrow[tt - off];
                    }
                }
            }
        };
        if work >= PAR_THRESHOLD {
            out.par_chunks_mut(t)
                .enumerate()
                .for_each(|(row_idx, row)| run_row(row_idx, row));
        } else {
            for (row_idx, row) in out.chunks_mut(t).enumerate() {
                run_row(row_idx, row);
            }
        }

        let out_shape = if batched {
            vec![b, c_out, t]
        } else {
            vec![c_out, t]
        };
        let rg = self.requires_grad(input)
            || self.requires_grad(weight)
            || bias.map_or(false, |n| self.requires_grad(n));
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            rg,
            Op::Conv {
                input,
                weight,
                bias,
                dilation,
            },
        ))
    }

    /// Train-mode batch norm over [B, C, T] with a [B, T] validity mask.
    ///
    /// Statistics are computed per channel over the masked (valid) positions
    /// only; padded positions are still normalized with those statistics so
    /// downstream shapes stay rectangular. Returns the batch statistics for
    /// the caller's running-average update.
    pub fn batch_norm_train(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mask: &[f64],
        eps: f64,
    ) -> Result<(NodeId, BnBatchStats)> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 3 {
            return Err(CshockError::Shape(format!(
                "batch norm input must be [B, C, T], got {:?}",
                shape
            )));
        }
        let (b, c, t) = (shape[0], shape[1], shape[2]);
        if mask.len() != b * t {
            return Err(CshockError::Shape(format!(
                "batch norm mask must have {}x{}={} entries, got {}",
                b,
                t,
                b * t,
                mask.len()
            )));
        }
        self.check_bn_affine(gamma, beta, c)?;
        let n_valid: f64 = mask.iter().sum();
        if n_valid < 2.0 {
            return Err(CshockError::InvalidArgument(format!(
                "batch norm in train mode needs >= 2 valid positions, found {}",
                n_valid
            )));
        }

        let x = self.data(input);
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        let stat = |ch: usize| -> (f64, f64) {
            let mut sum = 0.0;
            for bi in 0..b {
                let xrow = &x[(bi * c + ch) * t..(bi * c + ch + 1) * t];
                let mrow = &mask[bi * t..(bi + 1) * t];
                for (xv, mv) in xrow.iter().zip(mrow) {
                    sum += xv * mv;
                }
            }
            let m = sum / n_valid;
            let mut sq = 0.0;
            for bi in 0..b {
                let xrow = &x[(bi * c + ch) * t..(bi * c + ch + 1) * t];
                let mrow = &mask[bi * t..(bi + 1) * t];
                for (xv, mv) in xrow.iter().zip(mrow) {
                    let d = xv - m;
                    sq += d * d * mv;
                }
            }
            (m, sq / n_valid)
        };
        if b * c * t >= PAR_THRESHOLD {
            let stats: Vec<(f64, f64)> = (0..c).into_par_iter().map(stat).collect();
            for (ch, (m, v)) in stats.into_iter().enumerate() {
                mean[ch] = m;
                var[ch] = v;
            }
        } else {
            for ch in 0..c {
                let (m, v) = stat(ch);
                mean[ch] = m;
                var[ch] = v;
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();

        let g = self.data(gamma);
        let be = self.data(beta);
        let mut out = vec![0.0; b * c * t];
        for bi in 0..b {
            for ch in 0..c {
                let base = (bi * c + ch) * t;
                let (m, inv) = (mean[ch], inv_std[ch]);
                let (gc, bc) = (g[ch], be[ch]);
                for tt in 0..t {
                    out[base + tt] = gc * (x[base + tt] - m) * inv + bc;
                }
            }
        }

        let stats = BnBatchStats {
            mean: mean.clone(),
            var: var.clone(),
            n_valid,
        };
        let rg =
            self.requires_grad(input) || self.requires_grad(gamma) || self.requires_grad(beta);
        let node = self.push(
            Tensor::new(shape, out)?,
            rg,
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                mask: mask.to_vec(),
                mean,
                inv_std,
                n_valid,
            },
        );
        Ok((node, stats))
    }

    /// Eval-mode batch norm using frozen running statistics.
    pub fn batch_norm_eval(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running: &BnRunning,
        eps: f64,
    ) -> Result<NodeId> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 3 {
            return Err(CshockError::Shape(format!(
                "batch norm input must be [B, C, T], got {:?}",
                shape
            )));
        }
        let (b, c, t) = (shape[0], shape[1], shape[2]);
        self.check_bn_affine(gamma, beta, c)?;
        if running.mean.len() != c || running.var.len() != c {
            return Err(CshockError::Shape(format!(
                "running statistics track {} channels, input has {}",
                running.mean.len(),
                c
            )));
        }
        let inv_std: Vec<f64> = running.var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let x = self.data(input);
        let g = self.data(gamma);
        let be = self.data(beta);
        let mut out = vec![0.0; b * c * t];
        for bi in 0..b {
            for ch in 0..c {
                let base = (bi * c + ch) * t;
                let (m, inv) = (running.mean[ch], inv_std[ch]);
                let (gc, bc) = (g[ch], be[ch]);
                for tt in 0..t {
                    out[base + tt] = gc * (x[base + tt] - m) * inv + bc;
                }
            }
        }
        let rg =
            self.requires_grad(input) || self.requires_grad(gamma) || self.requires_grad(beta);
        Ok(self.push(
            Tensor::new(shape, out)?,
            rg,
            Op::BatchNormEval {
                input,
                gamma,
                beta,
                mean: running.mean.clone(),
                inv_std,
            },
        ))
    }

    fn check_bn_affine(&self, gamma: NodeId, beta: NodeId, c: usize) -> Result<()> {
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(CshockError::Shape(format!(
                "batch norm scale/shift must be [{}], got {:?} and {:?}",
                c,
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        Ok(())
    }

    /// Inverted dropout. Train mode zeroes each element independently with
    /// probability `rate` and rescales survivors by 1/(1-rate); eval mode
    /// returns the input node unchanged.
    pub fn dropout(
        &mut self,
        input: NodeId,
        rate: f64,
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(CshockError::InvalidArgument(format!(
                "dropout rate must be in [0, 1), got {}",
                rate
            )));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(input);
        }
        let scale = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.data(input).len())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { scale })
            .collect();
        let data = self
            .data(input)
            .iter()
            .zip(&mask)
            .map(|(x, m)| x * m)
            .collect();
        let tensor = Tensor::new(self.shape(input).to_vec(), data)?;
        let rg = self.requires_grad(input);
        Ok(self.push(
            tensor,
            rg,
            Op::Dropout {
                input,
                scaled_mask: mask,
            },
        ))
    }

    /// First `len` timesteps of batch element `batch` from a [B,1,T], [B,T]
    /// or [T] tensor, as a [len] vector.
    pub fn trajectory_slice(&mut self, input: NodeId, batch: usize, len: usize) -> Result<NodeId> {
        let shape = self.shape(input).to_vec();
        let (b, t) = match shape.len() {
            1 => (1, shape[0]),
            2 => (shape[0], shape[1]),
            3 if shape[1] == 1 => (shape[0], shape[2]),
            _ => {
                return Err(CshockError::Shape(format!(
                    "trajectory slice expects [T], [B,T] or [B,1,T], got {:?}",
                    shape
                )))
            }
        };
        if batch >= b {
            return Err(CshockError::Shape(format!(
                "batch index {} out of range for batch size {}",
                batch, b
            )));
        }
        if len == 0 || len > t {
            return Err(CshockError::Shape(format!(
                "slice length {} invalid for sequence length {}",
                len, t
            )));
        }
        let data = self.data(input)[batch * t..batch * t + len].to_vec();
        let rg = self.requires_grad(input);
        Ok(self.push(
            Tensor::vector(data),
            rg,
            Op::TrajectorySlice { input, batch, len },
        ))
    }

    /// Softmax(alpha * r)^T r for a nonempty score vector; a smooth proxy for
    /// max(r) that sharpens as alpha grows.
    pub fn softmax_weighted(&mut self, scores: NodeId, alpha: f64) -> Result<NodeId> {
        if alpha <= 0.0 {
            return Err(CshockError::InvalidArgument(format!(
                "softmax temperature must be > 0, got {}",
                alpha
            )));
        }
        let r = self.data(scores);
        if r.is_empty() {
            return Err(CshockError::InvalidArgument(
                "softmax-weighted risk of an empty score list".into(),
            ));
        }
        let weights = softmax_weights(r, alpha);
        let value: f64 = weights.iter().zip(r).map(|(w, x)| w * x).sum();
        let rg = self.requires_grad(scores);
        Ok(self.push(
            Tensor::scalar(value),
            rg,
            Op::SoftmaxWeighted {
                scores,
                alpha,
                weights,
            },
        ))
    }

    /// Weighted sum of scalar nodes: sum_i coeff_i * x_i.
    pub fn combine_scalars(&mut self, terms: &[(NodeId, f64)]) -> Result<NodeId> {
        if terms.is_empty() {
            return Err(CshockError::InvalidArgument(
                "combine_scalars needs at least one term".into(),
            ));
        }
        let mut total = 0.0;
        let mut rg = false;
        for &(id, coeff) in terms {
            if !self.value(id).is_scalar() {
                return Err(CshockError::Shape(format!(
                    "combine_scalars term has shape {:?}, expected scalar",
                    self.shape(id)
                )));
            }
            total += coeff * self.value(id).item();
            rg |= self.requires_grad(id);
        }
        Ok(self.push(
            Tensor::scalar(total),
            rg,
            Op::CombineScalars {
                terms: terms.to_vec(),
            },
        ))
    }

    /// Mean over valid timesteps per (batch, channel): [B,C,T] + [B,T] mask -> [B,C].
    pub fn mean_over_time(&mut self, input: NodeId, mask: &[f64]) -> Result<NodeId> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 3 {
            return Err(CshockError::Shape(format!(
                "mean_over_time expects [B, C, T], got {:?}",
                shape
            )));
        }
        let (b, c, t) = (shape[0], shape[1], shape[2]);
        if mask.len() != b * t {
            return Err(CshockError::Shape(format!(
                "mean_over_time mask must have {} entries, got {}",
                b * t,
                mask.len()
            )));
        }
        let mut inv_counts = vec![0.0; b];
        for bi in 0..b {
            let n: f64 = mask[bi * t..(bi + 1) * t].iter().sum();
            if n < 1.0 {
                return Err(CshockError::InvalidArgument(format!(
                    "mean_over_time: batch element {} has no valid timesteps",
                    bi
                )));
            }
            inv_counts[bi] = 1.0 / n;
        }
        let x = self.data(input);
        let mut out = vec![0.0; b * c];
        for bi in 0..b {
            for ch in 0..c {
                let base = (bi * c + ch) * t;
                let mut acc = 0.0;
                for tt in 0..t {
                    acc += x[base + tt] * mask[bi * t + tt];
                }
                out[bi * c + ch] = acc * inv_counts[bi];
            }
        }
        let rg = self.requires_grad(input);
        Ok(self.push(
            Tensor::new(vec![b, c], out)?,
            rg,
            Op::MeanOverTime {
                input,
                mask: mask.to_vec(),
                inv_counts,
            },
        ))
    }

    /// Row `row` of a [B, C] tensor as a [C] vector.
    pub fn row_vec(&mut self, input: NodeId, row: usize) -> Result<NodeId> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 2 {
            return Err(CshockError::Shape(format!(
                "row_vec expects [B, C], got {:?}",
                shape
            )));
        }
        let (b, c) = (shape[0], shape[1]);
        if row >= b {
            return Err(CshockError::Shape(format!(
                "row {} out of range for {} rows",
                row, b
            )));
        }
        let data = self.data(input)[row * c..(row + 1) * c].to_vec();
        let rg = self.requires_grad(input);
        Ok(self.push(Tensor::vector(data), rg, Op::RowVec { input, row }))
    }

    /// Inner product with a constant vector, yielding a scalar.
    pub fn dot_const(&mut self, input: NodeId, weights: &[f64]) -> Result<NodeId> {
        if self.data(input).len() != weights.len() {
            return Err(CshockError::Shape(format!(
                "dot_const length mismatch: {} vs {}",
                self.data(input).len(),
                weights.len()
            )));
        }
        let total: f64 = self.data(input).iter().zip(weights).map(|(x, w)| x * w).sum();
        let rg = self.requires_grad(input);
        Ok(self.push(
            Tensor::scalar(total),
            rg,
            Op::DotConst {
                input,
                weights: weights.to_vec(),
            },
        ))
    }

    /// vec[i] + scalar for every i.
    pub fn add_broadcast_scalar(&mut self, vec: NodeId, scalar: NodeId) -> Result<NodeId> {
        if !self.value(scalar).is_scalar() {
            return Err(CshockError::Shape(format!(
                "add_broadcast_scalar expects a scalar addend, got {:?}",
                self.shape(scalar)
            )));
        }
        let s = self.value(scalar).item();
        let data = self.data(vec).iter().map(|x| x + s).collect();
        let tensor = Tensor::new(self.shape(vec).to_vec(), data)?;
        let rg = self.requires_grad(vec) || self.requires_grad(scalar);
        Ok(self.push(tensor, rg, Op::AddBroadcastScalar { vec, scalar }))
    }

    /// Reverse pass from a scalar loss. Populates `grad` on every node that
    /// requires gradients; buffers from a previous backward call are replaced,
    /// not accumulated into.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if !self.nodes[loss.0].tensor.is_scalar() {
            return Err(CshockError::InvalidArgument(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..n).rev() {
            let Some(gout) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &gout, &mut grads);
            self.nodes[i].grad = Some(gout);
        }
        Ok(())
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn accumulate<'a>(
        grads: &'a mut [Option<Vec<f64>>],
        id: NodeId,
        len: usize,
    ) -> &'a mut Vec<f64> {
        grads[id.0].get_or_insert_with(|| vec![0.0; len])
    }

    fn propagate(&self, i: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.wants(*a) {
                    let ga = Self::accumulate(grads, *a, gout.len());
                    for (g, go) in ga.iter_mut().zip(gout) {
                        *g += go;
                    }
                }
                if self.wants(*b) {
                    let gb = Self::accumulate(grads, *b, gout.len());
                    for (g, go) in gb.iter_mut().zip(gout) {
                        *g += go;
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    let ga = Self::accumulate(grads, *a, gout.len());
                    for (g, go) in ga.iter_mut().zip(gout) {
                        *g += go;
                    }
                }
                if self.wants(*b) {
                    let gb = Self::accumulate(grads, *b, gout.len());
                    for (g, go) in gb.iter_mut().zip(gout) {
                        *g -= go;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.wants(a) {
                    let bd = self.data(b).to_vec();
                    let ga = Self::accumulate(grads, a, gout.len());
                    for ((g, go), bv) in ga.iter_mut().zip(gout).zip(&bd) {
                        *g += go * bv;
                    }
                }
                if self.wants(b) {
                    let ad = self.data(a).to_vec();
                    let gb = Self::accumulate(grads, b, gout.len());
                    for ((g, go), av) in gb.iter_mut().zip(gout).zip(&ad) {
                        *g += go * av;
                    }
                }
            }
            Op::Scale(a, c) => {
                if self.wants(*a) {
                    let ga = Self::accumulate(grads, *a, gout.len());
                    for (g, go) in ga.iter_mut().zip(gout) {
                        *g += c * go;
                    }
                }
            }
            Op::Sum(a) => {
                if self.wants(*a) {
                    let len = self.data(*a).len();
                    let ga = Self::accumulate(grads, *a, len);
                    for g in ga.iter_mut() {
                        *g += gout[0];
                    }
                }
            }
            Op::Relu(a) => {
                if self.wants(*a) {
                    let xd = self.data(*a).to_vec();
                    let ga = Self::accumulate(grads, *a, gout.len());
                    for ((g, go), x) in ga.iter_mut().zip(gout).zip(&xd) {
                        if *x > 0.0 {
                            *g += go;
                        }
                    }
                }
            }
            Op::Sigmoid(a) => {
                if self.wants(*a) {
                    let yd = self.nodes[i].tensor.data().to_vec();
                    let ga = Self::accumulate(grads, *a, gout.len());
                    for ((g, go), y) in ga.iter_mut().zip(gout).zip(&yd) {
                        *g += go * y * (1.0 - y);
                    }
                }
            }
            Op::Dot(a, b) => {
                let (a, b) = (*a, *b);
                let g0 = gout[0];
                if self.wants(a) {
                    let bd = self.data(b).to_vec();
                    let ga = Self::accumulate(grads, a, bd.len());
                    for (g, bv) in ga.iter_mut().zip(&bd) {
                        *g += g0 * bv;
                    }
                }
                if self.wants(b) {
                    let ad = self.data(a).to_vec();
                    let gb = Self::accumulate(grads, b, ad.len());
                    for (g, av) in gb.iter_mut().zip(&ad) {
                        *g += g0 * av;
                    }
                }
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let (input, weight, bias) = (*input, *weight, *bias);
                let in_dim = self.data(input).len();
                let out_dim = gout.len();
                if self.wants(input) {
                    let w = self.data(weight).to_vec();
                    let gi = Self::accumulate(grads, input, in_dim);
                    for o in 0..out_dim {
                        let row = &w[o * in_dim..(o + 1) * in_dim];
                        for (g, wv) in gi.iter_mut().zip(row) {
                            *g += gout[o] * wv;
                        }
                    }
                }
                if self.wants(weight) {
                    let x = self.data(input).to_vec();
                    let gw = Self::accumulate(grads, weight, out_dim * in_dim);
                    for o in 0..out_dim {
                        let row = &mut gw[o * in_dim..(o + 1) * in_dim];
                        for (g, xv) in row.iter_mut().zip(&x) {
                            *g += gout[o] * xv;
                        }
                    }
                }
                if self.wants(bias) {
                    let gb = Self::accumulate(grads, bias, out_dim);
                    for (g, go) in gb.iter_mut().zip(gout) {
                        *g += go;
                    }
                }
            }
            Op::Conv {
                input,
                weight,
                bias,
                dilation,
            } => {
                self.conv_backward(*input, *weight, *bias, *dilation, gout, grads);
            }
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                mask,
                mean,
                inv_std,
                n_valid,
            } => {
                self.bn_train_backward(
                    *input, *gamma, *beta, mask, mean, inv_std, *n_valid, gout, grads,
                );
            }
            Op::BatchNormEval {
                input,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                self.bn_eval_backward(*input, *gamma, *beta, mean, inv_std, gout, grads);
            }
            Op::Dropout { input, scaled_mask } => {
                if self.wants(*input) {
                    let gi = Self::accumulate(grads, *input, gout.len());
                    for ((g, go), m) in gi.iter_mut().zip(gout).zip(scaled_mask) {
                        *g += go * m;
                    }
                }
            }
            Op::TrajectorySlice { input, batch, len } => {
                if self.wants(*input) {
                    let total = self.data(*input).len();
                    let t = match self.shape(*input).len() {
                        1 => total,
                        _ => {
                            let shape = self.shape(*input);
                            shape[shape.len() - 1]
                        }
                    };
                    let gi = Self::accumulate(grads, *input, total);
                    for k in 0..*len {
                        gi[batch * t + k] += gout[k];
                    }
                }
            }
            Op::SoftmaxWeighted {
                scores,
                alpha,
                weights,
            } => {
                if self.wants(*scores) {
                    let r = self.data(*scores).to_vec();
                    let y = self.nodes[i].tensor.item();
                    let g0 = gout[0];
                    let gs = Self::accumulate(grads, *scores, r.len());
                    for ((g, w), rv) in gs.iter_mut().zip(weights).zip(&r) {
                        *g += g0 * w * (1.0 + alpha * (rv - y));
                    }
                }
            }
            Op::CombineScalars { terms } => {
                let g0 = gout[0];
                for &(id, coeff) in terms {
                    if self.wants(id) {
                        let gi = Self::accumulate(grads, id, 1);
                        gi[0] += g0 * coeff;
                    }
                }
            }
            Op::MeanOverTime {
                input,
                mask,
                inv_counts,
            } => {
                if self.wants(*input) {
                    let shape = self.shape(*input).to_vec();
                    let (b, c, t) = (shape[0], shape[1], shape[2]);
                    let gi = Self::accumulate(grads, *input, b * c * t);
                    for bi in 0..b {
                        for ch in 0..c {
                            let go = gout[bi * c + ch] * inv_counts[bi];
                            let base = (bi * c + ch) * t;
                            for tt in 0..t {
                                gi[base + tt] += go * mask[bi * t + tt];
                            }
                        }
                    }
                }
            }
            Op::RowVec { input, row } => {
                if self.wants(*input) {
                    let c = gout.len();
                    let total = self.data(*input).len();
                    let gi = Self::accumulate(grads, *input, total);
                    for (k, go) in gout.iter().enumerate() {
                        gi[row * c + k] += go;
                    }
                }
            }
            Op::DotConst { input, weights } => {
                if self.wants(*input) {
                    let g0 = gout[0];
                    let gi = Self::accumulate(grads, *input, weights.len());
                    for (g, w) in gi.iter_mut().zip(weights) {
                        *g += g0 * w;
                    }
                }
            }
            Op::AddBroadcastScalar { vec, scalar } => {
                if self.wants(*vec) {
                    let gv = Self::accumulate(grads, *vec, gout.len());
                    for (g, go) in gv.iter_mut().zip(gout) {
                        *g += go;
                    }
                }
                if self.wants(*scalar) {
                    let gs = Self::accumulate(grads, *scalar, 1);
                    gs[0] += gout.iter().sum::<f64>();
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        dilation: usize,
        gout: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let in_shape = self.shape(input);
        let w_shape = self.shape(weight);
        let (c_out, c_in, k) = (w_shape[0], w_shape[1], w_shape[2]);
        let (b, t) = match in_shape.len() {
            2 => (1, in_shape[1]),
            _ => (in_shape[0], in_shape[2]),
        };
        let work = b * c_out * t * c_in * k;

        if self.wants(input) {
            let w = self.data(weight).to_vec();
            let gi = Self::accumulate(grads, input, b * c_in * t);
            let run_row = |row_idx: usize, row: &mut [f64]| {
                let bi = row_idx / c_in;
                let ci = row_idx % c_in;
                for o in 0..c_out {
                    let grow = &gout[(bi * c_out + o) * t..(bi * c_out + o + 1) * t];
                    for kk in 0..k {
                        let wv = w[(o * c_in + ci) * k + kk];
                        let off = (k - 1 - kk) * dilation;
                        if off >= t {
                            continue;
                        }
                        for tt in off..t {
                            row[tt - off] += wv * grow[tt];
                        }
                    }
                }
            };
            if work >= PAR_THRESHOLD {
                gi.par_chunks_mut(t)
                    .enumerate()
                    .for_each(|(row_idx, row)| run_row(row_idx, row));
            } else {
                for (row_idx, row) in gi.chunks_mut(t).enumerate() {
                    run_row(row_idx, row);
                }
            }
        }

        if self.wants(weight) {
            let x = self.data(input);
            let gw = Self::accumulate(grads, weight, c_out * c_in * k);
            let run_out = |o: usize, chunk: &mut [f64]| {
                for ci in 0..c_in {
                    for kk in 0..k {
                        let off = (k - 1 - kk) * dilation;
                        if off >= t {
                            continue;
                        }
                        let mut acc = 0.0;
                        for bi in 0..b {
                            let grow = &gout[(bi * c_out + o) * t..(bi * c_out + o + 1) * t];
                            let xrow = &x[(bi * c_in + ci) * t..(bi * c_in + ci + 1) * t];
                            for tt in off..t {
                                acc += grow[tt] * xrow[tt - off];
                            }
                        }
                        chunk[ci * k + kk] += acc;
                    }
                }
            };
            if work >= PAR_THRESHOLD {
                gw.par_chunks_mut(c_in * k)
                    .enumerate()
                    .for_each(|(o, chunk)| run_out(o, chunk));
            } else {
                for (o, chunk) in gw.chunks_mut(c_in * k).enumerate() {
                    run_out(o, chunk);
                }
            }
        }

        if let Some(bias) = bias {
            if self.wants(bias) {
                let gb = Self::accumulate(grads, bias, c_out);
                for bi in 0..b {
                    for o in 0..c_out {
                        let grow = &gout[(bi * c_out + o) * t..(bi * c_out + o + 1) * t];
                        gb[o] += grow.iter().sum::<f64>();
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_train_backward(
        &self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mask: &[f64],
        mean: &[f64],
        inv_std: &[f64],
        n_valid: f64,
        gout: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let shape = self.shape(input);
        let (b, c, t) = (shape[0], shape[1], shape[2]);
        let x = self.data(input);
        let g = self.data(gamma);

        if self.wants(gamma) || self.wants(beta) {
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for bi in 0..b {
                for ch in 0..c {
                    let base = (bi * c + ch) * t;
                    let (m, inv) = (mean[ch], inv_std[ch]);
                    for tt in 0..t {
                        let go = gout[base + tt];
                        dgamma[ch] += go * (x[base + tt] - m) * inv;
                        dbeta[ch] += go;
                    }
                }
            }
            if self.wants(gamma) {
                let gg = Self::accumulate(grads, gamma, c);
                for (gv, d) in gg.iter_mut().zip(&dgamma) {
                    *gv += d;
                }
            }
            if self.wants(beta) {
                let gb = Self::accumulate(grads, beta, c);
                for (gv, d) in gb.iter_mut().zip(&dbeta) {
                    *gv += d;
                }
            }
        }

        if self.wants(input) {
            // The mean and variance gather gradient from every output position
            // (padded ones included) but distribute only to valid inputs.
            let gi = Self::accumulate(grads, input, b * c * t);
            for ch in 0..c {
                let (m, inv) = (mean[ch], inv_std[ch]);
                let gc = g[ch];
                let mut sum_dxhat = 0.0;
                let mut sum_dxhat_xm = 0.0;
                for bi in 0..b {
                    let base = (bi * c + ch) * t;
                    for tt in 0..t {
                        let dxhat = gout[base + tt] * gc;
                        sum_dxhat += dxhat;
                        sum_dxhat_xm += dxhat * (x[base + tt] - m);
                    }
                }
                let dvar = -0.5 * inv * inv * inv * sum_dxhat_xm;
                let dmean = -inv * sum_dxhat;
                for bi in 0..b {
                    let base = (bi * c + ch) * t;
                    for tt in 0..t {
                        let dxhat = gout[base + tt] * gc;
                        let mut dx = dxhat * inv;
                        let mv = mask[bi * t + tt];
                        if mv != 0.0 {
                            dx += mv
                                * (dmean / n_valid
                                    + dvar * 2.0 * (x[base + tt] - m) / n_valid);
                        }
                        gi[base + tt] += dx;
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_eval_backward(
        &self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: &[f64],
        inv_std: &[f64],
        gout: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let shape = self.shape(input);
        let (b, c, t) = (shape[0], shape[1], shape[2]);
        let x = self.data(input);
        let g = self.data(gamma);

        if self.wants(input) {
            let gi = Self::accumulate(grads, input, b * c * t);
            for bi in 0..b {
                for ch in 0..c {
                    let base = (bi * c + ch) * t;
                    let scale = g[ch] * inv_std[ch];
                    for tt in 0..t {
                        gi[base + tt] += gout[base + tt] * scale;
                    }
                }
            }
        }
        if self.wants(gamma) {
            let gg = Self::accumulate(grads, gamma, c);
            for bi in 0..b {
                for ch in 0..c {
                    let base = (bi * c + ch) * t;
                    let (m, inv) = (mean[ch], inv_std[ch]);
                    for tt in 0..t {
                        gg[ch] += gout[base + tt] * (x[base + tt] - m) * inv;
                    }
                }
            }
        }
        if self.wants(beta) {
            let gb = Self::accumulate(grads, beta, c);
            for bi in 0..b {
                for ch in 0..c {
                    let base = (bi * c + ch) * t;
                    for tt in 0..t {
                        gb[ch] += gout[base + tt];
                    }
                }
            }
        }
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    y.clamp(SIGMOID_FLOOR, 1.0 - SIGMOID_FLOOR)
}

/// Numerically stable softmax(alpha * r).
pub fn softmax_weights(r: &[f64], alpha: f64) -> Vec<f64> {
    let m = r.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut w: Vec<f64> = r.iter().map(|&x| (alpha * (x - m)).exp()).collect();
    let z: f64 = w.iter().sum();
    for v in &mut w {
        *v /= z;
    }
    w
}
