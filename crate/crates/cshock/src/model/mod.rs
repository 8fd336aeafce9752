//! The hourly risk network: stacked dilated causal convolution blocks
//! (conv -> ReLU -> batch norm -> dropout) with a shared per-hour linear
//! readout and sigmoid, plus explainer-style input masking.

pub mod checkpoint;
pub mod loss;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::cohort::preprocess::PreparedRecord;
use crate::error::{CshockError, Result};
use crate::schema::{FeatureKind, FeatureSchema};
use crate::tensor::graph::{BnBatchStats, BnRunning, Graph, Mode, NodeId};
use crate::tensor::params::ParamSet;
use crate::tensor::Tensor;

pub use loss::RiskTrajectory;

/// Indicator value marking a channel masked by the explainer (distinct from
/// 1 = missing in the data and 0 = observed).
pub const MASKED_INDICATOR: f64 = -1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskModelConfig {
    pub num_layers: usize,
    pub channels: Vec<usize>,
    pub kernel_size: usize,
    pub dilations: Vec<usize>,
    pub dropout_rate: f64,
    /// Softmax temperature in the risk loss.
    pub alpha: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    /// Divide the batch loss by the batch size instead of summing.
    pub mean_reduction: bool,
}

impl RiskModelConfig {
    /// Laptop-scale preset: 4 blocks of 32 channels, kernel 2,
    /// dilations 1/2/4/8 (16-hour receptive field).
    pub fn desk() -> Self {
        Self {
            num_layers: 4,
            channels: vec![32; 4],
            kernel_size: 2,
            dilations: vec![1, 2, 4, 8],
            dropout_rate: 0.1,
            alpha: 2.0,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            mean_reduction: false,
        }
    }

    /// Full-scale preset with 64-channel blocks.
    pub fn full_scale() -> Self {
        Self {
            channels: vec![64; 4],
            ..Self::desk()
        }
    }

    /// Small custom stacks for tests and experiments.
    pub fn custom(channels: Vec<usize>, kernel_size: usize, dilations: Vec<usize>) -> Self {
        Self {
            num_layers: channels.len(),
            channels,
            kernel_size,
            dilations,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0
            || self.channels.len() != self.num_layers
            || self.dilations.len() != self.num_layers
        {
            return Err(CshockError::InvalidArgument(format!(
                "config: num_layers {} must match channels ({}) and dilations ({})",
                self.num_layers,
                self.channels.len(),
                self.dilations.len()
            )));
        }
        if self.kernel_size == 0 {
            return Err(CshockError::InvalidArgument("kernel size must be >= 1".into()));
        }
        if self.alpha <= 0.0 {
            return Err(CshockError::InvalidArgument("alpha must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(CshockError::InvalidArgument(
                "dropout rate must be in [0, 1)".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(CshockError::InvalidArgument(
                "batch norm momentum must be in (0, 1]".into(),
            ));
        }
        Ok(())
    }

    pub fn receptive_field(&self) -> usize {
        1 + (self.kernel_size - 1) * self.dilations.iter().sum::<usize>()
    }
}

/// One record entering a batched forward pass.
pub struct BatchItem<'a> {
    pub channels: &'a Tensor,
    pub len: usize,
    pub positive: bool,
}

impl<'a> BatchItem<'a> {
    pub fn from_record(rec: &'a PreparedRecord, positive: bool) -> Self {
        Self {
            channels: &rec.channels,
            len: rec.len,
            positive,
        }
    }
}

/// Forward pass bookkeeping for one batch graph.
pub struct ForwardPass {
    pub graph: Graph,
    /// [B, 1, T_max] sigmoid scores.
    pub scores: NodeId,
    /// Leaves aligned with the trainable entries of the parameter set.
    pub param_leaves: Vec<NodeId>,
    /// Train-mode batch statistics per layer, for the running-average commit.
    pub bn_stats: Vec<BnBatchStats>,
    pub t_max: usize,
    pub mask: Vec<f64>,
}

/// Forward pass plus the softmax-weighted risk loss.
pub struct BatchLoss {
    pub forward: ForwardPass,
    /// Per-patient softmax-weighted risk nodes, batch order.
    pub swr: Vec<NodeId>,
    pub loss: NodeId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RiskModel {
    pub config: RiskModelConfig,
    pub in_channels: usize,
    pub params: ParamSet,
}

impl RiskModel {
    pub fn new(config: RiskModelConfig, in_channels: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if in_channels == 0 {
            return Err(CshockError::InvalidArgument(
                "model needs at least one input channel".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut c_in = in_channels;
        for (l, (&c_out, _)) in config.channels.iter().zip(&config.dilations).enumerate() {
            let k = config.kernel_size;
            let std = (2.0 / (c_in * k) as f64).sqrt();
            let w: Vec<f64> = (0..c_out * c_in * k)
                .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                .collect();
            params.push(&format!("layer{l}.conv.weight"), Tensor::new(vec![c_out, c_in, k], w)?, true)?;
            params.push(&format!("layer{l}.conv.bias"), Tensor::zeros(vec![c_out]), true)?;
            params.push(
                &format!("layer{l}.bn.scale"),
                Tensor::new(vec![c_out], vec![1.0; c_out])?,
                true,
            )?;
            params.push(&format!("layer{l}.bn.shift"), Tensor::zeros(vec![c_out]), true)?;
            params.push(
                &format!("layer{l}.bn.running_mean"),
                Tensor::zeros(vec![c_out]),
                false,
            )?;
            params.push(
                &format!("layer{l}.bn.running_var"),
                Tensor::new(vec![c_out], vec![1.0; c_out])?,
                false,
            )?;
            c_in = c_out;
        }
        let w: Vec<f64> = (0..c_in)
            .map(|_| 0.05 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        params.push("readout.weight", Tensor::new(vec![1, c_in, 1], w)?, true)?;
        params.push("readout.bias", Tensor::zeros(vec![1]), true)?;
        Ok(Self {
            config,
            in_channels,
            params,
        })
    }

    fn tensor(&self, name: &str) -> &Tensor {
        self.params.get(name).expect("parameter present by construction")
    }

    fn bn_running(&self, layer: usize) -> BnRunning {
        BnRunning {
            mean: self
                .tensor(&format!("layer{layer}.bn.running_mean"))
                .data()
                .to_vec(),
            var: self
                .tensor(&format!("layer{layer}.bn.running_var"))
                .data()
                .to_vec(),
        }
    }

    /// Fold train-mode batch statistics into the running averages
    /// (unbiased variance for the running buffer).
    pub fn commit_bn_stats(&mut self, stats: &[BnBatchStats]) {
        let momentum = self.config.bn_momentum;
        for (l, s) in stats.iter().enumerate() {
            let correction = if s.n_valid > 1.0 {
                s.n_valid / (s.n_valid - 1.0)
            } else {
                1.0
            };
            let mean = self
                .params
                .get_mut(&format!("layer{l}.bn.running_mean"))
                .expect("present");
            for (rm, m) in mean.data_mut().iter_mut().zip(&s.mean) {
                *rm = (1.0 - momentum) * *rm + momentum * m;
            }
            let var = self
                .params
                .get_mut(&format!("layer{l}.bn.running_var"))
                .expect("present");
            for (rv, v) in var.data_mut().iter_mut().zip(&s.var) {
                *rv = (1.0 - momentum) * *rv + momentum * v * correction;
            }
        }
    }

    /// Build the batched forward graph. Dropout draws from `dropout_rng` in
    /// train mode; eval mode never touches it.
    pub fn forward(
        &self,
        items: &[BatchItem],
        mode: Mode,
        dropout_rng: &mut ChaCha8Rng,
    ) -> Result<ForwardPass> {
        if items.is_empty() {
            return Err(CshockError::InvalidArgument("empty batch".into()));
        }
        let b = items.len();
        let c = self.in_channels;
        let t_max = items.iter().map(|i| i.len).max().expect("nonempty");
        let mut input = vec![0.0; b * c * t_max];
        let mut mask = vec![0.0; b * t_max];
        for (i, item) in items.iter().enumerate() {
            if item.channels.shape() != [c, item.len] {
                return Err(CshockError::Shape(format!(
                    "batch item {} has channel shape {:?}, model expects [{}, {}]",
                    i,
                    item.channels.shape(),
                    c,
                    item.len
                )));
            }
            if item.len == 0 {
                return Err(CshockError::InvalidArgument(format!(
                    "batch item {} has an empty trajectory",
                    i
                )));
            }
            let data = item.channels.data();
            for ch in 0..c {
                let src = &data[ch * item.len..(ch + 1) * item.len];
                let dst = (i * c + ch) * t_max;
                input[dst..dst + item.len].copy_from_slice(src);
            }
            for t in 0..item.len {
                mask[i * t_max + t] = 1.0;
            }
        }

        let mut graph = Graph::new();
        let train = mode == Mode::Train;
        let mut x = graph.leaf(Tensor::new(vec![b, c, t_max], input)?, false);
        let mut param_leaves = Vec::with_capacity(self.params.trainable_entries().count());
        let mut bn_stats = Vec::new();
        for l in 0..self.config.num_layers {
            let w = graph.leaf(self.tensor(&format!("layer{l}.conv.weight")).clone(), train);
            let bias = graph.leaf(self.tensor(&format!("layer{l}.conv.bias")).clone(), train);
            let scale = graph.leaf(self.tensor(&format!("layer{l}.bn.scale")).clone(), train);
            let shift = graph.leaf(self.tensor(&format!("layer{l}.bn.shift")).clone(), train);
            param_leaves.extend([w, bias, scale, shift]);
            x = graph.dilated_causal_conv1d(x, w, Some(bias), self.config.dilations[l])?;
            x = graph.relu(x);
            x = match mode {
                Mode::Train => {
                    let (y, stats) =
                        graph.batch_norm_train(x, scale, shift, &mask, self.config.bn_eps)?;
                    bn_stats.push(stats);
                    y
                }
                Mode::Eval => graph.batch_norm_eval(
                    x,
                    scale,
                    shift,
                    &self.bn_running(l),
                    self.config.bn_eps,
                )?,
            };
            x = graph.dropout(x, self.config.dropout_rate, mode, dropout_rng)?;
        }
        let w = graph.leaf(self.tensor("readout.weight").clone(), train);
        let bias = graph.leaf(self.tensor("readout.bias").clone(), train);
        param_leaves.extend([w, bias]);
        let logits = graph.dilated_causal_conv1d(x, w, Some(bias), 1)?;
        let scores = graph.sigmoid(logits);
        Ok(ForwardPass {
            graph,
            scores,
            param_leaves,
            bn_stats,
            t_max,
            mask,
        })
    }

    /// Forward plus the combined risk loss:
    /// sum over negatives of softmax-weighted risk minus sum over positives.
    pub fn batch_loss(
        &self,
        items: &[BatchItem],
        mode: Mode,
        dropout_rng: &mut ChaCha8Rng,
    ) -> Result<BatchLoss> {
        let mut fwd = self.forward(items, mode, dropout_rng)?;
        let b = items.len();
        let scale = if self.config.mean_reduction {
            1.0 / b as f64
        } else {
            1.0
        };
        let mut swr = Vec::with_capacity(b);
        let mut terms = Vec::with_capacity(b);
        for (i, item) in items.iter().enumerate() {
            let slice = fwd.graph.trajectory_slice(fwd.scores, i, item.len)?;
            let value = fwd.graph.softmax_weighted(slice, self.config.alpha)?;
            swr.push(value);
            let coeff = if item.positive { -scale } else { scale };
            terms.push((value, coeff));
        }
        let loss = fwd.graph.combine_scalars(&terms)?;
        Ok(BatchLoss {
            forward: fwd,
            swr,
            loss,
        })
    }

    /// Collect parameter gradients after `backward`, aligned with the
    /// trainable entries (zeros where a parameter did not participate).
    pub fn harvest_gradients(&self, pass: &ForwardPass) -> Vec<Vec<f64>> {
        self.params
            .trainable_entries()
            .zip(&pass.param_leaves)
            .map(|(entry, &leaf)| match pass.graph.grad(leaf) {
                Some(g) => g.to_vec(),
                None => vec![0.0; entry.tensor.len()],
            })
            .collect()
    }

    /// Hourly risk scores for one prepared record (eval mode; causal).
    pub fn trajectory(&self, rec: &PreparedRecord) -> Result<RiskTrajectory> {
        let scores = self.trajectory_scores(&rec.channels, rec.len)?;
        Ok(RiskTrajectory {
            patient_id: rec.patient_id.clone(),
            scores,
            observed_time: rec.len - 1,
            positive: rec.is_positive(),
        })
    }

    /// Eval-mode scores for explicit channel data (used for masked inputs).
    pub fn trajectory_scores(&self, channels: &Tensor, len: usize) -> Result<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let items = [BatchItem {
            channels,
            len,
            positive: false,
        }];
        let fwd = self.forward(&items, Mode::Eval, &mut rng)?;
        Ok(fwd.graph.data(fwd.scores)[..len].to_vec())
    }
}

/// A preprocessed input with an explainer-chosen subset of observed features.
/// `keep` is indexed by the schema's maskable players.
#[derive(Clone, Debug)]
pub struct MaskedInput {
    pub channels: Tensor,
    pub keep: Vec<bool>,
}

impl MaskedInput {
    pub fn new(schema: &FeatureSchema, base: &Tensor, keep: &[bool]) -> Result<Self> {
        Ok(Self {
            channels: apply_mask(schema, base, keep)?,
            keep: keep.to_vec(),
        })
    }
}

/// Zero the value channel of every dropped feature; time-varying features
/// additionally get their indicator channel set to -1. Static features carry
/// no indicator, so masking them is value-zeroing only. Channels of features
/// outside the maskable set are never touched.
pub fn apply_mask(schema: &FeatureSchema, base: &Tensor, keep: &[bool]) -> Result<Tensor> {
    let players = schema.maskable_players();
    if keep.len() != players.len() {
        return Err(CshockError::InvalidArgument(format!(
            "subset has {} entries, schema has {} maskable features",
            keep.len(),
            players.len()
        )));
    }
    let shape = base.shape().to_vec();
    if shape.len() != 2 || shape[0] != schema.input_channels() {
        return Err(CshockError::Shape(format!(
            "masking expects [{} x T] channels, got {:?}",
            schema.input_channels(),
            shape
        )));
    }
    let hours = shape[1];
    let mut masked = base.clone();
    let data = masked.data_mut();
    for (player, kept) in players.iter().zip(keep) {
        if *kept {
            continue;
        }
        match player.kind {
            FeatureKind::TimeVarying => {
                let v = schema.value_row(player.local_index) * hours;
                let ind = schema.indicator_row(player.local_index) * hours;
                for t in 0..hours {
                    data[v + t] = 0.0;
                    data[ind + t] = MASKED_INDICATOR;
                }
            }
            FeatureKind::Static => {
                let row = schema.static_row(player.local_index) * hours;
                for t in 0..hours {
                    data[row + t] = 0.0;
                }
            }
        }
    }
    Ok(masked)
}

/// Subset from explicit player indices; out-of-range indices are rejected.
pub fn keep_from_indices(indices: &[usize], n_players: usize) -> Result<Vec<bool>> {
    let mut keep = vec![false; n_players];
    for &i in indices {
        if i >= n_players {
            return Err(CshockError::InvalidArgument(format!(
                "feature index {} outside the maskable set of size {}",
                i, n_players
            )));
        }
        keep[i] = true;
    }
    Ok(keep)
}
