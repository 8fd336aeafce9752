//! Shapley-value interpretation: a masked-prediction surrogate that scores
//! arbitrary feature subsets, an exact enumeration oracle, an amortized
//! explainer trained on the weighted least-squares Shapley objective, and
//! feature rankings with top-k retention curves.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::cohort::preprocess::{fit_preprocessor, preprocess, PreparedRecord};
use crate::cohort::PatientRecord;
use crate::error::{CshockError, Result};
use crate::eval::auroc;
use crate::model::checkpoint::{CheckpointKind, CheckpointMeta, ModelCheckpoint, TrainTask};
use crate::model::loss::value_function;
use crate::model::{apply_mask, BatchItem, RiskModel, RiskModelConfig};
use crate::schema::FeatureSchema;
use crate::tensor::adam::{AdamConfig, AdamState};
use crate::tensor::graph::{Graph, Mode, NodeId};
use crate::tensor::params::ParamSet;
use crate::tensor::Tensor;
use crate::train::{balance_minority, EpochLog, TrainRunConfig};
use crate::util::{child_seed, sha256_hex};

/// Exhaustive enumeration is capped at 12 players (4096 subsets).
pub const EXACT_SHAPLEY_MAX_PLAYERS: usize = 12;

/// Per-patient Shapley attributions for the maskable features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapleyAttribution {
    pub patient_id: String,
    pub phi: Vec<f64>,
    /// v(empty set)
    pub base_value: f64,
    /// v(full set)
    pub full_value: f64,
}

impl ShapleyAttribution {
    /// Efficiency gap |sum(phi) - (full - base)|.
    pub fn efficiency_gap(&self) -> f64 {
        (self.phi.iter().sum::<f64>() - (self.full_value - self.base_value)).abs()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureRanking {
    /// (feature name, mean |phi|) sorted by importance, descending.
    pub entries: Vec<(String, f64)>,
    /// Player index (into the maskable set) per entry, same order.
    pub player_indices: Vec<usize>,
}

/// Independent keep/mask draw per maskable feature.
pub fn sample_keep_mask(n: usize, keep_probability: f64, rng: &mut ChaCha8Rng) -> Vec<bool> {
    (0..n).map(|_| rng.gen::<f64>() < keep_probability).collect()
}

/// Subset sizes drawn from the Shapley kernel distribution
/// p(k) proportional to (n-1)/(k(n-k)) for k in 1..n-1, uniform membership.
pub fn sample_kernel_subset(n: usize, rng: &mut ChaCha8Rng) -> Vec<bool> {
    assert!(n >= 2, "kernel subsets need at least two players");
    let weights: Vec<f64> = (1..n)
        .map(|k| (n - 1) as f64 / ((k * (n - k)) as f64))
        .collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    let mut size = 1;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            size = i + 1;
            break;
        }
        u -= w;
        size = i + 1;
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let mut keep = vec![false; n];
    for &i in idx.iter().take(size) {
        keep[i] = true;
    }
    keep
}

/// Classical Shapley values by full subset enumeration with factorial
/// weights. The value function receives a keep-mask over the n players.
pub fn exact_shapley(n: usize, value_fn: &mut dyn FnMut(&[bool]) -> f64) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(CshockError::InvalidArgument("no players".into()));
    }
    if n > EXACT_SHAPLEY_MAX_PLAYERS {
        return Err(CshockError::InvalidArgument(format!(
            "{n} players exceed the exact enumeration cap of {EXACT_SHAPLEY_MAX_PLAYERS}; use the amortized estimator"
        )));
    }
    let total = 1usize << n;
    let mut values = Vec::with_capacity(total);
    let mut keep = vec![false; n];
    for mask in 0..total {
        for (j, k) in keep.iter_mut().enumerate() {
            *k = mask & (1 << j) != 0;
        }
        values.push(value_fn(&keep));
    }
    // factorials up to 12! stay exactly representable in f64
    let mut fact = vec![1.0f64; n + 1];
    for i in 1..=n {
        fact[i] = fact[i - 1] * i as f64;
    }
    let weight: Vec<f64> = (0..n).map(|s| fact[s] * fact[n - 1 - s] / fact[n]).collect();
    let mut phi = vec![0.0; n];
    for mask in 0..total {
        let size = (mask as u32).count_ones() as usize;
        for j in 0..n {
            if mask & (1 << j) == 0 {
                let with = mask | (1 << j);
                phi[j] += weight[size] * (values[with] - values[mask]);
            }
        }
    }
    Ok(phi)
}

/// Reference implementation by averaging marginal contributions over every
/// player ordering; independent cross-check for `exact_shapley` (n <= 8).
pub fn exact_shapley_by_permutations(
    n: usize,
    value_fn: &mut dyn FnMut(&[bool]) -> f64,
) -> Result<Vec<f64>> {
    if n == 0 || n > 8 {
        return Err(CshockError::InvalidArgument(
            "permutation oracle supports 1..=8 players".into(),
        ));
    }
    let total = 1usize << n;
    let mut values = Vec::with_capacity(total);
    let mut keep = vec![false; n];
    for mask in 0..total {
        for (j, k) in keep.iter_mut().enumerate() {
            *k = mask & (1 << j) != 0;
        }
        values.push(value_fn(&keep));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut phi = vec![0.0; n];
    let mut count = 0u64;
    permute(&mut order, 0, &mut |perm| {
        let mut mask = 0usize;
        for &j in perm {
            let with = mask | (1 << j);
            phi[j] += values[with] - values[mask];
            mask = with;
        }
        count += 1;
    });
    for p in &mut phi {
        *p /= count as f64;
    }
    Ok(phi)
}

fn permute(items: &mut Vec<usize>, k: usize, visit: &mut impl FnMut(&[usize])) {
    if k == items.len() {
        visit(items);
        return;
    }
    for i in k..items.len() {
        items.swap(k, i);
        permute(items, k + 1, visit);
        items.swap(k, i);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurrogateOptions {
    pub model: RiskModelConfig,
    pub train: TrainRunConfig,
    /// Probability of keeping each maskable feature per training example.
    pub keep_probability: f64,
}

impl SurrogateOptions {
    pub fn new(model: RiskModelConfig, train: TrainRunConfig) -> Self {
        Self {
            model,
            train,
            keep_probability: 0.5,
        }
    }
}

pub struct SurrogateOutcome {
    pub checkpoint: ModelCheckpoint,
    pub log: Vec<EpochLog>,
    /// Fraction of maskable features masked over the whole run.
    pub masking_rate: f64,
}

/// Train the surrogate by masked prediction: every time an example enters a
/// batch a fresh feature subset is drawn, the dropped features are zeroed
/// with indicator -1, and the usual risk loss is minimized on the masked
/// trajectories. Checkpoint selection uses full-subset validation AUROC.
pub fn train_surrogate(
    records: &[PatientRecord],
    schema: &FeatureSchema,
    opts: &SurrogateOptions,
    seed: u64,
) -> Result<SurrogateOutcome> {
    opts.train.validate()?;
    opts.model.validate()?;
    if !(0.0..=1.0).contains(&opts.keep_probability) {
        return Err(CshockError::InvalidArgument(
            "keep probability must lie in [0, 1]".into(),
        ));
    }
    let players = schema.maskable_players();
    if players.is_empty() {
        return Err(CshockError::InvalidArgument(
            "schema has no maskable features".into(),
        ));
    }
    if records.len() < 8 {
        return Err(CshockError::Data(
            "surrogate training needs at least 8 records".into(),
        ));
    }

    // Internal stratified 75/25 train/validation split.
    let mut rng = ChaCha8Rng::seed_from_u64(child_seed(seed, "surrogate.split"));
    let mut pos: Vec<&PatientRecord> = records.iter().filter(|r| r.is_positive()).collect();
    let mut neg: Vec<&PatientRecord> = records.iter().filter(|r| !r.is_positive()).collect();
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let mut train: Vec<&PatientRecord> = Vec::new();
    let mut validation: Vec<&PatientRecord> = Vec::new();
    for (k, r) in pos.into_iter().enumerate() {
        if k % 4 == 0 {
            validation.push(r);
        } else {
            train.push(r);
        }
    }
    for (k, r) in neg.into_iter().enumerate() {
        if k % 4 == 0 {
            validation.push(r);
        } else {
            train.push(r);
        }
    }

    let preprocessor = fit_preprocessor(&train, schema)?;
    let train_recs: Vec<PreparedRecord> = train
        .iter()
        .map(|r| preprocess(r, schema, &preprocessor))
        .collect::<Result<_>>()?;
    let val_recs: Vec<PreparedRecord> = validation
        .iter()
        .map(|r| preprocess(r, schema, &preprocessor))
        .collect::<Result<_>>()?;

    let mut model = RiskModel::new(
        opts.model.clone(),
        schema.input_channels(),
        child_seed(seed, "surrogate.init"),
    )?;
    let labels: Vec<bool> = train_recs.iter().map(|r| r.is_positive()).collect();
    let train_indices: Vec<usize> = if opts.train.balance_minority {
        balance_minority(&labels, child_seed(seed, "surrogate.balance"))?
    } else {
        (0..train_recs.len()).collect()
    };

    let mut adam = AdamState::new(
        AdamConfig::with_learning_rate(opts.train.learning_rate),
        &model.params,
    );
    let mut log = Vec::with_capacity(opts.train.epochs);
    let mut best: Option<(f64, usize, RiskModel)> = None;
    let mut masked_cells = 0u64;
    let mut maskable_cells = 0u64;

    for epoch in 1..=opts.train.epochs {
        let mut order = train_indices.clone();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(child_seed(seed, &format!("surrogate.shuffle.{epoch}")));
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for (batch_idx, chunk) in order.chunks(opts.train.batch_size).enumerate() {
            let mut subset_rng = ChaCha8Rng::seed_from_u64(child_seed(
                seed,
                &format!("surrogate.subset.{epoch}.{batch_idx}"),
            ));
            let mut masked_tensors: Vec<Tensor> = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let keep = sample_keep_mask(players.len(), opts.keep_probability, &mut subset_rng);
                masked_cells += keep.iter().filter(|k| !**k).count() as u64;
                maskable_cells += keep.len() as u64;
                masked_tensors.push(apply_mask(schema, &train_recs[i].channels, &keep)?);
            }
            let items: Vec<BatchItem> = chunk
                .iter()
                .zip(&masked_tensors)
                .map(|(&i, tensor)| BatchItem {
                    channels: tensor,
                    len: train_recs[i].len,
                    positive: labels[i],
                })
                .collect();
            let mut dropout_rng = ChaCha8Rng::seed_from_u64(child_seed(
                seed,
                &format!("surrogate.dropout.{epoch}.{batch_idx}"),
            ));
            let mut batch = model.batch_loss(&items, Mode::Train, &mut dropout_rng)?;
            let loss_value = batch.forward.graph.value(batch.loss).item();
            if !loss_value.is_finite() {
                return Err(CshockError::Numerical(format!(
                    "surrogate: non-finite loss at epoch {epoch} batch {batch_idx}"
                )));
            }
            epoch_loss += loss_value;
            batches += 1;
            batch.forward.graph.backward(batch.loss)?;
            let grads = model.harvest_gradients(&batch.forward);
            model.commit_bn_stats(&batch.forward.bn_stats);
            adam.apply(&mut model.params, &grads)?;
        }

        // Validation with full subsets (unmasked).
        let mut pairs = Vec::with_capacity(val_recs.len());
        let mut val_loss = 0.0;
        for rec in &val_recs {
            let traj = model.trajectory(rec)?;
            let v = crate::model::loss::softmax_weighted_risk(&traj.scores, model.config.alpha)?;
            val_loss += if rec.is_positive() { -v } else { v };
            pairs.push((traj.max_score(), rec.is_positive()));
        }
        let val_auroc = auroc(&pairs)?;
        log.push(EpochLog {
            epoch,
            train_loss: epoch_loss / batches.max(1) as f64,
            val_loss,
            val_auroc,
        });
        let improved = match &best {
            None => true,
            Some((b, _, _)) => val_auroc > *b,
        };
        if improved {
            best = Some((val_auroc, epoch, model.clone()));
        }
    }

    let (best_auroc, best_epoch, best_model) = best.expect("at least one epoch");
    let masking_rate = masked_cells as f64 / maskable_cells.max(1) as f64;
    let checkpoint = ModelCheckpoint::from_model(
        &best_model,
        CheckpointKind::Surrogate,
        &schema.fingerprint(),
        Some(preprocessor),
        CheckpointMeta {
            seed,
            fold: None,
            task: Some(TrainTask::Shock),
            best_epoch: Some(best_epoch),
            val_auroc: Some(best_auroc),
            val_loss: Some(log[best_epoch - 1].val_loss),
            pretrained_fingerprint: None,
            pretrain_patient_ids: None,
            masking_rate: Some(masking_rate),
        },
    );
    Ok(SurrogateOutcome {
        checkpoint,
        log,
        masking_rate,
    })
}

/// Amortized explainer: a small MLP over summary features of the record
/// (per-channel mean over time, per-channel last-hour value, and the
/// trajectory length) emitting one Shapley value per maskable feature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Explainer {
    pub schema_version: u32,
    pub in_channels: usize,
    pub in_features: usize,
    pub hidden: usize,
    pub n_players: usize,
    pub schema_fingerprint: String,
    pub params: ParamSet,
    pub trained: bool,
}

impl Explainer {
    pub fn new(schema: &FeatureSchema, hidden: usize, seed: u64) -> Result<Self> {
        let n_players = schema.maskable_players().len();
        if n_players == 0 {
            return Err(CshockError::InvalidArgument(
                "schema has no maskable features".into(),
            ));
        }
        let c = schema.input_channels();
        let in_features = 4 * c + 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let std1 = (2.0 / in_features as f64).sqrt();
        let w1: Vec<f64> = (0..hidden * in_features)
            .map(|_| std1 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        params.push("dense1.weight", Tensor::new(vec![hidden, in_features], w1)?, true)?;
        params.push("dense1.bias", Tensor::zeros(vec![hidden]), true)?;
        let std2 = (1.0 / hidden as f64).sqrt();
        let w2: Vec<f64> = (0..n_players * hidden)
            .map(|_| 0.1 * std2 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        params.push("dense2.weight", Tensor::new(vec![n_players, hidden], w2)?, true)?;
        params.push("dense2.bias", Tensor::zeros(vec![n_players]), true)?;
        Ok(Self {
            schema_version: 1,
            in_channels: c,
            in_features,
            hidden,
            n_players,
            schema_fingerprint: schema.fingerprint(),
            params,
            trained: false,
        })
    }

    /// Summary feature vector for one record: per-channel mean over the
    /// whole stay, last-hour value, max over time, and mean over the final
    /// eight hours (the window the max-risk objective attends to), plus the
    /// normalized trajectory length.
    fn featurize(&self, rec: &PreparedRecord) -> Result<Vec<f64>> {
        let c = self.in_channels;
        if rec.channels.shape() != [c, rec.len] {
            return Err(CshockError::Shape(format!(
                "explainer expects [{c} x T] channels, got {:?}",
                rec.channels.shape()
            )));
        }
        let data = rec.channels.data();
        let t = rec.len;
        let late = t.saturating_sub(8).max(0);
        let mut out = Vec::with_capacity(self.in_features);
        for ch in 0..c {
            let row = &data[ch * t..(ch + 1) * t];
            out.push(row.iter().sum::<f64>() / t as f64);
        }
        for ch in 0..c {
            out.push(data[ch * t + (t - 1)]);
        }
        for ch in 0..c {
            let row = &data[ch * t..(ch + 1) * t];
            out.push(row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b)));
        }
        for ch in 0..c {
            let row = &data[ch * t + late..(ch + 1) * t];
            out.push(row.iter().sum::<f64>() / row.len() as f64);
        }
        out.push(t as f64 / 48.0);
        Ok(out)
    }

    /// Raw (pre-correction) phi head for one record inside `graph`.
    fn phi_raw(
        &self,
        graph: &mut Graph,
        rec: &PreparedRecord,
        leaves: &ExplainerLeaves,
    ) -> Result<NodeId> {
        let input = graph.constant(Tensor::vector(self.featurize(rec)?));
        let h = graph.linear(input, leaves.w1, leaves.b1)?;
        let h = graph.relu(h);
        graph.linear(h, leaves.w2, leaves.b2)
    }

    /// Efficiency-corrected phi for one record:
    /// phi = phi_raw + (v_full - v_empty - sum(phi_raw)) / n.
    fn phi_corrected(
        &self,
        graph: &mut Graph,
        rec: &PreparedRecord,
        leaves: &ExplainerLeaves,
        v_empty: f64,
        v_full: f64,
    ) -> Result<NodeId> {
        let raw = self.phi_raw(graph, rec, leaves)?;
        let sum_raw = graph.sum(raw);
        let neg_mean = graph.scale(sum_raw, -1.0 / self.n_players as f64);
        let gap = graph.constant(Tensor::scalar((v_full - v_empty) / self.n_players as f64));
        let correction = graph.combine_scalars(&[(neg_mean, 1.0), (gap, 1.0)])?;
        graph.add_broadcast_scalar(raw, correction)
    }

    fn push_leaves(&self, graph: &mut Graph, trainable: bool) -> ExplainerLeaves {
        ExplainerLeaves {
            w1: graph.leaf(self.params.get("dense1.weight").unwrap().clone(), trainable),
            b1: graph.leaf(self.params.get("dense1.bias").unwrap().clone(), trainable),
            w2: graph.leaf(self.params.get("dense2.weight").unwrap().clone(), trainable),
            b2: graph.leaf(self.params.get("dense2.bias").unwrap().clone(), trainable),
        }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CshockError::Data(format!("{}: {}", path.display(), e)))?;
        serde_json::from_str(&text)
            .map_err(|e| CshockError::Data(format!("{}: {}", path.display(), e)))
    }

    pub fn fingerprint(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("serializes").as_bytes())
    }
}

struct ExplainerLeaves {
    w1: NodeId,
    b1: NodeId,
    w2: NodeId,
    b2: NodeId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplainerTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Learning-rate multiplier applied over the final 30% of steps.
    pub lr_decay: f64,
    pub hidden: usize,
    /// Kernel-subset draws per record per step (each draw also contributes
    /// its complement).
    pub samples_per_record: usize,
}

impl Default for ExplainerTrainConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch_size: 8,
            learning_rate: 2e-3,
            lr_decay: 0.25,
            hidden: 64,
            samples_per_record: 1,
        }
    }
}

/// Fit the amortized explainer against a trained surrogate by minimizing
/// E_s [ (v(empty) + s . phi(x) - v(s))^2 ] with subsets from the Shapley
/// kernel distribution and the efficiency correction applied to phi.
pub fn train_explainer(
    surrogate: &RiskModel,
    schema: &FeatureSchema,
    records: &[PreparedRecord],
    config: &ExplainerTrainConfig,
    seed: u64,
) -> Result<Explainer> {
    if records.is_empty() {
        return Err(CshockError::Data(
            "explainer training needs at least one record".into(),
        ));
    }
    let players = schema.maskable_players();
    let n = players.len();
    if n < 2 {
        return Err(CshockError::InvalidArgument(
            "explainer needs at least two maskable features".into(),
        ));
    }
    let mut explainer = Explainer::new(schema, config.hidden, child_seed(seed, "explainer.init"))?;

    // Subset-independent record constants.
    let empty = vec![false; n];
    let full = vec![true; n];
    let mut v_empty = Vec::with_capacity(records.len());
    let mut v_full = Vec::with_capacity(records.len());
    for rec in records {
        v_empty.push(value_function(surrogate, schema, rec, &empty)?);
        v_full.push(value_function(surrogate, schema, rec, &full)?);
    }

    let mut adam = AdamState::new(
        AdamConfig::with_learning_rate(config.learning_rate),
        &explainer.params,
    );
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut order_rng = ChaCha8Rng::seed_from_u64(child_seed(seed, "explainer.order"));
    order.shuffle(&mut order_rng);
    let mut cursor = 0usize;
    let mut subset_rng = ChaCha8Rng::seed_from_u64(child_seed(seed, "explainer.subsets"));

    let decay_at = config.steps * 7 / 10;
    for step in 0..config.steps {
        if step == decay_at && config.lr_decay != 1.0 {
            adam.config.learning_rate *= config.lr_decay;
        }
        let mut batch: Vec<usize> = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            if cursor == order.len() {
                cursor = 0;
                order.shuffle(&mut order_rng);
            }
            batch.push(order[cursor]);
            cursor += 1;
        }

        let mut graph = Graph::new();
        let leaves = explainer.push_leaves(&mut graph, true);
        let mut terms = Vec::with_capacity(batch.len() * config.samples_per_record * 2);
        // Paired sampling: each kernel draw contributes the subset and its
        // complement (the kernel size distribution is symmetric), which
        // sharply reduces the regression variance.
        let weight = 1.0 / (batch.len() * config.samples_per_record * 2) as f64;
        for &ri in &batch {
            let rec = &records[ri];
            let phi = explainer.phi_corrected(&mut graph, rec, &leaves, v_empty[ri], v_full[ri])?;
            for _ in 0..config.samples_per_record {
                let keep = sample_kernel_subset(n, &mut subset_rng);
                let complement: Vec<bool> = keep.iter().map(|k| !k).collect();
                for subset in [keep, complement] {
                    let v_s = value_function(surrogate, schema, rec, &subset)?;
                    let s_vec: Vec<f64> = subset.iter().map(|k| *k as u8 as f64).collect();
                    let pred = graph.dot_const(phi, &s_vec)?;
                    let target = graph.constant(Tensor::scalar(v_s - v_empty[ri]));
                    let diff = graph.combine_scalars(&[(pred, 1.0), (target, -1.0)])?;
                    let sq = graph.mul(diff, diff)?;
                    terms.push((sq, weight));
                }
            }
        }
        let loss = graph.combine_scalars(&terms)?;
        if !graph.value(loss).item().is_finite() {
            return Err(CshockError::Numerical(
                "explainer training produced a non-finite loss".into(),
            ));
        }
        graph.backward(loss)?;
        let leaf_ids = [leaves.w1, leaves.b1, leaves.w2, leaves.b2];
        let grads: Vec<Vec<f64>> = explainer
            .params
            .trainable_entries()
            .zip(leaf_ids)
            .map(|(entry, leaf)| match graph.grad(leaf) {
                Some(g) => g.to_vec(),
                None => vec![0.0; entry.tensor.len()],
            })
            .collect();
        adam.apply(&mut explainer.params, &grads)?;
    }
    explainer.trained = true;
    Ok(explainer)
}

/// One-forward-pass Shapley attribution for a record, efficiency-corrected
/// against the surrogate's empty- and full-subset values.
pub fn fastshap_explain(
    surrogate: &RiskModel,
    explainer: &Explainer,
    schema: &FeatureSchema,
    record: &PreparedRecord,
) -> Result<ShapleyAttribution> {
    if !explainer.trained {
        return Err(CshockError::InvalidArgument(
            "explainer has not been trained".into(),
        ));
    }
    if explainer.schema_fingerprint != schema.fingerprint() {
        return Err(CshockError::Data(
            "explainer was trained for a different schema".into(),
        ));
    }
    let n = explainer.n_players;
    let v_empty = value_function(surrogate, schema, record, &vec![false; n])?;
    let v_full = value_function(surrogate, schema, record, &vec![true; n])?;
    let mut graph = Graph::new();
    let leaves = explainer.push_leaves(&mut graph, false);
    let phi = explainer.phi_corrected(&mut graph, record, &leaves, v_empty, v_full)?;
    Ok(ShapleyAttribution {
        patient_id: record.patient_id.clone(),
        phi: graph.data(phi).to_vec(),
        base_value: v_empty,
        full_value: v_full,
    })
}

/// Rank maskable features by mean |phi| across patients, descending;
/// ties break on player order for determinism.
pub fn rank_features(
    schema: &FeatureSchema,
    attributions: &[ShapleyAttribution],
) -> Result<FeatureRanking> {
    if attributions.is_empty() {
        return Err(CshockError::Data("no attributions to rank".into()));
    }
    let players = schema.maskable_players();
    let n = players.len();
    for a in attributions {
        if a.phi.len() != n {
            return Err(CshockError::Shape(format!(
                "{}: attribution has {} values for {} maskable features",
                a.patient_id,
                a.phi.len(),
                n
            )));
        }
    }
    let mut importance = vec![0.0; n];
    for a in attributions {
        for (acc, phi) in importance.iter_mut().zip(&a.phi) {
            *acc += phi.abs();
        }
    }
    for acc in &mut importance {
        *acc /= attributions.len() as f64;
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| {
        importance[b]
            .partial_cmp(&importance[a])
            .expect("finite importances")
            .then(a.cmp(&b))
    });
    Ok(FeatureRanking {
        entries: idx
            .iter()
            .map(|&i| (players[i].name.clone(), importance[i]))
            .collect(),
        player_indices: idx,
    })
}

/// Evaluate the surrogate keeping only the top-k ranked features, for each
/// requested k. Ks beyond the feature count are clamped (and deduplicated);
/// the summary score per patient is the trajectory maximum.
pub fn topk_retention_curve(
    surrogate: &RiskModel,
    schema: &FeatureSchema,
    ranking: &FeatureRanking,
    records: &[PreparedRecord],
    ks: &[usize],
) -> Result<Vec<(usize, f64)>> {
    let n = ranking.player_indices.len();
    let mut ks_clamped: Vec<usize> = ks.iter().map(|&k| k.min(n)).collect();
    ks_clamped.sort_unstable();
    ks_clamped.dedup();
    let mut out = Vec::with_capacity(ks_clamped.len());
    for k in ks_clamped {
        let mut keep = vec![false; n];
        for &player in ranking.player_indices.iter().take(k) {
            keep[player] = true;
        }
        let mut pairs = Vec::with_capacity(records.len());
        for rec in records {
            let scores = crate::model::loss::masked_trajectory(surrogate, schema, rec, &keep)?;
            let max = scores.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            pairs.push((max, rec.is_positive()));
        }
        out.push((k, auroc(&pairs)?));
    }
    Ok(out)
}

/// Rows for the beeswarm export: per patient and feature, the attribution
/// plus the raw feature value averaged over observed hours (statics verbatim).
pub fn beeswarm_rows(
    schema: &FeatureSchema,
    attributions: &[ShapleyAttribution],
    records: &[PatientRecord],
) -> Result<Vec<(String, String, f64, Option<f64>)>> {
    let players = schema.maskable_players();
    let mut out = Vec::new();
    for a in attributions {
        let record = records
            .iter()
            .find(|r| r.patient_id == a.patient_id)
            .ok_or_else(|| {
                CshockError::Data(format!("{}: record missing for attribution", a.patient_id))
            })?;
        for (player, phi) in players.iter().zip(&a.phi) {
            let mean_value = match player.kind {
                crate::schema::FeatureKind::TimeVarying => {
                    let row = &record.series[player.local_index];
                    let observed: Vec<f64> = row.iter().flatten().copied().collect();
                    if observed.is_empty() {
                        None
                    } else {
                        Some(observed.iter().sum::<f64>() / observed.len() as f64)
                    }
                }
                crate::schema::FeatureKind::Static => record.statics[player.local_index],
            };
            out.push((a.patient_id.clone(), player.name.clone(), *phi, mean_value));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_game_has_zero_shapley_values() {
        let phi = exact_shapley(4, &mut |_: &[bool]| 2.5).unwrap();
        for p in phi {
            assert_eq!(p, 0.0);
        }
    }

    #[test]
    fn additive_game_recovers_coefficients() {
        let c = [0.5, -1.25, 2.0, 0.0, 3.5];
        let mut v = |keep: &[bool]| {
            keep.iter()
                .zip(&c)
                .filter(|(k, _)| **k)
                .map(|(_, x)| x)
                .sum::<f64>()
        };
        let phi = exact_shapley(5, &mut v).unwrap();
        for (p, expect) in phi.iter().zip(&c) {
            assert!((p - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn three_player_game_matches_permutation_oracle() {
        // v({1})=1, v({1,2})=2, v({1,3})=1, v(all)=3, rest 0.
        let mut v = |keep: &[bool]| match (keep[0], keep[1], keep[2]) {
            (true, false, false) => 1.0,
            (true, true, false) => 2.0,
            (true, false, true) => 1.0,
            (true, true, true) => 3.0,
            _ => 0.0,
        };
        let phi = exact_shapley(3, &mut v).unwrap();
        let oracle = exact_shapley_by_permutations(3, &mut v).unwrap();
        for (a, b) in phi.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((phi[0] - 11.0 / 6.0).abs() < 1e-12);
        assert!((phi[1] - 5.0 / 6.0).abs() < 1e-12);
        assert!((phi[2] - 2.0 / 6.0).abs() < 1e-12);
        assert!((phi.iter().sum::<f64>() - 3.0).abs() < 1e-9);
    }

    #[test]
    fn too_many_players_rejected_toward_amortized_path() {
        let err = exact_shapley(13, &mut |_: &[bool]| 0.0).unwrap_err();
        assert!(format!("{err}").contains("amortized"));
    }

    #[test]
    fn kernel_subsets_are_proper_and_cover_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 6;
        let mut seen_sizes = std::collections::HashSet::new();
        for _ in 0..500 {
            let keep = sample_kernel_subset(n, &mut rng);
            let size = keep.iter().filter(|k| **k).count();
            assert!(size >= 1 && size < n);
            seen_sizes.insert(size);
        }
        assert!(seen_sizes.len() >= n - 2, "{seen_sizes:?}");
    }

    #[test]
    fn keep_mask_frequency_matches_probability() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut kept = 0usize;
        let draws = 10_000;
        let n = 10;
        for _ in 0..draws {
            kept += sample_keep_mask(n, 0.5, &mut rng)
                .iter()
                .filter(|k| **k)
                .count();
        }
        let rate = kept as f64 / (draws * n) as f64;
        assert!((rate - 0.5).abs() < 0.02, "{rate}");
    }

    #[test]
    fn ranking_orders_by_mean_absolute_value() {
        let schema = FeatureSchema::custom("r", &[("a", "u"), ("b", "u")], &[("s", "u")], true);
        let attrs = vec![
            ShapleyAttribution {
                patient_id: "p1".into(),
                phi: vec![0.1, -0.6, 0.2],
                base_value: 0.0,
                full_value: 0.0,
            },
            ShapleyAttribution {
                patient_id: "p2".into(),
                phi: vec![0.3, 0.4, -0.2],
                base_value: 0.0,
                full_value: 0.0,
            },
        ];
        let ranking = rank_features(&schema, &attrs).unwrap();
        let names: Vec<&str> = ranking.entries.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, vec!["b", "a", "s"]);
        // importance column is nonincreasing
        let values: Vec<f64> = ranking.entries.iter().map(|(_, v)| *v).collect();
        assert!(values.windows(2).all(|w| w[0] >= w[1]));
        // duplicated cohort leaves the ranking unchanged
        let doubled: Vec<ShapleyAttribution> =
            attrs.iter().chain(attrs.iter()).cloned().collect();
        assert_eq!(rank_features(&schema, &doubled).unwrap(), ranking);
    }

    #[test]
    fn single_patient_ranking_uses_its_absolute_phis() {
        let schema = FeatureSchema::custom("r1", &[("a", "u"), ("b", "u")], &[], true);
        let attrs = vec![ShapleyAttribution {
            patient_id: "p".into(),
            phi: vec![-0.9, 0.2],
            base_value: 0.0,
            full_value: 0.0,
        }];
        let ranking = rank_features(&schema, &attrs).unwrap();
        assert_eq!(ranking.entries[0].0, "a");
        assert!((ranking.entries[0].1 - 0.9).abs() < 1e-12);
    }

    #[test]
    fn retention_curve_clamps_and_dedups_k_values() {
        use crate::cohort::{EventLabel, Sex};
        let schema = FeatureSchema::custom("clamp", &[("a", "u"), ("b", "u")], &[("s", "u")], true);
        let mut model =
            RiskModel::new(RiskModelConfig::custom(vec![2], 2, vec![1]), schema.input_channels(), 1)
                .unwrap();
        for v in model.params.get_mut("readout.weight").unwrap().data_mut() {
            *v = 0.0;
        }
        let mk = |id: &str, positive: bool| PreparedRecord {
            patient_id: id.into(),
            channels: Tensor::new(vec![schema.input_channels(), 3], vec![0.2; 15]).unwrap(),
            len: 3,
            event_label: if positive {
                EventLabel::CardiogenicOrMixed
            } else {
                EventLabel::NoShock
            },
            mortality: false,
            onset_hour: if positive { Some(2) } else { None },
            age: 50.0,
            sex: Sex::Female,
        };
        let records = vec![mk("a", true), mk("b", false)];
        let attrs = vec![ShapleyAttribution {
            patient_id: "a".into(),
            phi: vec![0.3, 0.2, 0.1],
            base_value: 0.0,
            full_value: 0.6,
        }];
        let ranking = rank_features(&schema, &attrs).unwrap();
        // k beyond the player count clips to it; duplicates collapse.
        let curve = topk_retention_curve(&model, &schema, &ranking, &records, &[0, 99, 3]).unwrap();
        let ks: Vec<usize> = curve.iter().map(|(k, _)| *k).collect();
        assert_eq!(ks, vec![0, 3]);
        // zero readout scores everything 0.5, so every point ties at 0.5
        for (_, auc) in curve {
            assert_eq!(auc, 0.5);
        }
    }

    #[test]
    fn untrained_explainer_is_rejected() {
        use crate::cohort::{EventLabel, Sex};
        let schema = FeatureSchema::custom("u", &[("a", "u"), ("b", "u")], &[], true);
        let explainer = Explainer::new(&schema, 8, 1).unwrap();
        let surrogate =
            RiskModel::new(RiskModelConfig::custom(vec![3], 2, vec![1]), schema.input_channels(), 2)
                .unwrap();
        let rec = PreparedRecord {
            patient_id: "p".into(),
            channels: Tensor::new(vec![schema.input_channels(), 3], vec![0.1; 12]).unwrap(),
            len: 3,
            event_label: EventLabel::NoShock,
            mortality: false,
            onset_hour: None,
            age: 50.0,
            sex: Sex::Female,
        };
        assert!(fastshap_explain(&surrogate, &explainer, &schema, &rec).is_err());
    }

    #[test]
    fn shapley_axioms_on_structured_random_games() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for trial in 0..40 {
            let n = rng.gen_range(2..=8usize);
            // random linear + pairwise-interaction game
            let linear: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let inter: Vec<(usize, usize, f64)> = (0..n)
                .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
                .filter(|_| true)
                .map(|(i, j)| (i, j, rng.gen_range(-0.5..0.5)))
                .collect();
            let eval_game = |keep: &[bool], linear: &[f64], inter: &[(usize, usize, f64)]| {
                let mut v = 0.0;
                for (k, c) in keep.iter().zip(linear) {
                    if *k {
                        v += c;
                    }
                }
                for &(i, j, c) in inter {
                    if keep[i] && keep[j] {
                        v += c;
                    }
                }
                v
            };
            let mut v = |keep: &[bool]| eval_game(keep, &linear, &inter);
            let phi = exact_shapley(n, &mut v).unwrap();

            // efficiency
            let full = v(&vec![true; n]);
            let empty = v(&vec![false; n]);
            assert!(
                (phi.iter().sum::<f64>() - (full - empty)).abs() < 1e-6,
                "trial {trial}"
            );

            // cross-check against the permutation oracle
            let oracle = exact_shapley_by_permutations(n, &mut v).unwrap();
            for (a, b) in phi.iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-9);
            }

            // null player: drop player 0's terms
            let mut linear_null = linear.clone();
            linear_null[0] = 0.0;
            let inter_null: Vec<(usize, usize, f64)> = inter
                .iter()
                .copied()
                .filter(|&(i, j, _)| i != 0 && j != 0)
                .collect();
            let mut v_null = |keep: &[bool]| eval_game(keep, &linear_null, &inter_null);
            let phi_null = exact_shapley(n, &mut v_null).unwrap();
            assert_eq!(phi_null[0], 0.0);

            // symmetry: make players 0 and 1 exchangeable
            if n >= 2 {
                let mut linear_sym = linear.clone();
                linear_sym[1] = linear_sym[0];
                let inter_sym: Vec<(usize, usize, f64)> = inter
                    .iter()
                    .copied()
                    .filter(|&(i, j, _)| !(i <= 1 || j <= 1))
                    .collect();
                let mut v_sym = |keep: &[bool]| eval_game(keep, &linear_sym, &inter_sym);
                let phi_sym = exact_shapley(n, &mut v_sym).unwrap();
                assert!((phi_sym[0] - phi_sym[1]).abs() < 1e-9);
            }

            // linearity: phi(v + w) = phi(v) + phi(w)
            let linear_w: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut v_w = |keep: &[bool]| eval_game(keep, &linear_w, &[]);
            let phi_w = exact_shapley(n, &mut v_w).unwrap();
            let mut v_sum =
                |keep: &[bool]| eval_game(keep, &linear, &inter) + eval_game(keep, &linear_w, &[]);
            let phi_sum = exact_shapley(n, &mut v_sum).unwrap();
            for j in 0..n {
                assert!((phi_sum[j] - (phi[j] + phi_w[j])).abs() < 1e-9);
            }
        }
    }
}
