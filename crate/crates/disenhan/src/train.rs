//! Negative-sampling binary cross-entropy training with Adam.
//!
//! Each epoch resamples negatives per train positive at a fixed ratio,
//! shuffles the instance stream, and walks it in mini-batches: one tape per
//! batch, root embeddings cached per unique node within the batch, mean
//! BCE over the batch, one bias-corrected Adam step. Validation Recall@10 on
//! lists fixed once per run drives early stopping; the best snapshot wins.

use std::collections::HashMap;
use std::time::Instant;

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::data::{Split, SplitLog, UserItemIndex};
use crate::error::{Error, Result};
use crate::eval::{build_eval_lists, evaluate_model, EvalLists};
use crate::hin::{build_computation_tree, Fanouts, HinGraph, NodeId, NodeTypeId};
use crate::model::{score, DisenHan, ForwardPass};
use crate::tape::{ParamSet, Tape, ValueId};
use crate::tensor::{Real, Tensor};

/// Probabilities are clamped into [CLAMP, 1 - CLAMP] before the log.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Negatives sampled per positive, uniform over items the user never
    /// interacted with in the train split.
    pub negative_ratio: usize,
    pub max_epochs: usize,
    /// Stop after this many epochs without a validation Recall@N increase.
    pub patience: usize,
    pub seed: u64,
    /// Fan-out per tree depth; length must match the model's layer count.
    pub fanouts: Vec<usize>,
    /// Fresh neighbor samples each epoch (the alternative reuses one draw).
    pub resample_neighbors: bool,
    pub eval_negatives: usize,
    pub topn: usize,
    /// Epochs between validation evaluations; patience counts evaluations.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.005,
            batch_size: 1024,
            negative_ratio: 4,
            max_epochs: 200,
            patience: 20,
            seed: 0,
            fanouts: vec![10, 10],
            resample_neighbors: true,
            eval_negatives: 100,
            topn: 10,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, depth: usize) -> Result<()> {
        if self.learning_rate <= 0.0
            || self.batch_size == 0
            || self.max_epochs == 0
            || self.patience == 0
            || self.topn == 0
        {
            return Err(Error::Config("training hyperparameters must be positive".into()));
        }
        if self.fanouts.len() != depth {
            return Err(Error::Config(format!(
                "{} fan-outs configured for {} layers",
                self.fanouts.len(),
                depth
            )));
        }
        if self.fanouts.contains(&0) {
            return Err(Error::Config("fan-outs must be positive".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be positive".into()));
        }
        Ok(())
    }

    pub fn fanout_plan(&self) -> Fanouts {
        Fanouts::per_depth(self.fanouts.clone())
    }
}

fn mix(seed: u64, salt: u64) -> u64 {
    let mut h = seed ^ salt.wrapping_mul(0x9e3779b97f4a7c15);
    h ^= h >> 30;
    h = h.wrapping_mul(0xbf58476d1ce4e5b9);
    h ^= h >> 27;
    h = h.wrapping_mul(0x94d049bb133111eb);
    h ^ (h >> 31)
}

/// Uniform negatives for one user: `ratio` items the user never touched in
/// the train split, without replacement. An exhausted pool yields fewer (or
/// none), which the caller treats as a skip.
pub fn sample_negatives(
    index: &UserItemIndex,
    user: u32,
    ratio: usize,
    rng: &mut StdRng,
) -> Vec<u32> {
    let seen = &index.train[user as usize];
    let eligible: Vec<u32> =
        (0..index.n_items as u32).filter(|i| !seen.contains(i)).collect();
    if eligible.is_empty() {
        return Vec::new();
    }
    let take = ratio.min(eligible.len());
    if take == eligible.len() {
        eligible
    } else {
        rand::seq::index::sample(rng, eligible.len(), take)
            .into_iter()
            .map(|i| eligible[i])
            .collect()
    }
}

/// Mean binary cross-entropy over (score, label) pairs, with the predicted
/// probability clamped away from 0 and 1 before the log.
pub fn bce_from_scores<F: Real>(
    tape: &mut Tape<F>,
    scored: &[(ValueId, bool)],
) -> Result<ValueId> {
    assert!(!scored.is_empty(), "empty batch");
    let lo = F::of(PROB_CLAMP);
    let hi = F::of(1.0 - PROB_CLAMP);
    let mut logs = Vec::with_capacity(scored.len());
    for &(s, label) in scored {
        let y = tape.sigmoid(s);
        let p = if label {
            tape.clamp(y, lo, hi)
        } else {
            let flipped = tape.affine_const(y, F::of(-1.0), F::one());
            tape.clamp(flipped, lo, hi)
        };
        logs.push(tape.ln(p));
    }
    let total = tape.add_n(&logs)?;
    Ok(tape.affine_const(total, F::of(-1.0 / scored.len() as f64), F::zero()))
}

/// Adam with bias correction. Moments are shaped like the parameter set they
/// were created from.
#[derive(Clone, Debug)]
pub struct AdamState<F> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: usize,
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
}

impl<F: Real> AdamState<F> {
    pub fn new(params: &ParamSet<F>) -> Self {
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.ids().map(|id| Tensor::zeros(params.get(id).shape().to_vec())).collect(),
            v: params.ids().map(|id| Tensor::zeros(params.get(id).shape().to_vec())).collect(),
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// One update over every parameter. Rejects non-finite gradients, naming
    /// the offending parameter.
    pub fn step(
        &mut self,
        params: &mut ParamSet<F>,
        grads: &[Tensor<F>],
        lr: f64,
    ) -> Result<()> {
        assert_eq!(grads.len(), params.len(), "one gradient per parameter");
        for (pi, id) in params.ids().enumerate().collect::<Vec<_>>() {
            if !grads[pi].all_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient for parameter {}",
                    params.name(id)
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (F::of(self.beta1), F::of(self.beta2));
        let (nb1, nb2) = (F::of(1.0 - self.beta1), F::of(1.0 - self.beta2));
        for (pi, id) in params.ids().enumerate().collect::<Vec<_>>() {
            let g = grads[pi].data();
            let m = self.m[pi].data_mut();
            let v = self.v[pi].data_mut();
            let theta = params.get_mut(id).data_mut();
            for j in 0..g.len() {
                m[j] = b1 * m[j] + nb1 * g[j];
                v[j] = b2 * v[j] + nb2 * g[j] * g[j];
                let m_hat = m[j].as_f64() / bc1;
                let v_hat = v[j].as_f64() / bc2;
                let delta = lr * m_hat / (v_hat.sqrt() + self.eps);
                theta[j] = F::of(theta[j].as_f64() - delta);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_precision: f64,
    pub val_recall: f64,
    pub val_ndcg: f64,
    pub wall_secs: f64,
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_recall: f64,
    /// Users skipped during negative sampling for having interacted with
    /// every item.
    pub saturated_users: usize,
}

/// The dataset view training needs.
#[derive(Clone, Copy)]
pub struct TrainData<'a> {
    pub graph: &'a HinGraph,
    pub split: &'a SplitLog,
    pub index: &'a UserItemIndex,
    pub user_type: NodeTypeId,
    pub item_type: NodeTypeId,
}

/// Tracks the best validation metric; stop once `patience` observations in a
/// row fail to increase it.
#[derive(Clone, Debug)]
pub struct EarlyStopper {
    patience: usize,
    best: f64,
    best_epoch: usize,
    since_best: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper { patience, best: f64::NEG_INFINITY, best_epoch: 0, since_best: 0 }
    }

    /// Returns true when the metric improved; `should_stop` turns on after
    /// `patience` non-improving observations.
    pub fn observe(&mut self, epoch: usize, metric: f64) -> bool {
        if metric > self.best {
            self.best = metric;
            self.best_epoch = epoch;
            self.since_best = 0;
            true
        } else {
            self.since_best += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.since_best >= self.patience
    }

    pub fn best(&self) -> (usize, f64) {
        (self.best_epoch, self.best)
    }
}

/// Train the model in place, leaving it at the best-validation snapshot.
pub fn fit<F: Real>(
    data: &TrainData<'_>,
    model: &mut DisenHan<F>,
    config: &TrainConfig,
) -> Result<FitResult> {
    let depth = model.config().depth();
    config.validate(depth)?;
    let train = data.split.part(Split::Train);
    if train.is_empty() {
        return Err(Error::Data("empty training split".into()));
    }
    let fanouts = config.fanout_plan();
    let eval_lists: EvalLists =
        build_eval_lists(data.index, Split::Valid, config.eval_negatives, mix(config.seed, 0xEA71))?;

    let mut adam = AdamState::new(&model.params);
    let mut stopper = EarlyStopper::new(config.patience);
    let mut best_params: Option<ParamSet<F>> = None;
    let mut records = Vec::new();
    let mut saturated_users = 0usize;

    for epoch in 1..=config.max_epochs {
        let started = Instant::now();
        let epoch_seed = mix(config.seed, epoch as u64);
        let mut rng = StdRng::seed_from_u64(epoch_seed);
        let tree_seed =
            if config.resample_neighbors { mix(config.seed, 0x7EE5 ^ epoch as u64) } else { mix(config.seed, 0x7EE5) };

        // Instance stream: every train positive plus freshly sampled
        // negatives at the configured ratio.
        let mut instances: Vec<(u32, u32, bool)> = Vec::with_capacity(
            train.len() * (1 + config.negative_ratio),
        );
        for r in train {
            instances.push((r.user, r.item, true));
            let negs = sample_negatives(data.index, r.user, config.negative_ratio, &mut rng);
            if negs.is_empty() && config.negative_ratio > 0 {
                saturated_users += 1;
                continue;
            }
            for v in negs {
                instances.push((r.user, v, false));
            }
        }
        instances.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (bi, batch) in instances.chunks(config.batch_size).enumerate() {
            let loss_value = {
                let mut fp =
                    ForwardPass::training(model, mix(epoch_seed, 0xD0_u64 ^ bi as u64));
                let mut cache: HashMap<NodeId, crate::model::DisenEmbedding> = HashMap::new();
                for &(u, v, _) in batch {
                    for node in [
                        NodeId::new(data.user_type, u as usize),
                        NodeId::new(data.item_type, v as usize),
                    ] {
                        if let std::collections::hash_map::Entry::Vacant(slot) =
                            cache.entry(node)
                        {
                            let tree = build_computation_tree(
                                data.graph, node, depth, &fanouts, tree_seed,
                            )?;
                            slot.insert(fp.embed_root(&tree)?);
                        }
                    }
                }
                let mut scored = Vec::with_capacity(batch.len());
                for &(u, v, label) in batch {
                    let ue = cache[&NodeId::new(data.user_type, u as usize)].clone();
                    let ie = cache[&NodeId::new(data.item_type, v as usize)].clone();
                    let s = score(&mut fp.tape, &ue, &ie)?;
                    scored.push((s, label));
                }
                let loss = bce_from_scores(&mut fp.tape, &scored)?;
                fp.tape.backward(loss)?;
                let grads: Vec<Tensor<F>> = model
                    .params
                    .ids()
                    .map(|id| fp.tape.param_grad(&model.params, id))
                    .collect();
                let loss_value = fp.tape.value(loss).item().as_f64();
                drop(fp);
                adam.step(&mut model.params, &grads, config.learning_rate)?;
                loss_value
            };
            loss_sum += loss_value;
            batches += 1;
        }

        let evaluate_now = epoch % config.eval_every == 0 || epoch == config.max_epochs;
        let (vp, vr, vn) = if evaluate_now {
            let report = evaluate_model(
                model,
                data.graph,
                data.user_type,
                data.item_type,
                &eval_lists,
                config.topn,
                &fanouts,
                mix(config.seed, 0xE7A1),
                None,
            )?;
            (report.mean_precision, report.mean_recall, report.mean_ndcg)
        } else {
            (f64::NAN, f64::NAN, f64::NAN)
        };
        records.push(EpochRecord {
            epoch,
            mean_loss: loss_sum / batches.max(1) as f64,
            val_precision: vp,
            val_recall: vr,
            val_ndcg: vn,
            wall_secs: started.elapsed().as_secs_f64(),
        });

        if evaluate_now {
            if stopper.observe(epoch, vr) {
                best_params = Some(model.params.clone());
            }
            if stopper.should_stop() {
                break;
            }
        }
    }

    if let Some(best) = best_params {
        model.params = best;
    }
    let (best_epoch, best_recall) = stopper.best();
    Ok(FitResult { log: records, best_epoch, best_recall, saturated_users })
}
