//! FedSGD / FedAvg round simulation.
//!
//! Updates travel as either raw gradients or parameter deltas. The server
//! normalises both to deltas before aggregating — a gradient becomes the
//! delta of one virtual SGD step — so FedSGD and single-step full-batch
//! FedAvg execute literally the same floating-point operations and stay
//! bitwise identical, not merely close.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::data::{partition_iid, partition_noniid, Dataset};
use crate::error::{Error, Result};
use crate::model::{loss_and_param_grads, predict, ModelParams, ModelSpec};
use crate::optim::Optimizer;
use crate::seeds::derive_seed;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateKind {
    /// Mean loss gradient over one batch; the server applies it with a
    /// learning rate.
    Gradient,
    /// Parameter delta after local training; the server averages it in as-is.
    FedavgDelta,
}

/// What a client sends back to the server for one round.
#[derive(Debug, Clone)]
pub struct GradientUpdate {
    pub kind: UpdateKind,
    pub tensors: Vec<Tensor>,
    pub n_samples: usize,
    pub client_lr: f64,
    pub client_id: usize,
    pub round: usize,
    /// Mean training loss the client observed while producing this update.
    pub loss: f64,
}

/// Shared epoch ordering so FedSGD and FedAvg draw identical batches from
/// identical seeds.
fn epoch_order(shard: &[usize], rng: &mut ChaCha20Rng) -> Vec<usize> {
    let mut order = shard.to_vec();
    order.shuffle(rng);
    order
}

/// Gradient of the mean loss over an explicit batch, packaged as an update.
pub fn gradient_update_for_batch(
    spec: &ModelSpec,
    params: &ModelParams,
    data: &Dataset,
    batch: &[usize],
    client_lr: f64,
    client_id: usize,
    round: usize,
) -> Result<GradientUpdate> {
    let (x, y) = data.batch(batch)?;
    let (loss, grads) = loss_and_param_grads(spec, params, &x, &y)?;
    Ok(GradientUpdate {
        kind: UpdateKind::Gradient,
        tensors: grads.grads,
        n_samples: batch.len(),
        client_lr,
        client_id,
        round,
        loss,
    })
}

/// FedSGD client: samples one batch from its shard (all of it when
/// `batch_size` is `None`) and returns the loss gradient.
pub fn client_update_fedsgd(
    spec: &ModelSpec,
    params: &ModelParams,
    data: &Dataset,
    shard: &[usize],
    batch_size: Option<usize>,
    client_lr: f64,
    client_id: usize,
    round: usize,
    seed: u64,
) -> Result<GradientUpdate> {
    if shard.is_empty() {
        return Err(Error::input(format!("client {} has no data", client_id)));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, client_id as u64, round as u64));
    let order = epoch_order(shard, &mut rng);
    let take = batch_size.unwrap_or(order.len()).min(order.len());
    gradient_update_for_batch(spec, params, data, &order[..take], client_lr, client_id, round)
}

#[derive(Debug, Clone, Copy)]
pub struct LocalTrainCfg {
    pub local_epochs: usize,
    /// `None` = full shard per step.
    pub batch_size: Option<usize>,
    pub lr: f64,
    /// Hard cap on local minibatch steps, counted across epochs. `None` runs
    /// every epoch to completion; `Some(s)` stops after `s` steps even
    /// mid-epoch, matching a steps-per-round protocol.
    pub max_steps: Option<usize>,
}

impl LocalTrainCfg {
    pub fn epochs(local_epochs: usize, batch_size: Option<usize>, lr: f64) -> LocalTrainCfg {
        LocalTrainCfg { local_epochs, batch_size, lr, max_steps: None }
    }

    /// Exactly `steps` minibatch steps, reshuffling the shard as often as
    /// needed.
    pub fn steps(steps: usize, batch_size: Option<usize>, lr: f64) -> LocalTrainCfg {
        LocalTrainCfg { local_epochs: usize::MAX, batch_size, lr, max_steps: Some(steps) }
    }
}

/// FedAvg client with a step observer. The observer sees the parameters as
/// they stand *before* each local step together with the minibatch about to
/// be applied; tests use it to watch how local drift destroys or preserves
/// leakage structure.
pub fn client_update_fedavg_observed(
    spec: &ModelSpec,
    params: &ModelParams,
    data: &Dataset,
    shard: &[usize],
    cfg: LocalTrainCfg,
    client_id: usize,
    round: usize,
    seed: u64,
    observer: &mut dyn FnMut(usize, &ModelParams, &[usize]),
) -> Result<GradientUpdate> {
    if shard.is_empty() {
        return Err(Error::input(format!("client {} has no data", client_id)));
    }
    if cfg.local_epochs == 0 {
        return Err(Error::config("local_epochs must be at least 1"));
    }
    if cfg.max_steps == Some(0) {
        return Err(Error::config("max_steps must be at least 1"));
    }
    let cap = cfg.max_steps.unwrap_or(usize::MAX);
    let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, client_id as u64, round as u64));
    let mut local = params.clone();
    let mut opt = Optimizer::sgd(cfg.lr);
    let mut loss_sum = 0.0;
    let mut steps = 0usize;
    'epochs: for _ in 0..cfg.local_epochs {
        if steps == cap {
            break;
        }
        let order = epoch_order(shard, &mut rng);
        let bs = cfg.batch_size.unwrap_or(order.len()).max(1);
        for batch in order.chunks(bs) {
            if steps == cap {
                break 'epochs;
            }
            observer(steps, &local, batch);
            let (x, y) = data.batch(batch)?;
            let (loss, grads) = loss_and_param_grads(spec, &local, &x, &y)?;
            opt.step(&mut local.tensors, &grads.grads)?;
            loss_sum += loss;
            steps += 1;
        }
    }
    let delta: Vec<Tensor> = local
        .tensors
        .iter()
        .zip(&params.tensors)
        .map(|(after, before)| {
            let mut d = after.clone();
            for (dv, bv) in d.data_mut().iter_mut().zip(before.data()) {
                *dv -= bv;
            }
            d
        })
        .collect();
    Ok(GradientUpdate {
        kind: UpdateKind::FedavgDelta,
        tensors: delta,
        n_samples: shard.len(),
        client_lr: cfg.lr,
        client_id,
        round,
        loss: loss_sum / steps as f64,
    })
}

pub fn client_update_fedavg(
    spec: &ModelSpec,
    params: &ModelParams,
    data: &Dataset,
    shard: &[usize],
    cfg: LocalTrainCfg,
    client_id: usize,
    round: usize,
    seed: u64,
) -> Result<GradientUpdate> {
    client_update_fedavg_observed(
        spec, params, data, shard, cfg, client_id, round, seed, &mut |_, _, _| {},
    )
}

/// Sample-weighted average of congruent update tensors. Updates are sorted
/// by client id first, so the result is invariant to arrival order.
pub fn aggregate(updates: &[GradientUpdate]) -> Result<(UpdateKind, Vec<Tensor>, usize)> {
    let first = updates.first().ok_or_else(|| Error::input("no updates to aggregate"))?;
    if updates.iter().any(|u| u.kind != first.kind) {
        return Err(Error::input("cannot aggregate gradients with deltas"));
    }
    if updates.iter().any(|u| u.round != first.round) {
        return Err(Error::input("updates from different rounds"));
    }
    let mut ids: Vec<usize> = updates.iter().map(|u| u.client_id).collect();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() != updates.len() {
        return Err(Error::input("duplicate client id in aggregation"));
    }
    let mut order: Vec<&GradientUpdate> = updates.iter().collect();
    order.sort_by_key(|u| u.client_id);

    let total: usize = order.iter().map(|u| u.n_samples).sum();
    if total == 0 {
        return Err(Error::input("aggregate weight is zero"));
    }
    let mut acc: Vec<Tensor> = order[0].tensors.iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
    for u in &order {
        if u.tensors.len() != acc.len() {
            return Err(Error::input("updates have differing tensor counts"));
        }
        let w = u.n_samples as f64 / total as f64;
        for (a, t) in acc.iter_mut().zip(&u.tensors) {
            if a.shape() != t.shape() {
                return Err(Error::input("updates have differing tensor shapes"));
            }
            for (av, tv) in a.data_mut().iter_mut().zip(t.data()) {
                *av += w * tv;
            }
        }
    }
    Ok((first.kind, acc, total))
}

/// Applies one round of client updates to the global parameters.
///
/// Every update is first normalised to a parameter delta: a raw gradient
/// becomes `(p + (-lr * g)) - p`, the delta of one virtual SGD step at the
/// client's learning rate. FedAvg deltas pass through unchanged. Normalised
/// deltas are aggregated and added — one shared code path for both
/// algorithms.
pub fn server_apply(params: &mut ModelParams, updates: &[GradientUpdate]) -> Result<()> {
    let normalised: Vec<GradientUpdate> = updates
        .iter()
        .map(|u| {
            let tensors = match u.kind {
                UpdateKind::FedavgDelta => u.tensors.clone(),
                UpdateKind::Gradient => u
                    .tensors
                    .iter()
                    .zip(&params.tensors)
                    .map(|(g, p)| {
                        let mut d = p.clone();
                        for (dv, gv) in d.data_mut().iter_mut().zip(g.data()) {
                            *dv += -u.client_lr * gv;
                        }
                        for (dv, pv) in d.data_mut().iter_mut().zip(p.data()) {
                            *dv -= pv;
                        }
                        d
                    })
                    .collect(),
            };
            GradientUpdate { kind: UpdateKind::FedavgDelta, tensors, ..u.clone() }
        })
        .collect();
    let (_, delta, _) = aggregate(&normalised)?;
    if delta.len() != params.tensors.len() {
        return Err(Error::input("aggregated delta does not match parameter list"));
    }
    for (p, d) in params.tensors.iter_mut().zip(&delta) {
        if p.shape() != d.shape() {
            return Err(Error::input("aggregated delta shape mismatch"));
        }
        p.add_assign(d);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FlAlgorithm {
    FedSgd { batch_size: Option<usize> },
    FedAvg { local_epochs: usize, batch_size: Option<usize>, local_steps: Option<usize> },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PartitionCfg {
    Iid,
    NonIid { bias: f64 },
}

#[derive(Debug, Clone)]
pub struct FlConfig {
    pub algorithm: FlAlgorithm,
    pub rounds: usize,
    pub n_clients: usize,
    pub client_lr: f64,
    pub partition: PartitionCfg,
    /// Evaluate on the test set every this many rounds (0 = never).
    pub eval_every: usize,
    /// Cap on test images per evaluation (0 = all).
    pub eval_subset: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct RoundLog {
    pub round: usize,
    pub train_loss: f64,
    pub eval_acc: Option<f64>,
}

#[derive(Debug)]
pub struct FlRun {
    pub params: ModelParams,
    pub history: Vec<RoundLog>,
}

/// Accuracy of `params` on (a seeded subset of) `data`.
pub fn accuracy(spec: &ModelSpec, params: &ModelParams, data: &Dataset, cap: usize, seed: u64) -> Result<f64> {
    let n = data.len();
    if n == 0 {
        return Err(Error::input("empty evaluation set"));
    }
    let indices: Vec<usize> = if cap == 0 || cap >= n {
        (0..n).collect()
    } else {
        let mut idx: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        idx.shuffle(&mut rng);
        idx.truncate(cap);
        idx
    };
    let mut correct = 0usize;
    // batched to bound peak memory on large eval sets
    for chunk in indices.chunks(256) {
        let (x, y) = data.batch(chunk)?;
        let pred = predict(spec, params, &x)?;
        correct += pred.iter().zip(&y).filter(|(p, t)| p == t).count();
    }
    Ok(correct as f64 / indices.len() as f64)
}

/// Full multi-round simulation from `init`.
pub fn run_fl(
    spec: &ModelSpec,
    init: ModelParams,
    train: &Dataset,
    test: Option<&Dataset>,
    cfg: &FlConfig,
) -> Result<FlRun> {
    if cfg.rounds == 0 {
        return Err(Error::config("need at least one round"));
    }
    let shards = match cfg.partition {
        PartitionCfg::Iid => partition_iid(train.len(), cfg.n_clients, derive_seed(cfg.seed, 0, 0))?,
        PartitionCfg::NonIid { bias } => partition_noniid(
            train.labels(),
            train.classes,
            cfg.n_clients,
            bias,
            derive_seed(cfg.seed, 0, 0),
        )?,
    };
    let mut params = init;
    let mut history = Vec::with_capacity(cfg.rounds);
    for round in 0..cfg.rounds {
        let mut updates = Vec::with_capacity(cfg.n_clients);
        for (client_id, shard) in shards.iter().enumerate() {
            if shard.is_empty() {
                continue;
            }
            let u = match cfg.algorithm {
                FlAlgorithm::FedSgd { batch_size } => client_update_fedsgd(
                    spec, &params, train, shard, batch_size, cfg.client_lr, client_id, round, cfg.seed,
                )?,
                FlAlgorithm::FedAvg { local_epochs, batch_size, local_steps } => {
                    client_update_fedavg(
                        spec,
                        &params,
                        train,
                        shard,
                        LocalTrainCfg { local_epochs, batch_size, lr: cfg.client_lr, max_steps: local_steps },
                        client_id,
                        round,
                        cfg.seed,
                    )?
                }
            };
            updates.push(u);
        }
        let train_loss = {
            let total: usize = updates.iter().map(|u| u.n_samples).sum();
            updates.iter().map(|u| u.loss * u.n_samples as f64).sum::<f64>() / total as f64
        };
        server_apply(&mut params, &updates)?;
        let eval_acc = match (test, cfg.eval_every) {
            (Some(t), k) if k > 0 && (round + 1) % k == 0 => {
                Some(accuracy(spec, &params, t, cfg.eval_subset, derive_seed(cfg.seed, 1, round as u64))?)
            }
            _ => None,
        };
        history.push(RoundLog { round, train_loss, eval_acc });
    }
    Ok(FlRun { params, history })
}
