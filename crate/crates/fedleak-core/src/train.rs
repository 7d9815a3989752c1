//! Centralized training and fine-tuning for downstream comparisons:
//! plain SGD with momentum and plateau-halving learning rate.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fl::accuracy;
use crate::model::{loss_and_param_grads, ModelParams, ModelSpec};
use crate::optim::Optimizer;
use crate::seeds::derive_seed;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epochs without eval improvement before the LR is scaled down.
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub min_lr: f64,
    /// 0 evaluates on the full test set.
    pub eval_cap: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
            plateau_patience: 5,
            plateau_factor: 0.5,
            min_lr: 1e-5,
            eval_cap: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_acc: Option<f64>,
    pub lr: f64,
}

#[derive(Debug)]
pub struct TrainRun {
    pub params: ModelParams,
    pub history: Vec<EpochLog>,
    /// Best eval accuracy seen, or best (lowest) train loss as -loss when no
    /// test set was given.
    pub best_score: f64,
}

/// SGD over shuffled minibatches. When `test` is present the plateau
/// scheduler watches eval accuracy, otherwise train loss.
pub fn train(
    spec: &ModelSpec,
    init: ModelParams,
    data: &Dataset,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<TrainRun> {
    if cfg.epochs == 0 {
        return Err(Error::config("need at least one epoch"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::config("batch size must be positive"));
    }
    if data.is_empty() {
        return Err(Error::input("empty training set"));
    }
    if !(0.0..1.0).contains(&cfg.plateau_factor) {
        return Err(Error::config("plateau factor must lie in (0, 1)"));
    }
    let mut params = init;
    let mut opt = Optimizer::sgd_momentum(cfg.lr, cfg.momentum);
    if cfg.weight_decay != 0.0 {
        opt = Optimizer::Sgd {
            lr: cfg.lr,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            velocity: None,
        };
    }
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best_score = f64::NEG_INFINITY;
    let mut stale = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(cfg.seed, 1, epoch as u64));
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = data.batch(chunk)?;
            let (loss, grads) = loss_and_param_grads(spec, &params, &x, &y)?;
            opt.step(&mut params.tensors, &grads.grads)?;
            loss_sum += loss;
            batches += 1;
        }
        let train_loss = loss_sum / batches as f64;
        let eval_acc = match test {
            Some(t) => Some(accuracy(spec, &params, t, cfg.eval_cap, derive_seed(cfg.seed, 2, epoch as u64))?),
            None => None,
        };
        let score = eval_acc.unwrap_or(-train_loss);
        if score > best_score + 1e-12 {
            best_score = score;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.plateau_patience {
                let next = (opt.lr() * cfg.plateau_factor).max(cfg.min_lr);
                opt.set_lr(next);
                stale = 0;
            }
        }
        history.push(EpochLog { epoch, train_loss, eval_acc, lr: opt.lr() });
    }
    Ok(TrainRun { params, history, best_score })
}

/// Continues training from existing weights at a reduced rate; everything
/// else matches `train`.
pub fn finetune(
    spec: &ModelSpec,
    params: ModelParams,
    data: &Dataset,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<TrainRun> {
    train(spec, params, data, test, cfg)
}

#[derive(Debug, Clone)]
pub struct SettingResult {
    pub name: String,
    pub accuracy: f64,
    /// Percentage-point gap to the first (reference) setting.
    pub delta: f64,
}

/// Tags each (name, accuracy) row with its gap to the first row.
pub fn compare_settings(rows: &[(String, f64)]) -> Vec<SettingResult> {
    let base = rows.first().map(|(_, a)| *a).unwrap_or(0.0);
    rows.iter()
        .map(|(name, acc)| SettingResult {
            name: name.clone(),
            accuracy: *acc,
            delta: (acc - base) * 100.0,
        })
        .collect()
}

pub fn render_table(rows: &[SettingResult]) -> String {
    let name_w = rows.iter().map(|r| r.name.len()).max().unwrap_or(7).max("setting".len());
    let mut out = format!("{:<w$}  {:>9}  {:>8}\n", "setting", "accuracy", "delta_pp", w = name_w);
    for r in rows {
        out.push_str(&format!(
            "{:<w$}  {:>9.4}  {:>+8.2}\n",
            r.name,
            r.accuracy,
            r.delta,
            w = name_w
        ));
    }
    out
}

pub fn settings_csv(rows: &[SettingResult]) -> String {
    let mut out = String::from("setting,accuracy,delta_pp\n");
    for r in rows {
        out.push_str(&format!("{},{:.6},{:.4}\n", r.name, r.accuracy, r.delta));
    }
    out
}
