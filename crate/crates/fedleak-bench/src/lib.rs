//! Shared fixtures for the benchmarks: deterministic datasets, models, and
//! captured updates, built once per bench.

use fedleak_core::data::{synthetic_classes, Dataset};
use fedleak_core::fl::{gradient_update_for_batch, GradientUpdate};
use fedleak_core::lll::{binning_plan, build_attack_model, AttackModel};
use fedleak_core::model::{build_model, ModelParams, ModelSpec};
use fedleak_core::Tensor;

pub fn image_batch(b: usize, side: usize, seed: u64) -> (Dataset, Tensor, Vec<usize>) {
    let data = synthetic_classes((1, side, side), 10, b.max(256), seed).unwrap();
    let idx: Vec<usize> = (0..b).collect();
    let (x, y) = data.batch(&idx).unwrap();
    (data, x, y)
}

pub fn classifier(side: usize, hidden: usize, seed: u64) -> (ModelSpec, ModelParams) {
    let spec = ModelSpec::tiny_mlp((1, side, side), hidden, 10);
    let params = build_model(&spec, seed).unwrap();
    (spec, params)
}

/// A k-wide binning attack model plus one captured 64-image update.
pub fn attack_fixture(k: usize, side: usize, seed: u64) -> (AttackModel, GradientUpdate, Tensor) {
    let data = synthetic_classes((1, side, side), 10, 4096, seed).unwrap();
    let cal: Vec<usize> = (0..2048).collect();
    let calibration = data.subset(&cal).unwrap();
    let plan = binning_plan((1, side, side), 10, k, &calibration, seed + 1).unwrap();
    let model = build_attack_model(&plan).unwrap();
    let victim: Vec<usize> = (2048..2112).collect();
    let update =
        gradient_update_for_batch(&model.spec, &model.params, &data, &victim, 0.1, 0, 0).unwrap();
    let (batch, _) = data.batch(&victim).unwrap();
    (model, update, batch)
}
