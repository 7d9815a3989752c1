//! Closed-form reconstruction of client images from dense-layer updates.
//!
//! All three attacks plant a wide dense "measurement" layer whose rows see
//! the flattened image, followed by a head whose weight columns are all
//! equal. The equal columns make the backpropagated signal `q_n` of image
//! `n` identical across measurement neurons, so each neuron's update row is
//! `sum_n q_n * x_n` over its active images and its bias update is
//! `sum_n q_n`: the quotient recovers the (weighted) mean of the active
//! images, exactly one image when a neuron isolated it. Three plans differ
//! only in how neurons carve up the batch:
//!
//! * `Binning` — every row measures mean brightness, biases are negated
//!   brightness quantiles of a calibration set, relu. Neuron `i` fires for
//!   every image brighter than cutoff `i`, so bins are cumulative and
//!   adjacent-neuron differences isolate one brightness band each.
//! * `TrapWeights` — random half-positive/half-negative rows with positives
//!   damped, zero bias, relu. Each neuron fires for just under half of all
//!   images; with enough neurons some fire for exactly one.
//! * `LokiCsf` — an identity 1x1 convolution scaled by `csf` in front, then
//!   brightness rows with biases placed so the hardtanh pass-band of neuron
//!   `i` is the brightness window (cutoff_i, cutoff_i + 2/csf). Each image
//!   excites an isolated window, and because saturated neurons pass no
//!   gradient, locally-trained (FedAvg) clients cannot smear images from
//!   later local steps into a window they already moved.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::assign::{match_reconstructions, MatchMode};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fl::GradientUpdate;
use crate::model::{LayerSpec, ModelParams, ModelSpec};
use crate::tensor::Tensor;

/// Bias-gradient mass below which a slot is declared empty. Real per-image
/// signals are at least ~1e-5 by head construction; floating-point residue
/// of a cancelled slot is below 1e-18.
pub const EMPTY_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackKind {
    Binning,
    TrapWeights,
    LokiCsf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinActivation {
    Relu,
    Hardtanh,
}

/// A fully materialised measurement layer plus the metadata needed to read
/// reconstructions back out of an update.
#[derive(Debug, Clone)]
pub struct AttackPlan {
    pub kind: AttackKind,
    pub input_shape: (usize, usize, usize),
    pub classes: usize,
    /// Number of measurement neurons (reconstruction slots).
    pub k: usize,
    /// [k, d] measurement rows.
    pub measurement: Tensor,
    /// [k] measurement biases.
    pub biases: Tensor,
    /// Ascending brightness cutoffs (empty for trap weights).
    pub cutoffs: Vec<f64>,
    pub activation: BinActivation,
    /// Convolution scale factor; 1.0 for plans without the conv front.
    pub csf: f64,
    pub seed: u64,
    pub warnings: Vec<String>,
}

impl AttackPlan {
    pub fn image_dim(&self) -> usize {
        self.input_shape.0 * self.input_shape.1 * self.input_shape.2
    }

    /// Brightness band a slot is responsible for: [lo, hi).
    pub fn slot_band(&self, slot: usize) -> Option<(f64, f64)> {
        match self.kind {
            AttackKind::TrapWeights => None,
            AttackKind::Binning => {
                let hi = if slot + 1 < self.k { self.cutoffs[slot + 1] } else { f64::INFINITY };
                Some((self.cutoffs[slot], hi))
            }
            AttackKind::LokiCsf => {
                Some((self.cutoffs[slot], self.cutoffs[slot] + 2.0 / self.csf))
            }
        }
    }
}

/// Strictly increasing brightness cutoffs: an under-floor first cutoff, then
/// the i/k quantiles of the calibration brightnesses for i = 1..k-1.
/// Cutoffs sit halfway between adjacent order statistics so a calibration
/// image never lands exactly on a boundary.
pub fn brightness_cutoffs(brightnesses: &[f64], k: usize) -> Result<Vec<f64>> {
    if k < 2 {
        return Err(Error::config("need at least 2 bins"));
    }
    let m = brightnesses.len();
    if m < 2 * k {
        return Err(Error::config(format!(
            "calibration set too small: {} samples for {} bins",
            m, k
        )));
    }
    let mut sorted = brightnesses.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("non-finite brightness"));
    let spread = sorted[m - 1] - sorted[0];
    if spread <= 0.0 {
        return Err(Error::numeric("degenerate calibration: all brightnesses equal"));
    }
    let mut cutoffs = Vec::with_capacity(k);
    cutoffs.push(sorted[0] - (spread * 1e-3 + 1e-12));
    for i in 1..k {
        let q = (i * m) / k;
        let c = 0.5 * (sorted[q - 1] + sorted[q]);
        cutoffs.push(c);
    }
    for w in cutoffs.windows(2) {
        if w[1] <= w[0] {
            return Err(Error::numeric(
                "degenerate quantiles: calibration brightnesses contain heavy ties",
            ));
        }
    }
    Ok(cutoffs)
}

fn brightness_rows(k: usize, d: usize) -> Tensor {
    Tensor::full(vec![k, d], 1.0 / d as f64)
}

/// Cumulative brightness-bin plan (relu measurement layer).
pub fn binning_plan(
    input_shape: (usize, usize, usize),
    classes: usize,
    k: usize,
    calibration: &Dataset,
    seed: u64,
) -> Result<AttackPlan> {
    if calibration.input != input_shape {
        return Err(Error::config("calibration images do not match the attack input shape"));
    }
    let cutoffs = brightness_cutoffs(&calibration.brightnesses(), k)?;
    let d = input_shape.0 * input_shape.1 * input_shape.2;
    let biases = Tensor::from_parts(vec![k], cutoffs.iter().map(|c| -c).collect());
    Ok(AttackPlan {
        kind: AttackKind::Binning,
        input_shape,
        classes,
        k,
        measurement: brightness_rows(k, d),
        biases,
        cutoffs,
        activation: BinActivation::Relu,
        csf: 1.0,
        seed,
        warnings: Vec::new(),
    })
}

/// Random sign-split measurement rows with damped positives and zero bias.
/// Exactly ceil(k/2) rows have more negative than positive entries; the rest
/// have fewer. Both halves keep each neuron's activation probability just
/// under one half.
pub fn trap_plan(
    input_shape: (usize, usize, usize),
    classes: usize,
    k: usize,
    seed: u64,
) -> Result<AttackPlan> {
    if k < 1 {
        return Err(Error::config("need at least one trap neuron"));
    }
    let d = input_shape.0 * input_shape.1 * input_shape.2;
    if d < 2 {
        return Err(Error::config("trap rows need at least 2 pixels"));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let neg_dominant_rows = k.div_ceil(2);
    let mut rows = Vec::with_capacity(k * d);
    for i in 0..k {
        let n_neg = if i < neg_dominant_rows { d / 2 + 1 } else { d - (d / 2 + 1) };
        let mut row: Vec<f64> = Vec::with_capacity(d);
        row.resize(n_neg, -1.0 / d as f64);
        row.resize(d, 0.96 / d as f64);
        row.shuffle(&mut rng);
        rows.extend_from_slice(&row);
    }
    Ok(AttackPlan {
        kind: AttackKind::TrapWeights,
        input_shape,
        classes,
        k,
        measurement: Tensor::from_parts(vec![k, d], rows),
        biases: Tensor::zeros(vec![k]),
        cutoffs: Vec::new(),
        activation: BinActivation::Relu,
        csf: 1.0,
        seed,
        warnings: Vec::new(),
    })
}

/// Scaled-identity-convolution plan: hardtanh pass-band windows in
/// brightness space, sized 2/csf. Unlike binning, the cutoffs are *equally
/// spaced* at exactly the window width, so consecutive windows tile the
/// calibration brightness range with neither gaps (lost images) nor overlaps
/// (double counting). Coverage requires k * 2/csf to span the range; a
/// too-large csf leaves bright images uncovered and is flagged.
pub fn loki_plan(
    input_shape: (usize, usize, usize),
    classes: usize,
    k: usize,
    csf: f64,
    calibration: &Dataset,
    seed: u64,
) -> Result<AttackPlan> {
    if calibration.input != input_shape {
        return Err(Error::config("calibration images do not match the attack input shape"));
    }
    if csf <= 0.0 {
        return Err(Error::config("csf must be positive"));
    }
    if k < 1 {
        return Err(Error::config("need at least one window"));
    }
    let b = calibration.brightnesses();
    let lo = b.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = b.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let spread = hi - lo;
    if !(spread > 0.0) {
        return Err(Error::numeric("degenerate calibration: all brightnesses equal"));
    }
    let width = 2.0 / csf;
    let floor = lo - spread * 1e-3;
    let cutoffs: Vec<f64> = (0..k).map(|i| floor + i as f64 * width).collect();
    let d = input_shape.0 * input_shape.1 * input_shape.2;
    let mut warnings = Vec::new();
    if csf < 10.0 {
        warnings.push(format!(
            "csf {} is small: window width {} dwarfs the brightness spread and neurons will collide",
            csf, width
        ));
    }
    let coverage = k as f64 * width;
    if coverage < (hi - floor) {
        warnings.push(format!(
            "windows cover a brightness span of {:.4} but calibration spans {:.4}; \
             images brighter than {:.4} will be missed (lower csf or raise k)",
            coverage,
            hi - floor,
            floor + coverage
        ));
    }
    // place the window's lower edge on the cutoff: pre = csf*(b - c_i) - 1
    let biases = Tensor::from_parts(vec![k], cutoffs.iter().map(|c| -csf * c - 1.0).collect());
    Ok(AttackPlan {
        kind: AttackKind::LokiCsf,
        input_shape,
        classes,
        k,
        measurement: brightness_rows(k, d),
        biases,
        cutoffs,
        activation: BinActivation::Hardtanh,
        csf,
        seed,
        warnings,
    })
}

/// Attack model: plan layers plus the equal-column head, ready to hand to a
/// federated client.
#[derive(Debug, Clone)]
pub struct AttackModel {
    pub spec: ModelSpec,
    pub params: ModelParams,
    pub plan: AttackPlan,
    /// Index of the measurement weight in the parameter list (bias follows).
    pub attack_param_index: usize,
}

/// Head whose weight columns are all equal, so every measurement neuron
/// receives the same backpropagated signal per image. Row values grow
/// triangularly (1, 3, 6, ...) — unevenly spaced so that no class value
/// coincides with the softmax-weighted mean even when the softmax is nearly
/// uniform — and are scaled so logits stay within a few units for any
/// activation sum the measurement layer can produce.
fn equal_column_head(k: usize, classes: usize) -> (Tensor, Tensor) {
    let tri = |j: usize| (j * (j + 1) / 2) as f64;
    let scale = 3.0 / (k as f64 * tri(classes));
    let mut w = Vec::with_capacity(classes * k);
    for c in 0..classes {
        let v = scale * tri(c + 1);
        w.extend(std::iter::repeat(v).take(k));
    }
    (Tensor::from_parts(vec![classes, k], w), Tensor::zeros(vec![classes]))
}

pub fn build_attack_model(plan: &AttackPlan) -> Result<AttackModel> {
    let c = plan.input_shape.0;
    let d = plan.image_dim();
    if plan.measurement.shape() != [plan.k, d] {
        return Err(Error::config("measurement matrix shape does not match the plan"));
    }
    if plan.biases.shape() != [plan.k] {
        return Err(Error::config("bias vector shape does not match the plan"));
    }
    let activation = match plan.activation {
        BinActivation::Relu => LayerSpec::Relu,
        BinActivation::Hardtanh => LayerSpec::Hardtanh,
    };
    let (head_w, head_b) = equal_column_head(plan.k, plan.classes);
    let (layers, tensors, attack_param_index) = match plan.kind {
        AttackKind::LokiCsf => {
            let mut conv_w = Tensor::zeros(vec![c, c, 1, 1]);
            for ch in 0..c {
                conv_w.data_mut()[ch * c + ch] = plan.csf;
            }
            (
                vec![
                    LayerSpec::Conv2d { out_channels: c, kernel: 1, stride: 1, padding: 0 },
                    LayerSpec::Flatten,
                    LayerSpec::Dense { output: plan.k },
                    activation,
                    LayerSpec::Dense { output: plan.classes },
                ],
                vec![
                    conv_w,
                    Tensor::zeros(vec![c]),
                    plan.measurement.clone(),
                    plan.biases.clone(),
                    head_w,
                    head_b,
                ],
                2,
            )
        }
        AttackKind::Binning | AttackKind::TrapWeights => (
            vec![
                LayerSpec::Flatten,
                LayerSpec::Dense { output: plan.k },
                activation,
                LayerSpec::Dense { output: plan.classes },
            ],
            vec![plan.measurement.clone(), plan.biases.clone(), head_w, head_b],
            0,
        ),
    };
    let spec = ModelSpec {
        name: format!("attack_{:?}_{}", plan.kind, plan.k),
        input: plan.input_shape,
        classes: plan.classes,
        layers,
    };
    spec.validate()?;
    let params = ModelParams { tensors };
    Ok(AttackModel { spec, params, plan: plan.clone(), attack_param_index })
}

/// One reconstruction slot read out of an update.
#[derive(Debug, Clone)]
pub struct BinRecon {
    pub slot: usize,
    /// [c, h, w]; zeros when the slot is empty.
    pub image: Tensor,
    /// Bias-gradient mass behind the slot; magnitude below [`EMPTY_EPS`]
    /// means empty.
    pub mass: f64,
    pub empty: bool,
    /// Brightness band this slot covers, when the plan defines one.
    pub band: Option<(f64, f64)>,
}

/// Reads every slot out of a captured update. Works identically for FedSGD
/// gradients and FedAvg deltas: a delta is a (-lr)-scaled gradient
/// accumulation and the scale cancels in the quotient.
pub fn reconstruct(model: &AttackModel, update: &GradientUpdate) -> Result<Vec<BinRecon>> {
    if update.tensors.len() != model.params.tensors.len() {
        return Err(Error::input(format!(
            "update has {} tensors, attack model has {}",
            update.tensors.len(),
            model.params.tensors.len()
        )));
    }
    let plan = &model.plan;
    let idx = model.attack_param_index;
    let dw = &update.tensors[idx];
    let db = &update.tensors[idx + 1];
    let d = plan.image_dim();
    if dw.shape() != [plan.k, d] || db.shape() != [plan.k] {
        return Err(Error::input("update tensors do not match the measurement layer"));
    }
    let (c, h, w) = plan.input_shape;
    let shape = vec![c, h, w];
    let mut out = Vec::with_capacity(plan.k);
    for slot in 0..plan.k {
        let (num, den): (Vec<f64>, f64) = match plan.kind {
            // cumulative bins: adjacent differences isolate one band
            AttackKind::Binning if slot + 1 < plan.k => {
                let hi = &dw.data()[(slot + 1) * d..(slot + 2) * d];
                let lo = &dw.data()[slot * d..(slot + 1) * d];
                (
                    lo.iter().zip(hi).map(|(a, b)| a - b).collect(),
                    db.data()[slot] - db.data()[slot + 1],
                )
            }
            _ => (dw.data()[slot * d..(slot + 1) * d].to_vec(), db.data()[slot]),
        };
        let empty = den.abs() < EMPTY_EPS;
        let image = if empty {
            Tensor::zeros(shape.clone())
        } else {
            // the conv front multiplied pixels by csf; undo it here
            let inv = 1.0 / (den * plan.csf);
            Tensor::from_parts(shape.clone(), num.iter().map(|v| v * inv).collect())
        };
        out.push(BinRecon { slot, image, mass: den, empty, band: plan.slot_band(slot) });
    }
    Ok(out)
}

/// Ground-truth slot membership for a known batch: which images each slot
/// would isolate. Mirrors the activation boundary semantics of the forward
/// pass exactly (relu fires strictly above zero; hardtanh passes gradient
/// strictly inside the clamp).
pub fn bin_members(plan: &AttackPlan, batch: &Tensor) -> Result<Vec<Vec<usize>>> {
    let d = plan.image_dim();
    if batch.shape().len() != 4 || batch.shape()[1] * batch.shape()[2] * batch.shape()[3] != d {
        return Err(Error::input("batch shape does not match the plan input"));
    }
    let n = batch.shape()[0];
    let mut active = vec![Vec::new(); plan.k];
    for img in 0..n {
        let x = &batch.data()[img * d..(img + 1) * d];
        for slot in 0..plan.k {
            let row = &plan.measurement.data()[slot * d..(slot + 1) * d];
            let dot: f64 = row.iter().zip(x).map(|(a, b)| a * b * plan.csf).sum();
            let pre = dot + plan.biases.data()[slot];
            let fires = match plan.activation {
                BinActivation::Relu => pre > 0.0,
                BinActivation::Hardtanh => pre > -1.0 && pre < 1.0,
            };
            if fires {
                active[slot].push(img);
            }
        }
    }
    if plan.kind == AttackKind::Binning {
        // slot i owns images active on neuron i but not on neuron i+1
        let mut owned = Vec::with_capacity(plan.k);
        for slot in 0..plan.k {
            if slot + 1 < plan.k {
                let next = &active[slot + 1];
                owned.push(
                    active[slot].iter().copied().filter(|i| !next.contains(i)).collect::<Vec<_>>(),
                );
            } else {
                owned.push(active[slot].clone());
            }
        }
        return Ok(owned);
    }
    Ok(active)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinContent {
    Empty,
    Single,
    Collision,
}

/// Oracle classification from known membership counts.
pub fn classify_by_count(members: &[Vec<usize>]) -> Vec<BinContent> {
    members
        .iter()
        .map(|m| match m.len() {
            0 => BinContent::Empty,
            1 => BinContent::Single,
            _ => BinContent::Collision,
        })
        .collect()
}

/// Label-free heuristic: collisions average several images, which compresses
/// the pixel range and can push pixels outside the valid band. Use the count
/// oracle when the batch is known; this exists for the attacker-eye view and
/// is explicitly approximate.
pub fn classify_recon_heuristic(rec: &BinRecon, min_single_range: f64) -> BinContent {
    if rec.empty {
        return BinContent::Empty;
    }
    let lo = rec.image.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = rec.image.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if lo < -0.05 || hi > 1.05 || (hi - lo) < min_single_range {
        BinContent::Collision
    } else {
        BinContent::Single
    }
}

/// Probability that a given image is alone in its bin when every image
/// lands in one of `k` equally likely bins.
pub fn singleton_rate_exact(k: usize, batch: usize) -> f64 {
    if batch == 0 || k == 0 {
        return 0.0;
    }
    (1.0 - 1.0 / k as f64).powi(batch as i32 - 1)
}

/// Monte-Carlo estimate of the same rate: (mean fraction alone, standard
/// error). Written against the closed form as a mutual check.
pub fn singleton_rate_mc(k: usize, batch: usize, trials: usize, seed: u64) -> (f64, f64) {
    use rand::Rng;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut fractions = Vec::with_capacity(trials);
    let mut counts = vec![0u32; k];
    for _ in 0..trials {
        counts.iter_mut().for_each(|c| *c = 0);
        let bins: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..k)).collect();
        for &b in &bins {
            counts[b] += 1;
        }
        let alone = bins.iter().filter(|&&b| counts[b] == 1).count();
        fractions.push(alone as f64 / batch as f64);
    }
    let mean = fractions.iter().sum::<f64>() / trials as f64;
    let var = fractions.iter().map(|f| (f - mean) * (f - mean)).sum::<f64>() / (trials - 1) as f64;
    (mean, (var / trials as f64).sqrt())
}

/// How much of a batch an update leaked: reconstructions are optimally
/// matched to batch images and a pair counts as leaked at or above
/// `threshold_db`. Distinct images only — ten copies of one bin cannot claim
/// ten leaks.
#[derive(Debug, Clone)]
pub struct LeakageStats {
    pub batch_size: usize,
    pub slots: usize,
    pub non_empty: usize,
    pub leaked: usize,
    pub fraction: f64,
    pub mean_psnr_leaked: f64,
}

pub fn leakage_stats(
    recs: &[BinRecon],
    batch: &Tensor,
    max_val: f64,
    threshold_db: f64,
) -> Result<LeakageStats> {
    let n = batch.shape()[0];
    let d: usize = batch.shape()[1..].iter().product();
    let img_shape = batch.shape()[1..].to_vec();
    let refs: Vec<Tensor> = (0..n)
        .map(|i| Tensor::from_parts(img_shape.clone(), batch.data()[i * d..(i + 1) * d].to_vec()))
        .collect();
    let live: Vec<&BinRecon> = recs.iter().filter(|r| !r.empty).collect();
    let rec_imgs: Vec<Tensor> = live.iter().map(|r| r.image.clone()).collect();
    let matching =
        match_reconstructions(&rec_imgs, &refs, None, None, max_val, MatchMode::Unconstrained)?;
    let leaked_pairs: Vec<f64> = matching
        .pairs
        .iter()
        .filter(|p| p.psnr >= threshold_db)
        .map(|p| p.psnr)
        .collect();
    let leaked = leaked_pairs.len();
    Ok(LeakageStats {
        batch_size: n,
        slots: recs.len(),
        non_empty: live.len(),
        leaked,
        fraction: leaked as f64 / n as f64,
        mean_psnr_leaked: if leaked == 0 {
            0.0
        } else {
            leaked_pairs.iter().sum::<f64>() / leaked as f64
        },
    })
}
