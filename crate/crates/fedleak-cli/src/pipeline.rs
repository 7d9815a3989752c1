//! Stage execution: datasets, FL baselines, attacks, leaked-data export,
//! downstream training, and the run manifest. Every artifact is a function
//! of (config, seed) alone — no timestamps, no machine identifiers — so
//! identical inputs reproduce identical bytes.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use fedleak_core::data::{synthetic_classes, Dataset};
use fedleak_core::fl::{
    client_update_fedavg, gradient_update_for_batch, run_fl, FlAlgorithm, FlConfig,
    LocalTrainCfg, PartitionCfg,
};
use fedleak_core::gi::{attack_sweep, sweep_csv, GIConfig, LabelMode};
use fedleak_core::leaked::{self, LeakedDataset};
use fedleak_core::lll::{
    bin_members, binning_plan, build_attack_model, classify_by_count, leakage_stats, loki_plan,
    reconstruct, singleton_rate_exact, trap_plan, AttackModel,
};
use fedleak_core::model::{build_model, ModelParams, ModelSpec};
use fedleak_core::seeds::derive_seed;
use fedleak_core::train::{compare_settings, render_table, settings_csv, train, TrainConfig};

use crate::config::{AttackCfg, ExperimentConfig, FlCfg};

// seed streams, one per stage
const S_DATA: u64 = 1;
const S_MODEL: u64 = 2;
const S_FL: u64 = 3;
const S_ATTACK: u64 = 4;
const S_DOWNSTREAM: u64 = 5;

pub struct RunContext {
    pub cfg: ExperimentConfig,
    /// Raw config text, echoed into the manifest.
    pub raw: String,
    pub seed: u64,
    pub out: PathBuf,
    pub dry_run: bool,
}

#[derive(Serialize)]
struct Manifest<'a> {
    schema_version: u32,
    name: &'a str,
    seed: u64,
    config_sha256: String,
    stages: &'a [String],
    artifacts: &'a [String],
    warnings: &'a [String],
    config: &'a str,
}

fn sha256_hex(text: &str) -> String {
    let mut h = Sha256::new();
    h.update(text.as_bytes());
    format!("{:x}", h.finalize())
}

fn write_manifest(ctx: &RunContext, stages: &[String], artifacts: &[String], warnings: &[String]) -> Result<()> {
    let m = Manifest {
        schema_version: crate::config::SCHEMA_VERSION,
        name: &ctx.cfg.name,
        seed: ctx.seed,
        config_sha256: sha256_hex(&ctx.raw),
        stages,
        artifacts,
        warnings,
        config: &ctx.raw,
    };
    let path = ctx.out.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&m)?)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn build_dataset(cfg: &ExperimentConfig, seed: u64) -> Result<(Dataset, Dataset)> {
    let d = &cfg.dataset;
    let input = (d.input[0], d.input[1], d.input[2]);
    match d.source.as_str() {
        "synthetic" => {
            let total = d.train_size + d.test_size;
            let all = synthetic_classes(input, d.classes, total, derive_seed(seed, S_DATA, 0))?;
            let frac = d.train_size as f64 / total as f64;
            Ok(all.split(frac, derive_seed(seed, S_DATA, 1))?)
        }
        "mnist" => {
            let (train, test) = load_from_root(cfg, fedleak_core::io::load_mnist, &["mnist", "MNIST/raw", "MNIST"])
                .context("dataset.source = \"mnist\": no usable copy found (set FEDLEAK_DATA_DIR or dataset.root)")?;
            if input != (1, 28, 28) || d.classes != 10 {
                bail!("dataset.input/classes: mnist is [1, 28, 28] with 10 classes");
            }
            Ok((train, test))
        }
        "cifar10" => {
            let (train, test) = load_from_root(cfg, fedleak_core::io::load_cifar10, &["cifar10", "cifar-10-batches-bin"])
                .context("dataset.source = \"cifar10\": no usable copy found (set FEDLEAK_DATA_DIR or dataset.root)")?;
            if input != (3, 32, 32) || d.classes != 10 {
                bail!("dataset.input/classes: cifar10 is [3, 32, 32] with 10 classes");
            }
            Ok((train, test))
        }
        other => bail!("dataset.source: unknown source {:?}", other),
    }
}

fn load_from_root(
    cfg: &ExperimentConfig,
    loader: fn(&Path) -> fedleak_core::Result<(Dataset, Dataset)>,
    subdirs: &[&str],
) -> Result<(Dataset, Dataset)> {
    // env var beats the config key
    let root = fedleak_core::io::data_dir()
        .or_else(|| cfg.dataset.root.as_ref().map(PathBuf::from))
        .context("no dataset root configured")?;
    let mut candidates = vec![root.clone()];
    candidates.extend(subdirs.iter().map(|s| root.join(s)));
    for dir in &candidates {
        if let Ok(pair) = loader(dir) {
            return Ok(pair);
        }
    }
    bail!("no dataset found under {}", root.display())
}

pub fn build_spec(cfg: &ExperimentConfig) -> Result<ModelSpec> {
    let input = (cfg.dataset.input[0], cfg.dataset.input[1], cfg.dataset.input[2]);
    Ok(match cfg.model.kind.as_str() {
        "mnist_dnn" => ModelSpec::mnist_dnn(),
        "tiny_mlp" => ModelSpec::tiny_mlp(input, cfg.model.hidden, cfg.dataset.classes),
        "linear_probe" => ModelSpec::linear_probe(input, cfg.dataset.classes),
        other => bail!("model.kind: unknown model {:?}", other),
    })
}

fn fl_config(fl: &FlCfg, seed: u64) -> FlConfig {
    let batch = if fl.batch_size == 0 { None } else { Some(fl.batch_size) };
    FlConfig {
        algorithm: match fl.algorithm.as_str() {
            "fedavg" => FlAlgorithm::FedAvg {
                local_epochs: if fl.local_steps > 0 { usize::MAX } else { fl.local_epochs },
                batch_size: batch,
                local_steps: if fl.local_steps > 0 { Some(fl.local_steps) } else { None },
            },
            _ => FlAlgorithm::FedSgd { batch_size: batch },
        },
        rounds: fl.rounds,
        n_clients: fl.clients,
        client_lr: fl.client_lr,
        partition: match fl.partition.as_str() {
            "noniid" => PartitionCfg::NonIid { bias: fl.bias },
            _ => PartitionCfg::Iid,
        },
        eval_every: fl.eval_every,
        eval_subset: fl.eval_subset,
        seed: derive_seed(seed, S_FL, 0),
    }
}

/// Multi-round FL baseline; returns the final global model for downstream
/// fine-tuning.
pub fn stage_fl(
    ctx: &RunContext,
    spec: &ModelSpec,
    train_set: &Dataset,
    test_set: &Dataset,
) -> Result<(ModelParams, PathBuf)> {
    let fl = ctx.cfg.fl.as_ref().expect("fl stage needs an [fl] section");
    let cfg = fl_config(fl, ctx.seed);
    let init = build_model(spec, derive_seed(ctx.seed, S_MODEL, 0))?;
    let run = run_fl(spec, init, train_set, Some(test_set), &cfg)?;
    let mut csv = String::from("round,mode,n_clients,train_loss,test_accuracy\n");
    for log in &run.history {
        let acc = log.eval_acc.map(|a| format!("{:.6}", a)).unwrap_or_default();
        csv.push_str(&format!(
            "{},{},{},{:.6},{}\n",
            log.round, fl.algorithm, fl.clients, log.train_loss, acc
        ));
    }
    let path = ctx.out.join("reports").join("fl_rounds.csv");
    fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?;
    Ok((run.params, path))
}

fn build_plan_model(
    a: &AttackCfg,
    input: (usize, usize, usize),
    classes: usize,
    calibration: &Dataset,
    seed: u64,
) -> Result<AttackModel> {
    let plan_seed = derive_seed(seed, S_ATTACK, 0);
    let plan = match a.kind.as_str() {
        "binning" => binning_plan(input, classes, a.k, calibration, plan_seed)?,
        "trap" => trap_plan(input, classes, a.k, plan_seed)?,
        "loki" => loki_plan(input, classes, a.k, a.csf, calibration, plan_seed)?,
        other => bail!("attack.kind: {:?} is not a linear-layer attack", other),
    };
    Ok(build_attack_model(&plan)?)
}

pub struct LllOutcome {
    pub csv_path: PathBuf,
    pub leaked_dir: Option<PathBuf>,
    pub mean_fraction: f64,
    pub warnings: Vec<String>,
}

/// Linear-layer leakage over `attack.batches` victim batches: reconstruct,
/// score, and export the single-occupancy slots as a labeled dataset.
pub fn stage_attack_lll(
    ctx: &RunContext,
    train_set: &Dataset,
    batches_override: Option<usize>,
) -> Result<LllOutcome> {
    let a = ctx.cfg.attack.as_ref().expect("attack stage needs an [attack] section");
    let batches = batches_override.unwrap_or(a.batches);
    let input = train_set.input;
    let classes = train_set.classes;

    // the attacker calibrates on images it can see; victims come from the rest
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(ctx.seed, S_ATTACK, 1));
    order.shuffle(&mut rng);
    let cal_n = if a.kind == "trap" { 0 } else { a.calibration_size.min(train_set.len() / 2) };
    let calibration = train_set.subset(&order[..cal_n.max(1)])?;
    let pool = &order[cal_n..];
    if pool.len() < a.batch_size {
        bail!("attack.batch_size: victim pool has only {} images", pool.len());
    }

    let model = build_plan_model(a, input, classes, &calibration, ctx.seed)?;
    for w in &model.plan.warnings {
        eprintln!("warning: {}", w);
    }

    let client_lr = ctx.cfg.fl.as_ref().map(|f| f.client_lr).unwrap_or(0.1);
    let mut csv = String::from(
        "batch,attack,k,batch_size,update_kind,slots,non_empty,leaked,fraction,expected_singleton,mean_psnr_leaked\n",
    );
    let mut leaked_set = LeakedDataset::new(input, classes);
    let mut fraction_sum = 0.0;
    for b in 0..batches {
        let mut batch_rng = ChaCha20Rng::seed_from_u64(derive_seed(ctx.seed, S_ATTACK, 2 + b as u64));
        let mut pool_idx = pool.to_vec();
        pool_idx.shuffle(&mut batch_rng);
        let victim: Vec<usize> = pool_idx[..a.batch_size].to_vec();

        let (update, kind_name) = if a.local_steps > 0 {
            // victim runs real local SGD; the attack layer must survive it
            let lcfg = LocalTrainCfg::steps(a.local_steps, Some(a.local_batch), client_lr);
            let u = client_update_fedavg(
                &model.spec,
                &model.params,
                train_set,
                &victim,
                lcfg,
                0,
                b,
                derive_seed(ctx.seed, S_ATTACK, 1000 + b as u64),
            )?;
            (u, "fedavg_delta")
        } else {
            let u = gradient_update_for_batch(
                &model.spec,
                &model.params,
                train_set,
                &victim,
                client_lr,
                0,
                b,
            )?;
            (u, "fedsgd_grad")
        };

        let recs = reconstruct(&model, &update)?;
        let (x, y) = train_set.batch(&victim)?;
        let stats = leakage_stats(&recs, &x, 1.0, a.psnr_threshold)?;
        fraction_sum += stats.fraction;
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{:.6},{:.6},{:.4}\n",
            b,
            a.kind,
            a.k,
            a.batch_size,
            kind_name,
            stats.slots,
            stats.non_empty,
            stats.leaked,
            stats.fraction,
            singleton_rate_exact(a.k, a.batch_size),
            stats.mean_psnr_leaked
        ));

        // simulation-side ground truth for slot contents; under local steps
        // the boundaries drift, so late-step images may be classified
        // conservatively (collision) rather than optimistically
        let members = bin_members(&model.plan, &x)?;
        let content = classify_by_count(&members);
        let labels: Vec<Option<usize>> = members
            .iter()
            .map(|m| if m.len() == 1 { Some(y[m[0]]) } else { None })
            .collect();
        leaked_set.extend_from_slots(&recs, &content, &labels, &format!("{}/b{}", a.kind, b))?;
    }

    let path = ctx.out.join("reports").join("leakage.csv");
    fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?;

    let filtered = leaked_set.filter_by_quality(ctx.cfg.evaluation.min_quality);
    let leaked_dir = if filtered.is_empty() {
        None
    } else {
        let dir = ctx.out.join("leaked");
        leaked::export(&filtered, &dir)?;
        Some(dir)
    };
    Ok(LllOutcome {
        csv_path: path,
        leaked_dir,
        mean_fraction: fraction_sum / batches as f64,
        warnings: model.plan.warnings.clone(),
    })
}

/// Gradient-inversion sweep across the configured batch sizes.
pub fn stage_attack_gi(
    ctx: &RunContext,
    spec: &ModelSpec,
    train_set: &Dataset,
    batches_override: Option<usize>,
) -> Result<PathBuf> {
    let a = ctx.cfg.attack.as_ref().expect("attack stage needs an [attack] section");
    let trials = batches_override.unwrap_or(a.batches);
    let params = build_model(spec, derive_seed(ctx.seed, S_MODEL, 0))?;
    let cfg = GIConfig {
        iterations: a.iterations,
        lr: a.lr,
        tv_weight: a.tv_weight,
        retries: a.restarts,
        seed: derive_seed(ctx.seed, S_ATTACK, 0),
        ..GIConfig::default()
    };
    let mode = if a.label_mode == "recovered" { LabelMode::Recovered } else { LabelMode::Oracle };
    let rows = attack_sweep(spec, &params, train_set, &a.batch_sizes, trials, &cfg, mode)?;
    let path = ctx.out.join("reports").join("gi_sweep.csv");
    fs::write(&path, sweep_csv(&rows)).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

/// Downstream comparison: centralized on clean data, from-scratch on leaked
/// data, and (when FL ran) fine-tuning the FL model on leaked data.
pub fn stage_downstream(
    ctx: &RunContext,
    spec: &ModelSpec,
    train_set: &Dataset,
    test_set: &Dataset,
    leaked_dir: Option<&Path>,
    fl_params: Option<&ModelParams>,
) -> Result<PathBuf> {
    let d = ctx.cfg.downstream.as_ref().expect("downstream stage needs a [downstream] section");
    let base_cfg = TrainConfig {
        epochs: d.epochs,
        batch_size: d.batch_size,
        lr: d.lr,
        momentum: d.momentum,
        seed: derive_seed(ctx.seed, S_DOWNSTREAM, 0),
        ..TrainConfig::default()
    };

    let mut rows: Vec<(String, f64)> = Vec::new();
    let init = build_model(spec, derive_seed(ctx.seed, S_MODEL, 1))?;
    let central = train(spec, init, train_set, Some(test_set), &base_cfg)?;
    rows.push(("centralized".into(), final_acc(&central)?));

    if let Some(dir) = leaked_dir {
        let leaked_ds = leaked::load(dir)?;
        let labeled = leaked_ds.to_dataset("leaked")?;
        let subset = fraction_subset(&labeled, d.leak_fraction, derive_seed(ctx.seed, S_DOWNSTREAM, 1))?;
        let init = build_model(spec, derive_seed(ctx.seed, S_MODEL, 2))?;
        let scratch = train(spec, init, &subset, Some(test_set), &base_cfg)?;
        rows.push(("leaked_scratch".into(), final_acc(&scratch)?));
        if let Some(fp) = fl_params {
            let ft_cfg = TrainConfig { lr: d.finetune_lr, ..base_cfg.clone() };
            let tuned = train(spec, fp.clone(), &subset, Some(test_set), &ft_cfg)?;
            rows.push(("leaked_finetune".into(), final_acc(&tuned)?));
        }
    }

    let results = compare_settings(&rows);
    print!("{}", render_table(&results));
    let path = ctx.out.join("reports").join("downstream.csv");
    fs::write(&path, settings_csv(&results)).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn final_acc(run: &fedleak_core::train::TrainRun) -> Result<f64> {
    run.history
        .last()
        .and_then(|h| h.eval_acc)
        .context("training history carries no eval accuracy")
}

pub fn fraction_subset(data: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    if !(0.0 < fraction && fraction <= 1.0) {
        bail!("fraction must lie in (0, 1]");
    }
    if fraction == 1.0 {
        return Ok(data.clone());
    }
    let n = ((data.len() as f64 * fraction).ceil() as usize).max(1);
    let mut idx: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    idx.truncate(n);
    Ok(data.subset(&idx)?)
}

/// Which stages a subcommand executes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Full,
    FlOnly,
    LllOnly,
    GiOnly,
    TrainOnly,
}

pub struct RunSummary {
    pub stages: Vec<String>,
    pub artifacts: Vec<String>,
}

/// Executes the pipeline. On failure the partial artifacts are kept and a
/// FAILED marker records the error.
pub fn execute(
    ctx: &RunContext,
    scope: Scope,
    batches_override: Option<usize>,
    leaked_override: Option<&Path>,
) -> Result<RunSummary> {
    let plan = resolve_plan(ctx, scope)?;
    if ctx.dry_run {
        println!("dry run; would execute:");
        for s in &plan {
            println!("  {}", s);
        }
        return Ok(RunSummary { stages: plan, artifacts: Vec::new() });
    }
    fs::create_dir_all(ctx.out.join("reports"))
        .with_context(|| format!("creating {}", ctx.out.display()))?;
    match run_stages(ctx, scope, batches_override, leaked_override, &plan) {
        Ok(summary) => Ok(summary),
        Err(e) => {
            // keep partial artifacts, mark the directory
            let _ = fs::write(ctx.out.join("FAILED"), format!("{:#}\n", e));
            Err(e)
        }
    }
}

fn resolve_plan(ctx: &RunContext, scope: Scope) -> Result<Vec<String>> {
    let cfg = &ctx.cfg;
    let mut plan = vec![format!(
        "dataset: {} {:?} classes={}",
        cfg.dataset.source, cfg.dataset.input, cfg.dataset.classes
    )];
    // `train` also runs FL when configured: the fine-tune comparison starts
    // from the FL model
    let wants_fl = matches!(scope, Scope::Full | Scope::FlOnly | Scope::TrainOnly);
    let wants_lll = matches!(scope, Scope::Full | Scope::LllOnly);
    let wants_gi = matches!(scope, Scope::Full | Scope::GiOnly);
    let wants_train = matches!(scope, Scope::Full | Scope::TrainOnly);
    if scope != Scope::LllOnly {
        plan.push(format!("model: {}", cfg.model.kind));
    }
    match (&cfg.fl, wants_fl, scope) {
        (Some(fl), true, _) => plan.push(format!(
            "fl: {} rounds={} clients={} partition={}",
            fl.algorithm, fl.rounds, fl.clients, fl.partition
        )),
        (None, _, Scope::FlOnly) => bail!("fl-baseline needs an [fl] section"),
        _ => {}
    }
    match (&cfg.attack, scope) {
        (Some(a), _) if a.kind == "gi" && wants_gi => {
            plan.push(format!("attack: gi batch_sizes={:?} iterations={}", a.batch_sizes, a.iterations));
        }
        (Some(a), _) if a.kind != "gi" && wants_lll => {
            plan.push(format!("attack: {} k={} batch_size={}", a.kind, a.k, a.batch_size));
        }
        (None, Scope::LllOnly) | (None, Scope::GiOnly) => bail!("attack subcommands need an [attack] section"),
        (Some(a), Scope::LllOnly) if a.kind == "gi" => bail!("attack-lll got attack.kind = \"gi\""),
        (Some(a), Scope::GiOnly) if a.kind != "gi" => bail!("attack-gi needs attack.kind = \"gi\""),
        _ => {}
    }
    match (&cfg.downstream, wants_train, scope) {
        (Some(d), true, _) => plan.push(format!(
            "downstream: epochs={} lr={} leak_fraction={}",
            d.epochs, d.lr, d.leak_fraction
        )),
        (None, _, Scope::TrainOnly) => bail!("train needs a [downstream] section"),
        _ => {}
    }
    plan.push(format!("output: {}", ctx.out.display()));
    Ok(plan)
}

fn run_stages(
    ctx: &RunContext,
    scope: Scope,
    batches_override: Option<usize>,
    leaked_override: Option<&Path>,
    plan: &[String],
) -> Result<RunSummary> {
    let cfg = &ctx.cfg;
    let (train_set, test_set) = build_dataset(cfg, ctx.seed)?;
    let spec = build_spec(cfg)?;
    let mut artifacts = Vec::new();
    let mut warnings = Vec::new();
    let mut fl_params: Option<ModelParams> = None;
    let mut leaked_dir: Option<PathBuf> = leaked_override.map(Path::to_path_buf);

    if cfg.fl.is_some() && matches!(scope, Scope::Full | Scope::FlOnly | Scope::TrainOnly) {
        let (params, path) = stage_fl(ctx, &spec, &train_set, &test_set)?;
        artifacts.push(rel(&ctx.out, &path));
        fl_params = Some(params);
    }
    if let Some(a) = &cfg.attack {
        if a.kind == "gi" && matches!(scope, Scope::Full | Scope::GiOnly) {
            let path = stage_attack_gi(ctx, &spec, &train_set, batches_override)?;
            artifacts.push(rel(&ctx.out, &path));
        }
        if a.kind != "gi" && matches!(scope, Scope::Full | Scope::LllOnly) {
            let out = stage_attack_lll(ctx, &train_set, batches_override)?;
            println!(
                "{}: mean leaked fraction {:.4} over {} batches (expected singles {:.4})",
                a.kind,
                out.mean_fraction,
                batches_override.unwrap_or(a.batches),
                singleton_rate_exact(a.k, a.batch_size)
            );
            artifacts.push(rel(&ctx.out, &out.csv_path));
            if let Some(dir) = &out.leaked_dir {
                artifacts.push(rel(&ctx.out, dir));
            }
            leaked_dir = out.leaked_dir;
            warnings.extend(out.warnings);
        }
    }
    if cfg.downstream.is_some() && matches!(scope, Scope::Full | Scope::TrainOnly) {
        let path = stage_downstream(
            ctx,
            &spec,
            &train_set,
            &test_set,
            leaked_dir.as_deref(),
            fl_params.as_ref(),
        )?;
        artifacts.push(rel(&ctx.out, &path));
    }

    let stages: Vec<String> = plan.to_vec();
    write_manifest(ctx, &stages, &artifacts, &warnings)?;
    artifacts.push("manifest.json".into());
    Ok(RunSummary { stages, artifacts })
}

fn rel(base: &Path, path: &Path) -> String {
    path.strip_prefix(base).unwrap_or(path).display().to_string()
}
