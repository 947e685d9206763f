//! Per-fold training (one optimizer step per bag), cross-validation and
//! inference.
//!
//! Each fold draws its initial weights, dropout masks and epoch orderings
//! from its own PRNG streams keyed by `(seed, fold)`, so folds are
//! independent and a run is reproducible bit for bit whether folds execute
//! sequentially or in parallel.

mod config;

pub use config::{apply_overrides, TrainConfig};

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::dataio::{Dataset, FoldPlan, TokenBag, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::metrics::{confusion_and_f1, Prediction, PredictionSet};
use crate::mil::{load_checkpoint, save_checkpoint, Model};
use crate::objective::{class_weights_from_counts, focal_loss_graph, LossConfig};
use crate::optim::{clip_grad_norm, AdamWState, EarlyStopState, PlateauState, StopDecision};
use crate::rng::{self, Rng, Stream};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
    pub val_f1: f64,
    /// Learning rate used during this epoch.
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub epochs: Vec<EpochRecord>,
}

impl RunHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_acc,val_f1,lr\n");
        for e in &self.epochs {
            writeln!(s, "{},{},{},{},{}", e.epoch, e.train_loss, e.val_acc, e.val_f1, e.lr).unwrap();
        }
        s
    }

    pub fn best_val_f1(&self) -> Option<f64> {
        self.epochs.iter().map(|e| e.val_f1).reduce(f64::max)
    }
}

#[derive(Clone, Debug)]
pub struct FoldResult {
    pub fold: usize,
    /// Weights from the epoch with the best validation F1.
    pub model: Model,
    pub best_epoch: usize,
    pub val_acc: f64,
    pub val_f1: f64,
    pub history: RunHistory,
    /// Every patient whose tokens were read while training this fold.
    pub touched: BTreeSet<String>,
    pub class_weights: [f64; NUM_CLASSES],
}

/// Index of bags by patient id.
struct BagIndex<'a>(HashMap<&'a str, &'a TokenBag>);

impl<'a> BagIndex<'a> {
    fn new(data: &'a Dataset) -> Self {
        Self(data.bags.iter().map(|b| (b.patient_id.as_str(), b)).collect())
    }

    fn get(&self, id: &str) -> Result<&'a TokenBag> {
        self.0
            .get(id)
            .copied()
            .ok_or_else(|| Error::Invalid(format!("patient `{id}` is in the fold plan but not in the dataset")))
    }
}

fn dropout_mask(rng: &mut Rng, dim: usize, p: f64) -> Option<Tensor> {
    if p == 0.0 {
        return None;
    }
    let keep = 1.0 / (1.0 - p);
    Some(Tensor::row(
        &(0..dim)
            .map(|_| if rng.random_bool(p) { 0.0 } else { keep })
            .collect::<Vec<_>>(),
    ))
}

/// One forward/backward/update on a single bag; returns the loss.
fn train_step(
    model: &mut Model,
    opt: &mut AdamWState,
    bag: &TokenBag,
    mask: Option<Tensor>,
    loss_cfg: &LossConfig,
    lr: f64,
    clip: Option<f64>,
) -> Result<f64> {
    let mut bg = model.bag_graph(bag, mask)?;
    let loss = focal_loss_graph(&mut bg.graph, bg.logits, bag.label, loss_cfg)?;
    bg.graph.forward(&bg.inputs)?;
    let value = bg.graph.value(loss).expect("evaluated").item();
    let mut grads = bg.graph.backward(loss)?;
    if let Some(c) = clip {
        clip_grad_norm(&mut grads, c);
    }
    opt.step(model.named_mut(), &grads, lr)?;
    Ok(value)
}

fn evaluate(model: &Model, bags: &[&TokenBag]) -> Result<(f64, f64)> {
    let mut pred = Vec::with_capacity(bags.len());
    let mut truth = Vec::with_capacity(bags.len());
    for b in bags {
        pred.push(model.forward(b)?.probs.argmax());
        truth.push(b.label);
    }
    let c = confusion_and_f1(&pred, &truth, NUM_CLASSES)?;
    Ok((c.accuracy, c.weighted_f1))
}

fn check_leakage(plan: &FoldPlan, cfg: &TrainConfig) -> Result<()> {
    if let Some(id) = cfg.test_ids.iter().find(|id| plan.fold_of(id).is_some()) {
        return Err(Error::Invalid(format!(
            "test patient `{id}` appears in the cross-validation fold plan"
        )));
    }
    if plan.k != cfg.folds {
        return Err(Error::Config(format!(
            "fold plan has k = {}, config asks for {} folds",
            plan.k, cfg.folds
        )));
    }
    Ok(())
}

/// Train on every fold except `fold` and validate on `fold`.
pub fn train_fold(data: &Dataset, plan: &FoldPlan, fold: usize, cfg: &TrainConfig) -> Result<FoldResult> {
    cfg.validate()?;
    check_leakage(plan, cfg)?;
    if fold >= plan.k {
        return Err(Error::Invalid(format!("fold {fold} out of range for k = {}", plan.k)));
    }
    let index = BagIndex::new(data);
    let train_ids = plan.complement(fold);
    let val_ids = plan.members(fold);
    if train_ids.is_empty() || val_ids.is_empty() {
        return Err(Error::Invalid(format!(
            "fold {fold}: {} training and {} validation patients",
            train_ids.len(),
            val_ids.len()
        )));
    }
    let train: Vec<&TokenBag> = train_ids.iter().map(|id| index.get(id)).collect::<Result<_>>()?;
    let val: Vec<&TokenBag> = val_ids.iter().map(|id| index.get(id)).collect::<Result<_>>()?;
    let touched: BTreeSet<String> = train_ids.iter().chain(&val_ids).map(|s| s.to_string()).collect();

    let mut counts = [0usize; NUM_CLASSES];
    train.iter().for_each(|b| counts[b.label] += 1);
    let class_weights = if cfg.class_weighting {
        class_weights_from_counts(&counts)?
    } else {
        [1.0; NUM_CLASSES]
    };
    let loss_cfg = LossConfig {
        class_weights,
        ..cfg.loss()
    };

    let dim = data.manifest.dim;
    let fold_key = fold as u64;
    let mut model = Model::init(&cfg.model_spec(dim), &mut rng::stream(cfg.seed, Stream::Init, fold_key))?;
    let mut dropout_rng = rng::stream(cfg.seed, Stream::Dropout, fold_key);
    let mut shuffle_rng = rng::stream(cfg.seed, Stream::Shuffle, fold_key);
    let mut opt = AdamWState::new(cfg.adamw())?;
    let mut plateau = PlateauState::new(cfg.plateau(), cfg.lr);
    let mut early = EarlyStopState::new(cfg.early_stop_patience, cfg.plateau_threshold)?;

    let mut best = (model.clone(), 0usize, 0.0f64, 0.0f64);
    let mut history = RunHistory::default();
    let mut order = train.clone();
    for epoch in 1..=cfg.max_epochs {
        let lr = plateau.lr;
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        for bag in &order {
            let mask = dropout_mask(&mut dropout_rng, dim, cfg.dropout);
            total += train_step(&mut model, &mut opt, bag, mask, &loss_cfg, lr, cfg.grad_clip)?;
        }
        let (val_acc, val_f1) = evaluate(&model, &val)?;
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: total / order.len() as f64,
            val_acc,
            val_f1,
            lr,
        });
        log::debug!(
            "fold {fold} epoch {epoch}: loss {:.4} val acc {val_acc:.4} f1 {val_f1:.4} lr {lr:e}",
            total / order.len() as f64
        );
        plateau.update(val_f1);
        match early.update(epoch, val_f1) {
            StopDecision::Continue { improved: true } => best = (model.clone(), epoch, val_acc, val_f1),
            StopDecision::Continue { improved: false } => {}
            StopDecision::Stop => break,
        }
    }
    let (model, best_epoch, val_acc, val_f1) = best;
    log::info!("fold {fold}: best epoch {best_epoch}, val acc {val_acc:.4}, val F1 {val_f1:.4}");
    Ok(FoldResult {
        fold,
        model,
        best_epoch,
        val_acc,
        val_f1,
        history,
        touched,
        class_weights,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub fold: usize,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub val_acc: f64,
    pub val_f1: f64,
}

/// Mean and sample standard deviation (`n - 1`); std is 0 for one value.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// `"0.619 ± 0.062"`
pub fn format_mean_std(mean: f64, std: f64) -> String {
    format!("{mean:.3} ± {std:.3}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub folds: Vec<FoldSummary>,
    pub mean_val_acc: f64,
    pub std_val_acc: f64,
    pub mean_val_f1: f64,
    pub std_val_f1: f64,
    /// Human-readable `mean ± std` lines.
    pub summary: Vec<String>,
}

impl CvReport {
    pub fn from_folds(results: &[FoldResult]) -> Self {
        let acc: Vec<f64> = results.iter().map(|r| r.val_acc).collect();
        let f1: Vec<f64> = results.iter().map(|r| r.val_f1).collect();
        let (ma, sa) = mean_std(&acc);
        let (mf, sf) = mean_std(&f1);
        Self {
            folds: results
                .iter()
                .map(|r| FoldSummary {
                    fold: r.fold,
                    best_epoch: r.best_epoch,
                    epochs_run: r.history.epochs.len(),
                    val_acc: r.val_acc,
                    val_f1: r.val_f1,
                })
                .collect(),
            mean_val_acc: ma,
            std_val_acc: sa,
            mean_val_f1: mf,
            std_val_f1: sf,
            summary: vec![
                format!("validation accuracy {}", format_mean_std(ma, sa)),
                format!("validation weighted F1 {}", format_mean_std(mf, sf)),
            ],
        }
    }
}

pub struct CvRun {
    pub folds: Vec<FoldResult>,
    pub report: CvReport,
}

/// Train all folds of `plan`, optionally writing a run directory.
pub fn run_cv(data: &Dataset, plan: &FoldPlan, cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<CvRun> {
    cfg.validate()?;
    check_leakage(plan, cfg)?;
    let folds: Vec<FoldResult> = if cfg.parallel_folds {
        (0..plan.k)
            .into_par_iter()
            .map(|f| train_fold(data, plan, f, cfg))
            .collect::<Result<_>>()?
    } else {
        (0..plan.k)
            .map(|f| train_fold(data, plan, f, cfg))
            .collect::<Result<_>>()?
    };
    let report = CvReport::from_folds(&folds);
    if let Some(dir) = out_dir {
        write_run_dir(dir, plan, cfg, &folds, &report)?;
    }
    Ok(CvRun { folds, report })
}

pub fn checkpoint_path(run_dir: &Path, fold: usize) -> PathBuf {
    run_dir.join(format!("fold_{fold}.raac"))
}

fn write_run_dir(
    dir: &Path,
    plan: &FoldPlan,
    cfg: &TrainConfig,
    folds: &[FoldResult],
    report: &CvReport,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    cfg.save(dir.join("config.json"))?;
    plan.save(dir.join("fold_plan.json"))?;
    for r in folds {
        let meta = json!({
            "fold": r.fold,
            "epoch": r.best_epoch,
            "val_acc": r.val_acc,
            "val_f1": r.val_f1,
            "seed": cfg.seed,
            "class_weights": r.class_weights,
        });
        save_checkpoint(&r.model, &meta, checkpoint_path(dir, r.fold))?;
        let hist = dir.join(format!("history_fold_{}.csv", r.fold));
        fs::write(&hist, r.history.to_csv()).map_err(|e| Error::io(&hist, e))?;
    }
    let path = dir.join("report.json");
    let text = serde_json::to_string_pretty(report).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

/// Load `fold_*.raac` from a run directory, ordered by fold id.
pub fn load_run_models(run_dir: &Path) -> Result<Vec<(usize, Model)>> {
    let mut out = Vec::new();
    let entries = fs::read_dir(run_dir).map_err(|e| Error::io(run_dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(run_dir, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        let Some(fold) = name
            .strip_prefix("fold_")
            .and_then(|s| s.strip_suffix(".raac"))
            .and_then(|s| s.parse().ok())
        else {
            continue;
        };
        out.push((fold, load_checkpoint(&path)?.model));
    }
    if out.is_empty() {
        return Err(Error::Invalid(format!(
            "no fold_*.raac checkpoints in {}",
            run_dir.display()
        )));
    }
    out.sort_by_key(|(f, _)| *f);
    Ok(out)
}

/// Per-fold probabilities for `bags` (dropout off). One set per model.
pub fn predict(models: &[(usize, Model)], bags: &[&TokenBag]) -> Result<Vec<PredictionSet>> {
    models
        .iter()
        .map(|(fold, model)| {
            let rows = bags
                .iter()
                .map(|b| {
                    let f = model.forward(b)?;
                    Ok(Prediction {
                        id: b.patient_id.clone(),
                        label: Some(b.label),
                        probs: f.probs,
                        predicted: f.probs.argmax(),
                    })
                })
                .collect::<Result<_>>()?;
            Ok(PredictionSet {
                folds: vec![*fold],
                rows,
            })
        })
        .collect()
}

/// Build the CV fold plan over every patient not in `cfg.test_ids`.
pub fn plan_folds(data: &Dataset, cfg: &TrainConfig) -> Result<FoldPlan> {
    let test: BTreeSet<&str> = cfg.test_ids.iter().map(String::as_str).collect();
    if let Some(id) = test.iter().find(|id| data.bag(id).is_none()) {
        return Err(Error::Invalid(format!("test patient `{id}` is not in the dataset")));
    }
    let pool: Vec<(String, usize)> = data
        .labels()
        .into_iter()
        .filter(|(id, _)| !test.contains(id.as_str()))
        .collect();
    FoldPlan::stratified(&pool, cfg.folds, cfg.seed)
}
