//! Two-phase training: heads first with the backbone frozen, then everything, under AdamW with
//! per-group learning rates, linear warmup plus cosine annealing, and global-norm clipping.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{backprop::GradStore, DType, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{mixup, AugmentConfig, Batch, Dataset};
use crate::error::{config_bail, Error, Result};
use crate::evaluation::{self, EvalConfig};
use crate::inference;
use crate::losses::{self, LossConfig, UncertaintyWeights};
use crate::model::checkpoint::{self, CheckpointMeta};
use crate::model::{Mode, ModelState, PredictionPair};
use crate::seed::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub freeze_epochs: usize,
    pub base_lr: f64,
    pub lr_mult_backbone_and_base: f64,
    pub lr_mult_cls_head: f64,
    pub lr_mult_seg: f64,
    pub lr_uncertainty_det: f64,
    pub lr_uncertainty_seg: f64,
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
    pub batch_size: usize,
    pub eta_min: f64,
    pub seed: u64,
    /// Validate (and consider for best checkpoint) every this many epochs; the last epoch is
    /// always validated.
    pub val_every: usize,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            freeze_epochs: 5,
            base_lr: 3e-4,
            lr_mult_backbone_and_base: 0.1,
            lr_mult_cls_head: 0.05,
            lr_mult_seg: 0.5,
            lr_uncertainty_det: 1e-3,
            lr_uncertainty_seg: 1e-4,
            weight_decay: 1e-2,
            grad_clip_norm: 1.0,
            batch_size: 8,
            eta_min: 3e-7,
            seed: 0,
            val_every: 1,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Short schedule for the desk profile. A from-scratch backbone at 64 px needs a larger
    /// step size than the published fine-tuning rate.
    /// Short schedule for the desk model on small synthetic sets, without augmentation.
    pub fn desk() -> Self {
        Self {
            epochs: 20,
            freeze_epochs: 2,
            base_lr: 1e-2,
            lr_mult_cls_head: 0.5,
            batch_size: 4,
            augment: AugmentConfig::disabled(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            config_bail!("epochs must be positive");
        }
        if self.freeze_epochs >= self.epochs {
            config_bail!("freeze_epochs ({}) must be < epochs ({})", self.freeze_epochs, self.epochs);
        }
        for (name, v) in [
            ("base_lr", self.base_lr),
            ("lr_mult_backbone_and_base", self.lr_mult_backbone_and_base),
            ("lr_mult_cls_head", self.lr_mult_cls_head),
            ("lr_mult_seg", self.lr_mult_seg),
            ("lr_uncertainty_det", self.lr_uncertainty_det),
            ("lr_uncertainty_seg", self.lr_uncertainty_seg),
            ("grad_clip_norm", self.grad_clip_norm),
        ] {
            if !(v > 0.0) {
                config_bail!("{name} must be > 0, got {v}");
            }
        }
        if !(self.weight_decay >= 0.0) || !(self.eta_min >= 0.0) {
            config_bail!("weight_decay and eta_min must be >= 0");
        }
        if self.batch_size == 0 || self.val_every == 0 {
            config_bail!("batch_size and val_every must be positive");
        }
        self.augment.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKind {
    Base,
    DetectionHead,
    Segmentation,
    UncertaintyDet,
    UncertaintySeg,
}

impl GroupKind {
    pub const ALL: [GroupKind; 5] = [
        GroupKind::Base,
        GroupKind::DetectionHead,
        GroupKind::Segmentation,
        GroupKind::UncertaintyDet,
        GroupKind::UncertaintySeg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GroupKind::Base => "base",
            GroupKind::DetectionHead => "det_head",
            GroupKind::Segmentation => "seg",
            GroupKind::UncertaintyDet => "uncertainty_det",
            GroupKind::UncertaintySeg => "uncertainty_seg",
        }
    }

    /// Group owning a parameter name, if any.
    pub fn of(name: &str) -> Option<Self> {
        let starts = |p: &str| name.starts_with(p);
        if starts("backbone.") || starts("fpn.") || starts("decoder.") {
            Some(GroupKind::Base)
        } else if starts("det_head.") {
            Some(GroupKind::DetectionHead)
        } else if starts("seg_head.") || starts("aux_head.") {
            Some(GroupKind::Segmentation)
        } else if name == "uncertainty.log_var_det" {
            Some(GroupKind::UncertaintyDet)
        } else if name == "uncertainty.log_var_seg" {
            Some(GroupKind::UncertaintySeg)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamGroup {
    pub kind: GroupKind,
    pub params: Vec<(String, Var)>,
    pub lr: f64,
    pub weight_decay: f64,
}

/// Partitions every trainable parameter into its optimizer group. Groups are returned in
/// [`GroupKind::ALL`] order, including empty ones.
pub fn build_param_groups(state: &ModelState, cfg: &TrainConfig) -> Result<Vec<ParamGroup>> {
    let mut groups: Vec<ParamGroup> = GroupKind::ALL
        .iter()
        .map(|&kind| {
            let (lr, weight_decay) = match kind {
                GroupKind::Base => (cfg.base_lr * cfg.lr_mult_backbone_and_base, cfg.weight_decay),
                GroupKind::DetectionHead => (cfg.base_lr * cfg.lr_mult_cls_head, cfg.weight_decay),
                GroupKind::Segmentation => (cfg.base_lr * cfg.lr_mult_seg, cfg.weight_decay),
                GroupKind::UncertaintyDet => (cfg.lr_uncertainty_det, 0.0),
                GroupKind::UncertaintySeg => (cfg.lr_uncertainty_seg, 0.0),
            };
            ParamGroup {
                kind,
                params: Vec::new(),
                lr,
                weight_decay,
            }
        })
        .collect();
    let mut orphans = Vec::new();
    for (name, var) in state.store().named_params() {
        match GroupKind::of(&name) {
            Some(kind) => groups[kind as usize].params.push((name, var)),
            None => orphans.push(name),
        }
    }
    if !orphans.is_empty() {
        config_bail!("parameters outside every optimizer group: {}", orphans.join(", "));
    }
    Ok(groups)
}

/// Learning rate of the `step`-th optimizer step: linear warmup from 0 to `base_lr` over
/// `warmup_steps`, then cosine annealing down to `eta_min` at `total_steps`.
pub fn lr_schedule(step: usize, total_steps: usize, warmup_steps: usize, base_lr: f64, eta_min: f64) -> f64 {
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    if total_steps <= warmup_steps {
        return base_lr;
    }
    let progress = ((step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64).min(1.0);
    eta_min + 0.5 * (base_lr - eta_min) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// AdamW with decoupled weight decay and per-parameter step counts. Parameters without a
/// gradient in a step are left untouched.
#[derive(Debug)]
pub struct AdamW {
    groups: Vec<ParamGroup>,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
    steps: BTreeMap<String, u64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamW {
    pub fn new(groups: Vec<ParamGroup>) -> Self {
        Self {
            groups,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            steps: BTreeMap::new(),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    /// Applies one update; `lrs[i]` is the learning rate of group `i`.
    pub fn step(&mut self, grads: &GradStore, lrs: &[f64]) -> Result<()> {
        for (group, &lr) in self.groups.iter().zip(lrs) {
            for (name, var) in &group.params {
                let Some(g) = grads.get(var.as_tensor()) else {
                    continue;
                };
                let t = self.steps.entry(name.clone()).or_insert(0);
                *t += 1;
                let t = *t as i32;
                let m = match self.m.get(name) {
                    Some(m) => ((m * self.beta1)? + (g * (1.0 - self.beta1))?)?,
                    None => (g * (1.0 - self.beta1))?,
                };
                let v = match self.v.get(name) {
                    Some(v) => ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?,
                    None => (g.sqr()? * (1.0 - self.beta2))?,
                };
                let m_hat = (&m / (1.0 - self.beta1.powi(t)))?;
                let v_hat = (&v / (1.0 - self.beta2.powi(t)))?;
                let update = m_hat.div(&(v_hat.sqrt()? + self.eps)?)?;
                let theta = var.as_tensor();
                let decayed = (theta * (1.0 - lr * group.weight_decay))?;
                var.set(&(decayed - (update * lr)?)?)?;
                self.m.insert(name.clone(), m);
                self.v.insert(name.clone(), v);
            }
        }
        Ok(())
    }

    fn state_tensors(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (k, t) in &self.m {
            out.insert(format!("m.{k}"), t.clone());
        }
        for (k, t) in &self.v {
            out.insert(format!("v.{k}"), t.clone());
        }
        out
    }

    fn load_state(&mut self, tensors: &BTreeMap<String, Tensor>, steps: BTreeMap<String, u64>, dtype: DType) -> Result<()> {
        self.m.clear();
        self.v.clear();
        for (k, t) in tensors {
            if let Some(name) = k.strip_prefix("m.") {
                self.m.insert(name.to_string(), t.to_dtype(dtype)?);
            } else if let Some(name) = k.strip_prefix("v.") {
                self.v.insert(name.to_string(), t.to_dtype(dtype)?);
            }
        }
        self.steps = steps;
        Ok(())
    }
}

/// Global L2 norm over the gradients of `vars` (those that have one).
pub fn grad_norm(grads: &GradStore, vars: &[&Var]) -> Result<f64> {
    let mut sum = 0.0;
    for v in vars {
        if let Some(g) = grads.get(v.as_tensor()) {
            sum += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        }
    }
    Ok(sum.sqrt())
}

/// Rescales gradients so their global norm is at most `max_norm`; returns `(before, after)`.
pub fn clip_grad_norm(grads: &mut GradStore, vars: &[&Var], max_norm: f64) -> Result<(f64, f64)> {
    let before = grad_norm(grads, vars)?;
    if before > max_norm {
        let scale = max_norm / (before + 1e-6);
        for v in vars {
            if let Some(g) = grads.get(v.as_tensor()) {
                let scaled = (g * scale)?;
                grads.insert(v.as_tensor(), scaled);
            }
        }
    }
    Ok((before, grad_norm(grads, vars)?))
}

/// Loss values of one forward pass.
#[derive(Debug, Clone)]
pub struct LossParts {
    pub total: Tensor,
    pub det: Option<Tensor>,
    pub seg: Option<Tensor>,
}

/// Focal loss on scores and segmentation loss on masks; with both heads they are combined by
/// the uncertainty weighting.
pub fn compute_loss(
    pred: &PredictionPair,
    batch: &Batch,
    cfg: &LossConfig,
    uncertainty: Option<&UncertaintyWeights>,
) -> Result<LossParts> {
    let det = match &pred.score {
        Some(s) => Some(losses::focal_loss_soft(s, &batch.labels, cfg)?),
        None => None,
    };
    let seg = match &pred.mask {
        Some(m) => Some(losses::segmentation_loss(m, pred.aux_mask.as_ref(), &batch.masks, cfg)?),
        None => None,
    };
    let total = match (&det, &seg, uncertainty) {
        (Some(d), Some(s), Some(u)) => u.total(d, s)?,
        (Some(d), Some(s), None) => (d + s)?,
        (Some(d), None, _) => d.clone(),
        (None, Some(s), _) => s.clone(),
        (None, None, _) => return Err(Error::Config("model produces no outputs".into())),
    };
    Ok(LossParts { total, det, seg })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationSummary {
    pub accuracy: Option<f64>,
    pub f1: Option<f64>,
    pub threshold: Option<f64>,
    pub dice: Option<f64>,
    pub seg_threshold: Option<f64>,
}

/// One line of `history.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub frozen: bool,
    pub steps: usize,
    pub train_loss: f64,
    pub det_loss: Option<f64>,
    pub seg_loss: Option<f64>,
    /// Learning rate of each group at the epoch's last step.
    pub lr: BTreeMap<String, f64>,
    pub sigma_det: Option<f64>,
    pub sigma_seg: Option<f64>,
    pub max_grad_norm: f64,
    pub max_clipped_grad_norm: f64,
    pub val: Option<ValidationSummary>,
}

#[derive(Debug, Clone)]
pub struct StepInfo {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub clipped_grad_norm: f64,
    pub lrs: Vec<f64>,
}

/// Hooks into the training loop.
pub trait TrainObserver {
    fn on_step(&mut self, _info: &StepInfo) {}
    fn on_epoch(&mut self, _record: &EpochRecord) {}
}

impl TrainObserver for () {}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Where checkpoints, optimizer state and history go.
    pub out_dir: Option<PathBuf>,
    /// Continue from `out_dir/last.safetensors` and `out_dir/train_state.safetensors`.
    pub resume: bool,
    /// Stop after this epoch (for interrupting a run deliberately).
    pub stop_after_epoch: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_score: Option<f64>,
    pub best_checkpoint: Option<PathBuf>,
}

pub const BEST_CHECKPOINT: &str = "checkpoint.safetensors";
pub const LAST_CHECKPOINT: &str = "last.safetensors";
pub const TRAIN_STATE: &str = "train_state.safetensors";
pub const HISTORY: &str = "history.jsonl";

#[derive(Debug, Serialize, Deserialize)]
struct ResumeMeta {
    epoch: usize,
    steps: BTreeMap<String, u64>,
    history: Vec<EpochRecord>,
    best_epoch: Option<usize>,
    best_score: Option<f64>,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?[0])
}

fn validate(state: &ModelState, ds: &Dataset, batch_size: usize) -> Result<(ValidationSummary, f64)> {
    let net = state.inference_network()?;
    let dtype = state.store().dtype();
    let records = inference::evaluate_with(ds, batch_size, |x| inference::predict_with(&net, dtype, x))?;
    let cfg = EvalConfig::default();
    let report = evaluation::report(ds.samples(), &records, &cfg)?;
    let (accuracy, f1, threshold) = match (report.optimal_threshold, report.optimal_f1) {
        (Some(t), Some(f)) => {
            let scores: Vec<f64> = records.iter().map(|r| r.score.unwrap_or(0.0)).collect();
            let acc = evaluation::classification_metrics(&scores, &ds.labels(), t)?.accuracy;
            (Some(acc), Some(f), Some(t))
        }
        _ => (None, None, None),
    };
    let summary = ValidationSummary {
        accuracy,
        f1,
        threshold,
        dice: report.seg_optimal_dice,
        seg_threshold: report.seg_optimal_threshold,
    };
    let score = summary.f1.or(summary.dice).unwrap_or(f64::NEG_INFINITY);
    Ok((summary, score))
}

fn write_history(dir: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut buf = Vec::new();
    for r in history {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    checkpoint::write_atomic(&dir.join(HISTORY), &buf)
}

/// Trains `state` in place. Validation (for best-checkpoint selection) uses `val` or, when
/// absent, the training set in evaluation mode.
pub fn train(
    state: &ModelState,
    train_ds: &Dataset,
    val: Option<&Dataset>,
    loss_cfg: &LossConfig,
    cfg: &TrainConfig,
    opts: &TrainOptions,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    loss_cfg.validate()?;
    if train_ds.is_empty() {
        return Err(Error::Input("empty training set".into()));
    }
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let val_ds = val.unwrap_or(train_ds);
    let dtype = state.store().dtype();
    let net = state.network()?;
    let uncertainty = state.uncertainty()?;
    let groups = build_param_groups(state, cfg)?;
    let base_lrs: Vec<f64> = groups.iter().map(|g| g.lr).collect();
    let all_vars: Vec<Var> = groups.iter().flat_map(|g| g.params.iter().map(|(_, v)| v.clone())).collect();
    let var_refs: Vec<&Var> = all_vars.iter().collect();
    let mut opt = AdamW::new(groups);

    let n = train_ds.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let warmup_steps = steps_per_epoch * cfg.freeze_epochs;

    let mut history = Vec::new();
    let mut best: (Option<usize>, Option<f64>) = (None, None);
    let mut start_epoch = 1;
    if opts.resume {
        let dir = opts
            .out_dir
            .as_ref()
            .ok_or_else(|| Error::Config("resume needs an output directory".into()))?;
        state.load_weights(&dir.join(LAST_CHECKPOINT))?;
        let (tensors, meta) = checkpoint::read_archive(&dir.join(TRAIN_STATE))?;
        let meta: ResumeMeta = serde_json::from_str(&meta)?;
        opt.load_state(&tensors, meta.steps, dtype)?;
        history = meta.history;
        best = (meta.best_epoch, meta.best_score);
        start_epoch = meta.epoch + 1;
    }

    let mut last_lr = 0.0;
    let mut last_norm = 0.0;
    for epoch in start_epoch..=cfg.epochs {
        let frozen = epoch <= cfg.freeze_epochs;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1, epoch as u64)));
        let aug_seed = derive_seed(cfg.seed, 2, epoch as u64);

        let (mut loss_sum, mut det_sum, mut seg_sum) = (0.0, 0.0, 0.0);
        let (mut max_norm, mut max_clipped) = (0f64, 0f64);
        let mut lrs = base_lrs.clone();
        for (k, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let step = (epoch - 1) * steps_per_epoch + k + 1;
            let batch = train_ds.batch(chunk, Some((&cfg.augment, aug_seed)))?;
            let batch = if cfg.augment.mixup_prob > 0.0 && batch.len() > 1 {
                let mut perm: Vec<usize> = (0..batch.len()).collect();
                perm.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 3, step as u64)));
                let idx = Tensor::new(perm.iter().map(|&i| i as u32).collect::<Vec<_>>(), &candle_core::Device::Cpu)?;
                let other = Batch {
                    images: batch.images.index_select(&idx, 0)?,
                    labels: batch.labels.index_select(&idx, 0)?,
                    masks: batch.masks.index_select(&idx, 0)?,
                    indices: perm.iter().map(|&i| batch.indices[i]).collect(),
                };
                mixup(&batch, &other, &cfg.augment, derive_seed(cfg.seed, 4, step as u64))?.0
            } else {
                batch
            };

            let mode = Mode::Train {
                dropout_seed: derive_seed(cfg.seed, 5, step as u64),
                freeze_backbone: frozen,
            };
            let pred = net.forward(&batch.images, mode)?;
            let parts = compute_loss(&pred, &batch, loss_cfg, uncertainty.as_ref())?;
            let loss = scalar(&parts.total)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    last_lr,
                    grad_norm: last_norm,
                });
            }
            let mut grads = parts.total.backward()?;
            let (norm, clipped) = clip_grad_norm(&mut grads, &var_refs, cfg.grad_clip_norm)?;
            if !norm.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    last_lr,
                    grad_norm: norm,
                });
            }
            lrs = base_lrs
                .iter()
                .map(|&b| lr_schedule(step, total_steps, warmup_steps, b, cfg.eta_min))
                .collect();
            opt.step(&grads, &lrs)?;
            last_lr = lrs[0];
            last_norm = norm;

            loss_sum += loss;
            det_sum += parts.det.as_ref().map(scalar).transpose()?.unwrap_or(0.0);
            seg_sum += parts.seg.as_ref().map(scalar).transpose()?.unwrap_or(0.0);
            max_norm = max_norm.max(norm);
            max_clipped = max_clipped.max(clipped);
            observer.on_step(&StepInfo {
                epoch,
                step,
                loss,
                grad_norm: norm,
                clipped_grad_norm: clipped,
                lrs: lrs.clone(),
            });
        }

        let do_val = epoch % cfg.val_every == 0 || epoch == cfg.epochs;
        let val_summary = if do_val {
            let (summary, score) = validate(state, val_ds, cfg.batch_size.max(16))?;
            let improved = best.1.is_none_or(|b| score > b);
            if improved {
                best = (Some(epoch), Some(score));
                if let Some(dir) = &opts.out_dir {
                    let mut meta = CheckpointMeta::new(state.config());
                    meta.epoch = Some(epoch);
                    meta.det_threshold = summary.threshold;
                    meta.seg_threshold = summary.seg_threshold;
                    state.save(&dir.join(BEST_CHECKPOINT), &meta)?;
                }
            }
            Some(summary)
        } else {
            None
        };

        let (sigma_det, sigma_seg) = match &uncertainty {
            Some(u) => {
                let (d, s) = u.sigmas()?;
                (Some(d), Some(s))
            }
            None => (None, None),
        };
        let steps = steps_per_epoch as f64;
        let record = EpochRecord {
            epoch,
            frozen,
            steps: steps_per_epoch,
            train_loss: loss_sum / steps,
            det_loss: state.config().has_detection_head().then_some(det_sum / steps),
            seg_loss: state.config().has_segmentation_head().then_some(seg_sum / steps),
            lr: opt
                .groups()
                .iter()
                .zip(&lrs)
                .map(|(g, &lr)| (g.kind.name().to_string(), lr))
                .collect(),
            sigma_det,
            sigma_seg,
            max_grad_norm: max_norm,
            max_clipped_grad_norm: max_clipped,
            val: val_summary,
        };
        tracing::info!(
            epoch,
            loss = record.train_loss,
            val_f1 = record.val.as_ref().and_then(|v| v.f1),
            val_dice = record.val.as_ref().and_then(|v| v.dice),
            "epoch done"
        );
        observer.on_epoch(&record);
        history.push(record);

        if let Some(dir) = &opts.out_dir {
            let mut meta = CheckpointMeta::new(state.config());
            meta.epoch = Some(epoch);
            state.save(&dir.join(LAST_CHECKPOINT), &meta)?;
            let resume = ResumeMeta {
                epoch,
                steps: opt.steps.clone(),
                history: history.clone(),
                best_epoch: best.0,
                best_score: best.1,
            };
            checkpoint::write_archive(&dir.join(TRAIN_STATE), &opt.state_tensors(), &serde_json::to_string(&resume)?)?;
            write_history(dir, &history)?;
        }
        if opts.stop_after_epoch == Some(epoch) {
            break;
        }
    }
    Ok(TrainOutcome {
        history,
        best_epoch: best.0,
        best_score: best.1,
        best_checkpoint: opts.out_dir.as_ref().map(|d| d.join(BEST_CHECKPOINT)),
    })
}
