//! Multitask loss, joint learning of the fine and general models, module
//! separation, and the epoch driver.

mod optim;

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adapters::{CompositionContext, CompositionMode, ViewSelection};
use crate::data::{mask_tokens, MaskStrategy, MaskedSequence, Sample, FIRST_CONTENT_TOKEN};
use crate::eval::predict_fused;
use crate::model::{LmMode, ModelState};
use crate::numerics::{Tape, Var};
use crate::params::{Binder, GroupSet, ParamGroup, Snapshot};
use crate::{Error, Result};

pub use optim::{clip_scale, collect_grads, AdamW, AdamWConfig, StepStats};

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainConfig {
    /// Weight of the text-generation term.
    pub alpha: f64,
    /// Weight of the general model's multitask loss.
    pub coarse_weight: f64,
    /// Weight of the KL term between the fine and general models.
    pub kl_weight: f64,
    pub optimizer: AdamWConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Dev evaluations without improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Mix unlabeled samples into training batches.
    pub unlabeled_mix: bool,
    pub mask_ratio: f64,
    /// 80/10/10 corruption instead of plain replacement.
    pub bert_masking: bool,
    /// Keep masking the inputs when `alpha` is zero.
    pub mask_without_generation: bool,
    /// Train the general model alongside the fine one. Off gives a single
    /// fine-grained model trained on its multitask loss.
    pub joint: bool,
    /// Detach the fine model's logits inside the KL term.
    pub stop_grad_teacher: bool,
    /// Run module separation after the fine model stops.
    pub separation: bool,
    pub separation_max_epochs: usize,
    /// Views of the fine model; `None` uses every view.
    pub views: Option<ViewSelection>,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.5,
            coarse_weight: 0.5,
            kl_weight: 1.0,
            optimizer: AdamWConfig::default(),
            batch_size: 16,
            max_epochs: 20,
            patience: 3,
            seed: 0,
            unlabeled_mix: false,
            mask_ratio: 0.15,
            bert_masking: false,
            mask_without_generation: false,
            joint: true,
            stop_grad_teacher: false,
            separation: true,
            separation_max_epochs: 10,
            views: None,
            eval_batch_size: 64,
        }
    }
}

impl TrainConfig {
    /// Learning rate used for full-size pretrained models.
    pub const FULL_SIZE_LR: f64 = 2e-5;

    pub fn full_size_lr(mut self) -> Self {
        self.optimizer.lr = Self::FULL_SIZE_LR;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(self.alpha >= 0.0) || !(self.coarse_weight >= 0.0) || !(self.kl_weight >= 0.0) {
            return bad("loss coefficients must be non-negative");
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return bad("batch sizes must be positive");
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio <= 1.0) {
            return bad("mask ratio must lie in (0, 1]");
        }
        AdamW::new(self.optimizer).map(|_| ())
    }

    fn masking(&self) -> bool {
        self.alpha > 0.0 || self.mask_without_generation
    }
}

/// Inputs and targets of one training batch.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedBatch {
    /// Content tokens fed to the model (masked in MLM mode when masking is on).
    pub inputs: Vec<Vec<u32>>,
    pub labels: Vec<Option<usize>>,
    pub domains: Vec<Vec<usize>>,
    /// Reconstruction targets in MLM mode.
    pub masked: Option<Vec<MaskedSequence>>,
}

impl PreparedBatch {
    pub fn prepare<R: rand::Rng + ?Sized>(
        samples: &[&Sample],
        mode: LmMode,
        config: &TrainConfig,
        vocab_size: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let labels = samples.iter().map(|s| s.label).collect();
        let domains = samples.iter().map(|s| s.domains.clone()).collect();
        if mode == LmMode::Mlm && config.masking() {
            let strategy = if config.bert_masking {
                MaskStrategy::Bert {
                    first_content: FIRST_CONTENT_TOKEN,
                    vocab_size: vocab_size as u32,
                }
            } else {
                MaskStrategy::Replace
            };
            let masked: Vec<MaskedSequence> = samples
                .iter()
                .map(|s| mask_tokens(&s.tokens, config.mask_ratio, strategy, rng))
                .collect::<Result<_>>()?;
            Ok(PreparedBatch {
                inputs: masked.iter().map(|m| m.tokens.clone()).collect(),
                labels,
                domains,
                masked: Some(masked),
            })
        } else {
            Ok(PreparedBatch {
                inputs: samples.iter().map(|s| s.tokens.clone()).collect(),
                labels,
                domains,
                masked: None,
            })
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Values of the two multitask terms.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MtlValues {
    /// Mean cross-entropy over labeled samples (0 when none are labeled).
    pub cls: f64,
    /// Mean cross-entropy over generation targets (0 when none exist or the
    /// term is disabled).
    pub gen: f64,
    /// `cls + alpha·gen`.
    pub total: f64,
    pub labeled: usize,
    pub gen_targets: usize,
}

/// Tape handles of a multitask loss evaluation.
#[derive(Debug, Clone, Copy)]
pub struct MtlOutput {
    pub total: Var,
    /// Class logits of every sample in the batch.
    pub cls_logits: Var,
    pub values: MtlValues,
}

/// Classification loss plus `alpha` times the generation loss, on the tape.
/// Unlabeled samples contribute only through the generation term.
pub fn mtl_terms(
    model: &ModelState,
    tape: &mut Tape,
    binder: &mut Binder<'_>,
    batch: &PreparedBatch,
    ctxs: &[&CompositionContext],
    alpha: f64,
) -> Result<MtlOutput> {
    let seqs: Vec<&[u32]> = batch.inputs.iter().map(|s| s.as_slice()).collect();
    let enc = model.encode(&seqs)?;
    let hidden = model.hidden(tape, binder, &enc, Some(ctxs))?;
    let cls_logits = model.classify_logits(tape, binder, hidden, &enc)?;

    let labeled: Vec<usize> = (0..batch.len()).filter(|&i| batch.labels[i].is_some()).collect();
    let mut values = MtlValues {
        labeled: labeled.len(),
        ..MtlValues::default()
    };
    let mut total: Option<Var> = None;
    if !labeled.is_empty() {
        let targets: Vec<usize> = labeled.iter().map(|&i| batch.labels[i].unwrap()).collect();
        let rows = tape.gather_rows(cls_logits, labeled)?;
        let ce = tape.cross_entropy(rows, &targets)?;
        values.cls = tape.value(ce).data()[0];
        total = Some(ce);
    }
    if alpha > 0.0 {
        let (rows, targets) = match model.config().mode {
            LmMode::Mlm => {
                let masked = batch
                    .masked
                    .as_ref()
                    .ok_or_else(|| Error::InvalidData("MLM generation term needs masked inputs".into()))?;
                let refs: Vec<&MaskedSequence> = masked.iter().collect();
                model.mlm_rows(&enc, &refs)?
            }
            LmMode::Arm => {
                let (r, t, _) = model.arm_rows(&enc)?;
                (r, t)
            }
        };
        if !rows.is_empty() {
            values.gen_targets = rows.len();
            let logits = model.lm_logits(tape, binder, hidden, rows)?;
            let ce = tape.cross_entropy(logits, &targets)?;
            values.gen = tape.value(ce).data()[0];
            let scaled = tape.scale(ce, alpha)?;
            total = Some(match total {
                Some(t) => tape.add(t, scaled)?,
                None => scaled,
            });
        }
    }
    let total = match total {
        Some(t) => t,
        None => tape.constant(crate::numerics::Tensor::scalar(0.0)),
    };
    values.total = tape.value(total).data()[0];
    Ok(MtlOutput {
        total,
        cls_logits,
        values,
    })
}

/// Untracked multitask loss of `model` under per-sample contexts.
pub fn mtl_loss(model: &ModelState, batch: &PreparedBatch, ctxs: &[&CompositionContext], alpha: f64) -> Result<MtlValues> {
    let mut tape = model.new_tape();
    let mut binder = Binder::new(model.store(), GroupSet::empty());
    Ok(mtl_terms(model, &mut tape, &mut binder, batch, ctxs, alpha)?.values)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Phase {
    Joint,
    Separation,
}

/// Every term of one step.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossBreakdown {
    pub phase: Phase,
    /// Fine model's multitask loss (zero weight in separation).
    pub fine: MtlValues,
    /// General model's multitask loss; absent without joint learning.
    pub general: Option<MtlValues>,
    pub kl: f64,
    /// `w_f·fine.total + coarse_weight·general.total + kl_weight·kl`, where
    /// `w_f` is 1 in the joint phase and 0 in separation.
    pub total: f64,
    pub grad_norm: f64,
}

/// Dev-metric tracker with patience and a snapshot of the best state.
#[derive(Debug, Clone)]
pub struct EarlyStop {
    pub best: f64,
    pub best_epoch: usize,
    pub stale: usize,
    patience: usize,
    keep_ties: bool,
    snapshot: Option<Snapshot>,
}

impl EarlyStop {
    pub fn new(patience: usize) -> Self {
        EarlyStop {
            best: f64::NEG_INFINITY,
            best_epoch: 0,
            stale: 0,
            patience,
            keep_ties: false,
            snapshot: None,
        }
    }

    /// Like [`EarlyStop::new`], but a later state that ties the best one
    /// replaces it (a tie still counts towards patience).
    pub fn keeping_ties(patience: usize) -> Self {
        EarlyStop {
            keep_ties: true,
            ..Self::new(patience)
        }
    }

    /// Records a dev metric; returns `true` once `patience` evaluations in a
    /// row failed to beat the best one.
    pub fn observe(&mut self, metric: f64, epoch: usize, snapshot: impl FnOnce() -> Snapshot) -> bool {
        if metric > self.best {
            self.best = metric;
            self.best_epoch = epoch;
            self.stale = 0;
            self.snapshot = Some(snapshot());
        } else {
            if self.keep_ties && metric == self.best {
                self.best_epoch = epoch;
                self.snapshot = Some(snapshot());
            }
            self.stale += 1;
        }
        self.stale >= self.patience
    }

    pub fn snapshot(&self) -> Option<&Snapshot> {
        self.snapshot.as_ref()
    }
}

/// Training state shared by the fine model (NN) and the general model (NN†):
/// both live in one [`ModelState`] and differ only in the modules they select.
#[derive(Debug, Clone)]
pub struct JointState {
    pub model: ModelState,
    pub config: TrainConfig,
    pub views: ViewSelection,
    pub phase: Phase,
    optimizer: AdamW,
    rng: ChaCha8Rng,
    nn_converged: bool,
    pub steps: u64,
}

pub const ADAPTER_GROUPS: [ParamGroup; 4] = [ParamGroup::Coarse, ParamGroup::Alignment, ParamGroup::Fine, ParamGroup::Head];
/// Groups frozen during separation.
pub const FROZEN_IN_SEPARATION: [ParamGroup; 3] = [ParamGroup::Coarse, ParamGroup::Fine, ParamGroup::Head];

impl JointState {
    pub fn new(model: ModelState, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let schema = model
            .schema()
            .ok_or_else(|| Error::State("training needs a model with an adapter bank".into()))?;
        let views = config.views.clone().unwrap_or_else(|| ViewSelection::all(schema));
        let optimizer = AdamW::new(config.optimizer)?;
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(JointState {
            model,
            config,
            views,
            phase: Phase::Joint,
            optimizer,
            rng,
            nn_converged: false,
            steps: 0,
        })
    }

    pub fn prepare(&mut self, samples: &[&Sample]) -> Result<PreparedBatch> {
        let mode = self.model.config().mode;
        let vocab = self.model.config().vocab_size;
        PreparedBatch::prepare(samples, mode, &self.config, vocab, &mut self.rng)
    }

    fn contexts(&self, batch: &PreparedBatch) -> Result<(Vec<CompositionContext>, Vec<CompositionContext>)> {
        let schema = self.model.schema().expect("bank checked at construction");
        let fine = batch
            .domains
            .iter()
            .map(|d| CompositionContext::fine(schema, d, &self.views))
            .collect::<Result<_>>()?;
        let general = CompositionContext::general(schema)?;
        Ok((fine, alloc::vec![general; batch.len()]))
    }

    /// Builds the step objective on `tape` and returns its handle and terms.
    /// Exposed so tests can recompute each term independently.
    pub fn objective(&self, tape: &mut Tape, binder: &mut Binder<'_>, batch: &PreparedBatch) -> Result<(Var, LossBreakdown)> {
        let (fine_ctx, gen_ctx) = self.contexts(batch)?;
        let fine_refs: Vec<&CompositionContext> = fine_ctx.iter().collect();
        let gen_refs: Vec<&CompositionContext> = gen_ctx.iter().collect();
        let cfg = &self.config;
        let nn = mtl_terms(&self.model, tape, binder, batch, &fine_refs, cfg.alpha)?;
        let separation = self.phase == Phase::Separation;
        let mut breakdown = LossBreakdown {
            phase: self.phase,
            fine: nn.values,
            general: None,
            kl: 0.0,
            total: 0.0,
            grad_norm: 0.0,
        };
        if !cfg.joint && !separation {
            breakdown.total = nn.values.total;
            return Ok((nn.total, breakdown));
        }
        let general = mtl_terms(&self.model, tape, binder, batch, &gen_refs, cfg.alpha)?;
        let teacher = if cfg.stop_grad_teacher || separation {
            tape.detach(nn.cls_logits)
        } else {
            nn.cls_logits
        };
        let kl = tape.kl_divergence(teacher, general.cls_logits)?;
        let g = tape.scale(general.total, cfg.coarse_weight)?;
        let k = tape.scale(kl, cfg.kl_weight)?;
        let rest = tape.add(g, k)?;
        let total = if separation { rest } else { tape.add(nn.total, rest)? };
        breakdown.general = Some(general.values);
        breakdown.kl = tape.value(kl).data()[0];
        breakdown.total = tape.value(total).data()[0];
        Ok((total, breakdown))
    }

    fn trainable(&self) -> GroupSet {
        match self.phase {
            Phase::Joint => GroupSet::of(&ADAPTER_GROUPS),
            Phase::Separation => GroupSet::of(&[ParamGroup::Alignment]),
        }
    }

    fn step(&mut self, batch: &PreparedBatch) -> Result<LossBreakdown> {
        let trainable = self.trainable();
        let (grads, mut breakdown) = {
            let mut tape = self.model.new_tape();
            let mut binder = Binder::new(self.model.store(), trainable);
            let (loss, breakdown) = self.objective(&mut tape, &mut binder, batch)?;
            let g = tape.backward(loss)?;
            (collect_grads(&tape, &binder, &g), breakdown)
        };
        let stats = self.optimizer.step(self.model.store_mut(), &grads)?;
        breakdown.grad_norm = stats.grad_norm;
        self.steps += 1;
        Ok(breakdown)
    }

    /// One update of every adapter group and the head on the joint objective.
    pub fn joint_step(&mut self, batch: &PreparedBatch) -> Result<LossBreakdown> {
        if self.phase != Phase::Joint {
            return Err(Error::State("joint_step called outside the joint phase".into()));
        }
        self.step(batch)
    }

    /// One update of the alignment modules only.
    pub fn separation_step(&mut self, batch: &PreparedBatch) -> Result<LossBreakdown> {
        if self.phase != Phase::Separation {
            return Err(Error::State("separation_step called outside the separation phase".into()));
        }
        self.step(batch)
    }

    /// Marks the fine model as converged, enabling separation.
    pub fn mark_converged(&mut self) {
        self.nn_converged = true;
    }

    pub fn nn_converged(&self) -> bool {
        self.nn_converged
    }

    /// Switches to separation. The optimizer keeps its moments for `c′`.
    pub fn enter_separation(&mut self) -> Result<()> {
        if !self.nn_converged {
            return Err(Error::State("separation requires the fine model to have converged".into()));
        }
        if !self.config.joint {
            return Err(Error::State("separation needs joint learning".into()));
        }
        self.phase = Phase::Separation;
        Ok(())
    }

    /// Dev accuracy of the fine (`Fine`) or general (`General`) model.
    pub fn dev_accuracy(&self, dev: &[&Sample], mode: CompositionMode) -> Result<f64> {
        let labeled: Vec<&Sample> = dev.iter().copied().filter(|s| s.label.is_some()).collect();
        if labeled.is_empty() {
            return Err(Error::InvalidData("dev set has no labeled samples".into()));
        }
        let p = predict_fused(
            &self.model,
            &labeled,
            mode,
            &self.views,
            self.config.seed,
            self.config.eval_batch_size,
        )?;
        let ok = labeled
            .iter()
            .zip(&p.predictions)
            .filter(|(s, p)| s.label == Some(**p))
            .count();
        Ok(ok as f64 / labeled.len() as f64)
    }

    fn shuffled<'s>(&mut self, pool: &[&'s Sample]) -> Vec<&'s Sample> {
        let mut v = pool.to_vec();
        v.shuffle(&mut self.rng);
        v
    }
}

/// Structured training log events.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "event", rename_all = "snake_case"))]
pub enum LogEvent {
    Step {
        step: u64,
        epoch: usize,
        losses: LossBreakdown,
    },
    Epoch {
        epoch: usize,
        phase: Phase,
        fine_dev_acc: Option<f64>,
        general_dev_acc: Option<f64>,
    },
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SeparationReport {
    pub epochs: usize,
    pub general_dev_acc_start: f64,
    pub general_dev_acc_end: f64,
    /// Checksum of the frozen groups at entry and exit.
    pub frozen_checksum_start: u64,
    pub frozen_checksum_end: u64,
    /// `‖c′_end − c′_start‖²` over every alignment tensor.
    pub alignment_delta_sq: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainOutcome {
    pub joint_epochs: usize,
    pub best_fine_dev_acc: f64,
    pub best_epoch: usize,
    pub separation: Option<SeparationReport>,
    pub steps: u64,
    /// Mean training loss of the first and last joint epoch.
    pub first_epoch_loss: f64,
    pub last_epoch_loss: f64,
    /// Smallest KL value seen over all steps.
    pub min_kl: f64,
}

fn alignment_values(model: &ModelState) -> Vec<f64> {
    model
        .store()
        .iter()
        .filter(|(_, e)| e.group == ParamGroup::Alignment)
        .flat_map(|(_, e)| e.value.data().iter().copied())
        .collect()
}

/// Continues training `c′` alone on the general model's objective until its
/// dev accuracy stops improving, then restores the best `c′` (the latest
/// one among equals). The frozen groups are checked bit-for-bit.
fn separation_epoch(epoch: usize, acc: f64) -> LogEvent {
    LogEvent::Epoch {
        epoch,
        phase: Phase::Separation,
        fine_dev_acc: None,
        general_dev_acc: Some(acc),
    }
}

pub fn separation_phase(
    js: &mut JointState,
    train: &[&Sample],
    dev: &[&Sample],
    log: &mut dyn FnMut(&LogEvent),
    epoch_offset: usize,
) -> Result<SeparationReport> {
    js.enter_separation()?;
    let frozen = GroupSet::of(&FROZEN_IN_SEPARATION);
    let align = GroupSet::of(&[ParamGroup::Alignment]);
    let checksum_start = js.model.store().checksum(frozen);
    let c_start = alignment_values(&js.model);
    let start_acc = js.dev_accuracy(dev, CompositionMode::General)?;
    // Dev is checked after every step: a whole epoch can overshoot, and a
    // state only an epoch away from the entry point rarely ties it. On a tie
    // the trained `c′` wins over the entry state.
    let per_epoch = train.len().div_ceil(js.config.batch_size.max(1));
    let mut tracker = EarlyStop::keeping_ties(js.config.patience * per_epoch);
    tracker.observe(start_acc, 0, || js.model.store().snapshot(align));
    let mut epochs = 0;
    'outer: for e in 1..=js.config.separation_max_epochs {
        epochs = e;
        let order = js.shuffled(train);
        let mut acc = start_acc;
        for chunk in order.chunks(js.config.batch_size) {
            let batch = js.prepare(chunk)?;
            let losses = js.separation_step(&batch)?;
            log(&LogEvent::Step {
                step: js.steps,
                epoch: epoch_offset + e,
                losses,
            });
            acc = js.dev_accuracy(dev, CompositionMode::General)?;
            if tracker.observe(acc, e, || js.model.store().snapshot(align)) {
                log(&separation_epoch(epoch_offset + e, acc));
                break 'outer;
            }
        }
        log(&separation_epoch(epoch_offset + e, acc));
    }
    let best = tracker.snapshot().expect("entry state recorded").clone();
    js.model.store_mut().restore(&best);
    let checksum_end = js.model.store().checksum(frozen);
    if checksum_end != checksum_start {
        return Err(Error::State("frozen parameters changed during separation".into()));
    }
    let c_end = alignment_values(&js.model);
    let delta = c_start.iter().zip(&c_end).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(SeparationReport {
        epochs,
        general_dev_acc_start: start_acc,
        general_dev_acc_end: js.dev_accuracy(dev, CompositionMode::General)?,
        frozen_checksum_start: checksum_start,
        frozen_checksum_end: checksum_end,
        alignment_delta_sq: delta,
    })
}

/// Joint training with early stopping on the fine model's dev accuracy,
/// restoration of its best state, then (optionally) module separation.
pub fn train(
    model: ModelState,
    train: &[&Sample],
    unlabeled: &[&Sample],
    dev: &[&Sample],
    config: TrainConfig,
    log: &mut dyn FnMut(&LogEvent),
) -> Result<(ModelState, TrainOutcome)> {
    if train.is_empty() || dev.is_empty() {
        return Err(Error::InvalidData("training and dev sets must be non-empty".into()));
    }
    let mut js = JointState::new(model, config)?;
    let mut pool: Vec<&Sample> = train.to_vec();
    if js.config.unlabeled_mix {
        pool.extend_from_slice(unlabeled);
    }
    let adapters = GroupSet::of(&ADAPTER_GROUPS);
    let mut tracker = EarlyStop::new(js.config.patience);
    let mut epoch_losses = Vec::new();
    let mut min_kl = f64::INFINITY;
    let mut joint_epochs = 0;
    for epoch in 1..=js.config.max_epochs {
        joint_epochs = epoch;
        let order = js.shuffled(&pool);
        let mut sum = 0.0;
        let mut n = 0usize;
        for chunk in order.chunks(js.config.batch_size) {
            let batch = js.prepare(chunk)?;
            let losses = js.joint_step(&batch)?;
            sum += losses.total;
            n += 1;
            if losses.general.is_some() {
                min_kl = min_kl.min(losses.kl);
            }
            log(&LogEvent::Step {
                step: js.steps,
                epoch,
                losses,
            });
        }
        epoch_losses.push(sum / n.max(1) as f64);
        let fine_acc = js.dev_accuracy(dev, CompositionMode::Fine)?;
        let general_acc = if js.config.joint {
            Some(js.dev_accuracy(dev, CompositionMode::General)?)
        } else {
            None
        };
        log(&LogEvent::Epoch {
            epoch,
            phase: Phase::Joint,
            fine_dev_acc: Some(fine_acc),
            general_dev_acc: general_acc,
        });
        if tracker.observe(fine_acc, epoch, || js.model.store().snapshot(adapters)) {
            break;
        }
    }
    if let Some(best) = tracker.snapshot() {
        let best = best.clone();
        js.model.store_mut().restore(&best);
    }
    js.mark_converged();
    let separation = if js.config.joint && js.config.separation && js.config.separation_max_epochs > 0 {
        Some(separation_phase(&mut js, train, dev, log, joint_epochs)?)
    } else {
        None
    };
    let outcome = TrainOutcome {
        joint_epochs,
        best_fine_dev_acc: tracker.best,
        best_epoch: tracker.best_epoch,
        separation,
        steps: js.steps,
        first_epoch_loss: epoch_losses.first().copied().unwrap_or(0.0),
        last_epoch_loss: epoch_losses.last().copied().unwrap_or(0.0),
        min_kl: if min_kl.is_finite() { min_kl } else { 0.0 },
    };
    Ok((js.model, outcome))
}
