use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{BackboneConfig, LmMode, ModelState};
use crate::data::{mask_tokens, MaskStrategy, MaskedSequence};
use crate::numerics::Var;
use crate::params::{Binder, GroupSet, ParamGroup};
use crate::training::{collect_grads, AdamW, AdamWConfig};
use crate::{Error, Result};

/// Language-model pretraining of the base weights.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub mask_ratio: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 500,
            batch_size: 16,
            optimizer: AdamWConfig {
                lr: 1e-3,
                weight_decay: 0.0,
                ..AdamWConfig::default()
            },
            mask_ratio: 0.15,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PretrainReport {
    /// Training loss per step.
    pub losses: Vec<f64>,
    /// Held-out LM loss before and after training.
    pub held_out_before: f64,
    pub held_out_after: f64,
}

/// Mean LM loss of `model` on `seqs` with adapters off. Masks in MLM mode are
/// drawn from `seed`, so the value is reproducible.
pub fn lm_loss(model: &ModelState, seqs: &[Vec<u32>], mask_ratio: f64, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in seqs.chunks(32) {
        let mut tape = model.new_tape();
        let mut binder = Binder::new(model.store(), GroupSet::empty());
        if let Some((loss, n)) = batch_lm_loss(model, &mut tape, &mut binder, chunk, mask_ratio, &mut rng)? {
            total += tape.value(loss).data()[0] * n as f64;
            count += n;
        }
    }
    if count == 0 {
        return Err(Error::InvalidData("held-out corpus yields no LM targets".into()));
    }
    Ok(total / count as f64)
}

/// LM cross-entropy over one batch and the number of scored tokens, or
/// `None` when the batch has no targets.
fn batch_lm_loss(
    model: &ModelState,
    tape: &mut crate::numerics::Tape,
    binder: &mut Binder<'_>,
    seqs: &[Vec<u32>],
    mask_ratio: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Option<(Var, usize)>> {
    match model.config().mode {
        LmMode::Mlm => {
            let masked: Vec<MaskedSequence> = seqs
                .iter()
                .map(|s| mask_tokens(s, mask_ratio, MaskStrategy::Replace, rng))
                .collect::<Result<_>>()?;
            let refs: Vec<&MaskedSequence> = masked.iter().collect();
            let toks: Vec<&[u32]> = masked.iter().map(|m| m.tokens.as_slice()).collect();
            let batch = model.encode(&toks)?;
            let (rows, targets) = model.mlm_rows(&batch, &refs)?;
            if rows.is_empty() {
                return Ok(None);
            }
            let h = model.hidden(tape, binder, &batch, None)?;
            let logits = model.lm_logits(tape, binder, h, rows)?;
            Ok(Some((tape.cross_entropy(logits, &targets)?, targets.len())))
        }
        LmMode::Arm => {
            let toks: Vec<&[u32]> = seqs.iter().map(|s| s.as_slice()).collect();
            let batch = model.encode(&toks)?;
            let (rows, targets, _) = model.arm_rows(&batch)?;
            if rows.is_empty() {
                return Ok(None);
            }
            let h = model.hidden(tape, binder, &batch, None)?;
            let logits = model.lm_logits(tape, binder, h, rows)?;
            Ok(Some((tape.cross_entropy(logits, &targets)?, targets.len())))
        }
    }
}

/// Trains the base weights with the mode's LM objective only. The classifier
/// head is untouched. Zero steps return the random initialization.
pub fn pretrain_base(
    config: BackboneConfig,
    corpus: &[Vec<u32>],
    held_out: &[Vec<u32>],
    pre: &PretrainConfig,
) -> Result<(ModelState, PretrainReport)> {
    if corpus.is_empty() || held_out.is_empty() {
        return Err(Error::InvalidData("pretraining corpus is empty".into()));
    }
    if pre.batch_size == 0 {
        return Err(Error::InvalidConfig("batch size must be positive".into()));
    }
    let mut model = ModelState::new(config, pre.seed)?;
    let eval_seed = pre.seed ^ 0x5eed;
    let held_out_before = lm_loss(&model, held_out, pre.mask_ratio, eval_seed)?;
    let mut opt = AdamW::new(pre.optimizer)?;
    let mut rng = ChaCha8Rng::seed_from_u64(pre.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut cursor = order.len();
    let mut losses = Vec::with_capacity(pre.steps);
    let trainable = GroupSet::of(&[ParamGroup::Base]);
    let mut empty_batches = 0usize;
    while losses.len() < pre.steps {
        let mut batch = Vec::with_capacity(pre.batch_size);
        while batch.len() < pre.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(corpus[order[cursor]].clone());
            cursor += 1;
        }
        let grads = {
            let mut tape = model.new_tape();
            let mut binder = Binder::new(model.store(), trainable);
            let Some((loss, _)) = batch_lm_loss(&model, &mut tape, &mut binder, &batch, pre.mask_ratio, &mut rng)? else {
                // Sequences too short to yield any target.
                empty_batches += 1;
                if empty_batches > 64 {
                    return Err(Error::InvalidData("pretraining batches yield no LM targets".into()));
                }
                continue;
            };
            empty_batches = 0;
            losses.push(tape.value(loss).data()[0]);
            let g = tape.backward(loss)?;
            collect_grads(&tape, &binder, &g)
        };
        opt.step(model.store_mut(), &grads)?;
    }
    let held_out_after = lm_loss(&model, held_out, pre.mask_ratio, eval_seed)?;
    Ok((
        model,
        PretrainReport {
            losses,
            held_out_before,
            held_out_after,
        },
    ))
}
