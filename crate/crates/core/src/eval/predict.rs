use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::metrics::metrics;
use crate::adapters::{CompositionContext, CompositionMode, Granularity, SlotKey, ViewSelection};
use crate::data::{Dataset, Sample};
use crate::model::ModelState;
use crate::numerics::{self, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct FusedPredictions {
    pub predictions: Vec<usize>,
    /// `n × num_classes`.
    pub logits: Tensor,
    /// Unseen domain ids replaced by the alignment module.
    pub fallbacks: usize,
}

fn argmax(row: &[f64]) -> usize {
    // First maximum wins, so ties resolve to the lower class.
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

fn stack_rows(parts: Vec<Tensor>, cols: usize) -> Result<Tensor> {
    let rows: usize = parts.iter().map(|p| p.shape()[0]).sum();
    let mut data = Vec::with_capacity(rows * cols);
    for p in parts {
        data.extend(p.into_data());
    }
    Tensor::new(alloc::vec![rows, cols], data)
}

/// Class predictions of the single model obtained by averaging the selected
/// modules. `Rand` draws one fine module per attribute and sample from a
/// generator seeded with `seed`, in sample order.
pub fn predict_fused(
    model: &ModelState,
    samples: &[&Sample],
    mode: CompositionMode,
    views: &ViewSelection,
    seed: u64,
    batch_size: usize,
) -> Result<FusedPredictions> {
    if samples.is_empty() {
        return Err(Error::InvalidData("nothing to predict".into()));
    }
    let schema = model
        .schema()
        .ok_or_else(|| Error::State("prediction strategies need an adapter bank".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ctxs: Vec<CompositionContext> = samples
        .iter()
        .map(|s| CompositionContext::for_mode(mode, schema, &s.domains, views, &mut rng))
        .collect::<Result<_>>()?;
    let fallbacks = ctxs.iter().map(|c| c.fallbacks()).sum();
    let mut parts = Vec::new();
    for (chunk, cchunk) in samples.chunks(batch_size.max(1)).zip(ctxs.chunks(batch_size.max(1))) {
        let seqs: Vec<&[u32]> = chunk.iter().map(|s| s.tokens.as_slice()).collect();
        let refs: Vec<&CompositionContext> = cchunk.iter().collect();
        parts.push(model.forward_classify(&seqs, Some(&refs))?);
    }
    let logits = stack_rows(parts, model.config().num_classes)?;
    let c = model.config().num_classes;
    let predictions = (0..samples.len()).map(|i| argmax(&logits.data()[i * c..(i + 1) * c])).collect();
    Ok(FusedPredictions {
        predictions,
        logits,
        fallbacks,
    })
}

/// Mean class distribution over the single-view models: for every attribute,
/// one model adds its coarse module and one adds the sample's fine module
/// (the alignment module when the domain is unseen).
pub fn predict_ensemble(model: &ModelState, samples: &[&Sample], batch_size: usize) -> Result<Tensor> {
    if samples.is_empty() {
        return Err(Error::InvalidData("nothing to predict".into()));
    }
    let schema = model
        .schema()
        .ok_or_else(|| Error::State("prediction strategies need an adapter bank".into()))?;
    let c = model.config().num_classes;
    let mut mean = Tensor::zeros(&[samples.len(), c]);
    let views = 2 * schema.len();
    for a in 0..schema.len() {
        for fine in [false, true] {
            let ctxs: Vec<CompositionContext> = samples
                .iter()
                .map(|s| {
                    let dom = *s.domains.get(a).ok_or_else(|| {
                        Error::InvalidData(alloc::format!("sample lacks attribute `{}`", schema.name(a)))
                    })?;
                    let g = match (fine, dom < schema.num_domains(a)) {
                        (false, _) => Granularity::Coarse,
                        (true, true) => Granularity::Fine(dom),
                        (true, false) => Granularity::Alignment,
                    };
                    Ok(CompositionContext::single(SlotKey::new(a, g)))
                })
                .collect::<Result<_>>()?;
            let mut row = 0;
            for (chunk, cchunk) in samples.chunks(batch_size.max(1)).zip(ctxs.chunks(batch_size.max(1))) {
                let seqs: Vec<&[u32]> = chunk.iter().map(|s| s.tokens.as_slice()).collect();
                let refs: Vec<&CompositionContext> = cchunk.iter().collect();
                let p = numerics::softmax(&model.forward_classify(&seqs, Some(&refs))?)?;
                for (o, v) in mean.data_mut()[row * c..].iter_mut().zip(p.data()) {
                    *o += v / views as f64;
                }
                row += chunk.len();
            }
        }
    }
    Ok(mean)
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DomainAccuracy {
    pub attribute: String,
    pub domain: usize,
    pub count: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalReport {
    pub strategy: String,
    pub seed: u64,
    pub samples: usize,
    pub accuracy: f64,
    pub rmse: f64,
    pub macro_f1: f64,
    pub per_domain: Vec<DomainAccuracy>,
    pub fallbacks: usize,
}

/// Scores the labeled samples of `data` under one strategy.
pub fn evaluate(
    model: &ModelState,
    data: &Dataset,
    mode: CompositionMode,
    views: &ViewSelection,
    seed: u64,
    batch_size: usize,
) -> Result<EvalReport> {
    let samples: Vec<&Sample> = data.labeled().collect();
    let fused = predict_fused(model, &samples, mode, views, seed, batch_size)?;
    let gold: Vec<usize> = samples.iter().map(|s| s.label.expect("labeled")).collect();
    let m = metrics(&gold, &fused.predictions)?;
    let mut table: BTreeMap<(usize, usize), (usize, usize)> = BTreeMap::new();
    for ((s, g), p) in samples.iter().zip(&gold).zip(&fused.predictions) {
        for (a, d) in s.domains.iter().enumerate() {
            let e = table.entry((a, *d)).or_default();
            e.0 += 1;
            e.1 += (g == p) as usize;
        }
    }
    let per_domain = table
        .into_iter()
        .map(|((a, d), (n, ok))| DomainAccuracy {
            attribute: data.schema.name(a).into(),
            domain: d,
            count: n,
            accuracy: ok as f64 / n as f64,
        })
        .collect();
    Ok(EvalReport {
        strategy: mode.name().into(),
        seed,
        samples: samples.len(),
        accuracy: m.accuracy,
        rmse: m.rmse,
        macro_f1: m.macro_f1,
        per_domain,
        fallbacks: fused.fallbacks,
    })
}
