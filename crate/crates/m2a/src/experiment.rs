//! End-to-end runs on synthetic data: pretraining, adapter training under
//! ablated settings, and strategy comparison over several seeds.

use std::collections::BTreeMap;

use m2a_core::adapters::{CompositionMode, ViewSelection};
use m2a_core::data::{generate_synthetic, Dataset, Sample, SyntheticSplits};
use m2a_core::eval::{evaluate, EvalReport};
use m2a_core::model::{pretrain_base, ModelState, PretrainReport};
use m2a_core::training::{train, LogEvent, TrainConfig, TrainOutcome};
use serde::Serialize;

use crate::config::{PretrainCorpus, RunConfig};
use crate::error::CliError;

/// Pretrains the backbone. With the task corpus the text of the training
/// and unlabeled splits is used and the dev text is held out; with the
/// generic corpus both come from [`generic_corpus`].
pub fn pretrain(
    config: &RunConfig,
    train: &Dataset,
    unlabeled: Option<&Dataset>,
    dev: &Dataset,
) -> Result<(ModelState, PretrainReport), CliError> {
    let text = |d: &Dataset| d.samples.iter().map(|s| s.tokens.clone()).collect::<Vec<_>>();
    let (corpus, held_out) = match config.pretrain_corpus {
        PretrainCorpus::Task => {
            let mut corpus = text(train);
            if let Some(u) = unlabeled {
                corpus.extend(text(u));
            }
            (corpus, text(dev))
        }
        PretrainCorpus::Generic => generic_corpus(config)?,
    };
    Ok(pretrain_base(config.backbone.clone(), &corpus, &held_out, &config.pretrain)?)
}

/// Unskewed text drawn with a seed distinct from the task data's. Returns
/// the corpus and a held-out set.
pub fn generic_corpus(config: &RunConfig) -> Result<(Vec<Vec<u32>>, Vec<Vec<u32>>), CliError> {
    let mut g = config.synthetic.clone();
    for a in &mut g.attributes {
        a.skew = 0.0;
    }
    g.seed = config.synthetic.seed ^ GENERIC_SALT;
    let s = generate_synthetic(&g)?;
    let text = |d: &Dataset| d.samples.iter().map(|s| s.tokens.clone()).collect::<Vec<_>>();
    let mut corpus = text(&s.train);
    corpus.extend(text(&s.unlabeled));
    corpus.extend(text(&s.test));
    Ok((corpus, text(&s.dev)))
}

const GENERIC_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// Attaches a fresh bank to a copy of `base` and trains it.
pub fn fit(
    base: &ModelState,
    config: &RunConfig,
    train_cfg: TrainConfig,
    train_set: &Dataset,
    unlabeled: Option<&Dataset>,
    dev: &Dataset,
    log: &mut dyn FnMut(&LogEvent),
) -> Result<(ModelState, TrainOutcome), CliError> {
    let mut model = base.clone();
    model.attach_bank(&train_set.schema, config.bank.clone())?;
    let tr: Vec<&Sample> = train_set.samples.iter().collect();
    let un: Vec<&Sample> = unlabeled.map(|u| u.samples.iter().collect()).unwrap_or_default();
    let dv: Vec<&Sample> = dev.labeled().collect();
    Ok(train(model, &tr, &un, &dv, train_cfg, log)?)
}

/// One row of the ablation grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub setting: String,
    pub accuracy: f64,
    pub rmse: f64,
    pub macro_f1: f64,
    /// Accuracy minus the full model's accuracy.
    pub delta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Full,
    NoCoarse,
    NoFine(usize),
    NoGeneration,
}

impl Variant {
    pub fn grid(num_attributes: usize) -> Vec<Variant> {
        let mut v = vec![Variant::Full, Variant::NoCoarse];
        v.extend((0..num_attributes).map(Variant::NoFine));
        v.push(Variant::NoGeneration);
        v
    }

    pub fn label(self, data: &Dataset) -> String {
        match self {
            Variant::Full => "full".into(),
            Variant::NoCoarse => "- coarse view".into(),
            Variant::NoFine(a) => format!("- fine view ({})", data.schema.name(a)),
            Variant::NoGeneration => "- text generation".into(),
        }
    }

    pub fn apply(self, mut cfg: TrainConfig, data: &Dataset) -> TrainConfig {
        let all = ViewSelection::all(&data.schema);
        match self {
            Variant::Full => {}
            Variant::NoCoarse => cfg.views = Some(all.without_coarse()),
            Variant::NoFine(a) => cfg.views = Some(all.without_fine(a)),
            Variant::NoGeneration => {
                // The generation loss goes, the input masking stays.
                cfg.alpha = 0.0;
                cfg.mask_without_generation = true;
            }
        }
        cfg
    }
}

/// Trains one model per variant from the same base and scores each on `test`
/// with the fine strategy restricted to its views.
pub fn ablate(
    base: &ModelState,
    config: &RunConfig,
    variants: &[Variant],
    train_set: &Dataset,
    unlabeled: Option<&Dataset>,
    dev: &Dataset,
    test: &Dataset,
) -> Result<Vec<AblationRow>, CliError> {
    let mut rows = Vec::with_capacity(variants.len());
    let mut full_acc = None;
    for &v in variants {
        let cfg = v.apply(config.train.clone(), train_set);
        let views = cfg.views.clone().unwrap_or_else(|| ViewSelection::all(&train_set.schema));
        let (model, _) = fit(base, config, cfg, train_set, unlabeled, dev, &mut |_| {})?;
        let r = evaluate(&model, test, CompositionMode::Fine, &views, config.seed, config.train.eval_batch_size)?;
        if v == Variant::Full {
            full_acc = Some(r.accuracy);
        }
        rows.push(AblationRow {
            setting: v.label(train_set),
            accuracy: r.accuracy,
            rmse: r.rmse,
            macro_f1: r.macro_f1,
            delta: 0.0,
        });
    }
    let reference = full_acc.unwrap_or(rows[0].accuracy);
    for r in &mut rows {
        r.delta = r.accuracy - reference;
    }
    Ok(rows)
}

/// Every strategy evaluated on one trained model.
pub fn strategy_reports(model: &ModelState, test: &Dataset, seed: u64, batch: usize) -> Result<Vec<EvalReport>, CliError> {
    let views = ViewSelection::all(&test.schema);
    CompositionMode::ALL
        .iter()
        .map(|&m| Ok(evaluate(model, test, m, &views, seed, batch)?))
        .collect()
}

/// Results of one seed of the synthetic study.
#[derive(Debug, Clone, Serialize)]
pub struct SeedRun {
    pub seed: u64,
    /// Test accuracy per strategy name for the full model.
    pub strategies: BTreeMap<String, f64>,
    /// Fine-strategy test accuracy of the model trained with `alpha = 0`.
    pub no_generation_acc: f64,
    pub outcome: TrainOutcome,
    pub pretrain_held_out: (f64, f64),
}

#[derive(Debug, Clone, Serialize)]
pub struct Study {
    pub runs: Vec<SeedRun>,
}

impl Study {
    pub fn mean(&self, f: impl Fn(&SeedRun) -> f64) -> f64 {
        self.runs.iter().map(f).sum::<f64>() / self.runs.len() as f64
    }

    pub fn mean_strategy(&self, mode: CompositionMode) -> f64 {
        self.mean(|r| r.strategies[mode.name()])
    }
}

pub fn synthetic_splits(config: &RunConfig) -> Result<SyntheticSplits, CliError> {
    Ok(generate_synthetic(&config.synthetic)?)
}

/// For each seed: generate data, pretrain, train the full model and the
/// `alpha = 0` model from the same base, and score them on the test split.
/// `log` sees the full model's training events, tagged with the seed.
pub fn synthetic_study(
    config: &RunConfig,
    seeds: &[u64],
    log: &mut dyn FnMut(u64, &LogEvent),
) -> Result<Study, CliError> {
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let cfg = RunConfig {
            seed,
            ..config.clone()
        }
        .resolve()?;
        let s = synthetic_splits(&cfg)?;
        let unlabeled = (!s.unlabeled.samples.is_empty()).then_some(&s.unlabeled);
        let (base, pre) = pretrain(&cfg, &s.train, unlabeled, &s.dev)?;
        let (model, outcome) = fit(&base, &cfg, cfg.train.clone(), &s.train, unlabeled, &s.dev, &mut |e| log(seed, e))?;
        let strategies = strategy_reports(&model, &s.test, seed, cfg.train.eval_batch_size)?
            .into_iter()
            .map(|r| (r.strategy, r.accuracy))
            .collect();
        let no_gen = Variant::NoGeneration.apply(cfg.train.clone(), &s.train);
        let (m0, _) = fit(&base, &cfg, no_gen, &s.train, unlabeled, &s.dev, &mut |_| {})?;
        let views = ViewSelection::all(&s.train.schema);
        let r0 = evaluate(&m0, &s.test, CompositionMode::Fine, &views, seed, cfg.train.eval_batch_size)?;
        runs.push(SeedRun {
            seed,
            strategies,
            no_generation_acc: r0.accuracy,
            outcome,
            pretrain_held_out: (pre.held_out_before, pre.held_out_after),
        });
    }
    Ok(Study { runs })
}
