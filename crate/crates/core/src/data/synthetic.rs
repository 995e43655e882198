//! Synthetic non-IID corpus.
//!
//! Each sample has a latent base class. Its text mixes shared
//! class-indicative tokens with filler and, per attribute, tokens from its
//! domain's own vocabulary (vocabulary skew). That vocabulary also expresses
//! the base class, but with words only that domain uses, the way a writer has
//! a personal way of saying "great". The label is the base class shifted by
//! a per-domain integer offset that fires with probability `bias`
//! (annotator/writer influence), clamped to the class range.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{AttributeSchema, AttributeSpec, Dataset, Sample, FIRST_CONTENT_TOKEN};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AttributeSynth {
    pub name: String,
    pub num_domains: usize,
    /// Probability mass (in `[0, 1]`) that a token is drawn from the
    /// domain vocabularies, divided evenly across attributes.
    pub skew: f64,
    /// Probability (in `[0, 1]`) that the domain's label offset is applied.
    pub bias: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct SyntheticConfig {
    pub attributes: Vec<AttributeSynth>,
    pub num_classes: usize,
    pub vocab_size: usize,
    /// Content tokens per sample (the anchor token is added by the model).
    pub seq_len: usize,
    pub train_per_domain: usize,
    pub dev_per_domain: usize,
    pub test_per_domain: usize,
    pub unlabeled_per_domain: usize,
    pub class_tokens_per_class: usize,
    /// Size of each domain's vocabulary for one class.
    pub signature_tokens_per_class: usize,
    /// Fraction of shared (non-domain) positions carrying a class token.
    pub sentiment_density: f64,
    /// Probability a class token comes from a neighbouring class.
    pub sentiment_noise: f64,
    /// Offsets are drawn uniformly from `±1..=±max_offset`.
    pub max_offset: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            attributes: vec![
                AttributeSynth {
                    name: "user".into(),
                    num_domains: 8,
                    skew: 0.3,
                    bias: 0.7,
                },
                AttributeSynth {
                    name: "item".into(),
                    num_domains: 8,
                    skew: 0.3,
                    bias: 0.7,
                },
            ],
            num_classes: 5,
            vocab_size: 500,
            seq_len: 20,
            train_per_domain: 40,
            dev_per_domain: 10,
            test_per_domain: 20,
            unlabeled_per_domain: 0,
            class_tokens_per_class: 6,
            signature_tokens_per_class: 3,
            sentiment_density: 0.3,
            sentiment_noise: 0.2,
            max_offset: 1,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn schema(&self) -> AttributeSchema {
        AttributeSchema {
            attributes: self
                .attributes
                .iter()
                .map(|a| AttributeSpec {
                    name: a.name.clone(),
                    num_domains: a.num_domains,
                })
                .collect(),
        }
    }

    fn filler_range(&self) -> (u32, u32) {
        let start = FIRST_CONTENT_TOKEN + (self.num_classes * self.class_tokens_per_class) as u32;
        (start, self.vocab_size as u32)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.attributes.is_empty() {
            return bad("at least one attribute is required");
        }
        self.schema().validate()?;
        for a in &self.attributes {
            if a.num_domains == 0 {
                return bad("every attribute needs at least one domain");
            }
            if !(0.0..=1.0).contains(&a.skew) || !(0.0..=1.0).contains(&a.bias) {
                return bad("skew and bias strengths must lie in [0, 1]");
            }
        }
        if self.num_classes < 2 {
            return bad("need at least two classes");
        }
        if self.train_per_domain == 0 || self.seq_len == 0 {
            return bad("infeasible config: zero training samples or empty sequences");
        }
        if self.class_tokens_per_class == 0 || self.max_offset == 0 {
            return bad("class_tokens_per_class and max_offset must be positive");
        }
        if !(0.0..=1.0).contains(&self.sentiment_density) || !(0.0..=1.0).contains(&self.sentiment_noise) {
            return bad("sentiment density/noise must lie in [0, 1]");
        }
        let (lo, hi) = self.filler_range();
        if hi <= lo || ((hi - lo) as usize) < (self.signature_tokens_per_class * self.num_classes).max(1) {
            return bad("vocabulary too small for class and signature tokens");
        }
        Ok(())
    }
}

/// Generated splits plus the hidden generative parameters, kept so tests
/// and experiments can replay the label mechanism.
#[derive(Debug, Clone)]
pub struct SyntheticSplits {
    pub train: Dataset,
    pub dev: Dataset,
    pub test: Dataset,
    /// Unlabeled text from the same domains (labels dropped).
    pub unlabeled: Dataset,
    /// `offsets[a][d]`: label shift of domain `d` under attribute `a`.
    pub offsets: Vec<Vec<i64>>,
    /// `signatures[a][d][k]`: the domain's tokens for base class `k`.
    pub signatures: Vec<Vec<Vec<Vec<u32>>>>,
    /// Latent base classes of train, dev and test samples.
    pub base_labels: [Vec<usize>; 3],
}

pub fn generate_synthetic(config: &SyntheticConfig) -> Result<SyntheticSplits> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (filler_lo, filler_hi) = config.filler_range();
    let filler: Vec<u32> = (filler_lo..filler_hi).collect();

    let mut offsets = Vec::new();
    let mut signatures = Vec::new();
    for a in &config.attributes {
        let mut offs = Vec::with_capacity(a.num_domains);
        let mut sigs = Vec::with_capacity(a.num_domains);
        for _ in 0..a.num_domains {
            let mag = rng.gen_range(1..=config.max_offset) as i64;
            offs.push(if rng.gen::<bool>() { mag } else { -mag });
            let per = config.signature_tokens_per_class;
            let pool: Vec<u32> = filler
                .choose_multiple(&mut rng, per * config.num_classes)
                .copied()
                .collect();
            sigs.push(pool.chunks(per.max(1)).map(|c| c.to_vec()).collect::<Vec<_>>());
        }
        offsets.push(offs);
        signatures.push(sigs);
    }

    let gen = Generator {
        config,
        offsets: &offsets,
        signatures: &signatures,
        filler: &filler,
    };
    let (train, base_train) = gen.split(config.train_per_domain, true, &mut rng);
    let (dev, base_dev) = gen.split(config.dev_per_domain, true, &mut rng);
    let (test, base_test) = gen.split(config.test_per_domain, true, &mut rng);
    let (unlabeled, _) = gen.split(config.unlabeled_per_domain, false, &mut rng);

    Ok(SyntheticSplits {
        train,
        dev,
        test,
        unlabeled,
        offsets,
        signatures,
        base_labels: [base_train, base_dev, base_test],
    })
}

struct Generator<'a> {
    config: &'a SyntheticConfig,
    offsets: &'a [Vec<i64>],
    signatures: &'a [Vec<Vec<Vec<u32>>>],
    filler: &'a [u32],
}

impl Generator<'_> {
    fn split(&self, per_domain: usize, labeled: bool, rng: &mut ChaCha8Rng) -> (Dataset, Vec<usize>) {
        let cfg = self.config;
        let max_domains = cfg.attributes.iter().map(|a| a.num_domains).max().unwrap_or(1);
        let n = per_domain * max_domains;
        // Balanced assignment: every domain of every attribute appears at
        // least `per_domain · max_domains / num_domains` times.
        let assignments: Vec<Vec<usize>> = cfg
            .attributes
            .iter()
            .map(|a| {
                let mut v: Vec<usize> = (0..n).map(|i| i % a.num_domains).collect();
                v.shuffle(rng);
                v
            })
            .collect();
        let mut samples = Vec::with_capacity(n);
        let mut base = Vec::with_capacity(n);
        for i in 0..n {
            let domains: Vec<usize> = assignments.iter().map(|v| v[i]).collect();
            let (sample, y0) = self.sample(domains, labeled, rng);
            samples.push(sample);
            base.push(y0);
        }
        (
            Dataset {
                schema: cfg.schema(),
                num_classes: cfg.num_classes,
                vocab_size: cfg.vocab_size,
                samples,
            },
            base,
        )
    }

    fn sample(&self, domains: Vec<usize>, labeled: bool, rng: &mut ChaCha8Rng) -> (Sample, usize) {
        let cfg = self.config;
        let k = cfg.num_classes;
        let n_attr = cfg.attributes.len() as f64;
        let y0 = rng.gen_range(0..k);
        let mut tokens = Vec::with_capacity(cfg.seq_len);
        for _ in 0..cfg.seq_len {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut chosen = None;
            for (a, attr) in cfg.attributes.iter().enumerate() {
                acc += attr.skew / n_attr;
                if u < acc {
                    chosen = Some(a);
                    break;
                }
            }
            let tok = match chosen {
                Some(a) if cfg.signature_tokens_per_class > 0 => {
                    let class = noisy_class(y0, k, cfg.sentiment_noise, rng);
                    *self.signatures[a][domains[a]][class].choose(rng).expect("non-empty signature")
                }
                _ => {
                    if rng.gen::<f64>() < cfg.sentiment_density {
                        let class = noisy_class(y0, k, cfg.sentiment_noise, rng) as u32;
                        let j = rng.gen_range(0..cfg.class_tokens_per_class) as u32;
                        FIRST_CONTENT_TOKEN + class * cfg.class_tokens_per_class as u32 + j
                    } else {
                        *self.filler.choose(rng).expect("non-empty filler")
                    }
                }
            };
            tokens.push(tok);
        }
        let mut y = y0 as i64;
        for (a, attr) in cfg.attributes.iter().enumerate() {
            if rng.gen::<f64>() < attr.bias {
                y += self.offsets[a][domains[a]];
            }
        }
        let label = y.clamp(0, k as i64 - 1) as usize;
        (
            Sample {
                tokens,
                label: labeled.then_some(label),
                domains,
            },
            y0,
        )
    }
}

/// `y0`, moved to a neighbouring class with probability `noise`.
fn noisy_class(y0: usize, k: usize, noise: f64, rng: &mut ChaCha8Rng) -> usize {
    let mut class = y0 as i64;
    if rng.gen::<f64>() < noise {
        class += if rng.gen::<bool>() { 1 } else { -1 };
    }
    class.clamp(0, k as i64 - 1) as usize
}
