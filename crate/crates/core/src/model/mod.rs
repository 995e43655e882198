//! A small pre-LN transformer with adapter injection.
//!
//! Inputs are content token sequences; the anchor token [`CLS_TOKEN`] is
//! prepended internally, so position 0 is always the anchor. In MLM mode the
//! encoder attends bidirectionally; in ARM mode attention is causal and the
//! anchor doubles as the start-of-sequence token.

mod pretrain;
#[cfg(test)]
mod tests;

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adapters::{AdapterBank, BankConfig, CompositionContext, SiteSpec};
use crate::data::{AttributeSchema, MaskedSequence, CLS_TOKEN, FIRST_CONTENT_TOKEN};
use crate::numerics::{AttentionSpec, Precision, Tape, Tensor, Var};
use crate::params::{Binder, GroupSet, ParamGroup, ParamId, ParamStore};
use crate::{Error, Result};

pub use pretrain::{pretrain_base, PretrainConfig, PretrainReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum LmMode {
    /// Masked-token reconstruction, bidirectional attention.
    Mlm,
    /// Next-token prediction, causal attention.
    Arm,
}

/// Which hidden state feeds the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum ClsPosition {
    /// The prepended anchor token.
    First,
    /// The last non-padding token.
    Last,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Activation {
    Gelu,
    Relu,
}

/// Linear layers that can carry adapter modules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct InjectionSites {
    pub query: bool,
    pub value: bool,
    /// The first feed-forward projection.
    pub intermediate: bool,
}

impl InjectionSites {
    pub const ALL: InjectionSites = InjectionSites {
        query: true,
        value: true,
        intermediate: true,
    };
    pub const ATTENTION: InjectionSites = InjectionSites {
        query: true,
        value: true,
        intermediate: false,
    };
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BackboneConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    /// Longest accepted sequence including the anchor token.
    pub max_seq_len: usize,
    pub num_classes: usize,
    pub mode: LmMode,
    pub cls_position: ClsPosition,
    pub activation: Activation,
    pub coarse_sites: InjectionSites,
    pub fine_sites: InjectionSites,
    pub precision: Precision,
}

impl BackboneConfig {
    /// Two layers, width 64, four heads. `cls_position` follows the mode:
    /// under causal attention the anchor at position 0 sees nothing but
    /// itself, so ARM reads the last token.
    pub fn toy(mode: LmMode, vocab_size: usize, num_classes: usize) -> Self {
        BackboneConfig {
            num_layers: 2,
            d_model: 64,
            num_heads: 4,
            d_ff: 128,
            vocab_size,
            max_seq_len: 64,
            num_classes,
            mode,
            cls_position: match mode {
                LmMode::Mlm => ClsPosition::First,
                LmMode::Arm => ClsPosition::Last,
            },
            activation: Activation::Gelu,
            coarse_sites: InjectionSites::ALL,
            fine_sites: InjectionSites::ATTENTION,
            precision: Precision::F64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.num_layers == 0 || self.d_model == 0 || self.d_ff == 0 || self.num_heads == 0 {
            return bad("layer count, widths and heads must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.num_heads) {
            return bad(format!("d_model {} not divisible by {} heads", self.d_model, self.num_heads));
        }
        if self.vocab_size <= FIRST_CONTENT_TOKEN as usize {
            return bad(format!("vocabulary of {} leaves no content tokens", self.vocab_size));
        }
        if self.max_seq_len < 2 {
            return bad("max_seq_len must leave room for the anchor and one token".into());
        }
        if self.num_classes < 2 {
            return bad("need at least two classes".into());
        }
        Ok(())
    }

    /// Adapter sites in layer order: `layer{i}.q`, `layer{i}.v`, `layer{i}.ff1`.
    pub fn site_specs(&self) -> Vec<SiteSpec> {
        let mut out = Vec::new();
        for i in 0..self.num_layers {
            let kinds = [
                ("q", self.d_model, self.coarse_sites.query, self.fine_sites.query),
                ("v", self.d_model, self.coarse_sites.value, self.fine_sites.value),
                ("ff1", self.d_ff, self.coarse_sites.intermediate, self.fine_sites.intermediate),
            ];
            for (name, d_out, coarse, fine) in kinds {
                if coarse || fine {
                    out.push(SiteSpec {
                        name: format!("layer{i}.{name}"),
                        d_in: self.d_model,
                        d_out,
                        coarse,
                        fine,
                    });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    g: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct LayerIds {
    ln1: Norm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: Norm,
    ff1: Linear,
    ff2: Linear,
    /// Bank site index for q, v, ff1.
    sites: [Option<usize>; 3],
}

#[derive(Debug, Clone)]
struct BaseIds {
    tok: ParamId,
    pos: ParamId,
    layers: Vec<LayerIds>,
    ln_f: Norm,
    lm: Linear,
    cls: Linear,
}

/// Base weights, the adapter bank and the heads, all in one [`ParamStore`].
#[derive(Debug, Clone)]
pub struct ModelState {
    config: BackboneConfig,
    store: ParamStore,
    ids: BaseIds,
    bank: Option<AdapterBank>,
}

/// A padded batch with the anchor prepended.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedBatch {
    /// Row-major `batch × seq` token ids.
    pub ids: Vec<usize>,
    /// Length of every sequence including the anchor.
    pub lengths: Vec<usize>,
    pub seq: usize,
}

impl EncodedBatch {
    pub fn batch(&self) -> usize {
        self.lengths.len()
    }
}

/// Next-token rows and their targets for a causal batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmOutput {
    /// One row per predicted token.
    pub logits: Tensor,
    pub targets: Vec<usize>,
    /// `(sample, position)` that produced each row.
    pub origins: Vec<(usize, usize)>,
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let bound = libm::sqrt(6.0 / (rows + cols) as f64);
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(vec![rows, cols], data).expect("finite init")
}

impl ModelState {
    /// Randomly initialized base model without adapters.
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.d_model;
        let linear = |store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, i: usize, o: usize, group| {
            let w = store.insert(format!("{name}/W"), group, xavier(rng, i, o))?;
            let b = store.insert(format!("{name}/b"), group, Tensor::zeros(&[o]))?;
            Ok::<_, Error>(Linear { w, b })
        };
        let norm = |store: &mut ParamStore, name: &str| {
            let g = store.insert(format!("{name}/g"), ParamGroup::Base, Tensor::ones(&[d]))?;
            let b = store.insert(format!("{name}/b"), ParamGroup::Base, Tensor::zeros(&[d]))?;
            Ok::<_, Error>(Norm { g, b })
        };
        let tok = store.insert("embed/tok", ParamGroup::Base, xavier(&mut rng, config.vocab_size, d))?;
        let pos = store.insert("embed/pos", ParamGroup::Base, xavier(&mut rng, config.max_seq_len, d))?;
        let mut layers = Vec::with_capacity(config.num_layers);
        for i in 0..config.num_layers {
            let p = format!("layer{i}");
            let base = ParamGroup::Base;
            layers.push(LayerIds {
                ln1: norm(&mut store, &format!("{p}/ln1"))?,
                q: linear(&mut store, &mut rng, &format!("{p}/q"), d, d, base)?,
                k: linear(&mut store, &mut rng, &format!("{p}/k"), d, d, base)?,
                v: linear(&mut store, &mut rng, &format!("{p}/v"), d, d, base)?,
                o: linear(&mut store, &mut rng, &format!("{p}/o"), d, d, base)?,
                ln2: norm(&mut store, &format!("{p}/ln2"))?,
                ff1: linear(&mut store, &mut rng, &format!("{p}/ff1"), d, config.d_ff, base)?,
                ff2: linear(&mut store, &mut rng, &format!("{p}/ff2"), config.d_ff, d, base)?,
                sites: [None; 3],
            });
        }
        let ln_f = norm(&mut store, "final_ln")?;
        let lm = linear(&mut store, &mut rng, "lm_head", d, config.vocab_size, ParamGroup::Base)?;
        let cls = linear(&mut store, &mut rng, "cls_head", d, config.num_classes, ParamGroup::Head)?;
        Ok(ModelState {
            config,
            store,
            ids: BaseIds {
                tok,
                pos,
                layers,
                ln_f,
                lm,
                cls,
            },
            bank: None,
        })
    }

    /// Rebuilds a model around tensors loaded from a checkpoint. Every tensor
    /// the configuration implies must be present with the right shape, and
    /// nothing else may be.
    pub fn from_store(
        config: BackboneConfig,
        loaded: &ParamStore,
        bank: Option<(&AttributeSchema, BankConfig)>,
    ) -> Result<Self> {
        let mut fresh = Self::new(config, 0)?;
        if let Some((schema, cfg)) = bank {
            fresh.attach_bank(schema, cfg)?;
        }
        let ids: Vec<ParamId> = fresh.store.ids().collect();
        for id in ids {
            let name = fresh.store.entry(id).name.clone();
            let found = loaded
                .id(&name)
                .ok_or_else(|| Error::State(format!("checkpoint lacks tensor `{name}`")))?;
            fresh.store.set(id, loaded.get(found).clone())?;
        }
        if loaded.len() != fresh.store.len() {
            let extra = loaded
                .iter()
                .find(|(_, e)| fresh.store.id(&e.name).is_none())
                .map(|(_, e)| e.name.clone())
                .unwrap_or_default();
            return Err(Error::State(format!("checkpoint carries unexpected tensor `{extra}`")));
        }
        Ok(fresh)
    }

    /// Allocates a fresh adapter bank. The base model's function is unchanged
    /// because every module starts with a zero factor.
    pub fn attach_bank(&mut self, schema: &AttributeSchema, config: BankConfig) -> Result<()> {
        if self.bank.is_some() {
            return Err(Error::State("model already carries an adapter bank".into()));
        }
        let sites = self.config.site_specs();
        let bank = AdapterBank::build(&mut self.store, schema, &sites, config)?;
        self.bind_sites(&bank);
        self.bank = Some(bank);
        Ok(())
    }

    fn bind_sites(&mut self, bank: &AdapterBank) {
        for (i, layer) in self.ids.layers.iter_mut().enumerate() {
            for (k, name) in ["q", "v", "ff1"].iter().enumerate() {
                layer.sites[k] = bank.site_index(&format!("layer{i}.{name}"));
            }
        }
    }

    /// Re-draws the classifier head.
    pub fn reset_head(&mut self, seed: u64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = xavier(&mut rng, self.config.d_model, self.config.num_classes);
        self.store.set(self.ids.cls.w, w)?;
        self.store.set(self.ids.cls.b, Tensor::zeros(&[self.config.num_classes]))
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn bank(&self) -> Option<&AdapterBank> {
        self.bank.as_ref()
    }

    pub fn bank_mut(&mut self) -> Option<&mut AdapterBank> {
        self.bank.as_mut()
    }

    pub fn schema(&self) -> Option<&AttributeSchema> {
        self.bank.as_ref().map(|b| b.schema())
    }

    pub fn new_tape(&self) -> Tape {
        Tape::new().with_precision(self.config.precision)
    }

    /// Prepends the anchor, checks ids and lengths, and pads with zeros.
    pub fn encode(&self, sequences: &[&[u32]]) -> Result<EncodedBatch> {
        if sequences.is_empty() {
            return Err(Error::InvalidData("empty batch".into()));
        }
        let mut lengths = Vec::with_capacity(sequences.len());
        for s in sequences {
            let len = s.len() + 1;
            if len > self.config.max_seq_len {
                return Err(Error::InvalidData(format!(
                    "sequence of {} tokens exceeds max_seq_len {} (anchor included)",
                    len, self.config.max_seq_len
                )));
            }
            if let Some(t) = s.iter().find(|&&t| t as usize >= self.config.vocab_size) {
                return Err(Error::InvalidData(format!(
                    "token id {t} outside vocabulary of {}",
                    self.config.vocab_size
                )));
            }
            lengths.push(len);
        }
        let seq = *lengths.iter().max().unwrap();
        let mut ids = vec![0usize; sequences.len() * seq];
        for (b, s) in sequences.iter().enumerate() {
            ids[b * seq] = CLS_TOKEN as usize;
            for (t, tok) in s.iter().enumerate() {
                ids[b * seq + 1 + t] = *tok as usize;
            }
        }
        Ok(EncodedBatch { ids, lengths, seq })
    }

    /// Final hidden states, `(batch·seq) × d_model`. With `ctxs`, sample `i`
    /// adds the update selected by `ctxs[i]` at every injected layer.
    pub fn hidden(
        &self,
        tape: &mut Tape,
        binder: &mut Binder<'_>,
        batch: &EncodedBatch,
        ctxs: Option<&[&CompositionContext]>,
    ) -> Result<Var> {
        let bank = match (ctxs, &self.bank) {
            (None, _) => None,
            (Some(c), Some(bank)) => {
                if c.len() != batch.batch() {
                    return Err(Error::InvalidData(format!(
                        "{} composition contexts for a batch of {}",
                        c.len(),
                        batch.batch()
                    )));
                }
                Some((bank, c))
            }
            (Some(_), None) => return Err(Error::State("composition requested but no adapter bank attached".into())),
        };
        let (n_b, t) = (batch.batch(), batch.seq);
        let tok = binder.var(tape, self.ids.tok);
        let pos = binder.var(tape, self.ids.pos);
        let e = tape.embedding(tok, batch.ids.clone())?;
        let pos_ids = (0..n_b).flat_map(|_| 0..t).collect();
        let p = tape.embedding(pos, pos_ids)?;
        let mut h = tape.add(e, p)?;

        let spec = AttentionSpec {
            batch: n_b,
            seq: t,
            heads: self.config.num_heads,
            causal: self.config.mode == LmMode::Arm,
            lengths: batch.lengths.clone(),
        };
        for layer in &self.ids.layers {
            let a = self.norm(tape, binder, h, layer.ln1)?;
            let q = self.injected(tape, binder, a, layer.q, layer.sites[0], bank, t)?;
            let k = self.linear(tape, binder, a, layer.k)?;
            let v = self.injected(tape, binder, a, layer.v, layer.sites[1], bank, t)?;
            let att = tape.attention(q, k, v, spec.clone())?;
            let o = self.linear(tape, binder, att, layer.o)?;
            h = tape.add(h, o)?;
            let m = self.norm(tape, binder, h, layer.ln2)?;
            let f = self.injected(tape, binder, m, layer.ff1, layer.sites[2], bank, t)?;
            let f = match self.config.activation {
                Activation::Gelu => tape.gelu(f)?,
                Activation::Relu => tape.relu(f)?,
            };
            let f = self.linear(tape, binder, f, layer.ff2)?;
            h = tape.add(h, f)?;
        }
        self.norm(tape, binder, h, self.ids.ln_f)
    }

    fn linear(&self, tape: &mut Tape, binder: &mut Binder<'_>, x: Var, l: Linear) -> Result<Var> {
        let w = binder.var(tape, l.w);
        let b = binder.var(tape, l.b);
        let y = tape.matmul(x, w)?;
        tape.add_bias(y, b)
    }

    fn norm(&self, tape: &mut Tape, binder: &mut Binder<'_>, x: Var, n: Norm) -> Result<Var> {
        let g = binder.var(tape, n.g);
        let b = binder.var(tape, n.b);
        tape.layer_norm(x, g, b)
    }

    #[allow(clippy::too_many_arguments)]
    fn injected(
        &self,
        tape: &mut Tape,
        binder: &mut Binder<'_>,
        x: Var,
        l: Linear,
        site: Option<usize>,
        bank: Option<(&AdapterBank, &[&CompositionContext])>,
        rows_per_sample: usize,
    ) -> Result<Var> {
        let y = self.linear(tape, binder, x, l)?;
        match (bank, site) {
            (Some((bank, ctxs)), Some(s)) => match bank.apply_batch(tape, binder, s, x, ctxs, rows_per_sample)? {
                Some(delta) => tape.add(y, delta),
                None => Ok(y),
            },
            _ => Ok(y),
        }
    }

    /// Row index of each sample's classification state.
    pub fn cls_rows(&self, batch: &EncodedBatch) -> Vec<usize> {
        batch
            .lengths
            .iter()
            .enumerate()
            .map(|(b, len)| match self.config.cls_position {
                ClsPosition::First => b * batch.seq,
                ClsPosition::Last => b * batch.seq + len - 1,
            })
            .collect()
    }

    pub fn classify_logits(&self, tape: &mut Tape, binder: &mut Binder<'_>, hidden: Var, batch: &EncodedBatch) -> Result<Var> {
        let rows = tape.gather_rows(hidden, self.cls_rows(batch))?;
        self.linear(tape, binder, rows, self.ids.cls)
    }

    /// LM-head logits at the given rows of the hidden state.
    pub fn lm_logits(&self, tape: &mut Tape, binder: &mut Binder<'_>, hidden: Var, rows: Vec<usize>) -> Result<Var> {
        let x = tape.gather_rows(hidden, rows)?;
        self.linear(tape, binder, x, self.ids.lm)
    }

    /// Hidden-state rows and targets for masked positions; empty when nothing
    /// is masked. Positions index the content sequence.
    pub fn mlm_rows(&self, batch: &EncodedBatch, masked: &[&MaskedSequence]) -> Result<(Vec<usize>, Vec<usize>)> {
        self.require_mode(LmMode::Mlm, "forward_mlm")?;
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for (b, m) in masked.iter().enumerate() {
            for (p, o) in m.positions.iter().zip(&m.originals) {
                if p + 1 >= batch.lengths[b] {
                    return Err(Error::InvalidData(format!("mask position {p} outside sample {b}")));
                }
                rows.push(b * batch.seq + p + 1);
                targets.push(*o as usize);
            }
        }
        Ok((rows, targets))
    }

    /// Rows predicting each following token and the tokens themselves.
    pub fn arm_rows(&self, batch: &EncodedBatch) -> Result<(Vec<usize>, Vec<usize>, Vec<(usize, usize)>)> {
        self.require_mode(LmMode::Arm, "forward_arm")?;
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        let mut origins = Vec::new();
        for (b, len) in batch.lengths.iter().enumerate() {
            for pos in 0..len - 1 {
                rows.push(b * batch.seq + pos);
                targets.push(batch.ids[b * batch.seq + pos + 1]);
                origins.push((b, pos));
            }
        }
        Ok((rows, targets, origins))
    }

    fn require_mode(&self, mode: LmMode, op: &str) -> Result<()> {
        if self.config.mode != mode {
            return Err(Error::InvalidConfig(format!(
                "{op} needs {:?} mode, model is {:?}",
                mode, self.config.mode
            )));
        }
        Ok(())
    }

    fn run<T>(&self, f: impl FnOnce(&mut Tape, &mut Binder<'_>) -> Result<T>) -> Result<T> {
        let mut tape = self.new_tape();
        let mut binder = Binder::new(&self.store, GroupSet::empty());
        f(&mut tape, &mut binder)
    }

    /// Class logits, `batch × num_classes`.
    pub fn forward_classify(&self, sequences: &[&[u32]], ctxs: Option<&[&CompositionContext]>) -> Result<Tensor> {
        let batch = self.encode(sequences)?;
        self.run(|tape, binder| {
            let h = self.hidden(tape, binder, &batch, ctxs)?;
            let l = self.classify_logits(tape, binder, h, &batch)?;
            Ok(tape.value(l).clone())
        })
    }

    /// Vocabulary logits at the masked positions, in sample then position
    /// order, with the reconstruction targets. `None` when nothing is masked.
    pub fn forward_mlm(
        &self,
        masked: &[&MaskedSequence],
        ctxs: Option<&[&CompositionContext]>,
    ) -> Result<Option<(Tensor, Vec<usize>)>> {
        let seqs: Vec<&[u32]> = masked.iter().map(|m| m.tokens.as_slice()).collect();
        let batch = self.encode(&seqs)?;
        let (rows, targets) = self.mlm_rows(&batch, masked)?;
        if rows.is_empty() {
            return Ok(None);
        }
        self.run(|tape, binder| {
            let h = self.hidden(tape, binder, &batch, ctxs)?;
            let l = self.lm_logits(tape, binder, h, rows)?;
            Ok(Some((tape.value(l).clone(), targets)))
        })
    }

    pub fn forward_arm(&self, sequences: &[&[u32]], ctxs: Option<&[&CompositionContext]>) -> Result<ArmOutput> {
        let batch = self.encode(sequences)?;
        let (rows, targets, origins) = self.arm_rows(&batch)?;
        if rows.is_empty() {
            return Err(Error::InvalidData("no tokens to predict".into()));
        }
        self.run(|tape, binder| {
            let h = self.hidden(tape, binder, &batch, ctxs)?;
            let l = self.lm_logits(tape, binder, h, rows)?;
            Ok(ArmOutput {
                logits: tape.value(l).clone(),
                targets,
                origins,
            })
        })
    }

    /// Tensor id of the classifier weight and bias, for tests and tooling.
    pub fn head_ids(&self) -> [ParamId; 2] {
        [self.ids.cls.w, self.ids.cls.b]
    }

    /// Tensor ids of the language-model head.
    pub fn lm_head_ids(&self) -> [ParamId; 2] {
        [self.ids.lm.w, self.ids.lm.b]
    }
}
