use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::AdapterModule;
use crate::data::AttributeSchema;
use crate::numerics::{self, Tensor};
use crate::params::ParamStore;
use crate::{Error, Result};

/// Granularity tag of a module slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Granularity {
    /// Coarse view `c`.
    Coarse,
    /// Alignment view `c′`.
    Alignment,
    /// Fine module of one domain.
    Fine(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SlotKey {
    pub attribute: usize,
    pub granularity: Granularity,
}

impl SlotKey {
    pub fn new(attribute: usize, granularity: Granularity) -> Self {
        SlotKey { attribute, granularity }
    }
}

/// How the per-sample set of modules is chosen at prediction time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum CompositionMode {
    /// `c` plus the sample's own fine module, per attribute.
    Fine,
    /// `c` plus `c′` per attribute; needs no domain ids.
    General,
    /// `c′` plus the mean of every fine module, per attribute.
    Avg,
    /// `c′` plus one uniformly drawn fine module, per attribute.
    Rand,
    /// `c` only.
    CoarseOnly,
}

impl CompositionMode {
    pub const ALL: [CompositionMode; 5] = [
        CompositionMode::Fine,
        CompositionMode::General,
        CompositionMode::Avg,
        CompositionMode::Rand,
        CompositionMode::CoarseOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CompositionMode::Fine => "fine",
            CompositionMode::General => "general",
            CompositionMode::Avg => "avg",
            CompositionMode::Rand => "rand",
            CompositionMode::CoarseOnly => "coarse",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s || (s == "coarse_only" && *m == CompositionMode::CoarseOnly))
            .ok_or_else(|| Error::InvalidConfig(alloc::format!("unknown composition mode `{s}`")))
    }
}

/// Which views take part in the fine-grained model; the ablation knobs.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ViewSelection {
    pub coarse: bool,
    /// One flag per attribute, in schema order.
    pub fine: Vec<bool>,
}

impl ViewSelection {
    pub fn all(schema: &AttributeSchema) -> Self {
        ViewSelection {
            coarse: true,
            fine: vec![true; schema.len()],
        }
    }

    pub fn without_coarse(mut self) -> Self {
        self.coarse = false;
        self
    }

    pub fn without_fine(mut self, attribute: usize) -> Self {
        if let Some(f) = self.fine.get_mut(attribute) {
            *f = false;
        }
        self
    }

    fn check(&self, schema: &AttributeSchema) -> Result<()> {
        if self.fine.len() != schema.len() {
            return Err(Error::InvalidConfig(alloc::format!(
                "view selection lists {} attributes, schema has {}",
                self.fine.len(),
                schema.len()
            )));
        }
        if !self.coarse && !self.fine.iter().any(|f| *f) {
            return Err(Error::InvalidConfig("view selection disables every view".into()));
        }
        Ok(())
    }
}

/// A per-sample weighted selection of module slots. Weights sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositionContext {
    entries: Vec<(SlotKey, f64)>,
    fallbacks: usize,
}

impl CompositionContext {
    /// Arbitrary weighted selection; rejects empty sets, negative weights and
    /// weights that do not sum to one.
    pub fn from_entries(entries: Vec<(SlotKey, f64)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidConfig("empty composition context".into()));
        }
        if entries.iter().any(|(_, w)| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidConfig("composition weights must be finite and non-negative".into()));
        }
        let total: f64 = entries.iter().map(|(_, w)| w).sum();
        if libm::fabs(total - 1.0) > 1e-9 {
            return Err(Error::InvalidConfig(alloc::format!("composition weights sum to {total}, not 1")));
        }
        Ok(CompositionContext { entries, fallbacks: 0 })
    }

    /// Uniform average over the given slots.
    pub fn uniform(slots: &[SlotKey]) -> Result<Self> {
        let w = 1.0 / slots.len().max(1) as f64;
        Self::from_entries(slots.iter().map(|s| (*s, w)).collect())
    }

    /// A single module at full weight; one view of the ensemble.
    pub fn single(slot: SlotKey) -> Self {
        CompositionContext {
            entries: vec![(slot, 1.0)],
            fallbacks: 0,
        }
    }

    /// The fine-grained model. A domain id outside the schema is replaced by
    /// the attribute's `c′` module and counted in [`fallbacks`](Self::fallbacks).
    pub fn fine(schema: &AttributeSchema, domains: &[usize], views: &ViewSelection) -> Result<Self> {
        check_domains(schema, domains)?;
        views.check(schema)?;
        let mut slots = Vec::new();
        let mut fallbacks = 0;
        for (a, &dom) in domains.iter().enumerate() {
            if views.coarse {
                slots.push(SlotKey::new(a, Granularity::Coarse));
            }
            if views.fine[a] {
                if dom < schema.num_domains(a) {
                    slots.push(SlotKey::new(a, Granularity::Fine(dom)));
                } else {
                    fallbacks += 1;
                    slots.push(SlotKey::new(a, Granularity::Alignment));
                }
            }
        }
        let mut ctx = Self::uniform(&slots)?;
        ctx.fallbacks = fallbacks;
        Ok(ctx)
    }

    /// The general model `†`: `c` and `c′` for every attribute.
    pub fn general(schema: &AttributeSchema) -> Result<Self> {
        let slots: Vec<_> = (0..schema.len())
            .flat_map(|a| [SlotKey::new(a, Granularity::Coarse), SlotKey::new(a, Granularity::Alignment)])
            .collect();
        Self::uniform(&slots)
    }

    pub fn coarse_only(schema: &AttributeSchema) -> Result<Self> {
        let slots: Vec<_> = (0..schema.len()).map(|a| SlotKey::new(a, Granularity::Coarse)).collect();
        Self::uniform(&slots)
    }

    /// Per attribute, `c′` and the mean of all fine modules each take half of
    /// the attribute's share. An attribute without domains gives its whole
    /// share to `c′`.
    pub fn avg(schema: &AttributeSchema) -> Result<Self> {
        let share = 1.0 / schema.len().max(1) as f64;
        let mut entries = Vec::new();
        for a in 0..schema.len() {
            let n = schema.num_domains(a);
            if n == 0 {
                entries.push((SlotKey::new(a, Granularity::Alignment), share));
                continue;
            }
            entries.push((SlotKey::new(a, Granularity::Alignment), share / 2.0));
            for f in 0..n {
                entries.push((SlotKey::new(a, Granularity::Fine(f)), share / (2.0 * n as f64)));
            }
        }
        Self::from_entries(entries)
    }

    /// `c′` plus one fine module drawn uniformly per attribute.
    pub fn rand<R: Rng + ?Sized>(schema: &AttributeSchema, rng: &mut R) -> Result<Self> {
        let mut slots = Vec::new();
        for a in 0..schema.len() {
            slots.push(SlotKey::new(a, Granularity::Alignment));
            let n = schema.num_domains(a);
            slots.push(if n == 0 {
                SlotKey::new(a, Granularity::Alignment)
            } else {
                SlotKey::new(a, Granularity::Fine(rng.gen_range(0..n)))
            });
        }
        Self::uniform(&slots)
    }

    /// Dispatches on `mode`. `domains` is only read by `Fine`, `rng` only by
    /// `Rand`.
    pub fn for_mode<R: Rng + ?Sized>(
        mode: CompositionMode,
        schema: &AttributeSchema,
        domains: &[usize],
        views: &ViewSelection,
        rng: &mut R,
    ) -> Result<Self> {
        match mode {
            CompositionMode::Fine => Self::fine(schema, domains, views),
            CompositionMode::General => Self::general(schema),
            CompositionMode::Avg => Self::avg(schema),
            CompositionMode::Rand => Self::rand(schema, rng),
            CompositionMode::CoarseOnly => Self::coarse_only(schema),
        }
    }

    pub fn entries(&self) -> &[(SlotKey, f64)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of unseen domain ids replaced by `c′`.
    pub fn fallbacks(&self) -> usize {
        self.fallbacks
    }
}

fn check_domains(schema: &AttributeSchema, domains: &[usize]) -> Result<()> {
    if domains.len() != schema.len() {
        return Err(Error::InvalidData(alloc::format!(
            "sample carries {} domain ids, schema has {} attributes",
            domains.len(),
            schema.len()
        )));
    }
    Ok(())
}

/// The averaged update of one site under one context, kept as a weighted list
/// of modules so it can be applied without forming the dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ComposedDelta {
    terms: Vec<(AdapterModule, f64)>,
    d_in: usize,
    d_out: usize,
}

impl ComposedDelta {
    /// Merges repeated modules (shared slots) into one term.
    pub fn new(d_in: usize, d_out: usize, terms: impl IntoIterator<Item = (AdapterModule, f64)>) -> Result<Self> {
        let mut merged: Vec<(AdapterModule, f64)> = Vec::new();
        for (m, w) in terms {
            if m.dims() != (d_in, d_out) {
                return Err(Error::shape("compose_delta", &[d_in, d_out], &[m.dims().0, m.dims().1]));
            }
            match merged.iter_mut().find(|(n, _)| *n == m) {
                Some(slot) => slot.1 += w,
                None => merged.push((m, w)),
            }
        }
        Ok(ComposedDelta {
            terms: merged,
            d_in,
            d_out,
        })
    }

    pub fn terms(&self) -> &[(AdapterModule, f64)] {
        &self.terms
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.d_in, self.d_out)
    }

    pub fn materialize(&self, store: &ParamStore) -> Result<Tensor> {
        let mut out = Tensor::zeros(&[self.d_in, self.d_out]);
        for (m, w) in &self.terms {
            let d = m.materialize(store)?;
            for (o, v) in out.data_mut().iter_mut().zip(d.data()) {
                *o += w * v;
            }
        }
        Ok(out)
    }

    /// `x · Σ wᵢ Δᵢ` through each module's factored path.
    pub fn apply(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let (n, d) = x.dims2("compose_delta")?;
        if d != self.d_in {
            return Err(Error::shape("compose_delta", x.shape(), &[self.d_in, self.d_out]));
        }
        let mut out = Tensor::zeros(&[n, self.d_out]);
        for (m, w) in &self.terms {
            let y = m.apply(store, x)?;
            for (o, v) in out.data_mut().iter_mut().zip(y.data()) {
                *o += w * v;
            }
        }
        Ok(out)
    }

    /// Convenience for oracles: `x · materialize()`.
    pub fn apply_dense(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        numerics::matmul(x, &self.materialize(store)?)
    }
}
