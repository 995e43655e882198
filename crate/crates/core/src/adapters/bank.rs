use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use super::compose::{ComposedDelta, CompositionContext, Granularity, SlotKey};
use super::module::{init_module, AdapterModule, InitSpec, KronFactor, ModuleKind};
use crate::data::AttributeSchema;
use crate::numerics::{Tape, Var};
use crate::params::{Binder, ParamGroup, ParamId, ParamStore};
use crate::{Error, Result};

/// Form of the per-domain modules.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum FineScheme {
    Lora { rank: usize },
    /// `factor = None` picks [`KronFactor::default_for`] per site.
    Krona { factor: Option<KronFactor> },
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BankConfig {
    /// Rank `r` of the coarse (`c`, `c′`) LoRA modules.
    pub coarse_rank: usize,
    pub fine: FineScheme,
    pub share_c_per_attribute: bool,
    pub share_coarse_across_attributes: bool,
    /// Uniform init bound for `A`/`C`; `None` means `√(6/d_in)`.
    pub init_bound: Option<f64>,
    pub seed: u64,
}

impl BankConfig {
    /// LoRA everywhere, nothing shared.
    pub fn non_decomposed(rank: usize, seed: u64) -> Self {
        BankConfig {
            coarse_rank: rank,
            fine: FineScheme::Lora { rank },
            share_c_per_attribute: false,
            share_coarse_across_attributes: false,
            init_bound: None,
            seed,
        }
    }

    /// Kronecker fine modules with one `C` per attribute and one coarse pair
    /// shared by all attributes.
    pub fn decomposed(rank: usize, seed: u64) -> Self {
        BankConfig {
            coarse_rank: rank,
            fine: FineScheme::Krona { factor: None },
            share_c_per_attribute: true,
            share_coarse_across_attributes: true,
            init_bound: None,
            seed,
        }
    }
}

/// One injected linear layer.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SiteSpec {
    pub name: String,
    pub d_in: usize,
    pub d_out: usize,
    pub coarse: bool,
    pub fine: bool,
}

#[derive(Debug, Clone)]
struct SiteModules {
    spec: SiteSpec,
    coarse: Vec<AdapterModule>,
    align: Vec<AdapterModule>,
    /// `fine[a][f]`, empty when the site carries no fine modules.
    fine: Vec<Vec<AdapterModule>>,
    shared_c: Vec<Option<ParamId>>,
}

/// All `w^(ag)` modules, per injection site.
#[derive(Debug, Clone)]
pub struct AdapterBank {
    config: BankConfig,
    schema: AttributeSchema,
    sites: Vec<SiteModules>,
}

fn fnv(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

impl AdapterBank {
    /// Allocates every module in `store`. Tensor names follow
    /// `"{site}/{attr}/{c|c'|f<id>}/{A|B|C|D}"`; shared coarse modules use the
    /// attribute name `*` and a shared `C` is stored as `"{site}/{attr}/f/C"`.
    pub fn build(store: &mut ParamStore, schema: &AttributeSchema, sites: &[SiteSpec], config: BankConfig) -> Result<Self> {
        schema.validate()?;
        if schema.is_empty() {
            return Err(Error::InvalidConfig("adapter bank needs at least one attribute".into()));
        }
        if config.coarse_rank == 0 {
            return Err(Error::InvalidConfig("coarse rank must be positive".into()));
        }
        let mut names = BTreeMap::new();
        for s in sites {
            if names.insert(s.name.clone(), ()).is_some() || s.name.contains('/') {
                return Err(Error::InvalidConfig(alloc::format!("bad or duplicate site name `{}`", s.name)));
            }
        }
        let spec = |prefix: &str| InitSpec {
            bound: config.init_bound,
            seed: config.seed ^ fnv(prefix),
        };
        let mut built = Vec::with_capacity(sites.len());
        for site in sites {
            let (d_in, d_out) = (site.d_in, site.d_out);
            let mut coarse = Vec::new();
            let mut align = Vec::new();
            if site.coarse {
                let lora = ModuleKind::Lora { rank: config.coarse_rank };
                let make = |attr: &str, tag: &str, group: ParamGroup, store: &mut ParamStore| {
                    let prefix = alloc::format!("{}/{attr}/{tag}", site.name);
                    init_module(store, &prefix, group, lora, d_in, d_out, spec(&prefix), None)
                };
                if config.share_coarse_across_attributes {
                    let c = make("*", "c", ParamGroup::Coarse, store)?;
                    let c2 = make("*", "c'", ParamGroup::Alignment, store)?;
                    coarse = vec![c; schema.len()];
                    align = vec![c2; schema.len()];
                } else {
                    for a in &schema.attributes {
                        coarse.push(make(&a.name, "c", ParamGroup::Coarse, store)?);
                        align.push(make(&a.name, "c'", ParamGroup::Alignment, store)?);
                    }
                }
            }
            let mut fine = Vec::new();
            let mut shared_c = vec![None; schema.len()];
            if site.fine {
                let kind = match config.fine {
                    FineScheme::Lora { rank } => ModuleKind::Lora { rank },
                    FineScheme::Krona { factor } => ModuleKind::Krona {
                        factor: match factor {
                            Some(f) => f,
                            None => KronFactor::default_for(d_in, d_out)?,
                        },
                    },
                };
                for (ai, a) in schema.attributes.iter().enumerate() {
                    if let (ModuleKind::Krona { factor }, true) = (kind, config.share_c_per_attribute) {
                        factor.check(d_in, d_out)?;
                        let name = alloc::format!("{}/{}/f/C", site.name, a.name);
                        let bound = spec(&name).bound_for(d_in);
                        let t = super::module::uniform_tensor(&[factor.c_rows, factor.c_cols], bound, spec(&name).seed);
                        shared_c[ai] = Some(store.insert(name, ParamGroup::Fine, t)?);
                    }
                    let mut per = Vec::with_capacity(a.num_domains);
                    for f in 0..a.num_domains {
                        let prefix = alloc::format!("{}/{}/f{f}", site.name, a.name);
                        per.push(init_module(
                            store,
                            &prefix,
                            ParamGroup::Fine,
                            kind,
                            d_in,
                            d_out,
                            spec(&prefix),
                            shared_c[ai],
                        )?);
                    }
                    fine.push(per);
                }
            }
            built.push(SiteModules {
                spec: site.clone(),
                coarse,
                align,
                fine,
                shared_c,
            });
        }
        Ok(AdapterBank {
            config,
            schema: schema.clone(),
            sites: built,
        })
    }

    /// Rebinds a bank to tensors already present in `store` (e.g. loaded from
    /// a checkpoint) by rebuilding into a scratch store and mapping names.
    pub fn attach(store: &ParamStore, schema: &AttributeSchema, sites: &[SiteSpec], config: BankConfig) -> Result<Self> {
        let mut scratch = ParamStore::new();
        let mut bank = Self::build(&mut scratch, schema, sites, config)?;
        let remap = |id: ParamId| -> Result<ParamId> {
            let e = scratch.entry(id);
            let found = store
                .id(&e.name)
                .ok_or_else(|| Error::State(alloc::format!("missing adapter tensor `{}`", e.name)))?;
            if store.get(found).shape() != e.value.shape() {
                return Err(Error::shape("attach", store.get(found).shape(), e.value.shape()));
            }
            Ok(found)
        };
        let fix = |m: &mut AdapterModule| -> Result<()> {
            match m {
                AdapterModule::Lora(l) => {
                    l.a = remap(l.a)?;
                    l.b = remap(l.b)?;
                }
                AdapterModule::Krona(k) => {
                    k.c = remap(k.c)?;
                    k.d = remap(k.d)?;
                }
            }
            Ok(())
        };
        for s in &mut bank.sites {
            for m in s.coarse.iter_mut().chain(s.align.iter_mut()) {
                fix(m)?;
            }
            for m in s.fine.iter_mut().flatten() {
                fix(m)?;
            }
            for c in s.shared_c.iter_mut().flatten() {
                *c = remap(*c)?;
            }
        }
        Ok(bank)
    }

    pub fn config(&self) -> &BankConfig {
        &self.config
    }

    pub fn schema(&self) -> &AttributeSchema {
        &self.schema
    }

    pub fn sites(&self) -> impl Iterator<Item = &SiteSpec> {
        self.sites.iter().map(|s| &s.spec)
    }

    pub fn site_index(&self, name: &str) -> Option<usize> {
        self.sites.iter().position(|s| s.spec.name == name)
    }

    pub fn site(&self, index: usize) -> &SiteSpec {
        &self.sites[index].spec
    }

    /// The module behind a slot at a site, or `None` when the site carries no
    /// module of that granularity.
    pub fn lookup(&self, site: usize, slot: SlotKey) -> Result<Option<AdapterModule>> {
        let s = &self.sites[site];
        let a = slot.attribute;
        if a >= self.schema.len() {
            return Err(Error::UnknownAttribute(alloc::format!("#{a}")));
        }
        Ok(match slot.granularity {
            Granularity::Coarse => s.coarse.get(a).copied(),
            Granularity::Alignment => s.align.get(a).copied(),
            Granularity::Fine(f) => {
                if f >= self.schema.num_domains(a) {
                    return Err(Error::UnknownDomain {
                        attribute: self.schema.name(a).to_string(),
                        domain: f,
                        num_domains: self.schema.num_domains(a),
                    });
                }
                s.fine.get(a).map(|v| v[f])
            }
        })
    }

    /// The shared `C` factor of an attribute at a site, if any.
    pub fn shared_c(&self, site: usize, attribute: usize) -> Option<ParamId> {
        self.sites[site].shared_c.get(attribute).copied().flatten()
    }

    /// Every distinct parameter tensor the bank references.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for s in &self.sites {
            let mods = s.coarse.iter().chain(s.align.iter()).chain(s.fine.iter().flatten());
            for m in mods {
                ids.extend(m.param_ids());
            }
            ids.extend(s.shared_c.iter().flatten());
        }
        ids.sort();
        ids.dedup();
        ids
    }

    /// Rebinds every slot at every site to the module `slot` names at that
    /// site, so all views share one module. Used to check that averaging
    /// views in weight space and in probability space then coincide.
    pub fn collapse_onto(&mut self, slot: SlotKey) -> Result<()> {
        let n = self.sites.len();
        for site in 0..n {
            let m = self
                .lookup(site, slot)?
                .ok_or_else(|| Error::State(alloc::format!("slot has no module at site `{}`", self.sites[site].spec.name)))?;
            let schema = &self.schema;
            let s = &mut self.sites[site];
            s.coarse = vec![m; schema.len()];
            s.align = vec![m; schema.len()];
            s.fine = schema.attributes.iter().map(|a| vec![m; a.num_domains]).collect();
            s.shared_c = vec![None; schema.len()];
        }
        Ok(())
    }

    /// Fills the zero-initialized factor of every module with uniform noise
    /// in `[-bound, bound]`, giving non-trivial updates for tests and
    /// diagnostics.
    pub fn randomize_zero_factors(&self, store: &mut ParamStore, bound: f64, seed: u64) {
        let mut seen = alloc::collections::BTreeSet::new();
        for s in &self.sites {
            for m in s.coarse.iter().chain(s.align.iter()).chain(s.fine.iter().flatten()) {
                let id = m.param_ids()[1];
                if seen.insert(id) {
                    let name_seed = fnv(&store.entry(id).name);
                    super::module::randomize_second_factor(store, m, bound, seed ^ name_seed);
                }
            }
        }
    }

    /// Scalars actually allocated for the bank.
    pub fn scalar_count(&self, store: &ParamStore) -> usize {
        self.param_ids().iter().map(|id| store.get(*id).numel()).sum()
    }

    /// Resolves a context at a site. Slots without a module at this site are
    /// dropped and the remaining weights are kept as they are.
    pub fn resolve(&self, site: usize, ctx: &CompositionContext) -> Result<ComposedDelta> {
        let spec = &self.sites[site].spec;
        let mut terms = Vec::with_capacity(ctx.len());
        for (slot, w) in ctx.entries() {
            if let Some(m) = self.lookup(site, *slot)? {
                terms.push((m, *w));
            }
        }
        ComposedDelta::new(spec.d_in, spec.d_out, terms)
    }

    /// The adapter contribution at one site for a batch laid out as
    /// consecutive blocks of `rows_per_sample` rows, sample `i` using
    /// `ctxs[i]`. Returns `None` when no sample selects a module here.
    ///
    /// Rows are grouped by module so each module runs once per batch.
    pub fn apply_batch(
        &self,
        tape: &mut Tape,
        binder: &mut Binder<'_>,
        site: usize,
        x: Var,
        ctxs: &[&CompositionContext],
        rows_per_sample: usize,
    ) -> Result<Option<Var>> {
        let (n, d_in) = tape.value(x).dims2("adapter_apply")?;
        let spec = &self.sites[site].spec;
        if d_in != spec.d_in || n != ctxs.len() * rows_per_sample {
            return Err(Error::shape(
                "adapter_apply",
                tape.value(x).shape(),
                &[ctxs.len() * rows_per_sample, spec.d_in],
            ));
        }
        // module → (sample, weight); BTreeMap keyed by param ids keeps the
        // order, and so the floating-point sums, deterministic.
        let mut groups: BTreeMap<[ParamId; 2], (AdapterModule, Vec<(usize, f64)>)> = BTreeMap::new();
        for (i, ctx) in ctxs.iter().enumerate() {
            for (m, w) in self.resolve(site, ctx)?.terms() {
                let g = groups.entry(m.param_ids()).or_insert_with(|| (*m, Vec::new()));
                g.1.push((i, *w));
            }
        }
        let mut out: Option<Var> = None;
        for (_, (module, members)) in groups {
            let everyone = members.len() == ctxs.len();
            let uniform = everyone && members.iter().all(|(_, w)| *w == members[0].1);
            let contribution = if uniform {
                let y = module.apply_tape(tape, binder, x)?;
                let y = tape.scale(y, members[0].1)?;
                match out {
                    None => y,
                    Some(acc) => tape.add(acc, y)?,
                }
            } else {
                let mut rows = Vec::with_capacity(members.len() * rows_per_sample);
                let mut weights = Vec::with_capacity(rows.capacity());
                for (i, w) in &members {
                    for r in 0..rows_per_sample {
                        rows.push(i * rows_per_sample + r);
                        weights.push(*w);
                    }
                }
                let xs = tape.gather_rows(x, rows.clone())?;
                let y = module.apply_tape(tape, binder, xs)?;
                let y = tape.scale_rows(y, weights)?;
                let base = match out {
                    Some(acc) => acc,
                    None => tape.constant(crate::numerics::Tensor::zeros(&[n, spec.d_out])),
                };
                tape.scatter_add_rows(base, y, rows)?
            };
            out = Some(contribution);
        }
        Ok(out)
    }
}
