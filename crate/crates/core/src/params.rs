//! Named parameter storage shared by the backbone, the adapter bank and the
//! optimizer.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::numerics::{Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which optimizer group a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum ParamGroup {
    /// Frozen backbone weights (the pretrained model).
    Base,
    /// Coarse-view modules `c`.
    Coarse,
    /// Alignment modules `c′` used by the general model.
    Alignment,
    /// Per-domain fine modules (and their shared factors).
    Fine,
    /// Task heads trained during adaptation.
    Head,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::Base,
        ParamGroup::Coarse,
        ParamGroup::Alignment,
        ParamGroup::Fine,
        ParamGroup::Head,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Base => "base",
            ParamGroup::Coarse => "coarse",
            ParamGroup::Alignment => "alignment",
            ParamGroup::Fine => "fine",
            ParamGroup::Head => "head",
        }
    }
}

/// A set of parameter groups, e.g. the groups receiving updates in a phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct GroupSet(u8);

impl GroupSet {
    pub const fn empty() -> Self {
        GroupSet(0)
    }

    pub fn of(groups: &[ParamGroup]) -> Self {
        groups.iter().fold(GroupSet(0), |s, g| s.with(*g))
    }

    pub const fn with(self, g: ParamGroup) -> Self {
        GroupSet(self.0 | (1 << g as u8))
    }

    pub const fn contains(self, g: ParamGroup) -> bool {
        self.0 & (1 << g as u8) != 0
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::InvalidConfig(alloc::format!("duplicate parameter `{name}`")));
        }
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry { name, group, value });
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    /// Replaces a parameter value, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let slot = &mut self.entries[id.0];
        if slot.value.shape() != value.shape() {
            return Err(Error::shape("set_param", slot.value.shape(), value.shape()));
        }
        slot.value = value;
        Ok(())
    }

    /// Number of scalars held by parameters in `groups`.
    pub fn scalar_count(&self, groups: GroupSet) -> usize {
        self.entries
            .iter()
            .filter(|e| groups.contains(e.group))
            .map(|e| e.value.numel())
            .sum()
    }

    /// Order-sensitive FNV-1a digest over the exact bits of every parameter
    /// in `groups`; equal digests mean bit-identical values (up to hash
    /// collisions).
    pub fn checksum(&self, groups: GroupSet) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for b in bytes {
                h ^= *b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for e in self.entries.iter().filter(|e| groups.contains(e.group)) {
            feed(e.name.as_bytes());
            for v in e.value.data() {
                feed(&v.to_bits().to_le_bytes());
            }
        }
        h
    }

    /// Copies the values of every parameter in `groups` for later restore.
    pub fn snapshot(&self, groups: GroupSet) -> Snapshot {
        Snapshot(
            self.iter()
                .filter(|(_, e)| groups.contains(e.group))
                .map(|(id, e)| (id, e.value.clone()))
                .collect(),
        )
    }

    pub fn restore(&mut self, snap: &Snapshot) {
        for (id, v) in &snap.0 {
            self.entries[id.0].value = v.clone();
        }
    }
}

#[derive(Debug, Clone)]
pub struct Snapshot(Vec<(ParamId, Tensor)>);

/// Lazily places parameters on a tape, marking only the trainable groups as
/// requiring gradients.
pub struct Binder<'a> {
    store: &'a ParamStore,
    trainable: GroupSet,
    vars: BTreeMap<ParamId, Var>,
}

impl<'a> Binder<'a> {
    pub fn new(store: &'a ParamStore, trainable: GroupSet) -> Self {
        Binder {
            store,
            trainable,
            vars: BTreeMap::new(),
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn var(&mut self, tape: &mut Tape, id: ParamId) -> Var {
        if let Some(v) = self.vars.get(&id) {
            return *v;
        }
        let e = self.store.entry(id);
        let v = tape.leaf(e.value.clone(), self.trainable.contains(e.group));
        self.vars.insert(id, v);
        v
    }

    /// Parameters that were placed on the tape as trainable leaves.
    pub fn trainable_vars(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.vars
            .iter()
            .filter(|(id, _)| self.trainable.contains(self.store.entry(**id).group))
            .map(|(id, v)| (*id, *v))
    }
}
