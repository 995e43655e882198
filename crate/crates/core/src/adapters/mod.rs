//! Low-rank weight updates and their composition.
//!
//! A module is either a LoRA pair (`A·B`) or a Kronecker pair (`C ⊗ D`).
//! The [`AdapterBank`] owns one module per (injection site, attribute,
//! granularity) and resolves the per-sample [`CompositionContext`] into the
//! modules whose deltas are averaged into each injected linear layer.

mod bank;
mod compose;
mod count;
mod module;

pub use bank::{AdapterBank, BankConfig, FineScheme, SiteSpec};
pub use compose::{CompositionContext, CompositionMode, ComposedDelta, Granularity, SlotKey, ViewSelection};
pub use count::{param_count, CountSchema};
pub use module::{init_module, AdapterModule, InitSpec, KronFactor, KronaModule, LoraModule, ModuleKind};

#[cfg(test)]
mod tests;
