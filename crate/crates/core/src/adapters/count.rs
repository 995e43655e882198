use alloc::vec::Vec;

use crate::{Error, Result};

/// Inputs of the external-parameter formulas for one injected layer.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CountSchema {
    /// `|a|_f` per attribute.
    pub domains: Vec<usize>,
    pub d_in: usize,
    pub d_out: usize,
    pub rank: usize,
    pub decomposed: bool,
}

/// Adapter scalars for one layer, excluding the frozen weight.
///
/// * non-decomposed: `Σ_a (|a|_f + 2)·r·(d_in + d_out)`
/// * decomposed: `Σ_a (d_in + |a|_f·d_out) + 2·r·(d_in + d_out)`
pub fn param_count(schema: &CountSchema) -> Result<u64> {
    let CountSchema {
        domains,
        d_in,
        d_out,
        rank,
        decomposed,
    } = schema;
    if domains.is_empty() || *d_in == 0 || *d_out == 0 || *rank == 0 {
        return Err(Error::InvalidConfig(
            "parameter count needs at least one attribute and positive dims and rank".into(),
        ));
    }
    let (d_in, d_out, r) = (*d_in as u64, *d_out as u64, *rank as u64);
    let lora = r * (d_in + d_out);
    Ok(if *decomposed {
        domains.iter().map(|&f| d_in + f as u64 * d_out).sum::<u64>() + 2 * lora
    } else {
        domains.iter().map(|&f| (f as u64 + 2) * lora).sum()
    })
}
