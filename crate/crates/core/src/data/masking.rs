use alloc::vec::Vec;

use rand::seq::index::sample as sample_indices;
use rand::Rng;

use super::MASK_TOKEN;
use crate::{Error, Result};

/// How chosen positions are corrupted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum MaskStrategy {
    /// Every chosen position becomes the mask token.
    #[default]
    Replace,
    /// 80% mask token, 10% random content token, 10% unchanged.
    Bert { first_content: u32, vocab_size: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedSequence {
    pub tokens: Vec<u32>,
    /// Masked positions in increasing order.
    pub positions: Vec<usize>,
    /// Original tokens at `positions`: the reconstruction targets.
    pub originals: Vec<u32>,
}

/// Masks `round(ratio · len)` distinct positions chosen uniformly at random.
pub fn mask_tokens<R: Rng + ?Sized>(
    tokens: &[u32],
    ratio: f64,
    strategy: MaskStrategy,
    rng: &mut R,
) -> Result<MaskedSequence> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::InvalidConfig(alloc::format!("mask ratio {ratio} outside (0, 1]")));
    }
    if tokens.is_empty() {
        return Err(Error::InvalidData("cannot mask an empty sequence".into()));
    }
    let count = libm::round(ratio * tokens.len() as f64) as usize;
    let mut positions = sample_indices(rng, tokens.len(), count).into_vec();
    positions.sort_unstable();
    let mut out = tokens.to_vec();
    let originals = positions.iter().map(|&p| tokens[p]).collect();
    for &p in &positions {
        out[p] = match strategy {
            MaskStrategy::Replace => MASK_TOKEN,
            MaskStrategy::Bert {
                first_content,
                vocab_size,
            } => {
                let u: f64 = rng.gen();
                if u < 0.8 {
                    MASK_TOKEN
                } else if u < 0.9 {
                    rng.gen_range(first_content..vocab_size)
                } else {
                    tokens[p]
                }
            }
        };
    }
    Ok(MaskedSequence {
        tokens: out,
        positions,
        originals,
    })
}
