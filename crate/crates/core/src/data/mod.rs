//! Attribute-annotated samples, the partition function, token masking and a
//! synthetic non-IID corpus generator.

mod masking;
mod schema;
mod synthetic;

pub use masking::{mask_tokens, MaskStrategy, MaskedSequence};
pub use schema::{AttributeSchema, AttributeSpec, Dataset, Sample};
pub use synthetic::{generate_synthetic, AttributeSynth, SyntheticConfig, SyntheticSplits};

/// Reserved token ids. Content tokens start at [`FIRST_CONTENT_TOKEN`].
pub const PAD_TOKEN: u32 = 0;
/// Classification anchor prepended to every sequence (`[CLS]` / `<s>`).
pub const CLS_TOKEN: u32 = 1;
pub const MASK_TOKEN: u32 = 2;
pub const FIRST_CONTENT_TOKEN: u32 = 3;
