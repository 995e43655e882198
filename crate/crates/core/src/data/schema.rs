use alloc::string::String;
use alloc::vec::Vec;

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AttributeSpec {
    pub name: String,
    /// Number of fine-grained domains; ids are dense in `0..num_domains`.
    pub num_domains: usize,
}

/// Ordered attributes through which every sample is viewed.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AttributeSchema {
    pub attributes: Vec<AttributeSpec>,
}

impl AttributeSchema {
    pub fn new(attributes: Vec<AttributeSpec>) -> Result<Self> {
        let s = AttributeSchema { attributes };
        s.validate()?;
        Ok(s)
    }

    pub fn from_pairs(pairs: &[(&str, usize)]) -> Result<Self> {
        Self::new(
            pairs
                .iter()
                .map(|(n, d)| AttributeSpec {
                    name: (*n).into(),
                    num_domains: *d,
                })
                .collect(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        for (i, a) in self.attributes.iter().enumerate() {
            if a.name.is_empty() {
                return Err(Error::InvalidConfig("attribute with empty name".into()));
            }
            if self.attributes[..i].iter().any(|b| b.name == a.name) {
                return Err(Error::InvalidConfig(alloc::format!("duplicate attribute `{}`", a.name)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.attributes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attributes.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.attributes
            .iter()
            .position(|a| a.name == name)
            .ok_or_else(|| Error::UnknownAttribute(name.into()))
    }

    pub fn num_domains(&self, attribute: usize) -> usize {
        self.attributes[attribute].num_domains
    }

    pub fn name(&self, attribute: usize) -> &str {
        &self.attributes[attribute].name
    }
}

/// One text sample: content tokens (without the classification anchor), an
/// optional class label, and one domain id per schema attribute.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Sample {
    pub tokens: Vec<u32>,
    /// `None` for unlabeled text, which only feeds the generation objective.
    pub label: Option<usize>,
    /// Domain assignment per attribute, in schema order.
    pub domains: Vec<usize>,
}

impl Sample {
    /// The fine-grained domain this sample belongs to under `attribute`.
    pub fn partition(&self, schema: &AttributeSchema, attribute: &str) -> Result<usize> {
        let a = schema.index_of(attribute)?;
        self.domains
            .get(a)
            .copied()
            .ok_or_else(|| Error::InvalidData(alloc::format!("sample lacks attribute `{attribute}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Dataset {
    pub schema: AttributeSchema,
    pub num_classes: usize,
    pub vocab_size: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Checks every sample against the schema, class count and vocabulary.
    pub fn validate(&self) -> Result<()> {
        self.schema.validate()?;
        for (i, s) in self.samples.iter().enumerate() {
            if s.domains.len() != self.schema.len() {
                return Err(Error::InvalidData(alloc::format!(
                    "sample {i} has {} attribute assignments, schema has {}",
                    s.domains.len(),
                    self.schema.len()
                )));
            }
            if s.tokens.is_empty() {
                return Err(Error::InvalidData(alloc::format!("sample {i} has no tokens")));
            }
            if let Some(t) = s.tokens.iter().find(|&&t| t as usize >= self.vocab_size) {
                return Err(Error::InvalidData(alloc::format!("sample {i}: token {t} outside vocabulary")));
            }
            if let Some(l) = s.label.filter(|&l| l >= self.num_classes) {
                return Err(Error::InvalidData(alloc::format!("sample {i}: label {l} outside class range")));
            }
        }
        Ok(())
    }

    /// Sample indices grouped by domain for one attribute. Together the
    /// groups form a disjoint cover of the dataset.
    pub fn sub_datasets(&self, attribute: usize) -> Vec<Vec<usize>> {
        let mut groups = alloc::vec![Vec::new(); self.schema.num_domains(attribute)];
        for (i, s) in self.samples.iter().enumerate() {
            if let Some(g) = groups.get_mut(s.domains[attribute]) {
                g.push(i);
            }
        }
        groups
    }

    pub fn labeled(&self) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(|s| s.label.is_some())
    }
}
