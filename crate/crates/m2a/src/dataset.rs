//! Line-delimited JSON datasets.
//!
//! The first line is a header carrying the attribute schema, the class count
//! and the vocabulary size. Each following line is one sample:
//!
//! ```text
//! {"format":1,"schema":{"attributes":[{"name":"user","num_domains":2}]},"num_classes":5,"vocab_size":50}
//! {"tokens":[4,9,17],"label":3,"attrs":{"user":1}}
//! ```
//!
//! `label` is `null` for unlabeled samples.

use std::collections::BTreeMap;
use std::path::Path;

use m2a_core::data::{AttributeSchema, Dataset, Sample};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::CliError;
use crate::io::{read_text, write_atomic, write_json};

pub const FORMAT_VERSION: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format: u64,
    pub schema: AttributeSchema,
    pub num_classes: usize,
    pub vocab_size: usize,
}

impl Header {
    pub fn of(data: &Dataset) -> Self {
        Header {
            format: FORMAT_VERSION,
            schema: data.schema.clone(),
            num_classes: data.num_classes,
            vocab_size: data.vocab_size,
        }
    }
}

#[derive(Serialize)]
struct Record<'a> {
    tokens: &'a [u32],
    label: Option<usize>,
    attrs: BTreeMap<&'a str, usize>,
}

pub fn to_jsonl(data: &Dataset) -> String {
    let mut out = serde_json::to_string(&Header::of(data)).expect("header serializes");
    out.push('\n');
    for s in &data.samples {
        let attrs = s
            .domains
            .iter()
            .enumerate()
            .map(|(a, &d)| (data.schema.name(a), d))
            .collect();
        let rec = Record {
            tokens: &s.tokens,
            label: s.label,
            attrs,
        };
        out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn save_dataset(data: &Dataset, path: &Path) -> Result<(), CliError> {
    write_atomic(path, to_jsonl(data).as_bytes())
}

/// The schema file written next to generated splits.
pub fn save_schema(data: &Dataset, path: &Path) -> Result<(), CliError> {
    write_json(path, &Header::of(data))
}

pub fn load_dataset(path: &Path) -> Result<Dataset, CliError> {
    parse_jsonl(&read_text(path)?, &path.display().to_string())
}

/// Parses a dataset; `origin` names the source in error messages.
pub fn parse_jsonl(text: &str, origin: &str) -> Result<Dataset, CliError> {
    let err = |line: usize, field: &str, message: String| CliError::Record {
        path: origin.to_string(),
        line,
        field: field.to_string(),
        message,
    };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (hline, htext) = lines.next().ok_or_else(|| err(1, "header", "empty file".into()))?;
    let header: Header = serde_json::from_str(htext).map_err(|e| err(hline + 1, "header", e.to_string()))?;
    if header.format != FORMAT_VERSION {
        return Err(err(hline + 1, "format", format!("unsupported version {}", header.format)));
    }
    header
        .schema
        .validate()
        .map_err(|e| err(hline + 1, "schema", e.to_string()))?;
    let schema = &header.schema;
    let mut samples = Vec::new();
    for (i, l) in lines {
        let n = i + 1;
        let v: Value = serde_json::from_str(l).map_err(|e| err(n, "record", e.to_string()))?;
        let obj = v.as_object().ok_or_else(|| err(n, "record", "expected an object".into()))?;
        if let Some(k) = obj.keys().find(|k| !matches!(k.as_str(), "tokens" | "label" | "attrs")) {
            return Err(err(n, k, "unknown field".into()));
        }
        let tokens = parse_tokens(obj, header.vocab_size).map_err(|m| err(n, "tokens", m))?;
        let label = match obj.get("label") {
            None => return Err(err(n, "label", "missing".into())),
            Some(Value::Null) => None,
            Some(v) => {
                let y = as_index(v).ok_or_else(|| err(n, "label", "expected a non-negative integer".into()))?;
                if y >= header.num_classes {
                    return Err(err(n, "label", format!("{y} outside {} classes", header.num_classes)));
                }
                Some(y)
            }
        };
        let attrs = match obj.get("attrs") {
            Some(Value::Object(m)) => m,
            _ => return Err(err(n, "attrs", "missing or not an object".into())),
        };
        if let Some(k) = attrs.keys().find(|k| schema.index_of(k).is_err()) {
            return Err(err(n, &format!("attrs.{k}"), "attribute not in schema".into()));
        }
        let mut domains = Vec::with_capacity(schema.len());
        for a in 0..schema.len() {
            let name = schema.name(a);
            let field = format!("attrs.{name}");
            let v = attrs.get(name).ok_or_else(|| err(n, &field, "missing".into()))?;
            let d = as_index(v).ok_or_else(|| err(n, &field, "expected a non-negative integer".into()))?;
            if d >= schema.num_domains(a) {
                return Err(err(n, &field, format!("domain {d} outside {} domains", schema.num_domains(a))));
            }
            domains.push(d);
        }
        samples.push(Sample { tokens, label, domains });
    }
    let data = Dataset {
        schema: header.schema,
        num_classes: header.num_classes,
        vocab_size: header.vocab_size,
        samples,
    };
    data.validate()?;
    Ok(data)
}

fn as_index(v: &Value) -> Option<usize> {
    v.as_u64().and_then(|x| usize::try_from(x).ok())
}

fn parse_tokens(obj: &Map<String, Value>, vocab: usize) -> Result<Vec<u32>, String> {
    let arr = match obj.get("tokens") {
        Some(Value::Array(a)) => a,
        _ => return Err("missing or not an array".into()),
    };
    if arr.is_empty() {
        return Err("empty sequence".into());
    }
    arr.iter()
        .enumerate()
        .map(|(j, t)| match t.as_u64() {
            Some(x) if (x as usize) < vocab => Ok(x as u32),
            Some(x) => Err(format!("token {x} at position {j} outside vocabulary of {vocab}")),
            None => Err(format!("position {j} is not a non-negative integer")),
        })
        .collect()
}
