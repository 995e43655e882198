use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes do not fit the operation.
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// Operation needs a tensor of a different rank.
    Rank {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    /// A NaN or infinity appeared where finite values are required.
    NonFinite { context: String },
    /// Kronecker factors do not divide the layer dimensions.
    Factorization {
        d_in: usize,
        d_out: usize,
        rows: usize,
        cols: usize,
    },
    UnknownAttribute(String),
    UnknownDomain {
        attribute: String,
        domain: usize,
        num_domains: usize,
    },
    InvalidConfig(String),
    InvalidData(String),
    /// Operation called in the wrong training phase or model mode.
    State(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, lhs, rhs } => {
                write!(f, "shape mismatch in {op}: {lhs:?} vs {rhs:?}")
            }
            Error::Rank { op, expected, got } => {
                write!(f, "{op} expects rank {expected}, got rank {got}")
            }
            Error::NonFinite { context } => write!(f, "non-finite value in {context}"),
            Error::Factorization {
                d_in,
                d_out,
                rows,
                cols,
            } => write!(
                f,
                "kronecker factor {rows}x{cols} does not divide layer {d_in}x{d_out}"
            ),
            Error::UnknownAttribute(name) => write!(f, "unknown attribute `{name}`"),
            Error::UnknownDomain {
                attribute,
                domain,
                num_domains,
            } => write!(
                f,
                "domain {domain} out of range for attribute `{attribute}` ({num_domains} domains)"
            ),
            Error::InvalidConfig(msg) => write!(f, "invalid config: {msg}"),
            Error::InvalidData(msg) => write!(f, "invalid data: {msg}"),
            Error::State(msg) => write!(f, "{msg}"),
        }
    }
}

impl core::error::Error for Error {}
