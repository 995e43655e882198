use alloc::string::String;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::numerics::{self, Tape, Tensor, Var};
use crate::params::{Binder, ParamGroup, ParamId, ParamStore};
use crate::{Error, Result};

/// Shape of the Kronecker factors: `C` is `c_rows × c_cols` and `D` is
/// `(d_in / c_rows) × (d_out / c_cols)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct KronFactor {
    pub c_rows: usize,
    pub c_cols: usize,
}

impl KronFactor {
    /// The single-factor form: `C ∈ ℝ^{(d_in/r′)×r′}`, `D ∈ ℝ^{r′×(d_out/r′)}`.
    pub fn from_rank(rank: usize, d_in: usize, d_out: usize) -> Result<Self> {
        if rank == 0 || rank > d_in.min(d_out) || !d_in.is_multiple_of(rank) || !d_out.is_multiple_of(rank) {
            return Err(Error::Factorization {
                d_in,
                d_out,
                rows: if rank == 0 { 0 } else { d_in / rank },
                cols: rank,
            });
        }
        Ok(KronFactor {
            c_rows: d_in / rank,
            c_cols: rank,
        })
    }

    /// Rank that divides both dims and sits closest to `√min(d_in, d_out)`
    /// (ties go to the smaller rank).
    pub fn default_for(d_in: usize, d_out: usize) -> Result<Self> {
        let g = gcd(d_in, d_out);
        let target = libm::sqrt(d_in.min(d_out) as f64);
        let best = (1..=g)
            .filter(|r| g.is_multiple_of(*r))
            .min_by(|a, b| {
                let da = libm::fabs(*a as f64 - target);
                let db = libm::fabs(*b as f64 - target);
                da.partial_cmp(&db).unwrap().then(a.cmp(b))
            })
            .unwrap_or(1);
        Self::from_rank(best, d_in, d_out)
    }

    pub fn check(&self, d_in: usize, d_out: usize) -> Result<()> {
        if self.c_rows == 0 || self.c_cols == 0 || !d_in.is_multiple_of(self.c_rows) || !d_out.is_multiple_of(self.c_cols) {
            return Err(Error::Factorization {
                d_in,
                d_out,
                rows: self.c_rows,
                cols: self.c_cols,
            });
        }
        Ok(())
    }

    pub fn d_shape(&self, d_in: usize, d_out: usize) -> (usize, usize) {
        (d_in / self.c_rows, d_out / self.c_cols)
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModuleKind {
    Lora { rank: usize },
    Krona { factor: KronFactor },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoraModule {
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
    pub d_in: usize,
    pub d_out: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KronaModule {
    pub c: ParamId,
    pub d: ParamId,
    pub factor: KronFactor,
    pub d_in: usize,
    pub d_out: usize,
}

/// One weight update `w^(ag)`, referencing tensors held in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdapterModule {
    Lora(LoraModule),
    Krona(KronaModule),
}

impl AdapterModule {
    pub fn dims(&self) -> (usize, usize) {
        match self {
            AdapterModule::Lora(m) => (m.d_in, m.d_out),
            AdapterModule::Krona(m) => (m.d_in, m.d_out),
        }
    }

    /// The two tensors of the module: `(A, B)` or `(C, D)`.
    pub fn param_ids(&self) -> [ParamId; 2] {
        match self {
            AdapterModule::Lora(m) => [m.a, m.b],
            AdapterModule::Krona(m) => [m.c, m.d],
        }
    }

    /// The dense `d_in × d_out` delta.
    pub fn materialize(&self, store: &ParamStore) -> Result<Tensor> {
        match self {
            AdapterModule::Lora(m) => numerics::matmul(store.get(m.a), store.get(m.b)),
            AdapterModule::Krona(m) => numerics::kron(store.get(m.c), store.get(m.d)),
        }
    }

    /// `x · delta` without building the delta.
    pub fn apply(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        match self {
            AdapterModule::Lora(m) => {
                let h = numerics::matmul(x, store.get(m.a))?;
                numerics::matmul(&h, store.get(m.b))
            }
            AdapterModule::Krona(m) => numerics::apply_kron_factored(store.get(m.c), store.get(m.d), x),
        }
    }

    pub fn apply_tape(&self, tape: &mut Tape, binder: &mut Binder<'_>, x: Var) -> Result<Var> {
        match self {
            AdapterModule::Lora(m) => {
                let a = binder.var(tape, m.a);
                let b = binder.var(tape, m.b);
                let h = tape.matmul(x, a)?;
                tape.matmul(h, b)
            }
            AdapterModule::Krona(m) => {
                let c = binder.var(tape, m.c);
                let d = binder.var(tape, m.d);
                tape.kron_apply(c, d, x)
            }
        }
    }
}

/// Initialization of a fresh module: the first factor is uniform in
/// `[-bound, bound]`, the second is zero, so the initial delta is zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitSpec {
    /// Defaults to `√(6 / d_in)` when `None`.
    pub bound: Option<f64>,
    pub seed: u64,
}

impl InitSpec {
    pub fn bound_for(&self, d_in: usize) -> f64 {
        self.bound.unwrap_or_else(|| libm::sqrt(6.0 / d_in as f64))
    }
}

pub(crate) fn uniform_tensor(shape: &[usize], bound: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| if bound > 0.0 { rng.gen_range(-bound..=bound) } else { 0.0 })
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// Allocates a fresh module in `store` under `prefix` ("…/A", "…/B" or
/// "…/C", "…/D"). Passing `shared_c` reuses an existing `C` tensor.
pub fn init_module(
    store: &mut ParamStore,
    prefix: &str,
    group: ParamGroup,
    kind: ModuleKind,
    d_in: usize,
    d_out: usize,
    init: InitSpec,
    shared_c: Option<ParamId>,
) -> Result<AdapterModule> {
    if d_in == 0 || d_out == 0 {
        return Err(Error::InvalidConfig("module dims must be positive".into()));
    }
    let bound = init.bound_for(d_in);
    let name = |suffix: &str| -> String { alloc::format!("{prefix}/{suffix}") };
    match kind {
        ModuleKind::Lora { rank } => {
            if rank == 0 || rank > d_in.min(d_out) {
                return Err(Error::InvalidConfig(alloc::format!(
                    "LoRA rank {rank} must lie in 1..={}",
                    d_in.min(d_out)
                )));
            }
            let a = store.insert(name("A"), group, uniform_tensor(&[d_in, rank], bound, init.seed))?;
            let b = store.insert(name("B"), group, Tensor::zeros(&[rank, d_out]))?;
            Ok(AdapterModule::Lora(LoraModule {
                a,
                b,
                rank,
                d_in,
                d_out,
            }))
        }
        ModuleKind::Krona { factor } => {
            factor.check(d_in, d_out)?;
            let c = match shared_c {
                Some(id) => {
                    if store.get(id).shape() != [factor.c_rows, factor.c_cols] {
                        return Err(Error::shape("shared_c", store.get(id).shape(), &[factor.c_rows, factor.c_cols]));
                    }
                    id
                }
                None => store.insert(
                    name("C"),
                    group,
                    uniform_tensor(&[factor.c_rows, factor.c_cols], bound, init.seed),
                )?,
            };
            let (s, t) = factor.d_shape(d_in, d_out);
            let d = store.insert(name("D"), group, Tensor::zeros(&[s, t]))?;
            Ok(AdapterModule::Krona(KronaModule {
                c,
                d,
                factor,
                d_in,
                d_out,
            }))
        }
    }
}

/// Overwrites the zero factor of a module with uniform noise.
pub(crate) fn randomize_second_factor(store: &mut ParamStore, module: &AdapterModule, bound: f64, seed: u64) {
    let id = module.param_ids()[1];
    let shape = store.get(id).shape().to_vec();
    store.set(id, uniform_tensor(&shape, bound, seed)).expect("same shape");
}
