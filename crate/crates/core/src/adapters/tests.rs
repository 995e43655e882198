use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::module::{randomize_second_factor, uniform_tensor};
use super::*;
use crate::data::AttributeSchema;
use crate::numerics::{Tape, Tensor};
use crate::params::{Binder, GroupSet, ParamGroup, ParamStore};

fn site(name: &str, d_in: usize, d_out: usize, fine: bool) -> SiteSpec {
    SiteSpec {
        name: name.into(),
        d_in,
        d_out,
        coarse: true,
        fine,
    }
}

fn schema_of(domains: &[usize]) -> AttributeSchema {
    let names: Vec<String> = (0..domains.len()).map(|i| alloc::format!("attr{i}")).collect();
    let pairs: Vec<(&str, usize)> = names.iter().map(|s| s.as_str()).zip(domains.iter().copied()).collect();
    AttributeSchema::from_pairs(&pairs).unwrap()
}

fn allocated(domains: &[usize], d_in: usize, d_out: usize, r: usize, decomposed: bool) -> usize {
    let schema = schema_of(domains);
    let cfg = if decomposed {
        BankConfig::decomposed(r, 0)
    } else {
        BankConfig::non_decomposed(r, 0)
    };
    let mut store = ParamStore::new();
    let bank = AdapterBank::build(&mut store, &schema, &[site("s", d_in, d_out, true)], cfg).unwrap();
    assert_eq!(bank.scalar_count(&store), store.scalar_count(GroupSet::of(&ParamGroup::ALL)));
    bank.scalar_count(&store)
}

fn count(domains: &[usize], d_in: usize, d_out: usize, r: usize, decomposed: bool) -> u64 {
    param_count(&CountSchema {
        domains: domains.to_vec(),
        d_in,
        d_out,
        rank: r,
        decomposed,
    })
    .unwrap()
}

fn perturb(store: &mut ParamStore, bank: &AdapterBank, seed: u64) {
    bank.randomize_zero_factors(store, 0.5, seed);
}

#[test]
fn worked_example_counts() {
    assert_eq!(count(&[4, 3], 32, 32, 8, false), 5632);
    assert_eq!(count(&[4, 3], 32, 32, 8, true), 1312);
    assert_eq!(allocated(&[4, 3], 32, 32, 8, false), 5632);
    assert_eq!(allocated(&[4, 3], 32, 32, 8, true), 1312);
}

#[test]
fn zero_domain_attribute_counts() {
    let d = 16;
    let r = 2;
    assert_eq!(count(&[0], d, d, r, true), (d + 2 * r * (d + d)) as u64);
    assert_eq!(allocated(&[0], d, d, r, true) as u64, count(&[0], d, d, r, true));
    assert_eq!(allocated(&[0], d, d, r, false) as u64, count(&[0], d, d, r, false));
}

#[test]
fn decomposed_is_smaller_at_full_size() {
    for f in [1usize, 2, 10, 1631, 1633, 100_000] {
        assert!(count(&[f], 768, 768, 128, true) < count(&[f], 768, 768, 128, false));
    }
    assert!(count(&[1631, 1633], 768, 768, 128, true) < count(&[1631, 1633], 768, 768, 128, false));
    assert!(param_count(&CountSchema {
        domains: vec![],
        d_in: 8,
        d_out: 8,
        rank: 1,
        decomposed: true
    })
    .is_err());
}

#[test]
fn sharing_links_fine_modules() {
    let schema = schema_of(&[3, 2]);
    let mut store = ParamStore::new();
    let bank = AdapterBank::build(&mut store, &schema, &[site("s", 8, 8, true)], BankConfig::decomposed(2, 5)).unwrap();
    perturb(&mut store, &bank, 1);
    let fine = |store: &ParamStore, a: usize, f: usize| {
        bank.lookup(0, SlotKey::new(a, Granularity::Fine(f)))
            .unwrap()
            .unwrap()
            .materialize(store)
            .unwrap()
    };
    let before: Vec<Tensor> = (0..3).map(|f| fine(&store, 0, f)).chain((0..2).map(|f| fine(&store, 1, f))).collect();

    let c = bank.shared_c(0, 0).unwrap();
    store.get_mut(c).data_mut()[0] += 1.0;
    for f in 0..3 {
        assert_ne!(fine(&store, 0, f), before[f]);
    }
    for f in 0..2 {
        assert_eq!(fine(&store, 1, f), before[3 + f]);
    }

    let d = bank.lookup(0, SlotKey::new(1, Granularity::Fine(0))).unwrap().unwrap().param_ids()[1];
    store.get_mut(d).data_mut()[0] += 1.0;
    assert_ne!(fine(&store, 1, 0), before[3]);
    assert_eq!(fine(&store, 1, 1), before[4]);

    // One coarse pair serves every attribute.
    let c0 = bank.lookup(0, SlotKey::new(0, Granularity::Coarse)).unwrap();
    let c1 = bank.lookup(0, SlotKey::new(1, Granularity::Coarse)).unwrap();
    assert_eq!(c0, c1);
    let a0 = bank.lookup(0, SlotKey::new(0, Granularity::Alignment)).unwrap();
    assert_ne!(a0, c0);
}

#[test]
fn unshared_bank_keeps_modules_apart() {
    let schema = schema_of(&[2, 2]);
    let mut store = ParamStore::new();
    let bank = AdapterBank::build(&mut store, &schema, &[site("s", 8, 8, true)], BankConfig::non_decomposed(2, 5)).unwrap();
    let c0 = bank.lookup(0, SlotKey::new(0, Granularity::Coarse)).unwrap();
    let c1 = bank.lookup(0, SlotKey::new(1, Granularity::Coarse)).unwrap();
    assert_ne!(c0, c1);
    assert!(bank.shared_c(0, 0).is_none());
    assert!(store.id("s/attr0/f1/A").is_some());
    assert!(store.id("s/attr1/c'/B").is_some());
}

#[test]
fn lookup_errors_and_missing_sites() {
    let schema = schema_of(&[2]);
    let mut store = ParamStore::new();
    let bank = AdapterBank::build(
        &mut store,
        &schema,
        &[site("q", 8, 8, true), site("ff1", 8, 16, false)],
        BankConfig::decomposed(2, 0),
    )
    .unwrap();
    assert!(matches!(
        bank.lookup(0, SlotKey::new(0, Granularity::Fine(2))),
        Err(crate::Error::UnknownDomain { .. })
    ));
    assert!(bank.lookup(0, SlotKey::new(3, Granularity::Coarse)).is_err());
    assert_eq!(bank.lookup(1, SlotKey::new(0, Granularity::Fine(0))).unwrap(), None);
    assert!(store.id("q/attr0/f/C").is_some());
    assert!(store.id("ff1/*/c/A").is_some());
}

#[test]
fn contexts_have_unit_weight() {
    let schema = schema_of(&[4, 3]);
    let views = ViewSelection::all(&schema);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for mode in CompositionMode::ALL {
        let ctx = CompositionContext::for_mode(mode, &schema, &[1, 2], &views, &mut rng).unwrap();
        let total: f64 = ctx.entries().iter().map(|(_, w)| w).sum();
        assert!((total - 1.0).abs() < 1e-12, "{mode:?}");
        assert_eq!(ctx.fallbacks(), 0);
    }
    let fine = CompositionContext::fine(&schema, &[1, 2], &views).unwrap();
    assert_eq!(fine.len(), 4);
    assert!(fine.entries().iter().all(|(_, w)| *w == 0.25));
    let avg = CompositionContext::avg(&schema).unwrap();
    assert_eq!(avg.entries()[0], (SlotKey::new(0, Granularity::Alignment), 0.25));
    assert_eq!(avg.entries()[1], (SlotKey::new(0, Granularity::Fine(0)), 0.0625));
    assert_eq!(CompositionMode::parse("coarse").unwrap(), CompositionMode::CoarseOnly);
    assert!(CompositionMode::parse("bogus").is_err());
}

#[test]
fn unseen_domain_falls_back_to_alignment() {
    let schema = schema_of(&[4, 3]);
    let views = ViewSelection::all(&schema);
    let ctx = CompositionContext::fine(&schema, &[9, 2], &views).unwrap();
    assert_eq!(ctx.fallbacks(), 1);
    assert!(ctx.entries().iter().any(|(s, _)| *s == SlotKey::new(0, Granularity::Alignment)));
    assert!(CompositionContext::fine(&schema, &[1], &views).is_err());
}

#[test]
fn ablated_views() {
    let schema = schema_of(&[4, 3]);
    let no_user = ViewSelection::all(&schema).without_fine(0);
    let ctx = CompositionContext::fine(&schema, &[1, 2], &no_user).unwrap();
    assert_eq!(ctx.len(), 3);
    assert!(!ctx.entries().iter().any(|(s, _)| s.attribute == 0 && matches!(s.granularity, Granularity::Fine(_))));
    let no_coarse = ViewSelection::all(&schema).without_coarse();
    let ctx = CompositionContext::fine(&schema, &[1, 2], &no_coarse).unwrap();
    assert_eq!(ctx.len(), 2);
    let nothing = no_coarse.without_fine(0).without_fine(1);
    assert!(CompositionContext::fine(&schema, &[1, 2], &nothing).is_err());
}

#[test]
fn rand_is_reproducible() {
    let schema = schema_of(&[5, 5]);
    let draw = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..20).map(|_| CompositionContext::rand(&schema, &mut rng).unwrap()).collect::<Vec<_>>()
    };
    assert_eq!(draw(3), draw(3));
    assert_ne!(draw(3), draw(4));
}

fn lora_pair(store: &mut ParamStore, name: &str, d: usize, seed: u64) -> AdapterModule {
    let m = init_module(
        store,
        name,
        ParamGroup::Fine,
        ModuleKind::Lora { rank: 3 },
        d,
        d,
        InitSpec { bound: None, seed },
        None,
    )
    .unwrap();
    randomize_second_factor(store, &m, 0.5, seed + 100);
    m
}

#[test]
fn mean_of_identical_modules_is_the_module() {
    let mut store = ParamStore::new();
    let m = lora_pair(&mut store, "m", 6, 1);
    let delta = ComposedDelta::new(6, 6, [(m, 0.25), (m, 0.25), (m, 0.5)]).unwrap();
    let want = m.materialize(&store).unwrap();
    assert!(delta.materialize(&store).unwrap().max_abs_diff(&want).unwrap() < 1e-15);
}

#[test]
fn negated_copies_cancel() {
    let mut store = ParamStore::new();
    let m = lora_pair(&mut store, "m", 6, 1);
    let n = lora_pair(&mut store, "n", 6, 2);
    let [ma, mb] = m.param_ids();
    let [na, nb] = n.param_ids();
    store.set(na, store.get(ma).clone()).unwrap();
    store.set(nb, store.get(mb).map(|v| -v)).unwrap();
    let delta = ComposedDelta::new(6, 6, [(m, 0.5), (n, 0.5)]).unwrap();
    let x = uniform_tensor(&[4, 6], 1.0, 3);
    assert_eq!(delta.apply(&store, &x).unwrap().max_abs(), 0.0);
    assert_eq!(delta.materialize(&store).unwrap().max_abs(), 0.0);
}

#[test]
fn three_module_mean_matches_materialized() {
    let mut store = ParamStore::new();
    let f = KronFactor::from_rank(4, 16, 16).unwrap();
    let lora = lora_pair(&mut store, "a", 16, 1);
    let k1 = init_module(
        &mut store,
        "k1",
        ParamGroup::Fine,
        ModuleKind::Krona { factor: f },
        16,
        16,
        InitSpec { bound: None, seed: 2 },
        None,
    )
    .unwrap();
    randomize_second_factor(&mut store, &k1, 0.5, 7);
    let k2 = init_module(
        &mut store,
        "k2",
        ParamGroup::Fine,
        ModuleKind::Krona { factor: f },
        16,
        16,
        InitSpec { bound: None, seed: 3 },
        None,
    )
    .unwrap();
    randomize_second_factor(&mut store, &k2, 0.5, 8);
    let third = 1.0 / 3.0;
    let delta = ComposedDelta::new(16, 16, [(lora, third), (k1, third), (k2, third)]).unwrap();

    let mut mean = Tensor::zeros(&[16, 16]);
    for m in [lora, k1, k2] {
        let d = m.materialize(&store).unwrap();
        for (o, v) in mean.data_mut().iter_mut().zip(d.data()) {
            *o += v / 3.0;
        }
    }
    let got = delta.materialize(&store).unwrap();
    assert!(got.max_abs_diff(&mean).unwrap() <= 1e-10 * mean.max_abs());
    let x = uniform_tensor(&[5, 16], 1.0, 4);
    let fast = delta.apply(&store, &x).unwrap();
    let slow = crate::numerics::matmul(&x, &mean).unwrap();
    assert!(fast.max_abs_diff(&slow).unwrap() <= 1e-10 * slow.max_abs());
}

#[test]
fn mixed_dims_are_rejected() {
    let mut store = ParamStore::new();
    let m = lora_pair(&mut store, "m", 6, 1);
    assert!(ComposedDelta::new(6, 8, [(m, 1.0)]).is_err());
}

#[test]
fn batched_application_matches_per_sample() {
    let schema = schema_of(&[3, 2]);
    let mut store = ParamStore::new();
    let bank = AdapterBank::build(&mut store, &schema, &[site("s", 8, 8, true)], BankConfig::decomposed(2, 9)).unwrap();
    perturb(&mut store, &bank, 2);
    let views = ViewSelection::all(&schema);
    let doms = [[0, 1], [2, 0], [0, 1], [7, 1]];
    let mut ctxs: Vec<CompositionContext> = doms
        .iter()
        .map(|d| CompositionContext::fine(&schema, d, &views).unwrap())
        .collect();
    ctxs.push(CompositionContext::general(&schema).unwrap());
    let rows = 3;
    let x = uniform_tensor(&[ctxs.len() * rows, 8], 1.0, 11);

    let mut tape = Tape::new();
    let mut binder = Binder::new(&store, GroupSet::empty());
    let xv = tape.constant(x.clone());
    let refs: Vec<&CompositionContext> = ctxs.iter().collect();
    let y = bank.apply_batch(&mut tape, &mut binder, 0, xv, &refs, rows).unwrap().unwrap();
    let got = tape.value(y).clone();

    for (i, ctx) in ctxs.iter().enumerate() {
        let xi = Tensor::new(vec![rows, 8], x.data()[i * rows * 8..(i + 1) * rows * 8].to_vec()).unwrap();
        let want = bank.resolve(0, ctx).unwrap().apply_dense(&store, &xi).unwrap();
        let gi = &got.data()[i * rows * 8..(i + 1) * rows * 8];
        for (a, b) in gi.iter().zip(want.data()) {
            assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()));
        }
    }
}

#[test]
fn fresh_bank_contributes_zero() {
    let schema = schema_of(&[3, 2]);
    let mut store = ParamStore::new();
    let bank = AdapterBank::build(&mut store, &schema, &[site("s", 8, 4, true)], BankConfig::non_decomposed(2, 9)).unwrap();
    let ctx = CompositionContext::avg(&schema).unwrap();
    let mut tape = Tape::new();
    let mut binder = Binder::new(&store, GroupSet::empty());
    let xv = tape.constant(uniform_tensor(&[4, 8], 1.0, 1));
    let y = bank.apply_batch(&mut tape, &mut binder, 0, xv, &[&ctx, &ctx], 2).unwrap().unwrap();
    assert_eq!(tape.value(y).max_abs(), 0.0);
}

#[test]
fn attach_rebinds_by_name() {
    let schema = schema_of(&[2, 1]);
    let sites = [site("q", 8, 8, true)];
    let mut store = ParamStore::new();
    store.insert("base/W", ParamGroup::Base, Tensor::ones(&[2])).unwrap();
    let built = AdapterBank::build(&mut store, &schema, &sites, BankConfig::decomposed(2, 1)).unwrap();
    let attached = AdapterBank::attach(&store, &schema, &sites, BankConfig::decomposed(2, 1)).unwrap();
    assert_eq!(built.param_ids(), attached.param_ids());
    let empty = ParamStore::new();
    assert!(AdapterBank::attach(&empty, &schema, &sites, BankConfig::decomposed(2, 1)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn formula_matches_allocation(
        domains in prop::collection::vec(0usize..6, 1..4),
        din_k in 1usize..5,
        dout_k in 1usize..5,
        r in 1usize..4,
        decomposed in any::<bool>(),
    ) {
        let d_in = 4 * din_k;
        let d_out = 4 * dout_k;
        prop_assert_eq!(allocated(&domains, d_in, d_out, r, decomposed) as u64, count(&domains, d_in, d_out, r, decomposed));
    }

    #[test]
    fn composed_map_is_linear(seed in any::<u64>(), alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
        let schema = schema_of(&[3, 2]);
        let mut store = ParamStore::new();
        let bank = AdapterBank::build(&mut store, &schema, &[site("s", 8, 8, true)], BankConfig::decomposed(2, seed)).unwrap();
        perturb(&mut store, &bank, seed);
        let ctx = CompositionContext::avg(&schema).unwrap();
        let delta = bank.resolve(0, &ctx).unwrap();
        let x = uniform_tensor(&[3, 8], 1.0, seed ^ 1);
        let y = uniform_tensor(&[3, 8], 1.0, seed ^ 2);
        let mix = Tensor::new(vec![3, 8], x.data().iter().zip(y.data()).map(|(a, b)| alpha * a + beta * b).collect()).unwrap();
        let lhs = delta.apply(&store, &mix).unwrap();
        let fx = delta.apply(&store, &x).unwrap();
        let fy = delta.apply(&store, &y).unwrap();
        let scale = lhs.max_abs().max(1e-300);
        for ((l, a), b) in lhs.data().iter().zip(fx.data()).zip(fy.data()) {
            prop_assert!((l - (alpha * a + beta * b)).abs() <= 1e-10 * scale);
        }
    }
}
