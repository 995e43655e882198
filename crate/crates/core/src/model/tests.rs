use alloc::vec;
use alloc::vec::Vec;

use super::*;
use crate::adapters::{AdapterModule, CompositionContext, Granularity, SlotKey, ViewSelection};
use crate::data::{mask_tokens, MaskStrategy, MASK_TOKEN};
use crate::numerics;

fn tiny(mode: LmMode) -> BackboneConfig {
    BackboneConfig {
        num_layers: 1,
        d_model: 8,
        num_heads: 2,
        d_ff: 12,
        vocab_size: 20,
        max_seq_len: 10,
        num_classes: 3,
        ..BackboneConfig::toy(mode, 20, 3)
    }
}

fn schema() -> AttributeSchema {
    AttributeSchema::from_pairs(&[("user", 3), ("item", 2)]).unwrap()
}

fn adapted(mode: LmMode, seed: u64, perturb: bool) -> ModelState {
    let mut m = ModelState::new(tiny(mode), seed).unwrap();
    m.attach_bank(&schema(), BankConfig::decomposed(2, seed + 1)).unwrap();
    if perturb {
        let bank = m.bank().unwrap().clone();
        bank.randomize_zero_factors(m.store_mut(), 0.5, seed + 2);
    }
    m
}

fn fine_ctx(doms: &[usize]) -> CompositionContext {
    let s = schema();
    CompositionContext::fine(&s, doms, &ViewSelection::all(&s)).unwrap()
}

// ---- straight-line reference implementation ----

type Mat = Vec<Vec<f64>>;

fn param(m: &ModelState, name: &str) -> Tensor {
    m.store().get(m.store().id(name).unwrap()).clone()
}

fn as_mat(t: &Tensor) -> Mat {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    (0..r).map(|i| t.data()[i * c..(i + 1) * c].to_vec()).collect()
}

fn mm(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i][t] * b[t][j];
            }
            out[i][j] = s;
        }
    }
    out
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

fn bias(a: &Mat, b: &Tensor) -> Mat {
    a.iter().map(|r| r.iter().zip(b.data()).map(|(x, y)| x + y).collect()).collect()
}

fn ln(a: &Mat, g: &Tensor, b: &Tensor) -> Mat {
    a.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mu = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n;
            r.iter()
                .enumerate()
                .map(|(i, x)| (x - mu) / libm::sqrt(var + 1e-5) * g.data()[i] + b.data()[i])
                .collect()
        })
        .collect()
}

fn dense(m: &ModelState, module: &AdapterModule) -> Mat {
    let [x, y] = module.param_ids();
    let (p, q) = (as_mat(m.store().get(x)), as_mat(m.store().get(y)));
    match module {
        AdapterModule::Lora(_) => mm(&p, &q),
        AdapterModule::Krona(_) => {
            let (s, t) = (q.len(), q[0].len());
            let mut out = vec![vec![0.0; p[0].len() * t]; p.len() * s];
            for i in 0..p.len() {
                for j in 0..p[0].len() {
                    for u in 0..s {
                        for v in 0..t {
                            out[i * s + u][j * t + v] = p[i][j] * q[u][v];
                        }
                    }
                }
            }
            out
        }
    }
}

fn delta(m: &ModelState, site: &str, ctx: &CompositionContext, d_out: usize) -> Mat {
    let bank = m.bank().unwrap();
    let s = bank.site_index(site).unwrap();
    let d = m.config().d_model;
    let mut out = vec![vec![0.0; d_out]; d];
    for (slot, w) in ctx.entries() {
        if let Some(module) = bank.lookup(s, *slot).unwrap() {
            let dm = dense(m, &module);
            for i in 0..d {
                for j in 0..d_out {
                    out[i][j] += w * dm[i][j];
                }
            }
        }
    }
    out
}

/// Final hidden rows of one sequence (anchor included).
fn reference_hidden(m: &ModelState, tokens: &[u32], ctx: Option<&CompositionContext>) -> Mat {
    let cfg = m.config();
    let ids: Vec<usize> = core::iter::once(CLS_TOKEN as usize).chain(tokens.iter().map(|t| *t as usize)).collect();
    let tok = as_mat(&param(m, "embed/tok"));
    let pos = as_mat(&param(m, "embed/pos"));
    let mut h: Mat = ids.iter().enumerate().map(|(t, &i)| tok[i].iter().zip(&pos[t]).map(|(a, b)| a + b).collect()).collect();
    let n = ids.len();
    let d = cfg.d_model;
    let dh = d / cfg.num_heads;
    for l in 0..cfg.num_layers {
        let p = |s: &str| param(m, &alloc::format!("layer{l}/{s}"));
        let site = |s: &str| alloc::format!("layer{l}.{s}");
        let a = ln(&h, &p("ln1/g"), &p("ln1/b"));
        let lin = |x: &Mat, name: &str, site_name: Option<&str>, d_out: usize| {
            let mut y = bias(&mm(x, &as_mat(&p(&alloc::format!("{name}/W")))), &p(&alloc::format!("{name}/b")));
            if let (Some(c), Some(sn)) = (ctx, site_name) {
                y = add(&y, &mm(x, &delta(m, &site(sn), c, d_out)));
            }
            y
        };
        let q = lin(&a, "q", Some("q"), d);
        let k = lin(&a, "k", None, d);
        let v = lin(&a, "v", Some("v"), d);
        let mut att = vec![vec![0.0; d]; n];
        for head in 0..cfg.num_heads {
            for i in 0..n {
                let limit = if cfg.mode == LmMode::Arm { i + 1 } else { n };
                let scores: Vec<f64> = (0..limit)
                    .map(|j| (0..dh).map(|e| q[i][head * dh + e] * k[j][head * dh + e]).sum::<f64>() / libm::sqrt(dh as f64))
                    .collect();
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| libm::exp(s - mx)).sum();
                for j in 0..limit {
                    let pj = libm::exp(scores[j] - mx) / z;
                    for e in 0..dh {
                        att[i][head * dh + e] += pj * v[j][head * dh + e];
                    }
                }
            }
        }
        h = add(&h, &lin(&att, "o", None, d));
        let b = ln(&h, &p("ln2/g"), &p("ln2/b"));
        let f = lin(&b, "ff1", Some("ff1"), cfg.d_ff);
        let f: Mat = f
            .iter()
            .map(|r| r.iter().map(|x| 0.5 * x * (1.0 + libm::erf(x / libm::sqrt(2.0)))).collect())
            .collect();
        h = add(&h, &lin(&f, "ff2", None, d));
    }
    ln(&h, &param(m, "final_ln/g"), &param(m, "final_ln/b"))
}

fn head(m: &ModelState, row: &[f64], name: &str) -> Vec<f64> {
    let w = as_mat(&param(m, &alloc::format!("{name}/W")));
    bias(&mm(&vec![row.to_vec()], &w), &param(m, &alloc::format!("{name}/b")))
        .pop()
        .unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol * (1.0 + y.abs()), "{x} vs {y}");
    }
}

const SEQS: [&[u32]; 3] = [&[5, 6, 7, 8], &[9, 3], &[19, 4, 4, 11, 12, 13]];

#[test]
fn classify_matches_reference_forward() {
    let m = adapted(LmMode::Mlm, 3, true);
    let ctxs = [fine_ctx(&[0, 1]), fine_ctx(&[2, 0]), CompositionContext::general(&schema()).unwrap()];
    let refs: Vec<&CompositionContext> = ctxs.iter().collect();
    let got = m.forward_classify(&SEQS, Some(&refs)).unwrap();
    for (i, s) in SEQS.iter().enumerate() {
        let h = reference_hidden(&m, s, Some(&ctxs[i]));
        close(&got.data()[i * 3..(i + 1) * 3], &head(&m, &h[0], "cls_head"), 1e-10);
    }
}

#[test]
fn arm_matches_reference_forward() {
    let m = adapted(LmMode::Arm, 4, true);
    let ctxs = [fine_ctx(&[1, 1]), fine_ctx(&[0, 0]), fine_ctx(&[2, 1])];
    let refs: Vec<&CompositionContext> = ctxs.iter().collect();
    let out = m.forward_arm(&SEQS, Some(&refs)).unwrap();
    let cls = m.forward_classify(&SEQS, Some(&refs)).unwrap();
    let v = m.config().vocab_size;
    for (r, &(b, pos)) in out.origins.iter().enumerate() {
        let h = reference_hidden(&m, SEQS[b], Some(&ctxs[b]));
        close(&out.logits.data()[r * v..(r + 1) * v], &head(&m, &h[pos], "lm_head"), 1e-10);
        assert_eq!(out.targets[r], SEQS[b][pos] as usize);
    }
    assert_eq!(out.origins.len(), SEQS.iter().map(|s| s.len()).sum::<usize>());
    // ARM reads the class from the last token.
    for (i, s) in SEQS.iter().enumerate() {
        let h = reference_hidden(&m, s, Some(&ctxs[i]));
        close(&cls.data()[i * 3..(i + 1) * 3], &head(&m, &h[s.len()], "cls_head"), 1e-10);
    }
}

#[test]
fn fresh_bank_preserves_base_outputs() {
    for mode in [LmMode::Mlm, LmMode::Arm] {
        let base = ModelState::new(tiny(mode), 9).unwrap();
        let m = adapted(mode, 9, false);
        let ctxs = [fine_ctx(&[0, 1]), fine_ctx(&[2, 0]), CompositionContext::avg(&schema()).unwrap()];
        let refs: Vec<&CompositionContext> = ctxs.iter().collect();
        let a = base.forward_classify(&SEQS, None).unwrap();
        let b = m.forward_classify(&SEQS, Some(&refs)).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() <= 1e-12);
        if mode == LmMode::Arm {
            let a = base.forward_arm(&SEQS, None).unwrap();
            let b = m.forward_arm(&SEQS, Some(&refs)).unwrap();
            assert!(a.logits.max_abs_diff(&b.logits).unwrap() <= 1e-12);
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let masked: Vec<_> = SEQS.iter().map(|s| mask_tokens(s, 0.5, MaskStrategy::Replace, &mut rng).unwrap()).collect();
            let mr: Vec<&MaskedSequence> = masked.iter().collect();
            let a = base.forward_mlm(&mr, None).unwrap().unwrap();
            let b = m.forward_mlm(&mr, Some(&refs)).unwrap().unwrap();
            assert!(a.0.max_abs_diff(&b.0).unwrap() <= 1e-12);
        }
    }
}

#[test]
fn arm_is_causal() {
    let m = adapted(LmMode::Arm, 5, true);
    let ctx = fine_ctx(&[1, 0]);
    let seq: Vec<u32> = vec![4, 5, 6, 7, 8, 9];
    let base = m.forward_arm(&[&seq], Some(&[&ctx])).unwrap();
    let v = m.config().vocab_size;
    for t in 0..seq.len() {
        let mut other = seq.clone();
        other[t] = if seq[t] == 17 { 18 } else { 17 };
        let out = m.forward_arm(&[&other], Some(&[&ctx])).unwrap();
        // Row r sees the anchor and tokens 0..r, so rows up to t are unchanged.
        for r in 0..=t {
            assert_eq!(&out.logits.data()[r * v..(r + 1) * v], &base.logits.data()[r * v..(r + 1) * v]);
        }
        if t + 1 < seq.len() {
            assert_ne!(&out.logits.data()[(t + 1) * v..], &base.logits.data()[(t + 1) * v..]);
        }
    }
    let one = m.forward_arm(&[&[7]], Some(&[&ctx])).unwrap();
    assert_eq!(one.targets, vec![7]);
}

#[test]
fn per_sample_mixing_equals_separate_batches() {
    for mode in [LmMode::Mlm, LmMode::Arm] {
        let m = adapted(mode, 6, true);
        let ctxs = [fine_ctx(&[0, 1]), fine_ctx(&[2, 0]), CompositionContext::coarse_only(&schema()).unwrap()];
        let refs: Vec<&CompositionContext> = ctxs.iter().collect();
        let joint = m.forward_classify(&SEQS, Some(&refs)).unwrap();
        for i in 0..3 {
            let alone = m.forward_classify(&[SEQS[i]], Some(&[&ctxs[i]])).unwrap();
            close(&joint.data()[i * 3..(i + 1) * 3], alone.data(), 1e-10);
        }
    }
}

#[test]
fn identical_samples_identical_logits() {
    let m = adapted(LmMode::Mlm, 7, true);
    let c = fine_ctx(&[1, 1]);
    let out = m.forward_classify(&[SEQS[0], SEQS[0]], Some(&[&c, &c])).unwrap();
    assert_eq!(out.data()[..3], out.data()[3..]);
}

#[test]
fn mlm_scoring_and_boundaries() {
    let m = adapted(LmMode::Mlm, 8, true);
    let c = fine_ctx(&[0, 0]);
    let single = MaskedSequence {
        tokens: vec![5, MASK_TOKEN, 7],
        positions: vec![1],
        originals: vec![6],
    };
    let (logits, targets) = m.forward_mlm(&[&single], Some(&[&c])).unwrap().unwrap();
    assert_eq!(targets, vec![6]);
    let h = reference_hidden(&m, &single.tokens, Some(&c));
    let row = head(&m, &h[2], "lm_head");
    let lse = libm::log(row.iter().map(|x| libm::exp(*x)).sum::<f64>());
    let want = lse - row[6];
    let got = numerics::cross_entropy(&logits, &targets).unwrap();
    assert!((got - want).abs() < 1e-10);

    let none = MaskedSequence {
        tokens: vec![5],
        positions: vec![],
        originals: vec![],
    };
    assert!(m.forward_mlm(&[&none], Some(&[&c])).unwrap().is_none());
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let all = mask_tokens(&[4, 5, 6], 1.0, MaskStrategy::Replace, &mut rng).unwrap();
    let (l, t) = m.forward_mlm(&[&all], Some(&[&c])).unwrap().unwrap();
    assert_eq!((l.shape()[0], t), (3, vec![4, 5, 6]));
}

#[test]
fn input_errors() {
    let mlm = adapted(LmMode::Mlm, 1, false);
    let arm = adapted(LmMode::Arm, 1, false);
    assert!(mlm.forward_arm(&[&[4]], None).is_err());
    let ms = MaskedSequence {
        tokens: vec![4],
        positions: vec![],
        originals: vec![],
    };
    assert!(arm.forward_mlm(&[&ms], None).is_err());
    let long = vec![4u32; 10];
    assert!(mlm.forward_classify(&[&long], None).is_err());
    assert!(mlm.forward_classify(&[&[25]], None).is_err());
    let c = fine_ctx(&[0, 0]);
    assert!(mlm.forward_classify(&[&[4], &[5]], Some(&[&c])).is_err());
    let bad = CompositionContext::single(SlotKey::new(0, Granularity::Fine(5)));
    assert!(matches!(
        mlm.forward_classify(&[&[4]], Some(&[&bad])),
        Err(Error::UnknownDomain { .. })
    ));
    let base = ModelState::new(tiny(LmMode::Mlm), 0).unwrap();
    assert!(base.forward_classify(&[&[4]], Some(&[&c])).is_err());
    let mut cfg = tiny(LmMode::Mlm);
    cfg.num_heads = 3;
    assert!(ModelState::new(cfg, 0).is_err());
}

#[test]
fn checkpoint_rebuild_round_trip() {
    let m = adapted(LmMode::Mlm, 2, true);
    let again = ModelState::from_store(m.config().clone(), m.store(), Some((&schema(), BankConfig::decomposed(2, 3)))).unwrap();
    let c = fine_ctx(&[2, 1]);
    assert_eq!(
        m.forward_classify(&SEQS[..1], Some(&[&c])).unwrap(),
        again.forward_classify(&SEQS[..1], Some(&[&c])).unwrap()
    );
    assert!(ModelState::from_store(m.config().clone(), m.store(), None).is_err());
}

#[test]
fn site_layout() {
    let cfg = tiny(LmMode::Mlm);
    let sites = cfg.site_specs();
    let names: Vec<&str> = sites.iter().map(|s| s.name.as_str()).collect();
    assert_eq!(names, ["layer0.q", "layer0.v", "layer0.ff1"]);
    assert!(sites[0].fine && sites[1].fine && !sites[2].fine);
    assert!(sites.iter().all(|s| s.coarse));
    assert_eq!(sites[2].d_out, 12);
}

fn corpus(n: usize, seed: u64) -> Vec<Vec<u32>> {
    // Two interleaved arithmetic patterns make next/masked tokens predictable.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let start: u32 = rng.gen_range(3..20);
            let step: u32 = rng.gen_range(1..3);
            (0..8).map(|i| 3 + (start + i * step) % 17).collect()
        })
        .collect()
}

#[test]
fn zero_step_pretraining_is_initialization() {
    let cfg = tiny(LmMode::Mlm);
    let pre = PretrainConfig {
        steps: 0,
        seed: 4,
        ..PretrainConfig::default()
    };
    let (m, report) = pretrain_base(cfg.clone(), &corpus(10, 1), &corpus(5, 2), &pre).unwrap();
    let fresh = ModelState::new(cfg, 4).unwrap();
    assert_eq!(m.store().checksum(GroupSet::of(&ParamGroup::ALL)), fresh.store().checksum(GroupSet::of(&ParamGroup::ALL)));
    assert_eq!(report.held_out_before, report.held_out_after);
    assert!(pretrain_base(tiny(LmMode::Mlm), &[], &corpus(5, 2), &pre).is_err());
}

#[test]
fn pretraining_lowers_held_out_loss() {
    for mode in [LmMode::Mlm, LmMode::Arm] {
        let pre = PretrainConfig {
            steps: 500,
            batch_size: 8,
            seed: 11,
            ..PretrainConfig::default()
        };
        let train = corpus(200, 1);
        let held = corpus(40, 2);
        let (m1, r1) = pretrain_base(tiny(mode), &train, &held, &pre).unwrap();
        assert!(r1.held_out_after < r1.held_out_before, "{mode:?}: {r1:?}");
        let (m2, r2) = pretrain_base(tiny(mode), &train, &held, &pre).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(m1.store().checksum(GroupSet::of(&ParamGroup::ALL)), m2.store().checksum(GroupSet::of(&ParamGroup::ALL)));
        // The classifier head is not part of pretraining.
        let fresh = ModelState::new(tiny(mode), 11).unwrap();
        assert_eq!(m1.store().checksum(GroupSet::of(&[ParamGroup::Head])), fresh.store().checksum(GroupSet::of(&[ParamGroup::Head])));
    }
}
