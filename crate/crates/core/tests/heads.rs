use fantrans::classifiers::{topk_aggregate, O2mHead, O2oHead};
use fantrans::okd::{self, LossWeights};
use fantrans::transformer::{apply_attention_drop, keep_count, AuTransformer, DropMode, TransBlock};
use fantrans::{rng, FanTrans, Graph, ModelConfig, ParamStore, Tensor, Variant};
use proptest::prelude::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn uniform(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| r.random_range(lo..hi))
}

fn set_param(store: &mut ParamStore, name: &str, f: impl Fn(usize) -> f64) {
    let id = store.id(name).unwrap_or_else(|| panic!("no parameter {name}"));
    for (i, v) in store.get_mut(id).value.data_mut().iter_mut().enumerate() {
        *v = f(i);
    }
}

fn block(n_au: usize, d: usize, mode: DropMode, seed: u64) -> (ParamStore, TransBlock) {
    let mut store = ParamStore::new();
    let mut r = rng::stream(seed, "block");
    let b = TransBlock::new(&mut store, &mut r, "b", d, n_au, mode, 1.0);
    (store, b)
}

// ---- attention ----

#[test]
fn zero_queries_give_uniform_attention() {
    let (mut store, b) = block(5, 8, DropMode::Full, 1);
    set_param(&mut store, "b.q.weight", |_| 0.0);
    let mut r = rng::stream(1, "x");
    let mut g = Graph::new();
    let x = g.constant(uniform(&mut r, &[2, 5, 8], -1.0, 1.0));
    let (a, _) = b.mhsa_attention(&mut g, &store, x).unwrap();
    for v in g.value(a).data() {
        assert!((v - 0.2).abs() < 1e-15);
    }
}

#[test]
fn single_token_attends_to_itself() {
    let (store, b) = block(1, 8, DropMode::Full, 2);
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_fn(&[3, 1, 8], |i| i as f64 * 0.1));
    let (a, _) = b.mhsa_attention(&mut g, &store, x).unwrap();
    assert!(g.value(a).data().iter().all(|&v| v == 1.0));
}

#[test]
fn attention_matches_scaled_dot_softmax() {
    let d = 8;
    let (store, b) = block(4, d, DropMode::Full, 3);
    let mut r = rng::stream(3, "x");
    let x = uniform(&mut r, &[1, 4, d], -1.0, 1.0);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let (a, _) = b.mhsa_attention(&mut g, &store, xv).unwrap();

    let lin = |name: &str| {
        let w = &store.by_name(&format!("b.{name}.weight")).unwrap().value;
        let bias = &store.by_name(&format!("b.{name}.bias")).unwrap().value;
        let mut out = vec![vec![0.0; d]; 4];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, o) in row.iter_mut().enumerate() {
                *o = bias.data()[j] + (0..d).map(|k| x.at(&[0, i, k]) * w.at(&[k, j])).sum::<f64>();
            }
        }
        out
    };
    let (q, k) = (lin("q"), lin("k"));
    for i in 0..4 {
        let s: Vec<f64> = (0..4)
            .map(|j| (0..d).map(|c| q[i][c] * k[j][c]).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let z: f64 = s.iter().map(|v| v.exp()).sum();
        for j in 0..4 {
            assert!((g.value(a).at(&[0, i, j]) - s[j].exp() / z).abs() < 1e-12);
        }
    }
}

#[test]
fn learnable_mask_saturates() {
    let mut r = rng::stream(4, "a");
    let a = uniform(&mut r, &[2, 4, 4], 0.0, 1.0);
    for (logit, keep) in [(30.0, true), (-30.0, false)] {
        let mut g = Graph::new();
        let av = g.constant(a.clone());
        let m = g.constant(Tensor::full(&[4], logit));
        let out = apply_attention_drop(&mut g, av, DropMode::Learnable, Some(m)).unwrap();
        let expect = if keep { a.clone() } else { Tensor::zeros(&[2, 4, 4]) };
        assert_eq!(g.value(out), &expect);
    }
}

#[test]
fn row_drop_keeps_largest_half() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::new(&[1, 4, 4], [0.4, 0.3, 0.2, 0.1].repeat(4)).unwrap());
    let out = apply_attention_drop(&mut g, a, DropMode::RowDrop, None).unwrap();
    assert_eq!(&g.value(out).data()[..4], &[0.4, 0.3, 0.0, 0.0]);
}

#[test]
fn row_and_column_drop_nonzero_counts() {
    let mut r = rng::stream(5, "drops");
    for n in [3, 4, 7, 8] {
        let a = uniform(&mut r, &[2, n, n], 0.01, 1.0);
        let mut g = Graph::new();
        let av = g.constant(a);
        let rows = apply_attention_drop(&mut g, av, DropMode::RowDrop, None).unwrap();
        let cols = apply_attention_drop(&mut g, av, DropMode::ColDrop, None).unwrap();
        let (rv, cv) = (g.value(rows), g.value(cols));
        for b in 0..2 {
            for i in 0..n {
                let row_nz = (0..n).filter(|&j| rv.at(&[b, i, j]) != 0.0).count();
                let col_nz = (0..n).filter(|&j| cv.at(&[b, j, i]) != 0.0).count();
                assert_eq!(row_nz, keep_count(n));
                assert_eq!(col_nz, keep_count(n));
            }
        }
    }
}

#[test]
fn zero_block_is_identity() {
    let (mut store, b) = block(4, 8, DropMode::Learnable, 6);
    for name in ["proj.weight", "proj.bias", "fc2.weight", "fc2.bias"] {
        set_param(&mut store, &format!("b.{name}"), |_| 0.0);
    }
    let mut r = rng::stream(6, "x");
    let x = uniform(&mut r, &[2, 4, 8], -1.0, 1.0);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let (y, _) = b.forward(&mut g, &store, xv, DropMode::Learnable).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn block_preserves_shape() {
    for n in [4, 8, 12] {
        let (store, b) = block(n, 16, DropMode::Learnable, 7);
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[2, n, 16], 0.3));
        let (y, _) = b.forward(&mut g, &store, x, DropMode::Learnable).unwrap();
        assert_eq!(g.shape(y), &[2, n, 16]);
    }
}

#[test]
fn block_passes_gradcheck_in_full_mode() {
    let (store, b) = block(3, 8, DropMode::Full, 8);
    let mut r = rng::stream(8, "x");
    let x = uniform(&mut r, &[2, 3, 8], -1.0, 1.0);
    let w = uniform(&mut r, &[2, 3, 8], -1.0, 1.0);
    let mut p = store.clone();
    let rep = fantrans::gradcheck::grad_check_params(
        |s| {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let (y, _) = b.forward(&mut g, s, xv, DropMode::Full)?;
            let wv = g.constant(w.clone());
            let prod = g.mul(y, wv)?;
            let loss = g.sum(prod)?;
            Ok((g, loss))
        },
        &mut p,
        1e-5,
        1e-4,
        1,
    )
    .unwrap();
    assert!(rep.passed(), "{rep}");
}

#[test]
fn depth_one_transformer_is_embedding_plus_block() {
    let mut store = ParamStore::new();
    let mut r = rng::stream(9, "t");
    let t = AuTransformer::new(&mut store, &mut r, "t", 4, 8, 1, DropMode::Full, 1.0).unwrap();
    let x = uniform(&mut r, &[2, 4, 8], -1.0, 1.0);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let (y, traces) = t.forward(&mut g, &store, xv).unwrap();
    assert_eq!(traces.len(), 1);

    let pos = &store.by_name("t.pos_embed").unwrap().value;
    let mut g2 = Graph::new();
    let xe = Tensor::from_fn(&[2, 4, 8], |i| x.data()[i] + pos.data()[i % 32]);
    let xv2 = g2.constant(xe);
    let (y2, _) = t.blocks()[0].forward(&mut g2, &store, xv2, DropMode::Full).unwrap();
    assert_eq!(g.value(y), g2.value(y2));
}

#[test]
fn branch_transformers_are_independent() {
    let model = FanTrans::new(&ModelConfig::tiny()).unwrap();
    let ts: Vec<_> = model.transformers().collect();
    assert_eq!(ts.len(), 2);
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[1, 4, 16], 0.2));
    let (a, _) = ts[0].forward(&mut g, &model.params, x).unwrap();
    let (b, _) = ts[1].forward(&mut g, &model.params, x).unwrap();
    assert!(g.value(a).max_abs_diff(g.value(b)) > 1e-6);
}

/// Random tiny models in every drop mode: pre-drop rows are distributions
/// and the learnable mask acts column-wise with a 0/1 mask.
#[test]
fn attention_invariants_over_random_forwards() {
    let mut r = rng::stream(10, "forwards");
    for trial in 0..60u64 {
        let mut cfg = ModelConfig::tiny().with_root_seed(trial);
        cfg.drop = [DropMode::Full, DropMode::RowDrop, DropMode::ColDrop, DropMode::Learnable][trial as usize % 4];
        cfg.depth = 1 + trial as usize % 2;
        let model = FanTrans::new(&cfg).unwrap();
        let fa = uniform(&mut r, &[2, cfg.stem.d_a(), cfg.stem.h_a, cfg.stem.w_a], 0.0, 1.0);
        let mut g = Graph::new();
        let x = g.constant(fa);
        let out = model.forward(&mut g, x).unwrap();
        for (t, traces) in model.transformers().zip([&out.attn1, &out.attn2]) {
            for (blk, tr) in t.blocks().iter().zip(traces.iter()) {
                let a = g.value(tr.pre_drop);
                let n = a.shape()[2];
                for row in a.data().chunks(n) {
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
                if cfg.drop == DropMode::Learnable {
                    let logits = &model.params.get(blk.mask_logits().unwrap()).value;
                    let m: Vec<f64> = logits.data().iter().map(|&l| if fantrans::autograd::sigmoid(l) > 0.5 { 1.0 } else { 0.0 }).collect();
                    let abar = g.value(tr.post_drop);
                    for (i, (&v, &orig)) in abar.data().iter().zip(a.data()).enumerate() {
                        assert_eq!(v, m[i % n] * orig);
                    }
                }
            }
        }
    }
}

// ---- classifiers ----

fn sort_k_sum(col: &[f64], k: usize) -> f64 {
    let mut v = col.to_vec();
    v.sort_by(|a, b| b.partial_cmp(a).unwrap());
    v[..k].iter().sum()
}

#[test]
fn o2m_examples() {
    let mut g = Graph::new();
    // Column 0 is [0.2, 0.5, 0.1, 0.4].
    let votes = Tensor::from_fn(&[1, 4, 4], |i| if i % 4 == 0 { [0.2, 0.5, 0.1, 0.4][i / 4] } else { 0.0 });
    let v = g.constant(votes);
    let p2 = topk_aggregate(&mut g, v, 2).unwrap();
    let p1 = topk_aggregate(&mut g, v, 1).unwrap();
    let p4 = topk_aggregate(&mut g, v, 4).unwrap();
    assert_eq!(g.value(p2).data()[0], 0.5 + 0.4);
    assert_eq!(g.value(p1).data()[0], 0.5);
    assert_eq!(g.value(p4).data()[0], 0.5 + 0.4 + 0.2 + 0.1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn topk_matches_sort_and_sum(n in 1usize..=12, kind in 0usize..3, seed in any::<u64>()) {
        let k = [1, 2.min(n), n][kind];
        let mut r = rng::stream(seed, "votes");
        let votes = uniform(&mut r, &[2, n, n], -3.0, 3.0);
        let mut g = Graph::new();
        let v = g.constant(votes.clone());
        let p = topk_aggregate(&mut g, v, k).unwrap();
        for b in 0..2 {
            for i in 0..n {
                let col: Vec<f64> = (0..n).map(|j| votes.at(&[b, j, i])).collect();
                prop_assert_eq!(g.value(p).at(&[b, i]), sort_k_sum(&col, k));
            }
        }
    }

    #[test]
    fn topk_is_monotone(n in 2usize..=8, seed in any::<u64>(), bump in 0.0f64..2.0) {
        let mut r = rng::stream(seed, "mono");
        let votes = uniform(&mut r, &[1, n, n], -1.0, 1.0);
        let at = r.random_range(0..n * n);
        let mut bumped = votes.clone();
        bumped.data_mut()[at] += bump;
        let mut g = Graph::new();
        let (a, b) = (g.constant(votes), g.constant(bumped));
        let pa = topk_aggregate(&mut g, a, 2).unwrap();
        let pb = topk_aggregate(&mut g, b, 2).unwrap();
        for (x, y) in g.value(pa).data().iter().zip(g.value(pb).data()) {
            prop_assert!(y >= x);
        }
    }

    #[test]
    fn kd_loss_is_nonnegative(seed in any::<u64>()) {
        let mut r = rng::stream(seed, "kd");
        let mut g = Graph::new();
        let s = g.constant(uniform(&mut r, &[3, 5], -8.0, 8.0));
        let t = g.constant(uniform(&mut r, &[3, 5], -8.0, 8.0));
        let l = okd::kd_loss(&mut g, s, t).unwrap();
        prop_assert!(g.value(l).item() >= 0.0);
    }
}

#[test]
fn o2o_zero_weight_and_locality() {
    let mut store = ParamStore::new();
    let mut r = rng::stream(11, "o2o");
    let head = O2oHead::new(&mut store, &mut r, "o", 6);
    let f = uniform(&mut r, &[1, 4, 6], -1.0, 1.0);
    let run = |store: &ParamStore, f: &Tensor| {
        let mut g = Graph::new();
        let x = g.constant(f.clone());
        let p = head.forward(&mut g, store, x).unwrap();
        g.value(p).clone()
    };
    let base = run(&store, &f);
    let w = store.get(head.weight()).value.clone();
    for i in 0..4 {
        let oracle: f64 = (0..6).map(|c| f.at(&[0, i, c]) * w.data()[c]).sum();
        assert_eq!(base.data()[i], oracle);
    }
    let mut g2 = f.clone();
    for c in 0..6 {
        g2.data_mut()[2 * 6 + c] *= 3.0;
    }
    let scaled = run(&store, &g2);
    for i in 0..4 {
        if i == 2 {
            assert!((scaled.data()[i] - 3.0 * base.data()[i]).abs() < 1e-15);
        } else {
            assert_eq!(scaled.data()[i], base.data()[i]);
        }
    }
    let mut zero = store.clone();
    zero.get_mut(head.weight()).value = Tensor::zeros(&[6, 1]);
    assert!(run(&zero, &f).data().iter().all(|&v| v == 0.0));
}

#[test]
fn o2m_is_not_local() {
    let mut store = ParamStore::new();
    let mut r = rng::stream(12, "o2m");
    let head = O2mHead::new(&mut store, &mut r, "m", 6, 4, 2).unwrap();
    let f = uniform(&mut r, &[1, 4, 6], -1.0, 1.0);
    let run = |f: &Tensor| {
        let mut g = Graph::new();
        let x = g.constant(f.clone());
        let (_, p) = head.forward(&mut g, &store, x).unwrap();
        g.value(p).clone()
    };
    let base = run(&f);
    // Push token 0 along the direction of every column of W_m so its votes
    // enter each top-k.
    let w = store.get(head.weight()).value.clone();
    let mut pushed = f.clone();
    for c in 0..6 {
        let dir: f64 = (0..4).map(|i| w.at(&[c, i])).sum();
        pushed.data_mut()[c] += 100.0 * dir;
    }
    let moved = run(&pushed);
    assert!((1..4).any(|i| moved.data()[i] != base.data()[i]));
}

// ---- distillation ----

#[test]
fn ensemble_weight_examples() {
    let mut g = Graph::new();
    let zero = g.constant(Tensor::zeros(&[2, 6]));
    let (w1, w2) = okd::ensemble_softmax(&mut g, zero, 3).unwrap();
    assert!(g.value(w1).data().iter().chain(g.value(w2).data()).all(|&v| v == 0.5));

    let big = g.constant(Tensor::new(&[1, 4], vec![60.0, 0.0, 0.0, 0.0]).unwrap());
    let (w1, _) = okd::ensemble_softmax(&mut g, big, 2).unwrap();
    assert!(g.value(w1).data()[0] > 1.0 - 1e-15);

    let po = g.constant(Tensor::new(&[1, 2], vec![1.0, -2.0]).unwrap());
    let pm = g.constant(Tensor::new(&[1, 2], vec![3.0, 4.0]).unwrap());
    let half = g.constant(Tensor::full(&[1, 2], 0.5));
    let pt = okd::ensemble_target(&mut g, po, pm, half, half).unwrap();
    assert_eq!(g.value(pt).data(), &[2.0, 1.0]);
    let one = g.constant(Tensor::ones(&[1, 2]));
    let nil = g.constant(Tensor::zeros(&[1, 2]));
    let pt = okd::ensemble_target(&mut g, po, pm, one, nil).unwrap();
    assert_eq!(g.value(pt), g.value(po));
}

#[test]
fn kd_loss_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(&[2, 3], vec![0.3, -2.0, 5.0, 0.0, 1.0, -7.0]).unwrap());
    let same = okd::kd_loss(&mut g, x, x).unwrap();
    assert!(g.value(same).item().abs() < 1e-12);

    let s = g.constant(Tensor::new(&[1], vec![3f64.ln()]).unwrap());
    let t = g.constant(Tensor::new(&[1], vec![0.0]).unwrap());
    let l = okd::kd_loss(&mut g, s, t).unwrap();
    let oracle = 0.5 * (0.5f64 / 0.75).ln() + 0.5 * (0.5f64 / 0.25).ln();
    assert!((g.value(l).item() - oracle).abs() < 1e-12);
}

#[test]
fn kd_teacher_side_gets_no_gradient() {
    let mut g = Graph::new();
    let s = g.input(Tensor::new(&[1, 3], vec![0.1, -0.4, 1.2]).unwrap());
    let t = g.input(Tensor::new(&[1, 3], vec![-0.3, 0.9, 0.2]).unwrap());
    let l = okd::kd_loss(&mut g, s, t).unwrap();
    let grads = g.backward(l).unwrap();
    assert!(grads.get(t).is_none_or(|gr| gr.data().iter().all(|&v| v == 0.0)));
    assert!(grads.get(s).unwrap().data().iter().any(|&v| v != 0.0));
}

/// With only the distillation terms in play, the ensemble generator is
/// reachable only through the teacher and must receive no gradient.
#[test]
fn ensemble_generator_gets_no_gradient_from_kd() {
    let cfg = ModelConfig::tiny();
    let mut model = FanTrans::new(&cfg).unwrap();
    let mut r = rng::stream(13, "fa");
    let fa = uniform(&mut r, &[2, cfg.stem.d_a(), 8, 8], 0.0, 1.0);
    let mut g = Graph::new();
    let x = g.constant(fa);
    let out = model.forward(&mut g, x).unwrap();
    let p_t = out.p_t.unwrap();
    let a = okd::kd_loss(&mut g, out.p_o.unwrap(), p_t).unwrap();
    let b = okd::kd_loss(&mut g, out.p_m.unwrap(), p_t).unwrap();
    let loss = g.add(a, b).unwrap();
    let grads = g.backward(loss).unwrap();
    model.params.zero_grad();
    grads.accumulate_into(&g, &mut model.params);
    let mut ens_seen = 0;
    for (_, p) in model.params.iter() {
        if p.name.starts_with("ens.") {
            ens_seen += 1;
            assert!(p.grad.data().iter().all(|&v| v == 0.0), "{} got gradient", p.name);
        }
    }
    assert!(ens_seen > 0);
    let w_o = model.params.by_name("o2o.w_o").unwrap();
    assert!(w_o.grad.data().iter().any(|&v| v != 0.0));
}

#[test]
fn cls_loss_examples() {
    let mut g = Graph::new();
    let w = g.constant(Tensor::ones(&[4]));
    let zero = g.constant(Tensor::zeros(&[1, 4]));
    let y = g.constant(Tensor::new(&[1, 4], vec![1.0, 0.0, 1.0, 0.0]).unwrap());
    let l = okd::cls_loss(&mut g, zero, y, w).unwrap();
    assert!((g.value(l).item() - 4.0 * 2f64.ln()).abs() < 1e-12);

    let x = 0.8;
    let w1 = g.constant(Tensor::new(&[1], vec![1.7]).unwrap());
    let p = g.constant(Tensor::new(&[1, 1], vec![x]).unwrap());
    let y1 = g.constant(Tensor::new(&[1, 1], vec![1.0]).unwrap());
    let l = okd::cls_loss(&mut g, p, y1, w1).unwrap();
    let oracle = -1.7 * (1.0 / (1.0 + (-x).exp())).ln();
    assert!((g.value(l).item() - oracle).abs() < 1e-12);

    let sure = g.constant(Tensor::new(&[1, 2], vec![40.0, -40.0]).unwrap());
    let ys = g.constant(Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap());
    let w2 = g.constant(Tensor::ones(&[2]));
    let l = okd::cls_loss(&mut g, sure, ys, w2).unwrap();
    assert!(g.value(l).item() < 1e-6);
}

#[test]
fn rarer_au_gets_larger_weight() {
    let mut r = rng::stream(14, "cw");
    let rows: Vec<Vec<bool>> = (0..50)
        .map(|_| vec![r.random::<f64>() < 0.6, r.random::<f64>() < 0.2, r.random::<f64>() < 0.4])
        .collect();
    let freq: Vec<usize> = (0..3).map(|i| rows.iter().filter(|x| x[i]).count()).collect();
    let w = okd::class_weights(&rows).unwrap();
    for i in 0..3 {
        for j in 0..3 {
            if freq[i] < freq[j] {
                assert!(w[i] > w[j]);
            }
        }
    }
    assert!((w.iter().sum::<f64>() - 3.0).abs() < 1e-12);
}

#[test]
fn lambda_zero_drops_kd_terms() {
    let cfg = ModelConfig::tiny();
    let model = FanTrans::new(&cfg).unwrap();
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[1, cfg.stem.d_a(), 8, 8], 0.5));
    let y = g.constant(Tensor::new(&[1, 4], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let out = model.forward(&mut g, x).unwrap();
    let lw = LossWeights::new(0.0, vec![1.0; 4]).unwrap();
    let parts = model.loss(&mut g, &out, y, &lw).unwrap();
    let cls = g.value(parts.cls_o2o.unwrap()).item() + g.value(parts.cls_o2m.unwrap()).item() + g.value(parts.cls_ens.unwrap()).item();
    assert!((g.value(parts.total).item() - cls).abs() < 1e-12);
}

#[test]
fn every_variant_builds_and_deploys() {
    for v in Variant::ALL {
        let cfg = ModelConfig { variant: v, ..ModelConfig::tiny() };
        let model = FanTrans::new(&cfg).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[2, cfg.stem.d_a(), 8, 8], 0.1));
        let out = model.forward(&mut g, x).unwrap();
        assert_eq!(g.shape(out.deployed()), &[2, 4]);
        assert_eq!(out.p_t.is_some(), v.is_two_branch());
    }
}
