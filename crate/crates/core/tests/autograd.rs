use fantrans::autograd::{gelu, sigmoid};
use fantrans::gradcheck::{grad_check, DEFAULT_STEP, DEFAULT_TOL};
use fantrans::gradsuite::spaced;
use fantrans::rng;
use fantrans::{Graph, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn uniform(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| r.random_range(lo..hi))
}

fn naive_conv(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let [n, c, h, wd] = x.shape()[..] else { panic!() };
    let [o, _, kh, kw] = w.shape()[..] else { panic!() };
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(&[n, o, ho, wo]);
    for ni in 0..n {
        for oi in 0..o {
            for y in 0..ho {
                for xo in 0..wo {
                    let mut acc = b.map_or(0.0, |b| b.data()[oi]);
                    for ci in 0..c {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let iy = (y * stride + dy) as isize - pad as isize;
                                let ix = (xo * stride + dx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.at(&[ni, ci, iy as usize, ix as usize]) * w.at(&[oi, ci, dy, dx]);
                            }
                        }
                    }
                    let off = out.offset(&[ni, oi, y, xo]);
                    out.data_mut()[off] = acc;
                }
            }
        }
    }
    out
}

fn naive_pool(x: &Tensor, win: usize, stride: usize) -> Tensor {
    let [n, c, h, w] = x.shape()[..] else { panic!() };
    let (ho, wo) = ((h - win) / stride + 1, (w - win) / stride + 1);
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..ho {
                for xo in 0..wo {
                    let mut m = f64::NEG_INFINITY;
                    for dy in 0..win {
                        for dx in 0..win {
                            m = m.max(x.at(&[ni, ci, y * stride + dy, xo * stride + dx]));
                        }
                    }
                    let off = out.offset(&[ni, ci, y, xo]);
                    out.data_mut()[off] = m;
                }
            }
        }
    }
    out
}

#[test]
fn conv2d_matches_direct_loops() {
    let mut r = rng::stream(1, "conv-oracle");
    for (stride, pad, k) in [(1, 0, 3), (1, 1, 3), (2, 1, 3), (2, 0, 2), (1, 2, 5)] {
        let (h, w) = (k + 3 * stride - 2 * pad, k + 4 * stride - 2 * pad);
        let x = uniform(&mut r, &[2, 3, h, w], -1.0, 1.0);
        let w = uniform(&mut r, &[4, 3, k, k], -1.0, 1.0);
        let b = uniform(&mut r, &[4], -1.0, 1.0);
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
        let with_bias = g.conv2d(xv, wv, Some(bv), stride, pad).unwrap();
        let without = g.conv2d(xv, wv, None, stride, pad).unwrap();
        assert!(g.value(with_bias).max_abs_diff(&naive_conv(&x, &w, Some(&b), stride, pad)) < 1e-12);
        assert!(g.value(without).max_abs_diff(&naive_conv(&x, &w, None, stride, pad)) < 1e-12);
    }
}

#[test]
fn uneven_geometry_is_rejected() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 1, 6, 6]));
    let w = g.constant(Tensor::zeros(&[1, 1, 3, 3]));
    assert!(matches!(g.conv2d(x, w, None, 2, 1), Err(fantrans::Error::Config(_))));
    let y = g.constant(Tensor::zeros(&[1, 1, 7, 8]));
    assert!(matches!(g.max_pool2d(y, 2, 2), Err(fantrans::Error::Config(_))));
}

#[test]
fn max_pool_matches_direct_loops() {
    let mut r = rng::stream(2, "pool-oracle");
    for (win, stride) in [(2, 2), (3, 1), (2, 1), (4, 2)] {
        let x = uniform(&mut r, &[2, 2, win + 3 * stride, win + 2 * stride], -1.0, 1.0);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = g.max_pool2d(xv, win, stride).unwrap();
        assert_eq!(g.value(y), &naive_pool(&x, win, stride));
    }
}

/// `erf` by its Maclaurin series, summed until terms vanish.
fn erf_series(x: f64) -> f64 {
    let mut term = x;
    let mut sum = x;
    let mut n = 0.0;
    loop {
        n += 1.0;
        term *= -x * x / n;
        let add = term / (2.0 * n + 1.0);
        sum += add;
        if add.abs() < 1e-18 {
            break;
        }
    }
    2.0 / std::f64::consts::PI.sqrt() * sum
}

#[test]
fn gelu_matches_series_oracle() {
    for i in -300..=300 {
        let x = i as f64 / 100.0;
        let oracle = 0.5 * x * (1.0 + erf_series(x / 2f64.sqrt()));
        assert!((gelu(x) - oracle).abs() < 1e-12, "x = {x}");
    }
}

#[test]
fn sigmoid_is_stable_at_extremes() {
    assert_eq!(sigmoid(0.0), 0.5);
    assert!(sigmoid(-800.0) >= 0.0 && sigmoid(-800.0) < 1e-300);
    assert_eq!(sigmoid(800.0), 1.0);
    assert!((sigmoid(1.3) + sigmoid(-1.3) - 1.0).abs() < 1e-15);
}

#[test]
fn softmax_and_layer_norm_match_formulas() {
    let mut r = rng::stream(3, "formula-oracle");
    let x = uniform(&mut r, &[3, 5], -3.0, 3.0);
    let gamma = uniform(&mut r, &[5], 0.5, 1.5);
    let beta = uniform(&mut r, &[5], -0.5, 0.5);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let sm = g.softmax(xv, 1).unwrap();
    let (gv, bv) = (g.constant(gamma.clone()), g.constant(beta.clone()));
    let ln = g.layer_norm(xv, gv, bv).unwrap();
    for row in 0..3 {
        let vals: Vec<f64> = (0..5).map(|j| x.at(&[row, j])).collect();
        let z: f64 = vals.iter().map(|v| v.exp()).sum();
        let mu = vals.iter().sum::<f64>() / 5.0;
        let var = vals.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 5.0;
        for j in 0..5 {
            assert!((g.value(sm).at(&[row, j]) - vals[j].exp() / z).abs() < 1e-15);
            let expect = (vals[j] - mu) / (var + 1e-6).sqrt() * gamma.data()[j] + beta.data()[j];
            assert!((g.value(ln).at(&[row, j]) - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn softmax_survives_large_logits() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(&[1, 3], vec![1000.0, 999.0, -1000.0]).unwrap());
    let y = g.softmax(x, 1).unwrap();
    assert!(g.value(y).all_finite());
    let e = (-1.0f64).exp();
    assert!((g.value(y).at(&[0, 0]) - 1.0 / (1.0 + e)).abs() < 1e-15);
}

type Build = fn(&mut Graph, &[Var]) -> fantrans::Result<Var>;

fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> fantrans::Result<Var> {
    let mut r = rng::stream(seed, "weights");
    let w = uniform(&mut r, g.shape(y), -1.0, 1.0);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    g.sum(p)
}

/// Ten random shapes per primitive, each checked against central differences.
#[test]
fn primitives_pass_gradcheck_on_random_shapes() {
    let mut r = rng::stream(4, "shapes");
    for trial in 0..10u64 {
        let (a, b, c) = (r.random_range(1..4usize), r.random_range(1..5usize), r.random_range(2..5usize));
        let elementwise: [(&str, Build); 6] = [
            ("sigmoid", |g, v| g.sigmoid(v[0])),
            ("gelu", |g, v| g.gelu(v[0])),
            ("exp", |g, v| g.exp(v[0])),
            ("softmax", |g, v| g.softmax(v[0], 1)),
            ("mul", |g, v| g.mul(v[0], v[0])),
            ("sum_axis", |g, v| g.sum_axis(v[0], 0)),
        ];
        for (name, f) in elementwise {
            let x = uniform(&mut r, &[a, b, c], -1.5, 1.5);
            let rep = grad_check(
                |g, v| {
                    let y = f(g, v)?;
                    weighted_sum(g, y, trial)
                },
                &[("x", x)],
                DEFAULT_STEP,
                DEFAULT_TOL,
            )
            .unwrap();
            assert!(rep.passed(), "{name} trial {trial}\n{rep}");
        }

        let x = uniform(&mut r, &[a, b, c], -1.0, 1.0);
        let gamma = uniform(&mut r, &[c], 0.5, 1.5);
        let beta = uniform(&mut r, &[c], -0.5, 0.5);
        let rep = grad_check(
            |g, v| {
                let y = g.layer_norm(v[0], v[1], v[2])?;
                weighted_sum(g, y, trial)
            },
            &[("x", x), ("gamma", gamma), ("beta", beta)],
            DEFAULT_STEP,
            DEFAULT_TOL,
        )
        .unwrap();
        assert!(rep.passed(), "layer_norm trial {trial}\n{rep}");

        let p = uniform(&mut r, &[a, b, c], -1.0, 1.0);
        let q = uniform(&mut r, &[a, c, b], -1.0, 1.0);
        let rep = grad_check(
            |g, v| {
                let y = g.bmm(v[0], v[1])?;
                weighted_sum(g, y, trial)
            },
            &[("a", p), ("b", q)],
            DEFAULT_STEP,
            DEFAULT_TOL,
        )
        .unwrap();
        assert!(rep.passed(), "bmm trial {trial}\n{rep}");

        let side = r.random_range(3..6usize);
        let x = uniform(&mut r, &[1, a, side, side], -1.0, 1.0);
        let w = uniform(&mut r, &[b, a, 3, 3], -1.0, 1.0);
        let stride = 1 + (trial as usize % 2);
        let rep = grad_check(
            |g, v| {
                let y = g.conv2d(v[0], v[1], None, stride, 1)?;
                weighted_sum(g, y, trial)
            },
            &[("x", x), ("w", w)],
            DEFAULT_STEP,
            DEFAULT_TOL,
        )
        .unwrap();
        assert!(rep.passed(), "conv2d trial {trial}\n{rep}");

        let x = spaced(&mut r, &[a, c + 1, b]);
        let k = r.random_range(1..=c + 1);
        let rep = grad_check(
            |g, v| {
                let y = g.topk_sum(v[0], k, 1)?;
                weighted_sum(g, y, trial)
            },
            &[("x", x)],
            DEFAULT_STEP,
            DEFAULT_TOL,
        )
        .unwrap();
        assert!(rep.passed(), "topk_sum trial {trial}\n{rep}");
    }
}

#[test]
fn backward_is_linear_in_the_loss() {
    let mut r = rng::stream(5, "linearity");
    let x0 = uniform(&mut r, &[3, 4], -1.0, 1.0);
    let grad_of = |coef: (f64, f64)| {
        let mut g = Graph::new();
        let x = g.input(x0.clone());
        let s = g.softmax(x, 1).unwrap();
        let f = weighted_sum(&mut g, s, 1).unwrap();
        let t = g.gelu(x).unwrap();
        let h = weighted_sum(&mut g, t, 2).unwrap();
        let f = g.scale(f, coef.0).unwrap();
        let h = g.scale(h, coef.1).unwrap();
        let loss = g.add(f, h).unwrap();
        g.backward(loss).unwrap().get(x).unwrap().clone()
    };
    let gf = grad_of((1.0, 0.0));
    let gh = grad_of((0.0, 1.0));
    let mix = grad_of((2.5, -0.75));
    let expect = Tensor::from_fn(&[3, 4], |i| 2.5 * gf.data()[i] - 0.75 * gh.data()[i]);
    assert!(mix.max_abs_diff(&expect) < 1e-12);
}

/// The straight-through binarisation forwards a hard 0/1 step but passes
/// back exactly what a sigmoid node would.
#[test]
fn ste_matches_sigmoid_reference_graph() {
    let mut r = rng::stream(6, "ste");
    let logits = uniform(&mut r, &[6], -3.0, 3.0);
    let a = uniform(&mut r, &[4, 6], 0.0, 1.0);

    let mut g = Graph::new();
    let m = g.input(logits.clone());
    let av = g.constant(a.clone());
    let hard = g.ste_binarize(m).unwrap();
    for (h, l) in g.value(hard).data().iter().zip(logits.data()) {
        assert_eq!(*h, if sigmoid(*l) > 0.5 { 1.0 } else { 0.0 });
    }
    let masked = g.mul(av, hard).unwrap();
    let loss = weighted_sum(&mut g, masked, 9).unwrap();
    let ste_grad = g.backward(loss).unwrap().get(m).unwrap().clone();

    let mut rg = Graph::new();
    let m2 = rg.input(logits);
    let av2 = rg.constant(a);
    let soft = rg.sigmoid(m2).unwrap();
    let masked2 = rg.mul(av2, soft).unwrap();
    let loss2 = weighted_sum(&mut rg, masked2, 9).unwrap();
    let ref_grad = rg.backward(loss2).unwrap().get(m2).unwrap().clone();

    assert!(ste_grad.max_abs_diff(&ref_grad) < 1e-15);
}

#[test]
fn detach_blocks_gradient() {
    let mut g = Graph::new();
    let x = g.input(Tensor::new(&[2], vec![0.3, -0.7]).unwrap());
    let d = g.detach(x);
    let y = g.mul(x, d).unwrap();
    let loss = g.sum(y).unwrap();
    let grad = g.backward(loss).unwrap().get(x).unwrap().clone();
    assert_eq!(grad.data(), &[0.3, -0.7]);
}

#[test]
fn shape_errors_are_reported() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[4, 2]));
    assert!(g.matmul(a, b).is_err());
    assert!(g.add(a, b).is_err());
    assert!(g.reshape(a, &[5]).is_err());
    assert!(g.topk_sum(a, 4, 1).is_err());
}
