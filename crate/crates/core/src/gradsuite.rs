//! The finite-difference suite: every differentiable primitive on small
//! random inputs, then the full training loss of the tiny model.
//!
//! Primitive cases reduce the op output to a scalar with a fixed random
//! weighting, so every entry of the Jacobian contributes. Inputs to
//! selection ops (max-pool, top-k) are spaced far wider than the step so no
//! perturbation changes the selection.

use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::gradcheck::{self, GradCheckReport};
use crate::model::{FanTrans, ModelConfig};
use crate::okd::LossWeights;
use crate::rng;
use crate::tensor::Tensor;

pub struct SuiteCase {
    pub op: String,
    pub report: GradCheckReport,
}

pub struct SuiteReport {
    pub cases: Vec<SuiteCase>,
    pub tol: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.report.passed())
    }

    pub fn failures(&self) -> impl Iterator<Item = &SuiteCase> {
        self.cases.iter().filter(|c| !c.report.passed())
    }

    pub fn max_rel_err(&self) -> f64 {
        self.cases.iter().map(|c| c.report.max_rel_err()).fold(0.0, f64::max)
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<14} {:>8} {:>12}  status", "op", "checked", "max_rel_err")?;
        for c in &self.cases {
            let checked: usize = c.report.entries.iter().map(|e| e.checked).sum();
            writeln!(
                f,
                "{:<14} {:>8} {:>12.3e}  {}",
                c.op,
                checked,
                c.report.max_rel_err(),
                if c.report.passed() { "ok" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Distinct values spaced 0.05 apart in random order, shifted to be centred.
pub fn spaced(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    Tensor::from_fn(shape, |i| (perm[i] as f64 - n as f64 / 2.0) * 0.05)
}

/// Values in `[-2, 2]` kept at least 0.05 from both clamp bounds `±1`.
fn away_from_bounds(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    uniform(rng, shape, -2.0, 2.0).map(|v| {
        if (v.abs() - 1.0).abs() < 0.05 {
            v * 1.1
        } else {
            v
        }
    })
}

/// `Σ f(inputs) ⊙ r` for a fixed random `r` of the output's shape.
fn weighted<F>(seed: u64, f: F) -> impl Fn(&mut Graph, &[Var]) -> Result<Var>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    move |g: &mut Graph, v: &[Var]| {
        let y = f(g, v)?;
        let mut r = rng::stream(seed, "weighting");
        let w = uniform(&mut r, g.shape(y), -1.0, 1.0);
        let w = g.constant(w);
        let p = g.mul(y, w)?;
        g.sum(p)
    }
}

type CaseFn = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

fn primitive_cases(rng: &mut ChaCha8Rng, seed: u64) -> Vec<(&'static str, CaseFn, Vec<Tensor>)> {
    let mut cases: Vec<(&'static str, CaseFn, Vec<Tensor>)> = Vec::new();
    macro_rules! case {
        ($name:expr, $inputs:expr, $f:expr) => {
            cases.push(($name, Box::new(weighted(seed, $f)), $inputs))
        };
    }
    case!("add", vec![uniform(rng, &[2, 3], -1.0, 1.0), uniform(rng, &[3], -1.0, 1.0)], |g, v| g.add(v[0], v[1]));
    case!("sub", vec![uniform(rng, &[2, 1], -1.0, 1.0), uniform(rng, &[2, 3], -1.0, 1.0)], |g, v| g.sub(v[0], v[1]));
    case!("mul", vec![uniform(rng, &[2, 3], -1.0, 1.0), uniform(rng, &[1, 3], -1.0, 1.0)], |g, v| g.mul(v[0], v[1]));
    case!("scale", vec![uniform(rng, &[3, 2], -1.0, 1.0)], |g, v| g.scale(v[0], -1.7));
    case!("add_scalar", vec![uniform(rng, &[4], -1.0, 1.0)], |g, v| g.add_scalar(v[0], 0.3));
    case!("sigmoid", vec![uniform(rng, &[2, 4], -4.0, 4.0)], |g, v| g.sigmoid(v[0]));
    case!("gelu", vec![uniform(rng, &[2, 4], -3.0, 3.0)], |g, v| g.gelu(v[0]));
    case!("log", vec![uniform(rng, &[5], 0.5, 2.0)], |g, v| g.log(v[0]));
    case!("exp", vec![uniform(rng, &[5], -1.0, 1.0)], |g, v| g.exp(v[0]));
    case!("clamp", vec![away_from_bounds(rng, &[3, 4])], |g, v| g.clamp(v[0], -1.0, 1.0));
    case!("sum", vec![uniform(rng, &[2, 3], -1.0, 1.0)], |g, v| {
        let s = g.sum(v[0])?;
        g.scale(s, 0.5)
    });
    case!("mean", vec![uniform(rng, &[2, 3], -1.0, 1.0)], |g, v| {
        let s = g.mean(v[0])?;
        g.scale(s, 2.0)
    });
    case!("sum_axis", vec![uniform(rng, &[2, 3, 4], -1.0, 1.0)], |g, v| g.sum_axis(v[0], 1));
    case!("softmax", vec![uniform(rng, &[3, 4], -2.0, 2.0)], |g, v| g.softmax(v[0], 1));
    case!(
        "layer_norm",
        vec![uniform(rng, &[3, 5], -1.0, 1.0), uniform(rng, &[5], 0.5, 1.5), uniform(rng, &[5], -0.5, 0.5)],
        |g, v| g.layer_norm(v[0], v[1], v[2])
    );
    case!("matmul", vec![uniform(rng, &[3, 4], -1.0, 1.0), uniform(rng, &[4, 2], -1.0, 1.0)], |g, v| g.matmul(v[0], v[1]));
    case!("bmm", vec![uniform(rng, &[2, 3, 4], -1.0, 1.0), uniform(rng, &[2, 4, 2], -1.0, 1.0)], |g, v| g.bmm(v[0], v[1]));
    case!("permute", vec![uniform(rng, &[2, 3, 4], -1.0, 1.0)], |g, v| g.permute(v[0], &[2, 0, 1]));
    case!("reshape", vec![uniform(rng, &[2, 6], -1.0, 1.0)], |g, v| g.reshape(v[0], &[3, 4]));
    case!("concat", vec![uniform(rng, &[2, 2], -1.0, 1.0), uniform(rng, &[2, 3], -1.0, 1.0)], |g, v| g.concat(&[v[0], v[1]], 1));
    case!("narrow", vec![uniform(rng, &[3, 5], -1.0, 1.0)], |g, v| g.narrow(v[0], 1, 1, 3));
    case!(
        "conv2d",
        vec![uniform(rng, &[2, 2, 5, 5], -1.0, 1.0), uniform(rng, &[3, 2, 3, 3], -1.0, 1.0), uniform(rng, &[3], -1.0, 1.0)],
        |g, v| {
            let a = g.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
            let b = g.conv2d(v[0], v[1], None, 2, 1)?;
            let a = g.sum(a)?;
            let b = g.sum_axis(b, 1)?;
            g.add(b, a)
        }
    );
    case!("max_pool2d", vec![spaced(rng, &[2, 2, 4, 4])], |g, v| g.max_pool2d(v[0], 2, 2));
    case!("topk_sum", vec![spaced(rng, &[2, 5, 5])], |g, v| g.topk_sum(v[0], 2, 1));
    case!("topk_mask", vec![spaced(rng, &[2, 4, 4])], |g, v| g.topk_mask(v[0], 2, 2));
    cases
}

const POINT_SPREAD: f64 = 0.3;

/// Tiny two-branch model, Full attention, loss including distillation.
fn total_loss_case(seed: u64, h: f64, tol: f64) -> Result<GradCheckReport> {
    let cfg = ModelConfig::tiny().with_root_seed(seed);
    let mut model = FanTrans::new(&cfg)?;
    let mut r = rng::stream(seed, "total-loss-inputs");
    // Move off the init point, where near-uniform attention leaves some
    // gradients at the size of finite-difference roundoff.
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        for v in model.params.get_mut(id).value.data_mut() {
            *v += r.random_range(-POINT_SPREAD..POINT_SPREAD);
        }
    }
    let d_a = cfg.stem.d_a();
    let fa = uniform(&mut r, &[2, d_a, cfg.stem.h_a, cfg.stem.w_a], 0.0, 1.0);
    let labels = Tensor::from_fn(&[2, cfg.n_au], |i| ((i * 7 + 3) % 3 == 0) as u8 as f64);
    let lw = LossWeights::new(cfg.lambda, vec![1.0; cfg.n_au])?;

    let mut g = Graph::new();
    let x = g.constant(fa.clone());
    let out = model.forward(&mut g, x)?;
    let teacher = g.value(out.p_t.expect("two-branch model")).clone();

    let mut store = model.params.clone();
    let report = gradcheck::grad_check_params(
        |p| {
            let mut g = Graph::new();
            let x = g.constant(fa.clone());
            let y = g.constant(labels.clone());
            let out = model.forward_with(&mut g, p, x)?;
            let parts = model.loss_with_teacher(&mut g, &out, y, &lw, Some(&teacher))?;
            Ok((g, parts.total))
        },
        &mut store,
        h,
        tol,
        1,
    )?;
    model.params = store;
    Ok(report)
}

/// Runs every case. `h` and `tol` are the finite-difference step and the
/// relative-error bound.
pub fn run(seed: u64, h: f64, tol: f64) -> Result<SuiteReport> {
    let mut rng = rng::stream(seed, "gradsuite");
    let mut cases = Vec::new();
    for (op, f, inputs) in primitive_cases(&mut rng, seed) {
        let named: Vec<(&str, Tensor)> = inputs.into_iter().enumerate().map(|(i, t)| (["x", "y", "z"][i], t)).collect();
        let report = gradcheck::grad_check(f, &named, h, tol)?;
        cases.push(SuiteCase { op: op.to_string(), report });
    }
    cases.push(SuiteCase {
        op: "total_loss".to_string(),
        report: total_loss_case(seed, h, tol)?,
    });
    Ok(SuiteReport { cases, tol })
}
