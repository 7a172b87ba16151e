//! Acceptance criteria 1 to 10. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.

use std::process::ExitCode;
use std::time::Instant;

use rand::Rng;

use fantrans::autograd::sigmoid;
use fantrans::classifiers::topk_aggregate;
use fantrans::config::RunConfig;
use fantrans::experiment::{self, CellResult};
use fantrans::okd::{self, LossWeights};
use fantrans::synth::{self, SynthSpec};
use fantrans::training::{self, AdamW, Checkpoint, Schedule, TrainConfig};
use fantrans::{gradsuite, rng, DropMode, FanTrans, Graph, ModelConfig, Tensor, Variant};
use fantrans_cli::{cmd_eval, cmd_train, ConfigArgs, EvalArgs, Split, TrainArgs};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn uniform(r: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| r.random_range(lo..hi))
}

fn c1_gradients() -> Verdict {
    let t = Instant::now();
    let report = gradsuite::run(0, 1e-5, 1e-4).expect("suite runs");
    let secs = t.elapsed().as_secs_f64();
    let failed: Vec<&str> = report.failures().map(|c| c.op.as_str()).collect();
    verdict(
        report.passed() && secs < 60.0,
        format!(
            "{} cases, max rel err {:.2e}, {secs:.1}s{}",
            report.cases.len(),
            report.max_rel_err(),
            if failed.is_empty() { String::new() } else { format!(", failed: {}", failed.join(", ")) }
        ),
    )
}

fn c2_attention() -> Verdict {
    let mut r = rng::stream(2, "acceptance-attention");
    let mut worst = 0.0f64;
    let mut mask_violations = 0usize;
    let mut learnable = 0usize;
    for trial in 0..1000u64 {
        let mut cfg = ModelConfig::tiny().with_root_seed(trial);
        cfg.drop = DropMode::ALL[trial as usize % 4];
        cfg.depth = 1 + trial as usize % 2;
        cfg.mask_init_std = 1.0;
        let model = FanTrans::new(&cfg).unwrap();
        let fa = uniform(&mut r, &[1, cfg.stem.d_a(), cfg.stem.h_a, cfg.stem.w_a], 0.0, 1.0);
        let mut g = Graph::new();
        let x = g.constant(fa);
        let out = model.forward(&mut g, x).unwrap();
        for (t, traces) in model.transformers().zip([&out.attn1, &out.attn2]) {
            for (blk, tr) in t.blocks().iter().zip(traces.iter()) {
                let a = g.value(tr.pre_drop);
                let n = a.shape()[2];
                for row in a.data().chunks(n) {
                    worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
                }
                if cfg.drop == DropMode::Learnable {
                    learnable += 1;
                    let logits = &model.params.get(blk.mask_logits().unwrap()).value;
                    let m: Vec<f64> = logits.data().iter().map(|&l| if sigmoid(l) > 0.5 { 1.0 } else { 0.0 }).collect();
                    let abar = g.value(tr.post_drop);
                    for (i, (&v, &orig)) in abar.data().iter().zip(a.data()).enumerate() {
                        if v != m[i % n] * orig {
                            mask_violations += 1;
                        }
                    }
                }
            }
        }
    }
    verdict(
        worst <= 1e-12 && mask_violations == 0 && learnable > 0,
        format!("1000 forwards, max |row sum - 1| {worst:.1e}, {mask_violations} mask mismatches over {learnable} learnable blocks"),
    )
}

fn c3_topk() -> Verdict {
    let mut r = rng::stream(3, "acceptance-topk");
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n = r.random_range(1..=12usize);
        let ks = [1, 2.min(n), n];
        let k = ks[r.random_range(0..3)];
        let votes = uniform(&mut r, &[2, n, n], -3.0, 3.0);
        let mut g = Graph::new();
        let v = g.constant(votes.clone());
        let p = topk_aggregate(&mut g, v, k).unwrap();
        let got = g.value(p);
        for b in 0..2 {
            for j in 0..n {
                let mut col: Vec<f64> = (0..n).map(|i| votes.at(&[b, i, j])).collect();
                col.sort_by(|a, b| b.partial_cmp(a).unwrap());
                let oracle: f64 = col[..k].iter().sum();
                if got.at(&[b, j]) != oracle {
                    mismatches += 1;
                }
            }
        }
    }
    verdict(mismatches == 0, format!("1000 random vote matrices, {mismatches} mismatches"))
}

fn c4_convexity() -> Verdict {
    let cfg = ModelConfig::tiny();
    let mut model = FanTrans::new(&cfg).unwrap();
    let spec = SynthSpec {
        n_au: 4,
        n_samples: 32,
        groups: vec![vec![0, 1], vec![2, 3]],
        base_rates: vec![0.4, 0.5],
        image_size: cfg.image_size,
        ..SynthSpec::default()
    };
    let set = training::prepare(model.stem(), &synth::generate(&spec).unwrap()).unwrap();
    let lw = LossWeights::new(0.2, okd::class_weights(&set.labels).unwrap()).unwrap();
    let mut opt = AdamW::new(&model.params);
    let (mut w_err, mut between_err) = (0.0f64, 0.0f64);
    for step in 0..100 {
        let idx: Vec<usize> = (0..8).map(|i| (step * 8 + i) % set.len()).collect();
        let fa = training::stack(&idx.iter().map(|&i| &set.fa[i]).collect::<Vec<_>>()).unwrap();
        let labels = training::label_matrix(&idx.iter().map(|&i| &set.labels[i]).collect::<Vec<_>>()).unwrap();
        let s = training::train_step(&mut model, &mut opt, fa, labels, &lw, 1e-3).unwrap();
        let (g, o) = (&s.graph, &s.outputs);
        let (w1, w2) = (g.value(o.w1.unwrap()), g.value(o.w2.unwrap()));
        let (po, pm, pt) = (g.value(o.p_o.unwrap()), g.value(o.p_m.unwrap()), g.value(o.p_t.unwrap()));
        for i in 0..w1.numel() {
            w_err = w_err.max((w1.data()[i] + w2.data()[i] - 1.0).abs());
            let (lo, hi) = (po.data()[i].min(pm.data()[i]), po.data()[i].max(pm.data()[i]));
            between_err = between_err.max(lo - pt.data()[i]).max(pt.data()[i] - hi);
        }
    }
    verdict(
        w_err <= 1e-9 && between_err <= 1e-12,
        format!("100 steps, max |W1+W2-1| {w_err:.1e}, max excursion outside [P_o, P_m] {:.1e}", between_err.max(0.0)),
    )
}

fn c5_kd() -> Verdict {
    let mut r = rng::stream(5, "acceptance-kd");
    let mut g = Graph::new();
    let x = g.constant(uniform(&mut r, &[4, 8], -6.0, 6.0));
    let self_kd = okd::kd_loss(&mut g, x, x).unwrap();
    let self_kd = g.value(self_kd).item().abs();

    let mut negatives = 0;
    for _ in 0..1000 {
        let mut g = Graph::new();
        let s = g.constant(uniform(&mut r, &[2, 6], -10.0, 10.0));
        let t = g.constant(uniform(&mut r, &[2, 6], -10.0, 10.0));
        let l = okd::kd_loss(&mut g, s, t).unwrap();
        if g.value(l).item() < 0.0 {
            negatives += 1;
        }
    }

    // Teacher path in the full model: the ensemble generator is reachable
    // only through P_t, so KD-only loss must leave it without gradient.
    let cfg = ModelConfig::tiny();
    let model = FanTrans::new(&cfg).unwrap();
    let mut g = Graph::new();
    let x = g.constant(uniform(&mut r, &[2, cfg.stem.d_a(), 8, 8], 0.0, 1.0));
    let out = model.forward(&mut g, x).unwrap();
    let p_t = out.p_t.unwrap();
    let a = okd::kd_loss(&mut g, out.p_o.unwrap(), p_t).unwrap();
    let b = okd::kd_loss(&mut g, out.p_m.unwrap(), p_t).unwrap();
    let loss = g.add(a, b).unwrap();
    let grads = g.backward(loss).unwrap();
    let mut store = model.params.clone();
    store.zero_grad();
    grads.accumulate_into(&g, &mut store);
    let leaked: f64 = store
        .iter()
        .filter(|(_, p)| p.name.starts_with("ens."))
        .flat_map(|(_, p)| p.grad.data().to_vec())
        .map(f64::abs)
        .fold(0.0, f64::max);
    verdict(
        self_kd <= 1e-12 && negatives == 0 && leaked == 0.0,
        format!("kd(x,x) {self_kd:.1e}, {negatives}/1000 negative, max teacher-side gradient {leaked:.1e}"),
    )
}

fn c6_overfit() -> Verdict {
    let t = Instant::now();
    let rc = RunConfig::default();
    let mut model = FanTrans::new(&rc.model_config()).unwrap();
    let data = synth::generate(&rc.data_spec()).unwrap().take(64);
    let set = training::prepare(model.stem(), &data).unwrap();
    let cfg = TrainConfig {
        schedule: Schedule {
            epochs: 200,
            decay_factor: 1.0,
            ..rc.train.schedule.clone()
        },
        target_f1: Some(0.99),
        ..rc.train_config()
    };
    let report = training::train(&mut model, &set, &set, &cfg, |_| {}).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let epochs = report.history.len();
    let train_f1 = report.history.last().unwrap().f1_deployed;

    // Score the saved checkpoint through the CLI on the same 64 samples.
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("checkpoint.bin");
    Checkpoint::from_model(&model, Some(&report.optimizer)).save(&ck).unwrap();
    let data_path = dir.path().join("subset.bin");
    data.save(&data_path).unwrap();
    let eval = cmd_eval(&EvalArgs {
        checkpoint: ck,
        data: Some(data_path),
        split: Split::Eval,
        cfg: ConfigArgs::default(),
    })
    .unwrap();
    verdict(
        train_f1 >= 0.99 && eval.macro_f1 >= 0.99 && secs < 300.0,
        format!(
            "train macro-F1 {train_f1:.4} after {epochs} epochs, eval of checkpoint {:.4}, {secs:.0}s",
            eval.macro_f1
        ),
    )
}

/// Per-seed cells for criteria 7 and 8.
struct SeedRuns {
    diverse_learnable: CellResult,
    diverse_full: CellResult,
    o2o_only: CellResult,
    o2m_only: CellResult,
}

const SEEDS: u64 = 10;

fn desk_config(seed: u64, variant: &str, drop: &str) -> RunConfig {
    let mut rc = RunConfig::default();
    rc.apply_overrides(&[
        "model.depth=2",
        "train.base_lr=1e-3",
        "train.epochs=12",
        &format!("model.variant={variant}"),
        &format!("model.drop={drop}"),
    ])
    .unwrap();
    rc.seed = seed;
    rc
}

fn desk_runs() -> Vec<SeedRuns> {
    let cell = |seed, v, d| experiment::run_cell(&desk_config(seed, v, d)).unwrap().1;
    (0..SEEDS)
        .map(|seed| {
            let t = Instant::now();
            let runs = SeedRuns {
                diverse_learnable: cell(seed, "diverse", "learnable"),
                diverse_full: cell(seed, "diverse", "full"),
                o2o_only: cell(seed, "o2o-only", "learnable"),
                o2m_only: cell(seed, "o2m-only", "learnable"),
            };
            eprintln!("  seed {seed} trained in {:.0}s", t.elapsed().as_secs_f64());
            runs
        })
        .collect()
}

fn c7_relative_gains(runs: &[SeedRuns]) -> Verdict {
    let (mut a, mut b) = (0, 0);
    let mut lines = Vec::new();
    for (seed, r) in runs.iter().enumerate() {
        let ens = r.diverse_learnable.f1_ensemble.unwrap();
        let single = r.o2o_only.f1_deployed.max(r.o2m_only.f1_deployed);
        let cos_l = r.diverse_learnable.cosine.as_ref().unwrap().mean;
        let cos_f = r.diverse_full.cosine.as_ref().unwrap().mean;
        a += usize::from(ens >= single);
        b += usize::from(cos_l < cos_f);
        lines.push(format!(
            "    seed {seed}: P_t F1 {ens:.4} vs best single {single:.4}; cosine learnable {cos_l:.4} vs full {cos_f:.4}"
        ));
    }
    for l in lines {
        eprintln!("{l}");
    }
    verdict(a >= 7 && b >= 7, format!("(a) ensemble >= single-branch in {a}/10 seeds, (b) learnable cosine < full in {b}/10 seeds"))
}

fn c8_label_dependency(runs: &[SeedRuns]) -> Verdict {
    let mut wins = 0;
    let mut diverse_wins = 0;
    for (seed, r) in runs.iter().enumerate() {
        let o2o = r.o2o_only.corr_dist_o2o.unwrap();
        let o2m = r.o2m_only.corr_dist_o2m.unwrap();
        let (d_o2o, d_o2m) = (r.diverse_learnable.corr_dist_o2o.unwrap(), r.diverse_learnable.corr_dist_o2m.unwrap());
        wins += usize::from(o2m <= o2o);
        diverse_wins += usize::from(d_o2m <= d_o2o);
        eprintln!(
            "    seed {seed}: o2m-only {o2m:.4} vs o2o-only {o2o:.4}; two-branch heads o2m {d_o2m:.4} vs o2o {d_o2o:.4}"
        );
    }
    verdict(
        wins >= 7,
        format!(
            "o2m-only distance <= o2o-only in {wins}/10 seeds (for reference, the two heads of one two-branch model: {diverse_wins}/10)"
        ),
    )
}

fn c9_parity() -> Verdict {
    let mut r = rng::stream(9, "acceptance-parity");
    let mut mismatches = 0;
    let mut inputs = 0;
    for variant in [Variant::O2mOnly, Variant::Diverse] {
        let cfg = ModelConfig {
            variant,
            depth: 2,
            drop: DropMode::Learnable,
            mask_init_std: 1.0,
            ..ModelConfig::tiny()
        };
        let mut model = FanTrans::new(&cfg).unwrap();
        let ids: Vec<_> = model.params.ids().collect();
        for id in ids {
            if model.params.get(id).frozen {
                continue;
            }
            for v in model.params.get_mut(id).value.data_mut() {
                *v += r.random_range(-0.2..0.2);
            }
        }
        for _ in 0..50 {
            let b = r.random_range(1..=4);
            let fa = uniform(&mut r, &[b, cfg.stem.d_a(), 8, 8], 0.0, 1.0);
            let mut g = Graph::new();
            let x = g.constant(fa.clone());
            let out = model.forward(&mut g, x).unwrap();
            let full = g.value(out.p_m.unwrap());
            let deployed = training::infer(&model, &fa).unwrap().logits;
            inputs += 1;
            if deployed.data().iter().zip(full.data()).any(|(a, b)| a.to_bits() != b.to_bits()) {
                mismatches += 1;
            }
        }
    }
    verdict(mismatches == 0, format!("{inputs} random inputs, {mismatches} not bit-identical"))
}

fn c10_determinism() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    let second = dir.path().join("second");
    cmd_train(&TrainArgs {
        cfg: ConfigArgs {
            out: Some(first.clone()),
            ..ConfigArgs::default()
        },
        quiet: true,
    })
    .unwrap();
    // The second run starts from the first run's resolved config.
    cmd_train(&TrainArgs {
        cfg: ConfigArgs {
            config: Some(first.join(fantrans_cli::RESOLVED_FILE)),
            out: Some(second.clone()),
            ..ConfigArgs::default()
        },
        quiet: true,
    })
    .unwrap();
    let a = std::fs::read(first.join(fantrans_cli::METRICS_FILE)).unwrap();
    let b = std::fs::read(second.join(fantrans_cli::METRICS_FILE)).unwrap();
    verdict(a == b && !a.is_empty(), format!("metrics.csv {} bytes, identical: {}", a.len(), a == b))
}

fn main() -> ExitCode {
    let mut all = true;
    let mut report = |n: usize, v: Verdict| {
        all &= v.pass;
        println!("criterion {n:>2}: {}  {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
    };
    report(1, c1_gradients());
    report(2, c2_attention());
    report(3, c3_topk());
    report(4, c4_convexity());
    report(5, c5_kd());
    report(6, c6_overfit());
    let runs = desk_runs();
    report(7, c7_relative_gains(&runs));
    report(8, c8_label_dependency(&runs));
    report(9, c9_parity());
    report(10, c10_determinism());
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
