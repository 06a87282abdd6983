//! End-to-end acceptance gate. Each test covers one release criterion and
//! prints a single `ACCEPTANCE Cn ...: PASS` line; run with
//! `cargo test --test acceptance -- --nocapture` to see them.

mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use common::*;
use rand::Rng;
use rnascl::attack::{fgsm, mi_fgsm, pgd, AttackConfig, AttackKind, EvalSpec};
use rnascl::commands::{
    cmd_ablate, cmd_attack, cmd_derive, cmd_report, cmd_search, cmd_train, Prec, ARCH_FILE,
    EVAL_CSV, SEARCH_METRICS, STUDENT_CKPT, TRAIN_METRICS,
};
use rnascl::config::RunConfig;
use rnascl::data::synth_dataset;
use rnascl::distill::{
    attention_loss, attention_loss_hard, attention_loss_with_rows, cross_entropy, kl_term,
    one_hot_batch, search_loss, train_loss,
};
use rnascl::dtype::Real;
use rnascl::graph::{Graph, PoolKind, Var};
use rnascl::gumbel::{argmax, gumbel_noise, gumbel_softmax, TauSchedule};
use rnascl::nn::{conv_macs, count_macs, BlockSpec, Network, StageSpec, SuperNet};
use rnascl::search::{ArchDescription, ArmKind, SearchConfig, SearchState};
use rnascl::tensor::Tensor;

fn test_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("rnascl-accept-{}-{name}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

// ---------------------------------------------------------------- C1 ----

const FD_H: f64 = 1e-5;
const FD_TOL: f64 = 1e-6;
const FD_INSTANCES: usize = 100;

fn check_op(name: &str, instance: impl Fn(u64) -> CheckReport) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..FD_INSTANCES as u64 {
        let report = instance(i);
        assert!(
            report.max_rel < FD_TOL,
            "{name} instance {i}: rel err {:.3e} over {} elements",
            report.max_rel,
            report.elements
        );
        worst = worst.max(report.max_rel);
    }
    worst
}

fn conv_instance(i: u64) -> CheckReport {
    let mut r = rng(0x0c0 + i);
    let n = 1 + (i % 2) as usize;
    let ci = 1 + (i % 3) as usize;
    let co = 1 + ((i / 3) % 3) as usize;
    let h = 4 + (i % 3) as usize;
    let w = 4 + ((i / 2) % 3) as usize;
    let stride = 1 + (i % 2) as usize;
    let padding = ((i / 2) % 2) as usize;
    let x = rand_signed(&mut r, vec![n, ci, h, w], 0.2, 1.2);
    let wt = rand_signed(&mut r, vec![co, ci, 3, 3], 0.2, 1.2);
    gradcheck(&[x, wt], FD_H, |g, vs| {
        let y = g.conv2d(vs[0], vs[1], stride, padding).unwrap();
        weighted_sum(g, y, i)
    })
}

/// Max pooling is non-smooth at window ties; regenerate until every
/// window's top two values are separated well past the probe step.
fn pool_instance(i: u64) -> CheckReport {
    let kind = if i.is_multiple_of(2) {
        PoolKind::Max
    } else {
        PoolKind::Avg
    };
    let n = 1 + (i % 2) as usize;
    let c = 1 + (i % 3) as usize;
    let h = if i.is_multiple_of(3) { 6 } else { 4 };
    let w = if (i / 2).is_multiple_of(3) { 6 } else { 4 };
    let mut r = rng(0x900 + i);
    let x = loop {
        let cand = rand_tensor(&mut r, vec![n, c, h, w], 0.0, 10.0);
        if kind == PoolKind::Avg || max_windows_separated(&cand, h, w) {
            break cand;
        }
    };
    gradcheck(&[x], FD_H, |g, vs| {
        let y = g.pool2d(vs[0], kind, 2, 2).unwrap();
        weighted_sum(g, y, i)
    })
}

fn max_windows_separated(x: &Tensor<f64>, h: usize, w: usize) -> bool {
    let planes = x.numel() / (h * w);
    for p in 0..planes {
        let plane = &x.data()[p * h * w..][..h * w];
        for oy in 0..h / 2 {
            for ox in 0..w / 2 {
                let mut vals: Vec<f64> = (0..4)
                    .map(|k| plane[(oy * 2 + k / 2) * w + ox * 2 + k % 2])
                    .collect();
                vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
                if vals[0] - vals[1] < 1e-3 {
                    return false;
                }
            }
        }
    }
    true
}

fn linear_instance(i: u64) -> CheckReport {
    let mut r = rng(0x11e + i);
    let n = 1 + (i % 3) as usize;
    let d = 2 + (i % 3) as usize;
    let m = 2 + ((i / 3) % 3) as usize;
    let x = rand_signed(&mut r, vec![n, d], 0.2, 1.2);
    let w = rand_signed(&mut r, vec![d, m], 0.2, 1.2);
    let b = rand_signed(&mut r, vec![m], 0.2, 1.2);
    gradcheck(&[x, w, b], FD_H, |g, vs| {
        let y = g.linear(vs[0], vs[1], vs[2]).unwrap();
        weighted_sum(g, y, i)
    })
}

fn softmax_instance(i: u64) -> CheckReport {
    let mut r = rng(0x50f + i);
    if i.is_multiple_of(3) {
        let k = 2 + (i % 4) as usize;
        let x = rand_tensor(&mut r, vec![k], -2.0, 2.0);
        gradcheck(&[x], FD_H, |g, vs| {
            let y = g.softmax(vs[0], 0).unwrap();
            weighted_sum(g, y, i)
        })
    } else {
        let n = 1 + (i % 3) as usize;
        let k = 2 + ((i / 3) % 4) as usize;
        let x = rand_tensor(&mut r, vec![n, k], -2.0, 2.0);
        gradcheck(&[x], FD_H, |g, vs| {
            let y = g.softmax(vs[0], 1).unwrap();
            weighted_sum(g, y, i)
        })
    }
}

fn attention_map_instance(i: u64) -> CheckReport {
    let mut r = rng(0xa77 + i);
    let c = 1 + (i % 3) as usize;
    let h = 3 + (i % 3) as usize;
    let w = 3 + ((i / 2) % 3) as usize;
    if i.is_multiple_of(2) {
        let n = 1 + (i % 2) as usize;
        let x = rand_signed(&mut r, vec![n, c, h, w], 0.2, 1.2);
        gradcheck(&[x], FD_H, |g, vs| {
            let y = g.attention_map_batched(vs[0]).unwrap();
            weighted_sum(g, y, i)
        })
    } else {
        let x = rand_signed(&mut r, vec![c, h, w], 0.2, 1.2);
        gradcheck(&[x], FD_H, |g, vs| {
            let y = g.attention_map(vs[0]).unwrap();
            weighted_sum(g, y, i)
        })
    }
}

fn resize_map_instance(i: u64) -> CheckReport {
    let mut r = rng(0x1e5 + i);
    let dims = [3usize, 4, 5, 6];
    let h = dims[(i % 4) as usize];
    let w = dims[((i / 2) % 4) as usize];
    let oh = dims[((i / 3) % 4) as usize];
    let ow = dims[((i / 5) % 4) as usize];
    if i.is_multiple_of(2) {
        let n = 1 + (i % 2) as usize;
        let x = rand_signed(&mut r, vec![n, h, w], 0.2, 1.2);
        gradcheck(&[x], FD_H, |g, vs| {
            let y = g.resize_bilinear(vs[0], oh, ow).unwrap();
            weighted_sum(g, y, i)
        })
    } else {
        let x = rand_signed(&mut r, vec![h, w], 0.2, 1.2);
        gradcheck(&[x], FD_H, |g, vs| {
            let y = g.resize_bilinear(vs[0], oh, ow).unwrap();
            weighted_sum(g, y, i)
        })
    }
}

fn attention_loss_instance(i: u64) -> CheckReport {
    let mut r = rng(0xa70 + i);
    let n_s = 1 + (i % 2) as usize;
    let n_t = 1 + ((i / 2) % 2) as usize;
    let batch = 1 + (i % 2) as usize;
    let dims = [(2usize, 2usize), (4, 4), (5, 3)];
    let mut inputs = Vec::new();
    for l in 0..n_s + n_t {
        let (h, w) = dims[((i as usize) + l) % dims.len()];
        let c = 1 + (i as usize + l) % 3;
        inputs.push(rand_signed(&mut r, vec![batch, c, h, w], 0.3, 1.2));
    }
    inputs.push(rand_tensor(&mut r, vec![n_s, n_t], 0.2, 1.0));
    gradcheck(&inputs, FD_H, |g, vs| {
        let s = &vs[..n_s];
        let t = &vs[n_s..n_s + n_t];
        attention_loss_with_rows(g, s, t, vs[n_s + n_t]).unwrap()
    })
}

fn kl_term_instance(i: u64) -> CheckReport {
    let mut r = rng(0x6b1 + i);
    let n = 1 + (i % 3) as usize;
    let k = 2 + (i % 3) as usize;
    let a = rand_tensor(&mut r, vec![n, k], -1.5, 1.5);
    let b = rand_tensor(&mut r, vec![n, k], -1.5, 1.5);
    gradcheck(&[a, b], FD_H, |g, vs| {
        let p = g.softmax(vs[0], 1).unwrap();
        let q = g.softmax(vs[1], 1).unwrap();
        kl_term(g, p, q).unwrap()
    })
}

fn gumbel_softmax_instance(i: u64) -> CheckReport {
    let mut r = rng(0x6e1 + i);
    let tau = 0.7 + (i % 5) as f64 * 0.4;
    let shape = if i.is_multiple_of(2) {
        vec![1 + (i % 2) as usize, 2 + ((i / 2) % 3) as usize]
    } else {
        vec![2 + (i % 4) as usize]
    };
    let logits = rand_tensor(&mut r, shape.clone(), -1.5, 1.5);
    let noise = rand_tensor(&mut r, shape, -1.5, 2.5);
    gradcheck(&[logits], FD_H, |g, vs| {
        let z = g.leaf(noise.clone(), false);
        let y = gumbel_softmax(g, vs[0], tau, z).unwrap();
        weighted_sum(g, y, i)
    })
}

/// Composite-objective fixture: logits, two activation layers per side, the
/// connection logits and the cost factor all under the same probe.
struct CompositeFixture {
    inputs: Vec<Tensor<f64>>,
    labels: Vec<usize>,
    noise: Tensor<f64>,
    classes: usize,
}

fn composite_fixture(i: u64, salt: u64) -> CompositeFixture {
    let mut r = rng(salt + i);
    let batch = 2;
    let classes = 2 + (i % 2) as usize;
    let labels: Vec<usize> = (0..batch).map(|_| r.random_range(0..classes)).collect();
    let inputs = vec![
        rand_tensor(&mut r, vec![batch, classes], -1.5, 1.5),
        rand_tensor(&mut r, vec![batch, classes], -1.5, 1.5),
        rand_signed(&mut r, vec![batch, 1 + (i % 2) as usize, 4, 4], 0.3, 1.2),
        rand_signed(&mut r, vec![batch, 2, 2, 2], 0.3, 1.2),
        rand_signed(&mut r, vec![batch, 1, 5, 5], 0.3, 1.2),
        rand_signed(&mut r, vec![batch, 2, 4, 4], 0.3, 1.2),
    ];
    let noise = rand_tensor(&mut r, vec![2, 2], -1.0, 2.0);
    CompositeFixture {
        inputs,
        labels,
        noise,
        classes,
    }
}

fn search_loss_instance(i: u64) -> CheckReport {
    let fix = composite_fixture(i, 0x5ea);
    let gamma_s = 0.6 + (i % 3) as f64 * 0.3;
    let tau = 1.1;
    let mut inputs = fix.inputs.clone();
    inputs.push(rand_tensor(&mut rng(0x5eb + i), vec![2, 2], -1.0, 1.0));
    inputs.push(Tensor::scalar(0.3 + (i % 7) as f64 * 0.08));
    gradcheck(&inputs, FD_H, |g, vs| {
        let y = g.leaf(one_hot_batch(&fix.labels, fix.classes), false);
        let ce = cross_entropy(g, vs[0], y).unwrap();
        let p = g.softmax(vs[0], 1).unwrap();
        let q = g.softmax(vs[1], 1).unwrap();
        let kl = kl_term(g, p, q).unwrap();
        let noise = g.leaf(fix.noise.clone(), false);
        let attn = attention_loss(g, &[vs[2], vs[3]], &[vs[4], vs[5]], vs[6], tau, noise).unwrap();
        search_loss(g, ce, Some(kl), Some(attn), gamma_s, vs[7]).unwrap()
    })
}

fn train_loss_instance(i: u64) -> CheckReport {
    let fix = composite_fixture(i, 0x7a1);
    let gamma_t = 0.5 + (i % 4) as f64 * 0.4;
    let tutors = [(i % 2) as usize, ((i / 2) % 2) as usize];
    gradcheck(&fix.inputs, FD_H, |g, vs| {
        let y = g.leaf(one_hot_batch(&fix.labels, fix.classes), false);
        let ce = cross_entropy(g, vs[0], y).unwrap();
        let p = g.softmax(vs[0], 1).unwrap();
        let q = g.softmax(vs[1], 1).unwrap();
        let kl = kl_term(g, p, q).unwrap();
        let attn = attention_loss_hard(g, &[vs[2], vs[3]], &[vs[4], vs[5]], &tutors).unwrap();
        train_loss(g, ce, Some(kl), Some(attn), gamma_t).unwrap()
    })
}

#[test]
fn c1_gradients_match_finite_differences() {
    let start = Instant::now();
    let ops: Vec<(&str, f64)> = vec![
        ("conv", check_op("conv", conv_instance)),
        ("pool", check_op("pool", pool_instance)),
        ("linear", check_op("linear", linear_instance)),
        ("softmax", check_op("softmax", softmax_instance)),
        (
            "attention_map",
            check_op("attention_map", attention_map_instance),
        ),
        ("resize_map", check_op("resize_map", resize_map_instance)),
        (
            "attention_loss",
            check_op("attention_loss", attention_loss_instance),
        ),
        ("kl_term", check_op("kl_term", kl_term_instance)),
        (
            "gumbel_softmax",
            check_op("gumbel_softmax", gumbel_softmax_instance),
        ),
        ("search_loss", check_op("search_loss", search_loss_instance)),
        ("train_loss", check_op("train_loss", train_loss_instance)),
    ];
    let elapsed = start.elapsed();
    assert!(
        elapsed < Duration::from_secs(300),
        "gradient checks took {elapsed:?}"
    );
    let worst = ops.iter().map(|(_, w)| *w).fold(0.0, f64::max);
    println!(
        "ACCEPTANCE C1 finite-difference gradients ({} ops x {FD_INSTANCES} instances, \
         max rel err {worst:.2e}, {elapsed:.1?}): PASS",
        ops.len()
    );
}

// ---------------------------------------------------------------- C2 ----

/// Frozen 2-layer, 2-class, 2x2-map instance for the objective values.
struct FixedInstance {
    s_acts: Vec<Act>,
    t_acts: Vec<Act>,
    s_logits: Vec<Vec<f64>>,
    t_logits: Vec<Vec<f64>>,
    labels: Vec<usize>,
}

fn fixed_instance() -> FixedInstance {
    FixedInstance {
        s_acts: vec![
            Act::new(
                2,
                2,
                2,
                2,
                vec![
                    0.5, -0.3, 0.8, 0.1, -0.2, 0.7, 0.4, -0.6, 0.9, 0.2, -0.4, 0.3, 0.6, -0.8, 0.1,
                    0.5,
                ],
            ),
            Act::new(
                2,
                2,
                2,
                2,
                vec![
                    0.3, 0.9, -0.5, 0.2, 0.7, -0.1, 0.6, -0.4, -0.8, 0.4, 0.2, 0.7, 0.1, 0.5, -0.6,
                    0.9,
                ],
            ),
        ],
        t_acts: vec![
            Act::new(
                2,
                2,
                2,
                2,
                vec![
                    0.4, 0.1, -0.7, 0.6, 0.2, -0.5, 0.9, 0.3, -0.6, 0.8, 0.1, -0.2, 0.5, 0.3, -0.9,
                    0.4,
                ],
            ),
            Act::new(
                2,
                2,
                2,
                2,
                vec![
                    -0.1, 0.6, 0.3, -0.8, 0.9, 0.2, -0.3, 0.5, 0.4, -0.7, 0.6, 0.1, -0.2, 0.8, 0.5,
                    -0.4,
                ],
            ),
        ],
        s_logits: vec![vec![1.2, -0.7], vec![0.3, 0.8]],
        t_logits: vec![vec![2.0, -1.0], vec![-0.5, 1.5]],
        labels: vec![0, 1],
    }
}

#[test]
fn c2_fixed_instance_losses_match_oracle() {
    let fix = fixed_instance();
    let conn_logits = vec![vec![0.2, -0.4], vec![0.7, 0.1]];
    let conn_noise = vec![vec![0.05, -0.3], vec![0.4, -0.1]];
    let (tau, gamma_s, gamma_t, n_f) = (1.7, 0.8, 1.3, 0.37);
    let tutors = [1usize, 0];
    let explicit_rows = vec![vec![0.3, 0.7], vec![0.6, 0.4]];

    let mut g = Graph::<f64>::new();
    let s_vars: Vec<Var> = fix
        .s_acts
        .iter()
        .map(|a| g.leaf(a.tensor(), true))
        .collect();
    let t_vars: Vec<Var> = fix
        .t_acts
        .iter()
        .map(|a| g.leaf(a.tensor(), false))
        .collect();
    let sl = g.leaf(
        Tensor::new(vec![2, 2], fix.s_logits.concat()).unwrap(),
        true,
    );
    let tl = g.leaf(
        Tensor::new(vec![2, 2], fix.t_logits.concat()).unwrap(),
        false,
    );
    let y = g.leaf(one_hot_batch(&fix.labels, 2), false);

    // Attention transfer under explicit connection weights.
    let rows = g.leaf(
        Tensor::new(vec![2, 2], explicit_rows.concat()).unwrap(),
        false,
    );
    let attn_explicit = attention_loss_with_rows(&mut g, &s_vars, &t_vars, rows).unwrap();
    let want_attn = oracle_attention_loss(&fix.s_acts, &fix.t_acts, &explicit_rows);
    let err1 = (g.value(attn_explicit).item() - want_attn).abs();
    assert!(err1 < 1e-6, "attention loss: {err1:.3e}");

    // Search objective with Gumbel connection rows and the cost factor.
    let ce = cross_entropy(&mut g, sl, y).unwrap();
    let p = g.softmax(sl, 1).unwrap();
    let q = g.softmax(tl, 1).unwrap();
    let kl = kl_term(&mut g, p, q).unwrap();
    let conn = g.leaf(Tensor::new(vec![2, 2], conn_logits.concat()).unwrap(), true);
    let noise = g.leaf(Tensor::new(vec![2, 2], conn_noise.concat()).unwrap(), false);
    let attn_soft = attention_loss(&mut g, &s_vars, &t_vars, conn, tau, noise).unwrap();
    let n_f_var = g.constant(n_f);
    let search = search_loss(&mut g, ce, Some(kl), Some(attn_soft), gamma_s, n_f_var).unwrap();

    let p_rows: Vec<Vec<f64>> = fix.s_logits.iter().map(|r| oracle_softmax(r)).collect();
    let q_rows: Vec<Vec<f64>> = fix.t_logits.iter().map(|r| oracle_softmax(r)).collect();
    let want_ce = oracle_cross_entropy(&fix.s_logits, &fix.labels);
    let want_kl = oracle_kl(&p_rows, &q_rows);
    let soft_rows = oracle_gumbel_rows(&conn_logits, &conn_noise, tau);
    let want_soft = oracle_attention_loss(&fix.s_acts, &fix.t_acts, &soft_rows);
    let want_search = oracle_search_loss(want_ce, Some(want_kl), Some(want_soft), gamma_s, n_f);
    let err2 = (g.value(search).item() - want_search).abs();
    assert!(err2 < 1e-6, "search objective: {err2:.3e}");

    // Training objective with hard tutor assignments.
    let attn_hard = attention_loss_hard(&mut g, &s_vars, &t_vars, &tutors).unwrap();
    let train = train_loss(&mut g, ce, Some(kl), Some(attn_hard), gamma_t).unwrap();
    let hard_rows = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
    let want_hard = oracle_attention_loss(&fix.s_acts, &fix.t_acts, &hard_rows);
    let want_train = oracle_train_loss(want_ce, Some(want_kl), Some(want_hard), gamma_t);
    let err3 = (g.value(train).item() - want_train).abs();
    assert!(err3 < 1e-6, "training objective: {err3:.3e}");

    println!(
        "ACCEPTANCE C2 objective values vs independent oracle \
         (errs {err1:.1e} / {err2:.1e} / {err3:.1e}): PASS"
    );
}

// ---------------------------------------------------------------- C3 ----

#[test]
fn c3_gumbel_softmax_contract() {
    let mut r = rng(0x6e2);

    // Simplex membership across temperatures.
    for trial in 0..1000 {
        let k = 2 + trial % 4;
        let mut g = Graph::<f64>::new();
        let logits = g.leaf(rand_tensor(&mut r, vec![k], -3.0, 3.0), true);
        let noise = g.leaf(gumbel_noise(&mut r, vec![k]), false);
        let tau = 0.1 + 4.9 * r.random::<f64>();
        let w = gumbel_softmax(&mut g, logits, tau, noise).unwrap();
        let v = g.value(w).data();
        assert!(v.iter().all(|&x| x >= 0.0));
        assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-5);
    }

    // Near-zero temperature concentrates on argmax(logits + noise). Draws
    // whose top two perturbed logits are closer than 0.1 are regenerated:
    // at a tie the weights split for every temperature.
    for trial in 0..200 {
        let k = 2 + trial % 4;
        let (raw, noise, want) = loop {
            let raw = rand_tensor(&mut r, vec![k], -2.0, 2.0);
            let noise = gumbel_noise::<f64, _>(&mut r, vec![k]);
            let mut perturbed: Vec<f64> = raw
                .data()
                .iter()
                .zip(noise.data())
                .map(|(a, b)| a + b)
                .collect();
            let best = argmax(&perturbed);
            let top = perturbed[best];
            perturbed[best] = f64::NEG_INFINITY;
            let second = perturbed.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if top - second > 0.1 {
                break (raw, noise, best);
            }
        };
        let mut g = Graph::<f64>::new();
        let logits = g.leaf(raw, true);
        let noise = g.leaf(noise, false);
        let w = gumbel_softmax(&mut g, logits, 0.01, noise).unwrap();
        let v = g.value(w).data();
        assert_eq!(argmax(v), want);
        assert!(v[want] > 0.999, "max weight {} at tau 0.01", v[want]);
    }

    // The annealing trace followed by a live search run.
    let sched = TauSchedule::standard();
    for e in 0..200 {
        let want = 5.0 * (-0.045 * e as f64).exp();
        assert!((sched.at(e) - want).abs() < 1e-9);
    }
    let train = synth_dataset::<f64>(2, 15, 8, 40).unwrap();
    let eval = synth_dataset::<f64>(2, 5, 8, 41).unwrap();
    let supernet = SuperNet::build(
        3,
        2,
        &[StageSpec {
            depth: 2,
            choices: vec![2, 4],
        }],
        &mut rng(42),
    )
    .unwrap();
    let config = SearchConfig {
        arm: ArmKind::Standard,
        epochs: 3,
        batch_size: 10,
        weight_lr: 0.05,
        arch_lr: 0.01,
        momentum: 0.9,
        weight_decay: 2e-4,
        gamma_s: 1.0,
        tau: TauSchedule::standard(),
    };
    let mut state = SearchState::new(supernet, None, config, (8, 8), 9, rng(43)).unwrap();
    for e in 0..3 {
        let m = state.run_epoch(&train, &eval).unwrap();
        let want = 5.0 * (-0.045 * e as f64).exp();
        assert!(
            (m.tau - want).abs() < 1e-9,
            "epoch {e} logged tau {}",
            m.tau
        );
    }

    println!(
        "ACCEPTANCE C3 relaxed categorical weights (simplex 1e-5, argmax at tau 0.01, \
         annealing trace 1e-9): PASS"
    );
}

// ---------------------------------------------------------------- C4 ----

fn attack_identities<E: Real>(seed: u64) {
    let mut r = rng(seed);
    let net = Network::<E>::build(
        3,
        3,
        &[
            BlockSpec {
                channels: 5,
                pool_after: true,
            },
            BlockSpec {
                channels: 6,
                pool_after: false,
            },
        ],
        &mut r,
    );
    let ds = synth_dataset::<E>(3, 4, 8, 77).unwrap();
    let (x, y) = ds.gather(&(0..12).collect::<Vec<_>>());

    // Single-step PGD without random start is FGSM.
    let eps = 8.0 / 255.0;
    let one_step = AttackConfig {
        epsilon: eps,
        steps: 1,
        step_size: eps,
        momentum_mu: 0.0,
        random_start: false,
    };
    let a = pgd(&net, &x, &y, &one_step, &mut rng(0)).unwrap();
    let b = fgsm(&net, &x, &y, eps).unwrap();
    assert_eq!(a.data(), b.data(), "single-step PGD != FGSM");

    // Zero-momentum MI-FGSM is the plain iterated sign attack.
    let multi = AttackConfig {
        epsilon: eps,
        steps: 5,
        step_size: eps / 4.0,
        momentum_mu: 0.0,
        random_start: false,
    };
    let a = mi_fgsm(&net, &x, &y, &multi, &mut rng(0)).unwrap();
    let b = pgd(&net, &x, &y, &multi, &mut rng(0)).unwrap();
    assert_eq!(a.data(), b.data(), "zero-momentum MI-FGSM != iterated FGSM");

    // Ball and range hold per sample for the randomized attack.
    let eps_ball = 6.0 / 255.0;
    let adv = pgd(&net, &x, &y, &AttackConfig::pgd(eps_ball, 4), &mut rng(5)).unwrap();
    let e = rnascl::dtype::real::<E>(eps_ball);
    for (a, &o) in adv.data().iter().zip(x.data()) {
        assert!(*a >= E::zero() && *a <= E::one());
        assert!(*a - o <= e && o - *a <= e);
    }
}

#[test]
fn c4_attack_identities() {
    attack_identities::<f32>(0x47a);
    attack_identities::<f64>(0x47b);

    // Zero-budget attacks must reproduce clean accuracy exactly.
    let net = Network::<Prec>::build(
        3,
        3,
        &[BlockSpec {
            channels: 6,
            pool_after: true,
        }],
        &mut rng(0x47c),
    );
    let ds = synth_dataset::<Prec>(3, 8, 8, 99).unwrap();
    let specs = vec![
        EvalSpec::clean(),
        EvalSpec {
            kind: AttackKind::Fgsm,
            config: AttackConfig::fgsm(0.0),
        },
        EvalSpec {
            kind: AttackKind::Pgd,
            config: AttackConfig::pgd(0.0, 20),
        },
        EvalSpec {
            kind: AttackKind::MiFgsm,
            config: AttackConfig::mi_fgsm(0.0, 5),
        },
    ];
    let rows = rnascl::attack::evaluate(&net, &ds, &specs, 8, 3).unwrap();
    for row in &rows[1..] {
        assert_eq!(row.accuracy, rows[0].accuracy, "{} at eps=0", row.attack);
    }

    println!(
        "ACCEPTANCE C4 attack identities (FGSM/PGD/MI-FGSM bit-exact in f32 and f64, \
         ball + range, eps=0 no-op): PASS"
    );
}

// ---------------------------------------------------------------- C5 ----

#[test]
fn c5_mac_accounting() {
    // Hand-computed counts for three architectures.
    assert_eq!(conv_macs(3, 16, 3, (8, 8)), 27_648);
    let mut r = rng(0x3ac);
    let a = Network::<f64>::build(
        3,
        10,
        &[BlockSpec {
            channels: 16,
            pool_after: true,
        }],
        &mut r,
    );
    assert_eq!(count_macs(&a, (8, 8)), 27_648 + 160);
    let b = Network::<f64>::build(
        3,
        3,
        &[
            BlockSpec {
                channels: 8,
                pool_after: true,
            },
            BlockSpec {
                channels: 12,
                pool_after: false,
            },
        ],
        &mut r,
    );
    // 3*8*9*256 + 8*12*9*64 + 12*3 = 55296 + 55296 + 36
    assert_eq!(count_macs(&b, (16, 16)), 110_628);
    let c = Network::<f64>::build(
        1,
        2,
        &[BlockSpec {
            channels: 2,
            pool_after: false,
        }],
        &mut r,
    );
    assert_eq!(count_macs(&c, (4, 4)), 288 + 4);

    // Expected MACs under one-hot weights equal the exact count of the
    // materialized network, for every choice combination.
    let stages = [
        StageSpec {
            depth: 1,
            choices: vec![4, 6],
        },
        StageSpec {
            depth: 1,
            choices: vec![6, 8, 10],
        },
    ];
    let supernet = SuperNet::<f64>::build(3, 3, &stages, &mut r).unwrap();
    let input_hw = (12, 12);
    for i in 0..supernet.blocks[0].choices.len() {
        for j in 0..supernet.blocks[1].choices.len() {
            let picks = [i, j];
            let channels: Vec<usize> = supernet
                .blocks
                .iter()
                .zip(picks)
                .map(|(b, p)| b.choices[p])
                .collect();
            let mut g = Graph::<f64>::new();
            let rows: Vec<Var> = supernet
                .blocks
                .iter()
                .zip(picks)
                .map(|(b, p)| g.leaf(rnascl::gumbel::one_hot(b.choices.len(), p), false))
                .collect();
            let expected = supernet.expected_macs(&mut g, &rows, input_hw).unwrap();
            let exact = supernet.macs_for_channels(&channels, input_hw);
            assert_eq!(g.value(expected).item(), exact as f64);
            let student = supernet.materialize(&channels, &mut rng(1));
            assert_eq!(count_macs(&student, input_hw), exact);
        }
    }

    // Architecture descriptions reject anything off the search space.
    let channels = vec![6, 8];
    let macs = supernet.macs_for_channels(&channels, input_hw);
    let good = ArchDescription {
        channels: channels.clone(),
        tutors: vec![1, 0],
        macs,
    };
    good.validate(&supernet, Some(2), input_hw).unwrap();
    let bad_width = ArchDescription {
        channels: vec![5, 8],
        tutors: vec![1, 0],
        macs,
    };
    assert!(bad_width.validate(&supernet, Some(2), input_hw).is_err());
    let bad_tutor = ArchDescription {
        channels: channels.clone(),
        tutors: vec![2, 0],
        macs,
    };
    assert!(bad_tutor.validate(&supernet, Some(2), input_hw).is_err());
    let bad_macs = ArchDescription {
        channels,
        tutors: vec![1, 0],
        macs: macs + 1,
    };
    assert!(bad_macs.validate(&supernet, Some(2), input_hw).is_err());

    println!("ACCEPTANCE C5 MAC accounting (hand counts, one-hot expectation, description invariants): PASS");
}

// ---------------------------------------------------------------- C6 ----

#[test]
fn c6_desk_ablation() {
    let start = Instant::now();
    let cfg = RunConfig::default();
    assert!(cfg.ablate.seeds.len() >= 3, "need at least three seeds");
    let dir = test_dir("ablate");
    let rows = cmd_ablate(&cfg, &dir, 1).unwrap();
    let elapsed = start.elapsed();
    assert!(
        elapsed < Duration::from_secs(45 * 60),
        "ablation took {elapsed:?}"
    );

    let mean = |arm: &str, f: fn(&rnascl::commands::AblateRow) -> f64| -> f64 {
        let sel: Vec<f64> = rows.iter().filter(|r| r.arm == arm).map(f).collect();
        sel.iter().sum::<f64>() / sel.len() as f64
    };
    let pgd_full = mean("rnas_cl", |r| r.pgd);
    let pgd_std = mean("standard", |r| r.pgd);
    let max_icc = mean("icc", |r| r.pgd_max);
    let max_kl = mean("kl", |r| r.pgd_max);
    let clean_full = mean("rnas_cl", |r| r.clean);
    let clean_std = mean("standard", |r| r.clean);

    assert!(
        pgd_full > pgd_std,
        "PGD accuracy: rnas_cl {pgd_full:.3} vs standard {pgd_std:.3}"
    );
    assert!(
        max_icc > max_kl,
        "PGD at max budget: icc {max_icc:.3} vs kl {max_kl:.3}"
    );
    assert!(
        clean_full >= clean_std - 0.03,
        "clean accuracy: rnas_cl {clean_full:.3} vs standard {clean_std:.3}"
    );

    println!(
        "ACCEPTANCE C6 desk ablation over {} seeds in {elapsed:.0?} \
         (pgd {pgd_full:.3}>{pgd_std:.3}, max-eps {max_icc:.3}>{max_kl:.3}, \
         clean {clean_full:.3} vs {clean_std:.3}): PASS",
        cfg.ablate.seeds.len()
    );
}

// ---------------------------------------------------------------- C7 ----

fn small_pipeline_config() -> RunConfig {
    RunConfig::default()
        .apply_overrides(&[
            "run_id=repro".into(),
            "seed=5".into(),
            "data.train_per_class=20".into(),
            "data.test_per_class=10".into(),
            "data.size=10".into(),
            "teacher.channels=[6, 8]".into(),
            "teacher.pool_after=[true, true]".into(),
            "teacher.epochs=2".into(),
            "teacher.batch_size=20".into(),
            "search.epochs=3".into(),
            "search.batch_size=10".into(),
            "search.stages=[{ depth = 1, choices = [4, 6] }, { depth = 1, choices = [6, 8] }]"
                .into(),
            "train.epochs=3".into(),
            "train.batch_size=10".into(),
            "attack.steps=3".into(),
            "attack.batch_size=30".into(),
        ])
        .unwrap()
}

fn run_pipeline(cfg: &RunConfig, dir: &Path) {
    cmd_search(cfg, dir).unwrap();
    cmd_derive(cfg, dir).unwrap();
    cmd_train(cfg, dir).unwrap();
    cmd_attack(cfg, dir).unwrap();
}

#[test]
fn c7_same_seed_reruns_are_byte_identical() {
    let cfg = small_pipeline_config();
    let dir_a = test_dir("repro-a");
    let dir_b = test_dir("repro-b");
    run_pipeline(&cfg, &dir_a);
    run_pipeline(&cfg, &dir_b);

    for name in [
        SEARCH_METRICS,
        ARCH_FILE,
        TRAIN_METRICS,
        EVAL_CSV,
        STUDENT_CKPT,
    ] {
        let a = fs::read(dir_a.join(name)).unwrap();
        let b = fs::read(dir_b.join(name)).unwrap();
        assert!(!a.is_empty(), "{name} is empty");
        assert_eq!(a, b, "{name} differs between same-seed runs");
    }

    println!(
        "ACCEPTANCE C7 same-seed reruns byte-identical \
         (search/train metrics, eval, arch, student checkpoint): PASS"
    );
}

// ---------------------------------------------------------------- C8 ----

#[test]
fn c8_report_sweep() {
    let cfg = small_pipeline_config()
        .apply_overrides(&[
            "run_id=report".into(),
            "attack.sweep=[0, 2, 4, 6, 8, 10]".into(),
        ])
        .unwrap();
    let dir = test_dir("report");
    run_pipeline(&cfg, &dir);
    let files = cmd_report(&cfg, &dir).unwrap();
    for f in &files {
        assert!(f.exists(), "missing report file {}", f.display());
        assert!(
            fs::metadata(f).unwrap().len() > 0,
            "empty report file {}",
            f.display()
        );
    }

    let sweep = fs::read_to_string(dir.join("report/accuracy_vs_eps.csv")).unwrap();
    let rows: Vec<Vec<&str>> = sweep
        .lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| l.split(',').collect())
        .collect();
    let eps: Vec<&str> = rows.iter().map(|r| r[1]).collect();
    assert_eq!(eps, vec!["0", "2", "4", "6", "8", "10"]);
    for r in &rows {
        let acc: f64 = r[4].parse().unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }

    // The zero-budget sweep point must reproduce the clean evaluation to
    // the last digit.
    let eval = fs::read_to_string(dir.join(EVAL_CSV)).unwrap();
    let clean_acc = eval
        .lines()
        .find(|l| l.contains(",clean,"))
        .unwrap()
        .split(',')
        .nth(4)
        .unwrap()
        .to_string();
    assert_eq!(
        rows[0][4], clean_acc,
        "sweep at eps=0 differs from clean evaluation"
    );

    let svg = fs::read_to_string(dir.join("report/accuracy_vs_eps.svg")).unwrap();
    assert!(svg.contains("<svg") && svg.contains("polyline"));
    let pgm = fs::read(dir.join("report/student_attn_l0.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5"));
    let hist = fs::read_to_string(dir.join("report/tutor_histogram.csv")).unwrap();
    let total: usize = hist
        .lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| l.split(',').nth(1).unwrap().parse::<usize>().unwrap())
        .sum();
    assert_eq!(total, 2, "every student layer gets one tutor");
    let summary = fs::read_to_string(dir.join("report/summary.csv")).unwrap();
    let row: Vec<&str> = summary.lines().nth(1).unwrap().split(',').collect();
    assert!(row[5].parse::<u64>().unwrap() > 0 && row[6].parse::<u64>().unwrap() > 0);

    println!(
        "ACCEPTANCE C8 report sweep (0..10/255 PGD curve, eps=0 == clean, \
         attention maps, tutor histogram, summary): PASS"
    );
}
