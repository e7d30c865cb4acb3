//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`). The process fails when a
//! criterion fails, except for those listed in [`KNOWN_FAILURES`], which
//! still print FAIL with their numbers. Expect about 20 minutes on one core,
//! almost all of it in the training sweep.

use std::process::ExitCode;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pct_core::ablation::{run_ablation, AblationTable, Variant};
use pct_core::autodiff::gradcheck::{check, DEFAULT_STEP};
use pct_core::autodiff::{Graph, Var};
use pct_core::config::RunConfig;
use pct_core::ct::{cross_attention, ct_forward, ct_forward_with, estimate_bias, project, CtConfig, CtWeights, FeatureMap};
use pct_core::fairness::{fpr_protocol, global_threshold, GroupedScores, ScoredPair, DEFAULT_FPR_GRID};
use pct_core::losses::{face_loss, margin_logits, race_loss, total_loss, LossWeights, MarginConfig, MarginVariant};
use pct_core::optim::{ParamId, ParamStore};
use pct_core::pipeline::{evaluate, train};
use pct_core::report::{published_checks, to_json};
use pct_core::subspace::{decompose, oblique_projector, sample, LinearSignalModel};
use pct_core::synth::{generate, DatasetSpec};
use pct_core::{Result, Tensor};

/// Criteria that fail for reasons recorded in the decisions ledger.
const KNOWN_FAILURES: [&str; 2] = ["metric-arithmetic", "desk-debiasing"];

struct Outcome {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn outcome(name: &'static str, pass: bool, detail: String) -> Outcome {
    Outcome { name, pass, detail }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Values bounded away from 0 so that kinks are never straddled.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

// ---------------------------------------------------------------- arithmetic

fn metric_arithmetic() -> Outcome {
    let start = Instant::now();
    let checks = published_checks().unwrap();
    let secs = start.elapsed().as_secs_f64();
    let bad: Vec<String> = checks
        .iter()
        .filter(|c| !c.matches)
        .map(|c| {
            format!(
                "{} {} {}: got {:.2}/{:.2}, printed {:.2}/{:.2}",
                c.training_set, c.setting, c.method, c.ave_2dp, c.std_2dp, c.printed_ave, c.printed_std
            )
        })
        .collect();
    let ok = checks.len() - bad.len();
    let mut detail = format!("{ok}/{} rows reproduce at 2 decimals in {secs:.3}s", checks.len());
    for b in &bad {
        detail.push_str(&format!("\n      mismatch: {b}"));
    }
    outcome("metric-arithmetic", bad.is_empty() && secs < 1.0, detail)
}

// ----------------------------------------------------------------- projector

fn oblique_projector_oracle() -> Outcome {
    let start = Instant::now();
    let (mut worst_rec, mut worst_idem, mut worst_annih, mut worst_keep) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for i in 0..100 {
        let model = LinearSignalModel::random(16, 3, 2, 0.0, 1000 + i);
        let (x, truth) = sample(&model, i).unwrap();
        let dec = decompose(&x, &model.h_sys, &model.s_sys).unwrap();
        let rel = |a: &nalgebra::DVector<f64>, b: &nalgebra::DVector<f64>| (a - b).norm() / b.norm();
        worst_rec = worst_rec.max(rel(&dec.x_id_hat, &truth.x_id_hat)).max(rel(&dec.eps_hat, &truth.eps_hat));
        let e = oblique_projector(&model.s_sys, &model.h_sys).unwrap();
        let max_abs = |m: DMatrix<f64>| m.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        worst_idem = worst_idem.max(max_abs(&e * &e - &e));
        worst_annih = worst_annih.max(max_abs(&e * &model.h_sys));
        worst_keep = worst_keep.max(max_abs(&e * &model.s_sys - &model.s_sys));
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst_rec < 1e-8 && worst_idem <= 1e-10 && worst_annih <= 1e-10 && worst_keep <= 1e-10 && secs < 5.0;
    outcome(
        "oblique-projector",
        pass,
        format!(
            "100 instances: recovery {worst_rec:.1e} (< 1e-8), |E²−E| {worst_idem:.1e}, |EH| {worst_annih:.1e}, |ES−S| {worst_keep:.1e} (≤ 1e-10), {secs:.2}s"
        ),
    )
}

// ------------------------------------------------------------------ gradients

/// `Σ out ⊙ R` for a fixed pseudo-random `R` determined by the shape.
fn scalarize(g: &mut Graph, v: Var) -> Result<Var> {
    let shape = g.shape(v).to_vec();
    let n: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(7919 * n as u64 + shape.len() as u64);
    let r = g.constant(rand_tensor(&mut rng, &shape));
    let p = g.mul(v, r)?;
    Ok(g.sum(p))
}

type Case = (Vec<Tensor>, Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>);

fn dims(rng: &mut ChaCha8Rng, rank: usize) -> Vec<usize> {
    (0..rank).map(|_| rng.random_range(1..=4)).collect()
}

fn labels(rng: &mut ChaCha8Rng, b: usize, k: usize) -> Vec<usize> {
    (0..b).map(|_| rng.random_range(0..k)).collect()
}

fn random_ct(rng: &mut ChaCha8Rng) -> (CtConfig, usize, usize, ParamStore, CtWeights) {
    let heads = [1, 2, 4][rng.random_range(0..3)];
    let d_head = rng.random_range(1..=2);
    let cfg = CtConfig {
        d: heads * d_head,
        heads,
        max_rel_offset: rng.random_range(1..=3),
    };
    let (h, w) = (rng.random_range(1..=3), rng.random_range(1..=3));
    let mut store = ParamStore::new();
    let weights = CtWeights::init(&mut store, "ct", &cfg, rng).unwrap();
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let shape = store.get(id).value.shape().to_vec();
        store.get_mut(id).value = rand_tensor(rng, &shape).with_requires_grad(true);
    }
    (cfg, h, w, store, weights)
}

fn op_cases(op: &str, rng: &mut ChaCha8Rng, i: usize) -> Case {
    match op {
        "add" | "sub" | "mul" => {
            let s = dims(rng, 1 + i % 3);
            let inputs = vec![rand_tensor(rng, &s), rand_tensor(rng, &s)];
            let op = op.to_string();
            (
                inputs,
                Box::new(move |g, v| {
                    let y = match op.as_str() {
                        "add" => g.add(v[0], v[1])?,
                        "sub" => g.sub(v[0], v[1])?,
                        _ => g.mul(v[0], v[1])?,
                    };
                    scalarize(g, y)
                }),
            )
        }
        "scale" => {
            let s = dims(rng, 1 + i % 3);
            let c = rng.random_range(-3.0..3.0);
            (vec![rand_tensor(rng, &s)], Box::new(move |g, v| {
                let y = g.scale(v[0], c);
                scalarize(g, y)
            }))
        }
        "add_broadcast" => {
            let s = dims(rng, 2 + i % 2);
            let tail = s[s.len() - 1 - i % 2..].to_vec();
            (vec![rand_tensor(rng, &s), rand_tensor(rng, &tail)], Box::new(|g, v| {
                let y = g.add_broadcast(v[0], v[1])?;
                scalarize(g, y)
            }))
        }
        "matmul" => {
            let (b, m, k, n) = (rng.random_range(1..=3), rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=4));
            let (a, bb) = match i % 3 {
                0 => (vec![m, k], vec![k, n]),
                1 => (vec![b, m, k], vec![b, k, n]),
                _ => (vec![b, m, k], vec![k, n]),
            };
            (vec![rand_tensor(rng, &a), rand_tensor(rng, &bb)], Box::new(|g, v| {
                let y = g.matmul(v[0], v[1])?;
                scalarize(g, y)
            }))
        }
        "transpose_last2" => {
            let s = dims(rng, 2 + i % 2);
            (vec![rand_tensor(rng, &s)], Box::new(|g, v| {
                let y = g.transpose_last2(v[0])?;
                scalarize(g, y)
            }))
        }
        "reshape" => {
            let s = dims(rng, 3);
            let target = vec![s[2] * s[1], s[0]];
            (vec![rand_tensor(rng, &s)], Box::new(move |g, v| {
                let y = g.reshape(v[0], &target)?;
                scalarize(g, y)
            }))
        }
        "concat_last" => {
            let lead = dims(rng, 1 + i % 2);
            let parts = rng.random_range(1..=3);
            let inputs = (0..parts)
                .map(|_| {
                    let mut s = lead.clone();
                    s.push(rng.random_range(1..=3));
                    rand_tensor(rng, &s)
                })
                .collect();
            (inputs, Box::new(|g, v| {
                let y = g.concat_last(v)?;
                scalarize(g, y)
            }))
        }
        "relu" => {
            let s = dims(rng, 1 + i % 3);
            (vec![away_from_zero(rng, &s)], Box::new(|g, v| {
                let y = g.relu(v[0]);
                scalarize(g, y)
            }))
        }
        "softmax_rows" => {
            let s = dims(rng, 1 + i % 3);
            (vec![rand_tensor(rng, &s)], Box::new(|g, v| {
                let y = g.softmax_rows(v[0])?;
                scalarize(g, y)
            }))
        }
        "conv2d" => {
            let kernel = [1, 3][i % 2];
            let stride = 1 + (i / 2) % 2;
            let pad = if kernel == 3 { (i / 4) % 2 } else { 0 };
            let (b, c, o) = (rng.random_range(1..=2), rng.random_range(1..=2), rng.random_range(1..=2));
            let (h, w) = (rng.random_range(3..=5), rng.random_range(3..=5));
            (
                vec![rand_tensor(rng, &[b, c, h, w]), rand_tensor(rng, &[o, c, kernel, kernel])],
                Box::new(move |g, v| {
                    let y = g.conv2d(v[0], v[1], stride, pad)?;
                    scalarize(g, y)
                }),
            )
        }
        "add_channel_bias" => {
            let s = [rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(1..=3), rng.random_range(1..=3)];
            (vec![rand_tensor(rng, &s), rand_tensor(rng, &[s[1]])], Box::new(|g, v| {
                let y = g.add_channel_bias(v[0], v[1])?;
                scalarize(g, y)
            }))
        }
        "mean_last" => {
            let s = dims(rng, 2 + i % 2);
            (vec![rand_tensor(rng, &s)], Box::new(|g, v| {
                let y = g.mean_last(v[0])?;
                scalarize(g, y)
            }))
        }
        "sum" => {
            let s = dims(rng, 1 + i % 3);
            (vec![rand_tensor(rng, &s)], Box::new(|g, v| {
                let y = g.sum(v[0]);
                scalarize(g, y)
            }))
        }
        "mean" => {
            let s = dims(rng, 1 + i % 3);
            (vec![rand_tensor(rng, &s)], Box::new(|g, v| {
                let y = g.mean(v[0]);
                scalarize(g, y)
            }))
        }
        "l2_normalize_rows" => {
            let s = dims(rng, 1 + i % 3);
            (vec![away_from_zero(rng, &s)], Box::new(|g, v| {
                let y = g.l2_normalize_rows(v[0])?;
                scalarize(g, y)
            }))
        }
        "margin_logits_op" => {
            let (b, k) = (rng.random_range(1..=4), rng.random_range(2..=5));
            let variant = if i % 2 == 0 { MarginVariant::Arc } else { MarginVariant::Cos };
            let (s, m) = (rng.random_range(1.0..8.0), rng.random_range(0.0..0.5));
            let y = labels(rng, b, k);
            let cos = Tensor::new(&[b, k], (0..b * k).map(|_| rng.random_range(-0.9..0.9)).collect()).unwrap();
            (vec![cos], Box::new(move |g, v| {
                let z = g.margin_logits(v[0], &y, variant, s, m)?;
                scalarize(g, z)
            }))
        }
        "cross_entropy" => {
            let (b, k) = (rng.random_range(1..=4), rng.random_range(2..=5));
            let y = labels(rng, b, k);
            (vec![rand_tensor(rng, &[b, k])], Box::new(move |g, v| g.cross_entropy(v[0], &y)))
        }
        "rel_pos_bias" => {
            let off = rng.random_range(1..=3);
            let (h, w) = (rng.random_range(1..=4), rng.random_range(1..=4));
            let len = 2 * off + 1;
            (vec![rand_tensor(rng, &[len]), rand_tensor(rng, &[len])], Box::new(move |g, v| {
                let y = g.rel_pos_bias(v[0], v[1], h, w, off)?;
                scalarize(g, y)
            }))
        }
        "ct.project" => {
            let (n, d, dh) = (rng.random_range(1..=5), rng.random_range(1..=4), rng.random_range(1..=3));
            let x = if i % 2 == 0 { vec![n, d] } else { vec![2, n, d] };
            (vec![rand_tensor(rng, &x), rand_tensor(rng, &[d, dh]), rand_tensor(rng, &[dh])], Box::new(|g, v| {
                let y = project(g, v[0], v[1], v[2])?;
                scalarize(g, y)
            }))
        }
        "ct.cross_attention" => {
            let (h, w, dh, off) = (rng.random_range(1..=3), rng.random_range(1..=3), rng.random_range(1..=3), rng.random_range(1..=2));
            let n = h * w;
            let len = 2 * off + 1;
            let s = if i % 2 == 0 { vec![n, dh] } else { vec![2, n, dh] };
            (
                vec![rand_tensor(rng, &s), rand_tensor(rng, &s), rand_tensor(rng, &[len]), rand_tensor(rng, &[len])],
                Box::new(move |g, v| {
                    let y = cross_attention(g, v[0], v[1], h, w, v[2], v[3], off)?;
                    scalarize(g, y)
                }),
            )
        }
        "ct.estimate_bias" => {
            let heads = rng.random_range(1..=3);
            let (n, d, dh) = (rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=2));
            let mut inputs = vec![rand_tensor(rng, &[n, d])];
            for _ in 0..heads {
                inputs.push(rand_tensor(rng, &[n, n]));
                inputs.push(rand_tensor(rng, &[d, dh]));
                inputs.push(rand_tensor(rng, &[dh]));
            }
            (inputs, Box::new(move |g, v| {
                let attn: Vec<Var> = (0..heads).map(|h| v[1 + 3 * h]).collect();
                let vals: Vec<(Var, Var)> = (0..heads).map(|h| (v[2 + 3 * h], v[3 + 3 * h])).collect();
                let y = estimate_bias(g, &attn, v[0], &vals)?;
                scalarize(g, y)
            }))
        }
        "ct.ct_forward" => {
            let (cfg, h, w, store, weights) = random_ct(rng);
            let n = h * w;
            let ids: Vec<ParamId> = store.ids().collect();
            let mut inputs = vec![rand_tensor(rng, &[n, cfg.d]), rand_tensor(rng, &[n, cfg.d])];
            inputs.extend(ids.iter().map(|&id| store.get(id).value.clone().with_requires_grad(false)));
            (inputs, Box::new(move |g, v| {
                let x_id = FeatureMap::new(g, h, w, v[0])?;
                let x_ra = FeatureMap::new(g, h, w, v[1])?;
                let out = ct_forward_with(g, &weights, &cfg, &x_id, &x_ra, |_, id| {
                    v[2 + ids.iter().position(|&p| p == id).expect("known parameter")]
                })?;
                let a = scalarize(g, out.x_id_out.values)?;
                let r = g.scale(out.x_ra_out.values, 0.7);
                let b = scalarize(g, r)?;
                g.add(a, b)
            }))
        }
        "losses.margin_logits" => {
            let (b, k, e) = (rng.random_range(1..=4), rng.random_range(2..=5), rng.random_range(2..=4));
            let cfg = MarginConfig {
                variant: if i % 2 == 0 { MarginVariant::Arc } else { MarginVariant::Cos },
                s: rng.random_range(1.0..8.0),
                m: rng.random_range(0.0..0.5),
                num_classes: k,
            };
            let y = labels(rng, b, k);
            (vec![away_from_zero(rng, &[b, e]), away_from_zero(rng, &[k, e])], Box::new(move |g, v| {
                let z = margin_logits(g, v[0], v[1], &y, &cfg)?;
                scalarize(g, z)
            }))
        }
        "losses.face_loss" => {
            let (b, k) = (rng.random_range(1..=4), rng.random_range(2..=5));
            let y = labels(rng, b, k);
            (vec![rand_tensor(rng, &[b, k])], Box::new(move |g, v| face_loss(g, v[0], &y)))
        }
        "losses.race_loss" => {
            let (b, e, r) = (rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(2..=4));
            let y = labels(rng, b, r);
            (
                vec![rand_tensor(rng, &[b, e]), rand_tensor(rng, &[e, r]), rand_tensor(rng, &[r])],
                Box::new(move |g, v| race_loss(g, v[0], &y, v[1], v[2])),
            )
        }
        "losses.total_loss" => {
            let alpha = [0.0, 0.5, 1.0, 2.0][i % 4];
            (vec![rand_tensor(rng, &[1]), rand_tensor(rng, &[1])], Box::new(move |g, v| {
                total_loss(g, v[0], v[1], &LossWeights { alpha })
            }))
        }
        other => panic!("no gradient case for {other}"),
    }
}

const GRAD_OPS: [&str; 28] = [
    "add",
    "sub",
    "mul",
    "scale",
    "add_broadcast",
    "matmul",
    "transpose_last2",
    "reshape",
    "concat_last",
    "relu",
    "softmax_rows",
    "conv2d",
    "add_channel_bias",
    "mean_last",
    "sum",
    "mean",
    "l2_normalize_rows",
    "margin_logits_op",
    "cross_entropy",
    "rel_pos_bias",
    "ct.project",
    "ct.cross_attention",
    "ct.estimate_bias",
    "ct.ct_forward",
    "losses.margin_logits",
    "losses.face_loss",
    "losses.race_loss",
    "losses.total_loss",
];

const SHAPES_PER_OP: usize = 24;

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: (f64, &str) = (0.0, "");
    let mut failures = Vec::new();
    let mut checked = 0;
    for op in GRAD_OPS {
        for i in 0..SHAPES_PER_OP {
            let (inputs, f) = op_cases(op, &mut rng, i);
            match check(&inputs, DEFAULT_STEP, f) {
                Ok(r) => {
                    checked += r.checked;
                    if r.max_rel_error > worst.0 {
                        worst = (r.max_rel_error, op);
                    }
                    if r.max_rel_error >= 1e-4 {
                        failures.push(format!("{op}#{i}: {:.2e}", r.max_rel_error));
                    }
                }
                Err(e) => failures.push(format!("{op}#{i}: {e}")),
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let mut detail = format!(
        "{} ops × {SHAPES_PER_OP} shapes, {checked} entries, worst rel. error {:.2e} ({}), {secs:.1}s",
        GRAD_OPS.len(),
        worst.0,
        worst.1
    );
    for f in failures.iter().take(10) {
        detail.push_str(&format!("\n      {f}"));
    }
    outcome("gradient-suite", failures.is_empty() && secs < 60.0, detail)
}

// ------------------------------------------------------------- CT invariants

/// Plain-loop single-head forward for head `hd` of one block:
/// `attn_{ij}` and `ε = attn · (x_q-side values)`.
struct HeadOracle {
    attn: Vec<f64>,
    eps: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
fn head_oracle(
    store: &ParamStore,
    q_src: &[f64],
    k_src: &[f64],
    (wq, bq): (ParamId, ParamId),
    (wk, bk): (ParamId, ParamId),
    (wv, bv): (ParamId, ParamId),
    (rows, cols): (ParamId, ParamId),
    n: usize,
    d: usize,
    w: usize,
    off: usize,
) -> HeadOracle {
    let data = |id: ParamId| store.get(id).value.data().to_vec();
    let (wq, bq, wk, bk, wv, bv) = (data(wq), data(bq), data(wk), data(bk), data(wv), data(bv));
    let (rows, cols) = (data(rows), data(cols));
    let dh = bq.len();
    let proj = |x: &[f64], wm: &[f64], b: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; n * dh];
        for i in 0..n {
            for c in 0..dh {
                let mut s = b[c];
                for r in 0..d {
                    s += x[i * d + r] * wm[r * dh + c];
                }
                out[i * dh + c] = s;
            }
        }
        out
    };
    let (q, k, v) = (proj(q_src, &wq, &bq), proj(k_src, &wk, &bk), proj(q_src, &wv, &bv));
    let clip = |o: isize| (o.clamp(-(off as isize), off as isize) + off as isize) as usize;
    let mut attn = vec![0.0; n * n];
    for i in 0..n {
        let mut logits = vec![0.0; n];
        for (j, l) in logits.iter_mut().enumerate() {
            let dot: f64 = (0..dh).map(|c| q[i * dh + c] * k[j * dh + c]).sum();
            let dr = (j / w) as isize - (i / w) as isize;
            let dc = (j % w) as isize - (i % w) as isize;
            *l = dot / (dh as f64).sqrt() + rows[clip(dr)] + cols[clip(dc)];
        }
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
        for j in 0..n {
            attn[i * n + j] = (logits[j] - mx).exp() / z;
        }
    }
    let mut eps = vec![0.0; n * dh];
    for i in 0..n {
        for c in 0..dh {
            eps[i * dh + c] = (0..n).map(|j| attn[i * n + j] * v[j * dh + c]).sum();
        }
    }
    HeadOracle { attn, eps }
}

fn ct_invariants() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (mut row_err, mut decomp_err, mut oracle_err, mut zero_err) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let trials = 50;
    for t in 0..trials {
        let (cfg, h, w, mut store, weights) = random_ct(&mut rng);
        let n = h * w;
        let d = cfg.d;
        let batch = 1 + t % 2;
        let shape = if batch == 1 { vec![n, d] } else { vec![batch, n, d] };
        let xi = rand_tensor(&mut rng, &shape);
        let xr = rand_tensor(&mut rng, &shape);
        let mut g = Graph::new();
        let vi = g.constant(xi.clone());
        let vr = g.constant(xr.clone());
        let fi = FeatureMap::new(&g, h, w, vi).unwrap();
        let fr = FeatureMap::new(&g, h, w, vr).unwrap();
        let out = ct_forward(&mut g, &store, &weights, &cfg, &fi, &fr).unwrap();

        for &a in out.attn_id_to_ra.iter().chain(&out.attn_ra_to_id) {
            for row in g.value(a).data().chunks_exact(n) {
                row_err = row_err.max((row.iter().sum::<f64>() - 1.0).abs());
                assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            }
        }
        for (x, o, e) in [(&xi, out.x_id_out.values, out.eps_ra), (&xr, out.x_ra_out.values, out.eps_id)] {
            for ((xv, ov), ev) in x.data().iter().zip(g.value(o).data()).zip(g.value(e).data()) {
                decomp_err = decomp_err.max((ov + ev - xv).abs() / xv.abs().max(1.0));
            }
        }

        // Every sample against per-head loop oracles concatenated.
        let dh = cfg.d_head();
        for s in 0..batch {
            let si = &xi.data()[s * n * d..(s + 1) * n * d];
            let sr = &xr.data()[s * n * d..(s + 1) * n * d];
            for (hd, hw) in weights.heads.iter().enumerate() {
                let p = |pr: pct_core::ct::Projection| (pr.weight, pr.bias);
                let tables = (hw.rel_rows, hw.rel_cols);
                let id_block = head_oracle(&store, si, sr, p(hw.id_qry), p(hw.ra_key), p(hw.id_val), tables, n, d, w, cfg.max_rel_offset);
                let ra_block = head_oracle(&store, sr, si, p(hw.ra_qry), p(hw.id_key), p(hw.ra_val), tables, n, d, w, cfg.max_rel_offset);
                let plane = &g.value(out.attn_id_to_ra[hd]).data()[s * n * n..][..n * n];
                for (a, b) in plane.iter().zip(&id_block.attn) {
                    oracle_err = oracle_err.max((a - b).abs());
                }
                for (eps_var, oracle) in [(out.eps_ra, &id_block), (out.eps_id, &ra_block)] {
                    let full = &g.value(eps_var).data()[s * n * d..(s + 1) * n * d];
                    for i in 0..n {
                        for c in 0..dh {
                            oracle_err = oracle_err.max((full[i * d + hd * dh + c] - oracle.eps[i * dh + c]).abs());
                        }
                    }
                }
            }
        }

        weights.zero_values(&mut store);
        let mut g = Graph::new();
        let vi = g.constant(xi.clone());
        let vr = g.constant(xr.clone());
        let fi = FeatureMap::new(&g, h, w, vi).unwrap();
        let fr = FeatureMap::new(&g, h, w, vr).unwrap();
        let out = ct_forward(&mut g, &store, &weights, &cfg, &fi, &fr).unwrap();
        zero_err = zero_err
            .max(g.value(out.x_id_out.values).max_abs_diff(&xi))
            .max(g.value(out.x_ra_out.values).max_abs_diff(&xr));
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = row_err <= 1e-6 && decomp_err <= 1e-12 && oracle_err <= 1e-10 && zero_err == 0.0 && secs < 10.0;
    outcome(
        "ct-invariants",
        pass,
        format!(
            "{trials} random CTs: row-sum error {row_err:.1e} (≤ 1e-6), x_in − (x_out + ε) {decomp_err:.1e}, head-split oracle {oracle_err:.1e} (≤ 1e-10), zero-value identity max diff {zero_err:e}, {secs:.2}s"
        ),
    )
}

// ------------------------------------------------------------ loss reductions

fn loss_reductions() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut ce_err = 0.0f64;
    let mut uni_err = 0.0f64;
    for t in 0..40 {
        let (b, k, e) = (rng.random_range(1..=6), rng.random_range(2..=8), rng.random_range(2..=6));
        let x = away_from_zero(&mut rng, &[b, e]);
        let wt = away_from_zero(&mut rng, &[k, e]);
        let y = labels(&mut rng, b, k);
        let cfg = MarginConfig {
            variant: if t % 2 == 0 { MarginVariant::Arc } else { MarginVariant::Cos },
            s: 1.0,
            m: 0.0,
            num_classes: k,
        };
        let mut g = Graph::new();
        let (vx, vw) = (g.constant(x.clone()), g.constant(wt.clone()));
        let logits = margin_logits(&mut g, vx, vw, &y, &cfg).unwrap();
        let loss = face_loss(&mut g, logits, &y).unwrap();
        let loss = g.value(loss).data()[0];

        // Oracle: plain softmax cross-entropy over raw cosines.
        let norm = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut total = 0.0;
        for (i, xr) in x.data().chunks_exact(e).enumerate() {
            let cos: Vec<f64> = wt
                .data()
                .chunks_exact(e)
                .map(|wr| xr.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>() / (norm(xr) * norm(wr)))
                .collect();
            let lse = cos.iter().map(|c| c.exp()).sum::<f64>().ln();
            total += lse - cos[y[i]];
        }
        ce_err = ce_err.max((loss - total / b as f64).abs());

        // Uniform logits, straight and through identical class rows.
        let level = rng.random_range(-3.0..3.0);
        let mut g = Graph::new();
        let l = g.constant(Tensor::full(&[b, k], level));
        let ce = face_loss(&mut g, l, &y).unwrap();
        let ce = g.value(ce).data()[0];
        uni_err = uni_err.max((ce - (k as f64).ln()).abs());
        let row = away_from_zero(&mut rng, &[1, e]);
        let same = Tensor::new(&[k, e], row.data().repeat(k)).unwrap();
        let mut g = Graph::new();
        let (vx, vw) = (g.constant(x.clone()), g.constant(same));
        let logits = margin_logits(&mut g, vx, vw, &y, &MarginConfig { s: 16.0, ..cfg }).unwrap();
        let ce = face_loss(&mut g, logits, &y).unwrap();
        let ce = g.value(ce).data()[0];
        uni_err = uni_err.max((ce - (k as f64).ln()).abs());
    }
    outcome(
        "loss-reductions",
        ce_err <= 1e-10 && uni_err <= 1e-12,
        format!("40 cases: s=1,m=0 vs softmax-CE oracle {ce_err:.1e} (≤ 1e-10), uniform logits vs ln K {uni_err:.1e} (≤ 1e-12)"),
    )
}

// ------------------------------------------------------- FPR protocol checks

fn fpr_self_consistency() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_gap = 0.0f64; // |pooled − target| · N
    let mut runs = 0;
    let mut bias_nonzero = 0.0f64;
    for _ in 0..200 {
        let k = rng.random_range(2..=5);
        let per = rng.random_range(20..=400);
        let groups: Vec<Vec<ScoredPair>> = (0..k)
            .map(|_| {
                (0..per)
                    .map(|i| {
                        ScoredPair {
                            similarity: rng.random_range(-1.0..1.0),
                            genuine: i % 2 == 0,
                        }
                    })
                    .collect()
            })
            .collect();
        let scores = GroupedScores {
            names: (0..k).map(|g| format!("g{g}")).collect(),
            groups,
        };
        let n: usize = scores.impostors().iter().map(Vec::len).sum();
        for target in DEFAULT_FPR_GRID.iter().copied().chain([0.05, 0.2, 0.37]) {
            if target * (n as f64) < 1.0 {
                assert!(global_threshold(&scores.impostors().concat(), target).is_err());
                continue;
            }
            let p = fpr_protocol(&scores, target).unwrap();
            worst_gap = worst_gap.max((p.pooled_fpr - target).abs() * n as f64);
            runs += 1;
        }

        // Identical impostor multisets in every group.
        let base: Vec<ScoredPair> = scores.groups[0].clone();
        let same = GroupedScores {
            names: scores.names.clone(),
            groups: vec![base; k],
        };
        for target in [0.1, 0.25] {
            if let Ok(p) = fpr_protocol(&same, target) {
                bias_nonzero = bias_nonzero.max(p.metrics.bias_degree.unwrap().abs());
            }
        }
    }
    outcome(
        "fpr-protocol",
        worst_gap <= 1.0 && bias_nonzero == 0.0,
        format!(
            "{runs} (instance, target) cases: max |pooled − target|·N = {worst_gap:.3} (≤ 1); identical group FPRs give bias degree {bias_nonzero:e}"
        ),
    )
}

// ---------------------------------------------------------------- training

fn determinism() -> Outcome {
    let start = Instant::now();
    let ds = generate(&DatasetSpec::default(), 0).unwrap();
    let cfg = RunConfig {
        epochs: 2,
        ..RunConfig::default()
    };
    let run = || {
        let out = train(&cfg, &ds).unwrap();
        let m = evaluate(&out.model, &ds, &DEFAULT_FPR_GRID).unwrap();
        (out.model.to_checkpoint_bytes().unwrap(), to_json(&m).unwrap())
    };
    let (ck1, m1) = run();
    let (ck2, m2) = run();
    let secs = start.elapsed().as_secs_f64();
    outcome(
        "determinism",
        ck1 == ck2 && m1 == m2,
        format!(
            "default data and config, 2 epochs, twice: checkpoint {} bytes {}, metrics report {} bytes {}, {secs:.0}s",
            ck1.len(),
            if ck1 == ck2 { "identical" } else { "DIFFER" },
            m1.len(),
            if m1 == m2 { "identical" } else { "DIFFER" }
        ),
    )
}

fn per_seed_std(table: &AblationTable, v: &Variant) -> String {
    table
        .per_seed(v)
        .iter()
        .map(|r| format!("{:.4}", r.std))
        .collect::<Vec<_>>()
        .join(" ")
}

fn training_sweep() -> (Outcome, Outcome, String) {
    let ds = generate(&DatasetSpec::default(), 0).unwrap();
    let base = RunConfig::default();
    let seeds: Vec<u64> = (0..5).collect();
    let progress = |r: &pct_core::ablation::AblationRow| {
        eprintln!("  trained {} seed {}: std {:.4} in {:.0}s", r.variant, r.seed.unwrap_or_default(), r.std, r.wall_secs)
    };

    let start = Instant::now();
    let main = run_ablation(&base, &[Variant::Pct, Variant::NoCt], &seeds, &ds, &DEFAULT_FPR_GRID, progress).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let (wins, total) = main.std_wins(&Variant::Pct, &Variant::NoCt);
    let pct = main.aggregate(&Variant::Pct).unwrap();
    let no_ct = main.aggregate(&Variant::NoCt).unwrap();
    let drop_pp = (no_ct.ave - pct.ave) * 100.0;
    let debias = outcome(
        "desk-debiasing",
        wins >= 4 && drop_pp <= 1.0 && secs < 1800.0,
        format!(
            "PCT std below no-CT on {wins}/{total} seeds (need ≥ 4); std pct [{}] vs no-ct [{}]; mean accuracy {:.2}% vs {:.2}% (drop {drop_pp:.2} pp, allowed 1.0); {secs:.0}s (< 1800)",
            per_seed_std(&main, &Variant::Pct),
            per_seed_std(&main, &Variant::NoCt),
            pct.ave * 100.0,
            no_ct.ave * 100.0
        ),
    );

    // Progressive separability on the same PCT models (module property, not
    // an acceptance criterion).
    let rows = main.per_seed(&Variant::Pct);
    let monotone = rows
        .iter()
        .filter(|r| r.stage_separability.windows(2).all(|w| w[1] <= w[0]))
        .count();
    let sep: Vec<String> = rows
        .iter()
        .map(|r| format!("[{}]", r.stage_separability.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(",")))
        .collect();
    let info = format!(
        "group-probe accuracy non-increasing across stages in {monotone}/{} PCT seeds: {}",
        rows.len(),
        sep.join(" ")
    );

    let heads = run_ablation(&base, &[Variant::Heads(1), Variant::Heads(4)], &seeds, &ds, &DEFAULT_FPR_GRID, progress);
    let ablation = match heads {
        Ok(h) => {
            let complete = h.per_seed(&Variant::Heads(1)).len() == 5 && h.per_seed(&Variant::Heads(4)).len() == 5;
            let h1 = per_seed_std(&h, &Variant::Heads(1));
            let h4 = per_seed_std(&h, &Variant::Heads(4));
            let (w21, _) = {
                let mut merged = h.clone();
                merged.rows.extend(main.rows.iter().cloned());
                merged.std_wins(&Variant::Pct, &Variant::Heads(1))
            };
            outcome(
                "head-ablation",
                complete,
                format!(
                    "H=1,2,4 × 5 seeds complete; per-seed std H=1 [{h1}] H=2 [{}] H=4 [{h4}]; H=2 below H=1 on {w21}/5 (informational)",
                    per_seed_std(&main, &Variant::Pct)
                ),
            )
        }
        Err(e) => outcome("head-ablation", false, format!("run failed: {e}")),
    };
    (debias, ablation, info)
}

fn main() -> ExitCode {
    let quick = [
        metric_arithmetic as fn() -> Outcome,
        oblique_projector_oracle,
        gradient_suite,
        ct_invariants,
        loss_reductions,
        fpr_self_consistency,
        determinism,
    ];
    let mut outcomes: Vec<Outcome> = Vec::new();
    let print = |o: &Outcome| {
        let known = KNOWN_FAILURES.contains(&o.name);
        let tag = match (o.pass, known) {
            (true, _) => "PASS",
            (false, true) => "FAIL (known, see decisions ledger)",
            (false, false) => "FAIL",
        };
        println!("{tag} {}: {}", o.name, o.detail);
    };
    for f in quick {
        let o = f();
        print(&o);
        outcomes.push(o);
    }
    let (debias, ablation, info) = training_sweep();
    for o in [debias, ablation] {
        print(&o);
        outcomes.push(o);
    }
    println!("INFO progressive-separability: {info}");

    let unexpected: Vec<&str> = outcomes
        .iter()
        .filter(|o| !o.pass && !KNOWN_FAILURES.contains(&o.name))
        .map(|o| o.name)
        .collect();
    let passed = outcomes.iter().filter(|o| o.pass).count();
    println!("acceptance: {passed}/{} criteria pass", outcomes.len());
    if unexpected.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("unexpected failures: {}", unexpected.join(", "));
        ExitCode::FAILURE
    }
}
