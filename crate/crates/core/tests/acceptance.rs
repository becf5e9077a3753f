//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits with a
//! failure status if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use taf_core::data_model::{CodeKind, CodeMatrix, Segment, Transcript};
use taf_core::datagen::{generate, SynthConfig};
use taf_core::evaluation::{f1_at_50, hungarian_match, mof, Mapping};
use taf_core::gradcheck::check_gradients;
use taf_core::inference::{path_score, viterbi_decode, DecodeConfig};
use taf_core::network::checkpoint::encode_checkpoint;
use taf_core::network::{Model, ModelConfig};
use taf_core::ot_prior::{
    build_fixed_order_prior, build_permutation_prior, default_sigma, marginal_deviation, sinkhorn_with_prior,
    DatasetPreset, SinkhornConfig,
};
use taf_core::pipeline::{evaluate_model, Variant};
use taf_core::pseudo_labels::{estimate_transcript, segment_pseudo_labels, PseudoLabelConfig};
use taf_core::training::{compute_targets, loss_and_grads, train, write_loss_log, OrderSource, Targets, TrainConfig};

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn within(elapsed: Duration, budget_secs: f64) -> bool {
    elapsed.as_secs_f64() < budget_secs
}

fn random_similarity(rng: &mut ChaCha8Rng, b: usize, k: usize) -> Array2<f64> {
    Array2::from_shape_fn((b, k), |_| rng.gen_range(-1.0..1.0))
}

fn c1_sinkhorn_marginals() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for n in 0..100 {
        let b = rng.gen_range(1..=64);
        let k = rng.gen_range(1..=8);
        let rho = DatasetPreset::ALL[n % DatasetPreset::ALL.len()].rho();
        let sim = random_similarity(&mut rng, b, k);
        let prior = build_fixed_order_prior(b, k, default_sigma(k)).unwrap();
        let plan = sinkhorn_with_prior(sim.view(), &prior, &SinkhornConfig::converged(rho, 1e-6)).unwrap();
        worst = worst.max(marginal_deviation(plan.plan.view()));
    }
    let elapsed = start.elapsed();
    Outcome::new(
        worst < 1e-6 && within(elapsed, 1.0),
        format!("max deviation {worst:.2e}, {:.3}s", elapsed.as_secs_f64()),
    )
}

fn c2_sinkhorn_fixed_point() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst: f64 = 0.0;
    for n in 0..50 {
        let b = rng.gen_range(2..=48);
        let k = rng.gen_range(2..=8);
        let rho = DatasetPreset::ALL[n % DatasetPreset::ALL.len()].rho();
        let sim = random_similarity(&mut rng, b, k);
        let mut order: Vec<usize> = (0..k).collect();
        order.shuffle(&mut rng);
        let prior = build_permutation_prior(b, k, default_sigma(k), &Transcript::new(order).unwrap()).unwrap();
        let plan = sinkhorn_with_prior(sim.view(), &prior, &SinkhornConfig::converged(rho, 1e-9)).unwrap();
        // Residual of log(Q/M) - S/rho after removing its best u_i + v_j fit.
        let l = Array2::from_shape_fn((b, k), |(i, j)| {
            (plan.plan[[i, j]] / prior.values[[i, j]]).ln() - sim[[i, j]] / rho
        });
        for i in 0..b {
            for j in 0..k {
                let r = l[[i, j]] - l[[i, 0]] - l[[0, j]] + l[[0, 0]];
                worst = worst.max(r.abs());
            }
        }
    }
    Outcome::new(worst < 1e-6, format!("max rank-1 residual {worst:.2e}"))
}

fn c3_gradient_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst = (0.0f64, String::new());
    let shapes = [(8, 4, 8), (6, 3, 6), (5, 2, 4), (7, 4, 8)];
    for (n, &(b, k, d)) in shapes.iter().enumerate() {
        let mut cfg = ModelConfig::new(3, d, k);
        // Finite differences need a smooth alignment softmax; the analytic
        // path is identical at every temperature.
        cfg.tau_prime = 0.5;
        cfg.encoder_positions = n % 2 == 0;
        let mut model = Model::new(cfg, n as u64).unwrap();
        for (name, t) in model.params.tensors_mut() {
            if name.ends_with("bias") || name.ends_with("gain") {
                t.mapv_inplace(|v| v + rng.gen_range(-0.3..0.3));
            }
        }
        let x = Array2::from_shape_fn((b, 3), |_| rng.gen_range(-1.0..1.0));
        let mut order: Vec<usize> = (0..k).collect();
        order.shuffle(&mut rng);
        let t = Transcript::new(order).unwrap();
        let codes = |rng: &mut ChaCha8Rng| {
            let raw = Array2::from_shape_fn((b, k), |_| rng.gen_range(0.05..1.0));
            let total = raw.sum();
            raw / total
        };
        let targets = Targets {
            frame: CodeMatrix::new(codes(&mut rng), CodeKind::PseudoFrame),
            segment: Some(segment_pseudo_labels(&t, k).unwrap()),
            align: Some(CodeMatrix::new(codes(&mut rng), CodeKind::PseudoAlign)),
            transcript: Some(t),
        };
        let dropout = (n % 2 == 1).then_some(n as u64);
        let report = check_gradients(&model, x.view(), &targets, 1.0, 1.0, 1e-4, dropout).unwrap();
        let w = report.worst().unwrap();
        if w.relative_error > worst.0 {
            worst = (w.relative_error, w.name.clone());
        }
    }
    let elapsed = start.elapsed();
    Outcome::new(
        worst.0 < 1e-4 && within(elapsed, 30.0),
        format!(
            "max relative error {:.2e} ({}), {:.1}s",
            worst.0,
            worst.1,
            elapsed.as_secs_f64()
        ),
    )
}

fn compositions(total: usize, parts: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    if parts == 1 {
        prefix.push(total);
        out.push(prefix.clone());
        prefix.pop();
        return;
    }
    for first in 1..=total - (parts - 1) {
        prefix.push(first);
        compositions(total - first, parts - 1, prefix, out);
        prefix.pop();
    }
}

fn c4_viterbi_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut mismatches = 0;
    for _ in 0..200 {
        let k = rng.gen_range(1..=3);
        let b = rng.gen_range(k..=10);
        let raw = Array2::from_shape_fn((b, k), |_| rng.gen_range(0.01..1.0));
        let probs = &raw / &raw.sum_axis(ndarray::Axis(1)).insert_axis(ndarray::Axis(1));
        let mut order: Vec<usize> = (0..k).collect();
        order.shuffle(&mut rng);
        let t = Transcript::new(order.clone()).unwrap();
        let logp = probs.mapv(f64::ln);
        let mut all = Vec::new();
        compositions(b, k, &mut Vec::new(), &mut all);
        let best = all
            .iter()
            .map(|lens| {
                let labels: Vec<usize> = lens
                    .iter()
                    .zip(&order)
                    .flat_map(|(&n, &a)| std::iter::repeat_n(a, n))
                    .collect();
                (path_score(logp.view(), &labels), labels)
            })
            .fold(None, |acc: Option<(f64, Vec<usize>)>, cand| match acc {
                Some(a) if a.0 >= cand.0 => Some(a),
                _ => Some(cand),
            })
            .unwrap();
        let dp = viterbi_decode(probs.view(), &t, 1).unwrap();
        let dp_score = path_score(logp.view(), &dp.framewise);
        if (dp_score - best.0).abs() > 1e-9 || dp.framewise != best.1 {
            mismatches += 1;
        }
    }
    let elapsed = start.elapsed();
    Outcome::new(
        mismatches == 0 && within(elapsed, 5.0),
        format!("{mismatches} mismatches in 200, {:.3}s", elapsed.as_secs_f64()),
    )
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    fn rec(k: usize, cur: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for c in 0..k {
            if !used[c] {
                used[c] = true;
                cur.push(c);
                rec(k, cur, used, out);
                cur.pop();
                used[c] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(k, &mut Vec::new(), &mut vec![false; k], &mut out);
    out
}

fn c5_hungarian_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut mismatches = 0;
    for _ in 0..200 {
        let k = rng.gen_range(1..=6);
        let m = Array2::from_shape_fn((k, k), |_| rng.gen_range(0..50u64));
        // Permutations come out in lexicographic order, so the first optimum
        // is the lexicographically smallest one.
        let mut best: Option<(u64, Vec<usize>)> = None;
        for p in permutations(k) {
            let total: u64 = p.iter().enumerate().map(|(r, &c)| m[[r, c]]).sum();
            if best.as_ref().is_none_or(|(b, _)| total > *b) {
                best = Some((total, p));
            }
        }
        let expected = Mapping(best.unwrap().1.into_iter().map(Some).collect());
        if hungarian_match(&m) != expected {
            mismatches += 1;
        }
    }
    let elapsed = start.elapsed();
    Outcome::new(
        mismatches == 0 && within(elapsed, 5.0),
        format!("{mismatches} mismatches in 200, {:.3}s", elapsed.as_secs_f64()),
    )
}

fn c6_metric_fixtures() -> Outcome {
    let seg = |action, start, end| Segment { action, start, end };
    let id = Mapping::identity(2);
    let gt_segs = [seg(0, 0, 4), seg(1, 5, 9)];
    let checks = [
        hungarian_match(&ndarray::array![[5u64, 1], [2, 3]]) == Mapping(vec![Some(0), Some(1)]),
        mof(&[vec![0, 0, 1, 1]], &[vec![0, 1, 1, 1]], &id).unwrap() == 0.75,
        mof(&[vec![0, 1, 1]], &[vec![0, 1, 1]], &id).unwrap() == 1.0,
        mof(&[vec![0, taf_core::data_model::IGNORE]], &[vec![0, 1]], &id).unwrap() == 1.0,
        f1_at_50(&gt_segs, &[seg(0, 0, 1), seg(1, 2, 9)]) == 0.5,
        f1_at_50(&gt_segs, &gt_segs) == 1.0,
        f1_at_50(&gt_segs, &[]) == 0.0,
    ];
    let passed = checks.iter().filter(|&&c| c).count();
    Outcome::new(
        passed == checks.len(),
        format!("{passed}/{} fixtures exact", checks.len()),
    )
}

fn train_and_score(variant: Variant, permute_prob: f64, seed: u64) -> (f64, f64) {
    let synth = SynthConfig {
        num_videos: 20,
        num_actions: 5,
        input_dim: 16,
        min_frames: 100,
        max_frames: 200,
        cluster_sep: 6.0,
        noise_sigma: 1.0,
        permute_prob,
        missing_prob: 0.0,
        seed,
    };
    let (dataset, _) = generate(&synth).unwrap();
    let model = Model::new(ModelConfig::new(16, 32, 5), seed).unwrap();
    let cfg = variant.train_config(&TrainConfig {
        seed,
        ..TrainConfig::default()
    });
    let out = train(model, &dataset.features(), &cfg, |_, _| {}).unwrap();
    evaluate_model(&out.model, &dataset, &variant.decode_config(&DecodeConfig::default())).unwrap()
}

fn c7_end_to_end_fixed_order() -> Outcome {
    let start = Instant::now();
    let (mof, f1) = train_and_score(Variant::Full, 0.0, 7);
    let elapsed = start.elapsed();
    Outcome::new(
        mof >= 0.85 && f1 >= 0.75 && within(elapsed, 600.0),
        format!("MOF {mof:.4}, F1 {f1:.4}, {:.1}s", elapsed.as_secs_f64()),
    )
}

const PERMUTED_SEEDS: [u64; 3] = [0, 1, 2];

/// Mean MOF over the permuted seeds, one run per variant, shared by the
/// permutation and component criteria.
fn permuted_mof(variant: Variant) -> f64 {
    static CACHE: OnceLock<std::sync::Mutex<Vec<(Variant, f64)>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    if let Some(&(_, m)) = cache.lock().unwrap().iter().find(|(v, _)| *v == variant) {
        return m;
    }
    let mean = PERMUTED_SEEDS
        .iter()
        .map(|&s| train_and_score(variant, 0.5, s).0)
        .sum::<f64>()
        / PERMUTED_SEEDS.len() as f64;
    cache.lock().unwrap().push((variant, mean));
    mean
}

fn c8_permutation_awareness() -> Outcome {
    let full = permuted_mof(Variant::Full);
    let fixed = permuted_mof(Variant::FixedOrderTargets);
    Outcome::new(
        full - fixed >= 0.03,
        format!(
            "full {full:.4} vs fixed-order targets {fixed:.4} (margin {:+.4})",
            full - fixed
        ),
    )
}

fn c9_component_trend() -> Outcome {
    let frame = permuted_mof(Variant::Frame);
    let frame_segment = permuted_mof(Variant::FrameSegment);
    let full = permuted_mof(Variant::Full);
    Outcome::new(
        frame < frame_segment && frame_segment <= full,
        format!("frame {frame:.4}, frame-segment {frame_segment:.4}, full {full:.4}"),
    )
}

fn c10_stop_gradient() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    let mut identical = true;
    for n in 0..5 {
        let k = rng.gen_range(2..=4);
        let b = rng.gen_range(k + 2..=16);
        let model = Model::new(ModelConfig::new(6, 8, k), n).unwrap();
        let x = Array2::from_shape_fn((b, 6), |_| rng.gen_range(-1.0..1.0));
        let pseudo = PseudoLabelConfig::default();

        // Targets computed from the live trace.
        let enc = model.encode::<ChaCha8Rng>(x.view(), None).unwrap();
        let live = compute_targets(
            enc.embeddings.view(),
            model.params.prototypes.view(),
            true,
            OrderSource::Estimated,
            &pseudo,
        )
        .unwrap();
        let trace = model
            .forward_from::<ChaCha8Rng>(enc, live.transcript.as_ref(), None)
            .unwrap();
        let (_, g_live) = loss_and_grads(&model, &trace, &live, 1.0, 1.0).unwrap();

        // The same values from an independent run, copied into fresh constants.
        let detached_model = model.clone();
        let detached_enc = detached_model.encode::<ChaCha8Rng>(x.view(), None).unwrap();
        let detached = compute_targets(
            detached_enc.embeddings.view(),
            detached_model.params.prototypes.view(),
            true,
            OrderSource::Estimated,
            &pseudo,
        )
        .unwrap();
        let copy = |m: &CodeMatrix| {
            let values: Vec<f64> = m.values.iter().copied().collect();
            CodeMatrix::new(Array2::from_shape_vec(m.values.dim(), values).unwrap(), m.kind)
        };
        let constants = Targets {
            frame: copy(&detached.frame),
            transcript: detached.transcript.clone(),
            segment: detached.segment.as_ref().map(copy),
            align: detached.align.as_ref().map(copy),
        };
        let (_, g_const) = loss_and_grads(&model, &trace, &constants, 1.0, 1.0).unwrap();
        for ((_, a), (_, c)) in g_live.tensors().iter().zip(g_const.tensors()) {
            if a.iter().zip(c.iter()).any(|(x, y)| x.to_bits() != y.to_bits()) {
                identical = false;
            }
        }
    }
    Outcome::new(identical, "gradients bit-identical on 5 instances")
}

fn c11_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let synth = SynthConfig {
        num_videos: 4,
        min_frames: 30,
        max_frames: 50,
        permute_prob: 0.5,
        seed: 11,
        ..SynthConfig::default()
    };
    let (dataset, _) = generate(&synth).unwrap();
    let cfg = TrainConfig {
        stage1_epochs: 3,
        stage2_epochs: 3,
        seed: 11,
        ..TrainConfig::default()
    };
    let run = |tag: &str| {
        let model = Model::new(ModelConfig::new(synth.input_dim, 16, synth.num_actions), 11).unwrap();
        let out = train(model, &dataset.features(), &cfg, |_, _| {}).unwrap();
        let log_path = dir.path().join(format!("loss_{tag}.csv"));
        write_loss_log(&out.log, &log_path).unwrap();
        let echo = serde_json::json!({ "seed": cfg.seed });
        (
            encode_checkpoint(&out.model, &echo).unwrap(),
            std::fs::read(&log_path).unwrap(),
        )
    };
    let (ckpt_a, log_a) = run("a");
    let (ckpt_b, log_b) = run("b");
    Outcome::new(
        ckpt_a == ckpt_b && log_a == log_b,
        format!("checkpoint {} bytes, loss log {} bytes", ckpt_a.len(), log_a.len()),
    )
}

fn c12_transcript_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1212);
    let mut violations = 0;
    for _ in 0..1000 {
        // Anchors tied across actions break by action id, which relabeling
        // does not preserve, so draws with a shared anchor frame are redrawn.
        let q = loop {
            let k = rng.gen_range(1..=8);
            let b = rng.gen_range(k..=64);
            let q = Array2::from_shape_fn((b, k), |_| rng.gen_range(0.0..1.0));
            let mut anchors: Vec<usize> = q
                .columns()
                .into_iter()
                .map(|c| (0..b).fold(0, |best, i| if c[i] > c[best] { i } else { best }))
                .collect();
            anchors.sort_unstable();
            anchors.dedup();
            if anchors.len() == k {
                break q;
            }
        };
        let (b, k) = q.dim();
        let t = estimate_transcript(q.view());

        let scales: Vec<f64> = (0..k).map(|_| rng.gen_range(0.1..10.0)).collect();
        let scaled = Array2::from_shape_fn((b, k), |(i, j)| q[[i, j]] * scales[j]);
        if estimate_transcript(scaled.view()) != t {
            violations += 1;
        }

        // Column j of q becomes column pi[j]; action a becomes pi[a].
        let mut pi: Vec<usize> = (0..k).collect();
        pi.shuffle(&mut rng);
        let mut permuted = Array2::zeros((b, k));
        for j in 0..k {
            permuted.column_mut(pi[j]).assign(&q.column(j));
        }
        let expected: Vec<usize> = t.actions().iter().map(|&a| pi[a]).collect();
        if estimate_transcript(permuted.view()).actions() != expected.as_slice() {
            violations += 1;
        }
    }
    Outcome::new(violations == 0, format!("{violations} violations on 1000 matrices"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("sinkhorn marginals", c1_sinkhorn_marginals),
        ("sinkhorn fixed-point structure", c2_sinkhorn_fixed_point),
        ("gradient oracle", c3_gradient_oracle),
        ("viterbi oracle", c4_viterbi_oracle),
        ("hungarian oracle", c5_hungarian_oracle),
        ("metric fixtures", c6_metric_fixtures),
        ("end-to-end synthetic, fixed order", c7_end_to_end_fixed_order),
        ("permutation awareness", c8_permutation_awareness),
        ("component trend", c9_component_trend),
        ("stop-gradient contract", c10_stop_gradient),
        ("determinism", c11_determinism),
        ("transcript estimation properties", c12_transcript_properties),
    ];
    let mut failed = 0;
    for (n, (name, check)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Outcome::new(false, format!("panicked: {msg}"))
        });
        if !outcome.pass {
            failed += 1;
        }
        let status = if outcome.pass { "PASS" } else { "FAIL" };
        println!("criterion {:2} {name}: {status} ({})", n + 1, outcome.detail);
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
