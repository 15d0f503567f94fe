//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run a subset with `cargo test --test acceptance -- 6 8`.

use std::time::Instant;

use layerprune::evaluation::{co2_estimate, co2_reduction, latency_compare, training_flops, Co2Config, LatencyConfig, PrunedStep};
use layerprune::linalg::{matmul, Matrix};
use layerprune::network::{backward, forward_trace, write_checkpoint, Activation};
use layerprune::pruner::{
    l1_filter_prune_units, oracle_rank, prune_iterative, prune_iterative_with_threads, prune_one,
    random_iterative, score_candidates, score_subsample, spearman, PruneConfig, ReferenceMode,
};
use layerprune::rng;
use layerprune::similarity::{cka, cka_linear_feature, Bandwidth};
use layerprune::training::{
    evaluate, softmax_cross_entropy, stratified_split, synth_dataset, train, Dataset, SplitData, TrainConfig,
};
use layerprune::{ArchSpec, BlockId, KernelKind, ResidualNet, StageCap};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn random_matrix(r: &mut rng::Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(r))
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

// ------------------------------------------------------------------ 1

/// `tr(K H L H) / (n−1)²` with `H = I − 11ᵀ/n` built explicitly.
fn hsic_explicit(k: &Matrix, l: &Matrix) -> f64 {
    let n = k.rows();
    let h = Matrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 } - 1.0 / n as f64);
    let khlh = matmul(&matmul(&matmul(k, &h).unwrap(), l).unwrap(), &h).unwrap();
    (0..n).map(|i| khlh.get(i, i)).sum::<f64>() / ((n - 1) * (n - 1)) as f64
}

fn linear_gram(x: &Matrix) -> Matrix {
    matmul(x, &x.transpose()).unwrap()
}

fn criterion_1() -> Outcome {
    let t = Instant::now();
    let mut r = rng::seeded(1);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let n = r.random_range(3..=16);
        let (dx, dy) = (r.random_range(1..=8), r.random_range(1..=8));
        let x = random_matrix(&mut r, n, dx);
        let y = random_matrix(&mut r, n, dy);
        let (k, l) = (linear_gram(&x), linear_gram(&y));
        let oracle = hsic_explicit(&k, &l) / (hsic_explicit(&k, &k) * hsic_explicit(&l, &l)).sqrt();
        let via_gram = cka(&x, &y, KernelKind::Linear).unwrap().cka;
        let via_features = cka_linear_feature(&x, &y).unwrap().cka;
        worst = worst.max(rel(via_gram, oracle)).max(rel(via_features, oracle));
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-10 && secs < 2.0,
        format!("max relative disagreement {worst:.2e} over 200 pairs in {secs:.3} s"),
    )
}

// ------------------------------------------------------------------ 2

/// Random orthogonal matrix by Gram-Schmidt.
fn orthogonal(r: &mut rng::Rng, d: usize) -> Matrix {
    let mut cols: Vec<Vec<f64>> = Vec::new();
    while cols.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut *r)).collect();
        for c in &cols {
            let p: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(c).for_each(|(a, b)| *a -= p * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-8 {
            cols.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    Matrix::from_fn(d, d, |i, j| cols[j][i])
}

fn criterion_2() -> Outcome {
    let mut r = rng::seeded(2);
    let kernels = [
        KernelKind::Linear,
        KernelKind::Rbf {
            bandwidth: Bandwidth::MedianHeuristic,
        },
    ];
    let (mut orth, mut scale, mut sym, mut selfsim): (f64, f64, f64, f64) = (0.0, 0.0, 0.0, 0.0);
    let mut in_range = true;
    for _ in 0..100 {
        let n = r.random_range(4..=24);
        let d = r.random_range(1..=8);
        let dy = r.random_range(1..=8);
        let x = random_matrix(&mut r, n, d);
        let y = random_matrix(&mut r, n, dy);
        let q = orthogonal(&mut r, d);
        let xq = matmul(&x, &q).unwrap();
        let alpha = [1e-3, 0.5, 7.0, 1e3][r.random_range(0..4)];
        for kernel in kernels {
            let base = cka(&x, &y, kernel).unwrap().cka;
            orth = orth.max((cka(&xq, &y, kernel).unwrap().cka - base).abs());
            scale = scale.max((cka(&x.scale(alpha), &y, kernel).unwrap().cka - base).abs());
            sym = sym.max((cka(&y, &x, kernel).unwrap().cka - base).abs());
            selfsim = selfsim.max((cka(&x, &x, kernel).unwrap().cka - 1.0).abs());
            in_range &= (0.0..=1.0).contains(&base);
        }
        let f = cka_linear_feature(&x, &y).unwrap().cka;
        orth = orth.max((cka_linear_feature(&xq, &y).unwrap().cka - f).abs());
        scale = scale.max((cka_linear_feature(&x, &y.scale(alpha)).unwrap().cka - f).abs());
        sym = sym.max((cka_linear_feature(&y, &x).unwrap().cka - f).abs());
        in_range &= (0.0..=1.0).contains(&f);
    }
    outcome(
        orth <= 1e-8 && scale <= 1e-8 && sym <= 1e-12 && selfsim <= 1e-12 && in_range,
        format!(
            "orthogonal {orth:.1e}, scaling {scale:.1e}, symmetry {sym:.1e}, |CKA(R,R)-1| {selfsim:.1e}, range ok = {in_range}"
        ),
    )
}

// ------------------------------------------------------------------ 3

fn random_spec(r: &mut rng::Rng, seed: u64) -> ArchSpec {
    let stages = r.random_range(1..=3);
    ArchSpec {
        input_dim: r.random_range(2..=6),
        stage_widths: (0..stages).map(|_| r.random_range(3..=9)).collect(),
        blocks_per_stage: (0..stages).map(|_| r.random_range(3..=6)).collect(),
        num_classes: r.random_range(2..=4),
        activation: Activation::Relu,
        seed,
    }
}

fn criterion_3() -> Outcome {
    let mut r = rng::seeded(3);
    let mut failures = Vec::new();
    let mut worst: f64 = 0.0;
    for trial in 0..20 {
        let spec = random_spec(&mut r, trial);
        let net = ResidualNet::build(&spec).unwrap();
        let candidates = net.candidate_blocks();
        let target = candidates[r.random_range(0..candidates.len())];
        let net = net.with_zeroed_branch(target).unwrap();
        let x = random_matrix(&mut r, 64, spec.input_dim);
        let scoring = score_candidates(&net, &x, KernelKind::Linear).unwrap();
        let s = scoring.scores.iter().find(|c| c.block == target).unwrap();
        worst = worst.max(s.score);
        let (pruned, rec) = prune_one(&net, &x, KernelKind::Linear).unwrap();
        let (again, rec2) = prune_one(&net, &x, KernelKind::Linear).unwrap();
        if s.score >= 1e-12 || rec.removed != target || pruned != again || rec2.removed != rec.removed {
            failures.push(trial);
        }
    }
    outcome(
        failures.is_empty(),
        format!("20 nets, largest zero-branch score {worst:.1e}, failing trials {failures:?}"),
    )
}

// ------------------------------------------------------------------ 4

fn criterion_4() -> Outcome {
    let t = Instant::now();
    let spec = ArchSpec {
        input_dim: 3,
        stage_widths: vec![4, 3],
        blocks_per_stage: vec![2, 3],
        num_classes: 3,
        activation: Activation::Relu,
        seed: 4,
    };
    let net = ResidualNet::build(&spec).unwrap();
    let mut r = rng::seeded(4);
    let x = random_matrix(&mut r, 7, 3);
    let y: Vec<usize> = (0..7).map(|i| i % 3).collect();
    let loss = |n: &ResidualNet, x: &Matrix| softmax_cross_entropy(&n.forward(x).unwrap(), &y).0;
    let trace = forward_trace(&net, &x).unwrap();
    let (_, d_logits) = softmax_cross_entropy(trace.logits(), &y);
    let (grads, d_input) = backward(&net, &trace, &d_logits).unwrap();
    let h = 1e-6;
    let close = |a: f64, num: f64| (a - num).abs() <= 1e-4 * a.abs().max(num.abs()).max(1e-6);

    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.to_vec()).collect();
    let mut bad_groups = Vec::new();
    let mut worst: f64 = 0.0;
    for (g, group) in analytic.iter().enumerate() {
        let mut ok = true;
        for (k, &a) in group.iter().enumerate() {
            let mut plus = net.clone();
            plus.tensors_mut()[g][k] += h;
            let mut minus = net.clone();
            minus.tensors_mut()[g][k] -= h;
            let num = (loss(&plus, &x) - loss(&minus, &x)) / (2.0 * h);
            worst = worst.max((a - num).abs() / a.abs().max(num.abs()).max(1e-6));
            ok &= close(a, num);
        }
        if !ok {
            bad_groups.push(g);
        }
    }
    let mut input_ok = true;
    for k in 0..x.data().len() {
        let mut plus = x.clone();
        plus.data_mut()[k] += h;
        let mut minus = x.clone();
        minus.data_mut()[k] -= h;
        let num = (loss(&net, &plus) - loss(&net, &minus)) / (2.0 * h);
        worst = worst.max((d_input.data()[k] - num).abs() / d_input.data()[k].abs().max(num.abs()).max(1e-6));
        input_ok &= close(d_input.data()[k], num);
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(
        bad_groups.is_empty() && input_ok && secs < 10.0,
        format!(
            "{} parameter groups + input, worst relative error {worst:.1e}, failing groups {bad_groups:?}, input ok = {input_ok}, {secs:.2} s",
            analytic.len()
        ),
    )
}

// ------------------------------------------------------------------ 5

/// Closed-form counts for a net whose block hidden width equals its stage
/// width.
fn analytic_counts(spec: &ArchSpec, blocks: &[usize]) -> (usize, usize) {
    let w = &spec.stage_widths;
    let affine = |i: usize, o: usize| (i * o + o, 2 * i * o + o);
    let (mut params, mut flops) = affine(spec.input_dim, w[0]);
    flops += w[0];
    for (s, &k) in blocks.iter().enumerate() {
        params += k * (2 * w[s] * w[s] + 2 * w[s]);
        flops += k * (4 * w[s] * w[s] + 4 * w[s]);
    }
    for p in w.windows(2) {
        let (pa, fl) = affine(p[0], p[1]);
        params += pa;
        flops += fl + p[1];
    }
    let last = *w.last().unwrap();
    let (pa, fl) = affine(last, spec.num_classes);
    (params + pa, flops + fl + last)
}

fn criterion_5() -> Outcome {
    let mut r = rng::seeded(5);
    let mut mismatches = 0;
    let mut cap_violations = 0;
    let mut removals = 0;
    for seq in 0..100 {
        let spec = random_spec(&mut r, seq);
        let cap = if seq % 2 == 0 { StageCap::KMinus2 } else { StageCap::KMinus1 };
        let mut net = ResidualNet::build(&spec).unwrap();
        loop {
            let (params, flops) = analytic_counts(&spec, &net.stages().iter().map(Vec::len).collect::<Vec<_>>());
            let c = net.count_flops();
            if c.params != params || c.per_sample_flops != flops {
                mismatches += 1;
            }
            if net.stages().iter().any(|s| s.len() < cap.min_remaining()) {
                cap_violations += 1;
            }
            let candidates = net.candidate_blocks_with_cap(cap);
            if candidates.is_empty() {
                // the cap must refuse every further removal
                for s in 0..net.stages().len() {
                    for p in 0..net.stages()[s].len() {
                        if net.remove_block_with_cap(BlockId::new(s, p), cap).is_ok() {
                            cap_violations += 1;
                        }
                    }
                }
                break;
            }
            let id = candidates[r.random_range(0..candidates.len())];
            net = net.remove_block_with_cap(id, cap).unwrap();
            removals += 1;
        }
    }
    outcome(
        mismatches == 0 && cap_violations == 0,
        format!("100 sequences, {removals} removals, {mismatches} count mismatches, {cap_violations} cap violations"),
    )
}

// ------------------------------------------------------------------ 6

const C6_SPREAD: f64 = 0.25;
const C6_SEEDS: u64 = 5;

fn c6_train_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 30,
        batch_size: 64,
        learning_rate: 0.01,
        momentum: 0.9,
        weight_decay: 1e-4,
        seed,
        shuffle: true,
        jitter: 0.0,
    }
}

fn c6_prune_cfg(seed: u64) -> PruneConfig {
    PruneConfig {
        iterations: 8,
        score_sample_count: 512,
        kernel: KernelKind::Linear,
        finetune: TrainConfig {
            epochs: 2,
            learning_rate: 0.001,
            ..c6_train_cfg(seed)
        },
        stage_cap: StageCap::KMinus2,
        seed,
        reference: ReferenceMode::ReExtract,
    }
}

fn criterion_6() -> Outcome {
    let t = Instant::now();
    let mut rows = Vec::new();
    for seed in 0..C6_SEEDS {
        let data = synth_dataset(5000, 16, 10, C6_SPREAD, 600 + seed).unwrap();
        let spec = ArchSpec {
            input_dim: 16,
            stage_widths: vec![32, 32, 32],
            blocks_per_stage: vec![6, 6, 6],
            num_classes: 10,
            activation: Activation::Relu,
            seed,
        };
        let (net, _) = train(&ResidualNet::build(&spec).unwrap(), &data, &c6_train_cfg(seed)).unwrap();
        let base = evaluate(&net, &data.test).unwrap();
        let cfg = c6_prune_cfg(seed);
        let (cka_net, trace) = prune_iterative(&net, &data, &cfg).unwrap();
        let (rand_net, _) = random_iterative(&net, &data, &cfg).unwrap();
        rows.push((
            base,
            evaluate(&cka_net, &data.test).unwrap(),
            evaluate(&rand_net, &data.test).unwrap(),
            trace.records.len(),
        ));
    }
    let secs = t.elapsed().as_secs_f64();
    let n = rows.len() as f64;
    let mean = |f: fn(&(f64, f64, f64, usize)) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let min_base = rows.iter().map(|r| r.0).fold(f64::INFINITY, f64::min);
    let max_drop = rows.iter().map(|r| (r.0 - r.1) * 100.0).fold(f64::NEG_INFINITY, f64::max);
    let (m_cka, m_rand) = (mean(|r| r.1), mean(|r| r.2));
    let all_eight = rows.iter().all(|r| r.3 == 8);
    let detail = format!(
        "unpruned min {:.2}%, worst CKA drop {max_drop:.2} pp, mean CKA {:.2}% vs random {:.2}%, {secs:.0} s",
        min_base * 100.0,
        m_cka * 100.0,
        m_rand * 100.0
    );
    outcome(
        min_base >= 0.90 && max_drop <= 2.0 && m_cka >= m_rand && all_eight && secs <= 600.0,
        detail,
    )
}

// ------------------------------------------------------------------ 7

/// Four classes from the signs of `x0·x1` and `x2·x3`: no class is
/// linearly separable, so the blocks carry real work.
fn xor_pairs(n: usize, seed: u64) -> SplitData {
    let mut r = rng::seeded(seed);
    let x = random_matrix(&mut r, n, 6);
    let y = (0..n)
        .map(|i| {
            let v = x.row(i);
            usize::from(v[0] * v[1] > 0.0) * 2 + usize::from(v[2] * v[3] > 0.0)
        })
        .collect();
    stratified_split(&Dataset::new(x, y, 4).unwrap(), 0.3).unwrap()
}

fn criterion_7() -> Outcome {
    let t = Instant::now();
    let mut rhos = Vec::new();
    let mut bases = Vec::new();
    for seed in 0..5 {
        let data = xor_pairs(3000, 700 + seed);
        let spec = ArchSpec {
            input_dim: 6,
            stage_widths: vec![12, 12],
            blocks_per_stage: vec![5, 5],
            num_classes: 4,
            activation: Activation::Relu,
            seed,
        };
        let cfg = TrainConfig {
            epochs: 60,
            batch_size: 32,
            learning_rate: 0.003,
            seed,
            ..TrainConfig::default()
        };
        let (net, _) = train(&ResidualNet::build(&spec).unwrap(), &data, &cfg).unwrap();
        bases.push(evaluate(&net, &data.test).unwrap());
        let x = score_subsample(&data.train, 256, seed);
        let scoring = score_candidates(&net, &x, KernelKind::Linear).unwrap();
        let ft = TrainConfig {
            epochs: 1,
            learning_rate: 0.0003,
            ..cfg
        };
        let oracle = oracle_rank(&net, &data, &ft).unwrap();
        let cka: Vec<f64> = scoring.scores.iter().map(|s| 1.0 - s.score).collect();
        let acc: Vec<f64> = oracle.iter().map(|o| o.1).collect();
        let rho = spearman(&cka, &acc);
        rhos.push(if rho.is_nan() { 0.0 } else { rho });
    }
    let mean = rhos.iter().sum::<f64>() / rhos.len() as f64;
    let base_min = bases.iter().copied().fold(f64::INFINITY, f64::min);
    outcome(
        mean > 0.0,
        format!(
            "6 candidates per net, unpruned accuracy >= {:.1}%, Spearman per seed {rhos:.2?}, mean {mean:.3}, {:.0} s",
            base_min * 100.0,
            t.elapsed().as_secs_f64()
        ),
    )
}

// ------------------------------------------------------------------ 8

fn criterion_8() -> Outcome {
    let t = Instant::now();
    let spec = ArchSpec {
        input_dim: 16,
        stage_widths: vec![64, 64, 64],
        blocks_per_stage: vec![10, 10, 10],
        num_classes: 10,
        activation: Activation::Relu,
        seed: 8,
    };
    let base = ResidualNet::build(&spec).unwrap();
    let mut r = rng::seeded(8);
    let x = random_matrix(&mut r, 256, 16);
    let mut layer = Vec::new();
    let mut filter = Vec::new();
    let mut current = base.clone();
    for step in 1..=16 {
        current = prune_one(&current, &x, KernelKind::Linear).unwrap().0;
        if step % 2 == 0 {
            let removed = base.hidden_units() - current.hidden_units();
            layer.push(PrunedStep {
                net: current.clone(),
                neurons_removed: removed,
            });
            filter.push(PrunedStep {
                net: l1_filter_prune_units(&base, removed).unwrap(),
                neurons_removed: removed,
            });
        }
    }
    let cfg = LatencyConfig {
        n_samples: 256,
        runs: 30,
        warmup_runs: 3,
        neuron_tolerance: 0.05,
        steps: layer.len(),
    };
    let rows = latency_compare(&base, &layer, &filter, &cfg).unwrap();
    let wins = rows.iter().filter(|r| r.layer_speedup >= r.filter_speedup).count();
    let frac = wins as f64 / rows.len() as f64;
    let pairs: Vec<String> = rows
        .iter()
        .map(|r| format!("{}:{:.2}/{:.2}", r.neurons_removed, r.layer_speedup, r.filter_speedup))
        .collect();
    outcome(
        frac >= 0.8,
        format!(
            "layer >= filter at {wins}/{} matched points [{}], {:.0} s",
            rows.len(),
            pairs.join(" "),
            t.elapsed().as_secs_f64()
        ),
    )
}

// ------------------------------------------------------------------ 9

fn criterion_9() -> Outcome {
    let data: SplitData = synth_dataset(800, 8, 4, 0.3, 9).unwrap();
    let spec = ArchSpec {
        input_dim: 8,
        stage_widths: vec![12, 10],
        blocks_per_stage: vec![4, 4],
        num_classes: 4,
        activation: Activation::Relu,
        seed: 9,
    };
    let run = |threads: usize| {
        let tc = TrainConfig {
            epochs: 5,
            batch_size: 32,
            seed: 9,
            ..TrainConfig::default()
        };
        let (net, _) = train(&ResidualNet::build(&spec).unwrap(), &data, &tc).unwrap();
        let cfg = PruneConfig {
            iterations: 3,
            score_sample_count: 128,
            kernel: KernelKind::Linear,
            finetune: TrainConfig { epochs: 2, ..tc },
            stage_cap: StageCap::KMinus2,
            seed: 9,
            reference: ReferenceMode::ReExtract,
        };
        let (pruned, trace) = prune_iterative_with_threads(&net, &data, &cfg, threads).unwrap();
        (serde_json::to_vec(&trace).unwrap(), write_checkpoint(&pruned).unwrap())
    };
    let a = run(1);
    let b = run(1);
    let c = run(3);
    outcome(
        a == b && a == c,
        format!(
            "trace JSON {} bytes, checkpoint {} bytes, rerun identical = {}, 3-thread scoring identical = {}",
            a.0.len(),
            a.1.len(),
            a == b,
            a == c
        ),
    )
}

// ----------------------------------------------------------------- 10

fn criterion_10() -> Outcome {
    let mut r = rng::seeded(10);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let cfg = Co2Config {
            throughput_flops: r.random_range(1e9..1e14),
            power_w: r.random_range(10.0..1000.0),
            intensity_kg_per_kwh: r.random_range(0.01..1.0),
        };
        let per_sample = r.random_range(1_000..1_000_000usize) * 10_000;
        let samples = r.random_range(100..100_000);
        let epochs = r.random_range(1..50);
        let full = training_flops(per_sample, samples, epochs);
        let u = co2_estimate(full, &cfg).unwrap();
        let p = co2_estimate(full * (1.0 - 0.8085), &cfg).unwrap();
        worst = worst.max((co2_reduction(&u, &p) - 0.8085).abs());
    }
    // FLOPs-epochs reduced through a smaller net and fewer epochs together
    let cfg = Co2Config::default();
    let u = co2_estimate(training_flops(20_000, 1_000, 100), &cfg).unwrap();
    let p = co2_estimate(training_flops(7_660, 1_000, 50), &cfg).unwrap();
    let combined = co2_reduction(&u, &p);
    worst = worst.max((combined - 0.8085).abs());
    outcome(
        worst <= 1e-12,
        format!("80.85% FLOPs-epochs cut gives CO2 cut within {worst:.1e} (combined case {:.4}%)", combined * 100.0),
    )
}

// --------------------------------------------------------------- main

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 10] = [
        ("CKA oracle equivalence", criterion_1),
        ("CKA invariance suite", criterion_2),
        ("identity-block selection", criterion_3),
        ("gradient correctness", criterion_4),
        ("structural accounting", criterion_5),
        ("desk-scale iterative pruning", criterion_6),
        ("criterion-vs-oracle ranking", criterion_7),
        ("latency trend", criterion_8),
        ("determinism", criterion_9),
        ("CO2 estimator identity", criterion_10),
    ];
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let id = i + 1;
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let o = f();
        println!("{} criterion {id} ({name}): {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if !o.pass {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
