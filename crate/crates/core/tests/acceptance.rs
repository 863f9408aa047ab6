//! Acceptance suite. Each test prints one `criterion N: PASS|FAIL` line and
//! then asserts, so `cargo test -- --nocapture` shows the full scorecard.

use std::time::Instant;

use mvlle::alignment::{brute_force_oracle, topk_search, PatchGrid};
use mvlle::gradsuite::{run_suite, SUITE_TOLERANCE};
use mvlle::losses::{l_rec, l_total_terms, sum_terms};
use mvlle::metrics::{loe, psnr_slices, ssim_image};
use mvlle::network::{ModelConfig, ModelParams, Network};
use mvlle::synthesis::{
    admitted_procedural_triplet, darken, degrade, sample_params, synth_triplet, DegradationParams,
    NoiseModel, SimilarityGate, ALPHA_RANGE, BETA_RANGE, GAMMA_RANGE,
};
use mvlle::trainer::{evaluate, TrainConfig, Trainer, Triplet};
use mvlle::{ImageRGB, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(n: u32, name: &str, pass: bool, detail: String) {
    println!(
        "criterion {n}: {} ({name}) {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
}

fn toy_triplets(count: usize, side: usize, seed: u64) -> Vec<Triplet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gate = SimilarityGate::default();
    (0..count)
        .map(|i| {
            let gt = admitted_procedural_triplet(side, side, 3, &gate, 200, &mut rng).unwrap();
            let (low, _) = synth_triplet(&gt, &mut rng, &NoiseModel::default()).unwrap();
            Triplet {
                scene: format!("toy{i:02}"),
                low,
                gt,
            }
        })
        .collect()
}

fn random_image(h: usize, w: usize, rng: &mut impl Rng) -> ImageRGB {
    ImageRGB::from_fn(h, w, |_, _, _| rng.random_range(0.0..1.0))
}

fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(0.0..1.0))
}

#[test]
fn criterion_1_alignment_oracle() {
    let start = Instant::now();
    let (c, side, patch) = (8, 28, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut instances = 0;
    let mut index_mismatches = 0;
    let mut worst_rho = 0.0f64;
    for i in 0..240 {
        let mut primary: Vec<f64> = (0..c * side * side)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let mut source: Vec<f64> = (0..c * side * side)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        if i % 4 == 0 {
            // coarse values give exact ties between candidates
            for v in primary.iter_mut().chain(source.iter_mut()) {
                *v = (*v * 2.0).round();
            }
        }
        if i % 4 == 1 {
            // a patch copied into the source should be found with rho 1
            let (py, px) = (
                rng.random_range(0..4) * patch,
                rng.random_range(0..4) * patch,
            );
            for ch in 0..c {
                for dy in 0..patch {
                    for dx in 0..patch {
                        let at = ch * side * side + (py + dy) * side + px + dx;
                        source[at] = primary[at];
                    }
                }
            }
        }
        let p = PatchGrid::partition(&primary, c, side, side, patch).unwrap();
        let s = PatchGrid::partition(&source, c, side, side, patch).unwrap();
        for k in [1, 3, 4] {
            for radius in [1, 2] {
                let fast = topk_search(&p, &s, k, radius).unwrap();
                let oracle = brute_force_oracle(&p, &s, k, radius).unwrap();
                instances += 1;
                for (a, b) in fast.matches.iter().zip(&oracle.matches) {
                    if a.len() != b.len()
                        || a.iter()
                            .zip(b)
                            .any(|(x, y)| (x.row, x.col) != (y.row, y.col))
                    {
                        index_mismatches += 1;
                    }
                    for (x, y) in a.iter().zip(b) {
                        worst_rho = worst_rho.max((x.rho - y.rho).abs());
                    }
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = instances >= 200 && index_mismatches == 0 && worst_rho <= 1e-6 && secs <= 30.0;
    report(
        1,
        "alignment oracle",
        pass,
        format!(
            "{instances} instances, {index_mismatches} cells with differing indices, max |rho diff| {worst_rho:.1e} (limit 1e-6), {secs:.1}s (limit 30s)"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_2_gradient_suite() {
    let start = Instant::now();
    let results = run_suite(2).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let worst = results
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .unwrap();
    for r in results.iter().filter(|r| !r.passed()) {
        println!("  {} failed with {:.3e}", r.name, r.max_rel_error);
    }
    let has_unit = results.iter().any(|r| r.name.contains("unit"));
    let pass = has_unit && results.iter().all(|r| r.passed()) && secs <= 120.0;
    report(
        2,
        "gradient suite",
        pass,
        format!(
            "{} checks, worst {} at {:.2e} (limit {SUITE_TOLERANCE:e}), {secs:.1}s (limit 120s)",
            results.len(),
            worst.name,
            worst.max_rel_error
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_3_metric_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut failures = Vec::new();

    let x = random_image(40, 52, &mut rng);
    let s = ssim_image(&x, &x).unwrap();
    if (s - 1.0).abs() > 1e-9 {
        failures.push(format!("ssim(X,X) = {s}"));
    }

    let base: Vec<f64> = (0..3 * 32 * 32)
        .map(|_| rng.random_range(0.0..0.9))
        .collect();
    let shifted: Vec<f64> = base.iter().map(|v| v + 0.1).collect();
    let p = psnr_slices(&base, &shifted).unwrap();
    if (p - 20.0).abs() > 1e-9 {
        failures.push(format!("psnr at uniform 0.1 error = {p}"));
    }

    // 8-bit levels keep every remap below injective in f32
    let level = |rng: &mut ChaCha8Rng| rng.random_range(0..=255u8) as f32 / 255.0;
    let e = ImageRGB::from_fn(24, 30, |_, _, _| level(&mut rng));
    let r = ImageRGB::from_fn(24, 30, |_, _, _| level(&mut rng));
    if loe(&e, &e).unwrap() != 0.0 {
        failures.push("loe(X,X) != 0".into());
    }
    let base_loe = loe(&e, &r).unwrap();
    let remaps: [(&str, fn(f32) -> f32); 3] = [
        ("gamma 2.2", |v| v.powf(2.2)),
        ("gamma 1/2.2", |v| v.powf(1.0 / 2.2)),
        ("affine", |v| 0.5 * v + 0.25),
    ];
    for (name, f) in remaps {
        if loe(&e.map(f), &r).unwrap() != base_loe {
            failures.push(format!(
                "loe changed under {name} remap of the enhanced image"
            ));
        }
        if loe(&e.map(f), &e).unwrap() != 0.0 {
            failures.push(format!("loe(f(X), X) != 0 for {name}"));
        }
    }

    let mut rec_ok = 0;
    for i in 0..50 {
        let a = random_tensor(&[1, 3, 16, 16], &mut rng);
        let tape = Tape::<f64>::new();
        let (va, vb) = (tape.constant(a.clone()), tape.constant(a.clone()));
        let same = tape.value(l_rec(&tape, va, vb).unwrap()).item().unwrap();
        let mut b = a.clone();
        // pairs differ everywhere or in a single element
        if i % 2 == 0 {
            b = random_tensor(&[1, 3, 16, 16], &mut rng);
        } else {
            let at = rng.random_range(0..b.numel());
            b.data_mut()[at] += 0.05;
        }
        let vc = tape.constant(b);
        let differ = tape.value(l_rec(&tape, va, vc).unwrap()).item().unwrap();
        if same.abs() <= 1e-12 && differ > 1e-6 {
            rec_ok += 1;
        } else {
            failures.push(format!(
                "l_rec pair {i}: equal {same:e}, unequal {differ:e}"
            ));
        }
    }

    let pass = failures.is_empty();
    for f in &failures {
        println!("  {f}");
    }
    report(
        3,
        "metric identities",
        pass,
        format!("ssim(X,X) = {s:.12}, psnr = {p:.12} dB, loe {base_loe:.3} stable under 3 remaps, l_rec {rec_ok}/50 pairs"),
    );
    assert!(pass);
}

#[test]
fn criterion_4_synthesis_contracts() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut failures = Vec::new();

    let img = random_image(20, 24, &mut rng);
    let out = degrade(&img, &DegradationParams::identity()).unwrap();
    if out
        .data()
        .iter()
        .zip(img.data())
        .any(|(a, b)| a.to_bits() != b.to_bits())
    {
        failures.push("identity parameters changed the image".into());
    }

    let noise = NoiseModel::default();
    let inside = |v: f64, (lo, hi): (f64, f64)| (lo..=hi).contains(&v);
    let mut in_range = 0;
    let mut increased = 0;
    for i in 0..10_000 {
        let p = sample_params(&mut rng, &noise);
        if inside(p.alpha, ALPHA_RANGE)
            && inside(p.beta, BETA_RANGE)
            && inside(p.gamma, GAMMA_RANGE)
        {
            in_range += 1;
        }
        if i < 200 {
            let d = darken(&img, &p);
            increased += d
                .data()
                .iter()
                .zip(img.data())
                .filter(|(a, b)| a > b)
                .count();
        }
    }
    if in_range != 10_000 {
        failures.push(format!(
            "{} parameter samples out of range",
            10_000 - in_range
        ));
    }
    if increased != 0 {
        failures.push(format!("darkening raised {increased} pixel values"));
    }

    let gt = [0, 1, 2].map(|_| random_image(16, 16, &mut rng));
    let run = |seed: u64| synth_triplet(&gt, &mut ChaCha8Rng::seed_from_u64(seed), &noise).unwrap();
    let ((l1, p1), (l2, p2)) = (run(9), run(9));
    let (l3, _) = run(10);
    if p1 != p2 || l1 != l2 {
        failures.push("synthesis differs between runs with the same seed".into());
    }
    if l1 == l3 {
        failures.push("different seeds gave the same triplet".into());
    }

    let pass = failures.is_empty();
    for f in &failures {
        println!("  {f}");
    }
    report(
        4,
        "synthesis contracts",
        pass,
        format!("identity bit-exact, {in_range}/10000 samples in range, {increased} darkening increases, seeded synthesis reproducible"),
    );
    assert!(pass);
}

#[test]
fn criterion_6_stage_loss_structure() {
    let small = |e2a: bool| ModelConfig {
        channels: 4,
        units: 2,
        k: 2,
        radius: 1,
        se_reduction: 2,
        encoder_depth: 2,
        e2a,
        ..ModelConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let views = random_tensor(&[3, 3, 16, 16], &mut rng);
    let gt = random_tensor(&[1, 3, 16, 16], &mut rng);

    // full objective versus the same sum with one stage term left out
    let params = ModelParams::<f64>::init(small(true), 60).unwrap();
    let tape = Tape::new();
    let net = Network::new(&tape, &params, true).unwrap();
    let out = net.forward(tape.constant(views.clone())).unwrap();
    let terms = l_total_terms(&tape, &out.stages, out.restored, tape.constant(gt.clone())).unwrap();
    let total = tape
        .value(sum_terms(&tape, &terms).unwrap())
        .item()
        .unwrap();
    let mut changed = Vec::new();
    for t in 0..out.stages.len() {
        let rest: Vec<_> = terms
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != t)
            .map(|(_, &v)| v)
            .collect();
        let without = tape.value(sum_terms(&tape, &rest).unwrap()).item().unwrap();
        changed.push(without != total);
    }

    // with the confidence path off, stage heads feed only their own loss term
    let zero_grad = |loss_on_stages: bool| -> Vec<bool> {
        let params = ModelParams::<f64>::init(small(false), 61).unwrap();
        let tape = Tape::new();
        let net = Network::new(&tape, &params, true).unwrap();
        let out = net.forward(tape.constant(views.clone())).unwrap();
        let stages = if loss_on_stages {
            out.stages.clone()
        } else {
            Vec::new()
        };
        let loss = sum_terms(
            &tape,
            &l_total_terms(&tape, &stages, out.restored, tape.constant(gt.clone())).unwrap(),
        )
        .unwrap();
        tape.backward(loss).unwrap();
        (1..=2)
            .map(|t| {
                let g = tape.grad(net.param(&format!("unit{t}.e2a.weight")).unwrap());
                g.is_none_or(|g| g.data().iter().all(|&v| v == 0.0))
            })
            .collect()
    };
    let final_only = zero_grad(false);
    let with_stages = zero_grad(true);

    let pass = changed.iter().all(|&c| c)
        && final_only.iter().all(|&z| z)
        && with_stages.iter().all(|&z| !z);
    report(
        6,
        "stage loss structure",
        pass,
        format!(
            "dropping stage terms changes the loss {changed:?}; stage head grads zero with final-only loss {final_only:?}, zero with stage terms {with_stages:?}"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_7_determinism() {
    let data = toy_triplets(3, 32, 7);
    let model = ModelConfig {
        channels: 4,
        units: 2,
        k: 2,
        radius: 1,
        se_reduction: 2,
        encoder_depth: 2,
        ..ModelConfig::default()
    };
    let cfg = TrainConfig {
        crop: 24,
        total_iters: 6,
        checkpoint_every: 3,
        eval_every: 3,
        seed: 77,
        ..TrainConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let train_into = |name: &str| -> Vec<u8> {
        let out = dir.path().join(name);
        let mut t = Trainer::new(model.clone(), cfg.clone()).unwrap();
        t.run(&data[..2], &data[2..], Some(&out)).unwrap();
        std::fs::read(out.join(Trainer::checkpoint_name(6))).unwrap()
    };
    let a = train_into("a");
    let b = train_into("b");
    let resumed_dir = dir.path().join("resumed");
    let mut t =
        Trainer::load_checkpoint(dir.path().join("a").join(Trainer::checkpoint_name(3))).unwrap();
    t.run(&data[..2], &data[2..], Some(&resumed_dir)).unwrap();
    let c = std::fs::read(resumed_dir.join(Trainer::checkpoint_name(6))).unwrap();
    let metrics =
        |name: &str| std::fs::read_to_string(dir.path().join(name).join("metrics.csv")).unwrap();
    let (ma, mb, mc) = (metrics("a"), metrics("b"), metrics("resumed"));
    // the resumed log holds iterations 4..=6 only
    let tail: Vec<&str> = ma.lines().skip(4).collect();
    let resumed_tail: Vec<&str> = mc.lines().skip(1).collect();

    let pass = a == b && ma == mb && a == c && tail == resumed_tail;
    report(
        7,
        "determinism",
        pass,
        format!(
            "two runs identical: checkpoint {}, log {}; resumed from iteration 3 identical: checkpoint {}, log {}",
            a == b,
            ma == mb,
            a == c,
            tail == resumed_tail
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_5_toy_training() {
    let start = Instant::now();
    let data = toy_triplets(20, 64, 5);
    let (train, held_out) = data.split_at(16);
    let cfg = TrainConfig {
        eval_every: 0,
        ..TrainConfig::default()
    };
    let mut reports = Vec::new();
    for units in [1, 2] {
        let t0 = Instant::now();
        let model = ModelConfig {
            units,
            ..ModelConfig::default()
        };
        let mut trainer = Trainer::new(model, cfg.clone()).unwrap();
        let rows = trainer.run(train, &[], None).unwrap();
        let r = evaluate(&trainer.params, held_out).unwrap();
        println!(
            "  T={units}: first loss {:.4}, last loss {:.4}, held-out PSNR {:.2} dB (input {:.2} dB), SSIM {:.4}, {:.0}s",
            rows[0].loss,
            rows.last().unwrap().loss,
            r.psnr,
            r.input_psnr,
            r.ssim,
            t0.elapsed().as_secs_f64()
        );
        reports.push(r);
    }
    let secs = start.elapsed().as_secs_f64();
    let gain = [
        reports[0].psnr - reports[0].input_psnr,
        reports[1].psnr - reports[1].input_psnr,
    ];
    let ordered = reports[1].psnr >= reports[0].psnr - 0.1;
    let pass = gain.iter().all(|&g| g >= 3.0) && ordered && secs <= 1800.0;
    report(
        5,
        "toy training",
        pass,
        format!(
            "gain T=1 {:.2} dB, T=2 {:.2} dB (need >= 3); T=2 - T=1 = {:+.2} dB (need >= -0.1); {secs:.0}s (limit 1800s)",
            gain[0],
            gain[1],
            reports[1].psnr - reports[0].psnr
        ),
    );
    assert!(pass);
}
