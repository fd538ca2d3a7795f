//! Acceptance suite: one test per criterion, each printing a PASS line with
//! its measured numbers (run with `--nocapture` to see them on success).
//!
//! Criteria 5 and 6 share one full benchmark run (several minutes); the
//! rest are fast property suites with pinned tolerances.

use concentrate::budget::{count_params, BudgetInput, Topology};
use concentrate::config::RunConfig;
use concentrate::data::{generate_synthetic, load_dataset};
use concentrate::distill::{
    densify_targets, generate_soft_targets, train_teacher, TrainConfig,
};
use concentrate::eval::{average_precision, mpvap, pvap, RankedSample, ScoredSample};
use concentrate::gradcheck::{central_diff, max_rel_err};
use concentrate::layers::{
    apply_scaling_head, build_model, ArchSpec, BaseConfig, GammaInit, HeadMode, Model, ScalingHead,
};
use concentrate::loss::{eq5_diagonal_gradient, grad_ratio_estimate};
use concentrate::tensor::Tape;
use rand::Rng;
use std::sync::OnceLock;
use std::time::Instant;

fn seeded(label: &str) -> rand_chacha::ChaCha8Rng {
    concentrate::seeds::rng(0xACCE97, label)
}

// ── Criterion 1: gradient suite ──────────────────────────────────────

fn model_grad_cases(arch: &ArchSpec, base: &BaseConfig, head: &ScalingHead, cases: usize, tol: f64) {
    let model = build_model(arch, base, head, 101).unwrap();
    let mut rng = seeded(&format!("c1/{:?}/{:?}", arch.topology, head.mode));
    for case in 0..cases {
        let rows = 2;
        let raw: Vec<f64> = (0..rows * base.d_in).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let targets: Vec<f64> =
            (0..rows * arch.num_classes()).map(|_| rng.gen_range(0.0..1.0)).collect();
        // One random parameter per case keeps the suite inside the budget
        // while every parameter kind gets hit across 100 cases.
        let pi = rng.gen_range(0..model.params.len());

        let loss_of = |m: &Model| {
            let mut tape = Tape::new();
            let bound = m.bind(&mut tape).unwrap();
            let input = tape.constant(raw.clone(), vec![rows, base.d_in]).unwrap();
            let logits = bound.forward_from_raw(&mut tape, input).unwrap();
            let loss = tape.sigmoid_cross_entropy(logits, &targets).unwrap();
            let ids = bound.param_ids.clone();
            (tape, ids, loss)
        };
        let (mut tape, ids, loss) = loss_of(&model);
        tape.backward(loss).unwrap();
        let analytic = tape.grad(ids[pi]).unwrap().to_vec();
        let numeric = central_diff(
            |vals| {
                let mut pert = model.clone();
                pert.params[pi].values = vals.to_vec();
                let (t, _, l) = loss_of(&pert);
                t.scalar(l)
            },
            &model.params[pi].values,
            1e-5,
        );
        let err = max_rel_err(&analytic, &numeric);
        assert!(
            err < tol,
            "case {case}: {:?}/{:?} param {} rel err {err}",
            arch.topology,
            head.mode,
            model.params[pi].name
        );
    }
}

#[test]
fn criterion_1_gradient_suite() {
    let start = Instant::now();
    let base = BaseConfig { d_in: 5, hidden: 6 };
    let arch = |topology, x, use_bias| ArchSpec {
        topology,
        s_b: 6,
        s1: 5,
        s2: 4,
        generic_size: x,
        vertical_sizes: vec![4, 3],
        use_bias,
    };
    // Every topology, with and without the self-paced head, plus biases.
    let configs = [
        (arch(Topology::FcFc, 0, false), ScalingHead::none()),
        (arch(Topology::FcFc, 0, true), ScalingHead::new(HeadMode::Class, GammaInit::SqrtNv, true)),
        (arch(Topology::FcSc, 0, false), ScalingHead::new(HeadMode::Vertical, GammaInit::SqrtNv, true)),
        (arch(Topology::ScSc, 0, true), ScalingHead::none()),
        (arch(Topology::FcScGeneric, 2, false), ScalingHead::new(HeadMode::Vertical, GammaInit::Const(2.0), true)),
        (arch(Topology::FcScGeneric, 4, false), ScalingHead::none()),
    ];
    for (arch, head) in &configs {
        model_grad_cases(arch, &base, head, 100, 1e-4);
    }

    // Eq-form losses directly: hard and soft targets.
    let mut rng = seeded("c1/loss");
    for _ in 0..100 {
        let rows = rng.gen_range(1..4);
        let cols = rng.gen_range(1..6);
        let x0: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let hard = rng.gen_bool(0.5);
        let targets: Vec<f64> = (0..rows * cols)
            .map(|_| if hard { f64::from(rng.gen_bool(0.5)) } else { rng.gen_range(0.0..1.0) })
            .collect();
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone(), vec![rows, cols], true).unwrap();
        let loss = tape.sigmoid_cross_entropy(x, &targets).unwrap();
        tape.backward(loss).unwrap();
        let analytic = tape.grad(x).unwrap().to_vec();
        let numeric = central_diff(
            |vals| {
                let mut t = Tape::new();
                let x = t.leaf(vals.to_vec(), vec![rows, cols], false).unwrap();
                let l = t.sigmoid_cross_entropy(x, &targets).unwrap();
                t.scalar(l)
            },
            &x0,
            1e-5,
        );
        assert!(max_rel_err(&analytic, &numeric) < 1e-4);
    }

    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 60, "gradient suite took {elapsed:?}");
    println!("criterion 1 (gradient suite): PASS in {elapsed:?}");
}

// ── Criterion 2: Eq 5 diagonal ───────────────────────────────────────

#[test]
fn criterion_2_eq5_diagonal() {
    // Worked example: [3,4], upstream [1,0] → diagonal route [0.128, 0],
    // exact route [0.128, -0.096].
    let diag = eq5_diagonal_gradient(&[3.0, 4.0], 1.0, &[1.0, 0.0]).unwrap();
    assert!((diag[0] - 0.128).abs() < 1e-15 && diag[1] == 0.0);
    let mut tape = Tape::new();
    let x = tape.leaf(vec![3.0, 4.0], vec![2], true).unwrap();
    let y = tape.l2_normalize_segment(x, 0, 2).unwrap();
    let pick = tape.constant(vec![1.0, 0.0], vec![2]).unwrap();
    let p = tape.mul(y, pick).unwrap();
    let l = tape.sum(p);
    tape.backward(l).unwrap();
    let exact = tape.grad(x).unwrap();
    assert!((exact[0] - 0.128).abs() < 1e-15 && (exact[1] + 0.096).abs() < 1e-15);

    // 100 random segments: Eq 5 equals diag(J)·γ·upstream to 1e-10.
    let mut rng = seeded("c2");
    for case in 0..100 {
        let n = rng.gen_range(2..12);
        let xs: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0) + 0.05).collect();
        let gamma: f64 = rng.gen_range(0.25..6.0);
        let upstream: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let diag = eq5_diagonal_gradient(&xs, gamma, &upstream).unwrap();
        for i in 0..n {
            let mut tape = Tape::new();
            let x = tape.leaf(xs.clone(), vec![n], true).unwrap();
            let y = tape.l2_normalize_segment(x, 0, n).unwrap();
            let mut onehot = vec![0.0; n];
            onehot[i] = 1.0;
            let pick = tape.constant(onehot, vec![n]).unwrap();
            let p = tape.mul(y, pick).unwrap();
            let l = tape.sum(p);
            tape.backward(l).unwrap();
            let expected = gamma * upstream[i] * tape.grad(x).unwrap()[i];
            let denom = expected.abs().max(diag[i].abs()).max(1.0);
            assert!(
                (diag[i] - expected).abs() / denom < 1e-10,
                "case {case} i={i}: {} vs {}",
                diag[i],
                expected
            );
        }
    }
    println!("criterion 2 (Eq 5 diagonal check): PASS");
}

// ── Criterion 3: parameter formulas ──────────────────────────────────

#[test]
fn criterion_3_parameter_formulas() {
    let base = BaseConfig { d_in: 4, hidden: 3 };
    let mut rng = seeded("c3");
    for topology in [Topology::FcFc, Topology::FcSc, Topology::ScSc, Topology::FcScGeneric] {
        for _ in 0..50 {
            let s2 = rng.gen_range(1..8);
            let m = rng.gen_range(1..6);
            let arch = ArchSpec {
                topology,
                s_b: rng.gen_range(1..12),
                s1: rng.gen_range(1..12),
                s2,
                generic_size: if topology == Topology::FcScGeneric { rng.gen_range(0..=s2) } else { 0 },
                vertical_sizes: (0..m).map(|_| rng.gen_range(1..9)).collect(),
                use_bias: false,
            };
            let model = build_model(&arch, &base, &ScalingHead::none(), 11).unwrap();
            assert_eq!(
                model.top_layer_weight_count(),
                count_params(&arch.budget_input()).unwrap(),
                "{arch:?}"
            );
        }
    }

    // Full-scale dense arm: 512·100000 + 512·4096 + 4096·9216.
    let paper = BudgetInput {
        topology: Topology::FcFc,
        n: 100_000,
        m: 20,
        s_b: 9216,
        s1: 4096,
        s2: 512,
        x: 0,
    };
    assert_eq!(count_params(&paper).unwrap(), 91_045_888);

    // The generic-slice sweep is strictly decreasing in x.
    let mut last = u64::MAX;
    for x in [0, 128, 256, 384, 512] {
        let c = count_params(&BudgetInput {
            topology: Topology::FcScGeneric,
            x,
            ..paper
        })
        .unwrap();
        assert!(c < last, "x={x}");
        last = c;
    }
    println!("criterion 3 (parameter formulas): PASS (full-scale dense = 91,045,888)");
}

// ── Criterion 4: √N_v initialization ─────────────────────────────────

#[test]
fn criterion_4_sqrt_nv_initialization() {
    // Per-vertical γ mean within ±0.01 of √N_v right after init.
    for (mode, sizes) in [
        (HeadMode::Vertical, vec![4usize, 16, 25, 100]),
        (HeadMode::Class, vec![9, 36]),
    ] {
        let arch = ArchSpec {
            topology: Topology::FcSc,
            s_b: 4,
            s1: 4,
            s2: 3,
            generic_size: 0,
            vertical_sizes: sizes.clone(),
            use_bias: false,
        };
        let head = ScalingHead::new(mode, GammaInit::SqrtNv, true);
        let model =
            build_model(&arch, &BaseConfig { d_in: 4, hidden: 4 }, &head, 4242).unwrap();
        let gamma = &model.param("head.gamma").unwrap().values;
        let c2v = arch.class_to_vertical();
        for (vi, &n_v) in sizes.iter().enumerate() {
            let owned: Vec<f64> = match mode {
                HeadMode::Vertical => vec![gamma[vi]],
                HeadMode::Class => gamma
                    .iter()
                    .enumerate()
                    .filter(|&(c, _)| c2v[c] == vi)
                    .map(|(_, &g)| g)
                    .collect(),
                HeadMode::None => unreachable!(),
            };
            let mean = owned.iter().sum::<f64>() / owned.len() as f64;
            let target = grad_ratio_estimate(n_v);
            assert!(
                (mean - target).abs() <= 0.01,
                "{mode:?} vertical {vi}: mean {mean} vs sqrt {target}"
            );
        }
    }

    // Monte-Carlo Eq 6: mean diagonal normalization derivative over
    // unit-variance draws tracks 1/√N_v within 20%.
    use rand_distr::{Distribution, StandardNormal};
    for n_v in [4usize, 16, 25, 100] {
        let mut rng = seeded(&format!("c4/{n_v}"));
        let mut total = 0.0;
        let draws = 1000;
        for _ in 0..draws {
            let x: Vec<f64> = (0..n_v).map(|_| StandardNormal.sample(&mut rng)).collect();
            let diag = eq5_diagonal_gradient(&x, 1.0, &vec![1.0; n_v]).unwrap();
            total += diag.iter().sum::<f64>() / n_v as f64;
        }
        let mean = total / draws as f64;
        let target = 1.0 / grad_ratio_estimate(n_v);
        assert!(
            (mean - target).abs() / target < 0.2,
            "N_v={n_v}: ratio {mean} vs {target}"
        );
    }
    println!("criterion 4 (sqrt N_v initialization): PASS");
}

// ── Criterion 7: metric oracle ───────────────────────────────────────

/// O(n²) precision-at-rank oracle, pairwise counting only.
fn brute_force_ap(items: &[RankedSample]) -> f64 {
    let before = |a: &RankedSample, b: &RankedSample| {
        a.score > b.score || (a.score == b.score && a.sample_id < b.sample_id)
    };
    let positives: Vec<&RankedSample> = items.iter().filter(|i| i.relevant).collect();
    let mut total = 0.0;
    for p in &positives {
        let rank = 1 + items.iter().filter(|q| q.sample_id != p.sample_id && before(q, p)).count();
        let hits =
            1 + positives.iter().filter(|q| q.sample_id != p.sample_id && before(q, p)).count();
        total += hits as f64 / rank as f64;
    }
    total / positives.len() as f64
}

#[test]
fn criterion_7_metric_oracle() {
    let mut rng = seeded("c7");
    for case in 0..1000 {
        let n = rng.gen_range(1..=50);
        let quantized = rng.gen_bool(0.5);
        let items: Vec<RankedSample> = (0..n)
            .map(|i| RankedSample {
                score: if quantized {
                    (rng.gen_range(0..6) as f64) / 6.0
                } else {
                    rng.gen_range(-1.0..1.0)
                },
                sample_id: i as u64,
                relevant: rng.gen_bool(0.3),
            })
            .collect();
        if !items.iter().any(|i| i.relevant) {
            continue;
        }
        let fast = average_precision(&items).unwrap();
        let slow = brute_force_ap(&items);
        assert!((fast - slow).abs() < 1e-12, "case {case}: {fast} vs {slow}");
    }

    // mpvap == mean(pvap) to 1e-15.
    let mut rng = seeded("c7/means");
    for _ in 0..100 {
        let k = rng.gen_range(1..20);
        let vals: Vec<f64> = (0..k).map(|_| rng.gen_range(0.0..1.0)).collect();
        let mean = vals.iter().sum::<f64>() / k as f64;
        assert!((mpvap(&vals).unwrap() - mean).abs() <= 1e-15);
    }

    // Perfect-predictor fixture scores exactly 1.0.
    let cfg = concentrate::data::SyntheticConfig {
        verticals: 2,
        leaves_per_vertical: 3,
        d_in: 4,
        train_per_class: 2,
        test_per_class: 2,
        confusability: 0.5,
    };
    let (tax, data) = generate_synthetic(&cfg, 5).unwrap();
    let layout = tax.class_layout();
    let scored: Vec<ScoredSample> = data
        .test()
        .iter()
        .map(|s| {
            let mut scores = vec![0.0; layout.num_classes()];
            scores[layout.class_of(s.label_id).unwrap()] = 1.0;
            ScoredSample { sample_id: s.sample_id, label: s.label_id, scores }
        })
        .collect();
    let result = concentrate::eval::evaluate(&layout, &scored).unwrap();
    assert_eq!(result.mpvap, 1.0);
    println!("criterion 7 (metric oracle): PASS");
}

// ── Criterion 9: smearing and top-K properties ───────────────────────

#[test]
fn criterion_9_smearing_and_topk() {
    // Golden-retriever chain fixture.
    let mk = |id, name: &str, parent, root| concentrate::taxonomy::TaxNode {
        id,
        name: name.into(),
        parent_id: parent,
        is_vertical_root: root,
    };
    let tax = concentrate::taxonomy::LabelTaxonomy::new(vec![
        mk(0, "animal", None, false),
        mk(1, "mammal", Some(0), true),
        mk(2, "dog", Some(1), false),
        mk(3, "golden_retriever", Some(2), false),
        mk(4, "bird", Some(0), true),
        mk(5, "blackbird", Some(4), false),
    ])
    .unwrap();
    let smeared = tax.smear(3).unwrap();
    assert_eq!(smeared.positives, vec![0, 1, 2, 3]); // leaf, dog, mammal, animal

    // Mini pipeline: every record obeys the routing and sparsity contracts.
    let cfg = concentrate::data::SyntheticConfig {
        verticals: 3,
        leaves_per_vertical: 6,
        d_in: 8,
        train_per_class: 6,
        test_per_class: 2,
        confusability: 0.5,
    };
    let (tax, data) = generate_synthetic(&cfg, 77).unwrap();
    let layout = tax.class_layout();
    let tc = TrainConfig {
        k: 4,
        batch_size: 16,
        learning_rate: 0.2,
        epochs: 10,
        seed: 77,
        force_include_groundtruth: false,
    };
    let sizes = concentrate::distill::TeacherSizes { hidden: 12, s_b: 12, s1: 12, s2: 12 };
    let mut teachers = Vec::new();
    for &v in tax.vertical_roots() {
        teachers.push(train_teacher(&tax, v, &data, &sizes, &tc).unwrap().0);
    }
    let records = generate_soft_targets(&teachers, &tax, &data, &tc).unwrap();
    assert_eq!(records.len(), data.train().len());
    let by_id: std::collections::HashMap<u64, u32> =
        data.train().iter().map(|s| (s.sample_id, s.label_id)).collect();
    for rec in &records {
        assert!(rec.targets.len() <= tc.k);
        // Routed vertical is F_map of the groundtruth.
        assert_eq!(rec.vertical_id, tax.f_map(by_id[&rec.sample_id]).unwrap());
        let leaves = tax.vertical_leaves(rec.vertical_id).unwrap();
        for &(label, prob) in &rec.targets {
            assert!(leaves.contains(&label), "label {label} outside vertical");
            assert!(prob > 0.0 && prob <= 1.0);
        }
        // Densified vector is bit-equal to the kept probabilities and has
        // at most K nonzeros.
        let dense = densify_targets(rec, &layout).unwrap();
        assert!(dense.iter().filter(|&&v| v != 0.0).count() <= tc.k);
        for &(label, prob) in &rec.targets {
            assert_eq!(dense[layout.class_of(label).unwrap()].to_bits(), prob.to_bits());
        }
    }
    println!("criterion 9 (smearing and top-K properties): PASS");
}

// ── Criteria 5, 6, 8: the seeded reference benchmark ─────────────────

/// Pinned reference seed for the trend run.
const REFERENCE_SEED: u64 = 7;

fn reference_report() -> &'static concentrate::bench::BenchReport {
    static REPORT: OnceLock<concentrate::bench::BenchReport> = OnceLock::new();
    REPORT.get_or_init(|| {
        let mut cfg = RunConfig::desk_reference();
        cfg.seed = REFERENCE_SEED;
        let dir = tempfile::tempdir().unwrap();
        let start = Instant::now();
        let report = concentrate::bench::run_bench(&cfg, dir.path()).unwrap();
        let elapsed = start.elapsed();
        assert!(
            elapsed.as_secs() < 600,
            "reference benchmark took {elapsed:?}, budget is 10 min"
        );
        report
    })
}

#[test]
fn criterion_5_trend_replication() {
    let report = reference_report();
    let t = &report.trends;
    // Two layers of assertion: the stated directional thresholds, and
    // tighter regression floors frozen from the first reference run of
    // seed 7 (measured +0.0405 / +0.0916 / +0.0339 / -0.0052 / +0.1989).
    assert!(
        t.distillation_gain >= 0.01 && t.distillation_gain >= 0.040,
        "(a) distillation gain {:.4} below the frozen floor",
        t.distillation_gain
    );
    assert!(
        t.sc_gain >= 0.0 && t.sc_gain >= 0.091,
        "(b) fc-sc vs fc-fc under distillation {:.4} below the frozen floor",
        t.sc_gain
    );
    assert!(
        t.vertical_self_paced_gain >= 0.01 && t.vertical_self_paced_gain >= 0.033,
        "(c) vertical self-paced gain {:.4} below the frozen floor",
        t.vertical_self_paced_gain
    );
    assert!(
        t.class_self_paced_delta.abs() < 0.01 && t.class_self_paced_delta.abs() <= 0.006,
        "(c) class-level moved mpvap by {:.4}",
        t.class_self_paced_delta
    );
    assert!(
        t.specialist_margin > 0.0 && t.specialist_margin >= 0.19,
        "(d) specialists ({:.4}) do not upper-bound every arm by the frozen margin",
        report.specialists.mpvap
    );
    // The specialists also beat the under-capacitated hard-label generalist
    // by well over the 5-point floor (frozen at 36 points).
    let generalist = report.arm("fc-fc/hard").unwrap().mpvap;
    let gap = report.specialists.mpvap - generalist;
    assert!(gap >= 0.05 && gap >= 0.36, "specialist-vs-generalist gap {gap:.4} below floor");
    println!(
        "criterion 5 (trend replication): PASS (a: {:+.4}, b: {:+.4}, c: {:+.4}/{:+.4}, d: {:+.4})",
        t.distillation_gain,
        t.sc_gain,
        t.vertical_self_paced_gain,
        t.class_self_paced_delta,
        t.specialist_margin
    );
}

#[test]
fn criterion_6_fixed_gamma_curve() {
    let report = reference_report();
    let diff = report.trends.fixed_vs_trainable_final_loss;
    // Frozen from the reference run: fixed γ plateaus ~30 loss units above
    // the trainable vertical √N_v variant.
    assert!(
        diff > 0.0 && diff >= 29.0,
        "fixed-γ final loss does not exceed the trainable vertical √N_v variant ({diff:+.4})"
    );
    println!("criterion 6 (fixed vs trainable γ loss): PASS ({diff:+.4})");
}

#[test]
fn criterion_8_pipeline_determinism() {
    // Reduced profile: same pipeline, fewer steps.
    let mut cfg = RunConfig::desk_reference();
    cfg.seed = 11;
    cfg.epochs = 6;
    cfg.teacher_epochs = 4;
    cfg.data.leaves_per_vertical = 5;
    cfg.data.train_per_class = 8;
    cfg.data.test_per_class = 3;

    let run = |dir: &std::path::Path| {
        concentrate::bench::run_bench(&cfg, dir).unwrap();
        let mut files: Vec<(String, Vec<u8>)> = walk(dir)
            .into_iter()
            .map(|p| {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                (rel, std::fs::read(&p).unwrap())
            })
            .collect();
        files.sort();
        files
    };
    let a_dir = tempfile::tempdir().unwrap();
    let b_dir = tempfile::tempdir().unwrap();
    let a = run(a_dir.path());
    let b = run(b_dir.path());
    assert_eq!(a.len(), b.len());
    for ((name_a, bytes_a), (name_b, bytes_b)) in a.iter().zip(&b) {
        assert_eq!(name_a, name_b);
        assert_eq!(bytes_a, bytes_b, "{name_a} differs between runs");
    }
    // The dataset load path reproduces the in-memory dataset too.
    let loaded = load_dataset(&a_dir.path().join("data/dataset.jsonl")).unwrap();
    let (_, direct) = generate_synthetic(&cfg.data, cfg.seed).unwrap();
    assert_eq!(loaded, direct);
    println!(
        "criterion 8 (pipeline determinism): PASS ({} files byte-identical)",
        a.len()
    );
}

fn walk(dir: &std::path::Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path);
            }
        }
    }
    out
}
