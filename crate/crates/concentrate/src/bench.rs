//! The full desk-scale experiment matrix: teachers, soft targets, every
//! student arm (hard vs distilled, each topology, each self-paced variant),
//! the five scaling-factor loss-curve variants, and the specialist upper
//! bound — one seeded, reproducible run.

use crate::config::RunConfig;
use crate::data::{generate_synthetic, save_dataset, Dataset};
use crate::distill::{
    generate_soft_targets, score_test_set, score_test_set_with_teacher, train_generalist_baseline,
    train_student, train_teacher, SoftTargetRecord,
};
use crate::error::Result;
use crate::eval::{evaluate, export_loss_curves, pvap, save_curve, LossCurve};
use crate::layers::{ArchSpec, BaseConfig, GammaInit, HeadMode, Model, ScalingHead};
use crate::taxonomy::{save_taxonomy, ClassLayout, LabelId};
use crate::budget::{count_params, Topology};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// One student arm of the matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub name: String,
    pub architecture: String,
    pub distilled: bool,
    pub self_paced: HeadMode,
    pub top_layer_params: u64,
    pub final_loss: f64,
    pub mpvap: f64,
    pub per_vertical: Vec<f64>,
}

/// Specialist (teacher ensemble) evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecialistResult {
    pub per_vertical: Vec<(LabelId, f64)>,
    pub mpvap: f64,
}

/// Directional comparisons the matrix exists to measure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendSummary {
    /// Distilled minus hard-label mpvap on the dense architecture.
    pub distillation_gain: f64,
    /// Sparse-top-2 minus dense mpvap, both distilled.
    pub sc_gain: f64,
    /// Vertical-level self-paced minus no-head mpvap, both distilled sparse.
    pub vertical_self_paced_gain: f64,
    /// Class-level self-paced minus no-head mpvap.
    pub class_self_paced_delta: f64,
    /// Specialist ensemble mpvap minus the best single-model arm.
    pub specialist_margin: f64,
    /// Final loss of the fixed-γ variant minus the trainable vertical √N_v
    /// variant (positive = trainable wins).
    pub fixed_vs_trainable_final_loss: f64,
}

/// Everything `bench` measured, serialized as the report file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub seed: u64,
    pub config: RunConfig,
    pub specialists: SpecialistResult,
    pub arms: Vec<ArmResult>,
    pub trends: TrendSummary,
}

impl BenchReport {
    pub fn arm(&self, name: &str) -> Option<&ArmResult> {
        self.arms.iter().find(|a| a.name == name)
    }

    /// Terminal summary table.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("seed {}  benchmark {}\n\n", self.seed, self.config.label));
        out.push_str(&format!(
            "{:<28} {:<16} {:>10} {:>10} {:>10}\n",
            "arm", "architecture", "#top-param", "final-loss", "mpvap"
        ));
        for arm in &self.arms {
            out.push_str(&format!(
                "{:<28} {:<16} {:>10} {:>10.4} {:>10.4}\n",
                arm.name, arm.architecture, arm.top_layer_params, arm.final_loss, arm.mpvap
            ));
        }
        out.push_str(&format!(
            "{:<28} {:<16} {:>10} {:>10} {:>10.4}\n",
            "specialists", "per-vertical", "-", "-", self.specialists.mpvap
        ));
        let t = &self.trends;
        out.push_str(&format!(
            "\ndistillation gain {:+.4}   sc gain {:+.4}\nvertical self-paced gain {:+.4}   class self-paced delta {:+.4}\nspecialist margin {:+.4}   fixed-vs-trainable final loss {:+.4}\n",
            t.distillation_gain,
            t.sc_gain,
            t.vertical_self_paced_gain,
            t.class_self_paced_delta,
            t.specialist_margin,
            t.fixed_vs_trainable_final_loss,
        ));
        out
    }
}

struct ArmSpec {
    name: &'static str,
    topology: Topology,
    distilled: bool,
    head: ScalingHead,
}

fn arm_specs() -> Vec<ArmSpec> {
    let none = ScalingHead::none();
    vec![
        ArmSpec { name: "fc-fc/hard", topology: Topology::FcFc, distilled: false, head: none.clone() },
        ArmSpec { name: "fc-fc/distill", topology: Topology::FcFc, distilled: true, head: none.clone() },
        ArmSpec { name: "sc-sc/hard", topology: Topology::ScSc, distilled: false, head: none.clone() },
        ArmSpec { name: "sc-sc/distill", topology: Topology::ScSc, distilled: true, head: none.clone() },
        ArmSpec { name: "fc-sc/distill", topology: Topology::FcSc, distilled: true, head: none },
        ArmSpec {
            name: "fc-sc/distill+vertical",
            topology: Topology::FcSc,
            distilled: true,
            head: ScalingHead::new(HeadMode::Vertical, GammaInit::SqrtNv, true),
        },
        ArmSpec {
            name: "fc-sc/distill+class",
            topology: Topology::FcSc,
            distilled: true,
            head: ScalingHead::new(HeadMode::Class, GammaInit::SqrtNv, true),
        },
        ArmSpec {
            name: "fig5/fixed-sqrt-nv-vertical",
            topology: Topology::FcSc,
            distilled: true,
            head: ScalingHead::new(HeadMode::Vertical, GammaInit::SqrtNv, false),
        },
        ArmSpec {
            name: "fig5/mean10-vertical",
            topology: Topology::FcSc,
            distilled: true,
            head: ScalingHead::new(HeadMode::Vertical, GammaInit::Const(10.0), true),
        },
        ArmSpec {
            name: "fig5/mean10-class",
            topology: Topology::FcSc,
            distilled: true,
            head: ScalingHead::new(HeadMode::Class, GammaInit::Const(10.0), true),
        },
    ]
}

fn arch_for(cfg: &RunConfig, topology: Topology, layout: &ClassLayout) -> ArchSpec {
    ArchSpec {
        topology,
        s_b: cfg.s_b,
        s1: cfg.s1,
        s2: cfg.s2,
        generic_size: if topology == Topology::FcScGeneric { cfg.generic_size } else { 0 },
        vertical_sizes: layout.vertical_sizes(),
        use_bias: cfg.use_bias,
    }
}

/// File-name-safe arm label.
fn slug(name: &str) -> String {
    name.replace('/', "_").replace('+', "-")
}

/// Run the whole matrix into `out`, writing data files, checkpoints, loss
/// curves, the five-variant curve CSV, and the report (JSON + text).
pub fn run_bench(cfg: &RunConfig, out: &Path) -> Result<BenchReport> {
    cfg.validate()?;
    let data_dir = out.join("data");
    let arms_dir = out.join("arms");
    let teachers_dir = out.join("teachers");

    // Benchmark data.
    let (tax, dataset) = generate_synthetic(&cfg.data, cfg.seed)?;
    save_taxonomy(&tax, &data_dir.join("taxonomy.jsonl"))?;
    save_dataset(&dataset, &data_dir.join("dataset.jsonl"))?;
    let layout = tax.class_layout();

    // Teachers + specialist upper bound.
    let teacher_cfg = cfg.teacher_train_config();
    let mut teachers = Vec::new();
    let mut specialist_pvaps = Vec::new();
    for (vi, &vertical) in tax.vertical_roots().iter().enumerate() {
        let (teacher, curve) = train_teacher(&tax, vertical, &dataset, &cfg.teacher, &teacher_cfg)?;
        crate::data::save_checkpoint(&teacher.model, &teachers_dir.join(format!("teacher_v{vertical}.ckpt")))?;
        save_curve(&curve, &teachers_dir.join(format!("teacher_v{vertical}.curve.json")))?;
        let scored = score_test_set_with_teacher(&teacher, &tax, &layout, &dataset)?;
        let outcome = pvap(&layout, vi, &scored)?;
        specialist_pvaps.push((vertical, outcome.value));
        teachers.push(teacher);
    }
    let specialists = SpecialistResult {
        mpvap: crate::eval::mpvap(&specialist_pvaps.iter().map(|&(_, v)| v).collect::<Vec<_>>())?,
        per_vertical: specialist_pvaps,
    };

    // Soft targets, generated once and shared by every distilled arm.
    let train_cfg = cfg.train_config();
    let records = generate_soft_targets(&teachers, &tax, &dataset, &train_cfg)?;
    crate::distill::save_soft_targets(&records, &out.join("soft_targets.jsonl"))?;

    // Student arms. Each arm is an independent seeded training run, so they
    // go wide across threads; results are collected in declaration order to
    // keep every artifact byte-stable.
    let base = BaseConfig { d_in: cfg.data.d_in, hidden: cfg.base_hidden };
    let specs = arm_specs();
    let trained: Vec<Result<(Model, LossCurve)>> = std::thread::scope(|scope| {
        let handles: Vec<_> = specs
            .iter()
            .map(|spec| {
                let (base, layout, dataset, records) = (&base, &layout, &dataset, &records);
                scope.spawn(move || {
                    let arch = arch_for(cfg, spec.topology, layout);
                    run_arm(&arch, base, spec, layout, dataset, records, cfg)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("arm thread")).collect()
    });
    let mut arms = Vec::new();
    let mut curves: Vec<LossCurve> = Vec::new();
    for (spec, outcome) in specs.iter().zip(trained) {
        let arch = arch_for(cfg, spec.topology, &layout);
        let (model, mut curve) = outcome?;
        curve.label = spec.name.to_string();
        let scored = score_test_set(&model, &layout, &dataset)?;
        let result = evaluate(&layout, &scored)?;
        crate::data::save_checkpoint(&model, &arms_dir.join(format!("{}.ckpt", slug(spec.name))))?;
        save_curve(&curve, &arms_dir.join(format!("{}.curve.json", slug(spec.name))))?;
        arms.push(ArmResult {
            name: spec.name.to_string(),
            architecture: arch.budget_input().display_name(),
            distilled: spec.distilled,
            self_paced: spec.head.mode,
            top_layer_params: count_params(&arch.budget_input())?,
            final_loss: curve.tail_mean(20).unwrap_or(f64::NAN),
            mpvap: result.mpvap,
            per_vertical: result.per_vertical.iter().map(|v| v.pvap).collect(),
        });
        curves.push(curve);
    }

    // Fig-5 style five-variant comparison: fixed √N_v, trainable mean-10
    // (vertical, class), trainable √N_v (vertical, class).
    let curve_by_name = |name: &str| -> LossCurve {
        curves.iter().find(|c| c.label == name).expect("arm ran").clone()
    };
    let relabel = |mut c: LossCurve, label: &str| {
        c.label = label.to_string();
        c
    };
    let fig5 = vec![
        relabel(curve_by_name("fig5/fixed-sqrt-nv-vertical"), "fixed-sqrt-nv-vertical"),
        relabel(curve_by_name("fig5/mean10-vertical"), "trainable-mean10-vertical"),
        relabel(curve_by_name("fig5/mean10-class"), "trainable-mean10-class"),
        relabel(curve_by_name("fc-sc/distill+vertical"), "trainable-sqrt-nv-vertical"),
        relabel(curve_by_name("fc-sc/distill+class"), "trainable-sqrt-nv-class"),
    ];
    let csv = export_loss_curves(&fig5)?;
    crate::data::write_atomic(&out.join("fig5_curves.csv"), csv.as_bytes())?;

    // Directional summary.
    let get = |name: &str| arms.iter().find(|a| a.name == name).expect("arm ran");
    let best_single = arms.iter().map(|a| a.mpvap).fold(f64::NEG_INFINITY, f64::max);
    let tail = |name: &str| get(name).final_loss;
    let trends = TrendSummary {
        distillation_gain: get("fc-fc/distill").mpvap - get("fc-fc/hard").mpvap,
        sc_gain: get("fc-sc/distill").mpvap - get("fc-fc/distill").mpvap,
        vertical_self_paced_gain: get("fc-sc/distill+vertical").mpvap - get("fc-sc/distill").mpvap,
        class_self_paced_delta: get("fc-sc/distill+class").mpvap - get("fc-sc/distill").mpvap,
        specialist_margin: specialists.mpvap - best_single,
        fixed_vs_trainable_final_loss: tail("fig5/fixed-sqrt-nv-vertical")
            - tail("fc-sc/distill+vertical"),
    };

    let report = BenchReport { seed: cfg.seed, config: cfg.clone(), specialists, arms, trends };
    let json = serde_json::to_vec_pretty(&report).expect("report serializes");
    crate::data::write_atomic(&out.join("bench_report.json"), &json)?;
    crate::data::write_atomic(&out.join("bench_report.txt"), report.render().as_bytes())?;
    Ok(report)
}

fn run_arm(
    arch: &ArchSpec,
    base: &BaseConfig,
    spec: &ArmSpec,
    layout: &ClassLayout,
    dataset: &Dataset,
    records: &[SoftTargetRecord],
    cfg: &RunConfig,
) -> Result<(Model, LossCurve)> {
    let train_cfg = cfg.train_config();
    if spec.distilled {
        train_student(arch, base, &spec.head, layout, dataset, records, &train_cfg)
    } else {
        train_generalist_baseline(arch, base, &spec.head, layout, dataset, &train_cfg)
    }
}
