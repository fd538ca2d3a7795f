//! Command-line surface: data generation, per-stage training commands, the
//! full benchmark matrix, evaluation, and parameter accounting.
//!
//! Every subcommand is deterministic in (config, seed): identical inputs
//! produce identical artifacts. Verbosity is controlled only by the
//! `CONCENTRATE_LOG` environment variable (`quiet` silences progress).

use crate::budget::{compare_budgets, BudgetInput, Topology};
use crate::config::{load_patch, parse_gamma_init, RunConfig};
use crate::data::{load_dataset, save_dataset, Dataset};
use crate::distill::{
    generate_soft_targets, load_soft_targets, save_soft_targets, score_test_set, train_generalist_baseline,
    train_student, train_teacher, Teacher,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, export_loss_curves, load_curve, save_curve, ScoredSample};
use crate::layers::{ArchSpec, BaseConfig, HeadMode, ScalingHead};
use crate::taxonomy::{load_taxonomy, save_taxonomy, LabelTaxonomy};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "concentrate",
    version,
    about = "Multi-teacher single-student distillation at desk scale"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ArchFlag {
    FcFc,
    FcSc,
    ScSc,
    FcScGeneric,
}

impl From<ArchFlag> for Topology {
    fn from(value: ArchFlag) -> Topology {
        match value {
            ArchFlag::FcFc => Topology::FcFc,
            ArchFlag::FcSc => Topology::FcSc,
            ArchFlag::ScSc => Topology::ScSc,
            ArchFlag::FcScGeneric => Topology::FcScGeneric,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SelfPacedFlag {
    None,
    Vertical,
    Class,
}

impl From<SelfPacedFlag> for HeadMode {
    fn from(value: SelfPacedFlag) -> HeadMode {
        match value {
            SelfPacedFlag::None => HeadMode::None,
            SelfPacedFlag::Vertical => HeadMode::Vertical,
            SelfPacedFlag::Class => HeadMode::Class,
        }
    }
}

/// Flags shared by the pipeline subcommands. Precedence: flags > config
/// file > built-in defaults.
#[derive(Args)]
struct CommonArgs {
    /// JSON config file (partial; unset fields keep defaults)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed for all derived randomness
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Student top-layer topology
    #[arg(long, value_enum)]
    arch: Option<ArchFlag>,
    /// Shared generic slice width for fc-sc-generic
    #[arg(long)]
    generic_size: Option<usize>,
    /// Self-paced head placement
    #[arg(long, value_enum)]
    self_paced: Option<SelfPacedFlag>,
    /// γ initialization: `sqrt-nv` or `const:<value>`
    #[arg(long)]
    gamma_init: Option<String>,
    /// Train γ (false freezes the scaling factors)
    #[arg(long)]
    gamma_trainable: Option<bool>,
    /// Soft-target truncation K
    #[arg(long)]
    k: Option<usize>,
    /// Student training epochs
    #[arg(long)]
    epochs: Option<usize>,
}

impl CommonArgs {
    fn resolve(&self) -> Result<RunConfig> {
        self.resolve_from(RunConfig::default())
    }

    fn resolve_from(&self, base: RunConfig) -> Result<RunConfig> {
        let mut cfg = base;
        if let Some(path) = &self.config {
            load_patch(path)?.apply(&mut cfg);
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(arch) = self.arch {
            cfg.arch = arch.into();
        }
        if let Some(x) = self.generic_size {
            cfg.generic_size = x;
        }
        if let Some(mode) = self.self_paced {
            cfg.self_paced = mode.into();
        }
        if let Some(init) = &self.gamma_init {
            cfg.gamma_init = parse_gamma_init(init)?;
        }
        if let Some(trainable) = self.gamma_trainable {
            cfg.gamma_trainable = trainable;
        }
        if let Some(k) = self.k {
            cfg.k = k;
        }
        if let Some(epochs) = self.epochs {
            cfg.epochs = epochs;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn taxonomy_path(&self, over: &Option<PathBuf>) -> PathBuf {
        over.clone().unwrap_or_else(|| self.out.join("data/taxonomy.jsonl"))
    }

    fn dataset_path(&self, over: &Option<PathBuf>) -> PathBuf {
        over.clone().unwrap_or_else(|| self.out.join("data/dataset.jsonl"))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic hierarchical benchmark (taxonomy + dataset)
    GenData {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Train the specialist model for one vertical
    TrainTeacher {
        /// Vertical root label id
        #[arg(long)]
        vertical: u32,
        #[arg(long)]
        taxonomy: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Run every teacher over the training set and write top-K soft targets
    GenSoftTargets {
        #[arg(long)]
        taxonomy: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Directory holding teacher_v<ID>.ckpt files
        #[arg(long)]
        teachers: Option<PathBuf>,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Train the student from soft targets
    TrainStudent {
        #[arg(long)]
        taxonomy: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        soft_targets: Option<PathBuf>,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Train the hard-label generalist baseline
    TrainBaseline {
        #[arg(long)]
        taxonomy: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Evaluate a checkpoint (or a predictions file) on the test split
    Eval {
        #[arg(long, conflicts_with = "predictions")]
        checkpoint: Option<PathBuf>,
        /// JSON-lines `{sample_id, scores:[...]}` instead of a model
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        taxonomy: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Machine-readable JSON instead of the table
        #[arg(long)]
        json: bool,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Closed-form top-layer parameter counts for all four topologies
    Params {
        /// Output classes
        #[arg(long, default_value_t = 10)]
        n: u64,
        /// Verticals
        #[arg(long, default_value_t = 2)]
        m: u64,
        /// Base output width
        #[arg(long, default_value_t = 8)]
        s_b: u64,
        /// Top-1 width
        #[arg(long, default_value_t = 4)]
        s1: u64,
        /// Top-2 width
        #[arg(long, default_value_t = 3)]
        s2: u64,
        /// Generic slice width for fc-sc-generic
        #[arg(long, default_value_t = 1)]
        x: u64,
        /// Machine-readable JSON instead of the table
        #[arg(long)]
        json: bool,
    },
    /// Merge per-run loss-curve JSON files into one CSV
    ExportCurves {
        /// Curve files, in output order
        curves: Vec<PathBuf>,
        /// Write the CSV here instead of stdout
        #[arg(long)]
        out_file: Option<PathBuf>,
    },
    /// Run the full desk-scale matrix: teachers, soft targets, every arm.
    /// Starts from the pinned reference profile; config file and flags
    /// override it.
    Bench {
        #[command(flatten)]
        common: CommonArgs,
    },
}

fn log(msg: &str) {
    if std::env::var("CONCENTRATE_LOG").map(|v| v == "quiet").unwrap_or(false) {
        return;
    }
    eprintln!("{msg}");
}

fn load_inputs(
    common: &CommonArgs,
    taxonomy: &Option<PathBuf>,
    dataset: &Option<PathBuf>,
) -> Result<(LabelTaxonomy, Dataset)> {
    let tax = load_taxonomy(&common.taxonomy_path(taxonomy))?;
    let data = load_dataset(&common.dataset_path(dataset))?;
    Ok((tax, data))
}

fn student_arch(cfg: &RunConfig, tax: &LabelTaxonomy) -> (ArchSpec, BaseConfig, ScalingHead) {
    let layout = tax.class_layout();
    let arch = ArchSpec {
        topology: cfg.arch,
        s_b: cfg.s_b,
        s1: cfg.s1,
        s2: cfg.s2,
        generic_size: if cfg.arch == Topology::FcScGeneric { cfg.generic_size } else { 0 },
        vertical_sizes: layout.vertical_sizes(),
        use_bias: cfg.use_bias,
    };
    let base = BaseConfig { d_in: cfg.data.d_in, hidden: cfg.base_hidden };
    let head = ScalingHead {
        mode: cfg.self_paced,
        init: cfg.gamma_init,
        init_dev: 1e-3,
        trainable: cfg.gamma_trainable,
    };
    (arch, base, head)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common } => {
            let cfg = common.resolve()?;
            let (tax, data) = crate::data::generate_synthetic(&cfg.data, cfg.seed)?;
            let tax_path = common.taxonomy_path(&None);
            let data_path = common.dataset_path(&None);
            save_taxonomy(&tax, &tax_path)?;
            save_dataset(&data, &data_path)?;
            println!("wrote {} and {}", tax_path.display(), data_path.display());
        }
        Command::TrainTeacher { vertical, taxonomy, dataset, common } => {
            let cfg = common.resolve()?;
            let (tax, data) = load_inputs(&common, &taxonomy, &dataset)?;
            let (teacher, curve) =
                train_teacher(&tax, vertical, &data, &cfg.teacher, &cfg.teacher_train_config())?;
            let ckpt = common.out.join(format!("teachers/teacher_v{vertical}.ckpt"));
            crate::data::save_checkpoint(&teacher.model, &ckpt)?;
            save_curve(&curve, &common.out.join(format!("teachers/teacher_v{vertical}.curve.json")))?;
            println!(
                "trained teacher for vertical {vertical}: final loss {:.6}, wrote {}",
                curve.final_loss().unwrap_or(f64::NAN),
                ckpt.display()
            );
        }
        Command::GenSoftTargets { taxonomy, dataset, teachers, common } => {
            let cfg = common.resolve()?;
            let (tax, data) = load_inputs(&common, &taxonomy, &dataset)?;
            let teachers_dir = teachers.unwrap_or_else(|| common.out.join("teachers"));
            let mut loaded = Vec::new();
            for &vertical in tax.vertical_roots() {
                let path = teachers_dir.join(format!("teacher_v{vertical}.ckpt"));
                if !path.exists() {
                    return Err(Error::MissingTeacher(vertical));
                }
                let model = crate::data::load_checkpoint(&path)?;
                loaded.push(Teacher::from_model(&tax, vertical, model)?);
            }
            let records = generate_soft_targets(&loaded, &tax, &data, &cfg.train_config())?;
            let path = common.out.join("soft_targets.jsonl");
            save_soft_targets(&records, &path)?;
            println!("wrote {} records to {}", records.len(), path.display());
        }
        Command::TrainStudent { taxonomy, dataset, soft_targets, common } => {
            let cfg = common.resolve()?;
            let (tax, data) = load_inputs(&common, &taxonomy, &dataset)?;
            let targets_path =
                soft_targets.unwrap_or_else(|| common.out.join("soft_targets.jsonl"));
            let records = load_soft_targets(&targets_path)?;
            let (arch, base, head) = student_arch(&cfg, &tax);
            let layout = tax.class_layout();
            let (model, curve) =
                train_student(&arch, &base, &head, &layout, &data, &records, &cfg.train_config())?;
            let ckpt = common.out.join("student.ckpt");
            crate::data::save_checkpoint(&model, &ckpt)?;
            save_curve(&curve, &common.out.join("student.curve.json"))?;
            let result = evaluate(&layout, &score_test_set(&model, &layout, &data)?)?;
            println!(
                "trained student ({}): final loss {:.6}, mpvap {:.4}, wrote {}",
                arch.budget_input().display_name(),
                curve.final_loss().unwrap_or(f64::NAN),
                result.mpvap,
                ckpt.display()
            );
        }
        Command::TrainBaseline { taxonomy, dataset, common } => {
            let cfg = common.resolve()?;
            let (tax, data) = load_inputs(&common, &taxonomy, &dataset)?;
            let (arch, base, head) = student_arch(&cfg, &tax);
            let layout = tax.class_layout();
            let (model, curve) =
                train_generalist_baseline(&arch, &base, &head, &layout, &data, &cfg.train_config())?;
            let ckpt = common.out.join("baseline.ckpt");
            crate::data::save_checkpoint(&model, &ckpt)?;
            save_curve(&curve, &common.out.join("baseline.curve.json"))?;
            let result = evaluate(&layout, &score_test_set(&model, &layout, &data)?)?;
            println!(
                "trained baseline ({}): final loss {:.6}, mpvap {:.4}, wrote {}",
                arch.budget_input().display_name(),
                curve.final_loss().unwrap_or(f64::NAN),
                result.mpvap,
                ckpt.display()
            );
        }
        Command::Eval { checkpoint, predictions, taxonomy, dataset, json, common } => {
            let (tax, data) = load_inputs(&common, &taxonomy, &dataset)?;
            let layout = tax.class_layout();
            let scored = match (&checkpoint, &predictions) {
                (Some(ckpt), None) => {
                    let model = crate::data::load_checkpoint(ckpt)?;
                    score_test_set(&model, &layout, &data)?
                }
                (None, Some(preds)) => load_predictions(preds, &layout, &data)?,
                _ => {
                    return Err(Error::Validation(
                        "eval needs exactly one of --checkpoint or --predictions".into(),
                    ))
                }
            };
            let result = evaluate(&layout, &scored)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&result).expect("result serializes"));
            } else {
                print!("{}", result.render());
            }
        }
        Command::Params { n, m, s_b, s1, s2, x, json } => {
            let mk = |topology, x| BudgetInput { topology, n, m, s_b, s1, s2, x };
            let report = compare_budgets(&[
                mk(Topology::FcFc, 0),
                mk(Topology::FcSc, 0),
                mk(Topology::ScSc, 0),
                mk(Topology::FcScGeneric, x),
            ])?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
            } else {
                print!("{}", report.render());
            }
        }
        Command::ExportCurves { curves, out_file } => {
            if curves.is_empty() {
                return Err(Error::Validation("export-curves needs at least one curve file".into()));
            }
            let mut runs = Vec::with_capacity(curves.len());
            for path in &curves {
                runs.push(load_curve(path)?);
            }
            let csv = export_loss_curves(&runs)?;
            match out_file {
                Some(path) => {
                    crate::data::write_atomic(&path, csv.as_bytes())?;
                    println!("wrote {}", path.display());
                }
                None => print!("{csv}"),
            }
        }
        Command::Bench { common } => {
            let cfg = common.resolve_from(RunConfig::desk_reference())?;
            log(&format!("bench seed {} -> {}", cfg.seed, common.out.display()));
            let report = crate::bench::run_bench(&cfg, &common.out)?;
            print!("{}", report.render());
        }
    }
    Ok(())
}

#[derive(Deserialize)]
struct PredictionRecord {
    sample_id: u64,
    scores: Vec<f64>,
}

/// Join a predictions file against the dataset's test labels.
fn load_predictions(path: &Path, layout: &crate::taxonomy::ClassLayout, data: &Dataset) -> Result<Vec<ScoredSample>> {
    use std::io::BufRead;
    let file = std::fs::File::open(path)?;
    let mut by_id = std::collections::BTreeMap::new();
    for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PredictionRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        if rec.scores.len() != layout.num_classes() {
            return Err(Error::Validation(format!(
                "prediction for sample {} has {} scores, expected {}",
                rec.sample_id,
                rec.scores.len(),
                layout.num_classes()
            )));
        }
        by_id.insert(rec.sample_id, rec.scores);
    }
    let mut scored = Vec::new();
    for rec in data.test() {
        let scores = by_id.remove(&rec.sample_id).ok_or_else(|| Error::MissingTargets {
            count: 1,
            first: vec![rec.sample_id],
        })?;
        scored.push(ScoredSample { sample_id: rec.sample_id, label: rec.label_id, scores });
    }
    Ok(scored)
}

/// Parse argv and run; returns the process exit code. Errors print a single
/// machine-parsable JSON line on stderr.
pub fn dispatch() -> i32 {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            let line = serde_json::json!({
                "error": e.kind(),
                "exit": e.exit_code(),
                "msg": e.to_string(),
            });
            eprintln!("{line}");
            e.exit_code()
        }
    }
}
