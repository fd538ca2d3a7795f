//! The two-stage pipeline: per-vertical teachers, top-K soft targets, and
//! the single student that learns from all of them.
//!
//! Teachers train on smeared labels inside their own vertical subtree.
//! Each training sample is then routed to its vertical's teacher via the
//! taxonomy's `f_map`; the teacher's sigmoid probabilities over the
//! vertical's leaf classes are truncated to the top K and become the
//! student's targets. Everything outside the top K — and every class outside
//! the vertical — is an implicit 0. Probabilities are used raw: truncation
//! does not renormalize (sigmoid outputs are independent per class, there is
//! no distribution to restore), and the student never smears.

use crate::data::{Dataset, SampleRecord, Split};
use crate::error::{Error, Result};
use crate::eval::{LossCurve, ScoredSample};
use crate::layers::{build_model, ArchSpec, BaseConfig, Model, ScalingHead};
use crate::optim::Adagrad;
use crate::taxonomy::{ClassLayout, LabelId, LabelTaxonomy};
use crate::tensor::Tape;
use rand::seq::SliceRandom;
use serde::Deserialize;
use std::collections::BTreeMap;
use std::io::{BufRead, BufReader};
use std::path::Path;

/// Training hyperparameters. Defaults: K=100, batch 64, lr 0.001.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Soft-target truncation: keep the K most probable labels.
    pub k: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Put the groundtruth leaf into the top K even when the teacher ranks
    /// it below K (off by default: pure top-K).
    pub force_include_groundtruth: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            k: 100,
            batch_size: 64,
            learning_rate: 0.001,
            epochs: 30,
            seed: 0,
            force_include_groundtruth: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Validation("K must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Validation("batch size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Validation("epochs must be at least 1".into()));
        }
        Ok(())
    }
}

/// Layer sizes for specialist models (their own ArchSpec is always FC-FC
/// over the vertical's subtree labels).
#[derive(Debug, Clone, PartialEq, serde::Serialize, Deserialize)]
pub struct TeacherSizes {
    pub hidden: usize,
    pub s_b: usize,
    pub s1: usize,
    pub s2: usize,
}

/// A trained specialist: the model plus the subtree label space its output
/// columns correspond to.
#[derive(Debug, Clone)]
pub struct Teacher {
    pub vertical: LabelId,
    /// Subtree labels, ascending; one model output column per entry.
    pub space: Vec<LabelId>,
    pub model: Model,
}

impl Teacher {
    /// Wrap a checkpointed model as the teacher for `vertical`, checking the
    /// output width against the taxonomy's subtree.
    pub fn from_model(tax: &LabelTaxonomy, vertical: LabelId, model: Model) -> Result<Teacher> {
        let space = tax.subtree_labels(vertical)?;
        if model.arch.num_classes() != space.len() {
            return Err(Error::Checkpoint(format!(
                "teacher for vertical {vertical} has {} outputs, subtree has {} labels",
                model.arch.num_classes(),
                space.len()
            )));
        }
        Ok(Teacher { vertical, space, model })
    }
}

/// Per-sample sparse soft targets produced by one teacher.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct SoftTargetRecord {
    pub sample_id: u64,
    pub vertical_id: LabelId,
    /// (class label, probability), at most K entries, the teacher's K most
    /// probable leaf labels in descending-probability order (ties by id).
    pub targets: Vec<(LabelId, f64)>,
}

// ── Shared training loop ─────────────────────────────────────────────

/// One gradient-descent run: shuffled batches, Eq-form sigmoid CE, Adagrad.
/// Deterministic given the config seed and the stream label.
fn run_training(
    model: &mut Model,
    samples: &[(&[f64], Vec<f64>)],
    cfg: &TrainConfig,
    stream: &str,
    curve_label: &str,
) -> Result<LossCurve> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::NoData(format!("{curve_label}: no training samples")));
    }
    let d_in = samples[0].0.len();
    let n_out = model.arch.num_classes();
    let mut optimizer = Adagrad::new(cfg.learning_rate);
    let mut rng = crate::seeds::rng(cfg.seed, &format!("{stream}/shuffle"));
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut entries = Vec::with_capacity(cfg.epochs * samples.len() / cfg.batch_size.max(1) + 1);
    let mut step: u64 = 0;

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let rows = chunk.len();
            let mut features = Vec::with_capacity(rows * d_in);
            let mut targets = Vec::with_capacity(rows * n_out);
            for &i in chunk {
                features.extend_from_slice(samples[i].0);
                targets.extend_from_slice(&samples[i].1);
            }
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape)?;
            let input = tape.constant(features, vec![rows, d_in])?;
            let logits = bound.forward_from_raw(&mut tape, input)?;
            let loss = tape.sigmoid_cross_entropy(logits, &targets)?;
            tape.backward(loss)?;
            entries.push((step, tape.scalar(loss)));

            let grads: Vec<Option<Vec<f64>>> = bound
                .param_ids
                .iter()
                .map(|&id| tape.grad(id).map(|g| g.to_vec()))
                .collect();
            for (slot, grad) in grads.into_iter().enumerate() {
                if !model.params[slot].trainable {
                    continue;
                }
                let Some(grad) = grad else { continue };
                optimizer.step(slot, &mut model.params[slot].values, &grad)?;
            }
            step += 1;
        }
    }
    Ok(LossCurve { label: curve_label.to_string(), entries })
}

// ── Teachers ─────────────────────────────────────────────────────────

/// Train the specialist for one vertical on that vertical's training
/// samples, with labels smeared inside the subtree.
pub fn train_teacher(
    tax: &LabelTaxonomy,
    vertical: LabelId,
    dataset: &Dataset,
    sizes: &TeacherSizes,
    cfg: &TrainConfig,
) -> Result<(Teacher, LossCurve)> {
    let space = tax.subtree_labels(vertical)?;
    let position: BTreeMap<LabelId, usize> =
        space.iter().enumerate().map(|(i, &id)| (id, i)).collect();

    let mut samples: Vec<(&[f64], Vec<f64>)> = Vec::new();
    for rec in dataset.split(Split::Train) {
        if tax.f_map(rec.label_id)? != vertical {
            continue;
        }
        let mut target = vec![0.0; space.len()];
        for label in tax.smear_within(rec.label_id, vertical)? {
            target[position[&label]] = 1.0;
        }
        samples.push((&rec.features, target));
    }
    if samples.is_empty() {
        return Err(Error::NoData(format!("vertical {vertical} has no training samples")));
    }

    let arch = ArchSpec {
        topology: crate::budget::Topology::FcFc,
        s_b: sizes.s_b,
        s1: sizes.s1,
        s2: sizes.s2,
        generic_size: 0,
        vertical_sizes: vec![space.len()],
        use_bias: false,
    };
    let base = BaseConfig { d_in: dataset.d_in, hidden: sizes.hidden };
    let init_seed = crate::seeds::derive(cfg.seed, &format!("teacher/{vertical}/init"));
    let mut model = build_model(&arch, &base, &ScalingHead::none(), init_seed)?;
    let curve = run_training(
        &mut model,
        &samples,
        cfg,
        &format!("teacher/{vertical}"),
        &format!("teacher-v{vertical}"),
    )?;
    Ok((Teacher { vertical, space, model }, curve))
}

// ── Soft targets ─────────────────────────────────────────────────────

/// Run every training sample through its vertical's teacher and keep the
/// top-K leaf probabilities, sorted by sample id.
pub fn generate_soft_targets(
    teachers: &[Teacher],
    tax: &LabelTaxonomy,
    dataset: &Dataset,
    cfg: &TrainConfig,
) -> Result<Vec<SoftTargetRecord>> {
    cfg.validate()?;
    let by_vertical: BTreeMap<LabelId, &Teacher> =
        teachers.iter().map(|t| (t.vertical, t)).collect();

    // Group training samples per vertical for batched inference.
    let mut groups: BTreeMap<LabelId, Vec<&SampleRecord>> = BTreeMap::new();
    for rec in dataset.split(Split::Train) {
        groups.entry(tax.f_map(rec.label_id)?).or_default().push(rec);
    }

    let mut records = Vec::new();
    for (vertical, group) in groups {
        let teacher = by_vertical
            .get(&vertical)
            .copied()
            .ok_or(Error::MissingTeacher(vertical))?;
        // Leaf labels of this vertical and their columns in teacher space.
        let leaves = tax.vertical_leaves(vertical)?;
        let leaf_cols: Vec<usize> = leaves
            .iter()
            .map(|id| teacher.space.binary_search(id).expect("leaf is in subtree"))
            .collect();

        for chunk in group.chunks(256) {
            let rows = chunk.len();
            let mut features = Vec::with_capacity(rows * dataset.d_in);
            for rec in chunk {
                features.extend_from_slice(&rec.features);
            }
            let mut tape = Tape::new();
            let bound = teacher.model.bind(&mut tape)?;
            let input = tape.constant(features, vec![rows, dataset.d_in])?;
            let logits = bound.forward_from_raw(&mut tape, input)?;
            let probs = tape.sigmoid(logits);
            let width = teacher.space.len();
            let values = tape.value(probs);

            for (r, rec) in chunk.iter().enumerate() {
                let mut candidates: Vec<(LabelId, f64)> = leaves
                    .iter()
                    .zip(&leaf_cols)
                    .map(|(&label, &col)| (label, values[r * width + col]))
                    .collect();
                candidates.sort_by(|a, b| {
                    b.1.partial_cmp(&a.1).expect("probabilities are finite").then(a.0.cmp(&b.0))
                });
                candidates.truncate(cfg.k);
                if cfg.force_include_groundtruth
                    && !candidates.iter().any(|&(l, _)| l == rec.label_id)
                {
                    let col = teacher.space.binary_search(&rec.label_id).map_err(|_| {
                        Error::Validation(format!(
                            "groundtruth {} missing from teacher space",
                            rec.label_id
                        ))
                    })?;
                    let p = values[r * width + col];
                    let last = candidates.len() - 1;
                    candidates[last] = (rec.label_id, p);
                }
                records.push(SoftTargetRecord {
                    sample_id: rec.sample_id,
                    vertical_id: vertical,
                    targets: candidates,
                });
            }
        }
    }
    records.sort_by_key(|r| r.sample_id);
    Ok(records)
}

/// Expand a sparse record into a dense target vector over the class layout.
pub fn densify_targets(record: &SoftTargetRecord, layout: &ClassLayout) -> Result<Vec<f64>> {
    let mut out = vec![0.0; layout.num_classes()];
    for &(label, prob) in &record.targets {
        let class = layout
            .class_of(label)
            .ok_or_else(|| Error::Validation(format!("soft target label {label} is not a class")))?;
        out[class] = prob;
    }
    Ok(out)
}

// ── Students ─────────────────────────────────────────────────────────

/// Train the generalist over all N classes from densified soft targets. No
/// smearing: the records are the whole supervision signal.
pub fn train_student(
    arch: &ArchSpec,
    base: &BaseConfig,
    head: &ScalingHead,
    layout: &ClassLayout,
    dataset: &Dataset,
    records: &[SoftTargetRecord],
    cfg: &TrainConfig,
) -> Result<(Model, LossCurve)> {
    check_layout(arch, layout)?;
    let by_id: BTreeMap<u64, &SoftTargetRecord> =
        records.iter().map(|r| (r.sample_id, r)).collect();
    let train = dataset.train();
    let missing: Vec<u64> = train
        .iter()
        .filter(|s| !by_id.contains_key(&s.sample_id))
        .map(|s| s.sample_id)
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingTargets {
            count: missing.len(),
            first: missing.into_iter().take(5).collect(),
        });
    }
    let mut samples: Vec<(&[f64], Vec<f64>)> = Vec::with_capacity(train.len());
    for rec in &train {
        let target = densify_targets(by_id[&rec.sample_id], layout)?;
        samples.push((&rec.features, target));
    }
    let init_seed = crate::seeds::derive(cfg.seed, "student/init");
    let mut model = build_model(arch, base, head, init_seed)?;
    let curve = run_training(&mut model, &samples, cfg, "student", "student")?;
    Ok((model, curve))
}

/// Hard-label baseline: the same student architecture trained on one-hot
/// leaf labels with the standard procedure (no smearing, no distillation).
pub fn train_generalist_baseline(
    arch: &ArchSpec,
    base: &BaseConfig,
    head: &ScalingHead,
    layout: &ClassLayout,
    dataset: &Dataset,
    cfg: &TrainConfig,
) -> Result<(Model, LossCurve)> {
    check_layout(arch, layout)?;
    let train = dataset.train();
    if train.is_empty() {
        return Err(Error::NoData("no training samples".into()));
    }
    let mut samples: Vec<(&[f64], Vec<f64>)> = Vec::with_capacity(train.len());
    for rec in &train {
        let class = layout
            .class_of(rec.label_id)
            .ok_or(Error::UnknownLabel(rec.label_id))?;
        let mut target = vec![0.0; layout.num_classes()];
        target[class] = 1.0;
        samples.push((&rec.features, target));
    }
    let init_seed = crate::seeds::derive(cfg.seed, "student/init");
    let mut model = build_model(arch, base, head, init_seed)?;
    let curve = run_training(&mut model, &samples, cfg, "student", "baseline")?;
    Ok((model, curve))
}

fn check_layout(arch: &ArchSpec, layout: &ClassLayout) -> Result<()> {
    if arch.vertical_sizes != layout.vertical_sizes() {
        return Err(Error::Validation(format!(
            "architecture vertical sizes {:?} disagree with taxonomy layout {:?}",
            arch.vertical_sizes,
            layout.vertical_sizes()
        )));
    }
    Ok(())
}

// ── Scoring ──────────────────────────────────────────────────────────

/// Sigmoid probabilities of a student model on the test split, one scored
/// sample per test record.
pub fn score_test_set(model: &Model, layout: &ClassLayout, dataset: &Dataset) -> Result<Vec<ScoredSample>> {
    check_layout(&model.arch, layout)?;
    let test = dataset.test();
    if test.is_empty() {
        return Err(Error::NoData("dataset has no test samples".into()));
    }
    let mut out = Vec::with_capacity(test.len());
    for chunk in test.chunks(256) {
        let rows = chunk.len();
        let mut features = Vec::with_capacity(rows * dataset.d_in);
        for rec in chunk {
            features.extend_from_slice(&rec.features);
        }
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape)?;
        let input = tape.constant(features, vec![rows, dataset.d_in])?;
        let logits = bound.forward_from_raw(&mut tape, input)?;
        let probs = tape.sigmoid(logits);
        let n = layout.num_classes();
        let values = tape.value(probs);
        for (r, rec) in chunk.iter().enumerate() {
            out.push(ScoredSample {
                sample_id: rec.sample_id,
                label: rec.label_id,
                scores: values[r * n..(r + 1) * n].to_vec(),
            });
        }
    }
    Ok(out)
}

/// Teacher scores lifted into the student's class layout: the teacher's leaf
/// probabilities land on their class columns, everything else is 0. Only the
/// teacher's own vertical is meaningful.
pub fn score_test_set_with_teacher(
    teacher: &Teacher,
    tax: &LabelTaxonomy,
    layout: &ClassLayout,
    dataset: &Dataset,
) -> Result<Vec<ScoredSample>> {
    let leaves = tax.vertical_leaves(teacher.vertical)?;
    let leaf_cols: Vec<usize> = leaves
        .iter()
        .map(|id| teacher.space.binary_search(id).expect("leaf is in subtree"))
        .collect();
    let test = dataset.test();
    if test.is_empty() {
        return Err(Error::NoData("dataset has no test samples".into()));
    }
    let mut out = Vec::with_capacity(test.len());
    for chunk in test.chunks(256) {
        let rows = chunk.len();
        let mut features = Vec::with_capacity(rows * dataset.d_in);
        for rec in chunk {
            features.extend_from_slice(&rec.features);
        }
        let mut tape = Tape::new();
        let bound = teacher.model.bind(&mut tape)?;
        let input = tape.constant(features, vec![rows, dataset.d_in])?;
        let logits = bound.forward_from_raw(&mut tape, input)?;
        let probs = tape.sigmoid(logits);
        let width = teacher.space.len();
        let values = tape.value(probs);
        for (r, rec) in chunk.iter().enumerate() {
            let mut scores = vec![0.0; layout.num_classes()];
            for (&label, &col) in leaves.iter().zip(&leaf_cols) {
                scores[layout.class_of(label).expect("leaf is a class")] =
                    values[r * width + col];
            }
            out.push(ScoredSample { sample_id: rec.sample_id, label: rec.label_id, scores });
        }
    }
    Ok(out)
}

// ── Soft-target file format ──────────────────────────────────────────

/// Write records as JSON lines with probabilities at 17 significant digits,
/// enough to reproduce every f64 bit-exactly on parse.
pub fn save_soft_targets(records: &[SoftTargetRecord], path: &Path) -> Result<()> {
    let mut buf = String::new();
    for rec in records {
        buf.push_str(&format!(
            "{{\"sample_id\":{},\"vertical_id\":{},\"targets\":[",
            rec.sample_id, rec.vertical_id
        ));
        for (i, (label, prob)) in rec.targets.iter().enumerate() {
            if i > 0 {
                buf.push(',');
            }
            buf.push_str(&format!("[{label},{prob:.16e}]"));
        }
        buf.push_str("]}\n");
    }
    crate::data::write_atomic(path, buf.as_bytes())
}

pub fn load_soft_targets(path: &Path) -> Result<Vec<SoftTargetRecord>> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SoftTargetRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        records.push(rec);
    }
    Ok(records)
}
