//! Model construction: base feature extractor, the four top-layer
//! topologies, and the self-paced scaling head.
//!
//! Every model is "base network + 2 top layers + logits". The top layers are
//! either dense (FC) or structurally connected (SC) — sparsely wired so each
//! vertical's logit block only sees that vertical's block of the previous
//! layer. Class columns are laid out contiguously by vertical (see
//! [`crate::taxonomy::ClassLayout`]), which turns per-vertical logit
//! normalization into a range operation.

use crate::budget::{BudgetInput, Topology};
use crate::error::{Error, Result};
use crate::tensor::{Tape, TensorId};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Declarative description of one top-layer topology.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub topology: Topology,
    /// Base network output width.
    pub s_b: usize,
    /// Top-1 width (shared `s1s` or per-vertical `s1i` depending on topology).
    pub s1: usize,
    /// Top-2 width.
    pub s2: usize,
    /// Generic (shared) slice of the top-2 layer; only `FcScGeneric` uses it.
    /// Zero makes `FcScGeneric` coincide with `FcSc`.
    #[serde(default)]
    pub generic_size: usize,
    /// Per-vertical class counts N_v in layout order; M = len, N = sum.
    pub vertical_sizes: Vec<usize>,
    /// Add bias vectors to every layer. Biases are counted separately and
    /// excluded from the closed-form weight budget.
    #[serde(default)]
    pub use_bias: bool,
}

impl ArchSpec {
    pub fn num_verticals(&self) -> usize {
        self.vertical_sizes.len()
    }

    pub fn num_classes(&self) -> usize {
        self.vertical_sizes.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("s_b", self.s_b), ("s1", self.s1), ("s2", self.s2)] {
            if v == 0 {
                return Err(Error::Validation(format!("{name} must be positive")));
            }
        }
        if self.vertical_sizes.is_empty() {
            return Err(Error::Validation("vertical_sizes must not be empty".into()));
        }
        if self.vertical_sizes.iter().any(|&n| n == 0) {
            return Err(Error::Validation("every vertical needs at least one class".into()));
        }
        if self.generic_size > self.s2 {
            return Err(Error::Validation(format!(
                "generic size {} exceeds s2 = {}",
                self.generic_size, self.s2
            )));
        }
        if self.topology != Topology::FcScGeneric && self.generic_size != 0 {
            return Err(Error::Validation(
                "generic size is only meaningful for the fc-sc-generic topology".into(),
            ));
        }
        Ok(())
    }

    /// Sizes for the closed-form parameter count.
    pub fn budget_input(&self) -> BudgetInput {
        BudgetInput {
            topology: self.topology,
            n: self.num_classes() as u64,
            m: self.num_verticals() as u64,
            s_b: self.s_b as u64,
            s1: self.s1 as u64,
            s2: self.s2 as u64,
            x: self.generic_size as u64,
        }
    }

    /// Column segments of the logit vector, one per vertical.
    pub fn segments(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.vertical_sizes.len());
        let mut start = 0;
        for &n in &self.vertical_sizes {
            out.push((start, start + n));
            start += n;
        }
        out
    }

    /// Owning vertical index per class column.
    pub fn class_to_vertical(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.num_classes());
        for (vi, &n) in self.vertical_sizes.iter().enumerate() {
            out.extend(std::iter::repeat(vi).take(n));
        }
        out
    }
}

/// Two dense sigmoid layers standing in for a convolutional base network;
/// kept deliberately small so the capacity gap against per-vertical
/// specialists shows up at desk scale.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BaseConfig {
    pub d_in: usize,
    pub hidden: usize,
}

/// Where scaling factors attach.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadMode {
    None,
    Vertical,
    Class,
}

/// Initialization policy for γ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GammaInit {
    /// Mean √N_v of the owning vertical (restores post-normalization
    /// gradient scale).
    SqrtNv,
    /// Fixed mean for every factor.
    Const(f64),
}

/// Self-paced head configuration: per-vertical L2 normalization of the
/// logits followed by multiplication with scaling factors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingHead {
    pub mode: HeadMode,
    pub init: GammaInit,
    /// Std-dev of the γ initialization.
    pub init_dev: f64,
    pub trainable: bool,
}

impl ScalingHead {
    pub fn none() -> Self {
        ScalingHead { mode: HeadMode::None, init: GammaInit::SqrtNv, init_dev: 1e-3, trainable: true }
    }

    pub fn new(mode: HeadMode, init: GammaInit, trainable: bool) -> Self {
        ScalingHead { mode, init, init_dev: 1e-3, trainable }
    }
}

/// What a parameter tensor is for; drives budget accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamKind {
    Base,
    Top,
    Bias,
    Gamma,
}

/// One named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub kind: ParamKind,
    pub trainable: bool,
}

impl NamedParam {
    pub fn numel(&self) -> usize {
        self.values.len()
    }
}

/// Offsets of each role in `Model::params`.
#[derive(Debug, Clone, Default)]
struct ParamIndex {
    base_w1: usize,
    base_w2: usize,
    base_b1: Option<usize>,
    base_b2: Option<usize>,
    /// One entry for shared-top-1 topologies, M entries for `ScSc`.
    top1: Vec<usize>,
    top1_bias: Vec<usize>,
    /// Per-vertical top-2 blocks (absent entries possible when the generic
    /// slice swallows the whole top-2 width).
    top2: Vec<Option<usize>>,
    top2_bias: Vec<Option<usize>>,
    generic: Option<usize>,
    generic_bias: Option<usize>,
    logit: Vec<usize>,
    logit_bias: Vec<usize>,
    gamma: Option<usize>,
}

/// A built model: base extractor, top layers, optional scaling head.
#[derive(Debug, Clone)]
pub struct Model {
    pub arch: ArchSpec,
    pub base: BaseConfig,
    pub head: ScalingHead,
    /// Seed the parameters were initialized from (checkpoint provenance).
    pub seed: u64,
    pub params: Vec<NamedParam>,
    index: ParamIndex,
}

/// Allocate and seed all parameters for an architecture.
pub fn build_model(arch: &ArchSpec, base: &BaseConfig, head: &ScalingHead, seed: u64) -> Result<Model> {
    arch.validate()?;
    if base.d_in == 0 || base.hidden == 0 {
        return Err(Error::Validation("base extractor sizes must be positive".into()));
    }
    let mut params: Vec<NamedParam> = Vec::new();
    let mut index = ParamIndex::default();
    let m = arch.num_verticals();
    let n = arch.num_classes();
    let x = arch.generic_size;

    let push_weight = |params: &mut Vec<NamedParam>, name: String, rows: usize, cols: usize, kind: ParamKind| {
        let mut rng = crate::seeds::rng(seed, &format!("param/{name}"));
        let a = (6.0 / (rows + cols) as f64).sqrt();
        let values = (0..rows * cols).map(|_| rng.gen_range(-a..a)).collect();
        params.push(NamedParam { name, shape: vec![rows, cols], values, kind, trainable: true });
        params.len() - 1
    };
    let push_bias = |params: &mut Vec<NamedParam>, name: String, len: usize| {
        params.push(NamedParam {
            name,
            shape: vec![len],
            values: vec![0.0; len],
            kind: ParamKind::Bias,
            trainable: true,
        });
        params.len() - 1
    };

    index.base_w1 = push_weight(&mut params, "base.w1".into(), base.d_in, base.hidden, ParamKind::Base);
    if arch.use_bias {
        index.base_b1 = Some(push_bias(&mut params, "base.b1".into(), base.hidden));
    }
    index.base_w2 = push_weight(&mut params, "base.w2".into(), base.hidden, arch.s_b, ParamKind::Base);
    if arch.use_bias {
        index.base_b2 = Some(push_bias(&mut params, "base.b2".into(), arch.s_b));
    }

    let shared_top1 = arch.topology != Topology::ScSc;
    if shared_top1 {
        index.top1.push(push_weight(&mut params, "top1.w".into(), arch.s_b, arch.s1, ParamKind::Top));
        if arch.use_bias {
            index.top1_bias.push(push_bias(&mut params, "top1.b".into(), arch.s1));
        }
    } else {
        for vi in 0..m {
            index.top1.push(push_weight(&mut params, format!("top1.v{vi}.w"), arch.s_b, arch.s1, ParamKind::Top));
            if arch.use_bias {
                index.top1_bias.push(push_bias(&mut params, format!("top1.v{vi}.b"), arch.s1));
            }
        }
    }

    match arch.topology {
        Topology::FcFc => {
            index.top2.push(Some(push_weight(&mut params, "top2.w".into(), arch.s1, arch.s2, ParamKind::Top)));
            if arch.use_bias {
                index.top2_bias.push(Some(push_bias(&mut params, "top2.b".into(), arch.s2)));
            }
            index.logit.push(push_weight(&mut params, "logit.w".into(), arch.s2, n, ParamKind::Top));
            if arch.use_bias {
                index.logit_bias.push(push_bias(&mut params, "logit.b".into(), n));
            }
        }
        Topology::FcSc | Topology::ScSc | Topology::FcScGeneric => {
            let individual = arch.s2 - x;
            if arch.topology == Topology::FcScGeneric && x > 0 {
                index.generic =
                    Some(push_weight(&mut params, "top2.generic.w".into(), arch.s1, x, ParamKind::Top));
                if arch.use_bias {
                    index.generic_bias = Some(push_bias(&mut params, "top2.generic.b".into(), x));
                }
            }
            for vi in 0..m {
                if individual > 0 {
                    index.top2.push(Some(push_weight(
                        &mut params,
                        format!("top2.v{vi}.w"),
                        arch.s1,
                        individual,
                        ParamKind::Top,
                    )));
                    index.top2_bias.push(if arch.use_bias {
                        Some(push_bias(&mut params, format!("top2.v{vi}.b"), individual))
                    } else {
                        None
                    });
                } else {
                    index.top2.push(None);
                    index.top2_bias.push(None);
                }
            }
            for (vi, &n_v) in arch.vertical_sizes.iter().enumerate() {
                index.logit.push(push_weight(&mut params, format!("logit.v{vi}.w"), arch.s2, n_v, ParamKind::Top));
                if arch.use_bias {
                    index.logit_bias.push(push_bias(&mut params, format!("logit.v{vi}.b"), n_v));
                }
            }
        }
    }

    if head.mode != HeadMode::None {
        let count = match head.mode {
            HeadMode::Vertical => m,
            HeadMode::Class => n,
            HeadMode::None => unreachable!(),
        };
        let class_to_vertical = arch.class_to_vertical();
        let mut rng = crate::seeds::rng(seed, "param/head.gamma");
        let mut values = Vec::with_capacity(count);
        for i in 0..count {
            let owning = match head.mode {
                HeadMode::Vertical => i,
                _ => class_to_vertical[i],
            };
            let mean = match head.init {
                GammaInit::SqrtNv => (arch.vertical_sizes[owning] as f64).sqrt(),
                GammaInit::Const(c) => c,
            };
            let dist = Normal::new(mean, head.init_dev)
                .map_err(|e| Error::Validation(format!("gamma init: {e}")))?;
            values.push(dist.sample(&mut rng));
        }
        params.push(NamedParam {
            name: "head.gamma".into(),
            shape: vec![count],
            values,
            kind: ParamKind::Gamma,
            trainable: head.trainable,
        });
        index.gamma = Some(params.len() - 1);
    }

    Ok(Model { arch: arch.clone(), base: base.clone(), head: head.clone(), seed, params, index })
}

impl Model {
    /// Allocated top-layer weight count; must equal
    /// [`crate::budget::count_params`] on [`ArchSpec::budget_input`] exactly.
    pub fn top_layer_weight_count(&self) -> u64 {
        self.params
            .iter()
            .filter(|p| p.kind == ParamKind::Top)
            .map(|p| p.numel() as u64)
            .sum()
    }

    /// Every trainable parameter including base, biases and γ.
    pub fn total_param_count(&self) -> u64 {
        self.params.iter().map(|p| p.numel() as u64).sum()
    }

    pub fn param(&self, name: &str) -> Option<&NamedParam> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut NamedParam> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    /// Rebuild a model from checkpointed parts, checking names and shapes
    /// against a fresh skeleton of the same configuration.
    pub fn from_parts(
        arch: &ArchSpec,
        base: &BaseConfig,
        head: &ScalingHead,
        seed: u64,
        values: Vec<(String, Vec<usize>, Vec<f64>)>,
    ) -> Result<Model> {
        let mut model = build_model(arch, base, head, seed)?;
        if values.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, file has {}",
                model.params.len(),
                values.len()
            )));
        }
        for (param, (name, shape, data)) in model.params.iter_mut().zip(values) {
            if param.name != name || param.shape != shape {
                return Err(Error::Checkpoint(format!(
                    "tensor mismatch: expected {} {:?}, found {} {:?}",
                    param.name, param.shape, name, shape
                )));
            }
            if data.len() != param.values.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} has {} values, expected {}",
                    name,
                    data.len(),
                    param.values.len()
                )));
            }
            param.values = data;
        }
        Ok(model)
    }

    /// Register all parameters on a tape for one forward/backward pass.
    pub fn bind<'a>(&'a self, tape: &mut Tape) -> Result<BoundModel<'a>> {
        let mut param_ids = Vec::with_capacity(self.params.len());
        for p in &self.params {
            param_ids.push(tape.leaf(p.values.clone(), p.shape.clone(), true)?);
        }
        Ok(BoundModel { model: self, param_ids })
    }
}

/// A model bound to a tape: parameters registered as differentiable leaves.
pub struct BoundModel<'a> {
    pub model: &'a Model,
    /// Aligned with `model.params`.
    pub param_ids: Vec<TensorId>,
}

impl BoundModel<'_> {
    fn id(&self, slot: usize) -> TensorId {
        self.param_ids[slot]
    }

    fn dense(
        &self,
        tape: &mut Tape,
        input: TensorId,
        weight: usize,
        bias: Option<usize>,
        activate: bool,
    ) -> Result<TensorId> {
        let mut h = tape.matmul(input, self.id(weight))?;
        if let Some(b) = bias {
            h = tape.add_row(h, self.id(b))?;
        }
        Ok(if activate { tape.sigmoid(h) } else { h })
    }

    /// Two-layer sigmoid extractor: raw `[batch × d_in]` → `[batch × s_b]`.
    pub fn base_extract(&self, tape: &mut Tape, raw: TensorId) -> Result<TensorId> {
        let m = self.model;
        if tape.shape(raw) != [tape.shape(raw)[0], m.base.d_in] {
            return Err(Error::ShapeMismatch {
                op: "base_extract",
                lhs: tape.shape(raw).to_vec(),
                rhs: vec![tape.shape(raw)[0], m.base.d_in],
            });
        }
        let h = self.dense(tape, raw, m.index.base_w1, m.index.base_b1, true)?;
        self.dense(tape, h, m.index.base_w2, m.index.base_b2, true)
    }

    /// Top layers + head: features `[batch × s_b]` → logits `[batch × N]`.
    ///
    /// SC topologies route each vertical's logit block only through that
    /// vertical's top-2 (and, for SC-SC, top-1) block; the generic variant
    /// concatenates the shared slice into every vertical's top-2.
    pub fn forward(&self, tape: &mut Tape, features: TensorId) -> Result<TensorId> {
        let m = self.model;
        let arch = &m.arch;
        if tape.shape(features)[1] != arch.s_b {
            return Err(Error::ShapeMismatch {
                op: "forward",
                lhs: tape.shape(features).to_vec(),
                rhs: vec![tape.shape(features)[0], arch.s_b],
            });
        }
        let idx = &m.index;
        let raw_logits = match arch.topology {
            Topology::FcFc => {
                let h1 = self.dense(tape, features, idx.top1[0], idx.top1_bias.first().copied(), true)?;
                let h2 = self.dense(tape, h1, idx.top2[0].unwrap(), idx.top2_bias.first().copied().flatten(), true)?;
                self.dense(tape, h2, idx.logit[0], idx.logit_bias.first().copied(), false)?
            }
            Topology::FcSc | Topology::FcScGeneric => {
                let h1 = self.dense(tape, features, idx.top1[0], idx.top1_bias.first().copied(), true)?;
                let generic = match idx.generic {
                    Some(g) => Some(self.dense(tape, h1, g, idx.generic_bias, true)?),
                    None => None,
                };
                let mut blocks = Vec::with_capacity(arch.num_verticals());
                for vi in 0..arch.num_verticals() {
                    let individual = match idx.top2[vi] {
                        Some(w) => Some(self.dense(tape, h1, w, idx.top2_bias[vi], true)?),
                        None => None,
                    };
                    let h2 = match (individual, generic) {
                        (Some(i), Some(g)) => tape.concat_cols(&[i, g])?,
                        (Some(i), None) => i,
                        (None, Some(g)) => g,
                        (None, None) => unreachable!("s2 > 0 guarantees a top-2 input"),
                    };
                    blocks.push(self.dense(tape, h2, idx.logit[vi], idx.logit_bias.get(vi).copied(), false)?);
                }
                tape.concat_cols(&blocks)?
            }
            Topology::ScSc => {
                let mut blocks = Vec::with_capacity(arch.num_verticals());
                for vi in 0..arch.num_verticals() {
                    let h1 = self.dense(tape, features, idx.top1[vi], idx.top1_bias.get(vi).copied(), true)?;
                    let h2 = self.dense(tape, h1, idx.top2[vi].unwrap(), idx.top2_bias[vi], true)?;
                    blocks.push(self.dense(tape, h2, idx.logit[vi], idx.logit_bias.get(vi).copied(), false)?);
                }
                tape.concat_cols(&blocks)?
            }
        };
        match idx.gamma {
            Some(g) => apply_scaling_head(
                tape,
                raw_logits,
                m.head.mode,
                self.id(g),
                &arch.segments(),
                &arch.class_to_vertical(),
            ),
            None => Ok(raw_logits),
        }
    }

    /// Full pipeline: raw input → base features → logits.
    pub fn forward_from_raw(&self, tape: &mut Tape, raw: TensorId) -> Result<TensorId> {
        let features = self.base_extract(tape, raw)?;
        self.forward(tape, features)
    }
}

/// Self-paced head: L2-normalize each vertical's logit segment, then scale
/// by γ — one factor per vertical or per class. `HeadMode::None` passes the
/// logits through untouched.
pub fn apply_scaling_head(
    tape: &mut Tape,
    logits: TensorId,
    mode: HeadMode,
    gamma: TensorId,
    segments: &[(usize, usize)],
    class_to_vertical: &[usize],
) -> Result<TensorId> {
    match mode {
        HeadMode::None => Ok(logits),
        HeadMode::Vertical => {
            let normalized = tape.l2_normalize_segments(logits, segments)?;
            tape.scale_columns(normalized, gamma, class_to_vertical)
        }
        HeadMode::Class => {
            let normalized = tape.l2_normalize_segments(logits, segments)?;
            let identity: Vec<usize> = (0..class_to_vertical.len()).collect();
            tape.scale_columns(normalized, gamma, &identity)
        }
    }
}
