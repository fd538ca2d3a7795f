//! Synthetic hierarchical datasets, dataset files, and model checkpoints.
//!
//! Features are precomputed vectors rather than images: everything this
//! framework studies happens above the base network, and vectors keep the
//! full pipeline in minutes. Each leaf class is a Gaussian cluster; sibling
//! clusters inside a vertical move closer together as `confusability` rises,
//! while verticals stay far apart.

use crate::error::{Error, Result};
use crate::layers::{ArchSpec, BaseConfig, Model, ScalingHead};
use crate::taxonomy::{LabelId, LabelTaxonomy, TaxNode};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

/// Distance from the origin to each vertical's center direction.
const VERTICAL_RADIUS: f64 = 4.0;
/// Within-vertical cluster spread at confusability 0 / 1.
const LEAF_RADIUS_MAX: f64 = 3.0;
const LEAF_RADIUS_MIN: f64 = 0.5;
/// Per-dimension sample noise.
const NOISE_SIGMA: f64 = 0.35;
/// Difficulty spread across verticals: the first vertical's clusters sit
/// this much farther apart, decaying geometrically to half by the last
/// vertical. Real verticals are nowhere near equally hard.
const DIFFICULTY_SPREAD_MAX: f64 = 1.3;

/// Per-vertical multiplier on the within-vertical cluster radius.
fn difficulty_spread(vertical: usize, num_verticals: usize) -> f64 {
    if num_verticals <= 1 {
        return 1.0;
    }
    let t = vertical as f64 / (num_verticals - 1) as f64;
    DIFFICULTY_SPREAD_MAX * 0.5f64.powf(t)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One example: feature vector plus groundtruth leaf.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: u64,
    pub split: Split,
    pub label_id: LabelId,
    pub features: Vec<f64>,
}

/// In-memory dataset, sorted by sample id.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub d_in: usize,
    pub samples: Vec<SampleRecord>,
}

impl Dataset {
    pub fn new(samples: Vec<SampleRecord>) -> Result<Self> {
        let Some(first) = samples.first() else {
            return Err(Error::NoData("dataset has no samples".into()));
        };
        let d_in = first.features.len();
        if samples.iter().any(|s| s.features.len() != d_in) {
            return Err(Error::Validation("inconsistent feature lengths in dataset".into()));
        }
        let mut samples = samples;
        samples.sort_by_key(|s| s.sample_id);
        Ok(Dataset { d_in, samples })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn train(&self) -> Vec<&SampleRecord> {
        self.split(Split::Train).collect()
    }

    pub fn test(&self) -> Vec<&SampleRecord> {
        self.split(Split::Test).collect()
    }
}

/// Shape of the synthetic benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub verticals: usize,
    pub leaves_per_vertical: usize,
    pub d_in: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// 0 = well-separated sibling clusters, 1 = nearly coincident.
    pub confusability: f64,
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("verticals", self.verticals),
            ("leaves_per_vertical", self.leaves_per_vertical),
            ("d_in", self.d_in),
            ("train_per_class", self.train_per_class),
            ("test_per_class", self.test_per_class),
        ] {
            if v == 0 {
                return Err(Error::Validation(format!("{name} must be positive")));
            }
        }
        if !(0.0..=1.0).contains(&self.confusability) {
            return Err(Error::Validation(format!(
                "confusability {} outside [0,1]",
                self.confusability
            )));
        }
        Ok(())
    }
}

fn unit_direction(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Generate the taxonomy and samples for one synthetic benchmark.
///
/// Taxonomy: root 0, vertical roots 1..=M, leaves M+1.. in vertical-major
/// order. Per-class sub-seeds make generation order-independent; the fixed
/// `test_per_class` tail of every class is held out as the test split.
pub fn generate_synthetic(cfg: &SyntheticConfig, seed: u64) -> Result<(LabelTaxonomy, Dataset)> {
    cfg.validate()?;
    let m = cfg.verticals;
    let leaves = cfg.leaves_per_vertical;

    let mut records = vec![TaxNode {
        id: 0,
        name: "root".into(),
        parent_id: None,
        is_vertical_root: false,
    }];
    for v in 0..m {
        records.push(TaxNode {
            id: (1 + v) as LabelId,
            name: format!("vertical{v}"),
            parent_id: Some(0),
            is_vertical_root: true,
        });
    }
    for v in 0..m {
        for j in 0..leaves {
            records.push(TaxNode {
                id: (1 + m + v * leaves + j) as LabelId,
                name: format!("v{v}_leaf{j}"),
                parent_id: Some((1 + v) as LabelId),
                is_vertical_root: false,
            });
        }
    }
    let tax = LabelTaxonomy::new(records)?;

    let leaf_radius = LEAF_RADIUS_MAX * (1.0 - cfg.confusability)
        + LEAF_RADIUS_MIN * cfg.confusability;
    let mut samples = Vec::with_capacity(m * leaves * (cfg.train_per_class + cfg.test_per_class));
    let mut next_id: u64 = 0;
    for v in 0..m {
        let mut vrng = crate::seeds::rng(seed, &format!("gen/vertical/{v}"));
        let center: Vec<f64> = unit_direction(&mut vrng, cfg.d_in)
            .into_iter()
            .map(|x| x * VERTICAL_RADIUS)
            .collect();
        let radius = leaf_radius * difficulty_spread(v, m);
        for j in 0..leaves {
            let label_id = (1 + m + v * leaves + j) as LabelId;
            let mut lrng = crate::seeds::rng(seed, &format!("gen/leaf/{label_id}"));
            let offset = unit_direction(&mut lrng, cfg.d_in);
            let leaf_center: Vec<f64> = center
                .iter()
                .zip(&offset)
                .map(|(c, o)| c + o * radius)
                .collect();
            let mut srng = crate::seeds::rng(seed, &format!("gen/sample/{label_id}"));
            for k in 0..cfg.train_per_class + cfg.test_per_class {
                let features: Vec<f64> = leaf_center
                    .iter()
                    .map(|c| {
                        let noise: f64 = StandardNormal.sample(&mut srng);
                        c + NOISE_SIGMA * noise
                    })
                    .collect();
                samples.push(SampleRecord {
                    sample_id: next_id,
                    split: if k < cfg.train_per_class { Split::Train } else { Split::Test },
                    label_id,
                    features,
                });
                next_id += 1;
            }
        }
    }
    Ok((tax, Dataset::new(samples)?))
}

// ── File I/O ─────────────────────────────────────────────────────────

/// Write a file atomically: temp file in the same directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Line-delimited dataset file, one JSON record per line, ascending id.
pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    for s in &dataset.samples {
        serde_json::to_writer(&mut buf, s).expect("sample record serializes");
        buf.push(b'\n');
    }
    write_atomic(path, &buf)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut samples = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        samples.push(rec);
    }
    Dataset::new(samples)
}

// ── Checkpoints ──────────────────────────────────────────────────────

const CKPT_MAGIC: &[u8; 4] = b"CKPT";
const CKPT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    arch: ArchSpec,
    base: BaseConfig,
    head: ScalingHead,
    seed: u64,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    len: usize,
}

/// Length-prefixed binary checkpoint: magic, version, JSON header, then all
/// tensor values as little-endian f64 in header order. Loading reproduces
/// forward outputs bitwise.
pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let header = CheckpointHeader {
        arch: model.arch.clone(),
        base: model.base.clone(),
        head: model.head.clone(),
        seed: model.seed,
        tensors: model
            .params
            .iter()
            .map(|p| TensorEntry { name: p.name.clone(), shape: p.shape.clone(), len: p.numel() })
            .collect(),
    };
    let header_json = serde_json::to_vec(&header).expect("checkpoint header serializes");
    let payload_len: u64 = model.params.iter().map(|p| p.numel() as u64 * 8).sum();

    let mut buf = Vec::with_capacity(24 + header_json.len() + payload_len as usize);
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header_json);
    buf.extend_from_slice(&payload_len.to_le_bytes());
    for p in &model.params {
        for v in &p.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_atomic(path, &buf)
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let mut file = std::fs::File::open(path)?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    let fail = |msg: &str| Error::Checkpoint(format!("{}: {msg}", path.display()));

    if bytes.len() < 16 {
        return Err(fail("file shorter than fixed header"));
    }
    if &bytes[0..4] != CKPT_MAGIC {
        return Err(fail("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CKPT_VERSION {
        return Err(fail(&format!("version {version} unsupported (expected {CKPT_VERSION})")));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let header_end = 16usize.checked_add(header_len).ok_or_else(|| fail("header length overflow"))?;
    if bytes.len() < header_end + 8 {
        return Err(fail("truncated header"));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[16..header_end])
        .map_err(|e| fail(&format!("header parse: {e}")))?;
    let payload_len =
        u64::from_le_bytes(bytes[header_end..header_end + 8].try_into().unwrap()) as usize;
    let expected: usize = header.tensors.iter().map(|t| t.len * 8).sum();
    if payload_len != expected {
        return Err(fail(&format!(
            "payload length field {payload_len} disagrees with header total {expected}"
        )));
    }
    let payload_start = header_end + 8;
    if bytes.len() != payload_start + payload_len {
        return Err(fail(&format!(
            "file has {} payload bytes, header promises {payload_len}",
            bytes.len().saturating_sub(payload_start)
        )));
    }

    let mut values = Vec::with_capacity(header.tensors.len());
    let mut offset = payload_start;
    for entry in &header.tensors {
        let mut data = Vec::with_capacity(entry.len);
        for _ in 0..entry.len {
            data.push(f64::from_le_bytes(bytes[offset..offset + 8].try_into().unwrap()));
            offset += 8;
        }
        values.push((entry.name.clone(), entry.shape.clone(), data));
    }
    Model::from_parts(&header.arch, &header.base, &header.head, header.seed, values)
}
