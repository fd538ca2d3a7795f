//! Label hierarchy: a rooted tree whose leaves are the output classes,
//! partitioned into verticals by designated subtree roots.
//!
//! The taxonomy drives three things: label smearing (a leaf's positives
//! propagate to its ancestors), the vertical mapping `f_map` routing each
//! label to its owning vertical, and the contiguous per-vertical class layout
//! that makes segment-wise logit normalization a range operation.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader};
use std::path::Path;

pub type LabelId = u32;

/// One taxonomy record, as stored in the line-delimited taxonomy file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaxNode {
    pub id: LabelId,
    pub name: String,
    pub parent_id: Option<LabelId>,
    pub is_vertical_root: bool,
}

/// Positive labels for one training example after smearing: the leaf plus
/// every ancestor, closed under the ancestor relation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SmearedLabel {
    pub leaf: LabelId,
    /// Sorted ascending; contains `leaf`.
    pub positives: Vec<LabelId>,
}

/// Validated label tree with vertical partition.
#[derive(Debug, Clone)]
pub struct LabelTaxonomy {
    nodes: BTreeMap<LabelId, TaxNode>,
    children: HashMap<LabelId, Vec<LabelId>>,
    root: LabelId,
    vertical_roots: Vec<LabelId>,
    leaves: Vec<LabelId>,
}

impl LabelTaxonomy {
    /// Build from records, checking the tree and partition invariants.
    pub fn new(records: Vec<TaxNode>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Validation("taxonomy has no nodes".into()));
        }
        let mut nodes = BTreeMap::new();
        for rec in records {
            if nodes.insert(rec.id, rec.clone()).is_some() {
                return Err(Error::Validation(format!("duplicate label id {}", rec.id)));
            }
        }
        let mut children: HashMap<LabelId, Vec<LabelId>> = HashMap::new();
        let mut roots = Vec::new();
        for node in nodes.values() {
            match node.parent_id {
                Some(p) => {
                    if !nodes.contains_key(&p) {
                        return Err(Error::Validation(format!(
                            "label {} points at missing parent {p}",
                            node.id
                        )));
                    }
                    children.entry(p).or_default().push(node.id);
                }
                None => roots.push(node.id),
            }
        }
        let [root] = roots[..] else {
            return Err(Error::Validation(format!(
                "taxonomy must have exactly one root, found {roots:?}"
            )));
        };
        for kids in children.values_mut() {
            kids.sort_unstable();
        }

        // Cycle check: every node must reach the root within |nodes| hops.
        for &id in nodes.keys() {
            let mut cur = id;
            let mut hops = 0;
            while let Some(p) = nodes[&cur].parent_id {
                cur = p;
                hops += 1;
                if hops > nodes.len() {
                    return Err(Error::Validation(format!("cycle through label {id}")));
                }
            }
            if cur != root {
                return Err(Error::Validation(format!("label {id} is disconnected from the root")));
            }
        }

        let vertical_roots: Vec<LabelId> =
            nodes.values().filter(|n| n.is_vertical_root).map(|n| n.id).collect();
        if vertical_roots.is_empty() {
            return Err(Error::Validation("taxonomy declares no vertical roots".into()));
        }
        let leaves: Vec<LabelId> = nodes
            .keys()
            .filter(|id| !children.contains_key(id))
            .copied()
            .collect();

        let tax = LabelTaxonomy { nodes, children, root, vertical_roots, leaves };

        // Verticals must partition the leaves: exactly one vertical root on
        // every leaf-to-root path.
        for &leaf in &tax.leaves {
            let owners = tax
                .path_to_root(leaf)
                .into_iter()
                .filter(|id| tax.nodes[id].is_vertical_root)
                .count();
            if owners != 1 {
                return Err(Error::Validation(format!(
                    "leaf {leaf} is covered by {owners} vertical roots, expected exactly 1"
                )));
            }
        }
        Ok(tax)
    }

    pub fn root(&self) -> LabelId {
        self.root
    }

    /// Vertical root ids, ascending.
    pub fn vertical_roots(&self) -> &[LabelId] {
        &self.vertical_roots
    }

    /// Leaf ids, ascending.
    pub fn leaves(&self) -> &[LabelId] {
        &self.leaves
    }

    pub fn num_classes(&self) -> usize {
        self.leaves.len()
    }

    pub fn contains(&self, id: LabelId) -> bool {
        self.nodes.contains_key(&id)
    }

    pub fn is_leaf(&self, id: LabelId) -> bool {
        self.contains(id) && !self.children.contains_key(&id)
    }

    pub fn node(&self, id: LabelId) -> Option<&TaxNode> {
        self.nodes.get(&id)
    }

    /// All records, ascending by id (serialization order).
    pub fn records(&self) -> Vec<TaxNode> {
        self.nodes.values().cloned().collect()
    }

    /// Path from `id` up to the root, inclusive on both ends.
    fn path_to_root(&self, id: LabelId) -> Vec<LabelId> {
        let mut path = vec![id];
        let mut cur = id;
        while let Some(p) = self.nodes[&cur].parent_id {
            path.push(p);
            cur = p;
        }
        path
    }

    /// Leaf positives propagated to every ancestor, root included.
    pub fn smear(&self, leaf: LabelId) -> Result<SmearedLabel> {
        if !self.contains(leaf) {
            return Err(Error::UnknownLabel(leaf));
        }
        if !self.is_leaf(leaf) {
            return Err(Error::Validation(format!("label {leaf} is not a leaf; smear takes leaves")));
        }
        let mut positives = self.path_to_root(leaf);
        positives.sort_unstable();
        Ok(SmearedLabel { leaf, positives })
    }

    /// Smear restricted to one vertical's subtree: the positives a teacher
    /// for that vertical trains against. Labels above the vertical root are
    /// dropped (a teacher only sees its own subtree).
    pub fn smear_within(&self, leaf: LabelId, vertical: LabelId) -> Result<Vec<LabelId>> {
        let full = self.smear(leaf)?;
        let subtree = self.subtree_labels(vertical)?;
        Ok(full.positives.into_iter().filter(|id| subtree.binary_search(id).is_ok()).collect())
    }

    /// The vertical owning a label: its unique vertical-root ancestor
    /// (or the label itself when it is a vertical root).
    pub fn f_map(&self, label: LabelId) -> Result<LabelId> {
        if !self.contains(label) {
            return Err(Error::UnknownLabel(label));
        }
        self.path_to_root(label)
            .into_iter()
            .find(|id| self.nodes[id].is_vertical_root)
            .ok_or(Error::NoVertical(label))
    }

    /// Every label in the subtree rooted at `root` (root included), ascending.
    pub fn subtree_labels(&self, root: LabelId) -> Result<Vec<LabelId>> {
        if !self.contains(root) {
            return Err(Error::UnknownLabel(root));
        }
        let mut out = Vec::new();
        let mut stack = vec![root];
        while let Some(id) = stack.pop() {
            out.push(id);
            if let Some(kids) = self.children.get(&id) {
                stack.extend(kids.iter().copied());
            }
        }
        out.sort_unstable();
        Ok(out)
    }

    /// Leaves under one vertical root, ascending.
    pub fn vertical_leaves(&self, vertical: LabelId) -> Result<Vec<LabelId>> {
        let subtree = self.subtree_labels(vertical)?;
        Ok(subtree.into_iter().filter(|id| self.is_leaf(*id)).collect())
    }

    /// Contiguous vertical-major class ordering for the student's output.
    pub fn class_layout(&self) -> ClassLayout {
        let mut class_order = Vec::with_capacity(self.leaves.len());
        let mut ranges = Vec::with_capacity(self.vertical_roots.len());
        for &v in &self.vertical_roots {
            let start = class_order.len();
            let leaves = self.vertical_leaves(v).expect("vertical root exists");
            class_order.extend(leaves);
            ranges.push(VerticalRange { vertical: v, start, end: class_order.len() });
        }
        let label_to_class =
            class_order.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let mut class_to_vertical = vec![0usize; class_order.len()];
        for (vi, r) in ranges.iter().enumerate() {
            for slot in class_to_vertical.iter_mut().take(r.end).skip(r.start) {
                *slot = vi;
            }
        }
        ClassLayout { class_order, ranges, label_to_class, class_to_vertical }
    }
}

/// Class index range owned by one vertical.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerticalRange {
    pub vertical: LabelId,
    pub start: usize,
    pub end: usize,
}

/// Stable permutation of leaf labels grouped by vertical (vertical roots
/// ascending, then leaf id ascending) plus the per-vertical index ranges.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassLayout {
    /// Leaf label id at each class index.
    pub class_order: Vec<LabelId>,
    /// Disjoint ranges covering `[0, N)`, one per vertical.
    pub ranges: Vec<VerticalRange>,
    /// Inverse of `class_order`.
    pub label_to_class: HashMap<LabelId, usize>,
    /// Vertical index (position in `ranges`) per class index.
    pub class_to_vertical: Vec<usize>,
}

impl ClassLayout {
    pub fn num_classes(&self) -> usize {
        self.class_order.len()
    }

    /// Per-vertical class counts N_v, in range order.
    pub fn vertical_sizes(&self) -> Vec<usize> {
        self.ranges.iter().map(|r| r.end - r.start).collect()
    }

    pub fn class_of(&self, label: LabelId) -> Option<usize> {
        self.label_to_class.get(&label).copied()
    }

    /// Segment tuples for the normalization op.
    pub fn segments(&self) -> Vec<(usize, usize)> {
        self.ranges.iter().map(|r| (r.start, r.end)).collect()
    }

    /// Range index of a vertical root id.
    pub fn vertical_index(&self, vertical: LabelId) -> Option<usize> {
        self.ranges.iter().position(|r| r.vertical == vertical)
    }
}

// ── File format ──────────────────────────────────────────────────────

/// Read a line-delimited taxonomy file (one JSON record per line).
pub fn load_taxonomy(path: &Path) -> Result<LabelTaxonomy> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TaxNode = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        records.push(rec);
    }
    LabelTaxonomy::new(records)
}

/// Write the taxonomy as one JSON record per line, ascending by id.
pub fn save_taxonomy(tax: &LabelTaxonomy, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    for rec in tax.records() {
        serde_json::to_writer(&mut buf, &rec).expect("taxonomy record serializes");
        buf.push(b'\n');
    }
    crate::data::write_atomic(path, &buf)
}
