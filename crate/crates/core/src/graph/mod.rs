//! Graph data model, on-disk bundles, fold plans and the synthetic
//! confounded-graph generator.

mod bundle;
mod folds;
mod synth;

use std::path::PathBuf;
use std::rc::Rc;
use std::sync::Arc;

use thiserror::Error;

use crate::tensor::Tensor;

pub use bundle::{load_bundle, read_meta, save_bundle, save_bundle_with, BundleMeta};
pub use folds::{make_folds, make_folds_with, Fold, FoldOptions, FoldPlan};
pub use synth::{synth_confounded, GroundTruth, SyntheticSpec, SyntheticViews};

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("invalid graph: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed meta.json: {source}")]
    Meta {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: size mismatch, expected {expected} bytes, found {actual}")]
    SizeMismatch { path: PathBuf, expected: u64, actual: u64 },
    #[error("{path}: value {value} at byte offset {offset} out of range (must be < {bound})")]
    OutOfRange { path: PathBuf, offset: u64, value: u64, bound: u64 },
    #[error("class {class} has {count} members, fewer than {k} folds")]
    Stratification { class: usize, count: usize, k: usize },
}

/// Node-feature matrix, directed edge list and labels.
///
/// Edges are `(src, dst)` pairs: messages flow from `src` into `dst`. The CSR
/// view groups edges by destination so per-node attention softmaxes see
/// contiguous runs.
#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    name: String,
    features: Arc<Tensor>,
    labels: Vec<usize>,
    num_classes: usize,
    edges: Vec<(usize, usize)>,
    directed: bool,
    self_loops_added: bool,
    csr_offsets: Vec<usize>,
    csr_sources: Vec<usize>,
    csr_edge_ids: Vec<usize>,
}

/// Edge endpoints in CSR (destination-sorted) order, ready for tape ops.
#[derive(Clone, Debug)]
pub struct EdgeIndex {
    pub src: Rc<[usize]>,
    pub dst: Rc<[usize]>,
    pub num_nodes: usize,
    /// Every node has exactly one self-loop, so no softmax segment is empty.
    pub self_loops: bool,
}

impl Graph {
    pub fn new(
        name: impl Into<String>,
        features: Tensor,
        labels: Vec<usize>,
        num_classes: usize,
        edges: Vec<(usize, usize)>,
        directed: bool,
    ) -> Result<Self, GraphError> {
        let n = features.rows();
        if features.shape().len() != 2 {
            return Err(GraphError::Invalid(format!("features must be 2-D, got {:?}", features.shape())));
        }
        if labels.len() != n {
            return Err(GraphError::Invalid(format!("{} labels for {n} nodes", labels.len())));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(GraphError::Invalid(format!("label {l} out of range for {num_classes} classes")));
        }
        if let Some(&(s, d)) = edges.iter().find(|&&(s, d)| s >= n || d >= n) {
            return Err(GraphError::Invalid(format!("edge ({s}, {d}) out of range for {n} nodes")));
        }
        let mut g = Self {
            name: name.into(),
            features: Arc::new(features),
            labels,
            num_classes,
            edges,
            directed,
            self_loops_added: false,
            csr_offsets: Vec::new(),
            csr_sources: Vec::new(),
            csr_edge_ids: Vec::new(),
        };
        g.build_csr();
        Ok(g)
    }

    fn build_csr(&mut self) {
        let n = self.num_nodes();
        let mut counts = vec![0usize; n + 1];
        for &(_, d) in &self.edges {
            counts[d + 1] += 1;
        }
        for i in 0..n {
            counts[i + 1] += counts[i];
        }
        let mut cursor = counts.clone();
        let mut sources = vec![0; self.edges.len()];
        let mut ids = vec![0; self.edges.len()];
        for (e, &(s, d)) in self.edges.iter().enumerate() {
            sources[cursor[d]] = s;
            ids[cursor[d]] = e;
            cursor[d] += 1;
        }
        self.csr_offsets = counts;
        self.csr_sources = sources;
        self.csr_edge_ids = ids;
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn num_nodes(&self) -> usize {
        self.features.rows()
    }

    pub fn num_features(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn is_directed(&self) -> bool {
        self.directed
    }

    pub fn self_loops_added(&self) -> bool {
        self.self_loops_added
    }

    /// Sources of edges into `node`, in CSR order.
    pub fn in_neighbors(&self, node: usize) -> &[usize] {
        &self.csr_sources[self.csr_offsets[node]..self.csr_offsets[node + 1]]
    }

    pub fn csr_offsets(&self) -> &[usize] {
        &self.csr_offsets
    }

    /// COO position of each CSR slot.
    pub fn csr_edge_ids(&self) -> &[usize] {
        &self.csr_edge_ids
    }

    /// True when every node has exactly one `(i, i)` edge.
    pub fn has_self_loops(&self) -> bool {
        let mut seen = vec![0u32; self.num_nodes()];
        for &(s, d) in &self.edges {
            if s == d {
                seen[s] += 1;
            }
        }
        seen.iter().all(|&c| c == 1)
    }

    pub fn edge_index(&self) -> EdgeIndex {
        let n = self.num_nodes();
        let mut dst = Vec::with_capacity(self.csr_sources.len());
        for i in 0..n {
            dst.extend(std::iter::repeat_n(i, self.csr_offsets[i + 1] - self.csr_offsets[i]));
        }
        EdgeIndex {
            src: Rc::from(self.csr_sources.clone()),
            dst: Rc::from(dst),
            num_nodes: n,
            self_loops: self.has_self_loops(),
        }
    }

    /// Guarantees exactly one `(i, i)` edge per node. Idempotent.
    pub fn add_self_loops(&self) -> Graph {
        let n = self.num_nodes();
        let mut has = vec![false; n];
        let mut edges = Vec::with_capacity(self.edges.len() + n);
        for &(s, d) in &self.edges {
            if s == d {
                if has[s] {
                    continue;
                }
                has[s] = true;
            }
            edges.push((s, d));
        }
        edges.extend((0..n).filter(|&i| !has[i]).map(|i| (i, i)));
        let mut g = self.with_edges(edges);
        g.self_loops_added = true;
        g
    }

    /// Same nodes, features and labels over a different edge list.
    pub fn with_edges(&self, edges: Vec<(usize, usize)>) -> Graph {
        let mut g = Graph {
            name: self.name.clone(),
            features: Arc::clone(&self.features),
            labels: self.labels.clone(),
            num_classes: self.num_classes,
            edges,
            directed: self.directed,
            self_loops_added: self.self_loops_added,
            csr_offsets: Vec::new(),
            csr_sources: Vec::new(),
            csr_edge_ids: Vec::new(),
        };
        g.build_csr();
        g
    }

    /// Same structure with different labels (used by label-leak tripwires).
    pub fn with_labels(&self, labels: Vec<usize>) -> Result<Graph, GraphError> {
        let mut g = Graph::new(
            self.name.clone(),
            Tensor::clone(&self.features),
            labels,
            self.num_classes,
            self.edges.clone(),
            self.directed,
        )?;
        g.self_loops_added = self.self_loops_added;
        Ok(g)
    }

    /// Number of nodes of each class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}
