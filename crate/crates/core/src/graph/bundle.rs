//! GraphBundle directory format.
//!
//! ```text
//! meta.json     name, num_nodes, num_features, num_classes, num_edges, directed
//! features.f32  n·d little-endian f32, row-major
//! edges.u32     E (src, dst) pairs of little-endian u32
//! labels.u16    n little-endian u16
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Graph, GraphError};
use crate::tensor::Tensor;

pub const META_FILE: &str = "meta.json";
pub const FEATURES_FILE: &str = "features.f32";
pub const EDGES_FILE: &str = "edges.u32";
pub const LABELS_FILE: &str = "labels.u16";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleMeta {
    pub name: String,
    pub num_nodes: usize,
    pub num_features: usize,
    pub num_classes: usize,
    pub num_edges: usize,
    pub directed: bool,
    /// Keys written by other tools (e.g. the dataset converter) are kept verbatim.
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

fn read(path: &Path) -> Result<Vec<u8>, GraphError> {
    fs::read(path).map_err(|source| GraphError::Io { path: path.to_path_buf(), source })
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), GraphError> {
    fs::write(path, bytes).map_err(|source| GraphError::Io { path: path.to_path_buf(), source })
}

fn expect_len(path: &Path, bytes: &[u8], expected: usize) -> Result<(), GraphError> {
    if bytes.len() != expected {
        return Err(GraphError::SizeMismatch {
            path: path.to_path_buf(),
            expected: expected as u64,
            actual: bytes.len() as u64,
        });
    }
    Ok(())
}

pub fn read_meta(dir: &Path) -> Result<BundleMeta, GraphError> {
    let path = dir.join(META_FILE);
    let bytes = read(&path)?;
    serde_json::from_slice(&bytes).map_err(|source| GraphError::Meta { path, source })
}

/// Loads and validates a bundle; features are widened to `f64`.
pub fn load_bundle(dir: impl AsRef<Path>) -> Result<Graph, GraphError> {
    let dir = dir.as_ref();
    let meta = read_meta(dir)?;
    let (n, d, e) = (meta.num_nodes, meta.num_features, meta.num_edges);

    let fpath = dir.join(FEATURES_FILE);
    let fbytes = read(&fpath)?;
    expect_len(&fpath, &fbytes, n * d * 4)?;
    let features: Vec<f64> = fbytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();

    let epath = dir.join(EDGES_FILE);
    let ebytes = read(&epath)?;
    expect_len(&epath, &ebytes, e * 8)?;
    let mut edges = Vec::with_capacity(e);
    let out_of_range = |path: &PathBuf, offset: usize, value: u64, bound: usize| GraphError::OutOfRange {
        path: path.clone(),
        offset: offset as u64,
        value,
        bound: bound as u64,
    };
    for (k, pair) in ebytes.chunks_exact(8).enumerate() {
        let s = u32::from_le_bytes([pair[0], pair[1], pair[2], pair[3]]) as usize;
        let t = u32::from_le_bytes([pair[4], pair[5], pair[6], pair[7]]) as usize;
        if s >= n {
            return Err(out_of_range(&epath, k * 8, s as u64, n));
        }
        if t >= n {
            return Err(out_of_range(&epath, k * 8 + 4, t as u64, n));
        }
        edges.push((s, t));
    }

    let lpath = dir.join(LABELS_FILE);
    let lbytes = read(&lpath)?;
    expect_len(&lpath, &lbytes, n * 2)?;
    let mut labels = Vec::with_capacity(n);
    for (k, b) in lbytes.chunks_exact(2).enumerate() {
        let l = u16::from_le_bytes([b[0], b[1]]) as usize;
        if l >= meta.num_classes {
            return Err(out_of_range(&lpath, k * 2, l as u64, meta.num_classes));
        }
        labels.push(l);
    }

    Graph::new(meta.name, Tensor::matrix(n, d, features), labels, meta.num_classes, edges, meta.directed)
}

/// Writes `graph` as a bundle. Features are narrowed to `f32`.
pub fn save_bundle(graph: &Graph, dir: impl AsRef<Path>) -> Result<(), GraphError> {
    save_bundle_with(graph, dir, serde_json::Map::new())
}

/// [`save_bundle`] with extra meta.json keys.
pub fn save_bundle_with(
    graph: &Graph,
    dir: impl AsRef<Path>,
    extra: serde_json::Map<String, serde_json::Value>,
) -> Result<(), GraphError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|source| GraphError::Io { path: dir.to_path_buf(), source })?;
    let meta = BundleMeta {
        name: graph.name().to_string(),
        num_nodes: graph.num_nodes(),
        num_features: graph.num_features(),
        num_classes: graph.num_classes(),
        num_edges: graph.num_edges(),
        directed: graph.is_directed(),
        extra,
    };
    let mut json = serde_json::to_string_pretty(&meta).expect("meta serializes");
    json.push('\n');
    write(&dir.join(META_FILE), json.as_bytes())?;

    let mut fbytes = Vec::with_capacity(graph.features().len() * 4);
    for &v in graph.features().data() {
        fbytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    write(&dir.join(FEATURES_FILE), &fbytes)?;

    let mut ebytes = Vec::with_capacity(graph.num_edges() * 8);
    for &(s, t) in graph.edges() {
        ebytes.extend_from_slice(&(s as u32).to_le_bytes());
        ebytes.extend_from_slice(&(t as u32).to_le_bytes());
    }
    write(&dir.join(EDGES_FILE), &ebytes)?;

    let mut lbytes = Vec::with_capacity(graph.num_nodes() * 2);
    for &l in graph.labels() {
        lbytes.extend_from_slice(&(l as u16).to_le_bytes());
    }
    write(&dir.join(LABELS_FILE), &lbytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Graph {
        let features = Tensor::matrix(3, 2, vec![0.5, -1.25, 3.0, 0.0, 1.0, 2.5]);
        Graph::new("sample", features, vec![0, 1, 1], 2, vec![(0, 1), (1, 0), (2, 1)], false).unwrap()
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        save_bundle(&sample(), a.path()).unwrap();
        let g = load_bundle(a.path()).unwrap();
        assert_eq!(g, sample());
        save_bundle(&g, b.path()).unwrap();
        for f in [META_FILE, FEATURES_FILE, EDGES_FILE, LABELS_FILE] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
        }
    }

    #[test]
    fn truncated_features_is_a_size_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        save_bundle(&sample(), dir.path()).unwrap();
        let p = dir.path().join(FEATURES_FILE);
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        match load_bundle(dir.path()) {
            Err(GraphError::SizeMismatch { path, expected: 24, actual: 21 }) => assert!(path.ends_with(FEATURES_FILE)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn out_of_range_edge_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        save_bundle(&sample(), dir.path()).unwrap();
        let p = dir.path().join(EDGES_FILE);
        let mut bytes = fs::read(&p).unwrap();
        bytes[12..16].copy_from_slice(&7u32.to_le_bytes());
        fs::write(&p, bytes).unwrap();
        match load_bundle(dir.path()) {
            Err(GraphError::OutOfRange { offset: 12, value: 7, bound: 3, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn label_out_of_range_and_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        save_bundle(&sample(), dir.path()).unwrap();
        fs::write(dir.path().join(LABELS_FILE), [0u8, 0, 2, 0, 1, 0]).unwrap();
        assert!(matches!(load_bundle(dir.path()), Err(GraphError::OutOfRange { offset: 2, .. })));
        fs::remove_file(dir.path().join(LABELS_FILE)).unwrap();
        assert!(matches!(load_bundle(dir.path()), Err(GraphError::Io { .. })));
    }

    #[test]
    fn unknown_meta_keys_survive_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut extra = serde_json::Map::new();
        extra.insert("feature_set".into(), "binarized".into());
        save_bundle_with(&sample(), dir.path(), extra.clone()).unwrap();
        assert_eq!(read_meta(dir.path()).unwrap().extra, extra);
    }
}
