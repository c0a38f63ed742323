//! Linear graph propagation of the embedding table and layer-sum readout.
//!
//! One propagation layer replaces every node's row with the weighted sum of
//! its neighbors' rows, using the precomputed normalization weights; there is
//! no feature transformation and no nonlinearity. The readout sums layers
//! 1..=L (layer 0 is excluded unless `include_layer0` is set; with L = 0 the
//! readout is layer 0 itself, i.e. plain matrix factorization).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::dataset::NormalizedGraph;
use crate::error::{MixRecError, Result};
use crate::mat::Mat;
use crate::real::Real;

/// Trainable embedding matrix of `(num_users + num_items)` rows by `dim`
/// columns; users occupy rows `[0, M)`, items rows `[M, M+N)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable<T> {
    mat: Mat<T>,
}

impl<T: Real> EmbeddingTable<T> {
    pub fn new(mat: Mat<T>) -> Self {
        Self { mat }
    }

    pub fn zeros(rows: usize, dim: usize) -> Self {
        Self { mat: Mat::zeros(rows, dim) }
    }

    pub fn rows(&self) -> usize {
        self.mat.rows()
    }

    pub fn dim(&self) -> usize {
        self.mat.cols()
    }

    pub fn mat(&self) -> &Mat<T> {
        &self.mat
    }

    pub fn mat_mut(&mut self) -> &mut Mat<T> {
        &mut self.mat
    }

    pub fn to_f64(&self) -> EmbeddingTable<f64> {
        EmbeddingTable { mat: self.mat.to_f64() }
    }

    pub fn from_f64(src: &EmbeddingTable<f64>) -> Self {
        Self { mat: Mat::from_f64(&src.mat) }
    }
}

/// Propagation outputs: `layers[0]` is the input table, `layers[l]` the
/// l-th propagation of it.
#[derive(Debug, Clone)]
pub struct LayerStack<T> {
    layers: Vec<Mat<T>>,
    edge_visits: u64,
}

impl<T: Real> LayerStack<T> {
    /// Number of propagation layers L (stack holds L+1 matrices).
    pub fn num_layers(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn layer(&self, l: usize) -> &Mat<T> {
        &self.layers[l]
    }

    /// Stored CSR entries visited while building the stack
    /// (2 |E| per layer: once per direction of every edge).
    pub fn edge_visits(&self) -> u64 {
        self.edge_visits
    }

    /// Writes each layer to `<dir>/<stem>.l<n>.mxemb` for debugging.
    pub fn dump(&self, dir: &Path, stem: &str) -> Result<()> {
        for (l, mat) in self.layers.iter().enumerate() {
            write_mxemb(&dir.join(format!("{stem}.l{l}.mxemb")), &mat.to_f64())?;
        }
        Ok(())
    }
}

/// Applies the normalized adjacency once: `out[v] = sum_w p_vw * input[w]`.
pub(crate) fn propagate_once<T: Real>(graph: &NormalizedGraph, input: &Mat<T>) -> Mat<T> {
    let mut out = Mat::zeros(input.rows(), input.cols());
    for v in 0..graph.num_nodes() {
        let (nbrs, weights) = graph.neighbors(v);
        let row = out.row_mut(v);
        for (&w, &p) in nbrs.iter().zip(weights) {
            crate::mat::axpy(T::from_f64(p), input.row(w as usize), row);
        }
    }
    out
}

pub(crate) fn propagate_mat<T: Real>(
    graph: &NormalizedGraph,
    input: &Mat<T>,
    num_layers: usize,
) -> Result<LayerStack<T>> {
    if input.rows() != graph.num_nodes() {
        return Err(MixRecError::Config(format!(
            "embedding table has {} rows but the graph has {} nodes",
            input.rows(),
            graph.num_nodes()
        )));
    }
    let mut layers = Vec::with_capacity(num_layers + 1);
    layers.push(input.clone());
    for l in 1..=num_layers {
        let next = propagate_once(graph, &layers[l - 1]);
        layers.push(next);
    }
    Ok(LayerStack {
        layers,
        edge_visits: graph.num_entries() as u64 * num_layers as u64,
    })
}

/// Runs `num_layers` propagation steps over the graph.
pub fn propagate<T: Real>(
    graph: &NormalizedGraph,
    table: &EmbeddingTable<T>,
    num_layers: usize,
) -> Result<LayerStack<T>> {
    propagate_mat(graph, table.mat(), num_layers)
}

/// Sums layers `1..=L`; with `include_layer0` also adds layer 0. A stack
/// with L = 0 returns layer 0 unchanged.
pub fn readout<T: Real>(stack: &LayerStack<T>, include_layer0: bool) -> Mat<T> {
    if stack.num_layers() == 0 {
        return stack.layers[0].clone();
    }
    let start = if include_layer0 { 0 } else { 1 };
    let mut out = stack.layers[start].clone();
    for layer in &stack.layers[start + 1..] {
        out.add_assign(layer);
    }
    out
}

const MXEMB_MAGIC: &[u8; 5] = b"MXEMB";

/// Writes a matrix in the MXEMB format: magic "MXEMB", u64 rows, u64 cols,
/// then the row-major f64 payload, all little-endian.
pub fn write_mxemb(path: &Path, mat: &Mat<f64>) -> Result<()> {
    let file = File::create(path).map_err(|source| MixRecError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut w = BufWriter::new(file);
    let io_err = |source| MixRecError::Io {
        path: path.to_path_buf(),
        source,
    };
    w.write_all(MXEMB_MAGIC).map_err(io_err)?;
    w.write_all(&(mat.rows() as u64).to_le_bytes()).map_err(io_err)?;
    w.write_all(&(mat.cols() as u64).to_le_bytes()).map_err(io_err)?;
    for &v in mat.data() {
        w.write_all(&v.to_le_bytes()).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Reads a matrix written by [`write_mxemb`].
pub fn read_mxemb(path: &Path) -> Result<Mat<f64>> {
    let file = File::open(path).map_err(|source| MixRecError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 5];
    if r.read_exact(&mut magic).is_err() || &magic != MXEMB_MAGIC {
        return Err(MixRecError::BadCheckpoint);
    }
    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u64buf).map_err(|_| MixRecError::BadCheckpoint)?;
    let rows = u64::from_le_bytes(u64buf) as usize;
    r.read_exact(&mut u64buf).map_err(|_| MixRecError::BadCheckpoint)?;
    let cols = u64::from_le_bytes(u64buf) as usize;
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        r.read_exact(&mut u64buf).map_err(|_| MixRecError::BadCheckpoint)?;
        data.push(f64::from_le_bytes(u64buf));
    }
    // trailing bytes mean a corrupt or mislabeled file
    if r.read(&mut [0u8; 1]).map_err(|_| MixRecError::BadCheckpoint)? != 0 {
        return Err(MixRecError::BadCheckpoint);
    }
    Ok(Mat::from_vec(rows, cols, data))
}
