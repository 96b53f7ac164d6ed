//! Kernel building blocks: GEMM, ElementWise, Reduce, SpMM, SDDMM and
//! ReLU, each runnable under three software schedules standing in for
//! the accelerator backends: a scalar loop ("CPU"), a lane-blocked
//! traversal ("Vector processor") and a tile-blocked accumulation
//! ("Systolic array"). The schedules verify dispatch and numerics, not
//! hardware timing. Accumulation order is fixed per schedule, so each
//! backend is deterministic; backends agree within relative 1e-5.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::batchprep::LayerGraph;
use crate::tensor::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum KernelError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("unknown spmm mode {0:?}")]
    UnknownMode(String),
    #[error("reduce axis {axis} out of range for rank {rank}")]
    BadAxis { axis: usize, rank: usize },
    #[error("layer references source id {id} but only {have} rows are available")]
    MissingSource { id: usize, have: usize },
    #[error("degree missing for id {0}")]
    MissingDegree(usize),
}

pub type Result<T> = std::result::Result<T, KernelError>;

/// A simulated execution backend: a name for the device table, the
/// Table-3 style priority, and schedule parameters (`lanes`, `tile`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeviceProfile {
    pub name: String,
    pub priority: i64,
    pub params: BTreeMap<String, u64>,
}

impl DeviceProfile {
    pub fn new(name: &str, priority: i64) -> Self {
        Self {
            name: name.to_string(),
            priority,
            params: BTreeMap::new(),
        }
    }

    pub fn with_param(mut self, key: &str, value: u64) -> Self {
        self.params.insert(key.to_string(), value);
        self
    }

    pub fn schedule(&self) -> Schedule {
        if let Some(&t) = self.params.get("tile") {
            Schedule::Tiles(t.max(1) as usize)
        } else if let Some(&l) = self.params.get("lanes") {
            Schedule::Lanes(l.max(1) as usize)
        } else {
            Schedule::Scalar
        }
    }
}

/// How a kernel walks its iteration space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    Scalar,
    /// Lane-blocked over the innermost (column/feature) dimension.
    Lanes(usize),
    /// Tile-blocked accumulation emulating a systolic pass: partial sums
    /// per k-tile, combined in ascending tile order.
    Tiles(usize),
}

// ----------------------------------------------------------------------
// GEMM
// ----------------------------------------------------------------------

pub fn gemm(a: &Tensor, b: &Tensor, schedule: Schedule) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(KernelError::ShapeMismatch(format!(
            "gemm needs two matrices, got ranks {} and {}",
            a.rank(),
            b.rank()
        )));
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(KernelError::ShapeMismatch(format!(
            "gemm inner extents differ: {k} vs {k2}"
        )));
    }
    let mut c = vec![0f32; m * n];
    match schedule {
        Schedule::Scalar => {
            for i in 0..m {
                for j in 0..n {
                    let mut acc = 0f32;
                    for kk in 0..k {
                        acc += a.at(i, kk) * b.at(kk, j);
                    }
                    c[i * n + j] = acc;
                }
            }
        }
        Schedule::Lanes(lanes) => {
            // Column blocks of `lanes`; per element the k loop still
            // ascends, the blocking changes traversal only.
            for i in 0..m {
                for j0 in (0..n).step_by(lanes) {
                    let j1 = (j0 + lanes).min(n);
                    for kk in 0..k {
                        let aik = a.at(i, kk);
                        for j in j0..j1 {
                            c[i * n + j] += aik * b.at(kk, j);
                        }
                    }
                }
            }
        }
        Schedule::Tiles(t) => {
            // k-tiled partial sums, added tile by tile.
            for i0 in (0..m).step_by(t) {
                for j0 in (0..n).step_by(t) {
                    for k0 in (0..k).step_by(t) {
                        let i1 = (i0 + t).min(m);
                        let j1 = (j0 + t).min(n);
                        let k1 = (k0 + t).min(k);
                        for i in i0..i1 {
                            for j in j0..j1 {
                                let mut part = 0f32;
                                for kk in k0..k1 {
                                    part += a.at(i, kk) * b.at(kk, j);
                                }
                                c[i * n + j] += part;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::matrix(m, n, c).expect("gemm output shape"))
}

// ----------------------------------------------------------------------
// ElementWise / ReLU
// ----------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Mul,
    Relu,
}

pub fn elementwise(op: ElementwiseOp, a: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    match op {
        ElementwiseOp::Relu => {
            if b.is_some() {
                return Err(KernelError::ShapeMismatch(
                    "relu takes a single input".into(),
                ));
            }
            let data = a.data().iter().map(|&x| x.max(0.0)).collect();
            Ok(Tensor::new(a.shape().to_vec(), data).expect("relu shape"))
        }
        ElementwiseOp::Add | ElementwiseOp::Mul => {
            let b = b.ok_or_else(|| {
                KernelError::ShapeMismatch("binary elementwise needs two inputs".into())
            })?;
            if a.shape() != b.shape() {
                return Err(KernelError::ShapeMismatch(format!(
                    "elementwise shapes differ: {:?} vs {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
            let data = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| match op {
                    ElementwiseOp::Add => x + y,
                    ElementwiseOp::Mul => x * y,
                    ElementwiseOp::Relu => unreachable!(),
                })
                .collect();
            Ok(Tensor::new(a.shape().to_vec(), data).expect("elementwise shape"))
        }
    }
}

pub fn relu(a: &Tensor) -> Tensor {
    elementwise(ElementwiseOp::Relu, a, None).expect("relu is total")
}

// ----------------------------------------------------------------------
// Reduce
// ----------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
}

pub fn reduce(op: ReduceOp, a: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= a.rank().max(1) {
        return Err(KernelError::BadAxis {
            axis,
            rank: a.rank(),
        });
    }
    let (rows, cols) = (a.rows(), a.cols());
    let (keep, fold) = if axis == 0 { (cols, rows) } else { (rows, cols) };
    let mut out = Vec::with_capacity(keep);
    for idx in 0..keep {
        let mut acc: Option<f32> = None;
        for f in 0..fold {
            let v = if axis == 0 { a.at(f, idx) } else { a.at(idx, f) };
            acc = Some(match (op, acc) {
                (_, None) => v,
                (ReduceOp::Sum | ReduceOp::Mean, Some(s)) => s + v,
                (ReduceOp::Max, Some(s)) => s.max(v),
            });
        }
        let mut v = acc.unwrap_or(0.0);
        if op == ReduceOp::Mean && fold > 0 {
            v /= fold as f32;
        }
        out.push(v);
    }
    Ok(Tensor::vector(out))
}

// ----------------------------------------------------------------------
// SpMM
// ----------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpmmMode {
    /// Average-based aggregation with symmetric degree normalization.
    GcnMean,
    /// Summation-based aggregation with a learnable self weight.
    GinSum,
    /// Similarity-aware aggregation with element-wise products.
    Ngcf,
}

impl SpmmMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gcn_mean" => Ok(Self::GcnMean),
            "gin_sum" => Ok(Self::GinSum),
            "ngcf" => Ok(Self::Ngcf),
            other => Err(KernelError::UnknownMode(other.to_string())),
        }
    }
}

/// Aggregates neighbor embeddings per destination:
///
/// gcn_mean: h_i = x_i/d_i + sum_{j != i} x_j / sqrt(d_j d_i)
/// gin_sum:  h_i = (1+eps) x_i + sum_{j != i} x_j
/// ngcf:     h_i = (x_i + x_i*x_i)/d_i + sum_{j != i} (x_j + x_j*x_i) / sqrt(d_j d_i)
///
/// Degrees are full-graph degrees with the self-loop counted; edges are
/// walked in CSR order, feature traversal follows the schedule.
pub fn spmm(
    mode: SpmmMode,
    layer: &LayerGraph,
    x: &Tensor,
    self_eps: f32,
    schedule: Schedule,
) -> Result<Tensor> {
    let n_dst = layer.n_dst();
    let f = x.cols();
    for &j in &layer.col_idx {
        if j as usize >= x.rows() {
            return Err(KernelError::MissingSource {
                id: j as usize,
                have: x.rows(),
            });
        }
        if j as usize >= layer.deg.len() {
            return Err(KernelError::MissingDegree(j as usize));
        }
    }
    if n_dst > layer.deg.len() {
        return Err(KernelError::MissingDegree(layer.deg.len()));
    }
    if n_dst > x.rows() {
        return Err(KernelError::ShapeMismatch(format!(
            "{} destinations but only {} embedding rows",
            n_dst,
            x.rows()
        )));
    }

    let block = match schedule {
        Schedule::Scalar => f.max(1),
        Schedule::Lanes(l) => l,
        Schedule::Tiles(t) => t,
    }
    .max(1);

    let mut out = vec![0f32; n_dst * f];
    for i in 0..n_dst {
        let d_i = layer.deg[i] as f32;
        let xi = x.row(i);
        for f0 in (0..f).step_by(block) {
            let f1 = (f0 + block).min(f);
            for e in layer.row_ptr[i]..layer.row_ptr[i + 1] {
                let j = layer.col_idx[e] as usize;
                let xj = x.row(j);
                let acc = &mut out[i * f + f0..i * f + f1];
                if j == i {
                    match mode {
                        SpmmMode::GcnMean => {
                            for (o, &v) in acc.iter_mut().zip(&xi[f0..f1]) {
                                *o += v / d_i;
                            }
                        }
                        SpmmMode::GinSum => {
                            for (o, &v) in acc.iter_mut().zip(&xi[f0..f1]) {
                                *o += (1.0 + self_eps) * v;
                            }
                        }
                        SpmmMode::Ngcf => {
                            for (o, &v) in acc.iter_mut().zip(&xi[f0..f1]) {
                                *o += (v + v * v) / d_i;
                            }
                        }
                    }
                } else {
                    let d_j = layer.deg[j] as f32;
                    let norm = 1.0 / (d_j * d_i).sqrt();
                    match mode {
                        SpmmMode::GcnMean => {
                            for (o, &v) in acc.iter_mut().zip(&xj[f0..f1]) {
                                *o += v * norm;
                            }
                        }
                        SpmmMode::GinSum => {
                            for (o, &v) in acc.iter_mut().zip(&xj[f0..f1]) {
                                *o += v;
                            }
                        }
                        SpmmMode::Ngcf => {
                            for ((o, &vj), &vi) in
                                acc.iter_mut().zip(&xj[f0..f1]).zip(&xi[f0..f1])
                            {
                                *o += (vj + vj * vi) * norm;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::matrix(n_dst, f, out).expect("spmm output shape"))
}

// ----------------------------------------------------------------------
// SDDMM
// ----------------------------------------------------------------------

/// Sampled dense-dense product: for each edge (j -> i), the dot product
/// of a's row i with b's row j, aligned to the layer's col_idx order.
pub fn sddmm(layer: &LayerGraph, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.cols() != b.cols() {
        return Err(KernelError::ShapeMismatch(format!(
            "sddmm feature widths differ: {} vs {}",
            a.cols(),
            b.cols()
        )));
    }
    let mut out = Vec::with_capacity(layer.col_idx.len());
    for (j, i) in layer.edges() {
        if i >= a.rows() {
            return Err(KernelError::MissingSource {
                id: i,
                have: a.rows(),
            });
        }
        if j as usize >= b.rows() {
            return Err(KernelError::MissingSource {
                id: j as usize,
                have: b.rows(),
            });
        }
        let mut acc = 0f32;
        for (va, vb) in a.row(i).iter().zip(b.row(j as usize)) {
            acc += va * vb;
        }
        out.push(acc);
    }
    Ok(Tensor::vector(out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, data: &[f32]) -> Tensor {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn gemm_identity() {
        let a = t(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let i = t(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(gemm(&a, &i, Schedule::Scalar).unwrap(), a);
    }

    #[test]
    fn gemm_known_product() {
        let a = t(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = t(2, 2, &[5.0, 6.0, 7.0, 8.0]);
        let c = gemm(&a, &b, Schedule::Scalar).unwrap();
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn gemm_shape_mismatch() {
        let a = t(2, 3, &[0.0; 6]);
        let b = t(2, 2, &[0.0; 4]);
        assert!(matches!(
            gemm(&a, &b, Schedule::Scalar),
            Err(KernelError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn gemm_backends_agree() {
        let mut seed = 0x9e3779b97f4a7c15u64;
        let mut next = || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((seed >> 33) as f32 / (1u64 << 31) as f32) - 1.0
        };
        let a = t(17, 13, &(0..17 * 13).map(|_| next()).collect::<Vec<_>>());
        let b = t(13, 9, &(0..13 * 9).map(|_| next()).collect::<Vec<_>>());
        let scalar = gemm(&a, &b, Schedule::Scalar).unwrap();
        let lanes = gemm(&a, &b, Schedule::Lanes(4)).unwrap();
        let tiles = gemm(&a, &b, Schedule::Tiles(8)).unwrap();
        assert!(scalar.max_rel_diff(&lanes) <= 1e-5);
        assert!(scalar.max_rel_diff(&tiles) <= 1e-5);
    }

    #[test]
    fn relu_and_mul() {
        let a = Tensor::vector(vec![-1.0, 0.0, 2.0]);
        assert_eq!(relu(&a).data(), &[0.0, 0.0, 2.0]);
        let ones = Tensor::vector(vec![1.0, 1.0, 1.0]);
        assert_eq!(
            elementwise(ElementwiseOp::Mul, &a, Some(&ones)).unwrap(),
            a
        );
        assert!(elementwise(ElementwiseOp::Add, &a, None).is_err());
    }

    #[test]
    fn reduce_axes() {
        let a = t(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(reduce(ReduceOp::Sum, &a, 0).unwrap().data(), &[4.0, 6.0]);
        assert_eq!(reduce(ReduceOp::Sum, &a, 1).unwrap().data(), &[3.0, 7.0]);
        assert_eq!(reduce(ReduceOp::Max, &a, 0).unwrap().data(), &[3.0, 4.0]);
        let row = t(1, 3, &[5.0, 6.0, 7.0]);
        assert_eq!(
            reduce(ReduceOp::Mean, &row, 0).unwrap().data(),
            &[5.0, 6.0, 7.0]
        );
        assert!(matches!(
            reduce(ReduceOp::Sum, &a, 2),
            Err(KernelError::BadAxis { .. })
        ));
    }

    #[test]
    fn spmm_two_mutual_vertices() {
        // Two vertices linked to each other, both with self-loops: d = 2.
        let layer = LayerGraph {
            row_ptr: vec![0, 2, 4],
            col_idx: vec![0, 1, 1, 0],
            deg: vec![2, 2],
        };
        let x = t(2, 1, &[1.0, 3.0]);
        let h = spmm(SpmmMode::GcnMean, &layer, &x, 0.0, Schedule::Scalar).unwrap();
        // h_0 = 1/2 + 3/sqrt(4) = 2.0
        assert!((h.at(0, 0) - 2.0).abs() < 1e-6);
    }

    #[test]
    fn spmm_gin_self_only() {
        let layer = LayerGraph {
            row_ptr: vec![0, 1],
            col_idx: vec![0],
            deg: vec![1],
        };
        let x = t(1, 3, &[1.0, -2.0, 3.0]);
        let h = spmm(SpmmMode::GinSum, &layer, &x, 0.0, Schedule::Scalar).unwrap();
        assert_eq!(h.data(), x.data());
    }

    #[test]
    fn spmm_unknown_mode_name() {
        assert!(matches!(
            SpmmMode::parse("mystery"),
            Err(KernelError::UnknownMode(_))
        ));
    }

    #[test]
    fn sddmm_self_loop_and_empty() {
        let layer = LayerGraph {
            row_ptr: vec![0, 1],
            col_idx: vec![0],
            deg: vec![1],
        };
        let a = t(1, 2, &[1.0, 1.0]);
        let out = sddmm(&layer, &a, &a).unwrap();
        assert_eq!(out.data(), &[2.0]);

        let empty = LayerGraph {
            row_ptr: vec![0],
            col_idx: vec![],
            deg: vec![],
        };
        assert_eq!(sddmm(&empty, &a, &a).unwrap().data().len(), 0);
    }
}
