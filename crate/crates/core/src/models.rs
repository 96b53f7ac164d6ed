//! Prebuilt model graphs (GCN, GIN, NGCF) and an independent dense
//! reference evaluator used as the numerical oracle. The reference
//! shares no code with the kernel backends: it expands each layer to a
//! dense matrix and evaluates the aggregation and transformation with
//! explicit per-node loops in f64.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::batchprep::{layer_to_dense, SampledBatch};
use crate::dfg::{DataflowGraph, DfgBuilder, DfgError};
use crate::runner::value::Value;
use crate::tensor::{Tensor, TensorError};

pub const WEIGHTS_MAGIC: &[u8; 8] = b"HGNNWTS\0";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model needs at least one layer")]
    NoLayers,
    #[error("hidden widths must list one extent per layer (got {got}, layers {layers})")]
    HiddenMismatch { got: usize, layers: usize },
    #[error("weight {index} has shape {got:?}, expected {expected:?}")]
    WeightShape {
        index: usize,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("expected {expected} weight matrices, got {got}")]
    WeightCount { expected: usize, got: usize },
    #[error("eps must be finite")]
    BadEps,
    #[error("batch was sampled for {got} hops but the model has {expected} layers")]
    LayerMismatch { expected: usize, got: usize },
    #[error("weight file malformed: {0}")]
    BadWeightFile(String),
    #[error(transparent)]
    Dfg(#[from] DfgError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Gcn,
    Gin,
    Ngcf,
}

impl ModelKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gcn" => Some(Self::Gcn),
            "gin" => Some(Self::Gin),
            "ngcf" => Some(Self::Ngcf),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Gcn => "gcn",
            Self::Gin => "gin",
            Self::Ngcf => "ngcf",
        }
    }

    fn spmm_op(&self) -> &'static str {
        match self {
            Self::Gcn => "SpMM_Mean",
            Self::Gin => "SpMM_Sum",
            Self::Ngcf => "SpMM_Ngcf",
        }
    }

    /// GIN transforms with a two-layer MLP, so it carries two weight
    /// matrices per model layer.
    pub fn weights_per_layer(&self) -> usize {
        match self {
            Self::Gin => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub layers: usize,
    pub feature_len: usize,
    pub hidden: Vec<usize>,
    pub eps: f32,
    pub weights: Vec<Tensor>,
}

impl ModelConfig {
    pub fn new(kind: ModelKind, layers: usize, feature_len: usize, hidden: Vec<usize>) -> Self {
        Self {
            kind,
            layers,
            feature_len,
            hidden,
            eps: 0.0,
            weights: Vec::new(),
        }
    }

    /// Expected weight shapes, in the order GEMM nodes consume them.
    /// For GIN, layer l uses W_a: in x hidden_l then W_b: hidden_l x
    /// hidden_l.
    pub fn weight_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = Vec::new();
        let mut width = self.feature_len;
        for l in 0..self.layers {
            let out = self.hidden[l];
            shapes.push(vec![width, out]);
            if self.kind == ModelKind::Gin {
                shapes.push(vec![out, out]);
            }
            width = out;
        }
        shapes
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(ModelError::NoLayers);
        }
        if self.hidden.len() != self.layers {
            return Err(ModelError::HiddenMismatch {
                got: self.hidden.len(),
                layers: self.layers,
            });
        }
        if !self.eps.is_finite() {
            return Err(ModelError::BadEps);
        }
        let shapes = self.weight_shapes();
        if self.weights.len() != shapes.len() {
            return Err(ModelError::WeightCount {
                expected: shapes.len(),
                got: self.weights.len(),
            });
        }
        for (i, (w, expected)) in self.weights.iter().zip(&shapes).enumerate() {
            if w.shape() != expected.as_slice() {
                return Err(ModelError::WeightShape {
                    index: i,
                    expected: expected.clone(),
                    got: w.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    /// Fills the weights with seeded uniform values in [-0.5, 0.5).
    pub fn with_random_weights(mut self, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.weights = self
            .weight_shapes()
            .into_iter()
            .map(|shape| {
                let n: usize = shape.iter().product();
                let data = (0..n).map(|_| rng.random_range(-0.5f32..0.5)).collect();
                Tensor::new(shape, data).expect("weight shape")
            })
            .collect();
        self
    }

    /// Weight input names as the DFG declares them: a single matrix is
    /// plain "Weight", otherwise "Weight_1".."Weight_n".
    pub fn weight_input_names(&self) -> Vec<String> {
        let total = self.layers * self.kind.weights_per_layer();
        if total == 1 {
            vec!["Weight".to_string()]
        } else {
            (1..=total).map(|i| format!("Weight_{i}")).collect()
        }
    }

    /// The feed map `execute` needs: batch request plus weights (plus
    /// the GIN self-weight).
    pub fn execute_inputs(&self, batch: Value) -> HashMap<String, Value> {
        let mut inputs = HashMap::new();
        inputs.insert("Batch".to_string(), batch);
        for (name, w) in self.weight_input_names().iter().zip(&self.weights) {
            inputs.insert(name.clone(), Value::Tensor(w.clone()));
        }
        if self.kind == ModelKind::Gin {
            inputs.insert("Eps".to_string(), Value::Scalar(self.eps as f64));
        }
        inputs
    }
}

/// Builds the model's dataflow graph: a BatchPre node followed by k
/// chained aggregation/transformation stages. The trailing ReLU of the
/// final stage is omitted.
pub fn build_dfg(cfg: &ModelConfig) -> Result<DataflowGraph> {
    cfg.validate()?;
    let mut b = DfgBuilder::new();
    b.create_in("Batch")?;
    let weight_names = cfg.weight_input_names();
    for name in &weight_names {
        b.create_in(name)?;
    }
    if cfg.kind == ModelKind::Gin {
        b.create_in("Eps")?;
    }

    let batchpre = b.create_op("BatchPre", &["Batch"], 1)?;
    let mut batch_label = batchpre[0].clone();
    let mut x_label: Option<String> = None;
    let mut weight_iter = weight_names.iter();

    for layer in 0..cfg.layers {
        let final_layer = layer + 1 == cfg.layers;
        let mut spmm_in: Vec<&str> = vec![&batch_label];
        if let Some(x) = &x_label {
            spmm_in.push(x);
        }
        if cfg.kind == ModelKind::Gin {
            spmm_in.push("Eps");
        }
        let spmm = b.create_op(cfg.kind.spmm_op(), &spmm_in, 2)?;
        batch_label = spmm[1].clone();
        let mut cur = spmm[0].clone();

        let w = weight_iter.next().expect("weight name per layer");
        cur = b.create_op("GEMM", &[&cur, w], 1)?[0].clone();

        if cfg.kind == ModelKind::Gin {
            cur = b.create_op("ReLU", &[&cur], 1)?[0].clone();
            let w2 = weight_iter.next().expect("second gin weight");
            cur = b.create_op("GEMM", &[&cur, w2], 1)?[0].clone();
        }
        if !final_layer {
            cur = b.create_op("ReLU", &[&cur], 1)?[0].clone();
        }
        x_label = Some(cur);
    }

    b.create_out("Result", x_label.as_deref().expect("at least one layer"))?;
    Ok(b.build()?)
}

/// Evaluates the model densely with per-node loops; the oracle the DFG
/// execution is checked against.
pub fn dense_reference(cfg: &ModelConfig, batch: &SampledBatch) -> Result<Tensor> {
    cfg.validate()?;
    if batch.layers.len() != cfg.layers {
        return Err(ModelError::LayerMismatch {
            expected: cfg.layers,
            got: batch.layers.len(),
        });
    }

    let n_all = batch.n_sampled();
    let f0 = cfg.feature_len;
    let mut x: Vec<Vec<f64>> = (0..n_all)
        .map(|i| batch.embeddings.row(i).iter().map(|&v| v as f64).collect())
        .collect();

    let mut weight_iter = cfg.weights.iter();
    for (layer_idx, layer) in batch.layers.iter().enumerate() {
        let final_layer = layer_idx + 1 == cfg.layers;
        let n_src = layer.deg.len();
        let n_dst = layer.n_dst();
        let a = layer_to_dense(layer, n_src).expect("dense expansion");
        let width = x.first().map(|r| r.len()).unwrap_or(f0);

        let mut aggregated = vec![vec![0f64; width]; n_dst];
        for i in 0..n_dst {
            let d_i = layer.deg[i] as f64;
            for j in 0..n_src {
                if a[i][j] == 0.0 {
                    continue;
                }
                if j == i {
                    for f in 0..width {
                        let xi = x[i][f];
                        aggregated[i][f] += match cfg.kind {
                            ModelKind::Gcn => xi / d_i,
                            ModelKind::Gin => (1.0 + cfg.eps as f64) * xi,
                            ModelKind::Ngcf => (xi + xi * xi) / d_i,
                        };
                    }
                } else {
                    let d_j = layer.deg[j] as f64;
                    let norm = 1.0 / (d_j * d_i).sqrt();
                    for f in 0..width {
                        let xj = x[j][f];
                        aggregated[i][f] += match cfg.kind {
                            ModelKind::Gcn => xj * norm,
                            ModelKind::Gin => xj,
                            ModelKind::Ngcf => (xj + xj * x[i][f]) * norm,
                        };
                    }
                }
            }
        }

        let w = weight_iter.next().expect("weight per layer");
        let mut h = dense_matmul(&aggregated, w);
        if cfg.kind == ModelKind::Gin {
            for row in &mut h {
                for v in row.iter_mut() {
                    *v = v.max(0.0);
                }
            }
            let w2 = weight_iter.next().expect("second gin weight");
            h = dense_matmul(&h, w2);
        }
        if !final_layer {
            for row in &mut h {
                for v in row.iter_mut() {
                    *v = v.max(0.0);
                }
            }
        }
        x = h;
    }

    let rows = x.len();
    let cols = x.first().map(|r| r.len()).unwrap_or(0);
    let data: Vec<f32> = x.into_iter().flatten().map(|v| v as f32).collect();
    Ok(Tensor::matrix(rows, cols, data)?)
}

fn dense_matmul(a: &[Vec<f64>], w: &Tensor) -> Vec<Vec<f64>> {
    let (k, n) = (w.shape()[0], w.shape()[1]);
    a.iter()
        .map(|row| {
            let mut out = vec![0f64; n];
            for (kk, &v) in row.iter().enumerate().take(k) {
                for j in 0..n {
                    out[j] += v * w.at(kk, j) as f64;
                }
            }
            out
        })
        .collect()
}

// ----------------------------------------------------------------------
// Weight file: header {kind, k, eps, dims} then row-major f32 matrices,
// all little-endian.
// ----------------------------------------------------------------------

pub fn weights_to_bytes(cfg: &ModelConfig) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.push(match cfg.kind {
        ModelKind::Gcn => 0,
        ModelKind::Gin => 1,
        ModelKind::Ngcf => 2,
    });
    out.extend_from_slice(&(cfg.layers as u32).to_le_bytes());
    out.extend_from_slice(&cfg.eps.to_le_bytes());
    out.extend_from_slice(&(cfg.weights.len() as u32).to_le_bytes());
    for w in &cfg.weights {
        out.extend_from_slice(&(w.shape()[0] as u32).to_le_bytes());
        out.extend_from_slice(&(w.shape()[1] as u32).to_le_bytes());
    }
    for w in &cfg.weights {
        for v in w.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn weights_from_bytes(bytes: &[u8]) -> Result<(ModelKind, usize, f32, Vec<Tensor>)> {
    let bad = |msg: &str| ModelError::BadWeightFile(msg.to_string());
    if bytes.len() < 21 || &bytes[0..8] != WEIGHTS_MAGIC {
        return Err(bad("missing magic"));
    }
    let kind = match bytes[8] {
        0 => ModelKind::Gcn,
        1 => ModelKind::Gin,
        2 => ModelKind::Ngcf,
        _ => return Err(bad("unknown model kind")),
    };
    let layers = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
    let eps = f32::from_le_bytes(bytes[13..17].try_into().unwrap());
    let count = u32::from_le_bytes(bytes[17..21].try_into().unwrap()) as usize;
    let mut at = 21;
    let mut shapes = Vec::with_capacity(count);
    for _ in 0..count {
        if at + 8 > bytes.len() {
            return Err(bad("truncated shape table"));
        }
        let rows = u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(bytes[at + 4..at + 8].try_into().unwrap()) as usize;
        shapes.push((rows, cols));
        at += 8;
    }
    let mut weights = Vec::with_capacity(count);
    for (rows, cols) in shapes {
        let n = rows * cols;
        if at + 4 * n > bytes.len() {
            return Err(bad("truncated weight data"));
        }
        let data: Vec<f32> = bytes[at..at + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        at += 4 * n;
        weights.push(Tensor::matrix(rows, cols, data)?);
    }
    if at != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok((kind, layers, eps, weights))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gcn_k1_matches_reference_chain() {
        let cfg = ModelConfig::new(ModelKind::Gcn, 1, 4, vec![3]).with_random_weights(7);
        let g = build_dfg(&cfg).unwrap();
        let ops: Vec<&str> = g.nodes.iter().map(|n| n.op.as_str()).collect();
        assert_eq!(ops, vec!["BatchPre", "SpMM_Mean", "GEMM"]);
        assert_eq!(g.inputs, vec!["Batch", "Weight"]);
    }

    #[test]
    fn gin_has_two_gemms_per_layer() {
        let cfg = ModelConfig::new(ModelKind::Gin, 1, 4, vec![3]).with_random_weights(7);
        let g = build_dfg(&cfg).unwrap();
        let gemms = g.nodes.iter().filter(|n| n.op == "GEMM").count();
        assert_eq!(gemms, 2);
        assert!(g.inputs.contains(&"Eps".to_string()));
    }

    #[test]
    fn gcn_k2_structure() {
        let cfg = ModelConfig::new(ModelKind::Gcn, 2, 4, vec![5, 3]).with_random_weights(7);
        let g = build_dfg(&cfg).unwrap();
        // BatchPre + (SpMM, GEMM, ReLU) + (SpMM, GEMM); the final stage
        // omits its ReLU.
        assert_eq!(g.nodes.len(), 6);
        assert_eq!(g.toposort(), (1..=6).collect::<Vec<u32>>());
        assert_eq!(g.inputs, vec!["Batch", "Weight_1", "Weight_2"]);
    }

    #[test]
    fn weight_shapes_chain() {
        let cfg = ModelConfig::new(ModelKind::Gin, 2, 8, vec![6, 4]);
        assert_eq!(
            cfg.weight_shapes(),
            vec![vec![8, 6], vec![6, 6], vec![6, 4], vec![4, 4]]
        );
        let bad = ModelConfig::new(ModelKind::Gcn, 2, 8, vec![6]);
        assert!(matches!(
            bad.validate(),
            Err(ModelError::HiddenMismatch { .. })
        ));
    }

    #[test]
    fn weight_file_round_trip() {
        let cfg = ModelConfig::new(ModelKind::Gin, 2, 8, vec![6, 4]).with_random_weights(3);
        let bytes = weights_to_bytes(&cfg);
        let (kind, layers, eps, weights) = weights_from_bytes(&bytes).unwrap();
        assert_eq!(kind, ModelKind::Gin);
        assert_eq!(layers, 2);
        assert_eq!(eps, 0.0);
        assert_eq!(weights, cfg.weights);
        assert!(weights_from_bytes(&bytes[..10]).is_err());
    }
}
