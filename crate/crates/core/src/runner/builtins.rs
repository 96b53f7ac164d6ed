//! The built-in C-kernel implementations. Each kernel derives its
//! schedule from the winning device's profile, so one kernel id serves
//! every backend.

use std::sync::Arc;

use crate::batchprep::{self, SampledBatch};
use crate::kernels::{self, ElementwiseOp, ReduceOp, SpmmMode};
use crate::tensor::Tensor;

use super::value::Value;
use super::{ExecCtx, Kernel, RunnerError};

/// Built-in kernel ids, as referenced by backend-profile bundles.
pub const BUILTIN_KERNEL_IDS: &[&str] = &[
    "gemm",
    "elementwise.add",
    "elementwise.mul",
    "relu",
    "reduce.sum",
    "reduce.mean",
    "reduce.max",
    "spmm.gcn_mean",
    "spmm.gin_sum",
    "spmm.ngcf",
    "sddmm",
    "batch_pre",
];

/// C-operation names and the builtin kernel id each one runs by
/// default.
pub const DEFAULT_OP_BINDINGS: &[(&str, &str)] = &[
    ("GEMM", "gemm"),
    ("ElementWise_Add", "elementwise.add"),
    ("ElementWise_Mul", "elementwise.mul"),
    ("ReLU", "relu"),
    ("Reduce_Sum", "reduce.sum"),
    ("Reduce_Mean", "reduce.mean"),
    ("Reduce_Max", "reduce.max"),
    ("SpMM_Mean", "spmm.gcn_mean"),
    ("SpMM_Sum", "spmm.gin_sum"),
    ("SpMM_Ngcf", "spmm.ngcf"),
    ("SDDMM", "sddmm"),
    ("BatchPre", "batch_pre"),
];

pub fn builtin_kernel(id: &str) -> Option<Arc<dyn Kernel>> {
    let kernel: Arc<dyn Kernel> = match id {
        "gemm" => Arc::new(GemmKernel),
        "elementwise.add" => Arc::new(ElementwiseKernel(ElementwiseOp::Add)),
        "elementwise.mul" => Arc::new(ElementwiseKernel(ElementwiseOp::Mul)),
        "relu" => Arc::new(ReluKernel),
        "reduce.sum" => Arc::new(ReduceKernel(ReduceOp::Sum)),
        "reduce.mean" => Arc::new(ReduceKernel(ReduceOp::Mean)),
        "reduce.max" => Arc::new(ReduceKernel(ReduceOp::Max)),
        "spmm.gcn_mean" => Arc::new(SpmmKernel(SpmmMode::GcnMean)),
        "spmm.gin_sum" => Arc::new(SpmmKernel(SpmmMode::GinSum)),
        "spmm.ngcf" => Arc::new(SpmmKernel(SpmmMode::Ngcf)),
        "sddmm" => Arc::new(SddmmKernel),
        "batch_pre" => Arc::new(BatchPreKernel),
        _ => return None,
    };
    Some(kernel)
}

fn arity_error(op: &str, want: &str, got: usize) -> RunnerError {
    RunnerError::BadValue(format!("{op} expects {want} inputs, found {got}"))
}

struct GemmKernel;

impl Kernel for GemmKernel {
    fn call(&self, ctx: &ExecCtx<'_>, inputs: &[Value]) -> Result<Vec<Value>, RunnerError> {
        let [a, b] = inputs else {
            return Err(arity_error("GEMM", "2", inputs.len()));
        };
        let out = kernels::gemm(a.as_tensor()?, b.as_tensor()?, ctx.schedule())?;
        Ok(vec![out.into()])
    }
}

struct ElementwiseKernel(ElementwiseOp);

impl Kernel for ElementwiseKernel {
    fn call(&self, _ctx: &ExecCtx<'_>, inputs: &[Value]) -> Result<Vec<Value>, RunnerError> {
        let [a, b] = inputs else {
            return Err(arity_error("ElementWise", "2", inputs.len()));
        };
        let out = kernels::elementwise(self.0, a.as_tensor()?, Some(b.as_tensor()?))?;
        Ok(vec![out.into()])
    }
}

struct ReluKernel;

impl Kernel for ReluKernel {
    fn call(&self, _ctx: &ExecCtx<'_>, inputs: &[Value]) -> Result<Vec<Value>, RunnerError> {
        let [a] = inputs else {
            return Err(arity_error("ReLU", "1", inputs.len()));
        };
        let out = kernels::elementwise(ElementwiseOp::Relu, a.as_tensor()?, None)?;
        Ok(vec![out.into()])
    }
}

struct ReduceKernel(ReduceOp);

impl Kernel for ReduceKernel {
    fn call(&self, _ctx: &ExecCtx<'_>, inputs: &[Value]) -> Result<Vec<Value>, RunnerError> {
        let (tensor, axis) = match inputs {
            [a] => (a.as_tensor()?, 0),
            [a, axis] => (a.as_tensor()?, axis.as_scalar()? as usize),
            _ => return Err(arity_error("Reduce", "1 or 2", inputs.len())),
        };
        let out = kernels::reduce(self.0, tensor, axis)?;
        Ok(vec![out.into()])
    }
}

/// Aggregation kernel. Accepted input forms:
///
/// - `[batch]`: aggregate the batch's first pending layer over its own
///   gathered embeddings.
/// - `[batch, x]`: aggregate over the tensor produced by the previous
///   stage.
/// - either form plus a trailing scalar: the GIN self-weight.
///
/// Outputs the aggregated tensor plus the batch advanced past the
/// consumed layer, so chained stages can keep pulling layers off it.
struct SpmmKernel(SpmmMode);

impl Kernel for SpmmKernel {
    fn call(&self, ctx: &ExecCtx<'_>, inputs: &[Value]) -> Result<Vec<Value>, RunnerError> {
        let (batch, x, eps): (&SampledBatch, Option<&Tensor>, f32) = match inputs {
            [b] => (b.as_batch()?, None, 0.0),
            [b, Value::Scalar(e)] => (b.as_batch()?, None, *e as f32),
            [b, x] => (b.as_batch()?, Some(x.as_tensor()?), 0.0),
            [b, x, e] => (b.as_batch()?, Some(x.as_tensor()?), e.as_scalar()? as f32),
            _ => return Err(arity_error("SpMM", "1 to 3", inputs.len())),
        };
        let layer = batch
            .layers
            .first()
            .ok_or_else(|| RunnerError::BadValue("batch has no pending layers".into()))?;
        let x = x.unwrap_or(&batch.embeddings);
        let out = kernels::spmm(self.0, layer, x, eps, ctx.schedule())?;
        Ok(vec![out.into(), batch.advance().into()])
    }
}

struct SddmmKernel;

impl Kernel for SddmmKernel {
    fn call(&self, _ctx: &ExecCtx<'_>, inputs: &[Value]) -> Result<Vec<Value>, RunnerError> {
        let [b, a_t, b_t] = inputs else {
            return Err(arity_error("SDDMM", "3", inputs.len()));
        };
        let batch = b.as_batch()?;
        let layer = batch
            .layers
            .first()
            .ok_or_else(|| RunnerError::BadValue("batch has no pending layers".into()))?;
        let out = kernels::sddmm(layer, a_t.as_tensor()?, b_t.as_tensor()?)?;
        Ok(vec![out.into(), batch.advance().into()])
    }
}

/// Batch preprocessing: runs the k-hop sampler against the bound store.
struct BatchPreKernel;

impl Kernel for BatchPreKernel {
    fn call(&self, ctx: &ExecCtx<'_>, inputs: &[Value]) -> Result<Vec<Value>, RunnerError> {
        let [req] = inputs else {
            return Err(arity_error("BatchPre", "1", inputs.len()));
        };
        let store = ctx.store.ok_or(RunnerError::NoStore)?;
        let batch = batchprep::sample_batch(store, req.as_request()?)?;
        Ok(vec![batch.into()])
    }
}
