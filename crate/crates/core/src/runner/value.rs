//! Edge payloads of the computational graph.

use crate::batchprep::{BatchRequest, SampledBatch};
use crate::tensor::Tensor;

use super::RunnerError;

/// A value flowing along a DFG edge.
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Tensor(Tensor),
    Batch(SampledBatch),
    Request(BatchRequest),
    Scalar(f64),
}

impl Value {
    pub fn kind(&self) -> &'static str {
        match self {
            Value::Tensor(_) => "tensor",
            Value::Batch(_) => "batch",
            Value::Request(_) => "request",
            Value::Scalar(_) => "scalar",
        }
    }

    pub fn as_tensor(&self) -> Result<&Tensor, RunnerError> {
        match self {
            Value::Tensor(t) => Ok(t),
            other => Err(RunnerError::BadValue(format!(
                "expected tensor, found {}",
                other.kind()
            ))),
        }
    }

    pub fn as_batch(&self) -> Result<&SampledBatch, RunnerError> {
        match self {
            Value::Batch(b) => Ok(b),
            other => Err(RunnerError::BadValue(format!(
                "expected sampled batch, found {}",
                other.kind()
            ))),
        }
    }

    pub fn as_request(&self) -> Result<&BatchRequest, RunnerError> {
        match self {
            Value::Request(r) => Ok(r),
            other => Err(RunnerError::BadValue(format!(
                "expected batch request, found {}",
                other.kind()
            ))),
        }
    }

    pub fn as_scalar(&self) -> Result<f64, RunnerError> {
        match self {
            Value::Scalar(s) => Ok(*s),
            other => Err(RunnerError::BadValue(format!(
                "expected scalar, found {}",
                other.kind()
            ))),
        }
    }
}

impl From<Tensor> for Value {
    fn from(t: Tensor) -> Self {
        Value::Tensor(t)
    }
}

impl From<SampledBatch> for Value {
    fn from(b: SampledBatch) -> Self {
        Value::Batch(b)
    }
}

impl From<BatchRequest> for Value {
    fn from(r: BatchRequest) -> Self {
        Value::Request(r)
    }
}

impl From<f64> for Value {
    fn from(s: f64) -> Self {
        Value::Scalar(s)
    }
}
