//! Dense multi-dimensional `f32` tensors (rank ≤ 6, row-major) and
//! reverse-mode automatic differentiation over a recorded graph.
//!
//! [`Tensor`] is the plain data carrier used at module boundaries; the
//! autodiff machinery lives in [`graph`], which records every forward
//! operation into a topologically ordered node list and replays it in
//! reverse for gradients.

pub mod graph;
pub mod kernels;

use std::io::{BufRead, Write};

use thiserror::Error;

pub use graph::{Graph, TensorRef};

/// Maximum supported tensor rank.
pub const MAX_RANK: usize = 6;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch: {context}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        context: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("output extent ({dim} + 2*{pad} - {kernel}) / {stride} + 1 is not a positive integer")]
    NonIntegralOutputExtent {
        dim: usize,
        kernel: usize,
        pad: usize,
        stride: usize,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalarLoss(Vec<usize>),
    #[error("graph already consumed by a previous backward pass")]
    GraphConsumed,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("tensor text format: {0}")]
    BadText(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Number of elements implied by a shape.
pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides for a shape.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Dense rank-≤6 tensor: shape plus contiguous row-major `f32` storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Self {
        assert!(shape.len() <= MAX_RANK, "rank {} > {MAX_RANK}", shape.len());
        assert_eq!(
            numel(shape),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::new(shape, vec![0.0; numel(shape)])
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        Tensor::new(shape, vec![value; numel(shape)])
    }

    pub fn scalar(value: f32) -> Self {
        Tensor::new(&[1], vec![value])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let n = numel(shape);
        Tensor::new(shape, (0..n).map(|i| f(i)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if !on {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f32>) {
        assert_eq!(grad.len(), self.data.len());
        self.grad = Some(grad);
    }

    /// Reinterpret the storage under a new shape with the same element count.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self, TensorError> {
        if numel(shape) != self.data.len() {
            return Err(TensorError::ShapeMismatch {
                context: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Maximum absolute difference against another tensor of the same shape.
    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    /// Golden-test text dump: line 1 is the space-separated shape, then one
    /// value per line in row-major order with 9 significant digits.
    pub fn write_text(&self, w: &mut impl Write) -> Result<(), TensorError> {
        let shape_line = self
            .shape
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join(" ");
        writeln!(w, "{shape_line}")?;
        for v in &self.data {
            writeln!(w, "{v:.8e}")?;
        }
        Ok(())
    }

    /// Parse the text dump format written by [`Tensor::write_text`].
    pub fn read_text(r: &mut impl BufRead) -> Result<Self, TensorError> {
        let mut first = String::new();
        r.read_line(&mut first)?;
        let shape: Vec<usize> = first
            .split_whitespace()
            .map(|t| {
                t.parse()
                    .map_err(|_| TensorError::BadText(format!("bad extent {t:?}")))
            })
            .collect::<Result<_, _>>()?;
        if shape.is_empty() || shape.len() > MAX_RANK {
            return Err(TensorError::BadText(format!("bad shape line {first:?}")));
        }
        let n = numel(&shape);
        let mut data = Vec::with_capacity(n);
        let mut line = String::new();
        for _ in 0..n {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(TensorError::BadText("truncated value list".into()));
            }
            let v: f32 = line
                .trim()
                .parse()
                .map_err(|_| TensorError::BadText(format!("bad value {line:?}")))?;
            data.push(v);
        }
        Ok(Tensor::new(&shape, data))
    }
}

/// Shape produced by broadcasting `a` against `b` (singleton axes expand,
/// shorter shapes are left-padded with 1s).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>, TensorError> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(TensorError::ShapeMismatch {
                    context: "broadcast",
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

/// Strides for reading an input of shape `shape` under a broadcasted output
/// shape: broadcast axes get stride 0.
pub fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let pad = out_shape.len() - shape.len();
    let own = strides(shape);
    let mut out = vec![0usize; out_shape.len()];
    for i in 0..shape.len() {
        out[pad + i] = if shape[i] == 1 { 0 } else { own[i] };
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strides_row_major() {
        assert_eq!(strides(&[2, 3, 4]), vec![12, 4, 1]);
        assert_eq!(strides(&[5]), vec![1]);
    }

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[2, 1], &[1, 3]).unwrap(), vec![2, 3]);
        assert_eq!(broadcast_shape(&[1], &[4, 5]).unwrap(), vec![4, 5]);
        assert!(broadcast_shape(&[2, 3], &[2, 4]).is_err());
    }

    #[test]
    fn text_round_trip() {
        let t = Tensor::new(&[2, 2], vec![1.0, -0.5, 3.25e-7, 1234.5]);
        let mut buf = Vec::new();
        t.write_text(&mut buf).unwrap();
        let back = Tensor::read_text(&mut buf.as_slice()).unwrap();
        assert_eq!(t.shape(), back.shape());
        assert_eq!(t.data(), back.data());
    }

    #[test]
    fn text_rejects_garbage() {
        let mut bad = "2 2\n1.0\n".as_bytes();
        assert!(Tensor::read_text(&mut bad).is_err());
    }
}
