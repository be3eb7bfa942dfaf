//! Dense f64 tensors and a define-by-run reverse-mode tape.
//!
//! [`Tensor`] is a plain value: a shape and row-major data. Differentiable
//! computation happens on a [`Tape`], which records every op applied to its
//! [`Var`] handles and replays them backwards in [`Tape::backward`].

mod kernels;
mod tape;

pub use tape::{Tape, Var};

use serde::{Deserialize, Serialize};

use crate::error::TensorError;

/// Row-major dense array of `f64`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that `data` fills `shape` exactly.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    /// Builds a tensor from nested rows; all rows must be equally long.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self, TensorError> {
        let cols = rows.first().map_or(0, |r| r.len());
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(TensorError::Reshape {
                from: self.shape,
                to: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Element at a multi-index. Panics when the index is out of range.
    pub fn at(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let mut flat = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < dim, "index {ix} out of range on axis {i} (len {dim})");
            flat = flat * dim + ix;
        }
        self.data[flat]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Result shape of broadcasting `a` against `b` with trailing-axis alignment.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() {
            1
        } else {
            a[i - (rank - a.len())]
        };
        let db = if i < rank - b.len() {
            1
        } else {
            b[i - (rank - b.len())]
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// How an input of shape `input` maps onto a broadcast output of shape `output`.
#[derive(Clone, Debug)]
pub(crate) enum BroadcastMap {
    /// Shapes are equal.
    Same,
    /// Input is a trailing block repeated over leading axes: `in_idx = out_idx % len`.
    Suffix(usize),
    /// Arbitrary broadcast; explicit input index for each output element.
    Gather(Vec<usize>),
}

impl BroadcastMap {
    pub(crate) fn new(input: &[usize], output: &[usize]) -> Self {
        if input == output {
            return BroadcastMap::Same;
        }
        let lead = output.len() - input.len();
        if input.iter().zip(&output[lead..]).all(|(a, b)| a == b) {
            return BroadcastMap::Suffix(input.iter().product());
        }
        let out_numel: usize = output.iter().product();
        let in_strides = strides(input);
        // Stride zero for broadcast axes, aligned to the output rank.
        let mut eff = vec![0usize; output.len()];
        for (i, &dim) in input.iter().enumerate() {
            if dim != 1 {
                eff[lead + i] = in_strides[i];
            }
        }
        let mut map = Vec::with_capacity(out_numel);
        let mut idx = vec![0usize; output.len()];
        let mut offset = 0usize;
        for _ in 0..out_numel {
            map.push(offset);
            for ax in (0..output.len()).rev() {
                idx[ax] += 1;
                offset += eff[ax];
                if idx[ax] < output[ax] {
                    break;
                }
                offset -= eff[ax] * idx[ax];
                idx[ax] = 0;
            }
        }
        BroadcastMap::Gather(map)
    }

    #[inline]
    pub(crate) fn index(&self, out_idx: usize) -> usize {
        match self {
            BroadcastMap::Same => out_idx,
            BroadcastMap::Suffix(len) => out_idx % len,
            BroadcastMap::Gather(map) => map[out_idx],
        }
    }
}
