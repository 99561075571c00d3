use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A batch of single-channel `(rows, cols)` maps stored example-major.
///
/// For spectrogram data `rows` is the time context and `cols` the frequency bins.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpecBatch {
    pub len: usize,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl SpecBatch {
    pub fn zeros(len: usize, rows: usize, cols: usize) -> Self {
        SpecBatch {
            len,
            rows,
            cols,
            data: vec![0.0; len * rows * cols],
        }
    }

    pub fn from_vec(len: usize, rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != len * rows * cols {
            return Err(Error::Structure(format!(
                "batch data has {} values, expected {len}x{rows}x{cols}",
                data.len()
            )));
        }
        Ok(SpecBatch {
            len,
            rows,
            cols,
            data,
        })
    }

    /// Stacks equally shaped examples.
    pub fn stack<'a>(rows: usize, cols: usize, examples: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        let mut data = Vec::new();
        let mut len = 0;
        for ex in examples {
            if ex.len() != rows * cols {
                return Err(Error::Structure(format!(
                    "example {len} has {} values, expected {rows}x{cols}",
                    ex.len()
                )));
            }
            data.extend_from_slice(ex);
            len += 1;
        }
        Ok(SpecBatch {
            len,
            rows,
            cols,
            data,
        })
    }

    pub fn example_len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.len, self.rows, self.cols)
    }

    pub fn example(&self, i: usize) -> &[f64] {
        let n = self.example_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn example_mut(&mut self, i: usize) -> &mut [f64] {
        let n = self.example_len();
        &mut self.data[i * n..(i + 1) * n]
    }

    pub fn examples(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.example_len().max(1)).take(self.len)
    }

    /// Per-example squared L2 norm.
    pub fn energies(&self) -> Vec<f64> {
        self.examples().map(|e| e.iter().map(|v| v * v).sum()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn scale(&mut self, c: f64) {
        self.data.iter_mut().for_each(|v| *v *= c);
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
