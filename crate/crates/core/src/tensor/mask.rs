use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Attention mask: row = query position, column = key position.
/// `true` lets attention flow, `false` blocks it.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BinaryMask {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        BinaryMask { rows, cols, bits: vec![false; rows * cols] }
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        BinaryMask { rows, cols, bits: vec![true; rows * cols] }
    }

    /// Lower-triangular mask with the diagonal shifted right by `offset`,
    /// i.e. entry (r, c) is set when `c <= r + offset`.
    pub fn causal(rows: usize, cols: usize, offset: usize) -> Self {
        let mut m = Self::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols.min(r + offset + 1) {
                m.set(r, c, true);
            }
        }
        m
    }

    pub fn from_rows(rows: &[Vec<u8>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("ragged mask rows"));
        }
        Ok(BinaryMask {
            rows: rows.len(),
            cols,
            bits: rows.iter().flatten().map(|&b| b != 0).collect(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.bits[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, allowed: bool) {
        self.bits[r * self.cols + c] = allowed;
    }

    pub fn row(&self, r: usize) -> &[bool] {
        &self.bits[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_sum(&self, r: usize) -> usize {
        self.row(r).iter().filter(|&&b| b).count()
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Copy of rows `rows` restricted to columns `cols`.
    pub fn slice(&self, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> Self {
        let mut out = Self::zeros(rows.len(), cols.len());
        for (ro, r) in rows.enumerate() {
            for (co, c) in cols.clone().enumerate() {
                out.set(ro, co, self.get(r, c));
            }
        }
        out
    }

    /// Writes `block` with its top-left corner at (`row0`, `col0`).
    pub fn paste(&mut self, row0: usize, col0: usize, block: &BinaryMask) {
        for r in 0..block.rows {
            for c in 0..block.cols {
                self.set(row0 + r, col0 + c, block.get(r, c));
            }
        }
    }

    pub fn to_u8_rows(&self) -> Vec<Vec<u8>> {
        (0..self.rows).map(|r| self.row(r).iter().map(|&b| b as u8).collect()).collect()
    }
}
