use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::features::{table_offsets, ROWS, TABLES};
use crate::error::{Error, Result};
use crate::grammar::VOCAB_SIZE;

/// Dense weights of every feature table, row-major with one column per
/// token. Gradients use the same type.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    w: Vec<f64>,
}

impl Default for PolicyParams {
    fn default() -> Self {
        Self::zeros()
    }
}

impl PolicyParams {
    pub const LEN: usize = ROWS * VOCAB_SIZE;

    pub fn zeros() -> Self {
        PolicyParams {
            w: vec![0.0; Self::LEN],
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.w
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.w
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.w[r * VOCAB_SIZE..(r + 1) * VOCAB_SIZE]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.w[r * VOCAB_SIZE..(r + 1) * VOCAB_SIZE]
    }

    /// `self += a * other`
    pub fn add_scaled(&mut self, a: f64, other: &PolicyParams) {
        for (x, y) in self.w.iter_mut().zip(&other.w) {
            *x += a * y;
        }
    }

    pub fn scale(&mut self, a: f64) {
        self.w.iter_mut().for_each(|x| *x *= a);
    }

    pub fn dot(&self, other: &PolicyParams) -> f64 {
        self.w.iter().zip(&other.w).map(|(x, y)| x * y).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.w.iter().all(|x| x.is_finite())
    }

    /// Named tables as nested `rows x vocab` arrays.
    pub fn tables(&self) -> BTreeMap<String, Vec<Vec<f64>>> {
        let offs = table_offsets();
        TABLES
            .iter()
            .zip(offs)
            .map(|(t, off)| {
                let rows = (off..off + t.rows).map(|r| self.row(r).to_vec()).collect();
                (t.name.to_string(), rows)
            })
            .collect()
    }

    pub fn from_tables(tables: &BTreeMap<String, Vec<Vec<f64>>>) -> Result<Self> {
        if tables.len() != TABLES.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tables, found {}",
                TABLES.len(),
                tables.len()
            )));
        }
        let mut p = PolicyParams::zeros();
        for (t, off) in TABLES.iter().zip(table_offsets()) {
            let rows = tables
                .get(t.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing table {:?}", t.name)))?;
            if rows.len() != t.rows || rows.iter().any(|r| r.len() != VOCAB_SIZE) {
                return Err(Error::Checkpoint(format!("table {:?} has the wrong shape", t.name)));
            }
            for (i, row) in rows.iter().enumerate() {
                p.row_mut(off + i).copy_from_slice(row);
            }
        }
        if !p.is_finite() {
            return Err(Error::Checkpoint("non-finite weight".into()));
        }
        Ok(p)
    }
}
