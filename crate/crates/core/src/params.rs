//! Layered parameter and gradient containers.
//!
//! Model parameters are kept as an ordered list of dense per-layer blocks.
//! Layer `d` always has the same length for the lifetime of a value and no
//! arithmetic operation changes the layer count or any layer length. A flat
//! view is available for code that needs a single vector (eigensolvers,
//! random directions).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Where a norm is taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormScope {
    /// All entries of all layers.
    Global,
    /// Entries of a single layer.
    Layer(usize),
}

/// Parameters (or gradients) stored as an ordered list of layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayeredParams {
    layers: Vec<Vec<f64>>,
}

impl LayeredParams {
    /// Build from explicit layer blocks.
    ///
    /// Rejects an empty structure (total dimension zero), empty layers and
    /// non-finite entries.
    pub fn new(layers: Vec<Vec<f64>>) -> Result<Self> {
        if layers.is_empty() || layers.iter().any(|l| l.is_empty()) {
            return Err(Error::Structure(
                "parameters need at least one layer and no empty layers".into(),
            ));
        }
        if layers.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::numeric(None, "parameter entry is not finite"));
        }
        Ok(Self { layers })
    }

    /// All-zero value with the given layer lengths.
    pub fn zeros(layer_lens: &[usize]) -> Self {
        assert!(
            !layer_lens.is_empty() && layer_lens.iter().all(|&n| n > 0),
            "layer lengths must be non-empty and positive"
        );
        Self {
            layers: layer_lens.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(|l| vec![0.0; l.len()]).collect(),
        }
    }

    /// Rebuild a layered value from a flat vector using `layer_lens`.
    pub fn from_flat(layer_lens: &[usize], flat: &[f64]) -> Result<Self> {
        let total: usize = layer_lens.iter().sum();
        if total != flat.len() {
            return Err(Error::Structure(format!(
                "flat vector has {} entries, structure needs {total}",
                flat.len()
            )));
        }
        let mut layers = Vec::with_capacity(layer_lens.len());
        let mut offset = 0;
        for &n in layer_lens {
            layers.push(flat[offset..offset + n].to_vec());
            offset += n;
        }
        Self::new(layers)
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer_lens(&self) -> Vec<usize> {
        self.layers.iter().map(Vec::len).collect()
    }

    /// Total number of entries `m`.
    pub fn dim(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    pub fn layers(&self) -> &[Vec<f64>] {
        &self.layers
    }

    pub fn layer(&self, d: usize) -> Result<&[f64]> {
        self.layers
            .get(d)
            .map(Vec::as_slice)
            .ok_or_else(|| self.bad_layer(d))
    }

    /// Mutable access to one block. The block length cannot change.
    pub fn layer_mut(&mut self, d: usize) -> Result<&mut [f64]> {
        let n = self.layers.len();
        self.layers
            .get_mut(d)
            .map(Vec::as_mut_slice)
            .ok_or_else(|| Error::Structure(format!("layer {d} out of range ({n} layers)")))
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flatten()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.iter().copied().collect()
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }

    pub fn same_structure(&self, other: &Self) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.len() == b.len())
    }

    pub fn check_structure(&self, other: &Self) -> Result<()> {
        if self.same_structure(other) {
            Ok(())
        } else {
            Err(Error::Structure(format!(
                "layer lengths {:?} vs {:?}",
                self.layer_lens(),
                other.layer_lens()
            )))
        }
    }

    /// Euclidean norm over all entries or over one layer.
    pub fn norm(&self, scope: NormScope) -> Result<f64> {
        match scope {
            NormScope::Global => Ok(self.global_norm()),
            NormScope::Layer(d) => Ok(l2(self.layer(d)?)),
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Per-layer Euclidean norms, in layer order.
    pub fn layer_norms(&self) -> Vec<f64> {
        self.layers.iter().map(|l| l2(l)).collect()
    }

    pub fn dot(&self, other: &Self) -> Result<f64> {
        self.check_structure(other)?;
        Ok(self.iter().zip(other.iter()).map(|(a, b)| a * b).sum())
    }

    pub fn scaled(&self, c: f64) -> Self {
        self.map(|v| v * c)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| l.iter().map(|&v| f(v)).collect())
                .collect(),
        }
    }

    /// `self + other`.
    pub fn add(&self, other: &Self) -> Result<Self> {
        axpy(1.0, other, self)
    }

    /// `self - other`.
    pub fn sub(&self, other: &Self) -> Result<Self> {
        axpy(-1.0, other, self)
    }

    /// In-place `self += a * x`.
    pub fn add_scaled(&mut self, a: f64, x: &Self) -> Result<()> {
        self.check_structure(x)?;
        for (dst, src) in self.layers.iter_mut().zip(&x.layers) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += a * s;
            }
        }
        Ok(())
    }

    /// Keep only the layers whose flag is set, in order.
    pub fn select_layers(&self, keep: &[bool]) -> Result<Self> {
        if keep.len() != self.layers.len() {
            return Err(Error::Structure(format!(
                "layer mask has {} entries for {} layers",
                keep.len(),
                self.layers.len()
            )));
        }
        let layers: Vec<Vec<f64>> = self
            .layers
            .iter()
            .zip(keep)
            .filter(|(_, &k)| k)
            .map(|(l, _)| l.clone())
            .collect();
        if layers.is_empty() {
            return Err(Error::Structure("layer mask selects no layers".into()));
        }
        Ok(Self { layers })
    }

    /// Overwrite the flagged layers of `self` with the blocks of `subset`,
    /// taken in order. Inverse of [`select_layers`](Self::select_layers).
    pub fn scatter_layers(&mut self, keep: &[bool], subset: &Self) -> Result<()> {
        if keep.len() != self.layers.len() {
            return Err(Error::Structure("layer mask length mismatch".into()));
        }
        let mut src = subset.layers.iter();
        for (dst, _) in self.layers.iter_mut().zip(keep).filter(|(_, &k)| k) {
            let block = src
                .next()
                .ok_or_else(|| Error::Structure("subset has too few layers".into()))?;
            if block.len() != dst.len() {
                return Err(Error::Structure("subset layer length mismatch".into()));
            }
            dst.copy_from_slice(block);
        }
        if src.next().is_some() {
            return Err(Error::Structure("subset has too many layers".into()));
        }
        Ok(())
    }

    fn bad_layer(&self, d: usize) -> Error {
        Error::Structure(format!(
            "layer {d} out of range ({} layers)",
            self.layers.len()
        ))
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `a * x + y`, elementwise, keeping the shared layer structure.
pub fn axpy(a: f64, x: &LayeredParams, y: &LayeredParams) -> Result<LayeredParams> {
    x.check_structure(y)?;
    let layers = x
        .layers
        .iter()
        .zip(&y.layers)
        .map(|(xl, yl)| xl.iter().zip(yl).map(|(xv, yv)| a * xv + yv).collect())
        .collect();
    Ok(LayeredParams { layers })
}

/// Arithmetic mean of a non-empty list of same-structure values.
pub fn mean(values: &[LayeredParams]) -> Result<LayeredParams> {
    let first = values
        .first()
        .ok_or_else(|| Error::Usage("mean of an empty list".into()))?;
    let mut acc = first.zeros_like();
    for v in values {
        acc.add_scaled(1.0, v)?;
    }
    Ok(acc.scaled(1.0 / values.len() as f64))
}
