//! Dense forward/backward primitives for the tiny encoder.
//!
//! Everything is f64 in memory; checkpoints narrow to f32 on disk. Each
//! forward returns whatever the matching backward needs, so a training
//! step is an explicit forward pass followed by an explicit reverse pass
//! over the same caches.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayD, Axis};

use crate::error::{Error, Result};

/// Named gradient accumulator. Shapes must agree across accumulations.
#[derive(Debug, Default, Clone)]
pub struct GradStore {
    map: BTreeMap<String, ArrayD<f64>>,
}

impl GradStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, grad: ArrayD<f64>) {
        match self.map.get_mut(name) {
            Some(existing) => {
                debug_assert_eq!(existing.shape(), grad.shape(), "gradient shape for {name}");
                *existing += &grad;
            }
            None => {
                self.map.insert(name.to_string(), grad);
            }
        }
    }

    pub fn add2(&mut self, name: &str, grad: Array2<f64>) {
        self.add(name, grad.into_dyn());
    }

    pub fn add1(&mut self, name: &str, grad: Array1<f64>) {
        self.add(name, grad.into_dyn());
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.map.get(name)
    }

    pub fn scale(&mut self, factor: f64) {
        for grad in self.map.values_mut() {
            *grad *= factor;
        }
    }

    /// Merge another store into this one (sums overlapping entries).
    pub fn merge(&mut self, other: GradStore) {
        for (name, grad) in other.map {
            self.add(&name, grad);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn is_finite(&self) -> bool {
        self.map.values().all(|g| g.iter().all(|v| v.is_finite()))
    }
}

/// `y = x W + b`
pub fn linear(x: &Array2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Result<Array2<f64>> {
    if x.ncols() != w.nrows() {
        return Err(Error::Shape(format!(
            "linear: input width {} vs weight rows {}",
            x.ncols(),
            w.nrows()
        )));
    }
    if w.ncols() != b.len() {
        return Err(Error::Shape(format!(
            "linear: weight cols {} vs bias len {}",
            w.ncols(),
            b.len()
        )));
    }
    Ok(x.dot(w) + b)
}

/// Gradients of [`linear`]: returns `(dx, dw, db)` given upstream `dy`.
pub fn linear_backward(
    x: &Array2<f64>,
    w: &Array2<f64>,
    dy: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
    let dx = dy.dot(&w.t());
    let dw = x.t().dot(dy);
    let db = dy.sum_axis(Axis(0));
    (dx, dw, db)
}

pub fn relu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

pub fn relu_backward(x: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut dx = dy.clone();
    dx.zip_mut_with(x, |g, &v| {
        if v <= 0.0 {
            *g = 0.0;
        }
    });
    dx
}

/// Row-wise softmax with the usual max-shift for stability.
pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Backward through a row-wise softmax: given the softmax output `p` and
/// upstream `dp`, `ds = p * (dp - sum(dp * p))` per row.
pub fn softmax_rows_backward(p: &Array2<f64>, dp: &Array2<f64>) -> Array2<f64> {
    let mut ds = dp.clone();
    for (mut ds_row, p_row) in ds.rows_mut().into_iter().zip(p.rows()) {
        let dot: f64 = ds_row
            .iter()
            .zip(p_row.iter())
            .map(|(g, q)| g * q)
            .sum();
        for (g, &q) in ds_row.iter_mut().zip(p_row.iter()) {
            *g = q * (*g - dot);
        }
    }
    ds
}

const LN_EPS: f64 = 1e-5;

pub struct LayerNormCache {
    pub x_hat: Array2<f64>,
    pub inv_std: Array1<f64>,
}

/// Row-wise layer normalization `y = gain * (x - mean) / std + bias`.
pub fn layer_norm(
    x: &Array2<f64>,
    gain: &Array1<f64>,
    bias: &Array1<f64>,
) -> (Array2<f64>, LayerNormCache) {
    let d = x.ncols() as f64;
    let mut x_hat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, inv) in x_hat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *inv = 1.0 / (var + LN_EPS).sqrt();
        let scale = *inv;
        row.mapv_inplace(|v| v * scale);
    }
    let y = &x_hat * gain + bias;
    (y, LayerNormCache { x_hat, inv_std })
}

/// Backward through [`layer_norm`]: returns `(dx, dgain, dbias)`.
pub fn layer_norm_backward(
    cache: &LayerNormCache,
    gain: &Array1<f64>,
    dy: &Array2<f64>,
) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let d = dy.ncols() as f64;
    let dgain = (dy * &cache.x_hat).sum_axis(Axis(0));
    let dbias = dy.sum_axis(Axis(0));
    let dx_hat = dy * gain;
    let mut dx = dx_hat.clone();
    for ((mut dx_row, x_hat_row), &inv) in dx
        .rows_mut()
        .into_iter()
        .zip(cache.x_hat.rows())
        .zip(cache.inv_std.iter())
    {
        let mean_dx_hat = dx_row.sum() / d;
        let mean_dx_hat_x_hat: f64 = dx_row
            .iter()
            .zip(x_hat_row.iter())
            .map(|(g, h)| g * h)
            .sum::<f64>()
            / d;
        for (g, &h) in dx_row.iter_mut().zip(x_hat_row.iter()) {
            *g = inv * (*g - mean_dx_hat - h * mean_dx_hat_x_hat);
        }
    }
    (dx, dgain, dbias)
}

/// Sinusoidal position encodings, `len x d`.
pub fn positional_encoding(len: usize, d: usize) -> Array2<f64> {
    let mut pe = Array2::zeros((len, d));
    for pos in 0..len {
        for i in 0..d {
            let angle = pos as f64 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            pe[[pos, i]] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}
