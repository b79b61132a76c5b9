use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::EmbeddingMatrix;
use crate::seed;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AdapterError {
    #[error("adapter expects input dimension {expected}, embeddings have {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("parameter vector has length {found}, adapter needs {expected}")]
    ParameterCount { expected: usize, found: usize },
}

/// `y = W x + b` with `W` stored row-major (`rows` outputs × `cols` inputs).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub rows: usize,
    pub cols: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Affine {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, weight: vec![0.0; rows * cols], bias: vec![0.0; rows] }
    }

    fn forward(&self, x: &[f64], out: &mut [f64]) {
        for (r, (o, b)) in out.iter_mut().zip(&self.bias).enumerate() {
            let w = &self.weight[r * self.cols..(r + 1) * self.cols];
            *o = b + w.iter().zip(x).map(|(a, c)| a * c).sum::<f64>();
        }
    }

    /// Accumulate `dL/dW += g xᵀ` and `dL/db += g`.
    fn accumulate(&mut self, g: &[f64], x: &[f64]) {
        for (r, &gr) in g.iter().enumerate() {
            self.bias[r] += gr;
            if gr != 0.0 {
                let w = &mut self.weight[r * self.cols..(r + 1) * self.cols];
                w.iter_mut().zip(x).for_each(|(wv, xv)| *wv += gr * xv);
            }
        }
    }

    /// `Wᵀ g`.
    fn backward_input(&self, g: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (r, &gr) in g.iter().enumerate() {
            let w = &self.weight[r * self.cols..(r + 1) * self.cols];
            out.iter_mut().zip(w).for_each(|(o, wv)| *o += gr * wv);
        }
        out
    }

    fn len(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterKind {
    /// `f(x) = W x + b`.
    Linear,
    /// `f(x) = x + W₂ tanh(W₁ x + b₁) + b₂`.
    Residual,
}

/// Trainable map applied on top of frozen base embeddings.
///
/// Both shapes start as the identity map: the linear adapter with `W = I`,
/// the residual adapter with a zero output layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Adapter {
    Linear(Affine),
    Residual { inner: Affine, outer: Affine },
}

/// Intermediate values of one forward pass, kept for backpropagation.
pub(crate) struct Trace {
    pub output: Vec<f64>,
    hidden: Vec<f64>,
}

impl Adapter {
    pub fn linear_identity(dim: usize) -> Self {
        let mut layer = Affine::zeros(dim, dim);
        for i in 0..dim {
            layer.weight[i * dim + i] = 1.0;
        }
        Adapter::Linear(layer)
    }

    /// Residual adapter with hidden width `hidden`. The first layer is drawn
    /// from `N(0, 1/dim)`; the output layer starts at zero.
    pub fn residual(dim: usize, hidden: usize, seed: u64) -> Self {
        let mut inner = Affine::zeros(hidden, dim);
        let normal = Normal::new(0.0, 1.0 / (dim.max(1) as f64).sqrt()).expect("finite std");
        let mut rng = seed::rng(seed);
        inner.weight.iter_mut().for_each(|w| *w = normal.sample(&mut rng));
        Adapter::Residual { inner, outer: Affine::zeros(dim, hidden) }
    }

    pub fn new(kind: AdapterKind, dim: usize, hidden: usize, seed: u64) -> Self {
        match kind {
            AdapterKind::Linear => Self::linear_identity(dim),
            AdapterKind::Residual => Self::residual(dim, hidden, seed),
        }
    }

    pub fn kind(&self) -> AdapterKind {
        match self {
            Adapter::Linear(_) => AdapterKind::Linear,
            Adapter::Residual { .. } => AdapterKind::Residual,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Adapter::Linear(layer) => layer.cols,
            Adapter::Residual { inner, .. } => inner.cols,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Adapter::Linear(layer) => layer.rows,
            Adapter::Residual { outer, .. } => outer.rows,
        }
    }

    pub fn hidden_dim(&self) -> usize {
        match self {
            Adapter::Linear(_) => 0,
            Adapter::Residual { inner, .. } => inner.rows,
        }
    }

    /// Same shape, every parameter zero. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        match self {
            Adapter::Linear(l) => Adapter::Linear(Affine::zeros(l.rows, l.cols)),
            Adapter::Residual { inner, outer } => Adapter::Residual {
                inner: Affine::zeros(inner.rows, inner.cols),
                outer: Affine::zeros(outer.rows, outer.cols),
            },
        }
    }

    fn layers(&self) -> Vec<&Affine> {
        match self {
            Adapter::Linear(l) => vec![l],
            Adapter::Residual { inner, outer } => vec![inner, outer],
        }
    }

    fn layers_mut(&mut self) -> Vec<&mut Affine> {
        match self {
            Adapter::Linear(l) => vec![l],
            Adapter::Residual { inner, outer } => vec![inner, outer],
        }
    }

    pub fn n_params(&self) -> usize {
        self.layers().iter().map(|l| l.len()).sum()
    }

    /// Parameters flattened layer by layer, weights before biases.
    pub fn to_flat(&self) -> Vec<f64> {
        self.layers()
            .into_iter()
            .flat_map(|l| l.weight.iter().chain(&l.bias).copied())
            .collect()
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<(), AdapterError> {
        if values.len() != self.n_params() {
            return Err(AdapterError::ParameterCount { expected: self.n_params(), found: values.len() });
        }
        let mut rest = values;
        for layer in self.layers_mut() {
            let (w, tail) = rest.split_at(layer.weight.len());
            let (b, tail) = tail.split_at(layer.bias.len());
            layer.weight.copy_from_slice(w);
            layer.bias.copy_from_slice(b);
            rest = tail;
        }
        Ok(())
    }

    /// `self += alpha * other` over every parameter.
    pub fn add_scaled(&mut self, alpha: f64, other: &Adapter) {
        for (dst, src) in self.layers_mut().into_iter().zip(other.layers()) {
            dst.weight.iter_mut().zip(&src.weight).for_each(|(d, s)| *d += alpha * s);
            dst.bias.iter_mut().zip(&src.bias).for_each(|(d, s)| *d += alpha * s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers().iter().all(|l| l.weight.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    pub(crate) fn trace(&self, x: &[f64]) -> Trace {
        match self {
            Adapter::Linear(layer) => {
                let mut output = vec![0.0; layer.rows];
                layer.forward(x, &mut output);
                Trace { output, hidden: Vec::new() }
            }
            Adapter::Residual { inner, outer } => {
                let mut hidden = vec![0.0; inner.rows];
                inner.forward(x, &mut hidden);
                hidden.iter_mut().for_each(|h| *h = h.tanh());
                let mut output = vec![0.0; outer.rows];
                outer.forward(&hidden, &mut output);
                output.iter_mut().zip(x).for_each(|(o, xv)| *o += xv);
                Trace { output, hidden }
            }
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.trace(x).output
    }

    /// Backpropagate `d_output = dL/df(x)` into `grad` (same shape as self).
    pub(crate) fn backward(&self, x: &[f64], trace: &Trace, d_output: &[f64], grad: &mut Adapter) {
        match (self, grad) {
            (Adapter::Linear(_), Adapter::Linear(g)) => g.accumulate(d_output, x),
            (Adapter::Residual { outer, .. }, Adapter::Residual { inner: g_inner, outer: g_outer }) => {
                g_outer.accumulate(d_output, &trace.hidden);
                let mut d_hidden = outer.backward_input(d_output);
                d_hidden.iter_mut().zip(&trace.hidden).for_each(|(d, h)| *d *= 1.0 - h * h);
                g_inner.accumulate(&d_hidden, x);
            }
            _ => unreachable!("gradient accumulator shape differs from adapter"),
        }
    }

    /// Map every row of `base` through the adapter.
    pub fn apply(&self, base: &EmbeddingMatrix) -> Result<EmbeddingMatrix, AdapterError> {
        if base.dim() != self.input_dim() {
            return Err(AdapterError::DimensionMismatch { expected: self.input_dim(), found: base.dim() });
        }
        let out_dim = self.output_dim();
        let mut data = vec![0.0; base.n_rows() * out_dim];
        data.par_chunks_mut(out_dim.max(1)).enumerate().for_each(|(i, dst)| {
            dst.copy_from_slice(&self.forward(base.row(i)));
        });
        let adapted = EmbeddingMatrix::new(base.n_rows(), out_dim, data)
            .expect("finite adapter on finite input yields finite output");
        Ok(match base.fingerprint() {
            Some(fp) => adapted.with_fingerprint(fp),
            None => adapted,
        })
    }
}
