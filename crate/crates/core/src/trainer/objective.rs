use rayon::prelude::*;

use crate::backend::FeatureMatrix;

const CHUNK_ROWS: usize = 256;

/// A subset of rows of a feature matrix with their class indices. Indices are
/// borrowed so cross-validation folds never copy feature data.
#[derive(Clone, Copy)]
pub struct Rows<'a> {
    pub features: &'a FeatureMatrix,
    pub labels: &'a [u32],
    pub indices: &'a [usize],
}

impl Rows<'_> {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Penalised multinomial negative log-likelihood
///
/// ```text
/// J(W, b) = Σᵢ −log softmax(Wᵀxᵢ + b)[yᵢ] + ‖W‖²_F / (2C)
/// ```
///
/// over a parameter vector laid out as `W` (D×K, row-major) followed by `b`
/// (K). Biases are not penalised.
pub struct Objective<'a> {
    rows: Rows<'a>,
    classes: usize,
    inverse_c: f64,
}

impl<'a> Objective<'a> {
    pub fn new(rows: Rows<'a>, classes: usize, c: f64) -> Self {
        Self {
            rows,
            classes,
            inverse_c: 1.0 / c,
        }
    }

    pub fn dim(&self) -> usize {
        self.rows.features.dim()
    }

    pub fn num_params(&self) -> usize {
        (self.dim() + 1) * self.classes
    }

    /// Value only.
    pub fn value(&self, theta: &[f64]) -> f64 {
        self.evaluate(theta, false).0
    }

    /// Value and gradient. Rows are summed in fixed chunks, chunk results in
    /// order, so the result does not depend on the thread count.
    pub fn value_and_gradient(&self, theta: &[f64]) -> (f64, Vec<f64>) {
        self.evaluate(theta, true)
    }

    fn evaluate(&self, theta: &[f64], with_grad: bool) -> (f64, Vec<f64>) {
        let d = self.dim();
        let k = self.classes;
        assert_eq!(theta.len(), (d + 1) * k, "parameter vector length");
        let (weights, biases) = theta.split_at(d * k);

        let partials: Vec<(f64, Vec<f64>)> = self
            .rows
            .indices
            .par_chunks(CHUNK_ROWS)
            .map(|chunk| {
                let mut grad = if with_grad {
                    vec![0.0; theta.len()]
                } else {
                    Vec::new()
                };
                let mut loss = 0.0;
                let mut z = vec![0.0; k];
                for &i in chunk {
                    let x = self.rows.features.row(i);
                    let y = self.rows.labels[i] as usize;
                    logits(weights, biases, x, &mut z);
                    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let sum: f64 = z.iter().map(|v| (v - max).exp()).sum();
                    let lse = max + sum.ln();
                    loss += lse - z[y];
                    if with_grad {
                        // z becomes p - onehot(y)
                        for (j, v) in z.iter_mut().enumerate() {
                            *v = (*v - lse).exp() - if j == y { 1.0 } else { 0.0 };
                        }
                        let (gw, gb) = grad.split_at_mut(d * k);
                        for (row, &xv) in gw.chunks_exact_mut(k).zip(x) {
                            let xv = xv as f64;
                            for (g, r) in row.iter_mut().zip(&z) {
                                *g += xv * r;
                            }
                        }
                        for (g, r) in gb.iter_mut().zip(&z) {
                            *g += r;
                        }
                    }
                }
                (loss, grad)
            })
            .collect();

        let mut loss = 0.0;
        let mut grad = if with_grad {
            vec![0.0; theta.len()]
        } else {
            Vec::new()
        };
        for (l, g) in partials {
            loss += l;
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += b;
            }
        }
        let sq: f64 = weights.iter().map(|w| w * w).sum();
        loss += 0.5 * self.inverse_c * sq;
        if with_grad {
            for (g, w) in grad.iter_mut().zip(weights) {
                *g += self.inverse_c * w;
            }
        }
        (loss, grad)
    }
}

/// `z = Wᵀx + b` for W stored D×K row-major.
pub(crate) fn logits(weights: &[f64], biases: &[f64], x: &[f32], z: &mut [f64]) {
    let k = biases.len();
    z.copy_from_slice(biases);
    for (row, &xv) in weights.chunks_exact(k).zip(x) {
        let xv = xv as f64;
        for (zj, w) in z.iter_mut().zip(row) {
            *zj += w * xv;
        }
    }
}

/// In-place numerically stable softmax.
pub(crate) fn softmax(z: &mut [f64]) {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}
