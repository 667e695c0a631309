//! Neuron atlas: a 2-D layout of neurons from their activation embedding.
//!
//! Each neuron's row of the activation table (its spatial maxima over the
//! reference corpus) is its embedding. PCA projects those rows onto the
//! leading principal axes. Eigenvectors come from deflated power iteration
//! on whichever of the covariance (`n × n`) or Gram (`m × m`) matrix is
//! smaller, so no general eigensolver is needed.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::index::ActivationTable;

const MAX_ITERATIONS: usize = 200_000;
/// Residual `‖Sv − λv‖` relative to the leading eigenvalue.
const RESIDUAL_TOLERANCE: f64 = 1e-12;
/// Eigenvalues below this fraction of the total variance are treated as zero.
const NULL_VARIANCE: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum AtlasError {
    #[error("need at least two neurons, got {0}")]
    TooFewNeurons(usize),
    #[error("embedding has no columns")]
    NoColumns,
    #[error("embedding holds {got} values, expected {rows}x{cols}")]
    Shape { rows: usize, cols: usize, got: usize },
    #[error("embedding contains non-finite values")]
    NonFinite,
}

/// The neuron embedding is the activation table itself.
pub fn build_embedding(table: &ActivationTable) -> &ActivationTable {
    table
}

/// Projected neuron coordinates, in the same order as the embedding rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    /// `coordinates[i][k]` is neuron `i` on component `k`.
    pub coordinates: Vec<Vec<f64>>,
    pub explained_variance_ratio: Vec<f64>,
    /// Unit principal axes in embedding space, one per component.
    pub axes: Vec<Vec<f64>>,
}

impl Projection {
    pub fn len(&self) -> usize {
        self.coordinates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coordinates.is_empty()
    }

    /// First two coordinates of neuron `i`.
    pub fn xy(&self, i: usize) -> (f64, f64) {
        let c = &self.coordinates[i];
        (c.first().copied().unwrap_or(0.0), c.get(1).copied().unwrap_or(0.0))
    }
}

/// Deterministic start vector (splitmix64 stream mapped to [-1, 1]).
fn start_vector(dim: usize, salt: u64) -> Vec<f64> {
    let mut state = 0x9E37_79B9_7F4A_7C15u64 ^ salt.wrapping_mul(0xD1B5_4A32_D192_ED03);
    (0..dim)
        .map(|_| {
            state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
            let mut z = state;
            z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
            z ^= z >> 31;
            (z >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn sym_mul(s: &[f64], dim: usize, v: &[f64], out: &mut [f64]) {
    for (i, o) in out.iter_mut().enumerate() {
        *o = dot(&s[i * dim..(i + 1) * dim], v);
    }
}

fn orthogonalize(v: &mut [f64], basis: &[Vec<f64>]) {
    for b in basis {
        let p = dot(v, b);
        for (x, y) in v.iter_mut().zip(b) {
            *x -= p * y;
        }
    }
}

/// Leading `count` eigenpairs of the symmetric PSD matrix `s` (`dim × dim`),
/// largest first. Null directions come back with eigenvalue 0 and a zero
/// vector.
fn top_eigenpairs(s: &[f64], dim: usize, count: usize, trace: f64) -> Vec<(f64, Vec<f64>)> {
    let mut deflated = s.to_vec();
    let mut found: Vec<Vec<f64>> = Vec::new();
    let mut pairs = Vec::new();
    let mut scale = 0.0f64;
    let mut w = vec![0.0; dim];
    for k in 0..count.min(dim) {
        let mut v = start_vector(dim, k as u64);
        orthogonalize(&mut v, &found);
        let n = norm(&v);
        if n == 0.0 {
            break;
        }
        v.iter_mut().for_each(|x| *x /= n);
        let mut lambda = 0.0;
        for _ in 0..MAX_ITERATIONS {
            sym_mul(&deflated, dim, &v, &mut w);
            orthogonalize(&mut w, &found);
            lambda = dot(&v, &w);
            let wn = norm(&w);
            if wn == 0.0 {
                lambda = 0.0;
                break;
            }
            let residual = w
                .iter()
                .zip(&v)
                .map(|(a, b)| (a - lambda * b).powi(2))
                .sum::<f64>()
                .sqrt();
            v.iter_mut().zip(&w).for_each(|(x, y)| *x = y / wn);
            if residual <= RESIDUAL_TOLERANCE * scale.max(lambda.abs()) {
                break;
            }
        }
        if k == 0 {
            scale = lambda.abs();
        }
        if lambda <= NULL_VARIANCE * trace {
            break;
        }
        for i in 0..dim {
            for j in 0..dim {
                deflated[i * dim + j] -= lambda * v[i] * v[j];
            }
        }
        found.push(v.clone());
        pairs.push((lambda, v));
    }
    pairs
}

/// PCA of a row-major `rows × cols` matrix onto `components` axes.
///
/// Columns are centered over rows. The sign of every axis is fixed so that
/// its entry of largest magnitude is positive. Data without variance
/// projects every row to the origin.
pub fn pca_project(data: &[f64], rows: usize, cols: usize, components: usize) -> Result<Projection, AtlasError> {
    if rows < 2 {
        return Err(AtlasError::TooFewNeurons(rows));
    }
    if cols == 0 {
        return Err(AtlasError::NoColumns);
    }
    if data.len() != rows * cols {
        return Err(AtlasError::Shape {
            rows,
            cols,
            got: data.len(),
        });
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(AtlasError::NonFinite);
    }

    let mut x = data.to_vec();
    for j in 0..cols {
        let mean = (0..rows).map(|i| data[i * cols + j]).sum::<f64>() / rows as f64;
        for i in 0..rows {
            x[i * cols + j] -= mean;
        }
    }
    let trace: f64 = x.iter().map(|v| v * v).sum();

    // axes in column space, with their eigenvalues
    let mut axes: Vec<(f64, Vec<f64>)> = Vec::new();
    if trace > 0.0 {
        if cols <= rows {
            let mut cov = vec![0.0; cols * cols];
            for a in 0..cols {
                for b in a..cols {
                    let s: f64 = (0..rows).map(|i| x[i * cols + a] * x[i * cols + b]).sum();
                    cov[a * cols + b] = s;
                    cov[b * cols + a] = s;
                }
            }
            axes = top_eigenpairs(&cov, cols, components, trace);
        } else {
            let mut gram = vec![0.0; rows * rows];
            for a in 0..rows {
                for b in a..rows {
                    let s = dot(&x[a * cols..(a + 1) * cols], &x[b * cols..(b + 1) * cols]);
                    gram[a * rows + b] = s;
                    gram[b * rows + a] = s;
                }
            }
            for (lambda, u) in top_eigenpairs(&gram, rows, components, trace) {
                // v = Xᵀu / ‖Xᵀu‖
                let mut v: Vec<f64> = (0..cols)
                    .map(|j| (0..rows).map(|i| x[i * cols + j] * u[i]).sum())
                    .collect();
                let n = norm(&v);
                if n == 0.0 {
                    break;
                }
                v.iter_mut().for_each(|e| *e /= n);
                axes.push((lambda, v));
            }
        }
    }

    for (_, v) in axes.iter_mut() {
        let mut lead = 0;
        for (j, e) in v.iter().enumerate() {
            if e.abs() > v[lead].abs() {
                lead = j;
            }
        }
        if v[lead] < 0.0 {
            v.iter_mut().for_each(|e| *e = -*e);
        }
    }
    while axes.len() < components {
        axes.push((0.0, vec![0.0; cols]));
    }

    let coordinates = (0..rows)
        .map(|i| {
            let row = &x[i * cols..(i + 1) * cols];
            axes.iter()
                .map(|(lambda, v)| if *lambda > 0.0 { dot(row, v) } else { 0.0 })
                .collect()
        })
        .collect();
    let explained_variance_ratio = axes
        .iter()
        .map(|(lambda, _)| if trace > 0.0 { lambda / trace } else { 0.0 })
        .collect();
    Ok(Projection {
        coordinates,
        explained_variance_ratio,
        axes: axes.into_iter().map(|(_, v)| v).collect(),
    })
}

/// Projects the neurons of an activation table.
pub fn project_table(table: &ActivationTable, components: usize) -> Result<Projection, AtlasError> {
    let data: Vec<f64> = table.values().iter().map(|&v| v as f64).collect();
    pca_project(&data, table.neurons(), table.images(), components)
}
