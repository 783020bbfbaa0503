//! Lie-algebra parameterized transformations.
//!
//! A transform is produced by exponentiating a weighted sum of learnable
//! generator matrices: `T = exp(sum_i z_i * A_i)`. This module holds the
//! matrix exponential (scaling-and-squaring with a truncated series), the
//! latent-to-group map, the adjoint needed for reverse-mode differentiation,
//! and the pairwise basis-orthogonality penalty.

use ndarray::{Array1, Array2, ArrayView2, s};

use crate::error::{Error, Result};

/// Learnable generator matrices `A_1..A_k`, all square with the same side.
#[derive(Debug, Clone, PartialEq)]
pub struct LieAlgebraBasisSet {
    bases: Vec<Array2<f64>>,
    side: usize,
}

impl LieAlgebraBasisSet {
    pub fn new(bases: Vec<Array2<f64>>) -> Result<Self> {
        let first = bases
            .first()
            .ok_or_else(|| Error::invalid("basis set must contain at least one generator"))?;
        let side = first.nrows();
        for (i, b) in bases.iter().enumerate() {
            if b.nrows() != side || b.ncols() != side {
                return Err(Error::invalid(format!(
                    "generator {i} has shape {:?}, expected ({side}, {side})",
                    b.dim()
                )));
            }
            if b.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("generator {i} has non-finite entries")));
            }
        }
        Ok(Self { bases, side })
    }

    /// Rebuild from the flat `(k, u*u)` row-per-generator layout used by the
    /// trainable parameter store.
    pub fn from_flat(side: usize, flat: &Array2<f64>) -> Result<Self> {
        if flat.ncols() != side * side {
            return Err(Error::invalid(format!(
                "flat basis row length {} does not match side {side}",
                flat.ncols()
            )));
        }
        let bases = flat
            .rows()
            .into_iter()
            .map(|row| {
                Array2::from_shape_vec((side, side), row.to_vec()).expect("row length checked")
            })
            .collect();
        Self::new(bases)
    }

    /// Flatten to the `(k, u*u)` layout.
    pub fn to_flat(&self) -> Array2<f64> {
        let mut flat = Array2::zeros((self.k(), self.side * self.side));
        for (i, b) in self.bases.iter().enumerate() {
            let row: Vec<f64> = b.iter().copied().collect();
            flat.row_mut(i).assign(&Array1::from(row));
        }
        flat
    }

    pub fn k(&self) -> usize {
        self.bases.len()
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn get(&self, i: usize) -> &Array2<f64> {
        &self.bases[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Array2<f64>> {
        self.bases.iter()
    }
}

fn check_square_finite(m: &ArrayView2<f64>) -> Result<usize> {
    if m.nrows() != m.ncols() {
        return Err(Error::invalid(format!(
            "matrix exponential needs a square input, got {:?}",
            m.dim()
        )));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("matrix exponential input has non-finite entries"));
    }
    Ok(m.nrows())
}

fn identity(n: usize) -> Array2<f64> {
    Array2::eye(n)
}

fn one_norm(m: &ArrayView2<f64>) -> f64 {
    (0..m.ncols())
        .map(|j| m.column(j).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Series length cap; the loop normally exits on convergence long before this.
const MAX_SERIES_TERMS: usize = 64;

fn exp_series(m: &ArrayView2<f64>) -> Array2<f64> {
    let n = m.nrows();
    let mut sum = identity(n);
    let mut term = identity(n);
    for t in 1..=MAX_SERIES_TERMS {
        term = term.dot(m) / (t as f64);
        sum += &term;
        let term_norm = term.iter().map(|v| v.abs()).fold(0.0, f64::max);
        let sum_norm = sum.iter().map(|v| v.abs()).fold(0.0, f64::max);
        if term_norm <= f64::EPSILON * sum_norm {
            break;
        }
    }
    sum
}

fn mat_exp_unchecked(m: &ArrayView2<f64>) -> Array2<f64> {
    let norm = one_norm(m);
    // Scale so the series argument has norm <= 0.5, then undo by squaring.
    let squarings = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as u32
    } else {
        0
    };
    let scaled = m.mapv(|v| v * 2f64.powi(-(squarings as i32)));
    let mut result = exp_series(&scaled.view());
    for _ in 0..squarings {
        result = result.dot(&result);
    }
    result
}

/// Matrix exponential `e^M` by scaling-and-squaring with a series truncated at
/// machine-precision convergence.
pub fn mat_exp(m: &Array2<f64>) -> Result<Array2<f64>> {
    check_square_finite(&m.view())?;
    Ok(mat_exp_unchecked(&m.view()))
}

/// Fréchet derivative of the matrix exponential at `m` in direction `e`,
/// computed from the top-right block of `exp([[M, E], [0, M]])`.
pub fn mat_exp_frechet(m: &Array2<f64>, e: &Array2<f64>) -> Result<Array2<f64>> {
    let n = check_square_finite(&m.view())?;
    if e.dim() != m.dim() {
        return Err(Error::invalid("direction shape must match matrix shape"));
    }
    let mut block = Array2::zeros((2 * n, 2 * n));
    block.slice_mut(s![..n, ..n]).assign(m);
    block.slice_mut(s![n.., n..]).assign(m);
    block.slice_mut(s![..n, n..]).assign(e);
    let exp_block = mat_exp_unchecked(&block.view());
    Ok(exp_block.slice(s![..n, n..]).to_owned())
}

/// Reverse-mode adjoint: given the cotangent `grad` of `exp(M)`, returns the
/// cotangent of `M`. Uses the identity `vjp(M, G) = L_{M^T}(G)` where `L` is
/// the Fréchet derivative.
pub fn mat_exp_vjp(m: &Array2<f64>, grad: &Array2<f64>) -> Result<Array2<f64>> {
    mat_exp_frechet(&m.t().to_owned(), grad)
}

/// Map a latent vector through the basis set: `exp(sum_i z_i * A_i)`.
pub fn exp_map(z: &Array1<f64>, bases: &LieAlgebraBasisSet) -> Result<Array2<f64>> {
    if z.len() != bases.k() {
        return Err(Error::invalid(format!(
            "latent length {} does not match basis count {}",
            z.len(),
            bases.k()
        )));
    }
    let mut m = Array2::zeros((bases.side(), bases.side()));
    for (zi, a) in z.iter().zip(bases.iter()) {
        m.scaled_add(*zi, a);
    }
    mat_exp(&m)
}

/// Orthogonality penalty `sum_{i != j} ||A_i A_j||_F^2` over ordered pairs.
/// Zero iff every cross product vanishes.
pub fn basis_penalty(bases: &LieAlgebraBasisSet) -> f64 {
    let k = bases.k();
    let mut total = 0.0;
    for i in 0..k {
        for j in 0..k {
            if i == j {
                continue;
            }
            let prod = bases.get(i).dot(bases.get(j));
            total += prod.iter().map(|v| v * v).sum::<f64>();
        }
    }
    total
}
