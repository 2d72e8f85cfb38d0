//! Per-class PCA subspaces and the feature reconstruction error.
//!
//! A class is modeled by the mean of its features and an orthonormal basis
//! of its top principal directions. The reconstruction error of a vector is
//! the ℓ2 norm of the component of `u - mean` that the basis cannot
//! represent: a vector from the class reconstructs well, a vector from
//! elsewhere leaves a large residual.
//!
//! Fitting runs in `f64` through a thin SVD of the centered data matrix. The
//! fitted mean and basis are then rounded to `f32`, the precision they are
//! checkpointed in, so a reloaded subspace scores bit-identically.

use nalgebra::{DMatrix, SVD};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ClassId;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitOptions {
    /// Fraction of total variance the retained components must cover.
    pub variance_retained: f64,
    /// Standardize each dimension by its fit-set standard deviation before
    /// PCA and scoring.
    pub standardize: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            variance_retained: 0.995,
            standardize: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSubspace {
    pub class_id: ClassId,
    pub dim: usize,
    pub q: usize,
    pub mean: Vec<f32>,
    /// `q × dim`, row-major, orthonormal rows.
    pub basis: Vec<f32>,
    /// Per-dimension multiplier applied after centering (standardization).
    pub scale: Option<Vec<f32>>,
    /// Fraction of the fit-set variance captured by the basis.
    pub variance_retained: f64,
    pub n_fit: usize,
    /// Set when the fit set had zero variance.
    pub degenerate: bool,
}

/// Fit the subspace of `class_id` from `vectors`.
pub fn fit_subspace(class_id: ClassId, vectors: &[&[f32]], opts: &FitOptions) -> Result<ClassSubspace> {
    fit_subspace_capped(class_id, vectors, opts, usize::MAX)
}

/// [`fit_subspace`] keeping at most `max_q` components (at least one).
pub fn fit_subspace_capped(class_id: ClassId, vectors: &[&[f32]], opts: &FitOptions, max_q: usize) -> Result<ClassSubspace> {
    if vectors.len() < 2 {
        return Err(Error::Fit(format!(
            "class {class_id}: need at least 2 vectors, got {}",
            vectors.len()
        )));
    }
    if !(opts.variance_retained > 0.0 && opts.variance_retained <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "variance_retained must lie in (0, 1], got {}",
            opts.variance_retained
        )));
    }
    let dim = vectors[0].len();
    if dim == 0 {
        return Err(Error::Fit("zero-dimensional vectors".into()));
    }
    for v in vectors {
        if v.len() != dim {
            return Err(Error::dim(dim, v.len()));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Fit(format!("class {class_id}: non-finite input")));
        }
    }
    let n = vectors.len();

    let mut mean = vec![0.0f64; dim];
    for v in vectors {
        for (m, x) in mean.iter_mut().zip(v.iter()) {
            *m += *x as f64;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mean32: Vec<f32> = mean.iter().map(|m| *m as f32).collect();

    let scale: Option<Vec<f32>> = opts.standardize.then(|| {
        (0..dim)
            .map(|j| {
                let var = vectors
                    .iter()
                    .map(|v| {
                        let d = v[j] as f64 - mean32[j] as f64;
                        d * d
                    })
                    .sum::<f64>()
                    / n as f64;
                if var > 0.0 {
                    (1.0 / var.sqrt()) as f32
                } else {
                    1.0
                }
            })
            .collect()
    });

    // Center on the rounded mean so the basis matches what scoring sees.
    let centered = DMatrix::from_fn(n, dim, |i, j| {
        let d = vectors[i][j] as f64 - mean32[j] as f64;
        match &scale {
            Some(s) => d * s[j] as f64,
            None => d,
        }
    });
    let total: f64 = centered.iter().map(|x| x * x).sum();

    if total == 0.0 {
        let mut basis = vec![0.0f32; dim];
        basis[0] = 1.0;
        return Ok(ClassSubspace {
            class_id,
            dim,
            q: 1,
            mean: mean32,
            basis,
            scale,
            variance_retained: 1.0,
            n_fit: n,
            degenerate: true,
        });
    }

    let svd = SVD::new(centered, false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::Fit("SVD did not produce right singular vectors".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .partial_cmp(&svd.singular_values[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });

    let q_cap = (n - 1).min(dim).min(max_q).max(1);
    let target = opts.variance_retained * total;
    let slack = 1e-12 * total;
    let mut cum = 0.0;
    let mut q = 0;
    for &k in &order {
        let s = svd.singular_values[k];
        cum += s * s;
        q += 1;
        if cum >= target - slack || q == q_cap {
            break;
        }
    }

    let mut basis = Vec::with_capacity(q * dim);
    for &k in order.iter().take(q) {
        let row: Vec<f64> = (0..dim).map(|j| v_t[(k, j)]).collect();
        let pivot = row
            .iter()
            .enumerate()
            .fold((0usize, 0.0f64), |best, (j, x)| if x.abs() > best.1 { (j, x.abs()) } else { best })
            .0;
        let sign = if row[pivot] < 0.0 { -1.0 } else { 1.0 };
        basis.extend(row.iter().map(|x| (sign * x) as f32));
    }

    Ok(ClassSubspace {
        class_id,
        dim,
        q,
        mean: mean32,
        basis,
        scale,
        variance_retained: (cum / total).min(1.0),
        n_fit: n,
        degenerate: false,
    })
}

impl ClassSubspace {
    /// Zero-dimensional model of a single vector: its FRE is the distance
    /// to that vector. Used for classes known from one sample only.
    pub fn point(class_id: ClassId, v: &[f32]) -> Self {
        Self {
            class_id,
            dim: v.len(),
            q: 0,
            mean: v.to_vec(),
            basis: Vec::new(),
            scale: None,
            variance_retained: 0.0,
            n_fit: 1,
            degenerate: true,
        }
    }

    /// Zero-dimensional model at the mean of a few vectors.
    pub fn centroid(class_id: ClassId, vectors: &[&[f32]]) -> Self {
        let dim = vectors.first().map_or(0, |v| v.len());
        let mut mean = vec![0.0f64; dim];
        for v in vectors {
            for (m, x) in mean.iter_mut().zip(v.iter()) {
                *m += *x as f64;
            }
        }
        let n = vectors.len().max(1) as f64;
        Self {
            mean: mean.iter().map(|m| (*m / n) as f32).collect(),
            n_fit: vectors.len(),
            ..Self::point(class_id, &vec![0.0; dim])
        }
    }

    pub fn basis_row(&self, k: usize) -> &[f32] {
        &self.basis[k * self.dim..(k + 1) * self.dim]
    }

    fn centered(&self, u: &[f32]) -> Vec<f64> {
        let mut c: Vec<f64> = u.iter().zip(&self.mean).map(|(x, m)| *x as f64 - *m as f64).collect();
        if let Some(s) = &self.scale {
            for (cj, sj) in c.iter_mut().zip(s) {
                *cj *= *sj as f64;
            }
        }
        c
    }

    /// Coordinates of `u - mean` in the basis.
    pub fn project(&self, u: &[f32]) -> Result<Vec<f64>> {
        self.check_dim(u)?;
        let c = self.centered(u);
        Ok(self.coefficients(&c))
    }

    fn coefficients(&self, c: &[f64]) -> Vec<f64> {
        (0..self.q)
            .map(|k| self.basis_row(k).iter().zip(c).map(|(b, x)| *b as f64 * x).sum())
            .collect()
    }

    fn check_dim(&self, u: &[f32]) -> Result<()> {
        if u.len() != self.dim {
            return Err(Error::dim(self.dim, u.len()));
        }
        Ok(())
    }

    /// Reconstruction error ‖(u − mean) − Bᵀ B (u − mean)‖₂.
    pub fn fre(&self, u: &[f32]) -> Result<f64> {
        self.check_dim(u)?;
        Ok(self.fre_unchecked(u))
    }

    pub(crate) fn fre_unchecked(&self, u: &[f32]) -> f64 {
        let mut residual = self.centered(u);
        let coeffs = self.coefficients(&residual);
        for (k, p) in coeffs.iter().enumerate() {
            for (r, b) in residual.iter_mut().zip(self.basis_row(k)) {
                *r -= *b as f64 * p;
            }
        }
        residual.iter().map(|r| r * r).sum::<f64>().sqrt()
    }
}

/// Free-function form of [`ClassSubspace::fre`].
pub fn fre(s: &ClassSubspace, u: &[f32]) -> Result<f64> {
    s.fre(u)
}

/// Minimum reconstruction error over `subspaces` and the class attaining
/// it; ties go to the smallest class id.
pub fn min_fre<'a, I>(subspaces: I, u: &[f32]) -> Result<(f64, ClassId)>
where
    I: IntoIterator<Item = &'a ClassSubspace>,
{
    let mut best: Option<(f64, ClassId)> = None;
    for s in subspaces {
        let score = s.fre(u)?;
        best = match best {
            None => Some((score, s.class_id)),
            Some((b, c)) if score < b || (score == b && s.class_id < c) => Some((score, s.class_id)),
            keep => keep,
        };
    }
    best.ok_or_else(|| Error::EmptyModel("no subspaces to score against".into()))
}
