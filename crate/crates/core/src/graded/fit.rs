//! Least-squares block fitting: per-edge normal equations and the dense joint solve.

use nalgebra::DMatrix;

use super::{BlockMap, EdgeSet, GradedVector, Grading};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const COND_LIMIT: f64 = 1e12;
const RIDGE_SCALE: f64 = 1e-10;

/// Symmetric solve of `X Σ = C` for `X`, with a ridge when Σ is ill-conditioned.
fn solve_right(c: &DMatrix<f64>, sigma: &DMatrix<f64>, grade: &str) -> Result<DMatrix<f64>> {
    let n = sigma.nrows();
    let eig = sigma.clone().symmetric_eigen();
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    let singular = || Error::Singular {
        grade: grade.to_string(),
    };
    if max <= 0.0 || min <= max * n as f64 * f64::EPSILON {
        return Err(singular());
    }
    let mut s = sigma.clone();
    if max / min > COND_LIMIT {
        let ridge = RIDGE_SCALE * sigma.trace() / n as f64;
        for i in 0..n {
            s[(i, i)] += ridge;
        }
    }
    let chol = s.cholesky().ok_or_else(singular)?;
    // X Σ = C  ⇔  Σ Xᵀ = Cᵀ
    Ok(chol.solve(&c.transpose()).transpose())
}

fn second_moment(a: &Tensor, b: &Tensor) -> DMatrix<f64> {
    let n = a.rows() as f64;
    (a.to_dmatrix().transpose() * b.to_dmatrix()) / n
}

/// `Φ̂_{h←g} = Ê[y^(h) z^(g)ᵀ] Σ̂_g⁻¹` for every admissible edge, each solved on its own.
pub fn fit_blocks_least_squares(
    grading: &Grading,
    z: &GradedVector,
    y: &GradedVector,
    edges: &EdgeSet,
) -> Result<Vec<BlockMap>> {
    if z.batch() != y.batch() {
        return Err(Error::shape(
            "fit",
            format!("{} inputs vs {} targets", z.batch(), y.batch()),
        ));
    }
    let mut sigmas: Vec<Option<DMatrix<f64>>> = vec![None; grading.len()];
    edges
        .edges()
        .iter()
        .map(|&e| {
            let zg = z.block(e.src);
            let sigma = sigmas[e.src].get_or_insert_with(|| second_moment(zg, zg));
            let c = second_moment(y.block(e.dst), zg);
            let w = solve_right(&c, sigma, grading.label(e.src))?;
            Ok(BlockMap::new(e, Tensor::from_dmatrix(&w)))
        })
        .collect()
}

/// Dense least squares per destination over all incoming sources at once (pseudo-inverse).
pub fn fit_blocks_joint(
    grading: &Grading,
    z: &GradedVector,
    y: &GradedVector,
    edges: &EdgeSet,
) -> Result<Vec<BlockMap>> {
    let mut out: Vec<Option<BlockMap>> = vec![None; edges.len()];
    for h in 0..grading.len() {
        let incoming = edges.incoming(h);
        if incoming.is_empty() {
            continue;
        }
        let parts: Vec<&Tensor> = incoming.iter().map(|&i| z.block(edges.get(i).src)).collect();
        let x = Tensor::concat_cols(&parts)?.to_dmatrix();
        let yh = y.block(h).to_dmatrix();
        let pinv = x
            .clone()
            .pseudo_inverse(1e-12)
            .map_err(|_| Error::Singular {
                grade: grading.label(h).to_string(),
            })?;
        let w = (pinv * yh).transpose();
        let mut col = 0;
        for &i in &incoming {
            let e = edges.get(i);
            let dg = grading.dim(e.src);
            let block = w.columns(col, dg).into_owned();
            out[i] = Some(BlockMap::new(e, Tensor::from_dmatrix(&block)));
            col += dg;
        }
    }
    Ok(out.into_iter().map(|b| b.expect("every edge has a destination")).collect())
}
