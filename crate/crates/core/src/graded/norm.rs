//! Grade-wise LayerNorm / RMSNorm. Statistics never mix grades.

use serde::{Deserialize, Serialize};

use super::{GradedVector, Grading};
use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    None,
    LayerNorm,
    RmsNorm,
}

/// Per-grade affine parameters; `beta` is ignored for RMSNorm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradeNorm {
    pub kind: NormKind,
    pub gamma: Vec<Tensor>,
    pub beta: Vec<Tensor>,
    pub eps: f64,
}

impl GradeNorm {
    pub fn new(grading: &Grading, kind: NormKind, eps: f64) -> Self {
        Self {
            kind,
            gamma: grading.dims().iter().map(|&d| Tensor::full(1, d, 1.0)).collect(),
            beta: grading.dims().iter().map(|&d| Tensor::zeros(1, d)).collect(),
            eps,
        }
    }

    /// Normalizes one block with grade `g`'s parameters.
    pub fn apply_block(&self, g: usize, x: &Tensor) -> Tensor {
        let d = x.cols();
        let (gamma, beta) = (self.gamma[g].data(), self.beta[g].data());
        let mut out = Vec::with_capacity(x.len());
        for row in x.data().chunks(d) {
            match self.kind {
                NormKind::None => out.extend_from_slice(row),
                NormKind::LayerNorm => {
                    let mu = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
                    let sd = (var + self.eps).sqrt();
                    out.extend(
                        row.iter()
                            .enumerate()
                            .map(|(j, v)| gamma[j] * (v - mu) / sd + beta[j]),
                    );
                }
                NormKind::RmsNorm => {
                    let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
                    let r = (ms + self.eps).sqrt();
                    out.extend(row.iter().enumerate().map(|(j, v)| gamma[j] * v / r));
                }
            }
        }
        Tensor::new(x.shape().to_vec(), out).expect("same shape")
    }

    /// Tape version of [`apply_block`](Self::apply_block) with `gamma`, `beta` as variables.
    pub fn apply_block_tape(
        &self,
        tape: &mut Tape,
        x: Var,
        gamma: Var,
        beta: Var,
    ) -> Result<Var> {
        match self.kind {
            NormKind::None => Ok(x),
            NormKind::LayerNorm => {
                let n = tape.layer_norm(x, self.eps);
                let s = tape.mul_row(n, gamma)?;
                tape.add_row(s, beta)
            }
            NormKind::RmsNorm => {
                let n = tape.rms_norm(x, self.eps);
                tape.mul_row(n, gamma)
            }
        }
    }
}

/// Normalizes every grade block with its own statistics.
pub fn graded_normalize(z: &GradedVector, norm: &GradeNorm) -> GradedVector {
    let mut out = z.clone();
    for g in 0..z.blocks().len() {
        out.set_block(g, norm.apply_block(g, z.block(g)));
    }
    out
}
