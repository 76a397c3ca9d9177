//! Graded attention and feed-forward blocks under LGT sharing, and their parameter counts.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{EdgeSet, EgtReweighting, GradedVector, Grading};
use crate::error::{Error, Result};
use crate::tape::Act;
use crate::tensor::{softmax_row, Tensor};

fn constant_dim(grading: &Grading) -> Result<usize> {
    grading.constant_dim().ok_or_else(|| {
        Error::config(
            "grading",
            format!("closed-form count needs a constant grade dimension, got {:?}", grading.dims()),
        )
    })
}

/// `H (2 d d_q + 2 |Δ| d²)`.
pub fn param_count_attention(grading: &Grading, heads: usize, d_q: usize, n_delta: usize) -> Result<usize> {
    let d = constant_dim(grading)?;
    Ok(heads * (2 * d * d_q + 2 * n_delta * d * d))
}

/// `2 d Σ_δ m_δ`.
pub fn param_count_ffn(grading: &Grading, widths: &[usize]) -> Result<usize> {
    let d = constant_dim(grading)?;
    Ok(2 * d * widths.iter().sum::<usize>())
}

/// `Σ_δ d_g d_{g+δ}` at the first grade where both exist.
pub fn param_count_general(grading: &Grading, band: &[i64]) -> Result<usize> {
    let n = grading.len() as i64;
    let mut total = 0;
    for &delta in band {
        let g = (0..n)
            .find(|g| (0..n).contains(&(g + delta)))
            .ok_or(Error::BandOutOfRange(delta))?;
        total += grading.dim(g as usize) * grading.dim((g + delta) as usize);
    }
    Ok(total)
}

/// Attention with Q/K shared across grades per head and V/U shared per increment.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionBlockParams {
    pub heads: usize,
    pub d_q: usize,
    pub w_q: Vec<Tensor>,
    pub w_k: Vec<Tensor>,
    /// `(head, δ) -> W_V`, `[d, d]`.
    pub w_v: BTreeMap<(usize, i64), Tensor>,
    /// `(head, δ) -> U`, `[d, d]`.
    pub u: BTreeMap<(usize, i64), Tensor>,
    /// Fixed reweighting for the EGT form; carries no trainable parameters.
    pub reweighting: Option<EgtReweighting>,
}

impl AttentionBlockParams {
    pub fn lgt(grading: &Grading, edges: &EdgeSet, heads: usize, d_q: usize, seed: u64) -> Result<Self> {
        let d = constant_dim(grading)?;
        let band = edges
            .band()
            .ok_or_else(|| Error::config("edges", "attention sharing needs a banded edge set"))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = 1.0 / (d as f64).sqrt();
        let w_q = (0..heads).map(|_| Tensor::randn(d_q, d, s, &mut rng)).collect();
        let w_k = (0..heads).map(|_| Tensor::randn(d_q, d, s, &mut rng)).collect();
        let mut w_v = BTreeMap::new();
        let mut u = BTreeMap::new();
        for a in 0..heads {
            for &delta in band {
                w_v.insert((a, delta), Tensor::randn(d, d, s, &mut rng));
                u.insert((a, delta), Tensor::randn(d, d, s, &mut rng));
            }
        }
        Ok(Self {
            heads,
            d_q,
            w_q,
            w_k,
            w_v,
            u,
            reweighting: None,
        })
    }

    pub fn with_reweighting(mut self, d: EgtReweighting) -> Self {
        self.reweighting = Some(d);
        self
    }

    /// Distinct trainable tensors.
    pub fn free_tensors(&self) -> Vec<&Tensor> {
        self.w_q
            .iter()
            .chain(&self.w_k)
            .chain(self.w_v.values())
            .chain(self.u.values())
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.free_tensors().iter().map(|t| t.len()).sum()
    }

    /// Causal attention block `h ← g` for one sequence (rows are positions), summed over heads.
    pub fn forward_edge(&self, z: &GradedVector, g: usize, h: usize) -> Result<Tensor> {
        let delta = h as i64 - g as i64;
        let (zg, zh) = (z.block(g), z.block(h));
        let t_len = zg.rows();
        let mut out = Tensor::zeros(t_len, zh.cols());
        let scale = 1.0 / (self.d_q as f64).sqrt();
        for a in 0..self.heads {
            let wv = self
                .w_v
                .get(&(a, delta))
                .ok_or(Error::InadmissibleEdge { g, h })?;
            let q = zg.matmul(&self.w_q[a].transpose())?;
            let k = zh.matmul(&self.w_k[a].transpose())?;
            let v = zh.matmul(&wv.transpose())?.matmul(&self.u[&(a, delta)].transpose())?;
            for t in 0..t_len {
                let scores: Vec<f64> = (0..=t)
                    .map(|s| scale * q.row(t).iter().zip(k.row(s)).map(|(x, y)| x * y).sum::<f64>())
                    .collect();
                let w = softmax_row(&scores, None);
                for (s, ws) in w.iter().enumerate() {
                    for j in 0..out.cols() {
                        let val = out.get(t, j) + ws * v.get(s, j);
                        out.set(t, j, val);
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Feed-forward blocks `W_2^{(δ)} σ(W_1^{(δ)} x)` shared per increment.
#[derive(Clone, Debug, PartialEq)]
pub struct FfnBlockParams {
    pub w1: BTreeMap<i64, Tensor>,
    pub w2: BTreeMap<i64, Tensor>,
    pub act: Act,
    pub reweighting: Option<EgtReweighting>,
}

impl FfnBlockParams {
    pub fn lgt(grading: &Grading, edges: &EdgeSet, widths: &[usize], seed: u64) -> Result<Self> {
        let d = constant_dim(grading)?;
        let band = edges
            .band()
            .ok_or_else(|| Error::config("edges", "FFN sharing needs a banded edge set"))?;
        if widths.len() != band.len() {
            return Err(Error::config(
                "widths",
                format!("{} widths for {} increments", widths.len(), band.len()),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w1 = BTreeMap::new();
        let mut w2 = BTreeMap::new();
        for (&delta, &m) in band.iter().zip(widths) {
            w1.insert(delta, Tensor::randn(m, d, 1.0 / (d as f64).sqrt(), &mut rng));
            w2.insert(delta, Tensor::randn(d, m, 1.0 / (m as f64).sqrt(), &mut rng));
        }
        Ok(Self {
            w1,
            w2,
            act: Act::Relu,
            reweighting: None,
        })
    }

    pub fn with_reweighting(mut self, d: EgtReweighting) -> Self {
        self.reweighting = Some(d);
        self
    }

    pub fn free_tensors(&self) -> Vec<&Tensor> {
        self.w1.values().chain(self.w2.values()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.free_tensors().iter().map(|t| t.len()).sum()
    }

    pub fn forward_edge(&self, z: &GradedVector, g: usize, h: usize) -> Result<Tensor> {
        let delta = h as i64 - g as i64;
        let w1 = self.w1.get(&delta).ok_or(Error::InadmissibleEdge { g, h })?;
        let hidden = z.block(g).matmul(&w1.transpose())?.map(|x| self.act.eval(x));
        hidden.matmul(&self.w2[&delta].transpose())
    }
}
