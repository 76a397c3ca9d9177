//! Banded (LGT) kernel banks and EGT reweightings.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{BlockMap, Edge, EdgeSet, Grading};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One kernel per increment, shared by every block with that increment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LgtKernelBank {
    kernels: BTreeMap<i64, Tensor>,
}

impl LgtKernelBank {
    pub fn new(kernels: BTreeMap<i64, Tensor>) -> Self {
        Self { kernels }
    }

    pub fn kernel(&self, delta: i64) -> Option<&Tensor> {
        self.kernels.get(&delta)
    }

    /// Every block with increment `delta` reads this tensor.
    pub fn kernel_mut(&mut self, delta: i64) -> Option<&mut Tensor> {
        self.kernels.get_mut(&delta)
    }

    pub fn deltas(&self) -> impl Iterator<Item = i64> + '_ {
        self.kernels.keys().copied()
    }

    pub fn kernels(&self) -> impl Iterator<Item = (i64, &Tensor)> {
        self.kernels.iter().map(|(&d, k)| (d, k))
    }

    pub fn kernels_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.kernels.values_mut()
    }
}

/// Grade-wise invertible reweighting `D = ⊕_g D_g`. Not trained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EgtReweighting {
    d: Vec<Tensor>,
    d_inv: Vec<Tensor>,
    diagonal: bool,
}

fn is_diagonal(t: &Tensor) -> bool {
    let n = t.rows();
    (0..n).all(|i| (0..n).all(|j| i == j || t.get(i, j) == 0.0))
}

impl EgtReweighting {
    pub fn new(grading: &Grading, d: Vec<Tensor>) -> Result<Self> {
        if d.len() != grading.len() {
            return Err(Error::shape(
                "egt",
                format!("{} operators for {} grades", d.len(), grading.len()),
            ));
        }
        let diagonal = d.iter().all(is_diagonal);
        let mut d_inv = Vec::with_capacity(d.len());
        for (g, dg) in d.iter().enumerate() {
            let n = grading.dim(g);
            if dg.shape() != [n, n] {
                return Err(Error::shape(
                    "egt",
                    format!("D_{g} is {:?}, grade has dim {n}", dg.shape()),
                ));
            }
            let singular = || Error::Singular {
                grade: grading.label(g).to_string(),
            };
            let inv = if diagonal {
                let mut inv = Tensor::zeros(n, n);
                for i in 0..n {
                    let x = dg.get(i, i);
                    if x == 0.0 || !x.is_finite() {
                        return Err(singular());
                    }
                    inv.set(i, i, 1.0 / x);
                }
                inv
            } else {
                let m = dg.to_dmatrix();
                let svd = m.clone().svd(false, false);
                let smin = svd.singular_values.min();
                let smax = svd.singular_values.max();
                if smin <= smax * 1e-14 {
                    return Err(singular());
                }
                Tensor::from_dmatrix(&m.try_inverse().ok_or_else(singular)?)
            };
            d_inv.push(inv);
        }
        Ok(Self { d, d_inv, diagonal })
    }

    /// `D_g = R^g · D_0`, which satisfies the ratio law with `R_δ = R^δ`.
    pub fn exponential(grading: &Grading, d0: &Tensor, ratio: &Tensor) -> Result<Self> {
        let mut d = Vec::with_capacity(grading.len());
        let mut cur = d0.clone();
        for _ in 0..grading.len() {
            d.push(cur.clone());
            cur = ratio.matmul(&cur)?;
        }
        Self::new(grading, d)
    }

    /// Scalar-per-grade reweighting `D_g = c^g · I`.
    pub fn scalar_geometric(grading: &Grading, c: f64) -> Result<Self> {
        let d = (0..grading.len())
            .map(|g| Tensor::eye(grading.dim(g)).scale(c.powi(g as i32)))
            .collect();
        Self::new(grading, d)
    }

    pub fn identity(grading: &Grading) -> Self {
        Self::new(grading, grading.dims().iter().map(|&n| Tensor::eye(n)).collect())
            .expect("identity is invertible")
    }

    pub fn d(&self, g: usize) -> &Tensor {
        &self.d[g]
    }

    pub fn d_inv(&self, g: usize) -> &Tensor {
        &self.d_inv[g]
    }

    pub fn is_diagonal(&self) -> bool {
        self.diagonal
    }

    /// `max_g ‖D_{g+δ} − R_δ D_g‖_max` over grades where both exist.
    pub fn ratio_residual(&self, delta: i64, r: &Tensor) -> Result<f64> {
        let n = self.d.len() as i64;
        let mut worst: f64 = 0.0;
        for g in 0..n {
            let h = g + delta;
            if !(0..n).contains(&h) {
                continue;
            }
            let pred = r.matmul(&self.d[g as usize])?;
            worst = worst.max(pred.max_abs_diff(&self.d[h as usize]));
        }
        Ok(worst)
    }

    /// `D` applied to row states: `z_g ↦ z_g D_gᵀ`.
    pub fn forward_rows(&self, g: usize, z: &Tensor) -> Result<Tensor> {
        z.matmul(&self.d[g].transpose())
    }

    /// `D⁻¹` applied to row states: `z_g ↦ z_g D_g⁻ᵀ`.
    pub fn inverse_rows(&self, g: usize, z: &Tensor) -> Result<Tensor> {
        z.matmul(&self.d_inv[g].transpose())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConjugateDirection {
    /// `Φ ↦ D_h⁻¹ Φ D_g`.
    ToLgt,
    /// `Φ ↦ D_h Φ D_g⁻¹`.
    FromLgt,
}

/// Conjugates realized blocks; biases transform with the destination operator.
pub fn egt_conjugate(
    blocks: &[BlockMap],
    d: &EgtReweighting,
    direction: ConjugateDirection,
) -> Result<Vec<BlockMap>> {
    blocks
        .iter()
        .map(|b| {
            let (g, h) = (b.edge.src, b.edge.dst);
            let (left, right) = match direction {
                ConjugateDirection::ToLgt => (d.d_inv(h), d.d(g)),
                ConjugateDirection::FromLgt => (d.d(h), d.d_inv(g)),
            };
            let weight = left.matmul(&b.weight)?.matmul(right)?;
            let bias = match &b.bias {
                Some(bias) => Some(bias.matmul(&left.transpose())?),
                None => None,
            };
            Ok(BlockMap {
                edge: b.edge,
                weight,
                bias,
            })
        })
        .collect()
}

/// Storage of a layer's linear blocks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum LayerBlocks {
    /// One independent weight per edge, in edge order.
    Free(Vec<Tensor>),
    /// Translation-invariant kernels keyed by increment.
    Banded(LgtKernelBank),
    /// Realized blocks `D_h K_δ D_g⁻¹`; only the kernels are free parameters.
    Egt {
        bank: LgtKernelBank,
        reweighting: EgtReweighting,
    },
}

impl LayerBlocks {
    /// Realized weight of edge `e`.
    pub fn weight(&self, e: Edge, index: usize) -> Result<Tensor> {
        let missing = || Error::InadmissibleEdge { g: e.src, h: e.dst };
        match self {
            LayerBlocks::Free(ws) => ws.get(index).cloned().ok_or_else(missing),
            LayerBlocks::Banded(bank) => bank.kernel(e.increment()).cloned().ok_or_else(missing),
            LayerBlocks::Egt { bank, reweighting } => {
                let k = bank.kernel(e.increment()).ok_or_else(missing)?;
                reweighting.d(e.dst).matmul(k)?.matmul(reweighting.d_inv(e.src))
            }
        }
    }

    pub fn block_maps(&self, edges: &EdgeSet) -> Result<Vec<BlockMap>> {
        edges
            .edges()
            .iter()
            .enumerate()
            .map(|(i, &e)| Ok(BlockMap::new(e, self.weight(e, i)?)))
            .collect()
    }

    /// Distinct trainable tensors (aliased kernels counted once).
    pub fn free_tensors(&self) -> Vec<&Tensor> {
        match self {
            LayerBlocks::Free(ws) => ws.iter().collect(),
            LayerBlocks::Banded(bank) | LayerBlocks::Egt { bank, .. } => {
                bank.kernels().map(|(_, k)| k).collect()
            }
        }
    }

    pub fn free_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            LayerBlocks::Free(ws) => ws.iter_mut().collect(),
            LayerBlocks::Banded(bank) | LayerBlocks::Egt { bank, .. } => {
                bank.kernels_mut().collect()
            }
        }
    }

    /// Index into [`free_tensors`](Self::free_tensors) used by edge `index`.
    pub fn free_index(&self, e: Edge, index: usize) -> usize {
        match self {
            LayerBlocks::Free(_) => index,
            LayerBlocks::Banded(bank) | LayerBlocks::Egt { bank, .. } => bank
                .deltas()
                .position(|d| d == e.increment())
                .expect("edge increment is in the band"),
        }
    }

    pub fn param_count(&self) -> usize {
        self.free_tensors().iter().map(|t| t.len()).sum()
    }
}

/// Banded edge set plus one shared kernel per increment.
///
/// Kernels are `N(0, 1/d_g)`; a kernel's shape must agree for every source grade it serves.
pub fn build_banded_lgt(
    grading: &Grading,
    deltas: &[i64],
    seed: u64,
) -> Result<(EdgeSet, LgtKernelBank)> {
    let edges = EdgeSet::banded(grading, deltas)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kernels = BTreeMap::new();
    for &delta in edges.band().expect("banded") {
        let mut shape: Option<(usize, usize)> = None;
        for e in edges.edges().iter().filter(|e| e.increment() == delta) {
            let s = (grading.dim(e.dst), grading.dim(e.src));
            match shape {
                None => shape = Some(s),
                Some(prev) if prev != s => {
                    return Err(Error::shape(
                        "build_banded_lgt",
                        format!("increment {delta} needs {prev:?} and {s:?}"),
                    ))
                }
                _ => {}
            }
        }
        let (dh, dg) = shape.expect("non-empty band");
        kernels.insert(delta, Tensor::randn(dh, dg, 1.0 / (dg as f64).sqrt(), &mut rng));
    }
    Ok((edges, LgtKernelBank::new(kernels)))
}
