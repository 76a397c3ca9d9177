//! Gradings, graded vectors, admissible edges and block maps.
//!
//! Grades are integer indices `0..|G|` with string aliases. The ambient layout is
//! the concatenation of grade blocks in index order.

mod checkpoint;
mod counts;
mod fit;
mod lgt;
mod norm;

pub use checkpoint::{Checkpoint, LayerRecord, CHECKPOINT_VERSION, LAYER_KIND};
pub use counts::{
    param_count_attention, param_count_ffn, param_count_general, AttentionBlockParams,
    FfnBlockParams,
};
pub use fit::{fit_blocks_joint, fit_blocks_least_squares};
pub use lgt::{
    build_banded_lgt, egt_conjugate, ConjugateDirection, EgtReweighting, LayerBlocks,
    LgtKernelBank,
};
pub use norm::{graded_normalize, GradeNorm, NormKind};

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "GradingRepr")]
pub struct Grading {
    labels: Vec<String>,
    dims: Vec<usize>,
    #[serde(skip)]
    offsets: Vec<usize>,
}

impl Grading {
    pub fn new<S: AsRef<str>>(grades: &[(S, usize)]) -> Result<Self> {
        if grades.is_empty() {
            return Err(Error::config("grading", "at least one grade"));
        }
        let mut labels = Vec::with_capacity(grades.len());
        let mut dims = Vec::with_capacity(grades.len());
        for (label, d) in grades {
            let label = label.as_ref().to_string();
            if *d == 0 {
                return Err(Error::config("grading", format!("grade `{label}` has dimension 0")));
            }
            if labels.contains(&label) {
                return Err(Error::config("grading", format!("duplicate grade `{label}`")));
            }
            labels.push(label);
            dims.push(*d);
        }
        Ok(Self::from_parts(labels, dims))
    }

    /// `n` grades of dimension `d`, labelled `g0, g1, ...`.
    pub fn uniform(n: usize, d: usize) -> Result<Self> {
        let grades: Vec<(String, usize)> = (0..n).map(|g| (format!("g{g}"), d)).collect();
        Self::new(&grades)
    }

    fn from_parts(labels: Vec<String>, dims: Vec<usize>) -> Self {
        let offsets = dims
            .iter()
            .scan(0, |acc, &d| {
                let o = *acc;
                *acc += d;
                Some(o)
            })
            .collect();
        Self {
            labels,
            dims,
            offsets,
        }
    }

    pub fn len(&self) -> usize {
        self.dims.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dims.is_empty()
    }

    pub fn dim(&self, g: usize) -> usize {
        self.dims[g]
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn offset(&self, g: usize) -> usize {
        self.offsets[g]
    }

    pub fn ambient_dim(&self) -> usize {
        self.dims.iter().sum()
    }

    pub fn label(&self, g: usize) -> &str {
        &self.labels[g]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn check(&self, g: usize) -> Result<()> {
        if g < self.len() {
            Ok(())
        } else {
            Err(Error::UnknownGrade(g.to_string()))
        }
    }

    /// Resolves an alias or a decimal index.
    pub fn resolve(&self, name: &str) -> Result<usize> {
        if let Some(g) = self.labels.iter().position(|l| l == name) {
            return Ok(g);
        }
        match name.parse::<usize>() {
            Ok(g) if g < self.len() => Ok(g),
            _ => Err(Error::UnknownGrade(name.to_string())),
        }
    }

    /// Parses `g:h` (source then destination), each side an alias or an index.
    pub fn resolve_edge(&self, spec: &str) -> Result<Edge> {
        let (g, h) = spec
            .split_once(':')
            .ok_or_else(|| Error::config("edge", format!("expected `g:h`, got `{spec}`")))?;
        Ok(Edge::new(self.resolve(g.trim())?, self.resolve(h.trim())?))
    }

    /// Constant grade dimension, if there is one.
    pub fn constant_dim(&self) -> Option<usize> {
        let d = self.dims[0];
        self.dims.iter().all(|&x| x == d).then_some(d)
    }
}

#[derive(Deserialize)]
struct GradingRepr {
    labels: Vec<String>,
    dims: Vec<usize>,
}

impl From<GradingRepr> for Grading {
    fn from(r: GradingRepr) -> Self {
        Self::from_parts(r.labels, r.dims)
    }
}

/// Per-grade blocks of a batch of hidden states, each `[batch, d_g]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradedVector {
    blocks: Vec<Tensor>,
}

impl GradedVector {
    pub fn new(grading: &Grading, blocks: Vec<Tensor>) -> Result<Self> {
        if blocks.len() != grading.len() {
            return Err(Error::shape(
                "graded_vector",
                format!("{} blocks for {} grades", blocks.len(), grading.len()),
            ));
        }
        let n = blocks[0].rows();
        for (g, b) in blocks.iter().enumerate() {
            if b.cols() != grading.dim(g) || b.rows() != n {
                return Err(Error::shape(
                    "graded_vector",
                    format!(
                        "grade {g} block {:?}, expected [{n}, {}]",
                        b.shape(),
                        grading.dim(g)
                    ),
                ));
            }
        }
        Ok(Self { blocks })
    }

    pub fn zeros(grading: &Grading, batch: usize) -> Self {
        Self {
            blocks: grading.dims().iter().map(|&d| Tensor::zeros(batch, d)).collect(),
        }
    }

    pub fn randn<R: Rng + ?Sized>(grading: &Grading, batch: usize, scale: f64, rng: &mut R) -> Self {
        Self {
            blocks: grading
                .dims()
                .iter()
                .map(|&d| Tensor::randn(batch, d, scale, rng))
                .collect(),
        }
    }

    /// Splits an ambient `[batch, Σ d_g]` tensor along the grading.
    pub fn from_ambient(grading: &Grading, x: &Tensor) -> Result<Self> {
        if x.cols() != grading.ambient_dim() {
            return Err(Error::shape(
                "split",
                format!("ambient width {} vs grading {}", x.cols(), grading.ambient_dim()),
            ));
        }
        let blocks = (0..grading.len())
            .map(|g| x.slice_cols(grading.offset(g), grading.dim(g)))
            .collect::<Result<_>>()?;
        Ok(Self { blocks })
    }

    pub fn to_ambient(&self) -> Tensor {
        let refs: Vec<&Tensor> = self.blocks.iter().collect();
        Tensor::concat_cols(&refs).expect("blocks share the batch extent")
    }

    /// `x` placed in grade `g`, zero elsewhere.
    pub fn include(grading: &Grading, x: &Tensor, g: usize) -> Result<Self> {
        grading.check(g)?;
        if x.cols() != grading.dim(g) {
            return Err(Error::shape(
                "include",
                format!("width {} into grade {g} of dim {}", x.cols(), grading.dim(g)),
            ));
        }
        let mut z = Self::zeros(grading, x.rows());
        z.blocks[g] = x.clone();
        Ok(z)
    }

    pub fn project(&self, g: usize) -> Result<&Tensor> {
        self.blocks.get(g).ok_or_else(|| Error::UnknownGrade(g.to_string()))
    }

    pub fn block(&self, g: usize) -> &Tensor {
        &self.blocks[g]
    }

    pub fn blocks(&self) -> &[Tensor] {
        &self.blocks
    }

    pub fn set_block(&mut self, g: usize, x: Tensor) {
        assert_eq!(x.shape(), self.blocks[g].shape(), "block shape");
        self.blocks[g] = x;
    }

    pub fn batch(&self) -> usize {
        self.blocks[0].rows()
    }

    /// Rows `[start, start + len)` of every block.
    pub fn rows(&self, start: usize, len: usize) -> Self {
        Self {
            blocks: self
                .blocks
                .iter()
                .map(|b| {
                    let d = b.cols();
                    Tensor::matrix(len, d, b.data()[start * d..(start + len) * d].to_vec())
                        .expect("row range")
                })
                .collect(),
        }
    }
}

/// An ordered grade transition `src -> dst`, written `φ_{dst←src}`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
}

impl Edge {
    pub fn new(src: usize, dst: usize) -> Self {
        Self { src, dst }
    }

    pub fn increment(self) -> i64 {
        self.dst as i64 - self.src as i64
    }
}

impl fmt::Display for Edge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.src, self.dst)
    }
}

/// Admissible edges in a fixed order; the order defines edge indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeSet {
    edges: Vec<Edge>,
    band: Option<Vec<i64>>,
}

impl EdgeSet {
    pub fn new(grading: &Grading, edges: impl IntoIterator<Item = Edge>) -> Result<Self> {
        let mut out: Vec<Edge> = Vec::new();
        for e in edges {
            grading.check(e.src)?;
            grading.check(e.dst)?;
            if !out.contains(&e) {
                out.push(e);
            }
        }
        Ok(Self {
            edges: out,
            band: None,
        })
    }

    /// `(g, h)` admissible iff `h - g ∈ Δ`. Edges are ordered by increment, then source.
    pub fn banded(grading: &Grading, deltas: &[i64]) -> Result<Self> {
        let n = grading.len() as i64;
        let mut edges = Vec::new();
        let mut band = Vec::new();
        for &delta in deltas {
            if band.contains(&delta) {
                continue;
            }
            let before = edges.len();
            for g in 0..n {
                let h = g + delta;
                if (0..n).contains(&h) {
                    edges.push(Edge::new(g as usize, h as usize));
                }
            }
            if edges.len() == before {
                return Err(Error::BandOutOfRange(delta));
            }
            band.push(delta);
        }
        Ok(Self {
            edges,
            band: Some(band),
        })
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn band(&self) -> Option<&[i64]> {
        self.band.as_deref()
    }

    pub fn contains(&self, e: Edge) -> bool {
        self.edges.contains(&e)
    }

    pub fn index_of(&self, e: Edge) -> Result<usize> {
        self.edges
            .iter()
            .position(|&x| x == e)
            .ok_or(Error::InadmissibleEdge { g: e.src, h: e.dst })
    }

    /// Edge indices with destination `h`.
    pub fn incoming(&self, h: usize) -> Vec<usize> {
        (0..self.edges.len()).filter(|&i| self.edges[i].dst == h).collect()
    }

    pub fn get(&self, i: usize) -> Edge {
        self.edges[i]
    }
}

/// One linear morphism `φ_{h←g}: V_g → V_h` with weight `[d_h, d_g]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockMap {
    pub edge: Edge,
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl BlockMap {
    pub fn new(edge: Edge, weight: Tensor) -> Self {
        Self {
            edge,
            weight,
            bias: None,
        }
    }

    /// `φ(z^(g))` for every row of the batch.
    pub fn apply(&self, grading: &Grading, z: &GradedVector) -> Result<Tensor> {
        grading.check(self.edge.src)?;
        grading.check(self.edge.dst)?;
        let (dh, dg) = (grading.dim(self.edge.dst), grading.dim(self.edge.src));
        if self.weight.shape() != [dh, dg] {
            return Err(Error::shape(
                "apply_block",
                format!(
                    "weight {:?} for edge {} needs [{dh}, {dg}]",
                    self.weight.shape(),
                    self.edge
                ),
            ));
        }
        let x = z.project(self.edge.src)?;
        let mut y = x.matmul(&self.weight.transpose())?;
        if let Some(b) = &self.bias {
            for i in 0..y.rows() {
                for j in 0..dh {
                    let v = y.get(i, j) + b.data()[j];
                    y.set(i, j, v);
                }
            }
        }
        Ok(y)
    }
}

/// `(ψ∘φ)_{k←g} = Σ_h ψ_{k←h} φ_{h←g}`. Composite edges are ordered by first appearance.
pub fn compose_blocks(psi: &[BlockMap], phi: &[BlockMap]) -> Result<Vec<BlockMap>> {
    if psi.iter().chain(phi).any(|b| b.bias.is_some()) {
        return Err(Error::config("bias", "composition is defined for linear blocks"));
    }
    let mut out: Vec<BlockMap> = Vec::new();
    for f in phi {
        for p in psi.iter().filter(|p| p.edge.src == f.edge.dst) {
            let w = p.weight.matmul(&f.weight)?;
            let e = Edge::new(f.edge.src, p.edge.dst);
            match out.iter_mut().find(|b| b.edge == e) {
                Some(b) => b.weight = b.weight.add(&w)?,
                None => out.push(BlockMap::new(e, w)),
            }
        }
    }
    Ok(out)
}

/// Ambient `[Σ d, Σ d]` matrix of a block family; rows index destinations.
pub fn assemble_dense(grading: &Grading, blocks: &[BlockMap]) -> Result<Tensor> {
    let n = grading.ambient_dim();
    let mut m = Tensor::zeros(n, n);
    for b in blocks {
        let (ro, co) = (grading.offset(b.edge.dst), grading.offset(b.edge.src));
        let (dh, dg) = (grading.dim(b.edge.dst), grading.dim(b.edge.src));
        if b.weight.shape() != [dh, dg] {
            return Err(Error::shape(
                "assemble",
                format!("weight {:?} for edge {}", b.weight.shape(), b.edge),
            ));
        }
        for i in 0..dh {
            for j in 0..dg {
                let v = m.get(ro + i, co + j) + b.weight.get(i, j);
                m.set(ro + i, co + j, v);
            }
        }
    }
    Ok(m)
}
