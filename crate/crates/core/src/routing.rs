//! Candidate morphic updates, utilities, utility-augmented logits and gates.
//!
//! These are the plain-tensor forms used by diagnostics and the verification suite.
//! [`crate::model`] evaluates the same quantities on the tape for training.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graded::{BlockMap, Edge, EdgeSet, GradeNorm, GradedVector, Grading};
use crate::tape::{is_masked, MASKED};
use crate::tensor::{sigmoid, softmax_row, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GateKind {
    SoftmaxGlobal,
    SoftmaxPerDestination,
    /// `σ(ℓ̃_e / T_sm)` per edge; with zero base logits and `T_sm = 1` this is `σ(β(ΔL − τ))`.
    Logistic,
    /// One-hot at the argmax, ties to the lowest edge index.
    HardArgmax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingConfig {
    pub beta: f64,
    pub t_sm: f64,
    /// Per-edge thresholds in edge order.
    pub tau: Vec<f64>,
    pub gate: GateKind,
    pub utility_in_logits: bool,
    pub rank: usize,
}

impl RoutingConfig {
    pub fn new(edges: &EdgeSet, beta: f64, t_sm: f64, tau: f64, gate: GateKind, rank: usize) -> Result<Self> {
        let c = Self {
            beta,
            t_sm,
            tau: vec![tau; edges.len()],
            gate,
            utility_in_logits: true,
            rank,
        };
        c.validate(edges)?;
        Ok(c)
    }

    pub fn validate(&self, edges: &EdgeSet) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::config("beta", format!("must be positive, got {}", self.beta)));
        }
        if !(self.t_sm > 0.0 && self.t_sm.is_finite()) {
            return Err(Error::config("t_sm", format!("must be positive, got {}", self.t_sm)));
        }
        if self.tau.len() != edges.len() {
            return Err(Error::config(
                "tau",
                format!("{} thresholds for {} edges", self.tau.len(), edges.len()),
            ));
        }
        if let Some(t) = self.tau.iter().find(|t| !(**t >= 0.0)) {
            return Err(Error::config("tau", format!("thresholds must be nonnegative, got {t}")));
        }
        if self.rank == 0 {
            return Err(Error::config("rank", "router rank must be positive"));
        }
        Ok(())
    }
}

/// Bilinear router: `ℓ_t(e) = u_tᵀ W_e v_e(z_t)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouterParams {
    pub rank: usize,
    /// `[r, D]`, applied to the pooled causal context.
    pub proj_u: Tensor,
    /// Per grade, `[r, d_g]`.
    pub proj_v: Vec<Tensor>,
    /// Per admissible edge, `[r, r]`.
    pub w: Vec<Tensor>,
}

impl RouterParams {
    pub fn zeros(grading: &Grading, edges: &EdgeSet, rank: usize) -> Self {
        Self {
            rank,
            proj_u: Tensor::zeros(rank, grading.ambient_dim()),
            proj_v: grading.dims().iter().map(|&d| Tensor::zeros(rank, d)).collect(),
            w: vec![Tensor::zeros(rank, rank); edges.len()],
        }
    }

    /// Projections `N(0, 1/fan_in)`, bilinear forms `N(0, w_scale²)`.
    pub fn init<R: Rng + ?Sized>(
        grading: &Grading,
        edges: &EdgeSet,
        rank: usize,
        w_scale: f64,
        rng: &mut R,
    ) -> Self {
        let big_d = grading.ambient_dim();
        let proj_u = Tensor::randn(rank, big_d, 1.0 / (big_d as f64).sqrt(), rng);
        let proj_v = grading
            .dims()
            .iter()
            .map(|&d| Tensor::randn(rank, d, 1.0 / (d as f64).sqrt(), rng))
            .collect();
        let w = (0..edges.len()).map(|_| Tensor::randn(rank, rank, w_scale, rng)).collect();
        Self {
            rank,
            proj_u,
            proj_v,
            w,
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        std::iter::once(&self.proj_u)
            .chain(&self.proj_v)
            .chain(&self.w)
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        std::iter::once(&mut self.proj_u)
            .chain(&mut self.proj_v)
            .chain(&mut self.w)
            .collect()
    }
}

/// `[n, n]` operator averaging each row over positions `≤ t` of its own sequence.
///
/// Rows are laid out sequence-major with `seq_len` tokens per sequence.
pub fn pool_matrix(n: usize, seq_len: usize) -> Result<Tensor> {
    if seq_len == 0 || !n.is_multiple_of(seq_len) {
        return Err(Error::shape("pool_matrix", format!("{n} rows, sequence length {seq_len}")));
    }
    let mut p = Tensor::zeros(n, n);
    for i in 0..n {
        let start = i - i % seq_len;
        let w = 1.0 / (i - start + 1) as f64;
        for j in start..=i {
            p.set(i, j, w);
        }
    }
    Ok(p)
}

/// Context vectors `u_t = proj_u · mean_{s ≤ t} z_s`, `[n, r]`.
pub fn context_summary(router: &RouterParams, z: &GradedVector, seq_len: usize) -> Result<Tensor> {
    let pooled = pool_matrix(z.batch(), seq_len)?.matmul(&z.to_ambient())?;
    pooled.matmul(&router.proj_u.transpose())
}

/// Base logits in edge order, `[n, |E|]`.
pub fn routing_logits(router: &RouterParams, edges: &EdgeSet, z: &GradedVector, seq_len: usize) -> Result<Tensor> {
    let u = context_summary(router, z, seq_len)?;
    let n = z.batch();
    let mut out = Tensor::zeros(n, edges.len());
    for (i, e) in edges.edges().iter().enumerate() {
        let v = z.block(e.src).matmul(&router.proj_v[e.src].transpose())?;
        let uw = u.matmul(&router.w[i])?;
        for t in 0..n {
            let l: f64 = uw.row(t).iter().zip(v.row(t)).map(|(a, b)| a * b).sum();
            out.set(t, i, l);
        }
    }
    Ok(out)
}

/// Spreads edge-ordered columns onto the full `|G|×|G|` grid (column `g·|G| + h`), masking the rest.
pub fn scatter_to_grid(edges: &EdgeSet, n_grades: usize, x: &Tensor) -> Tensor {
    let mut out = Tensor::full(x.rows(), n_grades * n_grades, MASKED);
    for (i, e) in edges.edges().iter().enumerate() {
        for t in 0..x.rows() {
            out.set(t, e.src * n_grades + e.dst, x.get(t, i));
        }
    }
    out
}

/// Destination grade of every grid column.
pub fn grid_destinations(n_grades: usize) -> Vec<usize> {
    (0..n_grades * n_grades).map(|c| c % n_grades).collect()
}

/// Destination grade of every edge-ordered column.
pub fn edge_destinations(edges: &EdgeSet) -> Vec<usize> {
    edges.edges().iter().map(|e| e.dst).collect()
}

/// `ℓ̃ = ℓ + β(ΔL − τ_e)`; masked entries stay masked.
pub fn augment_logits(logits: &Tensor, utility: &Tensor, beta: f64, tau: &[f64]) -> Result<Tensor> {
    if logits.shape() != utility.shape() || tau.len() != logits.cols() {
        return Err(Error::shape(
            "augment_logits",
            format!("logits {:?}, utilities {:?}, {} thresholds", logits.shape(), utility.shape(), tau.len()),
        ));
    }
    let mut out = logits.clone();
    for t in 0..logits.rows() {
        for (j, &tj) in tau.iter().enumerate() {
            let l = logits.get(t, j);
            if !is_masked(l) {
                out.set(t, j, l + beta * (utility.get(t, j) - tj));
            }
        }
    }
    Ok(out)
}

/// Gate weights from augmented logits. `dest[j]` is the destination grade of column `j`.
pub fn gate(aug: &Tensor, dest: &[usize], kind: GateKind, t_sm: f64) -> Result<Tensor> {
    let k = aug.cols();
    if dest.len() != k {
        return Err(Error::shape("gate", format!("{k} columns, {} destinations", dest.len())));
    }
    let mut out = Tensor::zeros(aug.rows(), k);
    for t in 0..aug.rows() {
        let row: Vec<f64> = aug.row(t).iter().map(|&x| if is_masked(x) { x } else { x / t_sm }).collect();
        let on: Vec<bool> = row.iter().map(|&x| !is_masked(x)).collect();
        if !on.iter().any(|&b| b) {
            return Err(Error::EmptyEdgeSet);
        }
        let alpha: Vec<f64> = match kind {
            GateKind::SoftmaxGlobal => softmax_row(&row, Some(&on)),
            GateKind::SoftmaxPerDestination => {
                let mut a = vec![0.0; k];
                let mut dests: Vec<usize> = (0..k).filter(|&j| on[j]).map(|j| dest[j]).collect();
                dests.sort_unstable();
                dests.dedup();
                for h in dests {
                    let scope: Vec<bool> = (0..k).map(|j| on[j] && dest[j] == h).collect();
                    for (j, p) in softmax_row(&row, Some(&scope)).into_iter().enumerate() {
                        if scope[j] {
                            a[j] = p;
                        }
                    }
                }
                a
            }
            GateKind::Logistic => row
                .iter()
                .zip(&on)
                .map(|(&x, &m)| if m { sigmoid(x) } else { 0.0 })
                .collect(),
            GateKind::HardArgmax => {
                let mut best = None;
                for j in (0..k).filter(|&j| on[j]) {
                    if best.is_none_or(|b: usize| row[j] > row[b]) {
                        best = Some(j);
                    }
                }
                let mut a = vec![0.0; k];
                a[best.expect("some column is on")] = 1.0;
                a
            }
        };
        for (j, a) in alpha.into_iter().enumerate() {
            out.set(t, j, a);
        }
    }
    Ok(out)
}

/// `(z̃^(h), δ^(h)) = (φ(z^(g)), φ(z^(g)) − z^(h))` for edge `e`.
pub fn candidate_update(
    grading: &Grading,
    blocks: &[BlockMap],
    edges: &EdgeSet,
    z: &GradedVector,
    e: Edge,
) -> Result<(Tensor, Tensor)> {
    let i = edges.index_of(e)?;
    let cand = blocks[i].apply(grading, z)?;
    let delta = cand.sub(z.block(e.dst))?;
    Ok((cand, delta))
}

/// `z⁺ = z − z^(h) + z̃^(h)`: only grade `h` changes.
pub fn replace_grade(z: &GradedVector, h: usize, cand: Tensor) -> GradedVector {
    let mut out = z.clone();
    out.set_block(h, cand);
    out
}

/// Per-token `ΔL_t = L(z_t) − L(z_t⁺)` for edge `e`, as a column `[n, 1]`.
pub fn instantaneous_utility<F>(
    lm_loss: F,
    grading: &Grading,
    blocks: &[BlockMap],
    edges: &EdgeSet,
    z: &GradedVector,
    e: Edge,
) -> Result<Tensor>
where
    F: Fn(&GradedVector) -> Result<Vec<f64>>,
{
    let (cand, _) = candidate_update(grading, blocks, edges, z, e)?;
    let base = lm_loss(z)?;
    let plus = lm_loss(&replace_grade(z, e.dst, cand))?;
    if let Some(bad) = base.iter().chain(&plus).find(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("language-model loss {bad} on edge {e}")));
    }
    let dl: Vec<f64> = base.iter().zip(&plus).map(|(b, p)| b - p).collect();
    Tensor::matrix(dl.len(), 1, dl)
}

/// `z^(h) + Σ_{g→h} α(h←g)(φ(z^(g)) − z^(h))` per grade, then grade-wise normalization.
///
/// Grades without incoming edges are copied through untouched, also by the norm.
pub fn morphic_update(
    edges: &EdgeSet,
    z: &GradedVector,
    candidates: &[Tensor],
    alpha: &Tensor,
    norm: Option<&GradeNorm>,
) -> Result<GradedVector> {
    let mut out = z.clone();
    for h in 0..z.blocks().len() {
        let incoming = edges.incoming(h);
        if incoming.is_empty() {
            continue;
        }
        let zh = z.block(h);
        let mut acc = zh.clone();
        for &i in &incoming {
            add_gated(&mut acc, &candidates[i], zh, alpha, i, 1.0);
        }
        let acc = match norm {
            Some(n) => n.apply_block(h, &acc),
            None => acc,
        };
        out.set_block(h, acc);
    }
    Ok(out)
}

fn add_gated(acc: &mut Tensor, cand: &Tensor, zh: &Tensor, alpha: &Tensor, i: usize, eta: f64) {
    let d = acc.cols();
    for t in 0..acc.rows() {
        let a = eta * alpha.get(t, i);
        for j in 0..d {
            let v = acc.get(t, j) + a * (cand.get(t, j) - zh.get(t, j));
            acc.set(t, j, v);
        }
    }
}

/// `z + η Σ_e α_e (φ_e(z^(g)) − z^(h))`, no normalization.
pub fn step_scaled_update(
    edges: &EdgeSet,
    z: &GradedVector,
    candidates: &[Tensor],
    alpha: &Tensor,
    eta: f64,
) -> Result<GradedVector> {
    let mut out = z.clone();
    for h in 0..z.blocks().len() {
        let incoming = edges.incoming(h);
        if incoming.is_empty() {
            continue;
        }
        let mut acc = z.block(h).clone();
        for &i in &incoming {
            add_gated(&mut acc, &candidates[i], z.block(h), alpha, i, eta);
        }
        out.set_block(h, acc);
    }
    Ok(out)
}

/// Per-token, per-edge routing quantities of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingState {
    pub logits: Tensor,
    pub utilities: Tensor,
    pub augmented: Tensor,
    pub alpha: Tensor,
    /// Candidate `z̃^(h)` per edge.
    pub candidates: Vec<Tensor>,
}

/// Full routing pass of one layer on plain tensors, utilities against the common pre-update state.
#[allow(clippy::too_many_arguments)]
pub fn route<F>(
    grading: &Grading,
    edges: &EdgeSet,
    blocks: &[BlockMap],
    router: &RouterParams,
    config: &RoutingConfig,
    z: &GradedVector,
    seq_len: usize,
    lm_loss: F,
) -> Result<RoutingState>
where
    F: Fn(&GradedVector) -> Result<Vec<f64>>,
{
    config.validate(edges)?;
    let logits = routing_logits(router, edges, z, seq_len)?;
    let n = z.batch();
    let base = lm_loss(z)?;
    let mut utilities = Tensor::zeros(n, edges.len());
    let mut candidates = Vec::with_capacity(edges.len());
    for (i, &e) in edges.edges().iter().enumerate() {
        let cand = blocks[i].apply(grading, z)?;
        let plus = lm_loss(&replace_grade(z, e.dst, cand.clone()))?;
        for t in 0..n {
            let dl = base[t] - plus[t];
            if !dl.is_finite() {
                return Err(Error::NonFinite(format!("utility on edge {e}")));
            }
            utilities.set(t, i, dl);
        }
        candidates.push(cand);
    }
    let augmented = if config.utility_in_logits {
        augment_logits(&logits, &utilities, config.beta, &config.tau)?
    } else {
        logits.clone()
    };
    let alpha = gate(&augmented, &edge_destinations(edges), config.gate, config.t_sm)?;
    Ok(RoutingState {
        logits,
        utilities,
        augmented,
        alpha,
        candidates,
    })
}

/// One routing-trace line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub layer: usize,
    pub token: usize,
    pub edge: String,
    pub logit: f64,
    pub utility: f64,
    pub augmented: f64,
    pub alpha: f64,
}

impl RoutingState {
    pub fn trace(&self, layer: usize, edges: &EdgeSet) -> Vec<TraceRecord> {
        let mut out = Vec::with_capacity(self.alpha.len());
        for t in 0..self.alpha.rows() {
            for (i, e) in edges.edges().iter().enumerate() {
                out.push(TraceRecord {
                    layer,
                    token: t,
                    edge: e.to_string(),
                    logit: self.logits.get(t, i),
                    utility: self.utilities.get(t, i),
                    augmented: self.augmented.get(t, i),
                    alpha: self.alpha.get(t, i),
                });
            }
        }
        out
    }
}

/// Writes records as JSON lines.
pub fn write_jsonl<W: Write, T: Serialize>(mut w: W, records: &[T]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graded::NormKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (Grading, EdgeSet, Vec<BlockMap>, GradedVector) {
        let g = Grading::uniform(3, 2).unwrap();
        let e = EdgeSet::new(&g, [Edge::new(0, 1), Edge::new(1, 1), Edge::new(0, 2)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let blocks = e
            .edges()
            .iter()
            .map(|&ed| BlockMap::new(ed, Tensor::randn(2, 2, 1.0, &mut rng)))
            .collect();
        let z = GradedVector::randn(&g, 4, 1.0, &mut rng);
        (g, e, blocks, z)
    }

    #[test]
    fn identity_candidate_leaves_state_unchanged() {
        let g = Grading::uniform(2, 3).unwrap();
        let e = EdgeSet::new(&g, [Edge::new(1, 1)]).unwrap();
        let blocks = vec![BlockMap::new(Edge::new(1, 1), Tensor::eye(3))];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = GradedVector::randn(&g, 3, 1.0, &mut rng);
        let (cand, delta) = candidate_update(&g, &blocks, &e, &z, Edge::new(1, 1)).unwrap();
        assert_eq!(delta.norm(), 0.0);
        assert_eq!(replace_grade(&z, 1, cand), z);
        let zero = GradedVector::zeros(&g, 3);
        let (c0, _) = candidate_update(&g, &blocks, &e, &zero, Edge::new(1, 1)).unwrap();
        assert_eq!(c0.norm(), 0.0);
        assert!(candidate_update(&g, &blocks, &e, &z, Edge::new(0, 1)).is_err());
    }

    #[test]
    fn zero_router_gives_uniform_gate() {
        let (g, e, _, z) = setup();
        let r = RouterParams::zeros(&g, &e, 3);
        let l = routing_logits(&r, &e, &z, 2).unwrap();
        assert!(l.data().iter().all(|&x| x == 0.0));
        let a = gate(&l, &edge_destinations(&e), GateKind::SoftmaxGlobal, 1.0).unwrap();
        assert!(a.data().iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn grid_masking_is_exact() {
        let (g, e, _, z) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = RouterParams::init(&g, &e, 3, 1.0, &mut rng);
        let l = scatter_to_grid(&e, 3, &routing_logits(&r, &e, &z, 4).unwrap());
        for kind in [GateKind::SoftmaxGlobal, GateKind::SoftmaxPerDestination, GateKind::Logistic, GateKind::HardArgmax] {
            let a = gate(&l, &grid_destinations(3), kind, 0.5).unwrap();
            for t in 0..a.rows() {
                for c in 0..9 {
                    if !e.contains(Edge::new(c / 3, c % 3)) {
                        assert_eq!(a.get(t, c), 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn gate_variants() {
        let eq = Tensor::from_rows(&[&[0.3, 0.3, 0.3, 0.3]]);
        let a = gate(&eq, &[0, 0, 1, 1], GateKind::SoftmaxGlobal, 1.0).unwrap();
        assert!(a.data().iter().all(|&x| (x - 0.25).abs() < 1e-15));
        let a = gate(&eq, &[0, 0, 1, 1], GateKind::SoftmaxPerDestination, 1.0).unwrap();
        assert!(a.data().iter().all(|&x| (x - 0.5).abs() < 1e-15));
        let h = gate(&eq, &[0, 0, 1, 1], GateKind::HardArgmax, 1.0).unwrap();
        assert_eq!(h.data(), &[1.0, 0.0, 0.0, 0.0]);
        let big = Tensor::from_rows(&[&[50.0, -50.0]]);
        let s = gate(&big, &[0, 0], GateKind::Logistic, 1.0).unwrap();
        assert!(s.get(0, 0) > 1.0 - 1e-12 && s.get(0, 1) < 1e-12);
        assert!(matches!(
            gate(&Tensor::from_rows(&[&[MASKED]]), &[0], GateKind::SoftmaxGlobal, 1.0),
            Err(Error::EmptyEdgeSet)
        ));
    }

    #[test]
    fn augmentation_identities() {
        let l = Tensor::from_rows(&[&[0.5, -1.0]]);
        let dl = Tensor::from_rows(&[&[0.2, 0.7]]);
        assert_eq!(augment_logits(&l, &dl, 0.0, &[0.1, 0.1]).unwrap(), l);
        assert_eq!(augment_logits(&l, &dl, 3.0, &[0.2, 0.7]).unwrap(), l);
    }

    #[test]
    fn morphic_update_special_cases() {
        let (_, e, _, z) = setup();
        let cands: Vec<Tensor> = (0..3).map(|_| Tensor::full(4, 2, 9.0)).collect();
        let zero = Tensor::zeros(4, 3);
        assert_eq!(morphic_update(&e, &z, &cands, &zero, None).unwrap(), z);
        let out = morphic_update(&e, &z, &cands, &Tensor::full(4, 3, 0.5), None).unwrap();
        assert_eq!(out.block(0), z.block(0));
        let g = Grading::uniform(3, 2).unwrap();
        let ln = GradeNorm::new(&g, NormKind::LayerNorm, 1e-5);
        let out = morphic_update(&e, &z, &cands, &Tensor::full(4, 3, 0.5), Some(&ln)).unwrap();
        assert_eq!(out.block(0), z.block(0));
        assert_eq!(step_scaled_update(&e, &z, &cands, &Tensor::full(4, 3, 0.5), 0.0).unwrap(), z);
    }

    #[test]
    fn trace_has_one_record_per_token_edge() {
        let (g, e, blocks, z) = setup();
        let r = RouterParams::zeros(&g, &e, 2);
        let cfg = RoutingConfig::new(&e, 1.0, 1.0, 0.0, GateKind::SoftmaxGlobal, 2).unwrap();
        let loss = |s: &GradedVector| Ok(s.to_ambient().data().chunks(6).map(|r| r.iter().map(|x| x * x).sum()).collect());
        let st = route(&g, &e, &blocks, &r, &cfg, &z, 4, loss).unwrap();
        let tr = st.trace(0, &e);
        assert_eq!(tr.len(), 12);
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &tr).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 12);
    }
}
