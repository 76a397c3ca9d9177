//! Stacked graded layers with utility-aware routing, evaluated on the tape.
//!
//! Each layer scores every admissible edge by the drop in next-token loss its candidate
//! would cause, adds that (detached) utility to the bilinear router logits, gates, and
//! applies the routed update. The shared readout supplies the loss at every layer.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graded::{
    BlockMap, Checkpoint, EdgeSet, EgtReweighting, GradeNorm, GradedVector, Grading, LayerBlocks, NormKind,
};
use crate::routing::{pool_matrix, GateKind, RouterParams, RoutingConfig, RoutingState};
use crate::tape::{Act, Tape, Var};
use crate::tensor::Tensor;

pub const MODEL_KIND: &str = "graded-model";

/// Linear head on the concatenation of the read grades: `logits = z_read Rᵀ + b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Readout {
    /// `[C, Σ_{g read} d_g]`.
    pub weight: Tensor,
    /// `[1, C]`.
    pub bias: Tensor,
    /// Grades the head reads, in index order.
    pub grades: Vec<usize>,
}

impl Readout {
    /// Reads every grade.
    pub fn new(grading: &Grading, weight: Tensor) -> Result<Self> {
        Self::on_grades(grading, (0..grading.len()).collect(), weight)
    }

    pub fn on_grades(grading: &Grading, mut grades: Vec<usize>, weight: Tensor) -> Result<Self> {
        grades.sort_unstable();
        grades.dedup();
        for &g in &grades {
            grading.check(g)?;
        }
        let width: usize = grades.iter().map(|&g| grading.dim(g)).sum();
        if weight.cols() != width || grades.is_empty() {
            return Err(Error::shape(
                "readout",
                format!("{:?} against read width {width}", weight.shape()),
            ));
        }
        let c = weight.rows();
        Ok(Self {
            weight,
            bias: Tensor::zeros(1, c),
            grades,
        })
    }

    pub fn classes(&self) -> usize {
        self.weight.rows()
    }

    pub fn logits(&self, z: &GradedVector) -> Result<Tensor> {
        let parts: Vec<&Tensor> = self.grades.iter().map(|&g| z.block(g)).collect();
        let x = Tensor::concat_cols(&parts)?;
        let mut logits = x.matmul(&self.weight.transpose())?;
        for t in 0..logits.rows() {
            for (j, b) in self.bias.data().iter().enumerate() {
                logits.set(t, j, logits.get(t, j) + b);
            }
        }
        Ok(logits)
    }

    /// Per-token cross-entropy on plain tensors.
    pub fn losses(&self, z: &GradedVector, targets: &[usize]) -> Result<Vec<f64>> {
        let logits = self.logits(z)?;
        Ok((0..logits.rows())
            .map(|t| crate::tensor::cross_entropy_row(logits.row(t), targets[t]))
            .collect())
    }
}

/// One utility-gated layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradedLayer {
    pub edges: EdgeSet,
    pub blocks: LayerBlocks,
    /// Per-edge `[1, d_h]` biases, or bias-free blocks.
    pub bias: Option<Vec<Tensor>>,
    pub router: RouterParams,
    pub routing: RoutingConfig,
    pub norm: GradeNorm,
}

impl GradedLayer {
    /// Free blocks `N(0, 1/d_g)`, small router, bias-free, LayerNorm.
    pub fn init(grading: &Grading, edges: EdgeSet, routing: RoutingConfig, norm: NormKind, seed: u64) -> Result<Self> {
        routing.validate(&edges)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blocks = LayerBlocks::Free(
            edges
                .edges()
                .iter()
                .map(|e| {
                    let dg = grading.dim(e.src);
                    Tensor::randn(grading.dim(e.dst), dg, 1.0 / (dg as f64).sqrt(), &mut rng)
                })
                .collect(),
        );
        let router = RouterParams::init(grading, &edges, routing.rank, 0.02, &mut rng);
        Ok(Self {
            edges,
            blocks,
            bias: None,
            router,
            routing,
            norm: GradeNorm::new(grading, norm, 1e-5),
        })
    }

    pub fn block_maps(&self) -> Result<Vec<BlockMap>> {
        let mut maps = self.blocks.block_maps(&self.edges)?;
        if let Some(bias) = &self.bias {
            for (m, b) in maps.iter_mut().zip(bias) {
                m.bias = Some(b.clone());
            }
        }
        Ok(maps)
    }
}

/// Token states, next-token targets and sequence layout (rows are sequence-major).
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub z0: GradedVector,
    pub targets: Vec<usize>,
    pub seq_len: usize,
}

impl Batch {
    pub fn new(z0: GradedVector, targets: Vec<usize>, seq_len: usize) -> Result<Self> {
        if targets.len() != z0.batch() || seq_len == 0 || !z0.batch().is_multiple_of(seq_len) {
            return Err(Error::shape(
                "batch",
                format!("{} rows, {} targets, sequence length {seq_len}", z0.batch(), targets.len()),
            ));
        }
        Ok(Self { z0, targets, seq_len })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// Where utilities entering the routing logits come from.
#[derive(Clone, Debug, Default, PartialEq)]
pub enum UtilitySource {
    /// Recomputed at the current parameters with the gradient severed.
    #[default]
    Detached,
    /// Fixed per-layer router margins `ΔL − τ`, `[n, |E|]`. Differentiating the resulting
    /// function reproduces the detached gradient exactly, which is what finite differences
    /// need to compare against.
    Frozen(Vec<Tensor>),
}

/// Tape handles for one layer.
#[derive(Clone, Debug)]
pub struct LayerVars {
    pub logits: Var,
    /// Differentiable utilities `[n, |E|]`.
    pub utilities: Var,
    pub augmented: Var,
    pub alpha: Var,
    /// Thresholds `[1, |E|]`.
    pub tau: Var,
    pub candidates: Vec<Var>,
}

/// Result of a forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub params: Vec<Var>,
    pub layers: Vec<LayerVars>,
    /// Per-token loss at the final state, `[n, 1]`.
    pub token_loss: Var,
    /// `L_LM`, scalar mean.
    pub lm: Var,
    pub n_tokens: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradedModel {
    pub grading: Grading,
    pub layers: Vec<GradedLayer>,
    pub readout: Readout,
    /// Parameter names excluded from updates.
    pub frozen: BTreeSet<String>,
}

impl GradedModel {
    pub fn new(grading: Grading, layers: Vec<GradedLayer>, readout: Readout) -> Result<Self> {
        let width: usize = readout.grades.iter().map(|&g| grading.dim(g)).sum();
        if readout.weight.cols() != width {
            return Err(Error::shape(
                "readout",
                format!("{:?} against read width {width}", readout.weight.shape()),
            ));
        }
        Ok(Self {
            grading,
            layers,
            readout,
            frozen: BTreeSet::new(),
        })
    }

    /// Named parameters in a fixed order. Thresholds appear as `[1, |E|]` rows.
    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            let p = format!("layer{l}");
            match &layer.blocks {
                LayerBlocks::Free(ws) => {
                    for (e, w) in layer.edges.edges().iter().zip(ws) {
                        out.push((format!("{p}.block[{e}]"), w.clone()));
                    }
                }
                LayerBlocks::Banded(bank) | LayerBlocks::Egt { bank, .. } => {
                    for (d, k) in bank.kernels() {
                        out.push((format!("{p}.kernel[{d:+}]"), k.clone()));
                    }
                }
            }
            if let Some(bias) = &layer.bias {
                for (e, b) in layer.edges.edges().iter().zip(bias) {
                    out.push((format!("{p}.bias[{e}]"), b.clone()));
                }
            }
            out.push((format!("{p}.router.proj_u"), layer.router.proj_u.clone()));
            for (g, v) in layer.router.proj_v.iter().enumerate() {
                out.push((format!("{p}.router.proj_v[{}]", self.grading.label(g)), v.clone()));
            }
            for (e, w) in layer.edges.edges().iter().zip(&layer.router.w) {
                out.push((format!("{p}.router.w[{e}]"), w.clone()));
            }
            out.push((format!("{p}.tau"), Tensor::row_vector(&layer.routing.tau)));
            if layer.norm.kind != NormKind::None {
                for (g, t) in layer.norm.gamma.iter().enumerate() {
                    out.push((format!("{p}.norm.gamma[{}]", self.grading.label(g)), t.clone()));
                }
                if layer.norm.kind == NormKind::LayerNorm {
                    for (g, t) in layer.norm.beta.iter().enumerate() {
                        out.push((format!("{p}.norm.beta[{}]", self.grading.label(g)), t.clone()));
                    }
                }
            }
        }
        out.push(("readout.weight".into(), self.readout.weight.clone()));
        out.push(("readout.bias".into(), self.readout.bias.clone()));
        out
    }

    pub fn param_names(&self) -> Vec<String> {
        self.named_params().into_iter().map(|(n, _)| n).collect()
    }

    pub fn params(&self) -> Vec<Tensor> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(Tensor::len).sum()
    }

    /// Writes parameters back in [`named_params`](Self::named_params) order.
    pub fn set_params(&mut self, params: &[Tensor]) -> Result<()> {
        let current = self.params();
        if current.len() != params.len() {
            return Err(Error::shape("set_params", format!("{} tensors, expected {}", params.len(), current.len())));
        }
        for (i, (a, b)) in current.iter().zip(params).enumerate() {
            if a.shape() != b.shape() {
                return Err(Error::shape("set_params", format!("tensor {i}: {:?} vs {:?}", b.shape(), a.shape())));
            }
        }
        let mut it = params.iter().cloned();
        let mut next = || it.next().expect("length checked");
        for layer in &mut self.layers {
            match &mut layer.blocks {
                LayerBlocks::Free(ws) => ws.iter_mut().for_each(|w| *w = next()),
                LayerBlocks::Banded(bank) | LayerBlocks::Egt { bank, .. } => {
                    bank.kernels_mut().for_each(|k| *k = next())
                }
            }
            if let Some(bias) = &mut layer.bias {
                bias.iter_mut().for_each(|b| *b = next());
            }
            layer.router.tensors_mut().into_iter().for_each(|t| *t = next());
            layer.routing.tau = next().into_data();
            if layer.norm.kind != NormKind::None {
                layer.norm.gamma.iter_mut().for_each(|t| *t = next());
                if layer.norm.kind == NormKind::LayerNorm {
                    layer.norm.beta.iter_mut().for_each(|t| *t = next());
                }
            }
        }
        self.readout.weight = next();
        self.readout.bias = next();
        Ok(())
    }

    /// Flat parameter vector, concatenated in order.
    pub fn flat_params(&self) -> Tensor {
        let data: Vec<f64> = self.params().into_iter().flat_map(Tensor::into_data).collect();
        let n = data.len();
        Tensor::matrix(1, n, data).expect("flat")
    }

    pub fn set_flat_params(&mut self, flat: &Tensor) -> Result<()> {
        let mut offset = 0;
        let mut params = self.params();
        if flat.len() != params.iter().map(Tensor::len).sum::<usize>() {
            return Err(Error::shape("set_flat_params", format!("{} values", flat.len())));
        }
        for p in &mut params {
            let n = p.len();
            p.data_mut().copy_from_slice(&flat.data()[offset..offset + n]);
            offset += n;
        }
        self.set_params(&params)
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    /// Mask over [`named_params`](Self::named_params): `true` where updates are allowed.
    pub fn trainable_mask(&self, learn_thresholds: bool) -> Vec<bool> {
        self.param_names()
            .iter()
            .map(|n| !self.is_frozen(n) && (learn_thresholds || !n.ends_with(".tau")))
            .collect()
    }

    /// Builds the computation on `tape` with every parameter as a leaf.
    pub fn forward(&self, tape: &mut Tape, batch: &Batch, utilities: &UtilitySource) -> Result<Forward> {
        let params: Vec<Var> = self.params().into_iter().map(|t| tape.leaf(t)).collect();
        self.forward_with(tape, batch, utilities, &params)
    }

    /// Forward pass reading parameters from existing tape variables (order of [`named_params`]).
    pub fn forward_with(
        &self,
        tape: &mut Tape,
        batch: &Batch,
        utilities: &UtilitySource,
        params: &[Var],
    ) -> Result<Forward> {
        self.forward_impl(tape, batch, utilities, params, &[])
    }

    /// Per-token final losses with the gates of the listed `(layer, edge)` pairs forced to 0.
    pub fn ablated_token_losses(&self, batch: &Batch, ablated: &[(usize, usize)]) -> Result<Vec<f64>> {
        for &(l, e) in ablated {
            if self.layers.get(l).is_none_or(|layer| e >= layer.edges.len()) {
                return Err(Error::config("edge", format!("no edge {e} in layer {l}")));
            }
        }
        let mut tape = Tape::new();
        let params: Vec<Var> = self.params().into_iter().map(|t| tape.constant(t)).collect();
        let fwd = self.forward_impl(&mut tape, batch, &UtilitySource::Detached, &params, ablated)?;
        Ok(tape.value(fwd.token_loss).data().to_vec())
    }

    fn forward_impl(
        &self,
        tape: &mut Tape,
        batch: &Batch,
        utilities: &UtilitySource,
        params: &[Var],
        ablated: &[(usize, usize)],
    ) -> Result<Forward> {
        let n = batch.len();
        if batch.z0.blocks().len() != self.grading.len() {
            return Err(Error::shape("forward", "state grading does not match the model"));
        }
        if let Some(&bad) = batch.targets.iter().find(|&&y| y >= self.readout.classes()) {
            return Err(Error::shape("forward", format!("target {bad} outside {} classes", self.readout.classes())));
        }
        if let UtilitySource::Frozen(v) = utilities {
            if v.len() != self.layers.len() {
                return Err(Error::shape("forward", format!("{} frozen utility tables for {} layers", v.len(), self.layers.len())));
            }
        }
        let pool = tape.constant(pool_matrix(n, batch.seq_len)?);
        let mut cursor = params.iter().copied();
        let mut take = || cursor.next().ok_or_else(|| Error::shape("forward", "too few parameter variables"));
        let mut z: Vec<Var> = batch.z0.blocks().iter().map(|b| tape.constant(b.clone())).collect();
        let mut layer_vars = Vec::with_capacity(self.layers.len());

        // Parameter layout per layer mirrors `named_params`.
        struct LayerP {
            blocks: Vec<Var>,
            bias: Option<Vec<Var>>,
            proj_u: Var,
            proj_v: Vec<Var>,
            w: Vec<Var>,
            tau: Var,
            gamma: Vec<Option<Var>>,
            beta: Vec<Option<Var>>,
        }
        let mut lps = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let n_blocks = layer.blocks.free_tensors().len();
            let blocks = (0..n_blocks).map(|_| take()).collect::<Result<Vec<_>>>()?;
            let bias = match &layer.bias {
                Some(b) => Some((0..b.len()).map(|_| take()).collect::<Result<Vec<_>>>()?),
                None => None,
            };
            let proj_u = take()?;
            let proj_v = (0..self.grading.len()).map(|_| take()).collect::<Result<Vec<_>>>()?;
            let w = (0..layer.edges.len()).map(|_| take()).collect::<Result<Vec<_>>>()?;
            let tau = take()?;
            let g_len = self.grading.len();
            let gamma = match layer.norm.kind {
                NormKind::None => vec![None; g_len],
                _ => (0..g_len).map(|_| take().map(Some)).collect::<Result<Vec<_>>>()?,
            };
            let beta = match layer.norm.kind {
                NormKind::LayerNorm => (0..g_len).map(|_| take().map(Some)).collect::<Result<Vec<_>>>()?,
                _ => vec![None; g_len],
            };
            lps.push(LayerP {
                blocks,
                bias,
                proj_u,
                proj_v,
                w,
                tau,
                gamma,
                beta,
            });
        }
        let r_w = take()?;
        let r_b = take()?;
        let read_grades = self.readout.grades.clone();
        let readout = |tape: &mut Tape, blocks: &[Var]| -> Result<Var> {
            let parts: Vec<Var> = read_grades.iter().map(|&g| blocks[g]).collect();
            let x = tape.concat_cols(&parts)?;
            let logits = tape.linear(x, r_w)?;
            let logits = tape.add_row(logits, r_b)?;
            tape.cross_entropy(logits, &batch.targets)
        };

        for (l, (layer, lp)) in self.layers.iter().zip(&lps).enumerate() {
            let cfg = &layer.routing;
            let edges = layer.edges.edges();
            let ctx = tape.concat_cols(&z)?;
            let pooled = tape.matmul(pool, ctx)?;
            let u = tape.linear(pooled, lp.proj_u)?;
            let base = readout(tape, &z)?;

            let mut cands = Vec::with_capacity(edges.len());
            let mut dls = Vec::with_capacity(edges.len());
            let mut logit_cols = Vec::with_capacity(edges.len());
            for (i, &e) in edges.iter().enumerate() {
                let w = self.realized_block(tape, layer, lp.blocks[layer.blocks.free_index(e, i)], e)?;
                let mut y = tape.linear(z[e.src], w)?;
                if let Some(bias) = &lp.bias {
                    y = tape.add_row(y, bias[i])?;
                }
                let mut plus = z.clone();
                plus[e.dst] = y;
                let ce = readout(tape, &plus)?;
                dls.push(tape.sub(base, ce)?);
                cands.push(y);

                let v = tape.linear(z[e.src], lp.proj_v[e.src])?;
                let uw = tape.matmul(u, lp.w[i])?;
                let prod = tape.mul(uw, v)?;
                logit_cols.push(tape.sum_rows(prod));
            }
            let utilities_var = tape.concat_cols(&dls)?;
            let logits = tape.concat_cols(&logit_cols)?;
            let tau = lp.tau;
            let augmented = if cfg.utility_in_logits {
                // Utilities and thresholds reach the router without gradient; thresholds are
                // trained through the margin penalty only.
                let margin = match utilities {
                    UtilitySource::Detached => {
                        let dl_in = tape.detach(utilities_var);
                        let tau_in = tape.detach(tau);
                        let neg_tau = tape.scale(tau_in, -1.0);
                        tape.add_row(dl_in, neg_tau)?
                    }
                    UtilitySource::Frozen(v) => {
                        if v[l].shape() != [n, edges.len()] {
                            return Err(Error::shape("forward", format!("frozen margins {:?} in layer {l}", v[l].shape())));
                        }
                        tape.constant(v[l].clone())
                    }
                };
                let margin = tape.scale(margin, cfg.beta);
                tape.add(logits, margin)?
            } else {
                logits
            };
            let scaled = tape.scale(augmented, 1.0 / cfg.t_sm);
            let mut alpha = gate_tape(tape, scaled, &layer.edges, cfg.gate)?;
            if ablated.iter().any(|&(al, _)| al == l) {
                let keep: Vec<f64> = (0..edges.len())
                    .map(|i| if ablated.contains(&(l, i)) { 0.0 } else { 1.0 })
                    .collect();
                let keep = tape.constant(Tensor::row_vector(&keep));
                alpha = tape.mul_row(alpha, keep)?;
            }

            let mut next = z.clone();
            for (h, slot) in next.iter_mut().enumerate() {
                let incoming = layer.edges.incoming(h);
                if incoming.is_empty() {
                    continue;
                }
                let mut acc = z[h];
                for &i in &incoming {
                    let diff = tape.sub(cands[i], z[h])?;
                    let a = tape.slice_cols(alpha, i, 1)?;
                    let gated = tape.mul_col(diff, a)?;
                    acc = tape.add(acc, gated)?;
                }
                *slot = match (lp.gamma[h], lp.beta[h]) {
                    (Some(gamma), Some(beta)) => layer.norm.apply_block_tape(tape, acc, gamma, beta)?,
                    (Some(gamma), None) => layer.norm.apply_block_tape(tape, acc, gamma, gamma)?,
                    _ => acc,
                };
            }
            z = next;
            layer_vars.push(LayerVars {
                logits,
                utilities: utilities_var,
                augmented,
                alpha,
                tau,
                candidates: cands,
            });
        }
        let token_loss = readout(tape, &z)?;
        let lm = tape.mean(token_loss);
        if cursor.next().is_some() {
            return Err(Error::shape("forward", "too many parameter variables"));
        }
        Ok(Forward {
            params: params.to_vec(),
            layers: layer_vars,
            token_loss,
            lm,
            n_tokens: n,
        })
    }

    /// Weight variable of edge `e`; EGT blocks are realized as `D_h K D_g⁻¹` with constant `D`.
    fn realized_block(&self, tape: &mut Tape, layer: &GradedLayer, free: Var, e: crate::graded::Edge) -> Result<Var> {
        match &layer.blocks {
            LayerBlocks::Free(_) | LayerBlocks::Banded(_) => Ok(free),
            LayerBlocks::Egt { reweighting, .. } => {
                let dh = tape.constant(reweighting.d(e.dst).clone());
                let dg_inv = tape.constant(reweighting.d_inv(e.src).clone());
                let left = tape.matmul(dh, free)?;
                tape.matmul(left, dg_inv)
            }
        }
    }

    /// Runs the forward pass and reads out every layer's routing quantities.
    pub fn routing_states(&self, batch: &Batch) -> Result<Vec<RoutingState>> {
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, batch, &UtilitySource::Detached)?;
        Ok(fwd
            .layers
            .iter()
            .map(|lv| RoutingState {
                logits: tape.value(lv.logits).clone(),
                utilities: tape.value(lv.utilities).clone(),
                augmented: tape.value(lv.augmented).clone(),
                alpha: tape.value(lv.alpha).clone(),
                candidates: lv.candidates.iter().map(|&c| tape.value(c).clone()).collect(),
            })
            .collect())
    }

    /// Per-layer utilities `[n, |E|]` at the current parameters.
    pub fn utilities(&self, batch: &Batch) -> Result<Vec<Tensor>> {
        Ok(self.routing_states(batch)?.into_iter().map(|s| s.utilities).collect())
    }

    /// Router margins `ΔL − τ` at the current parameters, for [`UtilitySource::Frozen`].
    pub fn frozen_margins(&self, batch: &Batch) -> Result<UtilitySource> {
        let states = self.routing_states(batch)?;
        let margins = states
            .into_iter()
            .zip(&self.layers)
            .map(|(s, layer)| {
                let mut m = s.utilities;
                for t in 0..m.rows() {
                    for (e, tau) in layer.routing.tau.iter().enumerate() {
                        m.set(t, e, m.get(t, e) - tau);
                    }
                }
                m
            })
            .collect();
        Ok(UtilitySource::Frozen(margins))
    }

    /// `L_LM` at the final state.
    pub fn lm_loss(&self, batch: &Batch) -> Result<f64> {
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, batch, &UtilitySource::Detached)?;
        Ok(tape.scalar(fwd.lm))
    }

    /// The same model expressed in coordinates `ẑ_g = z_g D_g⁻ᵀ`.
    ///
    /// Blocks become `D_h⁻¹ Φ D_g`, biases `D_h⁻¹ b`, and the readout and router projections
    /// absorb `D`. Losses and utilities are unchanged. Grade-wise normalization does not commute
    /// with a general `D`, so layers must have normalization off.
    pub fn conjugate(&self, d: &EgtReweighting) -> Result<GradedModel> {
        if let Some(l) = self.layers.iter().position(|l| l.norm.kind != NormKind::None) {
            return Err(Error::config(
                format!("layers[{l}].norm"),
                "conjugation invariance needs normalization off",
            ));
        }
        let mut out = self.clone();
        let all: Vec<usize> = (0..self.grading.len()).collect();
        for layer in &mut out.layers {
            let maps = layer.block_maps()?;
            let conj = crate::graded::egt_conjugate(&maps, d, crate::graded::ConjugateDirection::ToLgt)?;
            layer.blocks = match &layer.blocks {
                LayerBlocks::Egt { bank, reweighting } if reweighting == d => LayerBlocks::Banded(bank.clone()),
                _ => LayerBlocks::Free(conj.iter().map(|b| b.weight.clone()).collect()),
            };
            if layer.bias.is_some() {
                layer.bias = Some(conj.iter().map(|b| b.bias.clone().expect("bias present")).collect());
            }
            layer.router.proj_u = right_block_diag(&self.grading, &all, &layer.router.proj_u, d)?;
            for (g, v) in layer.router.proj_v.iter_mut().enumerate() {
                *v = v.matmul(d.d(g))?;
            }
        }
        out.readout.weight = right_block_diag(&self.grading, &self.readout.grades, &self.readout.weight, d)?;
        Ok(out)
    }

    pub fn to_checkpoint(&self) -> Checkpoint<GradedModel> {
        Checkpoint::new(MODEL_KIND, self.clone())
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Ok(Checkpoint::<GradedModel>::load(path, MODEL_KIND)?.payload)
    }
}

/// `A ↦ A · diag(D_g)_{g ∈ grades}` for `A` acting on the concatenation of `grades`.
fn right_block_diag(grading: &Grading, grades: &[usize], a: &Tensor, d: &EgtReweighting) -> Result<Tensor> {
    let mut col = 0;
    let mut parts = Vec::with_capacity(grades.len());
    for &g in grades {
        parts.push(a.slice_cols(col, grading.dim(g))?.matmul(d.d(g))?);
        col += grading.dim(g);
    }
    Tensor::concat_cols(&parts.iter().collect::<Vec<_>>())
}

/// Maps an input state into conjugated coordinates, `ẑ_g = z_g D_g⁻ᵀ`.
pub fn conjugate_state(z: &GradedVector, d: &EgtReweighting) -> Result<GradedVector> {
    let mut out = z.clone();
    for g in 0..z.blocks().len() {
        out.set_block(g, d.inverse_rows(g, z.block(g))?);
    }
    Ok(out)
}

/// Gates on the tape. Hard gating has no gradient.
fn gate_tape(tape: &mut Tape, scaled: Var, edges: &EdgeSet, kind: GateKind) -> Result<Var> {
    match kind {
        GateKind::SoftmaxGlobal => Ok(tape.softmax(scaled)),
        GateKind::Logistic => Ok(tape.act(scaled, Act::Sigmoid)),
        GateKind::HardArgmax => {
            let v = tape.value(scaled).clone();
            let dest: Vec<usize> = edges.edges().iter().map(|e| e.dst).collect();
            let hard = crate::routing::gate(&v, &dest, GateKind::HardArgmax, 1.0)?;
            Ok(tape.constant(hard))
        }
        GateKind::SoftmaxPerDestination => {
            let mut cols: Vec<Option<Var>> = vec![None; edges.len()];
            for h in 0..=edges.edges().iter().map(|e| e.dst).max().unwrap_or(0) {
                let incoming = edges.incoming(h);
                if incoming.is_empty() {
                    continue;
                }
                let parts = incoming
                    .iter()
                    .map(|&i| tape.slice_cols(scaled, i, 1))
                    .collect::<Result<Vec<_>>>()?;
                let group = tape.concat_cols(&parts)?;
                let sm = tape.softmax(group);
                for (k, &i) in incoming.iter().enumerate() {
                    cols[i] = Some(tape.slice_cols(sm, k, 1)?);
                }
            }
            let cols: Vec<Var> = cols.into_iter().map(|c| c.expect("every edge has a destination")).collect();
            tape.concat_cols(&cols)
        }
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::graded::Edge;
    use crate::routing::route;
    use crate::tape::{central_difference, max_relative_error, FD_EPS_ABS};
    use rand::SeedableRng;

    pub(crate) fn small_model(norm: NormKind, gate: GateKind) -> (GradedModel, Batch) {
        let g = Grading::new(&[("sem", 4), ("num", 4)]).unwrap();
        let edges = EdgeSet::new(&g, [Edge::new(0, 1), Edge::new(1, 1), Edge::new(1, 0)]).unwrap();
        let mut rc = RoutingConfig::new(&edges, 2.0, 0.7, 0.1, gate, 3).unwrap();
        rc.tau = vec![0.1, 0.3, 0.05];
        let mut layer = GradedLayer::init(&g, edges, rc, norm, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        layer.router = RouterParams::init(&g, &layer.edges, 3, 0.5, &mut rng);
        layer.bias = Some((0..3).map(|_| Tensor::randn(1, 4, 0.1, &mut rng)).collect());
        let mut readout = Readout::new(&g, Tensor::randn(3, 8, 0.7, &mut rng)).unwrap();
        readout.bias = Tensor::randn(1, 3, 0.1, &mut rng);
        let model = GradedModel::new(g.clone(), vec![layer], readout).unwrap();
        let z0 = GradedVector::randn(&g, 6, 1.0, &mut rng);
        let batch = Batch::new(z0, vec![0, 2, 1, 1, 0, 2], 3).unwrap();
        (model, batch)
    }

    #[test]
    fn params_round_trip() {
        let (mut m, _) = small_model(NormKind::LayerNorm, GateKind::SoftmaxGlobal);
        let p = m.params();
        let before = m.clone();
        m.set_params(&p).unwrap();
        assert_eq!(m, before);
        let flat = m.flat_params();
        m.set_flat_params(&flat).unwrap();
        assert_eq!(m, before);
        assert_eq!(flat.len(), m.param_count());
    }

    #[test]
    fn tape_routing_matches_plain_routing() {
        for gate in [GateKind::SoftmaxGlobal, GateKind::SoftmaxPerDestination, GateKind::Logistic, GateKind::HardArgmax] {
            let (m, b) = small_model(NormKind::None, gate);
            let tape_state = &m.routing_states(&b).unwrap()[0];
            let layer = &m.layers[0];
            let loss = |z: &GradedVector| m.readout.losses(z, &b.targets);
            let plain = route(&m.grading, &layer.edges, &layer.block_maps().unwrap(), &layer.router, &layer.routing, &b.z0, b.seq_len, loss).unwrap();
            assert!(tape_state.alpha.max_abs_diff(&plain.alpha) < 1e-12, "{gate:?}");
            assert!(tape_state.utilities.max_abs_diff(&plain.utilities) < 1e-12);
            assert!(tape_state.logits.max_abs_diff(&plain.logits) < 1e-12);
        }
    }

    #[test]
    fn frozen_utilities_reproduce_detached_values() {
        let (m, b) = small_model(NormKind::LayerNorm, GateKind::SoftmaxGlobal);
        let frozen = m.frozen_margins(&b).unwrap();
        let mut t1 = Tape::new();
        let f1 = m.forward(&mut t1, &b, &UtilitySource::Detached).unwrap();
        let mut t2 = Tape::new();
        let f2 = m.forward(&mut t2, &b, &frozen).unwrap();
        assert_eq!(t1.scalar(f1.lm), t2.scalar(f2.lm));
        let g1 = t1.backward(f1.lm).unwrap();
        let g2 = t2.backward(f2.lm).unwrap();
        for (a, c) in f1.params.iter().zip(&f2.params) {
            assert_eq!(g1.wrt(*a), g2.wrt(*c));
        }
    }

    #[test]
    fn lm_gradient_matches_finite_differences() {
        let (m, b) = small_model(NormKind::LayerNorm, GateKind::SoftmaxGlobal);
        let frozen = m.frozen_margins(&b).unwrap();
        let mut tape = Tape::new();
        let fwd = m.forward(&mut tape, &b, &frozen).unwrap();
        let grads = tape.backward(fwd.lm).unwrap();
        let flat: Vec<f64> = fwd.params.iter().flat_map(|&p| grads.wrt(p).into_data()).collect();
        let analytic = Tensor::matrix(1, flat.len(), flat).unwrap();
        let theta = m.flat_params();
        let numeric = central_difference(
            |th| {
                let mut mm = m.clone();
                mm.set_flat_params(th).unwrap();
                let mut t = Tape::new();
                let f = mm.forward(&mut t, &b, &frozen).unwrap();
                t.scalar(f.lm)
            },
            &theta,
            1e-5,
        );
        let err = max_relative_error(&analytic, &numeric, FD_EPS_ABS);
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn conjugation_preserves_losses_and_utilities() {
        let (m, b) = small_model(NormKind::None, GateKind::SoftmaxGlobal);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = EgtReweighting::new(
            &m.grading,
            (0..2).map(|_| Tensor::eye(4).add(&Tensor::randn(4, 4, 0.3, &mut rng)).unwrap()).collect(),
        )
        .unwrap();
        let mc = m.conjugate(&d).unwrap();
        let bc = Batch::new(conjugate_state(&b.z0, &d).unwrap(), b.targets.clone(), b.seq_len).unwrap();
        assert!((m.lm_loss(&b).unwrap() - mc.lm_loss(&bc).unwrap()).abs() < 1e-10);
        let (u, uc) = (m.utilities(&b).unwrap(), mc.utilities(&bc).unwrap());
        assert!(u[0].max_abs_diff(&uc[0]) < 1e-10);
        let (ln, _) = small_model(NormKind::LayerNorm, GateKind::SoftmaxGlobal);
        assert!(matches!(ln.conjugate(&d), Err(Error::Config { .. })));
    }

    #[test]
    fn checkpoint_round_trip() {
        let (mut m, _) = small_model(NormKind::RmsNorm, GateKind::SoftmaxPerDestination);
        m.frozen.insert("layer0.block[0:1]".into());
        let s = m.to_checkpoint().to_string().unwrap();
        let back = Checkpoint::<GradedModel>::from_str(&s, MODEL_KIND).unwrap().payload;
        assert_eq!(back, m);
    }
}
