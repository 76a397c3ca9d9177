//! The graded-utility objective, its threshold gradient, optimizers and the training step.

use std::collections::BTreeMap;
use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Batch, Forward, GradedModel, UtilitySource};
use crate::tape::{Act, Tape, Var};
use crate::tensor::{sigmoid, softmax_row, softplus, Tensor};

/// `ψ(u) = log(1 + e^{βu})`, overflow-safe.
pub fn softplus_margin(u: f64, beta: f64) -> f64 {
    softplus(beta * u)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regularizer {
    /// `Ω = Σ α log α` (negative entropy).
    Entropy,
    /// `Ω = Σ_h ‖α_{·→h}‖₂`, one group per destination grade.
    GroupLasso,
}

/// `Ω(α)` for one token's gate row. `dest[j]` groups columns for the group lasso.
pub fn sparsity_penalty(alpha: &[f64], dest: &[usize], kind: Regularizer) -> f64 {
    match kind {
        Regularizer::Entropy => alpha.iter().map(|&a| Act::XLogX.eval(a)).sum(),
        Regularizer::GroupLasso => {
            let mut groups: BTreeMap<usize, f64> = BTreeMap::new();
            for (&a, &h) in alpha.iter().zip(dest) {
                *groups.entry(h).or_default() += a * a;
            }
            groups.values().map(|s| s.sqrt()).sum()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub lambda: f64,
    pub mu_sp: f64,
    /// Margin sharpness; `None` reuses each layer's routing `β`.
    pub beta: Option<f64>,
    pub regularizer: Regularizer,
    pub learn_thresholds: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            lambda: 0.0,
            mu_sp: 0.0,
            beta: None,
            regularizer: Regularizer::Entropy,
            learn_thresholds: false,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::config("lambda", format!("must be nonnegative, got {}", self.lambda)));
        }
        if !(self.mu_sp >= 0.0) {
            return Err(Error::config("mu_sp", format!("must be nonnegative, got {}", self.mu_sp)));
        }
        if let Some(b) = self.beta {
            if !(b > 0.0) {
                return Err(Error::config("beta", format!("must be positive, got {b}")));
            }
        }
        Ok(())
    }

    fn margin_beta(&self, model: &GradedModel, layer: usize) -> f64 {
        self.beta.unwrap_or(model.layers[layer].routing.beta)
    }
}

/// Tape handles of the objective and its parts.
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveVars {
    pub total: Var,
    pub lm: Var,
    /// `λ · Σ_layers mean_t Σ_e ψ(τ_e − ΔL_t(e))`.
    pub margin: Var,
    /// `μ_sp · Σ_layers mean_t (−Ω(α_t))` for entropy, `+Ω` for the group lasso.
    pub sparsity: Var,
}

/// Builds `L_GT` on top of a forward pass. Utilities in the margin keep their gradient.
///
/// The entropy regularizer enters with a minus sign, so a larger `μ_sp` pushes gates
/// towards one-hot. The group lasso enters with a plus sign.
pub fn graded_objective(
    tape: &mut Tape,
    model: &GradedModel,
    fwd: &Forward,
    cfg: &ObjectiveConfig,
) -> Result<ObjectiveVars> {
    cfg.validate()?;
    let n = fwd.n_tokens as f64;
    let mut margin = tape.constant(Tensor::scalar(0.0));
    let mut sparsity = tape.constant(Tensor::scalar(0.0));
    for (l, lv) in fwd.layers.iter().enumerate() {
        let beta = cfg.margin_beta(model, l);
        let neg = tape.scale(lv.utilities, -1.0);
        let shortfall = tape.add_row(neg, lv.tau)?;
        let psi = tape.act(shortfall, Act::Softplus(beta));
        let s = tape.sum(psi);
        let term = tape.scale(s, cfg.lambda / n);
        margin = tape.add(margin, term)?;

        let omega = match cfg.regularizer {
            Regularizer::Entropy => {
                let x = tape.act(lv.alpha, Act::XLogX);
                let s = tape.sum(x);
                tape.scale(s, -1.0 / n)
            }
            Regularizer::GroupLasso => {
                let edges = &model.layers[l].edges;
                let mut acc = tape.constant(Tensor::zeros(fwd.n_tokens, 1));
                for h in 0..model.grading.len() {
                    let incoming = edges.incoming(h);
                    if incoming.is_empty() {
                        continue;
                    }
                    let parts = incoming
                        .iter()
                        .map(|&i| tape.slice_cols(lv.alpha, i, 1))
                        .collect::<Result<Vec<_>>>()?;
                    let grp = tape.concat_cols(&parts)?;
                    let sq = tape.act(grp, Act::Square);
                    let ss = tape.sum_rows(sq);
                    let norm = tape.act(ss, Act::Sqrt);
                    acc = tape.add(acc, norm)?;
                }
                let s = tape.sum(acc);
                tape.scale(s, 1.0 / n)
            }
        };
        let term = tape.scale(omega, cfg.mu_sp);
        sparsity = tape.add(sparsity, term)?;
    }
    let t = tape.add(fwd.lm, margin)?;
    let total = tape.add(t, sparsity)?;
    Ok(ObjectiveVars {
        total,
        lm: fwd.lm,
        margin,
        sparsity,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    pub total: f64,
    pub lm: f64,
    pub margin: f64,
    pub sparsity: f64,
}

impl Breakdown {
    fn read(tape: &Tape, v: &ObjectiveVars) -> Result<Self> {
        let b = Self {
            total: tape.scalar(v.total),
            lm: tape.scalar(v.lm),
            margin: tape.scalar(v.margin),
            sparsity: tape.scalar(v.sparsity),
        };
        for (name, x) in [("lm", b.lm), ("margin", b.margin), ("sparsity", b.sparsity), ("total", b.total)] {
            if !x.is_finite() {
                return Err(Error::NonFinite(format!("objective term {name} = {x}")));
            }
        }
        Ok(b)
    }
}

/// Evaluates `L_GT` and its parts.
pub fn evaluate(model: &GradedModel, batch: &Batch, cfg: &ObjectiveConfig, utilities: &UtilitySource) -> Result<Breakdown> {
    let mut tape = Tape::new();
    let fwd = model.forward(&mut tape, batch, utilities)?;
    let vars = graded_objective(&mut tape, model, &fwd, cfg)?;
    Breakdown::read(&tape, &vars)
}

/// `L_GT` and its gradient with respect to every parameter (order of `named_params`).
pub fn objective_and_gradient(
    model: &GradedModel,
    batch: &Batch,
    cfg: &ObjectiveConfig,
    utilities: &UtilitySource,
) -> Result<(Breakdown, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let fwd = model.forward(&mut tape, batch, utilities)?;
    let vars = graded_objective(&mut tape, model, &fwd, cfg)?;
    let b = Breakdown::read(&tape, &vars)?;
    let grads = tape.backward(vars.total)?;
    Ok((b, fwd.params.iter().map(|&p| grads.wrt(p)).collect()))
}

/// `∂L_GT/∂τ_e = (λβ/n) Σ_t σ(β(τ_e − ΔL_t(e)))`.
///
/// Raising a threshold raises every shortfall, so this is nonnegative. Its magnitude is
/// `λβ E[σ(β(τ − ΔL))]`.
pub fn threshold_gradient(model: &GradedModel, batch: &Batch, cfg: &ObjectiveConfig, layer: usize, edge: usize) -> Result<f64> {
    let states = model.routing_states(batch)?;
    let st = states
        .get(layer)
        .ok_or_else(|| Error::config("layer", format!("no layer {layer}")))?;
    let tau = *model.layers[layer]
        .routing
        .tau
        .get(edge)
        .ok_or_else(|| Error::config("edge", format!("no edge {edge} in layer {layer}")))?;
    let beta = cfg.margin_beta(model, layer);
    let n = st.utilities.rows();
    let s: f64 = (0..n).map(|t| sigmoid(beta * (tau - st.utilities.get(t, edge)))).sum();
    Ok(cfg.lambda * beta * s / n as f64)
}

/// `L_LM + λ Σ_layers mean_t Σ_e max{0, β(τ_e − ΔL)} + sparsity − λ Σ_layers |E| log 2`.
pub fn objective_lower_bound(model: &GradedModel, batch: &Batch, cfg: &ObjectiveConfig) -> Result<f64> {
    let b = evaluate(model, batch, cfg, &UtilitySource::Detached)?;
    let states = model.routing_states(batch)?;
    let mut hinge = 0.0;
    let mut slack = 0.0;
    for (l, st) in states.iter().enumerate() {
        let beta = cfg.margin_beta(model, l);
        let tau = &model.layers[l].routing.tau;
        let n = st.utilities.rows();
        let mut s = 0.0;
        for t in 0..n {
            for (e, &te) in tau.iter().enumerate() {
                s += (beta * (te - st.utilities.get(t, e))).max(0.0);
            }
        }
        hinge += s / n as f64;
        slack += tau.len() as f64 * std::f64::consts::LN_2;
    }
    Ok(b.lm + cfg.lambda * hinge + b.sparsity - cfg.lambda * slack)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    /// Global gradient-norm clip; `0` disables.
    pub clip: f64,
    /// Decoupled weight decay.
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::Adam,
            lr: 3e-4,
            batch_size: 32,
            steps: 1000,
            clip: 1.0,
            weight_decay: 0.01,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", format!("must be nonnegative, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if !(self.clip >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::config("clip/weight_decay", "must be nonnegative"));
        }
        Ok(())
    }
}

/// Plain gradient descent or Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct Optimizer {
    cfg: TrainConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u32,
}

impl Optimizer {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(cfg: &TrainConfig, params: &[Tensor]) -> Result<Self> {
        cfg.validate()?;
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::new(p.shape().to_vec(), vec![0.0; p.len()]).expect("shape")).collect();
        Ok(Self {
            cfg: cfg.clone(),
            m: zeros.clone(),
            v: zeros,
            t: 0,
        })
    }

    /// Clips in place and returns the pre-clip global norm over trainable tensors.
    pub fn clip(&self, grads: &mut [Tensor], mask: &[bool]) -> f64 {
        let norm = grads
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(g, _)| g.data().iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        if self.cfg.clip > 0.0 && norm > self.cfg.clip {
            let s = self.cfg.clip / norm;
            for g in grads.iter_mut() {
                g.data_mut().iter_mut().for_each(|x| *x *= s);
            }
        }
        norm
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], mask: &[bool]) {
        self.t += 1;
        let lr = self.cfg.lr;
        let wd = self.cfg.weight_decay;
        let (c1, c2) = (1.0 - Self::B1.powi(self.t as i32), 1.0 - Self::B2.powi(self.t as i32));
        for (i, p) in params.iter_mut().enumerate() {
            if !mask[i] {
                continue;
            }
            let g = grads[i].data();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, x) in p.data_mut().iter_mut().enumerate() {
                match self.cfg.optimizer {
                    OptimizerKind::Sgd => *x -= lr * (g[j] + wd * *x),
                    OptimizerKind::Adam => {
                        m[j] = Self::B1 * m[j] + (1.0 - Self::B1) * g[j];
                        v[j] = Self::B2 * v[j] + (1.0 - Self::B2) * g[j] * g[j];
                        let upd = (m[j] / c1) / ((v[j] / c2).sqrt() + Self::EPS);
                        *x -= lr * (upd + wd * *x);
                    }
                }
            }
        }
    }
}

/// One metrics record per training step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub total: f64,
    pub lm: f64,
    pub margin: f64,
    pub sparsity: f64,
    /// Mean gate entropy `−Σ α log α` per token, averaged over layers.
    pub entropy: f64,
    pub grad_norm: f64,
    /// `"layer/edge" -> mean ΔL`.
    pub utility: BTreeMap<String, f64>,
    /// `"layer/edge" -> mean α`.
    pub alpha: BTreeMap<String, f64>,
}

/// One clipped optimizer step on `L_GT`. A non-finite gradient aborts before any update.
pub fn train_step(
    model: &mut GradedModel,
    batch: &Batch,
    cfg: &ObjectiveConfig,
    opt: &mut Optimizer,
    step: usize,
) -> Result<StepMetrics> {
    let mut tape = Tape::new();
    let fwd = model.forward(&mut tape, batch, &UtilitySource::Detached)?;
    let vars = graded_objective(&mut tape, model, &fwd, cfg)?;
    let b = Breakdown::read(&tape, &vars)?;
    let g = tape.backward(vars.total)?;
    let mut grads: Vec<Tensor> = fwd.params.iter().map(|&p| g.wrt(p)).collect();
    let names = model.param_names();
    if let Some(i) = grads.iter().position(|t| !t.is_finite()) {
        return Err(Error::NonFinite(format!("gradient of {} at step {step}", names[i])));
    }
    let mask = model.trainable_mask(cfg.learn_thresholds);
    let grad_norm = opt.clip(&mut grads, &mask);

    let mut utility = BTreeMap::new();
    let mut alpha = BTreeMap::new();
    let mut entropy = 0.0;
    for (l, lv) in fwd.layers.iter().enumerate() {
        let (dl, a) = (tape.value(lv.utilities), tape.value(lv.alpha));
        let n = a.rows() as f64;
        for (i, e) in model.layers[l].edges.edges().iter().enumerate() {
            let key = format!("{l}/{e}");
            utility.insert(key.clone(), (0..a.rows()).map(|t| dl.get(t, i)).sum::<f64>() / n);
            alpha.insert(key, (0..a.rows()).map(|t| a.get(t, i)).sum::<f64>() / n);
        }
        entropy -= a.data().iter().map(|&x| Act::XLogX.eval(x)).sum::<f64>() / n;
    }
    entropy /= fwd.layers.len().max(1) as f64;

    let mut params = model.params();
    opt.step(&mut params, &grads, &mask);
    model.set_params(&params)?;
    Ok(StepMetrics {
        step,
        total: b.total,
        lm: b.lm,
        margin: b.margin,
        sparsity: b.sparsity,
        entropy,
        grad_norm,
        utility,
        alpha,
    })
}

/// Writes one JSON line.
pub fn write_metrics<W: Write>(mut w: W, m: &StepMetrics) -> Result<()> {
    serde_json::to_writer(&mut w, m)?;
    w.write_all(b"\n")?;
    Ok(())
}

/// Per-token loss `ℓ_t(e)` of hard-activating edge `e` in `layer`, at that layer's input:
/// next-token loss after the update plus `λ ψ(τ_e − ΔL_t(e))`.
pub fn edge_outcome_losses(model: &GradedModel, batch: &Batch, cfg: &ObjectiveConfig, layer: usize) -> Result<Tensor> {
    let states = model.routing_states(batch)?;
    if layer >= states.len() {
        return Err(Error::config("layer", format!("no layer {layer}")));
    }
    let mut z = batch.z0.clone();
    for (l, s) in states.iter().enumerate().take(layer) {
        z = crate::routing::morphic_update(&model.layers[l].edges, &z, &s.candidates, &s.alpha, Some(&model.layers[l].norm))?;
    }
    let base = model.readout.losses(&z, &batch.targets)?;
    let beta = cfg.margin_beta(model, layer);
    let lyr = &model.layers[layer];
    let mut out = Tensor::zeros(batch.len(), lyr.edges.len());
    for (i, &e) in lyr.edges.edges().iter().enumerate() {
        let mut zp = z.clone();
        zp.set_block(e.dst, lyr.block_maps()?[i].apply(&model.grading, &z)?);
        let plus = model.readout.losses(&zp, &batch.targets)?;
        for t in 0..batch.len() {
            let dl = base[t] - plus[t];
            out.set(t, i, plus[t] + cfg.lambda * softplus_margin(lyr.routing.tau[i] - dl, beta));
        }
    }
    Ok(out)
}

/// Score-function estimate of `∇_θ E_{e∼K_θ}[ℓ(e)]` with `K_θ = softmax(θ)` per row.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreEstimate {
    pub mean: Tensor,
    pub std_err: Tensor,
    pub samples: usize,
}

/// `∇_θ K_θ(e) = K(e)(1_e − K)`, so `∇ E[ℓ] = Σ_e ℓ(e) K(e)(1_e − K)` per row.
pub fn exact_kernel_gradient(theta: &Tensor, outcomes: &Tensor) -> Result<Tensor> {
    if theta.shape() != outcomes.shape() {
        return Err(Error::shape("exact_kernel_gradient", format!("{:?} vs {:?}", theta.shape(), outcomes.shape())));
    }
    let mut out = Tensor::zeros(theta.rows(), theta.cols());
    for t in 0..theta.rows() {
        let k = softmax_row(theta.row(t), None);
        let mean: f64 = k.iter().zip(outcomes.row(t)).map(|(p, l)| p * l).sum();
        for (j, &kj) in k.iter().enumerate() {
            out.set(t, j, kj * (outcomes.get(t, j) - mean));
        }
    }
    Ok(out)
}

/// `ℓ(e) ∇_θ log K_θ(e)` for one sampled edge per row.
pub fn score_function_sample(theta: &Tensor, outcomes: &Tensor, sampled: &[usize]) -> Result<Tensor> {
    let mut out = Tensor::zeros(theta.rows(), theta.cols());
    for (t, &e) in sampled.iter().enumerate() {
        let k = softmax_row(theta.row(t), None);
        if k[e] == 0.0 {
            return Err(Error::ZeroProbability(format!("edge {e} at token {t}")));
        }
        let l = outcomes.get(t, e);
        for (j, &kj) in k.iter().enumerate() {
            out.set(t, j, l * (if j == e { 1.0 } else { 0.0 } - kj));
        }
    }
    Ok(out)
}

/// Monte-Carlo mean and standard error over `samples` independent draws.
pub fn kernel_sample_step<R: Rng + ?Sized>(
    theta: &Tensor,
    outcomes: &Tensor,
    samples: usize,
    rng: &mut R,
) -> Result<ScoreEstimate> {
    let (n, k) = (theta.rows(), theta.cols());
    let probs: Vec<Vec<f64>> = (0..n).map(|t| softmax_row(theta.row(t), None)).collect();
    let mut sum = vec![0.0; n * k];
    let mut sq = vec![0.0; n * k];
    for _ in 0..samples {
        let draw: Vec<usize> = probs
            .iter()
            .map(|p| {
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                for (j, &pj) in p.iter().enumerate() {
                    acc += pj;
                    if u < acc {
                        return j;
                    }
                }
                p.iter().rposition(|&pj| pj > 0.0).unwrap_or(0)
            })
            .collect();
        let g = score_function_sample(theta, outcomes, &draw)?;
        for (i, &x) in g.data().iter().enumerate() {
            sum[i] += x;
            sq[i] += x * x;
        }
    }
    let s = samples as f64;
    let mean: Vec<f64> = sum.iter().map(|x| x / s).collect();
    let se: Vec<f64> = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| ((q / s - m * m).max(0.0) / (s - 1.0).max(1.0)).sqrt())
        .collect();
    Ok(ScoreEstimate {
        mean: Tensor::matrix(n, k, mean)?,
        std_err: Tensor::matrix(n, k, se)?,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softplus_margin_values() {
        assert!((softplus_margin(0.0, 1.0) - std::f64::consts::LN_2).abs() < 1e-15);
        let tiny = softplus_margin(-100.0, 1.0);
        assert!(tiny.is_finite() && tiny < 1e-40);
        for i in -50..=50 {
            let u = i as f64 * 0.37;
            let gap = softplus_margin(u, 1.0) - u.max(0.0);
            assert!((0.0..=std::f64::consts::LN_2 + 1e-15).contains(&gap));
        }
    }

    #[test]
    fn sparsity_values() {
        let u = [0.25; 4];
        assert!((sparsity_penalty(&u, &[0, 0, 1, 1], Regularizer::Entropy) + 4f64.ln()).abs() < 1e-15);
        assert_eq!(sparsity_penalty(&[0.0, 1.0, 0.0], &[0, 0, 0], Regularizer::Entropy), 0.0);
        let gl = sparsity_penalty(&[0.5, 0.5], &[0, 1], Regularizer::GroupLasso);
        assert!((gl - 1.0).abs() < 1e-15);
    }

    #[test]
    fn deterministic_kernel_gives_exact_gradient() {
        let theta = Tensor::from_rows(&[&[0.0, -800.0, -800.0]]);
        let out = Tensor::from_rows(&[&[1.0, 2.0, 3.0]]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let est = kernel_sample_step(&theta, &out, 10, &mut rng).unwrap();
        let exact = exact_kernel_gradient(&theta, &out).unwrap();
        assert!(est.mean.max_abs_diff(&exact) < 1e-300);
        assert!(matches!(
            score_function_sample(&theta, &out, &[1]),
            Err(Error::ZeroProbability(_))
        ));
    }

    #[test]
    fn symmetric_kernel_gradient_vanishes() {
        let theta = Tensor::zeros(1, 3);
        let out = Tensor::full(1, 3, 0.7);
        assert!(exact_kernel_gradient(&theta, &out).unwrap().norm() < 1e-16);
    }
}

#[cfg(test)]
mod objective_checks {
    use super::*;
    use crate::model::tests::small_model;
    use crate::graded::NormKind;
    use crate::routing::GateKind;
    use crate::tape::{central_difference, max_relative_error, FD_EPS_ABS};

    fn cfg(reg: Regularizer) -> ObjectiveConfig {
        ObjectiveConfig {
            lambda: 0.4,
            mu_sp: 0.3,
            beta: None,
            regularizer: reg,
            learn_thresholds: true,
        }
    }

    #[test]
    fn full_objective_gradient_matches_finite_differences() {
        for (norm, gate, reg) in [
            (NormKind::LayerNorm, GateKind::SoftmaxGlobal, Regularizer::Entropy),
            (NormKind::RmsNorm, GateKind::SoftmaxPerDestination, Regularizer::GroupLasso),
            (NormKind::None, GateKind::Logistic, Regularizer::Entropy),
        ] {
            let (m, b) = small_model(norm, gate);
            let c = cfg(reg);
            let frozen = m.frozen_margins(&b).unwrap();
            let (_, grads) = objective_and_gradient(&m, &b, &c, &frozen).unwrap();
            let flat: Vec<f64> = grads.into_iter().flat_map(Tensor::into_data).collect();
            let analytic = Tensor::matrix(1, flat.len(), flat).unwrap();
            let numeric = central_difference(
                |th| {
                    let mut mm = m.clone();
                    mm.set_flat_params(th).unwrap();
                    evaluate(&mm, &b, &c, &frozen).unwrap().total
                },
                &m.flat_params(),
                1e-5,
            );
            let err = max_relative_error(&analytic, &numeric, FD_EPS_ABS);
            assert!(err < 1e-4, "{norm:?} {gate:?} {reg:?}: {err}");
        }
    }

    #[test]
    fn threshold_gradient_matches_autodiff_and_differences() {
        let (m, b) = small_model(NormKind::LayerNorm, GateKind::SoftmaxGlobal);
        let c = cfg(Regularizer::Entropy);
        let (_, grads) = objective_and_gradient(&m, &b, &c, &UtilitySource::Detached).unwrap();
        let tau_idx = m.param_names().iter().position(|n| n == "layer0.tau").unwrap();
        for e in 0..3 {
            let analytic = threshold_gradient(&m, &b, &c, 0, e).unwrap();
            assert!(analytic >= 0.0);
            assert!((grads[tau_idx].get(0, e) - analytic).abs() < 1e-12 * analytic.abs().max(1.0));
            let h = 1e-6;
            let at = |d: f64| {
                let mut mm = m.clone();
                mm.layers[0].routing.tau[e] += d;
                evaluate(&mm, &b, &c, &m.frozen_margins(&b).unwrap()).unwrap().total
            };
            let fd = (at(h) - at(-h)) / (2.0 * h);
            assert!((fd - analytic).abs() / analytic.abs() < 1e-5, "{fd} vs {analytic}");
        }
        let zero = ObjectiveConfig { lambda: 0.0, ..c };
        assert_eq!(threshold_gradient(&m, &b, &zero, 0, 1).unwrap(), 0.0);
    }

    #[test]
    fn threshold_gradient_at_matched_utilities() {
        let (mut m, b) = small_model(NormKind::None, GateKind::SoftmaxGlobal);
        let u = m.utilities(&b).unwrap();
        m.layers[0].routing.tau[0] = u[0].get(0, 0);
        let one = Batch::new(b.z0.rows(0, 1), vec![b.targets[0]], 1).unwrap();
        let c = cfg(Regularizer::Entropy);
        let g = threshold_gradient(&m, &one, &c, 0, 0).unwrap();
        assert!((g - c.lambda * m.layers[0].routing.beta / 2.0).abs() < 1e-12);
    }

    #[test]
    fn objective_reduces_and_is_bounded() {
        let (m, b) = small_model(NormKind::LayerNorm, GateKind::SoftmaxGlobal);
        let plain = ObjectiveConfig::default();
        let bd = evaluate(&m, &b, &plain, &UtilitySource::Detached).unwrap();
        assert_eq!(bd.total, bd.lm);
        assert_eq!(bd.lm, m.lm_loss(&b).unwrap());
        for reg in [Regularizer::Entropy, Regularizer::GroupLasso] {
            let c = cfg(reg);
            let bd = evaluate(&m, &b, &c, &UtilitySource::Detached).unwrap();
            assert!(bd.total >= objective_lower_bound(&m, &b, &c).unwrap() - 1e-12);
        }
        let bad = ObjectiveConfig { lambda: -1.0, ..plain };
        assert!(matches!(evaluate(&m, &b, &bad, &UtilitySource::Detached), Err(Error::Config { .. })));
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (mut m, b) = small_model(NormKind::LayerNorm, GateKind::SoftmaxGlobal);
        let before = m.clone();
        let tc = TrainConfig { lr: 0.0, weight_decay: 0.0, ..TrainConfig::default() };
        let mut opt = Optimizer::new(&tc, &m.params()).unwrap();
        let met = train_step(&mut m, &b, &cfg(Regularizer::Entropy), &mut opt, 0).unwrap();
        assert_eq!(m, before);
        assert!(met.entropy > 0.0 && met.entropy <= 3f64.ln() + 1e-12);
    }

    #[test]
    fn score_function_mean_matches_enumeration() {
        use rand::SeedableRng;
        let (m, b) = small_model(NormKind::LayerNorm, GateKind::SoftmaxGlobal);
        let outcomes = edge_outcome_losses(&m, &b, &cfg(Regularizer::Entropy), 0).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let theta = Tensor::randn(outcomes.rows(), outcomes.cols(), 0.8, &mut rng);
        let exact = exact_kernel_gradient(&theta, &outcomes).unwrap();
        let est = kernel_sample_step(&theta, &outcomes, 10_000, &mut rng).unwrap();
        for i in 0..exact.len() {
            let (a, e, s) = (est.mean.data()[i], exact.data()[i], est.std_err.data()[i]);
            assert!((a - e).abs() <= 3.0 * s + 1e-12, "{i}: {a} vs {e} (se {s})");
        }
    }
}
