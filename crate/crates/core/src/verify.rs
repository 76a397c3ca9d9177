//! Named numerical checks grouped into suites, with pinned tolerances and a
//! machine-readable report.
//!
//! Each check reports a scalar `value` compared against `threshold` under a [`Bound`], the
//! number of trials it aggregates, and its wall time against a budget. Checks that cover one of
//! the acceptance criteria carry its number.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::category::{
    build_retrieval_adjoint, calculator_catalog, check_adjunction_triangles, check_functoriality,
    operator_norm, random_spd, realize_program, round_trip_projector, AdjointPair, MorphicProgram,
};
use crate::diagnostics::{ablate, diagnose, trend};
use crate::error::{Error, Result};
use crate::experiment::{run_experiment, Experiment, ExperimentConfig, TaskKind, TrainReport};
use crate::geometry::{
    additive_gains_check, entropic_simplex_maximizer, fisher_matrix, fisher_quadratic_gain,
    gibbs_weights, kl_utility_identity, log_log_slope, selectivity_mass, utility_bounds_check,
    gradient_step_floor, Quadratic, SoftmaxHead,
};
use crate::graded::{
    assemble_dense, build_banded_lgt, compose_blocks, egt_conjugate, fit_blocks_joint,
    fit_blocks_least_squares, param_count_attention, param_count_ffn, param_count_general,
    AttentionBlockParams, BlockMap, ConjugateDirection, Edge, EdgeSet, EgtReweighting,
    FfnBlockParams, GradedVector, Grading, LayerBlocks, NormKind,
};
use crate::model::{conjugate_state, Batch, GradedLayer, GradedModel, Readout, UtilitySource};
use crate::objective::{
    evaluate, objective_and_gradient, objective_lower_bound, threshold_gradient, ObjectiveConfig,
    Regularizer,
};
use crate::routing::{
    augment_logits, edge_destinations, gate, grid_destinations, morphic_update, replace_grade,
    routing_logits, scatter_to_grid, step_scaled_update, GateKind, RouterParams, RoutingConfig,
};
use crate::tape::{central_difference, max_relative_error, Act, Tape, Var, FD_EPS_ABS};
use crate::tasks::{
    embed_square, gen_dyck_dataset, modp_exact_utility, modp_shift_matrix, retrieval_roundtrip,
    DyckTask, ModPTask, RetrievalTask, NUM, SEM,
};
use crate::tensor::{logsumexp_row, softmax_row, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    Tensor,
    Graded,
    Routing,
    Objective,
    Tasks,
    Geometry,
    Category,
    Diagnostics,
}

impl Suite {
    pub const ALL: [Suite; 8] = [
        Suite::Tensor,
        Suite::Graded,
        Suite::Routing,
        Suite::Objective,
        Suite::Tasks,
        Suite::Geometry,
        Suite::Category,
        Suite::Diagnostics,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Tensor => "tensor",
            Suite::Graded => "graded",
            Suite::Routing => "routing",
            Suite::Objective => "objective",
            Suite::Tasks => "tasks",
            Suite::Geometry => "geometry",
            Suite::Category => "category",
            Suite::Diagnostics => "diagnostics",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::config("suite", format!("unknown suite `{s}`")))
    }
}

/// Deliberate defects for exercising the report's failure path.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fault {
    /// Negates the margins fed to the Gibbs closed form.
    GibbsSign,
}

impl FromStr for Fault {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gibbs-sign" => Ok(Fault::GibbsSign),
            _ => Err(Error::config("fault", format!("unknown fault `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Bound {
    /// `value ≤ threshold`.
    AtMost,
    /// `value < threshold`.
    Below,
    /// `value > threshold`.
    Above,
}

impl Bound {
    fn holds(self, value: f64, threshold: f64) -> bool {
        match self {
            Bound::AtMost => value <= threshold,
            Bound::Below => value < threshold,
            Bound::Above => value > threshold,
        }
    }

    fn symbol(self) -> &'static str {
        match self {
            Bound::AtMost => "<=",
            Bound::Below => "<",
            Bound::Above => ">",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub suite: Suite,
    pub name: String,
    pub criterion: Option<u8>,
    pub trials: usize,
    pub value: f64,
    pub bound: Bound,
    pub threshold: f64,
    pub seconds: f64,
    pub budget_seconds: f64,
    pub pass: bool,
    pub detail: String,
}

impl Check {
    /// `suite.name`.
    pub fn id(&self) -> String {
        format!("{}.{}", self.suite, self.name)
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<40} {:>6} trials  value {:.3e} {} {:.1e}  {:.2}s/{:.0}s",
            if self.pass { "PASS" } else { "FAIL" },
            self.id(),
            self.trials,
            self.value,
            self.bound.symbol(),
            self.threshold,
            self.seconds,
            self.budget_seconds
        )?;
        if !self.detail.is_empty() {
            write!(f, "  ({})", self.detail)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub checks: Vec<Check>,
    pub passed: usize,
    pub failed: usize,
    pub pass: bool,
}

impl Report {
    fn from_checks(checks: Vec<Check>) -> Self {
        let passed = checks.iter().filter(|c| c.pass).count();
        let failed = checks.len() - passed;
        Self {
            checks,
            passed,
            failed,
            pass: failed == 0,
        }
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.pass)
    }

    pub fn criterion(&self, n: u8) -> Vec<&Check> {
        self.checks.iter().filter(|c| c.criterion == Some(n)).collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Options {
    pub fault: Option<Fault>,
}

/// What a check measured.
struct Outcome {
    trials: usize,
    value: f64,
    detail: String,
}

impl Outcome {
    fn new(trials: usize, value: f64) -> Self {
        Self {
            trials,
            value,
            detail: String::new(),
        }
    }

    fn with(mut self, detail: impl Into<String>) -> Self {
        self.detail = detail.into();
        self
    }
}

struct Spec {
    suite: Suite,
    name: &'static str,
    criterion: Option<u8>,
    bound: Bound,
    threshold: f64,
    budget: f64,
}

const fn spec(suite: Suite, name: &'static str, criterion: Option<u8>, bound: Bound, threshold: f64, budget: f64) -> Spec {
    Spec {
        suite,
        name,
        criterion,
        bound,
        threshold,
        budget,
    }
}

fn finish(s: &Spec, seconds: f64, res: Result<Outcome>) -> Check {
    let (trials, value, detail) = match res {
        Ok(o) => (o.trials, o.value, o.detail),
        Err(e) => (0, f64::NAN, format!("error: {e}")),
    };
    let within = seconds <= s.budget;
    let mut detail = detail;
    if !within {
        let over = format!("over budget: {seconds:.1}s");
        detail = if detail.is_empty() { over } else { format!("{detail}; {over}") };
    }
    Check {
        suite: s.suite,
        name: s.name.to_string(),
        criterion: s.criterion,
        trials,
        value,
        bound: s.bound,
        threshold: s.threshold,
        seconds,
        budget_seconds: s.budget,
        pass: value.is_finite() && s.bound.holds(value, s.threshold) && within,
        detail,
    }
}

fn timed(s: Spec, f: impl FnOnce() -> Result<Outcome>) -> Check {
    let t0 = Instant::now();
    let res = f();
    finish(&s, t0.elapsed().as_secs_f64(), res)
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Runs one suite, or every suite when `suite` is `None`.
pub fn run(suite: Option<Suite>, opts: &Options) -> Report {
    let suites: Vec<Suite> = match suite {
        Some(s) => vec![s],
        None => Suite::ALL.to_vec(),
    };
    let mut checks = Vec::new();
    for s in suites {
        checks.extend(match s {
            Suite::Tensor => tensor_suite(),
            Suite::Graded => graded_suite(),
            Suite::Routing => routing_suite(),
            Suite::Objective => objective_suite(),
            Suite::Tasks => tasks_suite(),
            Suite::Geometry => geometry_suite(opts),
            Suite::Category => category_suite(),
            Suite::Diagnostics => diagnostics_suite(),
        });
    }
    Report::from_checks(checks)
}

/// A one-layer model with two grades of width 4 and three admissible edges, plus a batch of
/// two sequences of length 3.
pub fn toy_model(norm: NormKind, gate: GateKind, seed: u64) -> Result<(GradedModel, Batch)> {
    let g = Grading::new(&[("sem", 4), ("num", 4)])?;
    let edges = EdgeSet::new(&g, [Edge::new(0, 1), Edge::new(1, 1), Edge::new(1, 0)])?;
    let mut r = rng(seed);
    let mut rc = RoutingConfig::new(&edges, 2.0, 0.7, 0.1, gate, 3)?;
    rc.tau = (0..3).map(|_| r.gen_range(0.0..0.3)).collect();
    let mut layer = GradedLayer::init(&g, edges, rc, norm, r.gen())?;
    layer.router = RouterParams::init(&g, &layer.edges, 3, 0.5, &mut r);
    layer.bias = Some((0..3).map(|_| Tensor::randn(1, 4, 0.1, &mut r)).collect());
    let mut readout = Readout::new(&g, Tensor::randn(3, 8, 0.7, &mut r))?;
    readout.bias = Tensor::randn(1, 3, 0.1, &mut r);
    let model = GradedModel::new(g.clone(), vec![layer], readout)?;
    let z0 = GradedVector::randn(&g, 6, 1.0, &mut r);
    let targets = (0..6).map(|_| r.gen_range(0..3)).collect();
    Ok((model, Batch::new(z0, targets, 3)?))
}

fn random_head<R: Rng>(classes: usize, dim: usize, r: &mut R) -> Result<SoftmaxHead> {
    let bias = (0..classes).map(|_| r.gen_range(-0.5..0.5)).collect();
    SoftmaxHead::new(Tensor::randn(classes, dim, 1.0, r), bias)
}

fn gauss<R: Rng>(n: usize, r: &mut R) -> Vec<f64> {
    Tensor::randn(1, n, 1.0, r).into_data()
}

/// Richardson-extrapolated central differences against the tape gradient.
fn tape_fd_error(theta: &Tensor, f: impl Fn(&mut Tape, Var) -> Result<Var>) -> Result<f64> {
    let mut t = Tape::new();
    let x = t.leaf(theta.clone());
    let l = f(&mut t, x)?;
    let analytic = t.backward(l)?.wrt(x);
    let eval = |th: &Tensor| {
        let mut t = Tape::new();
        let x = t.leaf(th.clone());
        f(&mut t, x).map(|l| t.scalar(l)).unwrap_or(f64::NAN)
    };
    let h = 2e-3;
    let coarse = central_difference(eval, theta, h);
    let fine = central_difference(eval, theta, h / 2.0);
    let numeric = fine.zip_map(&coarse, |a, b| (4.0 * a - b) / 3.0)?;
    Ok(max_relative_error(&analytic, &numeric, FD_EPS_ABS))
}

fn tensor_suite() -> Vec<Check> {
    let s = Suite::Tensor;
    vec![
        timed(spec(s, "primitive-gradients", None, Bound::AtMost, 1e-5, 30.0), || {
            let mut r = rng(101);
            let mut worst: f64 = 0.0;
            let trials = 100;
            for _ in 0..trials {
                let x = Tensor::randn(3, 4, 3.0, &mut r).map(|v| v.clamp(-10.0, 10.0));
                let a = Tensor::randn(4, 4, 0.5, &mut r);
                let w = Tensor::randn(3, 4, 1.0, &mut r);
                let targets: Vec<usize> = (0..3).map(|_| r.gen_range(0..4)).collect();
                let err = tape_fd_error(&x, |t, x| {
                    let av = t.constant(a.clone());
                    let wv = t.constant(w.clone());
                    let h = t.matmul(x, av)?;
                    let h = t.act(h, Act::Tanh);
                    let n = t.layer_norm(h, 1e-5);
                    let m = t.mul(n, wv)?;
                    let rms = t.rms_norm(x, 1e-5);
                    let sm = t.softmax(rms);
                    let lse = t.logsumexp(x);
                    let ce = t.cross_entropy(m, &targets)?;
                    let ce = t.mean(ce);
                    let s1 = t.sum(sm);
                    let s2 = t.mean(lse);
                    let acc = t.add(ce, s1)?;
                    t.add(acc, s2)
                })?;
                worst = worst.max(err);
            }
            Ok(Outcome::new(trials, worst).with("matmul, tanh, layer/rms norm, softmax, logsumexp, cross-entropy"))
        }),
        timed(spec(s, "softmax-normalization", None, Bound::AtMost, 1e-12, 5.0), || {
            let mut r = rng(102);
            let mut worst: f64 = 0.0;
            for _ in 0..1000 {
                let n = r.gen_range(1..12);
                let x: Vec<f64> = (0..n).map(|_| r.gen_range(-10.0..10.0)).collect();
                let p = softmax_row(&x, None);
                if p.iter().any(|&v| v < 0.0) {
                    return Ok(Outcome::new(1000, f64::INFINITY).with("negative probability"));
                }
                worst = worst.max((p.iter().sum::<f64>() - 1.0).abs());
            }
            Ok(Outcome::new(1000, worst))
        }),
        timed(spec(s, "logsumexp-shift", None, Bound::AtMost, 1e-12, 5.0), || {
            let mut r = rng(103);
            let mut worst: f64 = 0.0;
            for _ in 0..1000 {
                let n = r.gen_range(1..12);
                let x: Vec<f64> = (0..n).map(|_| r.gen_range(-10.0..10.0)).collect();
                let c = r.gen_range(-50.0..50.0);
                let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
                let gap = (logsumexp_row(&shifted) - logsumexp_row(&x) - c).abs();
                worst = worst.max(gap / (1.0 + c.abs()));
            }
            Ok(Outcome::new(1000, worst).with("relative to 1 + |c|"))
        }),
    ]
}

fn random_grading<R: Rng>(r: &mut R, max_grades: usize, max_dim: usize) -> Result<Grading> {
    let n = r.gen_range(2..=max_grades);
    let dims: Vec<(String, usize)> = (0..n).map(|g| (format!("g{g}"), r.gen_range(1..=max_dim))).collect();
    Grading::new(&dims)
}

fn random_edges<R: Rng>(grading: &Grading, r: &mut R) -> Result<EdgeSet> {
    let n = grading.len();
    let mut all: Vec<Edge> = (0..n).flat_map(|g| (0..n).map(move |h| Edge::new(g, h))).collect();
    all.shuffle(r);
    let k = r.gen_range(1..=all.len());
    EdgeSet::new(grading, all.into_iter().take(k))
}

fn random_blocks<R: Rng>(grading: &Grading, edges: &EdgeSet, r: &mut R) -> Vec<BlockMap> {
    edges
        .edges()
        .iter()
        .map(|&e| BlockMap::new(e, Tensor::randn(grading.dim(e.dst), grading.dim(e.src), 1.0, r)))
        .collect()
}

fn random_reweighting<R: Rng>(grading: &Grading, r: &mut R) -> Result<EgtReweighting> {
    let d = grading
        .dims()
        .iter()
        .map(|&d| Tensor::eye(d).add(&Tensor::randn(d, d, 0.3, r)))
        .collect::<Result<Vec<_>>>()?;
    EgtReweighting::new(grading, d)
}

/// A random band that is realizable on `n` grades.
fn random_band<R: Rng>(n: usize, r: &mut R) -> Vec<i64> {
    let mut cand: Vec<i64> = (-2..=2).filter(|d: &i64| d.unsigned_abs() < n as u64).collect();
    cand.shuffle(r);
    let k = r.gen_range(1..=cand.len());
    cand.truncate(k);
    cand
}

fn graded_suite() -> Vec<Check> {
    let s = Suite::Graded;
    vec![
        timed(spec(s, "round-trip", None, Bound::AtMost, 0.0, 5.0), || {
            let mut r = rng(201);
            let mut worst: f64 = 0.0;
            for _ in 0..200 {
                let g = random_grading(&mut r, 5, 8)?;
                let x = Tensor::randn(3, g.ambient_dim(), 5.0, &mut r);
                let z = GradedVector::from_ambient(&g, &x)?;
                worst = worst.max(z.to_ambient().max_abs_diff(&x));
                let h = r.gen_range(0..g.len());
                let inc = GradedVector::include(&g, z.block(h), h)?;
                worst = worst.max(inc.project(h)?.max_abs_diff(z.block(h)));
                for other in (0..g.len()).filter(|&o| o != h) {
                    worst = worst.max(inc.project(other)?.norm());
                }
            }
            Ok(Outcome::new(200, worst).with("bit-exact reassembly and projection"))
        }),
        timed(spec(s, "compose-vs-dense", None, Bound::AtMost, 1e-12, 5.0), || {
            let mut r = rng(202);
            let mut worst: f64 = 0.0;
            for _ in 0..200 {
                let g = random_grading(&mut r, 5, 8)?;
                let phi = random_blocks(&g, &random_edges(&g, &mut r)?, &mut r);
                let psi = random_blocks(&g, &random_edges(&g, &mut r)?, &mut r);
                let comp = assemble_dense(&g, &compose_blocks(&psi, &phi)?)?;
                let dense = assemble_dense(&g, &psi)?.matmul(&assemble_dense(&g, &phi)?)?;
                let scale = 1.0 + dense.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
                worst = worst.max(comp.max_abs_diff(&dense) / scale);
            }
            Ok(Outcome::new(200, worst).with("relative to the largest dense entry"))
        }),
        timed(spec(s, "lgt-sharing", None, Bound::AtMost, 0.0, 5.0), || {
            let mut r = rng(203);
            let mut mismatches = 0usize;
            let trials = 100;
            for t in 0..trials {
                let g = Grading::uniform(r.gen_range(2..=5), r.gen_range(1..=4))?;
                let band = random_band(g.len(), &mut r);
                let (edges, bank) = build_banded_lgt(&g, &band, t)?;
                let target = *band.choose(&mut r).expect("non-empty band");
                let mut layer = LayerBlocks::Banded(bank);
                let before = layer.block_maps(&edges)?;
                if let LayerBlocks::Banded(bank) = &mut layer {
                    bank.kernel_mut(target).expect("in band").data_mut()[0] += 1.0;
                }
                let after = layer.block_maps(&edges)?;
                mismatches += before
                    .iter()
                    .zip(&after)
                    .filter(|(b, a)| (b.weight != a.weight) != (b.edge.increment() == target))
                    .count();
            }
            Ok(Outcome::new(trials as usize, mismatches as f64).with("blocks changed iff their increment was perturbed"))
        }),
        timed(spec(s, "egt-logits", None, Bound::AtMost, 1e-10, 5.0), || {
            let mut r = rng(204);
            let mut worst: f64 = 0.0;
            for _ in 0..100 {
                let g = Grading::uniform(r.gen_range(2..=4), r.gen_range(1..=5))?;
                let d = random_reweighting(&g, &mut r)?;
                let w = Tensor::randn(5, g.ambient_dim(), 1.0, &mut r);
                let z = GradedVector::randn(&g, 4, 1.0, &mut r);
                let zc = conjugate_state(&z, &d)?;
                let mut logits = Tensor::zeros(4, 5);
                let mut conj = Tensor::zeros(4, 5);
                for h in 0..g.len() {
                    let wh = w.slice_cols(g.offset(h), g.dim(h))?;
                    logits = logits.add(&z.block(h).matmul(&wh.transpose())?)?;
                    let wd = wh.matmul(d.d(h))?;
                    conj = conj.add(&zc.block(h).matmul(&wd.transpose())?)?;
                }
                worst = worst.max(logits.max_abs_diff(&conj));
                let (edges, bank) = build_banded_lgt(&g, &random_band(g.len(), &mut r), r.gen())?;
                let blocks = LayerBlocks::Banded(bank).block_maps(&edges)?;
                let there = egt_conjugate(&blocks, &d, ConjugateDirection::ToLgt)?;
                let back = egt_conjugate(&there, &d, ConjugateDirection::FromLgt)?;
                for (a, b) in blocks.iter().zip(&back) {
                    worst = worst.max(a.weight.max_abs_diff(&b.weight));
                }
            }
            Ok(Outcome::new(100, worst).with("readout logits and conjugation round trip"))
        }),
        timed(spec(s, "param-counts", Some(11), Bound::AtMost, 0.0, 5.0), || {
            let mut r = rng(205);
            let mut mismatches = 0usize;
            let mut log = Vec::new();
            for t in 0..20u64 {
                let heads = r.gen_range(1..=4);
                let d = r.gen_range(2..=16);
                let d_q = r.gen_range(1..=8);
                let g = Grading::uniform(r.gen_range(2..=5), d)?;
                let band = random_band(g.len(), &mut r);
                let edges = EdgeSet::banded(&g, &band)?;
                let widths: Vec<usize> = band.iter().map(|_| r.gen_range(1..=32)).collect();
                let egt = EgtReweighting::scalar_geometric(&g, r.gen_range(0.5..2.0))?;
                let attn = AttentionBlockParams::lgt(&g, &edges, heads, d_q, t)?;
                let ffn = FfnBlockParams::lgt(&g, &edges, &widths, t)?;
                let attn_closed = param_count_attention(&g, heads, d_q, band.len())?;
                let ffn_closed = param_count_ffn(&g, &widths)?;
                let (_, bank) = build_banded_lgt(&g, &band, t)?;
                let general = param_count_general(&g, &band)?;
                let pairs = [
                    (attn.param_count(), attn_closed),
                    (attn.clone().with_reweighting(egt.clone()).param_count(), attn_closed),
                    (ffn.param_count(), ffn_closed),
                    (ffn.clone().with_reweighting(egt.clone()).param_count(), ffn_closed),
                    (LayerBlocks::Banded(bank.clone()).param_count(), general),
                    (LayerBlocks::Egt { bank, reweighting: egt }.param_count(), general),
                ];
                mismatches += pairs.iter().filter(|(a, b)| a != b).count();
                log.push(format!("H={heads} d={d} d_q={d_q} |Δ|={}", band.len()));
            }
            Ok(Outcome::new(20, mismatches as f64).with("attention, FFN and general counts, LGT and EGT"))
        }),
        timed(spec(s, "ls-decoupling", None, Bound::AtMost, 1e-8, 5.0), || {
            let mut r = rng(206);
            let mut worst: f64 = 0.0;
            for _ in 0..20 {
                let g = random_grading(&mut r, 4, 4)?;
                let n = 200;
                // Orthonormal columns make cross-grade sample moments vanish exactly.
                let q = Tensor::randn(n, g.ambient_dim(), 1.0, &mut r).to_dmatrix().qr().q();
                let mut blocks = Vec::new();
                for h in 0..g.len() {
                    let qh = Tensor::from_dmatrix(&q.columns(g.offset(h), g.dim(h)).into_owned());
                    let mix = Tensor::randn(g.dim(h), g.dim(h), 1.0, &mut r).add(&Tensor::eye(g.dim(h)).scale(3.0))?;
                    blocks.push(qh.matmul(&mix)?.scale((n as f64).sqrt()));
                }
                let z = GradedVector::new(&g, blocks)?;
                let y = GradedVector::randn(&g, n, 1.0, &mut r);
                let edges = random_edges(&g, &mut r)?;
                let per = fit_blocks_least_squares(&g, &z, &y, &edges)?;
                let joint = fit_blocks_joint(&g, &z, &y, &edges)?;
                for (a, b) in per.iter().zip(&joint) {
                    worst = worst.max(a.weight.sub(&b.weight)?.norm());
                }
            }
            Ok(Outcome::new(20, worst).with("Frobenius gap, per-block vs joint"))
        }),
        timed(spec(s, "planted-recovery", None, Bound::Below, 0.05, 10.0), || {
            let mut r = rng(207);
            let g = Grading::new(&[("a", 3), ("b", 4), ("c", 2)])?;
            let edges = EdgeSet::new(&g, [Edge::new(0, 1), Edge::new(2, 1), Edge::new(1, 2), Edge::new(0, 0)])?;
            let planted = random_blocks(&g, &edges, &mut r);
            let n = 10_000;
            let z = GradedVector::randn(&g, n, 1.0, &mut r);
            let mut y = GradedVector::zeros(&g, n);
            for b in &planted {
                let add = y.block(b.edge.dst).add(&b.apply(&g, &z)?)?;
                y.set_block(b.edge.dst, add);
            }
            let fit = fit_blocks_least_squares(&g, &z, &y, &edges)?;
            let worst = planted
                .iter()
                .zip(&fit)
                .map(|(p, f)| Ok(f.weight.sub(&p.weight)?.norm() / p.weight.norm()))
                .collect::<Result<Vec<f64>>>()?
                .into_iter()
                .fold(0.0, f64::max);
            Ok(Outcome::new(edges.len(), worst).with("relative Frobenius error, N = 10000"))
        }),
    ]
}

/// Mean next-token loss of a fixed softmax head on the ambient state.
fn head_loss(head: &SoftmaxHead, z: &GradedVector, y: usize) -> f64 {
    head.nll(z.to_ambient().row(0), y)
}

/// `∇_z` of [`head_loss`] for a single-row state: `Wᵀ(p − e_y)`.
fn head_grad(head: &SoftmaxHead, z: &GradedVector, y: usize) -> Vec<f64> {
    let amb = z.to_ambient();
    let mut p = head.probs(amb.row(0));
    p[y] -= 1.0;
    (0..amb.cols())
        .map(|j| (0..head.classes()).map(|c| head.weight.get(c, j) * p[c]).sum())
        .collect()
}

fn routing_suite() -> Vec<Check> {
    let s = Suite::Routing;
    vec![
        timed(spec(s, "masking", Some(2), Bound::AtMost, 1e-12, 5.0), || {
            let mut r = rng(301);
            let mut worst: f64 = 0.0;
            let trials = 1000;
            for _ in 0..trials {
                let g = random_grading(&mut r, 4, 3)?;
                let e = random_edges(&g, &mut r)?;
                let seq = r.gen_range(1..=3);
                let z = GradedVector::randn(&g, seq * r.gen_range(1..=2), 1.0, &mut r);
                let router = RouterParams::init(&g, &e, 2, r.gen_range(0.1..3.0), &mut r);
                let n = g.len();
                let grid = scatter_to_grid(&e, n, &routing_logits(&router, &e, &z, seq)?);
                let dest = grid_destinations(n);
                let t_sm = r.gen_range(0.05..2.0);
                for kind in [GateKind::SoftmaxGlobal, GateKind::SoftmaxPerDestination, GateKind::Logistic, GateKind::HardArgmax] {
                    let a = gate(&grid, &dest, kind, t_sm)?;
                    for t in 0..a.rows() {
                        for c in 0..n * n {
                            if !e.contains(Edge::new(c / n, c % n)) && a.get(t, c) != 0.0 {
                                return Ok(Outcome::new(trials, f64::INFINITY).with(format!("{kind:?} leaks onto {}:{}", c / n, c % n)));
                            }
                        }
                        match kind {
                            GateKind::SoftmaxGlobal | GateKind::HardArgmax => {
                                worst = worst.max((a.row(t).iter().sum::<f64>() - 1.0).abs());
                            }
                            GateKind::SoftmaxPerDestination => {
                                for h in 0..n {
                                    if e.incoming(h).is_empty() {
                                        continue;
                                    }
                                    let sum: f64 = (0..n).map(|src| a.get(t, src * n + h)).sum();
                                    worst = worst.max((sum - 1.0).abs());
                                }
                            }
                            GateKind::Logistic => {}
                        }
                    }
                }
            }
            Ok(Outcome::new(trials, worst).with("off-edge weights exactly 0; value is the on-edge sum error"))
        }),
        timed(spec(s, "hard-limit", Some(3), Bound::AtMost, 0.0, 5.0), || {
            let mut r = rng(302);
            let temps = [1.0, 0.3, 0.1, 0.03];
            let beta = 2.0;
            let mut violations = 0usize;
            let mut qualifying = 0usize;
            let trials = 500;
            for _ in 0..trials {
                let k = r.gen_range(2..=4);
                let gap = r.gen_range(0.05..2.0);
                let best = r.gen_range(0..k);
                let top = r.gen_range(-1.0..1.0);
                let dl: Vec<f64> = (0..k)
                    .map(|j| if j == best { top } else { top - gap - r.gen_range(0.0..1.0) })
                    .collect();
                let logits = Tensor::zeros(1, k);
                let util = Tensor::row_vector(&dl);
                let aug = augment_logits(&logits, &util, beta, &vec![0.1; k])?;
                let dest = vec![0; k];
                let mut prev = 0.0;
                for &t_sm in &temps {
                    let mass = gate(&aug, &dest, GateKind::SoftmaxGlobal, t_sm)?.get(0, best);
                    if mass < prev {
                        violations += 1;
                    }
                    if gap * beta / t_sm >= 10.0 {
                        qualifying += 1;
                        if mass < 0.99 {
                            violations += 1;
                        }
                    }
                    prev = mass;
                }
            }
            Ok(Outcome::new(trials, violations as f64)
                .with(format!("monotone in 1/T_sm; {qualifying} sweep points with gap·β/T_sm >= 10 need mass >= 0.99")))
        }),
        timed(spec(s, "first-order-sign", None, Bound::AtMost, 0.01, 5.0), || {
            let mut r = rng(303);
            let trials = 1000;
            let mut disagree = 0usize;
            for _ in 0..trials {
                let g = Grading::uniform(r.gen_range(2..=4), r.gen_range(2..=4))?;
                let head = random_head(6, g.ambient_dim(), &mut r)?;
                let z = GradedVector::randn(&g, 1, 1.0, &mut r);
                let y = r.gen_range(0..6);
                let h = r.gen_range(0..g.len());
                let grad = head_grad(&head, &z, y);
                let gh = &grad[g.offset(h)..g.offset(h) + g.dim(h)];
                let gnorm = gh.iter().map(|x| x * x).sum::<f64>().sqrt();
                let u = gauss(g.dim(h), &mut r);
                let unorm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
                let scale = 0.01 * gnorm * r.gen_range(0.0..1.0) / unorm;
                let delta: Vec<f64> = u.iter().map(|x| x * scale).collect();
                let zp = replace_grade(&z, h, z.block(h).add(&Tensor::row_vector(&delta))?);
                let dl = head_loss(&head, &z, y) - head_loss(&head, &zp, y);
                let first: f64 = -gh.iter().zip(&delta).map(|(a, b)| a * b).sum::<f64>();
                if dl.signum() != first.signum() {
                    disagree += 1;
                }
            }
            Ok(Outcome::new(trials, disagree as f64 / trials as f64).with("disagreement rate, ‖δ‖ ≤ 0.01‖∇‖"))
        }),
        timed(spec(s, "monotone-descent", Some(14), Bound::AtMost, 0.0, 30.0), || {
            let mut r = rng(304);
            let trials = 500;
            let mut failures = 0usize;
            let mut rejected = 0usize;
            let mut eta_min: f64 = 1.0;
            let mut done = 0;
            while done < trials {
                let g = Grading::uniform(r.gen_range(2..=4), r.gen_range(2..=4))?;
                let e = random_edges(&g, &mut r)?;
                let head = random_head(5, g.ambient_dim(), &mut r)?;
                let z = GradedVector::randn(&g, 1, 1.0, &mut r);
                let y = r.gen_range(0..5);
                let grad = head_grad(&head, &z, y);
                let base = head_loss(&head, &z, y);
                let mut cands = Vec::new();
                let mut utils = Vec::new();
                for edge in e.edges() {
                    let h = edge.dst;
                    let gh = &grad[g.offset(h)..g.offset(h) + g.dim(h)];
                    let step = r.gen_range(0.1..1.5);
                    let gnorm = gh.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let c: Vec<f64> = z
                        .block(h)
                        .row(0)
                        .iter()
                        .zip(gh)
                        .map(|(zv, gv)| zv - step * gv + 0.3 * step * gnorm * r.gen_range(-1.0..1.0))
                        .collect();
                    let cand = Tensor::row_vector(&c);
                    utils.push(base - head_loss(&head, &replace_grade(&z, h, cand.clone()), y));
                    cands.push(cand);
                }
                if utils.iter().any(|&u| !(u > 0.0)) {
                    rejected += 1;
                    continue;
                }
                done += 1;
                let logits = Tensor::randn(1, e.len(), 1.0, &mut r);
                let alpha = gate(&logits, &edge_destinations(&e), GateKind::SoftmaxGlobal, 1.0)?;
                let loss_at = |eta: f64| -> Result<f64> {
                    Ok(head_loss(&head, &step_scaled_update(&e, &z, &cands, &alpha, eta)?, y))
                };
                let mut eta0 = 1.0;
                let mut found = false;
                for _ in 0..40 {
                    if loss_at(eta0)? < base {
                        found = true;
                        break;
                    }
                    eta0 /= 2.0;
                }
                let ok = found && [0.5, 0.25, 0.125].iter().all(|&f| loss_at(eta0 * f).is_ok_and(|l| l < base));
                if !ok {
                    failures += 1;
                }
                eta_min = eta_min.min(eta0);
            }
            Ok(Outcome::new(trials, failures as f64).with(format!(
                "loss decreases at η₀ and η₀/2, /4, /8; smallest η₀ = {eta_min}; {rejected} instances redrawn for a non-positive utility"
            )))
        }),
        timed(spec(s, "grading-preservation", None, Bound::AtMost, 0.0, 5.0), || {
            let mut r = rng(305);
            let mut worst: f64 = 0.0;
            for _ in 0..200 {
                let g = random_grading(&mut r, 5, 4)?;
                let e = random_edges(&g, &mut r)?;
                let z = GradedVector::randn(&g, 3, 1.0, &mut r);
                let cands: Vec<Tensor> = e.edges().iter().map(|x| Tensor::randn(3, g.dim(x.dst), 1.0, &mut r)).collect();
                let alpha = Tensor::randn(3, e.len(), 1.0, &mut r).map(f64::abs);
                let out = morphic_update(&e, &z, &cands, &alpha, None)?;
                for h in (0..g.len()).filter(|&h| e.incoming(h).is_empty()) {
                    worst = worst.max(out.block(h).max_abs_diff(z.block(h)));
                }
            }
            Ok(Outcome::new(200, worst).with("grades without incoming edges are untouched"))
        }),
    ]
}

fn objective_suite() -> Vec<Check> {
    let s = Suite::Objective;
    let lgt = |reg| ObjectiveConfig {
        lambda: 0.4,
        mu_sp: 0.3,
        beta: None,
        regularizer: reg,
        learn_thresholds: true,
    };
    vec![
        timed(spec(s, "gradient-fidelity", Some(1), Bound::Below, 1e-4, 30.0), || {
            let mut worst: f64 = 0.0;
            let combos = [
                (NormKind::LayerNorm, GateKind::SoftmaxGlobal, Regularizer::Entropy),
                (NormKind::RmsNorm, GateKind::SoftmaxPerDestination, Regularizer::GroupLasso),
                (NormKind::None, GateKind::Logistic, Regularizer::Entropy),
            ];
            let mut params = 0;
            for (i, (norm, gate, reg)) in combos.into_iter().enumerate() {
                let (m, b) = toy_model(norm, gate, 400 + i as u64)?;
                let c = lgt(reg);
                let frozen = m.frozen_margins(&b)?;
                let (_, grads) = objective_and_gradient(&m, &b, &c, &frozen)?;
                let flat: Vec<f64> = grads.into_iter().flat_map(Tensor::into_data).collect();
                params = flat.len();
                let analytic = Tensor::matrix(1, flat.len(), flat)?;
                let numeric = central_difference(
                    |th| {
                        let mut mm = m.clone();
                        mm.set_flat_params(th).and_then(|_| evaluate(&mm, &b, &c, &frozen)).map_or(f64::NAN, |bd| bd.total)
                    },
                    &m.flat_params(),
                    1e-5,
                );
                worst = worst.max(max_relative_error(&analytic, &numeric, FD_EPS_ABS));
            }
            Ok(Outcome::new(combos.len(), worst).with(format!("2 grades, d = 4, |E| = 3, {params} parameters per model")))
        }),
        timed(spec(s, "egt-invariance", Some(12), Bound::AtMost, 1e-8, 10.0), || {
            let mut r = rng(402);
            let mut worst: f64 = 0.0;
            let mut trials = 0;
            for gate in [GateKind::SoftmaxGlobal, GateKind::SoftmaxPerDestination, GateKind::Logistic] {
                for _ in 0..4 {
                    let (m, b) = toy_model(NormKind::None, gate, r.gen())?;
                    let d = random_reweighting(&m.grading, &mut r)?;
                    let mc = m.conjugate(&d)?;
                    let bc = Batch::new(conjugate_state(&b.z0, &d)?, b.targets.clone(), b.seq_len)?;
                    let c = lgt(Regularizer::Entropy);
                    let (l, lc) = (evaluate(&m, &b, &c, &UtilitySource::Detached)?, evaluate(&mc, &bc, &c, &UtilitySource::Detached)?);
                    worst = worst.max((l.total - lc.total).abs());
                    for (u, uc) in m.utilities(&b)?.iter().zip(&mc.utilities(&bc)?) {
                        worst = worst.max(u.max_abs_diff(uc));
                    }
                    trials += 1;
                }
            }
            Ok(Outcome::new(trials, worst).with("L_GT and every ΔL_t before and after conjugation"))
        }),
        timed(spec(s, "lower-bound", None, Bound::AtMost, 0.0, 5.0), || {
            let mut worst = f64::NEG_INFINITY;
            for seed in 0..20 {
                let (m, b) = toy_model(NormKind::LayerNorm, GateKind::SoftmaxGlobal, 410 + seed)?;
                for reg in [Regularizer::Entropy, Regularizer::GroupLasso] {
                    let c = lgt(reg);
                    let total = evaluate(&m, &b, &c, &UtilitySource::Detached)?.total;
                    worst = worst.max(objective_lower_bound(&m, &b, &c)? - total - 1e-12);
                }
            }
            Ok(Outcome::new(40, worst.max(0.0)).with("bound minus objective, 1e-12 slack"))
        }),
        timed(spec(s, "threshold-gradient", None, Bound::AtMost, 1e-5, 5.0), || {
            let (m, b) = toy_model(NormKind::LayerNorm, GateKind::SoftmaxGlobal, 420)?;
            let c = lgt(Regularizer::Entropy);
            let frozen = m.frozen_margins(&b)?;
            let mut worst: f64 = 0.0;
            for e in 0..3 {
                let analytic = threshold_gradient(&m, &b, &c, 0, e)?;
                if analytic < 0.0 {
                    return Ok(Outcome::new(e + 1, f64::INFINITY).with("negative threshold gradient"));
                }
                let h = 1e-6;
                let at = |dt: f64| -> Result<f64> {
                    let mut mm = m.clone();
                    mm.layers[0].routing.tau[e] += dt;
                    Ok(evaluate(&mm, &b, &c, &frozen)?.total)
                };
                let fd = (at(h)? - at(-h)?) / (2.0 * h);
                worst = worst.max((fd - analytic).abs() / analytic.abs().max(1e-12));
            }
            Ok(Outcome::new(3, worst).with("λβ mean σ(β(τ − ΔL)) against differences in τ"))
        }),
    ]
}

fn tasks_suite() -> Vec<Check> {
    let s = Suite::Tasks;
    vec![
        timed(spec(s, "modp-exactness", Some(8), Bound::AtMost, 1e-12, 5.0), || {
            let mut worst: f64 = 0.0;
            let mut trials = 0;
            for p in [5, 7, 11] {
                for a in 0..p {
                    for b in 0..p {
                        let lhs = modp_shift_matrix(p, a)?.matmul(&modp_shift_matrix(p, b)?)?;
                        if lhs != modp_shift_matrix(p, (a + b) % p)? {
                            return Ok(Outcome::new(trials, f64::INFINITY).with(format!("group law fails at p={p}, a={a}, b={b}")));
                        }
                        trials += 1;
                    }
                    let task = ModPTask::new(p, a, 5.0, p + 2)?;
                    let g = task.grading();
                    let prog = MorphicProgram::new(&g, SEM, vec![task.shift_block(), task.write_back_block()])?;
                    if realize_program(&g, &prog)? != embed_square(&modp_shift_matrix(p, a)?, p + 2)? {
                        return Ok(Outcome::new(trials, f64::INFINITY).with(format!("composite is not P_a at p={p}, a={a}")));
                    }
                    for s in [0.5f64, 1.0, 2.5, 5.0, 10.0] {
                        let oracle = ((p - 1) as f64 * (-s).exp()).ln_1p();
                        worst = worst.max((modp_exact_utility(p, a, s)?.post - oracle).abs());
                        trials += 1;
                    }
                }
            }
            let _ = NUM;
            Ok(Outcome::new(trials, worst).with("group law and composite exact; value is the post-update loss error"))
        }),
        timed(spec(s, "modp-utility-monotone", None, Bound::AtMost, 0.0, 5.0), || {
            let mut violations = 0;
            let mut trials = 0;
            for p in [5, 7, 11] {
                let mut prev = modp_exact_utility(p, 1, 0.0)?.delta;
                for i in 1..=40 {
                    let d = modp_exact_utility(p, 1, i as f64 * 0.25)?.delta;
                    if !(d > prev && d > 0.0) {
                        violations += 1;
                    }
                    prev = d;
                    trials += 1;
                }
            }
            Ok(Outcome::new(trials, violations as f64).with("ΔL(s) increasing and positive for s > 0"))
        }),
        timed(spec(s, "retrieval-mass", Some(9), Bound::AtMost, 0.0, 5.0), || {
            retrieval_mass_sweep(|_, x| 1.0 - x)
        }),
        timed(spec(s, "retrieval-mass-union", None, Bound::AtMost, 0.0, 5.0), || {
            retrieval_mass_sweep(|k, x| 1.0 - (k - 1) as f64 * x)
        }),
        timed(spec(s, "dyck-utility", None, Bound::AtMost, 1e-12, 5.0), || {
            let kappa = 2.0;
            let task = DyckTask::new(8, kappa, 4)?;
            let g = task.grading();
            let block = task.increment_block();
            let mut worst: f64 = 0.0;
            let mut c_fit: f64 = 0.0;
            let mut tokens = 0;
            let mut r = rng(504);
            for rec in gen_dyck_dataset(20, 50, 4, 504)? {
                let carried: Vec<i64> = std::iter::once(0).chain(rec.depth.iter().copied()).take(rec.deltas.len()).collect();
                let out = block.apply(&g, &task.encode(&rec.deltas, &carried))?;
                let noisy: Vec<i64> = carried.iter().map(|&s| s + r.gen_range(-2..=2)).collect();
                let out_noisy = block.apply(&g, &task.encode(&rec.deltas, &noisy))?;
                for (t, &s) in rec.depth.iter().enumerate() {
                    let dl = task.sign_loss(0.0, s) - task.sign_loss(out.get(t, 0), s);
                    worst = worst.max((dl - kappa).abs());
                    let err = (noisy[t] - carried[t]).abs();
                    if err > 0 {
                        let dln = task.sign_loss(0.0, s) - task.sign_loss(out_noisy.get(t, 0), s);
                        c_fit = c_fit.max((kappa - dln) / err as f64);
                    }
                    tokens += 1;
                }
            }
            if !c_fit.is_finite() {
                return Ok(Outcome::new(tokens, f64::INFINITY).with("no finite c"));
            }
            Ok(Outcome::new(tokens, worst).with(format!("ΔL = κ with the true carried depth; fitted c = {c_fit:.3} under perturbed depths")))
        }),
    ]
}

/// Counts margin instances whose retrieval mass falls below `bound(k, e^(−γ/σ²))`.
///
/// Each grid cell draws random margin queries plus the tied query in which every other key
/// scores exactly `γ` below the target.
fn retrieval_mass_sweep(bound: impl Fn(usize, f64) -> f64) -> Result<Outcome> {
    let mut r = rng(503);
    let mut trials = 0;
    let mut by_k = Vec::new();
    let mut slack = f64::INFINITY;
    for k in [2, 4, 8] {
        let mut violations = 0usize;
        for gamma in [0.5, 1.0, 2.0] {
            for sigma2 in [0.25, 0.5, 1.0] {
                let task = RetrievalTask::random(k, 16, sigma2, gamma, 1.0, r.gen())?;
                let b = bound(k, (-gamma / sigma2).exp());
                let mut queries: Vec<(usize, Tensor)> = (0..25)
                    .map(|_| {
                        let i = r.gen_range(0..k);
                        (i, task.margin_query(i, &mut r))
                    })
                    .collect();
                let i = r.gen_range(0..k);
                queries.push((i, Tensor::row_vector(task.keys.row(i)).scale(gamma * (1.0 + 1e-12))));
                for (i, q) in queries {
                    let out = retrieval_roundtrip(&task, &q)?;
                    if out.i_star != i || out.r[i] < b {
                        violations += 1;
                    }
                    slack = slack.min(out.r[i] - b);
                    trials += 1;
                }
            }
        }
        by_k.push((k, violations));
    }
    let total: usize = by_k.iter().map(|&(_, v)| v).sum();
    let per: Vec<String> = by_k.iter().map(|(k, v)| format!("k={k}: {v}")).collect();
    Ok(Outcome::new(trials, total as f64)
        .with(format!("violations {}; smallest r_i* minus bound = {slack:.3e}", per.join(", "))))
}

fn geometry_suite(opts: &Options) -> Vec<Check> {
    let s = Suite::Geometry;
    let flip = opts.fault == Some(Fault::GibbsSign);
    vec![
        timed(spec(s, "kl-identity", Some(4), Bound::AtMost, 1e-12, 5.0), || {
            let mut r = rng(601);
            let mut worst: f64 = 0.0;
            for _ in 0..1000 {
                let c = r.gen_range(2..=20);
                let d = r.gen_range(2..=6);
                let head = random_head(c, d, &mut r)?;
                let p = softmax_row(&gauss(c, &mut r), None);
                let (z, zp) = (gauss(d, &mut r), gauss(d, &mut r));
                worst = worst.max(kl_utility_identity(&p, &z, &zp, &head)?.gap);
            }
            Ok(Outcome::new(1000, worst))
        }),
        timed(spec(s, "gibbs-closed-form", Some(5), Bound::AtMost, 1e-8, 30.0), move || {
            let mut r = rng(602);
            let mut worst: f64 = 0.0;
            for _ in 0..100 {
                let k = r.gen_range(2..=6);
                let dl = gauss(k, &mut r);
                let tau: Vec<f64> = (0..k).map(|_| r.gen_range(0.0..0.5)).collect();
                let temp = r.gen_range(0.3..2.0);
                let margins: Vec<f64> = dl.iter().zip(&tau).map(|(a, b)| a - b).collect();
                let closed = if flip {
                    let neg: Vec<f64> = dl.iter().map(|x| -x).collect();
                    let neg_tau: Vec<f64> = tau.iter().map(|x| -x).collect();
                    gibbs_weights(&neg, &neg_tau, temp)?
                } else {
                    gibbs_weights(&dl, &tau, temp)?
                };
                let numeric = entropic_simplex_maximizer(&margins, temp, 20_000);
                let err = closed.iter().zip(&numeric).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                worst = worst.max(err);
            }
            Ok(Outcome::new(100, worst).with("sup-norm gap to the projected-gradient maximizer"))
        }),
        timed(spec(s, "utility-bounds", Some(6), Bound::AtMost, 0.0, 5.0), || {
            let mut r = rng(603);
            let mut violations = 0usize;
            for _ in 0..200 {
                let n = r.gen_range(2..=6);
                let q = Tensor::randn(n, n, 1.0, &mut r).to_dmatrix().qr().q();
                let eig = DVector::from_iterator(n, (0..n).map(|_| r.gen_range(0.1..5.0)));
                let a = &q * DMatrix::from_diagonal(&eig) * q.transpose();
                let a = (&a + a.transpose()) * 0.5;
                let quad = Quadratic::new(a, DVector::from_vec(gauss(n, &mut r)))?;
                let z = DVector::from_vec(gauss(n, &mut r));
                let delta = DVector::from_vec(gauss(n, &mut r)) * r.gen_range(0.01..2.0);
                if !utility_bounds_check(&quad, &z, &delta).holds() {
                    violations += 1;
                }
                let (_, l) = quad.curvature();
                let step = r.gen_range(0.01..0.99) * 2.0 / l;
                let g = quad.grad(&z);
                let b = utility_bounds_check(&quad, &z, &(-&g * step));
                let floor = gradient_step_floor(step, l, g.norm_squared());
                if !(b.holds() && floor > 0.0 && b.dl >= floor - 1e-12 * (1.0 + floor)) {
                    violations += 1;
                }
            }
            Ok(Outcome::new(200, violations as f64).with("both bounds on random steps; positive floor for a ∈ (0, 2/L)"))
        }),
        timed(spec(s, "fisher-third-order", Some(7), Bound::AtMost, 0.3, 10.0), || {
            let mut r = rng(604);
            let g = Grading::uniform(3, 3)?;
            let scales = [1e-2, 5e-3, 2.5e-3];
            let mut worst: f64 = 0.0;
            for _ in 0..20 {
                let head = random_head(5, 9, &mut r)?;
                let z = gauss(9, &mut r);
                let h = r.gen_range(0..3);
                let dz = gauss(3, &mut r);
                let gaps = scales
                    .iter()
                    .map(|s| {
                        let d: Vec<f64> = dz.iter().map(|x| x * s).collect();
                        Ok(fisher_quadratic_gain(&head, &g, &z, h, &d)?.gap)
                    })
                    .collect::<Result<Vec<f64>>>()?;
                worst = worst.max((log_log_slope(&scales, &gaps) - 3.0).abs());
            }
            Ok(Outcome::new(20, worst).with("|slope − 3| of the remainder under δz halving"))
        }),
        timed(spec(s, "fisher-argmax", Some(7), Bound::AtMost, 0.01, 10.0), || {
            let mut r = rng(605);
            let g = Grading::uniform(3, 3)?;
            let mut disagree = 0;
            for _ in 0..100 {
                let head = random_head(5, 9, &mut r)?;
                let z = gauss(9, &mut r);
                let mut exact = Vec::new();
                let mut quad = Vec::new();
                for _ in 0..4 {
                    let h = r.gen_range(0..3);
                    let u = gauss(3, &mut r);
                    let n = u.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let norm = r.gen_range(1e-4..1e-3);
                    let d: Vec<f64> = u.iter().map(|x| x * norm / n).collect();
                    let fg = fisher_quadratic_gain(&head, &g, &z, h, &d)?;
                    exact.push(fg.exact);
                    quad.push(fg.quadratic);
                }
                let argmax = |v: &[f64]| v.iter().enumerate().fold(0, |b, (i, &x)| if x > v[b] { i } else { b });
                if argmax(&exact) != argmax(&quad) {
                    disagree += 1;
                }
            }
            Ok(Outcome::new(100, disagree as f64 / 100.0).with("best of 4 candidates, ‖δz‖ ≤ 1e-3"))
        }),
        timed(spec(s, "additive-separable", Some(13), Bound::Below, 1e-12, 5.0), || {
            let mut r = rng(606);
            let mut worst: f64 = 0.0;
            for _ in 0..100 {
                let g = random_grading(&mut r, 5, 4)?;
                let w: Vec<f64> = (0..g.len()).map(|_| r.gen_range(0.1..3.0)).collect();
                let loss = |z: &GradedVector| -> Result<f64> {
                    Ok((0..g.len()).map(|k| w[k] * z.block(k).data().iter().map(|x| x * x).sum::<f64>()).sum())
                };
                let z = GradedVector::randn(&g, 1, 1.0, &mut r);
                let ups: Vec<(usize, Tensor)> = (0..g.len()).map(|k| (k, Tensor::randn(1, g.dim(k), 0.5, &mut r))).collect();
                worst = worst.max(additive_gains_check(loss, &z, &ups)?.gap);
            }
            Ok(Outcome::new(100, worst))
        }),
        timed(spec(s, "additive-shared-softmax", Some(13), Bound::AtMost, 0.2, 10.0), || {
            let mut r = rng(607);
            let eps = [1e-2, 5e-3, 2.5e-3, 1.25e-3];
            let mut worst: f64 = 0.0;
            for _ in 0..20 {
                let g = Grading::uniform(3, 3)?;
                let head = random_head(5, 9, &mut r)?;
                let y = r.gen_range(0..5);
                let z = GradedVector::randn(&g, 1, 1.0, &mut r);
                let (u0, u1) = (Tensor::randn(1, 3, 1.0, &mut r), Tensor::randn(1, 3, 1.0, &mut r));
                let gaps = eps
                    .iter()
                    .map(|&e| {
                        let ups = [(0, u0.scale(e)), (1, u1.scale(e))];
                        Ok(additive_gains_check(|z: &GradedVector| Ok(head_loss(&head, z, y)), &z, &ups)?.gap)
                    })
                    .collect::<Result<Vec<f64>>>()?;
                worst = worst.max((log_log_slope(&eps, &gaps) - 2.0).abs());
            }
            Ok(Outcome::new(20, worst).with("|slope − 2| of the interaction gap in ε"))
        }),
        timed(spec(s, "fisher-psd", None, Bound::AtMost, 1e-12, 5.0), || {
            let mut r = rng(608);
            let mut worst: f64 = 0.0;
            for _ in 0..200 {
                let p = softmax_row(&gauss(r.gen_range(2..=10), &mut r), None);
                let f = fisher_matrix(&p);
                for i in 0..p.len() {
                    worst = worst.max(f.row(i).iter().sum::<f64>().abs() * 100.0);
                }
                let min = f.to_dmatrix().symmetric_eigen().eigenvalues.min();
                worst = worst.max(-min);
            }
            Ok(Outcome::new(200, worst).with("max(100·|G1|, −λ_min)"))
        }),
        timed(spec(s, "selectivity", None, Bound::AtMost, 0.0, 5.0), || {
            let mut r = rng(609);
            let mut violations = 0;
            let mut trials = 0;
            for ratio in [5.0, 10.0, 20.0] {
                for _ in 0..100 {
                    let k = r.gen_range(2..=4);
                    let margin = r.gen_range(0.5..2.0);
                    let best = r.gen_range(0..k);
                    let top = r.gen_range(-1.0..1.0);
                    let dl: Vec<f64> = (0..k).map(|j| if j == best { top } else { top - margin - r.gen_range(0.0..0.5) }).collect();
                    let t_sm = r.gen_range(0.1..1.0);
                    let mass = selectivity_mass(&dl, best, ratio * t_sm, t_sm);
                    if mass < 1.0 - (-(ratio / 2.0) * margin).exp() {
                        violations += 1;
                    }
                    trials += 1;
                }
            }
            Ok(Outcome::new(trials, violations as f64).with("β/T ∈ {5, 10, 20}, |E| ≤ 4, margin ≥ 0.5"))
        }),
    ]
}

fn category_suite() -> Vec<Check> {
    let s = Suite::Category;
    vec![
        timed(spec(s, "adjoint-residual", Some(10), Bound::Below, 1e-12, 5.0), || {
            let mut r = rng(701);
            let mut worst: f64 = 0.0;
            for _ in 0..100 {
                let k = r.gen_range(2..=5);
                let d = r.gen_range(k..=8);
                let ds = r.gen_range(2..=5);
                let keys = Tensor::randn(k, d, 1.0, &mut r);
                let enc = Tensor::randn(d, ds, 1.0, &mut r);
                let pair = build_retrieval_adjoint(&keys, &enc, &random_spd(ds, &mut r))?;
                worst = worst.max(pair.residual / (1.0 + operator_norm(&pair.iota)));
            }
            Ok(Outcome::new(100, worst).with("all standard-basis probe pairs, relative to 1 + ‖ι‖"))
        }),
        timed(spec(s, "projector-idempotence", Some(10), Bound::Below, 1e-10, 5.0), || {
            let mut r = rng(702);
            let mut worst: f64 = 0.0;
            for _ in 0..100 {
                let dh = r.gen_range(3..=8);
                let dg = r.gen_range(1..dh);
                let pair = AdjointPair::isometric(Tensor::randn(dh, dg, 1.0, &mut r), random_spd(dh, &mut r))?;
                worst = worst.max(round_trip_projector(&pair)?.idempotence_gap);
                let k = r.gen_range(dg..=dh);
                let q = Tensor::randn(dh, k, 1.0, &mut r).to_dmatrix().qr().q();
                let keys = Tensor::from_dmatrix(&q.transpose());
                let iota = keys.transpose().matmul(&keys)?.matmul(&Tensor::randn(dh, dg, 1.0, &mut r))?;
                let pair = AdjointPair::isometric(iota, Tensor::eye(dh))?;
                worst = worst.max(round_trip_projector(&pair)?.idempotence_gap);
            }
            Ok(Outcome::new(200, worst).with("‖P² − P‖ for random and retrieval-linearized ι"))
        }),
        timed(spec(s, "projector-spectrum", None, Bound::AtMost, 1e-8, 5.0), || {
            let mut r = rng(703);
            let mut worst: f64 = 0.0;
            for _ in 0..100 {
                let dh = r.gen_range(3..=8);
                let dg = r.gen_range(1..dh);
                let pair = AdjointPair::isometric(Tensor::randn(dh, dg, 1.0, &mut r), random_spd(dh, &mut r))?;
                for l in round_trip_projector(&pair)?.spectrum {
                    worst = worst.max(l.abs().min((l - 1.0).abs()));
                }
            }
            Ok(Outcome::new(100, worst).with("distance of each eigenvalue to {0, 1}"))
        }),
        timed(spec(s, "associativity", None, Bound::AtMost, 1e-12, 5.0), || {
            let mut r = rng(704);
            let mut worst: f64 = 0.0;
            for _ in 0..200 {
                let g = random_grading(&mut r, 4, 6)?;
                let path: Vec<usize> = (0..4).map(|_| r.gen_range(0..g.len())).collect();
                let steps: Vec<BlockMap> = path
                    .windows(2)
                    .map(|w| BlockMap::new(Edge::new(w[0], w[1]), Tensor::randn(g.dim(w[1]), g.dim(w[0]), 1.0, &mut r)))
                    .collect();
                let real = |from: usize, to: usize| -> Result<Tensor> {
                    realize_program(&g, &MorphicProgram::new(&g, path[from], steps[from..to].to_vec())?)
                };
                let left = real(1, 3)?.matmul(&real(0, 1)?)?;
                let right = real(2, 3)?.matmul(&real(0, 2)?)?;
                let scale = 1.0 + operator_norm(&left);
                worst = worst.max(left.max_abs_diff(&right) / scale);
            }
            Ok(Outcome::new(200, worst).with("(Φ₃Φ₂)Φ₁ vs Φ₃(Φ₂Φ₁), relative"))
        }),
        timed(spec(s, "functoriality", None, Bound::AtMost, 0.0, 5.0), || {
            let mut worst: f64 = 0.0;
            let mut trials = 0;
            for p in [5, 7, 11] {
                let cat = calculator_catalog(p)?;
                for a in 0..p {
                    for b in 0..p {
                        worst = worst.max(check_functoriality(&cat, &format!("add{a}"), &format!("add{b}"))?);
                        trials += 1;
                    }
                }
                let t = check_adjunction_triangles(&cat)?;
                worst = worst.max(t.counit_after_unit).max(t.unit_after_counit);
            }
            Ok(Outcome::new(trials, worst).with("permutation tools and triangle residuals"))
        }),
        timed(spec(s, "faithfulness", None, Bound::AtMost, 0.0, 5.0), || {
            let mut collisions = 0;
            let mut trials = 0;
            for p in [5, 7] {
                let cat = calculator_catalog(p)?;
                for a in 0..p {
                    for b in (a + 1)..p {
                        let fa = cat.internalize(cat.tool(&format!("add{a}"))?)?;
                        let fb = cat.internalize(cat.tool(&format!("add{b}"))?)?;
                        if !(operator_norm(&fa.weight.sub(&fb.weight)?) > 0.0) {
                            collisions += 1;
                        }
                        trials += 1;
                    }
                }
            }
            Ok(Outcome::new(trials, collisions as f64).with("distinct tools give distinct blocks"))
        }),
    ]
}

/// Trains one task and captures its metric stream.
fn train_task(task: TaskKind) -> Result<(Experiment, TrainReport, Vec<u8>)> {
    let cfg = ExperimentConfig::for_task(task);
    let mut exp = Experiment::build(&cfg)?;
    let mut buf = Vec::new();
    let report = run_experiment(&mut exp, Some(&mut buf))?;
    Ok((exp, report, buf))
}

fn diagnostics_suite() -> Vec<Check> {
    let s = Suite::Diagnostics;
    let mut checks = Vec::new();
    let mut runs = Vec::new();
    for (task, name) in [
        (TaskKind::Modp, "modp-training"),
        (TaskKind::Retrieval, "retrieval-training"),
        (TaskKind::Dyck, "dyck-training"),
    ] {
        let t0 = Instant::now();
        let res = train_task(task);
        let secs = t0.elapsed().as_secs_f64();
        match res {
            Ok((exp, report, buf)) => {
                let detail = format!(
                    "L_LM {:.4} -> {:.4}, designated mass {:.3}, positive utility {:.3}, {} steps",
                    report.initial_lm, report.final_lm, report.final_mass, report.final_positive, report.steps
                );
                let ratio = report.final_lm / report.initial_lm;
                let outcome = if task == TaskKind::Modp {
                    Ok(Outcome::new(report.steps, ratio).with(detail))
                } else {
                    Ok(Outcome::new(report.steps, 1.0 - report.final_positive).with(detail))
                };
                let threshold = 0.1;
                checks.push(finish(&spec(s, name, Some(15), Bound::Below, threshold, 600.0), secs, outcome));
                if task == TaskKind::Modp {
                    checks.push(finish(
                        &spec(s, "modp-routing-mass", Some(15), Bound::Below, 0.1, 600.0),
                        0.0,
                        Ok(Outcome::new(exp.config.eval_tokens, 1.0 - report.final_mass).with("1 − mean gate on the shift edge")),
                    ));
                }
                runs.push((task, exp, report, buf));
            }
            Err(e) => checks.push(finish(&spec(s, name, Some(15), Bound::Below, 0.1, 600.0), secs, Err(e))),
        }
    }

    checks.push(timed(spec(s, "determinism", Some(16), Bound::AtMost, 0.0, 60.0), || {
        let mut mismatches = 0;
        for (task, exp, _, buf) in &runs {
            let (again, _, buf2) = train_task(*task)?;
            if buf != &buf2 {
                mismatches += 1;
            }
            if exp.model.to_checkpoint().to_string()? != again.model.to_checkpoint().to_string()? {
                mismatches += 1;
            }
        }
        Ok(Outcome::new(runs.len(), mismatches as f64).with("metric streams and checkpoints compared byte for byte"))
    }));

    checks.push(timed(spec(s, "entropy-trend", None, Bound::Below, 0.0, 5.0), || {
        let worst = runs.iter().map(|(_, _, rep, _)| trend(&rep.entropy_trace)).fold(f64::NEG_INFINITY, f64::max);
        Ok(Outcome::new(runs.len(), worst).with("largest least-squares slope of the entropy trace"))
    }));

    checks.push(timed(spec(s, "designated-ablation", None, Bound::Above, 0.0, 30.0), || {
        let mut worst = f64::INFINITY;
        for (_, exp, _, _) in &runs {
            let batch = exp.eval_batch()?;
            worst = worst.min(ablate(&exp.model, &batch, &[exp.designated])?.mean_degradation);
        }
        Ok(Outcome::new(runs.len(), worst).with("smallest loss increase from masking the designated edge"))
    }));

    checks.push(timed(spec(s, "conservation", None, Bound::AtMost, 0.0, 30.0), || {
        let mut mismatch = 0usize;
        for (_, exp, _, _) in &runs {
            let batch = exp.eval_batch()?;
            let bundle = diagnose(&exp.model, &batch, 12)?;
            let edges: usize = exp.model.layers.iter().map(|l| l.edges.len()).sum();
            let hist: usize = bundle.utilities.iter().map(|u| u.histogram.total()).sum();
            let cal: usize = bundle.calibration.iter().map(|b| b.count).sum();
            mismatch += hist.abs_diff(bundle.tokens * edges) + cal.abs_diff(bundle.tokens * edges);
        }
        Ok(Outcome::new(runs.len(), mismatch as f64).with("histogram and calibration counts equal tokens × |E|"))
    }));

    checks.push(timed(spec(s, "ablation-sanity", None, Bound::Below, 1e-3, 30.0), || {
        let mut worst: f64 = 0.0;
        let mut idle = 0;
        for (_, exp, _, _) in &runs {
            let batch = exp.eval_batch()?;
            let states = exp.model.routing_states(&batch)?;
            for (l, st) in states.iter().enumerate() {
                for e in 0..st.alpha.cols() {
                    let mean = (0..st.alpha.rows()).map(|t| st.alpha.get(t, e)).sum::<f64>() / st.alpha.rows() as f64;
                    if mean < 1e-3 {
                        let a = ablate(&exp.model, &batch, &[(l, e)])?;
                        worst = worst.max(a.mean_degradation.abs());
                        idle += 1;
                    }
                }
            }
        }
        Ok(Outcome::new(idle, worst).with("loss change in nats from masking edges with mean gate < 1e-3"))
    }));
    checks
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_round_trip() {
        for s in Suite::ALL {
            assert_eq!(s.name().parse::<Suite>().unwrap(), s);
        }
        assert!("everything".parse::<Suite>().is_err());
        assert_eq!("gibbs-sign".parse::<Fault>().unwrap(), Fault::GibbsSign);
    }

    #[test]
    fn bounds() {
        assert!(Bound::AtMost.holds(1.0, 1.0));
        assert!(!Bound::Below.holds(1.0, 1.0));
        assert!(Bound::Above.holds(2.0, 1.0));
    }

    #[test]
    fn errors_and_budgets_fail() {
        let sp = spec(Suite::Tensor, "x", None, Bound::AtMost, 1.0, 1.0);
        assert!(!finish(&sp, 0.1, Err(Error::EmptyEdgeSet)).pass);
        assert!(!finish(&sp, 2.0, Ok(Outcome::new(1, 0.0))).pass);
        assert!(finish(&sp, 0.1, Ok(Outcome::new(1, 0.0))).pass);
        assert!(!finish(&sp, 0.1, Ok(Outcome::new(1, f64::NAN))).pass);
    }

    #[test]
    fn geometry_suite_passes_and_fault_is_named() {
        let clean = run(Some(Suite::Geometry), &Options::default());
        assert!(clean.pass, "{:#?}", clean.failures().collect::<Vec<_>>());
        assert!(clean.checks.iter().all(|c| c.suite == Suite::Geometry));
        let broken = run(Some(Suite::Geometry), &Options { fault: Some(Fault::GibbsSign) });
        let failed: Vec<String> = broken.failures().map(Check::id).collect();
        assert_eq!(failed, vec!["geometry.gibbs-closed-form".to_string()]);
    }
}
