//! End-to-end experiments on the synthetic tasks: configuration, model construction,
//! batch sampling and the training loop.
//!
//! Each task reads out from a single grade that starts empty, with the readout bias frozen
//! at zero, so the designated edge is the only way to move the prediction away from uniform.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graded::{Edge, EdgeSet, GradedVector, Grading, LayerBlocks, NormKind};
use crate::model::{Batch, GradedLayer, GradedModel, Readout};
use crate::objective::{train_step, write_metrics, ObjectiveConfig, Optimizer, StepMetrics, TrainConfig};
use crate::routing::{GateKind, RoutingConfig};
use crate::tasks::{embed_square, gen_dyck_dataset, modp_shift_matrix, DyckTask, RetrievalTask};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Modp,
    Retrieval,
    Dyck,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    /// Grade dimension of `sem` and `num` (mod-p) or `sem` (retrieval).
    pub dim: usize,
    pub gate: GateKind,
    pub norm: NormKind,
    pub rank: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            dim: 16,
            gate: GateKind::SoftmaxGlobal,
            norm: NormKind::None,
            rank: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoutingSection {
    pub beta: f64,
    pub t_sm: f64,
    /// Initial threshold on every edge.
    pub tau: f64,
    pub utility_in_logits: bool,
}

impl Default for RoutingSection {
    fn default() -> Self {
        Self {
            beta: 2.0,
            t_sm: 0.2,
            tau: 0.0,
            utility_in_logits: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModPConfig {
    pub p: usize,
    pub a: usize,
    pub seq_len: usize,
}

impl Default for ModPConfig {
    fn default() -> Self {
        Self { p: 7, a: 3, seq_len: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    pub k: usize,
    pub gamma: f64,
    pub sigma2: f64,
    pub seq_len: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            k: 8,
            gamma: 1.0,
            sigma2: 0.5,
            seq_len: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DyckConfig {
    pub m: usize,
    pub max_depth: usize,
    /// Tokens per string; also the sequence length.
    pub len: usize,
}

impl Default for DyckConfig {
    fn default() -> Self {
        Self {
            m: 6,
            max_depth: 3,
            len: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskKind,
    /// Seeds model initialization, task instances and the evaluation batch.
    pub seed: u64,
    pub eval_tokens: usize,
    pub model: ModelConfig,
    pub routing: RoutingSection,
    pub objective: ObjectiveConfig,
    pub train: TrainConfig,
    pub modp: ModPConfig,
    pub retrieval: RetrievalConfig,
    pub dyck: DyckConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: TaskKind::Modp,
            seed: 0,
            eval_tokens: 256,
            model: ModelConfig::default(),
            routing: RoutingSection::default(),
            objective: ObjectiveConfig {
                lambda: 0.1,
                mu_sp: 0.01,
                ..ObjectiveConfig::default()
            },
            train: TrainConfig {
                lr: 3e-3,
                batch_size: 32,
                steps: 1500,
                ..TrainConfig::default()
            },
            modp: ModPConfig::default(),
            retrieval: RetrievalConfig::default(),
            dyck: DyckConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn for_task(task: TaskKind) -> Self {
        Self {
            task,
            ..Self::default()
        }
    }

    pub fn seq_len(&self) -> usize {
        match self.task {
            TaskKind::Modp => self.modp.seq_len,
            TaskKind::Retrieval => self.retrieval.seq_len,
            TaskKind::Dyck => self.dyck.len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=4).contains(&self.model.layers) {
            return Err(Error::config("model.layers", format!("must be in 2..=4, got {}", self.model.layers)));
        }
        if self.model.rank == 0 {
            return Err(Error::config("model.rank", "must be positive"));
        }
        let r = &self.routing;
        if !(r.beta > 0.0) || !(r.t_sm > 0.0) || !(r.tau >= 0.0) {
            return Err(Error::config("routing", "beta and t_sm must be positive, tau nonnegative"));
        }
        self.objective.validate()?;
        self.train.validate()?;
        let seq = self.seq_len();
        if seq == 0 || !self.train.batch_size.is_multiple_of(seq) || !self.eval_tokens.is_multiple_of(seq) || self.eval_tokens == 0 {
            return Err(Error::config(
                "train.batch_size",
                format!("batch size and eval_tokens must be positive multiples of the sequence length {seq}"),
            ));
        }
        match self.task {
            TaskKind::Modp => {
                let m = &self.modp;
                if m.p < 2 || m.a >= m.p || self.model.dim < m.p {
                    return Err(Error::config("modp", format!("need 0 <= a < p <= model.dim, got a={}, p={}", m.a, m.p)));
                }
            }
            TaskKind::Retrieval => {
                let c = &self.retrieval;
                if c.k == 0 || c.k > self.model.dim || !(c.sigma2 > 0.0) || !(c.gamma >= 0.0) {
                    return Err(Error::config("retrieval", format!("need 0 < k <= model.dim, got k={}", c.k)));
                }
            }
            TaskKind::Dyck => {
                let c = &self.dyck;
                if c.m < 5 || c.max_depth == 0 || c.len < 2 {
                    return Err(Error::config("dyck", "need m >= 5, max_depth >= 1, len >= 2"));
                }
            }
        }
        Ok(())
    }
}

/// Draws fresh batches for one task.
#[derive(Clone, Debug)]
pub enum Sampler {
    Modp { p: usize, a: usize, dim: usize, seq_len: usize },
    Retrieval { task: RetrievalTask, seq_len: usize },
    Dyck { task: DyckTask, len: usize },
}

impl Sampler {
    pub fn grading(&self) -> Grading {
        match self {
            Sampler::Modp { dim, .. } => Grading::new(&[("sem", *dim), ("num", *dim)]).expect("valid"),
            Sampler::Retrieval { task, .. } => Grading::new(&[("sem", task.d), ("ret", task.k)]).expect("valid"),
            Sampler::Dyck { task, .. } => task.grading(),
        }
    }

    /// `tokens` rows; must be a multiple of the sequence length.
    pub fn sample<R: Rng + ?Sized>(&self, tokens: usize, rng: &mut R) -> Result<Batch> {
        let g = self.grading();
        match self {
            Sampler::Modp { p, a, dim, seq_len } => {
                let mut sem = Tensor::zeros(tokens, *dim);
                let mut targets = Vec::with_capacity(tokens);
                for t in 0..tokens {
                    let d = rng.gen_range(0..*p);
                    sem.set(t, d, 1.0);
                    targets.push((d + a) % p);
                }
                let mut z = GradedVector::zeros(&g, tokens);
                z.set_block(0, sem);
                Batch::new(z, targets, *seq_len)
            }
            Sampler::Retrieval { task, seq_len } => {
                let mut sem = Tensor::zeros(tokens, task.d);
                let mut targets = Vec::with_capacity(tokens);
                for t in 0..tokens {
                    let i = rng.gen_range(0..task.k);
                    let q = task.margin_query(i, rng);
                    for (j, &x) in q.data().iter().enumerate() {
                        sem.set(t, j, x);
                    }
                    targets.push(i);
                }
                let mut z = GradedVector::zeros(&g, tokens);
                z.set_block(0, sem);
                Batch::new(z, targets, *seq_len)
            }
            Sampler::Dyck { task, len } => {
                let strings = gen_dyck_dataset(*len, tokens / len, task.max_depth, rng.gen())?;
                let mut deltas = Vec::with_capacity(tokens);
                let mut carried = Vec::with_capacity(tokens);
                let mut targets = Vec::with_capacity(tokens);
                for s in &strings {
                    let mut prev = 0;
                    for (&d, &after) in s.deltas.iter().zip(&s.depth) {
                        deltas.push(d);
                        carried.push(prev);
                        targets.push(usize::from(after > 0));
                        prev = after;
                    }
                }
                Batch::new(task.encode(&deltas, &carried), targets, *len)
            }
        }
    }
}

/// A model ready to train, its sampler and the edge the task needs.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub model: GradedModel,
    pub sampler: Sampler,
    /// `(layer, edge index)` of the designated edge.
    pub designated: (usize, usize),
}

impl Experiment {
    pub fn build(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (sampler, classes, read, designated_edge, first, rest) = match config.task {
            TaskKind::Modp => {
                let m = &config.modp;
                let s = Sampler::Modp {
                    p: m.p,
                    a: m.a,
                    dim: config.model.dim,
                    seq_len: m.seq_len,
                };
                let first = vec![Edge::new(0, 0), Edge::new(0, 1), Edge::new(1, 1)];
                (s, m.p, 1, Edge::new(0, 1), first, vec![Edge::new(0, 0), Edge::new(1, 1)])
            }
            TaskKind::Retrieval => {
                let c = &config.retrieval;
                let task = RetrievalTask::random(c.k, config.model.dim, c.sigma2, c.gamma, 1.0, config.seed)?;
                let s = Sampler::Retrieval { task, seq_len: c.seq_len };
                let first = vec![Edge::new(0, 0), Edge::new(0, 1), Edge::new(1, 1)];
                (s, c.k, 1, Edge::new(0, 1), first, vec![Edge::new(0, 0), Edge::new(1, 1)])
            }
            TaskKind::Dyck => {
                let c = &config.dyck;
                let task = DyckTask::new(c.m, 1.0, c.max_depth)?;
                let s = Sampler::Dyck { task, len: c.len };
                let first = vec![Edge::new(0, 0), Edge::new(1, 0), Edge::new(1, 1)];
                (s, 2, 0, Edge::new(1, 0), first, vec![Edge::new(0, 0), Edge::new(1, 1)])
            }
        };
        let grading = sampler.grading();
        let r = &config.routing;
        let mut layers = Vec::with_capacity(config.model.layers);
        for l in 0..config.model.layers {
            let edges = EdgeSet::new(&grading, if l == 0 { first.clone() } else { rest.clone() })?;
            let mut rc = RoutingConfig::new(&edges, r.beta, r.t_sm, r.tau, config.model.gate, config.model.rank)?;
            rc.utility_in_logits = r.utility_in_logits;
            layers.push(GradedLayer::init(&grading, edges, rc, config.model.norm, rng.gen())?);
        }
        let designated = (0, layers[0].edges.index_of(designated_edge)?);
        let width = grading.dim(read);
        let weight = Tensor::randn(classes, width, 1.0 / (width as f64).sqrt(), &mut rng);
        let readout = Readout::on_grades(&grading, vec![read], weight)?;
        let mut model = GradedModel::new(grading, layers, readout)?;
        model.frozen.insert("readout.bias".into());
        if config.task == TaskKind::Modp {
            let shift = embed_square(&modp_shift_matrix(config.modp.p, config.modp.a)?, config.model.dim)?;
            if let LayerBlocks::Free(ws) = &mut model.layers[0].blocks {
                ws[designated.1] = shift;
            }
            model.frozen.insert(format!("layer0.block[{designated_edge}]"));
        }
        Ok(Self {
            config: config.clone(),
            model,
            sampler,
            designated,
        })
    }

    /// The fixed evaluation batch.
    pub fn eval_batch(&self) -> Result<Batch> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed.wrapping_add(1));
        self.sampler.sample(self.config.eval_tokens, &mut rng)
    }

    /// Mean gate and fraction of positive utilities on the designated edge.
    pub fn designated_stats(&self, batch: &Batch) -> Result<(f64, f64)> {
        let (l, e) = self.designated;
        let st = &self.model.routing_states(batch)?[l];
        let n = st.alpha.rows();
        let mass = (0..n).map(|t| st.alpha.get(t, e)).sum::<f64>() / n as f64;
        let pos = (0..n).filter(|&t| st.utilities.get(t, e) > 0.0).count() as f64 / n as f64;
        Ok((mass, pos))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub task: TaskKind,
    pub steps: usize,
    pub initial_lm: f64,
    pub final_lm: f64,
    pub initial_mass: f64,
    pub final_mass: f64,
    pub initial_positive: f64,
    pub final_positive: f64,
    /// Mean gate entropy at each step.
    pub entropy_trace: Vec<f64>,
}

/// Trains for `config.train.steps` steps, streaming one metrics line per step to `metrics`.
pub fn run_experiment(exp: &mut Experiment, mut metrics: Option<&mut dyn Write>) -> Result<TrainReport> {
    let cfg = exp.config.clone();
    let eval = exp.eval_batch()?;
    let initial_lm = exp.model.lm_loss(&eval)?;
    let (initial_mass, initial_positive) = exp.designated_stats(&eval)?;
    let mut opt = Optimizer::new(&cfg.train, &exp.model.params())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let mut entropy_trace = Vec::with_capacity(cfg.train.steps);
    for step in 0..cfg.train.steps {
        let batch = exp.sampler.sample(cfg.train.batch_size, &mut rng)?;
        let m: StepMetrics = train_step(&mut exp.model, &batch, &cfg.objective, &mut opt, step)?;
        entropy_trace.push(m.entropy);
        if let Some(w) = metrics.as_deref_mut() {
            write_metrics(w, &m)?;
        }
    }
    let final_lm = exp.model.lm_loss(&eval)?;
    let (final_mass, final_positive) = exp.designated_stats(&eval)?;
    Ok(TrainReport {
        task: cfg.task,
        steps: cfg.train.steps,
        initial_lm,
        final_lm,
        initial_mass,
        final_mass,
        initial_positive,
        final_positive,
        entropy_trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builds_every_task() {
        for task in [TaskKind::Modp, TaskKind::Retrieval, TaskKind::Dyck] {
            let exp = Experiment::build(&ExperimentConfig::for_task(task)).unwrap();
            let b = exp.eval_batch().unwrap();
            assert_eq!(b.len(), 256);
            assert!(exp.model.lm_loss(&b).unwrap().is_finite());
        }
    }

    #[test]
    fn zero_steps_keeps_initialization() {
        let cfg = ExperimentConfig {
            train: TrainConfig { steps: 0, ..ExperimentConfig::default().train },
            ..ExperimentConfig::default()
        };
        let mut exp = Experiment::build(&cfg).unwrap();
        let before = exp.model.clone();
        run_experiment(&mut exp, None).unwrap();
        assert_eq!(exp.model, before);
    }

    #[test]
    fn rejects_bad_layers() {
        let mut cfg = ExperimentConfig::default();
        cfg.model.layers = 5;
        assert!(matches!(Experiment::build(&cfg), Err(Error::Config { field, .. }) if field == "model.layers"));
    }
}
