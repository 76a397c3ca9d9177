//! Synthetic case studies with closed-form reference morphisms: mod-p shifts,
//! key-margin retrieval, and Dyck depth tracking.
//!
//! Dataset files are JSON lines. Field order per task:
//! - mod-p: `{"input": d, "target": (d + a) mod p}`
//! - retrieval: `{"query": [q_0, ..], "target": i*}`
//! - Dyck: `{"deltas": [δ_0, ..], "depth": [s*_1, ..]}` where `depth[t]` is the depth after token `t`.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graded::{BlockMap, Edge, GradedVector, Grading};
use crate::routing::replace_grade;
use crate::tensor::{cross_entropy_row, softmax_row, Tensor};

/// `P_a` with `P_a e_d = e_{(d+a) mod p}`, as a `[p, p]` weight.
pub fn modp_shift_matrix(p: usize, a: usize) -> Result<Tensor> {
    if a >= p {
        return Err(Error::config("a", format!("shift {a} not below modulus {p}")));
    }
    let mut m = Tensor::zeros(p, p);
    for d in 0..p {
        m.set((d + a) % p, d, 1.0);
    }
    Ok(m)
}

/// `P_a` embedded in the top-left corner of a `[dim, dim]` zero matrix.
pub fn embed_square(m: &Tensor, dim: usize) -> Result<Tensor> {
    if m.rows() > dim || m.cols() > dim {
        return Err(Error::shape("embed_square", format!("{:?} into {dim}", m.shape())));
    }
    let mut out = Tensor::zeros(dim, dim);
    for i in 0..m.rows() {
        for j in 0..m.cols() {
            out.set(i, j, m.get(i, j));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModPTask {
    pub p: usize,
    pub a: usize,
    /// Logit scale of the calibrated readout.
    pub s: f64,
    /// Grade dimension; digits live in the first `p` coordinates.
    pub dim: usize,
}

pub const SEM: usize = 0;
pub const NUM: usize = 1;

impl ModPTask {
    pub fn new(p: usize, a: usize, s: f64, dim: usize) -> Result<Self> {
        if p < 2 || a >= p || dim < p || !(s >= 0.0) {
            return Err(Error::config("modp", format!("p={p}, a={a}, s={s}, dim={dim}")));
        }
        Ok(Self { p, a, s, dim })
    }

    pub fn grading(&self) -> Grading {
        Grading::new(&[("sem", self.dim), ("num", self.dim)]).expect("valid")
    }

    /// Digits one-hot in `sem`; `num` empty.
    pub fn encode(&self, digits: &[usize]) -> GradedVector {
        let g = self.grading();
        let mut z = GradedVector::zeros(&g, digits.len());
        let mut sem = Tensor::zeros(digits.len(), self.dim);
        for (t, &d) in digits.iter().enumerate() {
            sem.set(t, d % self.p, 1.0);
        }
        z.set_block(SEM, sem);
        z
    }

    /// `φ_{num←sem} = P_a`.
    pub fn shift_block(&self) -> BlockMap {
        let w = embed_square(&modp_shift_matrix(self.p, self.a).expect("a < p"), self.dim).expect("fits");
        BlockMap::new(Edge::new(SEM, NUM), w)
    }

    /// `φ_{sem←num} = I`: writes the shifted digit back where the readout looks.
    pub fn write_back_block(&self) -> BlockMap {
        BlockMap::new(Edge::new(NUM, SEM), Tensor::eye(self.dim))
    }

    /// Calibrated readout on `sem`: logit `s` on the encoded digit, 0 elsewhere.
    pub fn calibrated_logits(&self, z: &GradedVector) -> Tensor {
        let sem = z.block(SEM);
        let mut out = Tensor::zeros(sem.rows(), self.p);
        for t in 0..sem.rows() {
            for c in 0..self.p {
                out.set(t, c, self.s * sem.get(t, c));
            }
        }
        out
    }

    pub fn calibrated_losses(&self, z: &GradedVector, targets: &[usize]) -> Vec<f64> {
        let logits = self.calibrated_logits(z);
        (0..logits.rows()).map(|t| cross_entropy_row(logits.row(t), targets[t])).collect()
    }

    /// Runs `sem → num → sem` and returns the state after each step.
    pub fn run_program(&self, z: &GradedVector) -> Result<(GradedVector, GradedVector)> {
        let g = self.grading();
        let z1 = replace_grade(z, NUM, self.shift_block().apply(&g, z)?);
        let z2 = replace_grade(&z1, SEM, self.write_back_block().apply(&g, &z1)?);
        Ok((z1, z2))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModPRecord {
    pub input: usize,
    pub target: usize,
}

/// Uniform digits and their shifted targets.
pub fn gen_modp_dataset(p: usize, a: usize, n: usize, seed: u64) -> Result<Vec<ModPRecord>> {
    if n == 0 || a >= p {
        return Err(Error::config("modp dataset", format!("n={n}, a={a}, p={p}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let d = rng.gen_range(0..p);
            ModPRecord {
                input: d,
                target: (d + a) % p,
            }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModPUtility {
    pub pre: f64,
    pub post: f64,
    pub delta: f64,
}

/// Loss before and after the two-step program under the calibrated readout, averaged over digits.
pub fn modp_exact_utility(p: usize, a: usize, s: f64) -> Result<ModPUtility> {
    let task = ModPTask::new(p, a, s, p)?;
    let digits: Vec<usize> = (0..p).collect();
    let targets: Vec<usize> = digits.iter().map(|d| (d + a) % p).collect();
    let z = task.encode(&digits);
    let (_, z2) = task.run_program(&z)?;
    let pre = task.calibrated_losses(&z, &targets).iter().sum::<f64>() / p as f64;
    let post = task.calibrated_losses(&z2, &targets).iter().sum::<f64>() / p as f64;
    Ok(ModPUtility {
        pre,
        post,
        delta: pre - post,
    })
}

/// `log(1 + (p−1)e^{−s})`.
pub fn modp_post_update_loss(p: usize, s: f64) -> f64 {
    ((p - 1) as f64 * (-s).exp()).ln_1p()
}

/// Keys are the rows of `keys`; values are a diagonal map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalTask {
    pub k: usize,
    pub d: usize,
    /// `[k, d]`, orthonormal rows.
    pub keys: Tensor,
    pub values: Vec<f64>,
    /// `[d, d]`.
    pub w_q: Tensor,
    pub sigma2: f64,
    pub gamma: f64,
    /// Logit scale of the write-back readout.
    pub kappa: f64,
}

impl RetrievalTask {
    /// Orthonormal random keys, identity values and query map.
    pub fn random(k: usize, d: usize, sigma2: f64, gamma: f64, kappa: f64, seed: u64) -> Result<Self> {
        if k == 0 || k > d || !(sigma2 > 0.0) || !(gamma >= 0.0) {
            return Err(Error::config("retrieval", format!("k={k}, d={d}, sigma2={sigma2}, gamma={gamma}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::randn(d, k, 1.0, &mut rng).to_dmatrix();
        let q = a.qr().q();
        let keys = Tensor::from_dmatrix(&q.transpose());
        Ok(Self {
            k,
            d,
            keys,
            values: vec![1.0; k],
            w_q: Tensor::eye(d),
            sigma2,
            gamma,
            kappa,
        })
    }

    /// A query whose score at `i_star` beats every other key by at least `gamma`.
    pub fn margin_query<R: Rng + ?Sized>(&self, i_star: usize, rng: &mut R) -> Tensor {
        let mut coef: Vec<f64> = (0..self.k).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let top = coef
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i_star)
            .map(|(_, &c)| c)
            .fold(f64::NEG_INFINITY, f64::max);
        let top = if top.is_finite() { top } else { 0.0 };
        coef[i_star] = top + self.gamma * (1.0 + rng.gen::<f64>());
        let mut q = vec![0.0; self.d];
        for (j, c) in coef.iter().enumerate() {
            for (x, kj) in q.iter_mut().zip(self.keys.row(j)) {
                *x += c * kj;
            }
        }
        Tensor::row_vector(&q)
    }

    /// Key scores `M W_q z` for one query row.
    pub fn scores(&self, z_sem: &Tensor) -> Result<Vec<f64>> {
        let q = z_sem.matmul(&self.w_q.transpose())?;
        Ok(q.matmul(&self.keys.transpose())?.into_data())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalOutcome {
    pub i_star: usize,
    /// Observed margin `score_{i*} − max_{j≠i*} score_j`.
    pub margin: f64,
    pub r: Vec<f64>,
    /// `M_val r`, written into the retrieval slot of `sem`.
    pub write_back: Vec<f64>,
    /// Utility of the round trip with the write-back readout.
    pub delta_l: f64,
    /// Utility of an exact (one-hot) retrieval.
    pub delta_l_ideal: f64,
}

/// `r = softmax(M q / σ²)`, write-back `M_val r`, and the resulting utility.
///
/// The readout puts logit `κ · w_c` on class `c` where `w` is the written-back vector; before the
/// write-back the slot is empty and all logits are 0.
pub fn retrieval_roundtrip(task: &RetrievalTask, z_sem: &Tensor) -> Result<RetrievalOutcome> {
    let s = task.scores(z_sem)?;
    let (i_star, best) = s
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (j, &x)| if x > acc.1 { (j, x) } else { acc });
    let second = s
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != i_star)
        .map(|(_, &x)| x)
        .fold(f64::NEG_INFINITY, f64::max);
    let margin = best - second;
    if !(margin > 0.0) || margin < task.gamma {
        return Err(Error::NoMargin(format!("best key margin {margin} below {}", task.gamma)));
    }
    let scaled: Vec<f64> = s.iter().map(|x| x / task.sigma2).collect();
    let r = softmax_row(&scaled, None);
    let write_back: Vec<f64> = r.iter().zip(&task.values).map(|(a, v)| a * v).collect();
    let loss = |w: &[f64]| {
        let logits: Vec<f64> = w.iter().map(|x| task.kappa * x).collect();
        cross_entropy_row(&logits, i_star)
    };
    let empty = vec![0.0; task.k];
    let mut ideal = empty.clone();
    ideal[i_star] = task.values[i_star];
    Ok(RetrievalOutcome {
        i_star,
        margin,
        delta_l: loss(&empty) - loss(&write_back),
        delta_l_ideal: loss(&empty) - loss(&ideal),
        r,
        write_back,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalRecord {
    pub query: Vec<f64>,
    pub target: usize,
}

/// Margin queries with uniformly chosen targets.
pub fn gen_retrieval_dataset(task: &RetrievalTask, n: usize, seed: u64) -> Vec<RetrievalRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let i = rng.gen_range(0..task.k);
            RetrievalRecord {
                query: task.margin_query(i, &mut rng).into_data(),
                target: i,
            }
        })
        .collect()
}

/// `s + δ`.
pub fn dyck_increment(s: i64, delta: i8) -> i64 {
    s + delta as i64
}

/// Depth after each token, starting from 0.
pub fn dyck_depth_trace(deltas: &[i8]) -> Vec<i64> {
    deltas
        .iter()
        .scan(0i64, |s, &d| {
            *s = dyck_increment(*s, d);
            Some(*s)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DyckRecord {
    /// `+1` open, `0` neutral, `−1` close.
    pub deltas: Vec<i8>,
    /// Ideal depth after each token.
    pub depth: Vec<i64>,
}

/// Balanced strings of `len` tokens (rounded up to even bracket count) with neutral tokens mixed in.
pub fn gen_dyck_dataset(len: usize, n: usize, max_depth: usize, seed: u64) -> Result<Vec<DyckRecord>> {
    if max_depth == 0 || len == 0 {
        return Err(Error::config("dyck", format!("len={len}, max_depth={max_depth}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max = max_depth as i64;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut deltas = Vec::with_capacity(len);
        let mut s = 0i64;
        for t in 0..len {
            let left = (len - t - 1) as i64;
            let can_open = s < max && s < left;
            let can_close = s > 0;
            let must_close = s > left;
            let d: i8 = if must_close {
                -1
            } else {
                let u: f64 = rng.gen();
                if u < 0.2 && s <= left {
                    0
                } else if can_open && (!can_close || u < 0.6) {
                    1
                } else if can_close {
                    -1
                } else {
                    0
                }
            };
            s = dyck_increment(s, d);
            deltas.push(d);
        }
        let depth = dyck_depth_trace(&deltas);
        out.push(DyckRecord { deltas, depth });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DyckTask {
    /// Width of `sem`; at least 5.
    pub m: usize,
    pub kappa: f64,
    pub max_depth: usize,
}

pub const STACK: usize = 0;
pub const DYCK_SEM: usize = 1;

impl DyckTask {
    pub fn new(m: usize, kappa: f64, max_depth: usize) -> Result<Self> {
        if m < 5 || max_depth == 0 {
            return Err(Error::config("dyck", format!("m={m}, max_depth={max_depth}")));
        }
        Ok(Self { m, kappa, max_depth })
    }

    pub fn grading(&self) -> Grading {
        Grading::new(&[("stack", 1), ("sem", self.m)]).expect("valid")
    }

    fn class(delta: i8) -> usize {
        (delta + 1) as usize
    }

    /// `sem` = symbol class one-hot tiled over the first `m − 2` slots, then the carried depth
    /// `s_t`, then a constant 1. `stack` starts empty.
    pub fn encode(&self, deltas: &[i8], carried: &[i64]) -> GradedVector {
        let g = self.grading();
        let mut sem = Tensor::zeros(deltas.len(), self.m);
        for (t, (&d, &s)) in deltas.iter().zip(carried).enumerate() {
            for j in (0..self.m - 2).filter(|j| j % 3 == Self::class(d)) {
                sem.set(t, j, 1.0);
            }
            sem.set(t, self.m - 2, s as f64);
            sem.set(t, self.m - 1, 1.0);
        }
        let mut z = GradedVector::zeros(&g, deltas.len());
        z.set_block(DYCK_SEM, sem);
        z
    }

    /// `φ_{stack←sem}(z) = s_t + δ_t − ½`: the new depth, offset so its sign separates depth 0.
    pub fn increment_block(&self) -> BlockMap {
        let mut w = Tensor::zeros(1, self.m);
        for c in 0..3 {
            let slots: Vec<usize> = (0..self.m - 2).filter(|j| j % 3 == c).collect();
            let delta = c as f64 - 1.0;
            for &j in &slots {
                w.set(0, j, delta / slots.len() as f64);
            }
        }
        w.set(0, self.m - 2, 1.0);
        w.set(0, self.m - 1, -0.5);
        BlockMap::new(Edge::new(DYCK_SEM, STACK), w)
    }

    /// Sign readout: the true class (`depth > 0` vs `depth = 0`) gets `+κ` when the stack
    /// coordinate has the matching sign and `−κ` otherwise; the other class gets 0.
    pub fn sign_loss(&self, stack: f64, depth_after: i64) -> f64 {
        let correct = (stack > 0.0) == (depth_after > 0) && stack != 0.0;
        let l = if correct { self.kappa } else { -self.kappa };
        let target = usize::from(depth_after > 0);
        let mut logits = [0.0; 2];
        logits[target] = l;
        cross_entropy_row(&logits, target)
    }
}

/// Writes records as JSON lines.
pub fn write_dataset<W: Write, T: Serialize>(mut w: W, records: &[T]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
