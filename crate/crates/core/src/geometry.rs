//! Information-geometric checks for the softmax head: KL utility identity, Gibbs routing,
//! Fisher quadratic gain, Euclidean mirror steps, utility bounds on quadratics, and additive gains.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graded::{BlockMap, GradedVector, Grading};
use crate::routing::replace_grade;
use crate::tensor::{softmax_row, Tensor};

/// Logits `η = W z + b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxHead {
    /// `[C, D]`.
    pub weight: Tensor,
    pub bias: Vec<f64>,
}

impl SoftmaxHead {
    pub fn new(weight: Tensor, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(Error::shape("SoftmaxHead", format!("bias {} for {} classes", bias.len(), weight.rows())));
        }
        Ok(Self { weight, bias })
    }

    pub fn classes(&self) -> usize {
        self.weight.rows()
    }

    pub fn logits(&self, z: &[f64]) -> Vec<f64> {
        (0..self.classes())
            .map(|c| self.weight.row(c).iter().zip(z).map(|(w, x)| w * x).sum::<f64>() + self.bias[c])
            .collect()
    }

    pub fn probs(&self, z: &[f64]) -> Vec<f64> {
        softmax_row(&self.logits(z), None)
    }

    /// `−log p_z(y)`.
    pub fn nll(&self, z: &[f64], y: usize) -> f64 {
        crate::tensor::cross_entropy_row(&self.logits(z), y)
    }
}

/// `G(η) = diag(p) − p pᵀ`.
pub fn fisher_matrix(p: &[f64]) -> Tensor {
    let c = p.len();
    let mut g = Tensor::zeros(c, c);
    for i in 0..c {
        for j in 0..c {
            g.set(i, j, if i == j { p[i] } else { 0.0 } - p[i] * p[j]);
        }
    }
    g
}

/// `KL(p‖q)`; every entry of both must be positive.
pub fn kl(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::shape("kl", format!("{} vs {}", p.len(), q.len())));
    }
    if let Some(i) = p.iter().zip(q).position(|(&a, &b)| !(a > 0.0 && b > 0.0)) {
        return Err(Error::ZeroProbability(format!("class {i}")));
    }
    Ok(p.iter().zip(q).map(|(a, b)| a * (a / b).ln()).sum())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityGap {
    pub lhs: f64,
    pub rhs: f64,
    pub gap: f64,
}

/// `E_{y∼P}[L(z; y) − L(z⁺; y)]` against `KL(P‖p_z) − KL(P‖p_{z⁺})`.
pub fn kl_utility_identity(p: &[f64], z: &[f64], z_plus: &[f64], head: &SoftmaxHead) -> Result<IdentityGap> {
    let (pz, pp) = (head.probs(z), head.probs(z_plus));
    let rhs = kl(p, &pz)? - kl(p, &pp)?;
    let lhs = p
        .iter()
        .enumerate()
        .map(|(y, &w)| w * (head.nll(z, y) - head.nll(z_plus, y)))
        .sum();
    Ok(IdentityGap {
        lhs,
        rhs,
        gap: (lhs - rhs).abs(),
    })
}

/// `α*(e) ∝ exp((ΔL(e) − τ_e)/T)`, the maximizer of `Σ α (ΔL − τ) − T Σ α log α` on the simplex.
pub fn gibbs_weights(dl: &[f64], tau: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) {
        return Err(Error::config("temperature", format!("must be positive, got {temperature}")));
    }
    if dl.len() != tau.len() || dl.is_empty() {
        return Err(Error::shape("gibbs_weights", format!("{} utilities, {} thresholds", dl.len(), tau.len())));
    }
    let x: Vec<f64> = dl.iter().zip(tau).map(|(d, t)| (d - t) / temperature).collect();
    Ok(softmax_row(&x, None))
}

/// Euclidean projection onto the probability simplex.
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut acc = 0.0;
    let mut theta = 0.0;
    for (i, &x) in u.iter().enumerate() {
        acc += x;
        let t = (acc - 1.0) / (i + 1) as f64;
        if x - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|x| (x - theta).max(0.0)).collect()
}

/// Projected gradient ascent on `Σ α m − T Σ α log α`, starting from uniform.
///
/// The step is bounded by the local curvature `T / min α`, which keeps iterates interior.
pub fn entropic_simplex_maximizer(margins: &[f64], temperature: f64, iters: usize) -> Vec<f64> {
    let n = margins.len();
    let mut a = vec![1.0 / n as f64; n];
    for _ in 0..iters {
        let amin = a.iter().copied().fold(f64::INFINITY, f64::min);
        let step = 0.5 * amin / temperature;
        let g: Vec<f64> = a
            .iter()
            .zip(margins)
            .map(|(&x, &m)| m - temperature * (x.ln() + 1.0))
            .collect();
        let moved: Vec<f64> = a.iter().zip(&g).map(|(x, gi)| x + step * gi).collect();
        a = project_simplex(&moved);
        for x in &mut a {
            *x = x.max(f64::MIN_POSITIVE);
        }
    }
    a
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FisherGain {
    /// `KL(p_z ‖ p_{z+δz})`; the expected utility under `p_z` is its negative.
    pub exact: f64,
    /// `½ δηᵀ G(η) δη` with `δη = W δz`.
    pub quadratic: f64,
    pub gap: f64,
}

/// Local KL gain of a perturbation `dz` supported on grade `h`.
pub fn fisher_quadratic_gain(head: &SoftmaxHead, grading: &Grading, z: &[f64], h: usize, dz: &[f64]) -> Result<FisherGain> {
    grading.check(h)?;
    if dz.len() != grading.dim(h) || z.len() != grading.ambient_dim() {
        return Err(Error::shape("fisher_quadratic_gain", format!("dz {} / z {}", dz.len(), z.len())));
    }
    let mut zp = z.to_vec();
    let off = grading.offset(h);
    for (i, d) in dz.iter().enumerate() {
        zp[off + i] += d;
    }
    let p = head.probs(z);
    let exact = kl(&p, &head.probs(&zp))?;
    let deta: Vec<f64> = (0..head.classes())
        .map(|c| dz.iter().enumerate().map(|(i, d)| head.weight.get(c, off + i) * d).sum())
        .collect();
    let g = fisher_matrix(&p);
    let mut quad = 0.0;
    for i in 0..deta.len() {
        for j in 0..deta.len() {
            quad += deta[i] * g.get(i, j) * deta[j];
        }
    }
    let quadratic = 0.5 * quad;
    Ok(FisherGain {
        exact,
        quadratic,
        gap: (exact - quadratic).abs(),
    })
}

/// `½‖u − z‖²`, the Bregman divergence of the Euclidean potential.
pub fn bregman_euclidean(u: &[f64], z: &[f64]) -> f64 {
    0.5 * u.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
}

/// Orthogonal projector onto the span of `directions` (least-norm for dependent spans).
pub fn span_projector(dim: usize, directions: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    if directions.is_empty() {
        return Ok(DMatrix::zeros(dim, dim));
    }
    if directions.iter().any(|d| d.len() != dim) {
        return Err(Error::shape("span_projector", format!("directions must have length {dim}")));
    }
    let b = DMatrix::from_fn(dim, directions.len(), |i, j| directions[j][i]);
    let pinv = b
        .clone()
        .pseudo_inverse(1e-12)
        .map_err(|e| Error::NonFinite(format!("pseudo-inverse: {e}")))?;
    Ok(&b * pinv)
}

/// `u* = z − η Π_S(∇)`.
pub fn mirror_step(z: &[f64], grad: &[f64], directions: &[Vec<f64>], eta: f64) -> Result<Vec<f64>> {
    if z.len() != grad.len() {
        return Err(Error::shape("mirror_step", format!("{} vs {}", z.len(), grad.len())));
    }
    let p = span_projector(z.len(), directions)?;
    let pg = p * DVector::from_column_slice(grad);
    Ok(z.iter().zip(pg.iter()).map(|(x, g)| x - eta * g).collect())
}

/// `L(u) = ½ (u − z*)ᵀ A (u − z*)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Quadratic {
    pub a: DMatrix<f64>,
    pub z_star: DVector<f64>,
}

impl Quadratic {
    pub fn new(a: DMatrix<f64>, z_star: DVector<f64>) -> Result<Self> {
        if a.nrows() != a.ncols() || a.nrows() != z_star.len() {
            return Err(Error::shape("Quadratic", format!("{}x{} vs {}", a.nrows(), a.ncols(), z_star.len())));
        }
        Ok(Self { a, z_star })
    }

    pub fn value(&self, u: &DVector<f64>) -> f64 {
        let r = u - &self.z_star;
        0.5 * r.dot(&(&self.a * &r))
    }

    pub fn grad(&self, u: &DVector<f64>) -> DVector<f64> {
        &self.a * (u - &self.z_star)
    }

    /// `(μ, L)`: extreme eigenvalues of `A`.
    pub fn curvature(&self) -> (f64, f64) {
        let e = SymmetricEigen::new(self.a.clone()).eigenvalues;
        (e.min(), e.max())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtilityBounds {
    pub dl: f64,
    pub lower: f64,
    pub upper: f64,
    pub mu: f64,
    pub l: f64,
}

impl UtilityBounds {
    /// Both inequalities, with round-off slack relative to the magnitudes involved.
    pub fn holds(&self) -> bool {
        let tol = 1e-12 * (1.0 + self.dl.abs() + self.lower.abs() + self.upper.abs());
        self.lower <= self.dl + tol && self.dl <= self.upper + tol
    }
}

/// `ΔL = L(z) − L(z + δ)` bracketed by `−⟨∇,δ⟩ − (L/2)‖δ‖²` and `−⟨∇,δ⟩ − (μ/2)‖δ‖²`.
pub fn utility_bounds_check(q: &Quadratic, z: &DVector<f64>, delta: &DVector<f64>) -> UtilityBounds {
    let (mu, l) = q.curvature();
    let g = q.grad(z);
    let lin = -g.dot(delta);
    let sq = delta.norm_squared();
    UtilityBounds {
        dl: q.value(z) - q.value(&(z + delta)),
        lower: lin - 0.5 * l * sq,
        upper: lin - 0.5 * mu * sq,
        mu,
        l,
    }
}

/// Guaranteed gain of the gradient step `δ = −a∇`: `a(1 − La/2)‖∇‖²`.
pub fn gradient_step_floor(a: f64, l: f64, grad_norm_sq: f64) -> f64 {
    a * (1.0 - 0.5 * l * a) * grad_norm_sq
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdditiveGains {
    pub joint: f64,
    pub sum: f64,
    pub gap: f64,
}

/// Utility of applying all `updates` at once against the sum of their individual utilities.
///
/// Each update adds a `[batch, d_h]` tensor to grade `h`; distinct grades are required.
pub fn additive_gains_check<F>(loss: F, z: &GradedVector, updates: &[(usize, Tensor)]) -> Result<AdditiveGains>
where
    F: Fn(&GradedVector) -> Result<f64>,
{
    for (i, (g, _)) in updates.iter().enumerate() {
        if updates[..i].iter().any(|(h, _)| h == g) {
            return Err(Error::NotOrthogonal(format!("two updates target grade {g}")));
        }
    }
    let base = loss(z)?;
    let shifted = |z: &GradedVector, g: usize, d: &Tensor| -> Result<GradedVector> {
        Ok(replace_grade(z, g, z.block(g).add(d)?))
    };
    let mut all = z.clone();
    let mut sum = 0.0;
    for (g, d) in updates {
        sum += base - loss(&shifted(z, *g, d)?)?;
        all = shifted(&all, *g, d)?;
    }
    let joint = base - loss(&all)?;
    Ok(AdditiveGains {
        joint,
        sum,
        gap: (joint - sum).abs(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProgramGap {
    /// Utility of running the whole program.
    pub total: f64,
    /// Sum of each step's utility applied alone at the base state.
    pub sum_steps: f64,
    /// Smallest `C` with `total ≥ sum_steps − C Σ_{i<j} ‖z^{(g_i)}‖ ‖z^{(g_j)}‖`.
    pub constant: f64,
}

/// Compares a program's utility with the sum of its steps' utilities.
pub fn program_depth_gap<F>(grading: &Grading, path: &[BlockMap], z: &GradedVector, loss: F) -> Result<ProgramGap>
where
    F: Fn(&GradedVector) -> Result<f64>,
{
    let base = loss(z)?;
    let mut cur = z.clone();
    let mut sum_steps = 0.0;
    let mut norms = Vec::with_capacity(path.len());
    for step in path {
        let alone = replace_grade(z, step.edge.dst, step.apply(grading, z)?);
        sum_steps += base - loss(&alone)?;
        norms.push(cur.block(step.edge.src).norm());
        cur = replace_grade(&cur, step.edge.dst, step.apply(grading, &cur)?);
    }
    let total = base - loss(&cur)?;
    let mut cross = 0.0;
    for i in 0..norms.len() {
        for j in i + 1..norms.len() {
            cross += norms[i] * norms[j];
        }
    }
    let shortfall = (sum_steps - total).max(0.0);
    let constant = if shortfall == 0.0 { 0.0 } else { shortfall / cross.max(f64::MIN_POSITIVE) };
    Ok(ProgramGap {
        total,
        sum_steps,
        constant,
    })
}

/// Gate mass on `e*` from equal base logits and utilities `dl` with common threshold,
/// `softmax(β ΔL / T)`.
pub fn selectivity_mass(dl: &[f64], best: usize, beta: f64, t_sm: f64) -> f64 {
    let x: Vec<f64> = dl.iter().map(|d| beta * d / t_sm).collect();
    softmax_row(&x, None)[best]
}

/// Least-squares slope of `log y` against `log x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let cov: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let var: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    cov / var
}
