//! Morphic programs, tool internalization, and adjoint round trips, checked on probe bases.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graded::{BlockMap, EdgeSet, Grading};
use crate::tensor::{softmax_row, Tensor};

/// A typed path `g_0 → g_1 → … → g_k` with its blocks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MorphicProgram {
    pub start: usize,
    pub steps: Vec<BlockMap>,
}

impl MorphicProgram {
    pub fn new(grading: &Grading, start: usize, steps: Vec<BlockMap>) -> Result<Self> {
        grading.check(start)?;
        let mut at = start;
        for (i, s) in steps.iter().enumerate() {
            if s.edge.src != at {
                return Err(Error::ProgramType {
                    step: i,
                    detail: format!("expects grade {} but path is at {}", s.edge.src, at),
                });
            }
            let want = [grading.dim(s.edge.dst), grading.dim(s.edge.src)];
            if s.weight.shape() != want {
                return Err(Error::ProgramType {
                    step: i,
                    detail: format!("block {:?} for edge {}", s.weight.shape(), s.edge),
                });
            }
            at = s.edge.dst;
        }
        Ok(Self { start, steps })
    }

    /// Also requires every step to be an admissible edge.
    pub fn new_in(grading: &Grading, edges: &EdgeSet, start: usize, steps: Vec<BlockMap>) -> Result<Self> {
        if let Some(s) = steps.iter().find(|s| !edges.contains(s.edge)) {
            return Err(Error::InadmissibleEdge {
                g: s.edge.src,
                h: s.edge.dst,
            });
        }
        Self::new(grading, start, steps)
    }

    pub fn end(&self) -> usize {
        self.steps.last().map_or(self.start, |s| s.edge.dst)
    }

    /// The reversed path with transposed blocks.
    pub fn reversed(&self, grading: &Grading) -> Result<Self> {
        let steps = self
            .steps
            .iter()
            .rev()
            .map(|s| BlockMap::new(crate::graded::Edge::new(s.edge.dst, s.edge.src), s.weight.transpose()))
            .collect();
        Self::new(grading, self.end(), steps)
    }

    /// Applies the steps one at a time to row vectors in `V_{g_0}`.
    pub fn apply_stepwise(&self, x: &Tensor) -> Result<Tensor> {
        self.steps.iter().try_fold(x.clone(), |acc, s| acc.matmul(&s.weight.transpose()))
    }
}

/// `Φ_Π = φ_k ⋯ φ_1` as a `[d_{g_k}, d_{g_0}]` matrix; the identity for an empty path.
pub fn realize_program(grading: &Grading, prog: &MorphicProgram) -> Result<Tensor> {
    prog.steps
        .iter()
        .try_fold(Tensor::eye(grading.dim(prog.start)), |acc, s| s.weight.matmul(&acc))
}

/// Largest singular value.
pub fn operator_norm(a: &Tensor) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.to_dmatrix().singular_values().max()
}

/// A typed external object living in one grade. `encoder` is `[d_g, n]`, `decoder` `[n, d_g]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interface {
    pub name: String,
    pub grade: usize,
    pub encoder: Tensor,
    pub decoder: Tensor,
}

impl Interface {
    /// Encoder injecting the standard basis of `R^n` at `offset` within the grade; decoder is its transpose.
    pub fn standard(name: &str, grading: &Grading, grade: usize, n: usize, offset: usize) -> Result<Self> {
        grading.check(grade)?;
        let d = grading.dim(grade);
        if offset + n > d {
            return Err(Error::config(name, format!("{n} slots at {offset} exceed grade dimension {d}")));
        }
        let mut enc = Tensor::zeros(d, n);
        for i in 0..n {
            enc.set(offset + i, i, 1.0);
        }
        Ok(Self {
            name: name.into(),
            grade,
            decoder: enc.transpose(),
            encoder: enc,
        })
    }

    pub fn width(&self) -> usize {
        self.encoder.cols()
    }

    /// `‖Dec ∘ Enc − I‖_op`.
    pub fn round_trip_error(&self) -> Result<f64> {
        Ok(operator_norm(&self.decoder.matmul(&self.encoder)?.sub(&Tensor::eye(self.width()))?))
    }
}

/// An external tool `src → dst` given as an `[n_dst, n_src]` matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tool {
    pub name: String,
    pub src: String,
    pub dst: String,
    pub matrix: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToolCatalog {
    pub grading: Grading,
    pub interfaces: Vec<Interface>,
    pub tools: Vec<Tool>,
}

impl ToolCatalog {
    pub fn interface(&self, name: &str) -> Result<&Interface> {
        self.interfaces
            .iter()
            .find(|i| i.name == name)
            .ok_or_else(|| Error::config("interface", format!("unknown interface {name}")))
    }

    pub fn tool(&self, name: &str) -> Result<&Tool> {
        self.tools
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::config("tool", format!("unknown tool {name}")))
    }

    /// `F(τ) = Enc_dst τ Dec_src`, a block `V_{g_src} → V_{g_dst}`.
    pub fn internalize(&self, tool: &Tool) -> Result<BlockMap> {
        let (s, d) = (self.interface(&tool.src)?, self.interface(&tool.dst)?);
        let w = d.encoder.matmul(&tool.matrix)?.matmul(&s.decoder)?;
        Ok(BlockMap::new(crate::graded::Edge::new(s.grade, d.grade), w))
    }

    /// `τ₂ ∘ τ₁` as an external tool.
    pub fn chain(&self, t1: &Tool, t2: &Tool) -> Result<Tool> {
        if t1.dst != t2.src {
            return Err(Error::ProgramType {
                step: 1,
                detail: format!("{} ends at {} but {} starts at {}", t1.name, t1.dst, t2.name, t2.src),
            });
        }
        Ok(Tool {
            name: format!("{}∘{}", t2.name, t1.name),
            src: t1.src.clone(),
            dst: t2.dst.clone(),
            matrix: t2.matrix.matmul(&t1.matrix)?,
        })
    }
}

/// `‖F(τ₂∘τ₁) − F(τ₂) F(τ₁)‖_op`.
pub fn check_functoriality(catalog: &ToolCatalog, t1: &str, t2: &str) -> Result<f64> {
    let (a, b) = (catalog.tool(t1)?, catalog.tool(t2)?);
    let whole = catalog.internalize(&catalog.chain(a, b)?)?;
    let parts = catalog.internalize(b)?.weight.matmul(&catalog.internalize(a)?.weight)?;
    Ok(operator_norm(&whole.weight.sub(&parts)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TriangleResiduals {
    /// Max over interfaces of `‖Enc Dec Enc − Enc‖_op`.
    pub counit_after_unit: f64,
    /// Max over interfaces of `‖Dec Enc Dec − Dec‖_op`.
    pub unit_after_counit: f64,
}

/// Triangle identities with unit `Enc` and counit `π_g ∘ ι_g = I`.
pub fn check_adjunction_triangles(catalog: &ToolCatalog) -> Result<TriangleResiduals> {
    let mut out = TriangleResiduals {
        counit_after_unit: 0.0,
        unit_after_counit: 0.0,
    };
    for i in &catalog.interfaces {
        let de = i.decoder.matmul(&i.encoder)?;
        let a = i.encoder.matmul(&de)?.sub(&i.encoder)?;
        let b = de.matmul(&i.decoder)?.sub(&i.decoder)?;
        out.counit_after_unit = out.counit_after_unit.max(operator_norm(&a));
        out.unit_after_counit = out.unit_after_counit.max(operator_norm(&b));
    }
    Ok(out)
}

/// `ρ ⊣ ι` for `ι: V_g → V_h`, `ρ: V_h → V_g`, with metrics `S_g`, `S_h`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdjointPair {
    /// `[d_h, d_g]`.
    pub iota: Tensor,
    /// `[d_g, d_h]`.
    pub rho: Tensor,
    pub metric_g: Tensor,
    pub metric_h: Tensor,
    /// `max |⟨ρ(u), v⟩_g − ⟨u, ι(v)⟩_h|` over standard basis pairs.
    pub residual: f64,
}

fn spd_inverse(s: &Tensor, what: &str) -> Result<DMatrix<f64>> {
    let chol = s
        .to_dmatrix()
        .cholesky()
        .ok_or_else(|| Error::Singular { grade: what.into() })?;
    Ok(chol.inverse())
}

impl AdjointPair {
    pub fn new(iota: Tensor, rho: Tensor, metric_g: Tensor, metric_h: Tensor) -> Result<Self> {
        let residual = Self::residual_of(&iota, &rho, &metric_g, &metric_h)?;
        Ok(Self {
            iota,
            rho,
            metric_g,
            metric_h,
            residual,
        })
    }

    /// `ρ = S_g⁻¹ ιᵀ S_h`, the metric adjoint of `ι`.
    pub fn from_iota(iota: Tensor, metric_g: Tensor, metric_h: Tensor) -> Result<Self> {
        let sg_inv = Tensor::from_dmatrix(&spd_inverse(&metric_g, "metric_g")?);
        let rho = sg_inv.matmul(&iota.transpose())?.matmul(&metric_h)?;
        Self::new(iota, rho, metric_g, metric_h)
    }

    /// Adjoint with `S_g = ιᵀ S_h ι` pulled back, so `ι` is an isometry onto its image.
    pub fn isometric(iota: Tensor, metric_h: Tensor) -> Result<Self> {
        let sg = iota.transpose().matmul(&metric_h)?.matmul(&iota)?;
        Self::from_iota(iota, sg, metric_h)
    }

    fn residual_of(iota: &Tensor, rho: &Tensor, sg: &Tensor, sh: &Tensor) -> Result<f64> {
        let (dh, dg) = (iota.rows(), iota.cols());
        if rho.shape() != [dg, dh] || sg.shape() != [dg, dg] || sh.shape() != [dh, dh] {
            return Err(Error::shape("AdjointPair", format!("iota {:?}, rho {:?}", iota.shape(), rho.shape())));
        }
        // ⟨ρ e_i, e_j⟩_g = (ρᵀ S_g)_{ij}, ⟨e_i, ι e_j⟩_h = (S_h ι)_{ij}.
        let lhs = rho.transpose().matmul(sg)?;
        let rhs = sh.matmul(iota)?;
        Ok(lhs.max_abs_diff(&rhs))
    }
}

/// Retrieval `ι(u) = Mᵀ softmax(M E u / τ)` and its linearization `ι_lin = Mᵀ M E`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMaps {
    /// `[k, d]`, rows are keys.
    pub keys: Tensor,
    /// `[d, d_sem]`.
    pub encoder: Tensor,
}

impl RetrievalMaps {
    pub fn linear(&self) -> Result<Tensor> {
        self.keys.transpose().matmul(&self.keys)?.matmul(&self.encoder)
    }

    pub fn softmax(&self, u: &[f64], tau: f64) -> Result<Vec<f64>> {
        let s = self.keys.matmul(&self.encoder)?.matmul(&Tensor::matrix(u.len(), 1, u.to_vec())?)?;
        let r = softmax_row(&s.data().iter().map(|x| x / tau).collect::<Vec<_>>(), None);
        Ok(self.keys.transpose().matmul(&Tensor::matrix(r.len(), 1, r)?)?.into_data())
    }

    /// `‖ι(u) − ι_lin(u)‖₂`.
    pub fn linearization_gap(&self, u: &[f64], tau: f64) -> Result<f64> {
        let lin = self.linear()?.matmul(&Tensor::matrix(u.len(), 1, u.to_vec())?)?;
        let soft = self.softmax(u, tau)?;
        Ok(lin.data().iter().zip(&soft).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
    }
}

/// Write-back `ρ(v) = S⁻¹ Eᵀ Mᵀ M v`, the `S`-adjoint of `ι_lin`.
pub fn build_retrieval_adjoint(keys: &Tensor, encoder: &Tensor, s: &Tensor) -> Result<AdjointPair> {
    let maps = RetrievalMaps {
        keys: keys.clone(),
        encoder: encoder.clone(),
    };
    let iota = maps.linear()?;
    AdjointPair::from_iota(iota.clone(), s.clone(), Tensor::eye(iota.rows()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundTrip {
    /// `P = ι ∘ ρ` on `V_h`.
    pub projector: Tensor,
    /// `‖P² − P‖_op`.
    pub idempotence_gap: f64,
    /// `max |S_h P − (S_h P)ᵀ|`.
    pub self_adjoint_gap: f64,
    /// `‖ρ ∘ ι − I‖_op`.
    pub left_inverse_gap: f64,
    /// Whether every singular value of `S_h^{1/2} ι S_g^{-1/2}` is 1 within `1e-8`.
    pub isometry: bool,
    /// Eigenvalues of `P`, real parts.
    pub spectrum: Vec<f64>,
}

pub fn round_trip_projector(pair: &AdjointPair) -> Result<RoundTrip> {
    let p = pair.iota.matmul(&pair.rho)?;
    let idempotence_gap = operator_norm(&p.matmul(&p)?.sub(&p)?);
    let sp = pair.metric_h.matmul(&p)?;
    let self_adjoint_gap = sp.max_abs_diff(&sp.transpose());
    let q = pair.rho.matmul(&pair.iota)?;
    let left_inverse_gap = operator_norm(&q.sub(&Tensor::eye(q.rows()))?);
    let sqrt_h = spd_sqrt(&pair.metric_h)?;
    let sg_inv_sqrt = spd_sqrt(&pair.metric_g)?.try_inverse().ok_or(Error::Singular { grade: "metric_g".into() })?;
    let k = &sqrt_h * pair.iota.to_dmatrix() * sg_inv_sqrt;
    let isometry = k.singular_values().iter().all(|s| (s - 1.0).abs() < 1e-8);
    // P is S_h-self-adjoint, so S_h^{1/2} P S_h^{-1/2} is symmetric with the same spectrum.
    let sqrt_h_inv = sqrt_h.clone().try_inverse().ok_or(Error::Singular { grade: "metric_h".into() })?;
    let sym = &sqrt_h * p.to_dmatrix() * sqrt_h_inv;
    let sym = (&sym + sym.transpose()) * 0.5;
    let spectrum = sym.symmetric_eigen().eigenvalues.iter().copied().collect();
    Ok(RoundTrip {
        projector: p,
        idempotence_gap,
        self_adjoint_gap,
        left_inverse_gap,
        isometry,
        spectrum,
    })
}

fn spd_sqrt(s: &Tensor) -> Result<DMatrix<f64>> {
    let e = s.to_dmatrix().symmetric_eigen();
    if e.eigenvalues.iter().any(|&l| !(l > 0.0)) {
        return Err(Error::Singular { grade: "metric".into() });
    }
    let d = DMatrix::from_diagonal(&e.eigenvalues.map(f64::sqrt));
    Ok(&e.eigenvectors * d * e.eigenvectors.transpose())
}

/// A random SPD matrix `AᵀA + I`.
pub fn random_spd<R: rand::Rng + ?Sized>(n: usize, rng: &mut R) -> Tensor {
    let a = Tensor::randn(n, n, 1.0 / (n as f64).sqrt(), rng);
    a.transpose().matmul(&a).expect("square").add(&Tensor::eye(n)).expect("square")
}

/// The calculator: digits on `sem`, numbers on `num`, shift tools on `num`, and a parser `sem → num`.
pub fn calculator_catalog(p: usize) -> Result<ToolCatalog> {
    let grading = Grading::new(&[("sem", p), ("num", p)])?;
    let interfaces = vec![
        Interface::standard("digit", &grading, 0, p, 0)?,
        Interface::standard("number", &grading, 1, p, 0)?,
    ];
    let mut tools = vec![Tool {
        name: "parse".into(),
        src: "digit".into(),
        dst: "number".into(),
        matrix: Tensor::eye(p),
    }];
    for a in 0..p {
        tools.push(Tool {
            name: format!("add{a}"),
            src: "number".into(),
            dst: "number".into(),
            matrix: crate::tasks::modp_shift_matrix(p, a)?,
        });
    }
    Ok(ToolCatalog {
        grading,
        interfaces,
        tools,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graded::Edge;
    use crate::tasks::modp_shift_matrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(s: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(s)
    }

    #[test]
    fn program_realization_examples() {
        let g = Grading::uniform(2, 5).unwrap();
        let empty = MorphicProgram::new(&g, 0, vec![]).unwrap();
        assert_eq!(realize_program(&g, &empty).unwrap(), Tensor::eye(5));
        let prog = MorphicProgram::new(
            &g,
            0,
            vec![
                BlockMap::new(Edge::new(0, 1), Tensor::eye(5)),
                BlockMap::new(Edge::new(1, 1), modp_shift_matrix(5, 3).unwrap()),
                BlockMap::new(Edge::new(1, 0), Tensor::eye(5)),
            ],
        )
        .unwrap();
        assert_eq!(realize_program(&g, &prog).unwrap(), modp_shift_matrix(5, 3).unwrap());
        let rev = prog.reversed(&g).unwrap();
        assert_eq!(realize_program(&g, &rev).unwrap(), modp_shift_matrix(5, 3).unwrap().transpose());
        let bad = MorphicProgram::new(&g, 0, vec![BlockMap::new(Edge::new(1, 0), Tensor::eye(5))]);
        assert!(matches!(bad, Err(Error::ProgramType { step: 0, .. })));
    }

    #[test]
    fn stepwise_matches_realization() {
        let g = Grading::new(&[("a", 3), ("b", 4), ("c", 2)]).unwrap();
        let mut r = rng(1);
        let prog = MorphicProgram::new(
            &g,
            0,
            vec![
                BlockMap::new(Edge::new(0, 1), Tensor::randn(4, 3, 1.0, &mut r)),
                BlockMap::new(Edge::new(1, 2), Tensor::randn(2, 4, 1.0, &mut r)),
            ],
        )
        .unwrap();
        let x = Tensor::randn(7, 3, 1.0, &mut r);
        let step = prog.apply_stepwise(&x).unwrap();
        let whole = x.matmul(&realize_program(&g, &prog).unwrap().transpose()).unwrap();
        assert!(step.max_abs_diff(&whole) < 1e-12);
    }

    #[test]
    fn calculator_is_functorial() {
        let cat = calculator_catalog(7).unwrap();
        assert_eq!(check_functoriality(&cat, "add0", "add4").unwrap(), 0.0);
        assert_eq!(check_functoriality(&cat, "add2", "add3").unwrap(), 0.0);
        let chained = cat.chain(cat.tool("add2").unwrap(), cat.tool("add3").unwrap()).unwrap();
        assert_eq!(chained.matrix, cat.tool("add5").unwrap().matrix);
        let t = check_adjunction_triangles(&cat).unwrap();
        assert_eq!((t.counit_after_unit, t.unit_after_counit), (0.0, 0.0));
        let f2 = cat.internalize(cat.tool("add2").unwrap()).unwrap();
        let f3 = cat.internalize(cat.tool("add3").unwrap()).unwrap();
        assert!(operator_norm(&f2.weight.sub(&f3.weight).unwrap()) > 0.0);
    }

    #[test]
    fn perturbed_decoder_breaks_triangles_linearly() {
        let mut r = rng(2);
        let noise = Tensor::randn(3, 5, 1.0, &mut r);
        let base = calculator_catalog(5).unwrap();
        let res: Vec<f64> = [1e-3, 2e-3, 4e-3]
            .iter()
            .map(|&eps| {
                let mut cat = base.clone();
                let mut i = Interface::standard("x", &cat.grading, 0, 3, 1).unwrap();
                i.decoder = i.decoder.add(&noise.scale(eps)).unwrap();
                cat.interfaces = vec![i];
                check_adjunction_triangles(&cat).unwrap().counit_after_unit
            })
            .collect();
        let slope = crate::geometry::log_log_slope(&[1e-3, 2e-3, 4e-3], &res);
        assert!((slope - 1.0).abs() < 0.05, "{slope}");
    }

    #[test]
    fn retrieval_adjoint_is_exact() {
        let mut r = rng(3);
        let (k, d, ds) = (4, 6, 3);
        let keys = Tensor::randn(k, d, 1.0, &mut r);
        let enc = Tensor::randn(d, ds, 1.0, &mut r);
        let s = random_spd(ds, &mut r);
        let pair = build_retrieval_adjoint(&keys, &enc, &s).unwrap();
        assert!(pair.residual < 1e-12 * (1.0 + operator_norm(&pair.iota)), "{}", pair.residual);
        let orth = Tensor::from_dmatrix(&Tensor::randn(d, k, 1.0, &mut r).to_dmatrix().qr().q()).transpose();
        let ident = build_retrieval_adjoint(&orth, &enc, &Tensor::eye(ds)).unwrap();
        let expect = enc.transpose().matmul(&orth.transpose()).unwrap().matmul(&orth).unwrap();
        assert!(ident.rho.max_abs_diff(&expect) < 1e-12);
        let singular = Tensor::zeros(ds, ds);
        assert!(matches!(build_retrieval_adjoint(&keys, &enc, &singular), Err(Error::Singular { .. })));
    }

    #[test]
    fn softmax_retrieval_approaches_linearization() {
        let mut r = rng(4);
        let (k, d) = (3, 3);
        let keys = Tensor::from_dmatrix(&Tensor::randn(d, k, 1.0, &mut r).to_dmatrix().qr().q()).transpose();
        let maps = RetrievalMaps {
            keys: keys.clone(),
            encoder: Tensor::eye(d),
        };
        // u with M u = e_1.
        let u = keys.row(1).to_vec();
        let gaps: Vec<f64> = [1.0, 0.3, 0.1, 0.03].iter().map(|&t| maps.linearization_gap(&u, t).unwrap()).collect();
        assert!(gaps.windows(2).all(|w| w[1] < w[0]), "{gaps:?}");
        assert!(gaps[3] < 1e-12);
    }

    #[test]
    fn round_trip_projectors() {
        let mut r = rng(5);
        let q = Tensor::from_dmatrix(&Tensor::randn(6, 3, 1.0, &mut r).to_dmatrix().qr().q());
        let pair = AdjointPair::new(q.clone(), q.transpose(), Tensor::eye(3), Tensor::eye(6)).unwrap();
        let rt = round_trip_projector(&pair).unwrap();
        assert!(rt.idempotence_gap < 1e-14 && rt.left_inverse_gap < 1e-14 && rt.isometry);
        let iota = Tensor::randn(6, 3, 1.0, &mut r);
        let pair = AdjointPair::isometric(iota, random_spd(6, &mut r)).unwrap();
        let rt = round_trip_projector(&pair).unwrap();
        assert!(rt.idempotence_gap < 1e-10 && rt.self_adjoint_gap < 1e-10);
        assert!(rt.spectrum.iter().all(|l| l.abs() < 1e-8 || (l - 1.0).abs() < 1e-8));
        let mut pk = rt.projector.clone();
        for _ in 0..9 {
            pk = pk.matmul(&rt.projector).unwrap();
        }
        assert!(pk.max_abs_diff(&rt.projector) < 1e-10);
        let skew = AdjointPair::from_iota(Tensor::randn(6, 3, 1.0, &mut r), Tensor::eye(3), Tensor::eye(6)).unwrap();
        assert!(!round_trip_projector(&skew).unwrap().isometry);
    }
}
