//! Multiplier fields — candidate Hessians of Finsler functions — and the
//! five Helmholtz-like conditions on them:
//!
//! ```text
//! (i)   h_ji = h_ij
//! (ii)  h_ij y^j = 0
//! (iii) ∂h_ij/∂y^k = ∂h_ik/∂y^j
//! (iv)  (∇h)_ij = 0
//! (v)   h_ik W^k_j = h_jk W^k_i
//! ```
//!
//! Conditions (i)–(iii) already force degree-(−1) homogeneity of the
//! components; that implied residual is reported alongside. Residuals are
//! normalized by (1 + max|h_ij|) at each probe point so the tolerances are
//! scale-free.

use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::field::{self, FieldRef};
use crate::finsler::ScalarField;
use crate::geometry::{self, ProjectiveFactor, SprayField};
use crate::jet::Jet;
use crate::phase::PhasePoint;
use crate::report::DiagnosticReport;

pub const HELMHOLTZ_TOL: f64 = 1e-7;

/// Symmetric (0,2) tensor along the projection; stores the i ≤ j entries.
#[derive(Clone)]
pub struct MultiplierField {
    n: usize,
    entries: Vec<FieldRef>,
}

impl MultiplierField {
    pub fn new(n: usize, entries: Vec<FieldRef>) -> Result<Self> {
        let expected = n * (n + 1) / 2;
        if entries.len() != expected {
            return Err(Error::Dimension { expected, got: entries.len() });
        }
        Ok(MultiplierField { n, entries })
    }

    /// Entries from expression texts, i ≤ j in row-major order
    /// (h11, h12, .., h1n, h22, ..).
    pub fn from_texts(n: usize, texts: &[String]) -> Result<Self> {
        let entries = texts
            .iter()
            .map(|t| field::from_text(t, n))
            .collect::<Result<Vec<_>>>()?;
        MultiplierField::new(n, entries)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        i * self.n - i * (i + 1) / 2 + j
    }

    pub fn entry(&self, i: usize, j: usize) -> &FieldRef {
        &self.entries[self.idx(i, j)]
    }

    pub fn entry_jets(&self, p: &PhasePoint, order: usize) -> Result<Vec<Jet>> {
        self.entries.iter().map(|e| e.jet(p, order)).collect()
    }

    pub fn entry_jet<'a>(&self, jets: &'a [Jet], i: usize, j: usize) -> &'a Jet {
        &jets[self.idx(i, j)]
    }

    pub fn matrix_from_jets(&self, jets: &[Jet]) -> DMatrix<f64> {
        let n = self.n;
        DMatrix::from_fn(n, n, |i, j| jets[self.idx(i, j)].value())
    }

    pub fn matrix(&self, p: &PhasePoint) -> Result<DMatrix<f64>> {
        let jets = self.entry_jets(p, 0)?;
        Ok(self.matrix_from_jets(&jets))
    }
}

/// The fibre Hessian of F as a multiplier with its own exact jets.
pub fn hessian_of(f: &ScalarField) -> MultiplierField {
    if let Some(h) = f.hessian_override() {
        return h.clone();
    }
    MultiplierField { n: f.dim(), entries: field::fibre_hessian_entries(Arc::clone(f.field())) }
}

fn normalization(m: &DMatrix<f64>) -> f64 {
    1.0 + m.amax()
}

/// The five Theorem-level conditions plus the implied degree-(−1) residual.
pub fn helmholtz_report(
    h: &MultiplierField,
    spray: &SprayField,
    samples: &[PhasePoint],
) -> Result<DiagnosticReport> {
    let n = h.dim();
    if spray.dim() != n {
        return Err(Error::Dimension { expected: n, got: spray.dim() });
    }
    let mut symmetry: f64 = 0.0;
    let mut kernel: f64 = 0.0;
    let mut closed: f64 = 0.0;
    let mut nabla: f64 = 0.0;
    let mut weyl_compat: f64 = 0.0;
    let mut homogeneity: f64 = 0.0;

    for p in samples {
        let jets = h.entry_jets(p, 1)?;
        let hm = h.matrix_from_jets(&jets);
        let scale = normalization(&hm);
        let y = p.fibre();

        // (i) is structural with triangular storage, recorded as exact.
        // (ii)
        for i in 0..n {
            let hy: f64 = (0..n).map(|j| hm[(i, j)] * y[j]).sum();
            kernel = kernel.max(hy.abs() / scale);
        }
        // (iii) and implied homogeneity
        for i in 0..n {
            for j in 0..n {
                let mut euler = hm[(i, j)];
                for k in 0..n {
                    let d_ij_k = h.entry_jet(&jets, i, j).d1(n + k);
                    let d_ik_j = h.entry_jet(&jets, i, k).d1(n + j);
                    closed = closed.max((d_ij_k - d_ik_j).abs() / scale);
                    euler += y[k] * d_ij_k;
                }
                homogeneity = homogeneity.max(euler.abs() / scale);
            }
        }
        // (iv)
        let del = geometry::covariant_derivative_02(spray, h, p)?;
        nabla = nabla.max(del.amax() / scale);
        // (v)
        let curv = geometry::curvature(spray, p)?;
        let hw = &hm * &curv.weyl;
        weyl_compat = weyl_compat.max((&hw - hw.transpose()).amax() / scale);
        symmetry = symmetry.max(0.0);
    }

    let mut report = DiagnosticReport::new();
    report.record("helmholtz/symmetry", symmetry, HELMHOLTZ_TOL);
    report.record("helmholtz/kernel", kernel, HELMHOLTZ_TOL);
    report.record("helmholtz/closed-fibre-derivative", closed, HELMHOLTZ_TOL);
    report.record("helmholtz/nabla", nabla, HELMHOLTZ_TOL);
    report.record("helmholtz/weyl-compatibility", weyl_compat, HELMHOLTZ_TOL);
    report.record("helmholtz/implied-degree-minus-1", homogeneity, HELMHOLTZ_TOL);
    if n == 2 {
        report.note("weyl condition trivial in dimension 2 (W = 0)");
    }
    Ok(report)
}

/// Compatibility of h with the curvature package in its three equivalent
/// forms; the verdicts must agree whenever the premise (i)–(iii) holds.
#[derive(Debug, Clone)]
pub struct CompatReport {
    pub premise_ok: bool,
    pub r_form: f64,
    pub cyclic_form: f64,
    pub w_form: f64,
    pub tolerance: f64,
    pub verdicts_agree: bool,
}

impl CompatReport {
    pub fn all_pass(&self) -> bool {
        self.premise_ok
            && self.r_form < self.tolerance
            && self.cyclic_form < self.tolerance
            && self.w_form < self.tolerance
    }
}

pub fn curvature_compat(h: &MultiplierField, spray: &SprayField, p: &PhasePoint) -> Result<CompatReport> {
    let n = h.dim();
    let jets = h.entry_jets(p, 1)?;
    let hm = h.matrix_from_jets(&jets);
    let scale = normalization(&hm);
    let y = p.fibre();

    // premise: (ii) and (iii) at this point
    let mut premise: f64 = 0.0;
    for i in 0..n {
        let hy: f64 = (0..n).map(|j| hm[(i, j)] * y[j]).sum();
        premise = premise.max(hy.abs() / scale);
        for j in 0..n {
            for k in 0..n {
                let d = h.entry_jet(&jets, i, j).d1(n + k) - h.entry_jet(&jets, i, k).d1(n + j);
                premise = premise.max(d.abs() / scale);
            }
        }
    }
    let premise_ok = premise < HELMHOLTZ_TOL;

    let curv = geometry::curvature(spray, p)?;
    let hr = &hm * &curv.jacobi;
    let r_form = (&hr - hr.transpose()).amax() / scale;

    let mut cyclic_form: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                let mut v = 0.0;
                for l in 0..n {
                    v += hm[(i, l)] * curv.curvature.get(l, j, k);
                    v += hm[(j, l)] * curv.curvature.get(l, k, i);
                    v += hm[(k, l)] * curv.curvature.get(l, i, j);
                }
                cyclic_form = cyclic_form.max(v.abs() / scale);
            }
        }
    }

    let hw = &hm * &curv.weyl;
    let w_form = (&hw - hw.transpose()).amax() / scale;

    let tolerance = HELMHOLTZ_TOL;
    let verdicts = [r_form < tolerance, cyclic_form < tolerance, w_form < tolerance];
    Ok(CompatReport {
        premise_ok,
        r_form,
        cyclic_form,
        w_form,
        tolerance,
        verdicts_agree: verdicts.iter().all(|&v| v == verdicts[0]),
    })
}

/// ∇h must agree between any two sprays of a projective class when h is
/// symmetric and degree −1 homogeneous.
pub fn nabla_projective_invariance(
    h: &MultiplierField,
    spray: &SprayField,
    factor: &ProjectiveFactor,
    samples: &[PhasePoint],
) -> Result<DiagnosticReport> {
    let n = h.dim();
    let changed = geometry::projective_change(spray, factor)?;
    let mut hypothesis: f64 = 0.0;
    let mut invariance: f64 = 0.0;
    for p in samples {
        let jets = h.entry_jets(p, 1)?;
        let hm = h.matrix_from_jets(&jets);
        let scale = normalization(&hm);
        for i in 0..n {
            for j in i..n {
                let mut euler = hm[(i, j)];
                for k in 0..n {
                    euler += p.fibre()[k] * h.entry_jet(&jets, i, j).d1(n + k);
                }
                hypothesis = hypothesis.max(euler.abs() / scale);
            }
        }
        let a = geometry::covariant_derivative_02(spray, h, p)?;
        let b = geometry::covariant_derivative_02(&changed, h, p)?;
        invariance = invariance.max((&a - &b).amax() / scale);
    }
    let mut report = DiagnosticReport::new();
    report.record("nabla/degree-minus-1-hypothesis", hypothesis, HELMHOLTZ_TOL);
    report.record("nabla/projective-invariance", invariance, 1e-8);
    if hypothesis >= HELMHOLTZ_TOL {
        report.note(format!(
            "hypothesis violated: h is not degree -1 homogeneous (residual {hypothesis:.3e}); invariance not guaranteed"
        ));
    }
    Ok(report)
}

/// In dimension 2 the multiplier freedom is exactly ĥ = f·h with Δ(f) = 0 and
/// Γ(f) = 0; both conditions are verified at the samples before scaling.
pub fn scale_2d(
    h: &MultiplierField,
    f: &ScalarField,
    spray: &SprayField,
    samples: &[PhasePoint],
) -> Result<MultiplierField> {
    if h.dim() != 2 {
        return Err(Error::Precondition(format!(
            "scale_2d applies to dimension 2 only (got {})",
            h.dim()
        )));
    }
    let n = 2;
    let mut degree0: f64 = 0.0;
    let mut along_flow: f64 = 0.0;
    for p in samples {
        let j = f.field().jet(p, 1)?;
        let scale = 1.0 + j.value().abs();
        let delta: f64 = (0..n).map(|k| p.fibre()[k] * j.d1(n + k)).sum();
        degree0 = degree0.max(delta.abs() / scale);
        let gamma_values = spray.coefficient_values(p)?;
        along_flow =
            along_flow.max(geometry::spray_derivative(p.fibre(), &gamma_values, &j).abs() / scale);
    }
    if degree0 >= HELMHOLTZ_TOL {
        return Err(Error::Precondition(format!(
            "scaling function is not degree-0 homogeneous: residual {degree0:e}"
        )));
    }
    if along_flow >= HELMHOLTZ_TOL {
        return Err(Error::Precondition(format!(
            "scaling function is not constant along the flow: residual {along_flow:e}"
        )));
    }
    let entries = h
        .entries
        .iter()
        .map(|e| field::product(Arc::clone(f.field()), Arc::clone(e)))
        .collect();
    MultiplierField::new(2, entries)
}

/// Minimal singular value of h restricted to the Euclidean complement of y;
/// quasi-regular when this stays positive while h·y ≈ 0.
pub fn quasi_regularity(h: &DMatrix<f64>, y: &[f64]) -> Result<f64> {
    let b = restrict_to_complement(h, y)?;
    Ok(b.svd(false, false).singular_values.iter().fold(f64::INFINITY, |m, &s| m.min(s)))
}

/// Orthonormal basis of the complement of y, as columns.
pub(crate) fn complement_basis(y: &[f64]) -> Result<DMatrix<f64>> {
    let n = y.len();
    let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm <= crate::phase::SLIT_EPSILON {
        return Err(Error::SlitBundle { norm, eps: crate::phase::SLIT_EPSILON });
    }
    let yhat: Vec<f64> = y.iter().map(|v| v / norm).collect();
    let mut basis: Vec<Vec<f64>> = vec![yhat.clone()];
    for i in 0..n {
        if basis.len() == n {
            break;
        }
        let mut candidate = vec![0.0; n];
        candidate[i] = 1.0;
        for b in &basis {
            let dot: f64 = candidate.iter().zip(b).map(|(a, c)| a * c).sum();
            for (c, bv) in candidate.iter_mut().zip(b) {
                *c -= dot * bv;
            }
        }
        let cnorm = candidate.iter().map(|v| v * v).sum::<f64>().sqrt();
        if cnorm > 1e-8 {
            basis.push(candidate.iter().map(|v| v / cnorm).collect());
        }
    }
    debug_assert_eq!(basis.len(), n);
    Ok(DMatrix::from_fn(n, n - 1, |r, c| basis[c + 1][r]))
}

pub(crate) fn restrict_to_complement(h: &DMatrix<f64>, y: &[f64]) -> Result<DMatrix<f64>> {
    let e = complement_basis(y)?;
    Ok(e.transpose() * h * e)
}
