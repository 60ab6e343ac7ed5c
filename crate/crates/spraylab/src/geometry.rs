//! Sprays and their associated geometric objects: nonlinear connection,
//! Jacobi endomorphism and curvature, Weyl tensor, dynamical covariant
//! derivative, projective changes, and reversal.
//!
//! The Jacobi endomorphism is computed from the coordinate formula
//!
//! ```text
//! R^i_j = 2 ∂Γ^i/∂x^j − Γ(Γ^i_j) − Γ^i_k Γ^k_j,   Γ(f) = y^k ∂f/∂x^k − 2Γ^k ∂f/∂y^k
//! ```
//!
//! which is gated by [`bracket_residuals`]: the three frame bracket identities
//! are evaluated numerically and any discrepancy beyond tolerance is a
//! build-stopping failure, since the endomorphism is *defined* through the
//! brackets.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::field::{self, FieldRef};
use crate::jet::Jet;
use crate::multiplier::MultiplierField;
use crate::phase::PhasePoint;
use crate::report::DiagnosticReport;
use crate::sampling;

pub const HOMOGENEITY_TOL: f64 = 1e-9;
pub const BRACKET_TOL: f64 = 1e-7;

/// Spray coefficients Γ^i as black-box evaluators with jets to order 4.
#[derive(Clone)]
pub struct SprayField {
    n: usize,
    coeffs: Vec<FieldRef>,
}

impl SprayField {
    pub fn new(n: usize, coeffs: Vec<FieldRef>) -> Result<Self> {
        if coeffs.len() != n || n < 2 {
            return Err(Error::Dimension { expected: n, got: coeffs.len() });
        }
        Ok(SprayField { n, coeffs })
    }

    /// Flat spray: all coefficients zero.
    pub fn flat(n: usize) -> Self {
        SprayField { n, coeffs: (0..n).map(|_| field::constant(n, 0.0)).collect() }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn coefficient(&self, i: usize) -> &FieldRef {
        &self.coeffs[i]
    }

    pub fn coefficient_values(&self, p: &PhasePoint) -> Result<Vec<f64>> {
        self.coeffs.iter().map(|c| c.eval(p)).collect()
    }

    pub fn coefficient_jets(&self, p: &PhasePoint, order: usize) -> Result<Vec<Jet>> {
        self.coeffs.iter().map(|c| c.jet(p, order)).collect()
    }
}

/// Γ^i_j and Γ^k_ij at a point.
#[derive(Debug, Clone)]
pub struct ConnectionData {
    /// Γ^i_j = ∂Γ^i/∂y^j; row i, column j.
    pub gamma: DMatrix<f64>,
    /// Γ^k_ij = ∂²Γ^k/∂y^i∂y^j, symmetric in (i, j).
    pub gamma2: Tensor3,
}

/// Point values of the curvature package.
#[derive(Debug, Clone)]
pub struct CurvatureData {
    /// Jacobi endomorphism R^i_j.
    pub jacobi: DMatrix<f64>,
    /// R^i_jk = (1/3)(∂R^i_j/∂y^k − ∂R^i_k/∂y^j), antisymmetric in (j, k).
    pub curvature: Tensor3,
    /// R = R^k_k / (n − 1).
    pub scalar: f64,
    /// ρ_j = (∂R^k_j/∂y^k − ∂R/∂y^j) / (n + 1).
    pub rho: DVector<f64>,
    /// W^i_j = R^i_j − R δ^i_j − ρ_j y^i. Identically zero (and flagged so)
    /// in dimension 2.
    pub weyl: DMatrix<f64>,
    pub weyl_defined: bool,
}

/// Dense n³ array indexed (i, j, k).
#[derive(Debug, Clone)]
pub struct Tensor3 {
    n: usize,
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(n: usize) -> Self {
        Tensor3 { n, data: vec![0.0; n * n * n] }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[(i * self.n + j) * self.n + k]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f64) {
        self.data[(i * self.n + j) * self.n + k] = v;
    }
}

/// Scalar field P with Δ(P) = P, the generator of a projective change.
#[derive(Clone)]
pub struct ProjectiveFactor {
    field: FieldRef,
}

impl ProjectiveFactor {
    /// Wraps P after checking degree-1 homogeneity (Δ(P) = P) at probe points.
    pub fn new(field: FieldRef) -> Result<Self> {
        let n = field.dim();
        let mut worst: f64 = 0.0;
        for p in sampling::seeded_phase_points_scaled(n, 12, 0x50_FA_C7, 1.0) {
            let j = field.jet(&p, 1)?;
            let mut delta_p = 0.0;
            for k in 0..n {
                delta_p += p.fibre()[k] * j.d1(n + k);
            }
            worst = worst.max((delta_p - j.value()).abs() / (1.0 + j.value().abs()));
        }
        if worst >= HOMOGENEITY_TOL {
            return Err(Error::FactorHomogeneity { residual: worst });
        }
        Ok(ProjectiveFactor { field })
    }

    pub fn field(&self) -> &FieldRef {
        &self.field
    }

    pub fn zero(n: usize) -> Self {
        ProjectiveFactor { field: field::constant(n, 0.0) }
    }
}

/// Γ(f) at a point from the jet of f and spray coefficient values.
pub(crate) fn spray_derivative(fibre: &[f64], gamma_values: &[f64], f: &Jet) -> f64 {
    let n = fibre.len();
    let mut acc = 0.0;
    for k in 0..n {
        acc += fibre[k] * f.d1(k) - 2.0 * gamma_values[k] * f.d1(n + k);
    }
    acc
}

/// Degree-2 homogeneity of the coefficients, sampled at k ∈ {0.5, 2, 3}.
pub fn validate_spray(spray: &SprayField, samples: &[PhasePoint]) -> Result<DiagnosticReport> {
    let mut worst: f64 = 0.0;
    for p in samples {
        let base = spray.coefficient_values(p)?;
        for k in [0.5, 2.0, 3.0] {
            let scaled = spray.coefficient_values(&p.scale_fibre(k)?)?;
            for i in 0..spray.dim() {
                let residual = (scaled[i] - k * k * base[i]).abs() / (1.0 + base[i].abs());
                worst = worst.max(residual);
            }
        }
    }
    let mut report = DiagnosticReport::new();
    report.record("spray/homogeneity", worst, HOMOGENEITY_TOL);
    Ok(report)
}

/// Connection coefficients from exact jets; asserts the Euler identities.
pub fn connection(spray: &SprayField, p: &PhasePoint) -> Result<ConnectionData> {
    let n = spray.dim();
    let jets = spray.coefficient_jets(p, 2)?;
    let mut gamma = DMatrix::zeros(n, n);
    let mut gamma2 = Tensor3::zeros(n);
    for i in 0..n {
        for j in 0..n {
            gamma[(i, j)] = jets[i].d1(n + j);
            for k in 0..n {
                gamma2.set(i, j, k, jets[i].d2(n + j, n + k));
            }
        }
    }
    // Euler identities: Γ^i_j y^j = 2Γ^i and Γ^k_ij y^j = Γ^k_i.
    for i in 0..n {
        let mut contracted = 0.0;
        for j in 0..n {
            contracted += gamma[(i, j)] * p.fibre()[j];
        }
        let value = jets[i].value();
        if (contracted - 2.0 * value).abs() > 1e-10 * (1.0 + value.abs()) {
            return Err(Error::Precondition(format!(
                "Euler identity failed for coefficient {i}: residual {:e}; spray not degree-2 homogeneous",
                (contracted - 2.0 * value).abs()
            )));
        }
    }
    Ok(ConnectionData { gamma, gamma2 })
}

/// Full curvature package at a point (jets of the coefficients to order 3).
pub fn curvature(spray: &SprayField, p: &PhasePoint) -> Result<CurvatureData> {
    let n = spray.dim();
    let jets = spray.coefficient_jets(p, 3)?;
    let gamma_values: Vec<f64> = jets.iter().map(|j| j.value()).collect();
    let y = p.fibre();

    let mut gamma = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            gamma[(i, j)] = jets[i].d1(n + j);
        }
    }

    // R^i_j = 2 ∂Γ^i/∂x^j − y^a ∂²Γ^i/∂x^a∂y^j + 2Γ^a ∂²Γ^i/∂y^a∂y^j − Γ^i_k Γ^k_j
    let mut jacobi = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let mut v = 2.0 * jets[i].d1(j);
            for a in 0..n {
                v -= y[a] * jets[i].d2(a, n + j);
                v += 2.0 * gamma_values[a] * jets[i].d2(n + a, n + j);
            }
            for k in 0..n {
                v -= gamma[(i, k)] * gamma[(k, j)];
            }
            jacobi[(i, j)] = v;
        }
    }

    // ∂R^i_j/∂y^k, assembled from jets of the coefficients to third order.
    let mut djacobi = Tensor3::zeros(n);
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                let mut v = 2.0 * jets[i].d2(j, n + k);
                v -= jets[i].d2(k, n + j);
                for a in 0..n {
                    v -= y[a] * jets[i].d3(a, n + j, n + k);
                    v += 2.0 * gamma[(a, k)] * jets[i].d2(n + a, n + j);
                    v += 2.0 * gamma_values[a] * jets[i].d3(n + a, n + j, n + k);
                }
                for l in 0..n {
                    v -= jets[i].d2(n + l, n + k) * gamma[(l, j)];
                    v -= gamma[(i, l)] * jets[l].d2(n + j, n + k);
                }
                djacobi.set(i, j, k, v);
            }
        }
    }

    let mut curvature3 = Tensor3::zeros(n);
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                curvature3.set(i, j, k, (djacobi.get(i, j, k) - djacobi.get(i, k, j)) / 3.0);
            }
        }
    }

    let trace: f64 = (0..n).map(|k| jacobi[(k, k)]).sum();
    let scalar = trace / (n as f64 - 1.0);

    let mut rho = DVector::zeros(n);
    for j in 0..n {
        let div: f64 = (0..n).map(|k| djacobi.get(k, j, k)).sum();
        let dscalar: f64 = (0..n).map(|k| djacobi.get(k, k, j)).sum::<f64>() / (n as f64 - 1.0);
        rho[j] = (div - dscalar) / (n as f64 + 1.0);
    }

    let weyl_defined = n >= 3;
    let mut weyl = DMatrix::zeros(n, n);
    if weyl_defined {
        for i in 0..n {
            for j in 0..n {
                let mut v = jacobi[(i, j)] - rho[j] * y[i];
                if i == j {
                    v -= scalar;
                }
                weyl[(i, j)] = v;
            }
        }
    }

    Ok(CurvatureData { jacobi, curvature: curvature3, scalar, rho, weyl, weyl_defined })
}

/// Residuals of the CurvatureData identities at sample points.
pub fn curvature_report(spray: &SprayField, samples: &[PhasePoint]) -> Result<DiagnosticReport> {
    let n = spray.dim();
    let mut antisym: f64 = 0.0;
    let mut reconstruct: f64 = 0.0;
    let mut jacobi_kernel: f64 = 0.0;
    let mut weyl_kernel: f64 = 0.0;
    for p in samples {
        let c = curvature(spray, p)?;
        let y = p.fibre();
        let scale = 1.0 + c.jacobi.amax();
        for i in 0..n {
            for j in 0..n {
                let mut ry = 0.0;
                let mut wy = 0.0;
                for k in 0..n {
                    antisym = antisym.max((c.curvature.get(i, j, k) + c.curvature.get(i, k, j)).abs());
                    ry += c.curvature.get(i, j, k) * y[k];
                }
                reconstruct = reconstruct.max((ry - c.jacobi[(i, j)]).abs() / scale);
                for k in 0..n {
                    wy += c.weyl[(i, k)] * y[k];
                }
                weyl_kernel = weyl_kernel.max(wy.abs() / scale);
            }
            let jy: f64 = (0..n).map(|j| c.jacobi[(i, j)] * y[j]).sum();
            jacobi_kernel = jacobi_kernel.max(jy.abs() / scale);
        }
    }
    let mut report = DiagnosticReport::new();
    report.record("curvature/antisymmetry", antisym, 1e-12);
    report.record("curvature/contraction", reconstruct, 1e-8);
    report.record("curvature/jacobi-kernel", jacobi_kernel, 1e-8);
    report.record("curvature/weyl-kernel", weyl_kernel, 1e-8);
    if n == 2 {
        report.note("weyl tensor identically zero in dimension 2");
    }
    Ok(report)
}

/// Evaluates both sides of the three frame bracket identities numerically.
pub fn bracket_residuals(spray: &SprayField, p: &PhasePoint) -> Result<DiagnosticReport> {
    let curv = curvature(spray, p)?;
    bracket_residuals_with_curvature(spray, p, &curv)
}

/// Bracket identities against an externally supplied curvature package; used
/// by fault-injection tests and by [`bracket_residuals`] itself.
pub fn bracket_residuals_with_curvature(
    spray: &SprayField,
    p: &PhasePoint,
    curv: &CurvatureData,
) -> Result<DiagnosticReport> {
    let n = spray.dim();
    let jets = spray.coefficient_jets(p, 3)?;
    let gamma_values: Vec<f64> = jets.iter().map(|j| j.value()).collect();
    let y = p.fibre();
    let mut gamma = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            gamma[(i, j)] = jets[i].d1(n + j);
        }
    }

    // [Γ, H_i] = Γ^j_i H_j + R^j_i V_j
    let mut r1: f64 = 0.0;
    for i in 0..n {
        for a in 0..n {
            // x-components: Γ(δ^a_i) − H_i(y^a) = Γ^a_i on both sides.
            let lhs_x = gamma[(a, i)];
            let rhs_x = gamma[(a, i)];
            r1 = r1.max((lhs_x - rhs_x).abs());
            // y-components
            let mut gamma_of_conn = 0.0; // Γ(Γ^a_i)
            for k in 0..n {
                gamma_of_conn += y[k] * jets[a].d2(k, n + i);
                gamma_of_conn -= 2.0 * gamma_values[k] * jets[a].d2(n + k, n + i);
            }
            let mut h_i_of_gamma = jets[a].d1(i); // H_i(Γ^a)
            for j in 0..n {
                h_i_of_gamma -= gamma[(j, i)] * jets[a].d1(n + j);
            }
            let lhs = -gamma_of_conn + 2.0 * h_i_of_gamma;
            let mut rhs = curv.jacobi[(a, i)];
            for j in 0..n {
                rhs -= gamma[(j, i)] * gamma[(a, j)];
            }
            r1 = r1.max((lhs - rhs).abs());
        }
    }

    // [Γ, V_i] = −H_i + Γ^j_i V_j
    let mut r2: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            let lhs = 2.0 * jets[j].d1(n + i); // −V_i(−2Γ^j)
            let rhs = gamma[(j, i)] + gamma[(j, i)];
            r2 = r2.max((lhs - rhs).abs());
        }
    }

    // [H_j, H_k] = −R^i_jk V_i
    let mut r3: f64 = 0.0;
    for j in 0..n {
        for k in 0..n {
            for i in 0..n {
                let mut h_j = jets[i].d2(j, n + k); // H_j(Γ^i_k)
                let mut h_k = jets[i].d2(k, n + j);
                for l in 0..n {
                    h_j -= gamma[(l, j)] * jets[i].d2(n + l, n + k);
                    h_k -= gamma[(l, k)] * jets[i].d2(n + l, n + j);
                }
                let lhs = -(h_j - h_k); // y-coefficient of [H_j, H_k]
                let rhs = -curv.curvature.get(i, j, k);
                r3 = r3.max((lhs - rhs).abs());
            }
        }
    }

    let mut report = DiagnosticReport::new();
    report.record("bracket/spray-horizontal", r1, BRACKET_TOL);
    report.record("bracket/spray-vertical", r2, BRACKET_TOL);
    report.record("bracket/horizontal-horizontal", r3, BRACKET_TOL);
    Ok(report)
}

/// Dynamical covariant derivative of a symmetric (0,2) tensor:
/// (∇h)_ij = Γ(h_ij) − Γ^k_i h_kj − Γ^k_j h_ik.
pub fn covariant_derivative_02(
    spray: &SprayField,
    h: &MultiplierField,
    p: &PhasePoint,
) -> Result<DMatrix<f64>> {
    let n = spray.dim();
    let conn = connection(spray, p)?;
    let gamma_values = spray.coefficient_values(p)?;
    let hj = h.entry_jets(p, 1)?;
    let hm = h.matrix_from_jets(&hj);
    let mut out = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let mut v = spray_derivative(p.fibre(), &gamma_values, h.entry_jet(&hj, i, j));
            for k in 0..n {
                v -= conn.gamma[(k, i)] * hm[(k, j)];
                v -= conn.gamma[(k, j)] * hm[(i, k)];
            }
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    Ok(out)
}

/// Dynamical covariant derivative of a (1,0) tensor:
/// (∇X)^i = Γ(X^i) + Γ^i_k X^k. In particular ∇y = 0 for every spray.
pub fn covariant_derivative_10(
    spray: &SprayField,
    components: &[FieldRef],
    p: &PhasePoint,
) -> Result<DVector<f64>> {
    let n = spray.dim();
    let conn = connection(spray, p)?;
    let gamma_values = spray.coefficient_values(p)?;
    let jets: Vec<Jet> = components.iter().map(|c| c.jet(p, 1)).collect::<Result<_>>()?;
    let values: Vec<f64> = jets.iter().map(|j| j.value()).collect();
    let mut out = DVector::zeros(n);
    for i in 0..n {
        let mut v = spray_derivative(p.fibre(), &gamma_values, &jets[i]);
        for k in 0..n {
            v += conn.gamma[(i, k)] * values[k];
        }
        out[i] = v;
    }
    Ok(out)
}

/// Projective change Γ̃^i = Γ^i + P y^i; the connection shift
/// Γ̃^i_j = Γ^i_j + Pδ^i_j + P_j y^i is verified at probe points.
pub fn projective_change(spray: &SprayField, factor: &ProjectiveFactor) -> Result<SprayField> {
    let n = spray.dim();
    let coeffs: Vec<FieldRef> = (0..n)
        .map(|i| {
            field::add(
                Arc::clone(spray.coefficient(i)),
                field::product(Arc::clone(factor.field()), field::fibre_coord(n, i)),
            )
        })
        .collect();
    let changed = SprayField::new(n, coeffs)?;

    let mut worst: f64 = 0.0;
    for p in sampling::seeded_phase_points_scaled(n, 6, 0x51_4A_FE, 1.0) {
        let before = connection(spray, &p)?;
        let after = connection(&changed, &p)?;
        let pj = factor.field().jet(&p, 1)?;
        for i in 0..n {
            for j in 0..n {
                let mut expect = before.gamma[(i, j)] + pj.value() * if i == j { 1.0 } else { 0.0 };
                expect += pj.d1(n + j) * p.fibre()[i];
                worst = worst.max((after.gamma[(i, j)] - expect).abs() / (1.0 + expect.abs()));
            }
        }
    }
    if worst >= HOMOGENEITY_TOL {
        return Err(Error::Precondition(format!(
            "projective connection shift failed: residual {worst:e}"
        )));
    }
    Ok(changed)
}

/// Reverse spray: Γ̄^i(x, y) = Γ^i(x, −y).
pub fn reverse_spray(spray: &SprayField) -> SprayField {
    let coeffs = spray.coeffs.iter().map(|c| field::fibre_reflect(Arc::clone(c))).collect();
    SprayField { n: spray.n, coeffs }
}

/// Strictly reversible representative Γ̃ = ½(Γ + Γ̄) of the projective class.
pub fn symmetrize_spray(spray: &SprayField) -> SprayField {
    let reversed = reverse_spray(spray);
    let coeffs = spray
        .coeffs
        .iter()
        .zip(&reversed.coeffs)
        .map(|(a, b)| field::scale(field::add(Arc::clone(a), Arc::clone(b)), 0.5))
        .collect();
    SprayField { n: spray.n, coeffs }
}

/// Outcome of a pointwise projective-equivalence test.
#[derive(Debug, Clone)]
pub struct EquivalenceReport {
    pub equivalent: bool,
    /// P sampled at each input point (meaningful when equivalent).
    pub factor_samples: Vec<f64>,
    pub max_residual: f64,
    /// Index of the worst offending sample.
    pub worst_sample: usize,
    /// Residual of the degree-1 homogeneity check Δ(P) = P on the samples.
    pub homogeneity_residual: f64,
}

/// Tests whether Γ₂ − Γ₁ = P·y for a single scalar P at every sample.
pub fn projective_equivalence(
    s1: &SprayField,
    s2: &SprayField,
    samples: &[PhasePoint],
) -> Result<EquivalenceReport> {
    if s1.dim() != s2.dim() {
        return Err(Error::Dimension { expected: s1.dim(), got: s2.dim() });
    }
    let n = s1.dim();
    let tol = 1e-8;

    let factor_at = |p: &PhasePoint| -> Result<(f64, f64)> {
        let a = s1.coefficient_values(p)?;
        let b = s2.coefficient_values(p)?;
        let d: Vec<f64> = a.iter().zip(&b).map(|(x, y)| y - x).collect();
        let y = p.fibre();
        let jstar = (0..n).max_by(|&i, &j| y[i].abs().total_cmp(&y[j].abs())).unwrap();
        let factor = d[jstar] / y[jstar];
        let scale = 1.0 + d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let residual = (0..n).map(|i| (d[i] - factor * y[i]).abs()).fold(0.0f64, f64::max) / scale;
        Ok((factor, residual))
    };

    let mut factor_samples = Vec::with_capacity(samples.len());
    let mut max_residual: f64 = 0.0;
    let mut worst_sample = 0;
    let mut homogeneity_residual: f64 = 0.0;
    for (idx, p) in samples.iter().enumerate() {
        let (factor, residual) = factor_at(p)?;
        if residual > max_residual {
            max_residual = residual;
            worst_sample = idx;
        }
        factor_samples.push(factor);
        for k in [0.5, 2.0] {
            let (scaled_factor, _) = factor_at(&p.scale_fibre(k)?)?;
            homogeneity_residual =
                homogeneity_residual.max((scaled_factor - k * factor).abs() / (1.0 + factor.abs()));
        }
    }
    Ok(EquivalenceReport {
        equivalent: max_residual < tol && homogeneity_residual < tol,
        factor_samples,
        max_residual,
        worst_sample,
        homogeneity_residual,
    })
}
