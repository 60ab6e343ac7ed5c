//! Candidate Finsler functions: homogeneity, fundamental tensors, positivity
//! and strong convexity, the triangle/fundamental inequalities, constructive
//! positivization, and the Euler-Lagrange (Rapcsák) residuals.
//!
//! The decomposition behind the classification: at points where F > 0 the
//! tensor g_ij = F·h_ij + θ_iθ_j is positive definite exactly when the fibre
//! Hessian h is positive quasi-definite, i.e. non-negative with kernel the
//! ray of y. Positivity of F itself cannot be read off the Hessian, but a
//! positively-homogeneous F with quasi-definite Hessian becomes positive
//! after adding a suitable linear form α_i y^i ([`positivize`]).

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::field::{self, FieldRef};
use crate::geometry::{self, SprayField};
use crate::multiplier::{self, MultiplierField};
use crate::phase::{PhasePoint, SLIT_EPSILON};
use crate::report::DiagnosticReport;
use crate::sampling;

/// Positivity / eigenvalue threshold.
pub const POSITIVITY_TOL: f64 = 1e-9;
/// Euler-Lagrange / Rapcsák residual threshold (jets are exact; the slack
/// covers conditioning).
pub const RAPCSAK_TOL: f64 = 1e-7;
/// |slack| below this counts as equality in the inequality checks.
pub const EQUALITY_TOL: f64 = 1e-10;

/// A scalar evaluator F(x, y) with jets to order 4.
#[derive(Clone)]
pub struct ScalarField {
    n: usize,
    f: FieldRef,
    /// Set when the fibre Hessian is known exactly by construction
    /// (reconstructed fields return their source multiplier here).
    hessian_override: Option<MultiplierField>,
    /// Set by quadrature-defined fields that deliver base-variable θ jets
    /// past the order cap of their phase-space jets.
    theta_jets: Option<std::sync::Arc<dyn crate::field::ThetaJets>>,
}

impl ScalarField {
    pub fn new(n: usize, f: FieldRef) -> Self {
        ScalarField { n, f, hessian_override: None, theta_jets: None }
    }

    pub fn from_text(text: &str, n: usize) -> Result<Self> {
        Ok(ScalarField::new(n, field::from_text(text, n)?))
    }

    pub fn with_hessian(n: usize, f: FieldRef, hessian: MultiplierField) -> Self {
        ScalarField { n, f, hessian_override: Some(hessian), theta_jets: None }
    }

    pub fn with_hooks(
        n: usize,
        f: FieldRef,
        hessian: MultiplierField,
        theta: std::sync::Arc<dyn crate::field::ThetaJets>,
    ) -> Self {
        ScalarField { n, f, hessian_override: Some(hessian), theta_jets: Some(theta) }
    }

    pub fn theta_jets_hook(&self) -> Option<&std::sync::Arc<dyn crate::field::ThetaJets>> {
        self.theta_jets.as_ref()
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn field(&self) -> &FieldRef {
        &self.f
    }

    pub fn hessian_override(&self) -> Option<&MultiplierField> {
        self.hessian_override.as_ref()
    }

    pub fn eval(&self, p: &PhasePoint) -> Result<f64> {
        self.f.eval(p)
    }

    /// F extended by continuity to y = 0 (where every positively homogeneous
    /// function vanishes).
    fn eval_or_zero(&self, base: &[f64], fibre: &[f64]) -> Result<f64> {
        let norm = fibre.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= SLIT_EPSILON {
            return Ok(0.0);
        }
        self.f.eval(&PhasePoint::new(base.to_vec(), fibre.to_vec())?)
    }
}

/// θ_i = ∂F/∂y^i, h_ij = ∂²F/∂y^i∂y^j, g_ij = F·h_ij + θ_iθ_j at a point.
#[derive(Debug, Clone)]
pub struct FinslerTensors {
    pub value: f64,
    pub theta: DVector<f64>,
    pub hessian: DMatrix<f64>,
    pub fundamental: DMatrix<f64>,
}

/// Euler (degree-1) residual and the informational absolute-homogeneity flag.
pub fn homogeneity_report(f: &ScalarField, samples: &[PhasePoint]) -> Result<DiagnosticReport> {
    let n = f.dim();
    let mut euler: f64 = 0.0;
    let mut absolute: f64 = 0.0;
    for p in samples {
        let j = f.f.jet(p, 1)?;
        let scale = 1.0 + j.value().abs();
        let radial: f64 = (0..n).map(|k| p.fibre()[k] * j.d1(n + k)).sum();
        euler = euler.max((radial - j.value()).abs() / scale);
        let reflected = f.f.eval(&p.reflect())?;
        absolute = absolute.max((reflected - j.value()).abs() / scale);
    }
    let mut report = DiagnosticReport::new();
    report.record("finsler/euler-degree-1", euler, POSITIVITY_TOL);
    if absolute < POSITIVITY_TOL {
        report.note(format!("absolutely homogeneous (residual {absolute:.3e})"));
    } else {
        report.note(format!("not absolutely homogeneous (residual {absolute:.3e})"));
    }
    Ok(report)
}

/// Max |F(x,−y) − F(x,y)| over samples, normalized.
pub fn absolute_homogeneity_residual(f: &ScalarField, samples: &[PhasePoint]) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for p in samples {
        let v = f.eval(p)?;
        let r = f.f.eval(&p.reflect())?;
        worst = worst.max((r - v).abs() / (1.0 + v.abs()));
    }
    Ok(worst)
}

/// Fundamental tensors from exact jets; the Euler-implied invariants
/// h·y = 0 and g(y,y) = F² are asserted.
pub fn tensors(f: &ScalarField, p: &PhasePoint) -> Result<FinslerTensors> {
    let n = f.dim();
    let j = f.f.jet(p, 2)?;
    let value = j.value();
    let radial: f64 = (0..n).map(|k| p.fibre()[k] * j.d1(n + k)).sum();
    if (radial - value).abs() > RAPCSAK_TOL * (1.0 + value.abs()) {
        return Err(Error::Precondition(format!(
            "field is not degree-1 homogeneous at the probe (Euler residual {:e})",
            (radial - value).abs()
        )));
    }
    let theta = DVector::from_fn(n, |i, _| j.d1(n + i));
    let hessian = DMatrix::from_fn(n, n, |i, k| j.d2(n + i, n + k));
    let fundamental = DMatrix::from_fn(n, n, |i, k| value * hessian[(i, k)] + theta[i] * theta[k]);

    let scale = 1.0 + hessian.amax();
    for i in 0..n {
        let hy: f64 = (0..n).map(|k| hessian[(i, k)] * p.fibre()[k]).sum();
        if hy.abs() > POSITIVITY_TOL * scale * 10.0 {
            return Err(Error::Precondition(format!("h·y = {hy:e} despite Euler identity")));
        }
    }
    let gyy: f64 = (0..n)
        .flat_map(|i| (0..n).map(move |k| (i, k)))
        .map(|(i, k)| fundamental[(i, k)] * p.fibre()[i] * p.fibre()[k])
        .sum();
    if (gyy - value * value).abs() > 1e-9 * (1.0 + value * value) {
        return Err(Error::Precondition(format!(
            "g(y,y) = {gyy} does not match F² = {}",
            value * value
        )));
    }
    Ok(FinslerTensors { value, theta, hessian, fundamental })
}

/// Minimal eigenvalue of h restricted to the Euclidean complement of y.
/// Positive quasi-definite iff the result exceeds [`POSITIVITY_TOL`].
pub fn quasi_definiteness(h: &DMatrix<f64>, y: &[f64]) -> Result<f64> {
    let scale = 1.0 + h.amax();
    let n = y.len();
    let ynorm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    for i in 0..n {
        let hy: f64 = (0..n).map(|k| h[(i, k)] * y[k] / ynorm).sum();
        if hy.abs() > 1e-7 * scale {
            return Err(Error::KernelPremise { residual: hy.abs() });
        }
    }
    let restricted = multiplier::restrict_to_complement(h, y)?;
    let eigen = restricted.symmetric_eigen();
    Ok(eigen.eigenvalues.iter().fold(f64::INFINITY, |m, &v| m.min(v)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Finsler,
    PseudoFinsler,
    Degenerate,
}

#[derive(Debug, Clone)]
pub struct Classification {
    pub verdict: Verdict,
    /// Minimum of F over the unit fibre sphere, polished by local descent.
    pub min_value: f64,
    pub argmin: Vec<f64>,
    /// Minimum restricted Hessian eigenvalue over the sphere sample.
    pub min_restricted_eigenvalue: f64,
    /// Pointwise agreement of "g positive definite" with
    /// "F > 0 and h positive quasi-definite".
    pub decomposition_agrees: bool,
    pub sample_count: usize,
}

/// Projected-gradient descent on the unit sphere with adaptive step; the
/// closure returns (value, gradient). `hemisphere` restricts to ŷ·ẑ ≤ 0.
fn refine_sphere_min<E>(
    eval: &E,
    start: &[f64],
    start_value: f64,
    hemisphere: Option<&[f64]>,
    max_iters: usize,
) -> Result<(Vec<f64>, f64)>
where
    E: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let clamp = |y: &mut Vec<f64>| {
        if let Some(zhat) = hemisphere {
            let dot: f64 = y.iter().zip(zhat).map(|(a, b)| a * b).sum();
            if dot > 0.0 {
                for (v, z) in y.iter_mut().zip(zhat) {
                    *v -= dot * z;
                }
            }
        }
        let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in y.iter_mut() {
                *v /= norm;
            }
        }
    };

    let mut best = start.to_vec();
    let mut best_value = start_value;
    let mut step = 0.1;
    for _ in 0..max_iters {
        if step < 1e-12 {
            break;
        }
        let (_, grad) = eval(&best)?;
        let dot: f64 = grad.iter().zip(&best).map(|(g, y)| g * y).sum();
        let tangent: Vec<f64> = grad.iter().zip(&best).map(|(g, y)| g - dot * y).collect();
        let gnorm = tangent.iter().map(|v| v * v).sum::<f64>().sqrt();
        if gnorm < 1e-13 {
            break;
        }
        let mut candidate: Vec<f64> =
            best.iter().zip(&tangent).map(|(y, t)| y - step * t / gnorm).collect();
        clamp(&mut candidate);
        match eval(&candidate) {
            Ok((value, _)) if value < best_value => {
                best = candidate;
                best_value = value;
                step *= 1.5;
            }
            _ => step *= 0.5,
        }
    }
    Ok((best, best_value))
}

/// Classifies F at a base point by scanning the unit fibre sphere.
pub fn classify(f: &ScalarField, base: &[f64], sphere_count: usize) -> Result<Classification> {
    let n = f.dim();
    if base.len() != n {
        return Err(Error::Dimension { expected: n, got: base.len() });
    }
    let count = sphere_count.max(1000);
    let sphere = sampling::unit_sphere(n, count);

    // positive homogeneity is a precondition
    let probe: Vec<PhasePoint> = sphere
        .iter()
        .take(8)
        .map(|y| PhasePoint::new(base.to_vec(), y.clone()))
        .collect::<Result<_>>()?;
    let homog = homogeneity_report(f, &probe)?;
    if !homog.all_pass() {
        return Err(Error::Precondition(
            "classification requires a positively homogeneous field".into(),
        ));
    }

    let mut min_value = f64::INFINITY;
    let mut argmin = sphere[0].clone();
    let mut min_eig = f64::INFINITY;
    let mut agrees = true;
    for y in &sphere {
        let p = PhasePoint::new(base.to_vec(), y.clone())?;
        let t = tensors(f, &p)?;
        if t.value < min_value {
            min_value = t.value;
            argmin = y.clone();
        }
        let eig = quasi_definiteness(&t.hessian, y)?;
        min_eig = min_eig.min(eig);

        // §-decomposition cross-check away from the boundary cases
        let g_min = t.fundamental.clone().symmetric_eigen().eigenvalues.min();
        let band = 1e-7 * (1.0 + t.hessian.amax());
        if t.value.abs() > band && eig.abs() > band && g_min.abs() > band {
            let lhs = g_min > 0.0;
            let rhs = t.value > 0.0 && eig > 0.0;
            if lhs != rhs {
                agrees = false;
            }
        }
    }

    // polish the sphere minimum of F by projected descent
    let eval = |y: &[f64]| -> Result<(f64, Vec<f64>)> {
        let p = PhasePoint::new(base.to_vec(), y.to_vec())?;
        let j = f.f.jet(&p, 1)?;
        Ok((j.value(), (0..n).map(|i| j.d1(n + i)).collect()))
    };
    let (argmin, min_value) = refine_sphere_min(&eval, &argmin, min_value, None, 300)?;

    let verdict = if min_value > POSITIVITY_TOL && min_eig > POSITIVITY_TOL {
        Verdict::Finsler
    } else if min_eig > POSITIVITY_TOL {
        Verdict::PseudoFinsler
    } else {
        Verdict::Degenerate
    };
    Ok(Classification {
        verdict,
        min_value,
        argmin,
        min_restricted_eigenvalue: min_eig,
        decomposition_agrees: agrees,
        sample_count: sphere.len(),
    })
}

#[derive(Debug, Clone)]
pub struct InequalityReport {
    pub triangle_slack: f64,
    pub fundamental_slack: f64,
    pub fundamental_equality: bool,
    /// When equality holds, whether z is a positive multiple of y
    /// (the only permitted equality case under strictness).
    pub equality_is_positive_multiple: bool,
}

/// Triangle inequality for (y1, y2) and the fundamental inequality
/// F(z) ≥ z·θ(y) with y = y1, z = y2.
pub fn inequality_check(
    f: &ScalarField,
    base: &[f64],
    y1: &[f64],
    y2: &[f64],
) -> Result<InequalityReport> {
    let n = f.dim();
    let p1 = PhasePoint::new(base.to_vec(), y1.to_vec())
        .map_err(|_| Error::Precondition("fundamental inequality requires y ≠ 0".into()))?;
    let f1 = f.eval(&p1)?;
    let f2 = f.eval_or_zero(base, y2)?;
    let y_sum: Vec<f64> = y1.iter().zip(y2).map(|(a, b)| a + b).collect();
    let f_sum = f.eval_or_zero(base, &y_sum)?;
    let triangle_slack = f1 + f2 - f_sum;

    let j1 = f.f.jet(&p1, 1)?;
    let z_dot_theta: f64 = (0..n).map(|i| y2[i] * j1.d1(n + i)).sum();
    let fundamental_slack = f2 - z_dot_theta;
    let fundamental_equality = fundamental_slack.abs() < EQUALITY_TOL * (1.0 + f2.abs());

    let norm1 = y1.iter().map(|v| v * v).sum::<f64>().sqrt();
    let norm2 = y2.iter().map(|v| v * v).sum::<f64>().sqrt();
    let cosine = if norm2 <= SLIT_EPSILON {
        0.0
    } else {
        y1.iter().zip(y2).map(|(a, b)| a * b).sum::<f64>() / (norm1 * norm2)
    };
    Ok(InequalityReport {
        triangle_slack,
        fundamental_slack,
        fundamental_equality,
        equality_is_positive_multiple: cosine > 1.0 - 1e-9,
    })
}

/// Outcome of the constructive positivization.
#[derive(Debug, Clone)]
pub struct PositivizationResult {
    /// Constant covector with F + α·y positive near the base point.
    pub alpha: DVector<f64>,
    /// Minimum of F̄(y) = F(y) − y·θ(z) over the closed hemisphere opposite ẑ.
    pub k: f64,
    pub z_hat: DVector<f64>,
    /// Largest tested base-grid radius where positivity persists.
    pub validity_radius: f64,
    /// Sampled sphere minimum of F + α·y (must be positive).
    pub shifted_min: f64,
    /// Sampled sphere minimum of the unmodified F, for the
    /// absolutely-homogeneous shortcut where α = 0 already works.
    pub plain_min: f64,
}

/// Builds α with F + α·y > 0 near `base`, following the hemisphere
/// construction: k is the minimum of F̄ over the closed hemisphere opposite
/// ẑ and α_i = ½k ẑ_i − θ_i(z).
pub fn positivize(
    f: &ScalarField,
    base: &[f64],
    z: &[f64],
    sphere_count: usize,
) -> Result<PositivizationResult> {
    let n = f.dim();
    let pz = PhasePoint::new(base.to_vec(), z.to_vec())?;
    let tz = tensors(f, &pz)?;
    let qd = quasi_definiteness(&tz.hessian, z)?;
    if qd <= POSITIVITY_TOL {
        return Err(Error::Precondition(format!(
            "positivization requires a positive quasi-definite Hessian (min eig {qd:e})"
        )));
    }

    let znorm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
    let z_hat = DVector::from_fn(n, |i, _| z[i] / znorm);
    let theta_z = tz.theta.clone();

    let fbar = |y: &[f64]| -> Result<(f64, Vec<f64>)> {
        let p = PhasePoint::new(base.to_vec(), y.to_vec())?;
        let j = f.f.jet(&p, 1)?;
        let value = j.value() - (0..n).map(|i| y[i] * theta_z[i]).sum::<f64>();
        let grad = (0..n).map(|i| j.d1(n + i) - theta_z[i]).collect();
        Ok((value, grad))
    };

    let sphere = sampling::unit_sphere(n, sphere_count.max(1000));
    let mut k = f64::INFINITY;
    let mut k_arg = sphere[0].clone();
    let mut plain_min = f64::INFINITY;
    for y in &sphere {
        let p = PhasePoint::new(base.to_vec(), y.clone())?;
        plain_min = plain_min.min(f.eval(&p)?);
        let dot: f64 = y.iter().zip(z_hat.iter()).map(|(a, b)| a * b).sum();
        if dot <= 1e-12 {
            let (v, _) = fbar(y)?;
            if v < k {
                k = v;
                k_arg = y.clone();
            }
        }
    }

    // lattice minimum refined by 20 projected-gradient steps, step 0.1/(1+i),
    // then polished to convergence
    let zslice: Vec<f64> = z_hat.iter().copied().collect();
    let mut y = k_arg;
    for iter in 0..20 {
        let (_, grad) = fbar(&y)?;
        let dot: f64 = grad.iter().zip(&y).map(|(g, v)| g * v).sum();
        let tangent: Vec<f64> = grad.iter().zip(&y).map(|(g, v)| g - dot * v).collect();
        let gnorm = tangent.iter().map(|v| v * v).sum::<f64>().sqrt();
        if gnorm < 1e-13 {
            break;
        }
        let step = 0.1 / (1.0 + iter as f64);
        for (v, t) in y.iter_mut().zip(&tangent) {
            *v -= step * t / gnorm;
        }
        let zdot: f64 = y.iter().zip(&zslice).map(|(a, b)| a * b).sum();
        if zdot > 0.0 {
            for (v, zc) in y.iter_mut().zip(&zslice) {
                *v -= zdot * zc;
            }
        }
        let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in y.iter_mut() {
            *v /= norm;
        }
        let (value, _) = fbar(&y)?;
        k = k.min(value);
    }
    let (_, k) = refine_sphere_min(&fbar, &y, k, Some(&zslice), 200)?;

    if k <= 0.0 {
        return Err(Error::Precondition(format!(
            "hemisphere minimum k = {k:e} is not positive; numerical trouble"
        )));
    }

    let alpha = DVector::from_fn(n, |i, _| 0.5 * k * z_hat[i] - theta_z[i]);

    let shifted_at = |b: &[f64]| -> Result<f64> {
        let mut min = f64::INFINITY;
        for y in &sphere {
            let p = PhasePoint::new(b.to_vec(), y.clone())?;
            let v = f.eval(&p)? + (0..n).map(|i| alpha[i] * y[i]).sum::<f64>();
            min = min.min(v);
        }
        Ok(min)
    };
    let shifted_min = shifted_at(base)?;
    if shifted_min <= 0.0 {
        return Err(Error::Precondition(format!(
            "positivized field still attains {shifted_min:e} on the sampled sphere"
        )));
    }

    // empirical neighbourhood estimate on an axis grid
    let mut validity_radius = 0.0;
    'radii: for r in [0.4, 0.2, 0.1, 0.05, 0.025] {
        for i in 0..n {
            for sign in [1.0, -1.0] {
                let mut b = base.to_vec();
                b[i] += sign * r;
                if shifted_at(&b)? <= 0.0 {
                    continue 'radii;
                }
            }
        }
        validity_radius = r;
        break;
    }

    Ok(PositivizationResult { alpha, k, z_hat, validity_radius, shifted_min, plain_min })
}

/// First Rapcsák (Euler-Lagrange) residual Γ(∂F/∂y^i) − ∂F/∂x^i.
pub fn el_residual(f: &ScalarField, spray: &SprayField, p: &PhasePoint) -> Result<DVector<f64>> {
    let n = f.dim();
    if spray.dim() != n {
        return Err(Error::Dimension { expected: n, got: spray.dim() });
    }
    let j = f.f.jet(p, 2)?;
    let gamma_values = spray.coefficient_values(p)?;
    let y = p.fibre();
    let mut out = DVector::zeros(n);
    for i in 0..n {
        let mut v = -j.d1(i);
        for k in 0..n {
            v += y[k] * j.d2(k, n + i);
            v -= 2.0 * gamma_values[k] * j.d2(n + k, n + i);
        }
        out[i] = v;
    }
    Ok(out)
}

/// Second Rapcsák residual A_ij = H_i(θ_j) − H_j(θ_i) (antisymmetric).
pub fn rapcsak2_residual(f: &ScalarField, spray: &SprayField, p: &PhasePoint) -> Result<DMatrix<f64>> {
    let n = f.dim();
    let j = f.f.jet(p, 2)?;
    let conn = geometry::connection(spray, p)?;
    let mut h_theta = DMatrix::zeros(n, n);
    for i in 0..n {
        for l in 0..n {
            let mut v = j.d2(i, n + l);
            for k in 0..n {
                v -= conn.gamma[(k, i)] * j.d2(n + k, n + l);
            }
            h_theta[(i, l)] = v;
        }
    }
    Ok(&h_theta - h_theta.transpose())
}

/// F + ρ*F: absolutely homogeneous, same Euler-Lagrange solutions for a
/// strictly reversible spray.
pub fn absolutize(f: &ScalarField) -> ScalarField {
    ScalarField::new(
        f.n,
        field::add(Arc::clone(&f.f), field::fibre_reflect(Arc::clone(&f.f))),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog;

    fn euclid() -> ScalarField {
        catalog::euclid_norm(3).unwrap()
    }

    fn spiral_f() -> ScalarField {
        catalog::get("spiral_F").unwrap().finsler.unwrap()
    }

    fn origin_sphere(y: &[f64]) -> PhasePoint {
        PhasePoint::new(vec![0.0; 3], y.to_vec()).unwrap()
    }

    #[test]
    fn euclid_norm_is_absolutely_homogeneous() {
        let samples = sampling::seeded_phase_points_scaled(3, 10, 31, 1.0);
        let report = homogeneity_report(&euclid(), &samples).unwrap();
        assert!(report.all_pass());
        assert!(report.notes[0].starts_with("absolutely homogeneous"));
    }

    #[test]
    fn spiral_function_is_only_positively_homogeneous() {
        let samples = sampling::seeded_phase_points_scaled(3, 10, 32, 1.0);
        let report = homogeneity_report(&spiral_f(), &samples).unwrap();
        assert!(report.all_pass());
        assert!(report.notes[0].starts_with("not absolutely"));
    }

    #[test]
    fn energy_fails_degree_one() {
        let energy = ScalarField::from_text("y1^2+y2^2+y3^2", 3).unwrap();
        let samples = sampling::seeded_phase_points_scaled(3, 10, 33, 1.0);
        let report = homogeneity_report(&energy, &samples).unwrap();
        assert!(!report.all_pass());
    }

    #[test]
    fn euclid_tensors_at_axis_point() {
        let t = tensors(&euclid(), &origin_sphere(&[1.0, 0.0, 0.0])).unwrap();
        assert!((t.value - 1.0).abs() < 1e-14);
        for (i, want) in [1.0, 0.0, 0.0].iter().enumerate() {
            assert!((t.theta[i] - want).abs() < 1e-14);
        }
        let h_expect = DMatrix::from_row_slice(3, 3, &[0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        assert!((&t.hessian - &h_expect).amax() < 1e-13);
        assert!((&t.fundamental - DMatrix::<f64>::identity(3, 3)).amax() < 1e-13);
    }

    #[test]
    fn spiral_tensors_match_euclid_at_origin() {
        let t = tensors(&spiral_f(), &origin_sphere(&[1.0, 0.0, 0.0])).unwrap();
        assert!((&t.fundamental - DMatrix::<f64>::identity(3, 3)).amax() < 1e-13);
    }

    #[test]
    fn hessian_kernel_is_certified() {
        for p in sampling::seeded_phase_points_scaled(3, 20, 34, 1.0) {
            let t = tensors(&spiral_f(), &p).unwrap();
            let hy = &t.hessian * DVector::from_column_slice(p.fibre());
            assert!(hy.amax() < 1e-9);
        }
    }

    #[test]
    fn quasi_definiteness_closed_forms() {
        let h = DMatrix::from_row_slice(3, 3, &[0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        assert!((quasi_definiteness(&h, &[1.0, 0.0, 0.0]).unwrap() - 1.0).abs() < 1e-12);

        let indef = DMatrix::from_row_slice(3, 3, &[0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0]);
        assert!((quasi_definiteness(&indef, &[1.0, 0.0, 0.0]).unwrap() + 1.0).abs() < 1e-12);

        // Euclidean Hessian at scaled fibre: restricted spectrum = 1/|y|
        let y = [0.6, -1.2, 0.8];
        let t = tensors(&euclid(), &PhasePoint::new(vec![0.0; 3], y.to_vec()).unwrap()).unwrap();
        let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((quasi_definiteness(&t.hessian, &y).unwrap() - 1.0 / norm).abs() < 1e-10);
    }

    #[test]
    fn quasi_definiteness_rejects_bad_kernel() {
        let h = DMatrix::identity(3, 3);
        assert!(matches!(
            quasi_definiteness(&h, &[1.0, 0.0, 0.0]),
            Err(Error::KernelPremise { .. })
        ));
    }

    #[test]
    fn classify_spiral_inside_and_outside() {
        let inside = classify(&spiral_f(), &[0.0, 0.0, 0.0], 1024).unwrap();
        assert_eq!(inside.verdict, Verdict::Finsler);
        assert!((inside.min_value - 1.0).abs() < 1e-9);
        assert!(inside.decomposition_agrees);

        let outside = classify(&spiral_f(), &[3.0, 0.0, 0.0], 1024).unwrap();
        assert_eq!(outside.verdict, Verdict::PseudoFinsler);
        assert!((outside.min_value + 0.5).abs() < 1e-7, "{}", outside.min_value);
    }

    #[test]
    fn classify_euclid_everywhere_finsler() {
        for base in [[0.0, 0.0, 0.0], [5.0, -3.0, 2.0]] {
            let c = classify(&euclid(), &base, 1024).unwrap();
            assert_eq!(c.verdict, Verdict::Finsler);
            assert!((c.min_value - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn triangle_and_fundamental_inequalities() {
        let r = inequality_check(&euclid(), &[0.0; 3], &[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]).unwrap();
        assert!((r.triangle_slack - (2.0 - 2f64.sqrt())).abs() < 1e-12);
        assert!(r.fundamental_slack > 0.9);

        // z = 2y forces equality in the fundamental inequality
        let r = inequality_check(&euclid(), &[0.0; 3], &[1.0, 0.0, 0.0], &[2.0, 0.0, 0.0]).unwrap();
        assert!(r.fundamental_equality);
        assert!(r.equality_is_positive_multiple);

        // spiral F at the origin, opposite directions: strict
        let r =
            inequality_check(&spiral_f(), &[0.0; 3], &[1.0, 0.0, 0.0], &[-1.0, 0.0, 0.0]).unwrap();
        assert!((r.fundamental_slack - 2.0).abs() < 1e-12);
        assert!(!r.fundamental_equality);
    }

    #[test]
    fn positivize_hand_computed_case() {
        // F = |y| − 2y¹ with z = (−1,0,0): k = 1, α = (5/2, 0, 0).
        let f = ScalarField::from_text("sqrt(y1^2+y2^2+y3^2)-2*y1", 3).unwrap();
        let r = positivize(&f, &[0.0; 3], &[-1.0, 0.0, 0.0], 2000).unwrap();
        assert!((r.k - 1.0).abs() < 1e-3, "k = {}", r.k);
        assert!((r.alpha[0] - 2.5).abs() < 1e-3);
        assert!(r.alpha[1].abs() < 1e-9 && r.alpha[2].abs() < 1e-9);
        assert!(r.shifted_min >= 0.5 - 1e-3);
        assert!(r.validity_radius > 0.0);
    }

    #[test]
    fn positivize_absolutely_homogeneous_needs_no_shift() {
        let r = positivize(&euclid(), &[0.0; 3], &[0.0, 0.0, 1.0], 1500).unwrap();
        assert!(r.plain_min > 0.9);
        assert!(r.shifted_min > 0.0);
    }

    #[test]
    fn positivize_requires_quasi_definite_hessian() {
        let linear = ScalarField::from_text("y1", 3).unwrap();
        assert!(positivize(&linear, &[0.0; 3], &[1.0, 0.0, 0.0], 1000).is_err());
    }

    #[test]
    fn el_residual_flat_euclid_vanishes() {
        let flat = SprayField::flat(3);
        for p in sampling::seeded_phase_points_scaled(3, 10, 35, 1.0) {
            let r = el_residual(&euclid(), &flat, &p).unwrap();
            assert!(r.amax() < 1e-13);
        }
    }

    #[test]
    fn el_residual_spiral_pair_vanishes() {
        let spray = catalog::get("spiral").unwrap().spray;
        for p in sampling::seeded_phase_points_scaled(3, 20, 36, 1.0) {
            let r = el_residual(&spiral_f(), &spray, &p).unwrap();
            assert!(r.amax() < 1e-10, "{}", r.amax());
        }
    }

    #[test]
    fn el_residual_detects_missing_linear_term() {
        let spray = catalog::get("spiral").unwrap().spray;
        let p = origin_sphere(&[1.0, 0.0, 0.0]);
        let r = el_residual(&euclid(), &spray, &p).unwrap();
        assert!(r.amax() >= 0.1, "{}", r.amax());
    }

    #[test]
    fn el_residual_projective_invariance() {
        let spray = catalog::get("spiral").unwrap().spray;
        let factor = geometry::ProjectiveFactor::new(
            field::from_text("0.2*sqrt(y1^2+y2^2+y3^2)", 3).unwrap(),
        )
        .unwrap();
        let changed = geometry::projective_change(&spray, &factor).unwrap();
        for p in sampling::seeded_phase_points_scaled(3, 10, 37, 1.0) {
            let a = el_residual(&spiral_f(), &spray, &p).unwrap();
            let b = el_residual(&spiral_f(), &changed, &p).unwrap();
            assert!((&a - &b).amax() < 1e-8);
        }
    }

    #[test]
    fn rapcsak2_residuals() {
        let spray = catalog::get("spiral").unwrap().spray;
        let flat = SprayField::flat(3);
        for p in sampling::seeded_phase_points_scaled(3, 10, 38, 1.0) {
            assert!(rapcsak2_residual(&spiral_f(), &spray, &p).unwrap().amax() < 1e-10);
            assert!(rapcsak2_residual(&euclid(), &flat, &p).unwrap().amax() < 1e-13);
        }
        let p = origin_sphere(&[1.0, 0.0, 0.0]);
        assert!(rapcsak2_residual(&euclid(), &spray, &p).unwrap().amax() > 1e-2);
    }

    #[test]
    fn absolutize_doubles_even_part() {
        let abs_spiral = absolutize(&spiral_f());
        let doubled_norm = ScalarField::from_text("2*sqrt(y1^2+y2^2+y3^2)", 3).unwrap();
        for p in sampling::seeded_phase_points_scaled(3, 10, 39, 1.0) {
            let a = abs_spiral.eval(&p).unwrap();
            let b = doubled_norm.eval(&p).unwrap();
            assert!((a - b).abs() < 1e-12);
            // evenness is exact
            let r = abs_spiral.eval(&p.reflect()).unwrap();
            assert_eq!(a, r);
        }
    }
}
