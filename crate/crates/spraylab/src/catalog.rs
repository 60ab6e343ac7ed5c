//! Built-in sprays and fields, all constructed from expression text so the
//! command line and the tests exercise the same parse path.
//!
//! Names accepted by [`get`]:
//!
//! - `flat3` / `flat:n` — the flat spray (all coefficients zero)
//! - `spiral` — Γ¹ = λv/2, Γ² = −λu/2, Γ³ = 0 with λ = |y| on R³; its
//!   geodesics are spirals with axis parallel to the z-axis
//! - `shen_circle` — the z = 0, w = 0 restriction of the spiral spray on R²;
//!   geodesics are unit circles traversed counter-clockwise
//! - `spiral_F` — the function |y| + ½(x²y¹ − x¹y²) whose geodesic class the
//!   spiral spray belongs to (a Finsler function only where x²+y²< 4)
//! - `euclid_norm3` / `euclid_norm:n` — the Euclidean norm with the flat spray
//! - `randers_flat:b1,..,bn` — the constant-Riemannian-speed spray of
//!   |y| + b_i y^i for covector expressions b_i(x)
//! - `magnetic_flat:b1,..,bn` — the Euler-Lagrange field of ½|y|² + b_i y^i;
//!   degree 1 in y, so *not* a spray (flagged accordingly)

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::field::{self, FieldRef};
use crate::finsler::ScalarField;
use crate::geodesics;
use crate::geometry::SprayField;
use crate::multiplier::{self, MultiplierField};
use crate::phase::PhasePoint;
use crate::report::DiagnosticReport;

#[derive(Clone)]
pub struct CatalogEntry {
    pub name: String,
    pub dimension: usize,
    pub spray: SprayField,
    pub finsler: Option<ScalarField>,
    pub multiplier: Option<MultiplierField>,
    pub provenance: String,
    /// False for second-order fields that are not degree-2 homogeneous
    /// (the magnetic Lagrangian flow); such entries skip spray validation.
    pub homogeneous_spray: bool,
}

fn norm_text(n: usize) -> String {
    let terms: Vec<String> = (1..=n).map(|i| format!("y{i}^2")).collect();
    format!("sqrt({})", terms.join("+"))
}

pub fn euclid_norm(n: usize) -> Result<ScalarField> {
    ScalarField::from_text(&norm_text(n), n)
}

fn spiral_spray() -> Result<SprayField> {
    SprayField::new(3, vec![
        field::from_text("0.5*sqrt(y1^2+y2^2+y3^2)*y2", 3)?,
        field::from_text("-0.5*sqrt(y1^2+y2^2+y3^2)*y1", 3)?,
        field::from_text("0", 3)?,
    ])
}

fn spiral_function() -> Result<ScalarField> {
    ScalarField::from_text("sqrt(y1^2+y2^2+y3^2)+0.5*x2*y1-0.5*x1*y2", 3)
}

fn shen_circle_spray() -> Result<SprayField> {
    SprayField::new(2, vec![
        field::from_text("0.5*sqrt(y1^2+y2^2)*y2", 2)?,
        field::from_text("-0.5*sqrt(y1^2+y2^2)*y1", 2)?,
    ])
}

fn shen_circle_function() -> Result<ScalarField> {
    ScalarField::from_text("sqrt(y1^2+y2^2)+0.5*x2*y1-0.5*x1*y2", 2)
}

/// β_i expression fields must not depend on the fibre.
fn parse_beta(exprs: &[String], n: usize) -> Result<Vec<FieldRef>> {
    if exprs.len() != n {
        return Err(Error::Dimension { expected: n, got: exprs.len() });
    }
    let beta: Vec<FieldRef> =
        exprs.iter().map(|e| field::from_text(e, n)).collect::<Result<_>>()?;
    for (i, b) in beta.iter().enumerate() {
        for p in crate::sampling::seeded_phase_points(n, 6, 0xBE7A, 1.0) {
            let j = b.jet(&p, 1)?;
            for k in 0..n {
                if j.d1(n + k).abs() > 1e-12 {
                    return Err(Error::Precondition(format!(
                        "covector component {} depends on the fibre",
                        i + 1
                    )));
                }
            }
        }
    }
    Ok(beta)
}

/// ½ y^j (∂β_i/∂x^j − ∂β_j/∂x^i) for each i — the magnetic (Lorentz) field.
fn lorentz_coefficients(beta: &[FieldRef], n: usize) -> Vec<FieldRef> {
    (0..n)
        .map(|i| {
            let mut acc = field::constant(n, 0.0);
            for j in 0..n {
                let mut beta_i_j = vec![0u8; 2 * n];
                beta_i_j[j] = 1;
                let d_ij = field::derivative(Arc::clone(&beta[i]), beta_i_j);
                let mut beta_j_i = vec![0u8; 2 * n];
                beta_j_i[i] = 1;
                let d_ji = field::derivative(Arc::clone(&beta[j]), beta_j_i);
                let antisym = field::add(d_ij, field::scale(d_ji, -1.0));
                acc = field::add(acc, field::product(field::fibre_coord(n, j), antisym));
            }
            field::scale(acc, 0.5)
        })
        .collect()
}

/// Euler-Lagrange field of L = ½|y|² + β·y over flat space. Degree 1 in the
/// fibre, so not a spray.
pub fn magnetic_flat(beta_exprs: &[String], n: usize) -> Result<SprayField> {
    let beta = parse_beta(beta_exprs, n)?;
    SprayField::new(n, lorentz_coefficients(&beta, n))
}

/// The spray of the Randers-type function |y| + β·y over flat space, fixed
/// within its projective class by constant Riemannian speed:
/// Γ^i = (|y|/2) y^j (∂β_i/∂x^j − ∂β_j/∂x^i).
pub fn randers_flat(beta_exprs: &[String], n: usize) -> Result<SprayField> {
    let beta = parse_beta(beta_exprs, n)?;
    let norm = field::from_text(&norm_text(n), n)?;
    let coeffs = lorentz_coefficients(&beta, n)
        .into_iter()
        .map(|c| field::product(Arc::clone(&norm), c))
        .collect();
    SprayField::new(n, coeffs)
}

fn randers_function(beta_exprs: &[String], n: usize) -> Result<ScalarField> {
    let beta = parse_beta(beta_exprs, n)?;
    let mut f = field::from_text(&norm_text(n), n)?;
    for (i, b) in beta.iter().enumerate() {
        f = field::add(f, field::product(Arc::clone(b), field::fibre_coord(n, i)));
    }
    Ok(ScalarField::new(n, f))
}

fn parse_dim(args: &str, what: &str) -> Result<usize> {
    let n: usize = args
        .parse()
        .map_err(|_| Error::UnknownCatalogEntry(format!("{what}:{args}")))?;
    if !(2..=6).contains(&n) {
        return Err(Error::Precondition(format!("{what} dimension {n} outside 2..=6")));
    }
    Ok(n)
}

pub fn get(name: &str) -> Result<CatalogEntry> {
    let (head, args) = match name.split_once(':') {
        Some((h, a)) => (h, Some(a)),
        None => (name, None),
    };
    match (head, args) {
        ("spiral", None) => Ok(CatalogEntry {
            name: name.into(),
            dimension: 3,
            spray: spiral_spray()?,
            finsler: Some(spiral_function()?),
            multiplier: Some(multiplier::hessian_of(&spiral_function()?)),
            provenance: "spiral-geodesic spray on R³; pseudo-Finsler class member attached".into(),
            homogeneous_spray: true,
        }),
        ("spiral_F", None) => Ok(CatalogEntry {
            name: name.into(),
            dimension: 3,
            spray: spiral_spray()?,
            finsler: Some(spiral_function()?),
            multiplier: Some(multiplier::hessian_of(&spiral_function()?)),
            provenance: "|y| + (x2 y1 - x1 y2)/2, positive only for x1²+x2² < 4".into(),
            homogeneous_spray: true,
        }),
        ("shen_circle", None) => Ok(CatalogEntry {
            name: name.into(),
            dimension: 2,
            spray: shen_circle_spray()?,
            finsler: Some(shen_circle_function()?),
            multiplier: Some(multiplier::hessian_of(&shen_circle_function()?)),
            provenance: "unit circles traversed counter-clockwise on R²".into(),
            homogeneous_spray: true,
        }),
        ("flat", Some(a)) => flat_entry(name, parse_dim(a, "flat")?),
        ("flat2", None) => flat_entry(name, 2),
        ("flat3", None) => flat_entry(name, 3),
        ("flat4", None) => flat_entry(name, 4),
        ("euclid_norm", Some(a)) => euclid_entry(name, parse_dim(a, "euclid_norm")?),
        ("euclid_norm2", None) => euclid_entry(name, 2),
        ("euclid_norm3", None) => euclid_entry(name, 3),
        ("randers_flat", Some(a)) => {
            let exprs: Vec<String> = a.split(',').map(str::to_string).collect();
            let n = exprs.len();
            Ok(CatalogEntry {
                name: name.into(),
                dimension: n,
                spray: randers_flat(&exprs, n)?,
                finsler: Some(randers_function(&exprs, n)?),
                multiplier: None,
                provenance: "constant-speed spray of a flat Randers function".into(),
                homogeneous_spray: true,
            })
        }
        ("magnetic_flat", Some(a)) => {
            let exprs: Vec<String> = a.split(',').map(str::to_string).collect();
            let n = exprs.len();
            Ok(CatalogEntry {
                name: name.into(),
                dimension: n,
                spray: magnetic_flat(&exprs, n)?,
                finsler: None,
                multiplier: None,
                provenance: "magnetic Lagrangian flow; degree-1 coefficients, not a spray".into(),
                homogeneous_spray: false,
            })
        }
        _ => Err(Error::UnknownCatalogEntry(name.into())),
    }
}

fn flat_entry(name: &str, n: usize) -> Result<CatalogEntry> {
    Ok(CatalogEntry {
        name: name.into(),
        dimension: n,
        spray: SprayField::flat(n),
        finsler: Some(euclid_norm(n)?),
        multiplier: Some(multiplier::hessian_of(&euclid_norm(n)?)),
        provenance: "flat spray; straight-line geodesics".into(),
        homogeneous_spray: true,
    })
}

fn euclid_entry(name: &str, n: usize) -> Result<CatalogEntry> {
    let mut e = flat_entry(name, n)?;
    e.provenance = "Euclidean norm over the flat spray".into();
    Ok(e)
}

/// Closed-form spiral geodesic through (x0, y0) at parameter t:
/// x = ξ + r cos(λt+ϑ), y = η + r sin(λt+ϑ), z = wt + z0, with λ = |y0| and
/// r = μ/λ. Degenerates to straight vertical lines when μ = 0.
pub fn spiral_oracle(x0: &[f64], y0: &[f64], t: f64) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(x0.len(), 3);
    let (u, v, w) = (y0[0], y0[1], y0[2]);
    let lambda = (u * u + v * v + w * w).sqrt();
    let mu = (u * u + v * v).sqrt();
    if mu <= 1e-14 {
        let x = vec![x0[0], x0[1], x0[2] + w * t];
        return (x, y0.to_vec());
    }
    let xi = x0[0] - v / lambda;
    let eta = x0[1] + u / lambda;
    let r = mu / lambda;
    let theta0 = (x0[1] - eta).atan2(x0[0] - xi);
    let phase = lambda * t + theta0;
    let x = vec![xi + r * phase.cos(), eta + r * phase.sin(), x0[2] + w * t];
    let y = vec![-r * lambda * phase.sin(), r * lambda * phase.cos(), w];
    (x, y)
}

/// Integrates the magnetic flow and the matching Randers-class spray from the
/// same unit-speed start and reports the worst base-path distance and the
/// energy drift E_L = ½ g_ij y^i y^j along the magnetic motion.
pub fn magnetic_comparison(
    beta_exprs: &[String],
    x0: &[f64],
    y0: &[f64],
    t_final: f64,
) -> Result<DiagnosticReport> {
    let n = x0.len();
    let speed = y0.iter().map(|v| v * v).sum::<f64>().sqrt();
    if (speed - 1.0).abs() > 1e-9 {
        return Err(Error::Precondition(format!(
            "magnetic comparison requires unit Riemannian speed (|y0| = {speed}); \
             for another speed the covector must be rescaled"
        )));
    }
    let magnetic = magnetic_flat(beta_exprs, n)?;
    let randers = randers_flat(beta_exprs, n)?;
    let tol = 1e-11;
    let samples = 256;
    let a = geodesics::integrate_sampled(&magnetic, x0, y0, t_final, tol, samples)?;
    let b = geodesics::integrate_sampled(&randers, x0, y0, t_final, tol, samples)?;

    let mut distance: f64 = 0.0;
    for k in 0..a.times.len() {
        let d = a
            .base(k)
            .iter()
            .zip(b.base(k))
            .map(|(p, q)| (p - q) * (p - q))
            .sum::<f64>()
            .sqrt();
        distance = distance.max(d);
    }
    let e0 = 0.5 * a.fibre(0).iter().map(|v| v * v).sum::<f64>();
    let mut drift: f64 = 0.0;
    for k in 0..a.times.len() {
        let e = 0.5 * a.fibre(k).iter().map(|v| v * v).sum::<f64>();
        drift = drift.max((e - e0).abs());
    }

    let mut report = DiagnosticReport::new();
    report.record("magnetic/base-path-distance", distance, 1e-6);
    report.record("magnetic/energy-drift", drift, 1e-8);
    Ok(report)
}

/// PhasePoint helper for tests and the CLI.
pub fn phase(base: &[f64], fibre: &[f64]) -> Result<PhasePoint> {
    PhasePoint::new(base.to_vec(), fibre.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::finsler::{classify, Verdict};
    use crate::geometry;
    use crate::sampling;

    #[test]
    fn catalog_sprays_validate() {
        for name in ["spiral", "shen_circle", "flat3", "flat2", "randers_flat:0.5*x2,-0.5*x1,0"] {
            let entry = get(name).unwrap();
            assert!(entry.homogeneous_spray);
            let samples = sampling::seeded_phase_points_scaled(entry.dimension, 15, 41, 1.0);
            let report = geometry::validate_spray(&entry.spray, &samples).unwrap();
            assert!(report.all_pass(), "{name}: {report:?}");
        }
    }

    #[test]
    fn magnetic_entry_is_not_a_spray() {
        let entry = get("magnetic_flat:0.5*x2,-0.5*x1,0").unwrap();
        assert!(!entry.homogeneous_spray);
        let samples = sampling::seeded_phase_points_scaled(3, 10, 42, 1.0);
        let report = geometry::validate_spray(&entry.spray, &samples).unwrap();
        assert!(!report.all_pass());
    }

    #[test]
    fn associated_functions_satisfy_euler_lagrange() {
        for name in ["spiral", "shen_circle", "flat3", "randers_flat:0.5*x2,-0.5*x1,0"] {
            let entry = get(name).unwrap();
            let f = entry.finsler.as_ref().unwrap();
            for p in sampling::seeded_phase_points_scaled(entry.dimension, 15, 43, 0.8) {
                let r = crate::finsler::el_residual(f, &entry.spray, &p).unwrap();
                assert!(r.amax() < 1e-7, "{name}: {}", r.amax());
            }
        }
    }

    #[test]
    fn randers_with_spiral_covector_is_the_spiral_spray() {
        let r = get("randers_flat:0.5*x2,-0.5*x1,0").unwrap();
        let s = get("spiral").unwrap();
        for p in sampling::seeded_phase_points_scaled(3, 10, 44, 1.0) {
            let a = r.spray.coefficient_values(&p).unwrap();
            let b = s.spray.coefficient_values(&p).unwrap();
            for i in 0..3 {
                assert!((a[i] - b[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn spiral_f_is_finsler_at_origin() {
        let entry = get("spiral_F").unwrap();
        let c = classify(entry.finsler.as_ref().unwrap(), &[0.0, 0.0, 0.0], 1024).unwrap();
        assert_eq!(c.verdict, Verdict::Finsler);
        assert!((c.min_value - 1.0).abs() < 1e-9);
    }

    #[test]
    fn oracle_reference_values() {
        // x0 = 0, y0 = (1,0,0): circle of radius 1 centred at (0,1,0)
        let (x, y) = spiral_oracle(&[0.0; 3], &[1.0, 0.0, 0.0], std::f64::consts::PI);
        assert!((x[0]).abs() < 1e-12 && (x[1] - 2.0).abs() < 1e-12 && x[2].abs() < 1e-12);
        assert!((y[0] + 1.0).abs() < 1e-12 && y[1].abs() < 1e-12);
    }

    #[test]
    fn oracle_vertical_line_case() {
        let (x, y) = spiral_oracle(&[0.2, 0.3, 0.4], &[0.0, 0.0, 2.0], 1.5);
        assert_eq!(x, vec![0.2, 0.3, 0.4 + 3.0]);
        assert_eq!(y, vec![0.0, 0.0, 2.0]);
    }

    #[test]
    fn oracle_invariants_hold() {
        let (x0, y0) = ([0.1, -0.5, 0.2], [0.8_f64, 0.3, 0.6]);
        let mu0 = (y0[0] * y0[0] + y0[1] * y0[1]).sqrt();
        for k in 0..10 {
            let t = k as f64 * 0.37;
            let (_, y) = spiral_oracle(&x0, &y0, t);
            let mu = (y[0] * y[0] + y[1] * y[1]).sqrt();
            assert!((mu - mu0).abs() < 1e-12);
            assert!((y[2] - y0[2]).abs() < 1e-12);
            let _ = x0;
        }
    }

    #[test]
    fn oracle_matches_integration() {
        let spray = get("spiral").unwrap().spray;
        let (x0, y0) = ([0.0, 0.0, 0.0], [1.0, 0.0, 1.0]);
        let t = 3.0;
        let traj = geodesics::integrate(&spray, &x0, &y0, t, 1e-10).unwrap();
        let (x, y) = spiral_oracle(&x0, &y0, t);
        for i in 0..3 {
            assert!((traj.last_base()[i] - x[i]).abs() < 1e-7);
            assert!((traj.last_fibre()[i] - y[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn magnetic_comparison_spiral_case() {
        let beta: Vec<String> =
            ["0.5*x2", "-0.5*x1", "0"].iter().map(|s| s.to_string()).collect();
        let report = magnetic_comparison(
            &beta,
            &[0.0; 3],
            &[1.0, 0.0, 0.0],
            2.0 * std::f64::consts::PI,
        )
        .unwrap();
        assert!(report.all_pass(), "{report:?}");
    }

    #[test]
    fn magnetic_comparison_rejects_non_unit_speed() {
        let beta: Vec<String> = ["0", "0", "0"].iter().map(|s| s.to_string()).collect();
        assert!(magnetic_comparison(&beta, &[0.0; 3], &[2.0, 0.0, 0.0], 1.0).is_err());
    }

    #[test]
    fn magnetic_comparison_zero_field_is_straight() {
        let beta: Vec<String> = ["0", "0", "0"].iter().map(|s| s.to_string()).collect();
        let report = magnetic_comparison(&beta, &[0.0; 3], &[0.0, 1.0, 0.0], 2.0).unwrap();
        assert!(report.all_pass());
        assert_eq!(report.check("magnetic/base-path-distance").unwrap().max_residual, 0.0);
    }

    #[test]
    fn unknown_entry_is_an_error() {
        assert!(matches!(get("zoll"), Err(Error::UnknownCatalogEntry(_))));
    }
}
