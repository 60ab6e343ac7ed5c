//! Deterministic point sets: seeded phase points, low-discrepancy sphere and
//! ball samples.
//!
//! Sphere scans use Fibonacci lattices (exact in dimensions 2 and 3, Halton
//! points pushed through the inverse normal CDF above that) plus the 2n
//! coordinate-axis points, so minima are reproducible run to run.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::phase::PhasePoint;

/// Seeded phase points with base coordinates in [-b, b]^n and unit fibres.
pub fn seeded_phase_points(n: usize, count: usize, seed: u64, base_halfwidth: f64) -> Vec<PhasePoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let base: Vec<f64> = (0..n).map(|_| rng.gen_range(-base_halfwidth..=base_halfwidth)).collect();
        let fibre: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        let norm = fibre.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 0.1 {
            continue;
        }
        let unit: Vec<f64> = fibre.iter().map(|v| v / norm).collect();
        out.push(PhasePoint::new(base, unit).expect("unit fibre"));
    }
    out
}

/// Seeded phase points with fibre norms spread over [0.5, 2].
pub fn seeded_phase_points_scaled(n: usize, count: usize, seed: u64, base_halfwidth: f64) -> Vec<PhasePoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    seeded_phase_points(n, count, seed, base_halfwidth)
        .into_iter()
        .map(|p| {
            let k = rng.gen_range(0.5..=2.0);
            p.scale_fibre(k).expect("nonzero scale")
        })
        .collect()
}

/// Van der Corput radical inverse in the given base.
fn radical_inverse(mut index: u64, base: u64) -> f64 {
    let mut result = 0.0;
    let mut f = 1.0 / base as f64;
    while index > 0 {
        result += (index % base) as f64 * f;
        index /= base;
        f /= base as f64;
    }
    result
}

const PRIMES: [u64; 8] = [2, 3, 5, 7, 11, 13, 17, 19];

/// Halton point in [0,1)^d.
pub fn halton(index: u64, d: usize) -> Vec<f64> {
    (0..d).map(|k| radical_inverse(index + 1, PRIMES[k % PRIMES.len()])).collect()
}

/// Acklam's rational approximation to the inverse normal CDF (~1e-9 absolute).
fn inv_norm_cdf(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        -inv_norm_cdf(1.0 - p)
    }
}

/// Deterministic low-discrepancy sample of the unit sphere S^{n-1}, including
/// the 2n coordinate-axis points.
pub fn unit_sphere(n: usize, count: usize) -> Vec<Vec<f64>> {
    assert!(n >= 1, "sphere sampling needs n >= 1");
    let mut points = Vec::with_capacity(count + 2 * n);
    for i in 0..n {
        for sign in [1.0, -1.0] {
            let mut e = vec![0.0; n];
            e[i] = sign;
            points.push(e);
        }
    }
    match n {
        1 => {}
        2 => {
            for k in 0..count {
                let theta = 2.0 * std::f64::consts::PI * (k as f64 + 0.5) / count as f64;
                points.push(vec![theta.cos(), theta.sin()]);
            }
        }
        3 => {
            // Fibonacci sphere
            let golden = (1.0 + 5.0_f64.sqrt()) / 2.0;
            for k in 0..count {
                let z = 1.0 - 2.0 * (k as f64 + 0.5) / count as f64;
                let r = (1.0 - z * z).sqrt();
                let phi = 2.0 * std::f64::consts::PI * (k as f64 / golden).fract();
                points.push(vec![r * phi.cos(), r * phi.sin(), z]);
            }
        }
        _ => {
            let mut k = 0u64;
            while points.len() < count + 2 * n {
                let u = halton(k, n);
                k += 1;
                let g: Vec<f64> = u.iter().map(|&ui| inv_norm_cdf(ui.clamp(1e-12, 1.0 - 1e-12))).collect();
                let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm < 1e-6 {
                    continue;
                }
                points.push(g.iter().map(|v| v / norm).collect());
            }
        }
    }
    points
}

/// Deterministic samples of {|x - center| <= r0} × {|y| = 1}.
pub fn ball_sphere(center: &[f64], r0: f64, count: usize) -> Vec<PhasePoint> {
    let n = center.len();
    let sphere = unit_sphere(n, count.min(4096));
    let mut out = Vec::with_capacity(count);
    let mut k = 0u64;
    let mut si = 0usize;
    while out.len() < count {
        let u = halton(k, n);
        k += 1;
        // cube point mapped into the ball by rejection
        let offset: Vec<f64> = u.iter().map(|&ui| (2.0 * ui - 1.0) * r0).collect();
        if offset.iter().map(|v| v * v).sum::<f64>() > r0 * r0 {
            continue;
        }
        let base: Vec<f64> = center.iter().zip(&offset).map(|(c, o)| c + o).collect();
        let fibre = sphere[si % sphere.len()].clone();
        si += 1;
        out.push(PhasePoint::new(base, fibre).expect("unit fibre"));
    }
    out
}

/// Seeded uniform point in [lo, hi]^n.
pub fn seeded_box_points(n: usize, count: usize, seed: u64, lo: f64, hi: f64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| (0..n).map(|_| rng.gen_range(lo..=hi)).collect()).collect()
}

/// Convenience: phase points at a fixed base over sphere directions.
pub fn sphere_points_at(base: &[f64], count: usize) -> Result<Vec<PhasePoint>> {
    unit_sphere(base.len(), count)
        .into_iter()
        .map(|y| PhasePoint::new(base.to_vec(), y))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sphere_points_are_unit() {
        for n in 2..=4 {
            for p in unit_sphere(n, 200) {
                let norm = p.iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!((norm - 1.0).abs() < 1e-9, "n={n}");
            }
        }
    }

    #[test]
    fn sphere_includes_axes() {
        let pts = unit_sphere(3, 50);
        assert!(pts.iter().any(|p| p == &vec![1.0, 0.0, 0.0]));
        assert!(pts.iter().any(|p| p == &vec![0.0, 0.0, -1.0]));
    }

    #[test]
    fn seeded_points_are_reproducible() {
        let a = seeded_phase_points(3, 10, 42, 1.0);
        let b = seeded_phase_points(3, 10, 42, 1.0);
        assert_eq!(a, b);
        let c = seeded_phase_points(3, 10, 43, 1.0);
        assert_ne!(a, c);
    }

    #[test]
    fn inv_norm_cdf_round_trip() {
        // Φ(Φ^{-1}(p)) ≈ p via the error function complement
        for &p in &[0.01, 0.2, 0.5, 0.8, 0.99] {
            let z = inv_norm_cdf(p);
            let back = 0.5 * (1.0 + erf_approx(z / std::f64::consts::SQRT_2));
            assert!((back - p).abs() < 1e-6);
        }
    }

    #[cfg(test)]
    fn erf_approx(x: f64) -> f64 {
        // Abramowitz-Stegun 7.1.26, plenty for a sanity check
        let sign = x.signum();
        let x = x.abs();
        let t = 1.0 / (1.0 + 0.3275911 * x);
        let y = 1.0
            - (((((1.061405429 * t - 1.453152027) * t) + 1.421413741) * t - 0.284496736) * t + 0.254829592)
                * t
                * (-x * x).exp();
        sign * y
    }
}
