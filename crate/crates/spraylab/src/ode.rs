//! Embedded Dormand-Prince 5(4) integrator with adaptive steps.

use crate::error::{Error, Result};

pub trait OdeSystem {
    fn dim(&self) -> usize;
    fn rhs(&self, t: f64, state: &[f64], out: &mut [f64]) -> Result<()>;
    /// Invoked after every accepted step; an error aborts the integration.
    fn check(&self, _t: f64, _state: &[f64]) -> Result<()> {
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct OdeStats {
    pub steps: usize,
    pub rejected: usize,
    pub evals: usize,
}

const A: [[f64; 6]; 6] = [
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const C: [f64; 6] = [1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
/// Fifth-order weights (row 7 of the tableau; FSAL).
const B5: [f64; 7] =
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
/// Embedded fourth-order weights.
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

/// Integrates from (t0, state) to t1 in place; local error per step ≤ tol.
pub fn integrate_to<S: OdeSystem>(
    system: &S,
    t0: f64,
    state: &mut [f64],
    t1: f64,
    tol: f64,
    stats: &mut OdeStats,
) -> Result<()> {
    let dim = system.dim();
    let direction = if t1 >= t0 { 1.0 } else { -1.0 };
    let span = (t1 - t0).abs();
    if span == 0.0 {
        return Ok(());
    }
    let h_min = 1e-14 * span.max(1.0);

    let mut t = t0;
    let mut h = (span / 100.0).min(0.1).max(h_min) * direction;
    let mut k: Vec<Vec<f64>> = (0..7).map(|_| vec![0.0; dim]).collect();
    let mut fsal_valid = false;

    let mut stage = vec![0.0; dim];
    let mut candidate = vec![0.0; dim];

    while (t1 - t) * direction > 0.0 {
        if (t + h - t1) * direction > 0.0 {
            h = t1 - t;
        }
        if h.abs() < h_min {
            return Err(Error::StepUnderflow { t });
        }

        if fsal_valid {
            k.swap(0, 6);
        } else {
            let (k0, _) = k.split_at_mut(1);
            system.rhs(t, state, &mut k0[0])?;
            stats.evals += 1;
        }

        for s in 0..6 {
            for i in 0..dim {
                let mut acc = 0.0;
                for (j, kj) in k.iter().enumerate().take(s + 1) {
                    acc += A[s][j] * kj[i];
                }
                stage[i] = state[i] + h * acc;
            }
            system.rhs(t + C[s] * h, &stage, &mut k[s + 1])?;
            stats.evals += 1;
        }

        let mut err_norm_sq = 0.0;
        for i in 0..dim {
            let mut y5 = 0.0;
            let mut y4 = 0.0;
            for (j, kj) in k.iter().enumerate() {
                y5 += B5[j] * kj[i];
                y4 += B4[j] * kj[i];
            }
            candidate[i] = state[i] + h * y5;
            let scale = tol + tol * state[i].abs().max(candidate[i].abs());
            let e = h * (y5 - y4) / scale;
            err_norm_sq += e * e;
        }
        let err = (err_norm_sq / dim as f64).sqrt();

        if err <= 1.0 {
            t += h;
            state.copy_from_slice(&candidate);
            system.check(t, state)?;
            stats.steps += 1;
            fsal_valid = true; // k[6] = f(t, state) by the FSAL property
        } else {
            stats.rejected += 1;
            fsal_valid = false;
        }
        let factor = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
        h *= factor;
    }
    Ok(())
}

/// States at the requested sample times (strictly increasing from t0).
pub fn integrate_samples<S: OdeSystem>(
    system: &S,
    t0: f64,
    state0: &[f64],
    times: &[f64],
    tol: f64,
) -> Result<(Vec<Vec<f64>>, OdeStats)> {
    let mut stats = OdeStats::default();
    let mut state = state0.to_vec();
    let mut t = t0;
    let mut out = Vec::with_capacity(times.len());
    for &target in times {
        integrate_to(system, t, &mut state, target, tol, &mut stats)?;
        t = target;
        out.push(state.clone());
    }
    Ok((out, stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Harmonic;

    impl OdeSystem for Harmonic {
        fn dim(&self) -> usize {
            2
        }
        fn rhs(&self, _t: f64, s: &[f64], out: &mut [f64]) -> Result<()> {
            out[0] = s[1];
            out[1] = -s[0];
            Ok(())
        }
    }

    #[test]
    fn harmonic_oscillator_full_period() {
        let mut stats = OdeStats::default();
        let mut state = vec![1.0, 0.0];
        integrate_to(&Harmonic, 0.0, &mut state, 2.0 * std::f64::consts::PI, 1e-10, &mut stats)
            .unwrap();
        assert!((state[0] - 1.0).abs() < 1e-8, "{state:?}");
        assert!(state[1].abs() < 1e-8);
        assert!(stats.steps > 10);
    }

    struct Blowup;

    impl OdeSystem for Blowup {
        fn dim(&self) -> usize {
            1
        }
        fn rhs(&self, _t: f64, s: &[f64], out: &mut [f64]) -> Result<()> {
            out[0] = s[0] * s[0];
            Ok(())
        }
    }

    #[test]
    fn blowup_reports_step_underflow() {
        // y' = y², y(0) = 1 blows up at t = 1
        let mut stats = OdeStats::default();
        let mut state = vec![1.0];
        let r = integrate_to(&Blowup, 0.0, &mut state, 2.0, 1e-10, &mut stats);
        assert!(matches!(r, Err(Error::StepUnderflow { .. })));
    }
}
