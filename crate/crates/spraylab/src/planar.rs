//! The two-dimensional theory: polar profile τ(θ), exactness integrals,
//! periodic reconstruction by variation of parameters, the first-harmonic
//! obstruction, and multiplier propagation along the flow.
//!
//! In dimension 2 an admissible multiplier has one independent component; in
//! polar fibre coordinates r(h11 + h22) is a function τ of θ alone, with
//!
//! ```text
//! h11 = τ sin²θ / r,   h22 = τ cos²θ / r,   h12 = −τ sinθ cosθ / r.
//! ```
//!
//! A positively-homogeneous F = r·φ(θ) has Hessian of this form with
//! φ″ + φ = τ, so fibre-global multipliers correspond to periodic solutions
//! φ. The equation has a periodic solution iff ∫τ sinθ dθ = ∫τ cosθ dθ = 0;
//! the obstruction is exactly the first harmonic k₁cosθ + k₂sinθ of τ, with
//! a non-periodic particular solution ½(k₁sinθ − k₂cosθ)θ.
//!
//! Quadrature is uniform over 4096 nodes. Cumulative integrals use the
//! termwise antiderivative of the sampled Fourier series rather than running
//! trapezoid sums: the O(h²) Euler-Maclaurin drift of cumulative trapezoid
//! would exceed the 1e-8 residual budget for φ″ + φ − τ.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::expr::{self, Expression};
use crate::field::Field;
use crate::geometry::SprayField;
use crate::jet::{self, Jet};
use crate::multiplier::MultiplierField;
use crate::ode::{self, OdeStats, OdeSystem};
use crate::phase::{PhasePoint, SLIT_EPSILON};
use crate::report::DiagnosticReport;

/// Uniform quadrature nodes on [0, 2π); spectrally accurate for smooth
/// periodic integrands.
pub const GRID: usize = 4096;
pub const PERIODICITY_TOL: f64 = 1e-12;
pub const EXACTNESS_TOL: f64 = 1e-8;

/// Real trigonometric polynomial mean + Σ (aₖ cos kθ + bₖ sin kθ).
#[derive(Debug, Clone, Default)]
pub struct Harmonics {
    pub mean: f64,
    pub cos_coeffs: Vec<f64>,
    pub sin_coeffs: Vec<f64>,
}

impl Harmonics {
    /// Coefficients of the trigonometric interpolant of uniform samples.
    pub fn from_samples(samples: &[f64]) -> Harmonics {
        let m = samples.len();
        let mut buf: Vec<Complex<f64>> =
            samples.iter().map(|&v| Complex::new(v, 0.0)).collect();
        FftPlanner::new().plan_fft_forward(m).process(&mut buf);
        let mean = buf[0].re / m as f64;
        let half = m / 2;
        let mut cos_coeffs = Vec::with_capacity(half);
        let mut sin_coeffs = Vec::with_capacity(half);
        for k in 1..half {
            cos_coeffs.push(2.0 * buf[k].re / m as f64);
            sin_coeffs.push(-2.0 * buf[k].im / m as f64);
        }
        if m % 2 == 0 && half >= 1 {
            cos_coeffs.push(buf[half].re / m as f64);
            sin_coeffs.push(0.0);
        }
        // trim negligible high harmonics so downstream loops stay short
        let scale = samples.iter().fold(1.0f64, |s, v| s.max(v.abs()));
        let cut = 1e-14 * scale;
        let mut keep = 0;
        for k in 0..cos_coeffs.len() {
            if cos_coeffs[k].abs() > cut || sin_coeffs[k].abs() > cut {
                keep = k + 1;
            }
        }
        cos_coeffs.truncate(keep);
        sin_coeffs.truncate(keep);
        Harmonics { mean, cos_coeffs, sin_coeffs }
    }

    pub fn order(&self) -> usize {
        self.cos_coeffs.len()
    }

    pub fn eval(&self, theta: f64) -> f64 {
        let mut v = self.mean;
        for k in 1..=self.order() {
            let (s, c) = (k as f64 * theta).sin_cos();
            v += self.cos_coeffs[k - 1] * c + self.sin_coeffs[k - 1] * s;
        }
        v
    }

    pub fn second_derivative(&self, theta: f64) -> f64 {
        let mut v = 0.0;
        for k in 1..=self.order() {
            let kk = (k * k) as f64;
            let (s, c) = (k as f64 * theta).sin_cos();
            v -= kk * (self.cos_coeffs[k - 1] * c + self.sin_coeffs[k - 1] * s);
        }
        v
    }

    /// ∫₀^θ of this series: mean·θ + Σ (aₖ sin kθ + bₖ(1 − cos kθ))/k.
    pub fn antiderivative(&self, theta: f64) -> f64 {
        let mut v = self.mean * theta;
        for k in 1..=self.order() {
            let kf = k as f64;
            let (s, c) = (kf * theta).sin_cos();
            v += (self.cos_coeffs[k - 1] * s + self.sin_coeffs[k - 1] * (1.0 - c)) / kf;
        }
        v
    }

    pub fn first_harmonic(&self) -> (f64, f64) {
        if self.order() >= 1 {
            (self.cos_coeffs[0], self.sin_coeffs[0])
        } else {
            (0.0, 0.0)
        }
    }

    pub fn drop_first_harmonic(&mut self) {
        if self.order() >= 1 {
            self.cos_coeffs[0] = 0.0;
            self.sin_coeffs[0] = 0.0;
        }
    }
}

enum ProfileSource {
    Expr(Expression),
    Harmonics(Harmonics),
    Multiplier { h: MultiplierField, base: Vec<f64> },
}

/// Periodic evaluator τ(θ) at a base point.
pub struct PlanarProfile {
    source: ProfileSource,
}

impl PlanarProfile {
    /// Expression in the single variable t; periodicity is verified.
    pub fn from_expression(text: &str) -> Result<PlanarProfile> {
        let expr = expr::parse_angle(text)?;
        for k in 0..16 {
            let theta = 2.0 * PI * k as f64 / 16.0 + 0.05;
            let a = expr.evaluate(&[theta])?;
            let b = expr.evaluate(&[theta + 2.0 * PI])?;
            if (a - b).abs() > PERIODICITY_TOL * (1.0 + a.abs()) {
                return Err(Error::Precondition(format!(
                    "profile expression is not 2π-periodic (τ({theta:.3}) = {a}, τ(+2π) = {b})"
                )));
            }
        }
        Ok(PlanarProfile { source: ProfileSource::Expr(expr) })
    }

    /// Uniform sample table over [0, 2π), one value per line.
    pub fn from_table(values: &[f64]) -> Result<PlanarProfile> {
        if values.len() < 4 {
            return Err(Error::Format(format!(
                "profile table needs at least 4 samples, got {}",
                values.len()
            )));
        }
        Ok(PlanarProfile { source: ProfileSource::Harmonics(Harmonics::from_samples(values)) })
    }

    pub fn from_harmonics(h: Harmonics) -> PlanarProfile {
        PlanarProfile { source: ProfileSource::Harmonics(h) }
    }

    pub fn eval(&self, theta: f64) -> Result<f64> {
        match &self.source {
            ProfileSource::Expr(e) => e.evaluate(&[theta]),
            ProfileSource::Harmonics(h) => Ok(h.eval(theta)),
            ProfileSource::Multiplier { h, base } => {
                let (s, c) = theta.sin_cos();
                let p = PhasePoint::new(base.clone(), vec![c, s])?;
                let m = h.matrix(&p)?;
                Ok(m[(0, 0)] + m[(1, 1)])
            }
        }
    }

    pub fn samples(&self, m: usize) -> Result<Vec<f64>> {
        (0..m).map(|j| self.eval(2.0 * PI * j as f64 / m as f64)).collect()
    }
}

/// τ(θ) = r·(h11 + h22) at r = 1 over the base point x, after verifying that
/// r·trace is independent of r and that h12 matches −(h11+h22)sinθcosθ.
pub fn tau_of(h: &MultiplierField, base: &[f64]) -> Result<PlanarProfile> {
    if h.dim() != 2 {
        return Err(Error::Dimension { expected: 2, got: h.dim() });
    }
    let mut r_dependence: f64 = 0.0;
    let mut h12_residual: f64 = 0.0;
    for k in 0..24 {
        let theta = 2.0 * PI * (k as f64 + 0.37) / 24.0;
        let (s, c) = theta.sin_cos();
        let mut traces = Vec::new();
        for r in [0.5, 1.0, 2.0] {
            let p = PhasePoint::new(base.to_vec(), vec![r * c, r * s])?;
            let m = h.matrix(&p)?;
            traces.push(r * (m[(0, 0)] + m[(1, 1)]));
            if (r - 1.0).abs() < 1e-12 {
                h12_residual =
                    h12_residual.max((m[(0, 1)] + (m[(0, 0)] + m[(1, 1)]) * s * c).abs());
            }
        }
        let spread = traces.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b))
            - traces.iter().fold(f64::INFINITY, |a, &b| a.min(b));
        r_dependence = r_dependence.max(spread);
    }
    if r_dependence > 1e-7 {
        return Err(Error::Precondition(format!(
            "r·(h11+h22) varies with r (spread {r_dependence:e}): multiplier is not degree -1"
        )));
    }
    if h12_residual > 1e-8 {
        return Err(Error::Precondition(format!(
            "h12 inconsistent with the trace profile (residual {h12_residual:e})"
        )));
    }
    Ok(PlanarProfile {
        source: ProfileSource::Multiplier { h: h.clone(), base: base.to_vec() },
    })
}

/// (I_s, I_c) = (∫₀^{2π} τ sinθ dθ, ∫₀^{2π} τ cosθ dθ): both vanish exactly
/// when the two 1-forms h_1j dy^j, h_2j dy^j are exact on the slit fibre.
pub fn exactness_integrals(tau: &PlanarProfile) -> Result<(f64, f64)> {
    let samples = tau.samples(GRID)?;
    let mut i_s = 0.0;
    let mut i_c = 0.0;
    for (j, v) in samples.iter().enumerate() {
        let theta = 2.0 * PI * j as f64 / GRID as f64;
        let (s, c) = theta.sin_cos();
        i_s += v * s;
        i_c += v * c;
    }
    let w = 2.0 * PI / GRID as f64;
    Ok((i_s * w, i_c * w))
}

/// φ(θ) as canonical periodic harmonics plus the secular obstruction term
/// ½(k₁ sinθ − k₂ cosθ)·θ.
#[derive(Debug, Clone)]
pub struct PhiFunction {
    pub harmonics: Harmonics,
    /// (k₁, k₂): first Fourier coefficients of τ, the obstruction pair.
    pub secular: (f64, f64),
}

impl PhiFunction {
    pub fn eval(&self, theta: f64) -> f64 {
        let (k1, k2) = self.secular;
        let (s, c) = theta.sin_cos();
        self.harmonics.eval(theta) + 0.5 * theta * (k1 * s - k2 * c)
    }

    /// φ″ via termwise differentiation plus the exact secular second
    /// derivative 2s′ − θ·s for s = ½(k₁sinθ − k₂cosθ).
    pub fn second_derivative(&self, theta: f64) -> f64 {
        let (k1, k2) = self.secular;
        let (s, c) = theta.sin_cos();
        self.harmonics.second_derivative(theta) + (k1 * c + k2 * s)
            - 0.5 * theta * (k1 * s - k2 * c)
    }

    pub fn is_periodic(&self) -> bool {
        let (k1, k2) = self.secular;
        k1.abs() < EXACTNESS_TOL && k2.abs() < EXACTNESS_TOL
    }
}

#[derive(Debug, Clone)]
pub struct PlanarSolution {
    pub phi: PhiFunction,
    /// u(θ) = −∫₀^θ τ sinφ dφ at the grid nodes.
    pub u: Vec<f64>,
    /// v(θ) = ∫₀^θ τ cosφ dφ at the grid nodes.
    pub v: Vec<f64>,
    pub periodic: bool,
    /// (k₁, k₂) with τ − (k₁cosθ + k₂sinθ) admitting a periodic solution.
    pub obstruction: (f64, f64),
    /// max |φ″ + φ − τ| over the grid.
    pub ode_residual: f64,
    /// Periodicity defect |φ(2π)−φ(0)| + |φ′(2π)−φ′(0)| (zero when periodic).
    pub periodicity_defect: f64,
}

/// Variation of parameters on the quadrature grid:
/// u = −∫τ sin, v = ∫τ cos, φ = u cosθ + v sinθ; the complementary-function
/// gauge is fixed by removing the first harmonic of the periodic part.
pub fn solve_phi(tau: &PlanarProfile) -> Result<PlanarSolution> {
    let m = GRID;
    let tau_samples = tau.samples(m)?;
    let mut g_sin = vec![0.0; m];
    let mut g_cos = vec![0.0; m];
    for j in 0..m {
        let theta = 2.0 * PI * j as f64 / m as f64;
        let (s, c) = theta.sin_cos();
        g_sin[j] = tau_samples[j] * s;
        g_cos[j] = tau_samples[j] * c;
    }
    let h_sin = Harmonics::from_samples(&g_sin);
    let h_cos = Harmonics::from_samples(&g_cos);
    let i_s = 2.0 * PI * h_sin.mean;
    let i_c = 2.0 * PI * h_cos.mean;
    let (k1, k2) = (i_c / PI, i_s / PI);

    let mut u = Vec::with_capacity(m + 1);
    let mut v = Vec::with_capacity(m + 1);
    let mut phi_periodic = vec![0.0; m];
    for j in 0..m {
        let theta = 2.0 * PI * j as f64 / m as f64;
        let (s, c) = theta.sin_cos();
        let uj = -h_sin.antiderivative(theta);
        let vj = h_cos.antiderivative(theta);
        u.push(uj);
        v.push(vj);
        let secular = 0.5 * theta * (k1 * s - k2 * c);
        phi_periodic[j] = uj * c + vj * s - secular;
    }

    let mut harmonics = Harmonics::from_samples(&phi_periodic);
    harmonics.drop_first_harmonic();
    let phi = PhiFunction { harmonics, secular: (k1, k2) };

    let mut ode_residual: f64 = 0.0;
    for j in 0..m {
        let theta = 2.0 * PI * j as f64 / m as f64;
        let r = phi.second_derivative(theta) + phi.eval(theta) - tau_samples[j];
        ode_residual = ode_residual.max(r.abs());
    }

    let periodic = i_s.abs() < EXACTNESS_TOL && i_c.abs() < EXACTNESS_TOL;
    // jumps of the raw particular solution across one period
    let du = -i_s;
    let dv = i_c;
    let periodicity_defect = du.abs() + dv.abs();

    Ok(PlanarSolution {
        phi,
        u,
        v,
        periodic,
        obstruction: (k1, k2),
        ode_residual,
        periodicity_defect,
    })
}

/// Splits off the first harmonic: τ = (k₁cosθ + k₂sinθ) + τ_res where the
/// residual profile has vanishing exactness integrals.
pub fn obstruction_split(tau: &PlanarProfile) -> Result<(f64, f64, PlanarProfile)> {
    let samples = tau.samples(GRID)?;
    let mut harmonics = Harmonics::from_samples(&samples);
    let (k1, k2) = harmonics.first_harmonic();
    harmonics.drop_first_harmonic();
    Ok((k1, k2, PlanarProfile::from_harmonics(harmonics)))
}

/// Multiplier entry τ*(θ)·q_ij(θ)/r built from a periodic φ, evaluated with
/// exact jets through Chebyshev recurrences in (cosθ, sinθ) = (y1, y2)/r.
struct PhiHessianEntry {
    tau_star: Arc<Harmonics>,
    row: usize,
    col: usize,
}

impl Field for PhiHessianEntry {
    fn dim(&self) -> usize {
        2
    }

    fn jet(&self, p: &PhasePoint, order: usize) -> Result<Jet> {
        let layout = jet::layout(4, order)?;
        let y1 = Jet::variable(layout.clone(), p.coords()[2], 2);
        let y2 = Jet::variable(layout.clone(), p.coords()[3], 3);
        let r = y1.mul(&y1).add(&y2.mul(&y2)).sqrt()?;
        let rinv = r.recip()?;
        let c = y1.mul(&rinv);
        let s = y2.mul(&rinv);

        // τ* via cos kθ = T_k(c), sin kθ = s·U_{k−1}(c)
        let h = &self.tau_star;
        let mut tau = Jet::constant(layout.clone(), h.mean);
        let mut t_prev = Jet::constant(layout.clone(), 1.0);
        let mut t_cur = c.clone();
        let mut u_prev = Jet::constant(layout.clone(), 1.0); // U_0
        let mut u_cur = c.scale(2.0); // U_1
        for k in 1..=h.order() {
            let (a, b) = (h.cos_coeffs[k - 1], h.sin_coeffs[k - 1]);
            if a != 0.0 {
                tau = tau.add(&t_cur.scale(a));
            }
            if b != 0.0 {
                tau = tau.add(&s.mul(&u_prev).scale(b));
            }
            let t_next = c.mul(&t_cur).scale(2.0).sub(&t_prev);
            t_prev = t_cur;
            t_cur = t_next;
            let u_next = c.mul(&u_cur).scale(2.0).sub(&u_prev);
            u_prev = u_cur;
            u_cur = u_next;
        }

        let q = match (self.row, self.col) {
            (0, 0) => s.mul(&s),
            (1, 1) => c.mul(&c),
            _ => s.mul(&c).neg(),
        };
        Ok(tau.mul(&q).mul(&rinv))
    }
}

/// h11 = (φ″+φ)sin²θ/r, h22 = (φ″+φ)cos²θ/r, h12 = −(φ″+φ)sinθcosθ/r.
/// The profile must be periodic (no secular part).
pub fn hessian_from_phi(phi: &PhiFunction) -> Result<MultiplierField> {
    if !phi.is_periodic() {
        return Err(Error::Precondition(
            "hessian_from_phi needs a periodic φ (secular obstruction present)".into(),
        ));
    }
    // τ* = φ″ + φ termwise: harmonic k scales by (1 − k²)
    let mut tau_star = Harmonics {
        mean: phi.harmonics.mean,
        cos_coeffs: phi.harmonics.cos_coeffs.clone(),
        sin_coeffs: phi.harmonics.sin_coeffs.clone(),
    };
    for k in 1..=tau_star.order() {
        let factor = 1.0 - (k * k) as f64;
        tau_star.cos_coeffs[k - 1] *= factor;
        tau_star.sin_coeffs[k - 1] *= factor;
    }
    let tau_star = Arc::new(tau_star);
    let entries: Vec<crate::field::FieldRef> = vec![
        Arc::new(PhiHessianEntry { tau_star: tau_star.clone(), row: 0, col: 0 }),
        Arc::new(PhiHessianEntry { tau_star: tau_star.clone(), row: 0, col: 1 }),
        Arc::new(PhiHessianEntry { tau_star, row: 1, col: 1 }),
    ];
    MultiplierField::new(2, entries)
}

/// Initial data on a transversal section: a unit-fibre phase point with the
/// multiplier components (h11, h12, h22). Values extend along the fibre ray
/// by degree-(−1) homogeneity, which makes Δh + h = 0 hold by convention.
#[derive(Debug, Clone)]
pub struct SectionSample {
    pub point: PhasePoint,
    pub h: [f64; 3],
}

struct MultiplierTransport<'a> {
    spray: &'a SprayField,
}

impl OdeSystem for MultiplierTransport<'_> {
    fn dim(&self) -> usize {
        7
    }

    fn rhs(&self, _t: f64, state: &[f64], out: &mut [f64]) -> Result<()> {
        let p = PhasePoint::new(state[..2].to_vec(), state[2..4].to_vec())?;
        let jets = self.spray.coefficient_jets(&p, 1)?;
        let gamma = [jets[0].value(), jets[1].value()];
        // conn[k][i] = Γ^k_i = ∂Γ^k/∂y^i
        let conn = [[jets[0].d1(2), jets[0].d1(3)], [jets[1].d1(2), jets[1].d1(3)]];
        let (h11, h12, h22) = (state[4], state[5], state[6]);
        out[0] = state[2];
        out[1] = state[3];
        out[2] = -2.0 * gamma[0];
        out[3] = -2.0 * gamma[1];
        // dh_ij = Γ^k_i h_kj + Γ^k_j h_ik
        out[4] = 2.0 * (conn[0][0] * h11 + conn[1][0] * h12);
        out[5] = conn[0][0] * h12 + conn[1][0] * h22 + conn[0][1] * h11 + conn[1][1] * h12;
        out[6] = 2.0 * (conn[0][1] * h12 + conn[1][1] * h22);
        Ok(())
    }

    fn check(&self, t: f64, state: &[f64]) -> Result<()> {
        let norm = (state[2] * state[2] + state[3] * state[3]).sqrt();
        if norm <= SLIT_EPSILON {
            return Err(Error::FibreCollapse { t, eps: SLIT_EPSILON });
        }
        Ok(())
    }
}

/// One propagated flow line with the multiplier components attached.
#[derive(Debug, Clone)]
pub struct FlowTube {
    pub times: Vec<f64>,
    /// States (x1, x2, y1, y2, h11, h12, h22).
    pub states: Vec<Vec<f64>>,
}

#[derive(Debug)]
pub struct PropagatedMultiplier {
    pub tubes: Vec<FlowTube>,
    pub report: DiagnosticReport,
    pub stats: OdeStats,
}

const TRANSPORT_TOL: f64 = 1e-10;

/// Propagates ∇h = 0 along the integral curves through the section and
/// verifies that the constraints η = h·y and λ = Δh + h stay below 1e-7.
/// η is read off each state; λ is measured as the mismatch between the run
/// and an independently integrated fibre-scaled run (c = 2), which is the
/// finite form of degree-(−1) homogeneity.
pub fn propagate_multiplier(
    spray: &SprayField,
    section: &[SectionSample],
    t_final: f64,
    samples_per_tube: usize,
) -> Result<PropagatedMultiplier> {
    if spray.dim() != 2 {
        return Err(Error::Dimension { expected: 2, got: spray.dim() });
    }
    let system = MultiplierTransport { spray };
    let mut tubes = Vec::with_capacity(section.len());
    let mut eta_max: f64 = 0.0;
    let mut lambda_max: f64 = 0.0;
    let mut stats = OdeStats::default();

    for sample in section {
        let y = sample.point.fibre();
        if (sample.point.fibre_norm() - 1.0).abs() > 1e-9 {
            return Err(Error::Precondition(
                "section data must be stored at |y| = 1 (degree -1 extension)".into(),
            ));
        }
        let [h11, h12, h22] = sample.h;
        let scale = 1.0 + h11.abs().max(h12.abs()).max(h22.abs());
        let eta1 = h11 * y[0] + h12 * y[1];
        let eta2 = h12 * y[0] + h22 * y[1];
        if eta1.abs() > 1e-9 * scale || eta2.abs() > 1e-9 * scale {
            return Err(Error::Precondition(format!(
                "initial data violate η = h·y = 0 (|η| = {:e})",
                eta1.abs().max(eta2.abs())
            )));
        }

        let mut state0 = sample.point.base().to_vec();
        state0.extend_from_slice(y);
        state0.extend_from_slice(&sample.h);

        let count = samples_per_tube.max(2);
        let times: Vec<f64> = (1..=count).map(|k| t_final * k as f64 / count as f64).collect();
        let (states, tube_stats) = ode::integrate_samples(&system, 0.0, &state0, &times, TRANSPORT_TOL)?;
        stats.steps += tube_stats.steps;
        stats.evals += tube_stats.evals;
        stats.rejected += tube_stats.rejected;

        // scaled run: start at (x0, 2y0) with h/2; by degree-(−1) homogeneity
        // it must satisfy 2·h_c(t) = h(2t) along the same base path
        let c = 2.0;
        let mut scaled0 = sample.point.base().to_vec();
        scaled0.extend(y.iter().map(|v| c * v));
        scaled0.extend(sample.h.iter().map(|v| v / c));
        let scaled_times: Vec<f64> = times.iter().map(|t| t / c).collect();
        let (scaled_states, _) =
            ode::integrate_samples(&system, 0.0, &scaled0, &scaled_times, TRANSPORT_TOL)?;

        for (k, state) in states.iter().enumerate() {
            let (y1, y2) = (state[2], state[3]);
            let (h11, h12, h22) = (state[4], state[5], state[6]);
            let scale = 1.0 + h11.abs().max(h12.abs()).max(h22.abs());
            eta_max = eta_max.max((h11 * y1 + h12 * y2).abs() / scale);
            eta_max = eta_max.max((h12 * y1 + h22 * y2).abs() / scale);
            let sc = &scaled_states[k];
            for c_idx in 4..7 {
                lambda_max = lambda_max.max((c * sc[c_idx] - state[c_idx]).abs() / scale);
            }
        }

        let mut all_times = vec![0.0];
        all_times.extend(times);
        let mut all_states = vec![state0];
        all_states.extend(states);
        tubes.push(FlowTube { times: all_times, states: all_states });
    }

    let mut report = DiagnosticReport::new();
    report.record("planar/eta-along-flow", eta_max, 1e-7);
    report.record("planar/lambda-along-flow", lambda_max, 1e-7);
    report.note("initial λ = Δh + h = 0 holds by the |y| = 1 storage convention");
    Ok(PropagatedMultiplier { tubes, report, stats })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog;
    use crate::multiplier::hessian_of;

    fn profile(text: &str) -> PlanarProfile {
        PlanarProfile::from_expression(text).unwrap()
    }

    #[test]
    fn rejects_non_periodic_expression() {
        assert!(PlanarProfile::from_expression("t").is_err());
        assert!(PlanarProfile::from_expression("cos(0.5*t)").is_err());
        assert!(PlanarProfile::from_expression("cos(t)+1").is_ok());
    }

    #[test]
    fn exactness_integral_values() {
        let (i_s, i_c) = exactness_integrals(&profile("1")).unwrap();
        assert!(i_s.abs() < 1e-12 && i_c.abs() < 1e-12);

        let (i_s, i_c) = exactness_integrals(&profile("cos(t)")).unwrap();
        assert!(i_s.abs() < 1e-12);
        assert!((i_c - PI).abs() < 1e-12);

        let (i_s, i_c) = exactness_integrals(&profile("1+0.5*cos(2*t)")).unwrap();
        assert!(i_s.abs() < 1e-12 && i_c.abs() < 1e-12);
    }

    #[test]
    fn solve_phi_constant_profile() {
        let sol = solve_phi(&profile("1")).unwrap();
        assert!(sol.periodic);
        assert!(sol.ode_residual < 1e-10, "{}", sol.ode_residual);
        for k in 0..16 {
            let theta = 2.0 * PI * k as f64 / 16.0;
            assert!((sol.phi.eval(theta) - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn solve_phi_second_harmonic() {
        let sol = solve_phi(&profile("1+0.5*cos(2*t)")).unwrap();
        assert!(sol.periodic);
        assert!(sol.ode_residual < 1e-10);
        for k in 0..32 {
            let theta = 2.0 * PI * k as f64 / 32.0;
            let expect = 1.0 - (2.0 * theta).cos() / 6.0;
            assert!((sol.phi.eval(theta) - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn solve_phi_obstructed_profile() {
        let sol = solve_phi(&profile("cos(t)")).unwrap();
        assert!(!sol.periodic);
        assert!((sol.obstruction.0 - 1.0).abs() < 1e-10);
        assert!(sol.obstruction.1.abs() < 1e-10);
        assert!(sol.ode_residual < 1e-9, "{}", sol.ode_residual);
        // φ = ½ θ sinθ
        for k in 1..8 {
            let theta = 2.0 * PI * k as f64 / 8.0;
            assert!(
                (sol.phi.eval(theta) - 0.5 * theta * theta.sin()).abs() < 1e-9,
                "theta = {theta}"
            );
        }
        assert!(sol.periodicity_defect > 1.0);
    }

    #[test]
    fn obstruction_split_values() {
        let (k1, k2, res) = obstruction_split(&profile("cos(t)")).unwrap();
        assert!((k1 - 1.0).abs() < 1e-12 && k2.abs() < 1e-12);
        for k in 0..8 {
            assert!(res.eval(2.0 * PI * k as f64 / 8.0).unwrap().abs() < 1e-12);
        }

        let (k1, k2, res) = obstruction_split(&profile("2*sin(t)+1")).unwrap();
        assert!(k1.abs() < 1e-12 && (k2 - 2.0).abs() < 1e-12);
        for k in 0..8 {
            assert!((res.eval(2.0 * PI * k as f64 / 8.0).unwrap() - 1.0).abs() < 1e-12);
        }
        let (i_s, i_c) = exactness_integrals(&res).unwrap();
        assert!(i_s.abs() < 1e-10 && i_c.abs() < 1e-10);
    }

    #[test]
    fn tau_of_euclid_hessian_is_one() {
        let h = hessian_of(&catalog::euclid_norm(2).unwrap());
        let tau = tau_of(&h, &[0.0, 0.0]).unwrap();
        for k in 0..16 {
            let v = tau.eval(2.0 * PI * k as f64 / 16.0).unwrap();
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn tau_of_obstruction_display() {
        // h from the first-harmonic obstruction with k1 = 1, k2 = 0
        let texts: Vec<String> = vec![
            "y1*y2^2/(y1^2+y2^2)^2".into(),
            "-y1^2*y2/(y1^2+y2^2)^2".into(),
            "y1^3/(y1^2+y2^2)^2".into(),
        ];
        let h = MultiplierField::from_texts(2, &texts).unwrap();
        let tau = tau_of(&h, &[0.0, 0.0]).unwrap();
        for k in 0..16 {
            let theta = 2.0 * PI * (k as f64 + 0.21) / 16.0;
            assert!((tau.eval(theta).unwrap() - theta.cos()).abs() < 1e-12);
        }
    }

    #[test]
    fn tau_of_zero_multiplier() {
        let texts: Vec<String> = vec!["0".into(), "0".into(), "0".into()];
        let h = MultiplierField::from_texts(2, &texts).unwrap();
        let tau = tau_of(&h, &[0.0, 0.0]).unwrap();
        assert_eq!(tau.eval(1.0).unwrap(), 0.0);
    }

    #[test]
    fn tau_of_rejects_wrong_homogeneity() {
        // constant h: degree 0, r·trace scales with r
        let texts: Vec<String> = vec!["1".into(), "0".into(), "1".into()];
        let h = MultiplierField::from_texts(2, &texts).unwrap();
        assert!(tau_of(&h, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn hessian_from_phi_round_trips() {
        let sol = solve_phi(&profile("1+0.5*cos(2*t)")).unwrap();
        let h = hessian_from_phi(&sol.phi).unwrap();
        let tau = tau_of(&h, &[0.0, 0.0]).unwrap();
        for k in 0..32 {
            let theta = 2.0 * PI * (k as f64 + 0.4) / 32.0;
            let expect = 1.0 + 0.5 * (2.0 * theta).cos();
            assert!((tau.eval(theta).unwrap() - expect).abs() < 1e-7, "theta={theta}");
        }
    }

    #[test]
    fn hessian_from_constant_phi_is_euclid() {
        let sol = solve_phi(&profile("1")).unwrap();
        let h = hessian_from_phi(&sol.phi).unwrap();
        let reference = hessian_of(&catalog::euclid_norm(2).unwrap());
        for p in crate::sampling::seeded_phase_points_scaled(2, 10, 51, 1.0) {
            let a = h.matrix(&p).unwrap();
            let b = reference.matrix(&p).unwrap();
            assert!((&a - &b).amax() < 1e-10);
        }
    }

    #[test]
    fn hessian_from_first_harmonic_phi_is_zero() {
        let phi = PhiFunction {
            harmonics: Harmonics { mean: 0.0, cos_coeffs: vec![0.7], sin_coeffs: vec![-0.3] },
            secular: (0.0, 0.0),
        };
        let h = hessian_from_phi(&phi).unwrap();
        let p = PhasePoint::new(vec![0.0, 0.0], vec![0.8, -0.6]).unwrap();
        assert!(h.matrix(&p).unwrap().amax() < 1e-14);
    }

    #[test]
    fn hessian_from_phi_rejects_obstructed() {
        let sol = solve_phi(&profile("cos(t)")).unwrap();
        assert!(hessian_from_phi(&sol.phi).is_err());
    }

    #[test]
    fn phi_hessian_jets_satisfy_helmholtz_algebra() {
        // the synthesized multiplier must pass (ii) and (iii) with exact jets
        let sol = solve_phi(&profile("1+0.25*cos(2*t)+0.1*sin(3*t)")).unwrap();
        let h = hessian_from_phi(&sol.phi).unwrap();
        let samples = crate::sampling::seeded_phase_points_scaled(2, 20, 52, 1.0);
        let report =
            crate::multiplier::helmholtz_report(&h, &SprayField::flat(2), &samples).unwrap();
        assert!(report.check("helmholtz/kernel").unwrap().pass, "{report:?}");
        assert!(report.check("helmholtz/closed-fibre-derivative").unwrap().pass);
        assert!(report.check("helmholtz/implied-degree-minus-1").unwrap().pass);
    }

    #[test]
    fn propagate_flat_keeps_euclid_hessian() {
        let flat = SprayField::flat(2);
        let mut section = Vec::new();
        for k in 0..4 {
            let theta = 2.0 * PI * (k as f64 + 0.3) / 4.0;
            let (s, c) = theta.sin_cos();
            let point = PhasePoint::new(vec![0.0, -0.5 + 0.3 * k as f64], vec![c, s]).unwrap();
            // Euclidean Hessian at |y| = 1: I − ŷŷᵀ
            section.push(SectionSample {
                point,
                h: [1.0 - c * c, -c * s, 1.0 - s * s],
            });
        }
        let out = propagate_multiplier(&flat, &section, 2.0, 16).unwrap();
        assert!(out.report.all_pass(), "{:?}", out.report);
        for (tube, sample) in out.tubes.iter().zip(&section) {
            for state in &tube.states {
                assert!((state[4] - sample.h[0]).abs() < 1e-9);
                assert!((state[5] - sample.h[1]).abs() < 1e-9);
                assert!((state[6] - sample.h[2]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn propagate_shen_circle_preserves_constraints() {
        let shen = catalog::get("shen_circle").unwrap().spray;
        let mut section = Vec::new();
        for k in 0..3 {
            let theta = 2.0 * PI * (k as f64 + 0.15) / 3.0;
            let (s, c) = theta.sin_cos();
            let point =
                PhasePoint::new(vec![0.1 * k as f64, -0.2], vec![c, s]).unwrap();
            section.push(SectionSample { point, h: [s * s, -c * s, c * c] });
        }
        let out = propagate_multiplier(&shen, &section, 2.0 * PI, 32).unwrap();
        assert!(out.report.all_pass(), "{:?}", out.report);
    }

    #[test]
    fn propagate_rejects_eta_violation() {
        let flat = SprayField::flat(2);
        let point = PhasePoint::new(vec![0.0, 0.0], vec![1.0, 0.0]).unwrap();
        let section = [SectionSample { point, h: [1.0, 0.0, 1.0] }];
        assert!(propagate_multiplier(&flat, &section, 1.0, 8).is_err());
    }

    #[test]
    fn solution_periodicity_invariants() {
        // periodic flag ⇔ both exactness integrals < 1e-8
        for (text, expect) in
            [("1", true), ("cos(t)", false), ("1+0.5*cos(2*t)", true), ("sin(t)*2+1", false)]
        {
            let tau = profile(text);
            let sol = solve_phi(&tau).unwrap();
            assert_eq!(sol.periodic, expect, "{text}");
            let (i_s, i_c) = exactness_integrals(&tau).unwrap();
            assert_eq!(sol.periodic, i_s.abs() < 1e-8 && i_c.abs() < 1e-8);
            if sol.periodic {
                // φ(0) = φ(2π) and φ′(0) = φ′(2π) via the secular-free form
                assert!((sol.phi.eval(0.0) - sol.phi.eval(2.0 * PI)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn table_profile_round_trip() {
        let m = 256;
        let values: Vec<f64> = (0..m)
            .map(|j| {
                let theta = 2.0 * PI * j as f64 / m as f64;
                1.0 + 0.3 * (2.0 * theta).cos() - 0.2 * (5.0 * theta).sin()
            })
            .collect();
        let tau = PlanarProfile::from_table(&values).unwrap();
        for k in 0..20 {
            let theta = 2.0 * PI * (k as f64 + 0.7) / 20.0;
            let expect = 1.0 + 0.3 * (2.0 * theta).cos() - 0.2 * (5.0 * theta).sin();
            assert!((tau.eval(theta).unwrap() - expect).abs() < 1e-12);
        }
    }
}
