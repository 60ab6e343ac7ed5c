//! Black-box scalar evaluators on the slit bundle.
//!
//! Everything geometric in this crate — spray coefficients, candidate Finsler
//! functions, multiplier components — is a [`Field`]: an immutable evaluator
//! that yields exact truncated Taylor expansions (jets) at phase points.
//! Combinators build derived evaluators (sums, products, fibre reflection,
//! partial derivatives) without losing exactness, so no production code path
//! ever falls back to finite differencing.

use std::sync::Arc;

use crate::error::Result;
use crate::expr::Expression;
use crate::jet::{self, Jet};
use crate::phase::PhasePoint;

pub trait Field: Send + Sync {
    /// Base dimension n; jets run over the 2n phase variables.
    fn dim(&self) -> usize;

    fn jet(&self, p: &PhasePoint, order: usize) -> Result<Jet>;

    fn eval(&self, p: &PhasePoint) -> Result<f64> {
        Ok(self.jet(p, 0)?.value())
    }
}

pub type FieldRef = Arc<dyn Field>;

/// Base-variable jets of θ_i = ∂F/∂y^i, supplied by fields that can deliver
/// them beyond the reach of their full phase-space jets (quadrature-defined
/// reconstructions cap the latter at order 2).
pub trait ThetaJets: Send + Sync {
    /// Jets over the n base variables of each θ_i at (x, y), order ≤ 2.
    fn theta_base_jets(&self, base: &[f64], fibre: &[f64], order: usize) -> Result<Vec<Jet>>;
}

/// Expression-backed field.
pub struct ExprField {
    dim: usize,
    expr: Expression,
}

impl ExprField {
    pub fn new(expr: Expression, dim: usize) -> Self {
        ExprField { dim, expr }
    }

    pub fn expression(&self) -> &Expression {
        &self.expr
    }
}

impl Field for ExprField {
    fn dim(&self) -> usize {
        self.dim
    }

    fn jet(&self, p: &PhasePoint, order: usize) -> Result<Jet> {
        self.expr.evaluate_jet(&p.coords(), order)
    }
}

/// Parse helper: expression text over dimension n as a shared field.
pub fn from_text(text: &str, dim: usize) -> Result<FieldRef> {
    let expr = crate::expr::parse(text, dim)?;
    Ok(Arc::new(ExprField::new(expr, dim)))
}

pub struct ConstField {
    dim: usize,
    value: f64,
}

pub fn constant(dim: usize, value: f64) -> FieldRef {
    Arc::new(ConstField { dim, value })
}

impl Field for ConstField {
    fn dim(&self) -> usize {
        self.dim
    }

    fn jet(&self, p: &PhasePoint, order: usize) -> Result<Jet> {
        let _ = p;
        Ok(Jet::constant(jet::layout(2 * self.dim, order)?, self.value))
    }
}

/// The coordinate function y^i (slot n+i) or x^i (slot i).
pub struct CoordField {
    dim: usize,
    slot: usize,
}

pub fn base_coord(dim: usize, i: usize) -> FieldRef {
    Arc::new(CoordField { dim, slot: i })
}

pub fn fibre_coord(dim: usize, i: usize) -> FieldRef {
    Arc::new(CoordField { dim, slot: dim + i })
}

impl Field for CoordField {
    fn dim(&self) -> usize {
        self.dim
    }

    fn jet(&self, p: &PhasePoint, order: usize) -> Result<Jet> {
        let layout = jet::layout(2 * self.dim, order)?;
        Ok(Jet::variable(layout, p.coords()[self.slot], self.slot))
    }
}

struct SumField(FieldRef, FieldRef);

impl Field for SumField {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn jet(&self, p: &PhasePoint, order: usize) -> Result<Jet> {
        Ok(self.0.jet(p, order)?.add(&self.1.jet(p, order)?))
    }
}

struct ProductField(FieldRef, FieldRef);

impl Field for ProductField {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn jet(&self, p: &PhasePoint, order: usize) -> Result<Jet> {
        Ok(self.0.jet(p, order)?.mul(&self.1.jet(p, order)?))
    }
}

struct ScaleField(FieldRef, f64);

impl Field for ScaleField {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn jet(&self, p: &PhasePoint, order: usize) -> Result<Jet> {
        Ok(self.0.jet(p, order)?.scale(self.1))
    }
}

/// f ∘ ρ where ρ(x, y) = (x, −y): evaluate at the reflected point and flip
/// the sign of every coefficient with odd fibre degree.
struct FibreReflectField(FieldRef);

impl Field for FibreReflectField {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn jet(&self, p: &PhasePoint, order: usize) -> Result<Jet> {
        let n = self.dim();
        let mut j = self.0.jet(&p.reflect(), order)?;
        for i in 0..j.layout.len() {
            let exps = j.layout.exponents(i);
            let fibre_degree: u8 = exps[n..].iter().sum();
            if fibre_degree % 2 == 1 {
                j.coeffs[i] = -j.coeffs[i];
            }
        }
        Ok(j)
    }
}

/// ∂^β f as a field with its own exact jets (requests order + |β| upstream).
struct DerivativeField {
    inner: FieldRef,
    beta: Vec<u8>,
}

impl Field for DerivativeField {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn jet(&self, p: &PhasePoint, order: usize) -> Result<Jet> {
        let extra: usize = self.beta.iter().map(|&k| k as usize).sum();
        self.inner.jet(p, order + extra)?.shift(&self.beta)
    }
}

/// Shared upstream jet for a family of derivative fields evaluated at the
/// same point in sequence (all Hessian entries of one F): a single
/// bounded memo collapses the 6-fold recomputation of the source jet.
pub struct SharedJetSource {
    inner: FieldRef,
    memo: std::sync::Mutex<std::collections::HashMap<(Vec<u64>, usize), Arc<Jet>>>,
}

impl SharedJetSource {
    pub fn new(inner: FieldRef) -> Self {
        SharedJetSource { inner, memo: std::sync::Mutex::new(std::collections::HashMap::new()) }
    }

    fn jet(&self, p: &PhasePoint, order: usize) -> Result<Arc<Jet>> {
        let key: (Vec<u64>, usize) =
            (p.coords().iter().map(|v| v.to_bits()).collect(), order);
        {
            let memo = self.memo.lock().unwrap();
            if let Some(hit) = memo.get(&key) {
                return Ok(hit.clone());
            }
        }
        let jet = Arc::new(self.inner.jet(p, order)?);
        let mut memo = self.memo.lock().unwrap();
        if memo.len() >= 64 {
            memo.clear();
        }
        memo.insert(key, jet.clone());
        Ok(jet)
    }
}

struct SharedDerivativeField {
    source: Arc<SharedJetSource>,
    dim: usize,
    beta: Vec<u8>,
}

impl Field for SharedDerivativeField {
    fn dim(&self) -> usize {
        self.dim
    }

    fn jet(&self, p: &PhasePoint, order: usize) -> Result<Jet> {
        let extra: usize = self.beta.iter().map(|&k| k as usize).sum();
        self.source.jet(p, order + extra)?.shift(&self.beta)
    }
}

/// All fibre-Hessian entries ∂²f/∂y^i∂y^j for i ≤ j in row-major order,
/// sharing one memoized source jet per evaluation point.
pub fn fibre_hessian_entries(f: FieldRef) -> Vec<FieldRef> {
    let n = f.dim();
    let source = Arc::new(SharedJetSource::new(f));
    let mut out: Vec<FieldRef> = Vec::with_capacity(n * (n + 1) / 2);
    for i in 0..n {
        for j in i..n {
            let mut beta = vec![0u8; 2 * n];
            beta[n + i] += 1;
            beta[n + j] += 1;
            out.push(Arc::new(SharedDerivativeField { source: source.clone(), dim: n, beta }));
        }
    }
    out
}

pub fn add(a: FieldRef, b: FieldRef) -> FieldRef {
    Arc::new(SumField(a, b))
}

pub fn product(a: FieldRef, b: FieldRef) -> FieldRef {
    Arc::new(ProductField(a, b))
}

pub fn scale(a: FieldRef, k: f64) -> FieldRef {
    Arc::new(ScaleField(a, k))
}

pub fn fibre_reflect(a: FieldRef) -> FieldRef {
    Arc::new(FibreReflectField(a))
}

/// Partial derivative by multi-index over the 2n phase variables.
pub fn derivative(a: FieldRef, beta: Vec<u8>) -> FieldRef {
    Arc::new(DerivativeField { inner: a, beta })
}

/// Second fibre derivative ∂²f/∂y^i∂y^j.
pub fn fibre_hessian_entry(a: FieldRef, i: usize, j: usize) -> FieldRef {
    let n = a.dim();
    let mut beta = vec![0u8; 2 * n];
    beta[n + i] += 1;
    beta[n + j] += 1;
    derivative(a, beta)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(base: &[f64], fibre: &[f64]) -> PhasePoint {
        PhasePoint::new(base.to_vec(), fibre.to_vec()).unwrap()
    }

    #[test]
    fn reflect_flips_odd_fibre_terms() {
        let f = from_text("x1*y1+y2^2", 2).unwrap();
        let r = fibre_reflect(f.clone());
        let pt = p(&[2.0, 0.0], &[3.0, 4.0]);
        // f(x, -y) = -x1 y1 + y2^2 = -6 + 16
        assert!((r.eval(&pt).unwrap() - 10.0).abs() < 1e-14);
        let j = r.jet(&pt, 2).unwrap();
        assert!((j.d1(2) - (-2.0)).abs() < 1e-14); // ∂/∂y1 (-x1 y1) = -x1
        assert!((j.d1(0) - (-3.0)).abs() < 1e-14); // ∂/∂x1 = -y1
        assert!((j.d2(3, 3) - 2.0).abs() < 1e-14);
    }

    #[test]
    fn derivative_field_is_exact() {
        let f = from_text("sqrt(y1^2+y2^2)", 2).unwrap();
        let h11 = fibre_hessian_entry(f, 0, 0);
        let pt = p(&[0.0, 0.0], &[3.0, 4.0]);
        assert!((h11.eval(&pt).unwrap() - 16.0 / 125.0).abs() < 1e-14);
        // and the derived field has derivatives of its own
        let j = h11.jet(&pt, 1).unwrap();
        // ∂h11/∂y1 = ∂³|y|/∂y1³ = -3 y1 y2^2 / |y|^5 at (3,4): -3*3*16/3125
        assert!((j.d1(2) + 144.0 / 3125.0).abs() < 1e-13);
    }
}
