//! Truncated multivariate Taylor arithmetic.
//!
//! A [`Jet`] stores the Taylor coefficients of a smooth function at a point,
//! for every multi-index of total degree ≤ `order` over `nvars` variables.
//! Arithmetic on jets propagates exact mixed partial derivatives through a
//! computation in a single forward pass; elementary functions are applied by
//! composing with their univariate Taylor expansion. This generalizes
//! hyper-dual numbers to arbitrary (here ≤ 4) derivative order, which is what
//! the curvature and Helmholtz machinery needs: third derivatives of spray
//! coefficients and fourth derivatives of candidate Finsler functions.
//!
//! Coefficients are indexed by a graded-lexicographic table shared through an
//! [`Arc<JetLayout>`]; layouts are cached per `(nvars, order)` pair.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use crate::error::{Error, Result};

/// Highest supported derivative order.
pub const MAX_ORDER: usize = 4;

/// Index table for one `(nvars, order)` combination.
#[derive(Debug)]
pub struct JetLayout {
    pub nvars: usize,
    pub order: usize,
    /// Multi-index exponents in graded-lex order (degree-0 entry first).
    exps: Vec<Vec<u8>>,
    /// `degree_start[d]` = first coefficient index of total degree `d`;
    /// has length `order + 2` so `degree_start[order + 1]` is the total count.
    degree_start: Vec<usize>,
    index: HashMap<Vec<u8>, usize>,
    /// α! for each stored multi-index.
    factorial: Vec<f64>,
    /// Flattened product table: for position `i` of degree d, row `i` maps
    /// every position `j` with degree ≤ order − d to the position of α_i + α_j.
    prod: Vec<u32>,
    prod_row_start: Vec<usize>,
}

fn gen_exponents(nvars: usize, degree: usize, out: &mut Vec<Vec<u8>>) {
    fn rec(prefix: &mut Vec<u8>, remaining: usize, slot: usize, nvars: usize, out: &mut Vec<Vec<u8>>) {
        if slot == nvars - 1 {
            prefix.push(remaining as u8);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for take in (0..=remaining).rev() {
            prefix.push(take as u8);
            rec(prefix, remaining - take, slot + 1, nvars, out);
            prefix.pop();
        }
    }
    rec(&mut Vec::new(), degree, 0, nvars, out);
}

impl JetLayout {
    fn build(nvars: usize, order: usize) -> Self {
        let mut exps = Vec::new();
        let mut degree_start = Vec::with_capacity(order + 2);
        for d in 0..=order {
            degree_start.push(exps.len());
            gen_exponents(nvars, d, &mut exps);
        }
        degree_start.push(exps.len());

        let mut index = HashMap::with_capacity(exps.len());
        for (i, e) in exps.iter().enumerate() {
            index.insert(e.clone(), i);
        }
        let factorial: Vec<f64> = exps
            .iter()
            .map(|e| e.iter().map(|&k| (1..=k as u64).product::<u64>() as f64).product())
            .collect();

        let mut prod = Vec::new();
        let mut prod_row_start = Vec::with_capacity(exps.len() + 1);
        for e in &exps {
            prod_row_start.push(prod.len());
            let d: usize = e.iter().map(|&k| k as usize).sum();
            let limit = degree_start[order - d + 1];
            let mut sum = vec![0u8; nvars];
            for f in exps.iter().take(limit) {
                for v in 0..nvars {
                    sum[v] = e[v] + f[v];
                }
                prod.push(index[&sum] as u32);
            }
        }
        prod_row_start.push(prod.len());

        JetLayout { nvars, order, exps, degree_start, index, factorial, prod, prod_row_start }
    }

    pub fn len(&self) -> usize {
        self.exps.len()
    }

    pub fn exponents(&self, i: usize) -> &[u8] {
        &self.exps[i]
    }

    pub fn position(&self, multi: &[u8]) -> Option<usize> {
        self.index.get(multi).copied()
    }

    fn degree(&self, i: usize) -> usize {
        self.exps[i].iter().map(|&k| k as usize).sum()
    }
}

/// Shared layout cache.
pub fn layout(nvars: usize, order: usize) -> Result<Arc<JetLayout>> {
    if order > MAX_ORDER {
        return Err(Error::JetOrder { requested: order, max: MAX_ORDER });
    }
    static CACHE: OnceLock<Mutex<HashMap<(usize, usize), Arc<JetLayout>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = cache.lock().unwrap();
    Ok(guard
        .entry((nvars, order))
        .or_insert_with(|| Arc::new(JetLayout::build(nvars, order)))
        .clone())
}

/// Truncated Taylor expansion of a function at a point.
#[derive(Debug, Clone)]
pub struct Jet {
    pub layout: Arc<JetLayout>,
    pub coeffs: Vec<f64>,
}

impl Jet {
    pub fn constant(layout: Arc<JetLayout>, value: f64) -> Self {
        let mut coeffs = vec![0.0; layout.len()];
        coeffs[0] = value;
        Jet { layout, coeffs }
    }

    /// Seed jet for coordinate variable `var`.
    pub fn variable(layout: Arc<JetLayout>, value: f64, var: usize) -> Self {
        let mut jet = Jet::constant(layout.clone(), value);
        if layout.order >= 1 {
            let mut multi = vec![0u8; layout.nvars];
            multi[var] = 1;
            let pos = layout.position(&multi).expect("first-order slot");
            jet.coeffs[pos] = 1.0;
        }
        jet
    }

    pub fn value(&self) -> f64 {
        self.coeffs[0]
    }

    pub fn order(&self) -> usize {
        self.layout.order
    }

    /// Mixed partial derivative for the given multi-index (∂^α f = α!·c_α).
    pub fn deriv(&self, multi: &[u8]) -> f64 {
        let pos = self.layout.position(multi).expect("multi-index within order");
        self.coeffs[pos] * self.layout.factorial[pos]
    }

    /// First derivative in variable `v`.
    pub fn d1(&self, v: usize) -> f64 {
        let mut m = vec![0u8; self.layout.nvars];
        m[v] = 1;
        self.deriv(&m)
    }

    /// Second derivative ∂²/∂v∂w.
    pub fn d2(&self, v: usize, w: usize) -> f64 {
        let mut m = vec![0u8; self.layout.nvars];
        m[v] += 1;
        m[w] += 1;
        self.deriv(&m)
    }

    /// Third derivative ∂³/∂v∂w∂u.
    pub fn d3(&self, v: usize, w: usize, u: usize) -> f64 {
        let mut m = vec![0u8; self.layout.nvars];
        m[v] += 1;
        m[w] += 1;
        m[u] += 1;
        self.deriv(&m)
    }

    pub fn add(&self, other: &Jet) -> Jet {
        let mut out = self.clone();
        for (a, b) in out.coeffs.iter_mut().zip(&other.coeffs) {
            *a += b;
        }
        out
    }

    pub fn sub(&self, other: &Jet) -> Jet {
        let mut out = self.clone();
        for (a, b) in out.coeffs.iter_mut().zip(&other.coeffs) {
            *a -= b;
        }
        out
    }

    pub fn neg(&self) -> Jet {
        let mut out = self.clone();
        for a in out.coeffs.iter_mut() {
            *a = -*a;
        }
        out
    }

    pub fn scale(&self, k: f64) -> Jet {
        let mut out = self.clone();
        for a in out.coeffs.iter_mut() {
            *a *= k;
        }
        out
    }

    pub fn add_scalar(&self, k: f64) -> Jet {
        let mut out = self.clone();
        out.coeffs[0] += k;
        out
    }

    /// Truncated product via the precomputed index table.
    pub fn mul(&self, other: &Jet) -> Jet {
        debug_assert!(Arc::ptr_eq(&self.layout, &other.layout));
        let l = &self.layout;
        let mut out = vec![0.0; l.len()];
        for i in 0..l.len() {
            let a = self.coeffs[i];
            if a == 0.0 {
                continue;
            }
            let row = &l.prod[l.prod_row_start[i]..l.prod_row_start[i + 1]];
            for (j, &target) in row.iter().enumerate() {
                let b = other.coeffs[j];
                if b != 0.0 {
                    out[target as usize] += a * b;
                }
            }
        }
        Jet { layout: self.layout.clone(), coeffs: out }
    }

    /// Compose with a univariate series: `series[k]` must hold f⁽ᵏ⁾(u₀)/k!
    /// where u₀ is this jet's value. Evaluated by Horner on the nilpotent part.
    pub fn compose(&self, series: &[f64]) -> Jet {
        let order = self.layout.order;
        debug_assert!(series.len() >= order + 1);
        let mut hat = self.clone();
        hat.coeffs[0] = 0.0;
        let mut out = Jet::constant(self.layout.clone(), series[order]);
        for k in (0..order).rev() {
            out = out.mul(&hat);
            out.coeffs[0] += series[k];
        }
        out
    }

    /// Integer power by binary exponentiation (valid for any base sign).
    pub fn powi(&self, e: i64) -> Result<Jet> {
        if e < 0 {
            return self.powi(-e)?.recip();
        }
        let mut result = Jet::constant(self.layout.clone(), 1.0);
        let mut base = self.clone();
        let mut e = e as u64;
        while e > 0 {
            if e & 1 == 1 {
                result = result.mul(&base);
            }
            e >>= 1;
            if e > 0 {
                base = base.mul(&base);
            }
        }
        Ok(result)
    }

    pub fn recip(&self) -> Result<Jet> {
        let u0 = self.value();
        if u0 == 0.0 {
            return Err(Error::DivisionByZero);
        }
        let order = self.layout.order;
        let mut series = Vec::with_capacity(order + 1);
        let mut c = 1.0 / u0;
        for _ in 0..=order {
            series.push(c);
            c = -c / u0;
        }
        Ok(self.compose(&series))
    }

    pub fn div(&self, other: &Jet) -> Result<Jet> {
        Ok(self.mul(&other.recip()?))
    }

    pub fn sqrt(&self) -> Result<Jet> {
        let u0 = self.value();
        let order = self.layout.order;
        if u0 < 0.0 || (u0 == 0.0 && order >= 1) {
            return Err(Error::Domain { function: "sqrt", value: u0 });
        }
        if u0 == 0.0 {
            return Ok(Jet::constant(self.layout.clone(), 0.0));
        }
        // Generalized binomial: f(u) = u^{1/2}, f^{(k)}(u0)/k! = C(1/2, k) u0^{1/2 - k}.
        let mut series = Vec::with_capacity(order + 1);
        let mut binom = 1.0;
        let mut power = u0.sqrt();
        for k in 0..=order {
            series.push(binom * power);
            binom *= (0.5 - k as f64) / (k as f64 + 1.0);
            power /= u0;
        }
        Ok(self.compose(&series))
    }

    pub fn exp(&self) -> Jet {
        let order = self.layout.order;
        let e0 = self.value().exp();
        let mut series = Vec::with_capacity(order + 1);
        let mut c = e0;
        for k in 0..=order {
            series.push(c);
            c /= k as f64 + 1.0;
        }
        self.compose(&series)
    }

    pub fn ln(&self) -> Result<Jet> {
        let u0 = self.value();
        if u0 <= 0.0 {
            return Err(Error::Domain { function: "log", value: u0 });
        }
        let order = self.layout.order;
        let mut series = Vec::with_capacity(order + 1);
        series.push(u0.ln());
        // f^{(k)}(u0)/k! = (-1)^{k-1} / (k u0^k)
        let mut power = u0;
        for k in 1..=order {
            let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
            series.push(sign / (k as f64 * power));
            power *= u0;
        }
        Ok(self.compose(&series))
    }

    pub fn sin(&self) -> Jet {
        let order = self.layout.order;
        let (s, c) = self.value().sin_cos();
        let cycle = [s, c, -s, -c];
        let mut series = Vec::with_capacity(order + 1);
        let mut fact = 1.0;
        for k in 0..=order {
            if k > 0 {
                fact *= k as f64;
            }
            series.push(cycle[k % 4] / fact);
        }
        self.compose(&series)
    }

    pub fn cos(&self) -> Jet {
        let order = self.layout.order;
        let (s, c) = self.value().sin_cos();
        let cycle = [c, -s, -c, s];
        let mut series = Vec::with_capacity(order + 1);
        let mut fact = 1.0;
        for k in 0..=order {
            if k > 0 {
                fact *= k as f64;
            }
            series.push(cycle[k % 4] / fact);
        }
        self.compose(&series)
    }

    /// Jet of ∂^β f at the same point, truncated to order `order − |β|`.
    pub fn shift(&self, beta: &[u8]) -> Result<Jet> {
        let l = &self.layout;
        let db: usize = beta.iter().map(|&k| k as usize).sum();
        if db > l.order {
            return Err(Error::JetOrder { requested: db, max: l.order });
        }
        let target = layout(l.nvars, l.order - db)?;
        let mut coeffs = vec![0.0; target.len()];
        let mut sum = vec![0u8; l.nvars];
        for (i, c) in coeffs.iter_mut().enumerate() {
            let alpha = target.exponents(i);
            for v in 0..l.nvars {
                sum[v] = alpha[v] + beta[v];
            }
            let src = l.position(&sum).expect("shifted index within source order");
            // coefficient of ∂^β f at α is c_{α+β} (α+β)!/α!
            *c = self.coeffs[src] * l.factorial[src] / target.factorial[i];
        }
        Ok(Jet { layout: target, coeffs })
    }

    /// Projection onto the first `keep` variables: retains the coefficients
    /// whose multi-index is supported there, i.e. the Taylor expansion in
    /// those variables with the rest held fixed.
    pub fn project_prefix(&self, keep: usize) -> Result<Jet> {
        let l = &self.layout;
        let target = layout(keep, l.order)?;
        let mut coeffs = vec![0.0; target.len()];
        let mut padded = vec![0u8; l.nvars];
        for (i, c) in coeffs.iter_mut().enumerate() {
            padded[..keep].copy_from_slice(target.exponents(i));
            let src = l.position(&padded).expect("prefix index in source layout");
            *c = self.coeffs[src];
        }
        Ok(Jet { layout: target, coeffs })
    }

    /// Inverse of [`Jet::project_prefix`]: embeds a jet over `keep` variables
    /// into a layout over `total` variables (zero in the new slots).
    pub fn embed_prefix(&self, total: usize) -> Result<Jet> {
        let l = &self.layout;
        let target = layout(total, l.order)?;
        let mut coeffs = vec![0.0; target.len()];
        let mut padded = vec![0u8; total];
        for (i, &c) in self.coeffs.iter().enumerate() {
            padded[..l.nvars].copy_from_slice(l.exponents(i));
            let dst = target.position(&padded).expect("embedded index in target layout");
            coeffs[dst] = c;
        }
        Ok(Jet { layout: target, coeffs })
    }

    /// Restriction of this jet to a lower order (drops high-degree terms).
    pub fn truncate(&self, order: usize) -> Result<Jet> {
        let target = layout(self.layout.nvars, order.min(self.layout.order))?;
        let mut coeffs = vec![0.0; target.len()];
        for (i, c) in coeffs.iter_mut().enumerate() {
            let pos = self.layout.position(target.exponents(i)).unwrap();
            *c = self.coeffs[pos];
        }
        Ok(Jet { layout: target, coeffs })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn l(nvars: usize, order: usize) -> Arc<JetLayout> {
        layout(nvars, order).unwrap()
    }

    #[test]
    fn layout_sizes() {
        assert_eq!(l(2, 2).len(), 6); // 1 + 2 + 3
        assert_eq!(l(6, 4).len(), 210); // C(10,4)
        assert_eq!(l(4, 3).len(), 35);
    }

    #[test]
    fn product_of_variables() {
        let lay = l(2, 2);
        let x = Jet::variable(lay.clone(), 3.0, 0);
        let y = Jet::variable(lay.clone(), 5.0, 1);
        let p = x.mul(&y);
        assert_eq!(p.value(), 15.0);
        assert_eq!(p.d1(0), 5.0);
        assert_eq!(p.d1(1), 3.0);
        assert_eq!(p.d2(0, 1), 1.0);
        assert_eq!(p.d2(0, 0), 0.0);
    }

    #[test]
    fn exp_series_univariate() {
        let lay = l(1, 4);
        let x = Jet::variable(lay, 0.0, 0);
        let e = x.exp();
        for (k, expect) in [1.0, 1.0, 0.5, 1.0 / 6.0, 1.0 / 24.0].iter().enumerate() {
            assert!((e.coeffs[k] - expect).abs() < 1e-14, "k={k}");
        }
    }

    #[test]
    fn sqrt_norm_second_order() {
        // f = sqrt(x^2 + y^2) at (3,4): f = 5, f_x = 0.6, f_xx = 16/125.
        let lay = l(2, 2);
        let x = Jet::variable(lay.clone(), 3.0, 0);
        let y = Jet::variable(lay.clone(), 4.0, 1);
        let f = x.mul(&x).add(&y.mul(&y)).sqrt().unwrap();
        assert!((f.value() - 5.0).abs() < 1e-14);
        assert!((f.d1(0) - 0.6).abs() < 1e-14);
        assert!((f.d2(0, 0) - 16.0 / 125.0).abs() < 1e-14);
    }

    #[test]
    fn recip_errors_at_zero() {
        let lay = l(1, 2);
        let x = Jet::variable(lay, 0.0, 0);
        assert!(matches!(x.recip(), Err(Error::DivisionByZero)));
    }

    #[test]
    fn shift_matches_direct_derivative() {
        // f = x^2 y, ∂f/∂x = 2xy as a jet of order 1.
        let lay = l(2, 2);
        let x = Jet::variable(lay.clone(), 2.0, 0);
        let y = Jet::variable(lay.clone(), 7.0, 1);
        let f = x.mul(&x).mul(&y);
        let fx = f.shift(&[1, 0]).unwrap();
        assert_eq!(fx.value(), 28.0); // 2xy
        assert_eq!(fx.d1(0), 14.0); // 2y
        assert_eq!(fx.d1(1), 4.0); // 2x
    }

    #[test]
    fn truncation_consistency() {
        let lay = l(3, 3);
        let x = Jet::variable(lay.clone(), 1.2, 0);
        let y = Jet::variable(lay.clone(), -0.7, 1);
        let f = x.mul(&y).exp();
        let t = f.truncate(2).unwrap();
        let direct = {
            let lay2 = l(3, 2);
            let x = Jet::variable(lay2.clone(), 1.2, 0);
            let y = Jet::variable(lay2.clone(), -0.7, 1);
            x.mul(&y).exp()
        };
        for (a, b) in t.coeffs.iter().zip(&direct.coeffs) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn project_and_embed_round_trip() {
        let lay = l(4, 2);
        let x = Jet::variable(lay.clone(), 1.5, 0);
        let y = Jet::variable(lay.clone(), -0.5, 2);
        let f = x.mul(&x).add(&x.mul(&y)).add(&y.mul(&y));
        let proj = f.project_prefix(2).unwrap();
        // x-part of x² + xy + y² at fixed y: x² + xy; ∂x = 2x + y, ∂xx = 2
        assert!((proj.value() - f.value()).abs() < 1e-15);
        assert!((proj.d1(0) - (2.0 * 1.5 + -0.5)).abs() < 1e-15);
        assert!((proj.d2(0, 0) - 2.0).abs() < 1e-15);
        let back = proj.embed_prefix(4).unwrap();
        assert_eq!(back.d1(0), proj.d1(0));
        assert_eq!(back.d1(2), 0.0);
    }

    #[test]
    fn powi_negative_base() {
        let lay = l(1, 3);
        let x = Jet::variable(lay, -2.0, 0);
        let p = x.powi(3).unwrap();
        assert_eq!(p.value(), -8.0);
        assert_eq!(p.d1(0), 12.0);
    }
}
