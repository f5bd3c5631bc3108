//! The perturbation coefficient `b(x,z)`: declarative specs, validation,
//! envelope estimation and the parabolic rescaling `b^{(λ)}`.

use serde::{Deserialize, Serialize};

use crate::error::NlError;

/// Global model parameters: spatial dimension and stable index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub d: usize,
    pub beta: f64,
}

impl ModelParams {
    pub fn new(d: usize, beta: f64) -> Result<Self, NlError> {
        if d < 1 {
            return Err(NlError::config("dimension d must be >= 1"));
        }
        if !(beta > 0.0 && beta < 2.0) {
            return Err(NlError::config(format!("beta must lie in (0,2), got {beta}")));
        }
        Ok(ModelParams { d, beta })
    }

    /// Surface area of the unit sphere in R^d (2 for d=1, 2π for d=2).
    pub fn sphere_surface(&self) -> f64 {
        match self.d {
            1 => 2.0,
            2 => 2.0 * std::f64::consts::PI,
            d => {
                let hd = d as f64 / 2.0;
                2.0 * std::f64::consts::PI.powf(hd) / statrs::function::gamma::gamma(hd)
            }
        }
    }
}

/// Radial profile for the `product` family.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum RadialProfile {
    /// `ρ(r) = 1_{r ≤ λ}`
    Indicator { lambda: f64 },
    /// `ρ(r) = exp(-r²/2σ²)`
    Gauss { sigma: f64 },
}

impl RadialProfile {
    fn eval(&self, r: f64) -> f64 {
        match self {
            RadialProfile::Indicator { lambda } => {
                if r <= *lambda {
                    1.0
                } else {
                    0.0
                }
            }
            RadialProfile::Gauss { sigma } => (-r * r / (2.0 * sigma * sigma)).exp(),
        }
    }

    fn support_radius(&self) -> f64 {
        match self {
            RadialProfile::Indicator { lambda } => *lambda,
            RadialProfile::Gauss { .. } => f64::INFINITY,
        }
    }
}

/// Declarative coefficient description. JSON field names are part of the
/// file contract: `{"family": ..., "params": {...}, "d": ..., "beta": ...}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoefficientSpec {
    #[serde(flatten)]
    pub family: Family,
    pub d: usize,
    pub beta: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "family", content = "params", rename_all = "lowercase")]
pub enum Family {
    Zero,
    Constant {
        c: f64,
    },
    /// `b(x,z) = m · 1_{λ_inner ≤ |z| ≤ λ}`
    Indicator {
        m: f64,
        lambda: f64,
        #[serde(default)]
        lambda_inner: f64,
    },
    /// `b(x,z) = (a0 + a1·cos(k·x₁)) · ρ(|z|)`
    Product {
        a0: f64,
        a1: f64,
        k: f64,
        rho: RadialProfile,
    },
    /// d=1 only: multilinear interpolation on (x,z) lattice nodes, 0 outside.
    Table {
        x_nodes: Vec<f64>,
        z_nodes: Vec<f64>,
        values: Vec<Vec<f64>>,
    },
}

impl CoefficientSpec {
    pub fn from_json(s: &str) -> Result<Self, NlError> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("spec serializes")
    }

    /// Hex SHA-256 of the canonical JSON document.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(self.canonical_json().as_bytes());
        let out = h.finalize();
        out.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone)]
enum CoefKind {
    Zero,
    Constant(f64),
    Indicator {
        m: f64,
        lambda: f64,
        lambda_inner: f64,
    },
    Product {
        a0: f64,
        a1: f64,
        k: f64,
        rho: RadialProfile,
    },
    Table {
        x_nodes: Vec<f64>,
        z_nodes: Vec<f64>,
        values: Vec<Vec<f64>>,
    },
    Scaled {
        base: std::sync::Arc<Coefficient>,
        lambda: f64,
    },
}

/// Validated, immutable coefficient. Safe to share across workers.
#[derive(Debug, Clone)]
pub struct Coefficient {
    pub params: ModelParams,
    kind: CoefKind,
    pub sup_norm: f64,
    /// `m_b = inf_x essinf_z b`
    pub m_b: f64,
    /// `M_b = esssup b`
    pub upper_env: f64,
    /// radius beyond which `b(x,z) = 0`; `+∞` when unbounded support
    pub support_radius: f64,
    pub nonneg: bool,
    pub translation_invariant: bool,
    /// set when an asymmetric user spec was symmetrized
    pub symmetrized: bool,
    hash: String,
}

fn interp1(nodes: &[f64], vals: impl Fn(usize) -> f64, x: f64) -> f64 {
    let n = nodes.len();
    if n == 0 || x < nodes[0] || x > nodes[n - 1] {
        return 0.0;
    }
    if n == 1 {
        return vals(0);
    }
    let j = match nodes.binary_search_by(|v| v.partial_cmp(&x).unwrap()) {
        Ok(j) => return vals(j),
        Err(j) => j,
    };
    let (a, b) = (nodes[j - 1], nodes[j]);
    let w = (x - a) / (b - a);
    vals(j - 1) * (1.0 - w) + vals(j) * w
}

impl Coefficient {
    /// Raw (possibly asymmetric) evaluation of the underlying spec.
    fn eval_raw(&self, x: &[f64], z: &[f64]) -> f64 {
        let r = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        match &self.kind {
            CoefKind::Zero => 0.0,
            CoefKind::Constant(c) => *c,
            CoefKind::Indicator {
                m,
                lambda,
                lambda_inner,
            } => {
                if r >= *lambda_inner && r <= *lambda {
                    *m
                } else {
                    0.0
                }
            }
            CoefKind::Product { a0, a1, k, rho } => (a0 + a1 * (k * x[0]).cos()) * rho.eval(r),
            CoefKind::Table {
                x_nodes,
                z_nodes,
                values,
            } => interp1(x_nodes, |i| interp1(z_nodes, |j| values[i][j], z[0]), x[0]),
            CoefKind::Scaled { base, lambda } => {
                let s = lambda.sqrt();
                let xs: Vec<f64> = x.iter().map(|v| v / s).collect();
                let zs: Vec<f64> = z.iter().map(|v| v / s).collect();
                lambda.powf(base.params.beta / 2.0 - 1.0) * base.eval(&xs, &zs)
            }
        }
    }

    /// `b(x,z)`, symmetrized in `z`.
    pub fn eval(&self, x: &[f64], z: &[f64]) -> f64 {
        if self.symmetrized {
            let neg: Vec<f64> = z.iter().map(|v| -v).collect();
            0.5 * (self.eval_raw(x, z) + self.eval_raw(x, &neg))
        } else {
            self.eval_raw(x, z)
        }
    }

    /// Radial evaluation `b(x, r·e)`; exact for all supported families,
    /// which are radial in `z` (the d=1 table is handled through `eval`).
    pub fn eval_radial(&self, x: &[f64], r: f64) -> f64 {
        match &self.kind {
            CoefKind::Table { .. } => {
                let z = [r];
                self.eval(x, &z)
            }
            CoefKind::Scaled { base, lambda } => {
                let s = lambda.sqrt();
                let xs: Vec<f64> = x.iter().map(|v| v / s).collect();
                lambda.powf(base.params.beta / 2.0 - 1.0) * base.eval_radial(&xs, r / s)
            }
            _ => {
                let mut z = vec![0.0; self.params.d];
                z[0] = r;
                self.eval_raw(x, &z)
            }
        }
    }

    /// `sup_x b(x, r·e)` (radial upper envelope), used for majorants and
    /// tail corrections.
    pub fn bbar(&self, r: f64) -> f64 {
        match &self.kind {
            CoefKind::Zero => 0.0,
            CoefKind::Constant(c) => c.abs(),
            CoefKind::Indicator {
                m,
                lambda,
                lambda_inner,
            } => {
                if r >= *lambda_inner && r <= *lambda {
                    m.abs()
                } else {
                    0.0
                }
            }
            CoefKind::Product { a0, a1, rho, .. } => (a0.abs() + a1.abs()) * rho.eval(r),
            CoefKind::Table {
                x_nodes,
                z_nodes,
                values,
            } => {
                let mut m = 0.0f64;
                for i in 0..x_nodes.len() {
                    let v = 0.5
                        * (interp1(z_nodes, |j| values[i][j], r)
                            + interp1(z_nodes, |j| values[i][j], -r))
                        .abs();
                    m = m.max(v);
                }
                m
            }
            CoefKind::Scaled { base, lambda } => {
                lambda.powf(base.params.beta / 2.0 - 1.0) * base.bbar(r / lambda.sqrt())
            }
        }
    }

    /// `∫_{|z| > R} b̄(z)/|z|^{d+β} dz` — first-order mass that a single jump
    /// carries beyond radius `R`.
    pub fn tail_mass(&self, r_cut: f64) -> f64 {
        let beta = self.params.beta;
        let omega = self.params.sphere_surface();
        if r_cut >= self.support_radius {
            return 0.0;
        }
        match &self.kind {
            CoefKind::Zero => 0.0,
            CoefKind::Constant(c) => c.abs() * omega * r_cut.powf(-beta) / beta,
            CoefKind::Indicator { m, lambda, .. } => {
                m.abs() * omega * (r_cut.powf(-beta) - lambda.powf(-beta)) / beta
            }
            CoefKind::Scaled { base, lambda } => {
                lambda.powf(base.params.beta / 2.0 - 1.0)
                    * lambda.powf(-beta / 2.0)
                    * base.tail_mass(r_cut / lambda.sqrt())
            }
            _ => {
                // generic radial quadrature on geometric panels
                let mut total = 0.0;
                let mut lo = r_cut;
                let hi_cap = if self.support_radius.is_finite() {
                    self.support_radius
                } else {
                    r_cut * 1e6
                };
                while lo < hi_cap {
                    let hi = (lo * 1.3).min(hi_cap);
                    total += gl8(lo, hi, |r| {
                        self.bbar(r) * r.powf(-1.0 - beta) * r.powf(self.params.d as f64 - 1.0)
                    });
                    lo = hi;
                }
                omega * total
            }
        }
    }

    pub fn content_hash(&self) -> &str {
        &self.hash
    }

    /// Radii where `b(x, r·e)` is discontinuous or kinked; quadratures
    /// place panel boundaries here.
    pub fn radial_breakpoints(&self) -> Vec<f64> {
        match &self.kind {
            CoefKind::Zero | CoefKind::Constant(_) => vec![],
            CoefKind::Indicator {
                lambda,
                lambda_inner,
                ..
            } => {
                if *lambda_inner > 0.0 {
                    vec![*lambda_inner, *lambda]
                } else {
                    vec![*lambda]
                }
            }
            CoefKind::Product { rho, .. } => match rho {
                RadialProfile::Indicator { lambda } => vec![*lambda],
                RadialProfile::Gauss { .. } => vec![],
            },
            CoefKind::Table { z_nodes, .. } => {
                let mut v: Vec<f64> = z_nodes.iter().map(|z| z.abs()).filter(|z| *z > 0.0).collect();
                v.sort_by(|a, b| a.partial_cmp(b).unwrap());
                v.dedup_by(|a, b| (*a - *b).abs() < 1e-14);
                v
            }
            CoefKind::Scaled { base, lambda } => {
                let s = lambda.sqrt();
                base.radial_breakpoints().iter().map(|r| r * s).collect()
            }
        }
    }
}

use crate::kernels::gl8;

/// Build a validated coefficient from its declarative spec. Asymmetric
/// table specs are symmetrized (`b ← (b(x,z)+b(x,-z))/2`) with a flag.
pub fn make_coefficient(spec: &CoefficientSpec) -> Result<Coefficient, NlError> {
    make_coefficient_with(spec, 100_000)
}

pub fn make_coefficient_with(
    spec: &CoefficientSpec,
    env_samples: usize,
) -> Result<Coefficient, NlError> {
    let params = ModelParams::new(spec.d, spec.beta)?;
    let hash = spec.content_hash();
    let (kind, translation_invariant) = match &spec.family {
        Family::Zero => (CoefKind::Zero, true),
        Family::Constant { c } => {
            if !c.is_finite() {
                return Err(NlError::config("constant coefficient must be finite"));
            }
            (CoefKind::Constant(*c), true)
        }
        Family::Indicator {
            m,
            lambda,
            lambda_inner,
        } => {
            if !(m.is_finite() && *lambda > 0.0 && *lambda_inner >= 0.0 && lambda_inner < lambda) {
                return Err(NlError::config("indicator requires 0 <= lambda_inner < lambda"));
            }
            (
                CoefKind::Indicator {
                    m: *m,
                    lambda: *lambda,
                    lambda_inner: *lambda_inner,
                },
                true,
            )
        }
        Family::Product { a0, a1, k, rho } => {
            if !(a0.is_finite() && a1.is_finite() && k.is_finite()) {
                return Err(NlError::config("product coefficients must be finite"));
            }
            (
                CoefKind::Product {
                    a0: *a0,
                    a1: *a1,
                    k: *k,
                    rho: rho.clone(),
                },
                *a1 == 0.0,
            )
        }
        Family::Table {
            x_nodes,
            z_nodes,
            values,
        } => {
            if spec.d != 1 {
                return Err(NlError::config("table coefficients are d=1 only"));
            }
            if values.len() != x_nodes.len()
                || values.iter().any(|r| r.len() != z_nodes.len())
                || values.iter().flatten().any(|v| !v.is_finite())
            {
                return Err(NlError::config("table shape mismatch or non-finite entries"));
            }
            if !is_sorted(x_nodes) || !is_sorted(z_nodes) {
                return Err(NlError::config("table nodes must be strictly increasing"));
            }
            (
                CoefKind::Table {
                    x_nodes: x_nodes.clone(),
                    z_nodes: z_nodes.clone(),
                    values: values.clone(),
                },
                x_nodes.len() <= 1,
            )
        }
    };

    let support_radius = match &kind {
        CoefKind::Zero => 0.0,
        CoefKind::Constant(_) => f64::INFINITY,
        CoefKind::Indicator { lambda, .. } => *lambda,
        CoefKind::Product { rho, .. } => rho.support_radius(),
        CoefKind::Table { z_nodes, .. } => z_nodes
            .iter()
            .fold(0.0f64, |m, z| m.max(z.abs())),
        CoefKind::Scaled { .. } => unreachable!(),
    };

    let mut coef = Coefficient {
        params,
        kind,
        sup_norm: 0.0,
        m_b: 0.0,
        upper_env: 0.0,
        support_radius,
        nonneg: false,
        translation_invariant,
        symmetrized: false,
        hash,
    };

    // detect asymmetry (only the table family can be asymmetric in z)
    if x_asymmetry(&coef) {
        coef.symmetrized = true;
        eprintln!("warning: asymmetric coefficient spec symmetrized: b <- (b(x,z)+b(x,-z))/2");
    }

    let (sup, lo, hi) = estimate_envelopes(&coef, env_samples);
    coef.sup_norm = sup;
    coef.upper_env = hi;
    // essinf over all z in R^d: a coefficient vanishing at infinity (finite
    // support, decaying profile, table) has essinf <= 0
    coef.m_b = match &coef.kind {
        CoefKind::Constant(c) => *c,
        _ => lo.min(0.0),
    };
    coef.nonneg = lo >= -1e-14 && coef.m_b >= -1e-14;
    Ok(coef)
}

fn x_asymmetry(coef: &Coefficient) -> bool {
    if let CoefKind::Table { x_nodes, z_nodes, .. } = &coef.kind {
        for &x in x_nodes {
            for &z in z_nodes {
                if (coef.eval_raw(&[x], &[z]) - coef.eval_raw(&[x], &[-z])).abs() > 1e-12 {
                    return true;
                }
            }
        }
    }
    false
}

fn is_sorted(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[0] < w[1])
}

/// min/max of b over a deterministic low-discrepancy sample of the declared
/// support box (a bound certificate, not a proof).
fn estimate_envelopes(coef: &Coefficient, n: usize) -> (f64, f64, f64) {
    match &coef.kind {
        CoefKind::Zero => (0.0, 0.0, 0.0),
        CoefKind::Constant(c) => (c.abs(), *c, *c),
        CoefKind::Indicator { m, .. } => (m.abs(), m.min(0.0).min(*m), m.max(0.0)),
        CoefKind::Scaled { base, lambda } => {
            let f = lambda.powf(base.params.beta / 2.0 - 1.0);
            (f * base.sup_norm, f * base.m_b, f * base.upper_env)
        }
        _ => {
            let d = coef.params.d;
            // x box: one period for product, node span for table, else unit
            let (x_lo, x_hi) = match &coef.kind {
                CoefKind::Product { k, .. } => {
                    let p = if *k != 0.0 { 2.0 * std::f64::consts::PI / k.abs() } else { 1.0 };
                    (-p / 2.0, p / 2.0)
                }
                CoefKind::Table { x_nodes, .. } => (x_nodes[0], *x_nodes.last().unwrap()),
                _ => (-1.0, 1.0),
            };
            let zr = if coef.support_radius.is_finite() {
                coef.support_radius
            } else {
                match &coef.kind {
                    CoefKind::Product { rho: RadialProfile::Gauss { sigma }, .. } => 8.0 * sigma,
                    _ => 10.0,
                }
            };
            // additive Kronecker sequence with square-root irrationals
            const ALPHAS: [f64; 6] = [
                0.6180339887498949, // 1/phi
                0.4142135623730951, // sqrt2-1
                0.7320508075688772, // sqrt3-1
                0.2360679774997896, // sqrt5-2
                0.6457513110645906, // sqrt7-2
                0.3166247903553998, // sqrt11-3
            ];
            let mut sup: f64 = 0.0;
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            let mut x = vec![0.0; d];
            let mut z = vec![0.0; d];
            for i in 0..n {
                let t = (i + 1) as f64;
                for a in 0..d {
                    let ux = (t * ALPHAS[a]).fract();
                    let uz = (t * ALPHAS[d + a]).fract();
                    x[a] = x_lo + (x_hi - x_lo) * ux;
                    z[a] = -zr + 2.0 * zr * uz;
                }
                let v = coef.eval(&x, &z);
                sup = sup.max(v.abs());
                lo = lo.min(v);
                hi = hi.max(v);
            }
            (sup, lo, hi)
        }
    }
}

/// Parabolic rescaling `b^{(λ)}(x,z) = λ^{β/2-1} b(x/√λ, z/√λ)`.
pub fn rescale(c: &Coefficient, lambda: f64) -> Coefficient {
    assert!(lambda > 0.0, "rescale requires lambda > 0");
    let f = lambda.powf(c.params.beta / 2.0 - 1.0);
    let s = lambda.sqrt();
    Coefficient {
        params: c.params,
        sup_norm: f * c.sup_norm,
        m_b: f * c.m_b,
        upper_env: f * c.upper_env,
        support_radius: c.support_radius * s,
        nonneg: c.nonneg,
        translation_invariant: c.translation_invariant,
        symmetrized: c.symmetrized,
        hash: format!("{}:lambda={lambda:.12e}", c.hash),
        kind: CoefKind::Scaled {
            base: std::sync::Arc::new(c.clone()),
            lambda,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn spec_json(s: &str) -> Coefficient {
        make_coefficient(&CoefficientSpec::from_json(s).unwrap()).unwrap()
    }

    #[test]
    fn zero_constant_indicator_examples() {
        let z = spec_json(r#"{"family":"zero","d":1,"beta":1.0}"#);
        assert_eq!(z.sup_norm, 0.0);
        assert_eq!(z.m_b, 0.0);
        assert_eq!(z.upper_env, 0.0);

        let c = spec_json(r#"{"family":"constant","params":{"c":0.3},"d":1,"beta":1.0}"#);
        assert_relative_eq!(c.sup_norm, 0.3);
        assert!(c.support_radius.is_infinite());
        assert!(c.nonneg);

        let i = spec_json(
            r#"{"family":"indicator","params":{"m":1.0,"lambda":1.0},"d":1,"beta":1.0}"#,
        );
        assert_relative_eq!(i.upper_env, 1.0);
        assert_relative_eq!(i.support_radius, 1.0);
        assert_relative_eq!(i.eval(&[0.3], &[0.5]), 1.0);
        assert_relative_eq!(i.eval(&[0.3], &[1.5]), 0.0);
        assert_eq!(i.m_b, 0.0);
    }

    #[test]
    fn rejects_bad_beta() {
        for beta in [0.0, 2.0, -0.5, 2.5] {
            let s = format!(r#"{{"family":"zero","d":1,"beta":{beta}}}"#);
            assert!(make_coefficient(&CoefficientSpec::from_json(&s).unwrap()).is_err());
        }
    }

    #[test]
    fn rejects_malformed_table() {
        // overflowing literal rejected at parse
        let s = r#"{"family":"table","params":{"x_nodes":[0.0],"z_nodes":[-1.0,1.0],"values":[[1.0,1e400]]},"d":1,"beta":1.0}"#;
        assert!(CoefficientSpec::from_json(s).is_err());
        // shape mismatch rejected at validation
        let s = r#"{"family":"table","params":{"x_nodes":[0.0],"z_nodes":[-1.0,1.0],"values":[[1.0]]},"d":1,"beta":1.0}"#;
        assert!(make_coefficient(&CoefficientSpec::from_json(s).unwrap()).is_err());
        // unsorted nodes rejected
        let s = r#"{"family":"table","params":{"x_nodes":[0.0],"z_nodes":[1.0,-1.0],"values":[[1.0,1.0]]},"d":1,"beta":1.0}"#;
        assert!(make_coefficient(&CoefficientSpec::from_json(s).unwrap()).is_err());
    }

    #[test]
    fn asymmetric_table_symmetrized() {
        let s = r#"{"family":"table","params":{"x_nodes":[0.0],"z_nodes":[-1.0,0.0,1.0],"values":[[0.2,0.5,0.8]]},"d":1,"beta":1.0}"#;
        let c = spec_json(s);
        assert!(c.symmetrized);
        assert_relative_eq!(c.eval(&[0.0], &[1.0]), 0.5, max_relative = 1e-12);
        assert_relative_eq!(
            c.eval(&[0.0], &[0.4]),
            c.eval(&[0.0], &[-0.4]),
            max_relative = 1e-12
        );
    }

    #[test]
    fn rescale_examples() {
        let one = spec_json(r#"{"family":"constant","params":{"c":1.0},"d":1,"beta":1.0}"#);
        let id = rescale(&one, 1.0);
        assert_relative_eq!(id.eval(&[0.2], &[0.7]), 1.0, max_relative = 1e-12);

        let s4 = rescale(&one, 4.0);
        assert_relative_eq!(s4.sup_norm, 0.5, max_relative = 1e-12);
        assert_relative_eq!(s4.eval(&[0.2], &[0.7]), 0.5, max_relative = 1e-12);

        let ind = spec_json(
            r#"{"family":"indicator","params":{"m":1.0,"lambda":1.0},"d":1,"beta":1.0}"#,
        );
        let si = rescale(&ind, 4.0);
        assert_relative_eq!(si.eval(&[0.0], &[1.9]), 0.5, max_relative = 1e-12);
        assert_relative_eq!(si.eval(&[0.0], &[2.1]), 0.0, max_relative = 1e-12);
        assert_relative_eq!(si.support_radius, 2.0, max_relative = 1e-12);
    }

    #[test]
    fn tail_mass_closed_forms() {
        let i = spec_json(
            r#"{"family":"indicator","params":{"m":1.0,"lambda":1.0},"d":1,"beta":1.0}"#,
        );
        // 2 ∫_{0.05}^{1} z^{-2} dz = 38
        assert_relative_eq!(i.tail_mass(0.05), 38.0, max_relative = 1e-12);
        assert_eq!(i.tail_mass(1.5), 0.0);

        let c = spec_json(r#"{"family":"constant","params":{"c":0.5},"d":1,"beta":1.0}"#);
        assert_relative_eq!(c.tail_mass(4.0), 0.5 * 2.0 / 4.0, max_relative = 1e-12);
    }

    proptest! {
        #[test]
        fn rescale_composes(l1 in 0.2f64..5.0, l2 in 0.2f64..5.0,
                            x in -2.0f64..2.0, z in -3.0f64..3.0) {
            let c = spec_json(
                r#"{"family":"product","params":{"a0":0.5,"a1":0.2,"k":1.3,"rho":{"kind":"gauss","sigma":1.0}},"d":1,"beta":1.0}"#,
            );
            let a = rescale(&rescale(&c, l1), l2);
            let b = rescale(&c, l1 * l2);
            let va = a.eval(&[x], &[z]);
            let vb = b.eval(&[x], &[z]);
            prop_assert!((va - vb).abs() <= 1e-12 * (1.0 + va.abs().max(vb.abs())));
        }

        #[test]
        fn rescale_preserves_sign(l in 0.2f64..5.0, x in -2.0f64..2.0, z in -3.0f64..3.0) {
            let c = spec_json(
                r#"{"family":"indicator","params":{"m":-0.2,"lambda":2.0,"lambda_inner":1.0},"d":1,"beta":1.0}"#,
            );
            let s = rescale(&c, l);
            let v0 = c.eval(&[x / l.sqrt()], &[z / l.sqrt()]);
            let v1 = s.eval(&[x], &[z]);
            prop_assert!(v0.signum() * v1.signum() >= 0.0 || v0 == 0.0 || v1 == 0.0);
        }
    }

    #[test]
    fn product_envelopes_sampled() {
        let c = spec_json(
            r#"{"family":"product","params":{"a0":0.5,"a1":0.2,"k":2.0,"rho":{"kind":"indicator","lambda":1.0}},"d":1,"beta":1.0}"#,
        );
        assert!((c.upper_env - 0.7).abs() < 1e-3);
        assert!(c.m_b <= 0.0); // vanishes outside the support
        assert!(c.nonneg);
        assert!(!c.translation_invariant);
    }
}
