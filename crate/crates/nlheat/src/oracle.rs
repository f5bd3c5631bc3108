//! Fourier-side reference densities.
//!
//! For a translation-invariant coefficient the generator is a Fourier
//! multiplier with symbol `-ψ(ξ)`, `ψ(ξ) = |ξ|² + ψ_J(ξ)` and
//!
//! `ψ_J(ξ) = ∫ (1 - cos ξ·z) b(z) |z|^{-d-β} dz`,
//!
//! so the kernel is the inverse transform of `e^{-tψ}`. This path shares
//! nothing with the series construction — no lattice, no σ-quadrature —
//! which makes it an independent oracle for cross-checks.

use std::sync::Arc;

use rayon::prelude::*;

use crate::coefficients::{Coefficient, ModelParams};
use crate::error::NlError;
use crate::kernels::special::bessel_j0;
use crate::kernels::{gl8, stable_normalizer};

/// Jump part of the symbol, as a radial function of `|ξ|`.
#[derive(Clone)]
pub enum JumpSymbol {
    /// pure diffusion
    None,
    /// `a·|ξ|^β` — the kernel `b ≡ a·𝒜(d,-β)`
    Stable { a: f64 },
    /// indicator band `b = m·1_{λ_inner ≤ |z| ≤ λ}` (numerically integrated)
    Truncated {
        m: f64,
        lambda: f64,
        lambda_inner: f64,
    },
    /// arbitrary translation-invariant coefficient (numerically integrated)
    FromCoefficient(Arc<Coefficient>),
    /// precomputed table on a uniform ξ-grid (power-law extrapolated)
    Tabulated { step: f64, values: Arc<Vec<f64>> },
}

#[derive(Clone)]
pub struct LevySymbol {
    pub params: ModelParams,
    pub jump: JumpSymbol,
    /// include the Laplacian part `ξ²` (off for pure-jump references)
    pub diffusion: bool,
}

impl LevySymbol {
    pub fn diffusion(params: ModelParams) -> Self {
        LevySymbol {
            params,
            jump: JumpSymbol::None,
            diffusion: true,
        }
    }

    pub fn stable(params: ModelParams, a: f64) -> Self {
        assert!(a >= 0.0);
        LevySymbol {
            params,
            jump: JumpSymbol::Stable { a },
            diffusion: true,
        }
    }

    pub fn truncated(params: ModelParams, m: f64, lambda: f64, lambda_inner: f64) -> Self {
        assert!(lambda > lambda_inner && lambda_inner >= 0.0);
        LevySymbol {
            params,
            jump: JumpSymbol::Truncated {
                m,
                lambda,
                lambda_inner,
            },
            diffusion: true,
        }
    }

    /// Symbol of a translation-invariant coefficient; the jump integral is
    /// evaluated numerically per frequency.
    pub fn from_coefficient(coef: &Arc<Coefficient>) -> Result<Self, NlError> {
        if !coef.translation_invariant {
            return Err(NlError::config(
                "a Fourier symbol requires a translation-invariant coefficient",
            ));
        }
        Ok(LevySymbol {
            params: coef.params,
            jump: JumpSymbol::FromCoefficient(Arc::clone(coef)),
            diffusion: true,
        })
    }

    /// Kernel of the truncated fractional Laplacian alone: jump kernel
    /// `𝒜(d,-β)·1_{|z|≤λ}/|z|^{d+β}`, no diffusion part.
    pub fn pure_jump_truncated(params: ModelParams, lambda: f64) -> Self {
        let m = stable_normalizer(&params);
        LevySymbol {
            params,
            jump: JumpSymbol::Truncated {
                m,
                lambda,
                lambda_inner: 0.0,
            },
            diffusion: false,
        }
    }

    /// `ψ(|ξ|) = ξ² + ψ_J(|ξ|)` (the `ξ²` only when diffusion is on).
    pub fn psi(&self, xi: f64) -> f64 {
        let xi = xi.abs();
        let diff = if self.diffusion { xi * xi } else { 0.0 };
        diff + self.psi_jump(xi)
    }

    pub fn psi_jump(&self, xi: f64) -> f64 {
        let xi = xi.abs();
        if xi == 0.0 {
            return 0.0;
        }
        match &self.jump {
            JumpSymbol::None => 0.0,
            JumpSymbol::Stable { a } => a * xi.powf(self.params.beta),
            JumpSymbol::Truncated {
                m,
                lambda,
                lambda_inner,
            } => {
                let c = band_coefficient(self.params, *m, *lambda, *lambda_inner);
                jump_symbol_radial(&c, self.params, xi)
            }
            JumpSymbol::FromCoefficient(c) => jump_symbol_radial(c, self.params, xi),
            JumpSymbol::Tabulated { step, values } => {
                let pos = xi / step;
                let n = values.len();
                if pos >= (n - 1) as f64 {
                    // ψ_J grows like ξ^β once past the kernel's inner scale
                    let end = (n - 1) as f64 * step;
                    return values[n - 1] * (xi / end).powf(self.params.beta);
                }
                let j = pos.floor() as usize;
                let f = pos - j as f64;
                values[j] * (1.0 - f) + values[j + 1] * f
            }
        }
    }

    /// Tabulate the jump symbol densely enough that density inversion at
    /// any time `≥ t_min` stays inside the table.
    pub fn tabulated_for_time(&self, t_min: f64) -> LevySymbol {
        let mut xi_max = (45.0 / t_min).sqrt().max(1.0);
        while t_min * self.psi(xi_max) < 45.0 && xi_max < 1e8 {
            xi_max *= 2.0;
        }
        self.with_tabulated_jump(xi_max, 4097)
    }

    /// Replace a numerically integrated jump symbol by a lookup table so
    /// density inversion does not re-run the z-quadrature per frequency.
    pub fn with_tabulated_jump(&self, xi_max: f64, n: usize) -> LevySymbol {
        assert!(xi_max > 0.0 && n >= 16);
        let step = xi_max / (n - 1) as f64;
        let values: Vec<f64> = (0..n)
            .into_par_iter()
            .map(|j| self.psi_jump(j as f64 * step))
            .collect();
        LevySymbol {
            params: self.params,
            jump: JumpSymbol::Tabulated {
                step,
                values: Arc::new(values),
            },
            diffusion: self.diffusion,
        }
    }
}

fn band_coefficient(params: ModelParams, m: f64, lambda: f64, lambda_inner: f64) -> Coefficient {
    let json = format!(
        r#"{{"family":"indicator","params":{{"m":{m},"lambda":{lambda},"lambda_inner":{lambda_inner}}},"d":{},"beta":{}}}"#,
        params.d, params.beta
    );
    crate::coefficients::make_coefficient(
        &crate::coefficients::CoefficientSpec::from_json(&json).unwrap(),
    )
    .unwrap()
}

/// `∫ (1 - cos ξ·z) b(|z|) |z|^{-d-β} dz` for a radial-in-z coefficient.
///
/// d = 1 integrates `2(1 - cos ξz) b(z) z^{-1-β}`; d = 2 reduces over
/// angle to `2π (1 - J₀(ξw)) b̄(w) w^{-1-β}`. Panels are geometric with
/// width capped against the oscillation scale `1/ξ`; an analytic mean
/// handles the far tail, where the oscillatory term averages out.
fn jump_symbol_radial(coef: &Coefficient, params: ModelParams, xi: f64) -> f64 {
    let beta = params.beta;
    let origin = vec![0.0; params.d];
    let z_hi = if coef.support_radius.is_finite() {
        coef.support_radius
    } else {
        // far enough that cos(ξz) has averaged out of the remainder
        (2000.0 / xi).max(100.0)
    };
    let osc = |z: f64| match params.d {
        1 => 1.0 - (xi * z).cos(),
        _ => 1.0 - bessel_j0(xi * z),
    };
    let ang = match params.d {
        1 => 2.0,
        _ => 2.0 * std::f64::consts::PI,
    };
    let mut cuts = coef.radial_breakpoints();
    cuts.retain(|&c| c > 0.0 && c < z_hi);
    cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    cuts.push(z_hi);

    let mut total = 0.0;
    let mut lo = z_hi.min(1.0 / xi.max(1.0 / z_hi)) * 1e-8;
    let mut next_cut = 0usize;
    while lo < z_hi {
        while next_cut < cuts.len() && cuts[next_cut] <= lo * (1.0 + 1e-14) {
            next_cut += 1;
        }
        let mut hi = (lo * 1.25).min(lo + 0.4 / xi);
        if next_cut < cuts.len() {
            hi = hi.min(cuts[next_cut]);
        }
        total += gl8(lo, hi, |z| {
            ang * osc(z) * coef.eval_radial(&origin, z) * z.powf(-1.0 - beta)
        });
        lo = hi;
    }
    if !coef.support_radius.is_finite() {
        // remainder with cos averaged to zero: the plain tail mass
        total += crate::nonlocal::tail_mass_at(coef, &origin, z_hi);
    }
    total
}

/// Kernel density at distance `r`, by radial Fourier inversion:
/// d = 1: `(1/π) ∫₀^∞ cos(ξr) e^{-tψ} dξ`,
/// d = 2: `(1/2π) ∫₀^∞ J₀(ξr) e^{-tψ} ξ dξ`.
pub fn density(sym: &LevySymbol, t: f64, r: f64) -> f64 {
    assert!(t > 0.0 && r >= 0.0);
    let r = r.abs();
    // push the cutoff until e^{-tψ} ≤ e^{-45}
    let mut xi_max = if sym.diffusion {
        (45.0 / t).sqrt()
    } else {
        (45.0 / t).sqrt().max(1.0)
    };
    while t * sym.psi(xi_max) < 45.0 && xi_max < 1e8 {
        xi_max *= 2.0;
    }
    let base_h = xi_max / 64.0;
    let h = base_h.min(0.4 / r.max(1e-300)).max(xi_max * 1e-6);
    let mut total = 0.0;
    let mut lo = 0.0;
    while lo < xi_max {
        let hi = (lo + h).min(xi_max);
        total += gl8(lo, hi, |xi| {
            let e = (-t * sym.psi(xi)).exp();
            match sym.params.d {
                1 => (xi * r).cos() * e,
                _ => bessel_j0(xi * r) * e * xi,
            }
        });
        lo = hi;
    }
    match sym.params.d {
        1 => total / std::f64::consts::PI,
        _ => total / (2.0 * std::f64::consts::PI),
    }
}

/// Reference density `p^a`: the kernel of `Δ + a·Δ^{β/2}` (symbol
/// `ξ² + a|ξ|^β`).
pub fn pa_density(params: ModelParams, a: f64, t: f64, r: f64) -> f64 {
    density(&LevySymbol::stable(params, a), t, r)
}

/// Kernel of diffusion plus the `m·1_{|z|≤λ}` truncated jump kernel.
pub fn truncated_stable_density(params: ModelParams, m: f64, lambda: f64, t: f64, r: f64) -> f64 {
    density(&LevySymbol::truncated(params, m, lambda, 0.0), t, r)
}

/// The coefficient value `a·𝒜(d,-β)` whose symbol is exactly `a|ξ|^β`.
pub fn stable_coefficient_level(params: &ModelParams, a: f64) -> f64 {
    a * stable_normalizer(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::{make_coefficient, CoefficientSpec};
    use approx::assert_relative_eq;

    fn p1() -> ModelParams {
        ModelParams::new(1, 1.0).unwrap()
    }

    #[test]
    fn diffusion_density_is_gaussian() {
        for d in [1usize, 2] {
            let params = ModelParams::new(d, 1.0).unwrap();
            let sym = LevySymbol::diffusion(params);
            for &t in &[0.05, 0.25, 1.0] {
                for &r in &[0.0, 0.3, 1.0, 2.5] {
                    assert_relative_eq!(
                        density(&sym, t, r),
                        crate::kernels::gaussian_r(d, t, r),
                        max_relative = 1e-8,
                        epsilon = 1e-11
                    );
                }
            }
        }
    }

    #[test]
    fn pinned_diagonal_value() {
        // (1/2π) ∫ e^{-(ξ²+|ξ|)} dξ = e^{1/4} √π erfc(1/2) / (2π)
        let got = pa_density(p1(), 1.0, 1.0, 0.0);
        assert_relative_eq!(got, 0.1736830394, max_relative = 1e-8);
        let closed =
            (0.25f64).exp() * std::f64::consts::PI.sqrt() * statrs::function::erf::erfc(0.5)
                / (2.0 * std::f64::consts::PI);
        assert_relative_eq!(got, closed, max_relative = 1e-9);
    }

    #[test]
    fn symbol_of_stable_coefficient_matches_closed_form() {
        for &beta in &[0.5f64, 1.0, 1.5] {
            let params = ModelParams::new(1, beta).unwrap();
            let a = 0.5;
            let level = stable_coefficient_level(&params, a);
            let c = Arc::new(
                make_coefficient(
                    &CoefficientSpec::from_json(&format!(
                        r#"{{"family":"constant","params":{{"c":{level}}},"d":1,"beta":{beta}}}"#
                    ))
                    .unwrap(),
                )
                .unwrap(),
            );
            let sym = LevySymbol::from_coefficient(&c).unwrap();
            for &xi in &[0.3f64, 1.0, 4.0, 15.0] {
                assert_relative_eq!(
                    sym.psi_jump(xi),
                    a * xi.powf(beta),
                    max_relative = 2e-4
                );
            }
        }
    }

    #[test]
    fn truncated_symbol_matches_coefficient_route() {
        let params = p1();
        let sym_t = LevySymbol::truncated(params, 1.0, 1.0, 0.0);
        let c = Arc::new(
            make_coefficient(
                &CoefficientSpec::from_json(
                    r#"{"family":"indicator","params":{"m":1.0,"lambda":1.0},"d":1,"beta":1.0}"#,
                )
                .unwrap(),
            )
            .unwrap(),
        );
        let sym_c = LevySymbol::from_coefficient(&c).unwrap();
        for &xi in &[0.5f64, 2.0, 9.0] {
            assert_relative_eq!(sym_t.psi(xi), sym_c.psi(xi), max_relative = 1e-9);
        }
        // small-frequency behavior is ~ second moment of the band: ξ²/2·∫z²ν(dz)
        let xi = 1e-3;
        let second_moment = 2.0 * 1.0; // ∫_{-1}^{1} z²·|z|^{-2} dz
        assert_relative_eq!(
            sym_t.psi_jump(xi),
            0.5 * xi * xi * second_moment,
            max_relative = 1e-5
        );
    }

    #[test]
    fn density_mass_is_one() {
        for d in [1usize, 2] {
            let params = ModelParams::new(d, 1.0).unwrap();
            let a = 0.5;
            let sym = LevySymbol::stable(params, a);
            let t = 0.25;
            let (r_max, n) = (40.0, 4000);
            let dr = r_max / n as f64;
            let mut mass = 0.0;
            for i in 0..=n {
                let r = i as f64 * dr;
                let w = if i == 0 || i == n { 0.5 } else { 1.0 };
                let shell = match d {
                    1 => 2.0,
                    _ => 2.0 * std::f64::consts::PI * r,
                };
                mass += w * shell * density(&sym, t, r) * dr;
            }
            // first-order stable tail beyond R: density ≈ t·a·𝒜·r^{-d-1},
            // so the missing mass is t·a·𝒜·ω_d / R (β = 1)
            let omega = match d {
                1 => 2.0,
                _ => 2.0 * std::f64::consts::PI,
            };
            let tail = t * a * stable_normalizer(&params) * omega / r_max;
            assert!(
                (mass + tail - 1.0).abs() < 1e-4,
                "d={d} mass={mass} tail={tail}"
            );
        }
    }

    #[test]
    fn pa_scaling_identity() {
        // p^a(t,r) = λ^{d/2} p^{a λ^{β/2-1}}(λt, √λ r)
        let lam = 2.7f64;
        for d in [1usize, 2] {
            let beta = 1.0;
            let params = ModelParams::new(d, beta).unwrap();
            let a = 0.8;
            let a_im = a * lam.powf(beta / 2.0 - 1.0);
            for &t in &[0.1, 0.4] {
                for &r in &[0.0, 0.7, 2.0] {
                    let lhs = pa_density(params, a, t, r);
                    let rhs = lam.powf(d as f64 / 2.0)
                        * pa_density(params, a_im, lam * t, lam.sqrt() * r);
                    assert_relative_eq!(lhs, rhs, max_relative = 1e-6, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn chapman_kolmogorov_self_consistency() {
        let sym = LevySymbol::stable(p1(), 0.5);
        let (t, s) = (0.1, 0.15);
        for &x in &[0.0f64, 0.8, 2.0] {
            let direct = density(&sym, t + s, x);
            // ∫ p(t, x-y) p(s, y) dy by trapezoid
            let (r_max, n) = (40.0, 4000);
            let dy = 2.0 * r_max / n as f64;
            let mut conv = 0.0;
            for i in 0..=n {
                let y = -r_max + i as f64 * dy;
                let w = if i == 0 || i == n { 0.5 } else { 1.0 };
                conv += w * density(&sym, t, (x - y).abs()) * density(&sym, s, y.abs()) * dy;
            }
            assert_relative_eq!(direct, conv, max_relative = 2e-3);
        }
    }
}
