//! The nonlocal operator `S^b`:
//!
//! `S^b f(x) = ∫ (f(x+z) + f(x-z) - 2 f(x))/2 · b(x,z)/|z|^{d+β} dz`
//!
//! (the symmetrized form, valid because `b(x,·)` is even). All supported
//! coefficient families are radial in `z`, so the integral reduces to a
//! one-dimensional radial quadrature; in `d = 2` the angular average of a
//! Gaussian has a closed form through the modified Bessel function `I0`.

use crate::coefficients::Coefficient;
use crate::kernels::{gl8, special};
use std::f64::consts::PI;

/// Radial quadrature panels on `(0, z_max]`: geometric grading toward 0
/// plus uniform refinement (width `0.5·scale`) around the spike radius,
/// where the shifted kernel `f(x ± w)` concentrates its variation.
/// `extra` lists radii that must fall on panel boundaries (coefficient
/// discontinuities).
pub fn radial_panels(scale: f64, spike: f64, z_max: f64, extra: &[f64]) -> Vec<(f64, f64)> {
    assert!(scale > 0.0 && z_max > 0.0);
    let mut cuts: Vec<f64> = Vec::new();
    let w0 = (z_max.min(scale)) * 1e-8;
    let mut w = w0;
    while w < z_max {
        cuts.push(w);
        w *= 1.6;
    }
    cuts.push(z_max);
    if spike > 0.0 {
        let lo = (spike - 5.0 * scale).max(w0);
        let hi = (spike + 5.0 * scale).min(z_max);
        let mut v = lo;
        while v < hi {
            cuts.push(v);
            v += 0.5 * scale;
        }
        if hi > lo {
            cuts.push(hi);
        }
    }
    for &e in extra {
        if e > w0 && e < z_max {
            cuts.push(e);
        }
    }
    cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut panels = Vec::with_capacity(cuts.len());
    for win in cuts.windows(2) {
        if win[1] - win[0] > 1e-14 * z_max {
            panels.push((win[0], win[1]));
        }
    }
    panels
}

/// `∫_{|z| > r} b(x,z)/|z|^{d+β} dz` for a fixed base point `x`.
pub fn tail_mass_at(coef: &Coefficient, x: &[f64], r: f64) -> f64 {
    if r >= coef.support_radius {
        return 0.0;
    }
    let beta = coef.params.beta;
    let omega = coef.params.sphere_surface();
    let cap = if coef.support_radius.is_finite() {
        coef.support_radius
    } else {
        r * 1e7
    };
    let mut total = 0.0;
    let mut lo = r;
    let mut bps = coef.radial_breakpoints();
    bps.retain(|b| *b > r && *b < cap);
    while lo < cap {
        let mut hi = (lo * 1.25).min(cap);
        if let Some(&b) = bps.first() {
            if b > lo && b < hi {
                hi = b;
                bps.remove(0);
            }
        }
        total += gl8(lo, hi, |w| coef.eval_radial(x, w) * w.powf(-1.0 - beta));
        lo = hi;
    }
    if !coef.support_radius.is_finite() {
        // power-law remainder beyond the cap, with b frozen at the cap
        total += coef.eval_radial(x, cap) * cap.powf(-beta) / beta;
    }
    omega * total
}

/// `(S^b f)(x)` in d = 1 for a generic profile `f`, assumed negligible at
/// distance `> z_max` from `x`. `scale` is the smoothness length of `f`
/// (use `√t` for heat kernels) and `spike` the radius where `f(x ± w)`
/// varies fastest (use the distance from `x` to the mass of `f`).
pub fn apply_sb_1d(
    coef: &Coefficient,
    x: f64,
    f: impl Fn(f64) -> f64,
    scale: f64,
    spike: f64,
    z_max: f64,
) -> f64 {
    assert_eq!(coef.params.d, 1);
    let beta = coef.params.beta;
    let fx = f(x);
    let xs = [x];
    let mut total = 0.0;
    for (a, b) in radial_panels(scale, spike, z_max, &coef.radial_breakpoints()) {
        total += gl8(a, b, |w| {
            (f(x + w) + f(x - w) - 2.0 * fx) * coef.eval_radial(&xs, w) * w.powf(-1.0 - beta)
        });
    }
    total - fx * tail_mass_at(coef, &xs, z_max)
}

fn gaussian_z_max(coef: &Coefficient, scale: f64, spike: f64) -> f64 {
    if coef.support_radius.is_finite() && coef.support_radius > 0.0 {
        coef.support_radius
    } else {
        spike + 14.0 * scale
    }
}

/// `g(s, x, u) = (S^b p0(s, ·-y))(x)` with `u = x - y`, `b` frozen at the
/// application point `x`. Closed-form Gaussian differences in d = 1; in
/// d = 2 the angular average `∫ p0(s,|u + w e_θ|) dθ/2π` equals
/// `(4πs)^{-1} e^{-(|u|-w)²/4s} I0(w|u|/2s) e^{-w|u|/2s}`.
pub fn sb_gaussian(coef: &Coefficient, s: f64, x: &[f64], u: f64) -> f64 {
    assert!(s > 0.0);
    let beta = coef.params.beta;
    let scale = s.sqrt();
    let spike = u.abs();
    let z_max = gaussian_z_max(coef, scale, spike);
    let norm = (4.0 * PI * s).powf(-(coef.params.d as f64) / 2.0);
    let pu = norm * (-u * u / (4.0 * s)).exp();
    let bps = coef.radial_breakpoints();
    let mut total = 0.0;
    match coef.params.d {
        1 => {
            for (a, b) in radial_panels(scale, spike, z_max, &bps) {
                total += gl8(a, b, |w| {
                    let plus = norm * (-(u + w) * (u + w) / (4.0 * s)).exp();
                    let minus = norm * (-(u - w) * (u - w) / (4.0 * s)).exp();
                    (plus + minus - 2.0 * pu) * coef.eval_radial(x, w) * w.powf(-1.0 - beta)
                });
            }
        }
        2 => {
            let r = spike;
            for (a, b) in radial_panels(scale, spike, z_max, &bps) {
                total += gl8(a, b, |w| {
                    // angular mean of p0(s, |u + w e_θ|) over the circle
                    let ang = norm
                        * (-(r - w) * (r - w) / (4.0 * s)).exp()
                        * special::bessel_i0_scaled(r * w / (2.0 * s));
                    2.0 * PI * (ang - pu) * coef.eval_radial(x, w) * w.powf(-1.0 - beta)
                });
            }
        }
        d => panic!("sb_gaussian supports d = 1, 2 (got {d})"),
    }
    total - pu * tail_mass_at(coef, x, z_max)
}

/// Two-case absolute fractional derivative of the Gaussian,
/// `|Δ^{β/2}| p0(t, x)`: Taylor-compensated absolute differences inside
/// radius `r0 = √t` (near regime `|x|² ≤ t`) or `|x|/2` (far regime),
/// plain absolute differences outside. Always ≥ the plain `|S^A p0|`.
pub fn abs_frac_gaussian(d: usize, beta: f64, t: f64, xr: f64) -> f64 {
    assert!(t > 0.0 && (1..=2).contains(&d));
    let scale = t.sqrt();
    let r0 = if xr * xr <= t { scale } else { xr / 2.0 };
    let norm = (4.0 * PI * t).powf(-(d as f64) / 2.0);
    let px = norm * (-xr * xr / (4.0 * t)).exp();
    // radial gradient magnitude of p0 at radius xr
    let grad = px * xr / (2.0 * t);
    let z_max = xr + 16.0 * scale;

    // angular nodes: ±1 in d=1, Gauss-Legendre on [0, π] (×2 weight) in d=2
    let angles: Vec<(f64, f64)> = match d {
        1 => vec![(1.0, 1.0), (-1.0, 1.0)],
        _ => {
            let mut v = Vec::new();
            let n = 32;
            for k in 0..n {
                // midpoint rule on [0, π], doubled for the lower half plane
                let th = PI * (k as f64 + 0.5) / n as f64;
                v.push((th.cos(), 2.0 * PI / n as f64));
            }
            v
        }
    };

    let integrand = |w: f64| -> f64 {
        let mut acc = 0.0;
        for &(c, wt) in &angles {
            // |x + w e_θ|² = xr² + w² + 2 w xr cosθ
            let rr = (xr * xr + w * w + 2.0 * w * xr * c).max(0.0).sqrt();
            let pz = norm * (-rr * rr / (4.0 * t)).exp();
            let diff = if w <= r0 {
                // compensate the linear term: ∇p0(x)·z = -grad·(cosθ)·w·sign
                (pz - px + grad * c * w).abs()
            } else {
                (pz - px).abs()
            };
            acc += wt * diff;
        }
        // fold the d-dim measure: dz = w^{d-1} dw dθ_measure
        acc * w.powf(d as f64 - 1.0) * w.powf(-(d as f64) - beta)
    };

    let mut total = 0.0;
    for (a, b) in radial_panels(scale, xr, z_max, &[r0]) {
        total += gl8(a, b, integrand);
    }
    // beyond z_max both kernels are negligible except the -px term
    let omega = match d {
        1 => 2.0,
        _ => 2.0 * PI,
    };
    total + px * omega * z_max.powf(-beta) / beta
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::{make_coefficient, CoefficientSpec};
    use crate::kernels::{f0_r, stable_normalizer};
    use approx::assert_relative_eq;

    fn coef(json: &str) -> Coefficient {
        make_coefficient(&CoefficientSpec::from_json(json).unwrap()).unwrap()
    }

    /// reference: -c·(-Δ)^{β/2} p0 by direct Fourier quadrature (d=1)
    fn frac_lap_gaussian_1d(beta: f64, s: f64, u: f64, c: f64) -> f64 {
        let mut total = 0.0;
        let xi_max = 40.0 / s.sqrt().min(1.0);
        let n = 400_000;
        let dxi = xi_max / n as f64;
        for k in 0..n {
            let xi = (k as f64 + 0.5) * dxi;
            total += xi.powf(beta) * (-s * xi * xi).exp() * (xi * u).cos();
        }
        -c * total * dxi / PI
    }

    #[test]
    fn zero_coefficient_gives_zero() {
        let c = coef(r#"{"family":"zero","d":1,"beta":1.0}"#);
        assert_eq!(sb_gaussian(&c, 0.3, &[0.0], 0.7), 0.0);
    }

    #[test]
    fn matches_fractional_laplacian_d1() {
        for &beta in &[0.5f64, 1.0, 1.5] {
            let a = stable_normalizer(&crate::coefficients::ModelParams::new(1, beta).unwrap());
            let c = coef(&format!(
                r#"{{"family":"constant","params":{{"c":{a}}},"d":1,"beta":{beta}}}"#
            ));
            for &s in &[0.1f64, 0.5] {
                for &u in &[0.0f64, 0.4, 3.0 * s.sqrt()] {
                    let got = sb_gaussian(&c, s, &[u], u);
                    let want = frac_lap_gaussian_1d(beta, s, u, 1.0);
                    assert_relative_eq!(got, want, max_relative = 1e-3, epsilon = 1e-9);
                }
            }
        }
    }

    #[test]
    fn matches_fractional_laplacian_d2() {
        // radial Fourier reference: -(2π)^{-1} ∫ ρ^{1+β} e^{-sρ²} J0(ρu) dρ
        let beta = 1.0;
        let a = stable_normalizer(&crate::coefficients::ModelParams::new(2, beta).unwrap());
        let c = coef(&format!(
            r#"{{"family":"constant","params":{{"c":{a}}},"d":2,"beta":{beta}}}"#
        ));
        let s = 0.25f64;
        for &u in &[0.0f64, 0.5, 1.5] {
            let mut want = 0.0;
            let n = 200_000;
            let rho_max = 60.0;
            let dr = rho_max / n as f64;
            for k in 0..n {
                let rho = (k as f64 + 0.5) * dr;
                want += rho.powf(1.0 + beta) * (-s * rho * rho).exp() * special::bessel_j0(rho * u);
            }
            want *= -dr / (2.0 * PI);
            let got = sb_gaussian(&c, s, &[u, 0.0], u);
            assert_relative_eq!(got, want, max_relative = 2e-3, epsilon = 1e-9);
        }
    }

    #[test]
    fn linear_in_b() {
        let c1 = coef(r#"{"family":"indicator","params":{"m":1.0,"lambda":1.0},"d":1,"beta":1.0}"#);
        let c2 = coef(r#"{"family":"indicator","params":{"m":2.0,"lambda":1.0},"d":1,"beta":1.0}"#);
        for &u in &[0.0f64, 0.3, 1.2] {
            let v1 = sb_gaussian(&c1, 0.2, &[u], u);
            let v2 = sb_gaussian(&c2, 0.2, &[u], u);
            assert_relative_eq!(v2, 2.0 * v1, max_relative = 1e-12, epsilon = 1e-300);
        }
    }

    #[test]
    fn negative_at_the_maximum() {
        // at the peak of the Gaussian every second difference is negative
        let c = coef(r#"{"family":"indicator","params":{"m":1.0,"lambda":1.0},"d":1,"beta":1.0}"#);
        assert!(sb_gaussian(&c, 0.3, &[0.0], 0.0) < 0.0);
    }

    #[test]
    fn integrates_to_zero() {
        // ∫ S^b p0(s, u) du = 0: the generator conserves mass
        let c = coef(r#"{"family":"indicator","params":{"m":1.0,"lambda":1.0},"d":1,"beta":1.0}"#);
        let s = 0.2f64;
        let du = 0.02;
        let mut total = 0.0;
        let mut sup = 0.0f64;
        let mut u = -8.0;
        while u <= 8.0 {
            let v = sb_gaussian(&c, s, &[u], u);
            total += v * du;
            sup = sup.max(v.abs());
            u += du;
        }
        assert!(total.abs() < 1e-4 * sup.max(1.0), "total = {total}");
    }

    #[test]
    fn even_in_u() {
        let c = coef(r#"{"family":"constant","params":{"c":0.5},"d":1,"beta":1.2}"#);
        for &u in &[0.3f64, 1.1, 2.7] {
            assert_relative_eq!(
                sb_gaussian(&c, 0.15, &[u], u),
                sb_gaussian(&c, 0.15, &[-u], -u),
                max_relative = 1e-10
            );
        }
    }

    #[test]
    fn generic_apply_matches_gaussian_closed_form() {
        let c = coef(r#"{"family":"indicator","params":{"m":1.0,"lambda":1.0},"d":1,"beta":1.0}"#);
        let s = 0.2f64;
        for &u in &[0.0f64, 0.5, 1.4] {
            let f = |y: f64| crate::kernels::gaussian_r(1, s, y);
            let got = apply_sb_1d(&c, u, f, s.sqrt(), u.abs(), gaussian_z_max(&c, s.sqrt(), u));
            let want = sb_gaussian(&c, s, &[u], u);
            assert_relative_eq!(got, want, max_relative = 1e-9, epsilon = 1e-300);
        }
    }

    #[test]
    fn dominated_by_f0_envelope() {
        // |S^b p0| ≤ C·‖b‖∞·f0 with a moderate C over a broad sample
        let c = coef(r#"{"family":"constant","params":{"c":1.0},"d":1,"beta":1.0}"#);
        let pm = crate::coefficients::ModelParams::new(1, 1.0).unwrap();
        let mut worst = 0.0f64;
        for &s in &[0.05f64, 0.2, 1.0] {
            for k in 0..60 {
                let u = 0.1 * k as f64 * s.sqrt();
                let ratio = sb_gaussian(&c, s, &[u], u).abs() / f0_r(&pm, s, u);
                worst = worst.max(ratio);
            }
        }
        assert!(worst.is_finite() && worst < 20.0, "worst ratio {worst}");
    }

    #[test]
    fn abs_frac_dominates_plain_and_fits_f0() {
        let beta = 1.0;
        let pm = crate::coefficients::ModelParams::new(1, beta).unwrap();
        // b ≡ 1: |S^1 p0| ≤ |Δ^{β/2}| p0 (Taylor compensation only adds mass)
        let c = coef(r#"{"family":"constant","params":{"c":1.0},"d":1,"beta":1.0}"#);
        let mut worst = 0.0f64;
        for &t in &[0.1f64, 0.5, 2.0] {
            for k in 0..40 {
                let xr = 0.15 * k as f64 * t.sqrt();
                let abs_v = abs_frac_gaussian(1, beta, t, xr);
                let plain = sb_gaussian(&c, t, &[xr], xr).abs();
                assert!(abs_v >= plain * (1.0 - 1e-6), "t={t} xr={xr}");
                worst = worst.max(abs_v / f0_r(&pm, t, xr));
            }
        }
        assert!(worst.is_finite() && worst < 50.0, "C10 fit {worst}");
    }

    #[test]
    fn tail_mass_at_matches_closed_form() {
        let c = coef(r#"{"family":"constant","params":{"c":0.5},"d":1,"beta":1.0}"#);
        assert_relative_eq!(tail_mass_at(&c, &[0.0], 2.0), 0.5, max_relative = 1e-6);
        let i = coef(r#"{"family":"indicator","params":{"m":1.0,"lambda":1.0},"d":1,"beta":1.0}"#);
        assert_relative_eq!(tail_mass_at(&i, &[0.0], 0.5), 2.0, max_relative = 1e-6);
        assert_eq!(tail_mass_at(&i, &[0.0], 1.5), 0.0);
    }
}
