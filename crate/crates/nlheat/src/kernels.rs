//! Closed-form reference kernels and comparison functions.
//!
//! Everything here is a pure function of `(t, x, y)` and the model
//! parameters `(d, β)`; evaluation is double precision and exponent
//! underflow clamps to zero.

use std::f64::consts::PI;
use std::sync::OnceLock;

use statrs::function::gamma::gamma;

use crate::coefficients::ModelParams;

pub fn dist(x: &[f64], y: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    x.iter()
        .zip(y)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

/// Gaussian heat kernel of `Δ` (not `Δ/2`): `(4πt)^{-d/2} exp(-r²/4t)`.
pub fn gaussian_r(d: usize, t: f64, r: f64) -> f64 {
    assert!(t > 0.0, "gaussian requires t > 0");
    (4.0 * PI * t).powf(-(d as f64) / 2.0) * (-r * r / (4.0 * t)).exp()
}

pub fn gaussian(t: f64, x: &[f64], y: &[f64]) -> f64 {
    gaussian_r(x.len(), t, dist(x, y))
}

/// `f0(t,x,y) = (√t ∨ |x-y|)^{-(d+β)}`.
pub fn f0_r(params: &ModelParams, t: f64, r: f64) -> f64 {
    assert!(t > 0.0);
    t.sqrt().max(r).powf(-(params.d as f64 + params.beta))
}

pub fn f0(params: &ModelParams, t: f64, x: &[f64], y: &[f64]) -> f64 {
    f0_r(params, t, dist(x, y))
}

/// `h(t,x,y) = t^{-d/2} ∧ (p0(t,x,y) + t/|x-y|^{d+β})`.
///
/// On the diagonal the second branch is `+∞`, so the minimum gives
/// `h(t,x,x) = t^{-d/2}`.
pub fn h_r(params: &ModelParams, t: f64, r: f64) -> f64 {
    assert!(t > 0.0);
    let d = params.d as f64;
    let diag = t.powf(-d / 2.0);
    if r == 0.0 {
        return diag;
    }
    diag.min(gaussian_r(params.d, t, r) + t / r.powf(d + params.beta))
}

pub fn h(params: &ModelParams, t: f64, x: &[f64], y: &[f64]) -> f64 {
    h_r(params, t, dist(x, y))
}

/// Uniform bound on `|∂²_{ij} p0(t,x)|`: `C9 t^{-(d+2)/2} (1 ∧ √t/|x|)^{d+4}`,
/// with `C9` fitted once per dimension over a ratio sample (the ratio is
/// scale invariant, so sampling at t = 1 suffices).
pub fn gaussian_hessian_bound(d: usize, t: f64, x: &[f64]) -> f64 {
    assert!(t > 0.0);
    let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let c9 = fitted_c9(d);
    c9 * t.powf(-(d as f64 + 2.0) / 2.0) * (t.sqrt() / r).min(1.0).powi(d as i32 + 4)
}

/// Largest absolute entry of the Hessian of `p0(t, ·)` at radius `r`
/// (attained with `x` along one axis: `|p0 · (x_i x_j/4t² - δ_ij/2t)|`).
pub fn gaussian_hessian_max_entry(d: usize, t: f64, r: f64) -> f64 {
    let p = gaussian_r(d, t, r);
    let diag = (r * r / (4.0 * t * t) - 1.0 / (2.0 * t)).abs();
    p * diag.max(1.0 / (2.0 * t))
}

fn fitted_c9(d: usize) -> f64 {
    static CACHE: OnceLock<[f64; 4]> = OnceLock::new();
    let cache = CACHE.get_or_init(|| {
        let mut out = [0.0f64; 4];
        for (i, dd) in (1..=4).enumerate() {
            let mut c = 0.0f64;
            // ratio depends only on r/√t; scan r at t=1 out to the far tail
            for k in 0..4000 {
                let r = 1e-3 + 0.005 * k as f64;
                let envelope = (1.0f64 / r).min(1.0).powi(dd as i32 + 4);
                let ratio = gaussian_hessian_max_entry(dd, 1.0, r) / envelope;
                c = c.max(ratio);
            }
            out[i] = c * 1.02; // small headroom over the sampled max
        }
        out
    });
    assert!((1..=4).contains(&d));
    cache[d - 1]
}

/// `A(d,-β)`: normalizer making the jump kernel `A/|z|^{d+β}` have
/// Fourier symbol `|ξ|^β`.
pub fn stable_normalizer(params: &ModelParams) -> f64 {
    let d = params.d as f64;
    let beta = params.beta;
    assert!(beta > 0.0 && beta < 2.0);
    beta * 2.0f64.powf(beta - 1.0) * gamma((d + beta) / 2.0)
        / (PI.powf(d / 2.0) * gamma(1.0 - beta / 2.0))
}

/// Special functions used by the radial `d = 2` machinery.
pub mod special {
    /// Bessel J0: Taylor series for |x| ≤ 17, Hankel asymptotic expansion
    /// beyond (abs err ≲ 1e-10 everywhere; the 1e-7 A&S polynomials are
    /// too crude for the Fourier-oracle mass checks).
    pub fn bessel_j0(x: f64) -> f64 {
        let ax = x.abs();
        if ax <= 17.0 {
            let z = ax * ax;
            let mut term = 1.0;
            let mut sum = 1.0;
            for k in 1..80 {
                term *= -z / (4.0 * (k * k) as f64);
                sum += term;
                if term.abs() < 1e-18 * sum.abs().max(1e-3) {
                    break;
                }
            }
            sum
        } else {
            let w = 1.0 / (ax * ax);
            let p = 1.0
                + w * (-9.0 / 128.0 + w * (3675.0 / 32768.0 - w * 2_401_245.0 / 4_194_304.0));
            let q = (-1.0 / 8.0
                + w * (75.0 / 1024.0 + w * (-59535.0 / 262_144.0 + w * 57_972_915.0 / 33_554_432.0)))
                / ax;
            let chi = ax - std::f64::consts::FRAC_PI_4;
            (2.0 / (std::f64::consts::PI * ax)).sqrt() * (p * chi.cos() - q * chi.sin())
        }
    }

    /// Scaled modified Bessel `I0(x)·e^{-x}`, A&S 9.8.1/9.8.2.
    pub fn bessel_i0_scaled(x: f64) -> f64 {
        let ax = x.abs();
        if ax < 3.75 {
            let y = (ax / 3.75) * (ax / 3.75);
            let i0 = 1.0
                + y * (3.5156229
                    + y * (3.0899424
                        + y * (1.2067492 + y * (0.2659732 + y * (0.0360768 + y * 0.0045813)))));
            i0 * (-ax).exp()
        } else {
            let y = 3.75 / ax;
            (0.39894228
                + y * (0.01328592
                    + y * (0.00225319
                        + y * (-0.00157565
                            + y * (0.00916281
                                + y * (-0.02057706
                                    + y * (0.02635537 + y * (-0.01647633 + y * 0.00392377))))))))
                / ax.sqrt()
        }
    }
}

/// 8-point Gauss-Legendre on `[a, b]`.
pub(crate) fn gl8(a: f64, b: f64, f: impl Fn(f64) -> f64) -> f64 {
    const X: [f64; 4] = [
        0.1834346424956498,
        0.5255324099163290,
        0.7966664774136267,
        0.9602898564975363,
    ];
    const W: [f64; 4] = [
        0.3626837833783620,
        0.3137066458778873,
        0.2223810344533745,
        0.1012285362903763,
    ];
    let c = 0.5 * (a + b);
    let hw = 0.5 * (b - a);
    let mut s = 0.0;
    for i in 0..4 {
        s += W[i] * (f(c + hw * X[i]) + f(c - hw * X[i]));
    }
    s * hw
}
