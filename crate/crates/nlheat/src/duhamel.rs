//! Series construction of the perturbed heat kernel.
//!
//! The kernel is built as `q = Σ q_n` with `q_0 = p0` and
//!
//! `q_n(t,x,y) = ∫₀^t ∫ q_{n-1}(σ,x,z) · S^b_z p0(t-σ,z,y) dz dσ`.
//!
//! Writing `g(s,z,y) = S^b_z p0(s,z,y)`, each target time `t_i` integrates
//! `F(σ) = (q_{n-1}(σ) * g(t_i-σ))` over σ with breakpoints at the grid
//! times; the σ→0 endpoint has the exact limit `F(0) = g(t_i)` for `n = 1`
//! and `0` for `n ≥ 2`, and the σ→t_i endpoint uses constant extrapolation
//! from the last node with `t_i - σ ≥ t_1` (below which `g` is not
//! lattice-resolvable). For translation-invariant coefficients `F` is
//! constant in σ — both factors are Fourier multipliers — so the rule is
//! exact for `q_1` up to lattice aliasing.
//!
//! Spatial convolutions run on the lattice through zero-padded FFTs; the
//! x-dependent d = 1 path stores full `(x,y)` matrices instead.

use std::collections::HashMap;
use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::Serialize;

use crate::coefficients::Coefficient;
use crate::error::NlError;
use crate::kernels::{gaussian_r, stable_normalizer};
use crate::nonlocal::{apply_sb_1d, sb_gaussian};
use crate::table::{KernelTable, SpaceTimeGrid, TableData};

#[derive(Debug, Clone)]
pub struct BuildOptions {
    /// stop when max_i sup|q_n(t_i)| / sup|q(t_i)| drops below this
    pub tol: f64,
    pub max_terms: usize,
    /// use the x-dependent matrix path even for translation-invariant b
    pub force_full: bool,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions {
            tol: 1e-10,
            max_terms: 40,
            force_full: false,
        }
    }
}

/// Everything recorded while building a table.
#[derive(Debug, Clone, Serialize)]
pub struct ConstructionLog {
    pub coef_hash: String,
    pub d: usize,
    pub beta: f64,
    pub horizon: f64,
    pub k_steps: usize,
    pub dx: f64,
    pub half_extent: f64,
    pub n_axis: usize,
    pub translation_invariant: bool,
    pub terms: usize,
    /// per-term contraction ratios `sup|q_n| / sup|q_{n-1}|`
    pub sup_ratios: Vec<f64>,
    pub tol: f64,
    /// bound on the dropped series tail, relative to `sup q`
    pub tail_bound: f64,
    pub extensions: usize,
}

/// Largest horizon on which the series is expected to contract:
/// `T = min(1, (a0 / max(‖b‖∞, a0))^{2/(2-β)})`.
pub fn choose_base_horizon(c: &Coefficient) -> f64 {
    choose_base_horizon_with(c, default_a0(c))
}

pub fn default_a0(c: &Coefficient) -> f64 {
    0.25 * stable_normalizer(&c.params)
}

pub fn choose_base_horizon_with(c: &Coefficient, a0: f64) -> f64 {
    let ratio = a0 / c.sup_norm.max(a0);
    1.0f64.min(ratio.powf(2.0 / (2.0 - c.params.beta)))
}

// ---------------------------------------------------------------------------
// lattice convolution plans

struct ConvPlan {
    d: usize,
    n: usize,
    m: usize,
    fft: Arc<dyn Fft<f64>>,
    ifft: Arc<dyn Fft<f64>>,
    /// spectrum of the unit impulse at the lattice center, used to inject
    /// plain slices (the σ = 0 endpoint) into convolution accumulators
    delta_hat: Vec<Complex<f64>>,
}

impl ConvPlan {
    fn new(d: usize, n: usize) -> Self {
        assert!(d == 1 || d == 2);
        let m = (2 * n - 1).next_power_of_two();
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(m);
        let ifft = planner.plan_fft_inverse(m);
        let mut plan = ConvPlan {
            d,
            n,
            m,
            fft,
            ifft,
            delta_hat: Vec::new(),
        };
        let c = (n - 1) / 2;
        let mut delta = vec![0.0; n.pow(d as u32)];
        let idx = if d == 1 { c } else { c * n + c };
        delta[idx] = 1.0;
        plan.delta_hat = plan.forward(&delta);
        plan
    }

    fn spectrum_len(&self) -> usize {
        self.m.pow(self.d as u32)
    }

    fn fft_rows(&self, buf: &mut [Complex<f64>], inverse: bool) {
        let f = if inverse { &self.ifft } else { &self.fft };
        for row in buf.chunks_exact_mut(self.m) {
            f.process(row);
        }
    }

    fn transpose(&self, buf: &mut [Complex<f64>]) {
        let m = self.m;
        for i in 0..m {
            for j in (i + 1)..m {
                buf.swap(i * m + j, j * m + i);
            }
        }
    }

    /// Forward transform of a zero-padded slice (`n^d` values).
    fn forward(&self, slice: &[f64]) -> Vec<Complex<f64>> {
        let (n, m) = (self.n, self.m);
        match self.d {
            1 => {
                let mut buf = vec![Complex::new(0.0, 0.0); m];
                for (i, &v) in slice.iter().enumerate() {
                    buf[i].re = v;
                }
                self.fft.process(&mut buf);
                buf
            }
            _ => {
                let mut buf = vec![Complex::new(0.0, 0.0); m * m];
                for i in 0..n {
                    for j in 0..n {
                        buf[i * m + j].re = slice[i * n + j];
                    }
                }
                self.fft_rows(&mut buf, false);
                self.transpose(&mut buf);
                self.fft_rows(&mut buf, false);
                self.transpose(&mut buf);
                buf
            }
        }
    }

    /// Inverse transform of an accumulated spectrum, extracting the centered
    /// `n^d` window of the linear convolution.
    fn inverse_extract(&self, hat: &[Complex<f64>]) -> Vec<f64> {
        let (n, m) = (self.n, self.m);
        let c = (n - 1) / 2;
        match self.d {
            1 => {
                let mut buf = hat.to_vec();
                self.ifft.process(&mut buf);
                let norm = 1.0 / m as f64;
                (0..n).map(|j| buf[j + c].re * norm).collect()
            }
            _ => {
                let mut buf = hat.to_vec();
                self.fft_rows(&mut buf, true);
                self.transpose(&mut buf);
                self.fft_rows(&mut buf, true);
                self.transpose(&mut buf);
                let norm = 1.0 / (m * m) as f64;
                let mut out = vec![0.0; n * n];
                for i in 0..n {
                    for j in 0..n {
                        out[i * n + j] = buf[(i + c) * m + (j + c)].re * norm;
                    }
                }
                out
            }
        }
    }
}

// ---------------------------------------------------------------------------
// σ-quadrature on the graded times

/// Trapezoid weights for `∫₀^{t_i} F(σ) dσ` with interior breakpoints at
/// grid times `t_j ≤ t_i - t_1` (keeping `g(t_i - t_j)` resolvable).
/// Returns `(w0, interior)` where `w0` weights the endpoint value `F(0)`
/// and the last interior weight absorbs the `[σ_last, t_i]` cell by
/// constant extrapolation. With no interior nodes the rule is `t_i · F(0)`.
fn sigma_weights(times: &[f64], i: usize) -> (f64, Vec<(usize, f64)>) {
    let t_i = times[i];
    let t1 = times[0];
    let cutoff = t_i - t1 + 1e-12 * t_i;
    let js: Vec<usize> = (0..=i).filter(|&j| times[j] <= cutoff).collect();
    if js.is_empty() {
        return (t_i, Vec::new());
    }
    let mut bp = Vec::with_capacity(js.len() + 1);
    bp.push(0.0);
    bp.extend(js.iter().map(|&j| times[j]));
    let p = bp.len() - 1;
    let mut w = vec![0.0; bp.len()];
    for q in 0..p {
        let h = bp[q + 1] - bp[q];
        w[q] += 0.5 * h;
        w[q + 1] += 0.5 * h;
    }
    w[p] += t_i - bp[p];
    let interior = js
        .iter()
        .zip(w.iter().skip(1))
        .map(|(&j, &wj)| (j, wj))
        .collect();
    (w[0], interior)
}

/// Variant for integrands whose σ = t_i endpoint value is computable
/// directly (second Duhamel form: `F(t_i) = S^b q(t_i)`). Returns
/// `(w0, interior, w_end)`.
fn sigma_weights_closed(times: &[f64], i: usize) -> (f64, Vec<(usize, f64)>, f64) {
    let t_i = times[i];
    let t1 = times[0];
    let cutoff = t_i - t1 + 1e-12 * t_i;
    let js: Vec<usize> = (0..=i).filter(|&j| times[j] <= cutoff).collect();
    let mut bp = Vec::with_capacity(js.len() + 2);
    bp.push(0.0);
    bp.extend(js.iter().map(|&j| times[j]));
    bp.push(t_i);
    let mut w = vec![0.0; bp.len()];
    for q in 0..bp.len() - 1 {
        let h = bp[q + 1] - bp[q];
        w[q] += 0.5 * h;
        w[q + 1] += 0.5 * h;
    }
    let interior = js
        .iter()
        .zip(w.iter().skip(1))
        .map(|(&j, &wj)| (j, wj))
        .collect();
    (w[0], interior, *w.last().unwrap())
}

fn slice_sup(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

// ---------------------------------------------------------------------------
// translation-invariant engine

struct TiEngine<'a> {
    grid: &'a SpaceTimeGrid,
    plan: ConvPlan,
    /// `s.to_bits() → (g slice, its spectrum)`
    g: HashMap<u64, (Vec<f64>, Vec<Complex<f64>>)>,
    p0: Vec<Vec<f64>>,
}

/// Sample `u ↦ f(|u|)` on the displacement lattice.
fn radial_lattice(grid: &SpaceTimeGrid, f: impl Fn(f64) -> f64 + Sync) -> Vec<f64> {
    let n = grid.n_axis;
    let c = grid.center() as isize;
    match grid.params.d {
        1 => {
            let half: Vec<f64> = (0..=c as usize)
                .into_par_iter()
                .map(|k| f(k as f64 * grid.dx))
                .collect();
            let mut out = vec![0.0; n];
            for (k, &v) in half.iter().enumerate() {
                out[c as usize - k] = v;
                out[c as usize + k] = v;
            }
            out
        }
        _ => {
            // evaluate once per distinct squared radius
            let mut keys: Vec<i64> = Vec::new();
            let mut seen: HashMap<i64, usize> = HashMap::new();
            for i in 0..n {
                for j in 0..n {
                    let (di, dj) = (i as isize - c, j as isize - c);
                    let k = (di * di + dj * dj) as i64;
                    seen.entry(k).or_insert_with(|| {
                        keys.push(k);
                        keys.len() - 1
                    });
                }
            }
            let vals: Vec<f64> = keys
                .par_iter()
                .map(|&k| f((k as f64).sqrt() * grid.dx))
                .collect();
            let mut out = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    let (di, dj) = (i as isize - c, j as isize - c);
                    out[i * n + j] = vals[seen[&((di * di + dj * dj) as i64)]];
                }
            }
            out
        }
    }
}

impl<'a> TiEngine<'a> {
    fn new(coef: &'a Coefficient, grid: &'a SpaceTimeGrid) -> Result<Self, NlError> {
        let d = grid.params.d;
        if d > 2 {
            return Err(NlError::config("builder supports d = 1, 2"));
        }
        let plan = ConvPlan::new(d, grid.n_axis);
        let times = &grid.times;
        // every s the σ-quadrature will ever ask for
        let mut s_set: Vec<f64> = Vec::new();
        for i in 0..times.len() {
            s_set.push(times[i]);
            let (_, interior) = sigma_weights(times, i);
            for (j, _) in interior {
                s_set.push(times[i] - times[j]);
            }
        }
        s_set.sort_by(|a, b| a.partial_cmp(b).unwrap());
        s_set.dedup_by(|a, b| a.to_bits() == b.to_bits());

        let origin = vec![0.0; d];
        let slices: Vec<(u64, Vec<f64>)> = s_set
            .iter()
            .map(|&s| {
                let sl = radial_lattice(grid, |r| sb_gaussian(coef, s, &origin, r));
                (s.to_bits(), sl)
            })
            .collect();
        let mut g = HashMap::new();
        for (bits, sl) in slices {
            let hat = plan.forward(&sl);
            g.insert(bits, (sl, hat));
        }
        let p0: Vec<Vec<f64>> = times
            .iter()
            .map(|&t| radial_lattice(grid, |r| gaussian_r(d, t, r)))
            .collect();
        Ok(TiEngine { grid, plan, g, p0 })
    }

    fn g_hat(&self, s: f64) -> &[Complex<f64>] {
        &self.g[&s.to_bits()].1
    }

    /// One Duhamel iterate. `prev_hat` holds the spectra of `q_{n-1}`
    /// slices; `first` marks `prev = q_0`, which activates the
    /// `F(0) = g(t_i)` endpoint (zero for all later terms).
    fn term_from(
        &self,
        prev_hat: &[Vec<Complex<f64>>],
        first: bool,
    ) -> Result<Vec<Vec<f64>>, NlError> {
        let times = &self.grid.times;
        let dv = self.grid.dx.powi(self.grid.params.d as i32);
        let out: Vec<Vec<f64>> = (0..times.len())
            .into_par_iter()
            .map(|i| {
                let (w0, interior) = sigma_weights(times, i);
                let mut acc = vec![Complex::new(0.0, 0.0); self.plan.spectrum_len()];
                if first && w0 != 0.0 {
                    let gh = self.g_hat(times[i]);
                    for ((a, &g), &dlt) in acc.iter_mut().zip(gh).zip(&self.plan.delta_hat) {
                        *a += w0 * g * dlt;
                    }
                }
                for (j, wj) in interior {
                    let gh = self.g_hat(times[i] - times[j]);
                    let ph = &prev_hat[j];
                    let scale = wj * dv;
                    for ((a, &p), &g) in acc.iter_mut().zip(ph).zip(gh) {
                        *a += scale * p * g;
                    }
                }
                self.plan.inverse_extract(&acc)
            })
            .collect();
        for sl in &out {
            if sl.iter().any(|v| !v.is_finite()) {
                return Err(NlError::NonFinite("series iteration"));
            }
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// x-dependent d = 1 engine (full (x,y) matrices)

struct FullEngine<'a> {
    grid: &'a SpaceTimeGrid,
    /// `s.to_bits() → G_s[a][b] = S^b_z p0(s, ·, y_b)(x_a)`, row-major
    g: HashMap<u64, Vec<f64>>,
    p0: Vec<Vec<f64>>,
}

fn matmul_acc(acc: &mut [f64], a: &[f64], b: &[f64], n: usize, scale: f64) {
    acc.par_chunks_mut(n).enumerate().for_each(|(r, row)| {
        let ar = &a[r * n..(r + 1) * n];
        for (k, &av) in ar.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[k * n..(k + 1) * n];
            let f = scale * av;
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += f * bv;
            }
        }
    });
}

impl<'a> FullEngine<'a> {
    fn new(coef: &'a Coefficient, grid: &'a SpaceTimeGrid) -> Result<Self, NlError> {
        if grid.params.d != 1 {
            return Err(NlError::config("x-dependent builds are d = 1 only"));
        }
        let times = &grid.times;
        let axis = grid.axis();
        let n = grid.n_axis;
        let mut s_set: Vec<f64> = Vec::new();
        for i in 0..times.len() {
            s_set.push(times[i]);
            let (_, interior) = sigma_weights(times, i);
            for (j, _) in interior {
                s_set.push(times[i] - times[j]);
            }
        }
        s_set.sort_by(|a, b| a.partial_cmp(b).unwrap());
        s_set.dedup_by(|a, b| a.to_bits() == b.to_bits());

        let mats: Vec<(u64, Vec<f64>)> = s_set
            .par_iter()
            .map(|&s| {
                let mut m = vec![0.0; n * n];
                for (a, &xa) in axis.iter().enumerate() {
                    for (b, &yb) in axis.iter().enumerate() {
                        m[a * n + b] = sb_gaussian(coef, s, &[xa], xa - yb);
                    }
                }
                (s.to_bits(), m)
            })
            .collect();
        let g = mats.into_iter().collect();
        let p0: Vec<Vec<f64>> = times
            .iter()
            .map(|&t| {
                let mut m = vec![0.0; n * n];
                for (a, &xa) in axis.iter().enumerate() {
                    for (b, &yb) in axis.iter().enumerate() {
                        m[a * n + b] = gaussian_r(1, t, xa - yb);
                    }
                }
                m
            })
            .collect();
        Ok(FullEngine { grid, g, p0 })
    }

    fn term_from(&self, prev: &[Vec<f64>], first: bool) -> Result<Vec<Vec<f64>>, NlError> {
        let times = &self.grid.times;
        let n = self.grid.n_axis;
        let dx = self.grid.dx;
        let mut out = Vec::with_capacity(times.len());
        for i in 0..times.len() {
            let (w0, interior) = sigma_weights(times, i);
            let mut acc = vec![0.0; n * n];
            if first && w0 != 0.0 {
                let g = &self.g[&times[i].to_bits()];
                for (a, &gv) in acc.iter_mut().zip(g) {
                    *a += w0 * gv;
                }
            }
            for (j, wj) in interior {
                let g = &self.g[&(times[i] - times[j]).to_bits()];
                matmul_acc(&mut acc, &prev[j], g, n, wj * dx);
            }
            if acc.iter().any(|v| !v.is_finite()) {
                return Err(NlError::NonFinite("series iteration"));
            }
            out.push(acc);
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// public construction API

/// Sum the Duhamel series on the given grid. The caller is responsible for
/// keeping the horizon within `choose_base_horizon`; a non-contracting
/// series is reported as an error with a suggested smaller horizon.
pub fn build_series(
    coef: &Coefficient,
    grid: &SpaceTimeGrid,
    opts: &BuildOptions,
) -> Result<(KernelTable, ConstructionLog), NlError> {
    if coef.params != grid.params {
        return Err(NlError::GridMismatch(
            "coefficient and grid disagree on (d, β)".into(),
        ));
    }
    let trans_inv = coef.translation_invariant && !opts.force_full;
    let k = grid.k_steps();

    let (mut sum, mut ratios, terms, tail): (Vec<Vec<f64>>, Vec<f64>, usize, f64);
    if trans_inv {
        let engine = TiEngine::new(coef, grid)?;
        sum = engine.p0.clone();
        let mut prev = engine.p0.clone();
        let r = run_series(
            grid,
            opts,
            &mut sum,
            &mut prev,
            |prev, first| {
                let prev_hat: Vec<Vec<Complex<f64>>> =
                    prev.par_iter().map(|sl| engine.plan.forward(sl)).collect();
                engine.term_from(&prev_hat, first)
            },
        )?;
        ratios = r.0;
        terms = r.1;
        tail = r.2;
    } else {
        let engine = FullEngine::new(coef, grid)?;
        sum = engine.p0.clone();
        let mut prev = engine.p0.clone();
        let r = run_series(grid, opts, &mut sum, &mut prev, |prev, first| {
            engine.term_from(prev, first)
        })?;
        ratios = r.0;
        terms = r.1;
        tail = r.2;
    }

    let flat: Vec<f64> = sum.into_iter().flatten().collect();
    let data = if trans_inv {
        TableData::TransInv(flat)
    } else {
        TableData::Full(flat)
    };
    let table = KernelTable::new(grid.clone(), data)?;
    let log = ConstructionLog {
        coef_hash: coef.content_hash().to_string(),
        d: grid.params.d,
        beta: grid.params.beta,
        horizon: grid.horizon(),
        k_steps: k,
        dx: grid.dx,
        half_extent: grid.half_extent,
        n_axis: grid.n_axis,
        translation_invariant: trans_inv,
        terms,
        sup_ratios: std::mem::take(&mut ratios),
        tol: opts.tol,
        tail_bound: tail,
        extensions: 0,
    };
    Ok((table, log))
}

/// Shared series loop: adds terms into `sum`, tracking contraction.
/// Returns `(sup_ratios, n_terms, tail_bound)`.
fn run_series(
    grid: &SpaceTimeGrid,
    opts: &BuildOptions,
    sum: &mut [Vec<f64>],
    prev: &mut Vec<Vec<f64>>,
    mut step: impl FnMut(&[Vec<f64>], bool) -> Result<Vec<Vec<f64>>, NlError>,
) -> Result<(Vec<f64>, usize, f64), NlError> {
    let mut ratios = Vec::new();
    let mut terms = 1; // q_0 counted
    let mut last_rel = 0.0f64;
    for n in 1..=opts.max_terms {
        let term = step(prev, n == 1)?;
        let mut ratio = 0.0f64;
        let mut rel = 0.0f64;
        for i in 0..term.len() {
            let s_new = slice_sup(&term[i]);
            let s_old = slice_sup(&prev[i]);
            let s_sum = slice_sup(&sum[i]);
            if s_old > 0.0 {
                ratio = ratio.max(s_new / s_old);
            }
            if s_sum > 0.0 {
                rel = rel.max(s_new / s_sum);
            }
        }
        for (acc, t) in sum.iter_mut().zip(&term) {
            for (a, v) in acc.iter_mut().zip(t) {
                *a += v;
            }
        }
        ratios.push(ratio);
        terms += 1;
        last_rel = rel;
        if rel < opts.tol {
            let rho = ratio.min(0.9);
            return Ok((ratios, terms, rel * rho / (1.0 - rho)));
        }
        let len = ratios.len();
        if len >= 2 && ratios[len - 1] > 0.9 && ratios[len - 2] > 0.9 {
            return Err(non_contraction(grid, ratio));
        }
        *prev = term;
    }
    // ran out of terms: acceptable only if the remainder is already small
    let rho = ratios.last().copied().unwrap_or(0.0).min(0.9);
    if last_rel > 1e-6 {
        return Err(non_contraction(grid, rho));
    }
    Ok((ratios.clone(), terms, last_rel * rho / (1.0 - rho)))
}

fn non_contraction(grid: &SpaceTimeGrid, ratio: f64) -> NlError {
    let beta = grid.params.beta;
    let shrink = (0.5 / ratio.max(1e-3)).powf(2.0 / (2.0 - beta)).min(0.5);
    NlError::NonContraction {
        ratio,
        suggested_horizon: grid.horizon() * shrink,
    }
}

/// One Duhamel iterate of an arbitrary table (exposes the builder's inner
/// step; mainly for validation). `first` treats `prev` as `q_0`.
pub fn iterate_once(
    prev: &KernelTable,
    coef: &Coefficient,
    first: bool,
) -> Result<KernelTable, NlError> {
    let grid = &prev.grid;
    let k = grid.k_steps();
    let m = prev.slice(0).len();
    let slices: Vec<Vec<f64>> = (0..k).map(|i| prev.slice(i).to_vec()).collect();
    let out = match &prev.data {
        TableData::TransInv(_) => {
            let engine = TiEngine::new(coef, grid)?;
            let prev_hat: Vec<Vec<Complex<f64>>> =
                slices.par_iter().map(|sl| engine.plan.forward(sl)).collect();
            engine.term_from(&prev_hat, first)?
        }
        TableData::Full(_) => {
            let engine = FullEngine::new(coef, grid)?;
            engine.term_from(&slices, first)?
        }
    };
    let flat: Vec<f64> = out.into_iter().flatten().collect();
    debug_assert_eq!(flat.len(), k * m);
    let data = match &prev.data {
        TableData::TransInv(_) => TableData::TransInv(flat),
        TableData::Full(_) => TableData::Full(flat),
    };
    KernelTable::new(grid.clone(), data)
}

/// Full pipeline: pick a horizon, build the base table (shrinking the
/// contraction constant on failure), then extend by Chapman–Kolmogorov
/// until the table covers `t_max`.
pub fn build_kernel(
    coef: &Coefficient,
    t_max: f64,
    opts: &BuildOptions,
) -> Result<(KernelTable, ConstructionLog), NlError> {
    let mut a0 = default_a0(coef);
    let mut last_err = None;
    for _attempt in 0..4 {
        let horizon = choose_base_horizon_with(coef, a0).min(t_max.max(1e-12) * 4.0);
        let grid = SpaceTimeGrid::default_for_coef(coef.params, horizon, coef.support_radius)?;
        match build_series(coef, &grid, opts) {
            Ok((mut table, mut log)) => {
                while table.grid.horizon() < t_max {
                    table = extend_time(&table, 2.0 * table.grid.horizon())?;
                    log.extensions += 1;
                    if log.extensions > 12 {
                        return Err(NlError::config("too many time extensions"));
                    }
                }
                log.horizon = table.grid.horizon();
                return Ok((table, log));
            }
            Err(NlError::NonContraction { ratio, suggested_horizon }) => {
                a0 *= 0.5;
                last_err = Some(NlError::NonContraction {
                    ratio,
                    suggested_horizon,
                });
            }
            Err(e) => return Err(e),
        }
    }
    Err(last_err.unwrap_or_else(|| NlError::config("build failed")))
}

// ---------------------------------------------------------------------------
// Chapman–Kolmogorov time extension

/// Extend a translation-invariant table from horizon `T` to
/// `min(2T, s)` through `q(T + t) = q(T) * q(t)`. The spatial extent is
/// enlarged to keep the truncated Gaussian tail below 1e-5.
pub fn extend_time(table: &KernelTable, s: f64) -> Result<KernelTable, NlError> {
    let grid = &table.grid;
    let t_hi = grid.horizon();
    if s <= t_hi {
        return Err(NlError::config("extension target must exceed the horizon"));
    }
    if s > 2.0 * t_hi * (1.0 + 1e-12) {
        return Err(NlError::config("extension limited to s ≤ 2T per call"));
    }
    if !table.translation_invariant() {
        return Err(NlError::config(
            "time extension requires a translation-invariant table",
        ));
    }
    let d = grid.params.d;
    let n = grid.n_axis;
    let c = (n - 1) / 2;
    let dx = grid.dx;

    // enlarged extent: keep the 8σ rule at the new horizon, never shrink,
    // and stay within the linear-convolution support ±2L
    let l_new = grid.half_extent.max(8.0 * s.sqrt()).min(2.0 * grid.half_extent);
    let half_nodes = (l_new / dx).round() as usize;
    let n_new = 2 * half_nodes + 1;
    if n_new > (1 << 21) {
        return Err(NlError::ExtentOverflow {
            required: l_new,
            cap: (1 << 20) as f64 * dx,
        });
    }
    let c_new = half_nodes;

    // times added: T + t_k for t_k ≤ s - T (thinned when the table is huge)
    let stride = if grid.k_steps() >= 512 { 2 } else { 1 };
    let mut added: Vec<usize> = (0..grid.k_steps())
        .filter(|&k| grid.times[k] <= s - t_hi + 1e-12 * s)
        .collect();
    if stride > 1 {
        let keep_last = *added.last().unwrap_or(&0);
        added = added
            .iter()
            .copied()
            .filter(|&k| k % stride == stride - 1 || k == keep_last)
            .collect();
    }
    if added.is_empty() {
        return Err(NlError::config("no grid times fall in the extension window"));
    }

    let plan = ConvPlan::new(d, n);
    let last = grid.k_steps() - 1;
    let top_hat = plan.forward(table.slice(last));
    let dv = dx.powi(d as i32);

    let new_slices: Vec<Vec<f64>> = added
        .par_iter()
        .map(|&k| {
            let mut hat = plan.forward(table.slice(k));
            for (h, &t) in hat.iter_mut().zip(&top_hat) {
                *h = *h * t * dv;
            }
            // full inverse, then read the linear-convolution window onto
            // the enlarged lattice
            let m = plan.m;
            let full = match d {
                1 => {
                    let mut buf = hat;
                    plan.ifft.process(&mut buf);
                    let norm = 1.0 / m as f64;
                    buf.iter().map(|z| z.re * norm).collect::<Vec<f64>>()
                }
                _ => {
                    let mut buf = hat;
                    plan.fft_rows(&mut buf, true);
                    plan.transpose(&mut buf);
                    plan.fft_rows(&mut buf, true);
                    plan.transpose(&mut buf);
                    let norm = 1.0 / (m * m) as f64;
                    buf.iter().map(|z| z.re * norm).collect::<Vec<f64>>()
                }
            };
            // node j_new sits at coordinate (j_new - c_new)·dx, which is
            // linear-convolution index j_new - c_new + 2c
            match d {
                1 => (0..n_new)
                    .map(|j| {
                        let idx = j as isize - c_new as isize + 2 * c as isize;
                        if idx < 0 || idx > 2 * (n as isize - 1) {
                            0.0
                        } else {
                            full[idx as usize]
                        }
                    })
                    .collect(),
                _ => {
                    let m = plan.m;
                    let mut out = vec![0.0; n_new * n_new];
                    for j1 in 0..n_new {
                        let i1 = j1 as isize - c_new as isize + 2 * c as isize;
                        if i1 < 0 || i1 > 2 * (n as isize - 1) {
                            continue;
                        }
                        for j2 in 0..n_new {
                            let i2 = j2 as isize - c_new as isize + 2 * c as isize;
                            if i2 < 0 || i2 > 2 * (n as isize - 1) {
                                continue;
                            }
                            out[j1 * n_new + j2] = full[i1 as usize * m + i2 as usize];
                        }
                    }
                    out
                }
            }
        })
        .collect();

    // embed the old slices centered in the enlarged lattice
    let embed = |slice: &[f64]| -> Vec<f64> {
        if n_new == n {
            return slice.to_vec();
        }
        let off = c_new - c;
        match d {
            1 => {
                let mut out = vec![0.0; n_new];
                out[off..off + n].copy_from_slice(slice);
                out
            }
            _ => {
                let mut out = vec![0.0; n_new * n_new];
                for i in 0..n {
                    out[(i + off) * n_new + off..(i + off) * n_new + off + n]
                        .copy_from_slice(&slice[i * n..(i + 1) * n]);
                }
                out
            }
        }
    };

    let mut times = grid.times.clone();
    let mut values: Vec<f64> = Vec::new();
    for k in 0..grid.k_steps() {
        values.extend(embed(table.slice(k)));
    }
    for (&k, sl) in added.iter().zip(&new_slices) {
        times.push(t_hi + grid.times[k]);
        values.extend_from_slice(sl);
    }
    let new_grid = SpaceTimeGrid {
        params: grid.params,
        times,
        dx,
        half_extent: half_nodes as f64 * dx,
        n_axis: n_new,
    };
    KernelTable::new(new_grid, TableData::TransInv(values))
}

// ---------------------------------------------------------------------------
// scaling transfer

/// Exact transfer `q^b(t,x,y) = λ^{d/2} q^{b^{(λ)}}(λt, √λ x, √λ y)`:
/// consumes a table built for the rescaled coefficient on the image grid
/// and returns the table for the original coefficient.
pub fn scaling_transfer(table: &KernelTable, lambda: f64) -> Result<KernelTable, NlError> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(NlError::config("lambda must be positive"));
    }
    let g = &table.grid;
    let s = lambda.sqrt();
    let factor = lambda.powf(g.params.d as f64 / 2.0);
    let grid = SpaceTimeGrid {
        params: g.params,
        times: g.times.iter().map(|t| t / lambda).collect(),
        dx: g.dx / s,
        half_extent: g.half_extent / s,
        n_axis: g.n_axis,
    };
    let mut out = KernelTable::new(grid, table.data.clone())?;
    out.map_values(|v| v * factor);
    Ok(out)
}

/// The image grid on which the rescaled coefficient must be built so that
/// `scaling_transfer` is node-exact.
pub fn image_grid(grid: &SpaceTimeGrid, lambda: f64) -> SpaceTimeGrid {
    let s = lambda.sqrt();
    SpaceTimeGrid {
        params: grid.params,
        times: grid.times.iter().map(|t| t * lambda).collect(),
        dx: grid.dx * s,
        half_extent: grid.half_extent * s,
        n_axis: grid.n_axis,
    }
}

// ---------------------------------------------------------------------------
// Duhamel residuals

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResidualForm {
    /// `q = p0 + ∫ q(σ) * S^b p0(t-σ) dσ` (S acting on the Gaussian)
    First,
    /// `q = p0 + ∫ p0(t-σ) * S^b q(σ) dσ` (S acting on the built kernel)
    Second,
}

/// Sup-norm residual of the chosen Duhamel identity, relative to `sup q`.
pub fn duhamel_residual(
    table: &KernelTable,
    coef: &Coefficient,
    form: ResidualForm,
) -> Result<f64, NlError> {
    if !table.translation_invariant() {
        return Err(NlError::config("residual checks expect a displacement table"));
    }
    let grid = &table.grid;
    match form {
        ResidualForm::First => {
            let engine = TiEngine::new(coef, grid)?;
            let slices: Vec<Vec<f64>> =
                (0..grid.k_steps()).map(|i| table.slice(i).to_vec()).collect();
            let hats: Vec<Vec<Complex<f64>>> =
                slices.par_iter().map(|sl| engine.plan.forward(sl)).collect();
            // q(0) = δ makes the σ = 0 endpoint g(t_i), exactly the `first`
            // path of the iteration
            let integral = engine.term_from(&hats, true)?;
            let mut worst = 0.0f64;
            let mut sup_q = 0.0f64;
            for i in 0..grid.k_steps() {
                sup_q = sup_q.max(slice_sup(&slices[i]));
                for ((&q, &p), &c) in slices[i].iter().zip(&engine.p0[i]).zip(&integral[i]) {
                    worst = worst.max((q - p - c).abs());
                }
            }
            Ok(worst / sup_q)
        }
        ResidualForm::Second => {
            if grid.params.d != 1 {
                return Err(NlError::config("second-form residual is d = 1 only"));
            }
            let engine = TiEngine::new(coef, grid)?;
            let slices: Vec<Vec<f64>> =
                (0..grid.k_steps()).map(|i| table.slice(i).to_vec()).collect();
            // S^b applied directly to every stored slice
            let sq: Vec<Vec<f64>> = (0..grid.k_steps())
                .into_par_iter()
                .map(|j| sb_lattice_slice(coef, grid, &slices[j], grid.times[j]))
                .collect();
            let sq_hat: Vec<Vec<Complex<f64>>> =
                sq.par_iter().map(|sl| engine.plan.forward(sl)).collect();
            let p0_hat: Vec<Vec<Complex<f64>>> =
                engine.p0.par_iter().map(|sl| engine.plan.forward(sl)).collect();
            let dv = grid.dx;
            let mut worst = 0.0f64;
            let mut sup_q = 0.0f64;
            let results: Vec<Vec<f64>> = (0..grid.k_steps())
                .into_par_iter()
                .map(|i| {
                    let (w0, interior, w_end) = sigma_weights_closed(&grid.times, i);
                    let mut acc = vec![Complex::new(0.0, 0.0); engine.plan.spectrum_len()];
                    // F(0) = lim p0(t) * S q(σ) = S p0(t) = g(t_i)
                    let gh = engine.g_hat(grid.times[i]);
                    for ((a, &g), &dlt) in acc.iter_mut().zip(gh).zip(&engine.plan.delta_hat) {
                        *a += w0 * g * dlt;
                    }
                    for (j, wj) in interior {
                        // need p0(t_i - t_j): always resolvable by cutoff
                        let ph = p0_slice_hat(&engine, &p0_hat, grid, i, j);
                        let scale = wj * dv;
                        for ((a, &p), &s) in acc.iter_mut().zip(ph.iter()).zip(&sq_hat[j]) {
                            *a += scale * p * s;
                        }
                    }
                    let mut out = engine.plan.inverse_extract(&acc);
                    // F(t_i) = S^b q(t_i), available directly
                    for (o, &s) in out.iter_mut().zip(&sq[i]) {
                        *o += w_end * s;
                    }
                    out
                })
                .collect();
            for i in 0..grid.k_steps() {
                sup_q = sup_q.max(slice_sup(&slices[i]));
                for ((&q, &p), &c) in slices[i].iter().zip(&engine.p0[i]).zip(&results[i]) {
                    worst = worst.max((q - p - c).abs());
                }
            }
            Ok(worst / sup_q)
        }
    }
}

/// Spectrum of `p0(t_i - t_j)`; the difference is itself a grid quantity
/// only when it coincides with a stored time, so fall back to sampling.
fn p0_slice_hat(
    engine: &TiEngine,
    p0_hat: &[Vec<Complex<f64>>],
    grid: &SpaceTimeGrid,
    i: usize,
    j: usize,
) -> Vec<Complex<f64>> {
    let s = grid.times[i] - grid.times[j];
    for (k, &t) in grid.times.iter().enumerate() {
        if (t - s).abs() <= 1e-14 * s.max(t) {
            return p0_hat[k].clone();
        }
    }
    let sl = radial_lattice(grid, |r| gaussian_r(grid.params.d, s, r));
    engine.plan.forward(&sl)
}

/// Quadratic (3-point Lagrange) interpolation of a displacement slice,
/// zero outside the box. Quadratic order matters: the inner part of `S^b`
/// integrates the second difference, which piecewise-linear interpolation
/// would flatten to zero inside a cell.
fn interp_slice(grid: &SpaceTimeGrid, slice: &[f64], y: f64) -> f64 {
    let n = grid.n_axis;
    let c = grid.center() as f64;
    let pos = y / grid.dx + c;
    if pos < 0.0 || pos > (n - 1) as f64 {
        // continue the far field as the power-law tail of the jump part;
        // a hard zero would put a discontinuity at the box edge, which the
        // inner (second-difference) part of S^b amplifies like 1/w²
        let edge = if pos < 0.0 { slice[0] } else { slice[n - 1] };
        let l = grid.half_extent.max(grid.dx);
        return edge * (l / y.abs().max(l)).powf(1.0 + grid.params.beta);
    }
    let j = (pos.round() as usize).clamp(1, n - 2);
    let t = pos - j as f64; // in [-1, 1] around the center node
    let (a, b, cc) = (slice[j - 1], slice[j], slice[j + 1]);
    b + 0.5 * t * (cc - a) + 0.5 * t * t * (cc - 2.0 * b + a)
}

/// `S^b` applied to a gridded displacement slice at every lattice node.
fn sb_lattice_slice(
    coef: &Coefficient,
    grid: &SpaceTimeGrid,
    slice: &[f64],
    t: f64,
) -> Vec<f64> {
    let axis = grid.axis();
    if coef.sup_norm == 0.0 {
        return vec![0.0; axis.len()];
    }
    let scale = t.sqrt();
    axis.iter()
        .map(|&x| {
            let z_max = if coef.support_radius.is_finite() {
                coef.support_radius.max(grid.dx)
            } else {
                x.abs() + grid.half_extent + grid.dx
            };
            apply_sb_1d(
                coef,
                x,
                |y| interp_slice(grid, slice, y),
                scale,
                x.abs(),
                z_max,
            )
        })
        .collect()
}

// ---------------------------------------------------------------------------
// semigroup action and generator identity

/// `(T_t f)(x) = ∫ q(t, x, y) f(y) dy` by lattice trapezoid; `t` must be a
/// grid time and `x` a lattice node (within rounding).
pub fn apply_semigroup(
    table: &KernelTable,
    t: f64,
    x: &[f64],
    f: impl Fn(&[f64]) -> f64,
) -> Result<f64, NlError> {
    let grid = &table.grid;
    let k = grid
        .times
        .iter()
        .position(|&v| (v - t).abs() <= 1e-9 * v.max(t))
        .ok_or_else(|| NlError::GridMismatch(format!("t = {t} is not a grid time")))?;
    let d = grid.params.d;
    let axis = grid.axis();
    let dv = grid.dx.powi(d as i32);
    let xi: Vec<usize> = x
        .iter()
        .map(|&v| {
            grid.index_of(v)
                .ok_or_else(|| NlError::GridMismatch(format!("x = {v} outside the box")))
        })
        .collect::<Result<_, _>>()?;
    let mut total = 0.0;
    match d {
        1 => {
            for (j, &yj) in axis.iter().enumerate() {
                let u = xi[0] as isize - j as isize + grid.center() as isize;
                if u >= 0 && (u as usize) < grid.n_axis {
                    let q = match &table.data {
                        TableData::TransInv(_) => table.slice(k)[u as usize],
                        TableData::Full(_) => table.value_at(k, &[xi[0]], &[j]),
                    };
                    total += q * f(&[yj]) * dv;
                }
            }
        }
        _ => {
            let n = grid.n_axis;
            let c = grid.center() as isize;
            for j1 in 0..n {
                let u1 = xi[0] as isize - j1 as isize + c;
                if u1 < 0 || u1 as usize >= n {
                    continue;
                }
                for j2 in 0..n {
                    let u2 = xi[1] as isize - j2 as isize + c;
                    if u2 < 0 || u2 as usize >= n {
                        continue;
                    }
                    let q = table.slice(k)[u1 as usize * n + u2 as usize];
                    total += q * f(&[axis[j1], axis[j2]]) * dv;
                }
            }
        }
    }
    Ok(total)
}

/// A C²_b test function with its Laplacian, localized around `center`.
pub struct TestFunction {
    pub f: Box<dyn Fn(f64) -> f64 + Sync>,
    pub lap: Box<dyn Fn(f64) -> f64 + Sync>,
    pub center: f64,
    pub width: f64,
    /// ‖f‖_∞ + ‖f′′‖_∞ scale for normalizing defects
    pub c2_norm: f64,
}

impl TestFunction {
    /// Gaussian bump `exp(-(x-c)²/2w²)`.
    pub fn bump(center: f64, width: f64) -> Self {
        let w2 = width * width;
        TestFunction {
            f: Box::new(move |x| (-(x - center) * (x - center) / (2.0 * w2)).exp()),
            lap: Box::new(move |x| {
                let u = x - center;
                ((u * u) / (w2 * w2) - 1.0 / w2) * (-u * u / (2.0 * w2)).exp()
            }),
            center,
            width,
            c2_norm: 1.0 + 1.0 / (width * width),
        }
    }
}

/// Defect of `T_t f = f + ∫₀^t T_s (Δ + S^b) f ds` over the grid times up
/// to `t_max`, sup over central lattice nodes, normalized by `‖f‖_{C²}`.
pub fn generator_check(
    table: &KernelTable,
    coef: &Coefficient,
    tf: &TestFunction,
    t_max: f64,
) -> Result<f64, NlError> {
    let grid = &table.grid;
    if grid.params.d != 1 {
        return Err(NlError::config("generator check is d = 1 only"));
    }
    let axis = grid.axis();
    // L f = Δf + S^b f on the lattice
    let lf: Vec<f64> = axis
        .par_iter()
        .map(|&x| {
            let mut v = (tf.lap)(x);
            if coef.sup_norm > 0.0 {
                let z_max = if coef.support_radius.is_finite() {
                    coef.support_radius.max(tf.width)
                } else {
                    (x - tf.center).abs() + 14.0 * tf.width
                };
                v += apply_sb_1d(coef, x, |y| (tf.f)(y), tf.width, (x - tf.center).abs(), z_max);
            }
            v
        })
        .collect();

    // sample central nodes only — near the box edge the integrals truncate
    let n = grid.n_axis;
    let xs: Vec<usize> = (0..5)
        .map(|k| n / 4 + k * n / 8)
        .filter(|&i| i < n)
        .collect();

    let mut worst = 0.0f64;
    for (i, &t) in grid.times.iter().enumerate() {
        if t > t_max {
            break;
        }
        let (w0, interior, w_end) = sigma_weights_closed(&grid.times, i);
        for &a in &xs {
            let x = [axis[a]];
            let ttf = apply_semigroup(table, t, &x, |y| (tf.f)(y[0]))?;
            // ∫₀^t T_s (Lf) ds: F(0) = Lf(x), F(t_j) and F(t) by semigroup
            let mut integral = w0 * lf[a];
            for &(j, wj) in &interior {
                integral += wj * apply_semigroup(table, grid.times[j], &x, |y| {
                    interp_slice_point(grid, &lf, y[0])
                })?;
            }
            integral += w_end
                * apply_semigroup(table, t, &x, |y| interp_slice_point(grid, &lf, y[0]))?;
            let defect = (ttf - (tf.f)(axis[a]) - integral).abs();
            worst = worst.max(defect / tf.c2_norm);
        }
    }
    Ok(worst)
}

fn interp_slice_point(grid: &SpaceTimeGrid, vals: &[f64], y: f64) -> f64 {
    interp_slice(grid, vals, y)
}
