//! Independent reference computations.
//!
//! Everything in this module is deliberately written *without* reusing the
//! production code paths: the Randers fundamental tensor comes from its
//! textbook closed form instead of automatic differentiation, the conformal
//! flow is solved as a scalar heat-type equation on the base torus instead
//! of through the bundle pipeline, and derivative claims are re-checked by
//! plain central differences.  Agreement between these oracles and the
//! production modules is what the test suite and the scenario checks assert.

use crate::analytic::TAU;
use crate::error::{FinslerError, Result};

/// Closed-form Randers fundamental tensor at one point.
///
/// For F = α + β with α² = a_ij yⁱyʲ and β = b_i yⁱ:
///
/// ```text
/// g_ij = (F/α)(a_ij − ℓ_i ℓ_j) + (ℓ_i + b_i)(ℓ_j + b_j),   ℓ_i = a_ij yʲ/α.
/// ```
///
/// `a` and `b` are the metric and one-form values at the base point; the
/// convexity requirement ‖b‖_a < 1 is enforced.
pub fn randers_closed_form(a: [[f64; 2]; 2], b: [f64; 2], y: [f64; 2]) -> Result<[[f64; 2]; 2]> {
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    let ainv = [
        [a[1][1] / det, -a[0][1] / det],
        [-a[1][0] / det, a[0][0] / det],
    ];
    let mut norm2 = 0.0;
    for i in 0..2 {
        for j in 0..2 {
            norm2 += ainv[i][j] * b[i] * b[j];
        }
    }
    if norm2 >= 1.0 {
        return Err(FinslerError::ConvexityViolated { norm: norm2.sqrt() });
    }
    let alpha2 = a[0][0] * y[0] * y[0] + 2.0 * a[0][1] * y[0] * y[1] + a[1][1] * y[1] * y[1];
    let alpha = alpha2.sqrt();
    let beta = b[0] * y[0] + b[1] * y[1];
    let f = alpha + beta;
    let l = [
        (a[0][0] * y[0] + a[0][1] * y[1]) / alpha,
        (a[1][0] * y[0] + a[1][1] * y[1]) / alpha,
    ];
    let mut g = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            g[i][j] = f / alpha * (a[i][j] - l[i] * l[j]) + (l[i] + b[i]) * (l[j] + b[j]);
        }
    }
    Ok(g)
}

/// Seventh-point, sixth-order periodic second derivative along one axis of a
/// row-major `n1 × n2` array.
fn laplacian(u: &[f64], n1: usize, n2: usize, h1: f64, h2: f64, out: &mut [f64]) {
    const C: [f64; 4] = [-490.0, 270.0, -27.0, 2.0];
    let (s1, s2) = (1.0 / (180.0 * h1 * h1), 1.0 / (180.0 * h2 * h2));
    for i in 0..n1 {
        for j in 0..n2 {
            let mut d1 = C[0] * u[i * n2 + j];
            let mut d2 = d1;
            for (m, &c) in C.iter().enumerate().skip(1) {
                let ip = (i + m) % n1;
                let im = (i + n1 - m) % n1;
                let jp = (j + m) % n2;
                let jm = (j + n2 - m) % n2;
                d1 += c * (u[ip * n2 + j] + u[im * n2 + j]);
                d2 += c * (u[i * n2 + jp] + u[i * n2 + jm]);
            }
            out[i * n2 + j] = d1 * s1 + d2 * s2;
        }
    }
}

/// Reference solver for the conformal-factor flow ∂ₜu = e^{−2u} Δu on the
/// flat 2-torus (the classical scalar reduction of the Riemannian flow in
/// conformal coordinates), with the same sixth-order stencils and RK4 time
/// stepping as the bundle solver but none of its machinery.
///
/// `u0` is row-major `n1 × n2`; returns u(·, T).
pub fn conformal_reference(
    u0: &[f64],
    n1: usize,
    n2: usize,
    t_final: f64,
    dt: f64,
) -> Result<Vec<f64>> {
    assert_eq!(u0.len(), n1 * n2);
    let (h1, h2) = (TAU / n1 as f64, TAU / n2 as f64);
    let steps = (t_final / dt).round().max(1.0) as usize;
    let dt = t_final / steps as f64;

    let n = n1 * n2;
    let mut u = u0.to_vec();
    let mut lap = vec![0.0; n];
    let mut stage = vec![0.0; n];
    let mut k = [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]];

    let rhs = |u: &[f64], lap: &mut [f64], out: &mut [f64], t: f64| -> Result<()> {
        laplacian(u, n1, n2, h1, h2, lap);
        for (idx, (o, (&uv, &lv))) in out.iter_mut().zip(u.iter().zip(lap.iter())).enumerate() {
            *o = (-2.0 * uv).exp() * lv;
            if !o.is_finite() {
                return Err(FinslerError::BlowUp {
                    t,
                    i: idx / n2,
                    j: idx % n2,
                    k: 0,
                    reason: format!("conformal factor rhs became {o}"),
                });
            }
        }
        Ok(())
    };

    for m in 0..steps {
        let t = m as f64 * dt;
        rhs(&u, &mut lap, &mut k[0], t)?;
        for i in 0..n {
            stage[i] = u[i] + 0.5 * dt * k[0][i];
        }
        rhs(&stage, &mut lap, &mut k[1], t + 0.5 * dt)?;
        for i in 0..n {
            stage[i] = u[i] + 0.5 * dt * k[1][i];
        }
        rhs(&stage, &mut lap, &mut k[2], t + 0.5 * dt)?;
        for i in 0..n {
            stage[i] = u[i] + dt * k[2][i];
        }
        rhs(&stage, &mut lap, &mut k[3], t + dt)?;
        for i in 0..n {
            u[i] += dt / 6.0 * (k[0][i] + 2.0 * k[1][i] + 2.0 * k[2][i] + k[3][i]);
        }
    }
    Ok(u)
}

/// Worst relative disagreement between a claimed derivative and fourth-order
/// central differences of `f` at `at`, over the whole step schedule.
///
/// Any derivative produced by the exact-differentiation layer can be fed
/// through this with a one-dimensional probe `s ↦ quantity(p + s·direction)`.
pub fn fd_check(f: impl Fn(f64) -> f64, at: f64, derivative: f64, schedule: &[f64]) -> f64 {
    let mut worst = 0.0f64;
    for &h in schedule {
        let fd = (f(at - 2.0 * h) - 8.0 * f(at - h) + 8.0 * f(at + h) - f(at + 2.0 * h))
            / (12.0 * h);
        let err = (fd - derivative).abs() / (1.0 + derivative.abs());
        worst = worst.max(err);
    }
    worst
}

/// Default step schedule for [`fd_check`]: straddles the sweet spot between
/// truncation (∝ h⁴) and roundoff (∝ ε/h) for O(1) quantities.
pub const FD_SCHEDULE: [f64; 3] = [1e-2, 5e-3, 2.5e-3];

/// Closed-form gauge field of the diagonal metric
/// diag(e^{2ε₁cos x¹}, e^{2ε₂cos x²}) against the flat background:
/// the only surviving connection coefficients are Γ¹₁₁ = −ε₁ sin x¹ and
/// Γ²₂₂ = −ε₂ sin x², so ξᵏ = −a^{kk}Γᵏ_kk componentwise.
pub fn diagonal_gauge_field(eps1: f64, eps2: f64, x1: f64, x2: f64) -> [f64; 2] {
    let u = eps1 * x1.cos();
    let v = eps2 * x2.cos();
    [
        (-2.0 * u).exp() * eps1 * x1.sin(),
        (-2.0 * v).exp() * eps2 * x2.sin(),
    ]
}
